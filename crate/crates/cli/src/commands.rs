use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::time::Instant;

use hmap_core::image::write_pgm16_autoscale;
use hmap_core::range_image::{pixel_of, preprocess, rasterize};
use hmap_core::rng::SplitMix64;
use hmap_core::sensor::{lidar_scan_with, RayCaster, MAX_RANGE, MIN_RANGE};
use hmap_core::terrain::{generate, randomized_spec, TerrainSpec};
use hmap_core::{PointCloud, Pose, TerrainKind};
use hmap_pipeline::dataset::{build_dataset, Dataset, Split};
use hmap_pipeline::eval::{evaluate, write_report, ScoredModel};
use hmap_pipeline::model::{EdsModel, Modality, HEIGHT_OFFSET};
use hmap_pipeline::sequence::{load_split, EpisodeData};
use hmap_pipeline::stage1::{load_stage1, run_stage1, save_stage1, Stage1Summary};
use hmap_pipeline::stage2::{load_stage2, run_stage2, save_stage2, Stage2Summary};
use serde::Serialize;
use serde_json::json;

use crate::config::{resolve_out, write_provenance, RunConfig};
use crate::failure::Failure;
use crate::{Cli, Command};

pub fn run(cli: &Cli) -> Result<(), Failure> {
    let jobs = cli.jobs()?;
    match &cli.command {
        Command::Terrain { kind, seed, randomize, out, preview, scan, config } => {
            terrain(*kind, *seed, *randomize, out.clone(), *preview, *scan, config.as_deref())
        }
        Command::Dataset { config, out } => dataset(config.as_deref(), out.clone(), jobs),
        Command::Project { cloud, out } => project(cloud, out),
        Command::Pretrain { config, modality, dataset, out } => pretrain(config.as_deref(), *modality, dataset.clone(), out.clone()),
        Command::Train { config, mode, seq, dataset, stage1, out } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            if let Some(m) = mode {
                cfg.model.mode = *m;
            }
            if let Some(s) = seq {
                cfg.stage2.seq_len = *s;
            }
            cfg.validate()?;
            train(cfg, dataset.clone(), stage1, out.clone())
        }
        Command::Eval { checkpoint, oracle: _, ablations, dataset, split, config, out } => {
            eval(checkpoint.as_deref(), ablations, dataset.clone(), *split, config.as_deref(), out.clone())
        }
        Command::Bench { scan_count, seed, out } => bench(*scan_count, *seed, out.clone()),
    }
}

fn dataset_path(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf, Failure> {
    flag.or_else(|| cfg.paths.dataset.clone())
        .ok_or_else(|| Failure::usage("no dataset given (use --dataset or paths.dataset)"))
}

fn terrain(
    kind: TerrainKind,
    seed: u64,
    randomize: bool,
    out: Option<PathBuf>,
    preview: bool,
    scan: bool,
    config: Option<&Path>,
) -> Result<(), Failure> {
    let cfg = RunConfig::load(config)?;
    let mut spec = if randomize { randomized_spec(kind, seed) } else { TerrainSpec::new(kind, seed) };
    spec.footprint = cfg.dataset.terrain_footprint;
    let field = generate(&spec)?;
    let dir = resolve_out(out, "terrain");
    write_provenance(&dir, &cfg, "terrain", json!({ "kind": kind, "seed": seed, "randomize": randomize, "preview": preview, "scan": scan }))?;
    field.save(&dir.join("terrain.hfld"))?;
    let (lo, hi) = field.min_max();
    std::fs::write(
        dir.join("terrain.json"),
        serde_json::to_string_pretty(&json!({ "spec": spec, "nx": field.nx(), "ny": field.ny(), "cell_size": field.cell_size(), "min_height": lo, "max_height": hi }))?,
    )?;
    if preview {
        // y up, x to the right
        let (nx, ny) = (field.nx(), field.ny());
        let img: Vec<f32> = (0..ny).flat_map(|r| (0..nx).map(move |c| (c, ny - 1 - r))).map(|(ix, iy)| field.cell(ix, iy)).collect();
        let mut w = BufWriter::new(File::create(dir.join("terrain.pgm"))?);
        write_pgm16_autoscale(&mut w, nx, ny, &img)?;
    }
    if scan {
        let (x0, x1, y0, y1) = field.bounds();
        let (x, y) = (0.5 * (x0 + x1), 0.5 * (y0 + y1));
        let pose = Pose::from_xyz_rpy(x, y, field.height_at(x, y)? + HEIGHT_OFFSET as f64, 0.0, 0.0, 0.0);
        let cloud = lidar_scan_with(&cfg.dataset.sensors.lidar, &pose, &RayCaster::new(&field))?;
        let mut w = BufWriter::new(File::create(dir.join("scan.pcld"))?);
        cloud.write_to(&mut w)?;
    }
    println!("{}", dir.display());
    Ok(())
}

fn dataset(config: Option<&Path>, out: Option<PathBuf>, jobs: usize) -> Result<(), Failure> {
    let cfg = RunConfig::load(config)?;
    let dir = resolve_out(out, "dataset");
    write_provenance(&dir, &cfg, "dataset", json!({ "jobs": jobs }))?;
    let t = Instant::now();
    let manifest = build_dataset(&cfg.dataset, &dir, jobs)?;
    eprintln!("{} episodes, {} samples in {:.1} s", manifest.episodes.len(), manifest.sample_count, t.elapsed().as_secs_f64());
    println!("{}", dir.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct ProjectionReport {
    tool_version: &'static str,
    cloud: PathBuf,
    points: usize,
    points_in_fov: usize,
    raw_valid_pixels: usize,
    width: usize,
    height: usize,
    min_range: f32,
    max_range: f32,
}

fn project(cloud_path: &Path, out: &Path) -> Result<(), Failure> {
    let cloud = PointCloud::read_from(&mut BufReader::new(File::open(cloud_path)?))?;
    let raw = rasterize(&cloud);
    let img = preprocess(&cloud)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(File::create(out)?);
    img.write_pgm(&mut w, MIN_RANGE, MAX_RANGE)?;
    let (lo, hi) = img.values.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    let report = ProjectionReport {
        tool_version: env!("CARGO_PKG_VERSION"),
        cloud: cloud_path.to_path_buf(),
        points: cloud.len(),
        points_in_fov: cloud.points.iter().filter(|p| pixel_of(p).is_some()).count(),
        raw_valid_pixels: raw.valid_count(),
        width: img.width,
        height: img.height,
        min_range: lo,
        max_range: hi,
    };
    let mut sidecar = out.as_os_str().to_owned();
    sidecar.push(".json");
    std::fs::write(PathBuf::from(sidecar), serde_json::to_string_pretty(&report)?)?;
    Ok(())
}

fn pretrain(config: Option<&Path>, modality: Modality, dataset: Option<PathBuf>, out: Option<PathBuf>) -> Result<(), Failure> {
    let cfg = RunConfig::load(config)?;
    let ds = Dataset::open(&dataset_path(dataset, &cfg)?)?;
    let dir = resolve_out(out, &format!("pretrain_{}", modality.name()));
    write_provenance(&dir, &cfg, "pretrain", json!({ "modality": modality, "dataset": ds.root }))?;
    let t = Instant::now();
    let outcome = run_stage1(&ds, modality, &cfg.model, &cfg.stage1, |r| {
        eprintln!("epoch {:>3}  val {:.6}  lr {:.2e}  {:.0} s", r.epoch, r.val_loss, r.lr, t.elapsed().as_secs_f64());
    })?;
    save_stage1(&dir.join(format!("stage1_{}.edsw", modality.name())), &outcome, &cfg.model, &cfg.stage1)?;
    write_stage1_summary(&dir, modality, &outcome.summary)?;
    println!("{}", serde_json::to_string_pretty(&outcome.summary.test)?);
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.8}")).unwrap_or_default()
}

/// Named per modality so both pretraining runs can share a directory.
fn write_stage1_summary(dir: &Path, modality: Modality, s: &Stage1Summary) -> Result<(), Failure> {
    let name = modality.name();
    std::fs::write(dir.join(format!("stage1_{name}_summary.json")), serde_json::to_string_pretty(s)?)?;
    let mut csv = String::from("epoch,train_loss,val_loss,lr\n");
    for r in &s.curve {
        let _ = writeln!(csv, "{},{},{:.8},{:e}", r.epoch, opt(r.train_loss), r.val_loss, r.lr);
    }
    std::fs::write(dir.join(format!("stage1_{name}_curve.csv")), csv)?;
    Ok(())
}

fn write_stage2_summary(dir: &Path, s: &Stage2Summary) -> Result<(), Failure> {
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(s)?)?;
    let mut csv = String::from("epoch,train_loss,val_loss,val_mae_m,lr,ground_truth_feedback\n");
    for r in &s.curve {
        let _ = writeln!(csv, "{},{},{:.8},{:.6},{:e},{}", r.epoch, opt(r.train_loss), r.val_loss, r.val_mae, r.lr, r.ground_truth_feedback);
    }
    std::fs::write(dir.join("curve.csv"), csv)?;
    Ok(())
}

fn train(cfg: RunConfig, dataset: Option<PathBuf>, stage1_flags: &[PathBuf], out: Option<PathBuf>) -> Result<(), Failure> {
    let ds = Dataset::open(&dataset_path(dataset, &cfg)?)?;
    if ds.manifest.config.heightmap != cfg.model.heightmap {
        return Err(Failure::data("dataset heightmap differs from model.heightmap"));
    }
    let mut stage1: Vec<(Modality, PathBuf)> = Vec::new();
    let configured = [(Modality::Depth, &cfg.paths.stage1_depth), (Modality::Lidar, &cfg.paths.stage1_lidar)];
    for (m, p) in configured {
        if let Some(p) = p {
            stage1.push((m, p.clone()));
        }
    }
    for p in stage1_flags {
        let (_, summary, _) = load_stage1(p)?;
        stage1.retain(|(m, _)| *m != summary.modality);
        stage1.push((summary.modality, p.clone()));
    }
    let refs: Vec<(Modality, &Path)> = stage1.iter().map(|(m, p)| (*m, p.as_path())).collect();
    let dir = resolve_out(out, &format!("train_{}_seq{}", cfg.model.mode.name(), cfg.stage2.seq_len));
    write_provenance(&dir, &cfg, "train", json!({ "dataset": ds.root, "stage1": stage1 }))?;
    let t = Instant::now();
    let outcome = run_stage2(&ds, &cfg.model, &cfg.stage2, &refs, |r| {
        eprintln!(
            "epoch {:>3}  val mse {:.6}  val mae {:.4} m  lr {:.2e}{}  {:.0} s",
            r.epoch,
            r.val_loss,
            r.val_mae,
            r.lr,
            if r.ground_truth_feedback { "  (teacher forcing)" } else { "" },
            t.elapsed().as_secs_f64()
        );
    })?;
    save_stage2(&dir.join("eds.edsw"), &outcome, &cfg.stage2)?;
    write_stage2_summary(&dir, &outcome.summary)?;
    println!("best val mae {:.4} m at epoch {}", outcome.summary.best_val_mae, outcome.summary.best_epoch);
    Ok(())
}

type Loaded = (EdsModel<f32>, Vec<EpisodeData>, usize);

fn scored(l: &Loaded) -> ScoredModel<'_> {
    ScoredModel { model: &l.0, episodes: &l.1, seq_len: l.2 }
}

fn eval(
    checkpoint: Option<&Path>,
    ablation_paths: &[PathBuf],
    dataset: Option<PathBuf>,
    split: Split,
    config: Option<&Path>,
    out: Option<PathBuf>,
) -> Result<(), Failure> {
    let cfg = RunConfig::load(config)?;
    let ds = Dataset::open(&dataset_path(dataset, &cfg)?)?;
    let load = |p: &Path| -> Result<Loaded, Failure> {
        let (model, ckpt_cfg, _) = load_stage2(p)?;
        if model.config.heightmap != ds.manifest.config.heightmap {
            return Err(Failure::data(format!("{} was trained on a different heightmap", p.display())));
        }
        let episodes = load_split(&ds, split, &model, false)?;
        Ok((model, episodes, ckpt_cfg.stage2.seq_len))
    };
    let primary = checkpoint.map(load).transpose()?;
    let ablations = ablation_paths.iter().map(|p| load(p)).collect::<Result<Vec<_>, _>>()?;
    let primary_scored = primary.as_ref().map(scored);
    let ablation_scored: Vec<ScoredModel> = ablations.iter().map(scored).collect();
    let mut eval_cfg = cfg.eval.clone();
    if primary.is_none() {
        eval_cfg.include_oracle = true;
    }
    let report = evaluate(&ds, split, primary_scored.as_ref(), &ablation_scored, &eval_cfg)?;
    let dir = resolve_out(out, "eval");
    write_provenance(
        &dir,
        &cfg,
        "eval",
        json!({ "checkpoint": checkpoint, "oracle": checkpoint.is_none(), "ablations": ablation_paths, "dataset": ds.root, "split": split }),
    )?;
    write_report(&dir, &report)?;
    for r in &report.rows {
        println!("{:<24} {:.4} m", r.name, r.mae);
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct BenchReport {
    tool_version: &'static str,
    scans: usize,
    mean_ms: f64,
    median_ms: f64,
    p95_ms: f64,
    max_ms: f64,
    budget_ms: f64,
    within_budget: bool,
}

fn bench(scan_count: usize, seed: u64, out: Option<PathBuf>) -> Result<(), Failure> {
    if scan_count == 0 {
        return Err(Failure::usage("--scan-count must be at least 1"));
    }
    let cfg = RunConfig::default();
    let lidar = &cfg.dataset.sensors.lidar;
    let mut rng = SplitMix64::new(seed);
    let mut clouds = Vec::with_capacity(scan_count);
    let per_field = 25;
    for chunk in 0..scan_count.div_ceil(per_field) {
        let kind = TerrainKind::ALL[chunk % TerrainKind::ALL.len()];
        let mut spec = randomized_spec(kind, seed.wrapping_add(chunk as u64));
        spec.footprint = [6.0, 6.0];
        let field = generate(&spec)?;
        let caster = RayCaster::new(&field);
        for _ in 0..per_field.min(scan_count - clouds.len()) {
            let (x, y) = (rng.uniform(1.5, 4.5), rng.uniform(1.5, 4.5));
            let yaw = rng.uniform(-std::f64::consts::PI, std::f64::consts::PI);
            let pose = Pose::from_xyz_rpy(x, y, field.height_at(x, y)? + HEIGHT_OFFSET as f64, 0.0, 0.0, yaw);
            clouds.push(lidar_scan_with(lidar, &pose, &caster)?);
        }
    }
    let mut times = Vec::with_capacity(scan_count);
    for cloud in &clouds {
        let t = Instant::now();
        let img = preprocess(cloud)?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(img);
    }
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    let mut sorted = times.clone();
    sorted.sort_by(f64::total_cmp);
    let at = |q: f64| sorted[((q * (sorted.len() - 1) as f64).round() as usize).min(sorted.len() - 1)];
    let budget = 10.0;
    let report = BenchReport {
        tool_version: env!("CARGO_PKG_VERSION"),
        scans: scan_count,
        mean_ms: mean,
        median_ms: at(0.5),
        p95_ms: at(0.95),
        max_ms: sorted[sorted.len() - 1],
        budget_ms: budget,
        within_budget: mean < budget,
    };
    let text = serde_json::to_string_pretty(&report)?;
    if let Some(dir) = out {
        write_provenance(&dir, &cfg, "bench", json!({ "scan_count": scan_count, "seed": seed }))?;
        std::fs::write(dir.join("bench.json"), &text)?;
    }
    println!("{text}");
    Ok(())
}
