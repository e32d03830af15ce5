//! Held-out evaluation: heightmap MAE overall and per terrain kind, the
//! per-cell error map, a feedback-noise robustness curve, and baseline rows
//! for a constant flat-ground predictor and the non-learned fusion oracle.

use hmap_core::fusion::ElevationBuffer;
use hmap_core::geometry::TerrainKind;
use hmap_core::heightmap::{grid_csv, HeightmapSpec};
use hmap_core::image::write_pgm16_autoscale;
use hmap_core::range_image::scan_points;
use hmap_core::sensor::{depth_to_points, MAX_RANGE};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::dataset::{Dataset, Split};
use crate::episode::{Episode, SensorSuite};
use crate::error::{PipelineError, Result};
use crate::model::{EdsModel, ModalityMode, HEIGHT_OFFSET};
use crate::sequence::{rollout, EpisodeData, RolloutConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Feedback noise levels of the robustness curve, meters.
    pub noise_levels: Vec<f64>,
    pub include_oracle: bool,
    pub include_flat: bool,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { noise_levels: vec![0.0, 0.01, 0.02, 0.03], include_oracle: true, include_flat: true, seed: 3 }
    }
}

/// Predictions of one method for every step of every evaluated episode,
/// base-relative meters.
pub type Predictions = Vec<Vec<Vec<f32>>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub name: String,
    pub mae: f64,
    pub per_kind: BTreeMap<TerrainKind, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisePoint {
    pub sigma: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tool_version: String,
    pub split: Split,
    pub episodes: usize,
    pub samples: usize,
    pub seq_len: Option<usize>,
    pub heightmap: HeightmapSpec,
    /// First row is the evaluated model when there is one.
    pub rows: Vec<MethodRow>,
    /// Per-cell MAE of the first row, `nx` rows by `ny` columns.
    pub error_map: Vec<f64>,
    pub noise_curve: Vec<NoisePoint>,
    pub notes: Vec<String>,
}

impl EvalReport {
    pub fn row(&self, name: &str) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

/// Ground truth and terrain kind per episode, the part every method is
/// scored against.
pub struct Targets<'a> {
    pub kinds: Vec<TerrainKind>,
    pub truth: Vec<&'a [Vec<f32>]>,
}

impl<'a> Targets<'a> {
    pub fn of(eps: &'a [EpisodeData]) -> Self {
        Self { kinds: eps.iter().map(|e| e.kind).collect(), truth: eps.iter().map(|e| e.truth.as_slice()).collect() }
    }

    pub fn samples(&self) -> usize {
        self.truth.iter().map(|t| t.len()).sum()
    }
}

fn check_aligned(targets: &Targets, preds: &Predictions) -> Result<()> {
    let ok = preds.len() == targets.truth.len()
        && preds.iter().zip(&targets.truth).all(|(p, t)| p.len() == t.len() && p.iter().zip(t.iter()).all(|(a, b)| a.len() == b.len()));
    if ok {
        Ok(())
    } else {
        Err(PipelineError::Data("predictions do not match the evaluated episodes".into()))
    }
}

/// Overall and per-kind MAE; every cell of every step weighs the same.
pub fn score(name: &str, targets: &Targets, preds: &Predictions) -> Result<MethodRow> {
    check_aligned(targets, preds)?;
    let mut per: BTreeMap<TerrainKind, (f64, usize)> = BTreeMap::new();
    for ((kind, truth), pred) in targets.kinds.iter().zip(&targets.truth).zip(preds) {
        let e = per.entry(*kind).or_default();
        for (t, p) in truth.iter().zip(pred) {
            for (a, b) in t.iter().zip(p) {
                e.0 += (*a as f64 - *b as f64).abs();
                e.1 += 1;
            }
        }
    }
    let (sum, n) = per.values().fold((0.0, 0usize), |(s, c), (a, b)| (s + a, c + b));
    if n == 0 {
        return Err(PipelineError::Empty("no samples to score"));
    }
    Ok(MethodRow {
        name: name.to_string(),
        mae: sum / n as f64,
        per_kind: per.into_iter().filter(|(_, (_, c))| *c > 0).map(|(k, (s, c))| (k, s / c as f64)).collect(),
    })
}

/// Per-cell MAE in flattening order.
pub fn error_map(targets: &Targets, preds: &Predictions) -> Result<Vec<f64>> {
    check_aligned(targets, preds)?;
    let len = targets.truth.iter().flat_map(|t| t.first()).map(Vec::len).next().ok_or(PipelineError::Empty("error map"))?;
    let mut acc = vec![0.0f64; len];
    let mut n = 0usize;
    for (truth, pred) in targets.truth.iter().zip(preds) {
        for (t, p) in truth.iter().zip(pred) {
            for (a, (x, y)) in acc.iter_mut().zip(t.iter().zip(p)) {
                *a += (*x as f64 - *y as f64).abs();
            }
            n += 1;
        }
    }
    Ok(acc.into_iter().map(|a| a / n as f64).collect())
}

/// Constant flat ground at the nominal stance height.
pub fn flat_predictions(targets: &Targets) -> Predictions {
    targets.truth.iter().map(|t| t.iter().map(|h| vec![-HEIGHT_OFFSET; h.len()]).collect()).collect()
}

/// Fusion-oracle heightmaps of one episode: every scan of both sensors is
/// accumulated in a world-frame elevation buffer that follows the base, and
/// the buffer is queried at each step's pose.
pub fn oracle_episode(ep: &Episode, sensors: &SensorSuite, spec: &HeightmapSpec) -> Vec<Vec<f32>> {
    let Some(first) = ep.samples.first() else { return Vec::new() };
    let mut buf = ElevationBuffer::new(first.pose.position.x, first.pose.position.y);
    let (lidar_mount, depth_mount) = (sensors.lidar.mount(), sensors.depth.mount());
    ep.samples
        .iter()
        .enumerate()
        .map(|(t, s)| {
            buf.recenter(s.pose.position.x, s.pose.position.y);
            let mut world = s.pose.compose(&lidar_mount).transform_points(&scan_points(&sensors.lidar, &s.lidar, MAX_RANGE));
            world.extend(s.pose.compose(&depth_mount).transform_points(&depth_to_points(&sensors.depth, &s.depth, MAX_RANGE)));
            buf.integrate(&world, t as i64);
            buf.query(spec, &s.pose).0.values
        })
        .collect()
}

pub fn oracle_predictions(ds: &Dataset, ids: &[u32]) -> Result<Predictions> {
    let cfg = &ds.manifest.config;
    ids.iter().map(|id| Ok(oracle_episode(&ds.load(*id)?, &cfg.sensors, &cfg.heightmap))).collect()
}

pub fn model_predictions(model: &EdsModel<f32>, eps: &[EpisodeData], seq_len: usize, noise: f64, seed: u64) -> Result<Predictions> {
    rollout(model, eps, &RolloutConfig { seq_len, feedback_noise: noise, seed })
}

/// A trained model to score, prepared on the evaluation split.
pub struct ScoredModel<'a> {
    pub model: &'a EdsModel<f32>,
    pub episodes: &'a [EpisodeData],
    pub seq_len: usize,
}

pub fn mode_row_name(mode: ModalityMode) -> String {
    format!("eds_{}", mode.name())
}

/// Full report. `primary` is the main model (noise curve and error map);
/// `ablations` are extra models scored without noise. Without a primary
/// model the error map belongs to the oracle.
pub fn evaluate(
    ds: &Dataset,
    split: Split,
    primary: Option<&ScoredModel>,
    ablations: &[ScoredModel],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    ds.manifest.check_splits()?;
    let ids = ds.ids(split).to_vec();
    if ids.is_empty() {
        return Err(PipelineError::Empty("evaluation split is empty"));
    }
    let owned;
    let eps: &[EpisodeData] = match primary {
        Some(p) => p.episodes,
        None => {
            let spec = ds.manifest.config.heightmap;
            owned = ids
                .iter()
                .map(|id| {
                    let ep = ds.load(*id)?;
                    Ok(EpisodeData {
                        id: ep.id,
                        kind: ep.kind,
                        states: ep.samples.iter().map(|s| s.state).collect(),
                        truth: ep.samples.iter().map(|s| s.heightmap.clone()).collect(),
                        inputs: [None, None],
                        latents: [None, None],
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            debug_assert!(owned.iter().all(|e| e.truth.iter().all(|t| t.len() == spec.len())));
            &owned
        }
    };
    for m in primary.into_iter().chain(ablations) {
        if m.episodes.iter().map(|e| e.id).ne(ids.iter().copied()) {
            return Err(PipelineError::Data("model episodes are not the evaluation split".into()));
        }
    }
    let targets = Targets::of(eps);
    let mut rows = Vec::new();
    let mut map = None;
    let mut noise_curve = Vec::new();
    let mut notes = Vec::new();
    if let Some(p) = primary {
        let clean = model_predictions(p.model, p.episodes, p.seq_len, 0.0, cfg.seed)?;
        rows.push(score(&mode_row_name(p.model.config.mode), &targets, &clean)?);
        map = Some(error_map(&targets, &clean)?);
        for &sigma in &cfg.noise_levels {
            let mae = if sigma == 0.0 {
                rows[0].mae
            } else {
                score("noise", &targets, &model_predictions(p.model, p.episodes, p.seq_len, sigma, cfg.seed)?)?.mae
            };
            noise_curve.push(NoisePoint { sigma, mae });
        }
        notes.push(format!("closed-loop rollouts reset hidden state and feedback every {} steps", p.seq_len));
    }
    for a in ablations {
        let preds = model_predictions(a.model, a.episodes, a.seq_len, 0.0, cfg.seed)?;
        let name = format!("{}_seq{}", mode_row_name(a.model.config.mode), a.seq_len);
        rows.push(score(&name, &targets, &preds)?);
    }
    if ablations.iter().any(|a| a.model.config.mode != ModalityMode::Fused) {
        notes.push("single-modality rows are separately trained models whose absent latent is a learned constant".into());
    }
    if cfg.include_flat {
        rows.push(score("flat_ground", &targets, &flat_predictions(&targets))?);
    }
    if cfg.include_oracle {
        let preds = oracle_predictions(ds, &ids)?;
        rows.push(score("fusion_oracle", &targets, &preds)?);
        if map.is_none() {
            map = Some(error_map(&targets, &preds)?);
        }
        notes.push("fusion_oracle accumulates every scan since the episode start".into());
    }
    let error_map = match map {
        Some(m) => m,
        None => error_map(&targets, &flat_predictions(&targets))?,
    };
    Ok(EvalReport {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        split,
        episodes: ids.len(),
        samples: targets.samples(),
        seq_len: primary.map(|p| p.seq_len),
        heightmap: ds.manifest.config.heightmap,
        rows,
        error_map,
        noise_curve,
        notes,
    })
}

/// Writes `report.json`, `methods.csv`, `per_kind.csv`, `noise_curve.csv`,
/// `error_map.csv` and `error_map.pgm` into `dir`.
pub fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)?)?;
    let mut methods = String::from("method,mae_m\n");
    let mut kinds = String::from("method,kind,mae_m\n");
    for r in &report.rows {
        let _ = writeln!(methods, "{},{:.6}", r.name, r.mae);
        for (k, v) in &r.per_kind {
            let _ = writeln!(kinds, "{},{},{:.6}", r.name, k.name(), v);
        }
    }
    std::fs::write(dir.join("methods.csv"), methods)?;
    std::fs::write(dir.join("per_kind.csv"), kinds)?;
    let mut noise = String::from("sigma_m,mae_m\n");
    for p in &report.noise_curve {
        let _ = writeln!(noise, "{:.3},{:.6}", p.sigma, p.mae);
    }
    std::fs::write(dir.join("noise_curve.csv"), noise)?;
    let (nx, ny) = (report.heightmap.nx(), report.heightmap.ny());
    let map: Vec<f32> = report.error_map.iter().map(|v| *v as f32).collect();
    if map.len() != nx * ny {
        return Err(PipelineError::Data("error map does not match the heightmap grid".into()));
    }
    std::fs::write(dir.join("error_map.csv"), grid_csv(&map, nx, ny))?;
    let mut pgm = Vec::new();
    write_pgm16_autoscale(&mut pgm, ny, nx, &map)?;
    std::fs::write(dir.join("error_map.pgm"), pgm)?;
    Ok(())
}
