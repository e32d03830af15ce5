//! End-to-end runs of both training stages and the evaluation on a tiny
//! dataset. These check plumbing and determinism, not accuracy.

use hmap_core::geometry::TerrainKind;
use hmap_core::image::MaskedImage;
use hmap_nn::Module;
use hmap_pipeline::dataset::{build_dataset, Dataset, DatasetConfig, Split};
use hmap_pipeline::eval::{evaluate, write_report, EvalConfig, ScoredModel};
use hmap_pipeline::model::{image_batch, EdsModel, Modality, ModalityMode, ModelConfig, HEIGHT_OFFSET};
use hmap_pipeline::sequence::{load_split, rollout, RolloutConfig};
use hmap_pipeline::stage1::{load_stage1, run_stage1, save_stage1, Stage1Config};
use hmap_pipeline::stage2::{load_stage2, run_stage2, save_stage2, Stage2Config};
use std::path::Path;
use std::sync::OnceLock;

fn dataset() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            episodes_per_kind: 4,
            steps_per_episode: 16,
            kinds: vec![TerrainKind::Flat, TerrainKind::StairsUp],
            terrain_footprint: [4.0, 4.0],
            ..DatasetConfig::default()
        };
        build_dataset(&cfg, dir.path(), 1).unwrap();
        dir
    })
    .path()
}

fn stage1_cfg() -> Stage1Config {
    Stage1Config { epochs: 2, batch_size: 8, train_images: 24, val_images: 8, test_images: 8, ..Stage1Config::default() }
}

#[test]
fn stage1_is_deterministic_and_checkpoints_round_trip() {
    let ds = Dataset::open(dataset()).unwrap();
    let model = ModelConfig::default();
    let cfg = stage1_cfg();
    let a = run_stage1(&ds, Modality::Lidar, &model, &cfg, |_| {}).unwrap();
    let b = run_stage1(&ds, Modality::Lidar, &model, &cfg, |_| {}).unwrap();
    assert_eq!(format!("{:?}", a.summary), format!("{:?}", b.summary));
    assert_eq!(a.summary.curve.len(), 3);
    assert!(a.summary.best_val_loss < a.summary.initial_val_loss);
    assert!(a.summary.test.is_some());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("lidar.edsw");
    save_stage1(&path, &a, &model, &cfg).unwrap();
    let (ae, summary, cfg_back) = load_stage1(&path).unwrap();
    assert_eq!(cfg_back, model);
    assert_eq!(summary.best_epoch, a.summary.best_epoch);
    assert!(ae.params().iter().zip(a.autoencoder.params()).all(|(p, q)| p.value == q.value));
    let again = dir.path().join("again.edsw");
    save_stage1(&again, &b, &model, &cfg).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn stage2_trains_evaluates_and_reports() {
    let ds = Dataset::open(dataset()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let model = ModelConfig::default();
    let s1 = run_stage1(&ds, Modality::Depth, &model, &stage1_cfg(), |_| {}).unwrap();
    let depth_ckpt = dir.path().join("depth.edsw");
    save_stage1(&depth_ckpt, &s1, &model, &stage1_cfg()).unwrap();

    let cfg = Stage2Config { epochs: 4, seq_len: 8, warmup_epochs: 2, encoder_lr_scale: 0.0, lr: 1e-3, ..Stage2Config::default() };
    let run = || run_stage2(&ds, &model, &cfg, &[(Modality::Depth, depth_ckpt.as_path())], |_| {}).unwrap();
    let out = run();
    assert_eq!(out.summary.pretrained_encoders, vec![Modality::Depth]);
    assert_eq!(out.summary.curve.len(), 5);
    assert!(out.summary.curve[1].ground_truth_feedback && !out.summary.curve[3].ground_truth_feedback);
    assert!(out.summary.best_val_mae < out.summary.initial_val_mae);
    let enc_before = s1.autoencoder.encoder.params();
    let enc_after = out.model.encoder(Modality::Depth).unwrap().params();
    assert!(enc_before.iter().zip(enc_after).all(|(p, q)| p.value == q.value), "frozen encoder moved");

    let ckpt = dir.path().join("eds.edsw");
    save_stage2(&ckpt, &out, &cfg).unwrap();
    let again = dir.path().join("eds2.edsw");
    save_stage2(&again, &run(), &cfg).unwrap();
    assert_eq!(std::fs::read(&ckpt).unwrap(), std::fs::read(&again).unwrap());

    let (loaded, loaded_cfg, _) = load_stage2(&ckpt).unwrap();
    assert_eq!(loaded_cfg.stage2, cfg);
    let test = load_split(&ds, Split::Test, &loaded, false).unwrap();
    let report = |m: &EdsModel<f32>| {
        let primary = ScoredModel { model: m, episodes: &test, seq_len: 8 };
        evaluate(&ds, Split::Test, Some(&primary), &[], &EvalConfig::default()).unwrap()
    };
    let r1 = report(&loaded);
    let r2 = report(&out.model);
    assert_eq!(r1, r2);
    assert_eq!(r1.rows[0].name, "eds_fused");
    assert!(r1.row("flat_ground").is_some() && r1.row("fusion_oracle").is_some());
    assert_eq!(r1.noise_curve.len(), 4);
    assert_eq!(r1.error_map.len(), 165);
    assert!(r1.error_map.iter().all(|v| v.is_finite()));
    let out_dir = dir.path().join("report");
    write_report(&out_dir, &r1).unwrap();
    for f in ["report.json", "methods.csv", "per_kind.csv", "noise_curve.csv", "error_map.csv", "error_map.pgm"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }

    // all-invalid depth after an informative history stays in a sane band
    let ep = &test[0];
    let mut hidden = loaded.zero_hidden(1);
    let mut prev = loaded.zero_prior(1);
    let episode = ds.load(ep.id).unwrap();
    for t in 0..8 {
        let depth = if t == 7 {
            MaskedImage::invalid(160, 120)
        } else {
            episode.samples[t].input(Modality::Depth).unwrap()
        };
        let lidar = episode.samples[t].input(Modality::Lidar).unwrap();
        let state = hmap_pipeline::model::rows_tensor::<f32>(&[&ep.states[t]], 0.0).unwrap();
        let (y, h, _) = loaded
            .step(Some(&image_batch(&[&depth]).unwrap()), Some(&image_batch(&[&lidar]).unwrap()), &state, &prev, &hidden)
            .unwrap();
        assert!(y.is_finite());
        assert!(y.data().iter().all(|v| (v - HEIGHT_OFFSET).abs() <= 1.5));
        hidden = h;
        prev = y;
    }
}

#[test]
fn fine_tuning_moves_encoders_and_single_modality_models_train() {
    let ds = Dataset::open(dataset()).unwrap();
    let model = ModelConfig { mode: ModalityMode::LidarOnly, ..ModelConfig::default() };
    let cfg = Stage2Config { epochs: 1, seq_len: 16, encoder_lr_scale: 0.1, pretrained: false, ..Stage2Config::default() };
    let init = EdsModel::<f32>::new(&model).unwrap();
    let out = run_stage2(&ds, &model, &cfg, &[], |_| {}).unwrap();
    assert!(out.summary.pretrained_encoders.is_empty());
    let before = init.encoder(Modality::Lidar).unwrap().params();
    let after = out.model.encoder(Modality::Lidar).unwrap().params();
    if out.summary.best_epoch == 1 {
        assert!(before.iter().zip(after).any(|(p, q)| p.value != q.value));
    }
    assert!(out.model.encoder(Modality::Depth).is_none());
}

#[test]
fn rollout_feeds_back_its_own_previous_output() {
    let ds = Dataset::open(dataset()).unwrap();
    let m = EdsModel::<f32>::new(&ModelConfig::default()).unwrap();
    let eps = load_split(&ds, Split::Val, &m, false).unwrap();
    let preds = rollout(&m, &eps[..1], &RolloutConfig { seq_len: 5, feedback_noise: 0.0, seed: 0 }).unwrap();
    let e = &eps[0];
    let mut hidden = m.zero_hidden(1);
    let mut prev = m.zero_prior(1);
    for t in 0..e.len() {
        if t % 5 == 0 {
            hidden = m.zero_hidden(1);
            prev = m.zero_prior(1);
        }
        let row = |v: &Vec<f32>| hmap_pipeline::model::rows_tensor::<f32>(&[v.as_slice()], 0.0).unwrap();
        let zd = row(&e.latents[0].as_ref().unwrap()[t]);
        let zl = row(&e.latents[1].as_ref().unwrap()[t]);
        let s = hmap_pipeline::model::rows_tensor::<f32>(&[&e.states[t]], 0.0).unwrap();
        let (y, h, _) = m.core_forward(&zd, &zl, &s, &prev, &hidden).unwrap();
        let meters: Vec<f32> = y.data().iter().map(|v| v - HEIGHT_OFFSET).collect();
        assert_eq!(meters, preds[0][t]);
        hidden = h;
        prev = y;
    }
}
