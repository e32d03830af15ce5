//! Stage 1: denoising autoencoder pretraining of one sensor branch.
//!
//! Clean images come from the dataset; inputs are corrupted with point
//! noise and elliptical occlusions drawn afresh every epoch. The loss is a
//! masked MSE over pixels that are valid in the clean image. Validation and
//! test corruptions are fixed so that curves are comparable across epochs.

use hmap_core::image::MaskedImage;
use hmap_core::rng::{derive_seed, SplitMix64};
use hmap_core::sensor::corrupt;
use hmap_nn::{clip_grad_norm, masked_mse, AdamW, Checkpoint, Module, PlateauSchedule, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::Path;

use crate::dataset::{Dataset, Split};
use crate::error::{PipelineError, Result};
use crate::model::{image_batch, Autoencoder, Modality, ModelConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub noise_sigma: f64,
    pub max_occlusion: f64,
    pub train_images: usize,
    pub val_images: usize,
    pub test_images: usize,
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 0.01,
            noise_sigma: 0.01,
            max_occlusion: 0.03,
            train_images: 2400,
            val_images: 256,
            test_images: 256,
            grad_clip: None,
            seed: 1,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.train_images == 0 || self.val_images == 0 {
            return Err(PipelineError::Config("stage 1 needs epochs, a batch size and images".into()));
        }
        if !(self.lr > 0.0) || !(self.noise_sigma >= 0.0) || !(0.0..=0.2).contains(&self.max_occlusion) {
            return Err(PipelineError::Config("stage 1 rates out of range".into()));
        }
        Ok(())
    }
}

/// Clean images of one modality together with the episode each came from.
#[derive(Debug, Clone)]
pub struct ImageSet {
    pub modality: Modality,
    pub episode_ids: Vec<u32>,
    pub images: Vec<MaskedImage>,
}

impl ImageSet {
    /// Up to `limit` images of a split, chosen by a seeded shuffle over all
    /// (episode, step) pairs and kept in dataset order.
    pub fn load(ds: &Dataset, split: Split, modality: Modality, limit: usize, seed: u64) -> Result<Self> {
        let mut pairs: Vec<(u32, usize)> = Vec::new();
        for id in ds.ids(split) {
            let steps = ds.manifest.entry(*id).map_or(0, |e| e.steps);
            pairs.extend((0..steps).map(|t| (*id, t)));
        }
        if pairs.is_empty() {
            return Err(PipelineError::Empty("split has no samples"));
        }
        SplitMix64::new(seed).shuffle(&mut pairs);
        pairs.truncate(limit);
        pairs.sort_unstable();
        let mut set = Self { modality, episode_ids: Vec::new(), images: Vec::new() };
        let mut i = 0;
        while i < pairs.len() {
            let id = pairs[i].0;
            let ep = ds.load(id)?;
            while i < pairs.len() && pairs[i].0 == id {
                set.images.push(ep.samples[pairs[i].1].input(modality)?);
                set.episode_ids.push(id);
                i += 1;
            }
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn episodes(&self) -> BTreeSet<u32> {
        self.episode_ids.iter().copied().collect()
    }
}

/// Every image of a batch must come from an allowed episode.
pub fn check_batch_episodes(batch_ids: &[u32], allowed: &BTreeSet<u32>) -> Result<()> {
    match batch_ids.iter().find(|id| !allowed.contains(id)) {
        Some(id) => Err(PipelineError::Leakage(format!("episode {id} is not in the training split"))),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// `None` for the evaluation before the first epoch.
    pub train_loss: Option<f64>,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiseReport {
    pub images: usize,
    pub initial_mse: f64,
    pub trained_mse: f64,
    /// `initial_mse / trained_mse`.
    pub reduction: f64,
    /// Share of images whose reconstruction is closer to the clean image
    /// than the corrupted input is.
    pub denoised_fraction: f64,
    pub median_denoise_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Summary {
    pub modality: Modality,
    pub train_images: usize,
    pub val_images: usize,
    pub initial_val_loss: f64,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub curve: Vec<EpochRecord>,
    pub test: Option<DenoiseReport>,
}

pub struct Stage1Outcome {
    pub autoencoder: Autoencoder<f32>,
    pub summary: Stage1Summary,
}

fn corrupted(set: &ImageSet, idx: usize, seed: u64, cfg: &Stage1Config) -> Result<MaskedImage> {
    Ok(corrupt(&set.images[idx], seed, cfg.noise_sigma, cfg.max_occlusion)?)
}

fn batch_tensors(
    set: &ImageSet,
    idx: &[usize],
    seeds: impl Fn(usize) -> u64,
    cfg: &Stage1Config,
) -> Result<Option<(Tensor<f32>, Tensor<f32>, Vec<bool>)>> {
    let noisy = idx.iter().map(|&i| corrupted(set, i, seeds(i), cfg)).collect::<Result<Vec<_>>>()?;
    let clean: Vec<&MaskedImage> = idx.iter().map(|&i| &set.images[i]).collect();
    let mask: Vec<bool> = clean.iter().flat_map(|im| im.valid.iter().copied()).collect();
    if !mask.iter().any(|m| *m) {
        return Ok(None);
    }
    let x = image_batch(&noisy.iter().collect::<Vec<_>>())?;
    let y = image_batch(&clean)?;
    Ok(Some((x, y, mask)))
}

fn eval_seed(seed: u64, i: usize) -> u64 {
    derive_seed(seed ^ 0xe7a1, i as u64)
}

/// Pixel-pooled masked MSE of the autoencoder on fixed corruptions.
pub fn evaluate_loss(ae: &Autoencoder<f32>, set: &ImageSet, cfg: &Stage1Config, seed: u64) -> Result<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(cfg.batch_size) {
        if let Some((x, y, mask)) = batch_tensors(set, chunk, |i| eval_seed(seed, i), cfg)? {
            let (loss, _) = masked_mse(&ae.reconstruct(&x)?, &y, &mask)?;
            let n = mask.iter().filter(|m| **m).count();
            sum += loss * n as f64;
            count += n;
        }
    }
    if count == 0 {
        return Err(PipelineError::Empty("no valid pixels in evaluation set"));
    }
    Ok(sum / count as f64)
}

/// Held-out comparison of an untrained and a trained autoencoder.
pub fn denoise_report(
    initial: &Autoencoder<f32>,
    trained: &Autoencoder<f32>,
    set: &ImageSet,
    cfg: &Stage1Config,
    seed: u64,
) -> Result<DenoiseReport> {
    let initial_mse = evaluate_loss(initial, set, cfg, seed)?;
    let trained_mse = evaluate_loss(trained, set, cfg, seed)?;
    let mut ratios = Vec::with_capacity(set.len());
    for i in 0..set.len() {
        let clean = &set.images[i];
        if clean.valid_count() == 0 {
            continue;
        }
        let noisy = corrupted(set, i, eval_seed(seed, i), cfg)?;
        let x = image_batch::<f32>(&[&noisy])?;
        let y = image_batch::<f32>(&[clean])?;
        let (rec, _) = masked_mse(&trained.reconstruct(&x)?, &y, &clean.valid)?;
        let (inp, _) = masked_mse(&x, &y, &clean.valid)?;
        ratios.push(if inp > 0.0 { rec / inp } else { f64::INFINITY });
    }
    if ratios.is_empty() {
        return Err(PipelineError::Empty("no valid test images"));
    }
    let denoised = ratios.iter().filter(|r| **r < 1.0).count() as f64 / ratios.len() as f64;
    ratios.sort_by(f64::total_cmp);
    Ok(DenoiseReport {
        images: ratios.len(),
        initial_mse,
        trained_mse,
        reduction: initial_mse / trained_mse,
        denoised_fraction: denoised,
        median_denoise_ratio: ratios[ratios.len() / 2],
    })
}

fn snapshot(ae: &Autoencoder<f32>) -> Vec<Tensor<f32>> {
    ae.params().iter().map(|p| p.value.clone()).collect()
}

fn restore(ae: &mut Autoencoder<f32>, values: &[Tensor<f32>]) {
    for (p, v) in ae.params_mut().into_iter().zip(values) {
        p.value = v.clone();
    }
}

/// Trains on `train`, selects the best epoch on `val`. The returned
/// autoencoder carries the best validation weights.
pub fn train_autoencoder(
    modality: Modality,
    model: &ModelConfig,
    cfg: &Stage1Config,
    train: &ImageSet,
    val: &ImageSet,
    train_split: &BTreeSet<u32>,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<Stage1Outcome> {
    cfg.validate()?;
    model.validate()?;
    if train.modality != modality || val.modality != modality {
        return Err(PipelineError::Config("image sets of the wrong modality".into()));
    }
    let mut ae = Autoencoder::<f32>::new(modality, model);
    let opt = AdamW { weight_decay: cfg.weight_decay, ..AdamW::default() };
    let initial_val = evaluate_loss(&ae, val, cfg, cfg.seed)?;
    let mut schedule = PlateauSchedule::with_reference(cfg.lr, initial_val);
    let mut lr = cfg.lr;
    let mut best = (initial_val, 0usize, snapshot(&ae));
    let mut curve = vec![EpochRecord { epoch: 0, train_loss: None, val_loss: initial_val, lr }];
    progress(&curve[0]);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        let mut rng = SplitMix64::new(derive_seed(cfg.seed, epoch as u64));
        rng.shuffle(&mut order);
        let (mut sum, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let ids: Vec<u32> = chunk.iter().map(|&i| train.episode_ids[i]).collect();
            check_batch_episodes(&ids, train_split)?;
            let seed_of = |i: usize| derive_seed(cfg.seed ^ ((epoch as u64) << 32), i as u64);
            let Some((x, y, mask)) = batch_tensors(train, chunk, seed_of, cfg)? else { continue };
            let (pred, cache) = ae.forward(&x)?;
            let (loss, grad) = masked_mse(&pred, &y, &mask)?;
            if !loss.is_finite() {
                return Err(PipelineError::Divergence(format!("stage 1 loss {loss} at epoch {epoch}")));
            }
            ae.zero_grad();
            ae.backward(&cache, &grad)?;
            if let Some(max) = cfg.grad_clip {
                clip_grad_norm(ae.params_mut(), max);
            }
            opt.step(ae.params_mut(), lr);
            sum += loss;
            batches += 1;
        }
        let val_loss = evaluate_loss(&ae, val, cfg, cfg.seed)?;
        if !val_loss.is_finite() {
            return Err(PipelineError::Divergence(format!("stage 1 validation loss {val_loss} at epoch {epoch}")));
        }
        if val_loss < best.0 {
            best = (val_loss, epoch, snapshot(&ae));
        }
        let record = EpochRecord { epoch, train_loss: Some(sum / batches.max(1) as f64), val_loss, lr };
        progress(&record);
        curve.push(record);
        lr = schedule.observe(val_loss);
    }
    restore(&mut ae, &best.2);
    Ok(Stage1Outcome {
        autoencoder: ae,
        summary: Stage1Summary {
            modality,
            train_images: train.len(),
            val_images: val.len(),
            initial_val_loss: initial_val,
            best_val_loss: best.0,
            best_epoch: best.1,
            curve,
            test: None,
        },
    })
}

/// Loads the image sets, trains, and scores the best weights on the test
/// split against a fresh initialization.
pub fn run_stage1(
    ds: &Dataset,
    modality: Modality,
    model: &ModelConfig,
    cfg: &Stage1Config,
    progress: impl FnMut(&EpochRecord),
) -> Result<Stage1Outcome> {
    let train = ImageSet::load(ds, Split::Train, modality, cfg.train_images, derive_seed(cfg.seed, 0x7a1))?;
    let val = ImageSet::load(ds, Split::Val, modality, cfg.val_images, derive_seed(cfg.seed, 0x7a2))?;
    let train_split: BTreeSet<u32> = ds.ids(Split::Train).iter().copied().collect();
    let mut out = train_autoencoder(modality, model, cfg, &train, &val, &train_split, progress)?;
    if !ds.ids(Split::Test).is_empty() && cfg.test_images > 0 {
        let test = ImageSet::load(ds, Split::Test, modality, cfg.test_images, derive_seed(cfg.seed, 0x7a3))?;
        let initial = Autoencoder::<f32>::new(modality, model);
        out.summary.test = Some(denoise_report(&initial, &out.autoencoder, &test, cfg, cfg.seed ^ 0x7e57)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage1CheckpointConfig {
    pub model: ModelConfig,
    pub stage1: Stage1Config,
}

pub fn save_stage1(path: &Path, out: &Stage1Outcome, model: &ModelConfig, cfg: &Stage1Config) -> Result<()> {
    let config = serde_json::to_string(&Stage1CheckpointConfig { model: model.clone(), stage1: cfg.clone() })?;
    let meta = serde_json::to_string(&out.summary)?;
    Checkpoint::capture(&config, &meta, &out.autoencoder.params(), true).save(path)?;
    Ok(())
}

/// Autoencoder rebuilt from a stage 1 checkpoint.
pub fn load_stage1(path: &Path) -> Result<(Autoencoder<f32>, Stage1Summary, ModelConfig)> {
    let ckpt = Checkpoint::load(path)?;
    let config: Stage1CheckpointConfig = serde_json::from_str(&ckpt.config_json)?;
    let summary: Stage1Summary = serde_json::from_str(&ckpt.metadata_json)?;
    let mut ae = Autoencoder::<f32>::new(summary.modality, &config.model);
    ckpt.restore(ae.params_mut())?;
    Ok((ae, summary, config.model))
}
