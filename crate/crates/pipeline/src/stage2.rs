//! Stage 2: supervised training of the full model with truncated
//! backpropagation through time.
//!
//! Training windows are non-overlapping `seq_len`-step slices of the
//! training episodes. During the first `warmup_epochs` the previous-heightmap
//! input is the previous ground truth; afterwards it is the model's own
//! previous prediction, treated as a constant (no gradient flows back
//! through the feedback channel).

use hmap_core::rng::{derive_seed, SplitMix64};
use hmap_nn::{clip_grad_norm, mse, AdamW, Checkpoint, Module, PlateauSchedule, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::Path;

use crate::dataset::{Dataset, Split};
use crate::error::{PipelineError, Result};
use crate::model::{EdsModel, EncoderCache, Modality, ModelConfig};
use crate::sequence::{
    image_rows_tensor, latent_batch, load_split, rollout, state_batch, truth_batch, EpisodeData, RolloutConfig,
};
use crate::stage1::{check_batch_episodes, load_stage1};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feedback {
    /// Ground truth during warmup, own predictions afterwards.
    #[default]
    Scheduled,
    /// Ground truth throughout.
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seq_len: usize,
    pub warmup_epochs: usize,
    pub feedback: Feedback,
    /// Encoder learning rate relative to the rest of the model; 0 freezes
    /// the encoders.
    pub encoder_lr_scale: f64,
    /// Initialize the encoders from stage 1 checkpoints when available.
    pub pretrained: bool,
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 16,
            lr: 3e-4,
            weight_decay: 0.01,
            seq_len: 32,
            warmup_epochs: 5,
            feedback: Feedback::Scheduled,
            encoder_lr_scale: 0.1,
            pretrained: true,
            grad_clip: Some(1.0),
            seed: 2,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.seq_len == 0 {
            return Err(PipelineError::Config("stage 2 needs epochs, a batch size and a sequence length".into()));
        }
        if !(self.lr > 0.0) || !(self.encoder_lr_scale >= 0.0) {
            return Err(PipelineError::Config("stage 2 rates out of range".into()));
        }
        Ok(())
    }

    pub fn trains_encoders(&self) -> bool {
        self.encoder_lr_scale > 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Epoch {
    pub epoch: usize,
    /// `None` for the evaluation before the first epoch.
    pub train_loss: Option<f64>,
    pub val_loss: f64,
    pub val_mae: f64,
    pub lr: f64,
    pub ground_truth_feedback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Summary {
    pub seq_len: usize,
    pub train_windows: usize,
    pub pretrained_encoders: Vec<Modality>,
    pub initial_val_mae: f64,
    pub best_val_loss: f64,
    pub best_val_mae: f64,
    pub best_epoch: usize,
    pub curve: Vec<Stage2Epoch>,
}

pub struct Stage2Outcome {
    pub model: EdsModel<f32>,
    pub summary: Stage2Summary,
}

/// Closed-loop MSE and MAE (meters) over whole episodes, resetting every
/// `seq_len` steps.
pub fn closed_loop_error(model: &EdsModel<f32>, eps: &[EpisodeData], seq_len: usize) -> Result<(f64, f64)> {
    let preds = rollout(model, eps, &RolloutConfig { seq_len, feedback_noise: 0.0, seed: 0 })?;
    let (mut se, mut ae, mut n) = (0.0, 0.0, 0usize);
    for (e, p) in eps.iter().zip(&preds) {
        for (truth, pred) in e.truth.iter().zip(p) {
            for (a, b) in truth.iter().zip(pred) {
                let d = (*a - *b) as f64;
                se += d * d;
                ae += d.abs();
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(PipelineError::Empty("no samples to evaluate"));
    }
    Ok((se / n as f64, ae / n as f64))
}

/// `(episode index, first step)` of every full window.
pub fn windows(eps: &[EpisodeData], seq_len: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, e) in eps.iter().enumerate() {
        let mut t = 0;
        while t + seq_len <= e.len() {
            out.push((i, t));
            t += seq_len;
        }
    }
    out
}

fn step_latent(
    model: &EdsModel<f32>,
    m: Modality,
    eps: &[&EpisodeData],
    steps: &[usize],
    train_encoders: bool,
) -> Result<(Tensor<f32>, Option<EncoderCache<f32>>)> {
    match model.encoder(m) {
        Some(enc) if train_encoders => {
            let rows = eps
                .iter()
                .zip(steps)
                .map(|(e, &t)| {
                    e.inputs[m as usize].as_ref().map(|v| v[t].as_slice()).ok_or(PipelineError::MissingInput(m.name()))
                })
                .collect::<Result<Vec<_>>>()?;
            let (z, c) = enc.forward(&image_rows_tensor(m, &rows)?)?;
            Ok((z, Some(c)))
        }
        _ => Ok((latent_batch(model, m, eps, steps)?, None)),
    }
}

/// One optimizer step on a batch of windows; returns the mean loss.
pub fn train_batch(
    model: &mut EdsModel<f32>,
    opt: &AdamW,
    eps: &[&EpisodeData],
    starts: &[usize],
    cfg: &Stage2Config,
    ground_truth_feedback: bool,
    lr: f64,
) -> Result<f64> {
    let b = eps.len();
    let train_enc = cfg.trains_encoders();
    let mut hidden = model.zero_hidden(b);
    let mut prev = model.zero_prior(b);
    let mut caches = Vec::with_capacity(cfg.seq_len);
    let mut grads = Vec::with_capacity(cfg.seq_len);
    let mut loss_sum = 0.0;
    for k in 0..cfg.seq_len {
        let steps: Vec<usize> = starts.iter().map(|s| s + k).collect();
        let (zd, cd) = step_latent(model, Modality::Depth, eps, &steps, train_enc)?;
        let (zl, cl) = step_latent(model, Modality::Lidar, eps, &steps, train_enc)?;
        let s = state_batch(eps, &steps)?;
        let (y, h, core) = model.core_forward(&zd, &zl, &s, &prev, &hidden)?;
        let target = truth_batch(eps, &steps)?;
        let (loss, mut g) = mse(&y, &target)?;
        if !loss.is_finite() {
            return Err(PipelineError::Divergence(format!("stage 2 loss {loss}")));
        }
        g.scale(1.0 / cfg.seq_len as f32);
        loss_sum += loss;
        caches.push((core, cd, cl));
        grads.push(g);
        hidden = h;
        prev = if ground_truth_feedback { target } else { y };
    }
    model.zero_grad();
    let mut d_hidden = model.zero_hidden(b);
    for ((core, cd, cl), g) in caches.iter().zip(&grads).rev() {
        let sg = model.core_backward(core, g, &d_hidden)?;
        if let (Some(enc), Some(c)) = (model.encoder_mut(Modality::Depth), cd) {
            enc.backward(c, &sg.depth_latent)?;
        }
        if let (Some(enc), Some(c)) = (model.encoder_mut(Modality::Lidar), cl) {
            enc.backward(c, &sg.lidar_latent)?;
        }
        d_hidden = sg.hidden;
    }
    if let Some(max) = cfg.grad_clip {
        clip_grad_norm(model.params_mut(), max);
    }
    opt.step(model.params_mut(), lr);
    Ok(loss_sum / cfg.seq_len as f64)
}

fn snapshot(model: &EdsModel<f32>) -> Vec<Tensor<f32>> {
    model.params().iter().map(|p| p.value.clone()).collect()
}

fn restore(model: &mut EdsModel<f32>, values: &[Tensor<f32>]) {
    for (p, v) in model.params_mut().into_iter().zip(values) {
        p.value = v.clone();
    }
}

/// Trains `model` in place on prepared episodes and leaves it at the best
/// validation epoch.
pub fn train_sequences(
    mut model: EdsModel<f32>,
    cfg: &Stage2Config,
    train: &mut [EpisodeData],
    val: &mut [EpisodeData],
    train_split: &BTreeSet<u32>,
    mut progress: impl FnMut(&Stage2Epoch),
) -> Result<Stage2Outcome> {
    cfg.validate()?;
    let train_enc = cfg.trains_encoders();
    for p in model.encoder_params_mut() {
        p.lr_scale = cfg.encoder_lr_scale;
    }
    let wins = windows(train, cfg.seq_len);
    if wins.is_empty() {
        return Err(PipelineError::Empty("no training window fits the sequence length"));
    }
    let opt = AdamW { weight_decay: cfg.weight_decay, ..AdamW::default() };
    let (init_loss, init_mae) = closed_loop_error(&model, val, cfg.seq_len)?;
    let mut schedule = PlateauSchedule::with_reference(cfg.lr, init_loss);
    let mut lr = cfg.lr;
    let mut best = (init_loss, init_mae, 0usize, snapshot(&model));
    let first = Stage2Epoch {
        epoch: 0,
        train_loss: None,
        val_loss: init_loss,
        val_mae: init_mae,
        lr,
        ground_truth_feedback: true,
    };
    progress(&first);
    let mut curve = vec![first];
    let mut order: Vec<usize> = (0..wins.len()).collect();
    for epoch in 1..=cfg.epochs {
        let gt = cfg.feedback == Feedback::GroundTruth || epoch <= cfg.warmup_epochs;
        SplitMix64::new(derive_seed(cfg.seed, epoch as u64)).shuffle(&mut order);
        let (mut sum, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let eps: Vec<&EpisodeData> = chunk.iter().map(|&w| &train[wins[w].0]).collect();
            let ids: Vec<u32> = eps.iter().map(|e| e.id).collect();
            check_batch_episodes(&ids, train_split)?;
            let starts: Vec<usize> = chunk.iter().map(|&w| wins[w].1).collect();
            sum += train_batch(&mut model, &opt, &eps, &starts, cfg, gt, lr)?;
            batches += 1;
        }
        if train_enc {
            for e in train.iter_mut().chain(val.iter_mut()) {
                e.refresh_latents(&model)?;
            }
        }
        let (val_loss, val_mae) = closed_loop_error(&model, val, cfg.seq_len)?;
        if val_loss < best.0 {
            best = (val_loss, val_mae, epoch, snapshot(&model));
        }
        let rec = Stage2Epoch { epoch, train_loss: Some(sum / batches as f64), val_loss, val_mae, lr, ground_truth_feedback: gt };
        progress(&rec);
        curve.push(rec);
        lr = schedule.observe(val_loss);
    }
    restore(&mut model, &best.3);
    Ok(Stage2Outcome {
        model,
        summary: Stage2Summary {
            seq_len: cfg.seq_len,
            train_windows: wins.len(),
            pretrained_encoders: Vec::new(),
            initial_val_mae: init_mae,
            best_val_loss: best.0,
            best_val_mae: best.1,
            best_epoch: best.2,
            curve,
        },
    })
}

/// Builds the model, loads pretrained encoders, prepares both splits and
/// trains. `stage1` lists available stage 1 checkpoints by modality.
pub fn run_stage2(
    ds: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &Stage2Config,
    stage1: &[(Modality, &Path)],
    progress: impl FnMut(&Stage2Epoch),
) -> Result<Stage2Outcome> {
    let mut model = EdsModel::<f32>::new(model_cfg)?;
    let loaded = if cfg.pretrained { load_encoders(&mut model, stage1)? } else { Vec::new() };
    let keep = cfg.trains_encoders();
    let mut train = load_split(ds, Split::Train, &model, keep)?;
    let mut val = load_split(ds, Split::Val, &model, keep)?;
    if val.is_empty() {
        return Err(PipelineError::Empty("validation split is empty"));
    }
    let train_split: BTreeSet<u32> = ds.ids(Split::Train).iter().copied().collect();
    let mut out = train_sequences(model, cfg, &mut train, &mut val, &train_split, progress)?;
    out.summary.pretrained_encoders = loaded;
    Ok(out)
}

/// Copies stage 1 encoder weights into the model for every modality it
/// uses; returns the modalities that were initialized.
pub fn load_encoders(model: &mut EdsModel<f32>, stage1: &[(Modality, &Path)]) -> Result<Vec<Modality>> {
    let mut loaded = Vec::new();
    for (m, path) in stage1 {
        let Some(enc) = model.encoder_mut(*m) else { continue };
        let (ae, summary, _) = load_stage1(path)?;
        if summary.modality != *m {
            return Err(PipelineError::Config(format!("{} holds a {} autoencoder", path.display(), summary.modality.name())));
        }
        if ae.encoder.params().len() != enc.params().len() {
            return Err(PipelineError::Config("stage 1 encoder does not match the model configuration".into()));
        }
        for (dst, src) in enc.params_mut().into_iter().zip(ae.encoder.params()) {
            if dst.value.shape() != src.value.shape() {
                return Err(PipelineError::Config(format!("encoder parameter {} has a different shape", src.name)));
            }
            dst.value = src.value.clone();
        }
        loaded.push(*m);
    }
    Ok(loaded)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage2CheckpointConfig {
    pub model: ModelConfig,
    pub stage2: Stage2Config,
}

pub fn save_stage2(path: &Path, out: &Stage2Outcome, cfg: &Stage2Config) -> Result<()> {
    let config = serde_json::to_string(&Stage2CheckpointConfig { model: out.model.config.clone(), stage2: cfg.clone() })?;
    let meta = serde_json::to_string(&out.summary)?;
    Checkpoint::capture(&config, &meta, &out.model.params(), true).save(path)?;
    Ok(())
}

pub fn load_stage2(path: &Path) -> Result<(EdsModel<f32>, Stage2CheckpointConfig, Stage2Summary)> {
    let ckpt = Checkpoint::load(path)?;
    let config: Stage2CheckpointConfig = serde_json::from_str(&ckpt.config_json)?;
    let summary: Stage2Summary = serde_json::from_str(&ckpt.metadata_json)?;
    let mut model = EdsModel::<f32>::new(&config.model)?;
    ckpt.restore(model.params_mut())?;
    Ok((model, config, summary))
}
