//! Episodes in the form the recurrent model consumes, and closed-loop
//! rollouts over them.
//!
//! A rollout is cut into windows of `seq_len` steps. Every window starts
//! from zero hidden state and the flat-ground prior; inside a window the
//! previous-heightmap input at step `t` is the model's own output at `t - 1`,
//! optionally perturbed with Gaussian noise.

use hmap_core::geometry::TerrainKind;
use hmap_core::rng::{derive_seed, SplitMix64};
use hmap_nn::Tensor;
use std::collections::BTreeMap;

use crate::dataset::{Dataset, Split};
use crate::episode::Episode;
use crate::error::{PipelineError, Result};
use crate::model::{rows_tensor, EdsModel, Modality, HEIGHT_OFFSET, RANGE_SCALE, STATE_DIM};

/// Batch size used when encoding images into latents.
pub const ENCODE_BATCH: usize = 16;

#[derive(Debug, Clone)]
pub struct EpisodeData {
    pub id: u32,
    pub kind: TerrainKind,
    pub states: Vec<[f32; STATE_DIM]>,
    /// Ground-truth heightmaps, base-relative meters.
    pub truth: Vec<Vec<f32>>,
    /// Normalized input images per modality (depth, lidar), kept only when
    /// the encoders are trained.
    pub inputs: [Option<Vec<Vec<f32>>>; 2],
    /// Encoder outputs per modality, for modalities the model uses.
    pub latents: [Option<Vec<Vec<f32>>>; 2],
}

impl EpisodeData {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Converts an episode, encoding its images with `model`'s encoders.
    pub fn from_episode(ep: &Episode, model: &EdsModel<f32>, keep_inputs: bool) -> Result<Self> {
        let mut data = Self {
            id: ep.id,
            kind: ep.kind,
            states: ep.samples.iter().map(|s| s.state).collect(),
            truth: ep.samples.iter().map(|s| s.heightmap.clone()).collect(),
            inputs: [None, None],
            latents: [None, None],
        };
        for m in Modality::ALL {
            if model.encoder(m).is_none() {
                continue;
            }
            let imgs = ep
                .samples
                .iter()
                .map(|s| Ok(s.input(m)?.normalized(RANGE_SCALE)))
                .collect::<Result<Vec<_>>>()?;
            data.latents[m as usize] = Some(encode_rows(model, m, &imgs)?);
            if keep_inputs {
                data.inputs[m as usize] = Some(imgs);
            }
        }
        Ok(data)
    }

    /// Recomputes the latents from the stored inputs.
    pub fn refresh_latents(&mut self, model: &EdsModel<f32>) -> Result<()> {
        for m in Modality::ALL {
            if let Some(imgs) = &self.inputs[m as usize] {
                self.latents[m as usize] = Some(encode_rows(model, m, imgs)?);
            }
        }
        Ok(())
    }
}

/// `[B, 1, H, W]` tensor from normalized image rows.
pub fn image_rows_tensor(m: Modality, rows: &[&[f32]]) -> Result<Tensor<f32>> {
    let (h, w) = m.input_hw();
    Ok(rows_tensor::<f32>(rows, 0.0)?.reshape(&[rows.len(), 1, h, w])?)
}

fn encode_rows(model: &EdsModel<f32>, m: Modality, imgs: &[Vec<f32>]) -> Result<Vec<Vec<f32>>> {
    let enc = model.encoder(m).ok_or(PipelineError::MissingInput(m.name()))?;
    let mut out = Vec::with_capacity(imgs.len());
    for chunk in imgs.chunks(ENCODE_BATCH) {
        let rows: Vec<&[f32]> = chunk.iter().map(Vec::as_slice).collect();
        let z = enc.encode(&image_rows_tensor(m, &rows)?)?;
        out.extend((0..z.dim(0)).map(|r| z.outer(r).to_vec()));
    }
    Ok(out)
}

/// Loads and encodes every episode of a split.
pub fn load_split(ds: &Dataset, split: Split, model: &EdsModel<f32>, keep_inputs: bool) -> Result<Vec<EpisodeData>> {
    ds.ids(split)
        .iter()
        .map(|id| EpisodeData::from_episode(&ds.load(*id)?, model, keep_inputs))
        .collect()
}

/// `[B, latent]` latent batch for step `t` of the given episodes, or the
/// model's learned stand-in when it does not use the modality.
pub fn latent_batch(model: &EdsModel<f32>, m: Modality, eps: &[&EpisodeData], steps: &[usize]) -> Result<Tensor<f32>> {
    if model.encoder(m).is_none() {
        return model.missing_latent(m, eps.len());
    }
    let rows = eps
        .iter()
        .zip(steps)
        .map(|(e, &t)| {
            e.latents[m as usize]
                .as_ref()
                .map(|l| l[t].as_slice())
                .ok_or(PipelineError::MissingInput(m.name()))
        })
        .collect::<Result<Vec<_>>>()?;
    rows_tensor(&rows, 0.0)
}

pub fn state_batch(eps: &[&EpisodeData], steps: &[usize]) -> Result<Tensor<f32>> {
    let rows: Vec<&[f32]> = eps.iter().zip(steps).map(|(e, &t)| e.states[t].as_slice()).collect();
    rows_tensor(&rows, 0.0)
}

/// Ground truth of step `t` in offset space.
pub fn truth_batch(eps: &[&EpisodeData], steps: &[usize]) -> Result<Tensor<f32>> {
    let rows: Vec<&[f32]> = eps.iter().zip(steps).map(|(e, &t)| e.truth[t].as_slice()).collect();
    rows_tensor(&rows, HEIGHT_OFFSET)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutConfig {
    pub seq_len: usize,
    /// Standard deviation of the noise added to the fed-back prediction,
    /// meters.
    pub feedback_noise: f64,
    pub seed: u64,
}

/// Closed-loop predictions (base-relative meters) for every step of every
/// episode, in input order. Episodes of equal length are batched together.
pub fn rollout(model: &EdsModel<f32>, eps: &[EpisodeData], cfg: &RolloutConfig) -> Result<Vec<Vec<Vec<f32>>>> {
    if cfg.seq_len == 0 {
        return Err(PipelineError::Config("sequence length must be positive".into()));
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, e) in eps.iter().enumerate() {
        groups.entry(e.len()).or_default().push(i);
    }
    let mut out: Vec<Vec<Vec<f32>>> = vec![Vec::new(); eps.len()];
    for (len, members) in groups {
        let batch: Vec<&EpisodeData> = members.iter().map(|&i| &eps[i]).collect();
        let b = batch.len();
        let mut rng = SplitMix64::new(derive_seed(cfg.seed, len as u64));
        let mut hidden = model.zero_hidden(b);
        let mut prev = model.zero_prior(b);
        for t in 0..len {
            if t % cfg.seq_len == 0 {
                hidden = model.zero_hidden(b);
                prev = model.zero_prior(b);
            }
            let steps = vec![t; b];
            let zd = latent_batch(model, Modality::Depth, &batch, &steps)?;
            let zl = latent_batch(model, Modality::Lidar, &batch, &steps)?;
            let s = state_batch(&batch, &steps)?;
            let (y, h, _) = model.core_forward(&zd, &zl, &s, &prev, &hidden)?;
            if !y.is_finite() {
                return Err(PipelineError::Divergence(format!("non-finite prediction at step {t}")));
            }
            for (k, &i) in members.iter().enumerate() {
                out[i].push(y.outer(k).iter().map(|v| v - HEIGHT_OFFSET).collect());
            }
            hidden = h;
            prev = y;
            if cfg.feedback_noise > 0.0 {
                for v in prev.data_mut() {
                    *v += (cfg.feedback_noise * rng.normal()) as f32;
                }
            }
        }
    }
    Ok(out)
}
