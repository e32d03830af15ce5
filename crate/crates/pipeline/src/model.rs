//! The EDS network: per-modality convolutional encoders, their mirrored
//! autoencoder decoders used for pretraining, and the recurrent heightmap
//! model that fuses both latents with the robot state and its own previous
//! prediction.

use hmap_core::heightmap::HeightmapSpec;
use hmap_core::image::MaskedImage;
use hmap_core::rng::SplitMix64;
use hmap_core::sensor::{DEPTH_HEIGHT, DEPTH_WIDTH, LIDAR_CHANNELS, LIDAR_COLUMNS};
use hmap_nn::{
    conv_out, relu, relu_backward, Conv2d, Conv2dCache, ConvTranspose2d, ConvTranspose2dCache, Dense, DenseCache, GruCache,
    GruCell, LayerNorm, LayerNormCache, Module, NnError, Param, Scalar, Tensor,
};
use serde::{Deserialize, Serialize};
use std::str::FromStr;

use crate::error::{PipelineError, Result};

/// Ranges and depths are divided by this before entering the network.
pub const RANGE_SCALE: f32 = 3.0;
/// Added to heightmap values (base-relative, meters) on the way in and
/// removed on the way out, so that flat ground at nominal stance is zero.
pub const HEIGHT_OFFSET: f32 = 0.75;
pub const STATE_DIM: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Depth,
    Lidar,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Depth, Modality::Lidar];

    pub fn input_hw(self) -> (usize, usize) {
        match self {
            Modality::Depth => (DEPTH_HEIGHT, DEPTH_WIDTH),
            Modality::Lidar => (LIDAR_CHANNELS, LIDAR_COLUMNS),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Depth => "depth",
            Modality::Lidar => "lidar",
        }
    }
}

impl FromStr for Modality {
    type Err = PipelineError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "depth" => Ok(Modality::Depth),
            "lidar" => Ok(Modality::Lidar),
            _ => Err(PipelineError::Config(format!("unknown modality {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityMode {
    #[default]
    Fused,
    DepthOnly,
    LidarOnly,
}

impl ModalityMode {
    pub const ALL: [ModalityMode; 3] = [ModalityMode::Fused, ModalityMode::DepthOnly, ModalityMode::LidarOnly];

    pub fn uses(self, m: Modality) -> bool {
        !matches!((self, m), (ModalityMode::DepthOnly, Modality::Lidar) | (ModalityMode::LidarOnly, Modality::Depth))
    }

    pub fn name(self) -> &'static str {
        match self {
            ModalityMode::Fused => "fused",
            ModalityMode::DepthOnly => "depth_only",
            ModalityMode::LidarOnly => "lidar_only",
        }
    }
}

impl FromStr for ModalityMode {
    type Err = PipelineError;
    fn from_str(s: &str) -> Result<Self> {
        ModalityMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| PipelineError::Config(format!("unknown mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub channels: [usize; 4],
    pub latent: usize,
    pub hidden: usize,
    pub gru_layers: usize,
    pub head_hidden: usize,
    pub heightmap: HeightmapSpec,
    pub mode: ModalityMode,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: [16, 32, 64, 128],
            latent: 256,
            hidden: 256,
            gru_layers: 2,
            head_hidden: 256,
            heightmap: HeightmapSpec::default(),
            mode: ModalityMode::Fused,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) || self.latent == 0 || self.hidden == 0 || self.head_hidden == 0 {
            return Err(PipelineError::Config("layer widths must be positive".into()));
        }
        if self.gru_layers == 0 {
            return Err(PipelineError::Config("at least one GRU layer is required".into()));
        }
        self.heightmap.validate()?;
        Ok(())
    }

    pub fn output_len(&self) -> usize {
        self.heightmap.len()
    }

    /// Width of the fusion input: two latents, the robot state and the
    /// previous heightmap.
    pub fn fusion_width(&self) -> usize {
        2 * self.latent + STATE_DIM + self.output_len()
    }
}

/// `[B, 1, H, W]` network input from images: values over [`RANGE_SCALE`],
/// invalid pixels zero.
pub fn image_batch<T: Scalar>(images: &[&MaskedImage]) -> Result<Tensor<T>> {
    let (w, h) = images.first().map(|i| (i.width, i.height)).ok_or(PipelineError::Empty("image batch"))?;
    let mut data = Vec::with_capacity(images.len() * w * h);
    for img in images {
        if (img.width, img.height) != (w, h) {
            return Err(NnError::Shape { op: "image batch", expected: vec![h, w], got: vec![img.height, img.width] }.into());
        }
        data.extend(img.normalized(RANGE_SCALE).into_iter().map(|v| T::of(v as f64)));
    }
    Ok(Tensor::from_vec(&[images.len(), 1, h, w], data)?)
}

/// Stacks rows of equal length into a `[B, F]` tensor, adding `offset` to
/// every value.
pub fn rows_tensor<T: Scalar>(rows: &[&[f32]], offset: f32) -> Result<Tensor<T>> {
    let f = rows.first().map(|r| r.len()).ok_or(PipelineError::Empty("row batch"))?;
    let mut data = Vec::with_capacity(rows.len() * f);
    for r in rows {
        if r.len() != f {
            return Err(NnError::Shape { op: "row batch", expected: vec![f], got: vec![r.len()] }.into());
        }
        data.extend(r.iter().map(|v| T::of((v + offset) as f64)));
    }
    Ok(Tensor::from_vec(&[rows.len(), f], data)?)
}

/// Four stride-2 convolutions with ReLU, flattened into a linear map to
/// the latent vector.
#[derive(Debug, Clone)]
pub struct Encoder<T> {
    pub modality: Modality,
    pub convs: Vec<Conv2d<T>>,
    pub fc: Dense<T>,
    trace: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct EncoderCache<T> {
    convs: Vec<(Conv2dCache<T>, Tensor<T>)>,
    fc: DenseCache<T>,
}

/// Spatial sizes through four kernel-3, stride-2, padding-1 convolutions.
pub fn spatial_trace(input: (usize, usize)) -> Vec<(usize, usize)> {
    let mut trace = vec![input];
    for _ in 0..4 {
        let (h, w) = *trace.last().expect("non-empty");
        trace.push((conv_out(h, 3, 2, 1).unwrap_or(0), conv_out(w, 3, 2, 1).unwrap_or(0)));
    }
    trace
}

impl<T: Scalar> Encoder<T> {
    pub fn new(prefix: &str, modality: Modality, cfg: &ModelConfig, rng: &mut SplitMix64) -> Self {
        let trace = spatial_trace(modality.input_hw());
        let mut convs = Vec::with_capacity(4);
        let mut cin = 1;
        for (i, &c) in cfg.channels.iter().enumerate() {
            convs.push(Conv2d::new(&format!("{prefix}.conv{i}"), cin, c, 3, 2, 1, rng));
            cin = c;
        }
        let (h4, w4) = trace[4];
        let fc = Dense::new(&format!("{prefix}.fc"), cin * h4 * w4, cfg.latent, 3.0, rng);
        Self { modality, convs, fc, trace }
    }

    /// Input size followed by the output size of each convolution.
    pub fn spatial_trace(&self) -> &[(usize, usize)] {
        &self.trace
    }

    pub fn flatten_size(&self) -> usize {
        self.fc.in_features
    }

    /// `[B, 1, H, W] -> [B, latent]`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, EncoderCache<T>)> {
        let (h, w) = self.trace[0];
        if x.shape().len() != 4 || x.shape()[1..] != [1, h, w] {
            return Err(NnError::Shape { op: "encoder input", expected: vec![x.shape().first().copied().unwrap_or(0), 1, h, w], got: x.shape().to_vec() }.into());
        }
        let mut caches = Vec::with_capacity(self.convs.len());
        let mut a = x.clone();
        for conv in &self.convs {
            let (y, c) = conv.forward(&a)?;
            a = relu(y);
            caches.push((c, a.clone()));
        }
        let (z, fc) = self.fc.forward(&a)?;
        Ok((z, EncoderCache { convs: caches, fc }))
    }

    pub fn encode(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(x)?.0)
    }

    /// Accumulates parameter gradients; returns the input gradient.
    pub fn backward(&mut self, cache: &EncoderCache<T>, dz: &Tensor<T>) -> Result<Tensor<T>> {
        let mut d = self.fc.backward(&cache.fc, dz)?;
        for (conv, (c, y)) in self.convs.iter_mut().zip(&cache.convs).rev() {
            let d4 = d.reshape(y.shape())?;
            d = conv.backward(c, &relu_backward(y, &d4)?)?;
        }
        Ok(d)
    }
}

impl<T: Scalar> Module<T> for Encoder<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v: Vec<&Param<T>> = self.convs.iter().flat_map(|c| c.params()).collect();
        v.extend(self.fc.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v: Vec<&mut Param<T>> = self.convs.iter_mut().flat_map(|c| c.params_mut()).collect();
        v.extend(self.fc.params_mut());
        v
    }
}

/// Mirror of [`Encoder`]: dense back to the flattened feature map, then four
/// transposed convolutions retracing the encoder's spatial sizes. The last
/// stage has no activation and is the output layer. The only input is the
/// latent vector.
#[derive(Debug, Clone)]
pub struct AeDecoder<T> {
    pub fc: Dense<T>,
    pub deconvs: Vec<ConvTranspose2d<T>>,
    feature_shape: [usize; 3],
}

#[derive(Debug, Clone)]
pub struct AeDecoderCache<T> {
    fc: DenseCache<T>,
    fc_out: Tensor<T>,
    deconvs: Vec<(ConvTranspose2dCache<T>, Tensor<T>)>,
}

impl<T: Scalar> AeDecoder<T> {
    pub fn new(prefix: &str, modality: Modality, cfg: &ModelConfig, rng: &mut SplitMix64) -> Self {
        let trace = spatial_trace(modality.input_hw());
        let c = cfg.channels;
        let (h4, w4) = trace[4];
        let fc = Dense::new(&format!("{prefix}.fc"), cfg.latent, c[3] * h4 * w4, 6.0, rng);
        let outs = [c[2], c[1], c[0], 1];
        let mut deconvs = Vec::with_capacity(4);
        let mut cin = c[3];
        for (i, &co) in outs.iter().enumerate() {
            let gain = if i == 3 { 3.0 } else { 6.0 };
            deconvs.push(ConvTranspose2d::new(&format!("{prefix}.deconv{i}"), cin, co, 3, 2, 1, trace[3 - i], gain, rng));
            cin = co;
        }
        Self { fc, deconvs, feature_shape: [c[3], h4, w4] }
    }

    /// `[B, latent] -> [B, 1, H, W]`.
    pub fn forward(&self, z: &Tensor<T>) -> Result<(Tensor<T>, AeDecoderCache<T>)> {
        let (y, fc) = self.fc.forward(z)?;
        let fc_out = relu(y);
        let [c, h, w] = self.feature_shape;
        let mut a = fc_out.clone().reshape(&[z.dim(0), c, h, w])?;
        let mut caches = Vec::with_capacity(4);
        let last = self.deconvs.len() - 1;
        for (i, d) in self.deconvs.iter().enumerate() {
            let (y, cache) = d.forward(&a)?;
            a = if i < last { relu(y) } else { y };
            caches.push((cache, a.clone()));
        }
        Ok((a, AeDecoderCache { fc, fc_out, deconvs: caches }))
    }

    /// Returns the latent gradient.
    pub fn backward(&mut self, cache: &AeDecoderCache<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let last = self.deconvs.len() - 1;
        let mut d = dy.clone();
        for (i, (dc, (c, y))) in self.deconvs.iter_mut().zip(&cache.deconvs).enumerate().rev() {
            let g = if i < last { relu_backward(y, &d)? } else { d };
            d = dc.backward(c, &g)?;
        }
        let d = d.reshape(cache.fc_out.shape())?;
        Ok(self.fc.backward(&cache.fc, &relu_backward(&cache.fc_out, &d)?)?)
    }
}

impl<T: Scalar> Module<T> for AeDecoder<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.fc.params();
        v.extend(self.deconvs.iter().flat_map(|d| d.params()));
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.fc.params_mut();
        v.extend(self.deconvs.iter_mut().flat_map(|d| d.params_mut()));
        v
    }
}

pub fn encoder_prefix(m: Modality) -> String {
    format!("{}_encoder", m.name())
}

/// Convolutional autoencoder without skip connections: everything the
/// decoder sees passes through the latent vector.
#[derive(Debug, Clone)]
pub struct Autoencoder<T> {
    pub encoder: Encoder<T>,
    pub decoder: AeDecoder<T>,
}

pub struct AutoencoderCache<T> {
    enc: EncoderCache<T>,
    dec: AeDecoderCache<T>,
}

impl<T: Scalar> Autoencoder<T> {
    pub fn new(modality: Modality, cfg: &ModelConfig) -> Self {
        let mut rng = SplitMix64::new(cfg.seed ^ 0xae00 ^ modality as u64);
        let encoder = Encoder::new(&encoder_prefix(modality), modality, cfg, &mut rng);
        let decoder = AeDecoder::new(&format!("{}_decoder", modality.name()), modality, cfg, &mut rng);
        Self { encoder, decoder }
    }

    pub fn modality(&self) -> Modality {
        self.encoder.modality
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, AutoencoderCache<T>)> {
        let (z, enc) = self.encoder.forward(x)?;
        let (y, dec) = self.decoder.forward(&z)?;
        Ok((y, AutoencoderCache { enc, dec }))
    }

    pub fn reconstruct(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(x)?.0)
    }

    pub fn backward(&mut self, cache: &AutoencoderCache<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let dz = self.decoder.backward(&cache.dec, dy)?;
        self.encoder.backward(&cache.enc, &dz)
    }
}

impl<T: Scalar> Module<T> for Autoencoder<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.encoder.params();
        v.extend(self.decoder.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.encoder.params_mut();
        v.extend(self.decoder.params_mut());
        v
    }
}

/// Recurrent heightmap model. Inputs per step: depth latent, LiDAR latent,
/// robot state, previous heightmap (offset space) and one hidden state per
/// GRU layer; output is the heightmap in offset space.
#[derive(Debug, Clone)]
pub struct EdsModel<T> {
    pub config: ModelConfig,
    pub depth_encoder: Option<Encoder<T>>,
    pub lidar_encoder: Option<Encoder<T>>,
    /// Learned stand-in latents for modalities the mode leaves out.
    pub depth_missing: Option<Param<T>>,
    pub lidar_missing: Option<Param<T>>,
    pub fusion: Dense<T>,
    pub fusion_norm: LayerNorm<T>,
    pub grus: Vec<GruCell<T>>,
    pub head: Dense<T>,
    pub out: Dense<T>,
}

/// Activations of the part of a step after the encoders.
#[derive(Debug, Clone)]
pub struct CoreCache<T> {
    fusion: DenseCache<T>,
    norm: LayerNormCache<T>,
    fused: Tensor<T>,
    grus: Vec<GruCache<T>>,
    head: DenseCache<T>,
    head_out: Tensor<T>,
    out: DenseCache<T>,
}

pub struct StepCache<T> {
    pub core: CoreCache<T>,
    depth: Option<EncoderCache<T>>,
    lidar: Option<EncoderCache<T>>,
}

#[derive(Debug, Clone)]
pub struct StepGrads<T> {
    pub depth_latent: Tensor<T>,
    pub lidar_latent: Tensor<T>,
    pub state: Tensor<T>,
    pub prev: Tensor<T>,
    pub hidden: Vec<Tensor<T>>,
}

impl<T: Scalar> EdsModel<T> {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitMix64::new(config.seed ^ 0xed5);
        let mode = config.mode;
        let encoder = |m: Modality, rng: &mut SplitMix64| mode.uses(m).then(|| Encoder::new(&encoder_prefix(m), m, config, rng));
        let depth_encoder = encoder(Modality::Depth, &mut rng);
        let lidar_encoder = encoder(Modality::Lidar, &mut rng);
        let l = config.latent;
        let missing = |m: Modality, rng: &mut SplitMix64| {
            (!mode.uses(m)).then(|| Param::kaiming_uniform(format!("{}_missing", m.name()), &[l], l, 3.0, rng))
        };
        let depth_missing = missing(Modality::Depth, &mut rng);
        let lidar_missing = missing(Modality::Lidar, &mut rng);
        let fusion = Dense::new("fusion", config.fusion_width(), config.hidden, 3.0, &mut rng);
        let fusion_norm = LayerNorm::new("fusion_norm", config.hidden);
        let grus = (0..config.gru_layers).map(|i| GruCell::new(&format!("gru{i}"), config.hidden, config.hidden, &mut rng)).collect();
        let head = Dense::new("head", config.hidden, config.head_hidden, 6.0, &mut rng);
        let out = Dense::new("out", config.head_hidden, config.output_len(), 3.0, &mut rng);
        Ok(Self { config: config.clone(), depth_encoder, lidar_encoder, depth_missing, lidar_missing, fusion, fusion_norm, grus, head, out })
    }

    pub fn encoder(&self, m: Modality) -> Option<&Encoder<T>> {
        match m {
            Modality::Depth => self.depth_encoder.as_ref(),
            Modality::Lidar => self.lidar_encoder.as_ref(),
        }
    }

    pub fn encoder_mut(&mut self, m: Modality) -> Option<&mut Encoder<T>> {
        match m {
            Modality::Depth => self.depth_encoder.as_mut(),
            Modality::Lidar => self.lidar_encoder.as_mut(),
        }
    }

    fn missing(&self, m: Modality) -> Option<&Param<T>> {
        match m {
            Modality::Depth => self.depth_missing.as_ref(),
            Modality::Lidar => self.lidar_missing.as_ref(),
        }
    }

    pub fn zero_hidden(&self, batch: usize) -> Vec<Tensor<T>> {
        vec![Tensor::zeros(&[batch, self.config.hidden]); self.config.gru_layers]
    }

    /// Previous-heightmap input for the first step: flat ground at nominal
    /// stance, i.e. zero in offset space.
    pub fn zero_prior(&self, batch: usize) -> Tensor<T> {
        Tensor::zeros(&[batch, self.config.output_len()])
    }

    /// Latent for one modality: the encoder output when the mode uses it,
    /// otherwise the learned constant broadcast over the batch.
    pub fn latent(&self, m: Modality, image: Option<&Tensor<T>>, batch: usize) -> Result<(Tensor<T>, Option<EncoderCache<T>>)> {
        if let Some(enc) = self.encoder(m) {
            let img = image.ok_or(PipelineError::MissingInput(m.name()))?;
            let (z, c) = enc.forward(img)?;
            Ok((z, Some(c)))
        } else {
            Ok((self.missing_latent(m, batch)?, None))
        }
    }

    /// Learned constant latent of an unused modality, `[batch, latent]`.
    pub fn missing_latent(&self, m: Modality, batch: usize) -> Result<Tensor<T>> {
        let p = self.missing(m).ok_or(PipelineError::MissingInput(m.name()))?;
        Ok(Tensor::from_fn(&[batch, self.config.latent], |i| p.value.data()[i % self.config.latent]))
    }

    /// Step from precomputed latents.
    pub fn core_forward(
        &self,
        depth_latent: &Tensor<T>,
        lidar_latent: &Tensor<T>,
        state: &Tensor<T>,
        prev: &Tensor<T>,
        hidden: &[Tensor<T>],
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>, CoreCache<T>)> {
        if hidden.len() != self.grus.len() {
            return Err(PipelineError::Config(format!("expected {} hidden states, got {}", self.grus.len(), hidden.len())));
        }
        let x = Tensor::concat_features(&[depth_latent, lidar_latent, state, prev])?;
        let (f, fusion) = self.fusion.forward(&x)?;
        let (n, norm) = self.fusion_norm.forward(&f)?;
        let fused = relu(n);
        let mut a = fused.clone();
        let mut new_hidden = Vec::with_capacity(self.grus.len());
        let mut grus = Vec::with_capacity(self.grus.len());
        for (g, h) in self.grus.iter().zip(hidden) {
            let (h2, c) = g.forward(&a, h)?;
            grus.push(c);
            new_hidden.push(h2.clone());
            a = h2;
        }
        let (hd, head) = self.head.forward(&a)?;
        let head_out = relu(hd);
        let (y, out) = self.out.forward(&head_out)?;
        Ok((y, new_hidden, CoreCache { fusion, norm, fused, grus, head, head_out, out }))
    }

    /// Backward through one step after the encoders. `d_hidden_next` is the
    /// gradient arriving at this step's output hidden states from the
    /// following step (zeros at the end of a window).
    pub fn core_backward(&mut self, cache: &CoreCache<T>, d_out: &Tensor<T>, d_hidden_next: &[Tensor<T>]) -> Result<StepGrads<T>> {
        let d_head = self.out.backward(&cache.out, d_out)?;
        let mut d = self.head.backward(&cache.head, &relu_backward(&cache.head_out, &d_head)?)?;
        let mut d_hidden = vec![Tensor::zeros(&[0]); self.grus.len()];
        for (l, g) in self.grus.iter_mut().enumerate().rev() {
            let mut dh = d;
            dh.add_assign(&d_hidden_next[l])?;
            let (dx, dprev) = g.backward(&cache.grus[l], &dh)?;
            d_hidden[l] = dprev;
            d = dx;
        }
        let dn = self.fusion_norm.backward(&cache.norm, &relu_backward(&cache.fused, &d)?)?;
        let dx = self.fusion.backward(&cache.fusion, &dn)?;
        let l = self.config.latent;
        let mut parts = dx.split_features(&[l, l, STATE_DIM, self.config.output_len()])?.into_iter();
        let (dd, dl, ds, dp) = (parts.next().unwrap(), parts.next().unwrap(), parts.next().unwrap(), parts.next().unwrap());
        for (m, g) in [(Modality::Depth, &dd), (Modality::Lidar, &dl)] {
            let p = match m {
                Modality::Depth => self.depth_missing.as_mut(),
                Modality::Lidar => self.lidar_missing.as_mut(),
            };
            if let Some(p) = p {
                let pg = p.grad.data_mut();
                for r in 0..g.dim(0) {
                    for (a, b) in pg.iter_mut().zip(g.outer(r)) {
                        *a += *b;
                    }
                }
            }
        }
        Ok(StepGrads { depth_latent: dd, lidar_latent: dl, state: ds, prev: dp, hidden: d_hidden })
    }

    /// Full step from normalized images (`[B, 1, H, W]`, ignored for
    /// modalities the mode leaves out).
    pub fn step(
        &self,
        depth: Option<&Tensor<T>>,
        lidar: Option<&Tensor<T>>,
        state: &Tensor<T>,
        prev: &Tensor<T>,
        hidden: &[Tensor<T>],
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>, StepCache<T>)> {
        let b = state.dim(0);
        let (zd, cd) = self.latent(Modality::Depth, depth, b)?;
        let (zl, cl) = self.latent(Modality::Lidar, lidar, b)?;
        let (y, h, core) = self.core_forward(&zd, &zl, state, prev, hidden)?;
        Ok((y, h, StepCache { core, depth: cd, lidar: cl }))
    }

    /// Backward through [`EdsModel::step`], including the encoders.
    pub fn step_backward(&mut self, cache: &StepCache<T>, d_out: &Tensor<T>, d_hidden_next: &[Tensor<T>]) -> Result<StepGrads<T>> {
        let g = self.core_backward(&cache.core, d_out, d_hidden_next)?;
        if let (Some(enc), Some(c)) = (self.depth_encoder.as_mut(), cache.depth.as_ref()) {
            enc.backward(c, &g.depth_latent)?;
        }
        if let (Some(enc), Some(c)) = (self.lidar_encoder.as_mut(), cache.lidar.as_ref()) {
            enc.backward(c, &g.lidar_latent)?;
        }
        Ok(g)
    }

    /// Encoder parameters and the remaining parameters, borrowed together.
    pub fn split_params_mut(&mut self) -> (Vec<&mut Param<T>>, Vec<&mut Param<T>>) {
        let mut enc = Vec::new();
        if let Some(e) = self.depth_encoder.as_mut() {
            enc.extend(e.params_mut());
        }
        if let Some(e) = self.lidar_encoder.as_mut() {
            enc.extend(e.params_mut());
        }
        let mut core: Vec<&mut Param<T>> = Vec::new();
        core.extend(self.depth_missing.as_mut());
        core.extend(self.lidar_missing.as_mut());
        core.extend(self.fusion.params_mut());
        core.extend(self.fusion_norm.params_mut());
        core.extend(self.grus.iter_mut().flat_map(|g| g.params_mut()));
        core.extend(self.head.params_mut());
        core.extend(self.out.params_mut());
        (enc, core)
    }

    pub fn encoder_params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.split_params_mut().0
    }

    /// Parameters after the encoders.
    pub fn core_params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.split_params_mut().1
    }
}

impl<T: Scalar> Module<T> for EdsModel<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v: Vec<&Param<T>> = Vec::new();
        if let Some(e) = &self.depth_encoder {
            v.extend(e.params());
        }
        if let Some(e) = &self.lidar_encoder {
            v.extend(e.params());
        }
        v.extend(self.depth_missing.as_ref());
        v.extend(self.lidar_missing.as_ref());
        v.extend(self.fusion.params());
        v.extend(self.fusion_norm.params());
        v.extend(self.grus.iter().flat_map(|g| g.params()));
        v.extend(self.head.params());
        v.extend(self.out.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let (mut v, core) = self.split_params_mut();
        v.extend(core);
        v
    }
}
