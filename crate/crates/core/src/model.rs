//! Learnable components: TCN encoder θ, mirrored decoder 𝔻, deviation
//! network φ and contrastive projection f, plus masked reconstruction.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::mask_variable;
use crate::nn::{
    cast, global_avg_pool, global_avg_pool_backward, l2_normalize_columns, l2_normalize_columns_backward,
    unflatten_sequence, unflatten_sequence_backward, BatchNorm1d, BatchNormCache, Dropout, Linear, PRelu, Padding,
    BlockCache, Params, Real, ResidualBlock,
};
use crate::{Error, Result};

/// Sequences per batched forward pass at inference time.
const INFER_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Variables; 0 means "take from the dataset".
    #[serde(default)]
    pub k: usize,
    /// Window length; 0 means "take from the dataset".
    #[serde(default)]
    pub l: usize,
    #[serde(default = "defaults::channels")]
    pub channels: usize,
    #[serde(default = "defaults::kernel")]
    pub kernel_size: usize,
    #[serde(default = "defaults::dilations")]
    pub dilations: Vec<usize>,
    /// D
    #[serde(default = "defaults::embed")]
    pub embed_dim: usize,
    /// d
    #[serde(default = "defaults::proj")]
    pub proj_dim: usize,
    #[serde(default = "defaults::hidden")]
    pub dev_hidden: usize,
    #[serde(default = "defaults::dropout")]
    pub dropout: f64,
    #[serde(default = "defaults::prelu")]
    pub prelu_init: f64,
    #[serde(default = "defaults::bn_momentum")]
    pub bn_momentum: f64,
    #[serde(default = "defaults::bn_eps")]
    pub bn_eps: f64,
    #[serde(default = "defaults::norm_eps")]
    pub norm_eps: f64,
    /// Gaussian prior of the deviation score.
    #[serde(default)]
    pub prior_mu: f64,
    #[serde(default = "defaults::sigma")]
    pub prior_sigma: f64,
}

mod defaults {
    pub fn channels() -> usize {
        32
    }
    pub fn kernel() -> usize {
        3
    }
    pub fn dilations() -> Vec<usize> {
        vec![1, 2, 4]
    }
    pub fn embed() -> usize {
        120
    }
    pub fn proj() -> usize {
        32
    }
    pub fn hidden() -> usize {
        64
    }
    pub fn dropout() -> f64 {
        0.25
    }
    pub fn prelu() -> f64 {
        0.25
    }
    pub fn bn_momentum() -> f64 {
        0.1
    }
    pub fn bn_eps() -> f64 {
        1e-5
    }
    pub fn norm_eps() -> f64 {
        1e-12
    }
    pub fn sigma() -> f64 {
        1.0
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::new(0, 0)
    }
}

impl ModelConfig {
    pub fn new(k: usize, l: usize) -> Self {
        ModelConfig {
            k,
            l,
            channels: defaults::channels(),
            kernel_size: defaults::kernel(),
            dilations: defaults::dilations(),
            embed_dim: defaults::embed(),
            proj_dim: defaults::proj(),
            dev_hidden: defaults::hidden(),
            dropout: defaults::dropout(),
            prelu_init: defaults::prelu(),
            bn_momentum: defaults::bn_momentum(),
            bn_eps: defaults::bn_eps(),
            norm_eps: defaults::norm_eps(),
            prior_mu: 0.0,
            prior_sigma: defaults::sigma(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("k", self.k),
            ("l", self.l),
            ("channels", self.channels),
            ("kernel_size", self.kernel_size),
            ("embed_dim", self.embed_dim),
            ("proj_dim", self.proj_dim),
            ("dev_hidden", self.dev_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("model {name} must be positive")));
            }
        }
        if self.dilations.is_empty() || self.dilations.contains(&0) {
            return Err(Error::InvalidArgument("model dilations must be a nonempty list of positive values".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.prior_sigma > 0.0) {
            return Err(Error::InvalidArgument("prior sigma must be positive".into()));
        }
        Ok(())
    }
}

/// θ: residual TCN blocks, average pooling over time, linear map to D.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Encoder<T> {
    pub blocks: Vec<ResidualBlock<T>>,
    pub head: Linear<T>,
}

pub struct EncoderCache<T> {
    blocks: Vec<BlockCache<T>>,
    pooled: Array2<T>,
    len: usize,
}

impl<T: Real> Encoder<T> {
    fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let mut input = cfg.k;
        let blocks = cfg
            .dilations
            .iter()
            .map(|&d| {
                let b = ResidualBlock::new(input, cfg.channels, cfg.kernel_size, d, Padding::Causal, true, rng);
                input = cfg.channels;
                b
            })
            .collect();
        Encoder { blocks, head: Linear::new(cfg.channels, cfg.embed_dim, rng) }
    }

    /// `x: [K, N*L]` → `Z: [D, N]`.
    pub fn forward(&self, x: &Array2<T>, len: usize) -> (Array2<T>, EncoderCache<T>) {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (out, c) = b.forward(&h, len);
            caches.push(c);
            h = out;
        }
        let pooled = global_avg_pool(&h, len);
        (self.head.forward(&pooled), EncoderCache { blocks: caches, pooled, len })
    }

    pub fn infer(&self, x: &Array2<T>, len: usize) -> Array2<T> {
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.forward(&h, len).0;
        }
        self.head.forward(&global_avg_pool(&h, len))
    }

    pub fn backward(&self, cache: &EncoderCache<T>, dz: &Array2<T>, grad: &mut Self) -> Array2<T> {
        let dp = self.head.backward(&cache.pooled, dz, &mut grad.head);
        let mut dh = global_avg_pool_backward(&dp, cache.len);
        for ((b, c), g) in self.blocks.iter().zip(&cache.blocks).zip(&mut grad.blocks).rev() {
            dh = b.backward(c, &dh, cache.len, g);
        }
        dh
    }
}

impl<T> Params<T> for Encoder<T> {
    fn params(&self) -> Vec<&[T]> {
        let mut v: Vec<&[T]> = self.blocks.iter().flat_map(|b| b.params()).collect();
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut [T]> {
        let mut v: Vec<&mut [T]> = self.blocks.iter_mut().flat_map(|b| b.params_mut()).collect();
        v.extend(self.head.params_mut());
        v
    }
}

/// 𝔻: linear map D → C·L, then anticausal residual blocks mirroring the
/// encoder's dilation schedule; the last block maps to K channels with no
/// output activation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Decoder<T> {
    pub input: Linear<T>,
    pub blocks: Vec<ResidualBlock<T>>,
    pub channels: usize,
    pub len: usize,
}

pub struct DecoderCache<T> {
    z: Array2<T>,
    blocks: Vec<BlockCache<T>>,
}

impl<T: Real> Decoder<T> {
    fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let input = Linear::new(cfg.embed_dim, cfg.channels * cfg.l, rng);
        let n = cfg.dilations.len();
        let blocks = cfg
            .dilations
            .iter()
            .rev()
            .enumerate()
            .map(|(i, &d)| {
                let last = i + 1 == n;
                let out = if last { cfg.k } else { cfg.channels };
                ResidualBlock::new(cfg.channels, out, cfg.kernel_size, d, Padding::AntiCausal, !last, rng)
            })
            .collect();
        Decoder { input, blocks, channels: cfg.channels, len: cfg.l }
    }

    /// `Z: [D, N]` → `[K, N*L]`.
    pub fn forward(&self, z: &Array2<T>) -> (Array2<T>, DecoderCache<T>) {
        let mut h = unflatten_sequence(&self.input.forward(z), self.channels, self.len);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (out, c) = b.forward(&h, self.len);
            caches.push(c);
            h = out;
        }
        (h, DecoderCache { z: z.clone(), blocks: caches })
    }

    pub fn infer(&self, z: &Array2<T>) -> Array2<T> {
        let mut h = unflatten_sequence(&self.input.forward(z), self.channels, self.len);
        for b in &self.blocks {
            h = b.forward(&h, self.len).0;
        }
        h
    }

    pub fn backward(&self, cache: &DecoderCache<T>, dy: &Array2<T>, grad: &mut Self) -> Array2<T> {
        let mut dh = dy.clone();
        for ((b, c), g) in self.blocks.iter().zip(&cache.blocks).zip(&mut grad.blocks).rev() {
            dh = b.backward(c, &dh, self.len, g);
        }
        let dflat = unflatten_sequence_backward(&dh, self.len);
        self.input.backward(&cache.z, &dflat, &mut grad.input)
    }
}

impl<T> Params<T> for Decoder<T> {
    fn params(&self) -> Vec<&[T]> {
        let mut v = self.input.params();
        v.extend(self.blocks.iter().flat_map(|b| b.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<&mut [T]> {
        let mut v = self.input.params_mut();
        v.extend(self.blocks.iter_mut().flat_map(|b| b.params_mut()));
        v
    }
}

/// φ: Linear → BatchNorm → PReLU → Dropout → Linear.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct DeviationNet<T> {
    pub hidden: Linear<T>,
    pub norm: BatchNorm1d<T>,
    pub act: PRelu<T>,
    pub dropout: Dropout,
    pub out: Linear<T>,
}

pub struct DeviationCache<T> {
    z: Array2<T>,
    bn: BatchNormCache<T>,
    normed: Array2<T>,
    mask: Array2<T>,
    dropped: Array2<T>,
}

impl<T: Real> DeviationNet<T> {
    fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        DeviationNet {
            hidden: Linear::new(cfg.embed_dim, cfg.dev_hidden, rng),
            norm: BatchNorm1d::new(cfg.dev_hidden, cfg.bn_momentum, cfg.bn_eps),
            act: PRelu::new(cfg.prelu_init),
            dropout: Dropout { p: cfg.dropout },
            out: Linear::new(cfg.dev_hidden, 1, rng),
        }
    }

    /// Training mode: batch statistics and dropout. Returns `[1, N]`.
    pub fn forward_train(&self, z: &Array2<T>, rng: &mut dyn RngCore) -> (Array2<T>, DeviationCache<T>) {
        let h = self.hidden.forward(z);
        let (normed, bn) = self.norm.forward_train(&h);
        let a = self.act.forward(&normed);
        let (dropped, mask) = self.dropout.forward(&a, rng);
        let y = self.out.forward(&dropped);
        (y, DeviationCache { z: z.clone(), bn, normed, mask, dropped })
    }

    pub fn infer(&self, z: &Array2<T>) -> Array2<T> {
        let h = self.hidden.forward(z);
        self.out.forward(&self.act.forward(&self.norm.forward_eval(&h)))
    }

    pub fn backward(&self, cache: &DeviationCache<T>, dy: &Array2<T>, grad: &mut Self) -> Array2<T> {
        let dd = self.out.backward(&cache.dropped, dy, &mut grad.out);
        let da = dd * &cache.mask;
        let dn = self.act.backward(&cache.normed, &da, &mut grad.act);
        let dh = self.norm.backward(&cache.bn, &dn, &mut grad.norm);
        self.hidden.backward(&cache.z, &dh, &mut grad.hidden)
    }

    pub fn update_running(&mut self, cache: &DeviationCache<T>) {
        self.norm.update_running(&cache.bn);
    }
}

impl<T> Params<T> for DeviationNet<T> {
    fn params(&self) -> Vec<&[T]> {
        let mut v = self.hidden.params();
        v.extend(self.norm.params());
        v.extend(self.act.params());
        v.extend(self.out.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut [T]> {
        let mut v = self.hidden.params_mut();
        v.extend(self.norm.params_mut());
        v.extend(self.act.params_mut());
        v.extend(self.out.params_mut());
        v
    }
}

/// f: linear map D → d followed by L2 normalisation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ProjectionHead<T> {
    pub linear: Linear<T>,
    pub eps: f64,
}

pub struct ProjectionCache<T> {
    z: Array2<T>,
    u: Array2<T>,
    norms: Array1<T>,
}

impl<T: Real> ProjectionHead<T> {
    /// `Z: [D, N]` → unit columns `[d, N]`.
    pub fn forward(&self, z: &Array2<T>) -> (Array2<T>, ProjectionCache<T>) {
        let u = self.linear.forward(z);
        let (g, norms) = l2_normalize_columns(&u, self.eps);
        (g, ProjectionCache { z: z.clone(), u, norms })
    }

    pub fn backward(&self, cache: &ProjectionCache<T>, dg: &Array2<T>, grad: &mut Self) -> Array2<T> {
        let du = l2_normalize_columns_backward(&cache.u, &cache.norms, dg, self.eps);
        self.linear.backward(&cache.z, &du, &mut grad.linear)
    }
}

impl<T> Params<T> for ProjectionHead<T> {
    fn params(&self) -> Vec<&[T]> {
        self.linear.params()
    }

    fn params_mut(&mut self) -> Vec<&mut [T]> {
        self.linear.params_mut()
    }
}

/// Counts encoder invocations, one per input sequence.
#[derive(Debug, Default)]
pub struct PassCounter(AtomicU64);

impl Clone for PassCounter {
    fn clone(&self) -> Self {
        PassCounter(AtomicU64::new(self.get()))
    }
}

impl PassCounter {
    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    fn add(&self, n: usize) {
        self.0.fetch_add(n as u64, Ordering::Relaxed);
    }

    pub fn reset(&self) {
        self.0.store(0, Ordering::Relaxed);
    }
}

/// Length-D output of θ for one window.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureEmbedding<T>(pub Array1<T>);

/// Unit-norm length-d output of f for one window.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionEmbedding<T>(pub Array1<T>);

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ModelBundle<T> {
    pub config: ModelConfig,
    pub encoder: Encoder<T>,
    pub decoder: Decoder<T>,
    pub deviation: DeviationNet<T>,
    pub projection: ProjectionHead<T>,
    #[serde(skip)]
    passes: PassCounter,
}

impl<T: Real> ModelBundle<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(&config, &mut rng);
        let decoder = Decoder::new(&config, &mut rng);
        let deviation = DeviationNet::new(&config, &mut rng);
        let projection =
            ProjectionHead { linear: Linear::new(config.embed_dim, config.proj_dim, &mut rng), eps: config.norm_eps };
        Ok(ModelBundle { config, encoder, decoder, deviation, projection, passes: PassCounter::default() })
    }

    /// Number of sequences pushed through the encoder since creation or the
    /// last reset.
    pub fn encoder_passes(&self) -> u64 {
        self.passes.get()
    }

    pub fn reset_pass_counter(&self) {
        self.passes.reset();
    }

    pub(crate) fn count_passes(&self, n: usize) {
        self.passes.add(n);
    }

    pub fn check_shape(&self, x: &ArrayView2<f32>) -> Result<()> {
        let (k, l) = (self.config.k, self.config.l);
        if x.dim() != (k, l) {
            return Err(Error::shape(format!("{k}x{l}"), format!("{}x{}", x.nrows(), x.ncols())));
        }
        Ok(())
    }

    /// Stacks windows into a `[K, N*L]` activation matrix.
    pub fn stack(&self, xs: &[ArrayView2<f32>]) -> Result<Array2<T>> {
        let (k, l) = (self.config.k, self.config.l);
        let mut out = Array2::zeros((k, xs.len() * l));
        for (i, x) in xs.iter().enumerate() {
            self.check_shape(x)?;
            out.slice_mut(s![.., i * l..(i + 1) * l]).zip_mut_with(x, |o, &v| *o = cast(v as f64));
        }
        Ok(out)
    }

    /// Eval-mode θ on stacked input, processed in chunks.
    pub fn encode(&self, x: &Array2<T>) -> Array2<T> {
        let l = self.config.l;
        let n = x.ncols() / l;
        self.count_passes(n);
        let mut z = Array2::zeros((self.config.embed_dim, n));
        for start in (0..n).step_by(INFER_CHUNK) {
            let end = (start + INFER_CHUNK).min(n);
            let part = x.slice(s![.., start * l..end * l]).to_owned();
            z.slice_mut(s![.., start..end]).assign(&self.encoder.infer(&part, l));
        }
        z
    }

    pub fn decode(&self, z: &Array2<T>) -> Array2<T> {
        let l = self.config.l;
        let n = z.ncols();
        let mut out = Array2::zeros((self.config.k, n * l));
        for start in (0..n).step_by(INFER_CHUNK) {
            let end = (start + INFER_CHUNK).min(n);
            let part = z.slice(s![.., start..end]).to_owned();
            out.slice_mut(s![.., start * l..end * l]).assign(&self.decoder.infer(&part));
        }
        out
    }

    /// Eval-mode (φ(z) − μ)/σ for every column of `z`.
    pub fn deviation_scores(&self, z: &Array2<T>) -> Array1<T> {
        let (mu, sigma): (T, T) = (cast(self.config.prior_mu), cast(self.config.prior_sigma));
        self.deviation.infer(z).row(0).mapv(|v| (v - mu) / sigma)
    }

    /// Unit-norm projections `[d, N]`.
    pub fn projections(&self, z: &Array2<T>) -> Array2<T> {
        self.projection.forward(z).0
    }

    pub fn extract_features(&self, x: ArrayView2<f32>) -> Result<FeatureEmbedding<T>> {
        let z = self.encode(&self.stack(&[x])?);
        Ok(FeatureEmbedding(z.column(0).to_owned()))
    }

    fn embedding_column(&self, z: &FeatureEmbedding<T>) -> Result<Array2<T>> {
        if z.0.len() != self.config.embed_dim {
            return Err(Error::shape(format!("embedding of length {}", self.config.embed_dim), z.0.len().to_string()));
        }
        Ok(z.0.clone().insert_axis(Axis(1)))
    }

    pub fn deviation_score(&self, z: &FeatureEmbedding<T>) -> Result<T> {
        Ok(self.deviation_scores(&self.embedding_column(z)?)[0])
    }

    pub fn project(&self, z: &FeatureEmbedding<T>) -> Result<ProjectionEmbedding<T>> {
        Ok(ProjectionEmbedding(self.projections(&self.embedding_column(z)?).column(0).to_owned()))
    }

    /// Plain autoencoding 𝔻(θ(x)) of one window.
    pub fn reconstruct(&self, x: ArrayView2<f32>) -> Result<Array2<T>> {
        Ok(self.decode(&self.encode(&self.stack(&[x])?)))
    }

    /// x̂ = Σ_k M'_k(𝔻(θ(M_k x))).
    pub fn masked_reconstruct(&self, x: ArrayView2<f32>) -> Result<Array2<T>> {
        Ok(self.masked_reconstruct_batch(&[x])?.pop().expect("one window"))
    }

    /// Masked reconstruction of many windows, with all `N*K` masked copies
    /// pushed through the networks in batches.
    pub fn masked_reconstruct_batch(&self, xs: &[ArrayView2<f32>]) -> Result<Vec<Array2<T>>> {
        let (k, l) = (self.config.k, self.config.l);
        let copies = masked_copies(xs, k, l)?;
        let stacked = self.stack(&copies.iter().map(|c| c.view()).collect::<Vec<_>>())?;
        let out = self.decode(&self.encode(&stacked));
        Ok((0..xs.len()).map(|i| assemble_rows(&out, i, k, l)).collect())
    }
}

/// The K masked copies of every window, window-major.
pub(crate) fn masked_copies(xs: &[ArrayView2<f32>], k: usize, l: usize) -> Result<Vec<Array2<f32>>> {
    let mut out = Vec::with_capacity(xs.len() * k);
    for x in xs {
        if x.dim() != (k, l) {
            return Err(Error::shape(format!("{k}x{l}"), format!("{}x{}", x.nrows(), x.ncols())));
        }
        for var in 0..k {
            out.push(mask_variable(*x, var)?);
        }
    }
    Ok(out)
}

/// Row `var` of window `i`'s reconstruction comes from decoder output of
/// masked copy `i*K + var`.
pub(crate) fn assemble_rows<T: Real>(decoded: &Array2<T>, i: usize, k: usize, l: usize) -> Array2<T> {
    let mut x_hat = Array2::zeros((k, l));
    for var in 0..k {
        let col = (i * k + var) * l;
        x_hat.row_mut(var).assign(&decoded.slice(s![var, col..col + l]));
    }
    x_hat
}

/// Masked reconstruction with an arbitrary stand-in for 𝔻∘θ.
pub fn masked_reconstruct_with<F>(x: ArrayView2<f32>, mut net: F) -> Result<Array2<f32>>
where
    F: FnMut(&Array2<f32>) -> Array2<f32>,
{
    let (k, l) = x.dim();
    let mut x_hat = Array2::zeros((k, l));
    for var in 0..k {
        let y = net(&mask_variable(x, var)?);
        if y.dim() != (k, l) {
            return Err(Error::shape(format!("{k}x{l}"), format!("{}x{}", y.nrows(), y.ncols())));
        }
        x_hat.row_mut(var).assign(&y.row(var));
    }
    Ok(x_hat)
}

impl<T> Params<T> for ModelBundle<T> {
    fn params(&self) -> Vec<&[T]> {
        let mut v = self.encoder.params();
        v.extend(self.decoder.params());
        v.extend(self.deviation.params());
        v.extend(self.projection.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut [T]> {
        let mut v = self.encoder.params_mut();
        v.extend(self.decoder.params_mut());
        v.extend(self.deviation.params_mut());
        v.extend(self.projection.params_mut());
        v
    }
}
