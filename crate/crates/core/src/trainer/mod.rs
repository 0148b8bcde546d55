//! Joint optimisation of the model, early stopping on a normal holdout, and
//! fitting of the reconstruction-score normaliser.

mod checkpoint;
mod step;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};

use std::io::Write;
use std::path::Path;

use log::{debug, info, warn};
use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{AugmentConfig, AugmentPlan};
use crate::data::{assemble_batch, OpenSetDataset, SampleWindow};
use crate::losses::{LossBreakdown, DEFAULT_MARGIN, DEFAULT_TEMPERATURE};
use crate::model::{ModelBundle, ModelConfig};
use crate::nn::{clip_global_norm, AmsGrad, Params, Real};
use crate::{Error, Heads, Result};

/// Model precision used for training and inference.
pub type Model = ModelBundle<f32>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Real labelled anomalies per batch; `None` uses min(4, |pool|).
    pub anomaly_quota: Option<usize>,
    /// Synthetic (COE / WMix) anomalies per batch.
    pub synth_quota: usize,
    pub early_stop_patience: usize,
    pub holdout_fraction: f64,
    /// Replace the anomaly-aware contrastive loss by plain supervised
    /// contrastive learning.
    pub vsc: bool,
    pub head_mask: Heads,
    pub coe: bool,
    pub wmix: bool,
    pub augment: AugmentConfig,
    /// Under the unsupervised setting, keep dev/con in the head mask and
    /// train them on synthetic anomalies only.
    pub unsupervised_synthetic: bool,
    pub margin: f64,
    pub temperature: f64,
    pub grad_clip: f64,
    /// Masked variables reconstructed per normal window and step. `None`
    /// reconstructs all K (the exact masked-reconstruction objective); a
    /// smaller number gives an unbiased estimate at lower cost. Holdout and
    /// scoring always use all K. Written as `"all"` in config files.
    #[serde(with = "count_or_all")]
    pub rec_vars_per_sample: Option<usize>,
    /// Batches per epoch; `None` makes one pass over the training normals.
    pub steps_per_epoch: Option<usize>,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            max_epochs: 30,
            batch_size: 64,
            seed: 123,
            anomaly_quota: None,
            synth_quota: 4,
            early_stop_patience: 5,
            holdout_fraction: 0.1,
            vsc: false,
            head_mask: Heads::ALL,
            coe: true,
            wmix: true,
            augment: AugmentConfig::default(),
            unsupervised_synthetic: false,
            margin: DEFAULT_MARGIN,
            temperature: DEFAULT_TEMPERATURE,
            grad_clip: 5.0,
            rec_vars_per_sample: Some(2),
            steps_per_epoch: None,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("learning rate must be positive and weight decay non-negative".into());
        }
        if self.max_epochs == 0 || self.batch_size < 2 {
            return bad("max_epochs must be positive and batch_size at least 2".into());
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return bad(format!("holdout fraction {} outside (0, 1)", self.holdout_fraction));
        }
        if self.head_mask.is_empty() {
            return bad("head mask must not be empty".into());
        }
        if !(self.margin > 0.0) || !(self.temperature > 0.0) || !(self.grad_clip > 0.0) {
            return bad("margin, temperature and gradient clip must be positive".into());
        }
        if self.rec_vars_per_sample == Some(0) || self.steps_per_epoch == Some(0) {
            return bad("rec_vars_per_sample and steps_per_epoch must be positive when set".into());
        }
        self.augment.validate()
    }

    pub fn augment_plan(&self) -> AugmentPlan {
        AugmentPlan { config: self.augment, coe: self.coe, wmix: self.wmix }
    }

    /// The heads actually trained on `dataset`.
    pub fn effective_heads(&self, dataset: &OpenSetDataset) -> Heads {
        if dataset.setting().is_unsupervised() && !self.unsupervised_synthetic {
            Heads::REC
        } else {
            self.head_mask
        }
    }
}

mod count_or_all {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Count(usize),
        Word(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<usize>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(n) => Repr::Count(*n),
            None => Repr::Word("all".into()),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<usize>, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Count(n) => Ok(Some(n)),
            Repr::Word(w) if w == "all" => Ok(None),
            Repr::Word(w) => Err(serde::de::Error::custom(format!("expected a count or \"all\", got {w:?}"))),
        }
    }
}

/// Min/max of the raw reconstruction error over held-out normal windows.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreNormalizer {
    pub min_raw: f64,
    pub max_raw: f64,
}

impl ScoreNormalizer {
    pub fn new(min_raw: f64, max_raw: f64) -> Result<Self> {
        if !(min_raw.is_finite() && max_raw.is_finite() && min_raw <= max_raw) {
            return Err(Error::InvalidArgument(format!("normalizer needs finite min <= max, got ({min_raw}, {max_raw})")));
        }
        Ok(ScoreNormalizer { min_raw, max_raw })
    }

    pub fn from_errors(errors: &[f64]) -> Result<Self> {
        if errors.is_empty() {
            return Err(Error::InvalidArgument("normalizer needs at least one sample".into()));
        }
        let min = errors.iter().copied().fold(f64::INFINITY, f64::min);
        let max = errors.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self::new(min, max)
    }

    /// Affine map of [min, max] onto [0, 1], clamped. A degenerate range
    /// maps everything at or below it to 0 and everything above to 1.
    pub fn normalize(&self, raw: f64) -> f64 {
        if self.max_raw == self.min_raw {
            return if raw <= self.min_raw { 0.0 } else { 1.0 };
        }
        ((raw - self.min_raw) / (self.max_raw - self.min_raw)).clamp(0.0, 1.0)
    }
}

/// Mean squared masked-reconstruction error of each window.
pub fn raw_reconstruction_errors<T: Real>(model: &ModelBundle<T>, windows: &[SampleWindow]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(64) {
        let views: Vec<ArrayView2<f32>> = chunk.iter().map(|w| w.values.view()).collect();
        for (x_hat, w) in model.masked_reconstruct_batch(&views)?.iter().zip(chunk) {
            let se: f64 = x_hat
                .iter()
                .zip(w.values.iter())
                .map(|(a, &b)| {
                    let d = a.to_f64().unwrap_or(f64::NAN) - f64::from(b);
                    d * d
                })
                .sum();
            out.push(se / w.values.len() as f64);
        }
    }
    Ok(out)
}

pub fn fit_normalizer<T: Real>(model: &ModelBundle<T>, normals: &[SampleWindow]) -> Result<ScoreNormalizer> {
    if let Some(w) = normals.iter().find(|w| !w.is_normal()) {
        return Err(Error::Sample { sample: w.id.clone(), msg: "normalizer subset must contain only normal windows".into() });
    }
    ScoreNormalizer::from_errors(&raw_reconstruction_errors(model, normals)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: LossBreakdown,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub holdout: LossBreakdown,
    pub best_so_far: f64,
    pub improved: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub skipped_steps: usize,
}

impl TrainLog {
    /// `step,rec,dev,con,total`
    pub fn write_steps_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        w.write_record(["step", "rec", "dev", "con", "total"]).map_err(|e| csv_err(path, e))?;
        for s in &self.steps {
            let l = s.loss;
            w.write_record([s.step.to_string(), fmt(l.rec), fmt(l.dev), fmt(l.con), fmt(l.total)])
                .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_epochs_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        w.write_record([
            "epoch",
            "train_rec",
            "train_dev",
            "train_con",
            "train_total",
            "holdout_rec",
            "holdout_dev",
            "holdout_con",
            "holdout_total",
            "best_so_far",
        ])
        .map_err(|e| csv_err(path, e))?;
        for e in &self.epochs {
            let (t, h) = (e.train, e.holdout);
            w.write_record([
                e.epoch.to_string(),
                fmt(t.rec),
                fmt(t.dev),
                fmt(t.con),
                fmt(t.total),
                fmt(h.rec),
                fmt(h.dev),
                fmt(h.con),
                fmt(h.total),
                fmt(e.best_so_far),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.8e}")
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| csv_err(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

pub struct TrainOutput {
    pub model: Model,
    pub normalizer: ScoreNormalizer,
    pub log: TrainLog,
    pub heads: Heads,
    /// Normal windows used for training (holdout excluded), for drawing the
    /// contrastive reference set.
    pub train_normals: Vec<SampleWindow>,
    pub holdout: Vec<SampleWindow>,
    pub config: TrainConfig,
}

/// Splits the normal pool with a seeded shuffle; the last
/// `ceil(fraction * N)` windows of the shuffled order form the holdout.
pub fn split_holdout(normals: &[SampleWindow], fraction: f64, seed: u64) -> Result<(Vec<SampleWindow>, Vec<SampleWindow>)> {
    let n = normals.len();
    let h = ((fraction * n as f64).ceil() as usize).max(1);
    if n < h + 2 {
        return Err(Error::Training(format!("normal pool of {n} windows too small for a {fraction} holdout")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    order.shuffle(&mut rng);
    let train = order[..n - h].iter().map(|&i| normals[i].clone()).collect();
    let holdout = order[n - h..].iter().map(|&i| normals[i].clone()).collect();
    Ok((train, holdout))
}

/// SHA-256 over all parameters and BatchNorm running statistics.
pub fn parameter_digest(model: &Model) -> String {
    let mut h = Sha256::new();
    for p in model.params() {
        for v in p {
            h.update(v.to_le_bytes());
        }
    }
    for v in model.deviation.norm.running_mean.iter().chain(model.deviation.norm.running_var.iter()) {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

struct Optimizers {
    encoder: AmsGrad<f32>,
    decoder: AmsGrad<f32>,
    deviation: AmsGrad<f32>,
    projection: AmsGrad<f32>,
}

/// Clips the joint gradient norm of the active components, then applies one
/// optimiser update to each of them. Inactive components are untouched.
fn apply_update(model: &mut Model, grads: &mut Model, heads: Heads, opt: &mut Optimizers, clip: f64) {
    let mut active: Vec<&mut [f32]> = grads.encoder.params_mut();
    if heads.rec {
        active.extend(grads.decoder.params_mut());
    }
    if heads.dev {
        active.extend(grads.deviation.params_mut());
    }
    if heads.con {
        active.extend(grads.projection.params_mut());
    }
    clip_global_norm(active, clip);
    opt.encoder.step(model.encoder.params_mut(), grads.encoder.params());
    if heads.rec {
        opt.decoder.step(model.decoder.params_mut(), grads.decoder.params());
    }
    if heads.dev {
        opt.deviation.step(model.deviation.params_mut(), grads.deviation.params());
    }
    if heads.con {
        opt.projection.step(model.projection.params_mut(), grads.projection.params());
    }
}

const MAX_NONFINITE_STEPS: usize = 3;

/// Trains a model on `dataset` and fits the score normaliser on the holdout.
pub fn train(dataset: &OpenSetDataset, config: &TrainConfig) -> Result<TrainOutput> {
    config.validate()?;
    let heads = config.effective_heads(dataset);
    if heads != config.head_mask {
        info!("unsupervised setting: training the generative head only");
    }
    let plan = config.augment_plan();
    let anomalies = dataset.anomaly_pool();
    if heads.needs_anomalies() && anomalies.is_empty() && !plan.any() {
        return Err(Error::Training(
            "dev/con heads requested but there are no labelled anomalies and augmentation is disabled".into(),
        ));
    }
    let anomaly_quota = if heads.needs_anomalies() {
        config.anomaly_quota.unwrap_or(4).min(anomalies.len())
    } else {
        0
    };
    let synth_quota = if heads.needs_anomalies() && plan.any() { config.synth_quota } else { 0 };
    if anomaly_quota + synth_quota + 2 > config.batch_size {
        return Err(Error::InvalidArgument(format!(
            "batch size {} leaves fewer than 2 normal windows after quotas {anomaly_quota} + {synth_quota}",
            config.batch_size
        )));
    }
    let normals_per_batch = config.batch_size - anomaly_quota - synth_quota;

    let (train_normals, holdout) = split_holdout(dataset.normal_pool(), config.holdout_fraction, config.seed)?;
    if train_normals.len() < normals_per_batch {
        return Err(Error::Training(format!(
            "{} training normals cannot fill a batch of {normals_per_batch}",
            train_normals.len()
        )));
    }
    let mut model_cfg = config.model.clone();
    model_cfg.k = dataset.k();
    model_cfg.l = dataset.l();
    let mut model = Model::new(model_cfg, config.seed)?;
    let mut grads = model.clone();
    grads.zero();
    let mk = || AmsGrad::new(config.learning_rate, config.weight_decay);
    let mut opt = Optimizers { encoder: mk(), decoder: mk(), deviation: mk(), projection: mk() };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(2);
    let steps_per_epoch = config.steps_per_epoch.unwrap_or(train_normals.len() / normals_per_batch).max(1);

    let mut log = TrainLog::default();
    let mut best: Option<(f64, Model)> = None;
    let mut since_best = 0;
    let mut nonfinite_run = 0;
    let mut order: Vec<usize> = (0..train_normals.len()).collect();
    let mut cursor = order.len();
    let mut global_step = 0;

    for epoch in 1..=config.max_epochs {
        let mut sum = LossBreakdown::default();
        let mut counted = 0usize;
        for _ in 0..steps_per_epoch {
            if cursor + normals_per_batch > order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let picked: Vec<&SampleWindow> =
                order[cursor..cursor + normals_per_batch].iter().map(|&i| &train_normals[i]).collect();
            cursor += normals_per_batch;
            let batch = assemble_batch(&picked, anomalies, anomaly_quota, synth_quota, &plan, &mut rng)?;
            global_step += 1;

            grads.zero();
            match step::forward_backward(&model, &mut grads, &batch, heads, config, &mut rng) {
                Ok(out) => {
                    nonfinite_run = 0;
                    apply_update(&mut model, &mut grads, heads, &mut opt, config.grad_clip);
                    if let Some(c) = &out.deviation_cache {
                        model.deviation.update_running(c);
                    }
                    let l = out.loss;
                    sum = LossBreakdown { rec: sum.rec + l.rec, dev: sum.dev + l.dev, con: sum.con + l.con, total: sum.total + l.total };
                    counted += 1;
                    log.steps.push(StepRecord { step: global_step, epoch, loss: l });
                }
                Err(Error::NonFinite { head }) => {
                    nonfinite_run += 1;
                    log.skipped_steps += 1;
                    warn!("step {global_step}: {head} loss non-finite, update skipped");
                    if nonfinite_run >= MAX_NONFINITE_STEPS {
                        return Err(Error::Training(format!(
                            "{head} loss non-finite for {MAX_NONFINITE_STEPS} consecutive steps \
                             (epoch {epoch}, step {global_step}, last finite holdout {:?})",
                            log.epochs.last().map(|e| e.holdout.total)
                        )));
                    }
                }
                Err(e) => return Err(e),
            }
        }
        let c = counted.max(1) as f64;
        let train_mean =
            LossBreakdown { rec: sum.rec / c, dev: sum.dev / c, con: sum.con / c, total: sum.total / c };
        let hold = step::holdout_loss(&model, &holdout, heads, config)?;
        let improved = best.as_ref().is_none_or(|(b, _)| hold.total < *b);
        if improved {
            best = Some((hold.total, model.clone()));
            log.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
        }
        let best_so_far = best.as_ref().map_or(f64::NAN, |(b, _)| *b);
        log.epochs.push(EpochRecord { epoch, train: train_mean, holdout: hold, best_so_far, improved });
        debug!(
            "epoch {epoch}: train {:.4} (rec {:.4} dev {:.4} con {:.4}) holdout {:.4}",
            train_mean.total, train_mean.rec, train_mean.dev, train_mean.con, hold.total
        );
        if since_best >= config.early_stop_patience {
            log.stopped_early = true;
            info!("early stop after epoch {epoch}; best epoch {}", log.best_epoch);
            break;
        }
    }
    let (_, model) = best.ok_or_else(|| Error::Training("no epoch completed".into()))?;
    let normalizer = fit_normalizer(&model, &holdout)?;
    Ok(TrainOutput { model, normalizer, log, heads, train_normals, holdout, config: config.clone() })
}

/// Loss and parameter gradients of one batch in training mode. Dropout
/// and the sampled reconstruction variables are driven by `seed`.
pub fn batch_gradients<T: Real>(
    model: &ModelBundle<T>,
    batch: &[SampleWindow],
    heads: Heads,
    config: &TrainConfig,
    seed: u64,
) -> Result<(LossBreakdown, ModelBundle<T>)> {
    let mut grads = model.clone();
    grads.zero();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = step::forward_backward(model, &mut grads, batch, heads, config, &mut rng)?;
    Ok((out.loss, grads))
}

pub fn read_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg: TrainConfig =
        toml::from_str(&text).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Writes a config snapshot as TOML.
pub fn write_config(config: &TrainConfig, path: &Path) -> Result<()> {
    let text = toml::to_string(config).map_err(|e| Error::InvalidArgument(format!("config: {e}")))?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
