//! Deterministic synthetic multivariate series with injectable anomalies.
//!
//! Each variable is two sinusoids with fixed per-variable frequencies and
//! phases, a loading on a latent AR(1) driver shared by all variables, and
//! its own AR(1) noise. A per-window time offset is shared by all
//! variables, so every variable is predictable from the others.
//!
//! Anomaly classes:
//! * `spike`: an additive ±5σ burst on 1–3 variables over a sub-window;
//! * `scale`: 1–3 variables amplified by a factor in [2, 3] over a sub-window;
//! * `decorrelate`: two variables exchange content over a sub-window.

use std::collections::BTreeSet;
use std::f64::consts::TAU;
use std::path::Path;

use ndarray::Array2;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::dataset::{ChannelStats, OpenSetDataset, Setting};
use super::window::SampleWindow;
use crate::{Error, Result};

pub const CLASSES: [&str; 3] = ["spike", "scale", "decorrelate"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub k: usize,
    pub l: usize,
    pub train_normal: usize,
    pub test_normal: usize,
    /// Candidate labelled anomalies per class in the training anomaly pool.
    pub train_anomalies_per_class: usize,
    pub test_anomalies_per_class: usize,
    pub classes: Vec<String>,
    #[serde(default = "default_rate")]
    pub sampling_rate_hz: f64,
}

fn default_rate() -> f64 {
    1.0
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            k: 8,
            l: 128,
            train_normal: 2000,
            test_normal: 400,
            train_anomalies_per_class: 30,
            test_anomalies_per_class: 40,
            classes: CLASSES.iter().map(|c| c.to_string()).collect(),
            sampling_rate_hz: 1.0,
        }
    }
}

impl GeneratorConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("generator config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 || self.l < 8 {
            return Err(Error::InvalidArgument("generator needs K >= 2 and L >= 8".into()));
        }
        if self.train_normal == 0 {
            return Err(Error::InvalidArgument("generator needs training normals".into()));
        }
        for c in &self.classes {
            if !CLASSES.contains(&c.as_str()) {
                return Err(Error::InvalidArgument(format!(
                    "unknown anomaly class {c:?} (expected one of {CLASSES:?})"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ChannelShape {
    freq: [f64; 2],
    amp: [f64; 2],
    phase: [f64; 2],
    loading: f64,
    ar: f64,
    noise: f64,
}

/// Fixed per-variable dynamics.
#[derive(Clone, Debug)]
pub struct SeriesModel {
    channels: Vec<ChannelShape>,
    l: usize,
}

const LATENT_AR: f64 = 0.9;

impl SeriesModel {
    pub fn draw<R: Rng + ?Sized>(k: usize, l: usize, rng: &mut R) -> Self {
        let channels = (0..k)
            .map(|_| {
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                ChannelShape {
                    freq: [rng.random_range(1.0..4.0), rng.random_range(4.0..10.0)],
                    amp: [rng.random_range(0.6..1.2), rng.random_range(0.2..0.6)],
                    phase: [rng.random_range(0.0..TAU), rng.random_range(0.0..TAU)],
                    loading: sign * rng.random_range(0.3..0.8),
                    ar: rng.random_range(0.3..0.7),
                    noise: 0.15,
                }
            })
            .collect();
        SeriesModel { channels, l }
    }

    /// One raw (unstandardised) normal window.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Array2<f32> {
        let (k, l) = (self.channels.len(), self.l);
        let offset = rng.random_range(0.0..(4 * l) as f64);
        let innov = (1.0 - LATENT_AR * LATENT_AR).sqrt();
        let mut latent = Vec::with_capacity(l);
        let mut z: f64 = rng.sample(StandardNormal);
        for _ in 0..l {
            latent.push(z);
            let e: f64 = rng.sample(StandardNormal);
            z = LATENT_AR * z + innov * e;
        }
        let mut x = Array2::zeros((k, l));
        for (c, ch) in self.channels.iter().enumerate() {
            let mut ar: f64 = 0.0;
            for t in 0..l {
                let tt = (t as f64 + offset) / l as f64;
                let seasonal: f64 = (0..2)
                    .map(|j| ch.amp[j] * (TAU * ch.freq[j] * tt + ch.phase[j]).sin())
                    .sum();
                let e: f64 = StandardNormal.sample(rng);
                ar = ch.ar * ar + ch.noise * e;
                x[[c, t]] = (seasonal + ch.loading * latent[t] + ar) as f32;
            }
        }
        x
    }
}

/// Where an anomaly was injected.
#[derive(Clone, Debug, PartialEq)]
pub struct Injection {
    pub channels: Vec<usize>,
    pub start: usize,
    pub len: usize,
}

fn sub_window<R: Rng + ?Sized>(l: usize, lo: f64, hi: f64, rng: &mut R) -> (usize, usize) {
    let len = ((rng.random_range(lo..hi) * l as f64).round() as usize).clamp(1, l);
    (rng.random_range(0..=l - len), len)
}

fn pick_channels<R: Rng + ?Sized>(k: usize, max: usize, rng: &mut R) -> Vec<usize> {
    let n = rng.random_range(1..=max.min(k));
    let mut c = index::sample(rng, k, n).into_vec();
    c.sort_unstable();
    c
}

/// Injects `class` into a raw window. `stats` are the raw normal-pool
/// statistics (spike height is 5 per-variable standard deviations).
pub fn inject_anomaly<R: Rng + ?Sized>(
    x: &Array2<f32>,
    class: &str,
    stats: &ChannelStats,
    rng: &mut R,
) -> Result<(Array2<f32>, Injection)> {
    let (k, l) = x.dim();
    let mut out = x.clone();
    let inj = match class {
        "spike" => {
            let channels = pick_channels(k, 3, rng);
            let (start, len) = sub_window(l, 0.05, 0.15, rng);
            for &c in &channels {
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let h = (sign * 5.0 * stats.std[c]) as f32;
                for t in start..start + len {
                    out[[c, t]] += h;
                }
            }
            Injection { channels, start, len }
        }
        "scale" => {
            let channels = pick_channels(k, 3, rng);
            let (start, len) = sub_window(l, 0.1, 0.3, rng);
            for &c in &channels {
                let f = rng.random_range(2.0..=3.0);
                let m = stats.mean[c];
                for t in start..start + len {
                    out[[c, t]] = (m + f * (out[[c, t]] as f64 - m)) as f32;
                }
            }
            Injection { channels, start, len }
        }
        "decorrelate" => {
            let mut channels = index::sample(rng, k, 2).into_vec();
            channels.sort_unstable();
            let (start, len) = sub_window(l, 0.2, 0.4, rng);
            for t in start..start + len {
                out[[channels[0], t]] = x[[channels[1], t]];
                out[[channels[1], t]] = x[[channels[0], t]];
            }
            Injection { channels, start, len }
        }
        other => {
            return Err(Error::InvalidArgument(format!("unknown anomaly class {other:?}")));
        }
    };
    Ok((out, inj))
}

/// Generates the full dataset (general setting, every class seen), with all
/// windows z-scored by normal-pool statistics.
pub fn generate_synthetic_dataset(config: &GeneratorConfig, seed: u64) -> Result<OpenSetDataset> {
    config.validate()?;
    let (k, l) = (config.k, config.l);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = SeriesModel::draw(k, l, &mut rng);

    let train_raw: Vec<Array2<f32>> = (0..config.train_normal).map(|_| model.sample(&mut rng)).collect();
    let stats = ChannelStats::fit(train_raw.iter())?;

    let mut anomalies_raw = Vec::new();
    for class in &config.classes {
        for i in 0..config.train_anomalies_per_class {
            let (x, _) = inject_anomaly(&model.sample(&mut rng), class, &stats, &mut rng)?;
            anomalies_raw.push((format!("train-a-{class}-{i:04}"), x, class.clone()));
        }
    }
    let test_normal_raw: Vec<Array2<f32>> = (0..config.test_normal).map(|_| model.sample(&mut rng)).collect();
    let mut test_anom_raw = Vec::new();
    for class in &config.classes {
        for i in 0..config.test_anomalies_per_class {
            let (x, _) = inject_anomaly(&model.sample(&mut rng), class, &stats, &mut rng)?;
            test_anom_raw.push((format!("test-a-{class}-{i:04}"), x, class.clone()));
        }
    }

    let z = |mut x: Array2<f32>| {
        stats.apply(&mut x);
        x
    };
    let normal_pool = train_raw
        .into_iter()
        .enumerate()
        .map(|(i, x)| SampleWindow::normal(format!("train-n-{i:05}"), z(x)))
        .collect::<Result<Vec<_>>>()?;
    let anomaly_pool = anomalies_raw
        .into_iter()
        .map(|(id, x, c)| SampleWindow::new(id, z(x), 1.0, c))
        .collect::<Result<Vec<_>>>()?;
    let mut test_pool = test_normal_raw
        .into_iter()
        .enumerate()
        .map(|(i, x)| SampleWindow::normal(format!("test-n-{i:05}"), z(x)))
        .collect::<Result<Vec<_>>>()?;
    for (id, x, c) in test_anom_raw {
        test_pool.push(SampleWindow::new(id, z(x), 1.0, c)?);
    }

    let classes: BTreeSet<String> = config.classes.iter().cloned().collect();
    OpenSetDataset::new(
        k,
        l,
        normal_pool,
        anomaly_pool,
        test_pool,
        classes.clone(),
        classes,
        Setting::General,
    )
}

/// Generates and writes the dataset under `dir`; returns the manifest path.
pub fn generate_to_dir(config: &GeneratorConfig, seed: u64, dir: &Path) -> Result<std::path::PathBuf> {
    let ds = generate_synthetic_dataset(config, seed)?;
    super::write_dataset(&ds, dir, Some(config.sampling_rate_hz))
}
