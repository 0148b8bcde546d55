//! Synthetic anomalies: contextual outlier exposure (COE) swaps two
//! variables inside a short window; window mixup (WMix) blends two windows
//! with a Beta(α, α) weight and a matching soft label.

use ndarray::{s, Array2, Zip};
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::data::{SampleWindow, COE_TAG, WMIX_TAG};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Beta(α, α) shape for the mixup weight.
    pub alpha: f64,
    /// COE window length as a fraction of `L`, drawn uniformly in this range.
    pub coe_frac_lo: f64,
    pub coe_frac_hi: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            alpha: 0.05,
            coe_frac_lo: 0.1,
            coe_frac_hi: 0.3,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!("alpha must be > 0, got {}", self.alpha)));
        }
        let (lo, hi) = (self.coe_frac_lo, self.coe_frac_hi);
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "COE window fraction range must satisfy 0 < lo <= hi <= 1, got [{lo}, {hi}]"
            )));
        }
        Ok(())
    }
}

/// Which augmentations feed synthetic anomalies into training batches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentPlan {
    pub config: AugmentConfig,
    pub coe: bool,
    pub wmix: bool,
}

impl Default for AugmentPlan {
    fn default() -> Self {
        AugmentPlan {
            config: AugmentConfig::default(),
            coe: true,
            wmix: true,
        }
    }
}

impl AugmentPlan {
    pub fn any(&self) -> bool {
        self.coe || self.wmix
    }
}

/// One COE corruption: rows `u` and `v` exchange `len` values from `start`.
/// The same window is used for both variables.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CoeSwap {
    pub start: usize,
    pub len: usize,
    pub u: usize,
    pub v: usize,
}

impl CoeSwap {
    pub fn draw<R: Rng + ?Sized>(k: usize, l: usize, config: &AugmentConfig, rng: &mut R) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidArgument(format!("COE needs at least 2 variables, got {k}")));
        }
        config.validate()?;
        let frac = if config.coe_frac_hi > config.coe_frac_lo {
            rng.random_range(config.coe_frac_lo..=config.coe_frac_hi)
        } else {
            config.coe_frac_lo
        };
        let len = ((frac * l as f64).round() as usize).clamp(1, l);
        let start = rng.random_range(0..=l - len);
        let u = rng.random_range(0..k);
        let mut v = rng.random_range(0..k - 1);
        if v >= u {
            v += 1;
        }
        Ok(CoeSwap { start, len, u, v })
    }

    pub fn apply(&self, values: &Array2<f32>) -> Array2<f32> {
        let mut out = values.clone();
        let (a, b) = (self.start, self.start + self.len);
        let row_u = values.slice(s![self.u, a..b]);
        let row_v = values.slice(s![self.v, a..b]);
        out.slice_mut(s![self.u, a..b]).assign(&row_v);
        out.slice_mut(s![self.v, a..b]).assign(&row_u);
        out
    }
}

/// COE synthetic anomaly with hard label 1.
pub fn coe_augment<R: Rng + ?Sized>(x: &SampleWindow, config: &AugmentConfig, rng: &mut R) -> Result<SampleWindow> {
    let swap = CoeSwap::draw(x.k(), x.l(), config, rng)?;
    SampleWindow::new(format!("{}+coe", x.id), swap.apply(&x.values), 1.0, COE_TAG)
}

pub fn sample_gamma<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(beta.sample(rng))
}

/// `γ·x_i + (1−γ)·x_j` with label `γ·y_i + (1−γ)·y_j`. Fails when the
/// mixed label is zero, which would not be an anomaly.
pub fn wmix_with_gamma(xi: &SampleWindow, xj: &SampleWindow, gamma: f64) -> Result<SampleWindow> {
    if xi.values.dim() != xj.values.dim() {
        return Err(Error::shape(
            format!("{:?}", xi.values.dim()),
            format!("{:?}", xj.values.dim()),
        ));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("gamma {gamma} outside [0, 1]")));
    }
    let label = (gamma * xi.label + (1.0 - gamma) * xj.label).min(1.0);
    if label <= 0.0 {
        return Err(Error::InvalidArgument(
            "mixed label is 0; window mixup needs an anomalous parent".into(),
        ));
    }
    let (g, h) = (gamma as f32, (1.0 - gamma) as f32);
    let values = Zip::from(&xi.values)
        .and(&xj.values)
        .map_collect(|&a, &b| g * a + h * b);
    SampleWindow::new(format!("{}x{}+wmix", xi.id, xj.id), values, label, WMIX_TAG)
}

/// WMix with `γ ~ Beta(α, α)`, redrawn while the mixed label would be 0.
pub fn wmix_augment<R: Rng + ?Sized>(
    xi: &SampleWindow,
    xj: &SampleWindow,
    config: &AugmentConfig,
    rng: &mut R,
) -> Result<SampleWindow> {
    if xi.label <= 0.0 && xj.label <= 0.0 {
        return Err(Error::InvalidArgument(
            "window mixup needs at least one anomalous parent".into(),
        ));
    }
    loop {
        let gamma = sample_gamma(config.alpha, rng)?;
        if gamma * xi.label + (1.0 - gamma) * xj.label > 0.0 {
            return wmix_with_gamma(xi, xj, gamma);
        }
    }
}

/// Produces one synthetic anomaly from the batch's normal windows and the
/// labelled anomaly pool. WMix mixes a normal window with a real anomaly,
/// or with a fresh COE anomaly when no real one is available.
pub fn synthesize<R: Rng + ?Sized>(
    normals: &[&SampleWindow],
    anomalies: &[SampleWindow],
    plan: &AugmentPlan,
    rng: &mut R,
) -> Result<SampleWindow> {
    if normals.is_empty() {
        return Err(Error::InvalidArgument("synthetic anomalies need normal windows".into()));
    }
    let use_coe = match (plan.coe, plan.wmix) {
        (false, false) => {
            return Err(Error::InvalidArgument("no augmentation enabled".into()));
        }
        (true, false) => true,
        (false, true) => false,
        (true, true) => rng.random_bool(0.5),
    };
    let base = normals[rng.random_range(0..normals.len())];
    if use_coe {
        return coe_augment(base, &plan.config, rng);
    }
    let partner = if !anomalies.is_empty() && (!plan.coe || rng.random_bool(0.5)) {
        anomalies[rng.random_range(0..anomalies.len())].clone()
    } else if plan.coe {
        let other = normals[rng.random_range(0..normals.len())];
        coe_augment(other, &plan.config, rng)?
    } else {
        return Err(Error::InvalidArgument(
            "window mixup without COE needs labelled anomalies".into(),
        ));
    };
    wmix_augment(base, &partner, &plan.config, rng)
}
