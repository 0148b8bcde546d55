use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::window::SampleWindow;
use crate::{Error, Result};

/// Experimental setting: unsupervised, general open-set (labelled anomalies
/// from every class) or hard open-set (labelled anomalies from one class).
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Setting {
    Unsupervised,
    General,
    Hard(String),
}

impl Setting {
    pub fn is_unsupervised(&self) -> bool {
        matches!(self, Setting::Unsupervised)
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Setting::Unsupervised => f.write_str("u"),
            Setting::General => f.write_str("og"),
            Setting::Hard(class) => write!(f, "oh:{class}"),
        }
    }
}

impl FromStr for Setting {
    type Err = Error;

    /// Accepts `u`, `og`, `oh:<class>`.
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim();
        match lower.to_ascii_lowercase().as_str() {
            "u" => return Ok(Setting::Unsupervised),
            "og" => return Ok(Setting::General),
            _ => {}
        }
        match lower.split_once(':') {
            Some((head, class)) if head.eq_ignore_ascii_case("oh") && !class.is_empty() => {
                Ok(Setting::Hard(class.to_string()))
            }
            _ => Err(Error::Setting(format!(
                "unknown setting {s:?} (expected u, og or oh:<class>)"
            ))),
        }
    }
}

impl TryFrom<String> for Setting {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Setting> for String {
    fn from(s: Setting) -> String {
        s.to_string()
    }
}

/// Per-variable mean and standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Fits statistics over every timestamp of every window.
    pub fn fit<'a>(windows: impl IntoIterator<Item = &'a ndarray::Array2<f32>>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for w in windows {
            if sum.is_empty() {
                sum = vec![0.0; w.nrows()];
                sq = vec![0.0; w.nrows()];
            }
            if w.nrows() != sum.len() {
                return Err(Error::shape(format!("{} rows", sum.len()), w.nrows()));
            }
            for (k, row) in w.rows().into_iter().enumerate() {
                for &v in row {
                    sum[k] += v as f64;
                    sq[k] += (v as f64) * (v as f64);
                }
            }
            count += w.ncols();
        }
        if count == 0 {
            return Err(Error::InvalidArgument("cannot fit statistics on no data".into()));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let var = (s / n - m * m).max(0.0);
                if var > 1e-24 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(ChannelStats { mean, std })
    }

    pub fn apply(&self, x: &mut ndarray::Array2<f32>) {
        for (k, mut row) in x.rows_mut().into_iter().enumerate() {
            let (m, s) = (self.mean[k], self.std[k]);
            row.mapv_inplace(|v| ((v as f64 - m) / s) as f32);
        }
    }
}

/// Normal pool, labelled anomaly pool and test pool, plus the setting that
/// produced them. Immutable once constructed.
#[derive(Clone, Debug, PartialEq)]
pub struct OpenSetDataset {
    k: usize,
    l: usize,
    normal_pool: Vec<SampleWindow>,
    anomaly_pool: Vec<SampleWindow>,
    test_pool: Vec<SampleWindow>,
    seen_classes: BTreeSet<String>,
    all_classes: BTreeSet<String>,
    setting: Setting,
}

impl OpenSetDataset {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        k: usize,
        l: usize,
        normal_pool: Vec<SampleWindow>,
        anomaly_pool: Vec<SampleWindow>,
        test_pool: Vec<SampleWindow>,
        seen_classes: BTreeSet<String>,
        all_classes: BTreeSet<String>,
        setting: Setting,
    ) -> Result<Self> {
        let ds = OpenSetDataset {
            k,
            l,
            normal_pool,
            anomaly_pool,
            test_pool,
            seen_classes,
            all_classes,
            setting,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        if self.k == 0 || self.l == 0 {
            return Err(Error::InvalidArgument("K and L must be positive".into()));
        }
        for w in self.normal_pool.iter().chain(&self.anomaly_pool).chain(&self.test_pool) {
            w.validate()?;
            w.check_shape(self.k, self.l)?;
            if !w.is_normal() && !self.all_classes.contains(&w.class_tag) {
                return Err(Error::Sample {
                    sample: w.id.clone(),
                    msg: format!("unknown class tag {:?}", w.class_tag),
                });
            }
        }
        if let Some(w) = self.normal_pool.iter().find(|w| !w.is_normal()) {
            return Err(Error::Sample {
                sample: w.id.clone(),
                msg: "anomalous window in the normal pool".into(),
            });
        }
        if let Some(w) = self.anomaly_pool.iter().find(|w| w.is_normal()) {
            return Err(Error::Sample {
                sample: w.id.clone(),
                msg: "normal window in the anomaly pool".into(),
            });
        }
        let (a, n) = (self.anomaly_pool.len(), self.normal_pool.len());
        if a as f64 > 0.05 * n as f64 {
            return Err(Error::Setting(format!(
                "labelled anomalies must be scarce: A = {a} exceeds 5% of N = {n}"
            )));
        }
        if let Some(w) = self
            .anomaly_pool
            .iter()
            .find(|w| !self.seen_classes.contains(&w.class_tag))
        {
            return Err(Error::Setting(format!(
                "anomaly {} has class {:?} outside the seen classes",
                w.id, w.class_tag
            )));
        }
        if !self.seen_classes.is_subset(&self.all_classes) {
            return Err(Error::Setting("seen classes must be a subset of all classes".into()));
        }
        match &self.setting {
            Setting::Hard(class) => {
                if self.seen_classes.len() != 1 || !self.seen_classes.contains(class) {
                    return Err(Error::Setting(format!(
                        "hard setting requires exactly the seen class {class:?}"
                    )));
                }
            }
            Setting::Unsupervised => {
                if !self.anomaly_pool.is_empty() {
                    return Err(Error::Setting(
                        "unsupervised setting keeps no labelled anomalies".into(),
                    ));
                }
            }
            Setting::General => {}
        }
        let train_ids: HashSet<&str> = self
            .normal_pool
            .iter()
            .chain(&self.anomaly_pool)
            .map(|w| w.id.as_str())
            .collect();
        if let Some(w) = self.test_pool.iter().find(|w| train_ids.contains(w.id.as_str())) {
            return Err(Error::Setting(format!(
                "test window {} also appears in training data",
                w.id
            )));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn normal_pool(&self) -> &[SampleWindow] {
        &self.normal_pool
    }

    pub fn anomaly_pool(&self) -> &[SampleWindow] {
        &self.anomaly_pool
    }

    pub fn test_pool(&self) -> &[SampleWindow] {
        &self.test_pool
    }

    pub fn seen_classes(&self) -> &BTreeSet<String> {
        &self.seen_classes
    }

    pub fn all_classes(&self) -> &BTreeSet<String> {
        &self.all_classes
    }

    pub fn setting(&self) -> &Setting {
        &self.setting
    }

    /// Replaces the training anomaly pool and setting, re-validating.
    pub(crate) fn with_anomalies(
        &self,
        anomaly_pool: Vec<SampleWindow>,
        seen_classes: BTreeSet<String>,
        setting: Setting,
    ) -> Result<Self> {
        OpenSetDataset::new(
            self.k,
            self.l,
            self.normal_pool.clone(),
            anomaly_pool,
            self.test_pool.clone(),
            seen_classes,
            self.all_classes.clone(),
            setting,
        )
    }
}
