//! Text manifest plus one little-endian `f32` file per window (row-major
//! `K×L`).
//!
//! ```toml
//! format_version = 1
//! k = 8
//! l = 128
//! setting = "og"
//! all_classes = ["decorrelate", "scale", "spike"]
//!
//! [[sample]]
//! split = "normal"
//! id = "train-n-00000"
//! file = "normal/train-n-00000.f32"
//! label = 0.0
//! class_tag = "normal"
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::dataset::{ChannelStats, OpenSetDataset, Setting};
use super::window::SampleWindow;
use crate::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Normal,
    Anomaly,
    Test,
}

impl Split {
    fn dir(self) -> &'static str {
        match self {
            Split::Normal => "normal",
            Split::Anomaly => "anomaly",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestSample {
    pub split: Split,
    pub id: String,
    pub file: String,
    pub label: f64,
    pub class_tag: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub k: usize,
    pub l: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling_rate_hz: Option<f64>,
    pub setting: Setting,
    pub all_classes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seen_classes: Option<Vec<String>>,
    /// When false, windows are z-scored per variable with normal-pool
    /// statistics at load time.
    #[serde(default = "default_true")]
    pub zscored: bool,
    /// Directory sample files are relative to; defaults to the manifest's
    /// own directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_root: Option<String>,
    #[serde(rename = "sample", default)]
    pub samples: Vec<ManifestSample>,
}

fn default_true() -> bool {
    true
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: DatasetManifest = toml::from_str(&text).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        if manifest.format_version != MANIFEST_VERSION {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                msg: format!("unsupported format_version {}", manifest.format_version),
            });
        }
        Ok(manifest)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidArgument(e.to_string()))
    }
}

fn read_matrix(path: &Path, id: &str, k: usize, l: usize) -> Result<Array2<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::Sample {
        sample: id.to_string(),
        msg: format!("cannot read {}: {e}", path.display()),
    })?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Sample {
            sample: id.to_string(),
            msg: format!("{} is not a whole number of f32 values", path.display()),
        });
    }
    let n = bytes.len() / 4;
    if n != k * l {
        let rows = if n % l == 0 {
            format!(" ({} rows of length {l})", n / l)
        } else {
            String::new()
        };
        return Err(Error::Sample {
            sample: id.to_string(),
            msg: format!("shape mismatch: expected {k}x{l} = {} values, file holds {n}{rows}", k * l),
        });
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Array2::from_shape_vec((k, l), values).expect("length checked"))
}

fn write_matrix(path: &Path, x: &Array2<f32>) -> Result<()> {
    let mut bytes = Vec::with_capacity(x.len() * 4);
    for v in x.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads and validates a dataset from a manifest file.
pub fn load_dataset(manifest_path: &Path) -> Result<OpenSetDataset> {
    let manifest = DatasetManifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let root = match &manifest.data_root {
        Some(r) => base.join(r),
        None => base.to_path_buf(),
    };
    let bad = |msg: String| Error::Manifest {
        path: manifest_path.to_path_buf(),
        msg,
    };
    if manifest.k == 0 || manifest.l == 0 {
        return Err(bad("k and l must be positive".into()));
    }
    let all_classes: BTreeSet<String> = manifest.all_classes.iter().cloned().collect();

    let mut normal = Vec::new();
    let mut anomaly = Vec::new();
    let mut test = Vec::new();
    for s in &manifest.samples {
        if !(0.0..=1.0).contains(&s.label) {
            return Err(Error::Sample {
                sample: s.id.clone(),
                msg: format!("label {} outside [0, 1]", s.label),
            });
        }
        if s.class_tag != super::NORMAL_TAG && !all_classes.contains(&s.class_tag) {
            return Err(Error::Sample {
                sample: s.id.clone(),
                msg: format!("unknown class tag {:?}", s.class_tag),
            });
        }
        let values = read_matrix(&root.join(&s.file), &s.id, manifest.k, manifest.l)?;
        let w = SampleWindow::new(s.id.clone(), values, s.label, s.class_tag.clone())?;
        match s.split {
            Split::Normal => normal.push(w),
            Split::Anomaly => anomaly.push(w),
            Split::Test => test.push(w),
        }
    }

    if !manifest.zscored {
        let stats = ChannelStats::fit(normal.iter().map(|w| &w.values))?;
        for w in normal.iter_mut().chain(anomaly.iter_mut()).chain(test.iter_mut()) {
            stats.apply(&mut w.values);
        }
    }

    let seen: BTreeSet<String> = match (&manifest.seen_classes, &manifest.setting) {
        (Some(seen), _) => seen.iter().cloned().collect(),
        (None, Setting::Unsupervised) => BTreeSet::new(),
        (None, Setting::Hard(c)) => [c.clone()].into(),
        (None, Setting::General) => all_classes.clone(),
    };
    OpenSetDataset::new(
        manifest.k,
        manifest.l,
        normal,
        anomaly,
        test,
        seen,
        all_classes,
        manifest.setting.clone(),
    )
    .map_err(|e| bad(e.to_string()))
}

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Writes `manifest.toml` and the per-window binaries under `dir`.
/// Returns the manifest path.
pub fn write_dataset(
    dataset: &OpenSetDataset,
    dir: &Path,
    sampling_rate_hz: Option<f64>,
) -> Result<PathBuf> {
    let mut samples = Vec::new();
    let splits = [
        (Split::Normal, dataset.normal_pool()),
        (Split::Anomaly, dataset.anomaly_pool()),
        (Split::Test, dataset.test_pool()),
    ];
    for (split, pool) in splits {
        let sub = dir.join(split.dir());
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        for w in pool {
            let file = format!("{}/{}.f32", split.dir(), file_stem(&w.id));
            write_matrix(&dir.join(&file), &w.values)?;
            samples.push(ManifestSample {
                split,
                id: w.id.clone(),
                file,
                label: w.label,
                class_tag: w.class_tag.clone(),
            });
        }
    }
    let manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        k: dataset.k(),
        l: dataset.l(),
        sampling_rate_hz,
        setting: dataset.setting().clone(),
        all_classes: dataset.all_classes().iter().cloned().collect(),
        seen_classes: Some(dataset.seen_classes().iter().cloned().collect()),
        zscored: true,
        data_root: None,
        samples,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_toml()?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
