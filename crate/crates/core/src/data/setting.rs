use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dataset::{OpenSetDataset, Setting};
use super::window::SampleWindow;
use crate::{Error, Result};

/// Labelled anomalies per class that make each class about 0.1% of the
/// training normals.
pub fn default_eta_per_class(n_normals: usize) -> usize {
    (n_normals as f64 * 0.001).ceil().max(1.0) as usize
}

/// Subsamples the labelled anomaly pool for `setting`.
///
/// Each class's candidates are put in a seeded random order that does not
/// depend on `eta`, and the general setting hands out samples to classes
/// round-robin in sorted class order. A larger `eta` therefore always
/// contains the selection made for a smaller one.
pub fn build_setting(
    dataset: &OpenSetDataset,
    setting: &Setting,
    eta: usize,
    seed: u64,
) -> Result<OpenSetDataset> {
    if setting.is_unsupervised() {
        return dataset.with_anomalies(Vec::new(), BTreeSet::new(), Setting::Unsupervised);
    }
    if eta == 0 {
        return Err(Error::Setting("eta must be positive in open-set settings".into()));
    }

    let mut by_class: BTreeMap<&str, Vec<&SampleWindow>> = BTreeMap::new();
    for w in dataset.anomaly_pool() {
        by_class.entry(w.class_tag.as_str()).or_default().push(w);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for pool in by_class.values_mut() {
        pool.sort_by(|a, b| a.id.cmp(&b.id));
        pool.shuffle(&mut rng);
    }

    let (chosen, seen): (Vec<SampleWindow>, BTreeSet<String>) = match setting {
        Setting::Hard(class) => {
            if !dataset.all_classes().contains(class) {
                return Err(Error::Setting(format!("seen class {class:?} is not a known class")));
            }
            let pool = by_class.get(class.as_str()).map(Vec::as_slice).unwrap_or(&[]);
            if eta > pool.len() {
                return Err(Error::Setting(format!(
                    "eta = {eta} exceeds the {} available anomalies of class {class:?}",
                    pool.len()
                )));
            }
            let chosen = pool[..eta].iter().map(|w| (*w).clone()).collect();
            (chosen, [class.clone()].into())
        }
        Setting::General => {
            let available: usize = by_class.values().map(Vec::len).sum();
            if eta > available {
                return Err(Error::Setting(format!(
                    "eta = {eta} exceeds the {available} available anomalies"
                )));
            }
            let mut taken: BTreeMap<&str, usize> = by_class.keys().map(|c| (*c, 0)).collect();
            let mut remaining = eta;
            while remaining > 0 {
                for (class, pool) in &by_class {
                    let t = taken.get_mut(class).expect("same keys");
                    if remaining > 0 && *t < pool.len() {
                        *t += 1;
                        remaining -= 1;
                    }
                }
            }
            let chosen = by_class
                .iter()
                .flat_map(|(c, pool)| pool[..taken[c]].iter().map(|w| (*w).clone()))
                .collect();
            (chosen, dataset.all_classes().clone())
        }
        Setting::Unsupervised => unreachable!(),
    };
    dataset.with_anomalies(chosen, seen, setting.clone())
}
