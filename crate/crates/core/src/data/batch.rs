use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dataset::OpenSetDataset;
use super::window::SampleWindow;
use crate::augment::{synthesize, AugmentPlan};
use crate::{Error, Result};

/// Batch composition: `batch_size − anomaly_quota − synth_quota` normal
/// windows, `anomaly_quota` labelled anomalies drawn with replacement and
/// `synth_quota` synthetic anomalies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchQuotas {
    pub batch_size: usize,
    pub anomaly_quota: usize,
    pub synth_quota: usize,
}

impl BatchQuotas {
    /// 64-window batches with `min(4, A)` real and 4 synthetic anomalies.
    pub fn default_for(dataset: &OpenSetDataset) -> Self {
        BatchQuotas {
            batch_size: 64,
            anomaly_quota: dataset.anomaly_pool().len().min(4),
            synth_quota: 4,
        }
    }

    pub fn normals_per_batch(&self) -> usize {
        self.batch_size - self.anomaly_quota - self.synth_quota
    }

    pub fn validate(&self, anomalies_available: usize) -> Result<()> {
        if self.anomaly_quota + self.synth_quota >= self.batch_size {
            return Err(Error::InvalidArgument(format!(
                "anomaly quota {} + synthetic quota {} must be below batch size {}",
                self.anomaly_quota, self.synth_quota, self.batch_size
            )));
        }
        if self.anomaly_quota > 0 && anomalies_available == 0 {
            return Err(Error::InvalidArgument(
                "anomaly quota is positive but the anomaly pool is empty".into(),
            ));
        }
        Ok(())
    }
}

/// Completes a batch around the given normal windows and shuffles it.
pub fn assemble_batch<R: Rng + ?Sized>(
    normals: &[&SampleWindow],
    anomalies: &[SampleWindow],
    anomaly_quota: usize,
    synth_quota: usize,
    plan: &AugmentPlan,
    rng: &mut R,
) -> Result<Vec<SampleWindow>> {
    if anomaly_quota > 0 && anomalies.is_empty() {
        return Err(Error::InvalidArgument(
            "anomaly quota is positive but the anomaly pool is empty".into(),
        ));
    }
    let mut batch: Vec<SampleWindow> = normals.iter().map(|w| (*w).clone()).collect();
    for _ in 0..anomaly_quota {
        batch.push(anomalies[rng.random_range(0..anomalies.len())].clone());
    }
    for _ in 0..synth_quota {
        batch.push(synthesize(normals, anomalies, plan, rng)?);
    }
    batch.shuffle(rng);
    Ok(batch)
}

/// Draws a mini-batch: normals without replacement from the normal pool,
/// labelled anomalies with replacement, synthetic anomalies from `plan`.
pub fn make_minibatch<R: Rng + ?Sized>(
    dataset: &OpenSetDataset,
    quotas: BatchQuotas,
    plan: &AugmentPlan,
    rng: &mut R,
) -> Result<Vec<SampleWindow>> {
    quotas.validate(dataset.anomaly_pool().len())?;
    let pool = dataset.normal_pool();
    let need = quotas.normals_per_batch();
    if need > pool.len() {
        return Err(Error::InvalidArgument(format!(
            "batch needs {need} distinct normal windows, pool has {}",
            pool.len()
        )));
    }
    let normals: Vec<&SampleWindow> = index::sample(rng, pool.len(), need)
        .into_iter()
        .map(|i| &pool[i])
        .collect();
    assemble_batch(
        &normals,
        dataset.anomaly_pool(),
        quotas.anomaly_quota,
        quotas.synth_quota,
        plan,
        rng,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Setting, COE_TAG, NORMAL_TAG, WMIX_TAG};
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn dataset(n: usize, a: usize) -> OpenSetDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut w = |id: String, label, tag: &str| {
            let x = Array2::from_shape_fn((3, 8), |_| rng.random_range(-1.0..1.0f32));
            SampleWindow::new(id, x, label, tag).unwrap()
        };
        let normals = (0..n).map(|i| w(format!("n{i}"), 0.0, NORMAL_TAG)).collect();
        let anomalies = (0..a).map(|i| w(format!("a{i}"), 1.0, "A")).collect();
        let classes: BTreeSet<String> = ["A".to_string()].into();
        let (seen, setting) = if a == 0 {
            (BTreeSet::new(), Setting::Unsupervised)
        } else {
            (classes.clone(), Setting::General)
        };
        OpenSetDataset::new(3, 8, normals, anomalies, vec![], seen, classes, setting).unwrap()
    }

    #[test]
    fn composition_by_class_tag() {
        let ds = dataset(200, 5);
        let q = BatchQuotas { batch_size: 64, anomaly_quota: 4, synth_quota: 4 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = make_minibatch(&ds, q, &AugmentPlan::default(), &mut rng).unwrap();
        assert_eq!(b.len(), 64);
        let count = |f: &dyn Fn(&SampleWindow) -> bool| b.iter().filter(|w| f(w)).count();
        assert_eq!(count(&|w| w.class_tag == NORMAL_TAG), 56);
        assert_eq!(count(&|w| w.class_tag == "A"), 4);
        assert_eq!(count(&|w| w.class_tag == COE_TAG || w.class_tag == WMIX_TAG), 4);
        let normal_ids: BTreeSet<&str> =
            b.iter().filter(|w| w.is_normal()).map(|w| w.id.as_str()).collect();
        assert_eq!(normal_ids.len(), 56, "normals drawn without replacement");
    }

    #[test]
    fn all_normal_batch() {
        let ds = dataset(100, 0);
        let q = BatchQuotas { batch_size: 64, anomaly_quota: 0, synth_quota: 0 };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = make_minibatch(&ds, q, &AugmentPlan::default(), &mut rng).unwrap();
        assert_eq!(b.len(), 64);
        assert!(b.iter().all(SampleWindow::is_normal));
    }

    #[test]
    fn quota_errors() {
        let ds = dataset(100, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let plan = AugmentPlan::default();
        let q = BatchQuotas { batch_size: 8, anomaly_quota: 4, synth_quota: 4 };
        assert!(make_minibatch(&ds, q, &plan, &mut rng).is_err());
        let q = BatchQuotas { batch_size: 200, anomaly_quota: 0, synth_quota: 0 };
        assert!(make_minibatch(&ds, q, &plan, &mut rng).is_err());
        let ds = dataset(100, 0);
        let q = BatchQuotas { batch_size: 16, anomaly_quota: 1, synth_quota: 0 };
        assert!(make_minibatch(&ds, q, &plan, &mut rng).is_err());
    }

    #[test]
    fn default_quotas() {
        assert_eq!(BatchQuotas::default_for(&dataset(100, 2)).anomaly_quota, 2);
        let q = BatchQuotas::default_for(&dataset(200, 9));
        assert_eq!((q.batch_size, q.anomaly_quota, q.synth_quota), (64, 4, 4));
    }
}
