//! Threshold-free detection metrics and the seen/unseen/normal breakdown.
//!
//! AUC is the Mann–Whitney statistic with ties counted one half. APR is
//! step-wise average precision over a ranking sorted by descending score,
//! with equal scores kept in their original input order.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::scoring::ScoredSample;
use crate::{Error, Result};

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Metric(format!("score {i} is not finite")));
    }
    Ok(())
}

/// Area under the ROC curve.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric("AUC needs both positive and negative samples".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));

    // Sum of (1-based, tie-averaged) ranks of the positives, doubled to stay integral.
    let mut twice_rank_sum = 0u128;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k]).count() as u128;
        twice_rank_sum += pos_in_group * (i as u128 + 1 + j as u128 + 1);
        i = j + 1;
    }
    let (p, n) = (n_pos as u128, n_neg as u128);
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * n) as f64)
}

/// Ranking used by [`apr`]: descending score, ties in input order.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| match scores[b].partial_cmp(&scores[a]).expect("finite scores") {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    order
}

/// Average precision.
pub fn apr(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|&&y| y).count();
    if n_pos == 0 {
        return Err(Error::Metric("APR needs at least one positive sample".into()));
    }
    let mut tp = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in ranking(scores).iter().enumerate() {
        if labels[i] {
            tp += 1;
            sum += tp as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / n_pos as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub auc: f64,
    pub apr: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl Metrics {
    pub fn compute(scores: &[f64], labels: &[bool]) -> Result<Self> {
        let n_pos = labels.iter().filter(|&&y| y).count();
        Ok(Metrics { auc: auc(scores, labels)?, apr: apr(scores, labels)?, n_pos, n_neg: labels.len() - n_pos })
    }

    /// `None` when one of the two classes is missing.
    fn maybe(scores: &[f64], labels: &[bool]) -> Result<Option<Self>> {
        let n_pos = labels.iter().filter(|&&y| y).count();
        if n_pos == 0 || n_pos == labels.len() {
            return Ok(None);
        }
        Self::compute(scores, labels).map(Some)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    pub apr: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    /// Each anomaly class against all normal samples.
    pub per_class: BTreeMap<String, Metrics>,
    pub seen: Option<Metrics>,
    pub unseen: Option<Metrics>,
    /// Labels and scores both complemented, normal samples as positives.
    pub normal: Option<Metrics>,
}

impl EvalReport {
    pub fn overall(&self) -> Metrics {
        Metrics { auc: self.auc, apr: self.apr, n_pos: self.n_pos, n_neg: self.n_neg }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<24} {:>8} {:>8} {:>7} {:>7}", "subset", "AUC", "APR", "n_pos", "n_neg");
        let mut row = |name: &str, m: Option<Metrics>| {
            let _ = match m {
                Some(m) => writeln!(out, "{:<24} {:>8.4} {:>8.4} {:>7} {:>7}", name, m.auc, m.apr, m.n_pos, m.n_neg),
                None => writeln!(out, "{:<24} {:>8} {:>8} {:>7} {:>7}", name, "-", "-", "-", "-"),
            };
        };
        row("all", Some(self.overall()));
        row("seen", self.seen);
        row("unseen", self.unseen);
        row("normal", self.normal);
        for (class, m) in &self.per_class {
            row(&format!("class:{class}"), Some(*m));
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Metric(e.to_string()))?;
        let p = dir.join("report.json");
        std::fs::write(&p, json).map_err(|e| Error::io(&p, e))?;
        let p = dir.join("report.txt");
        std::fs::write(&p, self.to_text()).map_err(|e| Error::io(&p, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Metric(format!("{}: {e}", path.display())))
    }
}

/// Full report over scored test samples. Soft labels count as anomalous.
/// With `seen_classes` absent every anomaly class is treated as unseen.
pub fn evaluate(samples: &[ScoredSample], seen_classes: Option<&BTreeSet<String>>) -> Result<EvalReport> {
    let scores: Vec<f64> = samples.iter().map(|s| s.s).collect();
    let labels: Vec<bool> = samples.iter().map(|s| s.y > 0.0).collect();
    let all = Metrics::compute(&scores, &labels)?;

    let subset = |keep: &dyn Fn(&ScoredSample) -> bool| -> Result<Option<Metrics>> {
        let (s, y): (Vec<f64>, Vec<bool>) =
            samples.iter().filter(|x| x.y == 0.0 || keep(x)).map(|x| (x.s, x.y > 0.0)).unzip();
        Metrics::maybe(&s, &y)
    };

    let classes: BTreeSet<&str> =
        samples.iter().filter(|s| s.y > 0.0).map(|s| s.class_tag.as_str()).collect();
    let mut per_class = BTreeMap::new();
    for class in classes {
        if let Some(m) = subset(&|x| x.class_tag == class)? {
            per_class.insert(class.to_string(), m);
        }
    }
    let is_seen = |x: &ScoredSample| seen_classes.is_some_and(|s| s.contains(&x.class_tag));
    let seen = subset(&|x| is_seen(x))?;
    let unseen = subset(&|x| !is_seen(x))?;

    let comp_s: Vec<f64> = scores.iter().map(|s| 1.0 - s).collect();
    let comp_y: Vec<bool> = labels.iter().map(|y| !y).collect();
    let normal = Metrics::maybe(&comp_s, &comp_y)?;

    Ok(EvalReport {
        auc: all.auc,
        apr: all.apr,
        n_pos: all.n_pos,
        n_neg: all.n_neg,
        per_class,
        seen,
        unseen,
        normal,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::NORMAL_TAG;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pairwise_auc(s: &[f64], y: &[bool]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if y[i] && !y[j] {
                    pairs += 1.0;
                    wins += if s[i] > s[j] {
                        1.0
                    } else if s[i] == s[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        wins / pairs
    }

    fn rank_walk_apr(s: &[f64], y: &[bool]) -> f64 {
        let before = |j: usize, i: usize| s[j] > s[i] || (s[j] == s[i] && j < i);
        let mut total = 0.0;
        let mut n_pos = 0.0;
        for i in 0..s.len() {
            if !y[i] {
                continue;
            }
            n_pos += 1.0;
            let rank = 1 + (0..s.len()).filter(|&j| before(j, i)).count();
            let tp = 1 + (0..s.len()).filter(|&j| y[j] && before(j, i)).count();
            total += tp as f64 / rank as f64;
        }
        total / n_pos
    }

    fn random_case(seed: u64, n: usize, coarse: bool) -> (Vec<f64>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        loop {
            let s: Vec<f64> = (0..n)
                .map(|_| if coarse { rng.random_range(0..5) as f64 / 4.0 } else { rng.random::<f64>() })
                .collect();
            let y: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
            if y.iter().any(|&v| v) && y.iter().any(|&v| !v) {
                return (s, y);
            }
        }
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[1.0, 2.0, 3.0, 4.0], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        assert!(auc(&[1.0, 2.0], &[true, true]).is_err());
        assert!(auc(&[1.0, 2.0], &[false, false]).is_err());
        assert!(auc(&[1.0], &[true, false]).is_err());
        assert!(auc(&[f64::NAN, 1.0], &[true, false]).is_err());
    }

    #[test]
    fn auc_matches_pairwise_oracle() {
        for seed in 0..40 {
            let (s, y) = random_case(seed, 50, seed % 2 == 0);
            assert!((auc(&s, &y).unwrap() - pairwise_auc(&s, &y)).abs() < 1e-12, "seed {seed}");
        }
    }

    #[test]
    fn apr_examples() {
        assert_eq!(apr(&[4.0, 3.0, 2.0, 1.0], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(apr(&[4.0, 3.0, 2.0, 1.0], &[false, false, false, true]).unwrap(), 0.25);
        assert!(apr(&[1.0, 2.0], &[false, false]).is_err());
        // ties keep input order
        assert_eq!(apr(&[1.0, 1.0], &[true, false]).unwrap(), 1.0);
        assert_eq!(apr(&[1.0, 1.0], &[false, true]).unwrap(), 0.5);
        // all-positive input is defined
        assert_eq!(apr(&[0.1, 0.2], &[true, true]).unwrap(), 1.0);
    }

    #[test]
    fn apr_matches_rank_walk_oracle() {
        for seed in 0..40 {
            let (s, y) = random_case(100 + seed, 50, seed % 2 == 0);
            assert!((apr(&s, &y).unwrap() - rank_walk_apr(&s, &y)).abs() < 1e-12, "seed {seed}");
        }
    }

    #[test]
    fn complement_protocol_preserves_auc() {
        for seed in 0..20 {
            let (s, y) = random_case(200 + seed, 60, false);
            let cs: Vec<f64> = s.iter().map(|v| 1.0 - v).collect();
            let cy: Vec<bool> = y.iter().map(|v| !v).collect();
            assert!((auc(&s, &y).unwrap() - auc(&cs, &cy).unwrap()).abs() < 1e-12);
        }
    }

    fn sample(id: usize, y: f64, class: &str, s: f64) -> ScoredSample {
        ScoredSample {
            sample_id: format!("s{id}"),
            class_tag: class.into(),
            y,
            s_rec: 0.0,
            s_dev: 0.0,
            s_con: 0.0,
            s,
        }
    }

    #[test]
    fn breakdown_partitions() {
        let rows = vec![
            sample(0, 0.0, NORMAL_TAG, 0.1),
            sample(1, 0.0, NORMAL_TAG, 0.4),
            sample(2, 0.0, NORMAL_TAG, 0.2),
            sample(3, 1.0, "spike", 0.9),
            sample(4, 0.5, "spike", 0.3),
            sample(5, 1.0, "drift", 0.15),
        ];
        let seen: BTreeSet<String> = ["spike".to_string()].into();
        let r = evaluate(&rows, Some(&seen)).unwrap();
        assert_eq!((r.n_pos, r.n_neg), (3, 3));
        let seen_m = r.seen.unwrap();
        assert_eq!((seen_m.n_pos, seen_m.n_neg), (2, 3));
        let unseen_m = r.unseen.unwrap();
        assert_eq!((unseen_m.n_pos, unseen_m.n_neg), (1, 3));
        // drift at 0.15 beats one normal of three
        assert!((unseen_m.auc - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.per_class["drift"], unseen_m);
        assert_eq!(r.per_class["spike"], seen_m);
        let n = r.normal.unwrap();
        assert_eq!((n.n_pos, n.n_neg), (3, 3));
        assert!((n.auc - r.auc).abs() < 1e-12);
        for m in [seen_m, unseen_m, n, r.overall()] {
            assert!((0.0..=1.0).contains(&m.auc) && (0.0..=1.0).contains(&m.apr));
        }

        let all_seen: BTreeSet<String> = ["spike".to_string(), "drift".to_string()].into();
        let r = evaluate(&rows, Some(&all_seen)).unwrap();
        assert!(r.unseen.is_none());
        let r = evaluate(&rows, None).unwrap();
        assert!(r.seen.is_none());
        assert_eq!(r.unseen.unwrap().n_pos, 3);
        assert!(r.to_text().contains("seen"));
    }

    #[test]
    fn report_round_trip() {
        let rows: Vec<ScoredSample> =
            (0..10).map(|i| sample(i, if i % 3 == 0 { 1.0 } else { 0.0 }, if i % 3 == 0 { "a" } else { NORMAL_TAG }, i as f64)).collect();
        let r = evaluate(&rows, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        r.write(dir.path()).unwrap();
        assert_eq!(EvalReport::read_json(&dir.path().join("report.json")).unwrap(), r);
        assert!(dir.path().join("report.txt").exists());
    }

    fn case() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (2usize..=50)
            .prop_flat_map(|n| (prop::collection::vec(-5.0f64..5.0, n), prop::collection::vec(any::<bool>(), n)))
            .prop_filter("both classes", |(_, y)| y.iter().any(|&v| v) && y.iter().any(|&v| !v))
    }

    proptest! {
        #[test]
        fn metrics_match_oracles((s, y) in case(), coarse in any::<bool>()) {
            let s: Vec<f64> = if coarse { s.iter().map(|v| v.round()).collect() } else { s };
            prop_assert!((auc(&s, &y).unwrap() - pairwise_auc(&s, &y)).abs() < 1e-12);
            prop_assert!((apr(&s, &y).unwrap() - rank_walk_apr(&s, &y)).abs() < 1e-12);
        }

        #[test]
        fn monotone_invariance((s, y) in case(), a in 0.1f64..10.0, b in -3.0f64..3.0) {
            let base_auc = auc(&s, &y).unwrap();
            let base_apr = apr(&s, &y).unwrap();
            let exp: Vec<f64> = s.iter().map(|v| v.exp()).collect();
            prop_assert!((auc(&exp, &y).unwrap() - base_auc).abs() < 1e-12);
            prop_assert!((apr(&exp, &y).unwrap() - base_apr).abs() < 1e-12);
            // coarse grid so the affine map stays injective in floating point
            let grid: Vec<f64> = s.iter().map(|v| (v * 8.0).round() / 8.0).collect();
            let aff: Vec<f64> = grid.iter().map(|v| a * v + b).collect();
            prop_assert!((auc(&aff, &y).unwrap() - auc(&grid, &y).unwrap()).abs() < 1e-12);
            prop_assert!((apr(&aff, &y).unwrap() - apr(&grid, &y).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn complement_symmetry((s, y) in case()) {
            let grid: Vec<f64> = s.iter().map(|v| (v * 16.0).round() / 16.0).collect();
            let cs: Vec<f64> = grid.iter().map(|v| 1.0 - v).collect();
            let cy: Vec<bool> = y.iter().map(|v| !v).collect();
            prop_assert_eq!(auc(&grid, &y).unwrap(), auc(&cs, &cy).unwrap());
        }
    }
}
