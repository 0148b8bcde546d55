//! Head losses, evaluated in double precision, with analytic gradients.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_MARGIN: f64 = 5.0;
pub const DEFAULT_TEMPERATURE: f64 = 0.07;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rec: f64,
    pub dev: f64,
    pub con: f64,
    pub total: f64,
}

pub fn total_loss(rec: f64, dev: f64, con: f64) -> Result<LossBreakdown> {
    for (head, v) in [("rec", rec), ("dev", dev), ("con", con)] {
        if !v.is_finite() {
            return Err(Error::NonFinite { head });
        }
    }
    Ok(LossBreakdown { rec, dev, con, total: rec + dev + con })
}

/// Per-sample reduction of the squared reconstruction error.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Reduction {
    /// Mean over the K×L elements.
    #[default]
    Mean,
    /// Plain squared Frobenius norm.
    Sum,
}

fn check_pairs(x_hat: &[ArrayView2<f64>], x: &[ArrayView2<f64>], labels: &[f64]) -> Result<()> {
    if x_hat.len() != x.len() || x.len() != labels.len() {
        return Err(Error::shape(
            format!("{} reconstructions and labels", x.len()),
            format!("{} reconstructions, {} labels", x_hat.len(), labels.len()),
        ));
    }
    for (a, b) in x_hat.iter().zip(x) {
        if a.dim() != b.dim() {
            return Err(Error::shape(format!("{:?}", b.dim()), format!("{:?}", a.dim())));
        }
    }
    Ok(())
}

/// Squared reconstruction error averaged over the normal (y = 0) samples;
/// 0 when there are none.
pub fn reconstruction_loss(x_hat: &[ArrayView2<f64>], x: &[ArrayView2<f64>], labels: &[f64]) -> Result<f64> {
    reconstruction_loss_with(x_hat, x, labels, Reduction::Mean)
}

pub fn reconstruction_loss_with(
    x_hat: &[ArrayView2<f64>],
    x: &[ArrayView2<f64>],
    labels: &[f64],
    reduction: Reduction,
) -> Result<f64> {
    Ok(reconstruction_grad(x_hat, x, labels, reduction)?.0)
}

/// Loss and its gradient with respect to every `x_hat`. Anomalous samples
/// receive an all-zero gradient.
pub fn reconstruction_grad(
    x_hat: &[ArrayView2<f64>],
    x: &[ArrayView2<f64>],
    labels: &[f64],
    reduction: Reduction,
) -> Result<(f64, Vec<Array2<f64>>)> {
    check_pairs(x_hat, x, labels)?;
    let normals = labels.iter().filter(|&&y| y == 0.0).count();
    let mut grads: Vec<Array2<f64>> = x.iter().map(|v| Array2::zeros(v.dim())).collect();
    if normals == 0 {
        return Ok((0.0, grads));
    }
    let mut loss = 0.0;
    for i in 0..x.len() {
        if labels[i] != 0.0 {
            continue;
        }
        let per = match reduction {
            Reduction::Mean => 1.0 / x[i].len() as f64,
            Reduction::Sum => 1.0,
        } / normals as f64;
        let diff = &x_hat[i] - &x[i];
        loss += diff.mapv(|d| d * d).sum() * per;
        grads[i] = diff * (2.0 * per);
    }
    Ok((loss, grads))
}

/// Mean-reduced reconstruction loss when only some rows of each normal
/// sample are reconstructed. Row `r` of `pred`/`target` belongs to sample
/// `owners[r]`; each sample contributes the mean over its own rows, and the
/// result is averaged over the samples that own at least one row. With all
/// K rows present this equals [`reconstruction_loss`].
pub fn row_reconstruction_grad(
    pred: ArrayView2<f64>,
    target: ArrayView2<f64>,
    owners: &[usize],
) -> Result<(f64, Array2<f64>)> {
    if pred.dim() != target.dim() || owners.len() != pred.nrows() {
        return Err(Error::shape(
            format!("{:?} with {} owners", target.dim(), target.nrows()),
            format!("{:?} with {} owners", pred.dim(), owners.len()),
        ));
    }
    let n_owner = owners.iter().max().map_or(0, |m| m + 1);
    let mut rows_of = vec![0usize; n_owner];
    for &o in owners {
        rows_of[o] += 1;
    }
    let active = rows_of.iter().filter(|&&c| c > 0).count();
    let mut grad = Array2::zeros(pred.dim());
    if active == 0 {
        return Ok((0.0, grad));
    }
    let l = pred.ncols() as f64;
    let mut loss = 0.0;
    for (r, &o) in owners.iter().enumerate() {
        let w = 1.0 / (rows_of[o] as f64 * l * active as f64);
        for t in 0..pred.ncols() {
            let d = pred[[r, t]] - target[[r, t]];
            loss += w * d * d;
            grad[[r, t]] = 2.0 * w * d;
        }
    }
    Ok((loss, grad))
}

fn check_dev(dev: &[f64], labels: &[f64], c: f64) -> Result<()> {
    if dev.len() != labels.len() {
        return Err(Error::shape(format!("{} scores", labels.len()), format!("{} scores", dev.len())));
    }
    if !(c > 0.0) {
        return Err(Error::InvalidArgument(format!("deviation margin must be positive, got {c}")));
    }
    Ok(())
}

/// mean over samples of (1−y)·|dev| + y·max(0, c − dev).
pub fn deviation_loss(dev: &[f64], labels: &[f64], c: f64) -> Result<f64> {
    check_dev(dev, labels, c)?;
    if dev.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = dev.iter().zip(labels).map(|(&d, &y)| (1.0 - y) * d.abs() + y * (c - d).max(0.0)).sum();
    Ok(sum / dev.len() as f64)
}

/// Loss and subgradient (0 at the kinks).
pub fn deviation_grad(dev: &[f64], labels: &[f64], c: f64) -> Result<(f64, Vec<f64>)> {
    let loss = deviation_loss(dev, labels, c)?;
    let n = dev.len().max(1) as f64;
    let grad = dev
        .iter()
        .zip(labels)
        .map(|(&d, &y)| {
            let sign = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            let hinge = if c - d > 0.0 { -1.0 } else { 0.0 };
            ((1.0 - y) * sign + y * hinge) / n
        })
        .collect();
    Ok((loss, grad))
}

/// Unit-norm projections (one per row) with labels and temperature δ.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveBatch {
    pub embeddings: Array2<f64>,
    pub labels: Vec<f64>,
    pub temperature: f64,
}

const UNIT_TOLERANCE: f64 = 1e-4;

impl ContrastiveBatch {
    pub fn new(embeddings: Array2<f64>, labels: Vec<f64>, temperature: f64) -> Result<Self> {
        if embeddings.nrows() != labels.len() {
            return Err(Error::shape(
                format!("{} embeddings", labels.len()),
                format!("{} embeddings", embeddings.nrows()),
            ));
        }
        if !(temperature > 0.0) {
            return Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")));
        }
        for (i, row) in embeddings.rows().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if (norm - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::InvalidArgument(format!("embedding {i} has norm {norm}, expected 1")));
            }
        }
        Ok(ContrastiveBatch { embeddings, labels, temperature })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn normals(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == 0.0).collect()
    }
}

/// Σ over anchors of −mean_{q∈positives} log softmax_q over all other
/// samples, with gradient w.r.t. the embeddings.
fn supcon(batch: &ContrastiveBatch, anchors: &[(usize, Vec<usize>)]) -> (f64, Array2<f64>) {
    let g = &batch.embeddings;
    let n = batch.len();
    let inv_t = 1.0 / batch.temperature;
    let sim = g.dot(&g.t()) * inv_t;
    let mut coeff = Array2::<f64>::zeros((n, n));
    let mut loss = 0.0;
    for (i, positives) in anchors {
        let i = *i;
        let m = (0..n).filter(|&b| b != i).map(|b| sim[[i, b]]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..n).filter(|&b| b != i).map(|b| (sim[[i, b]] - m).exp()).sum();
        let lse = m + z.ln();
        let mean_pos = positives.iter().map(|&q| sim[[i, q]]).sum::<f64>() / positives.len() as f64;
        loss += lse - mean_pos;
        for b in (0..n).filter(|&b| b != i) {
            coeff[[i, b]] += (sim[[i, b]] - lse).exp();
        }
        for &q in positives {
            coeff[[i, q]] -= 1.0 / positives.len() as f64;
        }
    }
    // s_ib = g_i·g_b/δ, so ∂/∂g_i gets coeff_ib g_b/δ and ∂/∂g_b gets coeff_ib g_i/δ
    let grad = (coeff.dot(g) + coeff.t().dot(g)) * inv_t;
    (loss, grad)
}

fn anomaly_aware_anchors(batch: &ContrastiveBatch) -> Result<Vec<(usize, Vec<usize>)>> {
    let normals = batch.normals();
    if normals.len() < 2 {
        return Err(Error::ContrastiveUndefined(format!("batch has {} normal samples, need at least 2", normals.len())));
    }
    Ok(normals.iter().map(|&i| (i, normals.iter().copied().filter(|&q| q != i).collect())).collect())
}

/// Anomaly-aware contrastive loss: normal samples anchor and serve as each
/// other's positives; samples with y > 0 only enter the denominators.
pub fn contrastive_loss(batch: &ContrastiveBatch) -> Result<f64> {
    Ok(contrastive_grad(batch)?.0)
}

pub fn contrastive_grad(batch: &ContrastiveBatch) -> Result<(f64, Array2<f64>)> {
    let anchors = anomaly_aware_anchors(batch)?;
    Ok(supcon(batch, &anchors))
}

fn vanilla_anchors(batch: &ContrastiveBatch) -> Result<Vec<(usize, Vec<usize>)>> {
    let class = |i: usize| batch.labels[i] > 0.0;
    let anchors: Vec<(usize, Vec<usize>)> = (0..batch.len())
        .map(|i| (i, (0..batch.len()).filter(|&q| q != i && class(q) == class(i)).collect::<Vec<_>>()))
        .filter(|(_, p)| !p.is_empty())
        .collect();
    if anchors.is_empty() {
        return Err(Error::ContrastiveUndefined("no class has two members".into()));
    }
    Ok(anchors)
}

/// Supervised contrastive loss over the two classes {y = 0} and {y > 0};
/// every sample with at least one same-class partner anchors.
pub fn vanilla_supervised_contrastive_loss(batch: &ContrastiveBatch) -> Result<f64> {
    Ok(vanilla_supervised_contrastive_grad(batch)?.0)
}

pub fn vanilla_supervised_contrastive_grad(batch: &ContrastiveBatch) -> Result<(f64, Array2<f64>)> {
    let anchors = vanilla_anchors(batch)?;
    Ok(supcon(batch, &anchors))
}

/// Helper for callers holding embeddings as columns (`[d, N]`).
pub fn batch_from_columns(columns: ArrayView2<f64>, labels: &[f64], temperature: f64) -> Result<ContrastiveBatch> {
    ContrastiveBatch::new(columns.t().to_owned(), labels.to_vec(), temperature)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn unit_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        let mut g = Array2::from_shape_simple_fn((n, d), || rng.sample::<f64, _>(StandardNormal));
        for mut r in g.rows_mut() {
            let norm = r.dot(&r).sqrt();
            r /= norm;
        }
        g
    }

    fn random_batch(rng: &mut ChaCha8Rng) -> ContrastiveBatch {
        let n = rng.random_range(3..=16);
        let d = rng.random_range(1..=8);
        let mut labels: Vec<f64> = (0..n)
            .map(|_| match rng.random_range(0..3) {
                0 => 1.0,
                1 => rng.random_range(0.01..1.0),
                _ => 0.0,
            })
            .collect();
        labels[0] = 0.0;
        labels[1] = 0.0;
        ContrastiveBatch::new(unit_rows(n, d, rng), labels, DEFAULT_TEMPERATURE).unwrap()
    }

    /// Literal double sum over anchors and positives, without max-shifting.
    fn oracle(batch: &ContrastiveBatch, vanilla: bool) -> f64 {
        let g = &batch.embeddings;
        let n = batch.len();
        let cls = |i: usize| batch.labels[i] > 0.0;
        let mut total = 0.0;
        for i in 0..n {
            if !vanilla && batch.labels[i] != 0.0 {
                continue;
            }
            let mut denom = 0.0;
            for b in 0..n {
                if b != i {
                    denom += (g.row(i).dot(&g.row(b)) / batch.temperature).exp();
                }
            }
            let mut acc = 0.0;
            let mut count = 0;
            for q in 0..n {
                let positive = if vanilla { cls(q) == cls(i) } else { batch.labels[q] == 0.0 };
                if q != i && positive {
                    acc += ((g.row(i).dot(&g.row(q)) / batch.temperature).exp() / denom).ln();
                    count += 1;
                }
            }
            if count > 0 {
                total += -acc / count as f64;
            }
        }
        total
    }

    #[test]
    fn reconstruction_examples() {
        let x = Array2::<f64>::zeros((2, 2));
        let x_hat = Array2::<f64>::ones((2, 2));
        assert_eq!(reconstruction_loss(&[x_hat.view()], &[x.view()], &[0.0]).unwrap(), 1.0);
        assert_eq!(reconstruction_loss(&[x.view()], &[x.view()], &[0.0]).unwrap(), 0.0);
        assert_eq!(reconstruction_loss(&[x_hat.view()], &[x.view()], &[1.0]).unwrap(), 0.0);
        assert_eq!(reconstruction_loss_with(&[x_hat.view()], &[x.view()], &[0.0], Reduction::Sum).unwrap(), 4.0);
        let big = Array2::<f64>::from_elem((3, 4), 1e6);
        assert_eq!(reconstruction_loss(&[big.view()], &[big.view()], &[0.0]).unwrap(), 0.0);
        let short = Array2::<f64>::zeros((2, 3));
        assert!(matches!(reconstruction_loss(&[short.view()], &[x.view()], &[0.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn reconstruction_gradient_skips_anomalies_and_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xs: Vec<Array2<f64>> = (0..4).map(|_| unit_rows(3, 5, &mut rng)).collect();
        let hs: Vec<Array2<f64>> = (0..4).map(|_| unit_rows(3, 5, &mut rng)).collect();
        let labels = [0.0, 1.0, 0.0, 0.4];
        for red in [Reduction::Mean, Reduction::Sum] {
            let xv: Vec<_> = xs.iter().map(|a| a.view()).collect();
            let hv: Vec<_> = hs.iter().map(|a| a.view()).collect();
            let (_, grads) = reconstruction_grad(&hv, &xv, &labels, red).unwrap();
            assert!(grads[1].iter().chain(grads[3].iter()).all(|&g| g == 0.0));
            for s in 0..4 {
                for idx in [(0, 0), (2, 4), (1, 3)] {
                    let h = 1e-6;
                    let eval = |delta: f64| {
                        let mut hs2 = hs.clone();
                        hs2[s][idx] += delta;
                        let hv: Vec<_> = hs2.iter().map(|a| a.view()).collect();
                        reconstruction_loss_with(&hv, &xv, &labels, red).unwrap()
                    };
                    let num = (eval(h) - eval(-h)) / (2.0 * h);
                    assert!(crate::nn::gradcheck::rel_err(grads[s][idx], num) < 1e-6);
                }
            }
        }
    }

    #[test]
    fn row_variant_equals_full_loss_with_all_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xs: Vec<Array2<f64>> = (0..3).map(|_| unit_rows(4, 6, &mut rng)).collect();
        let hs: Vec<Array2<f64>> = (0..3).map(|_| unit_rows(4, 6, &mut rng)).collect();
        let xv: Vec<_> = xs.iter().map(|a| a.view()).collect();
        let hv: Vec<_> = hs.iter().map(|a| a.view()).collect();
        let full = reconstruction_loss(&hv, &xv, &[0.0; 3]).unwrap();
        let pred = ndarray::concatenate(ndarray::Axis(0), &hv).unwrap();
        let target = ndarray::concatenate(ndarray::Axis(0), &xv).unwrap();
        let owners: Vec<usize> = (0..12).map(|r| r / 4).collect();
        let (rows, grad) = row_reconstruction_grad(pred.view(), target.view(), &owners).unwrap();
        assert!((rows - full).abs() < 1e-12);
        let (_, g) = reconstruction_grad(&hv, &xv, &[0.0; 3], Reduction::Mean).unwrap();
        assert!((&grad - &ndarray::concatenate(ndarray::Axis(0), &[g[0].view(), g[1].view(), g[2].view()]).unwrap())
            .iter()
            .all(|d| d.abs() < 1e-15));
    }

    #[test]
    fn deviation_examples() {
        assert_eq!(deviation_loss(&[0.0], &[0.0], 5.0).unwrap(), 0.0);
        assert_eq!(deviation_loss(&[7.0], &[1.0], 5.0).unwrap(), 0.0);
        assert_eq!(deviation_loss(&[2.0], &[0.5], 5.0).unwrap(), 2.5);
        assert_eq!(deviation_loss(&[-1.5, 1.0], &[0.0, 1.0], 5.0).unwrap(), (1.5 + 4.0) / 2.0);
        assert!(deviation_loss(&[1.0], &[], 5.0).is_err());
    }

    #[test]
    fn deviation_subgradient_off_kink() {
        let dev = [0.7, -1.3, 2.2, 6.1, 4.9, -0.4];
        let labels = [0.0, 0.0, 1.0, 1.0, 0.3, 0.8];
        let (_, g) = deviation_grad(&dev, &labels, 5.0).unwrap();
        for i in 0..dev.len() {
            let h = 1e-6;
            let mut p = dev;
            p[i] += h;
            let mut m = dev;
            m[i] -= h;
            let num = (deviation_loss(&p, &labels, 5.0).unwrap() - deviation_loss(&m, &labels, 5.0).unwrap()) / (2.0 * h);
            assert!((num - g[i]).abs() < 1e-6, "{i}: {num} vs {}", g[i]);
        }
    }

    #[test]
    fn total_examples() {
        assert_eq!(total_loss(0.0, 0.0, 0.0).unwrap().total, 0.0);
        let b = total_loss(1.0, 2.5, 0.25).unwrap();
        assert_eq!(b.total, 3.75);
        assert_eq!((b.rec, b.dev, b.con), (1.0, 2.5, 0.25));
        let err = total_loss(f64::NAN, 0.0, 0.0).unwrap_err();
        assert_eq!(err.to_string(), "rec non-finite");
        assert_eq!(total_loss(0.0, f64::INFINITY, 0.0).unwrap_err().to_string(), "dev non-finite");
    }

    #[test]
    fn contrastive_examples() {
        let same = ContrastiveBatch::new(array![[1.0, 0.0], [1.0, 0.0]], vec![0.0, 0.0], 0.07).unwrap();
        assert_eq!(contrastive_loss(&same).unwrap(), 0.0);
        assert_eq!(vanilla_supervised_contrastive_loss(&same).unwrap(), 0.0);

        let b = ContrastiveBatch::new(array![[1.0, 0.0], [1.0, 0.0], [-1.0, 0.0]], vec![0.0, 0.0, 1.0], 0.07).unwrap();
        let t: f64 = 1.0 / 0.07;
        let hand = 2.0 * -(t.exp() / (t.exp() + (-t).exp())).ln();
        assert!((contrastive_loss(&b).unwrap() - hand).abs() < 1e-9);
        assert!((oracle(&b, false) - hand).abs() < 1e-9);

        let lonely = ContrastiveBatch::new(array![[1.0, 0.0], [0.0, 1.0]], vec![0.0, 1.0], 0.07).unwrap();
        let err = contrastive_loss(&lonely).unwrap_err();
        assert!(err.to_string().contains("contrastive loss undefined"), "{err}");
        assert!(vanilla_supervised_contrastive_loss(&lonely).is_err());
    }

    #[test]
    fn batch_validation() {
        assert!(ContrastiveBatch::new(array![[2.0, 0.0]], vec![0.0], 0.07).is_err());
        assert!(ContrastiveBatch::new(array![[1.0, 0.0]], vec![0.0, 0.0], 0.07).is_err());
        assert!(ContrastiveBatch::new(array![[1.0, 0.0]], vec![0.0], 0.0).is_err());
    }

    #[test]
    fn vanilla_structured_batch() {
        // identical anomalies, identical normals, normals ⟂ anomalies
        let b = ContrastiveBatch::new(
            array![[1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]],
            vec![0.0, 0.0, 0.0, 1.0, 1.0],
            0.07,
        )
        .unwrap();
        assert!((vanilla_supervised_contrastive_loss(&b).unwrap() - oracle(&b, true)).abs() < 1e-9);
    }

    #[test]
    fn oracles_on_random_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for _ in 0..200 {
            let b = random_batch(&mut rng);
            assert!((contrastive_loss(&b).unwrap() - oracle(&b, false)).abs() < 1e-9);
            assert!((vanilla_supervised_contrastive_loss(&b).unwrap() - oracle(&b, true)).abs() < 1e-9);
        }
    }

    #[test]
    fn single_anomaly_vanilla_equals_anomaly_aware() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let n = rng.random_range(3..=12);
            let mut labels = vec![0.0; n];
            labels[rng.random_range(0..n)] = 1.0;
            let b = ContrastiveBatch::new(unit_rows(n, 4, &mut rng), labels, 0.07).unwrap();
            let (a, ga) = contrastive_grad(&b).unwrap();
            let (v, gv) = vanilla_supervised_contrastive_grad(&b).unwrap();
            assert!((a - v).abs() < 1e-9);
            assert!((&ga - &gv).iter().all(|d| d.abs() < 1e-9));
        }
    }

    /// Gradient of the double-loop oracle by central differences, with the
    /// embedding perturbed freely (off the sphere).
    fn fd_grad(b: &ContrastiveBatch, vanilla: bool) -> Array2<f64> {
        let h = 1e-6;
        let mut out = Array2::zeros(b.embeddings.dim());
        for idx in ndarray::indices(b.embeddings.dim()) {
            let mut p = b.clone();
            p.embeddings[idx] += h;
            let mut m = b.clone();
            m.embeddings[idx] -= h;
            out[idx] = (oracle(&p, vanilla) - oracle(&m, vanilla)) / (2.0 * h);
        }
        out
    }

    #[test]
    fn contrastive_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let n = rng.random_range(3..=8);
            let mut labels: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect();
            labels[0] = 0.0;
            labels[1] = 0.0;
            labels[2] = 1.0;
            let b = ContrastiveBatch::new(unit_rows(n, 3, &mut rng), labels, 0.07).unwrap();
            for vanilla in [false, true] {
                let (_, g) = if vanilla { vanilla_supervised_contrastive_grad(&b) } else { contrastive_grad(&b) }.unwrap();
                let num = fd_grad(&b, vanilla);
                for (a, n) in g.iter().zip(num.iter()) {
                    assert!(crate::nn::gradcheck::rel_err(*a, *n) < 1e-4, "{a} vs {n}");
                }
            }
        }
    }

    #[test]
    fn anomaly_gradient_flows_only_through_denominators() {
        // Oracle built from denominators alone: for anomaly a,
        // ∂L/∂g_a = Σ_{i∈B_n} softmax_ia · g_i / δ.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let labels = vec![0.0, 0.0, 0.0, 1.0, 0.6];
        let b = ContrastiveBatch::new(unit_rows(5, 4, &mut rng), labels, 0.07).unwrap();
        let (_, g) = contrastive_grad(&b).unwrap();
        let e = &b.embeddings;
        for a in [3, 4] {
            let mut expect = Array1::<f64>::zeros(4);
            for i in 0..3 {
                let z: f64 = (0..5).filter(|&q| q != i).map(|q| (e.row(i).dot(&e.row(q)) / 0.07).exp()).sum();
                let p = (e.row(i).dot(&e.row(a)) / 0.07).exp() / z;
                expect += &(&e.row(i) * (p / 0.07));
            }
            assert!((&g.row(a) - &expect).iter().all(|d| d.abs() < 1e-9));
        }
    }

    #[test]
    fn stable_at_extreme_similarity() {
        let b = ContrastiveBatch::new(
            array![[1.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [-1.0, 0.0]],
            vec![0.0, 0.0, 1.0, 0.0],
            0.07,
        )
        .unwrap();
        let (l, g) = contrastive_grad(&b).unwrap();
        assert!(l.is_finite() && g.iter().all(|v| v.is_finite()));
        let tiny = ContrastiveBatch { temperature: 1e-3, ..b };
        assert!(contrastive_loss(&tiny).unwrap().is_finite());
    }

    #[test]
    fn appending_a_normal_can_lower_loss() {
        // The new normal is a positive for every normal anchor, so the
        // per-anchor average over positives can drop.
        let base = ContrastiveBatch::new(array![[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]], vec![0.0, 0.0, 1.0], 0.07).unwrap();
        let grown = ContrastiveBatch::new(
            array![[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]],
            vec![0.0, 0.0, 1.0, 0.0],
            0.07,
        )
        .unwrap();
        let (before, after) = (contrastive_loss(&base).unwrap(), contrastive_loss(&grown).unwrap());
        assert!((before - 28.571429821178082).abs() < 1e-9);
        assert!((after - 16.365156764706402).abs() < 1e-9);
        assert!(after < before);
    }

    fn batch_strategy() -> impl Strategy<Value = (u64, usize)> {
        (any::<u64>(), 3usize..=15)
    }

    proptest! {
        #[test]
        fn permutation_invariant((seed, n) in batch_strategy()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut labels: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect();
            labels[0] = 0.0;
            labels[1] = 0.0;
            let b = ContrastiveBatch::new(unit_rows(n, 5, &mut rng), labels, 0.07).unwrap();
            let mut order: Vec<usize> = (0..n).collect();
            rand::seq::SliceRandom::shuffle(&mut order[..], &mut rng);
            let perm = ContrastiveBatch::new(
                b.embeddings.select(ndarray::Axis(0), &order),
                order.iter().map(|&i| b.labels[i]).collect(),
                0.07,
            ).unwrap();
            prop_assert!((contrastive_loss(&b).unwrap() - contrastive_loss(&perm).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn appending_an_anomaly_increases_loss((seed, n) in batch_strategy()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut labels: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect();
            labels[0] = 0.0;
            labels[1] = 0.0;
            let b = ContrastiveBatch::new(unit_rows(n + 1, 5, &mut rng), labels.clone(), 0.07);
            prop_assert!(b.is_err());
            let all = unit_rows(n + 1, 5, &mut rng);
            let base = ContrastiveBatch::new(all.slice(ndarray::s![..n, ..]).to_owned(), labels.clone(), 0.07).unwrap();
            labels.push(1.0);
            let grown = ContrastiveBatch::new(all, labels, 0.07).unwrap();
            prop_assert!(contrastive_loss(&grown).unwrap() > contrastive_loss(&base).unwrap());
        }
    }
}
