use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{cast, slice, slice1, slice1_mut, slice_mut, uniform_init, Params, Real};

/// Fully connected layer on column vectors: `y = W x + b`, `x: [in, N]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Linear<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        Linear {
            weight: uniform_init((output, input), input, rng),
            bias: uniform_init((1, output), input, rng).into_shape_with_order(output).unwrap(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: &Array2<T>) -> Array2<T> {
        let mut y = self.weight.dot(x);
        y += &self.bias.view().insert_axis(Axis(1));
        y
    }

    /// `x` is the forward input.
    pub fn backward(&self, x: &Array2<T>, dy: &Array2<T>, grad: &mut Self) -> Array2<T> {
        general_mat_mul(T::one(), dy, &x.t(), T::one(), &mut grad.weight);
        grad.bias += &dy.sum_axis(Axis(1));
        self.weight.t().dot(dy)
    }
}

impl<T> Params<T> for Linear<T> {
    fn params(&self) -> Vec<&[T]> {
        vec![slice(&self.weight), slice1(&self.bias)]
    }

    fn params_mut(&mut self) -> Vec<&mut [T]> {
        vec![slice_mut(&mut self.weight), slice1_mut(&mut self.bias)]
    }
}

pub fn relu<T: Real>(x: Array2<T>) -> Array2<T> {
    x.mapv_into(|v| if v > T::zero() { v } else { T::zero() })
}

/// Backward through ReLU given its output `y`.
pub fn relu_backward<T: Real>(y: &Array2<T>, dy: &Array2<T>) -> Array2<T> {
    Zip::from(y).and(dy).map_collect(|&y, &d| if y > T::zero() { d } else { T::zero() })
}

/// Parametric ReLU with one shared slope.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct PRelu<T> {
    pub slope: Array1<T>,
}

impl<T: Real> PRelu<T> {
    pub fn new(init: f64) -> Self {
        PRelu { slope: Array1::from_elem(1, cast(init)) }
    }

    pub fn forward(&self, x: &Array2<T>) -> Array2<T> {
        let a = self.slope[0];
        x.mapv(|v| if v > T::zero() { v } else { a * v })
    }

    pub fn backward(&self, x: &Array2<T>, dy: &Array2<T>, grad: &mut Self) -> Array2<T> {
        let a = self.slope[0];
        let mut da = T::zero();
        let dx = Zip::from(x).and(dy).map_collect(|&x, &d| {
            if x > T::zero() {
                d
            } else {
                da += d * x;
                a * d
            }
        });
        grad.slope[0] += da;
        dx
    }
}

impl<T> Params<T> for PRelu<T> {
    fn params(&self) -> Vec<&[T]> {
        vec![slice1(&self.slope)]
    }

    fn params_mut(&mut self) -> Vec<&mut [T]> {
        vec![slice1_mut(&mut self.slope)]
    }
}

/// Batch normalisation over the columns of `[features, N]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct BatchNorm1d<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
    pub running_mean: Array1<T>,
    pub running_var: Array1<T>,
    pub momentum: f64,
    pub eps: f64,
}

pub struct BatchNormCache<T> {
    xhat: Array2<T>,
    inv_std: Array1<T>,
    /// Batch mean and unbiased batch variance, for the running update.
    pub batch_mean: Array1<T>,
    pub batch_var_unbiased: Option<Array1<T>>,
}

impl<T: Real> BatchNorm1d<T> {
    pub fn new(features: usize, momentum: f64, eps: f64) -> Self {
        BatchNorm1d {
            gamma: Array1::ones(features),
            beta: Array1::zeros(features),
            running_mean: Array1::zeros(features),
            running_var: Array1::ones(features),
            momentum,
            eps,
        }
    }

    fn affine(&self, xhat: &Array2<T>) -> Array2<T> {
        let mut y = xhat * &self.gamma.view().insert_axis(Axis(1));
        y += &self.beta.view().insert_axis(Axis(1));
        y
    }

    /// Normalises with batch statistics. Running statistics are not touched;
    /// apply [`BatchNorm1d::update_running`] with the cache afterwards.
    pub fn forward_train(&self, x: &Array2<T>) -> (Array2<T>, BatchNormCache<T>) {
        let n = x.ncols();
        let nf: T = cast(n as f64);
        let mean = x.sum_axis(Axis(1)) / nf;
        let centered = x - &mean.view().insert_axis(Axis(1));
        let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / nf;
        let eps: T = cast(self.eps);
        let inv_std = var.mapv(|v| T::one() / (v + eps).sqrt());
        let xhat = centered * &inv_std.view().insert_axis(Axis(1));
        let unbiased = (n > 1).then(|| &var * (nf / (nf - T::one())));
        let y = self.affine(&xhat);
        (y, BatchNormCache { xhat, inv_std, batch_mean: mean, batch_var_unbiased: unbiased })
    }

    pub fn forward_eval(&self, x: &Array2<T>) -> Array2<T> {
        let eps: T = cast(self.eps);
        let inv_std = self.running_var.mapv(|v| T::one() / (v + eps).sqrt());
        let xhat = (x - &self.running_mean.view().insert_axis(Axis(1))) * &inv_std.view().insert_axis(Axis(1));
        self.affine(&xhat)
    }

    pub fn update_running(&mut self, cache: &BatchNormCache<T>) {
        let m: T = cast(self.momentum);
        let keep = T::one() - m;
        self.running_mean = &self.running_mean * keep + &cache.batch_mean * m;
        if let Some(var) = &cache.batch_var_unbiased {
            self.running_var = &self.running_var * keep + var * m;
        }
    }

    pub fn backward(&self, cache: &BatchNormCache<T>, dy: &Array2<T>, grad: &mut Self) -> Array2<T> {
        let nf: T = cast(dy.ncols() as f64);
        grad.beta += &dy.sum_axis(Axis(1));
        grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(1));
        let dxhat = dy * &self.gamma.view().insert_axis(Axis(1));
        let mean_d = dxhat.sum_axis(Axis(1)) / nf;
        let mean_dx = (&dxhat * &cache.xhat).sum_axis(Axis(1)) / nf;
        let mut dx = dxhat - &mean_d.view().insert_axis(Axis(1));
        dx -= &(&cache.xhat * &mean_dx.view().insert_axis(Axis(1)));
        dx * &cache.inv_std.view().insert_axis(Axis(1))
    }
}

impl<T> Params<T> for BatchNorm1d<T> {
    fn params(&self) -> Vec<&[T]> {
        vec![slice1(&self.gamma), slice1(&self.beta)]
    }

    fn params_mut(&mut self) -> Vec<&mut [T]> {
        vec![slice1_mut(&mut self.gamma), slice1_mut(&mut self.beta)]
    }
}

/// Inverted dropout: kept units are scaled by 1/(1-p) during training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dropout {
    pub p: f64,
}

impl Dropout {
    /// Returns the output and the scaled keep-mask.
    pub fn forward<T: Real, R: Rng + ?Sized>(&self, x: &Array2<T>, rng: &mut R) -> (Array2<T>, Array2<T>) {
        if self.p <= 0.0 {
            return (x.clone(), Array2::ones(x.dim()));
        }
        let scale: T = cast(1.0 / (1.0 - self.p));
        let mask = Array2::from_shape_simple_fn(x.dim(), || {
            if rng.random::<f64>() < self.p {
                T::zero()
            } else {
                scale
            }
        });
        (x * &mask, mask)
    }
}

/// Mean over time: `[C, N*L] -> [C, N]`.
pub fn global_avg_pool<T: Real>(x: &Array2<T>, len: usize) -> Array2<T> {
    let n = x.ncols() / len;
    let lf: T = cast(len as f64);
    let mut out = Array2::zeros((x.nrows(), n));
    for (c, row) in x.rows().into_iter().enumerate() {
        for s in 0..n {
            let mut acc = T::zero();
            for t in 0..len {
                acc += row[s * len + t];
            }
            out[[c, s]] = acc / lf;
        }
    }
    out
}

pub fn global_avg_pool_backward<T: Real>(dy: &Array2<T>, len: usize) -> Array2<T> {
    let lf: T = cast(len as f64);
    let mut dx = Array2::zeros((dy.nrows(), dy.ncols() * len));
    for ((c, s), &d) in dy.indexed_iter() {
        let v = d / lf;
        for t in 0..len {
            dx[[c, s * len + t]] = v;
        }
    }
    dx
}

/// `[C*L, N] -> [C, N*L]` with feature `c*L + t` going to time step `t`.
pub fn unflatten_sequence<T: Real>(x: &Array2<T>, channels: usize, len: usize) -> Array2<T> {
    let n = x.ncols();
    let mut out = Array2::zeros((channels, n * len));
    for c in 0..channels {
        for t in 0..len {
            let src = x.row(c * len + t);
            for s in 0..n {
                out[[c, s * len + t]] = src[s];
            }
        }
    }
    out
}

pub fn unflatten_sequence_backward<T: Real>(dy: &Array2<T>, len: usize) -> Array2<T> {
    let channels = dy.nrows();
    let n = dy.ncols() / len;
    let mut dx = Array2::zeros((channels * len, n));
    for c in 0..channels {
        for t in 0..len {
            for s in 0..n {
                dx[[c * len + t, s]] = dy[[c, s * len + t]];
            }
        }
    }
    dx
}

/// Scales every column to unit norm, `g = u / (‖u‖ + eps)`. Returns the
/// output and the column norms.
pub fn l2_normalize_columns<T: Real>(u: &Array2<T>, eps: f64) -> (Array2<T>, Array1<T>) {
    let eps: T = cast(eps);
    let norms = u.map_axis(Axis(0), |c| c.dot(&c).sqrt());
    let g = u / &norms.mapv(|n| n + eps).view().insert_axis(Axis(0));
    (g, norms)
}

/// `dg/du` applied to `dg`: `dg/(n+eps) - u (u·dg) / (n (n+eps)^2)`.
pub fn l2_normalize_columns_backward<T: Real>(u: &Array2<T>, norms: &Array1<T>, dg: &Array2<T>, eps: f64) -> Array2<T> {
    let eps: T = cast(eps);
    let mut du = Array2::zeros(u.dim());
    for (s, mut col) in du.columns_mut().into_iter().enumerate() {
        let n = norms[s];
        let d = n + eps;
        let uc = u.column(s);
        let gc = dg.column(s);
        let proj = if n > T::zero() { uc.dot(&gc) / (n * d * d) } else { T::zero() };
        Zip::from(&mut col).and(&uc).and(&gc).for_each(|o, &u, &g| *o = g / d - u * proj);
    }
    du
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_input, check_params, probe};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = Linear::<f64>::new(4, 3, &mut rng);
        let x = probe((4, 5), 1);
        let w = probe((3, 5), 2);
        let mut grad = lin.clone();
        grad.zero();
        let dx = lin.backward(&x, &w, &mut grad);
        assert!(check_params(&lin, &grad, |l| (&l.forward(&x) * &w).sum()) < 1e-6);
        assert!(check_input(&x, &dx, |x| (&lin.forward(x) * &w).sum()) < 1e-6);
    }

    #[test]
    fn prelu_gradients() {
        let p = PRelu::<f64>::new(0.25);
        let x = probe((3, 4), 3);
        let w = probe((3, 4), 4);
        let mut grad = p.clone();
        grad.zero();
        let dx = p.backward(&x, &w, &mut grad);
        assert!(check_params(&p, &grad, |p| (&p.forward(&x) * &w).sum()) < 1e-6);
        assert!(check_input(&x, &dx, |x| (&p.forward(x) * &w).sum()) < 1e-6);
    }

    #[test]
    fn batchnorm_gradients_and_running_stats() {
        let mut bn = BatchNorm1d::<f64>::new(3, 0.1, 1e-5);
        bn.gamma = probe((1, 3), 5).into_shape_with_order(3).unwrap() + 1.0;
        let x = probe((3, 6), 6) * 3.0;
        let w = probe((3, 6), 7);
        let (y, cache) = bn.forward_train(&x);
        // normalised columns: each feature has zero mean before the affine map
        assert!(cache.xhat.sum_axis(Axis(1)).iter().all(|v| v.abs() < 1e-12));
        assert_eq!(y.dim(), (3, 6));
        let mut grad = bn.clone();
        grad.zero();
        let dx = bn.backward(&cache, &w, &mut grad);
        assert!(check_params(&bn, &grad, |b| (&b.forward_train(&x).0 * &w).sum()) < 1e-5);
        assert!(check_input(&x, &dx, |x| (&bn.forward_train(x).0 * &w).sum()) < 1e-5);

        let mut bn2 = BatchNorm1d::<f64>::new(1, 0.1, 1e-5);
        let x = Array2::from_shape_vec((1, 4), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (_, c) = bn2.forward_train(&x);
        bn2.update_running(&c);
        assert!((bn2.running_mean[0] - 0.25).abs() < 1e-12);
        // unbiased variance of 1..4 is 5/3
        assert!((bn2.running_var[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn dropout_scales_kept_units() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array2::<f64>::ones((50, 40));
        let (y, mask) = Dropout { p: 0.25 }.forward(&x, &mut rng);
        let kept = y.iter().filter(|&&v| v != 0.0).count();
        assert!(y.iter().all(|&v| v == 0.0 || (v - 4.0 / 3.0).abs() < 1e-12));
        assert!((kept as f64 / 2000.0 - 0.75).abs() < 0.05);
        assert_eq!(y, mask);
    }

    #[test]
    fn pooling_and_unflatten_round_trip() {
        let x = probe((2, 12), 8);
        let w = probe((2, 3), 9);
        let dx = global_avg_pool_backward(&w, 4);
        assert!(check_input(&x, &dx, |x| (&global_avg_pool(x, 4) * &w).sum()) < 1e-6);

        let f = probe((2 * 4, 3), 10);
        let seq = unflatten_sequence(&f, 2, 4);
        assert_eq!(seq[[1, 2 * 4 + 3]], f[[4 + 3, 2]]);
        assert_eq!(unflatten_sequence_backward(&seq, 4), f);
    }

    #[test]
    fn l2_normalize_unit_norm_and_gradients() {
        let u = probe((5, 4), 11);
        let (g, norms) = l2_normalize_columns(&u, 1e-12);
        for c in g.columns() {
            assert!((c.dot(&c).sqrt() - 1.0).abs() < 1e-12);
        }
        let w = probe((5, 4), 12);
        let du = l2_normalize_columns_backward(&u, &norms, &w, 1e-12);
        assert!(check_input(&u, &du, |u| (&l2_normalize_columns(u, 1e-12).0 * &w).sum()) < 1e-6);

        let zero = Array2::<f64>::zeros((3, 1));
        let (g0, _) = l2_normalize_columns(&zero, 1e-12);
        assert!(g0.iter().all(|v| v.is_finite()));
    }
}
