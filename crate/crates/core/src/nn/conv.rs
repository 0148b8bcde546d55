use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{slice, slice1, slice1_mut, slice_mut, uniform_init, Params, Real};

/// Which side of the sequence receives the `(kernel-1)*dilation` zero pad.
/// `Causal` outputs at time t see inputs at t and earlier; `AntiCausal` sees
/// t and later (the time-reversed mirror used by the decoder).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Padding {
    Causal,
    AntiCausal,
}

/// 1-D dilated convolution over `[channels, N*L]` activations, lowered to
/// a matrix product with an im2col buffer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Conv1d<T> {
    /// `[out, in*kernel]`, column `ci*kernel + j` is tap `j` of input `ci`.
    pub weight: Array2<T>,
    pub bias: Array1<T>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub padding: Padding,
}

pub struct ConvCache<T> {
    cols: Array2<T>,
}

impl<T: Real> Conv1d<T> {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        dilation: usize,
        padding: Padding,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel;
        let weight = uniform_init((out_channels, fan_in), fan_in, rng);
        let bias = uniform_init((1, out_channels), fan_in, rng).into_shape_with_order(out_channels).unwrap();
        Conv1d { weight, bias, in_channels, out_channels, kernel, dilation, padding }
    }

    /// Time offset of tap `j` relative to the output position.
    fn offset(&self, j: usize) -> isize {
        let span = ((self.kernel - 1) * self.dilation) as isize;
        let o = (j * self.dilation) as isize;
        match self.padding {
            Padding::Causal => o - span,
            Padding::AntiCausal => o,
        }
    }

    /// Valid output range `[t0, t1)` for tap offset `o` in a sequence of `len`.
    fn valid(o: isize, len: usize) -> (usize, usize) {
        let t0 = (-o).max(0) as usize;
        let t1 = (len as isize - o).clamp(0, len as isize) as usize;
        (t0.min(t1), t1)
    }

    fn im2col(&self, x: &Array2<T>, len: usize) -> Array2<T> {
        let ncols = x.ncols();
        let n = ncols / len;
        let x = x.as_standard_layout();
        let mut cols = Array2::zeros((self.in_channels * self.kernel, ncols));
        for ci in 0..self.in_channels {
            let xs = x.row(ci);
            let xs = xs.as_slice().unwrap();
            for j in 0..self.kernel {
                let o = self.offset(j);
                let (t0, t1) = Self::valid(o, len);
                if t0 == t1 {
                    continue;
                }
                let mut crow = cols.row_mut(ci * self.kernel + j);
                let cs = crow.as_slice_mut().unwrap();
                for s in 0..n {
                    let base = s * len;
                    let src = (base as isize + t0 as isize + o) as usize;
                    cs[base + t0..base + t1].copy_from_slice(&xs[src..src + (t1 - t0)]);
                }
            }
        }
        cols
    }

    pub fn forward(&self, x: &Array2<T>, len: usize) -> (Array2<T>, ConvCache<T>) {
        assert_eq!(x.nrows(), self.in_channels, "conv input channels");
        assert_eq!(x.ncols() % len, 0, "conv input length");
        let cols = self.im2col(x, len);
        let mut y = self.weight.dot(&cols);
        for (mut row, &b) in y.rows_mut().into_iter().zip(self.bias.iter()) {
            row.mapv_inplace(|v| v + b);
        }
        (y, ConvCache { cols })
    }

    pub fn backward(&self, cache: &ConvCache<T>, dy: &Array2<T>, len: usize, grad: &mut Self) -> Array2<T> {
        general_mat_mul(T::one(), dy, &cache.cols.t(), T::one(), &mut grad.weight);
        grad.bias += &dy.sum_axis(Axis(1));
        let dcols = self.weight.t().dot(dy);
        let ncols = dy.ncols();
        let n = ncols / len;
        let mut dx = Array2::zeros((self.in_channels, ncols));
        for ci in 0..self.in_channels {
            let mut drow = dx.row_mut(ci);
            let ds = drow.as_slice_mut().unwrap();
            for j in 0..self.kernel {
                let o = self.offset(j);
                let (t0, t1) = Self::valid(o, len);
                if t0 == t1 {
                    continue;
                }
                let crow = dcols.row(ci * self.kernel + j);
                let cs = crow.as_slice().unwrap();
                for s in 0..n {
                    let base = s * len;
                    let dst = (base as isize + t0 as isize + o) as usize;
                    for (d, &c) in ds[dst..dst + (t1 - t0)].iter_mut().zip(&cs[base + t0..base + t1]) {
                        *d += c;
                    }
                }
            }
        }
        dx
    }
}

impl<T> Params<T> for Conv1d<T> {
    fn params(&self) -> Vec<&[T]> {
        vec![slice(&self.weight), slice1(&self.bias)]
    }

    fn params_mut(&mut self) -> Vec<&mut [T]> {
        vec![slice_mut(&mut self.weight), slice1_mut(&mut self.bias)]
    }
}
