use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{relu, relu_backward, Conv1d, ConvCache, Padding, Params, Real};

/// Temporal residual block: conv → ReLU → conv → ReLU, plus the input (via
/// a 1×1 convolution when the channel count changes), then ReLU.
///
/// With `activate_output = false` the second ReLU and the final ReLU are
/// dropped, so the block can emit unbounded values (decoder output).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ResidualBlock<T> {
    pub conv1: Conv1d<T>,
    pub conv2: Conv1d<T>,
    pub downsample: Option<Conv1d<T>>,
    pub activate_output: bool,
}

pub struct BlockCache<T> {
    c1: ConvCache<T>,
    a1: Array2<T>,
    c2: ConvCache<T>,
    a2: Array2<T>,
    skip: Option<ConvCache<T>>,
    out: Array2<T>,
}

impl<T: Real> ResidualBlock<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        input: usize,
        output: usize,
        kernel: usize,
        dilation: usize,
        padding: Padding,
        activate_output: bool,
        rng: &mut R,
    ) -> Self {
        let conv1 = Conv1d::new(input, output, kernel, dilation, padding, rng);
        let conv2 = Conv1d::new(output, output, kernel, dilation, padding, rng);
        let downsample = (input != output).then(|| Conv1d::new(input, output, 1, 1, padding, rng));
        ResidualBlock { conv1, conv2, downsample, activate_output }
    }

    pub fn forward(&self, x: &Array2<T>, len: usize) -> (Array2<T>, BlockCache<T>) {
        let (h1, c1) = self.conv1.forward(x, len);
        let a1 = relu(h1);
        let (h2, c2) = self.conv2.forward(&a1, len);
        let a2 = if self.activate_output { relu(h2) } else { h2 };
        let (mut sum, skip) = match &self.downsample {
            Some(ds) => {
                let (r, c) = ds.forward(x, len);
                (r, Some(c))
            }
            None => (x.clone(), None),
        };
        sum += &a2;
        let out = if self.activate_output { relu(sum) } else { sum };
        (out.clone(), BlockCache { c1, a1, c2, a2, skip, out })
    }

    pub fn backward(&self, cache: &BlockCache<T>, dy: &Array2<T>, len: usize, grad: &mut Self) -> Array2<T> {
        let dsum = if self.activate_output { relu_backward(&cache.out, dy) } else { dy.clone() };
        let dh2 = if self.activate_output { relu_backward(&cache.a2, &dsum) } else { dsum.clone() };
        let da1 = self.conv2.backward(&cache.c2, &dh2, len, &mut grad.conv2);
        let dh1 = relu_backward(&cache.a1, &da1);
        let mut dx = self.conv1.backward(&cache.c1, &dh1, len, &mut grad.conv1);
        match (&self.downsample, &cache.skip, grad.downsample.as_mut()) {
            (Some(ds), Some(c), Some(g)) => dx += &ds.backward(c, &dsum, len, g),
            _ => dx += &dsum,
        }
        dx
    }
}

impl<T> Params<T> for ResidualBlock<T> {
    fn params(&self) -> Vec<&[T]> {
        let mut v = self.conv1.params();
        v.extend(self.conv2.params());
        if let Some(ds) = &self.downsample {
            v.extend(ds.params());
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut [T]> {
        let mut v = self.conv1.params_mut();
        v.extend(self.conv2.params_mut());
        if let Some(ds) = &mut self.downsample {
            v.extend(ds.params_mut());
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_input, check_params, probe};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn block_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let len = 5;
        for (cin, cout, act, pad) in [
            (2, 3, true, Padding::Causal),
            (3, 3, true, Padding::Causal),
            (3, 2, false, Padding::AntiCausal),
        ] {
            let block = ResidualBlock::<f64>::new(cin, cout, 3, 2, pad, act, &mut rng);
            let x = probe((cin, 2 * len), 4);
            let w = probe((cout, 2 * len), 5);
            let (_, cache) = block.forward(&x, len);
            let mut grad = block.clone();
            grad.zero();
            let dx = block.backward(&cache, &w, len, &mut grad);
            let loss = |b: &ResidualBlock<f64>, x: &Array2<f64>| (&b.forward(x, len).0 * &w).sum();
            assert!(check_params(&block, &grad, |b| loss(b, &x)) < 1e-5);
            assert!(check_input(&x, &dx, |x| loss(&block, x)) < 1e-5);
        }
    }
}
