//! Variable masks: `mask_variable` zeroes one variable (row), and
//! `keep_only_variable` zeroes all the others. Variables are 0-based.

use ndarray::{Array2, ArrayView2};
use num_traits::Zero;

use crate::{Error, Result};

fn check_index(k: usize, rows: usize) -> Result<()> {
    if k >= rows {
        return Err(Error::InvalidArgument(format!(
            "variable index {k} out of range for {rows} variables"
        )));
    }
    Ok(())
}

/// Copy of `x` with row `k` set to zero.
pub fn mask_variable<T: Clone + Zero>(x: ArrayView2<'_, T>, k: usize) -> Result<Array2<T>> {
    check_index(k, x.nrows())?;
    let mut out = x.to_owned();
    out.row_mut(k).fill(T::zero());
    Ok(out)
}

/// Copy of `x` with every row except `k` set to zero.
pub fn keep_only_variable<T: Clone + Zero>(x: ArrayView2<'_, T>, k: usize) -> Result<Array2<T>> {
    check_index(k, x.nrows())?;
    let mut out = Array2::zeros(x.raw_dim());
    out.row_mut(k).assign(&x.row(k));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zeroes_one_row_of_ones() {
        let x = Array2::<f32>::ones((3, 4));
        let m = mask_variable(x.view(), 1).unwrap();
        assert!(m.row(1).iter().all(|&v| v == 0.0));
        assert_eq!(m.row(0), x.row(0));
        assert_eq!(m.row(2), x.row(2));
        assert_eq!(x, Array2::<f32>::ones((3, 4)), "input untouched");
    }

    #[test]
    fn zero_row_is_fixed_point() {
        let mut x = Array2::<f32>::ones((3, 4));
        x.row_mut(2).fill(0.0);
        assert_eq!(mask_variable(x.view(), 2).unwrap(), x);
    }

    #[test]
    fn norm_drop_equals_row_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Array2::from_shape_fn((5, 8), |_| rng.random_range(-2.0..2.0f64));
        let fro = |a: &Array2<f64>| a.iter().map(|v| v * v).sum::<f64>();
        for k in 0..5 {
            let m = mask_variable(x.view(), k).unwrap();
            let changed = x.iter().zip(m.iter()).filter(|(a, b)| a != b).count();
            assert_eq!(changed, 8);
            let row_sq: f64 = x.row(k).iter().map(|v| v * v).sum();
            assert!((fro(&x) - fro(&m) - row_sq).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_range_index() {
        let x = Array2::<f32>::ones((3, 4));
        assert!(mask_variable(x.view(), 3).is_err());
        assert!(keep_only_variable(x.view(), 3).is_err());
    }

    proptest! {
        #[test]
        fn complementary_and_partition(
            k in 1usize..6,
            l in 1usize..9,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Array2::from_shape_fn((k, l), |_| rng.random_range(-1e3..1e3f32));
            let mut sum = Array2::<f32>::zeros((k, l));
            for v in 0..k {
                let kept = keep_only_variable(x.view(), v).unwrap();
                let masked = mask_variable(x.view(), v).unwrap();
                prop_assert_eq!(&(&masked + &kept), &x);
                prop_assert_eq!(&keep_only_variable(kept.view(), v).unwrap(), &kept);
                for j in 0..k {
                    if j != v {
                        prop_assert!(kept.row(j).iter().all(|&e| e == 0.0));
                    }
                }
                sum += &kept;
            }
            prop_assert_eq!(sum, x);
        }
    }
}
