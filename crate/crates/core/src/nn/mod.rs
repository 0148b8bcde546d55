//! Minimal neural-network layers with hand-written backward passes.
//!
//! Activations of a batch of `N` sequences of length `L` are stored as a
//! `[channels, N*L]` matrix; sample `n` occupies columns `n*L..(n+1)*L`.
//! Vector activations (after pooling) are `[features, N]`.
//!
//! Every layer exposes `forward(..) -> (output, cache)` and
//! `backward(&cache, dout, &mut grad) -> dinput`, where `grad` is a layer of
//! the same type whose parameters accumulate gradients.

mod block;
mod conv;
mod layers;
mod optim;

pub use block::{BlockCache, ResidualBlock};
pub use conv::{Conv1d, ConvCache, Padding};
pub use layers::{
    global_avg_pool, global_avg_pool_backward, l2_normalize_columns, l2_normalize_columns_backward, relu,
    relu_backward, unflatten_sequence, unflatten_sequence_backward, BatchNorm1d, BatchNormCache, Dropout, Linear,
    PRelu,
};
pub use optim::{clip_global_norm, AmsGrad};

use ndarray::{Array1, Array2, NdFloat};
use num_traits::FromPrimitive;
use rand::Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating-point element type for parameters and activations.
pub trait Real: NdFloat + FromPrimitive + Serialize + DeserializeOwned + Default {}
impl Real for f32 {}
impl Real for f64 {}

#[inline]
pub fn cast<T: Real>(v: f64) -> T {
    T::from_f64(v).expect("representable float")
}

/// Anything with trainable parameters.
pub trait Params<T> {
    fn params(&self) -> Vec<&[T]>;
    fn params_mut(&mut self) -> Vec<&mut [T]>;

    fn zero(&mut self)
    where
        T: Real,
    {
        for p in self.params_mut() {
            p.fill(T::zero());
        }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

pub(crate) fn slice<T>(a: &Array2<T>) -> &[T] {
    a.as_slice().expect("parameters are contiguous")
}

pub(crate) fn slice_mut<T>(a: &mut Array2<T>) -> &mut [T] {
    a.as_slice_mut().expect("parameters are contiguous")
}

pub(crate) fn slice1<T>(a: &Array1<T>) -> &[T] {
    a.as_slice().expect("parameters are contiguous")
}

pub(crate) fn slice1_mut<T>(a: &mut Array1<T>) -> &mut [T] {
    a.as_slice_mut().expect("parameters are contiguous")
}

/// Kaiming-uniform style init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub(crate) fn uniform_init<T: Real, R: Rng + ?Sized>(shape: (usize, usize), fan_in: usize, rng: &mut R) -> Array2<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_simple_fn(shape, || cast(rng.random_range(-bound..bound)))
}
