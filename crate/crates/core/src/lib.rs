//! Open-set multivariate time-series anomaly detection.
//!
//! A shared temporal-convolutional feature extractor feeds three heads:
//! a generative head trained by masked reconstruction on normal windows, a
//! discriminative head trained by deviation learning against a Gaussian
//! prior, and an anomaly-aware contrastive head whose anchors and positives
//! are normal windows only. Test windows are scored by summing the three
//! head scores and evaluated with threshold-free metrics (AUC, APR), split
//! by seen and unseen anomaly classes.
//!
//! The crate is organised bottom-up:
//!
//! * [`data`]: windows, datasets, manifests, open-set settings, masking,
//!   mini-batches and a deterministic synthetic generator.
//! * [`augment`]: contextual outlier exposure and window mixup.
//! * [`nn`]: the small set of differentiable layers the model needs.
//! * [`model`]: encoder, decoder, deviation network and projection head.
//! * [`heads`]: head subsets used as training and score masks.
//! * [`losses`]: the three head losses, with analytic gradients.
//! * [`trainer`]: joint optimisation, early stopping, checkpoints.
//! * [`scoring`]: per-head and combined anomaly scores.
//! * [`eval`]: AUC / APR and seen / unseen breakdowns.
//! * [`experiment`]: end-to-end runs, ablation matrices and sweeps.

pub mod augment;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod heads;
pub mod losses;
pub mod model;
pub mod nn;
pub mod plot;
pub mod scoring;
pub mod trainer;

pub use error::{Error, Result, StageExt};
pub use heads::Heads;
