//! Data model, manifests, open-set settings, masking and batching.

mod batch;
mod dataset;
mod manifest;
mod masking;
mod setting;
pub mod synth;
mod window;

pub use batch::{assemble_batch, make_minibatch, BatchQuotas};
pub use dataset::{ChannelStats, OpenSetDataset, Setting};
pub use manifest::{load_dataset, write_dataset, DatasetManifest, ManifestSample, Split};
pub use masking::{keep_only_variable, mask_variable};
pub use setting::{build_setting, default_eta_per_class};
pub use synth::{generate_synthetic_dataset, generate_to_dir, GeneratorConfig};
pub use window::{SampleWindow, COE_TAG, NORMAL_TAG, WMIX_TAG};
