//! Episodic data model: image/mask pairs, fold partitioning, episode
//! sampling, augmentation, the on-disk dataset layout and the synthetic
//! shapes-with-distractors generator.

mod augment;
pub(crate) mod color;
mod folds;
mod sampler;
mod store;
mod synth;
mod types;

pub use augment::{augment, AugmentConfig};
pub use folds::{build_fold_splits, FoldSpec, Split};
pub use sampler::sample_episode;
pub use store::{Dataset, Sample};
pub use synth::{generate_synthetic_dataset, render_shape_crop, ShapeKind, SyntheticSpec, TextureKind};
pub use types::{Episode, ImageMaskPair};
