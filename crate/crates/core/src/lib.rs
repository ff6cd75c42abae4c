//! IPMix augmentation: fractal mixing sets, image/patch/pixel-level
//! mixing, and the robustness and calibration
//! metrics used to evaluate models trained with it.
//!
//! The crate never sees labels: augmentation maps an image to an image.

pub mod bench;
pub mod dataset;
pub mod error;
pub mod fractal;
pub mod image;
pub mod metrics;
pub mod mixer;
pub mod ops;
pub mod pipeline;
pub mod rng;

pub use error::{Error, Result};
pub use fractal::{build_mixing_set, MixingSet};
pub use image::{blend_convex, decode, encode_png, ImageBuffer, MaskBuffer};
pub use mixer::{mix_in_region, MixOperator, MixRegion};
pub use ops::{apply_op, ImageOp, OpDraw};
pub use pipeline::{augment_batch, ipmix_augment, linear_mix_augment, mixed_input_augment, AugmentConfig, AugmentTrace, Augmenter, Framework};
pub use rng::SeededRng;
