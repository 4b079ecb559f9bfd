//! Multimodal fusion transformer for joint classification of hyperspectral
//! patches with a co-registered auxiliary raster (LiDAR, SAR, DSM, MSI) that
//! supplies the classification token.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{MftError, Result};
pub use model::{Mft, ModelConfig, TokenizerKind};
pub use rng::Rng;
pub use tape::{Tape, Var};
pub use tensor::{Real, Tensor};
