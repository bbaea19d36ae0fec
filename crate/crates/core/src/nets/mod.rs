//! Generator, encoder and discriminator.

mod discriminator;
mod encoder;
mod generator;
mod layers;
mod types;

pub use discriminator::Discriminator;
pub use encoder::Encoder;
pub use generator::{Generator, LayerHook, Mapping, Synthesis};
pub use layers::{EqualConv, EqualLinear, ModConv};
pub use types::{FeaturePyramid, ImageTensor, LatentCode, NetConfig, PyramidRole};
