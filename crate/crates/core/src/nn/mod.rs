//! Parameters, layers and composite blocks.

mod blocks;
mod layers;
mod params;

pub use blocks::{ResidualBlock, SelfAttention, UpsampleBlock};
pub use layers::{glu, instance_norm, upsample_nearest, Conv2d, Dense, InstanceNorm, WEIGHT_STD};
pub(crate) use params::fnv1a;
pub use params::{Bound, Init, ParamId, ParamStore};
