//! Parameters, layers and the optimizer used by every trainable network.

mod layers;
mod optim;
mod params;

pub use layers::{Conv, Linear, SelfAttention};
pub use optim::{Adam, AdamConfig};
pub use params::{checksum_hex, Ctx, FreezePlan, ParamGroup, ParamId, ParamInit, ParamStore};
