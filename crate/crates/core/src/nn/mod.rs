//! Neural-network primitives with reverse-mode differentiation.
//!
//! Forward passes are recorded on a [`Tape`]; [`Tape::backward`] replays the
//! record in reverse and accumulates parameter gradients into a
//! [`ParamStore`].

pub mod embedding;
pub mod kernels;
pub mod layers;
mod params;
mod tape;

pub use embedding::{timestep_embedding, timestep_embedding_batch};
pub use layers::{AttentionBlock, Conv2d, GroupNorm, Linear};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{Tape, Var};

/// Group-norm epsilon used throughout the network.
pub const GROUP_NORM_EPS: f32 = 1e-5;

/// Default number of normalization groups. Narrower layers use one group per
/// channel; widths not divisible by it use the greatest common divisor.
pub const GROUP_NORM_GROUPS: usize = 8;

pub(crate) fn default_groups(channels: usize) -> usize {
    if channels < GROUP_NORM_GROUPS {
        return channels;
    }
    // largest count dividing both, so odd widths such as 12 still normalize
    let (mut a, mut b) = (channels, GROUP_NORM_GROUPS);
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}
