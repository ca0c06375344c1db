//! Minimal dense numerics.

pub mod adam;
pub mod gradcheck;
pub mod matrix;
pub mod mlp;
pub mod params;
pub mod rng;

pub use adam::AdamState;
pub use gradcheck::{finite_difference_check, finite_difference_check_at};
pub use matrix::Matrix;
pub use mlp::{Activation, Mlp, MlpGrads, Tape};
pub use params::{BlockMut, BlockRef, ParamBlocks};
pub use rng::RngStream;
