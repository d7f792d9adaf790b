//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Values are 2D row-major matrices recorded on a [`Tape`]. Point-set
//! batches are stacked along rows in fixed-length segments, and the set of
//! operations covers what point/voxel networks need: dense algebra,
//! segment pooling, row gathers and scatters, sparse 3×3×3 voxel
//! convolution, trilinear gathers, inverse-distance interpolation and
//! segment-local self-attention.

pub mod check;
pub mod nn;
pub mod params;
mod tape;
pub mod voxel;

pub use nn::Linear;
pub use params::{Adam, ParamError, ParamId, ParamStore};
pub use tape::{Gradients, Mat, Tape, Var};
pub use voxel::{ConvPlan, TrilinearCache, VoxelFrame};
