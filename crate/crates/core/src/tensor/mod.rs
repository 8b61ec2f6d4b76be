//! Minimal reverse-mode tensor engine.

pub mod adam;
pub mod array;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub(crate) mod kernels;
pub mod loss;
pub mod params;

pub use adam::{Adam, AdamConfig};
pub use array::{Shape, Tensor};
pub use checkpoint::{Checkpoint, Record};
pub use graph::{Axis, BinaryKind, CustomOp, Graph, UnaryKind, Upsample, Var};
pub use loss::soft_iou_loss;
pub use params::{BatchNorm, BnState, Conv2d, Init, ParamId, ParamStore};
