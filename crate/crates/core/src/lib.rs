//! Chest X-ray triage: tensors, layers, model families, data pipeline,
//! training and inference.

// `!(x > 0.0)` rejects NaN along with non-positive values; index loops
// follow the formulas they implement.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::type_complexity)]

pub mod data;
pub mod models;
pub mod nn;
pub mod predict;
pub mod tensor;
pub mod train;
pub mod verify;

pub use tensor::{Element, Tensor, TensorError};
