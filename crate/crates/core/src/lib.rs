// `!(x > 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibration;
pub mod cli;
pub mod data;
pub mod error;
pub mod graph;
pub mod lowering;
pub mod models;
pub mod pipeline;
pub mod qat;
pub mod quantizer;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DType, IntTensor, Tensor};
