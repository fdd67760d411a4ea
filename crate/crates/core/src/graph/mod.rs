//! Graph IR, model (de)serialization, BN folding, quantizer placement and the
//! evaluation-mode executor.

pub mod exec;
pub mod fold;
mod format;
mod ir;
pub mod policy;

pub use exec::{evaluate, infer, infer_float, EvalOptions, Trace};
pub use fold::{fold_affine, fold_bn, inference_affine, to_inference_form};
pub use format::{apply_qparams, collect_qparams, load_model, load_qparams, save_model, save_qparams};
pub use ir::{BnAttrs, FakeQuantAttrs, FqRole, FusedBn, Graph, Kernel, LayerAttrs, Node, Op, MODEL_VERSION};
pub use policy::{insert_fake_quant, insert_fake_quant_with, scan_policy, PolicyScan};
