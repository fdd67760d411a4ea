//! C ABI over the qlower pipeline.
//!
//! Models and lowered programs are opaque heap handles. Every fallible call
//! returns a [`QlowerStatus`]; the message of the most recent failure on the
//! calling thread is available from [`qlower_last_error`]. Panics never cross
//! the boundary.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use qlower::calibration::CalibConfig;
use qlower::data::Dataset;
use qlower::graph::{infer, load_model, Graph};
use qlower::lowering::{lower, run_int, QuantizedGraph};
use qlower::pipeline::Prepare;
use qlower::quantizer::backend_preset;
use qlower::{Error, Tensor};

/// Result of every fallible call. Values 2-6 match the command-line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QlowerStatus {
    Ok = 0,
    InvalidArgument = 1,
    MissingInput = 2,
    EmptyDataset = 3,
    Uncalibrated = 4,
    Numeric = 5,
    Threshold = 6,
    /// Malformed JSON or a schema violation.
    Schema = 7,
    /// Output buffer too small; the required length is still reported.
    BufferTooSmall = 8,
    Panic = 9,
}

/// Opaque FP32 model.
pub struct QlowerModel {
    graph: Graph,
}

/// Opaque lowered integer program.
pub struct QlowerProgram {
    program: QuantizedGraph,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> QlowerStatus {
    match e {
        Error::Schema { .. } | Error::Json(_) => QlowerStatus::Schema,
        _ => match e.exit_code() {
            2 => QlowerStatus::MissingInput,
            3 => QlowerStatus::EmptyDataset,
            4 => QlowerStatus::Uncalibrated,
            5 => QlowerStatus::Numeric,
            6 => QlowerStatus::Threshold,
            _ => QlowerStatus::InvalidArgument,
        },
    }
}

enum Fail {
    Lib(Error),
    Status(QlowerStatus, String),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn invalid(msg: &str) -> Fail {
    Fail::Status(QlowerStatus::InvalidArgument, msg.to_string())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> QlowerStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            QlowerStatus::Ok
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Fail::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            QlowerStatus::Panic
        }
    }
}

unsafe fn bytes<'a>(data: *const u8, len: usize) -> Result<&'a [u8], Fail> {
    if data.is_null() {
        return Err(invalid("null buffer"));
    }
    Ok(slice::from_raw_parts(data, len))
}

unsafe fn tensor(data: *const f32, shape: *const usize, rank: usize) -> Result<Tensor, Fail> {
    if data.is_null() || shape.is_null() {
        return Err(invalid("null tensor pointer"));
    }
    let shape = slice::from_raw_parts(shape, rank).to_vec();
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| invalid("tensor shape overflows"))?;
    Ok(Tensor::new(shape, slice::from_raw_parts(data, n).to_vec())?)
}

unsafe fn write_out(values: &[f32], out: *mut f32, out_len: usize, written: *mut usize) -> Result<(), Fail> {
    if !written.is_null() {
        *written = values.len();
    }
    if values.len() > out_len {
        return Err(Fail::Status(
            QlowerStatus::BufferTooSmall,
            format!("output needs {} elements, buffer holds {out_len}", values.len()),
        ));
    }
    if out.is_null() {
        return Err(invalid("null output buffer"));
    }
    ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
    Ok(())
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn qlower_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static, nul-terminated library version.
#[no_mangle]
pub extern "C" fn qlower_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parses a model JSON document of `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn qlower_model_load(json: *const u8, len: usize, out: *mut *mut QlowerModel) -> QlowerStatus {
    guard(|| {
        if out.is_null() {
            return Err(invalid("null output handle"));
        }
        let graph = load_model(bytes(json, len)?)?;
        *out = Box::into_raw(Box::new(QlowerModel { graph }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn qlower_model_free(model: *mut QlowerModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// FP32 (or embedded fake-quant) inference; writes the first graph output.
#[no_mangle]
pub unsafe extern "C" fn qlower_model_infer(
    model: *const QlowerModel,
    input: *const f32,
    shape: *const usize,
    rank: usize,
    out: *mut f32,
    out_len: usize,
    written: *mut usize,
) -> QlowerStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| invalid("null model"))?;
        let x = tensor(input, shape, rank)?;
        let ys = infer(&m.graph, &[x])?;
        let y = ys.first().ok_or_else(|| invalid("model has no outputs"))?;
        write_out(y.data(), out, out_len, written)
    })
}

/// Folds, inserts quantizers for `preset`, calibrates with MinMax on one
/// batch and lowers to an integer program.
#[no_mangle]
pub unsafe extern "C" fn qlower_model_quantize(
    model: *const QlowerModel,
    preset: *const c_char,
    calib: *const f32,
    shape: *const usize,
    rank: usize,
    out: *mut *mut QlowerProgram,
) -> QlowerStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| invalid("null model"))?;
        if preset.is_null() || out.is_null() {
            return Err(invalid("null preset or output handle"));
        }
        let name = CStr::from_ptr(preset).to_str().map_err(|_| invalid("preset is not UTF-8"))?;
        let x = tensor(calib, shape, rank)?;
        let prep = Prepare::new(backend_preset(name)?);
        let fq = prep.calibrated(&m.graph, &Dataset::from_inputs(vec![x]), &CalibConfig::default())?;
        let program = lower(&fq)?;
        *out = Box::into_raw(Box::new(QlowerProgram { program }));
        Ok(())
    })
}

/// Parses a lowered program JSON document.
#[no_mangle]
pub unsafe extern "C" fn qlower_program_load(
    json: *const u8,
    len: usize,
    out: *mut *mut QlowerProgram,
) -> QlowerStatus {
    guard(|| {
        if out.is_null() {
            return Err(invalid("null output handle"));
        }
        let program = QuantizedGraph::from_json(bytes(json, len)?)?;
        *out = Box::into_raw(Box::new(QlowerProgram { program }));
        Ok(())
    })
}

/// Serializes a program. The string is released with [`qlower_string_free`].
#[no_mangle]
pub unsafe extern "C" fn qlower_program_to_json(program: *const QlowerProgram, out: *mut *mut c_char) -> QlowerStatus {
    guard(|| {
        let p = program.as_ref().ok_or_else(|| invalid("null program"))?;
        if out.is_null() {
            return Err(invalid("null output pointer"));
        }
        let json = CString::new(p.program.to_json()).map_err(|_| invalid("program JSON holds a nul byte"))?;
        *out = json.into_raw();
        Ok(())
    })
}

/// Integer-only execution; writes the dequantized first output.
#[no_mangle]
pub unsafe extern "C" fn qlower_program_run(
    program: *const QlowerProgram,
    input: *const f32,
    shape: *const usize,
    rank: usize,
    out: *mut f32,
    out_len: usize,
    written: *mut usize,
) -> QlowerStatus {
    guard(|| {
        let p = program.as_ref().ok_or_else(|| invalid("null program"))?;
        let x = tensor(input, shape, rank)?;
        let ys = run_int(&p.program, &[x])?;
        let y = ys.first().ok_or_else(|| invalid("program has no outputs"))?;
        write_out(y.dequantized.data(), out, out_len, written)
    })
}

#[no_mangle]
pub unsafe extern "C" fn qlower_program_free(program: *mut QlowerProgram) {
    if !program.is_null() {
        drop(Box::from_raw(program));
    }
}

#[no_mangle]
pub unsafe extern "C" fn qlower_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
