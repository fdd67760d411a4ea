#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qlower::data::{save_dataset, Dataset};
use qlower::graph::{save_model, Graph};

pub fn write_model(dir: &Path, name: &str, g: &Graph) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, save_model(g)).unwrap();
    p
}

pub fn write_dataset(dir: &Path, name: &str, ds: &Dataset) -> PathBuf {
    let p = dir.join(name);
    std::fs::create_dir_all(&p).unwrap();
    save_dataset(&p, ds).unwrap();
    p
}

pub fn qlower<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    Command::new(env!("CARGO_BIN_EXE_qlower"))
        .args(args)
        .env("QLOWER_LOG", "error")
        .output()
        .expect("spawn qlower")
}

pub fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

/// Half-to-even rounding written out by hand.
pub fn round_half_even(v: f32) -> f32 {
    let f = v.floor();
    let d = v - f;
    if d > 0.5 || (d == 0.5 && f % 2.0 != 0.0) {
        f + 1.0
    } else {
        f
    }
}

pub fn round_half_even_f64(v: f64) -> f64 {
    let f = v.floor();
    let d = v - f;
    if d > 0.5 || (d == 0.5 && f % 2.0 != 0.0) {
        f + 1.0
    } else {
        f
    }
}

/// Scalar quantizer oracle: `clip(round(x/s) + z, qmin, qmax)`.
pub fn oracle_quantize(x: f32, s: f32, z: i32, qmin: i32, qmax: i32) -> i32 {
    let r = round_half_even(x / s) + z as f32;
    if r < qmin as f32 {
        qmin
    } else if r > qmax as f32 {
        qmax
    } else {
        r as i32
    }
}

/// Scale and zero-point for a clip range, straight from the range formulas.
pub fn oracle_range_qparams(symmetric: bool, qmin: i32, qmax: i32, lo: f32, hi: f32) -> (f32, i32) {
    let levels = (qmax - qmin) as f32;
    if symmetric {
        let amax = lo.abs().max(hi.abs());
        let denom = if qmin < 0 { levels / 2.0 } else { levels };
        ((amax / denom).max(1e-8), 0)
    } else {
        let (l, h) = (lo.min(0.0), hi.max(0.0));
        let s = ((h - l) / levels).max(1e-8);
        let z = round_half_even(qmin as f32 - l / s).clamp(qmin as f32, qmax as f32) as i32;
        (s, z)
    }
}
