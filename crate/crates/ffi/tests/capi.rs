use std::ffi::CStr;
use std::ptr;

use qlower::graph::save_model;
use qlower::models::{random_inputs, toy_cnn};
use qlower_ffi::*;

fn last_error() -> String {
    let p = qlower_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn load_toy() -> *mut QlowerModel {
    let json = save_model(&toy_cnn(3, 4).unwrap());
    let mut m = ptr::null_mut();
    let st = unsafe { qlower_model_load(json.as_ptr(), json.len(), &mut m) };
    assert_eq!(st, QlowerStatus::Ok);
    assert!(!m.is_null());
    m
}

#[test]
fn model_round_trip_and_integer_run() {
    let g = toy_cnn(3, 4).unwrap();
    let x = random_inputs(5, &g, 1, 2).batches.remove(0).input;
    let shape = x.shape().to_vec();
    let m = load_toy();

    let mut logits = [0f32; 8];
    let mut n = 0usize;
    let st = unsafe {
        qlower_model_infer(m, x.data().as_ptr(), shape.as_ptr(), shape.len(), logits.as_mut_ptr(), 8, &mut n)
    };
    assert_eq!(st, QlowerStatus::Ok);
    assert_eq!(n, 8);
    let want = qlower::graph::infer(&g, std::slice::from_ref(&x)).unwrap();
    assert_eq!(&logits[..], want[0].data());

    let mut prog = ptr::null_mut();
    let st = unsafe {
        qlower_model_quantize(m, c"trt".as_ptr(), x.data().as_ptr(), shape.as_ptr(), shape.len(), &mut prog)
    };
    assert_eq!(st, QlowerStatus::Ok, "{}", last_error());

    let mut q = [0f32; 8];
    let st = unsafe {
        qlower_program_run(prog, x.data().as_ptr(), shape.as_ptr(), shape.len(), q.as_mut_ptr(), 8, &mut n)
    };
    assert_eq!(st, QlowerStatus::Ok);
    let cos: f32 = {
        let dot: f32 = q.iter().zip(&logits).map(|(a, b)| a * b).sum();
        let na: f32 = q.iter().map(|a| a * a).sum::<f32>().sqrt();
        let nb: f32 = logits.iter().map(|a| a * a).sum::<f32>().sqrt();
        dot / (na * nb)
    };
    assert!(cos > 0.95, "cosine {cos}");

    // Serialize and reload; the reloaded program computes the same integers.
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { qlower_program_to_json(prog, &mut s) }, QlowerStatus::Ok);
    let text = unsafe { CStr::from_ptr(s) }.to_bytes().to_vec();
    let mut again = ptr::null_mut();
    assert_eq!(unsafe { qlower_program_load(text.as_ptr(), text.len(), &mut again) }, QlowerStatus::Ok, "{}", last_error());
    let mut q2 = [0f32; 8];
    unsafe {
        qlower_program_run(again, x.data().as_ptr(), shape.as_ptr(), shape.len(), q2.as_mut_ptr(), 8, &mut n);
        qlower_string_free(s);
        qlower_program_free(again);
        qlower_program_free(prog);
        qlower_model_free(m);
    }
    assert_eq!(q, q2);
}

#[test]
fn errors_are_reported_not_raised() {
    let mut m = ptr::null_mut();
    let junk = b"{\"version\": 1, \"nodes\": 3}";
    assert_eq!(unsafe { qlower_model_load(junk.as_ptr(), junk.len(), &mut m) }, QlowerStatus::Schema);
    assert!(m.is_null());
    assert!(last_error().contains("nodes"));

    assert_eq!(unsafe { qlower_model_load(ptr::null(), 0, &mut m) }, QlowerStatus::InvalidArgument);

    let model = load_toy();
    let x = [0f32; 64];
    let shape = [1usize, 1, 8, 8];
    let mut prog = ptr::null_mut();
    let st = unsafe { qlower_model_quantize(model, c"nope".as_ptr(), x.as_ptr(), shape.as_ptr(), 4, &mut prog) };
    assert_eq!(st, QlowerStatus::InvalidArgument);
    assert!(last_error().contains("nope"));

    let mut small = [0f32; 2];
    let mut n = 0;
    let st = unsafe { qlower_model_infer(model, x.as_ptr(), shape.as_ptr(), 4, small.as_mut_ptr(), 2, &mut n) };
    assert_eq!(st, QlowerStatus::BufferTooSmall);
    assert_eq!(n, 4);

    let bad_shape = [1usize, 3, 8, 8];
    let big = [0f32; 192];
    let mut out = [0f32; 4];
    let st = unsafe { qlower_model_infer(model, big.as_ptr(), bad_shape.as_ptr(), 4, out.as_mut_ptr(), 4, &mut n) };
    assert_ne!(st, QlowerStatus::Ok);
    unsafe { qlower_model_free(model) };

    assert_eq!(unsafe { qlower_program_to_json(ptr::null(), &mut ptr::null_mut()) }, QlowerStatus::InvalidArgument);
}

#[test]
fn success_clears_the_error_slot() {
    let mut m = ptr::null_mut();
    unsafe { qlower_model_load(ptr::null(), 0, &mut m) };
    assert!(!qlower_last_error().is_null());
    let model = load_toy();
    assert!(qlower_last_error().is_null());
    unsafe { qlower_model_free(model) };
    // Freeing null is a no-op.
    unsafe {
        qlower_model_free(ptr::null_mut());
        qlower_program_free(ptr::null_mut());
        qlower_string_free(ptr::null_mut());
    }
}

#[test]
fn version_matches_manifest() {
    let v = unsafe { CStr::from_ptr(qlower_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_the_abi() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/qlower.h")).unwrap();
    for sym in [
        "qlower_last_error",
        "qlower_model_load",
        "qlower_model_infer",
        "qlower_model_quantize",
        "qlower_program_run",
        "qlower_program_to_json",
        "qlower_string_free",
        "typedef struct QlowerModel QlowerModel",
        "QLOWER_STATUS_THRESHOLD = 6",
    ] {
        assert!(header.contains(sym), "header lacks `{sym}`");
    }
    // The header must also be valid C when a compiler is around.
    if let Ok(st) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-xc", "-std=c99", "-Wall", "-Werror"])
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include/qlower.h"))
        .status()
    {
        assert!(st.success());
    }
}
