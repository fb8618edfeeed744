//! The C interface exercised through its extern functions.

use std::ffi::{c_char, c_int, CStr, CString};
use std::ptr;

use grsio_ffi::*;

fn subspace(v: &[f64]) -> *mut GrsioSubspace {
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { grsio_subspace_new(v.as_ptr(), v.len(), &mut out) }, GRSIO_OK);
    assert!(!out.is_null());
    out
}

fn last_error() -> String {
    let len = unsafe { grsio_last_error(ptr::null_mut(), 0) };
    let mut buf = vec![0 as c_char; len as usize + 1];
    assert_eq!(unsafe { grsio_last_error(buf.as_mut_ptr(), buf.len()) }, len);
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap().to_owned()
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(grsio_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn subspace_roundtrip_and_distance() {
    let a = subspace(&[0.0, 0.0, 2.0]);
    let b = subspace(&[0.0, 1.0, 1.0]);
    assert_eq!(unsafe { grsio_subspace_dim(a) }, 3);
    let mut normal = [0.0; 3];
    assert_eq!(unsafe { grsio_subspace_normal(a, normal.as_mut_ptr(), 3) }, GRSIO_OK);
    assert_eq!(normal, [0.0, 0.0, 1.0]);
    let mut d = 0.0;
    assert_eq!(unsafe { grsio_dist(a, b, &mut d) }, GRSIO_OK);
    // |e₃ − (e₂+e₃)/√2|² = 2 − √2
    assert!((d - (2.0 - 2f64.sqrt()).sqrt()).abs() < 1e-15);
    let mut o = [0.0; 9];
    assert_eq!(unsafe { grsio_rotation_between(a, b, o.as_mut_ptr(), 9) }, GRSIO_OK);
    // O e₃ is the third column
    let s = 0.5f64.sqrt();
    assert!((o[2]).abs() < 1e-15 && (o[5] - s).abs() < 1e-15 && (o[8] - s).abs() < 1e-15);
    assert_eq!(unsafe { grsio_rotation_between(a, b, o.as_mut_ptr(), 8) }, GRSIO_ERR_BUFFER);
    unsafe {
        grsio_subspace_free(a);
        grsio_subspace_free(b);
        grsio_subspace_free(ptr::null_mut());
    }
}

#[test]
fn errors_carry_codes_and_messages() {
    let mut out = ptr::null_mut();
    let zero = [0.0, 0.0];
    assert_eq!(unsafe { grsio_subspace_new(zero.as_ptr(), 2, &mut out) }, GRSIO_ERR_INVALID_ARGUMENT);
    assert!(out.is_null());
    assert!(!last_error().is_empty());
    assert_eq!(unsafe { grsio_subspace_new(ptr::null(), 2, &mut out) }, GRSIO_ERR_NULL);
    assert_eq!(last_error(), "null input array");
    let a = subspace(&[0.0, 1.0]);
    let b = subspace(&[0.0, 0.0, 1.0]);
    let mut d = 0.0;
    assert_eq!(unsafe { grsio_dist(a, b, &mut d) }, GRSIO_ERR_DIMENSION);
    assert_eq!(unsafe { grsio_dist(a, ptr::null(), &mut d) }, GRSIO_ERR_NULL);
    let mut small = [0 as c_char; 2];
    assert_eq!(unsafe { grsio_last_error(small.as_mut_ptr(), 2) }, GRSIO_ERR_BUFFER);
    unsafe {
        grsio_subspace_free(a);
        grsio_subspace_free(b);
    }
}

#[test]
fn multiplier_evaluation() {
    let label = CString::new("constant_one").unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { grsio_multiplier_new(label.as_ptr(), 1, &mut m) }, GRSIO_OK);
    let s = subspace(&[0.0, 1.0]);
    let (mut re, mut im) = (0.0, 0.0);
    let eta = [0.3];
    assert_eq!(unsafe { grsio_multiplier_eval(m, s, eta.as_ptr(), 1, &mut re, &mut im) }, GRSIO_OK);
    assert_eq!((re, im), (1.0, 0.0));
    let eta2 = [0.3, 0.1];
    assert_eq!(unsafe { grsio_multiplier_eval(m, s, eta2.as_ptr(), 2, &mut re, &mut im) }, GRSIO_ERR_DIMENSION);
    let bad = CString::new("no_such_symbol").unwrap();
    let mut m2 = ptr::null_mut();
    assert_eq!(unsafe { grsio_multiplier_new(bad.as_ptr(), 1, &mut m2) }, GRSIO_ERR_UNKNOWN_LABEL);
    unsafe {
        grsio_multiplier_free(m);
        grsio_subspace_free(s);
    }
}

#[test]
fn run_command_through_config_handle() {
    let json = CString::new(r#"{"seed": 3, "geometry": {"pairs": 100, "derivative_samples": 4}}"#).unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { grsio_config_from_json(json.as_ptr(), &mut cfg) }, GRSIO_OK);
    let dir = tempfile::tempdir().unwrap();
    let out = CString::new(dir.path().to_str().unwrap()).unwrap();
    let cmd = CString::new("geometry_selftest").unwrap();
    let mut passed: c_int = -1;
    assert_eq!(unsafe { grsio_run(cmd.as_ptr(), cfg, out.as_ptr(), &mut passed) }, GRSIO_OK);
    assert_eq!(passed, 1);
    assert!(dir.path().join("report.json").exists());
    let unknown = CString::new("nope").unwrap();
    assert_eq!(unsafe { grsio_run(unknown.as_ptr(), cfg, out.as_ptr(), &mut passed) }, GRSIO_ERR_CONFIG);
    unsafe { grsio_config_free(cfg) };

    let bad = CString::new(r#"{"n": 3, "d": 1}"#).unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { grsio_config_from_json(bad.as_ptr(), &mut cfg) }, GRSIO_ERR_CONFIG);
    let junk = CString::new("{").unwrap();
    assert_eq!(unsafe { grsio_config_from_json(junk.as_ptr(), &mut cfg) }, GRSIO_ERR_CONFIG);
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/grsio.h")).unwrap();
    for f in [
        "grsio_version",
        "grsio_last_error",
        "grsio_subspace_new",
        "grsio_subspace_free",
        "grsio_subspace_dim",
        "grsio_subspace_normal",
        "grsio_dist",
        "grsio_rotation_between",
        "grsio_multiplier_new",
        "grsio_multiplier_free",
        "grsio_multiplier_eval",
        "grsio_config_from_json",
        "grsio_config_free",
        "grsio_run",
    ] {
        assert!(header.contains(&format!("{f}(")), "{f} missing from grsio.h");
    }
    assert!(header.contains("typedef struct GrsioSubspace GrsioSubspace;"));
    assert!(header.contains("#define GRSIO_ERR_PANIC -14"));
}
