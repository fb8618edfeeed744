//! C interface to `grsio`.
//!
//! Objects cross the boundary as opaque handles created by a `*_new`
//! function and released by the matching `*_free`. Every fallible function
//! returns `GRSIO_OK` (0) or a negative error code and writes its result
//! through an out-pointer. The message of the last error on the calling
//! thread is available from [`grsio_last_error`]. Panics never cross the
//! boundary; they are reported as `GRSIO_ERR_PANIC`.
//!
//! # Safety
//!
//! Pointers must be null or valid for the documented length. Handles must
//! come from this library and must not be used after they are freed.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use grsio::error::Error;
use grsio::grassmann::{dist, rotation_between, Subspace};
use grsio::harness::{run, Command, ExperimentConfig};
use grsio::multipliers::{builtin, MultiplierFamily};

pub const GRSIO_OK: c_int = 0;
pub const GRSIO_ERR_DIMENSION: c_int = -1;
pub const GRSIO_ERR_DEGENERATE: c_int = -2;
pub const GRSIO_ERR_INVALID_ARGUMENT: c_int = -3;
pub const GRSIO_ERR_NON_FINITE: c_int = -4;
pub const GRSIO_ERR_UNKNOWN_LABEL: c_int = -5;
pub const GRSIO_ERR_PRECONDITION: c_int = -6;
pub const GRSIO_ERR_CONFIG: c_int = -7;
pub const GRSIO_ERR_IO: c_int = -8;
pub const GRSIO_ERR_JSON: c_int = -9;
pub const GRSIO_ERR_CSV: c_int = -10;
pub const GRSIO_ERR_NULL: c_int = -11;
pub const GRSIO_ERR_UTF8: c_int = -12;
pub const GRSIO_ERR_BUFFER: c_int = -13;
pub const GRSIO_ERR_PANIC: c_int = -14;

/// An oriented hyperplane, stored by its unit normal.
pub struct GrsioSubspace(Subspace);

/// A multiplier family `σ ↦ m_σ`.
pub struct GrsioMultiplier(MultiplierFamily);

/// A resolved experiment configuration.
pub struct GrsioConfig(ExperimentConfig);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn fail(code: c_int, msg: impl Into<String>) -> c_int {
    set_error(msg.into());
    code
}

fn from_error(e: Error) -> c_int {
    let code = e.code();
    fail(code, e.to_string())
}

/// Runs `f`, turning errors and panics into codes.
fn guard(f: impl FnOnce() -> Result<(), c_int>) -> c_int {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GRSIO_OK,
        Ok(Err(code)) => code,
        Err(_) => fail(GRSIO_ERR_PANIC, "internal panic"),
    }
}

unsafe fn slice_in<'a>(p: *const f64, len: usize) -> Result<&'a [f64], c_int> {
    if p.is_null() {
        return Err(fail(GRSIO_ERR_NULL, "null input array"));
    }
    // SAFETY: the caller guarantees `len` readable values at `p`.
    Ok(unsafe { slice::from_raw_parts(p, len) })
}

unsafe fn str_in<'a>(p: *const c_char) -> Result<&'a str, c_int> {
    if p.is_null() {
        return Err(fail(GRSIO_ERR_NULL, "null string"));
    }
    // SAFETY: the caller guarantees a NUL-terminated string.
    unsafe { CStr::from_ptr(p) }.to_str().map_err(|_| fail(GRSIO_ERR_UTF8, "string is not UTF-8"))
}

unsafe fn handle<'a, T>(p: *const T) -> Result<&'a T, c_int> {
    // SAFETY: non-null handles come from `Box::into_raw` in this crate.
    unsafe { p.as_ref() }.ok_or_else(|| fail(GRSIO_ERR_NULL, "null handle"))
}

unsafe fn write_out<T>(p: *mut T, v: T) -> Result<(), c_int> {
    if p.is_null() {
        return Err(fail(GRSIO_ERR_NULL, "null output pointer"));
    }
    // SAFETY: checked non-null; the caller guarantees it is writable.
    unsafe { p.write(v) };
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn grsio_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the last error message of this thread into `buf` (NUL-terminated).
/// Returns the message length without the terminator, or `GRSIO_ERR_BUFFER`
/// if `cap` is too small; `buf` may be null to query the length.
///
/// # Safety
/// `buf` must be null or writable for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn grsio_last_error(buf: *mut c_char, cap: usize) -> c_int {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if buf.is_null() {
            return bytes.len() as c_int;
        }
        if cap < bytes.len() + 1 {
            return GRSIO_ERR_BUFFER;
        }
        // SAFETY: `buf` has room for the message and its terminator.
        unsafe {
            ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast(), bytes.len());
            *buf.add(bytes.len()) = 0;
        }
        bytes.len() as c_int
    })
}

/// Hyperplane with the given normal in `ℝⁿ`, `n = len`.
///
/// # Safety
/// `normal` must hold `len` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn grsio_subspace_new(normal: *const f64, len: usize, out: *mut *mut GrsioSubspace) -> c_int {
    guard(|| {
        let v = unsafe { slice_in(normal, len) }?;
        let s = Subspace::new(v).map_err(from_error)?;
        unsafe { write_out(out, Box::into_raw(Box::new(GrsioSubspace(s)))) }
    })
}

/// # Safety
/// `s` must be null or a live handle from [`grsio_subspace_new`].
#[no_mangle]
pub unsafe extern "C" fn grsio_subspace_free(s: *mut GrsioSubspace) {
    if !s.is_null() {
        // SAFETY: created by `Box::into_raw` and not yet freed.
        drop(unsafe { Box::from_raw(s) });
    }
}

/// Ambient dimension `n`, or 0 for a null handle.
///
/// # Safety
/// `s` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn grsio_subspace_dim(s: *const GrsioSubspace) -> usize {
    unsafe { s.as_ref() }.map_or(0, |s| s.0.n())
}

/// Copies the unit normal into `out` (`cap ≥ n`).
///
/// # Safety
/// `s` must be a live handle; `out` writable for `cap` values.
#[no_mangle]
pub unsafe extern "C" fn grsio_subspace_normal(s: *const GrsioSubspace, out: *mut f64, cap: usize) -> c_int {
    guard(|| {
        let s = unsafe { handle(s) }?;
        let v = s.0.normal();
        if out.is_null() {
            return Err(fail(GRSIO_ERR_NULL, "null output array"));
        }
        if cap < v.len() {
            return Err(fail(GRSIO_ERR_BUFFER, format!("need {} values", v.len())));
        }
        // SAFETY: `out` has room for `v.len()` values.
        unsafe { ptr::copy_nonoverlapping(v.as_ptr(), out, v.len()) };
        Ok(())
    })
}

/// `dist(σ, τ) = |v_σ − v_τ|`.
///
/// # Safety
/// Both handles must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn grsio_dist(a: *const GrsioSubspace, b: *const GrsioSubspace, out: *mut f64) -> c_int {
    guard(|| {
        let (a, b) = unsafe { (handle(a)?, handle(b)?) };
        let d = dist(&a.0, &b.0).map_err(from_error)?;
        unsafe { write_out(out, d) }
    })
}

/// The rotation `O_{σ,τ}` as an `n × n` row-major matrix in `out` (`cap ≥ n²`).
///
/// # Safety
/// Both handles must be live; `out` writable for `cap` values.
#[no_mangle]
pub unsafe extern "C" fn grsio_rotation_between(
    a: *const GrsioSubspace,
    b: *const GrsioSubspace,
    out: *mut f64,
    cap: usize,
) -> c_int {
    guard(|| {
        let (a, b) = unsafe { (handle(a)?, handle(b)?) };
        let o = rotation_between(&a.0, &b.0).map_err(from_error)?;
        let m = o.matrix();
        let n = m.nrows();
        if out.is_null() {
            return Err(fail(GRSIO_ERR_NULL, "null output array"));
        }
        if cap < n * n {
            return Err(fail(GRSIO_ERR_BUFFER, format!("need {} values", n * n)));
        }
        for i in 0..n {
            for j in 0..n {
                // SAFETY: index below `n² ≤ cap`.
                unsafe { *out.add(i * n + j) = m[(i, j)] };
            }
        }
        Ok(())
    })
}

/// Built-in multiplier family by label, e.g. `"hilbert_smoothed(0.05)"`, on `ℝ^d`.
///
/// # Safety
/// `label` must be a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn grsio_multiplier_new(label: *const c_char, d: usize, out: *mut *mut GrsioMultiplier) -> c_int {
    guard(|| {
        let label = unsafe { str_in(label) }?;
        let m = builtin(label, d).map_err(from_error)?;
        unsafe { write_out(out, Box::into_raw(Box::new(GrsioMultiplier(m)))) }
    })
}

/// # Safety
/// `m` must be null or a live handle from [`grsio_multiplier_new`].
#[no_mangle]
pub unsafe extern "C" fn grsio_multiplier_free(m: *mut GrsioMultiplier) {
    if !m.is_null() {
        // SAFETY: created by `Box::into_raw` and not yet freed.
        drop(unsafe { Box::from_raw(m) });
    }
}

/// `m_σ(η)` for `η ∈ ℝ^d`, written as real and imaginary parts.
///
/// # Safety
/// Handles must be live; `eta` must hold `len` values; outputs writable.
#[no_mangle]
pub unsafe extern "C" fn grsio_multiplier_eval(
    m: *const GrsioMultiplier,
    sigma: *const GrsioSubspace,
    eta: *const f64,
    len: usize,
    re: *mut f64,
    im: *mut f64,
) -> c_int {
    guard(|| {
        let (m, s) = unsafe { (handle(m)?, handle(sigma)?) };
        let eta = unsafe { slice_in(eta, len) }?;
        if len != m.0.d() || s.0.n() != m.0.d() + 1 {
            return Err(from_error(Error::DimensionMismatch { expected: m.0.d(), got: len }));
        }
        let v = m.0.eval(&s.0, eta);
        unsafe { write_out(re, v.re)? };
        unsafe { write_out(im, v.im) }
    })
}

/// Parses and validates a JSON experiment config.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn grsio_config_from_json(json: *const c_char, out: *mut *mut GrsioConfig) -> c_int {
    guard(|| {
        let text = unsafe { str_in(json) }?;
        let mut cfg = ExperimentConfig::from_json(text).map_err(from_error)?;
        cfg.resolve().map_err(from_error)?;
        unsafe { write_out(out, Box::into_raw(Box::new(GrsioConfig(cfg)))) }
    })
}

/// # Safety
/// `c` must be null or a live handle from [`grsio_config_from_json`].
#[no_mangle]
pub unsafe extern "C" fn grsio_config_free(c: *mut GrsioConfig) {
    if !c.is_null() {
        // SAFETY: created by `Box::into_raw` and not yet freed.
        drop(unsafe { Box::from_raw(c) });
    }
}

/// Runs the named command (e.g. `"geometry_selftest"`) with outputs in `out_dir`.
/// `passed` receives 1 when every check passed and 0 otherwise.
///
/// # Safety
/// `c` must be live; strings NUL-terminated; `passed` writable.
#[no_mangle]
pub unsafe extern "C" fn grsio_run(
    command: *const c_char,
    c: *const GrsioConfig,
    out_dir: *const c_char,
    passed: *mut c_int,
) -> c_int {
    guard(|| {
        let name = unsafe { str_in(command) }?;
        let cfg = unsafe { handle(c) }?;
        let dir = unsafe { str_in(out_dir) }?;
        let cmd = Command::parse(name).map_err(from_error)?;
        let mut cfg = cfg.0.clone();
        cfg.out = PathBuf::from(dir);
        let report = run(cmd, &cfg).map_err(from_error)?;
        unsafe { write_out(passed, c_int::from(report.passed)) }
    })
}
