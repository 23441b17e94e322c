//! C ABI for the pooled-histogram decoder and its state-evolution tooling.
//!
//! Conventions:
//!
//! - instances travel behind the opaque [`HqpInstanceHandle`]; free them with
//!   [`hqp_instance_free`];
//! - every function returns an [`HqpStatus`]; on failure a human-readable
//!   message is retrievable with [`hqp_last_error_message`] (thread-local,
//!   valid until the next failing call on the same thread);
//! - strings returned by the library are released with [`hqp_string_free`];
//! - matrices cross the boundary as row-major `double` buffers allocated by
//!   the caller.
//!
//! The header `include/hqp.h` is generated by `cbindgen` at build time.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use hqp_core::amp::{amp_decode, rbp_decode, AmpConfig};
use hqp_core::model::{generate_instance, Composition, HqpInstance};
use hqp_core::numerics::{ExpectationEngine, SupSearchConfig};
use hqp_core::se::{se_iterate, SEConfig, SEMatrix};
use hqp_core::thresholds::{
    default_scalar_engine, kappa_binary, kappa_matching, kappa_sym, scalar_se, ScalarMap,
};
use hqp_core::Error;

/// Status codes returned by every library call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HqpStatus {
    HqpOk = 0,
    HqpInvalidArgument = 1,
    HqpRuntimeError = 2,
    HqpNullPointer = 3,
    HqpPanic = 4,
}

/// Opaque instance handle.
pub struct HqpInstanceHandle {
    inner: HqpInstance,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', "?")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> HqpStatus {
    match err {
        Error::InvalidParam(_) | Error::Json(_) | Error::MalformedBinary(_) => {
            HqpStatus::HqpInvalidArgument
        }
        _ => HqpStatus::HqpRuntimeError,
    }
}

/// Run a fallible body, translating errors and panics into status codes.
fn guarded(f: impl FnOnce() -> Result<(), (HqpStatus, String)>) -> HqpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => HqpStatus::HqpOk,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            HqpStatus::HqpPanic
        }
    }
}

fn core_err(e: Error) -> (HqpStatus, String) {
    (status_of(&e), e.to_string())
}

fn null_err(what: &str) -> (HqpStatus, String) {
    (HqpStatus::HqpNullPointer, format!("{what} is null"))
}

/// Message for the most recent failure on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn hqp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| {
        e.borrow()
            .as_ref()
            .map(|c| c.as_ptr())
            .unwrap_or(ptr::null())
    })
}

/// Release a string allocated by this library.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn hqp_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

unsafe fn pi_from_raw(pi: *const f64, d: usize) -> Vec<f64> {
    if pi.is_null() {
        vec![1.0 / d as f64; d]
    } else {
        std::slice::from_raw_parts(pi, d).to_vec()
    }
}

/// Generate an instance. `pi` may be null for uniform proportions;
/// `exact_composition != 0` selects largest-remainder composition.
///
/// # Safety
/// `pi` must be null or point to `d` doubles; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hqp_instance_generate(
    n: u64,
    d: u64,
    m: u64,
    alpha: f64,
    pi: *const f64,
    seed: u64,
    exact_composition: i32,
    out: *mut *mut HqpInstanceHandle,
) -> HqpStatus {
    guarded(|| {
        if out.is_null() {
            return Err(null_err("out"));
        }
        let pi = pi_from_raw(pi, d as usize);
        let composition = if exact_composition != 0 {
            Composition::Exact
        } else {
            Composition::Iid
        };
        let inst = generate_instance(
            n as usize,
            d as usize,
            m as usize,
            alpha,
            &pi,
            seed,
            composition,
        )
        .map_err(core_err)?;
        *out = Box::into_raw(Box::new(HqpInstanceHandle { inner: inst }));
        Ok(())
    })
}

/// Parse an instance from its JSON document.
///
/// # Safety
/// `json` must be a valid NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn hqp_instance_from_json(
    json: *const c_char,
    out: *mut *mut HqpInstanceHandle,
) -> HqpStatus {
    guarded(|| {
        if json.is_null() || out.is_null() {
            return Err(null_err("json/out"));
        }
        let text = CStr::from_ptr(json)
            .to_str()
            .map_err(|_| (HqpStatus::HqpInvalidArgument, "json is not UTF-8".into()))?;
        let inst = HqpInstance::from_json(text).map_err(core_err)?;
        *out = Box::into_raw(Box::new(HqpInstanceHandle { inner: inst }));
        Ok(())
    })
}

/// Serialize an instance to its JSON document (release with
/// [`hqp_string_free`]).
///
/// # Safety
/// `handle` must be a live handle from this library; `out_json` valid.
#[no_mangle]
pub unsafe extern "C" fn hqp_instance_to_json(
    handle: *const HqpInstanceHandle,
    out_json: *mut *mut c_char,
) -> HqpStatus {
    guarded(|| {
        let handle = handle.as_ref().ok_or_else(|| null_err("handle"))?;
        if out_json.is_null() {
            return Err(null_err("out_json"));
        }
        let text = handle.inner.to_json().map_err(core_err)?;
        let c =
            CString::new(text).map_err(|_| (HqpStatus::HqpRuntimeError, "interior NUL".into()))?;
        *out_json = c.into_raw();
        Ok(())
    })
}

/// Instance shape accessors; any output pointer may be null.
///
/// # Safety
/// `handle` must be a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn hqp_instance_shape(
    handle: *const HqpInstanceHandle,
    out_n: *mut u64,
    out_d: *mut u64,
    out_m: *mut u64,
) -> HqpStatus {
    guarded(|| {
        let handle = handle.as_ref().ok_or_else(|| null_err("handle"))?;
        if !out_n.is_null() {
            *out_n = handle.inner.n as u64;
        }
        if !out_d.is_null() {
            *out_d = handle.inner.d as u64;
        }
        if !out_m.is_null() {
            *out_m = handle.inner.m as u64;
        }
        Ok(())
    })
}

/// Planted categories, written into a caller buffer of length `n`.
///
/// # Safety
/// `out_planted` must point to `n` writable `uint32` slots.
#[no_mangle]
pub unsafe extern "C" fn hqp_instance_planted(
    handle: *const HqpInstanceHandle,
    out_planted: *mut u32,
) -> HqpStatus {
    guarded(|| {
        let handle = handle.as_ref().ok_or_else(|| null_err("handle"))?;
        if out_planted.is_null() {
            return Err(null_err("out_planted"));
        }
        let dst = std::slice::from_raw_parts_mut(out_planted, handle.inner.n);
        for (d, &s) in dst.iter_mut().zip(&handle.inner.planted) {
            *d = s as u32;
        }
        Ok(())
    })
}

/// Destroy an instance handle (null is a no-op).
///
/// # Safety
/// `handle` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn hqp_instance_free(handle: *mut HqpInstanceHandle) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Result block of a decode run.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct HqpDecodeResult {
    pub iterations: u64,
    pub converged: i32,
    pub mse: f64,
    pub zero_one: f64,
}

/// Decode with approximate message passing. `out_marginals` may be null or
/// point to `n * d` doubles (row-major); `out_hard` may be null or point to
/// `n` `uint32` slots.
///
/// # Safety
/// Pointer arguments must satisfy the stated shapes.
#[no_mangle]
pub unsafe extern "C" fn hqp_amp_decode(
    handle: *const HqpInstanceHandle,
    max_iter: u64,
    conv_tol: f64,
    damping: f64,
    out_marginals: *mut f64,
    out_hard: *mut u32,
    out_result: *mut HqpDecodeResult,
) -> HqpStatus {
    guarded(|| {
        let handle = handle.as_ref().ok_or_else(|| null_err("handle"))?;
        let cfg = AmpConfig {
            max_iter: max_iter as usize,
            conv_tol,
            damping,
            ..Default::default()
        };
        let res = amp_decode(&handle.inner, &cfg).map_err(core_err)?;
        let (n, d) = (handle.inner.n, handle.inner.d);
        if !out_marginals.is_null() {
            let dst = std::slice::from_raw_parts_mut(out_marginals, n * d);
            for i in 0..n {
                for r in 0..d {
                    dst[i * d + r] = res.marginals[(i, r)];
                }
            }
        }
        if !out_hard.is_null() {
            let dst = std::slice::from_raw_parts_mut(out_hard, n);
            for (dsti, &h) in dst.iter_mut().zip(&res.hard) {
                *dsti = h as u32;
            }
        }
        if !out_result.is_null() {
            *out_result = HqpDecodeResult {
                iterations: res.iterations as u64,
                converged: i32::from(res.converged),
                mse: res.report.mse,
                zero_one: res.report.zero_one,
            };
        }
        Ok(())
    })
}

/// Decode with the relaxed belief propagation reference (small instances).
///
/// # Safety
/// `out_marginals` must point to `n * d` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn hqp_rbp_decode(
    handle: *const HqpInstanceHandle,
    max_iter: u64,
    conv_tol: f64,
    out_marginals: *mut f64,
) -> HqpStatus {
    guarded(|| {
        let handle = handle.as_ref().ok_or_else(|| null_err("handle"))?;
        if out_marginals.is_null() {
            return Err(null_err("out_marginals"));
        }
        let cfg = AmpConfig {
            max_iter: max_iter as usize,
            conv_tol,
            ..Default::default()
        };
        let marg = rbp_decode(&handle.inner, &cfg).map_err(core_err)?;
        let (n, d) = (handle.inner.n, handle.inner.d);
        let dst = std::slice::from_raw_parts_mut(out_marginals, n * d);
        for i in 0..n {
            for r in 0..d {
                dst[i * d + r] = marg[(i, r)];
            }
        }
        Ok(())
    })
}

/// `kappa*_binary(p)` by one-dimensional quadrature.
///
/// # Safety
/// Output pointers may be null when the value is not wanted.
#[no_mangle]
pub unsafe extern "C" fn hqp_kappa_binary(
    p: f64,
    out_kappa: *mut f64,
    out_x_star: *mut f64,
) -> HqpStatus {
    guarded(|| {
        let res = kappa_binary(p, &default_scalar_engine(), &SupSearchConfig::default())
            .map_err(core_err)?;
        if !out_kappa.is_null() {
            *out_kappa = res.kappa_star;
        }
        if !out_x_star.is_null() {
            *out_x_star = res.x_star;
        }
        Ok(())
    })
}

/// `kappa*_sym(d)` by seeded Monte Carlo.
///
/// # Safety
/// Output pointers may be null when the value is not wanted.
#[no_mangle]
pub unsafe extern "C" fn hqp_kappa_sym(
    d: u64,
    samples: u64,
    replicates: u64,
    seed: u64,
    out_kappa: *mut f64,
    out_std_err: *mut f64,
) -> HqpStatus {
    guarded(|| {
        let engine = ExpectationEngine::monte_carlo(d as usize, samples as usize, seed);
        let res = kappa_sym(
            d as usize,
            &engine,
            &SupSearchConfig::default(),
            replicates as usize,
        )
        .map_err(core_err)?;
        if !out_kappa.is_null() {
            *out_kappa = res.kappa_star;
        }
        if !out_std_err.is_null() {
            *out_std_err = res.std_err;
        }
        Ok(())
    })
}

/// `kappa*_rs` for a matching edge (zero-based indices here).
///
/// # Safety
/// `pi` must point to `d` doubles.
#[no_mangle]
pub unsafe extern "C" fn hqp_kappa_matching(
    pi: *const f64,
    d: u64,
    r: u64,
    s: u64,
    out_kappa: *mut f64,
) -> HqpStatus {
    guarded(|| {
        if pi.is_null() {
            return Err(null_err("pi"));
        }
        let pi = std::slice::from_raw_parts(pi, d as usize);
        let res = kappa_matching(
            pi,
            r as usize,
            s as usize,
            &default_scalar_engine(),
            &SupSearchConfig::default(),
        )
        .map_err(core_err)?;
        if !out_kappa.is_null() {
            *out_kappa = res.kappa_star;
        }
        Ok(())
    })
}

/// Scalar state evolution on the binary ray: the fixed point of
/// `a <- kappa^{-1} phi(a)` from `a0`, and the implied MSE limit.
///
/// # Safety
/// Output pointers may be null when the value is not wanted.
#[no_mangle]
pub unsafe extern "C" fn hqp_scalar_se_binary(
    p: f64,
    kappa: f64,
    a0: f64,
    max_iter: u64,
    tol: f64,
    out_a_star: *mut f64,
    out_mse_limit: *mut f64,
) -> HqpStatus {
    guarded(|| {
        let res = scalar_se(
            ScalarMap::Binary { p },
            kappa,
            a0,
            max_iter as usize,
            tol,
            &default_scalar_engine(),
        )
        .map_err(core_err)?;
        if !out_a_star.is_null() {
            *out_a_star = res.a_star;
        }
        if !out_mse_limit.is_null() {
            *out_mse_limit = res.mse_limit;
        }
        Ok(())
    })
}

/// Full-matrix state evolution from the non-informative point (or from `x0`,
/// row-major `d x d`, when non-null). Writes the fixed point into
/// `out_x_star` (`d x d`, may be null) and reports the final MSE.
///
/// # Safety
/// Buffers must satisfy the stated shapes.
#[no_mangle]
pub unsafe extern "C" fn hqp_se_run(
    d: u64,
    pi: *const f64,
    kappa: f64,
    x0: *const f64,
    samples: u64,
    seed: u64,
    max_iter: u64,
    out_x_star: *mut f64,
    out_mse: *mut f64,
    out_converged: *mut i32,
) -> HqpStatus {
    guarded(|| {
        let d = d as usize;
        let pi = pi_from_raw(pi, d);
        let x0 = if x0.is_null() {
            SEMatrix::noninformative(&pi, kappa)
        } else {
            let raw = std::slice::from_raw_parts(x0, d * d);
            SEMatrix::from_row_major(d, raw).map_err(core_err)?
        };
        let engine = if d <= 2 {
            ExpectationEngine::gauss_hermite(d.max(1), 61).map_err(core_err)?
        } else {
            ExpectationEngine::monte_carlo(d, samples as usize, seed)
        };
        let mut cfg = SEConfig::new(kappa, pi, engine).map_err(core_err)?;
        cfg.max_iter = max_iter as usize;
        let traj = se_iterate(&x0, &cfg).map_err(core_err)?;
        if !out_x_star.is_null() {
            let dst = std::slice::from_raw_parts_mut(out_x_star, d * d);
            let m = traj.fixed_point.matrix();
            for r in 0..d {
                for s in 0..d {
                    dst[r * d + s] = m[(r, s)];
                }
            }
        }
        if !out_mse.is_null() {
            *out_mse = traj.steps.last().map(|s| s.mse).unwrap_or(f64::NAN);
        }
        if !out_converged.is_null() {
            *out_converged = i32::from(traj.converged);
        }
        Ok(())
    })
}
