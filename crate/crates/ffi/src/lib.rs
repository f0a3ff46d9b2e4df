//! C ABI over the `bdm` library.
//!
//! Models are opaque handles created by `bdm_model_*` and released with
//! `bdm_model_free`. Every fallible call returns a `BdmStatus`; on failure a
//! description is available from `bdm_last_error` on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use bdm::cli::{evaluate, result_json, Fitted, Request};
use bdm::error::BdmError;
use bdm::model::{cushings, load_csv, Dataset};
use bdm::otmap::Frame;
use bdm::univariate::{BdmResult, Method};
use nalgebra::{DMatrix, DVector};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BdmStatus {
    Ok = 0,
    NullPointer = 1,
    /// Bad arguments or input data.
    InvalidArgument = 2,
    /// Optimization, root finding or quadrature failed.
    NumericFailure = 3,
    /// The method is not available for this model or target.
    Unsupported = 4,
    Panic = 5,
}

pub const BDM_METHOD_IO: u32 = 0;
pub const BDM_METHOD_HO: u32 = 1;
pub const BDM_METHOD_SKS: u32 = 2;
pub const BDM_METHOD_SKS_NUM: u32 = 3;
pub const BDM_METHOD_SN: u32 = 4;
pub const BDM_METHOD_WALD: u32 = 5;
pub const BDM_METHOD_EXACT: u32 = 6;

pub const BDM_FRAME_WHITENED: u32 = 0;
pub const BDM_FRAME_RAW: u32 = 1;

/// Evaluation switches. Pass NULL for the defaults (Wald statistic, whitened frame).
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct BdmOptions {
    /// Likelihood-ratio instead of Wald statistic for `BDM_METHOD_WALD`.
    pub lr: bool,
    /// `BDM_FRAME_*`, used by joint `BDM_METHOD_SN`.
    pub frame: u32,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct BdmValue {
    pub delta: f64,
    /// `P(θ ≤ θ₀ | y)`, or NaN when the method has no tail (joint hypotheses).
    pub tail_low: f64,
    /// The raw value fell outside [0, 1] and was clamped.
    pub clamped: bool,
}

/// A fitted model.
pub struct BdmModel {
    fitted: Fitted,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn fail(e: &BdmError) -> BdmStatus {
    set_error(&e.to_string());
    match e {
        _ if e.is_numeric() => BdmStatus::NumericFailure,
        BdmError::Capability(_) | BdmError::Unsupported(_) => BdmStatus::Unsupported,
        _ => BdmStatus::InvalidArgument,
    }
}

fn null(what: &str) -> BdmStatus {
    set_error(&format!("{what} is NULL"));
    BdmStatus::NullPointer
}

fn guard(f: impl FnOnce() -> BdmStatus) -> BdmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => {
            if status == BdmStatus::Ok {
                set_error("");
            }
            status
        }
        Err(_) => {
            set_error("internal panic");
            BdmStatus::Panic
        }
    }
}

fn method(code: u32) -> Result<Method, BdmError> {
    Ok(match code {
        BDM_METHOD_IO => Method::Io,
        BDM_METHOD_HO => Method::Ho,
        BDM_METHOD_SKS => Method::Sks,
        BDM_METHOD_SKS_NUM => Method::SksNum,
        BDM_METHOD_SN => Method::Sn,
        BDM_METHOD_WALD => Method::Wald,
        BDM_METHOD_EXACT => Method::Exact,
        _ => return Err(BdmError::Domain(format!("unknown method code {code}"))),
    })
}

unsafe fn publish(fitted: Result<Fitted, BdmError>, out: *mut *mut BdmModel) -> BdmStatus {
    match fitted {
        Ok(fitted) => {
            *out = Box::into_raw(Box::new(BdmModel { fitted }));
            BdmStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Exponential sample of size `n` with maximum likelihood estimate `mle`,
/// Jeffreys prior.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn bdm_model_exponential(n: usize, mle: f64, out: *mut *mut BdmModel) -> BdmStatus {
    guard(|| {
        if out.is_null() {
            return null("out");
        }
        *out = ptr::null_mut();
        publish(Fitted::exponential(n, mle), out)
    })
}

/// Logistic regression read from a CSV file (covariate columns plus a 0/1
/// column `y`). A NULL path selects the bundled dataset.
///
/// # Safety
/// `path` is NULL or a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bdm_model_logistic_csv(path: *const c_char, prior_sd: f64, out: *mut *mut BdmModel) -> BdmStatus {
    guard(|| {
        if out.is_null() {
            return null("out");
        }
        *out = ptr::null_mut();
        let data = if path.is_null() {
            Ok(cushings())
        } else {
            match CStr::from_ptr(path).to_str() {
                Ok(p) => load_csv(p),
                Err(_) => Err(BdmError::Domain("path is not valid UTF-8".into())),
            }
        };
        publish(data.and_then(|d| Fitted::logistic(&d, prior_sd)), out)
    })
}

/// Logistic regression on an in-memory design: `x` is `rows × cols`
/// row-major without the intercept column, `y` holds `rows` 0/1 responses.
///
/// # Safety
/// `x` must point to `rows * cols` doubles, `y` to `rows` doubles, and `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn bdm_model_logistic(
    x: *const f64,
    rows: usize,
    cols: usize,
    y: *const f64,
    prior_sd: f64,
    out: *mut *mut BdmModel,
) -> BdmStatus {
    guard(|| {
        if out.is_null() {
            return null("out");
        }
        *out = ptr::null_mut();
        if (x.is_null() && rows * cols > 0) || (y.is_null() && rows > 0) {
            return null("x or y");
        }
        let xs = if rows * cols == 0 { &[][..] } else { std::slice::from_raw_parts(x, rows * cols) };
        let ys = if rows == 0 { &[][..] } else { std::slice::from_raw_parts(y, rows) };
        let names = (1..=cols).map(|i| format!("x{i}")).collect();
        let data = Dataset::new(names, DMatrix::from_row_slice(rows, cols, xs), Some(DVector::from_column_slice(ys)));
        publish(data.and_then(|d| Fitted::logistic(&d, prior_sd)), out)
    })
}

/// Number of model parameters, or 0 for a NULL handle.
///
/// # Safety
/// `model` is NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bdm_model_dim(model: *const BdmModel) -> usize {
    model.as_ref().map_or(0, |m| m.fitted.dim())
}

/// # Safety
/// `model` is NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bdm_model_free(model: *mut BdmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

unsafe fn run(
    model: *const BdmModel,
    method_code: u32,
    psi_index: *const usize,
    n_psi: usize,
    theta0: *const f64,
    n_theta: usize,
    options: *const BdmOptions,
) -> Result<BdmResult, BdmStatus> {
    let model = model.as_ref().ok_or_else(|| null("model"))?;
    if (psi_index.is_null() && n_psi > 0) || (theta0.is_null() && n_theta > 0) {
        return Err(null("psi_index or theta0"));
    }
    let opts = options.as_ref().copied().unwrap_or(BdmOptions { lr: false, frame: BDM_FRAME_WHITENED });
    let frame = match opts.frame {
        BDM_FRAME_WHITENED => Frame::Whitened,
        BDM_FRAME_RAW => Frame::Raw,
        other => return Err(fail(&BdmError::Domain(format!("unknown frame code {other}")))),
    };
    let req = Request {
        method: method(method_code).map_err(|e| fail(&e))?,
        psi_index: if n_psi == 0 { vec![] } else { std::slice::from_raw_parts(psi_index, n_psi).to_vec() },
        theta0: if n_theta == 0 { vec![] } else { std::slice::from_raw_parts(theta0, n_theta).to_vec() },
        lr: opts.lr,
        frame,
    };
    evaluate(&model.fitted, &req).map_err(|e| fail(&e))
}

/// Evaluates one discrepancy measure. For the exponential model pass
/// `n_psi = 0`; for the logistic model one index gives a marginal and several
/// give a joint hypothesis (Wald and SN only).
///
/// # Safety
/// `model` is a live handle, `psi_index` points to `n_psi` values, `theta0`
/// to `n_theta` values, `options` is NULL or valid, and `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn bdm_evaluate(
    model: *const BdmModel,
    method: u32,
    psi_index: *const usize,
    n_psi: usize,
    theta0: *const f64,
    n_theta: usize,
    options: *const BdmOptions,
    out: *mut BdmValue,
) -> BdmStatus {
    guard(|| {
        if out.is_null() {
            return null("out");
        }
        match run(model, method, psi_index, n_psi, theta0, n_theta, options) {
            Ok(r) => {
                *out = BdmValue {
                    delta: r.delta(),
                    tail_low: r.tail_low.map_or(f64::NAN, |p| p.value()),
                    clamped: r.clamped,
                };
                BdmStatus::Ok
            }
            Err(status) => status,
        }
    })
}

/// As `bdm_evaluate`, but writes the full result (with diagnostics) as a JSON
/// string that must be released with `bdm_string_free`.
///
/// # Safety
/// Same as `bdm_evaluate`; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bdm_evaluate_json(
    model: *const BdmModel,
    method: u32,
    psi_index: *const usize,
    n_psi: usize,
    theta0: *const f64,
    n_theta: usize,
    options: *const BdmOptions,
    out_json: *mut *mut c_char,
) -> BdmStatus {
    guard(|| {
        if out_json.is_null() {
            return null("out_json");
        }
        *out_json = ptr::null_mut();
        match run(model, method, psi_index, n_psi, theta0, n_theta, options) {
            Ok(r) => match CString::new(result_json(&r).trim_end()) {
                Ok(s) => {
                    *out_json = s.into_raw();
                    BdmStatus::Ok
                }
                Err(_) => fail(&BdmError::Io("result contains NUL".into())),
            },
            Err(status) => status,
        }
    })
}

/// # Safety
/// `s` is NULL or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bdm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Message for the last failed call on this thread; empty after a success.
/// Valid until the next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn bdm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

#[no_mangle]
pub extern "C" fn bdm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
