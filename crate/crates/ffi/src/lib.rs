//! C ABI for the npmix estimators.
//!
//! Every fallible function returns an [`NpmixStatus`]; on failure the message
//! is available from [`npmix_last_error`] on the same thread. Handles are
//! opaque and must be released with their `_free` function. Strings returned
//! through `char **` are owned by the caller and released with
//! [`npmix_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use npmix::data::{load_dataset, save_dataset, simulate_case, CaseId, Dataset, TrueMixing};
use npmix::kernel;
use npmix::metrics::evaluate;
use npmix::mixture::MixingDistribution;
use npmix::nalgebra::DMatrix;
use npmix::study::{run_estimator, Estimator, EstimatorConfig};
use npmix::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NpmixStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Numerical = 5,
    Estimation = 6,
    Panic = 7,
}

/// Opaque dataset handle.
pub struct NpmixDataset(Dataset);

/// Opaque mixing-distribution handle.
pub struct NpmixMixing(MixingDistribution);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(NpmixStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::InvalidArgument(_) | Error::UnknownCase(_) | Error::Unsupported(_) | Error::NoObservations => {
                NpmixStatus::InvalidArgument
            }
            Error::Io(_) => NpmixStatus::Io,
            Error::Json(_) | Error::Csv(_) | Error::Format { .. } => NpmixStatus::Parse,
            Error::NonFinite(_) | Error::NotPositiveDefinite | Error::Kernel { .. } => NpmixStatus::Numerical,
            Error::TooManyComponents { .. } | Error::AscentViolation { .. } => NpmixStatus::Estimation,
        };
        Failure(status, e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure(NpmixStatus::Parse, e.to_string())
    }
}

fn null(name: &str) -> Failure {
    Failure(NpmixStatus::NullPointer, format!("`{name}` is null"))
}

fn guard<F: FnOnce() -> Result<(), Failure>>(f: F) -> NpmixStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            NpmixStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".to_string());
            set_last_error(format!("panic: {msg}"));
            NpmixStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(NpmixStatus::InvalidArgument, format!("`{name}` is not UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(name))
}

fn into_c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Failure(NpmixStatus::InvalidArgument, "string contains a NUL byte".into()))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next npmix call on the same thread.
#[no_mangle]
pub extern "C" fn npmix_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn npmix_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Bivariate normal CDF `P(Z1 <= h, Z2 <= k)` with correlation `rho`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn npmix_bvn_cdf(h: f64, k: f64, rho: f64, out: *mut f64) -> NpmixStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = kernel::bvn_cdf(h, k, rho)?;
        Ok(())
    })
}

/// Probit probability of alternative `j` (0-based) given systematic
/// utilities `v[n_alt]` and the row-major error covariance `sigma[n_alt*n_alt]`.
///
/// # Safety
/// `v` and `sigma` must point to `n_alt` and `n_alt * n_alt` values.
#[no_mangle]
pub unsafe extern "C" fn npmix_mnp_prob(
    v: *const f64,
    sigma: *const f64,
    n_alt: usize,
    j: usize,
    out: *mut f64,
) -> NpmixStatus {
    guard(|| {
        if v.is_null() {
            return Err(null("v"));
        }
        if sigma.is_null() {
            return Err(null("sigma"));
        }
        let out = out_arg(out, "out")?;
        let v = std::slice::from_raw_parts(v, n_alt);
        let s = std::slice::from_raw_parts(sigma, n_alt * n_alt);
        *out = kernel::mnp_prob(v, &DMatrix::from_row_slice(n_alt, n_alt, s), j)?;
        Ok(())
    })
}

fn parse_case(case: &str) -> Result<CaseId, Failure> {
    Ok(case.parse::<CaseId>()?)
}

/// Simulates `n` observations of a built-in case ("1a", "1b", "1c", "2a", "2b").
///
/// # Safety
/// `case` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn npmix_dataset_simulate(
    case: *const c_char,
    n: usize,
    seed: u64,
    out: *mut *mut NpmixDataset,
) -> NpmixStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let case = parse_case(str_arg(case, "case")?)?;
        let (data, _) = simulate_case(case, n, seed)?;
        *out = Box::into_raw(Box::new(NpmixDataset(data)));
        Ok(())
    })
}

/// Loads a dataset CSV.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn npmix_dataset_load(path: *const c_char, out: *mut *mut NpmixDataset) -> NpmixStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let data = load_dataset(Path::new(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(NpmixDataset(data)));
        Ok(())
    })
}

/// Writes a dataset CSV.
///
/// # Safety
/// `data` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn npmix_dataset_save(data: *const NpmixDataset, path: *const c_char) -> NpmixStatus {
    guard(|| {
        let data = data.as_ref().ok_or_else(|| null("data"))?;
        save_dataset(&data.0, Path::new(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Number of observations, or 0 for a null handle.
///
/// # Safety
/// `data` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn npmix_dataset_len(data: *const NpmixDataset) -> usize {
    data.as_ref().map_or(0, |d| d.0.len())
}

/// Releases a dataset. Null is ignored.
///
/// # Safety
/// `data` must be null or a live handle, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn npmix_dataset_free(data: *mut NpmixDataset) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}

/// Estimates the mixing distribution with estimator `mode` ("GR", "EM",
/// "EM-GR" or "BE") under the model of `case`. `config_json` may be null for
/// the defaults; missing keys take their defaults. `loglik` may be null.
///
/// # Safety
/// Pointers must be valid; `out` receives a new handle.
#[no_mangle]
pub unsafe extern "C" fn npmix_estimate(
    data: *const NpmixDataset,
    case: *const c_char,
    mode: *const c_char,
    config_json: *const c_char,
    out: *mut *mut NpmixMixing,
    loglik: *mut f64,
) -> NpmixStatus {
    guard(|| {
        let data = data.as_ref().ok_or_else(|| null("data"))?;
        let out = out_arg(out, "out")?;
        let case = parse_case(str_arg(case, "case")?)?;
        let mode: Estimator = str_arg(mode, "mode")?.parse()?;
        let cfg: EstimatorConfig = if config_json.is_null() {
            EstimatorConfig::default()
        } else {
            serde_json::from_str(str_arg(config_json, "config_json")?)?
        };
        let kernel = case.kernel(case.error_cov())?;
        let est = run_estimator(&data.0, &kernel, &cfg, mode)?;
        if let Some(ll) = loglik.as_mut() {
            *ll = est.loglik;
        }
        *out = Box::into_raw(Box::new(NpmixMixing(est.q)));
        Ok(())
    })
}

/// Parses a mixing distribution from its JSON form.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn npmix_mixing_from_json(json: *const c_char, out: *mut *mut NpmixMixing) -> NpmixStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let q = MixingDistribution::from_json(str_arg(json, "json")?)?;
        *out = Box::into_raw(Box::new(NpmixMixing(q)));
        Ok(())
    })
}

/// Serializes a mixing distribution to JSON; free the result with
/// [`npmix_string_free`].
///
/// # Safety
/// `q` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn npmix_mixing_to_json(q: *const NpmixMixing, out: *mut *mut c_char) -> NpmixStatus {
    guard(|| {
        let q = q.as_ref().ok_or_else(|| null("q"))?;
        let out = out_arg(out, "out")?;
        *out = into_c_string(q.0.to_json()?)?;
        Ok(())
    })
}

/// Number of mixture components, or 0 for a null handle.
///
/// # Safety
/// `q` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn npmix_mixing_len(q: *const NpmixMixing) -> usize {
    q.as_ref().map_or(0, |q| q.0.len())
}

/// Writes the mixture mean into `out[0..cap]`; `dim` receives the dimension.
/// Fails with `InvalidArgument` when `cap` is too small.
///
/// # Safety
/// `q` must be a live handle, `out` must hold `cap` values.
#[no_mangle]
pub unsafe extern "C" fn npmix_mixing_mean(
    q: *const NpmixMixing,
    out: *mut f64,
    cap: usize,
    dim: *mut usize,
) -> NpmixStatus {
    guard(|| {
        let q = q.as_ref().ok_or_else(|| null("q"))?;
        let dim = out_arg(dim, "dim")?;
        let mean = q.0.mean();
        *dim = mean.len();
        if cap < mean.len() {
            return Err(Failure(
                NpmixStatus::InvalidArgument,
                format!("buffer holds {cap} values, mean has {}", mean.len()),
            ));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        std::slice::from_raw_parts_mut(out, mean.len()).copy_from_slice(&mean);
        Ok(())
    })
}

/// Releases a mixing distribution. Null is ignored.
///
/// # Safety
/// `q` must be null or a live handle, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn npmix_mixing_free(q: *mut NpmixMixing) {
    if !q.is_null() {
        drop(Box::from_raw(q));
    }
}

/// Evaluation metrics of `q` against the generating mixture of `case`, as a
/// JSON object; free the result with [`npmix_string_free`].
///
/// # Safety
/// Handles must be live and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn npmix_metrics_json(
    data: *const NpmixDataset,
    q: *const NpmixMixing,
    case: *const c_char,
    out: *mut *mut c_char,
) -> NpmixStatus {
    guard(|| {
        let data = data.as_ref().ok_or_else(|| null("data"))?;
        let q = q.as_ref().ok_or_else(|| null("q"))?;
        let out = out_arg(out, "out")?;
        let case = parse_case(str_arg(case, "case")?)?;
        let report = evaluate(&data.0, &q.0, &TrueMixing::new(case))?;
        *out = into_c_string(serde_json::to_string(&report)?)?;
        Ok(())
    })
}
