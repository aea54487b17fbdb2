//! C ABI over the lpareto engine.
//!
//! Every entry point returns an [`LpStatus`]; on failure the message is kept
//! per thread and read back with [`lp_last_error_message`]. Handles are
//! opaque and owned by the caller once returned; release them with the
//! matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use lpareto::config::RunConfig;
use lpareto::marginal::GpdTail;
use lpareto::pipeline::{run_pipeline, simulate_fields, ModelBundle};
use lpareto::returns::{latent_return_level, return_level, ReturnMethod, ReturnSpec, SiteTail, SiteTrend};
use lpareto::trend::{latent_value, observed_value};
use lpareto::Error;

/// Result codes shared by every function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Parse = 3,
    InvalidInput = 4,
    Domain = 5,
    InsufficientData = 6,
    NonConvergence = 7,
    Numerical = 8,
    Config = 9,
    Io = 10,
    OutOfRange = 11,
    BufferTooSmall = 12,
    Panic = 13,
}

/// Return-level definition.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpMethod {
    /// Expected number of exceedances.
    Ene = 0,
    /// Expected waiting time.
    Ewt = 1,
}

impl From<LpMethod> for ReturnMethod {
    fn from(m: LpMethod) -> Self {
        match m {
            LpMethod::Ene => ReturnMethod::Ene,
            LpMethod::Ewt => ReturnMethod::Ewt,
        }
    }
}

/// Fitted marginal and trend parameters of one station.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LpSiteParams {
    pub a_n: f64,
    pub b_n: f64,
    pub gamma: f64,
    pub theta: f64,
    pub phi_u: f64,
}

/// Opaque fitted model.
pub struct LpBundle {
    inner: ModelBundle,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> LpStatus {
    match e {
        Error::Parse { .. } | Error::Json(_) => LpStatus::Parse,
        Error::Conflict { .. } | Error::InvalidInput(_) => LpStatus::InvalidInput,
        Error::Domain(_) => LpStatus::Domain,
        Error::InsufficientData(_) => LpStatus::InsufficientData,
        Error::NonConvergence { .. } => LpStatus::NonConvergence,
        Error::Numerical(_) => LpStatus::Numerical,
        Error::Config(_) => LpStatus::Config,
        Error::Io { .. } => LpStatus::Io,
    }
}

struct Failure(LpStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn fail(status: LpStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

/// Runs `f`, records any error or panic and converts it to a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> LpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            LpStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            LpStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(LpStatus::NullPointer, format!("`{what}` is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(LpStatus::InvalidUtf8, format!("`{what}` is not valid UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| fail(LpStatus::NullPointer, format!("`{what}` is null")))
}

unsafe fn bundle_arg<'a>(p: *const LpBundle) -> Result<&'a ModelBundle, Failure> {
    p.as_ref()
        .map(|b| &b.inner)
        .ok_or_else(|| fail(LpStatus::NullPointer, "`bundle` is null"))
}

fn site_index(b: &ModelBundle, site: usize) -> Result<usize, Failure> {
    if site < b.stations.len() {
        Ok(site)
    } else {
        Err(fail(
            LpStatus::OutOfRange,
            format!("site {site} out of range for {} stations", b.stations.len()),
        ))
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn lp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a bundle from a JSON file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lp_bundle_load(path: *const c_char, out: *mut *mut LpBundle) -> LpStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let out = out_arg(out, "out")?;
        let inner = ModelBundle::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(LpBundle { inner }));
        Ok(())
    })
}

/// Parses a bundle from JSON text.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lp_bundle_from_json(json: *const c_char, out: *mut *mut LpBundle) -> LpStatus {
    guard(|| {
        let text = str_arg(json, "json")?;
        let out = out_arg(out, "out")?;
        let inner = ModelBundle::from_json(text)?;
        *out = Box::into_raw(Box::new(LpBundle { inner }));
        Ok(())
    })
}

/// Releases a bundle. Null is ignored.
///
/// # Safety
/// `bundle` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lp_bundle_free(bundle: *mut LpBundle) {
    if !bundle.is_null() {
        drop(Box::from_raw(bundle));
    }
}

/// Number of stations in the bundle.
///
/// # Safety
/// `bundle` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn lp_bundle_n_sites(bundle: *const LpBundle, out: *mut usize) -> LpStatus {
    guard(|| {
        *out_arg(out, "out")? = bundle_arg(bundle)?.stations.len();
        Ok(())
    })
}

/// Copies the station id of `site` into `buf` (NUL-terminated). On
/// [`LpStatus::BufferTooSmall`], `needed` holds the required size.
///
/// # Safety
/// `buf` must have room for `len` bytes; `needed` may be null.
#[no_mangle]
pub unsafe extern "C" fn lp_bundle_site_id(
    bundle: *const LpBundle,
    site: usize,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> LpStatus {
    guard(|| {
        let b = bundle_arg(bundle)?;
        let id = b.stations[site_index(b, site)?].id.as_bytes();
        if let Some(n) = needed.as_mut() {
            *n = id.len() + 1;
        }
        if buf.is_null() {
            return Err(fail(LpStatus::NullPointer, "`buf` is null"));
        }
        if len < id.len() + 1 {
            return Err(fail(LpStatus::BufferTooSmall, format!("{} bytes needed", id.len() + 1)));
        }
        ptr::copy_nonoverlapping(id.as_ptr(), buf.cast::<u8>(), id.len());
        *buf.add(id.len()) = 0;
        Ok(())
    })
}

/// Fitted parameters of one station.
///
/// # Safety
/// `bundle` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn lp_bundle_site_params(
    bundle: *const LpBundle,
    site: usize,
    out: *mut LpSiteParams,
) -> LpStatus {
    guard(|| {
        let b = bundle_arg(bundle)?;
        let s = site_index(b, site)?;
        *out_arg(out, "out")? = LpSiteParams {
            a_n: b.marginal.a_n[s],
            b_n: b.marginal.b_n[s],
            gamma: b.marginal.gamma,
            theta: b.trend.theta_site[s],
            phi_u: b.phi_u[s],
        };
        Ok(())
    })
}

/// Fitted Brown-Resnick variogram `(τ, κ)`.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn lp_bundle_dependence(bundle: *const LpBundle, tau: *mut f64, kappa: *mut f64) -> LpStatus {
    guard(|| {
        let b = bundle_arg(bundle)?;
        *out_arg(tau, "tau")? = b.dependence.model.tau;
        *out_arg(kappa, "kappa")? = b.dependence.model.kappa;
        Ok(())
    })
}

/// Return level at one station for a period of `m` years with `n_x` days
/// per year.
///
/// # Safety
/// `bundle` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn lp_bundle_return_level(
    bundle: *const LpBundle,
    site: usize,
    m: f64,
    n_x: usize,
    method: LpMethod,
    out: *mut f64,
) -> LpStatus {
    guard(|| {
        let b = bundle_arg(bundle)?;
        let s = site_index(b, site)?;
        let out = out_arg(out, "out")?;
        let tail = SiteTail::new(GpdTail::new(b.marginal.a_n[s], b.marginal.gamma, b.marginal.b_n[s])?, b.phi_u[s])?;
        let trend = SiteTrend { family: b.trend.family, theta: b.trend.theta_site[s] };
        let spec = ReturnSpec::new(m, n_x, b.n_days)?;
        *out = return_level(method.into(), &spec, &trend, &tail)?.x_m;
        Ok(())
    })
}

/// Simulates `n_fields` fields from the bundle's dependence model on the
/// latent scale, written row-major into `buf` (`n_fields × n_sites`).
///
/// # Safety
/// `buf` must have room for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn lp_bundle_simulate(
    bundle: *const LpBundle,
    n_fields: usize,
    seed: u64,
    buf: *mut f64,
    len: usize,
) -> LpStatus {
    guard(|| {
        let b = bundle_arg(bundle)?;
        if buf.is_null() {
            return Err(fail(LpStatus::NullPointer, "`buf` is null"));
        }
        let need = n_fields * b.stations.len();
        if len < need {
            return Err(fail(LpStatus::BufferTooSmall, format!("{need} values needed")));
        }
        let sim = simulate_fields(b, n_fields, seed)?;
        let out = std::slice::from_raw_parts_mut(buf, need);
        for (dst, v) in out.iter_mut().zip(sim.latent.iter().flatten()) {
            *dst = *v;
        }
        Ok(())
    })
}

/// Stationary return level `u + (σ/γ)[(n_x m φ_u)^γ − 1]`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lp_stationary_return_level(
    u: f64,
    sigma: f64,
    gamma: f64,
    phi_u: f64,
    m: f64,
    n_x: usize,
    out: *mut f64,
) -> LpStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let tail = SiteTail::new(GpdTail::new(sigma, gamma, u)?, phi_u)?;
        let spec = ReturnSpec::new(m, n_x, n_x)?;
        *out = latent_return_level(&spec, &tail)?;
        Ok(())
    })
}

/// Removes the trend factor `c` from an observation.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lp_latent_value(x: f64, c: f64, gamma: f64, a_tilde: f64, b_tilde: f64, out: *mut f64) -> LpStatus {
    guard(|| {
        if !(c > 0.0) {
            return Err(fail(LpStatus::Domain, format!("trend factor must be positive, got {c}")));
        }
        *out_arg(out, "out")? = latent_value(x, c, gamma, a_tilde, b_tilde);
        Ok(())
    })
}

/// Inverse of [`lp_latent_value`].
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lp_observed_value(z: f64, c: f64, gamma: f64, a_tilde: f64, b_tilde: f64, out: *mut f64) -> LpStatus {
    guard(|| {
        if !(c > 0.0) {
            return Err(fail(LpStatus::Domain, format!("trend factor must be positive, got {c}")));
        }
        *out_arg(out, "out")? = observed_value(z, c, gamma, a_tilde, b_tilde);
        Ok(())
    })
}

/// Runs the full pipeline described by a TOML config file.
///
/// # Safety
/// `config_path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn lp_run_pipeline(config_path: *const c_char) -> LpStatus {
    guard(|| {
        let path = str_arg(config_path, "config_path")?;
        let cfg = RunConfig::load(path)?;
        run_pipeline(&cfg).map_err(|e| {
            let status = status_of(&e.source);
            fail(status, e.to_string())
        })?;
        Ok(())
    })
}
