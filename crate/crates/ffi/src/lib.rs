//! C ABI for the continual person search core.
//!
//! Every entry point returns a [`CpsStatus`]; results come back through out
//! pointers. Objects are opaque handles released with their `*_free`
//! function, and strings returned to the caller are released with
//! [`cps_string_free`]. The message of the last failure on the calling
//! thread is available from [`cps_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use cps::harness::{self, EvalMode, HarnessError, MetricsReport, RunConfig, SequentialData};

/// Outcome of a call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CpsStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Config = 4,
    Io = 5,
    Checkpoint = 6,
    Protocol = 7,
    Compute = 8,
    Panic = 9,
}

/// Evaluation mode selector.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CpsEvalMode {
    Pops = 0,
    Oracle = 1,
    FtSeq = 2,
}

/// Run configuration.
pub struct CpsConfig(RunConfig);

/// Pretrained or trained model state with its prompt snapshots.
pub struct CpsCheckpoint(harness::Checkpoint);

/// Evaluation report.
pub struct CpsReport(MetricsReport);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(CpsStatus, String);

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        let status = match &e {
            HarnessError::Config(_) | HarnessError::Json(_) => CpsStatus::Config,
            HarnessError::Io(_) => CpsStatus::Io,
            HarnessError::Checkpoint(_) => CpsStatus::Checkpoint,
            HarnessError::ProtocolViolation { .. } => CpsStatus::Protocol,
            _ => CpsStatus::Compute,
        };
        Failure(status, e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn guard(f: impl FnOnce() -> Outcome) -> CpsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            CpsStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            CpsStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(CpsStatus::NullArgument, format!("{what} is null"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(CpsStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Outcome {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> Outcome {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    let c = CString::new(s).map_err(|_| Failure(CpsStatus::InvalidArgument, "string holds a NUL byte".into()))?;
    *out = c.into_raw();
    Ok(())
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn cps_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Static version string of the library.
#[no_mangle]
pub extern "C" fn cps_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn cps_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Default run configuration.
///
/// # Safety
/// `out` must be a valid pointer to writable storage.
#[no_mangle]
pub unsafe extern "C" fn cps_config_default(out: *mut *mut CpsConfig) -> CpsStatus {
    guard(|| put(out, CpsConfig(RunConfig::default())))
}

/// Parses and validates a JSON configuration; unknown keys are rejected.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cps_config_from_json(json: *const c_char, out: *mut *mut CpsConfig) -> CpsStatus {
    guard(|| {
        let cfg = RunConfig::from_json(text(json, "json")?)?;
        put(out, CpsConfig(cfg))
    })
}

/// Serialises a configuration; free the result with `cps_string_free`.
///
/// # Safety
/// `config` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cps_config_to_json(config: *const CpsConfig, out: *mut *mut c_char) -> CpsStatus {
    guard(|| put_string(out, handle(config, "config")?.0.to_json()))
}

/// Hex SHA-256 of the canonical configuration.
///
/// # Safety
/// `config` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cps_config_hash(config: *const CpsConfig, out: *mut *mut c_char) -> CpsStatus {
    guard(|| put_string(out, handle(config, "config")?.0.hash()))
}

/// Number of domains in the configured order.
///
/// # Safety
/// `config` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cps_config_domain_count(config: *const CpsConfig, out: *mut usize) -> CpsStatus {
    guard(|| {
        let n = handle(config, "config")?.0.domains.len();
        *out.as_mut().ok_or_else(|| null("output pointer"))? = n;
        Ok(())
    })
}

/// # Safety
/// `config` must come from this library and not be freed twice. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn cps_config_free(config: *mut CpsConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Warm-up and detector pretraining; yields a checkpoint with no domains.
///
/// # Safety
/// `config` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cps_pretrain(config: *const CpsConfig, out: *mut *mut CpsCheckpoint) -> CpsStatus {
    guard(|| {
        let ckpt = harness::pretrain(&handle(config, "config")?.0)?;
        put(out, CpsCheckpoint(ckpt))
    })
}

/// Learns every configured domain in order from a pretrained checkpoint.
///
/// # Safety
/// Both handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cps_train(
    config: *const CpsConfig,
    pretrained: *const CpsCheckpoint,
    out: *mut *mut CpsCheckpoint,
) -> CpsStatus {
    guard(|| {
        let cfg = &handle(config, "config")?.0;
        let pre = &handle(pretrained, "checkpoint")?.0;
        let data = SequentialData::generate(cfg)?;
        let (trained, _) = harness::train_continual(cfg, pre, &data)?;
        put(out, CpsCheckpoint(trained))
    })
}

/// Evaluates all training stages of a checkpoint on its configured domains.
///
/// # Safety
/// `ckpt` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cps_evaluate(ckpt: *const CpsCheckpoint, mode: CpsEvalMode, out: *mut *mut CpsReport) -> CpsStatus {
    guard(|| {
        let ckpt = &handle(ckpt, "checkpoint")?.0;
        let mode = match mode {
            CpsEvalMode::Pops => EvalMode::Pops,
            CpsEvalMode::Oracle => EvalMode::Oracle,
            CpsEvalMode::FtSeq => EvalMode::FtSeq,
        };
        let data = SequentialData::generate(&ckpt.config)?;
        put(out, CpsReport(harness::evaluate(ckpt, data.test_domains(), mode)?))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cps_checkpoint_load(path: *const c_char, out: *mut *mut CpsCheckpoint) -> CpsStatus {
    guard(|| {
        let path = PathBuf::from(text(path, "path")?);
        put(out, CpsCheckpoint(harness::Checkpoint::load(&path)?))
    })
}

/// # Safety
/// `ckpt` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cps_checkpoint_save(ckpt: *const CpsCheckpoint, path: *const c_char) -> CpsStatus {
    guard(|| {
        let ckpt = &handle(ckpt, "checkpoint")?.0;
        ckpt.save(&PathBuf::from(text(path, "path")?))?;
        Ok(())
    })
}

/// Number of trained domains held by the checkpoint.
///
/// # Safety
/// `ckpt` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cps_checkpoint_domain_count(ckpt: *const CpsCheckpoint, out: *mut usize) -> CpsStatus {
    guard(|| {
        let n = handle(ckpt, "checkpoint")?.0.domain_count();
        *out.as_mut().ok_or_else(|| null("output pointer"))? = n;
        Ok(())
    })
}

/// The checkpoint manifest as JSON.
///
/// # Safety
/// `ckpt` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cps_checkpoint_manifest(ckpt: *const CpsCheckpoint, out: *mut *mut c_char) -> CpsStatus {
    guard(|| {
        put_string(out, handle(ckpt, "checkpoint")?.0.manifest().to_json())
    })
}

/// # Safety
/// `ckpt` must come from this library and not be freed twice. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn cps_checkpoint_free(ckpt: *mut CpsCheckpoint) {
    if !ckpt.is_null() {
        drop(Box::from_raw(ckpt));
    }
}

/// Parses a JSON report.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cps_report_from_json(json: *const c_char, out: *mut *mut CpsReport) -> CpsStatus {
    guard(|| put(out, CpsReport(MetricsReport::from_json(text(json, "json")?)?)))
}

/// Renders a report as `"json"` or `"csv"`.
///
/// # Safety
/// `report` must be a live handle, `format` a NUL-terminated string, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cps_report_render(
    report: *const CpsReport,
    format: *const c_char,
    out: *mut *mut c_char,
) -> CpsStatus {
    guard(|| {
        let r = &handle(report, "report")?.0;
        put_string(out, r.render(text(format, "format")?)?)
    })
}

/// Gallery-weighted average of the final search mAP, as a fraction.
///
/// # Safety
/// `report` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cps_report_average_map(report: *const CpsReport, out: *mut f64) -> CpsStatus {
    guard(|| {
        let v = handle(report, "report")?.0.weighted_average.search_map;
        *out.as_mut().ok_or_else(|| null("output pointer"))? = v;
        Ok(())
    })
}

/// # Safety
/// `report` must come from this library and not be freed twice. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn cps_report_free(report: *mut CpsReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// `Σ wᵢ vᵢ / Σ wᵢ` over `n` values.
///
/// # Safety
/// `values` and `weights` must point to `n` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cps_weighted_average(values: *const f64, weights: *const f64, n: usize, out: *mut f64) -> CpsStatus {
    guard(|| {
        if values.is_null() || weights.is_null() {
            return Err(null("input array"));
        }
        let v = std::slice::from_raw_parts(values, n);
        let w = std::slice::from_raw_parts(weights, n);
        let avg = harness::metrics::weighted_average(v, w)?;
        *out.as_mut().ok_or_else(|| null("output pointer"))? = avg;
        Ok(())
    })
}
