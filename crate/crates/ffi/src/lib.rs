//! C ABI over the guard-lab pipeline.
//!
//! Every fallible entry point returns a [`GuardLabStatus`]; on failure the
//! message is available from [`guard_lab_last_error`] on the same thread.
//! Handles are opaque and must be released with their `_free` function.
//! Strings returned to the caller are owned and released with
//! [`guard_lab_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use guard_lab::config::ExperimentConfig;
use guard_lab::experiment::{self, Prepared, Row, Stage, Status, Verification};
use guard_lab::unlearning;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuardLabStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Numeric = 4,
    BufferTooSmall = 5,
    Panic = 6,
}

/// Parsed experiment configuration.
pub struct GuardLabExperiment {
    cfg: ExperimentConfig,
}

/// Generated data with its fine-tuned parameters.
pub struct GuardLabInstance {
    prep: Prepared,
}

/// Rows of an unlearning run.
pub struct GuardLabReport {
    rows: Vec<Row>,
}

/// Outcome of the theory checks.
pub struct GuardLabVerification {
    inner: Verification,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: GuardLabStatus, msg: impl Into<String>) -> GuardLabStatus {
    set_error(msg);
    status
}

fn guarded(f: impl FnOnce() -> GuardLabStatus) -> GuardLabStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(GuardLabStatus::Panic, format!("panic: {msg}"))
        }
    }
}

fn run_error(e: experiment::RunError) -> GuardLabStatus {
    let status = if e.stage == Stage::Config { GuardLabStatus::Config } else { GuardLabStatus::Numeric };
    fail(status, e.to_string())
}

unsafe fn str_arg<'a>(p: *const c_char) -> Result<&'a str, GuardLabStatus> {
    if p.is_null() {
        return Err(fail(GuardLabStatus::NullArgument, "null string argument"));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(GuardLabStatus::InvalidUtf8, "string argument is not UTF-8"))
}

fn owned_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).map(CString::into_raw).unwrap_or(ptr::null_mut())
}

macro_rules! handle {
    ($p:expr) => {
        match unsafe { $p.as_ref() } {
            Some(h) => h,
            None => return fail(GuardLabStatus::NullArgument, concat!("null handle: ", stringify!($p))),
        }
    };
}

macro_rules! out_ptr {
    ($p:expr) => {
        if $p.is_null() {
            return fail(GuardLabStatus::NullArgument, concat!("null output pointer: ", stringify!($p)));
        }
    };
}

/// Message of the last failed call on this thread, or NULL. The caller
/// owns the returned string.
#[no_mangle]
pub extern "C" fn guard_lab_last_error() -> *mut c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map(|c| c.clone().into_raw()).unwrap_or(ptr::null_mut()))
}

/// # Safety
/// `s` must be NULL or a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn guard_lab_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses a TOML experiment configuration.
///
/// # Safety
/// `toml` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn guard_lab_experiment_from_toml(
    toml: *const c_char,
    out: *mut *mut GuardLabExperiment,
) -> GuardLabStatus {
    guarded(|| {
        out_ptr!(out);
        let text = match str_arg(toml) {
            Ok(t) => t,
            Err(s) => return s,
        };
        match ExperimentConfig::parse(text) {
            Ok(cfg) => {
                *out = Box::into_raw(Box::new(GuardLabExperiment { cfg }));
                GuardLabStatus::Ok
            }
            Err(e) => fail(GuardLabStatus::Config, e.to_string()),
        }
    })
}

/// # Safety
/// `exp` must be a valid experiment handle.
#[no_mangle]
pub unsafe extern "C" fn guard_lab_experiment_set_seed(exp: *mut GuardLabExperiment, seed: u64) -> GuardLabStatus {
    guarded(|| match exp.as_mut() {
        Some(e) => {
            e.cfg.seed = seed;
            GuardLabStatus::Ok
        }
        None => fail(GuardLabStatus::NullArgument, "null handle: exp"),
    })
}

/// # Safety
/// `exp` must be NULL or a handle from [`guard_lab_experiment_from_toml`].
#[no_mangle]
pub unsafe extern "C" fn guard_lab_experiment_free(exp: *mut GuardLabExperiment) {
    if !exp.is_null() {
        drop(Box::from_raw(exp));
    }
}

/// Generates the data and fine-tunes the starting parameters.
///
/// # Safety
/// `exp` must be a valid experiment handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn guard_lab_instance_prepare(
    exp: *const GuardLabExperiment,
    out: *mut *mut GuardLabInstance,
) -> GuardLabStatus {
    guarded(|| {
        let e = handle!(exp);
        out_ptr!(out);
        match experiment::prepare(&e.cfg) {
            Ok(prep) => {
                *out = Box::into_raw(Box::new(GuardLabInstance { prep }));
                GuardLabStatus::Ok
            }
            Err(err) => run_error(err),
        }
    })
}

/// # Safety
/// `inst` must be NULL or a handle from [`guard_lab_instance_prepare`].
#[no_mangle]
pub unsafe extern "C" fn guard_lab_instance_free(inst: *mut GuardLabInstance) {
    if !inst.is_null() {
        drop(Box::from_raw(inst));
    }
}

/// Writes forget count, retain count and parameter count.
///
/// # Safety
/// `inst` must be a valid instance handle; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn guard_lab_instance_shape(
    inst: *const GuardLabInstance,
    n_forget: *mut usize,
    n_retain: *mut usize,
    n_params: *mut usize,
) -> GuardLabStatus {
    guarded(|| {
        let i = handle!(inst);
        out_ptr!(n_forget);
        out_ptr!(n_retain);
        out_ptr!(n_params);
        *n_forget = i.prep.data.n_forget();
        *n_retain = i.prep.data.n_retain();
        *n_params = i.prep.spec.param_len();
        GuardLabStatus::Ok
    })
}

unsafe fn copy_out(src: &[f64], dst: *mut f64, len: usize) -> GuardLabStatus {
    if dst.is_null() {
        return fail(GuardLabStatus::NullArgument, "null output buffer");
    }
    if len < src.len() {
        return fail(GuardLabStatus::BufferTooSmall, format!("buffer holds {len} values, {} needed", src.len()));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), dst, src.len());
    GuardLabStatus::Ok
}

/// Copies the fine-tuned parameters into `buf` (at least `n_params` values).
///
/// # Safety
/// `inst` must be a valid instance handle; `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn guard_lab_instance_theta0(
    inst: *const GuardLabInstance,
    buf: *mut f64,
    len: usize,
) -> GuardLabStatus {
    guarded(|| {
        let i = handle!(inst);
        copy_out(&i.prep.theta0.0, buf, len)
    })
}

/// Copies the per-forget-sample alignment scores into `buf` (at least
/// `n_forget` values).
///
/// # Safety
/// `inst` must be a valid instance handle; `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn guard_lab_instance_forget_scores(
    inst: *const GuardLabInstance,
    buf: *mut f64,
    len: usize,
) -> GuardLabStatus {
    guarded(|| {
        let i = handle!(inst);
        match unlearning::forget_scores(&i.prep.spec, &i.prep.theta0, &i.prep.data) {
            Ok((scores, _)) => copy_out(&scores, buf, len),
            Err(e) => fail(GuardLabStatus::Numeric, e.to_string()),
        }
    })
}

/// Retention-aware weights for `n` scores at temperature `tau`, written to
/// `out` (`n` values).
///
/// # Safety
/// `scores` must hold `n` doubles and `out` must have room for `n`.
#[no_mangle]
pub unsafe extern "C" fn guard_lab_weights(scores: *const f64, n: usize, tau: f64, out: *mut f64) -> GuardLabStatus {
    guarded(|| {
        if scores.is_null() {
            return fail(GuardLabStatus::NullArgument, "null scores");
        }
        let s = std::slice::from_raw_parts(scores, n);
        match unlearning::guard_weights(s, tau) {
            Ok(w) => copy_out(&w.weights, out, n),
            Err(e) => fail(GuardLabStatus::Config, e.to_string()),
        }
    })
}

/// Runs every configured unlearning entry on the instance.
///
/// # Safety
/// Handles must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn guard_lab_run(
    exp: *const GuardLabExperiment,
    inst: *const GuardLabInstance,
    out: *mut *mut GuardLabReport,
) -> GuardLabStatus {
    guarded(|| {
        let e = handle!(exp);
        let i = handle!(inst);
        out_ptr!(out);
        match experiment::run_rows(&i.prep, &e.cfg.unlearn_configs()) {
            Ok((rows, _)) => {
                *out = Box::into_raw(Box::new(GuardLabReport { rows }));
                GuardLabStatus::Ok
            }
            Err(err) => run_error(err),
        }
    })
}

/// # Safety
/// `report` must be a valid report handle.
#[no_mangle]
pub unsafe extern "C" fn guard_lab_report_len(report: *const GuardLabReport) -> usize {
    report.as_ref().map_or(0, |r| r.rows.len())
}

/// Forget and retain loss after run `index`.
///
/// # Safety
/// `report` must be a valid report handle; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn guard_lab_report_losses(
    report: *const GuardLabReport,
    index: usize,
    loss_forget: *mut f64,
    loss_retain: *mut f64,
) -> GuardLabStatus {
    guarded(|| {
        let r = handle!(report);
        out_ptr!(loss_forget);
        out_ptr!(loss_retain);
        let Some(row) = r.rows.get(index) else {
            return fail(GuardLabStatus::Config, format!("row {index} out of range ({} rows)", r.rows.len()));
        };
        *loss_forget = row.after.loss_forget;
        *loss_retain = row.after.loss_retain;
        GuardLabStatus::Ok
    })
}

/// Results as CSV text; NULL if `report` is NULL. The caller owns the string.
///
/// # Safety
/// `report` must be NULL or a valid report handle.
#[no_mangle]
pub unsafe extern "C" fn guard_lab_report_csv(report: *const GuardLabReport) -> *mut c_char {
    match report.as_ref() {
        Some(r) => owned_string(experiment::rows_to_csv(&r.rows)),
        None => ptr::null_mut(),
    }
}

/// # Safety
/// `report` must be NULL or a handle from [`guard_lab_run`].
#[no_mangle]
pub unsafe extern "C" fn guard_lab_report_free(report: *mut GuardLabReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// Runs the theory checks on the instance.
///
/// # Safety
/// Handles must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn guard_lab_verify(
    exp: *const GuardLabExperiment,
    inst: *const GuardLabInstance,
    out: *mut *mut GuardLabVerification,
) -> GuardLabStatus {
    guarded(|| {
        let e = handle!(exp);
        let i = handle!(inst);
        out_ptr!(out);
        match experiment::verify(&i.prep, &e.cfg) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(GuardLabVerification { inner }));
                GuardLabStatus::Ok
            }
            Err(err) => run_error(err),
        }
    })
}

/// Counts of passed, failed and skipped checks.
///
/// # Safety
/// `v` must be a valid verification handle; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn guard_lab_verification_counts(
    v: *const GuardLabVerification,
    passed: *mut usize,
    failed: *mut usize,
    skipped: *mut usize,
) -> GuardLabStatus {
    guarded(|| {
        let v = handle!(v);
        out_ptr!(passed);
        out_ptr!(failed);
        out_ptr!(skipped);
        let count = |s: Status| v.inner.checks.iter().filter(|c| c.status == s).count();
        *passed = count(Status::Pass);
        *failed = count(Status::Fail);
        *skipped = count(Status::Skipped);
        GuardLabStatus::Ok
    })
}

/// One line per check; the caller owns the string.
///
/// # Safety
/// `v` must be NULL or a valid verification handle.
#[no_mangle]
pub unsafe extern "C" fn guard_lab_verification_render(v: *const GuardLabVerification) -> *mut c_char {
    match v.as_ref() {
        Some(v) => owned_string(v.inner.render()),
        None => ptr::null_mut(),
    }
}

/// # Safety
/// `v` must be NULL or a handle from [`guard_lab_verify`].
#[no_mangle]
pub unsafe extern "C" fn guard_lab_verification_free(v: *mut GuardLabVerification) {
    if !v.is_null() {
        drop(Box::from_raw(v));
    }
}
