//! C ABI over the cascade router.
//!
//! Every fallible function returns a `CrStatus`. On failure a message for the
//! calling thread is available from `cr_last_error_message` until the next
//! call on that thread. Strings returned through out-parameters are owned by
//! the caller and must be released with `cr_string_free`. Panics never cross
//! the boundary; they surface as `CR_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use cascade_router::decision::{
    expected_utility_escalate, expected_utility_stop, threshold_from_costs, verdict_for, RoutingPolicy,
};
use cascade_router::features::FEATURE_COUNT;
use cascade_router::{aggregate_l1_answer, build_feature_vector, decide, EnsembleResponse, FailureEstimator, TaskKind, Verdict};

/// Number of features `cr_estimator_predict` reads and
/// `cr_features_from_ensemble_json` writes.
pub const CR_FEATURE_COUNT: usize = 6;

const _: () = assert!(CR_FEATURE_COUNT == FEATURE_COUNT);

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Parse = 4,
    Io = 5,
    MissingAnswer = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrVerdict {
    Stop = 0,
    Escalate = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrTaskKind {
    Convergent = 0,
    OpenEnded = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrPolicy {
    pub threshold_t: f64,
    pub u_correct: f64,
    pub c_esc: f64,
    pub oracle_success_prob: f64,
}

impl From<CrPolicy> for RoutingPolicy {
    fn from(p: CrPolicy) -> Self {
        RoutingPolicy {
            threshold_t: p.threshold_t,
            u_correct: p.u_correct,
            c_esc: p.c_esc,
            oracle_success_prob: p.oracle_success_prob,
        }
    }
}

impl From<Verdict> for CrVerdict {
    fn from(v: Verdict) -> Self {
        match v {
            Verdict::Stop => CrVerdict::Stop,
            Verdict::Escalate => CrVerdict::Escalate,
        }
    }
}

/// Opaque handle to a trained failure estimator.
pub struct CrEstimator {
    inner: FailureEstimator,
    id: CString,
}

struct Failure(CrStatus, String);

type FfiResult = Result<(), Failure>;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> FfiResult) -> CrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            CrStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_last_error(&format!("panic: {msg}"));
            CrStatus::Panic
        }
    }
}

fn fail(status: CrStatus, e: impl std::fmt::Display) -> Failure {
    Failure(status, e.to_string())
}

fn invalid(e: impl std::fmt::Display) -> Failure {
    fail(CrStatus::InvalidArgument, e)
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(fail(CrStatus::NullPointer, format!("{name} is null")))
    } else {
        Ok(())
    }
}

/// # Safety
/// `s` must be null or a valid NUL-terminated string.
unsafe fn str_arg<'a>(s: *const c_char, name: &str) -> Result<&'a str, Failure> {
    non_null(s, name)?;
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| fail(CrStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

/// # Safety
/// `out` must be null or valid for a write.
unsafe fn write_out<T>(out: *mut T, value: T, name: &str) -> FfiResult {
    non_null(out, name)?;
    out.write(value);
    Ok(())
}

fn into_c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| invalid("string contains NUL"))
}

/// Message for the most recent failure on this thread; empty after a
/// success. Valid until the next `cr_` call on the same thread.
#[no_mangle]
pub extern "C" fn cr_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

fn make_handle(inner: FailureEstimator) -> Result<*mut CrEstimator, Failure> {
    let id = CString::new(inner.fingerprint()).map_err(invalid)?;
    Ok(Box::into_raw(Box::new(CrEstimator { inner, id })))
}

/// Parses an estimator from its JSON form.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cr_estimator_load_json(json: *const c_char, out: *mut *mut CrEstimator) -> CrStatus {
    guard(|| {
        non_null(out, "out")?;
        let text = str_arg(json, "json")?;
        let est = FailureEstimator::from_json(text).map_err(|e| fail(CrStatus::Parse, e))?;
        write_out(out, make_handle(est)?, "out")
    })
}

/// Loads an estimator from a JSON file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cr_estimator_load_file(path: *const c_char, out: *mut *mut CrEstimator) -> CrStatus {
    guard(|| {
        non_null(out, "out")?;
        let path = str_arg(path, "path")?;
        let text = std::fs::read_to_string(Path::new(path)).map_err(|e| fail(CrStatus::Io, format!("{path}: {e}")))?;
        let est = FailureEstimator::from_json(&text).map_err(|e| fail(CrStatus::Parse, e))?;
        write_out(out, make_handle(est)?, "out")
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `est` must be null or a handle from a `cr_estimator_load_*` call that has
/// not been freed.
#[no_mangle]
pub unsafe extern "C" fn cr_estimator_free(est: *mut CrEstimator) {
    if !est.is_null() {
        drop(Box::from_raw(est));
    }
}

/// Stable identifier of the estimator (kind plus content hash). Borrowed
/// from the handle; valid until it is freed.
///
/// # Safety
/// `est` must be a live handle or null (which yields null).
#[no_mangle]
pub unsafe extern "C" fn cr_estimator_id(est: *const CrEstimator) -> *const c_char {
    match est.as_ref() {
        Some(e) => e.id.as_ptr(),
        None => std::ptr::null(),
    }
}

/// Failure probability for `CR_FEATURE_COUNT` features in canonical order.
///
/// # Safety
/// `est` must be a live handle, `features` must point to
/// `CR_FEATURE_COUNT` doubles and `out_p_fail` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cr_estimator_predict(
    est: *const CrEstimator,
    features: *const f64,
    out_p_fail: *mut f64,
) -> CrStatus {
    guard(|| {
        non_null(est, "est")?;
        non_null(features, "features")?;
        let row: [f64; FEATURE_COUNT] = std::slice::from_raw_parts(features, FEATURE_COUNT)
            .try_into()
            .expect("slice of FEATURE_COUNT");
        if row.iter().any(|x| !x.is_finite()) {
            return Err(invalid("features must be finite"));
        }
        write_out(out_p_fail, (*est).inner.predict_row(&row), "out_p_fail")
    })
}

/// Writes the `CR_FEATURE_COUNT` features of an ensemble given as JSON
/// (`{"query_id": ..., "outputs": [...]}`).
///
/// # Safety
/// `ensemble_json` must be a NUL-terminated string and `out_features` must
/// have room for `CR_FEATURE_COUNT` doubles.
#[no_mangle]
pub unsafe extern "C" fn cr_features_from_ensemble_json(
    ensemble_json: *const c_char,
    out_features: *mut f64,
) -> CrStatus {
    guard(|| {
        non_null(out_features, "out_features")?;
        let ensemble = parse_ensemble(str_arg(ensemble_json, "ensemble_json")?)?;
        let values = build_feature_vector(&ensemble).to_array();
        std::ptr::copy_nonoverlapping(values.as_ptr(), out_features, FEATURE_COUNT);
        Ok(())
    })
}

fn parse_ensemble(text: &str) -> Result<EnsembleResponse, Failure> {
    let e: EnsembleResponse = serde_json::from_str(text).map_err(|e| fail(CrStatus::Parse, e))?;
    e.validate().map_err(invalid)?;
    Ok(e)
}

/// `(1 - p_fail) * u_correct`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cr_expected_utility_stop(p_fail: f64, u_correct: f64, out: *mut f64) -> CrStatus {
    guard(|| write_out(out, expected_utility_stop(p_fail, u_correct).map_err(invalid)?, "out"))
}

/// `oracle_success_prob * u_correct - c_esc`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cr_expected_utility_escalate(
    u_correct: f64,
    c_esc: f64,
    oracle_success_prob: f64,
    out: *mut f64,
) -> CrStatus {
    guard(|| {
        let v = expected_utility_escalate(u_correct, c_esc, oracle_success_prob).map_err(invalid)?;
        write_out(out, v, "out")
    })
}

/// Failure probability above which escalation is optimal, in [0, 1].
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cr_threshold_from_costs(
    u_correct: f64,
    c_esc: f64,
    oracle_success_prob: f64,
    out: *mut f64,
) -> CrStatus {
    guard(|| {
        let t = threshold_from_costs(u_correct, c_esc, oracle_success_prob).map_err(invalid)?;
        write_out(out, t, "out")
    })
}

/// Default policy: threshold 0.70, unit utility, escalation cost 0.3, a
/// perfect oracle.
#[no_mangle]
pub extern "C" fn cr_policy_default() -> CrPolicy {
    let p = RoutingPolicy::default();
    CrPolicy {
        threshold_t: p.threshold_t,
        u_correct: p.u_correct,
        c_esc: p.c_esc,
        oracle_success_prob: p.oracle_success_prob,
    }
}

/// Escalate iff `p_fail > policy->threshold_t`.
///
/// # Safety
/// `policy` must point to a `CrPolicy`; `out_verdict` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cr_decide(p_fail: f64, policy: *const CrPolicy, out_verdict: *mut CrVerdict) -> CrStatus {
    guard(|| {
        non_null(policy, "policy")?;
        let policy = RoutingPolicy::from(*policy);
        policy.validate().map_err(invalid)?;
        if !(0.0..=1.0).contains(&p_fail) {
            return Err(invalid(format!("p_fail = {p_fail} is outside [0, 1]")));
        }
        write_out(out_verdict, verdict_for(p_fail, policy.threshold_t).into(), "out_verdict")
    })
}

/// Runs features, prediction, answer aggregation and the decision on one
/// ensemble and writes the full decision record as a JSON string.
///
/// # Safety
/// `est` must be a live handle, `ensemble_json` a NUL-terminated string,
/// `policy` a valid pointer and `out_json` writable. Free the result with
/// `cr_string_free`.
#[no_mangle]
pub unsafe extern "C" fn cr_route_offline(
    est: *const CrEstimator,
    ensemble_json: *const c_char,
    task_kind: CrTaskKind,
    policy: *const CrPolicy,
    out_json: *mut *mut c_char,
) -> CrStatus {
    guard(|| {
        non_null(est, "est")?;
        non_null(policy, "policy")?;
        non_null(out_json, "out_json")?;
        let est = &*est;
        let policy = RoutingPolicy::from(*policy);
        let ensemble = parse_ensemble(str_arg(ensemble_json, "ensemble_json")?)?;
        let task_kind = match task_kind {
            CrTaskKind::Convergent => TaskKind::Convergent,
            CrTaskKind::OpenEnded => TaskKind::OpenEnded,
        };
        let features = build_feature_vector(&ensemble);
        let p_fail = est.inner.predict_p_fail(&features);
        let answer = aggregate_l1_answer(&ensemble, task_kind).ok();
        let decision = decide(p_fail, &policy, answer).map_err(|e| match e {
            cascade_router::decision::DecisionError::MissingAnswer => fail(CrStatus::MissingAnswer, e),
            other => invalid(other),
        })?;
        let doc = serde_json::json!({
            "query_id": ensemble.query_id,
            "estimator_id": est.inner.fingerprint(),
            "features": features,
            "decision": decision,
        });
        write_out(out_json, into_c_string(doc.to_string())?, "out_json")
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must be null or a string from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cr_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
