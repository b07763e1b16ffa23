//! C ABI for the `cope` library.
//!
//! The surface follows the usual handle-and-status pattern so it binds
//! cleanly from C, Python (ctypes/cffi), Julia, or anything else that
//! speaks the platform C ABI:
//!
//! - Objects live behind opaque handles (`CopeDataset`, `CopeEstimate`,
//!   `CopeExperiment`) created by `*_generate`/`*_run` calls and released
//!   by the matching `*_free`. Handles are not thread-safe; share them
//!   across threads only with external synchronization.
//! - Every fallible call returns a [`CopeStatus`]. On any status other
//!   than `COPE_STATUS_OK` the output arguments are untouched and
//!   [`cope_last_error_message`] returns a description of the failure
//!   (per thread, valid until the next failing call on that thread).
//! - Strings returned by accessor functions are borrowed from their
//!   handle and stay valid until the handle is freed; nothing returned
//!   by this library is ever freed by the caller directly.
//!
//! Rich configuration crosses the boundary as JSON rather than as a long
//! argument list: `cope_experiment_run_json` accepts the same document the
//! `cope experiment` CLI reads, and `cope_toy_evaluate` accepts the
//! nuisance-knob object from that document's `nuisance` field.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use cope::error::CopeError;
use cope::estimate::{cope_estimate, ValueEstimate};
use cope::harness::{run_experiment, toy_policy, ExperimentConfig};
use cope::model::Dataset;
use cope::nuisance::{fit_nuisances_tabular, NuisanceConfig};
use cope::sim::{build_toy_env, generate_dataset, SimConfig};

/// Outcome of a fallible call. Anything other than `OK` leaves the output
/// arguments untouched and records a message for
/// [`cope_last_error_message`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CopeStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// A string argument was not valid UTF-8.
    Utf8 = 2,
    /// An argument or configuration value was rejected.
    InvalidArgument = 3,
    /// A JSON document failed to parse.
    Json = 4,
    /// The computation itself failed (singular system, empty data, ...).
    Runtime = 5,
    /// An internal invariant was violated; the library state is still
    /// usable but the call did nothing.
    Panic = 6,
}

/// A batch of observed trajectories from the built-in tabular benchmark.
pub struct CopeDataset {
    inner: Dataset<usize>,
}

/// A point estimate with its confidence interval.
pub struct CopeEstimate {
    inner: ValueEstimate,
}

/// Results of a replication experiment: the per-replication rows and the
/// aggregated summary, both as CSV documents.
pub struct CopeExperiment {
    rows_csv: CString,
    summary_csv: CString,
    truth: f64,
    truth_se: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &CopeError) -> CopeStatus {
    match err {
        CopeError::InvalidArgument(_) | CopeError::InvalidConfig(_) => CopeStatus::InvalidArgument,
        CopeError::Json(_) => CopeStatus::Json,
        _ => CopeStatus::Runtime,
    }
}

fn fail(status: CopeStatus, message: &str) -> CopeStatus {
    set_error(message);
    status
}

fn fail_with(err: CopeError) -> CopeStatus {
    fail(status_of(&err), &err.to_string())
}

/// Runs `body` with panics converted into `COPE_STATUS_PANIC` so an
/// internal bug can never unwind across the ABI boundary.
fn guarded(body: impl FnOnce() -> CopeStatus) -> CopeStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(CopeStatus::Panic, &format!("internal panic: {message}"))
        }
    }
}

/// # Safety
/// `text` must be null or a valid NUL-terminated string.
unsafe fn required_str<'a>(text: *const c_char, what: &str) -> Result<&'a str, CopeStatus> {
    if text.is_null() {
        return Err(fail(CopeStatus::NullPointer, &format!("{what} is null")));
    }
    CStr::from_ptr(text)
        .to_str()
        .map_err(|_| fail(CopeStatus::Utf8, &format!("{what} is not valid UTF-8")))
}

unsafe fn required_out<T>(out: *mut T, what: &str) -> Result<(), CopeStatus> {
    if out.is_null() {
        return Err(fail(CopeStatus::NullPointer, &format!("{what} is null")));
    }
    Ok(())
}

unsafe fn required_ref<'a, T>(handle: *const T, what: &str) -> Result<&'a T, CopeStatus> {
    handle
        .as_ref()
        .ok_or_else(|| fail(CopeStatus::NullPointer, &format!("{what} is null")))
}

/// Library version as a static NUL-terminated string; never null, never
/// freed.
#[no_mangle]
pub extern "C" fn cope_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Description of the most recent failure on the calling thread, or an
/// empty string if nothing failed yet. The pointer stays valid until the
/// next failing call on the same thread; do not free it.
#[no_mangle]
pub extern "C" fn cope_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Draws a dataset of `n_trajectories` trajectories of length `horizon`
/// from the built-in tabular benchmark under its behavior policy,
/// discarding `burn_in` warm-up steps per trajectory. The draw is a pure
/// function of the arguments; the same seed always yields the same data.
///
/// On success writes a handle to `out`; release it with
/// [`cope_dataset_free`].
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cope_toy_dataset_generate(
    n_trajectories: usize,
    horizon: usize,
    burn_in: usize,
    seed: u64,
    out: *mut *mut CopeDataset,
) -> CopeStatus {
    guarded(|| {
        if let Err(status) = required_out(out, "out") {
            return status;
        }
        let cfg = SimConfig {
            n_trajectories,
            horizon,
            burn_in,
            seed,
        };
        match generate_dataset(&build_toy_env(), &cfg) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(CopeDataset { inner }));
                CopeStatus::Ok
            }
            Err(err) => fail_with(err),
        }
    })
}

/// Number of trajectories in the dataset; 0 for a null handle.
///
/// # Safety
/// `dataset` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn cope_dataset_n_trajectories(dataset: *const CopeDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.inner.n_trajectories())
}

/// Total number of recorded transitions in the dataset; 0 for a null
/// handle.
///
/// # Safety
/// `dataset` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn cope_dataset_total_steps(dataset: *const CopeDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.inner.total_steps())
}

/// Releases a dataset handle. Null is accepted and ignored.
///
/// # Safety
/// `dataset` must be null or a live handle, and must not be used again
/// after this call.
#[no_mangle]
pub unsafe extern "C" fn cope_dataset_free(dataset: *mut CopeDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Estimates the discounted value of a target policy on the built-in
/// tabular benchmark from an observed dataset: fits every nuisance on the
/// dataset, then evaluates the mediated doubly-robust estimator with a
/// two-sided `1 - alpha` confidence interval.
///
/// `policy` selects the evaluated policy, `"target"` or `"uniform"`.
/// `nuisance_json` may be null for default fitting knobs, or a JSON object
/// such as `{"laplace_alpha": 0.5}`; omitted fields keep their defaults.
///
/// On success writes a handle to `out`; release it with
/// [`cope_estimate_free`].
///
/// # Safety
/// `dataset` must be a live handle, `policy` a valid NUL-terminated
/// string, `nuisance_json` null or a valid NUL-terminated string, and
/// `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cope_toy_evaluate(
    dataset: *const CopeDataset,
    policy: *const c_char,
    gamma: f64,
    alpha: f64,
    nuisance_json: *const c_char,
    out: *mut *mut CopeEstimate,
) -> CopeStatus {
    guarded(|| {
        let dataset = match required_ref(dataset, "dataset") {
            Ok(d) => d,
            Err(status) => return status,
        };
        let policy_id = match required_str(policy, "policy") {
            Ok(p) => p,
            Err(status) => return status,
        };
        if let Err(status) = required_out(out, "out") {
            return status;
        }
        let ncfg = if nuisance_json.is_null() {
            NuisanceConfig::default()
        } else {
            let text = match required_str(nuisance_json, "nuisance_json") {
                Ok(t) => t,
                Err(status) => return status,
            };
            match serde_json::from_str(text) {
                Ok(cfg) => cfg,
                Err(err) => return fail(CopeStatus::Json, &format!("nuisance_json: {err}")),
            }
        };
        let result = toy_policy(policy_id).and_then(|pi| {
            let env = build_toy_env();
            let spec = env.tabular_spec();
            let nuis = fit_nuisances_tabular(
                &dataset.inner,
                &pi,
                spec.n_states(),
                spec.n_actions(),
                spec.n_mediators(),
                gamma,
                &ncfg,
            )?;
            cope_estimate(&dataset.inner, &nuis, &pi, gamma, alpha)
        });
        match result {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(CopeEstimate { inner }));
                CopeStatus::Ok
            }
            Err(err) => fail_with(err),
        }
    })
}

/// Point estimate of the discounted value; NaN for a null handle.
///
/// # Safety
/// `estimate` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn cope_estimate_value(estimate: *const CopeEstimate) -> f64 {
    estimate.as_ref().map_or(f64::NAN, |e| e.inner.estimate)
}

/// Standard error of the estimate; NaN for a null handle.
///
/// # Safety
/// `estimate` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn cope_estimate_se(estimate: *const CopeEstimate) -> f64 {
    estimate.as_ref().map_or(f64::NAN, |e| e.inner.se)
}

/// Writes the confidence interval endpoints to `lower` and `upper`.
///
/// # Safety
/// `estimate` must be a live handle; `lower` and `upper` must be valid
/// pointers.
#[no_mangle]
pub unsafe extern "C" fn cope_estimate_ci(
    estimate: *const CopeEstimate,
    lower: *mut f64,
    upper: *mut f64,
) -> CopeStatus {
    guarded(|| {
        let estimate = match required_ref(estimate, "estimate") {
            Ok(e) => e,
            Err(status) => return status,
        };
        if let Err(status) = required_out(lower, "lower") {
            return status;
        }
        if let Err(status) = required_out(upper, "upper") {
            return status;
        }
        *lower = estimate.inner.ci_lower;
        *upper = estimate.inner.ci_upper;
        CopeStatus::Ok
    })
}

/// Releases an estimate handle. Null is accepted and ignored.
///
/// # Safety
/// `estimate` must be null or a live handle, and must not be used again
/// after this call.
#[no_mangle]
pub unsafe extern "C" fn cope_estimate_free(estimate: *mut CopeEstimate) {
    if !estimate.is_null() {
        drop(Box::from_raw(estimate));
    }
}

/// Runs a full replication experiment from a JSON configuration — the
/// same document accepted by `cope experiment --config`. Blocks until
/// every replication finishes.
///
/// On success writes a handle to `out`; release it with
/// [`cope_experiment_free`].
///
/// # Safety
/// `config_json` must be a valid NUL-terminated string and `out` a valid
/// pointer.
#[no_mangle]
pub unsafe extern "C" fn cope_experiment_run_json(
    config_json: *const c_char,
    out: *mut *mut CopeExperiment,
) -> CopeStatus {
    guarded(|| {
        let text = match required_str(config_json, "config_json") {
            Ok(t) => t,
            Err(status) => return status,
        };
        if let Err(status) = required_out(out, "out") {
            return status;
        }
        let config: ExperimentConfig = match serde_json::from_str(text) {
            Ok(cfg) => cfg,
            Err(err) => return fail(CopeStatus::Json, &format!("config_json: {err}")),
        };
        match run_experiment(&config) {
            Ok(output) => {
                let rows_csv = CString::new(output.rows_csv()).unwrap_or_default();
                let summary_csv = CString::new(output.summary_csv()).unwrap_or_default();
                *out = Box::into_raw(Box::new(CopeExperiment {
                    rows_csv,
                    summary_csv,
                    truth: output.truth,
                    truth_se: output.truth_se,
                }));
                CopeStatus::Ok
            }
            Err(err) => fail_with(err),
        }
    })
}

/// Per-replication results as a CSV document. The pointer borrows from
/// the handle: it stays valid until [`cope_experiment_free`] and must not
/// be freed. Null for a null handle.
///
/// # Safety
/// `experiment` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn cope_experiment_rows_csv(
    experiment: *const CopeExperiment,
) -> *const c_char {
    experiment
        .as_ref()
        .map_or(ptr::null(), |e| e.rows_csv.as_ptr())
}

/// Aggregated per-design summary as a CSV document, borrowed from the
/// handle exactly like [`cope_experiment_rows_csv`].
///
/// # Safety
/// `experiment` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn cope_experiment_summary_csv(
    experiment: *const CopeExperiment,
) -> *const c_char {
    experiment
        .as_ref()
        .map_or(ptr::null(), |e| e.summary_csv.as_ptr())
}

/// Writes the ground-truth target value used for the experiment's error
/// columns and its Monte Carlo standard error (0 when the truth is
/// exact).
///
/// # Safety
/// `experiment` must be a live handle; `truth` and `truth_se` must be
/// valid pointers.
#[no_mangle]
pub unsafe extern "C" fn cope_experiment_truth(
    experiment: *const CopeExperiment,
    truth: *mut f64,
    truth_se: *mut f64,
) -> CopeStatus {
    guarded(|| {
        let experiment = match required_ref(experiment, "experiment") {
            Ok(e) => e,
            Err(status) => return status,
        };
        if let Err(status) = required_out(truth, "truth") {
            return status;
        }
        if let Err(status) = required_out(truth_se, "truth_se") {
            return status;
        }
        *truth = experiment.truth;
        *truth_se = experiment.truth_se;
        CopeStatus::Ok
    })
}

/// Releases an experiment handle (and the CSV strings borrowed from it).
/// Null is accepted and ignored.
///
/// # Safety
/// `experiment` must be null or a live handle, and must not be used again
/// after this call.
#[no_mangle]
pub unsafe extern "C" fn cope_experiment_free(experiment: *mut CopeExperiment) {
    if !experiment.is_null() {
        drop(Box::from_raw(experiment));
    }
}
