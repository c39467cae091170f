//! C interface to the harmonization library.
//!
//! Conventions: objects cross the boundary as opaque handles owned by this
//! library and released with their matching `*_free` function; every
//! fallible call returns a status code and leaves a message for
//! `cg_last_error` on failure; output parameters are written only on
//! success. Panics are caught at the boundary and reported as a status.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use combat_gam::cohort::{parse_cohort_csv, write_cohort_csv, CohortError, CohortSchema, CohortTable};
use combat_gam::combat::{
    apply_harmonization, fit_combat_gam, CombatError, FitConfig, HarmonizationModel,
};
use combat_gam::gam::SmoothSpec;
use combat_gam::serialize::to_json_g17;
use combat_gam::stats::{evaluate_cohort, EvaluationReport, FamilyRule, StatsError};
use combat_gam::synth::{generate_cohort, SynthConfig};

/// Result of every fallible call. Anything other than OK leaves a
/// description in `cg_last_error`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CgStatus {
    /// The call succeeded.
    Ok = 0,
    /// A required pointer was null or an argument was malformed.
    InvalidArgument = 1,
    /// The inputs were readable but failed a model or cohort check.
    Validation = 2,
    /// A file could not be read or written.
    Io = 3,
    /// Text failed to parse as CSV or JSON.
    Parse = 4,
    /// An internal invariant broke; the library state is still sound.
    Panic = 5,
}

/// Opaque cohort handle: subjects, covariates, and the feature matrix.
pub struct CgCohort {
    inner: CohortTable,
}

/// Opaque fitted-model handle.
pub struct CgModel {
    inner: HarmonizationModel,
}

/// Opaque evaluation-report handle.
pub struct CgReport {
    inner: EvaluationReport,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: impl Into<String>) {
    let message = message.into().replace('\0', " ");
    let stored = CString::new(message).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = stored);
}

fn fail(status: CgStatus, message: impl Into<String>) -> CgStatus {
    set_error(message);
    status
}

fn cohort_error_status(err: &CohortError) -> CgStatus {
    match err {
        CohortError::Io(_) => CgStatus::Io,
        CohortError::Csv(e) => match e.kind() {
            csv::ErrorKind::Io(_) => CgStatus::Io,
            _ => CgStatus::Parse,
        },
        _ => CgStatus::Validation,
    }
}

fn combat_error_status(err: &CombatError) -> CgStatus {
    match err {
        CombatError::Cohort(inner) => cohort_error_status(inner),
        _ => CgStatus::Validation,
    }
}

fn stats_error_status(err: &StatsError) -> CgStatus {
    match err {
        StatsError::Csv(_) => CgStatus::Io,
        _ => CgStatus::Validation,
    }
}

fn guarded<F: FnOnce() -> CgStatus>(body: F) -> CgStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => fail(CgStatus::Panic, "internal panic caught at the C boundary"),
    }
}

/// Reads a required UTF-8 string argument.
unsafe fn arg_str<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, CgStatus> {
    if ptr.is_null() {
        return Err(fail(CgStatus::InvalidArgument, format!("{name} is null")));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| fail(CgStatus::InvalidArgument, format!("{name} is not valid UTF-8")))
}

unsafe fn arg_ref<'a, T>(ptr: *const T, name: &str) -> Result<&'a T, CgStatus> {
    ptr.as_ref().ok_or_else(|| fail(CgStatus::InvalidArgument, format!("{name} is null")))
}

fn require_out<T>(out: *mut *mut T, name: &str) -> Result<(), CgStatus> {
    if out.is_null() {
        return Err(fail(CgStatus::InvalidArgument, format!("{name} is null")));
    }
    unsafe { *out = std::ptr::null_mut() };
    Ok(())
}

fn give<T>(out: *mut *mut T, value: T) -> CgStatus {
    unsafe { *out = Box::into_raw(Box::new(value)) };
    CgStatus::Ok
}

fn give_string(out: *mut *mut c_char, text: String) -> CgStatus {
    match CString::new(text) {
        Ok(c) => {
            unsafe { *out = c.into_raw() };
            CgStatus::Ok
        }
        Err(_) => fail(CgStatus::Panic, "output text contained an interior NUL"),
    }
}

/// Message describing the most recent failure on this thread. The pointer
/// stays valid until the next failing call on the same thread. Never null.
#[no_mangle]
pub extern "C" fn cg_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn cg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Releases a string returned by this library. Accepts null.
#[no_mangle]
pub extern "C" fn cg_string_free(text: *mut c_char) {
    if !text.is_null() {
        unsafe { drop(CString::from_raw(text)) };
    }
}

/// Loads a cohort from a CSV file using the default column names
/// (subject, site, age, sex; all remaining columns are features).
#[no_mangle]
pub extern "C" fn cg_cohort_read_csv(path: *const c_char, out: *mut *mut CgCohort) -> CgStatus {
    guarded(|| {
        if require_out(out, "out").is_err() {
            return CgStatus::InvalidArgument;
        }
        let path = match unsafe { arg_str(path, "path") } {
            Ok(p) => p,
            Err(status) => return status,
        };
        match parse_cohort_csv(Path::new(path), &CohortSchema::default()) {
            Ok(inner) => give(out, CgCohort { inner }),
            Err(err) => fail(cohort_error_status(&err), err.to_string()),
        }
    })
}

/// Writes a cohort to a CSV file with the default column names.
#[no_mangle]
pub extern "C" fn cg_cohort_write_csv(cohort: *const CgCohort, path: *const c_char) -> CgStatus {
    guarded(|| {
        let cohort = match unsafe { arg_ref(cohort, "cohort") } {
            Ok(c) => c,
            Err(status) => return status,
        };
        let path = match unsafe { arg_str(path, "path") } {
            Ok(p) => p,
            Err(status) => return status,
        };
        match write_cohort_csv(&cohort.inner, Path::new(path), &CohortSchema::default()) {
            Ok(()) => CgStatus::Ok,
            Err(err) => fail(cohort_error_status(&err), err.to_string()),
        }
    })
}

/// Generates a synthetic cohort. `config_json` may be null for the default
/// configuration, or a JSON object understood by the simulator (unknown
/// keys are rejected). When `truth_json` is non-null it receives the
/// ground-truth parameters as JSON; release it with `cg_string_free`.
#[no_mangle]
pub extern "C" fn cg_simulate_json(
    config_json: *const c_char,
    out: *mut *mut CgCohort,
    truth_json: *mut *mut c_char,
) -> CgStatus {
    guarded(|| {
        if require_out(out, "out").is_err() {
            return CgStatus::InvalidArgument;
        }
        let config = if config_json.is_null() {
            SynthConfig::default()
        } else {
            let text = match unsafe { arg_str(config_json, "config_json") } {
                Ok(t) => t,
                Err(status) => return status,
            };
            match serde_json::from_str(text) {
                Ok(c) => c,
                Err(err) => return fail(CgStatus::Parse, format!("config: {err}")),
            }
        };
        let (cohort, truth) = match generate_cohort(&config) {
            Ok(pair) => pair,
            Err(err) => return fail(CgStatus::Validation, err.to_string()),
        };
        if !truth_json.is_null() {
            let text = match to_json_g17(&truth) {
                Ok(t) => t,
                Err(err) => return fail(CgStatus::Panic, format!("serialize truth: {err}")),
            };
            let status = give_string(truth_json, text);
            if status != CgStatus::Ok {
                return status;
            }
        }
        give(out, CgCohort { inner: cohort })
    })
}

#[no_mangle]
pub extern "C" fn cg_cohort_free(cohort: *mut CgCohort) {
    if !cohort.is_null() {
        unsafe { drop(Box::from_raw(cohort)) };
    }
}

/// Number of rows. Zero when the handle is null.
#[no_mangle]
pub extern "C" fn cg_cohort_n_subjects(cohort: *const CgCohort) -> usize {
    unsafe { cohort.as_ref() }.map_or(0, |c| c.inner.n_subjects())
}

/// Number of feature columns. Zero when the handle is null.
#[no_mangle]
pub extern "C" fn cg_cohort_n_features(cohort: *const CgCohort) -> usize {
    unsafe { cohort.as_ref() }.map_or(0, |c| c.inner.n_features())
}

/// Number of distinct sites. Zero when the handle is null.
#[no_mangle]
pub extern "C" fn cg_cohort_n_sites(cohort: *const CgCohort) -> usize {
    unsafe { cohort.as_ref() }.map_or(0, |c| c.inner.site_index().len())
}

/// Fits the harmonization model with default settings. `use_pooling`
/// selects whether site parameters are stabilized across features.
#[no_mangle]
pub extern "C" fn cg_fit(
    cohort: *const CgCohort,
    use_pooling: bool,
    out: *mut *mut CgModel,
) -> CgStatus {
    guarded(|| {
        if require_out(out, "out").is_err() {
            return CgStatus::InvalidArgument;
        }
        let cohort = match unsafe { arg_ref(cohort, "cohort") } {
            Ok(c) => c,
            Err(status) => return status,
        };
        let config = FitConfig { eb: use_pooling, ..FitConfig::default() };
        match fit_combat_gam(&cohort.inner, &SmoothSpec::default(), &config) {
            Ok(outcome) => give(out, CgModel { inner: outcome.model }),
            Err(err) => fail(combat_error_status(&err), err.to_string()),
        }
    })
}

/// Applies a fitted model, producing a new harmonized cohort.
#[no_mangle]
pub extern "C" fn cg_apply(
    model: *const CgModel,
    cohort: *const CgCohort,
    out: *mut *mut CgCohort,
) -> CgStatus {
    guarded(|| {
        if require_out(out, "out").is_err() {
            return CgStatus::InvalidArgument;
        }
        let model = match unsafe { arg_ref(model, "model") } {
            Ok(m) => m,
            Err(status) => return status,
        };
        let cohort = match unsafe { arg_ref(cohort, "cohort") } {
            Ok(c) => c,
            Err(status) => return status,
        };
        match apply_harmonization(&cohort.inner, &model.inner) {
            Ok(result) => give(out, CgCohort { inner: result.table }),
            Err(err) => fail(combat_error_status(&err), err.to_string()),
        }
    })
}

/// Serializes a model to JSON. Release the string with `cg_string_free`.
#[no_mangle]
pub extern "C" fn cg_model_to_json(model: *const CgModel, out: *mut *mut c_char) -> CgStatus {
    guarded(|| {
        if out.is_null() {
            return fail(CgStatus::InvalidArgument, "out is null");
        }
        unsafe { *out = std::ptr::null_mut() };
        let model = match unsafe { arg_ref(model, "model") } {
            Ok(m) => m,
            Err(status) => return status,
        };
        match to_json_g17(&model.inner) {
            Ok(text) => give_string(out, text),
            Err(err) => fail(CgStatus::Panic, format!("serialize model: {err}")),
        }
    })
}

/// Restores a model from the JSON produced by `cg_model_to_json`.
#[no_mangle]
pub extern "C" fn cg_model_from_json(json: *const c_char, out: *mut *mut CgModel) -> CgStatus {
    guarded(|| {
        if require_out(out, "out").is_err() {
            return CgStatus::InvalidArgument;
        }
        let text = match unsafe { arg_str(json, "json") } {
            Ok(t) => t,
            Err(status) => return status,
        };
        match serde_json::from_str(text) {
            Ok(inner) => give(out, CgModel { inner }),
            Err(err) => fail(CgStatus::Parse, format!("model: {err}")),
        }
    })
}

#[no_mangle]
pub extern "C" fn cg_model_free(model: *mut CgModel) {
    if !model.is_null() {
        unsafe { drop(Box::from_raw(model)) };
    }
}

/// Tests every feature for residual site effects at FDR level `q`, with
/// features grouped into families by name prefix.
#[no_mangle]
pub extern "C" fn cg_evaluate(
    cohort: *const CgCohort,
    q: f64,
    out: *mut *mut CgReport,
) -> CgStatus {
    guarded(|| {
        if require_out(out, "out").is_err() {
            return CgStatus::InvalidArgument;
        }
        let cohort = match unsafe { arg_ref(cohort, "cohort") } {
            Ok(c) => c,
            Err(status) => return status,
        };
        match evaluate_cohort(&cohort.inner, &FamilyRule::MetricPrefix, q) {
            Ok(inner) => give(out, CgReport { inner }),
            Err(err) => fail(stats_error_status(&err), err.to_string()),
        }
    })
}

/// Number of features rejected after FDR. Zero when the handle is null.
#[no_mangle]
pub extern "C" fn cg_report_n_rejected(report: *const CgReport) -> usize {
    unsafe { report.as_ref() }.map_or(0, |r| r.inner.n_rejected)
}

/// Number of features tested. Zero when the handle is null.
#[no_mangle]
pub extern "C" fn cg_report_n_features(report: *const CgReport) -> usize {
    unsafe { report.as_ref() }.map_or(0, |r| r.inner.rows.len())
}

/// Serializes a report to JSON. Release the string with `cg_string_free`.
#[no_mangle]
pub extern "C" fn cg_report_to_json(report: *const CgReport, out: *mut *mut c_char) -> CgStatus {
    guarded(|| {
        if out.is_null() {
            return fail(CgStatus::InvalidArgument, "out is null");
        }
        unsafe { *out = std::ptr::null_mut() };
        let report = match unsafe { arg_ref(report, "report") } {
            Ok(r) => r,
            Err(status) => return status,
        };
        match to_json_g17(&report.inner) {
            Ok(text) => give_string(out, text),
            Err(err) => fail(CgStatus::Panic, format!("serialize report: {err}")),
        }
    })
}

#[no_mangle]
pub extern "C" fn cg_report_free(report: *mut CgReport) {
    if !report.is_null() {
        unsafe { drop(Box::from_raw(report)) };
    }
}
