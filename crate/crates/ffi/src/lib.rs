//! C ABI for sitelasso.
//!
//! Every function returns an [`SlStatus`]. On failure the message is kept per
//! thread and read with [`sl_last_error_message`]. Handles are opaque and
//! released with their `_free` function.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use sitelasso::config::RunConfig;
use sitelasso::cv::{make_splits, SplitPlan};
use sitelasso::dataset::PointDataset;
use sitelasso::geo::{generate_synthetic, SyntheticSpec};
use sitelasso::methods::{run_methods, Method, MethodRun, MethodSettings};
use sitelasso::pipeline::execute_run;
use sitelasso::{Error, ErrorClass};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlStatus {
    Ok = 0,
    Numerical = 1,
    Config = 2,
    Data = 3,
    NullPointer = 4,
    InvalidUtf8 = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// Point observations.
pub struct SlDataset(PointDataset);

/// Train/validation split plan.
pub struct SlPlan(SplitPlan);

/// Fitted method with its predictions and metrics.
pub struct SlRun(MethodRun);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: SlStatus, msg: impl Into<String>) -> SlStatus {
    set_error(msg.into());
    status
}

fn from_error(e: Error) -> SlStatus {
    let status = match e.class() {
        ErrorClass::Numerical => SlStatus::Numerical,
        ErrorClass::Config => SlStatus::Config,
        ErrorClass::Data => SlStatus::Data,
    };
    fail(status, e.to_string())
}

fn guard(f: impl FnOnce() -> SlStatus) -> SlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(SlStatus::Panic, "internal panic"),
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, SlStatus> {
    if p.is_null() {
        return Err(fail(SlStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(SlStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, SlStatus> {
    p.as_ref().ok_or_else(|| fail(SlStatus::NullPointer, format!("{what} is null")))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> SlStatus {
    *out = Box::into_raw(Box::new(value));
    SlStatus::Ok
}

macro_rules! tri {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

macro_rules! core {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(e) => return from_error(e),
        }
    };
}

/// Last error message on this thread, or null when none was recorded.
/// Valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sl_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn sl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Reads a point CSV.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sl_dataset_read_csv(path: *const c_char, out: *mut *mut SlDataset) -> SlStatus {
    guard(|| {
        if out.is_null() {
            return fail(SlStatus::NullPointer, "out is null");
        }
        let path = tri!(str_arg(path, "path"));
        let ds = core!(PointDataset::read_csv(Path::new(path)));
        put(out, SlDataset(ds))
    })
}

/// Points of the default two-site synthetic dataset for `seed`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sl_dataset_synthetic(seed: u64, out: *mut *mut SlDataset) -> SlStatus {
    guard(|| {
        if out.is_null() {
            return fail(SlStatus::NullPointer, "out is null");
        }
        let data = core!(generate_synthetic(&SyntheticSpec::two_site_default(seed)));
        put(out, SlDataset(data.points))
    })
}

/// Number of rows, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn sl_dataset_len(ds: *const SlDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.len())
}

/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sl_dataset_free(ds: *mut SlDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Draws `n_splits` splits with `train_per_site` training rows at every site.
///
/// # Safety
/// `ds` must be a live dataset handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sl_plan_new(
    ds: *const SlDataset,
    n_splits: usize,
    train_per_site: usize,
    seed: u64,
    out: *mut *mut SlPlan,
) -> SlStatus {
    guard(|| {
        if out.is_null() {
            return fail(SlStatus::NullPointer, "out is null");
        }
        let ds = tri!(ref_arg(ds, "dataset"));
        let quotas: BTreeMap<String, usize> = ds.0.sites().into_iter().map(|s| (s, train_per_site)).collect();
        let plan = core!(make_splits(&ds.0, n_splits, &quotas, seed));
        put(out, SlPlan(plan))
    })
}

/// Number of splits, or 0 for a null handle.
///
/// # Safety
/// `plan` must be null or a live plan handle.
#[no_mangle]
pub unsafe extern "C" fn sl_plan_n_splits(plan: *const SlPlan) -> usize {
    plan.as_ref().map_or(0, |p| p.0.n_splits())
}

/// # Safety
/// `plan` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sl_plan_free(plan: *mut SlPlan) {
    if !plan.is_null() {
        drop(Box::from_raw(plan));
    }
}

/// Fits one method (`m1-<site>`, `m2`, `m3` or `m4`) with default settings.
///
/// # Safety
/// `ds` and `plan` must be live handles, `method` a NUL-terminated string
/// and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sl_run_method(
    ds: *const SlDataset,
    plan: *const SlPlan,
    method: *const c_char,
    workers: usize,
    out: *mut *mut SlRun,
) -> SlStatus {
    guard(|| {
        if out.is_null() {
            return fail(SlStatus::NullPointer, "out is null");
        }
        let ds = tri!(ref_arg(ds, "dataset"));
        let plan = tri!(ref_arg(plan, "plan"));
        let label = tri!(str_arg(method, "method"));
        let m = core!(Method::parse(label, &ds.0.sites()));
        let settings = MethodSettings {
            workers: workers.max(1),
            ..MethodSettings::default()
        };
        let runs = core!(run_methods(&ds.0, &plan.0, &settings, &[m]));
        match runs.into_iter().next() {
            Some(r) => put(out, SlRun(r)),
            None => fail(SlStatus::Numerical, "no run was produced"),
        }
    })
}

/// R² and RMSE for `target`: a site id or `combined`.
///
/// # Safety
/// `run` must be a live handle, `target` a NUL-terminated string and the
/// output pointers valid.
#[no_mangle]
pub unsafe extern "C" fn sl_run_metrics(
    run: *const SlRun,
    target: *const c_char,
    r_squared: *mut f64,
    rmse: *mut f64,
) -> SlStatus {
    guard(|| {
        if r_squared.is_null() || rmse.is_null() {
            return fail(SlStatus::NullPointer, "output pointer is null");
        }
        let run = tri!(ref_arg(run, "run"));
        let target = tri!(str_arg(target, "target"));
        match run.0.metrics.get(target) {
            Some(m) => {
                *r_squared = m.r_squared;
                *rmse = m.rmse;
                SlStatus::Ok
            }
            None => fail(SlStatus::Config, format!("no metrics for target `{target}`")),
        }
    })
}

/// Number of ensemble members, or 0 for a null handle.
///
/// # Safety
/// `run` must be null or a live run handle.
#[no_mangle]
pub unsafe extern "C" fn sl_run_n_members(run: *const SlRun) -> usize {
    run.as_ref().map_or(0, |r| r.0.ensemble.len())
}

/// Copies the per-row predictions into `buf`. `len` must be at least the
/// dataset length; the count written goes to `written`.
///
/// # Safety
/// `run` must be a live handle, `buf` valid for `len` writes and `written`
/// a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sl_run_predictions(
    run: *const SlRun,
    buf: *mut f64,
    len: usize,
    written: *mut usize,
) -> SlStatus {
    guard(|| {
        if buf.is_null() || written.is_null() {
            return fail(SlStatus::NullPointer, "output pointer is null");
        }
        let run = tri!(ref_arg(run, "run"));
        let p = &run.0.predictions;
        *written = p.len();
        if len < p.len() {
            return fail(SlStatus::BufferTooSmall, format!("buffer holds {len}, need {}", p.len()));
        }
        std::ptr::copy_nonoverlapping(p.as_ptr(), buf, p.len());
        SlStatus::Ok
    })
}

/// # Safety
/// `run` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sl_run_free(run: *mut SlRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Runs the pipeline described by a TOML config and writes its outputs.
///
/// # Safety
/// `config_path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sl_run_config(config_path: *const c_char) -> SlStatus {
    guard(|| {
        let path = tri!(str_arg(config_path, "config_path"));
        let cfg = core!(RunConfig::load(Path::new(path)));
        core!(execute_run(&cfg));
        SlStatus::Ok
    })
}
