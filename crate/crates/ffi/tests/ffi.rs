use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use sitelasso_ffi::*;

fn last_error() -> String {
    let p = sl_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn synthetic_plan_and_global_run() {
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(sl_dataset_synthetic(3, &mut ds), SlStatus::Ok);
        assert_eq!(sl_dataset_len(ds), 116);

        let mut plan = ptr::null_mut();
        assert_eq!(sl_plan_new(ds, 20, 35, 11, &mut plan), SlStatus::Ok);
        assert_eq!(sl_plan_n_splits(plan), 20);

        let label = CString::new("m2").unwrap();
        let mut run = ptr::null_mut();
        assert_eq!(sl_run_method(ds, plan, label.as_ptr(), 2, &mut run), SlStatus::Ok);
        assert_eq!(sl_run_n_members(run), 20);

        let (mut r2, mut rmse) = (f64::NAN, f64::NAN);
        let combined = CString::new("combined").unwrap();
        assert_eq!(sl_run_metrics(run, combined.as_ptr(), &mut r2, &mut rmse), SlStatus::Ok);
        assert!(r2 > 0.5 && r2 <= 1.0, "{r2}");
        assert!(rmse > 0.0);

        let mut small = [0.0; 10];
        let mut written = 0;
        assert_eq!(
            sl_run_predictions(run, small.as_mut_ptr(), small.len(), &mut written),
            SlStatus::BufferTooSmall
        );
        assert_eq!(written, 116);
        let mut buf = vec![0.0; 116];
        assert_eq!(sl_run_predictions(run, buf.as_mut_ptr(), buf.len(), &mut written), SlStatus::Ok);
        assert!(buf.iter().all(|v| v.is_finite()));

        sl_run_free(run);
        sl_plan_free(plan);
        sl_dataset_free(ds);
    }
}

#[test]
fn errors_map_to_status_codes() {
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(sl_dataset_read_csv(ptr::null(), &mut ds), SlStatus::NullPointer);
        assert!(last_error().contains("path"));

        let missing = CString::new("/nonexistent/points.csv").unwrap();
        assert_eq!(sl_dataset_read_csv(missing.as_ptr(), &mut ds), SlStatus::Data);
        assert!(ds.is_null());

        assert_eq!(sl_dataset_synthetic(1, &mut ds), SlStatus::Ok);
        let mut plan = ptr::null_mut();
        assert_eq!(sl_plan_new(ds, 5, 200, 0, &mut plan), SlStatus::Data);
        assert!(plan.is_null());

        assert_eq!(sl_plan_new(ds, 5, 35, 0, &mut plan), SlStatus::Ok);
        let bad = CString::new("m9").unwrap();
        let mut run = ptr::null_mut();
        assert_eq!(sl_run_method(ds, plan, bad.as_ptr(), 1, &mut run), SlStatus::Config);
        assert!(last_error().contains("m9"));

        let cfg = CString::new("/nonexistent/run.toml").unwrap();
        assert_eq!(sl_run_config(cfg.as_ptr()), SlStatus::Config);

        assert_eq!(sl_dataset_len(ptr::null()), 0);
        sl_dataset_free(ptr::null_mut());
        sl_plan_free(plan);
        sl_dataset_free(ds);
    }
}

#[test]
fn version_is_package_version() {
    let v = unsafe { CStr::from_ptr(sl_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_the_api_and_compiles() {
    let header = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("include/sitelasso.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "typedef struct SlDataset SlDataset",
        "SL_STATUS_BUFFER_TOO_SMALL",
        "sl_run_method",
        "sl_last_error_message",
    ] {
        assert!(text.contains(name), "header lacks {name}");
    }
    let Ok(out) = Command::new("cc").args(["-fsyntax-only", "-x", "c"]).arg(&header).output() else {
        eprintln!("no C compiler; syntax check skipped");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
