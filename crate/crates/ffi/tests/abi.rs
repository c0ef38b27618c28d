use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use chiefray_ffi::*;

fn last_error() -> String {
    let p = chiefray_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn small_json() -> CString {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/configs/small_bench.json");
    CString::new(std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn default_bench_ground_truth() {
    unsafe {
        let mut b = ptr::null_mut();
        assert_eq!(chiefray_bench_default(&mut b), ChiefrayStatus::Ok);
        assert!(chiefray_last_error().is_null());
        let mut k = ChiefrayIntrinsics {
            fx: 0.0,
            fy: 0.0,
            cx: 0.0,
            cy: 0.0,
        };
        assert_eq!(chiefray_bench_ground_truth(b, &mut k), ChiefrayStatus::Ok);
        assert!((k.fx - 18000.0 / 982.0 / 0.01).abs() < 1e-9);
        assert_eq!((k.cx, k.cy), (409.5, 419.5));
        assert_eq!(chiefray_bench_pinhole_count(b), 360);

        // JSON round trip through the C strings.
        let mut s = ptr::null_mut();
        assert_eq!(chiefray_bench_to_json(b, &mut s), ChiefrayStatus::Ok);
        let mut b2 = ptr::null_mut();
        assert_eq!(chiefray_bench_from_json(s, &mut b2), ChiefrayStatus::Ok);
        let mut k2 = k;
        chiefray_bench_ground_truth(b2, &mut k2);
        assert_eq!(k, k2);
        chiefray_string_free(s);
        chiefray_bench_free(b);
        chiefray_bench_free(b2);
    }
}

#[test]
fn errors_carry_status_and_message() {
    unsafe {
        let mut b = ptr::null_mut();
        assert_eq!(
            chiefray_bench_from_json(ptr::null(), &mut b),
            ChiefrayStatus::InvalidArgument
        );
        assert!(last_error().contains("json is null"));
        assert!(b.is_null());

        let bad = CString::new(r#"{"projector": 3}"#).unwrap();
        assert_eq!(
            chiefray_bench_from_json(bad.as_ptr(), &mut b),
            ChiefrayStatus::InvalidInput
        );
        assert!(last_error().contains("invalid-config"), "{}", last_error());

        let mut r = ptr::null_mut();
        let missing = CString::new("/nonexistent/report.json").unwrap();
        assert_eq!(
            chiefray_report_load(missing.as_ptr(), &mut r),
            ChiefrayStatus::Io
        );
        assert!(last_error().starts_with("io:"));

        let mut k = ChiefrayIntrinsics {
            fx: 0.0,
            fy: 0.0,
            cx: 0.0,
            cy: 0.0,
        };
        assert_eq!(
            chiefray_report_intrinsics(ptr::null(), &mut k),
            ChiefrayStatus::InvalidArgument
        );
        assert_eq!(chiefray_report_excluded(ptr::null(), ptr::null_mut(), 0), 0);
        chiefray_bench_free(ptr::null_mut());
        chiefray_report_free(ptr::null_mut());
        chiefray_string_free(ptr::null_mut());
    }
}

#[test]
fn run_options_are_validated() {
    unsafe {
        let json = small_json();
        let mut b = ptr::null_mut();
        assert_eq!(
            chiefray_bench_from_json(json.as_ptr(), &mut b),
            ChiefrayStatus::Ok
        );
        let dir = tempfile::tempdir().unwrap();
        let out = CString::new(dir.path().to_str().unwrap()).unwrap();
        let opts = ChiefrayRunOptions {
            max_exclusion: 0.5,
            ..chiefray_run_options_default()
        };
        let mut r = ptr::null_mut();
        assert_eq!(
            chiefray_run(b, out.as_ptr(), &opts, &mut r),
            ChiefrayStatus::InvalidInput
        );
        assert!(last_error().contains("max_exclusion"), "{}", last_error());
        assert!(r.is_null());
        chiefray_bench_free(b);
    }
}

#[test]
fn run_small_bench_end_to_end() {
    unsafe {
        let json = small_json();
        let mut b = ptr::null_mut();
        assert_eq!(
            chiefray_bench_from_json(json.as_ptr(), &mut b),
            ChiefrayStatus::Ok
        );
        let mut gt = ChiefrayIntrinsics {
            fx: 0.0,
            fy: 0.0,
            cx: 0.0,
            cy: 0.0,
        };
        chiefray_bench_ground_truth(b, &mut gt);

        let dir = tempfile::tempdir().unwrap();
        let out = CString::new(dir.path().to_str().unwrap()).unwrap();
        let mut r = ptr::null_mut();
        assert_eq!(
            chiefray_run(b, out.as_ptr(), ptr::null(), &mut r),
            ChiefrayStatus::Ok,
            "{}",
            {
                let p = chiefray_last_error();
                if p.is_null() {
                    String::new()
                } else {
                    CStr::from_ptr(p).to_string_lossy().into_owned()
                }
            }
        );

        let mut k = gt;
        assert_eq!(chiefray_report_intrinsics(r, &mut k), ChiefrayStatus::Ok);
        assert!((k.fx / gt.fx - 1.0).abs() < 0.01, "{k:?} vs {gt:?}");
        assert!(
            (k.cx - gt.cx).abs() < 2.0 && (k.cy - gt.cy).abs() < 2.0,
            "{k:?}"
        );
        let mut mrpe = f64::NAN;
        assert_eq!(
            chiefray_report_mrpe(r, &mut mrpe, ptr::null_mut()),
            ChiefrayStatus::Ok
        );
        assert!(mrpe > 0.0 && mrpe < 0.5);

        let n = chiefray_report_excluded(r, ptr::null_mut(), 0);
        let mut ids = vec![usize::MAX; n + 1];
        assert_eq!(chiefray_report_excluded(r, ids.as_mut_ptr(), ids.len()), n);
        assert_eq!(ids[n], usize::MAX);

        let mut ev = ChiefrayEvalSummary {
            count: 0,
            mean_mm: 0.0,
            std_mm: 0.0,
            max_mm: 0.0,
        };
        assert_eq!(chiefray_report_evaluate(r, b, &mut ev), ChiefrayStatus::Ok);
        assert_eq!(ev.count, 70);
        assert!(ev.mean_mm < 1.0 && ev.max_mm >= ev.mean_mm);

        // The report on disk matches the handle.
        let path = CString::new(dir.path().join("report.json").to_str().unwrap()).unwrap();
        let mut r2 = ptr::null_mut();
        assert_eq!(
            chiefray_report_load(path.as_ptr(), &mut r2),
            ChiefrayStatus::Ok
        );
        let mut k2 = gt;
        chiefray_report_intrinsics(r2, &mut k2);
        assert_eq!(k, k2);
        assert!(dir.path().join("manifest.json").exists());

        chiefray_report_free(r);
        chiefray_report_free(r2);
        chiefray_bench_free(b);
    }
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(chiefray_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        r#"#include "chiefray.h"
int use(void) {
    ChiefrayBench *b = 0;
    ChiefrayRunOptions o = chiefray_run_options_default();
    ChiefrayIntrinsics k;
    if (chiefray_bench_default(&b) != CHIEFRAY_STATUS_OK) return 1;
    chiefray_bench_ground_truth(b, &k);
    chiefray_bench_free(b);
    return o.keep_stack ? 2 : (int)k.fx;
}
"#,
    )
    .unwrap();
    for (cc, std) in [("cc", "-std=c99"), ("c++", "-std=c++17")] {
        let mut cmd = Command::new(cc);
        cmd.arg(std)
            .arg("-Wall")
            .arg("-Werror")
            .arg("-fsyntax-only")
            .arg("-I")
            .arg(&include);
        if cc == "c++" {
            cmd.args(["-x", "c++"]);
        }
        let out = match cmd.arg(&src).output() {
            Ok(o) => o,
            Err(e) => {
                eprintln!("skipping {cc}: {e}");
                continue;
            }
        };
        assert!(
            out.status.success(),
            "{cc}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
}
