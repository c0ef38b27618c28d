//! C ABI over the chiefray toolkit.
//!
//! Every fallible call returns a [`ChiefrayStatus`]; on failure the message
//! is available from [`chiefray_last_error`] on the same thread. Objects
//! come back as opaque handles that the caller releases with the matching
//! `_free` function. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use chiefray::artifacts::{read_report, write_bench};
use chiefray::calibrate::{Board, CalibrationResult};
use chiefray::cli::{cmd_run, evaluate_report, CalibrationArgs, RenderArgs, RunArgs};
use chiefray::optics::BenchConfig;
use chiefray::Error;

/// Result of a call. The non-zero values match the exit codes of the
/// `chiefray` command line tool, plus two that only arise here.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChiefrayStatus {
    Ok = 0,
    /// Null pointer, bad UTF-8 or an argument out of range.
    InvalidArgument = 1,
    /// Invalid configuration, malformed file or stale checksum.
    InvalidInput = 2,
    /// A stage could not complete (degenerate geometry, no blobs, ...).
    Failed = 3,
    Io = 4,
    /// A bug: the library panicked.
    Internal = 5,
}

/// Simulated bench description.
pub struct ChiefrayBench(BenchConfig);

/// Calibration result.
pub struct ChiefrayReport(CalibrationResult);

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChiefrayIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChiefrayRunOptions {
    /// Gaussian noise on measured scanner points (scan px).
    pub noise_sigma: f64,
    /// Largest fraction of sets the robust loop may exclude, in [0, 0.2].
    pub max_exclusion: f64,
    /// Additive sensor noise as a fraction of the white level.
    pub irradiance_noise: f64,
    /// Used only when `use_seed` is set; otherwise the bench seed applies.
    pub seed: u64,
    pub use_seed: bool,
    /// Use blob-centre correspondences instead of chief rays.
    pub naive_chief: bool,
    /// Also write every pattern and scan frame.
    pub keep_stack: bool,
}

impl Default for ChiefrayRunOptions {
    fn default() -> Self {
        Self {
            noise_sigma: 0.0,
            max_exclusion: 0.10,
            irradiance_noise: 0.0,
            seed: 0,
            use_seed: false,
            naive_chief: false,
            keep_stack: false,
        }
    }
}

/// Dot-error statistics on the evaluation board (mm).
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChiefrayEvalSummary {
    pub count: usize,
    pub mean_mm: f64,
    pub std_mm: f64,
    pub max_mm: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(ChiefrayStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match chiefray::cli::exit_code(&e) {
            2 => ChiefrayStatus::InvalidInput,
            4 => ChiefrayStatus::Io,
            _ => ChiefrayStatus::Failed,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: &str) -> Failure {
    Failure(ChiefrayStatus::InvalidArgument, msg.to_string())
}

/// Runs `f`, records any failure and converts it to a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ChiefrayStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ChiefrayStatus::Ok,
        Ok(Err(Failure(s, msg))) => {
            set_error(msg);
            s
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            ChiefrayStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(invalid(&format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(&format!("{what} is not UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| invalid(&format!("{what} is null")))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(invalid("output pointer is null"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

fn intrinsics(k: chiefray::geometry::Intrinsics) -> ChiefrayIntrinsics {
    ChiefrayIntrinsics {
        fx: k.fx,
        fy: k.fy,
        cx: k.cx,
        cy: k.cy,
    }
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call into the library from this thread.
#[no_mangle]
pub extern "C" fn chiefray_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn chiefray_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[no_mangle]
pub extern "C" fn chiefray_run_options_default() -> ChiefrayRunOptions {
    ChiefrayRunOptions::default()
}

/// The default tilted-scanner bench.
///
/// # Safety
/// `out` must be a valid pointer to writable storage.
#[no_mangle]
pub unsafe extern "C" fn chiefray_bench_default(out: *mut *mut ChiefrayBench) -> ChiefrayStatus {
    guard(|| put(out, ChiefrayBench(BenchConfig::default_bench())))
}

/// The default bench with the scanner parallel to the lens.
///
/// # Safety
/// `out` must be a valid pointer to writable storage.
#[no_mangle]
pub unsafe extern "C" fn chiefray_bench_parallel(out: *mut *mut ChiefrayBench) -> ChiefrayStatus {
    guard(|| put(out, ChiefrayBench(BenchConfig::parallel_bench())))
}

/// Parses and validates a bench from JSON text.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn chiefray_bench_from_json(
    json: *const c_char,
    out: *mut *mut ChiefrayBench,
) -> ChiefrayStatus {
    guard(|| {
        let text = str_arg(json, "json")?;
        put(out, ChiefrayBench(BenchConfig::from_json(text)?))
    })
}

/// Serializes a bench as JSON. Release the string with
/// [`chiefray_string_free`].
///
/// # Safety
/// `bench` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn chiefray_bench_to_json(
    bench: *const ChiefrayBench,
    out: *mut *mut c_char,
) -> ChiefrayStatus {
    guard(|| {
        let b = handle(bench, "bench")?;
        if out.is_null() {
            return Err(invalid("output pointer is null"));
        }
        let c = CString::new(b.0.to_json()).map_err(|_| invalid("JSON contains NUL"))?;
        *out = c.into_raw();
        Ok(())
    })
}

/// Intrinsics of the simulated projector.
///
/// # Safety
/// `bench` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn chiefray_bench_ground_truth(
    bench: *const ChiefrayBench,
    out: *mut ChiefrayIntrinsics,
) -> ChiefrayStatus {
    guard(|| {
        let b = handle(bench, "bench")?;
        let out = out
            .as_mut()
            .ok_or_else(|| invalid("output pointer is null"))?;
        *out = intrinsics(b.0.ground_truth_intrinsics());
        Ok(())
    })
}

/// Total pinholes over all masks.
///
/// # Safety
/// `bench` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn chiefray_bench_pinhole_count(bench: *const ChiefrayBench) -> usize {
    bench.as_ref().map_or(0, |b| b.0.pinhole_count())
}

/// # Safety
/// `bench` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn chiefray_bench_free(bench: *mut ChiefrayBench) {
    if !bench.is_null() {
        drop(Box::from_raw(bench));
    }
}

/// Simulates, decodes and calibrates the bench, writing every artifact and
/// a manifest into `out_dir` (created if needed). `options` may be null for
/// defaults.
///
/// # Safety
/// `bench` must be a live handle, `out_dir` a NUL-terminated string,
/// `options` null or valid, and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn chiefray_run(
    bench: *const ChiefrayBench,
    out_dir: *const c_char,
    options: *const ChiefrayRunOptions,
    out: *mut *mut ChiefrayReport,
) -> ChiefrayStatus {
    guard(|| {
        let b = handle(bench, "bench")?;
        let dir = PathBuf::from(str_arg(out_dir, "out_dir")?);
        let o = options.as_ref().copied().unwrap_or_default();
        if out.is_null() {
            return Err(invalid("output pointer is null"));
        }
        std::fs::create_dir_all(&dir)
            .map_err(|e| Failure(ChiefrayStatus::Io, format!("io: {}: {e}", dir.display())))?;
        let config = dir.join("bench.json");
        write_bench(&config, &b.0)?;
        let args = RunArgs {
            config,
            out: dir,
            calib: CalibrationArgs {
                noise_sigma: o.noise_sigma,
                max_exclusion: o.max_exclusion,
            },
            naive_chief: o.naive_chief,
            render: RenderArgs {
                seed: o.use_seed.then_some(o.seed),
                samples: None,
                irradiance_noise: o.irradiance_noise,
            },
            keep_stack: o.keep_stack,
        };
        let report = cmd_run(&args).map_err(|e| {
            let mut f = Failure::from(e.source);
            f.1 = format!("stage {}: {}", e.stage, f.1);
            f
        })?;
        put(out, ChiefrayReport(report))
    })
}

/// Loads a `report.json` written by a run.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn chiefray_report_load(
    path: *const c_char,
    out: *mut *mut ChiefrayReport,
) -> ChiefrayStatus {
    guard(|| {
        let p = PathBuf::from(str_arg(path, "path")?);
        put(out, ChiefrayReport(read_report(&p)?))
    })
}

/// # Safety
/// `report` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn chiefray_report_intrinsics(
    report: *const ChiefrayReport,
    out: *mut ChiefrayIntrinsics,
) -> ChiefrayStatus {
    guard(|| {
        let r = handle(report, "report")?;
        let out = out
            .as_mut()
            .ok_or_else(|| invalid("output pointer is null"))?;
        *out = intrinsics(r.0.intrinsics());
        Ok(())
    })
}

/// Mean reprojection errors: projector px and scanner px. Either output
/// may be null.
///
/// # Safety
/// `report` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn chiefray_report_mrpe(
    report: *const ChiefrayReport,
    projector_px: *mut f64,
    scanner_px: *mut f64,
) -> ChiefrayStatus {
    guard(|| {
        let r = handle(report, "report")?;
        if let Some(p) = projector_px.as_mut() {
            *p = r.0.mrpe_projector_px;
        }
        if let Some(s) = scanner_px.as_mut() {
            *s = r.0.mrpe_scanner_px;
        }
        Ok(())
    })
}

/// Copies up to `capacity` excluded pinhole ids (in exclusion order) into
/// `ids` and returns the total number excluded. Pass `ids = NULL` to query
/// the count.
///
/// # Safety
/// `report` must be a live handle or null (returns 0); `ids` must hold
/// `capacity` elements when non-null.
#[no_mangle]
pub unsafe extern "C" fn chiefray_report_excluded(
    report: *const ChiefrayReport,
    ids: *mut usize,
    capacity: usize,
) -> usize {
    let Some(r) = report.as_ref() else { return 0 };
    if !ids.is_null() {
        for (i, id) in r.0.excluded.iter().take(capacity).enumerate() {
            *ids.add(i) = *id;
        }
    }
    r.0.excluded.len()
}

/// Dot errors of the report's intrinsics on the standard evaluation board,
/// against the bench's true projector.
///
/// # Safety
/// Both handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn chiefray_report_evaluate(
    report: *const ChiefrayReport,
    bench: *const ChiefrayBench,
    out: *mut ChiefrayEvalSummary,
) -> ChiefrayStatus {
    guard(|| {
        let r = handle(report, "report")?;
        let b = handle(bench, "bench")?;
        let out = out
            .as_mut()
            .ok_or_else(|| invalid("output pointer is null"))?;
        let (rows, s) = evaluate_report(&r.0, &b.0, &Board::at_one_meter())?;
        *out = ChiefrayEvalSummary {
            count: s.count,
            mean_mm: s.mean_mm,
            std_mm: s.std_mm,
            max_mm: rows.iter().map(|r| r.error_mm).fold(0.0, f64::max),
        };
        Ok(())
    })
}

/// # Safety
/// `report` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn chiefray_report_free(report: *mut ChiefrayReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// # Safety
/// `s` must be a string returned by this library, or null.
#[no_mangle]
pub unsafe extern "C" fn chiefray_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
