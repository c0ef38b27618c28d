//! Command-line driver. Every subcommand reads and writes a run directory
//! indexed by `manifest.json`; downstream stages refuse inputs whose
//! checksum no longer matches.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};

use crate::artifacts::{
    error_curve_csv, error_curve_svg, read_bench, read_csv, read_report, rel, write_bench,
    write_csv, write_report, write_text, Manifest, SummaryRow, TruthRow,
};
use crate::calibrate::{board_errors, Board, CalibrationResult};
use crate::chief::ChiefOptions;
use crate::error::{Error, Result};
use crate::graycode::{generate_patterns, DecodeThresholds, DecodedMap, StackLayout};
use crate::optics::{chief_ray_table, BenchConfig};
use crate::pipeline::{
    calibrate_rows, detect_blobs, extract_rows, render_stack, stage, BlobRow, ChiefMethod,
    ChiefRow, RunOptions, StageError, StreamingDecode,
};
use crate::raster::{read_pgm, write_pgm, ScanImage};

pub const BENCH_FILE: &str = "bench.json";
pub const TRUTH_FILE: &str = "truth.csv";
pub const PATTERNS_DIR: &str = "patterns";
pub const SCANS_DIR: &str = "scans";
pub const DECODED_FILE: &str = "decoded.dmap";
pub const BLOBS_FILE: &str = "blobs.csv";
pub const CHIEF_FILE: &str = "chief.csv";
pub const REPORT_FILE: &str = "report.json";
pub const CURVE_CSV_FILE: &str = "error_curve.csv";
pub const CURVE_SVG_FILE: &str = "error_curve.svg";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const EVAL_FILE: &str = "eval.csv";

#[derive(Debug, Parser)]
#[command(
    name = "chiefray",
    version,
    about = "Projector intrinsic calibration with pinhole-array masks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a bench config and print its ground-truth intrinsics.
    Bench(BenchArgs),
    /// Write the Gray-code pattern stack as 8-bit PGM.
    Patterns(PatternsArgs),
    /// Render the scan stack for a bench.
    Simulate(SimulateArgs),
    /// Decode the scan stack into a per-pixel projector code map.
    Decode(DirArgs),
    /// Segment blobs in the white scan and index them on the pinhole lattice.
    Blobs(DirArgs),
    /// Extract chief-ray pixels for every indexed blob.
    Chief(ChiefArgs),
    /// Robust calibration from the chief-ray table.
    Calibrate(CalibrateArgs),
    /// Dot-placement error on a target board.
    Eval(EvalArgs),
    /// Every stage end to end.
    Run(RunArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Default,
    Parallel,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Bench config (JSON).
    #[arg(required_unless_present = "emit")]
    pub config: Option<PathBuf>,
    /// Print a built-in config instead.
    #[arg(long, value_enum, conflicts_with = "config")]
    pub emit: Option<Preset>,
}

#[derive(Debug, Args)]
pub struct PatternsArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct RenderArgs {
    /// Override the bench render seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override aperture samples per scanner pixel.
    #[arg(long)]
    pub samples: Option<u32>,
    /// Additive sensor noise as a fraction of the white level.
    #[arg(long, default_value_t = 0.0)]
    pub irradiance_noise: f64,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub render: RenderArgs,
}

#[derive(Debug, Args)]
pub struct DirArgs {
    /// Run directory.
    #[arg(long)]
    pub dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ChiefArgs {
    #[arg(long)]
    pub dir: PathBuf,
    /// Use the scanner-side ellipse center instead of the back-projected
    /// circle center.
    #[arg(long)]
    pub naive_chief: bool,
}

#[derive(Debug, Clone, Args)]
pub struct CalibrationArgs {
    /// Gaussian noise added to measured scanner points (scan px).
    #[arg(long, default_value_t = 0.0)]
    pub noise_sigma: f64,
    /// Largest fraction of correspondence sets the robust loop may drop.
    #[arg(long, default_value_t = 0.10)]
    pub max_exclusion: f64,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub dir: PathBuf,
    #[command(flatten)]
    pub calib: CalibrationArgs,
    /// Noise seed; defaults to the bench seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Calibration report (JSON).
    #[arg(long)]
    pub report: PathBuf,
    /// Bench config holding the true projector.
    #[arg(long)]
    pub config: PathBuf,
    /// Target board (JSON); defaults to a 7x10 board about 1 m away.
    #[arg(long)]
    pub target: Option<PathBuf>,
    /// Per-corner CSV output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub calib: CalibrationArgs,
    #[arg(long)]
    pub naive_chief: bool,
    #[command(flatten)]
    pub render: RenderArgs,
    /// Also write the pattern frames and every scan (large).
    #[arg(long)]
    pub keep_stack: bool,
}

/// Process exit status for an error: 2 for invalid input, 4 for I/O, 3 for
/// a stage that could not complete.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig { .. } | Error::Format(_) | Error::StaleChecksum { .. } => 2,
        Error::Io { .. } => 4,
        _ => 3,
    }
}

/// Caps the global thread pool at `CHIEFRAY_THREADS` when set.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("CHIEFRAY_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Error::config(
            "CHIEFRAY_THREADS",
            format!("expected a positive integer, got {v:?}"),
        )
    })?;
    // A pool may already exist when embedded; keep it.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}

pub fn execute(cli: Cli) -> std::result::Result<(), StageError> {
    match cli.command {
        Command::Bench(a) => cmd_bench(&a),
        Command::Patterns(a) => stage("patterns", cmd_patterns(&a.config, &a.out)),
        Command::Simulate(a) => stage("simulate", cmd_simulate(&a.config, &a.out, &a.render)),
        Command::Decode(a) => stage("decode", cmd_decode(&a.dir)),
        Command::Blobs(a) => stage("blobs", cmd_blobs(&a.dir)),
        Command::Chief(a) => stage("chief", cmd_chief(&a.dir, method(a.naive_chief))),
        Command::Calibrate(a) => {
            let r = stage("calibrate", cmd_calibrate(&a.dir, &a.calib, a.seed))?;
            print_report(&r);
            Ok(())
        }
        Command::Eval(a) => {
            let s = stage("eval", cmd_eval(&a))?;
            println!(
                "corners {} mean {:.4} mm std {:.4} mm",
                s.count, s.mean_mm, s.std_mm
            );
            Ok(())
        }
        Command::Run(a) => {
            let r = cmd_run(&a)?;
            print_report(&r);
            Ok(())
        }
    }
}

fn method(naive: bool) -> ChiefMethod {
    if naive {
        ChiefMethod::Naive
    } else {
        ChiefMethod::Chief
    }
}

fn print_report(r: &CalibrationResult) {
    println!(
        "fx {:.3} fy {:.3} cx {:.3} cy {:.3} mrpe {:.4} px (scanner {:.4} px) excluded {}",
        r.fx,
        r.fy,
        r.cx,
        r.cy,
        r.mrpe_projector_px,
        r.mrpe_scanner_px,
        r.excluded.len()
    );
}

pub fn cmd_bench(a: &BenchArgs) -> std::result::Result<(), StageError> {
    let bench = match (&a.config, a.emit) {
        (_, Some(p)) => {
            let b = preset(p);
            println!("{}", b.to_json());
            return Ok(());
        }
        (Some(path), None) => stage("bench", read_bench(path))?,
        (None, None) => unreachable!("clap requires one of config/emit"),
    };
    let k = bench.ground_truth_intrinsics();
    let (rw, rh) = bench.scanner.raster_size();
    println!(
        "valid bench: {} masks, {} pinholes, raster {rw}x{rh}",
        bench.masks.len(),
        bench.pinhole_count()
    );
    println!(
        "ground truth fx {:.5} fy {:.5} cx {:.3} cy {:.3}",
        k.fx, k.fy, k.cx, k.cy
    );
    Ok(())
}

pub fn preset(p: Preset) -> BenchConfig {
    match p {
        Preset::Default => BenchConfig::default_bench(),
        Preset::Parallel => BenchConfig::parallel_bench(),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn frame_name(i: usize) -> String {
    format!("frame_{i:03}.pgm")
}

pub fn cmd_patterns(config: &Path, out: &Path) -> Result<()> {
    let bench = read_bench(config)?;
    write_patterns(&bench, out)
}

fn write_patterns(bench: &BenchConfig, out: &Path) -> Result<()> {
    create_dir(&out.join(PATTERNS_DIR))?;
    let stack = generate_patterns(bench.projector.width, bench.projector.height)?;
    let mut files = Vec::new();
    for (i, f) in stack.frames.iter().enumerate() {
        let r = rel(&[PATTERNS_DIR, &frame_name(i)]);
        write_pgm(&out.join(&r), &f.to_scan_image(255.0), 255)?;
        files.push(r);
    }
    let mut m = Manifest::load(out)?;
    m.patterns_dir = Some(PATTERNS_DIR.into());
    m.record(out, "patterns", &files)?;
    m.save(out)
}

fn apply_render_overrides(bench: &mut BenchConfig, r: &RenderArgs) -> Result<()> {
    if let Some(s) = r.seed {
        bench.rng_seed = s;
    }
    if let Some(n) = r.samples {
        bench.samples_per_pixel = n;
    }
    if !(r.irradiance_noise.is_finite() && r.irradiance_noise >= 0.0) {
        return Err(Error::config(
            "irradiance_noise",
            "must be a non-negative number",
        ));
    }
    bench.validate()
}

/// Writes the canonical bench and the ground-truth table.
fn write_bench_files(bench: &BenchConfig, out: &Path, m: &mut Manifest) -> Result<()> {
    write_bench(&out.join(BENCH_FILE), bench)?;
    let truth: Vec<TruthRow> = chief_ray_table(bench).iter().map(TruthRow::from).collect();
    write_csv(&out.join(TRUTH_FILE), &truth)?;
    m.bench_config = Some(BENCH_FILE.into());
    m.truth_table = Some(TRUTH_FILE.into());
    m.record(out, "bench", &[BENCH_FILE.into(), TRUTH_FILE.into()])
}

pub fn cmd_simulate(config: &Path, out: &Path, r: &RenderArgs) -> Result<()> {
    let mut bench = read_bench(config)?;
    apply_render_overrides(&mut bench, r)?;
    create_dir(&out.join(SCANS_DIR))?;
    let mut m = Manifest::load(out)?;
    write_bench_files(&bench, out, &mut m)?;
    let mut files = Vec::new();
    info!("rendering {} spp", bench.samples_per_pixel);
    render_stack(&bench, r.irradiance_noise, |i, img| {
        let p = rel(&[SCANS_DIR, &frame_name(i)]);
        write_pgm(&out.join(&p), &img, 65535)?;
        files.push(p);
        Ok(())
    })?;
    m.scans_dir = Some(SCANS_DIR.into());
    m.record(out, "simulate", &files)?;
    m.save(out)
}

fn load_bench(dir: &Path, m: &Manifest) -> Result<BenchConfig> {
    let p = Manifest::require(&m.bench_config, "bench config", "simulate")?;
    m.verify(dir, std::slice::from_ref(&p))?;
    read_bench(&dir.join(p))
}

fn scan_files(dir: &Path, m: &Manifest, layout: &StackLayout) -> Result<Vec<String>> {
    let scans = Manifest::require(&m.scans_dir, "scan stack", "simulate")?;
    let files = m.files_under(&scans);
    if files.len() != layout.frame_count() {
        return Err(Error::StackMismatch {
            expected: layout.frame_count(),
            got: files.len(),
        });
    }
    m.verify(dir, &files)?;
    Ok(files)
}

pub fn cmd_decode(dir: &Path) -> Result<()> {
    let mut m = Manifest::load(dir)?;
    let bench = load_bench(dir, &m)?;
    let layout = StackLayout::new(bench.projector.width, bench.projector.height)?;
    let files = scan_files(dir, &m, &layout)?;
    let (rw, rh) = bench.scanner.raster_size();
    let mut dec = StreamingDecode::new(layout, rw, rh);
    for (i, f) in files.iter().enumerate() {
        dec.push(i, read_pgm(&dir.join(f))?)?;
    }
    let (map, _) = dec.finish(&DecodeThresholds::default())?;
    map.write(&dir.join(DECODED_FILE))?;
    m.decoded_map = Some(DECODED_FILE.into());
    m.record(dir, "decode", &[DECODED_FILE.into()])?;
    m.save(dir)
}

/// The white reference scan: the second-to-last frame of the stack.
fn white_scan(dir: &Path, m: &Manifest, bench: &BenchConfig) -> Result<ScanImage> {
    let layout = StackLayout::new(bench.projector.width, bench.projector.height)?;
    let scans = Manifest::require(&m.scans_dir, "scan stack", "simulate")?;
    let p = rel(&[&scans, &frame_name(layout.frame_count() - 2)]);
    m.verify(dir, std::slice::from_ref(&p))?;
    read_pgm(&dir.join(p))
}

pub fn cmd_blobs(dir: &Path) -> Result<()> {
    let mut m = Manifest::load(dir)?;
    let bench = load_bench(dir, &m)?;
    let white = white_scan(dir, &m, &bench)?;
    let (_, rows) = detect_blobs(&white, bench.masks.len())?;
    write_csv(&dir.join(BLOBS_FILE), &rows)?;
    m.blob_table = Some(BLOBS_FILE.into());
    m.record(dir, "blobs", &[BLOBS_FILE.into()])?;
    m.save(dir)
}

pub fn cmd_chief(dir: &Path, method: ChiefMethod) -> Result<()> {
    let mut m = Manifest::load(dir)?;
    let bench = load_bench(dir, &m)?;
    let dmap = Manifest::require(&m.decoded_map, "decoded map", "decode")?;
    let blobs = Manifest::require(&m.blob_table, "blob table", "blobs")?;
    m.verify(dir, &[dmap.clone(), blobs.clone()])?;
    let map = DecodedMap::read(&dir.join(dmap))?;
    let table: Vec<BlobRow> = read_csv(&dir.join(blobs))?;
    // Blob pixel sets are not stored; segmentation is deterministic, so it is
    // redone here and checked against the table.
    let white = white_scan(dir, &m, &bench)?;
    let (field, rows) = detect_blobs(&white, bench.masks.len())?;
    if rows.len() != table.len()
        || rows
            .iter()
            .zip(&table)
            .any(|(a, b)| a.blob_id != b.blob_id || a.area != b.area)
    {
        return Err(Error::Format(format!(
            "{} does not match the white scan; rerun `blobs`",
            dir.join(BLOBS_FILE).display()
        )));
    }
    let chief = extract_rows(
        &bench,
        &map,
        &field,
        &table,
        method,
        &ChiefOptions::default(),
    );
    write_csv(&dir.join(CHIEF_FILE), &chief)?;
    m.chief_table = Some(CHIEF_FILE.into());
    m.record(dir, "chief", &[CHIEF_FILE.into()])?;
    m.save(dir)
}

fn run_options(c: &CalibrationArgs, seed: Option<u64>, method: ChiefMethod) -> Result<RunOptions> {
    if !(c.noise_sigma.is_finite() && c.noise_sigma >= 0.0) {
        return Err(Error::config(
            "noise_sigma",
            "must be a non-negative number",
        ));
    }
    if !(0.0..=0.2).contains(&c.max_exclusion) {
        return Err(Error::config("max_exclusion", "must lie in [0, 0.2]"));
    }
    Ok(RunOptions {
        noise_sigma: c.noise_sigma,
        method,
        max_exclusion: c.max_exclusion,
        seed,
        ..RunOptions::default()
    })
}

/// Report, error curve (CSV and SVG) and summary table.
fn write_calibration(
    dir: &Path,
    bench: &BenchConfig,
    r: &CalibrationResult,
    method: ChiefMethod,
    m: &mut Manifest,
) -> Result<()> {
    write_report(&dir.join(REPORT_FILE), r)?;
    write_text(&dir.join(CURVE_CSV_FILE), &error_curve_csv(r))?;
    write_text(
        &dir.join(CURVE_SVG_FILE),
        &error_curve_svg(&r.error_curve, r.excluded.len()),
    )?;
    let label = match method {
        ChiefMethod::Chief => "proposed",
        ChiefMethod::Naive => "proposed (naive)",
    };
    let summary: Vec<SummaryRow> = crate::artifacts::summary_rows(r, bench, label);
    write_csv(&dir.join(SUMMARY_FILE), &summary)?;
    m.report = Some(REPORT_FILE.into());
    m.record(
        dir,
        "calibrate",
        &[
            REPORT_FILE.into(),
            CURVE_CSV_FILE.into(),
            CURVE_SVG_FILE.into(),
            SUMMARY_FILE.into(),
        ],
    )
}

pub fn cmd_calibrate(
    dir: &Path,
    c: &CalibrationArgs,
    seed: Option<u64>,
) -> Result<CalibrationResult> {
    let mut m = Manifest::load(dir)?;
    let bench = load_bench(dir, &m)?;
    let chief = Manifest::require(&m.chief_table, "chief-ray table", "chief")?;
    m.verify(dir, std::slice::from_ref(&chief))?;
    let rows: Vec<ChiefRow> = read_csv(&dir.join(chief))?;
    let opts = run_options(c, seed, ChiefMethod::Chief)?;
    let r = calibrate_rows(&bench, &rows, &opts)?;
    write_calibration(dir, &bench, &r, ChiefMethod::Chief, &mut m)?;
    m.save(dir)?;
    Ok(r)
}

/// One row of the dot-error table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub corner: usize,
    pub row: u32,
    pub col: u32,
    pub x_mm: f64,
    pub y_mm: f64,
    pub z_mm: f64,
    pub error_mm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSummary {
    pub count: usize,
    pub mean_mm: f64,
    pub std_mm: f64,
}

/// Per-corner dot errors of a report against the true projector.
pub fn evaluate_report(
    report: &CalibrationResult,
    bench: &BenchConfig,
    board: &Board,
) -> Result<(Vec<EvalRow>, EvalSummary)> {
    let errs = board_errors(
        &report.intrinsics(),
        board,
        &bench.ground_truth_intrinsics(),
    )?;
    let rows: Vec<EvalRow> = board
        .corners()
        .iter()
        .zip(&errs)
        .enumerate()
        .map(|(i, (c, &e))| EvalRow {
            corner: i,
            row: i as u32 / board.cols,
            col: i as u32 % board.cols,
            x_mm: c.x,
            y_mm: c.y,
            z_mm: c.z,
            error_mm: e,
        })
        .collect();
    let n = errs.len() as f64;
    let mean = errs.iter().sum::<f64>() / n;
    let var = errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
    Ok((
        rows,
        EvalSummary {
            count: errs.len(),
            mean_mm: mean,
            std_mm: var.sqrt(),
        },
    ))
}

fn read_board(path: &Path) -> Result<Board> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let b: Board = serde_path_to_error::deserialize(de)
        .map_err(|e| Error::config(e.path().to_string(), e.inner().to_string()))?;
    if b.rows < 2 || b.cols < 2 || !(b.spacing > 0.0) {
        return Err(Error::config(
            "board",
            "needs at least 2x2 corners and positive spacing",
        ));
    }
    Ok(b)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<EvalSummary> {
    // A report inside a run directory is checked against its manifest.
    if let Some(dir) = a.report.parent() {
        let m = Manifest::load(dir)?;
        if let Some(name) = a.report.file_name().and_then(|n| n.to_str()) {
            if m.checksums.contains_key(name) {
                m.verify(dir, &[name.to_string()])?;
            }
        }
    }
    let report = read_report(&a.report)?;
    let bench = read_bench(&a.config)?;
    let board = match &a.target {
        Some(p) => read_board(p)?,
        None => Board::at_one_meter(),
    };
    let (rows, s) = evaluate_report(&report, &bench, &board)?;
    if let Some(out) = &a.out {
        write_csv(out, &rows)?;
    }
    Ok(s)
}

pub fn cmd_run(a: &RunArgs) -> std::result::Result<CalibrationResult, StageError> {
    let out = &a.out;
    let method = method(a.naive_chief);
    let opts = stage("config", run_options(&a.calib, a.render.seed, method))?;
    let mut bench = stage("config", read_bench(&a.config))?;
    stage("config", apply_render_overrides(&mut bench, &a.render))?;
    stage("simulate", create_dir(&out.join(SCANS_DIR)))?;
    let mut m = stage("simulate", Manifest::load(out))?;
    stage("simulate", write_bench_files(&bench, out, &mut m))?;
    if a.keep_stack {
        stage("patterns", write_patterns(&bench, out))?;
        m = stage("patterns", Manifest::load(out))?;
    }

    info!("simulate + decode at {} spp", bench.samples_per_pixel);
    let layout = stage(
        "simulate",
        StackLayout::new(bench.projector.width, bench.projector.height),
    )?;
    let n = layout.frame_count();
    let (rw, rh) = bench.scanner.raster_size();
    let mut dec = StreamingDecode::new(layout, rw, rh);
    let mut scans = Vec::new();
    stage(
        "simulate",
        render_stack(&bench, a.render.irradiance_noise, |i, img| {
            if a.keep_stack || i >= n - 2 {
                let p = rel(&[SCANS_DIR, &frame_name(i)]);
                write_pgm(&out.join(&p), &img, 65535)?;
                scans.push(p);
            }
            dec.push(i, img)
        }),
    )?;
    m.scans_dir = Some(SCANS_DIR.into());
    stage("simulate", m.record(out, "simulate", &scans))?;
    let (map, white) = stage("decode", dec.finish(&DecodeThresholds::default()))?;
    stage("decode", map.write(&out.join(DECODED_FILE)))?;
    m.decoded_map = Some(DECODED_FILE.into());
    stage("decode", m.record(out, "decode", &[DECODED_FILE.into()]))?;

    info!("blobs");
    let (field, blobs) = stage("blobs", detect_blobs(&white, bench.masks.len()))?;
    stage("blobs", write_csv(&out.join(BLOBS_FILE), &blobs))?;
    m.blob_table = Some(BLOBS_FILE.into());
    stage("blobs", m.record(out, "blobs", &[BLOBS_FILE.into()]))?;

    info!("chief rays");
    let chief = extract_rows(
        &bench,
        &map,
        &field,
        &blobs,
        method,
        &ChiefOptions::default(),
    );
    stage("chief", write_csv(&out.join(CHIEF_FILE), &chief))?;
    m.chief_table = Some(CHIEF_FILE.into());
    stage("chief", m.record(out, "chief", &[CHIEF_FILE.into()]))?;

    info!("calibrate");
    let r = stage("calibrate", calibrate_rows(&bench, &chief, &opts))?;
    stage(
        "calibrate",
        write_calibration(out, &bench, &r, method, &mut m),
    )?;

    info!("eval");
    let (rows, _) = stage("eval", evaluate_report(&r, &bench, &Board::at_one_meter()))?;
    stage("eval", write_csv(&out.join(EVAL_FILE), &rows))?;
    stage("eval", m.record(out, "eval", &[EVAL_FILE.into()]))?;
    stage("eval", m.save(out))?;
    Ok(r)
}
