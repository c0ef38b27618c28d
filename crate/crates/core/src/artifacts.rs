//! On-disk formats: CSV tables, the calibration report, the run manifest and
//! the static error-curve plot.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibrate::CalibrationResult;
use crate::error::{Error, Result};
use crate::optics::{BenchConfig, ChiefRayTruth};

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| csv_err(path, e)))
        .collect()
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let msg = e.to_string();
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        _ => Error::Format(format!("{}: {msg}", path.display())),
    }
}

/// Ground-truth chief ray, one CSV row per pinhole.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub pinhole_id: usize,
    pub mask_id: u32,
    pub row: u32,
    pub col: u32,
    pub u_chief: f64,
    pub v_chief: f64,
    pub s_x_mm: f64,
    pub s_y_mm: f64,
    pub resolvable: bool,
}

impl From<&ChiefRayTruth> for TruthRow {
    fn from(t: &ChiefRayTruth) -> Self {
        TruthRow {
            pinhole_id: t.pinhole_id,
            mask_id: t.pinhole.mask,
            row: t.pinhole.row,
            col: t.pinhole.col,
            u_chief: t.chief_pixel.u,
            v_chief: t.chief_pixel.v,
            s_x_mm: t.scanner_mm[0],
            s_y_mm: t.scanner_mm[1],
            resolvable: t.resolvable,
        }
    }
}

pub fn read_bench(path: &Path) -> Result<BenchConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    BenchConfig::from_json(&text)
}

pub fn write_bench(path: &Path, bench: &BenchConfig) -> Result<()> {
    write_text(path, &(bench.to_json() + "\n"))
}

pub fn write_report(path: &Path, report: &CalibrationResult) -> Result<()> {
    let text = serde_json::to_string_pretty(report).map_err(|e| Error::Format(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

pub fn read_report(path: &Path) -> Result<CalibrationResult> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de)
        .map_err(|e| Error::Format(format!("{}: {}: {}", path.display(), e.path(), e.inner())))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// One column of a parameter table: an estimate of fx, fy, cx, cy and its
/// MRPE (projector px). Run summaries and the reference fixtures share this
/// layout; `None` stands for a missing entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub table: String,
    pub projector: String,
    pub condition: String,
    pub method: String,
    pub fx: Option<f64>,
    pub fy: Option<f64>,
    pub cx: Option<f64>,
    pub cy: Option<f64>,
    pub mrpe: Option<f64>,
}

/// Reads a parameter table. Accepts `n/a` for missing values.
pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_summary(&text).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn parse_summary(text: &str) -> Result<Vec<SummaryRow>> {
    let cleaned: String = text
        .lines()
        .filter(|l| !l.trim_start().starts_with('#'))
        .map(|l| {
            l.split(',')
                .map(|f| {
                    if f.trim().eq_ignore_ascii_case("n/a") {
                        ""
                    } else {
                        f.trim()
                    }
                })
                .collect::<Vec<_>>()
                .join(",")
                + "\n"
        })
        .collect();
    let mut r = csv::Reader::from_reader(cleaned.as_bytes());
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Format(e.to_string())))
        .collect()
}

/// Summary of a run next to the ground truth it should recover.
pub fn summary_rows(
    report: &CalibrationResult,
    bench: &BenchConfig,
    method: &str,
) -> Vec<SummaryRow> {
    let k = bench.ground_truth_intrinsics();
    let row = |method: &str, fx, fy, cx, cy, mrpe| SummaryRow {
        table: "run".into(),
        projector: "simulated".into(),
        condition: format!("focus {} mm", bench.projector.focus_distance),
        method: method.into(),
        fx: Some(fx),
        fy: Some(fy),
        cx: Some(cx),
        cy: Some(cy),
        mrpe,
    };
    vec![
        row(
            method,
            report.fx,
            report.fy,
            report.cx,
            report.cy,
            Some(report.mrpe_projector_px),
        ),
        row("ground-truth", k.fx, k.fy, k.cx, k.cy, None),
    ]
}

/// Error curve as CSV: `k`, `e_k` (scan px) and the pinhole whose removal
/// produced step `k` (empty for `k = 0` and for the rejected final trial).
pub fn error_curve_csv(report: &CalibrationResult) -> String {
    let mut s = String::from("k,e_k_scan_px,excluded_pinhole,accepted\n");
    for (k, e) in report.error_curve.iter().enumerate() {
        let accepted = k <= report.excluded.len();
        let id = match k {
            0 => String::new(),
            _ if accepted => report.excluded[k - 1].to_string(),
            _ => String::new(),
        };
        let _ = writeln!(s, "{k},{e},{id},{accepted}");
    }
    s
}

/// Static SVG line plot of the error curve with the chosen exclusion count
/// marked.
pub fn error_curve_svg(curve: &[f64], chosen: usize) -> String {
    let (w, h, m) = (480.0, 320.0, 48.0);
    let n = curve.len().max(2) - 1;
    let finite: Vec<f64> = curve.iter().copied().filter(|v| v.is_finite()).collect();
    let (mut lo, mut hi) = finite
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        lo -= 0.5;
        hi += 0.5;
    }
    let pad = 0.08 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);
    let x = |k: usize| m + (w - 2.0 * m) * k as f64 / n as f64;
    let y = |v: f64| h - m - (h - 2.0 * m) * (v - lo) / (hi - lo);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{m} {m} V{} H{}" fill="none" stroke="black"/>"#,
        h - m,
        w - m
    );
    for k in 0..=n {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{k}</text>"#,
            x(k),
            h - m + 14.0
        );
    }
    for (v, anchor) in [(lo + pad, "lo"), (hi - pad, "hi")] {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end" class="{anchor}">{v:.4}</text>"#,
            m - 4.0,
            y(v) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">excluded sets</text>"#,
        w / 2.0,
        h - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">mean scanner error (px)</text>"#,
        h / 2.0,
        h / 2.0
    );
    let pts: Vec<String> = curve
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_finite())
        .map(|(k, &v)| format!("{:.2},{:.2}", x(k), y(v)))
        .collect();
    let _ = writeln!(
        s,
        r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#,
        pts.join(" ")
    );
    for (k, &v) in curve.iter().enumerate().filter(|(_, v)| v.is_finite()) {
        let (r, fill) = if k == chosen {
            (5.0, "crimson")
        } else {
            (3.0, "steelblue")
        };
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="{r}" fill="{fill}"/>"#,
            x(k),
            y(v)
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// When a stage last wrote its outputs. Kept out of the data files so those
/// stay byte-identical across reruns.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub generated_unix: u64,
    pub outputs: Vec<String>,
}

/// Index of a run directory: artifact paths (relative to the directory),
/// their SHA-256 and the stage that produced them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub bench_config: Option<String>,
    pub truth_table: Option<String>,
    pub patterns_dir: Option<String>,
    pub scans_dir: Option<String>,
    pub decoded_map: Option<String>,
    pub blob_table: Option<String>,
    pub chief_table: Option<String>,
    pub report: Option<String>,
    pub checksums: BTreeMap<String, String>,
    pub stages: BTreeMap<String, StageRecord>,
}

impl Manifest {
    /// Loads `dir/manifest.json`, or an empty manifest when there is none.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        write_text(&dir.join(MANIFEST_FILE), &(text + "\n"))
    }

    /// Hashes `outputs` (relative to `dir`) and records them under `stage`.
    pub fn record(&mut self, dir: &Path, stage: &str, outputs: &[String]) -> Result<()> {
        for rel in outputs {
            self.checksums
                .insert(rel.clone(), sha256_file(&dir.join(rel))?);
        }
        let generated_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        self.stages.insert(
            stage.to_string(),
            StageRecord {
                generated_unix,
                outputs: outputs.to_vec(),
            },
        );
        Ok(())
    }

    /// Checks that every file in `inputs` still has its recorded checksum.
    pub fn verify(&self, dir: &Path, inputs: &[String]) -> Result<()> {
        for rel in inputs {
            let want = self.checksums.get(rel).ok_or_else(|| {
                Error::Format(format!(
                    "{rel} is not recorded in {}",
                    dir.join(MANIFEST_FILE).display()
                ))
            })?;
            if &sha256_file(&dir.join(rel))? != want {
                return Err(Error::StaleChecksum {
                    path: dir.join(rel),
                });
            }
        }
        Ok(())
    }

    /// Recorded files under a directory prefix, in name order.
    pub fn files_under(&self, prefix: &str) -> Vec<String> {
        let p = format!("{}/", prefix.trim_end_matches('/'));
        self.checksums
            .keys()
            .filter(|k| k.starts_with(&p))
            .cloned()
            .collect()
    }

    /// Path of a named artifact, or a format error naming the stage that
    /// should have produced it.
    pub fn require(field: &Option<String>, what: &str, stage: &str) -> Result<String> {
        field
            .clone()
            .ok_or_else(|| Error::Format(format!("no {what} in the manifest; run `{stage}` first")))
    }
}

/// Relative path string with forward slashes.
pub fn rel(parts: &[&str]) -> String {
    parts
        .iter()
        .collect::<PathBuf>()
        .to_string_lossy()
        .replace('\\', "/")
}
