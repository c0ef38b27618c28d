//! Stage drivers: simulate, decode, detect blobs, extract chief rays,
//! calibrate. Each stage works in memory; [`crate::artifacts`] handles files.

use std::collections::HashMap;

use nalgebra::{Point2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blobfield::{
    boundary_points, cluster_blobs, fit_ellipse, recognize_grid, segment_blobs, BlobField, Ellipse,
    SegmentOptions,
};
use crate::calibrate::{robust_calibrate, CalibrationResult, CorrespondenceSet, RobustOptions};
use crate::chief::{extract_chief_ray, naive_center, ChiefOptions};
use crate::error::{Error, Result};
use crate::geometry::PixelPoint;
use crate::graycode::{DecodeThresholds, DecodedMap, StackDecoder, StackLayout};
use crate::optics::{add_irradiance_noise, BenchConfig, Transport, QUANT_WHITE_LEVEL};
use crate::raster::ScanImage;

/// Renders every frame of the pattern stack (quantized to the 16-bit grid)
/// and hands each to `sink` in stack order. Only one frame is resident at a
/// time.
pub fn render_stack(
    bench: &BenchConfig,
    irradiance_noise: f64,
    sink: impl FnMut(usize, ScanImage) -> Result<()>,
) -> Result<StackLayout> {
    bench.validate()?;
    render_stack_with(bench, &Transport::build(bench), irradiance_noise, sink)
}

/// [`render_stack`] with a prebuilt transport table.
pub fn render_stack_with(
    bench: &BenchConfig,
    transport: &Transport,
    irradiance_noise: f64,
    mut sink: impl FnMut(usize, ScanImage) -> Result<()>,
) -> Result<StackLayout> {
    let layout = StackLayout::new(bench.projector.width, bench.projector.height)?;
    let n = layout.frame_count();
    let max = transport.render_stack_frame(&layout, n - 2).max_value() as f64;
    let scale = if max > 0.0 {
        QUANT_WHITE_LEVEL / max
    } else {
        1.0
    };
    for i in 0..n {
        let mut img = transport.render_stack_frame(&layout, i).quantized(scale);
        if irradiance_noise > 0.0 {
            add_irradiance_noise(
                &mut img,
                irradiance_noise * QUANT_WHITE_LEVEL,
                bench.rng_seed.wrapping_add(1 + i as u64),
            );
            img = img.quantized(1.0);
        }
        sink(i, img)?;
    }
    Ok(layout)
}

/// Feeds frames in stack order into a [`StackDecoder`].
pub struct StreamingDecode {
    layout: StackLayout,
    decoder: StackDecoder,
    pending: Option<ScanImage>,
    white: Option<ScanImage>,
    black: Option<ScanImage>,
}

impl StreamingDecode {
    pub fn new(layout: StackLayout, raster_width: u32, raster_height: u32) -> Self {
        Self {
            layout,
            decoder: StackDecoder::new(layout, raster_width, raster_height),
            pending: None,
            white: None,
            black: None,
        }
    }

    pub fn push(&mut self, index: usize, img: ScanImage) -> Result<()> {
        let n = self.layout.frame_count();
        if index < n - 2 {
            match self.pending.take() {
                None if index.is_multiple_of(2) => self.pending = Some(img),
                Some(pos) if !index.is_multiple_of(2) => self.decoder.push_pair(&pos, &img)?,
                _ => return Err(Error::Format(format!("frame {index} out of stack order"))),
            }
        } else if index == n - 2 {
            self.white = Some(img);
        } else if index == n - 1 {
            self.black = Some(img);
        } else {
            return Err(Error::StackMismatch {
                expected: n,
                got: index + 1,
            });
        }
        Ok(())
    }

    /// Decoded map and the white reference frame.
    pub fn finish(self, thresholds: &DecodeThresholds) -> Result<(DecodedMap, ScanImage)> {
        let n = self.layout.frame_count();
        let (white, black) = match (self.white, self.black) {
            (Some(w), Some(b)) => (w, b),
            _ => {
                return Err(Error::StackMismatch {
                    expected: n,
                    got: n - 1,
                })
            }
        };
        let map = self.decoder.finish(&white, &black, thresholds)?;
        Ok((map, white))
    }
}

/// Renders and decodes the pattern stack, showing each frame to `sink`
/// before it is consumed. Returns the decoded map and the white reference
/// scan.
pub fn simulate_and_decode(
    bench: &BenchConfig,
    irradiance_noise: f64,
    thresholds: &DecodeThresholds,
    mut sink: impl FnMut(usize, &ScanImage) -> Result<()>,
) -> Result<(DecodedMap, ScanImage)> {
    bench.validate()?;
    let layout = StackLayout::new(bench.projector.width, bench.projector.height)?;
    let (rw, rh) = bench.scanner.raster_size();
    let mut dec = StreamingDecode::new(layout, rw, rh);
    render_stack(bench, irradiance_noise, |i, img| {
        sink(i, &img)?;
        dec.push(i, img)
    })?;
    dec.finish(thresholds)
}

/// One row of the blob assignment table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobRow {
    pub blob_id: usize,
    /// `None` when clustering put the blob in a mask but the lattice did not
    /// accept it.
    pub mask_id: Option<u32>,
    pub row: Option<i32>,
    pub col: Option<i32>,
    pub cx: f64,
    pub cy: f64,
    pub area: usize,
    pub ell_a: f64,
    pub ell_b: f64,
    pub ell_theta: f64,
    pub residual: f64,
}

/// Segmentation, per-mask clustering, lattice indexing and ellipse fits.
pub fn detect_blobs(white: &ScanImage, masks: usize) -> Result<(BlobField, Vec<BlobRow>)> {
    let field = segment_blobs(white, &SegmentOptions::default())?;
    let centroids: Vec<Vector2<f64>> = field.blobs.iter().map(|b| b.centroid).collect();
    let labels = cluster_blobs(&centroids, masks.max(1))?;
    let mut grid = vec![None; field.blobs.len()];
    for m in 0..masks.max(1) {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == m).collect();
        let pts: Vec<Vector2<f64>> = members.iter().map(|&i| centroids[i]).collect();
        let idx = recognize_grid(&pts)?;
        for (j, g) in members.iter().zip(idx) {
            grid[*j] = g;
        }
    }
    let rows = field
        .blobs
        .par_iter()
        .enumerate()
        .map(|(i, b)| {
            let bp = boundary_points(&b.pixels, field.width);
            let (e, resid) = match fit_ellipse(&bp) {
                Ok(e) => (e, ellipse_residual(&e, &bp)),
                Err(_) => (
                    Ellipse {
                        center: [b.centroid.x, b.centroid.y],
                        a: f64::NAN,
                        b: f64::NAN,
                        angle: f64::NAN,
                    },
                    f64::NAN,
                ),
            };
            let g = grid[i];
            BlobRow {
                blob_id: i,
                mask_id: g.map(|_| labels[i] as u32),
                row: g.map(|g| g.row),
                col: g.map(|g| g.col),
                cx: e.center[0],
                cy: e.center[1],
                area: b.area(),
                ell_a: e.a,
                ell_b: e.b,
                ell_theta: e.angle,
                residual: resid,
            }
        })
        .collect();
    Ok((field, rows))
}

/// RMS algebraic distance of boundary points to the ellipse, with the conic
/// scaled so that the algebraic distance approximates px near the curve.
pub fn ellipse_residual(e: &Ellipse, pts: &[Vector2<f64>]) -> f64 {
    let (c, s) = (e.angle.cos(), e.angle.sin());
    let r = pts
        .iter()
        .map(|p| {
            let d = p - Vector2::new(e.center[0], e.center[1]);
            let x = c * d.x + s * d.y;
            let y = -s * d.x + c * d.y;
            let q = (x / e.a).powi(2) + (y / e.b).powi(2) - 1.0;
            (q * 0.5 * (e.a * e.b).sqrt()).powi(2)
        })
        .sum::<f64>()
        / pts.len().max(1) as f64;
    r.sqrt()
}

/// Outcome of chief-ray (or naive) extraction for one lattice blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChiefRow {
    pub pinhole_id: usize,
    pub mask_id: u32,
    pub row: i32,
    pub col: i32,
    pub u_c: f64,
    pub v_c: f64,
    /// Chief-ray hit on the scanner in world coordinates (mm).
    pub sx_mm: f64,
    pub sy_mm: f64,
    pub sz_mm: f64,
    /// Circle-fit RMS residual (projector px), or ellipse residual for the
    /// naive estimate.
    pub residual: f64,
    /// `ok` or the error code that prevented extraction.
    pub status: String,
}

impl ChiefRow {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Which chief pixel estimate feeds calibration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChiefMethod {
    Chief,
    Naive,
}

/// Extracts one row per lattice blob.
pub fn extract_rows(
    bench: &BenchConfig,
    map: &DecodedMap,
    field: &BlobField,
    blobs: &[BlobRow],
    method: ChiefMethod,
    opts: &ChiefOptions,
) -> Vec<ChiefRow> {
    let scanner = bench.scanner_plane();
    let panel = (bench.projector.width, bench.projector.height);
    blobs
        .par_iter()
        .filter(|b| b.mask_id.is_some())
        .map(|b| {
            let blob = &field.blobs[b.blob_id];
            let est = match method {
                ChiefMethod::Chief => extract_chief_ray(map, &blob.support, panel, opts, b.blob_id)
                    .map(|c| (c.pixel, c.scanner, c.residual)),
                ChiefMethod::Naive => {
                    naive_center(map, &blob.pixels, &blob.support, panel, opts, b.blob_id)
                        .map(|n| (n.pixel, n.scanner, b.residual))
                }
            };
            let (pixel, s, residual, status) = match est {
                Ok((p, s, r)) => (p, s, r, "ok".to_string()),
                Err(e) => (
                    PixelPoint::new(f64::NAN, f64::NAN),
                    [f64::NAN, f64::NAN],
                    f64::NAN,
                    e.code().to_string(),
                ),
            };
            let world = scanner.to_world(&bench.scanner.raster_to_local(s[0], s[1]));
            ChiefRow {
                pinhole_id: b.blob_id,
                mask_id: b.mask_id.unwrap(),
                row: b.row.unwrap(),
                col: b.col.unwrap(),
                u_c: pixel.u,
                v_c: pixel.v,
                sx_mm: world.x,
                sy_mm: world.y,
                sz_mm: world.z,
                residual,
                status,
            }
        })
        .collect()
}

/// Correspondence sets from extracted rows, with optional Gaussian noise
/// (scan px) on the scanner points. The draw for a set depends only on
/// `seed` and its pinhole id.
pub fn correspondence_sets(
    bench: &BenchConfig,
    rows: &[ChiefRow],
    noise_sigma: f64,
    seed: u64,
) -> Vec<CorrespondenceSet> {
    let scanner = bench.scanner_plane();
    let px = bench.scanner.pixel_size();
    rows.iter()
        .filter(|r| r.ok())
        .map(|r| {
            let local = scanner.to_local(&nalgebra::Point3::new(r.sx_mm, r.sy_mm, r.sz_mm));
            let mut s = Point2::new(local.x, local.y);
            if noise_sigma > 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(
                    seed ^ (r.pinhole_id as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03),
                );
                let n = Normal::new(0.0, noise_sigma * px).expect("finite sigma");
                s.x += n.sample(&mut rng);
                s.y += n.sample(&mut rng);
            }
            let pitch = bench
                .masks
                .get(r.mask_id as usize)
                .map(|m| m.pitch)
                .unwrap_or(1.0);
            CorrespondenceSet {
                pinhole_id: r.pinhole_id,
                mask: r.mask_id,
                mask_point: Point2::new(r.col as f64 * pitch, r.row as f64 * pitch),
                scanner_point: s,
                pixel: PixelPoint::new(r.u_c, r.v_c),
            }
        })
        .collect()
}

/// Shifts the chief pixel of `round(fraction * n)` randomly chosen sets by
/// `shift_px` in a random direction. Returns the pinhole ids touched, sorted.
pub fn corrupt_sets(
    sets: &mut [CorrespondenceSet],
    fraction: f64,
    shift_px: f64,
    seed: u64,
) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = ((fraction * sets.len() as f64).round() as usize).min(sets.len());
    let picked = rand::seq::index::sample(&mut rng, sets.len(), n).into_vec();
    let mut ids = Vec::with_capacity(n);
    for i in picked {
        let a = rng.random::<f64>() * std::f64::consts::TAU;
        let s = &mut sets[i];
        s.pixel = PixelPoint::new(
            s.pixel.u + shift_px * a.cos(),
            s.pixel.v + shift_px * a.sin(),
        );
        ids.push(s.pinhole_id);
    }
    ids.sort_unstable();
    ids
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    /// Gaussian noise on measured scanner points (scan px).
    pub noise_sigma: f64,
    pub method: ChiefMethod,
    pub max_exclusion: f64,
    /// Overrides the bench seed when set.
    pub seed: Option<u64>,
    /// Additive irradiance noise as a fraction of the white level.
    pub irradiance_noise: f64,
    pub chief: ChiefOptions,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            noise_sigma: 0.0,
            method: ChiefMethod::Chief,
            max_exclusion: 0.10,
            seed: None,
            irradiance_noise: 0.0,
            chief: ChiefOptions::default(),
        }
    }
}

/// Everything downstream of the scans, kept in memory.
pub struct Detected {
    pub map: DecodedMap,
    pub white: ScanImage,
    pub field: BlobField,
    pub blobs: Vec<BlobRow>,
}

pub fn detect(bench: &BenchConfig, map: DecodedMap, white: ScanImage) -> Result<Detected> {
    let (field, blobs) = detect_blobs(&white, bench.masks.len())?;
    Ok(Detected {
        map,
        white,
        field,
        blobs,
    })
}

/// Calibrates from extracted rows.
pub fn calibrate_rows(
    bench: &BenchConfig,
    rows: &[ChiefRow],
    opts: &RunOptions,
) -> Result<CalibrationResult> {
    let seed = opts.seed.unwrap_or(bench.rng_seed);
    let sets = correspondence_sets(bench, rows, opts.noise_sigma, seed);
    robust_calibrate(
        &sets,
        bench.masks.len() as u32,
        &RobustOptions {
            max_exclusion_fraction: opts.max_exclusion,
            scanner_pixel_size: bench.scanner.pixel_size(),
            ..RobustOptions::default()
        },
    )
}

/// Matches lattice rows to simulator pinholes by the nearest analytic
/// scanner hit (raster px). Returns `(row index, global pinhole index)`.
pub fn match_to_truth(
    bench: &BenchConfig,
    rows: &[ChiefRow],
    max_dist_px: f64,
) -> Vec<(usize, usize)> {
    let truth = crate::optics::chief_ray_table(bench);
    let scanner = bench.scanner_plane();
    let pts: Vec<(usize, (f64, f64))> = truth
        .iter()
        .map(|t| {
            (
                t.pinhole_id,
                bench
                    .scanner
                    .local_to_raster(&Point2::new(t.scanner_mm[0], t.scanner_mm[1])),
            )
        })
        .collect();
    let mut used: HashMap<usize, usize> = HashMap::new();
    let mut out = Vec::new();
    for (i, r) in rows.iter().enumerate() {
        if !r.ok() {
            continue;
        }
        let l = scanner.to_local(&nalgebra::Point3::new(r.sx_mm, r.sy_mm, r.sz_mm));
        let (x, y) = bench.scanner.local_to_raster(&Point2::new(l.x, l.y));
        let best = pts
            .iter()
            .map(|(id, p)| (*id, ((p.0 - x).powi(2) + (p.1 - y).powi(2)).sqrt()))
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        if let Some((id, d)) = best {
            if d <= max_dist_px && used.insert(id, i).is_none() {
                out.push((i, id));
            }
        }
    }
    out
}

/// Turns a stage error into one tagged with the stage name.
pub fn stage<T>(name: &'static str, r: Result<T>) -> std::result::Result<T, StageError> {
    r.map_err(|source| StageError {
        stage: name,
        source,
    })
}

#[derive(Debug, thiserror::Error)]
#[error("stage {stage} failed: {source}")]
pub struct StageError {
    pub stage: &'static str,
    #[source]
    pub source: Error,
}
