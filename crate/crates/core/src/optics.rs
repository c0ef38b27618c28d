//! Synthetic optical bench: a thin-lens projector with a finite circular
//! aperture, planar pinhole-array masks and a flat scanner.
//!
//! World coordinates are the projector frame (see [`crate::geometry`]). The
//! lens is a single refracting plane at `z = 0`; the panel sits at
//! `z = -d` with `1/d + 1/focus = 1/f`, so every ray leaving panel point `P`
//! passes through its conjugate `Q = -(focus/d) P` regardless of where it
//! crosses the aperture. Image plane and principal plane are parallel by
//! construction.
//!
//! Scan images are rendered from a precomputed light-transport table: for each
//! scanner pixel inside a pinhole's light cone, samples over the scanner pixel
//! and the pinhole opening are traced back to the lens, which fixes the panel
//! pixel that feeds them. Irradiance for any pattern is then a sparse weighted
//! sum over lit pixels.

use std::f64::consts::PI;

use nalgebra::{Point2, Point3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    project, Intrinsics, PixelPoint, PlaneFrame, PlanePoint, RigidPose, WorldPoint,
};
use crate::graycode::{BinaryFrame, StackLayout};
use crate::raster::ScanImage;

/// Thin-lens projector optics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectorModel {
    pub width: u32,
    pub height: u32,
    /// Panel pixel pitch (mm/px).
    pub pixel_pitch: f64,
    /// Offset of the panel center from the optical axis (mm).
    pub image_plane_offset: [f64; 2],
    pub lens_focal_length: f64,
    pub aperture_diameter: f64,
    /// Distance of the plane of sharp focus from the lens (mm).
    pub focus_distance: f64,
}

impl ProjectorModel {
    /// Lens-to-panel distance.
    pub fn image_distance(&self) -> f64 {
        1.0 / (1.0 / self.lens_focal_length - 1.0 / self.focus_distance)
    }

    pub fn aperture_radius(&self) -> f64 {
        0.5 * self.aperture_diameter
    }

    /// Conjugate point (on the plane of focus) of a panel position.
    pub fn conjugate(&self, k: &Intrinsics, px: PixelPoint) -> Vector3<f64> {
        let d = self.focus_distance;
        Vector3::new((px.u - k.cx) * d / k.fx, (px.v - k.cy) * d / k.fy, d)
    }

    fn validate(&self) -> Result<()> {
        let p = "projector";
        if self.width == 0 || self.height == 0 {
            return Err(Error::config(
                format!("{p}.width"),
                "panel must be at least 1x1",
            ));
        }
        for (name, v) in [
            ("pixel_pitch", self.pixel_pitch),
            ("lens_focal_length", self.lens_focal_length),
            ("aperture_diameter", self.aperture_diameter),
            ("focus_distance", self.focus_distance),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(
                    format!("{p}.{name}"),
                    format!("must be positive, got {v}"),
                ));
            }
        }
        if !self.image_plane_offset.iter().all(|v| v.is_finite()) {
            return Err(Error::config(
                format!("{p}.image_plane_offset"),
                "must be finite",
            ));
        }
        if self.focus_distance <= self.lens_focal_length {
            return Err(Error::config(
                format!("{p}.focus_distance"),
                "must exceed lens_focal_length",
            ));
        }
        Ok(())
    }
}

/// Intrinsics of the pinhole model equivalent to the thin-lens projector.
pub fn ground_truth_intrinsics(proj: &ProjectorModel) -> Intrinsics {
    let f = proj.image_distance() / proj.pixel_pitch;
    Intrinsics {
        fx: f,
        fy: f,
        cx: (proj.width as f64 - 1.0) / 2.0 + proj.image_plane_offset[0] / proj.pixel_pitch,
        cy: (proj.height as f64 - 1.0) / 2.0 + proj.image_plane_offset[1] / proj.pixel_pitch,
    }
}

/// Placement of a plane in the JSON config: `origin` is where local (0, 0)
/// sits in the world, rotation is `Ry(yaw) Rx(pitch) Rz(roll)` in degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameSpec {
    pub origin: [f64; 3],
    #[serde(default)]
    pub yaw_deg: f64,
    #[serde(default)]
    pub pitch_deg: f64,
    #[serde(default)]
    pub roll_deg: f64,
    pub extent: [f64; 2],
}

impl FrameSpec {
    pub fn plane(&self) -> PlaneFrame {
        PlaneFrame {
            pose: RigidPose::from_euler_deg(
                self.yaw_deg,
                self.pitch_deg,
                self.roll_deg,
                Vector3::from(self.origin),
            ),
            extent: self.extent,
        }
    }
}

/// Planar grid of circular holes; hole `(row, col)` sits at local
/// `(col * pitch, row * pitch)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PinholeMask {
    pub rows: u32,
    pub cols: u32,
    pub pitch: f64,
    pub hole_diameter: f64,
    /// Sheet thickness (mm); 0 models an infinitely thin mask.
    #[serde(default)]
    pub thickness: f64,
    pub frame: FrameSpec,
}

impl PinholeMask {
    pub fn hole_radius(&self) -> f64 {
        0.5 * self.hole_diameter
    }

    pub fn pinhole_local(&self, row: u32, col: u32) -> PlanePoint {
        Point2::new(col as f64 * self.pitch, row as f64 * self.pitch)
    }

    /// Opaque sheet: the grid plus half a pitch of margin on each side.
    pub fn sheet_contains(&self, p: &PlanePoint) -> bool {
        let m = 0.5 * self.pitch;
        p.x >= -m
            && p.y >= -m
            && p.x <= (self.cols - 1) as f64 * self.pitch + m
            && p.y <= (self.rows - 1) as f64 * self.pitch + m
    }

    /// Closest hole to a local point: `(row, col, distance)`.
    pub fn nearest_hole(&self, p: &PlanePoint) -> (u32, u32, f64) {
        let c = (p.x / self.pitch)
            .round()
            .clamp(0.0, (self.cols - 1) as f64) as u32;
        let r = (p.y / self.pitch)
            .round()
            .clamp(0.0, (self.rows - 1) as f64) as u32;
        let d = (p - self.pinhole_local(r, c)).norm();
        (r, c, d)
    }

    fn validate(&self, i: usize) -> Result<()> {
        let p = format!("masks[{i}]");
        if self.rows < 2 || self.cols < 2 {
            return Err(Error::config(
                format!("{p}.rows"),
                "grid must be at least 2x2",
            ));
        }
        if !(self.pitch.is_finite() && self.pitch > 0.0) {
            return Err(Error::config(format!("{p}.pitch"), "must be positive"));
        }
        if !(self.hole_diameter > 0.0 && self.hole_diameter < self.pitch) {
            return Err(Error::config(
                format!("{p}.hole_diameter"),
                "must satisfy 0 < hole_diameter < pitch",
            ));
        }
        if !(self.thickness.is_finite() && self.thickness >= 0.0) {
            return Err(Error::config(format!("{p}.thickness"), "must be >= 0"));
        }
        validate_frame(&self.frame, &format!("{p}.frame"))
    }
}

fn validate_frame(f: &FrameSpec, path: &str) -> Result<()> {
    if !f.origin.iter().all(|v| v.is_finite())
        || !(f.yaw_deg.is_finite() && f.pitch_deg.is_finite() && f.roll_deg.is_finite())
    {
        return Err(Error::config(path, "origin and angles must be finite"));
    }
    if !f.extent.iter().all(|v| v.is_finite() && *v > 0.0) {
        return Err(Error::config(format!("{path}.extent"), "must be positive"));
    }
    Ok(())
}

/// Flat-bed scanner surface and its sampling density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScannerModel {
    pub frame: FrameSpec,
    pub dpi: f64,
}

impl ScannerModel {
    pub fn pixel_size(&self) -> f64 {
        25.4 / self.dpi
    }

    pub fn raster_size(&self) -> (u32, u32) {
        let px = self.pixel_size();
        (
            (self.frame.extent[0] / px).floor() as u32,
            (self.frame.extent[1] / px).floor() as u32,
        )
    }

    /// Raster coordinates (pixel centers at integers) to plane-local mm.
    pub fn raster_to_local(&self, x: f64, y: f64) -> PlanePoint {
        let px = self.pixel_size();
        Point2::new((x + 0.5) * px, (y + 0.5) * px)
    }

    pub fn local_to_raster(&self, p: &PlanePoint) -> (f64, f64) {
        let px = self.pixel_size();
        (p.x / px - 0.5, p.y / px - 0.5)
    }
}

fn default_samples() -> u32 {
    256
}

/// Complete synthetic geometry. All lengths in mm, angles in degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub projector: ProjectorModel,
    pub masks: Vec<PinholeMask>,
    pub scanner: ScannerModel,
    #[serde(default)]
    pub rng_seed: u64,
    /// Monte Carlo samples per scanner pixel (over the pinhole opening, or
    /// over the aperture when no masks are present).
    #[serde(default = "default_samples")]
    pub samples_per_pixel: u32,
}

/// Angle between two planes (deg), in [0, 90].
fn plane_angle_deg(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.dot(b).abs().min(1.0).acos().to_degrees()
}

impl BenchConfig {
    /// Parses JSON, reporting the field path of schema errors.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: BenchConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("bench config serializes")
    }

    pub fn ground_truth_intrinsics(&self) -> Intrinsics {
        ground_truth_intrinsics(&self.projector)
    }

    pub fn mask_planes(&self) -> Vec<PlaneFrame> {
        self.masks.iter().map(|m| m.frame.plane()).collect()
    }

    pub fn scanner_plane(&self) -> PlaneFrame {
        self.scanner.frame.plane()
    }

    pub fn validate(&self) -> Result<()> {
        self.projector.validate()?;
        for (i, m) in self.masks.iter().enumerate() {
            m.validate(i)?;
        }
        validate_frame(&self.scanner.frame, "scanner.frame")?;
        if !(self.scanner.dpi.is_finite() && self.scanner.dpi > 0.0) {
            return Err(Error::config("scanner.dpi", "must be positive"));
        }
        let (rw, rh) = self.scanner.raster_size();
        if rw == 0 || rh == 0 {
            return Err(Error::config(
                "scanner.frame.extent",
                "raster would be empty",
            ));
        }
        if self.samples_per_pixel == 0 {
            return Err(Error::config("samples_per_pixel", "must be >= 1"));
        }
        let scanner_n = self.scanner_plane().normal();
        let planes = self.mask_planes();
        for (i, m) in planes.iter().enumerate() {
            let a = plane_angle_deg(&m.normal(), &scanner_n);
            if a < 1.0 {
                return Err(Error::config(
                    format!("masks[{i}].frame"),
                    format!("mask is within {a:.3} deg of parallel to the scanner; fiducial planes must differ by >= 1 deg"),
                ));
            }
            for (j, o) in planes.iter().enumerate().skip(i + 1) {
                let a = plane_angle_deg(&m.normal(), &o.normal());
                if a < 1.0 {
                    return Err(Error::config(
                        format!("masks[{j}].frame"),
                        format!("masks {i} and {j} are within {a:.3} deg of parallel; fiducial planes must differ by >= 1 deg"),
                    ));
                }
            }
        }
        self.check_occlusion()
    }

    /// Chief rays over a coarse panel grid must cross at most one mask sheet.
    fn check_occlusion(&self) -> Result<()> {
        if self.masks.len() < 2 {
            return Ok(());
        }
        let k = self.ground_truth_intrinsics();
        let planes = self.mask_planes();
        let step = ((self.projector.width.max(self.projector.height)) / 64).max(1);
        let origin = Point3::origin();
        for v in (0..self.projector.height).step_by(step as usize) {
            for u in (0..self.projector.width).step_by(step as usize) {
                let dir = k.normalized(PixelPoint::new(u as f64, v as f64));
                let hits: Vec<usize> = planes
                    .iter()
                    .enumerate()
                    .filter(|(i, p)| {
                        p.intersect_ray(&origin, &dir)
                            .is_some_and(|(_, l)| self.masks[*i].sheet_contains(&l))
                    })
                    .map(|(i, _)| i)
                    .collect();
                if hits.len() > 1 {
                    return Err(Error::config(
                        format!("masks[{}].frame", hits[1]),
                        format!(
                            "masks {:?} occlude each other along the chief ray of pixel ({u}, {v})",
                            hits
                        ),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn pinhole_count(&self) -> usize {
        self.masks.iter().map(|m| (m.rows * m.cols) as usize).sum()
    }

    pub fn pinhole_ids(&self) -> Vec<PinholeId> {
        let mut out = Vec::with_capacity(self.pinhole_count());
        for (mi, m) in self.masks.iter().enumerate() {
            for row in 0..m.rows {
                for col in 0..m.cols {
                    out.push(PinholeId {
                        mask: mi as u32,
                        row,
                        col,
                    });
                }
            }
        }
        out
    }

    pub fn pinhole_world(&self, id: PinholeId) -> WorldPoint {
        let m = &self.masks[id.mask as usize];
        m.frame.plane().to_world(&m.pinhole_local(id.row, id.col))
    }

    pub fn global_pinhole_index(&self, id: PinholeId) -> usize {
        let before: usize = self.masks[..id.mask as usize]
            .iter()
            .map(|m| (m.rows * m.cols) as usize)
            .sum();
        before + (id.row * self.masks[id.mask as usize].cols + id.col) as usize
    }

    /// The reference bench: an 800x600 panel, two 12x15 masks at about
    /// 265 mm yawed by -20/+20 deg, and a scanner at about 450 mm pitched
    /// by 45 deg.
    pub fn default_bench() -> Self {
        let projector = ProjectorModel {
            width: 800,
            height: 600,
            pixel_pitch: 0.01,
            image_plane_offset: [0.1, 1.2],
            lens_focal_length: 18.0,
            aperture_diameter: 14.0,
            focus_distance: 1000.0,
        };
        let (rows, cols, pitch) = (12u32, 15u32, 8.0);
        let span = (cols - 1) as f64 * pitch;
        let (yaw, gap, z_inner, top) = (20.0f64, 4.0, 265.0, -62.0);
        let (c, s) = (yaw.to_radians().cos(), yaw.to_radians().sin());
        let left = PinholeMask {
            rows,
            cols,
            pitch,
            hole_diameter: 0.3,
            thickness: 0.0,
            frame: FrameSpec {
                origin: [-gap - span * c, top, z_inner - span * s],
                yaw_deg: -yaw,
                pitch_deg: 0.0,
                roll_deg: 0.0,
                extent: [span, (rows - 1) as f64 * pitch],
            },
        };
        let right = PinholeMask {
            frame: FrameSpec {
                origin: [gap, top, z_inner],
                yaw_deg: yaw,
                ..left.frame.clone()
            },
            ..left.clone()
        };
        BenchConfig {
            projector,
            masks: vec![left, right],
            scanner: ScannerModel {
                frame: FrameSpec {
                    origin: [-126.0, -98.2, 410.4],
                    yaw_deg: 0.0,
                    pitch_deg: 45.0,
                    roll_deg: 0.0,
                    extent: [240.0, 212.0],
                },
                dpi: 300.0,
            },
            rng_seed: 7,
            samples_per_pixel: 256,
        }
    }

    /// Same bench with the scanner turned parallel to the lens principal
    /// plane (blobs are circles).
    pub fn parallel_bench() -> Self {
        let mut b = Self::default_bench();
        b.scanner.frame = FrameSpec {
            origin: [-104.0, -108.0, 450.0],
            yaw_deg: 0.0,
            pitch_deg: 0.0,
            roll_deg: 0.0,
            extent: [200.0, 152.0],
        };
        b
    }
}

/// Identity of one physical pinhole.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PinholeId {
    pub mask: u32,
    pub row: u32,
    pub col: u32,
}

/// Plane identifiers shared by the simulator and the calibration views.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PlaneId {
    Scanner,
    Mask(u32),
}

impl std::fmt::Display for PlaneId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PlaneId::Scanner => write!(f, "scanner"),
            PlaneId::Mask(i) => write!(f, "mask{i}"),
        }
    }
}

/// Where a forward-traced ray ends.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RayEnd {
    /// Reached the scanner; `via` is the pinhole it passed (if masks exist).
    Scanner {
        world: WorldPoint,
        local: PlanePoint,
        via: Option<PinholeId>,
    },
    /// Stopped by a mask sheet or the opaque mask holder.
    Absorbed(Option<PlaneId>),
    /// Left the bench without touching the scanner.
    Escaped,
}

/// Ray passes a finite-thickness hole iff it is inside the hole radius on
/// both faces of the sheet.
fn passes_hole_depth(
    mask: &PinholeMask,
    plane: &PlaneFrame,
    hole: &PlanePoint,
    origin: &WorldPoint,
    dir: &Vector3<f64>,
) -> bool {
    if mask.thickness <= 0.0 {
        return true;
    }
    let n = plane.normal();
    let back = PlaneFrame {
        pose: RigidPose {
            rotation: plane.pose.rotation,
            translation: plane.pose.translation + n * mask.thickness,
        },
        extent: plane.extent,
    };
    let hit = back
        .intersect_ray(origin, dir)
        .or_else(|| back.intersect_ray(origin, &-dir));
    match hit {
        Some((_, l)) => (l - hole).norm() <= mask.hole_radius(),
        None => false,
    }
}

/// Forward trace of one ray from panel position `pixel` through the lens at
/// `lens_sample` (mm, relative to the optical center).
pub fn trace_ray(bench: &BenchConfig, pixel: PixelPoint, lens_sample: Vector2<f64>) -> RayEnd {
    let k = bench.ground_truth_intrinsics();
    let q = bench.projector.conjugate(&k, pixel);
    let origin = Point3::new(lens_sample.x, lens_sample.y, 0.0);
    let dir = (q - origin.coords).normalize();

    let planes = bench.mask_planes();
    let mut crossings: Vec<(f64, usize, PlanePoint)> = planes
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.intersect_ray(&origin, &dir).map(|(s, l)| (s, i, l)))
        .filter(|(_, i, l)| bench.masks[*i].sheet_contains(l))
        .collect();
    crossings.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

    let mut via = None;
    for (_, i, l) in &crossings {
        let m = &bench.masks[*i];
        let (row, col, dist) = m.nearest_hole(l);
        let hole = m.pinhole_local(row, col);
        if dist > m.hole_radius() || !passes_hole_depth(m, &planes[*i], &hole, &origin, &dir) {
            return RayEnd::Absorbed(Some(PlaneId::Mask(*i as u32)));
        }
        if via.is_some() {
            // Already passed one pinhole; a second sheet blocks it.
            return RayEnd::Absorbed(Some(PlaneId::Mask(*i as u32)));
        }
        via = Some(PinholeId {
            mask: *i as u32,
            row,
            col,
        });
    }
    if !bench.masks.is_empty() && via.is_none() {
        return RayEnd::Absorbed(None);
    }
    let scanner = bench.scanner_plane();
    match scanner.intersect_ray(&origin, &dir) {
        Some((s, local)) if scanner.contains_local(&local) => RayEnd::Scanner {
            world: origin + dir * s,
            local,
            via,
        },
        _ => RayEnd::Escaped,
    }
}

/// Concentric (Shirley-Chiu) map from the unit square to the unit disc.
pub fn concentric_disc(a: f64, b: f64) -> Vector2<f64> {
    let (sx, sy) = (2.0 * a - 1.0, 2.0 * b - 1.0);
    if sx == 0.0 && sy == 0.0 {
        return Vector2::zeros();
    }
    let (r, theta) = if sx.abs() > sy.abs() {
        (sx, PI / 4.0 * (sy / sx))
    } else {
        (sy, PI / 2.0 - PI / 4.0 * (sx / sy))
    };
    Vector2::new(r * theta.cos(), r * theta.sin())
}

fn radical_inverse(mut i: u32, base: u32) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while i > 0 {
        r += (i % base) as f64 * f;
        i /= base;
        f *= inv;
    }
    r
}

/// Stratified 4D sample pattern (Hammersley in the first two dimensions,
/// radical inverses in the last two) shared by every scanner pixel; each
/// pixel applies its own random toroidal shift.
fn sample_pattern(n: u32) -> Vec<[f64; 4]> {
    (0..n)
        .map(|i| {
            [
                (i as f64 + 0.5) / n as f64,
                radical_inverse(i, 2),
                radical_inverse(i, 3),
                radical_inverse(i, 5),
            ]
        })
        .collect()
}

#[inline]
fn wrap(x: f64) -> f64 {
    x - x.floor()
}

/// Sparse light transport: for every touched scanner pixel, the panel pixels
/// that feed it and their weights.
#[derive(Debug, Clone)]
pub struct Transport {
    pub raster_width: u32,
    pub raster_height: u32,
    pub panel_width: u32,
    pub panel_height: u32,
    /// Raster indices with any contribution, ascending.
    pub pixels: Vec<u32>,
    /// `entries[offsets[i]..offsets[i + 1]]` belong to `pixels[i]`.
    pub offsets: Vec<u32>,
    /// `(panel pixel id = v * width + u, weight)`, ascending by id.
    pub entries: Vec<(u32, f32)>,
}

struct Gathered {
    raster: u32,
    contrib: Vec<(u32, f32)>,
}

fn add_contrib(list: &mut Vec<(u32, f32)>, id: u32, w: f32) {
    if let Some(e) = list.iter_mut().find(|e| e.0 == id) {
        e.1 += w;
    } else {
        list.push((id, w));
    }
}

impl Transport {
    /// Builds the transport table for a bench. Work is split per pinhole and
    /// merged in pinhole order, so the result does not depend on scheduling.
    pub fn build(bench: &BenchConfig) -> Transport {
        let (rw, rh) = bench.scanner.raster_size();
        let pattern = sample_pattern(bench.samples_per_pixel);
        let chunks: Vec<Vec<Gathered>> = if bench.masks.is_empty() {
            (0..rh)
                .into_par_iter()
                .map(|row| gather_open_row(bench, row, &pattern))
                .collect()
        } else {
            let ids = bench.pinhole_ids();
            ids.par_iter()
                .map(|&id| gather_pinhole(bench, id, &pattern))
                .collect()
        };
        let mut all: Vec<Gathered> = chunks.into_iter().flatten().collect();
        all.sort_by_key(|g| g.raster);
        let mut pixels = Vec::new();
        let mut offsets = vec![0u32];
        let mut entries: Vec<(u32, f32)> = Vec::new();
        let mut i = 0;
        while i < all.len() {
            let r = all[i].raster;
            let mut merged: Vec<(u32, f32)> = Vec::new();
            while i < all.len() && all[i].raster == r {
                for &(id, w) in &all[i].contrib {
                    add_contrib(&mut merged, id, w);
                }
                i += 1;
            }
            if merged.is_empty() {
                continue;
            }
            merged.sort_by_key(|e| e.0);
            pixels.push(r);
            entries.extend(merged);
            offsets.push(entries.len() as u32);
        }
        Transport {
            raster_width: rw,
            raster_height: rh,
            panel_width: bench.projector.width,
            panel_height: bench.projector.height,
            pixels,
            offsets,
            entries,
        }
    }

    pub fn contributions(&self, i: usize) -> &[(u32, f32)] {
        &self.entries[self.offsets[i] as usize..self.offsets[i + 1] as usize]
    }

    /// Irradiance raster for an arbitrary lit-pixel predicate.
    pub fn render_with(&self, lit: impl Fn(u32, u32) -> bool + Sync) -> ScanImage {
        let w = self.panel_width;
        let mut img = ScanImage::zeros(self.raster_width, self.raster_height);
        let values: Vec<f32> = (0..self.pixels.len())
            .into_par_iter()
            .map(|i| {
                self.contributions(i)
                    .iter()
                    .filter(|(id, _)| lit(id % w, id / w))
                    .map(|&(_, wt)| wt)
                    .sum()
            })
            .collect();
        for (p, v) in self.pixels.iter().zip(values) {
            img.data[*p as usize] = v;
        }
        img
    }

    pub fn render(&self, frame: &BinaryFrame) -> Result<ScanImage> {
        if frame.width != self.panel_width || frame.height != self.panel_height {
            return Err(Error::RasterMismatch(format!(
                "frame is {}x{}, projector is {}x{}",
                frame.width, frame.height, self.panel_width, self.panel_height
            )));
        }
        Ok(self.render_with(|u, v| frame.lit(u, v)))
    }

    pub fn render_stack_frame(&self, layout: &StackLayout, index: usize) -> ScanImage {
        self.render_with(|u, v| layout.pixel_lit(index, u, v))
    }

    /// Per touched raster pixel, the panel pixel with the largest weight
    /// (ties to the lowest id).
    pub fn dominant(&self, i: usize) -> Option<(u32, u32)> {
        let w = self.panel_width;
        self.contributions(i)
            .iter()
            .fold(None::<(u32, f32)>, |best, &(id, wt)| match best {
                Some((_, bw)) if bw >= wt => best,
                _ => Some((id, wt)),
            })
            .map(|(id, _)| (id % w, id / w))
    }
}

/// Backward gather for one pinhole: every scanner pixel inside its light
/// cone, sampled over the pixel footprint and the hole opening.
fn gather_pinhole(bench: &BenchConfig, id: PinholeId, pattern: &[[f64; 4]]) -> Vec<Gathered> {
    let mask = &bench.masks[id.mask as usize];
    let mask_plane = mask.frame.plane();
    let hole_local = mask.pinhole_local(id.row, id.col);
    let h = mask_plane.to_world(&hole_local);
    let scanner = bench.scanner_plane();
    let (rw, rh) = bench.scanner.raster_size();
    let px = bench.scanner.pixel_size();
    let k = bench.ground_truth_intrinsics();
    let proj = &bench.projector;
    let ra = proj.aperture_radius();
    let rh_hole = mask.hole_radius();
    if h.z <= 0.0 {
        return Vec::new();
    }

    // Footprint of the lens disc seen through the hole center, padded for the
    // hole size.
    let mut lo = Vector2::new(f64::INFINITY, f64::INFINITY);
    let mut hi = Vector2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    for i in 0..96 {
        let t = 2.0 * PI * i as f64 / 96.0;
        let l = Point3::new(ra * t.cos(), ra * t.sin(), 0.0);
        let Some((_, loc)) = scanner.intersect_ray(&h, &(h - l)) else {
            return Vec::new();
        };
        lo = lo.inf(&loc.coords);
        hi = hi.sup(&loc.coords);
    }
    let dist_hs = scanner
        .intersect_ray(&h, &h.coords)
        .map(|(s, _)| s * h.coords.norm())
        .unwrap_or(0.0);
    let pad = rh_hole * (1.0 + dist_hs / h.z) * 2.0 + 2.0 * px;
    let x0 = ((lo.x - pad) / px - 0.5).floor().max(0.0) as i64;
    let y0 = ((lo.y - pad) / px - 0.5).floor().max(0.0) as i64;
    let x1 = (((hi.x + pad) / px - 0.5).ceil() as i64).min(rw as i64 - 1);
    let y1 = (((hi.y + pad) / px - 0.5).ceil() as i64).min(rh as i64 - 1);
    if x0 > x1 || y0 > y1 {
        return Vec::new();
    }

    let other_masks: Vec<(usize, PlaneFrame)> = bench
        .masks
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != id.mask as usize)
        .map(|(i, m)| (i, m.frame.plane()))
        .collect();
    let n_mask = mask_plane.normal();
    let n_scan = scanner.normal();
    let (ex, ey) = (
        mask_plane.pose.rotation.column(0).into_owned(),
        mask_plane.pose.rotation.column(1).into_owned(),
    );
    let weight_scale = (PI * rh_hole * rh_hole / pattern.len() as f64) as f32;
    let seed = bench.rng_seed
        ^ (bench.global_pinhole_index(id) as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = mask.thickness;

    let mut out = Vec::new();
    for y in y0..=y1 {
        for x in x0..=x1 {
            let shift: [f64; 4] = rng.random();
            let mut contrib: Vec<(u32, f32)> = Vec::new();
            for s in pattern {
                let d = concentric_disc(wrap(s[0] + shift[0]), wrap(s[1] + shift[1])) * rh_hole;
                let hp = h + ex * d.x + ey * d.y;
                let sl = Point2::new(
                    (x as f64 + wrap(s[2] + shift[2])) * px,
                    (y as f64 + wrap(s[3] + shift[3])) * px,
                );
                let sw = scanner.to_world(&sl);
                let back = hp - sw;
                if !(back.z < 0.0) {
                    continue;
                }
                // Lens-plane crossing of the line scanner -> hole.
                let t = sw.z / (sw.z - hp.z);
                let l = sw + (hp - sw) * t;
                if l.x * l.x + l.y * l.y > ra * ra {
                    continue;
                }
                let fwd = hp - l;
                if depth > 0.0 {
                    let back_center = h + n_mask * depth;
                    let denom = n_mask.dot(&fwd);
                    if denom.abs() < 1e-12 {
                        continue;
                    }
                    let tb = n_mask.dot(&(back_center - l)) / denom;
                    let pb = l + fwd * tb;
                    if (pb - back_center).norm() > rh_hole {
                        continue;
                    }
                }
                let blocked = other_masks.iter().any(|(i, p)| {
                    let dir = sw - l;
                    p.intersect_ray(&l, &dir)
                        .is_some_and(|(s, loc)| s < 1.0 && bench.masks[*i].sheet_contains(&loc))
                });
                if blocked {
                    continue;
                }
                let q = l + fwd * (proj.focus_distance / hp.z);
                let u = k.cx + k.fx * q.x / proj.focus_distance;
                let v = k.cy + k.fy * q.y / proj.focus_distance;
                let (ui, vi) = (u.round(), v.round());
                if ui < 0.0 || vi < 0.0 || ui >= proj.width as f64 || vi >= proj.height as f64 {
                    continue;
                }
                let dn = back.normalize();
                let w = (dn.dot(&n_scan).abs() * dn.dot(&n_mask).abs()) / back.norm_squared();
                let pid = vi as u32 * proj.width + ui as u32;
                add_contrib(&mut contrib, pid, (w as f32) * weight_scale);
            }
            if !contrib.is_empty() {
                out.push(Gathered {
                    raster: (y as u32) * rw + x as u32,
                    contrib,
                });
            }
        }
    }
    out
}

/// Backward gather with no masks: every scanner pixel sees the whole aperture.
fn gather_open_row(bench: &BenchConfig, row: u32, pattern: &[[f64; 4]]) -> Vec<Gathered> {
    let scanner = bench.scanner_plane();
    let (rw, _) = bench.scanner.raster_size();
    let px = bench.scanner.pixel_size();
    let k = bench.ground_truth_intrinsics();
    let proj = &bench.projector;
    let ra = proj.aperture_radius();
    let n_scan = scanner.normal();
    let weight_scale = (PI * ra * ra / pattern.len() as f64) as f32;
    let mut rng = ChaCha8Rng::seed_from_u64(bench.rng_seed ^ ((row as u64) << 32 | 0x5bd1));
    let mut out = Vec::new();
    for x in 0..rw {
        let shift: [f64; 4] = rng.random();
        let mut contrib = Vec::new();
        for s in pattern {
            let d = concentric_disc(wrap(s[0] + shift[0]), wrap(s[1] + shift[1])) * ra;
            let l = Point3::new(d.x, d.y, 0.0);
            let sl = Point2::new(
                (x as f64 + wrap(s[2] + shift[2])) * px,
                (row as f64 + wrap(s[3] + shift[3])) * px,
            );
            let sw = scanner.to_world(&sl);
            let fwd = sw - l;
            if !(fwd.z > 0.0) {
                continue;
            }
            let q = l + fwd * (proj.focus_distance / fwd.z);
            let u = (k.cx + k.fx * q.x / proj.focus_distance).round();
            let v = (k.cy + k.fy * q.y / proj.focus_distance).round();
            if u < 0.0 || v < 0.0 || u >= proj.width as f64 || v >= proj.height as f64 {
                continue;
            }
            let dn = fwd.normalize();
            let w = dn.z.abs() * dn.dot(&n_scan).abs() / fwd.norm_squared();
            add_contrib(
                &mut contrib,
                v as u32 * proj.width + u as u32,
                w as f32 * weight_scale,
            );
        }
        if !contrib.is_empty() {
            out.push(Gathered {
                raster: row * rw + x,
                contrib,
            });
        }
    }
    out
}

/// Renders one binary frame. Rebuilds the transport table; use [`Transport`]
/// directly to render many frames of the same bench.
pub fn render_scan(bench: &BenchConfig, frame: &BinaryFrame) -> Result<ScanImage> {
    Transport::build(bench).render(frame)
}

/// Analytic chief ray of one pinhole.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiefRayTruth {
    pub pinhole_id: usize,
    pub pinhole: PinholeId,
    pub chief_pixel: PixelPoint,
    /// Scanner-plane local coordinates of the chief ray hit (mm).
    pub scanner_mm: [f64; 2],
    /// The full light cone lands on the panel, the raster and no other mask.
    pub resolvable: bool,
}

/// Chief pixels and scanner hits for every pinhole, computed by direct
/// projection of the pinhole center (independent of [`trace_ray`]).
pub fn chief_ray_table(bench: &BenchConfig) -> Vec<ChiefRayTruth> {
    let k = bench.ground_truth_intrinsics();
    let scanner = bench.scanner_plane();
    let planes = bench.mask_planes();
    let proj = &bench.projector;
    let ra = proj.aperture_radius();
    let (rw, rh) = bench.scanner.raster_size();
    let origin = Point3::origin();
    bench
        .pinhole_ids()
        .into_iter()
        .filter_map(|id| {
            let h = bench.pinhole_world(id);
            let px = project(&k, &RigidPose::identity(), &h).ok()?;
            let (_, local) = scanner.intersect_ray(&origin, &h.coords)?;
            // Radius of the back-projected disc on the panel.
            let q_radius = ra * (proj.focus_distance - h.z) / h.z;
            let r_px = q_radius * k.fx / proj.focus_distance + 1.0;
            let on_panel = px.u - r_px >= 0.0
                && px.v - r_px >= 0.0
                && px.u + r_px <= proj.width as f64 - 1.0
                && px.v + r_px <= proj.height as f64 - 1.0;
            let unoccluded = planes.iter().enumerate().all(|(i, p)| {
                i == id.mask as usize
                    || p.intersect_ray(&origin, &h.coords)
                        .is_none_or(|(s, l)| s > 1.0 || !bench.masks[i].sheet_contains(&l))
            });
            let mut in_raster = true;
            for i in 0..32 {
                let t = 2.0 * PI * i as f64 / 32.0;
                let l = Point3::new(ra * t.cos(), ra * t.sin(), 0.0);
                match scanner.intersect_ray(&h, &(h - l)) {
                    Some((_, loc)) => {
                        let (x, y) = bench.scanner.local_to_raster(&loc);
                        if x < 2.0 || y < 2.0 || x > rw as f64 - 3.0 || y > rh as f64 - 3.0 {
                            in_raster = false;
                        }
                    }
                    None => in_raster = false,
                }
            }
            Some(ChiefRayTruth {
                pinhole_id: bench.global_pinhole_index(id),
                pinhole: id,
                chief_pixel: px,
                scanner_mm: [local.x, local.y],
                resolvable: on_panel && unoccluded && in_raster,
            })
        })
        .collect()
}

/// Additive sensor noise on scan irradiance, as a fraction of the white
/// level, applied per dataset (not inside the renderer).
pub fn add_irradiance_noise(img: &mut ScanImage, sigma: f64, seed: u64) {
    if sigma <= 0.0 {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    for v in img.data.iter_mut() {
        *v = (*v as f64 + normal.sample(&mut rng)).max(0.0) as f32;
    }
}

/// Rendered stack plus ground truth.
pub struct Dataset {
    pub layout: StackLayout,
    pub scans: Vec<ScanImage>,
    pub intrinsics: Intrinsics,
    pub chief_rays: Vec<ChiefRayTruth>,
    /// Per raster pixel: dominant illuminating panel pixel under full white.
    pub dominant: Vec<Option<(u32, u32)>>,
    /// Per raster pixel: every panel pixel with non-zero weight.
    pub illuminating: Vec<Vec<(u32, u32)>>,
    /// Scale applied to raw irradiance before 16-bit quantization.
    pub scale: f64,
}

/// White level that the brightest white-frame pixel is mapped to.
pub const QUANT_WHITE_LEVEL: f64 = 60000.0;

/// Renders the complete pattern stack, quantized to the 16-bit PGM grid.
pub fn synth_dataset(bench: &BenchConfig, irradiance_noise: f64) -> Result<Dataset> {
    bench.validate()?;
    let layout = StackLayout::new(bench.projector.width, bench.projector.height)?;
    let transport = Transport::build(bench);
    let white = transport.render_stack_frame(&layout, layout.frame_count() - 2);
    let max = white.max_value() as f64;
    let scale = if max > 0.0 {
        QUANT_WHITE_LEVEL / max
    } else {
        1.0
    };
    let scans = (0..layout.frame_count())
        .map(|i| {
            let mut img = transport.render_stack_frame(&layout, i).quantized(scale);
            add_irradiance_noise(
                &mut img,
                irradiance_noise * QUANT_WHITE_LEVEL,
                bench.rng_seed.wrapping_add(1 + i as u64),
            );
            img.quantized(1.0)
        })
        .collect();
    let n = transport.raster_width as usize * transport.raster_height as usize;
    let mut dominant = vec![None; n];
    let mut illuminating = vec![Vec::new(); n];
    let w = bench.projector.width;
    for (i, &p) in transport.pixels.iter().enumerate() {
        dominant[p as usize] = transport.dominant(i);
        illuminating[p as usize] = transport
            .contributions(i)
            .iter()
            .map(|&(id, _)| (id % w, id / w))
            .collect();
    }
    Ok(Dataset {
        layout,
        scans,
        intrinsics: bench.ground_truth_intrinsics(),
        chief_rays: chief_ray_table(bench),
        dominant,
        illuminating,
        scale,
    })
}
