//! Gray-code pattern stacks, stack decoding and code lookups.
//!
//! Frame order is fixed: for every column bit (MSB first) a positive frame
//! followed by its complement, then the same for the row bits, then one
//! all-white and one all-black reference frame.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PixelPoint;
use crate::raster::ScanImage;

/// Reflected binary code.
pub fn gray_encode(n: u32) -> u32 {
    n ^ (n >> 1)
}

pub fn gray_decode(mut g: u32) -> u32 {
    let mut shift = 1;
    while shift < 32 {
        g ^= g >> shift;
        shift <<= 1;
    }
    g
}

/// Number of bits needed to address `n` positions (`ceil(log2 n)`).
pub fn bits_for(n: u32) -> u32 {
    if n <= 1 {
        0
    } else {
        32 - (n - 1).leading_zeros()
    }
}

/// Shape of a pattern stack; everything needed to interpret frame indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackLayout {
    pub width: u32,
    pub height: u32,
}

/// What a frame index encodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameKind {
    Column { bit: u32, complement: bool },
    Row { bit: u32, complement: bool },
    White,
    Black,
}

impl StackLayout {
    pub fn new(width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::config("projector", "width and height must be >= 1"));
        }
        Ok(Self { width, height })
    }

    pub fn col_bits(&self) -> u32 {
        bits_for(self.width)
    }

    pub fn row_bits(&self) -> u32 {
        bits_for(self.height)
    }

    pub fn bit_pairs(&self) -> usize {
        (self.col_bits() + self.row_bits()) as usize
    }

    pub fn frame_count(&self) -> usize {
        2 * self.bit_pairs() + 2
    }

    pub fn frame_kind(&self, index: usize) -> FrameKind {
        let pairs = self.bit_pairs();
        if index == 2 * pairs {
            return FrameKind::White;
        }
        if index > 2 * pairs {
            return FrameKind::Black;
        }
        let pair = (index / 2) as u32;
        let complement = index % 2 == 1;
        let cb = self.col_bits();
        if pair < cb {
            FrameKind::Column {
                bit: cb - 1 - pair,
                complement,
            }
        } else {
            FrameKind::Row {
                bit: self.row_bits() - 1 - (pair - cb),
                complement,
            }
        }
    }

    /// Whether projector pixel `(u, v)` is lit in frame `index`.
    pub fn pixel_lit(&self, index: usize, u: u32, v: u32) -> bool {
        match self.frame_kind(index) {
            FrameKind::Column { bit, complement } => {
                ((gray_encode(u) >> bit) & 1 == 1) != complement
            }
            FrameKind::Row { bit, complement } => ((gray_encode(v) >> bit) & 1 == 1) != complement,
            FrameKind::White => true,
            FrameKind::Black => false,
        }
    }
}

/// One binary projector frame, row-major, 1 = lit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryFrame {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
}

impl BinaryFrame {
    #[inline]
    pub fn lit(&self, u: u32, v: u32) -> bool {
        self.pixels[v as usize * self.width as usize + u as usize] != 0
    }

    pub fn to_scan_image(&self, maxval: f32) -> ScanImage {
        ScanImage {
            width: self.width,
            height: self.height,
            data: self.pixels.iter().map(|&b| b as f32 * maxval).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatternStack {
    pub layout: StackLayout,
    pub frames: Vec<BinaryFrame>,
}

pub fn render_frame(layout: &StackLayout, index: usize) -> BinaryFrame {
    let (w, h) = (layout.width, layout.height);
    let mut pixels = Vec::with_capacity(w as usize * h as usize);
    for v in 0..h {
        for u in 0..w {
            pixels.push(layout.pixel_lit(index, u, v) as u8);
        }
    }
    BinaryFrame {
        width: w,
        height: h,
        pixels,
    }
}

pub fn generate_patterns(width: u32, height: u32) -> Result<PatternStack> {
    let layout = StackLayout::new(width, height)?;
    let frames = (0..layout.frame_count())
        .map(|i| render_frame(&layout, i))
        .collect();
    Ok(PatternStack { layout, frames })
}

/// Why a scanner pixel failed to decode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum InvalidReason {
    LowContrast = 1,
    InconsistentBit = 2,
}

/// Per scanner pixel: decoded projector pixel or the reason it failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decoded {
    Valid { u: u32, v: u32 },
    Invalid(InvalidReason),
}

/// Both thresholds are fractions: `contrast` of the largest white-minus-black
/// difference in the raster, `bit` of the pixel's own white-minus-black.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeThresholds {
    pub contrast: f64,
    pub bit: f64,
}

impl Default for DecodeThresholds {
    fn default() -> Self {
        Self {
            contrast: 0.10,
            bit: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedMap {
    pub width: u32,
    pub height: u32,
    pub entries: Vec<Decoded>,
}

impl DecodedMap {
    #[inline]
    pub fn get(&self, x: u32, y: u32) -> Decoded {
        self.entries[y as usize * self.width as usize + x as usize]
    }

    pub fn valid_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|d| matches!(d, Decoded::Valid { .. }))
            .count()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(13 + self.entries.len() * 9);
        out.extend_from_slice(b"DMAP1");
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        for e in &self.entries {
            let (u, v, r) = match *e {
                Decoded::Valid { u, v } => (u as i32, v as i32, 0u8),
                Decoded::Invalid(reason) => (-1, -1, reason as u8),
            };
            out.extend_from_slice(&u.to_le_bytes());
            out.extend_from_slice(&v.to_le_bytes());
            out.push(r);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 13 || &bytes[..5] != b"DMAP1" {
            return Err(Error::Format("missing DMAP1 magic".into()));
        }
        let rd = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let (width, height) = (rd(5), rd(9));
        let n = width as usize * height as usize;
        if bytes.len() != 13 + 9 * n {
            return Err(Error::Format(format!(
                "DMAP1 body has {} bytes, expected {}",
                bytes.len() - 13,
                9 * n
            )));
        }
        let mut entries = Vec::with_capacity(n);
        for chunk in bytes[13..].chunks_exact(9) {
            let u = i32::from_le_bytes(chunk[0..4].try_into().unwrap());
            let v = i32::from_le_bytes(chunk[4..8].try_into().unwrap());
            entries.push(match chunk[8] {
                0 if u >= 0 && v >= 0 => Decoded::Valid {
                    u: u as u32,
                    v: v as u32,
                },
                1 => Decoded::Invalid(InvalidReason::LowContrast),
                2 => Decoded::Invalid(InvalidReason::InconsistentBit),
                r => return Err(Error::Format(format!("bad DMAP1 entry ({u}, {v}, {r})"))),
            });
        }
        Ok(Self {
            width,
            height,
            entries,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        w.write_all(&self.to_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        File::open(path)
            .map(BufReader::new)
            .and_then(|mut r| r.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}

/// Incremental decoder: feed bit pairs in stack order, then the two
/// reference frames. Only a few words per scanner pixel are kept, so full
/// stacks never need to be resident at once.
pub struct StackDecoder {
    layout: StackLayout,
    width: u32,
    height: u32,
    pairs_seen: usize,
    col_gray: Vec<u32>,
    row_gray: Vec<u32>,
    min_margin: Vec<f32>,
}

impl StackDecoder {
    pub fn new(layout: StackLayout, raster_width: u32, raster_height: u32) -> Self {
        let n = raster_width as usize * raster_height as usize;
        Self {
            layout,
            width: raster_width,
            height: raster_height,
            pairs_seen: 0,
            col_gray: vec![0; n],
            row_gray: vec![0; n],
            min_margin: vec![f32::INFINITY; n],
        }
    }

    fn check_raster(&self, img: &ScanImage) -> Result<()> {
        if img.width != self.width || img.height != self.height {
            return Err(Error::RasterMismatch(format!(
                "scan is {}x{}, stack raster is {}x{}",
                img.width, img.height, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn pairs_remaining(&self) -> usize {
        self.layout.bit_pairs() - self.pairs_seen
    }

    pub fn push_pair(&mut self, positive: &ScanImage, complement: &ScanImage) -> Result<()> {
        if self.pairs_remaining() == 0 {
            return Err(Error::StackMismatch {
                expected: self.layout.frame_count(),
                got: self.layout.frame_count() + 1,
            });
        }
        self.check_raster(positive)?;
        self.check_raster(complement)?;
        let cb = self.layout.col_bits() as usize;
        let target = if self.pairs_seen < cb {
            &mut self.col_gray
        } else {
            &mut self.row_gray
        };
        for (i, (&p, &c)) in positive.data.iter().zip(&complement.data).enumerate() {
            target[i] = (target[i] << 1) | (p > c) as u32;
            let m = (p - c).abs();
            if m < self.min_margin[i] {
                self.min_margin[i] = m;
            }
        }
        self.pairs_seen += 1;
        Ok(())
    }

    pub fn finish(
        self,
        white: &ScanImage,
        black: &ScanImage,
        thresholds: &DecodeThresholds,
    ) -> Result<DecodedMap> {
        if self.pairs_remaining() != 0 {
            return Err(Error::StackMismatch {
                expected: self.layout.frame_count(),
                got: 2 * self.pairs_seen + 2,
            });
        }
        self.check_raster(white)?;
        self.check_raster(black)?;
        let range = white
            .data
            .iter()
            .zip(&black.data)
            .map(|(w, b)| w - b)
            .fold(0.0f32, f32::max) as f64;
        let contrast_floor = thresholds.contrast * range;
        let entries = (0..white.data.len())
            .map(|i| {
                let contrast = (white.data[i] - black.data[i]) as f64;
                if !(range > 0.0) || contrast <= contrast_floor {
                    return Decoded::Invalid(InvalidReason::LowContrast);
                }
                if self.layout.bit_pairs() > 0
                    && self.min_margin[i] as f64 <= thresholds.bit * contrast
                {
                    return Decoded::Invalid(InvalidReason::InconsistentBit);
                }
                let u = gray_decode(self.col_gray[i]);
                let v = gray_decode(self.row_gray[i]);
                if u >= self.layout.width || v >= self.layout.height {
                    return Decoded::Invalid(InvalidReason::InconsistentBit);
                }
                Decoded::Valid { u, v }
            })
            .collect();
        Ok(DecodedMap {
            width: self.width,
            height: self.height,
            entries,
        })
    }
}

/// Decodes a full scan stack ordered like [`generate_patterns`].
pub fn decode_stack(
    layout: &StackLayout,
    scans: &[ScanImage],
    thresholds: &DecodeThresholds,
) -> Result<DecodedMap> {
    if scans.len() != layout.frame_count() {
        return Err(Error::StackMismatch {
            expected: layout.frame_count(),
            got: scans.len(),
        });
    }
    let (w, h) = (scans[0].width, scans[0].height);
    let mut dec = StackDecoder::new(*layout, w, h);
    let pairs = layout.bit_pairs();
    for k in 0..pairs {
        dec.push_pair(&scans[2 * k], &scans[2 * k + 1])?;
    }
    dec.finish(&scans[2 * pairs], &scans[2 * pairs + 1], thresholds)
}

/// Half-width (in projector pixels) of the code window used for sub-pixel
/// inverse lookups.
pub const LOOKUP_CODE_RADIUS: i64 = 2;

#[derive(Default, Clone, Copy)]
struct Acc {
    sx: f64,
    sy: f64,
    n: f64,
}

/// Weighted least-squares affine map `out = A [x, y, 1]` for two outputs.
/// Returns `None` when the inputs do not span the plane.
fn fit_affine(samples: &[(f64, f64, f64, f64, f64)], at: (f64, f64)) -> Option<(f64, f64)> {
    // samples: (x, y, out0, out1, weight), coordinates relative to `at`.
    let mut ata = Matrix3::<f64>::zeros();
    let mut b0 = Vector3::<f64>::zeros();
    let mut b1 = Vector3::<f64>::zeros();
    for &(x, y, o0, o1, w) in samples {
        let a = Vector3::new(x - at.0, y - at.1, 1.0);
        ata += a * a.transpose() * w;
        b0 += a * (o0 * w);
        b1 += a * (o1 * w);
    }
    let scale = ata[(0, 0)].max(ata[(1, 1)]).max(ata[(2, 2)]);
    let chol = ata.cholesky()?;
    let min_diag = (0..3)
        .map(|i| chol.l_dirty()[(i, i)])
        .fold(f64::INFINITY, f64::min);
    if min_diag * min_diag < 1e-9 * scale {
        return None;
    }
    let x0 = chol.solve(&b0);
    let x1 = chol.solve(&b1);
    Some((x0[2], x1[2]))
}

/// Which scanner pixels a lookup may use.
#[derive(Debug, Clone, Copy)]
pub enum LookupRegion<'a> {
    Whole,
    /// Raster indices (`y * width + x`), typically one blob's support.
    Pixels(&'a [usize]),
}

fn for_each_valid(map: &DecodedMap, region: LookupRegion<'_>, mut f: impl FnMut(usize, u32, u32)) {
    match region {
        LookupRegion::Whole => {
            for (i, e) in map.entries.iter().enumerate() {
                if let Decoded::Valid { u, v } = *e {
                    f(i, u, v)
                }
            }
        }
        LookupRegion::Pixels(idx) => {
            for &i in idx {
                if let Some(Decoded::Valid { u, v }) = map.entries.get(i).copied() {
                    f(i, u, v)
                }
            }
        }
    }
}

/// Scanner raster position (sub-pixel) that a projector pixel lands on.
///
/// Codes within [`LOOKUP_CODE_RADIUS`] of the target are reduced to their
/// scanner centroids; when they surround the target, a count-weighted affine
/// regression of centroid against code is evaluated at the sub-pixel target.
/// Otherwise the centroid of the exact rounded code is returned, and failing
/// that, `missing-code`.
pub fn inverse_lookup(
    map: &DecodedMap,
    target: PixelPoint,
    region: LookupRegion<'_>,
) -> Result<(f64, f64)> {
    let missing = || Error::MissingCode {
        u: target.u,
        v: target.v,
    };
    if !target.is_finite() {
        return Err(missing());
    }
    let tu = target.u.round() as i64;
    let tv = target.v.round() as i64;
    let r = LOOKUP_CODE_RADIUS;
    let mut codes: BTreeMap<(i64, i64), Acc> = BTreeMap::new();
    let w = map.width as usize;
    for_each_valid(map, region, |i, u, v| {
        let (du, dv) = (u as i64 - tu, v as i64 - tv);
        if du.abs() <= r && dv.abs() <= r {
            let a = codes.entry((u as i64, v as i64)).or_default();
            a.sx += (i % w) as f64;
            a.sy += (i / w) as f64;
            a.n += 1.0;
        }
    });
    if codes.is_empty() {
        return Err(missing());
    }
    let surrounded = {
        let below_u = codes.keys().any(|k| (k.0 as f64) < target.u);
        let above_u = codes.keys().any(|k| (k.0 as f64) > target.u);
        let below_v = codes.keys().any(|k| (k.1 as f64) < target.v);
        let above_v = codes.keys().any(|k| (k.1 as f64) > target.v);
        (below_u && above_u || codes.keys().all(|k| k.0 as f64 == target.u))
            && (below_v && above_v || codes.keys().all(|k| k.1 as f64 == target.v))
    };
    if codes.len() >= 4 && surrounded {
        let samples: Vec<_> = codes
            .iter()
            .map(|(&(u, v), a)| (u as f64, v as f64, a.sx / a.n, a.sy / a.n, a.n))
            .collect();
        if let Some(p) = fit_affine(&samples, (target.u, target.v)) {
            return Ok(p);
        }
    }
    if let Some(a) = codes.get(&(tu, tv)) {
        return Ok((a.sx / a.n, a.sy / a.n));
    }
    Err(missing())
}

/// Projector coordinate read off the decoded map at a sub-pixel scanner
/// position: affine regression of the decoded codes over valid pixels within
/// `radius` scanner pixels.
pub fn forward_lookup(
    map: &DecodedMap,
    x: f64,
    y: f64,
    radius: f64,
    region: Option<&std::collections::HashSet<usize>>,
) -> Result<PixelPoint> {
    let x0 = (x - radius).floor().max(0.0) as i64;
    let y0 = (y - radius).floor().max(0.0) as i64;
    let x1 = ((x + radius).ceil() as i64).min(map.width as i64 - 1);
    let y1 = ((y + radius).ceil() as i64).min(map.height as i64 - 1);
    let mut samples = Vec::new();
    for yy in y0..=y1 {
        for xx in x0..=x1 {
            let (dx, dy) = (xx as f64 - x, yy as f64 - y);
            if dx * dx + dy * dy > radius * radius {
                continue;
            }
            let idx = yy as usize * map.width as usize + xx as usize;
            if region.is_some_and(|r| !r.contains(&idx)) {
                continue;
            }
            if let Decoded::Valid { u, v } = map.entries[idx] {
                samples.push((xx as f64, yy as f64, u as f64, v as f64, 1.0));
            }
        }
    }
    let missing = Error::MissingCode {
        u: f64::NAN,
        v: f64::NAN,
    };
    if samples.len() < 3 {
        return Err(missing);
    }
    fit_affine(&samples, (x, y))
        .map(|(u, v)| PixelPoint::new(u, v))
        .ok_or(missing)
}
