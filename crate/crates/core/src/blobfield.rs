//! Light-blob segmentation on the white scan, per-mask clustering, grid
//! indexing and ellipse fitting.

use std::collections::{HashMap, VecDeque};

use nalgebra::{DMatrix, Matrix3, Point2, SymmetricEigen, Vector2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{estimate_homography, PixelPoint};
use crate::raster::ScanImage;

/// One light blob. `support` is everything lit above the detection floor
/// (where codes can be read); `pixels` is the outline region after the
/// blob's own Otsu threshold (used for shape and area). Indices are
/// row-major raster indices, ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub pixels: Vec<usize>,
    pub support: Vec<usize>,
    pub centroid: Vector2<f64>,
}

impl Blob {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }
}

#[derive(Debug, Clone)]
pub struct BlobField {
    pub width: u32,
    pub height: u32,
    /// Detection floor applied to the whole scan.
    pub threshold: f32,
    pub blobs: Vec<Blob>,
}

#[derive(Debug, Clone, Copy)]
pub struct SegmentOptions {
    pub min_area: usize,
    /// Detection floor as a fraction of the brightest scan value.
    pub detect_fraction: f32,
    /// A blob is flagged as merged when its area exceeds this multiple of
    /// the largest area among its nearest neighbours (partially lit blobs at
    /// the field edge make a median misleading).
    pub overlap_ratio: f64,
    pub neighbours: usize,
}

impl Default for SegmentOptions {
    fn default() -> Self {
        Self {
            min_area: 20,
            detect_fraction: 0.10,
            overlap_ratio: 1.8,
            neighbours: 6,
        }
    }
}

/// Otsu threshold over a 1024-bin histogram of `[0, max]`.
pub fn otsu_threshold(img: &ScanImage) -> f32 {
    otsu_of(&img.data)
}

fn otsu_of(values: &[f32]) -> f32 {
    const BINS: usize = 1024;
    let max = values.iter().copied().fold(0.0, f32::max);
    if max <= 0.0 {
        return 0.0;
    }
    let mut hist = [0u64; BINS];
    for &v in values {
        let b = ((v / max) * (BINS - 1) as f32).round() as usize;
        hist[b.min(BINS - 1)] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| i as f64 * c as f64)
        .sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_t) = (-1.0, 0usize);
    for (t, &c) in hist.iter().enumerate() {
        w0 += c as f64;
        sum0 += t as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best {
            best = between;
            best_t = t;
        }
    }
    (best_t as f32 + 0.5) / (BINS - 1) as f32 * max
}

/// 4-connected components of `fg` restricted to `within` (all pixels when
/// `None`). Each component comes back sorted.
fn components(fg: &[bool], w: usize, h: usize, within: Option<&[usize]>) -> Vec<Vec<usize>> {
    let mut label = vec![false; w * h];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    let starts: Box<dyn Iterator<Item = usize>> = match within {
        Some(px) => Box::new(px.iter().copied()),
        None => Box::new(0..w * h),
    };
    for start in starts {
        if !fg[start] || label[start] {
            continue;
        }
        label[start] = true;
        queue.push_back(start);
        let mut pixels = Vec::new();
        while let Some(p) = queue.pop_front() {
            pixels.push(p);
            let (x, y) = (p % w, p / w);
            let mut visit = |q: usize| {
                if fg[q] && !label[q] {
                    label[q] = true;
                    queue.push_back(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
        }
        pixels.sort_unstable();
        out.push(pixels);
    }
    out
}

/// Two-level segmentation: components above a global detection floor, then
/// each component is re-thresholded by Otsu over its own bounding window so
/// that dim blobs on the far side of a tilted scanner keep their full
/// outline. Components touching the raster border or smaller than
/// `min_area` are dropped, then merged blobs are rejected.
pub fn segment_blobs(white: &ScanImage, opts: &SegmentOptions) -> Result<BlobField> {
    let (w, h) = (white.width as usize, white.height as usize);
    let threshold = opts.detect_fraction * white.max_value();
    let fg: Vec<bool> = white
        .data
        .iter()
        .map(|&v| v > threshold && v > 0.0)
        .collect();
    let comps = components(&fg, w, h, None);
    let blobs: Vec<Blob> = comps
        .into_par_iter()
        .filter_map(|support| {
            let border = support.iter().any(|&p| {
                let (x, y) = (p % w, p / w);
                x == 0 || y == 0 || x + 1 == w || y + 1 == h
            });
            if border || support.len() < opts.min_area {
                return None;
            }
            let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
            for &p in &support {
                x0 = x0.min(p % w);
                x1 = x1.max(p % w);
                y0 = y0.min(p / w);
                y1 = y1.max(p / w);
            }
            let mut window = Vec::new();
            for y in y0.saturating_sub(2)..=(y1 + 2).min(h - 1) {
                for x in x0.saturating_sub(2)..=(x1 + 2).min(w - 1) {
                    window.push(white.data[y * w + x]);
                }
            }
            let local = otsu_of(&window);
            let mut inner = vec![false; w * h];
            for &p in &support {
                inner[p] = white.data[p] > local;
            }
            let pixels = components(&inner, w, h, Some(&support))
                .into_iter()
                .max_by_key(|c| (c.len(), std::cmp::Reverse(c[0])))?;
            if pixels.len() < opts.min_area {
                return None;
            }
            let n = pixels.len() as f64;
            let centroid = pixels.iter().fold(Vector2::zeros(), |acc, &p| {
                acc + Vector2::new((p % w) as f64, (p / w) as f64)
            }) / n;
            Some(Blob {
                pixels,
                support,
                centroid,
            })
        })
        .collect();
    if blobs.is_empty() {
        return Err(Error::EmptyField);
    }
    check_overlap(&blobs, opts)?;
    Ok(BlobField {
        width: white.width,
        height: white.height,
        threshold,
        blobs,
    })
}

fn check_overlap(blobs: &[Blob], opts: &SegmentOptions) -> Result<()> {
    if blobs.len() < 3 {
        return Ok(());
    }
    for (i, b) in blobs.iter().enumerate() {
        let mut near: Vec<(f64, usize)> = blobs
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, o)| ((o.centroid - b.centroid).norm_squared(), o.area()))
            .collect();
        near.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let largest = near
            .iter()
            .take(opts.neighbours)
            .map(|x| x.1)
            .max()
            .unwrap() as f64;
        let ratio = b.area() as f64 / largest;
        if ratio > opts.overlap_ratio {
            return Err(Error::OverlappingBlobs {
                blob: i,
                area: b.area(),
                ratio,
            });
        }
    }
    Ok(())
}

/// Lloyd k-means on blob centroids. Several farthest-point initialisations
/// are tried and the lowest within-cluster scatter wins, so the result is
/// deterministic. Returns one label per blob, with clusters ordered by
/// ascending mean x.
pub fn cluster_blobs(centroids: &[Vector2<f64>], k: usize) -> Result<Vec<usize>> {
    let n = centroids.len();
    if k == 0 || k > n {
        return Err(Error::OverClustered { k, n });
    }
    let starts: Vec<usize> = (0..16.min(n)).map(|i| i * n / 16.min(n)).collect();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for &s in &starts {
        let mut centers = vec![centroids[s]];
        while centers.len() < k {
            let far = (0..n)
                .max_by(|&a, &b| {
                    let da = centers
                        .iter()
                        .map(|c| (centroids[a] - c).norm_squared())
                        .fold(f64::INFINITY, f64::min);
                    let db = centers
                        .iter()
                        .map(|c| (centroids[b] - c).norm_squared())
                        .fold(f64::INFINITY, f64::min);
                    da.partial_cmp(&db).unwrap().then(b.cmp(&a))
                })
                .unwrap();
            centers.push(centroids[far]);
        }
        let mut labels = vec![0usize; n];
        for _ in 0..100 {
            let mut changed = false;
            for (i, p) in centroids.iter().enumerate() {
                let l = (0..k)
                    .min_by(|&a, &b| {
                        (p - centers[a])
                            .norm_squared()
                            .partial_cmp(&(p - centers[b]).norm_squared())
                            .unwrap()
                    })
                    .unwrap();
                if labels[i] != l {
                    labels[i] = l;
                    changed = true;
                }
            }
            for (c, center) in centers.iter_mut().enumerate() {
                let members: Vec<&Vector2<f64>> = centroids
                    .iter()
                    .zip(&labels)
                    .filter(|(_, &l)| l == c)
                    .map(|(p, _)| p)
                    .collect();
                if !members.is_empty() {
                    *center =
                        members.iter().fold(Vector2::zeros(), |a, p| a + *p) / members.len() as f64;
                }
            }
            if !changed {
                break;
            }
        }
        let sse: f64 = centroids
            .iter()
            .zip(&labels)
            .map(|(p, &l)| (p - centers[l]).norm_squared())
            .sum();
        if best.as_ref().is_none_or(|b| sse < b.0 - 1e-9) {
            // Order clusters left to right.
            let mut order: Vec<usize> = (0..k).collect();
            order.sort_by(|&a, &b| centers[a].x.partial_cmp(&centers[b].x).unwrap());
            let mut remap = vec![0; k];
            for (new, &old) in order.iter().enumerate() {
                remap[old] = new;
            }
            best = Some((sse, labels.iter().map(|&l| remap[l]).collect()));
        }
    }
    Ok(best.unwrap().1)
}

/// Grid index of a blob within its mask, after orientation normalisation
/// (columns grow with raster x, rows with raster y; the top-left detected
/// blob is (0, 0)).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridIndex {
    pub row: i32,
    pub col: i32,
}

fn dominant_direction(
    vectors: &[Vector2<f64>],
    exclude: Option<Vector2<f64>>,
) -> Option<Vector2<f64>> {
    let mut best: Option<(usize, Vector2<f64>)> = None;
    for v in vectors {
        if let Some(e) = exclude {
            let cos = v.normalize().dot(&e.normalize()).abs();
            if cos > 0.7 {
                continue;
            }
        }
        let support: Vec<Vector2<f64>> = vectors
            .iter()
            .filter_map(|o| {
                let tol = 0.2 * v.norm();
                if (o - v).norm() < tol {
                    Some(*o)
                } else if (o + v).norm() < tol {
                    Some(-o)
                } else {
                    None
                }
            })
            .collect();
        if best.as_ref().is_none_or(|b| support.len() > b.0) {
            let mean = support.iter().fold(Vector2::zeros(), |a, s| a + s) / support.len() as f64;
            best = Some((support.len(), mean));
        }
    }
    best.map(|b| b.1)
}

/// Assigns lattice indices to blob centroids that belong to one mask.
/// Returns `None` for centroids that do not fit the lattice.
pub fn recognize_grid(centroids: &[Vector2<f64>]) -> Result<Vec<Option<GridIndex>>> {
    let n = centroids.len();
    if n < 4 {
        return Err(Error::GridNotFound(format!("only {n} blobs in cluster")));
    }
    // Nearest-neighbour difference vectors.
    let mut diffs = Vec::new();
    for (i, p) in centroids.iter().enumerate() {
        let mut near: Vec<(f64, Vector2<f64>)> = centroids
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, q)| ((q - p).norm_squared(), q - p))
            .collect();
        near.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        diffs.extend(near.iter().take(4).map(|x| x.1));
    }
    let a = dominant_direction(&diffs, None)
        .ok_or_else(|| Error::GridNotFound("no lattice direction".into()))?;
    let b = dominant_direction(&diffs, Some(a))
        .ok_or_else(|| Error::GridNotFound("no second lattice direction".into()))?;
    // Column axis is the one closer to raster x, pointing to +x; row axis to +y.
    let (mut ac, mut ar) = if a.x.abs() >= b.x.abs() {
        (a, b)
    } else {
        (b, a)
    };
    if ac.x < 0.0 {
        ac = -ac;
    }
    if ar.y < 0.0 {
        ar = -ar;
    }

    // Breadth-first growth from the blob nearest the median position.
    let mut xs: Vec<f64> = centroids.iter().map(|c| c.x).collect();
    let mut ys: Vec<f64> = centroids.iter().map(|c| c.y).collect();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ys.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let med = Vector2::new(xs[n / 2], ys[n / 2]);
    let seed = (0..n)
        .min_by(|&i, &j| {
            (centroids[i] - med)
                .norm_squared()
                .partial_cmp(&(centroids[j] - med).norm_squared())
                .unwrap()
        })
        .unwrap();
    let mut index: Vec<Option<(i32, i32)>> = vec![None; n];
    let mut taken: HashMap<(i32, i32), usize> = HashMap::new();
    index[seed] = Some((0, 0));
    taken.insert((0, 0), seed);
    let mut queue = VecDeque::from([seed]);
    let steps = [(0, 1), (0, -1), (1, 0), (-1, 0)];
    while let Some(i) = queue.pop_front() {
        let (r, c) = index[i].unwrap();
        // Local lattice vectors from already indexed neighbours.
        let local = |dr: i32, dc: i32, fallback: Vector2<f64>| {
            if let Some(&j) = taken.get(&(r + dr, c + dc)) {
                (centroids[j] - centroids[i]) * (dr + dc).signum() as f64
            } else if let Some(&j) = taken.get(&(r - dr, c - dc)) {
                (centroids[i] - centroids[j]) * (dr + dc).signum() as f64
            } else {
                fallback
            }
        };
        let lc = local(0, 1, ac);
        let lr = local(1, 0, ar);
        for (dr, dc) in steps {
            let key = (r + dr, c + dc);
            if taken.contains_key(&key) {
                continue;
            }
            let pred = centroids[i] + lc * dc as f64 + lr * dr as f64;
            let tol = 0.3 * lc.norm().min(lr.norm());
            let hit = (0..n)
                .filter(|&j| index[j].is_none())
                .map(|j| (j, (centroids[j] - pred).norm()))
                .filter(|(_, d)| *d < tol)
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
            if let Some((j, _)) = hit {
                index[j] = Some(key);
                taken.insert(key, j);
                queue.push_back(j);
            }
        }
    }

    // Homography refinement: re-derive every index from a lattice fit.
    for _ in 0..3 {
        let pairs: Vec<(Point2<f64>, PixelPoint)> = index
            .iter()
            .enumerate()
            .filter_map(|(i, k)| {
                k.map(|(r, c)| {
                    (
                        Point2::new(c as f64, r as f64),
                        PixelPoint::new(centroids[i].x, centroids[i].y),
                    )
                })
            })
            .collect();
        if pairs.len() < 4 {
            return Err(Error::GridNotFound(format!(
                "lattice grew to only {} blobs",
                pairs.len()
            )));
        }
        let (hom, _) = estimate_homography(&pairs)
            .map_err(|e| Error::GridNotFound(format!("lattice fit failed: {e}")))?;
        let inv = hom
            .inverse()
            .ok_or_else(|| Error::GridNotFound("singular lattice homography".into()))?;
        let mut next: Vec<Option<(i32, i32)>> = vec![None; n];
        let mut seen: HashMap<(i32, i32), (usize, f64)> = HashMap::new();
        for (i, p) in centroids.iter().enumerate() {
            let g = inv.apply(p);
            let (c, r) = (g.x.round(), g.y.round());
            let resid = ((g.x - c).powi(2) + (g.y - r).powi(2)).sqrt();
            if resid > 0.25 {
                continue;
            }
            let key = (r as i32, c as i32);
            match seen.get(&key) {
                Some(&(_, d)) if d <= resid => {}
                _ => {
                    seen.insert(key, (i, resid));
                }
            }
        }
        for (key, (i, _)) in seen {
            next[i] = Some(key);
        }
        index = next;
    }

    let assigned: Vec<(i32, i32)> = index.iter().flatten().copied().collect();
    if assigned.len() < 4 {
        return Err(Error::GridNotFound("too few blobs on the lattice".into()));
    }
    let r0 = assigned.iter().map(|k| k.0).min().unwrap();
    let c0 = assigned.iter().map(|k| k.1).min().unwrap();
    Ok(index
        .into_iter()
        .map(|k| {
            k.map(|(r, c)| GridIndex {
                row: r - r0,
                col: c - c0,
            })
        })
        .collect())
}

/// Ellipse in center / semi-axis / orientation form. `angle` is the
/// direction of the major axis (radians, raster frame).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub center: [f64; 2],
    pub a: f64,
    pub b: f64,
    pub angle: f64,
}

/// Boundary of a pixel set as midpoints of the cracks between member and
/// non-member pixels.
pub fn boundary_points(pixels: &[usize], width: u32) -> Vec<Vector2<f64>> {
    let w = width as usize;
    let set: std::collections::HashSet<usize> = pixels.iter().copied().collect();
    let mut out = Vec::new();
    for &p in pixels {
        let (x, y) = ((p % w) as f64, (p / w) as f64);
        let left = p % w == 0 || !set.contains(&(p - 1));
        let right = !set.contains(&(p + 1)) || (p + 1) % w == 0;
        let up = p < w || !set.contains(&(p - w));
        let down = !set.contains(&(p + w));
        if left {
            out.push(Vector2::new(x - 0.5, y));
        }
        if right {
            out.push(Vector2::new(x + 0.5, y));
        }
        if up {
            out.push(Vector2::new(x, y - 0.5));
        }
        if down {
            out.push(Vector2::new(x, y + 0.5));
        }
    }
    out
}

/// Direct least-squares ellipse fit (Fitzgibbon, in the numerically stable
/// Halir-Flusser form) on normalised coordinates.
pub fn fit_ellipse(points: &[Vector2<f64>]) -> Result<Ellipse> {
    if points.len() < 6 {
        return Err(Error::NotAnEllipse(format!(
            "{} boundary points",
            points.len()
        )));
    }
    let n = points.len() as f64;
    let mean = points.iter().fold(Vector2::zeros(), |a, p| a + p) / n;
    let scale = (points
        .iter()
        .map(|p| (p - mean).norm_squared())
        .sum::<f64>()
        / n)
        .sqrt();
    if !(scale > 0.0) {
        return Err(Error::NotAnEllipse("all points coincide".into()));
    }
    let mut d1 = DMatrix::zeros(points.len(), 3);
    let mut d2 = DMatrix::zeros(points.len(), 3);
    for (i, p) in points.iter().enumerate() {
        let (x, y) = ((p.x - mean.x) / scale, (p.y - mean.y) / scale);
        d1[(i, 0)] = x * x;
        d1[(i, 1)] = x * y;
        d1[(i, 2)] = y * y;
        d2[(i, 0)] = x;
        d2[(i, 1)] = y;
        d2[(i, 2)] = 1.0;
    }
    let s1: Matrix3<f64> = (d1.transpose() * &d1).fixed_view::<3, 3>(0, 0).into();
    let s2: Matrix3<f64> = (d1.transpose() * &d2).fixed_view::<3, 3>(0, 0).into();
    let s3: Matrix3<f64> = (d2.transpose() * &d2).fixed_view::<3, 3>(0, 0).into();
    let s3_inv = s3
        .try_inverse()
        .ok_or_else(|| Error::NotAnEllipse("collinear boundary".into()))?;
    let t = -s3_inv * s2.transpose();
    let m = s1 + s2 * t;
    // Premultiply by inverse constraint matrix.
    let m = Matrix3::from_rows(&[m.row(2) / 2.0, -m.row(1), m.row(0) / 2.0]);
    // Eigenvector (null space per real eigenvalue) with 4ac - b^2 > 0.
    let mut best: Option<[f64; 6]> = None;
    for lambda in real_eigenvalues(&m) {
        let a1 = null_vector(&(m - Matrix3::identity() * lambda));
        let cond = 4.0 * a1[0] * a1[2] - a1[1] * a1[1];
        if cond > 0.0 {
            let a2 = t * a1;
            best = Some([a1[0], a1[1], a1[2], a2[0], a2[1], a2[2]]);
            break;
        }
    }
    let c = best.ok_or_else(|| Error::NotAnEllipse("no elliptic solution".into()))?;
    conic_to_ellipse(&c, mean, scale)
}

fn real_eigenvalues(m: &Matrix3<f64>) -> Vec<f64> {
    m.complex_eigenvalues()
        .iter()
        .filter(|z| z.im.abs() <= 1e-9 * (1.0 + z.re.abs()))
        .map(|z| z.re)
        .collect()
}

fn null_vector(a: &Matrix3<f64>) -> nalgebra::Vector3<f64> {
    let svd = a.svd(false, true);
    let vt = svd.v_t.unwrap();
    let (imin, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.partial_cmp(y.1).unwrap())
        .unwrap();
    vt.row(imin).transpose()
}

fn conic_to_ellipse(c: &[f64; 6], mean: Vector2<f64>, scale: f64) -> Result<Ellipse> {
    let [a, b, cc, d, e, f] = *c;
    let det = 4.0 * a * cc - b * b;
    if det <= 0.0 {
        return Err(Error::NotAnEllipse("conic is not an ellipse".into()));
    }
    let x0 = (b * e - 2.0 * cc * d) / det;
    let y0 = (b * d - 2.0 * a * e) / det;
    // Value of the conic at the center gives the scale of the quadratic form.
    let f0 = a * x0 * x0 + b * x0 * y0 + cc * y0 * y0 + d * x0 + e * y0 + f;
    let q = nalgebra::Matrix2::new(a, b / 2.0, b / 2.0, cc);
    let eig = SymmetricEigen::new(q);
    let (l0, l1) = (eig.eigenvalues[0], eig.eigenvalues[1]);
    let r0 = -f0 / l0;
    let r1 = -f0 / l1;
    if !(r0 > 0.0 && r1 > 0.0) {
        return Err(Error::NotAnEllipse("imaginary ellipse".into()));
    }
    let (s0, s1) = (r0.sqrt() * scale, r1.sqrt() * scale);
    let (a_len, b_len, axis) = if s0 >= s1 {
        (s0, s1, eig.eigenvectors.column(0).into_owned())
    } else {
        (s1, s0, eig.eigenvectors.column(1).into_owned())
    };
    Ok(Ellipse {
        center: [x0 * scale + mean.x, y0 * scale + mean.y],
        a: a_len,
        b: b_len,
        angle: axis.y.atan2(axis.x),
    })
}
