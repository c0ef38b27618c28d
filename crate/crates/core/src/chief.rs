//! Chief-ray extraction: each blob's decoded projector pixels form a disc
//! (the aperture seen through the pinhole) whose center is the chief pixel.

use std::collections::{HashMap, HashSet, VecDeque};

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::blobfield::{boundary_points, fit_ellipse};
use crate::error::{Error, Result};
use crate::geometry::PixelPoint;
use crate::graycode::{forward_lookup, inverse_lookup, Decoded, DecodedMap, LookupRegion};

/// Which back-projected samples feed the circle fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CircleSamples {
    /// Outer boundary of the decoded pixel set, each code weighted by how
    /// many scanner pixels decoded to it.
    Boundary,
    /// Decoded pixels within `hull_tolerance` of the convex hull of the set,
    /// weighted by multiplicity.
    Hull,
    /// Every decoded sample, weighted by multiplicity.
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiefOptions {
    pub min_backproj_points: usize,
    pub samples: CircleSamples,
    /// Distance (projector px) inside the hull edges that still counts as
    /// on the hull.
    pub hull_tolerance: f64,
    /// Blob support is grown by this many scanner pixels before reading
    /// codes, so the dim rim of the blob is included.
    pub dilate: u32,
    /// Radius (scanner px) of the code regression used by the naive lookup.
    pub naive_radius: f64,
}

impl Default for ChiefOptions {
    fn default() -> Self {
        Self {
            min_backproj_points: 12,
            samples: CircleSamples::Boundary,
            hull_tolerance: 0.5,
            dilate: 3,
            naive_radius: 4.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Circle {
    pub center: Vector2<f64>,
    pub radius: f64,
    /// RMS geometric residual.
    pub rms: f64,
}

/// Algebraic (Kasa) fit followed by geometric Levenberg-Marquardt
/// refinement. Points carry non-negative weights.
pub fn fit_circle(points: &[(Vector2<f64>, f64)]) -> Result<Circle> {
    if points.len() < 3 {
        return Err(Error::DegenerateCircle(format!("{} points", points.len())));
    }
    let wsum: f64 = points.iter().map(|p| p.1).sum();
    let mean = points.iter().fold(Vector2::zeros(), |a, (p, w)| a + p * *w) / wsum;
    let mut ata = Matrix3::zeros();
    let mut atb = Vector3::zeros();
    for (p, w) in points {
        let q = p - mean;
        let a = Vector3::new(q.x, q.y, 1.0);
        ata += a * a.transpose() * *w;
        atb += a * (-(q.norm_squared()) * *w);
    }
    let scale = ata.diagonal().max();
    let svd = ata.svd(false, false);
    if svd.singular_values.min() < 1e-10 * scale {
        return Err(Error::DegenerateCircle("points are collinear".into()));
    }
    let sol = ata
        .lu()
        .solve(&atb)
        .ok_or_else(|| Error::DegenerateCircle("singular normal equations".into()))?;
    let mut c = Vector2::new(-sol.x / 2.0, -sol.y / 2.0);
    let r2 = c.norm_squared() - sol.z;
    if !(r2 > 0.0) {
        return Err(Error::DegenerateCircle("imaginary radius".into()));
    }
    let mut r = r2.sqrt();

    let cost = |c: &Vector2<f64>, r: f64| -> f64 {
        points
            .iter()
            .map(|(p, w)| w * ((p - mean - c).norm() - r).powi(2))
            .sum()
    };
    let mut lambda = 1e-3;
    let mut f = cost(&c, r);
    for _ in 0..100 {
        let mut jtj = Matrix3::zeros();
        let mut jtr = Vector3::zeros();
        for (p, w) in points {
            let d = p - mean - c;
            let n = d.norm().max(1e-12);
            let res = n - r;
            let j = Vector3::new(-d.x / n, -d.y / n, -1.0);
            jtj += j * j.transpose() * *w;
            jtr += j * (res * *w);
        }
        let mut improved = false;
        for _ in 0..10 {
            let mut a = jtj;
            for i in 0..3 {
                a[(i, i)] *= 1.0 + lambda;
            }
            let Some(step) = a.lu().solve(&(-jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let (nc, nr) = (c + Vector2::new(step.x, step.y), r + step.z);
            let nf = cost(&nc, nr);
            if nf <= f {
                let rel = (f - nf) / f.max(1e-300);
                c = nc;
                r = nr;
                f = nf;
                lambda = (lambda / 10.0).max(1e-12);
                improved = rel > 1e-14;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    Ok(Circle {
        center: c + mean,
        radius: r,
        rms: (f / wsum).sqrt(),
    })
}

/// Decoded codes of one blob with their multiplicities.
pub fn collect_codes(map: &DecodedMap, region: &[usize]) -> HashMap<(i32, i32), usize> {
    let mut codes = HashMap::new();
    for &i in region {
        if let Some(Decoded::Valid { u, v }) = map.entries.get(i).copied() {
            *codes.entry((u as i32, v as i32)).or_insert(0) += 1;
        }
    }
    codes
}

/// Largest 8-connected group of codes; isolated mis-decodes fall away.
fn main_component(codes: &HashMap<(i32, i32), usize>) -> HashSet<(i32, i32)> {
    let mut seen: HashSet<(i32, i32)> = HashSet::new();
    let mut best: HashSet<(i32, i32)> = HashSet::new();
    let mut keys: Vec<&(i32, i32)> = codes.keys().collect();
    keys.sort();
    for &&start in &keys {
        if seen.contains(&start) {
            continue;
        }
        let mut comp = HashSet::new();
        let mut q = VecDeque::from([start]);
        seen.insert(start);
        while let Some((u, v)) = q.pop_front() {
            comp.insert((u, v));
            for du in -1..=1 {
                for dv in -1..=1 {
                    let n = (u + du, v + dv);
                    if codes.contains_key(&n) && seen.insert(n) {
                        q.push_back(n);
                    }
                }
            }
        }
        if comp.len() > best.len() {
            best = comp;
        }
    }
    best
}

/// Members of the set that touch its exterior (4-neighbourhood), found by
/// flooding the complement from outside the bounding box.
fn outer_boundary(set: &HashSet<(i32, i32)>) -> Vec<(i32, i32)> {
    let u0 = set.iter().map(|p| p.0).min().unwrap() - 1;
    let u1 = set.iter().map(|p| p.0).max().unwrap() + 1;
    let v0 = set.iter().map(|p| p.1).min().unwrap() - 1;
    let v1 = set.iter().map(|p| p.1).max().unwrap() + 1;
    let (w, h) = ((u1 - u0 + 1) as usize, (v1 - v0 + 1) as usize);
    let idx = |u: i32, v: i32| (v - v0) as usize * w + (u - u0) as usize;
    let mut outside = vec![false; w * h];
    let mut q = VecDeque::from([(u0, v0)]);
    outside[0] = true;
    while let Some((u, v)) = q.pop_front() {
        for (du, dv) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
            let (nu, nv) = (u + du, v + dv);
            if nu < u0 || nu > u1 || nv < v0 || nv > v1 {
                continue;
            }
            let i = idx(nu, nv);
            if !outside[i] && !set.contains(&(nu, nv)) {
                outside[i] = true;
                q.push_back((nu, nv));
            }
        }
    }
    let mut out: Vec<(i32, i32)> = set
        .iter()
        .filter(|&&(u, v)| {
            [(1, 0), (-1, 0), (0, 1), (0, -1)]
                .iter()
                .any(|(du, dv)| outside[idx(u + du, v + dv)])
        })
        .copied()
        .collect();
    out.sort();
    out
}

/// Convex hull of integer points, counter-clockwise, no collinear vertices.
fn convex_hull(points: &[(i32, i32)]) -> Vec<(i32, i32)> {
    let mut p = points.to_vec();
    p.sort_unstable();
    p.dedup();
    if p.len() < 3 {
        return p;
    }
    let cross = |o: (i32, i32), a: (i32, i32), b: (i32, i32)| {
        (a.0 - o.0) as i64 * (b.1 - o.1) as i64 - (a.1 - o.1) as i64 * (b.0 - o.0) as i64
    };
    let mut hull: Vec<(i32, i32)> = Vec::with_capacity(2 * p.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(i32, i32)>> = if pass == 0 {
            Box::new(p.iter())
        } else {
            Box::new(p.iter().rev())
        };
        for &q in iter {
            while hull.len() >= start + 2
                && cross(hull[hull.len() - 2], hull[hull.len() - 1], q) <= 0
            {
                hull.pop();
            }
            hull.push(q);
        }
        hull.pop();
    }
    hull
}

/// Members of the set within `tol` of the convex hull boundary.
fn hull_points(set: &HashSet<(i32, i32)>, tol: f64) -> Vec<(i32, i32)> {
    let pts: Vec<(i32, i32)> = set.iter().copied().collect();
    let hull = convex_hull(&pts);
    let n = hull.len();
    let edges: Vec<(Vector2<f64>, Vector2<f64>)> = (0..n)
        .map(|i| {
            let a = Vector2::new(hull[i].0 as f64, hull[i].1 as f64);
            let b = Vector2::new(hull[(i + 1) % n].0 as f64, hull[(i + 1) % n].1 as f64);
            let d = b - a;
            (a, Vector2::new(-d.y, d.x).normalize())
        })
        .collect();
    let mut out: Vec<(i32, i32)> = pts
        .into_iter()
        .filter(|&(u, v)| {
            let q = Vector2::new(u as f64, v as f64);
            // Every member is on the inner side of every edge line, so the
            // line distance is the distance to the hull for points near it.
            edges.iter().any(|(a, nrm)| (q - a).dot(nrm).abs() <= tol)
        })
        .collect();
    out.sort_unstable();
    out
}

/// Result of chief-ray extraction for one blob.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiefRay {
    /// Chief pixel (projector).
    pub pixel: PixelPoint,
    /// Where the chief ray meets the scanner (raster coordinates).
    pub scanner: [f64; 2],
    /// Back-projected disc radius (projector px).
    pub radius: f64,
    /// Circle-fit RMS residual (projector px).
    pub residual: f64,
    pub points: usize,
}

/// Pixels within `r` (Chebyshev) of a pixel set, clipped to the raster.
pub fn dilate(pixels: &[usize], width: u32, height: u32, r: u32) -> Vec<usize> {
    if r == 0 {
        return pixels.to_vec();
    }
    let (w, h, r) = (width as i64, height as i64, r as i64);
    let mut out: HashSet<usize> = HashSet::with_capacity(pixels.len() * 2);
    for &p in pixels {
        let (x, y) = ((p as i64) % w, (p as i64) / w);
        for dy in -r..=r {
            for dx in -r..=r {
                let (nx, ny) = (x + dx, y + dy);
                if nx >= 0 && ny >= 0 && nx < w && ny < h {
                    out.insert((ny * w + nx) as usize);
                }
            }
        }
    }
    let mut v: Vec<usize> = out.into_iter().collect();
    v.sort_unstable();
    v
}

/// Fits the back-projected disc of one blob and looks up where its center
/// lands on the scanner. `support` is the lit region of the blob; `index` is
/// only used in error messages.
pub fn extract_chief_ray(
    map: &DecodedMap,
    support: &[usize],
    panel: (u32, u32),
    opts: &ChiefOptions,
    index: usize,
) -> Result<ChiefRay> {
    let region = dilate(support, map.width, map.height, opts.dilate);
    let codes = collect_codes(map, &region);
    let comp = main_component(&codes);
    if comp.len() < opts.min_backproj_points {
        log::debug!(
            "blob {index}: {} back-projected points, need {}",
            comp.len(),
            opts.min_backproj_points
        );
        return Err(Error::MissingCode {
            u: f64::NAN,
            v: f64::NAN,
        });
    }
    if comp
        .iter()
        .any(|&(u, v)| u <= 0 || v <= 0 || u >= panel.0 as i32 - 1 || v >= panel.1 as i32 - 1)
    {
        return Err(Error::TruncatedBlob { blob: index });
    }
    let samples: Vec<(Vector2<f64>, f64)> = match opts.samples {
        CircleSamples::Hull => hull_points(&comp, opts.hull_tolerance)
            .into_iter()
            .map(|k| (Vector2::new(k.0 as f64, k.1 as f64), codes[&k] as f64))
            .collect(),
        CircleSamples::Boundary => outer_boundary(&comp)
            .into_iter()
            .map(|(u, v)| (Vector2::new(u as f64, v as f64), codes[&(u, v)] as f64))
            .collect(),
        CircleSamples::All => {
            let mut keys: Vec<&(i32, i32)> = comp.iter().collect();
            keys.sort();
            keys.into_iter()
                .map(|k| (Vector2::new(k.0 as f64, k.1 as f64), codes[k] as f64))
                .collect()
        }
    };
    let circle = match opts.samples {
        CircleSamples::Hull | CircleSamples::Boundary => fit_circle(&samples)?,
        CircleSamples::All => {
            // A filled disc: its mean is the center, radius from the spread.
            let w: f64 = samples.iter().map(|s| s.1).sum();
            let c = samples
                .iter()
                .fold(Vector2::zeros(), |a, (p, wt)| a + p * *wt)
                / w;
            let m2 = samples
                .iter()
                .map(|(p, wt)| (p - c).norm_squared() * wt)
                .sum::<f64>()
                / w;
            Circle {
                center: c,
                radius: (2.0 * m2).sqrt(),
                rms: 0.0,
            }
        }
    };
    let pixel = PixelPoint::new(circle.center.x, circle.center.y);
    let region_hits: Vec<usize> = region
        .iter()
        .copied()
        .filter(|&i| {
            matches!(map.entries[i], Decoded::Valid { u, v } if comp.contains(&(u as i32, v as i32)))
        })
        .collect();
    let (sx, sy) = inverse_lookup(map, pixel, LookupRegion::Pixels(&region_hits))?;
    Ok(ChiefRay {
        pixel,
        scanner: [sx, sy],
        radius: circle.radius,
        residual: circle.rms,
        points: comp.len(),
    })
}

/// The conventional estimate: center of the ellipse fitted to the blob
/// outline, with the projector pixel read off the decoded map there.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NaiveCenter {
    pub pixel: PixelPoint,
    pub scanner: [f64; 2],
}

/// `outline` is the thresholded blob used for the ellipse, `support` the lit
/// region whose codes are read. Blobs whose codes reach the panel border are
/// rejected as for [`extract_chief_ray`].
pub fn naive_center(
    map: &DecodedMap,
    outline: &[usize],
    support: &[usize],
    panel: (u32, u32),
    opts: &ChiefOptions,
    index: usize,
) -> Result<NaiveCenter> {
    let region = dilate(support, map.width, map.height, opts.dilate);
    let codes = collect_codes(map, &region);
    if main_component(&codes)
        .iter()
        .any(|&(u, v)| u <= 0 || v <= 0 || u >= panel.0 as i32 - 1 || v >= panel.1 as i32 - 1)
    {
        return Err(Error::TruncatedBlob { blob: index });
    }
    let e = fit_ellipse(&boundary_points(outline, map.width))?;
    let region: HashSet<usize> = region.into_iter().collect();
    let pixel = forward_lookup(
        map,
        e.center[0],
        e.center[1],
        opts.naive_radius,
        Some(&region),
    )?;
    Ok(NaiveCenter {
        pixel,
        scanner: e.center,
    })
}
