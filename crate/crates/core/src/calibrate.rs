//! Intrinsic estimation from planar views: Zhang's closed form, joint
//! Levenberg-Marquardt refinement, robust exclusion of correspondence sets,
//! and PnP-based accuracy evaluation.

use nalgebra::{DMatrix, DVector, Matrix3, Point2, Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    estimate_homography, nearest_rotation, project, unproject_ray, Intrinsics, PixelPoint,
    PlanePoint, RigidPose, WorldPoint,
};
use crate::optics::PlaneId;

/// One pinhole's correspondences: the hole on its mask, the chief-ray hit on
/// the scanner, and the chief pixel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceSet {
    pub pinhole_id: usize,
    pub mask: u32,
    pub mask_point: PlanePoint,
    pub scanner_point: PlanePoint,
    pub pixel: PixelPoint,
}

/// Pairs observed on one plane. `sets[i]` indexes the correspondence set
/// behind `pairs[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanarView {
    pub plane: PlaneId,
    pub pairs: Vec<(PlanePoint, PixelPoint)>,
    pub sets: Vec<usize>,
}

/// The scanner view plus one view per mask, from the sets whose `active`
/// flag is set.
pub fn build_views(
    sets: &[CorrespondenceSet],
    active: &[bool],
    masks: u32,
) -> Result<Vec<PlanarView>> {
    let mut views = vec![PlanarView {
        plane: PlaneId::Scanner,
        pairs: Vec::new(),
        sets: Vec::new(),
    }];
    for m in 0..masks {
        views.push(PlanarView {
            plane: PlaneId::Mask(m),
            pairs: Vec::new(),
            sets: Vec::new(),
        });
    }
    for (i, s) in sets.iter().enumerate() {
        if !active[i] || !s.pixel.is_finite() {
            continue;
        }
        views[0].pairs.push((s.scanner_point, s.pixel));
        views[0].sets.push(i);
        if let Some(v) = views.get_mut(1 + s.mask as usize) {
            v.pairs.push((s.mask_point, s.pixel));
            v.sets.push(i);
        }
    }
    for v in &views {
        if v.pairs.len() < 4 {
            return Err(Error::InsufficientView {
                plane: v.plane.to_string(),
                pairs: v.pairs.len(),
            });
        }
    }
    Ok(views)
}

fn v_ij(h: &Matrix3<f64>, i: usize, j: usize) -> [f64; 6] {
    let (hi, hj) = (h.column(i), h.column(j));
    [
        hi[0] * hj[0],
        hi[0] * hj[1] + hi[1] * hj[0],
        hi[1] * hj[1],
        hi[2] * hj[0] + hi[0] * hj[2],
        hi[2] * hj[1] + hi[1] * hj[2],
        hi[2] * hj[2],
    ]
}

/// Extrinsics of a plane from its homography and the intrinsics.
pub fn pose_from_homography(k: &Intrinsics, h: &Matrix3<f64>) -> Result<RigidPose> {
    let kinv = k
        .matrix()
        .try_inverse()
        .ok_or_else(|| Error::InvalidIntrinsics("singular K".into()))?;
    let m = kinv * h;
    let (c0, c1) = (m.column(0).into_owned(), m.column(1).into_owned());
    let scale = 2.0 / (c0.norm() + c1.norm());
    let mut r1 = c0 * scale;
    let mut r2 = c1 * scale;
    let mut t = m.column(2) * scale;
    if t.z < 0.0 {
        r1 = -r1;
        r2 = -r2;
        t = -t;
    }
    let r = Matrix3::from_columns(&[r1, r2, r1.cross(&r2)]);
    Ok(RigidPose {
        rotation: nearest_rotation(&r),
        translation: t,
    })
}

/// Closed-form intrinsics (zero skew) and per-view extrinsics.
pub fn zhang_closed_form(views: &[PlanarView]) -> Result<(Intrinsics, Vec<RigidPose>)> {
    if views.len() < 2 {
        return Err(Error::ClosedFormFailed(format!(
            "{} views, need at least 2",
            views.len()
        )));
    }
    // Condition the image coordinates.
    let all: Vec<&PixelPoint> = views
        .iter()
        .flat_map(|v| v.pairs.iter().map(|p| &p.1))
        .collect();
    let n = all.len() as f64;
    let (mu, mv) = (
        all.iter().map(|p| p.u).sum::<f64>() / n,
        all.iter().map(|p| p.v).sum::<f64>() / n,
    );
    let s = all
        .iter()
        .map(|p| ((p.u - mu).powi(2) + (p.v - mv).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    let s = if s > 0.0 { s } else { 1.0 };
    let norm = Matrix3::new(1.0 / s, 0.0, -mu / s, 0.0, 1.0 / s, -mv / s, 0.0, 0.0, 1.0);
    let denorm = Matrix3::new(s, 0.0, mu, 0.0, s, mv, 0.0, 0.0, 1.0);

    let mut homs = Vec::with_capacity(views.len());
    let mut rows: Vec<[f64; 6]> = Vec::new();
    for v in views {
        let (h, _) = estimate_homography(&v.pairs)
            .map_err(|e| Error::ClosedFormFailed(format!("view {}: {e}", v.plane)))?;
        let hn = norm * h.0;
        let hn = hn / hn.norm();
        let a = v_ij(&hn, 0, 1);
        let b0 = v_ij(&hn, 0, 0);
        let b1 = v_ij(&hn, 1, 1);
        rows.push(a);
        rows.push(std::array::from_fn(|i| b0[i] - b1[i]));
        homs.push(h.0);
    }
    // Zero skew.
    rows.push([0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    let mut a = DMatrix::zeros(rows.len().max(6), 6);
    for (i, r) in rows.iter().enumerate() {
        for j in 0..6 {
            a[(i, j)] = r[j];
        }
    }
    let svd = a.svd(false, true);
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..6).collect();
    order.sort_by(|&i, &j| sv[j].partial_cmp(&sv[i]).unwrap());
    if !(sv[order[0]] > 0.0) || sv[order[4]] / sv[order[0]] < 1e-9 {
        return Err(Error::ClosedFormFailed(
            "absolute-conic system is rank deficient (parallel or too few views)".into(),
        ));
    }
    let b = svd.v_t.unwrap().row(order[5]).transpose();
    let mut b = [b[0], b[1], b[2], b[3], b[4], b[5]];
    if b[0] < 0.0 {
        b.iter_mut().for_each(|x| *x = -*x);
    }
    let [b11, b12, b22, b13, b23, b33] = b;
    let den = b11 * b22 - b12 * b12;
    if !(b11 > 0.0 && den > 0.0) {
        return Err(Error::ClosedFormFailed(
            "conic image is not positive definite".into(),
        ));
    }
    let v0 = (b12 * b13 - b11 * b23) / den;
    let lambda = b33 - (b13 * b13 + v0 * (b12 * b13 - b11 * b23)) / b11;
    if !(lambda / b11 > 0.0) {
        return Err(Error::ClosedFormFailed(
            "conic image is not positive definite".into(),
        ));
    }
    let alpha = (lambda / b11).sqrt();
    let beta = (lambda * b11 / den).sqrt();
    let u0 = -b13 * alpha * alpha / lambda;
    let kn = Matrix3::new(alpha, 0.0, u0, 0.0, beta, v0, 0.0, 0.0, 1.0);
    let km = denorm * kn;
    let k = Intrinsics {
        fx: km[(0, 0)],
        fy: km[(1, 1)],
        cx: km[(0, 2)],
        cy: km[(1, 2)],
    };
    k.validate()
        .map_err(|e| Error::ClosedFormFailed(format!("recovered intrinsics invalid: {e}")))?;
    let poses = homs
        .iter()
        .map(|h| pose_from_homography(&k, h))
        .collect::<Result<Vec<_>>>()?;
    Ok((k, poses))
}

/// Outcome of a Levenberg-Marquardt run.
#[derive(Debug, Clone)]
pub struct LmOutcome<S> {
    pub state: S,
    pub initial_cost: f64,
    pub cost: f64,
    pub iterations: usize,
    /// Cost after every accepted step (starting with the initial cost).
    pub cost_history: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct LmSettings {
    pub max_iterations: usize,
    pub relative_tolerance: f64,
}

impl Default for LmSettings {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            relative_tolerance: 1e-12,
        }
    }
}

/// Dense Levenberg-Marquardt with Marquardt diagonal scaling. `eval`
/// returns residuals and (when asked) the Jacobian with respect to the local
/// update applied by `retract`. Accepted steps never increase the cost.
pub fn levenberg_marquardt<S: Clone>(
    start: S,
    eval: impl Fn(&S, bool) -> (DVector<f64>, Option<DMatrix<f64>>),
    retract: impl Fn(&S, &DVector<f64>) -> S,
    settings: &LmSettings,
) -> Result<LmOutcome<S>> {
    let (r0, _) = eval(&start, false);
    let mut cost = r0.norm_squared();
    if !cost.is_finite() {
        return Err(Error::LmFailed("initial cost is not finite".into()));
    }
    let initial_cost = cost;
    let mut state = start;
    let mut history = vec![cost];
    let mut lambda = 1e-3;
    let mut iterations = 0;
    while iterations < settings.max_iterations && cost > 0.0 {
        iterations += 1;
        let (r, j) = eval(&state, true);
        let j = j.expect("jacobian requested");
        let jtj = j.transpose() * &j;
        let jtr = j.transpose() * &r;
        let mut accepted = false;
        for _ in 0..12 {
            let mut a = jtj.clone();
            for i in 0..a.nrows() {
                a[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&(-&jtr))) else {
                lambda *= 10.0;
                continue;
            };
            let cand = retract(&state, &step);
            let (rc, _) = eval(&cand, false);
            let c = rc.norm_squared();
            if c.is_nan() {
                return Err(Error::LmFailed("cost became NaN".into()));
            }
            if c <= cost {
                let rel = (cost - c) / cost;
                state = cand;
                cost = c;
                history.push(c);
                lambda = (lambda / 3.0).max(1e-15);
                accepted = true;
                if rel < settings.relative_tolerance {
                    return Ok(LmOutcome {
                        state,
                        initial_cost,
                        cost,
                        iterations,
                        cost_history: history,
                    });
                }
                break;
            }
            lambda *= 4.0;
        }
        if !accepted {
            break;
        }
    }
    Ok(LmOutcome {
        state,
        initial_cost,
        cost,
        iterations,
        cost_history: history,
    })
}

/// Residual block and Jacobian rows of one planar point under `(k, pose)`.
/// Jacobian columns: fx, fy, cx, cy, then rotation (left chart) and
/// translation of the pose.
fn point_residual(
    k: &Intrinsics,
    pose: &RigidPose,
    obj: &PlanePoint,
    img: &PixelPoint,
) -> ([f64; 2], [[f64; 10]; 2]) {
    let rp = pose.rotation * Vector3::new(obj.x, obj.y, 0.0);
    let x = rp + pose.translation;
    let iz = 1.0 / x.z;
    let (xn, yn) = (x.x * iz, x.y * iz);
    let res = [k.fx * xn + k.cx - img.u, k.fy * yn + k.cy - img.v];
    let du = Vector3::new(k.fx * iz, 0.0, -k.fx * x.x * iz * iz);
    let dv = Vector3::new(0.0, k.fy * iz, -k.fy * x.y * iz * iz);
    // d(R p)/d(omega) = -[R p]x
    let skew = Matrix3::new(0.0, -rp.z, rp.y, rp.z, 0.0, -rp.x, -rp.y, rp.x, 0.0);
    let dr_u = -(skew.transpose() * du);
    let dr_v = -(skew.transpose() * dv);
    let ju = [xn, 0.0, 1.0, 0.0, dr_u.x, dr_u.y, dr_u.z, du.x, du.y, du.z];
    let jv = [0.0, yn, 0.0, 1.0, dr_v.x, dr_v.y, dr_v.z, dv.x, dv.y, dv.z];
    (res, [ju, jv])
}

/// State of the joint refinement.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraState {
    pub k: Intrinsics,
    pub poses: Vec<RigidPose>,
}

#[derive(Debug, Clone)]
pub struct Refined {
    pub k: Intrinsics,
    pub poses: Vec<RigidPose>,
    /// Mean reprojection distance (projector px) over all view pairs.
    pub mrpe: f64,
    pub lm: LmOutcome<CameraState>,
}

/// Joint refinement of intrinsics and all view poses.
pub fn refine_lm(
    k: Intrinsics,
    poses: Vec<RigidPose>,
    views: &[PlanarView],
    settings: &LmSettings,
) -> Result<Refined> {
    let n_res: usize = views.iter().map(|v| 2 * v.pairs.len()).sum();
    let n_par = 4 + 6 * views.len();
    let eval = |s: &CameraState, want_j: bool| {
        let mut r = DVector::zeros(n_res);
        let mut j = want_j.then(|| DMatrix::zeros(n_res, n_par));
        let mut row = 0;
        for (vi, v) in views.iter().enumerate() {
            for (obj, img) in &v.pairs {
                let (res, jac) = point_residual(&s.k, &s.poses[vi], obj, img);
                r[row] = res[0];
                r[row + 1] = res[1];
                if let Some(j) = j.as_mut() {
                    for d in 0..2 {
                        for c in 0..4 {
                            j[(row + d, c)] = jac[d][c];
                        }
                        for c in 0..6 {
                            j[(row + d, 4 + 6 * vi + c)] = jac[d][4 + c];
                        }
                    }
                }
                row += 2;
            }
        }
        (r, j)
    };
    let retract = |s: &CameraState, d: &DVector<f64>| CameraState {
        k: Intrinsics {
            fx: s.k.fx + d[0],
            fy: s.k.fy + d[1],
            cx: s.k.cx + d[2],
            cy: s.k.cy + d[3],
        },
        poses: s
            .poses
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let o = 4 + 6 * i;
                p.perturbed(
                    &Vector3::new(d[o], d[o + 1], d[o + 2]),
                    &Vector3::new(d[o + 3], d[o + 4], d[o + 5]),
                )
            })
            .collect(),
    };
    let lm = levenberg_marquardt(CameraState { k, poses }, eval, retract, settings)?;
    let k = lm.state.k;
    k.validate()
        .map_err(|e| Error::LmFailed(format!("refined intrinsics invalid: {e}")))?;
    let poses = lm.state.poses.clone();
    let mrpe = mean(&projector_errors(&k, &poses, views));
    Ok(Refined { k, poses, mrpe, lm })
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Image-plane distance between each observed pixel and its projected
/// object point, over all views in order.
pub fn projector_errors(k: &Intrinsics, poses: &[RigidPose], views: &[PlanarView]) -> Vec<f64> {
    views
        .iter()
        .zip(poses)
        .flat_map(|(v, pose)| {
            v.pairs.iter().map(move |(obj, img)| {
                match project(k, pose, &Point3::new(obj.x, obj.y, 0.0)) {
                    Ok(p) => p.distance(img),
                    Err(_) => f64::INFINITY,
                }
            })
        })
        .collect()
}

/// Distance (plane units) on the scanner plane between each set's scanner
/// point and where the ray of its chief pixel meets the plane.
pub fn scanner_errors(
    k: &Intrinsics,
    scanner_pose: &RigidPose,
    sets: &[CorrespondenceSet],
) -> Vec<f64> {
    let plane_to_proj = scanner_pose;
    let n = plane_to_proj.rotation.column(2).into_owned();
    let origin_plane = plane_to_proj.translation;
    sets.iter()
        .map(|s| {
            let d = k.normalized(s.pixel);
            let denom = n.dot(&d);
            if denom.abs() < 1e-15 {
                return f64::INFINITY;
            }
            let t = n.dot(&origin_plane) / denom;
            if !(t > 0.0) {
                return f64::INFINITY;
            }
            let hit = d * t;
            let local = plane_to_proj.rotation.transpose() * (hit - origin_plane);
            (Point2::new(local.x, local.y) - s.scanner_point).norm()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RobustOptions {
    /// Cap on excluded sets as a fraction of all sets (0..=0.2).
    pub max_exclusion_fraction: f64,
    /// Scanner pixel size; scanner-plane errors are reported in scan px.
    pub scanner_pixel_size: f64,
    /// Cost added to `e_k` per excluded set, as a fraction of `e_0`. Once
    /// only sound sets remain, dropping one moves the mean error by a few
    /// hundredths of a percent either way; the cost makes that plateau rise
    /// so the loop stops where the outliers run out.
    pub exclusion_cost: f64,
    /// Each round refits without each of this many worst sets and drops
    /// the one whose exclusion gives the lowest `e_{k+1}`; 1 drops the
    /// worst set outright.
    pub lookahead: usize,
}

impl Default for RobustOptions {
    fn default() -> Self {
        Self {
            max_exclusion_fraction: 0.10,
            scanner_pixel_size: 25.4 / 300.0,
            exclusion_cost: 0.0025,
            lookahead: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewPose {
    pub plane: String,
    #[serde(flatten)]
    pub pose: RigidPose,
}

/// Final calibration with its exclusion ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub mrpe_projector_px: f64,
    pub mrpe_scanner_px: f64,
    pub views: Vec<ViewPose>,
    /// Pinhole ids in exclusion order.
    pub excluded: Vec<usize>,
    /// `e_k` for every evaluated exclusion count.
    pub error_curve: Vec<f64>,
}

impl CalibrationResult {
    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
        }
    }
}

/// Closed form followed by LM on the active sets.
pub fn calibrate_sets(
    sets: &[CorrespondenceSet],
    active: &[bool],
    masks: u32,
) -> Result<(Vec<PlanarView>, Refined)> {
    let views = build_views(sets, active, masks)?;
    let (k, poses) = zhang_closed_form(&views)?;
    let refined = refine_lm(k, poses, &views, &LmSettings::default())?;
    Ok((views, refined))
}

/// Iteratively drops the set with the largest scanner-plane error (see
/// [`RobustOptions::lookahead`]). `e_k` is the mean scanner-plane error of
/// every set (excluded ones included) under the k-th estimate plus the
/// exclusion cost; the loop stops at the first k where excluding one more set
/// does not lower it, or at the cap, and returns the estimate at the minimum.
pub fn robust_calibrate(
    sets: &[CorrespondenceSet],
    masks: u32,
    opts: &RobustOptions,
) -> Result<CalibrationResult> {
    if !(0.0..=0.2).contains(&opts.max_exclusion_fraction) {
        return Err(Error::config(
            "max_exclusion_fraction",
            "must lie in [0, 0.2]",
        ));
    }
    let cap = (opts.max_exclusion_fraction * sets.len() as f64).floor() as usize;
    let fit = |active: &[bool]| -> Result<(Vec<PlanarView>, Refined, Vec<f64>, f64)> {
        let (views, refined) = calibrate_sets(sets, active, masks)?;
        let errs: Vec<f64> = scanner_errors(&refined.k, &refined.poses[0], sets)
            .into_iter()
            .map(|e| e / opts.scanner_pixel_size)
            .collect();
        let e = mean(&errs);
        Ok((views, refined, errs, e))
    };
    let mut active = vec![true; sets.len()];
    let mut excluded: Vec<usize> = Vec::new();
    let (views, refined, errs, e0) = fit(&active)?;
    let mut curve = vec![e0];
    let mut current = (views, refined, errs);
    while excluded.len() < cap {
        let errs = &current.2;
        let mut order: Vec<usize> = (0..sets.len()).filter(|&i| active[i]).collect();
        order.sort_by(|&a, &b| errs[b].total_cmp(&errs[a]).then(a.cmp(&b)));
        order.truncate(opts.lookahead.max(1));
        type Candidate = (usize, (Vec<PlanarView>, Refined, Vec<f64>), f64);
        let mut next: Option<Candidate> = None;
        for &c in &order {
            active[c] = false;
            let r = fit(&active);
            active[c] = true;
            match r {
                Ok((v, rf, er, e)) => {
                    if next.as_ref().is_none_or(|n| e < n.2) {
                        next = Some((c, (v, rf, er), e));
                    }
                }
                Err(e @ Error::InsufficientView { .. }) => {
                    log::debug!("skipping candidate {c}: {e}")
                }
                Err(e) => return Err(e),
            }
        }
        let Some((c, state, e)) = next else {
            log::warn!("stopping exclusion early: no candidate leaves every view usable");
            break;
        };
        let e = e + opts.exclusion_cost * e0 * (excluded.len() + 1) as f64;
        curve.push(e);
        if !(e < curve[curve.len() - 2]) {
            break;
        }
        active[c] = false;
        excluded.push(c);
        current = state;
    }
    let n = excluded.len();
    let (views, refined, errs) = current;
    let remaining: Vec<f64> = views[0].sets.iter().map(|&i| errs[i]).collect();
    Ok(CalibrationResult {
        fx: refined.k.fx,
        fy: refined.k.fy,
        cx: refined.k.cx,
        cy: refined.k.cy,
        mrpe_projector_px: refined.mrpe,
        mrpe_scanner_px: mean(&remaining),
        views: views
            .iter()
            .zip(&refined.poses)
            .map(|(v, p)| ViewPose {
                plane: v.plane.to_string(),
                pose: *p,
            })
            .collect(),
        excluded: excluded[..n].iter().map(|&i| sets[i].pinhole_id).collect(),
        error_curve: curve,
    })
}

/// Pose of the projector relative to a target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseEstimate {
    pub pose: RigidPose,
    pub rms_px: f64,
}

/// Pose from at least four coplanar target points: homography decomposition
/// on a fitted plane frame, polished by LM.
pub fn solve_pnp(
    object: &[WorldPoint],
    image: &[PixelPoint],
    k: &Intrinsics,
) -> Result<PoseEstimate> {
    if object.len() < 4 || object.len() != image.len() {
        return Err(Error::PnpDegenerate(format!(
            "need at least 4 matched points, got {} object / {} image",
            object.len(),
            image.len()
        )));
    }
    k.validate()?;
    // Plane frame of the target points.
    let n = object.len() as f64;
    let c = object.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / n;
    let mut cov = Matrix3::zeros();
    for p in object {
        let d = p.coords - c;
        cov += d * d.transpose();
    }
    let eig = cov.symmetric_eigen();
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let (l0, l1, l2) = (
        eig.eigenvalues[idx[0]],
        eig.eigenvalues[idx[1]],
        eig.eigenvalues[idx[2]],
    );
    if !(l1 > 1e-12 * l0) {
        return Err(Error::PnpDegenerate("target points are collinear".into()));
    }
    if l2 > 1e-9 * l0 {
        return Err(Error::PnpDegenerate(
            "target points are not coplanar".into(),
        ));
    }
    let e0 = eig.eigenvectors.column(idx[0]).into_owned();
    let e1 = eig.eigenvectors.column(idx[1]).into_owned();
    let plane_rot = Matrix3::from_columns(&[e0, e1, e0.cross(&e1)]);
    let plane = RigidPose {
        rotation: plane_rot,
        translation: c,
    };
    let to_local = plane.inverse();
    let local: Vec<PlanePoint> = object
        .iter()
        .map(|p| {
            let l = to_local.transform_point(p);
            Point2::new(l.x, l.y)
        })
        .collect();
    let pairs: Vec<(PlanePoint, PixelPoint)> =
        local.iter().copied().zip(image.iter().copied()).collect();
    let (h, _) = estimate_homography(&pairs).map_err(|e| Error::PnpDegenerate(e.to_string()))?;
    let init = pose_from_homography(k, &h.0)?;
    let view = PlanarView {
        plane: PlaneId::Scanner,
        pairs,
        sets: Vec::new(),
    };
    let eval = |p: &RigidPose, want_j: bool| {
        let m = view.pairs.len();
        let mut r = DVector::zeros(2 * m);
        let mut j = want_j.then(|| DMatrix::zeros(2 * m, 6));
        for (i, (obj, img)) in view.pairs.iter().enumerate() {
            let (res, jac) = point_residual(k, p, obj, img);
            r[2 * i] = res[0];
            r[2 * i + 1] = res[1];
            if let Some(j) = j.as_mut() {
                for d in 0..2 {
                    for c in 0..6 {
                        j[(2 * i + d, c)] = jac[d][4 + c];
                    }
                }
            }
        }
        (r, j)
    };
    let retract = |p: &RigidPose, d: &DVector<f64>| {
        p.perturbed(
            &Vector3::new(d[0], d[1], d[2]),
            &Vector3::new(d[3], d[4], d[5]),
        )
    };
    let lm = levenberg_marquardt(init, eval, retract, &LmSettings::default())?;
    let pose = lm.state.compose(&to_local);
    Ok(PoseEstimate {
        pose,
        rms_px: (lm.cost / object.len() as f64).sqrt(),
    })
}

/// Least-squares plane through `points`: centroid and unit normal. `None`
/// for fewer than three points or a collinear set.
pub fn fit_plane(points: &[WorldPoint]) -> Option<(WorldPoint, Vector3<f64>)> {
    if points.len() < 3 {
        return None;
    }
    let c = points.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / points.len() as f64;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p.coords - c;
        cov += d * d.transpose();
    }
    let eig = cov.symmetric_eigen();
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    if !(eig.eigenvalues[idx[1]] > 1e-12 * eig.eigenvalues[idx[0]]) {
        return None;
    }
    Some((
        Point3::from(c),
        eig.eigenvectors.column(idx[2]).into_owned(),
    ))
}

/// Physical dot error: each target corner is projected with the estimated
/// model, the resulting pixel is emitted by the real projector, and the
/// distance between where that ray meets the target plane and the corner is
/// returned (mm).
pub fn evaluate_projection(
    k: &Intrinsics,
    pose: &PoseEstimate,
    corners: &[WorldPoint],
    true_k: &Intrinsics,
    true_pose: &RigidPose,
) -> Result<Vec<f64>> {
    let (origin, n) = fit_plane(corners)
        .ok_or_else(|| Error::PnpDegenerate("target corners do not span a plane".into()))?;
    corners
        .iter()
        .map(|c| {
            let px = project(k, &pose.pose, c)?;
            let (o, dir) = unproject_ray(true_k, true_pose, px)?;
            let denom = n.dot(&dir);
            let t = n.dot(&(origin - o)) / denom;
            Ok((o + dir.into_inner() * t - c).norm())
        })
        .collect()
}

/// A flat checkerboard target: `rows x cols` inner corners with `spacing`
/// mm, placed by `pose` (board frame to projector frame).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Board {
    pub rows: u32,
    pub cols: u32,
    pub spacing: f64,
    pub pose: RigidPose,
}

impl Board {
    /// The evaluation board: 7 x 10 corners, 21 mm squares, about 1 m away.
    pub fn at_one_meter() -> Self {
        Board {
            rows: 7,
            cols: 10,
            spacing: 21.0,
            pose: RigidPose::from_euler_deg(10.0, -5.0, 2.0, Vector3::new(-95.0, -120.0, 1000.0)),
        }
    }

    /// Corner positions in the projector frame, row-major.
    pub fn corners(&self) -> Vec<WorldPoint> {
        let mut out = Vec::new();
        for r in 0..self.rows {
            for c in 0..self.cols {
                let p = Point3::new(c as f64 * self.spacing, r as f64 * self.spacing, 0.0);
                out.push(Point3::from(self.pose.transform_point(&p)));
            }
        }
        out
    }

    /// The four outer corners used for PnP.
    pub fn outer_corners(&self) -> Vec<WorldPoint> {
        let all = self.corners();
        let (r, c) = (self.rows as usize, self.cols as usize);
        vec![all[0], all[c - 1], all[(r - 1) * c], all[r * c - 1]]
    }
}

/// Per-corner dot errors for a calibrated model: PnP on the four outer
/// corners (their true pixels), then [`evaluate_projection`] on every corner.
pub fn board_errors(k: &Intrinsics, board: &Board, true_k: &Intrinsics) -> Result<Vec<f64>> {
    let outer = board.outer_corners();
    let image = outer
        .iter()
        .map(|c| project(true_k, &RigidPose::identity(), c))
        .collect::<Result<Vec<_>>>()?;
    let est = solve_pnp(&outer, &image, k)?;
    evaluate_projection(k, &est, &board.corners(), true_k, &RigidPose::identity())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic_views(k: &Intrinsics, poses: &[RigidPose]) -> Vec<PlanarView> {
        poses
            .iter()
            .enumerate()
            .map(|(i, pose)| {
                let mut pairs = Vec::new();
                for r in 0..8 {
                    for c in 0..10 {
                        let obj = Point2::new(c as f64 * 10.0, r as f64 * 10.0);
                        let img = project(k, pose, &Point3::new(obj.x, obj.y, 0.0)).unwrap();
                        pairs.push((obj, img));
                    }
                }
                PlanarView {
                    plane: if i == 0 {
                        PlaneId::Scanner
                    } else {
                        PlaneId::Mask(i as u32 - 1)
                    },
                    pairs,
                    sets: Vec::new(),
                }
            })
            .collect()
    }

    fn three_poses() -> Vec<RigidPose> {
        vec![
            RigidPose::from_euler_deg(0.0, 40.0, 0.0, Vector3::new(-40.0, -30.0, 450.0)),
            RigidPose::from_euler_deg(-20.0, 0.0, 0.0, Vector3::new(-100.0, -40.0, 230.0)),
            RigidPose::from_euler_deg(20.0, 0.0, 5.0, Vector3::new(10.0, -40.0, 260.0)),
        ]
    }

    #[test]
    fn closed_form_exact_on_synthetic_views() {
        let k = Intrinsics::new(1800.0, 1810.0, 410.0, 420.0).unwrap();
        let poses = three_poses();
        let (est, est_poses) = zhang_closed_form(&synthetic_views(&k, &poses)).unwrap();
        assert!((est.fx / k.fx - 1.0).abs() < 1e-6, "{est:?}");
        assert!((est.fy / k.fy - 1.0).abs() < 1e-6);
        assert!((est.cx - k.cx).abs() < 1e-3 && (est.cy - k.cy).abs() < 1e-3);
        for (a, b) in est_poses.iter().zip(&poses) {
            assert!(a.rotation_angle_to(b) < 1e-6);
            assert!((a.translation - b.translation).norm() < 1e-3);
        }
    }

    #[test]
    fn parallel_views_fail_closed_form() {
        let k = Intrinsics::new(1800.0, 1800.0, 400.0, 300.0).unwrap();
        let poses = vec![
            RigidPose::from_euler_deg(0.0, 0.0, 0.0, Vector3::new(-40.0, -30.0, 300.0)),
            RigidPose::from_euler_deg(0.0, 0.0, 0.0, Vector3::new(-20.0, -10.0, 500.0)),
        ];
        assert!(matches!(
            zhang_closed_form(&synthetic_views(&k, &poses)),
            Err(Error::ClosedFormFailed(_))
        ));
    }

    #[test]
    fn lm_at_ground_truth_is_stationary() {
        let k = Intrinsics::new(1800.0, 1810.0, 410.0, 420.0).unwrap();
        let poses = three_poses();
        let views = synthetic_views(&k, &poses);
        let r = refine_lm(k, poses.clone(), &views, &LmSettings::default()).unwrap();
        assert!(r.mrpe < 1e-9);
        assert!((r.k.fx - k.fx).abs() < 1e-9);
    }

    #[test]
    fn lm_recovers_from_perturbed_focal_length() {
        let k = Intrinsics::new(1800.0, 1810.0, 410.0, 420.0).unwrap();
        let poses = three_poses();
        let views = synthetic_views(&k, &poses);
        let start = Intrinsics {
            fx: k.fx * 1.05,
            ..k
        };
        let r = refine_lm(start, poses, &views, &LmSettings::default()).unwrap();
        assert!((r.k.fx / k.fx - 1.0).abs() < 1e-6, "{:?}", r.k);
        assert!((r.k.fy / k.fy - 1.0).abs() < 1e-6);
        assert!(r.lm.cost_history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn pnp_needs_four_points() {
        let k = Intrinsics::new(1000.0, 1000.0, 400.0, 300.0).unwrap();
        let obj: Vec<WorldPoint> = (0..3)
            .map(|i| Point3::new(i as f64, (i * i) as f64, 500.0))
            .collect();
        let img: Vec<PixelPoint> = obj
            .iter()
            .map(|p| project(&k, &RigidPose::identity(), p).unwrap())
            .collect();
        assert!(matches!(
            solve_pnp(&obj, &img, &k),
            Err(Error::PnpDegenerate(_))
        ));
    }
}
