//! Pinhole projection, rigid transforms, planes and planar homographies.
//!
//! Conventions used throughout the crate:
//!
//! - The projector frame has its optical center at the origin, `+z` along the
//!   optical axis, `+x` to the right and `+y` down, so that image columns `u`
//!   grow with `x` and rows `v` grow with `y`.
//! - A [`RigidPose`] maps points into the projector frame: `x' = R x + t`.
//! - Pixel centers sit at integer coordinates: pixel `(i, j)` covers
//!   `[i - 0.5, i + 0.5) x [j - 0.5, j + 0.5)`.
//! - No lens distortion terms are modeled anywhere.

use nalgebra::{DMatrix, Matrix3, Point2, Point3, Rotation3, Unit, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A 3D point in world coordinates (mm).
pub type WorldPoint = Point3<f64>;

/// A 2D metric point in the local frame of a plane (mm, local z = 0).
pub type PlanePoint = Point2<f64>;

/// Sub-pixel position on the projector image plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelPoint {
    pub u: f64,
    pub v: f64,
}

impl PixelPoint {
    pub const fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn is_finite(&self) -> bool {
        self.u.is_finite() && self.v.is_finite()
    }

    /// True when the point lies on a `width x height` panel.
    pub fn on_device(&self, width: u32, height: u32) -> bool {
        self.is_finite()
            && self.u >= 0.0
            && self.v >= 0.0
            && self.u < width as f64
            && self.v < height as f64
    }

    pub fn distance(&self, other: &PixelPoint) -> f64 {
        (self.u - other.u).hypot(self.v - other.v)
    }

    pub fn to_vector(self) -> Vector2<f64> {
        Vector2::new(self.u, self.v)
    }
}

/// Pinhole intrinsics: focal lengths and principal point, zero skew.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = Self { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx.is_finite() && self.fx > 0.0 && self.fy.is_finite() && self.fy > 0.0) {
            return Err(Error::InvalidIntrinsics(format!(
                "focal lengths must be positive and finite (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(Error::InvalidIntrinsics(
                "principal point must be finite".into(),
            ));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Normalized ray direction (z = 1) through a pixel.
    pub fn normalized(&self, px: PixelPoint) -> Vector3<f64> {
        Vector3::new((px.u - self.cx) / self.fx, (px.v - self.cy) / self.fy, 1.0)
    }

    /// Pixel of a point already expressed in the projector frame.
    pub fn project_camera(&self, p: &Vector3<f64>) -> Result<PixelPoint> {
        if !(p.z > 0.0) {
            return Err(Error::BehindProjector { depth: p.z });
        }
        Ok(PixelPoint::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }
}

/// Proper rigid motion `x' = R x + t` (translation in mm).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidPose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose, rejecting rotations that are not orthonormal with
    /// determinant +1 within `1e-9`.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let pose = Self {
            rotation,
            translation,
        };
        if pose.orthonormality_error() > 1e-9 || !translation.iter().all(|x| x.is_finite()) {
            return Err(Error::Format(
                "rotation must be orthonormal with determinant +1".into(),
            ));
        }
        Ok(pose)
    }

    pub fn from_axis_angle(axis_angle: &Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: Rotation3::new(*axis_angle).into_inner(),
            translation,
        }
    }

    /// Rotation `Ry(yaw) * Rx(pitch) * Rz(roll)`, angles in degrees.
    pub fn from_euler_deg(yaw: f64, pitch: f64, roll: f64, translation: Vector3<f64>) -> Self {
        let ry = Rotation3::from_axis_angle(&Vector3::y_axis(), yaw.to_radians());
        let rx = Rotation3::from_axis_angle(&Vector3::x_axis(), pitch.to_radians());
        let rz = Rotation3::from_axis_angle(&Vector3::z_axis(), roll.to_radians());
        Self {
            rotation: (ry * rx * rz).into_inner(),
            translation,
        }
    }

    pub fn axis_angle(&self) -> Vector3<f64> {
        Rotation3::from_matrix_unchecked(self.rotation).scaled_axis()
    }

    pub fn transform_point(&self, p: &WorldPoint) -> Vector3<f64> {
        self.rotation * p.coords + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidPose) -> RigidPose {
        RigidPose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidPose {
        let rt = self.rotation.transpose();
        RigidPose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Nearest rotation in the Frobenius sense (polar decomposition).
    pub fn orthonormalized(&self) -> RigidPose {
        RigidPose {
            rotation: nearest_rotation(&self.rotation),
            translation: self.translation,
        }
    }

    /// Left-multiplies the rotation by `exp([delta]x)`; the local chart used
    /// by the optimizers.
    pub fn perturbed(&self, delta_rot: &Vector3<f64>, delta_t: &Vector3<f64>) -> RigidPose {
        RigidPose {
            rotation: Rotation3::new(*delta_rot).into_inner() * self.rotation,
            translation: self.translation + delta_t,
        }
    }

    pub fn orthonormality_error(&self) -> f64 {
        let r = &self.rotation;
        let e = (r.transpose() * r - Matrix3::identity()).abs().max();
        e.max((r.determinant() - 1.0).abs())
    }

    /// Geodesic angle between two rotations (rad).
    pub fn rotation_angle_to(&self, other: &RigidPose) -> f64 {
        let rel = self.rotation.transpose() * other.rotation;
        let c = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos()
    }
}

/// Projects a 3x3 matrix onto SO(3).
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u2 = u;
        u2.column_mut(2).neg_mut();
        r = u2 * v_t;
    }
    r
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    #[serde(rename = "R")]
    rotation: [f64; 9],
    t: [f64; 3],
}

impl Serialize for RigidPose {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let r = &self.rotation;
        PoseRepr {
            rotation: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            t: [self.translation.x, self.translation.y, self.translation.z],
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for RigidPose {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = PoseRepr::deserialize(d)?;
        let rotation = Matrix3::from_row_slice(&repr.rotation);
        RigidPose::new(rotation, Vector3::from(repr.t)).map_err(serde::de::Error::custom)
    }
}

/// A bounded plane: `pose` maps local `(x, y, 0)` into the world frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneFrame {
    pub pose: RigidPose,
    /// Width and height of the plane region (mm), starting at local (0, 0).
    pub extent: [f64; 2],
}

impl PlaneFrame {
    pub fn to_world(&self, p: &PlanePoint) -> WorldPoint {
        Point3::from(self.pose.transform_point(&Point3::new(p.x, p.y, 0.0)))
    }

    /// World point expressed in plane-local coordinates (z is the signed
    /// distance along the plane normal).
    pub fn to_local(&self, p: &WorldPoint) -> Vector3<f64> {
        self.pose.rotation.transpose() * (p.coords - self.pose.translation)
    }

    pub fn normal(&self) -> Vector3<f64> {
        self.pose.rotation.column(2).into_owned()
    }

    pub fn contains_local(&self, p: &PlanePoint) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x <= self.extent[0] && p.y <= self.extent[1]
    }

    /// Intersection of the ray `origin + s * dir` (s > 0) with the infinite
    /// plane; returns `(s, local point)`.
    pub fn intersect_ray(
        &self,
        origin: &WorldPoint,
        dir: &Vector3<f64>,
    ) -> Option<(f64, PlanePoint)> {
        let n = self.normal();
        let denom = n.dot(dir);
        if denom.abs() < 1e-15 {
            return None;
        }
        let s = n.dot(&(self.pose.translation - origin.coords)) / denom;
        if !(s > 0.0) {
            return None;
        }
        let hit = origin + dir * s;
        let local = self.to_local(&hit);
        Some((s, Point2::new(local.x, local.y)))
    }
}

/// Planar homography, defined up to scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography(pub Matrix3<f64>);

impl Homography {
    /// Scales so the bottom-right entry is 1, or to unit Frobenius norm when
    /// that entry is (numerically) zero.
    pub fn normalized(m: Matrix3<f64>) -> Self {
        let h22 = m[(2, 2)];
        if h22.abs() > 1e-12 {
            Homography(m / h22)
        } else {
            Homography(m / m.norm())
        }
    }

    pub fn apply(&self, p: &Vector2<f64>) -> Vector2<f64> {
        let q = self.0 * Vector3::new(p.x, p.y, 1.0);
        Vector2::new(q.x / q.z, q.y / q.z)
    }

    pub fn inverse(&self) -> Option<Homography> {
        self.0.try_inverse().map(Homography::normalized)
    }
}

/// `[u v 1]^T ∝ K [R|t] [X 1]^T`. Fails for points at or behind the
/// projector's optical center plane.
pub fn project(k: &Intrinsics, pose: &RigidPose, p: &WorldPoint) -> Result<PixelPoint> {
    k.project_camera(&pose.transform_point(p))
}

/// Ray through a pixel in world coordinates: origin at the optical center,
/// unit direction.
pub fn unproject_ray(
    k: &Intrinsics,
    pose: &RigidPose,
    px: PixelPoint,
) -> Result<(WorldPoint, Unit<Vector3<f64>>)> {
    k.validate()?;
    let inv = pose.inverse();
    let origin = Point3::from(inv.translation);
    let dir = inv.rotation * k.normalized(px);
    Ok((origin, Unit::new_normalize(dir)))
}

/// Similarity that moves the centroid to the origin and scales the mean
/// distance to `sqrt(2)`.
fn hartley_normalizer(points: &[Vector2<f64>]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let c = points.iter().fold(Vector2::zeros(), |a, p| a + p) / n;
    let mean_dist = points.iter().map(|p| (p - c).norm()).sum::<f64>() / n;
    let s = if mean_dist > 0.0 {
        std::f64::consts::SQRT_2 / mean_dist
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * c.x, 0.0, s, -s * c.y, 0.0, 0.0, 1.0)
}

/// DLT homography from plane-local points to projector pixels, with Hartley
/// normalization. Returns the homography and the mean symmetric transfer
/// error (average of forward error in px and backward error in plane units).
pub fn estimate_homography(pairs: &[(PlanePoint, PixelPoint)]) -> Result<(Homography, f64)> {
    if pairs.len() < 4 {
        return Err(Error::DegenerateHomography(format!(
            "need at least 4 pairs, got {}",
            pairs.len()
        )));
    }
    let src: Vec<Vector2<f64>> = pairs.iter().map(|(p, _)| p.coords).collect();
    let dst: Vec<Vector2<f64>> = pairs.iter().map(|(_, q)| q.to_vector()).collect();
    if !src
        .iter()
        .chain(&dst)
        .all(|v| v.x.is_finite() && v.y.is_finite())
    {
        return Err(Error::DegenerateHomography("non-finite input".into()));
    }
    let ts = hartley_normalizer(&src);
    let td = hartley_normalizer(&dst);

    let n = pairs.len();
    let mut a = DMatrix::<f64>::zeros(2 * n.max(5), 9);
    for (i, (s, d)) in src.iter().zip(&dst).enumerate() {
        let s = ts * Vector3::new(s.x, s.y, 1.0);
        let d = td * Vector3::new(d.x, d.y, 1.0);
        let (x, y) = (s.x, s.y);
        let (u, v) = (d.x, d.y);
        let r0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for j in 0..9 {
            a[(2 * i, j)] = r0[j];
            a[(2 * i + 1, j)] = r1[j];
        }
    }
    // Zero rows padded for the minimal case keep the SVD square enough to
    // expose the full right singular basis.
    let svd = a.svd(false, true);
    let v_t = svd.v_t.expect("svd v_t");
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&i, &j| sv[j].partial_cmp(&sv[i]).unwrap());
    let largest = sv[order[0]];
    let second_smallest = sv[order[order.len() - 2]];
    if !(largest > 0.0) || second_smallest / largest < 1e-10 {
        return Err(Error::DegenerateHomography(
            "design matrix is rank deficient (collinear or repeated points)".into(),
        ));
    }
    let h = v_t.row(order[order.len() - 1]);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let td_inv = td
        .try_inverse()
        .ok_or_else(|| Error::DegenerateHomography("normalizer not invertible".into()))?;
    let m = td_inv * hn * ts;
    if m.determinant().abs() < 1e-300 {
        return Err(Error::DegenerateHomography("homography is singular".into()));
    }
    let hom = Homography::normalized(m);
    let inv = hom
        .inverse()
        .ok_or_else(|| Error::DegenerateHomography("homography is singular".into()))?;
    let err = src
        .iter()
        .zip(&dst)
        .map(|(s, d)| 0.5 * ((hom.apply(s) - d).norm() + (inv.apply(d) - s).norm()))
        .sum::<f64>()
        / n as f64;
    Ok((hom, err))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn project_principal_ray() {
        let k = Intrinsics::new(1.0, 1.0, 0.0, 0.0).unwrap();
        let p = project(&k, &RigidPose::identity(), &Point3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(p, PixelPoint::new(0.0, 0.0));
    }

    #[test]
    fn project_direct_substitution() {
        let k = Intrinsics::new(2.0, 2.0, 10.0, 20.0).unwrap();
        let p = project(&k, &RigidPose::identity(), &Point3::new(1.0, 1.0, 2.0)).unwrap();
        assert_eq!(p, PixelPoint::new(11.0, 21.0));
    }

    #[test]
    fn project_behind_is_error() {
        let k = Intrinsics::new(2.0, 2.0, 10.0, 20.0).unwrap();
        let e = project(&k, &RigidPose::identity(), &Point3::new(1.0, 1.0, -2.0)).unwrap_err();
        assert_eq!(e.code(), "behind-projector");
        let e = project(&k, &RigidPose::identity(), &Point3::new(1.0, 1.0, 0.0)).unwrap_err();
        assert_eq!(e.code(), "behind-projector");
    }

    #[test]
    fn unproject_principal_axis_and_tangent() {
        let k = Intrinsics::new(1500.0, 1400.0, 400.0, 300.0).unwrap();
        let (o, d) =
            unproject_ray(&k, &RigidPose::identity(), PixelPoint::new(400.0, 300.0)).unwrap();
        assert_eq!(o, Point3::origin());
        assert_relative_eq!(d.into_inner(), Vector3::z(), epsilon = 1e-15);
        let (_, d) =
            unproject_ray(&k, &RigidPose::identity(), PixelPoint::new(1900.0, 300.0)).unwrap();
        let expect = Vector3::new(1.0, 0.0, 1.0).normalize();
        assert_relative_eq!(d.into_inner(), expect, epsilon = 1e-15);
    }

    #[test]
    fn invalid_intrinsics_rejected() {
        assert!(Intrinsics::new(0.0, 1.0, 0.0, 0.0).is_err());
        assert!(Intrinsics::new(1.0, -1.0, 0.0, 0.0).is_err());
        assert!(Intrinsics::new(1.0, 1.0, f64::NAN, 0.0).is_err());
        // Off-axis principal points outside the panel are legitimate.
        assert!(Intrinsics::new(1.0, 1.0, 400.0, 900.0).is_ok());
    }

    #[test]
    fn homography_identity_on_unit_square() {
        let pts = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
        let pairs: Vec<_> = pts
            .iter()
            .map(|&(x, y)| (Point2::new(x, y), PixelPoint::new(x, y)))
            .collect();
        let (h, err) = estimate_homography(&pairs).unwrap();
        assert_relative_eq!(h.0, Matrix3::identity(), epsilon = 1e-12);
        assert!(err < 1e-12);
    }

    #[test]
    fn homography_recovers_similarity() {
        let (s, th, tx, ty) = (3.5_f64, 0.4_f64, 12.0, -7.0);
        let truth = Matrix3::new(
            s * th.cos(),
            -s * th.sin(),
            tx,
            s * th.sin(),
            s * th.cos(),
            ty,
            0.0,
            0.0,
            1.0,
        );
        let pts = [(0.0, 0.0), (10.0, 0.0), (10.0, 10.0), (0.0, 10.0)];
        let pairs: Vec<_> = pts
            .iter()
            .map(|&(x, y)| {
                let q = Homography(truth).apply(&Vector2::new(x, y));
                (Point2::new(x, y), PixelPoint::new(q.x, q.y))
            })
            .collect();
        let (h, _) = estimate_homography(&pairs).unwrap();
        assert_relative_eq!(h.0, truth, epsilon = 1e-9);
    }

    #[test]
    fn homography_rejects_collinear() {
        let pairs: Vec<_> = (0..6)
            .map(|i| {
                let x = i as f64;
                (Point2::new(x, 2.0 * x), PixelPoint::new(3.0 * x, x + 1.0))
            })
            .collect();
        assert_eq!(
            estimate_homography(&pairs).unwrap_err().code(),
            "degenerate-homography"
        );
        assert!(estimate_homography(&pairs[..3]).is_err());
    }

    #[test]
    fn pose_composition_stays_orthonormal() {
        let step = RigidPose::from_axis_angle(
            &Vector3::new(0.013, -0.021, 0.007),
            Vector3::new(0.1, 0.0, -0.2),
        );
        let mut acc = RigidPose::identity();
        for i in 0..10_000 {
            acc = step.compose(&acc);
            if i % 100 == 99 {
                acc = acc.orthonormalized();
            }
        }
        acc = acc.orthonormalized();
        assert!(acc.orthonormality_error() < 1e-9);
    }

    #[test]
    fn pose_json_round_trip() {
        let pose = RigidPose::from_euler_deg(20.0, -45.0, 3.0, Vector3::new(1.0, 2.0, 3.0));
        let s = serde_json::to_string(&pose).unwrap();
        assert!(s.contains("\"R\""));
        let back: RigidPose = serde_json::from_str(&s).unwrap();
        assert_relative_eq!(back.rotation, pose.rotation, epsilon = 1e-15);
        assert!(
            serde_json::from_str::<RigidPose>(r#"{"R":[1,0,0,0,1,0,0,0,2],"t":[0,0,0]}"#).is_err()
        );
    }

    #[test]
    fn plane_ray_intersection() {
        let plane = PlaneFrame {
            pose: RigidPose::from_euler_deg(0.0, 45.0, 0.0, Vector3::new(0.0, 0.0, 100.0)),
            extent: [50.0, 50.0],
        };
        let (s, local) = plane
            .intersect_ray(&Point3::origin(), &Vector3::z())
            .unwrap();
        assert_relative_eq!(s, 100.0, epsilon = 1e-12);
        assert_relative_eq!(local.coords, Vector2::zeros(), epsilon = 1e-12);
        assert!(plane
            .intersect_ray(&Point3::origin(), &-Vector3::z())
            .is_none());
    }
}
