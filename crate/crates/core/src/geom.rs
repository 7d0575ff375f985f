//! Pinhole camera geometry and the pointmap representation.
//!
//! Pixel `(u, v)` has its center at `(u + 0.5, v + 0.5)`. A pointmap stores,
//! for every pixel, the 3D point it observes expressed in the first view's
//! camera frame.

use nalgebra::{Matrix3, Vector3};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    /// Intrinsics with the principal point at the image center and equal focal lengths.
    pub fn centered(focal: f64, width: usize, height: usize) -> Result<Self> {
        Self::new(focal, focal, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid intrinsics {self:?}")))
        }
    }

    /// Ray direction (z = 1) through continuous pixel coordinates.
    pub fn ray(&self, x: f64, y: f64) -> Vector3<f64> {
        Vector3::new((x - self.cx) / self.fx, (y - self.cy) / self.fy, 1.0)
    }

    /// Continuous pixel coordinates of a camera-frame point.
    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }
}

/// Rigid transform in SE(3), mapping source-frame points to target-frame points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let p = Self { rotation, translation };
        p.validate()?;
        Ok(p)
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self { rotation: Matrix3::identity(), translation: t }
    }

    /// Orthonormality and orientation check at 1e-6.
    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        let det = r.determinant();
        if ortho <= 1e-6 && (det - 1.0).abs() <= 1e-6 && self.translation.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "rotation is not in SO(3): |RᵀR − I| = {ortho:e}, det = {det}"
            )))
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation) }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn rotation_row_major(&self) -> [f64; 9] {
        let r = &self.rotation;
        [r[(0, 0)], r[(0, 1)], r[(0, 2)], r[(1, 0)], r[(1, 1)], r[(1, 2)], r[(2, 0)], r[(2, 1)], r[(2, 2)]]
    }

    /// Angle of the relative rotation `selfᵀ·other`, in radians.
    pub fn rotation_angle_to(&self, other: &Pose) -> f64 {
        let rel = self.rotation.transpose() * other.rotation;
        ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    rotation: [f64; 9],
    translation: [f64; 3],
}

impl Serialize for Pose {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        PoseRepr {
            rotation: self.rotation_row_major(),
            translation: [self.translation.x, self.translation.y, self.translation.z],
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = PoseRepr::deserialize(d)?;
        Ok(Pose {
            rotation: Matrix3::from_row_slice(&r.rotation),
            translation: Vector3::from_column_slice(&r.translation),
        })
    }
}

/// Per-pixel 3D points with an optional confidence and a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Pointmap {
    /// `H × W × 3`.
    pub points: Array3<f64>,
    /// `H × W`, every value ≥ 1 when present.
    pub confidence: Option<Array2<f64>>,
    /// `H × W`.
    pub valid: Array2<bool>,
}

impl Pointmap {
    pub fn new(points: Array3<f64>, confidence: Option<Array2<f64>>, valid: Array2<bool>) -> Result<Self> {
        let pm = Self { points, confidence, valid };
        pm.validate()?;
        Ok(pm)
    }

    pub fn height(&self) -> usize {
        self.points.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.points.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        if self.points.shape()[2] != 3 || self.valid.dim() != (h, w) {
            return Err(Error::InvalidInput("pointmap shape mismatch".into()));
        }
        if let Some(c) = &self.confidence {
            if c.dim() != (h, w) {
                return Err(Error::InvalidInput("confidence shape mismatch".into()));
            }
            if c.iter().any(|&v| !(v >= 1.0)) {
                return Err(Error::InvalidInput("confidence below 1".into()));
            }
        }
        for ((v, u), &ok) in self.valid.indexed_iter() {
            if ok && (0..3).any(|k| !self.points[[v, u, k]].is_finite()) {
                return Err(Error::InvalidInput(format!("non-finite point at ({u}, {v})")));
            }
        }
        Ok(())
    }

    pub fn point(&self, v: usize, u: usize) -> Vector3<f64> {
        Vector3::new(self.points[[v, u, 0]], self.points[[v, u, 1]], self.points[[v, u, 2]])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&b| b).count()
    }

    /// Valid points in row-major order.
    pub fn valid_points(&self) -> Vec<Vector3<f64>> {
        self.valid
            .indexed_iter()
            .filter(|(_, &ok)| ok)
            .map(|((v, u), _)| self.point(v, u))
            .collect()
    }

    /// Confidences of valid pixels in row-major order (1.0 when absent).
    pub fn valid_confidences(&self) -> Vec<f64> {
        self.valid
            .indexed_iter()
            .filter(|(_, &ok)| ok)
            .map(|((v, u), _)| self.confidence.as_ref().map_or(1.0, |c| c[[v, u]]))
            .collect()
    }

    /// Apply a rigid transform to every point.
    pub fn transformed(&self, pose: &Pose) -> Pointmap {
        let mut out = self.clone();
        for v in 0..self.height() {
            for u in 0..self.width() {
                let p = pose.apply(&self.point(v, u));
                for k in 0..3 {
                    out.points[[v, u, k]] = p[k];
                }
            }
        }
        out
    }

    /// Apply `f` to every point.
    pub fn map_points(&self, f: impl Fn(Vector3<f64>) -> Vector3<f64>) -> Pointmap {
        let mut out = self.clone();
        for v in 0..self.height() {
            for u in 0..self.width() {
                let p = f(self.point(v, u));
                for k in 0..3 {
                    out.points[[v, u, k]] = p[k];
                }
            }
        }
        out
    }
}

/// Unproject a depth map into a pointmap in the frame reached by `pose`.
///
/// `points[v,u] = R·(depth[v,u]·K⁻¹·(u+0.5, v+0.5, 1)ᵀ) + t` for every valid pixel; invalid
/// pixels are set to zero.
pub fn pointmap_from_depth(
    depth: &Array2<f64>,
    valid: &Array2<bool>,
    intr: &Intrinsics,
    pose: &Pose,
) -> Result<Pointmap> {
    let (h, w) = depth.dim();
    if valid.dim() != (h, w) {
        return Err(Error::InvalidInput("depth and mask shapes differ".into()));
    }
    let mut points = Array3::zeros((h, w, 3));
    for ((v, u), &d) in depth.indexed_iter() {
        if !valid[[v, u]] {
            continue;
        }
        if !(d.is_finite() && d > 0.0) {
            return Err(Error::InvalidInput(format!("depth {d} at ({u}, {v}) is not positive and finite")));
        }
        let p = pose.apply(&(intr.ray(u as f64 + 0.5, v as f64 + 0.5) * d));
        for k in 0..3 {
            points[[v, u, k]] = p[k];
        }
    }
    Ok(Pointmap { points, confidence: None, valid: valid.clone() })
}

/// Project a pointmap back through `pose⁻¹` and the intrinsics; returns the continuous
/// pixel coordinates of every pixel (`None` where invalid).
pub fn project_pointmap(pm: &Pointmap, intr: &Intrinsics, pose: &Pose) -> Array2<Option<(f64, f64)>> {
    let inv = pose.inverse();
    Array2::from_shape_fn(pm.valid.dim(), |(v, u)| {
        pm.valid[[v, u]].then(|| intr.project(&inv.apply(&pm.point(v, u))))
    })
}

/// Rotation of `angle` radians about a unit axis.
pub fn axis_angle(axis: Vector3<f64>, angle: f64) -> Matrix3<f64> {
    *nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle).matrix()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_intr(w: usize, h: usize) -> Intrinsics {
        Intrinsics { fx: 1.0, fy: 1.0, cx: 0.0, cy: 0.0, width: w, height: h }
    }

    #[test]
    fn unit_depth_identity_pose() {
        let depth = Array2::from_elem((2, 2), 1.0);
        let valid = Array2::from_elem((2, 2), true);
        let pm = pointmap_from_depth(&depth, &valid, &unit_intr(2, 2), &Pose::identity()).unwrap();
        assert_eq!(pm.point(0, 0), Vector3::new(0.5, 0.5, 1.0));
    }

    #[test]
    fn pure_translation_adds_to_z() {
        let depth = Array2::from_elem((2, 2), 1.0);
        let valid = Array2::from_elem((2, 2), true);
        let pose = Pose::from_translation(Vector3::new(0.0, 0.0, 2.0));
        let pm = pointmap_from_depth(&depth, &valid, &unit_intr(2, 2), &pose).unwrap();
        assert_eq!(pm.point(0, 0), Vector3::new(0.5, 0.5, 3.0));
    }

    #[test]
    fn rejects_bad_depth_on_valid_pixel() {
        let mut depth = Array2::from_elem((2, 2), 1.0);
        depth[[1, 0]] = 0.0;
        let mut valid = Array2::from_elem((2, 2), true);
        assert!(pointmap_from_depth(&depth, &valid, &unit_intr(2, 2), &Pose::identity()).is_err());
        valid[[1, 0]] = false;
        let pm = pointmap_from_depth(&depth, &valid, &unit_intr(2, 2), &Pose::identity()).unwrap();
        assert!(!pm.valid[[1, 0]]);
        depth[[0, 1]] = f64::NAN;
        assert!(pointmap_from_depth(&depth, &valid, &unit_intr(2, 2), &Pose::identity()).is_err());
    }

    #[test]
    fn unprojection_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let depth = Array2::from_shape_fn((4, 4), |_| rng.random_range(0.5..10.0));
            let valid = Array2::from_elem((4, 4), true);
            let intr = Intrinsics::new(3.0, 3.5, 2.0, 1.5, 4, 4).unwrap();
            let axis = Vector3::new(rng.random(), rng.random(), rng.random::<f64>() + 0.1);
            let pose = Pose::new(
                axis_angle(axis, rng.random_range(-1.0..1.0)),
                Vector3::new(rng.random(), rng.random(), rng.random()),
            )
            .unwrap();
            let pm = pointmap_from_depth(&depth, &valid, &intr, &pose).unwrap();
            let px = project_pointmap(&pm, &intr, &pose);
            for ((v, u), p) in px.indexed_iter() {
                let (x, y) = p.unwrap();
                assert!((x - (u as f64 + 0.5)).abs() < 1e-6);
                assert!((y - (v as f64 + 0.5)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn pose_validation_and_inverse() {
        let r = axis_angle(Vector3::new(0.0, 0.0, 1.0), 0.3);
        let p = Pose::new(r, Vector3::new(1.0, 2.0, 3.0)).unwrap();
        let q = p.compose(&p.inverse());
        assert!((q.rotation - Matrix3::identity()).abs().max() < 1e-12);
        assert!(q.translation.norm() < 1e-12);
        assert!(Pose::new(Matrix3::identity() * 2.0, Vector3::zeros()).is_err());
        let reflect = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(Pose::new(reflect, Vector3::zeros()).is_err());
    }

    #[test]
    fn intrinsics_invariants() {
        assert!(Intrinsics::new(0.0, 1.0, 0.0, 0.0, 4, 4).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 4.0, 0.0, 4, 4).is_err());
        assert!(Intrinsics::centered(32.0, 64, 64).is_ok());
    }

    #[test]
    fn pose_json_is_row_major() {
        let r = axis_angle(Vector3::new(0.0, 0.0, 1.0), std::f64::consts::FRAC_PI_2);
        let p = Pose::new(r, Vector3::new(1.0, 2.0, 3.0)).unwrap();
        let json = serde_json::to_value(p).unwrap();
        let rot = json["rotation"].as_array().unwrap();
        assert!((rot[1].as_f64().unwrap() + 1.0).abs() < 1e-12);
        let back: Pose = serde_json::from_value(json).unwrap();
        assert_eq!(back, p);
    }
}
