use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Point;

pub const DET_MIN: f64 = 0.5;
pub const DET_MAX: f64 = 2.0;

/// `p -> linear * p + translation`, voxel units. By convention the stored
/// transform maps subject coordinates to atlas coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineTransform {
    linear: Matrix3<f64>,
    translation: Vector3<f64>,
    inverse_linear: Matrix3<f64>,
}

impl AffineTransform {
    pub fn identity() -> Self {
        Self {
            linear: Matrix3::identity(),
            translation: Vector3::zeros(),
            inverse_linear: Matrix3::identity(),
        }
    }

    /// Builds a transform, rejecting determinants outside `[0.5, 2.0]`.
    pub fn new(linear: [[f64; 3]; 3], translation: [f64; 3]) -> Result<Self> {
        let linear = Matrix3::from_fn(|r, c| linear[r][c]);
        let det = linear.determinant();
        if !(DET_MIN..=DET_MAX).contains(&det) {
            return Err(Error::Registration(format!(
                "affine determinant {det:.4} outside [{DET_MIN}, {DET_MAX}]"
            )));
        }
        let inverse_linear = linear
            .try_inverse()
            .ok_or_else(|| Error::Registration("singular affine".into()))?;
        Ok(Self {
            linear,
            translation: Vector3::from(translation),
            inverse_linear,
        })
    }

    pub fn translation_only(t: [f64; 3]) -> Self {
        Self {
            translation: Vector3::from(t),
            ..Self::identity()
        }
    }

    /// Rotation (applied as z, y, x Euler angles in radians), per-axis scale
    /// and translation, all acting about `center`.
    pub fn about_center(center: Point, angles: [f64; 3], scale: [f64; 3], translation: [f64; 3]) -> Result<Self> {
        let rot = nalgebra::Rotation3::from_euler_angles(angles[2], angles[1], angles[0]);
        let lin = rot.matrix() * Matrix3::from_diagonal(&Vector3::from(scale));
        let c = Vector3::from(center);
        let t = c + Vector3::from(translation) - lin * c;
        Self::new(to_rows(&lin), [t.x, t.y, t.z])
    }

    pub fn linear(&self) -> [[f64; 3]; 3] {
        to_rows(&self.linear)
    }

    pub fn translation(&self) -> [f64; 3] {
        [self.translation.x, self.translation.y, self.translation.z]
    }

    pub fn determinant(&self) -> f64 {
        self.linear.determinant()
    }

    pub fn apply(&self, p: Point) -> Point {
        let v = self.linear * Vector3::from(p) + self.translation;
        [v.x, v.y, v.z]
    }

    /// `linear^-1 (p - translation)`.
    pub fn apply_inverse(&self, p: Point) -> Point {
        let v = self.inverse_linear * (Vector3::from(p) - self.translation);
        [v.x, v.y, v.z]
    }

    pub fn inverse(&self) -> Self {
        Self {
            linear: self.inverse_linear,
            translation: -(self.inverse_linear * self.translation),
            inverse_linear: self.linear,
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &AffineTransform) -> Self {
        let linear = self.linear * other.linear;
        Self {
            linear,
            translation: self.linear * other.translation + self.translation,
            inverse_linear: other.inverse_linear * self.inverse_linear,
        }
    }

    /// Largest absolute deviation of the 12 coefficients from the identity.
    pub fn max_abs_deviation_from_identity(&self) -> f64 {
        let dl = (self.linear - Matrix3::identity()).abs().max();
        dl.max(self.translation.abs().max())
    }

    /// Squared Frobenius norm of `linear - I`.
    pub fn linear_deviation_sq(&self) -> f64 {
        (self.linear - Matrix3::identity()).norm_squared()
    }

    /// Nine linear coefficients (row-major) followed by three translation coefficients.
    pub fn coefficients(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 3 + c] = self.linear[(r, c)];
            }
            out[9 + r] = self.translation[r];
        }
        out
    }

    pub fn from_coefficients(c: &[f64]) -> Result<Self> {
        if c.len() != 12 {
            return Err(Error::Registration(format!("expected 12 affine coefficients, got {}", c.len())));
        }
        Self::new(
            [[c[0], c[1], c[2]], [c[3], c[4], c[5]], [c[6], c[7], c[8]]],
            [c[9], c[10], c[11]],
        )
    }
}

fn to_rows(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    [
        [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
        [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
        [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformProvenance {
    Registered,
    GroundTruthBypass,
}

/// On-disk transform: nine linear + three translation coefficients, row-major, voxel units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformFile {
    pub linear: [f64; 9],
    pub translation: [f64; 3],
    pub provenance: TransformProvenance,
    #[serde(default)]
    pub converged: bool,
}

impl TransformFile {
    pub fn new(t: &AffineTransform, provenance: TransformProvenance, converged: bool) -> Self {
        let c = t.coefficients();
        Self {
            linear: c[..9].try_into().expect("nine"),
            translation: [c[9], c[10], c[11]],
            provenance,
            converged,
        }
    }

    pub fn transform(&self) -> Result<AffineTransform> {
        let mut c = self.linear.to_vec();
        c.extend_from_slice(&self.translation);
        AffineTransform::from_coefficients(&c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_affine(rng: &mut ChaCha8Rng) -> AffineTransform {
        let deg = std::f64::consts::PI / 180.0;
        AffineTransform::about_center(
            [23.5; 3],
            [rng.gen_range(-15.0..15.0) * deg, rng.gen_range(-15.0..15.0) * deg, rng.gen_range(-15.0..15.0) * deg],
            [rng.gen_range(0.9..1.1), rng.gen_range(0.9..1.1), rng.gen_range(0.9..1.1)],
            [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)],
        )
        .unwrap()
    }

    #[test]
    fn compose_with_inverse_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let t = random_affine(&mut rng);
            assert!(t.compose(&t.inverse()).max_abs_deviation_from_identity() < 1e-9);
            assert!(t.inverse().compose(&t).max_abs_deviation_from_identity() < 1e-9);
        }
    }

    #[test]
    fn round_trip_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = random_affine(&mut rng);
        for _ in 0..100 {
            let p = [rng.gen_range(0.0..48.0), rng.gen_range(0.0..48.0), rng.gen_range(0.0..48.0)];
            let q = t.apply(t.apply_inverse(p));
            assert!((0..3).all(|a| (q[a] - p[a]).abs() < 1e-9));
        }
    }

    #[test]
    fn identity_and_translation_inverse_mapping() {
        let p = [3.0, 4.5, -2.0];
        assert_eq!(AffineTransform::identity().apply_inverse(p), p);
        let t = AffineTransform::translation_only([1.0, -2.0, 0.5]);
        assert_eq!(t.apply_inverse(p), [2.0, 6.5, -2.5]);
    }

    #[test]
    fn determinant_bounds_are_enforced() {
        assert!(AffineTransform::new([[0.5, 0.0, 0.0], [0.0, 0.5, 0.0], [0.0, 0.0, 0.5]], [0.0; 3]).is_err());
        assert!(AffineTransform::new([[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], [0.0; 3]).is_err());
        assert!(AffineTransform::new([[1.2, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], [0.0; 3]).is_ok());
    }

    #[test]
    fn transform_file_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = random_affine(&mut rng);
        let f = TransformFile::new(&t, TransformProvenance::Registered, true);
        let json = serde_json::to_string(&f).unwrap();
        let back: TransformFile = serde_json::from_str(&json).unwrap();
        assert!(back.transform().unwrap().compose(&t.inverse()).max_abs_deviation_from_identity() < 1e-12);
    }
}
