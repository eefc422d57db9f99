//! Homography algebra, robust estimation, evaluation metrics and the
//! stand-in keypoint detectors.

mod detect;
mod dlt;
mod metrics;
mod ransac;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use detect::{grid_keypoints, harris_keypoints, harris_response, HarrisConfig};
pub use dlt::dlt_homography;
pub use metrics::{corner_error, hom_acc_auc, matching_score, mma, AUC_STEPS_PER_PIXEL};
pub use ransac::{ransac_homography, symmetric_transfer_error, RansacOutcome};

/// Perspective divisions closer to zero than this are treated as points at infinity.
pub const INFINITY_EPS: f64 = 1e-12;
/// Smallest accepted determinant magnitude of a normalised homography.
pub const MIN_DET: f64 = 1e-10;

pub type Point = (f64, f64);

/// Detected location with its detector response.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

impl Keypoint {
    pub fn new(x: f64, y: f64) -> Self {
        Keypoint { x, y, score: 1.0 }
    }

    pub fn point(&self) -> Point {
        (self.x, self.y)
    }
}

/// Putative correspondence between two views.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence {
    pub p1: Point,
    pub p2: Point,
}

/// 3x3 projective map, scaled so that `h[2][2] = 1` (or to unit Frobenius
/// norm when that entry vanishes).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography(Matrix3<f64>);

impl Homography {
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("homography has non-finite entries"));
        }
        let norm = m.norm();
        if norm == 0.0 {
            return Err(Error::Degenerate("zero homography"));
        }
        let m = if m[(2, 2)].abs() > f64::EPSILON * norm {
            m / m[(2, 2)]
        } else {
            m / norm
        };
        if m.determinant().abs() <= MIN_DET {
            return Err(Error::Degenerate("singular homography"));
        }
        Ok(Homography(m))
    }

    pub fn from_rows(rows: [[f64; 3]; 3]) -> Result<Self> {
        Homography::new(Matrix3::from_fn(|r, c| rows[r][c]))
    }

    pub fn identity() -> Self {
        Homography(Matrix3::identity())
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Homography(Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0))
    }

    /// Rotation by `angle` radians and isotropic `scale` about `center`.
    pub fn rotation_about(center: Point, angle: f64, scale: f64) -> Result<Self> {
        let (s, c) = angle.sin_cos();
        let (cx, cy) = center;
        let r = Matrix3::new(scale * c, -scale * s, 0.0, scale * s, scale * c, 0.0, 0.0, 0.0, 1.0);
        let to = Matrix3::new(1.0, 0.0, cx, 0.0, 1.0, cy, 0.0, 0.0, 1.0);
        let from = Matrix3::new(1.0, 0.0, -cx, 0.0, 1.0, -cy, 0.0, 0.0, 1.0);
        Homography::new(to * r * from)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// Row-major entries.
    pub fn to_array(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    pub fn from_array(a: &[f64; 9]) -> Result<Self> {
        Homography::new(Matrix3::from_row_slice(a))
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self.0.try_inverse().ok_or(Error::Degenerate("singular homography"))?;
        Homography::new(inv)
    }

    /// `self` applied after `first`.
    pub fn after(&self, first: &Homography) -> Result<Self> {
        Homography::new(self.0 * first.0)
    }

    pub fn warp_point(&self, p: Point) -> Result<Point> {
        let v = self.0 * Vector3::new(p.0, p.1, 1.0);
        if v.z.abs() <= INFINITY_EPS {
            return Err(Error::PointAtInfinity(v.z));
        }
        Ok((v.x / v.z, v.y / v.z))
    }

    /// Largest absolute entry difference after normalisation.
    pub fn max_abs_diff(&self, other: &Homography) -> f64 {
        (self.0 - other.0).amax()
    }
}

pub fn distance(a: Point, b: Point) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}
