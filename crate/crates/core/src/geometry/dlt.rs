use nalgebra::{DMatrix, Matrix3};

use super::{Homography, Point};
use crate::error::{Error, Result};

/// Relative singular-value gap below which the design matrix is rank deficient.
const RANK_TOL: f64 = 1e-9;
/// Relative triangle area below which three points count as collinear.
const COLLINEAR_TOL: f64 = 1e-9;

/// Similarity moving the centroid to the origin with mean distance sqrt(2).
fn normalizer(pts: &[Point]) -> Result<Matrix3<f64>> {
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let mean = pts.iter().map(|p| (p.0 - cx).hypot(p.1 - cy)).sum::<f64>() / n;
    if !(mean > 0.0 && mean.is_finite()) {
        return Err(Error::Degenerate("coincident points"));
    }
    let s = std::f64::consts::SQRT_2 / mean;
    Ok(Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0))
}

fn apply(t: &Matrix3<f64>, p: Point) -> Point {
    (t[(0, 0)] * p.0 + t[(0, 2)], t[(1, 1)] * p.1 + t[(1, 2)])
}

pub(crate) fn has_collinear_triple(pts: &[Point]) -> bool {
    let scale = pts
        .iter()
        .flat_map(|a| pts.iter().map(move |b| (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)))
        .fold(0.0, f64::max);
    let n = pts.len();
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                let (a, b, c) = (pts[i], pts[j], pts[k]);
                let cross = (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0);
                if cross.abs() <= COLLINEAR_TOL * scale {
                    return true;
                }
            }
        }
    }
    false
}

/// Normalised direct linear transform from `pts1` to `pts2`.
pub fn dlt_homography(pts1: &[Point], pts2: &[Point]) -> Result<Homography> {
    if pts1.len() != pts2.len() {
        return Err(Error::Dimension {
            op: "dlt_homography",
            axis: "point count",
            expected: pts1.len(),
            found: pts2.len(),
        });
    }
    let n = pts1.len();
    if n < 4 {
        return Err(Error::Degenerate("at least four correspondences are required"));
    }
    if n == 4 && (has_collinear_triple(pts1) || has_collinear_triple(pts2)) {
        return Err(Error::Degenerate("three of the four points are collinear"));
    }
    let t1 = normalizer(pts1)?;
    let t2 = normalizer(pts2)?;
    let mut a = DMatrix::<f64>::zeros((2 * n).max(9), 9);
    for (i, (&p, &q)) in pts1.iter().zip(pts2).enumerate() {
        let (x, y) = apply(&t1, p);
        let (u, v) = apply(&t2, q);
        let r0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for c in 0..9 {
            a[(2 * i, c)] = r0[c];
            a[(2 * i + 1, c)] = r1[c];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(Error::Degenerate("decomposition failed"))?;
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&i, &j| sv[i].total_cmp(&sv[j]));
    let (smallest, second) = (order[0], order[1]);
    if sv[second] <= RANK_TOL * sv.max() {
        return Err(Error::Degenerate("rank-deficient point configuration"));
    }
    let h = v_t.row(smallest);
    let hn = Matrix3::from_fn(|r, c| h[3 * r + c]);
    let t2_inv = t2.try_inverse().ok_or(Error::Degenerate("coincident points"))?;
    Homography::new(t2_inv * hn * t1)
}
