use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dlt::has_collinear_triple;
use super::{distance, dlt_homography, Correspondence, Homography, Point};

/// Result of a robust fit. `homography` is `None` when no model gathered
/// four inliers; `inliers` then is all false.
#[derive(Clone, Debug, PartialEq)]
pub struct RansacOutcome {
    pub homography: Option<Homography>,
    pub inliers: Vec<bool>,
}

impl RansacOutcome {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

/// Mean of the forward and backward reprojection distances; infinite when
/// either projection leaves the plane.
pub fn symmetric_transfer_error(h: &Homography, h_inv: &Homography, c: &Correspondence) -> f64 {
    match (h.warp_point(c.p1), h_inv.warp_point(c.p2)) {
        (Ok(f), Ok(b)) => 0.5 * (distance(f, c.p2) + distance(b, c.p1)),
        _ => f64::INFINITY,
    }
}

fn inlier_mask(h: &Homography, corr: &[Correspondence], threshold: f64) -> Option<Vec<bool>> {
    let inv = h.inverse().ok()?;
    Some(
        corr.iter()
            .map(|c| symmetric_transfer_error(h, &inv, c) < threshold)
            .collect(),
    )
}

fn fit(corr: &[Correspondence], mask: &[bool]) -> Option<Homography> {
    let (p1, p2): (Vec<Point>, Vec<Point>) = corr
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(c, _)| (c.p1, c.p2))
        .unzip();
    dlt_homography(&p1, &p2).ok()
}

/// Seeded four-point RANSAC with a final least-squares refit on the inliers.
pub fn ransac_homography(corr: &[Correspondence], iters: usize, threshold: f64, seed: u64) -> RansacOutcome {
    let failure = RansacOutcome {
        homography: None,
        inliers: vec![false; corr.len()],
    };
    if corr.len() < 4 {
        return failure;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(usize, Homography, Vec<bool>)> = None;
    for _ in 0..iters {
        let idx = sample(&mut rng, corr.len(), 4);
        let p1: Vec<Point> = idx.iter().map(|i| corr[i].p1).collect();
        let p2: Vec<Point> = idx.iter().map(|i| corr[i].p2).collect();
        if has_collinear_triple(&p1) || has_collinear_triple(&p2) {
            continue;
        }
        let Ok(h) = dlt_homography(&p1, &p2) else { continue };
        let Some(mask) = inlier_mask(&h, corr, threshold) else {
            continue;
        };
        let count = mask.iter().filter(|&&b| b).count();
        if best.as_ref().is_none_or(|(n, _, _)| count > *n) {
            best = Some((count, h, mask));
        }
    }
    let Some((count, h, mask)) = best else { return failure };
    if count < 4 {
        return failure;
    }
    let refined = fit(corr, &mask)
        .and_then(|r| inlier_mask(&r, corr, threshold).map(|m| (r, m)))
        .filter(|(_, m)| m.iter().filter(|&&b| b).count() >= count);
    let (h, mask) = refined.unwrap_or((h, mask));
    RansacOutcome {
        homography: Some(h),
        inliers: mask,
    }
}
