use super::{distance, Homography};

/// Resolution of the accuracy curve integrated by [`hom_acc_auc`].
pub const AUC_STEPS_PER_PIXEL: u32 = 100;

/// Mean distance between the four image corners mapped by `h_est` and by
/// `h_gt`. Corners are the outer pixel centres `(0,0) .. (w-1,h-1)`.
/// A corner sent to infinity makes the error infinite.
pub fn corner_error(h_est: &Homography, h_gt: &Homography, width: usize, height: usize) -> f64 {
    let (w, h) = ((width as f64 - 1.0).max(0.0), (height as f64 - 1.0).max(0.0));
    let corners = [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)];
    let mut total = 0.0;
    for c in corners {
        match (h_est.warp_point(c), h_gt.warp_point(c)) {
            (Ok(a), Ok(b)) => total += distance(a, b),
            _ => return f64::INFINITY,
        }
    }
    total / 4.0
}

/// Fraction of `errors` at or below each threshold; zeros for no matches.
pub fn mma(errors: &[f64], thresholds: &[f64]) -> Vec<f64> {
    thresholds
        .iter()
        .map(|&t| {
            if errors.is_empty() {
                0.0
            } else {
                errors.iter().filter(|&&e| e <= t).count() as f64 / errors.len() as f64
            }
        })
        .collect()
}

/// Correct matches over the mean keypoint count in the shared region.
pub fn matching_score(correct: usize, in_overlap1: usize, in_overlap2: usize) -> f64 {
    let denom = (in_overlap1 + in_overlap2) as f64 / 2.0;
    if denom == 0.0 {
        0.0
    } else {
        correct as f64 / denom
    }
}

/// Area under the homography-accuracy curve on `[0, eps_max]`, normalised to
/// `[0, 1]` (trapezoid rule on a grid of 100 samples per pixel).
pub fn hom_acc_auc(corner_errors: &[f64], eps_max: u32) -> f64 {
    if corner_errors.is_empty() || eps_max == 0 {
        return 0.0;
    }
    let steps = AUC_STEPS_PER_PIXEL * eps_max;
    let n = corner_errors.len() as f64;
    let acc = |k: u32| {
        let eps = k as f64 / AUC_STEPS_PER_PIXEL as f64;
        corner_errors.iter().filter(|&&e| e <= eps).count() as f64 / n
    };
    let mut prev = acc(0);
    let mut area = 0.0;
    for k in 1..=steps {
        let cur = acc(k);
        area += 0.5 * (prev + cur);
        prev = cur;
    }
    area / steps as f64
}
