//! Homography-benchmark evaluation of a checkpoint on a scene corpus.

use std::path::Path;

use anyhow::{Context, Result};
use sandesc::data::derive_seed;
use sandesc::geometry::{
    corner_error, distance, hom_acc_auc, matching_score, mma, ransac_homography, Correspondence, Homography, Keypoint,
};
use sandesc::image::{load_rgb, Image};
use sandesc::matching::{mutual_nearest_neighbors, similarity_matrix, MatchSet};
use sandesc::net::Model;
use sandesc::par;
use serde::ser::Serializer;
use serde::Serialize;
use serde_json::value::RawValue;

use crate::dataset::{discover, read_homography, PairSpec};
use crate::extract::{extract, DetectorSpec, Features};

pub const MMA_THRESHOLDS: [f64; 3] = [1.0, 2.0, 3.0];
/// Reprojection threshold of the matching score, pixels.
pub const MS_THRESHOLD: f64 = 3.0;
/// RANSAC inlier thresholds tried for every pair; each AUC reports the best.
pub const RANSAC_THRESHOLDS: [f64; 5] = [0.5, 1.0, 2.0, 3.0, 5.0];
pub const RANSAC_ITERATIONS: usize = 1000;
pub const AUC_LIMITS: [u32; 3] = [1, 2, 3];

/// A number written with four decimals; non-finite values become `null`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fixed(pub f64);

impl Serialize for Fixed {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if !self.0.is_finite() {
            return s.serialize_none();
        }
        // `-0.0000` reads oddly in tables
        let text = format!("{:.4}", self.0).replace("-0.0000", "0.0000");
        RawValue::from_string(text)
            .map_err(serde::ser::Error::custom)?
            .serialize(s)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PairRecord {
    pub scene: String,
    pub target: usize,
    pub keypoints: [usize; 2],
    pub matches: usize,
    /// MMA at 1, 2 and 3 pixels.
    pub mma: [Fixed; 3],
    pub ms: Fixed,
    /// Corner error of the RANSAC estimate at each sweep threshold; `null`
    /// when no homography was found.
    pub corner_error: Vec<Fixed>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Skipped {
    pub scene: String,
    pub target: usize,
    pub reason: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct Aggregate {
    pub pairs: usize,
    pub mean_matches: Fixed,
    pub mma: [Fixed; 3],
    pub ms: Fixed,
    /// Mean over pairs with an estimate, per sweep threshold.
    pub mean_corner_error: Vec<Fixed>,
    /// Homography accuracy AUC at 1, 2 and 3 pixels, best over the sweep.
    pub auc: [Fixed; 3],
    /// Sweep threshold achieving each AUC.
    pub auc_threshold: [Fixed; 3],
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub seed: u64,
    pub config_hash: String,
    pub checkpoint_hash: String,
    pub detector: String,
    pub budget: usize,
    pub ransac_iterations: usize,
    pub ransac_thresholds: Vec<Fixed>,
    pub pairs: Vec<PairRecord>,
    pub skipped: Vec<Skipped>,
    pub aggregate: Aggregate,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("serialisable report");
        s.push('\n');
        s
    }
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub detector: DetectorSpec,
    pub budget: usize,
    pub seed: u64,
    pub jobs: usize,
}

/// Unrounded measurements of one pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairMetrics {
    pub keypoints: [usize; 2],
    pub matches: usize,
    pub mma: [f64; 3],
    pub ms: f64,
    pub corner_error: Vec<f64>,
}

/// `x` as it reads back from the report.
pub fn round4(x: f64) -> f64 {
    if x.is_finite() {
        format!("{x:.4}").parse().expect("formatted float")
    } else {
        x
    }
}

impl PairMetrics {
    /// Every value rounded as it is written, so aggregates recomputed from a
    /// report agree with the report.
    pub fn rounded(&self) -> PairMetrics {
        PairMetrics {
            keypoints: self.keypoints,
            matches: self.matches,
            mma: self.mma.map(round4),
            ms: round4(self.ms),
            corner_error: self.corner_error.iter().copied().map(round4).collect(),
        }
    }
}

fn inside(p: (f64, f64), image: &Image) -> bool {
    p.0 >= 0.0 && p.1 >= 0.0 && p.0 <= (image.width() - 1) as f64 && p.1 <= (image.height() - 1) as f64
}

fn overlap_count(points: &[Keypoint], h: &Homography, other: &Image) -> usize {
    points
        .iter()
        .filter(|k| h.warp_point(k.point()).is_ok_and(|p| inside(p, other)))
        .count()
}

/// Scores descriptor matches between two views related by `h_gt`.
pub fn score_pair(
    f1: &Features,
    f2: &Features,
    image1: &Image,
    image2: &Image,
    h_gt: &Homography,
    seed: u64,
) -> Result<PairMetrics> {
    let matches = if f1.keypoints.is_empty() || f2.keypoints.is_empty() {
        MatchSet::default()
    } else {
        mutual_nearest_neighbors(&similarity_matrix(&f1.descriptors, &f2.descriptors)?)
    };
    let errors: Vec<f64> = matches
        .pairs
        .iter()
        .map(|&(i, j)| {
            h_gt.warp_point(f1.keypoints[i].point())
                .map_or(f64::INFINITY, |p| distance(p, f2.keypoints[j].point()))
        })
        .collect();
    let acc = mma(&errors, &MMA_THRESHOLDS);
    let correct = errors.iter().filter(|&&e| e <= MS_THRESHOLD).count();
    let n1 = overlap_count(&f1.keypoints, h_gt, image2);
    let n2 = overlap_count(&f2.keypoints, &h_gt.inverse()?, image1);
    let corr: Vec<Correspondence> = matches
        .pairs
        .iter()
        .map(|&(i, j)| Correspondence {
            p1: f1.keypoints[i].point(),
            p2: f2.keypoints[j].point(),
        })
        .collect();
    let corner = RANSAC_THRESHOLDS
        .iter()
        .map(|&t| {
            ransac_homography(&corr, RANSAC_ITERATIONS, t, seed)
                .homography
                .map_or(f64::INFINITY, |h| {
                    corner_error(&h, h_gt, image1.width(), image1.height())
                })
        })
        .collect();
    Ok(PairMetrics {
        keypoints: [f1.keypoints.len(), f2.keypoints.len()],
        matches: matches.len(),
        mma: [acc[0], acc[1], acc[2]],
        ms: matching_score(correct, n1, n2),
        corner_error: corner,
    })
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Aggregate table of per-pair rows; a `null` corner error counts as a
/// failed estimate.
pub fn aggregate(rows: &[PairMetrics]) -> Aggregate {
    let col = |f: &dyn Fn(&PairMetrics) -> f64| Fixed(mean(rows.iter().map(f)));
    let per_threshold: Vec<Vec<f64>> = (0..RANSAC_THRESHOLDS.len())
        .map(|t| rows.iter().map(|r| r.corner_error[t]).collect())
        .collect();
    let mut auc = [Fixed(0.0); 3];
    let mut auc_threshold = [Fixed(RANSAC_THRESHOLDS[0]); 3];
    for (k, &limit) in AUC_LIMITS.iter().enumerate() {
        let mut best = (f64::NEG_INFINITY, 0);
        for (t, errs) in per_threshold.iter().enumerate() {
            let a = hom_acc_auc(errs, limit);
            if a > best.0 {
                best = (a, t);
            }
        }
        auc[k] = Fixed(best.0.max(0.0));
        auc_threshold[k] = Fixed(RANSAC_THRESHOLDS[best.1]);
    }
    Aggregate {
        pairs: rows.len(),
        mean_matches: col(&|r| r.matches as f64),
        mma: [col(&|r| r.mma[0]), col(&|r| r.mma[1]), col(&|r| r.mma[2])],
        ms: col(&|r| r.ms),
        mean_corner_error: per_threshold
            .iter()
            .map(|errs| Fixed(mean(errs.iter().copied().filter(|e| e.is_finite()))))
            .collect(),
        auc,
        auc_threshold,
    }
}

fn evaluate_pair(model: &Model<f32>, spec: &PairSpec, opts: &EvalOptions, index: usize) -> Result<PairMetrics> {
    let h_gt = read_homography(&spec.homography)?;
    let image1 = load_rgb(&spec.reference)?;
    let image2 = load_rgb(&spec.image)?;
    let f1 = extract(model, &image1, &opts.detector, opts.budget)?;
    let f2 = extract(model, &image2, &opts.detector, opts.budget)?;
    score_pair(
        &f1,
        &f2,
        &image1,
        &image2,
        &h_gt,
        derive_seed(opts.seed, 0, index as u64),
    )
}

/// Evaluates every pair under `data_dir`. Pairs without a homography file
/// are skipped and listed in the report.
pub fn evaluate(
    model: &Model<f32>,
    data_dir: &Path,
    opts: &EvalOptions,
    config_hash: String,
    checkpoint_hash: String,
) -> Result<EvalReport> {
    let specs = discover(data_dir)?;
    let (present, missing): (Vec<_>, Vec<_>) = specs.into_iter().partition(|p| p.homography.is_file());
    let results = par::with_jobs(opts.jobs, || {
        par::map_indices(present.len(), |i| evaluate_pair(model, &present[i], opts, i))
    });
    let mut rows = Vec::with_capacity(present.len());
    let mut metrics = Vec::with_capacity(present.len());
    for (spec, result) in present.iter().zip(results) {
        let m = result
            .with_context(|| format!("evaluating {} / {}", spec.scene, spec.target))?
            .rounded();
        rows.push(PairRecord {
            scene: spec.scene.clone(),
            target: spec.target,
            keypoints: m.keypoints,
            matches: m.matches,
            mma: m.mma.map(Fixed),
            ms: Fixed(m.ms),
            corner_error: m.corner_error.iter().copied().map(Fixed).collect(),
        });
        metrics.push(m);
    }
    let skipped = missing
        .into_iter()
        .map(|p| Skipped {
            reason: format!("missing {}", p.homography.display()),
            scene: p.scene,
            target: p.target,
        })
        .collect();
    let detector = match opts.detector {
        DetectorSpec::Grid { stride } => format!("grid:{stride}"),
        DetectorSpec::Harris(_) => "harris".to_string(),
    };
    Ok(EvalReport {
        seed: opts.seed,
        config_hash,
        checkpoint_hash,
        detector,
        budget: opts.budget,
        ransac_iterations: RANSAC_ITERATIONS,
        ransac_thresholds: RANSAC_THRESHOLDS.iter().copied().map(Fixed).collect(),
        pairs: rows,
        skipped,
        aggregate: aggregate(&metrics),
    })
}
