//! Dot-product similarities, mutual nearest neighbours, curriculum triplet
//! mining and the triplet objective.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::tensor::{Real, Tensor};

/// Allowed deviation of a descriptor norm from one.
pub const UNIT_NORM_TOL: f64 = 1e-3;
pub const DEFAULT_MARGIN: f64 = 0.5;
pub const DEFAULT_GAMMA_DECAY: f64 = 0.9993;

/// Mutual-nearest-neighbour pairs in increasing order of the first index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchSet {
    pub pairs: Vec<(usize, usize)>,
    pub similarities: Vec<f64>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// The same matches seen from the second image.
    pub fn swapped(&self) -> MatchSet {
        MatchSet {
            pairs: self.pairs.iter().map(|&(a, b)| (b, a)).collect(),
            similarities: self.similarities.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeKind {
    Hardest,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    pub s_p: f64,
    pub s_n: f64,
    pub kind: NegativeKind,
}

/// Probability `gamma` of drawing a random rather than the hardest negative.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumState {
    pub gamma: f64,
    pub decay: f64,
}

impl Default for CurriculumState {
    fn default() -> Self {
        CurriculumState {
            gamma: 1.0,
            decay: DEFAULT_GAMMA_DECAY,
        }
    }
}

impl CurriculumState {
    pub fn new(gamma: f64, decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::Config(format!("gamma must lie in [0, 1], got {gamma}")));
        }
        if !(decay > 0.0 && decay < 1.0) {
            return Err(Error::Config(format!("gamma decay must lie in (0, 1), got {decay}")));
        }
        Ok(CurriculumState { gamma, decay })
    }

    pub fn step(self) -> Self {
        CurriculumState {
            gamma: self.gamma * self.decay,
            ..self
        }
    }
}

fn check_unit_rows<T: Real>(m: &Matrix<T>, which: &str) -> Result<()> {
    for i in 0..m.rows() {
        let n = m.row(i).iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::Contract(format!(
                "{which} descriptor {i} has norm {n:.6}; descriptors must be unit length"
            )));
        }
    }
    Ok(())
}

/// `S[i][j] = d1_i . d2_j` for unit-length rows.
pub fn similarity_matrix<T: Real>(d1: &Matrix<T>, d2: &Matrix<T>) -> Result<Matrix<T>> {
    if d1.cols() != d2.cols() && d1.rows() > 0 && d2.rows() > 0 {
        return Err(Error::Dimension {
            op: "similarity_matrix",
            axis: "descriptor",
            expected: d1.cols(),
            found: d2.cols(),
        });
    }
    check_unit_rows(d1, "first")?;
    check_unit_rows(d2, "second")?;
    let (n1, n2, d) = (d1.rows(), d2.rows(), d1.cols());
    let mut out = vec![T::zero(); n1 * n2];
    if n1 > 0 && n2 > 0 {
        T::gemm(
            n1,
            d,
            n2,
            d1.data(),
            (d, 1),
            d2.data(),
            (1, d),
            &mut out,
            (n2, 1),
            false,
        );
    }
    Matrix::new(n1, n2, out)
}

/// Index of the first maximum.
fn argmax<T: Real>(values: impl Iterator<Item = T>) -> Option<usize> {
    let mut best: Option<(usize, T)> = None;
    for (i, v) in values.enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Pairs `(i, j)` that are each other's highest similarity; ties go to the
/// lowest index.
pub fn mutual_nearest_neighbors<T: Real>(s: &Matrix<T>) -> MatchSet {
    let (n1, n2) = (s.rows(), s.cols());
    if n1 == 0 || n2 == 0 {
        return MatchSet::default();
    }
    let col_best: Vec<usize> = (0..n2)
        .map(|j| argmax((0..n1).map(|i| s.get(i, j))).expect("non-empty"))
        .collect();
    let mut out = MatchSet::default();
    for i in 0..n1 {
        let j = argmax(s.row(i).iter().copied()).expect("non-empty");
        if col_best[j] == i {
            out.pairs.push((i, j));
            out.similarities.push(s.get(i, j).as_f64());
        }
    }
    out
}

/// Forms one triplet per match `(a, p)` with the hardest negative (best
/// column other than `p`) or, with probability `gamma`, a uniformly random
/// column other than `p`. Only triplets with `s_p - s_n < margin` are kept.
///
/// `rng` is not touched when `gamma <= 0`.
pub fn mine_triplets<T: Real, R: Rng + ?Sized>(
    s: &Matrix<T>,
    matches: &MatchSet,
    state: &CurriculumState,
    margin: f64,
    rng: &mut R,
) -> Vec<Triplet> {
    let n2 = s.cols();
    if n2 < 2 {
        return Vec::new();
    }
    let mut out = Vec::new();
    for &(a, p) in &matches.pairs {
        let row = s.row(a);
        let random = state.gamma >= 1.0 || (state.gamma > 0.0 && rng.random::<f64>() < state.gamma);
        let (negative, kind) = if random {
            let r = rng.random_range(0..n2 - 1);
            (if r < p { r } else { r + 1 }, NegativeKind::Random)
        } else {
            let best = argmax(row.iter().enumerate().filter(|&(j, _)| j != p).map(|(_, &v)| v))
                .expect("at least one other column");
            (if best < p { best } else { best + 1 }, NegativeKind::Hardest)
        };
        let s_p = row[p].as_f64();
        let s_n = row[negative].as_f64();
        if s_p - s_n < margin {
            out.push(Triplet {
                anchor: a,
                positive: p,
                negative,
                s_p,
                s_n,
                kind,
            });
        }
    }
    out
}

/// Mean of `s_n - s_p` over `triplets`, read from the recorded similarity
/// matrix `sim` (`N1 x N2`). No triplets gives a constant zero.
pub fn triplet_loss<T: Real>(tape: &mut Tape<T>, sim: Var, triplets: &[Triplet]) -> Result<Var> {
    if triplets.is_empty() {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    let n2 = match *tape.shape(sim) {
        [_, n2] => n2,
        ref s => {
            return Err(Error::Rank {
                op: "triplet_loss",
                expected: 2,
                found: s.to_vec(),
            })
        }
    };
    let pos = tape.gather(sim, triplets.iter().map(|t| t.anchor * n2 + t.positive).collect())?;
    let neg = tape.gather(sim, triplets.iter().map(|t| t.anchor * n2 + t.negative).collect())?;
    let diff = tape.sub(neg, pos)?;
    Ok(tape.mean(diff))
}

/// Plain-number counterpart of [`triplet_loss`].
pub fn triplet_loss_value(triplets: &[Triplet]) -> f64 {
    if triplets.is_empty() {
        return 0.0;
    }
    triplets.iter().map(|t| t.s_n - t.s_p).sum::<f64>() / triplets.len() as f64
}
