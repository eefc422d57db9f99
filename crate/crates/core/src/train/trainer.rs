use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Tape, Var};
use crate::data::{da_keypoints, derive_seed, generate_pair, procedural_texture, SyntheticPair};
use crate::error::{Error, Result};
use crate::geometry::{distance, harris_keypoints, Homography, Keypoint};
use crate::image::Image;
use crate::matching::{mine_triplets, mutual_nearest_neighbors, similarity_matrix, CurriculumState, MatchSet, Triplet};
use crate::matrix::Matrix;
use crate::net::{build_network, sample_descriptors_on_tape, Model};
use crate::par;
use crate::tensor::Tensor;
use crate::train::{adamw_step, lr_at, Detector, TrainConfig};

const STREAM_INIT: u64 = 1;
const STREAM_MINING: u64 = 2;
const STREAM_BATCH: u64 = 3;
const STREAM_SOURCES: u64 = 4;
const STREAM_VAL_SOURCES: u64 = 5;
const STREAM_VAL_PAIRS: u64 = 6;
/// Held-out texture count of the validation set.
const VAL_SOURCES: usize = 4;

/// Complete training state: what is saved and what a resumed run needs.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model<f32>,
    pub step: u64,
    /// Optimiser updates applied (steps without triplets apply none).
    pub updates: u64,
    pub curriculum: CurriculumState,
    /// Drives negative sampling.
    pub rng: ChaCha8Rng,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub triplets: usize,
    pub lr: f64,
    pub gamma: f64,
    pub applied: bool,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRecord {
    pub step: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    pub gamma: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub triplets: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<f64>,
}

/// Training textures generated from the configured seed.
pub fn procedural_sources(cfg: &TrainConfig) -> Vec<Image> {
    par::map_indices(cfg.n_sources, |i| {
        procedural_texture(cfg.source_size, derive_seed(cfg.seed, STREAM_SOURCES, i as u64))
    })
}

/// Keypoint lists of both views and the ground-truth pairs between them.
struct Correspondences {
    k1: Vec<Keypoint>,
    k2: Vec<Keypoint>,
    matches: MatchSet,
}

/// Pairs keypoints that are mutually closest under `h` and within `radius`.
fn geometric_matches(k1: &[Keypoint], k2: &[Keypoint], h: &Homography, radius: f64) -> MatchSet {
    let projected: Vec<Option<(f64, f64)>> = k1.iter().map(|k| h.warp_point(k.point()).ok()).collect();
    let data = projected
        .iter()
        .flat_map(|p| {
            k2.iter().map(move |q| match p {
                Some(p) => -distance(*p, q.point()),
                None => f64::NEG_INFINITY,
            })
        })
        .collect();
    let neg_dist = Matrix::new(k1.len(), k2.len(), data).expect("sized");
    let mnn = mutual_nearest_neighbors(&neg_dist);
    let mut out = MatchSet::default();
    for (&(i, j), &s) in mnn.pairs.iter().zip(&mnn.similarities) {
        if -s <= radius {
            out.pairs.push((i, j));
            out.similarities.push(s);
        }
    }
    out
}

fn correspondences(pair: &SyntheticPair, cfg: &TrainConfig) -> Result<Correspondences> {
    match cfg.detector {
        Detector::Grid => {
            let (k1, k2) = da_keypoints(pair, cfg.grid_stride, cfg.tau)?;
            let matches = MatchSet {
                pairs: (0..k1.len()).map(|i| (i, i)).collect(),
                similarities: vec![1.0; k1.len()],
            };
            Ok(Correspondences { k1, k2, matches })
        }
        Detector::Harris => {
            let detect = |img: &Image| harris_keypoints(&img.gray(), img.width(), img.height(), &cfg.harris);
            let (k1, k2) = (detect(&pair.image1)?, detect(&pair.image2)?);
            let matches = geometric_matches(&k1, &k2, &pair.h_gt, cfg.match_radius);
            Ok(Correspondences { k1, k2, matches })
        }
    }
}

fn points(k: &[Keypoint]) -> Vec<(f64, f64)> {
    k.iter().map(Keypoint::point).collect()
}

fn stack(images: &[&Image]) -> Result<Tensor<f32>> {
    let (h, w) = (images[0].height(), images[0].width());
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        data.extend_from_slice(img.to_rgb().data());
    }
    Tensor::new([images.len(), 3, h, w], data)
}

fn values(tape: &Tape<f32>, v: Var) -> Matrix<f32> {
    let t = tape.value(v);
    Matrix::new(t.shape()[0], t.shape()[1], t.data().to_vec()).expect("rank 2")
}

/// Sum of `s_n - s_p` over `triplets` read from `sim`.
fn violation_sum(tape: &mut Tape<f32>, sim: Var, triplets: &[Triplet]) -> Result<Option<Var>> {
    if triplets.is_empty() {
        return Ok(None);
    }
    let n2 = tape.shape(sim)[1];
    let pos = tape.gather(sim, triplets.iter().map(|t| t.anchor * n2 + t.positive).collect())?;
    let neg = tape.gather(sim, triplets.iter().map(|t| t.anchor * n2 + t.negative).collect())?;
    let d = tape.sub(neg, pos)?;
    Ok(Some(tape.sum(d)))
}

fn accumulate(tape: &mut Tape<f32>, acc: Option<Var>, term: Option<Var>) -> Result<Option<Var>> {
    Ok(match (acc, term) {
        (Some(a), Some(t)) => Some(tape.add(a, t)?),
        (a, t) => a.or(t),
    })
}

impl Checkpoint {
    /// Fresh state: initial weights from the configured seed, `gamma_init`.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = build_network(&config.network, derive_seed(config.seed, STREAM_INIT, 0))?;
        Ok(Checkpoint {
            curriculum: CurriculumState::new(config.gamma_init, config.gamma_decay)?,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_MINING, 0)),
            model,
            step: 0,
            updates: 0,
            config,
        })
    }

    /// Seed identifying the data of `step`.
    pub fn batch_seed(&self, step: u64) -> u64 {
        derive_seed(self.config.seed, STREAM_BATCH, step)
    }

    fn batch(&self, sources: &[Image]) -> Result<Vec<SyntheticPair>> {
        let cfg = &self.config;
        let seed = self.batch_seed(self.step);
        let warp = cfg.warp();
        par::map_indices(cfg.batch_size, |b| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0, b as u64));
            let src = rng.random_range(0..sources.len());
            generate_pair(&sources[src], cfg.crop_size, &warp, &mut rng)
        })
        .into_iter()
        .collect()
    }

    /// One optimisation step on a freshly sampled batch.
    pub fn train_step(&mut self, sources: &[Image]) -> Result<StepStats> {
        if sources.is_empty() {
            return Err(Error::Config("no training sources".into()));
        }
        let lr = lr_at(self.step, &self.config);
        let pairs = self.batch(sources)?;
        let corr: Vec<Correspondences> = pairs
            .iter()
            .map(|p| correspondences(p, &self.config))
            .collect::<Result<_>>()?;
        let images: Vec<&Image> = pairs.iter().flat_map(|p| [&p.image1, &p.image2]).collect();
        let input = stack(&images)?;

        let mut tape = Tape::new();
        let (volume, params) = self.model.forward_train(&mut tape, input)?;
        let mut sums = [None, None];
        let mut counts = [0usize; 2];
        for (b, c) in corr.iter().enumerate() {
            if c.k1.is_empty() || c.k2.is_empty() || c.matches.is_empty() {
                continue;
            }
            let d1 = sample_descriptors_on_tape(&mut tape, volume, 2 * b, &points(&c.k1))?;
            let d2 = sample_descriptors_on_tape(&mut tape, volume, 2 * b + 1, &points(&c.k2))?;
            let directions = [(d1, d2, c.matches.clone()), (d2, d1, c.matches.swapped())];
            for (dir, (a, p, m)) in directions.into_iter().enumerate() {
                let sim = tape.matmul_nt(a, p)?;
                let s = values(&tape, sim);
                let triplets = mine_triplets(&s, &m, &self.curriculum, self.config.margin, &mut self.rng);
                counts[dir] += triplets.len();
                let term = violation_sum(&mut tape, sim, &triplets)?;
                sums[dir] = accumulate(&mut tape, sums[dir], term)?;
            }
        }
        let mut loss = None;
        let active = sums.iter().filter(|s| s.is_some()).count();
        for dir in 0..2 {
            if let Some(s) = sums[dir] {
                let mean = tape.scale(s, 1.0 / (counts[dir] as f32 * active as f32));
                loss = accumulate(&mut tape, loss, Some(mean))?;
            }
        }
        let gamma = self.curriculum.gamma;
        let mut stats = StepStats {
            step: self.step,
            loss: 0.0,
            triplets: counts[0] + counts[1],
            lr,
            gamma,
            applied: false,
        };
        if let Some(loss) = loss {
            let value = tape.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: self.step,
                    batch_seed: self.batch_seed(self.step),
                });
            }
            stats.loss = value;
            tape.backward(loss)?;
            let grads: Vec<Vec<f32>> = params
                .iter()
                .zip(&self.model.params)
                .map(|(&v, p)| {
                    tape.grad(v)
                        .map_or_else(|| vec![0.0; p.tensor.numel()], <[f32]>::to_vec)
                })
                .collect();
            adamw_step(&mut self.model.params, &grads, self.updates + 1, lr, &self.config)?;
            self.updates += 1;
            stats.applied = true;
        }
        self.curriculum = self.curriculum.step();
        self.step += 1;
        Ok(stats)
    }

    /// Trains until `self.step == until`, reporting through `log`.
    /// Held-out accuracy is measured before the first step, every
    /// `val_every` steps and after the last one.
    pub fn run(
        &mut self,
        until: u64,
        sources: &[Image],
        validation: Option<&ValidationSet>,
        log: &mut dyn FnMut(&LogRecord) -> Result<()>,
    ) -> Result<()> {
        let validate = |ck: &Checkpoint| -> Result<Option<f64>> {
            validation
                .map(|v| matching_accuracy(&ck.model, v, ck.config.val_threshold))
                .transpose()
        };
        if self.step == 0 || self.step >= until {
            if let Some(acc) = validate(self)? {
                log(&LogRecord {
                    step: self.step,
                    loss: None,
                    gamma: self.curriculum.gamma,
                    lr: lr_at(self.step, &self.config),
                    triplets: None,
                    val_accuracy: Some(acc),
                })?;
            }
        }
        while self.step < until {
            let s = self.train_step(sources)?;
            let done = self.step;
            let val_due = self.config.val_every > 0 && done.is_multiple_of(self.config.val_every) || done == until;
            let log_due = self.config.log_every > 0 && s.step % self.config.log_every == 0;
            let val_accuracy = if val_due { validate(self)? } else { None };
            if log_due || val_accuracy.is_some() {
                log(&LogRecord {
                    step: s.step,
                    loss: Some(s.loss),
                    gamma: s.gamma,
                    lr: s.lr,
                    triplets: Some(s.triplets),
                    val_accuracy,
                })?;
            }
        }
        Ok(())
    }
}

/// Fixed held-out pairs with their ground-truth grid correspondences.
#[derive(Clone, Debug)]
pub struct ValidationSet {
    pub pairs: Vec<SyntheticPair>,
    keypoints: Vec<(Vec<Keypoint>, Vec<Keypoint>)>,
}

impl ValidationSet {
    /// `cfg.val_pairs` pairs drawn from textures that training never sees.
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let sources: Vec<Image> = par::map_indices(VAL_SOURCES, |i| {
            procedural_texture(cfg.source_size, derive_seed(cfg.seed, STREAM_VAL_SOURCES, i as u64))
        });
        let warp = cfg.warp();
        let pairs = par::map_indices(cfg.val_pairs, |i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_VAL_PAIRS, i as u64));
            generate_pair(&sources[i % VAL_SOURCES], cfg.crop_size, &warp, &mut rng)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let keypoints = pairs
            .iter()
            .map(|p| da_keypoints(p, cfg.grid_stride, cfg.tau))
            .collect::<Result<_>>()?;
        Ok(ValidationSet { pairs, keypoints })
    }
}

/// Mean over pairs of the fraction of descriptor mutual-nearest-neighbour
/// matches whose ground-truth reprojection error is within `threshold`.
pub fn matching_accuracy(model: &Model<f32>, val: &ValidationSet, threshold: f64) -> Result<f64> {
    if val.pairs.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (pair, (k1, k2)) in val.pairs.iter().zip(&val.keypoints) {
        if k1.is_empty() {
            continue;
        }
        let vols = model.forward_eval_batch(stack(&[&pair.image1, &pair.image2])?)?;
        let d1 = vols[0].sample_descriptors(k1)?;
        let d2 = vols[1].sample_descriptors(k2)?;
        let m = mutual_nearest_neighbors(&similarity_matrix(&d1, &d2)?);
        if m.is_empty() {
            continue;
        }
        let correct = m
            .pairs
            .iter()
            .filter(|&&(i, j)| {
                pair.h_gt
                    .warp_point(k1[i].point())
                    .is_ok_and(|p| distance(p, k2[j].point()) <= threshold)
            })
            .count();
        total += correct as f64 / m.len() as f64;
    }
    Ok(total / val.pairs.len() as f64)
}
