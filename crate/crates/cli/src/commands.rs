//! The command implementations behind the `sandesc` binary.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use sandesc::data::derive_seed;
use sandesc::geometry::{ransac_homography, Correspondence};
use sandesc::image::{load_rgb, save_image, Image};
use sandesc::matching::{mutual_nearest_neighbors, similarity_matrix, MatchSet};
use sandesc::train::{
    file_digest, load_checkpoint, procedural_sources, save_checkpoint, Checkpoint, TrainConfig, ValidationSet,
};
use sha2::{Digest, Sha256};

use crate::dataset::{self, image_files, GenDataOptions};
use crate::descfile::DescriptorFile;
use crate::eval::{evaluate, EvalOptions, EvalReport};
use crate::extract::{extract, DetectorSpec};
use crate::viz::render_matches;

/// Inlier threshold used to colour visualised matches, pixels.
pub const VIZ_RANSAC_THRESHOLD: f64 = 3.0;
pub const VIZ_RANSAC_ITERATIONS: usize = 1000;

/// Hex SHA-256 of the canonical text form of `cfg`.
pub fn config_hash(cfg: &TrainConfig) -> String {
    Sha256::digest(cfg.to_toml().as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => Ok(TrainConfig::load(p)?),
        None => Ok(TrainConfig::default()),
    }
}

pub fn cmd_gen_data(out: &Path, opts: &GenDataOptions) -> Result<Vec<PathBuf>> {
    dataset::generate(out, opts)
}

#[derive(Clone, Debug, Default)]
pub struct TrainArgs {
    pub config: Option<PathBuf>,
    /// Directory of texture images; procedural textures when absent.
    pub data_dir: Option<PathBuf>,
    pub out: PathBuf,
    /// Metrics log; defaults to the checkpoint path with `.log.jsonl` added.
    pub log: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub seed: Option<u64>,
    pub steps: Option<u64>,
}

pub fn default_log_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.file_name().unwrap_or_default().to_os_string();
    name.push(".log.jsonl");
    checkpoint.with_file_name(name)
}

fn load_sources(dir: &Path, cfg: &TrainConfig) -> Result<Vec<Image>> {
    ensure!(dir.is_dir(), "data directory {} does not exist", dir.display());
    let files = image_files(dir)?;
    ensure!(!files.is_empty(), "no images in {}", dir.display());
    files
        .iter()
        .map(|f| {
            let img = load_rgb(f)?;
            ensure!(
                img.width() >= cfg.crop_size && img.height() >= cfg.crop_size,
                "{} is smaller than the {} px crop",
                f.display(),
                cfg.crop_size
            );
            Ok(img)
        })
        .collect()
}

/// Trains (or resumes) and writes the checkpoint only after the last step.
pub fn cmd_train(args: &TrainArgs) -> Result<Checkpoint> {
    let mut ck = match &args.resume {
        Some(path) => {
            let ck = load_checkpoint(path).with_context(|| format!("resuming from {}", path.display()))?;
            if let Some(cfg_path) = &args.config {
                let mut given = TrainConfig::load(cfg_path)?;
                given.steps = ck.config.steps;
                ensure!(
                    given == ck.config,
                    "{} differs from the configuration stored in {}",
                    cfg_path.display(),
                    path.display()
                );
            }
            if args.seed.is_some_and(|s| s != ck.config.seed) {
                bail!("--seed differs from the seed stored in {}", path.display());
            }
            ck
        }
        None => {
            let mut cfg = load_config(args.config.as_deref())?;
            if let Some(seed) = args.seed {
                cfg.seed = seed;
            }
            Checkpoint::new(cfg)?
        }
    };
    if let Some(steps) = args.steps {
        ck.config.steps = steps;
    }
    let cfg = ck.config.clone();
    let sources = match &args.data_dir {
        Some(dir) => load_sources(dir, &cfg)?,
        None => procedural_sources(&cfg),
    };
    let validation = if cfg.val_pairs > 0 {
        Some(ValidationSet::new(&cfg)?)
    } else {
        None
    };
    let log_path = args.log.clone().unwrap_or_else(|| default_log_path(&args.out));
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    ck.run(cfg.steps, &sources, validation.as_ref(), &mut |record| {
        let line = serde_json::to_string(record).expect("serialisable record");
        writeln!(log, "{line}").map_err(|e| sandesc::Error::io(&log_path, e))
    })?;
    save_checkpoint(&ck, &args.out)?;
    Ok(ck)
}

#[derive(Clone, Debug)]
pub struct ExtractArgs {
    pub checkpoint: PathBuf,
    pub image: PathBuf,
    pub detector: DetectorSpec,
    pub n_keypoints: usize,
    pub out: PathBuf,
}

/// Writes the descriptor file; returns it with an optional warning when the
/// detector found fewer keypoints than requested.
pub fn cmd_extract(args: &ExtractArgs) -> Result<(DescriptorFile, Option<String>)> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let image = load_rgb(&args.image)?;
    let features = extract(&ck.model, &image, &args.detector, args.n_keypoints)?;
    let warning = (features.detected < args.n_keypoints).then(|| {
        format!(
            "requested {} keypoints but the detector found {}; writing all of them",
            args.n_keypoints, features.detected
        )
    });
    let file = DescriptorFile::from_keypoints(&features.keypoints, features.descriptors)?;
    file.save(&args.out)?;
    Ok((file, warning))
}

#[derive(Clone, Debug)]
pub struct VizArgs {
    pub image_a: PathBuf,
    pub image_b: PathBuf,
    pub out: PathBuf,
}

/// Mutual nearest neighbours of two descriptor sets.
pub fn match_descriptors(a: &DescriptorFile, b: &DescriptorFile) -> Result<MatchSet> {
    ensure!(
        a.dim() == b.dim(),
        "descriptor dimensions differ: {} vs {}",
        a.dim(),
        b.dim()
    );
    if a.is_empty() || b.is_empty() {
        return Ok(MatchSet::default());
    }
    Ok(mutual_nearest_neighbors(&similarity_matrix(
        &a.descriptors,
        &b.descriptors,
    )?))
}

pub fn format_matches(m: &MatchSet) -> String {
    m.pairs
        .iter()
        .zip(&m.similarities)
        .map(|(&(i, j), s)| format!("{i} {j} {s:.6}\n"))
        .collect()
}

pub fn cmd_match(a: &Path, b: &Path, out: &Path, viz: Option<&VizArgs>, seed: u64) -> Result<MatchSet> {
    let fa = DescriptorFile::load(a).with_context(|| format!("reading {}", a.display()))?;
    let fb = DescriptorFile::load(b).with_context(|| format!("reading {}", b.display()))?;
    let m = match_descriptors(&fa, &fb)?;
    fs::write(out, format_matches(&m)).with_context(|| format!("writing {}", out.display()))?;
    if let Some(v) = viz {
        let corr: Vec<Correspondence> = m
            .pairs
            .iter()
            .map(|&(i, j)| {
                let (p, q) = (fa.points[i], fb.points[j]);
                Correspondence {
                    p1: (p.0 as f64, p.1 as f64),
                    p2: (q.0 as f64, q.1 as f64),
                }
            })
            .collect();
        let fit = ransac_homography(
            &corr,
            VIZ_RANSAC_ITERATIONS,
            VIZ_RANSAC_THRESHOLD,
            derive_seed(seed, 0, 0),
        );
        let segments: Vec<_> = corr.iter().zip(&fit.inliers).map(|(c, &ok)| (c.p1, c.p2, ok)).collect();
        let canvas = render_matches(&load_rgb(&v.image_a)?, &load_rgb(&v.image_b)?, &segments);
        save_image(&v.out, &canvas)?;
    }
    Ok(m)
}

#[derive(Clone, Debug)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub data_dir: PathBuf,
    pub out: PathBuf,
    pub options: EvalOptions,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport> {
    ensure!(
        args.data_dir.is_dir(),
        "data directory {} does not exist",
        args.data_dir.display()
    );
    let ck = load_checkpoint(&args.checkpoint)?;
    let report = evaluate(
        &ck.model,
        &args.data_dir,
        &args.options,
        config_hash(&ck.config),
        file_digest(&args.checkpoint)?,
    )?;
    fs::write(&args.out, report.to_json()).with_context(|| format!("writing {}", args.out.display()))?;
    Ok(report)
}
