//! Synthetic scene corpora in the HPatches directory layout: per scene a
//! reference `1.ppm`, targets `2.ppm ..`, and `H_1_k` text files holding the
//! reference-to-target homography as nine row-major numbers.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sandesc::data::{centre_origin, derive_seed, generate_view, procedural_texture, WarpConfig};
use sandesc::geometry::Homography;
use sandesc::image::save_image;
use sandesc::par;

/// Seed streams of the corpus generator, disjoint from the trainer's.
pub const STREAM_SCENE_TEXTURE: u64 = 101;
pub const STREAM_SCENE_VIEWS: u64 = 102;

#[derive(Clone, Debug, PartialEq)]
pub struct GenDataOptions {
    pub scenes: usize,
    pub pairs_per_scene: usize,
    pub seed: u64,
    pub crop: usize,
    pub warp: WarpConfig,
}

pub fn scene_name(index: usize) -> String {
    format!("scene_{index:04}")
}

pub fn format_homography(h: &Homography) -> String {
    let a = h.to_array();
    let row = |r: usize| format!("{:.9} {:.9} {:.9}", a[3 * r], a[3 * r + 1], a[3 * r + 2]);
    format!("{}\n{}\n{}\n", row(0), row(1), row(2))
}

pub fn parse_homography(text: &str) -> Result<Homography> {
    let values: Vec<f64> = text
        .split_whitespace()
        .map(|t| t.parse::<f64>().with_context(|| format!("not a number: {t:?}")))
        .collect::<Result<_>>()?;
    let array: [f64; 9] = values
        .try_into()
        .map_err(|v: Vec<f64>| anyhow::anyhow!("expected 9 numbers, found {}", v.len()))?;
    Ok(Homography::from_array(&array)?)
}

pub fn read_homography(path: &Path) -> Result<Homography> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_homography(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Writes the corpus under `out`; returns the scene directories.
pub fn generate(out: &Path, opts: &GenDataOptions) -> Result<Vec<PathBuf>> {
    if opts.scenes == 0 || opts.pairs_per_scene == 0 {
        bail!("scene and pair counts must be positive");
    }
    if opts.crop == 0 || !opts.crop.is_multiple_of(sandesc::net::SIZE_MULTIPLE) {
        bail!("crop must be a positive multiple of {}", sandesc::net::SIZE_MULTIPLE);
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let rendered = par::map_indices(opts.scenes, |s| -> sandesc::Result<_> {
        let source = procedural_texture(2 * opts.crop, derive_seed(opts.seed, STREAM_SCENE_TEXTURE, s as u64));
        let origin = centre_origin(&source, opts.crop);
        let reference = source.crop(origin.0, origin.1, opts.crop, opts.crop)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, STREAM_SCENE_VIEWS, s as u64));
        let views = (0..opts.pairs_per_scene)
            .map(|_| generate_view(&source, origin, opts.crop, &opts.warp, &mut rng))
            .collect::<sandesc::Result<Vec<_>>>()?;
        Ok((reference, views))
    });
    let mut dirs = Vec::with_capacity(opts.scenes);
    for (s, scene) in rendered.into_iter().enumerate() {
        let (reference, views) = scene?;
        let dir = out.join(scene_name(s));
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        save_image(&dir.join("1.ppm"), &reference)?;
        for (k, (view, h)) in views.iter().enumerate() {
            let idx = k + 2;
            save_image(&dir.join(format!("{idx}.ppm")), view)?;
            let path = dir.join(format!("H_1_{idx}"));
            fs::write(&path, format_homography(h)).with_context(|| format!("writing {}", path.display()))?;
        }
        dirs.push(dir);
    }
    Ok(dirs)
}

const IMAGE_EXTENSIONS: [&str; 4] = ["ppm", "pgm", "png", "pnm"];

fn image_with_stem(dir: &Path, stem: &str) -> Option<PathBuf> {
    IMAGE_EXTENSIONS
        .iter()
        .map(|e| dir.join(format!("{stem}.{e}")))
        .find(|p| p.is_file())
}

/// One reference/target pair of a scene.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSpec {
    pub scene: String,
    pub target: usize,
    pub reference: PathBuf,
    pub image: PathBuf,
    pub homography: PathBuf,
}

/// Scene directories in name order, each with its reference and targets
/// `2, 3, ..` in index order. Targets stop at the first missing image.
pub fn discover(root: &Path) -> Result<Vec<PairSpec>> {
    let mut scenes: Vec<PathBuf> = fs::read_dir(root)
        .with_context(|| format!("reading {}", root.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    scenes.sort();
    let mut pairs = Vec::new();
    for dir in scenes {
        let Some(reference) = image_with_stem(&dir, "1") else {
            continue;
        };
        let scene = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut target = 2;
        while let Some(image) = image_with_stem(&dir, &target.to_string()) {
            pairs.push(PairSpec {
                scene: scene.clone(),
                target,
                reference: reference.clone(),
                image,
                homography: dir.join(format!("H_1_{target}")),
            });
            target += 1;
        }
    }
    Ok(pairs)
}

/// Every image file directly inside `dir`, in name order.
pub fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    Ok(files)
}
