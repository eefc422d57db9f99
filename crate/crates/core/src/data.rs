//! Procedural texture sources, synthetic homography pairs and
//! round-trip-consistent grid correspondences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dlt_homography, grid_keypoints, Homography, Keypoint, Point};
use crate::image::Image;

/// Attempts before falling back to the identity warp.
pub const MAX_WARP_TRIES: usize = 64;
/// Smallest accepted determinant of a sampled warp.
pub const MIN_WARP_DET: f64 = 1e-8;

/// Mixes `(base, stream, index)` into an independent seed (SplitMix64 finaliser).
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    for _ in 0..2 {
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Multi-octave value noise in `[0, 1]`.
fn value_noise(size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = vec![0.0; size * size];
    let mut amp = 0.5;
    let mut total = 0.0;
    for cell in [48usize, 24, 12, 6, 3] {
        let n = size / cell + 2;
        let lattice: Vec<f64> = (0..n * n).map(|_| rng.random()).collect();
        for y in 0..size {
            let (gy, fy) = (y / cell, smoothstep((y % cell) as f64 / cell as f64));
            for x in 0..size {
                let (gx, fx) = (x / cell, smoothstep((x % cell) as f64 / cell as f64));
                let l = |i: usize, j: usize| lattice[j * n + i];
                let top = l(gx, gy) * (1.0 - fx) + l(gx + 1, gy) * fx;
                let bottom = l(gx, gy + 1) * (1.0 - fx) + l(gx + 1, gy + 1) * fx;
                out[y * size + x] += amp * (top * (1.0 - fy) + bottom * fy);
            }
        }
        total += amp;
        amp *= 0.6;
    }
    out.iter_mut().for_each(|v| *v /= total);
    out
}

enum Shape {
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Disc { cx: f64, cy: f64, r: f64 },
    Bar { a: Point, b: Point, half: f64 },
    Ring { cx: f64, cy: f64, r: f64, half: f64 },
}

impl Shape {
    fn random(size: f64, rng: &mut ChaCha8Rng) -> Shape {
        let p = |rng: &mut ChaCha8Rng| (rng.random_range(0.0..size), rng.random_range(0.0..size));
        match rng.random_range(0..4) {
            0 => {
                let (x, y) = p(rng);
                let (w, h) = (rng.random_range(4.0..size / 4.0), rng.random_range(4.0..size / 4.0));
                Shape::Rect {
                    x0: x,
                    y0: y,
                    x1: x + w,
                    y1: y + h,
                }
            }
            1 => {
                let (cx, cy) = p(rng);
                Shape::Disc {
                    cx,
                    cy,
                    r: rng.random_range(3.0..size / 8.0),
                }
            }
            2 => Shape::Bar {
                a: p(rng),
                b: p(rng),
                half: rng.random_range(0.8..3.0),
            },
            _ => {
                let (cx, cy) = p(rng);
                Shape::Ring {
                    cx,
                    cy,
                    r: rng.random_range(5.0..size / 6.0),
                    half: rng.random_range(1.0..3.0),
                }
            }
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            Shape::Disc { cx, cy, r } => (x - cx).hypot(y - cy) <= r,
            Shape::Bar { a, b, half } => {
                let (dx, dy) = (b.0 - a.0, b.1 - a.1);
                let len2 = (dx * dx + dy * dy).max(1e-9);
                let t = (((x - a.0) * dx + (y - a.1) * dy) / len2).clamp(0.0, 1.0);
                (x - a.0 - t * dx).hypot(y - a.1 - t * dy) <= half
            }
            Shape::Ring { cx, cy, r, half } => ((x - cx).hypot(y - cy) - r).abs() <= half,
        }
    }
}

/// Deterministic RGB texture: coloured value noise overlaid with random
/// rectangles, discs, bars and rings.
pub fn procedural_texture(size: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<Vec<f64>> = (0..3).map(|_| value_noise(size, &mut rng)).collect();
    let mix: Vec<[f64; 3]> = (0..3).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    let mut planes: Vec<Vec<f64>> = (0..3)
        .map(|c| {
            (0..size * size)
                .map(|i| {
                    let v: f64 = (0..3).map(|k| mix[c][k] * noise[k][i]).sum::<f64>();
                    v / mix[c].iter().sum::<f64>().max(1e-6)
                })
                .collect()
        })
        .collect();
    let count = rng.random_range(size / 6..size / 3);
    for _ in 0..count {
        let shape = Shape::random(size as f64, &mut rng);
        let colour: [f64; 3] = [rng.random(), rng.random(), rng.random()];
        let alpha = rng.random_range(0.6..1.0);
        for y in 0..size {
            for x in 0..size {
                if shape.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    for c in 0..3 {
                        let v = &mut planes[c][y * size + x];
                        *v = (1.0 - alpha) * *v + alpha * colour[c];
                    }
                }
            }
        }
    }
    Image::from_fn(3, size, size, |c, x, y| planes[c][y * size + x].clamp(0.0, 1.0) as f32)
}

/// Ranges of the random view change between the two images of a pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarpConfig {
    /// Maximum absolute in-plane rotation, degrees.
    pub rotation_range: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Maximum translation as a fraction of the crop.
    pub translation_frac: f64,
    /// Maximum corner displacement of the perspective component, fraction of the crop.
    pub perspective_frac: f64,
    /// Maximum brightness offset and contrast change.
    pub photometric: f64,
}

impl Default for WarpConfig {
    fn default() -> Self {
        WarpConfig {
            rotation_range: 30.0,
            scale_min: 0.8,
            scale_max: 1.25,
            translation_frac: 0.1,
            perspective_frac: 0.05,
            photometric: 0.1,
        }
    }
}

/// Two views of a source and the map from view-1 to view-2 pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticPair {
    pub image1: Image,
    pub image2: Image,
    pub h_gt: Homography,
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn sample_view_change(crop: usize, cfg: &WarpConfig, rng: &mut impl Rng) -> Result<Homography> {
    let s = crop as f64;
    let c = (s - 1.0) / 2.0;
    let angle = uniform(rng, -cfg.rotation_range, cfg.rotation_range).to_radians();
    let scale = uniform(rng, cfg.scale_min, cfg.scale_max);
    let t = cfg.translation_frac * s;
    let (tx, ty) = (uniform(rng, -t, t), uniform(rng, -t, t));
    let rs = Homography::rotation_about((c, c), angle, scale)?;
    let moved = Homography::translation(tx, ty).after(&rs)?;
    if cfg.perspective_frac <= 0.0 {
        return Ok(moved);
    }
    let d = cfg.perspective_frac * s;
    let corners = [(0.0, 0.0), (s - 1.0, 0.0), (s - 1.0, s - 1.0), (0.0, s - 1.0)];
    let shifted: Vec<Point> = corners
        .iter()
        .map(|&(x, y)| (x + uniform(rng, -d, d), y + uniform(rng, -d, d)))
        .collect();
    dlt_homography(&corners, &shifted)?.after(&moved)
}

fn jitter(image: &mut Image, amount: f64, rng: &mut impl Rng) {
    let brightness = uniform(rng, -amount, amount) as f32;
    let contrast = uniform(rng, 1.0 - amount, 1.0 + amount) as f32;
    if amount > 0.0 {
        for v in image.data_mut() {
            *v = ((*v - 0.5) * contrast + 0.5 + brightness).clamp(0.0, 1.0);
        }
    }
}

/// Samples a view change whose view-2 corners all pull back inside the
/// `width x height` source when view 1 sits at `origin`; identity if no
/// candidate is accepted within [`MAX_WARP_TRIES`].
fn accepted_warp(
    width: usize,
    height: usize,
    origin: &Homography,
    crop: usize,
    cfg: &WarpConfig,
    rng: &mut impl Rng,
) -> Homography {
    let last = (crop - 1) as f64;
    let view_corners = [(0.0, 0.0), (last, 0.0), (last, last), (0.0, last)];
    let inside = |p: Point| p.0 >= 0.0 && p.1 >= 0.0 && p.0 <= (width - 1) as f64 && p.1 <= (height - 1) as f64;
    for _ in 0..MAX_WARP_TRIES {
        let Ok(cand) = sample_view_change(crop, cfg, rng) else {
            continue;
        };
        if cand.matrix().determinant().abs() < MIN_WARP_DET {
            continue;
        }
        let Ok(pull) = cand.inverse().and_then(|inv| origin.after(&inv)) else {
            continue;
        };
        if view_corners.iter().all(|&q| pull.warp_point(q).is_ok_and(inside)) {
            return cand;
        }
    }
    Homography::identity()
}

fn check_source(source: &Image, crop: usize) -> Result<()> {
    let (w, h) = (source.width(), source.height());
    if crop == 0 || w < crop || h < crop {
        return Err(Error::Contract(format!(
            "source is {w}x{h}, smaller than the {crop}x{crop} crop"
        )));
    }
    Ok(())
}

/// Crops view 1 near the centre of `source` and renders view 2 through a
/// random homography whose view-2 corners all pull back inside the source.
pub fn generate_pair(source: &Image, crop: usize, cfg: &WarpConfig, rng: &mut impl Rng) -> Result<SyntheticPair> {
    check_source(source, crop)?;
    let (w, h) = (source.width(), source.height());
    let (mx, my) = ((w - crop) as f64 / 2.0, (h - crop) as f64 / 2.0);
    let ox = (mx + uniform(rng, -mx / 2.0, mx / 2.0)).round();
    let oy = (my + uniform(rng, -my / 2.0, my / 2.0)).round();
    let offset = Homography::translation(ox, oy);
    let h_gt = accepted_warp(w, h, &offset, crop, cfg, rng);
    let mut image1 = source.crop(ox as usize, oy as usize, crop, crop)?;
    let mut image2 = source.warp(&offset.after(&h_gt.inverse()?)?, crop, crop, 0.0);
    jitter(&mut image1, cfg.photometric, rng);
    jitter(&mut image2, cfg.photometric, rng);
    Ok(SyntheticPair { image1, image2, h_gt })
}

/// Top-left corner of the centred `crop x crop` window of `source`.
pub fn centre_origin(source: &Image, crop: usize) -> (usize, usize) {
    (
        source.width().saturating_sub(crop) / 2,
        source.height().saturating_sub(crop) / 2,
    )
}

/// Renders one further view of the fixed view 1 at `origin` (its top-left
/// corner in `source`). Returns the view and the map from view-1 pixels to
/// it.
pub fn generate_view(
    source: &Image,
    origin: (usize, usize),
    crop: usize,
    cfg: &WarpConfig,
    rng: &mut impl Rng,
) -> Result<(Image, Homography)> {
    check_source(source, crop)?;
    if origin.0 + crop > source.width() || origin.1 + crop > source.height() {
        return Err(Error::Contract(format!("view at {origin:?} leaves the source")));
    }
    let offset = Homography::translation(origin.0 as f64, origin.1 as f64);
    let h = accepted_warp(source.width(), source.height(), &offset, crop, cfg, rng);
    let mut view = source.warp(&offset.after(&h.inverse()?)?, crop, crop, 0.0);
    jitter(&mut view, cfg.photometric, rng);
    Ok((view, h))
}

/// Grid points of view 1 mapped to view 2 by `forward` and back by `back`,
/// kept when the landing point is inside view 2 and the round trip moves
/// them by less than `tau` pixels.
pub fn round_trip_grid(
    forward: &Homography,
    back: &Homography,
    width: usize,
    height: usize,
    stride: usize,
    tau: f64,
) -> (Vec<Keypoint>, Vec<Keypoint>) {
    let inside = |p: Point| p.0 >= 0.0 && p.1 >= 0.0 && p.0 <= (width - 1) as f64 && p.1 <= (height - 1) as f64;
    let mut k1 = Vec::new();
    let mut k2 = Vec::new();
    for p in grid_keypoints(width, height, stride) {
        let Ok(q) = forward.warp_point(p.point()) else { continue };
        let Ok(r) = back.warp_point(q) else { continue };
        if inside(q) && inside(r) && crate::geometry::distance(r, p.point()) < tau {
            k1.push(p);
            k2.push(Keypoint::new(q.0, q.1));
        }
    }
    (k1, k2)
}

/// Ground-truth correspondences of a pair from its grid.
pub fn da_keypoints(pair: &SyntheticPair, grid_stride: usize, tau: f64) -> Result<(Vec<Keypoint>, Vec<Keypoint>)> {
    let back = pair.h_gt.inverse()?;
    Ok(round_trip_grid(
        &pair.h_gt,
        &back,
        pair.image1.width(),
        pair.image1.height(),
        grid_stride,
        tau,
    ))
}
