use serde::{Deserialize, Serialize};

use super::Keypoint;
use crate::error::{Error, Result};

/// Responses at or below this are treated as flat.
const RESPONSE_FLOOR: f64 = 1e-8;
const MIN_SIDE: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarrisConfig {
    pub k: f64,
    pub top_n: usize,
    pub nms_radius: usize,
}

impl Default for HarrisConfig {
    fn default() -> Self {
        HarrisConfig {
            k: 0.04,
            top_n: 512,
            nms_radius: 2,
        }
    }
}

/// Regular grid with spacing `stride`, offset by half a cell, row-major.
pub fn grid_keypoints(width: usize, height: usize, stride: usize) -> Vec<Keypoint> {
    let stride = stride.max(1);
    let off = stride / 2;
    let mut out = Vec::new();
    for y in (off..height).step_by(stride) {
        for x in (off..width).step_by(stride) {
            out.push(Keypoint::new(x as f64, y as f64));
        }
    }
    out
}

fn at(img: &[f64], w: usize, h: usize, x: isize, y: isize) -> f64 {
    let x = x.clamp(0, w as isize - 1) as usize;
    let y = y.clamp(0, h as isize - 1) as usize;
    img[y * w + x]
}

/// 3x3 binomial blur with replicated borders.
fn smooth(img: &[f64], w: usize, h: usize) -> Vec<f64> {
    const K: [f64; 3] = [0.25, 0.5, 0.25];
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (0..3)
                .map(|i| K[i] * at(img, w, h, x as isize + i as isize - 1, y as isize))
                .sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (0..3)
                .map(|i| K[i] * at(&tmp, w, h, x as isize, y as isize + i as isize - 1))
                .sum();
        }
    }
    out
}

/// Harris response `det(M) - k trace(M)^2` of the smoothed structure tensor.
pub fn harris_response(gray: &[f32], width: usize, height: usize, k: f64) -> Vec<f64> {
    let img: Vec<f64> = gray.iter().map(|&v| v as f64).collect();
    let (w, h) = (width, height);
    let mut ixx = vec![0.0; w * h];
    let mut iyy = vec![0.0; w * h];
    let mut ixy = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let p = |dx: isize, dy: isize| at(&img, w, h, x + dx, y + dy);
            let gx = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
            let gy = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
            let i = y as usize * w + x as usize;
            ixx[i] = gx * gx;
            iyy[i] = gy * gy;
            ixy[i] = gx * gy;
        }
    }
    let (sxx, syy, sxy) = (smooth(&ixx, w, h), smooth(&iyy, w, h), smooth(&ixy, w, h));
    (0..w * h)
        .map(|i| {
            let tr = sxx[i] + syy[i];
            sxx[i] * syy[i] - sxy[i] * sxy[i] - k * tr * tr
        })
        .collect()
}

fn parabola_offset(l: f64, c: f64, r: f64) -> f64 {
    let denom = l - 2.0 * c + r;
    if denom >= 0.0 {
        0.0
    } else {
        (0.5 * (l - r) / denom).clamp(-0.5, 0.5)
    }
}

/// Harris corners: non-maximum suppression within `nms_radius`, the `top_n`
/// strongest kept, each refined to subpixel accuracy by a 1-D quadratic fit
/// along each axis. Ties keep the earlier pixel in raster order.
pub fn harris_keypoints(gray: &[f32], width: usize, height: usize, cfg: &HarrisConfig) -> Result<Vec<Keypoint>> {
    if gray.len() != width * height {
        return Err(Error::Dimension {
            op: "harris_keypoints",
            axis: "pixel count",
            expected: width * height,
            found: gray.len(),
        });
    }
    if width < MIN_SIDE || height < MIN_SIDE {
        return Err(Error::Contract(format!(
            "corner detection needs at least {MIN_SIDE}x{MIN_SIDE} pixels, got {width}x{height}"
        )));
    }
    let (w, h) = (width, height);
    let resp = harris_response(gray, w, h, cfg.k);
    let r = cfg.nms_radius.max(1) as isize;
    let margin = 2;
    let mut found = Vec::new();
    for y in margin..h - margin {
        for x in margin..w - margin {
            let c = resp[y * w + x];
            if c <= RESPONSE_FLOOR {
                continue;
            }
            let mut is_max = true;
            'win: for dy in -r..=r {
                for dx in -r..=r {
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if (dx == 0 && dy == 0) || nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let o = resp[ny as usize * w + nx as usize];
                    let earlier = (dy, dx) < (0, 0);
                    if o > c || (earlier && o == c) {
                        is_max = false;
                        break 'win;
                    }
                }
            }
            if is_max {
                found.push((c, y * w + x));
            }
        }
    }
    found.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    found.truncate(cfg.top_n);
    Ok(found
        .into_iter()
        .map(|(score, i)| {
            let (x, y) = (i % w, i / w);
            let dx = parabola_offset(resp[i - 1], score, resp[i + 1]);
            let dy = parabola_offset(resp[i - w], score, resp[i + w]);
            Keypoint {
                x: x as f64 + dx,
                y: y as f64 + dy,
                score,
            }
        })
        .collect())
}
