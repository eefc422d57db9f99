use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DESCRIPTOR_DIM: usize = 128;
/// Channel-attention MLP reduction ratio.
pub const REDUCTION: usize = 16;
/// Spatial-attention kernel size, independent of the network's `k`.
pub const SPATIAL_KERNEL: usize = 7;
/// Number of 2x pooling levels; inputs must be multiples of `2^LEVELS`.
pub const LEVELS: usize = 4;
pub const SIZE_MULTIPLE: usize = 1 << LEVELS;

/// Default widths (stem, then the four encoder levels).
///
/// Produced by `cargo run -p sandesc --example width_search`: the cheapest
/// non-decreasing multiple-of-16 ladder (each level at most 3x the previous)
/// whose parameter count lies within 3% of 2.4M.
pub const DEFAULT_WIDTHS: [usize; 5] = [16, 16, 32, 64, 144];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub k: usize,
    pub widths: [usize; 5],
    pub descriptor_dim: usize,
    pub use_attention: bool,
    pub use_residual: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            k: 5,
            widths: DEFAULT_WIDTHS,
            descriptor_dim: DESCRIPTOR_DIM,
            use_attention: true,
            use_residual: true,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel size k must be odd, got {}", self.k)));
        }
        if self.descriptor_dim != DESCRIPTOR_DIM {
            return Err(Error::Config(format!(
                "descriptor_dim must be {DESCRIPTOR_DIM}, got {}",
                self.descriptor_dim
            )));
        }
        // every level's block carries CBAM, including the last decoder block
        // which outputs the stem width
        for (i, &w) in self.widths.iter().enumerate() {
            if w == 0 || w % REDUCTION != 0 {
                return Err(Error::Config(format!(
                    "width {i} = {w} must be a positive multiple of {REDUCTION}"
                )));
            }
        }
        Ok(())
    }

    /// `(in, out)` channels of the four encoder blocks.
    pub fn down_channels(&self) -> [(usize, usize); 4] {
        let w = self.widths;
        [(w[0], w[1]), (w[1], w[2]), (w[2], w[3]), (w[3], w[4])]
    }

    /// `(in, out)` channels of the four decoder blocks, deepest first; the
    /// input count includes the concatenated skip.
    pub fn up_channels(&self) -> [(usize, usize); 4] {
        let w = self.widths;
        [
            (w[4] + w[3], w[3]),
            (w[3] + w[2], w[2]),
            (w[2] + w[1], w[1]),
            (w[1] + w[0], w[0]),
        ]
    }
}

/// Closed-form parameter count of the assembled network.
pub fn count_params(cfg: &NetworkConfig) -> usize {
    let kk = cfg.k * cfg.k;
    let block = |cin: usize, cout: usize| {
        let align = cin * cout;
        let stage1 = 2 * cin + cin * cout * kk + cout;
        let stage23 = 2 * (2 * cout + cout * cout * kk + cout);
        let cbam = 2 * cout * (cout / REDUCTION) + 2 * SPATIAL_KERNEL * SPATIAL_KERNEL;
        align + stage1 + stage23 + cbam
    };
    let w0 = cfg.widths[0];
    let stem = 3 * w0 * kk + w0;
    let head = w0 * cfg.descriptor_dim + cfg.descriptor_dim;
    let blocks: usize = cfg
        .down_channels()
        .iter()
        .chain(cfg.up_channels().iter())
        .map(|&(i, o)| block(i, o))
        .sum();
    stem + blocks + head
}

/// Multiply-accumulates of one forward pass over a `size x size` image,
/// counting convolutions and the attention MLPs.
pub fn forward_macs(cfg: &NetworkConfig, size: usize) -> usize {
    let kk = cfg.k * cfg.k;
    let area = |level: usize| (size >> level) * (size >> level);
    let block = |cin: usize, cout: usize| {
        cin * cout + cin * cout * kk + 2 * cout * cout * kk + 2 * SPATIAL_KERNEL * SPATIAL_KERNEL
    };
    let mut macs = (3 * cfg.widths[0] * kk + cfg.widths[0] * cfg.descriptor_dim) * area(0);
    for (i, &(cin, cout)) in cfg.down_channels().iter().enumerate() {
        macs += block(cin, cout) * area(i + 1);
    }
    for (j, &(cin, cout)) in cfg.up_channels().iter().enumerate() {
        macs += block(cin, cout) * area(3 - j);
    }
    macs
}

/// Searches width ladders for the cheapest one whose parameter count is
/// within `tolerance` (relative) of `target`.
///
/// Candidates are non-decreasing multiples of 16 up to `max_width`, each
/// level at most three times the previous one; cost is [`forward_macs`] at
/// `size`.
pub fn search_widths(target: usize, tolerance: f64, max_width: usize, size: usize) -> Option<([usize; 5], usize)> {
    let options: Vec<usize> = (1..=max_width / REDUCTION).map(|m| m * REDUCTION).collect();
    let mut best: Option<([usize; 5], usize, usize)> = None;
    let mut widths = [0usize; 5];
    fn rec(
        level: usize,
        widths: &mut [usize; 5],
        options: &[usize],
        target: usize,
        tolerance: f64,
        size: usize,
        best: &mut Option<([usize; 5], usize, usize)>,
    ) {
        if level == 5 {
            let cfg = NetworkConfig {
                widths: *widths,
                ..NetworkConfig::default()
            };
            let n = count_params(&cfg);
            if (n as f64 - target as f64).abs() <= tolerance * target as f64 {
                let cost = forward_macs(&cfg, size);
                if best.is_none_or(|(_, _, c)| cost < c) {
                    *best = Some((*widths, n, cost));
                }
            }
            return;
        }
        for &w in options {
            if level > 0 && (w < widths[level - 1] || w > 3 * widths[level - 1]) {
                continue;
            }
            widths[level] = w;
            rec(level + 1, widths, options, target, tolerance, size, best);
        }
    }
    rec(0, &mut widths, &options, target, tolerance, size, &mut best);
    best.map(|(w, n, _)| (w, n))
}
