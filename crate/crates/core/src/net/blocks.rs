//! Residual U-Net blocks with attention, and the attention module itself.

use crate::autograd::{Mode, ReduceAxis, RunningStats, Tape, Var};
use crate::error::{Error, Result};
use crate::net::config::{NetworkConfig, REDUCTION, SPATIAL_KERNEL};
use crate::net::{ConvParams, NormParams};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// 2x average pooling.
    Down,
    /// 2x bilinear upsampling followed by concatenation with the skip.
    Up,
}

/// Parameter indices of one attention module.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CbamParams {
    /// `(C / 16) x C`, no bias.
    pub mlp1: usize,
    /// `C x (C / 16)`, no bias.
    pub mlp2: usize,
    /// `1 x 2 x 7 x 7`, no bias.
    pub spatial: usize,
}

/// Parameter indices of one residual block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RubaParams {
    pub direction: Direction,
    /// Bias-free 1x1 convolution on the main path.
    pub align: usize,
    /// Three pre-activation stages: batch norm, GELU, `K x K` convolution.
    pub stages: [(NormParams, ConvParams); 3],
    pub cbam: CbamParams,
    pub in_ch: usize,
    pub out_ch: usize,
}

pub(crate) struct Ctx<'a> {
    pub cfg: &'a NetworkConfig,
    pub params: &'a [Var],
}

/// Channel attention followed by spatial attention:
/// `F' = Mc(F) * F`, `F'' = Ms(F') * F'`.
pub fn cbam<T: Real>(tape: &mut Tape<T>, params: &[Var], p: &CbamParams, f: Var) -> Result<Var> {
    let c = tape.shape(f)[1];
    if !c.is_multiple_of(REDUCTION) {
        return Err(Error::Config(format!(
            "attention needs channels divisible by {REDUCTION}, got {c}"
        )));
    }
    let (avg, max) = tape.reduce_stats(f, ReduceAxis::Spatial)?;
    let mlp = |tape: &mut Tape<T>, x: Var| -> Result<Var> {
        let h = tape.linear(x, params[p.mlp1], None)?;
        let h = tape.gelu(h);
        tape.linear(h, params[p.mlp2], None)
    };
    let a = mlp(tape, avg)?;
    let m = mlp(tape, max)?;
    let logits = tape.add(a, m)?;
    let channel_gate = tape.sigmoid(logits);
    let f1 = tape.channel_gate(f, channel_gate)?;

    let (cavg, cmax) = tape.reduce_stats(f1, ReduceAxis::Channel)?;
    let pooled = tape.concat_channels(cavg, cmax)?;
    let logits = tape.conv2d(pooled, params[p.spatial], None, SPATIAL_KERNEL / 2)?;
    let spatial_gate = tape.sigmoid(logits);
    tape.spatial_gate(f1, spatial_gate)
}

pub(crate) fn ruba<T: Real>(
    tape: &mut Tape<T>,
    ctx: &Ctx<'_>,
    block: &RubaParams,
    input: Var,
    skip: Option<Var>,
    stats: &mut [RunningStats<T>],
    mode: Mode,
) -> Result<Var> {
    let params = ctx.params;
    let joined = match (block.direction, skip) {
        (Direction::Down, None) => tape.avg_pool2(input)?,
        (Direction::Down, Some(_)) => {
            return Err(Error::Contract("encoder blocks take no skip tensor".into()));
        }
        (Direction::Up, None) => {
            return Err(Error::Contract("decoder block requires a skip tensor".into()));
        }
        (Direction::Up, Some(s)) => {
            let up = tape.upsample_bilinear2(input)?;
            tape.concat_channels(up, s)?
        }
    };
    let main = tape.conv2d(joined, params[block.align], None, 0)?;
    if !ctx.cfg.use_residual {
        return Ok(main);
    }
    let mut r = joined;
    for (norm, conv) in &block.stages {
        r = tape.batch_norm(r, params[norm.scale], params[norm.shift], &mut stats[norm.stats], mode)?;
        r = tape.gelu(r);
        r = tape.conv2d(r, params[conv.weight], conv.bias.map(|b| params[b]), ctx.cfg.k / 2)?;
    }
    if ctx.cfg.use_attention {
        r = cbam(tape, params, &block.cbam, r)?;
    }
    tape.add(main, r)
}
