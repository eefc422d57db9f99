//! The descriptor network: a four-level residual U-Net whose blocks carry
//! channel-then-spatial attention, ending in a per-pixel L2-normalised
//! 128-channel descriptor volume.

mod blocks;
pub mod config;
mod volume;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use blocks::{CbamParams, Direction, RubaParams};
pub use config::{count_params, NetworkConfig, DESCRIPTOR_DIM, SIZE_MULTIPLE};
pub use volume::{sample_descriptors_on_tape, DescriptorVolume};

use crate::autograd::{Mode, RunningStats, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Guard used when normalising descriptors.
pub const NORM_EPS: f64 = 1e-8;

/// A learnable tensor together with its AdamW moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub first_moment: Vec<T>,
    pub second_moment: Vec<T>,
}

impl<T: Real> Parameter<T> {
    pub fn new(name: impl Into<String>, tensor: Tensor<T>) -> Self {
        let n = tensor.numel();
        Parameter {
            name: name.into(),
            tensor,
            first_moment: vec![T::zero(); n],
            second_moment: vec![T::zero(); n],
        }
    }

    pub fn cast<U: Real>(&self) -> Parameter<U> {
        let c = |v: &[T]| v.iter().map(|&x| U::lit(x.as_f64())).collect();
        Parameter {
            name: self.name.clone(),
            tensor: self.tensor.cast(),
            first_moment: c(&self.first_moment),
            second_moment: c(&self.second_moment),
        }
    }
}

/// Index of a convolution's weight and optional bias in [`Model::params`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvParams {
    pub weight: usize,
    pub bias: Option<usize>,
}

/// Indices of a batch-norm layer's affine parameters and running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NormParams {
    pub scale: usize,
    pub shift: usize,
    pub stats: usize,
}

/// Built network: configuration, flat parameter list, batch-norm buffers and
/// the structure indexing into them.
#[derive(Clone, Debug)]
pub struct Model<T> {
    config: NetworkConfig,
    pub params: Vec<Parameter<T>>,
    pub stats: Vec<RunningStats<T>>,
    stem: ConvParams,
    down: Vec<RubaParams>,
    up: Vec<RubaParams>,
    head: ConvParams,
}

struct Builder<T> {
    params: Vec<Parameter<T>>,
    stats: Vec<RunningStats<T>>,
    rng: ChaCha8Rng,
}

impl<T: Real> Builder<T> {
    /// Fan-in scaled normal initialisation, `std = sqrt(2 / fan_in)`.
    fn weight(&mut self, name: String, shape: &[usize]) -> usize {
        let fan_in: usize = shape[1..].iter().product();
        let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let data = (0..shape.iter().product())
            .map(|_| T::lit(dist.sample(&mut self.rng)))
            .collect();
        self.push(name, Tensor::new(shape, data).expect("shape"))
    }

    fn push(&mut self, name: String, tensor: Tensor<T>) -> usize {
        self.params.push(Parameter::new(name, tensor));
        self.params.len() - 1
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, bias: bool) -> ConvParams {
        let weight = self.weight(format!("{name}.weight"), &[cout, cin, k, k]);
        let bias = bias.then(|| self.push(format!("{name}.bias"), Tensor::zeros([cout])));
        ConvParams { weight, bias }
    }

    fn norm(&mut self, name: &str, c: usize) -> NormParams {
        let scale = self.push(format!("{name}.scale"), Tensor::full([c], T::one()));
        let shift = self.push(format!("{name}.shift"), Tensor::zeros([c]));
        self.stats.push(RunningStats::new(c));
        NormParams {
            scale,
            shift,
            stats: self.stats.len() - 1,
        }
    }

    fn ruba(&mut self, name: &str, cin: usize, cout: usize, k: usize, direction: Direction) -> RubaParams {
        let align = self.weight(format!("{name}.align.weight"), &[cout, cin, 1, 1]);
        let stage = |b: &mut Self, i: usize, c: usize| {
            let norm = b.norm(&format!("{name}.stage{i}.bn"), c);
            let conv = b.conv(&format!("{name}.stage{i}.conv"), c, cout, k, true);
            (norm, conv)
        };
        let stages = [stage(self, 1, cin), stage(self, 2, cout), stage(self, 3, cout)];
        let hidden = cout / config::REDUCTION;
        let cbam = CbamParams {
            mlp1: self.weight(format!("{name}.cbam.mlp1.weight"), &[hidden, cout]),
            mlp2: self.weight(format!("{name}.cbam.mlp2.weight"), &[cout, hidden]),
            spatial: self.weight(
                format!("{name}.cbam.spatial.weight"),
                &[1, 2, config::SPATIAL_KERNEL, config::SPATIAL_KERNEL],
            ),
        };
        RubaParams {
            direction,
            align,
            stages,
            cbam,
            in_ch: cin,
            out_ch: cout,
        }
    }
}

/// Builds the network with deterministic initial weights for `seed`.
pub fn build_network<T: Real>(cfg: &NetworkConfig, seed: u64) -> Result<Model<T>> {
    cfg.validate()?;
    let mut b = Builder {
        params: Vec::new(),
        stats: Vec::new(),
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let stem = b.conv("stem", 3, cfg.widths[0], cfg.k, true);
    let down = cfg
        .down_channels()
        .iter()
        .enumerate()
        .map(|(i, &(cin, cout))| b.ruba(&format!("down{i}"), cin, cout, cfg.k, Direction::Down))
        .collect();
    let up = cfg
        .up_channels()
        .iter()
        .enumerate()
        .map(|(i, &(cin, cout))| b.ruba(&format!("up{i}"), cin, cout, cfg.k, Direction::Up))
        .collect();
    let head = b.conv("head", cfg.widths[0], cfg.descriptor_dim, 1, true);
    Ok(Model {
        config: cfg.clone(),
        params: b.params,
        stats: b.stats,
        stem,
        down,
        up,
        head,
    })
}

impl<T: Real> Model<T> {
    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    /// Total number of learnable scalars.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn down_blocks(&self) -> &[RubaParams] {
        &self.down
    }

    pub fn up_blocks(&self) -> &[RubaParams] {
        &self.up
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.iter().map(Parameter::cast).collect(),
            stats: self.stats.iter().map(RunningStats::cast).collect(),
            stem: self.stem,
            down: self.down.clone(),
            up: self.up.clone(),
            head: self.head,
        }
    }

    /// Registers every parameter as a differentiable leaf, in order.
    pub fn register(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(p.tensor.clone())).collect()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, h, w] = match *shape {
            [b, c, h, w] => [b, c, h, w],
            _ => {
                return Err(Error::Rank {
                    op: "forward",
                    expected: 4,
                    found: shape.to_vec(),
                })
            }
        };
        if c != 3 {
            return Err(Error::Dimension {
                op: "forward",
                axis: "channel",
                expected: 3,
                found: c,
            });
        }
        if h == 0 || w == 0 || h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 {
            return Err(Error::Contract(format!(
                "input is {h}x{w}; pad both sides to a multiple of {SIZE_MULTIPLE} before the forward pass"
            )));
        }
        Ok(())
    }

    /// Records the forward pass of `images` (`B x 3 x H x W`) using the
    /// parameter leaves `params` (as returned by [`Model::register`]).
    ///
    /// Returns the `B x 128 x H x W` descriptor volume.
    pub fn forward_with(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        images: Var,
        stats: &mut [RunningStats<T>],
        mode: Mode,
    ) -> Result<Var> {
        self.check_input(tape.shape(images))?;
        if params.len() != self.params.len() || stats.len() != 3 * (self.down.len() + self.up.len()) {
            return Err(Error::Contract("parameter list does not belong to this model".into()));
        }
        let ctx = blocks::Ctx {
            cfg: &self.config,
            params,
        };
        let mut x = tape.conv2d(
            images,
            params[self.stem.weight],
            self.stem.bias.map(|b| params[b]),
            self.config.k / 2,
        )?;
        let mut skips = vec![x];
        for block in &self.down {
            x = blocks::ruba(tape, &ctx, block, x, None, stats, mode)?;
            skips.push(x);
        }
        skips.pop();
        for block in &self.up {
            let skip = skips.pop().expect("one skip per level");
            x = blocks::ruba(tape, &ctx, block, x, Some(skip), stats, mode)?;
        }
        let y = tape.conv2d(x, params[self.head.weight], self.head.bias.map(|b| params[b]), 0)?;
        tape.l2_normalize_channels(y, T::lit(NORM_EPS))
    }

    /// Training-mode forward on a recording tape; batch-norm running
    /// statistics are updated in place. Returns `(volume, parameter leaves)`.
    pub fn forward_train(&mut self, tape: &mut Tape<T>, images: Tensor<T>) -> Result<(Var, Vec<Var>)> {
        let params = self.register(tape);
        let x = tape.constant(images);
        let mut stats = std::mem::take(&mut self.stats);
        let out = self.forward_with(tape, &params, x, &mut stats, Mode::Train);
        self.stats = stats;
        Ok((out?, params))
    }

    /// Inference on a batch (`B x 3 x H x W`) using running statistics.
    pub fn forward_eval_batch(&self, images: Tensor<T>) -> Result<Vec<DescriptorVolume>> {
        let mut tape = Tape::inference();
        let params: Vec<Var> = self.params.iter().map(|p| tape.constant(p.tensor.clone())).collect();
        let x = tape.constant(images);
        let mut stats = self.stats.clone();
        let y = self.forward_with(&mut tape, &params, x, &mut stats, Mode::Eval)?;
        let vol = tape.take_value(y);
        DescriptorVolume::split_batch(&vol)
    }

    /// Descriptor volume of one `3 x H x W` image.
    ///
    /// `Mode::Eval` uses running statistics and leaves the model untouched;
    /// `Mode::Train` normalises with the image's own statistics and updates
    /// the running statistics.
    pub fn forward(&mut self, image: &Tensor<T>, mode: Mode) -> Result<DescriptorVolume> {
        let batched = match *image.shape() {
            [c, h, w] => image.clone().reshaped([1, c, h, w])?,
            _ => {
                return Err(Error::Rank {
                    op: "forward",
                    expected: 3,
                    found: image.shape().to_vec(),
                })
            }
        };
        match mode {
            Mode::Eval => Ok(self.forward_eval_batch(batched)?.remove(0)),
            Mode::Train => {
                let mut tape = Tape::inference();
                let params: Vec<Var> = self.params.iter().map(|p| tape.constant(p.tensor.clone())).collect();
                let x = tape.constant(batched);
                let mut stats = std::mem::take(&mut self.stats);
                let y = self.forward_with(&mut tape, &params, x, &mut stats, Mode::Train);
                self.stats = stats;
                let vol = tape.take_value(y?);
                Ok(DescriptorVolume::split_batch(&vol)?.remove(0))
            }
        }
    }
}

#[cfg(test)]
mod tests;
