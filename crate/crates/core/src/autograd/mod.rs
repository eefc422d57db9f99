//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every operation appends one node holding its output value and whatever
//! it needs for the reverse pass. Nodes are only ever appended, so the tape
//! order is a topological order and [`Tape::backward`] visits each node once,
//! walking the tape from the loss down to the leaves.

mod conv;
pub mod gradcheck;
pub(crate) mod kernels;

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{Real, Tensor};

use conv::ConvGeom;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-norm behaviour: batch statistics (`Train`) or running statistics (`Eval`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Axis family reduced by [`Tape::reduce_stats`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceAxis {
    /// Average and maximum over `H x W`, giving two `B x C` tensors.
    Spatial,
    /// Average and maximum over `C`, giving two `B x 1 x H x W` tensors.
    Channel,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Running mean/variance of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    pub fn cast<U: Real>(&self) -> RunningStats<U> {
        RunningStats {
            mean: self.mean.iter().map(|&x| U::lit(x.as_f64())).collect(),
            var: self.var.iter().map(|&x| U::lit(x.as_f64())).collect(),
        }
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    AvgPool2(Var),
    Upsample2(Var),
    BatchNorm {
        input: Var,
        scale: Var,
        shift: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Gelu(Var),
    Sigmoid(Var),
    Concat(Var, Var),
    L2Normalize {
        input: Var,
        eps: T,
        norms: Vec<T>,
    },
    SpatialAvg(Var),
    SpatialMax {
        input: Var,
        argmax: Vec<usize>,
    },
    ChannelAvg(Var),
    ChannelMax {
        input: Var,
        argmax: Vec<usize>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ChannelGate {
        input: Var,
        gate: Var,
    },
    SpatialGate {
        input: Var,
        gate: Var,
    },
    Sum(Var),
    Reshape(Var),
    MatmulNt(Var, Var),
    Gather {
        input: Var,
        indices: Vec<usize>,
    },
    SampleBilinear {
        input: Var,
        item: usize,
        taps: Vec<[(usize, T); 4]>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation graph plus accumulated leaf gradients.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    recording: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    /// A tape that records the graph for [`Tape::backward`].
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            recording: true,
        }
    }

    /// A tape that only evaluates values; no reverse-pass state is kept.
    pub fn inference() -> Self {
        Tape {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf created with [`Tape::param`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Moves a value out of the tape, leaving an empty tensor behind.
    pub fn take_value(&mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros([0]))
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        let rg = self.recording;
        self.push_raw(value, Op::Leaf, rg)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = self.recording && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if rg { op } else { Op::Leaf };
        self.push_raw(value, op, rg)
    }

    fn dims4(&self, v: Var, op: &'static str) -> Result<[usize; 4]> {
        self.value(v).dims4(op)
    }

    // ---------------------------------------------------------------- ops

    /// Stride-1 convolution; `padding` must be `K / 2` so the spatial size is kept.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, padding: usize) -> Result<Var> {
        const OP: &str = "conv2d";
        let [b, ci, h, w] = self.dims4(input, OP)?;
        let [co, kci, kh, kw] = self.dims4(kernel, OP)?;
        if kci != ci {
            return Err(Error::Dimension {
                op: OP,
                axis: "input channel",
                expected: kci,
                found: ci,
            });
        }
        if kh != kw {
            return Err(Error::Dimension {
                op: OP,
                axis: "kernel width",
                expected: kh,
                found: kw,
            });
        }
        if kh % 2 == 0 || padding != kh / 2 {
            return Err(Error::Contract(format!(
                "conv2d needs an odd kernel with padding K/2, got K={kh}, padding={padding}"
            )));
        }
        if let Some(bv) = bias {
            let n = self.value(bv).numel();
            if n != co {
                return Err(Error::Dimension {
                    op: OP,
                    axis: "bias",
                    expected: co,
                    found: n,
                });
            }
        }
        let geom = ConvGeom {
            batch: b,
            in_ch: ci,
            out_ch: co,
            height: h,
            width: w,
            kernel: kh,
            pad: padding,
        };
        let out = conv::forward(
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|bv| self.value(bv).data()),
            &geom,
        );
        let value = Tensor::new([b, co, h, w], out)?;
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            &inputs,
        ))
    }

    /// 2x2 mean pooling with stride 2; `H` and `W` must be even.
    pub fn avg_pool2(&mut self, input: Var) -> Result<Var> {
        const OP: &str = "avg_pool2";
        let [b, c, h, w] = self.dims4(input, OP)?;
        for (axis, n) in [("height", h), ("width", w)] {
            if n < 2 || n % 2 != 0 {
                return Err(Error::Dimension {
                    op: OP,
                    axis,
                    expected: n + n % 2,
                    found: n,
                });
            }
        }
        let out = kernels::avg_pool2(self.value(input).data(), b * c, h, w);
        let value = Tensor::new([b, c, h / 2, w / 2], out)?;
        Ok(self.push(value, Op::AvgPool2(input), &[input]))
    }

    /// Bilinear 2x upsampling with half-pixel centres and border clamping.
    pub fn upsample_bilinear2(&mut self, input: Var) -> Result<Var> {
        let [b, c, h, w] = self.dims4(input, "upsample_bilinear2")?;
        let out = kernels::upsample2(self.value(input).data(), b * c, h, w);
        let value = Tensor::new([b, c, 2 * h, 2 * w], out)?;
        Ok(self.push(value, Op::Upsample2(input), &[input]))
    }

    /// Per-channel batch normalisation over `(B, H, W)`.
    ///
    /// In [`Mode::Train`] the batch statistics are used and `stats` is moved
    /// towards them with momentum 0.1 (unbiased variance); in [`Mode::Eval`]
    /// `stats` is used as is.
    pub fn batch_norm(
        &mut self,
        input: Var,
        scale: Var,
        shift: Var,
        stats: &mut RunningStats<T>,
        mode: Mode,
    ) -> Result<Var> {
        const OP: &str = "batch_norm";
        let [b, c, h, w] = self.dims4(input, OP)?;
        for (axis, v) in [("scale", scale), ("shift", shift)] {
            let n = self.value(v).numel();
            if n != c {
                return Err(Error::Dimension {
                    op: OP,
                    axis,
                    expected: c,
                    found: n,
                });
            }
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::Dimension {
                op: OP,
                axis: "running statistics",
                expected: c,
                found: stats.mean.len(),
            });
        }
        let count = b * h * w;
        let x = self.value(input).data();
        let (mean, inv_std) = match mode {
            Mode::Train => {
                if count < 2 {
                    return Err(Error::Contract(format!(
                        "batch_norm in train mode needs at least 2 values per channel, got {count}"
                    )));
                }
                let (mean, var) = kernels::channel_moments(x, b, c, h * w);
                let momentum = BN_MOMENTUM;
                let unbias = count as f64 / (count as f64 - 1.0);
                for ch in 0..c {
                    let rm = stats.mean[ch].as_f64();
                    let rv = stats.var[ch].as_f64();
                    stats.mean[ch] = T::lit((1.0 - momentum) * rm + momentum * mean[ch]);
                    stats.var[ch] = T::lit((1.0 - momentum) * rv + momentum * var[ch] * unbias);
                }
                let inv: Vec<T> = var.iter().map(|&v| T::lit(1.0 / (v + BN_EPS).sqrt())).collect();
                (mean.into_iter().map(T::lit).collect::<Vec<T>>(), inv)
            }
            Mode::Eval => {
                let inv = stats
                    .var
                    .iter()
                    .map(|&v| T::lit(1.0 / (v.as_f64() + BN_EPS).sqrt()))
                    .collect();
                (stats.mean.clone(), inv)
            }
        };
        let out = kernels::batch_norm_apply(
            x,
            b,
            c,
            h * w,
            &mean,
            &inv_std,
            self.value(scale).data(),
            self.value(shift).data(),
        );
        let value = Tensor::new([b, c, h, w], out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                input,
                scale,
                shift,
                mean,
                inv_std,
                train: mode == Mode::Train,
            },
            &[input, scale, shift],
        ))
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let value = Tensor::new(x.shape(), x.data().iter().map(|&v| kernels::gelu(v)).collect()).expect("same shape");
        self.push(value, Op::Gelu(input), &[input])
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let value =
            Tensor::new(x.shape(), x.data().iter().map(|&v| kernels::sigmoid(v)).collect()).expect("same shape");
        self.push(value, Op::Sigmoid(input), &[input])
    }

    /// Stacks `a` then `b` along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: &str = "concat_channels";
        let [ba, ca, ha, wa] = self.dims4(a, OP)?;
        let [bb, cb, hb, wb] = self.dims4(b, OP)?;
        for (axis, x, y) in [("batch", ba, bb), ("height", ha, hb), ("width", wa, wb)] {
            if x != y {
                return Err(Error::Dimension {
                    op: OP,
                    axis,
                    expected: x,
                    found: y,
                });
            }
        }
        let hw = ha * wa;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(ba * (ca + cb) * hw);
        for i in 0..ba {
            out.extend_from_slice(&da[i * ca * hw..(i + 1) * ca * hw]);
            out.extend_from_slice(&db[i * cb * hw..(i + 1) * cb * hw]);
        }
        let value = Tensor::new([ba, ca + cb, ha, wa], out)?;
        Ok(self.push(value, Op::Concat(a, b), &[a, b]))
    }

    /// Divides every pixel's channel vector by `max(||v||, eps)`.
    pub fn l2_normalize_channels(&mut self, input: Var, eps: T) -> Result<Var> {
        let [b, c, h, w] = self.dims4(input, "l2_normalize_channels")?;
        let (out, norms) = kernels::l2_normalize(self.value(input).data(), b, c, h * w, eps);
        let value = Tensor::new([b, c, h, w], out)?;
        Ok(self.push(value, Op::L2Normalize { input, eps, norms }, &[input]))
    }

    /// Average and maximum along `axis`; maxima route gradients to the first
    /// attaining element.
    pub fn reduce_stats(&mut self, input: Var, axis: ReduceAxis) -> Result<(Var, Var)> {
        let [b, c, h, w] = self.dims4(input, "reduce_stats")?;
        let x = self.value(input).data();
        match axis {
            ReduceAxis::Spatial => {
                let (avg, max, argmax) = kernels::spatial_avg_max(x, b * c, h * w);
                let avg = Tensor::new([b, c], avg)?;
                let max = Tensor::new([b, c], max)?;
                let va = self.push(avg, Op::SpatialAvg(input), &[input]);
                let vm = self.push(max, Op::SpatialMax { input, argmax }, &[input]);
                Ok((va, vm))
            }
            ReduceAxis::Channel => {
                let (avg, max, argmax) = kernels::channel_avg_max(x, b, c, h * w);
                let avg = Tensor::new([b, 1, h, w], avg)?;
                let max = Tensor::new([b, 1, h, w], max)?;
                let va = self.push(avg, Op::ChannelAvg(input), &[input]);
                let vm = self.push(max, Op::ChannelMax { input, argmax }, &[input]);
                Ok((va, vm))
            }
        }
    }

    /// `input (B x C_in) * weight^T (C_in x C_out) + bias`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        const OP: &str = "linear";
        let [b, cin] = self.value(input).dims2(OP)?;
        let [cout, wcin] = self.value(weight).dims2(OP)?;
        if wcin != cin {
            return Err(Error::Dimension {
                op: OP,
                axis: "inner",
                expected: wcin,
                found: cin,
            });
        }
        let mut out = vec![T::zero(); b * cout];
        T::gemm(
            b,
            cin,
            cout,
            self.value(input).data(),
            (cin, 1),
            self.value(weight).data(),
            (1, cin),
            &mut out,
            (cout, 1),
            false,
        );
        if let Some(bv) = bias {
            let bias = self.value(bv).data();
            if bias.len() != cout {
                return Err(Error::Dimension {
                    op: OP,
                    axis: "bias",
                    expected: cout,
                    found: bias.len(),
                });
            }
            for row in out.chunks_mut(cout) {
                row.iter_mut().zip(bias).for_each(|(o, &bb)| *o += bb);
            }
        }
        let value = Tensor::new([b, cout], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(value, Op::Linear { input, weight, bias }, &inputs))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Dimension {
                op,
                axis: "element count",
                expected: sa.iter().product(),
                found: sb.iter().product(),
            });
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, op: Op<T>, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let (xa, xb) = (self.value(a), self.value(b));
        let data = xa.data().iter().zip(xb.data()).map(|(&p, &q)| f(p, q)).collect();
        let value = Tensor::new(xa.shape(), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Add(a, b), "add", |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Sub(a, b), "sub", |p, q| p - q)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Mul(a, b), "mul", |p, q| p * q)
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let x = self.value(input);
        let value = Tensor::new(x.shape(), x.data().iter().map(|&v| v * factor).collect()).expect("same shape");
        self.push(value, Op::Scale(input, factor), &[input])
    }

    /// `input (B x C x H x W) * gate (B x C)` broadcast over the spatial axes.
    pub fn channel_gate(&mut self, input: Var, gate: Var) -> Result<Var> {
        const OP: &str = "channel_gate";
        let [b, c, h, w] = self.dims4(input, OP)?;
        let gn = self.value(gate).numel();
        if gn != b * c {
            return Err(Error::Dimension {
                op: OP,
                axis: "gate",
                expected: b * c,
                found: gn,
            });
        }
        let hw = h * w;
        let g = self.value(gate).data();
        let mut out = self.value(input).data().to_vec();
        for (plane, &s) in out.chunks_mut(hw).zip(g) {
            plane.iter_mut().for_each(|v| *v *= s);
        }
        let value = Tensor::new([b, c, h, w], out)?;
        Ok(self.push(value, Op::ChannelGate { input, gate }, &[input, gate]))
    }

    /// `input (B x C x H x W) * gate (B x 1 x H x W)` broadcast over channels.
    pub fn spatial_gate(&mut self, input: Var, gate: Var) -> Result<Var> {
        const OP: &str = "spatial_gate";
        let [b, c, h, w] = self.dims4(input, OP)?;
        let gn = self.value(gate).numel();
        if gn != b * h * w {
            return Err(Error::Dimension {
                op: OP,
                axis: "gate",
                expected: b * h * w,
                found: gn,
            });
        }
        let hw = h * w;
        let g = self.value(gate).data();
        let mut out = self.value(input).data().to_vec();
        for (i, item) in out.chunks_mut(c * hw).enumerate() {
            let gi = &g[i * hw..(i + 1) * hw];
            for plane in item.chunks_mut(hw) {
                plane.iter_mut().zip(gi).for_each(|(v, &s)| *v *= s);
            }
        }
        let value = Tensor::new([b, c, h, w], out)?;
        Ok(self.push(value, Op::SpatialGate { input, gate }, &[input, gate]))
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(input), &[input])
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let n = self.value(input).numel().max(1);
        let s = self.sum(input);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    pub fn reshape(&mut self, input: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(input).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(input), &[input]))
    }

    /// `a (N1 x D) * b^T (D x N2)`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: &str = "matmul_nt";
        let [n1, d] = self.value(a).dims2(OP)?;
        let [n2, db] = self.value(b).dims2(OP)?;
        if d != db {
            return Err(Error::Dimension {
                op: OP,
                axis: "inner",
                expected: d,
                found: db,
            });
        }
        let mut out = vec![T::zero(); n1 * n2];
        T::gemm(
            n1,
            d,
            n2,
            self.value(a).data(),
            (d, 1),
            self.value(b).data(),
            (1, d),
            &mut out,
            (n2, 1),
            false,
        );
        let value = Tensor::new([n1, n2], out)?;
        Ok(self.push(value, Op::MatmulNt(a, b), &[a, b]))
    }

    /// Picks elements by flat index into a rank-1 tensor.
    pub fn gather(&mut self, input: Var, indices: Vec<usize>) -> Result<Var> {
        let x = self.value(input).data();
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.len()) {
            return Err(Error::Dimension {
                op: "gather",
                axis: "index",
                expected: x.len(),
                found: bad,
            });
        }
        let out: Vec<T> = indices.iter().map(|&i| x[i]).collect();
        let value = Tensor::new([out.len()], out)?;
        Ok(self.push(value, Op::Gather { input, indices }, &[input]))
    }

    /// Bilinearly samples batch item `item` of `input` at `(x, y)` pixel
    /// positions, giving an `N x C` tensor.
    pub fn sample_bilinear(&mut self, input: Var, item: usize, points: &[(f64, f64)]) -> Result<Var> {
        const OP: &str = "sample_bilinear";
        let [b, c, h, w] = self.dims4(input, OP)?;
        if item >= b {
            return Err(Error::Dimension {
                op: OP,
                axis: "batch",
                expected: b,
                found: item,
            });
        }
        let mut taps = Vec::with_capacity(points.len());
        for (index, &(x, y)) in points.iter().enumerate() {
            taps.push(kernels::bilinear_taps(x, y, w, h).ok_or(Error::OutOfBounds {
                index,
                x,
                y,
                width: w,
                height: h,
            })?);
        }
        let hw = h * w;
        let src = &self.value(input).data()[item * c * hw..(item + 1) * c * hw];
        let mut out = vec![T::zero(); points.len() * c];
        for (row, t) in out.chunks_mut(c).zip(&taps) {
            for (ch, o) in row.iter_mut().enumerate() {
                let plane = &src[ch * hw..];
                *o = t.iter().map(|&(p, wt)| plane[p] * wt).sum();
            }
        }
        let value = Tensor::new([points.len(), c], out)?;
        Ok(self.push(value, Op::SampleBilinear { input, item, taps }, &[input]))
    }

    // ----------------------------------------------------------- backward

    /// Accumulates `d loss / d leaf` into every differentiable leaf.
    ///
    /// Calling it again without [`Tape::zero_grad`] adds to the stored gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.recording {
            return Err(Error::Contract("backward on an inference tape".into()));
        }
        let n = self.value(loss).numel();
        if n != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {n} elements"
            )));
        }
        let mut pending: Vec<Option<Vec<T>>> = Vec::new();
        pending.resize_with(loss.0 + 1, || None);
        pending[loss.0] = Some(vec![T::one()]);
        if self.grads.len() < self.nodes.len() {
            self.grads.resize_with(self.nodes.len(), || None);
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let mut emit = |v: Var, contrib: Vec<T>| {
                if self.nodes[v.0].requires_grad {
                    add_into(&mut pending[v.0], contrib);
                }
            };
            let val = |v: Var| self.nodes[v.0].value.data();
            match &node.op {
                Op::Leaf => add_into(&mut self.grads[i], g),
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    geom,
                } => {
                    if self.nodes[input.0].requires_grad {
                        emit(*input, conv::backward_input(&g, val(*kernel), geom));
                    }
                    if self.nodes[kernel.0].requires_grad {
                        emit(*kernel, conv::backward_weight(val(*input), &g, geom));
                    }
                    if let Some(bv) = bias {
                        emit(*bv, conv::backward_bias(&g, geom));
                    }
                }
                Op::AvgPool2(input) => {
                    let [b, c, h, w] = shape4(&self.nodes[input.0].value);
                    emit(*input, kernels::avg_pool2_backward(&g, b * c, h, w));
                }
                Op::Upsample2(input) => {
                    let [b, c, h, w] = shape4(&self.nodes[input.0].value);
                    emit(*input, kernels::upsample2_backward(&g, b * c, h, w));
                }
                Op::BatchNorm {
                    input,
                    scale,
                    shift,
                    mean,
                    inv_std,
                    train,
                } => {
                    let [b, c, h, w] = shape4(&self.nodes[input.0].value);
                    let grads =
                        kernels::batch_norm_backward(val(*input), &g, b, c, h * w, mean, inv_std, val(*scale), *train);
                    emit(*input, grads.input);
                    emit(*scale, grads.scale);
                    emit(*shift, grads.shift);
                }
                Op::Gelu(input) => {
                    let x = val(*input);
                    emit(
                        *input,
                        g.iter().zip(x).map(|(&gi, &xi)| gi * kernels::gelu_grad(xi)).collect(),
                    );
                }
                Op::Sigmoid(input) => {
                    let y = node.value.data();
                    emit(
                        *input,
                        g.iter().zip(y).map(|(&gi, &yi)| gi * yi * (T::one() - yi)).collect(),
                    );
                }
                Op::Concat(a, b) => {
                    let [bn, ca, h, w] = shape4(&self.nodes[a.0].value);
                    let cb = self.nodes[b.0].value.shape()[1];
                    let hw = h * w;
                    let mut ga = Vec::with_capacity(bn * ca * hw);
                    let mut gb = Vec::with_capacity(bn * cb * hw);
                    for item in g.chunks((ca + cb) * hw) {
                        ga.extend_from_slice(&item[..ca * hw]);
                        gb.extend_from_slice(&item[ca * hw..]);
                    }
                    emit(*a, ga);
                    emit(*b, gb);
                }
                Op::L2Normalize { input, eps, norms } => {
                    let [b, c, h, w] = shape4(&node.value);
                    emit(
                        *input,
                        kernels::l2_normalize_backward(node.value.data(), &g, norms, *eps, b, c, h * w),
                    );
                }
                Op::SpatialAvg(input) => {
                    let [_, _, h, w] = shape4(&self.nodes[input.0].value);
                    let hw = h * w;
                    let inv = T::one() / T::lit(hw as f64);
                    let mut gx = Vec::with_capacity(g.len() * hw);
                    for &gi in &g {
                        gx.extend(std::iter::repeat_n(gi * inv, hw));
                    }
                    emit(*input, gx);
                }
                Op::SpatialMax { input, argmax } | Op::ChannelMax { input, argmax } => {
                    let mut gx = vec![T::zero(); self.nodes[input.0].value.numel()];
                    for (&gi, &k) in g.iter().zip(argmax) {
                        gx[k] += gi;
                    }
                    emit(*input, gx);
                }
                Op::ChannelAvg(input) => {
                    let [b, c, h, w] = shape4(&self.nodes[input.0].value);
                    let hw = h * w;
                    let inv = T::one() / T::lit(c as f64);
                    let mut gx = Vec::with_capacity(b * c * hw);
                    for gi in g.chunks(hw) {
                        for _ in 0..c {
                            gx.extend(gi.iter().map(|&v| v * inv));
                        }
                    }
                    emit(*input, gx);
                }
                Op::Linear { input, weight, bias } => {
                    let [b, cin] = dims2(&self.nodes[input.0].value);
                    let cout = node.value.shape()[1];
                    if self.nodes[input.0].requires_grad {
                        let mut gx = vec![T::zero(); b * cin];
                        T::gemm(
                            b,
                            cout,
                            cin,
                            &g,
                            (cout, 1),
                            val(*weight),
                            (cin, 1),
                            &mut gx,
                            (cin, 1),
                            false,
                        );
                        emit(*input, gx);
                    }
                    if self.nodes[weight.0].requires_grad {
                        let mut gw = vec![T::zero(); cout * cin];
                        T::gemm(
                            cout,
                            b,
                            cin,
                            &g,
                            (1, cout),
                            val(*input),
                            (cin, 1),
                            &mut gw,
                            (cin, 1),
                            false,
                        );
                        emit(*weight, gw);
                    }
                    if let Some(bv) = bias {
                        let mut gb = vec![T::zero(); cout];
                        for row in g.chunks(cout) {
                            gb.iter_mut().zip(row).for_each(|(a, &r)| *a += r);
                        }
                        emit(*bv, gb);
                    }
                }
                Op::Add(a, b) => {
                    emit(*a, g.clone());
                    emit(*b, g);
                }
                Op::Sub(a, b) => {
                    emit(*b, g.iter().map(|&v| -v).collect());
                    emit(*a, g);
                }
                Op::Mul(a, b) => {
                    let (xa, xb) = (val(*a), val(*b));
                    emit(*a, g.iter().zip(xb).map(|(&gi, &q)| gi * q).collect());
                    emit(*b, g.iter().zip(xa).map(|(&gi, &p)| gi * p).collect());
                }
                Op::Scale(input, f) => emit(*input, g.iter().map(|&v| v * *f).collect()),
                Op::ChannelGate { input, gate } => {
                    let hw = node.value.shape()[2] * node.value.shape()[3];
                    let (x, s) = (val(*input), val(*gate));
                    let mut gx = g.clone();
                    for (plane, &sv) in gx.chunks_mut(hw).zip(s) {
                        plane.iter_mut().for_each(|v| *v *= sv);
                    }
                    let gs = g
                        .chunks(hw)
                        .zip(x.chunks(hw))
                        .map(|(gp, xp)| gp.iter().zip(xp).map(|(&a, &b)| a * b).sum())
                        .collect();
                    emit(*input, gx);
                    emit(*gate, gs);
                }
                Op::SpatialGate { input, gate } => {
                    let [_, c, h, w] = shape4(&node.value);
                    let hw = h * w;
                    let (x, s) = (val(*input), val(*gate));
                    let mut gx = g.clone();
                    let mut gs = vec![T::zero(); s.len()];
                    for (i, (gitem, xitem)) in gx.chunks_mut(c * hw).zip(x.chunks(c * hw)).enumerate() {
                        let si = &s[i * hw..(i + 1) * hw];
                        let gsi = &mut gs[i * hw..(i + 1) * hw];
                        for (gplane, xplane) in gitem.chunks_mut(hw).zip(xitem.chunks(hw)) {
                            for p in 0..hw {
                                gsi[p] += gplane[p] * xplane[p];
                                gplane[p] *= si[p];
                            }
                        }
                    }
                    emit(*input, gx);
                    emit(*gate, gs);
                }
                Op::Sum(input) => {
                    let n = self.nodes[input.0].value.numel();
                    emit(*input, vec![g[0]; n]);
                }
                Op::Reshape(input) => emit(*input, g),
                Op::MatmulNt(a, b) => {
                    let [n1, d] = dims2(&self.nodes[a.0].value);
                    let n2 = self.nodes[b.0].value.shape()[0];
                    if self.nodes[a.0].requires_grad {
                        let mut ga = vec![T::zero(); n1 * d];
                        T::gemm(n1, n2, d, &g, (n2, 1), val(*b), (d, 1), &mut ga, (d, 1), false);
                        emit(*a, ga);
                    }
                    if self.nodes[b.0].requires_grad {
                        let mut gb = vec![T::zero(); n2 * d];
                        T::gemm(n2, n1, d, &g, (1, n2), val(*a), (d, 1), &mut gb, (d, 1), false);
                        emit(*b, gb);
                    }
                }
                Op::Gather { input, indices } => {
                    let mut gx = vec![T::zero(); self.nodes[input.0].value.numel()];
                    for (&gi, &k) in g.iter().zip(indices) {
                        gx[k] += gi;
                    }
                    emit(*input, gx);
                }
                Op::SampleBilinear { input, item, taps } => {
                    let [_, c, h, w] = shape4(&self.nodes[input.0].value);
                    let hw = h * w;
                    let mut gx = vec![T::zero(); self.nodes[input.0].value.numel()];
                    let dst = &mut gx[item * c * hw..(item + 1) * c * hw];
                    for (grow, t) in g.chunks(c).zip(taps) {
                        for (ch, &gv) in grow.iter().enumerate() {
                            for &(p, wt) in t {
                                dst[ch * hw + p] += gv * wt;
                            }
                        }
                    }
                    emit(*input, gx);
                }
            }
        }
        Ok(())
    }
}

fn add_into<T: Real>(slot: &mut Option<Vec<T>>, contrib: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, &c)| *a += c),
        None => *slot = Some(contrib),
    }
}

fn shape4<T: Real>(t: &Tensor<T>) -> [usize; 4] {
    let s = t.shape();
    [s[0], s[1], s[2], s[3]]
}

fn dims2<T: Real>(t: &Tensor<T>) -> [usize; 2] {
    let s = t.shape();
    [s[0], s[1]]
}

/// Thread count used by the kernels, exposed for diagnostics.
pub fn worker_threads() -> usize {
    par::current_num_threads()
}
