use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::Keypoint;
use crate::matrix::Matrix;
use crate::net::NORM_EPS;
use crate::tensor::{Real, Tensor};

/// Per-pixel descriptor field, `dim x height x width`, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorVolume {
    dim: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl DescriptorVolume {
    pub fn new(dim: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != dim * height * width {
            return Err(Error::Dimension {
                op: "descriptor volume",
                axis: "element count",
                expected: dim * height * width,
                found: data.len(),
            });
        }
        Ok(DescriptorVolume {
            dim,
            height,
            width,
            data,
        })
    }

    /// Splits a `B x D x H x W` tensor into `B` volumes.
    pub fn split_batch<T: Real>(t: &Tensor<T>) -> Result<Vec<Self>> {
        let [b, d, h, w] = t.dims4("descriptor volume")?;
        let n = d * h * w;
        (0..b)
            .map(|i| {
                let data = t.data()[i * n..(i + 1) * n].iter().map(|v| v.as_f64() as f32).collect();
                DescriptorVolume::new(d, h, w, data)
            })
            .collect()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> Vec<f32> {
        let hw = self.height * self.width;
        (0..self.dim).map(|c| self.data[c * hw + y * self.width + x]).collect()
    }

    /// Top-left `height x width` window (undoes size padding).
    pub fn crop(&self, height: usize, width: usize) -> Result<Self> {
        if height > self.height || width > self.width {
            return Err(Error::Contract(format!(
                "cannot crop a {}x{} volume to {height}x{width}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(self.dim * height * width);
        for c in 0..self.dim {
            for y in 0..height {
                let start = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[start..start + width]);
            }
        }
        DescriptorVolume::new(self.dim, height, width, data)
    }

    /// Euclidean norm of the descriptor at every pixel.
    pub fn pixel_norms(&self) -> Vec<f32> {
        let hw = self.height * self.width;
        let mut n = vec![0.0f32; hw];
        for plane in self.data.chunks(hw) {
            n.iter_mut().zip(plane).for_each(|(a, &v)| *a += v * v);
        }
        n.iter_mut().for_each(|a| *a = a.sqrt());
        n
    }

    /// Bilinearly interpolated, re-normalised descriptors at `keypoints`
    /// (one row each). Integer positions return the stored pixel exactly.
    pub fn sample_descriptors(&self, keypoints: &[Keypoint]) -> Result<Matrix<f32>> {
        let hw = self.height * self.width;
        let mut out = Vec::with_capacity(keypoints.len() * self.dim);
        for (index, kp) in keypoints.iter().enumerate() {
            let taps = crate::autograd::kernels::bilinear_taps::<f64>(kp.x, kp.y, self.width, self.height).ok_or(
                Error::OutOfBounds {
                    index,
                    x: kp.x,
                    y: kp.y,
                    width: self.width,
                    height: self.height,
                },
            )?;
            let exact = kp.x.fract() == 0.0 && kp.y.fract() == 0.0;
            let start = out.len();
            for c in 0..self.dim {
                let plane = &self.data[c * hw..(c + 1) * hw];
                let v: f64 = taps.iter().map(|&(p, w)| plane[p] as f64 * w).sum();
                out.push(v);
            }
            if !exact {
                let row = &mut out[start..];
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        Matrix::new(keypoints.len(), self.dim, out.into_iter().map(|v| v as f32).collect())
    }
}

/// Differentiable counterpart of [`DescriptorVolume::sample_descriptors`] on
/// batch item `item` of a recorded volume: bilinear sampling followed by
/// row normalisation, giving an `N x D` variable.
pub fn sample_descriptors_on_tape<T: Real>(
    tape: &mut Tape<T>,
    volume: Var,
    item: usize,
    points: &[(f64, f64)],
) -> Result<Var> {
    let d = tape.shape(volume)[1];
    let n = points.len();
    let s = tape.sample_bilinear(volume, item, points)?;
    let s = tape.reshape(s, [n, d, 1, 1])?;
    let s = tape.l2_normalize_channels(s, T::lit(NORM_EPS))?;
    tape.reshape(s, [n, d])
}
