//! Stride-1 "same" convolution via row-tiled im2col and GEMM.

use crate::par;
use crate::tensor::Real;

/// Upper bound on the im2col scratch buffer, in elements.
const TILE_ELEMS: usize = 1 << 21;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub pad: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn tile_rows(&self) -> usize {
        (TILE_ELEMS / (self.patch_len() * self.width).max(1)).clamp(1, self.height)
    }

    fn pointwise(&self) -> bool {
        self.kernel == 1 && self.pad == 0
    }
}

/// Writes the `patch_len x (rows * width)` patch matrix for output rows
/// `y0..y0 + rows` of one batch item.
fn im2col<T: Real>(x: &[T], g: &ConvGeom, y0: usize, rows: usize, cols: &mut [T]) {
    let (h, w, k, pad) = (g.height, g.width, g.kernel, g.pad);
    let p = rows * w;
    for c in 0..g.in_ch {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let r = (c * k + ky) * k + kx;
                let dst_row = &mut cols[r * p..(r + 1) * p];
                let x_lo = pad.saturating_sub(kx).min(w);
                let x_hi = (w + pad).saturating_sub(kx).min(w);
                for yy in 0..rows {
                    let dst = &mut dst_row[yy * w..(yy + 1) * w];
                    let sy = (y0 + yy + ky) as isize - pad as isize;
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    dst[..x_lo].fill(T::zero());
                    dst[x_lo..x_hi].copy_from_slice(&src[x_lo + kx - pad..x_hi + kx - pad]);
                    dst[x_hi..].fill(T::zero());
                }
            }
        }
    }
}

/// Forward pass for a single batch item into `out` (`out_ch x h x w`).
fn forward_item<T: Real>(x: &[T], weight: &[T], bias: Option<&[T]>, g: &ConvGeom, out: &mut [T]) {
    let hw = g.height * g.width;
    if g.pointwise() {
        // out^T (hw x co) = x^T (hw x ci) * w^T (ci x co)
        T::gemm(
            hw,
            g.in_ch,
            g.out_ch,
            x,
            (1, hw),
            weight,
            (1, g.in_ch),
            out,
            (1, hw),
            false,
        );
    } else {
        let plen = g.patch_len();
        let tile = g.tile_rows();
        let mut cols = vec![T::zero(); plen * tile * g.width];
        let mut y0 = 0;
        while y0 < g.height {
            let rows = tile.min(g.height - y0);
            let p = rows * g.width;
            im2col(x, g, y0, rows, &mut cols[..plen * p]);
            let out_tile = &mut out[y0 * g.width..];
            T::gemm(
                p,
                plen,
                g.out_ch,
                &cols,
                (1, p),
                weight,
                (1, plen),
                out_tile,
                (1, hw),
                false,
            );
            y0 += rows;
        }
    }
    if let Some(bias) = bias {
        for (plane, &b) in out.chunks_mut(hw).zip(bias) {
            plane.iter_mut().for_each(|v| *v += b);
        }
    }
}

pub(crate) fn forward<T: Real>(x: &[T], weight: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let hw = g.height * g.width;
    let in_len = g.in_ch * hw;
    let mut out = vec![T::zero(); g.batch * g.out_ch * hw];
    par::for_each_chunk_mut(&mut out, g.out_ch * hw, |b, out_item| {
        forward_item(&x[b * in_len..(b + 1) * in_len], weight, bias, g, out_item);
    });
    out
}

/// Gradient w.r.t. the input: a "same" convolution of the output gradient
/// with the spatially flipped, channel-transposed kernel.
pub(crate) fn backward_input<T: Real>(grad_out: &[T], weight: &[T], g: &ConvGeom) -> Vec<T> {
    let k = g.kernel;
    let kk = k * k;
    let mut flipped = vec![T::zero(); weight.len()];
    for co in 0..g.out_ch {
        for ci in 0..g.in_ch {
            let src = &weight[(co * g.in_ch + ci) * kk..][..kk];
            let dst = &mut flipped[(ci * g.out_ch + co) * kk..][..kk];
            for (d, s) in dst.iter_mut().zip(src.iter().rev()) {
                *d = *s;
            }
        }
    }
    let tg = ConvGeom {
        in_ch: g.out_ch,
        out_ch: g.in_ch,
        ..*g
    };
    forward(grad_out, &flipped, None, &tg)
}

pub(crate) fn backward_weight<T: Real>(x: &[T], grad_out: &[T], g: &ConvGeom) -> Vec<T> {
    let hw = g.height * g.width;
    let plen = g.patch_len();
    let in_len = g.in_ch * hw;
    let out_len = g.out_ch * hw;
    let partials = par::map_indices(g.batch, |b| {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let gb = &grad_out[b * out_len..(b + 1) * out_len];
        let mut gw = vec![T::zero(); g.out_ch * plen];
        if g.pointwise() {
            // gw^T (ci x co) = x (ci x hw) * g^T (hw x co)
            T::gemm(
                g.in_ch,
                hw,
                g.out_ch,
                xb,
                (hw, 1),
                gb,
                (1, hw),
                &mut gw,
                (1, plen),
                false,
            );
        } else {
            let tile = g.tile_rows();
            let mut cols = vec![T::zero(); plen * tile * g.width];
            let mut y0 = 0;
            while y0 < g.height {
                let rows = tile.min(g.height - y0);
                let p = rows * g.width;
                im2col(xb, g, y0, rows, &mut cols[..plen * p]);
                T::gemm(
                    plen,
                    p,
                    g.out_ch,
                    &cols,
                    (p, 1),
                    &gb[y0 * g.width..],
                    (1, hw),
                    &mut gw,
                    (1, plen),
                    true,
                );
                y0 += rows;
            }
        }
        gw
    });
    sum_in_order(partials, g.out_ch * plen)
}

pub(crate) fn backward_bias<T: Real>(grad_out: &[T], g: &ConvGeom) -> Vec<T> {
    let hw = g.height * g.width;
    let mut gb = vec![T::zero(); g.out_ch];
    for item in grad_out.chunks(g.out_ch * hw) {
        for (acc, plane) in gb.iter_mut().zip(item.chunks(hw)) {
            *acc += plane.iter().copied().sum::<T>();
        }
    }
    gb
}

pub(crate) fn sum_in_order<T: Real>(partials: Vec<Vec<T>>, len: usize) -> Vec<T> {
    let mut iter = partials.into_iter();
    let mut acc = iter.next().unwrap_or_else(|| vec![T::zero(); len]);
    for p in iter {
        acc.iter_mut().zip(&p).for_each(|(a, b)| *a += *b);
    }
    acc
}
