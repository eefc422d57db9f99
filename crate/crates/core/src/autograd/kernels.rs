use crate::tensor::Real;

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(crate) fn gelu<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    x * half * (T::one() + (x * T::lit(FRAC_1_SQRT_2)).erf())
}

pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let cdf = T::lit(0.5) * (T::one() + (x * T::lit(FRAC_1_SQRT_2)).erf());
    let pdf = T::lit(INV_SQRT_2PI) * (-(x * x) * T::lit(0.5)).exp();
    cdf + x * pdf
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn avg_pool2<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            let r0 = &plane[2 * oy * w..(2 * oy + 1) * w];
            let r1 = &plane[(2 * oy + 1) * w..(2 * oy + 2) * w];
            for ox in 0..ow {
                out.push((r0[2 * ox] + r0[2 * ox + 1] + r1[2 * ox] + r1[2 * ox + 1]) * quarter);
            }
        }
    }
    out
}

pub(crate) fn avg_pool2_backward<T: Real>(g: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut gx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let gp = &g[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut gx[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = gp[(y / 2) * ow + x / 2] * quarter;
            }
        }
    }
    gx
}

/// For each output index along one axis: `(lower, upper, upper weight)`.
fn upsample_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub(crate) fn upsample2<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let ty = upsample_taps(h);
    let tx: Vec<(usize, usize, T)> = upsample_taps(w)
        .into_iter()
        .map(|(a, b, f)| (a, b, T::lit(f)))
        .collect();
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut row0 = vec![T::zero(); ow];
    let mut row1 = vec![T::zero(); ow];
    for p in 0..planes {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for &(y0, y1, fy) in &ty {
            let fy = T::lit(fy);
            let (s0, s1) = (&plane[y0 * w..(y0 + 1) * w], &plane[y1 * w..(y1 + 1) * w]);
            for (o, &(x0, x1, fx)) in tx.iter().enumerate() {
                row0[o] = s0[x0] * (T::one() - fx) + s0[x1] * fx;
                row1[o] = s1[x0] * (T::one() - fx) + s1[x1] * fx;
            }
            out.extend(row0.iter().zip(&row1).map(|(&a, &b)| a * (T::one() - fy) + b * fy));
        }
    }
    out
}

pub(crate) fn upsample2_backward<T: Real>(g: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let (oh, ow) = (2 * h, 2 * w);
    let mut gx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let gp = &g[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut gx[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::lit(1.0 - fy), T::lit(fy));
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let (wx0, wx1) = (T::lit(1.0 - fx), T::lit(fx));
                let v = gp[oy * ow + ox];
                dst[y0 * w + x0] += v * wy0 * wx0;
                dst[y0 * w + x1] += v * wy0 * wx1;
                dst[y1 * w + x0] += v * wy1 * wx0;
                dst[y1 * w + x1] += v * wy1 * wx1;
            }
        }
    }
    gx
}

/// Per-channel mean and biased variance over batch and spatial axes,
/// accumulated in double precision.
pub(crate) fn channel_moments<T: Real>(x: &[T], b: usize, c: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (b * hw) as f64;
    let mut mean = vec![0.0; c];
    for item in x.chunks(c * hw) {
        for (m, plane) in mean.iter_mut().zip(item.chunks(hw)) {
            *m += plane.iter().map(|v| v.as_f64()).sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; c];
    for item in x.chunks(c * hw) {
        for ((v, plane), &m) in var.iter_mut().zip(item.chunks(hw)).zip(&mean) {
            *v += plane
                .iter()
                .map(|x| {
                    let d = x.as_f64() - m;
                    d * d
                })
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    (mean, var)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn batch_norm_apply<T: Real>(
    x: &[T],
    b: usize,
    c: usize,
    hw: usize,
    mean: &[T],
    inv_std: &[T],
    scale: &[T],
    shift: &[T],
) -> Vec<T> {
    let mut out = Vec::with_capacity(b * c * hw);
    for item in x.chunks(c * hw) {
        for (ch, plane) in item.chunks(hw).enumerate() {
            let a = scale[ch] * inv_std[ch];
            let o = shift[ch] - mean[ch] * a;
            out.extend(plane.iter().map(|&v| v * a + o));
        }
    }
    out
}

pub(crate) struct BatchNormGrads<T> {
    pub input: Vec<T>,
    pub scale: Vec<T>,
    pub shift: Vec<T>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn batch_norm_backward<T: Real>(
    x: &[T],
    g: &[T],
    b: usize,
    c: usize,
    hw: usize,
    mean: &[T],
    inv_std: &[T],
    scale: &[T],
    train: bool,
) -> BatchNormGrads<T> {
    // sums of dy and dy * x_hat per channel
    let mut sum_g = vec![T::zero(); c];
    let mut sum_gx = vec![T::zero(); c];
    for (xi, gi) in x.chunks(c * hw).zip(g.chunks(c * hw)) {
        for ch in 0..c {
            let xp = &xi[ch * hw..(ch + 1) * hw];
            let gp = &gi[ch * hw..(ch + 1) * hw];
            let (m, s) = (mean[ch], inv_std[ch]);
            let mut a = T::zero();
            let mut bb = T::zero();
            for (&xv, &gv) in xp.iter().zip(gp) {
                a += gv;
                bb += gv * (xv - m) * s;
            }
            sum_g[ch] += a;
            sum_gx[ch] += bb;
        }
    }
    let n = T::lit((b * hw) as f64);
    let mut gx = Vec::with_capacity(x.len());
    for (xi, gi) in x.chunks(c * hw).zip(g.chunks(c * hw)) {
        for ch in 0..c {
            let xp = &xi[ch * hw..(ch + 1) * hw];
            let gp = &gi[ch * hw..(ch + 1) * hw];
            let (m, s) = (mean[ch], inv_std[ch]);
            let k = scale[ch] * s;
            if train {
                let mg = sum_g[ch] / n;
                let mgx = sum_gx[ch] / n;
                gx.extend(xp.iter().zip(gp).map(|(&xv, &gv)| k * (gv - mg - (xv - m) * s * mgx)));
            } else {
                gx.extend(gp.iter().map(|&gv| k * gv));
            }
        }
    }
    BatchNormGrads {
        input: gx,
        scale: sum_gx,
        shift: sum_g,
    }
}

/// Returns the normalised tensor and the per-pixel norms.
pub(crate) fn l2_normalize<T: Real>(x: &[T], b: usize, c: usize, hw: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let mut norms = vec![T::zero(); b * hw];
    for (i, item) in x.chunks(c * hw).enumerate() {
        let nrm = &mut norms[i * hw..(i + 1) * hw];
        for plane in item.chunks(hw) {
            nrm.iter_mut().zip(plane).for_each(|(n, &v)| *n += v * v);
        }
        nrm.iter_mut().for_each(|n| *n = n.sqrt());
    }
    let mut out = Vec::with_capacity(x.len());
    for (i, item) in x.chunks(c * hw).enumerate() {
        let nrm = &norms[i * hw..(i + 1) * hw];
        for plane in item.chunks(hw) {
            out.extend(plane.iter().zip(nrm).map(|(&v, &n)| v / n.max(eps)));
        }
    }
    (out, norms)
}

pub(crate) fn l2_normalize_backward<T: Real>(
    y: &[T],
    g: &[T],
    norms: &[T],
    eps: T,
    b: usize,
    c: usize,
    hw: usize,
) -> Vec<T> {
    let mut gx = Vec::with_capacity(g.len());
    let mut dot = vec![T::zero(); hw];
    for i in 0..b {
        let yi = &y[i * c * hw..(i + 1) * c * hw];
        let gi = &g[i * c * hw..(i + 1) * c * hw];
        let nrm = &norms[i * hw..(i + 1) * hw];
        dot.iter_mut().for_each(|d| *d = T::zero());
        for (yp, gp) in yi.chunks(hw).zip(gi.chunks(hw)) {
            for p in 0..hw {
                dot[p] += yp[p] * gp[p];
            }
        }
        for (yp, gp) in yi.chunks(hw).zip(gi.chunks(hw)) {
            gx.extend((0..hw).map(|p| {
                if nrm[p] >= eps {
                    (gp[p] - yp[p] * dot[p]) / nrm[p]
                } else {
                    gp[p] / eps
                }
            }));
        }
    }
    gx
}

/// Average, maximum and flat argmax over each plane of `hw` elements.
pub(crate) fn spatial_avg_max<T: Real>(x: &[T], planes: usize, hw: usize) -> (Vec<T>, Vec<T>, Vec<usize>) {
    let inv = T::one() / T::lit(hw as f64);
    let mut avg = Vec::with_capacity(planes);
    let mut max = Vec::with_capacity(planes);
    let mut arg = Vec::with_capacity(planes);
    for (p, plane) in x.chunks(hw).enumerate() {
        avg.push(plane.iter().copied().sum::<T>() * inv);
        let (k, m) = first_max(plane.iter().copied());
        max.push(m);
        arg.push(p * hw + k);
    }
    (avg, max, arg)
}

pub(crate) fn channel_avg_max<T: Real>(x: &[T], b: usize, c: usize, hw: usize) -> (Vec<T>, Vec<T>, Vec<usize>) {
    let inv = T::one() / T::lit(c as f64);
    let mut avg = vec![T::zero(); b * hw];
    let mut max = vec![T::zero(); b * hw];
    let mut arg = vec![0usize; b * hw];
    for i in 0..b {
        let item = &x[i * c * hw..(i + 1) * c * hw];
        let (a, m, k) = (
            &mut avg[i * hw..(i + 1) * hw],
            &mut max[i * hw..(i + 1) * hw],
            &mut arg[i * hw..(i + 1) * hw],
        );
        m.copy_from_slice(&item[..hw]);
        for (p, kk) in k.iter_mut().enumerate() {
            *kk = i * c * hw + p;
        }
        for (ch, plane) in item.chunks(hw).enumerate() {
            for p in 0..hw {
                a[p] += plane[p];
                // strict comparison keeps the lowest channel on ties
                if ch > 0 && plane[p] > m[p] {
                    m[p] = plane[p];
                    k[p] = i * c * hw + ch * hw + p;
                }
            }
        }
        a.iter_mut().for_each(|v| *v *= inv);
    }
    (avg, max, arg)
}

/// Position and value of the first maximum.
pub(crate) fn first_max<T: PartialOrd + Copy>(mut it: impl Iterator<Item = T>) -> (usize, T) {
    let mut best = it.next().expect("non-empty");
    let mut k = 0;
    for (i, v) in it.enumerate() {
        if v > best {
            best = v;
            k = i + 1;
        }
    }
    (k, best)
}

/// Four (flat pixel index, weight) taps for bilinear sampling at `(x, y)`,
/// or `None` outside `[0, w-1] x [0, h-1]`.
pub(crate) fn bilinear_taps<T: Real>(x: f64, y: f64, w: usize, h: usize) -> Option<[(usize, T); 4]> {
    if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
        return None;
    }
    let x0 = (x.floor() as usize).min(w - 1);
    let y0 = (y.floor() as usize).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    Some([
        (y0 * w + x0, T::lit((1.0 - fx) * (1.0 - fy))),
        (y0 * w + x1, T::lit(fx * (1.0 - fy))),
        (y1 * w + x0, T::lit((1.0 - fx) * fy)),
        (y1 * w + x1, T::lit(fx * fy)),
    ])
}
