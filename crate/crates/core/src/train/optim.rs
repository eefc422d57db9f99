use crate::error::{Error, Result};
use crate::net::Parameter;
use crate::tensor::Real;
use crate::train::TrainConfig;

/// Linear warm-up from `eta_min` to `eta_max` over `warmup_steps`, then
/// exponential decay by `decay` per step, floored at `eta_min`.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    let w = cfg.warmup_steps;
    if step < w {
        cfg.eta_min + (cfg.eta_max - cfg.eta_min) * step as f64 / w as f64
    } else {
        (cfg.eta_max * cfg.decay.powf((step - w) as f64)).max(cfg.eta_min)
    }
}

/// One AdamW update with decoupled weight decay. `t` is the 1-based update
/// count used for bias correction. Nothing is modified if any gradient is
/// non-finite.
pub fn adamw_step<T: Real>(
    params: &mut [Parameter<T>],
    grads: &[Vec<T>],
    t: u64,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Dimension {
            op: "adamw_step",
            axis: "parameter count",
            expected: params.len(),
            found: grads.len(),
        });
    }
    for (p, g) in params.iter().zip(grads) {
        if g.len() != p.tensor.numel() {
            return Err(Error::Dimension {
                op: "adamw_step",
                axis: "gradient length",
                expected: p.tensor.numel(),
                found: g.len(),
            });
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
    }
    let t = t.max(1) as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let c1 = T::lit(1.0 - cfg.beta1.powi(t));
    let c2 = T::lit(1.0 - cfg.beta2.powi(t));
    let shrink = T::lit(1.0 - lr * cfg.weight_decay);
    let lr = T::lit(lr);
    let eps = T::lit(cfg.adam_epsilon);
    let one = T::one();
    for (p, g) in params.iter_mut().zip(grads) {
        let theta = p.tensor.data_mut();
        for i in 0..theta.len() {
            let gi = g[i];
            let m = b1 * p.first_moment[i] + (one - b1) * gi;
            let v = b2 * p.second_moment[i] + (one - b2) * gi * gi;
            p.first_moment[i] = m;
            p.second_moment[i] = v;
            theta[i] = theta[i] * shrink - lr * (m / c1) / ((v / c2).sqrt() + eps);
        }
    }
    Ok(())
}
