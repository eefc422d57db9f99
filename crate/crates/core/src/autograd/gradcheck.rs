//! Central finite-difference checks of reverse-mode gradients in 64-bit.

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-4;
pub const DEFAULT_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(input, element, analytic, numeric)` of the largest discrepancy.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    fn record(&mut self, input: usize, elem: usize, analytic: f64, numeric: f64, floor: f64) {
        let e = relative_error(analytic, numeric, floor);
        self.checked += 1;
        if e > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(e);
            self.worst = Some((input, elem, analytic, numeric));
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::inference();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).data()[0])
}

/// Analytic gradients of `f` with respect to every input.
pub fn analytic_gradients<F>(inputs: &[Tensor<f64>], f: &F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect())
}

/// Compares every element of every input's gradient against central
/// differences of the scalar `f`.
pub fn check<F>(inputs: &[Tensor<f64>], f: F, step: f64, floor: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let selection: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |e| (i, e)))
        .collect();
    check_elements(inputs, f, &selection, step, floor)
}

/// Like [`check`] but only for the listed `(input, element)` pairs.
pub fn check_elements<F>(
    inputs: &[Tensor<f64>],
    f: F,
    selection: &[(usize, usize)],
    step: f64,
    floor: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(inputs, &f)?;
    let mut work = inputs.to_vec();
    let mut report = GradCheckReport::default();
    for &(i, e) in selection {
        let orig = work[i].data()[e];
        work[i].data_mut()[e] = orig + step;
        let up = eval(&f, &work)?;
        work[i].data_mut()[e] = orig - step;
        let down = eval(&f, &work)?;
        work[i].data_mut()[e] = orig;
        report.record(i, e, analytic[i][e], (up - down) / (2.0 * step), floor);
    }
    Ok(report)
}

/// Checks the directional derivative along each of `directions` (one
/// perturbation tensor per input), covering every element at once.
pub fn check_directions<F>(
    inputs: &[Tensor<f64>],
    f: F,
    directions: &[Vec<Tensor<f64>>],
    step: f64,
    floor: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(inputs, &f)?;
    let mut report = GradCheckReport::default();
    for (d, dir) in directions.iter().enumerate() {
        let shifted = |sign: f64| -> Vec<Tensor<f64>> {
            inputs
                .iter()
                .zip(dir)
                .map(|(t, v)| {
                    let mut s = t.clone();
                    s.data_mut()
                        .iter_mut()
                        .zip(v.data())
                        .for_each(|(x, dv)| *x += sign * step * dv);
                    s
                })
                .collect()
        };
        let numeric = (eval(&f, &shifted(1.0))? - eval(&f, &shifted(-1.0))?) / (2.0 * step);
        let exact: f64 = analytic
            .iter()
            .zip(dir)
            .map(|(g, v)| g.iter().zip(v.data()).map(|(a, b)| a * b).sum::<f64>())
            .sum();
        report.record(usize::MAX, d, exact, numeric, floor);
    }
    Ok(report)
}
