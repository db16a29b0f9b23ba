//! Finite-difference verification of tape gradients.

use std::fmt;

use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Base step; the step for coordinate `x` is `epsilon * max(1, |x|)`.
    pub epsilon: f64,
    /// Largest acceptable relative error.
    pub tolerance: f64,
    /// Denominator floor for the relative error, so that coordinates whose
    /// true gradient is zero are judged on absolute error.
    pub floor: f64,
    /// Combine central differences at steps `h` and `h / 2` (Richardson
    /// extrapolation), cancelling the leading truncation term.
    pub extrapolate: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { epsilon: 1e-3, tolerance: 1e-5, floor: 1e-6, extrapolate: true }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradMismatch {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coordinates: usize,
    pub tolerance: f64,
    /// Every coordinate whose relative error exceeded the tolerance.
    pub failures: Vec<GradMismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.max_rel_error.is_finite()
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "grad_check: {} coordinates, max rel err {:.3e} (tol {:.1e}), {} failing",
            self.coordinates,
            self.max_rel_error,
            self.tolerance,
            self.failures.len()
        )?;
        for m in self.failures.iter().take(5) {
            write!(
                f,
                "\n  param {} [{}]: analytic {:.6e} numeric {:.6e} rel {:.3e}",
                m.param, m.index, m.analytic, m.numeric, m.rel_error
            )?;
        }
        Ok(())
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

fn evaluate<T: Real, F>(f: &F, params: &[Tensor<T>]) -> f64
where
    F: Fn(&mut Graph<T>, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars);
    g.value(out).item().as_f64()
}

/// Compares tape gradients of the scalar computed by `f` against central
/// differences over every coordinate of every parameter.
///
/// `f` must be deterministic in its inputs; any dropout inside it has to be
/// driven by an rng it re-seeds on every call.
pub fn grad_check<T: Real, F>(f: F, params: &[Tensor<T>], config: GradCheckConfig) -> GradCheckReport
where
    F: Fn(&mut Graph<T>, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars);
    g.backward(out);
    let analytic: Vec<Tensor<T>> = vars.iter().map(|&v| g.grad(v)).collect();
    drop(g);

    let mut work: Vec<Tensor<T>> = params.to_vec();
    let mut max_rel = 0.0f64;
    let mut failures = Vec::new();
    let mut coordinates = 0;
    for p in 0..params.len() {
        for i in 0..params[p].numel() {
            let x = params[p].data()[i];
            let h = config.epsilon * x.as_f64().abs().max(1.0);
            let mut central = |step: f64| {
                let hp = T::from_f64(step);
                work[p].data_mut()[i] = x + hp;
                let up = evaluate(&f, &work);
                work[p].data_mut()[i] = x - hp;
                let down = evaluate(&f, &work);
                work[p].data_mut()[i] = x;
                // divide by the step actually taken after rounding to T
                let taken = ((x + hp).as_f64() - (x - hp).as_f64()).max(f64::MIN_POSITIVE);
                (up - down) / taken
            };
            let numeric = if config.extrapolate {
                let coarse = central(h);
                let fine = central(h / 2.0);
                (4.0 * fine - coarse) / 3.0
            } else {
                central(h)
            };
            let a = analytic[p].data()[i].as_f64();
            let rel = relative_error(a, numeric, config.floor);
            coordinates += 1;
            if !rel.is_finite() || rel > config.tolerance {
                failures.push(GradMismatch { param: p, index: i, analytic: a, numeric, rel_error: rel });
            }
            if rel.is_nan() {
                max_rel = f64::NAN;
            } else if !max_rel.is_nan() {
                max_rel = max_rel.max(rel);
            }
        }
    }
    GradCheckReport { max_rel_error: max_rel, coordinates, tolerance: config.tolerance, failures }
}
