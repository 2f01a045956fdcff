//! Newton iterations for the latent posterior mode.

use crate::scalar::Real;
use crate::sourcemodel::{LatentState, ParameterSet};

use super::linalg::{ArrowFactor, ArrowMatrix};
use super::problem::{LatentEval, Problem};
use super::FitError;

/// Latent mode and the Hessian summary needed by the Laplace approximation.
#[derive(Debug, Clone)]
pub struct InnerMode<T> {
    pub latent: LatentState<T>,
    /// Joint nll at the mode.
    pub joint_nll: T,
    /// `log det H` over all latents, including the closed-form inactive part.
    pub log_det: T,
    /// Accepted Newton steps.
    pub iterations: usize,
    pub grad_norm: T,
    pub(crate) factor: ArrowFactor<T>,
}

impl<T: Real> InnerMode<T> {
    /// Laplace-Gaussian standard deviations from the diagonal of `H^-1`.
    pub fn latent_sd(&self, problem: &Problem<'_, T>, params: &ParameterSet<T>) -> LatentState<T> {
        let (blocks, years) = self.factor.inverse_diagonal();
        let mut eps = vec![params.sigmap(); problem.n_catchments()];
        for (blk, d) in problem.layout.blocks.iter().zip(blocks) {
            for (&node, v) in blk.nodes.iter().zip(d) {
                eps[node] = v.sqrt();
            }
        }
        LatentState {
            eps,
            delta: years.into_iter().map(T::sqrt).collect(),
        }
    }
}

fn active_grad_norm<T: Real>(problem: &Problem<'_, T>, ev: &LatentEval<T>) -> T {
    let mut s = T::zero();
    for blk in &problem.layout.blocks {
        for &i in &blk.nodes {
            s = s + ev.grad_eps[i] * ev.grad_eps[i];
        }
    }
    for g in &ev.grad_delta {
        s = s + *g * *g;
    }
    s.sqrt()
}

fn newton_direction<T: Real>(
    problem: &Problem<'_, T>,
    ev: &LatentEval<T>,
    factor: &ArrowFactor<T>,
    arrow: &ArrowMatrix<T>,
) -> (Vec<Vec<T>>, Vec<T>) {
    let mut r: Vec<Vec<T>> = problem
        .layout
        .blocks
        .iter()
        .map(|blk| blk.nodes.iter().map(|&i| -ev.grad_eps[i]).collect())
        .collect();
    let mut q: Vec<T> = ev.grad_delta.iter().map(|&g| -g).collect();
    factor.solve_in_place(&mut r, &mut q, &arrow.coupling);
    (r, q)
}

fn step<T: Real>(
    problem: &Problem<'_, T>,
    x: &LatentState<T>,
    dir: &(Vec<Vec<T>>, Vec<T>),
    t: T,
) -> LatentState<T> {
    let mut y = x.clone();
    for (blk, d) in problem.layout.blocks.iter().zip(&dir.0) {
        for (&i, &di) in blk.nodes.iter().zip(d) {
            y.eps[i] = y.eps[i] + t * di;
        }
    }
    for (dy, &d) in y.delta.iter_mut().zip(&dir.1) {
        *dy = *dy + t * d;
    }
    y
}

fn directional<T: Real>(problem: &Problem<'_, T>, ev: &LatentEval<T>, dir: &(Vec<Vec<T>>, Vec<T>)) -> T {
    let mut s = T::zero();
    for (blk, d) in problem.layout.blocks.iter().zip(&dir.0) {
        for (&i, &di) in blk.nodes.iter().zip(d) {
            s = s + ev.grad_eps[i] * di;
        }
    }
    for (g, d) in ev.grad_delta.iter().zip(&dir.1) {
        s = s + *g * *d;
    }
    s
}

/// Minimizes the joint nll over the latent state starting from `warm`.
///
/// Newton steps with Armijo backtracking; a Levenberg ridge is added only
/// while the Hessian is not positive definite and is never present in the
/// factorization reported at the mode.
pub fn solve<T: Real>(
    problem: &Problem<'_, T>,
    params: &ParameterSet<T>,
    warm: &LatentState<T>,
    tol: T,
    max_iter: usize,
) -> Result<InnerMode<T>, FitError> {
    let mut x = warm.clone();
    if x.eps.len() != problem.n_catchments() || x.delta.len() != problem.n_years() {
        x = LatentState::zeros(problem.n_catchments(), problem.n_years());
    }
    for (i, e) in x.eps.iter_mut().enumerate() {
        if !problem.layout.active[i] || !e.is_finite() {
            *e = T::zero();
        }
    }
    for d in &mut x.delta {
        if !d.is_finite() {
            *d = T::zero();
        }
    }

    // In single precision the gradient cannot get near 1e-8; keep the
    // tolerance above the noise floor of the scalar type.
    let tol = tol.max(T::epsilon().sqrt() * T::lit(1e-2));
    let mut iterations = 0usize;
    let mut ridge = T::zero();
    let mut polished = false;
    let polish_tol = tol * T::lit(1e-4);
    loop {
        let ev = problem.evaluate(params, &x, true, true)?;
        let gnorm = active_grad_norm(problem, &ev);
        let arrow = ev.hessian.as_ref().expect("hessian requested");
        if gnorm <= tol && (polished || gnorm <= polish_tol) {
            let factor = arrow.factor(T::zero()).map_err(|_| FitError::IndefiniteHessian)?;
            let log_det = factor.log_det()
                - T::lit(2.0) * T::from_usize(problem.layout.n_inactive).expect("count") * params.log_sigmap;
            return Ok(InnerMode {
                latent: x,
                joint_nll: ev.value,
                log_det,
                iterations,
                grad_norm: gnorm,
                factor,
            });
        }
        if iterations >= max_iter {
            return Err(FitError::InnerDiverged {
                grad_norm: gnorm.as_f64(),
                iterations,
            });
        }
        if gnorm <= tol {
            // One extra full Newton step sharpens the mode well below the
            // tolerance so outer finite differences see a smooth objective.
            polished = true;
            if let Ok(factor) = arrow.factor(T::zero()) {
                let dir = newton_direction(problem, &ev, &factor, arrow);
                let trial = step(problem, &x, &dir, T::one());
                if let Ok(tev) = problem.evaluate(params, &trial, true, false) {
                    if active_grad_norm(problem, &tev) < gnorm && tev.value <= ev.value + tol {
                        x = trial;
                        iterations += 1;
                    }
                }
            }
            continue;
        }

        let scale = arrow
            .blocks
            .iter()
            .flat_map(|b| (0..b.n).map(move |i| b.get(i, i).abs()))
            .chain((0..arrow.corner.n).map(|y| arrow.corner.get(y, y).abs()))
            .fold(T::one(), T::max);
        let mut accepted = false;
        for _ in 0..40 {
            let factor = match arrow.factor(ridge) {
                Ok(f) => f,
                Err(_) => {
                    ridge = (ridge * T::lit(10.0)).max(scale * T::lit(1e-8));
                    continue;
                }
            };
            let dir = newton_direction(problem, &ev, &factor, arrow);
            let slope = directional(problem, &ev, &dir);
            let noise = T::lit(64.0) * T::epsilon() * ev.value.abs().max(T::one());
            if slope < T::zero() && -slope <= noise {
                // The decrease is below what the objective can resolve; a
                // full step is taken and judged by the gradient instead.
                let trial = step(problem, &x, &dir, T::one());
                if let Ok(v) = problem.value(params, &trial) {
                    if v <= ev.value + noise {
                        x = trial;
                        accepted = true;
                        break;
                    }
                }
            }
            let mut t = T::one();
            for _ in 0..30 {
                let trial = step(problem, &x, &dir, t);
                if let Ok(v) = problem.value(params, &trial) {
                    if v <= ev.value + T::lit(1e-4) * t * slope {
                        x = trial;
                        accepted = true;
                        break;
                    }
                }
                t = t * T::lit(0.5);
            }
            if accepted {
                break;
            }
            ridge = (ridge * T::lit(10.0)).max(scale * T::lit(1e-8));
        }
        if !accepted {
            return Err(FitError::InnerDiverged {
                grad_norm: gnorm.as_f64(),
                iterations,
            });
        }
        iterations += 1;
        ridge = if ridge < scale * T::lit(1e-7) {
            T::zero()
        } else {
            ridge * T::lit(0.1)
        };
    }
}
