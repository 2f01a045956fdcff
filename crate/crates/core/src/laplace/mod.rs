//! Laplace-approximated marginal likelihood and its maximization.
//!
//! The latent residuals and year effects are integrated out by a Gaussian
//! approximation at their joint mode:
//!
//! `marginal = joint(mode) + 0.5 log det H - (dim / 2) log(2 pi)`.
//!
//! The mode is found by Newton iterations on the block-sparse latent
//! Hessian ([`inner`]); the marginal is minimized over the log-scale
//! parameters by projected BFGS with finite-difference gradients
//! ([`outer`]). Standard errors come from a finite-difference Hessian of
//! the marginal and are mapped to the natural scale by the delta method.

pub mod inner;
pub mod linalg;
pub mod outer;
pub mod problem;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::ModelError;
use crate::likelihood::MeasurementSet;
use crate::network::CatchmentNetwork;
use crate::scalar::Real;
use crate::sourcemodel::{LatentState, ParameterSet, SourceDesign};

pub use inner::InnerMode;
pub use problem::Problem;

use linalg::{Cholesky, Dense};
use outer::{fd_gradient, fd_hessian, minimize, OuterObjective};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("latent mode search did not converge after {iterations} steps (gradient norm {grad_norm:e})")]
    InnerDiverged { grad_norm: f64, iterations: usize },
    #[error("latent Hessian is not positive definite at the reported mode")]
    IndefiniteHessian,
    #[error("no sampled sub-catchments")]
    NoSampledCatchments,
    #[error("invalid fit configuration: {0}")]
    InvalidConfig(String),
}

/// Conditions that leave a fit usable but flagged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FitWarning {
    NotConverged { gradient_norm: f64 },
    SingularOuterHessian,
    AtBound { parameter: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    /// Gradient-norm tolerance for the latent mode.
    pub inner_tol: f64,
    /// Projected gradient-norm tolerance for the parameters.
    pub outer_tol: f64,
    pub max_inner: usize,
    pub max_outer: usize,
    /// Starting point; defaults are derived from the data when absent.
    pub init: Option<ParameterSet<f64>>,
    /// Seeds the jitter applied when the quasi-Newton search stalls.
    pub seed: u64,
    /// Relative step for [`gradient_check`].
    pub fd_step: f64,
    /// Relative step for the default outer gradient and the SE Hessian.
    pub outer_fd_step: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            inner_tol: 1e-8,
            outer_tol: 1e-6,
            max_inner: 100,
            max_outer: 500,
            init: None,
            seed: 0,
            fd_step: 1e-6,
            outer_fd_step: 1e-3,
        }
    }
}

impl FitConfig {
    fn validate(&self) -> Result<(), FitError> {
        let positive = [
            ("inner_tol", self.inner_tol),
            ("outer_tol", self.outer_tol),
            ("fd_step", self.fd_step),
            ("outer_fd_step", self.outer_fd_step),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(FitError::InvalidConfig(format!("{name} must be > 0")));
            }
        }
        if self.max_inner == 0 || self.max_outer == 0 {
            return Err(FitError::InvalidConfig("iteration caps must be >= 1".into()));
        }
        Ok(())
    }
}

/// One row of the parameter table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterEstimate<T> {
    pub name: String,
    pub estimate: T,
    pub se: Option<T>,
    /// `estimate / se`.
    pub tfactor: Option<T>,
    pub at_bound: bool,
    /// Computed from other estimates rather than fitted directly.
    pub derived: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Iterations {
    pub outer: usize,
    pub inner: usize,
    pub marginal_evaluations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult<T> {
    pub parameters: Vec<ParameterEstimate<T>>,
    pub params_hat: ParameterSet<T>,
    pub latent_hat: LatentState<T>,
    /// Laplace-Gaussian standard deviation of each latent (approximate).
    pub latent_sd: LatentState<T>,
    pub catchment_ids: Vec<String>,
    pub years: Vec<i32>,
    pub sampled: Vec<bool>,
    pub factor_names: Vec<String>,
    pub n_measurements: usize,
    pub marginal_nll: T,
    pub hessian_logdet: T,
    pub converged: bool,
    pub gradient_norm: T,
    pub iterations: Iterations,
    pub warnings: Vec<FitWarning>,
}

/// T-factor: estimate over standard error, when the error is positive.
pub fn tfactor<T: Real>(estimate: T, se: T) -> Option<T> {
    (se > T::zero() && se.is_finite()).then(|| estimate / se)
}

impl<T: Real> FitResult<T> {
    pub fn parameter(&self, name: &str) -> Option<&ParameterEstimate<T>> {
        self.parameters.iter().find(|p| p.name == name)
    }

    pub fn beta0(&self) -> T {
        self.params_hat.beta0()
    }
}

/// Closed-form part and mode search of the Laplace approximation.
pub fn laplace_at<T: Real>(
    problem: &Problem<'_, T>,
    params: &ParameterSet<T>,
    warm: &LatentState<T>,
    inner_tol: T,
    max_inner: usize,
) -> Result<(T, InnerMode<T>), FitError> {
    let mode = inner::solve(problem, params, warm, inner_tol, max_inner)?;
    let dim = T::from_usize(problem.n_latent()).expect("dimension fits");
    let two_pi = T::lit(2.0) * T::PI();
    let v = mode.joint_nll + T::lit(0.5) * mode.log_det - T::lit(0.5) * dim * two_pi.ln();
    if !v.is_finite() {
        return Err(ModelError::NonFinite("marginal negative log-likelihood").into());
    }
    Ok((v, mode))
}

/// Latent posterior mode for fixed parameters.
pub fn inner_mode<T: Real>(
    params: &ParameterSet<T>,
    data: &MeasurementSet<T>,
    net: &CatchmentNetwork<T>,
    design: &SourceDesign<T>,
    warm_start: &LatentState<T>,
) -> Result<InnerMode<T>, FitError> {
    let cfg = FitConfig::default();
    let problem = Problem::new(net, design, data)?;
    inner::solve(&problem, params, warm_start, T::lit(cfg.inner_tol), cfg.max_inner)
}

/// Laplace-approximated marginal negative log-likelihood.
pub fn marginal_nll<T: Real>(
    params: &ParameterSet<T>,
    data: &MeasurementSet<T>,
    net: &CatchmentNetwork<T>,
    design: &SourceDesign<T>,
) -> Result<T, FitError> {
    let cfg = FitConfig::default();
    let problem = Problem::new(net, design, data)?;
    let warm = LatentState::zeros(problem.n_catchments(), problem.n_years());
    Ok(laplace_at(&problem, params, &warm, T::lit(cfg.inner_tol), cfg.max_inner)?.0)
}

/// The marginal nll as a function of the internal parameter vector, with a
/// fixed warm start for the latent mode.
pub struct MarginalObjective<'p, 'a, T> {
    pub problem: &'p Problem<'a, T>,
    pub warm: LatentState<T>,
    pub inner_tol: T,
    pub max_inner: usize,
}

impl<T: Real> MarginalObjective<'_, '_, T> {
    pub fn value(&self, u: &[T]) -> Result<T, FitError> {
        let params = ParameterSet::from_internal(u);
        Ok(laplace_at(self.problem, &params, &self.warm, self.inner_tol, self.max_inner)?.0)
    }
}

/// Source of outer gradients. The default is central finite differences;
/// an exact-derivative implementation can be supplied with the same
/// contract.
pub trait GradientHook<T: Real>: Sync {
    fn gradient(&self, objective: &MarginalObjective<'_, '_, T>, u: &[T]) -> Option<Vec<T>>;
}

/// Five-point central differences with a step relative to `|u_i|`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CentralDifference {
    pub rel_step: f64,
}

impl<T: Real> GradientHook<T> for CentralDifference {
    fn gradient(&self, objective: &MarginalObjective<'_, '_, T>, u: &[T]) -> Option<Vec<T>> {
        fd_gradient(|x| objective.value(x).ok(), u, T::lit(self.rel_step))
    }
}

struct FitObjective<'p, 'a, 'h, T> {
    problem: &'p Problem<'a, T>,
    hook: &'h dyn GradientHook<T>,
    warm: LatentState<T>,
    inner_tol: T,
    max_inner: usize,
    inner_steps: usize,
    evaluations: usize,
}

impl<T: Real> OuterObjective<T> for FitObjective<'_, '_, '_, T> {
    fn value(&mut self, x: &[T]) -> Option<T> {
        let params = ParameterSet::from_internal(x);
        self.evaluations += 1;
        match laplace_at(self.problem, &params, &self.warm, self.inner_tol, self.max_inner) {
            Ok((v, mode)) => {
                self.inner_steps += mode.iterations;
                self.warm = mode.latent;
                Some(v)
            }
            Err(e) => {
                log::debug!("marginal evaluation failed: {e}");
                None
            }
        }
    }

    fn gradient(&mut self, x: &[T]) -> Option<Vec<T>> {
        let objective = MarginalObjective {
            problem: self.problem,
            warm: self.warm.clone(),
            inner_tol: self.inner_tol,
            max_inner: self.max_inner,
        };
        self.evaluations += 4 * x.len();
        self.hook.gradient(&objective, x)
    }
}

/// Data-driven starting point.
pub fn default_init<T: Real>(data: &MeasurementSet<T>, n_factors: usize) -> ParameterSet<T> {
    let detected: Vec<T> = data
        .observations()
        .iter()
        .filter(|o| !o.censored)
        .map(|o| o.log_value)
        .collect();
    let pool: Vec<T> = if detected.is_empty() {
        data.observations().iter().map(|o| o.log_value).collect()
    } else {
        detected
    };
    let mean = pool.iter().copied().sum::<T>() / T::from_usize(pool.len().max(1)).expect("count");
    ParameterSet {
        log_beta0: mean,
        log_betak: vec![T::zero(); n_factors],
        log_theta: T::zero(),
        log_sigma0: T::lit(0.5f64.ln()),
        log_sigmap: T::lit(0.5f64.ln()),
        log_sigmay: T::lit(0.1f64.ln()),
    }
}

/// Box on the internal (log) scale, in [`ParameterSet::to_internal`] order.
pub fn parameter_bounds<T: Real>(n_factors: usize) -> (Vec<T>, Vec<T>) {
    let ln = |x: f64| T::lit(x.ln());
    let mut lo = vec![ln(1e-4), ln(1e-4), ln(1e-4), ln(1e-6), ln(1e-12)];
    let mut hi = vec![ln(1e3), ln(1e3), ln(1e3), ln(1e6), ln(1e12)];
    lo.extend(std::iter::repeat_n(ln(1e-8), n_factors));
    hi.extend(std::iter::repeat_n(ln(1e8), n_factors));
    (lo, hi)
}

/// Maximum-likelihood fit with the default finite-difference gradient.
pub fn fit<T: Real>(
    data: &MeasurementSet<T>,
    net: &CatchmentNetwork<T>,
    design: &SourceDesign<T>,
    config: &FitConfig,
) -> Result<FitResult<T>, FitError> {
    let hook = CentralDifference {
        rel_step: config.outer_fd_step,
    };
    fit_with_gradient(data, net, design, config, &hook)
}

/// Maximum-likelihood fit with a caller-supplied outer gradient.
pub fn fit_with_gradient<T: Real>(
    data: &MeasurementSet<T>,
    net: &CatchmentNetwork<T>,
    design: &SourceDesign<T>,
    config: &FitConfig,
    hook: &dyn GradientHook<T>,
) -> Result<FitResult<T>, FitError> {
    config.validate()?;
    if data.sampled().is_empty() {
        return Err(FitError::NoSampledCatchments);
    }
    let problem = Problem::new(net, design, data)?;
    let p = design.n_factors();
    let init: ParameterSet<T> = match &config.init {
        Some(init) => {
            if init.n_factors() != p {
                return Err(FitError::InvalidConfig(format!(
                    "initial values have {} source coefficients, design has {p}",
                    init.n_factors()
                )));
            }
            ParameterSet::from_internal(&init.to_internal().into_iter().map(T::lit).collect::<Vec<_>>())
        }
        None => default_init(data, p),
    };
    let (lo, hi) = parameter_bounds::<T>(p);
    let inner_tol = T::lit(config.inner_tol);

    let mut objective = FitObjective {
        problem: &problem,
        hook,
        warm: LatentState::zeros(problem.n_catchments(), problem.n_years()),
        inner_tol,
        max_inner: config.max_inner,
        inner_steps: 0,
        evaluations: 0,
    };
    let u0 = init.to_internal();
    let outcome = minimize(
        &mut objective,
        &u0,
        &lo,
        &hi,
        T::lit(config.outer_tol),
        config.max_outer,
        config.seed,
    );
    let outcome = match outcome {
        Some(o) => o,
        None => {
            // Surface the underlying error from the starting point.
            let params = ParameterSet::from_internal(&u0);
            laplace_at(&problem, &params, &objective.warm, inner_tol, config.max_inner)?;
            return Err(FitError::InvalidConfig("objective failed at the starting point".into()));
        }
    };

    let params_hat = ParameterSet::from_internal(&outcome.x);
    let (marginal, mode) = laplace_at(&problem, &params_hat, &objective.warm, inner_tol, config.max_inner)?;
    let latent_sd = mode.latent_sd(&problem, &params_hat);

    let names = ParameterSet::<T>::names(p);
    let mut warnings = Vec::new();
    if !outcome.converged {
        warnings.push(FitWarning::NotConverged {
            gradient_norm: outcome.projected_norm.as_f64(),
        });
    }
    let span = |i: usize| (hi[i] - lo[i]) * T::lit(1e-9);
    let at_bound: Vec<bool> = (0..outcome.x.len())
        .map(|i| outcome.x[i] <= lo[i] + span(i) || outcome.x[i] >= hi[i] - span(i))
        .collect();
    for (i, &b) in at_bound.iter().enumerate() {
        if b {
            warnings.push(FitWarning::AtBound {
                parameter: names[i].clone(),
            });
        }
    }

    // Outer Hessian over the coordinates not held at a bound.
    let free: Vec<usize> = (0..outcome.x.len()).filter(|&i| !at_bound[i]).collect();
    let mode_warm = mode.latent.clone();
    let value_at = |u: &[T]| -> Option<T> {
        let params = ParameterSet::from_internal(u);
        laplace_at(&problem, &params, &mode_warm, inner_tol, config.max_inner)
            .ok()
            .map(|r| r.0)
    };
    let mut se_internal: Vec<Option<T>> = vec![None; outcome.x.len()];
    let hess = fd_hessian(value_at, &outcome.x, &free, T::lit(config.outer_fd_step));
    let k = free.len();
    let covariance_diag = hess.and_then(|h| {
        let mut m = Dense::zeros(k);
        m.data = h;
        let chol = Cholesky::new(&m, T::zero()).ok()?;
        Some(chol.inverse_diagonal())
    });
    match covariance_diag {
        Some(diag) => {
            for (a, &i) in free.iter().enumerate() {
                se_internal[i] = Some(diag[a].sqrt());
            }
        }
        None => warnings.push(FitWarning::SingularOuterHessian),
    }

    let natural = params_hat.to_natural();
    let mut parameters: Vec<ParameterEstimate<T>> = names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let se = se_internal[i].map(|s| natural[i] * s);
            ParameterEstimate {
                name: name.clone(),
                estimate: natural[i],
                se,
                tfactor: se.and_then(|s| tfactor(natural[i], s)),
                at_bound: at_bound[i],
                derived: false,
            }
        })
        .collect();
    for (k, beta) in params_hat.betak().into_iter().enumerate() {
        parameters.push(ParameterEstimate {
            name: format!("beta_{}", k + 1),
            estimate: params_hat.beta0() * beta,
            se: None,
            tfactor: None,
            at_bound: false,
            derived: true,
        });
    }

    Ok(FitResult {
        parameters,
        latent_hat: mode.latent,
        latent_sd,
        catchment_ids: net.catchments().iter().map(|c| c.id.clone()).collect(),
        years: data.years().to_vec(),
        sampled: data.sampled_mask(),
        factor_names: design.factor_names().to_vec(),
        n_measurements: data.len(),
        marginal_nll: marginal,
        hessian_logdet: mode.log_det,
        converged: outcome.converged,
        gradient_norm: outcome.projected_norm,
        iterations: Iterations {
            outer: outcome.iterations,
            inner: objective.inner_steps,
            marginal_evaluations: objective.evaluations,
        },
        warnings,
        params_hat,
    })
}

/// Per-coordinate comparison of a gradient hook against central differences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck<T> {
    pub hook: Vec<T>,
    pub finite_difference: Vec<T>,
    /// `|hook - fd| / max(|fd|, 1e-8)`.
    pub rel_deviation: Vec<T>,
    pub max_deviation: T,
    /// Coordinates whose deviation exceeds `threshold`.
    pub flagged: Vec<usize>,
    pub threshold: T,
}

pub fn gradient_check<T: Real>(
    params: &ParameterSet<T>,
    data: &MeasurementSet<T>,
    net: &CatchmentNetwork<T>,
    design: &SourceDesign<T>,
    hook: &dyn GradientHook<T>,
    config: &FitConfig,
    threshold: T,
) -> Result<GradientCheck<T>, FitError> {
    let problem = Problem::new(net, design, data)?;
    let tol = T::lit(config.inner_tol);
    let warm0 = LatentState::zeros(problem.n_catchments(), problem.n_years());
    let (_, mode) = laplace_at(&problem, params, &warm0, tol, config.max_inner)?;
    let objective = MarginalObjective {
        problem: &problem,
        warm: mode.latent,
        inner_tol: tol,
        max_inner: config.max_inner,
    };
    let u = params.to_internal();
    let reference = CentralDifference {
        rel_step: config.fd_step,
    };
    let fd = GradientHook::<T>::gradient(&reference, &objective, &u)
        .ok_or(ModelError::NonFinite("finite-difference gradient"))?;
    let hk = hook
        .gradient(&objective, &u)
        .ok_or(ModelError::NonFinite("gradient hook"))?;
    let rel: Vec<T> = hk
        .iter()
        .zip(&fd)
        .map(|(&h, &f)| (h - f).abs() / f.abs().max(T::lit(1e-8)))
        .collect();
    let max_deviation = rel.iter().copied().fold(T::zero(), T::max);
    let flagged = rel
        .iter()
        .enumerate()
        .filter(|(_, &r)| r > threshold)
        .map(|(i, _)| i)
        .collect();
    Ok(GradientCheck {
        hook: hk,
        finite_difference: fd,
        rel_deviation: rel,
        max_deviation,
        flagged,
        threshold,
    })
}
