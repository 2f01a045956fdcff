//! Per-catchment predictions, network mass budgets and year-effect series
//! from a fitted model.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::ModelError;
use crate::laplace::FitResult;
use crate::network::CatchmentNetwork;
use crate::scalar::{pairwise_sum, Real};
use crate::sourcemodel::{propagate, removal_fluxes, LatentState, ParameterSet, SourceDesign};

/// Converts `µg/l × m³/d` into kg/day.
pub const KG_PER_DAY: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord<T> {
    pub catchment: String,
    pub lc_hat: T,
    pub c_hat: T,
    /// Approximate posterior sd of the log concentration (sd of the residual).
    pub sd_lc: T,
    pub sampled: bool,
    pub outflow_mass: T,
    pub retained_mass: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MassBudget<T> {
    pub marine_export: T,
    pub total_retained: T,
    /// Sum of the mass entering each sub-catchment locally.
    pub total_input: T,
    /// `sum_i beta_0 * component k of S_i`, one entry per source factor.
    pub per_source_input: Vec<T>,
    pub source_names: Vec<String>,
    /// `(total_input - marine_export - total_retained) / total_input`.
    pub closure_residual: T,
    /// Multiply mass fluxes by this to obtain kg/day when Q is in m³/d and
    /// concentrations are in µg/l.
    pub kg_per_day_factor: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct YearEffect<T> {
    pub year: i32,
    pub delta: T,
    pub lower: T,
    pub upper: T,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PredictError {
    #[error("explained deviation undefined: sigma_p2 = {sigma_p2} exceeds sigma_p1 = {sigma_p1}")]
    NegativeExplainedVariance { sigma_p1: f64, sigma_p2: f64 },
    #[error("standard deviations must be finite and non-negative")]
    InvalidDeviation,
}

fn check_dims<T: Real>(fit: &FitResult<T>, net: &CatchmentNetwork<T>) -> Result<(), ModelError> {
    if fit.latent_hat.eps.len() != net.len() || fit.catchment_ids.len() != net.len() {
        return Err(ModelError::DimensionMismatch {
            what: "fitted residuals",
            expected: net.len(),
            found: fit.latent_hat.eps.len(),
        });
    }
    if let Some(i) = (0..net.len()).find(|&i| fit.catchment_ids[i] != net.id(i)) {
        return Err(ModelError::UnknownCatchment(fit.catchment_ids[i].clone()));
    }
    Ok(())
}

/// Propagates the fitted parameters with the posterior-mode residuals.
pub fn predict_all<T: Real>(
    fit: &FitResult<T>,
    net: &CatchmentNetwork<T>,
    design: &SourceDesign<T>,
) -> Result<Vec<PredictionRecord<T>>, ModelError> {
    check_dims(fit, net)?;
    let prop = propagate(net, design, &fit.params_hat, &fit.latent_hat)?;
    let removal = removal_fluxes(net, &fit.params_hat, &prop);
    Ok((0..net.len())
        .map(|i| PredictionRecord {
            catchment: net.id(i).to_string(),
            lc_hat: prop.lc[i],
            c_hat: prop.c[i],
            sd_lc: fit.latent_sd.eps[i],
            sampled: fit.sampled[i],
            outflow_mass: prop.c[i] * net.catchment(i).q_total,
            retained_mass: removal.per_catchment[i],
        })
        .collect())
}

/// Network-scale mass budget at the fitted state.
pub fn mass_budget<T: Real>(
    fit: &FitResult<T>,
    net: &CatchmentNetwork<T>,
    design: &SourceDesign<T>,
) -> Result<MassBudget<T>, ModelError> {
    check_dims(fit, net)?;
    network_budget(net, design, &fit.params_hat, &fit.latent_hat)
}

/// Mass budget for arbitrary parameters and residuals, e.g. a simulated truth.
pub fn network_budget<T: Real>(
    net: &CatchmentNetwork<T>,
    design: &SourceDesign<T>,
    params: &ParameterSet<T>,
    latent: &LatentState<T>,
) -> Result<MassBudget<T>, ModelError> {
    let prop = propagate(net, design, params, latent)?;
    let n = net.len();
    let removal = removal_fluxes(net, params, &prop);
    let outflow: Vec<T> = (0..n).map(|i| prop.c[i] * net.catchment(i).q_total).collect();
    let export: Vec<T> = (0..n)
        .filter(|&i| net.is_marine_outlet(i))
        .map(|i| outflow[i])
        .collect();
    // Local input = what leaves (outflow + retention) minus what arrived.
    let local: Vec<T> = (0..n)
        .map(|i| {
            let arrived: T = net.upstream(i).iter().map(|&j| outflow[j]).sum();
            outflow[i] + removal.per_catchment[i] - arrived
        })
        .collect();
    let total_input = pairwise_sum(&local);
    let marine_export = pairwise_sum(&export);
    let total_retained = removal.total;

    let n_sources = design.n_factors() + 1;
    let per_source_input = (0..n_sources)
        .map(|k| {
            let parts: Vec<T> = (0..n).map(|i| design.source_components(params, i)[k]).collect();
            pairwise_sum(&parts)
        })
        .collect();
    let closure_residual = if total_input != T::zero() {
        (total_input - marine_export - total_retained) / total_input
    } else {
        marine_export + total_retained
    };
    Ok(MassBudget {
        marine_export,
        total_retained,
        total_input,
        per_source_input,
        source_names: design.factor_names().to_vec(),
        closure_residual,
        kg_per_day_factor: KG_PER_DAY,
    })
}

/// `delta_y` with the band `delta_y ± 1.96 sigma_Y`.
pub fn year_effects<T: Real>(fit: &FitResult<T>) -> Vec<YearEffect<T>> {
    let half = T::lit(1.96) * fit.params_hat.sigmay();
    fit.years
        .iter()
        .zip(&fit.latent_hat.delta)
        .map(|(&year, &delta)| YearEffect {
            year,
            delta,
            lower: delta - half,
            upper: delta + half,
        })
        .collect()
}

/// Deviation explained by moving from a nested model with residual sd
/// `sigma_p1` to one with `sigma_p2`: `sqrt(sigma_p1² - sigma_p2²)`.
pub fn variance_decomposition<T: Real>(sigma_p1: T, sigma_p2: T) -> Result<T, PredictError> {
    if !(sigma_p1.is_finite() && sigma_p2.is_finite()) || sigma_p1 < T::zero() || sigma_p2 < T::zero() {
        return Err(PredictError::InvalidDeviation);
    }
    if sigma_p2 > sigma_p1 {
        return Err(PredictError::NegativeExplainedVariance {
            sigma_p1: sigma_p1.as_f64(),
            sigma_p2: sigma_p2.as_f64(),
        });
    }
    Ok(((sigma_p1 - sigma_p2) * (sigma_p1 + sigma_p2)).sqrt())
}
