//! Leave-n-out cross-validation over sampled sub-catchments.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::laplace::{fit, FitConfig, FitError, FitResult};
use crate::likelihood::MeasurementSet;
use crate::network::CatchmentNetwork;
use crate::predict::predict_all;
use crate::scalar::Real;
use crate::sourcemodel::{ParameterSet, SourceDesign};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CvError {
    #[error("{sampled} sampled catchments cannot form {k} folds (need at least 2 folds and one catchment per fold)")]
    TooFewSampled { sampled: usize, k: usize },
    #[error("fold plan names unknown or unsampled catchment `{0}`")]
    UnknownCatchment(String),
    #[error("fold plan does not hold out every sampled catchment exactly once")]
    IncompletePlan,
    #[error("full-data fit failed: {0}")]
    FullFit(FitError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CvPlan {
    pub k: usize,
    pub seed: u64,
    /// Held-out catchment ids per fold, each sorted.
    pub folds: Vec<Vec<String>>,
}

/// Seeded shuffle of the sorted ids followed by a round-robin split.
pub fn make_folds(sampled: &[String], k: usize, seed: u64) -> Result<CvPlan, CvError> {
    let mut ids = sampled.to_vec();
    ids.sort();
    ids.dedup();
    if k < 2 || ids.len() < k {
        return Err(CvError::TooFewSampled {
            sampled: ids.len(),
            k,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let mut folds = vec![Vec::new(); k];
    for (i, id) in ids.into_iter().enumerate() {
        folds[i % k].push(id);
    }
    for f in &mut folds {
        f.sort();
    }
    Ok(CvPlan { k, seed, folds })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvPair<T> {
    pub catchment: String,
    pub fold: usize,
    pub lc_with: T,
    pub lc_without: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary<T> {
    pub fold: usize,
    pub held_out: usize,
    /// Measurements entering the reduced likelihood.
    pub n_measurements: usize,
    pub converged: bool,
    pub marginal_nll: Option<T>,
    pub beta0_hat: Option<T>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult<T> {
    pub plan: CvPlan,
    /// Ordered by fold, then catchment id.
    pub pairs: Vec<CvPair<T>>,
    /// Squared Pearson correlation of the pairs; absent when undefined.
    pub r2: Option<T>,
    pub folds: Vec<FoldSummary<T>>,
    pub full_fit_converged: bool,
    pub full_beta0_hat: T,
    pub warnings: Vec<String>,
}

/// Squared Pearson correlation, `None` for fewer than two points or zero
/// variance.
pub fn squared_correlation<T: Real>(xs: &[T], ys: &[T]) -> Option<T> {
    let n = xs.len();
    if n < 2 || ys.len() != n {
        return None;
    }
    let nf = T::from_usize(n)?;
    let mx = xs.iter().copied().sum::<T>() / nf;
    let my = ys.iter().copied().sum::<T>() / nf;
    let (mut sxy, mut sxx, mut syy) = (T::zero(), T::zero(), T::zero());
    for (&x, &y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy = sxy + dx * dy;
        sxx = sxx + dx * dx;
        syy = syy + dy * dy;
    }
    if sxx <= T::zero() || syy <= T::zero() {
        return None;
    }
    let r2 = sxy * sxy / (sxx * syy);
    Some(r2.min(T::one()))
}

fn to_f64_params<T: Real>(p: &ParameterSet<T>) -> ParameterSet<f64> {
    ParameterSet::from_internal(&p.to_internal().iter().map(|v| v.as_f64()).collect::<Vec<_>>())
}

/// One full fit plus one reduced fit per fold; every reduced fit
/// re-estimates all parameters without the fold's measurements.
pub fn run_cv<T: Real>(
    data: &MeasurementSet<T>,
    net: &CatchmentNetwork<T>,
    design: &SourceDesign<T>,
    plan: &CvPlan,
    config: &FitConfig,
) -> Result<CvResult<T>, CvError> {
    let sampled_mask = data.sampled_mask();
    let mut seen = vec![false; net.len()];
    let mut fold_idx: Vec<Vec<usize>> = Vec::with_capacity(plan.folds.len());
    for fold in &plan.folds {
        let mut idx = Vec::with_capacity(fold.len());
        for id in fold {
            let i = net
                .index_of(id)
                .filter(|&i| sampled_mask[i])
                .ok_or_else(|| CvError::UnknownCatchment(id.clone()))?;
            if seen[i] {
                return Err(CvError::IncompletePlan);
            }
            seen[i] = true;
            idx.push(i);
        }
        fold_idx.push(idx);
    }
    if data.sampled().iter().any(|&i| !seen[i]) {
        return Err(CvError::IncompletePlan);
    }

    let full: FitResult<T> = fit(data, net, design, config).map_err(CvError::FullFit)?;
    let with = predict_all(&full, net, design).map_err(|e| CvError::FullFit(e.into()))?;
    let mut reduced_config = config.clone();
    if reduced_config.init.is_none() {
        reduced_config.init = Some(to_f64_params(&full.params_hat));
    }

    let outcomes: Vec<(FoldSummary<T>, Option<Vec<T>>)> = fold_idx
        .par_iter()
        .enumerate()
        .map(|(f, held)| {
            let mut summary = FoldSummary {
                fold: f,
                held_out: held.len(),
                n_measurements: 0,
                converged: false,
                marginal_nll: None,
                beta0_hat: None,
                error: None,
            };
            let reduced = match data.without_catchments(net, held) {
                Ok(r) => r,
                Err(e) => {
                    summary.error = Some(e.to_string());
                    return (summary, None);
                }
            };
            summary.n_measurements = reduced.len();
            let result = fit(&reduced, net, design, &reduced_config).and_then(|r| {
                let preds = predict_all(&r, net, design)?;
                Ok((r, preds))
            });
            match result {
                Ok((r, preds)) => {
                    summary.converged = r.converged;
                    summary.marginal_nll = Some(r.marginal_nll);
                    summary.beta0_hat = Some(r.beta0());
                    (summary, Some(held.iter().map(|&i| preds[i].lc_hat).collect()))
                }
                Err(e) => {
                    summary.error = Some(e.to_string());
                    (summary, None)
                }
            }
        })
        .collect();

    let mut pairs = Vec::new();
    let mut folds = Vec::with_capacity(outcomes.len());
    let mut warnings = Vec::new();
    if !full.converged {
        warnings.push("full-data fit did not converge".to_string());
    }
    for ((summary, without), held) in outcomes.into_iter().zip(&fold_idx) {
        match &without {
            Some(lcs) => {
                for (&i, &lc) in held.iter().zip(lcs) {
                    pairs.push(CvPair {
                        catchment: net.id(i).to_string(),
                        fold: summary.fold,
                        lc_with: with[i].lc_hat,
                        lc_without: lc,
                    });
                }
                if !summary.converged {
                    warnings.push(format!("fold {} did not converge", summary.fold));
                }
            }
            None => warnings.push(format!(
                "fold {} failed; its {} catchments are missing from r2",
                summary.fold, summary.held_out
            )),
        }
        folds.push(summary);
    }
    let xs: Vec<T> = pairs.iter().map(|p| p.lc_with).collect();
    let ys: Vec<T> = pairs.iter().map(|p| p.lc_without).collect();
    Ok(CvResult {
        plan: plan.clone(),
        r2: squared_correlation(&xs, &ys),
        pairs,
        folds,
        full_fit_converged: full.converged,
        full_beta0_hat: full.beta0(),
        warnings,
    })
}
