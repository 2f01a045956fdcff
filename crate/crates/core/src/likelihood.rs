//! Left-censored log-normal measurement model and the joint negative
//! log-likelihood over measurements and latent effects.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::ModelError;
use crate::network::CatchmentNetwork;
use crate::scalar::{pairwise_sum, Real};
use crate::sourcemodel::{propagate, LatentState, ParameterSet, SourceDesign};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeasurementError {
    #[error("measurement for unknown sub-catchment `{0}`")]
    UnknownCatchment(String),
    #[error("sub-catchment `{catchment}` year {year}: detection limit must be finite and > 0")]
    InvalidDetectionLimit { catchment: String, year: i32 },
    #[error("sub-catchment `{catchment}` year {year}: uncensored value {value} is below detection limit {detection_limit}")]
    BelowDetectionLimit {
        catchment: String,
        year: i32,
        value: f64,
        detection_limit: f64,
    },
    #[error("sub-catchment `{catchment}` year {year}: uncensored measurement has no finite value")]
    MissingValue { catchment: String, year: i32 },
    #[error("measurement set is empty")]
    Empty,
}

/// One reported sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement<T> {
    pub catchment: String,
    pub year: i32,
    /// Position among samples sharing `(catchment, year)`; assigned on ingestion.
    pub replicate: u32,
    /// Measured concentration; ignored when censored.
    pub value: Option<T>,
    pub detection_limit: T,
    /// Reported below the detection limit.
    pub censored: bool,
}

impl<T: Real> Measurement<T> {
    pub fn detected(catchment: impl Into<String>, year: i32, value: T, detection_limit: T) -> Self {
        Self {
            catchment: catchment.into(),
            year,
            replicate: 0,
            value: Some(value),
            detection_limit,
            censored: false,
        }
    }

    pub fn below_limit(catchment: impl Into<String>, year: i32, detection_limit: T) -> Self {
        Self {
            catchment: catchment.into(),
            year,
            replicate: 0,
            value: None,
            detection_limit,
            censored: true,
        }
    }
}

/// A measurement resolved against the network, on the log scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation<T> {
    pub catchment: usize,
    /// Index into [`MeasurementSet::years`].
    pub year: usize,
    /// `log z` when detected, `log D` when censored.
    pub log_value: T,
    pub censored: bool,
}

/// Validated measurements in a canonical order.
///
/// Observations are sorted by catchment, year, censoring flag and value, so
/// any permutation of the input yields bit-identical likelihood sums.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSet<T> {
    measurements: Vec<Measurement<T>>,
    obs: Vec<Observation<T>>,
    years: Vec<i32>,
    sampled: Vec<usize>,
    n_catchments: usize,
}

impl<T: Real> MeasurementSet<T> {
    pub fn new(
        net: &CatchmentNetwork<T>,
        measurements: Vec<Measurement<T>>,
    ) -> Result<Self, MeasurementError> {
        if measurements.is_empty() {
            return Err(MeasurementError::Empty);
        }
        let mut keyed = Vec::with_capacity(measurements.len());
        for m in measurements {
            let i = net
                .index_of(&m.catchment)
                .ok_or_else(|| MeasurementError::UnknownCatchment(m.catchment.clone()))?;
            if !(m.detection_limit.is_finite() && m.detection_limit > T::zero()) {
                return Err(MeasurementError::InvalidDetectionLimit {
                    catchment: m.catchment,
                    year: m.year,
                });
            }
            let log_value = if m.censored {
                m.detection_limit.ln()
            } else {
                let v = m
                    .value
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| MeasurementError::MissingValue {
                        catchment: m.catchment.clone(),
                        year: m.year,
                    })?;
                if v < m.detection_limit {
                    return Err(MeasurementError::BelowDetectionLimit {
                        catchment: m.catchment,
                        year: m.year,
                        value: v.as_f64(),
                        detection_limit: m.detection_limit.as_f64(),
                    });
                }
                v.ln()
            };
            keyed.push((i, log_value, m));
        }
        keyed.sort_by(|a, b| {
            a.0.cmp(&b.0)
                .then(a.2.year.cmp(&b.2.year))
                .then(a.2.censored.cmp(&b.2.censored))
                .then(a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal))
                .then(
                    a.2.detection_limit
                        .partial_cmp(&b.2.detection_limit)
                        .unwrap_or(Ordering::Equal),
                )
        });

        let mut years: Vec<i32> = keyed.iter().map(|k| k.2.year).collect();
        years.sort_unstable();
        years.dedup();
        let mut sampled: Vec<usize> = keyed.iter().map(|k| k.0).collect();
        sampled.dedup();

        let mut obs = Vec::with_capacity(keyed.len());
        let mut out = Vec::with_capacity(keyed.len());
        let mut prev: Option<(usize, i32)> = None;
        let mut rep = 0u32;
        for (i, log_value, mut m) in keyed {
            rep = if prev == Some((i, m.year)) { rep + 1 } else { 0 };
            prev = Some((i, m.year));
            m.replicate = rep;
            if m.censored {
                m.value = None;
            }
            obs.push(Observation {
                catchment: i,
                year: years.binary_search(&m.year).expect("year collected"),
                log_value,
                censored: m.censored,
            });
            out.push(m);
        }
        Ok(Self {
            measurements: out,
            obs,
            years,
            sampled,
            n_catchments: net.len(),
        })
    }

    /// Drops every measurement taken at one of `excluded` (network indices).
    pub fn without_catchments(
        &self,
        net: &CatchmentNetwork<T>,
        excluded: &[usize],
    ) -> Result<Self, MeasurementError> {
        let kept = self
            .measurements
            .iter()
            .zip(&self.obs)
            .filter(|(_, o)| !excluded.contains(&o.catchment))
            .map(|(m, _)| m.clone())
            .collect();
        Self::new(net, kept)
    }

    pub fn measurements(&self) -> &[Measurement<T>] {
        &self.measurements
    }

    pub fn observations(&self) -> &[Observation<T>] {
        &self.obs
    }

    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    /// Sorted distinct calendar years.
    pub fn years(&self) -> &[i32] {
        &self.years
    }

    /// Network indices of catchments with at least one measurement, sorted.
    pub fn sampled(&self) -> &[usize] {
        &self.sampled
    }

    pub fn n_catchments(&self) -> usize {
        self.n_catchments
    }

    pub fn n_censored(&self) -> usize {
        self.obs.iter().filter(|o| o.censored).count()
    }

    /// Flag per network index.
    pub fn sampled_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.n_catchments];
        for &i in &self.sampled {
            mask[i] = true;
        }
        mask
    }
}

/// `log Phi(z)` for the standard normal, accurate far into the lower tail.
pub fn log_normal_cdf<T: Real>(z: T) -> T {
    if z.is_nan() {
        return z;
    }
    if z < T::lit(-8.0) {
        // Phi(z) = phi(z) / (x + 1/(x + 2/(x + 3/(x + ...)))) with x = -z,
        // evaluated bottom-up; 60 terms is far past convergence for x >= 8.
        let x = -z;
        let mut frac = x;
        for k in (1..=60).rev() {
            frac = x + T::lit(f64::from(k)) / frac;
        }
        return -T::lit(0.5) * z * z - T::ln_sqrt_2pi() - frac.ln();
    }
    let zf = z.as_f64();
    let t = zf / std::f64::consts::SQRT_2;
    let v = if zf < 0.0 {
        (0.5 * libm::erfc(-t)).ln()
    } else {
        (-0.5 * libm::erfc(t)).ln_1p()
    };
    T::lit(v)
}

/// `log phi(z)` for the standard normal.
#[inline]
pub fn log_normal_pdf<T: Real>(z: T) -> T {
    -T::lit(0.5) * z * z - T::ln_sqrt_2pi()
}

/// Log-likelihood of one measurement given its predicted log-mean.
///
/// Detected samples use the normal density of `log z`; censored samples use
/// the normal CDF at `log D`.
pub fn obs_loglik<T: Real>(
    log_value_or_log_dl: T,
    mean: T,
    sigma0: T,
    censored: bool,
) -> Result<T, ModelError> {
    if log_value_or_log_dl.is_nan() || mean.is_nan() || sigma0.is_nan() {
        return Err(ModelError::NonFinite("observation log-likelihood"));
    }
    let z = (log_value_or_log_dl - mean) / sigma0;
    Ok(if censored {
        log_normal_cdf(z)
    } else {
        log_normal_pdf(z) - sigma0.ln()
    })
}

/// Negative log-likelihood of one observation and its first two derivatives
/// with respect to the predicted mean.
#[inline]
pub(crate) fn obs_nll_derivs<T: Real>(
    log_value: T,
    mean: T,
    sigma0: T,
    censored: bool,
) -> (T, T, T) {
    let z = (log_value - mean) / sigma0;
    if censored {
        let lcdf = log_normal_cdf(z);
        // Inverse Mills ratio phi(z)/Phi(z).
        let lambda = (log_normal_pdf(z) - lcdf).exp();
        let s2 = sigma0 * sigma0;
        (-lcdf, lambda / sigma0, lambda * (z + lambda) / s2)
    } else {
        let s2 = sigma0 * sigma0;
        (
            T::lit(0.5) * z * z + T::ln_sqrt_2pi() + sigma0.ln(),
            -z / sigma0,
            T::one() / s2,
        )
    }
}

/// Sum of `-log phi(x; 0, sigma^2)` over a slice.
pub(crate) fn gaussian_prior_nll<T: Real>(xs: &[T], log_sigma: T) -> T {
    let sigma = log_sigma.exp();
    let quad: Vec<T> = xs.iter().map(|&x| (x / sigma) * (x / sigma)).collect();
    T::lit(0.5) * pairwise_sum(&quad)
        + T::from_usize(xs.len()).expect("count fits") * (T::ln_sqrt_2pi() + log_sigma)
}

/// Measurement part of the joint negative log-likelihood, given `lC`.
pub(crate) fn measurement_nll<T: Real>(
    lc: &[T],
    delta: &[T],
    sigma0: T,
    data: &MeasurementSet<T>,
) -> T {
    let terms: Vec<T> = data
        .observations()
        .iter()
        .map(|o| {
            let (v, _, _) = obs_nll_derivs(o.log_value, lc[o.catchment] + delta[o.year], sigma0, o.censored);
            v
        })
        .collect();
    pairwise_sum(&terms)
}

fn check_latent<T: Real>(
    latent: &LatentState<T>,
    data: &MeasurementSet<T>,
) -> Result<(), ModelError> {
    if latent.delta.len() != data.years().len() {
        return Err(ModelError::DimensionMismatch {
            what: "year effects",
            expected: data.years().len(),
            found: latent.delta.len(),
        });
    }
    Ok(())
}

/// Joint negative log-likelihood of measurements and latent effects:
/// measurement terms at mean `lC_i + delta_y`, plus Gaussian priors on every
/// catchment residual and every year effect.
pub fn joint_nll<T: Real>(
    net: &CatchmentNetwork<T>,
    design: &SourceDesign<T>,
    params: &ParameterSet<T>,
    latent: &LatentState<T>,
    data: &MeasurementSet<T>,
) -> Result<T, ModelError> {
    check_latent(latent, data)?;
    let prop = propagate(net, design, params, latent)?;
    let v = measurement_nll(&prop.lc, &latent.delta, params.sigma0(), data)
        + gaussian_prior_nll(&latent.eps, params.log_sigmap)
        + gaussian_prior_nll(&latent.delta, params.log_sigmay);
    if v.is_nan() {
        return Err(ModelError::NonFinite("joint negative log-likelihood"));
    }
    Ok(v)
}
