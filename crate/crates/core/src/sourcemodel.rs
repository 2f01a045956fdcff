//! Linear source model with a reference factor, first-order removal, and the
//! level-ordered steady-state propagation of log-concentrations.
//!
//! For sub-catchment `i` with total mass input
//! `w_i = sum_j C_j Q_j + beta0 * S_i`, where `S_i = X_i0 + sum_k beta'_k X_ik`,
//! the outlet log-concentration is
//!
//! `lC_i = log(w_i) - log(Q_i) - log(1 + theta A_i / Q_i) + eps_i`.
//!
//! The upstream sum uses the residual-bearing `C_j = exp(lC_j)`, so a
//! residual at one outlet carries its mass downstream. Everything is
//! evaluated in the log domain so extreme inputs do not overflow.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::ModelError;
use crate::network::CatchmentNetwork;
use crate::scalar::{log_sum_exp, Real};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DesignError {
    #[error("design row for unknown sub-catchment `{0}`")]
    UnknownCatchment(String),
    #[error("no design row for sub-catchment `{0}`")]
    MissingCatchment(String),
    #[error("duplicate design row for sub-catchment `{0}`")]
    DuplicateRow(String),
    #[error("sub-catchment `{id}`: reference factor must be > 0, got {value}")]
    NonPositiveReference { id: String, value: f64 },
    #[error("sub-catchment `{id}`: factor `{factor}` must be >= 0, got {value}")]
    NegativeFactor {
        id: String,
        factor: String,
        value: f64,
    },
    #[error("sub-catchment `{id}`: expected {expected} additional factors, found {found}")]
    FactorCount {
        id: String,
        expected: usize,
        found: usize,
    },
}

/// Source factors per sub-catchment, aligned with network indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceDesign<T> {
    ids: Vec<String>,
    x0: Vec<T>,
    xk: Vec<Vec<T>>,
    /// `P + 1` labels: the reference factor followed by the additional ones.
    factor_names: Vec<String>,
}

impl<T: Real> SourceDesign<T> {
    /// Builds a design from `(id, x0, [x1..xP])` rows; every network
    /// catchment needs exactly one row.
    pub fn new(
        net: &CatchmentNetwork<T>,
        factor_names: Vec<String>,
        rows: Vec<(String, T, Vec<T>)>,
    ) -> Result<Self, DesignError> {
        let p = factor_names.len().saturating_sub(1);
        let n = net.len();
        let mut x0 = vec![None; n];
        let mut xk = vec![Vec::new(); n];
        for (id, r0, rk) in rows {
            let i = net
                .index_of(&id)
                .ok_or_else(|| DesignError::UnknownCatchment(id.clone()))?;
            if x0[i].is_some() {
                return Err(DesignError::DuplicateRow(id));
            }
            if !(r0.is_finite() && r0 > T::zero()) {
                return Err(DesignError::NonPositiveReference {
                    id,
                    value: r0.to_f64().unwrap_or(f64::NAN),
                });
            }
            if rk.len() != p {
                return Err(DesignError::FactorCount {
                    id,
                    expected: p,
                    found: rk.len(),
                });
            }
            if let Some(k) = rk.iter().position(|v| !(v.is_finite() && *v >= T::zero())) {
                return Err(DesignError::NegativeFactor {
                    id,
                    factor: factor_names[k + 1].clone(),
                    value: rk[k].to_f64().unwrap_or(f64::NAN),
                });
            }
            x0[i] = Some(r0);
            xk[i] = rk;
        }
        let x0 = x0
            .into_iter()
            .enumerate()
            .map(|(i, v)| v.ok_or_else(|| DesignError::MissingCatchment(net.id(i).to_owned())))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            ids: net.catchments().iter().map(|c| c.id.clone()).collect(),
            x0,
            xk,
            factor_names,
        })
    }

    /// Uniform concentration in all locally generated water: `X_i0 = Qg_i + Qs_i`.
    pub fn single_source(net: &CatchmentNetwork<T>) -> Result<Self, DesignError> {
        let rows = net
            .catchments()
            .iter()
            .map(|c| (c.id.clone(), c.q_ground + c.q_shallow, Vec::new()))
            .collect();
        Self::new(net, vec!["q_generated".into()], rows)
    }

    /// Surface-near water as reference, groundwater mass as the second
    /// factor: `X_i0 = Qs_i`, `X_i1 = Qg_i * Cg_i`. A missing groundwater
    /// concentration contributes nothing (`X_i1 = 0`).
    pub fn two_source(
        net: &CatchmentNetwork<T>,
        groundwater_conc: &[Option<T>],
    ) -> Result<Self, DesignError> {
        assert_eq!(groundwater_conc.len(), net.len(), "one entry per catchment");
        let rows = net
            .catchments()
            .iter()
            .zip(groundwater_conc)
            .map(|(c, cg)| {
                let x1 = cg.map_or(T::zero(), |cg| c.q_ground * cg);
                (c.id.clone(), c.q_shallow, vec![x1])
            })
            .collect();
        Self::new(
            net,
            vec!["q_shallow".into(), "groundwater_mass".into()],
            rows,
        )
    }

    /// Number of non-reference factors.
    pub fn n_factors(&self) -> usize {
        self.factor_names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.x0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x0.is_empty()
    }

    pub fn factor_names(&self) -> &[String] {
        &self.factor_names
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn reference(&self, i: usize) -> T {
        self.x0[i]
    }

    pub fn factors(&self, i: usize) -> &[T] {
        &self.xk[i]
    }

    fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    /// Bracketed source sum `S_i = X_i0 + sum_k beta'_k X_ik` by index.
    pub fn scaled_source(&self, params: &ParameterSet<T>, i: usize) -> T {
        self.xk[i]
            .iter()
            .zip(&params.log_betak)
            .fold(self.x0[i], |acc, (&x, &lb)| acc + lb.exp() * x)
    }

    /// Components of `beta0 * S_i`, reference factor first.
    pub fn source_components(&self, params: &ParameterSet<T>, i: usize) -> Vec<T> {
        let b0 = params.beta0();
        std::iter::once(b0 * self.x0[i])
            .chain(
                self.xk[i]
                    .iter()
                    .zip(&params.log_betak)
                    .map(|(&x, &lb)| b0 * lb.exp() * x),
            )
            .collect()
    }
}

/// Source term `S_i` for the catchment named `id`.
pub fn source_term<T: Real>(
    params: &ParameterSet<T>,
    design: &SourceDesign<T>,
    id: &str,
) -> Result<T, ModelError> {
    let i = design
        .index_of(id)
        .ok_or_else(|| ModelError::UnknownCatchment(id.to_owned()))?;
    Ok(design.scaled_source(params, i))
}

/// Fixed effects and variance components, stored on the unconstrained log
/// scale so every natural-scale value is strictly positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet<T> {
    pub log_beta0: T,
    pub log_betak: Vec<T>,
    pub log_theta: T,
    pub log_sigma0: T,
    pub log_sigmap: T,
    pub log_sigmay: T,
}

impl<T: Real> ParameterSet<T> {
    pub fn from_natural(
        beta0: T,
        betak: &[T],
        theta: T,
        sigma0: T,
        sigmap: T,
        sigmay: T,
    ) -> Self {
        Self {
            log_beta0: beta0.ln(),
            log_betak: betak.iter().map(|b| b.ln()).collect(),
            log_theta: theta.ln(),
            log_sigma0: sigma0.ln(),
            log_sigmap: sigmap.ln(),
            log_sigmay: sigmay.ln(),
        }
    }

    pub fn beta0(&self) -> T {
        self.log_beta0.exp()
    }
    pub fn betak(&self) -> Vec<T> {
        self.log_betak.iter().map(|b| b.exp()).collect()
    }
    pub fn theta(&self) -> T {
        self.log_theta.exp()
    }
    pub fn sigma0(&self) -> T {
        self.log_sigma0.exp()
    }
    pub fn sigmap(&self) -> T {
        self.log_sigmap.exp()
    }
    pub fn sigmay(&self) -> T {
        self.log_sigmay.exp()
    }

    pub fn n_factors(&self) -> usize {
        self.log_betak.len()
    }

    /// Internal vector in reporting order:
    /// `[sigma0, sigmap, sigmaY, theta, beta0, beta'_1..]`, all logs.
    pub fn to_internal(&self) -> Vec<T> {
        let mut v = vec![
            self.log_sigma0,
            self.log_sigmap,
            self.log_sigmay,
            self.log_theta,
            self.log_beta0,
        ];
        v.extend_from_slice(&self.log_betak);
        v
    }

    pub fn from_internal(u: &[T]) -> Self {
        assert!(u.len() >= 5, "internal parameter vector has at least 5 entries");
        Self {
            log_sigma0: u[0],
            log_sigmap: u[1],
            log_sigmay: u[2],
            log_theta: u[3],
            log_beta0: u[4],
            log_betak: u[5..].to_vec(),
        }
    }

    /// Natural-scale values in [`Self::to_internal`] order.
    pub fn to_natural(&self) -> Vec<T> {
        self.to_internal().into_iter().map(T::exp).collect()
    }

    /// Names matching [`Self::to_internal`].
    pub fn names(n_factors: usize) -> Vec<String> {
        let mut v: Vec<String> = ["sigma_0", "sigma_p", "sigma_Y", "theta", "beta_0"]
            .iter()
            .map(|s| (*s).to_owned())
            .collect();
        v.extend((1..=n_factors).map(|k| format!("beta'_{k}")));
        v
    }
}

/// Per-catchment residuals and per-year effects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentState<T> {
    pub eps: Vec<T>,
    pub delta: Vec<T>,
}

impl<T: Real> LatentState<T> {
    pub fn zeros(n_catchments: usize, n_years: usize) -> Self {
        Self {
            eps: vec![T::zero(); n_catchments],
            delta: vec![T::zero(); n_years],
        }
    }

    pub fn dim(&self) -> usize {
        self.eps.len() + self.delta.len()
    }
}

/// Output of [`propagate`], indexed like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Propagation<T> {
    /// Log outlet concentration `lC_i`.
    pub lc: Vec<T>,
    /// Outlet concentration `C_i = exp(lC_i)`.
    pub c: Vec<T>,
    /// `log(C_i Q_i)`, the log outlet mass flux.
    pub log_mass: Vec<T>,
    /// `log(w_i)`, the log total mass input before removal.
    pub log_input: Vec<T>,
    /// Share of the downstream input contributed by `i`:
    /// `C_i Q_i / w_{down(i)}`; zero at marine outlets.
    pub share: Vec<T>,
}

/// Level-ordered steady-state propagation of expected log-concentrations.
pub fn propagate<T: Real>(
    net: &CatchmentNetwork<T>,
    design: &SourceDesign<T>,
    params: &ParameterSet<T>,
    latent: &LatentState<T>,
) -> Result<Propagation<T>, ModelError> {
    propagate_in_order(net, design, params, &latent.eps, net.order())
}

/// [`propagate`] with an explicit topological order.
pub(crate) fn propagate_in_order<T: Real>(
    net: &CatchmentNetwork<T>,
    design: &SourceDesign<T>,
    params: &ParameterSet<T>,
    eps: &[T],
    order: &[usize],
) -> Result<Propagation<T>, ModelError> {
    let n = net.len();
    if design.len() != n {
        return Err(ModelError::DimensionMismatch {
            what: "source design",
            expected: n,
            found: design.len(),
        });
    }
    if eps.len() != n {
        return Err(ModelError::DimensionMismatch {
            what: "catchment residuals",
            expected: n,
            found: eps.len(),
        });
    }
    if params.n_factors() != design.n_factors() {
        return Err(ModelError::DimensionMismatch {
            what: "source coefficients",
            expected: design.n_factors(),
            found: params.n_factors(),
        });
    }
    let theta = params.theta();
    let log_beta0 = params.log_beta0;
    let mut lc = vec![T::nan(); n];
    let mut log_mass = vec![T::nan(); n];
    let mut log_input = vec![T::nan(); n];
    let mut terms: Vec<T> = Vec::new();
    for &i in order {
        let c = net.catchment(i);
        terms.clear();
        terms.push(log_beta0 + design.scaled_source(params, i).ln());
        terms.extend(net.upstream(i).iter().map(|&j| log_mass[j]));
        let lw = log_sum_exp(&terms);
        let lq = c.q_total.ln();
        let l = lw - lq - (theta * c.area / c.q_total).ln_1p() + eps[i];
        if !l.is_finite() {
            return Err(ModelError::NonFiniteResult {
                catchment: c.id.clone(),
            });
        }
        log_input[i] = lw;
        lc[i] = l;
        log_mass[i] = l + lq;
    }
    let share = (0..n)
        .map(|i| match net.downstream(i) {
            Some(d) => (log_mass[i] - log_input[d]).exp(),
            None => T::zero(),
        })
        .collect();
    let c = lc.iter().map(|l| l.exp()).collect();
    Ok(Propagation {
        lc,
        c,
        log_mass,
        log_input,
        share,
    })
}

/// First-order retention `theta A_i C_i` per catchment.
#[derive(Debug, Clone, PartialEq)]
pub struct RemovalFluxes<T> {
    pub per_catchment: Vec<T>,
    pub total: T,
}

pub fn removal_fluxes<T: Real>(
    net: &CatchmentNetwork<T>,
    params: &ParameterSet<T>,
    prop: &Propagation<T>,
) -> RemovalFluxes<T> {
    let theta = params.theta();
    let per_catchment: Vec<T> = net
        .catchments()
        .iter()
        .zip(&prop.c)
        .map(|(sc, &c)| theta * sc.area * c)
        .collect();
    let total = crate::scalar::pairwise_sum(&per_catchment);
    RemovalFluxes {
        per_catchment,
        total,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::SubCatchment;

    fn params(beta0: f64, theta: f64) -> ParameterSet<f64> {
        ParameterSet::from_natural(beta0, &[], theta, 0.5, 0.5, 0.1)
    }

    #[test]
    fn source_term_cases() {
        let net = CatchmentNetwork::build(vec![SubCatchment::new("a", None, 20.0, 2.0, 8.0, 0.0)])
            .unwrap();
        let single = SourceDesign::single_source(&net).unwrap();
        let p = params(1.0, 1.0);
        assert_eq!(source_term(&p, &single, "a").unwrap(), 10.0);

        let design =
            SourceDesign::new(&net, vec!["qs".into(), "gw".into()], vec![("a".into(), 8.0, vec![10.0])])
                .unwrap();
        let p1 = ParameterSet::from_natural(1.0, &[0.529], 1.0, 0.5, 0.5, 0.1);
        assert!((source_term(&p1, &design, "a").unwrap() - 13.29).abs() < 1e-12);

        let p0 = ParameterSet {
            log_betak: vec![f64::NEG_INFINITY],
            ..p1.clone()
        };
        assert_eq!(source_term(&p0, &design, "a").unwrap(), 8.0);
        assert!(matches!(
            source_term(&p1, &design, "zz"),
            Err(ModelError::UnknownCatchment(_))
        ));
    }

    #[test]
    fn design_validation() {
        let net = CatchmentNetwork::build(vec![
            SubCatchment::new("a", None, 20.0, 2.0, 8.0, 0.0),
            SubCatchment::new("b", None, 20.0, 2.0, 8.0, 0.0),
        ])
        .unwrap();
        let names = vec!["x0".to_string(), "x1".to_string()];
        let missing = SourceDesign::new(&net, names.clone(), vec![("a".into(), 1.0, vec![0.0])]);
        assert_eq!(missing.unwrap_err(), DesignError::MissingCatchment("b".into()));
        let zero = SourceDesign::new(
            &net,
            names.clone(),
            vec![("a".into(), 0.0, vec![0.0]), ("b".into(), 1.0, vec![0.0])],
        );
        assert!(matches!(zero, Err(DesignError::NonPositiveReference { .. })));
        let neg = SourceDesign::new(
            &net,
            names,
            vec![("a".into(), 1.0, vec![-1.0]), ("b".into(), 1.0, vec![0.0])],
        );
        assert!(matches!(neg, Err(DesignError::NegativeFactor { .. })));
    }

    #[test]
    fn balanced_level_zero_is_beta0() {
        let net = CatchmentNetwork::build(vec![SubCatchment::new("a", None, 12.0, 5.0, 7.0, 3.0)])
            .unwrap();
        let d = SourceDesign::single_source(&net).unwrap();
        let p = ParameterSet {
            log_theta: f64::NEG_INFINITY,
            ..params(1.7, 1.0)
        };
        let out = propagate(&net, &d, &p, &LatentState::zeros(1, 0)).unwrap();
        assert!((out.c[0] - 1.7).abs() < 1e-14);
    }

    #[test]
    fn two_node_chain_by_hand() {
        // A: Q=10, X0=10, no area. B: Q=25, X0=15, theta*A/Q = 0.25.
        let net = CatchmentNetwork::build(vec![
            SubCatchment::new("A", Some("B"), 10.0, 0.0, 10.0, 0.0),
            SubCatchment::new("B", None, 25.0, 0.0, 15.0, 6.25),
        ])
        .unwrap();
        let d = SourceDesign::single_source(&net).unwrap();
        let p = params(2.0, 1.0);
        let out = propagate(&net, &d, &p, &LatentState::zeros(2, 0)).unwrap();
        assert!((out.c[0] - 2.0).abs() < 1e-14);
        assert!((out.c[1] - 1.6).abs() < 1e-14);
        let rem = removal_fluxes(&net, &p, &out);
        assert!((rem.total - 6.25 * 1.6).abs() < 1e-12);
    }

    #[test]
    fn removal_product() {
        let net = CatchmentNetwork::build(vec![SubCatchment::new("a", None, 1.0, 0.0, 1.0, 3.0)])
            .unwrap();
        let d = SourceDesign::single_source(&net).unwrap();
        let p = params(1.0, 2.0);
        let prop = Propagation {
            lc: vec![1.5f64.ln()],
            c: vec![1.5],
            log_mass: vec![1.5f64.ln()],
            log_input: vec![0.0],
            share: vec![0.0],
        };
        assert!((removal_fluxes(&net, &p, &prop).total - 9.0).abs() < 1e-12);
        let zero = ParameterSet {
            log_theta: f64::NEG_INFINITY,
            ..p
        };
        let out = propagate(&net, &d, &zero, &LatentState::zeros(1, 0)).unwrap();
        assert_eq!(removal_fluxes(&net, &zero, &out).total, 0.0);
    }

    #[test]
    fn extreme_magnitudes_stay_finite() {
        let net = CatchmentNetwork::build(vec![
            SubCatchment::new("a", Some("b"), 1e-300, 0.0, 1e-300, 0.0),
            SubCatchment::new("b", None, 1e300, 0.0, 1e300, 0.0),
        ])
        .unwrap();
        let d = SourceDesign::single_source(&net).unwrap();
        let p = params(1e200, 1.0);
        let out = propagate(&net, &d, &p, &LatentState::zeros(2, 0)).unwrap();
        assert!(out.lc.iter().all(|l| l.is_finite()));
        assert!((out.lc[1] - 1e200f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn internal_vector_round_trip() {
        let p = ParameterSet::from_natural(1.5, &[0.5, 2.0], 30.0, 0.4, 0.5, 0.12);
        assert_eq!(ParameterSet::from_internal(&p.to_internal()), p);
        assert_eq!(ParameterSet::<f64>::names(1).last().unwrap(), "beta'_1");
    }

    #[test]
    fn works_in_single_precision() {
        let net = CatchmentNetwork::build(vec![
            SubCatchment::new("A", Some("B"), 10.0f32, 0.0, 10.0, 0.0),
            SubCatchment::new("B", None, 25.0, 0.0, 15.0, 6.25),
        ])
        .unwrap();
        let d = SourceDesign::single_source(&net).unwrap();
        let p = ParameterSet::from_natural(2.0f32, &[], 1.0, 0.5, 0.5, 0.1);
        let out = propagate(&net, &d, &p, &LatentState::zeros(2, 0)).unwrap();
        assert!((out.c[1] - 1.6).abs() < 1e-5);
    }
}
