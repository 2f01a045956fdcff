//! Synthetic networks and measurements from known truth, plus a
//! Gauss–Hermite quadrature reference for the marginal likelihood.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::ModelError;
use crate::laplace::{inner_mode, FitError};
use crate::likelihood::{log_normal_cdf, Measurement, MeasurementError, MeasurementSet};
use crate::network::{CatchmentNetwork, NetworkError, SubCatchment};
use crate::scalar::Real;
use crate::sourcemodel::{propagate, DesignError, LatentState, ParameterSet, SourceDesign};

/// Largest latent dimension [`quadrature_marginal`] accepts.
pub const MAX_QUADRATURE_DIM: usize = 6;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic specification: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error(transparent)]
    Measurement(#[from] MeasurementError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error("quadrature over {dim} latents exceeds the limit of {max}")]
    DimensionTooLarge { dim: usize, max: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceTemplate {
    /// `X_0 = Qg + Qs`.
    SingleSource,
    /// `X_0 = Qs`, `X_1 = Qg * Cg` with `log Cg ~ N(log cg_median, cg_log_sd²)`.
    TwoSource { cg_median: f64, cg_log_sd: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DetectionLimit {
    Fixed { value: f64 },
    /// Drawn per sample, log-uniform on `[lo, hi]`.
    LogUniform { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Replicates {
    Fixed { count: u32 },
    Poisson { mean: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_catchments: usize,
    /// Mean number of upstream neighbours per catchment.
    pub branching: f64,
    pub sampled_fraction: f64,
    pub years: Vec<i32>,
    /// Samples per sampled catchment and year.
    pub replicates: Replicates,
    pub detection_limit: DetectionLimit,
    pub true_params: ParameterSet<f64>,
    pub template: SourceTemplate,
    /// Fixed year effects instead of draws from `N(0, sigma_Y²)`.
    pub year_effects: Option<Vec<f64>>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_catchments: 200,
            branching: 0.7,
            sampled_fraction: 0.3,
            years: (2013..2018).collect(),
            replicates: Replicates::Fixed { count: 3 },
            detection_limit: DetectionLimit::Fixed { value: 0.3 },
            true_params: ParameterSet::from_natural(1.5, &[], 30.0, 0.4, 0.5, 0.12),
            template: SourceTemplate::SingleSource,
            year_effects: None,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.to_string()));
        if self.n_catchments == 0 {
            return bad("n_catchments must be >= 1");
        }
        if !(self.sampled_fraction > 0.0 && self.sampled_fraction <= 1.0) {
            return bad("sampled_fraction must lie in (0, 1]");
        }
        if !(self.branching.is_finite() && self.branching >= 0.0) {
            return bad("branching must be finite and >= 0");
        }
        if self.years.is_empty() {
            return bad("at least one year is required");
        }
        let mut years = self.years.clone();
        years.sort_unstable();
        years.dedup();
        if years.len() != self.years.len() {
            return bad("years must be distinct");
        }
        match self.replicates {
            Replicates::Fixed { count } if count == 0 => return bad("replicate count must be >= 1"),
            Replicates::Poisson { mean } if !(mean.is_finite() && mean > 0.0) => {
                return bad("replicate mean must be > 0")
            }
            _ => {}
        }
        match self.detection_limit {
            DetectionLimit::Fixed { value } if !(value.is_finite() && value > 0.0) => {
                return bad("detection limit must be > 0")
            }
            DetectionLimit::LogUniform { lo, hi } if !(lo > 0.0 && hi >= lo && hi.is_finite()) => {
                return bad("detection limit range must satisfy 0 < lo <= hi")
            }
            _ => {}
        }
        let want = match self.template {
            SourceTemplate::SingleSource => 0,
            SourceTemplate::TwoSource { cg_median, cg_log_sd } => {
                if !(cg_median > 0.0 && cg_log_sd >= 0.0) {
                    return bad("groundwater concentration distribution must be positive");
                }
                1
            }
        };
        if self.true_params.n_factors() != want {
            return bad("true parameters do not match the source template");
        }
        if let Some(d) = &self.year_effects {
            if d.len() != self.years.len() {
                return bad("one year effect per year is required");
            }
        }
        Ok(())
    }
}

/// A generated network with its true state.
#[derive(Debug, Clone)]
pub struct SynthWorld<T> {
    pub net: CatchmentNetwork<T>,
    pub design: SourceDesign<T>,
    /// True residuals `eps_i`.
    pub eps: Vec<T>,
    /// True `log C_i` (without year effects).
    pub truth_lc: Vec<T>,
    /// Groundwater concentrations under the two-source template.
    pub groundwater_conc: Option<Vec<Option<T>>>,
}

#[derive(Debug, Clone)]
pub struct Simulated<T> {
    pub data: MeasurementSet<T>,
    /// Year effects used, aligned with the spec's years.
    pub delta: Vec<T>,
    /// Network indices of sampled catchments, sorted.
    pub sampled: Vec<usize>,
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (lo.ln() + rng.random::<f64>() * (hi / lo).ln()).exp()
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn id_width(n: usize) -> usize {
    n.saturating_sub(1).to_string().len().max(4)
}

/// In-tree topology: `parent[i]` is the downstream neighbour. Children are
/// always numbered after their parent.
fn random_forest(n: usize, branching: f64, rng: &mut ChaCha8Rng) -> Vec<Option<usize>> {
    let poisson = (branching > 0.0).then(|| Poisson::new(branching).expect("rate > 0"));
    let mut parent: Vec<Option<usize>> = Vec::with_capacity(n);
    let mut queue = std::collections::VecDeque::new();
    while parent.len() < n {
        let Some(node) = queue.pop_front() else {
            parent.push(None);
            queue.push_back(parent.len() - 1);
            continue;
        };
        let k = poisson.as_ref().map_or(0, |p| p.sample(rng) as usize);
        for _ in 0..k {
            if parent.len() == n {
                break;
            }
            parent.push(Some(node));
            queue.push_back(parent.len() - 1);
        }
    }
    parent
}

/// Draws a network, design and true residuals from `spec`.
pub fn generate<T: Real>(spec: &SynthSpec) -> Result<SynthWorld<T>, SynthError> {
    spec.validate()?;
    let n = spec.n_catchments;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let parent = random_forest(n, spec.branching, &mut rng);

    let width = id_width(n);
    let ids: Vec<String> = (0..n).map(|i| format!("c{i:0width$}")).collect();
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, p) in parent.iter().enumerate() {
        if let Some(p) = p {
            children[*p].push(i);
        }
    }

    let mut qg = vec![T::zero(); n];
    let mut qs = vec![T::zero(); n];
    let mut ratio = vec![0.0; n];
    for i in 0..n {
        let generated = log_uniform(&mut rng, 1e3, 1e5);
        let frac = 0.2 + 0.6 * rng.random::<f64>();
        qg[i] = T::lit(generated * frac);
        qs[i] = T::lit(generated * (1.0 - frac));
        ratio[i] = log_uniform(&mut rng, 1e-3, 2e-2);
    }
    // Children carry larger indices, so a reverse sweep sees every upstream
    // total first. The summation order matches the balance check exactly.
    let mut q = vec![T::zero(); n];
    for i in (0..n).rev() {
        let inflow = children[i].iter().fold(T::zero(), |acc, &j| acc + q[j]);
        q[i] = inflow + qg[i] + qs[i];
    }
    let catchments: Vec<SubCatchment<T>> = (0..n)
        .map(|i| SubCatchment {
            id: ids[i].clone(),
            q_total: q[i],
            q_ground: qg[i],
            q_shallow: qs[i],
            area: q[i] * T::lit(ratio[i]),
            downstream: parent[i].map(|p| ids[p].clone()),
        })
        .collect();
    let net = CatchmentNetwork::build(catchments)?;

    let (design, groundwater_conc) = match spec.template {
        SourceTemplate::SingleSource => (SourceDesign::single_source(&net)?, None),
        SourceTemplate::TwoSource { cg_median, cg_log_sd } => {
            let cg: Vec<Option<T>> = (0..n)
                .map(|_| Some(T::lit((cg_median.ln() + cg_log_sd * normal(&mut rng)).exp())))
                .collect();
            (SourceDesign::two_source(&net, &cg)?, Some(cg))
        }
    };

    let params = to_scalar(&spec.true_params);
    let sp = spec.true_params.sigmap();
    let eps: Vec<T> = (0..n).map(|_| T::lit(sp * normal(&mut rng))).collect();
    let latent = LatentState {
        eps: eps.clone(),
        delta: Vec::new(),
    };
    let prop = propagate(&net, &design, &params, &latent)?;
    Ok(SynthWorld {
        net,
        design,
        eps,
        truth_lc: prop.lc,
        groundwater_conc,
    })
}

fn to_scalar<T: Real>(p: &ParameterSet<f64>) -> ParameterSet<T> {
    ParameterSet::from_internal(&p.to_internal().into_iter().map(T::lit).collect::<Vec<_>>())
}

/// Forward model of the measurement process for the sampled catchments.
pub fn simulate_measurements<T: Real>(
    world: &SynthWorld<T>,
    spec: &SynthSpec,
) -> Result<Simulated<T>, SynthError> {
    spec.validate()?;
    let n = world.net.len();
    if world.truth_lc.len() != n {
        return Err(SynthError::InvalidSpec("truth does not match network".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);

    let n_sampled = ((spec.sampled_fraction * n as f64).round() as usize).clamp(1, n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    let mut sampled = idx[..n_sampled].to_vec();
    sampled.sort_unstable();

    let s0 = spec.true_params.sigma0();
    let sy = spec.true_params.sigmay();
    let delta: Vec<f64> = match &spec.year_effects {
        Some(d) => d.clone(),
        None => spec.years.iter().map(|_| sy * normal(&mut rng)).collect(),
    };
    let poisson = match spec.replicates {
        Replicates::Poisson { mean } => Some(Poisson::new(mean).expect("mean > 0")),
        Replicates::Fixed { .. } => None,
    };

    let mut out = Vec::new();
    for &i in &sampled {
        let counts: Vec<usize> = spec
            .years
            .iter()
            .map(|_| match (&poisson, spec.replicates) {
                (Some(p), _) => p.sample(&mut rng) as usize,
                (None, Replicates::Fixed { count }) => count as usize,
                _ => unreachable!(),
            })
            .collect();
        let mut counts = counts;
        if counts.iter().all(|&c| c == 0) {
            let y = rng.random_range(0..counts.len());
            counts[y] = 1;
        }
        let lc = world.truth_lc[i].as_f64();
        for (y, &k) in counts.iter().enumerate() {
            for _ in 0..k {
                let z = (lc + delta[y] + s0 * normal(&mut rng)).exp();
                let d = match spec.detection_limit {
                    DetectionLimit::Fixed { value } => value,
                    DetectionLimit::LogUniform { lo, hi } => log_uniform(&mut rng, lo, hi),
                };
                let id = world.net.id(i);
                out.push(if z < d {
                    Measurement::below_limit(id, spec.years[y], T::lit(d))
                } else {
                    Measurement::detected(id, spec.years[y], T::lit(z), T::lit(d))
                });
            }
        }
    }
    Ok(Simulated {
        data: MeasurementSet::new(&world.net, out)?,
        delta: delta.into_iter().map(T::lit).collect(),
        sampled,
    })
}

/// Nodes and weights of the `n`-point Gauss–Hermite rule for the weight
/// `exp(-x²)`, nodes ascending.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "at least one node");
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let m = n.div_ceil(2);
    let nf = n as f64;
    let mut z = 0.0;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            // Orthonormal Hermite recurrence.
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    x.reverse();
    w.reverse();
    (x, w)
}

/// Observations of one `(catchment, year)` cell reduced to sufficient
/// statistics: detected values by count, mean and centred sum of squares,
/// censored ones by distinct detection limit.
struct Cell {
    catchment: usize,
    year: usize,
    detected: f64,
    mean: f64,
    ss: f64,
    censored: Vec<(f64, f64)>,
}

/// Direct (linear-domain) joint nll for the quadrature, independent of the
/// log-domain model code.
struct DirectModel {
    n: usize,
    order: Vec<usize>,
    upstream: Vec<Vec<usize>>,
    source: Vec<f64>,
    q: Vec<f64>,
    retention: Vec<f64>,
    cells: Vec<Cell>,
    sigma0: f64,
    sigmap: f64,
    sigmay: f64,
}

impl DirectModel {
    fn new(
        params: &ParameterSet<f64>,
        data: &MeasurementSet<f64>,
        net: &CatchmentNetwork<f64>,
        design: &SourceDesign<f64>,
    ) -> Self {
        let n = net.len();
        let theta = params.theta();
        let mut cells: Vec<Cell> = Vec::new();
        for o in data.observations() {
            let fresh = cells
                .last()
                .is_none_or(|c| (c.catchment, c.year) != (o.catchment, o.year));
            if fresh {
                cells.push(Cell {
                    catchment: o.catchment,
                    year: o.year,
                    detected: 0.0,
                    mean: 0.0,
                    ss: 0.0,
                    censored: Vec::new(),
                });
            }
            let c = cells.last_mut().expect("cell pushed");
            if o.censored {
                match c.censored.iter_mut().find(|(d, _)| *d == o.log_value) {
                    Some(entry) => entry.1 += 1.0,
                    None => c.censored.push((o.log_value, 1.0)),
                }
            } else {
                // Welford update.
                c.detected += 1.0;
                let d = o.log_value - c.mean;
                c.mean += d / c.detected;
                c.ss += d * (o.log_value - c.mean);
            }
        }
        Self {
            n,
            order: net.order().to_vec(),
            upstream: (0..n).map(|i| net.upstream(i).to_vec()).collect(),
            source: (0..n)
                .map(|i| params.beta0() * design.scaled_source(params, i))
                .collect(),
            q: (0..n).map(|i| net.catchment(i).q_total).collect(),
            retention: (0..n)
                .map(|i| 1.0 + theta * net.catchment(i).area / net.catchment(i).q_total)
                .collect(),
            cells,
            sigma0: params.sigma0(),
            sigmap: params.sigmap(),
            sigmay: params.sigmay(),
        }
    }

    fn nll(&self, x: &[f64], flux: &mut [f64], lc: &mut [f64]) -> f64 {
        let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        let (eps, delta) = x.split_at(self.n);
        for &i in &self.order {
            let w = self.source[i] + self.upstream[i].iter().map(|&j| flux[j]).sum::<f64>();
            let c = w / (self.q[i] * self.retention[i]) * eps[i].exp();
            lc[i] = c.ln();
            flux[i] = c * self.q[i];
        }
        let mut v = 0.0;
        for &e in eps {
            v += 0.5 * (e / self.sigmap).powi(2) + self.sigmap.ln() + half_ln_2pi;
        }
        for &d in delta {
            v += 0.5 * (d / self.sigmay).powi(2) + self.sigmay.ln() + half_ln_2pi;
        }
        let s2 = self.sigma0 * self.sigma0;
        let norm = self.sigma0.ln() + half_ln_2pi;
        for cell in &self.cells {
            let mu = lc[cell.catchment] + delta[cell.year];
            if cell.detected > 0.0 {
                let off = cell.mean - mu;
                v += 0.5 * (cell.ss + cell.detected * off * off) / s2 + cell.detected * norm;
            }
            for &(ld, k) in &cell.censored {
                v -= k * log_normal_cdf((ld - mu) / self.sigma0);
            }
        }
        v
    }
}

fn cholesky(a: &[f64], d: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    for j in 0..d {
        let mut s = a[j * d + j];
        for k in 0..j {
            s -= l[j * d + k] * l[j * d + k];
        }
        if !(s > 0.0) {
            return None;
        }
        l[j * d + j] = s.sqrt();
        for i in j + 1..d {
            let mut t = a[i * d + j];
            for k in 0..j {
                t -= l[i * d + k] * l[j * d + k];
            }
            l[i * d + j] = t / l[j * d + j];
        }
    }
    Some(l)
}

/// Relative product-weight cutoff below which tensor nodes are skipped.
const PRUNE: f64 = 1e-12;

/// `-log ∫ exp(-joint_nll)` over all latents by tensor Gauss–Hermite with
/// `nodes` points per dimension, centred at the latent mode and scaled by
/// the local curvature.
pub fn quadrature_marginal(
    params: &ParameterSet<f64>,
    data: &MeasurementSet<f64>,
    net: &CatchmentNetwork<f64>,
    design: &SourceDesign<f64>,
    nodes: usize,
) -> Result<f64, SynthError> {
    let n = net.len();
    let dim = n + data.years().len();
    if dim > MAX_QUADRATURE_DIM {
        return Err(SynthError::DimensionTooLarge {
            dim,
            max: MAX_QUADRATURE_DIM,
        });
    }
    if nodes == 0 {
        return Err(SynthError::InvalidSpec("nodes must be >= 1".into()));
    }
    let model = DirectModel::new(params, data, net, design);
    let warm = LatentState::zeros(n, data.years().len());
    let mode = inner_mode(params, data, net, design, &warm)?;
    let center: Vec<f64> = mode.latent.eps.iter().chain(&mode.latent.delta).copied().collect();
    let mut flux = vec![0.0; n];
    let mut lc = vec![0.0; n];
    let f0 = model.nll(&center, &mut flux, &mut lc);

    // Curvature at the mode by central differences.
    let h = 1e-4;
    let mut hess = vec![0.0; dim * dim];
    let mut xp = center.clone();
    for i in 0..dim {
        for j in 0..=i {
            let mut probe = |si: f64, sj: f64| {
                xp.copy_from_slice(&center);
                xp[i] += si * h;
                xp[j] += sj * h;
                model.nll(&xp, &mut flux, &mut lc)
            };
            let v = if i == j {
                (probe(1.0, 0.0) - 2.0 * f0 + probe(-1.0, 0.0)) / (h * h)
            } else {
                (probe(1.0, 1.0) - probe(1.0, -1.0) - probe(-1.0, 1.0) + probe(-1.0, -1.0)) / (4.0 * h * h)
            };
            hess[i * dim + j] = v;
            hess[j * dim + i] = v;
        }
    }
    let l = cholesky(&hess, dim)
        .or_else(|| {
            let diag: Vec<f64> = (0..dim)
                .flat_map(|i| (0..dim).map(move |j| (i, j)))
                .map(|(i, j)| if i == j { hess[i * dim + i].abs().max(1e-8) } else { 0.0 })
                .collect();
            cholesky(&diag, dim)
        })
        .expect("diagonal fallback is positive");
    // x = center + sqrt(2) L^{-T} y; columns of L^{-T} by back substitution.
    let mut a = vec![0.0; dim * dim];
    for col in 0..dim {
        // Solve L^T v = e_col.
        let mut v = vec![0.0; dim];
        for r in (0..dim).rev() {
            let mut s = if r == col { 1.0 } else { 0.0 };
            for k in r + 1..dim {
                s -= l[k * dim + r] * v[k];
            }
            v[r] = s / l[r * dim + r];
        }
        for r in 0..dim {
            a[r * dim + col] = std::f64::consts::SQRT_2 * v[r];
        }
    }
    let log_det_l: f64 = (0..dim).map(|i| l[i * dim + i].ln()).sum();

    let (y, w) = gauss_hermite(nodes);
    let lw: Vec<f64> = w.iter().map(|w| w.ln()).collect();
    let lw_max = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let cutoff = PRUNE.ln() + dim as f64 * lw_max;
    // Nodes by decreasing weight so the pruned loops can stop early.
    let mut by_weight: Vec<usize> = (0..nodes).collect();
    by_weight.sort_by(|&p, &q| lw[q].total_cmp(&lw[p]).then(p.cmp(&q)));

    let grid = Grid {
        y: &y,
        lw: &lw,
        by_weight: &by_weight,
        a: &a,
        dim,
        rest: lw_max,
        cutoff,
    };
    let partial: Vec<f64> = (0..nodes)
        .into_par_iter()
        .map(|first| {
            let mut xs = vec![center.clone(); dim + 1];
            let mut flux = vec![0.0; n];
            let mut lc = vec![0.0; n];
            let mut total = 0.0;
            let mut leaf = |x: &[f64], lwt: f64, y2: f64| {
                let v = model.nll(x, &mut flux, &mut lc);
                total += (lwt - (v - f0) + y2).exp();
            };
            grid.descend(0, first, 0.0, 0.0, &mut xs, &mut leaf);
            total
        })
        .collect();
    let s: f64 = partial.iter().sum();
    if !(s > 0.0 && s.is_finite()) {
        return Err(ModelError::NonFinite("quadrature sum").into());
    }
    Ok(f0 + log_det_l - 0.5 * dim as f64 * 2f64.ln() - s.ln())
}

/// Pruned tensor grid; `xs[d]` holds the point after the first `d` axes.
struct Grid<'a> {
    y: &'a [f64],
    lw: &'a [f64],
    by_weight: &'a [usize],
    a: &'a [f64],
    dim: usize,
    rest: f64,
    cutoff: f64,
}

impl Grid<'_> {
    fn descend(
        &self,
        depth: usize,
        j: usize,
        lw_acc: f64,
        y2_acc: f64,
        xs: &mut [Vec<f64>],
        leaf: &mut impl FnMut(&[f64], f64, f64),
    ) {
        let lw = lw_acc + self.lw[j];
        if lw + (self.dim - depth - 1) as f64 * self.rest < self.cutoff {
            return;
        }
        let yj = self.y[j];
        let (done, todo) = xs.split_at_mut(depth + 1);
        let (prev, next) = (&done[depth], &mut todo[0]);
        for r in 0..self.dim {
            next[r] = prev[r] + self.a[r * self.dim + depth] * yj;
        }
        let y2 = y2_acc + yj * yj;
        if depth + 1 == self.dim {
            leaf(&xs[self.dim], lw, y2);
            return;
        }
        let bound = (self.dim - depth - 2) as f64 * self.rest;
        for &k in self.by_weight {
            if lw + self.lw[k] + bound < self.cutoff {
                break;
            }
            self.descend(depth + 1, k, lw, y2, xs, leaf);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hermite_rule_integrates_moments() {
        let (x, w) = gauss_hermite(20);
        let pi_sqrt = std::f64::consts::PI.sqrt();
        let m0: f64 = w.iter().sum();
        let m2: f64 = x.iter().zip(&w).map(|(x, w)| w * x * x).sum();
        let m4: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(4)).sum();
        assert!((m0 - pi_sqrt).abs() < 1e-13);
        assert!((m2 - 0.5 * pi_sqrt).abs() < 1e-13);
        assert!((m4 - 0.75 * pi_sqrt).abs() < 1e-12);
        assert!(x.windows(2).all(|p| p[0] < p[1]));
    }

    #[test]
    fn single_catchment_is_an_outlet() {
        let spec = SynthSpec {
            n_catchments: 1,
            ..SynthSpec::default()
        };
        let world = generate::<f64>(&spec).unwrap();
        assert_eq!(world.net.len(), 1);
        assert_eq!(world.net.level(0), 0);
        assert!(world.net.is_marine_outlet(0));
    }

    #[test]
    fn forest_children_follow_parents() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let parent = random_forest(500, 0.9, &mut rng);
        assert_eq!(parent.len(), 500);
        assert!(parent.iter().enumerate().all(|(i, p)| p.is_none_or(|p| p < i)));
    }
}
