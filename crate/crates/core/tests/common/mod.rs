#![allow(dead_code)]

use catchflux::likelihood::{Measurement, MeasurementSet};
use catchflux::network::{CatchmentNetwork, SubCatchment};
use catchflux::sourcemodel::{ParameterSet, SourceDesign};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// `n` outlets with no upstream neighbours, balanced flows.
pub fn isolated_network(n: usize, seed: u64) -> CatchmentNetwork<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let catchments = (0..n)
        .map(|i| {
            let qg: f64 = rng.random_range(100.0..1000.0);
            let qs: f64 = rng.random_range(100.0..1000.0);
            let area: f64 = rng.random_range(0.1..5.0);
            SubCatchment::new(format!("i{i:02}"), None, qg + qs, qg, qs, area)
        })
        .collect();
    CatchmentNetwork::build(catchments).unwrap()
}

/// Fully detected data drawn from the model on an isolated network.
pub fn gaussian_data(
    net: &CatchmentNetwork<f64>,
    design: &SourceDesign<f64>,
    p: &ParameterSet<f64>,
    years: &[i32],
    reps: usize,
    seed: u64,
) -> MeasurementSet<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |s: f64| -> f64 {
        let z: f64 = StandardNormal.sample(&mut rng);
        s * z
    };
    let delta: Vec<f64> = years.iter().map(|_| draw(p.sigmay())).collect();
    let mut ms = Vec::new();
    for i in 0..net.len() {
        let mu = isolated_mean(net, design, p, i);
        let eps = draw(p.sigmap());
        for (y, &year) in years.iter().enumerate() {
            for _ in 0..reps {
                let v = (mu + eps + delta[y] + draw(p.sigma0())).exp();
                ms.push(Measurement::detected(net.id(i), year, v, 1e-300));
            }
        }
    }
    MeasurementSet::new(net, ms).unwrap()
}

/// Prior mean of `log C_i` for a catchment without upstream neighbours.
pub fn isolated_mean(net: &CatchmentNetwork<f64>, design: &SourceDesign<f64>, p: &ParameterSet<f64>, i: usize) -> f64 {
    let c = net.catchment(i);
    (p.beta0() * design.scaled_source(p, i) / (c.q_total + p.theta() * c.area)).ln()
}

/// Exact marginal nll of fully detected data on an isolated network:
/// `log z ~ N(mu, sigma0^2 I + sigmap^2 [same catchment] + sigmaY^2 [same year])`
/// plus the Jacobian-free convention used by the model (density of log z).
pub fn gaussian_marginal_nll(
    net: &CatchmentNetwork<f64>,
    design: &SourceDesign<f64>,
    p: &ParameterSet<f64>,
    data: &MeasurementSet<f64>,
) -> f64 {
    let obs = data.observations();
    let m = obs.len();
    let mut cov = DMatrix::<f64>::zeros(m, m);
    let mut resid = DVector::<f64>::zeros(m);
    for (a, oa) in obs.iter().enumerate() {
        assert!(!oa.censored);
        resid[a] = oa.log_value - isolated_mean(net, design, p, oa.catchment);
        for (b, ob) in obs.iter().enumerate() {
            let mut v = 0.0;
            if a == b {
                v += p.sigma0().powi(2);
            }
            if oa.catchment == ob.catchment {
                v += p.sigmap().powi(2);
            }
            if oa.year == ob.year {
                v += p.sigmay().powi(2);
            }
            cov[(a, b)] = v;
        }
    }
    let chol = cov.cholesky().expect("covariance is positive definite");
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let sol = chol.solve(&resid);
    0.5 * resid.dot(&sol) + 0.5 * logdet + 0.5 * m as f64 * (2.0 * std::f64::consts::PI).ln()
}

/// Central-difference gradient of `f` with absolute step `h`.
pub fn central_gradient(f: impl Fn(&[f64]) -> f64, u: &[f64], h: f64) -> Vec<f64> {
    (0..u.len())
        .map(|k| {
            let mut up = u.to_vec();
            let mut dn = u.to_vec();
            up[k] += h;
            dn[k] -= h;
            (f(&up) - f(&dn)) / (2.0 * h)
        })
        .collect()
}
