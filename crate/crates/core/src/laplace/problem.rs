//! Joint negative log-likelihood with analytic latent gradient and Hessian.
//!
//! Write `L_i = lC_i` and `a_i = sum over catchment-i observations of the
//! measurement nll derivative`. The propagation gives
//! `dL_i/d eps_k = J_ik`, the product of downstream shares along the path
//! from `k` to `i`. The latent gradient is the adjoint
//! `b_k = a_k + share_k * b_down(k)` and the Hessian is
//!
//! `J' D J + sum_m b_m T_m + I / sigma_p^2`,
//!
//! with `T_m = sum_{p -> m} share_p J_p J_p' - g_m g_m'` and
//! `g_m = J_m - e_m`. Only catchments upstream of (or at) a sampled outlet
//! carry curvature beyond the prior; every other residual has its mode at
//! zero and is handled in closed form.

use crate::error::ModelError;
use crate::likelihood::{gaussian_prior_nll, obs_nll_derivs, MeasurementSet};
use crate::network::CatchmentNetwork;
use crate::scalar::{pairwise_sum, Real};
use crate::sourcemodel::{propagate_in_order, LatentState, ParameterSet, SourceDesign};

use super::linalg::{ArrowMatrix, Dense};

/// Connected set of active residuals sharing one most-downstream active node.
#[derive(Debug, Clone)]
pub(crate) struct BlockLayout {
    /// Network indices in evaluation order.
    pub nodes: Vec<usize>,
    /// Local indices of upstream neighbours.
    pub parents: Vec<Vec<usize>>,
    /// Local indices of the upstream closure including the node, sorted.
    pub support: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub(crate) struct LatentLayout {
    pub active: Vec<bool>,
    pub blocks: Vec<BlockLayout>,
    pub n_inactive: usize,
}

impl LatentLayout {
    pub fn new<T: Real>(net: &CatchmentNetwork<T>, sampled: &[bool]) -> Self {
        let n = net.len();
        let order = net.order();
        let mut active = vec![false; n];
        let mut root = vec![usize::MAX; n];
        for &i in order.iter().rev() {
            let down_active = net.downstream(i).filter(|&d| active[d]);
            active[i] = sampled[i] || down_active.is_some();
            if active[i] {
                root[i] = down_active.map_or(i, |d| root[d]);
            }
        }
        let mut roots: Vec<usize> = Vec::new();
        let mut block_id = vec![usize::MAX; n];
        let mut local = vec![usize::MAX; n];
        let mut blocks: Vec<BlockLayout> = Vec::new();
        // Roots in evaluation order give a deterministic block order.
        let mut root_block = std::collections::HashMap::new();
        for &i in order {
            if active[i] && root[i] == i {
                root_block.insert(i, roots.len());
                roots.push(i);
                blocks.push(BlockLayout {
                    nodes: Vec::new(),
                    parents: Vec::new(),
                    support: Vec::new(),
                });
            }
        }
        for &i in order {
            if !active[i] {
                continue;
            }
            let b = root_block[&root[i]];
            block_id[i] = b;
            local[i] = blocks[b].nodes.len();
            blocks[b].nodes.push(i);
        }
        for block in &mut blocks {
            for (li, &i) in block.nodes.iter().enumerate() {
                let parents: Vec<usize> = net.upstream(i).iter().map(|&p| local[p]).collect();
                let mut support: Vec<usize> = parents
                    .iter()
                    .flat_map(|&p| block.support[p].iter().copied())
                    .collect();
                support.push(li);
                support.sort_unstable();
                block.parents.push(parents);
                block.support.push(support);
            }
        }
        let n_inactive = active.iter().filter(|a| !**a).count();
        Self {
            active,
            blocks,
            n_inactive,
        }
    }

    pub fn n_active(&self) -> usize {
        self.blocks.iter().map(|b| b.nodes.len()).sum()
    }
}

/// Observations sharing a catchment and year: `obs[start..end]`.
#[derive(Debug, Clone, Copy)]
struct ObsGroup {
    catchment: usize,
    year: usize,
    start: usize,
    end: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct LatentEval<T> {
    pub value: T,
    pub grad_eps: Vec<T>,
    pub grad_delta: Vec<T>,
    pub hessian: Option<ArrowMatrix<T>>,
}

/// Fixed data of one estimation problem.
#[derive(Debug, Clone)]
pub struct Problem<'a, T> {
    pub(crate) net: &'a CatchmentNetwork<T>,
    pub(crate) design: &'a SourceDesign<T>,
    pub(crate) data: &'a MeasurementSet<T>,
    pub(crate) layout: LatentLayout,
    groups: Vec<ObsGroup>,
    /// Group ranges per catchment: `groups[group_start[i]..group_start[i + 1]]`.
    group_start: Vec<usize>,
}

impl<'a, T: Real> Problem<'a, T> {
    pub fn new(
        net: &'a CatchmentNetwork<T>,
        design: &'a SourceDesign<T>,
        data: &'a MeasurementSet<T>,
    ) -> Result<Self, ModelError> {
        if design.len() != net.len() {
            return Err(ModelError::DimensionMismatch {
                what: "source design",
                expected: net.len(),
                found: design.len(),
            });
        }
        if data.n_catchments() != net.len() {
            return Err(ModelError::DimensionMismatch {
                what: "measurement catchments",
                expected: net.len(),
                found: data.n_catchments(),
            });
        }
        let layout = LatentLayout::new(net, &data.sampled_mask());
        let obs = data.observations();
        let mut groups = Vec::new();
        let mut start = 0;
        while start < obs.len() {
            let (c, y) = (obs[start].catchment, obs[start].year);
            let mut end = start + 1;
            while end < obs.len() && obs[end].catchment == c && obs[end].year == y {
                end += 1;
            }
            groups.push(ObsGroup {
                catchment: c,
                year: y,
                start,
                end,
            });
            start = end;
        }
        let mut group_start = vec![0usize; net.len() + 1];
        for g in &groups {
            group_start[g.catchment + 1] += 1;
        }
        for i in 0..net.len() {
            group_start[i + 1] += group_start[i];
        }
        Ok(Self {
            net,
            design,
            data,
            layout,
            groups,
            group_start,
        })
    }

    pub fn n_catchments(&self) -> usize {
        self.net.len()
    }

    pub fn n_years(&self) -> usize {
        self.data.years().len()
    }

    pub fn n_latent(&self) -> usize {
        self.n_catchments() + self.n_years()
    }

    /// Residuals that carry curvature: at or upstream of a sampled catchment.
    pub fn n_active(&self) -> usize {
        self.layout.n_active()
    }

    pub fn data(&self) -> &MeasurementSet<T> {
        self.data
    }

    pub fn net(&self) -> &CatchmentNetwork<T> {
        self.net
    }

    pub fn design(&self) -> &SourceDesign<T> {
        self.design
    }

    /// Joint nll only.
    pub(crate) fn value(&self, params: &ParameterSet<T>, latent: &LatentState<T>) -> Result<T, ModelError> {
        Ok(self.evaluate(params, latent, false, false)?.value)
    }

    pub(crate) fn evaluate(
        &self,
        params: &ParameterSet<T>,
        latent: &LatentState<T>,
        want_gradient: bool,
        want_hessian: bool,
    ) -> Result<LatentEval<T>, ModelError> {
        let n = self.n_catchments();
        let ny = self.n_years();
        if latent.eps.len() != n || latent.delta.len() != ny {
            return Err(ModelError::DimensionMismatch {
                what: "latent state",
                expected: n + ny,
                found: latent.dim(),
            });
        }
        let prop = propagate_in_order(self.net, self.design, params, &latent.eps, self.net.order())?;
        let sigma0 = params.sigma0();
        let obs = self.data.observations();

        let mut values = Vec::with_capacity(obs.len());
        let mut d1 = Vec::with_capacity(obs.len());
        let mut d2 = Vec::with_capacity(obs.len());
        for o in obs {
            let (v, g, h) = obs_nll_derivs(
                o.log_value,
                prop.lc[o.catchment] + latent.delta[o.year],
                sigma0,
                o.censored,
            );
            values.push(v);
            d1.push(g);
            d2.push(h);
        }
        let value = pairwise_sum(&values)
            + gaussian_prior_nll(&latent.eps, params.log_sigmap)
            + gaussian_prior_nll(&latent.delta, params.log_sigmay);
        if !value.is_finite() {
            return Err(ModelError::NonFinite("joint negative log-likelihood"));
        }
        if !want_gradient && !want_hessian {
            return Ok(LatentEval {
                value,
                grad_eps: Vec::new(),
                grad_delta: Vec::new(),
                hessian: None,
            });
        }

        let inv_vp = (-T::lit(2.0) * params.log_sigmap).exp();
        let inv_vy = (-T::lit(2.0) * params.log_sigmay).exp();

        // Per (catchment, year) sums of the first and second derivatives.
        let mut group_d1 = Vec::with_capacity(self.groups.len());
        let mut group_d2 = Vec::with_capacity(self.groups.len());
        for g in &self.groups {
            group_d1.push(pairwise_sum(&d1[g.start..g.end]));
            group_d2.push(pairwise_sum(&d2[g.start..g.end]));
        }
        let mut a = vec![T::zero(); n];
        let mut dd = vec![T::zero(); n];
        let mut year_d1 = vec![T::zero(); ny];
        let mut year_d2 = vec![T::zero(); ny];
        for (gi, g) in self.groups.iter().enumerate() {
            a[g.catchment] = a[g.catchment] + group_d1[gi];
            dd[g.catchment] = dd[g.catchment] + group_d2[gi];
            year_d1[g.year] = year_d1[g.year] + group_d1[gi];
            year_d2[g.year] = year_d2[g.year] + group_d2[gi];
        }

        let mut b = vec![T::zero(); n];
        for &i in self.net.order().iter().rev() {
            if self.layout.active[i] {
                let down = self.net.downstream(i).map_or(T::zero(), |d| b[d]);
                b[i] = a[i] + prop.share[i] * down;
            }
        }
        let grad_eps = (0..n).map(|k| b[k] + latent.eps[k] * inv_vp).collect();
        let grad_delta = (0..ny).map(|y| year_d1[y] + latent.delta[y] * inv_vy).collect();

        let hessian = want_hessian.then(|| {
            let mut blocks = Vec::with_capacity(self.layout.blocks.len());
            let mut coupling = Vec::with_capacity(self.layout.blocks.len());
            for block in &self.layout.blocks {
                let (hb, cb) = self.block_hessian(block, &prop.share, &b, &dd, &group_d2, inv_vp, ny);
                blocks.push(hb);
                coupling.push(cb);
            }
            let mut corner = Dense::zeros(ny);
            for y in 0..ny {
                corner.add(y, y, year_d2[y] + inv_vy);
            }
            ArrowMatrix {
                blocks,
                coupling,
                corner,
            }
        });

        Ok(LatentEval {
            value,
            grad_eps,
            grad_delta,
            hessian,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn block_hessian(
        &self,
        block: &BlockLayout,
        share: &[T],
        b: &[T],
        dd: &[T],
        group_d2: &[T],
        inv_vp: T,
        ny: usize,
    ) -> (Dense<T>, Vec<T>) {
        let s = block.nodes.len();
        // Row i of J: sensitivities of lC at local node i.
        let mut jac = vec![T::zero(); s * s];
        for i in 0..s {
            jac[i * s + i] = T::one();
            for &p in &block.parents[i] {
                let f = share[block.nodes[p]];
                for &k in &block.support[p] {
                    jac[i * s + k] = jac[i * s + k] + f * jac[p * s + k];
                }
            }
        }
        let mut h = Dense::zeros(s);
        let rank_one = |h: &mut Dense<T>, row: usize, support: &[usize], coeff: T| {
            for (ka, &k) in support.iter().enumerate() {
                let jk = coeff * jac[row * s + k];
                for &l in &support[..=ka] {
                    h.data[k * s + l] = h.data[k * s + l] + jk * jac[row * s + l];
                }
            }
        };
        for i in 0..s {
            let node = block.nodes[i];
            if dd[node] != T::zero() {
                rank_one(&mut h, i, &block.support[i], dd[node]);
            }
            let bm = b[node];
            if bm != T::zero() && !block.parents[i].is_empty() {
                for &p in &block.parents[i] {
                    rank_one(&mut h, p, &block.support[p], bm * share[block.nodes[p]]);
                }
                // g_m = J_m - e_m lives on the upstream closure of m.
                let up: Vec<usize> = block.support[i].iter().copied().filter(|&k| k != i).collect();
                rank_one(&mut h, i, &up, -bm);
            }
        }
        h.add_diagonal(inv_vp);
        h.symmetrize_from_lower();

        let mut coupling = vec![T::zero(); s * ny];
        for i in 0..s {
            let node = block.nodes[i];
            for gi in self.group_start[node]..self.group_start[node + 1] {
                let y = self.groups[gi].year;
                let w = group_d2[gi];
                for &k in &block.support[i] {
                    coupling[k * ny + y] = coupling[k * ny + y] + jac[i * s + k] * w;
                }
            }
        }
        (h, coupling)
    }
}
