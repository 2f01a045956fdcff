//! Sub-catchment drainage network: connectivity, level stratification and
//! the steady-state water balance.
//!
//! Every sub-catchment drains to at most one downstream neighbour, so the
//! network is a forest of in-trees rooted at marine outlets. Catchments are
//! stored in input order and addressed internally by their position.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("duplicate sub-catchment id `{0}`")]
    DuplicateId(String),
    #[error("sub-catchment `{id}` drains to unknown sub-catchment `{downstream}`")]
    DanglingDownstream { id: String, downstream: String },
    #[error("drainage cycle through sub-catchments {0:?}")]
    CycleDetected(Vec<String>),
    #[error("sub-catchment `{id}`: {field} = {value} is not allowed ({rule})")]
    InvalidHydrology {
        id: String,
        field: &'static str,
        value: f64,
        rule: &'static str,
    },
    #[error("network has no sub-catchments")]
    Empty,
}

/// Hydrology of a single sub-catchment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubCatchment<T> {
    pub id: String,
    /// Total outlet discharge.
    pub q_total: T,
    /// Groundwater inflow to surface water.
    pub q_ground: T,
    /// Shallow / surface-near inflow.
    pub q_shallow: T,
    /// Surface water area.
    pub area: T,
    /// Receiving sub-catchment; `None` drains to the sea.
    pub downstream: Option<String>,
}

impl<T: Real> SubCatchment<T> {
    pub fn new(
        id: impl Into<String>,
        downstream: Option<&str>,
        q_total: T,
        q_ground: T,
        q_shallow: T,
        area: T,
    ) -> Self {
        Self {
            id: id.into(),
            q_total,
            q_ground,
            q_shallow,
            area,
            downstream: downstream.map(str::to_owned),
        }
    }

    fn validate(&self) -> Result<(), NetworkError> {
        let bad = |field, value: T, rule| NetworkError::InvalidHydrology {
            id: self.id.clone(),
            field,
            value: value.to_f64().unwrap_or(f64::NAN),
            rule,
        };
        if !(self.q_total.is_finite() && self.q_total > T::zero()) {
            return Err(bad("q_total", self.q_total, "must be finite and > 0"));
        }
        for (field, v) in [
            ("q_ground", self.q_ground),
            ("q_shallow", self.q_shallow),
            ("area_surface", self.area),
        ] {
            if !(v.is_finite() && v >= T::zero()) {
                return Err(bad(field, v, "must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

/// Immutable, validated drainage network.
#[derive(Debug, Clone, PartialEq)]
pub struct CatchmentNetwork<T> {
    catchments: Vec<SubCatchment<T>>,
    index: HashMap<String, usize>,
    /// Row `i` of the connectivity matrix: the single `j` with `psi[i][j] = 1`.
    downstream: Vec<Option<usize>>,
    /// Catchments draining into `i`, sorted by id.
    upstream: Vec<Vec<usize>>,
    levels: Vec<usize>,
    /// Evaluation order: level ascending, ties by id.
    order: Vec<usize>,
    /// `order[level_starts[l]..level_starts[l + 1]]` holds level `l`.
    level_starts: Vec<usize>,
    /// Marine outlet at the root of each catchment's tree.
    outlet: Vec<usize>,
}

impl<T: Real> CatchmentNetwork<T> {
    /// Validates the catchments and derives connectivity and levels.
    pub fn build(catchments: Vec<SubCatchment<T>>) -> Result<Self, NetworkError> {
        if catchments.is_empty() {
            return Err(NetworkError::Empty);
        }
        let n = catchments.len();
        let mut index = HashMap::with_capacity(n);
        for (i, c) in catchments.iter().enumerate() {
            c.validate()?;
            if index.insert(c.id.clone(), i).is_some() {
                return Err(NetworkError::DuplicateId(c.id.clone()));
            }
        }

        let mut downstream = vec![None; n];
        for (i, c) in catchments.iter().enumerate() {
            if let Some(d) = &c.downstream {
                let j = *index.get(d).ok_or_else(|| NetworkError::DanglingDownstream {
                    id: c.id.clone(),
                    downstream: d.clone(),
                })?;
                if j == i {
                    return Err(NetworkError::CycleDetected(vec![c.id.clone()]));
                }
                downstream[i] = Some(j);
            }
        }

        let mut upstream = vec![Vec::new(); n];
        for (i, d) in downstream.iter().enumerate() {
            if let Some(j) = *d {
                upstream[j].push(i);
            }
        }
        for ups in &mut upstream {
            ups.sort_by(|&a, &b| catchments[a].id.cmp(&catchments[b].id));
        }

        // Kahn's algorithm over in-degrees; a node's level is fixed once all
        // of its upstream neighbours have been processed.
        let mut pending: Vec<usize> = upstream.iter().map(Vec::len).collect();
        let mut levels = vec![0usize; n];
        let mut stack: Vec<usize> = (0..n).filter(|&i| pending[i] == 0).collect();
        let mut visited = 0usize;
        while let Some(i) = stack.pop() {
            visited += 1;
            if let Some(j) = downstream[i] {
                levels[j] = levels[j].max(levels[i] + 1);
                pending[j] -= 1;
                if pending[j] == 0 {
                    stack.push(j);
                }
            }
        }
        if visited < n {
            return Err(NetworkError::CycleDetected(find_cycle(
                &catchments,
                &downstream,
                &pending,
            )));
        }

        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            levels[a]
                .cmp(&levels[b])
                .then_with(|| catchments[a].id.cmp(&catchments[b].id))
        });
        let max_level = order.last().map_or(0, |&i| levels[i]);
        let mut level_starts = vec![0usize; max_level + 2];
        for &i in &order {
            level_starts[levels[i] + 1] += 1;
        }
        for l in 1..level_starts.len() {
            level_starts[l] += level_starts[l - 1];
        }

        let mut outlet = vec![usize::MAX; n];
        for &i in order.iter().rev() {
            outlet[i] = match downstream[i] {
                None => i,
                Some(j) => outlet[j],
            };
        }

        Ok(Self {
            catchments,
            index,
            downstream,
            upstream,
            levels,
            order,
            level_starts,
            outlet,
        })
    }

    pub fn len(&self) -> usize {
        self.catchments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.catchments.is_empty()
    }

    pub fn catchments(&self) -> &[SubCatchment<T>] {
        &self.catchments
    }

    pub fn catchment(&self, i: usize) -> &SubCatchment<T> {
        &self.catchments[i]
    }

    pub fn id(&self, i: usize) -> &str {
        &self.catchments[i].id
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Non-zero column of connectivity row `i`, if any.
    pub fn downstream(&self, i: usize) -> Option<usize> {
        self.downstream[i]
    }

    /// Connectivity matrix entry: 1 if `i` discharges into `j`.
    pub fn psi(&self, i: usize, j: usize) -> u8 {
        u8::from(self.downstream[i] == Some(j))
    }

    pub fn upstream(&self, i: usize) -> &[usize] {
        &self.upstream[i]
    }

    pub fn level(&self, i: usize) -> usize {
        self.levels[i]
    }

    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    pub fn max_level(&self) -> usize {
        self.level_starts.len() - 2
    }

    /// Level-ascending evaluation order.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Catchments of one level, sorted by id.
    pub fn level_members(&self, level: usize) -> &[usize] {
        &self.order[self.level_starts[level]..self.level_starts[level + 1]]
    }

    /// Marine outlet that catchment `i` ultimately drains to.
    pub fn outlet_of(&self, i: usize) -> usize {
        self.outlet[i]
    }

    pub fn is_marine_outlet(&self, i: usize) -> bool {
        self.downstream[i].is_none()
    }

    /// Ids of the catchments that discharge to the sea, in evaluation order.
    pub fn marine_outlets(&self) -> Vec<&str> {
        self.order
            .iter()
            .filter(|&&i| self.downstream[i].is_none())
            .map(|&i| self.id(i))
            .collect()
    }

    /// All catchments draining (directly or indirectly) into `i`.
    pub fn upstream_closure(&self, i: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack: Vec<usize> = self.upstream[i].clone();
        while let Some(j) = stack.pop() {
            out.push(j);
            stack.extend_from_slice(&self.upstream[j]);
        }
        out.sort_unstable();
        out
    }

    /// Catchments on the flow path from `i` to the sea, excluding `i`.
    pub fn downstream_path(&self, i: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut cur = self.downstream[i];
        while let Some(j) = cur {
            out.push(j);
            cur = self.downstream[j];
        }
        out
    }

    /// Per-catchment water balance residuals.
    pub fn check_water_balance(&self, rel_tol: T) -> BalanceReport<T> {
        let residuals: Vec<T> = (0..self.len())
            .map(|i| {
                let c = &self.catchments[i];
                let inflow = self.upstream[i]
                    .iter()
                    .fold(T::zero(), |acc, &j| acc + self.catchments[j].q_total);
                c.q_total - (inflow + c.q_ground + c.q_shallow)
            })
            .collect();
        let flagged = self
            .order
            .iter()
            .filter(|&&i| (residuals[i] / self.catchments[i].q_total).abs() > rel_tol)
            .map(|&i| self.id(i).to_owned())
            .collect();
        BalanceReport {
            residuals,
            flagged,
            rel_tol,
        }
    }
}

/// Result of [`CatchmentNetwork::check_water_balance`].
#[derive(Debug, Clone, PartialEq)]
pub struct BalanceReport<T> {
    /// `Q_i - (sum of upstream Q + Qg_i + Qs_i)` in network index order.
    pub residuals: Vec<T>,
    /// Ids whose relative residual exceeds `rel_tol`, in evaluation order.
    pub flagged: Vec<String>,
    pub rel_tol: T,
}

impl<T> BalanceReport<T> {
    pub fn is_balanced(&self) -> bool {
        self.flagged.is_empty()
    }
}

fn find_cycle<T>(
    catchments: &[SubCatchment<T>],
    downstream: &[Option<usize>],
    pending: &[usize],
) -> Vec<String> {
    // Any unprocessed node either lies on a cycle or drains into one;
    // following downstream pointers must revisit a node.
    let start = (0..catchments.len())
        .find(|&i| pending[i] > 0)
        .expect("unvisited node exists");
    let mut seen = HashMap::new();
    let mut path = Vec::new();
    let mut cur = start;
    loop {
        if let Some(&pos) = seen.get(&cur) {
            let mut ids: Vec<String> = path[pos..]
                .iter()
                .map(|&i: &usize| catchments[i].id.clone())
                .collect();
            ids.sort();
            return ids;
        }
        seen.insert(cur, path.len());
        path.push(cur);
        cur = downstream[cur].expect("cycle members always have a downstream");
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sc(id: &str, down: Option<&str>, q: f64) -> SubCatchment<f64> {
        SubCatchment::new(id, down, q, 0.0, q, 0.0)
    }

    #[test]
    fn chain_levels() {
        let net = CatchmentNetwork::build(vec![
            sc("C", None, 3.0),
            sc("A", Some("B"), 1.0),
            sc("B", Some("C"), 2.0),
        ])
        .unwrap();
        let lvl = |id| net.level(net.index_of(id).unwrap());
        assert_eq!((lvl("A"), lvl("B"), lvl("C")), (0, 1, 2));
        let ids: Vec<&str> = net.order().iter().map(|&i| net.id(i)).collect();
        assert_eq!(ids, ["A", "B", "C"]);
        assert_eq!(net.marine_outlets(), ["C"]);
        assert_eq!(net.max_level(), 2);
    }

    #[test]
    fn two_level_zero_feeders() {
        let net = CatchmentNetwork::build(vec![
            sc("r", None, 3.0),
            sc("b", Some("r"), 1.0),
            sc("a", Some("r"), 1.0),
        ])
        .unwrap();
        let r = net.index_of("r").unwrap();
        assert_eq!(net.level(r), 1);
        let ups: Vec<&str> = net.upstream(r).iter().map(|&i| net.id(i)).collect();
        assert_eq!(ups, ["a", "b"]);
        assert_eq!(net.level_members(0).len(), 2);
    }

    #[test]
    fn disjoint_chains_have_two_outlets() {
        let net = CatchmentNetwork::build(vec![
            sc("a1", Some("a2"), 1.0),
            sc("a2", None, 2.0),
            sc("b1", Some("b2"), 1.0),
            sc("b2", None, 2.0),
        ])
        .unwrap();
        let mut outs = net.marine_outlets();
        outs.sort();
        assert_eq!(outs, ["a2", "b2"]);
        assert_eq!(net.outlet_of(0), 1);
    }

    #[test]
    fn rejects_bad_topology() {
        let dup = CatchmentNetwork::build(vec![sc("a", None, 1.0), sc("a", None, 1.0)]);
        assert_eq!(dup.unwrap_err(), NetworkError::DuplicateId("a".into()));

        let dangling = CatchmentNetwork::build(vec![sc("a", Some("zz"), 1.0)]);
        assert!(matches!(
            dangling.unwrap_err(),
            NetworkError::DanglingDownstream { ref downstream, .. } if downstream == "zz"
        ));

        let selfloop = CatchmentNetwork::build(vec![sc("a", Some("a"), 1.0)]);
        assert_eq!(
            selfloop.unwrap_err(),
            NetworkError::CycleDetected(vec!["a".into()])
        );

        let cyc = CatchmentNetwork::build(vec![
            sc("x", Some("a"), 1.0),
            sc("a", Some("b"), 1.0),
            sc("b", Some("c"), 1.0),
            sc("c", Some("a"), 1.0),
        ]);
        assert_eq!(
            cyc.unwrap_err(),
            NetworkError::CycleDetected(vec!["a".into(), "b".into(), "c".into()])
        );
    }

    #[test]
    fn rejects_zero_discharge() {
        let err = CatchmentNetwork::build(vec![sc("a", None, 0.0)]).unwrap_err();
        assert!(matches!(err, NetworkError::InvalidHydrology { field: "q_total", .. }));
        let neg = SubCatchment::new("a", None, 1.0, -0.5, 1.0, 0.0);
        assert!(CatchmentNetwork::build(vec![neg]).is_err());
    }

    #[test]
    fn water_balance_residuals() {
        let net = CatchmentNetwork::build(vec![
            SubCatchment::new("up", Some("down"), 10.0, 4.0, 6.0, 0.0),
            SubCatchment::new("down", None, 14.0, 2.0, 3.0, 0.0),
        ])
        .unwrap();
        let rep = net.check_water_balance(0.05);
        assert_eq!(rep.residuals, vec![0.0, -1.0]);
        assert_eq!(rep.flagged, vec!["down".to_string()]);

        let ok = CatchmentNetwork::build(vec![
            SubCatchment::new("up", Some("down"), 10.0, 4.0, 6.0, 0.0),
            SubCatchment::new("down", None, 15.0, 2.0, 3.0, 0.0),
        ])
        .unwrap();
        assert!(ok.check_water_balance(1e-12).is_balanced());
    }

    #[test]
    fn closures() {
        let net = CatchmentNetwork::build(vec![
            sc("a", Some("c"), 1.0),
            sc("b", Some("c"), 1.0),
            sc("c", Some("d"), 1.0),
            sc("d", None, 1.0),
        ])
        .unwrap();
        assert_eq!(net.upstream_closure(3), vec![0, 1, 2]);
        assert_eq!(net.downstream_path(0), vec![2, 3]);
        assert_eq!(net.psi(0, 2), 1);
        assert_eq!(net.psi(2, 0), 0);
    }
}
