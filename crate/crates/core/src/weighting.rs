//! Topology-aware weighting of historical ticks.
//!
//! The distance between two topologies adds, over every edge active in only
//! one of them, the mean absolute outage factor of that edge onto all edges
//! of their union. Each historical tick inherits the distance between its
//! period and the current one. Weights then solve
//!
//! ```text
//! min_w  Σ w_t d_t + (ρ/2) ‖w‖²   s.t.  w ≥ 0,  Σ w_t = 1
//! ```
//!
//! whose solution is `w_t = max((λ* - d_t)/ρ, 0)` for the unique `λ*` that
//! makes the weights sum to one. Ticks already flagged anomalous are zeroed
//! and the rest renormalized.

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::netmodel::{symmetric_difference, BranchId, GridCase, Topology};
use crate::sensitivity::DcModel;

/// Added to the mean distance by [`default_rho`] so that ρ stays positive.
pub const RHO_EPSILON: f64 = 1e-9;

/// Distance between the topologies of two periods.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GraphDistance {
    pub from_period: usize,
    pub to_period: usize,
    pub value: f64,
}

/// Mean absolute outage factor of `k` over the edges of `union`, which must
/// contain `k`. Fails with [`Error::Bridge`] when removing `k` islands part of
/// the network.
pub fn edge_contribution(case: &GridCase, union: &Topology, k: BranchId) -> Result<f64> {
    contribution(&DcModel::new(case, union)?, k)
}

fn contribution(model: &DcModel, k: BranchId) -> Result<f64> {
    let d = model.lodf_all(k)?;
    let n = model.topology().len() as f64;
    let sum: f64 = d
        .rows()
        .iter()
        .zip(d.values())
        .filter(|(&l, _)| l != k)
        .map(|(_, v)| v.abs())
        .sum();
    Ok(sum / n)
}

/// Distance between two topologies of the same case.
pub fn graph_distance(case: &GridCase, t1: &Topology, t2: &Topology) -> Result<GraphDistance> {
    let value = DistanceCache::new(Arc::new(case.clone())).distance(t1, t2)?;
    Ok(GraphDistance {
        from_period: t1.label(),
        to_period: t2.label(),
        value,
    })
}

#[derive(Debug)]
struct UnionEntry {
    model: DcModel,
    /// `None` marks a bridge of the union graph
    contributions: HashMap<BranchId, Option<f64>>,
}

/// Memoizes factored union networks and per-edge contributions.
#[derive(Debug)]
pub struct DistanceCache {
    case: Arc<GridCase>,
    unions: HashMap<BTreeSet<BranchId>, UnionEntry>,
}

impl DistanceCache {
    pub fn new(case: Arc<GridCase>) -> Self {
        DistanceCache {
            case,
            unions: HashMap::new(),
        }
    }

    pub fn distance(&mut self, t1: &Topology, t2: &Topology) -> Result<f64> {
        let diff = symmetric_difference(t1, t2)?;
        if diff.is_empty() {
            return Ok(0.0);
        }
        let union: BTreeSet<BranchId> = t1.active_edges().union(t2.active_edges()).copied().collect();
        if !self.unions.contains_key(&union) {
            let topo = Topology::new(&self.case, union.iter().copied(), 0)?;
            let model = DcModel::new(&self.case, &topo)?;
            self.unions.insert(
                union.clone(),
                UnionEntry {
                    model,
                    contributions: HashMap::new(),
                },
            );
        }
        let entry = self.unions.get_mut(&union).expect("inserted above");

        let mut parts = Vec::with_capacity(diff.len());
        for &k in &diff {
            let x = match entry.contributions.get(&k) {
                Some(&x) => x,
                None => {
                    let x = match contribution(&entry.model, k) {
                        Ok(x) => Some(x),
                        Err(Error::Bridge(_)) => None,
                        Err(e) => return Err(e),
                    };
                    entry.contributions.insert(k, x);
                    x
                }
            };
            parts.push((k, x));
        }

        let fallback = parts.iter().filter_map(|p| p.1).fold(f64::NAN, f64::max);
        let fallback = if fallback.is_nan() { 1.0 } else { fallback };
        let mut total = 0.0;
        for (k, x) in parts {
            total += x.unwrap_or_else(|| {
                log::warn!("edge {k} is a bridge of the union topology; using {fallback} as its contribution");
                fallback
            });
        }
        Ok(total)
    }
}

/// Expands per-period distances to ticks: ticks `[t·n_tau, (t+1)·n_tau)`
/// take `period_distances[t]`, ticks past the last listed period take zero.
pub fn tickwise_distances(period_distances: &[f64], n_tau: usize, total_ticks: usize) -> Result<Vec<f64>> {
    if n_tau == 0 {
        return Err(Error::InvalidArgument("ticks per period must be positive".into()));
    }
    Ok((0..total_ticks)
        .map(|t| period_distances.get(t / n_tau).copied().unwrap_or(0.0))
        .collect())
}

/// Mean distance plus [`RHO_EPSILON`].
pub fn default_rho(distances: &[f64]) -> f64 {
    if distances.is_empty() {
        return RHO_EPSILON;
    }
    distances.iter().sum::<f64>() / distances.len() as f64 + RHO_EPSILON
}

/// The `λ*` with `Σ max((λ* - d_t)/ρ, 0) = 1`, found by scanning the sorted
/// breakpoints.
pub fn solve_lambda(distances: &[f64], rho: f64) -> Result<f64> {
    if !(rho.is_finite() && rho > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "rho must be positive and finite, got {rho}"
        )));
    }
    if distances.is_empty() {
        return Err(Error::InvalidArgument("no distances to weight".into()));
    }
    if distances.iter().any(|d| !d.is_finite()) {
        return Err(Error::InvalidArgument("distances must be finite".into()));
    }
    let mut d = distances.to_vec();
    d.sort_by(f64::total_cmp);
    let n = d.len();
    let mut prefix = 0.0;
    for m in 1..=n {
        prefix += d[m - 1];
        let lambda = (rho + prefix) / m as f64;
        if m == n || lambda <= d[m] {
            return Ok(lambda);
        }
    }
    unreachable!("loop returns at m == n")
}

/// How [`assign_weights`] recovered from an all-zero weight vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum WeightFallback {
    /// Water-filling was repeated over the non-anomalous ticks only.
    RestrictedToNormal,
    /// Every tick was anomalous, so the mask was ignored.
    MaskIgnored,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TickWeights {
    pub distances: Vec<f64>,
    pub weights: Vec<f64>,
    pub lambda: f64,
    pub rho: f64,
    pub fallback: Option<WeightFallback>,
}

/// Closed-form weights for `lambda`, zeroed where `anomalous` is set and
/// renormalized.
///
/// If masking leaves nothing, the water-filling is redone over the
/// non-anomalous ticks alone, whose distances may all sit above `lambda`.
/// Only when every tick is anomalous is the mask dropped.
pub fn assign_weights(distances: &[f64], lambda: f64, rho: f64, anomalous: &[bool]) -> Result<TickWeights> {
    if anomalous.len() != distances.len() {
        return Err(Error::Dimension {
            what: "anomaly mask",
            expected: distances.len(),
            found: anomalous.len(),
        });
    }
    let raw = |lambda: f64, d: f64| ((lambda - d) / rho).max(0.0);
    let mut weights: Vec<f64> = distances
        .iter()
        .zip(anomalous)
        .map(|(&d, &a)| if a { 0.0 } else { raw(lambda, d) })
        .collect();
    let mut fallback = None;
    let mut lambda_used = lambda;
    let mut total: f64 = weights.iter().sum();

    if total <= 0.0 {
        let normal: Vec<f64> = distances
            .iter()
            .zip(anomalous)
            .filter(|(_, &a)| !a)
            .map(|(&d, _)| d)
            .collect();
        if normal.is_empty() {
            log::warn!("every historical tick is flagged anomalous; ignoring the anomaly mask");
            fallback = Some(WeightFallback::MaskIgnored);
            weights = distances.iter().map(|&d| raw(lambda, d)).collect();
        } else {
            log::debug!(
                "no normal tick near the current topology; re-weighting the {} normal ticks",
                normal.len()
            );
            fallback = Some(WeightFallback::RestrictedToNormal);
            lambda_used = solve_lambda(&normal, rho)?;
            weights = distances
                .iter()
                .zip(anomalous)
                .map(|(&d, &a)| if a { 0.0 } else { raw(lambda_used, d) })
                .collect();
        }
        total = weights.iter().sum();
    }
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::Singular(format!("tick weights sum to {total}")));
    }
    weights.iter_mut().for_each(|w| *w /= total);
    Ok(TickWeights {
        distances: distances.to_vec(),
        weights,
        lambda: lambda_used,
        rho,
        fallback,
    })
}

/// [`solve_lambda`] followed by [`assign_weights`]; `rho` defaults to
/// [`default_rho`].
pub fn compute_weights(distances: &[f64], rho: Option<f64>, anomalous: &[bool]) -> Result<TickWeights> {
    let rho = rho.unwrap_or_else(|| default_rho(distances));
    let lambda = solve_lambda(distances, rho)?;
    assign_weights(distances, lambda, rho, anomalous)
}
