//! DC power flow and the linear sensitivity factors derived from it.
//!
//! A [`DcModel`] factors the reduced susceptance matrix of one topology once;
//! power flows, PTDF rows and LODF vectors are all solves against that
//! factorization. Injection vectors are balanced before solving by letting
//! the slack bus absorb any mismatch, so callers may pass raw load data.

use std::collections::HashMap;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{SparseLdl, SymmetricCsc};
use crate::netmodel::{observed_edges, BranchId, BusId, GridCase, SensorSet, Topology};

/// `|1 - PTDF_kk|` below this marks an outage as islanding.
pub const BRIDGE_TOLERANCE: f64 = 1e-8;

const RESIDUAL_TARGET: f64 = 1e-10;
const NO_POS: usize = usize::MAX;

#[derive(Debug, Clone, Copy)]
struct EdgeTerm {
    id: BranchId,
    from: usize,
    to: usize,
    susceptance: f64,
}

/// Factored DC network for one topology and slack choice.
#[derive(Debug)]
pub struct DcModel {
    topology: Arc<Topology>,
    n_bus: usize,
    slack: BusId,
    slack_idx: usize,
    /// bus index -> row of the reduced system (slack maps to `NO_POS`)
    reduced_pos: Vec<usize>,
    edges: Vec<EdgeTerm>,
    edge_pos: HashMap<BranchId, usize>,
    b_reduced: SymmetricCsc,
    ldl: SparseLdl,
}

impl DcModel {
    pub fn new(case: &GridCase, topology: &Topology) -> Result<Self> {
        Self::with_slack(case, topology, case.slack_bus())
    }

    pub fn with_slack(case: &GridCase, topology: &Topology, slack: BusId) -> Result<Self> {
        topology.check_case(case)?;
        let slack_idx = case.bus_index(slack).ok_or(Error::UnknownBus(slack))?;
        let components = crate::netmodel::connected_components(case, topology.active_edges());
        if components.len() > 1 {
            return Err(Error::Islanding { components });
        }

        let n_bus = case.n_buses();
        let mut reduced_pos = vec![NO_POS; n_bus];
        let mut next = 0;
        for (i, pos) in reduced_pos.iter_mut().enumerate() {
            if i != slack_idx {
                *pos = next;
                next += 1;
            }
        }

        let mut edges = Vec::with_capacity(topology.len());
        let mut triplets = Vec::with_capacity(3 * topology.len());
        for &id in topology.active_edges() {
            let br = case.branch(id).ok_or(Error::UnknownBranch(id))?;
            let from = case.bus_index(br.from_bus).expect("validated case");
            let to = case.bus_index(br.to_bus).expect("validated case");
            let b = 1.0 / br.reactance;
            edges.push(EdgeTerm {
                id,
                from,
                to,
                susceptance: b,
            });
            let (rf, rt) = (reduced_pos[from], reduced_pos[to]);
            if rf != NO_POS {
                triplets.push((rf, rf, b));
            }
            if rt != NO_POS {
                triplets.push((rt, rt, b));
            }
            if rf != NO_POS && rt != NO_POS {
                triplets.push((rf.max(rt), rf.min(rt), -b));
            }
        }
        let edge_pos = edges.iter().enumerate().map(|(k, e)| (e.id, k)).collect();
        let b_reduced = SymmetricCsc::from_triplets(n_bus - 1, &triplets);
        let ldl = SparseLdl::factor(&b_reduced)?;
        log::debug!(
            "factored reduced B: {} buses, {} branches, nnz(L) = {}",
            n_bus,
            edges.len(),
            ldl.nnz_l()
        );
        Ok(DcModel {
            topology: Arc::new(topology.clone()),
            n_bus,
            slack,
            slack_idx,
            reduced_pos,
            edges,
            edge_pos,
            b_reduced,
            ldl,
        })
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn slack(&self) -> BusId {
        self.slack
    }

    /// Active branch ids in the order used by [`DcFlowSolution::flows`].
    pub fn edge_ids(&self) -> Vec<BranchId> {
        self.edges.iter().map(|e| e.id).collect()
    }

    /// Angles for a full per-bus injection vector. The slack entry is ignored
    /// (it absorbs the mismatch) and its angle is zero.
    fn angles(&self, injections: &[f64]) -> (Vec<f64>, f64) {
        let rhs: Vec<f64> = (0..self.n_bus)
            .filter(|&i| i != self.slack_idx)
            .map(|i| injections[i])
            .collect();
        let mut theta = rhs.clone();
        self.ldl.solve_in_place(&mut theta);
        let mut residual = residual_inf(&self.b_reduced, &theta, &rhs);
        if residual > RESIDUAL_TARGET {
            // one step of iterative refinement
            let bx = self.b_reduced.mul_vec(&theta);
            let mut r: Vec<f64> = rhs.iter().zip(&bx).map(|(p, q)| p - q).collect();
            self.ldl.solve_in_place(&mut r);
            theta.iter_mut().zip(&r).for_each(|(t, d)| *t += d);
            residual = residual_inf(&self.b_reduced, &theta, &rhs);
        }
        (self.expand(&theta), residual)
    }

    fn expand(&self, reduced: &[f64]) -> Vec<f64> {
        self.reduced_pos
            .iter()
            .map(|&p| if p == NO_POS { 0.0 } else { reduced[p] })
            .collect()
    }

    /// Angles produced by a unit transfer from bus `from` to bus `to`
    /// (bus indices).
    fn transfer_angles(&self, from: usize, to: usize) -> Vec<f64> {
        let mut rhs = vec![0.0; self.n_bus - 1];
        if self.reduced_pos[from] != NO_POS {
            rhs[self.reduced_pos[from]] += 1.0;
        }
        if self.reduced_pos[to] != NO_POS {
            rhs[self.reduced_pos[to]] -= 1.0;
        }
        self.ldl.solve_in_place(&mut rhs);
        self.expand(&rhs)
    }

    fn edge_flow(e: &EdgeTerm, theta: &[f64]) -> f64 {
        (theta[e.from] - theta[e.to]) * e.susceptance
    }

    pub fn solve(&self, injections: &[f64]) -> Result<DcFlowSolution> {
        if injections.len() != self.n_bus {
            return Err(Error::Dimension {
                what: "injection vector",
                expected: self.n_bus,
                found: injections.len(),
            });
        }
        if injections.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidArgument("injections must be finite".into()));
        }
        let (angles, residual) = self.angles(injections);
        if residual > 1e3 * RESIDUAL_TARGET {
            return Err(Error::Singular(format!("DC solve residual {residual:e} too large")));
        }
        let flows = self.edges.iter().map(|e| Self::edge_flow(e, &angles)).collect();
        Ok(DcFlowSolution {
            angles,
            edges: self.edge_ids(),
            flows,
            residual,
        })
    }

    /// PTDF rows for the given active branches: entry `(l, i)` is the flow on
    /// `l` per unit injected at bus `i` and withdrawn at the slack.
    pub fn ptdf(&self, rows: &[BranchId]) -> Result<PtdfMatrix> {
        let terms = rows
            .iter()
            .map(|&id| self.edge(id).copied())
            .collect::<Result<Vec<_>>>()?;
        let n = self.n_bus;
        let row_values: Vec<Vec<f64>> = terms
            .par_iter()
            .map(|e| {
                // row_l = b_l (B⁻¹ (e_from - e_to))ᵀ, symmetric B
                let z = self.transfer_angles(e.from, e.to);
                z.into_iter().map(|v| v * e.susceptance).collect()
            })
            .collect();
        let mut values = Vec::with_capacity(rows.len() * n);
        for r in row_values {
            values.extend(r);
        }
        Ok(PtdfMatrix {
            rows: rows.to_vec(),
            n_bus: n,
            values,
            slack: self.slack,
            topology: Arc::clone(&self.topology),
        })
    }

    /// True when switching `edge` off would split the network.
    pub fn is_bridge(&self, edge: BranchId) -> Result<bool> {
        let k = *self.edge(edge)?;
        let theta = self.transfer_angles(k.from, k.to);
        Ok((1.0 - Self::edge_flow(&k, &theta)).abs() < BRIDGE_TOLERANCE)
    }

    /// LODF of `outage` over every active branch (self-entry -1).
    pub fn lodf_all(&self, outage: BranchId) -> Result<LodfVector> {
        self.lodf(outage, &self.edge_ids())
    }

    /// LODF of `outage` restricted to `rows` (all must be active).
    pub fn lodf(&self, outage: BranchId, rows: &[BranchId]) -> Result<LodfVector> {
        let k = *self.edge(outage)?;
        let theta = self.transfer_angles(k.from, k.to);
        let denom = 1.0 - Self::edge_flow(&k, &theta);
        if denom.abs() < BRIDGE_TOLERANCE {
            return Err(Error::Bridge(outage));
        }
        let values = rows
            .iter()
            .map(|&id| {
                if id == outage {
                    return Ok(-1.0);
                }
                let e = self.edge(id)?;
                Ok(Self::edge_flow(e, &theta) / denom)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LodfVector {
            outage,
            rows: rows.to_vec(),
            values,
            topology: Arc::clone(&self.topology),
        })
    }

    fn edge(&self, id: BranchId) -> Result<&EdgeTerm> {
        self.edge_pos
            .get(&id)
            .map(|&k| &self.edges[k])
            .ok_or(Error::InactiveBranch(id))
    }
}

fn residual_inf(a: &SymmetricCsc, x: &[f64], b: &[f64]) -> f64 {
    a.mul_vec(x)
        .iter()
        .zip(b)
        .map(|(ax, bi)| (ax - bi).abs())
        .fold(0.0, f64::max)
}

/// Bus angles and branch flows of one DC solve.
#[derive(Debug, Clone)]
pub struct DcFlowSolution {
    /// Radians, per bus in case order; slack is zero.
    pub angles: Vec<f64>,
    /// Active branches, sorted by id.
    pub edges: Vec<BranchId>,
    /// Per-unit flow on each entry of `edges`, oriented from → to.
    pub flows: Vec<f64>,
    /// Infinity norm of `B θ - p` on the reduced system.
    pub residual: f64,
}

impl DcFlowSolution {
    pub fn flow(&self, id: BranchId) -> Option<f64> {
        self.edges.binary_search(&id).ok().map(|k| self.flows[k])
    }

    /// Flows for the given branches, zero for branches not in the solution.
    pub fn flows_on(&self, ids: &[BranchId]) -> Vec<f64> {
        ids.iter().map(|&id| self.flow(id).unwrap_or(0.0)).collect()
    }
}

/// Dense PTDF block: one row per listed branch, one column per bus.
#[derive(Debug, Clone)]
pub struct PtdfMatrix {
    rows: Vec<BranchId>,
    n_bus: usize,
    values: Vec<f64>,
    slack: BusId,
    topology: Arc<Topology>,
}

impl PtdfMatrix {
    pub fn rows(&self) -> &[BranchId] {
        &self.rows
    }

    pub fn n_buses(&self) -> usize {
        self.n_bus
    }

    pub fn slack(&self) -> BusId {
        self.slack
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.n_bus..(r + 1) * self.n_bus]
    }

    pub fn get(&self, r: usize, bus: usize) -> f64 {
        self.values[r * self.n_bus + bus]
    }

    /// `F x` for a per-bus vector `x`.
    pub fn mul_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_bus {
            return Err(Error::Dimension {
                what: "PTDF product",
                expected: self.n_bus,
                found: x.len(),
            });
        }
        Ok((0..self.rows.len())
            .map(|r| self.row(r).iter().zip(x).map(|(f, v)| f * v).sum())
            .collect())
    }
}

/// Outage distribution factors of one branch over a list of monitored
/// branches.
#[derive(Debug, Clone)]
pub struct LodfVector {
    outage: BranchId,
    rows: Vec<BranchId>,
    values: Vec<f64>,
    topology: Arc<Topology>,
}

impl LodfVector {
    pub fn outage(&self) -> BranchId {
        self.outage
    }

    pub fn rows(&self) -> &[BranchId] {
        &self.rows
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Topology the factors were computed on (the pre-outage network).
    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn get(&self, id: BranchId) -> Option<f64> {
        self.rows.iter().position(|&r| r == id).map(|k| self.values[k])
    }
}

/// One-shot DC power flow.
pub fn solve_dc(case: &GridCase, topology: &Topology, injections: &[f64]) -> Result<DcFlowSolution> {
    DcModel::new(case, topology)?.solve(injections)
}

/// PTDF of the observed active branches of `topology` against `slack`.
pub fn ptdf(case: &GridCase, topology: &Topology, sensors: &SensorSet, slack: BusId) -> Result<PtdfMatrix> {
    let model = DcModel::with_slack(case, topology, slack)?;
    model.ptdf(&sensors.observed_in(topology))
}

/// LODF of `outage` on the observed active branches of `topology`, which is
/// the pre-outage network.
pub fn lodf(case: &GridCase, topology: &Topology, sensors: &SensorSet, outage: BranchId) -> Result<LodfVector> {
    let model = DcModel::new(case, topology)?;
    model.lodf(outage, &sensors.observed_in(topology))
}

/// Convenience for a sensor set covering every bus.
pub fn full_sensor_set(case: &GridCase) -> SensorSet {
    observed_edges(case, case.buses().iter().map(|b| b.id)).expect("case buses")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::fixtures::{branch, triangle};
    use crate::netmodel::{Bus, BusId};

    fn inj(case: &GridCase, pairs: &[(u32, f64)]) -> Vec<f64> {
        let mut p = vec![0.0; case.n_buses()];
        for &(b, v) in pairs {
            p[case.bus_index(BusId(b)).unwrap()] = v;
        }
        p
    }

    /// Reduced system for the unit triangle with slack 1 is
    /// [[2, -1], [-1, 2]] θ = [1, 0]  →  θ2 = 2/3, θ3 = 1/3.
    #[test]
    fn triangle_flows_match_hand_solution() {
        let case = triangle();
        let topo = Topology::baseline(&case).unwrap();
        let sol = solve_dc(&case, &topo, &inj(&case, &[(1, -1.0), (2, 1.0)])).unwrap();
        let f12 = sol.flow(BranchId(1)).unwrap(); // 1 -> 2
        let f23 = sol.flow(BranchId(2)).unwrap(); // 2 -> 3
        let f31 = sol.flow(BranchId(3)).unwrap(); // 3 -> 1
        assert!((f12 + 2.0 / 3.0).abs() < 1e-14);
        assert!((f23 - 1.0 / 3.0).abs() < 1e-14);
        assert!((f31 - 1.0 / 3.0).abs() < 1e-14);
        assert!(sol.residual <= 1e-10);
        assert_eq!(sol.angles[0], 0.0);
    }

    #[test]
    fn zero_injection_gives_zero_flow() {
        let case = triangle();
        let topo = Topology::baseline(&case).unwrap();
        let sol = solve_dc(&case, &topo, &[0.0; 3]).unwrap();
        assert!(sol.flows.iter().all(|&f| f == 0.0));
    }

    #[test]
    fn slack_absorbs_mismatch() {
        let case = triangle();
        let topo = Topology::baseline(&case).unwrap();
        let a = solve_dc(&case, &topo, &inj(&case, &[(1, -1.0), (2, 1.0)])).unwrap();
        let b = solve_dc(&case, &topo, &inj(&case, &[(1, 7.0), (2, 1.0)])).unwrap();
        assert_eq!(a.flows, b.flows);
    }

    #[test]
    fn cut_off_bus_is_islanding() {
        let case = triangle();
        let topo = Topology::new(&case, [BranchId(1)], 0).unwrap();
        match solve_dc(&case, &topo, &[0.0; 3]) {
            Err(Error::Islanding { components }) => assert_eq!(components.len(), 2),
            other => panic!("expected islanding, got {other:?}"),
        }
    }

    #[test]
    fn triangle_ptdf_entry() {
        let case = triangle();
        let topo = Topology::baseline(&case).unwrap();
        let sensors = full_sensor_set(&case);
        let f = ptdf(&case, &topo, &sensors, BusId(1)).unwrap();
        // flow on 1->2 per unit injected at 2 is -2/3, i.e. 2/3 from 2 to 1
        assert!((f.get(0, 1) + 2.0 / 3.0).abs() < 1e-14);
        for r in 0..3 {
            assert_eq!(f.get(r, 0), 0.0);
        }
    }

    #[test]
    fn triangle_lodf_matches_resolve() {
        let case = triangle();
        let topo = Topology::baseline(&case).unwrap();
        let sensors = full_sensor_set(&case);
        let d = lodf(&case, &topo, &sensors, BranchId(2)).unwrap();
        assert_eq!(d.get(BranchId(2)), Some(-1.0));
        let p = inj(&case, &[(1, -1.0), (2, 0.4), (3, 0.6)]);
        let pre = solve_dc(&case, &topo, &p).unwrap();
        let post = solve_dc(&case, &topo.without(&case, BranchId(2)).unwrap(), &p).unwrap();
        let pk = pre.flow(BranchId(2)).unwrap();
        for id in [BranchId(1), BranchId(3)] {
            let rebuilt = pre.flow(id).unwrap() + d.get(id).unwrap() * pk;
            assert!((rebuilt - post.flow(id).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn radial_outage_is_a_bridge() {
        let buses = vec![
            Bus {
                id: BusId(1),
                p_load: 0.0,
                p_gen: 0.0,
            },
            Bus {
                id: BusId(2),
                p_load: 0.1,
                p_gen: 0.0,
            },
        ];
        let case = GridCase::new(100.0, buses, vec![branch(1, 1, 2, 0.1)], BusId(1)).unwrap();
        let topo = Topology::baseline(&case).unwrap();
        let sensors = full_sensor_set(&case);
        assert!(matches!(
            lodf(&case, &topo, &sensors, BranchId(1)),
            Err(Error::Bridge(BranchId(1)))
        ));
    }

    #[test]
    fn lodf_on_inactive_branch_is_rejected() {
        let case = triangle();
        let topo = Topology::baseline(&case).unwrap().without(&case, BranchId(3)).unwrap();
        let model = DcModel::new(&case, &topo);
        // removing 3 leaves a path 1-2-3: every remaining edge is a bridge
        let model = model.unwrap();
        assert!(matches!(model.lodf_all(BranchId(3)), Err(Error::InactiveBranch(_))));
        assert!(matches!(model.lodf_all(BranchId(1)), Err(Error::Bridge(_))));
        assert!(model.is_bridge(BranchId(1)).unwrap());
        let full = DcModel::new(&case, &Topology::baseline(&case).unwrap()).unwrap();
        assert!(!full.is_bridge(BranchId(1)).unwrap());
    }
}
