use std::collections::BTreeSet;

use petgraph::unionfind::UnionFind;

use super::{BranchId, BusId, CaseId, GridCase};
use crate::error::{Error, Result};

/// The set of energized branches during one period.
///
/// Branch ids refer to the case the topology was built from; the buses that
/// carry at least one active branch must form a single connected component.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    case_id: CaseId,
    active: BTreeSet<BranchId>,
    label: usize,
}

impl Topology {
    pub fn new(case: &GridCase, active: impl IntoIterator<Item = BranchId>, label: usize) -> Result<Self> {
        let active: BTreeSet<BranchId> = active.into_iter().collect();
        for &id in &active {
            if case.branch(id).is_none() {
                return Err(Error::UnknownBranch(id));
            }
        }
        let mut energized: Vec<Vec<BusId>> = connected_components(case, &active)
            .into_iter()
            .filter(|c| c.len() > 1)
            .collect();
        if energized.len() > 1 {
            energized.sort_by_key(|c| std::cmp::Reverse(c.len()));
            return Err(Error::Islanding { components: energized });
        }
        Ok(Topology {
            case_id: case.id().clone(),
            active,
            label,
        })
    }

    /// All in-service branches of the case.
    pub fn baseline(case: &GridCase) -> Result<Self> {
        Self::new(case, case.in_service_edges(), 0)
    }

    pub fn case_id(&self) -> &CaseId {
        &self.case_id
    }

    pub fn active_edges(&self) -> &BTreeSet<BranchId> {
        &self.active
    }

    pub fn label(&self) -> usize {
        self.label
    }

    pub fn contains(&self, id: BranchId) -> bool {
        self.active.contains(&id)
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    pub fn relabel(mut self, label: usize) -> Self {
        self.label = label;
        self
    }

    /// This topology with `edge` switched off.
    pub fn without(&self, case: &GridCase, edge: BranchId) -> Result<Self> {
        self.check_case(case)?;
        if !self.contains(edge) {
            return Err(Error::InactiveBranch(edge));
        }
        let mut active = self.active.clone();
        active.remove(&edge);
        Topology::new(case, active, self.label)
    }

    /// This topology with `edge` switched on.
    pub fn with(&self, case: &GridCase, edge: BranchId) -> Result<Self> {
        self.check_case(case)?;
        let mut active = self.active.clone();
        active.insert(edge);
        Topology::new(case, active, self.label)
    }

    /// Union of two edge sets over the same case.
    pub fn union(&self, case: &GridCase, other: &Topology) -> Result<Self> {
        self.check_case(case)?;
        other.check_case(case)?;
        Topology::new(case, self.active.union(&other.active).copied(), self.label)
    }

    pub(crate) fn check_case(&self, case: &GridCase) -> Result<()> {
        if &self.case_id != case.id() {
            return Err(Error::CaseMismatch(self.case_id.to_string(), case.id().to_string()));
        }
        Ok(())
    }

    /// True when every bus of the case is reachable from every other through
    /// active branches.
    pub fn spans_all_buses(&self, case: &GridCase) -> bool {
        connected_components(case, &self.active).len() == 1
    }
}

/// Connected components of the graph formed by all case buses and the given
/// branches. Components are sorted internally by bus id and ordered by their
/// smallest bus.
pub fn connected_components(case: &GridCase, edges: &BTreeSet<BranchId>) -> Vec<Vec<BusId>> {
    let n = case.n_buses();
    let mut uf = UnionFind::<usize>::new(n);
    for &id in edges {
        if let Some(br) = case.branch(id) {
            let (f, t) = (
                case.bus_index(br.from_bus).expect("validated"),
                case.bus_index(br.to_bus).expect("validated"),
            );
            uf.union(f, t);
        }
    }
    let labels = uf.into_labeling();
    let mut by_root: std::collections::BTreeMap<usize, Vec<BusId>> = Default::default();
    let mut order = Vec::new();
    for (i, bus) in case.buses().iter().enumerate() {
        let entry = by_root.entry(labels[i]).or_default();
        if entry.is_empty() {
            order.push(labels[i]);
        }
        entry.push(bus.id);
    }
    order.into_iter().map(|r| by_root.remove(&r).unwrap()).collect()
}

/// Sensor placement: the monitored buses and every branch incident to one of
/// them. `observed_edges` is sorted by branch id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SensorSet {
    buses: BTreeSet<BusId>,
    observed_edges: Vec<BranchId>,
}

impl SensorSet {
    pub fn buses(&self) -> &BTreeSet<BusId> {
        &self.buses
    }

    pub fn observed_edges(&self) -> &[BranchId] {
        &self.observed_edges
    }

    pub fn observes(&self, id: BranchId) -> bool {
        self.observed_edges.binary_search(&id).is_ok()
    }

    pub fn is_empty(&self) -> bool {
        self.buses.is_empty()
    }

    /// Observed edges that are active in `topology`, sorted by id.
    pub fn observed_in(&self, topology: &Topology) -> Vec<BranchId> {
        self.observed_edges
            .iter()
            .copied()
            .filter(|&e| topology.contains(e))
            .collect()
    }
}

/// Builds the sensor set for the given buses.
pub fn observed_edges(case: &GridCase, sensors: impl IntoIterator<Item = BusId>) -> Result<SensorSet> {
    let buses: BTreeSet<BusId> = sensors.into_iter().collect();
    for &b in &buses {
        if case.bus_index(b).is_none() {
            return Err(Error::UnknownBus(b));
        }
    }
    let observed_edges = case
        .branches()
        .iter()
        .filter(|br| buses.contains(&br.from_bus) || buses.contains(&br.to_bus))
        .map(|br| br.id)
        .collect();
    Ok(SensorSet { buses, observed_edges })
}

/// Edges active in exactly one of the two topologies.
pub fn symmetric_difference(t1: &Topology, t2: &Topology) -> Result<BTreeSet<BranchId>> {
    if t1.case_id != t2.case_id {
        return Err(Error::CaseMismatch(t1.case_id.to_string(), t2.case_id.to_string()));
    }
    Ok(t1.active.symmetric_difference(&t2.active).copied().collect())
}
