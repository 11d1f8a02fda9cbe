//! Static network description and the dynamic-graph vocabulary built on it.
//!
//! A [`GridCase`] holds buses and branches exactly as read from a case file.
//! Power quantities are stored per-unit on the case MVA base; the file
//! readers and writers convert from and to MW. Buses and branches are kept
//! sorted by id, and every flow vector in the crate is indexed by sorted
//! branch id within whatever edge set it refers to.
//!
//! Only the DC subset of a case is retained. Branch resistance, charging,
//! tap ratio and phase shift are parsed for validity and then dropped.

mod json;
mod matpower;
mod topology;

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use matpower::parse_case;
pub use topology::{connected_components, observed_edges, symmetric_difference, SensorSet, Topology};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BusId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BranchId(pub u32);

impl fmt::Display for BusId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl fmt::Display for BranchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Content fingerprint of a [`GridCase`], used to tie topologies to the case
/// they were built against.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CaseId(String);

impl CaseId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for CaseId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: BusId,
    /// Active load, per-unit.
    pub p_load: f64,
    /// Aggregated in-service generation, per-unit.
    pub p_gen: f64,
}

impl Bus {
    pub fn net_injection(&self) -> f64 {
        self.p_gen - self.p_load
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub id: BranchId,
    pub from_bus: BusId,
    pub to_bus: BusId,
    /// Series reactance, per-unit.
    pub reactance: f64,
    pub in_service: bool,
}

/// A parsed network case. Immutable once built.
#[derive(Debug, Clone)]
pub struct GridCase {
    base_mva: f64,
    buses: Vec<Bus>,
    branches: Vec<Branch>,
    slack_bus: BusId,
    bus_pos: HashMap<BusId, usize>,
    branch_pos: HashMap<BranchId, usize>,
    id: CaseId,
}

impl PartialEq for GridCase {
    fn eq(&self, other: &Self) -> bool {
        self.base_mva == other.base_mva
            && self.slack_bus == other.slack_bus
            && self.buses == other.buses
            && self.branches == other.branches
    }
}

impl GridCase {
    /// Validates and assembles a case. Buses and branches are re-sorted by id.
    pub fn new(base_mva: f64, mut buses: Vec<Bus>, mut branches: Vec<Branch>, slack_bus: BusId) -> Result<Self> {
        if !(base_mva.is_finite() && base_mva > 0.0) {
            return Err(Error::Model(format!("base MVA must be positive, got {base_mva}")));
        }
        buses.sort_by_key(|b| b.id);
        branches.sort_by_key(|b| b.id);

        let mut bus_pos = HashMap::with_capacity(buses.len());
        for (i, bus) in buses.iter().enumerate() {
            if bus_pos.insert(bus.id, i).is_some() {
                return Err(Error::Model(format!("duplicate bus id {}", bus.id)));
            }
            if !bus.net_injection().is_finite() {
                return Err(Error::Model(format!("bus {} has a non-finite injection", bus.id)));
            }
        }
        if !bus_pos.contains_key(&slack_bus) {
            return Err(Error::Model(format!("slack bus {slack_bus} is not in the bus table")));
        }

        let mut branch_pos = HashMap::with_capacity(branches.len());
        for (i, br) in branches.iter().enumerate() {
            if branch_pos.insert(br.id, i).is_some() {
                return Err(Error::Model(format!("duplicate branch id {}", br.id)));
            }
            for end in [br.from_bus, br.to_bus] {
                if !bus_pos.contains_key(&end) {
                    return Err(Error::Model(format!(
                        "branch {} references bus {end}, which is not in the bus table",
                        br.id
                    )));
                }
            }
            if br.from_bus == br.to_bus {
                return Err(Error::Model(format!(
                    "branch {} is a self loop on bus {}",
                    br.id, br.from_bus
                )));
            }
            if !(br.reactance.is_finite() && br.reactance > 0.0) {
                return Err(Error::Model(format!(
                    "branch {} has non-positive reactance {}",
                    br.id, br.reactance
                )));
            }
        }

        let id = fingerprint(base_mva, &buses, &branches, slack_bus);
        Ok(GridCase {
            base_mva,
            buses,
            branches,
            slack_bus,
            bus_pos,
            branch_pos,
            id,
        })
    }

    pub fn base_mva(&self) -> f64 {
        self.base_mva
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn slack_bus(&self) -> BusId {
        self.slack_bus
    }

    pub fn id(&self) -> &CaseId {
        &self.id
    }

    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    /// Position of a bus in [`GridCase::buses`], which is also its index in
    /// every per-bus vector.
    pub fn bus_index(&self, id: BusId) -> Option<usize> {
        self.bus_pos.get(&id).copied()
    }

    pub fn branch_index(&self, id: BranchId) -> Option<usize> {
        self.branch_pos.get(&id).copied()
    }

    pub fn branch(&self, id: BranchId) -> Option<&Branch> {
        self.branch_index(id).map(|i| &self.branches[i])
    }

    /// Net injections `p_gen - p_load` per bus, per-unit, unbalanced.
    pub fn base_injections(&self) -> Vec<f64> {
        self.buses.iter().map(Bus::net_injection).collect()
    }

    /// The default baseline edge set: every in-service branch.
    pub fn in_service_edges(&self) -> BTreeSet<BranchId> {
        self.branches.iter().filter(|b| b.in_service).map(|b| b.id).collect()
    }

    /// Reads a case from disk, choosing the JSON reader for `.json` files and
    /// the MATPOWER reader otherwise.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
            Self::from_json(&text)
        } else {
            parse_case(&text)
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        json::from_json(text)
    }

    pub fn to_json(&self) -> Result<String> {
        json::to_json(self)
    }

    /// Renders the case as a MATPOWER `.m` file. Requires branch ids to be
    /// `1..=n` since MATPOWER identifies branches by row.
    pub fn to_matpower(&self) -> Result<String> {
        matpower::write_case(self)
    }
}

/// MW value that converts back to exactly `pu` when divided by `base`.
/// Such a value exists whenever `pu` was itself read as `mw / base`; other
/// inputs fall back to the rounded product.
pub(crate) fn pu_to_mw(pu: f64, base: f64) -> f64 {
    let guess = pu * base;
    if guess / base == pu {
        return guess;
    }
    let (mut up, mut down) = (guess, guess);
    for _ in 0..4 {
        up = up.next_up();
        if up / base == pu {
            return up;
        }
        down = down.next_down();
        if down / base == pu {
            return down;
        }
    }
    guess
}

fn fingerprint(base_mva: f64, buses: &[Bus], branches: &[Branch], slack: BusId) -> CaseId {
    let mut h = Sha256::new();
    h.update(base_mva.to_le_bytes());
    h.update(slack.0.to_le_bytes());
    for b in buses {
        h.update(b.id.0.to_le_bytes());
        h.update(b.p_load.to_le_bytes());
        h.update(b.p_gen.to_le_bytes());
    }
    for br in branches {
        h.update(br.id.0.to_le_bytes());
        h.update(br.from_bus.0.to_le_bytes());
        h.update(br.to_bus.0.to_le_bytes());
        h.update(br.reactance.to_le_bytes());
        h.update([br.in_service as u8]);
    }
    let digest = h.finalize();
    CaseId(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
}
