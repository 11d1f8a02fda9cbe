//! JSON case schema. Powers are in MW; reactances per-unit.
//!
//! ```json
//! {
//!   "base_mva": 100.0,
//!   "slack_bus": 1,
//!   "buses": [{ "id": 1, "p_load_mw": 0.0, "p_gen_mw": 20.0 }],
//!   "branches": [{ "id": 1, "from_bus": 1, "to_bus": 2, "reactance": 0.1, "in_service": true }]
//! }
//! ```

use serde::{Deserialize, Serialize};

use super::{pu_to_mw, Branch, BranchId, Bus, BusId, GridCase};
use crate::error::Result;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CaseFile {
    base_mva: f64,
    slack_bus: BusId,
    buses: Vec<BusRecord>,
    branches: Vec<BranchRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BusRecord {
    id: BusId,
    #[serde(default)]
    p_load_mw: f64,
    #[serde(default)]
    p_gen_mw: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BranchRecord {
    id: BranchId,
    from_bus: BusId,
    to_bus: BusId,
    reactance: f64,
    #[serde(default = "in_service_default")]
    in_service: bool,
}

fn in_service_default() -> bool {
    true
}

pub(super) fn from_json(text: &str) -> Result<GridCase> {
    let file: CaseFile = serde_json::from_str(text)?;
    let base = file.base_mva;
    let buses = file
        .buses
        .into_iter()
        .map(|b| Bus {
            id: b.id,
            p_load: b.p_load_mw / base,
            p_gen: b.p_gen_mw / base,
        })
        .collect();
    let branches = file
        .branches
        .into_iter()
        .map(|b| Branch {
            id: b.id,
            from_bus: b.from_bus,
            to_bus: b.to_bus,
            reactance: b.reactance,
            in_service: b.in_service,
        })
        .collect();
    GridCase::new(base, buses, branches, file.slack_bus)
}

pub(super) fn to_json(case: &GridCase) -> Result<String> {
    let base = case.base_mva();
    let file = CaseFile {
        base_mva: base,
        slack_bus: case.slack_bus(),
        buses: case
            .buses()
            .iter()
            .map(|b| BusRecord {
                id: b.id,
                p_load_mw: pu_to_mw(b.p_load, base),
                p_gen_mw: pu_to_mw(b.p_gen, base),
            })
            .collect(),
        branches: case
            .branches()
            .iter()
            .map(|b| BranchRecord {
                id: b.id,
                from_bus: b.from_bus,
                to_bus: b.to_bus,
                reactance: b.reactance,
                in_service: b.in_service,
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::triangle;
    use super::*;
    use crate::error::Error;

    #[test]
    fn unknown_keys_are_rejected() {
        let text = r#"{"base_mva":100,"slack_bus":1,"buses":[{"id":1}],"branches":[],"extra":1}"#;
        assert!(matches!(GridCase::from_json(text), Err(Error::Json(_))));
    }

    #[test]
    fn round_trip() {
        let case = triangle();
        let back = GridCase::from_json(&case.to_json().unwrap()).unwrap();
        assert_eq!(case, back);
    }
}
