use gridcal::netmodel::{BranchId, BusId, GridCase, Topology};
use gridcal::sensitivity::{full_sensor_set, solve_dc};
use gridcal::{Error, ErrorCategory};

fn data(name: &str) -> String {
    format!("{}/../../data/{name}", env!("CARGO_MANIFEST_DIR"))
}

#[test]
fn table_sizes() {
    for (name, buses, branches, slack) in [
        ("case9.m", 9, 9, 1),
        ("case14.m", 14, 20, 1),
        ("case118.m", 118, 186, 69),
        ("case2383wp.m", 2383, 2896, 18),
    ] {
        let case = GridCase::load(data(name)).unwrap();
        assert_eq!(case.n_buses(), buses, "{name}");
        assert_eq!(case.branches().len(), branches, "{name}");
        assert_eq!(case.slack_bus(), BusId(slack), "{name}");
        assert_eq!(case.base_mva(), 100.0);
    }
}

#[test]
fn branch_ids_follow_file_order() {
    let case = GridCase::load(data("case9.m")).unwrap();
    let first = case.branch(BranchId(1)).unwrap();
    assert_eq!((first.from_bus, first.to_bus), (BusId(1), BusId(4)));
    assert!((first.reactance - 0.0576).abs() < 1e-15);
}

#[test]
fn matpower_and_json_round_trips_keep_the_fingerprint() {
    let case = GridCase::load(data("case118.m")).unwrap();
    let again = gridcal::netmodel::parse_case(&case.to_matpower().unwrap()).unwrap();
    assert_eq!(again, case);
    assert_eq!(again.id(), case.id());
    let json = GridCase::from_json(&case.to_json().unwrap()).unwrap();
    assert_eq!(json.id(), case.id());
}

#[test]
fn base_case_is_balanced_by_the_slack() {
    let case = GridCase::load(data("case14.m")).unwrap();
    let topo = Topology::baseline(&case).unwrap();
    let flow = solve_dc(&case, &topo, &case.base_injections()).unwrap();
    // net flow out of every non-slack bus equals its injection
    let p = case.base_injections();
    for (i, bus) in case.buses().iter().enumerate() {
        if bus.id == case.slack_bus() {
            continue;
        }
        let mut out = 0.0;
        for br in case.branches() {
            let f = flow.flow(br.id).unwrap();
            if br.from_bus == bus.id {
                out += f;
            } else if br.to_bus == bus.id {
                out -= f;
            }
        }
        assert!((out - p[i]).abs() < 1e-10, "bus {}", bus.id);
    }
    assert_eq!(full_sensor_set(&case).observed_edges().len(), 20);
}

#[test]
fn missing_file_reports_its_path() {
    let err = GridCase::load("/nonexistent/grid.m").unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
    assert!(err.to_string().contains("/nonexistent/grid.m"));
    assert_eq!(err.category(), ErrorCategory::Data);
}
