//! Acceptance gate. Runs each criterion in turn, prints one line per
//! criterion and exits non-zero if any of them fails.
//!
//! Built with `harness = false` so the report is always printed.

use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::DVector;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gridcal::detector::{run_stream, DetectorConfig};
use gridcal::eval::{auc, median_metric, run_variant, sensor_order, sensors_for, sweep, EvalConfig};
use gridcal::mapping::{inverse_project, BaselineContext, MappingMode};
use gridcal::netmodel::{BranchId, GridCase, Topology};
use gridcal::scengen::{generate_scenario, ScenarioConfig};
use gridcal::sensitivity::DcModel;
use gridcal::weighting::{compute_weights, solve_lambda};

const CASE118: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/case118.m");
const CASE14: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/case14.m");
const CASE2383: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/case2383wp.m");

type Outcome = Result<(bool, String), String>;
type Criterion = (&'static str, fn() -> Outcome);

fn case(path: &str) -> Arc<GridCase> {
    Arc::new(GridCase::load(path).unwrap_or_else(|e| panic!("{path}: {e}")))
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

/// Flat, noise-free stream on case118 with the given anomaly count.
fn quiet_config(n_anomalies: usize) -> ScenarioConfig {
    ScenarioConfig {
        n_periods: 20,
        n_tau: 60,
        n_anomalies,
        load_variability: 0.0,
        n_shift_events: 0,
        noise_stdev: 0.0,
        seed: 7,
        min_anomaly_coupling: 1e-3,
        ..ScenarioConfig::default()
    }
}

fn dc_exactness() -> Outcome {
    let start = Instant::now();
    let case = case(CASE118);
    let scenario = generate_scenario(Arc::clone(&case), &quiet_config(0)).map_err(|e| e.to_string())?;
    let ctx = Arc::new(
        scenario
            .baseline_context(scenario.sensors.clone())
            .map_err(|e| e.to_string())?,
    );
    let baseline = ctx.baseline_flows();
    let frames = scenario.frames(&scenario.sensors).map_err(|e| e.to_string())?;
    let mut residual: f64 = 0.0;
    for f in &frames {
        let m = ctx
            .period(&scenario.periods[f.period])
            .and_then(|p| p.map(f, &ctx, MappingMode::Full))
            .map_err(|e| e.to_string())?;
        for (x, b) in m.values.iter().zip(&baseline) {
            residual = residual.max((x - b).abs());
        }
    }
    let verdicts =
        run_stream(ctx, DetectorConfig::default(), scenario.periods.clone(), frames).map_err(|e| e.to_string())?;
    let zeta = verdicts.iter().map(|v| v.score).fold(0.0, f64::max);
    let elapsed = start.elapsed();
    let ok = verdicts.len() == 1200 && residual <= 1e-6 && zeta <= 1e-3 && elapsed <= Duration::from_secs(30);
    Ok((
        ok,
        format!(
            "{} ticks, max |p̌ - baseline| = {residual:.2e} (≤ 1e-6), max score = {zeta:.2e} (≤ 1e-3), {} (≤ 30s)",
            verdicts.len(),
            secs(elapsed)
        ),
    ))
}

fn detection_separation() -> Outcome {
    let start = Instant::now();
    let case = case(CASE118);
    let scenario = generate_scenario(Arc::clone(&case), &quiet_config(20)).map_err(|e| e.to_string())?;
    let r = run_variant(
        &scenario,
        MappingMode::Full,
        &scenario.sensors,
        &DetectorConfig::default(),
        Some(20),
    )
    .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let (a, f) = (r.auc.unwrap_or(f64::NAN), r.f_measure.unwrap_or(f64::NAN));
    let ok = r.truth.len() == 20 && a == 1.0 && f == 1.0 && elapsed <= Duration::from_secs(60);
    Ok((
        ok,
        format!(
            "{} detectable / {} undetectable anomalies, AUC = {a}, F(top-20) = {f}, {} (≤ 60s)",
            r.truth.len(),
            r.undetectable.len(),
            secs(elapsed)
        ),
    ))
}

fn ablation_config(variability: f64, shifts: usize, noise: f64) -> EvalConfig {
    EvalConfig {
        case: CASE118.into(),
        scenario: ScenarioConfig {
            load_variability: variability,
            n_shift_events: shifts,
            noise_stdev: noise,
            n_anomalies: 20,
            min_anomaly_coupling: 0.2,
            sensor_fraction: 0.25,
            ..ScenarioConfig::default()
        },
        variants: MappingMode::ALL.to_vec(),
        sensor_fractions: vec![0.25],
        seeds: vec![1, 2, 3, 4, 5],
        detector: DetectorConfig {
            rho: Some(5.0),
            ..DetectorConfig::default()
        },
        ..EvalConfig::default()
    }
}

fn median_f(case: &Arc<GridCase>, config: &EvalConfig) -> Result<[f64; 3], String> {
    let results = sweep(Arc::clone(case), config).map_err(|e| e.to_string())?;
    if let Some(r) = results.iter().find(|r| r.error.is_some()) {
        return Err(format!(
            "seed {} {}: {}",
            r.seed,
            r.variant.name(),
            r.error.as_deref().unwrap_or("")
        ));
    }
    let med = |m| median_metric(&results, m, 0.25, |r| r.f_measure).unwrap_or(f64::NAN);
    Ok([
        med(MappingMode::Naive),
        med(MappingMode::InverseProjection),
        med(MappingMode::Full),
    ])
}

fn ablation_ordering() -> Outcome {
    let case = case(CASE118);
    let [naive_h, ip_h, iplc_h] = median_f(&case, &ablation_config(0.3, 10, 0.01))?;
    let [naive_l, ip_l, iplc_l] = median_f(&case, &ablation_config(0.01, 0, 0.001))?;
    let high_ok = iplc_h > ip_h && ip_h > naive_h && iplc_h - ip_h > 0.0;
    let low_ok = (iplc_l - ip_l).abs() <= 0.1 + 1e-12;
    Ok((
        high_ok && low_ok,
        format!(
            "median F high variability + 10 shifts: iplc {iplc_h:.2} > ip {ip_h:.2} > naive {naive_h:.2}; \
             low variability: |iplc {iplc_l:.2} - ip {ip_l:.2}| ≤ 0.1 (naive {naive_l:.2})"
        ),
    ))
}

fn lodf_reconstruction() -> Outcome {
    let start = Instant::now();
    let case = case(CASE118);
    let base = Topology::baseline(&case).map_err(|e| e.to_string())?;
    let model = DcModel::new(&case, &base).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(118);
    let injections: Vec<Vec<f64>> = (0..10)
        .map(|_| {
            case.base_injections()
                .iter()
                .map(|p| p * rng.random_range(0.5..1.5) + rng.random_range(-0.2..0.2))
                .collect()
        })
        .collect();
    let pre: Vec<_> = injections
        .iter()
        .map(|p| model.solve(p))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let (mut outages, mut bridges, mut worst) = (0, 0, 0.0f64);
    for &k in base.active_edges() {
        if model.is_bridge(k).map_err(|e| e.to_string())? {
            bridges += 1;
            continue;
        }
        outages += 1;
        let d = model.lodf_all(k).map_err(|e| e.to_string())?;
        let after =
            DcModel::new(&case, &base.without(&case, k).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        for (p, before) in injections.iter().zip(&pre) {
            let post = after.solve(p).map_err(|e| e.to_string())?;
            let fk = before.flow(k).expect("active edge");
            for (&l, &dl) in d.rows().iter().zip(d.values()) {
                if l == k {
                    continue;
                }
                let predicted = before.flow(l).expect("active edge") + dl * fk;
                worst = worst.max((predicted - post.flow(l).expect("still active")).abs());
            }
        }
    }
    let elapsed = start.elapsed();
    Ok((
        worst <= 1e-9 && elapsed <= Duration::from_secs(10),
        format!(
            "{outages} outages ({bridges} bridges skipped) × 10 injections, max error = {worst:.2e} pu (≤ 1e-9), {} (≤ 10s)",
            secs(elapsed)
        ),
    ))
}

/// Minimizes `Σ d w + ρ/2 Σ w²` over the simplex by moving mass between the
/// pair with the widest gradient gap until the gap closes.
fn simplex_qp(d: &[f64], rho: f64) -> Vec<f64> {
    let n = d.len();
    let mut w = vec![1.0 / n as f64; n];
    for _ in 0..1_000_000 {
        let g: Vec<f64> = d.iter().zip(&w).map(|(d, w)| d + rho * w).collect();
        let lo = (0..n).min_by(|&a, &b| g[a].total_cmp(&g[b])).unwrap();
        let hi = (0..n)
            .filter(|&j| w[j] > 0.0)
            .max_by(|&a, &b| g[a].total_cmp(&g[b]))
            .unwrap();
        if g[hi] - g[lo] <= 1e-14 {
            break;
        }
        let step = ((g[hi] - g[lo]) / (2.0 * rho)).min(w[hi]);
        w[hi] -= step;
        w[lo] += step;
    }
    w
}

fn weighting_qp() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut worst_w, mut worst_fill) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let n = rng.random_range(2..60);
        let d: Vec<f64> = (0..n)
            .map(|_| {
                if rng.random_bool(0.2) {
                    0.0
                } else {
                    (rng.random_range(0.0..1.0f64) * 8.0).round() / 8.0
                }
            })
            .collect();
        let rho = 10f64.powf(rng.random_range(-3.0..1.0));
        let lambda = solve_lambda(&d, rho).map_err(|e| e.to_string())?;
        let fill: f64 = d.iter().map(|di| ((lambda - di) / rho).max(0.0)).sum();
        worst_fill = worst_fill.max((fill - 1.0).abs());
        let closed = compute_weights(&d, Some(rho), &vec![false; n]).map_err(|e| e.to_string())?;
        let numeric = simplex_qp(&d, rho);
        let gap = closed
            .weights
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst_w = worst_w.max(gap);
    }
    Ok((
        worst_w <= 1e-6 && worst_fill <= 1e-12,
        format!("20 instances, max |w_closed - w_qp| = {worst_w:.2e} (≤ 1e-6), max water-fill residual = {worst_fill:.2e} (≤ 1e-12)"),
    ))
}

fn peak_rss_mib() -> Option<f64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kib: f64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kib / 1024.0)
}

fn scale() -> Outcome {
    let start = Instant::now();
    let case = case(CASE2383);
    let config = ScenarioConfig {
        n_anomalies: 20,
        seed: 1,
        ..ScenarioConfig::default()
    };
    let scenario = generate_scenario(Arc::clone(&case), &config).map_err(|e| e.to_string())?;
    let r = run_variant(
        &scenario,
        MappingMode::Full,
        &scenario.sensors,
        &DetectorConfig::default(),
        None,
    )
    .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let peak = peak_rss_mib();
    let ok = r.scores.len() == 1200 && elapsed <= Duration::from_secs(300) && peak.is_some_and(|m| m <= 4096.0);
    Ok((
        ok,
        format!(
            "{} buses, {} ticks, {} sensors, AUC = {:.4}, {} (≤ 300s), peak RSS = {} (≤ 4096 MiB)",
            case.n_buses(),
            r.scores.len(),
            r.sensor_count,
            r.auc.unwrap_or(f64::NAN),
            secs(elapsed),
            peak.map_or("unknown".into(), |m| format!("{m:.0} MiB"))
        ),
    ))
}

fn run_property<S: Strategy>(
    name: &str,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    let config = Config {
        failure_persistence: None,
        ..Config::with_cases(100)
    };
    let mut runner = TestRunner::new(config);
    runner.run(&strategy, test).map_err(|e| format!("{name}: {e}"))
}

/// `x - target` must lie in the row space of `A`, i.e. be orthogonal to
/// every null-space vector.
fn kkt_property(case: &Arc<GridCase>) -> Result<(), String> {
    let base = Topology::baseline(case).unwrap();
    let model = DcModel::new(case, &base).unwrap();
    let non_bridges: Vec<BranchId> = base
        .active_edges()
        .iter()
        .copied()
        .filter(|&e| !model.is_bridge(e).unwrap())
        .collect();
    let strategy = (
        any::<u64>(),
        0.1f64..0.6,
        0..non_bridges.len(),
        prop::collection::vec(-1.0f64..1.0, 200),
    );
    run_property("projection KKT", strategy, |(seed, fraction, k, noise)| {
        let sensors = sensors_for(case, &sensor_order(case, seed), fraction).unwrap();
        prop_assume!(!sensors.is_empty());
        let ctx = BaselineContext::new(Arc::clone(case), base.clone(), case.base_injections(), sensors).unwrap();
        let period = base.without(case, non_bridges[k]).unwrap().relabel(1);
        let pm = ctx.period(&period).unwrap();
        let a = pm.constraint();
        let p_hat: Vec<f64> = a.rows().iter().zip(&noise).map(|(_, z)| z * 2.0).collect();
        let (x, _) = inverse_project(&p_hat, pm.target(), a).unwrap();
        let ax = a.mul(&x).unwrap();
        for (l, r) in ax.iter().zip(&p_hat) {
            prop_assert!((l - r).abs() <= 1e-9, "A x = {l}, p̂ = {r}");
        }
        let am = a.to_dense();
        let gram = &am * am.transpose();
        let gram_inv = gram.try_inverse().expect("A has full row rank");
        let r = DVector::from_iterator(x.len(), x.iter().zip(pm.target()).map(|(x, t)| x - t));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..5 {
            let z = DVector::from_fn(am.ncols(), |_, _| rng.random_range(-1.0..1.0));
            let v: DVector<f64> = &z - am.transpose() * (&gram_inv * (&am * &z));
            let dot = v.dot(&r);
            prop_assert!(
                dot.abs() <= 1e-8 * v.norm().max(1.0) * r.norm().max(1.0),
                "null-space dot = {dot}"
            );
        }
        Ok(())
    })
}

fn auc_property() -> Result<(), String> {
    let strategy = prop::collection::vec((0u32..40, any::<bool>()), 2..80);
    run_property("AUC transform invariance", strategy, |ticks| {
        let scores: Vec<f64> = ticks.iter().map(|(s, _)| *s as f64).collect();
        let truth: Vec<usize> = ticks
            .iter()
            .enumerate()
            .filter(|(_, (_, t))| *t)
            .map(|(i, _)| i)
            .collect();
        prop_assume!(!truth.is_empty() && truth.len() < scores.len());
        let moved: Vec<f64> = scores.iter().map(|s| 3.0 * s * s * s + s - 7.0).collect();
        prop_assert_eq!(auc(&scores, &truth).unwrap(), auc(&moved, &truth).unwrap());
        Ok(())
    })
}

fn weight_property() -> Result<(), String> {
    let strategy = (prop::collection::vec(0.0f64..5.0, 1..60), 1e-3f64..10.0);
    run_property("weight monotonicity", strategy, |(d, rho)| {
        let w = compute_weights(&d, Some(rho), &vec![false; d.len()]).unwrap();
        for i in 0..d.len() {
            for j in 0..d.len() {
                if d[i] < d[j] {
                    prop_assert!(w.weights[i] >= w.weights[j]);
                }
            }
        }
        Ok(())
    })
}

fn reproducibility_property(case: &Arc<GridCase>) -> Result<(), String> {
    let strategy = (any::<u64>(), 0.0f64..0.3, 0usize..4, 0.0f64..0.05, 0usize..5);
    run_property(
        "scenario reproducibility",
        strategy,
        |(seed, variability, shifts, noise, anomalies)| {
            let config = ScenarioConfig {
                n_periods: 3,
                n_tau: 8,
                n_anomalies: anomalies,
                load_variability: variability,
                n_shift_events: shifts,
                noise_stdev: noise,
                seed,
                ..ScenarioConfig::default()
            };
            let a = generate_scenario(Arc::clone(case), &config).unwrap();
            let b = generate_scenario(Arc::clone(case), &config).unwrap();
            prop_assert_eq!(&a.snapshots, &b.snapshots);
            prop_assert_eq!(&a.periods, &b.periods);
            prop_assert_eq!(&a.truth, &b.truth);
            prop_assert_eq!(&a.shift_ticks, &b.shift_ticks);
            prop_assert_eq!(a.sensors.buses(), b.sensors.buses());
            Ok(())
        },
    )
}

fn properties() -> Outcome {
    let start = Instant::now();
    let c118 = case(CASE118);
    let c14 = case(CASE14);
    let failures: Vec<String> = [
        kkt_property(&c118),
        auc_property(),
        weight_property(),
        reproducibility_property(&c14),
    ]
    .into_iter()
    .filter_map(Result::err)
    .collect();
    if failures.is_empty() {
        Ok((true, format!("4 suites × 100 cases green, {}", secs(start.elapsed()))))
    } else {
        Ok((false, failures.join("; ")))
    }
}

fn main() -> ExitCode {
    let criteria: [Criterion; 7] = [
        ("C1 dc exactness", dc_exactness),
        ("C2 detection separation", detection_separation),
        ("C3 ablation ordering", ablation_ordering),
        ("C4 lodf correctness", lodf_reconstruction),
        ("C5 weighting qp", weighting_qp),
        ("C6 scale", scale),
        ("C7 property suites", properties),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let (ok, detail) = match check() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        if !ok {
            failed += 1;
        }
        println!("[{}] {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    }
    println!("acceptance: {} of 7 criteria passed", 7 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
