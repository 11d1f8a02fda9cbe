//! Ranking metrics and the sensor-count sweep over detector variants.
//!
//! For each seed one scenario is generated, and a random bus order is drawn.
//! Sensor sets are prefixes of that order, so larger sets contain smaller
//! ones, and the scenario hides its anomalies from the prefix given by the
//! scenario's `sensor_fraction`. Anomalies that change no observed flow under
//! a given sensor set cannot be detected by any method; they are reported
//! separately and left out of both the positives and the negatives.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{DetectionState, DetectorConfig};
use crate::error::{Error, Result};
use crate::mapping::MappingMode;
use crate::netmodel::{observed_edges, BusId, GridCase, SensorSet};
use crate::scengen::{fraction_count, generate_scenario, Scenario, ScenarioConfig};
use crate::sensitivity::DcModel;

/// Observed flows must move by more than this for an anomaly to count.
pub const DETECTABLE_CHANGE: f64 = 1e-9;

/// Probability that a random truth tick outscores a random normal tick,
/// ties counting one half. `truth` holds indices into `scores`.
pub fn auc(scores: &[f64], truth: &[usize]) -> Result<f64> {
    let positives = positive_mask(scores, truth)?;
    let n_pos = positives.iter().filter(|&&p| p).count();
    let n_neg = scores.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidArgument(
            "AUC needs at least one positive and one negative tick".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of mid-ranks of the positives
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| positives[k]).count() as f64;
        i = j + 1;
    }
    let p = n_pos as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n_neg as f64))
}

fn positive_mask(scores: &[f64], truth: &[usize]) -> Result<Vec<bool>> {
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("scores contain NaN".into()));
    }
    let mut mask = vec![false; scores.len()];
    for &t in truth {
        *mask
            .get_mut(t)
            .ok_or_else(|| Error::InvalidArgument(format!("truth index {t} out of range")))? = true;
    }
    Ok(mask)
}

/// Indices ordered by descending score, earlier index first on ties.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// F-measure of the `k` best-scored ticks against `truth`.
pub fn f_measure_topk(scores: &[f64], truth: &[usize], k: usize) -> Result<f64> {
    let positives = positive_mask(scores, truth)?;
    let n_truth = positives.iter().filter(|&&p| p).count();
    if n_truth == 0 {
        return Err(Error::InvalidArgument("F-measure needs a non-empty truth set".into()));
    }
    if k == 0 || k > scores.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} must lie in 1..={}",
            scores.len()
        )));
    }
    let hits = ranking(scores)[..k].iter().filter(|&&i| positives[i]).count() as f64;
    let precision = hits / k as f64;
    let recall = hits / n_truth as f64;
    Ok(if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    })
}

/// ROC points `(false positive rate, true positive rate)` from `(0, 0)` to
/// `(1, 1)`, one per distinct score.
pub fn roc_curve(scores: &[f64], truth: &[usize]) -> Result<Vec<(f64, f64)>> {
    let positives = positive_mask(scores, truth)?;
    let n_pos = positives.iter().filter(|&&p| p).count() as f64;
    let n_neg = scores.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return Err(Error::InvalidArgument(
            "ROC needs at least one positive and one negative tick".into(),
        ));
    }
    let order = ranking(scores);
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0.0, 0.0);
    for (k, &i) in order.iter().enumerate() {
        if positives[i] {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        if k + 1 == order.len() || scores[order[k + 1]] != scores[i] {
            points.push((fp / n_neg, tp / n_pos));
        }
    }
    Ok(points)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Case file, relative to the config file when not absolute.
    pub case: PathBuf,
    pub scenario: ScenarioConfig,
    pub variants: Vec<MappingMode>,
    pub sensor_fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    pub detector: DetectorConfig,
    /// Top-k cutoff for the F-measure; defaults to the number of
    /// detectable anomalies in each run.
    pub top_k: Option<usize>,
    /// Score thresholds for `threshold_sweep.csv`.
    pub thresholds: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            case: PathBuf::new(),
            scenario: ScenarioConfig::default(),
            variants: MappingMode::ALL.to_vec(),
            sensor_fractions: vec![0.05, 0.1, 0.25, 0.5, 1.0],
            seeds: vec![1, 2, 3, 4, 5],
            detector: DetectorConfig::default(),
            top_k: None,
            thresholds: vec![1.0, 2.0, 3.0, 5.0, 10.0, 20.0, 50.0, 100.0],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.detector.validate()?;
        if self.scenario.sensors.is_some() {
            return Err(Error::InvalidArgument(
                "scenario.sensors cannot be set for a sweep; placement is drawn per seed".into(),
            ));
        }
        if self.variants.is_empty() || self.sensor_fractions.is_empty() || self.seeds.is_empty() {
            return Err(Error::InvalidArgument(
                "variants, sensor_fractions and seeds must be non-empty".into(),
            ));
        }
        if let Some(f) = self.sensor_fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(Error::InvalidArgument(format!(
                "sensor fraction {f} must lie in (0, 1]"
            )));
        }
        if self.top_k == Some(0) {
            return Err(Error::InvalidArgument("top_k must be positive".into()));
        }
        Ok(())
    }
}

/// Outcome of one (seed, sensor set, variant) cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunResult {
    pub seed: u64,
    pub variant: MappingMode,
    pub sensor_fraction: f64,
    pub sensor_count: usize,
    /// Per-tick score; infinite where mapping failed.
    pub scores: Vec<f64>,
    /// Detectable anomaly ticks.
    pub truth: Vec<usize>,
    /// Anomaly ticks that moved no observed flow.
    pub undetectable: Vec<usize>,
    /// Ticks the detector flagged at its configured threshold.
    pub flagged: Vec<usize>,
    pub auc: Option<f64>,
    pub f_measure: Option<f64>,
    pub error: Option<String>,
}

impl RunResult {
    fn failed(seed: u64, variant: MappingMode, fraction: f64, count: usize, error: &Error) -> Self {
        RunResult {
            seed,
            variant,
            sensor_fraction: fraction,
            sensor_count: count,
            scores: Vec::new(),
            truth: Vec::new(),
            undetectable: Vec::new(),
            flagged: Vec::new(),
            auc: None,
            f_measure: None,
            error: Some(error.to_string()),
        }
    }

    /// Scores and truth indices with undetectable anomaly ticks removed.
    pub fn evaluated(&self) -> (Vec<f64>, Vec<usize>) {
        let skip: BTreeSet<usize> = self.undetectable.iter().copied().collect();
        let truth: BTreeSet<usize> = self.truth.iter().copied().collect();
        let mut scores = Vec::with_capacity(self.scores.len());
        let mut idx = Vec::new();
        for (t, &s) in self.scores.iter().enumerate() {
            if skip.contains(&t) {
                continue;
            }
            if truth.contains(&t) {
                idx.push(scores.len());
            }
            scores.push(s);
        }
        (scores, idx)
    }
}

/// Splits the scenario's anomaly ticks into those that change at least one
/// flow observed by `sensors` and those that do not.
pub fn detectable_anomalies(scenario: &Scenario, sensors: &SensorSet) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut models: BTreeMap<usize, DcModel> = BTreeMap::new();
    let (mut seen, mut hidden) = (Vec::new(), Vec::new());
    for ev in &scenario.truth {
        let snap = &scenario.snapshots[ev.tick];
        let topo = &scenario.periods[snap.period];
        if let std::collections::btree_map::Entry::Vacant(slot) = models.entry(snap.period) {
            slot.insert(DcModel::new(&scenario.case, topo)?);
        }
        let rows = sensors.observed_in(topo);
        let normal = models[&snap.period].solve(&snap.injections)?.flows_on(&rows);
        let change = rows
            .iter()
            .zip(&normal)
            .map(|(e, f)| (snap.flows[scenario.case.branch_index(*e).expect("case branch")] - f).abs())
            .fold(0.0, f64::max);
        if change > DETECTABLE_CHANGE {
            seen.push(ev.tick);
        } else {
            hidden.push(ev.tick);
        }
    }
    Ok((seen, hidden))
}

/// Streams every tick of `scenario` through one detector variant.
pub fn run_variant(
    scenario: &Scenario,
    variant: MappingMode,
    sensors: &SensorSet,
    detector: &DetectorConfig,
    top_k: Option<usize>,
) -> Result<RunResult> {
    let baseline = Arc::new(scenario.baseline_context(sensors.clone())?);
    let config = DetectorConfig {
        mode: variant,
        ..detector.clone()
    };
    let mut state = DetectionState::new(baseline, config)?;
    for t in &scenario.periods {
        state.register_period(t.clone())?;
    }
    let mut scores = Vec::with_capacity(scenario.n_ticks());
    let mut flagged = Vec::new();
    for frame in scenario.frames(sensors)? {
        let v = state.step(frame)?;
        if v.anomalous {
            flagged.push(v.tick);
        }
        scores.push(v.score);
    }
    let (truth, undetectable) = detectable_anomalies(scenario, sensors)?;
    let mut result = RunResult {
        seed: scenario.config.seed,
        variant,
        sensor_fraction: f64::NAN,
        sensor_count: sensors.buses().len(),
        scores,
        truth,
        undetectable,
        flagged,
        auc: None,
        f_measure: None,
        error: None,
    };
    let (s, t) = result.evaluated();
    if !t.is_empty() && t.len() < s.len() {
        result.auc = Some(auc(&s, &t)?);
        result.f_measure = Some(f_measure_topk(&s, &t, top_k.unwrap_or(t.len()).min(s.len()))?);
    }
    Ok(result)
}

/// Random bus order for a seed; sensor sets are its prefixes.
pub fn sensor_order(case: &GridCase, seed: u64) -> Vec<BusId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let mut buses: Vec<BusId> = case.buses().iter().map(|b| b.id).collect();
    buses.shuffle(&mut rng);
    buses
}

pub fn sensors_for(case: &GridCase, order: &[BusId], fraction: f64) -> Result<SensorSet> {
    observed_edges(case, order[..fraction_count(fraction, order.len())].iter().copied())
}

/// Scenario for one seed of a sweep, with anomalies hidden from the
/// scenario's sensor fraction.
pub fn sweep_scenario(case: &Arc<GridCase>, config: &EvalConfig, seed: u64) -> Result<Scenario> {
    let order = sensor_order(case, seed);
    let n = fraction_count(config.scenario.sensor_fraction, order.len());
    let scenario_config = ScenarioConfig {
        seed,
        sensors: Some(order[..n].to_vec()),
        ..config.scenario.clone()
    };
    generate_scenario(Arc::clone(case), &scenario_config)
}

/// Every (seed, sensor fraction, variant) cell. Failed cells carry their
/// error instead of aborting the sweep.
pub fn sweep(case: Arc<GridCase>, config: &EvalConfig) -> Result<Vec<RunResult>> {
    config.validate()?;
    let scenarios: Vec<(u64, Result<Scenario>)> = config
        .seeds
        .par_iter()
        .map(|&seed| (seed, sweep_scenario(&case, config, seed)))
        .collect();

    let mut cells = Vec::new();
    for (seed, scenario) in &scenarios {
        let order = sensor_order(&case, *seed);
        for &fraction in &config.sensor_fractions {
            for &variant in &config.variants {
                cells.push((*seed, scenario, order.clone(), fraction, variant));
            }
        }
    }
    let results = cells
        .into_par_iter()
        .map(|(seed, scenario, order, fraction, variant)| {
            let count = fraction_count(fraction, order.len());
            let run = scenario.as_ref().map_err(clone_error).and_then(|s| {
                let sensors = sensors_for(&case, &order, fraction)?;
                run_variant(s, variant, &sensors, &config.detector, config.top_k)
            });
            match run {
                Ok(mut r) => {
                    r.sensor_fraction = fraction;
                    r
                }
                Err(e) => {
                    log::warn!(
                        "cell seed={seed} fraction={fraction} variant={} failed: {e}",
                        variant.name()
                    );
                    RunResult::failed(seed, variant, fraction, count, &e)
                }
            }
        })
        .collect();
    Ok(results)
}

fn clone_error(e: &Error) -> Error {
    Error::Model(format!("scenario generation failed: {e}"))
}

/// Median of the non-missing values of `metric` over seeds.
pub fn median_metric(
    results: &[RunResult],
    variant: MappingMode,
    fraction: f64,
    metric: impl Fn(&RunResult) -> Option<f64>,
) -> Option<f64> {
    let mut v: Vec<f64> = results
        .iter()
        .filter(|r| r.variant == variant && r.sensor_fraction == fraction)
        .filter_map(metric)
        .collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes `results.csv`, `roc_points.csv`, `threshold_sweep.csv` and
/// `figure_data/{auc,f_measure}.csv` under `out`.
pub fn write_outputs(out: &Path, config: &EvalConfig, results: &[RunResult]) -> Result<()> {
    let fig = out.join("figure_data");
    fs::create_dir_all(&fig).map_err(|e| Error::io(&fig, e))?;

    let mut w = csv::Writer::from_path(out.join("results.csv"))?;
    w.write_record([
        "seed",
        "variant",
        "sensor_fraction",
        "sensor_count",
        "auc",
        "f_measure",
        "n_truth",
        "n_undetectable",
        "n_flagged",
        "error",
    ])?;
    for r in results {
        w.write_record([
            r.seed.to_string(),
            r.variant.name().to_string(),
            r.sensor_fraction.to_string(),
            r.sensor_count.to_string(),
            opt(r.auc),
            opt(r.f_measure),
            r.truth.len().to_string(),
            r.undetectable.len().to_string(),
            r.flagged.len().to_string(),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(out.join("results.csv"), e))?;

    let mut w = csv::Writer::from_path(out.join("roc_points.csv"))?;
    w.write_record(["seed", "variant", "sensor_fraction", "fpr", "tpr"])?;
    for r in results.iter().filter(|r| r.auc.is_some()) {
        let (s, t) = r.evaluated();
        for (fpr, tpr) in roc_curve(&s, &t)? {
            w.write_record([
                r.seed.to_string(),
                r.variant.name().to_string(),
                r.sensor_fraction.to_string(),
                fpr.to_string(),
                tpr.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(out.join("roc_points.csv"), e))?;

    // pooled over seeds: a tick is flagged when its score exceeds the threshold
    let mut w = csv::Writer::from_path(out.join("threshold_sweep.csv"))?;
    w.write_record([
        "variant",
        "sensor_fraction",
        "threshold",
        "precision",
        "recall",
        "f_measure",
    ])?;
    for &variant in &config.variants {
        for &fraction in &config.sensor_fractions {
            let cell: Vec<&RunResult> = results
                .iter()
                .filter(|r| r.variant == variant && r.sensor_fraction == fraction && r.error.is_none())
                .collect();
            for &thr in &config.thresholds {
                let (mut tp, mut flagged, mut positives) = (0usize, 0usize, 0usize);
                for r in &cell {
                    let (s, t) = r.evaluated();
                    let truth: BTreeSet<usize> = t.into_iter().collect();
                    positives += truth.len();
                    for (i, &x) in s.iter().enumerate() {
                        if x > thr {
                            flagged += 1;
                            tp += truth.contains(&i) as usize;
                        }
                    }
                }
                let p = if flagged > 0 {
                    Some(tp as f64 / flagged as f64)
                } else {
                    None
                };
                let rc = if positives > 0 {
                    Some(tp as f64 / positives as f64)
                } else {
                    None
                };
                let f = match (p, rc) {
                    (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
                    (Some(_), Some(_)) => Some(0.0),
                    _ => None,
                };
                w.write_record([
                    variant.name().to_string(),
                    fraction.to_string(),
                    thr.to_string(),
                    opt(p),
                    opt(rc),
                    opt(f),
                ])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(out.join("threshold_sweep.csv"), e))?;

    for (name, metric) in [
        ("auc", (|r: &RunResult| r.auc) as fn(&RunResult) -> Option<f64>),
        ("f_measure", |r: &RunResult| r.f_measure),
    ] {
        let path = fig.join(format!("{name}.csv"));
        let mut w = csv::Writer::from_path(&path)?;
        let mut header = vec!["sensor_fraction".to_string(), "sensor_count".to_string()];
        header.extend(config.variants.iter().map(|v| v.name().to_string()));
        w.write_record(&header)?;
        for &fraction in &config.sensor_fractions {
            let count = results
                .iter()
                .find(|r| r.sensor_fraction == fraction)
                .map(|r| r.sensor_count)
                .unwrap_or(0);
            let mut row = vec![fraction.to_string(), count.to_string()];
            row.extend(
                config
                    .variants
                    .iter()
                    .map(|&v| opt(median_metric(results, v, fraction, metric))),
            );
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
