//! Seeded synthetic scenarios: periodic load with noise and step shifts,
//! one anticipated branch outage per period, and unannounced outages of
//! unobserved branches at a few random ticks.
//!
//! All randomness comes from ChaCha8 streams derived from the seed: stream 0
//! for topology and anomaly draws, stream 1 for shift events and one stream
//! per tick for load noise, so ticks can be generated in parallel.
//!
//! A scenario directory holds
//!
//! | file | content |
//! |------|---------|
//! | `config.json` | the [`ScenarioConfig`] |
//! | `case.json` | the network, so the directory is self-contained |
//! | `topologies.json` | baseline and per-period edge sets, sensor buses, shift ticks |
//! | `frames.csv` | one full-grid snapshot per tick, see [`crate::frames`] |
//! | `truth.csv` | `tick,branch_id` for each unannounced outage |
//!
//! When loading, `config.json` and `truth.csv` may be absent.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frames::{self, GridSnapshot};
use crate::mapping::{BaselineContext, MeasurementFrame};
use crate::netmodel::{observed_edges, BranchId, BusId, CaseId, GridCase, SensorSet, Topology};
use crate::sensitivity::DcModel;

const STREAM_STRUCTURE: u64 = 0;
const STREAM_SHIFTS: u64 = 1;
const STREAM_TICKS: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub n_periods: usize,
    /// Ticks per period.
    pub n_tau: usize,
    pub n_anomalies: usize,
    /// Amplitude of the sinusoidal load pattern, relative to base injections.
    pub load_variability: f64,
    /// Number of random shift events; ignored when `shift_ticks` is given.
    pub n_shift_events: usize,
    pub shift_ticks: Option<Vec<usize>>,
    /// Relative step applied to each shifted bus.
    pub shift_magnitude: f64,
    /// Fraction of buses affected by each shift event.
    pub shift_bus_fraction: f64,
    /// Gaussian noise per bus and tick, relative to the base injection.
    pub noise_stdev: f64,
    pub seed: u64,
    /// Random sensor placement when `sensors` is not given.
    pub sensor_fraction: f64,
    pub sensors: Option<Vec<BusId>>,
    /// Minimum |LODF| of an anomalous branch onto some observed flow.
    pub min_anomaly_coupling: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            n_periods: 20,
            n_tau: 60,
            n_anomalies: 20,
            load_variability: 0.1,
            n_shift_events: 0,
            shift_ticks: None,
            shift_magnitude: 0.2,
            shift_bus_fraction: 0.1,
            noise_stdev: 0.01,
            seed: 0,
            sensor_fraction: 0.25,
            sensors: None,
            min_anomaly_coupling: 0.0,
        }
    }
}

impl ScenarioConfig {
    pub fn n_ticks(&self) -> usize {
        self.n_periods * self.n_tau
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_periods == 0 || self.n_tau == 0 {
            return bad("n_periods and n_tau must be positive".into());
        }
        // tick 0 has no history, so it never carries an anomaly
        if self.n_anomalies >= self.n_ticks() {
            return bad(format!(
                "n_anomalies = {} leaves no room in {} ticks",
                self.n_anomalies,
                self.n_ticks()
            ));
        }
        for (name, v) in [
            ("load_variability", self.load_variability),
            ("shift_magnitude", self.shift_magnitude),
            ("noise_stdev", self.noise_stdev),
            ("min_anomaly_coupling", self.min_anomaly_coupling),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be a non-negative number, got {v}"));
            }
        }
        for (name, v) in [
            ("shift_bus_fraction", self.shift_bus_fraction),
            ("sensor_fraction", self.sensor_fraction),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return bad(format!("{name} must lie in (0, 1], got {v}"));
            }
        }
        if let Some(ticks) = &self.shift_ticks {
            if let Some(t) = ticks.iter().find(|&&t| t >= self.n_ticks()) {
                return bad(format!("shift tick {t} is past the last tick"));
            }
        } else if self.n_shift_events >= self.n_ticks() {
            return bad("too many shift events".into());
        }
        Ok(())
    }
}

/// One unannounced outage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AnomalyEvent {
    pub tick: usize,
    pub branch_id: BranchId,
}

/// Per-tick, per-bus injections (per-unit) and the ticks where shifts start.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadProfile {
    pub injections: Vec<Vec<f64>>,
    pub shift_ticks: Vec<usize>,
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Number of items for a fraction of `n`, at least one.
pub fn fraction_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64).round() as usize).clamp(1, n.max(1))
}

/// `base · (1 + v·sin(2πτ/T)) · shifts(τ) + noise`, slack included. The
/// slack entry is nominal; solves let it absorb the mismatch.
pub fn generate_load_profile(case: &GridCase, config: &ScenarioConfig) -> Result<LoadProfile> {
    config.validate()?;
    let n_ticks = config.n_ticks();
    let n_bus = case.n_buses();
    let base = case.base_injections();

    let mut shift_rng = rng(config.seed, STREAM_SHIFTS);
    let mut shift_ticks = match &config.shift_ticks {
        Some(t) => t.clone(),
        None => index::sample(&mut shift_rng, n_ticks - 1, config.n_shift_events)
            .into_iter()
            .map(|t| t + 1)
            .collect(),
    };
    shift_ticks.sort_unstable();
    let per_event = fraction_count(config.shift_bus_fraction, n_bus);
    let shifted_buses: Vec<Vec<usize>> = shift_ticks
        .iter()
        .map(|_| {
            let mut b = index::sample(&mut shift_rng, n_bus, per_event).into_vec();
            b.sort_unstable();
            b
        })
        .collect();

    // factor[i] at tick τ is the product of all steps at or before τ
    let mut factors = vec![vec![1.0; n_bus]; n_ticks];
    let mut current = vec![1.0; n_bus];
    let mut next_event = 0;
    for (tick, row) in factors.iter_mut().enumerate() {
        while next_event < shift_ticks.len() && shift_ticks[next_event] == tick {
            for &b in &shifted_buses[next_event] {
                current[b] *= 1.0 + config.shift_magnitude;
            }
            next_event += 1;
        }
        row.copy_from_slice(&current);
    }

    let injections = (0..n_ticks)
        .into_par_iter()
        .map(|tick| {
            let pattern = 1.0 + config.load_variability * (2.0 * PI * tick as f64 / n_ticks as f64).sin();
            let mut noise_rng = rng(config.seed, STREAM_TICKS + tick as u64);
            base.iter()
                .zip(&factors[tick])
                .map(|(&p, &f)| {
                    let z: f64 = noise_rng.sample(StandardNormal);
                    p * pattern * f + config.noise_stdev * p.abs() * z
                })
                .collect()
        })
        .collect();
    Ok(LoadProfile {
        injections,
        shift_ticks,
    })
}

/// A generated stream together with everything needed to replay it.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub case: Arc<GridCase>,
    pub baseline: Topology,
    /// Anticipated topology of each period, labelled by period index.
    pub periods: Vec<Topology>,
    /// Sensors the anomalies are hidden from.
    pub sensors: SensorSet,
    pub snapshots: Vec<GridSnapshot>,
    /// Sorted by tick.
    pub truth: Vec<AnomalyEvent>,
    pub shift_ticks: Vec<usize>,
}

/// Picks a non-bridge branch of `model`'s topology from `candidates` in
/// random order.
fn pick_non_bridge(
    model: &DcModel,
    candidates: &mut [BranchId],
    rng: &mut ChaCha8Rng,
    mut accept: impl FnMut(BranchId) -> Result<bool>,
) -> Result<Option<BranchId>> {
    candidates.shuffle(rng);
    for &e in candidates.iter() {
        if !model.is_bridge(e)? && accept(e)? {
            return Ok(Some(e));
        }
    }
    Ok(None)
}

pub fn generate_scenario(case: Arc<GridCase>, config: &ScenarioConfig) -> Result<Scenario> {
    config.validate()?;
    let n_ticks = config.n_ticks();
    let mut rng = rng(config.seed, STREAM_STRUCTURE);

    let baseline = Topology::baseline(&case)?;
    let base_model = DcModel::new(&case, &baseline)?;
    let sensors = match &config.sensors {
        Some(b) => observed_edges(&case, b.iter().copied())?,
        None => {
            let n = fraction_count(config.sensor_fraction, case.n_buses());
            let picked = index::sample(&mut rng, case.n_buses(), n);
            observed_edges(&case, picked.into_iter().map(|i| case.buses()[i].id))?
        }
    };

    let edges: Vec<BranchId> = baseline.active_edges().iter().copied().collect();
    let mut periods = Vec::with_capacity(config.n_periods);
    for t in 0..config.n_periods {
        let mut candidates = edges.clone();
        let off = pick_non_bridge(&base_model, &mut candidates, &mut rng, |_| Ok(true))?
            .ok_or_else(|| Error::Model("every baseline branch is a bridge; no period outage possible".into()))?;
        periods.push(baseline.without(&case, off)?.relabel(t));
    }
    let period_models: Vec<DcModel> = periods
        .par_iter()
        .map(|t| DcModel::new(&case, t))
        .collect::<Result<_>>()?;

    let mut anomaly_ticks = index::sample(&mut rng, n_ticks - 1, config.n_anomalies)
        .into_iter()
        .map(|t| t + 1)
        .collect::<Vec<_>>();
    anomaly_ticks.sort_unstable();
    let mut truth = Vec::with_capacity(anomaly_ticks.len());
    for &tick in &anomaly_ticks {
        let period = tick / config.n_tau;
        let topo = &periods[period];
        let model = &period_models[period];
        let rows = sensors.observed_in(topo);
        let mut candidates: Vec<BranchId> = topo
            .active_edges()
            .iter()
            .copied()
            .filter(|&e| !sensors.observes(e))
            .collect();
        let picked = pick_non_bridge(model, &mut candidates, &mut rng, |e| {
            if config.min_anomaly_coupling == 0.0 {
                return Ok(true);
            }
            let d = model.lodf(e, &rows)?;
            Ok(d.values().iter().any(|v| v.abs() >= config.min_anomaly_coupling))
        })?
        .ok_or_else(|| {
            Error::Model(format!(
                "no eligible unobserved branch for an anomaly in period {period}"
            ))
        })?;
        truth.push(AnomalyEvent {
            tick,
            branch_id: picked,
        });
    }

    let profile = generate_load_profile(&case, config)?;
    let anomaly_models: HashMap<usize, DcModel> = truth
        .par_iter()
        .map(|a| {
            let topo = periods[a.tick / config.n_tau].without(&case, a.branch_id)?;
            Ok((a.tick, DcModel::new(&case, &topo)?))
        })
        .collect::<Result<_>>()?;

    let snapshots = (0..n_ticks)
        .into_par_iter()
        .map(|tick| {
            let period = tick / config.n_tau;
            let model = anomaly_models.get(&tick).unwrap_or(&period_models[period]);
            let injections = profile.injections[tick].clone();
            let sol = model.solve(&injections)?;
            let mut flows = vec![0.0; case.branches().len()];
            for (e, f) in sol.edges.iter().zip(&sol.flows) {
                flows[case.branch_index(*e).expect("case branch")] = *f;
            }
            Ok(GridSnapshot {
                tick,
                period,
                flows,
                injections,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    log::info!(
        "generated {} ticks over {} periods with {} anomalies and {} shift events",
        n_ticks,
        config.n_periods,
        truth.len(),
        profile.shift_ticks.len()
    );
    Ok(Scenario {
        config: config.clone(),
        case,
        baseline,
        periods,
        sensors,
        snapshots,
        truth,
        shift_ticks: profile.shift_ticks,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TopologyFile {
    case_id: CaseId,
    baseline: Vec<BranchId>,
    periods: Vec<PeriodRecord>,
    sensors: Vec<BusId>,
    shift_ticks: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PeriodRecord {
    period: usize,
    active_edges: Vec<BranchId>,
}

impl Scenario {
    pub fn n_ticks(&self) -> usize {
        self.snapshots.len()
    }

    pub fn truth_ticks(&self) -> Vec<usize> {
        self.truth.iter().map(|a| a.tick).collect()
    }

    /// Anticipated topology in force at `tick`.
    pub fn period_topology(&self, tick: usize) -> &Topology {
        &self.periods[self.snapshots[tick].period]
    }

    /// Topology actually in force at `tick`, anomaly included.
    pub fn true_topology(&self, tick: usize) -> Result<Topology> {
        let t = self.period_topology(tick);
        match self.truth.binary_search_by_key(&tick, |a| a.tick) {
            Ok(k) => t.without(&self.case, self.truth[k].branch_id),
            Err(_) => Ok(t.clone()),
        }
    }

    /// Frames as seen by `sensors` under the anticipated topologies.
    pub fn frames(&self, sensors: &SensorSet) -> Result<Vec<MeasurementFrame>> {
        self.snapshots
            .iter()
            .map(|s| s.observe(&self.case, &self.periods[s.period], sensors))
            .collect()
    }

    /// Baseline context on the scenario baseline with case base injections.
    pub fn baseline_context(&self, sensors: SensorSet) -> Result<BaselineContext> {
        BaselineContext::new(
            Arc::clone(&self.case),
            self.baseline.clone(),
            self.case.base_injections(),
            sensors,
        )
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, text: String| {
            let path = dir.join(name);
            fs::write(&path, text + "\n").map_err(|e| Error::io(path, e))
        };
        write("config.json", serde_json::to_string_pretty(&self.config)?)?;
        write("case.json", self.case.to_json()?)?;
        let topo = TopologyFile {
            case_id: self.case.id().clone(),
            baseline: self.baseline.active_edges().iter().copied().collect(),
            periods: self
                .periods
                .iter()
                .map(|t| PeriodRecord {
                    period: t.label(),
                    active_edges: t.active_edges().iter().copied().collect(),
                })
                .collect(),
            sensors: self.sensors.buses().iter().copied().collect(),
            shift_ticks: self.shift_ticks.clone(),
        };
        write("topologies.json", serde_json::to_string_pretty(&topo)?)?;
        frames::write_csv_file(&dir.join("frames.csv"), &self.case, &self.snapshots)?;

        let path = dir.join("truth.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["tick", "branch_id"])?;
        for a in &self.truth {
            w.write_record([a.tick.to_string(), a.branch_id.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let path = dir.join(name);
            fs::read_to_string(&path).map_err(|e| Error::io(path, e))
        };
        // config.json and truth.csv are optional so that externally recorded
        // frames can be replayed from a hand-made directory
        let config: ScenarioConfig = if dir.join("config.json").exists() {
            serde_json::from_str(&read("config.json")?)?
        } else {
            ScenarioConfig::default()
        };
        let case = Arc::new(GridCase::from_json(&read("case.json")?)?);
        let topo: TopologyFile = serde_json::from_str(&read("topologies.json")?)?;
        if &topo.case_id != case.id() {
            return Err(Error::CaseMismatch(topo.case_id.to_string(), case.id().to_string()));
        }
        let baseline = Topology::new(&case, topo.baseline, 0)?;
        let periods = topo
            .periods
            .into_iter()
            .enumerate()
            .map(|(i, p)| {
                if p.period != i {
                    return Err(Error::Model(format!("period {} listed at position {i}", p.period)));
                }
                Topology::new(&case, p.active_edges, p.period)
            })
            .collect::<Result<Vec<_>>>()?;
        let sensors = observed_edges(&case, topo.sensors)?;
        let snapshots = frames::read_csv_file(&dir.join("frames.csv"), &case)?;
        for (i, s) in snapshots.iter().enumerate() {
            if s.tick != i || s.period >= periods.len() {
                return Err(Error::Model(format!(
                    "frame row {} has tick {} in period {}; expected consecutive ticks from 0 in known periods",
                    i + 1,
                    s.tick,
                    s.period
                )));
            }
        }

        let path = dir.join("truth.csv");
        let mut truth = Vec::new();
        let records: Vec<csv::Result<AnomalyEvent>> = if path.exists() {
            csv::Reader::from_path(&path)?.into_deserialize().collect()
        } else {
            Vec::new()
        };
        for rec in records {
            let a: AnomalyEvent = rec?;
            if a.tick >= snapshots.len() {
                return Err(Error::Model(format!("truth tick {} is past the last frame", a.tick)));
            }
            truth.push(a);
        }
        truth.sort();
        Ok(Scenario {
            config,
            case,
            baseline,
            periods,
            sensors,
            snapshots,
            truth,
            shift_ticks: topo.shift_ticks,
        })
    }
}
