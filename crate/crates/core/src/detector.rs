//! Streaming anomaly detector.
//!
//! Each incoming frame is mapped to the baseline context, then compared
//! against a weighted Gaussian model of all earlier mapped frames. Historical
//! weights come from the topology distance between each tick's period and the
//! current one; ticks judged anomalous are excluded from later fits.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, ErrorCategory, Result};
use crate::mapping::{BaselineContext, MappingMode, MeasurementFrame};
use crate::netmodel::{BranchId, Topology};
use crate::weighting::{compute_weights, DistanceCache, TickWeights};

pub const DEFAULT_THRESHOLD: f64 = 10.0;
pub const DEFAULT_WARMUP: usize = 60;

/// Relative floor applied to every fitted standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    /// Score above which a tick is anomalous.
    pub threshold: f64,
    /// Weight regularizer; `None` uses the mean distance.
    pub rho: Option<f64>,
    /// Ticks are only added to the anomaly set once this many earlier ticks
    /// are in the history.
    pub warmup: usize,
    pub mode: MappingMode,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            threshold: DEFAULT_THRESHOLD,
            rho: None,
            warmup: DEFAULT_WARMUP,
            mode: MappingMode::Full,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold.is_finite() && self.threshold > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "threshold must be positive, got {}",
                self.threshold
            )));
        }
        if let Some(rho) = self.rho {
            if !(rho.is_finite() && rho > 0.0) {
                return Err(Error::InvalidArgument(format!("rho must be positive, got {rho}")));
            }
        }
        Ok(())
    }
}

/// Weighted per-edge mean and (floored) standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct TickModel {
    pub means: Vec<f64>,
    pub stdevs: Vec<f64>,
}

/// Why a verdict was produced without a regular model fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictCause {
    /// No earlier tick to compare against; scored zero.
    NoHistory,
    /// The frame could not be mapped to the baseline; flagged anomalous.
    MappingFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyVerdict {
    pub tick: usize,
    /// Max absolute z-score; infinite when mapping failed.
    pub score: f64,
    pub argmax_edge: Option<BranchId>,
    pub anomalous: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cause: Option<VerdictCause>,
}

/// Weighted moments over the rows of `history`. Weights need not be
/// normalized but must be non-negative with a positive sum.
pub fn fit_model(history: &[&[f64]], weights: &[f64]) -> Result<TickModel> {
    if history.len() != weights.len() {
        return Err(Error::Dimension {
            what: "history weights",
            expected: history.len(),
            found: weights.len(),
        });
    }
    let total: f64 = weights.iter().sum();
    if history.is_empty() || !(total > 0.0) || weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::InvalidArgument(
            "model fit needs non-negative weights with a positive sum".into(),
        ));
    }
    let n = history[0].len();
    if let Some(bad) = history.iter().find(|h| h.len() != n) {
        return Err(Error::Dimension {
            what: "history frame",
            expected: n,
            found: bad.len(),
        });
    }
    let mut means = vec![0.0; n];
    for (h, &w) in history.iter().zip(weights) {
        if w > 0.0 {
            for (m, x) in means.iter_mut().zip(h.iter()) {
                *m += w * x;
            }
        }
    }
    means.iter_mut().for_each(|m| *m /= total);
    let mut var = vec![0.0; n];
    for (h, &w) in history.iter().zip(weights) {
        if w > 0.0 {
            for ((v, x), m) in var.iter_mut().zip(h.iter()).zip(&means) {
                *v += w * (x - m) * (x - m);
            }
        }
    }
    let stdevs = var
        .iter()
        .zip(&means)
        .map(|(v, m)| (v / total).sqrt().max(SIGMA_FLOOR * m.abs().max(1.0)))
        .collect();
    Ok(TickModel { means, stdevs })
}

/// Max absolute z-score and the edge attaining it. `edges` must be sorted so
/// that ties go to the lowest branch id.
pub fn score(values: &[f64], model: &TickModel, edges: &[BranchId]) -> Result<(f64, Option<BranchId>)> {
    if values.len() != model.means.len() || edges.len() != values.len() {
        return Err(Error::Dimension {
            what: "scored frame",
            expected: model.means.len(),
            found: values.len(),
        });
    }
    let mut best = (0.0, None);
    for ((x, (m, s)), &e) in values.iter().zip(model.means.iter().zip(&model.stdevs)).zip(edges) {
        let z = ((x - m) / s).abs();
        if best.1.is_none() || z > best.0 {
            best = (z, Some(e));
        }
    }
    Ok(best)
}

#[derive(Debug, Clone)]
struct HistoryEntry {
    frame: MeasurementFrame,
    /// `None` when the frame could not be mapped
    mapped: Option<Vec<f64>>,
}

/// Detector state for one measurement stream.
#[derive(Debug)]
pub struct DetectionState {
    baseline: Arc<BaselineContext>,
    config: DetectorConfig,
    periods: BTreeMap<usize, Topology>,
    history: Vec<HistoryEntry>,
    anomalous: BTreeSet<usize>,
    distances: DistanceCache,
    pair_distance: HashMap<(usize, usize), f64>,
    last_weights: Option<(Vec<usize>, TickWeights)>,
}

impl DetectionState {
    pub fn new(baseline: Arc<BaselineContext>, config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        let distances = DistanceCache::new(Arc::clone(baseline.case()));
        Ok(DetectionState {
            baseline,
            config,
            periods: BTreeMap::new(),
            history: Vec::new(),
            anomalous: BTreeSet::new(),
            distances,
            pair_distance: HashMap::new(),
            last_weights: None,
        })
    }

    /// Declares the anticipated topology of the period named by its label.
    pub fn register_period(&mut self, topology: Topology) -> Result<()> {
        topology.check_case(self.baseline.case())?;
        let label = topology.label();
        if self.periods.insert(label, topology).is_some() {
            self.pair_distance.retain(|&(a, b), _| a != label && b != label);
        }
        Ok(())
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn baseline(&self) -> &Arc<BaselineContext> {
        &self.baseline
    }

    pub fn history_len(&self) -> usize {
        self.history.len()
    }

    /// Ticks currently excluded from model fits.
    pub fn anomalous_ticks(&self) -> &BTreeSet<usize> {
        &self.anomalous
    }

    /// History ticks and their weights behind the latest verdict; `None`
    /// when that verdict was not a model fit.
    pub fn last_weights(&self) -> Option<(&[usize], &TickWeights)> {
        self.last_weights.as_ref().map(|(t, w)| (t.as_slice(), w))
    }

    fn period_distance(&mut self, a: usize, b: usize) -> Result<f64> {
        let key = (a.min(b), a.max(b));
        if let Some(&d) = self.pair_distance.get(&key) {
            return Ok(d);
        }
        let d = self.distances.distance(&self.periods[&key.0], &self.periods[&key.1])?;
        self.pair_distance.insert(key, d);
        Ok(d)
    }

    fn map(&self, frame: &MeasurementFrame) -> Result<Option<Vec<f64>>> {
        let topology = &self.periods[&frame.period];
        let mapped = self
            .baseline
            .period(topology)
            .and_then(|m| m.map(frame, &self.baseline, self.config.mode));
        match mapped {
            Ok(m) => Ok(Some(m.values)),
            Err(e) if e.category() == ErrorCategory::Numerical => {
                log::warn!("tick {}: mapping failed ({e}); flagging it anomalous", frame.tick);
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }

    /// Scores one frame, then appends it to the history.
    pub fn step(&mut self, frame: MeasurementFrame) -> Result<AnomalyVerdict> {
        if let Some(last) = self.history.last() {
            if frame.tick <= last.frame.tick {
                return Err(Error::InvalidArgument(format!(
                    "tick {} does not follow tick {}",
                    frame.tick, last.frame.tick
                )));
            }
        }
        if !self.periods.contains_key(&frame.period) {
            return Err(Error::InvalidArgument(format!(
                "tick {} refers to period {}, which has no registered topology",
                frame.tick, frame.period
            )));
        }

        let tick = frame.tick;
        self.last_weights = None;
        let mapped = self.map(&frame)?;
        let verdict = match &mapped {
            None => AnomalyVerdict {
                tick,
                score: f64::INFINITY,
                argmax_edge: None,
                anomalous: true,
                cause: Some(VerdictCause::MappingFailed),
            },
            Some(values) => self.evaluate(tick, frame.period, values)?,
        };
        let warmed_up = self.history.len() >= self.config.warmup;
        if verdict.anomalous && (warmed_up || mapped.is_none()) {
            self.anomalous.insert(tick);
        }
        self.history.push(HistoryEntry { frame, mapped });
        Ok(verdict)
    }

    fn evaluate(&mut self, tick: usize, period: usize, values: &[f64]) -> Result<AnomalyVerdict> {
        let usable: Vec<usize> = (0..self.history.len())
            .filter(|&i| self.history[i].mapped.is_some())
            .collect();
        if usable.is_empty() {
            return Ok(AnomalyVerdict {
                tick,
                score: 0.0,
                argmax_edge: None,
                anomalous: false,
                cause: Some(VerdictCause::NoHistory),
            });
        }
        let mut distances = Vec::with_capacity(usable.len());
        for &i in &usable {
            let p = self.history[i].frame.period;
            distances.push(self.period_distance(p, period)?);
        }
        let mask: Vec<bool> = usable
            .iter()
            .map(|&i| self.anomalous.contains(&self.history[i].frame.tick))
            .collect();
        let weights = compute_weights(&distances, self.config.rho, &mask)?;

        let mut rows = Vec::new();
        let mut w = Vec::new();
        for (&i, &wi) in usable.iter().zip(&weights.weights) {
            if wi > 0.0 {
                rows.push(self.history[i].mapped.as_deref().expect("usable"));
                w.push(wi);
            }
        }
        let model = fit_model(&rows, &w)?;
        let (z, edge) = score(values, &model, self.baseline.observed_edges())?;
        let ticks = usable.iter().map(|&i| self.history[i].frame.tick).collect();
        self.last_weights = Some((ticks, weights));
        Ok(AnomalyVerdict {
            tick,
            score: z,
            argmax_edge: edge,
            anomalous: z > self.config.threshold,
            cause: None,
        })
    }

    /// Switches to a new baseline and remaps the stored history. Ticks that
    /// no longer map are dropped; the anomaly set is kept.
    pub fn reanchor(&mut self, baseline: Arc<BaselineContext>) -> Result<()> {
        if baseline.case().id() != self.baseline.case().id() {
            return Err(Error::CaseMismatch(
                baseline.case().id().to_string(),
                self.baseline.case().id().to_string(),
            ));
        }
        self.baseline = baseline;
        let entries = std::mem::take(&mut self.history);
        for mut entry in entries {
            match self.map(&entry.frame) {
                Ok(Some(v)) => {
                    entry.mapped = Some(v);
                    self.history.push(entry);
                }
                Ok(None) => log::warn!("tick {} dropped from history after reanchoring", entry.frame.tick),
                Err(e) => log::warn!("tick {} dropped from history after reanchoring: {e}", entry.frame.tick),
            }
        }
        Ok(())
    }
}

/// Runs a whole stream through a fresh detector.
pub fn run_stream(
    baseline: Arc<BaselineContext>,
    config: DetectorConfig,
    periods: impl IntoIterator<Item = Topology>,
    frames: impl IntoIterator<Item = MeasurementFrame>,
) -> Result<Vec<AnomalyVerdict>> {
    let mut state = DetectionState::new(baseline, config)?;
    for t in periods {
        state.register_period(t)?;
    }
    frames.into_iter().map(|f| state.step(f)).collect()
}
