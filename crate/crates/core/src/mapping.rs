//! Maps flow measurements taken under an arbitrary topology and load level
//! onto the observed edges of the baseline context.
//!
//! Two steps are involved. Load correction shifts the measured flows by
//! `F (p0 - pτ)` so they reflect baseline injections on the period topology.
//! The inverse projection then finds the point closest to the baseline power
//! flow among all baseline-flow vectors consistent with the corrected
//! measurements under the outage equations
//!
//! ```text
//! p̂_l = x_l + Σ_k d_l^k x_k      l ∈ Ẽ(τ), k ∈ E_0 \ E(τ)
//! ```
//!
//! Every missing baseline edge contributes one LODF column. Missing edges
//! that are not observed in the baseline get an auxiliary variable anchored
//! at their baseline flow; they are solved for but not reported.
//!
//! The constraint matrix is `[I | M]` up to a column permutation, so it always
//! has full row rank, and the projection reduces to a `|K| × |K|` system
//! `(I + MᵀM) z = Mᵀ(p̂ - c_y) + c_z`, `y = p̂ - M z`.

use std::collections::{BTreeSet, HashMap};
use std::sync::{Arc, RwLock};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netmodel::{BranchId, GridCase, SensorSet, Topology};
use crate::sensitivity::{DcFlowSolution, DcModel, LodfVector, PtdfMatrix};

/// Flows and injections recorded at one tick.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementFrame {
    pub tick: usize,
    pub period: usize,
    /// Per-unit flows on the observed active edges of the period topology,
    /// sorted by branch id.
    pub flows: Vec<f64>,
    /// Per-unit net injection at every bus, in case order.
    pub injections: Vec<f64>,
}

/// Flows after load correction, same indexing as the measured flows.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectedFrame {
    pub tick: usize,
    pub period: usize,
    pub flows: Vec<f64>,
}

/// Flows expressed in the baseline context, indexed by the baseline's
/// observed edges.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextAgnosticFrame {
    pub tick: usize,
    pub period: usize,
    pub values: Vec<f64>,
    /// Distance from the baseline power flow over all projection variables.
    pub residual: f64,
}

/// How measurements are brought to the baseline context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MappingMode {
    /// Raw flows; baseline edges that are switched off read zero.
    #[serde(rename = "naive")]
    Naive,
    /// Inverse projection of the raw flows, no load correction.
    #[serde(rename = "ip")]
    InverseProjection,
    /// Load correction followed by inverse projection.
    #[serde(rename = "iplc")]
    Full,
}

impl MappingMode {
    pub const ALL: [MappingMode; 3] = [MappingMode::Naive, MappingMode::InverseProjection, MappingMode::Full];

    pub fn name(self) -> &'static str {
        match self {
            MappingMode::Naive => "naive",
            MappingMode::InverseProjection => "ip",
            MappingMode::Full => "iplc",
        }
    }
}

impl std::str::FromStr for MappingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MappingMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown mapping mode {s:?} (naive, ip, iplc)")))
    }
}

/// Constraint matrix of the outage equations.
///
/// Rows are the observed active edges of the period; columns are the
/// baseline observed edges followed by any unobserved missing edges.
#[derive(Debug, Clone)]
pub struct ConstraintMatrix {
    rows: Vec<BranchId>,
    columns: Vec<BranchId>,
    n_output: usize,
    /// column holding the identity entry of each row
    identity_cols: Vec<usize>,
    /// column of each missing edge, parallel to `lodf`
    missing_cols: Vec<usize>,
    /// LODF column of each missing edge over `rows`
    lodf: Vec<Vec<f64>>,
}

impl ConstraintMatrix {
    pub fn rows(&self) -> &[BranchId] {
        &self.rows
    }

    pub fn columns(&self) -> &[BranchId] {
        &self.columns
    }

    /// The first `n_output` columns are the baseline observed edges.
    pub fn n_output(&self) -> usize {
        self.n_output
    }

    pub fn missing_edges(&self) -> impl Iterator<Item = BranchId> + '_ {
        self.missing_cols.iter().map(|&c| self.columns[c])
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.rows.len(), self.columns.len());
        for (r, &c) in self.identity_cols.iter().enumerate() {
            a[(r, c)] = 1.0;
        }
        for (&c, col) in self.missing_cols.iter().zip(&self.lodf) {
            for (r, v) in col.iter().enumerate() {
                a[(r, c)] = *v;
            }
        }
        a
    }

    /// `A x`
    pub fn mul(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.columns.len() {
            return Err(Error::Dimension {
                what: "constraint product",
                expected: self.columns.len(),
                found: x.len(),
            });
        }
        let mut y: Vec<f64> = self.identity_cols.iter().map(|&c| x[c]).collect();
        for (&c, col) in self.missing_cols.iter().zip(&self.lodf) {
            for (yr, d) in y.iter_mut().zip(col) {
                *yr += d * x[c];
            }
        }
        Ok(y)
    }

    fn gram(&self) -> DMatrix<f64> {
        let k = self.lodf.len();
        DMatrix::from_fn(k, k, |i, j| {
            let dot: f64 = self.lodf[i].iter().zip(&self.lodf[j]).map(|(a, b)| a * b).sum();
            if i == j {
                1.0 + dot
            } else {
                dot
            }
        })
    }

    fn factor(&self) -> Result<Cholesky<f64, Dyn>> {
        // I + MᵀM is positive definite by construction; failure means NaNs
        Cholesky::new(self.gram())
            .ok_or_else(|| Error::Singular("projection normal matrix is not positive definite".into()))
    }

    fn project_with(&self, chol: &Cholesky<f64, Dyn>, corrected: &[f64], target: &[f64]) -> Result<(Vec<f64>, f64)> {
        if corrected.len() != self.rows.len() {
            return Err(Error::Dimension {
                what: "corrected flows",
                expected: self.rows.len(),
                found: corrected.len(),
            });
        }
        if target.len() != self.columns.len() {
            return Err(Error::Dimension {
                what: "projection target",
                expected: self.columns.len(),
                found: target.len(),
            });
        }
        let shifted: Vec<f64> = corrected
            .iter()
            .zip(&self.identity_cols)
            .map(|(p, &c)| p - target[c])
            .collect();
        let rhs = DVector::from_iterator(
            self.lodf.len(),
            self.lodf
                .iter()
                .zip(&self.missing_cols)
                .map(|(col, &c)| col.iter().zip(&shifted).map(|(d, s)| d * s).sum::<f64>() + target[c]),
        );
        let z = chol.solve(&rhs);

        let mut x = vec![0.0; self.columns.len()];
        for (r, &c) in self.identity_cols.iter().enumerate() {
            x[c] = corrected[r];
        }
        for (k, (&c, col)) in self.missing_cols.iter().zip(&self.lodf).enumerate() {
            x[c] = z[k];
            for (r, &ic) in self.identity_cols.iter().enumerate() {
                x[ic] -= col[r] * z[k];
            }
        }
        let residual = x.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        Ok((x, residual))
    }
}

/// Assembles the outage equations for one period.
///
/// `observed_baseline` lists the baseline observed edges (sorted), `rows` the
/// observed active edges of the period (sorted, a subset of the former), and
/// `lodfs` one vector per missing edge, each over `rows`.
pub fn build_constraint_matrix(
    observed_baseline: &[BranchId],
    rows: &[BranchId],
    lodfs: &[LodfVector],
) -> Result<ConstraintMatrix> {
    if !is_sorted_unique(observed_baseline) || !is_sorted_unique(rows) {
        return Err(Error::InvalidArgument("edge lists must be sorted and unique".into()));
    }
    let row_set: BTreeSet<BranchId> = rows.iter().copied().collect();
    let base_set: BTreeSet<BranchId> = observed_baseline.iter().copied().collect();
    if let Some(&extra) = row_set.difference(&base_set).next() {
        return Err(Error::Model(format!(
            "edge {extra} is observed in the period but not in the baseline"
        )));
    }

    let mut by_outage: HashMap<BranchId, &LodfVector> = HashMap::new();
    for l in lodfs {
        if row_set.contains(&l.outage()) {
            return Err(Error::InvalidArgument(format!(
                "edge {} has an outage vector but is active in the period",
                l.outage()
            )));
        }
        if l.rows() != rows {
            return Err(Error::Dimension {
                what: "outage vector rows",
                expected: rows.len(),
                found: l.rows().len(),
            });
        }
        by_outage.insert(l.outage(), l);
    }

    let mut columns = observed_baseline.to_vec();
    let mut aux: Vec<BranchId> = by_outage.keys().copied().filter(|k| !base_set.contains(k)).collect();
    aux.sort();
    columns.extend(aux);

    let col_pos: HashMap<BranchId, usize> = columns.iter().enumerate().map(|(i, &e)| (e, i)).collect();
    let identity_cols = rows.iter().map(|e| col_pos[e]).collect();
    let mut missing_cols = Vec::new();
    let mut lodf = Vec::new();
    for (c, e) in columns.iter().enumerate() {
        if row_set.contains(e) {
            continue;
        }
        let l = by_outage
            .get(e)
            .ok_or_else(|| Error::InvalidArgument(format!("no outage vector for missing edge {e}")))?;
        missing_cols.push(c);
        lodf.push(l.values().to_vec());
    }
    Ok(ConstraintMatrix {
        rows: rows.to_vec(),
        columns,
        n_output: observed_baseline.len(),
        identity_cols,
        missing_cols,
        lodf,
    })
}

fn is_sorted_unique(v: &[BranchId]) -> bool {
    v.windows(2).all(|w| w[0] < w[1])
}

/// Load correction: `p̂ = p + F (p0 - pτ)`.
pub fn injection_correct(
    frame: &MeasurementFrame,
    baseline: &BaselineContext,
    ptdf: &PtdfMatrix,
) -> Result<CorrectedFrame> {
    check_frame(frame, ptdf.rows().len(), baseline.case.n_buses())?;
    let delta: Vec<f64> = baseline
        .injections
        .iter()
        .zip(&frame.injections)
        .map(|(p0, pt)| p0 - pt)
        .collect();
    let shift = ptdf.mul_vec(&delta)?;
    Ok(CorrectedFrame {
        tick: frame.tick,
        period: frame.period,
        flows: frame.flows.iter().zip(shift).map(|(p, s)| p + s).collect(),
    })
}

/// Closest point to the baseline flows on the observed edges that satisfies
/// the outage equations. Returns all projection variables (columns of `a`)
/// and the distance to `target`.
pub fn inverse_project(corrected: &[f64], target: &[f64], a: &ConstraintMatrix) -> Result<(Vec<f64>, f64)> {
    let chol = a.factor()?;
    a.project_with(&chol, corrected, target)
}

fn check_frame(frame: &MeasurementFrame, n_rows: usize, n_bus: usize) -> Result<()> {
    if frame.flows.len() != n_rows {
        return Err(Error::Dimension {
            what: "measured flows",
            expected: n_rows,
            found: frame.flows.len(),
        });
    }
    if frame.injections.len() != n_bus {
        return Err(Error::Dimension {
            what: "measured injections",
            expected: n_bus,
            found: frame.injections.len(),
        });
    }
    if frame.flows.iter().chain(&frame.injections).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "tick {} has non-finite measurements",
            frame.tick
        )));
    }
    Ok(())
}

/// Baseline topology, injections and sensors, plus everything derived from
/// them that does not depend on the measurements.
#[derive(Debug)]
pub struct BaselineContext {
    case: Arc<GridCase>,
    topology: Topology,
    injections: Vec<f64>,
    sensors: SensorSet,
    observed: Vec<BranchId>,
    solution: DcFlowSolution,
    model: Arc<DcModel>,
    periods: RwLock<HashMap<usize, Arc<PeriodMapping>>>,
}

impl BaselineContext {
    pub fn new(case: Arc<GridCase>, topology: Topology, injections: Vec<f64>, sensors: SensorSet) -> Result<Self> {
        topology.check_case(&case)?;
        let model = DcModel::new(&case, &topology)?;
        let solution = model.solve(&injections)?;
        let observed = sensors.observed_in(&topology);
        if observed.is_empty() {
            return Err(Error::InvalidArgument("the sensors observe no baseline edge".into()));
        }
        Ok(BaselineContext {
            case,
            topology,
            injections,
            sensors,
            observed,
            solution,
            model: Arc::new(model),
            periods: RwLock::new(HashMap::new()),
        })
    }

    pub fn case(&self) -> &Arc<GridCase> {
        &self.case
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn injections(&self) -> &[f64] {
        &self.injections
    }

    pub fn sensors(&self) -> &SensorSet {
        &self.sensors
    }

    /// Observed baseline edges; the index set of every mapped frame.
    pub fn observed_edges(&self) -> &[BranchId] {
        &self.observed
    }

    pub fn power_flow(&self) -> &DcFlowSolution {
        &self.solution
    }

    /// Baseline flows on the observed edges.
    pub fn baseline_flows(&self) -> Vec<f64> {
        self.solution.flows_on(&self.observed)
    }

    /// Mapping data for `topology`, cached by its label. A cached entry whose
    /// edge set differs from `topology` is rebuilt.
    pub fn period(&self, topology: &Topology) -> Result<Arc<PeriodMapping>> {
        if let Some(m) = self.periods.read().expect("period cache").get(&topology.label()) {
            if m.topology.active_edges() == topology.active_edges() {
                return Ok(Arc::clone(m));
            }
        }
        let m = Arc::new(PeriodMapping::build(self, topology)?);
        self.periods
            .write()
            .expect("period cache")
            .insert(topology.label(), Arc::clone(&m));
        Ok(m)
    }
}

/// Precomputed mapping for one period topology.
#[derive(Debug)]
pub struct PeriodMapping {
    topology: Topology,
    /// factored period network; `F Δp` is one solve against it
    model: Arc<DcModel>,
    constraint: ConstraintMatrix,
    target: Vec<f64>,
    chol: Cholesky<f64, Dyn>,
    /// for each baseline observed edge, its row in the period (if active)
    naive_rows: Vec<Option<usize>>,
}

impl PeriodMapping {
    fn build(baseline: &BaselineContext, topology: &Topology) -> Result<Self> {
        let case = &baseline.case;
        topology.check_case(case)?;
        if let Some(&extra) = topology
            .active_edges()
            .difference(baseline.topology.active_edges())
            .next()
        {
            return Err(Error::Model(format!(
                "edge {extra} is active in period {} but not in the baseline",
                topology.label()
            )));
        }
        let rows = baseline.sensors.observed_in(topology);
        if rows.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "no observed edge is active in period {}",
                topology.label()
            )));
        }

        let missing: Vec<BranchId> = baseline
            .topology
            .active_edges()
            .difference(topology.active_edges())
            .copied()
            .collect();
        let model = if missing.is_empty() {
            Arc::clone(&baseline.model)
        } else {
            Arc::new(DcModel::new(case, topology)?)
        };
        // d^k is taken on G(τ) ∪ {k}; with one missing edge that is G_0
        let lodfs = missing
            .par_iter()
            .map(|&k| {
                if missing.len() == 1 {
                    baseline.model.lodf(k, &rows)
                } else {
                    DcModel::new(case, &topology.with(case, k)?)?.lodf(k, &rows)
                }
            })
            .collect::<Result<Vec<_>>>()?;

        let constraint = build_constraint_matrix(&baseline.observed, &rows, &lodfs)?;
        let target = baseline.solution.flows_on(constraint.columns());
        let chol = constraint.factor()?;
        let naive_rows = baseline.observed.iter().map(|e| rows.binary_search(e).ok()).collect();
        log::debug!(
            "period {}: {} observed rows, {} missing edges, {} projection variables",
            topology.label(),
            rows.len(),
            missing.len(),
            constraint.columns().len()
        );
        Ok(PeriodMapping {
            topology: topology.clone(),
            model,
            constraint,
            target,
            chol,
            naive_rows,
        })
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    /// Observed active edges of the period; the index set of measured flows.
    pub fn rows(&self) -> &[BranchId] {
        self.constraint.rows()
    }

    /// Dense PTDF of the period rows. Built on demand; the mapping itself
    /// never materializes it.
    pub fn ptdf(&self) -> Result<PtdfMatrix> {
        self.model.ptdf(self.rows())
    }

    pub fn constraint(&self) -> &ConstraintMatrix {
        &self.constraint
    }

    /// Baseline flows on every projection variable.
    pub fn target(&self) -> &[f64] {
        &self.target
    }

    /// Same result as [`injection_correct`] with this period's PTDF.
    pub fn correct(&self, frame: &MeasurementFrame, baseline: &BaselineContext) -> Result<CorrectedFrame> {
        check_frame(frame, self.rows().len(), baseline.case.n_buses())?;
        let delta: Vec<f64> = baseline
            .injections
            .iter()
            .zip(&frame.injections)
            .map(|(p0, pt)| p0 - pt)
            .collect();
        let shift = self.model.solve(&delta)?.flows_on(self.rows());
        Ok(CorrectedFrame {
            tick: frame.tick,
            period: frame.period,
            flows: frame.flows.iter().zip(shift).map(|(p, s)| p + s).collect(),
        })
    }

    /// Projects already corrected flows. The result covers the baseline
    /// observed edges only.
    pub fn project(&self, corrected: &CorrectedFrame) -> Result<ContextAgnosticFrame> {
        let (mut x, residual) = self
            .constraint
            .project_with(&self.chol, &corrected.flows, &self.target)?;
        x.truncate(self.constraint.n_output());
        Ok(ContextAgnosticFrame {
            tick: corrected.tick,
            period: corrected.period,
            values: x,
            residual,
        })
    }

    pub fn map(
        &self,
        frame: &MeasurementFrame,
        baseline: &BaselineContext,
        mode: MappingMode,
    ) -> Result<ContextAgnosticFrame> {
        match mode {
            MappingMode::Full => self.project(&self.correct(frame, baseline)?),
            MappingMode::InverseProjection => {
                check_frame(frame, self.rows().len(), baseline.case.n_buses())?;
                self.project(&CorrectedFrame {
                    tick: frame.tick,
                    period: frame.period,
                    flows: frame.flows.clone(),
                })
            }
            MappingMode::Naive => {
                check_frame(frame, self.rows().len(), baseline.case.n_buses())?;
                let values = self
                    .naive_rows
                    .iter()
                    .map(|r| r.map_or(0.0, |r| frame.flows[r]))
                    .collect();
                Ok(ContextAgnosticFrame {
                    tick: frame.tick,
                    period: frame.period,
                    values,
                    residual: 0.0,
                })
            }
        }
    }
}

/// Load correction and inverse projection of one frame.
pub fn context_agnostic(
    frame: &MeasurementFrame,
    topology: &Topology,
    baseline: &BaselineContext,
) -> Result<ContextAgnosticFrame> {
    baseline.period(topology)?.map(frame, baseline, MappingMode::Full)
}
