//! Full-grid snapshots and their CSV encoding.
//!
//! A snapshot records the flow on every case branch and the injection at
//! every bus for one tick. Measurement frames for a particular sensor set are
//! cut from snapshots, so one recorded stream can be replayed with different
//! sensors.
//!
//! CSV layout, one row per tick, powers in MW:
//!
//! ```text
//! tick,period,flow_<branch>...,inj_<bus>...
//! ```
//!
//! `flow_` columns may cover any subset of branches and cells may be empty;
//! both read as "not measured". Every bus needs an `inj_` column.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::mapping::MeasurementFrame;
use crate::netmodel::{pu_to_mw, BranchId, BusId, GridCase, SensorSet, Topology};

#[derive(Debug, Clone, PartialEq)]
pub struct GridSnapshot {
    pub tick: usize,
    pub period: usize,
    /// Per-unit flow on every case branch in case order. Switched-off
    /// branches read zero; `NaN` marks a flow that was not measured.
    pub flows: Vec<f64>,
    /// Per-unit net injection at every bus in case order.
    pub injections: Vec<f64>,
}

impl GridSnapshot {
    /// The frame seen by `sensors` when the operator believes `topology` is
    /// in effect.
    pub fn observe(&self, case: &GridCase, topology: &Topology, sensors: &SensorSet) -> Result<MeasurementFrame> {
        if self.flows.len() != case.branches().len() {
            return Err(Error::Dimension {
                what: "snapshot flows",
                expected: case.branches().len(),
                found: self.flows.len(),
            });
        }
        let flows = sensors
            .observed_in(topology)
            .into_iter()
            .map(|e| {
                let v = self.flows[case.branch_index(e).expect("topology edges belong to the case")];
                if v.is_nan() {
                    Err(Error::Model(format!(
                        "tick {}: flow on observed branch {e} was not recorded",
                        self.tick
                    )))
                } else {
                    Ok(v)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MeasurementFrame {
            tick: self.tick,
            period: self.period,
            flows,
            injections: self.injections.clone(),
        })
    }
}

pub fn write_csv<W: Write>(out: W, case: &GridCase, snapshots: &[GridSnapshot]) -> Result<()> {
    let base = case.base_mva();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["tick".to_string(), "period".to_string()];
    header.extend(case.branches().iter().map(|b| format!("flow_{}", b.id)));
    header.extend(case.buses().iter().map(|b| format!("inj_{}", b.id)));
    w.write_record(&header)?;
    let mut row = Vec::with_capacity(header.len());
    for s in snapshots {
        row.clear();
        row.push(s.tick.to_string());
        row.push(s.period.to_string());
        for &f in s.flows.iter().chain(&s.injections) {
            row.push(if f.is_nan() {
                String::new()
            } else {
                pu_to_mw(f, base).to_string()
            });
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R, case: &GridCase) -> Result<Vec<GridSnapshot>> {
    enum Column {
        Flow(usize),
        Injection(usize),
    }
    let base = case.base_mva();
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers()?.clone();
    if headers.get(0) != Some("tick") || headers.get(1) != Some("period") {
        return Err(Error::Parse {
            line: 1,
            message: "frames must start with columns tick,period".into(),
        });
    }
    let mut columns = Vec::with_capacity(headers.len());
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, h) in headers.iter().enumerate().skip(2) {
        if seen.insert(h.to_string(), i).is_some() {
            return Err(Error::Parse {
                line: 1,
                message: format!("duplicate column {h}"),
            });
        }
        let bad = || Error::Parse {
            line: 1,
            message: format!("unrecognized column {h:?}"),
        };
        let col = if let Some(id) = h.strip_prefix("flow_") {
            let id = BranchId(id.parse().map_err(|_| bad())?);
            Column::Flow(case.branch_index(id).ok_or(Error::UnknownBranch(id))?)
        } else if let Some(id) = h.strip_prefix("inj_") {
            let id = BusId(id.parse().map_err(|_| bad())?);
            Column::Injection(case.bus_index(id).ok_or(Error::UnknownBus(id))?)
        } else {
            return Err(bad());
        };
        columns.push(col);
    }
    let n_inj = columns.iter().filter(|c| matches!(c, Column::Injection(_))).count();
    if n_inj != case.n_buses() {
        return Err(Error::Parse {
            line: 1,
            message: format!(
                "expected an injection column for each of {} buses, found {n_inj}",
                case.n_buses()
            ),
        });
    }

    let mut snapshots = Vec::new();
    for (k, record) in r.records().enumerate() {
        let record = record?;
        let line = k + 2;
        let number = |s: &str| -> Result<f64> {
            if s.trim().is_empty() {
                return Ok(f64::NAN);
            }
            s.trim().parse::<f64>().map_err(|_| Error::Parse {
                line,
                message: format!("invalid number {s:?}"),
            })
        };
        let integer = |s: &str| -> Result<usize> {
            s.trim().parse().map_err(|_| Error::Parse {
                line,
                message: format!("invalid integer {s:?}"),
            })
        };
        let mut flows = vec![f64::NAN; case.branches().len()];
        let mut injections = vec![f64::NAN; case.n_buses()];
        for (col, cell) in columns.iter().zip(record.iter().skip(2)) {
            let v = number(cell)? / base;
            match *col {
                Column::Flow(i) => flows[i] = v,
                Column::Injection(i) => injections[i] = v,
            }
        }
        if injections.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse {
                line,
                message: "every bus injection must be a finite number".into(),
            });
        }
        snapshots.push(GridSnapshot {
            tick: integer(&record[0])?,
            period: integer(&record[1])?,
            flows,
            injections,
        });
    }
    Ok(snapshots)
}

pub fn write_csv_file(path: &Path, case: &GridCase, snapshots: &[GridSnapshot]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(std::io::BufWriter::new(file), case, snapshots)
}

pub fn read_csv_file(path: &Path, case: &GridCase) -> Result<Vec<GridSnapshot>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(std::io::BufReader::new(file), case)
}
