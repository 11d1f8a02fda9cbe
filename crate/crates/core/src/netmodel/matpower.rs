//! Reader and writer for the MATPOWER `.m` case subset: `baseMVA` plus the
//! `bus`, `gen` and `branch` tables. Other `mpc.*` blocks are skipped.

use std::collections::HashMap;
use std::fmt::Write as _;

use super::{pu_to_mw, Branch, BranchId, Bus, BusId, GridCase};
use crate::error::{Error, Result};

// Column positions in the MATPOWER tables (0-based).
const BUS_I: usize = 0;
const BUS_TYPE: usize = 1;
const PD: usize = 2;
const GEN_BUS: usize = 0;
const PG: usize = 1;
const GEN_STATUS: usize = 7;
const F_BUS: usize = 0;
const T_BUS: usize = 1;
const BR_X: usize = 3;
const BR_STATUS: usize = 10;

const REF_BUS: i64 = 3;
const ISOLATED_BUS: i64 = 4;

struct Row {
    line: usize,
    values: Vec<f64>,
}

#[derive(Default)]
struct Tables {
    base_mva: Option<f64>,
    bus: Option<Vec<Row>>,
    gen: Option<Vec<Row>>,
    branch: Option<Vec<Row>>,
}

/// Parses MATPOWER case text into a validated [`GridCase`].
///
/// Generator outputs of in-service units are summed per bus. Branches are
/// numbered by their row in the branch table, starting at 1.
pub fn parse_case(text: &str) -> Result<GridCase> {
    let tables = scan(text)?;
    let base_mva = tables
        .base_mva
        .ok_or_else(|| Error::Model("missing mpc.baseMVA".into()))?;
    let bus_rows = tables.bus.ok_or_else(|| Error::Model("missing mpc.bus table".into()))?;
    let branch_rows = tables
        .branch
        .ok_or_else(|| Error::Model("missing mpc.branch table".into()))?;

    let mut buses = Vec::with_capacity(bus_rows.len());
    let mut slack = None;
    for row in &bus_rows {
        require_cols(row, 3, "bus")?;
        let id = BusId(as_id(row, BUS_I)?);
        match as_int(row, BUS_TYPE)? {
            REF_BUS => {
                if let Some(prev) = slack.replace(id) {
                    return Err(Error::Model(format!("more than one slack bus ({prev} and {id})")));
                }
            }
            ISOLATED_BUS => {
                return Err(Error::Model(format!("isolated bus {id} (type 4) is not supported")));
            }
            1 | 2 => {}
            other => {
                return Err(Error::Parse {
                    line: row.line,
                    message: format!("unknown bus type {other}"),
                })
            }
        }
        buses.push(Bus {
            id,
            p_load: row.values[PD] / base_mva,
            p_gen: 0.0,
        });
    }
    let slack = slack.ok_or_else(|| Error::Model("no slack (type 3) bus declared".into()))?;

    let mut pos: HashMap<BusId, usize> = HashMap::new();
    for (i, b) in buses.iter().enumerate() {
        if pos.insert(b.id, i).is_some() {
            return Err(Error::Model(format!("duplicate bus id {}", b.id)));
        }
    }

    let mut gen_mw = vec![0.0; buses.len()];
    for row in tables.gen.iter().flatten() {
        require_cols(row, 2, "gen")?;
        let bus = BusId(as_id(row, GEN_BUS)?);
        let in_service = row.values.get(GEN_STATUS).is_none_or(|&s| s > 0.0);
        let i = *pos
            .get(&bus)
            .ok_or_else(|| Error::Model(format!("generator at line {} references unknown bus {bus}", row.line)))?;
        if in_service {
            gen_mw[i] += row.values[PG];
        }
    }
    for (bus, mw) in buses.iter_mut().zip(gen_mw) {
        bus.p_gen = mw / base_mva;
    }

    let mut branches = Vec::with_capacity(branch_rows.len());
    for (k, row) in branch_rows.iter().enumerate() {
        require_cols(row, 4, "branch")?;
        branches.push(Branch {
            id: BranchId(k as u32 + 1),
            from_bus: BusId(as_id(row, F_BUS)?),
            to_bus: BusId(as_id(row, T_BUS)?),
            reactance: row.values[BR_X],
            in_service: row.values.get(BR_STATUS).is_none_or(|&s| s != 0.0),
        });
    }

    GridCase::new(base_mva, buses, branches, slack)
}

/// Writes `case` as MATPOWER text that [`parse_case`] reads back unchanged.
pub(crate) fn write_case(case: &GridCase) -> Result<String> {
    for (k, br) in case.branches().iter().enumerate() {
        if br.id.0 as usize != k + 1 {
            return Err(Error::InvalidArgument(format!(
                "branch ids must be 1..={} to be written as MATPOWER, found {} at row {}",
                case.branches().len(),
                br.id,
                k + 1
            )));
        }
    }
    let base = case.base_mva();
    let mut out = String::new();
    let _ = writeln!(out, "function mpc = gridcal_case");
    let _ = writeln!(out, "mpc.version = '2';");
    let _ = writeln!(out, "mpc.baseMVA = {base:?};");
    let _ = writeln!(
        out,
        "\n%% bus data\n%\tbus_i\ttype\tPd\tQd\tGs\tBs\tarea\tVm\tVa\tbaseKV\tzone\tVmax\tVmin"
    );
    let _ = writeln!(out, "mpc.bus = [");
    for bus in case.buses() {
        let kind = if bus.id == case.slack_bus() {
            3
        } else if bus.p_gen != 0.0 {
            2
        } else {
            1
        };
        let _ = writeln!(
            out,
            "\t{}\t{}\t{:?}\t0\t0\t0\t1\t1\t0\t0\t1\t1.1\t0.9;",
            bus.id,
            kind,
            pu_to_mw(bus.p_load, base)
        );
    }
    let _ = writeln!(
        out,
        "];\n\n%% generator data\n%\tbus\tPg\tQg\tQmax\tQmin\tVg\tmBase\tstatus\tPmax\tPmin"
    );
    let _ = writeln!(out, "mpc.gen = [");
    for bus in case.buses().iter().filter(|b| b.p_gen != 0.0) {
        let _ = writeln!(
            out,
            "\t{}\t{:?}\t0\t0\t0\t1\t{base:?}\t1\t0\t0;",
            bus.id,
            pu_to_mw(bus.p_gen, base)
        );
    }
    let _ = writeln!(
        out,
        "];\n\n%% branch data\n%\tfbus\ttbus\tr\tx\tb\trateA\trateB\trateC\tratio\tangle\tstatus\tangmin\tangmax"
    );
    let _ = writeln!(out, "mpc.branch = [");
    for br in case.branches() {
        let _ = writeln!(
            out,
            "\t{}\t{}\t0\t{:?}\t0\t0\t0\t0\t0\t0\t{}\t-360\t360;",
            br.from_bus,
            br.to_bus,
            br.reactance,
            u8::from(br.in_service)
        );
    }
    let _ = writeln!(out, "];");
    Ok(out)
}

fn scan(text: &str) -> Result<Tables> {
    let mut tables = Tables::default();
    // (table name, closing delimiter, collected rows) while inside a block
    let mut open: Option<(String, char, Vec<Row>)> = None;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = strip_comment(raw);

        let mut rest: &str = line;
        if open.is_none() {
            let trimmed = line.trim();
            let Some(assign) = trimmed.strip_prefix("mpc.") else {
                continue;
            };
            let Some((name, value)) = assign.split_once('=') else {
                continue;
            };
            let name = name.trim();
            let value = value.trim();
            if let Some(body) = value.strip_prefix('[') {
                open = Some((name.to_string(), ']', Vec::new()));
                rest = body;
            } else if let Some(body) = value.strip_prefix('{') {
                open = Some((name.to_string(), '}', Vec::new()));
                rest = body;
            } else {
                if name == "baseMVA" {
                    let v = value.trim_end_matches(';').trim();
                    let parsed = v.parse::<f64>().map_err(|_| Error::Parse {
                        line: line_no,
                        message: format!("bad baseMVA value '{v}'"),
                    })?;
                    tables.base_mva = Some(parsed);
                }
                continue;
            }
        }

        let Some((name, close, rows)) = open.as_mut() else {
            continue;
        };
        let (body, closed) = match rest.find(*close) {
            Some(at) => (&rest[..at], true),
            None => (rest, false),
        };
        let numeric = matches!(name.as_str(), "bus" | "gen" | "branch");
        if numeric {
            for segment in body.split(';') {
                let segment = segment.trim().trim_end_matches("...");
                if segment.is_empty() {
                    continue;
                }
                let values = segment
                    .split(|c: char| c.is_whitespace() || c == ',')
                    .filter(|t| !t.is_empty())
                    .map(|t| {
                        t.parse::<f64>().map_err(|_| Error::Parse {
                            line: line_no,
                            message: format!("malformed number '{t}' in mpc.{name}"),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                rows.push(Row { line: line_no, values });
            }
        }
        if closed {
            let (name, _, rows) = open.take().expect("open block");
            match name.as_str() {
                "bus" => tables.bus = Some(rows),
                "gen" => tables.gen = Some(rows),
                "branch" => tables.branch = Some(rows),
                _ => {}
            }
        }
    }

    if let Some((name, _, _)) = open {
        return Err(Error::Parse {
            line: text.lines().count(),
            message: format!("unterminated mpc.{name} block"),
        });
    }
    Ok(tables)
}

fn strip_comment(line: &str) -> &str {
    let mut in_quote = false;
    for (i, c) in line.char_indices() {
        match c {
            '\'' => in_quote = !in_quote,
            '%' if !in_quote => return &line[..i],
            _ => {}
        }
    }
    line
}

fn require_cols(row: &Row, n: usize, table: &str) -> Result<()> {
    if row.values.len() < n {
        return Err(Error::Parse {
            line: row.line,
            message: format!("{table} row has {} columns, need at least {n}", row.values.len()),
        });
    }
    Ok(())
}

fn as_int(row: &Row, col: usize) -> Result<i64> {
    let v = row.values[col];
    if v.fract() != 0.0 || !v.is_finite() {
        return Err(Error::Parse {
            line: row.line,
            message: format!("expected an integer in column {}, got {v}", col + 1),
        });
    }
    Ok(v as i64)
}

fn as_id(row: &Row, col: usize) -> Result<u32> {
    let v = as_int(row, col)?;
    u32::try_from(v).ok().filter(|&v| v > 0).ok_or_else(|| Error::Parse {
        line: row.line,
        message: format!("bus number {v} out of range"),
    })
}
