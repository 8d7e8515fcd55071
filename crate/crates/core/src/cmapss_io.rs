//! Reading C-MAPSS text files and writing comma-separated result tables.
//!
//! A trajectory file has one engine cycle per line with 26 whitespace
//! separated columns: unit, cycle, three operational settings and the 21
//! sensor channels `s1..s21`. The companion truth file holds one
//! non-negative integer per line, the terminal RUL of each test engine.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Result, RulError};

pub const N_SETTINGS: usize = 3;
pub const N_SENSORS: usize = 21;
pub const N_COLUMNS: usize = 2 + N_SETTINGS + N_SENSORS;

#[derive(Debug, Clone, PartialEq)]
pub struct CycleRecord {
    pub cycle: u32,
    pub settings: [f64; N_SETTINGS],
    pub sensors: [f64; N_SENSORS],
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineTrajectory {
    pub unit_id: u32,
    pub cycles: Vec<CycleRecord>,
}

impl EngineTrajectory {
    pub fn len(&self) -> usize {
        self.cycles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cycles.is_empty()
    }

    /// Final (maximum) cycle index.
    pub fn max_cycle(&self) -> u32 {
        self.cycles.last().map_or(0, |c| c.cycle)
    }

    /// Checks that cycles run 1, 2, 3, ... without gaps and every value is finite.
    pub fn validate(&self) -> Result<()> {
        for (i, rec) in self.cycles.iter().enumerate() {
            let expected = i as u32 + 1;
            if rec.cycle != expected {
                return Err(RulError::Integrity {
                    unit: self.unit_id,
                    message: format!(
                        "cycles are not contiguous from 1: expected {expected}, found {}",
                        rec.cycle
                    ),
                });
            }
            if !rec.settings.iter().chain(&rec.sensors).all(|v| v.is_finite()) {
                return Err(RulError::Integrity {
                    unit: self.unit_id,
                    message: format!("non-finite value at cycle {}", rec.cycle),
                });
            }
        }
        Ok(())
    }
}

/// Terminal RUL per test engine; index `i` belongs to the `i`-th test engine.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RulTruthTable {
    pub terminal_rul: Vec<u32>,
}

impl RulTruthTable {
    pub fn len(&self) -> usize {
        self.terminal_rul.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terminal_rul.is_empty()
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| RulError::io(path, e))
}

/// Parses a trajectory file. Units come back in ascending id order with
/// their cycles sorted.
pub fn parse_trajectories(path: impl AsRef<Path>) -> Result<Vec<EngineTrajectory>> {
    let path = path.as_ref();
    parse_trajectories_str(&read_text(path)?, path)
}

pub(crate) fn parse_trajectories_str(text: &str, path: &Path) -> Result<Vec<EngineTrajectory>> {
    let mut units: BTreeMap<u32, Vec<CycleRecord>> = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let parse_err = |message: String| RulError::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        if fields.len() != N_COLUMNS {
            return Err(parse_err(format!(
                "expected {N_COLUMNS} columns, found {}",
                fields.len()
            )));
        }
        let mut values = [0.0f64; N_COLUMNS];
        for (slot, tok) in values.iter_mut().zip(&fields) {
            *slot = tok
                .parse::<f64>()
                .map_err(|_| parse_err(format!("invalid number {tok:?}")))?;
            if !slot.is_finite() {
                return Err(parse_err(format!("non-finite value {tok:?}")));
            }
        }
        let unit = as_positive_int(values[0]).ok_or_else(|| parse_err("invalid unit id".into()))?;
        let cycle =
            as_positive_int(values[1]).ok_or_else(|| parse_err("invalid cycle index".into()))?;
        let mut settings = [0.0; N_SETTINGS];
        settings.copy_from_slice(&values[2..2 + N_SETTINGS]);
        let mut sensors = [0.0; N_SENSORS];
        sensors.copy_from_slice(&values[2 + N_SETTINGS..]);
        units.entry(unit).or_default().push(CycleRecord {
            cycle,
            settings,
            sensors,
        });
    }

    units
        .into_iter()
        .map(|(unit_id, mut cycles)| {
            cycles.sort_by_key(|c| c.cycle);
            let traj = EngineTrajectory { unit_id, cycles };
            traj.validate()?;
            Ok(traj)
        })
        .collect()
}

fn as_positive_int(v: f64) -> Option<u32> {
    (v >= 1.0 && v.fract() == 0.0 && v <= u32::MAX as f64).then_some(v as u32)
}

pub fn parse_rul_truth(path: impl AsRef<Path>) -> Result<RulTruthTable> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let mut terminal_rul = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let tok = line.trim();
        if tok.is_empty() {
            continue;
        }
        let value: i64 = tok.parse().map_err(|_| RulError::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: format!("expected an integer, found {tok:?}"),
        })?;
        if value < 0 {
            return Err(RulError::Validation(format!(
                "{}: line {}: negative RUL {value}",
                path.display(),
                idx + 1
            )));
        }
        terminal_rul.push(value as u32);
    }
    Ok(RulTruthTable { terminal_rul })
}

/// Writes trajectories back in the C-MAPSS text layout.
pub fn write_trajectories(path: impl AsRef<Path>, trajectories: &[EngineTrajectory]) -> Result<()> {
    let mut out = String::new();
    for traj in trajectories {
        for rec in &traj.cycles {
            let _ = write!(out, "{} {}", traj.unit_id, rec.cycle);
            for v in rec.settings.iter().chain(&rec.sensors) {
                let _ = write!(out, " {v}");
            }
            out.push('\n');
        }
    }
    let path = path.as_ref();
    fs::write(path, out).map_err(|e| RulError::io(path, e))
}

pub fn write_rul_truth(path: impl AsRef<Path>, truth: &RulTruthTable) -> Result<()> {
    let out: String = truth.terminal_rul.iter().map(|v| format!("{v}\n")).collect();
    let path = path.as_ref();
    fs::write(path, out).map_err(|e| RulError::io(path, e))
}

/// Header plus numeric rows, as produced by [`write_table`] and read back by
/// [`read_table`].
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

/// Writes a comma-separated table. Floats use the shortest representation
/// that parses back to the identical value.
pub fn write_table<S: AsRef<str>>(
    path: impl AsRef<Path>,
    header: &[S],
    rows: &[Vec<f64>],
) -> Result<()> {
    let path = path.as_ref();
    let text = format_table(header, rows)?;
    fs::write(path, text).map_err(|e| RulError::io(path, e))
}

pub fn format_table<S: AsRef<str>>(header: &[S], rows: &[Vec<f64>]) -> Result<String> {
    let mut out = String::new();
    for (i, name) in header.iter().enumerate() {
        let name = name.as_ref();
        if name.contains([',', '\n', '\r']) {
            return Err(RulError::Validation(format!(
                "column name {name:?} contains a delimiter"
            )));
        }
        if i > 0 {
            out.push(',');
        }
        out.push_str(name);
    }
    out.push('\n');
    for (r, row) in rows.iter().enumerate() {
        if row.len() != header.len() {
            return Err(RulError::Shape(format!(
                "row {r} has {} values, header has {}",
                row.len(),
                header.len()
            )));
        }
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn read_table(path: impl AsRef<Path>) -> Result<Table> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let mut lines = text.lines().enumerate();
    let header: Vec<String> = match lines.next() {
        Some((_, line)) => line.trim_end().split(',').map(str::to_owned).collect(),
        None => return Err(RulError::format(path, "missing header line")),
    };
    let mut rows = Vec::new();
    for (idx, line) in lines {
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|tok| {
                tok.parse::<f64>().map_err(|_| RulError::Parse {
                    path: path.to_path_buf(),
                    line: idx + 1,
                    message: format!("invalid number {tok:?}"),
                })
            })
            .collect::<Result<_>>()?;
        if row.len() != header.len() {
            return Err(RulError::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                message: format!("expected {} fields, found {}", header.len(), row.len()),
            });
        }
        rows.push(row);
    }
    Ok(Table { header, rows })
}
