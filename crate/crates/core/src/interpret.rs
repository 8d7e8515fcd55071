//! Plot-ready exports: attention heatmaps, feature correlation, residual
//! safety analysis and RUL degradation profiles.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cmapss_io::EngineTrajectory;
use crate::error::{Result, RulError};
use crate::loss_metrics::{accuracy_band, negative_fraction, regression_metrics, ACCURACY_BAND};
use crate::nn::{predict, ModelParams};
use crate::pipeline::{label_rul, WindowDataset};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub unit_id: u32,
    pub alpha: Vec<f64>,
    pub predicted_rul: f64,
    pub true_rul: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionExport {
    pub records: Vec<AttentionRecord>,
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

/// One inference pass over the test windows. `units` restricts the export
/// to the given engine ids (all engines when `None`).
pub fn attention_export(
    test: &WindowDataset,
    params: &ModelParams,
    units: Option<&[u32]>,
) -> Result<AttentionExport> {
    if test.n_features() != params.config.n_features {
        return Err(RulError::Shape(format!(
            "test windows have {} features, checkpoint expects {}",
            test.n_features(),
            params.config.n_features
        )));
    }
    let indices: Vec<usize> = match units {
        None => (0..test.len()).collect(),
        Some(ids) => ids
            .iter()
            .map(|id| {
                test.origins
                    .iter()
                    .position(|o| o.unit_id == *id)
                    .ok_or_else(|| unknown_unit(*id, test.origins.iter().map(|o| o.unit_id)))
            })
            .collect::<Result<_>>()?,
    };
    let subset = test.subset(&indices);
    let t = subset.window();
    let (pred, alpha) = predict(params, &subset.inputs, 256)?;
    let records: Vec<AttentionRecord> = (0..subset.len())
        .map(|i| AttentionRecord {
            unit_id: subset.origins[i].unit_id,
            alpha: alpha[i * t..(i + 1) * t].to_vec(),
            predicted_rul: pred[i],
            true_rul: subset.labels[i],
        })
        .collect();
    let mut header = vec!["unit".to_string()];
    header.extend((1..=t).map(|k| format!("t{k}")));
    header.extend(["predicted".to_string(), "true".to_string()]);
    let rows = records
        .iter()
        .map(|r| {
            let mut row = vec![r.unit_id as f64];
            row.extend(&r.alpha);
            row.extend([r.predicted_rul, r.true_rul]);
            row
        })
        .collect();
    Ok(AttentionExport {
        records,
        header,
        rows,
    })
}

fn unknown_unit(id: u32, valid: impl Iterator<Item = u32>) -> RulError {
    let valid: Vec<String> = valid.map(|u| u.to_string()).collect();
    RulError::Validation(format!(
        "unknown unit {id}; valid ids: {}",
        valid.join(",")
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    pub names: Vec<String>,
    /// Row-major `F x F`.
    pub values: Vec<f64>,
    /// Columns with zero variance. Their off-diagonal entries are set to 0.
    pub degenerate: Vec<usize>,
}

impl CorrelationMatrix {
    pub fn size(&self) -> usize {
        self.names.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size() + j]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.values.chunks(self.size()).map(<[f64]>::to_vec).collect()
    }
}

/// Pearson correlation between the columns of `rows`.
pub fn correlation_matrix(rows: &[Vec<f64>], names: &[String]) -> Result<CorrelationMatrix> {
    let f = names.len();
    if rows.len() < 2 {
        return Err(RulError::Validation("correlation needs at least 2 rows".into()));
    }
    if rows.iter().any(|r| r.len() != f) {
        return Err(RulError::Shape(format!("every row must have {f} features")));
    }
    let n = rows.len() as f64;
    let mut mean = vec![0.0; f];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = vec![0.0; f * f];
    let mut centered = vec![0.0; f];
    for r in rows {
        for j in 0..f {
            centered[j] = r[j] - mean[j];
        }
        for i in 0..f {
            for j in i..f {
                cov[i * f + j] += centered[i] * centered[j];
            }
        }
    }
    let degenerate: Vec<usize> = (0..f).filter(|&i| cov[i * f + i] <= 0.0).collect();
    let mut values = vec![0.0; f * f];
    for i in 0..f {
        values[i * f + i] = 1.0;
        for j in i + 1..f {
            let r = if degenerate.contains(&i) || degenerate.contains(&j) {
                0.0
            } else {
                (cov[i * f + j] / (cov[i * f + i].sqrt() * cov[j * f + j].sqrt())).clamp(-1.0, 1.0)
            };
            values[i * f + j] = r;
            values[j * f + i] = r;
        }
    }
    Ok(CorrelationMatrix {
        names: names.to_vec(),
        values,
        degenerate,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualSummary {
    pub n: usize,
    pub mean_error: f64,
    pub std_error: f64,
    pub rmse: f64,
    pub negative_fraction: f64,
    /// Engines with `ε > 0` (predicted life exceeds true life).
    pub over_estimation_count: usize,
    pub band: f64,
    pub band_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualRow {
    pub rank: usize,
    pub unit_id: u32,
    pub truth: f64,
    pub predicted: f64,
    pub error: f64,
}

impl ResidualRow {
    pub fn over_estimated(&self) -> bool {
        self.error > 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualReport {
    /// Sorted by `|ε|` ascending; ties keep input order.
    pub rows: Vec<ResidualRow>,
    pub summary: ResidualSummary,
}

impl ResidualReport {
    pub const COLUMNS: [&'static str; 6] = ["rank", "unit", "true", "predicted", "error", "over_estimated"];

    pub fn table_rows(&self) -> Vec<Vec<f64>> {
        self.rows
            .iter()
            .map(|r| {
                vec![
                    r.rank as f64,
                    r.unit_id as f64,
                    r.truth,
                    r.predicted,
                    r.error,
                    if r.over_estimated() { 1.0 } else { 0.0 },
                ]
            })
            .collect()
    }
}

pub fn residual_report(pred: &[f64], truth: &[f64], units: &[u32]) -> Result<ResidualReport> {
    if pred.len() != truth.len() || units.len() != pred.len() {
        return Err(RulError::Shape("predictions, targets and unit ids differ in length".into()));
    }
    let mut rows: Vec<ResidualRow> = pred
        .iter()
        .zip(truth)
        .zip(units)
        .map(|((p, y), u)| ResidualRow {
            rank: 0,
            unit_id: *u,
            truth: *y,
            predicted: *p,
            error: p - y,
        })
        .collect();
    rows.sort_by(|a, b| a.error.abs().total_cmp(&b.error.abs()));
    for (i, r) in rows.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    let n = pred.len();
    let (mean_error, std_error, rmse) = if n >= 2 {
        let m = regression_metrics(pred, truth)?;
        (m.mean_error, m.std_error, m.rmse)
    } else {
        let e = rows.first().map_or(0.0, |r| r.error);
        (e, 0.0, e.abs())
    };
    let summary = ResidualSummary {
        n,
        mean_error,
        std_error,
        rmse,
        negative_fraction: negative_fraction(pred, truth),
        over_estimation_count: rows.iter().filter(|r| r.over_estimated()).count(),
        band: ACCURACY_BAND,
        band_fraction: accuracy_band(pred, truth, ACCURACY_BAND)?,
    };
    Ok(ResidualReport { rows, summary })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RulProfiles {
    /// `(unit, cycle, label)` for the selected engines.
    pub per_engine: Vec<Vec<f64>>,
    /// `(cycle, label)` over every training cycle.
    pub global: Vec<Vec<f64>>,
}

impl RulProfiles {
    pub const ENGINE_COLUMNS: [&'static str; 3] = ["unit", "cycle", "rul"];
    pub const GLOBAL_COLUMNS: [&'static str; 2] = ["cycle", "rul"];
}

pub fn rul_profile_export(
    trajectories: &[EngineTrajectory],
    units: &[u32],
    max_rul: f64,
) -> Result<RulProfiles> {
    let by_id: BTreeMap<u32, &EngineTrajectory> = trajectories.iter().map(|t| (t.unit_id, t)).collect();
    let mut per_engine = Vec::new();
    for id in units {
        let traj = by_id
            .get(id)
            .ok_or_else(|| unknown_unit(*id, by_id.keys().copied()))?;
        for (rec, label) in traj.cycles.iter().zip(label_rul(traj, max_rul)) {
            per_engine.push(vec![*id as f64, rec.cycle as f64, label]);
        }
    }
    let global = trajectories
        .iter()
        .flat_map(|t| {
            t.cycles
                .iter()
                .zip(label_rul(t, max_rul))
                .map(|(rec, label)| vec![rec.cycle as f64, label])
        })
        .collect();
    Ok(RulProfiles { per_engine, global })
}
