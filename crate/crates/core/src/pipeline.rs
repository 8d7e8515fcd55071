//! Zero-leakage preprocessing: sensor selection, piecewise-linear RUL
//! labels, min-max scaling fitted on training data only, and sliding-window
//! tensorization.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cmapss_io::{EngineTrajectory, RulTruthTable, N_SENSORS, N_SETTINGS};
use crate::error::{Result, RulError};
use crate::tensor::Tensor;

pub const MAX_RUL: f64 = 130.0;
pub const WINDOW_LEN: usize = 30;
pub const TRAIN_STRIDE: usize = 3;
pub const DEFAULT_VARIANCE_THRESHOLD: f64 = 1e-8;
/// Constant channels of the FD001 training partition.
pub const FD001_CONSTANT_SENSORS: [usize; 7] = [1, 5, 6, 10, 16, 18, 19];

/// Which raw columns feed the model, in model input order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSelection {
    /// 1-based sensor indices that were dropped, ascending.
    pub dropped_sensors: Vec<usize>,
    /// `setting1..3` followed by retained sensors in ascending index.
    pub feature_names: Vec<String>,
}

impl FeatureSelection {
    pub fn from_dropped(mut dropped: Vec<usize>) -> Result<Self> {
        dropped.sort_unstable();
        dropped.dedup();
        if let Some(bad) = dropped.iter().find(|&&s| !(1..=N_SENSORS).contains(&s)) {
            return Err(RulError::Validation(format!(
                "sensor index {bad} outside 1..={N_SENSORS}"
            )));
        }
        let mut feature_names: Vec<String> =
            (1..=N_SETTINGS).map(|i| format!("setting{i}")).collect();
        feature_names.extend(
            (1..=N_SENSORS)
                .filter(|s| !dropped.contains(s))
                .map(|s| format!("s{s}")),
        );
        Ok(FeatureSelection {
            dropped_sensors: dropped,
            feature_names,
        })
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    fn retained_sensors(&self) -> impl Iterator<Item = usize> + '_ {
        (1..=N_SENSORS).filter(|s| !self.dropped_sensors.contains(s))
    }

    /// Raw feature rows (one per cycle) for a single engine.
    pub fn extract(&self, traj: &EngineTrajectory) -> Vec<Vec<f64>> {
        let sensors: Vec<usize> = self.retained_sensors().collect();
        traj.cycles
            .iter()
            .map(|c| {
                let mut row = c.settings.to_vec();
                row.extend(sensors.iter().map(|&s| c.sensors[s - 1]));
                row
            })
            .collect()
    }

    /// Raw feature rows of every cycle of every engine, concatenated.
    pub fn extract_all(&self, trajectories: &[EngineTrajectory]) -> Vec<Vec<f64>> {
        trajectories.iter().flat_map(|t| self.extract(t)).collect()
    }
}

/// Drops every sensor whose range over the whole corpus is at most
/// `variance_threshold`, or exactly the `override_drop` list when given.
pub fn select_sensors(
    trajectories: &[EngineTrajectory],
    variance_threshold: f64,
    override_drop: Option<&[usize]>,
) -> Result<FeatureSelection> {
    if let Some(list) = override_drop {
        return FeatureSelection::from_dropped(list.to_vec());
    }
    if trajectories.iter().all(|t| t.cycles.is_empty()) {
        return Err(RulError::Validation("empty corpus".into()));
    }
    let mut lo = [f64::INFINITY; N_SENSORS];
    let mut hi = [f64::NEG_INFINITY; N_SENSORS];
    for rec in trajectories.iter().flat_map(|t| &t.cycles) {
        for (s, &v) in rec.sensors.iter().enumerate() {
            lo[s] = lo[s].min(v);
            hi[s] = hi[s].max(v);
        }
    }
    let dropped = (0..N_SENSORS)
        .filter(|&s| hi[s] - lo[s] <= variance_threshold)
        .map(|s| s + 1)
        .collect();
    FeatureSelection::from_dropped(dropped)
}

/// Piecewise-linear label for every cycle: `min(max_cycle - t, max_rul)`.
pub fn label_rul(traj: &EngineTrajectory, max_rul: f64) -> Vec<f64> {
    let max_cycle = traj.max_cycle() as f64;
    traj.cycles
        .iter()
        .map(|c| (max_cycle - c.cycle as f64).min(max_rul))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub constant: Vec<bool>,
}

pub fn fit_scaler(rows: &[Vec<f64>]) -> Result<ScalerParams> {
    let first = rows
        .first()
        .ok_or_else(|| RulError::Validation("cannot fit scaler on zero rows".into()))?;
    let n = first.len();
    let mut min = vec![f64::INFINITY; n];
    let mut max = vec![f64::NEG_INFINITY; n];
    for (r, row) in rows.iter().enumerate() {
        if row.len() != n {
            return Err(RulError::Shape(format!("row {r} has {} features, expected {n}", row.len())));
        }
        for (j, &v) in row.iter().enumerate() {
            if v.is_nan() {
                return Err(RulError::Validation(format!("NaN at row {r}, feature {j}")));
            }
            min[j] = min[j].min(v);
            max[j] = max[j].max(v);
        }
    }
    let constant = min.iter().zip(&max).map(|(a, b)| a == b).collect();
    Ok(ScalerParams { min, max, constant })
}

impl ScalerParams {
    pub fn n_features(&self) -> usize {
        self.min.len()
    }

    /// Scales one row in place. Values outside the fitted range are not clipped;
    /// constant features map to 0.
    pub fn transform_row(&self, row: &mut [f64]) -> Result<()> {
        if row.len() != self.n_features() {
            return Err(RulError::Shape(format!(
                "row has {} features, scaler was fitted on {}",
                row.len(),
                self.n_features()
            )));
        }
        for (j, v) in row.iter_mut().enumerate() {
            *v = if self.constant[j] {
                0.0
            } else {
                (*v - self.min[j]) / (self.max[j] - self.min[j])
            };
        }
        Ok(())
    }
}

pub fn transform(rows: &[Vec<f64>], scaler: &ScalerParams) -> Result<Vec<Vec<f64>>> {
    rows.iter()
        .map(|r| {
            let mut r = r.clone();
            scaler.transform_row(&mut r)?;
            Ok(r)
        })
        .collect()
}

/// Origin of one window: the engine and the cycle its last row belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowOrigin {
    pub unit_id: u32,
    pub end_cycle: u32,
}

/// `N` windows of shape `(T, F)` with scalar RUL labels.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowDataset {
    pub inputs: Tensor,
    pub labels: Vec<f64>,
    pub origins: Vec<WindowOrigin>,
}

impl WindowDataset {
    pub fn empty(window: usize, n_features: usize) -> Self {
        WindowDataset {
            inputs: Tensor::zeros(&[0, window, n_features]),
            labels: Vec::new(),
            origins: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn window(&self) -> usize {
        self.inputs.dim(1)
    }

    pub fn n_features(&self) -> usize {
        self.inputs.dim(2)
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let stride = self.window() * self.n_features();
        &self.inputs.data()[i * stride..(i + 1) * stride]
    }

    /// Gathers the given windows, in order, into a new dataset.
    pub fn subset(&self, indices: &[usize]) -> WindowDataset {
        let stride = self.window() * self.n_features();
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        WindowDataset {
            inputs: Tensor::from_vec(&[indices.len(), self.window(), self.n_features()], data)
                .expect("consistent subset shape"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            origins: indices.iter().map(|&i| self.origins[i]).collect(),
        }
    }
}

/// Number of windows of length `window` at `stride` over `len` cycles.
pub fn window_count(len: usize, window: usize, stride: usize) -> usize {
    if len < window || window == 0 || stride == 0 {
        0
    } else {
        (len - window) / stride + 1
    }
}

pub fn make_train_windows(
    trajectories: &[EngineTrajectory],
    selection: &FeatureSelection,
    scaler: &ScalerParams,
    window: usize,
    stride: usize,
    max_rul: f64,
) -> Result<WindowDataset> {
    if window == 0 || stride == 0 {
        return Err(RulError::Validation("window and stride must be positive".into()));
    }
    let f = selection.n_features();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut origins = Vec::new();
    for traj in trajectories {
        let count = window_count(traj.len(), window, stride);
        if count == 0 {
            continue;
        }
        let scaled = transform(&selection.extract(traj), scaler)?;
        let rul = label_rul(traj, max_rul);
        for k in 0..count {
            let start = k * stride;
            let end = start + window - 1;
            for row in &scaled[start..=end] {
                data.extend_from_slice(row);
            }
            labels.push(rul[end]);
            origins.push(WindowOrigin {
                unit_id: traj.unit_id,
                end_cycle: traj.cycles[end].cycle,
            });
        }
    }
    let n = labels.len();
    Ok(WindowDataset {
        inputs: Tensor::from_vec(&[n, window, f], data)?,
        labels,
        origins,
    })
}

/// One window per engine: its last `window` scaled cycles, left-padded with
/// zero rows when the engine is shorter. Labels come from the truth table,
/// capped at `max_rul`.
pub fn make_test_windows(
    trajectories: &[EngineTrajectory],
    truth: &RulTruthTable,
    selection: &FeatureSelection,
    scaler: &ScalerParams,
    window: usize,
    max_rul: f64,
) -> Result<WindowDataset> {
    if truth.len() != trajectories.len() {
        return Err(RulError::Validation(format!(
            "truth table has {} entries for {} test engines",
            truth.len(),
            trajectories.len()
        )));
    }
    let f = selection.n_features();
    let mut data = Vec::with_capacity(trajectories.len() * window * f);
    let mut labels = Vec::with_capacity(trajectories.len());
    let mut origins = Vec::with_capacity(trajectories.len());
    for (traj, &rul) in trajectories.iter().zip(&truth.terminal_rul) {
        let scaled = transform(&selection.extract(traj), scaler)?;
        let keep = scaled.len().min(window);
        data.extend(std::iter::repeat_n(0.0, (window - keep) * f));
        for row in &scaled[scaled.len() - keep..] {
            data.extend_from_slice(row);
        }
        labels.push((rul as f64).min(max_rul));
        origins.push(WindowOrigin {
            unit_id: traj.unit_id,
            end_cycle: traj.max_cycle(),
        });
    }
    let n = labels.len();
    Ok(WindowDataset {
        inputs: Tensor::from_vec(&[n, window, f], data)?,
        labels,
        origins,
    })
}

/// Everything needed to reproduce a preprocessing run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessMeta {
    pub selection: FeatureSelection,
    pub scaler: ScalerParams,
    pub window: usize,
    pub stride: usize,
    pub max_rul: f64,
    pub train_shape: [usize; 3],
    pub test_shape: [usize; 3],
}

impl PreprocessMeta {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("metadata serializes");
        fs::write(path, text + "\n").map_err(|e| RulError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| RulError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| RulError::format(path, e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessOptions {
    pub variance_threshold: f64,
    /// Explicit 1-based sensors to drop instead of the range scan.
    pub drop_sensors: Option<Vec<usize>>,
    pub window: usize,
    pub stride: usize,
    pub max_rul: f64,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        PreprocessOptions {
            variance_threshold: DEFAULT_VARIANCE_THRESHOLD,
            drop_sensors: None,
            window: WINDOW_LEN,
            stride: TRAIN_STRIDE,
            max_rul: MAX_RUL,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub meta: PreprocessMeta,
    pub train: WindowDataset,
    pub test: WindowDataset,
}

/// Selection and scaling are fitted on `train` alone; `test` only passes
/// through the fitted transforms.
pub fn preprocess(
    train: &[EngineTrajectory],
    test: &[EngineTrajectory],
    truth: &RulTruthTable,
    options: &PreprocessOptions,
) -> Result<Preprocessed> {
    if options.max_rul.is_nan() || options.max_rul <= 0.0 {
        return Err(RulError::Validation("max_rul must be positive".into()));
    }
    let selection = select_sensors(train, options.variance_threshold, options.drop_sensors.as_deref())?;
    let scaler = fit_scaler(&selection.extract_all(train))?;
    let train_ds = make_train_windows(train, &selection, &scaler, options.window, options.stride, options.max_rul)?;
    if train_ds.is_empty() {
        return Err(RulError::Validation(format!(
            "no training engine has at least {} cycles",
            options.window
        )));
    }
    let test_ds = make_test_windows(test, truth, &selection, &scaler, options.window, options.max_rul)?;
    let shape = |ds: &WindowDataset| [ds.len(), options.window, selection.n_features()];
    let meta = PreprocessMeta {
        train_shape: shape(&train_ds),
        test_shape: shape(&test_ds),
        selection,
        scaler,
        window: options.window,
        stride: options.stride,
        max_rul: options.max_rul,
    };
    Ok(Preprocessed {
        meta,
        train: train_ds,
        test: test_ds,
    })
}

const WINDOW_MAGIC: &[u8; 8] = b"RULWIN01";

/// Binary window container, all integers and floats little-endian:
///
/// ```text
/// magic   8 bytes  "RULWIN01"
/// n, T, F 3 x u64
/// inputs  n*T*F x f64   row-major (sample, time, feature)
/// labels  n x f64
/// origins n x (u32 unit_id, u32 end_cycle)
/// ```
pub fn save_windows(path: impl AsRef<Path>, ds: &WindowDataset) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| RulError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| RulError::io(path, e);
    w.write_all(WINDOW_MAGIC).map_err(io)?;
    for d in ds.inputs.shape() {
        w.write_all(&(*d as u64).to_le_bytes()).map_err(io)?;
    }
    for v in ds.inputs.data().iter().chain(&ds.labels) {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    for o in &ds.origins {
        w.write_all(&o.unit_id.to_le_bytes()).map_err(io)?;
        w.write_all(&o.end_cycle.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn load_windows(path: impl AsRef<Path>) -> Result<WindowDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| RulError::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| RulError::io(path, e))?;
    let bad = |m: &str| RulError::format(path, m);
    if bytes.len() < 32 || &bytes[..8] != WINDOW_MAGIC {
        return Err(bad("bad magic"));
    }
    let dim = |i: usize| u64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().unwrap()) as usize;
    let (n, t, f) = (dim(0), dim(1), dim(2));
    let n_in = n
        .checked_mul(t)
        .and_then(|v| v.checked_mul(f))
        .ok_or_else(|| bad("dimension overflow"))?;
    let expected = 32 + 8 * (n_in + n) + 8 * n;
    if bytes.len() != expected {
        return Err(bad("length does not match header"));
    }
    let floats: Vec<f64> = bytes[32..32 + 8 * (n_in + n)]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let origins = bytes[32 + 8 * (n_in + n)..]
        .chunks_exact(8)
        .map(|c| WindowOrigin {
            unit_id: u32::from_le_bytes(c[..4].try_into().unwrap()),
            end_cycle: u32::from_le_bytes(c[4..].try_into().unwrap()),
        })
        .collect();
    let (inputs, labels) = floats.split_at(n_in);
    Ok(WindowDataset {
        inputs: Tensor::from_vec(&[n, t, f], inputs.to_vec())?,
        labels: labels.to_vec(),
        origins,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmapss_io::CycleRecord;
    use proptest::prelude::*;

    fn engine(unit_id: u32, len: u32) -> EngineTrajectory {
        EngineTrajectory {
            unit_id,
            cycles: (1..=len)
                .map(|c| {
                    let mut sensors = [7.0; N_SENSORS];
                    sensors[1] = c as f64;
                    sensors[2] = -(c as f64) * 0.5 + unit_id as f64;
                    CycleRecord {
                        cycle: c,
                        settings: [0.1 * unit_id as f64, c as f64 * 1e-3, 100.0],
                        sensors,
                    }
                })
                .collect(),
        }
    }

    #[test]
    fn label_examples() {
        let e = engine(1, 200);
        let labels = label_rul(&e, MAX_RUL);
        assert_eq!(labels[9], 130.0);
        assert_eq!(labels[199], 0.0);
        let e = engine(1, 192);
        assert_eq!(label_rul(&e, MAX_RUL)[61], 130.0);
        assert_eq!(label_rul(&e, MAX_RUL)[62], 129.0);
    }

    #[test]
    fn selection_drops_constant_sensors_only() {
        let sel = select_sensors(&[engine(1, 40), engine(2, 35)], DEFAULT_VARIANCE_THRESHOLD, None).unwrap();
        assert_eq!(sel.dropped_sensors.len(), 19);
        assert_eq!(sel.feature_names, ["setting1", "setting2", "setting3", "s2", "s3"]);
        let sel = select_sensors(&[engine(1, 4)], 0.0, Some(&FD001_CONSTANT_SENSORS)).unwrap();
        assert_eq!(sel.n_features(), 17);
        assert!(select_sensors(&[engine(1, 4)], 0.0, Some(&[0])).is_err());
        assert!(select_sensors(&[engine(1, 4)], 0.0, Some(&[22])).is_err());
        assert!(select_sensors(&[], 0.0, None).is_err());
    }

    #[test]
    fn selection_keeps_everything_when_all_vary() {
        let mut e = engine(1, 10);
        for (k, c) in e.cycles.iter_mut().enumerate() {
            for (s, v) in c.sensors.iter_mut().enumerate() {
                *v = (k * (s + 1)) as f64;
            }
        }
        let sel = select_sensors(&[e], DEFAULT_VARIANCE_THRESHOLD, None).unwrap();
        assert!(sel.dropped_sensors.is_empty());
        assert_eq!(sel.n_features(), 24);
    }

    #[test]
    fn scaler_examples() {
        let s = fit_scaler(&[vec![0.0, 5.0], vec![10.0, 5.0]]).unwrap();
        assert_eq!((s.min[0], s.max[0]), (0.0, 10.0));
        assert_eq!(s.constant, [false, true]);
        let out = transform(&[vec![5.0, 123.0], vec![12.0, -4.0]], &s).unwrap();
        assert_eq!(out, [vec![0.5, 0.0], vec![1.2, 0.0]]);
        assert!(transform(&[vec![1.0]], &s).is_err());
        assert!(fit_scaler(&[vec![f64::NAN]]).is_err());
        assert!(fit_scaler(&[]).is_err());
    }

    #[test]
    fn train_window_examples() {
        let sel = FeatureSelection::from_dropped(FD001_CONSTANT_SENSORS.to_vec()).unwrap();
        let trajs = [engine(1, 90), engine(2, 30), engine(3, 29)];
        let scaler = fit_scaler(&sel.extract_all(&trajs)).unwrap();
        let ds = make_train_windows(&trajs, &sel, &scaler, 30, 3, MAX_RUL).unwrap();
        assert_eq!(ds.len(), 22);
        assert_eq!(ds.inputs.shape(), &[22, 30, 17]);
        let ends: Vec<u32> = ds.origins.iter().filter(|o| o.unit_id == 1).map(|o| o.end_cycle).collect();
        assert_eq!(ends.first(), Some(&30));
        assert_eq!(ends.last(), Some(&90));
        assert_eq!(ds.labels[0], 60.0);
        assert_eq!(ds.origins[21], WindowOrigin { unit_id: 2, end_cycle: 30 });
        assert_eq!(ds.labels[21], 0.0);
        // Window contents follow the scaled trajectory rows.
        let scaled = transform(&sel.extract(&trajs[0]), &scaler).unwrap();
        assert_eq!(&ds.sample(1)[..17], scaled[3].as_slice());
    }

    #[test]
    fn test_windows_pad_and_cap() {
        let sel = FeatureSelection::from_dropped(FD001_CONSTANT_SENSORS.to_vec()).unwrap();
        let train = [engine(1, 60)];
        let scaler = fit_scaler(&sel.extract_all(&train)).unwrap();
        let test = [engine(1, 25), engine(2, 40)];
        let truth = RulTruthTable { terminal_rul: vec![145, 12] };
        let ds = make_test_windows(&test, &truth, &sel, &scaler, 30, MAX_RUL).unwrap();
        assert_eq!(ds.inputs.shape(), &[2, 30, 17]);
        assert_eq!(ds.labels, [130.0, 12.0]);
        let w = ds.sample(0);
        assert!(w[..5 * 17].iter().all(|&v| v == 0.0));
        assert!(w[5 * 17..6 * 17].iter().any(|&v| v != 0.0));
        let short = RulTruthTable { terminal_rul: vec![1] };
        assert!(make_test_windows(&test, &short, &sel, &scaler, 30, MAX_RUL).is_err());
    }

    #[test]
    fn window_container_round_trip() {
        let sel = FeatureSelection::from_dropped(vec![]).unwrap();
        let trajs = [engine(5, 40)];
        let scaler = fit_scaler(&sel.extract_all(&trajs)).unwrap();
        let ds = make_train_windows(&trajs, &sel, &scaler, 30, 4, MAX_RUL).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.bin");
        save_windows(&p, &ds).unwrap();
        assert_eq!(load_windows(&p).unwrap(), ds);
        std::fs::write(&p, b"nope").unwrap();
        assert!(load_windows(&p).is_err());
    }

    proptest! {
        #[test]
        fn window_count_matches_enumeration(len in 0usize..200, window in 1usize..40, stride in 1usize..10) {
            let brute = (0..len).step_by(stride).filter(|&s| s + window <= len).count();
            prop_assert_eq!(window_count(len, window, stride), brute);
        }

        #[test]
        fn labels_bounded_and_non_increasing(len in 1u32..400) {
            let labels = label_rul(&engine(1, len), MAX_RUL);
            prop_assert!(labels.iter().all(|&l| (0.0..=MAX_RUL).contains(&l)));
            prop_assert!(labels.windows(2).all(|w| w[1] <= w[0]));
            prop_assert_eq!(*labels.last().unwrap(), 0.0);
        }
    }
}
