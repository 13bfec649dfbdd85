//! Forward prediction, backward retrodiction and smoothing of outcome
//! probabilities along a record.

use std::io::{Read, Write};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, TrajectoryRecord};
use crate::error::{Error, FormatError, Result};
use crate::nn::{predict_batch, Conditioning, Direction, RnnModel, CONDITIONING_WIDTH};
use crate::qubit::Axis;

/// Probabilities are kept strictly inside `(0, 1)` by this margin.
pub const PROB_EPS: f64 = 1e-12;

/// Outcome probabilities `P_X, P_Y, P_Z` of `y = 1` at each bin boundary,
/// `t = 0 ..= step_count`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSeries {
    /// Bin width in μs.
    pub dt: f64,
    pub probs: Vec<[f64; 3]>,
}

impl PredictionSeries {
    pub fn new(dt: f64, probs: Vec<[f64; 3]>) -> Self {
        let probs = probs.into_iter().map(|p| p.map(clamp_prob)).collect();
        PredictionSeries { dt, probs }
    }

    /// From Bloch vectors via the Born rule `P = (r + 1) / 2`.
    pub fn from_bloch(dt: f64, states: &[[f64; 3]]) -> Self {
        let probs = states.iter().map(|v| v.map(|r| (r + 1.0) / 2.0)).collect();
        PredictionSeries::new(dt, probs)
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn step_count(&self) -> usize {
        self.probs.len().saturating_sub(1)
    }

    pub fn time(&self, t: usize) -> f64 {
        t as f64 * self.dt
    }

    /// Bloch coordinates `2P - 1`.
    pub fn bloch(&self) -> Vec<[f64; 3]> {
        self.probs.iter().map(|p| p.map(|q| 2.0 * q - 1.0)).collect()
    }
}

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Logistic function, stable for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Combines one forward and one backward probability:
/// `P⇐P⇒ / (P⇐P⇒ + (1-P⇐)(1-P⇒))`, evaluated as a sum of log-odds.
pub fn smooth_pair(forward: f64, backward: f64) -> f64 {
    clamp_prob(sigmoid(logit(clamp_prob(forward)) + logit(clamp_prob(backward))))
}

/// Per-axis smoothing of two aligned series.
pub fn smooth(forward: &PredictionSeries, backward: &PredictionSeries) -> Result<PredictionSeries> {
    if forward.len() != backward.len() {
        return Err(Error::invalid(format!(
            "series lengths differ: forward {}, backward {}",
            forward.len(),
            backward.len()
        )));
    }
    let probs = forward
        .probs
        .iter()
        .zip(&backward.probs)
        .map(|(f, b)| [smooth_pair(f[0], b[0]), smooth_pair(f[1], b[1]), smooth_pair(f[2], b[2])])
        .collect();
    Ok(PredictionSeries { dt: forward.dt, probs })
}

fn require_direction(model: &RnnModel, wanted: Direction) -> Result<()> {
    if model.direction != wanted {
        return Err(Error::invalid(format!("expected a {wanted} model, got a {} model", model.direction)));
    }
    Ok(())
}

/// `P(y_t | prep, V_0 .. V_t)` for every bin boundary of the record.
pub fn predict_forward(model: &RnnModel, voltages: &[f32], prep: Conditioning, dt: f64) -> Result<PredictionSeries> {
    require_direction(model, Direction::Forward)?;
    let x: Vec<f64> = voltages.iter().map(|&v| model.norm.apply(v)).collect();
    let trace = crate::nn::forward(model, &x, prep, None)?;
    Ok(PredictionSeries::new(dt, trace.probs))
}

/// `P(y_t | meas, V_T .. V_t)`, returned in forward time order.
pub fn predict_backward(model: &RnnModel, voltages: &[f32], meas: Conditioning, dt: f64) -> Result<PredictionSeries> {
    require_direction(model, Direction::Backward)?;
    let x: Vec<f64> = voltages.iter().rev().map(|&v| model.norm.apply(v)).collect();
    let mut probs = crate::nn::forward(model, &x, meas, None)?.probs;
    probs.reverse();
    Ok(PredictionSeries::new(dt, probs))
}

/// Which conditioning the network gets for each record of a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditionMode {
    /// The record's own label: preparation for forward models, final
    /// outcome for backward models.
    Labeled,
    Unknown,
}

const PREDICT_CHUNK: usize = 512;

/// Predictions for every record of `dataset`, in record order. Records are
/// grouped by length and evaluated in parallel batches.
pub fn predict_dataset(
    model: &RnnModel,
    dataset: &Dataset,
    mode: ConditionMode,
    dt: f64,
) -> Result<Vec<PredictionSeries>> {
    let mut by_len: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, r) in dataset.records.iter().enumerate() {
        by_len.entry(r.step_count()).or_default().push(i);
    }
    let chunks: Vec<&[usize]> = by_len.values().flat_map(|idx| idx.chunks(PREDICT_CHUNK)).collect();
    let results: Vec<Result<Vec<(usize, PredictionSeries)>>> =
        chunks.par_iter().map(|idx| predict_chunk(model, &dataset.records, idx, mode, dt)).collect();
    let mut out: Vec<Option<PredictionSeries>> = vec![None; dataset.len()];
    for r in results {
        for (i, series) in r? {
            out[i] = Some(series);
        }
    }
    Ok(out.into_iter().map(|s| s.expect("every record predicted")).collect())
}

fn predict_chunk(
    model: &RnnModel,
    records: &[TrajectoryRecord],
    idx: &[usize],
    mode: ConditionMode,
    dt: f64,
) -> Result<Vec<(usize, PredictionSeries)>> {
    let l = records[idx[0]].step_count();
    let backward = model.direction == Direction::Backward;
    let mut x = Array2::zeros((idx.len(), l));
    let mut cond = Array2::zeros((idx.len(), CONDITIONING_WIDTH));
    for (row, &i) in idx.iter().enumerate() {
        let r = &records[i];
        for (t, &v) in r.voltages.iter().enumerate() {
            let col = if backward { l - 1 - t } else { t };
            x[[row, col]] = model.norm.apply(v);
        }
        let c = match mode {
            ConditionMode::Unknown => Conditioning::Unknown,
            ConditionMode::Labeled if backward => Conditioning::Known(r.meas),
            ConditionMode::Labeled => Conditioning::Known(r.prep),
        };
        for (k, v) in c.vector().into_iter().enumerate() {
            cond[[row, k]] = v;
        }
    }
    let probs = predict_batch(model, &x, &cond)?;
    Ok(idx
        .iter()
        .zip(probs)
        .map(|(&i, mut p)| {
            if backward {
                p.reverse();
            }
            (i, PredictionSeries::new(dt, p))
        })
        .collect())
}

/// One line of a prediction CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub record_id: u64,
    pub t_us: f64,
    pub axis: Axis,
    pub p_forward: Option<f64>,
    pub p_backward: Option<f64>,
    pub p_smoothed: Option<f64>,
}

pub const PREDICTION_HEADER: [&str; 6] = ["record_id", "t_us", "axis", "p_forward", "p_backward", "p_smoothed"];

/// Flattens per-record series into rows, three per time step. Any of the
/// three columns may be absent; all supplied series must share lengths.
pub fn prediction_rows(
    forward: Option<&[PredictionSeries]>,
    backward: Option<&[PredictionSeries]>,
) -> Result<Vec<PredictionRow>> {
    let n = forward.or(backward).map_or(0, |s| s.len());
    if let (Some(f), Some(b)) = (forward, backward) {
        if f.len() != b.len() {
            return Err(Error::invalid("forward and backward record counts differ"));
        }
    }
    let mut rows = Vec::new();
    for i in 0..n {
        let f = forward.map(|s| &s[i]);
        let b = backward.map(|s| &s[i]);
        let smoothed = match (f, b) {
            (Some(f), Some(b)) => Some(smooth(f, b)?),
            _ => None,
        };
        let base = f.or(b).expect("at least one series");
        for t in 0..base.len() {
            for axis in Axis::ALL {
                let k = axis.index();
                rows.push(PredictionRow {
                    record_id: i as u64,
                    t_us: base.time(t),
                    axis,
                    p_forward: f.map(|s| s.probs[t][k]),
                    p_backward: b.map(|s| s.probs[t][k]),
                    p_smoothed: smoothed.as_ref().map(|s| s.probs[t][k]),
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_predictions_csv<W: Write>(writer: W, rows: &[PredictionRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a prediction CSV; probabilities must lie in `[0, 1]`.
pub fn read_predictions_csv<R: Read>(reader: R) -> Result<Vec<PredictionRow>> {
    let mut r = csv::Reader::from_reader(reader);
    let headers = r.headers().map_err(csv_error)?.clone();
    if headers.iter().ne(PREDICTION_HEADER) {
        return Err(FormatError::Manifest(format!("unexpected prediction header {headers:?}")).into());
    }
    let mut rows = Vec::new();
    for (index, row) in r.deserialize::<PredictionRow>().enumerate() {
        let row = row.map_err(|e| FormatError::Record { index, reason: e.to_string() })?;
        let probs = [row.p_forward, row.p_backward, row.p_smoothed];
        if !row.t_us.is_finite() || probs.iter().flatten().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(FormatError::Record { index, reason: "value out of range".into() }.into());
        }
        rows.push(row);
    }
    Ok(rows)
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => FormatError::Manifest(format!("{other:?}")).into(),
    }
}

/// Regroups rows into per-record series of one column.
pub fn series_from_rows(
    rows: &[PredictionRow],
    column: impl Fn(&PredictionRow) -> Option<f64>,
) -> Result<Vec<PredictionSeries>> {
    let mut grouped: std::collections::BTreeMap<u64, Vec<&PredictionRow>> = Default::default();
    for row in rows {
        grouped.entry(row.record_id).or_default().push(row);
    }
    let mut out = Vec::with_capacity(grouped.len());
    for (id, group) in grouped {
        if group.len() % 3 != 0 {
            return Err(Error::invalid(format!("record {id} has an incomplete time step")));
        }
        let mut probs = vec![[f64::NAN; 3]; group.len() / 3];
        let mut times = vec![f64::NAN; group.len() / 3];
        for (j, row) in group.iter().enumerate() {
            let t = j / 3;
            let v = column(row).ok_or_else(|| Error::invalid(format!("record {id} lacks the requested column")))?;
            probs[t][row.axis.index()] = v;
            times[t] = row.t_us;
        }
        if probs.iter().flatten().any(|p| p.is_nan()) {
            return Err(Error::invalid(format!("record {id} has missing axes")));
        }
        let dt = if times.len() > 1 { times[1] - times[0] } else { f64::NAN };
        out.push(PredictionSeries::new(dt, probs));
    }
    // single-step records take the spacing seen elsewhere in the file
    let dt = out.iter().map(|s| s.dt).find(|d| !d.is_nan()).unwrap_or(0.0);
    for s in out.iter_mut().filter(|s| s.dt.is_nan()) {
        s.dt = dt;
    }
    Ok(out)
}
