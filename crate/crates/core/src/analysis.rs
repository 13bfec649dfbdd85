//! Calibration of predicted probabilities, drift and diffusion maps in the
//! (y, z) Bloch plane, physical-parameter fits, and initial-state tomography
//! with bootstrap intervals.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::TrajectoryRecord;
use crate::error::{Error, Result};
use crate::infer::{clamp_prob, PredictionSeries};
use crate::nn::Direction;
use crate::qubit::{Axis, BlochVector, Label};

pub const DEFAULT_DELTA: f64 = 0.01;
pub const DEFAULT_GRID_BINS: usize = 20;
pub const DEFAULT_MIN_COUNT: usize = 50;
pub const MIN_FIT_CELLS: usize = 10;
pub const MIN_TOMOGRAPHY_RECORDS: usize = 100;
pub const DEFAULT_RESAMPLES: usize = 1000;

/// A predicted probability for one axis paired with the observed bit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CalibrationPair {
    pub axis: Axis,
    pub prob: f64,
    pub outcome: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub center: f64,
    pub half_width: f64,
    pub count: u64,
    /// Empirical frequency of `y = 1`; absent for empty bins.
    pub mean_outcome: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisCalibration {
    pub axis: Axis,
    pub count: u64,
    /// Absent when the axis has no pairs.
    pub epsilon: Option<f64>,
    pub bins: Vec<CalibrationBin>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub delta: f64,
    pub total: u64,
    pub axes: Vec<AxisCalibration>,
}

impl CalibrationReport {
    pub fn epsilon(&self, axis: Axis) -> Option<f64> {
        self.axes[axis.index()].epsilon
    }

    pub fn max_epsilon(&self) -> Option<f64> {
        self.axes.iter().filter_map(|a| a.epsilon).reduce(f64::max)
    }
}

fn bin_count(delta: f64) -> usize {
    (1.0 / (2.0 * delta)).ceil() as usize
}

/// Bins of width `2δ` partition `[0, 1]`; per axis,
/// `ε = Σ_p (N_p / N) (⟨y⟩_p − p)²` with `p` the bin center.
pub fn calibrate(pairs: &[CalibrationPair], delta: f64) -> Result<CalibrationReport> {
    if pairs.is_empty() {
        return Err(Error::invalid("no prediction/outcome pairs to calibrate"));
    }
    if !(delta > 0.0 && delta <= 0.5) {
        return Err(Error::invalid(format!("bin half-width {delta} outside (0, 0.5]")));
    }
    let nb = bin_count(delta);
    let mut counts = vec![[0u64; 2]; 3 * nb];
    for p in pairs {
        if !(0.0..=1.0).contains(&p.prob) {
            return Err(Error::invalid(format!("probability {} outside [0, 1]", p.prob)));
        }
        let k = ((p.prob / (2.0 * delta)) as usize).min(nb - 1);
        counts[p.axis.index() * nb + k][usize::from(p.outcome)] += 1;
    }
    let axes = Axis::ALL
        .iter()
        .map(|&axis| {
            let rows = &counts[axis.index() * nb..(axis.index() + 1) * nb];
            let total: u64 = rows.iter().map(|c| c[0] + c[1]).sum();
            let mut eps = 0.0;
            let bins = rows
                .iter()
                .enumerate()
                .map(|(k, c)| {
                    let center = 2.0 * delta * k as f64 + delta;
                    let n = c[0] + c[1];
                    let mean_outcome = (n > 0).then(|| c[1] as f64 / n as f64);
                    if let Some(m) = mean_outcome {
                        eps += n as f64 / total as f64 * (m - center).powi(2);
                    }
                    CalibrationBin { center, half_width: delta, count: n, mean_outcome }
                })
                .collect();
            AxisCalibration { axis, count: total, epsilon: (total > 0).then_some(eps), bins }
        })
        .collect();
    Ok(CalibrationReport { delta, total: pairs.len() as u64, axes })
}

/// Final-time pairs for forward predictions (head of the measured axis at
/// `t = T` against `y_T`) or initial-time pairs for backward predictions
/// (head of the prepared axis at `t = 0` against `y_0`).
pub fn calibration_pairs(
    series: &[PredictionSeries],
    records: &[TrajectoryRecord],
    direction: Direction,
) -> Result<Vec<CalibrationPair>> {
    if series.len() != records.len() {
        return Err(Error::invalid("prediction and record counts differ"));
    }
    series
        .iter()
        .zip(records)
        .map(|(s, r)| {
            let (label, probs) = match direction {
                Direction::Forward => (r.meas, s.probs.last()),
                Direction::Backward => (r.prep, s.probs.first()),
            };
            let probs = probs.ok_or_else(|| Error::invalid("empty prediction series"))?;
            Ok(CalibrationPair { axis: label.axis(), prob: probs[label.axis().index()], outcome: label.outcome() })
        })
        .collect()
}

pub fn write_calibration_csv<W: Write>(writer: W, report: &CalibrationReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["axis", "center", "half_width", "count", "mean_outcome"]).map_err(csv_io)?;
    for a in &report.axes {
        for b in &a.bins {
            w.write_record([
                a.axis.name().to_string(),
                b.center.to_string(),
                b.half_width.to_string(),
                b.count.to_string(),
                b.mean_outcome.map_or_else(String::new, |m| m.to_string()),
            ])
            .map_err(csv_io)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::invalid(format!("csv: {other:?}")),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub bins: usize,
    pub min_count: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { bins: DEFAULT_GRID_BINS, min_count: DEFAULT_MIN_COUNT }
    }
}

impl GridSpec {
    fn cell(&self, y: f64, z: f64) -> usize {
        let idx = |v: f64| (((v + 1.0) / 2.0 * self.bins as f64).floor().max(0.0) as usize).min(self.bins - 1);
        idx(y) * self.bins + idx(z)
    }

    fn center(&self, k: usize) -> f64 {
        -1.0 + (2.0 * k as f64 + 1.0) / self.bins as f64
    }
}

/// One grid cell in the (y, z) plane, keyed by where a step starts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldCell {
    pub y_center: f64,
    pub z_center: f64,
    pub count: u64,
    /// `count ≥ min_count`.
    pub valid: bool,
    /// Sample means of the starting point.
    pub y_mean: f64,
    pub z_mean: f64,
    /// Mean displacement divided by `Δt`, `(y, z)`.
    pub drift: [f64; 2],
    /// Covariance of displacements, `[yy, yz, zz]`.
    pub covariance: [f64; 3],
    /// Descending eigenvalues of the covariance.
    pub eigenvalues: [f64; 2],
    /// Unit eigenvectors matching `eigenvalues`.
    pub eigenvectors: [[f64; 2]; 2],
    /// Sample mean of `(1 − z²)² + y²z²` over the cell's starting points.
    pub localization: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VectorFieldMap {
    pub dt: f64,
    pub grid: GridSpec,
    /// Row-major over y (outer) and z (inner).
    pub cells: Vec<FieldCell>,
}

impl VectorFieldMap {
    pub fn valid_cells(&self) -> impl Iterator<Item = &FieldCell> {
        self.cells.iter().filter(|c| c.valid)
    }
}

#[derive(Clone, Copy, Default)]
struct Moments {
    n: f64,
    y: f64,
    z: f64,
    dy: f64,
    dz: f64,
    dyy: f64,
    dyz: f64,
    dzz: f64,
    loc: f64,
}

impl Moments {
    fn add(&mut self, o: &Moments) {
        self.n += o.n;
        self.y += o.y;
        self.z += o.z;
        self.dy += o.dy;
        self.dz += o.dz;
        self.dyy += o.dyy;
        self.dyz += o.dyz;
        self.dzz += o.dzz;
        self.loc += o.loc;
    }
}

const ACCUMULATE_CHUNK: usize = 1024;

fn accumulate(ensemble: &[Vec<[f64; 3]>], grid: GridSpec) -> Vec<Moments> {
    let cells = grid.bins * grid.bins;
    // fixed chunking keeps the merge order independent of the thread count
    let partial: Vec<Vec<Moments>> = ensemble
        .par_chunks(ACCUMULATE_CHUNK)
        .map(|chunk| {
            let mut acc = vec![Moments::default(); cells];
            for series in chunk {
                for w in series.windows(2) {
                    let (y, z) = (w[0][1], w[0][2]);
                    let (dy, dz) = (w[1][1] - y, w[1][2] - z);
                    let m = &mut acc[grid.cell(y, z)];
                    m.n += 1.0;
                    m.y += y;
                    m.z += z;
                    m.dy += dy;
                    m.dz += dz;
                    m.dyy += dy * dy;
                    m.dyz += dy * dz;
                    m.dzz += dz * dz;
                    m.loc += (1.0 - z * z).powi(2) + y * y * z * z;
                }
            }
            acc
        })
        .collect();
    let mut total = vec![Moments::default(); cells];
    for p in &partial {
        for (t, m) in total.iter_mut().zip(p) {
            t.add(m);
        }
    }
    total
}

/// Eigen-decomposition of a symmetric 2×2 matrix `[[a, b], [b, c]]`,
/// eigenvalues descending.
pub fn symmetric_eigen(a: f64, b: f64, c: f64) -> ([f64; 2], [[f64; 2]; 2]) {
    let mean = 0.5 * (a + c);
    let r = (0.25 * (a - c).powi(2) + b * b).sqrt();
    let (l1, l2) = (mean + r, mean - r);
    let v1 = if b.abs() > 1e-300 {
        let (x, y) = (l1 - c, b);
        let n = x.hypot(y);
        [x / n, y / n]
    } else if a >= c {
        [1.0, 0.0]
    } else {
        [0.0, 1.0]
    };
    ([l1, l2], [v1, [-v1[1], v1[0]]])
}

/// Mean displacement and displacement covariance per cell of the (y, z)
/// plane for an ensemble of Bloch-vector series sampled every `dt`.
pub fn field_map(ensemble: &[Vec<[f64; 3]>], dt: f64, grid: GridSpec) -> Result<VectorFieldMap> {
    if grid.bins == 0 || !(dt > 0.0) {
        return Err(Error::invalid("grid needs at least one bin and a positive dt"));
    }
    let moments = accumulate(ensemble, grid);
    let cells = moments
        .iter()
        .enumerate()
        .map(|(idx, m)| {
            let (iy, iz) = (idx / grid.bins, idx % grid.bins);
            let mut cell = FieldCell {
                y_center: grid.center(iy),
                z_center: grid.center(iz),
                count: m.n as u64,
                valid: m.n as usize >= grid.min_count.max(2),
                y_mean: f64::NAN,
                z_mean: f64::NAN,
                drift: [0.0; 2],
                covariance: [0.0; 3],
                eigenvalues: [0.0; 2],
                eigenvectors: [[1.0, 0.0], [0.0, 1.0]],
                localization: f64::NAN,
            };
            if m.n > 0.0 {
                let n = m.n;
                let (my, mz) = (m.dy / n, m.dz / n);
                cell.y_mean = m.y / n;
                cell.z_mean = m.z / n;
                cell.localization = m.loc / n;
                cell.drift = [my / dt, mz / dt];
                if n > 1.0 {
                    let k = n / (n - 1.0);
                    let cov = [
                        ((m.dyy / n - my * my) * k).max(0.0),
                        (m.dyz / n - my * mz) * k,
                        ((m.dzz / n - mz * mz) * k).max(0.0),
                    ];
                    let (vals, vecs) = symmetric_eigen(cov[0], cov[1], cov[2]);
                    cell.covariance = cov;
                    cell.eigenvalues = [vals[0].max(0.0), vals[1].max(0.0)];
                    cell.eigenvectors = vecs;
                }
            }
            cell
        })
        .collect();
    Ok(VectorFieldMap { dt, grid, cells })
}

/// Per-cell mean displacement per `Δt`.
pub fn drift_map(ensemble: &[Vec<[f64; 3]>], dt: f64, grid: GridSpec) -> Result<VectorFieldMap> {
    field_map(ensemble, dt, grid)
}

/// Per-cell covariance of drift-subtracted displacements and its
/// eigen-decomposition.
pub fn diffusion_map(ensemble: &[Vec<[f64; 3]>], dt: f64, grid: GridSpec) -> Result<VectorFieldMap> {
    field_map(ensemble, dt, grid)
}

/// Bloch-coordinate series `2P − 1` of predictions.
pub fn bloch_ensemble(series: &[PredictionSeries]) -> Vec<Vec<[f64; 3]>> {
    series.iter().map(|s| s.bloch()).collect()
}

pub fn write_map_csv<W: Write>(writer: W, map: &VectorFieldMap) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "y_center", "z_center", "count", "valid", "drift_y", "drift_z", "cov_yy", "cov_yz", "cov_zz", "eig1", "eig2",
        "vec1_y", "vec1_z", "vec2_y", "vec2_z",
    ])
    .map_err(csv_io)?;
    for c in &map.cells {
        let v = [
            c.y_center,
            c.z_center,
            c.count as f64,
            f64::from(u8::from(c.valid)),
            c.drift[0],
            c.drift[1],
            c.covariance[0],
            c.covariance[1],
            c.covariance[2],
            c.eigenvalues[0],
            c.eigenvalues[1],
            c.eigenvectors[0][0],
            c.eigenvectors[0][1],
            c.eigenvectors[1][0],
            c.eigenvectors[1][1],
        ];
        w.write_record(v.iter().map(|x| x.to_string())).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub std_err: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhysParams {
    /// Rabi angular frequency, rad/μs.
    pub rabi_freq: Estimate,
    /// Measurement-induced dephasing rate, μs⁻¹.
    pub gamma_phi: Estimate,
    /// Measurement rate, μs⁻¹.
    pub gamma_m: Estimate,
    /// `γ_m / γ_φ`.
    pub efficiency: Estimate,
    pub drift_cells: usize,
    pub diffusion_cells: usize,
}

/// `exp(A)` for a real 2×2 matrix.
fn expm2(a: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let s = 0.5 * (a[0][0] + a[1][1]);
    let b = [[a[0][0] - s, a[0][1]], [a[1][0], a[1][1] - s]];
    // b is traceless, so b² = −det(b) I
    let q2 = -(b[0][0] * b[1][1] - b[0][1] * b[1][0]);
    let (c, k) = if q2 > 1e-30 {
        let q = q2.sqrt();
        (q.cosh(), q.sinh() / q)
    } else if q2 < -1e-30 {
        let q = (-q2).sqrt();
        (q.cos(), q.sin() / q)
    } else {
        (1.0, 1.0)
    };
    let e = s.exp();
    [[e * (c + k * b[0][0]), e * k * b[0][1]], [e * k * b[1][0], e * (c + k * b[1][1])]]
}

/// Mean displacement per `Δt` predicted at `(y, z)` for dephasing `g` and
/// Rabi frequency `w`: `(exp(MΔt) − I)/Δt · (y, z)` with
/// `M = [[−g, −w], [w, 0]]`.
pub fn model_drift(g: f64, w: f64, dt: f64, y: f64, z: f64) -> [f64; 2] {
    let e = expm2([[-g * dt, -w * dt], [w * dt, 0.0]]);
    [((e[0][0] - 1.0) * y + e[0][1] * z) / dt, (e[1][0] * y + (e[1][1] - 1.0) * z) / dt]
}

fn solve2(a: [[f64; 2]; 2], b: [f64; 2]) -> Option<[f64; 2]> {
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    if !(det.abs() > 1e-300) {
        return None;
    }
    Some([(b[0] * a[1][1] - b[1] * a[0][1]) / det, (a[0][0] * b[1] - a[1][0] * b[0]) / det])
}

fn inverse2(a: [[f64; 2]; 2]) -> Option<[[f64; 2]; 2]> {
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    if !(det.abs() > 1e-300) {
        return None;
    }
    Some([[a[1][1] / det, -a[0][1] / det], [-a[1][0] / det, a[0][0] / det]])
}

/// Count-weighted least squares of the drift field for `(γ_φ, Ω_R)`.
fn fit_drift(cells: &[&FieldCell], dt: f64) -> Result<(Estimate, Estimate)> {
    // linear first-order start
    let mut ata = [[0.0; 2]; 2];
    let mut atb = [0.0; 2];
    for c in cells {
        let w = c.count as f64;
        let (y, z) = (c.y_mean, c.z_mean);
        // rows: dy = −g y − Ω z ; dz = Ω y
        let rows = [([-y, -z], c.drift[0]), ([0.0, y], c.drift[1])];
        for (j, obs) in rows {
            for p in 0..2 {
                atb[p] += w * j[p] * obs;
                for q in 0..2 {
                    ata[p][q] += w * j[p] * j[q];
                }
            }
        }
    }
    let mut theta = solve2(ata, atb).ok_or_else(|| Error::numeric("drift fit is singular"))?;
    let jacobian = |theta: [f64; 2], c: &FieldCell| -> ([f64; 2], [[f64; 2]; 2]) {
        let f = model_drift(theta[0], theta[1], dt, c.y_mean, c.z_mean);
        let mut j = [[0.0; 2]; 2];
        for p in 0..2 {
            let h = 1e-6 * theta[p].abs().max(1.0);
            let mut tp = theta;
            tp[p] += h;
            let mut tm = theta;
            tm[p] -= h;
            let fp = model_drift(tp[0], tp[1], dt, c.y_mean, c.z_mean);
            let fm = model_drift(tm[0], tm[1], dt, c.y_mean, c.z_mean);
            for r in 0..2 {
                j[r][p] = (fp[r] - fm[r]) / (2.0 * h);
            }
        }
        (f, j)
    };
    let normal = |theta: [f64; 2]| {
        let mut jtj = [[0.0; 2]; 2];
        let mut jtr = [0.0; 2];
        let mut rss = 0.0;
        for c in cells {
            let w = c.count as f64;
            let (f, j) = jacobian(theta, c);
            for r in 0..2 {
                let res = c.drift[r] - f[r];
                rss += w * res * res;
                for p in 0..2 {
                    jtr[p] += w * j[r][p] * res;
                    for q in 0..2 {
                        jtj[p][q] += w * j[r][p] * j[r][q];
                    }
                }
            }
        }
        (jtj, jtr, rss)
    };
    for _ in 0..100 {
        let (jtj, jtr, _) = normal(theta);
        let step = solve2(jtj, jtr).ok_or_else(|| Error::numeric("drift fit is singular"))?;
        theta = [theta[0] + step[0], theta[1] + step[1]];
        if step[0].abs().max(step[1].abs()) < 1e-13 * theta[0].abs().max(theta[1].abs()).max(1.0) {
            break;
        }
    }
    if !theta.iter().all(|v| v.is_finite()) {
        return Err(Error::numeric("drift fit did not converge"));
    }
    let (jtj, _, rss) = normal(theta);
    let inv = inverse2(jtj).ok_or_else(|| Error::numeric("drift fit is singular"))?;
    let dof = (2 * cells.len()).saturating_sub(2).max(1) as f64;
    let s2 = rss / dof;
    Ok((
        Estimate { value: theta[0], std_err: (s2 * inv[0][0]).sqrt() },
        Estimate { value: theta[1], std_err: (s2 * inv[1][1]).sqrt() },
    ))
}

/// Count-weighted regression through the origin of the leading eigenvalue on
/// `2 Δt ⟨(1 − z²)² + y²z²⟩`.
fn fit_diffusion(cells: &[&FieldCell], dt: f64) -> Result<Estimate> {
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for c in cells {
        let w = c.count as f64;
        let x = 2.0 * dt * c.localization;
        sxx += w * x * x;
        sxy += w * x * c.eigenvalues[0];
    }
    if !(sxx > 0.0) {
        return Err(Error::numeric("diffusion fit is singular"));
    }
    let g = sxy / sxx;
    let rss: f64 =
        cells.iter().map(|c| c.count as f64 * (c.eigenvalues[0] - g * 2.0 * dt * c.localization).powi(2)).sum();
    let dof = cells.len().saturating_sub(1).max(1) as f64;
    Ok(Estimate { value: g, std_err: (rss / dof / sxx).sqrt() })
}

/// Weighted least-squares fit of the drift and diffusion maps.
pub fn fit_params(drift: &VectorFieldMap, diffusion: &VectorFieldMap) -> Result<PhysParams> {
    let dcells: Vec<&FieldCell> = drift.valid_cells().collect();
    let vcells: Vec<&FieldCell> = diffusion.valid_cells().collect();
    if dcells.len() < MIN_FIT_CELLS || vcells.len() < MIN_FIT_CELLS {
        return Err(Error::numeric(format!(
            "under-populated maps: {} drift and {} diffusion cells (need {MIN_FIT_CELLS})",
            dcells.len(),
            vcells.len()
        )));
    }
    let (gamma_phi, rabi) = fit_drift(&dcells, drift.dt)?;
    let gamma_m = fit_diffusion(&vcells, diffusion.dt)?;
    let eta = gamma_m.value / gamma_phi.value;
    let rel = ((gamma_m.std_err / gamma_m.value).powi(2) + (gamma_phi.std_err / gamma_phi.value).powi(2)).sqrt();
    Ok(PhysParams {
        rabi_freq: rabi,
        gamma_phi,
        gamma_m,
        efficiency: Estimate { value: eta, std_err: (eta * rel).abs() },
        drift_cells: dcells.len(),
        diffusion_cells: vcells.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TomographyResult {
    pub records: usize,
    /// Clamped mean `t = 0` prediction per axis.
    pub probs: [f64; 3],
    pub bloch: [f64; 3],
    /// Closest cardinal state to `bloch`.
    pub nearest: Label,
    /// 95% percentile interval per Bloch coordinate.
    pub ci: Option<[[f64; 2]; 3]>,
}

/// Initial-state estimate from backward predictions at `t = 0`: the mean
/// prediction per axis (the minimizer of the squared deviation), clamped to
/// `[0, 1]`, as a Bloch vector projected into the unit ball.
pub fn tomography(initial: &[[f64; 3]]) -> Result<TomographyResult> {
    if initial.len() < MIN_TOMOGRAPHY_RECORDS {
        return Err(Error::invalid(format!(
            "tomography needs at least {MIN_TOMOGRAPHY_RECORDS} records, got {}",
            initial.len()
        )));
    }
    let probs = mean_probs(initial);
    let raw = probs.map(|p| 2.0 * p - 1.0);
    let v = BlochVector { x: raw[0], y: raw[1], z: raw[2] }.project_to_ball();
    Ok(TomographyResult { records: initial.len(), probs, bloch: v.as_array(), nearest: v.nearest_cardinal(), ci: None })
}

fn mean_probs(initial: &[[f64; 3]]) -> [f64; 3] {
    let mut sum = [0.0; 3];
    for p in initial {
        for k in 0..3 {
            sum[k] += p[k];
        }
    }
    sum.map(|s| (s / initial.len() as f64).clamp(0.0, 1.0))
}

/// Initial-time predictions of each series.
pub fn initial_predictions(series: &[PredictionSeries]) -> Vec<[f64; 3]> {
    series.iter().filter_map(|s| s.probs.first().copied()).collect()
}

/// Linear-interpolation (type 7) sample quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// 95% percentile bootstrap interval of each Bloch coordinate `2⟨P⟩ − 1`,
/// resampling records with replacement.
pub fn bootstrap_ci(initial: &[[f64; 3]], resamples: usize, seed: u64) -> Result<[[f64; 2]; 3]> {
    if resamples < 100 {
        return Err(Error::invalid("bootstrap needs at least 100 resamples"));
    }
    if initial.is_empty() {
        return Err(Error::invalid("bootstrap needs at least one record"));
    }
    let n = initial.len();
    let stats: Vec<[f64; 3]> = (0..resamples)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            let mut sum = [0.0; 3];
            for _ in 0..n {
                let p = &initial[rng.gen_range(0..n)];
                for k in 0..3 {
                    sum[k] += p[k];
                }
            }
            sum.map(|s| 2.0 * (s / n as f64).clamp(0.0, 1.0) - 1.0)
        })
        .collect();
    let mut out = [[0.0; 2]; 3];
    for k in 0..3 {
        let mut col: Vec<f64> = stats.iter().map(|s| s[k]).collect();
        col.sort_by(f64::total_cmp);
        out[k] = [quantile(&col, 0.025), quantile(&col, 0.975)];
    }
    Ok(out)
}

/// Probabilities clamped into `(0, 1)` as Born-rule inputs.
pub fn born_probs(v: [f64; 3]) -> [f64; 3] {
    v.map(|r| clamp_prob((r + 1.0) / 2.0))
}
