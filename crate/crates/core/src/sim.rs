//! Stochastic master equation integration for a Rabi-driven qubit under
//! continuous σ_Z measurement.
//!
//! The qubit evolves under `H_R = (Ω_R/2) σ_X` and the measurement channel
//! `c = sqrt(γ/2) σ_Z` with efficiency `η`. Each integration substep of length
//! `dt` applies half a Rabi rotation, the Bayesian measurement update for the
//! integrated record increment `r = a⟨σ_Z⟩dt + dW` (with `a = sqrt(2γη)`), and
//! the second half rotation. To first order in `dt` this is the Itô SME
//!
//! ```text
//! dx = -γ x dt              - a x z dW
//! dy = (-Ω_R z - γ y) dt    - a y z dW
//! dz = Ω_R y dt             + a (1 - z²) dW
//! ```
//!
//! and it maps valid states to valid states exactly.
//!
//! Record convention: the voltage of bin `k` is the bin average of the
//! measurement current, `V_k = (1/Δt) Σ_substeps (a z dt + dW)`, so that
//! `V_k Δt - a⟨z⟩Δt` recovers the Wiener increment.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infer::PredictionSeries;
use crate::qubit::{cardinal_state, Axis, BlochVector, DensityMatrix, Label, MeasLabel, PrepLabel};

/// Paper-scale Rabi frequency, `2π × 0.82 MHz` in rad/μs.
pub const DEFAULT_RABI_FREQ: f64 = 2.0 * std::f64::consts::PI * 0.82;
pub const DEFAULT_DEPHASING: f64 = 1.1;
pub const DEFAULT_EFFICIENCY: f64 = 0.36;
pub const DEFAULT_RECORD_DT: f64 = 0.040;
pub const DEFAULT_SUBSTEPS: usize = 10;
pub const DEFAULT_GRID_LEN: usize = 20;
pub const DEFAULT_MAX_DURATION: f64 = 4.0;

const GRID_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    /// Ω_R in rad/μs.
    pub rabi_freq: f64,
    /// Measurement-induced dephasing rate γ in μs⁻¹.
    pub meas_dephasing: f64,
    /// Quantum efficiency η.
    pub efficiency: f64,
    /// Record sampling interval in μs.
    pub record_dt: f64,
    /// Integration substeps per record bin.
    pub substeps: usize,
    /// Evolution durations in μs; each a multiple of `record_dt`.
    pub durations: Vec<f64>,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            rabi_freq: DEFAULT_RABI_FREQ,
            meas_dephasing: DEFAULT_DEPHASING,
            efficiency: DEFAULT_EFFICIENCY,
            record_dt: DEFAULT_RECORD_DT,
            substeps: DEFAULT_SUBSTEPS,
            durations: default_duration_grid(DEFAULT_RECORD_DT),
            seed: 0,
        }
    }
}

/// Twenty durations spread over `[0, 4]` μs, snapped to whole record bins.
pub fn default_duration_grid(record_dt: f64) -> Vec<f64> {
    let max_steps = (DEFAULT_MAX_DURATION / record_dt).round();
    (0..DEFAULT_GRID_LEN)
        .map(|k| {
            let steps = (k as f64 * max_steps / (DEFAULT_GRID_LEN - 1) as f64).round();
            steps * record_dt
        })
        .collect()
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.rabi_freq, self.meas_dephasing, self.efficiency, self.record_dt];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("simulation parameters must be finite"));
        }
        if self.meas_dephasing < 0.0 {
            return Err(Error::invalid("measurement dephasing must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.efficiency) {
            return Err(Error::invalid("efficiency must lie in [0, 1]"));
        }
        if self.record_dt <= 0.0 {
            return Err(Error::invalid("record_dt must be positive"));
        }
        if self.substeps == 0 {
            return Err(Error::invalid("substeps must be positive"));
        }
        if self.durations.is_empty() {
            return Err(Error::invalid("duration grid is empty"));
        }
        for &d in &self.durations {
            self.duration_steps(d)?;
        }
        Ok(())
    }

    /// Number of record bins in `duration`, which must sit on the bin grid.
    pub fn duration_steps(&self, duration: f64) -> Result<usize> {
        if !duration.is_finite() || duration < 0.0 {
            return Err(Error::invalid(format!("invalid duration {duration}")));
        }
        let steps = (duration / self.record_dt).round();
        if (steps * self.record_dt - duration).abs() > GRID_TOL * duration.max(1.0) {
            return Err(Error::invalid(format!(
                "duration {duration} is not a multiple of record_dt {}",
                self.record_dt
            )));
        }
        if steps > u16::MAX as f64 {
            return Err(Error::invalid(format!("duration {duration} exceeds 65535 bins")));
        }
        Ok(steps as usize)
    }

    pub fn grid_steps(&self) -> Result<Vec<usize>> {
        self.durations.iter().map(|&d| self.duration_steps(d)).collect()
    }

    pub fn substep_dt(&self) -> f64 {
        self.record_dt / self.substeps as f64
    }

    /// `a = 2 sqrt(η) sqrt(γ/2) = sqrt(2γη)`: record signal per unit ⟨σ_Z⟩.
    pub fn signal_gain(&self) -> f64 {
        (2.0 * self.meas_dephasing * self.efficiency).sqrt()
    }

    /// Measurement rate `γ_m = γη`.
    pub fn measurement_rate(&self) -> f64 {
        self.meas_dephasing * self.efficiency
    }

    /// Number of distinct (preparation, measurement axis, duration) settings.
    pub fn setting_count(&self) -> usize {
        6 * 3 * self.durations.len()
    }
}

/// Per-`dt` constants of the split-step update.
#[derive(Clone, Copy, Debug)]
pub(crate) struct StepKernel {
    cos_half: f64,
    sin_half: f64,
    /// Coherence factor of the unobserved dephasing, `exp(-γ(1-η)dt)`.
    unobserved: f64,
    /// Coherence factor of the full dephasing channel, `exp(-γ dt)`.
    dephasing: f64,
    gain: f64,
    dt: f64,
}

impl StepKernel {
    pub(crate) fn new(cfg: &SimConfig, dt: f64) -> Self {
        let half = 0.5 * cfg.rabi_freq * dt;
        StepKernel {
            cos_half: half.cos(),
            sin_half: half.sin(),
            unobserved: (-cfg.meas_dephasing * (1.0 - cfg.efficiency) * dt).exp(),
            dephasing: (-cfg.meas_dephasing * dt).exp(),
            gain: cfg.signal_gain(),
            dt,
        }
    }

    #[inline]
    fn rotate(&self, v: &mut [f64; 3], sense: f64) {
        let (c, s) = (self.cos_half, sense * self.sin_half);
        let (y, z) = (v[1], v[2]);
        v[1] = c * y - s * z;
        v[2] = c * z + s * y;
    }

    /// Measurement update for integrated record increment `r`.
    #[inline]
    fn measure(&self, v: &mut [f64; 3], r: f64) -> Result<()> {
        let s = self.gain * r;
        let (ch, sh) = (s.cosh(), s.sinh());
        let norm = ch + v[2] * sh;
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::numeric(format!(
                "state normalization {norm} is not positive; reduce the integration step"
            )));
        }
        let k = self.unobserved / norm;
        v[0] *= k;
        v[1] *= k;
        v[2] = (sh + v[2] * ch) / norm;
        clamp_to_ball(v);
        Ok(())
    }

    /// Expected record increment `a⟨z⟩dt` for the current state.
    #[inline]
    pub(crate) fn mean_increment(&self, v: &[f64; 3]) -> f64 {
        self.gain * v[2] * self.dt
    }

    /// Conditional state update for record increment `r`.
    pub(crate) fn forward(&self, v: &mut [f64; 3], r: f64) -> Result<()> {
        self.rotate(v, 1.0);
        self.measure(v, r)?;
        self.rotate(v, 1.0);
        Ok(())
    }

    /// Adjoint update of a trace-normalized effect operator.
    pub(crate) fn adjoint(&self, e: &mut [f64; 3], r: f64) -> Result<()> {
        self.rotate(e, -1.0);
        self.measure(e, r)?;
        self.rotate(e, -1.0);
        Ok(())
    }

    /// Unconditional (Lindblad) update.
    pub(crate) fn average(&self, v: &mut [f64; 3]) {
        self.rotate(v, 1.0);
        v[0] *= self.dephasing;
        v[1] *= self.dephasing;
        self.rotate(v, 1.0);
    }
}

#[inline]
fn clamp_to_ball(v: &mut [f64; 3]) {
    let n2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
    if n2 > 1.0 {
        let n = n2.sqrt();
        v.iter_mut().for_each(|c| *c /= n);
    }
}

fn to_array(rho: &DensityMatrix) -> [f64; 3] {
    rho.bloch().as_array()
}

pub(crate) fn to_density(v: [f64; 3]) -> DensityMatrix {
    let mut v = v;
    clamp_to_ball(&mut v);
    crate::qubit::rho_from_bloch(BlochVector { x: v[0], y: v[1], z: v[2] })
        .expect("clamped Bloch vector lies in the unit ball")
}

fn check_dt(dt: f64) -> Result<()> {
    if dt > 0.0 && dt.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("time step must be positive, got {dt}")))
    }
}

/// One stochastic step of length `dt` driven by Wiener increment `dw`.
pub fn sme_step(rho: &DensityMatrix, dw: f64, dt: f64, cfg: &SimConfig) -> Result<DensityMatrix> {
    check_dt(dt)?;
    let kernel = StepKernel::new(cfg, dt);
    let mut v = to_array(rho);
    let r = kernel.mean_increment(&v) + dw;
    kernel.forward(&mut v, r)?;
    Ok(to_density(v))
}

/// One deterministic step: Rabi rotation plus measurement dephasing.
pub fn lindblad_step(rho: &DensityMatrix, dt: f64, cfg: &SimConfig) -> Result<DensityMatrix> {
    check_dt(dt)?;
    let mut v = to_array(rho);
    StepKernel::new(cfg, dt).average(&mut v);
    Ok(to_density(v))
}

/// Sampled voltages, one per record bin.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementRecord {
    pub samples: Vec<f64>,
}

impl MeasurementRecord {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct SimulatedShot {
    pub prep: PrepLabel,
    pub meas: MeasLabel,
    pub record: MeasurementRecord,
    /// True conditional state at every bin boundary, when requested.
    pub true_rho_series: Option<Vec<DensityMatrix>>,
}

/// Simulates one shot: cardinal preparation, continuous monitoring for
/// `duration`, then a projective measurement of `meas_axis`.
pub fn generate_shot<R: Rng + ?Sized>(
    prep: PrepLabel,
    meas_axis: Axis,
    duration: f64,
    cfg: &SimConfig,
    rng: &mut R,
    keep_states: bool,
) -> Result<SimulatedShot> {
    let steps = cfg.duration_steps(duration)?;
    generate_shot_steps(prep, meas_axis, steps, cfg, rng, keep_states)
}

pub(crate) fn generate_shot_steps<R: Rng + ?Sized>(
    prep: PrepLabel,
    meas_axis: Axis,
    steps: usize,
    cfg: &SimConfig,
    rng: &mut R,
    keep_states: bool,
) -> Result<SimulatedShot> {
    let dt = cfg.substep_dt();
    let sqrt_dt = dt.sqrt();
    let kernel = StepKernel::new(cfg, dt);
    let mut v = to_array(&cardinal_state(prep));
    let mut samples = Vec::with_capacity(steps);
    let mut states = keep_states.then(|| {
        let mut s = Vec::with_capacity(steps + 1);
        s.push(to_density(v));
        s
    });
    for _ in 0..steps {
        let mut integrated = 0.0;
        for _ in 0..cfg.substeps {
            let dw: f64 = sqrt_dt * rng.sample::<f64, _>(StandardNormal);
            let r = kernel.mean_increment(&v) + dw;
            kernel.forward(&mut v, r)?;
            integrated += r;
        }
        samples.push(integrated / cfg.record_dt);
        if let Some(s) = states.as_mut() {
            s.push(to_density(v));
        }
    }
    let p_up = ((v[meas_axis.index()] + 1.0) / 2.0).clamp(0.0, 1.0);
    let outcome = rng.gen::<f64>() < p_up;
    Ok(SimulatedShot {
        prep,
        meas: Label::new(meas_axis, outcome),
        record: MeasurementRecord { samples },
        true_rho_series: states,
    })
}

/// Counter-based generator for shot `index` under `seed`.
pub fn shot_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Setting of shot `index`: durations cycle fastest, then measurement axis,
/// then preparation.
pub fn setting_for_index(cfg: &SimConfig, index: u64) -> (PrepLabel, Axis, f64) {
    let n_dur = cfg.durations.len() as u64;
    let s = index % (18 * n_dur);
    let duration = cfg.durations[(s % n_dur) as usize];
    let rest = s / n_dur;
    let axis = Axis::ALL[(rest % 3) as usize];
    let prep = Label::all()[(rest / 3) as usize];
    (prep, axis, duration)
}

/// Shot `index` of the deterministic sweep defined by `cfg`.
pub fn shot_at(cfg: &SimConfig, index: u64) -> Result<SimulatedShot> {
    let (prep, axis, duration) = setting_for_index(cfg, index);
    let mut rng = shot_rng(cfg.seed, index);
    generate_shot(prep, axis, duration, cfg, &mut rng, false)
}

/// The first `n_shots` shots of the sweep, generated in parallel. The result
/// depends only on `(cfg, n_shots)`, not on the thread schedule.
pub fn generate_shots(cfg: &SimConfig, n_shots: u64) -> Result<Vec<SimulatedShot>> {
    cfg.validate()?;
    (0..n_shots).into_par_iter().map(|i| shot_at(cfg, i)).collect()
}

/// Balanced sweep with `shots_per_setting` shots for every
/// (preparation, measurement axis, duration) combination.
pub fn generate_dataset(cfg: &SimConfig, shots_per_setting: usize) -> Result<Vec<SimulatedShot>> {
    if shots_per_setting == 0 {
        return Err(Error::invalid("shots_per_setting must be positive"));
    }
    generate_shots(cfg, (cfg.setting_count() * shots_per_setting) as u64)
}

/// Bloch trajectory of the conditional state reconstructed from `record`.
pub fn filter_states(record: &[f64], prep: PrepLabel, cfg: &SimConfig) -> Result<Vec<[f64; 3]>> {
    cfg.validate()?;
    let kernel = StepKernel::new(cfg, cfg.substep_dt());
    let mut v = to_array(&cardinal_state(prep));
    let mut out = Vec::with_capacity(record.len() + 1);
    out.push(v);
    let r_sub = cfg.substep_dt();
    for &volt in record {
        ensure_finite(volt)?;
        for _ in 0..cfg.substeps {
            kernel.forward(&mut v, volt * r_sub)?;
        }
        out.push(v);
    }
    Ok(out)
}

/// Forward prediction from the exact model: integrates the SME along the
/// record and reports Born probabilities at every bin boundary.
pub fn sme_filter(record: &[f64], prep: PrepLabel, cfg: &SimConfig) -> Result<PredictionSeries> {
    let states = filter_states(record, prep, cfg)?;
    Ok(PredictionSeries::from_bloch(cfg.record_dt, &states))
}

/// Retrodiction from the exact model: propagates the measurement effect
/// backward from the final outcome (or from the identity when it is
/// unknown). Entry `t` is the probability of `y = 1` for a cardinal
/// preparation at time `t`, given the record from `t` onward.
pub fn retro_filter(record: &[f64], final_outcome: Option<MeasLabel>, cfg: &SimConfig) -> Result<PredictionSeries> {
    cfg.validate()?;
    let kernel = StepKernel::new(cfg, cfg.substep_dt());
    let mut e = match final_outcome {
        Some(label) => to_array(&cardinal_state(label)),
        None => [0.0; 3],
    };
    let mut out = vec![[0.0; 3]; record.len() + 1];
    out[record.len()] = e;
    let r_sub = cfg.substep_dt();
    for (t, &volt) in record.iter().enumerate().rev() {
        ensure_finite(volt)?;
        for _ in 0..cfg.substeps {
            kernel.adjoint(&mut e, volt * r_sub)?;
        }
        out[t] = e;
    }
    Ok(PredictionSeries::from_bloch(cfg.record_dt, &out))
}

/// Unconditional Bloch trajectory from `prep` over `steps` bins.
pub fn lindblad_trajectory(prep: PrepLabel, steps: usize, cfg: &SimConfig) -> Vec<[f64; 3]> {
    let kernel = StepKernel::new(cfg, cfg.substep_dt());
    let mut v = to_array(&cardinal_state(prep));
    let mut out = Vec::with_capacity(steps + 1);
    out.push(v);
    for _ in 0..steps {
        for _ in 0..cfg.substeps {
            kernel.average(&mut v);
        }
        out.push(v);
    }
    out
}

fn ensure_finite(v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::numeric("non-finite sample in measurement record"))
    }
}
