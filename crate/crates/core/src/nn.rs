//! Single-layer LSTM over scalar voltage inputs, with a six-way conditioning
//! encoder for the initial hidden and cell states and three logistic output
//! heads (one per measurement axis).
//!
//! Training is full backpropagation through time on length-uniform batches,
//! with the cross-entropy loss applied at the final step to the head of the
//! labeled axis, ADAM updates, global-norm gradient clipping, a geometric
//! learning-rate schedule and a linear dropout schedule on the
//! hidden-to-head connections.

use std::fmt;
use std::fs;
use std::path::Path;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, Axis as NdAxis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{batches, Batch, Dataset, NormStats, TrajectoryRecord, DEFAULT_BATCH_SIZE};
use crate::error::{Error, FormatError, Result};
use crate::infer::{clamp_prob, sigmoid};
use crate::qubit::Label;

pub const DEFAULT_HIDDEN: usize = 64;
pub const CONDITIONING_WIDTH: usize = 6;
pub const MAX_HIDDEN: usize = 4096;
const LOSS_EPS: f64 = 1e-12;

pub const MODEL_MAGIC: [u8; 4] = *b"QRNN";
pub const MODEL_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::invalid(format!("unknown activation {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Forward => "forward",
            Direction::Backward => "backward",
        })
    }
}

impl std::str::FromStr for Direction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(Direction::Forward),
            "backward" => Ok(Direction::Backward),
            other => Err(Error::invalid(format!("unknown direction {other:?}"))),
        }
    }
}

/// What the initial state is conditioned on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Conditioning {
    Known(Label),
    /// Uniform weight over the six labels.
    Unknown,
}

impl Conditioning {
    pub fn vector(self) -> [f64; CONDITIONING_WIDTH] {
        match self {
            Conditioning::Known(label) => {
                let mut v = [0.0; CONDITIONING_WIDTH];
                v[label.one_hot_index()] = 1.0;
                v
            }
            Conditioning::Unknown => [1.0 / CONDITIONING_WIDTH as f64; CONDITIONING_WIDTH],
        }
    }
}

impl From<Label> for Conditioning {
    fn from(label: Label) -> Self {
        Conditioning::Known(label)
    }
}

/// Gate order inside the `4n` pre-activation block: input, forget, cell, output.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub w_in: Array2<f64>,
    pub w_rec: Array2<f64>,
    pub bias: Array1<f64>,
    pub enc_h: Array2<f64>,
    pub enc_c: Array2<f64>,
    pub head_w: Array2<f64>,
    pub head_b: Array1<f64>,
}

pub const TENSOR_NAMES: [&str; 7] = ["w_in", "w_rec", "bias", "enc_h", "enc_c", "head_w", "head_b"];

impl Params {
    pub fn zeros(n: usize) -> Self {
        Params {
            w_in: Array2::zeros((1, 4 * n)),
            w_rec: Array2::zeros((n, 4 * n)),
            bias: Array1::zeros(4 * n),
            enc_h: Array2::zeros((CONDITIONING_WIDTH, n)),
            enc_c: Array2::zeros((CONDITIONING_WIDTH, n)),
            head_w: Array2::zeros((n, 3)),
            head_b: Array1::zeros(3),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_rec.nrows()
    }

    pub fn shapes(n: usize) -> [(usize, usize); 7] {
        [(1, 4 * n), (n, 4 * n), (1, 4 * n), (CONDITIONING_WIDTH, n), (CONDITIONING_WIDTH, n), (n, 3), (1, 3)]
    }

    pub fn slices(&self) -> [&[f64]; 7] {
        [
            self.w_in.as_slice().expect("standard layout"),
            self.w_rec.as_slice().expect("standard layout"),
            self.bias.as_slice().expect("standard layout"),
            self.enc_h.as_slice().expect("standard layout"),
            self.enc_c.as_slice().expect("standard layout"),
            self.head_w.as_slice().expect("standard layout"),
            self.head_b.as_slice().expect("standard layout"),
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 7] {
        [
            self.w_in.as_slice_mut().expect("standard layout"),
            self.w_rec.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
            self.enc_h.as_slice_mut().expect("standard layout"),
            self.enc_c.as_slice_mut().expect("standard layout"),
            self.head_w.as_slice_mut().expect("standard layout"),
            self.head_b.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn len(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    pub fn norm(&self) -> f64 {
        self.slices().iter().flat_map(|s| s.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, k: f64) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|v| *v *= k);
        }
    }

    pub fn add_assign(&mut self, other: &Params) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for s in self.slices_mut() {
            s.copy_from_slice(&flat[off..off + s.len()]);
            off += s.len();
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RnnModel {
    pub activation: Activation,
    pub direction: Direction,
    /// Statistics applied to raw voltages before they enter the network.
    pub norm: NormStats,
    pub params: Params,
}

impl RnnModel {
    pub fn zeros(hidden: usize, activation: Activation, direction: Direction, norm: NormStats) -> Self {
        RnnModel { activation, direction, norm, params: Params::zeros(hidden) }
    }

    /// Gate weights and encoders uniform in `±1/sqrt(n)`, forget-gate bias
    /// `+1`, heads zero.
    pub fn init<R: Rng>(
        hidden: usize,
        activation: Activation,
        direction: Direction,
        norm: NormStats,
        rng: &mut R,
    ) -> Self {
        let mut m = RnnModel::zeros(hidden, activation, direction, norm);
        let bound = 1.0 / (hidden as f64).sqrt();
        let p = &mut m.params;
        for t in [&mut p.w_in, &mut p.w_rec, &mut p.enc_h, &mut p.enc_c] {
            t.iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
        }
        p.bias.slice_mut(s![hidden..2 * hidden]).fill(1.0);
        m
    }

    pub fn hidden(&self) -> usize {
        self.params.hidden()
    }
}

/// `(h₀, c₀)` for a conditioning: the six-vector times each encoder matrix.
pub fn encode_prep(model: &RnnModel, cond: Conditioning) -> (Array1<f64>, Array1<f64>) {
    let v = Array1::from(cond.vector().to_vec());
    (v.dot(&model.params.enc_h), v.dot(&model.params.enc_c))
}

/// Cross-entropy of predicting `p` for outcome `y`, with `p` clamped to
/// `[1e-12, 1 - 1e-12]`.
pub fn loss(p: f64, y: bool) -> f64 {
    let p = p.clamp(LOSS_EPS, 1.0 - LOSS_EPS);
    if y {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Network inputs for one length-uniform batch.
#[derive(Clone, Debug)]
pub struct BatchInputs {
    /// Normalized inputs in network (consumption) order, `B × L`.
    pub x: Array2<f64>,
    /// Conditioning vectors, `B × 6`.
    pub cond: Array2<f64>,
    pub target_axis: Vec<usize>,
    pub target: Vec<f64>,
    /// Inverted-dropout mask on the hidden-to-head connections, `B × n`.
    pub mask: Option<Array2<f64>>,
}

impl BatchInputs {
    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    /// Inputs for `records` as seen by a network of `direction`. A fraction
    /// `unknown_fraction` of the records get the uniform conditioning.
    pub fn from_records<R: Rng>(
        records: &[&TrajectoryRecord],
        direction: Direction,
        norm: &NormStats,
        unknown_fraction: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let b = records.len();
        let l = records.first().map_or(0, |r| r.step_count());
        let mut x = Array2::zeros((b, l));
        let mut cond = Array2::zeros((b, CONDITIONING_WIDTH));
        let mut target_axis = Vec::with_capacity(b);
        let mut target = Vec::with_capacity(b);
        for (i, r) in records.iter().enumerate() {
            if r.step_count() != l {
                return Err(Error::invalid("batch records must share one step count"));
            }
            let (given, wanted) = match direction {
                Direction::Forward => (r.prep, r.meas),
                Direction::Backward => (r.meas, r.prep),
            };
            let mut row = x.row_mut(i);
            match direction {
                Direction::Forward => {
                    for (dst, &v) in row.iter_mut().zip(&r.voltages) {
                        *dst = norm.apply(v);
                    }
                }
                Direction::Backward => {
                    for (dst, &v) in row.iter_mut().zip(r.voltages.iter().rev()) {
                        *dst = norm.apply(v);
                    }
                }
            }
            let c = if unknown_fraction > 0.0 && rng.gen::<f64>() < unknown_fraction {
                Conditioning::Unknown
            } else {
                Conditioning::Known(given)
            };
            cond.row_mut(i).assign(&ArrayView1::from(&c.vector()));
            target_axis.push(wanted.axis().index());
            target.push(f64::from(wanted.bit()));
        }
        Ok(BatchInputs { x, cond, target_axis, target, mask: None })
    }

    fn rows(&self, start: usize, end: usize) -> BatchInputs {
        BatchInputs {
            x: self.x.slice(s![start..end, ..]).to_owned(),
            cond: self.cond.slice(s![start..end, ..]).to_owned(),
            target_axis: self.target_axis[start..end].to_vec(),
            target: self.target[start..end].to_vec(),
            mask: self.mask.as_ref().map(|m| m.slice(s![start..end, ..]).to_owned()),
        }
    }
}

/// Inverted-dropout mask: each entry is `0` with probability `rate`,
/// otherwise `1 / (1 - rate)`.
pub fn dropout_mask<R: Rng>(rows: usize, hidden: usize, rate: f64, rng: &mut R) -> Array2<f64> {
    let keep = 1.0 / (1.0 - rate);
    Array2::from_shape_fn((rows, hidden), |_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
}

struct StepCache {
    /// Activated gates `i, f, g, o`, `B × 4n`.
    gates: Array2<f64>,
    c: Array2<f64>,
    act_c: Array2<f64>,
    h: Array2<f64>,
}

fn lstm_step(
    p: &Params,
    act: Activation,
    x_t: ArrayView1<f64>,
    h_prev: &Array2<f64>,
    c_prev: &Array2<f64>,
) -> Result<StepCache> {
    let n = p.hidden();
    let b = h_prev.nrows();
    let mut z = Array2::zeros((b, 4 * n));
    general_mat_mul(1.0, h_prev, &p.w_rec, 0.0, &mut z);
    let w_in = p.w_in.as_slice().expect("standard layout");
    let bias = p.bias.as_slice().expect("standard layout");
    let mut c = Array2::zeros((b, n));
    let mut act_c = Array2::zeros((b, n));
    let mut h = Array2::zeros((b, n));
    {
        let zs = z.as_slice_mut().expect("standard layout");
        let cp = c_prev.as_slice().expect("standard layout");
        let cs = c.as_slice_mut().expect("standard layout");
        let acs = act_c.as_slice_mut().expect("standard layout");
        let hs = h.as_slice_mut().expect("standard layout");
        for r in 0..b {
            let xv = x_t[r];
            let zr = &mut zs[r * 4 * n..(r + 1) * 4 * n];
            for k in 0..4 * n {
                zr[k] += xv * w_in[k] + bias[k];
            }
            for j in 0..n {
                let i = sigmoid(zr[j]);
                let f = sigmoid(zr[n + j]);
                let g = act.apply(zr[2 * n + j]);
                let o = sigmoid(zr[3 * n + j]);
                zr[j] = i;
                zr[n + j] = f;
                zr[2 * n + j] = g;
                zr[3 * n + j] = o;
                let cc = f * cp[r * n + j] + i * g;
                let a = act.apply(cc);
                cs[r * n + j] = cc;
                acs[r * n + j] = a;
                hs[r * n + j] = o * a;
            }
        }
    }
    if !h.sum().is_finite() {
        return Err(Error::numeric("non-finite LSTM activation"));
    }
    Ok(StepCache { gates: z, c, act_c, h })
}

fn initial_state(p: &Params, cond: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    (cond.dot(&p.enc_h), cond.dot(&p.enc_c))
}

fn head_logits(p: &Params, h: &Array2<f64>) -> Array2<f64> {
    let mut logits = h.dot(&p.head_w);
    logits += &p.head_b;
    logits
}

/// Mean final-step loss of a batch and its gradient. `total` is the size of
/// the full batch this slice belongs to (the mean is over `total`).
fn loss_and_grad(model: &RnnModel, inputs: &BatchInputs, total: usize) -> Result<(f64, Params)> {
    let p = &model.params;
    let act = model.activation;
    let n = p.hidden();
    let b = inputs.len();
    let l = inputs.x.ncols();
    let (h0, c0) = initial_state(p, &inputs.cond);
    let mut caches: Vec<StepCache> = Vec::with_capacity(l);
    for t in 0..l {
        let (h_prev, c_prev) = match caches.last() {
            Some(prev) => (&prev.h, &prev.c),
            None => (&h0, &c0),
        };
        let step = lstm_step(p, act, inputs.x.column(t), h_prev, c_prev)?;
        caches.push(step);
    }
    let h_last = caches.last().map_or(&h0, |c| &c.h);
    let hd = match &inputs.mask {
        Some(m) => h_last * m,
        None => h_last.clone(),
    };
    let logits = head_logits(p, &hd);
    let mut grads = Params::zeros(n);
    let inv = 1.0 / total as f64;
    let mut total_loss = 0.0;
    let mut dhd = Array2::zeros((b, n));
    for r in 0..b {
        let col = inputs.target_axis[r];
        let y = inputs.target[r];
        let prob = sigmoid(logits[[r, col]]);
        total_loss += loss(prob, y > 0.5);
        let dl = (prob - y) * inv;
        grads.head_b[col] += dl;
        for j in 0..n {
            grads.head_w[[j, col]] += hd[[r, j]] * dl;
            dhd[[r, j]] = dl * p.head_w[[j, col]];
        }
    }
    let mut dh = match &inputs.mask {
        Some(m) => dhd * m,
        None => dhd,
    };
    let mut dc: Array2<f64> = Array2::zeros((b, n));
    let mut dz = Array2::zeros((b, 4 * n));
    for t in (0..l).rev() {
        let cache = &caches[t];
        let (h_prev, c_prev) = if t == 0 { (&h0, &c0) } else { (&caches[t - 1].h, &caches[t - 1].c) };
        {
            let g = cache.gates.as_slice().expect("standard layout");
            let ac = cache.act_c.as_slice().expect("standard layout");
            let cp = c_prev.as_slice().expect("standard layout");
            let dhs = dh.as_slice().expect("standard layout");
            let dcs = dc.as_slice_mut().expect("standard layout");
            let dzs = dz.as_slice_mut().expect("standard layout");
            for r in 0..b {
                let gr = &g[r * 4 * n..(r + 1) * 4 * n];
                let dzr = &mut dzs[r * 4 * n..(r + 1) * 4 * n];
                for j in 0..n {
                    let (i, f, gg, o) = (gr[j], gr[n + j], gr[2 * n + j], gr[3 * n + j]);
                    let a = ac[r * n + j];
                    let dho = dhs[r * n + j];
                    let d_o = dho * a;
                    let dcc = dcs[r * n + j] + dho * o * act.derivative_from_output(a);
                    dzr[j] = dcc * gg * i * (1.0 - i);
                    dzr[n + j] = dcc * cp[r * n + j] * f * (1.0 - f);
                    dzr[2 * n + j] = dcc * i * act.derivative_from_output(gg);
                    dzr[3 * n + j] = d_o * o * (1.0 - o);
                    dcs[r * n + j] = dcc * f;
                }
            }
        }
        general_mat_mul(1.0, &h_prev.t(), &dz, 1.0, &mut grads.w_rec);
        let x_t = inputs.x.column(t);
        let dw_in = dz.t().dot(&x_t);
        grads.w_in.row_mut(0).scaled_add(1.0, &dw_in);
        grads.bias.scaled_add(1.0, &dz.sum_axis(NdAxis(0)));
        let mut dh_prev = Array2::zeros((b, n));
        general_mat_mul(1.0, &dz, &p.w_rec.t(), 0.0, &mut dh_prev);
        dh = dh_prev;
    }
    general_mat_mul(1.0, &inputs.cond.t(), &dh, 1.0, &mut grads.enc_h);
    general_mat_mul(1.0, &inputs.cond.t(), &dc, 1.0, &mut grads.enc_c);
    if !total_loss.is_finite() || !grads.is_finite() {
        return Err(Error::numeric("non-finite loss or gradient"));
    }
    Ok((total_loss * inv, grads))
}

/// Mean batch loss and its gradient with respect to every parameter.
/// With `shards > 1` the batch is split row-wise, shards run in parallel and
/// their gradients are summed in shard order.
pub fn backward(model: &RnnModel, inputs: &BatchInputs, shards: usize) -> Result<(f64, Params)> {
    let b = inputs.len();
    if b == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let shards = shards.clamp(1, b);
    if shards == 1 {
        return loss_and_grad(model, inputs, b);
    }
    let chunk = b.div_ceil(shards);
    let parts: Vec<(usize, usize)> = (0..b).step_by(chunk).map(|start| (start, (start + chunk).min(b))).collect();
    let results: Vec<Result<(f64, Params)>> =
        parts.par_iter().map(|&(s, e)| loss_and_grad(model, &inputs.rows(s, e), b)).collect();
    let mut total = 0.0;
    let mut grads = Params::zeros(model.hidden());
    for r in results {
        let (l, g) = r?;
        total += l;
        grads.add_assign(&g);
    }
    Ok((total, grads))
}

/// Mean batch loss only (dropout mask honored).
pub fn batch_loss(model: &RnnModel, inputs: &BatchInputs) -> Result<f64> {
    let p = &model.params;
    let (mut h, mut c) = initial_state(p, &inputs.cond);
    for t in 0..inputs.x.ncols() {
        let step = lstm_step(p, model.activation, inputs.x.column(t), &h, &c)?;
        h = step.h;
        c = step.c;
    }
    if let Some(m) = &inputs.mask {
        h *= m;
    }
    let logits = head_logits(p, &h);
    let total: f64 =
        (0..inputs.len()).map(|r| loss(sigmoid(logits[[r, inputs.target_axis[r]]]), inputs.target[r] > 0.5)).sum();
    Ok(total / inputs.len() as f64)
}

/// Hidden states and head probabilities along one sequence.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// `h_0 ..= h_L`.
    pub hidden: Vec<Array1<f64>>,
    /// Head probabilities at every state, strictly inside `(0, 1)`.
    pub probs: Vec<[f64; 3]>,
}

/// Runs the network over already-normalized inputs in consumption order.
pub fn forward(
    model: &RnnModel,
    inputs: &[f64],
    cond: Conditioning,
    dropout: Option<&Array1<f64>>,
) -> Result<ForwardTrace> {
    let x = Array2::from_shape_vec((1, inputs.len()), inputs.to_vec()).expect("shape");
    let cond = Array2::from_shape_vec((1, CONDITIONING_WIDTH), cond.vector().to_vec()).expect("shape");
    let mask = dropout.map(|m| m.clone().insert_axis(NdAxis(0)));
    let (hidden, probs) = run_sequences(model, &x, &cond, mask.as_ref(), true)?;
    Ok(ForwardTrace {
        hidden: hidden.expect("requested").into_iter().map(|h| h.row(0).to_owned()).collect(),
        probs: probs.into_iter().next().expect("one row"),
    })
}

/// Batched inference: head probabilities for every row at every state.
pub fn predict_batch(model: &RnnModel, x: &Array2<f64>, cond: &Array2<f64>) -> Result<Vec<Vec<[f64; 3]>>> {
    run_sequences(model, x, cond, None, false).map(|(_, p)| p)
}

type Sequences = (Option<Vec<Array2<f64>>>, Vec<Vec<[f64; 3]>>);

fn run_sequences(
    model: &RnnModel,
    x: &Array2<f64>,
    cond: &Array2<f64>,
    mask: Option<&Array2<f64>>,
    keep_hidden: bool,
) -> Result<Sequences> {
    let p = &model.params;
    let b = x.nrows();
    let l = x.ncols();
    let mut probs = vec![Vec::with_capacity(l + 1); b];
    let mut hidden = keep_hidden.then(|| Vec::with_capacity(l + 1));
    let (mut h, mut c) = initial_state(p, cond);
    let mut emit = |h: &Array2<f64>| -> Result<()> {
        let hd = match mask {
            Some(m) => h * m,
            None => h.clone(),
        };
        let logits = head_logits(p, &hd);
        for (r, row) in logits.rows().into_iter().enumerate() {
            let out = [row[0], row[1], row[2]].map(|v| clamp_prob(sigmoid(v)));
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric("non-finite head output"));
            }
            probs[r].push(out);
        }
        if let Some(hs) = hidden.as_mut() {
            hs.push(h.clone());
        }
        Ok(())
    };
    emit(&h)?;
    for t in 0..l {
        let step = lstm_step(p, model.activation, x.column(t), &h, &c)?;
        h = step.h;
        c = step.c;
        emit(&h)?;
    }
    Ok((hidden, probs))
}

/// ADAM moments for every parameter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Params,
    pub v: Params,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(hidden: usize) -> Self {
        AdamState { m: Params::zeros(hidden), v: Params::zeros(hidden), step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected ADAM update of `params` in place; `step` is the 1-based
/// update count.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    lr: f64,
    (beta1, beta2, eps): (f64, f64, f64),
) {
    let c1 = 1.0 - beta1.powf(step as f64);
    let c2 = 1.0 - beta2.powf(step as f64);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

pub fn adam_step(model: &mut RnnModel, grads: &Params, state: &mut AdamState, lr: f64) -> Result<()> {
    if grads.hidden() != model.hidden() || state.m.hidden() != model.hidden() {
        return Err(Error::invalid("gradient / optimizer shapes do not match the model"));
    }
    state.step += 1;
    let hyper = (state.beta1, state.beta2, state.eps);
    let step = state.step;
    for (((p, g), m), v) in
        model.params.slices_mut().into_iter().zip(grads.slices()).zip(state.m.slices_mut()).zip(state.v.slices_mut())
    {
        adam_update(p, g, m, v, step, lr, hyper);
    }
    Ok(())
}

/// Rescales `grads` so that its global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut Params, max_norm: f64) -> f64 {
    let norm = grads.norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden_size: usize,
    pub activation: Activation,
    pub lr_start: f64,
    pub lr_end: f64,
    pub dropout_start: f64,
    pub dropout_end: f64,
    pub clip_norm: f64,
    /// Fraction of training records given the uniform "unknown" conditioning.
    pub unknown_fraction: f64,
    /// Gradient shards per batch; `0` uses the rayon pool size.
    pub workers: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: DEFAULT_BATCH_SIZE,
            hidden_size: DEFAULT_HIDDEN,
            activation: Activation::Tanh,
            lr_start: 1e-3,
            lr_end: 1e-6,
            dropout_start: 0.3,
            dropout_end: 0.0,
            clip_norm: 5.0,
            unknown_fraction: 0.0,
            workers: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be positive"));
        }
        if self.hidden_size == 0 || self.hidden_size > MAX_HIDDEN {
            return Err(Error::invalid(format!("hidden_size must be in 1..={MAX_HIDDEN}")));
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0) || !self.lr_start.is_finite() {
            return Err(Error::invalid("learning rates must be positive"));
        }
        for d in [self.dropout_start, self.dropout_end] {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::invalid("dropout rates must lie in [0, 1)"));
            }
        }
        if !(0.0..=1.0).contains(&self.unknown_fraction) {
            return Err(Error::invalid("unknown_fraction must lie in [0, 1]"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::invalid("clip_norm must be positive"));
        }
        Ok(())
    }

    /// Geometric interpolation from `lr_start` (first epoch) to `lr_end` (last).
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.lr_start;
        }
        let frac = epoch as f64 / (self.epochs - 1) as f64;
        self.lr_start * (self.lr_end / self.lr_start).powf(frac)
    }

    /// Linear interpolation from `dropout_start` to `dropout_end`.
    pub fn dropout(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.dropout_start;
        }
        let frac = epoch as f64 / (self.epochs - 1) as f64;
        self.dropout_start + (self.dropout_end - self.dropout_start) * frac
    }

    fn shards(&self) -> usize {
        if self.workers == 0 {
            rayon::current_num_threads()
        } else {
            self.workers
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub learning_rate: f64,
    pub dropout: f64,
    pub train_loss: f64,
    pub eval_loss: f64,
}

#[derive(Debug)]
pub struct Divergence {
    pub epoch: usize,
    pub reason: String,
    /// Model at the end of the last completed epoch (or the initial model).
    pub checkpoint: RnnModel,
    pub history: Vec<EpochStats>,
}

fn epoch_seed(seed: u64, epoch: usize, salt: u64) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt.wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Mean final-step loss over a dataset without dropout.
pub fn evaluate(model: &RnnModel, dataset: &Dataset, batch_size: usize) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut total = 0.0;
    for batch in batches(dataset, batch_size, 0)? {
        let inputs = BatchInputs::from_records(&batch.records, model.direction, &model.norm, 0.0, &mut rng)?;
        total += batch_loss(model, &inputs)? * inputs.len() as f64;
    }
    Ok(total / dataset.len() as f64)
}

/// Trains a model of `direction` on `train_set`, reporting per-epoch train
/// and evaluation loss. Normalization statistics come from the training set.
pub fn train(
    train_set: &Dataset,
    eval_set: &Dataset,
    cfg: &TrainConfig,
    direction: Direction,
) -> Result<(RnnModel, Vec<EpochStats>)> {
    train_with_progress(train_set, eval_set, cfg, direction, |_| {})
}

pub fn train_with_progress(
    train_set: &Dataset,
    eval_set: &Dataset,
    cfg: &TrainConfig,
    direction: Direction,
    mut progress: impl FnMut(&EpochStats),
) -> Result<(RnnModel, Vec<EpochStats>)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let norm = train_set.norm_stats()?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = RnnModel::init(cfg.hidden_size, cfg.activation, direction, norm, &mut init_rng);
    let mut adam = AdamState::new(cfg.hidden_size);
    let mut history = Vec::with_capacity(cfg.epochs);
    let shards = cfg.shards();

    for epoch in 0..cfg.epochs {
        let checkpoint = model.clone();
        let lr = cfg.learning_rate(epoch);
        let rate = cfg.dropout(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(cfg.seed, epoch, 1));
        let (mut sum_loss, mut seen) = (0.0, 0usize);
        let epoch_batches: Vec<Batch> = batches(train_set, cfg.batch_size, epoch_seed(cfg.seed, epoch, 2))?.collect();
        let outcome: Result<()> = (|| {
            for batch in &epoch_batches {
                let mut inputs =
                    BatchInputs::from_records(&batch.records, direction, &norm, cfg.unknown_fraction, &mut rng)?;
                if rate > 0.0 {
                    inputs.mask = Some(dropout_mask(inputs.len(), cfg.hidden_size, rate, &mut rng));
                }
                let (batch_loss, mut grads) = backward(&model, &inputs, shards)?;
                clip_global_norm(&mut grads, cfg.clip_norm);
                adam_step(&mut model, &grads, &mut adam, lr)?;
                sum_loss += batch_loss * inputs.len() as f64;
                seen += inputs.len();
            }
            Ok(())
        })();
        let eval_loss = match outcome {
            Ok(()) if eval_set.is_empty() => f64::NAN,
            Ok(()) => evaluate(&model, eval_set, cfg.batch_size).unwrap_or(f64::NAN),
            Err(e) => return Err(diverged(epoch, e.to_string(), checkpoint, history)),
        };
        if !eval_set.is_empty() && !eval_loss.is_finite() {
            return Err(diverged(epoch, "evaluation loss is not finite".into(), checkpoint, history));
        }
        let stats =
            EpochStats { epoch, learning_rate: lr, dropout: rate, train_loss: sum_loss / seen as f64, eval_loss };
        progress(&stats);
        history.push(stats);
    }
    Ok((model, history))
}

fn diverged(epoch: usize, reason: String, checkpoint: RnnModel, history: Vec<EpochStats>) -> Error {
    Error::Diverged(Box::new(Divergence { epoch, reason, checkpoint, history }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorSpec {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub architecture: String,
    pub input_size: usize,
    pub hidden_size: usize,
    pub direction: Direction,
    pub activation: Activation,
    pub normalization: NormStats,
    pub tensors: Vec<TensorSpec>,
}

impl RnnModel {
    pub fn manifest(&self) -> ModelManifest {
        let n = self.hidden();
        ModelManifest {
            architecture: "lstm".into(),
            input_size: 1,
            hidden_size: n,
            direction: self.direction,
            activation: self.activation,
            normalization: self.norm,
            tensors: TENSOR_NAMES
                .iter()
                .zip(Params::shapes(n))
                .map(|(name, (r, c))| TensorSpec { name: (*name).into(), shape: [r, c] })
                .collect(),
        }
    }

    /// `"QRNN" | u16 version | u32 manifest_len | manifest JSON | f64 LE parameters`.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest())?;
        let mut out = Vec::with_capacity(10 + manifest.len() + 8 * self.params.len());
        out.extend_from_slice(&MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(&manifest);
        for s in self.params.slices() {
            for v in s {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<RnnModel> {
        let truncated = |offset: usize, needed: usize| FormatError::Truncated {
            offset,
            needed,
            available: bytes.len().saturating_sub(offset),
        };
        if bytes.len() < 10 {
            return Err(truncated(0, 10).into());
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if magic != MODEL_MAGIC {
            return Err(FormatError::BadMagic(magic).into());
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != MODEL_VERSION {
            return Err(FormatError::UnsupportedVersion(version).into());
        }
        let mlen = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
        let body = bytes.get(10..10 + mlen).ok_or_else(|| truncated(10, mlen))?;
        let manifest: ModelManifest = serde_json::from_slice(body).map_err(|e| FormatError::Manifest(e.to_string()))?;
        let n = manifest.hidden_size;
        if manifest.architecture != "lstm" || manifest.input_size != 1 || n == 0 || n > MAX_HIDDEN {
            return Err(FormatError::Manifest("unsupported architecture or size".into()).into());
        }
        let norm = manifest.normalization;
        if !(norm.mean.is_finite() && norm.std.is_finite() && norm.std > 0.0) {
            return Err(FormatError::Manifest("invalid normalization".into()).into());
        }
        let expected = RnnModel::zeros(n, manifest.activation, manifest.direction, norm).manifest();
        if manifest.tensors != expected.tensors {
            return Err(FormatError::Manifest("tensor list does not match the architecture".into()).into());
        }
        let mut model = RnnModel::zeros(n, manifest.activation, manifest.direction, norm);
        let count = model.params.len();
        let start = 10 + mlen;
        let block = &bytes[start..];
        if block.len() < 8 * count {
            return Err(truncated(start, 8 * count).into());
        }
        if block.len() > 8 * count {
            return Err(FormatError::TrailingBytes(block.len() - 8 * count).into());
        }
        let flat: Vec<f64> =
            block.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(FormatError::Manifest("non-finite parameter".into()).into());
        }
        model.params.set_flat(&flat);
        Ok(model)
    }
}

pub fn write_model(path: impl AsRef<Path>, model: &RnnModel) -> Result<()> {
    fs::write(path, model.to_bytes()?)?;
    Ok(())
}

pub fn read_model(path: impl AsRef<Path>) -> Result<RnnModel> {
    RnnModel::from_bytes(&fs::read(path)?)
}
