//! End-to-end acceptance checks. Prints one `PASS` / `FAIL` line per
//! criterion and exits non-zero if any fails.
//!
//! Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test -p qtraj-cli --test acceptance -- 1 3 6`.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use qtraj::analysis::{
    bloch_ensemble, bootstrap_ci, calibrate, calibration_pairs, diffusion_map, drift_map, fit_params,
    initial_predictions, tomography, CalibrationReport, GridSpec, PhysParams,
};
use qtraj::data::{split, Dataset, TrajectoryRecord};
use qtraj::infer::{predict_dataset, smooth_pair, ConditionMode, PredictionSeries};
use qtraj::nn::{
    backward, batch_loss, dropout_mask, train_with_progress, Activation, BatchInputs, Conditioning, Direction,
    RnnModel, TrainConfig, CONDITIONING_WIDTH,
};
use qtraj::qubit::{Axis, Label};
use qtraj::sim::{generate_shot, generate_shots, lindblad_trajectory, retro_filter, shot_rng, sme_filter, SimConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn fmt_axes(v: [f64; 3]) -> String {
    format!("X {:.2e}, Y {:.2e}, Z {:.2e}", v[0], v[1], v[2])
}

fn eps_per_axis(report: &CalibrationReport) -> [f64; 3] {
    Axis::ALL.map(|a| report.epsilon(a).unwrap_or(f64::NAN))
}

// 1. SME correctness

fn sme_correctness() -> Outcome {
    let free = SimConfig { meas_dephasing: 0.0, ..SimConfig::default() };
    let mut rng = shot_rng(101, 0);
    let shot = generate_shot(Label::new(Axis::Z, true), Axis::Z, 4.0, &free, &mut rng, true).unwrap();
    let states = shot.true_rho_series.unwrap();
    let rabi_err = states
        .iter()
        .enumerate()
        .map(|(k, rho)| (rho.bloch().z - (free.rabi_freq * k as f64 * free.record_dt).cos()).abs())
        .fold(0.0, f64::max);

    let cfg = SimConfig::default();
    let n = 20_000;
    let prep = Label::new(Axis::Z, true);
    let paths: Vec<Vec<[f64; 3]>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = shot_rng(102, i as u64);
            let shot = generate_shot(prep, Axis::Z, 4.0, &cfg, &mut rng, true).unwrap();
            shot.true_rho_series.unwrap().iter().map(|r| r.bloch().as_array()).collect()
        })
        .collect();
    let reference = lindblad_trajectory(prep, paths[0].len() - 1, &cfg);
    let mut worst_z = 0.0f64;
    let mut exact_ok = true;
    for (t, r) in reference.iter().enumerate() {
        for k in 0..3 {
            let (mut s, mut s2) = (0.0, 0.0);
            for p in &paths {
                s += p[t][k];
                s2 += p[t][k] * p[t][k];
            }
            let mean = s / n as f64;
            let var = (s2 / n as f64 - mean * mean).max(0.0) * n as f64 / (n - 1) as f64;
            let se = (var / n as f64).sqrt();
            let dev = (mean - r[k]).abs();
            if se > 1e-12 {
                worst_z = worst_z.max(dev / se);
            } else if dev > 1e-9 {
                exact_ok = false;
            }
        }
    }
    outcome(
        rabi_err < 1e-3 && worst_z <= 3.0 && exact_ok,
        format!(
            "gamma=0 max |z - cos(Wt)| = {rabi_err:.2e} (tol 1e-3); 2e4-path mean vs Lindblad max deviation {worst_z:.2} SE (tol 3)"
        ),
    )
}

// 2. Oracle calibration

fn oracle_calibration() -> Outcome {
    let cfg = SimConfig { seed: 202, ..SimConfig::default() };
    let shots = generate_shots(&cfg, 100_000).unwrap();
    let ds = Dataset::from_shots(&cfg, &shots).unwrap();
    let series: Vec<PredictionSeries> =
        ds.records.par_iter().map(|r| sme_filter(&r.voltages_f64(), r.prep, &cfg).unwrap()).collect();
    let pairs = calibration_pairs(&series, &ds.records, Direction::Forward).unwrap();
    let eps = eps_per_axis(&calibrate(&pairs, 0.01).unwrap());
    outcome(eps.iter().all(|e| *e < 5e-3), format!("filter eps on 1e5 traces: {} (tol 5e-3)", fmt_axes(eps)))
}

// 3. Gradient integrity

fn gradient_check(activation: Activation, seed: u64) -> f64 {
    let n = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let norm = qtraj::data::NormStats { mean: 0.0, std: 1.0 };
    let mut model = RnnModel::init(n, activation, Direction::Forward, norm, &mut rng);
    for s in model.params.slices_mut() {
        s.iter_mut().for_each(|v| *v = rng.gen_range(-0.7..0.7));
    }
    let b = 8;
    let mut cond = ndarray::Array2::zeros((b, CONDITIONING_WIDTH));
    for r in 0..b {
        let c = if r == b - 1 { Conditioning::Unknown } else { Conditioning::Known(Label::all()[r % 6]) };
        for (k, v) in c.vector().into_iter().enumerate() {
            cond[[r, k]] = v;
        }
    }
    let inputs = BatchInputs {
        x: ndarray::Array2::from_shape_fn((b, 5), |_| rng.gen_range(-2.0..2.0)),
        cond,
        target_axis: (0..b).map(|r| r % 3).collect(),
        target: (0..b).map(|r| f64::from(r % 2 == 0)).collect(),
        mask: Some(dropout_mask(b, n, 0.25, &mut rng)),
    };
    let (_, grads) = backward(&model, &inputs, 1).unwrap();
    let analytic = grads.to_flat();
    let base = model.params.to_flat();
    let h = 1e-6;
    let mut worst = 0.0f64;
    for k in 0..base.len() {
        let mut probe = model.clone();
        let mut p = base.clone();
        p[k] = base[k] + h;
        probe.params.set_flat(&p);
        let lp = batch_loss(&probe, &inputs).unwrap();
        p[k] = base[k] - h;
        probe.params.set_flat(&p);
        let lm = batch_loss(&probe, &inputs).unwrap();
        let fd = (lp - lm) / (2.0 * h);
        let rel = (analytic[k] - fd).abs() / analytic[k].abs().max(fd.abs()).max(1e-5);
        worst = worst.max(rel);
    }
    worst
}

fn gradient_integrity() -> Outcome {
    let tanh = gradient_check(Activation::Tanh, 301);
    let relu = gradient_check(Activation::Relu, 302);
    outcome(
        tanh < 1e-4 && relu < 1e-4,
        format!("max relative error tanh {tanh:.2e}, relu {relu:.2e} (tol 1e-4; 4 units, 5 steps)"),
    )
}

// 6. Smoothing identities

fn smoothing_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(601);
    let (mut ident, mut sym, mut add) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..1_000_000 {
        let a: f64 = rng.gen_range(1e-6..1.0 - 1e-6);
        let b: f64 = rng.gen_range(1e-6..1.0 - 1e-6);
        ident = ident.max((smooth_pair(a, 0.5) - a).abs());
        sym = sym.max((smooth_pair(a, b) - smooth_pair(b, a)).abs());
        let direct = a * b / (a * b + (1.0 - a) * (1.0 - b));
        add = add.max((smooth_pair(a, b) - direct).abs());
    }
    outcome(
        ident <= 1e-12 && sym <= 1e-12 && add <= 1e-12,
        format!("1e6 pairs: |S(a,0.5)-a| {ident:.1e}, |S(a,b)-S(b,a)| {sym:.1e}, log-odds sum vs direct product formula {add:.1e} (tol 1e-12)"),
    )
}

// 9. Reproducibility

fn run_cli(dir: &Path, args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_qtraj"))
        .current_dir(dir)
        .env_remove("QTRAJ_SEED")
        .args(args)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn reproducibility() -> Outcome {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let common = ["--seed", "909", "--workers", "1"];
    let steps: [&[&str]; 7] = [
        &["simulate", "--out", "d.qtrj", "--traces", "3600"],
        &[
            "train",
            "--data",
            "d.qtrj",
            "--direction",
            "forward",
            "--model-out",
            "f.qrnn",
            "--epochs",
            "2",
            "--hidden",
            "16",
            "--batch-size",
            "256",
        ],
        &[
            "train",
            "--data",
            "d.qtrj",
            "--direction",
            "backward",
            "--model-out",
            "b.qrnn",
            "--epochs",
            "2",
            "--hidden",
            "16",
            "--batch-size",
            "256",
            "--unknown-fraction",
            "0.2",
        ],
        &["predict", "--model", "f.qrnn", "--data", "d.qtrj", "--out", "pf.csv"],
        &["validate", "--predictions", "pf.csv", "--data", "d.qtrj", "--out", "v.json"],
        &["filter", "--data", "d.qtrj", "--out", "filter.csv"],
        &["tomography", "--model", "b.qrnn", "--data", "d.qtrj", "--out", "t.json", "--resamples", "200"],
    ];
    for dir in &dirs {
        for step in steps {
            let args: Vec<&str> = common.iter().chain(step.iter()).copied().collect();
            if !run_cli(dir.path(), &args) {
                return outcome(false, format!("command {step:?} failed"));
            }
        }
    }
    let files = [
        "d.qtrj",
        "f.qrnn",
        "b.qrnn",
        "f.qrnn.history.csv",
        "pf.csv",
        "v.json",
        "v.json.bins.csv",
        "filter.csv",
        "t.json",
        "d.qtrj.manifest.json",
        "t.json.manifest.json",
    ];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| std::fs::read(dirs[0].path().join(f)).ok() != std::fs::read(dirs[1].path().join(f)).ok())
        .collect();
    outcome(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} artifacts byte-identical across two single-thread runs", files.len())
        } else {
            format!("differing artifacts: {differing:?}")
        },
    )
}

// Desk-scale training shared by 4, 5, 7 and 8.

struct DeskScale {
    cfg: SimConfig,
    eval: Dataset,
    forward: RnnModel,
    backward: RnnModel,
}

const DESK_TRAIN: usize = 200_000;
const DESK_EVAL: usize = 50_000;

fn desk_train_config(seed: u64, unknown_fraction: f64) -> TrainConfig {
    TrainConfig { batch_size: 256, seed, unknown_fraction, ..TrainConfig::default() }
}

fn desk_scale() -> DeskScale {
    let cfg = SimConfig { seed: 404, ..SimConfig::default() };
    let t = Instant::now();
    let shots = generate_shots(&cfg, (DESK_TRAIN + DESK_EVAL) as u64).unwrap();
    let all = Dataset::from_shots(&cfg, &shots).unwrap();
    drop(shots);
    let (train, eval) = split(&all, DESK_EVAL as f64 / (DESK_TRAIN + DESK_EVAL) as f64, 405).unwrap();
    drop(all);
    eprintln!("  desk scale: {} train / {} eval traces simulated in {:.0?}", train.len(), eval.len(), t.elapsed());
    let mut models = Vec::new();
    for (direction, tc) in
        [(Direction::Forward, desk_train_config(406, 0.0)), (Direction::Backward, desk_train_config(407, 0.2))]
    {
        let t = Instant::now();
        let (model, _) = train_with_progress(&train, &eval, &tc, direction, |s| {
            eprintln!(
                "  {direction} epoch {} lr {:.1e} dropout {:.2} train {:.4} eval {:.4} ({:.0?})",
                s.epoch,
                s.learning_rate,
                s.dropout,
                s.train_loss,
                s.eval_loss,
                t.elapsed()
            )
        })
        .unwrap();
        models.push(model);
    }
    let backward = models.pop().unwrap();
    let forward = models.pop().unwrap();
    DeskScale { cfg, eval, forward, backward }
}

// 4. Learning at desk scale

fn filter_series(records: &[TrajectoryRecord], cfg: &SimConfig) -> Vec<PredictionSeries> {
    records.par_iter().map(|r| sme_filter(&r.voltages_f64(), r.prep, cfg).unwrap()).collect()
}

fn forward_learning(desk: &DeskScale) -> Outcome {
    let rnn = predict_dataset(&desk.forward, &desk.eval, ConditionMode::Labeled, desk.cfg.record_dt).unwrap();
    let pairs = calibration_pairs(&rnn, &desk.eval.records, Direction::Forward).unwrap();
    let eps = eps_per_axis(&calibrate(&pairs, 0.01).unwrap());
    let oracle = filter_series(&desk.eval.records, &desk.cfg);
    let (mut sum, mut count) = (0.0, 0usize);
    for (a, b) in rnn.iter().zip(&oracle) {
        for (pa, pb) in a.probs.iter().zip(&b.probs) {
            for k in 0..3 {
                sum += (pa[k] - pb[k]).abs();
                count += 1;
            }
        }
    }
    let mad = sum / count as f64;
    outcome(
        eps.iter().all(|e| *e <= 2e-2) && mad <= 0.05,
        format!(
            "forward eps on 5e4 held-out: {} (tol 2e-2); mean |P_rnn - P_filter| {mad:.4} (tol 0.05)",
            fmt_axes(eps)
        ),
    )
}

// 5. Backward parity

fn backward_parity(desk: &DeskScale) -> Outcome {
    let rnn = predict_dataset(&desk.backward, &desk.eval, ConditionMode::Labeled, desk.cfg.record_dt).unwrap();
    let pairs = calibration_pairs(&rnn, &desk.eval.records, Direction::Backward).unwrap();
    let eps = eps_per_axis(&calibrate(&pairs, 0.01).unwrap());
    outcome(eps.iter().all(|e| *e <= 2e-2), format!("backward eps per preparation axis: {} (tol 2e-2)", fmt_axes(eps)))
}

// 7. Parameter recovery

fn relative_errors(p: &PhysParams, cfg: &SimConfig) -> [f64; 4] {
    let truth = [cfg.rabi_freq, cfg.meas_dephasing, cfg.meas_dephasing * cfg.efficiency, cfg.efficiency];
    let got = [p.rabi_freq.value, p.gamma_phi.value, p.gamma_m.value, p.efficiency.value];
    [0, 1, 2, 3].map(|k| (got[k] - truth[k]).abs() / truth[k])
}

fn fit(series: &[PredictionSeries], dt: f64) -> PhysParams {
    let ens = bloch_ensemble(series);
    let grid = GridSpec::default();
    fit_params(&drift_map(&ens, dt, grid).unwrap(), &diffusion_map(&ens, dt, grid).unwrap()).unwrap()
}

fn parameter_recovery(desk: &DeskScale) -> Outcome {
    let cfg = SimConfig { seed: 707, ..desk.cfg.clone() };
    let shots = generate_shots(&cfg, 100_000).unwrap();
    let ds = Dataset::from_shots(&cfg, &shots).unwrap();
    drop(shots);
    let oracle = fit(&filter_series(&ds.records, &cfg), cfg.record_dt);
    let rnn_series = predict_dataset(&desk.forward, &ds, ConditionMode::Labeled, cfg.record_dt).unwrap();
    let rnn = fit(&rnn_series, cfg.record_dt);
    let (eo, er) = (relative_errors(&oracle, &cfg), relative_errors(&rnn, &cfg));
    let within = |e: [f64; 4], tol: [f64; 4]| e.iter().zip(tol).all(|(e, t)| *e <= t);
    let show = |e: [f64; 4]| {
        format!("W {:.1}% gphi {:.1}% gm {:.1}% eta {:.1}%", 100.0 * e[0], 100.0 * e[1], 100.0 * e[2], 100.0 * e[3])
    };
    outcome(
        within(eo, [0.03, 0.10, 0.10, 0.15]) && within(er, [0.10, 0.25, 0.25, 0.35]),
        format!("filter ensemble: {} (tol 3/10/10/15%); RNN ensemble: {} (tol 10/25/25/35%)", show(eo), show(er)),
    )
}

// 8. Tomography

fn tomography_check(desk: &DeskScale) -> Outcome {
    let cfg = &desk.cfg;
    let per_prep = 20_000usize;
    let mut lines = Vec::new();
    let (mut classified, mut contained) = (0, 0);
    for (p, prep) in Label::all().into_iter().enumerate() {
        let records: Vec<TrajectoryRecord> = (0..per_prep)
            .into_par_iter()
            .map(|i| {
                let axis = Axis::ALL[i % 3];
                let duration = cfg.durations[(i / 3) % cfg.durations.len()];
                let mut rng = shot_rng(808 + p as u64, i as u64);
                TrajectoryRecord::from(&generate_shot(prep, axis, duration, cfg, &mut rng, false).unwrap())
            })
            .collect();
        let ds = Dataset::new(Some(cfg.clone()), records).unwrap();
        let rnn =
            initial_predictions(&predict_dataset(&desk.backward, &ds, ConditionMode::Unknown, cfg.record_dt).unwrap());
        let oracle: Vec<[f64; 3]> =
            ds.records.par_iter().map(|r| retro_filter(&r.voltages_f64(), None, cfg).unwrap().probs[0]).collect();
        let est = tomography(&rnn).unwrap();
        let reference = tomography(&oracle).unwrap();
        let ci = bootstrap_ci(&rnn, 1000, 809).unwrap();
        let inside = (0..3).all(|k| ci[k][0] <= reference.bloch[k] && reference.bloch[k] <= ci[k][1]);
        classified += usize::from(est.nearest == prep);
        contained += usize::from(inside);
        lines.push(format!(
            "      {}: rnn ({:+.3}, {:+.3}, {:+.3}) -> {}; oracle ({:+.3}, {:+.3}, {:+.3}) -> {}; CI {}",
            qtraj_cli::label_name(prep),
            est.bloch[0],
            est.bloch[1],
            est.bloch[2],
            qtraj_cli::label_name(est.nearest),
            reference.bloch[0],
            reference.bloch[1],
            reference.bloch[2],
            qtraj_cli::label_name(reference.nearest),
            if inside { "contains oracle" } else { "misses oracle" },
        ));
    }
    outcome(
        classified == 6 && contained == 6,
        format!(
            "nearest-cardinal {classified}/6 (need 6/6); 95% CI contains oracle value {contained}/6 (need 6/6)\n{}",
            lines.join("\n")
        ),
    )
}

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run = |k: u32| wanted.is_empty() || wanted.contains(&k);
    let mut results: Vec<(u32, &str, Outcome, f64)> = Vec::new();
    let mut record = |k: u32, name: &'static str, f: &dyn Fn() -> Outcome| {
        let t = Instant::now();
        let o = f();
        let secs = t.elapsed().as_secs_f64();
        println!("{} [{k}] {name}: {} ({secs:.1} s)", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((k, name, o, secs));
    };
    if run(1) {
        record(1, "SME correctness", &sme_correctness);
    }
    if run(2) {
        record(2, "oracle calibration", &oracle_calibration);
    }
    if run(3) {
        record(3, "gradient integrity", &gradient_integrity);
    }
    if run(6) {
        record(6, "smoothing identities", &smoothing_identities);
    }
    if run(9) {
        record(9, "reproducibility", &reproducibility);
    }
    if [4, 5, 7, 8].iter().any(|&k| run(k)) {
        let t = Instant::now();
        let desk = desk_scale();
        eprintln!("  desk-scale training took {:.0?}", t.elapsed());
        if run(4) {
            record(4, "learning at desk scale", &|| forward_learning(&desk));
        }
        if run(5) {
            record(5, "backward parity", &|| backward_parity(&desk));
        }
        if run(7) {
            record(7, "parameter recovery", &|| parameter_recovery(&desk));
        }
        if run(8) {
            record(8, "tomography", &|| tomography_check(&desk));
        }
    }
    let failed = results.iter().filter(|r| !r.2.pass).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
