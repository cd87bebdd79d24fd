//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

mod common;

use std::f64::consts::PI;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use crnn::cells::{blstm_forward, lstm_forward, BlstmParams, BlstmSource, LstmParams};
use crnn::data::{gen_order_task, log_mel, MelConfig};
use crnn::framing::{make_windows, window_count, WindowSpec};
use crnn::io::encode_params;
use crnn::layers::{crnn_layer_forward, layer_param_count, CrnnLayerConfig, ExtractorKind, LayerParams, Reduction, StateSource};
use crnn::metrics::{per_class_recall, ua_recall};
use crnn::model::{ClassifierKind, ModelConfig};
use crnn::training::{evaluate, grad_check, layer_grad_check, train, AdamConfig, AdamState, TrainConfig, DEFAULT_FD_STEP};
use crnn::{Error, Matrix, Parameters, Rng};

type Check = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
}

// 1 -------------------------------------------------------------------------

const GRAD_TOL: f64 = 1e-5;
const GRAD_BUDGET: Duration = Duration::from_secs(120);

fn gradient_fidelity() -> Check {
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    let mut runs = 0;
    for (name, cfg) in common::layer_cases() {
        for seed in [1, 2, 3] {
            let r = layer_grad_check(&cfg, 2, seed).map_err(|e| format!("{name}: {e}"))?;
            ensure(r.max_rel_error() < GRAD_TOL, || {
                format!("{name} seed {seed}: max rel error {:.3e}", r.max_rel_error())
            })?;
            worst = worst.max(r.max_rel_error());
            runs += 1;
        }
    }
    for (name, cfg) in common::toy_models() {
        for seed in [1, 2, 3] {
            let r = grad_check(&cfg, seed, DEFAULT_FD_STEP).map_err(|e| format!("{name}: {e}"))?;
            ensure(r.max_rel_error() < GRAD_TOL, || {
                format!("{name} seed {seed}: max rel error {:.3e}", r.max_rel_error())
            })?;
            worst = worst.max(r.max_rel_error());
            runs += 1;
        }
    }
    let elapsed = started.elapsed();
    ensure(elapsed < GRAD_BUDGET, || format!("took {elapsed:.1?}, budget {GRAD_BUDGET:?}"))?;
    Ok(format!("{runs} checks, max rel error {worst:.2e}, {elapsed:.1?}"))
}

// 2 -------------------------------------------------------------------------

fn parameter_counts() -> Check {
    let k = 3;
    let n = 4;
    let layer = |kind, r1: usize| {
        let window = WindowSpec { width: r1, shift: 1 };
        let cfg = CrnnLayerConfig::new(kind, window, None, n, StateSource::Hidden, Reduction::Last);
        let counted = layer_param_count(&cfg, k);
        let built = LayerParams::new(&cfg, k, &mut Rng::new(0)).num_params();
        (counted, built)
    };
    for kind in [ExtractorKind::Clstm, ExtractorKind::Cblstm] {
        let base = layer(kind, 1).1;
        for r1 in 1..=10 {
            let (counted, built) = layer(kind, r1);
            ensure(counted == built && built == base, || {
                format!("{kind} r1={r1}: {built} parameters, {base} at r1=1")
            })?;
        }
    }
    for r1 in 1..=10 {
        let (counted, built) = layer(ExtractorKind::Conv, r1);
        let expected = n * (k * r1 + 1);
        ensure(counted == expected && built == expected, || {
            format!("conv r1={r1}: {built}, expected {expected}")
        })?;
    }
    for r1 in 1..10 {
        let (a, b) = (layer(ExtractorKind::ExtendedClstm, r1).1, layer(ExtractorKind::ExtendedClstm, r1 + 1).1);
        ensure(b - a == 4 * n * k, || {
            format!("extended_clstm r1={r1}->{}: grew by {}, expected {}", r1 + 1, b - a, 4 * n * k)
        })?;
    }
    Ok(format!(
        "k={k} n={n}: clstm {} and cblstm {} fixed, conv n(k*r1+1), extended +{} per frame",
        layer(ExtractorKind::Clstm, 1).1,
        layer(ExtractorKind::Cblstm, 1).1,
        4 * n * k
    ))
}

// 3 -------------------------------------------------------------------------

const ORDER_TARGET: f64 = 0.95;
const ORDER_BUDGET: Duration = Duration::from_secs(300);

fn order_model(kind: ExtractorKind, features: usize) -> ModelConfig {
    let mut layer = CrnnLayerConfig::new(
        kind,
        WindowSpec { width: 5, shift: 2 },
        Some(WindowSpec { width: 2, shift: 2 }),
        features,
        StateSource::Cell,
        Reduction::Max,
    );
    if kind == ExtractorKind::Conv {
        layer.source = StateSource::Hidden;
        layer.reduction = Reduction::Last;
    }
    ModelConfig {
        input_dim: 4,
        layers: vec![layer],
        classifier: ClassifierKind::Lstm,
        classifier_hidden: 8,
        dense: 16,
        classes: 2,
        aggregation: crnn::layers::Aggregation::All,
    }
}

fn order_task() -> Check {
    let started = Instant::now();
    let (k, l) = (4, 25);
    let mut rng = Rng::new(2024);
    let train_set = gen_order_task(2000, k, l, &mut rng).map_err(|e| e.to_string())?;
    let valid = gen_order_task(500, k, l, &mut rng).map_err(|e| e.to_string())?;
    let test = gen_order_task(500, k, l, &mut rng).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        seed: 7,
        ..TrainConfig::default()
    };

    let clstm = order_model(ExtractorKind::Clstm, 16);
    let out = train(&cfg, &clstm, &train_set, &valid).map_err(|e| e.to_string())?;
    let ua = evaluate(&out.model, &test).map_err(|e| e.to_string())?.ua_recall;
    let clstm_time = started.elapsed();

    // conv baseline with about as many extraction parameters
    let clstm_layer = layer_param_count(&clstm.layers[0], k);
    let conv_features = (clstm_layer as f64 / (k * 5 + 1) as f64).round() as usize;
    let conv = order_model(ExtractorKind::Conv, conv_features);
    let conv_out = train(&cfg, &conv, &train_set, &valid).map_err(|e| e.to_string())?;
    let conv_ua = evaluate(&conv_out.model, &test).map_err(|e| e.to_string())?.ua_recall;
    println!(
        "      baseline conv n={conv_features} ({} layer params vs {clstm_layer}): test UA {:.4}, {} epochs",
        layer_param_count(&conv.layers[0], k),
        conv_ua,
        conv_out.history.len()
    );

    ensure(out.history.len() <= 100, || format!("{} epochs", out.history.len()))?;
    ensure(ua >= ORDER_TARGET, || format!("clstm test UA {ua:.4} < {ORDER_TARGET}"))?;
    ensure(clstm_time < ORDER_BUDGET, || format!("clstm training took {clstm_time:.1?}"))?;
    Ok(format!(
        "clstm test UA {ua:.4} (best epoch {} of {}), {clstm_time:.1?}",
        out.best_epoch,
        out.history.len()
    ))
}

// 4 -------------------------------------------------------------------------

fn framing_oracle() -> Check {
    let mut cases = 0;
    for l in 1..=20 {
        let x = Matrix::from_vec(2, l, (0..2 * l).map(|v| v as f64).collect()).unwrap();
        for r1 in 1..=20 {
            for r2 in 1..=20 {
                let spec = WindowSpec { width: r1, shift: r2 };
                let mut starts = Vec::new();
                let mut s = 0;
                while s + r1 <= l {
                    starts.push(s);
                    s += r2;
                }
                let count = window_count(l, spec);
                ensure(count == starts.len(), || {
                    format!("l={l} r1={r1} r2={r2}: count {count}, brute force {}", starts.len())
                })?;
                let windows = make_windows(&x, spec);
                ensure(windows.len() == starts.len(), || format!("l={l} r1={r1} r2={r2}: window list length"))?;
                for (w, &s) in windows.iter().zip(&starts) {
                    for row in 0..2 {
                        for j in 0..r1 {
                            ensure(w.shape() == (2, r1) && w.get(row, j) == x.get(row, s + j), || {
                                format!("l={l} r1={r1} r2={r2}: window at {s} differs")
                            })?;
                        }
                    }
                }
                cases += 1;
            }
        }
    }
    Ok(format!("{cases} (l, r1, r2) triples"))
}

// 5 -------------------------------------------------------------------------

fn blstm_symmetry() -> Check {
    let mut rng = Rng::new(55);
    for case in 0..100 {
        let k = 1 + case % 4;
        let n = 1 + (case / 4) % 5;
        let d = 1 + case % 3;
        let m = 1 + case % 9;
        let source = if case % 2 == 0 { BlstmSource::Hidden } else { BlstmSource::Cell };
        let p = BlstmParams::new(k, n, d, source, &mut rng);
        let xs: Vec<Vec<f64>> = (0..m).map(|_| (0..k).map(|_| rng.uniform(-2.0, 2.0)).collect()).collect();
        let y = blstm_forward(&p, &xs).map_err(|e| e.to_string())?.y;
        let rev: Vec<Vec<f64>> = xs.iter().rev().cloned().collect();
        let mut y_rev = blstm_forward(&p.swapped(), &rev).map_err(|e| e.to_string())?.y;
        y_rev.reverse();
        ensure(y == y_rev, || format!("case {case} (k={k} n={n} m={m}) not bit-identical"))?;
    }
    Ok("100 random cases bit-identical".into())
}

// 6 -------------------------------------------------------------------------

fn whole_sequence() -> Check {
    let mut rng = Rng::new(66);
    for case in 0..50 {
        let k = 1 + case % 5;
        let n = 1 + (case / 5) % 6;
        let l = 1 + case % 13;
        let p = LstmParams::new(k, n, &mut rng);
        let x = random_matrix(k, l, &mut rng);
        let cfg = CrnnLayerConfig::new(
            ExtractorKind::Clstm,
            WindowSpec { width: l, shift: 1 },
            None,
            n,
            StateSource::Hidden,
            Reduction::Last,
        );
        let out = crnn_layer_forward(&cfg, &LayerParams::Clstm { lstm: p.clone(), proj: None }, &x)
            .map_err(|e| e.to_string())?;
        let tr = lstm_forward(&p, &x.columns()).map_err(|e| e.to_string())?;
        ensure(out.shape() == (n, 1) && out.column(0) == tr.last_h(), || {
            format!("case {case} (k={k} n={n} l={l}) differs")
        })?;
    }
    Ok("50 random cases exact".into())
}

// 7 -------------------------------------------------------------------------

fn optimizer() -> Check {
    let cfg = AdamConfig::default();
    let mut rng = Rng::new(77);
    let params: Vec<f64> = (0..64).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let grads: Vec<f64> = (0..64).map(|i| rng.uniform(0.01, 5.0) * if i % 2 == 0 { 1.0 } else { -1.0 }).collect();

    let mut p = params.clone();
    let mut st = AdamState::new(p.len(), cfg);
    st.step(&mut p, &grads).map_err(|e| e.to_string())?;
    for i in 0..p.len() {
        let moved = params[i] - p[i];
        let g = grads[i];
        // first bias-corrected step is lr * g / (|g| + eps)
        let expect = cfg.lr * g / (g.abs() + cfg.epsilon);
        ensure(((moved - expect) / expect).abs() < 1e-6, || format!("coordinate {i}: moved {moved}, expected {expect}"))?;
        ensure(((moved.abs() - cfg.lr) / cfg.lr).abs() < 1e-6, || format!("coordinate {i}: |step| {} vs lr", moved.abs()))?;
    }

    let mut p = params.clone();
    let mut st = AdamState::new(p.len(), cfg);
    st.step(&mut p, &vec![0.0; params.len()]).map_err(|e| e.to_string())?;
    ensure(p == params, || "zero-gradient step moved parameters".into())?;

    let (g1, g2, x0) = (0.3, -1.7, 0.5);
    let (b1, b2, lr, eps) = (cfg.beta1, cfg.beta2, cfg.lr, cfg.epsilon);
    let m1 = (1.0 - b1) * g1;
    let v1 = (1.0 - b2) * g1 * g1;
    let x1 = x0 - lr * (m1 / (1.0 - b1)) / ((v1 / (1.0 - b2)).sqrt() + eps);
    let m2 = b1 * m1 + (1.0 - b1) * g2;
    let v2 = b2 * v1 + (1.0 - b2) * g2 * g2;
    let x2 = x1 - lr * (m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + eps);
    let mut x = [x0];
    let mut st = AdamState::new(1, cfg);
    st.step(&mut x, &[g1]).map_err(|e| e.to_string())?;
    ensure((x[0] - x1).abs() < 1e-12, || format!("step 1: {} vs {x1}", x[0]))?;
    st.step(&mut x, &[g2]).map_err(|e| e.to_string())?;
    ensure((x[0] - x2).abs() < 1e-12, || format!("step 2: {} vs {x2}", x[0]))?;
    Ok(format!("first step = lr on 64 coordinates, zero step no-op, trajectory {x2:.9}"))
}

// 8 -------------------------------------------------------------------------

fn mel(f: f64) -> f64 {
    1127.0 * (1.0 + f / 700.0).ln()
}

fn inv_mel(m: f64) -> f64 {
    700.0 * ((m / 1127.0).exp() - 1.0)
}

/// Filter energies of one frame by a direct DFT and triangles built here.
fn oracle_energies(frame: &[f64], rate: f64, n_fft: usize, filters: usize) -> Vec<f64> {
    let win = frame.len();
    let windowed: Vec<f64> = frame
        .iter()
        .enumerate()
        .map(|(i, s)| s * (0.5 - 0.5 * (2.0 * PI * i as f64 / (win - 1) as f64).cos()))
        .collect();
    let bins = n_fft / 2 + 1;
    let power: Vec<f64> = (0..bins)
        .map(|b| {
            let (mut re, mut im) = (0.0, 0.0);
            for (i, x) in windowed.iter().enumerate() {
                let a = -2.0 * PI * (b * i) as f64 / n_fft as f64;
                re += x * a.cos();
                im += x * a.sin();
            }
            re * re + im * im
        })
        .collect();
    let top = mel(rate / 2.0);
    let edge = |j: usize| inv_mel(top * j as f64 / (filters + 1) as f64);
    (0..filters)
        .map(|j| {
            let (lo, mid, hi) = (edge(j), edge(j + 1), edge(j + 2));
            (0..bins)
                .map(|b| {
                    let f = b as f64 * rate / n_fft as f64;
                    let w = if f > lo && f <= mid {
                        (f - lo) / (mid - lo)
                    } else if f > mid && f < hi {
                        (hi - f) / (hi - mid)
                    } else {
                        0.0
                    };
                    w * power[b]
                })
                .sum()
        })
        .collect()
}

fn dsp() -> Check {
    let cfg = MelConfig::default();
    let rate = 16_000u32;
    for samples in [400usize, 401, 559, 560, 561, 1000, 16_000, 16_123] {
        let m = log_mel(&vec![0.0; samples], rate, &cfg).map_err(|e| e.to_string())?;
        let expected = 1 + (samples - 400) / 160;
        ensure(m.shape() == (26, expected), || format!("{samples} samples: {:?} frames, expected {expected}", m.shape()))?;
        ensure(m.data().iter().all(|&v| v == cfg.log_floor.ln()), || format!("{samples} zero samples not at the floor"))?;
    }
    ensure(matches!(log_mel(&[0.0; 399], rate, &cfg), Err(Error::SequenceTooShort { .. })), || {
        "399 samples should be too short".into()
    })?;

    let tone: Vec<f64> = (0..4000).map(|i| (2.0 * PI * 1000.0 * i as f64 / rate as f64).sin()).collect();
    let m = log_mel(&tone, rate, &cfg).map_err(|e| e.to_string())?;
    let top = mel(rate as f64 / 2.0);
    let nearest = (0..26)
        .min_by(|&a, &b| {
            let da = (inv_mel(top * (a + 1) as f64 / 27.0) - 1000.0).abs();
            let db = (inv_mel(top * (b + 1) as f64 / 27.0) - 1000.0).abs();
            da.total_cmp(&db)
        })
        .unwrap();
    for t in [0, m.cols() / 2, m.cols() - 1] {
        let oracle = oracle_energies(&tone[t * 160..t * 160 + 400], rate as f64, 512, 26);
        let oracle_peak = (0..26).max_by(|&a, &b| oracle[a].total_cmp(&oracle[b])).unwrap();
        let col = m.column(t);
        let peak = (0..26).max_by(|&a, &b| col[a].total_cmp(&col[b])).unwrap();
        ensure(peak == nearest && oracle_peak == nearest, || {
            format!("frame {t}: peak filter {peak}, oracle {oracle_peak}, nearest center {nearest}")
        })?;
        for j in 0..26 {
            let want = oracle[j].max(cfg.log_floor).ln();
            ensure((col[j] - want).abs() < 1e-6 * want.abs().max(1.0), || {
                format!("frame {t} filter {j}: {} vs oracle {want}", col[j])
            })?;
        }
    }
    Ok(format!("frame counts, silence floor, 1 kHz peak at filter {nearest}"))
}

// 9 -------------------------------------------------------------------------

fn determinism() -> Check {
    let mut rng = Rng::new(9);
    let train_set = gen_order_task(64, 3, 15, &mut rng).map_err(|e| e.to_string())?;
    let valid = gen_order_task(32, 3, 15, &mut rng).map_err(|e| e.to_string())?;
    let mut model = ModelConfig::age_gender(Some(ExtractorKind::Cblstm), 3, 2).with_dims(4, 5, 6);
    model.layers[0].window = WindowSpec { width: 5, shift: 2 };
    let cfg = TrainConfig {
        max_epochs: 4,
        batch_size: 8,
        seed: 31,
        ..TrainConfig::default()
    };
    let run = || -> std::result::Result<(String, Vec<u8>), String> {
        let out = train(&cfg, &model, &train_set, &valid).map_err(|e| e.to_string())?;
        let metrics: String = out
            .history
            .iter()
            .map(|r| serde_json::to_string(r).unwrap() + "\n")
            .collect();
        Ok((metrics, encode_params(&out.model.params)))
    };
    let (m1, p1) = run()?;
    let (m2, p2) = run()?;
    ensure(m1 == m2, || "metric histories differ".into())?;
    ensure(p1 == p2, || "model encodings differ".into())?;
    Ok(format!("{} epochs, {} model bytes identical", m1.lines().count(), p1.len()))
}

// 10 ------------------------------------------------------------------------

fn ua_fixtures() -> Check {
    let ua = ua_recall(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).map_err(|e| e.to_string())?;
    ensure((ua - 0.75).abs() < 1e-12, || format!("(0.5, 1.0) gave {ua}"))?;
    let per = per_class_recall(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).map_err(|e| e.to_string())?;
    ensure(per == [0.5, 1.0], || format!("per class {per:?}"))?;
    let ua = ua_recall(&[0, 0, 0, 0, 1], &[0, 0, 0, 0, 1], 2).map_err(|e| e.to_string())?;
    ensure(ua == 1.0, || format!("perfect gave {ua}"))?;
    // 3 of 3, 1 of 2, 0 of 1
    let ua = ua_recall(&[0, 0, 0, 1, 0, 1], &[0, 0, 0, 1, 1, 2], 3).map_err(|e| e.to_string())?;
    ensure((ua - 0.5).abs() < 1e-12, || format!("three-class fixture gave {ua}"))?;
    let absent = ua_recall(&[0, 0], &[0, 0], 2);
    ensure(matches!(absent, Err(Error::EmptyClass(1))), || format!("absent class gave {absent:?}"))?;
    Ok("0.75, 1.0 and 0.5 fixtures, absent class rejected".into())
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Check); 10] = [
        ("gradient fidelity", gradient_fidelity),
        ("parameter counts", parameter_counts),
        ("synthetic order task", order_task),
        ("framing oracle", framing_oracle),
        ("blstm reversal symmetry", blstm_symmetry),
        ("whole-sequence equivalence", whole_sequence),
        ("optimizer", optimizer),
        ("dsp", dsp),
        ("determinism", determinism),
        ("ua recall", ua_fixtures),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why}", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
