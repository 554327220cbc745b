//! Shared test oracles. Nothing here calls the adjoint code: finite differences
//! only ever evaluate forward passes.

#![allow(dead_code)]

use densepath::engine::{Mode, Tape, Tensor, Var};
use densepath::Model;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f32 = 1e-3;
pub const FD_TOLERANCE: f32 = 1e-2;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, for ops with a kink there.
pub fn away_from_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05f32..1.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Distinct values spaced at least 0.05 apart, for max pooling.
pub fn distinct_values(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut data: Vec<f32> = (0..n).map(|i| i as f32 * 0.05 - n as f32 * 0.025).collect();
    data.shuffle(rng);
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `|analytic − fd| / max(1, |fd|)`
pub fn rel_err(analytic: f32, fd: f32) -> f32 {
    (analytic - fd).abs() / fd.abs().max(1.0)
}

/// Compares reverse-mode gradients of a scalar-valued `f` with central
/// differences for every element of every input. Returns the worst relative error.
pub fn check_inputs<F>(inputs: &[Tensor], f: F) -> f32
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let loss = f(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(v).shape())))
        .collect();

    let eval = |vals: &[Tensor]| -> f32 {
        let mut t = Tape::new();
        let vs: Vec<Var> = vals.iter().map(|x| t.input(x.clone())).collect();
        let l = f(&mut t, &vs);
        t.value(l).data()[0]
    };

    let mut worst = 0.0f32;
    for (i, input) in inputs.iter().enumerate() {
        for e in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[e] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[e] -= FD_STEP;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i].data()[e], fd));
        }
    }
    worst
}

/// Reduces an arbitrary output to a scalar with fixed random weights so every
/// output element contributes a distinct sensitivity.
pub fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Var {
    let shape = tape.value(y).shape().to_vec();
    let r = random_tensor(&mut rng(seed), &shape, -1.0, 1.0);
    let rv = tape.input(r);
    let p = tape.mul(y, rv).unwrap();
    tape.sum(p)
}

/// Cross-entropy of a train-mode pass with dropout drawn from a fixed seed.
pub fn model_loss(model: &Model, x: &Tensor, labels: &[usize], dropout_seed: u64) -> (Tape, Var) {
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let mut r = rng(dropout_seed);
    let (logits, _) = model
        .record(&mut tape, xv, Mode::Train, model.config().dropout_rate, &mut r)
        .unwrap();
    let loss = tape.softmax_cross_entropy(logits, labels).unwrap();
    (tape, loss)
}

/// Checks parameter gradients of the full model against central differences.
/// `per_tensor` limits how many elements of each parameter are probed (`None` = all).
/// Returns `(worst relative error, elements probed)`.
pub fn check_model(model: &Model, x: &Tensor, labels: &[usize], per_tensor: Option<usize>, seed: u64) -> (f32, usize) {
    let (tape, loss) = model_loss(model, x, labels, seed);
    let mut analytic: Vec<Tensor> = model.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
    for (pid, g) in tape.backward(loss).unwrap().params() {
        analytic[pid] = g.clone();
    }
    let mut pick = rng(seed ^ 0x5eed);
    let mut worst = 0.0f32;
    let mut probed = 0;
    let mut probe = model.clone();
    for (pid, p) in model.params.iter().enumerate() {
        let elems: Vec<usize> = match per_tensor {
            None => (0..p.numel()).collect(),
            Some(k) => (0..k.min(p.numel())).map(|_| pick.random_range(0..p.numel())).collect(),
        };
        for e in elems {
            let orig = p.value.data()[e];
            probe.params[pid].value.data_mut()[e] = orig + FD_STEP;
            let (t, l) = model_loss(&probe, x, labels, seed);
            let up = t.value(l).data()[0];
            probe.params[pid].value.data_mut()[e] = orig - FD_STEP;
            let (t, l) = model_loss(&probe, x, labels, seed);
            let down = t.value(l).data()[0];
            probe.params[pid].value.data_mut()[e] = orig;
            let fd = (up - down) / (2.0 * FD_STEP);
            let err = rel_err(analytic[pid].data()[e], fd);
            if err > worst {
                worst = err;
            }
            probed += 1;
        }
    }
    (worst, probed)
}

/// Worst relative finite-difference error per operation over `cases` random
/// small tensors (at most 64 elements each).
pub fn op_gradient_suite(cases: usize) -> Vec<(&'static str, f32)> {
    use densepath::engine::{BnState, PoolKind, BN_EPS};
    let mut r = rng(2024);
    let mut results = Vec::new();
    let run = |name: &'static str, worst: &mut Vec<(&'static str, f32)>, e: f32| {
        if let Some(slot) = worst.iter_mut().find(|(n, _)| *n == name) {
            slot.1 = slot.1.max(e);
        } else {
            worst.push((name, e));
        }
    };

    for case in 0..cases {
        let seed = case as u64;

        // conv2d: random geometry with valid stride/padding
        let (cin, cout) = (r.random_range(1..=2), r.random_range(1..=2));
        let k = r.random_range(1..=3usize);
        let pad = r.random_range(0..=k / 2);
        let stride = r.random_range(1..=2usize);
        let mut h = r.random_range(k.max(3)..=4);
        while (h + 2 * pad - k) % stride != 0 {
            h += 1;
        }
        let x = random_tensor(&mut r, &[1, cin, h, h], -1.0, 1.0);
        let w = random_tensor(&mut r, &[cout, cin, k, k], -1.0, 1.0);
        let b = random_tensor(&mut r, &[cout], -1.0, 1.0);
        let e = check_inputs(&[x, w, b], |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], stride, pad).unwrap();
            weighted_sum(t, y, seed)
        });
        run("conv2d", &mut results, e);

        for kind in [PoolKind::Max, PoolKind::Avg] {
            let x = distinct_values(&mut r, &[2, 2, 4, 4]);
            let stride = if r.random::<bool>() { 2 } else { 1 };
            let e = check_inputs(&[x], |t, v| {
                let y = t.pool2d(v[0], kind, 2, stride).unwrap();
                weighted_sum(t, y, seed)
            });
            run(if kind == PoolKind::Max { "pool2d_max" } else { "pool2d_avg" }, &mut results, e);
        }

        let x = random_tensor(&mut r, &[2, 3, 3, 3], -1.0, 1.0);
        let e = check_inputs(&[x], |t, v| {
            let y = t.global_avg_pool(v[0]).unwrap();
            weighted_sum(t, y, seed)
        });
        run("global_avg_pool", &mut results, e);

        let x = away_from_zero(&mut r, &[4, 8]);
        let e = check_inputs(&[x], |t, v| {
            let y = t.relu(v[0]);
            weighted_sum(t, y, seed)
        });
        run("relu", &mut results, e);

        let x = random_tensor(&mut r, &[4, 8], -4.0, 4.0);
        let e = check_inputs(&[x], |t, v| {
            let y = t.sigmoid(v[0]);
            weighted_sum(t, y, seed)
        });
        run("sigmoid", &mut results, e);

        let (n, din, dout) = (r.random_range(1..=4), r.random_range(1..=6), r.random_range(1..=5));
        let x = random_tensor(&mut r, &[n, din], -1.0, 1.0);
        let w = random_tensor(&mut r, &[dout, din], -1.0, 1.0);
        let b = random_tensor(&mut r, &[dout], -1.0, 1.0);
        let e = check_inputs(&[x, w, b], |t, v| {
            let y = t.fully_connected(v[0], v[1], v[2]).unwrap();
            weighted_sum(t, y, seed)
        });
        run("fully_connected", &mut results, e);

        let a = random_tensor(&mut r, &[2, 1, 3, 3], -1.0, 1.0);
        let b = random_tensor(&mut r, &[2, 2, 3, 3], -1.0, 1.0);
        let e = check_inputs(&[a, b], |t, v| {
            let y = t.concat_channels(&[v[0], v[1]]).unwrap();
            weighted_sum(t, y, seed)
        });
        run("concat_channels", &mut results, e);

        for mode in [Mode::Train, Mode::Infer] {
            let x = random_tensor(&mut r, &[3, 2, 2, 3], -2.0, 2.0);
            let g = random_tensor(&mut r, &[2], 0.5, 1.5);
            let bt = random_tensor(&mut r, &[2], -0.5, 0.5);
            let state = BnState {
                mean: vec![0.3, -0.2],
                var: vec![0.8, 1.4],
            };
            let e = check_inputs(&[x, g, bt], |t, v| {
                let (y, _) = t.batch_norm(v[0], v[1], v[2], &state, mode, BN_EPS).unwrap();
                weighted_sum(t, y, seed)
            });
            run(if mode == Mode::Train { "batch_norm_train" } else { "batch_norm_infer" }, &mut results, e);
        }

        let x = random_tensor(&mut r, &[4, 8], -1.0, 1.0);
        let e = check_inputs(&[x], |t, v| {
            let y = t.dropout(v[0], 0.25, Mode::Train, &mut rng(seed)).unwrap();
            weighted_sum(t, y, seed)
        });
        run("dropout", &mut results, e);

        let k = r.random_range(2..=4);
        let n = r.random_range(1..=4);
        let logits = random_tensor(&mut r, &[n, k], -3.0, 3.0);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let e = check_inputs(&[logits], |t, v| t.softmax_cross_entropy(v[0], &labels).unwrap());
        run("softmax_cross_entropy", &mut results, e);

        let u = random_tensor(&mut r, &[2, 3, 2, 2], -1.0, 1.0);
        let s = random_tensor(&mut r, &[2, 3], 0.0, 1.0);
        let e = check_inputs(&[u, s], |t, v| {
            let y = t.scale_channels(v[0], v[1]).unwrap();
            weighted_sum(t, y, seed)
        });
        run("scale_channels", &mut results, e);

        let a = random_tensor(&mut r, &[3, 4], -1.0, 1.0);
        let b = random_tensor(&mut r, &[3, 4], -1.0, 1.0);
        let e = check_inputs(&[a, b], |t, v| {
            let y = t.mul(v[0], v[1]).unwrap();
            t.sum(y)
        });
        run("mul_sum", &mut results, e);

        // composite: conv → bn → relu → global pool → fc → sigmoid chain
        let x = random_tensor(&mut r, &[2, 2, 4, 4], -1.0, 1.0);
        let w = random_tensor(&mut r, &[3, 2, 3, 3], -0.5, 0.5);
        let b = random_tensor(&mut r, &[3], -0.1, 0.1);
        let fw = random_tensor(&mut r, &[2, 3], -1.0, 1.0);
        let fb = random_tensor(&mut r, &[2], -1.0, 1.0);
        let state = BnState::new(3);
        let e = check_inputs(&[x, w, b, fw, fb], |t, v| {
            let gamma = t.input(Tensor::full(&[3], 1.0));
            let beta = t.input(Tensor::zeros(&[3]));
            let c = t.conv2d(v[0], v[1], v[2], 1, 1).unwrap();
            let (n, _) = t.batch_norm(c, gamma, beta, &state, Mode::Train, BN_EPS).unwrap();
            let a = t.sigmoid(n);
            let z = t.global_avg_pool(a).unwrap();
            let logits = t.fully_connected(z, v[3], v[4]).unwrap();
            t.softmax_cross_entropy(logits, &[0, 1]).unwrap()
        });
        run("composite", &mut results, e);
    }
    results
}

/// Random image with every value on the 8-bit grid, so PNG round trips are lossless.
pub fn random_image(rng: &mut impl Rng, h: usize, w: usize) -> densepath::data::Image {
    let bytes: Vec<u8> = (0..h * w * 3).map(|_| rng.random()).collect();
    densepath::data::Image::from_bytes(h, w, &bytes).unwrap()
}

/// Random prediction records over up to `max_patients` patients.
pub fn random_records(rng: &mut impl Rng, n: usize, max_patients: usize) -> Vec<densepath::metrics::PredictionRecord> {
    use densepath::data::{Label, Magnification};
    let patients = rng.random_range(1..=max_patients);
    (0..n)
        .map(|i| densepath::metrics::PredictionRecord {
            sample_id: format!("img{i}"),
            patient_id: format!("P{}", rng.random_range(0..patients)),
            magnification: Magnification::ALL[rng.random_range(0..4)],
            true_label: Label::from_index(rng.random_range(0..2)).unwrap(),
            predicted_label: Label::from_index(rng.random_range(0..2)).unwrap(),
        })
        .collect()
}

/// Brute-force tallies: for each distinct patient (in sorted order), scan every
/// record. Returns `(per-patient (correct, total), P_arp, P_img)`.
pub fn brute_force_metrics(records: &[densepath::metrics::PredictionRecord]) -> (Vec<(String, usize, usize)>, f64, f64) {
    let mut ids: Vec<String> = records.iter().map(|r| r.patient_id.clone()).collect();
    ids.sort();
    ids.dedup();
    let mut tallies = Vec::new();
    for id in &ids {
        let mut correct = 0;
        let mut total = 0;
        for r in records {
            if &r.patient_id == id {
                total += 1;
                if r.true_label == r.predicted_label {
                    correct += 1;
                }
            }
        }
        tallies.push((id.clone(), correct, total));
    }
    let mut sum = 0.0;
    for (_, c, t) in &tallies {
        sum += *c as f64 / *t as f64;
    }
    let p_arp = sum / ids.len() as f64;
    let mut correct = 0;
    for r in records {
        if r.true_label == r.predicted_label {
            correct += 1;
        }
    }
    (tallies, p_arp, correct as f64 / records.len() as f64)
}

/// `Σ N_np·P_rp / Σ N_np`, the image-weighted mean of per-patient accuracies.
pub fn weighted_patient_mean(report: &densepath::metrics::MetricsReport) -> f64 {
    let num: f64 = report.patients.values().map(|p| p.n_np as f64 * p.p_rp).sum();
    let den: f64 = report.patients.values().map(|p| p.n_np as f64).sum();
    num / den
}

/// In-memory synthetic dataset at `input_hw`.
pub fn synth_dataset(per_class: usize, seed: u64, variant: u32, input_hw: usize) -> densepath::data::Dataset {
    use densepath::data::{generate_synthetic_samples, Dataset, SynthConfig};
    let cfg = SynthConfig {
        per_class,
        image_size: input_hw,
        seed,
        variant,
        ..Default::default()
    };
    let (samples, images): (Vec<_>, Vec<_>) = generate_synthetic_samples(&cfg).unwrap().into_iter().unzip();
    Dataset::from_images(samples, &images, input_hw).unwrap()
}

/// A two-block network small enough for many quick training runs.
pub fn tiny_config() -> densepath::ArchitectureConfig {
    densepath::ArchitectureConfig {
        input_hw: 8,
        stem_channels: 4,
        blocks: vec![2, 2],
        growth_rate: 4,
        se_reduction: 2,
        ..Default::default()
    }
}

/// Runs the built binary with `args`.
pub fn densepath(args: &[&str]) -> std::process::Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_densepath"))
        .args(args)
        .env("DENSEPATH_THREADS", "1")
        .output()
        .expect("binary runs")
}

pub fn path_str(p: &std::path::Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Run-config JSON for `tiny_config` with short training.
pub fn tiny_run_config(manifest: &std::path::Path, epochs: usize, stages: &str) -> String {
    format!(
        r#"{{
  "architecture": {{"input_hw": 8, "stem_channels": 4, "blocks": [2, 2], "growth_rate": 4, "se_reduction": 2}},
  "train": {{"epochs": {epochs}, "batch_size": 8}},
  "data": {{"manifest": {:?}}},
  "stages": {stages}
}}"#,
        path_str(manifest)
    )
}
