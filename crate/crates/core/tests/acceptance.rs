//! Acceptance suite: one test per criterion, each printing a PASS/FAIL
//! line. Tests hold a shared lock so that timing checks never compete
//! with training for the CPU.

use std::io::Write;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use pqd_core::autograd::Tape;
use pqd_core::data::{eval_batches, synth_generate, Split, SyntheticSpec};
use pqd_core::distill::{function_shift, KdConfig, TeacherRef};
use pqd_core::metrics::{measure_latency, rel_bops, BenchConfig, LatencyReport};
use pqd_core::nn::{Arch, Classifier, Layer, Network};
use pqd_core::ops;
use pqd_core::optim::{Sgd, TrainConfig};
use pqd_core::pipeline::{
    baseline_checkpoint, bench_input, count_nonzero, default_orders, order_label, parse_order,
    run_pipeline, run_stage, BenchSettings, Checkpoint, Model, ModelState, PipelineRun, Stage,
    StageContext, StagePlan, StageTraining, DEFAULT_ORDER,
};
use pqd_core::pruning::{apply_mask, prune_global};
use pqd_core::quant::{
    compression_estimate, dequantize, quant_noise_bound, quantize, Int8Conv2d, Int8Linear,
    QatState, QuantParams, QuantTensor,
};
use pqd_core::train::{kd_train_step, masked_train_step, qat_train_step, train_baseline};
use pqd_core::{DenseTensor, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

/// Written straight to stdout so the line shows without `--nocapture`.
fn verdict(id: u32, title: &str, ok: bool, detail: &str) {
    let line = format!(
        "criterion {id:>2} {}: {title}: {detail}\n",
        if ok { "PASS" } else { "FAIL" }
    );
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
    assert!(ok, "{}", line.trim_end());
}

// ---------------------------------------------------------------------------
// 1. Gradient check against an independent f64 forward pass.

struct Shape4 {
    c: usize,
    h: usize,
    w: usize,
}

/// Straightforward f64 evaluation of `arch`, written from the layer list
/// alone; returns `[B×K]` logits.
fn forward64(arch: &Arch, params: &[Vec<f64>], x: &[f64], batch: usize) -> Vec<f64> {
    let shape_in = arch.input_shape();
    let mut s = match shape_in.len() {
        3 => Shape4 {
            c: shape_in[0],
            h: shape_in[1],
            w: shape_in[2],
        },
        _ => Shape4 {
            c: shape_in[0],
            h: 1,
            w: 1,
        },
    };
    let mut cur = x.to_vec();
    let mut site = 0;
    for layer in arch.layers() {
        match layer {
            Layer::Conv {
                in_ch,
                out_ch,
                kernel,
                stride,
                pad,
                relu,
            } => {
                let (w, b) = (&params[2 * site], &params[2 * site + 1]);
                let oh = (s.h + 2 * pad - kernel) / stride + 1;
                let ow = (s.w + 2 * pad - kernel) / stride + 1;
                let mut out = vec![0.0; batch * out_ch * oh * ow];
                for n in 0..batch {
                    for f in 0..out_ch {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut acc = b[f];
                                for c in 0..in_ch {
                                    for ky in 0..kernel {
                                        for kx in 0..kernel {
                                            let iy = (oy * stride + ky) as isize - pad as isize;
                                            let ix = (ox * stride + kx) as isize - pad as isize;
                                            if iy < 0
                                                || ix < 0
                                                || iy >= s.h as isize
                                                || ix >= s.w as isize
                                            {
                                                continue;
                                            }
                                            let xv = cur[((n * in_ch + c) * s.h + iy as usize)
                                                * s.w
                                                + ix as usize];
                                            acc += w[((f * in_ch + c) * kernel + ky) * kernel + kx]
                                                * xv;
                                        }
                                    }
                                }
                                out[((n * out_ch + f) * oh + oy) * ow + ox] =
                                    if relu { acc.max(0.0) } else { acc };
                            }
                        }
                    }
                }
                cur = out;
                s = Shape4 {
                    c: out_ch,
                    h: oh,
                    w: ow,
                };
                site += 1;
            }
            Layer::MaxPool2 => {
                let (oh, ow) = (s.h / 2, s.w / 2);
                let mut out = vec![0.0; batch * s.c * oh * ow];
                for p in 0..batch * s.c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let at = |y: usize, x: usize| cur[(p * s.h + y) * s.w + x];
                            out[(p * oh + oy) * ow + ox] = at(2 * oy, 2 * ox)
                                .max(at(2 * oy, 2 * ox + 1))
                                .max(at(2 * oy + 1, 2 * ox))
                                .max(at(2 * oy + 1, 2 * ox + 1));
                        }
                    }
                }
                cur = out;
                s = Shape4 {
                    c: s.c,
                    h: oh,
                    w: ow,
                };
            }
            Layer::Flatten => {
                s = Shape4 {
                    c: s.c * s.h * s.w,
                    h: 1,
                    w: 1,
                };
            }
            Layer::Linear {
                inputs,
                outputs,
                relu,
            } => {
                let (w, b) = (&params[2 * site], &params[2 * site + 1]);
                let mut out = vec![0.0; batch * outputs];
                for n in 0..batch {
                    for o in 0..outputs {
                        let mut acc = b[o];
                        for i in 0..inputs {
                            acc += w[o * inputs + i] * cur[n * inputs + i];
                        }
                        out[n * outputs + o] = if relu { acc.max(0.0) } else { acc };
                    }
                }
                cur = out;
                s = Shape4 {
                    c: outputs,
                    h: 1,
                    w: 1,
                };
                site += 1;
            }
        }
    }
    cur
}

fn mean_ce64(logits: &[f64], classes: usize, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (n, &y) in labels.iter().enumerate() {
        let row = &logits[n * classes..(n + 1) * classes];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / labels.len() as f64
}

fn random_arch(rng: &mut ChaCha8Rng, i: usize) -> Arch {
    let classes = rng.random_range(2..=4);
    if i.is_multiple_of(2) {
        Arch::Mlp {
            inputs: rng.random_range(3..=8),
            hidden: rng.random_range(2..=6),
            classes,
        }
    } else {
        let side = [4, 8][rng.random_range(0..2)];
        Arch::small_conv(rng.random_range(1..=2), side, side, classes)
    }
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)` per parameter tensor; tensors whose both
/// gradients vanish are skipped.
fn tensor_rel_err(a: &[f64], b: &[f64]) -> Option<f64> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    (scale > 1e-12).then(|| norm(&diff) / scale)
}

#[test]
fn c01_gradient_check() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for i in 0..20 {
        let arch = random_arch(&mut rng, i);
        let mut net = Network::new(arch, 100 + i as u64).unwrap();
        let batch = 3;
        let xs: Vec<f32> = (0..batch * arch.input_len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let labels: Vec<usize> = (0..batch)
            .map(|_| rng.random_range(0..arch.num_classes()))
            .collect();
        let x = DenseTensor::new(vec![batch, arch.input_len()], xs.clone()).unwrap();

        let mut tape = Tape::new();
        let z = net.forward_tape(&mut tape, &x, None).unwrap();
        let loss = tape.cross_entropy(z, &labels).unwrap();
        tape.backward(loss, net.params_mut()).unwrap();

        let x64: Vec<f64> = xs.iter().map(|&v| v as f64).collect();
        let mut p64: Vec<Vec<f64>> = net
            .params()
            .iter()
            .map(|p| p.value().data().iter().map(|&v| v as f64).collect())
            .collect();
        let k = arch.num_classes();
        let h = 1e-6;
        for pi in 0..p64.len() {
            // Large tensors are probed on a random subset of coordinates.
            let len = p64[pi].len();
            let coords: Vec<usize> = if len <= 64 {
                (0..len).collect()
            } else {
                rand::seq::index::sample(&mut rng, len, 64).into_vec()
            };
            let mut numeric = Vec::with_capacity(coords.len());
            for &j in &coords {
                let orig = p64[pi][j];
                p64[pi][j] = orig + h;
                let up = mean_ce64(&forward64(&arch, &p64, &x64, batch), k, &labels);
                p64[pi][j] = orig - h;
                let down = mean_ce64(&forward64(&arch, &p64, &x64, batch), k, &labels);
                p64[pi][j] = orig;
                numeric.push((up - down) / (2.0 * h));
            }
            let grad = net.params()[pi].grad();
            let analytic: Vec<f64> = coords.iter().map(|&j| grad.data()[j] as f64).collect();
            if let Some(e) = tensor_rel_err(&analytic, &numeric) {
                worst = worst.max(e);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        1,
        "gradient check",
        worst < 1e-3 && secs < 60.0,
        &format!("max relative error {worst:.2e} over 20 networks (< 1e-3), {secs:.1} s (< 60 s)"),
    );
}

// ---------------------------------------------------------------------------

#[test]
fn c02_quant_round_trip() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut grid_violations, mut f32_overshoots, mut ulp_violations) = (0usize, 0usize, 0usize);
    let mut worst = 0.0f64;
    let mut count = 0usize;
    for _ in 0..100 {
        let scale = 10f32.powf(rng.random_range(-4.0..1.0));
        let qp = QuantParams::new(scale, rng.random_range(0..=255)).unwrap();
        let (lo, hi) = qp.representable_range();
        let half = qp.scale() as f64 / 2.0;
        for _ in 0..1000 {
            let x: f32 = rng.random_range(lo..=hi);
            let q = quantize(x, qp);
            // The real grid point the code stands for, without f32 rounding.
            let grid = qp.scale() as f64 * (q as f64 - qp.zero_point() as f64);
            let err = (grid - x as f64).abs();
            worst = worst.max(err / qp.scale() as f64);
            if err > half {
                grid_violations += 1;
            }
            // The f32 value returned may add at most half an ulp on top.
            let deq = dequantize(q, qp);
            let err32 = (deq as f64 - x as f64).abs();
            if err32 > half {
                f32_overshoots += 1;
                let half_ulp = (deq.abs().next_up() - deq.abs()) as f64 / 2.0;
                if err32 - half > half_ulp {
                    ulp_violations += 1;
                }
            }
            count += 1;
        }
    }
    verdict(
        2,
        "quantization round trip",
        grid_violations == 0 && ulp_violations == 0 && count == 100_000,
        &format!(
            "{grid_violations} violations of |s(q-z) - x| <= s/2 in {count} values, worst {worst:.6} s; \
             f32 output past s/2 by rounding only: {f32_overshoots} (beyond half an ulp: {ulp_violations})"
        ),
    );
}

// ---------------------------------------------------------------------------

#[test]
fn c03_exact_sparsity() {
    let _g = serial();
    let arch = Arch::Mlp {
        inputs: 96,
        hidden: 100,
        classes: 4,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let batch = 8;
    let x = DenseTensor::new(
        vec![batch, 96],
        (0..batch * 96)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap();
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..4)).collect();
    let teacher = TeacherRef::new(Network::new(arch, 77).unwrap());
    let mut details = Vec::new();
    let mut ok = true;
    for (i, rho) in [0.3, 0.5, 0.9].into_iter().enumerate() {
        let mut net = Network::new(arch, 30 + i as u64).unwrap();
        let n = net.num_weights();
        let mask = prune_global(&net.weights(), rho).unwrap();
        apply_mask(&mut net.weights_mut(), &mask).unwrap();
        let pruned = n - mask.kept();
        let off = (pruned as f64 - rho * n as f64).abs();
        ok &= n == 10_000 && off <= 1.0;

        let zero_at_pruned = |net: &Network| {
            net.weights().iter().zip(mask.layers()).all(|(w, bits)| {
                w.data()
                    .iter()
                    .zip(bits.iter())
                    .all(|(v, keep)| keep || *v == 0.0)
            })
        };
        let mut sgd = Sgd::new(0.9);
        for _ in 0..10 {
            masked_train_step(&mut net, &mask, &x, &labels, &mut sgd, 0.05).unwrap();
        }
        let after_masked = zero_at_pruned(&net);
        let mut q = QatState::new(net.num_sites());
        for _ in 0..10 {
            qat_train_step(&mut net, &mask, &mut q, &x, &labels, &mut sgd, 0.05).unwrap();
        }
        let after_qat = zero_at_pruned(&net);
        for _ in 0..10 {
            kd_train_step(
                &mut net,
                &mask,
                Some(&mut q),
                &teacher,
                KdConfig::default(),
                &x,
                &labels,
                &mut sgd,
                0.05,
            )
            .unwrap();
        }
        let after_kd = zero_at_pruned(&net);
        ok &= after_masked && after_qat && after_kd;
        details.push(format!(
            "rho {rho}: {pruned}/{n} pruned (off by {off}), zeros kept masked/qat/kd = {after_masked}/{after_qat}/{after_kd}"
        ));
    }
    verdict(3, "exact global sparsity", ok, &details.join("; "));
}

// ---------------------------------------------------------------------------
// 4. Integer kernels against dequantize, compute in f64, requantize.

fn random_qp(rng: &mut ChaCha8Rng) -> QuantParams {
    QuantParams::new(
        10f32.powf(rng.random_range(-3.0..0.0)),
        rng.random_range(0..=255),
    )
    .unwrap()
}

fn random_codes(rng: &mut ChaCha8Rng, shape: Vec<usize>, qp: QuantParams) -> QuantTensor {
    let n = shape.iter().product();
    QuantTensor::new(shape, (0..n).map(|_| rng.random()).collect(), qp).unwrap()
}

fn real(t: &QuantTensor) -> Vec<f64> {
    let qp = t.qparams();
    t.data()
        .iter()
        .map(|&q| qp.scale() as f64 * (q as f64 - qp.zero_point() as f64))
        .collect()
}

/// Output grid covering the reference values, plus requantized codes.
fn requantize_ref(y: &[f64], rng: &mut ChaCha8Rng) -> (QuantParams, Vec<i64>) {
    let lo = y.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    // Occasionally clip so saturation is exercised as well.
    let shrink = if rng.random_bool(0.2) { 0.7 } else { 1.0 };
    let qp = QuantParams::from_range((lo * shrink) as f32, (hi * shrink) as f32).unwrap();
    let codes = y
        .iter()
        .map(|v| {
            ((v / qp.scale() as f64).round_ties_even() + qp.zero_point() as f64).clamp(0.0, 255.0)
                as i64
        })
        .collect();
    (qp, codes)
}

#[test]
fn c04_integer_kernels() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0i64;
    let mut shapes = 0;
    for case in 0..100 {
        let in_qp = random_qp(&mut rng);
        let w_qp = random_qp(&mut rng);
        let (got, want) = if case % 2 == 0 {
            let (b, i, o) = (
                rng.random_range(1..=4),
                rng.random_range(1..=64),
                rng.random_range(1..=16),
            );
            let x = random_codes(&mut rng, vec![b, i], in_qp);
            let w = random_codes(&mut rng, vec![o, i], w_qp);
            let bias: Vec<i32> = (0..o).map(|_| rng.random_range(-2000..2000)).collect();
            let (xr, wr) = (real(&x), real(&w));
            let unit = in_qp.scale() as f64 * w_qp.scale() as f64;
            let mut y = vec![0.0; b * o];
            for r in 0..b {
                for c in 0..o {
                    y[r * o + c] = bias[c] as f64 * unit
                        + (0..i).map(|k| xr[r * i + k] * wr[c * i + k]).sum::<f64>();
                }
            }
            let (out_qp, want) = requantize_ref(&y, &mut rng);
            let layer = Int8Linear::new(w, bias, in_qp, out_qp, false).unwrap();
            (layer.forward(&x).unwrap(), want)
        } else {
            let (n, c, f) = (
                rng.random_range(1..=2),
                rng.random_range(1..=4),
                rng.random_range(1..=4),
            );
            let (h, wd) = (rng.random_range(3..=8), rng.random_range(3..=8));
            let k = rng.random_range(1..=3);
            let (stride, pad) = (rng.random_range(1..=2), rng.random_range(0..=1));
            let x = random_codes(&mut rng, vec![n, c, h, wd], in_qp);
            let w = random_codes(&mut rng, vec![f, c, k, k], w_qp);
            let bias: Vec<i32> = (0..f).map(|_| rng.random_range(-2000..2000)).collect();
            let (xr, wr) = (real(&x), real(&w));
            let unit = in_qp.scale() as f64 * w_qp.scale() as f64;
            let (oh, ow) = (
                (h + 2 * pad - k) / stride + 1,
                (wd + 2 * pad - k) / stride + 1,
            );
            let mut y = vec![0.0; n * f * oh * ow];
            for b in 0..n {
                for fi in 0..f {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = bias[fi] as f64 * unit;
                            for ci in 0..c {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        // Padding holds a real zero.
                                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize
                                        {
                                            continue;
                                        }
                                        acc += xr
                                            [((b * c + ci) * h + iy as usize) * wd + ix as usize]
                                            * wr[((fi * c + ci) * k + ky) * k + kx];
                                    }
                                }
                            }
                            y[((b * f + fi) * oh + oy) * ow + ox] = acc;
                        }
                    }
                }
            }
            let (out_qp, want) = requantize_ref(&y, &mut rng);
            let layer = Int8Conv2d::new(w, bias, stride, pad, in_qp, out_qp, false).unwrap();
            (layer.forward(&x).unwrap(), want)
        };
        for (g, w) in got.data().iter().zip(&want) {
            worst = worst.max((*g as i64 - w).abs());
        }
        assert_eq!(got.len(), want.len());
        shapes += 1;
    }
    verdict(
        4,
        "integer kernel equivalence",
        worst <= 1 && shapes == 100,
        &format!("max deviation {worst} output ulp over {shapes} shapes (<= 1)"),
    );
}

// ---------------------------------------------------------------------------

#[test]
fn c05_relative_bops() {
    let _g = serial();
    let v = rel_bops(8, 8, 0.5, 32);
    verdict(
        5,
        "relative BOPs",
        v == 3.125,
        &format!("rel_bops(8, 8, 0.5) = {v} (== 3.125)"),
    );
}

// ---------------------------------------------------------------------------

fn desk_split() -> &'static Split {
    static SPLIT: OnceLock<Split> = OnceLock::new();
    SPLIT.get_or_init(|| synth_generate(&SyntheticSpec::default()).unwrap())
}

fn desk_arch() -> Arch {
    Arch::small_conv(3, 16, 16, 10)
}

#[test]
fn c06_compression_window() {
    let _g = serial();
    let split = desk_split();
    let net = Network::new(desk_arch(), 6).unwrap();
    let baseline = baseline_checkpoint(&net, &[], &split.test).unwrap();
    let ctx = StageContext {
        data: split,
        teacher: None,
        training: StageTraining::default(),
        seed: 6,
    };
    let mut state = ModelState::from_checkpoint(&baseline).unwrap();
    let mut ckpt = baseline.clone();
    for stage in [Stage::prune(0.5, 0), Stage::qat(0)] {
        let (s, c) = run_stage(state, &stage, &ctx).unwrap();
        state = s;
        ckpt = c;
    }
    let dense = baseline.encode().unwrap().len() as f64;
    let sparse = ckpt.encode().unwrap().len() as f64;
    let ratio = dense / sparse;
    let estimate = compression_estimate(0.5, 32, 8).unwrap();
    let ok = ckpt.is_quantized() && (4.0..=8.0).contains(&ratio) && ratio < estimate;
    verdict(
        6,
        "compression window",
        ok,
        &format!("{dense} / {sparse} bytes = {ratio:.3}x, window [4, 8], estimate {estimate}x"),
    );
}

// ---------------------------------------------------------------------------

/// Mean of `‖ε‖²` over `draws` vectors of `n` errors drawn from U(−Δ/2, Δ/2).
fn mc_noise(n: usize, delta: f64, draws: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = delta / 2.0;
    let mut total = 0.0;
    for _ in 0..draws {
        let mut s = 0.0;
        for _ in 0..n {
            let e: f64 = rng.random_range(-half..half);
            s += e * e;
        }
        total += s;
    }
    total / draws as f64
}

#[test]
fn c07_noise_bound() {
    let _g = serial();
    let draws = 100_000;
    let mut violations = 0;
    let mut details = Vec::new();
    let mut ratio_ok = true;
    for (i, delta) in [0.01, 0.1, 1.0].into_iter().enumerate() {
        let mut vals = Vec::new();
        for n in [1000, 500] {
            let emp = mc_noise(n, delta, draws, 70 + i as u64 * 2 + (n == 500) as u64);
            let bound = quant_noise_bound(n, delta).unwrap();
            // The bound is the exact expectation under the uniform model, so
            // a finite sample may sit above it by sampling error alone:
            // Var ‖ε‖² = n·Δ⁴/180.
            let se = (n as f64 * delta.powi(4) / 180.0 / draws as f64).sqrt();
            if emp > bound + 4.0 * se {
                violations += 1;
            }
            vals.push(emp);
        }
        let ratio = vals[1] / vals[0];
        ratio_ok &= (ratio - 0.5).abs() <= 0.05;
        details.push(format!("delta {delta}: half/full = {ratio:.4}"));
    }
    verdict(
        7,
        "quantization noise bound",
        violations == 0 && ratio_ok,
        &format!(
            "{violations} violations over 6 settings of {draws} draws; {}",
            details.join(", ")
        ),
    );
}

// ---------------------------------------------------------------------------
// Shared desk-scale runs for criteria 8 to 12.

const SEEDS: u64 = 5;

struct DeskRuns {
    baselines: Vec<Checkpoint>,
    pqk: Vec<PipelineRun>,
    qkp: Vec<PipelineRun>,
    seconds: f64,
}

fn desk_bench() -> BenchSettings {
    BenchSettings {
        config: BenchConfig {
            warmups: 1,
            repeats: 2,
            threads: 1,
        },
        batch: 32,
    }
}

fn desk_runs() -> &'static DeskRuns {
    static RUNS: OnceLock<DeskRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let start = Instant::now();
        let split = desk_split();
        let orders = default_orders(0.5, [2, 4, 4], KdConfig::default());
        let pick = |label: &str| {
            orders
                .iter()
                .find(|o| order_label(o) == label)
                .unwrap()
                .clone()
        };
        let (pqk_order, qkp_order) = (pick("prune-qat-kd"), pick("qat-kd-prune"));
        let mut runs = DeskRuns {
            baselines: Vec::new(),
            pqk: Vec::new(),
            qkp: Vec::new(),
            seconds: 0.0,
        };
        for seed in 0..SEEDS {
            let cfg = TrainConfig {
                seed,
                ..TrainConfig::default()
            };
            let (net, stats) = train_baseline(desk_arch(), &split.train, &cfg).unwrap();
            let base = baseline_checkpoint(&net, &stats, &split.test).unwrap();
            for (order, out) in [(&pqk_order, &mut runs.pqk), (&qkp_order, &mut runs.qkp)] {
                let plan = StagePlan::new(order.clone(), seed).unwrap();
                out.push(run_pipeline(&plan, &base, split, &desk_bench()).unwrap());
            }
            runs.baselines.push(base);
        }
        runs.seconds = start.elapsed().as_secs_f64();
        runs
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn c08_ordering_ablation() {
    let _g = serial();
    let runs = desk_runs();
    let acc = |r: &[PipelineRun]| r.iter().map(|x| x.record.accuracy_pct).collect::<Vec<_>>();
    let (a, b) = (acc(&runs.pqk), acc(&runs.qkp));
    let (ma, mb) = (mean(&a), mean(&b));
    let ok = a.len() >= 5 && ma >= mb && runs.seconds < 1800.0;
    verdict(
        8,
        "ordering ablation",
        ok,
        &format!(
            "mean acc prune-qat-kd {ma:.2} vs qat-kd-prune {mb:.2} over {} seeds (2/4/4 epochs), {:.0} s (< 1800 s)",
            a.len(),
            runs.seconds
        ),
    );
}

fn probes(split: &Split) -> Vec<DenseTensor> {
    eval_batches(&split.test, 100)
        .unwrap()
        .into_iter()
        .map(|b| b.x)
        .collect()
}

#[test]
fn c09_kd_recovery() {
    let _g = serial();
    let runs = desk_runs();
    let probes = probes(desk_split());
    let (mut before, mut after, mut shift_before, mut shift_after) =
        (vec![], vec![], vec![], vec![]);
    for (run, base) in runs.pqk.iter().zip(&runs.baselines) {
        let teacher = base.model().unwrap();
        let pre = &run.stages[1].checkpoint;
        let post = &run.stages[2].checkpoint;
        assert_eq!(
            run.stages[2].stage.kind(),
            pqd_core::pipeline::StageKind::Kd
        );
        before.push(pre.metrics.accuracy_pct);
        after.push(post.metrics.accuracy_pct);
        shift_before.push(function_shift(&teacher, &pre.model().unwrap(), &probes).unwrap());
        shift_after.push(function_shift(&teacher, &post.model().unwrap(), &probes).unwrap());
    }
    let ok = before.len() >= 5
        && mean(&after) >= mean(&before)
        && mean(&shift_after) <= mean(&shift_before);
    verdict(
        9,
        "distillation recovery",
        ok,
        &format!(
            "mean acc {:.2} -> {:.2}, mean function shift {:.4} -> {:.4} over {} seeds",
            mean(&before),
            mean(&after),
            mean(&shift_before),
            mean(&shift_after),
            before.len()
        ),
    );
}

// ---------------------------------------------------------------------------

struct Sleeper(Duration);

impl Classifier for Sleeper {
    fn logits(&self, x: &DenseTensor) -> Result<DenseTensor> {
        std::thread::sleep(self.0);
        DenseTensor::new(vec![x.shape()[0], 2], vec![0.0; 2 * x.shape()[0]])
    }

    fn num_classes(&self) -> usize {
        2
    }
}

struct FloatLinear {
    w: Vec<f32>,
    dim: usize,
}

impl Classifier for FloatLinear {
    fn logits(&self, x: &DenseTensor) -> Result<DenseTensor> {
        let g = ops::LinearGeometry::new(x.shape(), &[self.dim, self.dim], None)?;
        let mut out = vec![0.0; g.batch * self.dim];
        ops::linear_forward(x.data(), &self.w, None, g, &mut out);
        DenseTensor::new(vec![g.batch, self.dim], out)
    }

    fn num_classes(&self) -> usize {
        self.dim
    }
}

struct IntLinear {
    layer: Int8Linear,
    input: QuantParams,
}

impl Classifier for IntLinear {
    fn logits(&self, x: &DenseTensor) -> Result<DenseTensor> {
        Ok(self
            .layer
            .forward(&QuantTensor::quantize(x, self.input))?
            .dequantize())
    }

    fn num_classes(&self) -> usize {
        self.layer.weight().shape()[0]
    }
}

/// Interleaved rounds; returns the medians of the pooled samples.
fn paired_medians(
    a: &dyn Fn() -> LatencyReport,
    b: &dyn Fn() -> LatencyReport,
    rounds: usize,
) -> (f64, f64) {
    let (mut sa, mut sb) = (Vec::new(), Vec::new());
    for _ in 0..rounds {
        sa.extend(a().samples_ms);
        sb.extend(b().samples_ms);
    }
    let med = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        let m = v.len() / 2;
        if v.len() % 2 == 1 {
            v[m]
        } else {
            0.5 * (v[m - 1] + v[m])
        }
    };
    (med(sa), med(sb))
}

#[test]
fn c10_latency_harness() {
    let _g = serial();
    let split = desk_split();
    let base = &desk_runs().baselines[0];
    let x = bench_input(&split.test, 32).unwrap();
    let cfg = BenchConfig::default();

    let sleep = measure_latency(
        &Sleeper(Duration::from_millis(5)),
        &x,
        &BenchConfig {
            warmups: 2,
            repeats: 20,
            threads: 1,
        },
    )
    .unwrap();
    let stub_ok = (sleep.mean_ms - 5.0).abs() <= 0.3 * 5.0;

    let dense = base.model().unwrap();
    let reference = measure_latency(&dense, &x, &cfg).unwrap();
    let cv_ok = reference.cv < 0.10;

    let mut masked_net = base.float_network().unwrap();
    let mask = prune_global(&masked_net.weights(), 0.5).unwrap();
    apply_mask(&mut masked_net.weights_mut(), &mask).unwrap();
    let masked = Model::Float(masked_net);
    let (m_dense, m_masked) = paired_medians(
        &|| measure_latency(&dense, &x, &cfg).unwrap(),
        &|| measure_latency(&masked, &x, &cfg).unwrap(),
        5,
    );
    let masked_rel = (m_masked - m_dense).abs() / m_dense;
    let masked_ok = masked_rel <= 0.05;

    let dim = 512;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let w: Vec<f32> = (0..dim * dim)
        .map(|_| rng.random_range(-0.05..0.05))
        .collect();
    let xl = DenseTensor::new(
        vec![32, dim],
        (0..32 * dim).map(|_| rng.random_range(0.0..1.0)).collect(),
    )
    .unwrap();
    let in_qp = QuantParams::from_range(0.0, 1.0).unwrap();
    let w_qp = QuantParams::from_range(-0.05, 0.05).unwrap();
    let wq =
        QuantTensor::quantize_weights(&DenseTensor::new(vec![dim, dim], w.clone()).unwrap(), w_qp);
    let out_qp = QuantParams::from_range(-3.0, 3.0).unwrap();
    let fl = FloatLinear { w, dim };
    let il = IntLinear {
        layer: Int8Linear::new(wq, vec![0; dim], in_qp, out_qp, false).unwrap(),
        input: in_qp,
    };
    let t_f = measure_latency(&fl, &xl, &cfg).unwrap().median_ms();
    let t_i = measure_latency(&il, &xl, &cfg).unwrap().median_ms();

    verdict(
        10,
        "latency harness",
        stub_ok && cv_ok && masked_ok,
        &format!(
            "5 ms sleep measured {:.3} ms (+-30%); reference cv {:.3} over {} repeats (< 0.10); \
             50%-masked FP32 median {m_masked:.3} vs dense {m_dense:.3} ms, {:.1}% apart (<= 5%); \
             info: 512x512 linear INT8 speedup {:.2}x ({t_i:.3} vs {t_f:.3} ms FP32)",
            sleep.mean_ms,
            reference.cv,
            reference.repeats,
            100.0 * masked_rel,
            t_f / t_i
        ),
    );
}

// ---------------------------------------------------------------------------

#[test]
fn c11_determinism() {
    let _g = serial();
    let runs = desk_runs();
    let stages = parse_order(DEFAULT_ORDER).unwrap();
    let run = || {
        let plan = StagePlan::new(stages.clone(), 0).unwrap();
        run_pipeline(&plan, &runs.baselines[0], desk_split(), &desk_bench()).unwrap()
    };
    let (a, b) = (run(), run());
    verdict(
        11,
        "determinism",
        a.bytes == b.bytes,
        &format!(
            "two {DEFAULT_ORDER} runs with seed 0: {} and {} bytes, identical = {}",
            a.bytes.len(),
            b.bytes.len(),
            a.bytes == b.bytes
        ),
    );
}

// ---------------------------------------------------------------------------

#[test]
fn c12_kd_cost_invariance() {
    let _g = serial();
    let run = &desk_runs().pqk[0];
    let pre = &run.stages[1].checkpoint;
    let post = &run.stages[2].checkpoint;
    let layout = |c: &Checkpoint| {
        let mut l = Checkpoint::section_layout(&c.encode().unwrap()).unwrap();
        // The stage history grows by one entry; everything else must match.
        l.retain(|(tag, _)| tag != b"HIST");
        l
    };
    let same_nnz = count_nonzero(pre) == count_nonzero(post);
    let same_layout = layout(pre) == layout(post) && pre.is_quantized() && post.is_quantized();

    let x = bench_input(&desk_split().test, 32).unwrap();
    let cfg = BenchConfig::default();
    let (ma, mb) = (pre.model().unwrap(), post.model().unwrap());
    let (la, lb) = (
        measure_latency(&ma, &x, &cfg).unwrap(),
        measure_latency(&mb, &x, &cfg).unwrap(),
    );
    let band = la.std_ms.max(lb.std_ms);
    let lat_ok = (la.mean_ms - lb.mean_ms).abs() <= band;
    verdict(
        12,
        "distillation cost invariance",
        same_nnz && same_layout && lat_ok,
        &format!(
            "nonzeros {} -> {}, layout identical = {same_layout}, latency {:.3} -> {:.3} ms (band +-{band:.3})",
            count_nonzero(pre),
            count_nonzero(post),
            la.mean_ms,
            lb.mean_ms
        ),
    );
}
