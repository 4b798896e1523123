//! Operation-level tests: closed-form cases, independent oracles and
//! finite-difference gradient checks.

use super::*;
use crate::rng::Rng;

fn rand_tensor(rng: &mut Rng, shape: Shape, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.uniform_in(lo, hi))
}

/// Central finite differences of a scalar function of a flat buffer.
fn fd_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let fp = f(&probe);
            probe[i] = orig - h;
            let fm = f(&probe);
            probe[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let diff = (a - n).abs();
            if diff == 0.0 {
                0.0
            } else {
                diff / a.abs().max(n.abs()).max(1e-3)
            }
        })
        .fold(0.0, f64::max)
}

/// Weighted sum of a tensor against fixed weights, as a tape scalar.
fn weighted_sum(tape: &mut Tape, out: Var, weights: &Tensor) -> Var {
    let w = tape.constant(weights.clone());
    let prod = tape.hadamard(out, w).unwrap();
    tape.sum(prod)
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

/// Direct convolution computed from the definition with six nested loops.
fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let xs = x.shape();
    let ws = w.shape();
    let k = ws.h;
    let oh = (xs.h + 2 * pad - k) / stride + 1;
    let ow = (xs.w + 2 * pad - k) / stride + 1;
    let os = Shape::new(xs.n, ws.n, oh, ow);
    let mut out = Tensor::zeros(os);
    for n in 0..xs.n {
        for oc in 0..ws.n {
            for r in 0..oh {
                for c in 0..ow {
                    let mut acc = b.data()[oc];
                    for ic in 0..xs.c {
                        for kh in 0..k {
                            for kw in 0..k {
                                let ih = r as isize * stride as isize + kh as isize - pad as isize;
                                let iw = c as isize * stride as isize + kw as isize - pad as isize;
                                if ih >= 0
                                    && iw >= 0
                                    && (ih as usize) < xs.h
                                    && (iw as usize) < xs.w
                                {
                                    acc += x.at(n, ic, ih as usize, iw as usize)
                                        * w.at(oc, ic, kh, kw);
                                }
                            }
                        }
                    }
                    let idx = os.index(n, oc, r, c);
                    out.data_mut()[idx] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_identity_kernel_passes_input_through() {
    let mut rng = Rng::seeded(1);
    let x = rand_tensor(&mut rng, Shape::new(2, 3, 5, 4), -1.0, 1.0);
    // identity 1x1 kernel: w[oc][ic] = 1 when oc == ic
    let mut w = Tensor::zeros(Shape::new(3, 3, 1, 1));
    for c in 0..3 {
        let idx = Shape::new(3, 3, 1, 1).index(c, c, 0, 0);
        w.data_mut()[idx] = 1.0;
    }
    let b = Tensor::zeros(Shape::new(1, 3, 1, 1));
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w);
    let bv = tape.constant(b);
    let y = tape.conv2d(xv, wv, bv, 1, 0).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn conv2d_box_kernel_counts_neighbors() {
    let x = Tensor::filled(Shape::new(1, 1, 3, 3), 1.0);
    let w = Tensor::filled(Shape::new(1, 1, 3, 3), 1.0);
    let b = Tensor::zeros(Shape::new(1, 1, 1, 1));
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.constant(x), tape.constant(w), tape.constant(b));
    let y = tape.conv2d(xv, wv, bv, 1, 1).unwrap();
    let out = tape.value(y);
    assert_eq!(out.at(0, 0, 1, 1), 9.0); // center sees all nine ones
    assert_eq!(out.at(0, 0, 0, 0), 4.0); // corner sees a 2x2 block
    assert_eq!(out.at(0, 0, 0, 1), 6.0);
}

#[test]
fn conv2d_matches_loop_oracle() {
    let mut rng = Rng::seeded(7);
    for &(stride, pad) in &[(1usize, 0usize), (1, 1), (2, 1)] {
        let x = rand_tensor(&mut rng, Shape::new(1, 4, 5, 5), -1.0, 1.0);
        let w = rand_tensor(&mut rng, Shape::new(2, 4, 3, 3), -1.0, 1.0);
        let b = rand_tensor(&mut rng, Shape::new(1, 2, 1, 1), -0.5, 0.5);
        let expect = conv_oracle(&x, &w, &b, stride, pad);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x), tape.constant(w), tape.constant(b));
        let y = tape.conv2d(xv, wv, bv, stride, pad).unwrap();
        let got = tape.value(y);
        assert_eq!(got.shape(), expect.shape());
        for (a, e) in got.data().iter().zip(expect.data()) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }
}

#[test]
fn conv2d_rejects_channel_mismatch() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(Shape::new(1, 3, 4, 4)));
    let w = tape.constant(Tensor::zeros(Shape::new(2, 4, 3, 3)));
    let b = tape.constant(Tensor::zeros(Shape::new(1, 2, 1, 1)));
    let err = tape.conv2d(x, w, b, 1, 1).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("4") && msg.contains("3"), "{msg}");
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    let mut rng = Rng::seeded(11);
    let x0 = rand_tensor(&mut rng, Shape::new(1, 2, 4, 4), -1.0, 1.0);
    let w0 = rand_tensor(&mut rng, Shape::new(2, 2, 3, 3), -0.7, 0.7);
    let b0 = rand_tensor(&mut rng, Shape::new(1, 2, 1, 1), -0.3, 0.3);
    let weights = rand_tensor(&mut rng, Shape::new(1, 2, 4, 4), -1.0, 1.0);

    let run = |xd: &[f64], wd: &[f64], bd: &[f64]| -> f64 {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(x0.shape(), xd.to_vec()).unwrap());
        let w = tape.constant(Tensor::new(w0.shape(), wd.to_vec()).unwrap());
        let b = tape.constant(Tensor::new(b0.shape(), bd.to_vec()).unwrap());
        let y = tape.conv2d(x, w, b, 1, 1).unwrap();
        let wsum = tape.constant(weights.clone());
        let prod = tape.hadamard(y, wsum).unwrap();
        let loss = tape.sum(prod);
        tape.value(loss).item()
    };

    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone());
    let w = tape.leaf(w0.clone());
    let b = tape.leaf(b0.clone());
    let y = tape.conv2d(x, w, b, 1, 1).unwrap();
    let loss = weighted_sum(&mut tape, y, &weights);
    let mut store = ParamStore::new();
    tape.backward(loss, &mut store).unwrap();

    let h = 1e-5;
    let fd_x = fd_grad(|xd| run(xd, w0.data(), b0.data()), x0.data(), h);
    let fd_w = fd_grad(|wd| run(x0.data(), wd, b0.data()), w0.data(), h);
    let fd_b = fd_grad(|bd| run(x0.data(), w0.data(), bd), b0.data(), h);
    assert!(max_rel_err(tape.grad(x).unwrap(), &fd_x) < 1e-6);
    assert!(max_rel_err(tape.grad(w).unwrap(), &fd_w) < 1e-6);
    assert!(max_rel_err(tape.grad(b).unwrap(), &fd_b) < 1e-6);
}

// ---------------------------------------------------------------------------
// batch norm
// ---------------------------------------------------------------------------

#[test]
fn batch_norm_constant_input_yields_beta() {
    let x = Tensor::from_fn(Shape::new(2, 3, 4, 4), |i| (i / 16 % 3) as f64 * 2.0 + 1.0);
    let gamma = Tensor::filled(Shape::new(1, 3, 1, 1), 1.5);
    let beta = Tensor::new(Shape::new(1, 3, 1, 1), vec![0.1, -0.2, 0.3]).unwrap();
    let mut stats = BnStats::new(3);
    let mut tape = Tape::new();
    let (xv, gv, bv) = (
        tape.constant(x),
        tape.constant(gamma),
        tape.constant(beta.clone()),
    );
    let y = tape.batch_norm(xv, gv, bv, &mut stats, true).unwrap();
    let out = tape.value(y);
    for n in 0..2 {
        for c in 0..3 {
            for p in 0..16 {
                let v = out.at(n, c, p / 4, p % 4);
                assert!(
                    (v - beta.data()[c]).abs() < 1e-9,
                    "channel {c}: {v} vs {}",
                    beta.data()[c]
                );
            }
        }
    }
}

#[test]
fn batch_norm_normalizes_to_unit_stats() {
    let mut rng = Rng::seeded(21);
    let x = rand_tensor(&mut rng, Shape::new(2, 3, 6, 6), -10.0, 10.0);
    let gamma = Tensor::filled(Shape::new(1, 3, 1, 1), 1.0);
    let beta = Tensor::zeros(Shape::new(1, 3, 1, 1));
    let mut stats = BnStats::new(3);
    let mut tape = Tape::new();
    let (xv, gv, bv) = (tape.constant(x), tape.constant(gamma), tape.constant(beta));
    let y = tape.batch_norm(xv, gv, bv, &mut stats, true).unwrap();
    let out = tape.value(y);
    let plane = 36;
    for c in 0..3 {
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for n in 0..2 {
            for p in 0..plane {
                let v = out.at(n, c, p / 6, p % 6);
                sum += v;
                sumsq += v * v;
            }
        }
        let m = (2 * plane) as f64;
        let mean = sum / m;
        let var = sumsq / m - mean * mean;
        assert!(mean.abs() < 1e-10, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-6, "var {var}");
    }
}

#[test]
fn batch_norm_running_stats_blend_with_momentum() {
    let x = Tensor::from_fn(Shape::new(1, 1, 2, 2), |i| i as f64); // mean 1.5, var 1.25
    let gamma = Tensor::filled(Shape::new(1, 1, 1, 1), 1.0);
    let beta = Tensor::zeros(Shape::new(1, 1, 1, 1));
    let mut stats = BnStats::new(1);
    let mut tape = Tape::new();
    let (xv, gv, bv) = (tape.constant(x), tape.constant(gamma), tape.constant(beta));
    tape.batch_norm(xv, gv, bv, &mut stats, true).unwrap();
    assert!((stats.mean[0] - 0.15).abs() < 1e-12);
    assert!((stats.var[0] - (0.9 + 0.125)).abs() < 1e-12);
}

#[test]
fn batch_norm_eval_uses_running_stats() {
    let x = Tensor::from_fn(Shape::new(1, 1, 1, 2), |i| i as f64 + 3.0);
    let gamma = Tensor::filled(Shape::new(1, 1, 1, 1), 2.0);
    let beta = Tensor::filled(Shape::new(1, 1, 1, 1), 1.0);
    let mut stats = BnStats::new(1);
    stats.mean[0] = 3.0;
    stats.var[0] = 4.0;
    let mut tape = Tape::new();
    let (xv, gv, bv) = (tape.constant(x), tape.constant(gamma), tape.constant(beta));
    let y = tape.batch_norm(xv, gv, bv, &mut stats, false).unwrap();
    let istd = 1.0 / (4.0f64 + 1e-5).sqrt();
    let out = tape.value(y);
    assert!((out.data()[0] - 1.0).abs() < 1e-12);
    assert!((out.data()[1] - (1.0 + 2.0 * istd)).abs() < 1e-12);
    // Eval must not move the running stats.
    assert_eq!(stats.mean[0], 3.0);
    assert_eq!(stats.var[0], 4.0);
}

#[test]
fn batch_norm_gradients_match_finite_differences() {
    let mut rng = Rng::seeded(31);
    let shape = Shape::new(2, 2, 3, 3);
    let x0 = rand_tensor(&mut rng, shape, -1.0, 1.0);
    let g0 = rand_tensor(&mut rng, Shape::new(1, 2, 1, 1), 0.5, 1.5);
    let b0 = rand_tensor(&mut rng, Shape::new(1, 2, 1, 1), -0.5, 0.5);
    let weights = rand_tensor(&mut rng, shape, -1.0, 1.0);

    for training in [true, false] {
        let run = |xd: &[f64], gd: &[f64], bd: &[f64]| -> f64 {
            let mut stats = BnStats::new(2);
            stats.mean.copy_from_slice(&[0.2, -0.1]);
            stats.var.copy_from_slice(&[1.3, 0.7]);
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(shape, xd.to_vec()).unwrap());
            let g = tape.constant(Tensor::new(g0.shape(), gd.to_vec()).unwrap());
            let b = tape.constant(Tensor::new(b0.shape(), bd.to_vec()).unwrap());
            let y = tape.batch_norm(x, g, b, &mut stats, training).unwrap();
            let w = tape.constant(weights.clone());
            let prod = tape.hadamard(y, w).unwrap();
            let loss = tape.sum(prod);
            tape.value(loss).item()
        };

        let mut stats = BnStats::new(2);
        stats.mean.copy_from_slice(&[0.2, -0.1]);
        stats.var.copy_from_slice(&[1.3, 0.7]);
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let g = tape.leaf(g0.clone());
        let b = tape.leaf(b0.clone());
        let y = tape.batch_norm(x, g, b, &mut stats, training).unwrap();
        let loss = weighted_sum(&mut tape, y, &weights);
        let mut store = ParamStore::new();
        tape.backward(loss, &mut store).unwrap();

        let h = 1e-5;
        let fd_x = fd_grad(|xd| run(xd, g0.data(), b0.data()), x0.data(), h);
        let fd_g = fd_grad(|gd| run(x0.data(), gd, b0.data()), g0.data(), h);
        let fd_b = fd_grad(|bd| run(x0.data(), g0.data(), bd), b0.data(), h);
        assert!(
            max_rel_err(tape.grad(x).unwrap(), &fd_x) < 1e-5,
            "x grads (training={training})"
        );
        assert!(max_rel_err(tape.grad(g).unwrap(), &fd_g) < 1e-6);
        assert!(max_rel_err(tape.grad(b).unwrap(), &fd_b) < 1e-6);
    }
}

// ---------------------------------------------------------------------------
// relu
// ---------------------------------------------------------------------------

#[test]
fn relu_clamps_negatives() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(Shape::new(1, 1, 1, 3), vec![-1.0, 0.0, 2.0]).unwrap());
    let y = tape.relu(x);
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn relu_dead_region_has_zero_output_and_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::filled(Shape::new(1, 1, 2, 2), -3.0));
    let y = tape.relu(x);
    let loss = tape.sum(y);
    let mut store = ParamStore::new();
    tape.backward(loss, &mut store).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    assert!(tape.grad(x).unwrap().iter().all(|&g| g == 0.0));
}

#[test]
fn relu_gradient_matches_finite_differences_away_from_zero() {
    let mut rng = Rng::seeded(41);
    // Either side of the kink, but never within 10*h of it.
    let x0 = Tensor::from_fn(Shape::new(1, 1, 4, 4), |_| {
        let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
        sign * rng.uniform_in(0.1, 1.0)
    });
    let weights = rand_tensor(&mut rng, x0.shape(), -1.0, 1.0);
    let run = |xd: &[f64]| -> f64 {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(x0.shape(), xd.to_vec()).unwrap());
        let y = tape.relu(x);
        let w = tape.constant(weights.clone());
        let prod = tape.hadamard(y, w).unwrap();
        let s = tape.sum(prod);
        tape.value(s).item()
    };
    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone());
    let y = tape.relu(x);
    let loss = weighted_sum(&mut tape, y, &weights);
    let mut store = ParamStore::new();
    tape.backward(loss, &mut store).unwrap();
    let fd = fd_grad(run, x0.data(), 1e-5);
    assert!(max_rel_err(tape.grad(x).unwrap(), &fd) < 1e-6);
}

// ---------------------------------------------------------------------------
// bilinear upsampling
// ---------------------------------------------------------------------------

/// Scalar-loop oracle for one x2 bilinear stage, straight from the
/// half-pixel-center coordinate mapping.
fn upsample_oracle(x: &Tensor) -> Tensor {
    let xs = x.shape();
    let os = Shape::new(xs.n, xs.c, xs.h * 2, xs.w * 2);
    let mut out = Tensor::zeros(os);
    let sample = |n: usize, c: usize, r: f64, q: f64| -> f64 {
        let r = r.max(0.0).min(xs.h as f64 - 1.0);
        let q = q.max(0.0).min(xs.w as f64 - 1.0);
        let (r0, q0) = (r.floor() as usize, q.floor() as usize);
        let (r1, q1) = ((r0 + 1).min(xs.h - 1), (q0 + 1).min(xs.w - 1));
        let (fr, fq) = (r - r0 as f64, q - q0 as f64);
        x.at(n, c, r0, q0) * (1.0 - fr) * (1.0 - fq)
            + x.at(n, c, r0, q1) * (1.0 - fr) * fq
            + x.at(n, c, r1, q0) * fr * (1.0 - fq)
            + x.at(n, c, r1, q1) * fr * fq
    };
    for n in 0..os.n {
        for c in 0..os.c {
            for i in 0..os.h {
                for j in 0..os.w {
                    let src_r = (i as f64 + 0.5) / 2.0 - 0.5;
                    let src_q = (j as f64 + 0.5) / 2.0 - 0.5;
                    let idx = os.index(n, c, i, j);
                    out.data_mut()[idx] = sample(n, c, src_r, src_q);
                }
            }
        }
    }
    out
}

#[test]
fn upsample_constant_stays_constant() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::filled(Shape::new(1, 2, 3, 3), 0.7));
    let y = tape.upsample_bilinear(x, 2).unwrap();
    assert_eq!(tape.shape(y), Shape::new(1, 2, 6, 6));
    assert!(tape.value(y).data().iter().all(|&v| (v - 0.7).abs() < 1e-12));
}

#[test]
fn upsample_matches_scalar_oracle() {
    let x = Tensor::new(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let expect = upsample_oracle(&x);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let y = tape.upsample_bilinear(xv, 2).unwrap();
    for (a, e) in tape.value(y).data().iter().zip(expect.data()) {
        assert!((a - e).abs() < 1e-12, "{a} vs {e}");
    }
    // And a random case for good measure.
    let mut rng = Rng::seeded(55);
    let x = rand_tensor(&mut rng, Shape::new(2, 3, 4, 5), -1.0, 1.0);
    let expect = upsample_oracle(&x);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let y = tape.upsample_bilinear(xv, 2).unwrap();
    for (a, e) in tape.value(y).data().iter().zip(expect.data()) {
        assert!((a - e).abs() < 1e-12);
    }
}

#[test]
fn upsample_preserves_mean_of_constant_rows() {
    let x = Tensor::from_fn(Shape::new(1, 1, 4, 6), |i| (i / 6) as f64 * 1.3 - 0.4);
    let mean_in = x.sum() / x.data().len() as f64;
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let y = tape.upsample_bilinear(xv, 2).unwrap();
    let out = tape.value(y);
    let mean_out = out.sum() / out.data().len() as f64;
    assert!((mean_in - mean_out).abs() < 1e-9);
}

#[test]
fn upsample_factor_validation_and_chaining() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::filled(Shape::new(1, 1, 2, 2), 1.0));
    assert!(tape.upsample_bilinear(x, 0).is_err());
    assert!(tape.upsample_bilinear(x, 3).is_err());
    let y = tape.upsample_bilinear(x, 4).unwrap();
    assert_eq!(tape.shape(y), Shape::new(1, 1, 8, 8));
    let same = tape.upsample_bilinear(x, 1).unwrap();
    assert_eq!(same, x);
}

#[test]
fn upsample_gradient_matches_finite_differences() {
    let mut rng = Rng::seeded(61);
    let x0 = rand_tensor(&mut rng, Shape::new(1, 2, 3, 3), -1.0, 1.0);
    let weights = rand_tensor(&mut rng, Shape::new(1, 2, 6, 6), -1.0, 1.0);
    let run = |xd: &[f64]| -> f64 {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(x0.shape(), xd.to_vec()).unwrap());
        let y = tape.upsample_bilinear(x, 2).unwrap();
        let w = tape.constant(weights.clone());
        let prod = tape.hadamard(y, w).unwrap();
        let s = tape.sum(prod);
        tape.value(s).item()
    };
    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone());
    let y = tape.upsample_bilinear(x, 2).unwrap();
    let loss = weighted_sum(&mut tape, y, &weights);
    let mut store = ParamStore::new();
    tape.backward(loss, &mut store).unwrap();
    let fd = fd_grad(run, x0.data(), 1e-5);
    assert!(max_rel_err(tape.grad(x).unwrap(), &fd) < 1e-6);
}

// ---------------------------------------------------------------------------
// channel softmax
// ---------------------------------------------------------------------------

#[test]
fn softmax_equal_channels_give_half() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::filled(Shape::new(1, 2, 3, 3), 0.42));
    let y = tape.channel_softmax(x).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
}

#[test]
fn softmax_closed_form_quarters() {
    let mut x = Tensor::zeros(Shape::new(1, 2, 1, 1));
    x.data_mut()[1] = 3.0f64.ln();
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let y = tape.channel_softmax(xv).unwrap();
    let out = tape.value(y);
    assert!((out.data()[0] - 0.25).abs() < 1e-12);
    assert!((out.data()[1] - 0.75).abs() < 1e-12);
}

#[test]
fn softmax_outputs_sum_to_one_everywhere() {
    let mut rng = Rng::seeded(71);
    let x = rand_tensor(&mut rng, Shape::new(2, 4, 5, 5), -30.0, 30.0);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let y = tape.channel_softmax(xv).unwrap();
    let out = tape.value(y);
    let s = out.shape();
    for n in 0..s.n {
        for r in 0..s.h {
            for c in 0..s.w {
                let total: f64 = (0..s.c).map(|ch| out.at(n, ch, r, c)).sum();
                assert!((total - 1.0).abs() < 1e-9);
                for ch in 0..s.c {
                    assert!(out.at(n, ch, r, c) > 0.0);
                }
            }
        }
    }
}

#[test]
fn softmax_gradient_matches_finite_differences() {
    let mut rng = Rng::seeded(81);
    let x0 = rand_tensor(&mut rng, Shape::new(1, 3, 2, 2), -2.0, 2.0);
    let weights = rand_tensor(&mut rng, x0.shape(), -1.0, 1.0);
    let run = |xd: &[f64]| -> f64 {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(x0.shape(), xd.to_vec()).unwrap());
        let y = tape.channel_softmax(x).unwrap();
        let w = tape.constant(weights.clone());
        let prod = tape.hadamard(y, w).unwrap();
        let s = tape.sum(prod);
        tape.value(s).item()
    };
    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone());
    let y = tape.channel_softmax(x).unwrap();
    let loss = weighted_sum(&mut tape, y, &weights);
    let mut store = ParamStore::new();
    tape.backward(loss, &mut store).unwrap();
    let fd = fd_grad(run, x0.data(), 1e-5);
    assert!(max_rel_err(tape.grad(x).unwrap(), &fd) < 1e-5);
}

// ---------------------------------------------------------------------------
// concat / slice
// ---------------------------------------------------------------------------

#[test]
fn concat_shapes_and_identity_with_empty() {
    let mut rng = Rng::seeded(91);
    let a = rand_tensor(&mut rng, Shape::new(1, 2, 4, 4), -1.0, 1.0);
    let b = rand_tensor(&mut rng, Shape::new(1, 3, 4, 4), -1.0, 1.0);
    let mut tape = Tape::new();
    let (av, bv) = (tape.constant(a.clone()), tape.constant(b));
    let y = tape.concat_channels(av, bv).unwrap();
    assert_eq!(tape.shape(y), Shape::new(1, 5, 4, 4));

    let empty = tape.constant(Tensor::zeros(Shape::new(1, 0, 4, 4)));
    let same = tape.concat_channels(av, empty).unwrap();
    assert_eq!(tape.value(same), &a);

    let c = tape.constant(Tensor::zeros(Shape::new(1, 2, 3, 4)));
    assert!(tape.concat_channels(av, c).is_err());
}

#[test]
fn concat_backward_splits_gradient() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::filled(Shape::new(1, 2, 2, 2), 1.0));
    let b = tape.leaf(Tensor::filled(Shape::new(1, 1, 2, 2), 2.0));
    let y = tape.concat_channels(a, b).unwrap();
    let loss = tape.sum(y);
    let mut store = ParamStore::new();
    tape.backward(loss, &mut store).unwrap();
    assert!(tape.grad(a).unwrap().iter().all(|&g| g == 1.0));
    assert!(tape.grad(b).unwrap().iter().all(|&g| g == 1.0));
}

#[test]
fn slice_channels_selects_and_scatters() {
    let mut rng = Rng::seeded(101);
    let x0 = rand_tensor(&mut rng, Shape::new(2, 4, 3, 3), -1.0, 1.0);
    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone());
    let y = tape.slice_channels(x, 1, 3).unwrap();
    assert_eq!(tape.shape(y), Shape::new(2, 2, 3, 3));
    assert_eq!(tape.value(y).at(0, 0, 1, 1), x0.at(0, 1, 1, 1));
    let loss = tape.sum(y);
    let mut store = ParamStore::new();
    tape.backward(loss, &mut store).unwrap();
    let g = tape.grad(x).unwrap();
    let s = x0.shape();
    for n in 0..2 {
        for c in 0..4 {
            for p in 0..9 {
                let expect = if (1..3).contains(&c) { 1.0 } else { 0.0 };
                assert_eq!(g[s.index(n, c, p / 3, p % 3)], expect);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// hadamard
// ---------------------------------------------------------------------------

#[test]
fn hadamard_ones_is_identity_zeros_annihilate() {
    let mut rng = Rng::seeded(111);
    let a0 = rand_tensor(&mut rng, Shape::new(1, 3, 3, 3), -1.0, 1.0);
    let mut tape = Tape::new();
    let a = tape.leaf(a0.clone());
    let ones = tape.constant(Tensor::filled(a0.shape(), 1.0));
    let same = tape.hadamard(a, ones).unwrap();
    assert_eq!(tape.value(same), &a0);

    let zeros = tape.constant(Tensor::zeros(a0.shape()));
    let nil = tape.hadamard(a, zeros).unwrap();
    let loss = tape.sum(nil);
    let mut store = ParamStore::new();
    tape.backward(loss, &mut store).unwrap();
    assert!(tape.value(nil).data().iter().all(|&v| v == 0.0));
    assert!(tape.grad(a).unwrap().iter().all(|&g| g == 0.0));
}

#[test]
fn hadamard_broadcast_gradients_match_finite_differences() {
    let mut rng = Rng::seeded(121);
    let a0 = rand_tensor(&mut rng, Shape::new(2, 3, 2, 2), -1.0, 1.0);
    let b0 = rand_tensor(&mut rng, Shape::new(2, 1, 2, 2), -1.0, 1.0);
    let weights = rand_tensor(&mut rng, a0.shape(), -1.0, 1.0);
    let run = |ad: &[f64], bd: &[f64]| -> f64 {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(a0.shape(), ad.to_vec()).unwrap());
        let b = tape.constant(Tensor::new(b0.shape(), bd.to_vec()).unwrap());
        let y = tape.hadamard(a, b).unwrap();
        let w = tape.constant(weights.clone());
        let prod = tape.hadamard(y, w).unwrap();
        let s = tape.sum(prod);
        tape.value(s).item()
    };
    let mut tape = Tape::new();
    let a = tape.leaf(a0.clone());
    let b = tape.leaf(b0.clone());
    let y = tape.hadamard(a, b).unwrap();
    let loss = weighted_sum(&mut tape, y, &weights);
    let mut store = ParamStore::new();
    tape.backward(loss, &mut store).unwrap();
    let fd_a = fd_grad(|ad| run(ad, b0.data()), a0.data(), 1e-5);
    let fd_b = fd_grad(|bd| run(a0.data(), bd), b0.data(), 1e-5);
    assert!(max_rel_err(tape.grad(a).unwrap(), &fd_a) < 1e-6);
    assert!(max_rel_err(tape.grad(b).unwrap(), &fd_b) < 1e-6);

    let bad = tape.constant(Tensor::zeros(Shape::new(2, 2, 2, 2)));
    assert!(tape.hadamard(a, bad).is_err());
}

// ---------------------------------------------------------------------------
// masked mse + backward plumbing
// ---------------------------------------------------------------------------

#[test]
fn masked_mse_zero_residual_and_full_mask() {
    let mut rng = Rng::seeded(131);
    let p = rand_tensor(&mut rng, Shape::new(1, 1, 3, 3), -1.0, 1.0);
    let mut tape = Tape::new();
    let pred = tape.leaf(p.clone());
    let target = tape.constant(p.clone());
    let ones = tape.constant(Tensor::filled(p.shape(), 1.0));
    let loss = tape.masked_mse(pred, target, ones).unwrap();
    assert_eq!(tape.value(loss).item(), 0.0);

    // Mask of zeros: loss 0 and zero gradient regardless of pred.
    let other = tape.constant(rand_tensor(&mut rng, p.shape(), -1.0, 1.0));
    let zeros = tape.constant(Tensor::zeros(p.shape()));
    let loss2 = tape.masked_mse(pred, other, zeros).unwrap();
    assert_eq!(tape.value(loss2).item(), 0.0);
    let mut store = ParamStore::new();
    tape.backward(loss2, &mut store).unwrap();
    assert!(tape.grad(pred).unwrap().iter().all(|&g| g == 0.0));
}

#[test]
fn masked_mse_closed_form() {
    // pred - target = 2 at exactly three unmasked positions -> 3 * 4 / 2 = 6.
    let shape = Shape::new(1, 1, 2, 3);
    let target = Tensor::zeros(shape);
    let mut pred = Tensor::filled(shape, 2.0);
    pred.data_mut()[5] = 9.0; // masked out, must not matter
    let mask = Tensor::new(shape, vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
    let mut tape = Tape::new();
    let p = tape.constant(pred);
    let t = tape.constant(target);
    let m = tape.constant(mask);
    let loss = tape.masked_mse(p, t, m).unwrap();
    assert_eq!(tape.value(loss).item(), 6.0);
}

#[test]
fn masked_mse_rejects_differentiable_target() {
    let shape = Shape::new(1, 1, 1, 1);
    let mut tape = Tape::new();
    let p = tape.leaf(Tensor::zeros(shape));
    let t = tape.leaf(Tensor::zeros(shape));
    let m = tape.constant(Tensor::filled(shape, 1.0));
    assert!(tape.masked_mse(p, t, m).is_err());
}

#[test]
fn backward_of_sum_is_ones() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_fn(Shape::new(1, 2, 2, 2), |i| i as f64));
    let loss = tape.sum(x);
    let mut store = ParamStore::new();
    tape.backward(loss, &mut store).unwrap();
    assert!(tape.grad(x).unwrap().iter().all(|&g| g == 1.0));
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(Shape::new(1, 1, 2, 2)));
    let mut store = ParamStore::new();
    let err = tape.backward(x, &mut store).unwrap_err();
    assert!(matches!(err, crate::error::Error::NonScalarLoss { .. }));
}

#[test]
fn unreachable_params_keep_their_gradients_untouched() {
    let mut store = ParamStore::new();
    let used = store
        .register("used", Tensor::filled(Shape::new(1, 1, 1, 2), 1.0))
        .unwrap();
    let unused = store
        .register("unused", Tensor::filled(Shape::new(1, 1, 1, 2), 1.0))
        .unwrap();
    store.accumulate_grad(unused, &[0.5, 0.5]); // pre-existing gradient
    let mut tape = Tape::new();
    let w = tape.param(&store, used);
    let loss = tape.sum(w);
    tape.backward(loss, &mut store).unwrap();
    assert_eq!(store.get(used).grad, vec![1.0, 1.0]);
    assert_eq!(store.get(unused).grad, vec![0.5, 0.5]);
}

#[test]
fn repeated_backward_accumulates_param_grads() {
    let mut store = ParamStore::new();
    let id = store
        .register("w", Tensor::filled(Shape::new(1, 1, 1, 2), 1.0))
        .unwrap();
    let mut tape = Tape::new();
    let w = tape.param(&store, id);
    let loss = tape.sum(w);
    tape.backward(loss, &mut store).unwrap();
    tape.backward(loss, &mut store).unwrap();
    assert_eq!(store.get(id).grad, vec![2.0, 2.0]);
    store.clear_grads();
    tape.backward(loss, &mut store).unwrap();
    assert_eq!(store.get(id).grad, vec![1.0, 1.0]);
}

#[test]
fn frozen_param_gets_no_gradient_but_input_does() {
    let mut store = ParamStore::new();
    let id = store
        .register("w", Tensor::filled(Shape::new(1, 1, 1, 2), 2.0))
        .unwrap();
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::filled(Shape::new(1, 1, 1, 2), 3.0));
    let w = tape.frozen_param(&store, id);
    let y = tape.hadamard(x, w).unwrap();
    let loss = tape.sum(y);
    tape.backward(loss, &mut store).unwrap();
    assert_eq!(store.get(id).grad, vec![0.0, 0.0]);
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
}

#[test]
fn forward_chain_is_deterministic() {
    let build = || {
        let mut rng = Rng::seeded(999);
        let x = rand_tensor(&mut rng, Shape::new(1, 2, 8, 8), -1.0, 1.0);
        let w = rand_tensor(&mut rng, Shape::new(2, 2, 3, 3), -0.5, 0.5);
        let b = rand_tensor(&mut rng, Shape::new(1, 2, 1, 1), -0.1, 0.1);
        let mut stats = BnStats::new(2);
        let gamma = Tensor::filled(Shape::new(1, 2, 1, 1), 1.0);
        let beta = Tensor::zeros(Shape::new(1, 2, 1, 1));
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let wv = tape.constant(w);
        let bv = tape.constant(b);
        let c = tape.conv2d(xv, wv, bv, 2, 1).unwrap();
        let gv = tape.constant(gamma);
        let betav = tape.constant(beta);
        let n = tape.batch_norm(c, gv, betav, &mut stats, true).unwrap();
        let r = tape.relu(n);
        let u = tape.upsample_bilinear(r, 2).unwrap();
        let s = tape.channel_softmax(u).unwrap();
        tape.detach(s)
    };
    let a = build();
    let b = build();
    assert_eq!(a.data(), b.data());
}
