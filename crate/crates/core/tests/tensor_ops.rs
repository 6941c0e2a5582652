use botkit_core::tensor::{grad_check, grad_check_many, BnMode, Graph, RunningStats, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

/// Six nested loops, straight from the definition.
fn naive_conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (k, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[n, k, oh, ow]);
    for ni in 0..n {
        for ki in 0..k {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = b.map_or(0.0, |b| b.data()[ki]);
                    for ci in 0..c {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (oy * stride + dy) as isize - pad as isize;
                                let ix = (ox * stride + dx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    s += x.at(&[ni, ci, iy as usize, ix as usize]) * w.at(&[ki, ci, dy, dx]);
                                }
                            }
                        }
                    }
                    let o = out.offset(&[ni, ki, oy, ox]);
                    out.data_mut()[o] = s;
                }
            }
        }
    }
    out
}

fn naive_pool(x: &Tensor, k: usize, s: usize, reduce: impl Fn(&[f64]) -> f64) -> Tensor {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = ((h - k) / s + 1, (w - k) / s + 1);
    let mut out = Vec::new();
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut win = Vec::new();
                    for dy in 0..k {
                        for dx in 0..k {
                            win.push(x.at(&[ni, ci, oy * s + dy, ox * s + dx]));
                        }
                    }
                    out.push(reduce(&win));
                }
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out).unwrap()
}

#[test]
fn conv2d_stem_shape() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 3, 224, 224]));
    let w = g.constant(Tensor::zeros(&[64, 3, 7, 7]));
    let y = g.conv2d(x, w, None, 2, 3).unwrap();
    assert_eq!(g.shape(y), &[1, 64, 112, 112]);
}

#[test]
fn conv2d_identity_kernel() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let w = g.constant(t(&[1, 1, 1, 1], &[1.0]));
    let y = g.conv2d(x, w, None, 1, 0).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn conv2d_matches_naive_loops() {
    let mut r = rng(1);
    let x = Tensor::randn(&[1, 2, 5, 5], 1.0, &mut r);
    let w = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut r);
    let b = Tensor::randn(&[3], 1.0, &mut r);
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let y = g.conv2d(xv, wv, Some(bv), 2, 1).unwrap();
    let expect = naive_conv(&x, &w, Some(&b), 2, 1);
    assert_eq!(g.shape(y), expect.shape());
    assert!(g.value(y).max_abs_diff(&expect) <= 1e-12);
}

#[test]
fn conv2d_pointwise_and_batched_match_naive_loops() {
    let mut r = rng(2);
    for (stride, pad, k) in [(1, 0, 1), (2, 0, 1), (1, 1, 3), (3, 2, 2)] {
        let x = Tensor::randn(&[3, 4, 7, 6], 1.0, &mut r);
        let w = Tensor::randn(&[5, 4, k, k], 1.0, &mut r);
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.conv2d(xv, wv, None, stride, pad).unwrap();
        assert!(g.value(y).max_abs_diff(&naive_conv(&x, &w, None, stride, pad)) <= 1e-12);
    }
}

#[test]
fn conv2d_rejects_channel_mismatch_naming_dimensions() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 3, 8, 8]));
    let w = g.constant(Tensor::zeros(&[4, 2, 3, 3]));
    let err = g.conv2d(x, w, None, 1, 1).unwrap_err().to_string();
    assert!(err.contains("C=3") && err.contains("in-channels 2"), "{err}");
}

#[test]
fn max_pool_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 64, 112, 112]));
    let y = g.max_pool2d(x, 3, 2, 1).unwrap();
    assert_eq!(g.shape(y), &[1, 64, 56, 56]);

    let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = g.max_pool2d(x, 2, 2, 0).unwrap();
    assert_eq!(g.value(y).data(), &[4.0]);

    let input = Tensor::randn(&[1, 1, 6, 6], 1.0, &mut rng(3));
    let x = g.constant(input.clone());
    let y = g.max_pool2d(x, 3, 2, 0).unwrap();
    let oracle = naive_pool(&input, 3, 2, |w| w.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    assert_eq!(g.value(y), &oracle);

    assert!(g.max_pool2d(x, 0, 2, 0).is_err());
    assert!(g.max_pool2d(x, 2, 0, 0).is_err());
}

#[test]
fn max_pool_routes_gradient_to_first_maximum() {
    let mut g = Graph::new();
    let x = g.param(t(&[1, 1, 2, 2], &[5.0, 5.0, 1.0, 5.0]));
    let y = g.max_pool2d(x, 2, 2, 0).unwrap();
    let l = g.sum(y);
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn avg_pool_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = g.avg_pool2d(x, 2, 2).unwrap();
    assert_eq!(g.value(y).data(), &[2.5]);

    let c = g.constant(Tensor::full(&[2, 3, 6, 6], 1.75));
    for k in 1..=3 {
        let y = g.avg_pool2d(c, k, 1).unwrap();
        assert!(g.value(y).data().iter().all(|&v| (v - 1.75).abs() < 1e-15));
    }

    let input = Tensor::randn(&[1, 2, 4, 4], 1.0, &mut rng(4));
    let x = g.constant(input.clone());
    let y = g.avg_pool2d(x, 2, 2).unwrap();
    let oracle = naive_pool(&input, 2, 2, |w| w.iter().sum::<f64>() / w.len() as f64);
    assert!(g.value(y).max_abs_diff(&oracle) <= 1e-12);

    let gp = g.global_avg_pool(x).unwrap();
    assert_eq!(g.shape(gp), &[1, 2]);
    let mean0 = input.data()[..16].iter().sum::<f64>() / 16.0;
    assert!((g.value(gp).data()[0] - mean0).abs() < 1e-12);
    assert!(g.avg_pool2d(x, 0, 1).is_err());
}

#[test]
fn batch_norm_examples() {
    let mut g = Graph::new();
    let stats = RunningStats::new(1);
    let x = g.constant(t(&[2, 1, 1, 1], &[1.0, 3.0]));
    let one = g.constant(Tensor::full(&[1], 1.0));
    let zero = g.constant(Tensor::zeros(&[1]));
    let y = g.batch_norm2d(x, one, zero, &stats, BnMode::Train).unwrap();
    let expect = 1.0 / (1.0 + 1e-5f64).sqrt();
    assert!((g.value(y).data()[0] + expect).abs() < 1e-15);
    assert!((g.value(y).data()[1] - expect).abs() < 1e-15);

    let five = g.constant(Tensor::full(&[1], 5.0));
    let y = g.batch_norm2d(x, zero, five, &stats, BnMode::Train).unwrap();
    assert_eq!(g.value(y).data(), &[5.0, 5.0]);

    // Single value per channel cannot be normalized in train mode.
    let single = g.constant(Tensor::zeros(&[1, 1, 1, 1]));
    assert!(g.batch_norm2d(single, one, zero, &stats, BnMode::Train).is_err());
    assert!(g.batch_norm2d(single, one, zero, &stats, BnMode::Eval).is_ok());
}

#[test]
fn batch_norm_train_statistics() {
    let input = Tensor::randn(&[4, 3, 5, 5], 5.0, &mut rng(5)).map(|v| v + 7.0);
    let mut g = Graph::new();
    let stats = RunningStats::new(3);
    let x = g.constant(input);
    let gamma = g.constant(Tensor::full(&[3], 1.0));
    let beta = g.constant(Tensor::zeros(&[3]));
    let y = g.batch_norm2d(x, gamma, beta, &stats, BnMode::Train).unwrap();
    let out = g.value(y);
    for c in 0..3 {
        let vals: Vec<f64> = (0..4)
            .flat_map(|n| (0..25).map(move |j| (n, j)))
            .map(|(n, j)| out.data()[(n * 3 + c) * 25 + j])
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
        assert!(m.abs() < 1e-7, "mean {m}");
        // the epsilon in the denominator shrinks the variance slightly below 1
        assert!((v - 1.0).abs() < 1e-6, "var {v}");
    }
    let (mean, var, count) = g.bn_batch_stats(y).unwrap();
    assert_eq!(count, 100);
    let mut running = RunningStats::new(3);
    running.update(mean, var, count);
    assert!((running.mean[0] - 0.1 * mean[0]).abs() < 1e-12);
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2], &[0.0, 0.0]));
    let y = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);

    let x = g.constant(t(&[2], &[1000.0, 0.0]));
    let y = g.softmax(x, 0).unwrap();
    let d = g.value(y).data();
    assert!(d.iter().all(|v| v.is_finite()));
    assert!((d[0] - 1.0).abs() < 1e-15 && d[1] < 1e-300);

    assert!(g.softmax(x, 1).is_err());
}

#[test]
fn linear_identity_is_noop() {
    let input = Tensor::randn(&[3, 4], 1.0, &mut rng(6));
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let w = g.constant(Tensor::from_fn(&[4, 4], |i| if i % 5 == 0 { 1.0 } else { 0.0 }));
    let b = g.constant(Tensor::zeros(&[4]));
    let y = g.linear(x, w, b).unwrap();
    assert_eq!(g.value(y), &input);
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let mut g = Graph::new();
    let x = g.param(t(&[3], &[-1.0, 0.0, 2.0]));
    let y = g.relu(x);
    let l = g.sum(y);
    g.backward(l).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 2], &[0.0, 0.0]));
    let l = g.cross_entropy(x, &[0]).unwrap();
    assert!((g.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);

    let x = g.constant(t(&[1, 2], &[20.0, -20.0]));
    let l = g.cross_entropy(x, &[0]).unwrap();
    assert!(g.value(l).data()[0] < 1e-8);

    assert!(g.cross_entropy(x, &[2]).is_err());
    assert!(g.cross_entropy(x, &[0, 1]).is_err());
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let logits = Tensor::randn(&[5, 2], 1.5, &mut rng(7));
    let labels = [0, 1, 1, 0, 1];
    let mut g = Graph::new();
    let x = g.param(logits.clone());
    let l = g.cross_entropy(x, &labels).unwrap();
    g.backward(l).unwrap();
    let gr = g.grad(x).unwrap();
    for r in 0..5 {
        let row = &logits.data()[r * 2..r * 2 + 2];
        let z = row[0].exp() + row[1].exp();
        for c in 0..2 {
            let onehot = if labels[r] == c { 1.0 } else { 0.0 };
            let expect = (row[c].exp() / z - onehot) / 5.0;
            assert!((gr.data()[r * 2 + c] - expect).abs() < 1e-15);
        }
    }
    let rep = grad_check(|g, x| g.cross_entropy(x, &labels), &logits, 1e-5).unwrap();
    assert!(rep.max_rel_error < 1e-6, "{rep:?}");
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.param(t(&[3], &[1.0, 2.0, 3.0]));
    let sq = g.mul(x, x).unwrap();
    let l = g.sum(sq);
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);

    let mut g = Graph::new();
    let x = g.param(t(&[1], &[0.3]));
    let y = g.add(x, x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0]);

    // accumulation across two sweeps, cleared by zero_grads
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[4.0]);
    g.zero_grads();
    assert!(g.grad(x).is_none());

    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1.0, 2.0]));
    let y = g.scale(x, 2.0);
    assert!(g.backward(y).is_err());
}

#[test]
fn backward_populates_every_reachable_parameter() {
    let mut g = Graph::new();
    let a = g.param(Tensor::full(&[2, 2], 0.5));
    let b = g.param(Tensor::full(&[2, 2], 1.5));
    let c = g.constant(Tensor::full(&[2, 2], 3.0));
    let ab = g.matmul(a, b).unwrap();
    let abc = g.mul(ab, c).unwrap();
    let l = g.mean(abc);
    g.backward(l).unwrap();
    assert!(g.grad(a).is_some() && g.grad(b).is_some());
    assert!(g.grad(c).is_none());
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let mut r = rng(8);
        let x0 = Tensor::randn(&[2, 3, 6, 6], 1.0, &mut r);
        let w0 = Tensor::randn(&[4, 3, 3, 3], 1.0, &mut r);
        let mut g = Graph::new();
        let x = g.param(x0);
        let w = g.param(w0);
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        let y = g.relu(y);
        let l = g.mean(y);
        g.backward(l).unwrap();
        (g.grad(x).unwrap().clone(), g.grad(w).unwrap().clone())
    };
    assert_eq!(run(), run());
}

// ---- gradient checks for every differentiable op (64-bit, h = 1e-5) ----

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Contracts an arbitrary-shape output with fixed random weights to get a scalar.
fn probe(g: &mut Graph, y: botkit_core::tensor::Var, seed: u64) -> botkit_core::Result<botkit_core::tensor::Var> {
    let w = Tensor::randn(g.shape(y), 1.0, &mut rng(seed));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn check_many(name: &str, points: &[Tensor], f: impl Fn(&mut Graph, &[botkit_core::tensor::Var]) -> botkit_core::Result<botkit_core::tensor::Var>) {
    let rep = grad_check_many(f, points, H, None).unwrap();
    assert!(rep.max_rel_error < TOL, "{name}: {rep:?}");
}

#[test]
fn grad_check_elementwise_and_shape_ops() {
    let mut r = rng(10);
    let a = Tensor::randn(&[2, 3, 4], 1.0, &mut r);
    let b = Tensor::randn(&[2, 3, 4], 1.0, &mut r);
    check_many("add", &[a.clone(), b.clone()], |g, v| { let y = g.add(v[0], v[1])?; probe(g, y, 1) });
    check_many("sub", &[a.clone(), b.clone()], |g, v| { let y = g.sub(v[0], v[1])?; probe(g, y, 2) });
    check_many("mul", &[a.clone(), b.clone()], |g, v| { let y = g.mul(v[0], v[1])?; probe(g, y, 3) });
    check_many("scale", &[a.clone()], |g, v| { let y = g.scale(v[0], -1.7); probe(g, y, 4) });
    check_many("relu", &[a.clone()], |g, v| { let y = g.relu(v[0]); probe(g, y, 5) });
    check_many("mean", &[a.clone()], |g, v| { let y = g.mul(v[0], v[0])?; Ok(g.mean(y)) });
    check_many("reshape", &[a.clone()], |g, v| { let y = g.reshape(v[0], &[6, 4])?; probe(g, y, 6) });
    check_many("permute", &[a.clone()], |g, v| { let y = g.permute(v[0], &[2, 0, 1])?; probe(g, y, 7) });
    check_many("transpose", &[a.clone()], |g, v| { let y = g.transpose_last2(v[0])?; probe(g, y, 8) });
    let c = Tensor::randn(&[2, 5, 4], 1.0, &mut r);
    check_many("concat", &[a.clone(), c], |g, v| { let y = g.concat(&[v[0], v[1]], 1)?; probe(g, y, 9) });
    let idx: std::sync::Arc<[usize]> = vec![3, 0, 0, 2, 1, 1, 0, 2, 3].into();
    check_many("gather", &[a.clone()], |g, v| { let y = g.gather_cols(v[0], idx.clone(), 3)?; probe(g, y, 10) });
    let s = Tensor::randn(&[2, 3, 3], 1.0, &mut r);
    check_many("scatter", &[s], |g, v| { let y = g.scatter_cols(v[0], idx.clone(), 4)?; probe(g, y, 11) });
}

#[test]
fn grad_check_matmul_linear_softmax() {
    let mut r = rng(11);
    let a2 = Tensor::randn(&[3, 4], 1.0, &mut r);
    let b2 = Tensor::randn(&[4, 2], 1.0, &mut r);
    let a3 = Tensor::randn(&[2, 3, 4], 1.0, &mut r);
    let b3 = Tensor::randn(&[2, 4, 5], 1.0, &mut r);
    check_many("matmul 2d", &[a2.clone(), b2.clone()], |g, v| { let y = g.matmul(v[0], v[1])?; probe(g, y, 1) });
    check_many("matmul batched", &[a3.clone(), b3], |g, v| { let y = g.matmul(v[0], v[1])?; probe(g, y, 2) });
    check_many("matmul shared", &[a3.clone(), b2.clone()], |g, v| { let y = g.matmul(v[0], v[1])?; probe(g, y, 3) });
    let bias = Tensor::randn(&[2], 1.0, &mut r);
    check_many("linear", &[a2, b2, bias], |g, v| { let y = g.linear(v[0], v[1], v[2])?; probe(g, y, 4) });
    for axis in 0..3 {
        check_many("softmax", &[a3.clone()], |g, v| { let y = g.softmax(v[0], axis)?; probe(g, y, 5 + axis as u64) });
    }
}

#[test]
fn grad_check_conv_pool_norm() {
    let mut r = rng(12);
    let x = Tensor::randn(&[2, 3, 6, 5], 1.0, &mut r);
    let w = Tensor::randn(&[4, 3, 3, 3], 0.5, &mut r);
    let b = Tensor::randn(&[4], 0.5, &mut r);
    check_many("conv2d", &[x.clone(), w.clone(), b], |g, v| { let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1)?; probe(g, y, 1) });
    let w1 = Tensor::randn(&[4, 3, 1, 1], 0.5, &mut r);
    check_many("conv2d 1x1", &[x.clone(), w1], |g, v| { let y = g.conv2d(v[0], v[1], None, 1, 0)?; probe(g, y, 2) });
    check_many("max_pool2d", &[x.clone()], |g, v| { let y = g.max_pool2d(v[0], 3, 2, 1)?; probe(g, y, 3) });
    check_many("avg_pool2d", &[x.clone()], |g, v| { let y = g.avg_pool2d(v[0], 2, 2)?; probe(g, y, 4) });
    check_many("global_avg_pool", &[x.clone()], |g, v| { let y = g.global_avg_pool(v[0])?; probe(g, y, 5) });
    let gamma = Tensor::uniform(&[3], 0.5, 1.5, &mut r);
    let beta = Tensor::randn(&[3], 1.0, &mut r);
    let stats = RunningStats { mean: vec![0.1, -0.2, 0.3], var: vec![1.2, 0.8, 2.0], momentum: 0.1 };
    for mode in [BnMode::Train, BnMode::Eval] {
        check_many("batch_norm2d", &[x.clone(), gamma.clone(), beta.clone()], |g, v| {
            let y = g.batch_norm2d(v[0], v[1], v[2], &stats, mode)?;
            probe(g, y, 6)
        });
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one_and_are_shift_invariant(
        rows in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 5), 1..6),
        shift in -100.0f64..100.0,
    ) {
        let n = rows.len();
        let flat: Vec<f64> = rows.concat();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[n, 5], flat.clone()).unwrap());
        let xs = g.constant(Tensor::new(&[n, 5], flat.iter().map(|v| v + shift).collect()).unwrap());
        let y = g.softmax(x, 1).unwrap();
        let ys = g.softmax(xs, 1).unwrap();
        for r in 0..n {
            let row = &g.value(y).data()[r * 5..r * 5 + 5];
            prop_assert!(row.iter().all(|&v| v > 0.0 && v <= 1.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        prop_assert!(g.value(y).max_abs_diff(g.value(ys)) < 1e-9);
    }

    #[test]
    fn conv_output_extent_formula(h in 3usize..12, w in 3usize..12, k in 1usize..4, s in 1usize..4, p in 0usize..3) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, h, w]));
        let wt = g.constant(Tensor::zeros(&[2, 1, k, k]));
        let y = g.conv2d(x, wt, None, s, p).unwrap();
        prop_assert_eq!(g.shape(y), &[1, 2, (h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1]);
    }
}
