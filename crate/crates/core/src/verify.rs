//! Self-check battery: gradient checks, brute-force oracles, shape chain,
//! optimizer invariants and split hygiene. Each check is independent and
//! reports a one-line detail.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{attention_output, attention_weights, content_logits, MhsaConfig, MhsaLayer};
use crate::data::store::check_disjoint_streams;
use crate::data::{make_split, Label, Manifest, ManifestRow, SliceSample, Task};
use crate::ensemble::{compute_metrics, majority_vote, roc_auc};
use crate::model::{
    BnBank, BotNet, BotNetConfig, Bottleneck, BottleneckSpec, Builder, Checkpoint, Pass, SpatialOp, TrainingMeta, Width,
};
use crate::optim::{adam_step, global_norm, perturb, sam_step, AdamConfig, AdamState, SamConfig};
use crate::params::{Bound, ParamStore};
use crate::tensor::{grad_check_many, BnMode, Graph, RunningStats, Tensor, Var};

pub const GRAD_TOL: f64 = 1e-4;
pub const END_TO_END_TOL: f64 = 1e-3;
pub const FD_STEP: f64 = 1e-5;

type Outcome = std::result::Result<String, String>;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

pub type Check = (&'static str, fn() -> Outcome);

pub fn checks() -> Vec<Check> {
    vec![
        ("softmax-rows", softmax_rows),
        ("op-gradients", op_gradients),
        ("conv-oracle", conv_oracle),
        ("pool-oracle", pool_oracle),
        ("mhsa-oracle", mhsa_oracle),
        ("mhsa-content-only", mhsa_content_only),
        ("mhsa-gradient", mhsa_gradient),
        ("block-gradients", block_gradients),
        ("model-gradient", model_gradient),
        ("shape-chain", shape_chain),
        ("sam-norm", sam_norm),
        ("auc-oracle", auc_oracle),
        ("metric-example", metric_example),
        ("vote-enumeration", vote_enumeration),
        ("split-disjoint", split_disjoint),
        ("checkpoint-roundtrip", checkpoint_roundtrip),
    ]
}

/// Runs every check (or those whose name contains `filter`).
pub fn run_all(filter: Option<&str>) -> Vec<CheckResult> {
    checks()
        .into_iter()
        .filter(|(name, _)| filter.is_none_or(|f| name.contains(f)))
        .map(|(name, f)| match f() {
            Ok(detail) => CheckResult { name, passed: true, detail },
            Err(detail) => CheckResult { name, passed: false, detail },
        })
        .collect()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn e2s(e: crate::Error) -> String {
    e.to_string()
}

fn within(what: &str, err: f64, tol: f64) -> Outcome {
    if err < tol {
        Ok(format!("{what} {err:.2e} < {tol:.0e}"))
    } else {
        Err(format!("{what} {err:.2e} exceeds {tol:.0e}"))
    }
}

fn softmax_rows() -> Outcome {
    let x = Tensor::randn(&[2, 3, 4], 2.0, &mut rng(1));
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = g.softmax(xv, 2).map_err(e2s)?;
    let y = g.value(y);
    let mut worst: f64 = 0.0;
    for r in 0..6 {
        let row = &x.data()[r * 4..r * 4 + 4];
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        for (j, v) in row.iter().enumerate() {
            worst = worst.max((v.exp() / z - y.data()[r * 4 + j]).abs());
        }
    }
    within("max deviation from exp/sum along the last axis", worst, 1e-14)
}

/// `sum(f(x) ⊙ r)` for a fixed random `r`, so every output coordinate matters.
fn weighted(g: &mut Graph, y: Var, seed: u64) -> crate::Result<Var> {
    let r = Tensor::randn(g.shape(y), 1.0, &mut rng(seed));
    let rv = g.constant(r);
    let p = g.mul(y, rv)?;
    Ok(g.sum(p))
}

type OpFn = fn(&mut Graph, &[Var]) -> crate::Result<Var>;

/// Worst finite-difference relative error of every graph operation.
pub fn op_gradient_errors() -> crate::Result<Vec<(&'static str, f64)>> {
    let cases: Vec<(&str, Vec<Vec<usize>>, OpFn)> = vec![
        ("add", vec![vec![2, 3], vec![2, 3]], |g, v| g.add(v[0], v[1])),
        ("sub", vec![vec![2, 3], vec![2, 3]], |g, v| g.sub(v[0], v[1])),
        ("mul", vec![vec![2, 3], vec![2, 3]], |g, v| g.mul(v[0], v[1])),
        ("scale", vec![vec![2, 3]], |g, v| Ok(g.scale(v[0], -1.7))),
        ("sum", vec![vec![2, 3]], |g, v| Ok(g.sum(v[0]))),
        ("mean", vec![vec![2, 3]], |g, v| Ok(g.mean(v[0]))),
        // shifted away from the kink so central differences stay on one side
        ("relu", vec![vec![2, 5]], |g, v| {
            let s = g.constant(Tensor::from_fn(&[2, 5], |i| if i % 2 == 0 { 3.0 } else { -3.0 }));
            let x = g.add(v[0], s)?;
            Ok(g.relu(x))
        }),
        ("reshape", vec![vec![2, 6]], |g, v| g.reshape(v[0], &[3, 4])),
        ("permute", vec![vec![2, 3, 4]], |g, v| g.permute(v[0], &[2, 0, 1])),
        ("transpose_last2", vec![vec![2, 3, 4]], |g, v| g.transpose_last2(v[0])),
        ("concat", vec![vec![2, 3], vec![2, 2]], |g, v| g.concat(&[v[0], v[1]], 1)),
        ("gather_cols", vec![vec![2, 3, 4]], |g, v| g.gather_cols(v[0], Arc::from(vec![2, 0, 1, 1, 3, 0]), 2)),
        ("scatter_cols", vec![vec![2, 3, 2]], |g, v| g.scatter_cols(v[0], Arc::from(vec![2, 0, 1, 1, 3, 0]), 4)),
        ("matmul", vec![vec![2, 3, 4], vec![4, 5]], |g, v| g.matmul(v[0], v[1])),
        ("conv2d", vec![vec![2, 3, 5, 5], vec![4, 3, 3, 3], vec![4]], |g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1)),
        ("batch_norm2d", vec![vec![3, 2, 3, 3], vec![2], vec![2]], |g, v| {
            let st = RunningStats::new(2);
            g.batch_norm2d(v[0], v[1], v[2], &st, BnMode::Train)
        }),
        ("softmax", vec![vec![2, 3, 4]], |g, v| g.softmax(v[0], 1)),
        ("avg_pool2d", vec![vec![1, 2, 4, 4]], |g, v| g.avg_pool2d(v[0], 2, 2)),
        ("max_pool2d", vec![vec![1, 2, 5, 5]], |g, v| g.max_pool2d(v[0], 3, 2, 1)),
        ("global_avg_pool", vec![vec![2, 3, 2, 2]], |g, v| g.global_avg_pool(v[0])),
        ("linear", vec![vec![3, 4], vec![4, 2], vec![2]], |g, v| g.linear(v[0], v[1], v[2])),
        ("cross_entropy", vec![vec![4, 3]], |g, v| g.cross_entropy(v[0], &[0, 2, 1, 2])),
    ];
    let mut out = Vec::with_capacity(cases.len());
    for (i, (name, shapes, f)) in cases.iter().enumerate() {
        let pts: Vec<Tensor> =
            shapes.iter().enumerate().map(|(j, s)| Tensor::randn(s, 1.0, &mut rng(10 + (i * 7 + j) as u64))).collect();
        let rep = grad_check_many(
            |g, v| {
                let y = f(g, v)?;
                if g.shape(y).iter().product::<usize>() == 1 {
                    Ok(y)
                } else {
                    weighted(g, y, 99)
                }
            },
            &pts,
            FD_STEP,
            None,
        )?;
        out.push((*name, rep.max_rel_error));
    }
    Ok(out)
}

fn worst_of(errors: &[(&'static str, f64)]) -> (&'static str, f64) {
    errors.iter().fold(("none", 0.0), |w, &(n, e)| if e > w.1 { (n, e) } else { w })
}

fn op_gradients() -> Outcome {
    let errors = op_gradient_errors().map_err(e2s)?;
    let (name, worst) = worst_of(&errors);
    within(&format!("worst relative error over {} ops ({name})", errors.len()), worst, GRAD_TOL)
}

fn conv_oracle() -> Outcome {
    let x = Tensor::randn(&[2, 3, 6, 5], 1.0, &mut rng(2));
    let w = Tensor::randn(&[4, 3, 3, 3], 1.0, &mut rng(3));
    let (stride, pad) = (2, 1);
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
    let y = g.conv2d(xv, wv, None, stride, pad).map_err(e2s)?;
    let y = g.value(y).clone();
    let (oh, ow) = (y.shape()[2], y.shape()[3]);
    if (oh, ow) != (3, 3) {
        return Err(format!("output {oh}x{ow}, expected 3x3"));
    }
    let mut worst: f64 = 0.0;
    for n in 0..2 {
        for k in 0..4 {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..3 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && iy < 6 && ix < 5 {
                                    acc += x.at(&[n, c, iy as usize, ix as usize]) * w.at(&[k, c, ky, kx]);
                                }
                            }
                        }
                    }
                    worst = worst.max((acc - y.at(&[n, k, oy, ox])).abs());
                }
            }
        }
    }
    within("max deviation from direct convolution", worst, 1e-12)
}

fn pool_oracle() -> Outcome {
    let x = Tensor::randn(&[1, 2, 5, 5], 1.0, &mut rng(4));
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let mp = g.max_pool2d(xv, 3, 2, 1).map_err(e2s)?;
    let ap = g.avg_pool2d(xv, 2, 2).map_err(e2s)?;
    let (mp, ap) = (g.value(mp).clone(), g.value(ap).clone());
    let mut worst: f64 = 0.0;
    for c in 0..2 {
        for oy in 0..3 {
            for ox in 0..3 {
                let mut m = f64::NEG_INFINITY;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (iy, ix) = ((2 * oy + ky) as isize - 1, (2 * ox + kx) as isize - 1);
                        if (0..5).contains(&iy) && (0..5).contains(&ix) {
                            m = m.max(x.at(&[0, c, iy as usize, ix as usize]));
                        }
                    }
                }
                worst = worst.max((m - mp.at(&[0, c, oy, ox])).abs());
            }
        }
        for oy in 0..2 {
            for ox in 0..2 {
                let s: f64 = (0..4).map(|i| x.at(&[0, c, 2 * oy + i / 2, 2 * ox + i % 2])).sum();
                worst = worst.max((s / 4.0 - ap.at(&[0, c, oy, ox])).abs());
            }
        }
    }
    within("max deviation from direct pooling", worst, 1e-14)
}

fn mhsa_fixture(d: usize, heads: usize, h: usize, w: usize) -> crate::Result<(MhsaLayer, ParamStore)> {
    let mut store = ParamStore::new();
    let layer = MhsaLayer::new(MhsaConfig::new(heads, d)?, h, w, "check.mhsa", &mut store, &mut rng(5))?;
    let mut r = rng(6);
    for id in [layer.rh, layer.rw] {
        let s = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::randn(&s, 0.5, &mut r);
    }
    Ok((layer, store))
}

fn mhsa_run(layer: &MhsaLayer, store: &ParamStore, x: &Tensor) -> crate::Result<Tensor> {
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let xv = g.constant(x.clone());
    let y = layer.forward(&mut g, &p, xv)?;
    Ok(g.value(y).clone())
}

/// Scalar-loop evaluation of one attention layer, position by position.
fn mhsa_brute_force(layer: &MhsaLayer, store: &ParamStore, x: &Tensor) -> Tensor {
    let (d, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let (n, dh) = (h * w, layer.config.d_head());
    let proj = |m: &Tensor, p: usize, b: usize| -> Vec<f64> {
        (0..dh).map(|j| (0..d).map(|c| x.at(&[b, c, p / w, p % w]) * m.at(&[c, j])).sum()).collect()
    };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let (rh, rw) = (store.get(layer.rh), store.get(layer.rw));
    let mut out = Tensor::zeros(x.shape());
    for b in 0..x.shape()[0] {
        for head in 0..layer.config.heads {
            let q: Vec<Vec<f64>> = (0..n).map(|p| proj(store.get(layer.wq[head]), p, b)).collect();
            let k: Vec<Vec<f64>> = (0..n).map(|p| proj(store.get(layer.wk[head]), p, b)).collect();
            let v: Vec<Vec<f64>> = (0..n).map(|p| proj(store.get(layer.wv[head]), p, b)).collect();
            for i in 0..n {
                let logits: Vec<f64> = (0..n)
                    .map(|j| {
                        let ri = j / w + h - 1 - i / w;
                        let ci = j % w + w - 1 - i % w;
                        let r: Vec<f64> = (0..dh).map(|c| rh.at(&[ri, c]) + rw.at(&[ci, c])).collect();
                        (dot(&q[i], &k[j]) + dot(&q[i], &r)) / (dh as f64).sqrt()
                    })
                    .collect();
                let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                for c in 0..dh {
                    let acc: f64 = (0..n).map(|j| (logits[j] - m).exp() / z * v[j][c]).sum();
                    let o = out.offset(&[b, head * dh + c, i / w, i % w]);
                    out.data_mut()[o] = acc;
                }
            }
        }
    }
    out
}

/// Largest gap between the layer on a 1×8×3×3 input and the per-position scalar evaluation.
pub fn mhsa_oracle_deviation() -> crate::Result<f64> {
    let (layer, store) = mhsa_fixture(8, 2, 3, 3)?;
    let x = Tensor::randn(&[1, 8, 3, 3], 1.0, &mut rng(7));
    let got = mhsa_run(&layer, &store, &x)?;
    Ok(got.max_abs_diff(&mhsa_brute_force(&layer, &store, &x)))
}

fn mhsa_oracle() -> Outcome {
    within("max deviation from per-position evaluation", mhsa_oracle_deviation().map_err(e2s)?, 1e-10)
}

fn mhsa_content_only() -> Outcome {
    within("max deviation from content-only attention", mhsa_content_only_deviation().map_err(e2s)?, 1e-12)
}

/// With zero relative encodings, the layer against plain content attention.
pub fn mhsa_content_only_deviation() -> crate::Result<f64> {
    let (layer, mut store) = mhsa_fixture(8, 2, 3, 3)?;
    for id in [layer.rh, layer.rw] {
        let s = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::zeros(&s);
    }
    let x = Tensor::randn(&[1, 8, 3, 3], 1.0, &mut rng(8));
    let got = mhsa_run(&layer, &store, &x)?;
    let reference = (|| -> crate::Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let xt = g.permute(xv, &[0, 2, 3, 1])?;
        let xf = g.reshape(xt, &[1, 9, 8])?;
        let mut heads = Vec::new();
        for hd in 0..2 {
            let wq = g.constant(store.get(layer.wq[hd]).clone());
            let wk = g.constant(store.get(layer.wk[hd]).clone());
            let wv = g.constant(store.get(layer.wv[hd]).clone());
            let e = content_logits(&mut g, xf, wq, wk)?;
            let a = attention_weights(&mut g, e)?;
            heads.push(attention_output(&mut g, a, xf, wv, None)?);
        }
        let z = g.concat(&heads, 2)?;
        let z = g.reshape(z, &[1, 3, 3, 8])?;
        let z = g.permute(z, &[0, 3, 1, 2])?;
        Ok(g.value(z).clone())
    })()?;
    Ok(got.max_abs_diff(&reference))
}

fn mhsa_gradient() -> Outcome {
    within("max relative error", mhsa_gradient_error().map_err(e2s)?, GRAD_TOL)
}

/// Full attention layer with relative encodings, every input and parameter coordinate.
pub fn mhsa_gradient_error() -> crate::Result<f64> {
    let (layer, store) = mhsa_fixture(8, 2, 3, 3)?;
    let mut pts = vec![Tensor::randn(&[1, 8, 3, 3], 1.0, &mut rng(9))];
    pts.extend(store.values());
    let rep = grad_check_many(
        |g, v| {
            let bound = Bound(v[1..].to_vec());
            let y = layer.forward(g, &bound, v[0])?;
            weighted(g, y, 11)
        },
        &pts,
        FD_STEP,
        None,
    )?;
    Ok(rep.max_rel_error)
}

/// One conv bottleneck and one attention bottleneck, train-mode normalization,
/// every coordinate of input and parameters.
pub fn block_gradient_errors() -> crate::Result<Vec<(&'static str, f64)>> {
    let cases = [
        ("conv bottleneck", SpatialOp::Conv3x3, 8, 2, 6, 1, 18),
        ("attention bottleneck", SpatialOp::Mhsa, 8, 4, 4, 2, 21),
    ];
    let mut out = Vec::new();
    for (name, op, cin, mid, size, heads, seed) in cases {
        let spec = BottleneckSpec {
            in_channels: cin,
            mid_channels: mid,
            out_channels: 4 * mid,
            spatial_op: op,
            stride: 2,
            has_projection_shortcut: true,
        };
        let mut store = ParamStore::new();
        let mut bank = BnBank::new();
        let mut r = rng(seed);
        let mhsa = (op == SpatialOp::Mhsa).then(|| MhsaConfig::new(heads, mid)).transpose()?;
        let mut b = Builder { store: &mut store, bank: &mut bank, rng: &mut r };
        let block = Bottleneck::new(spec, (size, size), mhsa, "check.block", &mut b)?;
        let mut pts = store.values();
        for (p, v) in store.iter().zip(pts.iter_mut()) {
            if p.name.ends_with(".gamma") {
                *v = Tensor::uniform(v.shape(), 0.5, 1.5, &mut r);
            }
        }
        pts.push(Tensor::randn(&[2, cin, size, size], 1.0, &mut r));
        let rep = grad_check_many(
            |g, v| {
                let (params, x) = v.split_at(v.len() - 1);
                let bound = Bound(params.to_vec());
                let mut pass = Pass::new(g, &bound, &bank, BnMode::Train);
                let y = block.forward(&mut pass, x[0])?;
                weighted(g, y, seed + 1)
            },
            &pts,
            FD_STEP,
            None,
        )?;
        out.push((name, rep.max_rel_error));
    }
    Ok(out)
}

fn block_gradients() -> Outcome {
    let errors = block_gradient_errors().map_err(e2s)?;
    let (name, worst) = worst_of(&errors);
    within(&format!("worst relative error ({name})"), worst, GRAD_TOL)
}

fn small_model(seed: u64) -> crate::Result<BotNet> {
    BotNet::build(BotNetConfig::scaled(Width::new(1, 8)?, 32), seed)
}

fn model_gradient() -> Outcome {
    let (err, checked) = model_gradient_error().map_err(e2s)?;
    within(&format!("max relative error over {checked} coordinates"), err, END_TO_END_TOL)
}

/// Width-1/8 model on 32×32 inputs, two sampled coordinates per tensor.
/// Returns the worst relative error and the number of coordinates checked.
pub fn model_gradient_error() -> crate::Result<(f64, usize)> {
    let model = small_model(12)?;
    let mut pts = vec![Tensor::randn(&[2, 3, 32, 32], 1.0, &mut rng(13))];
    let mut r = rng(15);
    for p in model.params.iter() {
        // Residual gammas start at zero; spread them so branch gradients are exercised.
        pts.push(if p.name.ends_with(".gamma") {
            Tensor::uniform(p.value.shape(), 0.5, 1.5, &mut r)
        } else {
            p.value.clone()
        });
    }
    let rep = grad_check_many(
        |g, v| {
            let bound = Bound(v[1..].to_vec());
            let out = model.forward_graph(g, &bound, v[0], BnMode::Eval)?;
            g.cross_entropy(out.logits, &[0, 1])
        },
        &pts,
        FD_STEP,
        Some(2),
    )?;
    Ok((rep.max_rel_error, rep.checked))
}

/// Stage output shapes (C1..C5) and logits shape of the default model on one 224×224 image.
pub struct ShapeChain {
    pub stages: Vec<Vec<usize>>,
    pub logits: Vec<usize>,
    pub mhsa_layers: usize,
    pub parameters: usize,
}

pub fn shape_chain_of_default_model() -> crate::Result<ShapeChain> {
    let model = BotNet::build(BotNetConfig::default(), 0)?;
    let mut g = Graph::new();
    let p = model.params.bind_frozen(&mut g);
    let x = g.constant(Tensor::randn(&[1, 3, 224, 224], 1.0, &mut rng(14)));
    let out = model.forward_graph(&mut g, &p, x, BnMode::Eval)?;
    Ok(ShapeChain {
        stages: out.stages.iter().map(|&s| g.shape(s).to_vec()).collect(),
        logits: g.shape(out.logits).to_vec(),
        mhsa_layers: model.mhsa_count(),
        parameters: model.params.numel(),
    })
}

fn shape_chain() -> Outcome {
    let c = shape_chain_of_default_model().map_err(e2s)?;
    let got = c.stages;
    let want: Vec<Vec<usize>> =
        [(64, 112), (256, 56), (512, 28), (1024, 14), (2048, 7)].iter().map(|&(c, s)| vec![1, c, s, s]).collect();
    if got != want || c.logits != [1, 2] || c.mhsa_layers != 3 {
        return Err(format!("stages {got:?}, logits {:?}, {} MHSA layers", c.logits, c.mhsa_layers));
    }
    Ok(format!("C1..C5 at 112/56/28/14/7, logits [1, 2], {} parameters", c.parameters))
}

fn sam_norm() -> Outcome {
    let worst = sam_norm_deviation().map_err(e2s)?;
    if worst >= 1e-12 {
        return Err(format!("|‖ε‖ - ρ| reached {worst:.2e}"));
    }
    if !sam_rho_zero_matches_adam(25).map_err(e2s)? {
        return Err("ρ = 0 trajectory differs from plain Adam".into());
    }
    Ok(format!("‖ε‖ = ρ within {worst:.1e}; ρ = 0 matches Adam over 25 steps"))
}

/// Largest `|‖ε‖ - ρ|` over 20 random perturbations.
pub fn sam_norm_deviation() -> crate::Result<f64> {
    let mut r = rng(15);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let mut params = vec![Tensor::randn(&[3, 4], 1.0, &mut r), Tensor::randn(&[5], 1.0, &mut r)];
        let grads = vec![Tensor::randn(&[3, 4], 1.0, &mut r), Tensor::randn(&[5], 1.0, &mut r)];
        let rho = r.random_range(0.01..1.0);
        let p = perturb(&mut params, &grads, rho)?;
        worst = worst.max((global_norm(&p.epsilon) - rho).abs());
    }
    Ok(worst)
}

/// Whether the ρ = 0 two-pass step reproduces plain Adam bit for bit over `steps` steps.
pub fn sam_rho_zero_matches_adam(steps: usize) -> crate::Result<bool> {
    let mut r = rng(19);
    let target = Tensor::randn(&[6], 1.0, &mut r);
    let grad = |p: &Tensor| Tensor::from_fn(&[6], |i| 2.0 * (p.data()[i] - target.data()[i]));
    let start = vec![Tensor::randn(&[6], 1.0, &mut r)];
    let cfg = SamConfig { rho: 0.0, base: AdamConfig { learning_rate: 1e-2, ..Default::default() } };
    let (mut a, mut b) = (start.clone(), start.clone());
    let (mut sa, mut sb) = (AdamState::new(&a), AdamState::new(&b));
    for _ in 0..steps {
        sam_step(|p, _| Ok((0.0, vec![grad(&p[0])])), &mut a, &mut sa, &cfg)?;
        let gb = vec![grad(&b[0])];
        adam_step(&mut sb, &mut b, &gb, &cfg.base)?;
    }
    Ok(a.iter().zip(&b).all(|(x, y)| x.data().iter().zip(y.data()).all(|(u, v)| u.to_bits() == v.to_bits())))
}

fn pairwise_auc(s: &[f64], t: &[usize]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if t[i] == 1 && t[j] == 0 {
                den += 1.0;
                num += if s[i] > s[j] { 1.0 } else if s[i] == s[j] { 0.5 } else { 0.0 };
            }
        }
    }
    num / den
}

fn auc_oracle() -> Outcome {
    within("max deviation from the pairwise oracle over 50 instances", auc_oracle_deviation(50).map_err(e2s)?, 1e-12)
}

/// Trapezoidal AUC against the O(n²) pairwise count on random tied scores.
pub fn auc_oracle_deviation(instances: usize) -> crate::Result<f64> {
    let mut r = rng(16);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let n = r.random_range(4..40);
        let mut t: Vec<usize> = (0..n).map(|_| usize::from(r.random_bool(0.5))).collect();
        t[0] = 0;
        t[1] = 1;
        let s: Vec<f64> = (0..n).map(|_| (r.random::<f64>() * 8.0).round() / 8.0).collect();
        let (auc, _) = roc_auc(&s, &t)?;
        worst = worst.max((auc - pairwise_auc(&s, &t)).abs());
    }
    Ok(worst)
}

/// Accuracy, precision, recall and F1 for predictions [1,1,0,0] against truths [1,0,1,0].
pub fn four_sample_metrics() -> crate::Result<[f64; 4]> {
    let m = compute_metrics(&[1, 1, 0, 0], &[0.9, 0.8, 0.3, 0.2], &[1, 0, 1, 0])?;
    Ok([m.accuracy, m.precision, m.recall, m.f1])
}

fn metric_example() -> Outcome {
    let m = four_sample_metrics().map_err(e2s)?;
    if m != [0.5; 4] {
        return Err(format!("got {m:?}"));
    }
    Ok("accuracy = precision = recall = F1 = 0.5".into())
}

fn vote_enumeration() -> Outcome {
    match vote_enumeration_mismatches().map_err(e2s)?.first() {
        Some(m) => Err(m.clone()),
        None => Ok("all 1024 label patterns agree".into()),
    }
}

/// Every 10-slice label pattern, at two probability levels, against a direct count.
pub fn vote_enumeration_mismatches() -> crate::Result<Vec<String>> {
    let mut bad = Vec::new();
    for pattern in 0u32..1 << 10 {
        for hi in [0.9, 0.55] {
            let probs: Vec<f64> = (0..10).map(|i| if pattern >> i & 1 == 1 { hi } else { 0.2 }).collect();
            let mean = probs.iter().sum::<f64>() / 10.0;
            let want = match pattern.count_ones() {
                6.. => 1,
                5 => usize::from(mean >= 0.5),
                _ => 0,
            };
            let (got, _) = majority_vote(&probs)?;
            if got != want {
                bad.push(format!("pattern {pattern:010b}: vote {got}, enumeration {want}"));
            }
        }
    }
    Ok(bad)
}

fn split_disjoint() -> Outcome {
    match split_leaks(100, 5).map_err(e2s)?.first() {
        Some(m) => Err(m.clone()),
        None => Ok("100 seeds × 5 folds: train, val and test subjects pairwise disjoint".into()),
    }
}

/// Builds plans for `seeds` seeds with `folds` folds over an uneven two-class
/// manifest and reports every fold whose emitted streams share a subject.
pub fn split_leaks(seeds: u64, folds: usize) -> crate::Result<Vec<String>> {
    let mut rows = Vec::new();
    for (label, count) in [(Label::CN, 23), (Label::AD, 19)] {
        for i in 0..count {
            for j in 0..2 {
                rows.push(ManifestRow {
                    subject_id: format!("{label}{i}"),
                    scan_id: format!("{label}{i}-{j}"),
                    label,
                    path: "unused.botv".into(),
                });
            }
        }
    }
    let manifest = Manifest::new(rows)?;
    let as_samples = |ids: &BTreeSet<String>| -> Vec<SliceSample> {
        ids.iter()
            .map(|s| SliceSample {
                subject_id: s.clone(),
                scan_id: s.clone(),
                slice_index: 0,
                pixels: Tensor::zeros(&[1, 1]),
                label: 0,
            })
            .collect()
    };
    let mut leaks = Vec::new();
    for seed in 0..seeds {
        let plan = make_split(&manifest, Task::AdVsCn, [0.8, 0.1, 0.1], seed)?.with_folds(folds)?;
        let test = plan.test_set();
        for fold in 0..plan.num_folds() {
            let (train, val) = plan.fold_partition(fold)?;
            let streams = [("train", as_samples(&train)), ("val", as_samples(&val)), ("test", as_samples(&test))];
            let views: Vec<(&str, &[SliceSample])> = streams.iter().map(|(n, v)| (*n, v.as_slice())).collect();
            if let Err(e) = check_disjoint_streams(&views) {
                leaks.push(format!("seed {seed} fold {fold}: {e}"));
            }
        }
    }
    Ok(leaks)
}

/// Serializes a small model, reloads it, and returns (bytes, logits before, logits after).
pub fn checkpoint_roundtrip_logits() -> crate::Result<(usize, Tensor, Tensor)> {
    let model = small_model(17)?;
    let x = Tensor::randn(&[2, 3, 32, 32], 1.0, &mut rng(18));
    let before = model.forward(&x)?;
    let bytes = model.to_checkpoint(&TrainingMeta { seed: 17, ..Default::default() }).to_bytes();
    let (back, _) = BotNet::from_checkpoint(&Checkpoint::from_bytes(&bytes)?)?;
    let after = back.forward(&x)?;
    Ok((bytes.len(), before, after))
}

fn checkpoint_roundtrip() -> Outcome {
    let (n, before, after) = checkpoint_roundtrip_logits().map_err(e2s)?;
    if before.data().iter().zip(after.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
        return Err("reloaded logits differ".into());
    }
    Ok(format!("{n} bytes, logits bit-identical"))
}
