use std::time::Instant;

use botkit_core::attention::MhsaConfig;
use botkit_core::model::checkpoint::Checkpoint;
use botkit_core::model::{
    replicate_channels, BnBank, BotNet, BotNetConfig, Bottleneck, BottleneckSpec, Builder, Pass, SpatialOp,
    TrainingMeta, Width,
};
use botkit_core::params::{Bound, ParamStore};
use botkit_core::tensor::{grad_check_many, BnMode, Graph, RunningStats, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn small() -> BotNetConfig {
    BotNetConfig::scaled(Width::new(1, 8).unwrap(), 32)
}

struct Block {
    block: Bottleneck,
    store: ParamStore,
    bank: BnBank,
}

fn block(spec: BottleneckSpec, size: usize, heads: usize, seed: u64) -> Block {
    let mut store = ParamStore::new();
    let mut bank = BnBank::new();
    let mut r = rng(seed);
    let mhsa = (spec.spatial_op == SpatialOp::Mhsa).then(|| MhsaConfig::new(heads, spec.mid_channels).unwrap());
    let mut b = Builder { store: &mut store, bank: &mut bank, rng: &mut r };
    let block = Bottleneck::new(spec, (size, size), mhsa, "blk", &mut b).unwrap();
    Block { block, store, bank }
}

fn run_block(b: &Block, x: &Tensor, mode: BnMode) -> Tensor {
    let mut g = Graph::new();
    let p = b.store.bind_frozen(&mut g);
    let xv = g.constant(x.clone());
    let mut pass = Pass::new(&mut g, &p, &b.bank, mode);
    let y = b.block.forward(&mut pass, xv).unwrap();
    g.value(y).clone()
}

fn spec(cin: usize, mid: usize, op: SpatialOp, stride: usize, proj: bool) -> BottleneckSpec {
    BottleneckSpec {
        in_channels: cin,
        mid_channels: mid,
        out_channels: 4 * mid,
        spatial_op: op,
        stride,
        has_projection_shortcut: proj,
    }
}

#[test]
fn default_model_stage_sizes_and_logits() {
    let start = Instant::now();
    let model = BotNet::build(BotNetConfig::default(), 0).unwrap();
    let x = Tensor::randn(&[1, 3, 224, 224], 1.0, &mut rng(1));
    let mut g = Graph::new();
    let p = model.params.bind_frozen(&mut g);
    let xv = g.constant(x);
    let out = model.forward_graph(&mut g, &p, xv, BnMode::Eval).unwrap();
    let sizes: Vec<usize> = out.stages.iter().map(|&s| g.shape(s)[2]).collect();
    let widths: Vec<usize> = out.stages.iter().map(|&s| g.shape(s)[1]).collect();
    assert_eq!(sizes, [112, 56, 28, 14, 7]);
    assert_eq!(widths, [64, 256, 512, 1024, 2048]);
    assert_eq!(g.shape(out.logits), &[1, 2]);
    assert!(g.value(out.logits).all_finite());
    assert!(start.elapsed().as_secs() < 300);
}

#[test]
fn exactly_three_attention_layers_all_in_last_stage() {
    let model = BotNet::build(small(), 0).unwrap();
    assert_eq!(model.mhsa_count(), 3);
    for (s, blocks) in model.stages.iter().enumerate() {
        for b in blocks {
            assert_eq!(b.mhsa().is_some(), s == 3);
        }
    }
    assert_eq!(model.stages.iter().map(Vec::len).collect::<Vec<_>>(), [3, 4, 6, 3]);
}

#[test]
fn parameter_count_matches_closed_form() {
    // values from tests/data/param_count.py
    assert_eq!(BotNet::build(BotNetConfig::default(), 0).unwrap().params.numel(), 18_800_322);
    assert_eq!(BotNet::build(small(), 0).unwrap().params.numel(), 301_018);
    let m = BotNet::build(BotNetConfig::scaled(Width::new(1, 8).unwrap(), 64), 0).unwrap();
    assert_eq!(m.params.numel(), 301_146);
}

#[test]
fn parameter_names_follow_stage_block_layout() {
    let m = BotNet::build(small(), 0).unwrap();
    for name in ["c1.weight", "c2.0.proj.weight", "c5.0.mhsa.wq[0]", "c5.2.mhsa.rh", "c5.1.mhsa.wv[7]", "fc.weight"] {
        assert!(m.params.id(name).is_some(), "{name}");
    }
    let c50 = m.params.get(m.params.id("c5.0.mhsa.rh").unwrap());
    let c51 = m.params.get(m.params.id("c5.1.mhsa.rh").unwrap());
    // first C5 block attends at 2x2 (before its pool), later ones at 1x1
    assert_eq!(c50.shape(), &[3, 8]);
    assert_eq!(c51.shape(), &[1, 8]);
}

#[test]
fn scaled_models_run() {
    for size in [32, 64] {
        let m = BotNet::build(BotNetConfig::scaled(Width::new(1, 8).unwrap(), size), 3).unwrap();
        let y = m.forward(&Tensor::randn(&[2, 3, size, size], 1.0, &mut rng(4))).unwrap();
        assert_eq!(y.shape(), &[2, 2]);
        assert!(y.all_finite());
    }
}

#[test]
fn invalid_configs_are_rejected() {
    assert!(BotNet::build(BotNetConfig::scaled(Width::new(1, 128).unwrap(), 32), 0).is_err());
    assert!(BotNet::build(BotNetConfig::scaled(Width::new(1, 8).unwrap(), 48), 0).is_err());
    assert!(BotNet::build(BotNetConfig { stage_depths: [1, 1, 1, 1], ..Default::default() }, 0).is_err());
    assert!(BotNet::build(BotNetConfig { heads: 3, ..small() }, 0).is_err());
    assert!("1/0".parse::<Width>().is_err());
    assert_eq!("1/8".parse::<Width>().unwrap(), Width { num: 1, den: 8 });
}

#[test]
fn wrong_input_size_is_rejected() {
    let m = BotNet::build(small(), 0).unwrap();
    assert!(m.forward(&Tensor::zeros(&[1, 3, 64, 64])).is_err());
    assert!(m.forward(&Tensor::zeros(&[1, 1, 32, 32])).is_err());
}

#[test]
fn conv_block_downsamples() {
    let b = block(spec(256, 128, SpatialOp::Conv3x3, 2, true), 56, 8, 5);
    let y = run_block(&b, &Tensor::randn(&[1, 256, 56, 56], 1.0, &mut rng(6)), BnMode::Eval);
    assert_eq!(y.shape(), &[1, 512, 28, 28]);
}

#[test]
fn bot_blocks_keep_or_halve_resolution() {
    let b = block(spec(1024, 512, SpatialOp::Mhsa, 2, true), 14, 8, 7);
    let y = run_block(&b, &Tensor::randn(&[1, 1024, 14, 14], 1.0, &mut rng(8)), BnMode::Eval);
    assert_eq!(y.shape(), &[1, 2048, 7, 7]);
    let b = block(spec(2048, 512, SpatialOp::Mhsa, 1, false), 7, 8, 9);
    let y = run_block(&b, &y, BnMode::Eval);
    assert_eq!(y.shape(), &[1, 2048, 7, 7]);
}

#[test]
fn block_rejects_channel_mismatch() {
    let b = block(spec(16, 4, SpatialOp::Conv3x3, 1, false), 4, 1, 10);
    let mut g = Graph::new();
    let p = b.store.bind_frozen(&mut g);
    let x = g.constant(Tensor::zeros(&[1, 8, 4, 4]));
    let mut pass = Pass::new(&mut g, &p, &b.bank, BnMode::Eval);
    let err = b.block.forward(&mut pass, x).unwrap_err().to_string();
    assert!(err.contains("[1, 8, 4, 4]") && err.contains("16"), "{err}");
    assert!(spec(16, 4, SpatialOp::Conv3x3, 2, false).validate().is_err());
    assert!(BottleneckSpec { out_channels: 15, ..spec(16, 4, SpatialOp::Conv3x3, 1, false) }.validate().is_err());
}

fn zero(b: &mut Block, id: botkit_core::params::ParamId) {
    let s = b.store.get(id).shape().to_vec();
    *b.store.get_mut(id) = Tensor::zeros(&s);
}

fn relu(t: &Tensor) -> Tensor {
    t.map(|v| v.max(0.0))
}

#[test]
fn zeroed_residual_branch_collapses_to_shortcut() {
    let x = Tensor::randn(&[2, 16, 4, 4], 1.0, &mut rng(11));
    for op in [SpatialOp::Conv3x3, SpatialOp::Mhsa] {
        let mut b = block(spec(16, 4, op, 1, false), 4, 2, 12);
        let id = b.block.terminal_conv();
        zero(&mut b, id);
        for mode in [BnMode::Eval, BnMode::Train] {
            assert_eq!(run_block(&b, &x, mode), relu(&x), "{op:?} {mode:?}");
        }
    }
}

#[test]
fn zero_value_projection_collapses_bot_block_to_shortcut() {
    let x = Tensor::randn(&[1, 16, 4, 4], 1.0, &mut rng(13));
    let mut b = block(spec(16, 4, SpatialOp::Mhsa, 1, false), 4, 2, 14);
    for id in b.block.mhsa().unwrap().wv.clone() {
        zero(&mut b, id);
    }
    assert_eq!(run_block(&b, &x, BnMode::Eval), relu(&x));

    // with a projection shortcut the output is relu(BN(proj(x)))
    let mut b = block(spec(16, 4, SpatialOp::Mhsa, 2, true), 4, 2, 15);
    for id in b.block.mhsa().unwrap().wv.clone() {
        zero(&mut b, id);
    }
    let proj = b.block.shortcut.unwrap();
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let w = g.constant(b.store.get(proj.weight).clone());
    let c = g.conv2d(xv, w, None, 2, 0).unwrap();
    let (gm, bt) = (g.constant(b.store.get(proj.bn.gamma).clone()), g.constant(b.store.get(proj.bn.beta).clone()));
    let n = g.batch_norm2d(c, gm, bt, &RunningStats::new(16), BnMode::Eval).unwrap();
    let expect = relu(g.value(n));
    assert_eq!(run_block(&b, &x, BnMode::Eval), expect);
}

#[test]
fn every_block_of_a_model_collapses_when_terminal_convs_are_zero() {
    let mut m = BotNet::build(small(), 16).unwrap();
    let ids: Vec<_> = m.blocks().map(|b| b.terminal_conv()).collect();
    for id in ids {
        let s = m.params.get(id).shape().to_vec();
        *m.params.get_mut(id) = Tensor::zeros(&s);
    }
    let x = Tensor::randn(&[1, 3, 32, 32], 1.0, &mut rng(17));
    let mut g = Graph::new();
    let p = m.params.bind_frozen(&mut g);
    let xv = g.constant(x);
    let out = m.forward_graph(&mut g, &p, xv, BnMode::Eval).unwrap();
    // identity-shortcut blocks (all but the first of each stage) pass their input through
    let s3 = out.stages[3];
    let c4_in = g.value(out.stages[2]).clone();
    let c4_first = &m.stages[2][0];
    let mut g2 = Graph::new();
    let p2 = m.params.bind_frozen(&mut g2);
    let xv2 = g2.constant(c4_in);
    let mut pass = Pass::new(&mut g2, &p2, &m.bn, BnMode::Eval);
    let first = c4_first.forward(&mut pass, xv2).unwrap();
    assert_eq!(g2.value(first), g.value(s3));
}

fn block_grad_check(b: &Block, x: Tensor, seed: u64) -> f64 {
    let mut points = b.store.values();
    points.push(x.clone());
    let probe = {
        let mut g = Graph::new();
        let p = b.store.bind_frozen(&mut g);
        let xv = g.constant(x);
        let mut pass = Pass::new(&mut g, &p, &b.bank, BnMode::Train);
        let y = b.block.forward(&mut pass, xv).unwrap();
        Tensor::randn(g.shape(y), 1.0, &mut rng(seed))
    };
    let f = |g: &mut Graph, vs: &[Var]| {
        let (params, x) = vs.split_at(vs.len() - 1);
        let bound = Bound(params.to_vec());
        let mut pass = Pass::new(g, &bound, &b.bank, BnMode::Train);
        let y = b.block.forward(&mut pass, x[0])?;
        let w = g.constant(probe.clone());
        let prod = g.mul(y, w)?;
        Ok(g.sum(prod))
    };
    let rep = grad_check_many(f, &points, 1e-5, None).unwrap();
    assert_eq!(rep.checked, points.iter().map(Tensor::numel).sum::<usize>());
    rep.max_rel_error
}

#[test]
fn conv_block_grad_check() {
    let b = block(spec(8, 2, SpatialOp::Conv3x3, 2, true), 6, 1, 18);
    let err = block_grad_check(&b, Tensor::randn(&[2, 8, 6, 6], 1.0, &mut rng(19)), 20);
    assert!(err < 1e-4, "{err}");
}

#[test]
fn bot_block_grad_check() {
    let b = block(spec(8, 4, SpatialOp::Mhsa, 2, true), 4, 2, 21);
    let err = block_grad_check(&b, Tensor::randn(&[2, 8, 4, 4], 1.0, &mut rng(22)), 23);
    assert!(err < 1e-4, "{err}");
}

#[test]
fn end_to_end_grad_check_small_model() {
    let m = BotNet::build(small(), 24).unwrap();
    let mut points = m.params.values();
    // Residual gammas start at zero, which would silence every branch gradient.
    let mut r = rng(30);
    for (p, v) in m.params.iter().zip(points.iter_mut()) {
        if p.name.ends_with(".gamma") {
            *v = Tensor::uniform(v.shape(), 0.5, 1.5, &mut r);
        }
    }
    points.push(Tensor::randn(&[2, 3, 32, 32], 1.0, &mut rng(25)));
    let labels = [0usize, 1];
    let f = |g: &mut Graph, vs: &[Var]| {
        let (params, x) = vs.split_at(vs.len() - 1);
        let out = m.forward_graph(g, &Bound(params.to_vec()), x[0], BnMode::Eval)?;
        g.cross_entropy(out.logits, &labels)
    };
    let rep = grad_check_many(f, &points, 1e-5, Some(3)).unwrap();
    assert!(rep.max_rel_error < 1e-3, "{rep:?}");
}

#[test]
fn residual_branches_start_silenced() {
    let m = BotNet::build(small(), 31).unwrap();
    let mut zeroed = 0;
    for p in m.params.iter() {
        if p.name.ends_with(".expand.bn.gamma") {
            assert!(p.value.data().iter().all(|&v| v == 0.0), "{}", p.name);
            zeroed += 1;
        } else if p.name.ends_with(".gamma") {
            assert!(p.value.data().iter().all(|&v| v == 1.0), "{}", p.name);
        }
    }
    assert_eq!(zeroed, m.stages.iter().map(Vec::len).sum::<usize>());
}

#[test]
fn eval_forward_is_deterministic() {
    let m = BotNet::build(small(), 26).unwrap();
    let x = Tensor::randn(&[3, 3, 32, 32], 1.0, &mut rng(27));
    assert_eq!(m.forward(&x).unwrap(), m.forward(&x).unwrap());
}

#[test]
fn train_pass_updates_running_statistics() {
    let mut m = BotNet::build(small(), 28).unwrap();
    let before = m.bn.clone();
    let mut g = Graph::new();
    let p = m.params.bind(&mut g);
    let xv = g.constant(Tensor::randn(&[4, 3, 32, 32], 1.0, &mut rng(29)));
    let out = m.forward_graph(&mut g, &p, xv, BnMode::Train).unwrap();
    assert_eq!(out.bn_nodes.len(), m.bn.len());
    m.absorb_batch_stats(&g, &out);
    for ((_, a), (_, b)) in before.iter().zip(&m.bn) {
        assert_ne!(a.mean, b.mean);
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.botn");
    let mut m = BotNet::build(small(), 30).unwrap();
    m.bn[3].1.mean[0] = 0.123456789;
    let x = Tensor::randn(&[2, 3, 32, 32], 1.0, &mut rng(31));
    let before = m.forward(&x).unwrap();
    let meta = TrainingMeta { epoch: 4, fold: 1, val_acc: 0.8125, seed: 30 };
    m.save_checkpoint(&path, &meta).unwrap();
    let (loaded, got) = BotNet::load_checkpoint(&path).unwrap();
    assert_eq!(got, meta);
    assert_eq!(loaded.config, m.config);
    assert_eq!(loaded.params, m.params);
    let after = loaded.forward(&x).unwrap();
    assert!(before.data().iter().zip(after.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn corrupt_checkpoints_name_the_offending_entry() {
    let m = BotNet::build(small(), 32).unwrap();
    let ck = m.to_checkpoint(&TrainingMeta::default());
    let mut bytes = ck.to_bytes();
    bytes[0] = b'X';
    assert!(Checkpoint::from_bytes(&bytes).unwrap_err().to_string().contains("bad magic"));

    let mut bad = ck.clone();
    let i = bad.entries.iter().position(|(n, _)| n == "c3.1.conv3.weight").unwrap();
    bad.entries[i].1 = Tensor::zeros(&[1]);
    let mut target = BotNet::build(small(), 33).unwrap();
    let err = target.load_state(&bad).unwrap_err().to_string();
    assert!(err.contains("c3.1.conv3.weight"), "{err}");

    let bytes = ck.to_bytes();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() / 2]).is_err());
    let err = BotNet::load_checkpoint(std::path::Path::new("/nonexistent/x.botn")).unwrap_err();
    assert!(matches!(err, botkit_core::Error::MissingArtifact(_)));
}

#[test]
fn grayscale_slice_replicated_to_three_channels() {
    let m = BotNet::build(small(), 34).unwrap();
    let gray = Tensor::uniform(&[2, 1, 32, 32], 0.0, 1.0, &mut rng(35));
    let x = replicate_channels(&gray, 3).unwrap();
    assert_eq!(x.at(&[1, 2, 5, 7]), gray.at(&[1, 0, 5, 7]));
    let y = m.forward(&x).unwrap();
    assert_eq!(y.shape(), &[2, 2]);
    assert!(y.all_finite());
}
