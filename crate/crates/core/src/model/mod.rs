//! The 50-layer bottleneck-transformer classifier.
//!
//! Stages C1..C5 follow the ResNet-50 layout ([3, 4, 6, 3] bottlenecks with
//! mid widths 64/128/256/512 and 4x expansion). The three C5 blocks use
//! global multi-head self-attention instead of a 3×3 convolution; the first of
//! them downsamples with a 2×2 average pool after attention.

pub mod block;
pub mod checkpoint;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use block::{BnBank, BnRef, Bottleneck, BottleneckSpec, Builder, ConvBn, Pass, Spatial, SpatialOp};
pub use checkpoint::Checkpoint;

use crate::attention::MhsaConfig;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{BnMode, Graph, Tensor, Var};

pub const STAGE_DEPTHS: [usize; 4] = [3, 4, 6, 3];
pub const STAGE_MID_CHANNELS: [usize; 4] = [64, 128, 256, 512];
pub const STEM_CHANNELS: usize = 64;

/// Rational channel multiplier, written `num/den` (or a bare integer).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Width {
    pub num: usize,
    pub den: usize,
}

impl Width {
    pub const ONE: Width = Width { num: 1, den: 1 };

    pub fn new(num: usize, den: usize) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::invalid("width", format!("{num}/{den} must be positive")));
        }
        Ok(Width { num, den })
    }

    pub fn apply(&self, channels: usize) -> Result<usize> {
        let scaled = channels * self.num;
        if scaled % self.den != 0 || scaled == 0 {
            return Err(Error::invalid(
                "width",
                format!("multiplier {self} turns {channels} channels into a non-integer count"),
            ));
        }
        Ok(scaled / self.den)
    }
}

impl fmt::Display for Width {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl FromStr for Width {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid("width", format!("cannot parse `{s}` as n or n/d"));
        match s.trim().split_once('/') {
            Some((n, d)) => Width::new(n.trim().parse().map_err(|_| bad())?, d.trim().parse().map_err(|_| bad())?),
            None => Width::new(s.trim().parse().map_err(|_| bad())?, 1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BotNetConfig {
    pub stage_depths: [usize; 4],
    pub heads: usize,
    pub num_classes: usize,
    pub input_size: usize,
    pub in_channels: usize,
    pub width: Width,
    pub value_relative: bool,
}

impl Default for BotNetConfig {
    fn default() -> Self {
        BotNetConfig {
            stage_depths: STAGE_DEPTHS,
            heads: 8,
            num_classes: 2,
            input_size: 224,
            in_channels: 3,
            width: Width::ONE,
            value_relative: false,
        }
    }
}

impl BotNetConfig {
    /// Width-reduced variant used for small inputs.
    pub fn scaled(width: Width, input_size: usize) -> Self {
        BotNetConfig { width, input_size, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(Error::invalid("botnet config", format!("input size {} is not a multiple of 32", self.input_size)));
        }
        if self.width == Width::ONE && self.stage_depths != STAGE_DEPTHS {
            return Err(Error::invalid("botnet config", format!("full-width depths must be {STAGE_DEPTHS:?}")));
        }
        if self.stage_depths.contains(&0) || self.num_classes < 2 || self.in_channels == 0 {
            return Err(Error::invalid("botnet config", "empty stage, fewer than 2 classes, or no input channels"));
        }
        self.stem_channels()?;
        for &m in &STAGE_MID_CHANNELS {
            self.width.apply(m)?;
        }
        MhsaConfig::new(self.heads, self.mid_channels(3)?)?;
        Ok(())
    }

    pub fn stem_channels(&self) -> Result<usize> {
        self.width.apply(STEM_CHANNELS)
    }

    pub fn mid_channels(&self, stage: usize) -> Result<usize> {
        self.width.apply(STAGE_MID_CHANNELS[stage])
    }

    fn to_meta(&self, meta: &mut BTreeMap<String, String>) {
        let depths: Vec<String> = self.stage_depths.iter().map(|d| d.to_string()).collect();
        meta.insert("model.stage_depths".into(), depths.join(","));
        meta.insert("model.heads".into(), self.heads.to_string());
        meta.insert("model.num_classes".into(), self.num_classes.to_string());
        meta.insert("model.input_size".into(), self.input_size.to_string());
        meta.insert("model.in_channels".into(), self.in_channels.to_string());
        meta.insert("model.width".into(), self.width.to_string());
        meta.insert("model.value_relative".into(), self.value_relative.to_string());
    }

    fn from_meta(meta: &BTreeMap<String, String>) -> Result<Self> {
        fn field<T: FromStr>(meta: &BTreeMap<String, String>, key: &str) -> Result<T> {
            let raw = meta.get(key).ok_or_else(|| Error::Checkpoint { entry: "<metadata>".into(), reason: format!("missing `{key}`") })?;
            raw.parse().map_err(|_| Error::Checkpoint { entry: "<metadata>".into(), reason: format!("bad `{key}` value `{raw}`") })
        }
        let depths: Vec<usize> = field::<String>(meta, "model.stage_depths")?
            .split(',')
            .map(|d| d.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Checkpoint { entry: "<metadata>".into(), reason: "bad stage depths".into() })?;
        let stage_depths: [usize; 4] = depths
            .try_into()
            .map_err(|_| Error::Checkpoint { entry: "<metadata>".into(), reason: "need 4 stage depths".into() })?;
        Ok(BotNetConfig {
            stage_depths,
            heads: field(meta, "model.heads")?,
            num_classes: field(meta, "model.num_classes")?,
            input_size: field(meta, "model.input_size")?,
            in_channels: field(meta, "model.in_channels")?,
            width: field(meta, "model.width")?,
            value_relative: field(meta, "model.value_relative")?,
        })
    }
}

/// Training provenance stored alongside the weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingMeta {
    pub epoch: usize,
    pub fold: usize,
    pub val_acc: f64,
    pub seed: u64,
}

/// Result of a graph-level forward pass.
pub struct ForwardOutput {
    pub logits: Var,
    /// Outputs of C1..C5.
    pub stages: Vec<Var>,
    pub bn_nodes: Vec<(usize, Var)>,
}

#[derive(Clone, Debug)]
pub struct BotNet {
    pub config: BotNetConfig,
    pub params: ParamStore,
    pub bn: BnBank,
    pub stem: ConvBn,
    pub stages: Vec<Vec<Bottleneck>>,
    pub fc_weight: ParamId,
    pub fc_bias: ParamId,
}

impl BotNet {
    /// Deterministic construction from `seed`.
    pub fn build(config: BotNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut bn = BnBank::new();
        let mut b = Builder { store: &mut params, bank: &mut bn, rng: &mut rng };

        let stem_ch = config.stem_channels()?;
        let stem = b.conv_bn("c1", config.in_channels, stem_ch, 7, 2, 3)?;
        let mut size = config.input_size / 4;
        let mut cin = stem_ch;
        let mut stages = Vec::with_capacity(4);
        for (s, &depth) in config.stage_depths.iter().enumerate() {
            let mid = config.mid_channels(s)?;
            let mut blocks = Vec::with_capacity(depth);
            for i in 0..depth {
                let stride = if i == 0 && s > 0 { 2 } else { 1 };
                let spec = BottleneckSpec {
                    in_channels: cin,
                    mid_channels: mid,
                    out_channels: 4 * mid,
                    spatial_op: if s == 3 { SpatialOp::Mhsa } else { SpatialOp::Conv3x3 },
                    stride,
                    has_projection_shortcut: i == 0,
                };
                let mhsa = if s == 3 {
                    Some(MhsaConfig::new(config.heads, mid)?.with_value_relative(config.value_relative))
                } else {
                    None
                };
                blocks.push(Bottleneck::new(spec, (size, size), mhsa, &format!("c{}.{i}", s + 2), &mut b)?);
                size /= stride;
                cin = 4 * mid;
            }
            stages.push(blocks);
        }
        let std = (1.0 / cin as f64).sqrt();
        let fc_weight = b.store.add("fc.weight", Tensor::randn(&[cin, config.num_classes], std, b.rng))?;
        let fc_bias = b.store.add("fc.bias", Tensor::zeros(&[config.num_classes]))?;
        let mut params = params;
        // Each residual branch starts silenced so every block begins as its shortcut.
        for block in stages.iter().flatten() {
            params.get_mut(block.expand.bn.gamma).data_mut().fill(0.0);
        }
        Ok(BotNet { config, params, bn, stem, stages, fc_weight, fc_bias })
    }

    pub fn mhsa_count(&self) -> usize {
        self.stages.iter().flatten().filter(|b| b.mhsa().is_some()).count()
    }

    pub fn blocks(&self) -> impl Iterator<Item = &Bottleneck> {
        self.stages.iter().flatten()
    }

    pub fn forward_graph(&self, g: &mut Graph, params: &Bound, x: Var, mode: BnMode) -> Result<ForwardOutput> {
        let s = g.shape(x).to_vec();
        let c = &self.config;
        if s.len() != 4 || s[1] != c.in_channels || s[2] != c.input_size || s[3] != c.input_size {
            return Err(Error::shape(
                "botnet",
                format!("input {s:?}, expected [N, {}, {}, {}]", c.in_channels, c.input_size, c.input_size),
            ));
        }
        let mut p = Pass::new(g, params, &self.bn, mode);
        let mut stage_out = Vec::with_capacity(5);
        let mut y = p.conv_bn(x, &self.stem, true)?;
        stage_out.push(y);
        y = p.g.max_pool2d(y, 3, 2, 1)?;
        for blocks in &self.stages {
            for blk in blocks {
                y = blk.forward(&mut p, y)?;
            }
            stage_out.push(y);
        }
        let pooled = p.g.global_avg_pool(y)?;
        let logits = p.g.linear(pooled, params.var(self.fc_weight), params.var(self.fc_bias))?;
        Ok(ForwardOutput { logits, stages: stage_out, bn_nodes: p.bn_nodes })
    }

    /// Eval-mode logits `[N, num_classes]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.params.bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let out = self.forward_graph(&mut g, &bound, xv, BnMode::Eval)?;
        Ok(g.value(out.logits).clone())
    }

    /// Folds the batch statistics recorded by a train-mode pass into the running averages.
    pub fn absorb_batch_stats(&mut self, g: &Graph, out: &ForwardOutput) {
        for &(idx, node) in &out.bn_nodes {
            if let Some((mean, var, count)) = g.bn_batch_stats(node) {
                self.bn[idx].1.update(mean, var, count);
            }
        }
    }

    pub fn to_checkpoint(&self, meta: &TrainingMeta) -> Checkpoint {
        let mut entries: Vec<(String, Tensor)> = self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        for (name, st) in &self.bn {
            let c = st.mean.len();
            entries.push((format!("{name}.running_mean"), Tensor::new(&[c], st.mean.clone()).expect("bn width")));
            entries.push((format!("{name}.running_var"), Tensor::new(&[c], st.var.clone()).expect("bn width")));
        }
        let mut m = BTreeMap::new();
        m.insert("epoch".into(), meta.epoch.to_string());
        m.insert("fold".into(), meta.fold.to_string());
        m.insert("val_acc".into(), meta.val_acc.to_string());
        m.insert("seed".into(), meta.seed.to_string());
        self.config.to_meta(&mut m);
        Checkpoint { entries, meta: m }
    }

    /// Rebuilds the architecture recorded in `ck` and loads its state.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, TrainingMeta)> {
        let config = BotNetConfig::from_meta(&ck.meta)?;
        let meta = training_meta(&ck.meta)?;
        let mut model = BotNet::build(config, meta.seed)?;
        model.load_state(ck)?;
        Ok((model, meta))
    }

    /// Overwrites parameters and running statistics; every entry must match by name and shape.
    pub fn load_state(&mut self, ck: &Checkpoint) -> Result<()> {
        let expected = self.params.len() + 2 * self.bn.len();
        if ck.entries.len() != expected {
            return Err(Error::Checkpoint {
                entry: "<header>".into(),
                reason: format!("{} entries, model has {expected}", ck.entries.len()),
            });
        }
        let fetch = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let t = ck.get(name).ok_or_else(|| Error::Checkpoint { entry: name.into(), reason: "missing".into() })?;
            if t.shape() != shape {
                return Err(Error::Checkpoint {
                    entry: name.into(),
                    reason: format!("shape {:?}, model expects {shape:?}", t.shape()),
                });
            }
            Ok(t.clone())
        };
        let mut values = Vec::with_capacity(self.params.len());
        for p in self.params.iter() {
            values.push(fetch(&p.name, p.value.shape())?);
        }
        let mut stats = Vec::with_capacity(self.bn.len());
        for (name, st) in &self.bn {
            let c = [st.mean.len()];
            let mean = fetch(&format!("{name}.running_mean"), &c)?.into_data();
            let var = fetch(&format!("{name}.running_var"), &c)?.into_data();
            stats.push((mean, var));
        }
        self.params.set_values(&values)?;
        for ((_, st), (mean, var)) in self.bn.iter_mut().zip(stats) {
            st.mean = mean;
            st.var = var;
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, path: &Path, meta: &TrainingMeta) -> Result<()> {
        self.to_checkpoint(meta).save(path)
    }

    pub fn load_checkpoint(path: &Path) -> Result<(Self, TrainingMeta)> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

fn training_meta(meta: &BTreeMap<String, String>) -> Result<TrainingMeta> {
    fn field<T: FromStr>(meta: &BTreeMap<String, String>, key: &str) -> Result<T> {
        let bad = || Error::Checkpoint { entry: "<metadata>".into(), reason: format!("missing or bad `{key}`") };
        meta.get(key).ok_or_else(bad)?.parse().map_err(|_| bad())
    }
    Ok(TrainingMeta {
        epoch: field(meta, "epoch")?,
        fold: field(meta, "fold")?,
        val_acc: field(meta, "val_acc")?,
        seed: field(meta, "seed")?,
    })
}

/// Copies a `[N, 1, H, W]` grayscale batch into `channels` identical planes.
pub fn replicate_channels(x: &Tensor, channels: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::shape("replicate_channels", format!("expected [N, 1, H, W], got {s:?}")));
    }
    let plane = s[2] * s[3];
    let mut out = Vec::with_capacity(x.numel() * channels);
    for item in x.data().chunks_exact(plane) {
        for _ in 0..channels {
            out.extend_from_slice(item);
        }
    }
    Tensor::new(&[s[0], channels, s[2], s[3]], out)
}
