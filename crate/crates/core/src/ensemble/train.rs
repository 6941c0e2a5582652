//! Per-slice cross-validated training with model selection by validation accuracy.

use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::store::{fold_streams, SliceSample, SliceStore};
use crate::data::{AugmentConfig, SplitPlan, Task};
use crate::error::{Error, Result};
use crate::model::{replicate_channels, BotNet, BotNetConfig, Checkpoint, TrainingMeta};
use crate::optim::{sam_step, AdamState, SamConfig, SamPass, StepLog, StepReport};
use crate::params::Bound;
use crate::tensor::{BnMode, Graph, Tensor};

pub const MODEL_SET_VERSION: u32 = 1;
pub const MODEL_SET_FILE: &str = "model_set.json";

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub model: BotNetConfig,
    pub sam: SamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub augment: AugmentConfig,
    pub seed: u64,
}

/// Independent, reproducible seed for one (slice, fold, purpose) stream.
pub fn stream_seed(seed: u64, parts: &[u64]) -> u64 {
    // splitmix64 finalizer over the running mix
    parts.iter().fold(seed, |h, &p| {
        let mut z = h.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(p.wrapping_mul(0xD1B5_4A32_D192_ED69));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    })
}

/// FNV-1a over the checkpoint bytes, as 16 hex digits.
pub fn checksum(bytes: &[u8]) -> String {
    let h = bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    format!("{h:016x}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceModelEntry {
    pub slice_index: usize,
    /// Relative to the directory holding the model set.
    pub checkpoint: PathBuf,
    pub val_acc: f64,
    pub fold: usize,
    pub epoch: usize,
    pub checksum: String,
}

/// The selected checkpoint of every slice position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceModelSet {
    pub version: u32,
    pub task: Task,
    pub input_size: usize,
    pub entries: Vec<SliceModelEntry>,
}

impl SliceModelSet {
    pub fn validate(&self, expected_slices: usize) -> Result<()> {
        if self.entries.len() != expected_slices {
            return Err(Error::Data(format!(
                "model set has {} slice models, expected {expected_slices}",
                self.entries.len()
            )));
        }
        for (i, e) in self.entries.iter().enumerate() {
            if e.slice_index != i {
                return Err(Error::Data(format!("model set entry {i} is for slice {}", e.slice_index)));
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let p = dir.join(MODEL_SET_FILE);
        std::fs::write(&p, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&p, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join(MODEL_SET_FILE);
        if !p.exists() {
            return Err(Error::MissingArtifact(p));
        }
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let set: SliceModelSet = serde_json::from_str(&text)?;
        if set.version != MODEL_SET_VERSION {
            return Err(Error::Data(format!("{}: unsupported model set version {}", p.display(), set.version)));
        }
        Ok(set)
    }

    /// Loads every checkpoint, verifying checksums and input size.
    pub fn load_models(&self, dir: &Path) -> Result<Vec<BotNet>> {
        self.entries
            .iter()
            .map(|e| {
                let path = dir.join(&e.checkpoint);
                if !path.exists() {
                    return Err(Error::MissingArtifact(path));
                }
                let bytes = std::fs::read(&path).map_err(|err| Error::io(&path, err))?;
                if checksum(&bytes) != e.checksum {
                    return Err(Error::Checkpoint { entry: path.display().to_string(), reason: "checksum mismatch".into() });
                }
                let (model, _) = BotNet::from_checkpoint(&Checkpoint::from_bytes(&bytes)?)?;
                if model.config.input_size != self.input_size {
                    return Err(Error::Checkpoint {
                        entry: path.display().to_string(),
                        reason: format!("input size {}, set expects {}", model.config.input_size, self.input_size),
                    });
                }
                Ok(model)
            })
            .collect()
    }
}

/// One row of `curves/<slice>/<fold>.csv`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

/// `[N, C, s, s]` input batch and labels.
pub fn batch_tensor(samples: &[&SliceSample], channels: usize) -> Result<(Tensor, Vec<usize>)> {
    let first = samples.first().ok_or_else(|| Error::invalid("batch", "empty batch"))?;
    let s = first.pixels.shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * s[0] * s[1]);
    for smp in samples {
        if smp.pixels.shape() != s.as_slice() {
            return Err(Error::shape("batch", format!("mixed image shapes {s:?} and {:?}", smp.pixels.shape())));
        }
        data.extend_from_slice(smp.pixels.data());
    }
    let x = Tensor::new(&[samples.len(), 1, s[0], s[1]], data)?;
    let x = if channels == 1 { x } else { replicate_channels(&x, channels)? };
    Ok((x, samples.iter().map(|s| s.label).collect()))
}

/// Splits `0..n` into batches, folding a trailing single sample into the
/// previous batch: train-mode batch norm needs two values per channel.
pub fn batches(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().expect("nonempty");
        out.last_mut().expect("nonempty").extend(last);
    }
    out
}

/// Class-1 softmax probability of two-class logits `[N, 2]`.
pub fn positive_probs(logits: &Tensor) -> Vec<f64> {
    logits.data().chunks_exact(2).map(|r| 1.0 / (1.0 + (r[0] - r[1]).exp())).collect()
}

/// Eval-mode class-1 probabilities for `samples`, in order.
pub fn predict_probs(model: &BotNet, samples: &[SliceSample], batch_size: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(samples.len());
    let refs: Vec<&SliceSample> = samples.iter().collect();
    for chunk in refs.chunks(batch_size.max(1)) {
        let (x, _) = batch_tensor(chunk, model.config.in_channels)?;
        out.extend(positive_probs(&model.forward(&x)?));
    }
    Ok(out)
}

/// Mean cross-entropy and accuracy of `samples` in eval mode.
fn evaluate_stream(model: &BotNet, samples: &[SliceSample], batch_size: usize) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::Data("empty validation stream".into()));
    }
    let probs = predict_probs(model, samples, batch_size)?;
    let mut loss = 0.0;
    let mut correct = 0;
    for (p, s) in probs.iter().zip(samples) {
        let pt = if s.label == 1 { *p } else { 1.0 - p };
        loss -= pt.max(1e-300).ln();
        correct += usize::from(usize::from(*p > 0.5) == s.label);
    }
    let n = samples.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

struct BatchStats {
    bn: Vec<(usize, Vec<f64>, Vec<f64>, usize)>,
    correct: usize,
}

/// One SAM step on a batch; batch-norm statistics come from the clean pass only.
/// Also returns how many clean-pass predictions were correct.
fn train_batch(
    model: &mut BotNet,
    values: &mut [Tensor],
    state: &mut AdamState,
    sam: &SamConfig,
    x: &Tensor,
    labels: &[usize],
) -> Result<(StepReport, usize)> {
    let mut clean: Option<BatchStats> = None;
    let net = &*model;
    let report = sam_step(
        |params: &[Tensor], pass: SamPass| -> Result<(f64, Vec<Tensor>)> {
            let mut g = Graph::new();
            let bound = Bound(params.iter().map(|t| g.param(t.clone())).collect());
            let xv = g.constant(x.clone());
            let out = net.forward_graph(&mut g, &bound, xv, BnMode::Train)?;
            let loss = g.cross_entropy(out.logits, labels)?;
            let lv = g.value(loss).data()[0];
            if !lv.is_finite() {
                return Err(Error::NonFinite(format!("training loss {lv} ({pass:?} pass)")));
            }
            g.backward(loss)?;
            if pass == SamPass::Clean {
                let probs = positive_probs(g.value(out.logits));
                let correct = probs.iter().zip(labels).filter(|(p, &l)| usize::from(**p > 0.5) == l).count();
                let bn = out
                    .bn_nodes
                    .iter()
                    .filter_map(|&(idx, node)| {
                        g.bn_batch_stats(node).map(|(m, v, c)| (idx, m.to_vec(), v.to_vec(), c))
                    })
                    .collect();
                clean = Some(BatchStats { bn, correct });
            }
            Ok((lv, bound.grads(&g)))
        },
        values,
        state,
        sam,
    )?;
    let stats = clean.expect("clean pass runs first");
    for (idx, mean, var, count) in stats.bn {
        model.bn[idx].1.update(&mean, &var, count);
    }
    Ok((report, stats.correct))
}

struct FoldBest {
    val_acc: f64,
    epoch: usize,
    checkpoint: Checkpoint,
}

/// Trains one fold from a fresh initialization; returns its best epoch.
fn train_fold(
    store: &SliceStore,
    plan: &SplitPlan,
    cfg: &TrainConfig,
    slice: usize,
    fold: usize,
    out_dir: &Path,
) -> Result<Option<FoldBest>> {
    let init_seed = stream_seed(cfg.seed, &[slice as u64, fold as u64, 0]);
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, &[slice as u64, fold as u64, 1]));
    let mut model = BotNet::build(cfg.model.clone(), init_seed)?;
    let streams = fold_streams(store, plan, fold, slice, &cfg.augment, &mut rng)?;
    if streams.train.len() < 2 {
        return Err(Error::Data(format!("slice {slice} fold {fold}: fewer than 2 training samples")));
    }
    let mut values = model.params.values();
    let mut state = AdamState::new(&values);

    let curve_path = out_dir.join("curves").join(slice.to_string()).join(format!("{fold}.csv"));
    std::fs::create_dir_all(curve_path.parent().expect("has parent")).map_err(|e| Error::io(&curve_path, e))?;
    let mut curves = csv::Writer::from_path(&curve_path).map_err(|e| Error::Data(format!("{}: {e}", curve_path.display())))?;
    let mut log = StepLog::create(&out_dir.join("logs").join(slice.to_string()).join(format!("{fold}.csv")))?;

    let mut best: Option<FoldBest> = None;
    let mut order: Vec<usize> = (0..streams.train.len()).collect();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for b in batches(&order, cfg.batch_size) {
            let refs: Vec<&SliceSample> = b.iter().map(|&i| &streams.train[i]).collect();
            let (x, labels) = batch_tensor(&refs, cfg.model.in_channels)?;
            let (rep, hits) = train_batch(&mut model, &mut values, &mut state, &cfg.sam, &x, &labels)?;
            loss_sum += rep.loss_w * b.len() as f64;
            correct += hits;
            step += 1;
            log.record(epoch, step, &rep)?;
        }
        model.params.set_values(&values)?;
        let (val_loss, val_acc) = evaluate_stream(&model, &streams.val, cfg.batch_size.max(16))?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite(format!("validation loss {val_loss}")));
        }
        let n = streams.train.len() as f64;
        let row = CurveRow { epoch, train_loss: loss_sum / n, train_acc: correct as f64 / n, val_loss, val_acc };
        curves.serialize(row)?;
        curves.flush().map_err(|e| Error::io(&curve_path, e))?;
        info!(
            "slice {slice} fold {fold} epoch {epoch}: train loss {:.4} acc {:.3}, val loss {val_loss:.4} acc {val_acc:.3}",
            row.train_loss, row.train_acc
        );
        if best.as_ref().is_none_or(|b| val_acc > b.val_acc) {
            let meta = TrainingMeta { epoch, fold, val_acc, seed: init_seed };
            best = Some(FoldBest { val_acc, epoch, checkpoint: model.to_checkpoint(&meta) });
        }
    }
    log.flush()?;
    Ok(best)
}

/// Cross-validates one slice position and writes its selected checkpoint.
pub fn train_slice(
    store: &SliceStore,
    plan: &SplitPlan,
    cfg: &TrainConfig,
    slice: usize,
    out_dir: &Path,
) -> Result<SliceModelEntry> {
    let mut best: Option<(usize, FoldBest)> = None;
    for fold in 0..plan.num_folds() {
        match train_fold(store, plan, cfg, slice, fold, out_dir) {
            Ok(Some(fb)) => {
                if best.as_ref().is_none_or(|(_, b)| fb.val_acc > b.val_acc) {
                    best = Some((fold, fb));
                }
            }
            Ok(None) => {}
            Err(Error::NonFinite(msg)) => warn!("slice {slice} fold {fold} diverged and was abandoned: {msg}"),
            Err(e) => return Err(e),
        }
    }
    let (fold, fb) = best.ok_or_else(|| Error::NonFinite(format!("slice {slice}: every fold diverged")))?;
    let rel = PathBuf::from("models").join(format!("slice_{slice:02}.botn"));
    let bytes = fb.checkpoint.to_bytes();
    let path = out_dir.join(&rel);
    std::fs::create_dir_all(path.parent().expect("has parent")).map_err(|e| Error::io(&path, e))?;
    std::fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
    info!("slice {slice}: kept fold {fold} epoch {} with validation accuracy {:.3}", fb.epoch, fb.val_acc);
    Ok(SliceModelEntry { slice_index: slice, checkpoint: rel, val_acc: fb.val_acc, fold, epoch: fb.epoch, checksum: checksum(&bytes) })
}

/// Trains every slice position of `store` (concurrently when parallelism is on)
/// and writes `model_set.json` to `out_dir`.
pub fn train_slice_models(store: &SliceStore, plan: &SplitPlan, cfg: &TrainConfig, out_dir: &Path) -> Result<SliceModelSet> {
    cfg.sam.validate()?;
    cfg.model.validate()?;
    if cfg.epochs == 0 || cfg.batch_size < 2 {
        return Err(Error::invalid("train", format!("epochs {} and batch size {} (need ≥ 1 and ≥ 2)", cfg.epochs, cfg.batch_size)));
    }
    if cfg.model.input_size != store.size {
        return Err(Error::Data(format!("model input {} but store slices are {}", cfg.model.input_size, store.size)));
    }
    plan.check()?;
    if plan.num_folds() == 0 {
        return Err(Error::Data("split plan has no folds".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let results = crate::parallel::map_range(store.slices, |slice| train_slice(store, plan, cfg, slice, out_dir));
    let entries = results.into_iter().collect::<Result<Vec<_>>>()?;
    let set = SliceModelSet { version: MODEL_SET_VERSION, task: store.task, input_size: store.size, entries };
    set.save(out_dir)?;
    Ok(set)
}
