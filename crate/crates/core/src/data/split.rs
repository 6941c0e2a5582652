//! Subject-level train/validation/test splits and cross-validation folds.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Label, Manifest, Task};
use crate::error::{Error, Result};
use crate::faults::{self, Fault};

pub const SPLIT_VERSION: u32 = 1;
pub const MIN_SUBJECTS_PER_CLASS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub version: u32,
    pub task: Task,
    pub seed: u64,
    pub ratios: [f64; 3],
    pub labels: BTreeMap<String, Label>,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    /// Partition of `train ∪ val`; fold `i` validates on `folds[i]`.
    pub folds: Vec<Vec<String>>,
}

/// Splits `n` items by `ratios` with largest-remainder rounding; ties go to the earlier part.
pub fn largest_remainder(n: usize, ratios: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (raw[a] - raw[a].floor(), raw[b] - raw[b].floor());
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

fn class_rng(seed: u64, salt: u64, label: Label) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (label as u64 + 1) << 56)
}

/// Shuffles subjects per class with `seed` and cuts them by `ratios` (train, val, test).
pub fn make_split(manifest: &Manifest, task: Task, ratios: [f64; 3], seed: u64) -> Result<SplitPlan> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Data(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let (neg, pos) = task.classes();
    let mut labels = BTreeMap::new();
    for (subject, label) in manifest.subjects() {
        if task.binary(label).is_some() {
            labels.insert(subject, label);
        }
    }
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for class in [neg, pos] {
        let mut members: Vec<String> = labels.iter().filter(|(_, &l)| l == class).map(|(s, _)| s.clone()).collect();
        if members.len() < MIN_SUBJECTS_PER_CLASS {
            return Err(Error::Data(format!(
                "cannot stratify: class {class} has {} subjects for task {task}, need at least {MIN_SUBJECTS_PER_CLASS}",
                members.len()
            )));
        }
        members.shuffle(&mut class_rng(seed, 1, class));
        let counts = largest_remainder(members.len(), &ratios);
        let mut it = members.into_iter();
        train.extend(it.by_ref().take(counts[0]));
        val.extend(it.by_ref().take(counts[1]));
        test.extend(it);
    }
    for v in [&mut train, &mut val, &mut test] {
        v.sort();
    }
    let plan = SplitPlan { version: SPLIT_VERSION, task, seed, ratios, labels, train, val, test, folds: Vec::new() };
    plan.check()?;
    Ok(plan)
}

/// Deals `train ∪ val` subjects round-robin into `k` stratified folds.
pub fn make_folds(plan: &SplitPlan, k: usize) -> Result<Vec<Vec<String>>> {
    if k < 2 {
        return Err(Error::Data(format!("need at least 2 folds, got {k}")));
    }
    let (neg, pos) = plan.task.classes();
    let mut folds = vec![Vec::new(); k];
    for class in [neg, pos] {
        let mut pool: Vec<String> =
            plan.train.iter().chain(&plan.val).filter(|s| plan.labels.get(*s) == Some(&class)).cloned().collect();
        pool.sort();
        if pool.len() < k {
            return Err(Error::Data(format!(
                "cannot stratify: class {class} has {} train/val subjects for {k} folds",
                pool.len()
            )));
        }
        pool.shuffle(&mut class_rng(plan.seed, 2, class));
        for (i, s) in pool.into_iter().enumerate() {
            folds[i % k].push(s);
        }
    }
    for f in &mut folds {
        f.sort();
    }
    Ok(folds)
}

impl SplitPlan {
    pub fn with_folds(mut self, k: usize) -> Result<Self> {
        self.folds = make_folds(&self, k)?;
        self.check()?;
        Ok(self)
    }

    pub fn num_folds(&self) -> usize {
        self.folds.len()
    }

    /// `(train, validation)` subjects for one fold.
    pub fn fold_partition(&self, fold: usize) -> Result<(BTreeSet<String>, BTreeSet<String>)> {
        let val: BTreeSet<String> = self
            .folds
            .get(fold)
            .ok_or_else(|| Error::Data(format!("fold {fold} out of range ({} folds)", self.folds.len())))?
            .iter()
            .cloned()
            .collect();
        let mut train: BTreeSet<String> =
            self.folds.iter().enumerate().filter(|(i, _)| *i != fold).flat_map(|(_, f)| f.iter().cloned()).collect();
        if faults::active(Fault::LeakSubject) {
            if let Some(s) = self.test.first() {
                train.insert(s.clone());
            }
        }
        Ok((train, val))
    }

    pub fn test_set(&self) -> BTreeSet<String> {
        self.test.iter().cloned().collect()
    }

    /// Pairwise disjointness of train/val/test, and folds partitioning train ∪ val.
    pub fn check(&self) -> Result<()> {
        let sets = [&self.train, &self.val, &self.test].map(|v| v.iter().collect::<BTreeSet<_>>());
        let names = ["train", "val", "test"];
        for i in 0..3 {
            if sets[i].len() != [&self.train, &self.val, &self.test][i].len() {
                return Err(Error::Data(format!("duplicate subject inside the {} set", names[i])));
            }
            for j in i + 1..3 {
                if let Some(s) = sets[i].intersection(&sets[j]).next() {
                    return Err(Error::Data(format!("subject {s} is in both {} and {}", names[i], names[j])));
                }
            }
        }
        if !self.folds.is_empty() {
            let mut seen = BTreeSet::new();
            for f in &self.folds {
                for s in f {
                    if !seen.insert(s) {
                        return Err(Error::Data(format!("subject {s} appears in two folds")));
                    }
                }
            }
            let pool: BTreeSet<&String> = sets[0].union(&sets[1]).copied().collect();
            if seen != pool {
                return Err(Error::Data("folds do not partition train ∪ val".into()));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let plan: SplitPlan = serde_json::from_str(&text)?;
        if plan.version != SPLIT_VERSION {
            return Err(Error::Data(format!("{}: unsupported split version {}", path.display(), plan.version)));
        }
        plan.check()?;
        Ok(plan)
    }
}
