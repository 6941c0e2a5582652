//! Preprocessed slice store and per-fold sample streams.
//!
//! On disk: `index.json` (scan list, slice count, image size) and
//! `pixels.f32`, raw little-endian `[scan, slice, size, size]`.

use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::slices::{augment, crop_and_normalize, extract_central_slices, AugmentConfig};
use super::{Label, Manifest, SplitPlan, Task, VolumeRecord};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const STORE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct SliceSample {
    pub subject_id: String,
    pub scan_id: String,
    pub slice_index: usize,
    /// `[size, size]`, values in [0, 1].
    pub pixels: Tensor,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanEntry {
    pub subject_id: String,
    pub scan_id: String,
    pub label: Label,
    pub target: usize,
}

#[derive(Serialize, Deserialize)]
struct StoreIndex {
    version: u32,
    task: Task,
    size: usize,
    slices: usize,
    scans: Vec<ScanEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SliceStore {
    pub task: Task,
    pub size: usize,
    pub slices: usize,
    pub scans: Vec<ScanEntry>,
    pixels: Vec<f32>,
}

impl SliceStore {
    /// Extracts, crops and normalizes `slices` central coronal slices of every task scan.
    pub fn build(manifest: &Manifest, task: Task, slices: usize, size: usize) -> Result<Self> {
        let rows: Vec<_> = manifest.rows.iter().filter(|r| task.binary(r.label).is_some()).collect();
        if rows.is_empty() {
            return Err(Error::Data(format!("manifest has no scans for task {task}")));
        }
        let per_scan = crate::parallel::map_range(rows.len(), |i| -> Result<Vec<f32>> {
            let vol = VolumeRecord::read(&rows[i].path)?;
            if vol.subject_id != rows[i].subject_id || vol.scan_id != rows[i].scan_id || vol.label != rows[i].label {
                return Err(Error::Data(format!(
                    "{}: header ({}, {}, {}) disagrees with manifest",
                    rows[i].path.display(),
                    vol.subject_id,
                    vol.scan_id,
                    vol.label
                )));
            }
            let mut px = Vec::with_capacity(slices * size * size);
            for s in extract_central_slices(&vol, slices)? {
                px.extend(crop_and_normalize(&s, size)?.data().iter().map(|&v| v as f32));
            }
            Ok(px)
        });
        let mut pixels = Vec::with_capacity(rows.len() * slices * size * size);
        for p in per_scan {
            pixels.extend(p?);
        }
        let scans = rows
            .iter()
            .map(|r| ScanEntry {
                subject_id: r.subject_id.clone(),
                scan_id: r.scan_id.clone(),
                label: r.label,
                target: task.binary(r.label).expect("filtered"),
            })
            .collect();
        Ok(SliceStore { task, size, slices, scans, pixels })
    }

    pub fn image(&self, scan: usize, slice: usize) -> Tensor {
        let n = self.size * self.size;
        let start = (scan * self.slices + slice) * n;
        let data = self.pixels[start..start + n].iter().map(|&v| v as f64).collect();
        Tensor::new(&[self.size, self.size], data).expect("store geometry")
    }

    fn sample(&self, scan: usize, slice: usize, pixels: Tensor) -> SliceSample {
        let e = &self.scans[scan];
        SliceSample {
            subject_id: e.subject_id.clone(),
            scan_id: e.scan_id.clone(),
            slice_index: slice,
            pixels,
            label: e.target,
        }
    }

    fn check_slice(&self, slice: usize) -> Result<()> {
        if slice >= self.slices {
            return Err(Error::Data(format!("slice index {slice} out of range ({} slices)", self.slices)));
        }
        Ok(())
    }

    /// Un-augmented samples of one slice position for the given subjects, in store order.
    pub fn samples(&self, subjects: &BTreeSet<String>, slice: usize) -> Result<Vec<SliceSample>> {
        self.check_slice(slice)?;
        Ok((0..self.scans.len())
            .filter(|&i| subjects.contains(&self.scans[i].subject_id))
            .map(|i| self.sample(i, slice, self.image(i, slice)))
            .collect())
    }

    /// Augmented samples for training.
    pub fn augmented<R: Rng>(
        &self,
        subjects: &BTreeSet<String>,
        slice: usize,
        cfg: &AugmentConfig,
        rng: &mut R,
    ) -> Result<Vec<SliceSample>> {
        self.check_slice(slice)?;
        let mut out = Vec::new();
        for i in (0..self.scans.len()).filter(|&i| subjects.contains(&self.scans[i].subject_id)) {
            for img in augment(&self.image(i, slice), cfg, rng) {
                out.push(self.sample(i, slice, img));
            }
        }
        Ok(out)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let index = StoreIndex {
            version: STORE_VERSION,
            task: self.task,
            size: self.size,
            slices: self.slices,
            scans: self.scans.clone(),
        };
        let ip = dir.join("index.json");
        std::fs::write(&ip, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io(&ip, e))?;
        let bytes: Vec<u8> = self.pixels.iter().flat_map(|v| v.to_le_bytes()).collect();
        let pp = dir.join("pixels.f32");
        std::fs::write(&pp, bytes).map_err(|e| Error::io(&pp, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let ip = dir.join("index.json");
        let pp = dir.join("pixels.f32");
        for p in [&ip, &pp] {
            if !p.exists() {
                return Err(Error::MissingArtifact(p.clone()));
            }
        }
        let text = std::fs::read_to_string(&ip).map_err(|e| Error::io(&ip, e))?;
        let index: StoreIndex = serde_json::from_str(&text)?;
        if index.version != STORE_VERSION {
            return Err(Error::Data(format!("{}: unsupported store version {}", ip.display(), index.version)));
        }
        let raw = std::fs::read(&pp).map_err(|e| Error::io(&pp, e))?;
        let expected = index.scans.len() * index.slices * index.size * index.size * 4;
        if raw.len() != expected {
            return Err(Error::Data(format!("{}: {} bytes, expected {expected}", pp.display(), raw.len())));
        }
        let pixels = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(SliceStore { task: index.task, size: index.size, slices: index.slices, scans: index.scans, pixels })
    }
}

fn subjects_of(samples: &[SliceSample]) -> BTreeSet<&str> {
    samples.iter().map(|s| s.subject_id.as_str()).collect()
}

/// Fails if any subject appears in more than one stream.
pub fn check_disjoint_streams(streams: &[(&str, &[SliceSample])]) -> Result<()> {
    for i in 0..streams.len() {
        for j in i + 1..streams.len() {
            let (a, b) = (subjects_of(streams[i].1), subjects_of(streams[j].1));
            if let Some(s) = a.intersection(&b).next() {
                return Err(Error::Data(format!(
                    "subject leakage: {s} appears in both the {} and {} streams",
                    streams[i].0, streams[j].0
                )));
            }
        }
    }
    Ok(())
}

/// Sample streams of one fold and slice position.
pub struct FoldStreams {
    pub train: Vec<SliceSample>,
    pub val: Vec<SliceSample>,
    pub test: Vec<SliceSample>,
}

/// Builds the streams for `fold` (augmenting training only) and checks them for subject leakage.
pub fn fold_streams<R: Rng>(
    store: &SliceStore,
    plan: &SplitPlan,
    fold: usize,
    slice: usize,
    aug: &AugmentConfig,
    rng: &mut R,
) -> Result<FoldStreams> {
    if store.task != plan.task {
        return Err(Error::Data(format!("store is for {} but the split is for {}", store.task, plan.task)));
    }
    let (train_ids, val_ids) = plan.fold_partition(fold)?;
    let streams = FoldStreams {
        train: store.augmented(&train_ids, slice, aug, rng)?,
        val: store.samples(&val_ids, slice)?,
        test: store.samples(&plan.test_set(), slice)?,
    };
    check_disjoint_streams(&[("train", &streams.train), ("val", &streams.val), ("test", &streams.test)])?;
    Ok(streams)
}
