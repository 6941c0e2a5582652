//! Synthetic brain-like volumes with a controllable class signal.
//!
//! Each subject gets its own anatomy (brain ellipsoid size, tissue intensity,
//! smooth blobs, ventricle position) from a generator seeded by
//! `(seed, subject_id)`. The class signal is the radius of a dark central
//! "ventricle" ellipsoid; scans of one subject differ only in noise.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Label, Manifest, ManifestRow, Task, VolumeRecord};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassProfile {
    /// Ventricle radius range as a fraction of the extent.
    pub ventricle_radius: (f64, f64),
    pub noise_std: f64,
}

impl ClassProfile {
    /// Disjoint radius ranges for the negative and positive class.
    pub fn separable(positive: bool) -> Self {
        let r = if positive { (0.20, 0.25) } else { (0.10, 0.14) };
        ClassProfile { ventricle_radius: r, noise_std: 0.03 }
    }

    /// Same range for both classes: no class signal.
    pub fn null() -> Self {
        ClassProfile { ventricle_radius: (0.10, 0.25), noise_std: 0.03 }
    }
}

/// FNV-1a, stable across platforms and releases.
fn stable_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

struct Blob {
    center: [f64; 3],
    radius: f64,
    amp: f64,
}

pub fn generate_synthetic_volume(
    profile: &ClassProfile,
    subject_id: &str,
    scan_id: &str,
    label: Label,
    extent: usize,
    seed: u64,
) -> Result<VolumeRecord> {
    let mut anat = ChaCha8Rng::seed_from_u64(seed ^ stable_hash(subject_id));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed ^ stable_hash(scan_id).rotate_left(17));
    let d = extent as f64;
    let mid = (d - 1.0) / 2.0;
    let brain: [f64; 3] = std::array::from_fn(|_| anat.random_range(0.42..0.46) * d);
    let tissue = anat.random_range(0.65..0.75);
    let (lo, hi) = profile.ventricle_radius;
    let r = anat.random_range(lo..=hi) * d;
    let vent_axes = [r, r, 0.75 * r];
    let vent_center: [f64; 3] = std::array::from_fn(|_| mid + anat.random_range(-1.5..1.5));
    let blobs: Vec<Blob> = (0..4)
        .map(|_| Blob {
            center: std::array::from_fn(|_| mid + anat.random_range(-0.3..0.3) * d),
            radius: anat.random_range(0.06..0.12) * d,
            amp: anat.random_range(-0.08..0.08),
        })
        .collect();
    let noise = Normal::new(0.0, profile.noise_std).map_err(|e| Error::Data(e.to_string()))?;

    let mut voxels = Vec::with_capacity(extent.pow(3));
    for s in 0..extent {
        for c in 0..extent {
            for a in 0..extent {
                let p = [s as f64, c as f64, a as f64];
                let inside = |center: [f64; 3], axes: [f64; 3]| {
                    (0..3).map(|i| ((p[i] - center[i]) / axes[i]).powi(2)).sum::<f64>() <= 1.0
                };
                let mut v = 0.0;
                if inside([mid; 3], brain) {
                    v = tissue;
                    for b in &blobs {
                        let d2: f64 = (0..3).map(|i| (p[i] - b.center[i]).powi(2)).sum();
                        v += b.amp * (-d2 / (2.0 * b.radius * b.radius)).exp();
                    }
                    if inside(vent_center, vent_axes) {
                        v = 0.1;
                    }
                }
                voxels.push((v + noise.sample(&mut noise_rng)).max(0.0) as f32);
            }
        }
    }
    VolumeRecord::from_array(subject_id, scan_id, label, [extent; 3], voxels)
}

#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub task: Task,
    pub subjects_per_class: usize,
    pub scans_per_subject: usize,
    pub extent: usize,
    /// When false both classes share one profile.
    pub separable: bool,
    pub seed: u64,
}

/// Writes one `.botv` file per scan under `dir/volumes` plus `dir/manifest.csv`.
pub fn synthesize_dataset(dir: &Path, spec: &SynthSpec) -> Result<Manifest> {
    if spec.subjects_per_class == 0 || spec.scans_per_subject == 0 {
        return Err(Error::Data("need at least one subject per class and one scan per subject".into()));
    }
    let (neg, pos) = spec.task.classes();
    let mut jobs = Vec::new();
    for (label, positive) in [(neg, false), (pos, true)] {
        let profile = if spec.separable { ClassProfile::separable(positive) } else { ClassProfile::null() };
        for i in 0..spec.subjects_per_class {
            let subject = format!("{label}_{i:03}");
            for j in 0..spec.scans_per_subject {
                jobs.push((profile, subject.clone(), format!("{subject}_s{j}"), label));
            }
        }
    }
    let results = crate::parallel::map_range(jobs.len(), |i| -> Result<ManifestRow> {
        let (profile, subject, scan, label) = &jobs[i];
        let vol = generate_synthetic_volume(profile, subject, scan, *label, spec.extent, spec.seed)?;
        let rel = PathBuf::from("volumes").join(format!("{scan}.botv"));
        vol.write(&dir.join(&rel))?;
        Ok(ManifestRow { subject_id: subject.clone(), scan_id: scan.clone(), label: *label, path: rel })
    });
    let rows = results.into_iter().collect::<Result<Vec<_>>>()?;
    let manifest = Manifest::new(rows)?;
    manifest.write(&dir.join("manifest.csv"))?;
    Ok(manifest)
}
