use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::VolumeRecord;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_SLICES: usize = 10;

/// `floor(D/2) - floor(k/2) .. floor(D/2) + ceil(k/2)`.
pub fn central_slice_indices(depth: usize, k: usize) -> Result<Range<usize>> {
    if k == 0 || depth < k {
        return Err(Error::Data(format!("coronal extent {depth} cannot supply {k} central slices")));
    }
    let start = depth / 2 - k / 2;
    Ok(start..start + k)
}

/// The `k` central coronal slices, each `[axial, sagittal]`.
pub fn extract_central_slices(volume: &VolumeRecord, k: usize) -> Result<Vec<Tensor>> {
    central_slice_indices(volume.extents[1], k)?
        .map(|c| {
            let (rows, cols, px) = volume.coronal_slice(c);
            Tensor::new(&[rows, cols], px)
        })
        .collect()
}

/// Center crop (or centered zero pad) to `target×target`, then min-max scale to [0, 1].
/// A constant slice becomes all zeros.
pub fn crop_and_normalize(slice: &Tensor, target: usize) -> Result<Tensor> {
    if slice.rank() != 2 || target == 0 {
        return Err(Error::shape("crop_and_normalize", format!("slice {:?}, target {target}", slice.shape())));
    }
    let (rows, cols) = (slice.shape()[0], slice.shape()[1]);
    let (r0, c0) = (centered(rows, target), centered(cols, target));
    let mut out = Tensor::zeros(&[target, target]);
    for r in 0..target {
        let sr = r as isize + r0;
        if sr < 0 || sr >= rows as isize {
            continue;
        }
        for c in 0..target {
            let sc = c as isize + c0;
            if sc >= 0 && sc < cols as isize {
                out.data_mut()[r * target + c] = slice.data()[sr as usize * cols + sc as usize];
            }
        }
    }
    let lo = out.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = out.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Ok(Tensor::zeros(&[target, target]));
    }
    Ok(out.map(|v| (v - lo) / (hi - lo)))
}

/// Start of a centered `target` window over `n` cells; negative means padding.
fn centered(n: usize, target: usize) -> isize {
    if n >= target {
        ((n - target) / 2) as isize
    } else {
        -(((target - n) / 2) as isize)
    }
}

/// Mirror across the vertical axis (left-right, i.e. along sagittal).
pub fn flip_horizontal(img: &Tensor) -> Tensor {
    let cols = img.shape()[1];
    Tensor::from_fn(img.shape(), |i| {
        let (r, c) = (i / cols, i % cols);
        img.data()[r * cols + (cols - 1 - c)]
    })
}

/// Shift right by `offset` pixels (left when negative), filling with zeros.
pub fn translate_horizontal(img: &Tensor, offset: isize) -> Tensor {
    let cols = img.shape()[1] as isize;
    Tensor::from_fn(img.shape(), |i| {
        let (r, c) = (i as isize / cols, i as isize % cols);
        let src = c - offset;
        if src >= 0 && src < cols {
            img.data()[(r * cols + src) as usize]
        } else {
            0.0
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Translated copies per training image.
    pub translations: usize,
    /// Largest shift in pixels; offsets are drawn uniformly from ±{1..max_shift}.
    pub max_shift: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { translations: 2, max_shift: 10 }
    }
}

impl AugmentConfig {
    pub fn multiplicity(&self) -> usize {
        2 + self.translations
    }
}

/// Original, sagittal mirror, then `translations` randomly shifted copies.
pub fn augment<R: Rng>(img: &Tensor, cfg: &AugmentConfig, rng: &mut R) -> Vec<Tensor> {
    let mut out = Vec::with_capacity(cfg.multiplicity());
    out.push(img.clone());
    out.push(flip_horizontal(img));
    for _ in 0..cfg.translations {
        if cfg.max_shift == 0 {
            out.push(img.clone());
            continue;
        }
        let mag = rng.random_range(1..=cfg.max_shift) as isize;
        let offset = if rng.random_bool(0.5) { mag } else { -mag };
        out.push(translate_horizontal(img, offset));
    }
    out
}
