//! Minimal volume container: a text header followed by raw little-endian `f32` voxels.
//!
//! ```text
//! BOTV 1
//! extents=182,218,182
//! axis_order=sagittal,coronal,axial
//! dtype=f32
//! subject_id=S001
//! scan_id=S001_m00
//! label=AD
//! end_header
//! <extents product x 4 bytes>
//! ```
//!
//! Real scans (NIfTI, MGZ) are expected to be skull-stripped and registered
//! upstream, then written out with [`VolumeRecord::from_array`] after permuting
//! their axes into (sagittal, coronal, axial) order.

use std::fs;
use std::path::{Path, PathBuf};

use super::Label;
use crate::error::{Error, Result};

const MAGIC_LINE: &str = "BOTV 1";
const AXIS_ORDER: &str = "sagittal,coronal,axial";
pub const MIN_EXTENT: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct VolumeRecord {
    pub subject_id: String,
    pub scan_id: String,
    pub label: Label,
    /// (sagittal, coronal, axial).
    pub extents: [usize; 3],
    /// Flat voxels, axial index fastest: `((s·C) + c)·A + a`.
    pub voxels: Vec<f32>,
    pub source_path: PathBuf,
}

impl VolumeRecord {
    pub fn from_array(
        subject_id: impl Into<String>,
        scan_id: impl Into<String>,
        label: Label,
        extents: [usize; 3],
        voxels: Vec<f32>,
    ) -> Result<Self> {
        if extents.iter().any(|&e| e < MIN_EXTENT) {
            return Err(Error::Data(format!("volume extents {extents:?} must all be at least {MIN_EXTENT}")));
        }
        if voxels.len() != extents.iter().product::<usize>() {
            return Err(Error::Data(format!("{} voxels for extents {extents:?}", voxels.len())));
        }
        Ok(VolumeRecord {
            subject_id: subject_id.into(),
            scan_id: scan_id.into(),
            label,
            extents,
            voxels,
            source_path: PathBuf::new(),
        })
    }

    pub fn at(&self, s: usize, c: usize, a: usize) -> f32 {
        let [_, nc, na] = self.extents;
        self.voxels[(s * nc + c) * na + a]
    }

    /// Coronal plane `c` as a row-major `[axial, sagittal]` image.
    pub fn coronal_slice(&self, c: usize) -> (usize, usize, Vec<f64>) {
        let [ns, _, na] = self.extents;
        let mut out = Vec::with_capacity(ns * na);
        for a in 0..na {
            for s in 0..ns {
                out.push(self.at(s, c, a) as f64);
            }
        }
        (na, ns, out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let [s, c, a] = self.extents;
        let mut bytes = format!(
            "{MAGIC_LINE}\nextents={s},{c},{a}\naxis_order={AXIS_ORDER}\ndtype=f32\nsubject_id={}\nscan_id={}\nlabel={}\nend_header\n",
            self.subject_id, self.scan_id, self.label
        )
        .into_bytes();
        bytes.reserve(self.voxels.len() * 4);
        for v in &self.voxels {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |why: String| Error::Data(format!("{}: {why}", path.display()));
        let marker = b"end_header\n";
        let end = buf
            .windows(marker.len())
            .position(|w| w == marker)
            .ok_or_else(|| bad("no end_header line".into()))?;
        let header = std::str::from_utf8(&buf[..end]).map_err(|_| bad("header is not UTF-8".into()))?;
        let mut lines = header.lines();
        if lines.next() != Some(MAGIC_LINE) {
            return Err(bad("not a BOTV 1 volume".into()));
        }
        let (mut extents, mut subject, mut scan, mut label) = (None, None, None, None);
        for line in lines {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("header line `{line}`")))?;
            match k {
                "extents" => {
                    let e: Vec<usize> = v
                        .split(',')
                        .map(|x| x.trim().parse())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad(format!("extents `{v}`")))?;
                    extents = Some(<[usize; 3]>::try_from(e).map_err(|_| bad("need 3 extents".into()))?);
                }
                "axis_order" if v != AXIS_ORDER => return Err(bad(format!("axis order `{v}`, expected {AXIS_ORDER}"))),
                "dtype" if v != "f32" => return Err(bad(format!("dtype `{v}`, expected f32"))),
                "subject_id" => subject = Some(v.to_string()),
                "scan_id" => scan = Some(v.to_string()),
                "label" => label = Some(v.parse::<Label>()?),
                _ => {}
            }
        }
        let extents = extents.ok_or_else(|| bad("missing extents".into()))?;
        let raw = &buf[end + marker.len()..];
        if raw.len() != extents.iter().product::<usize>() * 4 {
            return Err(bad(format!("{} voxel bytes for extents {extents:?}", raw.len())));
        }
        let voxels = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let mut rec = VolumeRecord::from_array(
            subject.ok_or_else(|| bad("missing subject_id".into()))?,
            scan.ok_or_else(|| bad("missing scan_id".into()))?,
            label.ok_or_else(|| bad("missing label".into()))?,
            extents,
            voxels,
        )?;
        rec.source_path = path.to_path_buf();
        Ok(rec)
    }
}
