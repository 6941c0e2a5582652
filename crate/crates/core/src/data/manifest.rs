use std::collections::HashSet;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Label;
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;
const VERSION_LINE: &str = "# botkit-manifest v1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub subject_id: String,
    pub scan_id: String,
    pub label: Label,
    /// Volume path; relative paths resolve against the manifest's directory.
    pub path: PathBuf,
}

/// CSV list of scans with header `subject_id,scan_id,label,path`, preceded by a version comment.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn new(rows: Vec<ManifestRow>) -> Result<Self> {
        let m = Manifest { rows };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.rows {
            if r.subject_id.is_empty() || r.scan_id.is_empty() {
                return Err(Error::Data("manifest row with empty subject_id or scan_id".into()));
            }
            if !seen.insert((&r.subject_id, &r.scan_id)) {
                return Err(Error::Data(format!("duplicate manifest entry ({}, {})", r.subject_id, r.scan_id)));
            }
        }
        let mut labels = std::collections::HashMap::new();
        for r in &self.rows {
            if let Some(prev) = labels.insert(&r.subject_id, r.label) {
                if prev != r.label {
                    return Err(Error::Data(format!("subject {} carries labels {prev} and {}", r.subject_id, r.label)));
                }
            }
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(file, "{VERSION_LINE}").map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        match text.lines().next() {
            Some(VERSION_LINE) => {}
            Some(l) if l.starts_with("# botkit-manifest") => {
                return Err(Error::Data(format!("{}: unsupported manifest version `{l}`", path.display())))
            }
            _ => {}
        }
        let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
        let headers = reader.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["subject_id", "scan_id", "label", "path"] {
            return Err(Error::Data(format!("{}: header must be subject_id,scan_id,label,path", path.display())));
        }
        let base = path.parent().unwrap_or(Path::new(""));
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec?;
            let label = rec[2].parse::<Label>()?;
            let p = PathBuf::from(&rec[3]);
            rows.push(ManifestRow {
                subject_id: rec[0].to_string(),
                scan_id: rec[1].to_string(),
                label,
                path: if p.is_absolute() { p } else { base.join(p) },
            });
        }
        Manifest::new(rows)
    }

    /// Subject IDs with their label, sorted by ID.
    pub fn subjects(&self) -> Vec<(String, Label)> {
        let mut v: Vec<(String, Label)> = self.rows.iter().map(|r| (r.subject_id.clone(), r.label)).collect();
        v.sort();
        v.dedup();
        v
    }
}
