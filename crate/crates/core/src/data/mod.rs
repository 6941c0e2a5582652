//! Volumes, slices, manifests, subject-level splits, and synthetic data.

pub mod manifest;
pub mod slices;
pub mod split;
pub mod store;
pub mod synth;
pub mod volume;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use manifest::{Manifest, ManifestRow};
pub use slices::{augment, central_slice_indices, crop_and_normalize, extract_central_slices, AugmentConfig};
pub use split::{make_folds, make_split, SplitPlan};
pub use store::{SliceSample, SliceStore};
pub use synth::{generate_synthetic_volume, ClassProfile};
pub use volume::VolumeRecord;

/// Diagnostic category of a subject.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    CN,
    AD,
    MCIc,
    MCInc,
}

impl Label {
    pub const ALL: [Label; 4] = [Label::CN, Label::AD, Label::MCIc, Label::MCInc];

    pub fn as_str(self) -> &'static str {
        match self {
            Label::CN => "CN",
            Label::AD => "AD",
            Label::MCIc => "MCIc",
            Label::MCInc => "MCInc",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Label::ALL
            .into_iter()
            .find(|l| l.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Data(format!("unknown label `{s}` (expected CN, AD, MCIc or MCInc)")))
    }
}

/// Binary classification task. The second class of each pair is the positive one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "AD-vs-CN")]
    AdVsCn,
    #[serde(rename = "MCIc-vs-CN")]
    McicVsCn,
    #[serde(rename = "MCIc-vs-MCInc")]
    McicVsMcinc,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::AdVsCn, Task::McicVsCn, Task::McicVsMcinc];

    /// `(negative, positive)` labels.
    pub fn classes(self) -> (Label, Label) {
        match self {
            Task::AdVsCn => (Label::CN, Label::AD),
            Task::McicVsCn => (Label::CN, Label::MCIc),
            Task::McicVsMcinc => (Label::MCInc, Label::MCIc),
        }
    }

    /// 0/1 target for labels that take part in this task.
    pub fn binary(self, label: Label) -> Option<usize> {
        let (neg, pos) = self.classes();
        if label == neg {
            Some(0)
        } else if label == pos {
            Some(1)
        } else {
            None
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::AdVsCn => "AD-vs-CN",
            Task::McicVsCn => "MCIc-vs-CN",
            Task::McicVsMcinc => "MCIc-vs-MCInc",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Data(format!("unknown task `{s}` (expected AD-vs-CN, MCIc-vs-CN or MCIc-vs-MCInc)")))
    }
}
