//! Process-wide fault injection used to mutation-test the verification battery.
//!
//! Nothing here is active unless a caller explicitly injects a fault; the CLI
//! exposes it through a hidden `--sabotage` flag.

use std::str::FromStr;
use std::sync::atomic::{AtomicU32, Ordering};

static ACTIVE: AtomicU32 = AtomicU32::new(0);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Softmax normalizes along the axis before the requested one.
    SoftmaxAxis,
    /// Relative position logits skip the `1/sqrt(d_head)` scaling.
    UnscaledRelativeLogits,
    /// One held-out test subject is also placed in the training partition.
    LeakSubject,
}

impl Fault {
    pub const ALL: [Fault; 3] = [Fault::SoftmaxAxis, Fault::UnscaledRelativeLogits, Fault::LeakSubject];

    fn bit(self) -> u32 {
        match self {
            Fault::SoftmaxAxis => 1,
            Fault::UnscaledRelativeLogits => 2,
            Fault::LeakSubject => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Fault::SoftmaxAxis => "softmax-axis",
            Fault::UnscaledRelativeLogits => "unscaled-rel-logits",
            Fault::LeakSubject => "leak-subject",
        }
    }
}

impl FromStr for Fault {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Fault::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| format!("unknown fault `{s}`"))
    }
}

pub fn inject(fault: Fault) {
    ACTIVE.fetch_or(fault.bit(), Ordering::SeqCst);
}

pub fn clear() {
    ACTIVE.store(0, Ordering::SeqCst);
}

pub fn active(fault: Fault) -> bool {
    ACTIVE.load(Ordering::Relaxed) & fault.bit() != 0
}
