//! Run configuration: mode defaults, an optional config document, then flags.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use botkit_core::data::{AugmentConfig, Task};
use botkit_core::model::{BotNetConfig, Width};
use botkit_core::optim::{AdamConfig, SamConfig};
use serde::Deserialize;

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Width 1/8, 32×32 slices, 2 folds × 5 epochs.
    Desk,
    /// Full width, 224×224 slices, 5 folds × 60 epochs.
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Classes differ in structure.
    Separable,
    /// Both classes drawn from one profile.
    Null,
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Separable => "separable",
            Profile::Null => "null",
        })
    }
}

/// Width accepts `1`, `"1/8"` or `1/8` in key=value files.
#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
enum WidthValue {
    Int(usize),
    Text(String),
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    mode: Option<Mode>,
    task: Option<String>,
    seed: Option<u64>,
    work_dir: Option<PathBuf>,
    manifest: Option<PathBuf>,
    #[serde(default)]
    model: ModelSection,
    #[serde(default)]
    train: TrainSection,
    #[serde(default)]
    sam: SamSection,
    #[serde(default)]
    synth: SynthSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelSection {
    width: Option<WidthValue>,
    input_size: Option<usize>,
    heads: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainSection {
    epochs: Option<usize>,
    folds: Option<usize>,
    batch_size: Option<usize>,
    slices: Option<usize>,
    translations: Option<usize>,
    max_shift: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SamSection {
    rho: Option<f64>,
    learning_rate: Option<f64>,
    weight_decay: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SynthSection {
    subjects_per_class: Option<usize>,
    scans_per_subject: Option<usize>,
    extent: Option<usize>,
    profile: Option<Profile>,
}

#[derive(Clone, Debug)]
pub struct SynthSettings {
    pub subjects_per_class: usize,
    pub scans_per_subject: usize,
    pub extent: usize,
    pub profile: Profile,
}

/// Fully resolved settings for one invocation.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub mode: Mode,
    pub task: Task,
    pub seed: u64,
    pub work_dir: PathBuf,
    pub manifest: Option<PathBuf>,
    pub model: BotNetConfig,
    pub epochs: usize,
    pub folds: usize,
    pub batch_size: usize,
    pub slices: usize,
    pub augment: AugmentConfig,
    pub sam: SamConfig,
    pub synth: SynthSettings,
}

impl RunConfig {
    pub fn defaults(mode: Mode) -> Self {
        let (width, input_size, epochs, folds, translations, scans, extent) = match mode {
            Mode::Desk => (Width { num: 1, den: 8 }, 32, 5, 2, 4, 4, 64),
            Mode::Full => (Width::ONE, 224, 60, 5, 2, 1, 256),
        };
        RunConfig {
            mode,
            task: Task::AdVsCn,
            seed: 1,
            work_dir: PathBuf::from("botkit-work"),
            manifest: None,
            model: BotNetConfig::scaled(width, input_size),
            epochs,
            folds,
            batch_size: 4,
            slices: 10,
            augment: AugmentConfig { translations, max_shift: 10 },
            sam: SamConfig { rho: 0.05, base: AdamConfig::default() },
            synth: SynthSettings { subjects_per_class: 40, scans_per_subject: scans, extent, profile: Profile::Separable },
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.work_dir.join("data")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.manifest.clone().unwrap_or_else(|| self.data_dir().join("manifest.csv"))
    }

    pub fn store_dir(&self) -> PathBuf {
        self.work_dir.join("store")
    }

    pub fn split_path(&self) -> PathBuf {
        self.work_dir.join("split.json")
    }

    pub fn model_dir(&self) -> PathBuf {
        self.work_dir.join("models")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.work_dir.join("eval")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |key: &str, msg: String| Err(CliError::config(format!("`{key}`: {msg}")));
        if let Err(e) = self.model.validate() {
            return bad("model", e.to_string());
        }
        if let Err(e) = self.sam.validate() {
            return bad("sam", e.to_string());
        }
        if self.epochs == 0 {
            return bad("train.epochs", "must be at least 1".into());
        }
        if self.folds < 2 {
            return bad("train.folds", format!("{} folds; need at least 2", self.folds));
        }
        if self.batch_size < 2 {
            return bad("train.batch_size", format!("{}; batch normalization needs at least 2", self.batch_size));
        }
        if self.slices == 0 {
            return bad("train.slices", "must be at least 1".into());
        }
        if self.augment.max_shift == 0 && self.augment.translations > 0 {
            return bad("train.max_shift", "must be positive when translations are requested".into());
        }
        Ok(())
    }

    pub fn describe(&self) -> String {
        let s = &self.sam;
        format!(
            "mode {:?}, task {}, seed {}\nwork dir {}\nmodel width {}, input {}×{}, {} heads\n\
             training {} slices × {} folds × {} epochs, batch {}, augmentation ×{} (±{} px)\n\
             SAM rho {}, Adam lr {:e}, weight decay {:e}",
            self.mode,
            self.task,
            self.seed,
            self.work_dir.display(),
            self.model.width,
            self.model.input_size,
            self.model.input_size,
            self.model.heads,
            self.slices,
            self.folds,
            self.epochs,
            self.batch_size,
            self.augment.multiplicity(),
            self.augment.max_shift,
            s.rho,
            s.base.learning_rate,
            s.base.weight_decay,
        )
    }
}

/// Parses a TOML document, or failing that, `key = value` lines with dotted keys.
fn parse_document(text: &str) -> Result<FileConfig, String> {
    match toml::from_str::<FileConfig>(text) {
        Ok(c) => Ok(c),
        Err(toml_err) => {
            if text.lines().any(|l| l.trim_start().starts_with('[')) {
                return Err(toml_err.to_string());
            }
            toml::from_str::<FileConfig>(&key_value_to_toml(text)?).map_err(|e| e.to_string())
        }
    }
}

fn key_value_to_toml(text: &str) -> Result<String, String> {
    let mut out = String::with_capacity(text.len() + 64);
    for (n, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            out.push('\n');
            continue;
        }
        let (k, v) = t.split_once('=').ok_or_else(|| format!("line {}: expected key = value, got `{t}`", n + 1))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(format!("line {}: empty key", n + 1));
        }
        let literal = toml::from_str::<toml::Table>(&format!("x = {v}")).is_ok();
        if literal {
            out.push_str(&format!("{k} = {v}\n"));
        } else {
            out.push_str(&format!("{k} = {}\n", toml::Value::String(v.to_string())));
        }
    }
    Ok(out)
}

/// Values given on the command line; `None` leaves the lower layers in place.
#[derive(Debug, Default)]
pub struct Overrides {
    pub mode: Option<Mode>,
    pub task: Option<String>,
    pub seed: Option<u64>,
    pub work_dir: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub folds: Option<usize>,
    pub batch_size: Option<usize>,
    pub subjects_per_class: Option<usize>,
    pub scans_per_subject: Option<usize>,
    pub extent: Option<usize>,
    pub profile: Option<Profile>,
}

fn parse_task(key: &str, s: &str) -> Result<Task, CliError> {
    Task::from_str(s).map_err(|e| CliError::config(format!("`{key}`: {e}")))
}

/// Layers, lowest first: mode defaults, config document, flags (and environment).
pub fn resolve(config_path: Option<&Path>, o: Overrides) -> Result<RunConfig, CliError> {
    let file = match config_path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::config(format!("cannot read config {}: {e}", p.display())))?;
            parse_document(&text).map_err(|e| CliError::config(format!("config {}: {e}", p.display())))?
        }
        None => FileConfig::default(),
    };
    let mode = o.mode.or(file.mode).unwrap_or(Mode::Desk);
    let mut c = RunConfig::defaults(mode);

    if let Some(t) = &file.task {
        c.task = parse_task("task", t)?;
    }
    c.seed = file.seed.unwrap_or(c.seed);
    c.work_dir = file.work_dir.unwrap_or(c.work_dir);
    c.manifest = file.manifest.or(c.manifest);
    match file.model.width {
        Some(WidthValue::Int(n)) => {
            c.model.width = Width::new(n, 1).map_err(|e| CliError::config(format!("`model.width`: {e}")))?
        }
        Some(WidthValue::Text(s)) => {
            c.model.width = s.parse().map_err(|e| CliError::config(format!("`model.width`: {e}")))?
        }
        None => {}
    }
    c.model.input_size = file.model.input_size.unwrap_or(c.model.input_size);
    c.model.heads = file.model.heads.unwrap_or(c.model.heads);
    let t = file.train;
    c.epochs = t.epochs.unwrap_or(c.epochs);
    c.folds = t.folds.unwrap_or(c.folds);
    c.batch_size = t.batch_size.unwrap_or(c.batch_size);
    c.slices = t.slices.unwrap_or(c.slices);
    c.augment.translations = t.translations.unwrap_or(c.augment.translations);
    c.augment.max_shift = t.max_shift.unwrap_or(c.augment.max_shift);
    c.sam.rho = file.sam.rho.unwrap_or(c.sam.rho);
    c.sam.base.learning_rate = file.sam.learning_rate.unwrap_or(c.sam.base.learning_rate);
    c.sam.base.weight_decay = file.sam.weight_decay.unwrap_or(c.sam.base.weight_decay);
    let s = file.synth;
    c.synth.subjects_per_class = s.subjects_per_class.unwrap_or(c.synth.subjects_per_class);
    c.synth.scans_per_subject = s.scans_per_subject.unwrap_or(c.synth.scans_per_subject);
    c.synth.extent = s.extent.unwrap_or(c.synth.extent);
    c.synth.profile = s.profile.unwrap_or(c.synth.profile);

    if let Some(t) = &o.task {
        c.task = parse_task("--task", t)?;
    }
    c.seed = o.seed.unwrap_or(c.seed);
    c.work_dir = o.work_dir.unwrap_or(c.work_dir);
    c.manifest = o.manifest.or(c.manifest);
    c.epochs = o.epochs.unwrap_or(c.epochs);
    c.folds = o.folds.unwrap_or(c.folds);
    c.batch_size = o.batch_size.unwrap_or(c.batch_size);
    c.synth.subjects_per_class = o.subjects_per_class.unwrap_or(c.synth.subjects_per_class);
    c.synth.scans_per_subject = o.scans_per_subject.unwrap_or(c.synth.scans_per_subject);
    c.synth.extent = o.extent.unwrap_or(c.synth.extent);
    c.synth.profile = o.profile.unwrap_or(c.synth.profile);

    c.validate()?;
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_value_and_toml_documents_agree() {
        let kv = parse_document("mode = full\ntask = MCIc-vs-CN\nmodel.width = 1/2\ntrain.epochs = 7\n").unwrap();
        let doc = parse_document(
            "mode = \"full\"\ntask = \"MCIc-vs-CN\"\n[model]\nwidth = \"1/2\"\n[train]\nepochs = 7\n",
        )
        .unwrap();
        for c in [kv, doc] {
            assert_eq!(c.mode, Some(Mode::Full));
            assert_eq!(c.task.as_deref(), Some("MCIc-vs-CN"));
            assert!(matches!(c.model.width, Some(WidthValue::Text(ref w)) if w == "1/2"));
            assert_eq!(c.train.epochs, Some(7));
        }
    }

    #[test]
    fn unknown_key_is_named() {
        let err = parse_document("train.epoch = 3\n").unwrap_err();
        assert!(err.contains("epoch"), "{err}");
    }

    #[test]
    fn full_scale_defaults() {
        let c = RunConfig::defaults(Mode::Full);
        assert_eq!((c.epochs, c.folds, c.model.input_size, c.model.width), (60, 5, 224, Width::ONE));
        assert_eq!((c.sam.base.learning_rate, c.sam.base.weight_decay), (3e-5, 3e-5));
        c.validate().unwrap();
        RunConfig::defaults(Mode::Desk).validate().unwrap();
    }
}
