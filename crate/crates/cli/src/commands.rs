use std::path::PathBuf;

use log::info;

use botkit_core::data::store::check_disjoint_streams;
use botkit_core::data::synth::{synthesize_dataset, SynthSpec};
use botkit_core::data::{make_split, Manifest, SliceStore, SplitPlan};
use botkit_core::ensemble::{self, EvalReport, SliceModelSet, TrainConfig};
use botkit_core::verify;

use crate::config::{Profile, RunConfig};
use crate::{exit, CliError};

/// Fewest subjects per class for which an 80/10/10 cut leaves every partition non-empty.
pub const MIN_SYNTH_SUBJECTS: usize = 10;
pub const SPLIT_RATIOS: [f64; 3] = [0.8, 0.1, 0.1];

pub fn synth(cfg: &RunConfig, out: Option<PathBuf>) -> Result<(), CliError> {
    let s = &cfg.synth;
    if s.subjects_per_class < MIN_SYNTH_SUBJECTS {
        return Err(CliError::data(format!(
            "cannot stratify: {} subjects per class, need at least {MIN_SYNTH_SUBJECTS} for a train/val/test split",
            s.subjects_per_class
        )));
    }
    let dir = out.unwrap_or_else(|| cfg.data_dir());
    let spec = SynthSpec {
        task: cfg.task,
        subjects_per_class: s.subjects_per_class,
        scans_per_subject: s.scans_per_subject,
        extent: s.extent,
        separable: s.profile == Profile::Separable,
        seed: cfg.seed,
    };
    let manifest = synthesize_dataset(&dir, &spec)?;
    println!(
        "wrote {} {} volumes ({} subjects, {}³ voxels) and {}",
        manifest.rows.len(),
        s.profile,
        manifest.subjects().len(),
        s.extent,
        dir.join("manifest.csv").display()
    );
    Ok(())
}

pub fn preprocess(cfg: &RunConfig) -> Result<(), CliError> {
    let manifest = Manifest::read(&cfg.manifest_path())?;
    let store = SliceStore::build(&manifest, cfg.task, cfg.slices, cfg.model.input_size)?;
    let plan = make_split(&manifest, cfg.task, SPLIT_RATIOS, cfg.seed)?.with_folds(cfg.folds)?;
    for fold in 0..plan.num_folds() {
        let (train, val) = plan.fold_partition(fold)?;
        let test = plan.test_set();
        for slice in 0..store.slices {
            check_disjoint_streams(&[
                ("train", &store.samples(&train, slice)?),
                ("val", &store.samples(&val, slice)?),
                ("test", &store.samples(&test, slice)?),
            ])?;
        }
    }
    store.save(&cfg.store_dir())?;
    plan.save(&cfg.split_path())?;
    println!(
        "{} scans of task {} → {} slices of {}×{} in {}",
        store.scans.len(),
        store.task,
        store.slices,
        store.size,
        store.size,
        cfg.store_dir().display()
    );
    println!(
        "subjects: {} train, {} val, {} test; {} folds over train ∪ val → {}",
        plan.train.len(),
        plan.val.len(),
        plan.test.len(),
        plan.num_folds(),
        cfg.split_path().display()
    );
    Ok(())
}

fn train_config(cfg: &RunConfig) -> TrainConfig {
    TrainConfig {
        model: cfg.model.clone(),
        sam: cfg.sam,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        augment: cfg.augment,
        seed: cfg.seed,
    }
}

fn load_inputs(cfg: &RunConfig) -> Result<(SliceStore, SplitPlan), CliError> {
    let store = SliceStore::load(&cfg.store_dir())?;
    let plan = SplitPlan::load(&cfg.split_path())?;
    Ok((store, plan))
}

pub fn train(cfg: &RunConfig, dry_run: bool) -> Result<(), CliError> {
    if dry_run {
        println!("{}", cfg.describe());
        println!(
            "plan: {} slice models, each trained on {} folds × {} epochs ({} epochs in total); best validation accuracy selects the checkpoint",
            cfg.slices,
            cfg.folds,
            cfg.epochs,
            cfg.slices * cfg.folds * cfg.epochs
        );
        if let (Ok(store), Ok(plan)) = (SliceStore::load(&cfg.store_dir()), SplitPlan::load(&cfg.split_path())) {
            println!("store: {} scans, {} slices of {}×{}", store.scans.len(), store.slices, store.size, store.size);
            for fold in 0..plan.num_folds() {
                let (t, v) = plan.fold_partition(fold)?;
                println!("fold {fold}: {} train subjects, {} validation subjects", t.len(), v.len());
            }
            if plan.num_folds() != cfg.folds {
                println!("note: split.json has {} folds; rerun preprocess to use {}", plan.num_folds(), cfg.folds);
            }
        } else {
            println!("store or split not found under {}; run preprocess first", cfg.work_dir.display());
        }
        println!("dry run: nothing trained");
        return Ok(());
    }
    let (store, plan) = load_inputs(cfg)?;
    if plan.num_folds() != cfg.folds {
        return Err(CliError::data(format!(
            "split.json has {} folds but {} were requested; rerun preprocess",
            plan.num_folds(),
            cfg.folds
        )));
    }
    info!("{}", cfg.describe().replace('\n', "; "));
    let set = ensemble::train_slice_models(&store, &plan, &train_config(cfg), &cfg.model_dir())?;
    println!("slice  fold  epoch  val_acc");
    for e in &set.entries {
        println!("{:>5}  {:>4}  {:>5}  {:.4}", e.slice_index, e.fold, e.epoch, e.val_acc);
    }
    println!("model set written to {}", cfg.model_dir().display());
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> Result<(), CliError> {
    let (store, plan) = load_inputs(cfg)?;
    let report = ensemble::evaluate(&cfg.model_dir(), &store, &plan, &cfg.eval_dir())?;
    print_report(&report);
    println!("wrote metrics.json, roc.csv and predictions.csv to {}", cfg.eval_dir().display());
    Ok(())
}

pub fn report(cfg: &RunConfig) -> Result<(), CliError> {
    let path = cfg.eval_dir().join("metrics.json");
    if !path.exists() {
        return Err(botkit_core::Error::MissingArtifact(path).into());
    }
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let report: EvalReport =
        serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    print_report(&report);
    if let Ok(set) = SliceModelSet::load(&cfg.model_dir()) {
        println!("per-slice validation accuracy (fold, epoch):");
        for e in &set.entries {
            println!("  slice {:>2}: {:.4} ({}, {})", e.slice_index, e.val_acc, e.fold, e.epoch);
        }
    }
    Ok(())
}

fn print_report(r: &EvalReport) {
    let s = &r.summary;
    println!("{:<14} {:>9} {:>7} {:>7} {:>7} {:>11} {:>10}", "task", "precision", "recall", "f1", "roc_auc", "holdout_acc", "val_acc");
    println!(
        "{:<14} {:>9.4} {:>7.4} {:>7.4} {:>7.4} {:>11.4} {:>10.4}",
        r.task.as_str(),
        s.precision,
        s.recall,
        s.f1,
        s.roc_auc,
        s.holdout_accuracy,
        s.validation_accuracy
    );
    let c = &r.holdout_scan.confusion;
    println!(
        "scans: {} evaluated, {} skipped; TP {} FP {} TN {} FN {}",
        r.evaluated_scans, r.skipped_scans, c.tp, c.fp, c.tn, c.fn_
    );
    println!(
        "subject level: accuracy {:.4}, ROC-AUC {:.4} over {} subjects",
        r.holdout_subject.accuracy,
        r.holdout_subject.roc_auc,
        r.holdout_subject.confusion.total()
    );
    for flag in &r.holdout_scan.undefined {
        println!("note: {flag} had a zero denominator and is reported as 0");
    }
}

pub fn verify(filter: Option<&str>) -> Result<(), CliError> {
    let results = verify::run_all(filter);
    if results.is_empty() {
        return Err(CliError::config(format!("no check matches `{}`", filter.unwrap_or_default())));
    }
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    for r in &results {
        println!("{}  {:<width$}  {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} of {} checks passed", results.len() - failed, results.len());
    if failed > 0 {
        return Err(CliError { code: exit::VERIFY, message: format!("{failed} check(s) failed") });
    }
    Ok(())
}
