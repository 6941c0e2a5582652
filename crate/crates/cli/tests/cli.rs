use std::path::Path;
use std::process::{Command, Output};

fn botkit(work: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_botkit"))
        .args(args)
        .env("BOTKIT_WORKDIR", work)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn synth_counts_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["synth", "--subjects-per-class", "20", "--scans-per-subject", "1", "--extent", "16"];
    let a = botkit(&dir.path().join("a"), &args);
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    let b = botkit(&dir.path().join("b"), &args);
    assert_eq!(b.status.code(), Some(0));

    let manifest = std::fs::read_to_string(dir.path().join("a/data/manifest.csv")).unwrap();
    let rows = manifest.lines().filter(|l| !l.starts_with('#')).count() - 1;
    assert_eq!(rows, 40);
    assert_eq!(std::fs::read_dir(dir.path().join("a/data/volumes")).unwrap().count(), 40);
    assert_eq!(manifest, std::fs::read_to_string(dir.path().join("b/data/manifest.csv")).unwrap());
    let vol = "data/volumes/AD_003_s0.botv";
    assert_eq!(std::fs::read(dir.path().join("a").join(vol)).unwrap(), std::fs::read(dir.path().join("b").join(vol)).unwrap());
}

#[test]
fn too_few_subjects_cannot_stratify() {
    let dir = tempfile::tempdir().unwrap();
    let o = botkit(dir.path(), &["synth", "--subjects-per-class", "4"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("cannot stratify"), "{}", stderr(&o));
}

#[test]
fn unwritable_output_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let o = botkit(dir.path(), &["synth", "--subjects-per-class", "10", "--extent", "16", "--out", blocker.join("sub").to_str().unwrap()]);
    assert_ne!(o.status.code(), Some(0));
    assert!(!stderr(&o).is_empty());
}

#[test]
fn config_errors_name_the_key_and_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("train.epoch = 3\n", "epoch"),
        ("[train]\nbatch_size = \"many\"\n", "batch_size"),
        ("train.folds = 1\n", "train.folds"),
        ("task = AD-vs-PET\n", "task"),
        ("model.width = 1/3\n", "width"),
    ];
    for (text, key) in cases {
        let path = dir.path().join("bad.cfg");
        std::fs::write(&path, text).unwrap();
        let o = botkit(dir.path(), &["--config", path.to_str().unwrap(), "train", "--dry-run"]);
        assert_eq!(o.status.code(), Some(1), "{text}: {}", stderr(&o));
        assert!(stderr(&o).contains(key), "{text}: {}", stderr(&o));
    }
    let o = botkit(dir.path(), &["train", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn flags_override_config_which_overrides_mode_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, "mode = \"full\"\n[train]\nepochs = 7\nfolds = 3\n").unwrap();
    let o = botkit(dir.path(), &["--config", path.to_str().unwrap(), "train", "--dry-run", "--folds", "4"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("10 slices × 4 folds × 7 epochs"), "{out}");
    assert!(out.contains("input 224×224"), "{out}");
    assert!(out.contains(&dir.path().display().to_string()), "{out}");
}

#[test]
fn full_scale_dry_run_prints_the_plan() {
    let dir = tempfile::tempdir().unwrap();
    let o = botkit(dir.path(), &["--mode", "full", "train", "--dry-run"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.contains("5 folds × 60 epochs"), "{out}");
    assert!(out.contains("lr 3e-5, weight decay 3e-5"), "{out}");
    assert!(out.contains("dry run"), "{out}");
    assert!(!dir.path().join("models").exists());
}

#[test]
fn missing_artifacts_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["preprocess", "train", "eval", "report"] {
        let o = botkit(dir.path(), &[cmd]);
        assert_eq!(o.status.code(), Some(3), "{cmd}: {}", stderr(&o));
    }
}

#[test]
fn preprocess_then_removed_checkpoint_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path();
    for args in [
        &["synth", "--subjects-per-class", "10", "--scans-per-subject", "1", "--extent", "16"][..],
        &["preprocess"],
        &["train", "--epochs", "1"],
    ] {
        let o = botkit(w, args);
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", stderr(&o));
    }
    assert!(w.join("split.json").exists() && w.join("store/index.json").exists());
    assert_eq!(std::fs::read_dir(w.join("models/curves")).unwrap().count(), 10);

    std::fs::remove_file(w.join("models/models/slice_04.botn")).unwrap();
    let o = botkit(w, &["eval"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("slice_04"));
    assert!(std::fs::read_to_string(w.join("run.log")).unwrap().lines().count() >= 4);
}

#[test]
fn verify_filter_selects_checks() {
    let dir = tempfile::tempdir().unwrap();
    let o = botkit(dir.path(), &["verify", "--filter", "oracle"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.contains("conv-oracle") && out.contains("auc-oracle") && !out.contains("shape-chain"), "{out}");
    let o = botkit(dir.path(), &["verify", "--filter", "nothing-matches"]);
    assert_eq!(o.status.code(), Some(1));
    let o = botkit(dir.path(), &["--sabotage", "no-such-fault", "verify"]);
    assert_eq!(o.status.code(), Some(1));
}
