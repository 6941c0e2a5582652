use std::collections::BTreeSet;
use std::path::Path;

use botkit_core::data::slices::{flip_horizontal, translate_horizontal};
use botkit_core::data::split::largest_remainder;
use botkit_core::data::store::{check_disjoint_streams, fold_streams};
use botkit_core::data::synth::{synthesize_dataset, SynthSpec};
use botkit_core::data::{
    augment, central_slice_indices, crop_and_normalize, extract_central_slices, generate_synthetic_volume,
    make_folds, make_split, AugmentConfig, ClassProfile, Label, Manifest, ManifestRow, SliceStore, SplitPlan, Task,
    VolumeRecord,
};
use botkit_core::tensor::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn volume(extents: [usize; 3], f: impl Fn(usize, usize, usize) -> f32) -> VolumeRecord {
    let mut v = Vec::new();
    for s in 0..extents[0] {
        for c in 0..extents[1] {
            for a in 0..extents[2] {
                v.push(f(s, c, a));
            }
        }
    }
    VolumeRecord::from_array("S1", "S1_a", Label::AD, extents, v).unwrap()
}

/// Manifest of `per_class` subjects per class for `task`, `scans` scans each.
fn manifest(task: Task, per_class: usize, scans: usize) -> Manifest {
    let (neg, pos) = task.classes();
    let mut rows = Vec::new();
    for label in [neg, pos] {
        for i in 0..per_class {
            for j in 0..scans {
                rows.push(ManifestRow {
                    subject_id: format!("{label}{i}"),
                    scan_id: format!("{label}{i}-{j}"),
                    label,
                    path: format!("{label}{i}-{j}.botv").into(),
                });
            }
        }
    }
    Manifest::new(rows).unwrap()
}

#[test]
fn central_slice_index_examples() {
    assert_eq!(central_slice_indices(180, 10).unwrap(), 85..95);
    assert_eq!(central_slice_indices(10, 10).unwrap(), 0..10);
    assert_eq!(central_slice_indices(11, 10).unwrap(), 0..10);
    assert_eq!(central_slice_indices(64, 10).unwrap(), 27..37);
    let err = central_slice_indices(9, 10).unwrap_err().to_string();
    assert!(err.contains('9') && err.contains("10"), "{err}");
}

#[test]
fn slices_are_coronal_with_axial_rows_and_sagittal_columns() {
    let v = volume([12, 20, 14], |s, c, a| (10_000 * c + 100 * s + a) as f32);
    let slices = extract_central_slices(&v, 10).unwrap();
    assert_eq!(slices.len(), 10);
    for (i, sl) in slices.iter().enumerate() {
        assert_eq!(sl.shape(), &[14, 12]);
        let c = 5 + i;
        assert_eq!(sl.at(&[3, 7]), (10_000 * c + 100 * 7 + 3) as f64);
    }
}

#[test]
fn crop_and_normalize_examples() {
    let s = Tensor::new(&[1, 3], vec![2.0, 4.0, 6.0]).unwrap();
    let y = crop_and_normalize(&s, 3).unwrap();
    // padded rows are zero, so they become the minimum
    assert_eq!(y.shape(), &[3, 3]);
    let row: Vec<f64> = (0..3).map(|c| y.at(&[1, c])).collect();
    assert_eq!(row, [2.0 / 6.0, 4.0 / 6.0, 1.0]);

    let s = Tensor::new(&[3, 3], vec![2.0, 4.0, 6.0, 2.0, 4.0, 6.0, 2.0, 4.0, 6.0]).unwrap();
    assert_eq!(crop_and_normalize(&s, 3).unwrap().data()[..3], [0.0, 0.5, 1.0]);

    assert!(crop_and_normalize(&Tensor::full(&[8, 8], 3.5), 4).unwrap().data().iter().all(|&v| v == 0.0));

    let big = Tensor::from_fn(&[256, 256], |i| i as f64);
    let y = crop_and_normalize(&big, 224).unwrap();
    let (lo, hi) = ((16 * 256 + 16) as f64, (239 * 256 + 239) as f64);
    let back = |v: f64| (v * (hi - lo) + lo).round() as usize;
    assert_eq!(back(y.at(&[0, 0])), 16 * 256 + 16);
    assert_eq!(back(y.at(&[223, 223])), 239 * 256 + 239);
    assert_eq!(back(y.at(&[5, 100])), 21 * 256 + 116);
}

#[test]
fn augmentation_examples() {
    let img = Tensor::randn(&[6, 8], 1.0, &mut rng(1));
    assert_eq!(flip_horizontal(&flip_horizontal(&img)), img);
    assert_eq!(flip_horizontal(&img).at(&[2, 0]), img.at(&[2, 7]));

    let t = translate_horizontal(&img, 3);
    for r in 0..6 {
        for c in 0..8 {
            let expect = if c >= 3 { img.at(&[r, c - 3]) } else { 0.0 };
            assert_eq!(t.at(&[r, c]), expect);
        }
    }

    let cfg = AugmentConfig { translations: 5, max_shift: 10 };
    let out = augment(&img, &cfg, &mut rng(2));
    assert_eq!(out.len(), 7);
    assert_eq!(out[0], img);
    assert_eq!(out[1], flip_horizontal(&img));
    for copy in &out[2..] {
        let hit = (1..=10).flat_map(|m| [m, -m]).any(|o| translate_horizontal(&img, o) == *copy);
        assert!(hit);
    }
}

#[test]
fn translation_offsets_cover_both_directions() {
    let img = Tensor::from_fn(&[1, 32], |i| i as f64 + 1.0);
    let cfg = AugmentConfig { translations: 400, max_shift: 10 };
    let mut seen = BTreeSet::new();
    for copy in &augment(&img, &cfg, &mut rng(3))[2..] {
        let o = (-10isize..=10).find(|&o| translate_horizontal(&img, o) == *copy).unwrap();
        assert_ne!(o, 0);
        seen.insert(o);
    }
    assert_eq!(seen.len(), 20);
}

#[test]
fn volume_container_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let v = volume([10, 11, 12], |s, c, a| (s * 3 + c * 5 + a) as f32 * 0.25);
    let p = dir.path().join("v.botv");
    v.write(&p).unwrap();
    let back = VolumeRecord::read(&p).unwrap();
    assert_eq!(back.voxels, v.voxels);
    assert_eq!((back.extents, back.label, back.scan_id.as_str()), ([10, 11, 12], Label::AD, "S1_a"));

    let mut bytes = std::fs::read(&p).unwrap();
    bytes.truncate(bytes.len() - 4);
    std::fs::write(&p, &bytes).unwrap();
    assert!(VolumeRecord::read(&p).is_err());
    assert!(VolumeRecord::read(Path::new("/nonexistent.botv")).is_err());
    assert!(VolumeRecord::from_array("a", "b", Label::CN, [9, 20, 20], vec![0.0; 9 * 400]).is_err());
}

#[test]
fn manifest_round_trip_and_validation() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest(Task::AdVsCn, 3, 2);
    let p = dir.path().join("m.csv");
    m.write(&p).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    assert!(text.starts_with("# botkit-manifest v1\nsubject_id,scan_id,label,path\n"));
    let back = Manifest::read(&p).unwrap();
    assert_eq!(back.rows.len(), 12);
    assert_eq!(back.rows[0].path, dir.path().join("CN0-0.botv"));

    let mut dup = m.rows.clone();
    dup.push(dup[0].clone());
    assert!(Manifest::new(dup).is_err());
    let mut relabel = m.rows.clone();
    relabel[1].label = Label::AD;
    assert!(Manifest::new(relabel).is_err());
    std::fs::write(&p, "subject_id,scan_id,label,path\nA,A1,XX,a.botv\n").unwrap();
    assert!(Manifest::read(&p).is_err());
}

#[test]
fn labels_and_tasks() {
    assert_eq!(Task::AdVsCn.binary(Label::AD), Some(1));
    assert_eq!(Task::AdVsCn.binary(Label::CN), Some(0));
    assert_eq!(Task::AdVsCn.binary(Label::MCIc), None);
    assert_eq!(Task::McicVsMcinc.binary(Label::MCInc), Some(0));
    assert_eq!("mcic-vs-cn".parse::<Task>().unwrap(), Task::McicVsCn);
    assert!("AD".parse::<Label>().is_ok() && "XX".parse::<Label>().is_err());
}

#[test]
fn hundred_subjects_split_eighty_ten_ten() {
    let plan = make_split(&manifest(Task::AdVsCn, 50, 2), Task::AdVsCn, [0.8, 0.1, 0.1], 7).unwrap();
    assert_eq!((plan.train.len(), plan.val.len(), plan.test.len()), (80, 10, 10));
    for set in [&plan.train, &plan.val, &plan.test] {
        let pos = set.iter().filter(|s| s.starts_with("AD")).count();
        assert_eq!(pos * 2, set.len());
    }
    assert_eq!(plan, make_split(&manifest(Task::AdVsCn, 50, 2), Task::AdVsCn, [0.8, 0.1, 0.1], 7).unwrap());
    assert_ne!(plan.test, make_split(&manifest(Task::AdVsCn, 50, 2), Task::AdVsCn, [0.8, 0.1, 0.1], 8).unwrap().test);
}

#[test]
fn split_rejects_small_classes_and_bad_ratios() {
    let err = make_split(&manifest(Task::AdVsCn, 4, 1), Task::AdVsCn, [0.8, 0.1, 0.1], 0).unwrap_err();
    assert!(err.to_string().contains("cannot stratify"), "{err}");
    assert!(make_split(&manifest(Task::AdVsCn, 10, 1), Task::McicVsMcinc, [0.8, 0.1, 0.1], 0).is_err());
    assert!(make_split(&manifest(Task::AdVsCn, 10, 1), Task::AdVsCn, [0.8, 0.3, 0.1], 0).is_err());
}

#[test]
fn folds_partition_train_and_val_with_both_classes() {
    let plan = make_split(&manifest(Task::McicVsCn, 23, 1), Task::McicVsCn, [0.8, 0.1, 0.1], 3).unwrap().with_folds(5).unwrap();
    let pool: BTreeSet<&String> = plan.train.iter().chain(&plan.val).collect();
    let folded: Vec<&String> = plan.folds.iter().flatten().collect();
    assert_eq!(folded.len(), pool.len());
    assert_eq!(folded.into_iter().collect::<BTreeSet<_>>(), pool);
    for f in &plan.folds {
        let pos = f.iter().filter(|s| s.starts_with("MCIc")).count();
        assert!(pos > 0 && pos < f.len());
    }
    for k in 0..5 {
        let (tr, va) = plan.fold_partition(k).unwrap();
        assert!(tr.is_disjoint(&va));
        assert!(tr.is_disjoint(&plan.test_set()) && va.is_disjoint(&plan.test_set()));
        assert_eq!(tr.len() + va.len(), pool.len());
    }
    assert!(make_folds(&plan, 1).is_err());
}

#[test]
fn split_plan_json_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let plan = make_split(&manifest(Task::AdVsCn, 10, 1), Task::AdVsCn, [0.8, 0.1, 0.1], 1).unwrap().with_folds(2).unwrap();
    let p = dir.path().join("split.json");
    plan.save(&p).unwrap();
    assert_eq!(SplitPlan::load(&p).unwrap(), plan);
    let text = std::fs::read_to_string(&p).unwrap().replace("\"version\": 1", "\"version\": 9");
    std::fs::write(&p, text).unwrap();
    assert!(SplitPlan::load(&p).is_err());
}

#[test]
fn tampered_plan_fails_its_check() {
    let mut plan = make_split(&manifest(Task::AdVsCn, 10, 1), Task::AdVsCn, [0.8, 0.1, 0.1], 1).unwrap().with_folds(2).unwrap();
    plan.train.push(plan.test[0].clone());
    assert!(plan.check().is_err());
}

fn tiny_dataset(dir: &Path, per_class: usize, scans: usize) -> Manifest {
    let spec = SynthSpec {
        task: Task::AdVsCn,
        subjects_per_class: per_class,
        scans_per_subject: scans,
        extent: 16,
        separable: true,
        seed: 5,
    };
    synthesize_dataset(dir, &spec).unwrap();
    Manifest::read(&dir.join("manifest.csv")).unwrap()
}

#[test]
fn store_round_trip_and_pixel_range() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_dataset(dir.path(), 5, 2);
    let store = SliceStore::build(&m, Task::AdVsCn, 10, 12).unwrap();
    assert_eq!(store.scans.len(), 20);
    for scan in 0..20 {
        for s in 0..10 {
            let img = store.image(scan, s);
            assert_eq!(img.shape(), &[12, 12]);
            assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
    store.save(&dir.path().join("store")).unwrap();
    assert_eq!(SliceStore::load(&dir.path().join("store")).unwrap(), store);
    assert!(SliceStore::load(&dir.path().join("nope")).is_err());
}

#[test]
fn validation_and_test_streams_are_not_augmented() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_dataset(dir.path(), 6, 2);
    let store = SliceStore::build(&m, Task::AdVsCn, 10, 12).unwrap();
    let plan = make_split(&m, Task::AdVsCn, [0.8, 0.1, 0.1], 2).unwrap().with_folds(2).unwrap();
    let aug = AugmentConfig { translations: 3, max_shift: 4 };
    let s = fold_streams(&store, &plan, 0, 4, &aug, &mut rng(9)).unwrap();
    let (tr, va) = plan.fold_partition(0).unwrap();
    assert_eq!(s.train.len(), tr.len() * 2 * 5);
    assert_eq!(s.val.len(), va.len() * 2);
    assert_eq!(s.test.len(), plan.test.len() * 2);
    for v in &s.val {
        let scan = store.scans.iter().position(|e| e.scan_id == v.scan_id).unwrap();
        assert_eq!(v.pixels, store.image(scan, 4));
        assert_eq!(v.slice_index, 4);
    }
}

#[test]
fn leakage_guard_over_hundred_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_dataset(dir.path(), 12, 2);
    let store = SliceStore::build(&m, Task::AdVsCn, 10, 8).unwrap();
    let aug = AugmentConfig { translations: 1, max_shift: 2 };
    for seed in 0..100u64 {
        let plan = make_split(&m, Task::AdVsCn, [0.8, 0.1, 0.1], seed).unwrap().with_folds(5).unwrap();
        plan.check().unwrap();
        for fold in 0..5 {
            let s = fold_streams(&store, &plan, fold, (seed % 10) as usize, &aug, &mut rng(seed)).unwrap();
            check_disjoint_streams(&[("train", &s.train), ("val", &s.val), ("test", &s.test)]).unwrap();
        }
    }
}

#[test]
fn stream_check_detects_a_shared_subject() {
    let px = Tensor::zeros(&[2, 2]);
    let mk = |sub: &str| botkit_core::data::SliceSample {
        subject_id: sub.into(),
        scan_id: format!("{sub}-x"),
        slice_index: 0,
        pixels: px.clone(),
        label: 0,
    };
    let a = [mk("A"), mk("B")];
    let b = [mk("C"), mk("B")];
    let err = check_disjoint_streams(&[("train", &a), ("test", &b)]).unwrap_err().to_string();
    assert!(err.contains('B') && err.contains("train") && err.contains("test"), "{err}");
}

#[test]
fn synthetic_volumes_are_deterministic_per_subject() {
    let p = ClassProfile::separable(true);
    let a = generate_synthetic_volume(&p, "AD_001", "AD_001_s0", Label::AD, 24, 3).unwrap();
    let b = generate_synthetic_volume(&p, "AD_001", "AD_001_s0", Label::AD, 24, 3).unwrap();
    assert_eq!(a, b);
    let other_scan = generate_synthetic_volume(&p, "AD_001", "AD_001_s1", Label::AD, 24, 3).unwrap();
    let other_subject = generate_synthetic_volume(&p, "AD_002", "AD_002_s0", Label::AD, 24, 3).unwrap();
    assert_ne!(a.voxels, other_scan.voxels);
    assert_ne!(a.voxels, other_subject.voxels);
}

/// Mean of the central `window×window` region of the middle coronal slice.
fn central_mean(v: &VolumeRecord, window: usize) -> f64 {
    let (rows, cols, px) = v.coronal_slice(v.extents[1] / 2);
    let (r0, c0) = ((rows - window) / 2, (cols - window) / 2);
    let mut s = 0.0;
    for r in r0..r0 + window {
        for c in c0..c0 + window {
            s += px[r * cols + c];
        }
    }
    s / (window * window) as f64
}

#[test]
fn separable_profiles_are_split_by_a_threshold() {
    let stats = |positive: bool, seed: u64| -> Vec<f64> {
        let p = ClassProfile::separable(positive);
        (0..40)
            .map(|i| {
                let id = format!("{positive}-{i}");
                central_mean(&generate_synthetic_volume(&p, &id, &id, Label::CN, 64, seed).unwrap(), 32)
            })
            .collect()
    };
    let (neg, pos) = (stats(false, 11), stats(true, 11));
    let best = neg
        .iter()
        .chain(&pos)
        .map(|&t| {
            let correct = neg.iter().filter(|&&v| v > t).count() + pos.iter().filter(|&&v| v <= t).count();
            correct as f64 / 80.0
        })
        .fold(0.0, f64::max);
    assert!(best > 0.95, "{best}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn central_slices_are_position_exact(depth in 10usize..40, k in 1usize..11) {
        let v = volume([10, depth, 10], |_, c, _| c as f32);
        let slices = extract_central_slices(&v, k).unwrap();
        prop_assert_eq!(slices.len(), k);
        let start = depth / 2 - k / 2;
        for (i, s) in slices.iter().enumerate() {
            prop_assert!(s.data().iter().all(|&x| x == (start + i) as f64));
        }
        // the center plane is always included and the window stays in range
        prop_assert!(start <= depth / 2 && depth / 2 < start + k && start + k <= depth);
    }

    #[test]
    fn normalized_slices_are_in_unit_range(
        rows in 1usize..40, cols in 1usize..40, target in 1usize..32, seed in 0u64..1000,
    ) {
        let s = Tensor::randn(&[rows, cols], 5.0, &mut rng(seed));
        let y = crop_and_normalize(&s, target).unwrap();
        prop_assert_eq!(y.shape(), &[target, target]);
        prop_assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn largest_remainder_sums_and_stays_within_one(n in 0usize..500, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (a, b) = if a + b > 1.0 { (a / 2.0, b / 2.0) } else { (a, b) };
        let ratios = [a, b, 1.0 - a - b];
        let counts = largest_remainder(n, &ratios);
        prop_assert_eq!(counts.iter().sum::<usize>(), n);
        for (c, r) in counts.iter().zip(ratios) {
            prop_assert!((*c as f64 - r * n as f64).abs() < 1.0 + 1e-9);
        }
    }

    #[test]
    fn plans_are_disjoint_and_folds_partition(per_class in 5usize..30, seed in 0u64..10_000, k in 2usize..6) {
        let m = manifest(Task::AdVsCn, per_class, 1);
        let plan = make_split(&m, Task::AdVsCn, [0.8, 0.1, 0.1], seed).unwrap();
        let pool_per_class = plan.train.len() / 2 + plan.val.len() / 2;
        prop_assume!(pool_per_class >= k);
        let plan = plan.with_folds(k).unwrap();
        let sets: Vec<BTreeSet<&String>> = [&plan.train, &plan.val, &plan.test].iter().map(|v| v.iter().collect()).collect();
        prop_assert!(sets[0].is_disjoint(&sets[1]) && sets[0].is_disjoint(&sets[2]) && sets[1].is_disjoint(&sets[2]));
        let mut seen = BTreeSet::new();
        for f in &plan.folds {
            for s in f {
                prop_assert!(seen.insert(s));
            }
        }
        let pool: BTreeSet<&String> = sets[0].union(&sets[1]).copied().collect();
        prop_assert_eq!(seen, pool);
    }
}
