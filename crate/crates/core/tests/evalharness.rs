use std::path::PathBuf;

use memae::evalharness::{
    evaluate, generate_synthetic, grouped_iou, iou, load_dataset, load_folder_dataset, materialize, roc_auc,
    save_image_png, save_mask_png, Label, ManifestRow, ScoreRow, SplitManifest, SyntheticSpec, ThresholdPolicy,
    EvalConfig,
};
use memae::patchgrid::ImageTensor;
use memae::scoring::AnomalyResult;
use memae::Error;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn row(path: &str, label: &str, mask: Option<&str>) -> ManifestRow {
    ManifestRow {
        path: PathBuf::from(path),
        label: label.into(),
        mask_path: mask.map(PathBuf::from),
    }
}

#[test]
fn large_split_round_trips_through_the_loader() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::create_dir_all(root.join("img")).unwrap();
    let img = ImageTensor::from_fn(12, 12, 3, |(y, x, c)| ((y + x + c) % 5) as f32 / 4.0).unwrap();
    save_image_png(&root.join("img/a.png"), &img).unwrap();
    let mask = Array2::from_shape_fn((12, 12), |(y, x)| y < 6 && x < 6);
    save_mask_png(&root.join("img/a_mask.png"), &mask).unwrap();

    let manifest = SplitManifest {
        train: (0..1600).map(|_| row("img/a.png", "normal", None)).collect(),
        test: (0..500)
            .map(|_| row("img/a.png", "normal", None))
            .chain((0..1000).map(|_| row("img/a.png", "anomalous", Some("img/a_mask.png"))))
            .collect(),
    };
    manifest.write(root).unwrap();
    assert_eq!(SplitManifest::read(root).unwrap(), manifest);

    let (train, test) = load_dataset(root, 8, 1).unwrap();
    assert_eq!(train.len(), 1600);
    assert_eq!(test.count(Label::Normal), 500);
    assert_eq!(test.count(Label::Anomalous), 1000);
    assert!(test
        .entries
        .iter()
        .all(|e| e.mask.is_some() == (e.label == Label::Anomalous)));
    let m = test.entries[600].mask.as_ref().unwrap();
    assert_eq!(m.dim(), (8, 8));
    assert_eq!(m.iter().filter(|&&v| v).count(), 16);
}

#[test]
fn bad_manifests_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let img = ImageTensor::zeros(8, 8, 1).unwrap();
    save_image_png(&root.join("a.png"), &img).unwrap();
    save_mask_png(&root.join("m.png"), &Array2::from_elem((4, 4), true)).unwrap();
    let bad_train = SplitManifest {
        train: vec![row("a.png", "anomalous", None)],
        test: vec![],
    };
    assert!(matches!(load_folder_dataset(root, &bad_train, 8, 1), Err(Error::Dataset(_))));
    let small_mask = SplitManifest {
        train: vec![],
        test: vec![row("a.png", "anomalous", Some("m.png"))],
    };
    assert!(matches!(load_folder_dataset(root, &small_mask, 8, 1), Err(Error::Dataset(_))));
    let missing = SplitManifest {
        train: vec![row("nope.png", "normal", None)],
        test: vec![],
    };
    assert!(load_folder_dataset(root, &missing, 8, 1).is_err());
}

#[test]
fn synthetic_sets_are_byte_identical_for_equal_seeds() {
    let spec = SyntheticSpec {
        n_train: 5,
        n_test_normal: 3,
        n_test_anomalous: 3,
        seed: 4,
        ..SyntheticSpec::default()
    };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let (train, test) = generate_synthetic(&spec).unwrap();
        materialize(&train, &test, d.path()).unwrap();
    }
    let mut files: Vec<PathBuf> = walk(dirs[0].path());
    files.sort();
    assert!(files.len() >= 5 + 6 + 3 + 2);
    for f in files {
        let rel = f.strip_prefix(dirs[0].path()).unwrap();
        assert_eq!(std::fs::read(&f).unwrap(), std::fs::read(dirs[1].path().join(rel)).unwrap(), "{rel:?}");
    }
}

fn walk(dir: &std::path::Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn anomaly_free_spec_cannot_be_evaluated() {
    let spec = SyntheticSpec {
        n_train: 2,
        n_test_normal: 4,
        n_test_anomalous: 0,
        ..SyntheticSpec::default()
    };
    let (_, test) = generate_synthetic(&spec).unwrap();
    assert_eq!(test.count(Label::Anomalous), 0);
    let rows: Vec<ScoreRow> = test
        .entries
        .iter()
        .map(|e| ScoreRow {
            image_id: e.id.clone(),
            label: e.label,
            score: 0.1,
        })
        .collect();
    assert!(matches!(
        evaluate(&rows, None, &EvalConfig::default(), String::new()),
        Err(Error::Metric(_))
    ));
}

fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &a) in scores.iter().enumerate().filter(|(i, _)| labels[*i]) {
        let _ = i;
        for (j, &n) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            wins += if a > n { 1.0 } else if a == n { 0.5 } else { 0.0 };
        }
    }
    wins / pairs
}

#[test]
fn auc_matches_all_pairs_on_random_tied_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..500 {
        let n = rng.random_range(2..=50);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random()).collect();
        labels[0] = true;
        labels[1] = false;
        labels.shuffle(&mut rng);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64 / 8.0).collect();
        assert_eq!(roc_auc(&scores, &labels).unwrap(), brute_auc(&scores, &labels));
        let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
        assert_eq!(roc_auc(&warped, &labels).unwrap(), roc_auc(&scores, &labels).unwrap());
    }
}

fn result_from_map(map: Array2<f64>) -> AnomalyResult {
    AnomalyResult {
        patch_scores: Array2::zeros((1, 1)),
        image_score: map.mean().unwrap(),
        pixel_map: map,
        seeds_used: vec![0],
        warnings: vec![],
    }
}

#[test]
fn grouped_iou_over_the_whole_population_is_the_plain_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let masks: Vec<Array2<bool>> = (0..12)
        .map(|_| Array2::from_shape_fn((8, 8), |_| rng.random_bool(0.3)))
        .collect();
    let results: Vec<AnomalyResult> = (0..12)
        .map(|_| result_from_map(Array2::from_shape_fn((8, 8), |_| rng.random::<f64>())))
        .collect();
    let g = grouped_iou(&results, &masks, 12, 1, 0, ThresholdPolicy::Fixed(0.5)).unwrap();
    let plain: f64 = results
        .iter()
        .zip(&masks)
        .map(|(r, m)| iou(&r.pixel_map.mapv(|v| v >= 0.5), m).unwrap())
        .sum::<f64>()
        / 12.0;
    assert!((g.mean - plain).abs() < 1e-12);
    assert!(grouped_iou(&results, &masks, 13, 1, 0, ThresholdPolicy::Fixed(0.5)).is_err());
}
