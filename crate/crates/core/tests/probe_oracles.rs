use rand::Rng;
use sonanza_core::nn::seeded;
use sonanza_core::probe::{evaluate_folds, train_linear_probe, ClipMeta, FeatureTable, Fingerprint, ProbeConfig};

fn fingerprint() -> Fingerprint {
    Fingerprint {
        model_hash: "0".into(),
        seed: 0,
    }
}

fn table(rows: Vec<(ClipMeta, Vec<f32>)>) -> FeatureTable {
    let mut t = FeatureTable::new(rows[0].1.len()).unwrap();
    for (m, f) in rows {
        t.push(m, &f).unwrap();
    }
    t
}

fn training_accuracy(t: &FeatureTable, folds: &[usize], config: &ProbeConfig) -> f64 {
    let probe = train_linear_probe(t, folds, config).unwrap();
    let rows: Vec<&[f32]> = (0..t.len()).map(|i| t.row(i)).collect();
    let predicted = probe.predict(&rows).unwrap();
    let correct = predicted.iter().zip(t.meta()).filter(|(p, m)| **p == m.class_id).count();
    correct as f64 / t.len() as f64
}

#[test]
fn separable_classes_are_fit_exactly() {
    let mut rng = seeded(1);
    let rows = (0..200)
        .map(|i| {
            let class_id = i % 2;
            let side = if class_id == 0 { -1.0 } else { 1.0 };
            let f = vec![side * rng.random_range(0.2f32..2.0), rng.random_range(-1.0..1.0)];
            (ClipMeta { clip_id: i, fold: i % 4 + 1, class_id }, f)
        })
        .collect();
    let t = table(rows);
    assert_eq!(training_accuracy(&t, &[1, 2, 3, 4], &ProbeConfig::default()), 1.0);
}

#[test]
fn constant_features_give_majority_rate() {
    let rows = (0..100)
        .map(|i| {
            let class_id = usize::from(i % 4 == 0) + usize::from(i % 10 == 1);
            (ClipMeta { clip_id: i, fold: i % 2 + 1, class_id }, vec![3.0, -1.0])
        })
        .collect::<Vec<_>>();
    let t = table(rows);
    let counts = (0..3).map(|c| t.meta().iter().filter(|m| m.class_id == c).count()).collect::<Vec<_>>();
    let majority = *counts.iter().max().unwrap() as f64 / t.len() as f64;
    assert_eq!(training_accuracy(&t, &[1, 2], &ProbeConfig::default()), majority);
}

#[test]
fn probe_loss_decreases_by_epoch() {
    let mut rng = seeded(2);
    let rows = (0..300)
        .map(|i| {
            let class_id = i % 3;
            let f: Vec<f32> = (0..8).map(|d| rng.random_range(-1.0..1.0) + if d == class_id { 0.8 } else { 0.0 }).collect();
            (ClipMeta { clip_id: i, fold: i % 5 + 1, class_id }, f)
        })
        .collect();
    let probe = train_linear_probe(&table(rows), &[1, 2, 3, 4], &ProbeConfig::default()).unwrap();
    assert_eq!(probe.loss_curve.len(), 100);
    for w in probe.loss_curve.windows(2) {
        assert!(w[1] <= w[0] * 1.05, "{} -> {}", w[0], w[1]);
    }
}

#[test]
fn random_features_score_near_chance() {
    let mut rng = seeded(3);
    let rows = (0..2000)
        .map(|i| {
            let f: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            (ClipMeta { clip_id: i, fold: i % 10 + 1, class_id: rng.random_range(0..10) }, f)
        })
        .collect();
    let config = ProbeConfig { epochs: 20, ..Default::default() };
    let report = evaluate_folds(&table(rows), &config, "random", fingerprint()).unwrap();
    assert_eq!(report.per_fold.len(), 10);
    assert!((0.05..=0.15).contains(&report.mean_accuracy), "{}", report.mean_accuracy);
    report.validate().unwrap();
}

#[test]
fn leaked_labels_score_perfectly_and_every_clip_once() {
    let mut rng = seeded(4);
    let rows = (0..200)
        .map(|i| {
            let class_id = rng.random_range(0..10);
            let mut f = vec![0.0f32; 10];
            f[class_id] = 1.0;
            (ClipMeta { clip_id: i, fold: i % 10 + 1, class_id }, f)
        })
        .collect();
    let t = table(rows);
    let report = evaluate_folds(&t, &ProbeConfig::default(), "leak", fingerprint()).unwrap();
    assert_eq!(report.mean_accuracy, 1.0);
    assert_eq!(report.per_fold.len(), 10);
    assert_eq!(report.confusion.iter().flatten().sum::<usize>(), t.len());
    for c in 0..10 {
        let count = t.meta().iter().filter(|m| m.class_id == c).count();
        assert_eq!(report.confusion[c].iter().sum::<usize>(), count);
    }
}

#[test]
fn accuracy_ignores_feature_order() {
    let mut rng = seeded(5);
    let rows = (0..150)
        .map(|i| {
            let class_id = i % 3;
            let f: Vec<f32> = (0..6).map(|d| rng.random_range(-1.0..1.0) + if d == 2 * class_id { 0.5 } else { 0.0 }).collect();
            (ClipMeta { clip_id: i, fold: (i / 3) % 3 + 1, class_id }, f)
        })
        .collect();
    let t = table(rows);
    let permuted = t.permute_features(&[5, 3, 1, 0, 2, 4]).unwrap();
    let a = evaluate_folds(&t, &ProbeConfig::default(), "a", fingerprint()).unwrap();
    let b = evaluate_folds(&permuted, &ProbeConfig::default(), "b", fingerprint()).unwrap();
    for (x, y) in a.per_fold.iter().zip(&b.per_fold) {
        assert!((x.accuracy - y.accuracy).abs() <= 1e-6);
    }
}
