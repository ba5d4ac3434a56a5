use std::path::Path;

use sonanza::plot::render_preview;
use sonanza::report::{compare, comparison_csv, comparison_text, read_probe_report, write_probe_report};
use sonanza::Error;
use sonanza_core::augment::{apply, AugmentationKind, AugmentationParams};
use sonanza_core::dsp::{preprocess, LogMel, MelSpectrogram, LOG_FLOOR};
use sonanza_core::probe::{FoldResult, Fingerprint, ProbeReport, REPORT_SCHEMA_VERSION};
use sonanza_core::synthetic::{generate_synthetic, SyntheticSpec};

fn report(source: &str, accs: &[f64]) -> ProbeReport {
    let per_fold: Vec<FoldResult> = accs
        .iter()
        .enumerate()
        .map(|(i, &a)| FoldResult {
            fold: i + 1,
            accuracy: a,
            num_test: 10,
        })
        .collect();
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    let std = (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / accs.len() as f64).sqrt();
    let correct: usize = accs.iter().map(|a| (a * 10.0).round() as usize).sum();
    let total = 10 * accs.len();
    ProbeReport {
        schema_version: REPORT_SCHEMA_VERSION,
        source: source.into(),
        feature_dim: 4,
        num_classes: 2,
        per_fold,
        mean_accuracy: mean,
        std_accuracy: std,
        confusion: vec![vec![correct, total - correct], vec![0, 0]],
        fingerprint: Fingerprint {
            model_hash: "00".into(),
            seed: 1,
        },
    }
}

#[test]
fn three_reports_give_three_rows_and_the_gap() {
    let base = report("baseline", &[0.9, 1.0]);
    let probes = [report("contrastive", &[0.7, 0.8]), report("generative", &[0.6, 0.6])];
    let c = compare(Some(&base), &probes).unwrap();
    assert_eq!(c.rows.len(), 3);
    assert_eq!(c.rows[0].method, "supervised baseline");
    assert_eq!(c.best_unsupervised.as_deref(), Some("contrastive"));
    assert_eq!(c.gap, Some(base.mean_accuracy - probes[0].mean_accuracy));
    let csv = comparison_csv(&c);
    assert_eq!(csv.lines().next().unwrap(), "method,source,mean_accuracy,std_accuracy,num_folds,gap");
    assert_eq!(csv.lines().count(), 4);
    let json = serde_json::to_value(&c).unwrap();
    for key in ["schema_version", "rows", "best_unsupervised", "gap"] {
        assert!(json.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn missing_baseline_marks_the_gap_absent() {
    let c = compare(None, &[report("contrastive", &[0.7, 0.8])]).unwrap();
    assert_eq!(c.gap, None);
    assert!(comparison_text(&c).contains("absent"));
    assert!(comparison_csv(&c).lines().nth(1).unwrap().ends_with(','));
    assert_eq!(serde_json::to_value(&c).unwrap()["gap"], serde_json::Value::Null);
}

#[test]
fn incompatible_reports_are_validation_errors() {
    let base = report("baseline", &[0.9, 1.0]);
    let three_folds = report("contrastive", &[0.7, 0.8, 0.9]);
    assert!(matches!(compare(Some(&base), &[three_folds]), Err(Error::Validation(_))));
    let mut wrong = report("contrastive", &[0.7, 0.8]);
    wrong.schema_version = 99;
    let e = compare(Some(&base), &[wrong.clone()]).unwrap_err();
    assert_eq!(e.exit_code(), 1);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("r.json");
    std::fs::write(&p, serde_json::to_string(&wrong).unwrap()).unwrap();
    assert!(matches!(read_probe_report(&p), Err(Error::Validation(_))));
    std::fs::write(&p, r#"{"source": "x"}"#).unwrap();
    assert!(matches!(read_probe_report(&p), Err(Error::Json { .. })));
}

#[test]
fn probe_report_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let r = report("contrastive", &[0.5, 0.7]);
    write_probe_report(dir.path(), &r).unwrap();
    assert_eq!(read_probe_report(&dir.path().join("report.json")).unwrap(), r);
    let confusion = std::fs::read_to_string(dir.path().join("confusion.csv")).unwrap();
    assert_eq!(confusion, "true_class,pred_0,pred_1\n0,12,8\n1,0,0\n");
    assert!(Path::new(&dir.path().join("report.txt")).is_file());
}

fn panel_pixels(img: &image::GrayImage, layout: &sonanza::plot::GridLayout, panel: usize) -> Vec<u8> {
    let (x0, y0) = layout.origin(panel);
    let mut out = Vec::new();
    for y in y0..y0 + layout.panel_height {
        for x in x0..x0 + layout.panel_width {
            out.push(img.get_pixel(x, y).0[0]);
        }
    }
    out
}

#[test]
fn silent_input_leaves_only_the_noise_panel_textured() {
    let mel = MelSpectrogram::constant(64, 200, LOG_FLOOR.ln() as f32);
    let (img, layout) = render_preview(&mel, &AugmentationParams::default()).unwrap();
    assert_eq!(img.dimensions(), layout.size());
    for (i, kind) in AugmentationKind::ALL.iter().enumerate() {
        let px = panel_pixels(&img, &layout, i);
        let uniform = px.iter().all(|&p| p == px[0]);
        assert_eq!(uniform, *kind != AugmentationKind::AddNoise, "{kind}");
    }
}

#[test]
fn band_stop_panel_shows_a_gap_of_the_declared_width() {
    let spec = SyntheticSpec {
        clips_per_class: 1,
        ..SyntheticSpec::default()
    };
    let tone = &generate_synthetic(&spec).unwrap()[0];
    let mel = preprocess(&tone.audio, &LogMel::new()).unwrap();
    let params = AugmentationParams {
        bandstop_onset: 20,
        bandstop_width: 9,
        ..AugmentationParams::default()
    };
    let (img, layout) = render_preview(&mel, &params).unwrap();
    let panel = AugmentationKind::ALL.iter().position(|&k| k == AugmentationKind::BandStop).unwrap();
    let (x0, _) = layout.origin(panel);
    let dark_row = |mel_bin: usize| {
        let y = layout.row_of_mel(panel, mel_bin);
        (x0..x0 + layout.panel_width).all(|x| img.get_pixel(x, y).0[0] == 0)
    };
    let gap: Vec<usize> = (0..64).filter(|&m| dark_row(m)).collect();
    assert_eq!(gap, (20..29).collect::<Vec<_>>());
    // the oracle: the augmented matrix itself is at the floor exactly on those bins
    let stopped = apply(AugmentationKind::BandStop, &params, &mel).unwrap();
    for m in 0..64 {
        let at_floor = (0..200).all(|t| stopped.get(m, t) == mel.floor_value());
        assert_eq!(at_floor, gap.contains(&m), "mel bin {m}");
    }
}
