//! Probe report files and the supervised-vs-unsupervised comparison.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sonanza_core::probe::{supervised_gap, ProbeReport};

use crate::checkpoint::{read_json, write_json};
use crate::error::{Error, Result};
use crate::tensor_file::write_atomic;

pub const COMPARISON_SCHEMA_VERSION: u32 = 1;
pub const BASELINE_SOURCE: &str = "baseline";

/// Writes `report.json`, `report.txt` and `confusion.csv` into `dir`.
pub fn write_probe_report(dir: &Path, report: &ProbeReport) -> Result<()> {
    report.validate()?;
    write_json(&dir.join("report.json"), report)?;
    write_atomic(&dir.join("report.txt"), probe_text(report).as_bytes())?;
    write_atomic(&dir.join("confusion.csv"), confusion_csv(report).as_bytes())
}

pub fn read_probe_report(path: &Path) -> Result<ProbeReport> {
    let report: ProbeReport = read_json(path)?;
    report
        .validate()
        .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    Ok(report)
}

pub fn probe_text(r: &ProbeReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "source        {}", r.source);
    let _ = writeln!(s, "feature_dim   {}", r.feature_dim);
    let _ = writeln!(s, "model_hash    {} (seed {})", r.fingerprint.model_hash, r.fingerprint.seed);
    let _ = writeln!(s, "fold  accuracy  n_test");
    for f in &r.per_fold {
        let _ = writeln!(s, "{:>4}  {:>8.4}  {:>6}", f.fold, f.accuracy, f.num_test);
    }
    let _ = writeln!(s, "mean  {:.4} +/- {:.4}", r.mean_accuracy, r.std_accuracy);
    s
}

/// Rows are true classes, columns predicted classes.
pub fn confusion_csv(r: &ProbeReport) -> String {
    let mut s = String::from("true_class");
    for c in 0..r.num_classes {
        let _ = write!(s, ",pred_{c}");
    }
    s.push('\n');
    for (c, row) in r.confusion.iter().enumerate() {
        let _ = write!(s, "{c}");
        for v in row {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub source: String,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub num_folds: usize,
    pub feature_dim: usize,
}

/// `gap = baseline mean - max unsupervised mean`, `None` when either side is
/// missing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub schema_version: u32,
    pub rows: Vec<ComparisonRow>,
    pub best_unsupervised: Option<String>,
    pub gap: Option<f64>,
}

fn method_label(source: &str) -> String {
    match source {
        BASELINE_SOURCE => "supervised baseline".into(),
        other => format!("{other} probe"),
    }
}

fn row(r: &ProbeReport) -> ComparisonRow {
    ComparisonRow {
        method: method_label(&r.source),
        source: r.source.clone(),
        mean_accuracy: r.mean_accuracy,
        std_accuracy: r.std_accuracy,
        num_folds: r.per_fold.len(),
        feature_dim: r.feature_dim,
    }
}

/// Reports must agree on classes and folds to be comparable.
pub fn compare(baseline: Option<&ProbeReport>, unsupervised: &[ProbeReport]) -> Result<Comparison> {
    if unsupervised.is_empty() && baseline.is_none() {
        return Err(Error::Validation("report needs at least one probe or baseline report".into()));
    }
    if let Some(b) = baseline {
        if b.source != BASELINE_SOURCE {
            return Err(Error::Validation(format!(
                "baseline report has source {:?}, expected {BASELINE_SOURCE:?}",
                b.source
            )));
        }
    }
    if let Some(u) = unsupervised.iter().find(|u| u.source == BASELINE_SOURCE) {
        return Err(Error::Validation(format!("probe report {:?} is a baseline report", u.source)));
    }
    let all: Vec<&ProbeReport> = baseline.into_iter().chain(unsupervised).collect();
    for r in &all {
        r.validate()?;
    }
    let folds = |r: &ProbeReport| r.per_fold.iter().map(|f| f.fold).collect::<Vec<_>>();
    let first = all[0];
    for r in &all[1..] {
        if r.num_classes != first.num_classes || folds(r) != folds(first) {
            return Err(Error::Validation(format!(
                "reports {:?} and {:?} use different classes or folds",
                first.source, r.source
            )));
        }
    }
    let refs: Vec<&ProbeReport> = unsupervised.iter().collect();
    let best = unsupervised
        .iter()
        .reduce(|a, b| if b.mean_accuracy > a.mean_accuracy { b } else { a })
        .map(|r| r.source.clone());
    Ok(Comparison {
        schema_version: COMPARISON_SCHEMA_VERSION,
        rows: all.iter().map(|r| row(r)).collect(),
        best_unsupervised: best,
        gap: supervised_gap(baseline, &refs),
    })
}

pub fn comparison_text(c: &Comparison) -> String {
    let gap = match c.gap {
        Some(g) => format!("{g:+.4}"),
        None => "absent".into(),
    };
    let mut s = format!("{:<22} {:>8} {:>8} {:>6} {:>8}\n", "method", "mean", "std", "folds", "gap");
    for r in &c.rows {
        let _ = writeln!(
            s,
            "{:<22} {:>8.4} {:>8.4} {:>6} {:>8}",
            r.method, r.mean_accuracy, r.std_accuracy, r.num_folds, gap
        );
    }
    let _ = writeln!(
        s,
        "gap = supervised baseline - best unsupervised ({}): {gap}",
        c.best_unsupervised.as_deref().unwrap_or("none")
    );
    s
}

pub fn comparison_csv(c: &Comparison) -> String {
    let gap = c.gap.map(|g| g.to_string()).unwrap_or_default();
    let mut s = String::from("method,source,mean_accuracy,std_accuracy,num_folds,gap\n");
    for r in &c.rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{gap}",
            r.method, r.source, r.mean_accuracy, r.std_accuracy, r.num_folds
        );
    }
    s
}

pub fn write_comparison(dir: &Path, c: &Comparison) -> Result<()> {
    write_json(&dir.join("comparison.json"), c)?;
    write_atomic(&dir.join("comparison.txt"), comparison_text(c).as_bytes())?;
    write_atomic(&dir.join("comparison.csv"), comparison_csv(c).as_bytes())
}
