//! Linear-probe evaluation of frozen features under a fold protocol, and a
//! reduced supervised baseline that reports in the same schema.

#[cfg(not(feature = "std"))]
use num_traits::Float;
use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::contrastive::{EncoderConfig, Encoder};
use crate::dsp::MelSpectrogram;
use crate::error::{Error, Result};
use crate::nn::{seeded, Dense};
use crate::tensor::{Adam, Graph, LrSchedule, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClipMeta {
    pub clip_id: usize,
    /// 1-based fold.
    pub fold: usize,
    pub class_id: usize,
}

/// One feature vector per clip, all of the same dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    dim: usize,
    meta: Vec<ClipMeta>,
    values: Vec<f32>,
}

impl FeatureTable {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Shape("feature dimension must be positive".into()));
        }
        Ok(Self {
            dim,
            meta: Vec::new(),
            values: Vec::new(),
        })
    }

    /// Builds a table from `[n, dim]` features and matching metadata.
    pub fn from_tensor(features: &Tensor<f32>, meta: &[ClipMeta]) -> Result<Self> {
        let (n, dim) = features.dims2()?;
        if n != meta.len() {
            return Err(Error::dim("feature table", &[n, dim], &[meta.len()]));
        }
        let mut table = Self::new(dim)?;
        for (row, m) in meta.iter().enumerate() {
            table.push(*m, features.row(row))?;
        }
        Ok(table)
    }

    pub fn push(&mut self, meta: ClipMeta, features: &[f32]) -> Result<()> {
        if features.len() != self.dim {
            return Err(Error::dim("feature row", &[self.dim], &[features.len()]));
        }
        if self.meta.iter().any(|m| m.clip_id == meta.clip_id) {
            return Err(Error::Input(format!("clip {} appears twice", meta.clip_id)));
        }
        if let Some(bad) = features.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("clip {} has feature {bad}", meta.clip_id)));
        }
        self.meta.push(meta);
        self.values.extend_from_slice(features);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn meta(&self) -> &[ClipMeta] {
        &self.meta
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn folds(&self) -> Vec<usize> {
        self.meta.iter().map(|m| m.fold).collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// One more than the largest class id.
    pub fn num_classes(&self) -> usize {
        self.meta.iter().map(|m| m.class_id + 1).max().unwrap_or(0)
    }

    /// Applies a fixed permutation to the feature coordinates of every row.
    pub fn permute_features(&self, perm: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.dim];
        if perm.len() != self.dim || perm.iter().any(|&p| p >= self.dim || core::mem::replace(&mut seen[p], true)) {
            return Err(Error::Parameter("not a permutation of the feature coordinates".into()));
        }
        let mut out = self.clone();
        for (i, row) in out.values.chunks_mut(self.dim).enumerate() {
            let src = &self.values[i * self.dim..(i + 1) * self.dim];
            for (dst, &p) in row.iter_mut().zip(perm) {
                *dst = src[p];
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Coupled L2 penalty added to the gradient.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            learning_rate: 1e-2,
            weight_decay: 1e-4,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("probe epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "probe learning_rate must be > 0 and weight_decay >= 0, got {} / {}",
                self.learning_rate, self.weight_decay
            )));
        }
        Ok(())
    }
}

/// A single linear layer over standardized features.
#[derive(Debug, Clone)]
pub struct LinearProbe {
    pub store: ParamStore<f32>,
    pub layer: Dense,
    pub mean: Vec<f32>,
    /// Reciprocal training standard deviation; zero for constant features.
    pub inv_std: Vec<f32>,
    pub num_classes: usize,
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
}

impl LinearProbe {
    fn standardize(&self, row: &[f32], out: &mut Vec<f32>) {
        out.extend(row.iter().zip(&self.mean).zip(&self.inv_std).map(|((&v, &m), &s)| (v - m) * s));
    }

    pub fn logits(&self, rows: &[&[f32]]) -> Result<Tensor<f32>> {
        let dim = self.mean.len();
        let mut x = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(Error::dim("probe input", &[dim], &[r.len()]));
            }
            self.standardize(r, &mut x);
        }
        let mut g = Graph::with_params(&self.store);
        let x = g.input(Tensor::new(&[rows.len(), dim], x)?);
        let y = self.layer.forward(&mut g, x)?;
        Ok(g.tensor(y))
    }

    /// Arg-max class per row; ties go to the lowest class id.
    pub fn predict(&self, rows: &[&[f32]]) -> Result<Vec<usize>> {
        let logits = self.logits(rows)?;
        Ok(logits.data().chunks(self.num_classes).map(argmax).collect())
    }
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Multinomial logistic regression on the rows whose fold is in `train_folds`.
/// Weights start at zero; features are standardized with training statistics.
pub fn train_linear_probe(table: &FeatureTable, train_folds: &[usize], config: &ProbeConfig) -> Result<LinearProbe> {
    train_linear_probe_for(table, train_folds, table.num_classes(), config)
}

fn train_linear_probe_for(
    table: &FeatureTable,
    train_folds: &[usize],
    num_classes: usize,
    config: &ProbeConfig,
) -> Result<LinearProbe> {
    config.validate()?;
    let rows: Vec<usize> = (0..table.len()).filter(|&i| train_folds.contains(&table.meta[i].fold)).collect();
    let present: BTreeSet<usize> = rows.iter().map(|&i| table.meta[i].class_id).collect();
    let absent: Vec<usize> = (0..num_classes).filter(|c| !present.contains(c)).collect();
    if rows.is_empty() || !absent.is_empty() {
        return Err(Error::Input(format!(
            "training folds {train_folds:?} have no examples of classes {absent:?}"
        )));
    }
    let dim = table.dim;
    let n = rows.len() as f64;
    let mut mean = vec![0.0f64; dim];
    let mut var = vec![0.0f64; dim];
    for &i in &rows {
        for (m, &v) in mean.iter_mut().zip(table.row(i)) {
            *m += v as f64 / n;
        }
    }
    for &i in &rows {
        for ((s, &m), &v) in var.iter_mut().zip(&mean).zip(table.row(i)) {
            *s += (v as f64 - m).powi(2) / n;
        }
    }
    let inv_std = var
        .iter()
        .map(|&v| if v.sqrt() > 1e-12 { (1.0 / v.sqrt()) as f32 } else { 0.0 })
        .collect();
    let mut store = ParamStore::new();
    let weight = store.add_zeros("probe.weight", &[dim, num_classes])?;
    let bias = store.add_zeros("probe.bias", &[num_classes])?;
    let layer = Dense {
        weight,
        bias,
        in_dim: dim,
        out_dim: num_classes,
    };
    let mut probe = LinearProbe {
        store,
        layer,
        mean: mean.iter().map(|&m| m as f32).collect(),
        inv_std,
        num_classes,
        loss_curve: Vec::with_capacity(config.epochs),
    };
    let mut standardized = Vec::with_capacity(rows.len() * dim);
    for &i in &rows {
        probe.standardize(table.row(i), &mut standardized);
    }
    let mut adam = Adam::new(&probe.store).with_weight_decay(config.weight_decay);
    let mut rng = seeded(config.seed);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut x = Vec::with_capacity(batch.len() * dim);
            let mut targets = Vec::with_capacity(batch.len());
            for &b in batch {
                x.extend_from_slice(&standardized[b * dim..(b + 1) * dim]);
                targets.push(table.meta[rows[b]].class_id);
            }
            let (loss, grads) = {
                let mut g = Graph::with_params(&probe.store);
                let x = g.input(Tensor::new(&[batch.len(), dim], x)?);
                let y = probe.layer.forward(&mut g, x)?;
                let l = g.softmax_cross_entropy(y, &targets)?;
                (g.scalar(l), g.backward(l)?.for_params(&probe.store))
            };
            adam.step(&mut probe.store, &grads, config.learning_rate)?;
            total += loss as f64 * batch.len() as f64;
        }
        probe.loss_curve.push(total / n);
    }
    Ok(probe)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub accuracy: f64,
    pub num_test: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprint {
    /// Hex FNV-1a digest of the frozen model parameters.
    pub model_hash: String,
    pub seed: u64,
}

/// Result of a fold sweep. `std` is the population standard deviation of the
/// per-fold accuracies. `confusion[true][predicted]` is pooled over folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub schema_version: u32,
    /// `"contrastive"`, `"generative"`, `"baseline"` or a free label.
    pub source: String,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub per_fold: Vec<FoldResult>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub confusion: Vec<Vec<usize>>,
    pub fingerprint: Fingerprint,
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

impl ProbeReport {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Protocol(format!("invalid report for {}: {what}", self.source)));
        if self.schema_version != REPORT_SCHEMA_VERSION {
            return bad("unsupported schema_version");
        }
        if self.per_fold.is_empty() {
            return bad("no folds");
        }
        if self.per_fold.iter().any(|f| !(0.0..=1.0).contains(&f.accuracy)) {
            return bad("accuracy outside [0, 1]");
        }
        if self.confusion.len() != self.num_classes || self.confusion.iter().any(|r| r.len() != self.num_classes) {
            return bad("confusion matrix is not num_classes square");
        }
        let scored: usize = self.confusion.iter().flatten().sum();
        let tested: usize = self.per_fold.iter().map(|f| f.num_test).sum();
        if scored != tested {
            return bad("confusion total differs from test count");
        }
        Ok(())
    }

    fn assemble(
        source: &str,
        feature_dim: usize,
        num_classes: usize,
        per_fold: Vec<FoldResult>,
        confusion: Vec<Vec<usize>>,
        fingerprint: Fingerprint,
    ) -> Self {
        let k = per_fold.len() as f64;
        let mean = per_fold.iter().map(|f| f.accuracy).sum::<f64>() / k;
        let var = per_fold.iter().map(|f| (f.accuracy - mean).powi(2)).sum::<f64>() / k;
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            source: source.into(),
            feature_dim,
            num_classes,
            per_fold,
            mean_accuracy: mean,
            std_accuracy: var.sqrt(),
            confusion,
            fingerprint,
        }
    }
}

pub fn hex_digest(value: u64) -> String {
    format!("{value:016x}")
}

fn sweep_folds(table_folds: Vec<usize>) -> Result<Vec<usize>> {
    if table_folds.len() < 2 {
        return Err(Error::Protocol(format!(
            "fold protocol needs at least two folds, found {table_folds:?}"
        )));
    }
    Ok(table_folds)
}

/// Holds out each fold in turn, trains a probe on the rest, and scores every
/// held-out clip once.
pub fn evaluate_folds(table: &FeatureTable, config: &ProbeConfig, source: &str, fingerprint: Fingerprint) -> Result<ProbeReport> {
    let folds = sweep_folds(table.folds())?;
    let classes = table.num_classes();
    let mut confusion = vec![vec![0usize; classes]; classes];
    let mut per_fold = Vec::with_capacity(folds.len());
    for &held in &folds {
        let train: Vec<usize> = folds.iter().copied().filter(|&f| f != held).collect();
        let probe = train_linear_probe_for(table, &train, classes, config)?;
        let test: Vec<usize> = (0..table.len()).filter(|&i| table.meta[i].fold == held).collect();
        let rows: Vec<&[f32]> = test.iter().map(|&i| table.row(i)).collect();
        let predicted = probe.predict(&rows)?;
        let mut correct = 0;
        for (&i, &p) in test.iter().zip(&predicted) {
            let truth = table.meta[i].class_id;
            confusion[truth][p] += 1;
            correct += (truth == p) as usize;
        }
        per_fold.push(FoldResult {
            fold: held,
            accuracy: correct as f64 / test.len() as f64,
            num_test: test.len(),
        });
    }
    Ok(ProbeReport::assemble(source, table.dim, classes, per_fold, confusion, fingerprint))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub encoder: EncoderConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            epochs: 20,
            batch_size: 32,
            schedule: LrSchedule::constant(1e-3, 20),
            seed: 0,
        }
    }
}

/// Trains the encoder plus a linear classifier end to end on labels, once per
/// held-out fold, and reports in the probe schema. The fingerprint hashes the
/// initial weights, which are shared by every fold.
pub fn train_supervised_baseline(
    mels: &[MelSpectrogram],
    meta: &[ClipMeta],
    config: &BaselineConfig,
) -> Result<ProbeReport> {
    if mels.is_empty() {
        return Err(Error::Input("baseline needs at least one spectrogram".into()));
    }
    if mels.len() != meta.len() {
        return Err(Error::dim("baseline labels", &[mels.len()], &[meta.len()]));
    }
    if config.epochs == 0 || config.batch_size == 0 {
        return Err(Error::Config("baseline epochs and batch_size must be positive".into()));
    }
    config.schedule.validate()?;
    let folds = sweep_folds(meta.iter().map(|m| m.fold).collect::<BTreeSet<_>>().into_iter().collect())?;
    let classes = meta.iter().map(|m| m.class_id + 1).max().unwrap_or(0);
    let (shift, scale) = crate::contrastive::corpus_stats(mels);
    let build = || -> Result<(ParamStore<f32>, Encoder, Dense)> {
        let mut rng = seeded(config.seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, "encoder", &config.encoder, &mut rng)?;
        let head = Dense::new(&mut store, "classifier", config.encoder.embedding_dim, classes, &mut rng)?;
        Ok((store, encoder, head))
    };
    let fingerprint = Fingerprint {
        model_hash: hex_digest(build()?.0.fingerprint()),
        seed: config.seed,
    };
    let mut confusion = vec![vec![0usize; classes]; classes];
    let mut per_fold = Vec::with_capacity(folds.len());
    for &held in &folds {
        let (mut store, encoder, head) = build()?;
        store
            .value_mut(encoder.input_norm)
            .data_mut()
            .copy_from_slice(&[shift as f32, scale as f32]);
        let train: Vec<usize> = (0..mels.len()).filter(|&i| meta[i].fold != held).collect();
        let present: BTreeSet<usize> = train.iter().map(|&i| meta[i].class_id).collect();
        let absent: Vec<usize> = (0..classes).filter(|c| !present.contains(c)).collect();
        if !absent.is_empty() {
            return Err(Error::Input(format!(
                "training folds for held-out fold {held} lack classes {absent:?}"
            )));
        }
        let mut adam = Adam::new(&store);
        let mut rng = seeded(config.seed ^ (held as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let mut order = train.clone();
        for epoch in 0..config.epochs {
            let lr = config.schedule.lr(epoch);
            order.shuffle(&mut rng);
            for batch in order.chunks(config.batch_size) {
                let refs: Vec<&MelSpectrogram> = batch.iter().map(|&i| &mels[i]).collect();
                let targets: Vec<usize> = batch.iter().map(|&i| meta[i].class_id).collect();
                let grads = {
                    let x = encoder.input_batch(&store, &refs)?;
                    let mut g = Graph::with_params(&store);
                    let x = g.input(x);
                    let e = encoder.forward(&mut g, x)?;
                    let y = head.forward(&mut g, e)?;
                    let l = g.softmax_cross_entropy(y, &targets)?;
                    if !g.scalar(l).is_finite() {
                        return Err(Error::Numeric(format!("baseline loss diverged on fold {held}")));
                    }
                    g.backward(l)?.for_params(&store)
                };
                adam.step(&mut store, &grads, lr)?;
            }
        }
        let test: Vec<usize> = (0..mels.len()).filter(|&i| meta[i].fold == held).collect();
        let mut correct = 0;
        for chunk in test.chunks(config.batch_size) {
            let refs: Vec<&MelSpectrogram> = chunk.iter().map(|&i| &mels[i]).collect();
            let x = encoder.input_batch(&store, &refs)?;
            let mut g = Graph::with_params(&store);
            let x = g.input(x);
            let e = encoder.forward(&mut g, x)?;
            let y = head.forward(&mut g, e)?;
            for (&i, row) in chunk.iter().zip(g.value(y).chunks(classes)) {
                let p = argmax(row);
                confusion[meta[i].class_id][p] += 1;
                correct += (p == meta[i].class_id) as usize;
            }
        }
        per_fold.push(FoldResult {
            fold: held,
            accuracy: correct as f64 / test.len() as f64,
            num_test: test.len(),
        });
    }
    Ok(ProbeReport::assemble(
        "baseline",
        config.encoder.embedding_dim,
        classes,
        per_fold,
        confusion,
        fingerprint,
    ))
}

/// `baseline mean - best unsupervised mean`; `None` without a baseline or
/// without any unsupervised report.
pub fn supervised_gap(baseline: Option<&ProbeReport>, unsupervised: &[&ProbeReport]) -> Option<f64> {
    let best = unsupervised.iter().map(|r| r.mean_accuracy).reduce(f64::max)?;
    baseline.map(|b| b.mean_accuracy - best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(clip_id: usize, fold: usize, class_id: usize) -> ClipMeta {
        ClipMeta { clip_id, fold, class_id }
    }

    #[test]
    fn table_rejects_duplicates_and_bad_rows() {
        let mut t = FeatureTable::new(2).unwrap();
        t.push(meta(0, 1, 0), &[1.0, 2.0]).unwrap();
        assert!(t.push(meta(0, 2, 1), &[1.0, 2.0]).is_err());
        assert!(t.push(meta(1, 2, 1), &[1.0]).is_err());
        assert!(t.push(meta(2, 2, 1), &[f32::NAN, 0.0]).is_err());
        assert_eq!(t.len(), 1);
    }

    #[test]
    fn missing_class_is_listed() {
        let mut t = FeatureTable::new(1).unwrap();
        t.push(meta(0, 1, 0), &[0.0]).unwrap();
        t.push(meta(1, 2, 2), &[1.0]).unwrap();
        match train_linear_probe(&t, &[1, 2], &ProbeConfig::default()) {
            Err(Error::Input(msg)) => assert!(msg.contains("[1]"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn single_fold_is_a_protocol_error() {
        let mut t = FeatureTable::new(1).unwrap();
        t.push(meta(0, 1, 0), &[0.0]).unwrap();
        let fp = Fingerprint { model_hash: String::new(), seed: 0 };
        assert!(matches!(evaluate_folds(&t, &ProbeConfig::default(), "x", fp), Err(Error::Protocol(_))));
    }

    #[test]
    fn gap_uses_best_unsupervised() {
        let fp = Fingerprint { model_hash: String::new(), seed: 0 };
        let r = |m: f64| ProbeReport::assemble(
            "x",
            1,
            1,
            vec![FoldResult { fold: 1, accuracy: m, num_test: 1 }],
            vec![vec![1]],
            fp.clone(),
        );
        let (b, c, g) = (r(0.9), r(0.6), r(0.7));
        let gap = supervised_gap(Some(&b), &[&c, &g]).unwrap();
        assert!((gap - 0.2).abs() < 1e-12);
        assert_eq!(supervised_gap(None, &[&c]), None);
        assert_eq!(supervised_gap(Some(&b), &[]), None);
    }
}
