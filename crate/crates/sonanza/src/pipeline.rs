//! One function per subcommand. Every function writes the resolved config
//! next to its outputs and never touches its inputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sonanza_core::augment::{AugmentationKind, AugmentationParams};
use sonanza_core::codebook::{extract_patches, kmeans_fit, tokenize, train_autoencoder, PatchAutoencoder, TokenSequence, PATCHES_PER_CLIP};
use sonanza_core::contrastive::{train_contrastive, ContrastiveModel};
use sonanza_core::dsp::{preprocess, LogMel, MelSpectrogram, LOG_FLOOR};
use sonanza_core::generative::{
    best_constant_accuracy, next_token_accuracy, train_generative, training_examples, CodePredictor, EpochRecord,
};
use sonanza_core::nn::seeded;
use sonanza_core::probe::{evaluate_folds, hex_digest, train_supervised_baseline, ClipMeta, FeatureTable, Fingerprint, ProbeReport};
use sonanza_core::synthetic::{generate_synthetic, SignalParams};
use sonanza_core::tensor::Tensor;

use crate::checkpoint::{self, write_json};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::manifest::{parse_manifest, read_csv, read_labels, write_csv, write_labels};
use crate::plot;
use crate::report::{self, compare, read_probe_report, write_probe_report};
use crate::tensor_file::{read_f32, read_i32, write_f32, write_tensor, TensorData};
use crate::wav::{load_wav, write_wav_i16};

pub const INDEX: &str = "index.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";
/// Rows per forward pass when extracting features; fixed so that results do
/// not depend on the thread count.
pub const FEATURE_CHUNK: usize = 32;
const SYNTHETIC_CLASS_NAMES: [&str; 3] = ["tone", "band_noise", "chirp"];

/// `--threads`, then `SONANZA_THREADS`, then 1.
pub fn resolve_threads(flag: Option<usize>) -> Result<usize> {
    let n = match flag {
        Some(n) => n,
        None => match std::env::var("SONANZA_THREADS") {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| Error::Validation(format!("SONANZA_THREADS={v:?} is not a thread count")))?,
            Err(_) => 1,
        },
    };
    if n == 0 {
        return Err(Error::Validation("thread count must be positive".into()));
    }
    Ok(n)
}

/// Order-preserving map over contiguous slices of `items`, one slice per
/// thread.
pub fn par_map<I: Sync, O: Send>(items: &[I], threads: usize, f: impl Fn(usize, &I) -> Result<O> + Sync) -> Result<Vec<O>> {
    if threads <= 1 || items.len() <= 1 {
        return items.iter().enumerate().map(|(i, x)| f(i, x)).collect();
    }
    let per = items.len().div_ceil(threads);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(per)
            .enumerate()
            .map(|(c, chunk)| {
                s.spawn(move || {
                    chunk
                        .iter()
                        .enumerate()
                        .map(|(j, x)| f(c * per + j, x))
                        .collect::<Result<Vec<O>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker thread panicked")?);
        }
        Ok(out)
    })
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// One row of `index.csv` in a prepared spectrogram directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexRow {
    pub clip_id: usize,
    pub fold: usize,
    #[serde(rename = "classID")]
    pub class_id: usize,
    /// Spectrogram file, relative to the directory.
    pub spec: String,
    /// Audio file name or synthetic signal description.
    pub origin: String,
}

fn spec_name(clip_id: usize) -> String {
    format!("clip_{clip_id:05}.tnsr")
}

fn write_specs(out: &Path, mels: &[MelSpectrogram], meta: &[ClipMeta], origins: Vec<String>, threads: usize) -> Result<()> {
    let rows: Vec<IndexRow> = meta
        .iter()
        .zip(origins)
        .map(|(m, origin)| IndexRow {
            clip_id: m.clip_id,
            fold: m.fold,
            class_id: m.class_id,
            spec: spec_name(m.clip_id),
            origin,
        })
        .collect();
    par_map(&rows, threads, |i, r| write_f32(&out.join(&r.spec), &mels[i].values))?;
    write_csv(&out.join(INDEX), &rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrepSummary {
    pub clips: usize,
    pub shape: (usize, usize),
}

/// Decodes, resamples, fixes duration and computes the down-sampled log-mel
/// spectrogram of every manifest entry.
pub fn prep(manifest: &Path, audio_root: &Path, out: &Path, cfg: &RunConfig, threads: usize) -> Result<PrepSummary> {
    let m = parse_manifest(manifest, audio_root)?;
    ensure_dir(out)?;
    cfg.write_echo(out)?;
    let analysis = LogMel::new();
    let mels = par_map(&m.entries, threads, |_, e| Ok(preprocess(&load_wav(&e.path)?, &analysis)?))?;
    let origins = m.entries.iter().map(|e| e.file_name.clone()).collect();
    write_specs(out, &mels, &m.meta(), origins, threads)?;
    Ok(PrepSummary {
        clips: mels.len(),
        shape: mels.first().map(|s| s.shape()).unwrap_or((0, 0)),
    })
}

fn describe(signal: &SignalParams) -> String {
    match *signal {
        SignalParams::Tone { hz } => format!("tone {hz:.3} Hz"),
        SignalParams::BandNoise { low_hz, high_hz } => format!("noise {low_hz:.3}-{high_hz:.3} Hz"),
        SignalParams::Chirp { start_hz, end_hz } => format!("chirp {start_hz:.3}->{end_hz:.3} Hz"),
    }
}

/// Spectrograms of the synthetic corpus; with `export_audio` the waveforms
/// also go to `out/audio/` with a `metadata.csv` in the UrbanSound8K layout.
pub fn prep_synthetic(out: &Path, cfg: &RunConfig, threads: usize, export_audio: bool) -> Result<PrepSummary> {
    let spec = cfg.synthetic();
    spec.validate()?;
    ensure_dir(out)?;
    cfg.write_echo(out)?;
    let clips = generate_synthetic(&spec)?;
    let analysis = LogMel::new();
    let mels = par_map(&clips, threads, |_, c| Ok(preprocess(&c.audio, &analysis)?))?;
    let meta: Vec<ClipMeta> = clips
        .iter()
        .map(|c| ClipMeta {
            clip_id: c.clip_id,
            fold: c.fold,
            class_id: c.class_id,
        })
        .collect();
    write_specs(out, &mels, &meta, clips.iter().map(|c| describe(&c.signal)).collect(), threads)?;
    if export_audio {
        #[derive(Serialize)]
        struct Row<'a> {
            slice_file_name: String,
            fold: usize,
            #[serde(rename = "classID")]
            class_id: usize,
            class: &'a str,
        }
        let audio = out.join("audio");
        ensure_dir(&audio)?;
        par_map(&clips, threads, |_, c| write_wav_i16(&audio.join(format!("clip_{:05}.wav", c.clip_id)), &c.audio))?;
        let rows: Vec<Row> = clips
            .iter()
            .map(|c| Row {
                slice_file_name: format!("clip_{:05}.wav", c.clip_id),
                fold: c.fold,
                class_id: c.class_id,
                class: SYNTHETIC_CLASS_NAMES[c.class_id],
            })
            .collect();
        write_csv(&out.join("metadata.csv"), &rows)?;
    }
    Ok(PrepSummary {
        clips: mels.len(),
        shape: mels.first().map(|s| s.shape()).unwrap_or((0, 0)),
    })
}

/// Reads a prepared directory in index order.
pub fn load_specs(dir: &Path, threads: usize) -> Result<(Vec<MelSpectrogram>, Vec<ClipMeta>)> {
    let rows: Vec<IndexRow> = read_csv(&dir.join(INDEX))?;
    if rows.is_empty() {
        return Err(Error::Validation(format!("{} lists no clips", dir.join(INDEX).display())));
    }
    let mels = par_map(&rows, threads, |_, r| {
        if r.spec.contains(['/', '\\']) {
            return Err(Error::Validation(format!("index entry {:?} escapes {}", r.spec, dir.display())));
        }
        Ok(MelSpectrogram::new(read_f32(&dir.join(&r.spec))?, LOG_FLOOR)?)
    })?;
    let shape = mels[0].shape();
    if let Some(r) = rows.iter().zip(&mels).find(|(_, m)| m.shape() != shape) {
        return Err(Error::Validation(format!(
            "{}: shape {:?} differs from {shape:?}",
            r.0.spec,
            r.1.shape()
        )));
    }
    let meta = rows
        .iter()
        .map(|r| ClipMeta {
            clip_id: r.clip_id,
            fold: r.fold,
            class_id: r.class_id,
        })
        .collect();
    Ok((mels, meta))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct PreviewInfo {
    clip_id: usize,
    panels: Vec<AugmentationKind>,
    params: AugmentationParams,
}

/// 3x3 grid of every augmentation kind applied to one clip with parameters
/// drawn from the run seed.
pub fn augment_preview(specs: &Path, clip: usize, out: &Path, cfg: &RunConfig) -> Result<PathBuf> {
    let rows: Vec<IndexRow> = read_csv(&specs.join(INDEX))?;
    let row = rows
        .iter()
        .find(|r| r.clip_id == clip)
        .ok_or_else(|| Error::Validation(format!("clip {clip} is not in {}", specs.display())))?;
    let mel = MelSpectrogram::new(read_f32(&specs.join(&row.spec))?, LOG_FLOOR)?;
    let params = AugmentationParams::sample(&mut seeded(cfg.seed()), mel.n_mels());
    ensure_dir(out)?;
    cfg.write_echo(out)?;
    let png = out.join("preview.png");
    plot::preview_grid(&mel, &params, &png)?;
    write_json(
        &out.join("preview.json"),
        &PreviewInfo {
            clip_id: clip,
            panels: AugmentationKind::ALL.to_vec(),
            params,
        },
    )?;
    Ok(png)
}

fn write_features(out: &Path, features: &Tensor<f32>, meta: &[ClipMeta]) -> Result<()> {
    write_f32(&out.join("features.tnsr"), features)?;
    write_labels(&out.join("features.csv"), meta, &[])
}

fn stack_rows(rows: Vec<Tensor<f32>>, dim: usize) -> Result<Tensor<f32>> {
    let n: usize = rows.iter().map(|t| t.shape()[0]).sum();
    let data: Vec<f32> = rows.into_iter().flat_map(Tensor::into_data).collect();
    Ok(Tensor::new(&[n, dim], data)?)
}

/// 512-dim encoder embeddings of every clip.
pub fn contrastive_features(model: &ContrastiveModel<f32>, mels: &[MelSpectrogram], threads: usize) -> Result<Tensor<f32>> {
    let chunks: Vec<&[MelSpectrogram]> = mels.chunks(FEATURE_CHUNK).collect();
    let parts = par_map(&chunks, threads, |_, c| {
        let refs: Vec<&MelSpectrogram> = c.iter().collect();
        Ok(model.encode_batch(&refs)?)
    })?;
    stack_rows(parts, model.config().embedding_dim)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveSummary {
    pub final_loss: f64,
    pub steps: usize,
    pub fingerprint: String,
}

pub fn run_train_contrastive(specs: &Path, out: &Path, cfg: &RunConfig, threads: usize) -> Result<ContrastiveSummary> {
    let (mels, meta) = load_specs(specs, threads)?;
    let run = cfg.contrastive_run();
    run.validate()?;
    let encoder = cfg.contrastive_encoder();
    encoder.validate()?;
    ensure_dir(out)?;
    cfg.write_echo(out)?;
    let mut model = ContrastiveModel::<f32>::new(&encoder, cfg.seed())?;
    let log = train_contrastive(&mut model, &mels, &run, |_| {})?;
    write_csv(&out.join("loss.csv"), &log)?;
    let losses: Vec<f64> = log.iter().map(|r| r.loss).collect();
    plot::loss_curves(&out.join("loss.png"), &[&losses])?;
    let manifest = checkpoint::save_contrastive(&out.join(CHECKPOINT_DIR), &model, cfg.seed())?;
    write_features(out, &contrastive_features(&model, &mels, threads)?, &meta)?;
    Ok(ContrastiveSummary {
        final_loss: losses.last().copied().unwrap_or(f64::NAN),
        steps: log.len(),
        fingerprint: manifest.fingerprint,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct InertiaRow {
    iteration: usize,
    inertia: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct AeEpochRow {
    epoch: usize,
    lr: f64,
    loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodebookSummary {
    pub k: usize,
    pub patches: usize,
    pub iterations: usize,
    pub inertia: f64,
}

/// Trains the patch autoencoder, then runs k-means on the bottleneck
/// embeddings of every patch. `out` becomes the codebook directory.
pub fn run_build_codebook(specs: &Path, out: &Path, cfg: &RunConfig, threads: usize) -> Result<CodebookSummary> {
    let (mels, meta) = load_specs(specs, threads)?;
    let training = cfg.autoencoder_training();
    training.schedule.validate()?;
    let k = cfg.uint("codebook.k");
    ensure_dir(out)?;
    cfg.write_echo(out)?;
    let per_clip = par_map(&mels, threads, |i, m| Ok(extract_patches(m, meta[i].clip_id)?))?;
    let patches: Vec<_> = per_clip.into_iter().flatten().collect();
    let rows: Vec<&[f32]> = patches.iter().map(|p| p.values.as_slice()).collect();
    let mut ae = PatchAutoencoder::<f32>::new(&cfg.autoencoder(), cfg.seed())?;
    let curve = train_autoencoder(&mut ae, &rows, &training, |_, _| {})?;
    let ae_rows: Vec<AeEpochRow> = curve
        .iter()
        .enumerate()
        .map(|(epoch, &loss)| AeEpochRow {
            epoch,
            lr: training.schedule.lr(epoch),
            loss,
        })
        .collect();
    write_csv(&out.join("ae_loss.csv"), &ae_rows)?;
    plot::loss_curves(&out.join("ae_loss.png"), &[&curve])?;
    let chunks: Vec<&[&[f32]]> = rows.chunks(512).collect();
    let embedded = par_map(&chunks, threads, |_, c| Ok(ae.embed(c)?))?;
    let points: Vec<Vec<f64>> = embedded
        .iter()
        .flat_map(|z| z.data().chunks(z.shape()[1]).map(|r| r.iter().map(|&v| v as f64).collect()))
        .collect();
    let cb = kmeans_fit(&points, k, cfg.seed(), cfg.uint("codebook.max_iters"))?;
    let history: Vec<InertiaRow> = cb
        .inertia_history
        .iter()
        .enumerate()
        .map(|(iteration, &inertia)| InertiaRow { iteration, inertia })
        .collect();
    write_csv(&out.join("kmeans.csv"), &history)?;
    checkpoint::save_codebook(out, &ae, &cb)?;
    Ok(CodebookSummary {
        k: cb.k(),
        patches: points.len(),
        iterations: cb.iterations,
        inertia: cb.inertia,
    })
}

/// `tokens.tnsr` -> `tokens.csv`, `tokens.config.txt`.
fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

/// Writes an i32 `(num_clips, 50)` token tensor plus the `clip_id,fold,classID`
/// sidecar CSV.
pub fn run_tokenize(codebook: &Path, specs: &Path, out: &Path, cfg: &RunConfig, threads: usize) -> Result<(usize, usize)> {
    let (ae, cb) = checkpoint::load_codebook(codebook)?;
    let (mels, meta) = load_specs(specs, threads)?;
    let seqs = par_map(&mels, threads, |i, m| Ok(tokenize(m, &ae, &cb, meta[i].clip_id, Some(meta[i].class_id))?))?;
    let data: Vec<i32> = seqs.iter().flat_map(|s| s.tokens.iter().map(|&t| t as i32)).collect();
    let shape = vec![seqs.len(), PATCHES_PER_CLIP];
    write_tensor(out, &TensorData::I32 { shape, data })?;
    write_labels(&sidecar(out, ".csv"), &meta, &[])?;
    crate::tensor_file::write_atomic(&sidecar(out, ".config.txt"), cfg.echo().as_bytes())?;
    Ok((seqs.len(), cb.k()))
}

pub fn load_tokens(path: &Path) -> Result<(Vec<TokenSequence>, Vec<ClipMeta>)> {
    let (shape, data) = read_i32(path)?;
    let meta = read_labels(&sidecar(path, ".csv"))?;
    if shape.len() != 2 || shape[0] != meta.len() {
        return Err(Error::Validation(format!(
            "{}: token shape {shape:?} does not match {} labelled clips",
            path.display(),
            meta.len()
        )));
    }
    if let Some(t) = data.iter().find(|&&t| t < 0) {
        return Err(Error::Validation(format!("{}: negative token {t}", path.display())));
    }
    let seqs = data
        .chunks(shape[1])
        .zip(&meta)
        .map(|(row, m)| TokenSequence {
            tokens: row.iter().map(|&t| t as u32).collect(),
            clip_id: m.clip_id,
            label: Some(m.class_id),
        })
        .collect();
    Ok((seqs, meta))
}

/// Next-token accuracy on the held-out fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldOut {
    pub fold: usize,
    pub train_examples: usize,
    pub test_examples: usize,
    pub next_token_accuracy: f64,
    pub best_constant_accuracy: f64,
}

pub fn run_train_generative(tokens: &Path, out: &Path, cfg: &RunConfig, threads: usize) -> Result<Option<HeldOut>> {
    let (seqs, meta) = load_tokens(tokens)?;
    let model_cfg = cfg.transformer();
    model_cfg.validate()?;
    if let Some(t) = seqs.iter().flat_map(|s| &s.tokens).find(|&&t| t as usize >= model_cfg.vocab) {
        return Err(Error::Validation(format!(
            "token {t} does not fit vocabulary codebook.k = {}",
            model_cfg.vocab
        )));
    }
    let training = cfg.generative_training();
    training.schedule.validate()?;
    let mut folds: Vec<usize> = meta.iter().map(|m| m.fold).collect();
    folds.sort_unstable();
    folds.dedup();
    let held = match cfg.uint("gen.heldout_fold") {
        0 if folds.len() > 1 => Some(*folds.last().unwrap()),
        0 => None,
        f if folds.contains(&f) => Some(f),
        f => return Err(Error::Validation(format!("gen.heldout_fold {f} is not among folds {folds:?}"))),
    };
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (s, m) in seqs.iter().zip(&meta) {
        if Some(m.fold) == held { test.push(s.clone()) } else { train.push(s.clone()) }
    }
    ensure_dir(out)?;
    cfg.write_echo(out)?;
    let mut model = CodePredictor::<f32>::new(&model_cfg)?;
    let log: Vec<EpochRecord> = train_generative(&mut model, &train, &training, |_| {})?;
    write_csv(&out.join("train_log.csv"), &log)?;
    let losses: Vec<f64> = log.iter().map(|r| r.loss).collect();
    plot::loss_curves(&out.join("train_log.png"), &[&losses])?;
    checkpoint::save_generative(&out.join(CHECKPOINT_DIR), &model)?;
    let heldout = match held {
        Some(fold) => {
            let tr = training_examples(&train, model_cfg.context_len, false)?;
            let te = training_examples(&test, model_cfg.context_len, false)?;
            Some(HeldOut {
                fold,
                train_examples: tr.len(),
                test_examples: te.len(),
                next_token_accuracy: next_token_accuracy(&model, &te)?,
                best_constant_accuracy: best_constant_accuracy(&tr, &te)?,
            })
        }
        None => None,
    };
    write_json(&out.join("heldout.json"), &heldout)?;
    let chunks: Vec<&[TokenSequence]> = seqs.chunks(FEATURE_CHUNK).collect();
    let parts = par_map(&chunks, threads, |_, c| Ok(model.represent_all(c, FEATURE_CHUNK)?))?;
    write_features(out, &stack_rows(parts, model_cfg.repr_dim)?, &meta)?;
    Ok(heldout)
}

fn fnv_bytes(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Linear probe over a feature tensor. Labels come from `labels` (a metadata
/// CSV or a `clip_id,fold,classID` table aligned with the feature rows).
/// With `folds = Some(n)` the labels must cover exactly folds `1..=n`. The
/// fingerprint names the checkpoint when one is given, else the feature bytes.
pub fn run_probe(
    features: &Path,
    labels: &Path,
    folds: Option<usize>,
    checkpoint_dir: Option<&Path>,
    out: &Path,
    cfg: &RunConfig,
) -> Result<ProbeReport> {
    let table_features = read_f32(features)?;
    let meta = read_labels(labels)?;
    let (n, _) = table_features
        .dims2()
        .map_err(|_| Error::Validation(format!("{}: features must be a matrix", features.display())))?;
    if n != meta.len() {
        return Err(Error::Validation(format!(
            "{} has {n} rows but {} lists {} clips",
            features.display(),
            labels.display(),
            meta.len()
        )));
    }
    let table = FeatureTable::from_tensor(&table_features, &meta)?;
    if let Some(expected) = folds {
        let present = table.folds();
        if present != (1..=expected).collect::<Vec<_>>() {
            return Err(Error::Validation(format!("--folds {expected} but the labels hold folds {present:?}")));
        }
    }
    let (source, model_hash) = match checkpoint_dir {
        Some(dir) => {
            let m: checkpoint::CheckpointManifest = checkpoint::read_json(&dir.join(checkpoint::MANIFEST))?;
            (m.kind, m.fingerprint)
        }
        None => {
            let bytes = std::fs::read(features).map_err(|e| Error::io(features, e))?;
            ("features".to_string(), hex_digest(fnv_bytes(&bytes)))
        }
    };
    let probe_cfg = cfg.probe();
    let fingerprint = Fingerprint {
        model_hash,
        seed: cfg.seed(),
    };
    let report = evaluate_folds(&table, &probe_cfg, &source, fingerprint)?;
    ensure_dir(out)?;
    cfg.write_echo(out)?;
    write_probe_report(out, &report)?;
    Ok(report)
}

pub fn run_baseline(specs: &Path, out: &Path, cfg: &RunConfig, threads: usize) -> Result<ProbeReport> {
    let (mels, meta) = load_specs(specs, threads)?;
    let baseline = cfg.baseline();
    baseline.encoder.validate()?;
    ensure_dir(out)?;
    cfg.write_echo(out)?;
    let report = train_supervised_baseline(&mels, &meta, &baseline)?;
    write_probe_report(out, &report)?;
    Ok(report)
}

/// Reads the `loss` column of a training log CSV.
pub fn read_loss_column(path: &Path) -> Result<Vec<f64>> {
    #[derive(Deserialize)]
    struct Row {
        loss: f64,
    }
    Ok(read_csv::<Row>(path)?.into_iter().map(|r| r.loss).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct CurveRow<'a> {
    series: &'a str,
    index: usize,
    loss: f64,
}

/// Comparison table with the gap statistic; each `(label, csv)` loss log is
/// drawn on `loss_curves.png` and flattened into `loss_curves.csv`.
pub fn run_report(
    probes: &[PathBuf],
    baseline: Option<&Path>,
    losses: &[(String, PathBuf)],
    out: &Path,
    cfg: &RunConfig,
) -> Result<report::Comparison> {
    let unsupervised = probes.iter().map(|p| read_probe_report(p)).collect::<Result<Vec<_>>>()?;
    let base = baseline.map(read_probe_report).transpose()?;
    let comparison = compare(base.as_ref(), &unsupervised)?;
    let curves = losses
        .iter()
        .map(|(label, p)| Ok((label.as_str(), read_loss_column(p)?)))
        .collect::<Result<Vec<_>>>()?;
    ensure_dir(out)?;
    cfg.write_echo(out)?;
    report::write_comparison(out, &comparison)?;
    if !curves.is_empty() {
        let series: Vec<&[f64]> = curves.iter().map(|(_, c)| c.as_slice()).collect();
        plot::loss_curves(&out.join("loss_curves.png"), &series)?;
        let rows: Vec<CurveRow> = curves
            .iter()
            .flat_map(|(label, c)| c.iter().enumerate().map(move |(index, &loss)| CurveRow { series: label, index, loss }))
            .collect();
        write_csv(&out.join("loss_curves.csv"), &rows)?;
    }
    Ok(comparison)
}

/// Rebuilds contrastive features from a checkpoint, for reproducibility checks.
pub fn reload_contrastive_features(checkpoint_dir: &Path, specs: &Path, threads: usize) -> Result<Tensor<f32>> {
    let model = checkpoint::load_contrastive(checkpoint_dir)?;
    let (mels, _) = load_specs(specs, threads)?;
    contrastive_features(&model, &mels, threads)
}
