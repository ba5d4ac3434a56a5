//! Checkpoint directories: `manifest.json` plus one `.tnsr` file per parameter,
//! keyed by the parameter's path string.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sonanza_core::codebook::{AutoencoderConfig, Codebook, PatchAutoencoder};
use sonanza_core::contrastive::{ContrastiveModel, EncoderConfig};
use sonanza_core::generative::{CodePredictor, TransformerConfig};
use sonanza_core::probe::hex_digest;
use sonanza_core::tensor::ParamStore;

use crate::error::{Error, Result};
use crate::tensor_file::{read_f32, write_atomic, write_f32};

pub const MANIFEST: &str = "manifest.json";
pub const CHECKPOINT_VERSION: u32 = 1;
const CENTROIDS: &str = "centroids.tnsr";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    /// `"contrastive"`, `"codebook"` or `"generative"`.
    pub kind: String,
    pub config: serde_json::Value,
    pub params: Vec<ParamEntry>,
    /// Hex FNV-1a of the stored parameters.
    pub fingerprint: String,
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.into(),
        source,
    })?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.into(),
        source,
    })
}

/// Writes every parameter of `store`. `config` must be enough to rebuild the
/// model's parameter layout.
pub fn save_params(
    dir: &Path,
    kind: &str,
    config: &impl Serialize,
    store: &ParamStore<f32>,
    extra: serde_json::Value,
) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut params = Vec::with_capacity(store.len());
    for (_, p) in store.iter() {
        let file = format!("{}.tnsr", p.name);
        write_f32(&dir.join(&file), &p.value)?;
        params.push(ParamEntry {
            name: p.name.clone(),
            file,
            shape: p.value.shape().to_vec(),
        });
    }
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        kind: kind.into(),
        config: serde_json::to_value(config).map_err(|source| Error::Json {
            path: dir.join(MANIFEST),
            source,
        })?,
        params,
        fingerprint: hex_digest(store.fingerprint()),
        extra,
    };
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path, kind: &str) -> Result<CheckpointManifest> {
    let m: CheckpointManifest = read_json(&dir.join(MANIFEST))?;
    if m.version != CHECKPOINT_VERSION {
        return Err(Error::Schema(format!(
            "{}: checkpoint version {} is not {CHECKPOINT_VERSION}",
            dir.display(),
            m.version
        )));
    }
    if m.kind != kind {
        return Err(Error::Schema(format!(
            "{}: expected a {kind} checkpoint, found {}",
            dir.display(),
            m.kind
        )));
    }
    Ok(m)
}

pub fn manifest_config<T: DeserializeOwned>(dir: &Path, m: &CheckpointManifest) -> Result<T> {
    serde_json::from_value(m.config.clone()).map_err(|source| Error::Json {
        path: dir.join(MANIFEST),
        source,
    })
}

/// Overwrites every parameter of `store` from the checkpoint; the name sets
/// must coincide.
pub fn load_params(dir: &Path, m: &CheckpointManifest, store: &mut ParamStore<f32>) -> Result<()> {
    let mut expected: Vec<&str> = store.iter().map(|(_, p)| p.name.as_str()).collect();
    let mut stored: Vec<&str> = m.params.iter().map(|p| p.name.as_str()).collect();
    expected.sort_unstable();
    stored.sort_unstable();
    if expected != stored {
        let missing: Vec<&&str> = expected.iter().filter(|n| !stored.contains(n)).collect();
        let unknown: Vec<&&str> = stored.iter().filter(|n| !expected.contains(n)).collect();
        return Err(Error::Schema(format!(
            "{}: parameter set mismatch (missing {missing:?}, unexpected {unknown:?})",
            dir.display()
        )));
    }
    for entry in &m.params {
        if entry.file.contains(['/', '\\']) || entry.file.starts_with('.') {
            return Err(Error::Schema(format!("parameter file {:?} escapes the checkpoint", entry.file)));
        }
        let t = read_f32(&dir.join(&entry.file))?;
        if t.shape() != entry.shape.as_slice() {
            return Err(Error::Schema(format!(
                "{}: shape {:?} differs from manifest {:?}",
                entry.file,
                t.shape(),
                entry.shape
            )));
        }
        store.set(&entry.name, t)?;
    }
    Ok(())
}

pub fn save_contrastive(dir: &Path, model: &ContrastiveModel<f32>, seed: u64) -> Result<CheckpointManifest> {
    save_params(dir, "contrastive", model.config(), &model.store, serde_json::json!({ "seed": seed }))
}

pub fn load_contrastive(dir: &Path) -> Result<ContrastiveModel<f32>> {
    let m = read_manifest(dir, "contrastive")?;
    let cfg: EncoderConfig = manifest_config(dir, &m)?;
    let mut model = ContrastiveModel::new(&cfg, 0)?;
    load_params(dir, &m, &mut model.store)?;
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CodebookInfo {
    k: usize,
    inertia: f64,
    iterations: usize,
    inertia_history: Vec<f64>,
    seed: u64,
}

/// The autoencoder parameters and the k-means centroids share one directory.
pub fn save_codebook(dir: &Path, ae: &PatchAutoencoder<f32>, cb: &Codebook) -> Result<CheckpointManifest> {
    write_f32(&dir.join(CENTROIDS), &cb.centroids)?;
    let info = CodebookInfo {
        k: cb.k(),
        inertia: cb.inertia,
        iterations: cb.iterations,
        inertia_history: cb.inertia_history.clone(),
        seed: cb.seed,
    };
    let extra = serde_json::to_value(&info).expect("codebook info serializes");
    save_params(dir, "codebook", &ae.config, &ae.store, extra)
}

pub fn load_codebook(dir: &Path) -> Result<(PatchAutoencoder<f32>, Codebook)> {
    let m = read_manifest(dir, "codebook")?;
    let cfg: AutoencoderConfig = manifest_config(dir, &m)?;
    let mut ae = PatchAutoencoder::new(&cfg, 0)?;
    load_params(dir, &m, &mut ae.store)?;
    let info: CodebookInfo = serde_json::from_value(m.extra.clone()).map_err(|source| Error::Json {
        path: dir.join(MANIFEST),
        source,
    })?;
    let mut cb = Codebook::from_centroids(read_f32(&dir.join(CENTROIDS))?, info.seed)?;
    if cb.k() != info.k {
        return Err(Error::Schema(format!(
            "{}: {} centroids but manifest says k = {}",
            dir.display(),
            cb.k(),
            info.k
        )));
    }
    cb.inertia = info.inertia;
    cb.iterations = info.iterations;
    cb.inertia_history = info.inertia_history;
    Ok((ae, cb))
}

pub fn save_generative(dir: &Path, model: &CodePredictor<f32>) -> Result<CheckpointManifest> {
    save_params(dir, "generative", &model.config, &model.store, serde_json::Value::Null)
}

pub fn load_generative(dir: &Path) -> Result<CodePredictor<f32>> {
    let m = read_manifest(dir, "generative")?;
    let cfg: TransformerConfig = manifest_config(dir, &m)?;
    let mut model = CodePredictor::new(&cfg)?;
    load_params(dir, &m, &mut model.store)?;
    Ok(model)
}
