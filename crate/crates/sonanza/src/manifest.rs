//! UrbanSound8K-style metadata CSVs and the per-clip label tables written by
//! the pipeline.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use sonanza_core::probe::ClipMeta;

use crate::error::{Error, Result};

pub const MAX_FOLD: usize = 10;
pub const MAX_CLASSES: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub file_name: String,
    pub path: PathBuf,
    pub fold: usize,
    pub class_id: usize,
    pub class_name: Option<String>,
}

/// Entries are sorted by file name; a clip's id is its position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn meta(&self) -> Vec<ClipMeta> {
        self.entries
            .iter()
            .enumerate()
            .map(|(clip_id, e)| ClipMeta {
                clip_id,
                fold: e.fold,
                class_id: e.class_id,
            })
            .collect()
    }
}

fn csv_err(path: &Path, source: csv::Error) -> Error {
    Error::Csv {
        path: path.into(),
        source,
    }
}

struct Table {
    headers: csv::StringRecord,
    rows: Vec<csv::StringRecord>,
}

impl Table {
    fn read(path: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| csv_err(path, e))?;
        let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
        let rows = rdr
            .records()
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| csv_err(path, e))?;
        Ok(Self { headers, rows })
    }

    fn column(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h == name)
    }

    fn require(&self, path: &Path, names: &[&str]) -> Result<Vec<usize>> {
        let missing: Vec<&str> = names.iter().copied().filter(|n| self.column(n).is_none()).collect();
        if !missing.is_empty() {
            return Err(Error::Schema(format!(
                "{}: missing column(s) {}",
                path.display(),
                missing.join(", ")
            )));
        }
        Ok(names.iter().map(|n| self.column(n).unwrap()).collect())
    }
}

fn parse_index(path: &Path, row: usize, column: &str, raw: &str) -> Result<usize> {
    raw.parse().map_err(|_| {
        Error::Validation(format!(
            "{}: row {}: {column} {raw:?} is not a non-negative integer",
            path.display(),
            row + 2
        ))
    })
}

fn check_fold(path: &Path, row: usize, fold: usize) -> Result<()> {
    if !(1..=MAX_FOLD).contains(&fold) {
        return Err(Error::Validation(format!(
            "{}: row {}: fold {fold} outside 1..={MAX_FOLD}",
            path.display(),
            row + 2
        )));
    }
    Ok(())
}

fn check_class(path: &Path, row: usize, class_id: usize) -> Result<()> {
    if class_id >= MAX_CLASSES {
        return Err(Error::Validation(format!(
            "{}: row {}: classID {class_id} outside 0..{MAX_CLASSES}",
            path.display(),
            row + 2
        )));
    }
    Ok(())
}

/// `(file name, fold, class id, class name)`, sorted by file name.
type Row = (String, usize, usize, Option<String>);

fn parse_rows(path: &Path, table: &Table) -> Result<Vec<Row>> {
    let cols = table.require(path, &["slice_file_name", "fold", "classID"])?;
    let class_col = table.column("class");
    let mut seen = BTreeSet::new();
    let mut names: BTreeMap<usize, String> = BTreeMap::new();
    let mut out = Vec::with_capacity(table.rows.len());
    for (i, r) in table.rows.iter().enumerate() {
        let name = r.get(cols[0]).unwrap_or("").to_string();
        if name.is_empty() {
            return Err(Error::Validation(format!("{}: row {}: empty slice_file_name", path.display(), i + 2)));
        }
        let fold = parse_index(path, i, "fold", r.get(cols[1]).unwrap_or(""))?;
        check_fold(path, i, fold)?;
        let class_id = parse_index(path, i, "classID", r.get(cols[2]).unwrap_or(""))?;
        check_class(path, i, class_id)?;
        if !seen.insert(name.clone()) {
            return Err(Error::Validation(format!("{}: duplicate file name {name}", path.display())));
        }
        let class_name = class_col.and_then(|c| r.get(c)).map(str::to_string);
        if let Some(cn) = &class_name {
            if let Some(prev) = names.insert(class_id, cn.clone()) {
                if &prev != cn {
                    return Err(Error::Validation(format!(
                        "{}: classID {class_id} is named both {prev:?} and {cn:?}",
                        path.display()
                    )));
                }
            }
        }
        out.push((name, fold, class_id, class_name));
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

/// Audio for a row is looked up at `root/fold<N>/<name>` (the UrbanSound8K
/// layout) and then at `root/<name>`. Every missing file is listed in a single
/// error.
pub fn parse_manifest(csv_path: &Path, audio_root: &Path) -> Result<DatasetManifest> {
    let table = Table::read(csv_path)?;
    let rows = parse_rows(csv_path, &table)?;
    let mut entries = Vec::with_capacity(rows.len());
    let mut missing = Vec::new();
    for (file_name, fold, class_id, class_name) in rows {
        let nested = audio_root.join(format!("fold{fold}")).join(&file_name);
        let flat = audio_root.join(&file_name);
        let path = if nested.is_file() {
            nested
        } else if flat.is_file() {
            flat
        } else {
            missing.push(file_name.clone());
            continue;
        };
        entries.push(ManifestEntry {
            file_name,
            path,
            fold,
            class_id,
            class_name,
        });
    }
    if !missing.is_empty() {
        return Err(Error::Validation(format!(
            "{} audio file(s) listed in {} are missing under {}: {}",
            missing.len(),
            csv_path.display(),
            audio_root.display(),
            missing.join(", ")
        )));
    }
    Ok(DatasetManifest {
        root: audio_root.into(),
        entries,
    })
}

/// Labels aligned with feature rows. A metadata CSV (`slice_file_name`
/// column) is ordered by file name with clip ids 0..n; otherwise the table
/// needs `clip_id`, `fold` and `classID` and keeps its row order.
pub fn read_labels(path: &Path) -> Result<Vec<ClipMeta>> {
    let table = Table::read(path)?;
    if table.column("slice_file_name").is_some() {
        let rows = parse_rows(path, &table)?;
        return Ok(rows
            .into_iter()
            .enumerate()
            .map(|(clip_id, (_, fold, class_id, _))| ClipMeta { clip_id, fold, class_id })
            .collect());
    }
    let cols = table.require(path, &["clip_id", "fold", "classID"])?;
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(table.rows.len());
    for (i, r) in table.rows.iter().enumerate() {
        let clip_id = parse_index(path, i, "clip_id", r.get(cols[0]).unwrap_or(""))?;
        let fold = parse_index(path, i, "fold", r.get(cols[1]).unwrap_or(""))?;
        check_fold(path, i, fold)?;
        let class_id = parse_index(path, i, "classID", r.get(cols[2]).unwrap_or(""))?;
        check_class(path, i, class_id)?;
        if !seen.insert(clip_id) {
            return Err(Error::Validation(format!("{}: duplicate clip_id {clip_id}", path.display())));
        }
        out.push(ClipMeta { clip_id, fold, class_id });
    }
    Ok(out)
}

/// Writes `clip_id,fold,classID` plus any extra named columns.
pub fn write_labels(path: &Path, meta: &[ClipMeta], extra: &[(&str, Vec<String>)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["clip_id", "fold", "classID"];
    header.extend(extra.iter().map(|(n, _)| *n));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (i, m) in meta.iter().enumerate() {
        let mut rec = vec![m.clip_id.to_string(), m.fold.to_string(), m.class_id.to_string()];
        rec.extend(extra.iter().map(|(_, col)| col[i].clone()));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    crate::tensor_file::write_atomic(path, &bytes)
}

/// Serializes rows with the csv crate and writes them atomically.
pub fn write_csv<R: serde::Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    crate::tensor_file::write_atomic(path, &bytes)
}

pub fn read_csv<R: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<R>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    rdr.deserialize()
        .collect::<std::result::Result<Vec<R>, _>>()
        .map_err(|e| csv_err(path, e))
}
