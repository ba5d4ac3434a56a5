use std::fs;
use std::path::Path;

use sonanza::manifest::{parse_manifest, read_labels};
use sonanza::Error;
use sonanza_core::probe::ClipMeta;

fn setup(csv: &str, files: &[&str]) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("meta.csv"), csv).unwrap();
    for f in files {
        let p = dir.path().join(f);
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        fs::write(p, b"x").unwrap();
    }
    dir
}

const HEADER: &str = "slice_file_name,fsID,start,end,salience,fold,classID,class\n";

#[test]
fn toy_manifest_is_sorted_with_folds() {
    let csv = format!(
        "{HEADER}c.wav,1,0,1,1,3,2,children_playing\na.wav,1,0,1,1,1,0,air_conditioner\nb.wav,1,0,1,1,2,0,air_conditioner\n"
    );
    let dir = setup(&csv, &["fold1/a.wav", "fold2/b.wav", "c.wav"]);
    let m = parse_manifest(&dir.path().join("meta.csv"), dir.path()).unwrap();
    let names: Vec<&str> = m.entries.iter().map(|e| e.file_name.as_str()).collect();
    assert_eq!(names, ["a.wav", "b.wav", "c.wav"]);
    assert_eq!(m.entries.iter().map(|e| e.fold).collect::<Vec<_>>(), [1, 2, 3]);
    assert!(m.entries[0].path.ends_with(Path::new("fold1/a.wav")));
    assert!(m.entries[2].path.ends_with("c.wav"));
    assert_eq!(
        m.meta()[2],
        ClipMeta {
            clip_id: 2,
            fold: 3,
            class_id: 2
        }
    );
}

#[test]
fn fold_eleven_is_rejected() {
    let dir = setup(&format!("{HEADER}a.wav,1,0,1,1,11,0,x\n"), &["a.wav"]);
    let e = parse_manifest(&dir.path().join("meta.csv"), dir.path()).unwrap_err();
    assert!(matches!(e, Error::Validation(ref m) if m.contains("fold 11")), "{e}");
}

#[test]
fn duplicate_file_is_named() {
    let dir = setup(&format!("{HEADER}a.wav,1,0,1,1,1,0,x\na.wav,1,0,1,1,2,0,x\n"), &["a.wav"]);
    let e = parse_manifest(&dir.path().join("meta.csv"), dir.path()).unwrap_err();
    assert!(matches!(e, Error::Validation(ref m) if m.contains("duplicate file name a.wav")), "{e}");
}

#[test]
fn missing_column_is_a_schema_error() {
    let dir = setup("slice_file_name,classID\na.wav,0\n", &["a.wav"]);
    let e = parse_manifest(&dir.path().join("meta.csv"), dir.path()).unwrap_err();
    assert!(matches!(e, Error::Schema(ref m) if m.contains("fold")), "{e}");
    assert_eq!(e.exit_code(), 1);
}

#[test]
fn missing_files_are_reported_together() {
    let csv = format!("{HEADER}a.wav,1,0,1,1,1,0,x\nb.wav,1,0,1,1,1,0,x\nc.wav,1,0,1,1,1,0,x\n");
    let dir = setup(&csv, &["b.wav"]);
    let e = parse_manifest(&dir.path().join("meta.csv"), dir.path()).unwrap_err();
    let msg = e.to_string();
    assert!(msg.contains("2 audio file(s)") && msg.contains("a.wav") && msg.contains("c.wav"), "{msg}");
}

#[test]
fn inconsistent_class_names_are_rejected() {
    let csv = format!("{HEADER}a.wav,1,0,1,1,1,0,dog_bark\nb.wav,1,0,1,1,1,0,siren\n");
    let dir = setup(&csv, &["a.wav", "b.wav"]);
    assert!(parse_manifest(&dir.path().join("meta.csv"), dir.path()).is_err());
}

#[test]
fn label_tables_in_both_layouts() {
    let dir = setup(&format!("{HEADER}b.wav,1,0,1,1,2,1,x\na.wav,1,0,1,1,1,0,y\n"), &[]);
    let from_meta = read_labels(&dir.path().join("meta.csv")).unwrap();
    assert_eq!(from_meta[0], ClipMeta { clip_id: 0, fold: 1, class_id: 0 });
    let p = dir.path().join("labels.csv");
    fs::write(&p, "clip_id,fold,classID\n7,2,1\n3,1,0\n").unwrap();
    let rows = read_labels(&p).unwrap();
    assert_eq!(rows[0], ClipMeta { clip_id: 7, fold: 2, class_id: 1 });
    fs::write(&p, "clip_id,fold,classID\n7,2,1\n7,1,0\n").unwrap();
    assert!(read_labels(&p).is_err());
    fs::write(&p, "clip_id,classID\n7,1\n").unwrap();
    assert!(matches!(read_labels(&p), Err(Error::Schema(_))));
}
