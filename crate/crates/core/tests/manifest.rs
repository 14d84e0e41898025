use std::fs;
use std::path::Path;

use molclip::data::{load_manifest, load_manifest_with, write_frames, DataError, MANIFEST_HEADER};
use molclip::numerics::Tensor;
use molclip::smiles::SmilesError;

fn frames(value: f64) -> Tensor {
    Tensor::full(&[4, 3], value)
}

fn write(dir: &Path, rows: &[&str]) {
    fs::create_dir_all(dir.join("frames")).unwrap();
    for i in 0..rows.len() {
        write_frames(&dir.join(format!("frames/s{i}.bin")), &frames(i as f64)).unwrap();
    }
    let mut text = format!("{MANIFEST_HEADER}\n");
    for (i, r) in rows.iter().enumerate() {
        text.push_str(&format!("s{i},{r},frames/s{i}.bin\n"));
    }
    fs::write(dir.join("manifest.csv"), text).unwrap();
}

#[test]
fn three_records_load() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), &["aspirin,CC(=O)Oc1ccccc1C(=O)O,0,0", "aspirin,CC(=O)Oc1ccccc1C(=O)O,0,0", "ethanol,OCC,1,1"]);
    let samples = load_manifest(dir.path()).unwrap();
    assert_eq!(samples.len(), 3);
    assert_eq!(samples[0].smiles, samples[1].smiles);
    // stored canonically
    assert_eq!(samples[2].smiles, molclip::smiles::canonicalize_str("CCO").unwrap());
    assert_eq!(samples[2].frames, frames(2.0));
    assert_eq!((samples[2].drug_label, samples[2].moa_label), (1, 1));
}

#[test]
fn manifest_path_can_be_the_file() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), &["a,CCO,0,0"]);
    assert_eq!(load_manifest(&dir.path().join("manifest.csv")).unwrap().len(), 1);
}

#[test]
fn conflicting_drug_records() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), &["a,CCO,0,0", "a,CCN,0,0"]);
    assert!(matches!(load_manifest(dir.path()), Err(DataError::InconsistentDrug(d)) if d == "a"));

    write(dir.path(), &["a,CCO,0,0", "a,CCO,0,1"]);
    assert!(matches!(load_manifest(dir.path()), Err(DataError::InconsistentDrug(_))));
}

#[test]
fn bad_smiles_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), &["a,CCO,0,0", "b,C(C,1,1"]);
    match load_manifest(dir.path()) {
        Err(DataError::Smiles { line, detail }) => {
            assert_eq!(line, 3);
            assert!(matches!(detail, SmilesError::UnclosedBranch { .. }));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn missing_frame_file() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), &["a,CCO,0,0"]);
    fs::remove_file(dir.path().join("frames/s0.bin")).unwrap();
    assert!(matches!(load_manifest(dir.path()), Err(DataError::MissingFeatureFile(_))));
}

#[test]
fn schema_errors() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), &["a,CCO,x,0"]);
    assert!(matches!(load_manifest(dir.path()), Err(DataError::Schema { line: 2, .. })));
    fs::write(dir.path().join("manifest.csv"), "s0,a,CCO,0\n").unwrap();
    assert!(matches!(load_manifest(dir.path()), Err(DataError::Schema { line: 1, .. })));
}

#[test]
fn stereo_is_rejected_or_skipped() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), &["a,CCO,0,0", "b,C[C@H](N)O,1,1"]);
    match load_manifest(dir.path()) {
        Err(DataError::Smiles { detail, .. }) => assert!(matches!(detail, SmilesError::StereoUnsupported { .. })),
        other => panic!("{other:?}"),
    }
    let report = load_manifest_with(dir.path(), true).unwrap();
    assert_eq!(report.samples.len(), 1);
    assert_eq!(report.skipped, vec![3]);
}

#[test]
fn frame_width_must_agree() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), &["a,CCO,0,0", "b,CCN,1,1"]);
    write_frames(&dir.path().join("frames/s1.bin"), &Tensor::zeros(&[4, 5])).unwrap();
    assert!(matches!(
        load_manifest(dir.path()),
        Err(DataError::FrameDimMismatch { expected: 3, got: 5, .. })
    ));
}
