use std::fs;

use lmcl::dataset::{load_csv, load_pair, save_csv};
use lmcl::LmclError;
use lmcl_core::data::{gaussian_blobs, BlobSpec, Split};

#[test]
fn csv_round_trip_is_exact() {
    let spec = BlobSpec {
        classes: 3,
        per_class: 7,
        test_per_class: 2,
        dim: 4,
        spread: 0.5,
    };
    let data = gaussian_blobs(&spec, 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.csv");
    save_csv(&data.train, &path).unwrap();
    let back = load_csv(&path, Split::Train).unwrap();
    assert_eq!(back.dim(), 4);
    assert_eq!(back.labels(), data.train.labels());
    assert!(back
        .features()
        .iter()
        .zip(data.train.features())
        .all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn headerless_file_with_label_gaps_is_remapped() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    fs::write(&path, "0.5,1.0,3\n-1,2,7\n0,0,3\n").unwrap();
    let d = load_csv(&path, Split::Train).unwrap();
    assert_eq!(d.len(), 3);
    assert_eq!(d.classes(), 2);
    assert_eq!(d.labels(), &[0, 1, 0]);
    assert_eq!(d.row(1), &[-1.0, 2.0]);
}

#[test]
fn errors_carry_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("a,b,label\n1,2,0\n1,x,1\n", 3, "not a number"),
        ("1,2,0\n1,2\n", 2, "columns"),
        ("1,2,0\n1,2,-1\n", 2, "label"),
        ("1,2,0.5\n", 1, "label"),
    ];
    for (i, (text, line, needle)) in cases.iter().enumerate() {
        let path = dir.path().join(format!("bad{i}.csv"));
        fs::write(&path, text).unwrap();
        match load_csv(&path, Split::Train) {
            Err(LmclError::Parse { line: l, detail, .. }) => {
                assert_eq!(l, *line, "{text:?}: {detail}");
                assert!(detail.contains(needle), "{text:?}: {detail}");
            }
            other => panic!("{text:?}: {other:?}"),
        }
    }
}

#[test]
fn empty_and_missing_files_fail() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.csv");
    fs::write(&empty, "").unwrap();
    assert!(matches!(load_csv(&empty, Split::Train), Err(LmclError::Parse { .. })));
    let header_only = dir.path().join("header.csv");
    fs::write(&header_only, "x0,label\n").unwrap();
    assert!(matches!(
        load_csv(&header_only, Split::Train),
        Err(LmclError::Parse { .. })
    ));
    assert!(matches!(
        load_csv(&dir.path().join("nope.csv"), Split::Train),
        Err(LmclError::Io { .. })
    ));
}

#[test]
fn mismatched_pair_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    fs::write(&a, "1,2,0\n3,4,1\n").unwrap();
    fs::write(&b, "1,0\n3,1\n").unwrap();
    assert!(matches!(load_pair(&a, &b), Err(LmclError::Config(_))));
}
