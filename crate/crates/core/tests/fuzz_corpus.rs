//! Replays the checked-in fuzz corpus through the same invariants the fuzz
//! targets assert.

use std::fs;
use std::path::PathBuf;

use onesided::{dense_io, moment, sparse_io};

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

#[test]
fn coo_text_seeds() {
    let mut parsed = 0;
    for (_, data) in seeds("coo_text") {
        if let Ok(m) = sparse_io::parse_coo_text(&data[..], None) {
            let mut out = Vec::new();
            sparse_io::write_coo_text(&mut out, m.n_rows(), m.n_cols(), m.triplets()).unwrap();
            assert_eq!(sparse_io::parse_coo_text(&out[..], None).unwrap(), m);
            parsed += 1;
        }
    }
    assert!(parsed >= 2);
}

#[test]
fn movielens_seeds() {
    for (name, data) in seeds("movielens_csv") {
        let (m, ids) = sparse_io::parse_movielens_csv(&data[..]).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!((ids.rows.len(), ids.cols.len()), (m.n_rows(), m.n_cols()));
    }
}

#[test]
fn genotype_seeds() {
    for (name, data) in seeds("genotype_dense") {
        let m = sparse_io::parse_genotype_dense(&data[..]).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert!(m.triplets().iter().all(|t| t.value == 1.0 || t.value == 2.0));
    }
}

#[test]
fn estimate_seeds() {
    for (name, data) in seeds("estimate_coo") {
        let est = moment::parse_estimate(&data[..]).unwrap_or_else(|e| panic!("{name}: {e}"));
        let mut out = Vec::new();
        moment::write_estimate(&mut out, &est).unwrap();
        assert_eq!(moment::parse_estimate(&out[..]).unwrap(), est);
    }
}

#[test]
fn dense_seeds() {
    for (name, data) in seeds("dense_binary") {
        let general = dense_io::parse_dense(&data).ok();
        let square = dense_io::parse_dense_square(&data).ok();
        assert!(general.is_some() || square.is_some(), "{name}");
        if let Some(m) = general {
            let mut out = Vec::new();
            dense_io::write_dense(&mut out, &m).unwrap();
            assert_eq!(out, data);
        }
        if let Some(m) = square {
            let mut out = Vec::new();
            dense_io::write_dense_square(&mut out, &m).unwrap();
            assert_eq!(out, data);
        }
    }
}
