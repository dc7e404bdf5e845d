use std::fs;
use std::path::{Path, PathBuf};

use sap_core::store::{
    decode_tensor, encode_tensor, load_corpus, read_bundle, read_qrels, read_tensor, write_bundle,
    write_qrels, AttentionLayout, AttentionStack, DocumentBundleOf, Qrels, RowSumPolicy,
};
use sap_core::synth::{gen_corpus, write_corpus, SynthConfig};
use sap_core::{DocumentBundle, Error, Tensor};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[test]
fn golden_matrix_decodes() {
    let t = read_tensor(fixture("matrix_2x3.sapt")).unwrap();
    assert_eq!(t.shape(), &[2, 3]);
    assert_eq!(t.data(), &[1.0, -2.0, 0.5, 0.0, 3.25, -0.125]);
}

#[test]
fn encoder_reproduces_golden_bytes() {
    for (name, shape, data) in [
        ("matrix_2x3.sapt", vec![2, 3], vec![1.0, -2.0, 0.5, 0.0, 3.25, -0.125]),
        ("empty_0x4.sapt", vec![0, 4], vec![]),
        ("scalar.sapt", vec![], vec![7.5]),
    ] {
        let golden = fs::read(fixture(name)).unwrap();
        let t = Tensor::new(shape, data).unwrap();
        assert_eq!(encode_tensor(&t), golden, "{name}");
        assert_eq!(decode_tensor(&golden, Path::new(name)).unwrap(), t);
    }
}

#[test]
fn every_truncation_is_rejected() {
    let golden = fs::read(fixture("matrix_2x3.sapt")).unwrap();
    for len in 0..golden.len() {
        assert!(decode_tensor(&golden[..len], Path::new("cut")).is_err(), "length {len} accepted");
    }
}

#[test]
fn flipped_magic_and_version_are_rejected() {
    let golden = fs::read(fixture("matrix_2x3.sapt")).unwrap();
    let mut bad = golden.clone();
    bad[0] = b'X';
    assert!(matches!(decode_tensor(&bad, Path::new("m")), Err(Error::BadMagic { .. })));
    let mut bad = golden.clone();
    bad[4] = 2;
    assert!(matches!(decode_tensor(&bad, Path::new("v")), Err(Error::Unsupported(_))));
    let mut bad = golden;
    // payload value 1.0 -> +inf (0x7f800000)
    let at = bad.len() - 24;
    bad[at..at + 4].copy_from_slice(&f32::INFINITY.to_le_bytes());
    assert!(matches!(decode_tensor(&bad, Path::new("n")), Err(Error::NonFinite { .. })));
}

fn small_bundle() -> DocumentBundle {
    let c = gen_corpus(&SynthConfig {
        num_docs: 1,
        num_queries: 1,
        patches: 9,
        dim: 4,
        layers: 5,
        heads: 2,
        seq_len: 12,
        anchors_per_doc: 2,
        ..SynthConfig::default()
    })
    .unwrap();
    c.documents.into_iter().next().unwrap()
}

#[test]
fn bundle_roundtrip_both_layouts() {
    let b = small_bundle();
    for layout in [AttentionLayout::Stacked, AttentionLayout::PerLayer] {
        let dir = tempfile::tempdir().unwrap();
        let path = write_bundle(&b, dir.path(), layout).unwrap();
        assert_eq!(read_bundle(&path, RowSumPolicy::Strict).unwrap(), b);
    }
}

#[test]
fn absent_layers_survive_per_layer_layout() {
    let b = small_bundle();
    let layers = (1..=5)
        .map(|l| (l == 3 || l == 5).then(|| b.attention.layer(l).unwrap().to_vec()))
        .collect();
    let partial = DocumentBundleOf {
        attention: AttentionStack::from_layers(2, 12, layers).unwrap(),
        ..b
    };
    let dir = tempfile::tempdir().unwrap();
    let path = write_bundle(&partial, dir.path(), AttentionLayout::PerLayer).unwrap();
    let back = read_bundle(&path, RowSumPolicy::Strict).unwrap();
    assert_eq!(back.attention.available_layers(), vec![3, 5]);
    assert!(matches!(back.attention.layer(1), Err(Error::MissingLayer { layer: 1, .. })));
}

#[test]
fn deleting_any_manifest_field_is_rejected() {
    let b = small_bundle();
    let dir = tempfile::tempdir().unwrap();
    let path = write_bundle(&b, dir.path(), AttentionLayout::Stacked).unwrap();
    let original: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    let fields: Vec<String> = original.as_object().unwrap().keys().cloned().collect();
    assert_eq!(fields.len(), 10);
    for field in fields {
        let mut v = original.clone();
        v.as_object_mut().unwrap().remove(&field);
        fs::write(&path, serde_json::to_string(&v).unwrap()).unwrap();
        assert!(read_bundle(&path, RowSumPolicy::Warn).is_err(), "accepted manifest without {field}");
    }
}

#[test]
fn inconsistent_manifest_values_are_rejected() {
    let b = small_bundle();
    let dir = tempfile::tempdir().unwrap();
    let path = write_bundle(&b, dir.path(), AttentionLayout::Stacked).unwrap();
    let original: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    let edits: Vec<(&str, serde_json::Value)> = vec![
        ("patch_count", 8.into()),
        ("embed_dim", 5.into()),
        ("seq_len", 13.into()),
        ("num_heads", 3.into()),
        ("eos_index", 4.into()),
        ("visual_indices", serde_json::json!([0, 1, 2, 3, 4, 5, 6, 7, 20])),
    ];
    for (field, value) in edits {
        let mut v = original.clone();
        v[field] = value;
        fs::write(&path, serde_json::to_string(&v).unwrap()).unwrap();
        assert!(read_bundle(&path, RowSumPolicy::Warn).is_err(), "accepted bad {field}");
    }
}

#[test]
fn qrels_file_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let mut q = Qrels::new();
    q.insert("q2", "d9", 0).unwrap();
    q.insert("q1", "d3", 2).unwrap();
    q.insert("q1", "d1", 1).unwrap();
    let path = dir.path().join("qrels.tsv");
    write_qrels(&q, &path).unwrap();
    assert_eq!(fs::read_to_string(&path).unwrap(), "q1\td1\t1\nq1\td3\t2\nq2\td9\t0\n");
    assert_eq!(read_qrels(&path).unwrap(), q);
}

#[test]
fn corpus_rejects_unknown_qrels_document() {
    let dir = tempfile::tempdir().unwrap();
    let c = gen_corpus(&SynthConfig {
        num_docs: 3,
        num_queries: 2,
        patches: 9,
        dim: 4,
        layers: 3,
        heads: 1,
        seq_len: 10,
        anchors_per_doc: 2,
        ..SynthConfig::default()
    })
    .unwrap();
    let manifest = write_corpus(&c, dir.path(), AttentionLayout::Stacked).unwrap();
    assert_eq!(load_corpus(&manifest, RowSumPolicy::Strict).unwrap().documents.len(), 3);
    let qrels = dir.path().join("qrels.tsv");
    let mut text = fs::read_to_string(&qrels).unwrap();
    text.push_str("q0000\tnope\t1\n");
    fs::write(&qrels, text).unwrap();
    assert!(load_corpus(&manifest, RowSumPolicy::Strict).is_err());
}
