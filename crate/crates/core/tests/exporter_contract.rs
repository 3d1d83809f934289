//! The embedding exporter writes bag files and a manifest without linking
//! this crate; these tests pin both formats byte-for-byte.

use std::path::Path;

use bagforge::datastore::{decode_bag, encode_bag, read_bag_file, Manifest, Split};
use bagforge::numcore::Tensor;
use bagforge::{Bag, Error};

fn hand_encoded(core_id: &str, label: u32, k: u32, rows: &[Vec<f32>]) -> Vec<u8> {
    let mut b = b"MILB".to_vec();
    for v in [1, rows[0].len() as u32, rows.len() as u32, k, label, core_id.len() as u32] {
        b.extend_from_slice(&v.to_le_bytes());
    }
    b.extend_from_slice(core_id.as_bytes());
    for r in rows {
        for v in r {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
    b
}

#[test]
fn bag_layout_matches_writer() {
    let rows = vec![vec![0.5f32, -1.25, 3.0], vec![7.0, 0.0, -0.125]];
    let bytes = hand_encoded("TMA3-B07", 2, 4, &rows);
    let (header, bag) = decode_bag(&bytes, Path::new("x.bag")).unwrap();
    assert_eq!((header.d, header.n, header.k, header.label), (3, 2, 4, 2));
    assert_eq!(bag.core_id, "TMA3-B07");
    assert_eq!(bag.instances.row(1), &[7.0, 0.0, -0.125]);

    let ours = encode_bag(&Bag::new("TMA3-B07", 2, Tensor::from_rows(&rows).unwrap()).unwrap(), 4).unwrap();
    assert_eq!(ours, bytes);
}

#[test]
fn header_fields_are_validated() {
    let rows = vec![vec![1.0f32, 2.0]];
    let mut bytes = hand_encoded("c", 5, 4, &rows);
    assert!(matches!(decode_bag(&bytes, Path::new("x")), Err(Error::Format { .. }) | Err(Error::Domain(_))));
    bytes = hand_encoded("c", 1, 4, &rows);
    bytes[4] = 9;
    match decode_bag(&bytes, Path::new("x")) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset, 4),
        other => panic!("{other:?}"),
    }
    let nan = hand_encoded("c", 1, 4, &[vec![f32::NAN, 0.0]]);
    assert!(decode_bag(&nan, Path::new("x")).is_err());
}

const MANIFEST: &str = r#"{
  "dataset_id": "tma-export-2024",
  "d": 3,
  "k": 4,
  "class_names": ["EWING", "CIC", "BCOR", "other"],
  "entries": [
    {"core_id": "TMA3-B07", "path": "bags/TMA3-B07.bag", "label": 2, "split": "train", "tma_id": "TMA3"},
    {"core_id": "TMA1-A01", "path": "bags/TMA1-A01.bag", "label": 0, "split": "unassigned", "tma_id": "TMA1"}
  ]
}"#;

#[test]
fn exporter_manifest_loads_with_bags() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::create_dir(tmp.path().join("bags")).unwrap();
    std::fs::write(
        tmp.path().join("bags/TMA3-B07.bag"),
        hand_encoded("TMA3-B07", 2, 4, &[vec![1.0, 2.0, 3.0]]),
    )
    .unwrap();
    std::fs::write(
        tmp.path().join("bags/TMA1-A01.bag"),
        hand_encoded("TMA1-A01", 0, 4, &[vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0]]),
    )
    .unwrap();
    std::fs::write(tmp.path().join("manifest.json"), MANIFEST).unwrap();

    let m = Manifest::load(&tmp.path().join("manifest.json")).unwrap();
    assert_eq!(m.class_counts(None), vec![1, 0, 1, 0]);
    m.check_paths(tmp.path()).unwrap();
    let train = m.load_bags(tmp.path(), Split::Train).unwrap();
    assert_eq!(train.len(), 1);
    assert_eq!(train[0].label, 2);
    let rest = m.load_bags(tmp.path(), Split::Unassigned).unwrap();
    assert_eq!(rest[0].len(), 2);

    let (_, bag) = read_bag_file(&tmp.path().join("bags/TMA1-A01.bag")).unwrap();
    assert_eq!(bag.dim(), m.d as usize);
}

#[test]
fn manifest_and_bag_must_agree() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::create_dir(tmp.path().join("bags")).unwrap();
    std::fs::write(
        tmp.path().join("bags/TMA3-B07.bag"),
        hand_encoded("TMA3-B07", 1, 4, &[vec![1.0, 2.0, 3.0]]),
    )
    .unwrap();
    std::fs::write(tmp.path().join("manifest.json"), MANIFEST).unwrap();
    let m = Manifest::load(&tmp.path().join("manifest.json")).unwrap();
    let err = m.load_bags(tmp.path(), Split::Train).unwrap_err();
    assert!(err.to_string().contains("label"), "{err}");
}

#[test]
fn malformed_manifests_are_rejected() {
    let p = Path::new("manifest.json");
    let extra = MANIFEST.replacen("\"d\": 3,", "\"d\": 3, \"encoder\": \"plip\",", 1);
    assert!(matches!(Manifest::from_json(&extra, p), Err(Error::Format { .. })));
    let bad_label = MANIFEST.replacen("\"label\": 2", "\"label\": 4", 1);
    assert!(matches!(Manifest::from_json(&bad_label, p), Err(Error::Domain(_))));
    let dup = MANIFEST.replacen("TMA1-A01\", \"path\"", "TMA3-B07\", \"path\"", 1);
    assert!(matches!(Manifest::from_json(&dup, p), Err(Error::Domain(_))));
    let bad_split = MANIFEST.replacen("\"train\"", "\"holdout\"", 1);
    assert!(Manifest::from_json(&bad_split, p).is_err());
}
