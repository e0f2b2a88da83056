mod common;

use std::fs;
use std::path::Path;

use xald::data::{generate_dataset, generate_sample, load_dataset, read_manifest, write_dataset, DatasetManifest};
use xald::Error;

fn dir_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn generation_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    write_dataset(&a, &generate_dataset(24, 32, 6, 3, 11).unwrap()).unwrap();
    write_dataset(&b, &generate_dataset(24, 32, 6, 3, 11).unwrap()).unwrap();
    let (ca, cb) = (dir_contents(&a), dir_contents(&b));
    assert_eq!(ca.len(), 10);
    assert_eq!(ca, cb);
    write_dataset(&b, &generate_dataset(24, 32, 6, 3, 12).unwrap()).unwrap();
    assert_ne!(ca, dir_contents(&b));
}

#[test]
fn datasets_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = generate_dataset(16, 20, 5, 2, 3).unwrap();
    write_dataset(tmp.path(), &ds).unwrap();
    let back = load_dataset(tmp.path()).unwrap();
    assert_eq!(back, ds);
    assert_eq!(back.manifest.labeled_indices.len(), 1);
    assert_eq!(back.manifest.unlabeled_indices().len(), 4);
}

#[test]
fn every_mask_holds_all_classes_and_images_stay_in_range() {
    let ds = generate_dataset(32, 32, 20, 10, 0).unwrap();
    for s in ds.train.iter().chain(&ds.eval) {
        for c in 0..3u8 {
            assert!(s.mask.iter().filter(|&&l| l == c).count() >= 9);
        }
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn masks_follow_the_drawn_shapes() {
    let mut rng = common::rng(5);
    for _ in 0..20 {
        let (s, shapes) = generate_sample(&mut rng, 32, 32).unwrap();
        let (top, left, rh, rw) = shapes.rect;
        for y in 0..32 {
            for x in 0..32 {
                let expected = if shapes.ellipse.contains(y, x) {
                    1
                } else if (top..top + rh).contains(&y) && (left..left + rw).contains(&x) {
                    2
                } else {
                    0
                };
                assert_eq!(s.mask[y * 32 + x], expected, "({y}, {x})");
            }
        }
    }
}

#[test]
fn corrupted_magic_is_a_format_error() {
    let tmp = tempfile::tempdir().unwrap();
    write_dataset(tmp.path(), &generate_dataset(16, 16, 4, 1, 0).unwrap()).unwrap();
    let p = DatasetManifest::sample_path(tmp.path(), 2);
    let mut bytes = fs::read(&p).unwrap();
    bytes[0] = b'Y';
    fs::write(&p, bytes).unwrap();
    match load_dataset(tmp.path()) {
        Err(Error::Format { path, offset, .. }) => {
            assert_eq!(path, p);
            assert_eq!(offset, 0);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn bad_labels_and_truncation_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    write_dataset(tmp.path(), &generate_dataset(16, 16, 4, 1, 0).unwrap()).unwrap();
    let p = DatasetManifest::sample_path(tmp.path(), 0);
    let good = fs::read(&p).unwrap();
    let mut bad = good.clone();
    *bad.last_mut().unwrap() = 7;
    fs::write(&p, &bad).unwrap();
    assert!(matches!(load_dataset(tmp.path()), Err(Error::Format { .. })));
    fs::write(&p, &good[..good.len() - 3]).unwrap();
    assert!(matches!(load_dataset(tmp.path()), Err(Error::Format { .. })));
}

#[test]
fn manifest_promising_more_files_than_exist_fails() {
    let tmp = tempfile::tempdir().unwrap();
    write_dataset(tmp.path(), &generate_dataset(16, 16, 4, 1, 0).unwrap()).unwrap();
    let mut m = read_manifest(tmp.path()).unwrap();
    m.n_train = 9;
    fs::write(tmp.path().join("manifest.json"), serde_json::to_string(&m).unwrap()).unwrap();
    assert!(matches!(load_dataset(tmp.path()), Err(Error::Format { .. })));
}

#[test]
fn missing_directory_and_bad_geometry() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(matches!(load_dataset(&tmp.path().join("nope")), Err(Error::MissingDataset(_))));
    assert!(matches!(generate_dataset(15, 16, 4, 1, 0), Err(Error::InvalidConfig(_))));
    assert!(matches!(generate_dataset(16, 16, 3, 1, 0), Err(Error::InvalidConfig(_))));
}
