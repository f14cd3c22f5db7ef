//! Dataset persistence: round trip and the errors raised by damaged files.

use std::fs;
use std::path::Path;

use pftseg::synthdata::{generate_dataset, load_dataset, save_dataset, DatasetConfig};
use pftseg::Error;

fn small() -> DatasetConfig {
    DatasetConfig {
        resolution: 16,
        n_train_labeled: 2,
        n_support: 2,
        n_test: 2,
        n_pretrain: 2,
        ..Default::default()
    }
}

fn saved(dir: &Path) -> pftseg::synthdata::Dataset {
    let ds = generate_dataset(&small()).unwrap();
    save_dataset(dir, &ds).unwrap();
    ds
}

#[test]
fn round_trip_is_bit_exact() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = saved(tmp.path());
    let back = load_dataset(tmp.path()).unwrap();
    assert_eq!(back, ds);
}

#[test]
fn missing_manifest_names_the_producing_command() {
    let tmp = tempfile::tempdir().unwrap();
    match load_dataset(tmp.path()) {
        Err(Error::MissingArtifact { hint, .. }) => assert_eq!(hint, "pftseg gen-data"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn truncated_label_file_is_a_parse_error() {
    let tmp = tempfile::tempdir().unwrap();
    saved(tmp.path());
    let p = tmp.path().join("labels/test-0001.png");
    let bytes = fs::read(&p).unwrap();
    fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
    let err = load_dataset(tmp.path()).unwrap_err();
    assert!(matches!(err, Error::Parse { .. }), "{err}");
    assert!(err.to_string().contains("test-0001.png"), "{err}");
}

#[test]
fn out_of_range_label_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    saved(tmp.path());
    let p = tmp.path().join("labels/support-0000.png");
    let mut img = image::open(&p).unwrap().to_luma8();
    img.put_pixel(3, 4, image::Luma([6]));
    img.save(&p).unwrap();
    let err = load_dataset(tmp.path()).unwrap_err();
    assert!(matches!(err, Error::Validation(_)), "{err}");
    assert!(err.to_string().contains("support-0000.png"), "{err}");
}

#[test]
fn wrong_image_size_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    saved(tmp.path());
    let p = tmp.path().join("images/train-0000.png");
    image::RgbImage::new(8, 8).save(&p).unwrap();
    let err = load_dataset(tmp.path()).unwrap_err();
    assert!(err.to_string().contains("expected 16x16"), "{err}");
}

#[test]
fn corrupt_manifest_is_a_parse_error() {
    let tmp = tempfile::tempdir().unwrap();
    saved(tmp.path());
    fs::write(tmp.path().join("manifest.json"), "{\"format\": 3").unwrap();
    assert!(matches!(load_dataset(tmp.path()).unwrap_err(), Error::Parse { .. }));
}
