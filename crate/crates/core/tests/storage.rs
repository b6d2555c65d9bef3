use std::fs;

use mspt::clustering::{cache_prototypes, extract_all, load_prototypes, KMeansConfig, PROTOS_MANIFEST_FILE};
use mspt::data::{
    default_scale_names, generate_synthetic, load_dataset, save_dataset, validate_manifest, Dataset, SyntheticConfig,
    MANIFEST_FILE,
};
use mspt::{Error, ErrorKind};

fn dataset(n_bags: usize, seed: u64) -> Dataset {
    generate_synthetic(&SyntheticConfig {
        n_bags,
        d: 5,
        bag_size_range: [12, 20],
        scale_ratio: 4,
        witness_rate: 0.1,
        mu: 2.0,
        sigma: 1.0,
        class_balance: 0.5,
        scale_names: default_scale_names(),
        seed,
    })
    .unwrap()
}

fn empty() -> Dataset {
    let mut ds = dataset(2, 0);
    ds.bags.clear();
    ds
}

fn edit_manifest(dir: &std::path::Path, f: impl FnOnce(&mut serde_json::Value)) {
    let path = dir.join(MANIFEST_FILE);
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    f(&mut v);
    fs::write(&path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
}

#[test]
fn container_round_trip_is_lossless() {
    let ds = dataset(6, 3);
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    assert!(validate_manifest(dir.path()).is_valid());
}

#[test]
fn empty_dataset_round_trips() {
    let ds = empty();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert!(back.is_empty());
    assert_eq!(back, ds);
}

#[test]
fn short_file_is_a_size_mismatch_naming_bag_and_scale() {
    let ds = dataset(2, 4);
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let bag = &ds.bags[1];
    let file = dir.path().join(format!("{}.s10.f32", bag.bag_id));
    let bytes = fs::read(&file).unwrap();
    fs::write(&file, &bytes[..bytes.len() - 4 * ds.d]).unwrap();
    match load_dataset(dir.path()).unwrap_err() {
        e @ Error::SizeMismatch { .. } => {
            assert_eq!(e.kind(), ErrorKind::Data);
            let msg = e.to_string();
            assert!(msg.contains(&bag.bag_id) && msg.contains("s10"), "{msg}");
        }
        e => panic!("unexpected {e}"),
    }
    let report = validate_manifest(dir.path());
    assert_eq!(report.findings.len(), 1);
    assert_eq!(report.findings[0].bag_id.as_deref(), Some(bag.bag_id.as_str()));
    assert_eq!(report.findings[0].scale.as_deref(), Some("s10"));
}

#[test]
fn unknown_version_and_bad_json_are_distinct_errors() {
    let ds = dataset(2, 5);
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    edit_manifest(dir.path(), |v| v["version"] = 99.into());
    assert!(matches!(
        load_dataset(dir.path()),
        Err(Error::Version { found: 99, .. })
    ));
    fs::write(dir.path().join(MANIFEST_FILE), "{ not json").unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Manifest { .. })));
}

#[test]
fn validate_reports_missing_files_and_inconsistent_width() {
    let ds = dataset(4, 6);
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let gone = &ds.bags[0];
    fs::remove_file(dir.path().join(format!("{}.s5.f32", gone.bag_id))).unwrap();
    edit_manifest(dir.path(), |v| {
        for b in [2, 3] {
            for s in v["bags"][b]["scales"].as_array_mut().unwrap() {
                s["cols"] = 7.into();
            }
        }
    });
    let report = validate_manifest(dir.path());
    let missing = report
        .findings
        .iter()
        .find(|f| f.bag_id.as_deref() == Some(gone.bag_id.as_str()))
        .expect("missing file reported");
    assert_eq!(missing.scale.as_deref(), Some("s5"));
    let width = report
        .findings
        .iter()
        .find(|f| f.bag_id.is_none() && f.message.contains(&ds.bags[2].bag_id))
        .expect("inconsistent d reported once");
    assert!(width.message.contains(&ds.bags[3].bag_id));
}

#[test]
fn prototype_cache_round_trip_and_staleness() {
    let ds = dataset(5, 7);
    let cfg = KMeansConfig::new(3, 1);
    let set = extract_all(&ds, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    cache_prototypes(&set, dir.path()).unwrap();
    assert!(dir.path().join(PROTOS_MANIFEST_FILE).exists());
    assert_eq!(load_prototypes(dir.path(), &cfg).unwrap(), set);

    let other = KMeansConfig::new(4, 1);
    let err = load_prototypes(dir.path(), &other).unwrap_err();
    assert!(matches!(err, Error::StaleCache { .. }));
    assert_eq!(err.kind(), ErrorKind::Data);
}

#[test]
fn empty_prototype_cache_loads_cleanly() {
    let ds = empty();
    let cfg = KMeansConfig::new(2, 0);
    let set = extract_all(&ds, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    cache_prototypes(&set, dir.path()).unwrap();
    let back = load_prototypes(dir.path(), &cfg).unwrap();
    assert!(back.bags.is_empty());
    assert_eq!(back, set);
}

#[test]
fn generator_is_pure_and_counts_match() {
    let cfg = SyntheticConfig {
        n_bags: 10,
        d: 3,
        bag_size_range: [64, 64],
        scale_ratio: 4,
        witness_rate: 0.1,
        mu: 1.0,
        sigma: 1.0,
        class_balance: 0.5,
        scale_names: default_scale_names(),
        seed: 42,
    };
    let a = generate_synthetic(&cfg).unwrap();
    assert_eq!(a, generate_synthetic(&cfg).unwrap());
    for b in &a.bags {
        let sizes: Vec<usize> = b.scales.iter().map(|m| m.rows()).collect();
        assert_eq!(sizes, [64, 16, 4]);
        let w = b.witnesses.as_ref().unwrap();
        if b.label == 1 {
            assert!(w.iter().all(|s| !s.is_empty()));
        } else {
            assert!(w.iter().all(|s| s.is_empty()));
        }
    }
    let bad = SyntheticConfig { sigma: 0.0, ..cfg };
    assert_eq!(generate_synthetic(&bad).unwrap_err().kind(), ErrorKind::Config);
}
