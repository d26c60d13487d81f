//! Dataset persistence, integrity checking and the style structure of the generator.

use std::fs;

use stylepro::config::ExperimentConfig;
use stylepro::data::{generate_dataset, load_dataset, read_manifest, save_dataset, save_dataset_with, Dataset};

fn dataset() -> Dataset {
    let mut cfg = ExperimentConfig::default();
    cfg.data.samples_per_cell = 3;
    generate_dataset(&cfg.dataset_spec().unwrap()).unwrap()
}

#[test]
fn round_trip_is_bit_exact_and_keeps_provenance() {
    let ds = dataset();
    let dir = tempfile::tempdir().unwrap();
    save_dataset_with(&ds, dir.path(), serde_json::json!({ "seed": 200 })).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.spec, ds.spec);
    assert_eq!(back.samples.len(), ds.samples.len());
    for (a, b) in back.samples.iter().zip(&ds.samples) {
        assert!(a.image.bit_eq(&b.image));
        assert_eq!((a.class_id, a.domain_id, a.index), (b.class_id, b.domain_id, b.index));
    }
    assert_eq!(read_manifest(dir.path()).unwrap().provenance["seed"], 200);
}

#[test]
fn corrupted_or_missing_files_are_integrity_errors() {
    let ds = dataset();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let sample = dir.path().join("domain_1/class_2/sample_0.bin");

    let mut bytes = fs::read(&sample).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x01;
    fs::write(&sample, &bytes).unwrap();
    let err = load_dataset(dir.path()).unwrap_err();
    assert_eq!(err.category(), "integrity");
    assert!(err.to_string().contains("sample_0.bin"), "{err}");

    fs::remove_file(&sample).unwrap();
    assert_eq!(load_dataset(dir.path()).unwrap_err().category(), "integrity");

    fs::write(dir.path().join("manifest.json"), "{ not json").unwrap();
    assert_eq!(load_dataset(dir.path()).unwrap_err().category(), "integrity");
}

#[test]
fn missing_manifest_and_future_versions() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(load_dataset(dir.path()).unwrap_err().category(), "missing-prerequisite");

    save_dataset(&dataset(), dir.path()).unwrap();
    let path = dir.path().join("manifest.json");
    let mut manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    manifest["format_version"] = serde_json::json!(99);
    fs::write(&path, manifest.to_string()).unwrap();
    assert_eq!(load_dataset(dir.path()).unwrap_err().category(), "compatibility");
}

/// Per-channel image means: the domain shift should dominate the class signal
/// in first-order colour statistics, which is what the style shift acts on.
#[test]
fn domains_differ_in_colour_statistics_more_than_classes() {
    let ds = dataset();
    let channels = ds.spec.channels;
    let mean_of = |idx: &[usize]| -> Vec<f64> {
        let mut m = vec![0.0; channels];
        for &i in idx {
            let d = ds.samples[i].image.data();
            let per = d.len() / channels;
            for (c, v) in m.iter_mut().enumerate() {
                *v += d[c * per..(c + 1) * per].iter().sum::<f64>() / per as f64;
            }
        }
        m.iter().map(|v| v / idx.len() as f64).collect()
    };
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let domains = ds.domain_ids();
    let classes = ds.class_ids();
    let by_domain: Vec<Vec<f64>> = domains
        .iter()
        .map(|&d| mean_of(&(0..ds.samples.len()).filter(|&i| ds.samples[i].domain_id == d).collect::<Vec<_>>()))
        .collect();
    let by_class: Vec<Vec<f64>> = classes
        .iter()
        .map(|&c| mean_of(&(0..ds.samples.len()).filter(|&i| ds.samples[i].class_id == c).collect::<Vec<_>>()))
        .collect();
    let min_domain_gap = (0..domains.len())
        .flat_map(|a| (a + 1..domains.len()).map(move |b| (a, b)))
        .map(|(a, b)| dist(&by_domain[a], &by_domain[b]))
        .fold(f64::INFINITY, f64::min);
    let max_class_gap = (0..classes.len())
        .flat_map(|a| (a + 1..classes.len()).map(move |b| (a, b)))
        .map(|(a, b)| dist(&by_class[a], &by_class[b]))
        .fold(0.0, f64::max);
    assert!(min_domain_gap > max_class_gap, "domain gap {min_domain_gap} vs class gap {max_class_gap}");
}
