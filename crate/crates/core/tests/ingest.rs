//! Ingestion of the public Adult and German credit files (see
//! `scripts/fetch_data.py`). Skipped with a message if the files are absent.

use std::path::{Path, PathBuf};

use advrw::data::{dropped_rows, load_csv, multi_group_prepare, split, Schema};

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn load(name: &str, schema: &str) -> Option<advrw::data::Dataset> {
    let csv = root().join("data").join(name);
    if !csv.exists() {
        eprintln!("skipping: {} not present", csv.display());
        return None;
    }
    let schema = Schema::from_path(&root().join("configs/schemas").join(schema)).unwrap();
    Some(load_csv(&csv, &schema).unwrap())
}

#[test]
fn adult_row_count_and_majority() {
    let Some(d) = load("adult.csv", "adult.toml") else { return };
    let (missing, malformed) = dropped_rows(&d).unwrap();
    assert_eq!(d.len() + missing + malformed, 48_842);
    assert_eq!(malformed, 0);
    assert_eq!(d.len(), 45_222);
    let (n_p, n_u) = d.group_sizes();
    assert!(n_p > 2 * n_u, "{n_p} vs {n_u}");
    assert_eq!(d.level_names, ["Female", "Male"]);
    assert!(d.check_groups().is_ok());
    // men earn >50K at a much higher rate in this file
    assert!(d.positive_rate(1) > 2.0 * d.positive_rate(0));
    let cont = ["age", "education-num", "capital-gain", "capital-loss", "hours-per-week"];
    for c in cont {
        assert!(d.feature_names.iter().any(|f| f == c), "{c}");
    }
    assert!(!d.feature_names.iter().any(|f| f.starts_with("fnlwgt")));
    assert!(d.features.iter().all(|v| v.is_finite()));
}

#[test]
fn adult_split_shares() {
    let Some(d) = load("adult.csv", "adult.toml") else { return };
    let (train, test) = split(&d, 0.2, 0).unwrap();
    assert_eq!(train.len() + test.len(), d.len());
    assert!((test.len() as f64 / d.len() as f64 - 0.2).abs() < 1e-3);
    assert_eq!(train.dim(), test.dim());
}

#[test]
fn adult_race_views() {
    let Some(d) = load("adult.csv", "adult_race.toml") else { return };
    assert_eq!(d.level_names.len(), 5);
    let views = multi_group_prepare(&d, "Asian-Pac-Islander").unwrap();
    assert_eq!(views.len(), 4);
    let white = views.iter().find(|v| v.name == "White").unwrap();
    assert!(white.members.len() > 10 * white.reference.len());
}

#[test]
fn german_ingest() {
    let Some(d) = load("german.csv", "german.toml") else { return };
    assert_eq!(d.len(), 1000);
    assert_eq!(d.group_sizes(), (690, 310));
    assert_eq!(d.labels.iter().filter(|&&y| y == 1).count(), 700);
}
