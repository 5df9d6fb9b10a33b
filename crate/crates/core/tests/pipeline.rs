use proptest::prelude::*;

use uav_intent::pipeline::{
    generate_dataset, leaked_ids, read_dataset, run_experiment, split_dataset, write_dataset, FeatureConfig,
    OracleTrainer, PipelineConfig, SplitConfig,
};
use uav_intent::IntentLabel;

fn small_config() -> PipelineConfig {
    let mut cfg = PipelineConfig {
        name: "integration".into(),
        master_seed: 11,
        features: FeatureConfig {
            window: 50,
            overlap: 0.9,
            max_train_windows_per_trajectory: Some(20),
        },
        splits: SplitConfig {
            n_splits: 3,
            validation_fraction: 0.25,
        },
        ..PipelineConfig::default()
    };
    for count in cfg.counts.values_mut() {
        *count = 4;
    }
    cfg
}

#[test]
fn oracle_experiment_scores_perfectly() {
    let cfg = small_config();
    let dataset = generate_dataset(&cfg).unwrap();
    assert_eq!(dataset.records.len(), 12);
    let outcome = run_experiment(&cfg, &dataset, &OracleTrainer).unwrap();
    let report = &outcome.report;
    assert_eq!(report.accuracies.len(), 3);
    assert!(report.accuracies.iter().all(|a| *a == 1.0));
    assert_eq!(report.std_accuracy, 0.0);
    assert_eq!(report.expected_misclassification_cost, 0.0);
    for split in &outcome.splits {
        assert!(leaked_ids(split).is_empty());
    }
}

#[test]
fn dataset_survives_a_disk_round_trip() {
    let cfg = small_config();
    let dataset = generate_dataset(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &cfg, &dataset).unwrap();
    let (stored_cfg, stored) = read_dataset(dir.path()).unwrap();
    assert_eq!(stored_cfg, cfg);
    assert_eq!(stored.records.len(), dataset.records.len());
    let a = run_experiment(&cfg, &dataset, &OracleTrainer).unwrap().report;
    let b = run_experiment(&stored_cfg, &stored, &OracleTrainer).unwrap().report;
    assert_eq!(a, b);
}

#[test]
fn config_toml_round_trip() {
    let cfg = PipelineConfig::reference_2d();
    let text = cfg.to_toml().unwrap();
    assert_eq!(PipelineConfig::from_toml(&text).unwrap(), cfg);
}

#[test]
fn config_rejects_bad_dimensionality() {
    let cfg = PipelineConfig {
        dimensionality: 4,
        ..PipelineConfig::default()
    };
    assert!(cfg.validate().is_err());
}

#[test]
fn direct_attacks_intrude_and_harmless_flights_do_not() {
    let dataset = generate_dataset(&small_config()).unwrap();
    let freq = dataset.intrusion_frequencies();
    assert_eq!(freq[&IntentLabel::direct_attack()], 1.0);
    assert_eq!(freq[&IntentLabel::harmless()], 0.0);
}

proptest! {
    #[test]
    fn splits_are_stratified_and_disjoint(
        sizes in prop::collection::vec(2usize..30, 1..4),
        n_splits in 1usize..5,
        fraction in 0.05f64..0.6,
        seed: u64,
    ) {
        let items: Vec<(u64, IntentLabel)> = sizes
            .iter()
            .enumerate()
            .flat_map(|(c, n)| (0..*n).map(move |k| ((c * 1000 + k) as u64, IntentLabel::new(format!("c{c}")))))
            .collect();
        let splits = split_dataset(&items, n_splits, fraction, seed).unwrap();
        prop_assert_eq!(splits.len(), n_splits);
        for split in &splits {
            prop_assert!(leaked_ids(split).is_empty());
            prop_assert_eq!(split.train.len() + split.validation.len(), items.len());
            for (c, n) in sizes.iter().enumerate() {
                let in_val = split.validation.iter().filter(|id| **id / 1000 == c as u64).count();
                prop_assert!(in_val >= 1 && in_val < *n);
            }
        }
        prop_assert_eq!(split_dataset(&items, n_splits, fraction, seed).unwrap(), splits);
    }
}
