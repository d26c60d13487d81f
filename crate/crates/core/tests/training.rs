//! Pre-training and tuning contracts on a shortened schedule.

use stylepro::checkpoint::Checkpoint;
use stylepro::config::ExperimentConfig;
use stylepro::data::{generate_dataset, make_split, Dataset};
use stylepro::encoders::Backbone;
use stylepro::eval::accuracy_with;
use stylepro::train::{pretrain, PretrainConfig, TuneConfig, TuneState};
use stylepro::verify::{tiny_task, tiny_tune_config};

fn short_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data.pretrain_samples_per_cell = 16;
    cfg.pretrain.epochs = 8;
    cfg
}

fn frozen_zero_shot(backbone: &Backbone, ds: &Dataset, domains: &[usize]) -> f64 {
    let model = stylepro::encoders::DualEncoder {
        backbone: backbone.clone(),
        prompts: stylepro::encoders::PromptSet::zeros(&backbone.config),
        bank: stylepro::style::StyleBank::from_styles(&[stylepro::style::StyleStats::new(
            stylepro::Tensor::zeros(&[backbone.config.token_dim]),
            stylepro::Tensor::full(&[backbone.config.token_dim], 1.0),
        )
        .unwrap()])
        .unwrap(),
    };
    let idx: Vec<usize> = (0..ds.samples.len()).filter(|&i| domains.contains(&ds.samples[i].domain_id)).collect();
    accuracy_with(&model, ds, &idx, &ds.class_ids(), false).unwrap()
}

#[test]
fn pretraining_starts_near_uniform_and_beats_chance() {
    let cfg = short_config();
    let pre = generate_dataset(&cfg.pretrain_dataset_spec().unwrap()).unwrap();
    // Held-out: the separately seeded tuning dataset.
    let held_out = generate_dataset(&cfg.dataset_spec().unwrap()).unwrap();
    let classes = pre.class_ids().len();
    let chance = 100.0 / classes as f64;
    for seed in 0..5 {
        let pc = PretrainConfig { seed, ..cfg.pretrain.clone() };
        let out = pretrain(&pc, &cfg.encoder, &pre, &cfg.split.source_domains, |_| {}).unwrap();
        let first = out.steps[0].loss;
        // Near-uniform similarities at random init: one class per batch row.
        let uniform = (classes as f64).ln();
        assert!((first - uniform).abs() < 0.5, "seed {seed}: step-0 loss {first} vs ln {classes} = {uniform}");
        let last_epoch: Vec<f64> = out.steps.iter().filter(|s| s.epoch == pc.epochs - 1).map(|s| s.loss).collect();
        let last = last_epoch.iter().sum::<f64>() / last_epoch.len() as f64;
        assert!(last < first, "seed {seed}: loss {first} -> {last}");
        let acc = frozen_zero_shot(&out.backbone, &held_out, &cfg.split.source_domains);
        assert!(acc >= 2.0 * chance, "seed {seed}: zero-shot {acc:.1}% vs chance {chance:.1}%");
    }
}

#[test]
fn pretraining_is_deterministic_in_seed() {
    let mut cfg = short_config();
    cfg.data.pretrain_samples_per_cell = 4;
    cfg.pretrain.epochs = 2;
    let pre = generate_dataset(&cfg.pretrain_dataset_spec().unwrap()).unwrap();
    let run = |seed| {
        let pc = PretrainConfig { seed, ..cfg.pretrain.clone() };
        let b = pretrain(&pc, &cfg.encoder, &pre, &cfg.split.source_domains, |_| {}).unwrap().backbone;
        Checkpoint::for_backbone(&b, serde_json::Value::Null).to_bytes().unwrap()
    };
    assert_eq!(run(3), run(3));
    assert_ne!(run(3), run(4));
}

#[test]
fn tuning_lowers_the_objective() {
    let cfg = short_config();
    let pre = generate_dataset(&cfg.pretrain_dataset_spec().unwrap()).unwrap();
    let backbone = pretrain(&cfg.pretrain, &cfg.encoder, &pre, &cfg.split.source_domains, |_| {}).unwrap().backbone;
    let ds = generate_dataset(&cfg.dataset_spec().unwrap()).unwrap();
    let (mut first, mut last) = (0.0, 0.0);
    for seed in 0..5 {
        let split = make_split(&ds, &cfg.split_spec(seed)).unwrap();
        let tc = TuneConfig { epochs: 4, ..cfg.tune_config(seed) };
        let mut state = TuneState::new(&tc, &backbone, &ds, &split).unwrap();
        state.run(&ds, &split, None, |_| {}).unwrap();
        let m = state.run_record(0.0).final_metrics;
        first += m["first_epoch_mean_total"];
        last += m["last_epoch_mean_total"];
        assert_eq!(state.model.backbone.checksum(), backbone.checksum());
    }
    assert!(last < first, "mean total {} -> {}", first / 5.0, last / 5.0);
}

#[test]
fn resume_rejects_a_different_split() {
    let (backbone, ds, split) = tiny_task(2).unwrap();
    let mut state = TuneState::new(&tiny_tune_config(2), &backbone, &ds, &split).unwrap();
    state.run(&ds, &split, Some(1), |_| {}).unwrap();
    let mut other = split.clone();
    other.train.reverse();
    other.train.pop();
    let err = state.run(&ds, &other, None, |_| {}).unwrap_err();
    assert_eq!(err.category(), "compatibility");
}

#[test]
fn invalid_tuning_configs_are_rejected() {
    let (backbone, ds, split) = tiny_task(0).unwrap();
    for bad in [
        TuneConfig { learning_rate: 0.0, ..tiny_tune_config(0) },
        TuneConfig { shift_probability: 1.5, ..tiny_tune_config(0) },
        TuneConfig { n_bases: 0, ..tiny_tune_config(0) },
        TuneConfig { style_layer: 9, ..tiny_tune_config(0) },
    ] {
        let err = TuneState::new(&bad, &backbone, &ds, &split).err().expect("config should be rejected");
        assert_eq!(err.category(), "configuration", "{bad:?}");
    }
}
