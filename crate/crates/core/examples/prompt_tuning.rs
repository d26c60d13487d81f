//! Pre-trains a backbone on a shortened schedule, then tunes prompts and style
//! bases and compares the result with cross-entropy-only prompt tuning under
//! both evaluation protocols.

use serde_json::Value;
use stylepro::config::ExperimentConfig;
use stylepro::data::{generate_dataset, make_split};
use stylepro::eval::{evaluate, Protocol};
use stylepro::train::{pretrain, prompt_tune, TuneConfig};

fn main() -> stylepro::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.data.pretrain_samples_per_cell = 24;
    cfg.pretrain.epochs = 15;
    cfg.tune.epochs = 12;

    let pre = generate_dataset(&cfg.pretrain_dataset_spec()?)?;
    let backbone = pretrain(&cfg.pretrain, &cfg.encoder, &pre, &cfg.split.source_domains, |_| {})?.backbone;
    let ds = generate_dataset(&cfg.dataset_spec()?)?;
    let split = make_split(&ds, &cfg.split_spec(0))?;

    let full = cfg.tune_config(0);
    let baseline = TuneConfig { weights: TuneConfig::baseline().weights, augmentation: TuneConfig::baseline().augmentation, ..full.clone() };
    for (name, tc) in [("cross-entropy only", baseline), ("full objective", full)] {
        let (state, record) = prompt_tune(&tc, &backbone, &ds, &split)?;
        let first = record.steps.first().map_or(f64::NAN, |s| s.total);
        let last = record.steps.last().map_or(f64::NAN, |s| s.total);
        println!("{name}: {} steps, loss {first:.3} -> {last:.3}", record.steps.len());
        for protocol in [Protocol::BaseToNovel, Protocol::DomainGeneralization] {
            let report = evaluate(protocol, &state.model, &ds, &split, Value::Null)?;
            let metrics: Vec<String> = report.metrics().iter().map(|(k, v)| format!("{k} {v:.1}")).collect();
            println!("  {protocol}: {}", metrics.join(", "));
        }
    }
    Ok(())
}
