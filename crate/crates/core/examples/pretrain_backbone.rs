//! Contrastively pre-trains a small backbone on the source domains and
//! reports zero-shot accuracy before and after.

use stylepro::config::ExperimentConfig;
use stylepro::data::generate_dataset;
use stylepro::encoders::{Backbone, DualEncoder, PromptSet};
use stylepro::eval::accuracy_with;
use stylepro::seed::{rng_for, stream};
use stylepro::style::{BankInit, StyleBank};
use stylepro::train::pretrain;

fn zero_shot(backbone: &Backbone, ds: &stylepro::data::Dataset, domains: &[usize]) -> stylepro::Result<f64> {
    let model = DualEncoder {
        backbone: backbone.clone(),
        prompts: PromptSet::zeros(&backbone.config),
        bank: StyleBank::random(1, backbone.config.token_dim, BankInit::default(), &mut rng_for(&[0]))?,
    };
    let idx: Vec<usize> = (0..ds.samples.len()).filter(|&i| domains.contains(&ds.samples[i].domain_id)).collect();
    accuracy_with(&model, ds, &idx, &ds.class_ids(), false)
}

fn main() -> stylepro::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.data.pretrain_samples_per_cell = 12;
    cfg.pretrain.epochs = 5;
    let ds = generate_dataset(&cfg.pretrain_dataset_spec()?)?;
    let source = cfg.split.source_domains.clone();

    let init = Backbone::random(&cfg.encoder, &mut rng_for(&[cfg.pretrain.seed, stream::BACKBONE]))?;
    println!("zero-shot before: {:.1}%", zero_shot(&init, &ds, &source)?);
    let out = pretrain(&cfg.pretrain, &cfg.encoder, &ds, &source, |s| {
        if s.step % 20 == 0 {
            println!("step {:>4} loss {:.4} temperature {:.4}", s.step, s.loss, s.temperature);
        }
    })?;
    println!("zero-shot after:  {:.1}% on source, {:.1}% on targets", zero_shot(&out.backbone, &ds, &source)?, zero_shot(&out.backbone, &ds, &cfg.split.target_domains)?);
    println!("backbone checksum {}", out.backbone.checksum());
    Ok(())
}
