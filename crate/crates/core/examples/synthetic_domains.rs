//! Generates the multi-domain dataset, prints per-domain pixel statistics and
//! a few-shot split, and round-trips the dataset through disk.

use stylepro::config::ExperimentConfig;
use stylepro::data::{generate_dataset, load_dataset, make_split, save_dataset};

fn main() -> stylepro::Result<()> {
    let cfg = ExperimentConfig::default();
    let ds = generate_dataset(&cfg.dataset_spec()?)?;
    println!("{} samples, classes {:?}, domains {:?}", ds.samples.len(), ds.class_ids(), ds.domain_ids());

    for d in ds.domain_ids() {
        let idx = ds.cell(d, 0);
        let c = cfg.encoder.channels;
        let mut mean = vec![0.0; c];
        for &i in &idx {
            let img = ds.samples[i].image.data();
            let per = img.len() / c;
            for (ch, m) in mean.iter_mut().enumerate() {
                *m += img[ch * per..(ch + 1) * per].iter().sum::<f64>() / per as f64;
            }
        }
        let mean: Vec<String> = mean.iter().map(|m| format!("{:.3}", m / idx.len() as f64)).collect();
        println!("domain {d}: class-0 channel means [{}]", mean.join(", "));
    }

    let split = make_split(&ds, &cfg.split_spec(0))?;
    println!(
        "split: base {:?} novel {:?}; {} train, {} held-out base, {} novel, target {:?}",
        split.base_classes,
        split.novel_classes,
        split.train.len(),
        split.test_base.len(),
        split.test_novel.len(),
        split.test_target.iter().map(|(d, v)| (*d, v.len())).collect::<Vec<_>>()
    );

    let dir = std::env::temp_dir().join("stylepro_example_data");
    save_dataset(&ds, &dir)?;
    let back = load_dataset(&dir)?;
    let identical = back.samples.iter().zip(&ds.samples).all(|(a, b)| a.image.bit_eq(&b.image));
    println!("saved to {} and reloaded; bit-identical: {identical}", dir.display());
    Ok(())
}
