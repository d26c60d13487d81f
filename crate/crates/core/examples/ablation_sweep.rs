//! Sweeps the loss-term ablation on a tiny task and prints the summary table.

use stylepro::data::SplitSpec;
use stylepro::eval::{ablation_grid, ablation_sweep, AblationAxis, SweepContext};
use stylepro::verify::{tiny_task, tiny_tune_config};

fn main() -> stylepro::Result<()> {
    let (backbone, ds, split) = tiny_task(0)?;
    let full = tiny_tune_config(0);
    let ctx = SweepContext {
        backbone: &backbone,
        dataset: &ds,
        split: SplitSpec {
            fraction_base: 0.5,
            shots: split.shots,
            seed: 0,
            source_domains: split.source_domains.clone(),
            target_domains: split.target_domains.clone(),
        },
    };
    let cells = ablation_grid(AblationAxis::LossTerms, &full, backbone.config.layers);
    let table = ablation_sweep(AblationAxis::LossTerms, &cells, &[0, 1], &ctx, None, |row| {
        println!("finished {} seed {}", row.cell, row.seed);
    })?;
    println!("{:<28} {:>8} {:>8} {:>8} {:>8}", "cell", "base", "novel", "hm", "target");
    for (cell, m) in table.summary()? {
        let get = |k: &str| m.get(k).map_or(f64::NAN, |s| s.mean);
        println!("{cell:<28} {:>8.1} {:>8.1} {:>8.1} {:>8.1}", get("base"), get("novel"), get("hm"), get("target"));
    }
    Ok(())
}
