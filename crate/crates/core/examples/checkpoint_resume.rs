//! Stops a tuning run part-way, saves it, resumes from disk and checks the
//! result is bit-identical to an uninterrupted run.

use stylepro::checkpoint::Checkpoint;
use stylepro::train::TuneState;
use stylepro::verify::{tiny_task, tiny_tune_config};

fn main() -> stylepro::Result<()> {
    let (backbone, ds, split) = tiny_task(1)?;
    let cfg = tiny_tune_config(1);

    let mut straight = TuneState::new(&cfg, &backbone, &ds, &split)?;
    straight.run(&ds, &split, None, |_| {})?;

    let mut first = TuneState::new(&cfg, &backbone, &ds, &split)?;
    let taken = first.run(&ds, &split, Some(first.total_steps() / 2), |_| {})?;
    let path = std::env::temp_dir().join("stylepro_example_resume.ck");
    first.to_checkpoint(serde_json::json!({ "seed": cfg.seed }))?.save(&path)?;
    println!("stopped after {taken} of {} steps, saved {}", first.total_steps(), path.display());

    let mut resumed = TuneState::from_checkpoint(&Checkpoint::load(&path)?)?;
    resumed.run(&ds, &split, None, |_| {})?;
    let same_params = resumed.model.prompts.text.iter().zip(&straight.model.prompts.text).all(|(a, b)| a.bit_eq(b))
        && resumed.model.bank.mu_raw.bit_eq(&straight.model.bank.mu_raw)
        && resumed.model.bank.sigma_raw.bit_eq(&straight.model.bank.sigma_raw);
    println!("resumed run matches uninterrupted run: parameters {same_params}, losses {}", resumed.records == straight.records);
    Ok(())
}
