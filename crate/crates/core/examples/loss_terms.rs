//! Evaluates every term of the tuning objective on a tiny random model and
//! shows how the weights combine them.

use stylepro::losses::{FrozenTargets, LossWeights};
use stylepro::verify::TinyProblem;
use stylepro::Tape;

fn main() -> stylepro::Result<()> {
    let problem = TinyProblem::new(0)?;
    let frozen = FrozenTargets::compute(&problem.model, &problem.batch())?;
    for (name, weights) in [("full", LossWeights::default()), ("ce only", LossWeights::ce_only())] {
        let tape = Tape::new();
        let vars: Vec<_> = problem.parameters().into_iter().map(|p| tape.param(p)).collect();
        let b = problem.terms(&tape, &vars, &frozen, &weights)?.breakdown();
        println!("{name:>8}: {b:?}");
    }
    Ok(())
}
