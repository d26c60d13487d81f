//! Compares tape gradients with central differences, first on a closed-form
//! function and then on every term of the tuning objective.

use stylepro::gradcheck::{finite_difference_check, DEFAULT_STEP};
use stylepro::verify::{gradient_errors, LOSS_TERM_NAMES};
use stylepro::Tensor;

fn main() -> stylepro::Result<()> {
    let x = Tensor::new(&[2, 3], vec![0.3, -1.2, 0.8, 2.0, -0.4, 1.1])?;
    let err = finite_difference_check(|_, v| Ok(v.square().softmax(1)?.mul(v)?.sum()), &x, DEFAULT_STEP)?;
    println!("sum(softmax(x^2) * x): max relative error {err:.2e}");

    for seed in 0..3 {
        let errs = gradient_errors(seed)?;
        let line: Vec<String> = LOSS_TERM_NAMES.iter().zip(&errs).map(|(n, e)| format!("{n} {e:.1e}")).collect();
        println!("seed {seed}: {}", line.join(", "));
    }
    Ok(())
}
