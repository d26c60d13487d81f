//! Extracts per-dimension feature statistics, weighs them against a small
//! bank of style bases and re-normalizes the features to the mapped style.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stylepro::style::{
    extract_style, map_style, similarity_weights, style_distance, style_of, style_shift_layer, BankInit, StyleBank,
};
use stylepro::{Tape, Tensor};

const EPS: f64 = 1e-6;

fn main() -> stylepro::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (patches, dim) = (16, 6);
    let features = Tensor::new(
        &[patches, dim],
        (0..patches * dim).map(|i| 2.0 + (i % dim) as f64 + rng.gen_range(-1.0..1.0)).collect(),
    )?;
    let bank = StyleBank::random(4, dim, BankInit::default(), &mut rng)?;

    let own = style_of(&features, EPS)?;
    println!("feature mu    {:.3?}", own.mu.data());
    println!("feature sigma {:.3?}", own.sigma.data());
    for (n, basis) in bank.bases()?.iter().enumerate() {
        println!("distance to basis {n}: {:.3}", style_distance(&own, basis)?);
    }

    let tape = Tape::new();
    let x = tape.constant(features.clone());
    let bv = bank.bind(&tape, false)?;
    let w = similarity_weights(extract_style(x, EPS)?, &bv)?;
    println!("similarity weights {:.4?} (sum {:.6})", w.value().data(), w.value().data().iter().sum::<f64>());
    let target = map_style(w, &bv)?.to_stats()?;

    let shifted = style_shift_layer(x, &bv, EPS)?.value();
    let after = style_of(&shifted, EPS)?;
    println!(
        "shifted features match the mapped style to {:.2e} (mu) / {:.2e} (sigma)",
        after.mu.max_abs_diff(&target.mu)?,
        after.sigma.max_abs_diff(&target.sigma)?
    );
    Ok(())
}
