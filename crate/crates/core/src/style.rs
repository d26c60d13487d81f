//! Learnable style bases and the map-then-apply style shift.
//!
//! The style of a patch-token map is its per-dimension mean and standard
//! deviation over patches. A [`StyleBank`] holds `N` learnable bases; an
//! input's style is expressed as a similarity-weighted convex combination of
//! the bases and then imposed on the standardized features (AdaIN).

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// Standardization epsilon used by style extraction and AdaIN.
pub const STYLE_EPSILON: f64 = 1e-5;

/// Per-dimension (mean, std) of a feature map. `sigma` is strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleStats {
    pub mu: Tensor,
    pub sigma: Tensor,
}

impl StyleStats {
    pub fn new(mu: Tensor, sigma: Tensor) -> Result<Self> {
        if mu.rank() != 1 || mu.shape() != sigma.shape() {
            return Err(dim_err!(
                "style mu {:?} and sigma {:?} must be equal-length vectors",
                mu.shape(),
                sigma.shape()
            ));
        }
        if !mu.is_finite() || !sigma.is_finite() {
            return Err(Error::NumericDomain("style statistics must be finite".into()));
        }
        if sigma.data().iter().any(|&s| s <= 0.0) {
            return Err(Error::NumericDomain("style sigma must be strictly positive".into()));
        }
        Ok(Self { mu, sigma })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> StyleVars<'t> {
        StyleVars {
            mu: tape.constant(self.mu.clone()),
            sigma: tape.constant(self.sigma.clone()),
        }
    }
}

/// Style statistics recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct StyleVars<'t> {
    pub mu: Var<'t>,
    pub sigma: Var<'t>,
}

impl StyleVars<'_> {
    pub fn to_stats(&self) -> Result<StyleStats> {
        StyleStats::new(self.mu.value(), self.sigma.value())
    }
}

fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// `N` learnable style bases; `sigma = softplus(sigma_raw)` keeps every std positive.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleBank {
    /// N×D
    pub mu_raw: Tensor,
    /// N×D, pre-softplus
    pub sigma_raw: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BankInit {
    pub mu_std: f64,
    pub sigma_center: f64,
    pub sigma_raw_jitter: f64,
}

impl Default for BankInit {
    fn default() -> Self {
        Self {
            mu_std: 0.5,
            sigma_center: 1.0,
            sigma_raw_jitter: 0.1,
        }
    }
}

impl StyleBank {
    pub fn new(mu_raw: Tensor, sigma_raw: Tensor) -> Result<Self> {
        let (n, d) = mu_raw.dims2()?;
        if sigma_raw.shape() != [n, d] {
            return Err(dim_err!(
                "bank mu {:?} and sigma {:?} disagree",
                mu_raw.shape(),
                sigma_raw.shape()
            ));
        }
        Ok(Self { mu_raw, sigma_raw })
    }

    /// Random bank: mu ~ N(0, mu_std²), sigma ≈ sigma_center with jitter on the raw scale.
    pub fn random<R: Rng>(n: usize, dim: usize, init: BankInit, rng: &mut R) -> Result<Self> {
        if n == 0 || dim == 0 {
            return Err(Error::Contract("style bank needs N >= 1 and D >= 1".into()));
        }
        let mu_dist = Normal::new(0.0, init.mu_std)
            .map_err(|e| Error::Configuration(format!("bank mu std: {e}")))?;
        let jitter = Normal::new(0.0, init.sigma_raw_jitter)
            .map_err(|e| Error::Configuration(format!("bank sigma jitter: {e}")))?;
        let center = inverse_softplus(init.sigma_center);
        let mu: Vec<f64> = (0..n * dim).map(|_| mu_dist.sample(rng)).collect();
        let sigma: Vec<f64> = (0..n * dim).map(|_| center + jitter.sample(rng)).collect();
        Self::new(Tensor::new(&[n, dim], mu)?, Tensor::new(&[n, dim], sigma)?)
    }

    /// Random bank around a reference style: `mu = center.mu + N(0, mu_std²)` and
    /// `sigma ≈ sigma_center · center.sigma`, jittered on the raw scale.
    pub fn around<R: Rng>(n: usize, center: &StyleStats, init: BankInit, rng: &mut R) -> Result<Self> {
        let dim = center.dim();
        if n == 0 {
            return Err(Error::Contract("style bank needs N >= 1".into()));
        }
        let mu_dist = Normal::new(0.0, init.mu_std)
            .map_err(|e| Error::Configuration(format!("bank mu std: {e}")))?;
        let jitter = Normal::new(0.0, init.sigma_raw_jitter)
            .map_err(|e| Error::Configuration(format!("bank sigma jitter: {e}")))?;
        let mut mu = Vec::with_capacity(n * dim);
        let mut sigma = Vec::with_capacity(n * dim);
        for _ in 0..n {
            for d in 0..dim {
                mu.push(center.mu.data()[d] + mu_dist.sample(rng));
                let target = init.sigma_center * center.sigma.data()[d];
                sigma.push(inverse_softplus(target) + jitter.sample(rng));
            }
        }
        Self::new(Tensor::new(&[n, dim], mu)?, Tensor::new(&[n, dim], sigma)?)
    }

    /// Bank whose realized bases equal the given styles exactly (up to softplus round-off).
    pub fn from_styles(styles: &[StyleStats]) -> Result<Self> {
        let first = styles
            .first()
            .ok_or_else(|| Error::Contract("style bank needs at least one basis".into()))?;
        let d = first.dim();
        let mut mu = Vec::with_capacity(styles.len() * d);
        let mut sigma = Vec::with_capacity(styles.len() * d);
        for s in styles {
            if s.dim() != d {
                return Err(dim_err!("style dims {} and {} differ", d, s.dim()));
            }
            mu.extend_from_slice(s.mu.data());
            sigma.extend(s.sigma.data().iter().map(|&v| inverse_softplus(v)));
        }
        Self::new(
            Tensor::new(&[styles.len(), d], mu)?,
            Tensor::new(&[styles.len(), d], sigma)?,
        )
    }

    pub fn len(&self) -> usize {
        self.mu_raw.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.mu_raw.shape()[1]
    }

    /// Realized (mu, sigma) of basis `n`.
    pub fn basis(&self, n: usize) -> Result<StyleStats> {
        let mu = Tensor::vector(self.mu_raw.row(n)?);
        let sigma = Tensor::vector(
            &self
                .sigma_raw
                .row(n)?
                .iter()
                .map(|&v| crate::autodiff::softplus(v))
                .collect::<Vec<_>>(),
        );
        StyleStats::new(mu, sigma)
    }

    pub fn bases(&self) -> Result<Vec<StyleStats>> {
        (0..self.len()).map(|n| self.basis(n)).collect()
    }

    /// Records the bank on a tape; `trainable` marks the raw tensors as parameters.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Result<BankVars<'t>> {
        BankVars::from_raw(
            tape.leaf(self.mu_raw.clone(), trainable),
            tape.leaf(self.sigma_raw.clone(), trainable),
        )
    }

    /// CSV dump with one row per basis: `basis,stat,d0,d1,...`.
    pub fn to_csv(&self) -> Result<String> {
        let mut out = String::from("basis,stat");
        for d in 0..self.dim() {
            out.push_str(&format!(",d{d}"));
        }
        out.push('\n');
        for (n, b) in self.bases()?.iter().enumerate() {
            for (name, t) in [("mu", &b.mu), ("sigma", &b.sigma)] {
                out.push_str(&format!("{n},{name}"));
                for v in t.data() {
                    out.push_str(&format!(",{v}"));
                }
                out.push('\n');
            }
        }
        Ok(out)
    }
}

/// A style bank recorded on a tape. `mu`/`sigma` are the realized N×D bases.
#[derive(Debug, Clone, Copy)]
pub struct BankVars<'t> {
    pub mu: Var<'t>,
    pub sigma: Var<'t>,
    pub mu_raw: Var<'t>,
    pub sigma_raw: Var<'t>,
}

impl<'t> BankVars<'t> {
    /// Realizes the bases from raw N×D parameters already on a tape.
    pub fn from_raw(mu_raw: Var<'t>, sigma_raw: Var<'t>) -> Result<Self> {
        if mu_raw.shape().len() != 2 || mu_raw.shape() != sigma_raw.shape() {
            return Err(dim_err!(
                "bank parameters {:?} / {:?} must be equal N×D matrices",
                mu_raw.shape(),
                sigma_raw.shape()
            ));
        }
        Ok(Self {
            mu: mu_raw,
            sigma: sigma_raw.softplus(),
            mu_raw,
            sigma_raw,
        })
    }
}

impl<'t> BankVars<'t> {
    pub fn len(&self) -> usize {
        self.mu.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn basis(&self, n: usize) -> Result<StyleVars<'t>> {
        let d = self.mu.shape()[1];
        Ok(StyleVars {
            mu: self.mu.select_rows(&[n])?.reshape(&[d])?,
            sigma: self.sigma.select_rows(&[n])?.reshape(&[d])?,
        })
    }
}

/// Per-dimension mean and sqrt(variance + eps) over the patch rows of a P²×D map.
pub fn extract_style<'t>(patches: Var<'t>, eps: f64) -> Result<StyleVars<'t>> {
    let shape = patches.shape();
    if shape.len() != 2 {
        return Err(dim_err!("patch features must be P²×D, got {shape:?}"));
    }
    if shape[0] < 2 {
        return Err(dim_err!(
            "style extraction needs at least 2 patches, got {}",
            shape[0]
        ));
    }
    let (mu, sigma) = patches.moments(0, eps)?;
    Ok(StyleVars { mu, sigma })
}

/// Σ_d (μa−μb)² + Σ_d (σa² + σb² − 2σaσb).
pub fn wasserstein_distance<'t>(a: StyleVars<'t>, b: StyleVars<'t>) -> Result<Var<'t>> {
    if a.mu.shape() != b.mu.shape() || a.sigma.shape() != b.sigma.shape() {
        return Err(dim_err!(
            "style dimensions differ: {:?} vs {:?}",
            a.mu.shape(),
            b.mu.shape()
        ));
    }
    let mean_term = a.mu.sub(b.mu)?.square().sum();
    let cross = a.sigma.mul(b.sigma)?.scale(2.0);
    let std_term = a.sigma.square().add(b.sigma.square())?.sub(cross)?.sum();
    mean_term.add(std_term)
}

/// Distances from `cur` to every basis, as an N-vector.
pub fn basis_distances<'t>(cur: StyleVars<'t>, bank: &BankVars<'t>) -> Result<Var<'t>> {
    let d = bank.mu.shape()[1];
    if cur.mu.value().len() != d {
        return Err(dim_err!(
            "current style has {} dims, bank has {d}",
            cur.mu.value().len()
        ));
    }
    let mean_term = bank.mu.sub_row(cur.mu)?.square().sum_axis(1)?;
    let cross = bank.sigma.mul_row(cur.sigma)?.scale(2.0);
    let std_term = bank
        .sigma
        .square()
        .add_row(cur.sigma.square())?
        .sub(cross)?
        .sum_axis(1)?;
    mean_term.add(std_term)
}

/// ω = softmax_n(1 / (1 + d_n)).
pub fn similarity_weights<'t>(cur: StyleVars<'t>, bank: &BankVars<'t>) -> Result<Var<'t>> {
    if bank.is_empty() {
        return Err(Error::Contract("style bank is empty".into()));
    }
    let dist = basis_distances(cur, bank)?;
    if !dist.value().is_finite() {
        return Err(Error::NumericDomain("non-finite style distance".into()));
    }
    dist.add_scalar(1.0).recip().softmax(0)
}

/// Weighted sum of the bases: (Σ ω_n μ_n, Σ ω_n σ_n).
pub fn map_style<'t>(weights: Var<'t>, bank: &BankVars<'t>) -> Result<StyleVars<'t>> {
    let n = bank.len();
    let d = bank.mu.shape()[1];
    if weights.value().len() != n {
        return Err(dim_err!(
            "{} weights for a bank of {n} bases",
            weights.value().len()
        ));
    }
    let w = weights.reshape(&[1, n])?;
    Ok(StyleVars {
        mu: w.matmul(bank.mu)?.reshape(&[d])?,
        sigma: w.matmul(bank.sigma)?.reshape(&[d])?,
    })
}

/// AdaIN: σ_t ⊙ (F − μ(F)) / σ(F) + μ_t per dimension.
pub fn apply_style<'t>(patches: Var<'t>, target: StyleVars<'t>, eps: f64) -> Result<Var<'t>> {
    if target.sigma.value().data().iter().any(|&s| !(s > 0.0)) {
        return Err(Error::NumericDomain("target sigma must be positive".into()));
    }
    let own = extract_style(patches, eps)?;
    patches
        .sub_row(own.mu)?
        .div_row(own.sigma)?
        .mul_row(target.sigma)?
        .add_row(target.mu)
}

/// Extract → weigh → map → apply, differentiable into the bank.
pub fn style_shift_layer<'t>(patches: Var<'t>, bank: &BankVars<'t>, eps: f64) -> Result<Var<'t>> {
    let cur = extract_style(patches, eps)?;
    let w = similarity_weights(cur, bank)?;
    let mapped = map_style(w, bank)?;
    apply_style(patches, mapped, eps)
}

/// Value-level convenience: style of a plain P²×D tensor.
pub fn style_of(patches: &Tensor, eps: f64) -> Result<StyleStats> {
    let tape = Tape::new();
    extract_style(tape.constant(patches.clone()), eps)?.to_stats()
}

/// Value-level Wasserstein distance.
pub fn style_distance(a: &StyleStats, b: &StyleStats) -> Result<f64> {
    let tape = Tape::new();
    Ok(wasserstein_distance(a.bind(&tape), b.bind(&tape))?.item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::new(
            &[rows, cols],
            (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
        .unwrap()
    }

    fn random_style(d: usize, rng: &mut ChaCha8Rng) -> StyleStats {
        StyleStats::new(
            Tensor::vector(&(0..d).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>()),
            Tensor::vector(&(0..d).map(|_| rng.gen_range(0.2..2.0)).collect::<Vec<_>>()),
        )
        .unwrap()
    }

    #[test]
    fn extract_style_examples() {
        let c = Tensor::full(&[4, 3], 2.5);
        let s = style_of(&c, STYLE_EPSILON).unwrap();
        assert!(s.mu.data().iter().all(|&m| m == 2.5));
        assert!(s
            .sigma
            .data()
            .iter()
            .all(|&v| (v - STYLE_EPSILON.sqrt()).abs() < 1e-15));

        let f = Tensor::matrix(&[&[0.0, 4.0], &[2.0, 0.0]]).unwrap();
        let s = style_of(&f, 0.0).unwrap();
        assert_eq!(s.mu.data(), &[1.0, 2.0]);
        assert_eq!(s.sigma.data(), &[1.0, 2.0]);
    }

    #[test]
    fn extract_style_needs_two_patches() {
        let tape = Tape::new();
        let one = tape.constant(Tensor::zeros(&[1, 4]));
        assert!(matches!(
            extract_style(one, STYLE_EPSILON),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn wasserstein_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_style(5, &mut rng);
        assert_eq!(style_distance(&a, &a).unwrap(), 0.0);
        let sig = Tensor::vector(&[0.7, 1.3]);
        let a = StyleStats::new(Tensor::vector(&[1.0, 0.0]), sig.clone()).unwrap();
        let b = StyleStats::new(Tensor::vector(&[0.0, 0.0]), sig).unwrap();
        assert!((style_distance(&a, &b).unwrap() - 1.0).abs() < 1e-15);
        let c = random_style(3, &mut rng);
        assert!(matches!(style_distance(&a, &c), Err(Error::Dimension(_))));
    }

    #[test]
    fn similarity_weight_examples() {
        // d = [0, 1] -> scores [1, 0.5]
        let cur = StyleStats::new(Tensor::vector(&[0.0, 0.0]), Tensor::vector(&[1.0, 1.0])).unwrap();
        let far = StyleStats::new(Tensor::vector(&[1.0, 0.0]), Tensor::vector(&[1.0, 1.0])).unwrap();
        let bank = StyleBank::from_styles(&[cur.clone(), far]).unwrap();
        let tape = Tape::new();
        let bv = bank.bind(&tape, false).unwrap();
        let w = similarity_weights(cur.bind(&tape), &bv).unwrap().value();
        assert!((w.data()[0] - 0.6225).abs() < 1e-4, "{:?}", w);
        assert!((w.data()[1] - 0.3775).abs() < 1e-4);

        let bank = StyleBank::from_styles(&[cur.clone(), cur.clone(), cur.clone()]).unwrap();
        let bv = bank.bind(&tape, false).unwrap();
        let w = similarity_weights(cur.bind(&tape), &bv).unwrap().value();
        for &x in w.data() {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn map_style_degenerate_and_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bank = StyleBank::random(1, 4, BankInit::default(), &mut rng).unwrap();
        let tape = Tape::new();
        let bv = bank.bind(&tape, false).unwrap();
        let m = map_style(tape.constant(Tensor::vector(&[1.0])), &bv).unwrap();
        let b0 = bank.basis(0).unwrap();
        assert!(m.mu.value().max_abs_diff(&b0.mu).unwrap() < 1e-15);
        assert!(m.sigma.value().max_abs_diff(&b0.sigma).unwrap() < 1e-15);

        let bank = StyleBank::random(4, 3, BankInit::default(), &mut rng).unwrap();
        let bv = bank.bind(&tape, false).unwrap();
        let m = map_style(tape.constant(Tensor::full(&[4], 0.25)), &bv).unwrap();
        let bases = bank.bases().unwrap();
        for d in 0..3 {
            let mean: f64 = bases.iter().map(|b| b.mu.data()[d]).sum::<f64>() / 4.0;
            assert!((m.mu.value().data()[d] - mean).abs() < 1e-12);
        }
        let bad = map_style(tape.constant(Tensor::full(&[3], 1.0 / 3.0)), &bv);
        assert!(matches!(bad, Err(Error::Dimension(_))));
    }

    #[test]
    fn apply_style_identity_target_standardizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random_matrix(9, 4, &mut rng);
        let tape = Tape::new();
        let fv = tape.constant(f.clone());
        let target = StyleStats::new(Tensor::zeros(&[4]), Tensor::full(&[4], 1.0)).unwrap();
        let out = apply_style(fv, target.bind(&tape), STYLE_EPSILON).unwrap().value();
        let own = style_of(&f, STYLE_EPSILON).unwrap();
        for i in 0..9 {
            for d in 0..4 {
                let z = (f.data()[i * 4 + d] - own.mu.data()[d]) / own.sigma.data()[d];
                assert!((out.data()[i * 4 + d] - z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn style_shift_with_own_style_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = random_matrix(16, 6, &mut rng);
        let own = style_of(&f, STYLE_EPSILON).unwrap();
        let bank = StyleBank::from_styles(&[own]).unwrap();
        let tape = Tape::new();
        let bv = bank.bind(&tape, false).unwrap();
        let out = style_shift_layer(tape.constant(f.clone()), &bv, STYLE_EPSILON)
            .unwrap()
            .value();
        assert!(out.max_abs_diff(&f).unwrap() < 1e-6);
    }

    #[test]
    fn bank_gradients_flow_through_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = random_matrix(16, 4, &mut rng);
        let bank = StyleBank::random(3, 4, BankInit::default(), &mut rng).unwrap();
        let tape = Tape::new();
        let bv = bank.bind(&tape, true).unwrap();
        let out = style_shift_layer(tape.constant(f), &bv, STYLE_EPSILON).unwrap();
        let loss = out.mul(out).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(bv.mu_raw).unwrap().data().iter().any(|&x| x != 0.0));
        assert!(g.get(bv.sigma_raw).unwrap().data().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn csv_has_two_rows_per_basis() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let bank = StyleBank::random(3, 2, BankInit::default(), &mut rng).unwrap();
        let csv = bank.to_csv().unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "basis,stat,d0,d1");
        assert_eq!(lines.len(), 7);
        assert!(lines[2].starts_with("0,sigma,"));
    }

    proptest::proptest! {
        #[test]
        fn weights_sum_to_one_and_favor_nearest(seed in 0u64..500, n in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bank = StyleBank::random(n, 5, BankInit::default(), &mut rng).unwrap();
            let cur = random_style(5, &mut rng);
            let tape = Tape::new();
            let bv = bank.bind(&tape, false).unwrap();
            let cv = cur.bind(&tape);
            let w = similarity_weights(cv, &bv).unwrap().value();
            let d = basis_distances(cv, &bv).unwrap().value();
            let total: f64 = w.data().iter().sum();
            proptest::prop_assert!((total - 1.0).abs() < 1e-12);
            let argmin = (0..n).min_by(|&i, &j| d.data()[i].total_cmp(&d.data()[j])).unwrap();
            let argmax = (0..n).max_by(|&i, &j| w.data()[i].total_cmp(&w.data()[j])).unwrap();
            proptest::prop_assert!(w.data()[argmin] >= w.data()[argmax]);
        }

        #[test]
        fn weights_are_permutation_equivariant(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bank = StyleBank::random(4, 3, BankInit::default(), &mut rng).unwrap();
            let cur = random_style(3, &mut rng);
            let mut bases = bank.bases().unwrap();
            bases.reverse();
            let flipped = StyleBank::from_styles(&bases).unwrap();
            let tape = Tape::new();
            let w1 = similarity_weights(cur.bind(&tape), &bank.bind(&tape, false).unwrap()).unwrap().value();
            let w2 = similarity_weights(cur.bind(&tape), &flipped.bind(&tape, false).unwrap()).unwrap().value();
            for i in 0..4 {
                proptest::prop_assert!((w1.data()[i] - w2.data()[3 - i]).abs() < 1e-12);
            }
        }

        #[test]
        fn sigma_stays_positive_under_any_raw(raw in proptest::collection::vec(-60.0f64..60.0, 4)) {
            let bank = StyleBank::new(Tensor::zeros(&[2, 2]), Tensor::new(&[2, 2], raw).unwrap()).unwrap();
            for b in bank.bases().unwrap() {
                proptest::prop_assert!(b.sigma.data().iter().all(|&s| s > 0.0));
            }
        }

        #[test]
        fn apply_style_preserves_standardized_content(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = random_matrix(16, 4, &mut rng);
            let t = random_style(4, &mut rng);
            let tape = Tape::new();
            let out = apply_style(tape.constant(f.clone()), t.bind(&tape), STYLE_EPSILON).unwrap().value();
            let zin = standardize(&f);
            let zout = standardize(&out);
            proptest::prop_assert!(zin.max_abs_diff(&zout).unwrap() < 1e-3);
        }
    }

    fn standardize(f: &Tensor) -> Tensor {
        let s = style_of(f, 0.0).unwrap();
        let (r, c) = f.dims2().unwrap();
        let mut out = f.to_vec();
        for i in 0..r {
            for d in 0..c {
                out[i * c + d] = (out[i * c + d] - s.mu.data()[d]) / s.sigma.data()[d];
            }
        }
        Tensor::new(&[r, c], out).unwrap()
    }
}
