//! The five training objectives and their weighted sum.
//!
//! Every function here works on tape variables so gradients reach prompts and
//! style bases. Frozen-view quantities are passed as constants (or detached)
//! and never receive gradient.

use serde::{Deserialize, Serialize};

use crate::autodiff::{cosine_matrix, Tape, Var};
use crate::encoders::{class_probabilities, BoundPrompts, DualEncoder, PromptedView, StyleMode};
use crate::error::{dim_err, Error, Result};
use crate::style::BankVars;
use crate::tensor::Tensor;

/// Probability floor inside the KL logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Per-dimension variance below which standardization is refused.
pub const VARIANCE_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_f: f64,
    pub lambda_g: f64,
    /// Diversity weight.
    pub lambda1: f64,
    /// Content weight.
    pub lambda2: f64,
    /// Cross-modal KL weight. Unweighted in the full objective; exposed so the
    /// plain cross-entropy baseline is expressible as a weight setting.
    pub lambda_cm: f64,
    /// Overrides the backbone's learned temperature when set.
    pub temperature: Option<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_f: 15.0,
            lambda_g: 25.0,
            lambda1: 0.005,
            lambda2: 0.2,
            lambda_cm: 1.0,
            temperature: None,
        }
    }
}

impl LossWeights {
    /// Cross-entropy only.
    pub fn ce_only() -> Self {
        Self {
            lambda_f: 0.0,
            lambda_g: 0.0,
            lambda1: 0.0,
            lambda2: 0.0,
            lambda_cm: 0.0,
            temperature: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("lambda_f", self.lambda_f),
            ("lambda_g", self.lambda_g),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda_cm", self.lambda_cm),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Configuration(format!(
                    "{name} must be finite and nonnegative, got {w}"
                )));
            }
        }
        if let Some(t) = self.temperature {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Configuration(format!(
                    "temperature must be positive, got {t}"
                )));
            }
        }
        Ok(())
    }
}

/// Scalar values of one evaluation of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub cm: f64,
    /// Already includes `lambda_f` and `lambda_g`.
    pub feat: f64,
    pub diversity: f64,
    pub content: f64,
    pub total: f64,
}

/// Mean negative log-likelihood of `softmax(cos(img, txt)/τ)` at `labels`.
pub fn cross_entropy_loss<'t>(
    images: Var<'t>,
    texts: Var<'t>,
    labels: &[usize],
    temperature: f64,
) -> Result<Var<'t>> {
    if labels.is_empty() || labels.len() != images.num_rows() {
        return Err(Error::Contract(format!(
            "{} labels for {} images",
            labels.len(),
            images.num_rows()
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::Contract(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let logp = cosine_matrix(images, texts)?
        .scale(1.0 / temperature)
        .log_softmax_rows()?;
    Ok(logp.pick_per_row(labels)?.mean().neg())
}

fn off_diagonal_abs_sum<'t>(m: Var<'t>) -> Result<Var<'t>> {
    let unit = m.normalize_rows()?;
    let gram = unit.matmul(unit.transpose()?)?;
    Ok(gram.abs().sum().sub(gram.diag()?.abs().sum())?)
}

/// Sum over ordered pairs of distinct bases of |cos| between their means plus
/// |cos| between their standard deviations.
pub fn diversity_loss<'t>(bank: &BankVars<'t>) -> Result<Var<'t>> {
    let mu = off_diagonal_abs_sum(bank.mu)?;
    let sigma = off_diagonal_abs_sum(bank.sigma)?;
    mu.add(sigma)
}

fn standardize<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let (_, d) = x.value().dims2()?;
    let mean = x.mean_axis(0)?;
    let centered = x.sub_row(mean)?;
    let var = centered.square().mean_axis(0)?;
    if let Some(j) = var.value().data().iter().position(|&v| v < VARIANCE_GUARD) {
        return Err(Error::NumericDomain(format!(
            "feature dimension {j} of {d} has (near-)zero variance across patches"
        )));
    }
    centered.div_row(var.sqrt())
}

/// D×D cross-covariance of the per-dimension standardized maps, averaged over patches.
pub fn cross_covariance<'t>(prompted: Var<'t>, frozen: Var<'t>) -> Result<Var<'t>> {
    let (ps, fs) = (prompted.shape(), frozen.shape());
    if ps != fs || ps.len() != 2 {
        return Err(dim_err!("patch maps {ps:?} vs {fs:?}"));
    }
    let zp = standardize(prompted)?;
    let zf = standardize(frozen)?;
    Ok(zp.transpose()?.matmul(zf)?.scale(1.0 / ps[0] as f64))
}

/// ‖diag(Σ) − 1‖₂ for one P²×D pair of maps.
pub fn content_loss<'t>(prompted: Var<'t>, frozen: Var<'t>) -> Result<Var<'t>> {
    let frozen = frozen.detach();
    Ok(cross_covariance(prompted, frozen)?.diag()?.add_scalar(-1.0).norm())
}

/// Mean content loss over `batch` images whose patch rows are stacked.
pub fn content_loss_batched<'t>(prompted: Var<'t>, frozen: Var<'t>, batch: usize) -> Result<Var<'t>> {
    let rows = prompted.num_rows();
    if batch == 0 || rows % batch != 0 || prompted.shape() != frozen.shape() {
        return Err(dim_err!(
            "cannot split {:?} / {:?} into {batch} maps",
            prompted.shape(),
            frozen.shape()
        ));
    }
    let p = rows / batch;
    let terms = (0..batch)
        .map(|i| {
            content_loss(
                prompted.slice_rows(i * p, (i + 1) * p)?,
                frozen.slice_rows(i * p, (i + 1) * p)?,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(prompted.tape().sum_scalars(&terms)?.scale(1.0 / batch as f64))
}

/// `(1/d)(λ_f·mean_b ‖f̃_b − f̃_p,b‖² + λ_g·mean_c ‖g̃_c − g̃_p,c‖²)`.
///
/// Rows are samples (images) and classes (texts); with one row each this is
/// the per-sample expression.
pub fn feature_alignment_loss<'t>(
    frozen_image: Var<'t>,
    prompted_image: Var<'t>,
    frozen_text: Var<'t>,
    prompted_text: Var<'t>,
    lambda_f: f64,
    lambda_g: f64,
) -> Result<Var<'t>> {
    let d = *prompted_image.shape().last().unwrap();
    for (a, b) in [(frozen_image, prompted_image), (frozen_text, prompted_text)] {
        if a.shape() != b.shape() {
            return Err(dim_err!("embeddings {:?} vs {:?}", a.shape(), b.shape()));
        }
    }
    if *prompted_text.shape().last().unwrap() != d {
        return Err(dim_err!(
            "image dim {d} vs text dim {:?}",
            prompted_text.shape()
        ));
    }
    let sq = |f: Var<'t>, p: Var<'t>| -> Result<Var<'t>> {
        let rows = if p.shape().len() == 2 { p.num_rows() } else { 1 };
        Ok(p.sub(f.detach())?.square().sum().scale(1.0 / rows as f64))
    };
    let img = sq(frozen_image, prompted_image)?.scale(lambda_f);
    let txt = sq(frozen_text, prompted_text)?.scale(lambda_g);
    Ok(img.add(txt)?.scale(1.0 / d as f64))
}

/// Mean over rows of `KL(Pre ‖ Pre_p)`, with `Pre` held fixed.
pub fn cross_modal_loss<'t>(frozen_probs: Var<'t>, prompted_probs: Var<'t>) -> Result<Var<'t>> {
    if frozen_probs.shape() != prompted_probs.shape() {
        return Err(dim_err!(
            "distributions {:?} vs {:?}",
            frozen_probs.shape(),
            prompted_probs.shape()
        ));
    }
    let shape = prompted_probs.shape();
    let rows = if shape.len() == 2 { shape[0] } else { 1 };
    let pre = frozen_probs.value();
    // Terms with Pre_i = 0 contribute nothing; the floor only guards log(0).
    let log_pre = pre.map(|p| if p > 0.0 { p.ln() } else { 0.0 });
    let tape = prompted_probs.tape();
    let pre_c = tape.constant(pre);
    let log_pre_c = tape.constant(log_pre);
    let diff = log_pre_c.sub(prompted_probs.log_clamped(PROB_FLOOR))?;
    Ok(pre_c.mul(diff)?.sum().scale(1.0 / rows as f64))
}

/// One training batch: images, label indices into `class_ids`, and the class set.
#[derive(Debug, Clone)]
pub struct TrainBatch<'a> {
    pub images: Vec<&'a Tensor>,
    pub labels: Vec<usize>,
    pub class_ids: &'a [usize],
}

/// Frozen-view outputs the losses compare against.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenTargets {
    /// B×d image embeddings.
    pub image: Tensor,
    /// (B·P²)×D final-layer patch tokens.
    pub patches: Tensor,
    /// C×d class embeddings.
    pub text: Tensor,
}

impl FrozenTargets {
    pub fn compute(model: &DualEncoder, batch: &TrainBatch<'_>) -> Result<Self> {
        let tape = Tape::new();
        let bb = model.backbone.bind(&tape, false);
        let img = bb.encode_images(&batch.images, None)?;
        let vocab = model.config().vocab();
        let seqs = batch
            .class_ids
            .iter()
            .map(|&c| vocab.class_sequence(c))
            .collect::<Result<Vec<_>>>()?;
        let text = bb.encode_texts(&seqs, None)?;
        Ok(Self {
            image: img.embeddings.value(),
            patches: img.layer_patches.last().unwrap().value(),
            text: text.value(),
        })
    }
}

/// The recorded objective: every term plus the bound learnable inputs.
pub struct LossTerms<'t> {
    pub ce: Var<'t>,
    pub cm: Var<'t>,
    pub feat: Var<'t>,
    pub diversity: Var<'t>,
    pub content: Var<'t>,
    pub total: Var<'t>,
    pub prompts: BoundPrompts<'t>,
    pub bank: BankVars<'t>,
    /// Prompted B×d image embeddings (style shift applied when active).
    pub prompted_image: Var<'t>,
    pub prompted_text: Var<'t>,
}

impl LossTerms<'_> {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            ce: self.ce.item(),
            cm: self.cm.item(),
            feat: self.feat.item(),
            diversity: self.diversity.item(),
            content: self.content.item(),
            total: self.total.item(),
        }
    }
}

/// Records the full objective on `tape`, with prompts and bank as the only learnable leaves.
///
/// Terms whose weight is zero are still evaluated for reporting but are left
/// out of `total`, so they contribute nothing to the gradient.
pub fn total_loss<'t>(
    tape: &'t Tape,
    model: &DualEncoder,
    batch: &TrainBatch<'_>,
    frozen: &FrozenTargets,
    weights: &LossWeights,
    style: StyleMode,
) -> Result<LossTerms<'t>> {
    let prompts = model.prompts.bind(tape, true);
    let bank = model.bank.bind(tape, true)?;
    total_loss_with(tape, model, prompts, bank, batch, frozen, weights, style)
}

/// As [`total_loss`], with prompts and bank supplied as tape variables (the
/// model's own prompt and bank values are ignored).
#[allow(clippy::too_many_arguments)]
pub fn total_loss_with<'t>(
    tape: &'t Tape,
    model: &DualEncoder,
    prompts: BoundPrompts<'t>,
    bank: BankVars<'t>,
    batch: &TrainBatch<'_>,
    frozen: &FrozenTargets,
    weights: &LossWeights,
    style: StyleMode,
) -> Result<LossTerms<'t>> {
    weights.validate()?;
    let tau = weights
        .temperature
        .unwrap_or_else(|| model.backbone.temperature());
    let bb = model.backbone.bind(tape, false);
    let view = PromptedView {
        prompts: &prompts,
        mask_prompts: false,
        style: match style {
            StyleMode::Off => None,
            StyleMode::Shift { layer } => Some((layer, &bank)),
        },
    };
    let img = bb.encode_images(&batch.images, Some(view))?;
    let vocab = model.config().vocab();
    let seqs = batch
        .class_ids
        .iter()
        .map(|&c| vocab.class_sequence(c))
        .collect::<Result<Vec<_>>>()?;
    let txt = bb.encode_texts(
        &seqs,
        Some(PromptedView {
            style: None,
            ..view
        }),
    )?;
    let f_img = tape.constant(frozen.image.clone());
    let f_txt = tape.constant(frozen.text.clone());
    let f_patch = tape.constant(frozen.patches.clone());

    let ce = cross_entropy_loss(img.embeddings, txt, &batch.labels, tau)?;
    let pre = class_probabilities(f_img, f_txt, tau)?;
    let pre_p = class_probabilities(img.embeddings, txt, tau)?;
    let cm = cross_modal_loss(pre, pre_p)?;
    let feat = feature_alignment_loss(
        f_img,
        img.embeddings,
        f_txt,
        txt,
        weights.lambda_f,
        weights.lambda_g,
    )?;
    let diversity = diversity_loss(&bank)?;
    let content = content_loss_batched(*img.layer_patches.last().unwrap(), f_patch, batch.images.len())?;

    let mut parts = vec![ce];
    if weights.lambda_cm != 0.0 {
        parts.push(cm.scale(weights.lambda_cm));
    }
    if weights.lambda_f != 0.0 || weights.lambda_g != 0.0 {
        parts.push(feat);
    }
    if weights.lambda1 != 0.0 {
        parts.push(diversity.scale(weights.lambda1));
    }
    if weights.lambda2 != 0.0 {
        parts.push(content.scale(weights.lambda2));
    }
    let total = if parts.len() == 1 {
        ce
    } else {
        tape.sum_scalars(&parts)?
    };
    Ok(LossTerms {
        ce,
        cm,
        feat,
        diversity,
        content,
        total,
        prompts,
        bank,
        prompted_image: img.embeddings,
        prompted_text: txt,
    })
}

/// Evaluates the objective, computing the frozen targets on the fly.
pub fn evaluate_total_loss(
    model: &DualEncoder,
    batch: &TrainBatch<'_>,
    weights: &LossWeights,
    style: StyleMode,
) -> Result<LossBreakdown> {
    let frozen = FrozenTargets::compute(model, batch)?;
    let tape = Tape::new();
    Ok(total_loss(&tape, model, batch, &frozen, weights, style)?.breakdown())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use crate::style::StyleBank;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut impl Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(&[r, c], (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn ce_uniform_is_ln_c() {
        let tape = Tape::new();
        let img = tape.constant(Tensor::matrix(&[&[1.0, 0.0, 0.0]]).unwrap());
        let txt = tape.constant(
            Tensor::matrix(&[&[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0], &[0.0, -1.0, 0.0], &[0.0, 0.0, -1.0]])
                .unwrap(),
        );
        let l = cross_entropy_loss(img, txt, &[2], 0.07).unwrap().item();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!(matches!(
            cross_entropy_loss(img, txt, &[4], 0.07),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn ce_confident_limit() {
        let tape = Tape::new();
        let img = tape.constant(Tensor::matrix(&[&[1.0, 0.0]]).unwrap());
        let txt = tape.constant(Tensor::matrix(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap());
        let l = cross_entropy_loss(img, txt, &[0], 1e-3).unwrap().item();
        assert!(l < 1e-12);
    }

    #[test]
    fn ce_matches_hand_log_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_matrix(&mut rng, 2, 4);
        let b = rand_matrix(&mut rng, 3, 4);
        let tape = Tape::new();
        let l = cross_entropy_loss(tape.constant(a.clone()), tape.constant(b.clone()), &[2, 0], 0.5)
            .unwrap()
            .item();
        let cos = |x: &[f64], y: &[f64]| {
            let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
            dot / (x.iter().map(|v| v * v).sum::<f64>().sqrt() * y.iter().map(|v| v * v).sum::<f64>().sqrt())
        };
        let mut expect = 0.0;
        for (i, &y) in [2usize, 0].iter().enumerate() {
            let z: Vec<f64> = (0..3).map(|c| cos(a.row(i).unwrap(), b.row(c).unwrap()) / 0.5).collect();
            let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
            expect += lse - z[y];
        }
        assert!((l - expect / 2.0).abs() < 1e-10);
    }

    fn bank_vars<'t>(tape: &'t Tape, mu: Tensor, sigma: Tensor) -> BankVars<'t> {
        let mu = tape.constant(mu);
        let sigma = tape.constant(sigma);
        BankVars {
            mu,
            sigma,
            mu_raw: mu,
            sigma_raw: sigma,
        }
    }

    #[test]
    fn diversity_examples() {
        let tape = Tape::new();
        let eye = Tensor::identity(3);
        let b = bank_vars(&tape, eye.clone(), eye);
        assert_eq!(diversity_loss(&b).unwrap().item(), 0.0);

        let dup = Tensor::matrix(&[&[0.3, -1.0, 2.0], &[0.3, -1.0, 2.0]]).unwrap();
        let sig = Tensor::matrix(&[&[1.0, 2.0, 0.5], &[1.0, 2.0, 0.5]]).unwrap();
        let b = bank_vars(&tape, dup, sig);
        assert!((diversity_loss(&b).unwrap().item() - 4.0).abs() < 1e-12);

        let single = bank_vars(&tape, Tensor::matrix(&[&[1.0, 2.0]]).unwrap(), Tensor::matrix(&[&[1.0, 1.0]]).unwrap());
        assert_eq!(diversity_loss(&single).unwrap().item(), 0.0);
    }

    #[test]
    fn content_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = rand_matrix(&mut rng, 16, 5);
        let tape = Tape::new();
        let a = tape.constant(f.clone());
        assert!(content_loss(a, a).unwrap().item() < 1e-9);
        let neg = tape.constant(f.map(|x| -x));
        let l = content_loss(neg, a).unwrap().item();
        assert!((l - 2.0 * 5f64.sqrt()).abs() < 1e-9);
        let constant = tape.constant(Tensor::full(&[16, 5], 2.0));
        assert!(matches!(content_loss(constant, a), Err(Error::NumericDomain(_))));
        let wrong = tape.constant(Tensor::zeros(&[15, 5]));
        assert!(matches!(content_loss(wrong, a), Err(Error::Dimension(_))));
    }

    #[test]
    fn feature_alignment_example() {
        let tape = Tape::new();
        let f = tape.constant(Tensor::vector(&[1.0, 0.0]));
        let fp = tape.constant(Tensor::vector(&[0.0, 0.0]));
        let g = tape.constant(Tensor::vector(&[0.6, 0.8]));
        let l = feature_alignment_loss(f, fp, g, g, 15.0, 25.0).unwrap().item();
        assert!((l - 7.5).abs() < 1e-12);
        assert_eq!(feature_alignment_loss(f, f, g, g, 15.0, 25.0).unwrap().item(), 0.0);
    }

    #[test]
    fn cross_modal_examples() {
        let tape = Tape::new();
        let pre = tape.constant(Tensor::vector(&[1.0, 0.0]));
        let pre_p = tape.constant(Tensor::vector(&[0.5, 0.5]));
        let l = cross_modal_loss(pre, pre_p).unwrap().item();
        assert!((l - 2f64.ln()).abs() < 1e-6);
        assert_eq!(cross_modal_loss(pre_p, pre_p).unwrap().item(), 0.0);
    }

    #[test]
    fn frozen_side_gets_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tape = Tape::new();
        let f = tape.param(rand_matrix(&mut rng, 2, 3));
        let fp = tape.param(rand_matrix(&mut rng, 2, 3));
        let l = feature_alignment_loss(f, fp, f, fp, 1.0, 1.0).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.get(f).is_none());
        assert!(g.get(fp).is_some());
    }

    #[test]
    fn individual_loss_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..3 {
            let fz = rand_matrix(&mut rng, 9, 4);
            let e = check_gradients(
                |t, p| content_loss(p[0], t.constant(fz.clone())),
                &[rand_matrix(&mut rng, 9, 4)],
                1e-5,
            )
            .unwrap();
            assert!(e < 1e-4, "content {e}");

            let e = check_gradients(
                |t, p| {
                    let bank = BankVars {
                        mu: p[0],
                        sigma: p[1].softplus(),
                        mu_raw: p[0],
                        sigma_raw: p[1],
                    };
                    let _ = t;
                    diversity_loss(&bank)
                },
                &[rand_matrix(&mut rng, 3, 4), rand_matrix(&mut rng, 3, 4)],
                1e-5,
            )
            .unwrap();
            assert!(e < 1e-4, "diversity {e}");

            let pre = rand_matrix(&mut rng, 2, 3);
            let e = check_gradients(
                |t, p| {
                    let a = t.constant(pre.clone()).softmax_rows()?;
                    cross_modal_loss(a, p[0].softmax_rows()?)
                },
                &[rand_matrix(&mut rng, 2, 3)],
                1e-5,
            )
            .unwrap();
            assert!(e < 1e-4, "cm {e}");
        }
    }

    #[test]
    fn ce_only_total_equals_ce() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let config = crate::encoders::EncoderConfig {
            image_size: 8,
            channels: 2,
            patch_grid: 4,
            token_dim: 8,
            layers: 2,
            heads: 2,
            mlp_ratio: 2,
            embed_dim: 6,
            max_classes: 4,
            max_text_length: 12,
            template_len: 3,
            temperature: 0.07,
            prompt_depth: 2,
            vision_prompts: 2,
            text_prompts: 2,
        };
        let backbone = crate::encoders::Backbone::random(&config, &mut rng).unwrap();
        let prompts = crate::encoders::PromptSet::init(&backbone, &mut rng).unwrap();
        let bank = StyleBank::random(3, 8, Default::default(), &mut rng).unwrap();
        let model = DualEncoder {
            backbone,
            prompts,
            bank,
        };
        let imgs: Vec<Tensor> = (0..2)
            .map(|_| Tensor::new(&[2, 8, 8], (0..128).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap())
            .collect();
        let classes = [0, 1, 3];
        let batch = TrainBatch {
            images: imgs.iter().collect(),
            labels: vec![1, 2],
            class_ids: &classes,
        };
        let b = evaluate_total_loss(&model, &batch, &LossWeights::ce_only(), StyleMode::Shift { layer: 1 }).unwrap();
        assert_eq!(b.total, b.ce);
        let full = evaluate_total_loss(&model, &batch, &LossWeights::default(), StyleMode::Shift { layer: 1 }).unwrap();
        let w = LossWeights::default();
        let expect = full.ce + full.cm + full.feat + w.lambda1 * full.diversity + w.lambda2 * full.content;
        assert!((full.total - expect).abs() < 1e-10);
    }
}
