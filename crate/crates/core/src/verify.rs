//! Self-check suite behind `stylepro verify`: loop-based oracles for every
//! equation, finite-difference gradient checks on a tiny model, and the
//! structural invariants (frozen backbone, degenerate-config equivalence,
//! determinism). Each check reports pass/fail plus the worst observed error.

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::data::{default_classes, default_domains, generate_dataset, make_split, Dataset, DatasetSpec, FewShotSplit, SplitSpec};
use crate::encoders::{Backbone, DualEncoder, EncoderConfig, PromptSet, StyleMode};
use crate::error::Result;
use crate::eval::harmonic_mean;
use crate::gradcheck::{check_gradients, DEFAULT_STEP};
use crate::losses::{
    content_loss, cross_entropy_loss, cross_modal_loss, diversity_loss, feature_alignment_loss, total_loss_with,
    FrozenTargets, LossTerms, LossWeights, TrainBatch,
};
use crate::seed::rng_for;
use crate::style::{
    apply_style, extract_style, map_style, similarity_weights, wasserstein_distance, BankInit, BankVars, StyleBank,
    STYLE_EPSILON,
};
use crate::tensor::Tensor;
use crate::train::{Augmentation, TuneConfig, TuneState};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error[{}]: {e}", e.category())));
    Check {
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape matches length")
}

// Plain-loop reference implementations on row-major slices.

fn oracle_moments(x: &[f64], rows: usize, cols: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut mu = vec![0.0; cols];
    let mut sd = vec![0.0; cols];
    for j in 0..cols {
        let mut s = 0.0;
        for i in 0..rows {
            s += x[i * cols + j];
        }
        mu[j] = s / rows as f64;
        let mut v = 0.0;
        for i in 0..rows {
            let c = x[i * cols + j] - mu[j];
            v += c * c;
        }
        sd[j] = (v / rows as f64 + eps).sqrt();
    }
    (mu, sd)
}

fn oracle_w2(mu_a: &[f64], sd_a: &[f64], mu_b: &[f64], sd_b: &[f64]) -> f64 {
    let mut s = 0.0;
    for d in 0..mu_a.len() {
        s += (mu_a[d] - mu_b[d]).powi(2) + (sd_a[d] - sd_b[d]).powi(2);
    }
    s
}

fn oracle_softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn oracle_cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Worst absolute error of the five style operations against loop oracles.
pub fn style_oracle_error(cases: usize, seed: u64) -> Result<f64> {
    let mut rng = rng_for(&[seed, 0x57]);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (p, d, n) = (rng.gen_range(2..10), rng.gen_range(1..7), rng.gen_range(1..6));
        let x = random_tensor(&[p, d], -3.0, 3.0, &mut rng);
        let mu_raw = random_tensor(&[n, d], -2.0, 2.0, &mut rng);
        let sd_raw = random_tensor(&[n, d], -2.0, 2.0, &mut rng);
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let bank = BankVars::from_raw(tape.constant(mu_raw.clone()), tape.constant(sd_raw.clone()))?;
        let cur = extract_style(xv, STYLE_EPSILON)?;
        let w = similarity_weights(cur, &bank)?;
        let mapped = map_style(w, &bank)?;
        let shifted = apply_style(xv, mapped, STYLE_EPSILON)?;

        let (mu, sd) = oracle_moments(x.data(), p, d, STYLE_EPSILON);
        worst = worst.max(max_diff(cur.mu.value().data(), &mu));
        worst = worst.max(max_diff(cur.sigma.value().data(), &sd));
        let bmu = mu_raw.data();
        let bsd: Vec<f64> = sd_raw.data().iter().map(|&r| oracle_softplus(r)).collect();
        let dist: Vec<f64> = (0..n)
            .map(|k| oracle_w2(&mu, &sd, &bmu[k * d..(k + 1) * d], &bsd[k * d..(k + 1) * d]))
            .collect();
        let w_dist = wasserstein_distance(cur, crate::style::StyleVars {
            mu: tape.constant(Tensor::vector(&bmu[..d])),
            sigma: tape.constant(Tensor::vector(&bsd[..d])),
        })?;
        worst = worst.max((w_dist.item() - dist[0]).abs());
        let sims: Vec<f64> = dist.iter().map(|v| 1.0 / (1.0 + v)).collect();
        let m = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = sims.iter().map(|s| (s - m).exp()).sum();
        let omega: Vec<f64> = sims.iter().map(|s| (s - m).exp() / z).collect();
        worst = worst.max(max_diff(w.value().data(), &omega));
        let mut tmu = vec![0.0; d];
        let mut tsd = vec![0.0; d];
        for k in 0..n {
            for j in 0..d {
                tmu[j] += omega[k] * bmu[k * d + j];
                tsd[j] += omega[k] * bsd[k * d + j];
            }
        }
        worst = worst.max(max_diff(mapped.mu.value().data(), &tmu));
        worst = worst.max(max_diff(mapped.sigma.value().data(), &tsd));
        let mut expect = vec![0.0; p * d];
        for i in 0..p {
            for j in 0..d {
                expect[i * d + j] = tsd[j] * (x.data()[i * d + j] - mu[j]) / sd[j] + tmu[j];
            }
        }
        worst = worst.max(max_diff(shifted.value().data(), &expect));
    }
    Ok(worst)
}

/// Worst absolute error of the five losses against loop oracles.
pub fn loss_oracle_error(cases: usize, seed: u64) -> Result<f64> {
    let mut rng = rng_for(&[seed, 0x1055]);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (b, c, d) = (rng.gen_range(1..5), rng.gen_range(2..6), rng.gen_range(2..7));
        let tau = rng.gen_range(0.05..1.0);
        let img = random_tensor(&[b, d], -1.0, 1.0, &mut rng);
        let txt = random_tensor(&[c, d], -1.0, 1.0, &mut rng);
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
        let tape = Tape::new();
        let ce = cross_entropy_loss(tape.constant(img.clone()), tape.constant(txt.clone()), &labels, tau)?.item();
        let mut expect = 0.0;
        for i in 0..b {
            let logits: Vec<f64> = (0..c)
                .map(|k| oracle_cos(&img.data()[i * d..(i + 1) * d], &txt.data()[k * d..(k + 1) * d]) / tau)
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
            expect += lse - logits[labels[i]];
        }
        worst = worst.max((ce - expect / b as f64).abs());

        // Diversity over realized bases.
        let n = rng.gen_range(2..6);
        let mu_raw = random_tensor(&[n, d], -2.0, 2.0, &mut rng);
        let sd_raw = random_tensor(&[n, d], -2.0, 2.0, &mut rng);
        let bank = BankVars::from_raw(tape.constant(mu_raw.clone()), tape.constant(sd_raw.clone()))?;
        let div = diversity_loss(&bank)?.item();
        let sd: Vec<f64> = sd_raw.data().iter().map(|&r| oracle_softplus(r)).collect();
        let mut expect = 0.0;
        for m in [mu_raw.data(), &sd[..]] {
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        expect += oracle_cos(&m[i * d..(i + 1) * d], &m[j * d..(j + 1) * d]).abs();
                    }
                }
            }
        }
        worst = worst.max((div - expect).abs());

        // Content: standardized cross-covariance diagonal.
        let p = rng.gen_range(3..10);
        let fp = random_tensor(&[p, d], -2.0, 2.0, &mut rng);
        let ff = random_tensor(&[p, d], -2.0, 2.0, &mut rng);
        let content = content_loss(tape.constant(fp.clone()), tape.constant(ff.clone()))?.item();
        let (mp, sp) = oracle_moments(fp.data(), p, d, 0.0);
        let (mf, sf) = oracle_moments(ff.data(), p, d, 0.0);
        let mut sq = 0.0;
        for j in 0..d {
            let mut cov = 0.0;
            for i in 0..p {
                cov += (fp.data()[i * d + j] - mp[j]) / sp[j] * (ff.data()[i * d + j] - mf[j]) / sf[j];
            }
            sq += (cov / p as f64 - 1.0).powi(2);
        }
        worst = worst.max((content - sq.sqrt()).abs());

        // Feature alignment.
        let (lf, lg) = (rng.gen_range(0.0..30.0), rng.gen_range(0.0..30.0));
        let img_p = random_tensor(&[b, d], -1.0, 1.0, &mut rng);
        let txt_p = random_tensor(&[c, d], -1.0, 1.0, &mut rng);
        let feat = feature_alignment_loss(
            tape.constant(img.clone()),
            tape.constant(img_p.clone()),
            tape.constant(txt.clone()),
            tape.constant(txt_p.clone()),
            lf,
            lg,
        )?
        .item();
        let sqd = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        let expect = (lf * sqd(&img, &img_p) / b as f64 + lg * sqd(&txt, &txt_p) / c as f64) / d as f64;
        worst = worst.max((feat - expect).abs());

        // KL between row distributions.
        let probs = |rng: &mut ChaCha8Rng| -> Tensor {
            let raw = random_tensor(&[b, c], 0.05, 1.0, rng);
            let mut v = raw.to_vec();
            for r in v.chunks_mut(c) {
                let s: f64 = r.iter().sum();
                r.iter_mut().for_each(|x| *x /= s);
            }
            Tensor::new(&[b, c], v).expect("shape matches")
        };
        let (pre, pre_p) = (probs(&mut rng), probs(&mut rng));
        let kl = cross_modal_loss(tape.constant(pre.clone()), tape.constant(pre_p.clone()))?.item();
        let expect: f64 = pre
            .data()
            .iter()
            .zip(pre_p.data())
            .map(|(a, q)| a * (a / q).ln())
            .sum::<f64>()
            / b as f64;
        worst = worst.max((kl - expect).abs());
    }
    Ok(worst)
}

/// Encoder small enough for exhaustive finite differences: D=8, L=2.
pub fn tiny_encoder_config() -> EncoderConfig {
    EncoderConfig {
        image_size: 8,
        channels: 3,
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
    }
}

/// A tiny model with N=3 bases, two images and three classes.
pub struct TinyProblem {
    pub model: DualEncoder,
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub class_ids: Vec<usize>,
}

impl TinyProblem {
    pub fn new(seed: u64) -> Result<Self> {
        let mut rng = rng_for(&[seed, 0x7191]);
        let config = tiny_encoder_config();
        let backbone = Backbone::random(&config, &mut rng)?;
        let prompts = PromptSet::init(&backbone, &mut rng)?;
        let bank = StyleBank::random(3, config.token_dim, BankInit::default(), &mut rng)?;
        let images = (0..2)
            .map(|_| random_tensor(&[3, 8, 8], -1.0, 1.0, &mut rng))
            .collect();
        Ok(Self {
            model: DualEncoder { backbone, prompts, bank },
            images,
            labels: vec![rng.gen_range(0..3), rng.gen_range(0..3)],
            class_ids: vec![0, 1, 3],
        })
    }

    pub fn batch(&self) -> TrainBatch<'_> {
        TrainBatch {
            images: self.images.iter().collect(),
            labels: self.labels.clone(),
            class_ids: &self.class_ids,
        }
    }

    /// Learnable tensors in the order text prompts, vision prompts, mu_raw, sigma_raw.
    pub fn parameters(&self) -> Vec<Tensor> {
        let p = &self.model.prompts;
        let mut out: Vec<Tensor> = p.text.iter().chain(&p.vision).cloned().collect();
        out.push(self.model.bank.mu_raw.clone());
        out.push(self.model.bank.sigma_raw.clone());
        out
    }

    /// Records the objective with `vars` (as from [`Self::parameters`]) as its learnable inputs.
    pub fn terms<'t>(
        &self,
        tape: &'t Tape,
        vars: &[crate::autodiff::Var<'t>],
        frozen: &FrozenTargets,
        weights: &LossWeights,
    ) -> Result<LossTerms<'t>> {
        let depth = self.model.prompts.text.len();
        let prompts = crate::encoders::BoundPrompts {
            text: vars[..depth].to_vec(),
            vision: vars[depth..2 * depth].to_vec(),
        };
        let bank = BankVars::from_raw(vars[2 * depth], vars[2 * depth + 1])?;
        total_loss_with(
            tape,
            &self.model,
            prompts,
            bank,
            &self.batch(),
            frozen,
            weights,
            StyleMode::Shift { layer: 1 },
        )
    }
}

pub const LOSS_TERM_NAMES: [&str; 6] = ["ce", "cm", "feat", "diversity", "content", "total"];

/// Max relative gradient error per loss term (in [`LOSS_TERM_NAMES`] order)
/// over every learnable entry of the tiny problem.
pub fn gradient_errors(seed: u64) -> Result<Vec<f64>> {
    let problem = TinyProblem::new(seed)?;
    let frozen = FrozenTargets::compute(&problem.model, &problem.batch())?;
    let weights = LossWeights::default();
    let params = problem.parameters();
    (0..LOSS_TERM_NAMES.len())
        .map(|k| {
            check_gradients(
                |tape, vars| {
                    let t = problem.terms(tape, vars, &frozen, &weights)?;
                    Ok([t.ce, t.cm, t.feat, t.diversity, t.content, t.total][k])
                },
                &params,
                DEFAULT_STEP,
            )
        })
        .collect()
}

/// A small synthetic task for the training invariants: 4 classes, 2 domains,
/// 8×8 images, 2 shots of 2 base classes.
pub fn tiny_task(seed: u64) -> Result<(Backbone, Dataset, FewShotSplit)> {
    let config = tiny_encoder_config();
    let backbone = Backbone::random(&config, &mut rng_for(&[seed, 0xb0]))?;
    let dataset = generate_dataset(&DatasetSpec {
        seed,
        image_size: config.image_size,
        channels: config.channels,
        samples_per_cell: 4,
        domains: default_domains()[..2].to_vec(),
        classes: default_classes(4)?,
    })?;
    let split = make_split(
        &dataset,
        &SplitSpec {
            fraction_base: 0.5,
            shots: 2,
            seed,
            source_domains: vec![0],
            target_domains: vec![1],
        },
    )?;
    Ok((backbone, dataset, split))
}

pub fn tiny_tune_config(seed: u64) -> TuneConfig {
    TuneConfig {
        epochs: 3,
        batch_size: 2,
        style_layer: 1,
        n_bases: 3,
        seed,
        ..TuneConfig::default()
    }
}

fn run_to_end(config: &TuneConfig, task: &(Backbone, Dataset, FewShotSplit)) -> Result<TuneState> {
    let mut s = TuneState::new(config, &task.0, &task.1, &task.2)?;
    s.run(&task.1, &task.2, None, |_| {})?;
    Ok(s)
}

fn frozen_invariance(seed: u64) -> Result<bool> {
    let a = TinyProblem::new(seed)?;
    let b = TinyProblem::new(seed + 1000)?;
    let mut other = a.model.clone();
    other.prompts = b.model.prompts.clone();
    other.bank = b.model.bank.clone();
    let mut same = true;
    for img in &a.images {
        let x = a.model.encode_image_frozen(img)?;
        let y = other.encode_image_frozen(img)?;
        same &= x.embedding.bit_eq(&y.embedding);
        same &= x.layer_patches.iter().zip(&y.layer_patches).all(|(p, q)| p.bit_eq(q));
    }
    let vocab = a.model.config().vocab();
    for &c in &a.class_ids {
        let s = vocab.class_sequence(c)?;
        same &= a.model.encode_text_frozen(&s)?.bit_eq(&other.encode_text_frozen(&s)?);
    }
    Ok(same)
}

/// Runs every check; `on_check` sees each result as it completes.
pub fn run_suite(mut on_check: impl FnMut(&Check)) -> Vec<Check> {
    let mut out = Vec::new();
    let mut push = |c: Check| {
        on_check(&c);
        out.push(c);
    };
    push(check("style equations vs loop oracles", || {
        let e = style_oracle_error(100, 1)?;
        Ok((e <= 1e-10, format!("max abs error {e:.2e} over 100 cases")))
    }));
    push(check("loss equations vs loop oracles", || {
        let e = loss_oracle_error(100, 2)?;
        Ok((e <= 1e-10, format!("max abs error {e:.2e} over 100 cases")))
    }));
    push(check("gradients vs finite differences", || {
        let mut worst: f64 = 0.0;
        for seed in 0..3 {
            worst = gradient_errors(seed)?.into_iter().fold(worst, f64::max);
        }
        Ok((worst < 1e-4, format!("max relative error {worst:.2e}, 6 terms x 3 seeds")))
    }));
    push(check("style round trip", || {
        let mut rng = rng_for(&[3]);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let x = random_tensor(&[16, 8], -3.0, 3.0, &mut rng);
            let tape = Tape::new();
            let xv = tape.constant(x.clone());
            let own = extract_style(xv, STYLE_EPSILON)?;
            worst = worst.max(apply_style(xv, own, STYLE_EPSILON)?.value().max_abs_diff(&x)?);
            let t = crate::style::StyleVars {
                mu: tape.constant(random_tensor(&[8], -2.0, 2.0, &mut rng)),
                sigma: tape.constant(random_tensor(&[8], 0.3, 2.0, &mut rng)),
            };
            let back = extract_style(apply_style(xv, t, STYLE_EPSILON)?, STYLE_EPSILON)?;
            worst = worst.max(back.mu.value().max_abs_diff(&t.mu.value())?);
            worst = worst.max(back.sigma.value().max_abs_diff(&t.sigma.value())?);
        }
        Ok((worst <= 1e-3, format!("max abs error {worst:.2e}")))
    }));
    push(check("similarity weights", || {
        let mut rng = rng_for(&[4]);
        let mut ok = true;
        for _ in 0..1000 {
            let (n, d) = (rng.gen_range(1..10), rng.gen_range(1..8));
            let tape = Tape::new();
            let bank = BankVars::from_raw(
                tape.constant(random_tensor(&[n, d], -3.0, 3.0, &mut rng)),
                tape.constant(random_tensor(&[n, d], -3.0, 3.0, &mut rng)),
            )?;
            let cur = extract_style(tape.constant(random_tensor(&[6, d], -3.0, 3.0, &mut rng)), STYLE_EPSILON)?;
            let w = similarity_weights(cur, &bank)?.value();
            let dist = crate::style::basis_distances(cur, &bank)?.value();
            let argmax = |v: &[f64]| (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b });
            let argmin = |v: &[f64]| (0..v.len()).fold(0, |b, i| if v[i] < v[b] { i } else { b });
            ok &= (w.data().iter().sum::<f64>() - 1.0).abs() <= 1e-12;
            ok &= w.data()[argmin(dist.data())] == w.data()[argmax(w.data())];
        }
        Ok((ok, "1000 random banks".into()))
    }));
    push(check("harmonic mean reproduces the reference table", || {
        let worst = reference_table_deviation()?;
        Ok((worst <= 0.01, format!("max deviation {worst:.4} over 11 rows and the average")))
    }));
    push(check("zero extra weights reproduce the baseline", || {
        let task = tiny_task(5)?;
        let base = run_to_end(&TuneConfig { seed: 5, ..tiny_baseline() }, &task)?;
        let zeroed = run_to_end(
            &TuneConfig {
                weights: LossWeights::ce_only(),
                augmentation: Augmentation::None,
                ..tiny_tune_config(5)
            },
            &task,
        )?;
        let same = base.model.prompts == zeroed.model.prompts
            && base.records.iter().zip(&zeroed.records).all(|(a, b)| a.ce.to_bits() == b.ce.to_bits());
        Ok((same, "prompts and per-step losses bit-identical".into()))
    }));
    push(check("frozen backbone and frozen outputs", || {
        let task = tiny_task(6)?;
        let before = task.0.checksum();
        let s = run_to_end(&tiny_tune_config(6), &task)?;
        let ok = s.model.backbone.checksum() == before && task.0.checksum() == before && frozen_invariance(6)?;
        Ok((ok, "checksum unchanged; frozen views bit-identical".into()))
    }));
    push(check("determinism and resume", || {
        let task = tiny_task(7)?;
        let cfg = tiny_tune_config(7);
        let a = run_to_end(&cfg, &task)?;
        let b = run_to_end(&cfg, &task)?;
        let mut half = TuneState::new(&cfg, &task.0, &task.1, &task.2)?;
        half.run(&task.1, &task.2, Some(a.total_steps() / 2), |_| {})?;
        let bytes = half.to_checkpoint(serde_json::Value::Null)?.to_bytes()?;
        let ck = crate::checkpoint::Checkpoint::from_bytes(&bytes, std::path::Path::new("resume"))?;
        let mut resumed = TuneState::from_checkpoint(&ck)?;
        resumed.run(&task.1, &task.2, None, |_| {})?;
        let ck_a = a.to_checkpoint(serde_json::Value::Null)?.to_bytes()?;
        let ok = ck_a == b.to_checkpoint(serde_json::Value::Null)?.to_bytes()?
            && ck_a == resumed.to_checkpoint(serde_json::Value::Null)?.to_bytes()?
            && a.run_record(0.0) == resumed.run_record(0.0);
        Ok((ok, format!("{} steps, interrupted at {}", a.total_steps(), a.total_steps() / 2)))
    }));
    out
}

/// Cross-entropy-only counterpart of [`tiny_tune_config`].
pub fn tiny_baseline() -> TuneConfig {
    TuneConfig {
        epochs: 3,
        batch_size: 2,
        style_layer: 1,
        n_bases: 3,
        ..TuneConfig::baseline()
    }
}

/// Published per-dataset (base, novel, harmonic mean) accuracies on 11 benchmarks.
pub const REFERENCE_TABLE: [(f64, f64, f64); 11] = [
    (77.58, 71.68, 74.51),
    (98.38, 95.44, 96.89),
    (95.64, 98.63, 97.11),
    (78.53, 75.12, 76.79),
    (98.04, 76.86, 86.17),
    (90.93, 92.29, 91.60),
    (42.79, 39.28, 40.96),
    (82.66, 80.61, 81.62),
    (83.41, 65.58, 73.43),
    (94.52, 82.74, 88.24),
    (86.83, 80.40, 83.49),
];

/// The published average row: mean base, mean novel, and the mean of the
/// per-dataset harmonic means (not the harmonic mean of the two means).
pub const REFERENCE_AVERAGE: (f64, f64, f64) = (84.48, 78.06, 80.98);

/// Worst deviation of recomputed harmonic means from the reference table,
/// including the average row.
pub fn reference_table_deviation() -> Result<f64> {
    let mut worst: f64 = 0.0;
    let mut sum_h = 0.0;
    for (b, n, h) in REFERENCE_TABLE {
        let got = harmonic_mean(b, n)?;
        worst = worst.max((got - h).abs());
        sum_h += got;
    }
    let mean_of = |f: fn(&(f64, f64, f64)) -> f64| REFERENCE_TABLE.iter().map(f).sum::<f64>() / REFERENCE_TABLE.len() as f64;
    let (b, n, h) = REFERENCE_AVERAGE;
    worst = worst.max((mean_of(|r| r.0) - b).abs());
    worst = worst.max((mean_of(|r| r.1) - n).abs());
    worst = worst.max((sum_h / REFERENCE_TABLE.len() as f64 - h).abs());
    Ok(worst)
}

pub fn format_table(checks: &[Check]) -> String {
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    let mut out = String::new();
    for c in checks {
        out.push_str(&format!(
            "{:<4}  {:<width$}  {:>7.2}s  {}\n",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.seconds,
            c.detail
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let checks = run_suite(|c| eprintln!("{}", format_table(std::slice::from_ref(c))));
        assert!(checks.iter().all(|c| c.passed), "{}", format_table(&checks));
    }
}
