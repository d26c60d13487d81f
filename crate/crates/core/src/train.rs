//! Two training stages: contrastive pre-training of the backbone, then prompt
//! tuning of prompts and style bases against the frozen backbone.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{cosine_matrix, Tape};
use crate::checkpoint::Checkpoint;
use crate::data::{sha256_hex, Dataset, FewShotSplit};
use crate::encoders::{Backbone, DualEncoder, EncoderConfig, PromptSet, StyleMode};
use crate::error::{dim_err, Error, Result};
use crate::losses::{total_loss, FrozenTargets, LossBreakdown, LossWeights, TrainBatch};
use crate::seed::{derive_seed, rng_for, stream};
use crate::style::{style_of, BankInit, StyleBank, StyleStats, STYLE_EPSILON};
use crate::tensor::Tensor;

/// One SGD-with-momentum update: `v ← m·v + g`, `p ← p − lr·v`.
pub fn sgd_step(
    param: &Tensor,
    grad: &Tensor,
    velocity: &Tensor,
    lr: f64,
    momentum: f64,
) -> Result<(Tensor, Tensor)> {
    if param.shape() != grad.shape() || param.shape() != velocity.shape() {
        return Err(dim_err!(
            "param {:?}, grad {:?}, velocity {:?}",
            param.shape(),
            grad.shape(),
            velocity.shape()
        ));
    }
    let v: Vec<f64> = velocity
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&v, &g)| momentum * v + g)
        .collect();
    let p: Vec<f64> = param
        .data()
        .iter()
        .zip(&v)
        .map(|(&p, &v)| p - lr * v)
        .collect();
    Ok((
        Tensor::new(param.shape(), p)?,
        Tensor::new(param.shape(), v)?,
    ))
}

/// Adam with bias correction, used for pre-training only.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(dim_err!("{} params, {} grads", params.len(), grads.len()));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(dim_err!("param {:?} vs grad {:?}", p.shape(), g.shape()));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let mut data = p.to_vec();
            for j in 0..data.len() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                data[j] -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
            **p = Tensor::new(p.shape(), data)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Upper bound on the learned inverse temperature.
    pub max_logit_scale: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 1e-3,
            seed: 0,
            max_logit_scale: 100.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PretrainStep {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub temperature: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub backbone: Backbone,
    pub steps: Vec<PretrainStep>,
}

/// Symmetric in-batch contrastive loss between images and their class texts.
///
/// Each step draws one image per class, so the batch size is the number of
/// classes in `domains` and no two batch entries share a text.
pub fn pretrain(
    config: &PretrainConfig,
    encoder: &EncoderConfig,
    dataset: &Dataset,
    domains: &[usize],
    mut on_step: impl FnMut(&PretrainStep),
) -> Result<PretrainOutcome> {
    if !(config.learning_rate > 0.0) || config.epochs == 0 {
        return Err(Error::Configuration(
            "pre-training needs a positive learning rate and at least one epoch".into(),
        ));
    }
    let classes = dataset.class_ids();
    if classes.len() < 2 {
        return Err(Error::Contract("contrastive pre-training needs ≥ 2 classes".into()));
    }
    let pools: Vec<Vec<usize>> = classes
        .iter()
        .map(|&c| domains.iter().flat_map(|&d| dataset.cell(d, c)).collect())
        .collect();
    if pools.iter().any(|p| p.is_empty()) {
        return Err(Error::Contract(format!(
            "some class has no samples in domains {domains:?}"
        )));
    }
    let vocab = encoder.vocab();
    let seqs = classes
        .iter()
        .map(|&c| vocab.class_sequence(c))
        .collect::<Result<Vec<_>>>()?;
    let mut backbone = Backbone::random(encoder, &mut rng_for(&[config.seed, stream::BACKBONE]))?;
    let mut adam = Adam::new(config.learning_rate);
    let labels: Vec<usize> = (0..classes.len()).collect();
    let steps_per_epoch = pools.iter().map(Vec::len).max().unwrap();
    let max_log_scale = config.max_logit_scale.ln();
    let mut steps = Vec::with_capacity(config.epochs * steps_per_epoch);

    for epoch in 0..config.epochs {
        let orders: Vec<Vec<usize>> = pools
            .iter()
            .enumerate()
            .map(|(c, pool)| {
                let mut p = pool.clone();
                p.shuffle(&mut rng_for(&[config.seed, stream::PRETRAIN, epoch as u64, c as u64]));
                p
            })
            .collect();
        for k in 0..steps_per_epoch {
            let step = epoch * steps_per_epoch + k;
            let images: Vec<&Tensor> = orders
                .iter()
                .map(|o| &dataset.samples[o[k % o.len()]].image)
                .collect();
            let tape = Tape::new();
            let bb = backbone.bind(&tape, true);
            let img = bb.encode_images(&images, None)?.embeddings;
            let txt = bb.encode_texts(&seqs, None)?;
            let logits = cosine_matrix(img, txt)?.scale_by(bb.log_inv_temperature.exp())?;
            let l_img = logits.log_softmax_rows()?.pick_per_row(&labels)?.mean();
            let l_txt = logits
                .transpose()?
                .log_softmax_rows()?
                .pick_per_row(&labels)?
                .mean();
            let loss = l_img.add(l_txt)?.scale(-0.5);
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::Training {
                    step,
                    reason: format!("contrastive loss is {value}"),
                });
            }
            let grads = tape.backward(loss)?;
            let g: Vec<Tensor> = bb.vars().iter().map(|&v| grads.get_or_zeros(v)).collect();
            drop(bb);
            let mut slots: Vec<&mut Tensor> =
                backbone.tensors_mut().into_iter().map(|(_, t)| t).collect();
            adam.step(&mut slots, &g)?;
            let s = backbone.log_inv_temperature.data()[0];
            if s > max_log_scale {
                backbone.log_inv_temperature = Tensor::scalar(max_log_scale);
            }
            let rec = PretrainStep {
                step,
                epoch,
                loss: value,
                temperature: backbone.temperature(),
            };
            on_step(&rec);
            steps.push(rec);
        }
    }
    Ok(PretrainOutcome { backbone, steps })
}

/// Training-time augmentation of the prompted vision path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    None,
    /// Reflect-pad by 2 pixels and crop back at a random offset.
    Crop,
    /// Style shift through the learnable bank.
    StyleShift,
}

/// Where the style bases start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BankCenter {
    /// Around the standardized regime (mu = 0, sigma = 1).
    Origin,
    /// Around the mean style of the training images at the style layer.
    SourceMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub augmentation: Augmentation,
    /// Layer (1-based) whose output patch tokens are style-shifted.
    pub style_layer: usize,
    pub n_bases: usize,
    /// Chance that a training step runs with the style shift on.
    pub shift_probability: f64,
    pub bank_init: BankInit,
    pub bank_center: BankCenter,
    /// Overrides the encoder's prompt depth; clipped to the layer count.
    pub prompt_depth: Option<usize>,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            epochs: 25,
            batch_size: 4,
            learning_rate: 0.0025,
            momentum: 0.9,
            seed: 0,
            weights: LossWeights::default(),
            augmentation: Augmentation::StyleShift,
            style_layer: 2,
            n_bases: 12,
            shift_probability: 0.25,
            bank_init: BankInit::default(),
            bank_center: BankCenter::SourceMean,
            prompt_depth: None,
        }
    }
}

impl TuneConfig {
    /// Plain independent vision-language prompting: cross-entropy, no augmentation.
    pub fn baseline() -> Self {
        Self {
            weights: LossWeights::ce_only(),
            augmentation: Augmentation::None,
            ..Self::default()
        }
    }

    pub fn validate(&self, encoder: &EncoderConfig) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Configuration(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Configuration(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(0.0..=1.0).contains(&self.shift_probability) {
            return Err(Error::Configuration(format!(
                "shift probability must lie in [0, 1], got {}",
                self.shift_probability
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.n_bases == 0 {
            return Err(Error::Configuration(
                "epochs, batch_size and n_bases must be positive".into(),
            ));
        }
        if self.augmentation == Augmentation::StyleShift
            && (self.style_layer == 0 || self.style_layer >= encoder.layers)
        {
            return Err(Error::Configuration(format!(
                "style layer {} must lie in 1..{}",
                self.style_layer, encoder.layers
            )));
        }
        self.weights.validate()
    }

    pub fn style_mode(&self) -> StyleMode {
        match self.augmentation {
            Augmentation::StyleShift => StyleMode::Shift {
                layer: self.style_layer,
            },
            _ => StyleMode::Off,
        }
    }

    /// Prompt depth actually used, after clipping to the layer count.
    pub fn effective_prompt_depth(&self, encoder: &EncoderConfig) -> usize {
        self.prompt_depth
            .unwrap_or(encoder.prompt_depth)
            .clamp(1, encoder.layers)
    }
}

/// One line of the per-step record stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    /// Stream seed derived from (master seed, epoch, step).
    pub seed: u64,
    pub ce: f64,
    pub cm: f64,
    pub feat: f64,
    pub diversity: f64,
    pub content: f64,
    pub total: f64,
}

impl StepRecord {
    fn new(step: usize, epoch: usize, seed: u64, b: LossBreakdown) -> Self {
        Self {
            step,
            epoch,
            seed,
            ce: b.ce,
            cm: b.cm,
            feat: b.feat,
            diversity: b.diversity,
            content: b.content,
            total: b.total,
        }
    }
}

/// Resumable prompt-tuning state.
#[derive(Debug, Clone, PartialEq)]
pub struct TuneState {
    pub config: TuneConfig,
    pub model: DualEncoder,
    /// Momentum buffers, in [`TuneState::param_names`] order.
    pub velocity: Vec<Tensor>,
    pub next_step: usize,
    pub steps_per_epoch: usize,
    pub records: Vec<StepRecord>,
    pub backbone_checksum: String,
    /// Digest of the training index list, checked on resume.
    pub split_digest: String,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    config: TuneConfig,
    next_step: usize,
    steps_per_epoch: usize,
    records: Vec<StepRecord>,
    backbone_checksum: String,
    split_digest: String,
}

fn split_digest(split: &FewShotSplit) -> String {
    let text = serde_json::to_string(&(&split.train, &split.base_classes)).unwrap();
    sha256_hex(text.as_bytes())
}

fn learnable_slots(model: &mut DualEncoder) -> Vec<(String, &mut Tensor)> {
    let mut out = model.prompts.tensors_mut();
    out.push(("bank.mu_raw".into(), &mut model.bank.mu_raw));
    out.push(("bank.sigma_raw".into(), &mut model.bank.sigma_raw));
    out
}

/// Reflect-pads by `pad` and crops back to the original size at offset `(dy, dx)`.
pub fn pad_crop(image: &Tensor, pad: usize, dy: usize, dx: usize) -> Result<Tensor> {
    let &[c, h, w] = image.shape() else {
        return Err(dim_err!("expected [C, H, W], got {:?}", image.shape()));
    };
    if pad >= h || pad >= w || dy > 2 * pad || dx > 2 * pad {
        return Err(Error::Contract(format!(
            "crop offset ({dy}, {dx}) / pad {pad} invalid for {h}x{w}"
        )));
    }
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let i = if i < 0 { -i } else { i };
        (if i >= n { 2 * (n - 1) - i } else { i }) as usize
    };
    let d = image.data();
    let mut out = Vec::with_capacity(d.len());
    for ch in 0..c {
        for y in 0..h {
            let sy = reflect(y as isize + dy as isize - pad as isize, h);
            for x in 0..w {
                let sx = reflect(x as isize + dx as isize - pad as isize, w);
                out.push(d[ch * h * w + sy * w + sx]);
            }
        }
    }
    Tensor::new(image.shape(), out)
}

const CROP_PAD: usize = 2;

impl TuneState {
    /// Fresh state: prompts and bank drawn from their own seeded streams.
    pub fn new(
        config: &TuneConfig,
        backbone: &Backbone,
        dataset: &Dataset,
        split: &FewShotSplit,
    ) -> Result<Self> {
        config.validate(&backbone.config)?;
        if split.train.is_empty() {
            return Err(Error::Contract("split has no training samples".into()));
        }
        let mut backbone = backbone.clone();
        backbone.config.prompt_depth = config.effective_prompt_depth(&backbone.config);
        let prompts = PromptSet::init(&backbone, &mut rng_for(&[config.seed, stream::PROMPTS]))?;
        let mut bank_rng = rng_for(&[config.seed, stream::BANK]);
        let bank = match config.bank_center {
            BankCenter::Origin => StyleBank::random(
                config.n_bases,
                backbone.config.token_dim,
                config.bank_init,
                &mut bank_rng,
            )?,
            BankCenter::SourceMean => {
                let layer = config.style_layer.clamp(1, backbone.config.layers);
                let center = mean_style(&backbone, dataset, &split.train, layer)?;
                StyleBank::around(config.n_bases, &center, config.bank_init, &mut bank_rng)?
            }
        };
        let mut model = DualEncoder {
            backbone,
            prompts,
            bank,
        };
        let velocity = learnable_slots(&mut model)
            .into_iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        Ok(Self {
            config: config.clone(),
            backbone_checksum: model.backbone.checksum(),
            model,
            velocity,
            next_step: 0,
            steps_per_epoch: split.train.len().div_ceil(config.batch_size),
            records: Vec::new(),
            split_digest: split_digest(split),
        })
    }

    pub fn total_steps(&self) -> usize {
        self.config.epochs * self.steps_per_epoch
    }

    pub fn is_finished(&self) -> bool {
        self.next_step >= self.total_steps()
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut m = self.model.clone();
        learnable_slots(&mut m).into_iter().map(|(n, _)| n).collect()
    }

    pub fn to_checkpoint(&self, provenance: serde_json::Value) -> Result<Checkpoint> {
        let meta = StateMeta {
            config: self.config.clone(),
            next_step: self.next_step,
            steps_per_epoch: self.steps_per_epoch,
            records: self.records.clone(),
            backbone_checksum: self.backbone_checksum.clone(),
            split_digest: self.split_digest.clone(),
        };
        let extra = self
            .param_names()
            .into_iter()
            .zip(&self.velocity)
            .map(|(n, v)| (format!("velocity.{n}"), v.clone()))
            .collect();
        let state = serde_json::to_value(meta).map_err(|e| Error::Format(e.to_string()))?;
        Ok(Checkpoint::for_model(&self.model, extra, provenance, Some(state)))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: StateMeta = ck
            .header
            .state
            .clone()
            .ok_or_else(|| Error::Compatibility("checkpoint carries no training state".into()))
            .and_then(|s| {
                serde_json::from_value(s)
                    .map_err(|e| Error::Compatibility(format!("training state: {e}")))
            })?;
        let model = ck.model()?;
        let mut state = Self {
            config: meta.config,
            model,
            velocity: Vec::new(),
            next_step: meta.next_step,
            steps_per_epoch: meta.steps_per_epoch,
            records: meta.records,
            backbone_checksum: meta.backbone_checksum,
            split_digest: meta.split_digest,
        };
        state.velocity = state
            .param_names()
            .iter()
            .map(|n| ck.get(&format!("velocity.{n}")).cloned())
            .collect::<Result<_>>()?;
        if state.model.backbone.checksum() != state.backbone_checksum {
            return Err(Error::InvariantViolation(
                "checkpoint backbone differs from the backbone it was tuned on".into(),
            ));
        }
        Ok(state)
    }

    /// Train-index order for `epoch`, a fixed function of (seed, epoch).
    fn epoch_order(&self, split: &FewShotSplit, epoch: usize) -> Vec<usize> {
        let mut order = split.train.clone();
        order.shuffle(&mut rng_for(&[self.config.seed, stream::BATCHES, epoch as u64]));
        order
    }

    /// Runs steps until the end of training or until `stop_after` total steps.
    /// Returns the number of steps taken (0 when already finished).
    pub fn run(
        &mut self,
        dataset: &Dataset,
        split: &FewShotSplit,
        stop_after: Option<usize>,
        mut on_step: impl FnMut(&StepRecord),
    ) -> Result<usize> {
        if split_digest(split) != self.split_digest {
            return Err(Error::Compatibility(
                "split differs from the one this run started with".into(),
            ));
        }
        split.check_no_leakage(dataset)?;
        let end = stop_after
            .unwrap_or(usize::MAX)
            .min(self.total_steps());
        if self.next_step >= end {
            return Ok(0);
        }
        let class_ids = split.base_classes.clone();
        let label_of = |c: usize| class_ids.iter().position(|&b| b == c).unwrap();
        let style = self.config.style_mode();
        let crop = self.config.augmentation == Augmentation::Crop;
        let cache = if crop {
            None
        } else {
            Some(FrozenCache::build(&self.model, dataset, &split.train)?)
        };
        let frozen_text = self.model.embed_classes(&class_ids, false)?;

        let start = self.next_step;
        let mut order_epoch = usize::MAX;
        let mut order = Vec::new();
        for step in start..end {
            let epoch = step / self.steps_per_epoch;
            let k = step % self.steps_per_epoch;
            if epoch != order_epoch {
                order = self.epoch_order(split, epoch);
                order_epoch = epoch;
            }
            let idx = &order[k * self.config.batch_size..((k + 1) * self.config.batch_size).min(order.len())];
            let step_seed = derive_seed(&[self.config.seed, epoch as u64, step as u64]);
            let augmented: Vec<Tensor>;
            let images: Vec<&Tensor> = if crop {
                let mut rng = rng_for(&[step_seed, stream::AUGMENT]);
                augmented = idx
                    .iter()
                    .map(|&i| {
                        let (dy, dx) = (rng.gen_range(0..=2 * CROP_PAD), rng.gen_range(0..=2 * CROP_PAD));
                        pad_crop(&dataset.samples[i].image, CROP_PAD, dy, dx)
                    })
                    .collect::<Result<_>>()?;
                augmented.iter().collect()
            } else {
                idx.iter().map(|&i| &dataset.samples[i].image).collect()
            };
            let labels: Vec<usize> = idx.iter().map(|&i| label_of(dataset.samples[i].class_id)).collect();
            let batch = TrainBatch {
                images,
                labels,
                class_ids: &class_ids,
            };
            let frozen = match &cache {
                Some(c) => c.targets(idx, frozen_text.clone())?,
                None => FrozenTargets::compute(&self.model, &batch)?,
            };

            let step_style = if self.config.shift_probability >= 1.0
                || rng_for(&[step_seed, stream::AUGMENT]).gen::<f64>() < self.config.shift_probability
            {
                style
            } else {
                StyleMode::Off
            };
            let tape = Tape::new();
            let terms = total_loss(&tape, &self.model, &batch, &frozen, &self.config.weights, step_style)?;
            let breakdown = terms.breakdown();
            if !breakdown.total.is_finite() {
                return Err(Error::Training {
                    step,
                    reason: format!("total loss is {}", breakdown.total),
                });
            }
            let grads = tape.backward(terms.total)?;
            let mut g: Vec<Tensor> = terms
                .prompts
                .text
                .iter()
                .chain(&terms.prompts.vision)
                .map(|&v| grads.get_or_zeros(v))
                .collect();
            g.push(grads.get_or_zeros(terms.bank.mu_raw));
            g.push(grads.get_or_zeros(terms.bank.sigma_raw));
            drop(terms);

            let (lr, m) = (self.config.learning_rate, self.config.momentum);
            for ((_, slot), (gi, vel)) in learnable_slots(&mut self.model)
                .into_iter()
                .zip(g.iter().zip(self.velocity.iter_mut()))
            {
                let (p, v) = sgd_step(slot, gi, vel, lr, m)?;
                *slot = p;
                *vel = v;
            }
            let rec = StepRecord::new(step, epoch, step_seed, breakdown);
            on_step(&rec);
            self.records.push(rec);
            self.next_step = step + 1;
        }
        if self.model.backbone.checksum() != self.backbone_checksum {
            return Err(Error::InvariantViolation(
                "backbone weights changed during prompt tuning".into(),
            ));
        }
        Ok(end - start)
    }

    /// Summary of a (possibly unfinished) run.
    pub fn run_record(&self, wall_clock_secs: f64) -> RunRecord {
        let mean_total = |epoch: usize| -> Option<f64> {
            let v: Vec<f64> = self
                .records
                .iter()
                .filter(|r| r.epoch == epoch)
                .map(|r| r.total)
                .collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let mut final_metrics = BTreeMap::new();
        if let Some(first) = mean_total(0) {
            final_metrics.insert("first_epoch_mean_total".into(), first);
        }
        if let Some(last) = self.records.last().and_then(|r| mean_total(r.epoch)) {
            final_metrics.insert("last_epoch_mean_total".into(), last);
        }
        RunRecord {
            config: self.config.clone(),
            effective_prompt_depth: self.model.config().prompt_depth,
            backbone_checksum: self.backbone_checksum.clone(),
            seed: self.config.seed,
            steps: self.records.clone(),
            final_metrics,
            wall_clock_secs,
        }
    }
}

/// Average per-image style of frozen patch tokens after `layer` (1-based).
pub fn mean_style(
    backbone: &Backbone,
    dataset: &Dataset,
    indices: &[usize],
    layer: usize,
) -> Result<StyleStats> {
    if indices.is_empty() || layer == 0 || layer > backbone.config.layers {
        return Err(Error::Contract(format!(
            "mean style needs samples and a layer in 1..={}",
            backbone.config.layers
        )));
    }
    let (np, d) = (backbone.config.num_patches(), backbone.config.token_dim);
    let mut mu = vec![0.0; d];
    let mut sigma = vec![0.0; d];
    for chunk in indices.chunks(32) {
        let tape = Tape::new();
        let bb = backbone.bind(&tape, false);
        let images: Vec<&Tensor> = chunk.iter().map(|&i| &dataset.samples[i].image).collect();
        let patches = bb.encode_images(&images, None)?.layer_patches[layer - 1].value();
        for j in 0..chunk.len() {
            let map = Tensor::new(&[np, d], patches.data()[j * np * d..(j + 1) * np * d].to_vec())?;
            let s = style_of(&map, STYLE_EPSILON)?;
            for k in 0..d {
                mu[k] += s.mu.data()[k];
                sigma[k] += s.sigma.data()[k];
            }
        }
    }
    let n = indices.len() as f64;
    StyleStats::new(
        Tensor::vector(&mu.iter().map(|v| v / n).collect::<Vec<_>>()),
        Tensor::vector(&sigma.iter().map(|v| v / n).collect::<Vec<_>>()),
    )
}

/// Frozen-view outputs of the training samples, computed once per run.
struct FrozenCache {
    rows: BTreeMap<usize, (Vec<f64>, Vec<f64>)>,
    embed_dim: usize,
    patch_shape: (usize, usize),
}

impl FrozenCache {
    fn build(model: &DualEncoder, dataset: &Dataset, indices: &[usize]) -> Result<Self> {
        let c = model.config();
        let (np, d) = (c.num_patches(), c.token_dim);
        let mut rows = BTreeMap::new();
        for chunk in indices.chunks(32) {
            let tape = Tape::new();
            let bb = model.backbone.bind(&tape, false);
            let images: Vec<&Tensor> = chunk.iter().map(|&i| &dataset.samples[i].image).collect();
            let out = bb.encode_images(&images, None)?;
            let emb = out.embeddings.value();
            let patches = out.layer_patches.last().unwrap().value();
            for (j, &i) in chunk.iter().enumerate() {
                rows.insert(
                    i,
                    (
                        emb.row(j)?.to_vec(),
                        patches.data()[j * np * d..(j + 1) * np * d].to_vec(),
                    ),
                );
            }
        }
        Ok(Self {
            rows,
            embed_dim: c.embed_dim,
            patch_shape: (np, d),
        })
    }

    fn targets(&self, idx: &[usize], text: Tensor) -> Result<FrozenTargets> {
        let mut image = Vec::with_capacity(idx.len() * self.embed_dim);
        let mut patches = Vec::new();
        for i in idx {
            let (e, p) = &self.rows[i];
            image.extend_from_slice(e);
            patches.extend_from_slice(p);
        }
        Ok(FrozenTargets {
            image: Tensor::new(&[idx.len(), self.embed_dim], image)?,
            patches: Tensor::new(&[idx.len() * self.patch_shape.0, self.patch_shape.1], patches)?,
            text,
        })
    }
}

/// Configuration snapshot, per-step loss stream and summary of one tuning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TuneConfig,
    pub effective_prompt_depth: usize,
    pub backbone_checksum: String,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub final_metrics: BTreeMap<String, f64>,
    /// Not part of the reproducible content.
    pub wall_clock_secs: f64,
}

impl RunRecord {
    /// One JSON object per line, one line per step.
    pub fn steps_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&serde_json::to_string(s).expect("plain record serializes"));
            out.push('\n');
        }
        out
    }
}

/// Fresh tuning run to completion.
pub fn prompt_tune(
    config: &TuneConfig,
    backbone: &Backbone,
    dataset: &Dataset,
    split: &FewShotSplit,
) -> Result<(TuneState, RunRecord)> {
    let start = Instant::now();
    let mut state = TuneState::new(config, backbone, dataset, split)?;
    state.run(dataset, split, None, |_| {})?;
    let record = state.run_record(start.elapsed().as_secs_f64());
    Ok((state, record))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_examples() {
        let (p, _) = sgd_step(
            &Tensor::vector(&[0.0]),
            &Tensor::vector(&[1.0]),
            &Tensor::vector(&[0.0]),
            0.1,
            0.0,
        )
        .unwrap();
        assert_eq!(p.data(), &[-0.1]);

        let p0 = Tensor::vector(&[0.3, -2.0]);
        let (p, v) = sgd_step(&p0, &Tensor::zeros(&[2]), &Tensor::zeros(&[2]), 0.5, 0.9).unwrap();
        assert!(p.bit_eq(&p0));
        assert_eq!(v.data(), &[0.0, 0.0]);

        // Hand recurrence: v1 = g1, p1 = p0 − lr·g1; v2 = 0.9·v1 + g2, p2 = p1 − lr·v2.
        let (lr, m) = (0.1, 0.9);
        let (p1, v1) = sgd_step(&Tensor::vector(&[1.0]), &Tensor::vector(&[2.0]), &Tensor::vector(&[0.0]), lr, m).unwrap();
        let (p2, v2) = sgd_step(&p1, &Tensor::vector(&[-1.0]), &v1, lr, m).unwrap();
        let v2_hand = 0.9 * 2.0 - 1.0;
        assert!((v2.data()[0] - v2_hand).abs() < 1e-15);
        assert!((p2.data()[0] - (1.0 - 0.1 * 2.0 - 0.1 * v2_hand)).abs() < 1e-15);

        assert!(matches!(
            sgd_step(&Tensor::zeros(&[2]), &Tensor::zeros(&[3]), &Tensor::zeros(&[2]), 0.1, 0.0),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn pad_crop_centre_is_identity() {
        let img = Tensor::new(&[1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        assert!(pad_crop(&img, 2, 2, 2).unwrap().bit_eq(&img));
        let shifted = pad_crop(&img, 1, 0, 0).unwrap();
        // Row −1 reflects to row 1, column −1 to column 1.
        assert_eq!(shifted.data()[0], 5.0);
        assert_eq!(shifted.data()[5], 0.0);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Tensor::vector(&[1.0, -1.0]);
        let mut adam = Adam::new(0.01);
        adam.step(&mut [&mut p], &[Tensor::vector(&[3.0, -0.2])]).unwrap();
        assert!((p.data()[0] - 0.99).abs() < 1e-9);
        assert!((p.data()[1] + 0.99).abs() < 1e-9);
    }
}
