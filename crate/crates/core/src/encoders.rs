//! Miniature dual encoder: a patch-based vision transformer and a token-based
//! text transformer sharing one set of backbone weights between a frozen view
//! and a prompted view.
//!
//! Sequences are packed row-wise so a whole batch runs through each layer as
//! one matrix. Vision sequences are `[prompts?, CLS, patches]`; text
//! sequences are `[SOS, prompts?, template, class, EOS]`. Positional
//! embeddings are attached to the base tokens before prompts are inserted, so
//! prompt tokens carry none.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{cosine_matrix, Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::style::{style_shift_layer, BankVars, StyleBank, STYLE_EPSILON};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;
const PROMPT_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Square image side in pixels.
    pub image_size: usize,
    pub channels: usize,
    /// Patches per side; an image yields `patch_grid²` patches.
    pub patch_grid: usize,
    pub token_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Dimension of the shared image/text embedding space.
    pub embed_dim: usize,
    /// Number of class-name tokens in the vocabulary.
    pub max_classes: usize,
    pub max_text_length: usize,
    /// Length of the fixed synthetic template standing in for "a photo of a".
    pub template_len: usize,
    /// Initial temperature; pre-training learns it.
    pub temperature: f64,
    /// Layers 1..=prompt_depth receive fresh prompts.
    pub prompt_depth: usize,
    pub vision_prompts: usize,
    pub text_prompts: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 24,
            channels: 3,
            patch_grid: 4,
            token_dim: 32,
            layers: 4,
            heads: 4,
            mlp_ratio: 2,
            embed_dim: 32,
            max_classes: 16,
            max_text_length: 16,
            template_len: 4,
            temperature: 0.07,
            prompt_depth: 3,
            vision_prompts: 4,
            text_prompts: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Configuration(m));
        if self.layers == 0 || self.prompt_depth == 0 || self.prompt_depth > self.layers {
            return bad(format!(
                "prompt depth {} must lie in 1..={}",
                self.prompt_depth, self.layers
            ));
        }
        if self.heads == 0 || self.token_dim % self.heads != 0 {
            return bad(format!(
                "token_dim {} not divisible by {} heads",
                self.token_dim, self.heads
            ));
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.patch_grid < 2 || self.image_size % self.patch_grid != 0 {
            return bad(format!(
                "image size {} must split into a {}x{} patch grid of at least 2x2",
                self.image_size, self.patch_grid, self.patch_grid
            ));
        }
        if self.channels == 0 || self.embed_dim == 0 || self.mlp_ratio == 0 {
            return bad("channels, embed_dim and mlp_ratio must be positive".into());
        }
        if self.vision_prompts == 0 || self.text_prompts == 0 {
            return bad("prompt counts must be positive".into());
        }
        if self.prompted_text_len() > self.max_text_length {
            return bad(format!(
                "prompted text length {} exceeds max_text_length {}",
                self.prompted_text_len(),
                self.max_text_length
            ));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        self.patch_grid * self.patch_grid
    }

    pub fn patch_size(&self) -> usize {
        self.image_size / self.patch_grid
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size() * self.patch_size()
    }

    pub fn vocab_size(&self) -> usize {
        2 + self.template_len + self.max_classes
    }

    pub fn base_text_len(&self) -> usize {
        self.template_len + 3
    }

    pub fn prompted_text_len(&self) -> usize {
        self.base_text_len() + self.text_prompts
    }

    /// Tokens per vision sequence in the frozen (`false`) or prompted view.
    pub fn vision_seq_len(&self, prompted: bool) -> usize {
        self.num_patches() + 1 + if prompted { self.vision_prompts } else { 0 }
    }

    pub fn vocab(&self) -> Vocab {
        Vocab {
            template_len: self.template_len,
            max_classes: self.max_classes,
        }
    }
}

/// Token layout: SOS, EOS, template tokens, then one token per class name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    pub template_len: usize,
    pub max_classes: usize,
}

impl Vocab {
    pub const SOS: usize = 0;
    pub const EOS: usize = 1;

    pub fn size(&self) -> usize {
        2 + self.template_len + self.max_classes
    }

    pub fn template_tokens(&self) -> Vec<usize> {
        (2..2 + self.template_len).collect()
    }

    pub fn class_token(&self, class_id: usize) -> Result<usize> {
        if class_id >= self.max_classes {
            return Err(Error::Vocabulary {
                id: 2 + self.template_len + class_id,
                vocab_size: self.size(),
            });
        }
        Ok(2 + self.template_len + class_id)
    }

    /// `[SOS, template…, class, EOS]`
    pub fn class_sequence(&self, class_id: usize) -> Result<Vec<usize>> {
        let mut seq = vec![Self::SOS];
        seq.extend(self.template_tokens());
        seq.push(self.class_token(class_id)?);
        seq.push(Self::EOS);
        Ok(seq)
    }
}

fn normal_tensor<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
}

/// Weights of one pre-norm transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl BlockWeights {
    fn random<R: Rng>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        let s = 1.0 / (dim as f64).sqrt();
        Self {
            ln1_g: Tensor::full(&[dim], 1.0),
            ln1_b: Tensor::zeros(&[dim]),
            wq: normal_tensor(&[dim, dim], s, rng),
            bq: Tensor::zeros(&[dim]),
            wk: normal_tensor(&[dim, dim], s, rng),
            bk: Tensor::zeros(&[dim]),
            wv: normal_tensor(&[dim, dim], s, rng),
            bv: Tensor::zeros(&[dim]),
            wo: normal_tensor(&[dim, dim], s, rng),
            bo: Tensor::zeros(&[dim]),
            ln2_g: Tensor::full(&[dim], 1.0),
            ln2_b: Tensor::zeros(&[dim]),
            w1: normal_tensor(&[dim, hidden], s, rng),
            b1: Tensor::zeros(&[hidden]),
            w2: normal_tensor(&[hidden, dim], 1.0 / (hidden as f64).sqrt(), rng),
            b2: Tensor::zeros(&[dim]),
        }
    }

    fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 16] {
        [
            ("ln1_g", &mut self.ln1_g),
            ("ln1_b", &mut self.ln1_b),
            ("wq", &mut self.wq),
            ("bq", &mut self.bq),
            ("wk", &mut self.wk),
            ("bk", &mut self.bk),
            ("wv", &mut self.wv),
            ("bv", &mut self.bv),
            ("wo", &mut self.wo),
            ("bo", &mut self.bo),
            ("ln2_g", &mut self.ln2_g),
            ("ln2_b", &mut self.ln2_b),
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }

    fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundBlock<'t> {
        let l = |t: &Tensor| tape.leaf(t.clone(), trainable);
        BoundBlock {
            ln1_g: l(&self.ln1_g),
            ln1_b: l(&self.ln1_b),
            wq: l(&self.wq),
            bq: l(&self.bq),
            wk: l(&self.wk),
            bk: l(&self.bk),
            wv: l(&self.wv),
            bv: l(&self.bv),
            wo: l(&self.wo),
            bo: l(&self.bo),
            ln2_g: l(&self.ln2_g),
            ln2_b: l(&self.ln2_b),
            w1: l(&self.w1),
            b1: l(&self.b1),
            w2: l(&self.w2),
            b2: l(&self.b2),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundBlock<'t> {
    ln1_g: Var<'t>,
    ln1_b: Var<'t>,
    wq: Var<'t>,
    bq: Var<'t>,
    wk: Var<'t>,
    bk: Var<'t>,
    wv: Var<'t>,
    bv: Var<'t>,
    wo: Var<'t>,
    bo: Var<'t>,
    ln2_g: Var<'t>,
    ln2_b: Var<'t>,
    w1: Var<'t>,
    b1: Var<'t>,
    w2: Var<'t>,
    b2: Var<'t>,
}

impl<'t> BoundBlock<'t> {
    fn vars(&self) -> [Var<'t>; 16] {
        [
            self.ln1_g, self.ln1_b, self.wq, self.bq, self.wk, self.bk, self.wv, self.bv,
            self.wo, self.bo, self.ln2_g, self.ln2_b, self.w1, self.b1, self.w2, self.b2,
        ]
    }

    fn forward(
        &self,
        x: Var<'t>,
        heads: usize,
        seq_len: usize,
        key_mask: Option<Arc<[bool]>>,
    ) -> Result<Var<'t>> {
        let h = x.layer_norm(self.ln1_g, self.ln1_b, LN_EPS)?;
        let q = h.matmul(self.wq)?.add_row(self.bq)?;
        let k = h.matmul(self.wk)?.add_row(self.bk)?;
        let v = h.matmul(self.wv)?.add_row(self.bv)?;
        let a = q.attention(k, v, heads, seq_len, key_mask)?;
        let x = x.add(a.matmul(self.wo)?.add_row(self.bo)?)?;
        let h = x.layer_norm(self.ln2_g, self.ln2_b, LN_EPS)?;
        let m = h
            .matmul(self.w1)?
            .add_row(self.b1)?
            .gelu()
            .matmul(self.w2)?
            .add_row(self.b2)?;
        x.add(m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisionWeights {
    pub patch_proj: Tensor,
    pub patch_bias: Tensor,
    pub cls: Tensor,
    pub pos: Tensor,
    pub blocks: Vec<BlockWeights>,
    pub ln_g: Tensor,
    pub ln_b: Tensor,
    pub proj: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextWeights {
    pub token_emb: Tensor,
    pub pos: Tensor,
    pub blocks: Vec<BlockWeights>,
    pub ln_g: Tensor,
    pub ln_b: Tensor,
    pub proj: Tensor,
}

/// Shared backbone weights (the "pre-trained" parameters) plus the learned temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub config: EncoderConfig,
    pub vision: VisionWeights,
    pub text: TextWeights,
    /// log(1/τ), a one-element tensor.
    pub log_inv_temperature: Tensor,
}

impl Backbone {
    pub fn random<R: Rng>(config: &EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.token_dim;
        let hidden = d * config.mlp_ratio;
        let pd = config.patch_dim();
        let vision = VisionWeights {
            patch_proj: normal_tensor(&[pd, d], 1.0 / (pd as f64).sqrt(), rng),
            patch_bias: Tensor::zeros(&[d]),
            cls: normal_tensor(&[1, d], 0.1, rng),
            pos: normal_tensor(&[config.num_patches() + 1, d], 0.1, rng),
            blocks: (0..config.layers)
                .map(|_| BlockWeights::random(d, hidden, rng))
                .collect(),
            ln_g: Tensor::full(&[d], 1.0),
            ln_b: Tensor::zeros(&[d]),
            proj: normal_tensor(&[d, config.embed_dim], 1.0 / (d as f64).sqrt(), rng),
        };
        let text = TextWeights {
            token_emb: normal_tensor(&[config.vocab_size(), d], 0.5, rng),
            pos: normal_tensor(&[config.max_text_length, d], 0.1, rng),
            blocks: (0..config.layers)
                .map(|_| BlockWeights::random(d, hidden, rng))
                .collect(),
            ln_g: Tensor::full(&[d], 1.0),
            ln_b: Tensor::zeros(&[d]),
            proj: normal_tensor(&[d, config.embed_dim], 1.0 / (d as f64).sqrt(), rng),
        };
        Ok(Self {
            config: config.clone(),
            vision,
            text,
            log_inv_temperature: Tensor::scalar((1.0 / config.temperature).ln()),
        })
    }

    pub fn temperature(&self) -> f64 {
        (-self.log_inv_temperature.data()[0]).exp()
    }

    /// Every weight tensor with a stable dotted name, in a fixed order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        let v = &mut self.vision;
        out.push(("vision.patch_proj".into(), &mut v.patch_proj));
        out.push(("vision.patch_bias".into(), &mut v.patch_bias));
        out.push(("vision.cls".into(), &mut v.cls));
        out.push(("vision.pos".into(), &mut v.pos));
        for (i, b) in v.blocks.iter_mut().enumerate() {
            for (name, t) in b.tensors_mut() {
                out.push((format!("vision.block{i}.{name}"), t));
            }
        }
        out.push(("vision.ln_g".into(), &mut v.ln_g));
        out.push(("vision.ln_b".into(), &mut v.ln_b));
        out.push(("vision.proj".into(), &mut v.proj));
        let t = &mut self.text;
        out.push(("text.token_emb".into(), &mut t.token_emb));
        out.push(("text.pos".into(), &mut t.pos));
        for (i, b) in t.blocks.iter_mut().enumerate() {
            for (name, x) in b.tensors_mut() {
                out.push((format!("text.block{i}.{name}"), x));
            }
        }
        out.push(("text.ln_g".into(), &mut t.ln_g));
        out.push(("text.ln_b".into(), &mut t.ln_b));
        out.push(("text.proj".into(), &mut t.proj));
        out.push(("log_inv_temperature".into(), &mut self.log_inv_temperature));
        out
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut copy = self.clone();
        copy.tensors_mut()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect()
    }

    /// SHA-256 over every weight's binary record, in name order.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, t) in self.named_tensors() {
            h.update(name.as_bytes());
            h.update(t.to_bytes());
        }
        format!("{:x}", h.finalize())
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundBackbone<'t> {
        let l = |t: &Tensor| tape.leaf(t.clone(), trainable);
        BoundBackbone {
            config: self.config.clone(),
            patch_proj: l(&self.vision.patch_proj),
            patch_bias: l(&self.vision.patch_bias),
            cls: l(&self.vision.cls),
            vpos: l(&self.vision.pos),
            vblocks: self
                .vision
                .blocks
                .iter()
                .map(|b| b.bind(tape, trainable))
                .collect(),
            vln_g: l(&self.vision.ln_g),
            vln_b: l(&self.vision.ln_b),
            vproj: l(&self.vision.proj),
            token_emb: l(&self.text.token_emb),
            tpos: l(&self.text.pos),
            tblocks: self
                .text
                .blocks
                .iter()
                .map(|b| b.bind(tape, trainable))
                .collect(),
            tln_g: l(&self.text.ln_g),
            tln_b: l(&self.text.ln_b),
            tproj: l(&self.text.proj),
            log_inv_temperature: l(&self.log_inv_temperature),
        }
    }
}

/// Learnable deep prompts: one `T×D` text and one `V×D` vision matrix per prompted layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    pub text: Vec<Tensor>,
    pub vision: Vec<Tensor>,
}

impl PromptSet {
    /// Normal(0, 0.02²) prompts, except first-layer text prompts which copy the
    /// template token embeddings.
    pub fn init<R: Rng>(backbone: &Backbone, rng: &mut R) -> Result<Self> {
        let c = &backbone.config;
        let d = c.token_dim;
        let template = c.vocab().template_tokens();
        let mut text = Vec::with_capacity(c.prompt_depth);
        for j in 0..c.prompt_depth {
            let mut t = normal_tensor(&[c.text_prompts, d], PROMPT_INIT_STD, rng).to_vec();
            if j == 0 {
                for (r, &tok) in template.iter().take(c.text_prompts).enumerate() {
                    t[r * d..(r + 1) * d].copy_from_slice(backbone.text.token_emb.row(tok)?);
                }
            }
            text.push(Tensor::new(&[c.text_prompts, d], t)?);
        }
        let vision = (0..c.prompt_depth)
            .map(|_| normal_tensor(&[c.vision_prompts, d], PROMPT_INIT_STD, rng))
            .collect();
        Ok(Self { text, vision })
    }

    pub fn zeros(config: &EncoderConfig) -> Self {
        Self {
            text: vec![Tensor::zeros(&[config.text_prompts, config.token_dim]); config.prompt_depth],
            vision: vec![
                Tensor::zeros(&[config.vision_prompts, config.token_dim]);
                config.prompt_depth
            ],
        }
    }

    pub fn depth(&self) -> usize {
        self.text.len()
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        for (j, t) in self.text.iter_mut().enumerate() {
            out.push((format!("prompts.text.{j}"), t));
        }
        for (j, t) in self.vision.iter_mut().enumerate() {
            out.push((format!("prompts.vision.{j}"), t));
        }
        out
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundPrompts<'t> {
        BoundPrompts {
            text: self.text.iter().map(|t| tape.leaf(t.clone(), trainable)).collect(),
            vision: self.vision.iter().map(|t| tape.leaf(t.clone(), trainable)).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoundPrompts<'t> {
    pub text: Vec<Var<'t>>,
    pub vision: Vec<Var<'t>>,
}

/// Whether the prompted vision path re-stylizes patch tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleMode {
    Off,
    /// Shift the patch tokens output by transformer layer `layer` (1-based).
    Shift { layer: usize },
}

/// Options for the prompted views.
#[derive(Clone, Copy)]
pub struct PromptedView<'a, 't> {
    pub prompts: &'a BoundPrompts<'t>,
    /// Hide prompt tokens from attention (test harness for degenerate prompts).
    pub mask_prompts: bool,
    pub style: Option<(usize, &'a BankVars<'t>)>,
}

/// Output of a batched image pass.
pub struct ImageForward<'t> {
    /// B×d, rows L2-normalized.
    pub embeddings: Var<'t>,
    /// One `(B·P²)×D` matrix per transformer layer, prompt and CLS rows excluded.
    pub layer_patches: Vec<Var<'t>>,
}

pub struct BoundBackbone<'t> {
    config: EncoderConfig,
    patch_proj: Var<'t>,
    patch_bias: Var<'t>,
    cls: Var<'t>,
    vpos: Var<'t>,
    vblocks: Vec<BoundBlock<'t>>,
    vln_g: Var<'t>,
    vln_b: Var<'t>,
    vproj: Var<'t>,
    token_emb: Var<'t>,
    tpos: Var<'t>,
    tblocks: Vec<BoundBlock<'t>>,
    tln_g: Var<'t>,
    tln_b: Var<'t>,
    tproj: Var<'t>,
    pub log_inv_temperature: Var<'t>,
}

/// Splits `[C, H, W]` images into a `(B·P²)×patch_dim` matrix, patches in row-major grid order.
pub fn patchify(config: &EncoderConfig, images: &[&Tensor]) -> Result<Tensor> {
    let (c, s, g) = (config.channels, config.image_size, config.patch_grid);
    let ps = config.patch_size();
    let pd = config.patch_dim();
    let mut out = Vec::with_capacity(images.len() * g * g * pd);
    for img in images {
        if img.shape() != [c, s, s] {
            return Err(dim_err!(
                "image shape {:?} does not match configured [{c}, {s}, {s}]",
                img.shape()
            ));
        }
        let d = img.data();
        for gy in 0..g {
            for gx in 0..g {
                for ch in 0..c {
                    for y in 0..ps {
                        let row = ch * s * s + (gy * ps + y) * s + gx * ps;
                        out.extend_from_slice(&d[row..row + ps]);
                    }
                }
            }
        }
    }
    Tensor::new(&[images.len() * g * g, pd], out)
}

impl<'t> BoundBackbone<'t> {
    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Every bound weight, in the same order as [`Backbone::tensors_mut`].
    pub fn vars(&self) -> Vec<Var<'t>> {
        let mut out = vec![self.patch_proj, self.patch_bias, self.cls, self.vpos];
        for b in &self.vblocks {
            out.extend(b.vars());
        }
        out.extend([self.vln_g, self.vln_b, self.vproj, self.token_emb, self.tpos]);
        for b in &self.tblocks {
            out.extend(b.vars());
        }
        out.extend([self.tln_g, self.tln_b, self.tproj, self.log_inv_temperature]);
        out
    }

    /// Patch-embedding output (before any transformer layer), `(B·P²)×D`.
    pub fn patch_embeddings(&self, images: &[&Tensor]) -> Result<Var<'t>> {
        let tape = self.patch_proj.tape();
        let patches = tape.constant(patchify(&self.config, images)?);
        patches.matmul(self.patch_proj)?.add_row(self.patch_bias)
    }

    /// Encodes a batch of images in the frozen view (`prompted = None`) or the prompted view.
    pub fn encode_images(
        &self,
        images: &[&Tensor],
        prompted: Option<PromptedView<'_, 't>>,
    ) -> Result<ImageForward<'t>> {
        if images.is_empty() {
            return Err(Error::Contract("no images to encode".into()));
        }
        let c = &self.config;
        let tape = self.patch_proj.tape();
        let b = images.len();
        let np = c.num_patches();
        let base_len = np + 1;
        let v = if prompted.is_some() { c.vision_prompts } else { 0 };
        let n = base_len + v;
        if let Some((layer, bank)) = prompted.and_then(|p| p.style) {
            if layer == 0 || layer >= c.layers {
                return Err(Error::Configuration(format!(
                    "style layer {layer} must lie in 1..{}",
                    c.layers
                )));
            }
            if bank.mu.shape()[1] != c.token_dim {
                return Err(dim_err!(
                    "style bank dim {} != token dim {}",
                    bank.mu.shape()[1],
                    c.token_dim
                ));
            }
        }

        // [CLS, patches] + positions, per image.
        let emb = self.patch_embeddings(images)?;
        let stacked = tape.concat_rows(&[self.cls, emb])?;
        let mut idx = Vec::with_capacity(b * base_len);
        let mut pos_idx = Vec::with_capacity(b * base_len);
        for i in 0..b {
            idx.push(0);
            idx.extend((0..np).map(|p| 1 + i * np + p));
            pos_idx.extend(0..base_len);
        }
        let mut x = stacked
            .select_rows(&idx)?
            .add(self.vpos.select_rows(&pos_idx)?)?;

        let mask: Option<Arc<[bool]>> = match prompted {
            Some(p) if p.mask_prompts => {
                Some((0..n).map(|j| j < v).collect::<Vec<_>>().into())
            }
            _ => None,
        };

        let mut layer_patches = Vec::with_capacity(c.layers);
        for (l, block) in self.vblocks.iter().enumerate() {
            if let Some(p) = prompted {
                if l < p.prompts.vision.len() {
                    x = insert_prompts(x, p.prompts.vision[l], b, if l == 0 { base_len } else { n }, 0, l > 0)?;
                }
            }
            x = block.forward(x, c.heads, n, mask.clone())?;
            if let Some((layer, bank)) = prompted.and_then(|p| p.style) {
                if l + 1 == layer {
                    x = shift_patch_rows(x, bank, b, n, v + 1)?;
                }
            }
            let patch_idx: Vec<usize> = (0..b)
                .flat_map(|i| (0..np).map(move |p| i * n + v + 1 + p))
                .collect();
            layer_patches.push(x.select_rows(&patch_idx)?);
        }
        let cls_idx: Vec<usize> = (0..b).map(|i| i * n + v).collect();
        let embeddings = x
            .select_rows(&cls_idx)?
            .layer_norm(self.vln_g, self.vln_b, LN_EPS)?
            .matmul(self.vproj)?
            .normalize_rows()?;
        Ok(ImageForward {
            embeddings,
            layer_patches,
        })
    }

    /// Encodes token sequences; returns C×d with rows L2-normalized, in input order.
    pub fn encode_texts(
        &self,
        sequences: &[Vec<usize>],
        prompted: Option<PromptedView<'_, 't>>,
    ) -> Result<Var<'t>> {
        if sequences.is_empty() {
            return Err(Error::Contract("no text sequences to encode".into()));
        }
        let c = &self.config;
        let extra = if prompted.is_some() { c.text_prompts } else { 0 };
        for seq in sequences {
            self.validate_sequence(seq, extra)?;
        }
        // Group equal-length sequences so each group packs into one matrix.
        let mut lengths: Vec<usize> = sequences.iter().map(|s| s.len()).collect();
        lengths.sort_unstable();
        lengths.dedup();
        let tape = self.token_emb.tape();
        let mut groups = Vec::new();
        let mut order = vec![0usize; sequences.len()];
        let mut offset = 0;
        for len in lengths {
            let members: Vec<usize> = (0..sequences.len())
                .filter(|&i| sequences[i].len() == len)
                .collect();
            let seqs: Vec<&[usize]> = members.iter().map(|&i| sequences[i].as_slice()).collect();
            groups.push(self.encode_text_group(&seqs, prompted)?);
            for (k, &i) in members.iter().enumerate() {
                order[i] = offset + k;
            }
            offset += members.len();
        }
        if groups.len() == 1 {
            return Ok(groups[0]);
        }
        tape.concat_rows(&groups)?.select_rows(&order)
    }

    fn validate_sequence(&self, seq: &[usize], extra: usize) -> Result<()> {
        let c = &self.config;
        let vocab = c.vocab_size();
        if let Some(&bad) = seq.iter().find(|&&t| t >= vocab) {
            return Err(Error::Vocabulary {
                id: bad,
                vocab_size: vocab,
            });
        }
        if seq.len() < 2 || seq[0] != Vocab::SOS || !seq.contains(&Vocab::EOS) {
            return Err(Error::Contract(format!(
                "text sequence {seq:?} must start with SOS and contain EOS"
            )));
        }
        if seq.len() + extra > c.max_text_length {
            return Err(Error::Contract(format!(
                "text sequence of {} tokens (+{extra} prompts) exceeds max length {}",
                seq.len(),
                c.max_text_length
            )));
        }
        Ok(())
    }

    fn encode_text_group(
        &self,
        seqs: &[&[usize]],
        prompted: Option<PromptedView<'_, 't>>,
    ) -> Result<Var<'t>> {
        let c = &self.config;
        let b = seqs.len();
        let base_len = seqs[0].len();
        let t = if prompted.is_some() { c.text_prompts } else { 0 };
        let n = base_len + t;
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
        let pos: Vec<usize> = (0..b).flat_map(|_| 0..base_len).collect();
        let mut x = self
            .token_emb
            .select_rows(&ids)?
            .add(self.tpos.select_rows(&pos)?)?;
        let mask: Option<Arc<[bool]>> = match prompted {
            Some(p) if p.mask_prompts => {
                Some((0..n).map(|j| (1..1 + t).contains(&j)).collect::<Vec<_>>().into())
            }
            _ => None,
        };
        for (l, block) in self.tblocks.iter().enumerate() {
            if let Some(p) = prompted {
                if l < p.prompts.text.len() {
                    x = insert_prompts(x, p.prompts.text[l], b, if l == 0 { base_len } else { n }, 1, l > 0)?;
                }
            }
            x = block.forward(x, c.heads, n, mask.clone())?;
        }
        // EOS sits after the inserted prompts, when present.
        let eos_idx: Vec<usize> = seqs
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let e = s.iter().position(|&tok| tok == Vocab::EOS).unwrap();
                i * n + if e >= 1 { e + t } else { e }
            })
            .collect();
        x.select_rows(&eos_idx)?
            .layer_norm(self.tln_g, self.tln_b, LN_EPS)?
            .matmul(self.tproj)?
            .normalize_rows()
    }
}

/// Places `prompts` (k×D) at rows `at..at+k` of every packed sequence.
///
/// With `replace`, the sequences already hold prompt rows there (length
/// `seq_len` includes them) and those rows are dropped; otherwise the prompts
/// are inserted into sequences of length `seq_len`.
fn insert_prompts<'t>(
    x: Var<'t>,
    prompts: Var<'t>,
    batch: usize,
    seq_len: usize,
    at: usize,
    replace: bool,
) -> Result<Var<'t>> {
    let k = prompts.num_rows();
    let tape = x.tape();
    let stacked = tape.concat_rows(&[prompts, x])?;
    let out_len = if replace { seq_len } else { seq_len + k };
    let mut idx = Vec::with_capacity(batch * out_len);
    for i in 0..batch {
        let base = k + i * seq_len;
        for r in 0..out_len {
            if (at..at + k).contains(&r) {
                idx.push(r - at);
            } else if replace || r < at {
                idx.push(base + r);
            } else {
                idx.push(base + r - k);
            }
        }
    }
    stacked.select_rows(&idx)
}

/// Applies the style shift to the patch rows (from `first_patch` on) of every sequence.
fn shift_patch_rows<'t>(
    x: Var<'t>,
    bank: &BankVars<'t>,
    batch: usize,
    seq_len: usize,
    first_patch: usize,
) -> Result<Var<'t>> {
    let tape = x.tape();
    let np = seq_len - first_patch;
    let mut parts = vec![x];
    for i in 0..batch {
        let rows = x.slice_rows(i * seq_len + first_patch, (i + 1) * seq_len)?;
        parts.push(style_shift_layer(rows, bank, STYLE_EPSILON)?);
    }
    let total = batch * seq_len;
    let idx: Vec<usize> = (0..total)
        .map(|r| {
            let (i, p) = (r / seq_len, r % seq_len);
            if p >= first_patch {
                total + i * np + (p - first_patch)
            } else {
                r
            }
        })
        .collect();
    tape.concat_rows(&parts)?.select_rows(&idx)
}

/// Class probabilities softmax(cos(img_i, txt_c) / τ), one row per image.
pub fn class_probabilities<'t>(images: Var<'t>, texts: Var<'t>, temperature: f64) -> Result<Var<'t>> {
    if !(temperature > 0.0) {
        return Err(Error::Contract(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    cosine_matrix(images, texts)?
        .scale(1.0 / temperature)
        .softmax_rows()
}

/// Zero-shot probabilities of one image embedding against C class embeddings.
pub fn zero_shot_logits(image: &Tensor, classes: &[Tensor], temperature: f64) -> Result<Tensor> {
    let d = image.len();
    if classes.is_empty() {
        return Err(Error::Contract("no class embeddings".into()));
    }
    if let Some(bad) = classes.iter().find(|c| c.len() != d) {
        return Err(dim_err!(
            "class embedding {:?} vs image embedding {:?}",
            bad.shape(),
            image.shape()
        ));
    }
    let tape = Tape::new();
    let img = tape.constant(image.reshape(&[1, d])?);
    let rows: Vec<Var<'_>> = classes
        .iter()
        .map(|c| c.reshape(&[1, d]).map(|t| tape.constant(t)))
        .collect::<Result<_>>()?;
    let txt = tape.concat_rows(&rows)?;
    let p = class_probabilities(img, txt, temperature)?.value();
    p.reshape(&[classes.len()])
}

/// Per-image encoding result of the value-level API.
#[derive(Debug, Clone)]
pub struct ImageEncoding {
    pub embedding: Tensor,
    /// P²×D per layer.
    pub layer_patches: Vec<Tensor>,
}

/// Backbone, prompts and style bank: the full state of a prompted dual encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoder {
    pub backbone: Backbone,
    pub prompts: PromptSet,
    pub bank: StyleBank,
}

const EVAL_CHUNK: usize = 32;

impl DualEncoder {
    pub fn config(&self) -> &EncoderConfig {
        &self.backbone.config
    }

    pub fn encode_image_frozen(&self, image: &Tensor) -> Result<ImageEncoding> {
        self.encode_image(image, None, false)
    }

    pub fn encode_image_prompted(&self, image: &Tensor, style: StyleMode) -> Result<ImageEncoding> {
        self.encode_image(image, Some(style), false)
    }

    /// Prompted pass with the prompt tokens hidden from attention.
    pub fn encode_image_masked_prompts(&self, image: &Tensor) -> Result<ImageEncoding> {
        self.encode_image(image, Some(StyleMode::Off), true)
    }

    fn encode_image(&self, image: &Tensor, style: Option<StyleMode>, mask: bool) -> Result<ImageEncoding> {
        let tape = Tape::new();
        let bb = self.backbone.bind(&tape, false);
        let prompts = self.prompts.bind(&tape, false);
        let bank = self.bank.bind(&tape, false)?;
        let view = style.map(|s| PromptedView {
            prompts: &prompts,
            mask_prompts: mask,
            style: match s {
                StyleMode::Off => None,
                StyleMode::Shift { layer } => Some((layer, &bank)),
            },
        });
        let out = bb.encode_images(&[image], view)?;
        let d = self.config().embed_dim;
        Ok(ImageEncoding {
            embedding: out.embeddings.value().reshape(&[d])?,
            layer_patches: out.layer_patches.iter().map(|v| v.value()).collect(),
        })
    }

    pub fn encode_text_frozen(&self, sequence: &[usize]) -> Result<Tensor> {
        self.encode_text(sequence, false, false)
    }

    pub fn encode_text_prompted(&self, sequence: &[usize]) -> Result<Tensor> {
        self.encode_text(sequence, true, false)
    }

    pub fn encode_text_masked_prompts(&self, sequence: &[usize]) -> Result<Tensor> {
        self.encode_text(sequence, true, true)
    }

    fn encode_text(&self, sequence: &[usize], prompted: bool, mask: bool) -> Result<Tensor> {
        let tape = Tape::new();
        let bb = self.backbone.bind(&tape, false);
        let prompts = self.prompts.bind(&tape, false);
        let view = prompted.then_some(PromptedView {
            prompts: &prompts,
            mask_prompts: mask,
            style: None,
        });
        let out = bb.encode_texts(&[sequence.to_vec()], view)?;
        out.value().reshape(&[self.config().embed_dim])
    }

    /// Batched embeddings (B×d) of many images, frozen or prompted (style off).
    pub fn embed_images(&self, images: &[&Tensor], prompted: bool) -> Result<Tensor> {
        if prompted {
            self.embed_images_prompted(images, StyleMode::Off)
        } else {
            self.embed_chunks(images, None)
        }
    }

    /// Batched prompted embeddings, optionally mapping each image's style onto the bank.
    pub fn embed_images_prompted(&self, images: &[&Tensor], style: StyleMode) -> Result<Tensor> {
        self.embed_chunks(images, Some(style))
    }

    fn embed_chunks(&self, images: &[&Tensor], style: Option<StyleMode>) -> Result<Tensor> {
        let mut data = Vec::with_capacity(images.len() * self.config().embed_dim);
        for chunk in images.chunks(EVAL_CHUNK) {
            let tape = Tape::new();
            let bb = self.backbone.bind(&tape, false);
            let prompts = self.prompts.bind(&tape, false);
            let bank = self.bank.bind(&tape, false)?;
            let view = style.map(|s| PromptedView {
                prompts: &prompts,
                mask_prompts: false,
                style: match s {
                    StyleMode::Off => None,
                    StyleMode::Shift { layer } => Some((layer, &bank)),
                },
            });
            data.extend_from_slice(bb.encode_images(chunk, view)?.embeddings.value().data());
        }
        Tensor::new(&[images.len(), self.config().embed_dim], data)
    }

    /// Embeddings (C×d) of class-name sequences.
    pub fn embed_classes(&self, class_ids: &[usize], prompted: bool) -> Result<Tensor> {
        let vocab = self.config().vocab();
        let seqs: Vec<Vec<usize>> = class_ids
            .iter()
            .map(|&c| vocab.class_sequence(c))
            .collect::<Result<_>>()?;
        let tape = Tape::new();
        let bb = self.backbone.bind(&tape, false);
        let prompts = self.prompts.bind(&tape, false);
        let view = prompted.then_some(PromptedView {
            prompts: &prompts,
            mask_prompts: false,
            style: None,
        });
        Ok(bb.encode_texts(&seqs, view)?.value())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            image_size: 8,
            channels: 2,
            patch_grid: 4,
            token_dim: 8,
            layers: 3,
            heads: 2,
            mlp_ratio: 2,
            embed_dim: 6,
            max_classes: 5,
            max_text_length: 12,
            template_len: 3,
            temperature: 0.07,
            prompt_depth: 2,
            vision_prompts: 2,
            text_prompts: 2,
        }
    }

    fn model(seed: u64) -> DualEncoder {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = tiny_config();
        let backbone = Backbone::random(&config, &mut rng).unwrap();
        let prompts = PromptSet::init(&backbone, &mut rng).unwrap();
        let bank = StyleBank::random(3, config.token_dim, Default::default(), &mut rng).unwrap();
        DualEncoder {
            backbone,
            prompts,
            bank,
        }
    }

    fn image(config: &EncoderConfig, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = config.image_size;
        Tensor::new(
            &[config.channels, s, s],
            (0..config.channels * s * s).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn patchify_orders_patches_row_major() {
        let config = EncoderConfig {
            image_size: 4,
            channels: 1,
            patch_grid: 2,
            ..tiny_config()
        };
        let img = Tensor::new(&[1, 4, 4], (0..16).map(|x| x as f64).collect()).unwrap();
        let p = patchify(&config, &[&img]).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(p.row(0).unwrap(), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.row(1).unwrap(), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p.row(3).unwrap(), &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn frozen_image_contract() {
        let m = model(1);
        let c = m.config().clone();
        let img = image(&c, 2);
        let enc = m.encode_image_frozen(&img).unwrap();
        let norm: f64 = enc.embedding.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
        assert_eq!(enc.layer_patches.len(), c.layers);
        for p in &enc.layer_patches {
            assert_eq!(p.shape(), &[c.num_patches(), c.token_dim]);
        }
        let again = m.encode_image_frozen(&img).unwrap();
        assert!(enc.embedding.bit_eq(&again.embedding));
    }

    #[test]
    fn wrong_resolution_is_dimension_error() {
        let m = model(1);
        let img = Tensor::zeros(&[2, 6, 6]);
        assert!(matches!(m.encode_image_frozen(&img), Err(Error::Dimension(_))));
    }

    #[test]
    fn masked_prompts_reproduce_frozen_output_exactly() {
        let mut m = model(3);
        let c = m.config().clone();
        m.prompts = PromptSet::zeros(&c);
        let img = image(&c, 4);
        let frozen = m.encode_image_frozen(&img).unwrap();
        let masked = m.encode_image_masked_prompts(&img).unwrap();
        assert!(frozen.embedding.bit_eq(&masked.embedding));
        for (a, b) in frozen.layer_patches.iter().zip(&masked.layer_patches) {
            assert!(a.bit_eq(b));
        }
        // Random prompts too: masking hides them entirely.
        let m = model(5);
        let frozen = m.encode_image_frozen(&img).unwrap();
        let masked = m.encode_image_masked_prompts(&img).unwrap();
        assert!(frozen.embedding.bit_eq(&masked.embedding));

        let seq = c.vocab().class_sequence(2).unwrap();
        let ft = m.encode_text_frozen(&seq).unwrap();
        let mt = m.encode_text_masked_prompts(&seq).unwrap();
        assert!(ft.bit_eq(&mt));
    }

    #[test]
    fn prompted_token_count_and_shapes() {
        let m = model(6);
        let c = m.config().clone();
        assert_eq!(c.vision_seq_len(true), c.num_patches() + 1 + c.vision_prompts);
        let img = image(&c, 7);
        let enc = m.encode_image_prompted(&img, StyleMode::Off).unwrap();
        assert_eq!(enc.embedding.shape(), &[c.embed_dim]);
        for p in &enc.layer_patches {
            assert_eq!(p.shape(), &[c.num_patches(), c.token_dim]);
        }
        let frozen = m.encode_image_frozen(&img).unwrap();
        assert!(!enc.embedding.bit_eq(&frozen.embedding));
    }

    #[test]
    fn style_shift_with_own_style_bank_matches_off() {
        let mut m = model(8);
        let c = m.config().clone();
        let img = image(&c, 9);
        let off = m.encode_image_prompted(&img, StyleMode::Off).unwrap();
        let own = crate::style::style_of(&off.layer_patches[1], STYLE_EPSILON).unwrap();
        m.bank = StyleBank::from_styles(&[own]).unwrap();
        let shifted = m
            .encode_image_prompted(&img, StyleMode::Shift { layer: 2 })
            .unwrap();
        assert!(shifted.embedding.max_abs_diff(&off.embedding).unwrap() < 1e-6);
    }

    #[test]
    fn style_layer_out_of_range_is_configuration_error() {
        let m = model(10);
        let img = image(m.config(), 11);
        for layer in [0, m.config().layers] {
            let r = m.encode_image_prompted(&img, StyleMode::Shift { layer });
            assert!(matches!(r, Err(Error::Configuration(_))), "{layer}");
        }
    }

    #[test]
    fn frozen_view_ignores_prompts_and_bank() {
        let m = model(12);
        let mut other = m.clone();
        other.prompts = PromptSet::zeros(other.config());
        other.bank = StyleBank::random(5, 8, Default::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let img = image(m.config(), 13);
        assert!(m
            .encode_image_frozen(&img)
            .unwrap()
            .embedding
            .bit_eq(&other.encode_image_frozen(&img).unwrap().embedding));
        let seq = m.config().vocab().class_sequence(0).unwrap();
        assert!(m
            .encode_text_frozen(&seq)
            .unwrap()
            .bit_eq(&other.encode_text_frozen(&seq).unwrap()));
    }

    #[test]
    fn text_contracts() {
        let m = model(14);
        let vocab = m.config().vocab();
        let seq = vocab.class_sequence(1).unwrap();
        let e = m.encode_text_frozen(&seq).unwrap();
        let norm: f64 = e.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
        assert!(e.bit_eq(&m.encode_text_frozen(&seq).unwrap()));
        assert_eq!(m.encode_text_prompted(&seq).unwrap().shape(), &[m.config().embed_dim]);

        let mut bad = seq.clone();
        bad[2] = 999;
        assert!(matches!(
            m.encode_text_frozen(&bad),
            Err(Error::Vocabulary { id: 999, .. })
        ));
        assert!(matches!(
            m.encode_text_frozen(&[Vocab::SOS, 3]),
            Err(Error::Contract(_))
        ));
        assert!(vocab.class_sequence(5).is_err());
    }

    #[test]
    fn batched_text_keeps_input_order_across_lengths() {
        let m = model(15);
        let vocab = m.config().vocab();
        let long = vocab.class_sequence(0).unwrap();
        let short = vec![Vocab::SOS, vocab.class_token(1).unwrap(), Vocab::EOS];
        let tape = Tape::new();
        let bb = m.backbone.bind(&tape, false);
        let both = bb
            .encode_texts(&[long.clone(), short.clone(), long.clone()], None)
            .unwrap()
            .value();
        let a = m.encode_text_frozen(&long).unwrap();
        let b = m.encode_text_frozen(&short).unwrap();
        assert_eq!(both.row(0).unwrap(), a.data());
        assert_eq!(both.row(1).unwrap(), b.data());
        assert_eq!(both.row(2).unwrap(), a.data());
    }

    #[test]
    fn text_prompt_gradients_flow() {
        let m = model(16);
        let tape = Tape::new();
        let bb = m.backbone.bind(&tape, false);
        let prompts = m.prompts.bind(&tape, true);
        let seqs: Vec<Vec<usize>> = (0..3).map(|c| m.config().vocab().class_sequence(c).unwrap()).collect();
        let view = PromptedView {
            prompts: &prompts,
            mask_prompts: false,
            style: None,
        };
        let txt = bb.encode_texts(&seqs, Some(view)).unwrap();
        let img = bb
            .encode_images(&[&image(m.config(), 17)], Some(view))
            .unwrap()
            .embeddings;
        let logp = cosine_matrix(img, txt).unwrap().scale(1.0 / 0.07).log_softmax_rows().unwrap();
        let loss = logp.pick_per_row(&[1]).unwrap().sum().neg();
        let g = tape.backward(loss).unwrap();
        for p in prompts.text.iter().chain(&prompts.vision) {
            assert!(g.get(*p).unwrap().data().iter().any(|&x| x != 0.0));
        }
        for w in bb.vars() {
            assert!(g.get(w).is_none());
        }
    }

    #[test]
    fn zero_shot_examples() {
        let g: Vec<Tensor> = (0..3)
            .map(|i| {
                let mut v = vec![0.0; 3];
                v[i] = 1.0;
                Tensor::vector(&v)
            })
            .collect();
        let p = zero_shot_logits(&g[1], &g, 1e-3).unwrap();
        assert!(p.data()[1] > 1.0 - 1e-12);
        let f = Tensor::vector(&[1.0, 1.0, 1.0]);
        let p = zero_shot_logits(&f, &g, 0.07).unwrap();
        for &x in p.data() {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }
        let z = Tensor::zeros(&[3]);
        assert!(matches!(
            zero_shot_logits(&z, &g, 0.07),
            Err(Error::NumericDomain(_))
        ));
    }

    #[test]
    fn config_validation() {
        let mut c = EncoderConfig::default();
        c.validate().unwrap();
        c.prompt_depth = 5;
        assert!(c.validate().is_err());
        c.prompt_depth = 3;
        c.heads = 5;
        assert!(c.validate().is_err());
        c.heads = 4;
        c.temperature = 0.0;
        assert!(c.validate().is_err());
    }
}
