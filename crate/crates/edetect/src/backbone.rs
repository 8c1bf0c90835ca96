//! Shared transformer encoder with a weight-tied masked-token head.
//!
//! Both towers read from this single weight set: the recognition tower
//! consumes final hidden states at the marker positions, the cloze tower
//! consumes the masked-token scores. The architecture is a small post-LN
//! encoder: token + learned absolute position embeddings, layer norm,
//! dropout, then `depth` blocks of multi-head self-attention and a GELU
//! feed-forward, each followed by residual + layer norm. The masked-token
//! head multiplies a hidden row with the transposed embedding table and
//! adds a per-token bias.

use ndarray::{Array1, Array2, Array3, ArrayView2};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{
    attention_backward, attention_forward, dropout_mask, ffn_backward, ffn_forward, layer_norm,
    layer_norm_backward, AttentionCache, AttentionTids, FfnCache, FfnTids, Init,
    LayerNormCache, ParamLayout, Params, Tid,
};
use crate::tokenizer::TokenizedInput;

/// Encoder and tower contract violations.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid backbone config: {0}")]
    Config(String),
    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    IdOutOfRange { id: usize, vocab_size: usize },
    #[error("sequence length {len} exceeds max_positions {max}")]
    TooLong { len: usize, max: usize },
    #[error("empty input sequence")]
    EmptyInput,
    #[error("input lacks the {0} field required by this tower")]
    MissingField(&'static str),
    #[error("event span length {got} does not match registry marker count {expected}")]
    SpanMismatch { got: usize, expected: usize },
    #[error("position {pos} out of range for sequence of length {len}")]
    BadPosition { pos: usize, len: usize },
}

/// Architecture and initialization settings of the encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            width: 64,
            heads: 4,
            ffn_mult: 2,
            dropout: 0.3,
            vocab_size: 0,
            max_positions: 128,
            init_std: 0.02,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::Config(msg));
        if self.depth == 0 || self.width == 0 || self.heads == 0 || self.ffn_mult == 0 {
            return fail("depth, width, heads, and ffn_mult must be positive".into());
        }
        if self.width % self.heads != 0 {
            return fail(format!("width {} not divisible by heads {}", self.width, self.heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.vocab_size == 0 {
            return fail("vocab_size must be positive (build the vocabulary first)".into());
        }
        if self.max_positions == 0 {
            return fail("max_positions must be positive".into());
        }
        if !self.init_std.is_finite() || self.init_std < 0.0 {
            return fail(format!("init_std {} must be finite and non-negative", self.init_std));
        }
        Ok(())
    }
}

struct LayerTids {
    attn: AttentionTids,
    ln1_g: Tid,
    ln1_b: Tid,
    ffn: FfnTids,
    ln2_g: Tid,
    ln2_b: Tid,
}

/// Encoder structure: configuration plus tensor handles into a
/// [`ParamLayout`]. Weights themselves live in a separate [`Params`] buffer
/// so that optimizers and finite-difference checks can swap them freely.
pub struct Backbone {
    pub config: BackboneConfig,
    emb_tok: Tid,
    emb_pos: Tid,
    emb_ln_g: Tid,
    emb_ln_b: Tid,
    mask_bias: Tid,
    layers: Vec<LayerTids>,
}

impl Backbone {
    /// Registers all encoder tensors in `layout`. Allocation order is the
    /// checkpoint tensor order, so it must stay stable across versions.
    pub fn new(config: BackboneConfig, layout: &mut ParamLayout) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.width;
        let emb_tok = layout.alloc("emb.tok", config.vocab_size, d, Init::Normal);
        let emb_pos = layout.alloc("emb.pos", config.max_positions, d, Init::Normal);
        let emb_ln_g = layout.alloc("emb.ln.g", 1, d, Init::Ones);
        let emb_ln_b = layout.alloc("emb.ln.b", 1, d, Init::Zeros);
        let mut layers = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let attn = AttentionTids::alloc(layout, &format!("layer{i}.attn"), d);
            let ln1_g = layout.alloc(format!("layer{i}.ln1.g"), 1, d, Init::Ones);
            let ln1_b = layout.alloc(format!("layer{i}.ln1.b"), 1, d, Init::Zeros);
            let ffn = FfnTids::alloc(layout, &format!("layer{i}.ffn"), d, d * config.ffn_mult);
            let ln2_g = layout.alloc(format!("layer{i}.ln2.g"), 1, d, Init::Ones);
            let ln2_b = layout.alloc(format!("layer{i}.ln2.b"), 1, d, Init::Zeros);
            layers.push(LayerTids { attn, ln1_g, ln1_b, ffn, ln2_g, ln2_b });
        }
        let mask_bias = layout.alloc("mask_head.bias", 1, config.vocab_size, Init::Zeros);
        Ok(Self { config, emb_tok, emb_pos, emb_ln_g, emb_ln_b, mask_bias, layers })
    }

    /// Handle of the token-embedding table (also the masked-head weight).
    pub fn token_embedding(&self) -> Tid {
        self.emb_tok
    }
}

/// Final hidden states plus every layer's attention distributions
/// (`heads × L × L`, row-stochastic, pre-dropout).
#[derive(Debug)]
pub struct EncoderOutput {
    pub hidden: Array2<f64>,
    pub attentions: Vec<Array3<f64>>,
}

#[derive(Debug)]
struct LayerPass {
    attn: AttentionCache,
    attn_drop: Option<Array2<f64>>,
    ln1: LayerNormCache,
    ffn: FfnCache,
    ffn_drop: Option<Array2<f64>>,
    ln2: LayerNormCache,
}

/// Intermediates needed to run [`Backbone::backward`].
#[derive(Debug)]
pub struct EncoderCache {
    ids: Vec<usize>,
    emb_ln: LayerNormCache,
    emb_drop: Option<Array2<f64>>,
    layers: Vec<LayerPass>,
}

impl Backbone {
    /// Runs the encoder over `input`.
    ///
    /// `dropout` carries the rate and RNG during training; pass `None` for
    /// deterministic evaluation. Padding positions (attention mask 0) are
    /// barred from being attended to, so real rows are unaffected by the
    /// amount of tail padding.
    pub fn encode(
        &self,
        p: &Params,
        input: &TokenizedInput,
        mut dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<(EncoderOutput, EncoderCache), ModelError> {
        let ids = &input.ids;
        if ids.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        if ids.len() > self.config.max_positions {
            return Err(ModelError::TooLong { len: ids.len(), max: self.config.max_positions });
        }
        for &id in ids {
            if id >= self.config.vocab_size {
                return Err(ModelError::IdOutOfRange { id, vocab_size: self.config.vocab_size });
            }
        }
        if let Some((rate, _)) = dropout {
            if rate == 0.0 {
                dropout = None;
            }
        }
        let (l, d) = (ids.len(), self.config.width);

        let emb_tok = p.mat(self.emb_tok);
        let emb_pos = p.mat(self.emb_pos);
        let mut x = Array2::zeros((l, d));
        for (i, &id) in ids.iter().enumerate() {
            let mut row = x.row_mut(i);
            row.assign(&emb_tok.row(id));
            row += &emb_pos.row(i);
        }
        let (mut x, emb_ln) = layer_norm(&x.view(), &p.row(self.emb_ln_g), &p.row(self.emb_ln_b));
        let emb_drop = dropout.as_mut().map(|(rate, rng)| dropout_mask(l, d, *rate, rng));
        if let Some(mask) = &emb_drop {
            x *= mask;
        }

        let mut attentions = Vec::with_capacity(self.layers.len());
        let mut passes = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (attn_out, attn_cache) = attention_forward(
                p,
                &layer.attn,
                &x.view(),
                &input.attention_mask,
                self.config.heads,
                dropout.as_mut().map(|(rate, rng)| (*rate, &mut **rng)),
            );
            attentions.push(attn_cache.probs.clone());
            let attn_drop = dropout.as_mut().map(|(rate, rng)| dropout_mask(l, d, *rate, rng));
            let mut res1 = attn_out;
            if let Some(mask) = &attn_drop {
                res1 *= mask;
            }
            res1 += &x;
            let (h1, ln1) = layer_norm(&res1.view(), &p.row(layer.ln1_g), &p.row(layer.ln1_b));

            let (ffn_out, ffn_cache) = ffn_forward(p, &layer.ffn, &h1.view());
            let ffn_drop = dropout.as_mut().map(|(rate, rng)| dropout_mask(l, d, *rate, rng));
            let mut res2 = ffn_out;
            if let Some(mask) = &ffn_drop {
                res2 *= mask;
            }
            res2 += &h1;
            let (h2, ln2) = layer_norm(&res2.view(), &p.row(layer.ln2_g), &p.row(layer.ln2_b));

            passes.push(LayerPass { attn: attn_cache, attn_drop, ln1, ffn: ffn_cache, ffn_drop, ln2 });
            x = h2;
        }

        Ok((
            EncoderOutput { hidden: x, attentions },
            EncoderCache { ids: ids.clone(), emb_ln, emb_drop, layers: passes },
        ))
    }

    /// Backpropagates `d_hidden` (gradient at the final hidden states)
    /// through the whole encoder, accumulating parameter gradients into `g`.
    pub fn backward(
        &self,
        p: &Params,
        cache: &EncoderCache,
        d_hidden: &ArrayView2<f64>,
        g: &mut Params,
    ) {
        let mut dx = d_hidden.to_owned();
        for (layer, pass) in self.layers.iter().zip(&cache.layers).rev() {
            let d_res2 =
                layer_norm_backward(&pass.ln2, &p.row(layer.ln2_g), &dx.view(), g, layer.ln2_g, layer.ln2_b);
            let mut d_ffn_out = d_res2.clone();
            if let Some(mask) = &pass.ffn_drop {
                d_ffn_out *= mask;
            }
            let mut d_h1 = ffn_backward(p, &layer.ffn, &pass.ffn, &d_ffn_out.view(), g);
            d_h1 += &d_res2;

            let d_res1 =
                layer_norm_backward(&pass.ln1, &p.row(layer.ln1_g), &d_h1.view(), g, layer.ln1_g, layer.ln1_b);
            let mut d_attn_out = d_res1.clone();
            if let Some(mask) = &pass.attn_drop {
                d_attn_out *= mask;
            }
            dx = attention_backward(p, &layer.attn, &pass.attn, &d_attn_out.view(), self.config.heads, g);
            dx += &d_res1;
        }

        if let Some(mask) = &cache.emb_drop {
            dx *= mask;
        }
        let d_emb =
            layer_norm_backward(&cache.emb_ln, &p.row(self.emb_ln_g), &dx.view(), g, self.emb_ln_g, self.emb_ln_b);
        let mut emb_tok_g = g.mat_mut(self.emb_tok);
        for (i, &id) in cache.ids.iter().enumerate() {
            let mut row = emb_tok_g.row_mut(id);
            row += &d_emb.row(i);
        }
        let mut emb_pos_g = g.mat_mut(self.emb_pos);
        for i in 0..cache.ids.len() {
            let mut row = emb_pos_g.row_mut(i);
            row += &d_emb.row(i);
        }
    }

    /// Unnormalized vocabulary scores of the hidden state at
    /// `mask_position`: `emb_tok · h + bias` (head weight-tied to the
    /// embedding table).
    pub fn mask_scores(
        &self,
        p: &Params,
        output: &EncoderOutput,
        mask_position: usize,
    ) -> Result<Array1<f64>, ModelError> {
        if mask_position >= output.hidden.nrows() {
            return Err(ModelError::BadPosition {
                pos: mask_position,
                len: output.hidden.nrows(),
            });
        }
        let h = output.hidden.row(mask_position);
        let mut scores = p.mat(self.emb_tok).dot(&h);
        scores += &p.row(self.mask_bias);
        Ok(scores)
    }

    /// Backward of [`mask_scores`]: accumulates embedding and bias
    /// gradients and returns the gradient at the final hidden states (zero
    /// outside the mask row).
    pub fn mask_scores_backward(
        &self,
        p: &Params,
        output: &EncoderOutput,
        mask_position: usize,
        d_scores: &Array1<f64>,
        g: &mut Params,
    ) -> Array2<f64> {
        let h = output.hidden.row(mask_position);
        {
            let mut emb_g = g.mat_mut(self.emb_tok);
            for (v, &ds) in d_scores.iter().enumerate() {
                if ds != 0.0 {
                    let mut row = emb_g.row_mut(v);
                    row.scaled_add(ds, &h);
                }
            }
        }
        g.add_to_row(self.mask_bias, &d_scores.view());
        let mut d_hidden = Array2::zeros(output.hidden.raw_dim());
        d_hidden.row_mut(mask_position).assign(&p.mat(self.emb_tok).t().dot(d_scores));
        d_hidden
    }
}
