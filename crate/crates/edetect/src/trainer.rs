//! Joint training of the two towers over the shared encoder: per-batch
//! forward/backward for both input encodings, global-norm gradient
//! clipping, decoupled-weight-decay adaptive-moment updates, and an epoch
//! loop that keeps the checkpoint with the best dev micro-F1.

use std::collections::BTreeSet;
use std::sync::Arc;

use ndarray::{s, Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{Backbone, BackboneConfig, ModelError};
use crate::corpus::{Corpus, CorpusError, EventTypeRegistry, Instance, Split};
use crate::etc_tower::{
    etc_loss_grad, select_event_scores, PromptTemplate, ScoreError, TDefinition, TemplateError,
};
use crate::evaluation::{evaluate, EvalError};
use crate::inference::CombinationMode;
use crate::nn::{mix_seed, ParamLayout, Params};
use crate::rce_tower::{rce_backward, rce_forward, rce_loss, RceHead};
use crate::tokenizer::{encode_etc, encode_rce, TokenizedInput, TokenizerError, Vocabulary};

/// Words rarer than this in the training split encode as `[UNK]`.
pub const VOCAB_MIN_FREQ: usize = 1;

// Distinct seed streams so shuffling and dropout never share an RNG with
// parameter initialization.
const SHUFFLE_STREAM: u64 = 0x5348_5546;
const DROPOUT_STREAM: u64 = 0x4452_4f50;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("train and dev corpora use different event-type registries")]
    RegistryMismatch,
    #[error("{} split is empty", split.as_str())]
    EmptyCorpus { split: Split },
    #[error("non-finite loss (l_rce={l_rce}, l_etc={l_etc}) on batch {batch_ids:?}")]
    NonFinite { batch_ids: Vec<String>, l_rce: f64, l_etc: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Eval(Box<EvalError>),
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Relative weights of the two tower losses in the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub w_rce: f64,
    pub w_etc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w_rce: 1.0, w_etc: 1.0 }
    }
}

/// Optimization settings. The defaults are the reference recipe; JSON
/// config files may set any subset of fields and leave the rest at their
/// defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_len: usize,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub t_definition: TDefinition,
    pub combination_mode: CombinationMode,
    /// Name of the prompt template the cloze tower trains with.
    pub prompt: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-5,
            weight_decay: 5e-5,
            max_grad_norm: 1.0,
            dropout: 0.3,
            batch_size: 8,
            epochs: 10,
            max_len: 128,
            seed: 0,
            loss_weights: LossWeights::default(),
            t_definition: TDefinition::default(),
            combination_mode: CombinationMode::default(),
            prompt: "default".to_string(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |msg: String| Err(TrainError::Config(msg));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return fail(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return fail(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        if !(self.max_grad_norm.is_finite() && self.max_grad_norm > 0.0) {
            return fail(format!("max_grad_norm {} must be positive", self.max_grad_norm));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if self.max_len == 0 {
            return fail("max_len must be positive".into());
        }
        let w = &self.loss_weights;
        if !(w.w_rce.is_finite() && w.w_etc.is_finite() && w.w_rce >= 0.0 && w.w_etc >= 0.0) {
            return fail(format!(
                "loss weights ({}, {}) must be non-negative",
                w.w_rce, w.w_etc
            ));
        }
        if w.w_rce == 0.0 && w.w_etc == 0.0 {
            return fail("loss weights must not both be zero".into());
        }
        Ok(())
    }
}

/// Batch losses: each tower's mean plus their weighted combination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_rce: f64,
    pub l_etc: f64,
    pub l_total: f64,
}

impl LossBundle {
    pub fn new(weights: LossWeights, l_rce: f64, l_etc: f64) -> Self {
        Self { l_rce, l_etc, l_total: weights.w_rce * l_rce + weights.w_etc * l_etc }
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// Both tower encodings of one instance, computed once before training.
#[derive(Debug, Clone)]
pub struct EncodedInstance {
    pub id: String,
    pub gold_events: BTreeSet<String>,
    pub rce: TokenizedInput,
    pub etc: TokenizedInput,
}

/// A complete two-tower model: encoder structure, answer head, the flat
/// weight buffer, and everything needed to encode raw instances.
pub struct Model {
    pub backbone: Backbone,
    pub rce_head: RceHead,
    pub params: Params,
    pub vocab: Vocabulary,
    pub registry: EventTypeRegistry,
    pub template: PromptTemplate,
    pub max_len: usize,
}

impl Model {
    /// Builds and initializes a model. `config.vocab_size` may be left 0 to
    /// take the vocabulary's size; a nonzero value must match it.
    pub fn new(
        mut config: BackboneConfig,
        vocab: Vocabulary,
        registry: EventTypeRegistry,
        template: PromptTemplate,
        max_len: usize,
    ) -> Result<Self, TrainError> {
        template.validate()?;
        if config.vocab_size == 0 {
            config.vocab_size = vocab.len();
        } else if config.vocab_size != vocab.len() {
            return Err(TrainError::Config(format!(
                "backbone vocab_size {} does not match vocabulary size {}",
                config.vocab_size,
                vocab.len()
            )));
        }
        if max_len > config.max_positions {
            return Err(TrainError::Config(format!(
                "max_len {} exceeds the encoder's {} positions",
                max_len, config.max_positions
            )));
        }
        let mut layout = ParamLayout::default();
        let backbone = Backbone::new(config, &mut layout)?;
        let rce_head = RceHead::alloc(&mut layout, backbone.config.width);
        let params =
            Params::init(Arc::new(layout), backbone.config.init_std, backbone.config.seed);
        Ok(Self { backbone, rce_head, params, vocab, registry, template, max_len })
    }

    /// Tokenizes one instance for both towers.
    pub fn encode_instance(&self, inst: &Instance) -> Result<EncodedInstance, TrainError> {
        Ok(EncodedInstance {
            id: inst.id.clone(),
            gold_events: inst.gold_events.clone(),
            rce: encode_rce(inst, &self.registry, &self.vocab, self.max_len)?,
            etc: encode_etc(inst, &self.template, &self.vocab, self.max_len)?,
        })
    }

    /// Forward pass of both towers for one instance under weights `p`,
    /// optionally accumulating gradients.
    ///
    /// When `grad` is `Some((g, s_rce, s_etc))`, the gradient of
    /// `s_rce · l_rce + s_etc · l_etc` is added into `g`; a zero scale
    /// skips that tower's backward pass. Dropout, when given, consumes the
    /// RNG in a fixed order, so replaying the same RNG state reproduces
    /// the same masks.
    pub fn instance_losses(
        &self,
        p: &Params,
        enc: &EncodedInstance,
        t_def: TDefinition,
        mut dropout: Option<(f64, &mut ChaCha8Rng)>,
        mut grad: Option<(&mut Params, f64, f64)>,
    ) -> Result<(f64, f64), TrainError> {
        let (out, cache) =
            self.backbone.encode(p, &enc.rce, dropout.as_mut().map(|(r, rng)| (*r, &mut **rng)))?;
        let span = enc.rce.event_span.ok_or(ModelError::MissingField("event_span"))?;
        let rce_out = rce_forward(p, &self.rce_head, &out, span, &self.registry)?;
        let l_rce = rce_loss(&rce_out, &enc.gold_events, &self.registry);
        if let Some((g, s_rce, _)) = &mut grad {
            if *s_rce != 0.0 {
                let d_markers = rce_backward(
                    p,
                    &self.rce_head,
                    &rce_out,
                    &enc.gold_events,
                    &self.registry,
                    *s_rce,
                    g,
                );
                let mut d_hidden = Array2::zeros(out.hidden.raw_dim());
                d_hidden.slice_mut(s![span.0..span.1, ..]).assign(&d_markers);
                self.backbone.backward(p, &cache, &d_hidden.view(), g);
            }
        }

        let (out, cache) =
            self.backbone.encode(p, &enc.etc, dropout.as_mut().map(|(r, rng)| (*r, &mut **rng)))?;
        let mask_pos = enc.etc.mask_position.ok_or(ModelError::MissingField("mask_position"))?;
        let vocab_scores = self.backbone.mask_scores(p, &out, mask_pos)?;
        let marker_scores = select_event_scores(&vocab_scores.view(), &self.registry, &self.vocab)?;
        let (l_etc, d_markers) =
            etc_loss_grad(&marker_scores, &enc.gold_events, &self.registry, t_def);
        if let Some((g, _, s_etc)) = &mut grad {
            if *s_etc != 0.0 {
                let mut d_scores = Array1::zeros(self.vocab.len());
                for (i, token) in self.registry.marker_tokens().iter().enumerate() {
                    let id = self.vocab.id(token).expect("markers are in the vocabulary");
                    d_scores[id] = *s_etc * d_markers[i];
                }
                let d_hidden =
                    self.backbone.mask_scores_backward(p, &out, mask_pos, &d_scores, g);
                self.backbone.backward(p, &cache, &d_hidden.view(), g);
            }
        }

        Ok((l_rce, l_etc))
    }

    /// Mean tower losses over a batch, with optional gradient of the
    /// combined loss. Works with an arbitrary weight buffer `p` sharing the
    /// model's layout, so finite-difference probes can perturb weights
    /// without touching the model.
    pub fn batch_losses(
        &self,
        p: &Params,
        batch: &[&EncodedInstance],
        t_def: TDefinition,
        weights: LossWeights,
        mut dropout: Option<(f64, &mut ChaCha8Rng)>,
        mut grad: Option<&mut Params>,
    ) -> Result<LossBundle, TrainError> {
        if batch.is_empty() {
            return Err(TrainError::Config("cannot take a step on an empty batch".into()));
        }
        let scale = 1.0 / batch.len() as f64;
        let (mut sum_rce, mut sum_etc) = (0.0, 0.0);
        for enc in batch {
            let g = grad
                .as_deref_mut()
                .map(|g| (g, weights.w_rce * scale, weights.w_etc * scale));
            let (l_rce, l_etc) = self.instance_losses(
                p,
                enc,
                t_def,
                dropout.as_mut().map(|(r, rng)| (*r, &mut **rng)),
                g,
            )?;
            sum_rce += l_rce;
            sum_etc += l_etc;
        }
        Ok(LossBundle::new(weights, sum_rce * scale, sum_etc * scale))
    }
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Rescales `grad` so its global L2 norm is at most `max_norm`; returns the
/// pre-clip norm.
pub fn clip_global_norm(grad: &mut Params, max_norm: f64) -> f64 {
    let norm = grad.data.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in &mut grad.data {
            *g *= scale;
        }
    }
    norm
}

/// Adaptive-moment optimizer with decoupled weight decay and bias-corrected
/// moment estimates.
pub struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamW {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// One update: `θ ← θ − lr·(m̂/(√v̂+ε) + λ·θ)`. The decay term uses the
    /// pre-update weight and bypasses the moment estimates.
    pub fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64, weight_decay: f64) {
        assert_eq!(theta.len(), grad.len());
        assert_eq!(theta.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..theta.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            theta[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + weight_decay * theta[i]);
        }
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// Mutable training state: the model being optimized plus optimizer and
/// dropout-RNG state.
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    opt: AdamW,
    dropout_rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let opt = AdamW::new(model.params.data.len());
        let dropout_rng =
            ChaCha8Rng::seed_from_u64(mix_seed(config.seed, DROPOUT_STREAM));
        Ok(Self { model, config, opt, dropout_rng })
    }

    /// One optimizer step on `batch`: forward both towers per instance in
    /// training mode, batch-mean the losses, clip the combined gradient's
    /// global norm, and apply the update. Returns the pre-update losses.
    pub fn train_step(&mut self, batch: &[&EncodedInstance]) -> Result<LossBundle, TrainError> {
        let mut grad = Params::zeros(Arc::clone(self.model.params.layout()));
        let bundle = self.model.batch_losses(
            &self.model.params,
            batch,
            self.config.t_definition,
            self.config.loss_weights,
            Some((self.config.dropout, &mut self.dropout_rng)),
            Some(&mut grad),
        )?;
        if !bundle.l_total.is_finite() {
            return Err(TrainError::NonFinite {
                batch_ids: batch.iter().map(|b| b.id.clone()).collect(),
                l_rce: bundle.l_rce,
                l_etc: bundle.l_etc,
            });
        }
        clip_global_norm(&mut grad, self.config.max_grad_norm);
        self.opt.step(
            &mut self.model.params.data,
            &grad.data,
            self.config.learning_rate,
            self.config.weight_decay,
        );
        Ok(bundle)
    }
}

/// One line of the run log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_rce: f64,
    pub l_etc: f64,
    pub dev_p: f64,
    pub dev_r: f64,
    pub dev_f1: f64,
}

/// Result of a training run: the best model by dev micro-F1, the per-epoch
/// log, and which epoch won (`None` when no epoch beat the initial
/// weights, including `epochs = 0`).
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub best_dev_f1: f64,
}

/// Trains a fresh model on `train_corpus`, selecting the checkpoint with
/// the best dev micro-F1 under the configured combination mode.
///
/// `arch` supplies depth/width/heads/ffn_mult/init_std; its vocabulary
/// size, position count, dropout, and seed are taken from the built
/// vocabulary and `config`. The initial weights serve as the selection
/// baseline, so `epochs = 0` returns the initialized model.
pub fn train(
    train_corpus: &Corpus,
    dev_corpus: &Corpus,
    arch: &BackboneConfig,
    config: &TrainConfig,
    template: &PromptTemplate,
) -> Result<TrainOutcome, TrainError> {
    train_with(train_corpus, dev_corpus, arch, config, template, |_| {})
}

/// [`train`] with a per-epoch progress callback, invoked right after each
/// epoch's dev evaluation.
pub fn train_with(
    train_corpus: &Corpus,
    dev_corpus: &Corpus,
    arch: &BackboneConfig,
    config: &TrainConfig,
    template: &PromptTemplate,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if train_corpus.registry != dev_corpus.registry {
        return Err(TrainError::RegistryMismatch);
    }
    if train_corpus.is_empty() {
        return Err(TrainError::EmptyCorpus { split: train_corpus.split });
    }
    if dev_corpus.is_empty() {
        return Err(TrainError::EmptyCorpus { split: dev_corpus.split });
    }

    let vocab = Vocabulary::build(&[train_corpus], &train_corpus.registry, VOCAB_MIN_FREQ)?;
    let mut arch = arch.clone();
    arch.vocab_size = 0;
    arch.max_positions = config.max_len;
    arch.dropout = config.dropout;
    arch.seed = config.seed;
    let model = Model::new(
        arch,
        vocab,
        train_corpus.registry.clone(),
        template.clone(),
        config.max_len,
    )?;
    let encoded: Vec<EncodedInstance> = train_corpus
        .instances
        .iter()
        .map(|inst| model.encode_instance(inst))
        .collect::<Result<_, _>>()?;

    let dev_eval = |model: &Model| {
        evaluate(dev_corpus, model, config.combination_mode)
            .map_err(|e| TrainError::Eval(Box::new(e)))
    };
    let mut best_f1 = dev_eval(&model)?.f1;
    let mut best_params = model.params.data.clone();
    let mut best_epoch = None;

    let mut trainer = Trainer::new(model, config.clone())?;
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..encoded.len()).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(config.seed, SHUFFLE_STREAM), epoch as u64));
        order.shuffle(&mut rng);

        let (mut sum_rce, mut sum_etc) = (0.0, 0.0);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&EncodedInstance> = chunk.iter().map(|&i| &encoded[i]).collect();
            let bundle = trainer.train_step(&batch)?;
            sum_rce += bundle.l_rce * batch.len() as f64;
            sum_etc += bundle.l_etc * batch.len() as f64;
        }
        let n = encoded.len() as f64;

        let report = dev_eval(&trainer.model)?;
        let entry = EpochLog {
            epoch,
            l_rce: sum_rce / n,
            l_etc: sum_etc / n,
            dev_p: report.precision,
            dev_r: report.recall,
            dev_f1: report.f1,
        };
        on_epoch(&entry);
        log.push(entry);
        if report.f1 > best_f1 {
            best_f1 = report.f1;
            best_params = trainer.model.params.data.clone();
            best_epoch = Some(epoch);
        }
    }

    let mut model = trainer.model;
    model.params.data = best_params;
    Ok(TrainOutcome { model, log, best_epoch, best_dev_f1: best_f1 })
}
