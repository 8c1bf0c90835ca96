//! Trigger-free event detection on short texts.
//!
//! The model couples a small transformer encoder with two scoring towers
//! that share all encoder weights:
//!
//! * the **recognition tower** appends one marker token per event type to
//!   the input and reads a binary answer/not-answer distribution off each
//!   marker's final hidden state;
//! * the **cloze tower** wraps the sentence in a prompt containing a single
//!   `[MASK]` slot and compares the mask's vocabulary scores for the event
//!   markers against the score of the `⟨none⟩` marker.
//!
//! Both towers are trained jointly and their per-sentence label sets are
//! combined at inference time (intersection by default). Everything runs on
//! the CPU in `f64`; gradients are hand-written and checked against finite
//! differences in the test suite.

pub mod backbone;
pub mod checkpoint;
pub mod corpus;
pub mod etc_tower;
pub mod evaluation;
pub mod inference;
pub mod manifest;
pub mod nn;
pub mod rce_tower;
pub mod tokenizer;
pub mod trainer;
pub mod viz;

pub use backbone::{Backbone, BackboneConfig, EncoderOutput};
pub use corpus::{Corpus, EventTypeRegistry, Instance, Split};
pub use etc_tower::{EtcScores, PromptTemplate, TemplateKind};
pub use evaluation::EvalReport;
pub use inference::{AttentionReport, CombinationMode, Prediction};
pub use tokenizer::{TokenizedInput, Vocabulary};
pub use trainer::{Model, TrainConfig, TrainOutcome};
