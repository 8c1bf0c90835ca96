//! Recognition tower: the appended marker tokens act as answer candidates
//! and each is classified answer / not-answer from its final hidden state.
//!
//! The tower is a single `D × 2` projection shared across markers, followed
//! by a row-wise softmax. Gold markers (and `⟨none⟩` exactly when the gold
//! set is empty) carry the answer label; the loss is the mean cross-entropy
//! over all `N+1` rows. Prediction keeps the real types whose answer
//! probability strictly exceeds their not-answer probability.

use std::collections::BTreeSet;

use ndarray::{Array2, ArrayView2};

use crate::backbone::{EncoderOutput, ModelError};
use crate::corpus::EventTypeRegistry;
use crate::nn::{Init, ParamLayout, Params, Tid};

/// Column index of the "not-answer" probability in [`RceOutput::probs`].
pub const COL_NOT_ANSWER: usize = 0;
/// Column index of the "answer" probability in [`RceOutput::probs`].
pub const COL_ANSWER: usize = 1;

/// The tower's only weight: a `D × 2` projection (no bias).
#[derive(Debug, Clone, Copy)]
pub struct RceHead {
    pub w: Tid,
}

impl RceHead {
    pub fn alloc(layout: &mut ParamLayout, width: usize) -> Self {
        Self { w: layout.alloc("rce.w", width, 2, Init::Normal) }
    }
}

/// Marker hidden states and their (not-answer, answer) distributions, rows
/// in registry order with `⟨none⟩` last.
#[derive(Debug, Clone)]
pub struct RceOutput {
    pub event_states: Array2<f64>,
    pub probs: Array2<f64>,
}

/// Gathers marker states at `event_span` and applies the answer softmax.
pub fn rce_forward(
    p: &Params,
    head: &RceHead,
    output: &EncoderOutput,
    event_span: (usize, usize),
    registry: &EventTypeRegistry,
) -> Result<RceOutput, ModelError> {
    let (start, end) = event_span;
    if end > output.hidden.nrows() || start > end {
        return Err(ModelError::BadPosition { pos: end, len: output.hidden.nrows() });
    }
    if end - start != registry.num_markers() {
        return Err(ModelError::SpanMismatch {
            got: end - start,
            expected: registry.num_markers(),
        });
    }
    let event_states = output.hidden.slice(ndarray::s![start..end, ..]).to_owned();
    let mut probs = event_states.dot(&p.mat(head.w));
    for row in probs.rows_mut() {
        crate::nn::softmax_row(row);
    }
    Ok(RceOutput { event_states, probs })
}

/// Answer label of each marker row given the gold set: real types are
/// answers when gold, `⟨none⟩` is the answer exactly when gold is empty.
fn answer_labels(gold_events: &BTreeSet<String>, registry: &EventTypeRegistry) -> Vec<bool> {
    let mut labels: Vec<bool> =
        registry.names().iter().map(|n| gold_events.contains(n)).collect();
    labels.push(gold_events.is_empty());
    labels
}

/// Mean cross-entropy over all `N+1` marker rows.
pub fn rce_loss(
    output: &RceOutput,
    gold_events: &BTreeSet<String>,
    registry: &EventTypeRegistry,
) -> f64 {
    let labels = answer_labels(gold_events, registry);
    let n = labels.len() as f64;
    labels
        .iter()
        .enumerate()
        .map(|(i, &answer)| {
            let col = if answer { COL_ANSWER } else { COL_NOT_ANSWER };
            -output.probs[[i, col]].ln()
        })
        .sum::<f64>()
        / n
}

/// Backward of softmax + cross-entropy + projection in one step.
///
/// Accumulates the head-weight gradient into `g` and returns the gradient
/// at the marker hidden states, both scaled by `scale` (the loss weight
/// divided by any batch normalizer).
pub fn rce_backward(
    p: &Params,
    head: &RceHead,
    output: &RceOutput,
    gold_events: &BTreeSet<String>,
    registry: &EventTypeRegistry,
    scale: f64,
    g: &mut Params,
) -> Array2<f64> {
    let labels = answer_labels(gold_events, registry);
    let n = labels.len() as f64;
    // d logits = (P − onehot(y)) / (N+1), the fused softmax + CE gradient.
    let mut d_logits = output.probs.clone();
    for (i, &answer) in labels.iter().enumerate() {
        let col = if answer { COL_ANSWER } else { COL_NOT_ANSWER };
        d_logits[[i, col]] -= 1.0;
    }
    d_logits *= scale / n;
    g.add_to_mat(head.w, &output.event_states.t().dot(&d_logits).view());
    d_logits.dot(&p.mat(head.w).t())
}

/// Types whose answer probability strictly exceeds not-answer. The
/// `⟨none⟩` row never enters the returned set; ties predict nothing.
pub fn rce_predict(output: &RceOutput, registry: &EventTypeRegistry) -> BTreeSet<String> {
    registry
        .names()
        .iter()
        .enumerate()
        .filter(|&(i, _)| output.probs[[i, COL_ANSWER]] > output.probs[[i, COL_NOT_ANSWER]])
        .map(|(_, name)| name.clone())
        .collect()
}

/// Restricted softmax used by tests and oracles to build `RceOutput`
/// probabilities straight from logits.
pub fn probs_from_logits(logits: &ArrayView2<f64>) -> Array2<f64> {
    let mut probs = logits.to_owned();
    for row in probs.rows_mut() {
        crate::nn::softmax_row(row);
    }
    probs
}
