//! Combining the two towers' decisions at prediction time, plus
//! attention-mass extraction over the event-marker tokens.
//!
//! Each tower produces a set of event-type names; the final prediction is
//! a set operation over the two (intersection by default). An empty result
//! means "no event". All paths here run the encoder in eval mode, so
//! outputs are deterministic functions of the weights and input.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::corpus::Instance;
use crate::etc_tower::{etc_predict, select_event_scores, EtcScores};
use crate::rce_tower::{rce_forward, rce_predict};
use crate::trainer::{Model, TrainError};

/// How the two tower sets merge into the final event set.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombinationMode {
    #[default]
    Intersection,
    Union,
    RceOnly,
    EtcOnly,
}

impl CombinationMode {
    pub const ALL: [CombinationMode; 4] = [
        CombinationMode::Intersection,
        CombinationMode::Union,
        CombinationMode::RceOnly,
        CombinationMode::EtcOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CombinationMode::Intersection => "intersection",
            CombinationMode::Union => "union",
            CombinationMode::RceOnly => "rce_only",
            CombinationMode::EtcOnly => "etc_only",
        }
    }
}

impl std::fmt::Display for CombinationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for CombinationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "intersection" => Ok(CombinationMode::Intersection),
            "union" => Ok(CombinationMode::Union),
            "rce_only" => Ok(CombinationMode::RceOnly),
            "etc_only" => Ok(CombinationMode::EtcOnly),
            other => Err(format!(
                "unknown mode {other:?}, expected intersection, union, rce_only, or etc_only"
            )),
        }
    }
}

/// Applies `mode` to the two tower sets.
pub fn combine(
    mode: CombinationMode,
    rce_set: &BTreeSet<String>,
    etc_set: &BTreeSet<String>,
) -> BTreeSet<String> {
    match mode {
        CombinationMode::Intersection => rce_set.intersection(etc_set).cloned().collect(),
        CombinationMode::Union => rce_set.union(etc_set).cloned().collect(),
        CombinationMode::RceOnly => rce_set.clone(),
        CombinationMode::EtcOnly => etc_set.clone(),
    }
}

/// Full prediction for one sentence: the final event set, both tower sets,
/// and the cloze tower's raw marker scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub events: BTreeSet<String>,
    pub rce_set: BTreeSet<String>,
    pub etc_set: BTreeSet<String>,
    pub etc_scores: EtcScores,
    pub mode: CombinationMode,
}

/// Serialization shape of a prediction: sets as sorted arrays, marker
/// scores keyed by marker token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub events: Vec<String>,
    pub rce: Vec<String>,
    pub etc: Vec<String>,
    pub scores: BTreeMap<String, f64>,
}

impl Prediction {
    /// Converts to the JSON record, keying scores by the marker tokens of
    /// `model`'s registry.
    pub fn record(&self, model: &Model) -> PredictionRecord {
        let scores = model
            .registry
            .marker_tokens()
            .iter()
            .cloned()
            .zip(self.etc_scores.scores.iter().copied())
            .collect();
        PredictionRecord {
            id: self.id.clone(),
            events: self.events.iter().cloned().collect(),
            rce: self.rce_set.iter().cloned().collect(),
            etc: self.etc_set.iter().cloned().collect(),
            scores,
        }
    }
}

/// Runs both towers on one instance in eval mode and combines their sets.
pub fn predict_instance(
    model: &Model,
    inst: &Instance,
    mode: CombinationMode,
) -> Result<Prediction, TrainError> {
    let enc = model.encode_instance(inst)?;
    let p = &model.params;

    let (out, _) = model.backbone.encode(p, &enc.rce, None)?;
    let span = enc.rce.event_span.expect("recognition encoding has an event span");
    let rce_out = rce_forward(p, &model.rce_head, &out, span, &model.registry)?;
    let rce_set = rce_predict(&rce_out, &model.registry);

    let (out, _) = model.backbone.encode(p, &enc.etc, None)?;
    let mask_pos = enc.etc.mask_position.expect("cloze encoding has a mask position");
    let vocab_scores = model.backbone.mask_scores(p, &out, mask_pos)?;
    let etc_scores = select_event_scores(&vocab_scores.view(), &model.registry, &model.vocab)?;
    let etc_set = etc_predict(&etc_scores, &model.registry);

    let events = combine(mode, &rce_set, &etc_set);
    Ok(Prediction { id: inst.id.clone(), events, rce_set, etc_set, etc_scores, mode })
}

/// [`predict_instance`] over raw whitespace-split sentence tokens.
pub fn predict(
    model: &Model,
    tokens: &[String],
    mode: CombinationMode,
) -> Result<Prediction, TrainError> {
    let inst = Instance {
        id: "input".to_string(),
        tokens: tokens.to_vec(),
        gold_events: BTreeSet::new(),
    };
    predict_instance(model, &inst, mode)
}

// ---------------------------------------------------------------------------
// Attention extraction
// ---------------------------------------------------------------------------

/// Which attention tensors feed the report.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnReduction {
    /// Last layer only, averaged over heads.
    #[default]
    LastLayerMeanHeads,
    /// Average over every layer and head.
    MeanAll,
}

impl std::str::FromStr for AttnReduction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "last_layer_mean_heads" => Ok(AttnReduction::LastLayerMeanHeads),
            "mean_all" => Ok(AttnReduction::MeanAll),
            other => Err(format!(
                "unknown reduction {other:?}, expected last_layer_mean_heads or mean_all"
            )),
        }
    }
}

/// Attention mass flowing to one marker token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMass {
    pub token: String,
    pub mass: f64,
}

/// Normalized attention mass from sentence positions to each of the `N+1`
/// marker tokens, in registry order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    pub id: String,
    pub reduction: AttnReduction,
    pub masses: Vec<AttentionMass>,
}

impl AttentionReport {
    /// Marker tokens by descending mass (ties keep registry order).
    pub fn ranked(&self) -> Vec<&AttentionMass> {
        let mut order: Vec<&AttentionMass> = self.masses.iter().collect();
        order.sort_by(|a, b| b.mass.partial_cmp(&a.mass).expect("masses are finite"));
        order
    }
}

/// Sums attention directed from sentence-span query rows to each marker
/// key column of the recognition encoding, reduces per `reduction`, and
/// normalizes over the markers.
///
/// A sentence that truncates to zero tokens has no query rows; the report
/// falls back to uniform masses in that case.
pub fn extract_attention(
    model: &Model,
    inst: &Instance,
    reduction: AttnReduction,
) -> Result<AttentionReport, TrainError> {
    let enc = crate::tokenizer::encode_rce(inst, &model.registry, &model.vocab, model.max_len)?;
    let (out, _) = model.backbone.encode(&model.params, &enc, None)?;
    let (es, ee) = enc.event_span.expect("recognition encoding has an event span");
    let (ss, se) = enc.sentence_span;

    let len = out.hidden.nrows();
    let mut pooled = Array2::<f64>::zeros((len, len));
    let mut n_mats = 0usize;
    let layers: &[ndarray::Array3<f64>] = match reduction {
        AttnReduction::LastLayerMeanHeads => std::slice::from_ref(
            out.attentions.last().expect("encoder has at least one layer"),
        ),
        AttnReduction::MeanAll => &out.attentions,
    };
    for layer in layers {
        for head in layer.outer_iter() {
            pooled += &head;
            n_mats += 1;
        }
    }
    pooled /= n_mats as f64;

    let markers = ee - es;
    let mut masses = vec![0.0; markers];
    for q in ss..se {
        for (j, mass) in masses.iter_mut().enumerate() {
            *mass += pooled[[q, es + j]];
        }
    }
    let total: f64 = masses.iter().sum();
    if total > 0.0 {
        for m in &mut masses {
            *m /= total;
        }
    } else {
        masses.fill(1.0 / markers as f64);
    }

    Ok(AttentionReport {
        id: inst.id.clone(),
        reduction,
        masses: model
            .registry
            .marker_tokens()
            .iter()
            .cloned()
            .zip(masses)
            .map(|(token, mass)| AttentionMass { token, mass })
            .collect(),
    })
}
