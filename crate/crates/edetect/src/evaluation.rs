//! Multi-label micro precision/recall/F1 with per-type breakdowns.
//!
//! Counts are pooled over instances: tp = Σ|gold ∩ pred|, fp = Σ|pred ∖
//! gold|, fn = Σ|gold ∖ pred|. "No event" is the empty set, never a label,
//! so correct no-event predictions contribute nothing to any count.
//! Degenerate denominators follow the usual convention: a precision (or
//! recall) with an empty denominator is 1 when the other error count is
//! also zero and 0 otherwise; F1 is 0 whenever P + R = 0.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::inference::{predict_instance, CombinationMode};
use crate::trainer::{Model, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("gold has {gold} instances but pred has {pred}")]
    LengthMismatch { gold: usize, pred: usize },
    #[error("corpus registry does not match the model registry")]
    RegistryMismatch,
    #[error(transparent)]
    Model(#[from] TrainError),
}

/// Pooled counts and F1 of one event type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub f1: f64,
}

/// Micro-averaged report over a prediction run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_type: BTreeMap<String, TypeCounts>,
    pub n_instances: usize,
}

/// Precision, recall, and F1 from raw counts, including the degenerate
/// zero-denominator rules.
pub fn prf_from_counts(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let precision = if tp + fp == 0 {
        if fn_ == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        if fp == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    (precision, recall, f1)
}

/// Micro P/R/F1 over parallel lists of gold and predicted label sets.
pub fn micro_prf(
    gold: &[BTreeSet<String>],
    pred: &[BTreeSet<String>],
) -> Result<EvalReport, EvalError> {
    if gold.len() != pred.len() {
        return Err(EvalError::LengthMismatch { gold: gold.len(), pred: pred.len() });
    }
    let mut counts: BTreeMap<String, (usize, usize, usize)> = BTreeMap::new();
    for (g, p) in gold.iter().zip(pred) {
        for name in g.intersection(p) {
            counts.entry(name.clone()).or_default().0 += 1;
        }
        for name in p.difference(g) {
            counts.entry(name.clone()).or_default().1 += 1;
        }
        for name in g.difference(p) {
            counts.entry(name.clone()).or_default().2 += 1;
        }
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    let mut per_type = BTreeMap::new();
    for (name, (t, f, n)) in counts {
        tp += t;
        fp += f;
        fn_ += n;
        let (_, _, f1) = prf_from_counts(t, f, n);
        per_type.insert(name, TypeCounts { tp: t, fp: f, fn_: n, f1 });
    }
    let (precision, recall, f1) = prf_from_counts(tp, fp, fn_);
    Ok(EvalReport {
        tp,
        fp,
        fn_,
        precision,
        recall,
        f1,
        per_type,
        n_instances: gold.len(),
    })
}

/// Predicts every instance of `corpus` under `mode` and scores the result.
pub fn evaluate(
    corpus: &Corpus,
    model: &Model,
    mode: CombinationMode,
) -> Result<EvalReport, EvalError> {
    if corpus.registry != model.registry {
        return Err(EvalError::RegistryMismatch);
    }
    let mut gold = Vec::with_capacity(corpus.len());
    let mut pred = Vec::with_capacity(corpus.len());
    for inst in &corpus.instances {
        gold.push(inst.gold_events.clone());
        pred.push(predict_instance(model, inst, mode)?.events);
    }
    micro_prf(&gold, &pred)
}

/// Renders the report as an aligned text table: a micro row followed by one
/// row per event type.
pub fn render_table(report: &EvalReport) -> String {
    let name_width = report
        .per_type
        .keys()
        .map(|k| k.chars().count())
        .chain(std::iter::once(5))
        .max()
        .unwrap_or(5);
    let mut out = String::new();
    out.push_str(&format!(
        "{:<name_width$}  {:>7}  {:>7}  {:>7}  {:>5}  {:>5}  {:>5}\n",
        "", "P", "R", "F1", "tp", "fp", "fn"
    ));
    out.push_str(&format!(
        "{:<name_width$}  {:>7.4}  {:>7.4}  {:>7.4}  {:>5}  {:>5}  {:>5}\n",
        "micro", report.precision, report.recall, report.f1, report.tp, report.fp, report.fn_
    ));
    for (name, c) in &report.per_type {
        let (p, r, _) = prf_from_counts(c.tp, c.fp, c.fn_);
        out.push_str(&format!(
            "{:<name_width$}  {:>7.4}  {:>7.4}  {:>7.4}  {:>5}  {:>5}  {:>5}\n",
            name, p, r, c.f1, c.tp, c.fp, c.fn_
        ));
    }
    out
}
