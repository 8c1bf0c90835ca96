//! Shipping gate: one test per release criterion.
//!
//! Each test prints a single `[cN] PASS/FAIL` line with the measured
//! numbers next to the pinned thresholds, so a bare `cargo test` run
//! doubles as the acceptance report. Tolerances and budgets live in the
//! constants below; the heavy end-to-end artifacts (five trained models
//! on the default synthetic task) are built once and shared.

use std::collections::BTreeSet;
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use edetect::backbone::BackboneConfig;
use edetect::checkpoint::{load_checkpoint, save_checkpoint};
use edetect::corpus::synth::{generate, SyntheticCorpora, SynthSpec};
use edetect::corpus::{Corpus, EventTypeRegistry, Instance, Split};
use edetect::etc_tower::{etc_loss, etc_predict, EtcScores, PromptTemplate, TDefinition};
use edetect::evaluation::{evaluate, micro_prf, EvalReport};
use edetect::inference::{combine, extract_attention, AttnReduction, CombinationMode};
use edetect::rce_tower::{rce_loss, rce_predict, RceOutput};
use edetect::tokenizer::Vocabulary;
use edetect::trainer::{train_with, Model, TrainConfig, TrainOutcome};

// ---------------------------------------------------------------------------
// Pinned thresholds and budgets
// ---------------------------------------------------------------------------

/// c1: absolute tolerance between library losses and scalar oracles.
const LOSS_ORACLE_ABS_TOL: f64 = 1e-6;
/// c1: wall-clock budget for the 200-configuration oracle sweep.
const LOSS_ORACLE_BUDGET_SECS: f64 = 10.0;
/// c2: relative error bound for finite-difference gradient checks.
const GRADCHECK_REL_TOL: f64 = 1e-4;
/// c2: wall-clock budget for the 50-parameter gradient check.
const GRADCHECK_BUDGET_SECS: f64 = 120.0;
/// c5: micro-F1 floor under intersection combination.
const E2E_INTERSECTION_F1: f64 = 0.90;
/// c5: micro-F1 floor under every combination mode.
const E2E_ANY_MODE_F1: f64 = 0.85;
/// c5: seeds that must clear both floors, out of [`E2E_SEEDS`].
const E2E_SEEDS_REQUIRED: usize = 4;
/// c5: wall-clock budget for training and evaluating all seeds.
const E2E_BUDGET_SECS: f64 = 900.0;
/// c6: share of single-event dev sentences whose top-mass marker is gold.
const ATTN_SINGLE_EVENT_RATE: f64 = 0.85;
/// c6: share of no-event dev sentences ranking `⟨none⟩` in the top two.
const ATTN_NONE_TOP2_RATE: f64 = 0.70;
/// c7: maximum spread of template F1 scores in the prompt sweep.
const SWEEP_F1_BAND: f64 = 0.10;
/// c8: tolerance on the metric oracle's own P/R/F1 arithmetic.
const METRIC_ORACLE_TOL: f64 = 1e-12;

const E2E_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Optimizer rescale of the reference fine-tuning recipe for a backbone
/// trained from scratch: the published step size and decay target a
/// pretrained encoder and leave a randomly initialized one stuck at the
/// no-event solution, so the experiment scales both while keeping every
/// other knob (AdamW, clip 1.0, dropout 0.3, batch 8, 10 epochs,
/// best-dev selection) at its reference value.
const SCALED_LEARNING_RATE: f64 = 2e-3;
const SCALED_WEIGHT_DECAY: f64 = 2e-2;

fn scaled_config(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: SCALED_LEARNING_RATE,
        weight_decay: SCALED_WEIGHT_DECAY,
        seed,
        ..TrainConfig::default()
    }
}

/// Two-layer toy backbone used by the end-to-end experiment.
fn experiment_arch() -> BackboneConfig {
    BackboneConfig { depth: 2, width: 64, heads: 4, ..BackboneConfig::default() }
}

fn verdict(criterion: &str, pass: bool, detail: &str) {
    use std::io::Write;
    let tag = if pass { "PASS" } else { "FAIL" };
    // Written straight to the stream so the line survives libtest's
    // output capture and a plain `cargo test` shows the full gate report.
    let mut out = std::io::stdout().lock();
    writeln!(out, "[{criterion}] {tag} {detail}").ok();
    assert!(pass, "[{criterion}] {tag} {detail}");
}

// ---------------------------------------------------------------------------
// Shared end-to-end artifacts (criteria 5 and 6)
// ---------------------------------------------------------------------------

struct SeedRun {
    seed: u64,
    outcome: TrainOutcome,
    test_f1: Vec<(CombinationMode, f64)>,
}

struct Experiment {
    corpora: SyntheticCorpora,
    runs: Vec<SeedRun>,
    elapsed_secs: f64,
}

static EXPERIMENT: OnceLock<Experiment> = OnceLock::new();

fn experiment() -> &'static Experiment {
    EXPERIMENT.get_or_init(|| {
        let started = Instant::now();
        let corpora = generate(&SynthSpec::default(), 0).expect("default synthetic spec");
        let template = PromptTemplate::find_builtin("default").expect("default template");
        let arch = experiment_arch();
        let runs = E2E_SEEDS
            .iter()
            .map(|&seed| {
                let outcome = train_with(
                    &corpora.train,
                    &corpora.dev,
                    &arch,
                    &scaled_config(seed),
                    &template,
                    |_| {},
                )
                .expect("training run");
                let test_f1 = CombinationMode::ALL
                    .iter()
                    .map(|&mode| {
                        let report = evaluate(&corpora.test, &outcome.model, mode)
                            .expect("test evaluation");
                        (mode, report.f1)
                    })
                    .collect();
                SeedRun { seed, outcome, test_f1 }
            })
            .collect();
        Experiment { corpora, runs, elapsed_secs: started.elapsed().as_secs_f64() }
    })
}

// ---------------------------------------------------------------------------
// Small fixtures for the oracle tests
// ---------------------------------------------------------------------------

fn registry_of(names: &[&str]) -> EventTypeRegistry {
    EventTypeRegistry::build(names).unwrap()
}

fn random_gold(rng: &mut ChaCha8Rng, names: &[&str]) -> BTreeSet<String> {
    names
        .iter()
        .filter(|_| rng.random_bool(0.4))
        .map(|s| s.to_string())
        .collect()
}

/// Numerically plain softplus; the oracle keeps scores small enough that
/// `exp` cannot overflow, so no max-shift trick is needed.
fn oracle_softplus(x: f64) -> f64 {
    (1.0 + x.exp()).ln()
}

// ---------------------------------------------------------------------------
// c1: loss oracles
// ---------------------------------------------------------------------------

#[test]
fn c1_losses_match_scalar_oracles() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC1);
    let pool = ["Alpha", "Bravo", "Charlie", "Delta", "Echo"];
    let mut worst = 0.0f64;

    for case in 0..200 {
        let n = 1 + (case % 5); // event-type count, 1..=5
        let names = &pool[..n];
        let registry = registry_of(names);
        let gold = random_gold(&mut rng, names);

        // Recognition tower: random logits -> row softmax -> library loss
        // vs. a scalar cross-entropy computed with bare exp/ln.
        let logits =
            Array2::<f64>::from_shape_fn((n + 1, 2), |_| rng.random_range(-4.0..4.0));
        let mut probs = logits.clone();
        for mut row in probs.rows_mut() {
            let m = row[0].max(row[1]);
            let e0 = (row[0] - m).exp();
            let e1 = (row[1] - m).exp();
            row[0] = e0 / (e0 + e1);
            row[1] = e1 / (e0 + e1);
        }
        let output = RceOutput { event_states: Array2::zeros((n + 1, 1)), probs };
        let got_rce = rce_loss(&output, &gold, &registry);

        let mut oracle_rce = 0.0;
        for (i, name) in names.iter().enumerate() {
            let answer = gold.contains(*name);
            let e0 = logits[[i, 0]].exp();
            let e1 = logits[[i, 1]].exp();
            let p = if answer { e1 } else { e0 } / (e0 + e1);
            oracle_rce -= p.ln();
        }
        {
            let e0 = logits[[n, 0]].exp();
            let e1 = logits[[n, 1]].exp();
            let p = if gold.is_empty() { e1 } else { e0 } / (e0 + e1);
            oracle_rce -= p.ln();
        }
        oracle_rce /= (n + 1) as f64;
        worst = worst.max((got_rce - oracle_rce).abs());

        // Cloze tower: margin term averaged over gold types plus the
        // renormalized none log-likelihood, both in bare scalar form.
        let scores = EtcScores {
            scores: Array1::from_shape_fn(n + 1, |_| rng.random_range(-4.0..4.0)),
        };
        let got_etc = etc_loss(&scores, &gold, &registry);

        let s = &scores.scores;
        let s_none = s[n];
        let gold_idx: Vec<usize> =
            (0..n).filter(|&i| gold.contains(names[i])).collect();
        let rest_idx: Vec<usize> =
            (0..n).filter(|&i| !gold.contains(names[i])).collect();
        let mut oracle_etc = 0.0;
        if !gold_idx.is_empty() {
            let sum: f64 =
                gold_idx.iter().map(|&t| oracle_softplus(s_none - s[t])).sum();
            oracle_etc += sum / gold_idx.len() as f64;
        }
        if !rest_idx.is_empty() {
            let z: f64 =
                s_none.exp() + rest_idx.iter().map(|&t| s[t].exp()).sum::<f64>();
            oracle_etc += -(s_none.exp() / z).ln();
        }
        worst = worst.max((got_etc - oracle_etc).abs());
    }

    let secs = started.elapsed().as_secs_f64();
    let pass = worst < LOSS_ORACLE_ABS_TOL && secs < LOSS_ORACLE_BUDGET_SECS;
    verdict(
        "c1",
        pass,
        &format!(
            "loss oracles: 200 configs, worst |Δ| {worst:.2e} (tol {LOSS_ORACLE_ABS_TOL:.0e}), \
             {secs:.2}s (budget {LOSS_ORACLE_BUDGET_SECS:.0}s)"
        ),
    );
}

// ---------------------------------------------------------------------------
// c2: gradient check
// ---------------------------------------------------------------------------

#[test]
fn c2_analytic_gradients_match_finite_differences() {
    let started = Instant::now();
    let registry = registry_of(&["Alpha", "Bravo"]);
    let sentences: Vec<(&str, Vec<&str>, Vec<&str>)> = vec![
        ("g-0", vec!["ripe", "mox", "lun"], vec!["Alpha"]),
        ("g-1", vec!["solo", "tam"], vec!["Bravo"]),
        ("g-2", vec!["mox", "ver", "qui"], vec![]),
        ("g-3", vec!["ripe", "solo", "lun"], vec!["Alpha", "Bravo"]),
    ];
    let instances: Vec<Instance> = sentences
        .iter()
        .map(|(id, toks, evs)| Instance {
            id: id.to_string(),
            tokens: toks.iter().map(|s| s.to_string()).collect(),
            gold_events: evs.iter().map(|s| s.to_string()).collect(),
        })
        .collect();
    let corpus =
        Corpus { instances, split: Split::Train, registry: registry.clone() };
    let vocab = Vocabulary::build(&[&corpus], &registry, 1).unwrap();
    let template = PromptTemplate::find_builtin("default").unwrap();

    let arch = BackboneConfig {
        depth: 2,
        width: 16,
        heads: 2,
        vocab_size: vocab.len(),
        max_positions: 64,
        dropout: 0.0,
        seed: 7,
        ..BackboneConfig::default()
    };
    let model = Model::new(arch, vocab, registry, template, 64).unwrap();
    let encoded: Vec<_> = corpus
        .instances
        .iter()
        .map(|inst| model.encode_instance(inst).unwrap())
        .collect();
    let batch: Vec<_> = encoded.iter().collect();
    let weights = edetect::trainer::LossWeights::default();

    let mut params = model.params.clone();
    let mut grad = edetect::nn::Params::zeros(Arc::clone(model.params.layout()));
    model
        .batch_losses(&params, &batch, TDefinition::Gold, weights, None, Some(&mut grad))
        .unwrap();

    let total = params.data.len();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC2);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let idx = rng.random_range(0..total);
        // Central differences have O(h^2) truncation and O(eps/h) roundoff;
        // h = 1e-4 balances the two well below the 1e-4 relative gate.
        let h = 1e-4 * params.data[idx].abs().max(1.0);
        let orig = params.data[idx];

        params.data[idx] = orig + h;
        let up = model
            .batch_losses(&params, &batch, TDefinition::Gold, weights, None, None)
            .unwrap()
            .l_total;
        params.data[idx] = orig - h;
        let down = model
            .batch_losses(&params, &batch, TDefinition::Gold, weights, None, None)
            .unwrap()
            .l_total;
        params.data[idx] = orig;

        let fd = (up - down) / (2.0 * h);
        let an = grad.data[idx];
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
        worst = worst.max(rel);
    }

    let secs = started.elapsed().as_secs_f64();
    let pass = worst < GRADCHECK_REL_TOL && secs < GRADCHECK_BUDGET_SECS;
    verdict(
        "c2",
        pass,
        &format!(
            "gradcheck: 2-layer width-16 joint loss, 50 params, worst rel {worst:.2e} \
             (tol {GRADCHECK_REL_TOL:.0e}), {secs:.1}s (budget {GRADCHECK_BUDGET_SECS:.0}s)"
        ),
    );
}

// ---------------------------------------------------------------------------
// c3: prediction-rule oracles
// ---------------------------------------------------------------------------

#[test]
fn c3_prediction_rules_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC3);
    let pool = ["Alpha", "Bravo", "Charlie", "Delta", "Echo", "Foxtrot"];
    let mut checked = 0usize;

    for case in 0..1000 {
        let n = 1 + (case % 6);
        let names = &pool[..n];
        let registry = registry_of(names);

        let scores = EtcScores {
            scores: Array1::from_shape_fn(n + 1, |_| rng.random_range(-3.0..3.0)),
        };
        let got = etc_predict(&scores, &registry);
        let s_none = scores.scores[n];
        let brute: BTreeSet<String> = (0..n)
            .filter(|&i| scores.scores[i] > s_none)
            .map(|i| names[i].to_string())
            .collect();
        assert_eq!(got, brute, "threshold rule diverged on case {case}");
        checked += 1;
    }

    for case in 0..1000 {
        let n = 1 + (case % 6);
        let names = &pool[..n];
        let registry = registry_of(names);

        let mut probs = Array2::zeros((n + 1, 2));
        for mut row in probs.rows_mut() {
            let p = rng.random_range(0.0..1.0);
            row[0] = 1.0 - p;
            row[1] = p;
        }
        let output = RceOutput { event_states: Array2::zeros((n + 1, 1)), probs: probs.clone() };
        let got = rce_predict(&output, &registry);
        let brute: BTreeSet<String> = (0..n)
            .filter(|&i| {
                // Row-wise argmax over the two columns, answers only.
                probs[[i, 1]] > probs[[i, 0]]
            })
            .map(|i| names[i].to_string())
            .collect();
        assert_eq!(got, brute, "marker rule diverged on case {case}");
        checked += 1;
    }

    verdict("c3", checked == 2000, &format!("prediction oracles: {checked}/2000 exact matches"));
}

// ---------------------------------------------------------------------------
// c4: combination sandwich
// ---------------------------------------------------------------------------

#[test]
fn c4_combination_modes_sandwich() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC4);
    let pool = ["Alpha", "Bravo", "Charlie", "Delta", "Echo", "Foxtrot", "Golf"];
    let mut checked = 0usize;

    for _ in 0..1000 {
        let rce: BTreeSet<String> = random_gold(&mut rng, &pool);
        let etc: BTreeSet<String> = random_gold(&mut rng, &pool);

        let inter = combine(CombinationMode::Intersection, &rce, &etc);
        let union = combine(CombinationMode::Union, &rce, &etc);
        let only_rce = combine(CombinationMode::RceOnly, &rce, &etc);
        let only_etc = combine(CombinationMode::EtcOnly, &rce, &etc);

        assert!(inter.is_subset(&rce) && inter.is_subset(&etc));
        assert!(union.is_superset(&rce) && union.is_superset(&etc));
        assert_eq!(inter, rce.intersection(&etc).cloned().collect::<BTreeSet<_>>());
        assert_eq!(union, rce.union(&etc).cloned().collect::<BTreeSet<_>>());
        assert_eq!(only_rce, rce);
        assert_eq!(only_etc, etc);
        checked += 1;
    }

    verdict("c4", checked == 1000, &format!("combination sandwich: {checked}/1000 pairs exact"));
}

// ---------------------------------------------------------------------------
// c5: end-to-end synthetic experiment
// ---------------------------------------------------------------------------

#[test]
fn c5_end_to_end_synthetic_experiment() {
    let exp = experiment();

    let mut passing = 0usize;
    let mut lines = Vec::new();
    for run in &exp.runs {
        let inter = run
            .test_f1
            .iter()
            .find(|(m, _)| *m == CombinationMode::Intersection)
            .map(|&(_, f1)| f1)
            .unwrap();
        let min_any =
            run.test_f1.iter().map(|&(_, f1)| f1).fold(f64::INFINITY, f64::min);
        let ok = inter >= E2E_INTERSECTION_F1 && min_any >= E2E_ANY_MODE_F1;
        passing += ok as usize;
        lines.push(format!("seed {} inter {:.4} min {:.4}", run.seed, inter, min_any));
    }

    let pass = passing >= E2E_SEEDS_REQUIRED && exp.elapsed_secs < E2E_BUDGET_SECS;
    verdict(
        "c5",
        pass,
        &format!(
            "end-to-end: {passing}/{} seeds clear (need {E2E_SEEDS_REQUIRED}; \
             inter ≥ {E2E_INTERSECTION_F1}, every mode ≥ {E2E_ANY_MODE_F1}); \
             {:.0}s (budget {E2E_BUDGET_SECS:.0}s) [{}]",
            exp.runs.len(),
            exp.elapsed_secs,
            lines.join("; ")
        ),
    );
}

// ---------------------------------------------------------------------------
// c6: attention alignment
// ---------------------------------------------------------------------------

#[test]
fn c6_attention_aligns_with_gold_markers() {
    let exp = experiment();
    // Standard checkpoint selection: the seed with the best dev F1.
    let best = exp
        .runs
        .iter()
        .max_by(|a, b| a.outcome.best_dev_f1.total_cmp(&b.outcome.best_dev_f1))
        .unwrap();
    let model = &best.outcome.model;
    let registry = &exp.corpora.registry;

    let mut single_total = 0usize;
    let mut single_hit = 0usize;
    let mut none_total = 0usize;
    let mut none_hit = 0usize;

    for inst in &exp.corpora.dev.instances {
        let report =
            extract_attention(model, inst, AttnReduction::LastLayerMeanHeads).unwrap();
        let ranked = report.ranked();
        match inst.gold_events.len() {
            1 => {
                let gold = inst.gold_events.iter().next().unwrap();
                let gold_marker = &registry.marker_tokens()
                    [registry.index_of_name(gold).unwrap()];
                single_total += 1;
                single_hit += (ranked[0].token == *gold_marker) as usize;
            }
            0 => {
                none_total += 1;
                none_hit += ranked[..2.min(ranked.len())]
                    .iter()
                    .any(|m| m.token == *edetect::corpus::NONE_TOKEN)
                    as usize;
            }
            _ => {}
        }
    }

    let single_rate = single_hit as f64 / single_total as f64;
    let none_rate = none_hit as f64 / none_total as f64;
    let pass = single_rate >= ATTN_SINGLE_EVENT_RATE && none_rate >= ATTN_NONE_TOP2_RATE;
    verdict(
        "c6",
        pass,
        &format!(
            "attention alignment (seed {}): single-event top-1 {single_hit}/{single_total} \
             = {single_rate:.3} (need ≥ {ATTN_SINGLE_EVENT_RATE}), no-event none-in-top-2 \
             {none_hit}/{none_total} = {none_rate:.3} (need ≥ {ATTN_NONE_TOP2_RATE})",
            best.seed
        ),
    );
}

// ---------------------------------------------------------------------------
// c7: prompt-template sweep
// ---------------------------------------------------------------------------

#[test]
fn c7_prompt_sweep_stays_in_band() {
    let exp = experiment();
    let arch = experiment_arch();
    let config = scaled_config(0);
    let names = ["prompt_1", "prompt_2", "prompt_3", "prompt_4", "soft"];

    let mut rows: Vec<(String, EvalReport)> = Vec::new();
    for name in names {
        let template = PromptTemplate::find_builtin(name).expect("builtin template");
        let outcome = train_with(
            &exp.corpora.train,
            &exp.corpora.dev,
            &arch,
            &config,
            &template,
            |_| {},
        )
        .expect("sweep training run");
        let report =
            evaluate(&exp.corpora.test, &outcome.model, CombinationMode::Intersection)
                .expect("sweep evaluation");
        rows.push((name.to_string(), report));
    }

    let hi = rows.iter().map(|(_, r)| r.f1).fold(f64::NEG_INFINITY, f64::max);
    let lo = rows.iter().map(|(_, r)| r.f1).fold(f64::INFINITY, f64::min);
    let band = hi - lo;
    let detail: Vec<String> = rows
        .iter()
        .map(|(name, r)| {
            format!("{name} P {:.4} R {:.4} F1 {:.4}", r.precision, r.recall, r.f1)
        })
        .collect();

    let pass = rows.len() == names.len() && band <= SWEEP_F1_BAND;
    verdict(
        "c7",
        pass,
        &format!(
            "prompt sweep: {} templates, F1 band {band:.4} (max {SWEEP_F1_BAND}) [{}]",
            rows.len(),
            detail.join("; ")
        ),
    );
}

// ---------------------------------------------------------------------------
// c8: metric oracle
// ---------------------------------------------------------------------------

#[test]
fn c8_micro_prf_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC8);
    let pool = ["Alpha", "Bravo", "Charlie", "Delta", "Echo", "Foxtrot"];
    let mut worst = 0.0f64;

    for _ in 0..500 {
        let n_inst = rng.random_range(1..=8);
        let mut gold = Vec::new();
        let mut pred = Vec::new();
        for _ in 0..n_inst {
            gold.push(random_gold(&mut rng, &pool));
            pred.push(random_gold(&mut rng, &pool));
        }
        let report = micro_prf(&gold, &pred).unwrap();

        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fn_ = 0usize;
        for (g, p) in gold.iter().zip(&pred) {
            for t in p {
                if g.contains(t) {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
            for t in g {
                if !p.contains(t) {
                    fn_ += 1;
                }
            }
        }
        assert_eq!((report.tp, report.fp, report.fn_), (tp, fp, fn_));

        let precision = if tp + fp == 0 {
            if fn_ == 0 { 1.0 } else { 0.0 }
        } else {
            tp as f64 / (tp + fp) as f64
        };
        let recall = if tp + fn_ == 0 {
            if fp == 0 { 1.0 } else { 0.0 }
        } else {
            tp as f64 / (tp + fn_) as f64
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        worst = worst.max((report.precision - precision).abs());
        worst = worst.max((report.recall - recall).abs());
        worst = worst.max((report.f1 - f1).abs());
    }

    // Degenerate collections: all-empty is a perfect score, fully
    // disjoint sets score zero everywhere.
    let empty: Vec<BTreeSet<String>> = vec![BTreeSet::new(); 4];
    let perfect = micro_prf(&empty, &empty).unwrap();
    let gold_only: Vec<BTreeSet<String>> =
        vec![["Alpha".to_string()].into_iter().collect(); 3];
    let pred_only: Vec<BTreeSet<String>> =
        vec![["Bravo".to_string()].into_iter().collect(); 3];
    let disjoint = micro_prf(&gold_only, &pred_only).unwrap();

    let degenerate_ok = (perfect.precision, perfect.recall, perfect.f1) == (1.0, 1.0, 1.0)
        && (disjoint.precision, disjoint.recall, disjoint.f1) == (0.0, 0.0, 0.0);

    let pass = worst <= METRIC_ORACLE_TOL && degenerate_ok;
    verdict(
        "c8",
        pass,
        &format!(
            "metric oracle: 500 collections, worst |Δ| {worst:.1e} (tol {METRIC_ORACLE_TOL:.0e}), \
             degenerates {}",
            if degenerate_ok { "exact" } else { "WRONG" }
        ),
    );
}

// ---------------------------------------------------------------------------
// c9: persistence round trip
// ---------------------------------------------------------------------------

#[test]
fn c9_checkpoint_and_json_round_trips_are_lossless() {
    let registry = registry_of(&["Alpha", "Bravo", "Charlie"]);
    let sentences: Vec<(&str, Vec<&str>, Vec<&str>)> = vec![
        ("p-0", vec!["ripe", "mox"], vec!["Alpha"]),
        ("p-1", vec!["solo", "lun", "tam"], vec!["Bravo"]),
        ("p-2", vec!["ver", "qui"], vec![]),
        ("p-3", vec!["ripe", "solo"], vec!["Alpha", "Charlie"]),
    ];
    let instances: Vec<Instance> = sentences
        .iter()
        .map(|(id, toks, evs)| Instance {
            id: id.to_string(),
            tokens: toks.iter().map(|s| s.to_string()).collect(),
            gold_events: evs.iter().map(|s| s.to_string()).collect(),
        })
        .collect();
    let corpus =
        Corpus { instances, split: Split::Dev, registry: registry.clone() };
    let vocab = Vocabulary::build(&[&corpus], &registry, 1).unwrap();
    let template = PromptTemplate::find_builtin("default").unwrap();
    let arch = BackboneConfig {
        depth: 1,
        width: 16,
        heads: 2,
        vocab_size: vocab.len(),
        max_positions: 32,
        seed: 11,
        ..BackboneConfig::default()
    };
    let model = Model::new(arch, vocab, registry.clone(), template, 32).unwrap();
    let config = TrainConfig::default();

    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("model.ckpt");
    save_checkpoint(&model, &config, &ckpt).unwrap();
    let (loaded, loaded_config) = load_checkpoint(&ckpt).unwrap();

    let bit_exact = loaded.params.data == model.params.data;
    let config_eq = serde_json::to_string(&loaded_config).unwrap()
        == serde_json::to_string(&config).unwrap();

    let mut metrics_eq = true;
    for mode in CombinationMode::ALL {
        let before = evaluate(&corpus, &model, mode).unwrap();
        let after = evaluate(&corpus, &loaded, mode).unwrap();
        metrics_eq &= serde_json::to_string(&before).unwrap()
            == serde_json::to_string(&after).unwrap();
    }

    let vocab_path = dir.path().join("vocab.json");
    model.vocab.save(&vocab_path).unwrap();
    let vocab2 = Vocabulary::load(&vocab_path, &registry).unwrap();
    let vocab_eq = vocab2.tokens() == model.vocab.tokens();

    let reg_path = dir.path().join("registry.json");
    registry.save(&reg_path).unwrap();
    let reg2 = EventTypeRegistry::load(&reg_path).unwrap();
    let registry_eq = reg2 == registry;

    let pass = bit_exact && config_eq && metrics_eq && vocab_eq && registry_eq;
    verdict(
        "c9",
        pass,
        &format!(
            "persistence: params bit-exact {bit_exact}, config {config_eq}, \
             metrics stable {metrics_eq}, vocab {vocab_eq}, registry {registry_eq}"
        ),
    );
}
