//! Masking interventions: task scoring, clamped degradations, LangSpec-F1,
//! intervention grids and transfer to a related model.

mod metric;
mod report;

pub use metric::{clamped_delta, f1_from_deltas, langspec_f1, LangSpecF1, ScoreRow, ScoreTable, TaskKind, DEFAULT_EPSILON};
pub use report::{
    run_intervention_grid, transfer_eval, EvalReport, LanguageTasks, ReportRow, SummaryEntry, ORIGINAL_METHOD,
};

use crate::corpus::{Corpus, McTask};
use crate::error::{ensure, Result};
use crate::model::{log_softmax_at, logits_with_bits, ModelWeights, NeuronSet, Token};
use crate::tensor::Matrix;
use crate::Scalar;

fn bits_for<T: Scalar>(weights: &ModelWeights<T>, mask: Option<&NeuronSet>) -> Result<Option<Vec<bool>>> {
    mask.map(|m| m.mask(weights.config.layout())).transpose()
}

/// Fraction of items whose gold token has the largest next-token logit among
/// the four options (ties go to the lowest token id).
///
/// Items whose prefixes extend one another share a single forward pass; by
/// causality the shorter prefix's logits are a row of the longer one's.
pub fn eval_mc_accuracy<T: Scalar>(weights: &ModelWeights<T>, task: &McTask, mask: Option<&NeuronSet>) -> Result<f64> {
    ensure!(!task.items.is_empty(), Input, "multiple-choice task for {} has no items", task.language);
    let bits = bits_for(weights, mask)?;
    let mut order: Vec<usize> = (0..task.items.len()).collect();
    order.sort_by(|&a, &b| task.items[b].prefix.len().cmp(&task.items[a].prefix.len()).then(a.cmp(&b)));
    let mut cache: Vec<(&[Token], Matrix<T>)> = Vec::new();
    let mut correct = 0usize;
    for i in order {
        let item = &task.items[i];
        ensure!(!item.prefix.is_empty(), Input, "item {i} of {} has an empty prefix", task.language);
        let hit = cache.iter().position(|(seq, _)| seq.starts_with(&item.prefix));
        let k = match hit {
            Some(k) => k,
            None => {
                cache.push((&item.prefix, logits_with_bits(weights, &item.prefix, bits.as_deref())?));
                cache.len() - 1
            }
        };
        let row = cache[k].1.row(item.prefix.len() - 1);
        let mut options = item.options();
        options.sort_unstable();
        let mut best = options[0];
        for &o in &options[1..] {
            if row[o as usize] > row[best as usize] {
                best = o;
            }
        }
        if best == item.gold {
            correct += 1;
        }
    }
    Ok(correct as f64 / task.items.len() as f64)
}

/// Mean log-probability of the gold next token over every position of every
/// sample, in nats.
pub fn eval_mean_loglik<T: Scalar>(weights: &ModelWeights<T>, corpus: &Corpus, mask: Option<&NeuronSet>) -> Result<f64> {
    ensure!(!corpus.is_empty(), Input, "corpus for {} is empty", corpus.language);
    let bits = bits_for(weights, mask)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for s in &corpus.samples {
        if s.len() < 2 {
            continue;
        }
        let logits = logits_with_bits(weights, s, bits.as_deref())?;
        for t in 0..s.len() - 1 {
            total += log_softmax_at(logits.row(t), s[t + 1] as usize).f64();
            count += 1;
        }
    }
    ensure!(count > 0, Input, "corpus for {} has no next-token positions", corpus.language);
    Ok(total / count as f64)
}

/// Log-likelihood score on the non-negative scale used by the metric:
/// `max(loglik + ln(vocab_size), 0)`.
pub fn surrogate_score(mean_loglik: f64, vocab_size: usize) -> f64 {
    (mean_loglik + (vocab_size as f64).ln()).max(0.0)
}
