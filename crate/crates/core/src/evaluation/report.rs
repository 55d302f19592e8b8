use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metric::{clamped_delta, langspec_f1, LangSpecF1, ScoreRow, ScoreTable, TaskKind};
use super::{eval_mc_accuracy, eval_mean_loglik, surrogate_score};
use crate::corpus::{Corpus, LanguageId, McTask};
use crate::error::{ensure, Error, Result};
use crate::model::{Method, ModelConfig, ModelWeights, NeuronSet};
use crate::Scalar;

/// Method label of the unmasked rows.
pub const ORIGINAL_METHOD: &str = "org";

/// Evaluation material for one language.
#[derive(Clone, Debug)]
pub struct LanguageTasks {
    pub language: LanguageId,
    pub mc: McTask,
    pub heldout: Corpus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub mask_lang: String,
    pub task: TaskKind,
    pub language: LanguageId,
    pub original: f64,
    pub masked: f64,
    pub delta: f64,
    pub clamped_delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryEntry {
    pub method: String,
    pub mask_lang: LanguageId,
    pub scores: BTreeMap<TaskKind, LangSpecF1>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `in_model` or `transfer`.
    pub tag: String,
    pub epsilon: f64,
    pub budget: usize,
    pub seeds: Vec<u64>,
    /// Added to mean log-likelihoods (`ln vocab_size`) before clamping at 0.
    pub loglik_shift: f64,
    pub rows: Vec<ReportRow>,
    pub summary: Vec<SummaryEntry>,
}

impl EvalReport {
    pub fn summary_for(&self, method: &str, mask_lang: &LanguageId) -> Option<&SummaryEntry> {
        self.summary.iter().find(|s| s.method == method && &s.mask_lang == mask_lang)
    }

    pub fn rows_for<'a>(&'a self, method: &'a str, mask_lang: &'a str, task: TaskKind) -> impl Iterator<Item = &'a ReportRow> {
        self.rows.iter().filter(move |r| r.method == method && r.mask_lang == mask_lang && r.task == task)
    }

    /// Report CSV, preceded by `#` lines documenting the score scales.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut out = out;
        writeln!(out, "# tag={} epsilon={} budget={}", self.tag, self.epsilon, self.budget)?;
        writeln!(
            out,
            "# openended_surrogate = max(mean next-token log-likelihood in nats + {}, 0)",
            self.loglik_shift
        )?;
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::Internal(format!("csv: {e}"));
        w.write_record(["method", "mask_lang", "task", "language", "original", "masked", "delta", "clamped_delta"])
            .map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                r.method.clone(),
                r.mask_lang.clone(),
                r.task.as_str().to_owned(),
                r.language.to_string(),
                r.original.to_string(),
                r.masked.to_string(),
                r.delta.to_string(),
                r.clamped_delta.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary_json(&self) -> serde_json::Value {
        let entries: Vec<serde_json::Value> = self
            .summary
            .iter()
            .map(|s| {
                let mut v = serde_json::json!({ "method": s.method, "mask_lang": s.mask_lang });
                for (kind, f) in &s.scores {
                    v[kind.as_str()] = serde_json::to_value(f).expect("plain struct");
                }
                v
            })
            .collect();
        serde_json::json!({
            "tag": self.tag,
            "epsilon": self.epsilon,
            "budget": self.budget,
            "seeds": self.seeds,
            "entries": entries,
        })
    }

    /// Clamped deltas with one row per (method, mask_lang) and one column
    /// per (task, language).
    pub fn write_heatmap(&self, out: impl Write) -> Result<()> {
        let mut cols: Vec<(TaskKind, LanguageId)> = Vec::new();
        for r in &self.rows {
            if !cols.iter().any(|(t, l)| *t == r.task && *l == r.language) {
                cols.push((r.task, r.language.clone()));
            }
        }
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::Internal(format!("csv: {e}"));
        let mut header = vec!["method".to_owned(), "mask_lang".to_owned()];
        header.extend(cols.iter().map(|(t, l)| format!("{}:{l}", t.as_str())));
        w.write_record(&header).map_err(csv_err)?;
        for s in &self.summary {
            let mut rec = vec![s.method.clone(), s.mask_lang.to_string()];
            for (t, l) in &cols {
                let v = self
                    .rows
                    .iter()
                    .find(|r| r.method == s.method && r.mask_lang == s.mask_lang.as_str() && r.task == *t && r.language == *l)
                    .map_or(0.0, |r| r.clamped_delta);
                rec.push(v.to_string());
            }
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn score<T: Scalar>(
    weights: &ModelWeights<T>,
    tasks: &LanguageTasks,
    kind: TaskKind,
    mask: Option<&NeuronSet>,
) -> Result<f64> {
    match kind {
        TaskKind::McAccuracy => eval_mc_accuracy(weights, &tasks.mc, mask),
        TaskKind::OpenendedSurrogate => {
            Ok(surrogate_score(eval_mean_loglik(weights, &tasks.heldout, mask)?, weights.config.vocab_size))
        }
    }
}

/// Evaluates every task unmasked and under every neuron set, then assembles
/// the report rows and per-set LangSpec-F1. All sets must carry the same
/// budget and a target language.
pub fn run_intervention_grid<T: Scalar>(
    weights: &ModelWeights<T>,
    neuron_sets: &BTreeMap<(Method, LanguageId), NeuronSet>,
    tasks: &[LanguageTasks],
    epsilon: f64,
) -> Result<EvalReport> {
    ensure!(!tasks.is_empty(), Input, "no evaluation tasks");
    let layout = weights.config.layout();
    let mut budget = None;
    for ((method, target), set) in neuron_sets {
        set.validate(layout)?;
        ensure!(
            set.target.as_ref() == Some(target),
            Input,
            "{method} set keyed by {target} targets {:?}",
            set.target
        );
        ensure!(
            tasks.iter().any(|t| &t.language == target),
            Input,
            "no tasks for target language {target}"
        );
        match budget {
            None => budget = Some(set.budget),
            Some(b) => ensure!(
                b == set.budget,
                Config,
                "budget mismatch: {method}/{target} has budget {} but another set has {b}",
                set.budget
            ),
        }
    }
    let sets: Vec<&NeuronSet> = neuron_sets.values().collect();

    // Cell (mask slot, task index, kind); slot 0 is unmasked.
    let cells: Vec<(usize, usize, TaskKind)> = (0..=sets.len())
        .flat_map(|m| (0..tasks.len()).flat_map(move |t| TaskKind::ALL.into_iter().map(move |k| (m, t, k))))
        .collect();
    let scores: Vec<f64> = cells
        .par_iter()
        .map(|&(m, t, k)| score(weights, &tasks[t], k, if m == 0 { None } else { Some(sets[m - 1]) }))
        .collect::<Result<_>>()?;
    let at = |m: usize, t: usize, k: TaskKind| {
        let ki = TaskKind::ALL.iter().position(|&x| x == k).expect("known kind");
        scores[(m * tasks.len() + t) * TaskKind::ALL.len() + ki]
    };

    let mut rows = Vec::with_capacity(cells.len());
    let mut summary = Vec::with_capacity(sets.len());
    for m in 0..=sets.len() {
        let (method, mask_lang) = match m {
            0 => (ORIGINAL_METHOD.to_owned(), "-".to_owned()),
            _ => (sets[m - 1].method.as_str().to_owned(), sets[m - 1].target.as_ref().expect("checked").to_string()),
        };
        for kind in TaskKind::ALL {
            for (t, task) in tasks.iter().enumerate() {
                let original = at(0, t, kind);
                let masked = at(m, t, kind);
                rows.push(ReportRow {
                    method: method.clone(),
                    mask_lang: mask_lang.clone(),
                    task: kind,
                    language: task.language.clone(),
                    original,
                    masked,
                    delta: original - masked,
                    clamped_delta: clamped_delta(original, masked),
                });
            }
        }
        if m > 0 {
            let target = sets[m - 1].target.clone().expect("checked");
            let mut scores = BTreeMap::new();
            for kind in TaskKind::ALL {
                let table = ScoreTable {
                    kind,
                    rows: (0..tasks.len())
                        .map(|t| ScoreRow { language: tasks[t].language.clone(), original: at(0, t, kind), masked: at(m, t, kind) })
                        .collect(),
                };
                scores.insert(kind, langspec_f1(&table, &target, epsilon)?);
            }
            summary.push(SummaryEntry { method, mask_lang: target, scores });
        }
    }
    Ok(EvalReport {
        tag: "in_model".to_owned(),
        epsilon,
        budget: budget.unwrap_or(0),
        seeds: Vec::new(),
        loglik_shift: (weights.config.vocab_size as f64).ln(),
        rows,
        summary,
    })
}

/// Applies sets identified on a model with `source_config` to `weights_b`
/// without re-selection. Original scores are those of `weights_b`.
pub fn transfer_eval<T: Scalar>(
    source_config: &ModelConfig,
    sets_from_a: &BTreeMap<(Method, LanguageId), NeuronSet>,
    weights_b: &ModelWeights<T>,
    tasks: &[LanguageTasks],
    epsilon: f64,
) -> Result<EvalReport> {
    ensure!(
        *source_config == weights_b.config,
        Input,
        "transfer needs identical model configurations; source {source_config:?} vs destination {:?}",
        weights_b.config
    );
    let mut report = run_intervention_grid(weights_b, sets_from_a, tasks, epsilon)?;
    report.tag = "transfer".to_owned();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{default_languages, generate_corpus, make_mc_task, split_corpus};
    use crate::model::{build_model, NeuronId};
    use crate::tensor::Matrix;

    fn setup() -> (ModelWeights<f64>, Vec<LanguageTasks>) {
        let c = ModelConfig { n_layers: 2, d_model: 16, n_heads: 2, d_mlp: 8, vocab_size: 96, max_seq_len: 32, ..Default::default() };
        let w = ModelWeights::gaussian(c, 0.4, 2).unwrap();
        let tasks = default_languages(0)
            .iter()
            .map(|spec| {
                let corpus = generate_corpus(spec, 30, 12, 1).unwrap();
                let (train, held) = split_corpus(&corpus, 0.5, 2).unwrap();
                LanguageTasks { language: spec.id.clone(), mc: make_mc_task(&train, spec.vocab, 40, 3).unwrap(), heldout: held }
            })
            .collect();
        (w, tasks)
    }

    fn set(method: Method, target: &str, ids: &[(usize, usize)], budget: usize) -> NeuronSet {
        NeuronSet::new(ids.iter().map(|&(l, i)| NeuronId::new(l, i)), method, Some(target.into()), budget).unwrap()
    }

    #[test]
    fn empty_random_sets_give_zero_everything() {
        let (w, tasks) = setup();
        let sets: BTreeMap<_, _> =
            ["l1", "l2", "l3"].iter().map(|&l| ((Method::Random, LanguageId::new(l)), set(Method::Random, l, &[], 0))).collect();
        let r = run_intervention_grid(&w, &sets, &tasks, 1e-9).unwrap();
        assert_eq!(r.rows.len(), 6 * 4);
        assert!(r.rows.iter().all(|row| row.delta == 0.0 && row.clamped_delta == 0.0));
        assert!(r.summary.iter().all(|s| s.scores.values().all(|f| f.langspec_f1 == 0.0)));
    }

    #[test]
    fn rows_are_self_consistent_and_budgets_enforced() {
        let (w, tasks) = setup();
        let mut sets = BTreeMap::new();
        sets.insert((Method::Crane, "l1".into()), set(Method::Crane, "l1", &[(0, 1), (1, 2)], 2));
        sets.insert((Method::Random, "l2".into()), set(Method::Random, "l2", &[(0, 3), (1, 7)], 2));
        let r = run_intervention_grid(&w, &sets, &tasks, 1e-9).unwrap();
        assert_eq!(r.rows.len(), 6 * 3);
        for row in &r.rows {
            assert_eq!(row.delta, row.original - row.masked);
            assert_eq!(row.clamped_delta, clamped_delta(row.original, row.masked));
        }
        sets.insert((Method::Lape, "l3".into()), set(Method::Lape, "l3", &[(0, 0)], 3));
        assert!(matches!(run_intervention_grid(&w, &sets, &tasks, 1e-9), Err(Error::Config(_))));
    }

    #[test]
    fn transfer_semantics() {
        let (w, tasks) = setup();
        let mut sets = BTreeMap::new();
        sets.insert((Method::Crane, "l2".into()), set(Method::Crane, "l2", &[(0, 1), (1, 4)], 2));
        let own = run_intervention_grid(&w, &sets, &tasks, 1e-9).unwrap();
        let t = transfer_eval(&w.config, &sets, &w, &tasks, 1e-9).unwrap();
        assert_eq!(t.tag, "transfer");
        assert_eq!((t.rows.clone(), t.summary.clone()), (own.rows, own.summary));

        let mut dead = w.clone();
        for l in &mut dead.layers {
            l.mlp_up = Matrix::zeros(16, 8);
            l.mlp_down = Matrix::zeros(8, 16);
        }
        let t = transfer_eval(&w.config, &sets, &dead, &tasks, 1e-9).unwrap();
        assert!(t.rows.iter().all(|r| r.delta == 0.0));

        let other: ModelWeights<f64> = build_model(ModelConfig { d_mlp: 9, ..w.config }, 1).unwrap();
        assert!(matches!(transfer_eval(&w.config, &sets, &other, &tasks, 1e-9), Err(Error::Input(_))));
    }
}
