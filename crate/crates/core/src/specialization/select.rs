use std::cmp::Ordering;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::{ActivationAccumulator, KurtosisTable};
use crate::corpus::LanguageId;
use crate::error::{ensure, Result};
use crate::model::{Method, NeuronId, NeuronLayout, NeuronSet};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionConfig {
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    pub budget: usize,
}

fn default_threshold() -> f64 {
    1.0
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self { threshold: 1.0, budget: 16 }
    }
}

impl SelectionConfig {
    pub fn validate(&self, layout: NeuronLayout) -> Result<()> {
        ensure!(self.threshold.is_finite(), Config, "selection threshold must be finite");
        ensure!(
            self.budget <= layout.len(),
            Input,
            "budget {} exceeds the {} neurons of the model",
            self.budget,
            layout.len()
        );
        Ok(())
    }
}

/// Sorts by score descending, then layer and index ascending.
fn rank(mut scored: Vec<(f64, NeuronId)>, budget: usize) -> Vec<NeuronId> {
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
    scored.into_iter().take(budget).map(|(_, id)| id).collect()
}

/// Contrast selection: normalized kurtosis above the threshold for the
/// target and below it for every other language, ranked by the margin
/// between the two. Invalid entries of other languages count as 0.
pub fn crane_select(table: &KurtosisTable, target: &LanguageId, sel: &SelectionConfig) -> Result<NeuronSet> {
    sel.validate(table.layout)?;
    let t = table.slot(target)?;
    let tau = sel.threshold;
    let mut scored = Vec::new();
    for flat in 0..table.layout.len() {
        if !table.valid(t, flat) {
            continue;
        }
        let own = table.norm[t][flat];
        let other = (0..table.languages.len())
            .filter(|&l| l != t)
            .map(|l| table.norm[l][flat])
            .fold(f64::NEG_INFINITY, f64::max);
        if own > tau && other < tau {
            scored.push((own - other.max(f64::MIN), NeuronId::from_flat(flat, table.layout)));
        }
    }
    NeuronSet::new(rank(scored, sel.budget), Method::Crane, Some(target.clone()), sel.budget)
}

/// 25th percentile with linear interpolation between order statistics.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Activation-likelihood baseline. With `p` the fraction of a language's
/// tokens on which a neuron is positive and `q = p / sum(p)`, candidates have
/// language entropy `H(q)` at or below the 25th percentile over active
/// neurons, `q` maximal at the target alone, and `p_target` above the median
/// `p_target` over all neurons. Ranked by `p_target`.
pub fn lape_select(act: &ActivationAccumulator, target: &LanguageId, sel: &SelectionConfig) -> Result<NeuronSet> {
    sel.validate(act.layout)?;
    let t = super::language_slot(&act.languages, target)?;
    let p = act.probabilities()?;
    let n = act.layout.len();
    let n_lang = act.languages.len();

    let entropy: Vec<Option<f64>> = (0..n)
        .map(|i| {
            let total: f64 = (0..n_lang).map(|l| p[l][i]).sum();
            (total > 0.0).then(|| {
                -(0..n_lang).map(|l| p[l][i] / total).filter(|&q| q > 0.0).map(|q| q * q.ln()).sum::<f64>()
            })
        })
        .collect();
    let mut hs: Vec<f64> = entropy.iter().flatten().copied().collect();
    if hs.is_empty() {
        return Ok(NeuronSet::empty(Method::Lape, Some(target.clone()), sel.budget));
    }
    hs.sort_by(f64::total_cmp);
    let h_cut = quantile(&hs, 0.25);
    let mut pt: Vec<f64> = p[t].clone();
    pt.sort_by(f64::total_cmp);
    let median = quantile(&pt, 0.5);

    let mut scored = Vec::new();
    for i in 0..n {
        let Some(h) = entropy[i] else { continue };
        let own = p[t][i];
        let strict_max = (0..n_lang).filter(|&l| l != t).all(|l| p[l][i] < own);
        if h <= h_cut && strict_max && own > median {
            scored.push((own, NeuronId::from_flat(i, act.layout)));
        }
    }
    NeuronSet::new(rank(scored, sel.budget), Method::Lape, Some(target.clone()), sel.budget)
}

/// Exactly `budget` distinct neurons drawn uniformly.
pub fn random_select(layout: NeuronLayout, target: Option<&LanguageId>, sel: &SelectionConfig, seed: u64) -> Result<NeuronSet> {
    sel.validate(layout)?;
    let label = format!("random-select/{}", target.map_or("-", |t| t.as_str()));
    let mut rng = seed::rng_for(seed, &label);
    let ids = index::sample(&mut rng, layout.len(), sel.budget).into_iter().map(|f| NeuronId::from_flat(f, layout));
    NeuronSet::new(ids, Method::Random, target.cloned(), sel.budget)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionQuality {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Set precision, recall and F1 of `selected` against `ground_truth`;
/// empty denominators give 0.
pub fn selection_quality(selected: &NeuronSet, ground_truth: &NeuronSet) -> SelectionQuality {
    let hit = selected.ids.intersection(&ground_truth.ids).count() as f64;
    let frac = |den: usize| if den == 0 { 0.0 } else { hit / den as f64 };
    let precision = frac(selected.len());
    let recall = frac(ground_truth.len());
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    SelectionQuality { precision, recall, f1 }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn langs(n: usize) -> Vec<LanguageId> {
        (0..n).map(|i| LanguageId::new(format!("l{i}"))).collect()
    }

    /// Table whose normalized scores are given directly.
    fn normed(layout: NeuronLayout, norm: Vec<Vec<f64>>) -> KurtosisTable {
        let raw = norm.iter().map(|r| r.iter().map(|&v| Some(v)).collect()).collect();
        KurtosisTable { layout, languages: langs(norm.len()), raw, norm }
    }

    #[test]
    fn contrast_region() {
        let layout = NeuronLayout { n_layers: 1, d_mlp: 2 };
        let t = normed(layout, vec![vec![2.0, 2.0], vec![0.5, 1.5]]);
        let s = crane_select(&t, &"l0".into(), &SelectionConfig { threshold: 1.0, budget: 2 }).unwrap();
        assert_eq!(s.ids.iter().copied().collect::<Vec<_>>(), vec![NeuronId::new(0, 0)]);
        assert!(crane_select(&t, &"zz".into(), &SelectionConfig::default()).is_err());
    }

    #[test]
    fn top_margins_with_tie_break() {
        // Five candidates over two layers; margins 2.5, 3.0, 3.0, 1.2, 2.9.
        let layout = NeuronLayout { n_layers: 2, d_mlp: 3 };
        let t = normed(
            layout,
            vec![vec![3.0, 3.5, 0.0, 3.2, 1.5, 3.0], vec![0.5, 0.5, 0.0, 0.2, 0.3, 0.1]],
        );
        let s = crane_select(&t, &"l0".into(), &SelectionConfig { threshold: 1.0, budget: 2 }).unwrap();
        assert_eq!(s.ids.iter().copied().collect::<Vec<_>>(), vec![NeuronId::new(0, 1), NeuronId::new(1, 0)]);
        assert_eq!(s.budget, 2);
    }

    #[test]
    fn invalid_other_language_counts_as_zero() {
        let layout = NeuronLayout { n_layers: 1, d_mlp: 1 };
        let mut t = normed(layout, vec![vec![2.0], vec![5.0]]);
        t.raw[1][0] = None;
        t.norm[1][0] = 0.0;
        let s = crane_select(&t, &"l0".into(), &SelectionConfig { threshold: 1.0, budget: 1 }).unwrap();
        assert_eq!(s.len(), 1);
    }

    fn act(layout: NeuronLayout, p: &[[u64; 3]]) -> ActivationAccumulator {
        let mut a = ActivationAccumulator::new(layout, langs(3));
        a.tokens = vec![10; 3];
        for (i, row) in p.iter().enumerate() {
            for l in 0..3 {
                a.positive[l][i] = row[l];
            }
        }
        a
    }

    #[test]
    fn lape_fixture() {
        // Counts out of 10 tokens per language.
        let layout = NeuronLayout { n_layers: 1, d_mlp: 6 };
        let a = act(layout, &[[9, 0, 0], [5, 5, 5], [6, 1, 0], [2, 0, 0], [8, 1, 1], [1, 7, 0]]);
        // Entropies: n0 0, n1 ln 3, n2 0.4101, n3 0, n4 0.6390, n5 0.3768.
        // Sorted: 0, 0, 0.3768, 0.4101, 0.6390, 1.0986; P25 at rank 1.25 = 0.0942.
        // p_target of l0: 0.9 0.5 0.6 0.2 0.8 0.1, median 0.55.
        // Only n0 passes (n3 has H 0 but p 0.2 < median).
        let s = lape_select(&a, &"l0".into(), &SelectionConfig { threshold: 1.0, budget: 3 }).unwrap();
        assert_eq!(s.ids.iter().copied().collect::<Vec<_>>(), vec![NeuronId::new(0, 0)]);
        let s = lape_select(&a, &"l1".into(), &SelectionConfig { threshold: 1.0, budget: 3 }).unwrap();
        assert!(s.is_empty());

        let mut empty = a.clone();
        empty.tokens[2] = 0;
        assert!(lape_select(&empty, &"l0".into(), &SelectionConfig::default()).is_err());
    }

    #[test]
    fn lape_uniform_neuron_excluded() {
        let layout = NeuronLayout { n_layers: 1, d_mlp: 4 };
        let a = act(layout, &[[9, 0, 0], [9, 9, 9], [8, 0, 0], [3, 3, 3]]);
        let s = lape_select(&a, &"l0".into(), &SelectionConfig { threshold: 1.0, budget: 4 }).unwrap();
        assert!(!s.contains(&NeuronId::new(0, 1)));
        assert_eq!(s.ids.iter().next(), Some(&NeuronId::new(0, 0)));
    }

    #[test]
    fn random_selection() {
        let layout = NeuronLayout { n_layers: 2, d_mlp: 4 };
        let all = random_select(layout, None, &SelectionConfig { threshold: 1.0, budget: 8 }, 1).unwrap();
        assert_eq!(all.len(), 8);
        let sel = SelectionConfig { threshold: 1.0, budget: 3 };
        assert_eq!(random_select(layout, None, &sel, 5).unwrap(), random_select(layout, None, &sel, 5).unwrap());
        assert!(random_select(layout, None, &SelectionConfig { threshold: 1.0, budget: 9 }, 1).is_err());
    }

    #[test]
    fn random_selection_is_uniform() {
        let layout = NeuronLayout { n_layers: 2, d_mlp: 10 };
        let sel = SelectionConfig { threshold: 1.0, budget: 1 };
        let mut counts = [0f64; 20];
        let draws = 10_000;
        for s in 0..draws {
            let set = random_select(layout, None, &sel, s).unwrap();
            counts[set.ids.iter().next().unwrap().flat(layout)] += 1.0;
        }
        let p = 1.0 / 20.0;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        assert!(counts.iter().all(|&c| (c - draws as f64 * p).abs() <= 5.0 * sd));
    }

    #[test]
    fn quality_arithmetic() {
        let gt = NeuronSet::new((0..8).map(|i| NeuronId::new(0, i)), Method::Planted, None, 8).unwrap();
        let sel = NeuronSet::new([0, 1, 2, 20].map(|i| NeuronId::new(0, i)), Method::Crane, None, 4).unwrap();
        assert_eq!(selection_quality(&sel, &gt), SelectionQuality { precision: 0.75, recall: 0.375, f1: 0.5 });
        assert_eq!(selection_quality(&gt, &gt), SelectionQuality { precision: 1.0, recall: 1.0, f1: 1.0 });
        let none = NeuronSet::empty(Method::Crane, None, 4);
        assert_eq!(selection_quality(&none, &gt).precision, 0.0);
        let far = NeuronSet::new([NeuronId::new(1, 0)], Method::Crane, None, 1).unwrap();
        assert_eq!(selection_quality(&far, &gt), SelectionQuality { precision: 0.0, recall: 0.0, f1: 0.0 });
    }
}
