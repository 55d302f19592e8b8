//! Language-conditioned relevance and activation statistics, layer-wise
//! normalized kurtosis, and neuron selection.

mod kurtosis;
mod moments;
mod select;

pub use kurtosis::{normalize_layerwise, KurtosisTable};
pub use moments::Moments;
pub use select::{crane_select, lape_select, random_select, selection_quality, SelectionConfig, SelectionQuality};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{attribute_detailed, LrpConfig, RelevanceVector};
use crate::corpus::LanguageId;
use crate::error::{ensure, Error, Result};
use crate::model::{ForwardTrace, ModelWeights, NeuronId, NeuronLayout, Token};
use crate::Scalar;

fn language_slot(languages: &[LanguageId], language: &LanguageId) -> Result<usize> {
    languages
        .iter()
        .position(|l| l == language)
        .ok_or_else(|| Error::Input(format!("unknown language {language}")))
}

/// Per (language, neuron) streaming moments of per-sample relevance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelevanceAccumulator {
    pub layout: NeuronLayout,
    pub languages: Vec<LanguageId>,
    /// `moments[language][flat neuron]`.
    pub moments: Vec<Vec<Moments>>,
}

impl RelevanceAccumulator {
    pub fn new(layout: NeuronLayout, languages: Vec<LanguageId>) -> Self {
        let moments = vec![vec![Moments::default(); layout.len()]; languages.len()];
        Self { layout, languages, moments }
    }

    pub fn observe<T: Scalar>(&mut self, relevance: &RelevanceVector<T>) -> Result<()> {
        let li = language_slot(&self.languages, &relevance.language)?;
        ensure!(
            relevance.values.len() == self.layout.len(),
            Input,
            "relevance vector of length {} for {} neurons",
            relevance.values.len(),
            self.layout.len()
        );
        for (m, v) in self.moments[li].iter_mut().zip(&relevance.values) {
            m.push(v.f64());
        }
        Ok(())
    }

    pub fn get(&self, neuron: NeuronId, language: &LanguageId) -> Result<&Moments> {
        neuron.check(self.layout)?;
        let li = language_slot(&self.languages, language)?;
        Ok(&self.moments[li][neuron.flat(self.layout)])
    }

    /// Kurtosis of one neuron's relevance under one language; `None` when
    /// undefined (fewer than four samples or zero spread).
    pub fn kurtosis_of(&self, neuron: NeuronId, language: &LanguageId) -> Result<Option<f64>> {
        Ok(self.get(neuron, language)?.kurtosis())
    }

    pub fn merge(&self, other: &Self) -> Result<Self> {
        ensure!(
            self.layout == other.layout && self.languages == other.languages,
            Input,
            "cannot merge accumulators with different layouts or languages"
        );
        let moments = self
            .moments
            .iter()
            .zip(&other.moments)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x.merge(y)).collect())
            .collect();
        Ok(Self { layout: self.layout, languages: self.languages.clone(), moments })
    }

    pub fn samples(&self, language: &LanguageId) -> Result<u64> {
        let li = language_slot(&self.languages, language)?;
        Ok(self.moments[li].first().map_or(0, |m| m.n))
    }
}

/// Per (language, neuron) count of tokens with positive post-activation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationAccumulator {
    pub layout: NeuronLayout,
    pub languages: Vec<LanguageId>,
    /// Tokens observed per language.
    pub tokens: Vec<u64>,
    /// `positive[language][flat neuron]`.
    pub positive: Vec<Vec<u64>>,
}

impl ActivationAccumulator {
    pub fn new(layout: NeuronLayout, languages: Vec<LanguageId>) -> Self {
        let n = languages.len();
        Self { layout, languages, tokens: vec![0; n], positive: vec![vec![0; layout.len()]; n] }
    }

    pub fn observe<T: Scalar>(&mut self, trace: &ForwardTrace<T>, language: &LanguageId) -> Result<()> {
        let li = language_slot(&self.languages, language)?;
        ensure!(
            trace.layers.len() == self.layout.n_layers
                && trace.layers.iter().all(|l| l.mlp_post.cols() == self.layout.d_mlp),
            Input,
            "trace does not match accumulator layout"
        );
        self.tokens[li] += trace.seq_len() as u64;
        for (l, lt) in trace.layers.iter().enumerate() {
            let counts = &mut self.positive[li][l * self.layout.d_mlp..(l + 1) * self.layout.d_mlp];
            for t in 0..lt.mlp_post.rows() {
                for (c, &v) in counts.iter_mut().zip(lt.mlp_post.row(t)) {
                    if v > T::zero() {
                        *c += 1;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn merge(&self, other: &Self) -> Result<Self> {
        ensure!(
            self.layout == other.layout && self.languages == other.languages,
            Input,
            "cannot merge accumulators with different layouts or languages"
        );
        Ok(Self {
            layout: self.layout,
            languages: self.languages.clone(),
            tokens: self.tokens.iter().zip(&other.tokens).map(|(a, b)| a + b).collect(),
            positive: self
                .positive
                .iter()
                .zip(&other.positive)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
                .collect(),
        })
    }

    /// Activation probability `p[language][neuron]`.
    pub fn probabilities(&self) -> Result<Vec<Vec<f64>>> {
        for (l, &t) in self.languages.iter().zip(&self.tokens) {
            ensure!(t > 0, Input, "no tokens observed for language {l}");
        }
        Ok(self
            .positive
            .iter()
            .zip(&self.tokens)
            .map(|(row, &t)| row.iter().map(|&c| c as f64 / t as f64).collect())
            .collect())
    }
}

/// Records one attributed sample in both accumulators.
pub fn observe_sample<T: Scalar>(
    relevance_acc: &mut RelevanceAccumulator,
    activation_acc: &mut ActivationAccumulator,
    relevance: &RelevanceVector<T>,
    trace: &ForwardTrace<T>,
    language: &LanguageId,
) -> Result<()> {
    ensure!(&relevance.language == language, Input, "relevance vector is for {}, not {language}", relevance.language);
    relevance_acc.observe(relevance)?;
    activation_acc.observe(trace, language)
}

/// Samples per shard in [`identify`]. Fixed so that the merged statistics do
/// not depend on the number of worker threads.
const SHARD: usize = 64;

/// Attributes every sample of every corpus and accumulates relevance moments
/// and activation counts. Shards run on the current rayon pool and are merged
/// in corpus order.
pub fn identify<T: Scalar>(
    weights: &ModelWeights<T>,
    corpora: &[(LanguageId, &[Vec<Token>])],
    config: &LrpConfig,
) -> Result<(RelevanceAccumulator, ActivationAccumulator)> {
    let layout = weights.config.layout();
    let languages: Vec<LanguageId> = corpora.iter().map(|(l, _)| l.clone()).collect();
    let shards: Vec<(&LanguageId, &[Vec<Token>])> =
        corpora.iter().flat_map(|(l, s)| s.chunks(SHARD).map(move |c| (l, c))).collect();
    let parts = shards
        .par_iter()
        .map(|&(language, samples)| {
            let mut rel = RelevanceAccumulator::new(layout, languages.clone());
            let mut act = ActivationAccumulator::new(layout, languages.clone());
            for s in samples {
                let a = attribute_detailed(weights, s, language, config)?;
                observe_sample(&mut rel, &mut act, &a.relevance, &a.trace, language)?;
            }
            Ok((rel, act))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rel = RelevanceAccumulator::new(layout, languages.clone());
    let mut act = ActivationAccumulator::new(layout, languages);
    for (r, a) in &parts {
        rel = rel.merge(r)?;
        act = act.merge(a)?;
    }
    Ok((rel, act))
}
