//! Planted models: random base weights plus, per language, `K` neurons
//! wired as trigger detectors with known identity.
//!
//! A few residual coordinates are reserved: one per language (`e_lang`), and
//! per planted neuron one trigger coordinate `f_a` and one output coordinate
//! `u_a`. Every language token embeds as `6 c + 0.1 n + e_lang`, where `c`
//! is a shared unit vector and `n` a per-token unit vector, both outside the
//! reserved coordinates; trigger tokens add `2 f_a`. A planted neuron reads
//! `f_a - sum(e)`, so after the pre-norm it is positive on its trigger and
//! negative on every other language token. It writes `u_a`, and the
//! unembedding column of the successor `b` gains a multiple of `u_a` chosen
//! so that the logit of `b` rises by about `gain` nats at trigger positions.
//!
//! Base neurons and attention are cut off from the reserved coordinates and
//! base neurons also read `c`, so they fire on every token and carry no
//! language signal of their own. Keeping the subspaces on separate
//! coordinates (rather than merely orthogonal) matters for attribution: the
//! epsilon rule works coordinate-wise, and planted relevance would otherwise
//! leak into base units through near-cancelling sums.
//!
//! Triggers are tokens with a confident successor whose `a -> b` rate is
//! near 0.15 events per sample, so the per-sample relevance of a planted
//! neuron is zero-inflated and heavy-tailed under its own language.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{build_model, ModelConfig, ModelWeights, Method, NeuronId, NeuronSet, Token};
use crate::corpus::{validate_languages, LanguageId, LanguageSpec};
use crate::error::{ensure, Result};
use crate::{seed, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantSpec {
    pub neurons_per_language: usize,
    /// Logit boost, in nats, a planted neuron gives its successor token.
    pub gain: f64,
}

impl Default for PlantSpec {
    fn default() -> Self {
        Self { neurons_per_language: 8, gain: DEFAULT_GAIN }
    }
}

pub const DEFAULT_GAIN: f64 = 5.0;

/// Read strength of the trigger coordinate in trigger embeddings.
const TRIGGER_STRENGTH: f64 = 2.0;
/// Scale of the planted down-projection rows; large enough that the output
/// coordinate dominates the final norm at trigger positions.
const WRITE_SCALE: f64 = 4.0;
/// Weight of the component shared by all language token embeddings.
const COMMON: f64 = 6.0;
/// Norm of the per-token random embedding component.
const NOISE: f64 = 0.1;
/// Minimum `P(b | a)` for a token to serve as trigger when enough exist.
const MIN_SUCCESSOR_PROB: f64 = 0.3;
/// Preferred mean number of `a -> b` events per sample. Rare events make the
/// per-sample relevance heavy-tailed; too rare and the neuron barely matters.
const TARGET_EVENT_RATE: f64 = 0.15;
const MIN_EVENT_RATE: f64 = 0.1;
const STAT_SAMPLES: usize = 4000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedNeuron {
    pub neuron: NeuronId,
    pub language: LanguageId,
    pub trigger: Token,
    pub successor: Token,
}

#[derive(Clone, Debug)]
pub struct PlantedModel<T> {
    pub weights: ModelWeights<T>,
    pub ground_truth: BTreeMap<LanguageId, NeuronSet>,
    pub neurons: Vec<PlantedNeuron>,
}

fn project_out(v: &mut [f64], basis: &[&Vec<f64>]) {
    for b in basis {
        let p: f64 = v.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
        v.iter_mut().zip(b.iter()).for_each(|(x, y)| *x -= p * y);
    }
}

fn unit(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

/// `(trigger, successor)` pairs for one language, closest to the target rate first.
fn pick_triggers(spec: &LanguageSpec, k: usize, seq_len: usize, seed: u64) -> Result<Vec<(Token, Token)>> {
    let stats = spec.token_statistics(STAT_SAMPLES, seq_len, seed)?;
    let mut cands: Vec<(f64, bool, Token, Token)> = (0..spec.vocab.len())
        .filter(|&i| stats.occurrences_per_sample[i] * stats.best_successor[i].1 >= MIN_EVENT_RATE)
        .map(|i| {
            let (b, p) = stats.best_successor[i];
            (stats.occurrences_per_sample[i] * p, p >= MIN_SUCCESSOR_PROB, spec.vocab.lo + i as Token, b)
        })
        .collect();
    // Confident triggers first, then by distance to the target event rate.
    let off = |c: &(f64, bool, Token, Token)| (c.0 - TARGET_EVENT_RATE).abs();
    cands.sort_by(|x, y| y.1.cmp(&x.1).then(off(x).total_cmp(&off(y))).then(x.2.cmp(&y.2)));
    ensure!(
        cands.len() >= k,
        Config,
        "language {} has only {} usable trigger tokens for {k} planted neurons",
        spec.id,
        cands.len()
    );
    Ok(cands.into_iter().take(k).map(|c| (c.2, c.3)).collect())
}

/// Builds a planted model. With `neurons_per_language = 0` this is exactly
/// [`build_model`] with empty ground-truth sets.
pub fn build_planted<T: Scalar>(
    config: ModelConfig,
    plant: &PlantSpec,
    languages: &[LanguageSpec],
    seed: u64,
) -> Result<PlantedModel<T>> {
    config.validate()?;
    validate_languages(languages, false)?;
    let k = plant.neurons_per_language;
    let n_lang = languages.len();
    ensure!(plant.gain.is_finite() && plant.gain > 0.0, Config, "plant gain must be positive");
    ensure!(
        k * n_lang <= config.n_neurons(),
        Config,
        "{} planted neurons exceed the model's {} neurons",
        k * n_lang,
        config.n_neurons()
    );
    for l in languages {
        ensure!(
            (l.vocab.hi as usize) <= config.vocab_size,
            Config,
            "vocabulary of {} ends at {} beyond vocab_size {}",
            l.id,
            l.vocab.hi,
            config.vocab_size
        );
    }
    let mut weights: ModelWeights<f64> = build_model(config, seed)?;
    let empty = |l: &LanguageSpec| (l.id.clone(), NeuronSet::empty(Method::Planted, Some(l.id.clone()), k));
    if k == 0 {
        return Ok(PlantedModel {
            weights: build_model(config, seed)?,
            ground_truth: languages.iter().map(empty).collect(),
            neurons: Vec::new(),
        });
    }
    let d = config.d_model;
    let n_dirs = n_lang + 2 * n_lang * k;
    ensure!(
        n_dirs < d,
        Config,
        "planting {k} neurons for {n_lang} languages reserves {n_dirs} residual coordinates, d_model is {d}"
    );
    // Each language's neurons are spread round-robin over the layers.
    let layer_of = |j: usize| j % config.n_layers;
    let per_layer: Vec<usize> =
        (0..config.n_layers).map(|l| n_lang * (0..k).filter(|&j| layer_of(j) == l).count()).collect();
    ensure!(
        per_layer.iter().all(|&c| c <= config.d_mlp),
        Config,
        "{} planted neurons in one layer exceed d_mlp {}",
        per_layer[0],
        config.d_mlp
    );

    let seq_len = config.max_seq_len.min(32).max(2);
    let triggers = languages
        .iter()
        .map(|l| pick_triggers(l, k, seq_len, seed::derive_seed(seed, "plant-stats")))
        .collect::<Result<Vec<_>>>()?;

    let mut rng = seed::rng_for(seed, "plant");
    let dirs: Vec<Vec<f64>> = index::sample(&mut rng, d, n_dirs)
        .into_iter()
        .map(|c| (0..d).map(|i| if i == c { 1.0 } else { 0.0 }).collect())
        .collect();
    let reserved: Vec<&Vec<f64>> = dirs.iter().collect();
    let lang_dir = |li: usize| &dirs[li];
    let trig_dir = |li: usize, j: usize| &dirs[n_lang + li * k + j];
    let out_dir = |li: usize, j: usize| &dirs[n_lang + n_lang * k + li * k + j];
    let mut common: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    project_out(&mut common, &reserved);
    unit(&mut common);

    for (li, lang) in languages.iter().enumerate() {
        for tok in lang.vocab.tokens() {
            let mut noise: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            project_out(&mut noise, &reserved);
            project_out(&mut noise, &[&common]);
            unit(&mut noise);
            let row = weights.token_embedding.row_mut(tok as usize);
            for (i, r) in row.iter_mut().enumerate() {
                *r = NOISE * noise[i] + COMMON * common[i] + lang_dir(li)[i];
            }
            if let Some(j) = triggers[li].iter().position(|&(a, _)| a == tok) {
                for (i, r) in row.iter_mut().enumerate() {
                    *r += TRIGGER_STRENGTH * trig_dir(li, j)[i];
                }
            }
        }
    }

    // Unembedding boost that makes the successor logit rise by `gain` at a
    // trigger position, accounting for the final norm.
    let sqrt_d = (d as f64).sqrt();
    let x_trig = (COMMON * COMMON + 1.0 + TRIGGER_STRENGTH * TRIGGER_STRENGTH + NOISE * NOISE).sqrt();
    let act = (TRIGGER_STRENGTH - 1.0) * sqrt_d / x_trig;
    let x_final = (x_trig * x_trig + (WRITE_SCALE * act).powi(2)).sqrt();
    let boost = plant.gain * x_final / (WRITE_SCALE * act * sqrt_d);

    let all_lang: Vec<f64> = (0..d).map(|i| (0..n_lang).map(|li| lang_dir(li)[i]).sum()).collect();
    let mut free: Vec<Vec<usize>> =
        per_layer.iter().map(|&c| index::sample(&mut rng, config.d_mlp, c).into_vec()).collect();
    let mut neurons = Vec::with_capacity(k * n_lang);
    for (li, lang) in languages.iter().enumerate() {
        for (j, &(a, b)) in triggers[li].iter().enumerate() {
            let id = NeuronId::new(layer_of(j), free[layer_of(j)].pop().expect("slot reserved"));
            let lw = &mut weights.layers[id.layer];
            let read: Vec<f64> = (0..d).map(|i| trig_dir(li, j)[i] - all_lang[i]).collect();
            lw.mlp_up.set_column(id.index, &read);
            for (w, &u) in lw.mlp_down.row_mut(id.index).iter_mut().zip(out_dir(li, j)) {
                *w = WRITE_SCALE * u;
            }
            for (i, &u) in out_dir(li, j).iter().enumerate() {
                weights.unembedding[(i, b as usize)] += boost * u;
            }
            neurons.push(PlantedNeuron { neuron: id, language: lang.id.clone(), trigger: a, successor: b });
        }
    }

    // Base neurons and attention neither read nor write the reserved
    // coordinates. Base neurons also read the shared embedding component,
    // which keeps them active on every token of every language.
    let planted: BTreeSet<NeuronId> = neurons.iter().map(|p| p.neuron).collect();
    for (l, lw) in weights.layers.iter_mut().enumerate() {
        for i in 0..d {
            project_out(lw.attn_o.row_mut(i), &reserved);
        }
        for m in [&mut lw.attn_q, &mut lw.attn_k, &mut lw.attn_v] {
            for i in 0..d {
                let mut col = m.column(i);
                project_out(&mut col, &reserved);
                m.set_column(i, &col);
            }
        }
        for i in 0..config.d_mlp {
            if planted.contains(&NeuronId::new(l, i)) {
                continue;
            }
            let mut col = lw.mlp_up.column(i);
            project_out(&mut col, &reserved);
            let norm = col.iter().map(|x| x * x).sum::<f64>().sqrt();
            project_out(&mut col, &[&common]);
            col.iter_mut().zip(&common).for_each(|(x, m)| *x += norm * m);
            lw.mlp_up.set_column(i, &col);
            project_out(lw.mlp_down.row_mut(i), &reserved);
        }
    }

    let mut ground_truth: BTreeMap<LanguageId, NeuronSet> = languages.iter().map(empty).collect();
    for p in &neurons {
        ground_truth.get_mut(&p.language).expect("language present").ids.insert(p.neuron);
    }
    Ok(PlantedModel { weights: weights.cast(), ground_truth, neurons })
}
