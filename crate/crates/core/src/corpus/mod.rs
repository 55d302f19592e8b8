//! Synthetic languages, corpora, held-out splits, and multiple-choice
//! next-token tasks.

mod language;
mod task;

pub use language::{default_languages, validate_languages, Grammar, LanguageId, LanguageSpec, TokenRange, TokenStatistics};
pub use task::{make_mc_task, McItem, McTask};

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::model::Token;
use crate::seed;

pub type Sequence = Vec<Token>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Heldout,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Heldout => "heldout",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "heldout" => Ok(Split::Heldout),
            other => Err(Error::Format(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub language: LanguageId,
    pub split: Split,
    pub samples: Vec<Sequence>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Corpus file body: `#lang=<id> split=<name>` then one sample per line.
    pub fn to_text(&self) -> String {
        let mut s = format!("#lang={} split={}\n", self.language, self.split);
        for sample in &self.samples {
            let line: Vec<String> = sample.iter().map(Token::to_string).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| Error::Format("line 1: missing corpus header".into()))?;
        let bad_header = || Error::Format(format!("line 1: expected `#lang=<id> split=<name>`, got {header:?}"));
        let rest = header.strip_prefix("#lang=").ok_or_else(bad_header)?;
        let (lang, split) = rest.split_once(" split=").ok_or_else(bad_header)?;
        let split: Split = split.trim().parse().map_err(|_| bad_header())?;
        let mut samples = Vec::new();
        for (i, line) in lines {
            if line.trim_start().starts_with('#') {
                continue;
            }
            let sample = line
                .split_whitespace()
                .map(|tok| tok.parse::<Token>().map_err(|_| Error::Format(format!("line {}: bad token {tok:?}", i + 1))))
                .collect::<Result<Sequence>>()?;
            samples.push(sample);
        }
        Ok(Self { language: LanguageId::new(lang.trim()), split, samples })
    }
}

fn sample_index(weights: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Generates `n_samples` sequences from the language's grammar.
///
/// Markov samples have exactly `seq_len` tokens and start uniformly in the
/// vocabulary. Bracket samples are balanced strings of length `seq_len`
/// rounded down to even.
pub fn generate_corpus(spec: &LanguageSpec, n_samples: usize, seq_len: usize, seed: u64) -> Result<Corpus> {
    spec.validate()?;
    ensure!(seq_len >= 1, Config, "seq_len must be at least 1");
    let mut rng = seed::rng_for(seed, spec.id.as_str());
    let lo = spec.vocab.lo;
    let samples = (0..n_samples)
        .map(|_| match &spec.grammar {
            Grammar::Markov { transitions } => {
                let mut cur = rng.gen_range(0..spec.vocab.len());
                let mut s = Vec::with_capacity(seq_len);
                s.push(lo + cur as Token);
                while s.len() < seq_len {
                    cur = sample_index(&transitions[cur], &mut rng);
                    s.push(lo + cur as Token);
                }
                s
            }
            Grammar::Bracket { max_depth, open_prob, type_weights } => {
                let len = seq_len - seq_len % 2;
                let mut stack: Vec<usize> = Vec::new();
                let mut s = Vec::with_capacity(len);
                while s.len() < len {
                    let remaining = len - s.len();
                    let depth = stack.len();
                    let open = if depth == 0 {
                        true
                    } else if depth == *max_depth || depth == remaining {
                        false
                    } else {
                        rng.gen::<f64>() < *open_prob
                    };
                    if open {
                        let k = sample_index(type_weights, &mut rng);
                        stack.push(k);
                        s.push(lo + 2 * k as Token);
                    } else {
                        let k = stack.pop().expect("close only with open brackets");
                        s.push(lo + 2 * k as Token + 1);
                    }
                }
                s
            }
        })
        .collect();
    Ok(Corpus { language: spec.id.clone(), split: Split::Train, samples })
}

/// Disjoint `(train, heldout)` partition with `round(n · fraction)` held out.
pub fn split_corpus(corpus: &Corpus, heldout_fraction: f64, seed: u64) -> Result<(Corpus, Corpus)> {
    ensure!(
        heldout_fraction > 0.0 && heldout_fraction < 1.0,
        Input,
        "held-out fraction {heldout_fraction} must lie strictly between 0 and 1"
    );
    let n = corpus.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng_for(seed, "split"));
    let n_heldout = (n as f64 * heldout_fraction).round() as usize;
    let (held, train) = order.split_at(n_heldout);
    let mut held = held.to_vec();
    let mut train = train.to_vec();
    held.sort_unstable();
    train.sort_unstable();
    let pick = |idx: &[usize], split| Corpus {
        language: corpus.language.clone(),
        split,
        samples: idx.iter().map(|&i| corpus.samples[i].clone()).collect(),
    };
    Ok((pick(&train, Split::Train), pick(&held, Split::Heldout)))
}
