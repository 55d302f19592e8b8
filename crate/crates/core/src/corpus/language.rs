use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::model::Token;
use crate::seed;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LanguageId(String);

impl LanguageId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl From<&str> for LanguageId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

impl fmt::Display for LanguageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Half-open token id range `[lo, hi)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenRange {
    pub lo: Token,
    pub hi: Token,
}

impl TokenRange {
    pub fn new(lo: Token, hi: Token) -> Self {
        Self { lo, hi }
    }

    pub fn len(&self) -> usize {
        self.hi.saturating_sub(self.lo) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, t: Token) -> bool {
        (self.lo..self.hi).contains(&t)
    }

    pub fn overlaps(&self, other: &TokenRange) -> bool {
        self.lo < other.hi && other.lo < self.hi
    }

    pub fn tokens(&self) -> impl Iterator<Item = Token> {
        self.lo..self.hi
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Grammar {
    /// Order-1 chain; row `i` is the successor distribution of token `lo + i`.
    Markov { transitions: Vec<Vec<f64>> },
    /// Balanced brackets. Token `lo + 2k` opens type `k`, `lo + 2k + 1` closes it.
    Bracket { max_depth: usize, open_prob: f64, type_weights: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageSpec {
    pub id: LanguageId,
    pub vocab: TokenRange,
    pub grammar: Grammar,
    /// Seed the grammar was constructed from; recorded for provenance.
    pub seed: u64,
}

const STOCHASTIC_TOL: f64 = 1e-9;

impl LanguageSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.vocab.is_empty(), Config, "language {} has an empty vocabulary", self.id);
        match &self.grammar {
            Grammar::Markov { transitions } => {
                let n = self.vocab.len();
                ensure!(transitions.len() == n, Config, "language {}: {} transition rows for {n} tokens", self.id, transitions.len());
                for (i, row) in transitions.iter().enumerate() {
                    ensure!(row.len() == n, Config, "language {}: transition row {i} has {} entries", self.id, row.len());
                    ensure!(
                        row.iter().all(|&p| p.is_finite() && p >= 0.0),
                        Config,
                        "language {}: transition row {i} has negative or non-finite entries",
                        self.id
                    );
                    let s: f64 = row.iter().sum();
                    ensure!((s - 1.0).abs() <= STOCHASTIC_TOL, Config, "language {}: transition row {i} sums to {s}", self.id);
                }
            }
            Grammar::Bracket { max_depth, open_prob, type_weights } => {
                ensure!(self.vocab.len() % 2 == 0, Config, "bracket language {} needs an even vocabulary size", self.id);
                ensure!(*max_depth >= 1, Config, "bracket language {}: max_depth must be at least 1", self.id);
                ensure!((0.0..=1.0).contains(open_prob), Config, "bracket language {}: open_prob outside [0, 1]", self.id);
                ensure!(type_weights.len() == self.vocab.len() / 2, Config, "bracket language {}: one weight per bracket type", self.id);
                ensure!(
                    type_weights.iter().all(|&w| w.is_finite() && w >= 0.0) && type_weights.iter().sum::<f64>() > 0.0,
                    Config,
                    "bracket language {}: type weights must be non-negative with positive sum",
                    self.id
                );
            }
        }
        Ok(())
    }

    /// Chain with one dominant successor per token carrying `0.7`; the rest
    /// follows a Zipf profile over a shuffled order. Half of the tokens sit
    /// off the dominant cycle and are rare.
    pub fn markov_peaked(id: &str, vocab: TokenRange, seed: u64) -> Self {
        let n = vocab.len();
        let mut rng = seed::rng_for(seed, "markov-peaked");
        let cycle = random_map(n, n.div_ceil(2), &mut rng);
        let zipf = shuffled_zipf(n, 1.0, &mut rng);
        let transitions = (0..n)
            .map(|i| {
                let mut row: Vec<f64> = zipf.iter().map(|&z| 0.3 * z).collect();
                row[cycle[i]] += 0.7;
                row
            })
            .collect();
        Self { id: id.into(), vocab, grammar: Grammar::Markov { transitions }, seed }
    }

    /// Chain with two preferred successors per token (`0.45` and `0.25`)
    /// from independent random maps (see [`markov_peaked`]) plus a Zipf
    /// background.
    pub fn markov_branching(id: &str, vocab: TokenRange, seed: u64) -> Self {
        let n = vocab.len();
        let mut rng = seed::rng_for(seed, "markov-branching");
        let first = random_map(n, (3 * n).div_ceil(4), &mut rng);
        let second = random_map(n, (3 * n).div_ceil(4), &mut rng);
        let zipf = shuffled_zipf(n, 1.0, &mut rng);
        let transitions = (0..n)
            .map(|i| {
                let mut row: Vec<f64> = zipf.iter().map(|&z| 0.3 * z).collect();
                row[first[i]] += 0.45;
                row[second[i]] += 0.25;
                row
            })
            .collect();
        Self { id: id.into(), vocab, grammar: Grammar::Markov { transitions }, seed }
    }

    /// Balanced brackets with depth limit 4 and bracket types weighted by a
    /// Zipf law of exponent 1.5, so that about half of the types are rare.
    pub fn bracket(id: &str, vocab: TokenRange, seed: u64) -> Self {
        let mut rng = seed::rng_for(seed, "bracket");
        let type_weights = shuffled_zipf(vocab.len() / 2, 1.5, &mut rng);
        Self { id: id.into(), vocab, grammar: Grammar::Bracket { max_depth: 4, open_prob: 0.35, type_weights }, seed }
    }

    /// Unigram frequencies and, per token, the most likely successor with its
    /// probability, estimated from the grammar by simulation.
    pub fn token_statistics(&self, n_samples: usize, seq_len: usize, seed: u64) -> Result<TokenStatistics> {
        let corpus = super::generate_corpus(self, n_samples, seq_len, seed)?;
        let n = self.vocab.len();
        let mut unigram = vec![0usize; n];
        let mut bigram = vec![vec![0usize; n]; n];
        let mut positions = 0usize;
        for s in &corpus.samples {
            for (i, &t) in s.iter().enumerate() {
                unigram[(t - self.vocab.lo) as usize] += 1;
                positions += 1;
                if let Some(&next) = s.get(i + 1) {
                    bigram[(t - self.vocab.lo) as usize][(next - self.vocab.lo) as usize] += 1;
                }
            }
        }
        let per_sample = unigram.iter().map(|&c| c as f64 / n_samples.max(1) as f64).collect();
        let best_successor = bigram
            .iter()
            .map(|row| {
                let total: usize = row.iter().sum();
                let (arg, &max) = row.iter().enumerate().max_by_key(|&(i, &c)| (c, std::cmp::Reverse(i))).expect("non-empty row");
                let p = if total == 0 { 0.0 } else { max as f64 / total as f64 };
                (self.vocab.lo + arg as Token, p)
            })
            .collect();
        Ok(TokenStatistics { vocab: self.vocab, positions, occurrences_per_sample: per_sample, best_successor })
    }
}

#[derive(Clone, Debug)]
pub struct TokenStatistics {
    pub vocab: TokenRange,
    pub positions: usize,
    /// Mean occurrences per sample, indexed by `token - vocab.lo`.
    pub occurrences_per_sample: Vec<f64>,
    /// `(successor, P(successor | token))` indexed by `token - vocab.lo`.
    pub best_successor: Vec<(Token, f64)>,
}

/// Dominant successor per token: a random cycle through `on_cycle` of the
/// tokens, with every remaining token pointing into the cycle. Nothing
/// points at the off-cycle tokens, so they are reached only through the
/// background distribution.
fn random_map(n: usize, on_cycle: usize, rng: &mut impl rand::Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let on_cycle = on_cycle.clamp(1, n.max(1));
    let mut next = vec![0; n];
    for k in 0..on_cycle {
        next[order[k]] = order[(k + 1) % on_cycle];
    }
    for &t in &order[on_cycle..] {
        next[t] = order[rng.gen_range(0..on_cycle)];
    }
    next
}

fn shuffled_zipf(n: usize, exponent: f64, rng: &mut impl rand::Rng) -> Vec<f64> {
    let mut w: Vec<f64> = (0..n).map(|k| ((k + 1) as f64).powf(-exponent)).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w.shuffle(rng);
    w
}

/// The three default languages: two differently-structured Markov chains
/// and a bracket language, each over a 32-token range. `overlap` shifts
/// the later ranges down so that neighbouring vocabularies share tokens.
pub fn default_languages(overlap: u32) -> Vec<LanguageSpec> {
    vec![
        LanguageSpec::markov_peaked("l1", TokenRange::new(0, 32), 11),
        LanguageSpec::markov_branching("l2", TokenRange::new(32 - overlap, 64 - overlap), 12),
        LanguageSpec::bracket("l3", TokenRange::new(64 - 2 * overlap, 96 - 2 * overlap), 13),
    ]
}

/// Validates each spec, id uniqueness, and (unless allowed) range disjointness.
pub fn validate_languages(specs: &[LanguageSpec], allow_overlap: bool) -> Result<()> {
    for (i, a) in specs.iter().enumerate() {
        a.validate()?;
        for b in &specs[i + 1..] {
            ensure!(a.id != b.id, Config, "duplicate language id {}", a.id);
            ensure!(
                allow_overlap || !a.vocab.overlaps(&b.vocab),
                Config,
                "vocabularies of {} and {} overlap",
                a.id,
                b.id
            );
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_row_stochastic() {
        for spec in default_languages(0) {
            spec.validate().unwrap();
        }
        validate_languages(&default_languages(0), false).unwrap();
        assert!(validate_languages(&default_languages(4), false).is_err());
        validate_languages(&default_languages(4), true).unwrap();
    }

    #[test]
    fn non_stochastic_matrix_rejected() {
        let mut spec = LanguageSpec::markov_peaked("x", TokenRange::new(0, 4), 1);
        if let Grammar::Markov { transitions } = &mut spec.grammar {
            transitions[2][1] += 0.01;
        }
        assert!(matches!(spec.validate(), Err(crate::Error::Config(_))));
    }
}
