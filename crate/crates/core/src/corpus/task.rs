use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Corpus, LanguageId, TokenRange};
use crate::error::{ensure, Result};
use crate::model::Token;
use crate::seed;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct McItem {
    pub prefix: Vec<Token>,
    pub gold: Token,
    pub distractors: [Token; 3],
}

impl McItem {
    pub fn options(&self) -> [Token; 4] {
        [self.gold, self.distractors[0], self.distractors[1], self.distractors[2]]
    }
}

/// Four-way next-token cloze task over one language.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct McTask {
    pub language: LanguageId,
    pub items: Vec<McItem>,
}

/// Samples `n_items` (prefix, gold) positions uniformly over the corpus'
/// next-token positions; distractors are distinct tokens of `vocab` other
/// than the gold token.
pub fn make_mc_task(corpus: &Corpus, vocab: TokenRange, n_items: usize, seed: u64) -> Result<McTask> {
    ensure!(vocab.len() >= 4, Config, "vocabulary of {} tokens cannot host 4 options", vocab.len());
    let positions: Vec<(usize, usize)> = corpus
        .samples
        .iter()
        .enumerate()
        .flat_map(|(s, sample)| (1..sample.len()).map(move |t| (s, t)))
        .collect();
    ensure!(!positions.is_empty(), Input, "corpus for {} has no next-token positions", corpus.language);
    let mut rng = seed::rng_for(seed, "mc-task");
    let mut items = Vec::with_capacity(n_items);
    for _ in 0..n_items {
        let (s, t) = positions[rng.gen_range(0..positions.len())];
        let sample = &corpus.samples[s];
        let gold = sample[t];
        ensure!(vocab.contains(gold), Input, "gold token {gold} outside vocabulary of {}", corpus.language);
        let gold_off = (gold - vocab.lo) as usize;
        let picks = index::sample(&mut rng, vocab.len() - 1, 3);
        let mut distractors = [0; 3];
        for (d, p) in distractors.iter_mut().zip(picks.iter()) {
            let off = if p >= gold_off { p + 1 } else { p };
            *d = vocab.lo + off as Token;
        }
        items.push(McItem { prefix: sample[..t].to_vec(), gold, distractors });
    }
    Ok(McTask { language: corpus.language.clone(), items })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{default_languages, generate_corpus};

    #[test]
    fn single_item_has_four_distinct_options() {
        let spec = &default_languages(0)[0];
        let c = generate_corpus(spec, 5, 16, 1).unwrap();
        let task = make_mc_task(&c, spec.vocab, 1, 2).unwrap();
        assert_eq!(task.items.len(), 1);
        let mut o = task.items[0].options().to_vec();
        o.sort_unstable();
        o.dedup();
        assert_eq!(o.len(), 4);
        assert!(o.iter().all(|&t| spec.vocab.contains(t)));
        assert_eq!(task, make_mc_task(&c, spec.vocab, 1, 2).unwrap());
    }

    #[test]
    fn tiny_vocab_rejected() {
        let spec = &default_languages(0)[0];
        let c = generate_corpus(spec, 5, 16, 1).unwrap();
        assert!(matches!(make_mc_task(&c, TokenRange::new(0, 3), 1, 2), Err(crate::Error::Config(_))));
        let empty = Corpus { samples: vec![], ..c };
        assert!(matches!(make_mc_task(&empty, spec.vocab, 1, 2), Err(crate::Error::Input(_))));
    }

    #[test]
    fn gold_frequencies_track_corpus_frequencies() {
        let spec = &default_languages(0)[1];
        let c = generate_corpus(spec, 400, 32, 3).unwrap();
        let task = make_mc_task(&c, spec.vocab, 1000, 4).unwrap();
        let n = spec.vocab.len();
        let mut corpus_counts = vec![0f64; n];
        let mut total = 0f64;
        for s in &c.samples {
            for &t in &s[1..] {
                corpus_counts[(t - spec.vocab.lo) as usize] += 1.0;
                total += 1.0;
            }
        }
        let mut gold_counts = vec![0f64; n];
        for it in &task.items {
            gold_counts[(it.gold - spec.vocab.lo) as usize] += 1.0;
            assert!(!it.distractors.contains(&it.gold));
        }
        for k in 0..n {
            let p = corpus_counts[k] / total;
            let expect = 1000.0 * p;
            let sd = (1000.0 * p * (1.0 - p)).sqrt();
            assert!((gold_counts[k] - expect).abs() <= 5.0 * sd + 1.0, "token {k}: {} vs {expect}", gold_counts[k]);
        }
    }
}
