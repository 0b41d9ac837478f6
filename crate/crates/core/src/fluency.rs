//! Text-similarity and fluency metrics: BLEU, token overlap, and
//! perplexity under an in-repo n-gram language model.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{split_words, tokenize, TokenizedDoc, Vocabulary, CLS};
use crate::error::{Error, Result};

const BLEU_MAX_ORDER: usize = 4;
const BLEU_EPSILON: f64 = 1e-9;

/// BLEU of a candidate against a single reference, computed on
/// whitespace word tokens of the surface texts.
///
/// Configuration (recorded in run manifests): n-gram orders 1..=4 with
/// uniform weights over the orders the candidate actually has n-grams
/// for, matched counts clipped per reference, zero precisions smoothed
/// to 1e-9, and the standard brevity penalty. Roles are fixed:
/// candidate = adversarial text, reference = original.
pub fn bleu(candidate: &str, reference: &str) -> f64 {
    let cand = split_words(candidate);
    let refr = split_words(reference);
    if cand.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    let mut used_orders = 0usize;
    for n in 1..=BLEU_MAX_ORDER {
        if cand.len() < n {
            break; // no candidate n-grams of this order
        }
        let cand_counts = ngram_counts(&cand, n);
        let ref_counts = ngram_counts(&refr, n);
        let total: u64 = cand_counts.values().sum();
        let matched: u64 = cand_counts
            .iter()
            .map(|(gram, &c)| c.min(*ref_counts.get(gram).unwrap_or(&0)))
            .sum();
        let precision = if matched > 0 {
            matched as f64 / total as f64
        } else {
            BLEU_EPSILON
        };
        log_sum += precision.ln();
        used_orders += 1;
    }
    if used_orders == 0 {
        return 0.0;
    }
    let geo_mean = (log_sum / used_orders as f64).exp();
    let bp = if cand.len() < refr.len() {
        (1.0 - refr.len() as f64 / cand.len() as f64).exp()
    } else {
        1.0
    };
    bp * geo_mean
}

fn ngram_counts(words: &[String], n: usize) -> HashMap<&[String], u64> {
    let mut counts: HashMap<&[String], u64> = HashMap::new();
    if words.len() >= n {
        for i in 0..=words.len() - n {
            *counts.entry(&words[i..i + n]).or_insert(0) += 1;
        }
    }
    counts
}

/// Multiset overlap of interior tokens: `|interior(d) ∩ interior(d~)|
/// / |interior(d)|`. Two empty interiors count as full overlap.
pub fn token_overlap(original: &TokenizedDoc, adversarial: &TokenizedDoc) -> f64 {
    let orig = original.interior();
    let adv = adversarial.interior();
    if orig.is_empty() {
        return if adv.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<u32, i64> = HashMap::new();
    for &t in orig {
        *counts.entry(t).or_insert(0) += 1;
    }
    let mut shared = 0i64;
    for &t in adv {
        if let Some(c) = counts.get_mut(&t) {
            if *c > 0 {
                *c -= 1;
                shared += 1;
            }
        }
    }
    shared as f64 / orig.len() as f64
}

/// Interpolated absolute-discounting n-gram language model (order 2),
/// trained on the clean corpus only. Unigram probabilities are
/// Laplace-smoothed over the full vocabulary, so every conditional
/// distribution sums to one and assigns positive mass everywhere.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NgramLM {
    order: usize,
    discount: f64,
    vocab_size: usize,
    max_len: usize,
    /// c(v, w) for observed bigrams.
    bigrams: HashMap<u64, u64>,
    /// c(v) context totals.
    context_totals: HashMap<u32, u64>,
    /// Number of distinct successors per context.
    context_successors: HashMap<u32, u64>,
    /// c(w) unigram counts over interior tokens.
    unigrams: Vec<u64>,
    unigram_total: u64,
}

fn pair_key(a: u32, b: u32) -> u64 {
    ((a as u64) << 32) | b as u64
}

/// Default absolute-discount parameter.
pub const DEFAULT_DISCOUNT: f64 = 0.75;

impl NgramLM {
    /// Train on tokenized documents. Each document contributes the
    /// transitions CLS -> t_1 -> ... -> t_k over its interior tokens;
    /// the CLS frame doubles as the sentence-start pad.
    pub fn train(
        docs: &[TokenizedDoc],
        vocab: &Vocabulary,
        max_len: usize,
        discount: f64,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&discount) {
            return Err(Error::Config(format!(
                "discount must be in [0, 1), got {discount}"
            )));
        }
        let mut lm = NgramLM {
            order: 2,
            discount,
            vocab_size: vocab.len(),
            max_len,
            bigrams: HashMap::new(),
            context_totals: HashMap::new(),
            context_successors: HashMap::new(),
            unigrams: vec![0; vocab.len()],
            unigram_total: 0,
        };
        for doc in docs {
            let mut prev = CLS;
            for &t in doc.interior() {
                let key = pair_key(prev, t);
                let entry = lm.bigrams.entry(key).or_insert(0);
                if *entry == 0 {
                    *lm.context_successors.entry(prev).or_insert(0) += 1;
                }
                *entry += 1;
                *lm.context_totals.entry(prev).or_insert(0) += 1;
                lm.unigrams[t as usize] += 1;
                lm.unigram_total += 1;
                prev = t;
            }
        }
        Ok(lm)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn order(&self) -> usize {
        self.order
    }

    fn unigram_prob(&self, w: u32) -> f64 {
        (self.unigrams[w as usize] as f64 + 1.0)
            / (self.unigram_total as f64 + self.vocab_size as f64)
    }

    /// P(w | v): interpolated absolute discounting backing off to the
    /// Laplace unigram. Sums to 1 over the vocabulary for any context.
    pub fn prob(&self, context: u32, w: u32) -> f64 {
        let c_v = *self.context_totals.get(&context).unwrap_or(&0);
        if c_v == 0 {
            return self.unigram_prob(w);
        }
        let c_vw = *self.bigrams.get(&pair_key(context, w)).unwrap_or(&0) as f64;
        let t_v = *self.context_successors.get(&context).unwrap_or(&0) as f64;
        let c_v = c_v as f64;
        (c_vw - self.discount).max(0.0) / c_v
            + (self.discount * t_v / c_v) * self.unigram_prob(w)
    }

    /// Perplexity of a text: exp of the mean negative log probability of
    /// its interior tokens, each conditioned on its predecessor (the
    /// first token on the sentence start). Empty texts score 1.
    pub fn perplexity(&self, text: &str, vocab: &Vocabulary) -> f64 {
        let doc = tokenize(text, vocab, self.max_len);
        self.perplexity_doc(&doc)
    }

    pub fn perplexity_doc(&self, doc: &TokenizedDoc) -> f64 {
        let interior = doc.interior();
        if interior.is_empty() {
            return 1.0;
        }
        let mut nll = 0.0;
        let mut prev = CLS;
        for &t in interior {
            nll -= self.prob(prev, t).max(f64::MIN_POSITIVE).ln();
            prev = t;
        }
        (nll / interior.len() as f64).exp()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bleu_identical_texts_is_one() {
        assert!((bleu("the cat sat down", "the cat sat down") - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bleu_disjoint_texts_is_near_zero() {
        assert!(bleu("aa bb cc dd", "xx yy zz ww") < 1e-6);
    }

    #[test]
    fn bleu_short_candidate_hand_case() {
        // candidate "the cat sat" vs reference "the cat sat down":
        // precisions 1 for n<=3, no candidate 4-grams, BP = exp(1 - 4/3).
        let got = bleu("the cat sat", "the cat sat down");
        let want = (1.0f64 - 4.0 / 3.0).exp();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn bleu_is_direction_sensitive() {
        let a = bleu("the cat sat", "the cat sat down");
        let b = bleu("the cat sat down", "the cat sat");
        assert_ne!(a, b);
    }

    #[test]
    fn bleu_empty_candidate_is_zero() {
        assert_eq!(bleu("", "anything here"), 0.0);
    }

    fn doc(tokens: Vec<u32>) -> TokenizedDoc {
        TokenizedDoc {
            doc_id: String::new(),
            text: String::new(),
            tokens,
        }
    }

    #[test]
    fn overlap_boundary_cases() {
        use crate::corpus::{CLS, SEP};
        let d = doc(vec![CLS, 10, 11, 12, 13, SEP]);
        assert_eq!(token_overlap(&d, &d), 1.0);
        let disjoint = doc(vec![CLS, 20, 21, 22, 23, SEP]);
        assert_eq!(token_overlap(&d, &disjoint), 0.0);
        let half = doc(vec![CLS, 10, 11, 22, 23, SEP]);
        assert_eq!(token_overlap(&d, &half), 0.5);
        // multiset semantics: duplicates only match as many times as present
        let dup = doc(vec![CLS, 10, 10, 10, 10, SEP]);
        assert_eq!(token_overlap(&d, &dup), 0.25);
    }

    #[test]
    fn untrained_lm_is_uniform_and_ppl_equals_vocab_size() {
        let vocab = Vocabulary::from_words((0..11).map(|i| format!("w{i}"))).unwrap();
        let lm = NgramLM::train(&[], &vocab, 32, DEFAULT_DISCOUNT).unwrap();
        let v = vocab.len() as f64;
        assert!((lm.prob(CLS, 7) - 1.0 / v).abs() < 1e-12);
        let ppl = lm.perplexity("w1 w2 w3", &vocab);
        assert!((ppl - v).abs() < 1e-9, "{ppl} vs {v}");
    }

    #[test]
    fn deterministic_chain_with_zero_discount_has_ppl_one() {
        let vocab = Vocabulary::from_words(["a", "b", "c"].map(String::from)).unwrap();
        let train = tokenize("a b c", &vocab, 16);
        let lm = NgramLM::train(&[train], &vocab, 16, 0.0).unwrap();
        let ppl = lm.perplexity("a b c", &vocab);
        assert!((ppl - 1.0).abs() < 1e-12, "{ppl}");
    }

    #[test]
    fn conditional_distributions_sum_to_one() {
        let vocab = Vocabulary::from_words((0..12).map(|i| format!("w{i}"))).unwrap();
        let docs: Vec<TokenizedDoc> = ["w1 w2 w3 w1 w2", "w2 w3 w4 w5", "w1 w4 w4 w2"]
            .iter()
            .map(|t| tokenize(t, &vocab, 16))
            .collect();
        let lm = NgramLM::train(&docs, &vocab, 16, DEFAULT_DISCOUNT).unwrap();
        for context in [CLS, vocab.id("w1"), vocab.id("w4"), vocab.id("w9")] {
            let total: f64 = (0..vocab.len() as u32).map(|w| lm.prob(context, w)).sum();
            assert!((total - 1.0).abs() < 1e-9, "context {context}: {total}");
        }
    }

    #[test]
    fn scrambled_text_scores_worse_than_training_text() {
        let vocab = Vocabulary::from_words((0..30).map(|i| format!("w{i}"))).unwrap();
        // strongly chained corpus: w(i) -> w(i+1)
        let docs: Vec<TokenizedDoc> = (0..20)
            .map(|s| {
                let words: Vec<String> = (s..s + 6).map(|i| format!("w{}", i % 30)).collect();
                tokenize(&words.join(" "), &vocab, 16)
            })
            .collect();
        let lm = NgramLM::train(&docs, &vocab, 16, DEFAULT_DISCOUNT).unwrap();
        let natural = lm.perplexity("w3 w4 w5 w6", &vocab);
        let scrambled = lm.perplexity("w3 w17 w9 w25", &vocab);
        assert!(natural < scrambled, "{natural} vs {scrambled}");
    }
}
