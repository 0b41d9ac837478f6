//! Seeded synthetic corpus generator.
//!
//! Each topic owns a disjoint keyword pool wired into a small successor
//! graph; documents are random walks over it, mixed with walks over a
//! shared background pool. The walks give the corpus stable bigram
//! statistics, so a language model trained on it can tell natural word
//! order from scrambled tokens, while the disjoint pools give the
//! retriever a learnable topic signal.

use std::collections::HashSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{RawDoc, RawQuery, Vocabulary, RESERVED};
use crate::error::{Error, Result};
use crate::seeding::rng_for;

#[derive(Clone, Debug)]
pub struct SyntheticConfig {
    pub n_topics: usize,
    pub docs_per_topic: usize,
    pub queries_per_topic: usize,
    /// Inclusive range of words per document.
    pub words_per_doc: (usize, usize),
    /// Inclusive range of words per query.
    pub words_per_query: (usize, usize),
    /// Keywords per topic pool.
    pub topic_pool: usize,
    /// Shared background pool size.
    pub background_pool: usize,
    /// Probability that a document position continues the topic walk
    /// instead of the background walk.
    pub in_topic_ratio: f64,
    /// Successors per word in each pool graph.
    pub successors: usize,
    /// Configured vocabulary capacity; generation fails if the pools
    /// exceed it.
    pub vocab_max: usize,
    /// Fraction of each topic's queries assigned to the training split.
    pub train_query_ratio: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_topics: 20,
            docs_per_topic: 250,
            queries_per_topic: 25,
            words_per_doc: (5, 9),
            words_per_query: (3, 5),
            topic_pool: 85,
            background_pool: 250,
            in_topic_ratio: 0.8,
            successors: 3,
            vocab_max: 2048,
            train_query_ratio: 0.6,
            seed: 13,
        }
    }
}

/// Generated corpus, queries, split qrels, and the word list backing the
/// vocabulary.
#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub docs: Vec<RawDoc>,
    pub queries: Vec<RawQuery>,
    pub train_qrels: Vec<(String, String, u32)>,
    pub test_qrels: Vec<(String, String, u32)>,
    pub train_query_ids: Vec<String>,
    pub test_query_ids: Vec<String>,
    pub words: Vec<String>,
}

impl SyntheticData {
    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::from_words(self.words.iter().cloned())
    }
}

/// A word pool with a fixed successor graph; documents walk it.
struct Pool {
    words: Vec<usize>, // indices into the global word list
    successors: Vec<Vec<usize>>,
}

impl Pool {
    fn build(words: Vec<usize>, fanout: usize, rng: &mut ChaCha8Rng) -> Pool {
        let n = words.len();
        let successors = (0..n)
            .map(|i| {
                let mut succ = Vec::with_capacity(fanout);
                while succ.len() < fanout.min(n - 1) {
                    let j = rng.random_range(0..n);
                    if j != i && !succ.contains(&j) {
                        succ.push(j);
                    }
                }
                succ
            })
            .collect();
        Pool { words, successors }
    }

    fn walk_start(&self, rng: &mut ChaCha8Rng) -> usize {
        rng.random_range(0..self.words.len())
    }

    fn step(&self, cursor: usize, rng: &mut ChaCha8Rng) -> usize {
        let succ = &self.successors[cursor];
        succ[rng.random_range(0..succ.len())]
    }
}

const ONSETS: [&str; 20] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "dr", "gr", "pl",
    "st", "tr",
];
const NUCLEI: [&str; 10] = ["a", "e", "i", "o", "u", "ar", "en", "il", "on", "ul"];

fn pseudo_word(rng: &mut ChaCha8Rng, taken: &HashSet<String>) -> String {
    loop {
        let syllables = rng.random_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(ONSETS[rng.random_range(0..ONSETS.len())]);
            w.push_str(NUCLEI[rng.random_range(0..NUCLEI.len())]);
        }
        if !taken.contains(&w) {
            return w;
        }
    }
}

/// Generate a corpus, queries and qrels, fully determined by the seed.
/// Same-topic documents are relevant (grade 1) to each topic's queries.
pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    if cfg.n_topics < 1 || cfg.docs_per_topic < 1 || cfg.queries_per_topic < 1 {
        return Err(Error::Config("synthetic counts must all be >= 1".into()));
    }
    let needed = RESERVED.len() + cfg.n_topics * cfg.topic_pool + cfg.background_pool;
    if needed > cfg.vocab_max {
        return Err(Error::Config(format!(
            "synthetic pools need {needed} vocabulary slots but vocab_max is {}",
            cfg.vocab_max
        )));
    }

    let mut rng = rng_for(cfg.seed, "synthetic");

    // Word list: background pool first, then one pool per topic.
    let total_words = cfg.background_pool + cfg.n_topics * cfg.topic_pool;
    let mut words: Vec<String> = Vec::with_capacity(total_words);
    let mut taken: HashSet<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    for _ in 0..total_words {
        let w = pseudo_word(&mut rng, &taken);
        taken.insert(w.clone());
        words.push(w);
    }

    let background = Pool::build((0..cfg.background_pool).collect(), cfg.successors, &mut rng);
    let topics: Vec<Pool> = (0..cfg.n_topics)
        .map(|t| {
            let lo = cfg.background_pool + t * cfg.topic_pool;
            Pool::build((lo..lo + cfg.topic_pool).collect(), cfg.successors, &mut rng)
        })
        .collect();

    let mut docs = Vec::with_capacity(cfg.n_topics * cfg.docs_per_topic);
    for (t, pool) in topics.iter().enumerate() {
        for i in 0..cfg.docs_per_topic {
            let len = rng.random_range(cfg.words_per_doc.0..=cfg.words_per_doc.1);
            let mut topic_cursor = pool.walk_start(&mut rng);
            let mut bg_cursor = background.walk_start(&mut rng);
            let mut text_words = Vec::with_capacity(len);
            for _ in 0..len {
                if rng.random::<f64>() < cfg.in_topic_ratio {
                    topic_cursor = pool.step(topic_cursor, &mut rng);
                    text_words.push(words[pool.words[topic_cursor]].as_str());
                } else {
                    bg_cursor = background.step(bg_cursor, &mut rng);
                    text_words.push(words[background.words[bg_cursor]].as_str());
                }
            }
            docs.push(RawDoc {
                id: format!("d{t:02}-{i:04}"),
                title: String::new(),
                text: text_words.join(" "),
            });
        }
    }

    let mut queries = Vec::with_capacity(cfg.n_topics * cfg.queries_per_topic);
    let mut train_query_ids = Vec::new();
    let mut test_query_ids = Vec::new();
    let train_per_topic =
        ((cfg.queries_per_topic as f64) * cfg.train_query_ratio).round() as usize;
    for (t, pool) in topics.iter().enumerate() {
        for i in 0..cfg.queries_per_topic {
            let len = rng.random_range(cfg.words_per_query.0..=cfg.words_per_query.1);
            let mut cursor = pool.walk_start(&mut rng);
            let mut text_words = Vec::with_capacity(len);
            for _ in 0..len {
                cursor = pool.step(cursor, &mut rng);
                text_words.push(words[pool.words[cursor]].as_str());
            }
            let id = format!("q{t:02}-{i:03}");
            if i < train_per_topic {
                train_query_ids.push(id.clone());
            } else {
                test_query_ids.push(id.clone());
            }
            queries.push(RawQuery {
                id,
                text: text_words.join(" "),
            });
        }
    }

    let mut train_qrels = Vec::new();
    let mut test_qrels = Vec::new();
    for q in &queries {
        let topic: usize = q.id[1..3].parse().expect("query id carries topic");
        let is_train = train_query_ids.contains(&q.id);
        let sink = if is_train { &mut train_qrels } else { &mut test_qrels };
        for i in 0..cfg.docs_per_topic {
            sink.push((q.id.clone(), format!("d{topic:02}-{i:04}"), 1));
        }
    }

    Ok(SyntheticData {
        docs,
        queries,
        train_qrels,
        test_qrels,
        train_query_ids,
        test_query_ids,
        words,
    })
}
