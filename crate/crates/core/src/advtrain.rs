//! Adversarial training: mine adversarial documents as hard negatives
//! for (query, positive) pairs, then fine-tune the encoder with a
//! contrastive loss over {its adversarial negative} plus in-batch
//! positives of the other queries.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, Corpus, Qrels, TokenizedDoc, Vocabulary};
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::numerics::{AdamState, Graph};
use crate::perturber::{attack_document, AttackConfig};
use crate::reconstructor::ReconstructionModel;
use crate::seeding::rng_for;

/// One mined training triple, persisted as JSON lines.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Triple {
    pub query_id: String,
    pub pos_id: String,
    pub adv_text: String,
}

/// Deterministically sample (query, positive) training pairs: queries
/// shuffled by seed, one relevant document drawn per query, cycling
/// through queries until `n` pairs exist.
pub fn sample_training_pairs(
    queries: &[TokenizedDoc],
    qrels: &Qrels,
    n: usize,
    seed: u64,
) -> Result<Vec<(String, String)>> {
    if queries.is_empty() {
        return Err(Error::Data("no queries to sample pairs from".into()));
    }
    let mut rng = rng_for(seed, "pairs");
    let mut order: Vec<usize> = (0..queries.len()).collect();
    order.shuffle(&mut rng);
    let mut pairs = Vec::with_capacity(n);
    let mut i = 0usize;
    while pairs.len() < n {
        let q = &queries[order[i % order.len()]];
        let rel = qrels.relevant(&q.doc_id);
        let positives: Vec<&str> = rel
            .iter()
            .filter(|&&(_, g)| g >= 1)
            .map(|(d, _)| d.as_str())
            .collect();
        if positives.is_empty() {
            return Err(Error::Data(format!(
                "query `{}` has no relevant document",
                q.doc_id
            )));
        }
        let pick = positives[rng.random_range(0..positives.len())];
        pairs.push((q.doc_id.clone(), pick.to_string()));
        i += 1;
    }
    Ok(pairs)
}

/// Attack every positive document and attach the adversarial text as a
/// hard negative. Failed attacks are logged and skipped.
pub fn mine_adversarial_negatives(
    pairs: &[(String, String)],
    corpus: &Corpus,
    encoder: &EncoderModel,
    recon: &ReconstructionModel,
    vocab: &Vocabulary,
    attack: &AttackConfig,
    seed: u64,
) -> Result<(Vec<Triple>, Vec<(String, String)>)> {
    let results: Vec<(usize, Result<Triple>)> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, (query_id, pos_id))| {
            let triple = corpus
                .get(pos_id)
                .ok_or_else(|| Error::Data(format!("positive `{pos_id}` missing from corpus")))
                .and_then(|doc| {
                    // Distinct pair tags keep repeated positives from
                    // producing identical negatives.
                    let tagged = doc.clone().with_id(&format!("{pos_id}#{i}"));
                    attack_document(&tagged, encoder, recon, vocab, attack, seed).map(|rec| {
                        Triple {
                            query_id: query_id.clone(),
                            pos_id: pos_id.clone(),
                            adv_text: rec.adv_text,
                        }
                    })
                });
            (i, triple)
        })
        .collect();
    let mut triples = Vec::with_capacity(pairs.len());
    let mut failures = Vec::new();
    for (i, r) in results {
        match r {
            Ok(t) => triples.push(t),
            Err(e) => {
                eprintln!("mining failed for pair {i}: {e}");
                failures.push((pairs[i].0.clone(), e.to_string()));
            }
        }
    }
    Ok((triples, failures))
}

/// Fine-tuning options; deliberately gentle so clean retrieval quality
/// stays put.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FinetuneOpts {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for FinetuneOpts {
    fn default() -> Self {
        FinetuneOpts {
            epochs: 2,
            batch_size: 16,
            lr: 1e-4,
            seed: 41,
        }
    }
}

/// Contrastive fine-tuning where query `i` scores its positive against
/// its own adversarial negative plus the other queries' positives.
/// Returns a new (unfrozen) encoder; the input model is untouched. On
/// divergence the error leaves the caller holding the original.
pub fn finetune_with_negatives(
    encoder: &EncoderModel,
    corpus: &Corpus,
    queries: &[TokenizedDoc],
    triples: &[Triple],
    vocab: &Vocabulary,
    opts: &FinetuneOpts,
) -> Result<EncoderModel> {
    let mut model = encoder.thawed_clone();
    let max_len = model.config().max_len;
    let temperature = model.config().temperature;
    let by_query: std::collections::HashMap<&str, &TokenizedDoc> =
        queries.iter().map(|q| (q.doc_id.as_str(), q)).collect();

    struct Item {
        query: TokenizedDoc,
        positive: TokenizedDoc,
        negative: TokenizedDoc,
    }
    let items: Vec<Item> = triples
        .iter()
        .map(|t| {
            let query = by_query
                .get(t.query_id.as_str())
                .ok_or_else(|| Error::Data(format!("unknown query `{}` in triples", t.query_id)))?;
            let positive = corpus
                .get(&t.pos_id)
                .ok_or_else(|| Error::Data(format!("unknown positive `{}` in triples", t.pos_id)))?;
            Ok(Item {
                query: (*query).clone(),
                positive: positive.clone(),
                negative: tokenize(&t.adv_text, vocab, max_len),
            })
        })
        .collect::<Result<_>>()?;

    let mut adam = AdamState::new(opts.lr, model.params());
    let mut rng = rng_for(opts.seed, "finetune");
    for epoch in 0..opts.epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(opts.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let mut g = Graph::new();
            let bp = model.params().bind(&mut g, true);
            let mut q_rows = Vec::with_capacity(chunk.len());
            let mut p_rows = Vec::with_capacity(chunk.len());
            let mut n_rows = Vec::with_capacity(chunk.len());
            for &i in chunk {
                for (doc, sink) in [
                    (&items[i].query, &mut q_rows),
                    (&items[i].positive, &mut p_rows),
                    (&items[i].negative, &mut n_rows),
                ] {
                    let e = model.forward(&mut g, &bp, &doc.tokens)?;
                    sink.push(g.gather_rows(e, &[0])?);
                }
            }
            let q_raw = g.concat_rows(&q_rows)?;
            let p_raw = g.concat_rows(&p_rows)?;
            let n_raw = g.concat_rows(&n_rows)?;
            let q = g.row_normalize(q_raw)?;
            let p = g.row_normalize(p_raw)?;
            let nm = g.row_normalize(n_raw)?;
            let pt = g.transpose(p)?;
            let pos_scores = g.matmul(q, pt)?; // B x B
            let qn = g.mul(q, nm)?;
            let adv_scores = g.row_sums(qn)?; // [B]: sim(q_i, adv_i)
            let b = chunk.len();
            let adv_col = g.reshape(adv_scores, vec![b, 1])?;
            // B x (B+1): in-batch positives block, then each query's own
            // adversarial negative as the extra column.
            let all = g.concat_cols(&[pos_scores, adv_col])?;
            let scaled = g.scale(all, 1.0 / temperature)?;
            let targets: Vec<(usize, usize)> = (0..b).map(|i| (i, i)).collect();
            let loss = g.cross_entropy_mean(scaled, &targets)?;
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Diverged(format!(
                    "adversarial fine-tuning diverged at epoch {epoch}"
                )));
            }
            let grads = g.backward(loss)?;
            let gvec = bp.collect_grads(&grads, model.params());
            adam.step(model.params_mut(), &gvec)?;
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderConfig, SimKind};

    #[test]
    fn sampled_pairs_are_deterministic_and_relevant() {
        let qrels = Qrels::from_rows(vec![
            ("q1".into(), "d1".into(), 1),
            ("q2".into(), "d2".into(), 1),
        ]);
        let vocab = Vocabulary::from_words(["alpha".to_string()]).unwrap();
        let queries: Vec<TokenizedDoc> = ["q1", "q2"]
            .iter()
            .map(|q| tokenize("alpha", &vocab, 8).with_id(q))
            .collect();
        let a = sample_training_pairs(&queries, &qrels, 5, 3).unwrap();
        let b = sample_training_pairs(&queries, &qrels, 5, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        for (q, d) in &a {
            assert!(qrels.grade(q, d) >= 1);
        }
    }

    #[test]
    fn zero_epoch_finetune_returns_identical_params() {
        let vocab = Vocabulary::from_words((0..10).map(|i| format!("w{i}"))).unwrap();
        let enc = EncoderModel::new(EncoderConfig {
            hidden: 8,
            layers: 1,
            heads: 2,
            ffn_mult: 2,
            max_len: 12,
            vocab_size: vocab.len(),
            sim: SimKind::Dot,
            temperature: 0.05,
            seed: 5,
        })
        .unwrap();
        let raw = vec![
            crate::corpus::RawDoc {
                id: "d1".into(),
                title: String::new(),
                text: "w1 w2".into(),
            },
            crate::corpus::RawDoc {
                id: "d2".into(),
                title: String::new(),
                text: "w3 w4".into(),
            },
        ];
        let corpus = Corpus::from_raw(&raw, &vocab, 12).unwrap();
        let queries: Vec<TokenizedDoc> = ["q1", "q2"]
            .iter()
            .map(|q| tokenize("w1", &vocab, 12).with_id(q))
            .collect();
        let triples = vec![
            Triple {
                query_id: "q1".into(),
                pos_id: "d1".into(),
                adv_text: "w5 w6".into(),
            },
            Triple {
                query_id: "q2".into(),
                pos_id: "d2".into(),
                adv_text: "w7 w8".into(),
            },
        ];
        let opts = FinetuneOpts {
            epochs: 0,
            ..Default::default()
        };
        let tuned = finetune_with_negatives(&enc, &corpus, &queries, &triples, &vocab, &opts).unwrap();
        assert_eq!(
            crate::checkpoint::params_content_hash(tuned.params()),
            crate::checkpoint::params_content_hash(enc.params())
        );
    }
}
