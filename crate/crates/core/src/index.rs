//! Exact-scoring retrieval index over [CLS] embeddings, adversarial
//! injection, and the ranking metrics nDCG@10, ASR and Top@k.
//!
//! Injection appends re-encoded adversarial rows to a new snapshot;
//! original rows are never replaced. Retrieval depth for attack metrics
//! defaults to [`DEFAULT_RETRIEVAL_DEPTH`].

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::TokenizedDoc;
use crate::encoder::{sim, EncoderModel, SimKind};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Ranking depth used when computing ASR; recorded in run manifests.
pub const DEFAULT_RETRIEVAL_DEPTH: usize = 100;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Hit {
    pub doc_id: String,
    pub score: f64,
    pub adversarial: bool,
}

/// Descending-score ranking for one query, cut at `cutoff`. Score ties
/// break lexicographically by doc id.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: String,
    pub hits: Vec<Hit>,
    pub cutoff: usize,
}

impl RankedList {
    pub fn top1(&self) -> Option<&Hit> {
        self.hits.first()
    }
}

/// Immutable snapshot of encoded corpus CLS vectors.
#[derive(Clone, Debug)]
pub struct RetrievalIndex {
    doc_ids: Vec<String>,
    hidden: usize,
    data: Vec<f64>, // row-major (n x hidden)
    sim: SimKind,
    adversarial: Vec<bool>,
}

impl RetrievalIndex {
    /// Encode every document and store its CLS row. Deterministic in
    /// corpus order.
    pub fn build(docs: &[TokenizedDoc], encoder: &EncoderModel) -> Result<Self> {
        let hidden = encoder.config().hidden;
        let mut data = Vec::with_capacity(docs.len() * hidden);
        let mut doc_ids = Vec::with_capacity(docs.len());
        for d in docs {
            let e = encoder.encode(d)?;
            data.extend_from_slice(e.cls());
            doc_ids.push(d.doc_id.clone());
        }
        Ok(RetrievalIndex {
            doc_ids,
            hidden,
            data,
            sim: encoder.config().sim,
            adversarial: vec![false; docs.len()],
        })
    }

    /// New snapshot with re-encoded adversarial rows appended and
    /// flagged; existing rows are untouched.
    pub fn inject(&self, adv_docs: &[TokenizedDoc], encoder: &EncoderModel) -> Result<Self> {
        let mut out = self.clone();
        for d in adv_docs {
            let e = encoder.encode(d)?;
            out.data.extend_from_slice(e.cls());
            out.doc_ids.push(d.doc_id.clone());
            out.adversarial.push(true);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn sim_kind(&self) -> SimKind {
        self.sim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.hidden..(i + 1) * self.hidden]
    }

    pub fn is_adversarial(&self, i: usize) -> bool {
        self.adversarial[i]
    }

    /// CLS rows as a matrix, e.g. for clustering.
    pub fn embedding_matrix(&self) -> Tensor {
        Tensor::matrix(self.len(), self.hidden, self.data.clone()).expect("consistent dims")
    }

    /// Exact top-k scoring of a query CLS vector against every row.
    pub fn search(&self, query_id: &str, query_cls: &[f64], k: usize) -> RankedList {
        let mut hits: Vec<Hit> = (0..self.len())
            .map(|i| Hit {
                doc_id: self.doc_ids[i].clone(),
                score: sim(query_cls, self.row(i), self.sim),
                adversarial: self.adversarial[i],
            })
            .collect();
        hits.sort_unstable_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| a.doc_id.cmp(&b.doc_id))
        });
        hits.truncate(k);
        RankedList {
            query_id: query_id.to_string(),
            hits,
            cutoff: k,
        }
    }

    pub fn search_query(
        &self,
        encoder: &EncoderModel,
        query: &TokenizedDoc,
        k: usize,
    ) -> Result<RankedList> {
        let e = encoder.encode(query)?;
        Ok(self.search(&query.doc_id, e.cls(), k))
    }

    pub fn rank_all(
        &self,
        encoder: &EncoderModel,
        queries: &[TokenizedDoc],
        k: usize,
    ) -> Result<Vec<RankedList>> {
        queries.iter().map(|q| self.search_query(encoder, q, k)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "index",
            "doc_ids": self.doc_ids,
            "adversarial": self.adversarial,
            "sim": self.sim,
            "hidden": self.hidden,
        });
        let emb = Tensor::matrix(self.len(), self.hidden, self.data.clone())
            .expect("consistent dims");
        crate::checkpoint::write_checkpoint(path, &meta, &[("cls_embeddings", &emb)])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, arrays) = crate::checkpoint::read_checkpoint(path)?;
        if meta["kind"] != "index" {
            return Err(Error::Format {
                path: path.display().to_string(),
                detail: "expected an index checkpoint".into(),
            });
        }
        let doc_ids: Vec<String> = serde_json::from_value(meta["doc_ids"].clone())?;
        let adversarial: Vec<bool> = serde_json::from_value(meta["adversarial"].clone())?;
        let sim: SimKind = serde_json::from_value(meta["sim"].clone())?;
        let hidden = meta["hidden"].as_u64().unwrap_or(0) as usize;
        let emb = &arrays
            .iter()
            .find(|(n, _)| n == "cls_embeddings")
            .ok_or_else(|| Error::Format {
                path: path.display().to_string(),
                detail: "missing cls_embeddings array".into(),
            })?
            .1;
        Ok(RetrievalIndex {
            doc_ids,
            hidden,
            data: emb.data().to_vec(),
            sim,
            adversarial,
        })
    }
}

// ── Ranking metrics ─────────────────────────────────────────────────────

use crate::corpus::Qrels;

/// nDCG@k for one ranking: gain `2^rel - 1`, discount `1/log2(rank+1)`,
/// normalized by the ideal DCG@k. Returns `None` when the query has no
/// relevant documents at all (skipped in aggregation).
pub fn ndcg_at_k(ranking: &RankedList, qrels: &Qrels, k: usize) -> Option<f64> {
    let mut grades: Vec<u32> = qrels
        .relevant(&ranking.query_id)
        .iter()
        .map(|&(_, g)| g)
        .filter(|&g| g > 0)
        .collect();
    if grades.is_empty() {
        return None;
    }
    grades.sort_unstable_by(|a, b| b.cmp(a));
    let ideal: f64 = grades
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &g)| gain(g) / discount(i))
        .sum();
    let actual: f64 = ranking
        .hits
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, h)| {
            let g = if h.adversarial { 0 } else { qrels.grade(&ranking.query_id, &h.doc_id) };
            gain(g) / discount(i)
        })
        .sum();
    Some(actual / ideal)
}

fn gain(rel: u32) -> f64 {
    2f64.powi(rel as i32) - 1.0
}

fn discount(rank0: usize) -> f64 {
    ((rank0 + 2) as f64).log2()
}

/// Mean nDCG@10 over rankings whose queries have relevant documents.
pub fn mean_ndcg_at_10(rankings: &[RankedList], qrels: &Qrels) -> Option<f64> {
    let vals: Vec<f64> = rankings
        .iter()
        .filter_map(|r| ndcg_at_k(r, qrels, 10))
        .collect();
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Attack success rate: the fraction of rankings containing an
/// adversarial document that strictly outscores the lowest-scoring
/// retrieved relevant document. Rankings that retrieved no relevant
/// document are excluded; an empty denominator is undefined.
pub fn asr(rankings: &[RankedList], qrels: &Qrels) -> Option<f64> {
    let mut attacked = 0usize;
    let mut denom = 0usize;
    for r in rankings {
        let min_relevant = r
            .hits
            .iter()
            .filter(|h| !h.adversarial && qrels.grade(&r.query_id, &h.doc_id) >= 1)
            .map(|h| h.score)
            .fold(None, |acc: Option<f64>, s| {
                Some(acc.map_or(s, |a| a.min(s)))
            });
        let Some(min_relevant) = min_relevant else {
            continue;
        };
        denom += 1;
        if r.hits.iter().any(|h| h.adversarial && h.score > min_relevant) {
            attacked += 1;
        }
    }
    if denom == 0 {
        None
    } else {
        Some(attacked as f64 / denom as f64)
    }
}

/// Fraction of rankings with at least one adversarial document in the
/// top k.
pub fn top_at_k(rankings: &[RankedList], k: usize) -> f64 {
    if rankings.is_empty() {
        return 0.0;
    }
    let hit = rankings
        .iter()
        .filter(|r| r.hits.iter().take(k).any(|h| h.adversarial))
        .count();
    hit as f64 / rankings.len() as f64
}

/// TREC run lines: `qid Q0 docid rank score tag`.
pub fn trec_run(rankings: &[RankedList], tag: &str) -> String {
    let mut out = String::new();
    for r in rankings {
        for (i, h) in r.hits.iter().enumerate() {
            out.push_str(&format!(
                "{} Q0 {} {} {:.6} {}\n",
                r.query_id,
                h.doc_id,
                i + 1,
                h.score,
                tag
            ));
        }
    }
    out
}
