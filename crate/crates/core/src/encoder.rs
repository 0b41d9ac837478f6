//! The retrieval encoder: a small transformer producing token-level
//! embeddings, with [CLS]-pooled document scoring and contrastive
//! training. Frozen after training; attacks never modify it.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Qrels, TokenizedDoc};
use crate::error::{Error, Result};
use crate::numerics::{AdamState, BoundParams, Graph, NodeId, ParamSet, Tensor};
use crate::seeding::rng_for;
use crate::transformer::{forward_stack, init_stack, StackConfig};

/// Similarity used to score CLS embeddings. Euclidean distance is
/// negated so that larger is always better.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimKind {
    Dot,
    Cosine,
    Euclidean,
}

impl FromStr for SimKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dot" => Ok(SimKind::Dot),
            "cosine" => Ok(SimKind::Cosine),
            "euclidean" => Ok(SimKind::Euclidean),
            other => Err(Error::Config(format!(
                "unknown similarity `{other}` (expected dot, cosine or euclidean)"
            ))),
        }
    }
}

impl fmt::Display for SimKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SimKind::Dot => "dot",
            SimKind::Cosine => "cosine",
            SimKind::Euclidean => "euclidean",
        })
    }
}

/// Similarity of two document embeddings. A zero vector under cosine
/// scores 0 by convention.
pub fn sim(a: &[f64], b: &[f64], kind: SimKind) -> f64 {
    use crate::numerics::linalg;
    match kind {
        SimKind::Dot => linalg::dot(a, b),
        SimKind::Cosine => {
            let (na, nb) = (linalg::norm(a), linalg::norm(b));
            if na == 0.0 || nb == 0.0 {
                0.0
            } else {
                linalg::dot(a, b) / (na * nb)
            }
        }
        SimKind::Euclidean => -linalg::squared_distance(a, b).sqrt(),
    }
}

/// Differentiable similarity of two `1 x hidden` CLS rows.
pub fn sim_node(g: &mut Graph, a: NodeId, b: NodeId, kind: SimKind) -> Result<NodeId> {
    let dot = |g: &mut Graph, x: NodeId, y: NodeId| -> Result<NodeId> {
        let m = g.mul(x, y)?;
        g.sum(m)
    };
    match kind {
        SimKind::Dot => dot(g, a, b),
        SimKind::Cosine => {
            let ab = dot(g, a, b)?;
            let aa = dot(g, a, a)?;
            let bb = dot(g, b, b)?;
            let na = g.sqrt(aa)?;
            let nb = g.sqrt(bb)?;
            let denom = g.mul(na, nb)?;
            g.div(ab, denom)
        }
        SimKind::Euclidean => {
            let d = g.sub(a, b)?;
            let dd = dot(g, d, d)?;
            let n = g.sqrt(dd)?;
            g.neg(n)
        }
    }
}

/// Encoder hyperparameters. Desk defaults are sized for a single CPU;
/// full-scale reference values (hidden 768, batch 128 x 4 GPUs) are far
/// beyond what this laboratory needs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub sim: SimKind,
    pub temperature: f64,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn desk_default(vocab_size: usize, seed: u64) -> Self {
        EncoderConfig {
            hidden: 64,
            layers: 2,
            heads: 2,
            ffn_mult: 4,
            max_len: 128,
            vocab_size,
            sim: SimKind::Dot,
            temperature: 0.05,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.vocab_size < 6 {
            return Err(Error::Config("vocab_size must be at least 6".into()));
        }
        Ok(())
    }

    fn stack(&self) -> StackConfig {
        StackConfig {
            hidden: self.hidden,
            layers: self.layers,
            heads: self.heads,
            ffn_mult: self.ffn_mult,
        }
    }
}

/// Token-level contextual embeddings `e_d` of one document; row 0 is the
/// [CLS] embedding used for scoring.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix(Tensor);

impl EmbeddingMatrix {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.shape().len() != 2 {
            return Err(Error::Data(format!(
                "embedding matrix must be rank 2, got {:?}",
                t.shape()
            )));
        }
        if !t.all_finite() {
            return Err(Error::NonFinite { op: "embedding" });
        }
        Ok(EmbeddingMatrix(t))
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn hidden(&self) -> usize {
        self.0.cols()
    }

    pub fn cls(&self) -> &[f64] {
        self.0.row(0)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor {
        &mut self.0
    }
}

/// Weight-shared query/document encoder.
#[derive(Clone, Debug)]
pub struct EncoderModel {
    config: EncoderConfig,
    params: ParamSet,
    frozen: bool,
}

/// Per-epoch mean losses from contrastive training.
#[derive(Clone, Debug, Serialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
}

/// Options for contrastive training.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ContrastiveOpts {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ContrastiveOpts {
    fn default() -> Self {
        ContrastiveOpts {
            epochs: 10,
            batch_size: 64,
            lr: 1e-3,
            seed: 17,
        }
    }
}

impl EncoderModel {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(config.seed, "encoder-init");
        let mut params = ParamSet::new();
        let h = config.hidden;
        let std = 1.0 / (h as f64).sqrt();
        params.add(
            "tok_emb",
            crate::numerics::randn_tensor(&mut rng, vec![config.vocab_size, h], std),
        );
        params.add(
            "pos_emb",
            crate::numerics::randn_tensor(&mut rng, vec![config.max_len, h], std),
        );
        params.add("emb_ln_g", Tensor::new(vec![h], vec![1.0; h]).unwrap());
        params.add("emb_ln_b", Tensor::zeros(vec![h]));
        init_stack(&mut params, "", &config.stack(), &mut rng);
        Ok(EncoderModel {
            config,
            params,
            frozen: false,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Trainable copy for adversarial fine-tuning; the original stays
    /// frozen.
    pub(crate) fn thawed_clone(&self) -> EncoderModel {
        let mut m = self.clone();
        m.frozen = false;
        m
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        self.params.bind(g, trainable && !self.frozen)
    }

    /// Forward pass over token ids; output is `|d| x hidden`.
    pub fn forward(&self, g: &mut Graph, bp: &BoundParams, tokens: &[u32]) -> Result<NodeId> {
        if tokens.len() > self.config.max_len {
            return Err(Error::Data(format!(
                "document of {} tokens exceeds max_len {}",
                tokens.len(),
                self.config.max_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Data(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.config.vocab_size
            )));
        }
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let te = g.gather_rows(bp.id("tok_emb"), &ids)?;
        self.embed_rows(g, bp, te, tokens.len())
    }

    /// Forward pass from pre-gathered token-embedding rows. Position
    /// embeddings are added inside; used by gradient-guided token
    /// substitution, which differentiates with respect to these rows.
    pub fn forward_from_rows(
        &self,
        g: &mut Graph,
        bp: &BoundParams,
        rows: NodeId,
        len: usize,
    ) -> Result<NodeId> {
        self.embed_rows(g, bp, rows, len)
    }

    fn embed_rows(
        &self,
        g: &mut Graph,
        bp: &BoundParams,
        te: NodeId,
        len: usize,
    ) -> Result<NodeId> {
        let positions: Vec<usize> = (0..len).collect();
        let pe = g.gather_rows(bp.id("pos_emb"), &positions)?;
        let sum = g.add(te, pe)?;
        let x = g.layer_norm(sum, bp.id("emb_ln_g"), bp.id("emb_ln_b"))?;
        forward_stack(g, bp, "", &self.config.stack(), x)
    }

    /// Encode a document to its token-level embedding matrix. Pure
    /// function of (doc, weights).
    pub fn encode(&self, doc: &TokenizedDoc) -> Result<EmbeddingMatrix> {
        self.encode_tokens(&doc.tokens)
    }

    /// Encode a raw token sequence.
    pub fn encode_tokens(&self, tokens: &[u32]) -> Result<EmbeddingMatrix> {
        let mut g = Graph::new();
        let bp = self.params.bind(&mut g, false);
        let out = self.forward(&mut g, &bp, tokens)?;
        EmbeddingMatrix::new(g.value(out).clone())
    }

    /// The token embedding table (`vocab_size x hidden`).
    pub fn embedding_table(&self) -> &Tensor {
        self.params.get("tok_emb").expect("tok_emb exists")
    }

    /// Token-embedding rows for a token sequence, as a plain tensor.
    pub fn token_embedding_rows(&self, tokens: &[u32]) -> Result<Tensor> {
        let table = self.params.get("tok_emb").expect("tok_emb exists");
        let h = self.config.hidden;
        let mut data = Vec::with_capacity(tokens.len() * h);
        for &t in tokens {
            if t as usize >= self.config.vocab_size {
                return Err(Error::Data(format!("token id {t} out of range")));
            }
            data.extend_from_slice(table.row(t as usize));
        }
        Tensor::matrix(tokens.len(), h, data)
    }

    /// InfoNCE training over in-batch negatives: each query's sampled
    /// positive is scored against every other positive in the batch with
    /// cosine scores at temperature tau (raw dot products of layer-normed
    /// vectors at tau = 0.05 would saturate the softmax). The similarity
    /// kind from the config applies at retrieval time.
    pub fn train_contrastive(
        &mut self,
        corpus: &Corpus,
        queries: &[TokenizedDoc],
        qrels: &Qrels,
        opts: &ContrastiveOpts,
    ) -> Result<TrainReport> {
        if self.frozen {
            return Err(Error::Config("cannot train a frozen encoder".into()));
        }
        for q in queries {
            if qrels.relevant(&q.doc_id).iter().all(|&(_, g)| g == 0) {
                return Err(Error::Data(format!(
                    "training query `{}` has no relevant document",
                    q.doc_id
                )));
            }
        }
        let mut adam = AdamState::new(opts.lr, &self.params);
        let mut rng = rng_for(opts.seed, "contrastive");
        let mut report = TrainReport {
            epoch_losses: Vec::with_capacity(opts.epochs),
        };
        for epoch in 0..opts.epochs {
            let mut order: Vec<usize> = (0..queries.len()).collect();
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            let mut batches = 0usize;
            for chunk in order.chunks(opts.batch_size) {
                if chunk.len() < 2 {
                    continue; // in-batch negatives need at least two pairs
                }
                let batch: Vec<&TokenizedDoc> = chunk.iter().map(|&i| &queries[i]).collect();
                let positives: Vec<&TokenizedDoc> = batch
                    .iter()
                    .map(|q| {
                        let rel = qrels.relevant(&q.doc_id);
                        let pick = loop {
                            let cand = &rel[rng.random_range(0..rel.len())];
                            if cand.1 > 0 {
                                break cand.0.as_str();
                            }
                        };
                        corpus.get(pick).ok_or_else(|| {
                            Error::Data(format!("qrels positive `{pick}` missing from corpus"))
                        })
                    })
                    .collect::<Result<_>>()?;

                let mut g = Graph::new();
                let bp = self.params.bind(&mut g, true);
                let q_cls = self.encode_cls_batch(&mut g, &bp, &batch)?;
                let d_cls = self.encode_cls_batch(&mut g, &bp, &positives)?;
                let qn = g.row_normalize(q_cls)?;
                let dn = g.row_normalize(d_cls)?;
                let dt = g.transpose(dn)?;
                let scores = g.matmul(qn, dt)?;
                let scaled = g.scale(scores, 1.0 / self.config.temperature)?;
                let targets: Vec<(usize, usize)> = (0..batch.len()).map(|i| (i, i)).collect();
                let loss = g.cross_entropy_mean(scaled, &targets)?;
                let loss_val = g.value(loss).item();
                if !loss_val.is_finite() {
                    return Err(Error::Diverged(format!(
                        "contrastive loss became non-finite at epoch {epoch}, batch {batches}"
                    )));
                }
                epoch_loss += loss_val;
                batches += 1;
                let grads = g.backward(loss)?;
                let gvec = bp.collect_grads(&grads, &self.params);
                adam.step(&mut self.params, &gvec)?;
            }
            report.epoch_losses.push(epoch_loss / batches.max(1) as f64);
        }
        Ok(report)
    }

    fn encode_cls_batch(
        &self,
        g: &mut Graph,
        bp: &BoundParams,
        docs: &[&TokenizedDoc],
    ) -> Result<NodeId> {
        let mut cls_rows = Vec::with_capacity(docs.len());
        for doc in docs {
            let e = self.forward(g, bp, &doc.tokens)?;
            cls_rows.push(g.gather_rows(e, &[0])?);
        }
        g.concat_rows(&cls_rows)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "encoder",
            "config": self.config,
            "frozen": self.frozen,
        });
        crate::checkpoint::save_params(path, &meta, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, params) = crate::checkpoint::load_params(path)?;
        if meta["kind"] != "encoder" {
            return Err(Error::Format {
                path: path.display().to_string(),
                detail: format!("expected an encoder checkpoint, got {}", meta["kind"]),
            });
        }
        let config: EncoderConfig = serde_json::from_value(meta["config"].clone())?;
        config.validate()?;
        Ok(EncoderModel {
            config,
            params,
            frozen: meta["frozen"].as_bool().unwrap_or(false),
        })
    }

    /// Content hash over all parameters; frozen models must keep this
    /// stable across attacks.
    pub fn content_hash(&self) -> String {
        crate::checkpoint::params_content_hash(&self.params)
    }
}
