//! The reconstruction model: recovers token identities from contextual
//! token-level embeddings, so that documents can be decoded back out of
//! a (possibly perturbed) embedding matrix.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{doc_from_tokens, TokenizedDoc, Vocabulary, CLS, PAD, SEP};
use crate::encoder::{EmbeddingMatrix, EncoderModel};
use crate::error::{Error, Result};
use crate::numerics::{AdamState, BoundParams, Graph, NodeId, ParamSet, Tensor, LOG_FLOOR};
use crate::seeding::rng_for;
use crate::transformer::{forward_stack, init_stack, StackConfig};

/// Reconstruction trunk + classification head hyperparameters. The
/// trunk input width must equal the encoder's hidden size.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReconConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl ReconConfig {
    pub fn desk_default(hidden: usize, vocab_size: usize, seed: u64) -> Self {
        ReconConfig {
            hidden,
            layers: 2,
            heads: 2,
            ffn_mult: 4,
            vocab_size,
            seed,
        }
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

/// Per-position probability rows over the vocabulary.
#[derive(Clone, Debug)]
pub struct TokenDistribution(Tensor);

impl TokenDistribution {
    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn classes(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// Training options for the reconstructor. The desk laboratory trains
/// from random initialization, so the learning rate sits well above the
/// fine-tuning rates used with large pretrained trunks.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReconTrainOpts {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ReconTrainOpts {
    fn default() -> Self {
        ReconTrainOpts {
            epochs: 5,
            batch_size: 8,
            lr: 1e-3,
            seed: 23,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ReconTrainReport {
    pub epoch_losses: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Token-level multi-class quality of reconstructed documents.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

#[derive(Clone, Debug)]
pub struct ReconstructionModel {
    config: ReconConfig,
    params: ParamSet,
    frozen: bool,
}

impl ReconstructionModel {
    pub fn new(config: ReconConfig) -> Result<Self> {
        if config.hidden % config.heads != 0 {
            return Err(Error::Config(format!(
                "hidden {} not divisible by heads {}",
                config.hidden, config.heads
            )));
        }
        let mut rng = rng_for(config.seed, "recon-init");
        let mut params = ParamSet::new();
        init_stack(&mut params, "", &config.stack(), &mut rng);
        let std = 1.0 / (config.hidden as f64).sqrt();
        params.add(
            "head_w",
            crate::numerics::randn_tensor(&mut rng, vec![config.hidden, config.vocab_size], std),
        );
        params.add("head_b", Tensor::zeros(vec![config.vocab_size]));
        Ok(ReconstructionModel {
            config,
            params,
            frozen: false,
        })
    }

    pub fn config(&self) -> &ReconConfig {
        &self.config
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

    /// Per-position vocabulary logits for an embedding-matrix node.
    pub fn logits_node(&self, g: &mut Graph, bp: &BoundParams, e: NodeId) -> Result<NodeId> {
        if g.value(e).cols() != self.config.hidden {
            return Err(Error::ShapeMismatch {
                op: "reconstruct_logits",
                left: g.value(e).shape().to_vec(),
                right: vec![self.config.hidden],
            });
        }
        let trunk = forward_stack(g, bp, "", &self.config.stack(), e)?;
        let hw = g.matmul(trunk, bp.id("head_w"))?;
        g.row_broadcast_add(hw, bp.id("head_b"))
    }

    /// Softmax-normalized token distribution for an embedding matrix.
    pub fn reconstruct_logits(&self, e: &EmbeddingMatrix) -> Result<TokenDistribution> {
        let mut g = Graph::new();
        let bp = self.params.bind(&mut g, false);
        let eid = g.constant(e.tensor().clone());
        let logits = self.logits_node(&mut g, &bp, eid)?;
        let probs = g.softmax_last(logits)?;
        Ok(TokenDistribution(g.value(probs).clone()))
    }

    /// Train against a frozen encoder by minimizing mean token-level
    /// cross-entropy over the corpus. Loss increase after the first
    /// epoch is reported as a warning; NaN aborts.
    pub fn train(
        &mut self,
        docs: &[TokenizedDoc],
        encoder: &EncoderModel,
        opts: &ReconTrainOpts,
    ) -> Result<ReconTrainReport> {
        if !encoder.frozen() {
            return Err(Error::Config(
                "reconstructor training requires a frozen encoder".into(),
            ));
        }
        if self.frozen {
            return Err(Error::Config("cannot train a frozen reconstructor".into()));
        }
        // The encoder never changes during this loop; encode once.
        let embeddings: Vec<EmbeddingMatrix> = docs
            .iter()
            .map(|d| encoder.encode(d))
            .collect::<Result<_>>()?;

        let mut adam = AdamState::new(opts.lr, &self.params);
        let mut rng = rng_for(opts.seed, "recon-train");
        let mut report = ReconTrainReport {
            epoch_losses: Vec::with_capacity(opts.epochs),
            warnings: Vec::new(),
        };
        for epoch in 0..opts.epochs {
            let mut order: Vec<usize> = (0..docs.len()).collect();
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            let mut seen = 0usize;
            for chunk in order.chunks(opts.batch_size) {
                let mut grad_sum: Option<Vec<Tensor>> = None;
                for &i in chunk {
                    let mut g = Graph::new();
                    let bp = self.params.bind(&mut g, true);
                    let e = g.constant(embeddings[i].tensor().clone());
                    let logits = self.logits_node(&mut g, &bp, e)?;
                    let targets = loss_targets(&docs[i].tokens);
                    let loss = g.cross_entropy_mean(logits, &targets)?;
                    let lv = g.value(loss).item();
                    if !lv.is_finite() {
                        return Err(Error::Diverged(format!(
                            "reconstruction loss became non-finite at epoch {epoch}, doc {}",
                            docs[i].doc_id
                        )));
                    }
                    epoch_loss += lv;
                    seen += 1;
                    let grads = g.backward(loss)?;
                    let gvec = bp.collect_grads(&grads, &self.params);
                    match &mut grad_sum {
                        None => grad_sum = Some(gvec),
                        Some(acc) => {
                            for (a, b) in acc.iter_mut().zip(&gvec) {
                                crate::numerics::linalg::axpy(1.0, b.data(), a.data_mut());
                            }
                        }
                    }
                }
                if let Some(mut acc) = grad_sum {
                    let scale = 1.0 / chunk.len() as f64;
                    for t in &mut acc {
                        t.data_mut().iter_mut().for_each(|v| *v *= scale);
                    }
                    adam.step(&mut self.params, &acc)?;
                }
            }
            let mean = epoch_loss / seen.max(1) as f64;
            if epoch >= 1 && mean > report.epoch_losses[0] {
                let w = format!(
                    "epoch {epoch} mean loss {mean:.4} above initial {:.4}",
                    report.epoch_losses[0]
                );
                eprintln!("warning: reconstruction training: {w}");
                report.warnings.push(w);
            }
            report.epoch_losses.push(mean);
        }
        Ok(report)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "reconstructor",
            "config": self.config,
            "frozen": self.frozen,
        });
        crate::checkpoint::save_params(path, &meta, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, params) = crate::checkpoint::load_params(path)?;
        if meta["kind"] != "reconstructor" {
            return Err(Error::Format {
                path: path.display().to_string(),
                detail: format!("expected a reconstructor checkpoint, got {}", meta["kind"]),
            });
        }
        let config: ReconConfig = serde_json::from_value(meta["config"].clone())?;
        Ok(ReconstructionModel {
            config,
            params,
            frozen: meta["frozen"].as_bool().unwrap_or(false),
        })
    }

    pub fn content_hash(&self) -> String {
        crate::checkpoint::params_content_hash(&self.params)
    }
}

/// Cross-entropy targets for a token sequence: every non-PAD position
/// paired with its token id.
pub fn loss_targets(tokens: &[u32]) -> Vec<(usize, usize)> {
    tokens
        .iter()
        .enumerate()
        .filter(|&(_, &t)| t != PAD)
        .map(|(i, &t)| (i, t as usize))
        .collect()
}

/// Mean over non-PAD positions of `-log p(target token)`, probabilities
/// floored so the result stays finite.
pub fn rm_loss(dist: &TokenDistribution, target: &TokenizedDoc) -> Result<f64> {
    if dist.rows() != target.tokens.len() {
        return Err(Error::ShapeMismatch {
            op: "rm_loss",
            left: vec![dist.rows(), dist.classes()],
            right: vec![target.tokens.len()],
        });
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for (i, &t) in target.tokens.iter().enumerate() {
        if t == PAD {
            continue;
        }
        total -= dist.row(i)[t as usize].max(LOG_FLOOR).ln();
        n += 1;
    }
    Ok(total / n.max(1) as f64)
}

/// Per-position argmax with ties broken toward the lowest token id.
pub fn argmax_tokens(dist: &TokenDistribution) -> Vec<u32> {
    (0..dist.rows())
        .map(|i| {
            let row = dist.row(i);
            let mut best = 0usize;
            for (j, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = j;
                }
            }
            best as u32
        })
        .collect()
}

/// Argmax decoding with the CLS/SEP frame forced back onto the first
/// and last positions, keeping decoded documents well-formed.
pub fn decode_argmax(dist: &TokenDistribution) -> Vec<u32> {
    let mut tokens = argmax_tokens(dist);
    if let Some(first) = tokens.first_mut() {
        *first = CLS;
    }
    if let Some(last) = tokens.last_mut() {
        *last = SEP;
    }
    tokens
}

/// Decode straight to a [`TokenizedDoc`] with rendered text.
pub fn decode_to_doc(
    dist: &TokenDistribution,
    vocab: &Vocabulary,
    doc_id: &str,
) -> TokenizedDoc {
    doc_from_tokens(doc_id, decode_argmax(dist), vocab)
}

/// Token-level multi-class metrics. Macro averages run over the classes
/// present in gold or predicted tokens; a class with an empty
/// denominator contributes zero precision/recall.
pub fn eval_classification(pred: &[Vec<u32>], gold: &[Vec<u32>]) -> Result<ClassificationReport> {
    if pred.len() != gold.len() {
        return Err(Error::Data(format!(
            "eval_classification: {} predictions vs {} golds",
            pred.len(),
            gold.len()
        )));
    }
    let mut tp: std::collections::HashMap<u32, u64> = Default::default();
    let mut fp: std::collections::HashMap<u32, u64> = Default::default();
    let mut fn_: std::collections::HashMap<u32, u64> = Default::default();
    let mut classes: BTreeSet<u32> = BTreeSet::new();
    let (mut correct, mut total) = (0u64, 0u64);
    for (p, g) in pred.iter().zip(gold) {
        if p.len() != g.len() {
            return Err(Error::Data(format!(
                "eval_classification: length mismatch {} vs {}",
                p.len(),
                g.len()
            )));
        }
        for (&pt, &gt) in p.iter().zip(g) {
            classes.insert(pt);
            classes.insert(gt);
            total += 1;
            if pt == gt {
                correct += 1;
                *tp.entry(gt).or_insert(0) += 1;
            } else {
                *fp.entry(pt).or_insert(0) += 1;
                *fn_.entry(gt).or_insert(0) += 1;
            }
        }
    }
    let (mut psum, mut rsum, mut fsum) = (0.0, 0.0, 0.0);
    for &c in &classes {
        let tp_c = *tp.get(&c).unwrap_or(&0) as f64;
        let fp_c = *fp.get(&c).unwrap_or(&0) as f64;
        let fn_c = *fn_.get(&c).unwrap_or(&0) as f64;
        let p = if tp_c + fp_c > 0.0 { tp_c / (tp_c + fp_c) } else { 0.0 };
        let r = if tp_c + fn_c > 0.0 { tp_c / (tp_c + fn_c) } else { 0.0 };
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        psum += p;
        rsum += r;
        fsum += f;
    }
    let k = classes.len().max(1) as f64;
    Ok(ClassificationReport {
        accuracy: if total > 0 { correct as f64 / total as f64 } else { 0.0 },
        macro_precision: psum / k,
        macro_recall: rsum / k,
        macro_f1: fsum / k,
    })
}

/// Raw argmax reconstruction of a batch of documents under a frozen
/// encoder/reconstructor pair.
pub fn reconstruct_tokens(
    docs: &[TokenizedDoc],
    encoder: &EncoderModel,
    recon: &ReconstructionModel,
) -> Result<Vec<Vec<u32>>> {
    docs.iter()
        .map(|d| {
            let e = encoder.encode(d)?;
            let dist = recon.reconstruct_logits(&e)?;
            Ok(argmax_tokens(&dist))
        })
        .collect()
}
