//! The per-document perturbation model and the adversarial generation
//! loop: optimize `L_MSE - min(L_CE, lambda)` so the perturbed
//! embeddings stay geometrically close to the original while decoding
//! to different tokens.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, TokenizedDoc, Vocabulary};
use crate::encoder::{sim, EmbeddingMatrix, EncoderModel, SimKind};
use crate::error::{Error, Result};
use crate::fluency::{bleu, token_overlap};
use crate::numerics::{AdamState, BoundParams, Graph, NodeId, ParamSet, Tensor};
use crate::reconstructor::{
    decode_argmax, loss_targets, rm_loss, ReconstructionModel, TokenDistribution,
};
use crate::seeding::{derive_seed, rng_for};

/// Per-token-row residual MLP (hidden -> 4*hidden -> 4*hidden -> hidden).
/// The output layer starts at zero, so the model is the identity map at
/// step 0 and the search begins at the embedding-similarity optimum.
#[derive(Clone, Debug)]
pub struct PerturbationModel {
    params: ParamSet,
}

impl PerturbationModel {
    pub fn new(hidden: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, "perturber-init");
        let wide = 4 * hidden;
        let mut params = ParamSet::new();
        let std1 = 1.0 / (hidden as f64).sqrt();
        let std2 = 1.0 / (wide as f64).sqrt();
        params.add("w1", crate::numerics::randn_tensor(&mut rng, vec![hidden, wide], std1));
        params.add("b1", Tensor::zeros(vec![wide]));
        params.add("w2", crate::numerics::randn_tensor(&mut rng, vec![wide, wide], std2));
        params.add("b2", Tensor::zeros(vec![wide]));
        params.add("w3", Tensor::zeros(vec![wide, hidden]));
        params.add("b3", Tensor::zeros(vec![hidden]));
        PerturbationModel { params }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        self.params.bind(g, trainable)
    }

    pub fn forward(&self, g: &mut Graph, bp: &BoundParams, x: NodeId) -> Result<NodeId> {
        let h1 = g.matmul(x, bp.id("w1"))?;
        let h1 = g.row_broadcast_add(h1, bp.id("b1"))?;
        let h1 = g.tanh(h1)?;
        let h2 = g.matmul(h1, bp.id("w2"))?;
        let h2 = g.row_broadcast_add(h2, bp.id("b2"))?;
        let h2 = g.tanh(h2)?;
        let delta = g.matmul(h2, bp.id("w3"))?;
        let delta = g.row_broadcast_add(delta, bp.id("b3"))?;
        g.add(x, delta)
    }

    /// Apply the model outside any training graph.
    pub fn perturb(&self, e: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
        let mut g = Graph::new();
        let bp = self.bind(&mut g, false);
        let x = g.constant(e.tensor().clone());
        let out = self.forward(&mut g, &bp, x)?;
        EmbeddingMatrix::new(g.value(out).clone())
    }
}

/// Attack hyperparameters. Defaults: lambda 5, 3000 epochs, learning
/// rate 5e-4.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Clip value for the cross-entropy term; larger values push for
    /// smaller token overlap.
    pub lambda: f64,
    pub epochs: usize,
    pub lr: f64,
    pub sim: SimKind,
    /// Loss-trace sampling period.
    pub log_every: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            lambda: 5.0,
            epochs: 3000,
            lr: 5e-4,
            sim: SimKind::Dot,
            log_every: 50,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda <= 0.0 {
            return Err(Error::Config(format!("lambda must be > 0, got {}", self.lambda)));
        }
        if self.epochs < 1 {
            return Err(Error::Config("attack epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// One sampled point of the attack loss trace.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TracePoint {
    pub epoch: usize,
    pub l_mse: f64,
    pub l_ce: f64,
    pub l_attack: f64,
}

/// One target document's attack outcome. Serialized rows carry exactly
/// the summary fields; the loss trace stays in memory for diagnostics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttackRecord {
    pub target_id: String,
    pub adv_text: String,
    /// Similarity of the re-encoded adversarial document's CLS row to
    /// the original document's, under the configured similarity.
    pub sim_cls: f64,
    pub bleu: f64,
    pub overlap: f64,
    pub l_mse: Option<f64>,
    pub l_ce: Option<f64>,
    pub l_attack: Option<f64>,
    pub seconds: f64,
    pub method: String,
    /// Perplexity under the in-repo language model, attached by the
    /// fluency stage when available.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ppl: Option<f64>,
    #[serde(skip)]
    pub trace: Vec<TracePoint>,
}

impl AttackRecord {
    /// The injectable adversarial document: the emitted text re-enters
    /// the standard tokenize pipeline, exactly like a document crawled
    /// from the web.
    pub fn adv_doc(&self, vocab: &Vocabulary, max_len: usize) -> TokenizedDoc {
        tokenize(&self.adv_text, vocab, max_len)
            .with_id(&format!("adv::{}::{}", self.method, self.target_id))
    }
}

/// Mean squared difference of two same-shaped embedding matrices.
pub fn mse_loss(perturbed: &EmbeddingMatrix, original: &EmbeddingMatrix) -> Result<f64> {
    if perturbed.tensor().shape() != original.tensor().shape() {
        return Err(Error::ShapeMismatch {
            op: "mse_loss",
            left: perturbed.tensor().shape().to_vec(),
            right: original.tensor().shape().to_vec(),
        });
    }
    let n = perturbed.tensor().numel() as f64;
    let s: f64 = perturbed
        .tensor()
        .data()
        .iter()
        .zip(original.tensor().data())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    Ok(s / n)
}

/// Token-level cross-entropy of a distribution against the original
/// document: identical arithmetic to the reconstruction loss, used with
/// opposite sign inside the attack objective.
pub fn ce_loss(dist: &TokenDistribution, original: &TokenizedDoc) -> Result<f64> {
    rm_loss(dist, original)
}

/// `L_MSE - min(L_CE, lambda)`.
pub fn attack_loss(l_mse: f64, l_ce: f64, lambda: f64) -> f64 {
    l_mse - l_ce.min(lambda)
}

/// Optimize a fresh perturbation model against one target document and
/// decode the adversarial text. The encoder and reconstructor must be
/// frozen; only the perturbation model's parameters change.
pub fn attack_document(
    doc: &TokenizedDoc,
    encoder: &EncoderModel,
    recon: &ReconstructionModel,
    vocab: &Vocabulary,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<AttackRecord> {
    cfg.validate()?;
    if !encoder.frozen() || !recon.frozen() {
        return Err(Error::Config(
            "attack_document requires frozen encoder and reconstructor".into(),
        ));
    }
    let started = Instant::now();
    let e_d = encoder.encode(doc)?;
    let mut phi = PerturbationModel::new(
        encoder.config().hidden,
        derive_seed(seed, &format!("attack:{}", doc.doc_id)),
    );
    let mut adam = AdamState::new(cfg.lr, &phi.params);
    let targets = loss_targets(&doc.tokens);
    let mut trace = Vec::new();
    let mut final_losses = (0.0, 0.0, 0.0);

    for epoch in 0..cfg.epochs {
        let mut g = Graph::new();
        let bp_phi = phi.bind(&mut g, true);
        let bp_r = recon.bind(&mut g, false);
        let e = g.constant(e_d.tensor().clone());
        let p = phi.forward(&mut g, &bp_phi, e)?;
        let l_mse = g.squared_diff_mean(p, e)?;
        let logits = recon.logits_node(&mut g, &bp_r, p)?;
        let l_ce = g.cross_entropy_mean(logits, &targets)?;
        let clipped = g.min_const(l_ce, cfg.lambda)?;
        let l_attack = g.sub(l_mse, clipped)?;

        let (mv, cv, av) = (
            g.value(l_mse).item(),
            g.value(l_ce).item(),
            g.value(l_attack).item(),
        );
        if !av.is_finite() {
            return Err(Error::Diverged(format!(
                "attack loss non-finite at epoch {epoch} for target {}",
                doc.doc_id
            )));
        }
        final_losses = (mv, cv, av);
        if epoch % cfg.log_every == 0 || epoch + 1 == cfg.epochs {
            trace.push(TracePoint {
                epoch,
                l_mse: mv,
                l_ce: cv,
                l_attack: av,
            });
        }

        let grads = g.backward(l_attack)?;
        let gvec = bp_phi.collect_grads(&grads, &phi.params);
        adam.step(&mut phi.params, &gvec)?;
    }

    // Decode the final perturbed embeddings.
    let perturbed = phi.perturb(&e_d)?;
    let dist = recon.reconstruct_logits(&perturbed)?;
    let adv_tokens = decode_argmax(&dist);
    let adv_text = crate::corpus::detokenize(&adv_tokens, vocab);

    let mut record = finish_record(
        doc,
        adv_text,
        "ours",
        Some(final_losses),
        started,
        encoder,
        vocab,
        cfg.sim,
    )?;
    record.trace = trace;
    Ok(record)
}

/// Shared record assembly: re-tokenize and re-encode the adversarial
/// text, then measure similarity, overlap and BLEU against the target.
#[allow(clippy::too_many_arguments)]
pub(crate) fn finish_record(
    doc: &TokenizedDoc,
    adv_text: String,
    method: &str,
    losses: Option<(f64, f64, f64)>,
    started: Instant,
    encoder: &EncoderModel,
    vocab: &Vocabulary,
    sim_kind: SimKind,
) -> Result<AttackRecord> {
    let max_len = encoder.config().max_len;
    let adv_doc = tokenize(&adv_text, vocab, max_len);
    let adv_emb = encoder.encode(&adv_doc)?;
    let orig_emb = encoder.encode(doc)?;
    let sim_cls = sim(adv_emb.cls(), orig_emb.cls(), sim_kind);
    let overlap = token_overlap(doc, &adv_doc);
    let bleu_score = bleu(&adv_text, &doc.text);
    Ok(AttackRecord {
        target_id: doc.doc_id.clone(),
        adv_text,
        sim_cls,
        bleu: bleu_score,
        overlap,
        l_mse: losses.map(|l| l.0),
        l_ce: losses.map(|l| l.1),
        l_attack: losses.map(|l| l.2),
        seconds: started.elapsed().as_secs_f64(),
        method: method.to_string(),
        ppl: None,
        trace: Vec::new(),
    })
}
