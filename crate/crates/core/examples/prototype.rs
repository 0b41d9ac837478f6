//! End-to-end smoke pipeline at reduced scale; prints the trend metrics.

use std::time::Instant;

use hemlock_core::baselines::{attack_batch, AttackMethod, BaselineConfig};
use hemlock_core::corpus::{gen_synthetic, tokenize, Corpus, Qrels, SyntheticConfig, TokenizedDoc};
use hemlock_core::encoder::{sim, ContrastiveOpts, EncoderConfig, EncoderModel, SimKind};
use hemlock_core::fluency::{NgramLM, DEFAULT_DISCOUNT};
use hemlock_core::index::{asr, mean_ndcg_at_10, top_at_k, RetrievalIndex, DEFAULT_RETRIEVAL_DEPTH};
use hemlock_core::perturber::AttackConfig;
use hemlock_core::reconstructor::{
    argmax_tokens, eval_classification, ReconConfig, ReconTrainOpts, ReconstructionModel,
};
use hemlock_core::seeding::rng_for;
use rand::seq::SliceRandom;
use rand::Rng;

fn main() {
    let t0 = Instant::now();
    let syn_cfg = SyntheticConfig {
        n_topics: 8,
        docs_per_topic: 60,
        queries_per_topic: 12,
        topic_pool: 40,
        background_pool: 120,
        vocab_max: 600,
        seed: 13,
        ..Default::default()
    };
    let data = gen_synthetic(&syn_cfg).unwrap();
    let vocab = data.vocabulary().unwrap();
    let corpus = Corpus::from_raw(&data.docs, &vocab, 128).unwrap();
    println!(
        "[{:6.1}s] corpus: {} docs, vocab {}, {} train / {} test queries",
        t0.elapsed().as_secs_f64(),
        corpus.len(),
        vocab.len(),
        data.train_query_ids.len(),
        data.test_query_ids.len()
    );

    let tok_queries: Vec<TokenizedDoc> = data
        .queries
        .iter()
        .map(|q| tokenize(&q.text, &vocab, 128).with_id(&q.id))
        .collect();
    let train_queries: Vec<TokenizedDoc> = tok_queries
        .iter()
        .filter(|q| data.train_query_ids.contains(&q.doc_id))
        .cloned()
        .collect();
    let test_queries: Vec<TokenizedDoc> = tok_queries
        .iter()
        .filter(|q| data.test_query_ids.contains(&q.doc_id))
        .cloned()
        .collect();
    let train_qrels = Qrels::from_rows(data.train_qrels.clone());
    let test_qrels = Qrels::from_rows(data.test_qrels.clone());

    // ── encoder ────────────────────────────────────────────────────────
    let mut encoder = EncoderModel::new(EncoderConfig::desk_default(vocab.len(), 17)).unwrap();
    let report = encoder
        .train_contrastive(&corpus, &train_queries, &train_qrels, &ContrastiveOpts::default())
        .unwrap();
    encoder.freeze();
    println!(
        "[{:6.1}s] encoder losses: first {:.3} last {:.3} (ln batch = {:.3})",
        t0.elapsed().as_secs_f64(),
        report.epoch_losses[0],
        report.epoch_losses.last().unwrap(),
        (64f64).ln()
    );

    // positive-pair vs random-pair similarity on held-out queries
    let mut rng = rng_for(99, "eval");
    let mut pos_sims = Vec::new();
    let mut rand_sims = Vec::new();
    for q in &test_queries {
        let qe = encoder.encode(q).unwrap();
        let rel = test_qrels.relevant(&q.doc_id);
        let (d, _) = &rel[rng.random_range(0..rel.len())];
        let de = encoder.encode(corpus.get(d).unwrap()).unwrap();
        pos_sims.push(sim(qe.cls(), de.cls(), SimKind::Dot));
        let other = &corpus.docs()[rng.random_range(0..corpus.len())];
        let oe = encoder.encode(other).unwrap();
        if test_qrels.grade(&q.doc_id, &other.doc_id) == 0 {
            rand_sims.push(sim(qe.cls(), oe.cls(), SimKind::Dot));
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!(
        "[{:6.1}s] pos-pair sim {:.3} vs random-pair {:.3}",
        t0.elapsed().as_secs_f64(),
        mean(&pos_sims),
        mean(&rand_sims)
    );

    let clean_index = RetrievalIndex::build(corpus.docs(), &encoder).unwrap();
    let clean_rankings = clean_index
        .rank_all(&encoder, &test_queries, DEFAULT_RETRIEVAL_DEPTH)
        .unwrap();
    println!(
        "[{:6.1}s] clean nDCG@10 = {:?}",
        t0.elapsed().as_secs_f64(),
        mean_ndcg_at_10(&clean_rankings, &test_qrels)
    );

    // ── reconstructor ──────────────────────────────────────────────────
    let holdout = corpus.len() / 20;
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut rng_for(7, "split"));
    let train_docs: Vec<TokenizedDoc> = order[holdout..]
        .iter()
        .map(|&i| corpus.docs()[i].clone())
        .collect();
    let held_docs: Vec<TokenizedDoc> = order[..holdout]
        .iter()
        .map(|&i| corpus.docs()[i].clone())
        .collect();
    let mut recon =
        ReconstructionModel::new(ReconConfig::desk_default(64, vocab.len(), 23)).unwrap();
    let rep = recon
        .train(&train_docs, &encoder, &ReconTrainOpts::default())
        .unwrap();
    recon.freeze();
    let preds: Vec<Vec<u32>> = held_docs
        .iter()
        .map(|d| argmax_tokens(&recon.reconstruct_logits(&encoder.encode(d).unwrap()).unwrap()))
        .collect();
    let golds: Vec<Vec<u32>> = held_docs.iter().map(|d| d.tokens.clone()).collect();
    let cls = eval_classification(&preds, &golds).unwrap();
    println!(
        "[{:6.1}s] recon losses {:.3} -> {:.3}; held-out acc {:.4} macroF1 {:.4}",
        t0.elapsed().as_secs_f64(),
        rep.epoch_losses[0],
        rep.epoch_losses.last().unwrap(),
        cls.accuracy,
        cls.macro_f1
    );

    // ── language model ─────────────────────────────────────────────────
    let lm = NgramLM::train(corpus.docs(), &vocab, 128, DEFAULT_DISCOUNT).unwrap();
    let clean_ppls: Vec<f64> = held_docs.iter().map(|d| lm.perplexity_doc(d)).collect();
    println!(
        "[{:6.1}s] clean median ppl {:.1}",
        t0.elapsed().as_secs_f64(),
        median(clean_ppls.clone())
    );

    // ── top-1 attack ───────────────────────────────────────────────────
    let mut sampled = test_queries.clone();
    sampled.shuffle(&mut rng);
    sampled.truncate(12);
    let mut target_ids: Vec<String> = sampled
        .iter()
        .map(|q| {
            clean_index
                .search_query(&encoder, q, DEFAULT_RETRIEVAL_DEPTH)
                .unwrap()
                .top1()
                .unwrap()
                .doc_id
                .clone()
        })
        .collect();
    target_ids.sort();
    target_ids.dedup();
    let targets: Vec<TokenizedDoc> = target_ids
        .iter()
        .map(|id| corpus.get(id).unwrap().clone())
        .collect();
    println!(
        "[{:6.1}s] {} sampled queries -> {} unique targets",
        t0.elapsed().as_secs_f64(),
        sampled.len(),
        targets.len()
    );

    let attack_cfg = AttackConfig::default();
    let baseline_cfg = BaselineConfig::default();
    for method in AttackMethod::ALL {
        let t_m = Instant::now();
        let outcome = attack_batch(
            method,
            &targets,
            &encoder,
            &recon,
            &vocab,
            &attack_cfg,
            &baseline_cfg,
            1,
        );
        let adv_docs: Vec<TokenizedDoc> = outcome
            .records
            .iter()
            .map(|r| r.adv_doc(&vocab, 128))
            .collect();
        let injected = clean_index.inject(&adv_docs, &encoder).unwrap();
        let rankings = injected
            .rank_all(&encoder, &sampled, DEFAULT_RETRIEVAL_DEPTH)
            .unwrap();
        let ppls: Vec<f64> = outcome
            .records
            .iter()
            .map(|r| lm.perplexity(&r.adv_text, &vocab))
            .collect();
        let bleus: Vec<f64> = outcome.records.iter().map(|r| r.bleu).collect();
        let overlaps: Vec<f64> = outcome.records.iter().map(|r| r.overlap).collect();
        let secs: Vec<f64> = outcome.records.iter().map(|r| r.seconds).collect();
        let sims: Vec<f64> = outcome.records.iter().map(|r| r.sim_cls).collect();
        println!(
            "[{:6.1}s] {:13} asr {:5.3?} top10 {:.3} top50 {:.3} | bleu {:.3} ovl {:.3} | med-ppl {:8.1} | sim {:7.2} | {:.2}s/doc (batch {:.1}s)",
            t0.elapsed().as_secs_f64(),
            method.to_string(),
            asr(&rankings, &test_qrels),
            top_at_k(&rankings, 10),
            top_at_k(&rankings, 50),
            mean(&bleus),
            mean(&overlaps),
            median(ppls),
            mean(&sims),
            mean(&secs),
            t_m.elapsed().as_secs_f64(),
        );
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    }
}
