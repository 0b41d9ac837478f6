//! Corpus poisoning: cluster the corpus embeddings, attack the document
//! nearest each centroid, inject the results, and evaluate over all
//! test queries.

use std::collections::HashSet;

use rand::Rng;
use serde::Serialize;

use crate::baselines::{attack_batch, AttackMethod, BaselineConfig};
use crate::corpus::{Corpus, Qrels, TokenizedDoc, Vocabulary};
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::index::{asr, top_at_k, RetrievalIndex, DEFAULT_RETRIEVAL_DEPTH};
use crate::numerics::{linalg, Tensor};
use crate::perturber::AttackConfig;
use crate::reconstructor::ReconstructionModel;
use crate::seeding::{derive_seed, rng_for};

const MAX_ITERATIONS: usize = 100;
const SHIFT_TOLERANCE: f64 = 1e-4;

/// Lloyd clustering outcome.
#[derive(Clone, Debug)]
pub struct Clustering {
    pub k: usize,
    /// `k x hidden`, row-major.
    pub centroids: Vec<f64>,
    pub hidden: usize,
    pub assignment: Vec<usize>,
    /// Sum of squared distances to assigned centroids, per iteration
    /// (computed after each assignment step).
    pub inertia_trace: Vec<f64>,
    pub iterations: usize,
}

impl Clustering {
    pub fn inertia(&self) -> f64 {
        *self.inertia_trace.last().expect("at least one iteration")
    }

    pub fn centroid(&self, c: usize) -> &[f64] {
        &self.centroids[c * self.hidden..(c + 1) * self.hidden]
    }
}

/// Seeded k-means++ initialization followed by Lloyd iterations on
/// Euclidean distance. Stops after 100 iterations or when no centroid
/// moves more than 1e-4. An emptied cluster is re-seeded at the point
/// farthest from its assigned centroid.
pub fn kmeans(rows: &Tensor, k: usize, seed: u64) -> Result<Clustering> {
    let n = rows.rows();
    let h = rows.cols();
    if k == 0 || k > n {
        return Err(Error::Config(format!("k={k} out of range for {n} rows")));
    }
    let distinct: HashSet<Vec<u64>> = (0..n)
        .map(|i| rows.row(i).iter().map(|v| v.to_bits()).collect())
        .collect();
    if k > distinct.len() {
        return Err(Error::Config(format!(
            "k={k} exceeds the {} distinct rows",
            distinct.len()
        )));
    }

    let mut rng = rng_for(seed, "kmeans");
    // k-means++ seeding: each next center sampled proportionally to the
    // squared distance to the nearest chosen center.
    let mut centroids: Vec<f64> = Vec::with_capacity(k * h);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(rows.row(first));
    let mut min_d2: Vec<f64> = (0..n)
        .map(|i| linalg::squared_distance(rows.row(i), rows.row(first)))
        .collect();
    while centroids.len() < k * h {
        let total: f64 = min_d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in min_d2.iter().enumerate() {
                target -= d;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            // all mass at zero distance cannot happen with k <= distinct rows
            return Err(Error::Data("kmeans++ ran out of distinct rows".into()));
        };
        centroids.extend_from_slice(rows.row(pick));
        let c = centroids.len() / h - 1;
        for i in 0..n {
            let d = linalg::squared_distance(rows.row(i), &centroids[c * h..(c + 1) * h]);
            if d < min_d2[i] {
                min_d2[i] = d;
            }
        }
    }

    let mut assignment = vec![0usize; n];
    let mut inertia_trace = Vec::new();
    let mut iterations = 0usize;
    for _ in 0..MAX_ITERATIONS {
        iterations += 1;
        // Assignment step (ties toward the lower centroid index).
        let mut inertia = 0.0;
        for i in 0..n {
            let mut best = (f64::INFINITY, 0usize);
            for c in 0..k {
                let d = linalg::squared_distance(rows.row(i), &centroids[c * h..(c + 1) * h]);
                if d < best.0 {
                    best = (d, c);
                }
            }
            assignment[i] = best.1;
            inertia += best.0;
        }
        inertia_trace.push(inertia);

        // Update step.
        let mut sums = vec![0.0; k * h];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = assignment[i];
            counts[c] += 1;
            linalg::axpy(1.0, rows.row(i), &mut sums[c * h..(c + 1) * h]);
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                // Re-seed at the point farthest from its assigned centroid.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = linalg::squared_distance(
                            rows.row(a),
                            &centroids[assignment[a] * h..(assignment[a] + 1) * h],
                        );
                        let db = linalg::squared_distance(
                            rows.row(b),
                            &centroids[assignment[b] * h..(assignment[b] + 1) * h],
                        );
                        da.total_cmp(&db).then_with(|| b.cmp(&a))
                    })
                    .expect("non-empty data");
                for j in 0..h {
                    centroids[c * h + j] = rows.row(far)[j];
                }
                shift = f64::INFINITY;
                continue;
            }
            let inv = 1.0 / counts[c] as f64;
            let mut c_shift = 0.0;
            for j in 0..h {
                let new = sums[c * h + j] * inv;
                let d = new - centroids[c * h + j];
                c_shift += d * d;
                centroids[c * h + j] = new;
            }
            shift = shift.max(c_shift.sqrt());
        }
        if shift < SHIFT_TOLERANCE {
            break;
        }
    }

    Ok(Clustering {
        k,
        centroids,
        hidden: h,
        assignment,
        inertia_trace,
        iterations,
    })
}

/// Per cluster, the member document closest to the centroid; distance
/// ties break toward the lexicographically smaller doc id.
pub fn select_targets(
    clustering: &Clustering,
    rows: &Tensor,
    doc_ids: &[String],
) -> Result<Vec<String>> {
    let mut out = Vec::with_capacity(clustering.k);
    for c in 0..clustering.k {
        let mut best: Option<(f64, &str)> = None;
        for (i, id) in doc_ids.iter().enumerate() {
            if clustering.assignment[i] != c {
                continue;
            }
            let d = linalg::squared_distance(rows.row(i), clustering.centroid(c));
            let better = match best {
                None => true,
                Some((bd, bid)) => d < bd || (d == bd && id.as_str() < bid),
            };
            if better {
                best = Some((d, id));
            }
        }
        let (_, id) = best.ok_or_else(|| Error::Data(format!("cluster {c} is empty")))?;
        out.push(id.to_string());
    }
    Ok(out)
}

/// The centroid-nearest targets selected for one injection budget.
#[derive(Clone, Debug, Serialize)]
pub struct PoisonPlan {
    pub fraction: f64,
    pub k: usize,
    pub target_ids: Vec<String>,
}

/// One evaluation row of a poisoning run; `k` is the achieved number of
/// injected documents.
#[derive(Clone, Debug, Serialize)]
pub struct PoisonRow {
    pub method: String,
    pub fraction: f64,
    pub k: usize,
    pub asr: Option<f64>,
    pub top10: f64,
    pub top50: f64,
    pub seed: u64,
}

/// For each budget fraction: cluster the clean index, attack the
/// centroid-nearest document of every cluster, inject all adversarial
/// documents, and evaluate over all test queries. Fractions are
/// re-clustered independently.
#[allow(clippy::too_many_arguments)]
pub fn poison_corpus(
    corpus: &Corpus,
    test_queries: &[TokenizedDoc],
    qrels: &Qrels,
    encoder: &EncoderModel,
    recon: &ReconstructionModel,
    vocab: &Vocabulary,
    method: AttackMethod,
    fractions: &[f64],
    attack: &AttackConfig,
    baseline: &BaselineConfig,
    seed: u64,
) -> Result<Vec<PoisonRow>> {
    let clean = RetrievalIndex::build(corpus.docs(), encoder)?;
    let rows = clean.embedding_matrix();
    let max_len = encoder.config().max_len;
    let mut out = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        let k = ((fraction * corpus.len() as f64).round() as usize).max(1);
        let clustering = kmeans(&rows, k, derive_seed(seed, &format!("kmeans:{fraction}")))?;
        let target_ids = select_targets(&clustering, &rows, clean.doc_ids())?;
        let targets: Vec<TokenizedDoc> = target_ids
            .iter()
            .map(|id| {
                corpus
                    .get(id)
                    .cloned()
                    .ok_or_else(|| Error::Data(format!("target `{id}` missing from corpus")))
            })
            .collect::<Result<_>>()?;
        let outcome = attack_batch(method, &targets, encoder, recon, vocab, attack, baseline, seed);
        let adv_docs: Vec<TokenizedDoc> = outcome
            .records
            .iter()
            .map(|r| r.adv_doc(vocab, max_len))
            .collect();
        let poisoned = clean.inject(&adv_docs, encoder)?;
        let rankings = poisoned.rank_all(encoder, test_queries, DEFAULT_RETRIEVAL_DEPTH)?;
        out.push(PoisonRow {
            method: method.to_string(),
            fraction,
            k: outcome.records.len(),
            asr: asr(&rankings, qrels),
            top10: top_at_k(&rankings, 10),
            top50: top_at_k(&rankings, 50),
            seed,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::randn_tensor;
    use crate::seeding::rng_for;

    #[test]
    fn k1_centroid_is_the_column_mean() {
        let rows = randn_tensor(&mut rng_for(1, "km"), vec![40, 6], 1.0);
        let c = kmeans(&rows, 1, 7).unwrap();
        for j in 0..6 {
            let mean: f64 = (0..40).map(|i| rows.row(i)[j]).sum::<f64>() / 40.0;
            assert!((c.centroid(0)[j] - mean).abs() < 1e-9);
        }
    }

    #[test]
    fn k_equals_distinct_rows_gives_zero_inertia() {
        let data = vec![
            0.0, 0.0, //
            1.0, 0.0, //
            0.0, 1.0, //
            5.0, 5.0,
        ];
        let rows = Tensor::matrix(4, 2, data).unwrap();
        let c = kmeans(&rows, 4, 3).unwrap();
        assert!(c.inertia() < 1e-12);
    }

    #[test]
    fn inertia_is_non_increasing_over_iterations() {
        for seed in 0..5 {
            let rows = randn_tensor(&mut rng_for(seed, "km2"), vec![120, 8], 1.0);
            let c = kmeans(&rows, 6, seed).unwrap();
            for w in c.inertia_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "seed {seed}: {:?}", c.inertia_trace);
            }
        }
    }

    #[test]
    fn k_larger_than_distinct_rows_is_rejected() {
        let rows = Tensor::matrix(3, 2, vec![1.0, 1.0, 1.0, 1.0, 2.0, 2.0]).unwrap();
        assert!(kmeans(&rows, 3, 0).is_err());
        assert!(kmeans(&rows, 2, 0).is_ok());
    }

    #[test]
    fn kmeans_is_seed_deterministic() {
        let rows = randn_tensor(&mut rng_for(2, "km3"), vec![50, 4], 1.0);
        let a = kmeans(&rows, 5, 9).unwrap();
        let b = kmeans(&rows, 5, 9).unwrap();
        assert_eq!(a.assignment, b.assignment);
        assert_eq!(a.centroids, b.centroids);
    }

    #[test]
    fn select_targets_singleton_and_tie_break() {
        // cluster 0: one point; cluster 1: two points symmetric about the centroid
        let rows = Tensor::matrix(3, 1, vec![10.0, 0.0, 2.0]).unwrap();
        let clustering = Clustering {
            k: 2,
            centroids: vec![10.0, 1.0],
            hidden: 1,
            assignment: vec![0, 1, 1],
            inertia_trace: vec![2.0],
            iterations: 1,
        };
        let ids = vec!["zz".to_string(), "bb".to_string(), "aa".to_string()];
        let targets = select_targets(&clustering, &rows, &ids).unwrap();
        assert_eq!(targets[0], "zz"); // singleton cluster: its only member
        assert_eq!(targets[1], "aa"); // symmetric pair: lexicographically smaller id
    }

    #[test]
    fn select_targets_matches_brute_force_scan() {
        let rows = randn_tensor(&mut rng_for(3, "km4"), vec![100, 5], 1.0);
        let ids: Vec<String> = (0..100).map(|i| format!("d{i:03}")).collect();
        let c = kmeans(&rows, 4, 21).unwrap();
        let targets = select_targets(&c, &rows, &ids).unwrap();
        for cluster in 0..4 {
            let best = (0..100)
                .filter(|&i| c.assignment[i] == cluster)
                .min_by(|&a, &b| {
                    linalg::squared_distance(rows.row(a), c.centroid(cluster))
                        .total_cmp(&linalg::squared_distance(rows.row(b), c.centroid(cluster)))
                        .then_with(|| ids[a].cmp(&ids[b]))
                })
                .unwrap();
            assert_eq!(targets[cluster], ids[best]);
        }
    }
}
