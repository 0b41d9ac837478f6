//! Finite-difference checks for every differentiable op and the
//! composite losses, across 50 seeded trials.

use hemlock_core::corpus::{tokenize, Vocabulary};
use hemlock_core::encoder::{sim_node, EncoderConfig, EncoderModel, SimKind};
use hemlock_core::numerics::gradcheck::check;
use hemlock_core::numerics::{randn_tensor, Graph, NodeId, Tensor};
use hemlock_core::perturber::PerturbationModel;
use hemlock_core::reconstructor::{loss_targets, ReconConfig, ReconstructionModel};
use hemlock_core::seeding::rng_for;
use hemlock_core::Result;

const STEP: f64 = 1e-3;
const TOL: f64 = 1e-4;
const SEEDS: u64 = 50;

fn randn(seed: u64, tag: &str, shape: Vec<usize>) -> Tensor {
    randn_tensor(&mut rng_for(seed, tag), shape, 1.0)
}

/// Positive tensor bounded away from zero (for sqrt/log/div domains).
fn randpos(seed: u64, tag: &str, shape: Vec<usize>) -> Tensor {
    let mut t = randn(seed, tag, shape);
    for v in t.data_mut() {
        *v = 0.25 + v.abs();
    }
    t
}

/// Reduce any output to a scalar through fixed random weights so the
/// whole Jacobian is exercised.
fn weighted_sum(g: &mut Graph, y: NodeId, seed: u64) -> Result<NodeId> {
    let w = randn_tensor(
        &mut rng_for(seed, "probe"),
        g.value(y).shape().to_vec(),
        1.0,
    );
    let wid = g.constant(w);
    let prod = g.mul(y, wid)?;
    g.sum(prod)
}

fn assert_checks<F>(name: &str, f: F)
where
    F: Fn(u64) -> Result<f64>,
{
    for seed in 0..SEEDS {
        let err = f(seed).unwrap_or_else(|e| panic!("{name} seed {seed}: {e}"));
        assert!(err < TOL, "{name} seed {seed}: max rel error {err}");
    }
}

#[test]
fn elementwise_and_arithmetic_ops() {
    assert_checks("add", |s| {
        let f = |g: &mut Graph, xs: &[NodeId]| {
            let y = g.add(xs[0], xs[1])?;
            weighted_sum(g, y, 100)
        };
        check(&f, &[randn(s, "a", vec![3, 4]), randn(s, "b", vec![3, 4])], STEP, None, s)
    });
    assert_checks("sub", |s| {
        let f = |g: &mut Graph, xs: &[NodeId]| {
            let y = g.sub(xs[0], xs[1])?;
            weighted_sum(g, y, 101)
        };
        check(&f, &[randn(s, "a", vec![2, 5]), randn(s, "b", vec![2, 5])], STEP, None, s)
    });
    assert_checks("mul", |s| {
        let f = |g: &mut Graph, xs: &[NodeId]| {
            let y = g.mul(xs[0], xs[1])?;
            weighted_sum(g, y, 102)
        };
        check(&f, &[randn(s, "a", vec![4]), randn(s, "b", vec![4])], STEP, None, s)
    });
    assert_checks("div", |s| {
        let f = |g: &mut Graph, xs: &[NodeId]| {
            let y = g.div(xs[0], xs[1])?;
            weighted_sum(g, y, 103)
        };
        check(&f, &[randn(s, "a", vec![4]), randpos(s, "b", vec![4])], STEP, None, s)
    });
    assert_checks("neg_scale", |s| {
        let f = |g: &mut Graph, xs: &[NodeId]| {
            let y = g.neg(xs[0])?;
            let y = g.scale(y, 1.7)?;
            weighted_sum(g, y, 104)
        };
        check(&f, &[randn(s, "a", vec![6])], STEP, None, s)
    });
}

#[test]
fn nonlinearities() {
    assert_checks("tanh", |s| {
        let f = |g: &mut Graph, xs: &[NodeId]| {
            let y = g.tanh(xs[0])?;
            weighted_sum(g, y, 110)
        };
        check(&f, &[randn(s, "a", vec![3, 3])], STEP, None, s)
    });
    assert_checks("relu", |s| {
        // bound inputs away from the kink at 0
        let f = |g: &mut Graph, xs: &[NodeId]| {
            let y = g.relu(xs[0])?;
            weighted_sum(g, y, 111)
        };
        let mut t = randn(s, "a", vec![3, 3]);
        for v in t.data_mut() {
            if v.abs() < 0.05 {
                *v += 0.1;
            }
        }
        check(&f, &[t], STEP, None, s)
    });
    assert_checks("sqrt", |s| {
        let f = |g: &mut Graph, xs: &[NodeId]| {
            let y = g.sqrt(xs[0])?;
            weighted_sum(g, y, 112)
        };
        check(&f, &[randpos(s, "a", vec![5])], STEP, None, s)
    });
    assert_checks("log", |s| {
        let f = |g: &mut Graph, xs: &[NodeId]| {
            let y = g.log(xs[0])?;
            weighted_sum(g, y, 113)
        };
        check(&f, &[randpos(s, "a", vec![5])], STEP, None, s)
    });
    assert_checks("softmax", |s| {
        let f = |g: &mut Graph, xs: &[NodeId]| {
            let y = g.softmax_last(xs[0])?;
            weighted_sum(g, y, 114)
        };
        check(&f, &[randn(s, "a", vec![3, 6])], STEP, None, s)
    });
    assert_checks("min_const", |s| {
        // keep values away from the clip point
        let f = |g: &mut Graph, xs: &[NodeId]| {
            let y = g.min_const(xs[0], 0.5)?;
            weighted_sum(g, y, 115)
        };
        let mut t = randn(s, "a", vec![6]);
        for v in t.data_mut() {
            if (*v - 0.5).abs() < 0.05 {
                *v += 0.2;
            }
        }
        check(&f, &[t], STEP, None, s)
    });
}

#[test]
fn matrix_ops() {
    assert_checks("matmul", |s| {
        let f = |g: &mut Graph, xs: &[NodeId]| {
            let y = g.matmul(xs[0], xs[1])?;
            weighted_sum(g, y, 120)
        };
        check(&f, &[randn(s, "a", vec![3, 4]), randn(s, "b", vec![4, 2])], STEP, None, s)
    });
    assert_checks("transpose", |s| {
        let f = |g: &mut Graph, xs: &[NodeId]| {
            let y = g.transpose(xs[0])?;
            weighted_sum(g, y, 121)
        };
        check(&f, &[randn(s, "a", vec![3, 5])], STEP, None, s)
    });
    assert_checks("row_broadcast_add", |s| {
        let f = |g: &mut Graph, xs: &[NodeId]| {
            let y = g.row_broadcast_add(xs[0], xs[1])?;
            weighted_sum(g, y, 122)
        };
        check(&f, &[randn(s, "a", vec![4, 3]), randn(s, "b", vec![3])], STEP, None, s)
    });
    assert_checks("layer_norm", |s| {
        let f = |g: &mut Graph, xs: &[NodeId]| {
            let y = g.layer_norm(xs[0], xs[1], xs[2])?;
            weighted_sum(g, y, 123)
        };
        check(
            &f,
            &[
                randn(s, "x", vec![4, 6]),
                randpos(s, "g", vec![6]),
                randn(s, "b", vec![6]),
            ],
            STEP,
            None,
            s,
        )
    });
    assert_checks("attention", |s| {
        let f = |g: &mut Graph, xs: &[NodeId]| {
            let y = g.attention(xs[0], xs[1], xs[2])?;
            weighted_sum(g, y, 124)
        };
        check(
            &f,
            &[
                randn(s, "q", vec![4, 5]),
                randn(s, "k", vec![4, 5]),
                randn(s, "v", vec![4, 3]),
            ],
            STEP,
            None,
            s,
        )
    });
}

#[test]
fn reductions_and_indexing() {
    assert_checks("mean_sum_rowsums", |s| {
        let f = |g: &mut Graph, xs: &[NodeId]| {
            let m = g.mean(xs[0])?;
            let t = g.sum(xs[0])?;
            let rs = g.row_sums(xs[0])?;
            let rsw = weighted_sum(g, rs, 130)?;
            let a = g.add(m, t)?;
            g.add(a, rsw)
        };
        check(&f, &[randn(s, "a", vec![3, 4])], STEP, None, s)
    });
    assert_checks("squared_diff_mean", |s| {
        let f = |g: &mut Graph, xs: &[NodeId]| g.squared_diff_mean(xs[0], xs[1]);
        check(&f, &[randn(s, "a", vec![3, 4]), randn(s, "b", vec![3, 4])], STEP, None, s)
    });
    assert_checks("gather_pick_slice_concat_reshape", |s| {
        let f = |g: &mut Graph, xs: &[NodeId]| {
            let gathered = g.gather_rows(xs[0], &[0, 2, 2, 1])?;
            let picked = g.pick(gathered, &[(0, 1), (2, 3), (3, 0)])?;
            let sliced = g.slice_cols(xs[0], 1, 3)?;
            let cat = g.concat_cols(&[sliced, xs[1]])?;
            let rows = g.concat_rows(&[cat, cat])?;
            let flat = g.reshape(rows, vec![2 * 3 * 4])?;
            let a = weighted_sum(g, picked, 131)?;
            let b = weighted_sum(g, flat, 132)?;
            g.add(a, b)
        };
        check(&f, &[randn(s, "a", vec![3, 4]), randn(s, "b", vec![3, 2])], STEP, None, s)
    });
}

#[test]
fn softmax_cross_entropy_composite_matches_finite_differences() {
    assert_checks("softmax_ce", |s| {
        let f = |g: &mut Graph, xs: &[NodeId]| {
            g.cross_entropy_mean(xs[0], &[(0, 2), (1, 0), (2, 4), (3, 1)])
        };
        check(&f, &[randn(s, "logits", vec![4, 5])], STEP, None, s)
    });
}

#[test]
fn reconstruction_loss_gradient_wrt_embeddings() {
    // Eq.-2-shaped composite: trunk + head + softmax CE, gradient taken
    // with respect to the embedding matrix input.
    let recon = ReconstructionModel::new(ReconConfig {
        hidden: 6,
        layers: 1,
        heads: 2,
        ffn_mult: 2,
        vocab_size: 12,
        seed: 99,
    })
    .unwrap();
    let targets = vec![(0usize, 2usize), (1, 7), (2, 11), (3, 5)];
    assert_checks("rm_loss_wrt_e", |s| {
        let f = |g: &mut Graph, xs: &[NodeId]| {
            let bp = recon.bind(g, false);
            let logits = recon.logits_node(g, &bp, xs[0])?;
            g.cross_entropy_mean(logits, &targets)
        };
        check(&f, &[randn(s, "e", vec![4, 6])], STEP, None, s)
    });
}

#[test]
fn attack_loss_composite_gradient_wrt_phi_params() {
    // Eq.-6-shaped composite: L_MSE - min(L_CE, lambda) differentiated
    // with respect to the perturbation model's own parameters.
    let recon = ReconstructionModel::new(ReconConfig {
        hidden: 6,
        layers: 1,
        heads: 2,
        ffn_mult: 2,
        vocab_size: 10,
        seed: 7,
    })
    .unwrap();
    let e = randn(3, "e", vec![4, 6]);
    let targets = vec![(0usize, 1usize), (1, 6), (2, 3), (3, 9)];
    for seed in 0..SEEDS {
        // Fresh phi with random (non-zero) weights so all layers carry
        // gradient; zero-init output layers would hide w1/w2.
        let mut phi_params: Vec<Tensor> = Vec::new();
        let shapes: Vec<Vec<usize>> = vec![
            vec![6, 24],
            vec![24],
            vec![24, 24],
            vec![24],
            vec![24, 6],
            vec![6],
        ];
        for (i, shape) in shapes.iter().enumerate() {
            phi_params.push(randn_tensor(
                &mut rng_for(seed, &format!("phi{i}")),
                shape.clone(),
                0.3,
            ));
        }
        let f = |g: &mut Graph, xs: &[NodeId]| -> Result<NodeId> {
            let eid = g.constant(e.clone());
            let h1 = g.matmul(eid, xs[0])?;
            let h1 = g.row_broadcast_add(h1, xs[1])?;
            let h1 = g.tanh(h1)?;
            let h2 = g.matmul(h1, xs[2])?;
            let h2 = g.row_broadcast_add(h2, xs[3])?;
            let h2 = g.tanh(h2)?;
            let d = g.matmul(h2, xs[4])?;
            let d = g.row_broadcast_add(d, xs[5])?;
            let p = g.add(eid, d)?;
            let l_mse = g.squared_diff_mean(p, eid)?;
            let bp = recon.bind(g, false);
            let logits = recon.logits_node(g, &bp, p)?;
            let l_ce = g.cross_entropy_mean(logits, &targets)?;
            let clipped = g.min_const(l_ce, 5.0)?;
            g.sub(l_mse, clipped)
        };
        let err = check(&f, &phi_params, STEP, Some(25), seed).unwrap();
        assert!(err < TOL, "attack composite seed {seed}: {err}");
    }
}

#[test]
fn full_encoder_forward_gradient_on_six_token_doc() {
    let vocab = Vocabulary::from_words((0..15).map(|i| format!("w{i}"))).unwrap();
    let enc = EncoderModel::new(EncoderConfig {
        hidden: 8,
        layers: 2,
        heads: 2,
        ffn_mult: 2,
        max_len: 12,
        vocab_size: vocab.len(),
        sim: SimKind::Dot,
        temperature: 0.05,
        seed: 55,
    })
    .unwrap();
    let doc = tokenize("w1 w2 w3 w4", &vocab, 12); // CLS + 4 + SEP = 6 tokens
    assert_eq!(doc.len(), 6);
    let targets = loss_targets(&doc.tokens);
    let _ = targets;
    // Differentiate a weighted sum of the full output wrt the token rows.
    let rows = enc.token_embedding_rows(&doc.tokens).unwrap();
    let f = |g: &mut Graph, xs: &[NodeId]| {
        let bp = enc.bind(g, false);
        let out = enc.forward_from_rows(g, &bp, xs[0], 6)?;
        weighted_sum(g, out, 140)
    };
    let err = check(&f, &[rows], STEP, None, 0).unwrap();
    assert!(err < TOL, "encoder forward: {err}");
}

#[test]
fn similarity_nodes_gradient() {
    for kind in [SimKind::Dot, SimKind::Cosine, SimKind::Euclidean] {
        assert_checks("sim", |s| {
            let f = |g: &mut Graph, xs: &[NodeId]| sim_node(g, xs[0], xs[1], kind);
            check(&f, &[randpos(s, "a", vec![1, 6]), randpos(s, "b", vec![1, 6])], STEP, None, s)
        });
    }
}

#[test]
fn identity_initialized_phi_has_zero_mse_gradient_only_at_output_layer() {
    // Sanity on the zero-init residual: at step 0 the MSE term is 0 and
    // its gradient wrt w1/w2 vanishes (they sit behind the zero output
    // layer), while the CE term still reaches w3/b3.
    let phi = PerturbationModel::new(6, 77);
    let e = randn(1, "e", vec![3, 6]);
    let mut g = Graph::new();
    let bp = phi.bind(&mut g, true);
    let x = g.constant(e);
    let p = phi.forward(&mut g, &bp, x).unwrap();
    let l = g.squared_diff_mean(p, x).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
    let grads = g.backward(l).unwrap();
    let gw1 = grads.get_or_zeros(bp.id("w1"), &[6, 24]);
    assert!(gw1.data().iter().all(|&v| v == 0.0));
}

#[test]
fn row_scale_and_row_normalize_gradients() {
    assert_checks("row_scale", |s| {
        let f = |g: &mut Graph, xs: &[NodeId]| {
            let y = g.row_scale(xs[0], xs[1])?;
            weighted_sum(g, y, 150)
        };
        check(&f, &[randn(s, "a", vec![4, 3]), randpos(s, "v", vec![4])], STEP, None, s)
    });
    assert_checks("row_normalize", |s| {
        let f = |g: &mut Graph, xs: &[NodeId]| {
            let y = g.row_normalize(xs[0])?;
            weighted_sum(g, y, 151)
        };
        check(&f, &[randpos(s, "a", vec![4, 5])], STEP, None, s)
    });
}
