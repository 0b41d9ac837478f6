//! Transformer encoder layer stack shared by the retrieval encoder and
//! the reconstruction trunk.
//!
//! Post-norm layers: multi-head scaled dot-product attention and a ReLU
//! feed-forward block, each wrapped in residual + layer norm.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numerics::{randn_tensor, BoundParams, Graph, NodeId, ParamSet, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct StackConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
}

/// Register one stack's parameters under `prefix` (for example `l0.wq`).
pub fn init_stack(params: &mut ParamSet, prefix: &str, cfg: &StackConfig, rng: &mut ChaCha8Rng) {
    let h = cfg.hidden;
    let ffn = cfg.ffn_mult * h;
    let w_std = 1.0 / (h as f64).sqrt();
    let f_std = 1.0 / (ffn as f64).sqrt();
    for l in 0..cfg.layers {
        let p = |name: &str| format!("{prefix}l{l}.{name}");
        for proj in ["wq", "wk", "wv", "wo"] {
            params.add(&p(proj), randn_tensor(rng, vec![h, h], w_std));
        }
        for bias in ["bq", "bk", "bv", "bo"] {
            params.add(&p(bias), Tensor::zeros(vec![h]));
        }
        params.add(&p("ln1_g"), Tensor::new(vec![h], vec![1.0; h]).unwrap());
        params.add(&p("ln1_b"), Tensor::zeros(vec![h]));
        params.add(&p("wf1"), randn_tensor(rng, vec![h, ffn], w_std));
        params.add(&p("bf1"), Tensor::zeros(vec![ffn]));
        params.add(&p("wf2"), randn_tensor(rng, vec![ffn, h], f_std));
        params.add(&p("bf2"), Tensor::zeros(vec![h]));
        params.add(&p("ln2_g"), Tensor::new(vec![h], vec![1.0; h]).unwrap());
        params.add(&p("ln2_b"), Tensor::zeros(vec![h]));
    }
}

/// Run the stack on `x` (`seq_len x hidden`).
pub fn forward_stack(
    g: &mut Graph,
    bp: &BoundParams,
    prefix: &str,
    cfg: &StackConfig,
    mut x: NodeId,
) -> Result<NodeId> {
    let dh = cfg.hidden / cfg.heads;
    for l in 0..cfg.layers {
        let p = |name: &str| format!("{prefix}l{l}.{name}");
        let project = |g: &mut Graph, x: NodeId, w: &str, b: &str| -> Result<NodeId> {
            let xw = g.matmul(x, bp.id(&p(w)))?;
            g.row_broadcast_add(xw, bp.id(&p(b)))
        };
        let q = project(g, x, "wq", "bq")?;
        let k = project(g, x, "wk", "bk")?;
        let v = project(g, x, "wv", "bv")?;
        let mut heads = Vec::with_capacity(cfg.heads);
        for hix in 0..cfg.heads {
            let (lo, hi) = (hix * dh, (hix + 1) * dh);
            let qh = g.slice_cols(q, lo, hi)?;
            let kh = g.slice_cols(k, lo, hi)?;
            let vh = g.slice_cols(v, lo, hi)?;
            heads.push(g.attention(qh, kh, vh)?);
        }
        let cat = g.concat_cols(&heads)?;
        let att = project(g, cat, "wo", "bo")?;
        let res1 = g.add(x, att)?;
        x = g.layer_norm(res1, bp.id(&p("ln1_g")), bp.id(&p("ln1_b")))?;

        let f1 = project(g, x, "wf1", "bf1")?;
        let f1a = g.tanh(f1)?;
        let f2w = g.matmul(f1a, bp.id(&p("wf2")))?;
        let f2 = g.row_broadcast_add(f2w, bp.id(&p("bf2")))?;
        let res2 = g.add(x, f2)?;
        x = g.layer_norm(res2, bp.id(&p("ln2_g")), bp.id(&p("ln2_b")))?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_for;

    #[test]
    fn stack_preserves_shape_and_is_deterministic() {
        let cfg = StackConfig {
            hidden: 8,
            layers: 2,
            heads: 2,
            ffn_mult: 4,
        };
        let mut params = ParamSet::new();
        init_stack(&mut params, "t.", &cfg, &mut rng_for(3, "stack"));
        let x = randn_tensor(&mut rng_for(4, "x"), vec![5, 8], 1.0);

        let run = |x: &Tensor| {
            let mut g = Graph::new();
            let bp = params.bind(&mut g, false);
            let xid = g.constant(x.clone());
            let out = forward_stack(&mut g, &bp, "t.", &cfg, xid).unwrap();
            g.value(out).clone()
        };
        let a = run(&x);
        let b = run(&x);
        assert_eq!(a.shape(), &[5, 8]);
        assert_eq!(a.data(), b.data());
    }
}
