//! Dense-tensor math with reverse-mode differentiation and the transformer
//! building blocks used by the masked generative model.

pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;
pub mod tensor;

pub use gradcheck::gradcheck;
pub use graph::{Gradients, Graph, NodeId};
pub use optim::{cosine_lr, AdamW};
pub use params::ParamSet;
pub use tensor::Tensor;

use rand::Rng;

use crate::error::{Error, Result};

/// Parameter indices for one attention module.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
}

/// Parameter indices for one pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub ln1_gain: usize,
    pub ln1_bias: usize,
    pub attn: AttentionParams,
    pub ln2_gain: usize,
    pub ln2_bias: usize,
    pub mlp_w1: usize,
    pub mlp_b1: usize,
    pub mlp_w2: usize,
    pub mlp_b2: usize,
}

/// x W + b.
pub fn linear(g: &mut Graph, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

/// Standard scaled dot-product attention per head, concatenated and
/// output-projected. Queries, keys and values may come from different
/// sequences; self-attention passes the same node three times.
pub fn multi_head_attention(
    g: &mut Graph,
    q_in: NodeId,
    k_in: NodeId,
    v_in: NodeId,
    ap: &AttentionParams,
    n_heads: usize,
) -> Result<NodeId> {
    let d = g.value(q_in).cols();
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::Config(format!(
            "model dim {} not divisible by {} heads",
            d, n_heads
        )));
    }
    let dh = d / n_heads;
    let (wq, bq) = (g.param(ap.wq), g.param(ap.bq));
    let (wk, bk) = (g.param(ap.wk), g.param(ap.bk));
    let (wv, bv) = (g.param(ap.wv), g.param(ap.bv));
    let q = linear(g, q_in, wq, bq)?;
    let k = linear(g, k_in, wk, bk)?;
    let v = linear(g, v_in, wv, bv)?;
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = g.slice_cols(q, h * dh, dh);
        let kh = g.slice_cols(k, h * dh, dh);
        let vh = g.slice_cols(v, h * dh, dh);
        let scores = g.matmul_nt(qh, kh)?;
        let scaled = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let probs = g.softmax_rows(scaled);
        heads.push(g.matmul(probs, vh)?);
    }
    let ctx = g.concat_cols(&heads)?;
    let (wo, bo) = (g.param(ap.wo), g.param(ap.bo));
    linear(g, ctx, wo, bo)
}

/// Pre-norm residual block: x + attn(ln(x)), then x + mlp(ln(x)).
pub fn transformer_block(
    g: &mut Graph,
    x: NodeId,
    bp: &BlockParams,
    n_heads: usize,
) -> Result<NodeId> {
    let (g1, b1) = (g.param(bp.ln1_gain), g.param(bp.ln1_bias));
    let normed = g.layer_norm(x, g1, b1)?;
    let att = multi_head_attention(g, normed, normed, normed, &bp.attn, n_heads)?;
    let x = g.add(x, att)?;

    let (g2, b2) = (g.param(bp.ln2_gain), g.param(bp.ln2_bias));
    let normed = g.layer_norm(x, g2, b2)?;
    let (w1, c1) = (g.param(bp.mlp_w1), g.param(bp.mlp_b1));
    let hidden = linear(g, normed, w1, c1)?;
    let act = g.gelu(hidden);
    let (w2, c2) = (g.param(bp.mlp_w2), g.param(bp.mlp_b2));
    let out = linear(g, act, w2, c2)?;
    g.add(x, out)
}

/// Glorot-normal weight plus zero bias.
pub fn init_linear(
    params: &mut ParamSet,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) -> (usize, usize) {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    let w = params.add(format!("{prefix}.w"), Tensor::randn(&[fan_in, fan_out], std, rng));
    let b = params.add(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
    (w, b)
}

pub fn init_block(
    params: &mut ParamSet,
    prefix: &str,
    d: usize,
    hidden: usize,
    rng: &mut impl Rng,
) -> BlockParams {
    let ln1_gain = params.add(format!("{prefix}.ln1.g"), Tensor::from_vec(&[d], vec![1.0; d]));
    let ln1_bias = params.add(format!("{prefix}.ln1.b"), Tensor::zeros(&[d]));
    let (wq, bq) = init_linear(params, &format!("{prefix}.attn.q"), d, d, rng);
    let (wk, bk) = init_linear(params, &format!("{prefix}.attn.k"), d, d, rng);
    let (wv, bv) = init_linear(params, &format!("{prefix}.attn.v"), d, d, rng);
    let (wo, bo) = init_linear(params, &format!("{prefix}.attn.o"), d, d, rng);
    let ln2_gain = params.add(format!("{prefix}.ln2.g"), Tensor::from_vec(&[d], vec![1.0; d]));
    let ln2_bias = params.add(format!("{prefix}.ln2.b"), Tensor::zeros(&[d]));
    let (mlp_w1, mlp_b1) = init_linear(params, &format!("{prefix}.mlp.1"), d, hidden, rng);
    let (mlp_w2, mlp_b2) = init_linear(params, &format!("{prefix}.mlp.2"), hidden, d, rng);
    BlockParams {
        ln1_gain,
        ln1_bias,
        attn: AttentionParams {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        },
        ln2_gain,
        ln2_bias,
        mlp_w1,
        mlp_b1,
        mlp_w2,
        mlp_b2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn eye(n: usize) -> Tensor {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    #[test]
    fn linear_identity_passes_input_through() {
        let mut params = ParamSet::new();
        let w = params.add("w", eye(4));
        let b = params.add("b", Tensor::zeros(&[4]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let mut g = Graph::new(&params);
        let xin = g.constant(x.clone());
        let (wn, bn) = (g.param(w), g.param(b));
        let y = linear(&mut g, xin, wn, bn).unwrap();
        assert_eq!(g.value(y).data, x.data);
    }

    #[test]
    fn linear_zero_input_broadcasts_bias() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = params.add("w", Tensor::randn(&[4, 2], 1.0, &mut rng));
        let b = params.add("b", Tensor::from_vec(&[2], vec![0.3, -0.7]));
        let mut g = Graph::new(&params);
        let xin = g.constant(Tensor::zeros(&[5, 4]));
        let (wn, bn) = (g.param(w), g.param(b));
        let y = linear(&mut g, xin, wn, bn).unwrap();
        for i in 0..5 {
            assert_eq!(g.value(y).row(i), &[0.3, -0.7]);
        }
    }

    #[test]
    fn linear_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = ParamSet::new();
        let w = params.add("w", Tensor::randn(&[4, 5], 1.0, &mut rng));
        let b = params.add("b", Tensor::randn(&[5], 1.0, &mut rng));
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);

        let mut expect = vec![0.0; 3 * 5];
        for i in 0..3 {
            for j in 0..5 {
                let mut acc = params.value(b).data[j];
                for k in 0..4 {
                    acc += x.data[i * 4 + k] * params.value(w).data[k * 5 + j];
                }
                expect[i * 5 + j] = acc;
            }
        }

        let mut g = Graph::new(&params);
        let xin = g.constant(x);
        let (wn, bn) = (g.param(w), g.param(b));
        let y = linear(&mut g, xin, wn, bn).unwrap();
        for (a, e) in g.value(y).data.iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_shape_mismatch_is_an_error() {
        let mut params = ParamSet::new();
        let w = params.add("w", Tensor::zeros(&[3, 5]));
        let mut g = Graph::new(&params);
        let xin = g.constant(Tensor::zeros(&[2, 4]));
        let wn = g.param(w);
        assert!(matches!(g.matmul(xin, wn), Err(Error::Shape(_))));
    }

    #[test]
    fn layer_norm_constant_row_maps_to_bias() {
        let mut params = ParamSet::new();
        let gain = params.add("g", Tensor::from_vec(&[4], vec![1.0; 4]));
        let bias = params.add("b", Tensor::zeros(&[4]));
        let mut g = Graph::new(&params);
        let x = g.constant(Tensor::from_vec(&[1, 4], vec![3.3; 4]));
        let (gn, bn) = (g.param(gain), g.param(bias));
        let y = g.layer_norm(x, gn, bn).unwrap();
        for v in &g.value(y).data {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_output_has_zero_mean_unit_variance() {
        let mut params = ParamSet::new();
        let d = 16;
        let gain = params.add("g", Tensor::from_vec(&[d], vec![1.0; d]));
        let bias = params.add("b", Tensor::zeros(&[d]));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new(&params);
        let x = g.constant(Tensor::randn(&[3, d], 2.0, &mut rng));
        let (gn, bn) = (g.param(gain), g.param(bias));
        let y = g.layer_norm(x, gn, bn).unwrap();
        for i in 0..3 {
            let row = g.value(y).row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-4, "eps shifts variance slightly");
        }
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = 6;
        let mut params = ParamSet::new();
        let x = params.add("x", Tensor::randn(&[4, d], 1.0, &mut rng));
        let gain = params.add("g", Tensor::randn(&[d], 0.5, &mut rng));
        let bias = params.add("b", Tensor::randn(&[d], 0.5, &mut rng));
        let target = Tensor::randn(&[4, d], 1.0, &mut rng);
        let rel = gradcheck(
            |g| {
                let xn = g.param(x);
                let (gn, bn) = (g.param(gain), g.param(bias));
                let y = g.layer_norm(xn, gn, bn).unwrap();
                g.frobenius_dist(y, target.clone()).unwrap()
            },
            &params,
            11,
            6,
        );
        assert!(rel <= 1e-6, "rel err {rel}");
    }

    #[test]
    fn attention_single_token_is_projected_value_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = 8;
        let mut params = ParamSet::new();
        let ap = AttentionParams {
            wq: init_linear(&mut params, "q", d, d, &mut rng).0,
            bq: params.index_of("q.b").unwrap(),
            wk: init_linear(&mut params, "k", d, d, &mut rng).0,
            bk: params.index_of("k.b").unwrap(),
            wv: init_linear(&mut params, "v", d, d, &mut rng).0,
            bv: params.index_of("v.b").unwrap(),
            wo: init_linear(&mut params, "o", d, d, &mut rng).0,
            bo: params.index_of("o.b").unwrap(),
        };
        let x = Tensor::randn(&[1, d], 1.0, &mut rng);

        let mut g = Graph::new(&params);
        let xn = g.constant(x.clone());
        let out = multi_head_attention(&mut g, xn, xn, xn, &ap, 2).unwrap();

        // With one token the attention weight is exactly 1, so the output is
        // the value row passed through the output projection.
        let mut g2 = Graph::new(&params);
        let xn2 = g2.constant(x);
        let (wv, bv) = (g2.param(ap.wv), g2.param(ap.bv));
        let v = linear(&mut g2, xn2, wv, bv).unwrap();
        let (wo, bo) = (g2.param(ap.wo), g2.param(ap.bo));
        let expect = linear(&mut g2, v, wo, bo).unwrap();
        for (a, e) in g.value(out).data.iter().zip(&g2.value(expect).data) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_two_token_one_head_matches_hand_computation() {
        let d = 2;
        let mut params = ParamSet::new();
        // Identity projections isolate the softmax mixing.
        for name in ["q", "k", "v", "o"] {
            params.add(format!("{name}.w"), eye(d));
            params.add(format!("{name}.b"), Tensor::zeros(&[d]));
        }
        let ap = AttentionParams {
            wq: 0,
            bq: 1,
            wk: 2,
            bk: 3,
            wv: 4,
            bv: 5,
            wo: 6,
            bo: 7,
        };
        let x = Tensor::from_vec(&[2, d], vec![1.0, 0.0, 0.0, 1.0]);
        let mut g = Graph::new(&params);
        let xn = g.constant(x);
        let out = multi_head_attention(&mut g, xn, xn, xn, &ap, 1).unwrap();

        // scores/sqrt(2): row0 = [1,0]/sqrt2, row1 = [0,1]/sqrt2
        let s = 1.0 / (2.0f64).sqrt();
        let e = s.exp();
        let p_hi = e / (e + 1.0);
        let p_lo = 1.0 / (e + 1.0);
        let expect = [p_hi, p_lo, p_lo, p_hi];
        for (a, ev) in g.value(out).data.iter().zip(&expect) {
            assert!((a - ev).abs() < 1e-12, "{a} vs {ev}");
        }
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut params = ParamSet::new();
        let (wq, bq) = init_linear(&mut params, "q", 6, 6, &mut rng);
        let (wk, bk) = init_linear(&mut params, "k", 6, 6, &mut rng);
        let (wv, bv) = init_linear(&mut params, "v", 6, 6, &mut rng);
        let (wo, bo) = init_linear(&mut params, "o", 6, 6, &mut rng);
        let ap = AttentionParams {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        };
        let mut g = Graph::new(&params);
        let x = g.constant(Tensor::zeros(&[2, 6]));
        assert!(matches!(
            multi_head_attention(&mut g, x, x, x, &ap, 4),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn softmax_rows_are_stochastic_and_nonnegative() {
        let params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut g = Graph::new(&params);
        let mut raw = Tensor::randn(&[6, 9], 20.0, &mut rng);
        for v in &mut raw.data {
            *v = v.clamp(-50.0, 50.0);
        }
        let x = g.constant(raw);
        let p = g.softmax_rows(x);
        for i in 0..6 {
            let row = g.value(p).row(i);
            assert!(row.iter().all(|v| *v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_s() {
        let params = ParamSet::new();
        let mut g = Graph::new(&params);
        let s = 17;
        let logits = g.constant(Tensor::from_vec(&[3, s], vec![0.42; 3 * s]));
        let loss = g
            .cross_entropy(logits, &[0, 5, 16], &[true, true, true])
            .unwrap();
        assert!((g.value(loss).item() - (s as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_one_hot_margin_drives_loss_to_zero() {
        let params = ParamSet::new();
        let mut prev = f64::INFINITY;
        for margin in [2.0, 8.0, 32.0] {
            let mut g = Graph::new(&params);
            let mut t = Tensor::zeros(&[1, 4]);
            t.data[2] = margin;
            let logits = g.constant(t);
            let loss = g.cross_entropy(logits, &[2], &[true]).unwrap();
            let v = g.value(loss).item();
            assert!(v < prev);
            prev = v;
        }
        assert!(prev < 1e-10);
    }

    #[test]
    fn cross_entropy_matches_log_sum_exp_oracle() {
        let params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let logits = Tensor::randn(&[5, 7], 3.0, &mut rng);
        let targets = [3u32, 0, 6, 2, 2];
        let include = [true, false, true, true, false];

        let mut expect = 0.0;
        let mut count = 0;
        for i in 0..5 {
            if !include[i] {
                continue;
            }
            let row = logits.row(i);
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            expect += lse - row[targets[i] as usize];
            count += 1;
        }
        expect /= count as f64;

        let mut g = Graph::new(&params);
        let ln = g.constant(logits);
        let loss = g.cross_entropy(ln, &targets, &include).unwrap();
        assert!((g.value(loss).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_empty_mask_errors() {
        let params = ParamSet::new();
        let mut g = Graph::new(&params);
        let logits = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(
            g.cross_entropy(logits, &[0, 1], &[false, false]),
            Err(Error::EmptyLoss)
        ));
    }

    #[test]
    fn gradcheck_linear_layer_is_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut params = ParamSet::new();
        let (w, b) = init_linear(&mut params, "lin", 5, 3, &mut rng);
        let x = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let target = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let rel = gradcheck(
            |g| {
                let xn = g.constant(x.clone());
                let (wn, bn) = (g.param(w), g.param(b));
                let y = linear(g, xn, wn, bn).unwrap();
                g.frobenius_dist(y, target.clone()).unwrap()
            },
            &params,
            42,
            8,
        );
        assert!(rel <= 1e-7, "rel err {rel}");
    }

    #[test]
    fn gradcheck_full_transformer_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let d = 8;
        let mut params = ParamSet::new();
        let bp = init_block(&mut params, "blk", d, 2 * d, &mut rng);
        let x = Tensor::randn(&[3, d], 1.0, &mut rng);
        let target = Tensor::randn(&[3, d], 1.0, &mut rng);
        let rel = gradcheck(
            |g| {
                let xn = g.constant(x.clone());
                let y = transformer_block(g, xn, &bp, 2).unwrap();
                g.frobenius_dist(y, target.clone()).unwrap()
            },
            &params,
            44,
            4,
        );
        assert!(rel <= 1e-4, "rel err {rel}");
    }

    #[test]
    fn unused_parameter_has_exactly_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let mut params = ParamSet::new();
        let used = params.add("used", Tensor::randn(&[3], 1.0, &mut rng));
        let unused = params.add("unused", Tensor::randn(&[3], 1.0, &mut rng));
        let mut g = Graph::new(&params);
        let u = g.param(used);
        let loss = g.frobenius_dist(u, Tensor::zeros(&[3])).unwrap();
        let grads = g.backward(loss);
        assert!(grads.get(used).is_some());
        assert!(grads.get(unused).is_none(), "no gradient path, exactly zero");
    }

    #[test]
    fn gradcheck_gelu_softmax_and_embedding_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let mut params = ParamSet::new();
        let table = params.add("table", Tensor::randn(&[6, 4], 1.0, &mut rng));
        let scalar = params.add("s", Tensor::scalar(0.7));
        let target = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let rel = gradcheck(
            |g| {
                let t = g.param(table);
                let rows = g.gather_rows(t, &[1, 4]);
                let act = g.gelu(rows);
                let sm = g.softmax_rows(act);
                let s = g.param(scalar);
                let scaled = g.mul_scalar(sm, s);
                g.frobenius_dist(scaled, target.clone()).unwrap()
            },
            &params,
            48,
            8,
        );
        assert!(rel <= 1e-6, "rel err {rel}");
    }

    #[test]
    fn gradcheck_rot6d_and_reprojection_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(49);
        let mut params = ParamSet::new();
        let r6 = params.add("r6", Tensor::randn(&[6], 1.0, &mut rng));
        let empty = ParamSet::new();
        let gt = {
            let t = Tensor::randn(&[6], 1.0, &mut rng);
            let mut g = Graph::new(&empty);
            let n = g.constant(t);
            let r = g.rot6d(n).unwrap();
            g.value(r).clone()
        };
        let rel = gradcheck(
            |g| {
                let n = g.param(r6);
                let r = g.rot6d(n).unwrap();
                g.frobenius_dist(r, gt.clone()).unwrap()
            },
            &params,
            50,
            6,
        );
        assert!(rel <= 1e-5, "rel err {rel}");
    }
}
