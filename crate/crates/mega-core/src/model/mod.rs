//! The masked generative encoder-decoder: visible mesh tokens are encoded,
//! the decoder sees the full-length sequence (encoded embeddings at visible
//! slots, a shared mask token elsewhere) plus optional keypoint-conditioning
//! tokens, and emits per-position logits over the codebook. A separate head
//! predicts the global 6D rotation and weak-perspective camera from the
//! conditioning features.

pub mod checkpoint;

use nalgebra::Matrix3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::body::Observation;
use crate::error::{Error, Result};
use crate::nn::{
    self, init_block, init_linear, BlockParams, Graph, NodeId, ParamSet, Tensor,
};
use crate::tokenizer::TokenSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    /// Mesh token positions (N).
    pub n_tokens: usize,
    /// Codebook size (S).
    pub codebook_size: usize,
    /// Transformer width (D).
    pub dim: usize,
    /// Encoder depth (B_e).
    pub enc_blocks: usize,
    /// Decoder depth (B_d).
    pub dec_blocks: usize,
    pub heads: usize,
    /// Conditioning keypoints (K); one conditioning token per keypoint (G=K).
    pub keypoints: usize,
}

impl ModelConfig {
    pub fn desk_default() -> Self {
        ModelConfig {
            n_tokens: 24,
            codebook_size: 64,
            dim: 64,
            enc_blocks: 4,
            dec_blocks: 2,
            heads: 4,
            keypoints: 12,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.n_tokens == 0 || self.codebook_size == 0 || self.keypoints == 0 {
            return Err(Error::Config("zero-sized model dimension".into()));
        }
        Ok(())
    }

    fn mlp_hidden(&self) -> usize {
        2 * self.dim
    }
}

/// Token indices plus per-position visibility flags.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSequence {
    pub indices: Vec<u32>,
    pub visible: Vec<bool>,
}

impl MaskedSequence {
    /// The inference starting point: everything hidden, placeholder indices.
    pub fn fully_hidden(n: usize) -> Self {
        MaskedSequence {
            indices: vec![0; n],
            visible: vec![false; n],
        }
    }

    pub fn from_tokens(tokens: &TokenSequence, visible: Vec<bool>) -> Self {
        assert_eq!(tokens.len(), visible.len());
        MaskedSequence {
            indices: tokens.indices.clone(),
            visible,
        }
    }

    pub fn visible_count(&self) -> usize {
        self.visible.iter().filter(|v| **v).count()
    }
}

#[derive(Debug, Clone)]
struct Layout {
    token_embed: usize,
    cls: usize,
    mask_token: usize,
    enc_pos: usize,
    dec_pos: usize,
    cond_w: usize,
    cond_b: usize,
    enc_blocks: Vec<BlockParams>,
    dec_blocks: Vec<BlockParams>,
    head_w1: usize,
    head_b1: usize,
    head_w2: usize,
    head_b2: usize,
    rc_w1: usize,
    rc_b1: usize,
    rc_w2: usize,
    rc_b2: usize,
    rc_out_w: usize,
    rc_out_b: usize,
}

#[derive(Debug, Clone)]
pub struct MegaModel {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    layout: Layout,
}

impl MegaModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let (n, s, d, g) = (cfg.n_tokens, cfg.codebook_size, cfg.dim, cfg.keypoints);
        let emb_std = 0.02;
        let token_embed = p.add("token_embed", Tensor::randn(&[s, d], emb_std, &mut rng));
        let cls = p.add("cls", Tensor::randn(&[1, d], emb_std, &mut rng));
        let mask_token = p.add("mask", Tensor::randn(&[d], emb_std, &mut rng));
        let enc_pos = p.add("enc_pos", Tensor::randn(&[n + 1, d], emb_std, &mut rng));
        let dec_pos = p.add("dec_pos", Tensor::randn(&[n + g, d], emb_std, &mut rng));
        let (cond_w, cond_b) = init_linear(&mut p, "cond", 3, d, &mut rng);
        let enc_blocks = (0..cfg.enc_blocks)
            .map(|i| init_block(&mut p, &format!("enc.{i}"), d, cfg.mlp_hidden(), &mut rng))
            .collect();
        let dec_blocks = (0..cfg.dec_blocks)
            .map(|i| init_block(&mut p, &format!("dec.{i}"), d, cfg.mlp_hidden(), &mut rng))
            .collect();
        let (head_w1, head_b1) = init_linear(&mut p, "head.1", d, d, &mut rng);
        let (head_w2, head_b2) = init_linear(&mut p, "head.2", d, s, &mut rng);
        let (rc_w1, rc_b1) = init_linear(&mut p, "rotcam.1", d, d, &mut rng);
        let (rc_w2, rc_b2) = init_linear(&mut p, "rotcam.2", d, d, &mut rng);
        let (rc_out_w, rc_out_b) = init_linear(&mut p, "rotcam.out", d, 9, &mut rng);
        Ok(MegaModel {
            cfg,
            params: p,
            layout: Layout {
                token_embed,
                cls,
                mask_token,
                enc_pos,
                dec_pos,
                cond_w,
                cond_b,
                enc_blocks,
                dec_blocks,
                head_w1,
                head_b1,
                head_w2,
                head_b2,
                rc_w1,
                rc_b1,
                rc_w2,
                rc_b2,
                rc_out_w,
                rc_out_b,
            },
        })
    }

    fn validate_masked(&self, masked: &MaskedSequence) -> Result<()> {
        let n = self.cfg.n_tokens;
        if masked.indices.len() != n || masked.visible.len() != n {
            return Err(Error::Config(format!(
                "masked sequence length {} for N = {n}",
                masked.indices.len()
            )));
        }
        for (&idx, &vis) in masked.indices.iter().zip(&masked.visible) {
            if vis && idx as usize >= self.cfg.codebook_size {
                return Err(Error::InvalidToken {
                    index: idx,
                    size: self.cfg.codebook_size as u32,
                });
            }
        }
        Ok(())
    }

    fn validate_obs(&self, obs: &Observation) -> Result<()> {
        if obs.keypoints.len() != self.cfg.keypoints || obs.visible.len() != self.cfg.keypoints {
            return Err(Error::Config(format!(
                "observation has {} keypoints, model expects {}",
                obs.keypoints.len(),
                self.cfg.keypoints
            )));
        }
        Ok(())
    }

    /// Per-keypoint (x, y, visibility) rows through the shared linear map:
    /// the conditioning tokens (and the rot-cam head's input features).
    pub fn conditioning_features(&self, g: &mut Graph, obs: &Observation) -> Result<NodeId> {
        self.validate_obs(obs)?;
        let k = self.cfg.keypoints;
        let mut rows = Vec::with_capacity(3 * k);
        for i in 0..k {
            rows.push(obs.keypoints[i][0]);
            rows.push(obs.keypoints[i][1]);
            rows.push(if obs.visible[i] { 1.0 } else { 0.0 });
        }
        let x = g.constant(Tensor::from_vec(&[k, 3], rows));
        let (w, b) = (g.param(self.layout.cond_w), g.param(self.layout.cond_b));
        nn::linear(g, x, w, b)
    }

    /// Full masked forward pass: per-position logits over the codebook.
    ///
    /// Visible tokens are embedded (with the cls token and encoder position
    /// embeddings) and encoded; the decoder input is the full-length
    /// sequence with encoded embeddings at visible slots and the mask token
    /// elsewhere, plus conditioning tokens when an observation is given.
    /// With nothing visible the encoder never runs: its output could not
    /// reach the decoder anyway.
    pub fn forward_logits(
        &self,
        g: &mut Graph,
        masked: &MaskedSequence,
        obs: Option<&Observation>,
    ) -> Result<NodeId> {
        self.validate_masked(masked)?;
        let (n, d) = (self.cfg.n_tokens, self.cfg.dim);
        let m = masked.visible_count();

        let enc_out = if m > 0 {
            let vis_tokens: Vec<usize> = masked
                .indices
                .iter()
                .zip(&masked.visible)
                .filter(|(_, v)| **v)
                .map(|(i, _)| *i as usize)
                .collect();
            let vis_pos: Vec<usize> = masked
                .visible
                .iter()
                .enumerate()
                .filter(|(_, v)| **v)
                .map(|(i, _)| i + 1)
                .collect();
            let table = g.param(self.layout.token_embed);
            let tok = g.gather_rows(table, &vis_tokens);
            let pos_table = g.param(self.layout.enc_pos);
            let pos = g.gather_rows(pos_table, &vis_pos);
            let x = g.add(tok, pos)?;
            let cls = g.param(self.layout.cls);
            let cls_pos = g.slice_rows(pos_table, 0, 1);
            let cls_row = g.add(cls, cls_pos)?;
            let mut seq = g.concat_rows(&[cls_row, x])?;
            for bp in &self.layout.enc_blocks {
                seq = nn::transformer_block(g, seq, bp, self.cfg.heads)?;
            }
            Some(g.slice_rows(seq, 1, m))
        } else {
            None
        };

        let mask_token = g.param(self.layout.mask_token);
        let assembled = g.assemble_visible(enc_out, mask_token, &masked.visible)?;
        let dec_pos_table = g.param(self.layout.dec_pos);
        let mesh_pos = g.slice_rows(dec_pos_table, 0, n);
        let mesh_in = g.add(assembled, mesh_pos)?;

        let mut seq = match obs {
            Some(obs) => {
                let cond = self.conditioning_features(g, obs)?;
                let cond_pos = g.slice_rows(dec_pos_table, n, self.cfg.keypoints);
                let cond_in = g.add(cond, cond_pos)?;
                g.concat_rows(&[mesh_in, cond_in])?
            }
            None => mesh_in,
        };
        for bp in &self.layout.dec_blocks {
            seq = nn::transformer_block(g, seq, bp, self.cfg.heads)?;
        }
        let mesh_out = g.slice_rows(seq, 0, n);
        let _ = d;
        let (w1, b1) = (g.param(self.layout.head_w1), g.param(self.layout.head_b1));
        let h = nn::linear(g, mesh_out, w1, b1)?;
        let h = g.gelu(h);
        let (w2, b2) = (g.param(self.layout.head_w2), g.param(self.layout.head_b2));
        nn::linear(g, h, w2, b2)
    }

    /// Convenience forward returning the logits tensor.
    pub fn logits_value(
        &self,
        masked: &MaskedSequence,
        obs: Option<&Observation>,
    ) -> Result<Tensor> {
        let mut g = Graph::new(&self.params);
        let node = self.forward_logits(&mut g, masked, obs)?;
        Ok(g.value(node).clone())
    }

    /// Cross-entropy restricted to hidden positions.
    pub fn loss_tokens(
        &self,
        g: &mut Graph,
        logits: NodeId,
        target: &TokenSequence,
        visible: &[bool],
    ) -> Result<NodeId> {
        let include: Vec<bool> = visible.iter().map(|v| !v).collect();
        g.cross_entropy(logits, &target.indices, &include)
    }

    /// Rotation/camera head: conditioning features averaged, two hidden
    /// layers, linear map to 6 rotation + 3 camera values.
    pub fn rot_cam_nodes(&self, g: &mut Graph, obs: &Observation) -> Result<(NodeId, NodeId)> {
        let cond = self.conditioning_features(g, obs)?;
        let pooled = g.mean_rows(cond);
        let (w1, b1) = (g.param(self.layout.rc_w1), g.param(self.layout.rc_b1));
        let h = nn::linear(g, pooled, w1, b1)?;
        let h = g.gelu(h);
        let (w2, b2) = (g.param(self.layout.rc_w2), g.param(self.layout.rc_b2));
        let h = nn::linear(g, h, w2, b2)?;
        let h = g.gelu(h);
        let (wo, bo) = (g.param(self.layout.rc_out_w), g.param(self.layout.rc_out_b));
        let out = nn::linear(g, h, wo, bo)?;
        let r6 = g.slice_cols(out, 0, 6);
        let pi = g.slice_cols(out, 6, 3);
        Ok((r6, pi))
    }

    /// Deterministic rotation/camera prediction.
    pub fn predict_rot_cam(&self, obs: &Observation) -> Result<([f64; 6], [f64; 3])> {
        let mut g = Graph::new(&self.params);
        let (r6, pi) = self.rot_cam_nodes(&mut g, obs)?;
        let rv = g.value(r6);
        let pv = g.value(pi);
        Ok((
            std::array::from_fn(|i| rv.data[i]),
            std::array::from_fn(|i| pv.data[i]),
        ))
    }
}

/// Frobenius distance between the predicted rotation matrix and the ground
/// truth, plus the mean L1 reprojection error of the ground-truth joints
/// under the predicted rotation and camera, over visible keypoints.
pub fn loss_rot_cam(
    g: &mut Graph,
    r6: NodeId,
    pi: NodeId,
    gt_rotation: &Matrix3<f64>,
    gt_joints: &[[f64; 3]],
    obs: &Observation,
) -> Result<NodeId> {
    let rot = g.rot6d(r6)?;
    let mut gt = Vec::with_capacity(9);
    for i in 0..3 {
        for j in 0..3 {
            gt.push(gt_rotation[(i, j)]);
        }
    }
    let frob = g.frobenius_dist(rot, Tensor::from_vec(&[3, 3], gt))?;

    let k = gt_joints.len();
    let joints = g.constant(Tensor::from_vec(
        &[k, 3],
        gt_joints.iter().flatten().copied().collect(),
    ));
    // Row-vector convention: (R p)^T = p^T R^T.
    let rotated = g.matmul_nt(joints, rot)?;
    let xy = g.slice_cols(rotated, 0, 2);
    let s = g.slice_cols(pi, 0, 1);
    let t = g.slice_cols(pi, 1, 2);
    let t = g.reshape(t, &[2]);
    let scaled = g.mul_scalar(xy, s);
    let projected = g.add_bias(scaled, t)?;
    let target = Tensor::from_vec(
        &[k, 2],
        obs.keypoints.iter().flatten().copied().collect(),
    );
    let l1 = g.l1_masked(projected, target, &obs.visible)?;
    g.add(frob, l1)
}
