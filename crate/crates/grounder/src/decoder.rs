//! Decoder: language-guided multi-level fusion of image features, a
//! referential-query decode stage, and the box/confidence/mask heads.
//!
//! The referential queries enter through a gating MLP added to a
//! zero-initialized learnable base, so zeroing that MLP degrades the model
//! to a vanilla-query decoder exactly.

use crate::config::ModelConfig;
use crate::nn::{AttnMap, LayerNorm, Linear, Mlp, Mlp3, MultiHeadAttention};
use crate::params::{Graph, ParamId, ParamStore};
use crate::rng::CounterRng;
use crate::scalar::Scalar;
use crate::tensor::TensorId;

pub struct GroundingDecoder {
    /// One projection per fused level, in fusion-set order.
    level_projs: Vec<Linear>,
    txt_proj: Linear,
    level_attn: MultiHeadAttention,
    merge: Linear,
    pub query_proj: Mlp,
    pub query_base: ParamId,
    cond_attn: MultiHeadAttention,
    ln_queries: LayerNorm,
    ln_feat: LayerNorm,
    out_attn: MultiHeadAttention,
    out_proj: Linear,
    ln_out: LayerNorm,
    box_head: Mlp3,
    cls_head: Linear,
    mask_head: Mlp3,
    num_queries: usize,
    self_residual: bool,
}

pub struct DecodeOutput {
    /// Target embeddings, one per query.
    pub target_embed: TensorId,
    /// Condition-aggregated multimodal image feature map.
    pub multimodal: TensorId,
    /// Query → multimodal-token attention; present on tracing graphs.
    pub attn: Option<AttnMap>,
}

impl GroundingDecoder {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, rng: &mut CounterRng, cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let dl = cfg.d_adapter;
        let levels = cfg.fusion_layers.len();
        let level_projs = cfg
            .fusion_layers
            .iter()
            .map(|k| Linear::new(store, rng, &format!("decoder.level{k}_proj"), d, d))
            .collect();
        GroundingDecoder {
            level_projs,
            txt_proj: Linear::new(store, rng, "decoder.txt_proj", d, d),
            level_attn: MultiHeadAttention::new(store, rng, "decoder.level_attn", d, cfg.heads),
            merge: Linear::new(store, rng, "decoder.merge", levels * d, d),
            query_proj: Mlp::new(store, rng, "decoder.query_proj", dl, d, d),
            query_base: store.zeros("decoder.query_base", &[cfg.num_queries, d]),
            cond_attn: MultiHeadAttention::new(store, rng, "decoder.cond_attn", d, cfg.heads),
            ln_queries: LayerNorm::new(store, "decoder.ln_queries", d),
            ln_feat: LayerNorm::new(store, "decoder.ln_feat", d),
            out_attn: MultiHeadAttention::new(store, rng, "decoder.out_attn", d, cfg.heads),
            out_proj: Linear::new(store, rng, "decoder.out_proj", d, d),
            ln_out: LayerNorm::new(store, "decoder.ln_out", d),
            box_head: Mlp3::new(store, rng, "decoder.box_head", d, d, 4),
            cls_head: Linear::new(store, rng, "decoder.cls_head", d, 2),
            mask_head: Mlp3::new(store, rng, "decoder.mask_head", d, d, d),
            num_queries: cfg.num_queries,
            self_residual: cfg.decoder_self_residual,
        }
    }

    /// Project the final text features; returns (full sequence, global row).
    pub fn text_features<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        z_txt_last: TensorId,
        global_pos: usize,
    ) -> (TensorId, TensorId) {
        let h_t = self.txt_proj.forward(g, z_txt_last);
        let global = g.tape.slice(h_t, 0, global_pos, 1);
        (h_t, global)
    }

    /// Inject the global text token into every level, then channel-concat
    /// and merge back to model width.
    pub fn fuse_levels<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        levels: &[TensorId],
        txt_global: TensorId,
    ) -> TensorId {
        assert_eq!(
            levels.len(),
            self.level_projs.len(),
            "fusion expects {} levels, got {}",
            self.level_projs.len(),
            levels.len()
        );
        let mut fused = Vec::with_capacity(levels.len());
        for (proj, &z) in self.level_projs.iter().zip(levels.iter()) {
            let h = proj.forward(g, z);
            let (att, _) = self.level_attn.forward(g, h, txt_global, txt_global, None);
            fused.push(g.tape.add(att, h));
        }
        let stacked = g.tape.concat(&fused, 1);
        self.merge.forward(g, stacked)
    }

    /// Decode with referential queries (adapter width) against the fused
    /// image map and projected text sequence.
    pub fn decode<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        ref_queries: TensorId,
        h_vml: TensorId,
        h_t: TensorId,
        txt_mask: &[bool],
    ) -> DecodeOutput {
        let n_q = self.num_queries;
        assert_eq!(
            g.tape.shape(ref_queries)[0],
            n_q,
            "decode: referential query count {} does not match the learnable base {}",
            g.tape.shape(ref_queries)[0],
            n_q
        );
        let n_img = g.tape.shape(h_vml)[0];

        let gated = self.query_proj.forward(g, ref_queries);
        let base = g.param(self.query_base);
        let seed = g.tape.add(gated, base);

        let packed = g.tape.concat(&[seed, h_vml], 0);
        let (conditioned, _) = self.cond_attn.forward(g, packed, h_t, h_t, Some(txt_mask));
        let q_bar = g.tape.slice(conditioned, 0, 0, n_q);
        let f_bar = g.tape.slice(conditioned, 0, n_q, n_img);
        let (queries, multimodal) = if self.self_residual {
            // residual from the attention output itself, as the design is
            // printed; the alternative below restores a pre-attention residual
            let qn = self.ln_queries.forward(g, q_bar);
            let fnorm = self.ln_feat.forward(g, f_bar);
            (g.tape.add(qn, q_bar), g.tape.add(fnorm, f_bar))
        } else {
            let qn = self.ln_queries.forward(g, q_bar);
            let fnorm = self.ln_feat.forward(g, f_bar);
            (g.tape.add(qn, seed), g.tape.add(fnorm, h_vml))
        };

        let (attended, attn) = self.out_attn.forward(g, queries, multimodal, multimodal, None);
        let projected = self.out_proj.forward(g, attended);
        let normed = self.ln_out.forward(g, projected);
        let target_embed = g.tape.add(normed, attended);
        DecodeOutput { target_embed, multimodal, attn }
    }

    /// Box and confidence heads; sigmoid keeps boxes in the unit square.
    pub fn grounding_head<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        target_embed: TensorId,
    ) -> (TensorId, TensorId) {
        let raw = self.box_head.forward(g, target_embed);
        let boxes = g.tape.sigmoid(raw);
        let logits = self.cls_head.forward(g, target_embed);
        (boxes, logits)
    }

    /// Mask head: per-query embeddings dotted against the spatial tokens of
    /// the multimodal map (class token dropped), upsampled to pixels.
    pub fn segmentation_head<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        target_embed: TensorId,
        multimodal: TensorId,
        grid: usize,
        out_size: usize,
        bilinear: bool,
    ) -> TensorId {
        let n_img = g.tape.shape(multimodal)[0];
        assert_eq!(
            n_img - 1,
            grid * grid,
            "segmentation head: {} spatial tokens do not form a {grid}x{grid} grid",
            n_img - 1
        );
        let m = self.mask_head.forward(g, target_embed);
        let spatial = g.tape.slice(multimodal, 0, 1, n_img - 1);
        let logits = g.tape.matmul_nt(m, spatial);
        let up = g.tape.upsample_grid(logits, grid, grid, out_size, out_size, bilinear);
        g.tape.sigmoid(up)
    }
}

/// Inference-time choice: the query with the highest object probability,
/// lowest index on ties.
pub fn select_prediction(object_probs: &[f64]) -> usize {
    assert!(!object_probs.is_empty(), "select_prediction: no predictions");
    let mut best = 0;
    for (i, &p) in object_probs.iter().enumerate().skip(1) {
        if p > object_probs[best] {
            best = i;
        }
    }
    best
}
