//! Query adapter: the trainable block grafted after selected backbone
//! layers. It down-projects both streams, pulls the expression condition
//! into a small set of learnable queries (cross-modal fusion), sharpens
//! target-related context (refinement), and injects the result back into
//! the frozen streams through sigmoid-gated residual up-projections.
//!
//! Queries chain across adapters, so each insertion layer refines the
//! previous one's output; the final queries seed the decoder.

use crate::config::{Direction, ModelConfig};
use crate::nn::{AttnMap, LayerNorm, Linear, Mlp, MultiHeadAttention};
use crate::params::{Graph, ParamId, ParamStore};
use crate::rng::CounterRng;
use crate::scalar::Scalar;
use crate::tensor::TensorId;

#[derive(Clone, Debug)]
pub struct QueryAdapter {
    /// Backbone layer this adapter follows (1-based).
    pub layer: usize,
    down_img: Linear,
    down_txt: Linear,
    fuse_vision: MultiHeadAttention,
    ln_fuse_v: LayerNorm,
    fuse_text: MultiHeadAttention,
    ln_fuse_t: LayerNorm,
    refine_attn: MultiHeadAttention,
    refine_mlp: Mlp,
    ln_refine: LayerNorm,
    img_self: MultiHeadAttention,
    img_mlp: Mlp,
    ln_img: LayerNorm,
    txt_self: MultiHeadAttention,
    txt_mlp: Mlp,
    ln_txt: LayerNorm,
    up_img: Linear,
    up_txt: Linear,
    gate_img: ParamId,
    gate_txt: ParamId,
    num_queries: usize,
}

/// Per-layer trace: refined queries and the attention maps that show what
/// the queries look at.
#[derive(Clone, Debug)]
pub struct AdapterTrace {
    pub layer: usize,
    /// Refined query values, num_queries × d_adapter.
    pub queries: Vec<f32>,
    /// Query → image-token attention from the refinement block.
    pub query_image_attn: AttnMap,
    /// [gate; queries; image] → text attention from the fusion block.
    pub fuse_vision_attn: AttnMap,
    /// [gate; text] → image attention (absent for image-only flow).
    pub fuse_text_attn: Option<AttnMap>,
}

pub struct AdapterOutput {
    pub queries: TensorId,
    pub z_img: TensorId,
    pub z_txt: TensorId,
    /// Present on tracing graphs only.
    pub trace: Option<AdapterTrace>,
}

impl QueryAdapter {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut CounterRng,
        cfg: &ModelConfig,
        layer: usize,
    ) -> Self {
        let d = cfg.d_model;
        let dl = cfg.d_adapter;
        let h = cfg.adapter_heads;
        let p = format!("adapter{layer}");
        QueryAdapter {
            layer,
            down_img: Linear::new(store, rng, &format!("{p}.down_img"), d, dl),
            down_txt: Linear::new(store, rng, &format!("{p}.down_txt"), d, dl),
            fuse_vision: MultiHeadAttention::new(store, rng, &format!("{p}.fuse_vision"), dl, h),
            ln_fuse_v: LayerNorm::new(store, &format!("{p}.ln_fuse_v"), dl),
            fuse_text: MultiHeadAttention::new(store, rng, &format!("{p}.fuse_text"), dl, h),
            ln_fuse_t: LayerNorm::new(store, &format!("{p}.ln_fuse_t"), dl),
            refine_attn: MultiHeadAttention::new(store, rng, &format!("{p}.refine_attn"), dl, h),
            refine_mlp: Mlp::new(store, rng, &format!("{p}.refine_mlp"), dl, dl * 4, dl),
            ln_refine: LayerNorm::new(store, &format!("{p}.ln_refine"), dl),
            img_self: MultiHeadAttention::new(store, rng, &format!("{p}.img_self"), dl, h),
            img_mlp: Mlp::new(store, rng, &format!("{p}.img_mlp"), dl, dl * 4, dl),
            ln_img: LayerNorm::new(store, &format!("{p}.ln_img"), dl),
            txt_self: MultiHeadAttention::new(store, rng, &format!("{p}.txt_self"), dl, h),
            txt_mlp: Mlp::new(store, rng, &format!("{p}.txt_mlp"), dl, dl * 4, dl),
            ln_txt: LayerNorm::new(store, &format!("{p}.ln_txt"), dl),
            up_img: Linear::new(store, rng, &format!("{p}.up_img"), dl, d),
            up_txt: Linear::new(store, rng, &format!("{p}.up_txt"), dl, d),
            gate_img: store.uniform(&format!("{p}.gate_img"), &[1, dl], dl, rng),
            gate_txt: store.uniform(&format!("{p}.gate_txt"), &[1, dl], dl, rng),
            num_queries: cfg.num_queries,
        }
    }

    /// One adapter pass. `q_prev` is the previous adapter's output (or the
    /// learnable initial queries), `txt_mask` marks real text tokens, and
    /// `direction` selects which backbone streams receive injection.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        z_img: TensorId,
        z_txt: TensorId,
        q_prev: TensorId,
        txt_mask: &[bool],
        direction: Direction,
    ) -> AdapterOutput {
        let n_q = self.num_queries;
        let n_img = g.tape.shape(z_img)[0];
        let n_txt = g.tape.shape(z_txt)[0];
        assert_eq!(g.tape.shape(q_prev)[0], n_q, "query count mismatch");

        // down-projection to the adapter width
        let f_img = self.down_img.forward(g, z_img);
        let f_txt = self.down_txt.forward(g, z_txt);

        // cross-modal fusion, vision side: [gate; queries; image] attend to text
        let gate_v = g.param(self.gate_img);
        let packed = g.tape.concat(&[gate_v, q_prev, f_img], 0);
        let (fused, fuse_vision_attn) =
            self.fuse_vision.forward(g, packed, f_txt, f_txt, Some(txt_mask));
        let gate_v_bar = g.tape.slice(fused, 0, 0, 1);
        let body = g.tape.slice(fused, 0, 1, n_q + n_img);
        let body = self.ln_fuse_v.forward(g, body);
        let q_bar = g.tape.slice(body, 0, 0, n_q);
        let f_img_bar = g.tape.slice(body, 0, n_q, n_img);
        let q_hat = g.tape.add(q_bar, q_prev);
        let f_img_hat = g.tape.add(f_img_bar, f_img);

        // text side runs only when text receives injection
        let text_side = if direction.inject_text() {
            let gate_t = g.param(self.gate_txt);
            let packed_t = g.tape.concat(&[gate_t, f_txt], 0);
            let (fused_t, fuse_text_attn) = self.fuse_text.forward(g, packed_t, f_img, f_img, None);
            let gate_t_bar = g.tape.slice(fused_t, 0, 0, 1);
            let body_t = g.tape.slice(fused_t, 0, 1, n_txt);
            let body_t = self.ln_fuse_t.forward(g, body_t);
            let f_txt_hat = g.tape.add(body_t, f_txt);
            Some((gate_t_bar, f_txt_hat, fuse_text_attn))
        } else {
            None
        };

        // refinement: queries pull target context from fused image tokens
        let (q_ctx, query_image_attn) =
            self.refine_attn.forward(g, q_hat, f_img_hat, f_img_hat, None);
        let q_fed = self.refine_mlp.forward(g, q_ctx);
        let q_normed = self.ln_refine.forward(g, q_fed);
        let queries = g.tape.add(q_normed, q_hat);

        // image stream injection
        let z_img_out = if direction.inject_image() {
            let packed_v = g.tape.concat(&[gate_v_bar, f_img_hat], 0);
            let (selfed, _) = self.img_self.forward(g, packed_v, f_img_hat, f_img_hat, None);
            let gate_v_tilde = g.tape.slice(selfed, 0, 0, 1);
            let f_img_tilde = g.tape.slice(selfed, 0, 1, n_img);
            let fed = self.img_mlp.forward(g, f_img_tilde);
            let normed = self.ln_img.forward(g, fed);
            let g_img = g.tape.add(normed, f_img_hat);
            let gate = g.tape.sigmoid(gate_v_tilde);
            let gated = g.tape.mul(g_img, gate);
            let up = self.up_img.forward(g, gated);
            g.tape.add(up, z_img)
        } else {
            z_img
        };

        // text stream injection
        let (z_txt_out, fuse_text_attn) = match text_side {
            Some((gate_t_bar, f_txt_hat, map)) => {
                let packed_t = g.tape.concat(&[gate_t_bar, f_txt_hat], 0);
                let (selfed, _) =
                    self.txt_self.forward(g, packed_t, f_txt_hat, f_txt_hat, Some(txt_mask));
                let gate_t_tilde = g.tape.slice(selfed, 0, 0, 1);
                let f_txt_tilde = g.tape.slice(selfed, 0, 1, n_txt);
                let fed = self.txt_mlp.forward(g, f_txt_tilde);
                let normed = self.ln_txt.forward(g, fed);
                let g_txt = g.tape.add(normed, f_txt_hat);
                let gate = g.tape.sigmoid(gate_t_tilde);
                let gated = g.tape.mul(g_txt, gate);
                let up = self.up_txt.forward(g, gated);
                (g.tape.add(up, z_txt), Some(map))
            }
            None => (z_txt, None),
        };

        let trace = if g.trace {
            Some(AdapterTrace {
                layer: self.layer,
                queries: g.tape.value(queries).iter().map(|v| v.to_f64() as f32).collect(),
                query_image_attn: query_image_attn.expect("traced graph collects maps"),
                fuse_vision_attn: fuse_vision_attn.expect("traced graph collects maps"),
                fuse_text_attn: fuse_text_attn.flatten(),
            })
        } else {
            None
        };
        AdapterOutput { queries, z_img: z_img_out, z_txt: z_txt_out, trace }
    }
}

/// Gated residual injection in isolation: up(sig(gate) ⊙ features) + stream.
/// Split out so the gating contract is directly testable.
pub fn inject<S: Scalar>(
    g: &mut Graph<S>,
    up: &Linear,
    features: TensorId,
    gate_logits: TensorId,
    stream: TensorId,
) -> TensorId {
    let gate = g.tape.sigmoid(gate_logits);
    let gated = g.tape.mul(features, gate);
    let projected = up.forward(g, gated);
    g.tape.add(projected, stream)
}
