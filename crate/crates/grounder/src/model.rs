//! Full grounding model: frozen-able dual encoder, query adapters
//! interleaved at the configured layers, language-guided fusion and the
//! referential-query decoder, plus the lightweight auxiliary heads that
//! supervise each adapter's queries.

use crate::adapter::{AdapterTrace, QueryAdapter};
use crate::backbone::{ImageEncoder, TextEncoder};
use crate::config::{Direction, GlobalToken, ModelConfig, QueryStrategy};
use crate::data::{GroundingSample, EOS};
use crate::decoder::{DecodeOutput, GroundingDecoder};
use crate::nn::{AttnMap, Linear, Mlp};
use crate::params::{Graph, ParamId, ParamStore};
use crate::rng::CounterRng;
use crate::scalar::Scalar;
use crate::tensor::TensorId;

pub struct GroundingModel<S: Scalar> {
    pub cfg: ModelConfig,
    pub store: ParamStore<S>,
    pub img: ImageEncoder,
    pub txt: TextEncoder,
    pub adapters: Vec<QueryAdapter>,
    /// Learnable initial queries consumed by the first adapter.
    pub queries0: ParamId,
    /// Separate learnable queries for the random-init strategy.
    pub rand_queries: ParamId,
    /// Projects the global text token for the linguistic-embedding strategy.
    pub ling_proj: Linear,
    pub decoder: GroundingDecoder,
    /// Shared lightweight heads over each adapter's queries.
    pub aux_box: Mlp,
    pub aux_cls: Linear,
}

pub struct ForwardOutput {
    pub boxes: TensorId,
    pub logits: TensorId,
    pub masks: Option<TensorId>,
    pub multimodal: TensorId,
    /// Refined queries per adapter, for the auxiliary loss.
    pub adapter_queries: Vec<TensorId>,
    /// Populated on tracing graphs only.
    pub adapter_traces: Vec<AdapterTrace>,
    pub decoder_attn: Option<AttnMap>,
    /// Final backbone streams (class row / global text row live here).
    pub z_img_final: TensorId,
    pub z_txt_final: TensorId,
    pub global_pos: usize,
}

impl<S: Scalar> GroundingModel<S> {
    pub fn new(cfg: ModelConfig) -> Self {
        cfg.validate().expect("model config must validate");
        let mut store = ParamStore::new();
        let mut rng = CounterRng::new(cfg.init_seed);
        let img = ImageEncoder::new(&mut store, &mut rng, &cfg);
        let txt = TextEncoder::new(&mut store, &mut rng, &cfg);
        let adapters = if cfg.direction == Direction::None {
            Vec::new()
        } else {
            cfg.adapter_layers
                .iter()
                .map(|&l| QueryAdapter::new(&mut store, &mut rng, &cfg, l))
                .collect()
        };
        let queries0 =
            store.uniform("adapter.queries0", &[cfg.num_queries, cfg.d_adapter], cfg.d_adapter, &mut rng);
        let rand_queries = store.uniform(
            "decoder.rand_queries",
            &[cfg.num_queries, cfg.d_adapter],
            cfg.d_adapter,
            &mut rng,
        );
        let ling_proj = Linear::new(&mut store, &mut rng, "decoder.ling_proj", cfg.d_model, cfg.d_adapter);
        let decoder = GroundingDecoder::new(&mut store, &mut rng, &cfg);
        let aux_box = Mlp::new(&mut store, &mut rng, "aux.box", cfg.d_adapter, cfg.d_adapter, 4);
        let aux_cls = Linear::new(&mut store, &mut rng, "aux.cls", cfg.d_adapter, 2);
        GroundingModel {
            cfg,
            store,
            img,
            txt,
            adapters,
            queries0,
            rand_queries,
            ling_proj,
            decoder,
            aux_box,
            aux_cls,
        }
    }

    pub fn freeze_backbone(&mut self, frozen: bool) {
        self.store.set_frozen_prefix("backbone.", frozen);
    }

    pub fn backbone_frozen(&self) -> bool {
        self.store.any_frozen("backbone.")
    }

    pub fn backbone_checksum(&self) -> u32 {
        self.store.checksum_prefix("backbone.")
    }

    pub fn trainable_checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for (_, p) in self.store.iter() {
            if !p.name.starts_with("backbone.") {
                for v in p.data.iter() {
                    h.update(&v.to_f64().to_le_bytes());
                }
            }
        }
        h.finalize()
    }

    fn global_pos(&self, tokens: &[u16]) -> usize {
        match self.cfg.text_global {
            GlobalToken::Sos => 0,
            GlobalToken::Eos => tokens
                .iter()
                .position(|&t| t == EOS)
                .expect("token sequence must contain the end bracket"),
        }
    }

    /// Full grounding forward for one sample.
    pub fn forward(&self, g: &mut Graph<S>, image: &[f32], tokens: &[u16]) -> ForwardOutput {
        assert_eq!(
            tokens.len(),
            self.cfg.max_text_len,
            "expected padded token sequence of {}, got {}",
            self.cfg.max_text_len,
            tokens.len()
        );
        let txt_mask = self.txt.key_mask(tokens);
        let global_pos = self.global_pos(tokens);

        let mut z_img = self.img.embed(g, image);
        let mut z_txt = self.txt.embed(g, tokens);
        let mut queries = g.param(self.queries0);
        let mut adapter_queries = Vec::new();
        let mut adapter_traces = Vec::new();
        let mut fusion_feats: Vec<TensorId> = Vec::new();

        let mut adapter_iter = self.adapters.iter().peekable();
        for layer in 1..=self.cfg.layers {
            z_img = self.img.layer(g, layer, z_img);
            z_txt = self.txt.layer(g, layer, z_txt, &txt_mask);
            if adapter_iter.peek().map(|a| a.layer) == Some(layer) {
                let ad = adapter_iter.next().unwrap();
                let out = ad.forward(g, z_img, z_txt, queries, &txt_mask, self.cfg.direction);
                queries = out.queries;
                z_img = out.z_img;
                z_txt = out.z_txt;
                adapter_queries.push(out.queries);
                if let Some(t) = out.trace {
                    adapter_traces.push(t);
                }
            }
            if self.cfg.fusion_layers.contains(&layer) {
                fusion_feats.push(z_img);
            }
        }

        let (h_t, txt_global) = self.decoder.text_features(g, z_txt, global_pos);
        let h_vml = self.decoder.fuse_levels(g, &fusion_feats, txt_global);

        let ref_queries = match self.cfg.strategy {
            QueryStrategy::Referential => {
                if self.adapters.is_empty() {
                    g.tape.zeros(&[self.cfg.num_queries, self.cfg.d_adapter])
                } else {
                    queries
                }
            }
            QueryStrategy::RandomInit => g.param(self.rand_queries),
            QueryStrategy::LinguisticEmbedding => {
                let global_raw = g.tape.slice(z_txt, 0, global_pos, 1);
                let projected = self.ling_proj.forward(g, global_raw);
                let rows = vec![0usize; self.cfg.num_queries];
                g.tape.gather_rows(projected, &rows)
            }
            QueryStrategy::Zero => g.tape.zeros(&[self.cfg.num_queries, self.cfg.d_adapter]),
        };

        let DecodeOutput { target_embed, multimodal, attn } =
            self.decoder.decode(g, ref_queries, h_vml, h_t, &txt_mask);
        let (boxes, logits) = self.decoder.grounding_head(g, target_embed);
        let masks = if self.cfg.seg_head {
            Some(self.decoder.segmentation_head(
                g,
                target_embed,
                multimodal,
                self.cfg.patches_per_side(),
                self.cfg.image_size,
                self.cfg.mask_bilinear,
            ))
        } else {
            None
        };

        ForwardOutput {
            boxes,
            logits,
            masks,
            multimodal,
            adapter_queries,
            adapter_traces,
            decoder_attn: attn,
            z_img_final: z_img,
            z_txt_final: z_txt,
            global_pos,
        }
    }

    /// Auxiliary predictions from the shared lightweight heads, one pair
    /// per adapter layer.
    pub fn aux_predictions(&self, g: &mut Graph<S>, adapter_queries: &[TensorId]) -> Vec<(TensorId, TensorId)> {
        adapter_queries
            .iter()
            .map(|&q| {
                let raw = self.aux_box.forward(g, q);
                let boxes = g.tape.sigmoid(raw);
                let logits = self.aux_cls.forward(g, q);
                (boxes, logits)
            })
            .collect()
    }

    /// Plain dual-encoder pass (no adapters) producing L2-normalized global
    /// embeddings for contrastive pretraining.
    pub fn forward_contrastive(
        &self,
        g: &mut Graph<S>,
        image: &[f32],
        tokens: &[u16],
    ) -> (TensorId, TensorId) {
        let z_img = self.img.encode(g, image);
        let z_txt = self.txt.encode(g, tokens);
        let cls = g.tape.slice(z_img, 0, 0, 1);
        let global = {
            let pos = self.global_pos(tokens);
            g.tape.slice(z_txt, 0, pos, 1)
        };
        (l2_normalize_row(g, cls), l2_normalize_row(g, global))
    }

    /// Convenience wrapper running a dataset sample.
    pub fn forward_sample(&self, g: &mut Graph<S>, sample: &GroundingSample) -> ForwardOutput {
        self.forward(g, &sample.image, &sample.tokens)
    }
}

fn l2_normalize_row<S: Scalar>(g: &mut Graph<S>, row: TensorId) -> TensorId {
    let sq = g.tape.mul(row, row);
    let total = g.tape.sum_all(sq);
    let eps = g.tape.scalar(1e-12);
    let safe = g.tape.add(total, eps);
    let norm = g.tape.sqrt(safe);
    let inv = g.tape.recip(norm);
    g.tape.mul(row, inv)
}
