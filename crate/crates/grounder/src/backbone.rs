//! Toy CLIP-style dual encoder. Both towers expose per-layer stepping so
//! adapters can be interleaved between layers, and every parameter lives
//! under the "backbone." prefix so the whole tower can be frozen while
//! gradients still flow through it into the adapters.

use crate::config::ModelConfig;
use crate::data::PAD;
use crate::nn::{LayerNorm, Linear, Mlp, MultiHeadAttention};
use crate::params::{Graph, ParamId, ParamStore};
use crate::rng::CounterRng;
use crate::scalar::Scalar;
use crate::tensor::TensorId;

/// Raster-order non-overlapping patches; each row is one patch of length
/// 3·P², pixels row-major with interleaved channels. Lossless.
pub fn patchify<S: Scalar>(image: &[f32], size: usize, patch: usize) -> Vec<S> {
    assert!(
        size % patch == 0,
        "patchify: image extent {size} not divisible by patch {patch}"
    );
    assert_eq!(image.len(), size * size * 3, "patchify: image buffer length mismatch");
    let per_side = size / patch;
    let mut out = Vec::with_capacity(image.len());
    for py in 0..per_side {
        for px in 0..per_side {
            for y in 0..patch {
                for x in 0..patch {
                    let gy = py * patch + y;
                    let gx = px * patch + x;
                    let at = (gy * size + gx) * 3;
                    out.push(S::from_f64(image[at] as f64));
                    out.push(S::from_f64(image[at + 1] as f64));
                    out.push(S::from_f64(image[at + 2] as f64));
                }
            }
        }
    }
    out
}

/// Inverse of `patchify`; reassembles the image bit-exactly.
pub fn unpatchify(patches: &[f32], size: usize, patch: usize) -> Vec<f32> {
    assert!(size % patch == 0);
    assert_eq!(patches.len(), size * size * 3);
    let per_side = size / patch;
    let mut out = vec![0.0f32; size * size * 3];
    let mut it = patches.iter();
    for py in 0..per_side {
        for px in 0..per_side {
            for y in 0..patch {
                for x in 0..patch {
                    let gy = py * patch + y;
                    let gx = px * patch + x;
                    let at = (gy * size + gx) * 3;
                    out[at] = *it.next().unwrap();
                    out[at + 1] = *it.next().unwrap();
                    out[at + 2] = *it.next().unwrap();
                }
            }
        }
    }
    out
}

/// Pre-norm transformer block: x + MHSA(LN(x)), then h + MLP(LN(h)).
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_mlp: LayerNorm,
    pub mlp: Mlp,
}

impl EncoderLayer {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut CounterRng,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Self {
        EncoderLayer {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), dim),
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), dim, heads),
            ln_mlp: LayerNorm::new(store, &format!("{name}.ln_mlp"), dim),
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), dim, dim * mlp_ratio, dim),
        }
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        x: TensorId,
        key_mask: Option<&[bool]>,
    ) -> TensorId {
        let normed = self.ln_attn.forward(g, x);
        let (attended, _) = self.attn.forward(g, normed, normed, normed, key_mask);
        let h = g.tape.add(attended, x);
        let normed2 = self.ln_mlp.forward(g, h);
        let fed = self.mlp.forward(g, normed2);
        g.tape.add(fed, h)
    }
}

pub struct ImageEncoder {
    pub patch_proj: Linear,
    pub cls: ParamId,
    pub pos: ParamId,
    pub embed_ln: LayerNorm,
    pub layers: Vec<EncoderLayer>,
    pub size: usize,
    pub patch: usize,
}

impl ImageEncoder {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, rng: &mut CounterRng, cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let patch_dim = 3 * cfg.patch * cfg.patch;
        let n_tokens = cfg.num_patches() + 1;
        let patch_proj = Linear::new(store, rng, "backbone.img.patch_proj", patch_dim, d);
        let cls = store.uniform("backbone.img.cls", &[1, d], d, rng);
        let pos = store.uniform("backbone.img.pos", &[n_tokens, d], d, rng);
        let embed_ln = LayerNorm::new(store, "backbone.img.embed_ln", d);
        let layers = (1..=cfg.layers)
            .map(|i| {
                EncoderLayer::new(
                    store,
                    rng,
                    &format!("backbone.img.layer{i}"),
                    d,
                    cfg.heads,
                    cfg.mlp_ratio,
                )
            })
            .collect();
        ImageEncoder { patch_proj, cls, pos, embed_ln, layers, size: cfg.image_size, patch: cfg.patch }
    }

    /// Token embedding: LN([cls; proj(patches)] + positions).
    pub fn embed<S: Scalar>(&self, g: &mut Graph<S>, image: &[f32]) -> TensorId {
        let patches = patchify::<S>(image, self.size, self.patch);
        let per_side = self.size / self.patch;
        let n_v = per_side * per_side;
        let patch_dim = 3 * self.patch * self.patch;
        let pid = g.tape.leaf(patches, &[n_v, patch_dim], false);
        let projected = self.patch_proj.forward(g, pid);
        let cls = g.param(self.cls);
        let tokens = g.tape.concat(&[cls, projected], 0);
        let pos = g.param(self.pos);
        let with_pos = g.tape.add(tokens, pos);
        self.embed_ln.forward(g, with_pos)
    }

    /// Apply layer `i` (1-based, matching the architecture diagrams).
    pub fn layer<S: Scalar>(&self, g: &mut Graph<S>, i: usize, x: TensorId) -> TensorId {
        assert!(
            i >= 1 && i <= self.layers.len(),
            "image layer index {i} out of range 1..={}",
            self.layers.len()
        );
        self.layers[i - 1].forward(g, x, None)
    }

    /// Monolithic encode; identical to stepping layers externally.
    pub fn encode<S: Scalar>(&self, g: &mut Graph<S>, image: &[f32]) -> TensorId {
        let mut z = self.embed(g, image);
        for i in 1..=self.layers.len() {
            z = self.layer(g, i, z);
        }
        z
    }
}

pub struct TextEncoder {
    pub table: ParamId,
    pub pos: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub vocab: usize,
    pub max_len: usize,
}

impl TextEncoder {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, rng: &mut CounterRng, cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let table = store.uniform("backbone.txt.embed", &[cfg.vocab_size, d], d, rng);
        let pos = store.uniform("backbone.txt.pos", &[cfg.max_text_len, d], d, rng);
        let layers = (1..=cfg.layers)
            .map(|i| {
                EncoderLayer::new(
                    store,
                    rng,
                    &format!("backbone.txt.layer{i}"),
                    d,
                    cfg.heads,
                    cfg.mlp_ratio,
                )
            })
            .collect();
        TextEncoder { table, pos, layers, vocab: cfg.vocab_size, max_len: cfg.max_text_len }
    }

    /// Padding-aware key mask: true at real tokens, false at PAD.
    pub fn key_mask(&self, tokens: &[u16]) -> Vec<bool> {
        tokens.iter().map(|&t| t != PAD).collect()
    }

    /// Token + positional embeddings (no LN at the text embed).
    pub fn embed<S: Scalar>(&self, g: &mut Graph<S>, tokens: &[u16]) -> TensorId {
        assert!(
            tokens.len() <= self.max_len,
            "sequence of {} tokens exceeds max length {}",
            tokens.len(),
            self.max_len
        );
        for &t in tokens {
            assert!(
                (t as usize) < self.vocab,
                "vocabulary error: token id {t} outside vocabulary of {}",
                self.vocab
            );
        }
        let rows: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let table = g.param(self.table);
        let emb = g.tape.gather_rows(table, &rows);
        let pos = g.param(self.pos);
        let pos_slice = g.tape.slice(pos, 0, 0, tokens.len());
        g.tape.add(emb, pos_slice)
    }

    pub fn layer<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        i: usize,
        x: TensorId,
        key_mask: &[bool],
    ) -> TensorId {
        assert!(
            i >= 1 && i <= self.layers.len(),
            "text layer index {i} out of range 1..={}",
            self.layers.len()
        );
        self.layers[i - 1].forward(g, x, Some(key_mask))
    }

    pub fn encode<S: Scalar>(&self, g: &mut Graph<S>, tokens: &[u16]) -> TensorId {
        let mask = self.key_mask(tokens);
        let mut z = self.embed(g, tokens);
        for i in 1..=self.layers.len() {
            z = self.layer(g, i, z, &mask);
        }
        z
    }
}
