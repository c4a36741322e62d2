//! Synthetic grounding scenes: colored geometric shapes with distractors
//! and templated referring expressions, rendered with pixel-exact masks
//! and tight boxes. The whole dataset is a pure function of (seed, config),
//! and every expression is unique by construction — generation fails loudly
//! rather than emit an ambiguous referent.

use base64::Engine;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::sync::OnceLock;

use crate::boxes::BoxCxcywh;
use crate::config::GenConfig;
use crate::rng::CounterRng;

pub const PAD: u16 = 0;
pub const SOS: u16 = 1;
pub const EOS: u16 = 2;

/// Centroid dead zone around the image center; relations only apply to
/// objects clearly on one side, keeping "left/right" crisply learnable.
pub const RELATION_DEAD_ZONE: f64 = 4.0;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("word not in vocabulary: {0}")]
    UnknownWord(String),
    #[error("token id {0} outside vocabulary")]
    UnknownId(u16),
    #[error("could not generate an unambiguous scene for seed {seed} after {attempts} attempts")]
    Ambiguous { seed: u64, attempts: usize },
    #[error("dataset record {line}: {reason}")]
    BadRecord { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ── Vocabulary ──────────────────────────────────────────────────────

pub struct Vocabulary {
    words: Vec<&'static str>,
}

static VOCAB: OnceLock<Vocabulary> = OnceLock::new();

impl Vocabulary {
    /// Fixed closed vocabulary: specials, function words, attributes.
    pub fn shared() -> &'static Vocabulary {
        VOCAB.get_or_init(|| Vocabulary {
            words: vec![
                "<pad>", "<sos>", "<eos>", // ids 0..=2 reserved
                "the", "on", "red", "green", "blue", "yellow", "circle", "square", "triangle",
                "big", "small", "left", "right", "top", "bottom",
            ],
        })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> Result<u16, DataError> {
        self.words
            .iter()
            .position(|w| *w == word)
            .map(|i| i as u16)
            .ok_or_else(|| DataError::UnknownWord(word.to_string()))
    }

    pub fn word(&self, id: u16) -> Result<&'static str, DataError> {
        self.words.get(id as usize).copied().ok_or(DataError::UnknownId(id))
    }

    /// [SOS, words..., EOS], right-padded with PAD to `max_len`.
    pub fn tokenize(&self, expression: &str, max_len: usize) -> Result<Vec<u16>, DataError> {
        let mut ids = vec![SOS];
        for w in expression.split_whitespace() {
            ids.push(self.id(&w.to_lowercase())?);
        }
        ids.push(EOS);
        assert!(
            ids.len() <= max_len,
            "expression of {} tokens exceeds max length {max_len}",
            ids.len()
        );
        ids.resize(max_len, PAD);
        Ok(ids)
    }

    /// Bracketed but unpadded form.
    pub fn tokenize_unpadded(&self, expression: &str) -> Result<Vec<u16>, DataError> {
        let mut ids = vec![SOS];
        for w in expression.split_whitespace() {
            ids.push(self.id(&w.to_lowercase())?);
        }
        ids.push(EOS);
        Ok(ids)
    }

    pub fn detokenize(&self, ids: &[u16]) -> Result<String, DataError> {
        let mut words = Vec::new();
        for &id in ids {
            if id == PAD || id == SOS || id == EOS {
                continue;
            }
            words.push(self.word(id)?);
        }
        Ok(words.join(" "))
    }
}

// ── Scene model ─────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];
    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
    /// Analytic area for the size parameter `r`.
    pub fn area(self, r: f64) -> f64 {
        match self {
            Shape::Circle => std::f64::consts::PI * r * r,
            Shape::Square => 4.0 * r * r,
            Shape::Triangle => 3.0 * 3f64.sqrt() / 4.0 * r * r,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];
    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }
    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [0.90, 0.15, 0.15],
            Color::Green => [0.15, 0.80, 0.20],
            Color::Blue => [0.20, 0.30, 0.90],
            Color::Yellow => [0.95, 0.85, 0.20],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SizeClass {
    Big,
    Small,
}

impl SizeClass {
    pub const ALL: [SizeClass; 2] = [SizeClass::Big, SizeClass::Small];
    pub fn word(self) -> &'static str {
        match self {
            SizeClass::Big => "big",
            SizeClass::Small => "small",
        }
    }
    /// Radius bounds as a fraction of the image extent (8–11 px and
    /// 4–6 px at the default 64×64).
    pub fn radius_range(self, image_size: usize) -> (f64, f64) {
        let w = image_size as f64;
        match self {
            SizeClass::Big => (0.125 * w, 0.172 * w),
            SizeClass::Small => (0.0625 * w, 0.094 * w),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relation {
    Left,
    Right,
    Top,
    Bottom,
}

impl Relation {
    pub const ALL: [Relation; 4] = [Relation::Left, Relation::Right, Relation::Top, Relation::Bottom];
    pub fn word(self) -> &'static str {
        match self {
            Relation::Left => "left",
            Relation::Right => "right",
            Relation::Top => "top",
            Relation::Bottom => "bottom",
        }
    }
    pub fn holds(self, obj: &SceneObject, image_size: usize) -> bool {
        let mid = image_size as f64 / 2.0;
        match self {
            Relation::Left => obj.cx < mid - RELATION_DEAD_ZONE,
            Relation::Right => obj.cx > mid + RELATION_DEAD_ZONE,
            Relation::Top => obj.cy < mid - RELATION_DEAD_ZONE,
            Relation::Bottom => obj.cy > mid + RELATION_DEAD_ZONE,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    pub size: SizeClass,
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
}

impl SceneObject {
    pub fn contains(&self, px: f64, py: f64) -> bool {
        let dx = px - self.cx;
        let dy = py - self.cy;
        match self.shape {
            Shape::Circle => dx * dx + dy * dy <= self.r * self.r,
            Shape::Square => dx.abs() <= self.r && dy.abs() <= self.r,
            Shape::Triangle => {
                // equilateral triangle inscribed in the radius circle,
                // apex pointing up (negative y)
                let s3 = 3f64.sqrt();
                let (ax, ay) = (self.cx, self.cy - self.r);
                let (bx, by) = (self.cx - s3 / 2.0 * self.r, self.cy + self.r / 2.0);
                let (cx2, cy2) = (self.cx + s3 / 2.0 * self.r, self.cy + self.r / 2.0);
                let sign = |x1: f64, y1: f64, x2: f64, y2: f64| (px - x2) * (y1 - y2) - (x1 - x2) * (py - y2);
                let d1 = sign(ax, ay, bx, by);
                let d2 = sign(bx, by, cx2, cy2);
                let d3 = sign(cx2, cy2, ax, ay);
                let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(has_neg && has_pos)
            }
        }
    }
}

/// Attribute predicate behind a referring expression.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Expression {
    pub shape: Shape,
    pub color: Option<Color>,
    pub size: Option<SizeClass>,
    pub relation: Option<Relation>,
}

impl Expression {
    pub fn matches(&self, obj: &SceneObject, image_size: usize) -> bool {
        obj.shape == self.shape
            && self.color.map_or(true, |c| obj.color == c)
            && self.size.map_or(true, |s| obj.size == s)
            && self.relation.map_or(true, |r| r.holds(obj, image_size))
    }

    pub fn words(&self) -> String {
        let mut parts = vec!["the"];
        if let Some(s) = self.size {
            parts.push(s.word());
        }
        if let Some(c) = self.color {
            parts.push(c.word());
        }
        parts.push(self.shape.word());
        if let Some(r) = self.relation {
            parts.push("on");
            parts.push("the");
            parts.push(r.word());
        }
        parts.join(" ")
    }
}

// ── Samples ─────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct GroundingSample {
    pub seed: u64,
    /// H×W×3 floats in [0,1], row-major, channels interleaved.
    pub image: Vec<f32>,
    /// Padded token ids, length = max_text_len.
    pub tokens: Vec<u16>,
    /// Normalized center-form tight box of the referent.
    pub bbox: BoxCxcywh,
    /// H×W binary mask of the referent.
    pub mask: Vec<u8>,
    pub image_size: usize,
}

impl GroundingSample {
    pub fn expression(&self) -> String {
        Vocabulary::shared().detokenize(&self.tokens).expect("sample tokens decode")
    }
}

const BACKGROUND: [f32; 3] = [0.12, 0.12, 0.14];
const GEN_ATTEMPTS: usize = 100;

/// Deterministic scene generation: render shapes, pick a referent, emit the
/// minimal distinguishing expression. Errors instead of ever producing an
/// ambiguous sample.
pub fn generate_scene(
    seed: u64,
    cfg: &GenConfig,
    image_size: usize,
    max_text_len: usize,
) -> Result<GroundingSample, DataError> {
    let mut rng = CounterRng::new(seed);
    for _attempt in 0..GEN_ATTEMPTS {
        let Some(objects) = sample_layout(&mut rng, cfg, image_size) else {
            continue;
        };
        let referent = rng.below(objects.len());
        let Some(expr) = minimal_expression(&objects, referent, image_size) else {
            continue;
        };
        let tokens = Vocabulary::shared().tokenize(&expr.words(), max_text_len)?;
        let (image, mask) = render(&objects, referent, image_size);
        let bbox = tight_box(&mask, image_size)
            .expect("referent mask cannot be empty: shapes always cover their center pixel");
        return Ok(GroundingSample { seed, image, tokens, bbox, mask, image_size });
    }
    Err(DataError::Ambiguous { seed, attempts: GEN_ATTEMPTS })
}

fn sample_layout(rng: &mut CounterRng, cfg: &GenConfig, image_size: usize) -> Option<Vec<SceneObject>> {
    let count = cfg.min_objects + rng.below(cfg.max_objects - cfg.min_objects + 1);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
    let w = image_size as f64;
    for _ in 0..count {
        let mut placed = false;
        for _try in 0..50 {
            let shape = *rng.pick(&Shape::ALL);
            let color = *rng.pick(&Color::ALL);
            let size = *rng.pick(&SizeClass::ALL);
            let (rlo, rhi) = size.radius_range(image_size);
            let r = rng.uniform(rlo, rhi);
            let cx = rng.uniform(r + 1.0, w - r - 1.0);
            let cy = rng.uniform(r + 1.0, w - r - 1.0);
            let candidate = SceneObject { shape, color, size, cx, cy, r };
            let clear = objects.iter().all(|o| {
                let dx = o.cx - cx;
                let dy = o.cy - cy;
                (dx * dx + dy * dy).sqrt() >= o.r + r + 2.0
            });
            if clear {
                objects.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }
    Some(objects)
}

/// Candidate templates ordered by word count, ties broken by template
/// order; the first uniquely-satisfied one wins.
fn minimal_expression(objects: &[SceneObject], referent: usize, image_size: usize) -> Option<Expression> {
    let obj = &objects[referent];
    let rels: Vec<Relation> =
        Relation::ALL.into_iter().filter(|r| r.holds(obj, image_size)).collect();
    let mut candidates: Vec<Expression> = Vec::new();
    let base = Expression { shape: obj.shape, color: None, size: None, relation: None };
    candidates.push(base);
    candidates.push(Expression { color: Some(obj.color), ..base });
    candidates.push(Expression { size: Some(obj.size), ..base });
    for &r in &rels {
        candidates.push(Expression { relation: Some(r), ..base });
    }
    candidates.push(Expression { color: Some(obj.color), size: Some(obj.size), ..base });
    for &r in &rels {
        candidates.push(Expression { color: Some(obj.color), relation: Some(r), ..base });
    }
    for &r in &rels {
        candidates.push(Expression { size: Some(obj.size), relation: Some(r), ..base });
    }
    for &r in &rels {
        candidates.push(Expression {
            color: Some(obj.color),
            size: Some(obj.size),
            relation: Some(r),
            ..base
        });
    }
    candidates.into_iter().find(|e| {
        objects.iter().filter(|o| e.matches(o, image_size)).count() == 1
    })
}

fn render(objects: &[SceneObject], referent: usize, image_size: usize) -> (Vec<f32>, Vec<u8>) {
    let n = image_size;
    let mut image = Vec::with_capacity(n * n * 3);
    for _ in 0..n * n {
        image.extend_from_slice(&BACKGROUND);
    }
    let mut mask = vec![0u8; n * n];
    for (oi, obj) in objects.iter().enumerate() {
        let rgb = obj.color.rgb();
        let x0 = (obj.cx - obj.r - 1.0).floor().max(0.0) as usize;
        let x1 = ((obj.cx + obj.r + 1.0).ceil() as usize).min(n - 1);
        let y0 = (obj.cy - obj.r - 1.0).floor().max(0.0) as usize;
        let y1 = ((obj.cy + obj.r + 1.0).ceil() as usize).min(n - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                if obj.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    let at = (y * n + x) * 3;
                    image[at..at + 3].copy_from_slice(&rgb);
                    if oi == referent {
                        mask[y * n + x] = 1;
                    }
                }
            }
        }
    }
    (image, mask)
}

/// Tight pixel-extent box of a binary mask, normalized center form.
pub fn tight_box(mask: &[u8], image_size: usize) -> Option<BoxCxcywh> {
    let n = image_size;
    let (mut xmin, mut xmax, mut ymin, mut ymax) = (n, 0usize, n, 0usize);
    let mut any = false;
    for y in 0..n {
        for x in 0..n {
            if mask[y * n + x] != 0 {
                any = true;
                xmin = xmin.min(x);
                xmax = xmax.max(x);
                ymin = ymin.min(y);
                ymax = ymax.max(y);
            }
        }
    }
    if !any {
        return None;
    }
    let w = n as f64;
    Some(BoxCxcywh::new(
        (xmin + xmax + 1) as f64 / 2.0 / w,
        (ymin + ymax + 1) as f64 / 2.0 / w,
        (xmax - xmin + 1) as f64 / w,
        (ymax - ymin + 1) as f64 / w,
    ))
}

/// Whole dataset as a pure function of (seed, config). Per-sample seeds are
/// derived, so generation is order-independent and parallel.
pub fn generate_dataset(
    cfg: &GenConfig,
    image_size: usize,
    max_text_len: usize,
) -> Result<Vec<GroundingSample>, DataError> {
    let root = CounterRng::new(cfg.seed);
    let seeds: Vec<u64> = (0..cfg.count).map(|i| root.derive(i as u64 + 1).next_u64()).collect();
    seeds
        .into_par_iter()
        .map(|s| generate_scene(s, cfg, image_size, max_text_len))
        .collect()
}

/// Deterministic disjoint 90/10 split over sample indices.
pub fn dataset_split(total: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    assert!(total >= 2, "dataset_split needs at least 2 samples, got {total}");
    let mut idx: Vec<usize> = (0..total).collect();
    let mut rng = CounterRng::new(seed).derive(0x5B17);
    rng.shuffle(&mut idx);
    let val = (total / 10).max(1);
    let val_set = idx[..val].to_vec();
    let train_set = idx[val..].to_vec();
    (train_set, val_set)
}

// ── Run-length encoding for masks ────────────────────────────────────

/// Alternating run lengths over the row-major bitmap, starting with the
/// number of zeros.
pub fn rle_encode(mask: &[u8]) -> Vec<u32> {
    let mut runs = Vec::new();
    let mut current = 0u8;
    let mut count = 0u32;
    for &m in mask {
        let bit = (m != 0) as u8;
        if bit == current {
            count += 1;
        } else {
            runs.push(count);
            current = bit;
            count = 1;
        }
    }
    runs.push(count);
    runs
}

pub fn rle_decode(runs: &[u32], len: usize) -> Result<Vec<u8>, String> {
    let mut mask = Vec::with_capacity(len);
    let mut bit = 0u8;
    for &r in runs {
        for _ in 0..r {
            mask.push(bit);
        }
        bit ^= 1;
    }
    if mask.len() != len {
        return Err(format!("run lengths cover {} pixels, expected {len}", mask.len()));
    }
    Ok(mask)
}

// ── Dataset file format ─────────────────────────────────────────────
// One JSON object per line. Full records carry the rendered payload;
// seed-only records are regenerated from (seed, config) on load.

#[derive(Serialize, Deserialize)]
struct Record {
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    tokens: Option<Vec<u16>>,
    #[serde(rename = "box", skip_serializing_if = "Option::is_none")]
    bbox: Option<[f64; 4]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    image: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mask: Option<Vec<u32>>,
}

pub fn write_dataset(
    out: &mut impl Write,
    samples: &[GroundingSample],
    seeds_only: bool,
) -> Result<(), DataError> {
    let b64 = base64::engine::general_purpose::STANDARD;
    for s in samples {
        let rec = if seeds_only {
            Record { seed: s.seed, tokens: None, bbox: None, image: None, mask: None }
        } else {
            let mut bytes = Vec::with_capacity(s.image.len() * 4);
            for v in &s.image {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            Record {
                seed: s.seed,
                tokens: Some(s.tokens.clone()),
                bbox: Some(s.bbox.as_array()),
                image: Some(b64.encode(&bytes)),
                mask: Some(rle_encode(&s.mask)),
            }
        };
        serde_json::to_writer(&mut *out, &rec).map_err(|e| std::io::Error::other(e))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_dataset(
    input: &mut impl BufRead,
    cfg: &GenConfig,
    image_size: usize,
    max_text_len: usize,
) -> Result<Vec<GroundingSample>, DataError> {
    let b64 = base64::engine::general_purpose::STANDARD;
    let mut samples = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| DataError::BadRecord { line: lineno + 1, reason };
        let rec: Record = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let sample = match (rec.tokens, rec.bbox, rec.image, rec.mask) {
            (Some(tokens), Some(bx), Some(image_b64), Some(runs)) => {
                let bytes = b64.decode(image_b64.as_bytes()).map_err(|e| bad(e.to_string()))?;
                if bytes.len() != image_size * image_size * 3 * 4 {
                    return Err(bad(format!("image payload of {} bytes", bytes.len())));
                }
                let image: Vec<f32> = bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                let mask = rle_decode(&runs, image_size * image_size).map_err(bad)?;
                if tokens.len() != max_text_len {
                    return Err(bad(format!("{} tokens, expected {max_text_len}", tokens.len())));
                }
                for &t in &tokens {
                    if (t as usize) >= Vocabulary::shared().len() {
                        return Err(bad(format!("token id {t} outside vocabulary")));
                    }
                }
                GroundingSample {
                    seed: rec.seed,
                    image,
                    tokens,
                    bbox: BoxCxcywh::from_array(bx),
                    mask,
                    image_size,
                }
            }
            (None, None, None, None) => generate_scene(rec.seed, cfg, image_size, max_text_len)?,
            _ => return Err(bad("record mixes full and seed-only fields".into())),
        };
        samples.push(sample);
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gen_cfg() -> GenConfig {
        GenConfig { seed: 0, count: 8, min_objects: 2, max_objects: 5 }
    }

    #[test]
    fn same_seed_gives_bit_identical_samples() {
        let cfg = gen_cfg();
        let a = generate_scene(0, &cfg, 64, 12).unwrap();
        let b = generate_scene(0, &cfg, 64, 12).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.mask, b.mask);
        assert!(a.image.iter().zip(b.image.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn rendered_circle_area_matches_analytic_within_pixel_ring() {
        // isolate a circle by rendering it directly
        let obj = SceneObject {
            shape: Shape::Circle,
            color: Color::Red,
            size: SizeClass::Big,
            cx: 32.0,
            cy: 32.0,
            r: 10.0,
        };
        let (_, mask) = render(&[obj], 0, 64);
        let count = mask.iter().filter(|&&m| m != 0).count() as f64;
        let analytic = obj.shape.area(obj.r);
        let ring = 2.0 * std::f64::consts::PI * (obj.r + 1.0);
        assert!(
            (count - analytic).abs() <= ring,
            "pixel count {count} vs analytic {analytic} (ring bound {ring})"
        );
    }

    #[test]
    fn all_shape_areas_match_analytic_within_perimeter() {
        for shape in Shape::ALL {
            let obj = SceneObject {
                shape,
                color: Color::Blue,
                size: SizeClass::Big,
                cx: 32.0,
                cy: 32.0,
                r: 10.0,
            };
            let (_, mask) = render(&[obj], 0, 64);
            let count = mask.iter().filter(|&&m| m != 0).count() as f64;
            let analytic = shape.area(obj.r);
            let bound = 8.0 * (obj.r + 1.0); // generous perimeter-scale bound
            assert!(
                (count - analytic).abs() <= bound,
                "{shape:?}: {count} vs {analytic}"
            );
        }
    }

    #[test]
    fn tight_box_equals_mask_extents() {
        let cfg = gen_cfg();
        for seed in 0..20u64 {
            let s = generate_scene(seed, &cfg, 64, 12).unwrap();
            let b = s.bbox.to_xyxy();
            let n = 64usize;
            let (mut xmin, mut xmax, mut ymin, mut ymax) = (n, 0, n, 0);
            for y in 0..n {
                for x in 0..n {
                    if s.mask[y * n + x] != 0 {
                        xmin = xmin.min(x);
                        xmax = xmax.max(x);
                        ymin = ymin.min(y);
                        ymax = ymax.max(y);
                    }
                }
            }
            assert!((b.x1 * 64.0 - xmin as f64).abs() < 1e-9);
            assert!((b.x2 * 64.0 - (xmax + 1) as f64).abs() < 1e-9);
            assert!((b.y1 * 64.0 - ymin as f64).abs() < 1e-9);
            assert!((b.y2 * 64.0 - (ymax + 1) as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn referent_is_unique_under_predicate_recheck() {
        let cfg = GenConfig { seed: 3, count: 0, min_objects: 2, max_objects: 5 };
        for seed in 100..200u64 {
            let mut rng = CounterRng::new(seed);
            let Some(objects) = sample_layout(&mut rng, &cfg, 64) else { continue };
            let referent = rng.below(objects.len());
            if let Some(expr) = minimal_expression(&objects, referent, 64) {
                let hits: Vec<usize> = (0..objects.len())
                    .filter(|&i| expr.matches(&objects[i], 64))
                    .collect();
                assert_eq!(hits, vec![referent], "seed {seed}: expression {expr:?}");
                // every named attribute must be true of the referent
                let obj = &objects[referent];
                assert_eq!(expr.shape, obj.shape);
                if let Some(c) = expr.color {
                    assert_eq!(c, obj.color);
                }
                if let Some(sz) = expr.size {
                    assert_eq!(sz, obj.size);
                }
                if let Some(r) = expr.relation {
                    assert!(r.holds(obj, 64));
                }
            }
        }
    }

    #[test]
    fn tokenize_pads_and_brackets() {
        let v = Vocabulary::shared();
        let ids = v.tokenize("red circle", 12).unwrap();
        assert_eq!(ids.len(), 12);
        assert_eq!(ids[0], SOS);
        assert_eq!(ids[1], v.id("red").unwrap());
        assert_eq!(ids[2], v.id("circle").unwrap());
        assert_eq!(ids[3], EOS);
        assert!(ids[4..].iter().all(|&t| t == PAD));
    }

    #[test]
    fn tokenize_empty_expression() {
        let v = Vocabulary::shared();
        assert_eq!(v.tokenize_unpadded("").unwrap(), vec![SOS, EOS]);
        let padded = v.tokenize("", 12).unwrap();
        assert_eq!(&padded[..2], &[SOS, EOS]);
        assert!(padded[2..].iter().all(|&t| t == PAD));
    }

    #[test]
    fn tokenize_round_trip() {
        let v = Vocabulary::shared();
        let text = "the small red triangle on the bottom";
        let ids = v.tokenize(text, 12).unwrap();
        assert_eq!(v.detokenize(&ids).unwrap(), text);
    }

    #[test]
    fn unknown_word_is_an_error() {
        let v = Vocabulary::shared();
        assert!(matches!(v.tokenize("purple circle", 12), Err(DataError::UnknownWord(_))));
    }

    #[test]
    fn split_is_disjoint_covering_and_deterministic() {
        let (train, val) = dataset_split(10, 4);
        assert_eq!(train.len(), 9);
        assert_eq!(val.len(), 1);
        let mut all: Vec<usize> = train.iter().chain(val.iter()).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        let (t2, v2) = dataset_split(10, 4);
        assert_eq!(train, t2);
        assert_eq!(val, v2);
        let (t3, _) = dataset_split(10, 5);
        assert_ne!(train, t3);
    }

    #[test]
    fn rle_round_trips() {
        let mask = vec![0, 0, 1, 1, 1, 0, 1, 0, 0, 0];
        let runs = rle_encode(&mask);
        assert_eq!(runs, vec![2, 3, 1, 1, 3]);
        assert_eq!(rle_decode(&runs, 10).unwrap(), mask);
        // all-ones starts with a zero-length zero run
        let ones = vec![1, 1, 1];
        assert_eq!(rle_encode(&ones), vec![0, 3]);
        assert_eq!(rle_decode(&[0, 3], 3).unwrap(), ones);
    }

    #[test]
    fn dataset_file_round_trip_both_modes() {
        let cfg = GenConfig { seed: 9, count: 4, min_objects: 2, max_objects: 4 };
        let samples = generate_dataset(&cfg, 64, 12).unwrap();
        for seeds_only in [false, true] {
            let mut buf = Vec::new();
            write_dataset(&mut buf, &samples, seeds_only).unwrap();
            let back = read_dataset(&mut &buf[..], &cfg, 64, 12).unwrap();
            assert_eq!(back.len(), samples.len());
            for (a, b) in samples.iter().zip(back.iter()) {
                assert_eq!(a.tokens, b.tokens);
                assert_eq!(a.mask, b.mask);
                assert_eq!(a.bbox, b.bbox);
                assert!(a.image.iter().zip(b.image.iter()).all(|(x, y)| x == y));
            }
        }
    }

    #[test]
    fn expressions_use_known_vocabulary_and_fit_length() {
        let cfg = GenConfig { seed: 1, count: 64, min_objects: 2, max_objects: 5 };
        let samples = generate_dataset(&cfg, 64, 12).unwrap();
        for s in samples {
            assert_eq!(s.tokens.len(), 12);
            assert_eq!(s.tokens[0], SOS);
            assert!(s.tokens.contains(&EOS));
            assert!(s.mask.iter().any(|&m| m != 0));
        }
    }
}
