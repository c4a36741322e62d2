//! Configuration surface: typed model/train/data configs, the flat
//! key=value file format, and validation. Unknown keys are rejected so
//! ablation sweeps cannot silently typo an axis.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::losses::LossWeights;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown config key: {0}")]
    UnknownKey(String),
    #[error("invalid value for {key}: {value} ({reason})")]
    InvalidValue { key: String, value: String, reason: String },
    #[error("config violates a constraint: {0}")]
    Constraint(String),
    #[error("malformed config line {line}: {text}")]
    Malformed { line: usize, text: String },
}

/// Which direction the adapter injects multimodal signal back into the
/// frozen backbone streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Both,
    ImageOnly,
    TextOnly,
    None,
}

impl Direction {
    pub fn inject_image(self) -> bool {
        matches!(self, Direction::Both | Direction::ImageOnly)
    }
    pub fn inject_text(self) -> bool {
        matches!(self, Direction::Both | Direction::TextOnly)
    }
    pub fn all() -> [Direction; 4] {
        [Direction::Both, Direction::ImageOnly, Direction::TextOnly, Direction::None]
    }
}

impl FromStr for Direction {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "both" => Ok(Direction::Both),
            "image-only" => Ok(Direction::ImageOnly),
            "text-only" => Ok(Direction::TextOnly),
            "none" => Ok(Direction::None),
            other => Err(format!("expected both|image-only|text-only|none, got {other}")),
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Direction::Both => "both",
            Direction::ImageOnly => "image-only",
            Direction::TextOnly => "text-only",
            Direction::None => "none",
        };
        f.write_str(s)
    }
}

/// Where the decoder's initial queries come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueryStrategy {
    /// Adapter-refined queries (the full mechanism).
    Referential,
    /// A separately trained, randomly initialized query matrix.
    RandomInit,
    /// The projected global text token replicated per query.
    LinguisticEmbedding,
    /// All-zero queries; the vanilla-decoder degenerate case.
    Zero,
}

impl QueryStrategy {
    pub fn all() -> [QueryStrategy; 4] {
        [
            QueryStrategy::Referential,
            QueryStrategy::RandomInit,
            QueryStrategy::LinguisticEmbedding,
            QueryStrategy::Zero,
        ]
    }
}

impl FromStr for QueryStrategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "referential" => Ok(QueryStrategy::Referential),
            "random-init" => Ok(QueryStrategy::RandomInit),
            "linguistic-embedding" => Ok(QueryStrategy::LinguisticEmbedding),
            "zero" => Ok(QueryStrategy::Zero),
            other => {
                Err(format!("expected referential|random-init|linguistic-embedding|zero, got {other}"))
            }
        }
    }
}

impl fmt::Display for QueryStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            QueryStrategy::Referential => "referential",
            QueryStrategy::RandomInit => "random-init",
            QueryStrategy::LinguisticEmbedding => "linguistic-embedding",
            QueryStrategy::Zero => "zero",
        };
        f.write_str(s)
    }
}

/// Which text token carries the global sentence embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GlobalToken {
    Sos,
    Eos,
}

impl FromStr for GlobalToken {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sos" => Ok(GlobalToken::Sos),
            "eos" => Ok(GlobalToken::Eos),
            other => Err(format!("expected sos|eos, got {other}")),
        }
    }
}

impl fmt::Display for GlobalToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GlobalToken::Sos => "sos",
            GlobalToken::Eos => "eos",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub d_adapter: usize,
    pub adapter_heads: usize,
    pub adapter_layers: Vec<usize>,
    pub fusion_layers: Vec<usize>,
    pub num_queries: usize,
    pub direction: Direction,
    pub strategy: QueryStrategy,
    pub text_global: GlobalToken,
    /// Decoder post-attention residual source. false (default): residual
    /// from the block inputs, which keeps image content and positions in
    /// the multimodal map. true: residual from the attention output
    /// itself — that variant discards the image stream (the multimodal map
    /// collapses to text mixtures) and cannot localize; it exists as a
    /// compatibility ablation.
    pub decoder_self_residual: bool,
    pub mask_bilinear: bool,
    pub seg_head: bool,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            patch: 8,
            d_model: 64,
            layers: 6,
            heads: 4,
            mlp_ratio: 2,
            vocab_size: crate::data::Vocabulary::shared().len(),
            max_text_len: 12,
            d_adapter: 32,
            adapter_heads: 4,
            adapter_layers: vec![2, 4, 6],
            fusion_layers: vec![2, 4, 6],
            num_queries: 3,
            direction: Direction::Both,
            strategy: QueryStrategy::Referential,
            text_global: GlobalToken::Sos,
            decoder_self_residual: false,
            mask_bilinear: true,
            seg_head: true,
            init_seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn num_patches(&self) -> usize {
        self.patches_per_side() * self.patches_per_side()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let c = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(ConfigError::Constraint(msg.to_string()))
            }
        };
        c(self.image_size % self.patch == 0, "image_size must be divisible by patch")?;
        c(self.d_model % self.heads == 0, "d_model must be divisible by heads")?;
        c(self.d_adapter % self.adapter_heads == 0, "d_adapter must be divisible by adapter_heads")?;
        c(self.d_adapter < self.d_model, "d_adapter must be smaller than d_model")?;
        c(self.num_queries >= 1, "num_queries must be at least 1")?;
        c(self.max_text_len >= 2, "max_text_len must fit the start/end brackets")?;
        c(!self.fusion_layers.is_empty(), "fusion_layers must be nonempty")?;
        for set in [&self.adapter_layers, &self.fusion_layers] {
            let mut prev = 0usize;
            for &l in set.iter() {
                c(l >= 1 && l <= self.layers, "layer index out of range 1..=layers")?;
                c(l > prev, "layer set must be strictly increasing")?;
                prev = l;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub freeze_backbone: bool,
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub temperature: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            lr: 1e-4,
            weight_decay: 1e-2,
            grad_clip: 1.0,
            seed: 0,
            weights: LossWeights::default(),
            freeze_backbone: true,
            pretrain_steps: 300,
            pretrain_lr: 1e-3,
            temperature: 0.07,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub seed: u64,
    pub count: usize,
    pub min_objects: usize,
    pub max_objects: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig { seed: 0, count: 5000, min_objects: 2, max_objects: 5 }
    }
}

/// Union of every knob, round-trippable through the flat key=value file.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub gen: GenConfig,
}

fn parse_layer_set(s: &str) -> Result<Vec<usize>, String> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| e.to_string()))
        .collect()
}

fn layer_set_string(set: &[usize]) -> String {
    set.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate()?;
        self.train
            .weights
            .validate()
            .map_err(ConfigError::Constraint)?;
        if self.train.batch_size == 0 || self.train.epochs == 0 {
            return Err(ConfigError::Constraint("epochs and batch_size must be positive".into()));
        }
        if self.gen.min_objects < 1 || self.gen.max_objects < self.gen.min_objects {
            return Err(ConfigError::Constraint("object count range is empty".into()));
        }
        Ok(())
    }

    /// Serialize in a stable order; `parse` of the output reproduces self.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let g = &self.gen;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        };
        kv("image_size", m.image_size.to_string());
        kv("patch", m.patch.to_string());
        kv("d_model", m.d_model.to_string());
        kv("layers", m.layers.to_string());
        kv("heads", m.heads.to_string());
        kv("mlp_ratio", m.mlp_ratio.to_string());
        kv("vocab_size", m.vocab_size.to_string());
        kv("max_text_len", m.max_text_len.to_string());
        kv("d_adapter", m.d_adapter.to_string());
        kv("adapter_heads", m.adapter_heads.to_string());
        kv("qa_layers", layer_set_string(&m.adapter_layers));
        kv("fusion_layers", layer_set_string(&m.fusion_layers));
        kv("nq", m.num_queries.to_string());
        kv("direction", m.direction.to_string());
        kv("strategy", m.strategy.to_string());
        kv("text_global", m.text_global.to_string());
        kv("decoder_self_residual", m.decoder_self_residual.to_string());
        kv("mask_bilinear", m.mask_bilinear.to_string());
        kv("seg_head", m.seg_head.to_string());
        kv("init_seed", m.init_seed.to_string());
        kv("epochs", t.epochs.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("lr", format!("{:e}", t.lr));
        kv("weight_decay", format!("{:e}", t.weight_decay));
        kv("grad_clip", format!("{:e}", t.grad_clip));
        kv("seed", t.seed.to_string());
        kv("lambda_iou", format!("{:e}", t.weights.iou));
        kv("lambda_l1", format!("{:e}", t.weights.l1));
        kv("lambda_ce", format!("{:e}", t.weights.ce));
        kv("lambda_aux", format!("{:e}", t.weights.aux));
        kv("lambda_focal", format!("{:e}", t.weights.focal));
        kv("lambda_dice", format!("{:e}", t.weights.dice));
        kv("freeze", t.freeze_backbone.to_string());
        kv("pretrain_steps", t.pretrain_steps.to_string());
        kv("pretrain_lr", format!("{:e}", t.pretrain_lr));
        kv("temperature", format!("{:e}", t.temperature));
        kv("data_seed", g.seed.to_string());
        kv("data_count", g.count.to_string());
        kv("min_objects", g.min_objects.to_string());
        kv("max_objects", g.max_objects.to_string());
        s
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ConfigError::Malformed { line: lineno + 1, text: raw.to_string() });
            };
            let key = k.trim().to_string();
            let value = v.trim().to_string();
            if seen.insert(key.clone(), true).is_some() {
                return Err(ConfigError::InvalidValue {
                    key,
                    value,
                    reason: "duplicate key".into(),
                });
            }
            cfg.apply(&key, &value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = |reason: String| ConfigError::InvalidValue {
            key: key.to_string(),
            value: value.to_string(),
            reason,
        };
        macro_rules! num {
            ($slot:expr) => {
                $slot = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?
            };
        }
        macro_rules! float {
            ($slot:expr) => {
                $slot = value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?
            };
        }
        macro_rules! flag {
            ($slot:expr) => {
                $slot = value.parse().map_err(|e: std::str::ParseBoolError| bad(e.to_string()))?
            };
        }
        match key {
            "image_size" => num!(self.model.image_size),
            "patch" => num!(self.model.patch),
            "d_model" => num!(self.model.d_model),
            "layers" => num!(self.model.layers),
            "heads" => num!(self.model.heads),
            "mlp_ratio" => num!(self.model.mlp_ratio),
            "vocab_size" => num!(self.model.vocab_size),
            "max_text_len" => num!(self.model.max_text_len),
            "d_adapter" => num!(self.model.d_adapter),
            "adapter_heads" => num!(self.model.adapter_heads),
            "qa_layers" => self.model.adapter_layers = parse_layer_set(value).map_err(bad)?,
            "fusion_layers" => self.model.fusion_layers = parse_layer_set(value).map_err(bad)?,
            "nq" => num!(self.model.num_queries),
            "direction" => self.model.direction = value.parse().map_err(bad)?,
            "strategy" => self.model.strategy = value.parse().map_err(bad)?,
            "text_global" => self.model.text_global = value.parse().map_err(bad)?,
            "decoder_self_residual" => flag!(self.model.decoder_self_residual),
            "mask_bilinear" => flag!(self.model.mask_bilinear),
            "seg_head" => flag!(self.model.seg_head),
            "init_seed" => num!(self.model.init_seed),
            "epochs" => num!(self.train.epochs),
            "batch_size" => num!(self.train.batch_size),
            "lr" => float!(self.train.lr),
            "weight_decay" => float!(self.train.weight_decay),
            "grad_clip" => float!(self.train.grad_clip),
            "seed" => num!(self.train.seed),
            "lambda_iou" => float!(self.train.weights.iou),
            "lambda_l1" => float!(self.train.weights.l1),
            "lambda_ce" => float!(self.train.weights.ce),
            "lambda_aux" => float!(self.train.weights.aux),
            "lambda_focal" => float!(self.train.weights.focal),
            "lambda_dice" => float!(self.train.weights.dice),
            "freeze" => flag!(self.train.freeze_backbone),
            "pretrain_steps" => num!(self.train.pretrain_steps),
            "pretrain_lr" => float!(self.train.pretrain_lr),
            "temperature" => float!(self.train.temperature),
            "data_seed" => num!(self.gen.seed),
            "data_count" => num!(self.gen.count),
            "min_objects" => num!(self.gen.min_objects),
            "max_objects" => num!(self.gen.max_objects),
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn round_trip_reparses_equal() {
        let mut cfg = RunConfig::default();
        cfg.model.adapter_layers = vec![4];
        cfg.model.strategy = QueryStrategy::RandomInit;
        cfg.train.lr = 3e-4;
        cfg.gen.count = 123;
        let text = cfg.to_text();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = RunConfig::parse("bogus_key=1\n").unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey(_)));
    }

    #[test]
    fn empty_layer_set_means_no_adapters() {
        let cfg = RunConfig::parse("qa_layers=\n").unwrap();
        assert!(cfg.model.adapter_layers.is_empty());
    }

    #[test]
    fn invalid_layer_set_rejected() {
        let err = RunConfig::parse("qa_layers=2,9\n").unwrap_err();
        assert!(matches!(err, ConfigError::Constraint(_)), "{err}");
        let err = RunConfig::parse("qa_layers=4,2\n").unwrap_err();
        assert!(matches!(err, ConfigError::Constraint(_)), "{err}");
    }

    #[test]
    fn enums_parse_all_variants() {
        for d in Direction::all() {
            assert_eq!(d.to_string().parse::<Direction>().unwrap(), d);
        }
        for s in QueryStrategy::all() {
            assert_eq!(s.to_string().parse::<QueryStrategy>().unwrap(), s);
        }
    }

    #[test]
    fn duplicate_key_rejected() {
        let err = RunConfig::parse("epochs=1\nepochs=2\n").unwrap_err();
        assert!(matches!(err, ConfigError::InvalidValue { .. }));
    }
}
