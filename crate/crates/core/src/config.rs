//! Model and run configuration, presets, and the flat `key = value` file format.
//!
//! ```text
//! # comment
//! model.hidden_width = 384
//! model.stage0.num_group_tokens = 64
//! model.stage0.insert_after_layer = 6
//! train.weight_decay = 0.05
//! ```
//!
//! Every key is optional (missing keys keep the value of the preset being
//! parsed onto), unknown keys are rejected, and a key may appear only once.
//! Stages are numbered `stage0`, `stage1`, ... without gaps; when any stage key
//! is present the stage list is replaced by exactly the stages listed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AssignMode {
    Soft,
    Hard,
}

impl FromStr for AssignMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft" => Ok(AssignMode::Soft),
            "hard" => Ok(AssignMode::Hard),
            _ => Err(Error::Config(format!("assignment mode must be soft or hard, got {s:?}"))),
        }
    }
}

impl std::fmt::Display for AssignMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AssignMode::Soft => "soft",
            AssignMode::Hard => "hard",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupingStageConfig {
    /// Output segment count of the stage.
    pub num_group_tokens: usize,
    /// Number of Transformer layers run before this stage's grouping block.
    pub insert_after_layer: usize,
    /// First stage: project `learned_tokens` learnable tokens down to
    /// `num_group_tokens` right before grouping. Later stages: derive this
    /// stage's group tokens from the previous stage's group tokens instead of
    /// learning fresh ones.
    pub mixer_connector: bool,
    /// Learnable group tokens of the first stage (ignored by later stages).
    pub learned_tokens: usize,
}

impl GroupingStageConfig {
    pub fn new(num_group_tokens: usize, insert_after_layer: usize) -> Self {
        GroupingStageConfig {
            num_group_tokens,
            insert_after_layer,
            mixer_connector: true,
            learned_tokens: num_group_tokens,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub hidden_width: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub stages: Vec<GroupingStageConfig>,
    pub projection_width: usize,
    pub text_layers: usize,
    pub text_width: usize,
    pub text_heads: usize,
    pub vocab_size: usize,
    pub max_text_length: usize,
    /// Divisor of the grouping logits before the Gumbel-softmax.
    pub gumbel_temperature: f64,
}

impl ModelConfig {
    /// ViT-S based two-stage architecture at full size.
    pub fn full() -> Self {
        ModelConfig {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            hidden_width: 384,
            num_layers: 12,
            num_heads: 6,
            mlp_ratio: 4,
            stages: vec![GroupingStageConfig::new(64, 6), GroupingStageConfig::new(8, 9)],
            projection_width: 256,
            text_layers: 12,
            text_width: 256,
            text_heads: 4,
            vocab_size: 49152,
            max_text_length: 77,
            gumbel_temperature: 1.0,
        }
    }

    /// Single grouping stage: 64 learnable tokens mixed down to 8.
    pub fn full_one_stage() -> Self {
        let mut c = Self::full();
        c.stages = vec![GroupingStageConfig {
            num_group_tokens: 8,
            insert_after_layer: 6,
            mixer_connector: true,
            learned_tokens: 64,
        }];
        c
    }

    /// CPU-sized model trained on the synthetic shapes data.
    pub fn desk() -> Self {
        ModelConfig {
            image_size: 64,
            patch_size: 8,
            channels: 3,
            hidden_width: 64,
            num_layers: 6,
            num_heads: 4,
            mlp_ratio: 4,
            stages: vec![GroupingStageConfig::new(8, 2), GroupingStageConfig::new(4, 4)],
            projection_width: 64,
            text_layers: 4,
            text_width: 64,
            text_heads: 4,
            vocab_size: 64,
            max_text_length: 16,
            gumbel_temperature: 1.0,
        }
    }

    /// Smallest model that still exercises both grouping stages; used for
    /// gradient checks.
    pub fn mini() -> Self {
        ModelConfig {
            image_size: 4,
            patch_size: 2,
            channels: 3,
            hidden_width: 8,
            num_layers: 2,
            num_heads: 2,
            mlp_ratio: 2,
            stages: vec![GroupingStageConfig::new(2, 0), GroupingStageConfig::new(1, 1)],
            projection_width: 6,
            text_layers: 2,
            text_width: 8,
            text_heads: 2,
            vocab_size: 12,
            max_text_length: 6,
            gumbel_temperature: 1.0,
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn final_groups(&self) -> usize {
        self.stages.last().map_or(self.num_patches(), |s| s.num_group_tokens)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return err(format!(
                "model.image_size {} not divisible by model.patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.hidden_width == 0 || self.num_heads == 0 || !self.hidden_width.is_multiple_of(self.num_heads) {
            return err("model.hidden_width must be a positive multiple of model.num_heads".into());
        }
        if self.text_width == 0 || self.text_heads == 0 || !self.text_width.is_multiple_of(self.text_heads) {
            return err("model.text_width must be a positive multiple of model.text_heads".into());
        }
        if self.stages.is_empty() {
            return err("at least one grouping stage is required".into());
        }
        let mut prev_layer: Option<usize> = None;
        let mut prev_tokens = self.num_patches() + 1;
        for (i, s) in self.stages.iter().enumerate() {
            if s.insert_after_layer >= self.num_layers {
                return err(format!(
                    "model.stage{i}.insert_after_layer {} must be < model.num_layers {}",
                    s.insert_after_layer, self.num_layers
                ));
            }
            if prev_layer.is_some_and(|p| s.insert_after_layer <= p) {
                return err(format!("model.stage{i}.insert_after_layer must be strictly increasing"));
            }
            if s.num_group_tokens == 0 || s.num_group_tokens >= prev_tokens {
                return err(format!(
                    "model.stage{i}.num_group_tokens must be positive and decrease across stages"
                ));
            }
            if i == 0 && s.learned_tokens != s.num_group_tokens && !s.mixer_connector {
                return err("model.stage0.learned_tokens differs from num_group_tokens without a mixer".into());
            }
            prev_layer = Some(s.insert_after_layer);
            prev_tokens = s.num_group_tokens;
        }
        if self.max_text_length < 1 || self.vocab_size < 3 {
            return err("model.max_text_length must be >= 1 and model.vocab_size >= 3".into());
        }
        if !(self.gumbel_temperature > 0.0) {
            return err("model.gumbel_temperature must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub grad_clip: f64,
    pub assign_mode: AssignMode,
    pub gumbel_noise: bool,
    pub multilabel: bool,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub k: usize,
    pub templates: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
    pub temperature_init: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub threshold: f64,
    /// Named threshold presets (benchmark name, threshold).
    pub threshold_presets: BTreeMap<String, f64>,
    pub class_list: Option<PathBuf>,
    /// Softmax temperature for labeling; `None` reuses the trained contrastive one.
    pub label_temperature: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Full-scale training recipe. Not runnable on a CPU; it exists so the
    /// published numbers live in one checked place.
    pub fn full() -> Self {
        let mut presets = BTreeMap::new();
        presets.insert("voc".to_string(), 0.9);
        presets.insert("context".to_string(), 0.5);
        RunConfig {
            model: ModelConfig::full(),
            train: TrainConfig {
                learning_rate: 0.0016,
                weight_decay: 0.05,
                warmup_epochs: 5,
                epochs: 30,
                batch_size: 4096,
                seed: 0,
                grad_clip: 1.0,
                assign_mode: AssignMode::Hard,
                gumbel_noise: true,
                multilabel: true,
                checkpoint_every: 0,
            },
            loss: LossConfig {
                k: 3,
                templates: None,
                lexicon: None,
                temperature_init: 0.07,
            },
            eval: EvalConfig {
                threshold: 0.9,
                threshold_presets: presets,
                class_list: None,
                label_temperature: None,
            },
        }
    }

    pub fn desk() -> Self {
        let mut c = Self::full();
        c.model = ModelConfig::desk();
        c.train.learning_rate = 3e-4;
        c.train.warmup_epochs = 2;
        c.train.epochs = 20;
        c.train.batch_size = 32;
        c.eval.threshold_presets.insert("desk".to_string(), c.eval.threshold);
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        if !(t.learning_rate > 0.0) || t.weight_decay < 0.0 || t.batch_size == 0 || t.epochs == 0 {
            return Err(Error::Config(
                "train.learning_rate > 0, train.weight_decay >= 0, train.batch_size > 0 and train.epochs > 0 required".into(),
            ));
        }
        if t.warmup_epochs > t.epochs {
            return Err(Error::Config("train.warmup_epochs exceeds train.epochs".into()));
        }
        if self.loss.k == 0 {
            return Err(Error::Config("loss.k must be >= 1".into()));
        }
        if !(self.loss.temperature_init > 0.0) {
            return Err(Error::Config("loss.temperature_init must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.eval.threshold) {
            return Err(Error::Config("eval.threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let m = &self.model;
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("model.image_size", m.image_size.to_string());
        kv("model.patch_size", m.patch_size.to_string());
        kv("model.channels", m.channels.to_string());
        kv("model.hidden_width", m.hidden_width.to_string());
        kv("model.num_layers", m.num_layers.to_string());
        kv("model.num_heads", m.num_heads.to_string());
        kv("model.mlp_ratio", m.mlp_ratio.to_string());
        for (i, st) in m.stages.iter().enumerate() {
            kv(&format!("model.stage{i}.num_group_tokens"), st.num_group_tokens.to_string());
            kv(&format!("model.stage{i}.insert_after_layer"), st.insert_after_layer.to_string());
            kv(&format!("model.stage{i}.mixer_connector"), st.mixer_connector.to_string());
            kv(&format!("model.stage{i}.learned_tokens"), st.learned_tokens.to_string());
        }
        kv("model.projection_width", m.projection_width.to_string());
        kv("model.text_layers", m.text_layers.to_string());
        kv("model.text_width", m.text_width.to_string());
        kv("model.text_heads", m.text_heads.to_string());
        kv("model.vocab_size", m.vocab_size.to_string());
        kv("model.max_text_length", m.max_text_length.to_string());
        kv("model.gumbel_temperature", m.gumbel_temperature.to_string());
        let t = &self.train;
        kv("train.learning_rate", t.learning_rate.to_string());
        kv("train.weight_decay", t.weight_decay.to_string());
        kv("train.warmup_epochs", t.warmup_epochs.to_string());
        kv("train.epochs", t.epochs.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.seed", t.seed.to_string());
        kv("train.grad_clip", t.grad_clip.to_string());
        kv("train.assign_mode", t.assign_mode.to_string());
        kv("train.gumbel_noise", t.gumbel_noise.to_string());
        kv("train.multilabel", t.multilabel.to_string());
        kv("train.checkpoint_every", t.checkpoint_every.to_string());
        let l = &self.loss;
        kv("loss.k", l.k.to_string());
        if let Some(p) = &l.templates {
            kv("loss.templates", p.display().to_string());
        }
        if let Some(p) = &l.lexicon {
            kv("loss.lexicon", p.display().to_string());
        }
        kv("loss.temperature_init", l.temperature_init.to_string());
        let e = &self.eval;
        kv("eval.threshold", e.threshold.to_string());
        for (name, v) in &e.threshold_presets {
            kv(&format!("eval.threshold_preset.{name}"), v.to_string());
        }
        if let Some(p) = &e.class_list {
            kv("eval.class_list", p.display().to_string());
        }
        if let Some(t) = e.label_temperature {
            kv("eval.label_temperature", t.to_string());
        }
        s
    }

    /// Parses `text` on top of `base`. Errors name the offending key.
    pub fn parse_onto(base: &RunConfig, text: &str) -> Result<RunConfig> {
        let mut cfg = base.clone();
        let mut seen = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let (k, v) = (k.trim(), v.trim());
            if seen.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("duplicate key {k}")));
            }
        }

        let mut stage_keys: BTreeMap<usize, BTreeMap<String, String>> = BTreeMap::new();
        let mut presets_given = false;
        for (k, v) in &seen {
            if let Some(rest) = k.strip_prefix("model.stage") {
                let (idx, field) = rest
                    .split_once('.')
                    .ok_or_else(|| Error::Config(format!("unknown key {k}")))?;
                let idx: usize = idx
                    .parse()
                    .map_err(|_| Error::Config(format!("unknown key {k}")))?;
                stage_keys.entry(idx).or_default().insert(field.to_string(), v.clone());
                continue;
            }
            if let Some(name) = k.strip_prefix("eval.threshold_preset.") {
                if !presets_given {
                    cfg.eval.threshold_presets.clear();
                    presets_given = true;
                }
                cfg.eval.threshold_presets.insert(name.to_string(), num(k, v)?);
                continue;
            }
            let m = &mut cfg.model;
            let t = &mut cfg.train;
            match k.as_str() {
                "model.image_size" => m.image_size = num(k, v)?,
                "model.patch_size" => m.patch_size = num(k, v)?,
                "model.channels" => m.channels = num(k, v)?,
                "model.hidden_width" => m.hidden_width = num(k, v)?,
                "model.num_layers" => m.num_layers = num(k, v)?,
                "model.num_heads" => m.num_heads = num(k, v)?,
                "model.mlp_ratio" => m.mlp_ratio = num(k, v)?,
                "model.projection_width" => m.projection_width = num(k, v)?,
                "model.text_layers" => m.text_layers = num(k, v)?,
                "model.text_width" => m.text_width = num(k, v)?,
                "model.text_heads" => m.text_heads = num(k, v)?,
                "model.vocab_size" => m.vocab_size = num(k, v)?,
                "model.max_text_length" => m.max_text_length = num(k, v)?,
                "model.gumbel_temperature" => m.gumbel_temperature = num(k, v)?,
                "train.learning_rate" => t.learning_rate = num(k, v)?,
                "train.weight_decay" => t.weight_decay = num(k, v)?,
                "train.warmup_epochs" => t.warmup_epochs = num(k, v)?,
                "train.epochs" => t.epochs = num(k, v)?,
                "train.batch_size" => t.batch_size = num(k, v)?,
                "train.seed" => t.seed = num(k, v)?,
                "train.grad_clip" => t.grad_clip = num(k, v)?,
                "train.assign_mode" => t.assign_mode = num(k, v)?,
                "train.gumbel_noise" => t.gumbel_noise = num(k, v)?,
                "train.multilabel" => t.multilabel = num(k, v)?,
                "train.checkpoint_every" => t.checkpoint_every = num(k, v)?,
                "loss.k" => cfg.loss.k = num(k, v)?,
                "loss.templates" => cfg.loss.templates = Some(PathBuf::from(v)),
                "loss.lexicon" => cfg.loss.lexicon = Some(PathBuf::from(v)),
                "loss.temperature_init" => cfg.loss.temperature_init = num(k, v)?,
                "eval.threshold" => cfg.eval.threshold = num(k, v)?,
                "eval.class_list" => cfg.eval.class_list = Some(PathBuf::from(v)),
                "eval.label_temperature" => cfg.eval.label_temperature = Some(num(k, v)?),
                _ => return Err(Error::Config(format!("unknown key {k}"))),
            }
        }

        if !stage_keys.is_empty() {
            let n = stage_keys.len();
            if stage_keys.keys().copied().ne(0..n) {
                return Err(Error::Config("model.stageN indices must run 0, 1, ... without gaps".into()));
            }
            let mut stages = Vec::with_capacity(n);
            for (i, fields) in stage_keys {
                let get = |f: &str| {
                    fields
                        .get(f)
                        .ok_or_else(|| Error::Config(format!("missing key model.stage{i}.{f}")))
                };
                let key = |f: &str| format!("model.stage{i}.{f}");
                let num_group_tokens: usize = num(&key("num_group_tokens"), get("num_group_tokens")?)?;
                let mut stage = GroupingStageConfig::new(
                    num_group_tokens,
                    num(&key("insert_after_layer"), get("insert_after_layer")?)?,
                );
                for (f, v) in &fields {
                    match f.as_str() {
                        "num_group_tokens" | "insert_after_layer" => {}
                        "mixer_connector" => stage.mixer_connector = num(&key(f), v)?,
                        "learned_tokens" => stage.learned_tokens = num(&key(f), v)?,
                        _ => return Err(Error::Config(format!("unknown key {}", key(f)))),
                    }
                }
                stages.push(stage);
            }
            cfg.model.stages = stages;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path, base: &RunConfig) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_onto(base, &text)
    }
}

fn num<V: FromStr>(key: &str, v: &str) -> Result<V> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse value {v:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        RunConfig::full().validate().unwrap();
        RunConfig::desk().validate().unwrap();
        ModelConfig::full_one_stage().validate().unwrap();
        ModelConfig::mini().validate().unwrap();
    }

    #[test]
    fn round_trip_is_identity() {
        for cfg in [RunConfig::full(), RunConfig::desk()] {
            let text = cfg.to_config_string();
            let back = RunConfig::parse_onto(&RunConfig::desk(), &text).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.to_config_string(), text);
        }
    }

    #[test]
    fn unknown_and_duplicate_keys_rejected() {
        let base = RunConfig::desk();
        let e = RunConfig::parse_onto(&base, "model.depth = 3").unwrap_err();
        assert!(e.to_string().contains("model.depth"));
        let e = RunConfig::parse_onto(&base, "loss.k = 1\nloss.k = 2").unwrap_err();
        assert!(e.to_string().contains("loss.k"));
        let e = RunConfig::parse_onto(&base, "model.stage0.colour = 1").unwrap_err();
        assert!(e.to_string().contains("stage0"));
        let e = RunConfig::parse_onto(&base, "train.epochs = many").unwrap_err();
        assert!(e.to_string().contains("train.epochs"));
    }

    #[test]
    fn invalid_model_named() {
        let mut m = ModelConfig::desk();
        m.patch_size = 7;
        assert!(m.validate().unwrap_err().to_string().contains("patch_size"));
        let mut m = ModelConfig::desk();
        m.stages[1].insert_after_layer = 2;
        assert!(m.validate().unwrap_err().to_string().contains("increasing"));
        let mut m = ModelConfig::desk();
        m.stages[1].num_group_tokens = 8;
        assert!(m.validate().is_err());
    }

    #[test]
    fn stage_gaps_rejected() {
        let text = "model.stage0.num_group_tokens = 8\nmodel.stage0.insert_after_layer = 2\n\
                    model.stage2.num_group_tokens = 4\nmodel.stage2.insert_after_layer = 4";
        assert!(RunConfig::parse_onto(&RunConfig::desk(), text).is_err());
    }
}
