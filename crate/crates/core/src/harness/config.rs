//! Flat `key = value` experiment configuration.
//!
//! Keys are dotted field paths (`train.lr`, `codec.num_slots`,
//! `data.image_size`). Lists are comma separated; values that start with
//! `[` or `{` are read as JSON. `#` starts a comment. Later assignments win,
//! so command-line overrides are applied with [`ExperimentConfig::set`].

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::shapes::ShapesWorldConfig;
use crate::codec::{Codec, CodecConfig};
use crate::error::{Error, Result};
use crate::masking::RefinementSchedule;
use crate::model::ModelConfig;
use crate::training::TrainConfig;
use crate::vocab::Vocab;

/// Settings for inference, evaluation and benchmarking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Refinement ratios per task; empty means a single parallel pass.
    pub detection_ratios: Vec<f64>,
    pub segmentation_ratios: Vec<f64>,
    pub keypoint_ratios: Vec<f64>,
    pub caption_ratios: Vec<f64>,
    /// Detections at or above this score prompt segmentation and keypoints.
    pub instance_threshold: f64,
    /// At most this many detections (by score) prompt downstream tasks.
    pub max_instances: usize,
    pub pck_alpha: f64,
    /// Evaluate on at most this many validation images (0: all).
    pub max_images: usize,
    pub bench_trials: usize,
    pub bench_warmup: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            detection_ratios: vec![],
            segmentation_ratios: vec![],
            keypoint_ratios: vec![0.7],
            caption_ratios: vec![0.8, 0.6, 0.4],
            instance_threshold: 0.3,
            max_instances: 10,
            pck_alpha: 0.1,
            max_images: 0,
            bench_trials: 5,
            bench_warmup: 1,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn schedule(ratios: &[f64]) -> Result<RefinementSchedule> {
        RefinementSchedule::new(ratios.to_vec())
    }

    pub fn validate(&self) -> Result<()> {
        for r in [&self.detection_ratios, &self.segmentation_ratios, &self.keypoint_ratios, &self.caption_ratios] {
            Self::schedule(r)?;
        }
        if !(0.0..=1.0).contains(&self.instance_threshold) || self.pck_alpha <= 0.0 || self.bench_trials == 0 {
            return Err(Error::Config("eval settings out of range".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSizes {
    pub train_images: usize,
    pub val_images: usize,
    /// Coordinate bins of the vocabulary.
    pub num_bins: usize,
}

/// Everything a run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: ShapesWorldConfig,
    pub dataset: DataSizes,
    pub codec: CodecConfig,
    /// `vocab_size`, `max_seq_len` and `image_size` are derived from the
    /// other sections by [`ExperimentConfig::model_config`].
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

const DERIVED: [&str; 3] = ["model.vocab_size", "model.max_seq_len", "model.image_size"];

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: ShapesWorldConfig::default(),
            dataset: DataSizes { train_images: 2000, val_images: 200, num_bins: 500 },
            codec: CodecConfig::default(),
            model: ModelConfig::desk(0, 0),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, Value)>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        _ => out.push((prefix.to_string(), v.clone())),
    }
}

fn render(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Array(items) if items.iter().all(|i| !i.is_array() && !i.is_object()) => {
            items.iter().map(render).collect::<Vec<_>>().join(",")
        }
        other => other.to_string(),
    }
}

/// Parses `text` with the type of `like` as a guide.
fn parse_value(text: &str, like: &Value) -> std::result::Result<Value, String> {
    let t = text.trim();
    if t.starts_with('[') || t.starts_with('{') {
        return serde_json::from_str(t).map_err(|e| e.to_string());
    }
    match like {
        Value::Bool(_) => t.parse::<bool>().map(Value::Bool).map_err(|_| format!("expected true/false, got `{t}`")),
        Value::Number(_) => serde_json::from_str::<serde_json::Number>(t).map(Value::Number).map_err(|_| format!("expected a number, got `{t}`")),
        Value::String(_) => Ok(Value::String(t.to_string())),
        Value::Array(items) => {
            if t.is_empty() {
                return Ok(Value::Array(vec![]));
            }
            let elem = items.first().cloned().unwrap_or(Value::Number(0.into()));
            t.split(',').map(|p| parse_value(p, &elem)).collect::<std::result::Result<Vec<_>, _>>().map(Value::Array)
        }
        _ => serde_json::from_str(t).or_else(|_| Ok(Value::String(t.to_string()))),
    }
}

impl ExperimentConfig {
    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::new(self.data.vocab_spec(self.dataset.num_bins))
    }

    pub fn codec(&self) -> Result<Codec> {
        Codec::new(self.vocab()?, self.codec.clone())
    }

    /// The model section with its derived fields filled in.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let codec = self.codec()?;
        let (w, h) = self.data.image_size;
        let cfg = ModelConfig {
            vocab_size: codec.vocab.total_size(),
            max_seq_len: self.codec.max_sequence_len(),
            image_size: (h as usize, w as usize),
            ..self.model.clone()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.codec.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        self.model_config()?;
        Ok(())
    }

    /// Every settable key with its current value, in file order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut flat = Vec::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut flat);
        flat.into_iter().filter(|(k, _)| !DERIVED.contains(&k.as_str())).map(|(k, v)| (k, render(&v))).collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = String::new();
        for (k, v) in self.entries() {
            let head = k.split('.').next().unwrap_or("").to_string();
            if head != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "# {head}");
                section = head;
            }
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Assigns one dotted key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if DERIVED.contains(&key) {
            return Err(Error::Config(format!("`{key}` is derived from the data, codec and vocab settings")));
        }
        let mut root = serde_json::to_value(&*self)?;
        let mut node = &mut root;
        for part in key.split('.') {
            node = match node {
                Value::Object(m) if m.contains_key(part) => m.get_mut(part).expect("checked"),
                _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
            };
        }
        if node.is_object() {
            return Err(Error::Config(format!("`{key}` is a section, not a value")));
        }
        *node = parse_value(value, node).map_err(|e| Error::Config(format!("{key}: {e}")))?;
        *self = serde_json::from_value(root).map_err(|e| Error::Config(format!("{key}: {e}")))?;
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v.trim()).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Applies `key=value` overrides, e.g. from `--set` flags.
    pub fn with_overrides<S: AsRef<str>>(mut self, overrides: &[S]) -> Result<Self> {
        for o in overrides {
            let (k, v) = o
                .as_ref()
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{}` is not key=value", o.as_ref())))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()?;
        Ok(self)
    }

    /// A small configuration that trains in minutes on one core.
    pub fn smoke() -> Self {
        let mut cfg = ExperimentConfig::default();
        cfg.data.image_size = (128, 128);
        cfg.data.max_shapes = 4;
        cfg.data.min_extent = 0.18;
        cfg.data.max_extent = 0.4;
        cfg.dataset = DataSizes { train_images: 2000, val_images: 300, num_bins: 64 };
        cfg.codec.num_slots = 4;
        cfg.codec.mask_side = 8;
        cfg.codec.caption_len = 12;
        cfg.model = ModelConfig { embed_dim: 64, num_heads: 4, ffn_dim: 256, enc_layers: 2, dec_layers: 2, stem_channels: (16, 32), ..ModelConfig::desk(0, 0) };
        cfg.train.lr = 1e-3;
        cfg.train.stem_lr = 1e-3;
        cfg.train.batch_size = 8;
        cfg.train.total_steps = 6000;
        cfg.train.max_instances = 4;
        cfg.train.grad_clip = 1.0;
        cfg
    }
}

/// Keys of `cfg` as a `Map`, for machine-readable dumps.
pub fn as_json_map(cfg: &ExperimentConfig) -> Map<String, Value> {
    cfg.entries().into_iter().map(|(k, v)| (k, Value::String(v))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = ExperimentConfig::smoke();
        cfg.eval.detection_ratios = vec![];
        let text = cfg.to_text();
        assert!(text.contains("train.lr = 0.001\n"), "{text}");
        assert!(text.contains("train.task_weights = 1.5,2.7,0.5,0.3\n"));
        assert!(text.contains("eval.detection_ratios = \n"));
        assert!(!text.contains("model.vocab_size"));
        assert_eq!(ExperimentConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn overrides_and_errors() {
        let cfg = ExperimentConfig::default()
            .with_overrides(&["train.seed=7", "eval.caption_ratios = 0.5", "data.classes=circle,bar", "train.objective=ar"])
            .unwrap();
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.eval.caption_ratios, vec![0.5]);
        assert_eq!(cfg.data.classes.len(), 2);
        assert_eq!(cfg.train.objective, crate::training::Objective::Ar);
        assert!(ExperimentConfig::parse("train.nope = 1").is_err());
        assert!(ExperimentConfig::parse("train.lr = fast").is_err());
        assert!(ExperimentConfig::parse("model.vocab_size = 3").is_err());
        assert!(ExperimentConfig::parse("train = 3").is_err());
        assert!(ExperimentConfig::parse("train.lr").is_err());
        let commented = ExperimentConfig::parse("# hi\n\ntrain.batch_size = 3 # tiny\n").unwrap();
        assert_eq!(commented.train.batch_size, 3);
    }

    #[test]
    fn derived_fields_follow_the_other_sections() {
        let cfg = ExperimentConfig::smoke();
        let m = cfg.model_config().unwrap();
        assert_eq!(m.image_size, (128, 128));
        assert_eq!(m.max_seq_len, 6 + 64);
        assert_eq!(m.vocab_size, cfg.codec().unwrap().vocab.total_size());
    }
}
