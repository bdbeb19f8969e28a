//! Run configuration: a flat key=value file, overridable from the command
//! line, covering the model, the attention knobs, the synthetic dataset
//! and the training hyperparameters. Every command echoes the fully
//! resolved configuration before doing anything else.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rga_attention::{AttentionConfig, EmbeddingMode, ModuleKind};
use rga_reid::{AdamConfig, BackboneConfig, TrainConfig};
use rga_tensor::ParameterSet;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Attention module inserted after flagged blocks; `None` is the plain
    /// baseline.
    pub module: Option<ModuleKind>,
    pub widths: Vec<usize>,
    pub downsample: Vec<bool>,
    pub insert_after: Vec<bool>,
    pub bypass_gates: bool,
    pub embed_dim: usize,
    /// Relation-aware attention knobs (relation-aware modules only).
    pub s1: usize,
    pub s2: usize,
    pub affinity: EmbeddingMode,
    pub use_relation: bool,
    pub use_original: bool,
    /// Synthetic dataset: identities and the per-identity split.
    pub num_ids: usize,
    pub per_id_train: usize,
    pub per_id_query: usize,
    pub per_id_gallery: usize,
    /// Training hyperparameters.
    pub epochs: usize,
    pub batch_p: usize,
    pub batch_k: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub margin: f64,
    pub label_smoothing: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 17,
            module: Some(ModuleKind::RgaSc),
            widths: vec![8, 16, 32, 32],
            downsample: vec![true, true, true, false],
            insert_after: vec![false, false, true, true],
            bypass_gates: false,
            embed_dim: 64,
            s1: 8,
            s2: 8,
            affinity: EmbeddingMode::Asymmetric,
            use_relation: true,
            use_original: true,
            num_ids: 16,
            per_id_train: 20,
            per_id_query: 3,
            per_id_gallery: 5,
            epochs: 40,
            batch_p: 4,
            batch_k: 4,
            lr: 8e-4,
            weight_decay: 5e-4,
            margin: 0.3,
            label_smoothing: 0.1,
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn parse_as<T: FromStr>(key: &str, value: &str, what: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| usage(format!("key '{key}': '{value}' is not {what}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(usage(format!("key '{key}': '{value}' is not true or false"))),
    }
}

fn parse_list<T>(key: &str, value: &str, item: impl Fn(&str, &str) -> Result<T>) -> Result<Vec<T>> {
    value.split(',').map(|part| item(key, part.trim())).collect()
}

fn affinity_name(mode: EmbeddingMode) -> &'static str {
    match mode {
        EmbeddingMode::Asymmetric => "asymmetric",
        EmbeddingMode::Symmetric => "symmetric",
        EmbeddingMode::None => "none",
    }
}

fn bool_list(values: &[bool]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn usize_list(values: &[usize]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    /// Applies one key=value assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_as(key, value, "an unsigned integer")?,
            "module" => {
                self.module = if value == "none" {
                    None
                } else {
                    Some(
                        ModuleKind::from_str(value)
                            .map_err(|e| usage(format!("key 'module': {e}")))?,
                    )
                }
            }
            "widths" => {
                self.widths = parse_list(key, value, |k, v| parse_as(k, v, "an unsigned integer"))?
            }
            "downsample" => self.downsample = parse_list(key, value, parse_bool)?,
            "insert_after" => self.insert_after = parse_list(key, value, parse_bool)?,
            "bypass_gates" => self.bypass_gates = parse_bool(key, value)?,
            "embed_dim" => self.embed_dim = parse_as(key, value, "an unsigned integer")?,
            "s1" => self.s1 = parse_as(key, value, "an unsigned integer")?,
            "s2" => self.s2 = parse_as(key, value, "an unsigned integer")?,
            "affinity" => {
                self.affinity = match value {
                    "asymmetric" => EmbeddingMode::Asymmetric,
                    "symmetric" => EmbeddingMode::Symmetric,
                    "none" => EmbeddingMode::None,
                    _ => {
                        return Err(usage(format!(
                            "key 'affinity': '{value}' is not asymmetric, symmetric or none"
                        )))
                    }
                }
            }
            "use_relation" => self.use_relation = parse_bool(key, value)?,
            "use_original" => self.use_original = parse_bool(key, value)?,
            "num_ids" => self.num_ids = parse_as(key, value, "an unsigned integer")?,
            "per_id_train" => self.per_id_train = parse_as(key, value, "an unsigned integer")?,
            "per_id_query" => self.per_id_query = parse_as(key, value, "an unsigned integer")?,
            "per_id_gallery" => self.per_id_gallery = parse_as(key, value, "an unsigned integer")?,
            "epochs" => self.epochs = parse_as(key, value, "an unsigned integer")?,
            "batch_p" => self.batch_p = parse_as(key, value, "an unsigned integer")?,
            "batch_k" => self.batch_k = parse_as(key, value, "an unsigned integer")?,
            "lr" => self.lr = parse_as(key, value, "a number")?,
            "weight_decay" => self.weight_decay = parse_as(key, value, "a number")?,
            "margin" => self.margin = parse_as(key, value, "a number")?,
            "label_smoothing" => self.label_smoothing = parse_as(key, value, "a number")?,
            _ => return Err(usage(format!("unrecognized configuration key '{key}'"))),
        }
        Ok(())
    }

    /// Reads a key=value file (blank lines and `#` comments skipped), then
    /// applies overrides in order.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            for (lineno, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| {
                    usage(format!(
                        "{}:{}: expected key=value, got '{line}'",
                        path.display(),
                        lineno + 1
                    ))
                })?;
                cfg.set(key.trim(), value.trim())?;
            }
        }
        for (key, value) in overrides {
            cfg.set(key, value)?;
        }
        Ok(cfg)
    }

    /// The configuration as sorted key=value lines; parsing them back
    /// reproduces the configuration exactly.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let module = self.module.map_or("none", ModuleKind::name);
        let _ = writeln!(s, "affinity={}", affinity_name(self.affinity));
        let _ = writeln!(s, "batch_k={}", self.batch_k);
        let _ = writeln!(s, "batch_p={}", self.batch_p);
        let _ = writeln!(s, "bypass_gates={}", self.bypass_gates);
        let _ = writeln!(s, "downsample={}", bool_list(&self.downsample));
        let _ = writeln!(s, "embed_dim={}", self.embed_dim);
        let _ = writeln!(s, "epochs={}", self.epochs);
        let _ = writeln!(s, "insert_after={}", bool_list(&self.insert_after));
        let _ = writeln!(s, "label_smoothing={}", self.label_smoothing);
        let _ = writeln!(s, "lr={}", self.lr);
        let _ = writeln!(s, "margin={}", self.margin);
        let _ = writeln!(s, "module={module}");
        let _ = writeln!(s, "num_ids={}", self.num_ids);
        let _ = writeln!(s, "per_id_gallery={}", self.per_id_gallery);
        let _ = writeln!(s, "per_id_query={}", self.per_id_query);
        let _ = writeln!(s, "per_id_train={}", self.per_id_train);
        let _ = writeln!(s, "s1={}", self.s1);
        let _ = writeln!(s, "s2={}", self.s2);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "use_original={}", self.use_original);
        let _ = writeln!(s, "use_relation={}", self.use_relation);
        let _ = writeln!(s, "weight_decay={}", self.weight_decay);
        let _ = writeln!(s, "widths={}", usize_list(&self.widths));
        s
    }

    /// The attention knobs as a config (composition left at its default;
    /// callers pick the composition from the module kind).
    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            s1: self.s1,
            s2: self.s2,
            embedding_mode: self.affinity,
            use_relation: self.use_relation,
            use_original: self.use_original,
            ..AttentionConfig::default()
        }
    }

    /// Builds and validates the model configuration, including a dry
    /// registration so bad attention settings fail here as usage errors.
    pub fn backbone(&self) -> Result<BackboneConfig> {
        let attention_cfg = match self.module {
            Some(kind) if kind.attention_config().is_some() => Some(self.attention()),
            _ => None,
        };
        let cfg = BackboneConfig {
            in_channels: rga_reid::IMAGE_CHANNELS,
            in_h: rga_reid::IMAGE_HEIGHT,
            in_w: rga_reid::IMAGE_WIDTH,
            widths: self.widths.clone(),
            downsample: self.downsample.clone(),
            attention: self.module,
            insert_after: self.insert_after.clone(),
            bypass_gates: self.bypass_gates,
            attention_cfg,
            embed_dim: self.embed_dim,
            num_classes: self.num_ids,
        };
        cfg.validate().map_err(|e| usage(e.to_string()))?;
        let mut scratch = ParameterSet::<f32>::new();
        rga_reid::register_model(&mut scratch, 0, &cfg).map_err(|e| usage(e.to_string()))?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            p: self.batch_p,
            k: self.batch_k,
            margin: self.margin,
            label_smoothing: self.label_smoothing,
            adam: AdamConfig {
                lr: self.lr,
                weight_decay: self.weight_decay,
                ..AdamConfig::default()
            },
        }
    }

    /// Samples generated per identity: train + query + gallery.
    pub fn per_id_total(&self) -> usize {
        self.per_id_train + self.per_id_query + self.per_id_gallery
    }
}
