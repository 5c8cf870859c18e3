//! Flat key=value run configuration.
//!
//! Unknown keys are rejected so a typo'd hyperparameter cannot fall
//! back to a default silently. Defaults depend on the model: the
//! eight-layer network trains with momentum SGD on a step-decay
//! schedule, the small network with Adam at a constant rate. Every
//! command writes a fully resolved copy beside its outputs, and that
//! copy parses back to the identical configuration.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use covernet::checkpoint::StoreMeta;
use covernet::net::{
    build_alexnet30, build_lenet_variant_with, LayerKind, Method, ModelKind, NetworkSpec,
};
use covernet::optim::{AdamConfig, LrSchedule, SgdMomentumConfig};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config line {line}: expected key=value, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("config line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("config key {key:?} appears more than once")]
    DuplicateKey { key: String },
    #[error("config key {key:?}: {value:?} is not {expected}")]
    BadValue {
        key: &'static str,
        value: String,
        expected: &'static str,
    },
    #[error("config key {key:?}: {reason}")]
    OutOfRange { key: &'static str, reason: String },
    #[error("config must set model=alexnet30 or model=lenet")]
    MissingModel,
}

/// Which update rule a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::SgdMomentum => "sgd_momentum",
            OptimizerKind::Adam => "adam",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelKind,
    pub seed: u64,
    pub batch_size: usize,
    pub iterations: u64,
    pub optimizer: OptimizerKind,
    pub base_rate: f64,
    /// Steps between rate drops; 0 keeps the rate constant.
    pub drop_every: u64,
    pub drop_factor: f64,
    pub keep_prob: f64,
    pub pool_stride_literal: bool,
    pub mean_subtract: bool,
    pub manifest: PathBuf,
    pub class_table: PathBuf,
    pub image_root: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub split_dir: PathBuf,
    pub per_class: usize,
    pub train_frac: f64,
    pub checkpoint_every: u64,
    pub exclude_classes: Vec<u32>,
}

/// Every legal key, in the order the resolved copy is written.
const KEYS: [&str; 20] = [
    "model",
    "seed",
    "batchSize",
    "iterations",
    "optimizer",
    "baseRate",
    "dropEvery",
    "dropFactor",
    "keepProb",
    "poolStrideLiteral",
    "meanSubtract",
    "manifest",
    "classTable",
    "imageRoot",
    "checkpointDir",
    "splitDir",
    "perClass",
    "trainFrac",
    "checkpointEvery",
    "excludeClasses",
];

fn parse_bool(key: &'static str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(ConfigError::BadValue {
            key,
            value: value.to_string(),
            expected: "true or false",
        }),
    }
}

fn parse_num<T: std::str::FromStr>(
    key: &'static str,
    value: &str,
    expected: &'static str,
) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        key,
        value: value.to_string(),
        expected,
    })
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut pairs: Vec<(&str, &str)> = Vec::new();
        for (index, raw) in text.lines().enumerate() {
            let line = index + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                text: trimmed.to_string(),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                });
            }
            if pairs.iter().any(|(k, _)| *k == key) {
                return Err(ConfigError::DuplicateKey {
                    key: key.to_string(),
                });
            }
            pairs.push((key, value));
        }
        let get = |key: &str| pairs.iter().find(|(k, _)| *k == key).map(|(_, v)| *v);

        let model = match get("model") {
            Some("alexnet30") => ModelKind::AlexNet30,
            Some("lenet") => ModelKind::LenetVariant,
            Some(other) => {
                return Err(ConfigError::BadValue {
                    key: "model",
                    value: other.to_string(),
                    expected: "alexnet30 or lenet",
                })
            }
            None => return Err(ConfigError::MissingModel),
        };
        // Per-model training defaults; everything else is shared.
        let (d_batch, d_iters, d_optim, d_rate, d_every, d_factor, d_mean) = match model {
            ModelKind::AlexNet30 => (128, 450_000, OptimizerKind::SgdMomentum, 0.01, 100_000, 10.0, true),
            ModelKind::LenetVariant => (200, 30_000, OptimizerKind::Adam, 1e-4, 0, 1.0, false),
        };

        let optimizer = match get("optimizer") {
            None => d_optim,
            Some("sgd_momentum") => OptimizerKind::SgdMomentum,
            Some("adam") => OptimizerKind::Adam,
            Some(other) => {
                return Err(ConfigError::BadValue {
                    key: "optimizer",
                    value: other.to_string(),
                    expected: "sgd_momentum or adam",
                })
            }
        };
        let exclude_classes = match get("excludeClasses") {
            None | Some("") => Vec::new(),
            Some(list) => {
                let mut ids = Vec::new();
                for part in list.split(',') {
                    ids.push(parse_num::<u32>(
                        "excludeClasses",
                        part.trim(),
                        "a comma-separated list of class ids",
                    )?);
                }
                let unique: BTreeSet<u32> = ids.iter().copied().collect();
                if unique.len() != ids.len() {
                    return Err(ConfigError::OutOfRange {
                        key: "excludeClasses",
                        reason: "ids repeat".to_string(),
                    });
                }
                ids
            }
        };

        let config = Self {
            model,
            seed: match get("seed") {
                Some(v) => parse_num("seed", v, "an unsigned integer")?,
                None => 1,
            },
            batch_size: match get("batchSize") {
                Some(v) => parse_num("batchSize", v, "a positive integer")?,
                None => d_batch,
            },
            iterations: match get("iterations") {
                Some(v) => parse_num("iterations", v, "a positive integer")?,
                None => d_iters,
            },
            optimizer,
            base_rate: match get("baseRate") {
                Some(v) => parse_num("baseRate", v, "a number")?,
                None => d_rate,
            },
            drop_every: match get("dropEvery") {
                Some(v) => parse_num("dropEvery", v, "an unsigned integer")?,
                None => d_every,
            },
            drop_factor: match get("dropFactor") {
                Some(v) => parse_num("dropFactor", v, "a number")?,
                None => d_factor,
            },
            keep_prob: match get("keepProb") {
                Some(v) => parse_num("keepProb", v, "a number")?,
                None => 0.5,
            },
            pool_stride_literal: match get("poolStrideLiteral") {
                Some(v) => parse_bool("poolStrideLiteral", v)?,
                None => false,
            },
            mean_subtract: match get("meanSubtract") {
                Some(v) => parse_bool("meanSubtract", v)?,
                None => d_mean,
            },
            manifest: get("manifest").unwrap_or("books.csv").into(),
            class_table: get("classTable").unwrap_or("classes.csv").into(),
            image_root: get("imageRoot").unwrap_or(".").into(),
            checkpoint_dir: get("checkpointDir").unwrap_or("run").into(),
            split_dir: get("splitDir").unwrap_or("split").into(),
            per_class: match get("perClass") {
                Some(v) => parse_num("perClass", v, "a positive integer")?,
                None => 1900,
            },
            train_frac: match get("trainFrac") {
                Some(v) => parse_num("trainFrac", v, "a number in (0, 1)")?,
                None => 0.9,
            },
            checkpoint_every: match get("checkpointEvery") {
                Some(v) => parse_num("checkpointEvery", v, "a positive integer")?,
                None => 1000,
            },
            exclude_classes,
        };
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let range = |key: &'static str, ok: bool, reason: &str| {
            if ok {
                Ok(())
            } else {
                Err(ConfigError::OutOfRange {
                    key,
                    reason: reason.to_string(),
                })
            }
        };
        range("batchSize", self.batch_size >= 1, "must be at least 1")?;
        range("iterations", self.iterations >= 1, "must be at least 1")?;
        range(
            "baseRate",
            self.base_rate.is_finite() && self.base_rate >= 0.0,
            "must be finite and nonnegative",
        )?;
        range(
            "dropFactor",
            self.drop_factor.is_finite() && self.drop_factor >= 1.0,
            "must be at least 1",
        )?;
        range(
            "keepProb",
            self.keep_prob > 0.0 && self.keep_prob <= 1.0,
            "must be in (0, 1]",
        )?;
        range(
            "trainFrac",
            self.train_frac > 0.0 && self.train_frac < 1.0,
            "must be strictly between 0 and 1",
        )?;
        range("perClass", self.per_class >= 1, "must be at least 1")?;
        range(
            "checkpointEvery",
            self.checkpoint_every >= 1,
            "must be at least 1",
        )?;
        Ok(())
    }

    /// The network this run trains, with the configured dropout keep
    /// probability applied to every dropout layer.
    pub fn network(&self) -> NetworkSpec {
        let mut spec = match self.model {
            ModelKind::AlexNet30 => build_alexnet30(),
            ModelKind::LenetVariant => build_lenet_variant_with(self.pool_stride_literal),
        };
        for layer in &mut spec.layers {
            if let LayerKind::Dropout { keep_prob } = &mut layer.kind {
                *keep_prob = self.keep_prob;
            }
        }
        spec
    }

    pub fn method(&self) -> Method {
        match self.optimizer {
            OptimizerKind::SgdMomentum => Method::SgdMomentum(SgdMomentumConfig::default()),
            OptimizerKind::Adam => Method::Adam(AdamConfig::default()),
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        if self.drop_every == 0 || self.drop_factor == 1.0 {
            LrSchedule::constant(self.base_rate)
        } else {
            LrSchedule {
                base_rate: self.base_rate,
                drop_factor: self.drop_factor,
                drop_every: self.drop_every,
            }
        }
    }

    /// Checkpoint flag bits implied by this configuration.
    pub fn flags(&self) -> u64 {
        let mut flags = 0;
        if self.pool_stride_literal {
            flags |= StoreMeta::FLAG_LITERAL_POOL_STRIDE;
        }
        if self.mean_subtract {
            flags |= StoreMeta::FLAG_MEAN_SUBTRACT;
        }
        flags
    }

    /// Fully explicit key=value text; parsing it reproduces `self`.
    pub fn resolved_text(&self) -> String {
        let excludes = self
            .exclude_classes
            .iter()
            .map(u32::to_string)
            .collect::<Vec<_>>()
            .join(",");
        let mut out = String::new();
        let mut put = |key: &str, value: String| {
            let _ = writeln!(out, "{key}={value}");
        };
        put("model", self.model.name().to_string());
        put("seed", self.seed.to_string());
        put("batchSize", self.batch_size.to_string());
        put("iterations", self.iterations.to_string());
        put("optimizer", self.optimizer.name().to_string());
        put("baseRate", self.base_rate.to_string());
        put("dropEvery", self.drop_every.to_string());
        put("dropFactor", self.drop_factor.to_string());
        put("keepProb", self.keep_prob.to_string());
        put("poolStrideLiteral", self.pool_stride_literal.to_string());
        put("meanSubtract", self.mean_subtract.to_string());
        put("manifest", self.manifest.display().to_string());
        put("classTable", self.class_table.display().to_string());
        put("imageRoot", self.image_root.display().to_string());
        put("checkpointDir", self.checkpoint_dir.display().to_string());
        put("splitDir", self.split_dir.display().to_string());
        put("perClass", self.per_class.to_string());
        put("trainFrac", self.train_frac.to_string());
        put("checkpointEvery", self.checkpoint_every.to_string());
        put("excludeClasses", excludes);
        out
    }

    /// Writes the resolved copy beside a command's outputs.
    pub fn write_resolved(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::write(dir.join("resolved.conf"), self.resolved_text())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_defaults_differ() {
        let a = RunConfig::parse("model=alexnet30").unwrap();
        assert_eq!(a.batch_size, 128);
        assert_eq!(a.iterations, 450_000);
        assert_eq!(a.optimizer, OptimizerKind::SgdMomentum);
        assert_eq!(a.base_rate, 0.01);
        assert_eq!(a.drop_every, 100_000);
        assert_eq!(a.drop_factor, 10.0);
        assert!(a.mean_subtract);
        assert_eq!(a.keep_prob, 0.5);

        let l = RunConfig::parse("model=lenet").unwrap();
        assert_eq!(l.batch_size, 200);
        assert_eq!(l.iterations, 30_000);
        assert_eq!(l.optimizer, OptimizerKind::Adam);
        assert_eq!(l.base_rate, 1e-4);
        assert_eq!(l.drop_every, 0);
        assert!(!l.mean_subtract);
        assert!(!l.pool_stride_literal);
    }

    #[test]
    fn unknown_and_duplicate_keys_are_rejected() {
        assert!(matches!(
            RunConfig::parse("model=lenet\nbatchsize=4"),
            Err(ConfigError::UnknownKey { line: 2, .. })
        ));
        assert!(matches!(
            RunConfig::parse("model=lenet\nseed=1\nseed=2"),
            Err(ConfigError::DuplicateKey { .. })
        ));
        assert!(matches!(
            RunConfig::parse("model=lenet\nnot a pair"),
            Err(ConfigError::Syntax { line: 2, .. })
        ));
        assert!(matches!(
            RunConfig::parse("seed=3"),
            Err(ConfigError::MissingModel)
        ));
    }

    #[test]
    fn values_are_validated() {
        assert!(matches!(
            RunConfig::parse("model=lenet\nbatchSize=0"),
            Err(ConfigError::OutOfRange { key: "batchSize", .. })
        ));
        assert!(matches!(
            RunConfig::parse("model=lenet\nkeepProb=1.5"),
            Err(ConfigError::OutOfRange { key: "keepProb", .. })
        ));
        assert!(matches!(
            RunConfig::parse("model=lenet\ntrainFrac=1"),
            Err(ConfigError::OutOfRange { key: "trainFrac", .. })
        ));
        assert!(matches!(
            RunConfig::parse("model=lenet\nseed=abc"),
            Err(ConfigError::BadValue { key: "seed", .. })
        ));
        assert!(matches!(
            RunConfig::parse("model=lenet\nexcludeClasses=3,3"),
            Err(ConfigError::OutOfRange { key: "excludeClasses", .. })
        ));
    }

    #[test]
    fn comments_blanks_and_spacing_are_tolerated() {
        let config = RunConfig::parse(
            "# run settings\n\n  model = lenet  \nseed= 9\nexcludeClasses=3, 17\n",
        )
        .unwrap();
        assert_eq!(config.seed, 9);
        assert_eq!(config.exclude_classes, vec![3, 17]);
    }

    #[test]
    fn resolved_copy_round_trips() {
        let config = RunConfig::parse(
            "model=alexnet30\nseed=42\nbatchSize=64\nkeepProb=0.4\n\
             poolStrideLiteral=true\nexcludeClasses=1,2\nimageRoot=covers\n\
             trainFrac=0.85\nbaseRate=0.005",
        )
        .unwrap();
        let text = config.resolved_text();
        let reparsed = RunConfig::parse(&text).unwrap();
        assert_eq!(config, reparsed);
        // Every key appears explicitly.
        for key in KEYS {
            assert!(
                text.contains(&format!("{key}=")),
                "resolved copy is missing {key}"
            );
        }
    }

    #[test]
    fn schedule_and_flag_mapping() {
        let l = RunConfig::parse("model=lenet").unwrap();
        assert_eq!(l.schedule(), LrSchedule::constant(1e-4));
        assert_eq!(l.flags(), 0);

        let a = RunConfig::parse("model=alexnet30\npoolStrideLiteral=true").unwrap();
        assert_eq!(
            a.schedule(),
            LrSchedule {
                base_rate: 0.01,
                drop_factor: 10.0,
                drop_every: 100_000,
            }
        );
        assert_eq!(
            a.flags(),
            StoreMeta::FLAG_LITERAL_POOL_STRIDE | StoreMeta::FLAG_MEAN_SUBTRACT
        );
    }

    #[test]
    fn keep_prob_overrides_dropout_layers() {
        let config = RunConfig::parse("model=alexnet30\nkeepProb=0.7").unwrap();
        let spec = config.network();
        let keeps: Vec<f64> = spec
            .layers
            .iter()
            .filter_map(|l| match l.kind {
                LayerKind::Dropout { keep_prob } => Some(keep_prob),
                _ => None,
            })
            .collect();
        assert!(!keeps.is_empty());
        assert!(keeps.iter().all(|&k| k == 0.7));
    }
}
