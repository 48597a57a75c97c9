//! Flat experiment configuration: TOML sections or dotted keys, plus
//! `--set key=value` overrides, all checked against the known key set.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use icp_core::datasets::{FactorKind, FactorSpec, LabelRule, Renderer};
use icp_core::networks::{Activation, ArchSpec, Mode, TrunkKind};
use icp_core::objectives::{IcpHyperparams, Variant};
use icp_core::trainer::{DatasetRef, LabelSpec, TrainConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HpSection {
    pub variant: String,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSection {
    pub d_z: usize,
    pub d_y: usize,
    pub trunk: String,
    pub widths: Vec<usize>,
    pub activation: String,
    pub disc_width: usize,
    pub pred_width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSection {
    /// `synthetic`, `dsprites` or `cache`.
    pub kind: String,
    pub mode: String,
    /// `name=cardinality` pairs, slowest first.
    pub factors: String,
    pub image_size: usize,
    pub renderer: String,
    pub num_classes: usize,
    /// `quadrant` or `modulo:<factor>`.
    pub label_rule: String,
    /// Archive or cache directory for the non-synthetic kinds.
    pub path: String,
    /// 0 keeps every sample.
    pub max_samples: usize,
    /// Share held out for evaluation; 0 evaluates on the training set.
    pub test_fraction: f64,
    pub split_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerSection {
    pub steps: u64,
    pub batch_size: usize,
    pub lr_main: f64,
    pub lr_d: f64,
    pub lr_h: f64,
    pub seed: u64,
    pub log_every: u64,
    pub checkpoint_every: u64,
    pub d_steps: usize,
    pub h_steps: usize,
    /// 0 disables early stopping.
    pub patience: usize,
    pub record_wall_time: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSection {
    pub variants: Vec<String>,
    pub seeds: Vec<u64>,
    /// Values swept over beta/gamma where the variant uses them; empty
    /// keeps the `hp` values.
    pub grid: Vec<f64>,
    /// `auto`, `error`, `mig` or `mse`.
    pub metric: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub hp: HpSection,
    pub arch: ArchSection,
    pub data: DataSection,
    pub trainer: TrainerSection,
    pub ablation: AblationSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let hp = IcpHyperparams::default();
        Self {
            hp: HpSection {
                variant: hp.variant.name().into(),
                alpha: hp.alpha,
                beta: hp.beta,
                gamma: hp.gamma,
            },
            arch: ArchSection {
                d_z: 4,
                d_y: 4,
                trunk: "mlp".into(),
                widths: vec![256],
                activation: "relu".into(),
                disc_width: 64,
                pred_width: 32,
            },
            data: DataSection {
                kind: "synthetic".into(),
                mode: "self_supervised".into(),
                factors: "scale=6,posX=16,posY=16".into(),
                image_size: 32,
                renderer: "square".into(),
                num_classes: 4,
                label_rule: "quadrant".into(),
                path: String::new(),
                max_samples: 0,
                test_fraction: 0.0,
                split_seed: 0,
            },
            trainer: TrainerSection {
                steps: 2000,
                batch_size: 64,
                lr_main: 1e-3,
                lr_d: 1e-4,
                lr_h: 1e-4,
                seed: 0,
                log_every: 10,
                checkpoint_every: 500,
                d_steps: 1,
                h_steps: 1,
                patience: 0,
                record_wall_time: false,
            },
            ablation: AblationSection {
                variants: Variant::ALL.iter().map(|v| v.name().to_string()).collect(),
                seeds: vec![0, 1, 2],
                grid: Vec::new(),
                metric: "auto".into(),
            },
        }
    }
}

fn flatten(prefix: &str, table: &Table, out: &mut BTreeMap<String, Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Table {
    let mut root = Table::new();
    for (key, v) in flat {
        let mut parts: Vec<&str> = key.split('.').collect();
        let leaf = parts.pop().expect("non-empty key");
        let mut t = &mut root;
        for p in parts {
            t = t
                .entry(p.to_string())
                .or_insert_with(|| Value::Table(Table::new()))
                .as_table_mut()
                .expect("sections are tables");
        }
        t.insert(leaf.to_string(), v.clone());
    }
    root
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "string",
        Value::Integer(_) => "integer",
        Value::Float(_) => "float",
        Value::Boolean(_) => "boolean",
        Value::Datetime(_) => "datetime",
        Value::Array(_) => "array",
        Value::Table(_) => "table",
    }
}

/// Parses `value` as a TOML literal, falling back to a bare string.
fn parse_literal(value: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(value.to_string()))
}

/// Builds on `ExperimentConfig::default()` key by key.
#[derive(Debug, Clone)]
pub struct ConfigBuilder {
    values: BTreeMap<String, Value>,
}

impl Default for ConfigBuilder {
    fn default() -> Self {
        Self::new()
    }
}

impl ConfigBuilder {
    pub fn new() -> Self {
        let table = Table::try_from(ExperimentConfig::default()).expect("default config serializes");
        let mut values = BTreeMap::new();
        flatten("", &table, &mut values);
        Self { values }
    }

    pub fn valid_keys(&self) -> Vec<&str> {
        self.values.keys().map(String::as_str).collect()
    }

    pub fn set(&mut self, key: &str, value: Value) -> Result<(), CliError> {
        let Some(current) = self.values.get(key) else {
            return Err(CliError::Config(format!(
                "unknown config key `{key}`; valid keys: {}",
                self.valid_keys().join(", ")
            )));
        };
        let value = match (current, value) {
            (Value::Float(_), Value::Integer(i)) => Value::Float(i as f64),
            (Value::Array(_), Value::Array(a)) => Value::Array(a),
            (c, v) if type_name(c) == type_name(&v) => v,
            (c, v) => {
                return Err(CliError::Config(format!(
                    "`{key}` expects type {}, got {}",
                    type_name(c),
                    type_name(&v)
                )))
            }
        };
        self.values.insert(key.to_string(), value);
        Ok(())
    }

    /// Applies a TOML document; sections and dotted keys both work.
    pub fn apply_toml(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        let table: Table = toml::from_str(text).map_err(|e| CliError::Config(format!("{origin}: {e}")))?;
        let mut flat = BTreeMap::new();
        flatten("", &table, &mut flat);
        for (k, v) in flat {
            self.set(&k, v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("cannot read config file `{}`: {e}", path.display())))?;
        self.apply_toml(&text, &path.display().to_string())
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), CliError> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override `{assignment}` is not of the form key=value")))?;
        self.set(key.trim(), parse_literal(value.trim()))
    }

    pub fn build(&self) -> Result<ExperimentConfig, CliError> {
        unflatten(&self.values)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))
    }
}

fn core_err(e: icp_core::Error) -> CliError {
    CliError::from(e)
}

fn parse_factors(text: &str) -> Result<Vec<(FactorKind, usize)>, CliError> {
    text.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|part| {
            let (name, card) = part
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("data.factors: `{part}` is not name=cardinality")))?;
            let card = card
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("data.factors: bad cardinality in `{part}`")))?;
            Ok((FactorKind::parse(name).map_err(core_err)?, card))
        })
        .collect()
}

fn parse_label_rule(text: &str) -> Result<LabelRule, CliError> {
    match text.trim().split_once(':') {
        None if text.trim().eq_ignore_ascii_case("quadrant") => Ok(LabelRule::Quadrant),
        Some((kind, factor)) if kind.trim().eq_ignore_ascii_case("modulo") => Ok(LabelRule::FactorModulo {
            factor: FactorKind::parse(factor).map_err(core_err)?,
        }),
        _ => Err(CliError::Config(format!(
            "data.label_rule: unknown rule `{text}` (expected quadrant or modulo:<factor>)"
        ))),
    }
}

fn parse_renderer(text: &str) -> Result<Renderer, CliError> {
    match text.trim().to_ascii_lowercase().as_str() {
        "square" => Ok(Renderer::Square),
        "ellipse" => Ok(Renderer::Ellipse),
        other => Err(CliError::Config(format!(
            "data.renderer: unknown renderer `{other}` (expected square, ellipse)"
        ))),
    }
}

fn parse_variant(text: &str, field: &str) -> Result<Variant, CliError> {
    text.parse::<Variant>()
        .map_err(|_| CliError::Config(format!("{field}: unknown variant `{text}`")))
}

impl ExperimentConfig {
    pub fn mode(&self) -> Result<Mode, CliError> {
        self.data.mode.parse().map_err(core_err)
    }

    pub fn variants(&self) -> Result<Vec<Variant>, CliError> {
        self.ablation
            .variants
            .iter()
            .map(|v| parse_variant(v, "ablation.variants"))
            .collect()
    }

    pub fn dataset_ref(&self) -> Result<DatasetRef, CliError> {
        let d = &self.data;
        let path = || {
            if d.path.is_empty() {
                Err(CliError::Config(format!("data.path is required for data.kind = {}", d.kind)))
            } else {
                Ok(PathBuf::from(&d.path))
            }
        };
        match d.kind.as_str() {
            "synthetic" => {
                let spec = FactorSpec::new(
                    &parse_factors(&d.factors)?,
                    (d.image_size, d.image_size),
                    parse_renderer(&d.renderer)?,
                );
                spec.validate().map_err(core_err)?;
                let labels = match self.mode()? {
                    Mode::Supervised => Some(LabelSpec {
                        num_classes: d.num_classes,
                        rule: parse_label_rule(&d.label_rule)?,
                    }),
                    Mode::SelfSupervised => None,
                };
                Ok(DatasetRef::Synthetic { spec, labels })
            }
            "dsprites" => Ok(DatasetRef::Dsprites {
                path: path()?,
                max_samples: (d.max_samples > 0).then_some(d.max_samples),
            }),
            "cache" => Ok(DatasetRef::Cache { path: path()? }),
            other => Err(CliError::Config(format!(
                "data.kind: unknown kind `{other}` (expected synthetic, dsprites, cache)"
            ))),
        }
    }

    /// Architecture for `input_shape`; classes come from `data` in
    /// supervised mode.
    pub fn arch(&self, input_shape: (usize, usize, usize)) -> Result<ArchSpec, CliError> {
        let a = &self.arch;
        let mode = self.mode()?;
        Ok(ArchSpec {
            input_shape,
            d_z: a.d_z,
            d_y: a.d_y,
            num_classes: (mode == Mode::Supervised).then_some(self.data.num_classes),
            trunk_widths: a.widths.clone(),
            mode,
            trunk: a.trunk.parse::<TrunkKind>().map_err(core_err)?,
            activation: a.activation.parse::<Activation>().map_err(core_err)?,
            disc_width: a.disc_width,
            pred_width: a.pred_width,
        })
    }

    pub fn train_config(&self, input_shape: (usize, usize, usize), output_dir: &Path) -> Result<TrainConfig, CliError> {
        let hp = IcpHyperparams {
            alpha: self.hp.alpha,
            beta: self.hp.beta,
            gamma: self.hp.gamma,
            variant: parse_variant(&self.hp.variant, "hp.variant")?,
        };
        let t = &self.trainer;
        if !(0.0..1.0).contains(&self.data.test_fraction) {
            return Err(CliError::Config("data.test_fraction must lie in [0, 1)".into()));
        }
        let mut cfg = TrainConfig::new(hp, self.arch(input_shape)?, self.dataset_ref()?, output_dir);
        cfg.steps = t.steps;
        cfg.batch_size = t.batch_size;
        cfg.lr_main = t.lr_main;
        cfg.lr_d = t.lr_d;
        cfg.lr_h = t.lr_h;
        cfg.seed = t.seed;
        cfg.log_every = t.log_every;
        cfg.checkpoint_every = t.checkpoint_every;
        cfg.d_steps = t.d_steps;
        cfg.h_steps = t.h_steps;
        cfg.patience = (t.patience > 0).then_some(t.patience);
        cfg.record_wall_time = t.record_wall_time;
        cfg.validate().map_err(core_err)?;
        Ok(cfg)
    }

    /// Canonical single-line JSON used for hashing.
    pub fn canonical(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}
