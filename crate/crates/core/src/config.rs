//! Experiment configuration: a TOML file with `data`, `model`, `train`,
//! `losses` and `scenario` sections, layered over a built-in preset.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{generate_domain_split, DomainDataset, DomainSpec, DomainSplit, FaultClass, Scenario};
use crate::error::{Error, Result};
use crate::evaluation::AdaptMode;
use crate::losses::LossWeights;
use crate::model::{ConvBlockSpec, ModelSpec, NormKind};
use crate::optim::OptimizerKind;
use crate::trainer::{CbnSourceStream, ReplayScope, TrainConfig};

const DESK: &str = include_str!("../presets/desk.toml");
const PAPER: &str = include_str!("../presets/paper.toml");

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Desk,
    Paper,
}

impl Preset {
    pub fn source(self) -> &'static str {
        match self {
            Preset::Desk => DESK,
            Preset::Paper => PAPER,
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected desk or paper)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassEntry {
    pub name: String,
    pub impulse_rate: f64,
    pub impulse_amplitude: f64,
    pub resonance_hz: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainEntry {
    pub id: String,
    pub rotation_hz: f64,
    pub load_scale: f64,
    pub noise_sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub window_len: usize,
    pub sample_rate_hz: f64,
    pub damping: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
    pub classes: Vec<ClassEntry>,
    pub domains: Vec<DomainEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub conv_blocks: Vec<ConvBlockSpec>,
    pub pool_window: usize,
    pub adaptive_out: usize,
    pub epsilon: f64,
    pub ema_momentum: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    #[serde(default)]
    pub pretrain_epochs: Option<usize>,
    pub batch_size: usize,
    pub replay_fraction: f64,
    pub pseudo_threshold: f64,
    pub cbn_source_stream: CbnSourceStream,
    pub replay_scope: ReplayScope,
    pub adapt_mode: AdaptMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    pub alpha_start: f64,
    pub alpha_end: f64,
    pub beta_replay: f64,
    pub kernel_multipliers: Vec<f64>,
    pub min_per_class: usize,
    pub threshold_alignment: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub losses: LossSection,
    pub scenario: Scenario,
}

/// Recursively overlays `top` on `base`; tables merge, everything else
/// (arrays included) is replaced.
pub fn merge_toml(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge_toml(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn parse_table(text: &str, origin: &str) -> Result<toml::Value> {
    text.parse::<toml::Table>()
        .map(toml::Value::Table)
        .map_err(|e| Error::Config(format!("{origin}: {e}")))
}

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        Self::from_toml_str("", preset).expect("bundled presets are valid")
    }

    /// Parses `text` layered over `preset`. A top-level `preset` key in the
    /// text overrides the argument.
    pub fn from_toml_str(text: &str, preset: Preset) -> Result<Self> {
        let mut user = parse_table(text, "config")?;
        let chosen = match user.as_table_mut().and_then(|t| t.remove("preset")) {
            Some(toml::Value::String(s)) => s.parse()?,
            Some(other) => return Err(Error::Config(format!("preset must be a string, got {other}"))),
            None => preset,
        };
        let mut merged = parse_table(chosen.source(), "preset")?;
        merge_toml(&mut merged, user);
        let cfg: Self = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; a missing file is a config error.
    pub fn load(path: &Path, preset: Preset) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text, preset).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.window_len == 0 || d.train_per_class == 0 || d.test_per_class == 0 {
            return Err(Error::Config(
                "data.window_len, data.train_per_class and data.test_per_class must be positive".into(),
            ));
        }
        for spec in self.domain_specs(d.train_per_class) {
            spec.validate()?;
        }
        let mut ids: Vec<&str> = d.domains.iter().map(|x| x.id.as_str()).collect();
        self.scenario.validate(&ids)?;
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("data.domains ids must be unique".into()));
        }
        self.model_spec(NormKind::Cbn)
            .validate()
            .map_err(|e| Error::Config(format!("model: {e}")))?;
        self.train_config(0).validate()
    }

    pub fn num_classes(&self) -> usize {
        self.data.classes.len()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.data.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn model_spec(&self, norm_mode: NormKind) -> ModelSpec {
        let m = &self.model;
        ModelSpec {
            conv_blocks: m.conv_blocks.clone(),
            in_channels: 1,
            input_len: self.data.window_len,
            pool_window: m.pool_window,
            adaptive_out: m.adaptive_out,
            feature_dim: m.conv_blocks.last().map_or(0, |b| b.channels) * m.adaptive_out,
            num_classes: self.num_classes(),
            norm_mode,
            epsilon: m.epsilon,
            ema_momentum: m.ema_momentum,
        }
    }

    /// Training settings of the full method for `seed`.
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let t = &self.train;
        let l = &self.losses;
        TrainConfig {
            optimizer: t.optimizer,
            lr: t.lr,
            weight_decay: t.weight_decay,
            epochs: t.epochs,
            pretrain_epochs: t.pretrain_epochs,
            batch_size: t.batch_size,
            seed,
            replay_fraction: t.replay_fraction,
            pseudo_threshold: t.pseudo_threshold,
            threshold_alignment: l.threshold_alignment,
            weights: LossWeights {
                alpha_start: l.alpha_start,
                alpha_end: l.alpha_end,
                total_steps: 1,
                beta_replay: l.beta_replay,
            },
            norm_mode: NormKind::Cbn,
            cbn_source_stream: t.cbn_source_stream,
            replay_scope: t.replay_scope,
            use_entropy: true,
            use_replay: true,
            use_alignment: true,
            kernel_multipliers: l.kernel_multipliers.clone(),
            min_per_class: l.min_per_class,
            adapt_mode: t.adapt_mode,
            eval_chunk: 256,
        }
    }

    pub fn domain_specs(&self, per_class: usize) -> Vec<DomainSpec> {
        let d = &self.data;
        let classes: Vec<FaultClass> = d
            .classes
            .iter()
            .enumerate()
            .map(|(i, c)| FaultClass {
                class_id: i,
                name: c.name.clone(),
                impulse_rate: c.impulse_rate,
                impulse_amplitude: c.impulse_amplitude,
                resonance_hz: c.resonance_hz,
            })
            .collect();
        d.domains
            .iter()
            .map(|x| DomainSpec {
                domain_id: x.id.clone(),
                rotation_hz: x.rotation_hz,
                load_scale: x.load_scale,
                noise_sigma: x.noise_sigma,
                n_per_class: per_class,
                classes: classes.clone(),
                sample_rate_hz: d.sample_rate_hz,
                damping: d.damping,
            })
            .collect()
    }

    /// Generates and standardizes the train and test split of every domain.
    pub fn generate(&self) -> Result<Vec<DomainSplit>> {
        let d = &self.data;
        let train = self.domain_specs(d.train_per_class);
        let test = self.domain_specs(d.test_per_class);
        train
            .iter()
            .zip(&test)
            .map(|(tr, te)| {
                Ok(DomainSplit {
                    train: generate_domain_split(tr, d.window_len, d.seed, "train")?.standardized(),
                    test: generate_domain_split(te, d.window_len, d.seed, "test")?.standardized(),
                })
            })
            .collect()
    }

    /// Source split and target splits, in scenario order.
    pub fn arrange<'a>(&self, splits: &'a [DomainSplit]) -> Result<(&'a DomainSplit, Vec<&'a DomainSplit>)> {
        let find = |id: &str| {
            splits
                .iter()
                .find(|s| s.domain_id() == id)
                .ok_or_else(|| Error::Config(format!("domain {id:?} not available")))
        };
        let source = find(&self.scenario.source)?;
        let targets = self.scenario.targets.iter().map(|t| find(t)).collect::<Result<_>>()?;
        Ok((source, targets))
    }

    /// Writes every domain as `<dir>/<id>/{train,test}/`.
    pub fn save_datasets(&self, splits: &[DomainSplit], dir: &Path) -> Result<()> {
        let names = self.class_names();
        for s in splits {
            s.train.save(&dir.join(s.domain_id()).join("train"), &names)?;
            s.test.save(&dir.join(s.domain_id()).join("test"), &names)?;
        }
        let scenario = toml::to_string(&self.scenario).expect("scenario serializes");
        crate::io::write_atomic(&dir.join("scenario.toml"), scenario.as_bytes())
    }

    /// Loads the scenario's domains from a directory written by
    /// [`Self::save_datasets`].
    pub fn load_datasets(&self, dir: &Path) -> Result<Vec<DomainSplit>> {
        let load = |id: &str, split: &str| -> Result<DomainDataset> {
            let d = DomainDataset::load(&dir.join(id).join(split))?;
            if d.window_len != self.data.window_len || d.num_classes != self.num_classes() {
                return Err(Error::Config(format!(
                    "dataset {id}/{split} has window {} and {} classes; config expects {} and {}",
                    d.window_len,
                    d.num_classes,
                    self.data.window_len,
                    self.num_classes()
                )));
            }
            Ok(d)
        };
        std::iter::once(&self.scenario.source)
            .chain(&self.scenario.targets)
            .map(|id| {
                Ok(DomainSplit {
                    train: load(id, "train")?,
                    test: load(id, "test")?,
                })
            })
            .collect()
    }
}
