//! Run configuration: a TOML document with one section per pipeline stage.
//!
//! Unknown keys are rejected. The document is laid over the defaults and
//! `section.key=value` overrides are applied on top before the result is
//! checked, so overrides obey the same rules as the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ablation::AblationSpec;
use crate::crf::EmissionMode;
use crate::dataset::{ApplianceAliases, LoadOptions, ResampleConfig};
use crate::error::{Error, Result};
use crate::metrics::DEFAULT_PERIOD_SAMPLES;
use crate::network::{LossKind, NetworkConfig};
use crate::simulator::{AggregationNoiseSpec, ApplianceFsm, TimeGrid, VarianceExperimentSpec};
use crate::states::ExtractionConfig;
use crate::train::{AdamConfig, SplitRatios, TrainConfig, WindowConfig};

pub const DATA_ROOT_ENV: &str = "MSDC_DATA_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// Falls back to `$MSDC_DATA_ROOT`, then `data`.
    pub root: Option<PathBuf>,
    pub house: String,
    pub appliances: Vec<String>,
    pub target_interval: f64,
    pub max_gap_intervals: f64,
    pub zero_fraction_threshold: f64,
    /// Replaces the bundled appliance alias table.
    pub aliases_file: Option<PathBuf>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            root: None,
            house: "1".into(),
            appliances: vec![
                "microwave".into(),
                "washing machine".into(),
                "dishwasher".into(),
                "fridge".into(),
            ],
            target_interval: 3.0,
            max_gap_intervals: 3.0,
            zero_fraction_threshold: 0.995,
            aliases_file: None,
        }
    }
}

impl DatasetSection {
    pub fn resolved_root(&self) -> PathBuf {
        self.root
            .clone()
            .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data"))
    }

    pub fn load_options(&self) -> Result<LoadOptions> {
        Ok(LoadOptions {
            resample: ResampleConfig {
                target_interval: self.target_interval,
                max_gap_intervals: self.max_gap_intervals,
            },
            zero_fraction_threshold: self.zero_fraction_threshold,
            aliases: match &self.aliases_file {
                Some(p) => ApplianceAliases::load(p)?,
                None => ApplianceAliases::default(),
            },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrfSection {
    pub emission: EmissionMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerSection {
    pub loss: LossKind,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam: AdamConfig,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Independent runs with seeds `seed, seed + 1, ...`.
    pub seeds: usize,
    pub split: SplitRatios,
}

impl Default for TrainerSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            loss: t.loss,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            adam: t.adam,
            max_epochs: t.max_epochs,
            patience: t.patience,
            seed: t.seed,
            seeds: 1,
            split: t.split,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    pub period_samples: usize,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            period_samples: DEFAULT_PERIOD_SAMPLES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulatorSection {
    pub house: String,
    pub length: usize,
    pub seed: u64,
    pub grid: TimeGrid,
    pub noise: AggregationNoiseSpec,
    pub appliances: Vec<ApplianceFsm>,
}

impl Default for SimulatorSection {
    fn default() -> Self {
        Self {
            house: "1".into(),
            length: 200_000,
            seed: 0,
            grid: TimeGrid::default(),
            noise: AggregationNoiseSpec::default(),
            appliances: vec![
                ApplianceFsm {
                    name: "washing machine".into(),
                    means: vec![0.0, 200.0, 1100.0],
                    stds: vec![1.0, 2.0, 5.0],
                    transition: vec![
                        vec![0.995, 0.005, 0.0],
                        vec![0.0, 0.98, 0.02],
                        vec![0.03, 0.0, 0.97],
                    ],
                    initial: None,
                },
                ApplianceFsm {
                    name: "fridge".into(),
                    means: vec![0.0, 150.0],
                    stds: vec![1.0, 3.0],
                    transition: vec![vec![0.98, 0.02], vec![0.03, 0.97]],
                    initial: None,
                },
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheorySection {
    pub spec: VarianceExperimentSpec,
    /// Watts.
    pub xi: f64,
}

impl Default for TheorySection {
    fn default() -> Self {
        Self {
            spec: VarianceExperimentSpec {
                probs: vec![1.0 / 3.0; 3],
                means: vec![0.0, 200.0, 1100.0],
                stds: vec![12.0; 3],
                sigma: Some(12.0),
                samples: 100_000,
                seed: 0,
            },
            xi: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub extraction: ExtractionConfig,
    pub window: WindowConfig,
    pub network: NetworkConfig,
    pub crf: CrfSection,
    pub trainer: TrainerSection,
    pub metrics: MetricsSection,
    pub simulator: SimulatorSection,
    pub theory: TheorySection,
    pub ablation: AblationSpec,
    pub output: OutputSection,
}

impl RunConfig {
    /// Parses `text`, applies `overrides` (`section.key=value`), and checks
    /// the result.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut doc = toml::Table::try_from(RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut doc, user);
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_with_overrides(&text, overrides)
    }

    /// TOML with every default filled in; reloading it reproduces `self`.
    pub fn snapshot(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config(self.trainer.seed).validate()?;
        if self.trainer.seeds == 0 {
            return Err(Error::Config("trainer.seeds must be >= 1".into()));
        }
        if self.metrics.period_samples == 0 {
            return Err(Error::Config("metrics.period_samples must be >= 1".into()));
        }
        Ok(())
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let t = &self.trainer;
        TrainConfig {
            loss: t.loss,
            window: self.window,
            network: self.network.clone(),
            emission: self.crf.emission,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            adam: t.adam,
            max_epochs: t.max_epochs,
            patience: t.patience,
            seed,
            split: t.split,
        }
    }
}

/// Overlays `top` onto `base`; tables merge key by key, anything else
/// (including arrays and `kind`-tagged variants) replaces.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) if !t.contains_key("kind") => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Sets `a.b.c = value` in `doc`; the value is read as a TOML literal and
/// falls back to a bare string.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{assignment}' is not key=value")))?;
    let keys: Vec<&str> = path.trim().trim_start_matches("--").split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("bad override key '{path}'")));
    }
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = keys.split_last().expect("non-empty");
    let mut table = doc;
    for k in parents {
        let entry = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override '{path}': '{k}' is not a section")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}
