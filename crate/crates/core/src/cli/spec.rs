//! Experiment specification files (TOML).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aggregate::Strategy;
use crate::datagen::{self, Federation};
use crate::engine::RunConfig;
use crate::error::{Error, Result};
use crate::localtrain::LocalConfig;
use crate::models::Arch;
use crate::numerics::Rng;

pub const SCHEMA: &str = "fairfed.experiment/1";

const DATA_STREAM: u64 = 0xda7a;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub schema: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
    /// Default run seed; overridden on the command line.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub data: DataSpec,
    pub model: ModelSpec,
    #[serde(default)]
    pub run: RunSpec,
    pub strategy: Strategy,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub sweep: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    /// Seed for data generation; the run seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub generator: GeneratorSpec,
    pub partition: PartitionSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorSpec {
    GaussianMixture {
        classes: usize,
        features: usize,
        per_class: usize,
        separation: f64,
    },
}

fn default_split() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionSpec {
    Dirichlet {
        clients: usize,
        concentration: f64,
        #[serde(default = "default_split")]
        split_ratio: f64,
    },
    /// Two-class label shift over shared pools; a second pool of the same
    /// size is drawn for testing.
    LabelShift { clients: usize, alpha: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    SoftmaxRegression,
    Mlp { hidden: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_participation")]
    pub participation: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_every: Option<usize>,
    #[serde(default = "default_true")]
    pub parallel: bool,
    #[serde(default)]
    pub local: LocalConfig,
}

fn default_rounds() -> usize {
    200
}

fn default_participation() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

impl Default for RunSpec {
    fn default() -> Self {
        Self {
            rounds: default_rounds(),
            participation: default_participation(),
            eval_every: None,
            parallel: true,
            local: LocalConfig::default(),
        }
    }
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: ExperimentSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        // serde skips unknown-key checks on unit variants, so compare keys by hand
        let raw: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let known = toml::Table::try_from(&spec.strategy).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(toml::Value::Table(given)) = raw.get("strategy") {
            if let Some(key) = given.keys().find(|k| !known.contains_key(*k)) {
                return Err(Error::Config(format!(
                    "strategy.{key}: unknown field for strategy {}",
                    spec.strategy.tag()
                )));
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != SCHEMA {
            return Err(Error::Config(format!("schema: expected {SCHEMA:?}, got {:?}", self.schema)));
        }
        let GeneratorSpec::GaussianMixture {
            classes,
            features,
            per_class,
            separation,
        } = self.data.generator;
        if classes < 2 {
            return Err(Error::Config(format!("data.generator.classes: need at least 2, got {classes}")));
        }
        if features == 0 || per_class == 0 {
            return Err(Error::Config("data.generator: features and per_class must be positive".into()));
        }
        if !(separation >= 0.0 && separation.is_finite()) {
            return Err(Error::Config(format!("data.generator.separation: must be >= 0, got {separation}")));
        }
        match self.data.partition {
            PartitionSpec::Dirichlet {
                clients,
                concentration,
                split_ratio,
            } => {
                if clients == 0 {
                    return Err(Error::Config("data.partition.clients: must be positive".into()));
                }
                if !(concentration > 0.0 && concentration.is_finite()) {
                    return Err(Error::Config(format!(
                        "data.partition.concentration: must be positive, got {concentration}"
                    )));
                }
                if !(split_ratio > 0.0 && split_ratio < 1.0) {
                    return Err(Error::Config(format!(
                        "data.partition.split_ratio: must lie in (0, 1), got {split_ratio}"
                    )));
                }
                if classes * per_class < 2 * clients {
                    return Err(Error::Config(format!(
                        "data: {} samples cannot fill {clients} clients",
                        classes * per_class
                    )));
                }
            }
            PartitionSpec::LabelShift { clients, alpha } => {
                if classes != 2 {
                    return Err(Error::Config(format!("data.partition: label_shift needs 2 classes, got {classes}")));
                }
                if clients < 2 {
                    return Err(Error::Config("data.partition.clients: label_shift needs at least 2".into()));
                }
                if !(0.0..=1.0).contains(&alpha) {
                    return Err(Error::Config(format!("data.partition.alpha: must lie in [0, 1], got {alpha}")));
                }
            }
        }
        if let ModelSpec::Mlp { hidden: 0 } = self.model {
            return Err(Error::Config("model.hidden: must be positive".into()));
        }
        self.run_config(0).validate()?;
        for (name, values) in &self.sweep {
            if values.is_empty() {
                return Err(Error::Config(format!("sweep.{name}: empty grid")));
            }
            for &v in values {
                self.at_grid_point(&[(name.clone(), v)])?;
            }
        }
        Ok(())
    }

    pub fn arch(&self) -> Arch {
        let GeneratorSpec::GaussianMixture { classes, features, .. } = self.data.generator;
        match self.model {
            ModelSpec::SoftmaxRegression => Arch::SoftmaxRegression {
                inputs: features,
                classes,
            },
            ModelSpec::Mlp { hidden } => Arch::Mlp {
                inputs: features,
                hidden,
                classes,
            },
        }
    }

    pub fn run_config(&self, seed: u64) -> RunConfig {
        RunConfig {
            rounds: self.run.rounds,
            participation: self.run.participation,
            local: self.run.local,
            strategy: self.strategy.clone(),
            eval_every: self.run.eval_every,
            seed,
            parallel: self.run.parallel,
        }
    }

    /// Builds the federation deterministically from the data seed.
    pub fn build_federation(&self, run_seed: u64) -> Result<Federation> {
        let root = Rng::new(self.data.seed.unwrap_or(run_seed)).substream(DATA_STREAM);
        let GeneratorSpec::GaussianMixture {
            classes,
            features,
            per_class,
            separation,
        } = self.data.generator;
        let pool = datagen::make_gaussian_mixture(&mut root.substream(0), classes, features, per_class, separation)?;
        match self.data.partition {
            PartitionSpec::Dirichlet {
                clients,
                concentration,
                split_ratio,
            } => datagen::dirichlet_partition(&mut root.substream(1), &pool, clients, concentration, split_ratio),
            PartitionSpec::LabelShift { clients, alpha } => {
                // Draw twice the per-class count; first half trains, second half tests.
                let both = datagen::make_gaussian_mixture(&mut root.substream(0), classes, features, 2 * per_class, separation)?;
                let (train, test): (Vec<_>, Vec<_>) = (0..classes)
                    .flat_map(|j| both.class_indices(j).iter().enumerate().map(|(k, &i)| (k < per_class, i)))
                    .partition(|(first, _)| *first);
                let pick = |idx: Vec<(bool, usize)>| -> Result<datagen::LabeledPool> {
                    let samples = idx.into_iter().map(|(_, i)| both.samples()[i].clone()).collect();
                    datagen::LabeledPool::new(samples, classes, features)
                };
                datagen::label_shift_partition_split(&pick(train)?, &pick(test)?, clients, alpha)
            }
        }
    }

    /// Copy of this experiment with sweep values applied.
    pub fn at_grid_point(&self, point: &[(String, f64)]) -> Result<ExperimentSpec> {
        let mut spec = self.clone();
        spec.sweep.clear();
        for (name, value) in point {
            if name == "eta" {
                spec.run.local.eta = *value;
            } else {
                spec.strategy = spec.strategy.with_param(name, *value)?;
            }
        }
        spec.strategy
            .validate()
            .and_then(|_| spec.run.local.validate().map_err(|e| Error::Config(e.to_string())))
            .map_err(|e| Error::Config(format!("sweep point {point:?}: {e}")))?;
        Ok(spec)
    }

    /// Cartesian product of the sweep grid, in key order then value order.
    pub fn grid(&self) -> Vec<Vec<(String, f64)>> {
        let mut points = vec![Vec::new()];
        for (name, values) in &self.sweep {
            points = points
                .into_iter()
                .flat_map(|p| {
                    values.iter().map(move |&v| {
                        let mut q = p.clone();
                        q.push((name.clone(), v));
                        q
                    })
                })
                .collect();
        }
        points
    }
}
