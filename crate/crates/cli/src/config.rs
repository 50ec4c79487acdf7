//! Run configuration: a TOML file with one table per concern, plus the
//! command-line overrides.
//!
//! Only `seed`, `algorithm` and `[data]` are required. Unknown keys are
//! rejected.

use std::path::{Path, PathBuf};

use anyhow::Context;
use pflego_core::data::Degree;
use pflego_core::fl::{Algorithm, AlgorithmConfig, ParticipationConfig};
use pflego_core::optim::{AdamConfig, LrSchedule, ServerMode};
use pflego_core::orchestrator::{DataSource, ExperimentConfig, IdxSource, SyntheticSource};
use serde::{Deserialize, Serialize};

use crate::UsageError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub algorithm: String,
    #[serde(default = "defaults::rounds")]
    pub rounds: u64,
    #[serde(default = "defaults::one")]
    pub eval_every: u64,
    #[serde(default = "defaults::one_usize")]
    pub threads: usize,
    #[serde(default)]
    pub client: ClientSection,
    #[serde(default)]
    pub server: ServerSection,
    #[serde(default)]
    pub participation: ParticipationSection,
    #[serde(default)]
    pub personalization: PersonalizationSection,
    #[serde(default)]
    pub model: ModelSection,
    pub data: DataSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientSection {
    #[serde(default = "defaults::local_steps")]
    pub local_steps: usize,
    #[serde(default = "defaults::client_rate")]
    pub rate: f64,
    #[serde(default = "defaults::yes")]
    pub alpha_in_head_update: bool,
}

impl Default for ClientSection {
    fn default() -> Self {
        Self {
            local_steps: defaults::local_steps(),
            rate: defaults::client_rate(),
            alpha_in_head_update: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ServerOptimizerName {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleName {
    Constant,
    RobbinsMonro,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerSection {
    #[serde(default = "defaults::optimizer")]
    pub optimizer: ServerOptimizerName,
    #[serde(default = "defaults::server_rate")]
    pub rate: f64,
    /// Plain SGD only.
    #[serde(default = "defaults::schedule")]
    pub schedule: ScheduleName,
}

impl Default for ServerSection {
    fn default() -> Self {
        Self {
            optimizer: defaults::optimizer(),
            rate: defaults::server_rate(),
            schedule: defaults::schedule(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParticipationMode {
    Fixed,
    Binomial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticipationSection {
    #[serde(default = "defaults::clients")]
    pub clients: usize,
    #[serde(default = "defaults::mode")]
    pub mode: ParticipationMode,
    /// `r / I`; for fixed participation `r` is rounded to the nearest integer.
    #[serde(default = "defaults::fraction")]
    pub fraction: f64,
}

impl Default for ParticipationSection {
    fn default() -> Self {
        Self {
            clients: defaults::clients(),
            mode: defaults::mode(),
            fraction: defaults::fraction(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DegreeName {
    High,
    Medium,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PersonalizationSection {
    #[serde(default = "defaults::degree")]
    pub degree: DegreeName,
}

impl Default for PersonalizationSection {
    fn default() -> Self {
        Self {
            degree: defaults::degree(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// ReLU layer widths of the backbone; the last is the feature size.
    #[serde(default = "defaults::hidden")]
    pub hidden: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden: defaults::hidden(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSection {
    Synthetic {
        #[serde(default = "defaults::classes")]
        classes: usize,
        #[serde(default = "defaults::input_dim")]
        input_dim: usize,
        #[serde(default = "defaults::samples_per_class")]
        samples_per_class: usize,
        #[serde(default = "defaults::spread")]
        spread: f64,
        #[serde(default = "defaults::train_fraction")]
        train_fraction: f64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        #[serde(default)]
        test_images: Option<PathBuf>,
        #[serde(default)]
        test_labels: Option<PathBuf>,
        #[serde(default)]
        samples_per_class: Option<usize>,
        #[serde(default = "defaults::train_fraction")]
        train_fraction: f64,
    },
}

mod defaults {
    use super::*;

    pub fn rounds() -> u64 {
        200
    }
    pub fn one() -> u64 {
        1
    }
    pub fn one_usize() -> usize {
        1
    }
    pub fn yes() -> bool {
        true
    }
    pub fn local_steps() -> usize {
        50
    }
    pub fn client_rate() -> f64 {
        0.007
    }
    pub fn optimizer() -> ServerOptimizerName {
        ServerOptimizerName::Adam
    }
    pub fn server_rate() -> f64 {
        0.001
    }
    pub fn schedule() -> ScheduleName {
        ScheduleName::Constant
    }
    pub fn clients() -> usize {
        20
    }
    pub fn mode() -> ParticipationMode {
        ParticipationMode::Fixed
    }
    pub fn fraction() -> f64 {
        0.2
    }
    pub fn degree() -> DegreeName {
        DegreeName::High
    }
    pub fn hidden() -> Vec<usize> {
        vec![200]
    }
    pub fn classes() -> usize {
        10
    }
    pub fn input_dim() -> usize {
        10
    }
    pub fn samples_per_class() -> usize {
        133
    }
    pub fn spread() -> f64 {
        0.5
    }
    pub fn train_fraction() -> f64 {
        0.75
    }
}

/// Command-line values that replace file values.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub rounds: Option<u64>,
    pub algorithm: Option<String>,
    pub threads: Option<usize>,
}

impl RunConfig {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let de = toml::Deserializer::parse(text)
            .map_err(|e| UsageError(format!("invalid config: {e}")))?;
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            UsageError(format!("config key `{path}`: {}", e.into_inner().message())).into()
        })
    }

    pub fn load(path: &Path, overrides: &Overrides) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        cfg.apply(overrides);
        cfg.experiment().map_err(|e| UsageError(e.to_string()))?;
        Ok(cfg)
    }

    pub fn apply(&mut self, overrides: &Overrides) {
        if let Some(s) = overrides.seed {
            self.seed = s;
        }
        if let Some(t) = overrides.rounds {
            self.rounds = t;
        }
        if let Some(a) = &overrides.algorithm {
            self.algorithm = a.clone();
        }
        if let Some(n) = overrides.threads {
            self.threads = n;
        }
    }

    pub fn algorithm(&self) -> anyhow::Result<Algorithm> {
        Ok(self.algorithm.parse::<Algorithm>()?)
    }

    /// The resolved experiment; fails on values the core rejects.
    pub fn experiment(&self) -> anyhow::Result<ExperimentConfig> {
        let server = match self.server.optimizer {
            ServerOptimizerName::Adam if self.server.schedule != ScheduleName::Constant => {
                anyhow::bail!("server.schedule applies to the sgd optimizer only")
            }
            ServerOptimizerName::Adam => ServerMode::Adam(AdamConfig::with_rate(self.server.rate)),
            ServerOptimizerName::Sgd => ServerMode::PureSgd(match self.server.schedule {
                ScheduleName::Constant => LrSchedule::Constant(self.server.rate),
                ScheduleName::RobbinsMonro => LrSchedule::RobbinsMonro(self.server.rate),
            }),
        };
        let algorithm = AlgorithmConfig {
            algorithm: self.algorithm()?,
            local_steps: self.client.local_steps,
            client_rate: self.client.rate,
            server,
            alpha_in_head_update: self.client.alpha_in_head_update,
        };
        let p = &self.participation;
        let participation = match p.mode {
            ParticipationMode::Fixed => {
                let r = (p.fraction * p.clients as f64).round() as usize;
                ParticipationConfig::fixed(p.clients, r)
            }
            ParticipationMode::Binomial => ParticipationConfig::binomial(p.clients, p.fraction),
        }
        .with_context(|| {
            format!(
                "participation fraction {} over {} clients",
                p.fraction, p.clients
            )
        })?;
        let degree = match self.personalization.degree {
            DegreeName::High => Degree::High,
            DegreeName::Medium => Degree::Medium,
            DegreeName::None => Degree::None,
        };
        let (data, train_fraction) = match &self.data {
            DataSection::Synthetic {
                classes,
                input_dim,
                samples_per_class,
                spread,
                train_fraction,
            } => (
                DataSource::Synthetic(SyntheticSource {
                    classes: *classes,
                    input_dim: *input_dim,
                    samples_per_class: *samples_per_class,
                    spread: *spread,
                }),
                *train_fraction,
            ),
            DataSection::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                samples_per_class,
                train_fraction,
            } => {
                let test = match (test_images, test_labels) {
                    (Some(i), Some(l)) => Some((i.clone(), l.clone())),
                    (None, None) => None,
                    _ => anyhow::bail!(
                        "data.test_images and data.test_labels must be given together"
                    ),
                };
                (
                    DataSource::Idx(IdxSource {
                        train_images: train_images.clone(),
                        train_labels: train_labels.clone(),
                        test,
                        samples_per_class: *samples_per_class,
                    }),
                    *train_fraction,
                )
            }
        };
        let cfg = ExperimentConfig {
            seed: self.seed,
            rounds: self.rounds,
            eval_every: self.eval_every,
            algorithm,
            participation,
            degree,
            data,
            hidden: self.model.hidden.clone(),
            train_fraction,
            threads: self.threads,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
