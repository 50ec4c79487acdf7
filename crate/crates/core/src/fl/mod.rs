//! Federation algorithms behind one round interface.
//!
//! * **PFLEGO**: clients adapt their heads on cached features, return the
//!   backbone gradient and take one scaled head step; the server applies the
//!   `I/r`-scaled, data-weighted gradient sum.
//! * **FedRecon**: like PFLEGO without the scaled final head step.
//! * **FedPer**: clients train head and a backbone copy jointly; the server
//!   averages backbone copies.
//! * **FedAvg**: no personal heads; one `C`-way head is part of the shared
//!   parameters and whole-network copies are averaged.

mod client;
mod participation;
mod server;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::data::{ClientDataset, ClientId};
use crate::error::{config, input, Result};
use crate::model::{Backbone, PassCounter, PersonalizedModel};
use crate::nn::ParamVector;
use crate::optim::{ServerMode, ServerOptimizer};

pub use client::{
    fedavg_client_round, fedper_client_round, fedrecon_client_round, network_loss_and_gradient,
    pflego_client_round, FinalHeadStep, GradientReturn,
};
pub use participation::{sample_participants, Participation, ParticipationConfig};
pub use server::{assemble_gradient, fedavg_aggregate, pflego_server_aggregate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Algorithm {
    Pflego,
    FedAvg,
    FedPer,
    FedRecon,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [
        Algorithm::Pflego,
        Algorithm::FedAvg,
        Algorithm::FedPer,
        Algorithm::FedRecon,
    ];

    /// Whether clients keep a personal head.
    pub fn has_personal_heads(self) -> bool {
        self != Algorithm::FedAvg
    }

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Pflego => "pflego",
            Algorithm::FedAvg => "fedavg",
            Algorithm::FedPer => "fedper",
            Algorithm::FedRecon => "fedrecon",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                config(format!(
                    "unknown algorithm `{s}` (expected pflego, fedavg, fedper or fedrecon)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlgorithmConfig {
    pub algorithm: Algorithm,
    /// Local gradient updates per client per round (`τ`).
    pub local_steps: usize,
    /// Client learning rate `β`.
    pub client_rate: f64,
    pub server: ServerMode,
    /// Multiply PFLEGO's final head step by the client's data share `α_i`.
    pub alpha_in_head_update: bool,
}

impl AlgorithmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local_steps == 0 {
            return Err(config("local_steps must be at least 1"));
        }
        if !(self.client_rate > 0.0 && self.client_rate.is_finite()) {
            return Err(config(format!(
                "client rate {} must be positive",
                self.client_rate
            )));
        }
        if !(self.server.rate(1) > 0.0) {
            return Err(config("server rate must be positive"));
        }
        Ok(())
    }
}

/// Per-round bookkeeping returned by [`Federation::round`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoundOutcome {
    /// Backbone evaluations per participating client.
    pub passes: BTreeMap<ClientId, u64>,
    /// Head-iterate losses reported by gradient-returning clients.
    pub client_losses: BTreeMap<ClientId, Vec<f64>>,
}

enum ClientReturn {
    Gradient(GradientReturn),
    Params(ParamVector),
}

/// Server plus client state of one federation.
#[derive(Debug, Clone)]
pub struct Federation {
    config: AlgorithmConfig,
    participation: ParticipationConfig,
    model: PersonalizedModel,
    optimizer: ServerOptimizer,
    round: u64,
}

impl Federation {
    /// `backbone` is the shared feature extractor; for FedAvg a bias-free
    /// `global_classes`-way layer is appended to it.
    pub fn new(
        config: AlgorithmConfig,
        participation: ParticipationConfig,
        backbone: Backbone,
        global_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        participation.validate()?;
        let network = match config.algorithm {
            Algorithm::FedAvg => backbone.with_linear_head(global_classes)?,
            _ => backbone,
        };
        let model = PersonalizedModel::new(network, seed)?;
        let optimizer = ServerOptimizer::new(config.server, model.theta.params())?;
        Ok(Self {
            config,
            participation,
            model,
            optimizer,
            round: 0,
        })
    }

    /// Starts from an explicit model, e.g. a copy of an oracle's state.
    pub fn from_model(
        config: AlgorithmConfig,
        participation: ParticipationConfig,
        model: PersonalizedModel,
    ) -> Result<Self> {
        config.validate()?;
        participation.validate()?;
        let optimizer = ServerOptimizer::new(config.server, model.theta.params())?;
        Ok(Self {
            config,
            participation,
            model,
            optimizer,
            round: 0,
        })
    }

    pub fn config(&self) -> &AlgorithmConfig {
        &self.config
    }

    pub fn participation(&self) -> &ParticipationConfig {
        &self.participation
    }

    pub fn model(&self) -> &PersonalizedModel {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut PersonalizedModel {
        &mut self.model
    }

    pub fn optimizer(&self) -> &ServerOptimizer {
        &self.optimizer
    }

    /// Rounds completed so far, including empty ones.
    pub fn rounds_completed(&self) -> u64 {
        self.round
    }

    /// Runs one round with the given participants.
    ///
    /// Client work runs on `pool` when provided. Results are combined in
    /// ascending client order, so the outcome does not depend on threading.
    pub fn round(
        &mut self,
        participants: &[ClientId],
        datasets: &[ClientDataset],
        pool: Option<&rayon::ThreadPool>,
    ) -> Result<RoundOutcome> {
        for (i, d) in datasets.iter().enumerate() {
            if d.client_id != i {
                return Err(input(format!(
                    "dataset at position {i} belongs to client {}",
                    d.client_id
                )));
            }
        }
        let mut ids = participants.to_vec();
        ids.sort_unstable();
        ids.dedup();
        if let Some(&bad) = ids.iter().find(|&&id| id >= datasets.len()) {
            return Err(input(format!("participant {bad} has no dataset")));
        }
        self.round += 1;
        let t = self.round;
        if ids.is_empty() {
            return Ok(RoundOutcome::default());
        }

        let personal = self.config.algorithm.has_personal_heads();
        let jobs: Vec<(ClientId, Option<ParamVector>)> = ids
            .iter()
            .map(|&id| {
                let head = personal.then(|| self.model.take_head(id, datasets[id].num_classes()));
                (id, head)
            })
            .collect();

        let cfg = self.config;
        let scale = self.participation.inclusion_scale();
        let rate = cfg.server.rate(t);
        let model = &self.model;
        let work = |(id, mut head): (ClientId, Option<ParamVector>)| -> Result<(ClientId, Option<ParamVector>, ClientReturn, u64)> {
            let data = &datasets[id];
            let mut passes = PassCounter::new();
            let ret = match cfg.algorithm {
                Algorithm::Pflego => {
                    let step = FinalHeadStep {
                        rate,
                        inclusion_scale: scale,
                        alpha: data.alpha,
                    };
                    let h = head.as_mut().expect("personal head");
                    ClientReturn::Gradient(pflego_client_round(&model.backbone, &model.theta, h, data, &cfg, step, &mut passes)?)
                }
                Algorithm::FedRecon => {
                    let h = head.as_mut().expect("personal head");
                    ClientReturn::Gradient(fedrecon_client_round(&model.backbone, &model.theta, h, data, &cfg, &mut passes)?)
                }
                Algorithm::FedPer => {
                    let h = head.as_mut().expect("personal head");
                    ClientReturn::Params(fedper_client_round(&model.backbone, model.theta.params(), h, data, &cfg, &mut passes)?)
                }
                Algorithm::FedAvg => {
                    ClientReturn::Params(fedavg_client_round(&model.backbone, model.theta.params(), data, &cfg, &mut passes)?)
                }
            };
            Ok((id, head, ret, passes.count()))
        };
        let results: Vec<Result<_>> = match pool {
            Some(pool) => pool.install(|| jobs.into_par_iter().map(work).collect()),
            None => jobs.into_iter().map(work).collect(),
        };

        let mut outcome = RoundOutcome::default();
        let mut gradients = BTreeMap::new();
        let mut params = BTreeMap::new();
        for r in results {
            let (id, head, ret, passes) = r?;
            if let Some(h) = head {
                self.model.heads.insert(id, h);
            }
            outcome.passes.insert(id, passes);
            match ret {
                ClientReturn::Gradient(g) => {
                    outcome.client_losses.insert(id, g.losses);
                    gradients.insert(id, g.gradient);
                }
                ClientReturn::Params(p) => {
                    params.insert(id, p);
                }
            }
        }

        let alphas: Vec<f64> = datasets.iter().map(|d| d.alpha).collect();
        match cfg.algorithm {
            Algorithm::Pflego | Algorithm::FedRecon => {
                pflego_server_aggregate(
                    &mut self.model.theta,
                    &gradients,
                    &alphas,
                    scale,
                    &mut self.optimizer,
                    t,
                )?;
            }
            Algorithm::FedAvg | Algorithm::FedPer => {
                if let Some(avg) = fedavg_aggregate(&params, &alphas)? {
                    self.model.theta.replace(avg)?;
                }
            }
        }
        Ok(outcome)
    }
}
