#![allow(dead_code)]

use pflego_core::data::{
    build_federation, generate_synthetic, ClientDataset, Degree, FederationSpec,
    PersonalizationSpec, SyntheticSpec,
};
use pflego_core::fl::{Algorithm, AlgorithmConfig, Federation, ParticipationConfig};
use pflego_core::model::{Backbone, PersonalizedModel};
use pflego_core::optim::{AdamConfig, LrSchedule, ServerMode};

/// Synthetic clients with `classes` classes, dimension 10.
pub fn datasets(
    seed: u64,
    clients: usize,
    classes: usize,
    degree: Degree,
    per_class: usize,
) -> Vec<ClientDataset> {
    let pool = generate_synthetic(&SyntheticSpec {
        classes,
        input_dim: 10,
        samples_per_class: per_class,
        spread: 0.5,
        seed,
    })
    .unwrap();
    let spec = FederationSpec {
        clients,
        personalization: PersonalizationSpec {
            degree,
            total_classes: classes,
        },
        train_fraction: 0.75,
        seed,
    };
    build_federation(&pool, None, &spec).unwrap()
}

/// Four clients with two classes each, a 10 -> 8 -> 6 backbone and 2 x 6 heads.
pub fn four_clients(seed: u64) -> (PersonalizedModel, Vec<ClientDataset>) {
    let data = datasets(seed, 4, 4, Degree::High, 24);
    let mut model = PersonalizedModel::new(Backbone::mlp(10, &[8, 6]).unwrap(), seed).unwrap();
    model.ensure_heads(&data);
    (model, data)
}

pub fn pflego(local_steps: usize, server: ServerMode) -> AlgorithmConfig {
    AlgorithmConfig {
        algorithm: Algorithm::Pflego,
        local_steps,
        client_rate: 0.05,
        server,
        alpha_in_head_update: true,
    }
}

pub fn sgd(rate: f64) -> ServerMode {
    ServerMode::PureSgd(LrSchedule::Constant(rate))
}

pub fn adam(rate: f64) -> ServerMode {
    ServerMode::Adam(AdamConfig::with_rate(rate))
}

pub fn federation(
    algorithm: Algorithm,
    local_steps: usize,
    participation: ParticipationConfig,
    seed: u64,
) -> Federation {
    let cfg = AlgorithmConfig {
        algorithm,
        ..pflego(local_steps, adam(0.01))
    };
    Federation::new(
        cfg,
        participation,
        Backbone::mlp(10, &[8, 6]).unwrap(),
        4,
        seed,
    )
    .unwrap()
}
