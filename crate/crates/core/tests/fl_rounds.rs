mod common;

use std::collections::BTreeMap;

use pflego_core::data::Degree;
use pflego_core::fl::{
    fedavg_client_round, network_loss_and_gradient, Algorithm, AlgorithmConfig, Federation,
    ParticipationConfig,
};
use pflego_core::model::{joint_gradient, Backbone, PassCounter, PersonalizedModel};
use pflego_core::optim::{gd_step, ServerOptimizer};
use pflego_core::orchestrator::{run_experiment, DataSource, ExperimentConfig, SyntheticSource};

use common::{adam, datasets, federation, four_clients, pflego, sgd};

fn everyone(n: usize) -> Vec<usize> {
    (0..n).collect()
}

#[test]
fn backbone_passes_per_client_round() {
    let data = datasets(1, 4, 4, Degree::High, 24);
    for tau in [1, 5, 50] {
        for algorithm in Algorithm::ALL {
            let mut fed = federation(algorithm, tau, ParticipationConfig::fixed(4, 4).unwrap(), 1);
            for _ in 0..2 {
                let outcome = fed.round(&everyone(4), &data, None).unwrap();
                let want = match algorithm {
                    Algorithm::Pflego | Algorithm::FedRecon => 2,
                    Algorithm::FedAvg | Algorithm::FedPer => tau as u64,
                };
                assert_eq!(outcome.passes.len(), 4);
                assert!(
                    outcome.passes.values().all(|&p| p == want),
                    "{algorithm} τ={tau}: {:?}",
                    outcome.passes
                );
            }
        }
    }
}

#[test]
fn single_step_pflego_round_has_no_inner_steps() {
    let (model, data) = four_clients(2);
    let cfg = pflego(1, sgd(0.1));
    let mut fed = Federation::from_model(
        cfg,
        ParticipationConfig::fixed(4, 2).unwrap(),
        model.clone(),
    )
    .unwrap();
    let outcome = fed.round(&[1, 3], &data, None).unwrap();
    for id in [1, 3] {
        assert_eq!(outcome.client_losses[&id].len(), 1);
        let g = joint_gradient(
            &model.backbone,
            model.theta.params(),
            &model.heads[&id],
            &data[id].train,
            &mut PassCounter::new(),
        )
        .unwrap();
        let mut want = model.heads[&id].clone();
        // ρ · (I / r) · α_i
        want.add_scaled(-(0.1 * 2.0 * data[id].alpha), &g.head)
            .unwrap();
        assert!(fed.model().heads[&id].max_abs_diff(&want).unwrap() < 1e-15);
    }
    for id in [0, 2] {
        assert_eq!(fed.model().heads[&id], model.heads[&id]);
    }
}

#[test]
fn dropping_alpha_from_the_head_step() {
    let (model, data) = four_clients(3);
    let cfg = AlgorithmConfig {
        alpha_in_head_update: false,
        ..pflego(1, sgd(0.1))
    };
    let mut fed = Federation::from_model(
        cfg,
        ParticipationConfig::fixed(4, 4).unwrap(),
        model.clone(),
    )
    .unwrap();
    fed.round(&everyone(4), &data, None).unwrap();
    let g = joint_gradient(
        &model.backbone,
        model.theta.params(),
        &model.heads[&0],
        &data[0].train,
        &mut PassCounter::new(),
    )
    .unwrap();
    let mut want = model.heads[&0].clone();
    want.add_scaled(-0.1, &g.head).unwrap();
    assert!(fed.model().heads[&0].max_abs_diff(&want).unwrap() < 1e-15);
}

#[test]
fn inner_head_steps_never_increase_the_loss() {
    let data = datasets(4, 6, 4, Degree::High, 40);
    let cfg = AlgorithmConfig {
        client_rate: 0.05,
        ..pflego(20, adam(0.01))
    };
    let backbone = Backbone::mlp(10, &[8, 6]).unwrap();
    let mut fed = Federation::new(
        cfg,
        ParticipationConfig::fixed(6, 3).unwrap(),
        backbone,
        4,
        4,
    )
    .unwrap();
    let mut rng = pflego_core::rng::substream(4, pflego_core::rng::Stream::Participation, 0);
    for _ in 0..15 {
        let ids = pflego_core::fl::sample_participants(fed.participation(), &mut rng);
        let outcome = fed.round(&ids, &data, None).unwrap();
        for (id, losses) in &outcome.client_losses {
            assert_eq!(losses.len(), 20);
            for w in losses.windows(2) {
                assert!(w[1] <= w[0], "client {id}: {losses:?}");
            }
        }
    }
}

#[test]
fn pflego_and_fedrecon_diverge() {
    let (model, data) = four_clients(5);
    let run = |algorithm| {
        let cfg = AlgorithmConfig {
            algorithm,
            ..pflego(5, sgd(0.3))
        };
        let mut fed = Federation::from_model(
            cfg,
            ParticipationConfig::fixed(4, 2).unwrap(),
            model.clone(),
        )
        .unwrap();
        let out = fed.round(&[0, 2], &data, None).unwrap();
        (fed, out)
    };
    let (p, po) = run(Algorithm::Pflego);
    let (r, ro) = run(Algorithm::FedRecon);
    // same inner steps, but the gradient is taken at different heads
    assert_eq!(po.client_losses[&0][..4], ro.client_losses[&0][..4]);
    assert!(
        p.model()
            .theta
            .params()
            .max_abs_diff(r.model().theta.params())
            .unwrap()
            > 1e-8
    );
    assert!(
        p.model().heads[&0]
            .max_abs_diff(&r.model().heads[&0])
            .unwrap()
            > 1e-8
    );
    assert_eq!(po.client_losses[&0].len(), 5);
    assert_eq!(ro.client_losses[&0].len(), 6);
}

#[test]
fn fedper_keeps_heads_fedavg_does_not() {
    let data = datasets(6, 4, 4, Degree::High, 24);
    let mut per = federation(
        Algorithm::FedPer,
        3,
        ParticipationConfig::fixed(4, 2).unwrap(),
        6,
    );
    let mut avg = federation(
        Algorithm::FedAvg,
        3,
        ParticipationConfig::fixed(4, 2).unwrap(),
        6,
    );
    let per_theta = per.model().theta.params().len();
    let avg_theta = avg.model().theta.params().len();
    // FedAvg's shared parameters include a 4 x 6 global head
    assert_eq!(avg_theta, per_theta + 24);
    let before = per.model().theta.params().clone();
    per.round(&[0, 1], &data, None).unwrap();
    avg.round(&[0, 1], &data, None).unwrap();
    assert_eq!(per.model().heads.len(), 2);
    assert!(avg.model().heads.is_empty());
    assert!(per.model().theta.params().max_abs_diff(&before).unwrap() > 0.0);
    let shared = &avg.model().theta.params().values()[..per_theta];
    let differs = shared
        .iter()
        .zip(per.model().theta.params().values())
        .any(|(a, b)| a != b);
    assert!(differs);
}

#[test]
fn fedavg_round_matches_manual_steps() {
    let data = datasets(7, 4, 4, Degree::High, 24);
    let mut fed = federation(
        Algorithm::FedAvg,
        3,
        ParticipationConfig::fixed(4, 2).unwrap(),
        7,
    );
    let start = fed.model().theta.params().clone();
    let network = fed.model().backbone.clone();
    let manual = |id: usize| {
        let labels = data[id].global_train_labels();
        let mut p = start.clone();
        for _ in 0..3 {
            let (_, g) = network_loss_and_gradient(
                &network,
                &p,
                &data[id].train.inputs,
                &labels,
                &mut PassCounter::new(),
            )
            .unwrap();
            p = gd_step(&p, &g, fed.config().client_rate).unwrap();
        }
        p
    };
    let (a, b) = (manual(1), manual(3));
    let via_client = fedavg_client_round(
        &network,
        &start,
        &data[1],
        fed.config(),
        &mut PassCounter::new(),
    )
    .unwrap();
    assert_eq!(via_client, a);

    fed.round(&[1, 3], &data, None).unwrap();
    let total = data[1].alpha + data[3].alpha;
    let mut want = a.zeros_like();
    want.add_scaled(data[1].alpha / total, &a).unwrap();
    want.add_scaled(data[3].alpha / total, &b).unwrap();
    assert!(fed.model().theta.params().max_abs_diff(&want).unwrap() < 1e-15);

    // a lone participant's copy is adopted unchanged
    let mut fed = federation(
        Algorithm::FedAvg,
        3,
        ParticipationConfig::fixed(4, 1).unwrap(),
        7,
    );
    fed.round(&[1], &data, None).unwrap();
    assert_eq!(fed.model().theta.params(), &a);
}

#[test]
fn empty_round_changes_nothing_but_the_counter() {
    let data = datasets(8, 4, 4, Degree::High, 24);
    for algorithm in Algorithm::ALL {
        let mut fed = federation(
            algorithm,
            2,
            ParticipationConfig::binomial(4, 0.5).unwrap(),
            8,
        );
        fed.round(&[0, 1], &data, None).unwrap();
        let model: PersonalizedModel = fed.model().clone();
        let optimizer: ServerOptimizer = fed.optimizer().clone();
        let outcome = fed.round(&[], &data, None).unwrap();
        assert!(outcome.passes.is_empty());
        assert_eq!(fed.rounds_completed(), 2);
        assert_eq!(fed.model().theta, model.theta);
        assert_eq!(fed.model().heads, model.heads);
        assert_eq!(fed.optimizer(), &optimizer);
    }
}

#[test]
fn bad_participants_are_rejected() {
    let data = datasets(8, 4, 4, Degree::High, 24);
    let mut fed = federation(
        Algorithm::Pflego,
        2,
        ParticipationConfig::fixed(4, 2).unwrap(),
        8,
    );
    assert!(matches!(
        fed.round(&[0, 9], &data, None),
        Err(pflego_core::Error::Input(_))
    ));
    let mut shuffled = data.clone();
    shuffled.swap(0, 1);
    assert!(fed.round(&[0], &shuffled, None).is_err());
}

#[test]
fn hundred_rounds_stay_finite() {
    let data = datasets(9, 6, 4, Degree::High, 30);
    for algorithm in Algorithm::ALL {
        let mut fed = federation(algorithm, 5, ParticipationConfig::fixed(6, 2).unwrap(), 9);
        let mut rng = pflego_core::rng::substream(9, pflego_core::rng::Stream::Participation, 0);
        for _ in 0..100 {
            let ids = pflego_core::fl::sample_participants(fed.participation(), &mut rng);
            fed.round(&ids, &data, None).unwrap();
        }
        fed.model().theta.params().ensure_finite("theta").unwrap();
        for h in fed.model().heads.values() {
            h.ensure_finite("head").unwrap();
        }
    }
}

fn threaded_config(algorithm: Algorithm, threads: usize) -> ExperimentConfig {
    ExperimentConfig {
        seed: 21,
        rounds: 6,
        eval_every: 2,
        algorithm: AlgorithmConfig {
            algorithm,
            ..pflego(4, adam(0.005))
        },
        participation: ParticipationConfig::fixed(8, 3).unwrap(),
        degree: Degree::High,
        data: DataSource::Synthetic(SyntheticSource {
            classes: 5,
            input_dim: 6,
            samples_per_class: 40,
            spread: 0.5,
        }),
        hidden: vec![12, 7],
        train_fraction: 0.75,
        threads,
    }
}

#[test]
fn reports_do_not_depend_on_thread_count() {
    for algorithm in Algorithm::ALL {
        let runs: Vec<_> = [1, 2, 4]
            .into_iter()
            .map(|t| run_experiment(&threaded_config(algorithm, t)).unwrap())
            .collect();
        for other in &runs[1..] {
            assert_eq!(other.len(), runs[0].len());
            for (a, b) in runs[0].iter().zip(other) {
                assert_eq!(a.round, b.round);
                assert_eq!(a.global_train_loss.to_bits(), b.global_train_loss.to_bits());
                assert_eq!(
                    a.mean_test_accuracy.to_bits(),
                    b.mean_test_accuracy.to_bits()
                );
                assert_eq!(a.participants, b.participants);
                assert_eq!(a.forward_passes, b.forward_passes);
            }
        }
    }
}

#[test]
fn head_initialization_ignores_visit_order() {
    let data = datasets(10, 4, 4, Degree::High, 24);
    let mut a = federation(
        Algorithm::Pflego,
        1,
        ParticipationConfig::fixed(4, 1).unwrap(),
        10,
    );
    let mut b = a.clone();
    let heads_a: BTreeMap<_, _> = {
        a.model_mut().ensure_heads(&data);
        a.model().heads.clone()
    };
    for id in [3, 1, 0, 2] {
        b.model_mut().head_mut(id, data[id].num_classes());
    }
    assert_eq!(heads_a, b.model().heads);
}
