use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;

use crate::data::{
    build_federation, generate_synthetic, load_idx, subsample, ClassSamples, ClientDataset,
    ClientId, Degree, FederationSpec, PersonalizationSpec, SyntheticSpec,
};
use crate::error::{config, Result};
use crate::fl::{sample_participants, Algorithm, AlgorithmConfig, Federation, ParticipationConfig};
use crate::model::{Backbone, PersonalizedModel};
use crate::nn::{argmax, forward_features, matmul_transposed, softmax_cross_entropy, Matrix};
use crate::rng::{substream, Stream};

/// Gaussian-cluster data; the experiment seed drives generation.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSource {
    pub classes: usize,
    pub input_dim: usize,
    pub samples_per_class: usize,
    pub spread: f64,
}

/// IDX files on disk. Without a test pair the training pool is split.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxSource {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test: Option<(PathBuf, PathBuf)>,
    /// Keep at most this many samples per class of each pool.
    pub samples_per_class: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticSource),
    Idx(IdxSource),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// `T`.
    pub rounds: u64,
    /// Evaluate every `k` rounds; the last round is always evaluated.
    pub eval_every: u64,
    pub algorithm: AlgorithmConfig,
    pub participation: ParticipationConfig,
    pub degree: Degree,
    pub data: DataSource,
    /// Widths of the backbone's ReLU layers; the last one is `M`.
    pub hidden: Vec<usize>,
    pub train_fraction: f64,
    /// Worker threads for client work and evaluation; 1 runs inline.
    pub threads: usize,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(config("rounds must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(config("evaluation cadence must be at least 1"));
        }
        if self.threads == 0 {
            return Err(config("threads must be at least 1"));
        }
        self.algorithm.validate()?;
        self.participation.validate()
    }
}

/// Metrics of one evaluated round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: u64,
    pub global_train_loss: f64,
    pub mean_test_accuracy: f64,
    pub participants: Vec<ClientId>,
    pub forward_passes: BTreeMap<ClientId, u64>,
    /// Seconds spent in this round, evaluation included.
    pub wall_time: f64,
}

impl RoundReport {
    pub fn forward_passes_total(&self) -> u64 {
        self.forward_passes.values().sum()
    }
}

/// Client datasets plus a freshly initialized federation.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub datasets: Vec<ClientDataset>,
    pub federation: Federation,
    pub classes: usize,
}

fn load_pools(cfg: &ExperimentConfig) -> Result<(ClassSamples, Option<ClassSamples>)> {
    match &cfg.data {
        DataSource::Synthetic(s) => {
            let pool = generate_synthetic(&SyntheticSpec {
                classes: s.classes,
                input_dim: s.input_dim,
                samples_per_class: s.samples_per_class,
                spread: s.spread,
                seed: cfg.seed,
            })?;
            Ok((pool, None))
        }
        DataSource::Idx(src) => {
            let mut train = load_idx(&src.train_images, &src.train_labels)?;
            let mut test = match &src.test {
                Some((images, labels)) => Some(load_idx(images, labels)?),
                None => None,
            };
            if let Some(keep) = src.samples_per_class {
                let mut rng = substream(cfg.seed, Stream::Split, 1);
                train = subsample(&train, keep, &mut rng);
                test = test.map(|t| subsample(&t, keep, &mut rng));
            }
            Ok((train, test))
        }
    }
}

/// Builds the data and the initial federation for `cfg`.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let (pool, test) = load_pools(cfg)?;
    let classes = pool.num_classes();
    let spec = FederationSpec {
        clients: cfg.participation.clients,
        personalization: PersonalizationSpec {
            degree: cfg.degree,
            total_classes: classes,
        },
        train_fraction: cfg.train_fraction,
        seed: cfg.seed,
    };
    let datasets = build_federation(&pool, test.as_ref(), &spec)?;
    let backbone = Backbone::mlp(pool.dim, &cfg.hidden)?;
    let federation = Federation::new(
        cfg.algorithm,
        cfg.participation,
        backbone,
        classes,
        cfg.seed,
    )?;
    Ok(Prepared {
        datasets,
        federation,
        classes,
    })
}

fn thread_pool(threads: usize) -> Result<Option<rayon::ThreadPool>> {
    if threads <= 1 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map(Some)
        .map_err(|e| config(format!("cannot start {threads} worker threads: {e}")))
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<RoundReport>> {
    let mut reports = Vec::new();
    run_experiment_with(cfg, |r| reports.push(r.clone()))?;
    Ok(reports)
}

/// Runs `cfg`, handing each report to `sink` as soon as it exists. Returns
/// the final federation state and datasets.
pub fn run_experiment_with<F>(cfg: &ExperimentConfig, mut sink: F) -> Result<Prepared>
where
    F: FnMut(&RoundReport),
{
    let mut prepared = prepare(cfg)?;
    let pool = thread_pool(cfg.threads)?;
    let mut rng = substream(cfg.seed, Stream::Participation, 0);
    let Prepared {
        datasets,
        federation,
        ..
    } = &mut prepared;
    for t in 1..=cfg.rounds {
        let start = Instant::now();
        let participants = sample_participants(federation.participation(), &mut rng);
        let outcome = federation
            .round(&participants, datasets, pool.as_ref())
            .map_err(|e| e.at_round(t))?;
        if t % cfg.eval_every == 0 || t == cfg.rounds {
            let (loss, acc) =
                evaluate(federation, datasets, pool.as_ref()).map_err(|e| e.at_round(t))?;
            sink(&RoundReport {
                round: t,
                global_train_loss: loss,
                mean_test_accuracy: acc,
                participants,
                forward_passes: outcome.passes,
                wall_time: start.elapsed().as_secs_f64(),
            });
        }
    }
    Ok(prepared)
}

struct ClientMetrics {
    train_loss: f64,
    test_correct: usize,
    test_total: usize,
}

fn logits(
    model: &PersonalizedModel,
    personal: bool,
    client: ClientId,
    inputs: &Matrix,
) -> Result<Matrix> {
    let out = forward_features(model.theta.params(), model.backbone.specs(), inputs)?;
    if !personal {
        return Ok(out);
    }
    let head = model.heads[&client].segment_matrix(0)?;
    Ok(matmul_transposed(&out, &head))
}

fn client_metrics(
    model: &PersonalizedModel,
    personal: bool,
    d: &ClientDataset,
) -> Result<ClientMetrics> {
    let (train_labels, test_labels) = if personal {
        (d.train.labels.clone(), d.test.labels.clone())
    } else {
        (d.global_train_labels(), d.global_test_labels())
    };
    let train_logits = logits(model, personal, d.client_id, &d.train.inputs)?;
    let (train_loss, _) = softmax_cross_entropy(&train_logits, &train_labels)?;
    let mut test_correct = 0;
    if !d.test.is_empty() {
        let test_logits = logits(model, personal, d.client_id, &d.test.inputs)?;
        test_correct = test_labels
            .iter()
            .enumerate()
            .filter(|&(n, &y)| argmax(test_logits.row(n)) == y)
            .count();
    }
    Ok(ClientMetrics {
        train_loss,
        test_correct,
        test_total: d.test.len(),
    })
}

/// Global training loss over every client and the unweighted mean of
/// per-client test accuracies.
///
/// Clients that were never visited get their initial head first. Clients
/// without test samples are left out of the accuracy mean. The passes made
/// here are not charged to any client.
pub fn evaluate(
    federation: &mut Federation,
    datasets: &[ClientDataset],
    pool: Option<&rayon::ThreadPool>,
) -> Result<(f64, f64)> {
    let personal = federation.config().algorithm != Algorithm::FedAvg;
    if personal {
        federation.model_mut().ensure_heads(datasets);
    }
    let model = federation.model();
    let work = |d: &ClientDataset| client_metrics(model, personal, d);
    let metrics: Vec<Result<ClientMetrics>> = match pool {
        Some(pool) => pool.install(|| datasets.par_iter().map(work).collect()),
        None => datasets.iter().map(work).collect(),
    };
    let mut loss = 0.0;
    let mut acc_sum = 0.0;
    let mut acc_count = 0usize;
    for (d, m) in datasets.iter().zip(metrics) {
        let m = m?;
        loss += d.alpha * m.train_loss;
        if m.test_total > 0 {
            acc_sum += m.test_correct as f64 / m.test_total as f64;
            acc_count += 1;
        }
    }
    let acc = if acc_count == 0 {
        0.0
    } else {
        acc_sum / acc_count as f64
    };
    Ok((loss, acc))
}

/// Mean and population standard deviation of a metric over the last
/// `window` reports.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowStats {
    pub mean: f64,
    pub stddev: f64,
    pub count: usize,
}

pub fn final_window<F>(reports: &[RoundReport], window: usize, metric: F) -> Option<WindowStats>
where
    F: Fn(&RoundReport) -> f64,
{
    let n = window.min(reports.len());
    let values: Vec<f64> = reports[reports.len() - n..].iter().map(metric).collect();
    window_stats(&values)
}

/// [`WindowStats`] of all of `values`.
pub fn window_stats(values: &[f64]) -> Option<WindowStats> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    Some(WindowStats {
        mean,
        stddev: var.sqrt(),
        count: n,
    })
}
