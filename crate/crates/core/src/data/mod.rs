//! Client datasets and federation construction.
//!
//! A federation is built in four steps: obtain per-class sample pools
//! (synthetic or IDX), split each class into train and test, draw each
//! client's class set, then deal every class's samples to its clients
//! round-robin. Labels inside a [`ClientDataset`] are local head indices;
//! `class_ids` maps them back to global classes.

mod idx;
mod partition;
mod synthetic;

use rand::Rng;

use crate::error::{input, Result};
use crate::nn::Matrix;
use crate::rng::{substream, Stream};

pub use idx::{load_idx, parse_idx};
pub use partition::{assign_classes, round_robin_partition, train_test_split, ASSIGNMENT_RETRIES};
pub use synthetic::{generate_synthetic, SyntheticSpec};

pub type ClientId = usize;

/// Inputs and integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Matrix, labels: Vec<usize>) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(input(format!(
                "{} input rows but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Fails unless the batch is non-empty and every label is below `classes`.
    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.is_empty() {
            return Err(input("batch is empty"));
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= classes) {
            return Err(input(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(())
    }
}

/// One client's local data.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub client_id: ClientId,
    pub train: Batch,
    pub test: Batch,
    /// Global class of each local label.
    pub class_ids: Vec<usize>,
    /// Share of the federation's training samples held by this client.
    pub alpha: f64,
}

impl ClientDataset {
    pub fn num_train(&self) -> usize {
        self.train.len()
    }

    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    /// Training labels mapped to global class indices.
    pub fn global_train_labels(&self) -> Vec<usize> {
        self.train
            .labels
            .iter()
            .map(|&y| self.class_ids[y])
            .collect()
    }

    pub fn global_test_labels(&self) -> Vec<usize> {
        self.test
            .labels
            .iter()
            .map(|&y| self.class_ids[y])
            .collect()
    }
}

/// Proportionality weights `N_i / Σ N_j`.
pub fn proportionality_weights(sizes: &[usize]) -> Result<Vec<f64>> {
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(input("federation holds no training samples"));
    }
    Ok(sizes.iter().map(|&n| n as f64 / total as f64).collect())
}

/// How many of the `C` classes each client sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Degree {
    /// Two classes per client.
    High,
    /// `floor(C / 2)` classes per client.
    Medium,
    /// Every client holds every class.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PersonalizationSpec {
    pub degree: Degree,
    pub total_classes: usize,
}

impl PersonalizationSpec {
    pub fn classes_per_client(&self) -> usize {
        match self.degree {
            Degree::High => 2.min(self.total_classes),
            Degree::Medium => (self.total_classes / 2).max(1),
            Degree::None => self.total_classes,
        }
    }
}

/// Samples grouped by global class; every sample has `dim` features.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassSamples {
    pub dim: usize,
    pub classes: Vec<Vec<Vec<f64>>>,
}

impl ClassSamples {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn total(&self) -> usize {
        self.classes.iter().map(Vec::len).sum()
    }
}

/// Everything needed to turn class pools into client datasets.
#[derive(Debug, Clone)]
pub struct FederationSpec {
    pub clients: usize,
    pub personalization: PersonalizationSpec,
    pub train_fraction: f64,
    pub seed: u64,
}

/// Builds the client datasets.
///
/// When `test_pool` is `None` each class of `pool` is split with
/// `train_fraction`; otherwise `pool` is used for training and `test_pool`
/// for testing. Both are dealt to clients with the same class assignment.
pub fn build_federation(
    pool: &ClassSamples,
    test_pool: Option<&ClassSamples>,
    spec: &FederationSpec,
) -> Result<Vec<ClientDataset>> {
    if spec.personalization.total_classes != pool.num_classes() {
        return Err(input(format!(
            "personalization expects {} classes, data has {}",
            spec.personalization.total_classes,
            pool.num_classes()
        )));
    }
    let (train, test) = match test_pool {
        Some(t) => {
            if t.num_classes() != pool.num_classes() || t.dim != pool.dim {
                return Err(input("test pool does not match training pool"));
            }
            (pool.classes.clone(), t.classes.clone())
        }
        None => {
            let mut rng = substream(spec.seed, Stream::Split, 0);
            train_test_split(&pool.classes, spec.train_fraction, &mut rng)?
        }
    };

    let mut rng = substream(spec.seed, Stream::Assignment, 0);
    let assignments = assign_classes(&spec.personalization, spec.clients, &mut rng)?;
    let mut rng = substream(spec.seed, Stream::Partition, 0);
    let train_shards = round_robin_partition(&train, &assignments, &mut rng)?;
    let test_shards = round_robin_partition(&test, &assignments, &mut rng)?;

    let sizes: Vec<usize> = train_shards.iter().map(Vec::len).collect();
    if let Some(empty) = sizes.iter().position(|&n| n == 0) {
        return Err(input(format!(
            "client {empty} received no training samples; use fewer clients or more data"
        )));
    }
    let alphas = proportionality_weights(&sizes)?;

    let mut datasets = Vec::with_capacity(spec.clients);
    for (id, ((classes, tr), te)) in assignments
        .into_iter()
        .zip(train_shards)
        .zip(test_shards)
        .enumerate()
    {
        let to_batch = |shard: Vec<(usize, &Vec<f64>)>| -> Result<Batch> {
            let labels = shard
                .iter()
                .map(|(c, _)| classes.binary_search(c).expect("assigned class"))
                .collect();
            let inputs = Matrix::from_rows(pool.dim, shard.iter().map(|(_, x)| x.as_slice()))?;
            Batch::new(inputs, labels)
        };
        datasets.push(ClientDataset {
            client_id: id,
            train: to_batch(tr)?,
            test: to_batch(te)?,
            alpha: alphas[id],
            class_ids: classes,
        });
    }
    Ok(datasets)
}

/// A random subset of `keep` samples per class, for desk-scale runs on large
/// corpora.
pub fn subsample<R: Rng + ?Sized>(pool: &ClassSamples, keep: usize, rng: &mut R) -> ClassSamples {
    let classes = pool
        .classes
        .iter()
        .map(|c| {
            let k = keep.min(c.len());
            rand::seq::index::sample(rng, c.len(), k)
                .into_iter()
                .map(|i| c[i].clone())
                .collect()
        })
        .collect();
    ClassSamples {
        dim: pool.dim,
        classes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(degree: Degree, clients: usize) -> FederationSpec {
        FederationSpec {
            clients,
            personalization: PersonalizationSpec {
                degree,
                total_classes: 10,
            },
            train_fraction: 0.75,
            seed: 5,
        }
    }

    fn pool() -> ClassSamples {
        generate_synthetic(&SyntheticSpec {
            classes: 10,
            input_dim: 10,
            samples_per_class: 40,
            spread: 0.5,
            seed: 5,
        })
        .unwrap()
    }

    #[test]
    fn degree_sets_classes_per_client() {
        let k = |degree, c| {
            PersonalizationSpec {
                degree,
                total_classes: c,
            }
            .classes_per_client()
        };
        assert_eq!(k(Degree::High, 10), 2);
        assert_eq!(k(Degree::Medium, 10), 5);
        assert_eq!(k(Degree::Medium, 7), 3);
        assert_eq!(k(Degree::None, 62), 62);
    }

    #[test]
    fn two_to_one_sizes_give_three_quarters() {
        let a = proportionality_weights(&[30, 10]).unwrap();
        assert_eq!(a, vec![0.75, 0.25]);
    }

    #[test]
    fn federation_conserves_samples_and_weights() {
        let p = pool();
        let feds = build_federation(&p, None, &spec(Degree::High, 12)).unwrap();
        let train: usize = feds.iter().map(|d| d.num_train()).sum();
        let test: usize = feds.iter().map(|d| d.test.len()).sum();
        assert_eq!(train + test, p.total());
        assert_eq!(train, 10 * 30);
        let alpha_sum: f64 = feds.iter().map(|d| d.alpha).sum();
        assert!((alpha_sum - 1.0).abs() < 1e-12);
        for d in &feds {
            assert_eq!(d.num_classes(), 2);
            d.train.validate(2).unwrap();
            assert!((d.alpha - d.num_train() as f64 / train as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn local_labels_map_back_to_the_right_class() {
        let p = pool();
        let feds = build_federation(&p, None, &spec(Degree::Medium, 6)).unwrap();
        for d in &feds {
            for (row, y) in d.global_train_labels().into_iter().enumerate() {
                let x = d.train.inputs.row(row);
                assert!(p.classes[y].iter().any(|s| s.as_slice() == x));
            }
        }
    }

    #[test]
    fn federation_is_deterministic() {
        let p = pool();
        let a = build_federation(&p, None, &spec(Degree::High, 10)).unwrap();
        let b = build_federation(&p, None, &spec(Degree::High, 10)).unwrap();
        assert_eq!(a, b);
    }
}
