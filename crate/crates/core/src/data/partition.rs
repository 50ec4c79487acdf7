use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{config, input, Result};

use super::PersonalizationSpec;

/// Whole-assignment redraws allowed before giving up on covering every class.
pub const ASSIGNMENT_RETRIES: usize = 1000;

/// Draws `K` distinct classes per client, uniformly and independently.
///
/// The assignment is redrawn from scratch until every class has at least one
/// client. Each returned class list is sorted.
pub fn assign_classes<R: Rng + ?Sized>(
    spec: &PersonalizationSpec,
    clients: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    let c = spec.total_classes;
    let k = spec.classes_per_client();
    if clients == 0 || c == 0 {
        return Err(config("need at least one client and one class"));
    }
    if k > c {
        return Err(config(format!(
            "{k} classes per client exceeds {c} classes"
        )));
    }
    let exhausted = || {
        config(format!(
            "could not cover all {c} classes with {clients} clients holding {k} classes each \
             after {ASSIGNMENT_RETRIES} attempts; use more clients or a larger K"
        ))
    };
    if clients * k < c {
        return Err(exhausted());
    }
    for _ in 0..ASSIGNMENT_RETRIES {
        let mut covered = vec![false; c];
        let assignment: Vec<Vec<usize>> = (0..clients)
            .map(|_| {
                let mut picked = rand::seq::index::sample(rng, c, k).into_vec();
                picked.sort_unstable();
                for &cls in &picked {
                    covered[cls] = true;
                }
                picked
            })
            .collect();
        if covered.iter().all(|&b| b) {
            return Ok(assignment);
        }
    }
    Err(exhausted())
}

/// Deals every class's samples to the clients holding that class.
///
/// For each class in ascending order: shuffle its samples, list the clients
/// assigned to it in ascending id order, and hand out one sample per client
/// cyclically until the samples run out. Returns, per client, `(class,
/// sample)` pairs in the order they were dealt.
pub fn round_robin_partition<'a, T, R>(
    class_samples: &'a [Vec<T>],
    assignments: &[Vec<usize>],
    rng: &mut R,
) -> Result<Vec<Vec<(usize, &'a T)>>>
where
    R: Rng + ?Sized,
{
    let mut holders: Vec<Vec<usize>> = vec![Vec::new(); class_samples.len()];
    for (client, classes) in assignments.iter().enumerate() {
        for &c in classes {
            if c >= class_samples.len() {
                return Err(input(format!("client {client} assigned unknown class {c}")));
            }
            holders[c].push(client);
        }
    }
    let mut shards: Vec<Vec<(usize, &T)>> = vec![Vec::new(); assignments.len()];
    for (c, samples) in class_samples.iter().enumerate() {
        if holders[c].is_empty() {
            return Err(input(format!("class {c} has no assigned clients")));
        }
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(rng);
        for (pos, idx) in order.into_iter().enumerate() {
            let client = holders[c][pos % holders[c].len()];
            shards[client].push((c, &samples[idx]));
        }
    }
    Ok(shards)
}

/// Per-class stratified split of shuffled samples.
///
/// Each class keeps `round(n * train_fraction)` samples for training and the
/// rest for testing; both sides must be non-empty.
pub fn train_test_split<T: Clone, R: Rng + ?Sized>(
    class_samples: &[Vec<T>],
    train_fraction: f64,
    rng: &mut R,
) -> Result<(Vec<Vec<T>>, Vec<Vec<T>>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(input(format!(
            "train fraction {train_fraction} not in (0, 1)"
        )));
    }
    let mut train = Vec::with_capacity(class_samples.len());
    let mut test = Vec::with_capacity(class_samples.len());
    for (c, samples) in class_samples.iter().enumerate() {
        let n = samples.len();
        let n_train = (n as f64 * train_fraction).round() as usize;
        if n_train == 0 || n_train >= n {
            return Err(input(format!(
                "class {c} with {n} samples cannot be split at {train_fraction}"
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        train.push(
            order[..n_train]
                .iter()
                .map(|&i| samples[i].clone())
                .collect(),
        );
        test.push(
            order[n_train..]
                .iter()
                .map(|&i| samples[i].clone())
                .collect(),
        );
    }
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Degree;
    use crate::rng::{substream, Stream};
    use proptest::prelude::*;

    fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        substream(seed, Stream::Fixture, 0)
    }

    fn pers(degree: Degree, c: usize) -> PersonalizationSpec {
        PersonalizationSpec {
            degree,
            total_classes: c,
        }
    }

    #[test]
    fn no_personalization_gives_every_class() {
        let a = assign_classes(&pers(Degree::None, 10), 7, &mut rng(0)).unwrap();
        for classes in a {
            assert_eq!(classes, (0..10).collect::<Vec<_>>());
        }
    }

    #[test]
    fn high_personalization_gives_two_distinct_classes() {
        let a = assign_classes(&pers(Degree::High, 10), 100, &mut rng(1)).unwrap();
        assert_eq!(a.len(), 100);
        let mut seen = [false; 10];
        for classes in &a {
            assert_eq!(classes.len(), 2);
            assert_ne!(classes[0], classes[1]);
            for &c in classes {
                seen[c] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn one_client_cannot_cover_ten_classes() {
        let err = assign_classes(&pers(Degree::High, 10), 1, &mut rng(2)).unwrap_err();
        assert!(matches!(err, crate::Error::Config(_)));
        assert!(err.to_string().contains("more clients"));
    }

    #[test]
    fn seven_samples_over_three_clients() {
        let samples = vec![(0..7).collect::<Vec<u32>>()];
        let assignments = vec![vec![0], vec![0], vec![0]];
        let shards = round_robin_partition(&samples, &assignments, &mut rng(3)).unwrap();
        let sizes: Vec<usize> = shards.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![3, 2, 2]);

        let samples = vec![(0..6).collect::<Vec<u32>>()];
        let shards = round_robin_partition(&samples, &assignments, &mut rng(3)).unwrap();
        assert!(shards.iter().all(|s| s.len() == 2));
    }

    #[test]
    fn unassigned_class_is_input_error() {
        let samples = vec![vec![1u8], vec![2u8]];
        let assignments = vec![vec![0]];
        assert!(matches!(
            round_robin_partition(&samples, &assignments, &mut rng(4)),
            Err(crate::Error::Input(_))
        ));
    }

    #[test]
    fn high_pers_partition_of_hundred_clients_is_balanced() {
        let samples: Vec<Vec<usize>> = (0..10)
            .map(|c| (c * 100..(c + 1) * 100).collect())
            .collect();
        let assignments = assign_classes(&pers(Degree::High, 10), 100, &mut rng(5)).unwrap();
        let shards = round_robin_partition(&samples, &assignments, &mut rng(6)).unwrap();

        // exhaustive recount
        let mut all: Vec<usize> = shards.iter().flatten().map(|(_, &i)| i).collect();
        all.sort_unstable();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
        for (client, shard) in shards.iter().enumerate() {
            for (c, &i) in shard {
                assert_eq!(i / 100, *c);
                assert!(assignments[client].contains(c));
            }
            // each class can put a client at most one sample above the fair
            // share of its holders; the fair shares themselves vary with how
            // many clients hold the class, so recount against that.
            let fair: f64 = assignments[client]
                .iter()
                .map(|&c| {
                    let holders = assignments.iter().filter(|a| a.contains(&c)).count();
                    100.0 / holders as f64
                })
                .sum();
            assert!((shard.len() as f64 - fair).abs() <= 2.0);
        }
    }

    #[test]
    fn split_sizes() {
        let twenty = vec![(0..20).collect::<Vec<u32>>(); 3];
        let (tr, te) = train_test_split(&twenty, 0.75, &mut rng(7)).unwrap();
        assert!(tr.iter().all(|c| c.len() == 15));
        assert!(te.iter().all(|c| c.len() == 5));

        let two = vec![vec![0u32, 1]];
        let (tr, te) = train_test_split(&two, 0.5, &mut rng(7)).unwrap();
        assert_eq!((tr[0].len(), te[0].len()), (1, 1));

        let four = vec![vec![0u32, 1, 2, 3]];
        assert!(matches!(
            train_test_split(&four, 0.9, &mut rng(7)),
            Err(crate::Error::Input(_))
        ));
    }

    proptest! {
        #[test]
        fn partition_conserves_and_balances(
            sizes in proptest::collection::vec(1usize..40, 1..6),
            clients in 1usize..9,
            seed in any::<u64>(),
        ) {
            let c = sizes.len();
            let mut next = 0usize;
            let samples: Vec<Vec<usize>> = sizes
                .iter()
                .map(|&n| { let v = (next..next + n).collect(); next += n; v })
                .collect();
            let k = (c / 2).max(1);
            let spec = PersonalizationSpec { degree: Degree::Medium, total_classes: c };
            prop_assume!(spec.classes_per_client() == k);
            let Ok(assignments) = assign_classes(&spec, clients, &mut rng(seed)) else {
                return Ok(());
            };
            let shards = round_robin_partition(&samples, &assignments, &mut rng(seed ^ 1)).unwrap();
            let mut all: Vec<usize> = shards.iter().flatten().map(|(_, &i)| i).collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..next).collect::<Vec<_>>());
            for cls in 0..c {
                let counts: Vec<usize> = assignments
                    .iter()
                    .enumerate()
                    .filter(|(_, a)| a.contains(&cls))
                    .map(|(i, _)| shards[i].iter().filter(|(cc, _)| *cc == cls).count())
                    .collect();
                let max = *counts.iter().max().unwrap();
                let min = *counts.iter().min().unwrap();
                prop_assert!(max - min <= 1);
            }
        }
    }
}
