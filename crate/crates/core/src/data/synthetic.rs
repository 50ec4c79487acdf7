//! Gaussian-cluster classification data.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{config, Result};
use crate::rng::{substream, Stream};

use super::ClassSamples;

/// Norm of every class mean.
pub const MEAN_RADIUS: f64 = 1.0;

const MEAN_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub input_dim: usize,
    /// Samples generated per class, before any train/test split.
    pub samples_per_class: usize,
    /// Per-coordinate standard deviation around the class mean.
    pub spread: f64,
    pub seed: u64,
}

/// Draws `samples_per_class` points around each class mean.
///
/// Means are random directions scaled to [`MEAN_RADIUS`], redrawn until every
/// pair is at least `2 * spread` apart.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<ClassSamples> {
    if spec.classes == 0 || spec.input_dim == 0 {
        return Err(config(
            "synthetic data needs at least one class and one dimension",
        ));
    }
    if spec.samples_per_class < 2 {
        return Err(config("synthetic data needs at least 2 samples per class"));
    }
    if !(spec.spread >= 0.0 && spec.spread.is_finite()) {
        return Err(config(format!(
            "spread {} must be finite and non-negative",
            spec.spread
        )));
    }
    let mut rng = substream(spec.seed, Stream::Synthetic, 0);
    let d = spec.input_dim;
    let min_gap = 2.0 * spec.spread;

    let mut means: Vec<Vec<f64>> = Vec::with_capacity(spec.classes);
    for c in 0..spec.classes {
        let mut accepted = None;
        for _ in 0..MEAN_ATTEMPTS {
            let raw: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            let cand: Vec<f64> = raw.iter().map(|v| v * MEAN_RADIUS / norm).collect();
            let far_enough = means.iter().all(|m| {
                m.iter()
                    .zip(&cand)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt()
                    >= min_gap
            });
            if far_enough {
                accepted = Some(cand);
                break;
            }
        }
        match accepted {
            Some(m) => means.push(m),
            None => {
                return Err(config(format!(
                    "could not place class {c} mean at least {min_gap} from the others in {d} dimensions"
                )))
            }
        }
    }

    let classes = means
        .iter()
        .map(|mean| {
            (0..spec.samples_per_class)
                .map(|_| {
                    mean.iter()
                        .map(|&mu| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            mu + spec.spread * z
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    Ok(ClassSamples { dim: d, classes })
}
