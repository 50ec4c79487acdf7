//! Centralized full-gradient descent over all parameters, and brute-force
//! checks of the federated gradient estimator against it.

use std::collections::BTreeMap;

use crate::data::{ClientDataset, ClientId};
use crate::error::{config, input, Result};
use crate::fl::{
    sample_participants, Algorithm, AlgorithmConfig, Federation, Participation, ParticipationConfig,
};
use crate::model::{joint_gradient, JointGradient, PassCounter, PersonalizedModel};
use crate::nn::ParamVector;
use crate::optim::{gd_step, LrSchedule, ServerMode};
use crate::rng::{substream, Stream};

/// Largest number of subsets enumerated before switching to sampling.
pub const EXHAUSTIVE_LIMIT: u64 = 10_000;
pub const MONTE_CARLO_DRAWS: usize = 100_000;

/// A gradient (or any vector) over `θ` and every client head.
#[derive(Debug, Clone, PartialEq)]
pub struct PsiGradient {
    pub theta: ParamVector,
    pub heads: BTreeMap<ClientId, ParamVector>,
}

impl PsiGradient {
    pub fn zeros_like(&self) -> Self {
        Self {
            theta: self.theta.zeros_like(),
            heads: self
                .heads
                .iter()
                .map(|(&id, h)| (id, h.zeros_like()))
                .collect(),
        }
    }

    pub fn add_scaled(&mut self, scale: f64, other: &PsiGradient) -> Result<()> {
        self.theta.add_scaled(scale, &other.theta)?;
        for (id, h) in &other.heads {
            let mine = self
                .heads
                .get_mut(id)
                .ok_or_else(|| input(format!("no head block for client {id}")))?;
            mine.add_scaled(scale, h)?;
        }
        Ok(())
    }

    /// Largest deviation in the `θ` block and in any head block.
    pub fn block_deviations(&self, other: &PsiGradient) -> Result<(f64, f64)> {
        let theta = self.theta.max_abs_diff(&other.theta)?;
        if self.heads.len() != other.heads.len() {
            return Err(input("head blocks differ"));
        }
        let mut heads: f64 = 0.0;
        for (id, h) in &self.heads {
            let o = other
                .heads
                .get(id)
                .ok_or_else(|| input(format!("no head block for client {id}")))?;
            heads = heads.max(h.max_abs_diff(o)?);
        }
        Ok((theta, heads))
    }

    pub fn max_abs_diff(&self, other: &PsiGradient) -> Result<f64> {
        let (t, h) = self.block_deviations(other)?;
        Ok(t.max(h))
    }

    pub fn max_abs(&self) -> f64 {
        self.heads
            .values()
            .map(ParamVector::max_abs)
            .fold(self.theta.max_abs(), f64::max)
    }

    fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.theta
            .values()
            .iter()
            .chain(self.heads.values().flat_map(|h| h.values().iter()))
            .copied()
    }
}

/// `∇ℓ_i` with respect to `θ` and `W_i`, for every client in order.
pub fn client_gradients(
    model: &PersonalizedModel,
    datasets: &[ClientDataset],
) -> Result<Vec<JointGradient>> {
    let mut passes = PassCounter::new();
    datasets
        .iter()
        .map(|d| {
            let head = model
                .heads
                .get(&d.client_id)
                .ok_or_else(|| input(format!("client {} has no head", d.client_id)))?;
            joint_gradient(
                &model.backbone,
                model.theta.params(),
                head,
                &d.train,
                &mut passes,
            )
        })
        .collect()
}

fn alphas(datasets: &[ClientDataset]) -> Vec<f64> {
    datasets.iter().map(|d| d.alpha).collect()
}

/// `∇_ψ L = {Σ_i α_i ∇_θ ℓ_i, α_1 ∇_{W_1} ℓ_1, ...}`.
pub fn full_gradient(model: &PersonalizedModel, datasets: &[ClientDataset]) -> Result<PsiGradient> {
    let grads = client_gradients(model, datasets)?;
    let ids: Vec<ClientId> = datasets.iter().map(|d| d.client_id).collect();
    Ok(stochastic_gradient(&grads, &alphas(datasets), &ids, 1.0))
}

/// `∇ˢ_ψ L` for participant set `subset`: the `θ` block is
/// `scale Σ_{i∈S} α_i ∇_θ ℓ_i`, head `i` gets `scale α_i ∇_{W_i} ℓ_i` when
/// `i ∈ S` and zero otherwise.
pub fn stochastic_gradient(
    grads: &[JointGradient],
    alphas: &[f64],
    subset: &[ClientId],
    scale: f64,
) -> PsiGradient {
    let mut theta = grads[0].theta.zeros_like();
    let mut heads: BTreeMap<ClientId, ParamVector> = grads
        .iter()
        .enumerate()
        .map(|(i, g)| (i, g.head.zeros_like()))
        .collect();
    for &i in subset {
        theta
            .add_scaled(alphas[i], &grads[i].theta)
            .expect("theta layout");
        let h = heads.get_mut(&i).expect("head block");
        h.add_scaled(scale * alphas[i], &grads[i].head)
            .expect("head layout");
    }
    theta.scale(scale);
    PsiGradient { theta, heads }
}

/// A full copy of the parameters evolved by centralized gradient descent.
#[derive(Debug, Clone)]
pub struct OracleState {
    pub model: PersonalizedModel,
}

/// `ψ ← ψ - ρ ∇_ψ L`, with one backbone pass per client.
pub fn centralized_oracle_step(
    oracle: &mut OracleState,
    datasets: &[ClientDataset],
    rate: f64,
) -> Result<()> {
    let g = full_gradient(&oracle.model, datasets)?;
    let theta = gd_step(oracle.model.theta.params(), &g.theta, rate)?;
    oracle.model.theta.replace(theta)?;
    for (id, gh) in &g.heads {
        let head = oracle.model.heads.get_mut(id).expect("head present");
        *head = gd_step(head, gh, rate)?;
    }
    Ok(())
}

/// Largest coordinate difference between two models' `θ` and heads.
pub fn psi_max_abs_diff(a: &PersonalizedModel, b: &PersonalizedModel) -> Result<f64> {
    let mut d = a.theta.params().max_abs_diff(b.theta.params())?;
    if a.heads.len() != b.heads.len() {
        return Err(input("models hold different head sets"));
    }
    for (id, h) in &a.heads {
        let o = b
            .heads
            .get(id)
            .ok_or_else(|| input(format!("client {id} missing")))?;
        d = d.max(h.max_abs_diff(o)?);
    }
    Ok(d)
}

/// Runs PFLEGO with one local step, full participation and plain server
/// steps at `rate` next to the centralized oracle, both from `model`.
/// Returns the largest coordinate gap seen after any round.
pub fn verify_oracle_equivalence(
    model: &PersonalizedModel,
    datasets: &[ClientDataset],
    rate: f64,
    rounds: u64,
) -> Result<f64> {
    let mut model = model.clone();
    model.ensure_heads(datasets);
    let cfg = AlgorithmConfig {
        algorithm: Algorithm::Pflego,
        local_steps: 1,
        // unused when τ = 1
        client_rate: rate,
        server: ServerMode::PureSgd(LrSchedule::Constant(rate)),
        alpha_in_head_update: true,
    };
    let everyone: Vec<ClientId> = (0..datasets.len()).collect();
    let participation = ParticipationConfig::fixed(datasets.len(), datasets.len())?;
    let mut federation = Federation::from_model(cfg, participation, model.clone())?;
    let mut oracle = OracleState { model };
    let mut worst: f64 = 0.0;
    for t in 1..=rounds {
        federation
            .round(&everyone, datasets, None)
            .map_err(|e| e.at_round(t))?;
        centralized_oracle_step(&mut oracle, datasets, rate).map_err(|e| e.at_round(t))?;
        worst = worst.max(psi_max_abs_diff(federation.model(), &oracle.model)?);
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnbiasednessReport {
    /// Largest deviation over all coordinates.
    pub max_abs_deviation: f64,
    pub theta_deviation: f64,
    pub head_deviation: f64,
    /// Largest per-coordinate standard error; only for sampled checks.
    pub standard_error: Option<f64>,
    /// Subsets enumerated, or draws taken.
    pub subsets: usize,
    pub exhaustive: bool,
}

impl UnbiasednessReport {
    /// Exhaustive checks must agree to 1e-12; sampled ones within four
    /// standard errors.
    pub fn passes(&self) -> bool {
        match self.standard_error {
            None => self.max_abs_deviation < 1e-12,
            Some(se) => self.max_abs_deviation < 4.0 * se.max(f64::MIN_POSITIVE),
        }
    }
}

fn binomial_coefficient(n: u64, k: u64) -> u64 {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > u64::MAX as u128 {
            return u64::MAX;
        }
    }
    acc as u64
}

/// Every `k`-subset of `0..n` in lexicographic order.
fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        let Some(pos) = (0..k).rev().find(|&i| idx[i] != i + n - k) else {
            return out;
        };
        idx[pos] += 1;
        for j in pos + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Every subset with its probability under `participation`, or `None` when
/// there are more than [`EXHAUSTIVE_LIMIT`].
fn weighted_subsets(participation: &ParticipationConfig) -> Option<Vec<(Vec<ClientId>, f64)>> {
    let n = participation.clients;
    match participation.mode {
        Participation::FixedCount(r) => {
            let count = binomial_coefficient(n as u64, r as u64);
            if count > EXHAUSTIVE_LIMIT {
                return None;
            }
            let w = 1.0 / count as f64;
            Some(combinations(n, r).into_iter().map(|s| (s, w)).collect())
        }
        Participation::Binomial(p) => {
            if n >= 64 || (1u64 << n) > EXHAUSTIVE_LIMIT {
                return None;
            }
            Some(
                (0u64..1 << n)
                    .map(|mask| {
                        let s: Vec<ClientId> = (0..n).filter(|&i| mask >> i & 1 == 1).collect();
                        let w = p.powi(s.len() as i32) * (1.0 - p).powi((n - s.len()) as i32);
                        (s, w)
                    })
                    .collect(),
            )
        }
    }
}

/// Checks that the participation-weighted average of the stochastic gradient
/// equals the full gradient.
pub fn verify_unbiasedness(
    model: &PersonalizedModel,
    datasets: &[ClientDataset],
    participation: &ParticipationConfig,
    seed: u64,
) -> Result<UnbiasednessReport> {
    verify_unbiasedness_with(model, datasets, participation, seed, stochastic_gradient)
}

/// [`verify_unbiasedness`] with a caller-supplied estimator in place of
/// [`stochastic_gradient`].
///
/// Enumerates every subset when there are at most [`EXHAUSTIVE_LIMIT`] of
/// them. Otherwise averages [`MONTE_CARLO_DRAWS`] sampled rounds and reports
/// the standard error as well.
pub fn verify_unbiasedness_with<F>(
    model: &PersonalizedModel,
    datasets: &[ClientDataset],
    participation: &ParticipationConfig,
    seed: u64,
    assemble: F,
) -> Result<UnbiasednessReport>
where
    F: Fn(&[JointGradient], &[f64], &[ClientId], f64) -> PsiGradient,
{
    participation.validate()?;
    if participation.clients != datasets.len() {
        return Err(config(format!(
            "participation covers {} clients, federation has {}",
            participation.clients,
            datasets.len()
        )));
    }
    let mut model = model.clone();
    model.ensure_heads(datasets);
    let grads = client_gradients(&model, datasets)?;
    let alphas = alphas(datasets);
    let everyone: Vec<ClientId> = (0..datasets.len()).collect();
    let exact = stochastic_gradient(&grads, &alphas, &everyone, 1.0);
    let scale = participation.inclusion_scale();

    if let Some(subsets) = weighted_subsets(participation) {
        let mut mean = exact.zeros_like();
        for (s, w) in &subsets {
            mean.add_scaled(*w, &assemble(&grads, &alphas, s, scale))?;
        }
        let (theta_deviation, head_deviation) = mean.block_deviations(&exact)?;
        return Ok(UnbiasednessReport {
            max_abs_deviation: theta_deviation.max(head_deviation),
            theta_deviation,
            head_deviation,
            standard_error: None,
            subsets: subsets.len(),
            exhaustive: true,
        });
    }

    let mut rng = substream(seed, Stream::Participation, u64::MAX);
    let len = exact.values().count();
    let mut sum = vec![0.0; len];
    let mut sum_sq = vec![0.0; len];
    for _ in 0..MONTE_CARLO_DRAWS {
        let s = sample_participants(participation, &mut rng);
        let g = assemble(&grads, &alphas, &s, scale);
        for ((a, b), v) in sum.iter_mut().zip(&mut sum_sq).zip(g.values()) {
            *a += v;
            *b += v * v;
        }
    }
    let n = MONTE_CARLO_DRAWS as f64;
    let theta_len = exact.theta.len();
    let (mut theta_deviation, mut head_deviation, mut se): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for (j, ((a, b), x)) in sum.iter().zip(&sum_sq).zip(exact.values()).enumerate() {
        let m = a / n;
        let var = (b / n - m * m).max(0.0);
        se = se.max((var / n).sqrt());
        let dev = (m - x).abs();
        if j < theta_len {
            theta_deviation = theta_deviation.max(dev);
        } else {
            head_deviation = head_deviation.max(dev);
        }
    }
    Ok(UnbiasednessReport {
        max_abs_deviation: theta_deviation.max(head_deviation),
        theta_deviation,
        head_deviation,
        standard_error: Some(se),
        subsets: MONTE_CARLO_DRAWS,
        exhaustive: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combinations_enumerate_everything() {
        assert_eq!(combinations(4, 2).len(), 6);
        assert_eq!(combinations(4, 4), vec![vec![0, 1, 2, 3]]);
        assert_eq!(combinations(3, 1), vec![vec![0], vec![1], vec![2]]);
        assert_eq!(combinations(5, 3)[0], vec![0, 1, 2]);
        assert_eq!(combinations(5, 3)[9], vec![2, 3, 4]);
        assert_eq!(binomial_coefficient(20, 4), 4845);
        assert_eq!(binomial_coefficient(100, 20), u64::MAX);
    }

    #[test]
    fn binomial_weights_sum_to_one() {
        let cfg = ParticipationConfig::binomial(6, 0.3).unwrap();
        let subsets = weighted_subsets(&cfg).unwrap();
        assert_eq!(subsets.len(), 64);
        let total: f64 = subsets.iter().map(|(_, w)| w).sum();
        assert!((total - 1.0).abs() < 1e-14);
        assert!(weighted_subsets(&ParticipationConfig::binomial(20, 0.3).unwrap()).is_none());
    }
}
