//! Client-side updates of the four algorithms.

use crate::data::ClientDataset;
use crate::error::Result;
use crate::model::{joint_gradient, Backbone, FeatureCache, PassCounter, Theta};
use crate::nn::{backward_trace, forward_trace, softmax_cross_entropy, Matrix, ParamVector};
use crate::optim::gd_step;

use super::AlgorithmConfig;

/// Scaling of the last head step of a PFLEGO client.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinalHeadStep {
    /// Server rate `ρ_t` of the current round.
    pub rate: f64,
    /// `I / r`.
    pub inclusion_scale: f64,
    /// The client's data share `α_i`.
    pub alpha: f64,
}

impl FinalHeadStep {
    pub fn multiplier(&self, with_alpha: bool) -> f64 {
        let m = self.rate * self.inclusion_scale;
        if with_alpha {
            m * self.alpha
        } else {
            m
        }
    }
}

/// What a gradient-returning client sends back, plus its loss trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientReturn {
    /// `∇_θ ℓ_i`.
    pub gradient: ParamVector,
    /// Client loss at each head iterate visited, starting from the incoming head.
    pub losses: Vec<f64>,
}

fn head_steps(
    cache: &FeatureCache,
    theta: &Theta,
    head: &mut ParamVector,
    labels: &[usize],
    steps: usize,
    rate: f64,
    losses: &mut Vec<f64>,
) -> Result<()> {
    for _ in 0..steps {
        let (loss, grad) = cache.head_loss_and_gradient(theta, head, labels)?;
        losses.push(loss);
        *head = gd_step(head, &grad, rate)?;
    }
    Ok(())
}

/// PFLEGO client: `τ - 1` head-only steps on cached features, then the joint
/// gradient, then the scaled final head step. The returned backbone gradient
/// is taken at the head before that final step.
///
/// Exactly two backbone passes regardless of `τ`.
pub fn pflego_client_round(
    backbone: &Backbone,
    theta: &Theta,
    head: &mut ParamVector,
    data: &ClientDataset,
    cfg: &AlgorithmConfig,
    final_step: FinalHeadStep,
    passes: &mut PassCounter,
) -> Result<GradientReturn> {
    let cache = FeatureCache::build(backbone, theta, data.client_id, &data.train.inputs, passes)?;
    let mut losses = Vec::with_capacity(cfg.local_steps);
    head_steps(
        &cache,
        theta,
        head,
        &data.train.labels,
        cfg.local_steps - 1,
        cfg.client_rate,
        &mut losses,
    )?;
    let joint = joint_gradient(backbone, theta.params(), head, &data.train, passes)?;
    losses.push(joint.loss);
    let mut next = head.clone();
    next.add_scaled(
        -final_step.multiplier(cfg.alpha_in_head_update),
        &joint.head,
    )?;
    next.ensure_finite("final head step")?;
    *head = next;
    Ok(GradientReturn {
        gradient: joint.theta,
        losses,
    })
}

/// FedRecon client: `τ` head-only steps, then the backbone gradient at the
/// final head. No extra head step. Two backbone passes.
pub fn fedrecon_client_round(
    backbone: &Backbone,
    theta: &Theta,
    head: &mut ParamVector,
    data: &ClientDataset,
    cfg: &AlgorithmConfig,
    passes: &mut PassCounter,
) -> Result<GradientReturn> {
    let cache = FeatureCache::build(backbone, theta, data.client_id, &data.train.inputs, passes)?;
    let mut losses = Vec::with_capacity(cfg.local_steps + 1);
    head_steps(
        &cache,
        theta,
        head,
        &data.train.labels,
        cfg.local_steps,
        cfg.client_rate,
        &mut losses,
    )?;
    let joint = joint_gradient(backbone, theta.params(), head, &data.train, passes)?;
    losses.push(joint.loss);
    Ok(GradientReturn {
        gradient: joint.theta,
        losses,
    })
}

/// FedPer client: `τ` simultaneous gradient steps on the head and on a local
/// copy of the backbone. Returns the local backbone; `τ` backbone passes.
pub fn fedper_client_round(
    backbone: &Backbone,
    theta: &ParamVector,
    head: &mut ParamVector,
    data: &ClientDataset,
    cfg: &AlgorithmConfig,
    passes: &mut PassCounter,
) -> Result<ParamVector> {
    let mut local = theta.clone();
    for _ in 0..cfg.local_steps {
        let g = joint_gradient(backbone, &local, head, &data.train, passes)?;
        *head = gd_step(head, &g.head, cfg.client_rate)?;
        local = gd_step(&local, &g.theta, cfg.client_rate)?;
    }
    Ok(local)
}

/// Cross-entropy of a network whose output is already the logits, and its
/// parameter gradient. One backbone pass.
pub fn network_loss_and_gradient(
    network: &Backbone,
    params: &ParamVector,
    inputs: &Matrix,
    labels: &[usize],
    passes: &mut PassCounter,
) -> Result<(f64, ParamVector)> {
    passes.record();
    let trace = forward_trace(params, network.specs(), inputs)?;
    let (loss, dlogits) = softmax_cross_entropy(trace.output(), labels)?;
    let grad = backward_trace(params, network.specs(), &trace, &dlogits)?;
    grad.ensure_finite("network gradient")?;
    Ok((loss, grad))
}

/// FedAvg client: `τ` full gradient steps on a copy of the whole network
/// (backbone plus the shared `C`-way head), using global labels. `τ` passes.
pub fn fedavg_client_round(
    network: &Backbone,
    params: &ParamVector,
    data: &ClientDataset,
    cfg: &AlgorithmConfig,
    passes: &mut PassCounter,
) -> Result<ParamVector> {
    let labels = data.global_train_labels();
    let mut local = params.clone();
    for _ in 0..cfg.local_steps {
        let (_, g) =
            network_loss_and_gradient(network, &local, &data.train.inputs, &labels, passes)?;
        local = gd_step(&local, &g, cfg.client_rate)?;
    }
    Ok(local)
}
