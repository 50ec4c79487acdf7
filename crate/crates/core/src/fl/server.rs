//! Server-side aggregation.

use std::collections::BTreeMap;

use crate::data::ClientId;
use crate::error::{input, Result};
use crate::model::Theta;
use crate::nn::ParamVector;
use crate::optim::ServerOptimizer;

/// `G = (I / r) Σ_{i ∈ returns} α_i g_i`, summed in ascending client order.
///
/// Returns `None` when nobody reported.
pub fn assemble_gradient(
    returns: &BTreeMap<ClientId, ParamVector>,
    alphas: &[f64],
    inclusion_scale: f64,
) -> Result<Option<ParamVector>> {
    let mut iter = returns.iter();
    let Some((&first_id, first)) = iter.next() else {
        return Ok(None);
    };
    let alpha = |id: ClientId| {
        alphas
            .get(id)
            .copied()
            .ok_or_else(|| input(format!("no data weight for client {id}")))
    };
    let mut total = first.zeros_like();
    total.add_scaled(alpha(first_id)?, first)?;
    for (&id, g) in iter {
        total.add_scaled(alpha(id)?, g)?;
    }
    total.scale(inclusion_scale);
    Ok(Some(total))
}

/// Applies the assembled gradient with the server optimizer; a round with no
/// returns leaves `theta` and the optimizer untouched.
pub fn pflego_server_aggregate(
    theta: &mut Theta,
    returns: &BTreeMap<ClientId, ParamVector>,
    alphas: &[f64],
    inclusion_scale: f64,
    optimizer: &mut ServerOptimizer,
    round: u64,
) -> Result<()> {
    let Some(grad) = assemble_gradient(returns, alphas, inclusion_scale)? else {
        return Ok(());
    };
    theta.params().ensure_layout(&grad, "aggregated gradient")?;
    let next = optimizer.step(theta.params(), &grad, round)?;
    theta.replace(next)
}

/// Weighted average of returned parameters with the participants' data
/// weights renormalized to sum to one.
pub fn fedavg_aggregate(
    returns: &BTreeMap<ClientId, ParamVector>,
    alphas: &[f64],
) -> Result<Option<ParamVector>> {
    let mut weight_sum = 0.0;
    for &id in returns.keys() {
        weight_sum += alphas
            .get(id)
            .copied()
            .ok_or_else(|| input(format!("no data weight for client {id}")))?;
    }
    if returns.is_empty() {
        return Ok(None);
    }
    if !(weight_sum > 0.0) {
        return Err(input("participants hold no data"));
    }
    let mut out = returns.values().next().unwrap().zeros_like();
    for (&id, p) in returns {
        out.add_scaled(alphas[id] / weight_sum, p)?;
    }
    out.ensure_finite("averaged parameters")?;
    Ok(Some(out))
}
