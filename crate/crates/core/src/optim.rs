//! Parameter update rules.
//!
//! Clients always take plain gradient steps. The server either takes plain
//! steps under an [`LrSchedule`] (the exact-SGD mode) or runs Adam with a
//! constant base rate.

use crate::error::{config, Error, Result};
use crate::nn::ParamVector;

/// `params - rate * grad`.
pub fn gd_step(params: &ParamVector, grad: &ParamVector, rate: f64) -> Result<ParamVector> {
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(config(format!("learning rate {rate} must be positive")));
    }
    let mut out = params.clone();
    out.add_scaled(-rate, grad)?;
    out.ensure_finite("gradient step")?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_rate(rate: f64) -> Self {
        Self {
            rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: ParamVector,
    pub v: ParamVector,
    pub t: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, like: &ParamVector) -> Result<Self> {
        if !(config.rate > 0.0) {
            return Err(config_err(config.rate));
        }
        Ok(Self {
            config,
            m: like.zeros_like(),
            v: like.zeros_like(),
            t: 0,
        })
    }

    /// Updates the moments and `params` in place.
    pub fn apply(&mut self, params: &mut ParamVector, grad: &ParamVector) -> Result<()> {
        params.ensure_layout(grad, "adam gradient")?;
        params.ensure_layout(&self.m, "adam state")?;
        let AdamConfig {
            rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        self.t += 1;
        let bc1 = 1.0 - beta1.powf(self.t as f64);
        let bc2 = 1.0 - beta2.powf(self.t as f64);
        let m = self.m.values_mut();
        let v = self.v.values_mut();
        for (((p, g), mi), vi) in params
            .values_mut()
            .iter_mut()
            .zip(grad.values())
            .zip(m)
            .zip(v)
        {
            *mi = beta1 * *mi + (1.0 - beta1) * g;
            *vi = beta2 * *vi + (1.0 - beta2) * g * g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *p -= rate * m_hat / (v_hat.sqrt() + eps);
        }
        params.ensure_finite("adam step")
    }
}

fn config_err(rate: f64) -> Error {
    config(format!("adam rate {rate} must be positive"))
}

/// Pure form of [`AdamState::apply`].
pub fn adam_step(
    state: &AdamState,
    params: &ParamVector,
    grad: &ParamVector,
) -> Result<(ParamVector, AdamState)> {
    let mut state = state.clone();
    let mut params = params.clone();
    state.apply(&mut params, grad)?;
    Ok((params, state))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant(f64),
    /// `ρ_t = ρ_0 / t`.
    RobbinsMonro(f64),
}

impl LrSchedule {
    /// Rate for round `t`, counting from 1.
    pub fn rate(&self, t: u64) -> f64 {
        match *self {
            LrSchedule::Constant(r) => r,
            LrSchedule::RobbinsMonro(r) => r / t.max(1) as f64,
        }
    }

    pub fn base(&self) -> f64 {
        match *self {
            LrSchedule::Constant(r) | LrSchedule::RobbinsMonro(r) => r,
        }
    }
}

/// How the server applies the aggregated backbone gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ServerMode {
    PureSgd(LrSchedule),
    Adam(AdamConfig),
}

impl ServerMode {
    /// The `ρ_t` used in round `t` (Adam's base rate is constant).
    pub fn rate(&self, t: u64) -> f64 {
        match self {
            ServerMode::PureSgd(s) => s.rate(t),
            ServerMode::Adam(c) => c.rate,
        }
    }
}

/// Server-side optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub enum ServerOptimizer {
    PureSgd(LrSchedule),
    Adam(AdamState),
}

impl ServerOptimizer {
    pub fn new(mode: ServerMode, like: &ParamVector) -> Result<Self> {
        Ok(match mode {
            ServerMode::PureSgd(s) => {
                if !(s.base() > 0.0) {
                    return Err(config(format!("server rate {} must be positive", s.base())));
                }
                ServerOptimizer::PureSgd(s)
            }
            ServerMode::Adam(c) => ServerOptimizer::Adam(AdamState::new(c, like)?),
        })
    }

    /// Returns the updated parameters for round `t`.
    pub fn step(
        &mut self,
        params: &ParamVector,
        grad: &ParamVector,
        t: u64,
    ) -> Result<ParamVector> {
        match self {
            ServerOptimizer::PureSgd(s) => gd_step(params, grad, s.rate(t)),
            ServerOptimizer::Adam(state) => {
                let mut p = params.clone();
                state.apply(&mut p, grad)?;
                Ok(p)
            }
        }
    }
}
