//! Which clients take part in a round.
//!
//! Two processes are supported: a uniformly random subset of fixed size `r`,
//! or independent inclusion of each client with probability `p`. Either way
//! every client participates with marginal probability `r / I` (with
//! `r = I p` in the second case).

use rand::Rng;

use crate::data::ClientId;
use crate::error::{config, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Participation {
    FixedCount(usize),
    Binomial(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParticipationConfig {
    pub mode: Participation,
    pub clients: usize,
}

impl ParticipationConfig {
    pub fn fixed(clients: usize, r: usize) -> Result<Self> {
        let cfg = Self {
            mode: Participation::FixedCount(r),
            clients,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn binomial(clients: usize, p: f64) -> Result<Self> {
        let cfg = Self {
            mode: Participation::Binomial(p),
            clients,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(config("federation needs at least one client"));
        }
        match self.mode {
            Participation::FixedCount(r) if r == 0 || r > self.clients => Err(config(format!(
                "fixed participation r={r} must lie in 1..={}",
                self.clients
            ))),
            Participation::Binomial(p) if !(p > 0.0 && p <= 1.0) => Err(config(format!(
                "participation probability {p} must lie in (0, 1]"
            ))),
            _ => Ok(()),
        }
    }

    /// Expected number of participants `r` (fractional for the binomial process).
    pub fn expected_participants(&self) -> f64 {
        match self.mode {
            Participation::FixedCount(r) => r as f64,
            Participation::Binomial(p) => p * self.clients as f64,
        }
    }

    /// `1 / Pr(i ∈ I_t) = I / r`.
    pub fn inclusion_scale(&self) -> f64 {
        self.clients as f64 / self.expected_participants()
    }
}

/// Draws one round's participants, sorted by id. May be empty for the
/// binomial process.
pub fn sample_participants<R: Rng + ?Sized>(
    cfg: &ParticipationConfig,
    rng: &mut R,
) -> Vec<ClientId> {
    let mut ids = match cfg.mode {
        Participation::FixedCount(r) => rand::seq::index::sample(rng, cfg.clients, r).into_vec(),
        Participation::Binomial(p) => (0..cfg.clients).filter(|_| rng.random_bool(p)).collect(),
    };
    ids.sort_unstable();
    ids
}
