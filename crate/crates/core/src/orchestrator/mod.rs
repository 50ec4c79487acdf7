//! Whole experiments and the checks that validate them.

mod experiment;
mod oracle;

pub use experiment::{
    evaluate, final_window, prepare, run_experiment, run_experiment_with, window_stats, DataSource,
    ExperimentConfig, IdxSource, Prepared, RoundReport, SyntheticSource, WindowStats,
};
pub use oracle::{
    centralized_oracle_step, client_gradients, full_gradient, psi_max_abs_diff,
    stochastic_gradient, verify_oracle_equivalence, verify_unbiasedness, verify_unbiasedness_with,
    OracleState, PsiGradient, UnbiasednessReport, EXHAUSTIVE_LIMIT, MONTE_CARLO_DRAWS,
};
