//! Experiment orchestration: configuration, training with periodic greedy
//! evaluation, checkpoint evaluation, gradient checks and loss sweeps.

mod config;
mod eval;
mod gradcheck;
pub mod plot;
mod sweep;
mod train;

pub use config::{threads_from_env, ExperimentConfig};
pub use eval::{
    cmd_eval, evaluate_policy, load_checkpoint, oracle_baseline, random_baseline, EvalReport,
    Loaded,
};
pub use gradcheck::{cmd_gradcheck, GradcheckReport, GroupCheck};
pub use sweep::{cmd_sweep_loss, SweepRow};
pub use train::{cmd_train, Summary, TrainOutcome};
