//! Optimiser, synthetic data, gradient checks and the toy training loop.

mod adam;
pub mod gradcheck;
mod synth;
mod trainer;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{gradcheck, run_suite, CheckSettings, GradOp, GradcheckReport, InputError};
pub use synth::{synth_batch, synth_sample, Batch, FlipMode, Sample, SynthSpec};
pub use trainer::{
    evaluate, holdout_batch, log_csv, predict, train_toy, train_toy_with, window_ratio, EvalMetrics, LogRow, LossMode,
    TrainConfig, TrainOutcome, DIVERGENCE_THRESHOLD, HOLDOUT_OFFSET, LOG_HEADER,
};
