//! Optimisation: Adam, the training loop shared by flows and factored
//! baselines, and the baselines themselves.

pub mod adam;
pub mod baselines;
mod trainer;

pub use adam::{clip_grad_norm, Adam};
pub use baselines::{
    factored_logistic_logprob, logistic_mode, matched_width, weighted_bernoulli_logprob, BaselineKind, FactoredBaseline,
};
pub use trainer::{
    evaluate, split_validation, to_batch, trace_csv, train, CnfObjective, EvalSummary, Objective, TraceRow, TrainAbort,
    TrainConfig, TrainReport, validation_rng, TRACE_HEADER,
};
