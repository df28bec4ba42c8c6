//! Losses, optimiser, learning-rate schedule, early stopping and the
//! training loop.

pub mod gradcheck;
mod fit;
mod loss;
mod optim;

pub use fit::{
    batch_objective, default_threshold_grid, eval_loss, history_csv, predict_scores, resolve_thresholds,
    sweep_thresholds, train_loop, HistoryRow, TrainConfig, TrainOutcome, HISTORY_HEADER,
};
pub use loss::{
    bce_loss, cross_entropy_loss, l2_penalty, mse_l2_loss, multi_hot, objective, LossConfig, LossKind, PROB_EPS,
};
pub use optim::{
    noam_lr, oversample, oversample_indices, Adam, EarlyStopConfig, EarlyStopper, Monitor, ScheduleConfig,
    StopDecision,
};
