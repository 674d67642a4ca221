//! Recovery training of a pruned student against a frozen teacher.

pub mod config;
pub mod losses;
pub mod optim;
pub mod train;

pub use config::{RecoveryConfig, Strategy, TrainScope, DEFAULT_TAU};
pub use losses::{
    boundary_from_end, hidden_match_graph, hidden_match_loss, kd_graph, kd_logits_loss, sft_graph,
    sft_loss, KdDirection,
};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind, Schedule};
pub use train::{subsample, train, LossBreakdown, Monitor, TrainOutcome};
