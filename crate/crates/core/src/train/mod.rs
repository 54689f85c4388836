//! Optimisation: schedule, masked Adam, the training loops and domain extension.

mod adam;
mod config;
mod extend;
mod run;
mod schedule;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use config::TrainConfig;
pub use extend::{extend_domain, Extension, ExtensionMode, ExtensionOutcome};
pub use run::{clip_grad_norm, train_doss, train_doss_from, train_full, train_masked, MetricRow, TrainLog};
pub use schedule::lr_schedule;
