//! Training of the full objective, checkpoints, inference and sweeps.

mod ablate;
mod adam;
mod checkpoint;
mod config;
mod infer;
mod model;
mod trainer;

pub use ablate::{ablate, ablate_csv, ablate_means, ablate_table, sweep_key, AblateRow, ABLATE_RANGES};
pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, RngState};
pub use config::{apply_overrides, merge_toml, read_toml, TrainConfig};
pub use infer::{evaluate_model, infer_video, localize_dataset};
pub use model::{forward_video, init_model, total_loss, BatchVideo, LossBreakdown, TotalLoss, VideoDraws, VideoForward};
pub use trainer::{train, EvalSummary, MetricLog, MetricRow, Trainer};
