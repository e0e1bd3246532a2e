//! Training, evaluation and analysis front end.

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod train;

pub use analysis::{route_analysis, RouteAnalysis};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::TrainConfig;
pub use data::EvalSet;
pub use eval::{evaluate, score_tracks, track, track_with, MetricsReport};
pub use train::{train, train_with, TrainRun};

/// CSV float format: nine significant digits.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.8e}")
}
