//! Run configuration, data files, training loops and metrics behind the
//! command-line tool.

mod config;
mod data;
mod metrics;
mod shapes;
mod train;

pub use config::{
    EncoderSource, MetricsConfig, OptimConfig, PathsConfig, ProbeConfig, RunConfig, Schedule,
};
pub use data::{featurize, load_manifest, write_synthetic, Labeled};
pub use metrics::{MetricsLog, MetricsRow};
pub use shapes::render_shapes;
pub use train::{
    derive_seed, encode_all, evaluate, linear_probe, pretrain, probe_encoder, restore_model,
    run_eval, run_pretrain, run_probe, run_train, supervised_step, to_grids, train_classifier,
    Evaluation, Pretrained, TrainSummary,
};
