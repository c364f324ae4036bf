//! Training orchestration, checkpoints, evaluation and parameter accounting.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod optim;
pub mod trainer;

pub use bench::{bench_params, toy_manifest, write_bench_csv, BenchRow, LayerShape, Manifest};
pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{parse_kv, Objective, Stage, TrainConfig};
pub use eval::{
    evaluate, ppm_bytes, sample_image, AttnStats, EvalReport, EvalRow, DEFAULT_EVAL_STEPS, EVAL_CSV_HEADER,
};
pub use optim::{AdamW, AdamWConfig};
pub use trainer::{
    batch_gradients, draw_batch, example_gradients, example_loss, initial_base, initial_control, train_base,
    train_control, window_mean, write_loss_csv, Components, Draw, LossRow, TrainOutput, CA_LAYERS, LOSS_CSV_HEADER,
};
