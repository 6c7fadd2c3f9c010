//! Experiment stages: corpus synthesis, self-supervised pre-training,
//! target-data adaptation, fine-tuning, probing, checkpoint averaging and
//! evaluation.

pub mod checkpoint;
pub mod config;
pub mod metrics;
mod stages;
pub mod train;

pub use checkpoint::{Checkpoint, CheckpointHeader};
pub use config::{ObjectiveKind, Stage, StageConfig};
pub use metrics::{read_metrics, MetricsRecord};
pub use stages::{
    average_params, cmd_adapt, cmd_average, cmd_eval, cmd_finetune, cmd_pretrain, cmd_probe,
    cmd_synth, dev_split, AverageOutcome, EvalReport, FinetuneOutcome, ProbeOutcome, ProbeRow,
    StageOutcome, UtteranceResult, FINAL_CHECKPOINT, METRICS_FILE,
};
pub use train::DevReport;

/// Mixes a run seed with a tag into an independent 64-bit seed.
pub fn mix_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
