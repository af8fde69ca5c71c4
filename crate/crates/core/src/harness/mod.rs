//! Configuration, artifact formats and the command implementations behind
//! the CLI.

mod commands;
mod config;
pub mod io;

pub use commands::{
    cmd_ablate, cmd_eval, cmd_fit_codec, cmd_oracle, cmd_train, critic_agreement, exit_code,
    load_agent, oracle_caption, oracle_grid, run_eval, AblationReport, ArmReport, CodecReport,
    OracleReport, TrainSummary, BEST_CHECKPOINT, BEST_MARKER, CODEC_FILE, EVAL_REPORT,
    FINAL_CHECKPOINT, RESOLVED_CONFIG, ROLLOUT_FILE, TRACE_FILE, TRAIN_LOG,
};
pub use config::{
    apply_overrides, CaptionSet, CodecSection, EvalSection, OracleSection, RunConfig, Setup,
    TargetSection, TrainSection, SCHEMA_VERSION,
};
