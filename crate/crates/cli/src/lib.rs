//! Library surface of the experiment runner; the binary in `main.rs` is a
//! thin argument-parsing layer over these commands.

pub mod commands;
pub mod config;
pub mod output;

pub use commands::{
    cmd_ablate_k, cmd_analyze, cmd_distill, cmd_gen_data, cmd_report, cmd_train_teacher,
    AblateKParams, AnalysisMode, AnalyzeParams, GenDataParams, ReportParams, TrainTeacherParams,
};
pub use config::ExperimentSpec;
