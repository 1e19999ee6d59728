use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fti_distill::commands::{
    cmd_ablate_k, cmd_analyze, cmd_distill, cmd_gen_data, cmd_report, cmd_train_teacher,
    AblateKParams, AnalysisMode, AnalyzeParams, GenDataParams, ReportParams, TrainTeacherParams,
};
use fti_distill::config::{
    parse_kl_direction, parse_list, parse_methods, parse_patience_unit, ExperimentSpec,
};
use fti_distill_core::dataset::SyntheticSpec;
use fti_distill_core::error::Result;
use fti_distill_core::math::Comparison;
use fti_distill_core::training::TeacherProtocol;

#[derive(Parser)]
#[command(
    name = "fti-distill",
    about = "Knowledge distillation experiments under a hard teacher-inference budget",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic Gaussian-mixture feature dataset
    GenData(GenDataArgs),
    /// Train a teacher model on the full training pool
    TrainTeacher(TrainTeacherArgs),
    /// Run the distillation method/budget grid
    Distill(DistillArgs),
    /// Sweep the comparative group size k
    AblateK(AblateKArgs),
    /// Correlation-gap or flatness analysis over saved checkpoints
    Analyze(AnalyzeArgs),
    /// Rebuild the aggregate table from a run log
    Report(ReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 20)]
    classes: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 1000)]
    per_class: usize,
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    #[arg(long, default_value_t = 3.0)]
    separation: f64,
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainTeacherArgs {
    #[arg(long)]
    data: PathBuf,
    /// Layer widths, e.g. 32,256,256,20
    #[arg(long)]
    arch: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 10)]
    patience: usize,
    #[arg(long, default_value_t = 150)]
    max_epochs: usize,
    #[arg(long)]
    out: PathBuf,
    /// Also persist a representation cache for every pool sample
    #[arg(long)]
    cache_out: Option<PathBuf>,
}

/// Flags shared by `distill` and `ablate-k`; unset flags fall back to the
/// spec file and then to defaults.
#[derive(Args)]
struct GridArgs {
    /// Experiment spec file (flat key = value with [section] headers)
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Teacher checkpoint
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Persisted teacher-representation cache
    #[arg(long)]
    teacher_cache: Option<PathBuf>,
    /// Accept a cache whose fingerprint does not match the teacher
    #[arg(long)]
    allow_teacher_mismatch: bool,
    /// Comma-separated methods (ce-only,kd,ckd,rkd,dist,mixup-fixed,fitnets,fitnets-ckd)
    #[arg(long)]
    methods: Option<String>,
    /// Comma-separated teacher-call budgets
    #[arg(long = "budget", alias = "budgets")]
    budget: Option<String>,
    /// Student layer widths, e.g. 32,32,20
    #[arg(long)]
    student: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    /// difference | addition | interpolation
    #[arg(long)]
    comparison: Option<String>,
    #[arg(long)]
    beta: Option<f64>,
    /// KD softmax temperature
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    ckd_temperature: Option<f64>,
    /// student_first | teacher_first
    #[arg(long)]
    kl_direction: Option<String>,
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    lrs: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// epochs | steps
    #[arg(long)]
    patience_unit: Option<String>,
    #[arg(long)]
    max_decays: Option<usize>,
    #[arg(long)]
    decay_factor: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    aux_weight: Option<f64>,
    #[arg(long)]
    mixup_kd_weight: Option<f64>,
    #[arg(long)]
    fitnets_weight: Option<f64>,
    #[arg(long)]
    sampler_cap: Option<u64>,
    /// Declare white-box (intermediate representation) access
    #[arg(long)]
    white_box: bool,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl GridArgs {
    fn resolve(&self) -> Result<ExperimentSpec> {
        let mut spec = match &self.spec {
            Some(path) => ExperimentSpec::from_file(path)?,
            None => ExperimentSpec::default(),
        };
        if let Some(v) = &self.data {
            spec.data = v.clone();
        }
        if let Some(v) = &self.teacher {
            spec.teacher_checkpoint = Some(v.clone());
        }
        if let Some(v) = &self.teacher_cache {
            spec.teacher_cache = Some(v.clone());
        }
        if self.allow_teacher_mismatch {
            spec.allow_teacher_mismatch = true;
        }
        if self.white_box {
            spec.white_box = true;
        }
        if let Some(v) = &self.methods {
            spec.methods = parse_methods(v)?;
        }
        if let Some(v) = &self.budget {
            spec.budgets = parse_list(v, "budget")?;
        }
        if let Some(v) = &self.student {
            spec.base.student_widths = parse_list(v, "student widths")?;
        }
        if let Some(v) = self.k {
            spec.base.ckd.k = v;
        }
        if let Some(v) = &self.comparison {
            spec.base.ckd.comparison = Comparison::parse(v)?;
        }
        if let Some(v) = self.beta {
            spec.base.ckd.beta = v;
        }
        if let Some(v) = self.temperature {
            spec.base.kd.temperature = v;
        }
        if let Some(v) = self.ckd_temperature {
            spec.base.ckd.temperature = v;
        }
        if let Some(v) = &self.kl_direction {
            spec.base.ckd.kl_direction = parse_kl_direction(v)?;
        }
        if let Some(v) = &self.seeds {
            spec.base.seeds = parse_list(v, "seeds")?;
        }
        if let Some(v) = &self.lrs {
            spec.base.lr_grid = parse_list(v, "lrs")?;
        }
        if let Some(v) = self.batch_size {
            spec.base.protocol.batch_size = v;
        }
        if let Some(v) = self.patience {
            spec.base.protocol.patience = v;
        }
        if let Some(v) = &self.patience_unit {
            spec.base.protocol.patience_unit = parse_patience_unit(v)?;
        }
        if let Some(v) = self.max_decays {
            spec.base.protocol.max_decays = v;
        }
        if let Some(v) = self.decay_factor {
            spec.base.protocol.decay_factor = v;
        }
        if let Some(v) = self.max_epochs {
            spec.base.protocol.max_epochs = v;
        }
        if let Some(v) = self.momentum {
            spec.base.protocol.momentum = v;
        }
        if let Some(v) = self.weight_decay {
            spec.base.protocol.weight_decay = v;
        }
        if let Some(v) = self.aux_weight {
            spec.base.aux_weight = v;
        }
        if let Some(v) = self.mixup_kd_weight {
            spec.base.mixup_kd_weight = v;
        }
        if let Some(v) = self.fitnets_weight {
            spec.base.fitnets_weight = v;
        }
        if let Some(v) = self.sampler_cap {
            spec.base.sampler_cap = v;
        }
        if let Some(v) = self.jobs {
            spec.base.jobs = v;
        }
        if let Some(v) = &self.out {
            spec.out = v.clone();
        }
        Ok(spec)
    }
}

#[derive(Args)]
struct DistillArgs {
    #[command(flatten)]
    grid: GridArgs,
}

#[derive(Args)]
struct AblateKArgs {
    #[command(flatten)]
    grid: GridArgs,
    /// Comma-separated k values, e.g. 2,3,4,6
    #[arg(long)]
    k_grid: String,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[arg(long)]
    teacher_cache: Option<PathBuf>,
    /// Student checkpoints to analyze
    #[arg(long, num_args = 1.., required = true)]
    checkpoints: Vec<PathBuf>,
    /// corr | flatness
    #[arg(long)]
    mode: String,
    #[arg(long, default_value_t = 100)]
    samples: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Flatness: per-class centering and curve averaging
    #[arg(long)]
    per_class: bool,
    /// Flatness: normalize each curve by its leading singular value
    #[arg(long)]
    normalize: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Run log (JSON lines) produced by distill or ablate-k
    #[arg(long)]
    runs: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(args) => cmd_gen_data(&GenDataParams {
            spec: SyntheticSpec {
                classes: args.classes,
                dim: args.dim,
                per_class: args.per_class,
                noise: args.noise,
                separation: args.separation,
                test_fraction: args.test_fraction,
                seed: args.seed,
            },
            out: args.out,
        }),
        Command::TrainTeacher(args) => {
            let widths = parse_list(&args.arch, "arch")?;
            cmd_train_teacher(&TrainTeacherParams {
                data: args.data,
                widths,
                seed: args.seed,
                protocol: TeacherProtocol {
                    lr: args.lr,
                    patience: args.patience,
                    max_epochs: args.max_epochs,
                    ..TeacherProtocol::default()
                },
                out: args.out,
                cache_out: args.cache_out,
            })
        }
        Command::Distill(args) => cmd_distill(&args.grid.resolve()?),
        Command::AblateK(args) => {
            let k_grid = parse_list(&args.k_grid, "k grid")?;
            cmd_ablate_k(&AblateKParams {
                spec: args.grid.resolve()?,
                k_grid,
            })
        }
        Command::Analyze(args) => {
            let mode = match args.mode.as_str() {
                "corr" => AnalysisMode::Correlation,
                "flatness" => AnalysisMode::Flatness,
                other => {
                    return Err(fti_distill_core::Error::InvalidInput(format!(
                        "unknown mode '{other}' (expected corr|flatness)"
                    )))
                }
            };
            cmd_analyze(&AnalyzeParams {
                data: args.data,
                teacher_checkpoint: args.teacher,
                teacher_cache: args.teacher_cache,
                checkpoints: args.checkpoints,
                mode,
                samples: args.samples,
                seed: args.seed,
                per_class: args.per_class,
                normalize: args.normalize,
                out: args.out,
            })
        }
        Command::Report(args) => cmd_report(&ReportParams {
            runs: args.runs,
            out: args.out,
        }),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FTI_DISTILL_LOG", "warn"))
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.class());
            ExitCode::FAILURE
        }
    }
}
