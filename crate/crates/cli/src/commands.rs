//! Command implementations. Each command is an ordinary function over a
//! parameter struct so both the binary and the test suites drive the same
//! code path.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;

use fti_distill_core::analysis::{
    aggregate_runs, correlation_gap, flatness_curve, mean_std, AggregateRow, LogitSource,
};
use fti_distill_core::dataset::{self, SyntheticSpec};
use fti_distill_core::error::{Error, Result};
use fti_distill_core::teacher::{LookupTeacher, Teacher, TeacherCache};
use fti_distill_core::training::{
    train_sweep, train_teacher, Method, MlpModel, MlpTeacher, RunContext, RunResult,
    TeacherProtocol,
};

use crate::config::ExperimentSpec;
use crate::output::{
    append_run_log, config_hash, read_run_log, render_table, results_table, run_id, write_manifest,
    OutputDirs, RunLogRecord,
};

fn bad(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

// ---- gen-data ----

pub struct GenDataParams {
    pub spec: SyntheticSpec,
    pub out: PathBuf,
}

pub fn cmd_gen_data(params: &GenDataParams) -> Result<()> {
    let ds = dataset::generate_synthetic(&params.spec)?;
    dataset::save_csv(&ds, &params.out)?;
    // 80-20 train/val suggestion over the pool, seeded by the dataset seed;
    // distillation runs draw their own per-seed splits of their budgeted
    // subsets, so this file serves teacher training and external tools.
    let split_path = params.out.with_extension("split.csv");
    let mut pool = ds.pool_ids();
    fti_distill_core::RngStream::new(params.spec.seed)
        .split(0x511)
        .shuffle(&mut pool);
    let train_count = (pool.len() * 4) / 5;
    let mut lines = String::from("id,role\n");
    let mut ordered: Vec<(u64, &str)> = pool[..train_count]
        .iter()
        .map(|&id| (id, "train"))
        .chain(pool[train_count..].iter().map(|&id| (id, "val")))
        .collect();
    ordered.sort_unstable();
    for (id, role) in ordered {
        lines.push_str(&format!("{id},{role}\n"));
    }
    std::fs::write(&split_path, lines)?;
    println!(
        "wrote {} samples ({} classes, dim {}, {} pool / {} test) to {}; split indices in {}",
        ds.len(),
        ds.num_classes,
        ds.dim,
        ds.pool_ids().len(),
        ds.test_ids().len(),
        params.out.display(),
        split_path.display()
    );
    Ok(())
}

// ---- train-teacher ----

pub struct TrainTeacherParams {
    pub data: PathBuf,
    pub widths: Vec<usize>,
    pub seed: u64,
    pub protocol: TeacherProtocol,
    pub out: PathBuf,
    /// Optionally persist the teacher's representations for every pool
    /// sample, enabling later lookup-teacher runs without the checkpoint.
    pub cache_out: Option<PathBuf>,
}

pub fn cmd_train_teacher(params: &TrainTeacherParams) -> Result<()> {
    let ds = dataset::load_csv(&params.data)?;
    let report = train_teacher(&ds, &params.widths, params.seed, &params.protocol)?;
    report.model.save(&params.out)?;
    println!(
        "teacher {:?}: val {:.4}, test {:.4} after {} epochs (decays at {:?}); saved to {}",
        params.widths,
        report.best_val_accuracy,
        report.test_accuracy,
        report.epochs_run,
        report.decay_epochs,
        params.out.display()
    );
    if let Some(cache_path) = &params.cache_out {
        let teacher = MlpTeacher::new(report.model.clone());
        let mut cache = TeacherCache::new(
            teacher.num_classes(),
            teacher.hint_dim(),
            teacher.fingerprint(),
        );
        for id in ds.pool_ids() {
            let rep = teacher.forward(id, ds.features_of(id).unwrap(), true)?;
            cache.insert(id, rep)?;
        }
        cache.persist(cache_path)?;
        println!(
            "cached {} teacher representations to {}",
            cache.len(),
            cache_path.display()
        );
    }
    Ok(())
}

// ---- distill ----

struct LoadedTeacher {
    teacher: Arc<dyn Teacher>,
    warm_cache: Option<TeacherCache>,
}

fn load_teacher(spec: &ExperimentSpec) -> Result<LoadedTeacher> {
    let cache = spec
        .teacher_cache
        .as_ref()
        .map(|p| TeacherCache::load(p))
        .transpose()?;
    match (&spec.teacher_checkpoint, cache) {
        (Some(ckpt), cache) => {
            let model = MlpModel::load(ckpt)?;
            Ok(LoadedTeacher {
                teacher: Arc::new(MlpTeacher::new(model)),
                warm_cache: cache,
            })
        }
        (None, Some(cache)) => Ok(LoadedTeacher {
            teacher: Arc::new(LookupTeacher::from_cache(cache.clone())),
            warm_cache: Some(cache),
        }),
        (None, None) => Err(bad(
            "no teacher: pass --teacher <checkpoint> or --teacher-cache <cache>",
        )),
    }
}

#[derive(Serialize)]
struct BestLrRow {
    method: String,
    budget: u64,
    best_lr: f64,
    test_mean_pct: f64,
    test_std_pct: f64,
}

#[derive(Serialize)]
struct Summary {
    table: Vec<AggregateRow>,
    selections: Vec<BestLrRow>,
}

/// Run the full method-by-budget grid and emit logs, reports, checkpoints,
/// and the manifest.
pub fn cmd_distill(spec: &ExperimentSpec) -> Result<()> {
    spec.validate()?;
    let ds = dataset::load_csv(&spec.data)?;
    let needs_teacher = spec.methods.iter().any(|m| m.needs_teacher());
    let loaded = if needs_teacher {
        Some(load_teacher(spec)?)
    } else {
        None
    };
    let dirs = OutputDirs::prepare(&spec.out)?;

    let pool_size = ds.pool_ids().len() as u64;
    for &budget in &spec.budgets {
        if budget > pool_size {
            return Err(bad(format!(
                "budget {budget} exceeds training pool size {pool_size}"
            )));
        }
    }

    let mut best_results: Vec<RunResult> = Vec::new();
    let mut selections = Vec::new();
    let mut records = Vec::new();
    for &method in &spec.methods {
        for &budget in &spec.budgets {
            let mut cfg = spec.base.clone();
            cfg.method = method;
            cfg.budget = budget;
            let hash = config_hash(&cfg)?;
            let mut ctx = RunContext::new(
                &ds,
                loaded.as_ref().map(|l| l.teacher.clone()),
                &cfg,
            );
            ctx.warm_cache = loaded.as_ref().and_then(|l| l.warm_cache.clone());
            ctx.allow_teacher_mismatch = spec.allow_teacher_mismatch;
            log::info!("running {} at n={budget}", method.name());
            let sweep = train_sweep(&ctx)?;
            for run in &sweep.runs {
                records.push(RunLogRecord::new(
                    run_id(method.name(), budget, run.result.lr, run.result.seed),
                    hash.clone(),
                    run.result.clone(),
                ));
            }
            for run in sweep.best_runs() {
                let name = format!("{}_n{}_s{}.ckpt", method.name(), budget, run.result.seed);
                run.model.save(&dirs.checkpoints.join(name))?;
                best_results.push(run.result.clone());
            }
            selections.push(BestLrRow {
                method: method.name().to_string(),
                budget,
                best_lr: sweep.best_lr,
                test_mean_pct: sweep.test_mean * 100.0,
                test_std_pct: sweep.test_std * 100.0,
            });
        }
    }

    append_run_log(&dirs.logs.join("runs.jsonl"), &records)?;
    let rows = aggregate_runs(&best_results)?;
    let methods: Vec<&str> = spec.methods.iter().map(|m| m.name()).collect();
    let table = results_table(&rows, &methods, &spec.budgets);
    std::fs::write(dirs.reports.join("results_table.txt"), &table)?;
    let summary = Summary {
        table: rows,
        selections,
    };
    let json = serde_json::to_string_pretty(&summary)
        .map_err(|e| bad(format!("serialize summary: {e}")))?;
    std::fs::write(dirs.reports.join("summary.json"), json)?;
    write_manifest(&dirs)?;
    print!("{table}");
    Ok(())
}

// ---- ablate-k ----

pub struct AblateKParams {
    pub spec: ExperimentSpec,
    pub k_grid: Vec<usize>,
}

/// Sweep the comparative group size; one curve file per budget with a
/// `k mean std` line per completed point.
pub fn cmd_ablate_k(params: &AblateKParams) -> Result<()> {
    let spec = &params.spec;
    spec.validate()?;
    if params.k_grid.iter().any(|&k| k < 2) {
        return Err(bad("k values must be at least 2"));
    }
    let ds = dataset::load_csv(&spec.data)?;
    let loaded = load_teacher(spec)?;
    let dirs = OutputDirs::prepare(&spec.out)?;

    let mut records = Vec::new();
    let mut table_rows = Vec::new();
    for &budget in &spec.budgets {
        let train_size = ((budget as usize) * 4) / 5;
        let mut curve = String::new();
        for &k in &params.k_grid {
            if k > train_size {
                log::warn!(
                    "skipping k={k} at n={budget}: needs more than the {train_size} train samples"
                );
                continue;
            }
            let mut cfg = spec.base.clone();
            cfg.method = Method::Ckd;
            cfg.budget = budget;
            cfg.ckd.k = k;
            let hash = config_hash(&cfg)?;
            let mut ctx = RunContext::new(&ds, Some(loaded.teacher.clone()), &cfg);
            ctx.warm_cache = loaded.warm_cache.clone();
            ctx.allow_teacher_mismatch = spec.allow_teacher_mismatch;
            log::info!("ablating k={k} at n={budget}");
            let sweep = train_sweep(&ctx)?;
            for run in &sweep.runs {
                records.push(RunLogRecord::new(
                    format!("ckd_k{k}_n{budget}_lr{}_s{}", run.result.lr, run.result.seed),
                    hash.clone(),
                    run.result.clone(),
                ));
            }
            let tests: Vec<f64> = sweep
                .best_runs()
                .iter()
                .map(|r| r.result.test_accuracy * 100.0)
                .collect();
            let (mean, std) = mean_std(&tests);
            curve.push_str(&format!("{k} {mean} {std}\n"));
            table_rows.push(vec![
                k.to_string(),
                budget.to_string(),
                fti_distill_core::analysis::format_cell(mean, std),
            ]);
        }
        if curve.is_empty() {
            return Err(bad(format!("no feasible k values at n={budget}")));
        }
        std::fs::write(dirs.reports.join(format!("k_ablation_n{budget}.txt")), curve)?;
    }
    append_run_log(&dirs.logs.join("runs.jsonl"), &records)?;
    let table = render_table(
        &["k".to_string(), "n".to_string(), "test".to_string()],
        &table_rows,
    );
    std::fs::write(dirs.reports.join("k_ablation_table.txt"), &table)?;
    write_manifest(&dirs)?;
    print!("{table}");
    Ok(())
}

// ---- analyze ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnalysisMode {
    Correlation,
    Flatness,
}

pub struct AnalyzeParams {
    pub data: PathBuf,
    pub teacher_checkpoint: Option<PathBuf>,
    pub teacher_cache: Option<PathBuf>,
    pub checkpoints: Vec<PathBuf>,
    pub mode: AnalysisMode,
    pub samples: usize,
    pub seed: u64,
    pub per_class: bool,
    pub normalize: bool,
    pub out: PathBuf,
}

enum TeacherSource {
    Model(MlpModel),
    Cache(TeacherCache),
}

impl TeacherSource {
    fn as_logit_source(&self) -> &dyn LogitSource {
        match self {
            TeacherSource::Model(m) => m,
            TeacherSource::Cache(c) => c,
        }
    }
}

fn checkpoint_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

pub fn cmd_analyze(params: &AnalyzeParams) -> Result<()> {
    if params.checkpoints.is_empty() {
        return Err(bad("no checkpoints to analyze"));
    }
    let ds = dataset::load_csv(&params.data)?;
    let eval_ids = ds.test_ids();
    let dirs = OutputDirs::prepare(&params.out)?;

    let students: Vec<(String, MlpModel)> = params
        .checkpoints
        .iter()
        .map(|p| {
            let model = MlpModel::load(p)?;
            if model.output_dim() != ds.num_classes {
                return Err(bad(format!(
                    "{}: model has {} classes, dataset has {}",
                    p.display(),
                    model.output_dim(),
                    ds.num_classes
                )));
            }
            Ok((checkpoint_name(p), model))
        })
        .collect::<Result<_>>()?;

    match params.mode {
        AnalysisMode::Correlation => {
            let teacher = match (&params.teacher_checkpoint, &params.teacher_cache) {
                (Some(p), _) => TeacherSource::Model(MlpModel::load(p)?),
                (None, Some(p)) => TeacherSource::Cache(TeacherCache::load(p)?),
                (None, None) => {
                    return Err(bad("correlation analysis needs --teacher or --teacher-cache"))
                }
            };
            let mut rows = Vec::new();
            for (name, model) in &students {
                let report = correlation_gap(
                    model,
                    teacher.as_logit_source(),
                    &ds,
                    &eval_ids,
                    params.samples,
                    params.seed,
                )?;
                rows.push(vec![name.clone(), format!("{:.6}", report.metric)]);
            }
            let table = render_table(
                &["checkpoint".to_string(), "corr_gap".to_string()],
                &rows,
            );
            std::fs::write(dirs.reports.join("correlation_table.txt"), &table)?;
            write_manifest(&dirs)?;
            print!("{table}");
        }
        AnalysisMode::Flatness => {
            let mut rows = Vec::new();
            for (name, model) in &students {
                let curve =
                    flatness_curve(model, &ds, &eval_ids, params.per_class, params.normalize)?;
                let mut text = String::new();
                for v in &curve.values {
                    text.push_str(&format!("{v}\n"));
                }
                std::fs::write(dirs.reports.join(format!("flatness_{name}.txt")), text)?;
                let mut row = vec![name.clone()];
                row.extend(curve.values.iter().map(|v| format!("{v:.6}")));
                rows.push(row);
            }
            let mut header = vec!["checkpoint".to_string()];
            header.extend((0..ds.num_classes).map(|i| format!("sv{i}")));
            let table = render_table(&header, &rows);
            std::fs::write(dirs.reports.join("flatness_table.txt"), &table)?;
            write_manifest(&dirs)?;
            print!("{table}");
        }
    }
    Ok(())
}

// ---- report ----

pub struct ReportParams {
    pub runs: PathBuf,
    pub out: Option<PathBuf>,
}

/// Rebuild the aggregate table from a run log: per (method, budget), select
/// the learning rate with the highest mean validation accuracy (ties to the
/// larger rate) and report test mean/std across seeds at that rate.
pub fn cmd_report(params: &ReportParams) -> Result<()> {
    let records = read_run_log(&params.runs)?;
    if records.is_empty() {
        return Err(bad("run log is empty"));
    }
    let results: Vec<RunResult> = records.into_iter().map(|r| r.result).collect();
    let mut keys: Vec<(Method, u64)> = results.iter().map(|r| (r.method, r.budget)).collect();
    keys.sort_by_key(|(m, b)| (m.name(), *b));
    keys.dedup();

    let mut best_results = Vec::new();
    for (method, budget) in keys {
        let group: Vec<&RunResult> = results
            .iter()
            .filter(|r| r.method == method && r.budget == budget)
            .collect();
        let mut lrs: Vec<f64> = group.iter().map(|r| r.lr).collect();
        lrs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        lrs.dedup();
        let mut best_lr = lrs[0];
        let mut best_val = f64::NEG_INFINITY;
        for &lr in &lrs {
            let vals: Vec<f64> = group
                .iter()
                .filter(|r| r.lr == lr)
                .map(|r| r.best_val_accuracy)
                .collect();
            let mean = mean_std(&vals).0;
            if mean > best_val || (mean == best_val && lr > best_lr) {
                best_val = mean;
                best_lr = lr;
            }
        }
        best_results.extend(
            group
                .into_iter()
                .filter(|r| r.lr == best_lr)
                .cloned(),
        );
    }
    let rows = aggregate_runs(&best_results)?;
    let mut methods: Vec<&str> = rows.iter().map(|r| r.method.as_str()).collect();
    methods.dedup();
    let mut budgets: Vec<u64> = rows.iter().map(|r| r.budget).collect();
    budgets.sort_unstable();
    budgets.dedup();
    let table = results_table(&rows, &methods, &budgets);
    if let Some(out) = &params.out {
        let dirs = OutputDirs::prepare(out)?;
        std::fs::write(dirs.reports.join("results_table.txt"), &table)?;
        write_manifest(&dirs)?;
    }
    print!("{table}");
    Ok(())
}
