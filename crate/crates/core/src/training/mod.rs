//! The training protocol: per-method loss assembly, the SGD loop, early
//! stopping with learning-rate decay and best-checkpoint restoration, and the
//! (learning rate, seed) sweep.
//!
//! Protocol shape: an epoch is `budget` optimizer steps for every method
//! (step parity), validation runs after each epoch, and when validation
//! accuracy fails to improve for `patience` consecutive evaluations the run
//! restores the best checkpoint and decays the learning rate; after the decay
//! budget is spent, the next exhaustion stops the run.

mod mlp;
mod optimizer;

pub use mlp::{DenseLayer, ForwardTrace, MlpModel, MlpTeacher, ModelGrads};
pub use optimizer::{sgd_update, SgdState};

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{invalid, Error, Result};
use crate::losses::{self, AffineRegressor, CkdConfig, KdConfig, RkdConfig};
use crate::math::{self, Matrix};
use crate::rng::RngStream;
use crate::sampler::{epoch_groups, ComparisonGroup, SamplerConfig};
use crate::teacher::{fingerprint64, PayloadWriter, Teacher, TeacherOracle};

/// Distillation method under test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    CeOnly,
    Kd,
    Ckd,
    Rkd,
    Dist,
    MixupFixed,
    FitNets,
    FitNetsCkd,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::CeOnly,
        Method::Kd,
        Method::Ckd,
        Method::Rkd,
        Method::Dist,
        Method::MixupFixed,
        Method::FitNets,
        Method::FitNetsCkd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::CeOnly => "ce-only",
            Method::Kd => "kd",
            Method::Ckd => "ckd",
            Method::Rkd => "rkd",
            Method::Dist => "dist",
            Method::MixupFixed => "mixup-fixed",
            Method::FitNets => "fitnets",
            Method::FitNetsCkd => "fitnets-ckd",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        Method::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                invalid(format!(
                    "unknown method '{s}' (expected one of: {})",
                    Method::ALL.map(|m| m.name()).join(", ")
                ))
            })
    }

    pub fn needs_teacher(self) -> bool {
        !matches!(self, Method::CeOnly)
    }

    /// Methods that need the teacher's intermediate representations.
    pub fn white_box(self) -> bool {
        matches!(self, Method::FitNets | Method::FitNetsCkd)
    }

    fn uses_groups(self) -> bool {
        matches!(self, Method::Ckd | Method::FitNetsCkd)
    }
}

/// When patience is counted: per epoch-end validation (default) or per
/// optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatienceUnit {
    Epochs,
    Steps,
}

/// Optimization-schedule knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Consecutive non-improving evaluations before a decay (or the stop).
    pub patience: usize,
    pub max_decays: usize,
    pub decay_factor: f64,
    /// Safety cap on epochs; a capped run still restores its best checkpoint.
    pub max_epochs: usize,
    pub patience_unit: PatienceUnit,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            batch_size: 64,
            momentum: 0.9,
            weight_decay: 5e-4,
            patience: 50,
            max_decays: 3,
            decay_factor: 0.1,
            max_epochs: 400,
            patience_unit: PatienceUnit::Epochs,
        }
    }
}

/// Full experiment description for one method at one budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    /// Teacher-call budget n; also the optimizer steps per epoch.
    pub budget: u64,
    pub student_widths: Vec<usize>,
    pub lr_grid: Vec<f64>,
    pub seeds: Vec<u64>,
    pub protocol: ProtocolConfig,
    pub ckd: CkdConfig,
    pub kd: KdConfig,
    pub rkd: RkdConfig,
    pub dist_inter_weight: f64,
    pub dist_intra_weight: f64,
    /// Weight of the auxiliary (KD/RKD/DIST) term added to cross-entropy.
    pub aux_weight: f64,
    /// Weight of the soft-target KL term in the mixup composite.
    pub mixup_kd_weight: f64,
    /// Weight of the hint regression term.
    pub fitnets_weight: f64,
    pub sampler_cap: u64,
    /// Parallel (lr, seed) runs in a sweep.
    pub jobs: usize,
}

impl TrainConfig {
    pub fn new(method: Method, budget: u64, student_widths: Vec<usize>) -> Self {
        TrainConfig {
            method,
            budget,
            student_widths,
            lr_grid: vec![0.1, 0.05, 0.025],
            seeds: vec![1, 2, 3],
            protocol: ProtocolConfig::default(),
            ckd: CkdConfig::default(),
            kd: KdConfig::default(),
            rkd: RkdConfig::default(),
            dist_inter_weight: 1.0,
            dist_intra_weight: 1.0,
            aux_weight: 1.0,
            mixup_kd_weight: 1.0,
            fitnets_weight: 1.0,
            sampler_cap: crate::sampler::DEFAULT_CAP,
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub lr: f64,
}

/// One comparative draw kept for replay audits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAudit {
    pub group_a: Vec<u64>,
    pub group_b: Vec<u64>,
    pub lambda1: f64,
    pub lambda2: f64,
}

/// Seeded, reproducible outcome of one training run. Equality ignores the
/// wall-clock field; everything else is a pure function of config and seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub method: Method,
    pub budget: u64,
    pub seed: u64,
    pub lr: f64,
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub test_accuracy: f64,
    pub decay_epochs: Vec<usize>,
    /// Validation accuracy recomputed right after each best-checkpoint
    /// restoration; must equal the stored best at that point.
    pub decay_resume_val_accs: Vec<f64>,
    pub teacher_calls: u64,
    pub optimizer_steps: u64,
    pub initial_weight_hash: u64,
    pub split_hash: u64,
    /// First comparative draws of the run (at most 100).
    pub group_audit: Vec<GroupAudit>,
    pub stopped_by_epoch_cap: bool,
    pub wall_clock_secs: f64,
}

impl PartialEq for RunResult {
    fn eq(&self, other: &Self) -> bool {
        self.method == other.method
            && self.budget == other.budget
            && self.seed == other.seed
            && self.lr == other.lr
            && self.epochs == other.epochs
            && self.best_epoch == other.best_epoch
            && self.best_val_accuracy == other.best_val_accuracy
            && self.test_accuracy == other.test_accuracy
            && self.decay_epochs == other.decay_epochs
            && self.decay_resume_val_accs == other.decay_resume_val_accs
            && self.teacher_calls == other.teacher_calls
            && self.optimizer_steps == other.optimizer_steps
            && self.initial_weight_hash == other.initial_weight_hash
            && self.split_hash == other.split_hash
            && self.group_audit == other.group_audit
            && self.stopped_by_epoch_cap == other.stopped_by_epoch_cap
    }
}

/// Everything a run needs besides its seed and learning rate.
pub struct RunContext<'a> {
    pub dataset: &'a Dataset,
    pub teacher: Option<Arc<dyn Teacher>>,
    pub config: &'a TrainConfig,
    /// Optional pre-warmed representations; preloaded entries are free hits.
    pub warm_cache: Option<crate::teacher::TeacherCache>,
    /// Accept a cache whose fingerprint does not match the teacher.
    pub allow_teacher_mismatch: bool,
}

impl<'a> RunContext<'a> {
    pub fn new(
        dataset: &'a Dataset,
        teacher: Option<Arc<dyn Teacher>>,
        config: &'a TrainConfig,
    ) -> Self {
        RunContext {
            dataset,
            teacher,
            config,
            warm_cache: None,
            allow_teacher_mismatch: false,
        }
    }
}

/// A finished run: the reproducible result record plus the trained weights
/// at the best checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedRun {
    pub result: RunResult,
    pub model: MlpModel,
    pub regressor: Option<AffineRegressor>,
}

// rng stream labels
const SELECT_STREAM: u64 = 1;
const INIT_STREAM: u64 = 2;
const REGRESSOR_STREAM: u64 = 3;
const TRAIN_STREAM: u64 = 4;

/// Cached teacher-side quantities for the selected training samples.
struct TeacherData {
    logits: BTreeMap<u64, Vec<f64>>,
    /// `softmax(z / T)` at the KD temperature, used by mixup targets.
    soft_probs: BTreeMap<u64, Vec<f64>>,
    hints: BTreeMap<u64, Vec<f64>>,
}

fn hash_split(train: &[u64], val: &[u64]) -> u64 {
    let mut w = PayloadWriter::new();
    for &id in train {
        w.u64(id);
    }
    w.u64(u64::MAX);
    for &id in val {
        w.u64(id);
    }
    fingerprint64(&w.finish())
}

/// Top-1 accuracy and mean CE loss of a model over labeled rows.
fn evaluate(model: &MlpModel, features: &Matrix, labels: &[usize]) -> Result<(f64, f64)> {
    let n = features.rows();
    if n == 0 {
        return Err(invalid("evaluation on an empty set"));
    }
    let mut correct = 0usize;
    let mut loss = 0.0;
    let chunk = 512;
    let mut row = 0;
    while row < n {
        let take = chunk.min(n - row);
        let mut block = Matrix::zeros(take, features.cols());
        for r in 0..take {
            block.row_mut(r).copy_from_slice(features.row(row + r));
        }
        let logits = model.forward_batch(&block)?;
        if !logits.is_finite() {
            return Err(Error::NumericalDivergence(
                "non-finite logits during evaluation".into(),
            ));
        }
        for r in 0..take {
            let z = logits.row(r);
            let label = labels[row + r];
            let pred = z
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            if pred == label {
                correct += 1;
            }
            loss += losses::ce_loss(z, label)?.value;
        }
        row += take;
    }
    Ok((correct as f64 / n as f64, loss / n as f64))
}

/// Early-stopping bookkeeping shared by student and teacher training.
struct ProtocolState {
    best_val: f64,
    best_epoch: usize,
    best_model: MlpModel,
    best_regressor: Option<AffineRegressor>,
    bad_evals: usize,
    decays_done: usize,
    decay_epochs: Vec<usize>,
    lr: f64,
}

enum ProtocolAction {
    Continue,
    /// Restore the best checkpoint and continue at the decayed rate.
    Decay,
    /// Decay budget exhausted: restore the best checkpoint and stop.
    Stop,
}

impl ProtocolState {
    fn new(initial_val: f64, model: &MlpModel, regressor: &Option<AffineRegressor>, lr: f64) -> Self {
        ProtocolState {
            best_val: initial_val,
            best_epoch: 0,
            best_model: model.clone(),
            best_regressor: regressor.clone(),
            bad_evals: 0,
            decays_done: 0,
            decay_epochs: Vec::new(),
            lr,
        }
    }

    fn observe(
        &mut self,
        epoch: usize,
        val_acc: f64,
        model: &MlpModel,
        regressor: &Option<AffineRegressor>,
        proto: &ProtocolConfig,
    ) -> ProtocolAction {
        if val_acc > self.best_val {
            self.best_val = val_acc;
            self.best_epoch = epoch;
            self.best_model = model.clone();
            self.best_regressor = regressor.clone();
            self.bad_evals = 0;
            return ProtocolAction::Continue;
        }
        self.bad_evals += 1;
        if self.bad_evals < proto.patience {
            return ProtocolAction::Continue;
        }
        self.bad_evals = 0;
        if self.decays_done >= proto.max_decays {
            return ProtocolAction::Stop;
        }
        self.decays_done += 1;
        self.decay_epochs.push(epoch);
        self.lr *= proto.decay_factor;
        ProtocolAction::Decay
    }
}

/// What one optimizer step consumes.
enum StepInput {
    Samples(Vec<u64>),
    Groups(Vec<ComparisonGroup>),
    /// Pairs share one mixing weight per batch.
    Pairs(Vec<ComparisonGroup>, f64),
}

/// Cycle a shuffled id list into `steps` batches of `batch` ids.
fn sample_batches(
    train_ids: &[u64],
    steps: usize,
    batch: usize,
    rng: &mut RngStream,
) -> Vec<Vec<u64>> {
    let mut order: Vec<u64> = Vec::with_capacity(steps * batch);
    while order.len() < steps * batch {
        let mut pass = train_ids.to_vec();
        rng.shuffle(&mut pass);
        order.extend(pass);
    }
    order.truncate(steps * batch);
    order.chunks(batch).map(|c| c.to_vec()).collect()
}

fn epoch_plan(
    method: Method,
    cfg: &TrainConfig,
    train_ids: &[u64],
    steps: usize,
    rng: &mut RngStream,
) -> Result<Vec<StepInput>> {
    let batch = cfg.protocol.batch_size;
    if method.uses_groups() {
        let sampler_cfg = SamplerConfig {
            k: cfg.ckd.k,
            cap: cfg.sampler_cap,
            seed: rng.next_u64(),
        };
        let groups = epoch_groups(train_ids, &sampler_cfg, steps * batch)?;
        Ok(groups
            .chunks(batch)
            .map(|c| StepInput::Groups(c.to_vec()))
            .collect())
    } else if method == Method::MixupFixed {
        let sampler_cfg = SamplerConfig {
            k: 2,
            cap: cfg.sampler_cap,
            seed: rng.next_u64(),
        };
        let pairs = epoch_groups(train_ids, &sampler_cfg, steps * batch)?;
        Ok(pairs
            .chunks(batch)
            .map(|c| StepInput::Pairs(c.to_vec(), rng.next_f64()))
            .collect())
    } else {
        Ok(sample_batches(train_ids, steps, batch, rng)
            .into_iter()
            .map(StepInput::Samples)
            .collect())
    }
}

/// Per-row cross-entropy over a logits matrix, mean-reduced; returns the
/// value and writes `softmax - onehot` rows (scaled by `1/rows`) into
/// `d_logits`.
fn batch_ce(
    logits: &Matrix,
    labels: &[usize],
    d_logits: &mut Matrix,
) -> Result<f64> {
    let rows = logits.rows();
    let scale = 1.0 / rows as f64;
    let mut total = 0.0;
    for r in 0..rows {
        let out = losses::ce_loss(logits.row(r), labels[r])?;
        total += out.value;
        for (d, g) in d_logits.row_mut(r).iter_mut().zip(&out.grads[0]) {
            *d += scale * g;
        }
    }
    Ok(total * scale)
}

struct StepState<'a> {
    model: &'a mut MlpModel,
    regressor: &'a mut Option<AffineRegressor>,
    sgd: &'a mut SgdState,
    sgd_reg: &'a mut Option<SgdState>,
}

/// Run one optimizer step; returns the step's training loss.
#[allow(clippy::too_many_arguments)]
fn execute_step(
    method: Method,
    cfg: &TrainConfig,
    dataset: &Dataset,
    teacher_data: Option<&TeacherData>,
    state: &mut StepState,
    lr: f64,
    input: &StepInput,
    cmp_rng: &mut RngStream,
    audit: &mut Vec<GroupAudit>,
) -> Result<f64> {
    let proto = &cfg.protocol;
    let teacher_logits_of = |id: u64| -> Result<&Vec<f64>> {
        teacher_data
            .ok_or_else(|| invalid("method requires a teacher"))?
            .logits
            .get(&id)
            .ok_or_else(|| invalid(format!("no cached teacher logits for sample {id}")))
    };

    let (loss_value, grads, reg_grads) = match (method, input) {
        (Method::CeOnly | Method::Kd | Method::Rkd | Method::Dist, StepInput::Samples(ids)) => {
            let x = dataset.feature_batch(ids)?;
            let labels = dataset.label_batch(ids)?;
            let trace = state.model.forward_batch_trace(&x)?;
            let logits = trace.logits();
            if !logits.is_finite() {
                return Err(Error::NumericalDivergence("non-finite logits".into()));
            }
            let rows = logits.rows();
            let mut d_logits = Matrix::zeros(rows, logits.cols());
            let mut value = batch_ce(logits, &labels, &mut d_logits)?;
            match method {
                Method::Kd => {
                    let scale = cfg.aux_weight / rows as f64;
                    for (r, &id) in ids.iter().enumerate() {
                        let out = losses::kd_loss(logits.row(r), teacher_logits_of(id)?, &cfg.kd)?;
                        value += scale * out.value;
                        for (d, g) in d_logits.row_mut(r).iter_mut().zip(&out.grads[0]) {
                            *d += scale * g;
                        }
                    }
                }
                Method::Rkd | Method::Dist => {
                    let mut teacher_batch = Matrix::zeros(rows, logits.cols());
                    for (r, &id) in ids.iter().enumerate() {
                        teacher_batch.row_mut(r).copy_from_slice(teacher_logits_of(id)?);
                    }
                    let out = if method == Method::Rkd {
                        losses::rkd_loss(logits, &teacher_batch, &cfg.rkd)?
                    } else {
                        losses::dist_loss(
                            logits,
                            &teacher_batch,
                            &cfg.kd,
                            cfg.dist_inter_weight,
                            cfg.dist_intra_weight,
                        )?
                    };
                    value += cfg.aux_weight * out.value;
                    for (r, g) in out.grads.iter().enumerate() {
                        for (d, &v) in d_logits.row_mut(r).iter_mut().zip(g) {
                            *d += cfg.aux_weight * v;
                        }
                    }
                }
                _ => {}
            }
            let grads = state.model.backward(&trace, &d_logits, None)?;
            (value, grads, None)
        }

        (Method::MixupFixed, StepInput::Pairs(pairs, lambda)) => {
            let data = teacher_data.ok_or_else(|| invalid("mixup requires a teacher"))?;
            let c = dataset.num_classes;
            let mut x = Matrix::zeros(pairs.len(), dataset.dim);
            let mut targets_soft = Vec::with_capacity(pairs.len());
            let mut targets_kd = Vec::with_capacity(pairs.len());
            for (r, pair) in pairs.iter().enumerate() {
                let (i, j) = (pair.group_a[0], pair.group_b[0]);
                let example = losses::mixup_fixed_pair(
                    dataset.features_of(i).ok_or_else(|| invalid("bad id"))?,
                    dataset.features_of(j).ok_or_else(|| invalid("bad id"))?,
                    data.soft_probs.get(&i).ok_or_else(|| invalid("no probs"))?,
                    data.soft_probs.get(&j).ok_or_else(|| invalid("no probs"))?,
                    dataset.label_of(i).unwrap(),
                    dataset.label_of(j).unwrap(),
                    *lambda,
                    c,
                )?;
                if audit.len() < 100 {
                    audit.push(GroupAudit {
                        group_a: pair.group_a.clone(),
                        group_b: pair.group_b.clone(),
                        lambda1: *lambda,
                        lambda2: 1.0 - *lambda,
                    });
                }
                x.row_mut(r).copy_from_slice(&example.x_mix);
                targets_soft.push(example.y_soft);
                targets_kd.push(example.p_target);
            }
            let trace = state.model.forward_batch_trace(&x)?;
            let logits = trace.logits();
            if !logits.is_finite() {
                return Err(Error::NumericalDivergence("non-finite logits".into()));
            }
            let rows = logits.rows();
            let scale = 1.0 / rows as f64;
            let mut d_logits = Matrix::zeros(rows, c);
            let mut value = 0.0;
            for r in 0..rows {
                let ce = losses::ce_soft_loss(logits.row(r), &targets_soft[r])?;
                let kd = losses::kd_loss_soft_target(logits.row(r), &targets_kd[r], &cfg.kd)?;
                value += scale * (ce.value + cfg.mixup_kd_weight * kd.value);
                for ((d, cg), kg) in d_logits
                    .row_mut(r)
                    .iter_mut()
                    .zip(&ce.grads[0])
                    .zip(&kd.grads[0])
                {
                    *d += scale * (cg + cfg.mixup_kd_weight * kg);
                }
            }
            let grads = state.model.backward(&trace, &d_logits, None)?;
            (value, grads, None)
        }

        (Method::Ckd, StepInput::Groups(groups)) => {
            let (union, row_of) = union_rows(groups);
            let x = dataset.feature_batch(&union)?;
            let labels = dataset.label_batch(&union)?;
            let trace = state.model.forward_batch_trace(&x)?;
            let logits = trace.logits();
            if !logits.is_finite() {
                return Err(Error::NumericalDivergence("non-finite logits".into()));
            }
            let mut d_logits = Matrix::zeros(logits.rows(), logits.cols());
            // cross-entropy applies once to each distinct sample in the step
            let mut value = batch_ce(logits, &labels, &mut d_logits)?;
            let data = teacher_data.ok_or_else(|| invalid("ckd requires a teacher"))?;
            let group_scale = cfg.ckd.beta / groups.len() as f64;
            for group in groups {
                let cmp = cfg.ckd.comparison.resolve(cmp_rng);
                if audit.len() < 100 {
                    audit.push(GroupAudit {
                        group_a: group.group_a.clone(),
                        group_b: group.group_b.clone(),
                        lambda1: cmp.lambda1,
                        lambda2: cmp.lambda2,
                    });
                }
                let s_a: Vec<&[f64]> = group.group_a.iter().map(|id| logits.row(row_of[id])).collect();
                let s_b: Vec<&[f64]> = group.group_b.iter().map(|id| logits.row(row_of[id])).collect();
                let t_a: Vec<&[f64]> = group
                    .group_a
                    .iter()
                    .map(|id| data.logits[id].as_slice())
                    .collect();
                let t_b: Vec<&[f64]> = group
                    .group_b
                    .iter()
                    .map(|id| data.logits[id].as_slice())
                    .collect();
                let out = losses::ckd_group_loss(&s_a, &s_b, &t_a, &t_b, &cmp, &cfg.ckd)?;
                value += group_scale * out.value;
                for (member, g) in group
                    .group_a
                    .iter()
                    .chain(&group.group_b)
                    .zip(&out.grads)
                {
                    let row = d_logits.row_mut(row_of[member]);
                    for (d, &v) in row.iter_mut().zip(g) {
                        *d += group_scale * v;
                    }
                }
            }
            let grads = state.model.backward(&trace, &d_logits, None)?;
            (value, grads, None)
        }

        (Method::FitNets, StepInput::Samples(ids)) => {
            let data = teacher_data.ok_or_else(|| invalid("fitnets requires a teacher"))?;
            let x = dataset.feature_batch(ids)?;
            let labels = dataset.label_batch(ids)?;
            let trace = state.model.forward_batch_trace(&x)?;
            let logits = trace.logits();
            if !logits.is_finite() {
                return Err(Error::NumericalDivergence("non-finite logits".into()));
            }
            let rows = logits.rows();
            let mut d_logits = Matrix::zeros(rows, logits.cols());
            let mut value = batch_ce(logits, &labels, &mut d_logits)?;
            let regressor = state
                .regressor
                .as_ref()
                .ok_or_else(|| invalid("fitnets requires a regressor"))?;
            let tap = trace.tap();
            let mut d_tap = Matrix::zeros(tap.rows(), tap.cols());
            let mut d_reg_w = vec![0.0; regressor.weight.rows() * regressor.weight.cols()];
            let mut d_reg_b = vec![0.0; regressor.bias.len()];
            let scale = cfg.fitnets_weight / rows as f64;
            for (r, &id) in ids.iter().enumerate() {
                let hint = data
                    .hints
                    .get(&id)
                    .ok_or_else(|| invalid(format!("no cached hint for sample {id}")))?;
                let out = losses::fitnets_hint_loss(tap.row(r), hint, regressor)?;
                value += scale * out.value;
                for (d, &g) in d_tap.row_mut(r).iter_mut().zip(&out.grads[0]) {
                    *d += scale * g;
                }
                for (d, &g) in d_reg_w.iter_mut().zip(&out.grads[1]) {
                    *d += scale * g;
                }
                for (d, &g) in d_reg_b.iter_mut().zip(&out.grads[2]) {
                    *d += scale * g;
                }
            }
            let grads = state.model.backward(&trace, &d_logits, Some(&d_tap))?;
            (value, grads, Some((d_reg_w, d_reg_b)))
        }

        (Method::FitNetsCkd, StepInput::Groups(groups)) => {
            let data = teacher_data.ok_or_else(|| invalid("fitnets-ckd requires a teacher"))?;
            let (union, row_of) = union_rows(groups);
            let x = dataset.feature_batch(&union)?;
            let labels = dataset.label_batch(&union)?;
            let trace = state.model.forward_batch_trace(&x)?;
            let logits = trace.logits();
            if !logits.is_finite() {
                return Err(Error::NumericalDivergence("non-finite logits".into()));
            }
            let rows = logits.rows();
            let mut d_logits = Matrix::zeros(rows, logits.cols());
            let mut value = batch_ce(logits, &labels, &mut d_logits)?;
            let regressor = state
                .regressor
                .as_ref()
                .ok_or_else(|| invalid("fitnets-ckd requires a regressor"))?;
            let tap = trace.tap();
            let mut d_tap = Matrix::zeros(tap.rows(), tap.cols());
            let mut d_reg_w = vec![0.0; regressor.weight.rows() * regressor.weight.cols()];
            let mut d_reg_b = vec![0.0; regressor.bias.len()];

            // hint regression term, once per distinct sample
            let hint_scale = cfg.fitnets_weight / rows as f64;
            for (r, &id) in union.iter().enumerate() {
                let hint = data
                    .hints
                    .get(&id)
                    .ok_or_else(|| invalid(format!("no cached hint for sample {id}")))?;
                let out = losses::fitnets_hint_loss(tap.row(r), hint, regressor)?;
                value += hint_scale * out.value;
                for (d, &g) in d_tap.row_mut(r).iter_mut().zip(&out.grads[0]) {
                    *d += hint_scale * g;
                }
                for (d, &g) in d_reg_w.iter_mut().zip(&out.grads[1]) {
                    *d += hint_scale * g;
                }
                for (d, &g) in d_reg_b.iter_mut().zip(&out.grads[2]) {
                    *d += hint_scale * g;
                }
            }

            // comparative term on projected features vs teacher hints
            let projected: Vec<Vec<f64>> = (0..rows)
                .map(|r| regressor.forward(tap.row(r)))
                .collect::<Result<_>>()?;
            let mut d_projected = Matrix::zeros(rows, regressor.out_dim());
            let group_scale = cfg.ckd.beta / groups.len() as f64;
            for group in groups {
                let cmp = cfg.ckd.comparison.resolve(cmp_rng);
                if audit.len() < 100 {
                    audit.push(GroupAudit {
                        group_a: group.group_a.clone(),
                        group_b: group.group_b.clone(),
                        lambda1: cmp.lambda1,
                        lambda2: cmp.lambda2,
                    });
                }
                let s_a: Vec<&[f64]> = group
                    .group_a
                    .iter()
                    .map(|id| projected[row_of[id]].as_slice())
                    .collect();
                let s_b: Vec<&[f64]> = group
                    .group_b
                    .iter()
                    .map(|id| projected[row_of[id]].as_slice())
                    .collect();
                let t_a: Vec<&[f64]> = group
                    .group_a
                    .iter()
                    .map(|id| data.hints[id].as_slice())
                    .collect();
                let t_b: Vec<&[f64]> = group
                    .group_b
                    .iter()
                    .map(|id| data.hints[id].as_slice())
                    .collect();
                let out = losses::ckd_on_features(&s_a, &s_b, &t_a, &t_b, &cmp, &cfg.ckd)?;
                value += group_scale * out.value;
                for (member, g) in group
                    .group_a
                    .iter()
                    .chain(&group.group_b)
                    .zip(&out.grads)
                {
                    let row = d_projected.row_mut(row_of[member]);
                    for (d, &v) in row.iter_mut().zip(g) {
                        *d += group_scale * v;
                    }
                }
            }
            // chain the projected-feature gradient through the regressor
            for r in 0..rows {
                if d_projected.row(r).iter().all(|&v| v == 0.0) {
                    continue;
                }
                let (d_in, d_w, d_b) = regressor.backward(tap.row(r), d_projected.row(r));
                for (d, &g) in d_tap.row_mut(r).iter_mut().zip(&d_in) {
                    *d += g;
                }
                for (d, &g) in d_reg_w.iter_mut().zip(&d_w) {
                    *d += g;
                }
                for (d, &g) in d_reg_b.iter_mut().zip(&d_b) {
                    *d += g;
                }
            }
            let grads = state.model.backward(&trace, &d_logits, Some(&d_tap))?;
            (value, grads, Some((d_reg_w, d_reg_b)))
        }

        (m, _) => {
            return Err(invalid(format!(
                "internal: step input does not match method {}",
                m.name()
            )))
        }
    };

    state.sgd.step_model(
        state.model,
        &grads,
        lr,
        proto.momentum,
        proto.weight_decay,
    );
    if let (Some((d_w, d_b)), Some(reg), Some(sgd_reg)) =
        (reg_grads, state.regressor.as_mut(), state.sgd_reg.as_mut())
    {
        sgd_update(
            reg.weight.data_mut(),
            &d_w,
            sgd_reg.block_mut(0),
            lr,
            proto.momentum,
            proto.weight_decay,
        );
        sgd_update(
            &mut reg.bias,
            &d_b,
            sgd_reg.block_mut(1),
            lr,
            proto.momentum,
            proto.weight_decay,
        );
    }
    if !loss_value.is_finite() {
        return Err(Error::NumericalDivergence(format!(
            "training loss is {loss_value}"
        )));
    }
    Ok(loss_value)
}

fn union_rows(groups: &[ComparisonGroup]) -> (Vec<u64>, BTreeMap<u64, usize>) {
    let mut set = BTreeSet::new();
    for g in groups {
        set.extend(g.group_a.iter().copied());
        set.extend(g.group_b.iter().copied());
    }
    let union: Vec<u64> = set.into_iter().collect();
    let row_of = union
        .iter()
        .enumerate()
        .map(|(r, &id)| (id, r))
        .collect();
    (union, row_of)
}

/// Train one student under one (seed, lr). For a fixed seed, sample
/// selection, the train/val split, and the initial weights are identical
/// across methods and learning rates.
pub fn train_one(ctx: &RunContext, seed: u64, lr: f64) -> Result<TrainedRun> {
    let started = Instant::now();
    let cfg = ctx.config;
    let dataset = ctx.dataset;
    let proto = &cfg.protocol;
    if lr < 0.0 {
        return Err(invalid("learning rate must be nonnegative"));
    }
    if cfg.student_widths.first() != Some(&dataset.dim)
        || cfg.student_widths.last() != Some(&dataset.num_classes)
    {
        return Err(invalid(format!(
            "student widths {:?} do not match dataset ({} -> {})",
            cfg.student_widths, dataset.dim, dataset.num_classes
        )));
    }
    let n = cfg.budget as usize;
    let pool = dataset.pool_ids();
    if n < 2 || n > pool.len() {
        return Err(invalid(format!(
            "budget {n} outside [2, {}] (pool size)",
            pool.len()
        )));
    }

    let root = RngStream::new(seed);

    // Budgeted sample selection and 80-20 split; a pure function of the seed.
    let mut selection = pool;
    root.split(SELECT_STREAM).shuffle(&mut selection);
    selection.truncate(n);
    let train_count = (n * 4) / 5;
    if train_count == 0 || train_count == n {
        return Err(invalid(format!("budget {n} cannot be split 80-20")));
    }
    let mut train_ids: Vec<u64> = selection[..train_count].to_vec();
    let mut val_ids: Vec<u64> = selection[train_count..].to_vec();
    train_ids.sort_unstable();
    val_ids.sort_unstable();
    let split_hash = hash_split(&train_ids, &val_ids);

    // Teacher warm-up: one budgeted call per distinct training sample, in id
    // order; validation and test samples never touch the teacher.
    let mut teacher_calls = 0;
    let teacher_data = if cfg.method.needs_teacher() {
        let teacher = ctx
            .teacher
            .clone()
            .ok_or_else(|| invalid(format!("method {} requires a teacher", cfg.method.name())))?;
        if teacher.num_classes() != dataset.num_classes {
            return Err(invalid(format!(
                "teacher has {} classes, dataset has {}",
                teacher.num_classes(),
                dataset.num_classes
            )));
        }
        let white_box = cfg.method.white_box();
        let mut oracle = match &ctx.warm_cache {
            Some(cache) => TeacherOracle::from_cache(
                teacher,
                cache.clone(),
                cfg.budget,
                ctx.allow_teacher_mismatch,
            )?,
            None => TeacherOracle::new(teacher, cfg.budget, white_box)?,
        };
        if white_box && !oracle.white_box() {
            return Err(invalid(
                "white-box method but the supplied cache has no hints",
            ));
        }
        let mut logits = BTreeMap::new();
        let mut soft_probs = BTreeMap::new();
        let mut hints = BTreeMap::new();
        for &id in &train_ids {
            let x = dataset
                .features_of(id)
                .ok_or_else(|| invalid(format!("unknown sample id {id}")))?;
            let rep = oracle.query(id, x, white_box)?;
            soft_probs.insert(
                id,
                math::stable_softmax_temp(&rep.logits, cfg.kd.temperature)?,
            );
            logits.insert(id, rep.logits);
            if let Some(h) = rep.hint {
                hints.insert(id, h);
            }
        }
        teacher_calls = oracle.ledger().used();
        Some(TeacherData {
            logits,
            soft_probs,
            hints,
        })
    } else {
        None
    };

    // Same-seed rule: weights come from a stream independent of the method;
    // the regressor draws from its own stream so tapped methods leave the
    // model initialization unchanged.
    let mut init_rng = root.split(INIT_STREAM);
    let mut model = MlpModel::init(&cfg.student_widths, &mut init_rng)?;
    let initial_weight_hash = model.fingerprint();
    let mut regressor = if cfg.method.white_box() {
        let hint_dim = teacher_data
            .as_ref()
            .and_then(|d| d.hints.values().next())
            .map(|h| h.len())
            .ok_or_else(|| invalid("white-box method but teacher produced no hints"))?;
        let mut reg_rng = root.split(REGRESSOR_STREAM);
        Some(AffineRegressor::init(model.tap_dim(), hint_dim, &mut reg_rng))
    } else {
        None
    };

    let mut sgd = SgdState::for_model(&model);
    let mut sgd_reg = regressor.as_ref().map(|r| {
        SgdState::for_shapes(&[r.weight.rows() * r.weight.cols(), r.bias.len()])
    });

    let val_x = dataset.feature_batch(&val_ids)?;
    let val_y = dataset.label_batch(&val_ids)?;
    let test_ids = dataset.test_ids();
    let test_x = dataset.feature_batch(&test_ids)?;
    let test_y = dataset.label_batch(&test_ids)?;

    let (initial_val_acc, _) = evaluate(&model, &val_x, &val_y)?;
    let mut protocol_state = ProtocolState::new(initial_val_acc, &model, &regressor, lr);

    let train_rng = root.split(TRAIN_STREAM);
    let steps_per_epoch = n;
    let mut epochs = Vec::new();
    let mut decay_resume_val_accs = Vec::new();
    let mut audit = Vec::new();
    let mut optimizer_steps = 0u64;
    let mut stopped_by_epoch_cap = true;

    'training: for epoch in 1..=proto.max_epochs {
        let mut epoch_rng = train_rng.split(epoch as u64);
        let plan = epoch_plan(cfg.method, cfg, &train_ids, steps_per_epoch, &mut epoch_rng)?;
        let mut cmp_rng = epoch_rng.split(1);
        let mut loss_sum = 0.0;
        let mut stop_after_epoch = false;
        for input in &plan {
            let mut state = StepState {
                model: &mut model,
                regressor: &mut regressor,
                sgd: &mut sgd,
                sgd_reg: &mut sgd_reg,
            };
            loss_sum += execute_step(
                cfg.method,
                cfg,
                dataset,
                teacher_data.as_ref(),
                &mut state,
                protocol_state.lr,
                input,
                &mut cmp_rng,
                &mut audit,
            )?;
            optimizer_steps += 1;
            if proto.patience_unit == PatienceUnit::Steps {
                let (val_acc, _) = evaluate(&model, &val_x, &val_y)?;
                match protocol_state.observe(epoch, val_acc, &model, &regressor, proto) {
                    ProtocolAction::Continue => {}
                    ProtocolAction::Decay => {
                        model = protocol_state.best_model.clone();
                        regressor = protocol_state.best_regressor.clone();
                        sgd.reset();
                        if let Some(s) = sgd_reg.as_mut() {
                            s.reset();
                        }
                        let (resumed, _) = evaluate(&model, &val_x, &val_y)?;
                        decay_resume_val_accs.push(resumed);
                    }
                    ProtocolAction::Stop => {
                        stop_after_epoch = true;
                    }
                }
                if stop_after_epoch {
                    break;
                }
            }
        }
        let (val_acc, val_loss) = evaluate(&model, &val_x, &val_y)?;
        epochs.push(EpochMetrics {
            epoch,
            train_loss: loss_sum / steps_per_epoch as f64,
            val_loss,
            val_accuracy: val_acc,
            lr: protocol_state.lr,
        });
        if proto.patience_unit == PatienceUnit::Epochs {
            match protocol_state.observe(epoch, val_acc, &model, &regressor, proto) {
                ProtocolAction::Continue => {}
                ProtocolAction::Decay => {
                    model = protocol_state.best_model.clone();
                    regressor = protocol_state.best_regressor.clone();
                    sgd.reset();
                    if let Some(s) = sgd_reg.as_mut() {
                        s.reset();
                    }
                    let (resumed, _) = evaluate(&model, &val_x, &val_y)?;
                    decay_resume_val_accs.push(resumed);
                }
                ProtocolAction::Stop => {
                    stopped_by_epoch_cap = false;
                    break 'training;
                }
            }
        } else if stop_after_epoch {
            stopped_by_epoch_cap = false;
            break 'training;
        }
    }

    // Final restore: results are always reported at the best checkpoint.
    model = protocol_state.best_model.clone();
    regressor = protocol_state.best_regressor.clone();
    let (test_accuracy, _) = evaluate(&model, &test_x, &test_y)?;

    let result = RunResult {
        method: cfg.method,
        budget: cfg.budget,
        seed,
        lr,
        epochs,
        best_epoch: protocol_state.best_epoch,
        best_val_accuracy: protocol_state.best_val,
        test_accuracy,
        decay_epochs: protocol_state.decay_epochs,
        decay_resume_val_accs,
        teacher_calls,
        optimizer_steps,
        initial_weight_hash,
        split_hash,
        group_audit: audit,
        stopped_by_epoch_cap,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok(TrainedRun {
        result,
        model,
        regressor,
    })
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Sweep outcome: all runs, the selected learning rate, and test-accuracy
/// statistics at that rate.
#[derive(Debug, Clone)]
pub struct SweepResult {
    pub runs: Vec<TrainedRun>,
    /// Mean validation accuracy across seeds, per learning rate.
    pub val_mean_by_lr: Vec<(f64, f64)>,
    pub best_lr: f64,
    pub test_mean: f64,
    pub test_std: f64,
}

impl SweepResult {
    pub fn results(&self) -> Vec<&RunResult> {
        self.runs.iter().map(|r| &r.result).collect()
    }

    /// Runs at the selected learning rate, in seed order.
    pub fn best_runs(&self) -> Vec<&TrainedRun> {
        self.runs
            .iter()
            .filter(|r| r.result.lr == self.best_lr)
            .collect()
    }
}

/// Run every (lr, seed) pair and select the learning rate with the highest
/// mean validation accuracy across seeds (ties go to the larger rate). Runs
/// execute on up to `config.jobs` worker threads; outputs are ordered and
/// deterministic regardless of scheduling.
pub fn train_sweep(ctx: &RunContext) -> Result<SweepResult> {
    let cfg = ctx.config;
    if cfg.lr_grid.is_empty() || cfg.seeds.is_empty() {
        return Err(invalid("sweep needs at least one learning rate and one seed"));
    }
    let tasks: Vec<(f64, u64)> = cfg
        .lr_grid
        .iter()
        .flat_map(|&lr| cfg.seeds.iter().map(move |&s| (lr, s)))
        .collect();
    let jobs = cfg.jobs.max(1).min(tasks.len());
    let results: Vec<Option<Result<TrainedRun>>> = {
        let slots: Mutex<Vec<Option<Result<TrainedRun>>>> =
            Mutex::new((0..tasks.len()).map(|_| None).collect());
        let next = AtomicUsize::new(0);
        std::thread::scope(|scope| {
            for _ in 0..jobs {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= tasks.len() {
                        break;
                    }
                    let (lr, seed) = tasks[i];
                    let out = train_one(ctx, seed, lr);
                    slots.lock().unwrap()[i] = Some(out);
                });
            }
        });
        slots.into_inner().unwrap()
    };
    let mut runs = Vec::with_capacity(tasks.len());
    for slot in results {
        runs.push(slot.expect("worker filled every slot")?);
    }

    let mut val_mean_by_lr = Vec::new();
    for &lr in &cfg.lr_grid {
        let vals: Vec<f64> = runs
            .iter()
            .filter(|r| r.result.lr == lr)
            .map(|r| r.result.best_val_accuracy)
            .collect();
        val_mean_by_lr.push((lr, mean_std(&vals).0));
    }
    // argmax with ties broken toward the larger learning rate
    let mut best_lr = val_mean_by_lr[0].0;
    let mut best_val = f64::NEG_INFINITY;
    for &(lr, val) in &val_mean_by_lr {
        if val > best_val || (val == best_val && lr > best_lr) {
            best_val = val;
            best_lr = lr;
        }
    }
    let tests: Vec<f64> = runs
        .iter()
        .filter(|r| r.result.lr == best_lr)
        .map(|r| r.result.test_accuracy)
        .collect();
    let (test_mean, test_std) = mean_std(&tests);
    Ok(SweepResult {
        runs,
        val_mean_by_lr,
        best_lr,
        test_mean,
        test_std,
    })
}

/// Teacher-training schedule: standard epochs (one pass over the training
/// split), otherwise the same early-stopping/decay protocol.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TeacherProtocol {
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub patience: usize,
    pub max_decays: usize,
    pub decay_factor: f64,
    pub max_epochs: usize,
    /// Fraction of the pool used for training (the rest validates).
    pub train_fraction: f64,
}

impl Default for TeacherProtocol {
    fn default() -> Self {
        TeacherProtocol {
            lr: 0.05,
            batch_size: 64,
            momentum: 0.9,
            weight_decay: 5e-4,
            patience: 10,
            max_decays: 3,
            decay_factor: 0.1,
            max_epochs: 150,
            train_fraction: 0.8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TeacherTrainReport {
    pub model: MlpModel,
    pub best_val_accuracy: f64,
    pub test_accuracy: f64,
    pub epochs_run: usize,
    pub decay_epochs: Vec<usize>,
}

/// Train a teacher with plain cross-entropy on the full training pool (no
/// budget applies to the teacher's own training data).
pub fn train_teacher(
    dataset: &Dataset,
    widths: &[usize],
    seed: u64,
    proto: &TeacherProtocol,
) -> Result<TeacherTrainReport> {
    if widths.first() != Some(&dataset.dim) || widths.last() != Some(&dataset.num_classes) {
        return Err(invalid(format!(
            "teacher widths {:?} do not match dataset ({} -> {})",
            widths, dataset.dim, dataset.num_classes
        )));
    }
    let root = RngStream::new(seed);
    let mut pool = dataset.pool_ids();
    root.split(SELECT_STREAM).shuffle(&mut pool);
    let train_count = ((pool.len() as f64) * proto.train_fraction).round() as usize;
    if train_count == 0 || train_count == pool.len() {
        return Err(invalid("pool too small to split for teacher training"));
    }
    let train_ids: Vec<u64> = pool[..train_count].to_vec();
    let val_ids: Vec<u64> = pool[train_count..].to_vec();

    let mut init_rng = root.split(INIT_STREAM);
    let mut model = MlpModel::init(widths, &mut init_rng)?;
    let mut sgd = SgdState::for_model(&model);
    let none_reg: Option<AffineRegressor> = None;

    let val_x = dataset.feature_batch(&val_ids)?;
    let val_y = dataset.label_batch(&val_ids)?;
    let (initial_val, _) = evaluate(&model, &val_x, &val_y)?;
    let mut state = ProtocolState::new(initial_val, &model, &none_reg, proto.lr);

    let train_rng = root.split(TRAIN_STREAM);
    let mut epochs_run = 0;
    for epoch in 1..=proto.max_epochs {
        epochs_run = epoch;
        let mut epoch_rng = train_rng.split(epoch as u64);
        let mut order = train_ids.clone();
        epoch_rng.shuffle(&mut order);
        for chunk in order.chunks(proto.batch_size) {
            let x = dataset.feature_batch(chunk)?;
            let labels = dataset.label_batch(chunk)?;
            let trace = model.forward_batch_trace(&x)?;
            let logits = trace.logits();
            if !logits.is_finite() {
                return Err(Error::NumericalDivergence(
                    "non-finite logits in teacher training".into(),
                ));
            }
            let mut d_logits = Matrix::zeros(logits.rows(), logits.cols());
            batch_ce(logits, &labels, &mut d_logits)?;
            let grads = model.backward(&trace, &d_logits, None)?;
            sgd.step_model(&mut model, &grads, state.lr, proto.momentum, proto.weight_decay);
        }
        let (val_acc, _) = evaluate(&model, &val_x, &val_y)?;
        let pc = ProtocolConfig {
            batch_size: proto.batch_size,
            momentum: proto.momentum,
            weight_decay: proto.weight_decay,
            patience: proto.patience,
            max_decays: proto.max_decays,
            decay_factor: proto.decay_factor,
            max_epochs: proto.max_epochs,
            patience_unit: PatienceUnit::Epochs,
        };
        match state.observe(epoch, val_acc, &model, &none_reg, &pc) {
            ProtocolAction::Continue => {}
            ProtocolAction::Decay => {
                model = state.best_model.clone();
                sgd.reset();
            }
            ProtocolAction::Stop => break,
        }
    }
    model = state.best_model.clone();
    let test_ids = dataset.test_ids();
    let test_x = dataset.feature_batch(&test_ids)?;
    let test_y = dataset.label_batch(&test_ids)?;
    let (test_accuracy, _) = evaluate(&model, &test_x, &test_y)?;
    Ok(TeacherTrainReport {
        model,
        best_val_accuracy: state.best_val,
        test_accuracy,
        epochs_run,
        decay_epochs: state.decay_epochs,
    })
}

#[cfg(test)]
mod tests;
