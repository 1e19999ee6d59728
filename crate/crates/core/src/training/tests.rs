use super::*;
use crate::dataset::{generate_synthetic, SyntheticSpec};

fn toy_dataset(seed: u64) -> Dataset {
    generate_synthetic(&SyntheticSpec {
        classes: 3,
        dim: 4,
        per_class: 40,
        noise: 0.4,
        separation: 3.0,
        test_fraction: 0.25,
        seed,
    })
    .unwrap()
}

fn toy_teacher(dataset: &Dataset) -> Arc<dyn Teacher> {
    // an untrained model is a perfectly good teacher for protocol tests
    let model = MlpModel::init(&[dataset.dim, 8, dataset.num_classes], &mut RngStream::new(99))
        .unwrap();
    Arc::new(MlpTeacher::new(model))
}

fn quick_config(method: Method, budget: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(method, budget, vec![4, 6, 3]);
    cfg.protocol.max_epochs = 3;
    cfg.protocol.patience = 2;
    cfg.lr_grid = vec![0.05];
    cfg.seeds = vec![1];
    cfg
}

#[test]
fn steps_per_epoch_equal_budget_for_every_method() {
    let ds = toy_dataset(1);
    let teacher = toy_teacher(&ds);
    for method in [Method::CeOnly, Method::Kd, Method::Ckd, Method::Rkd, Method::Dist, Method::MixupFixed] {
        let mut cfg = quick_config(method, 20);
        cfg.protocol.batch_size = 8;
        cfg.protocol.max_epochs = 2;
        let ctx = RunContext::new(&ds, Some(teacher.clone()), &cfg);
        let result = train_one(&ctx, 1, 0.05).unwrap().result;
        assert_eq!(
            result.optimizer_steps,
            2 * 20,
            "method {} ran {} steps",
            method.name(),
            result.optimizer_steps
        );
    }
}

#[test]
fn same_seed_same_selection_and_weights_across_methods() {
    let ds = toy_dataset(2);
    let teacher = toy_teacher(&ds);
    let mut hashes = Vec::new();
    for method in [Method::CeOnly, Method::Kd, Method::Ckd, Method::Dist] {
        let mut cfg = quick_config(method, 20);
        cfg.protocol.batch_size = 8;
        cfg.protocol.max_epochs = 1;
        let ctx = RunContext::new(&ds, Some(teacher.clone()), &cfg);
        let result = train_one(&ctx, 7, 0.05).unwrap().result;
        hashes.push((result.initial_weight_hash, result.split_hash));
    }
    assert!(hashes.windows(2).all(|w| w[0] == w[1]), "{hashes:?}");
}

#[test]
fn identical_invocations_are_bit_identical() {
    let ds = toy_dataset(3);
    let teacher = toy_teacher(&ds);
    let cfg = quick_config(Method::Ckd, 16);
    let ctx = RunContext::new(&ds, Some(teacher.clone()), &cfg);
    let a = train_one(&ctx, 2, 0.05).unwrap();
    let b = train_one(&ctx, 2, 0.05).unwrap();
    assert_eq!(a, b); // models bitwise, results modulo wall clock
    assert!(a.result.wall_clock_secs >= 0.0);
}

#[test]
fn budget_ceiling_holds_and_hits_are_free() {
    let ds = toy_dataset(4);
    let teacher = toy_teacher(&ds);
    let cfg = quick_config(Method::Kd, 20);
    let ctx = RunContext::new(&ds, Some(teacher.clone()), &cfg);
    let result = train_one(&ctx, 1, 0.05).unwrap().result;
    // warm-up touches each distinct training sample exactly once
    assert_eq!(result.teacher_calls, 16); // 80% of 20
    assert!(result.teacher_calls <= cfg.budget);
}

#[test]
fn frozen_run_traces_the_decay_protocol() {
    let ds = toy_dataset(5);
    let mut cfg = quick_config(Method::CeOnly, 10);
    cfg.protocol.patience = 3;
    cfg.protocol.max_epochs = 50;
    cfg.protocol.batch_size = 8;
    let ctx = RunContext::new(&ds, None, &cfg);
    // lr = 0 freezes the weights, so validation accuracy never improves
    let result = train_one(&ctx, 1, 0.0).unwrap().result;
    assert_eq!(result.decay_epochs, vec![3, 6, 9]);
    assert_eq!(result.epochs.len(), 12);
    assert!(!result.stopped_by_epoch_cap);
    assert_eq!(result.best_epoch, 0);
    // restoration lands exactly on the recorded best metric
    for resumed in &result.decay_resume_val_accs {
        assert_eq!(*resumed, result.best_val_accuracy);
    }
    // lr decays by 0.1 at each trigger
    let lrs: Vec<f64> = result.epochs.iter().map(|e| e.lr).collect();
    assert_eq!(lrs[0], 0.0);
}

#[test]
fn ckd_with_copied_teacher_reduces_to_plain_ce() {
    // student == teacher weights: the comparative term vanishes, so the step
    // loss equals the cross-entropy over the union of group members.
    let ds = toy_dataset(6);
    let student = MlpModel::init(&[4, 6, 3], &mut RngStream::new(11)).unwrap();
    let teacher_model = student.clone();

    let train_ids: Vec<u64> = ds.pool_ids().into_iter().take(12).collect();
    let mut logits_map = BTreeMap::new();
    let mut probs_map = BTreeMap::new();
    for &id in &train_ids {
        let z = teacher_model.forward(ds.features_of(id).unwrap()).unwrap();
        probs_map.insert(id, math::stable_softmax_temp(&z, 4.0).unwrap());
        logits_map.insert(id, z);
    }
    let data = TeacherData {
        logits: logits_map,
        soft_probs: probs_map,
        hints: BTreeMap::new(),
    };

    let cfg = TrainConfig::new(Method::Ckd, 12, vec![4, 6, 3]);
    let groups = crate::sampler::epoch_groups(
        &train_ids,
        &SamplerConfig::new(3, 42),
        8,
    )
    .unwrap();
    let (union, _) = union_rows(&groups);
    let x = ds.feature_batch(&union).unwrap();
    let labels = ds.label_batch(&union).unwrap();
    let logits = student.forward_batch(&x).unwrap();
    let mut expected_ce = 0.0;
    for r in 0..logits.rows() {
        expected_ce += losses::ce_loss(logits.row(r), labels[r]).unwrap().value;
    }
    expected_ce /= logits.rows() as f64;

    let mut model = student.clone();
    let mut regressor = None;
    let mut sgd = SgdState::for_model(&model);
    let mut sgd_reg = None;
    let mut state = StepState {
        model: &mut model,
        regressor: &mut regressor,
        sgd: &mut sgd,
        sgd_reg: &mut sgd_reg,
    };
    let mut cmp_rng = RngStream::new(0);
    let mut audit = Vec::new();
    let loss = execute_step(
        Method::Ckd,
        &cfg,
        &ds,
        Some(&data),
        &mut state,
        0.0, // frozen
        &StepInput::Groups(groups),
        &mut cmp_rng,
        &mut audit,
    )
    .unwrap();
    assert!(
        (loss - expected_ce).abs() < 1e-10,
        "step loss {loss} vs plain CE {expected_ce}"
    );
    assert!(!audit.is_empty());
}

#[test]
fn sweep_picks_dominant_lr_and_breaks_ties_upward() {
    let ds = toy_dataset(7);
    let mut cfg = quick_config(Method::CeOnly, 16);
    cfg.lr_grid = vec![0.1, 0.05];
    cfg.seeds = vec![1, 2];
    cfg.protocol.max_epochs = 2;
    cfg.jobs = 2;
    let ctx = RunContext::new(&ds, None, &cfg);
    let sweep = train_sweep(&ctx).unwrap();
    assert_eq!(sweep.runs.len(), 4);
    // selected rate maximizes mean val accuracy (ties to the larger rate)
    let best_mean = sweep
        .val_mean_by_lr
        .iter()
        .map(|&(_, v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let winners: Vec<f64> = sweep
        .val_mean_by_lr
        .iter()
        .filter(|&&(_, v)| v == best_mean)
        .map(|&(lr, _)| lr)
        .collect();
    assert_eq!(sweep.best_lr, winners.iter().copied().fold(f64::MIN, f64::max));
    assert_eq!(sweep.best_runs().len(), 2);
    // deterministic under re-execution, including with different job counts
    let mut cfg_serial = cfg.clone();
    cfg_serial.jobs = 1;
    let ctx_serial = RunContext::new(&ds, None, &cfg_serial);
    let sweep2 = train_sweep(&ctx_serial).unwrap();
    assert_eq!(sweep.runs, sweep2.runs);
    assert_eq!(sweep.best_lr, sweep2.best_lr);
}

#[test]
fn teacher_training_separates_zero_noise_blobs() {
    let ds = generate_synthetic(&SyntheticSpec {
        classes: 3,
        dim: 2,
        per_class: 60,
        noise: 0.0,
        separation: 4.0,
        test_fraction: 0.2,
        seed: 13,
    })
    .unwrap();
    let proto = TeacherProtocol {
        max_epochs: 40,
        patience: 5,
        ..TeacherProtocol::default()
    };
    let report = train_teacher(&ds, &[2, 16, 3], 1, &proto).unwrap();
    assert!(
        report.test_accuracy >= 0.99,
        "teacher reached only {}",
        report.test_accuracy
    );
    // deterministic under seed
    let again = train_teacher(&ds, &[2, 16, 3], 1, &proto).unwrap();
    assert_eq!(report.model, again.model);
}

#[test]
fn unlimited_kd_approaches_the_teacher() {
    let ds = generate_synthetic(&SyntheticSpec {
        classes: 3,
        dim: 4,
        per_class: 150,
        noise: 0.6,
        separation: 3.0,
        test_fraction: 0.2,
        seed: 17,
    })
    .unwrap();
    let proto = TeacherProtocol {
        max_epochs: 40,
        patience: 5,
        ..TeacherProtocol::default()
    };
    let teacher_report = train_teacher(&ds, &[4, 16, 3], 1, &proto).unwrap();
    let teacher_acc = teacher_report.test_accuracy;
    let teacher: Arc<dyn Teacher> = Arc::new(MlpTeacher::new(teacher_report.model));

    // same architecture, full budget, best rate from the grid
    let pool = ds.pool_ids().len() as u64;
    let mut cfg = TrainConfig::new(Method::Kd, pool, vec![4, 16, 3]);
    cfg.protocol.max_epochs = 60;
    cfg.protocol.patience = 8;
    cfg.seeds = vec![1];
    cfg.jobs = 2;
    let ctx = RunContext::new(&ds, Some(teacher), &cfg);
    let sweep = train_sweep(&ctx).unwrap();
    assert!(
        sweep.test_mean >= teacher_acc - 0.02,
        "student {} vs teacher {teacher_acc}",
        sweep.test_mean
    );
}

#[test]
fn white_box_methods_train_end_to_end() {
    let ds = toy_dataset(8);
    let teacher = toy_teacher(&ds);
    for method in [Method::FitNets, Method::FitNetsCkd] {
        let mut cfg = quick_config(method, 16);
        cfg.protocol.batch_size = 8;
        cfg.protocol.max_epochs = 2;
        let ctx = RunContext::new(&ds, Some(teacher.clone()), &cfg);
        let result = train_one(&ctx, 1, 0.01).unwrap().result;
        assert_eq!(result.optimizer_steps, 2 * 16);
        assert!(result.epochs.iter().all(|e| e.train_loss.is_finite()));
    }
}

#[test]
fn per_step_patience_is_supported() {
    let ds = toy_dataset(9);
    let mut cfg = quick_config(Method::CeOnly, 8);
    cfg.protocol.batch_size = 4;
    cfg.protocol.patience_unit = PatienceUnit::Steps;
    cfg.protocol.patience = 5;
    cfg.protocol.max_epochs = 40;
    let ctx = RunContext::new(&ds, None, &cfg);
    // frozen run: per-step patience of 5 exhausts 4 times within 20 steps
    let result = train_one(&ctx, 1, 0.0).unwrap().result;
    assert!(!result.stopped_by_epoch_cap);
    assert_eq!(result.decay_epochs.len(), 3);
    assert!(result.optimizer_steps < 8 * 40);
}
