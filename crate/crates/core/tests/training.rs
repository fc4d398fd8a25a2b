use setdino::encoder::VitConfig;
use setdino::error::Error;
use setdino::imageproc::MultiCropConfig;
use setdino::sampler::Strategy;
use setdino::store::{PreprocessConfig, Preprocessor, RenderSource};
use setdino::synthgen::{generate_dataset, generate_world, Dataset, DatasetConfig, WorldConfig};
use setdino::trainer::{TrainConfig, TrainState, Trainer, CHECKPOINT_FILE, HISTORY_FILE};

fn tiny_dataset(n_batches: usize) -> Dataset {
    let world = generate_world(
        &WorldConfig {
            n_genes: 4,
            guides_per_gene: 2,
            n_ntc_guides: 2,
            n_batches,
            n_modules: 1,
            module_size: 2,
            image_size: 16,
            n_decoy_edges: 0,
            ..WorldConfig::default()
        },
        3,
    )
    .unwrap();
    generate_dataset(
        &world,
        &DatasetConfig {
            cells_per_guide_per_batch: 4,
            split: None,
        },
        3,
    )
    .unwrap()
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        model: VitConfig {
            image_size: 8,
            patch_size: 4,
            embed_dim: 8,
            depth: 1,
            n_heads: 2,
            mlp_ratio: 2,
            n_prototypes: 16,
            projector_hidden_dim: 12,
            bottleneck_dim: 6,
        },
        multicrop: MultiCropConfig {
            n_global: 2,
            n_local: 2,
            global_size: 8,
            local_size: 4,
            ..MultiCropConfig::default()
        },
        epochs: 2,
        steps_per_epoch: 2,
        warmup_epochs: 0,
        base_lr: 1e-3,
        n: 2,
        cells_per_minibatch: 8,
        splits: vec![],
        ..TrainConfig::default()
    }
}

fn preprocessor(source: &RenderSource) -> Preprocessor {
    Preprocessor::fit(source, None, &PreprocessConfig::default(), 0).unwrap()
}

#[test]
fn one_step_moves_student_and_teacher_follows_ema() {
    let ds = tiny_dataset(3);
    let source = RenderSource::new(&ds);
    let pre = preprocessor(&source);
    let cfg = tiny_config();
    let mut trainer = Trainer::new(&source, None, &pre, &cfg).unwrap();
    let teacher0 = trainer.state.teacher.clone();
    let student0 = trainer.state.student.clone();
    let row = trainer.step().unwrap();
    assert!(row.loss.is_finite() && row.loss >= 0.0);
    let s1 = &trainer.state.student;
    assert_ne!(s1.tensors, student0.tensors);
    let lam = row.teacher_momentum as f32;
    let rest = (1.0 - row.teacher_momentum) as f32;
    for ((t1, t0), s) in trainer.state.teacher.tensors.iter().zip(&teacher0.tensors).zip(&s1.tensors) {
        for ((&a, &b), &c) in t1.data.iter().zip(&t0.data).zip(&s.data) {
            assert_eq!(a, lam * b + rest * c);
        }
    }
    assert!(trainer.state.center.iter().all(|c| c.is_finite()));
    assert!(trainer.state.center.iter().any(|&c| c != 0.0));
}

#[test]
fn history_has_one_row_per_step_and_files_are_written() {
    let ds = tiny_dataset(3);
    let source = RenderSource::new(&ds);
    let pre = preprocessor(&source);
    let cfg = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    let mut trainer = Trainer::new(&source, None, &pre, &cfg)
        .unwrap()
        .with_output(dir.path())
        .unwrap();
    trainer.run(None).unwrap();
    assert_eq!(trainer.state.history.len(), cfg.epochs * cfg.steps_per_epoch);
    let csv = std::fs::read_to_string(dir.path().join(HISTORY_FILE)).unwrap();
    assert_eq!(csv.lines().count(), 1 + cfg.epochs * cfg.steps_per_epoch);
    // Momentum reaches 1 at the last step, so the teacher stops moving there.
    assert_eq!(trainer.state.history.last().unwrap().teacher_momentum, 1.0);
    let (loaded, loaded_cfg) = TrainState::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(loaded_cfg, cfg);
    assert_eq!(loaded.teacher.tensors, trainer.state.teacher.tensors);
    assert_eq!(loaded.adam_v.tensors, trainer.state.adam_v.tensors);
    assert_eq!(loaded.history, trainer.state.history);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let ds = tiny_dataset(3);
    let source = RenderSource::new(&ds);
    let pre = preprocessor(&source);
    let cfg = tiny_config();
    let full = tempfile::tempdir().unwrap();
    let mut a = Trainer::new(&source, None, &pre, &cfg).unwrap().with_output(full.path()).unwrap();
    a.run(None).unwrap();

    let split = tempfile::tempdir().unwrap();
    let mut b = Trainer::new(&source, None, &pre, &cfg).unwrap().with_output(split.path()).unwrap();
    b.run(Some(1)).unwrap();
    drop(b);
    let mut c = Trainer::new(&source, None, &pre, &cfg).unwrap().with_output(split.path()).unwrap();
    assert_eq!(c.state.step, 1);
    c.run(None).unwrap();

    let x = std::fs::read(full.path().join(CHECKPOINT_FILE)).unwrap();
    let y = std::fs::read(split.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(x, y);
}

#[test]
fn resume_refuses_a_different_configuration() {
    let ds = tiny_dataset(3);
    let source = RenderSource::new(&ds);
    let pre = preprocessor(&source);
    let cfg = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    let mut a = Trainer::new(&source, None, &pre, &cfg).unwrap().with_output(dir.path()).unwrap();
    a.run(Some(1)).unwrap();
    let other = TrainConfig { seed: 9, ..cfg };
    let err = Trainer::new(&source, None, &pre, &other).unwrap().with_output(dir.path());
    assert!(matches!(err, Err(Error::Config { .. })));
}

#[test]
fn cross_batch_on_one_batch_fails_cleanly() {
    let ds = tiny_dataset(1);
    let source = RenderSource::new(&ds);
    let pre = preprocessor(&source);
    let cfg = TrainConfig {
        strategy: Strategy::CrossBatch,
        ..tiny_config()
    };
    match Trainer::new(&source, None, &pre, &cfg) {
        Err(Error::Size(msg)) => assert!(msg.contains("no perturbation")),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("cross-batch sampling on one batch must fail"),
    }
}
