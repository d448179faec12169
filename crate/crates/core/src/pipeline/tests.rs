use super::*;
use crate::cmal::{BaselineKind, TrainingLog};
use crate::model::{Model, ModelConfig};
use crate::oracle::Mutation;
use crate::synth::{Dataset, Split, SplitSizes};

/// A configuration small enough for unit tests.
fn tiny() -> RunConfig {
    let mut cfg = RunConfig {
        model: ModelConfig {
            num_layers: 1,
            model_dim: 16,
            num_heads: 2,
            ffn_dim: 16,
            ..ModelConfig::default()
        },
        data: SplitSizes {
            train: 12,
            val: 4,
            test: 4,
            unlabeled: 6,
        },
        ..RunConfig::default()
    };
    cfg.teacher.epochs = 2;
    cfg.teacher.batch_size = 8;
    cfg.xe.stage.epochs = 2;
    cfg.xe.stage.batch_size = 8;
    cfg.cmal.stage.epochs = 2;
    cfg.cmal.stage.batch_size = 4;
    cfg
}

#[test]
fn schedules_reproduce_the_published_shapes() {
    // Warm-up min(t * 1e-4, 3e-4), halved every 3 epochs after epoch 6.
    let xe = LrSchedule {
        base: 3e-4,
        warmup_epochs: 3,
        decay: 0.5,
        decay_every: 3,
        decay_after: 6,
    };
    let expected = [1e-4, 2e-4, 3e-4, 3e-4, 3e-4, 3e-4, 1.5e-4, 1.5e-4, 1.5e-4, 0.75e-4];
    for (t, want) in expected.iter().enumerate() {
        assert!((xe.lr(t + 1) - want).abs() < 1e-15, "epoch {}", t + 1);
    }
    // 7.5e-5 decayed by 0.8 every 10 epochs.
    let cmal = LrSchedule {
        base: 7.5e-5,
        warmup_epochs: 0,
        decay: 0.8,
        decay_every: 10,
        decay_after: 10,
    };
    assert_eq!(cmal.lr(10), 7.5e-5);
    assert!((cmal.lr(11) - 6e-5).abs() < 1e-18);
    assert!((cmal.lr(21) - 4.8e-5).abs() < 1e-18);
    assert_eq!(LrSchedule::constant(0.1).lr(50), 0.1);
}

#[test]
fn config_round_trips_and_rejects_typos() {
    let cfg = RunConfig::default();
    cfg.validate().unwrap();
    let text = cfg.to_toml();
    assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    assert!(RunConfig::from_toml("sed = 3").is_err());
    assert!(RunConfig::from_toml("[xe]\nepoch = 3").is_err());
    assert_eq!(RunConfig::from_toml("").unwrap(), cfg);

    let partial = RunConfig::from_toml("seed = 9\n[cmal.baseline]\nkind = \"self-critical\"\n").unwrap();
    assert_eq!(partial.seed, 9);
    assert_eq!(partial.cmal.baseline, BaselineKind::SelfCritical);

    let bad_lr = "[teacher.schedule]\nbase = -1.0\n";
    assert!(matches!(RunConfig::from_toml(bad_lr), Err(crate::Error::Config(_))));
    let bad_k = "[cmal.baseline]\nkind = \"counterfactual\"\nk = 0\n";
    assert!(RunConfig::from_toml(bad_k).is_err());
    let orphan = "[xe]\ndistill = false\nunlabeled = true\n";
    assert!(RunConfig::from_toml(orphan).is_err());
}

#[test]
fn shipped_configs_parse() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let default = RunConfig::load(&dir.join("default.toml")).unwrap();
    assert_eq!(default, RunConfig::default());
    RunConfig::load(&dir.join("small.toml")).unwrap();
}

#[test]
fn checksum_tracks_content() {
    let a = RunConfig::default();
    let mut b = a.clone();
    assert_eq!(a.checksum(), b.checksum());
    b.seed += 1;
    assert_ne!(a.checksum(), b.checksum());
    assert_eq!(a.checksum().len(), 64);
}

#[test]
fn xe_data_flow_is_enforced() {
    let cfg = tiny();
    let ds = Dataset::generate(1, cfg.data, cfg.grammar.clone()).unwrap();
    let teacher = Model::init(cfg.model.clone(), 3).unwrap();
    let pseudo = distill_dataset(&cfg, &ds, &teacher).unwrap();
    // Only training and unlabeled images are distilled.
    assert_eq!(pseudo.captions.len(), 12 + 6);

    let with_unlabeled = xe_training_set(&cfg, &ds, Some(&pseudo)).unwrap();
    assert_eq!(with_unlabeled.len(), 18);
    assert!(with_unlabeled.iter().all(|(_, t)| t.len() == 1));

    let mut labeled_only = cfg.clone();
    labeled_only.xe.unlabeled = false;
    assert_eq!(xe_training_set(&labeled_only, &ds, Some(&pseudo)).unwrap().len(), 12);

    let mut real = cfg.clone();
    real.xe.distill = false;
    real.xe.unlabeled = false;
    let refs = xe_training_set(&real, &ds, None).unwrap();
    assert_eq!(refs.len(), 12);
    assert!(refs.iter().all(|(_, t)| t.len() == cfg.grammar.refs_per_image));

    assert!(matches!(xe_training_set(&cfg, &ds, None), Err(crate::Error::DataFlow(_))));

    let mut leaked = pseudo.clone();
    let val = ds.split(Split::Val)[0];
    leaked.captions.push((val.id.clone(), vec![4, crate::model::PERIOD]));
    assert!(matches!(xe_training_set(&cfg, &ds, Some(&leaked)), Err(crate::Error::DataFlow(_))));

    let mut missing = pseudo.clone();
    missing.captions.remove(0);
    assert!(matches!(xe_training_set(&cfg, &ds, Some(&missing)), Err(crate::Error::DataFlow(_))));
}

#[test]
fn weight_init_requires_the_distilling_teacher() {
    let mut cfg = tiny();
    cfg.xe.weight_init = true;
    let ds = Dataset::generate(1, cfg.data, cfg.grammar.clone()).unwrap();
    let teacher = Model::init(cfg.model.clone(), 3).unwrap();
    let other = Model::init(cfg.model.clone(), 4).unwrap();
    let pseudo = distill_dataset(&cfg, &ds, &teacher).unwrap();
    assert!(matches!(
        train_xe(&cfg, &ds, Some(&pseudo), Some(&other), None, None),
        Err(crate::Error::DataFlow(_))
    ));
    assert!(matches!(train_xe(&cfg, &ds, Some(&pseudo), None, None, None), Err(crate::Error::Config(_))));
    cfg.xe.stage.epochs = 0;
    let (student, _) = train_xe(&cfg, &ds, Some(&pseudo), Some(&teacher), None, None).unwrap();
    assert_eq!(student.params, teacher.params);
}

#[test]
fn cmal_uses_only_real_references_of_training_images() {
    let cfg = tiny();
    let ds = Dataset::generate(2, cfg.data, cfg.grammar.clone()).unwrap();
    let data = CmalData::new(&ds).unwrap();
    assert_eq!(data.records.len(), 12);
    assert!(data.records.iter().all(|r| r.split == Split::Train));
    assert_eq!(data.stats.num_docs(), 12);
    for (r, original) in data.records.iter().zip(ds.split(Split::Train)) {
        assert_eq!(r.references, original.references);
    }

    let mut broken = ds.clone();
    let idx = broken.records.iter().position(|r| r.split == Split::Train).unwrap();
    broken.records[idx].references.clear();
    assert!(matches!(CmalData::new(&broken), Err(crate::Error::DataFlow(_))));
}

#[test]
fn run_directory_lock_is_exclusive() {
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir::new(dir.path().join("run"));
    let guard = run.lock().unwrap();
    assert!(run.lock().is_err());
    drop(guard);
    let _again = run.lock().unwrap();
}

#[test]
fn resuming_reproduces_an_uninterrupted_run() {
    let mut cfg = tiny();
    cfg.cmal.stage.epochs = 3;
    cfg.cmal.baseline = BaselineKind::MovingAverage { decay: 0.9 };
    let ds = Dataset::generate(5, cfg.data, cfg.grammar.clone()).unwrap();
    let init = Model::init(cfg.model.clone(), 8).unwrap();

    let (full, full_out) = train_cmal(&cfg, &ds, init.clone(), None, None).unwrap();

    let mut first = cfg.clone();
    first.cmal.stage.epochs = 2;
    let (half, half_out) = train_cmal(&first, &ds, init, None, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir::new(dir.path());
    crate::model::save_checkpoint(&run.cmal(), crate::model::DecodingMode::NonAutoregressive, &half).unwrap();
    half_out.state.save(&run.state("cmal")).unwrap();
    let restored = crate::model::load_checkpoint(&run.cmal()).unwrap().model;
    let state = TrainState::load(&run.state("cmal")).unwrap();
    assert_eq!(state, half_out.state);

    let (resumed, resumed_out) = train_cmal(&cfg, &ds, restored, Some(state), None).unwrap();
    assert_eq!(resumed_out.epoch_losses, full_out.epoch_losses[2..]);
    assert_eq!(resumed.params, full.params);
}

#[test]
fn teacher_resume_matches_next_epoch_loss() {
    let mut cfg = tiny();
    cfg.teacher.epochs = 3;
    let ds = Dataset::generate(6, cfg.data, cfg.grammar.clone()).unwrap();
    let (_, full) = train_teacher(&cfg, &ds, None, None).unwrap();
    let mut first = cfg.clone();
    first.teacher.epochs = 2;
    let (m, out) = train_teacher(&first, &ds, None, None).unwrap();
    let (_, rest) = train_teacher(&cfg, &ds, Some((m, out.state)), None).unwrap();
    assert_eq!(rest.epoch_losses, full.epoch_losses[2..]);
}

#[test]
fn stage_logs_carry_the_config_checksum() {
    let cfg = tiny();
    let ds = Dataset::generate(7, cfg.data, cfg.grammar.clone()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cmal.log.jsonl");
    let mut log = TrainingLog::open(&path).unwrap();
    let init = Model::init(cfg.model.clone(), 1).unwrap();
    train_cmal(
        &cfg,
        &ds,
        init,
        None,
        Some(StageLog {
            log: &mut log,
            config_sha256: cfg.checksum(),
        }),
    )
    .unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let records: Vec<crate::cmal::LogRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    // 12 images in batches of 4, two epochs.
    assert_eq!(records.len(), 6);
    let n = cfg.model.num_agents;
    for r in &records {
        assert_eq!(r.config_sha256.as_deref(), Some(cfg.checksum().as_str()));
        assert_eq!(r.baseline.as_deref(), Some("cf"));
        assert_eq!(r.reward_evals, Some(4 * (n * 2 + 1)));
    }
}

#[test]
fn evaluation_is_deterministic_and_rejects_empty_splits() {
    let cfg = tiny();
    let ds = Dataset::generate(3, cfg.data, cfg.grammar.clone()).unwrap();
    let model = Model::init(cfg.model.clone(), 2).unwrap();
    let test = ds.split(Split::Test);
    let a = evaluate(&model, Decoder::NonAutoregressive, &test, "test").unwrap();
    let b = evaluate(&model, Decoder::NonAutoregressive, &test, "test").unwrap();
    assert_eq!(a, b);
    assert_eq!(a.num_images, 4);
    assert!(evaluate(&model, Decoder::NonAutoregressive, &[], "test").is_err());
    let unlabeled = ds.split(Split::Unlabeled);
    assert!(evaluate(&model, Decoder::ArGreedy, &unlabeled, "unlabeled").is_err());
}

#[test]
fn latency_counts_decoder_passes() {
    let cfg = tiny();
    let ds = Dataset::generate(4, cfg.data, cfg.grammar.clone()).unwrap();
    let student = Model::init(cfg.model.clone(), 1).unwrap();
    let teacher = Model::init(cfg.model.clone(), 2).unwrap();
    let images: Vec<_> = ds.split(Split::Test).iter().map(|r| &r.image).collect();
    let report = bench_latency(&student, &teacher, &images, 3, 2).unwrap();
    let na = report.row("na").unwrap();
    assert_eq!(na.decoder_calls_per_image, 1.0);
    let greedy = report.row("ar-greedy").unwrap();
    assert_eq!(greedy.decoder_calls_per_image, greedy.mean_emitted);
    assert!(report.row("ar-beam-3").unwrap().decoder_calls_per_image >= greedy.decoder_calls_per_image);
    let json = serde_json::to_value(&report).unwrap();
    let keys: Vec<_> = json["rows"][0].as_object().unwrap().keys().cloned().collect();
    assert_eq!(keys, ["decoder", "decoder_calls_per_image", "mean_emitted", "mean_ms", "speedup_vs_ar_beam"]);
}

#[test]
fn oracle_check_passes_and_catches_a_sign_flip() {
    let ok = oracle_check(Mutation::None, 1).unwrap();
    assert!(ok.passed);
    assert_eq!(ok.cases.len(), 15);
    let flipped = oracle_check(Mutation::FlipAdvantageSign, 1).unwrap();
    assert!(!flipped.passed);
}
