use std::path::{Path, PathBuf};

use naic::cmal::{BaselineKind, TrainingLog, DEFAULT_MA_DECAY};
use naic::model::{load_checkpoint, save_checkpoint, Checkpoint, DecodingMode, Model};
use naic::oracle::Mutation;
use naic::pipeline::{
    bench_latency, distill_dataset, evaluate, oracle_check, train_cmal, train_teacher, train_xe, Decoder, EvalReport,
    RunConfig, RunDir, StageLog, StageOutcome, TrainState,
};
use naic::synth::{Dataset, PseudoCaptions, Split};
use naic::Error;
use serde::Serialize;

use crate::{BaselineArg, Cli, Command};

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        _ => 1,
    }
}

fn effective_config(cli: &Cli) -> naic::Result<RunConfig> {
    let mut cfg = match &cli.global.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.global.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.global.out {
        cfg.paths.out = out.clone();
    }
    match &cli.command {
        Command::Distill { beam_width } | Command::Evaluate { beam_width, .. } | Command::BenchLatency { beam_width, .. } => {
            if let Some(b) = beam_width {
                cfg.decode.beam_width = *b;
            }
        }
        Command::PretrainXe { weight_init, .. } => cfg.xe.weight_init |= *weight_init,
        Command::TrainCmal { baseline, k, .. } => {
            if let Some(b) = baseline {
                cfg.cmal.baseline = match b {
                    BaselineArg::None => BaselineKind::None,
                    BaselineArg::Sc => BaselineKind::SelfCritical,
                    BaselineArg::Ma => match cfg.cmal.baseline {
                        kind @ BaselineKind::MovingAverage { .. } => kind,
                        _ => BaselineKind::MovingAverage {
                            decay: DEFAULT_MA_DECAY,
                        },
                    },
                    BaselineArg::Cf => match cfg.cmal.baseline {
                        kind @ BaselineKind::Counterfactual { .. } => kind,
                        _ => BaselineKind::Counterfactual { k: 2 },
                    },
                };
            }
            if let Some(k) = k {
                match &mut cfg.cmal.baseline {
                    BaselineKind::Counterfactual { k: current } => *current = *k,
                    _ => return Err(Error::Config("--k only applies to the counterfactual baseline".into())),
                }
            }
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require(path: &Path, produced_by: &str) -> naic::Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "{} not found; run `naic {produced_by}` first",
            path.display()
        )))
    }
}

fn print_json<T: Serialize>(value: &T) -> naic::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> naic::Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, serde_json::to_vec_pretty(value)?)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn load_model(path: &Path, mode: DecodingMode) -> naic::Result<Model> {
    let Checkpoint { mode: found, model } = load_checkpoint(path)?;
    if found != mode {
        return Err(Error::InvalidArgument(format!(
            "{} holds a {found:?} model, expected {mode:?}",
            path.display()
        )));
    }
    Ok(model)
}

fn checkpoint_path(run: &RunDir, name: &str) -> PathBuf {
    match name {
        "teacher" => run.teacher(),
        "xe" => run.xe(),
        "cmal" => run.cmal(),
        other => PathBuf::from(other),
    }
}

fn producer(name: &str) -> &'static str {
    match name {
        "teacher" => "train-teacher",
        "xe" => "pretrain-xe",
        _ => "train-cmal",
    }
}

fn split_of(name: &str) -> naic::Result<Split> {
    match Split::parse(name)? {
        Split::Unlabeled => Err(Error::InvalidArgument("the unlabeled split has no references".into())),
        s => Ok(s),
    }
}

#[derive(Serialize)]
struct StageReport {
    stage: String,
    config_sha256: String,
    epochs_done: usize,
    epoch_losses: Vec<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    epoch_rewards: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    baseline: Option<String>,
    val: EvalReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    start_val: Option<EvalReport>,
}

/// Saves checkpoint, optimizer state, effective config and stage report.
fn finish_stage(
    run: &RunDir,
    cfg: &RunConfig,
    stage: &str,
    ckpt: &Path,
    mode: DecodingMode,
    model: &Model,
    outcome: &StageOutcome,
    val: EvalReport,
    start_val: Option<EvalReport>,
    baseline: Option<String>,
) -> naic::Result<()> {
    save_checkpoint(ckpt, mode, model)?;
    outcome.state.save(&run.state(stage))?;
    std::fs::write(run.root().join(format!("{stage}.config.toml")), cfg.to_toml())?;
    let report = StageReport {
        stage: stage.to_string(),
        config_sha256: cfg.checksum(),
        epochs_done: outcome.state.epochs_done,
        epoch_losses: outcome.epoch_losses.clone(),
        epoch_rewards: outcome.epoch_rewards.clone(),
        baseline,
        val,
        start_val,
    };
    write_json(&run.report(stage), &report)?;
    print_json(&report)
}

fn resume_state(run: &RunDir, stage: &str, ckpt: &Path, mode: DecodingMode) -> naic::Result<(Model, TrainState)> {
    require(ckpt, producer(stage))?;
    require(&run.state(stage), producer(stage))?;
    let state = TrainState::load(&run.state(stage))?;
    if state.stage != stage {
        return Err(Error::InvalidArgument(format!("state file belongs to stage {}", state.stage)));
    }
    Ok((load_model(ckpt, mode)?, state))
}

pub fn run(cli: &Cli) -> naic::Result<bool> {
    let cfg = effective_config(cli)?;
    if let Command::ShowConfig = cli.command {
        print!("{}", cfg.to_toml());
        return Ok(true);
    }
    if let Command::OracleCheck {
        inject_sign_flip,
        models,
    } = cli.command
    {
        if models == 0 {
            return Err(Error::InvalidArgument("--models must be >= 1".into()));
        }
        let mutation = if inject_sign_flip {
            Mutation::FlipAdvantageSign
        } else {
            Mutation::None
        };
        let report = oracle_check(mutation, models)?;
        let failed = report.cases.iter().filter(|c| !c.passed).count();
        for c in &report.cases {
            eprintln!(
                "{} N={} seed={} baseline={} rel_dev={:.2e} direct_dev={:.2e}",
                if c.passed { "PASS" } else { "FAIL" },
                c.report.num_agents,
                c.seed,
                c.report.baseline.name(),
                c.report.baseline_vs_plain.max_rel,
                c.report.plain_vs_direct.max_rel,
            );
        }
        eprintln!(
            "oracle-check: {} of {} cases passed in {:.1}s",
            report.cases.len() - failed,
            report.cases.len(),
            report.wall_time_s
        );
        print_json(&report)?;
        return Ok(report.passed);
    }

    let run = RunDir::new(&cfg.paths.out);
    let _lock = run.lock()?;
    let sha = cfg.checksum();
    match &cli.command {
        Command::GenerateData => {
            let ds = Dataset::generate(cfg.seed, cfg.data, cfg.grammar.clone())?;
            ds.save(&run.dataset())?;
            let count = |s| ds.split(s).len();
            print_json(&serde_json::json!({
                "path": run.dataset(),
                "config_sha256": sha,
                "train": count(Split::Train),
                "val": count(Split::Val),
                "test": count(Split::Test),
                "unlabeled": count(Split::Unlabeled),
            }))?;
        }
        Command::TrainTeacher { resume } => {
            require(&run.dataset(), "generate-data")?;
            let ds = Dataset::load(&run.dataset())?;
            let resumed = if *resume {
                Some(resume_state(&run, "teacher", &run.teacher(), DecodingMode::Autoregressive)?)
            } else {
                None
            };
            let mut log = TrainingLog::open(&run.log("teacher"))?;
            let (model, outcome) = train_teacher(
                &cfg,
                &ds,
                resumed,
                Some(StageLog {
                    log: &mut log,
                    config_sha256: sha.clone(),
                }),
            )?;
            let val = evaluate(&model, Decoder::ArBeam { width: cfg.decode.beam_width }, &ds.split(Split::Val), "val")?;
            finish_stage(&run, &cfg, "teacher", &run.teacher(), DecodingMode::Autoregressive, &model, &outcome, val, None, None)?;
        }
        Command::Distill { .. } => {
            require(&run.dataset(), "generate-data")?;
            require(&run.teacher(), "train-teacher")?;
            let ds = Dataset::load(&run.dataset())?;
            let teacher = load_model(&run.teacher(), DecodingMode::Autoregressive)?;
            let pseudo = distill_dataset(&cfg, &ds, &teacher)?;
            pseudo.save(&run.pseudo_captions())?;
            print_json(&serde_json::json!({
                "path": run.pseudo_captions(),
                "teacher_sha256": pseudo.teacher_sha256,
                "beam_width": pseudo.beam_width,
                "captions": pseudo.captions.len(),
            }))?;
        }
        Command::PretrainXe { resume, .. } => {
            require(&run.dataset(), "generate-data")?;
            let ds = Dataset::load(&run.dataset())?;
            let pseudo = if cfg.xe.distill {
                require(&run.pseudo_captions(), "distill")?;
                Some(PseudoCaptions::load(&run.pseudo_captions())?)
            } else {
                None
            };
            let teacher = if cfg.xe.weight_init && !resume {
                require(&run.teacher(), "train-teacher")?;
                Some(load_model(&run.teacher(), DecodingMode::Autoregressive)?)
            } else {
                None
            };
            let resumed = if *resume {
                Some(resume_state(&run, "xe", &run.xe(), DecodingMode::NonAutoregressive)?)
            } else {
                None
            };
            let mut log = TrainingLog::open(&run.log("xe"))?;
            let (model, outcome) = train_xe(
                &cfg,
                &ds,
                pseudo.as_ref(),
                teacher.as_ref(),
                resumed,
                Some(StageLog {
                    log: &mut log,
                    config_sha256: sha.clone(),
                }),
            )?;
            let val = evaluate(&model, Decoder::NonAutoregressive, &ds.split(Split::Val), "val")?;
            finish_stage(&run, &cfg, "xe", &run.xe(), DecodingMode::NonAutoregressive, &model, &outcome, val, None, None)?;
        }
        Command::TrainCmal { resume, .. } => {
            require(&run.dataset(), "generate-data")?;
            let ds = Dataset::load(&run.dataset())?;
            let (init, state) = if *resume {
                let (m, s) = resume_state(&run, "cmal", &run.cmal(), DecodingMode::NonAutoregressive)?;
                (m, Some(s))
            } else {
                require(&run.xe(), "pretrain-xe")?;
                (load_model(&run.xe(), DecodingMode::NonAutoregressive)?, None)
            };
            let val_split = ds.split(Split::Val);
            let start_val = evaluate(&init, Decoder::NonAutoregressive, &val_split, "val")?;
            let mut log = TrainingLog::open(&run.log("cmal"))?;
            let (model, outcome) = train_cmal(
                &cfg,
                &ds,
                init,
                state,
                Some(StageLog {
                    log: &mut log,
                    config_sha256: sha.clone(),
                }),
            )?;
            let val = evaluate(&model, Decoder::NonAutoregressive, &val_split, "val")?;
            finish_stage(
                &run,
                &cfg,
                "cmal",
                &run.cmal(),
                DecodingMode::NonAutoregressive,
                &model,
                &outcome,
                val,
                Some(start_val),
                Some(cfg.cmal.baseline.name().to_string()),
            )?;
        }
        Command::Evaluate { checkpoint, split, .. } => {
            require(&run.dataset(), "generate-data")?;
            let path = checkpoint_path(&run, checkpoint);
            require(&path, producer(checkpoint))?;
            let split = split_of(split)?;
            let ds = Dataset::load(&run.dataset())?;
            let Checkpoint { mode, model } = load_checkpoint(&path)?;
            let report = evaluate(&model, Decoder::for_mode(mode, cfg.decode.beam_width), &ds.split(split), split.name())?;
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
            write_json(&run.report(&format!("{stem}.{}.eval", split.name())), &report)?;
            print_json(&report)?;
        }
        Command::BenchLatency {
            student,
            teacher,
            num_images,
            ..
        } => {
            require(&run.dataset(), "generate-data")?;
            let (sp, tp) = (checkpoint_path(&run, student), checkpoint_path(&run, teacher));
            require(&sp, producer(student))?;
            require(&tp, producer(teacher))?;
            let student = load_model(&sp, DecodingMode::NonAutoregressive)?;
            let teacher = load_model(&tp, DecodingMode::Autoregressive)?;
            let ds = Dataset::load(&run.dataset())?;
            let test = ds.split(Split::Test);
            let n = match num_images.unwrap_or(cfg.bench.num_images) {
                0 => test.len(),
                n => n.min(test.len()),
            };
            let images: Vec<_> = test.iter().take(n).map(|r| &r.image).collect();
            let report = bench_latency(&student, &teacher, &images, cfg.decode.beam_width, cfg.bench.warmup)?;
            write_json(&run.report("latency"), &report)?;
            print_json(&report)?;
        }
        Command::ShowConfig | Command::OracleCheck { .. } => unreachable!("handled above"),
    }
    Ok(true)
}
