use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use trajkd::eval::{
    emit_report, evaluate, report_file_names, ConstantVelocity, Forecaster, MetricReport,
};
use trajkd::par::Parallelism;
use trajkd::scene::{read_samples, PaddingMode, Sample};
use trajkd::synth::{generate_dataset, scene_seed, GeneratorConfig};
use trajkd::train::{distill_student, train_teacher, ExperimentConfig, TrainOptions, TrainedModel};

use crate::config::{load_table, resolve};
use crate::error::{runtime, CliError, CliResult};
use crate::manifest::RunManifest;
use crate::workspace::{Outcome, RunPlan, Staging, Workdir};
use crate::{Cli, Command, ConfigArgs};

pub const METRICS_FILE: &str = "metrics.json";
pub const CONSTANT_VELOCITY: &str = "constant-velocity";

pub(crate) struct Ctx<'a> {
    pub work: Workdir,
    pub resume: bool,
    pub parallelism: Parallelism,
    pub argv: &'a [OsString],
}

pub(crate) fn dispatch(cli: &Cli, argv: &[OsString]) -> CliResult<()> {
    let ctx = Ctx {
        work: Workdir::new(cli.workdir.clone()),
        resume: cli.resume,
        parallelism: if cli.sequential {
            Parallelism::Sequential
        } else {
            Parallelism::Auto
        },
        argv,
    };
    match &cli.command {
        Command::GenerateData { cfg, out, count } => generate_data(&ctx, cfg, out, *count),
        Command::TrainTeacher {
            cfg,
            data,
            out,
            epochs,
        } => {
            let exp = experiment_config(&ctx, cfg, *epochs)?;
            let data = ctx.work.existing(data, "data directory")?;
            train(&ctx, &exp, &data, None, &ctx.work.resolve(out)).map(|_| ())
        }
        Command::DistillStudent {
            cfg,
            teacher,
            data,
            out,
            epochs,
        } => {
            let exp = experiment_config(&ctx, cfg, *epochs)?;
            let data = ctx.work.existing(data, "data directory")?;
            let teacher = ctx.work.existing(teacher, "teacher checkpoint")?;
            train(&ctx, &exp, &data, Some(&teacher), &ctx.work.resolve(out)).map(|_| ())
        }
        Command::Evaluate {
            model,
            data,
            out,
            name,
        } => {
            let data = ctx.work.existing(data, "data directory")?;
            evaluate_command(&ctx, model, &data, &ctx.work.resolve(out), name.as_deref())
                .map(|_| ())
        }
        Command::Report { inputs, out } => report(&ctx, inputs, out),
        Command::Ablate {
            cfg,
            data,
            test_data,
            out,
            epochs,
            jobs,
            cell,
        } => crate::ablate::ablate(&ctx, cfg, data, test_data, out, *epochs, *jobs, *cell),
    }
}

pub(crate) fn to_json<T: Serialize>(value: &T) -> serde_json::Value {
    serde_json::to_value(value).expect("configs serialize to JSON")
}

fn with_seed(cfg: &ConfigArgs) -> Vec<String> {
    let mut overrides = cfg.overrides.clone();
    if let Some(seed) = cfg.seed {
        overrides.push(format!("seed={seed}"));
    }
    overrides
}

pub(crate) fn experiment_config(
    ctx: &Ctx,
    cfg: &ConfigArgs,
    epochs: Option<usize>,
) -> CliResult<ExperimentConfig> {
    let path = cfg
        .config
        .as_deref()
        .map(|p| ctx.work.existing(p, "config file"))
        .transpose()?;
    let mut overrides = with_seed(cfg);
    if let Some(e) = epochs {
        overrides.push(format!("epochs={e}"));
    }
    let exp: ExperimentConfig = resolve(load_table(path.as_deref())?, &overrides)?;
    exp.validate()?;
    Ok(exp)
}

/// Splits a file output path into its directory and file name.
pub(crate) fn split_file(path: &Path) -> CliResult<(PathBuf, String)> {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| CliError::Usage(format!("{} is not a file path", path.display())))?
        .to_string();
    let dir = path
        .parent()
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf);
    Ok((dir, name))
}

pub(crate) fn log_name(checkpoint: &str) -> String {
    let stem = checkpoint.rsplit_once('.').map_or(checkpoint, |(s, _)| s);
    format!("{stem}.log.jsonl")
}

fn report_up_to_date(record: &RunManifest, dir: &Path) {
    log::info!(
        "{}: '{}' already completed (config {}), nothing to do",
        dir.display(),
        record.command,
        &record.config_hash[..12]
    );
}

fn generate_data(ctx: &Ctx, cfg: &ConfigArgs, out: &Path, count: usize) -> CliResult<()> {
    let path = cfg
        .config
        .as_deref()
        .map(|p| ctx.work.existing(p, "config file"))
        .transpose()?;
    let gen: GeneratorConfig = resolve(load_table(path.as_deref())?, &with_seed(cfg))?;
    gen.validate()?;
    let plan = RunPlan {
        command: "generate-data".into(),
        out_dir: ctx.work.resolve(out),
        outputs: (0..count)
            .map(trajkd::scene::dataset::scene_file_name)
            .collect(),
        config: serde_json::json!({ "generator": to_json(&gen), "count": count }),
        inputs: vec![],
        seed: gen.seed,
    };
    let stage = match plan.begin(ctx.resume)? {
        Outcome::UpToDate(r) => {
            report_up_to_date(&r, &ctx.work.resolve(out));
            return Ok(());
        }
        Outcome::Ready(s) => s,
    };
    let scenes = generate_dataset(&gen, count, ctx.parallelism)?;
    trajkd::scene::write_dataset(stage.dir(), &scenes)?;
    let seeds: Vec<u64> = (0..count).map(|i| scene_seed(gen.seed, i)).collect();
    stage.commit(serde_json::json!({ "scene_seeds": seeds }))?;
    Ok(())
}

fn load_data(path: &Path) -> CliResult<Vec<Sample>> {
    Ok(read_samples(path)?)
}

pub(crate) fn load_teacher(path: &Path) -> CliResult<TrainedModel> {
    Ok(TrainedModel::load(path)?)
}

/// Trains a teacher (`teacher == None`) or distills a student into the
/// checkpoint path `out`, returning the manifest record.
pub(crate) fn train(
    ctx: &Ctx,
    exp: &ExperimentConfig,
    data: &Path,
    teacher: Option<&Path>,
    out: &Path,
) -> CliResult<RunManifest> {
    let (out_dir, ckpt) = split_file(out)?;
    let log_file = log_name(&ckpt);
    let mut inputs = vec![ctx.work.input_artifact(data)?];
    if let Some(t) = teacher {
        inputs.push(ctx.work.input_artifact(t)?);
    }
    let command = if teacher.is_some() {
        "distill-student"
    } else {
        "train-teacher"
    };
    let plan = RunPlan {
        command: command.into(),
        out_dir: out_dir.clone(),
        outputs: vec![ckpt.clone(), log_file.clone()],
        config: to_json(exp),
        inputs,
        seed: exp.seed,
    };
    if ctx.resume && out_dir.is_dir() {
        if let Some(done) = crate::manifest::find_completed(&out_dir, command, &plan.hash())? {
            report_up_to_date(&done, &out_dir);
            return Ok(done);
        }
    }
    // Inputs are read before anything is created on disk.
    let samples = load_data(data)?;
    let teacher_model = teacher.map(load_teacher).transpose()?;
    let Outcome::Ready(stage) = plan.begin(false)? else {
        unreachable!("resume handled above")
    };
    let trained = run_training(
        ctx,
        exp,
        &samples,
        teacher_model.as_ref(),
        &stage,
        &log_file,
    )?;
    trained.save(&stage.path(&ckpt))?;
    let mut details = serde_json::json!({
        "fingerprint": trained.fingerprint,
        "parameter_hash": trained.parameter_hash(),
        "final_loss": trained.curve.last().map(|c| c.mean_loss),
    });
    if let Some(t) = &teacher_model {
        details["teacher_fingerprint"] = t.fingerprint.clone().into();
        details["teacher_parameter_hash"] = t.parameter_hash().into();
    }
    stage.commit(details)
}

fn run_training(
    ctx: &Ctx,
    exp: &ExperimentConfig,
    samples: &[Sample],
    teacher: Option<&TrainedModel>,
    stage: &Staging,
    log_file: &str,
) -> CliResult<TrainedModel> {
    let path = stage.path(log_file);
    let mut log = BufWriter::new(File::create(&path).map_err(|e| runtime(path.display(), e))?);
    let opts = TrainOptions {
        parallelism: ctx.parallelism,
        log: Some(&mut log),
    };
    let trained = match teacher {
        None => train_teacher(exp, samples, opts),
        Some(t) => distill_student(exp, t, samples, opts),
    };
    log.flush().map_err(|e| runtime(path.display(), e))?;
    Ok(trained?)
}

pub(crate) fn evaluate_command(
    ctx: &Ctx,
    model: &str,
    data: &Path,
    out: &Path,
    name: Option<&str>,
) -> CliResult<RunManifest> {
    let model_path = (model != CONSTANT_VELOCITY)
        .then(|| ctx.work.existing(Path::new(model), "model checkpoint"))
        .transpose()?;
    let mut inputs = vec![ctx.work.input_artifact(data)?];
    if let Some(p) = &model_path {
        inputs.push(ctx.work.input_artifact(p)?);
    }
    let plan = RunPlan {
        command: "evaluate".into(),
        out_dir: out.to_path_buf(),
        outputs: vec![METRICS_FILE.into()],
        config: serde_json::json!({ "model": model_path.as_ref().map_or(model.to_string(), |p| ctx.work.relative(p)), "name": name }),
        inputs,
        seed: 0,
    };
    if ctx.resume && out.is_dir() {
        if let Some(done) = crate::manifest::find_completed(out, "evaluate", &plan.hash())? {
            report_up_to_date(&done, out);
            return Ok(done);
        }
    }
    let samples = load_data(data)?;
    let (forecaster, padding): (Box<dyn Forecaster>, PaddingMode) = match &model_path {
        None => {
            let horizon = samples[0].future_frames;
            (
                Box::new(ConstantVelocity { horizon }),
                PaddingMode::default(),
            )
        }
        Some(p) => {
            let m = load_teacher(p)?;
            let padding = m.experiment.padding;
            (Box::new(m), padding)
        }
    };
    // Fails on missing modalities before any output exists.
    let mut report = evaluate(forecaster.as_ref(), &samples, padding, ctx.parallelism)?;
    if let Some(n) = name {
        report.name = n.to_string();
    }
    let Outcome::Ready(stage) = plan.begin(false)? else {
        unreachable!("resume handled above")
    };
    write_json(&stage.path(METRICS_FILE), &report)?;
    stage.commit(
        serde_json::json!({ "ADE1": report.ade_1, "FDE1": report.fde_1, "agents": report.agents }),
    )
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| runtime(path.display(), e))?;
    std::fs::write(path, text + "\n").map_err(|e| runtime(path.display(), e))
}

pub(crate) fn read_metrics(dir: &Path) -> CliResult<MetricReport> {
    let path = dir.join(METRICS_FILE);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

/// Writes the comparison of `reports` into `out` under a `report` record.
pub(crate) fn write_report(
    ctx: &Ctx,
    reports: &[MetricReport],
    inputs: Vec<crate::manifest::Artifact>,
    out: &Path,
    command: &str,
) -> CliResult<()> {
    let plan = RunPlan {
        command: command.into(),
        out_dir: out.to_path_buf(),
        outputs: report_file_names(),
        config: serde_json::json!({ "rows": reports.iter().map(|r| r.name.clone()).collect::<Vec<_>>() }),
        inputs,
        seed: 0,
    };
    let stage = match plan.begin(ctx.resume)? {
        Outcome::UpToDate(r) => {
            report_up_to_date(&r, out);
            return Ok(());
        }
        Outcome::Ready(s) => s,
    };
    emit_report(reports, stage.dir())?;
    stage.commit(serde_json::Value::Null)?;
    Ok(())
}

fn report(ctx: &Ctx, inputs: &[PathBuf], out: &Path) -> CliResult<()> {
    let mut reports = Vec::with_capacity(inputs.len());
    let mut artifacts = Vec::with_capacity(inputs.len());
    for dir in inputs {
        let dir = ctx.work.existing(dir, "evaluation directory")?;
        reports.push(read_metrics(&dir)?);
        artifacts.push(ctx.work.input_artifact(&dir.join(METRICS_FILE))?);
    }
    write_report(ctx, &reports, artifacts, &ctx.work.resolve(out), "report")
}
