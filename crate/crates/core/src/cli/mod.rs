//! Command-line front end. Each subcommand runs one pipeline stage against
//! an output directory, so stages can be run one by one or all at once with
//! `run`. Exit codes: 0 success, 1 stage failure, 2 usage error, 3 config
//! error.

mod config;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use config::{
    AopSection, ConfigError, DataSection, EvalSection, OapSection, RunConfig, SplitSection,
    VerbFinetuneSection,
};

use crate::bench::{
    aop_ablation, build_ov_split, evaluate_predictions, finetune_stage, load_annotations,
    load_dataset, object_inputs, predict_objects, predict_verb_ids, pretrain_stage, read_clips,
    read_labels, run_experiment, train_prompt_model, zero_shot_model, Dataset, ExperimentConfig,
    ExperimentError, ExperimentReport, Stage, ANNOTATIONS_FILE, BASELINE_CHECKPOINT, CLIPS_FILE,
    OAP_CHECKPOINT, PROMPTS_BASE, PROMPTS_NOVEL, REPORT_FILE, VERB_CHECKPOINT,
};
use crate::contrastive::gradient_conformance;
use crate::encoder::{read_checkpoint, write_checkpoint, Checkpoint, Classifier, Encoder};
use crate::prompt::PromptModel;

pub const EXIT_OK: i32 = 0;
pub const EXIT_STAGE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;

/// Resolved config written next to every stage's outputs.
pub const CONFIG_ECHO: &str = "config.toml";
/// Failure threshold of `gradcheck`.
pub const GRADCHECK_TOL: f64 = 1e-5;

#[derive(Debug, Parser)]
#[command(
    name = "ovrec",
    version,
    about = "Open-vocabulary verb/object recognition pipeline",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// Run configuration (TOML with per-stage tables).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed; overrides `seed` in the config.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Directory holding stage inputs and outputs.
    #[arg(long, value_name = "DIR", default_value = "ovrec-out")]
    out: PathBuf,
    /// Worker-count hint.
    #[arg(long, value_name = "N")]
    threads: Option<usize>,
    /// Validate the config and print it without running anything.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic corpus: annotations, clips and split.
    SynthData(Common),
    /// Build a rule-based open-vocabulary split over an annotation table.
    Split(Common),
    /// Contrastive verb pretraining with guiding augmentations.
    Pretrain(Common),
    /// Fine-tune the verb classifier (and the cross-entropy baseline).
    FinetuneVerb(Common),
    /// Train the novel-tuned and base-tuned object prompt models.
    TrainPrompts(Common),
    /// Classify the test segments and write the metrics report.
    Eval(Common),
    /// Every stage in order.
    Run(Common),
    /// Check analytic loss gradients against finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Number of random batches.
        #[arg(long, default_value_t = 100)]
        batches: usize,
    },
    /// Render a report as a markdown table.
    ExportReport {
        #[command(flatten)]
        common: Common,
        /// Report to render; defaults to the one in the output directory.
        #[arg(long, value_name = "PATH")]
        report: Option<PathBuf>,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Stage(#[from] ExperimentError),
    #[error("gradient check failed: max relative error {0:e} >= {GRADCHECK_TOL:e}")]
    Gradcheck(f64),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Stage(_) | CliError::Gradcheck(_) => EXIT_STAGE,
        }
    }
}

/// Parses `argv` (program name first) and runs the subcommand, printing to
/// stdout and stderr. Returns the process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    dispatch_to(argv, &mut std::io::stdout(), &mut std::io::stderr())
}

pub fn dispatch_to<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{text}");
                    EXIT_USAGE
                }
            };
        }
    };
    match execute(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

struct Resolved {
    run: RunConfig,
    exp: ExperimentConfig,
    out: PathBuf,
}

fn resolve(common: &Common) -> Result<Resolved, ConfigError> {
    let mut run = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if common.seed.is_some() {
        run.seed = common.seed;
    }
    if common.threads.is_some() {
        run.threads = common.threads;
    }
    if run.threads == Some(0) {
        return Err(ConfigError::Invalid("threads must be at least 1".into()));
    }
    let exp = run.resolve()?.seeded();
    Ok(Resolved {
        run,
        exp,
        out: common.out.clone(),
    })
}

fn execute(command: Command, out: &mut dyn Write) -> Result<(), CliError> {
    let (common, name) = match &command {
        Command::SynthData(c) => (c, "synth-data"),
        Command::Split(c) => (c, "split"),
        Command::Pretrain(c) => (c, "pretrain"),
        Command::FinetuneVerb(c) => (c, "finetune-verb"),
        Command::TrainPrompts(c) => (c, "train-prompts"),
        Command::Eval(c) => (c, "eval"),
        Command::Run(c) => (c, "run"),
        Command::Gradcheck { common, .. } => (common, "gradcheck"),
        Command::ExportReport { common, .. } => (common, "export-report"),
    };
    if let Command::ExportReport { common, report } = &command {
        return export_report(common, report.as_deref(), out);
    }
    let r = resolve(common)?;
    if common.dry_run {
        let _ = writeln!(
            out,
            "# {name} (dry run)\n# output directory: {}",
            r.out.display()
        );
        let _ = write!(out, "{}", r.run.to_toml());
        return Ok(());
    }
    match command {
        Command::Gradcheck { batches, .. } => gradcheck(&r, batches, out),
        Command::SynthData(_) => stage_output(&r, Stage::Data, |r| {
            load_dataset(&r.exp)?
                .write(&r.out)
                .map_err(at(Stage::Write))
        }),
        Command::Split(_) => stage_output(&r, Stage::Split, split),
        Command::Pretrain(_) => stage_output(&r, Stage::Pretrain, pretrain),
        Command::FinetuneVerb(_) => stage_output(&r, Stage::FinetuneVerb, finetune),
        Command::TrainPrompts(_) => stage_output(&r, Stage::TrainPrompts, prompts),
        Command::Eval(_) => {
            let report = stage_output(&r, Stage::Evaluate, eval)?;
            let _ = write!(out, "{}", report.to_markdown());
            Ok(())
        }
        Command::Run(_) => {
            fs::create_dir_all(&r.out).map_err(at(Stage::Write))?;
            write_echo(&r)?;
            let outcome = run_experiment(&r.exp, Some(&r.out))?;
            let _ = write!(out, "{}", outcome.report.to_markdown());
            Ok(())
        }
        Command::ExportReport { .. } => unreachable!("handled above"),
    }
}

fn at<E: Into<Box<dyn std::error::Error + Send + Sync>>>(
    stage: Stage,
) -> impl FnOnce(E) -> ExperimentError {
    move |e| ExperimentError::new(stage, e)
}

fn write_echo(r: &Resolved) -> Result<(), ExperimentError> {
    fs::write(r.out.join(CONFIG_ECHO), r.run.to_toml()).map_err(at(Stage::Write))
}

fn stage_output<T>(
    r: &Resolved,
    stage: Stage,
    f: impl FnOnce(&Resolved) -> Result<T, ExperimentError>,
) -> Result<T, CliError> {
    fs::create_dir_all(&r.out).map_err(at(stage))?;
    write_echo(r)?;
    Ok(f(r)?)
}

fn gradcheck(r: &Resolved, batches: usize, out: &mut dyn Write) -> Result<(), CliError> {
    let report = gradient_conformance(r.exp.seed, batches).map_err(at(Stage::Pretrain))?;
    for (name, err) in report.rows() {
        let _ = writeln!(out, "{name:<24} max relative error {err:.3e}");
    }
    if report.max() < GRADCHECK_TOL {
        Ok(())
    } else {
        Err(CliError::Gradcheck(report.max()))
    }
}

fn read_dataset(r: &Resolved) -> Result<Dataset, ExperimentError> {
    Dataset::read(&r.out).map_err(at(Stage::Data))
}

fn split(r: &Resolved) -> Result<(), ExperimentError> {
    let (annotations, clips, labels) = match (&r.exp.data.annotations, &r.exp.data.clips) {
        (Some(a), Some(c)) => (a.clone(), c.clone(), None),
        _ => (
            r.out.join(ANNOTATIONS_FILE),
            r.out.join(CLIPS_FILE),
            read_labels(&r.out).map_err(at(Stage::Data))?,
        ),
    };
    let table = load_annotations(&annotations, labels.as_ref()).map_err(at(Stage::Data))?;
    let clips = read_clips(&clips).map_err(at(Stage::Data))?;
    let split = build_ov_split(&table, &r.exp.split).map_err(at(Stage::Split))?;
    let ds = Dataset {
        clips,
        table,
        split,
    };
    ds.write(&r.out).map_err(at(Stage::Write))
}

fn pretrain(r: &Resolved) -> Result<(), ExperimentError> {
    let ds = read_dataset(r)?;
    let oap = pretrain_stage(&ds, &r.exp)?;
    let ckpt = Checkpoint::from_models(&oap.encoder, Some(&oap.projection), None);
    write_checkpoint(&r.out.join(OAP_CHECKPOINT), &ckpt).map_err(at(Stage::Write))
}

fn verb_model(
    path: &Path,
    stage: Stage,
) -> Result<(Encoder<f32>, Classifier<f32>), ExperimentError> {
    let ckpt = read_checkpoint(path).map_err(at(stage))?;
    let enc = ckpt.encoder().map_err(at(stage))?;
    let cls = ckpt.classifier().ok_or_else(|| {
        ExperimentError::new(stage, format!("{} has no verb classifier", path.display()))
    })?;
    Ok((enc, cls))
}

fn finetune(r: &Resolved) -> Result<(), ExperimentError> {
    let ds = read_dataset(r)?;
    let enc = read_checkpoint(&r.out.join(OAP_CHECKPOINT))
        .and_then(|c| c.encoder())
        .map_err(at(Stage::FinetuneVerb))?;
    let (enc, cls) = finetune_stage(&ds, Some(enc), &r.exp)?;
    write_checkpoint(
        &r.out.join(VERB_CHECKPOINT),
        &Checkpoint::from_models(&enc, None, Some(&cls)),
    )
    .map_err(at(Stage::Write))?;
    if r.exp.eval.baseline {
        let (enc, cls) = finetune_stage(&ds, None, &r.exp)?;
        write_checkpoint(
            &r.out.join(BASELINE_CHECKPOINT),
            &Checkpoint::from_models(&enc, None, Some(&cls)),
        )
        .map_err(at(Stage::Write))?;
    }
    Ok(())
}

fn prompts(r: &Resolved) -> Result<(), ExperimentError> {
    let ds = read_dataset(r)?;
    let (enc, _) = verb_model(&r.out.join(VERB_CHECKPOINT), Stage::TrainPrompts)?;
    let inputs = object_inputs(&ds, &enc, &r.exp)?;
    for (cfg, file) in [
        (&r.exp.aop.novel, PROMPTS_NOVEL),
        (&r.exp.aop.base, PROMPTS_BASE),
    ] {
        let (model, _) = train_prompt_model(&inputs, &ds, cfg)?;
        let json = model.to_json().map_err(at(Stage::Write))?;
        fs::write(r.out.join(file), json).map_err(at(Stage::Write))?;
    }
    Ok(())
}

fn read_prompts(path: &Path) -> Result<PromptModel, ExperimentError> {
    let text = fs::read_to_string(path).map_err(at(Stage::Classify))?;
    PromptModel::from_json(&text).map_err(at(Stage::Classify))
}

fn eval(r: &Resolved) -> Result<ExperimentReport, ExperimentError> {
    let ds = read_dataset(r)?;
    let (_, test) = ds.partition();
    let (enc, cls) = verb_model(&r.out.join(VERB_CHECKPOINT), Stage::Classify)?;
    let inputs = object_inputs(&ds, &enc, &r.exp)?;
    let novel = read_prompts(&r.out.join(PROMPTS_NOVEL))?;
    let base = read_prompts(&r.out.join(PROMPTS_BASE))?;
    let verbs = predict_verb_ids(&ds, &test, &enc, &cls)?;
    let objects = predict_objects(&inputs, &test, &novel, Some(&base), r.exp.aop.gamma)?;
    let method = evaluate_predictions(&ds, &test, &verbs, &objects)?;

    let baseline_path = r.out.join(BASELINE_CHECKPOINT);
    let baseline = if r.exp.eval.baseline && baseline_path.exists() {
        let (benc, bcls) = verb_model(&baseline_path, Stage::Classify)?;
        let bverbs = predict_verb_ids(&ds, &test, &benc, &bcls)?;
        let bobjects = predict_objects(
            &inputs,
            &test,
            &zero_shot_model(&inputs, &r.exp)?,
            None,
            1.0,
        )?;
        Some(evaluate_predictions(&ds, &test, &bverbs, &bobjects)?)
    } else {
        None
    };
    let ablation = if r.exp.eval.ablation {
        Some(aop_ablation(&inputs, &ds, &r.exp)?)
    } else {
        None
    };
    let report = ExperimentReport {
        seed: r.exp.seed,
        crop_fallbacks: inputs.fallbacks,
        method,
        baseline,
        ablation,
    };
    let text = report.to_toml().map_err(at(Stage::Write))?;
    fs::write(r.out.join(REPORT_FILE), text).map_err(at(Stage::Write))?;
    Ok(report)
}

fn export_report(
    common: &Common,
    report: Option<&Path>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let path = report
        .map(Path::to_path_buf)
        .unwrap_or_else(|| common.out.join(REPORT_FILE));
    if common.dry_run {
        let _ = writeln!(
            out,
            "# export-report (dry run)\n# report: {}",
            path.display()
        );
        return Ok(());
    }
    let text = fs::read_to_string(&path).map_err(at(Stage::Write))?;
    let report = ExperimentReport::from_toml(&text).map_err(at(Stage::Write))?;
    let _ = write!(out, "{}", report.to_markdown());
    Ok(())
}
