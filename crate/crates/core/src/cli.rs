//! The `arc` command-line harness: pretraining, adaptation, evaluation,
//! cross-run reports, the gradient suite and dataset dumps.
//!
//! Exit codes: 0 success, 1 validation or argument error, 2 numerical
//! failure (non-finite loss, failed gradient check, unmet mAP floor),
//! 3 I/O error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::error::Error;
use crate::fusion::{read_detections, write_detections, Branch, Detection};
use crate::gradcheck::{run_suite, TOLERANCE};
use crate::metrics::{
    evaluate, forgetting_measure, read_csv, read_ground_truth, relative_forgetting, render_text, write_csv,
    write_ground_truth, EvalReport, GroundTruth,
};
use crate::model::{build_arc, verify_frozen, Model};
use crate::synth::{class_name, dump, generate, split, ClassMix, Scene, SceneSpec, Split, BASE_CLASSES, TASK_CLASSES};
use crate::trainer::{adapt, pretrain_base, write_log, AdaptMode, EpochLog, ExperimentConfig, Seeds};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_IO: i32 = 3;

pub const CHECKPOINT_FILE: &str = "checkpoint.arck";
pub const LOG_FILE: &str = "train_log.csv";
pub const SUMMARY_FILE: &str = "run_summary.txt";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const CONFIG_FILE: &str = "config.txt";
pub const FROZEN_FILE: &str = "frozen_check.txt";

#[derive(Debug, Parser)]
#[command(
    name = "arc",
    version,
    about = "Adaptive residual context experiments on synthetic scenes"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train backbone and base head on base-only scenes.
    Pretrain(RunArgs),
    /// Adapt a pretrained checkpoint to the task class.
    Adapt(AdaptArgs),
    /// Evaluate a checkpoint, or a detection file against ground truth.
    Eval(EvalArgs),
    /// Compare finished runs in one table.
    Report(ReportArgs),
    /// Finite-difference check of every primitive and the composed bridge.
    Gradcheck(GradcheckArgs),
    /// Write generated scenes as PGM images plus a label file.
    Data(DataArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Flat `key = value` configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, env = "ARC_OUT_DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Finetune,
    Joint,
    Arc,
}

impl From<ModeArg> for AdaptMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Finetune => AdaptMode::FineTune,
            ModeArg::Joint => AdaptMode::Joint,
            ModeArg::Arc => AdaptMode::Arc,
        }
    }
}

#[derive(Debug, Args)]
struct AdaptArgs {
    #[arg(long, value_enum)]
    mode: ModeArg,
    #[arg(long)]
    base_ckpt: PathBuf,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Base,
    Task,
    Mixed,
}

impl From<SplitArg> for ClassMix {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Base => ClassMix::BaseOnly,
            SplitArg::Task => ClassMix::TaskOnly,
            SplitArg::Mixed => ClassMix::Mixed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long, conflicts_with_all = ["dets", "gts"])]
    ckpt: Option<PathBuf>,
    /// Detection file in the shared tab-separated format.
    #[arg(long, requires = "gts")]
    dets: Option<PathBuf>,
    #[arg(long, requires = "dets")]
    gts: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "mixed")]
    split: SplitArg,
    #[arg(long, value_enum)]
    veto: Option<OnOff>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
    /// Also write the table to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    cases: usize,
    /// Flip the sign of the sigmoid derivative to show the check failing.
    #[cfg(feature = "fault-injection")]
    #[arg(long)]
    inject_sigmoid_fault: bool,
}

#[derive(Debug, Args)]
struct DataArgs {
    #[arg(long, value_enum, default_value = "mixed")]
    mix: SplitArg,
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, env = "ARC_OUT_DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn validation(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_VALIDATION,
            message: message.into(),
        }
    }

    fn numerical(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_NUMERICAL,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io(_) | Error::Checkpoint(_) => EXIT_IO,
            Error::NonFiniteLoss { .. } | Error::NoForward | Error::NonScalarLoss(_) | Error::MissingGradient(_) => {
                EXIT_NUMERICAL
            }
            _ => EXIT_VALIDATION,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

fn io_at(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError {
        code: EXIT_IO,
        message: format!("{}: {e}", path.display()),
    }
}

/// Parse `args` (program name first) and run; returns the exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn dispatch(cli: Cli) -> CliResult {
    match cli.command {
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Adapt(a) => cmd_adapt(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Report(a) => cmd_report(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Data(a) => cmd_data(a),
    }
}

/// Scalar type of every model the harness trains.
type Real = f64;

struct RunContext {
    cfg: ExperimentConfig,
    config_path: Option<PathBuf>,
    seed: u64,
    seeds: Seeds,
    out: PathBuf,
}

fn out_dir(out: Option<PathBuf>) -> CliResult<PathBuf> {
    let out = out.ok_or_else(|| CliError::validation("no output directory: pass --out or set ARC_OUT_DIR"))?;
    std::fs::create_dir_all(&out).map_err(io_at(&out))?;
    Ok(out)
}

fn context(run: RunArgs) -> CliResult<RunContext> {
    let cfg = match &run.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(io_at(p))?;
            ExperimentConfig::parse(&text).map_err(|e| CliError::validation(format!("{}: {e}", p.display())))?
        }
        None => ExperimentConfig::default(),
    };
    Ok(RunContext {
        cfg,
        config_path: run.config,
        seed: run.seed,
        seeds: Seeds::from_master(run.seed),
        out: out_dir(run.out)?,
    })
}

fn scene_spec(cfg: &ExperimentConfig) -> SceneSpec {
    SceneSpec {
        image_size: cfg.backbone.input_size,
        ..SceneSpec::default()
    }
}

fn stream(cfg: &ExperimentConfig, seeds: Seeds, mix: ClassMix) -> CliResult<Split> {
    let count = match mix {
        ClassMix::BaseOnly => cfg.base_scenes,
        ClassMix::TaskOnly => cfg.task_scenes,
        ClassMix::Mixed => cfg.mixed_scenes,
    };
    Ok(split(generate(&scene_spec(cfg), seeds.data, count, mix)?))
}

fn split_classes(mix: ClassMix) -> Vec<usize> {
    match mix {
        ClassMix::BaseOnly => BASE_CLASSES.to_vec(),
        ClassMix::TaskOnly => TASK_CLASSES.to_vec(),
        ClassMix::Mixed => BASE_CLASSES.iter().chain(&TASK_CLASSES).copied().collect(),
    }
}

fn ground_truth(scenes: &[Scene]) -> Vec<GroundTruth> {
    scenes.iter().enumerate().flat_map(|(i, s)| s.ground_truth(i)).collect()
}

fn evaluate_model(
    model: &Model<Real>,
    scenes: &[Scene],
    mix: ClassMix,
    cfg: &ExperimentConfig,
) -> CliResult<(EvalReport, Vec<Detection>)> {
    let dets = model.detect(scenes, &cfg.inference)?;
    let report = evaluate(&dets, &ground_truth(scenes), &split_classes(mix))?;
    Ok((report, dets))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult {
    std::fs::write(path, bytes).map_err(io_at(path))
}

fn write_eval(dir: &Path, split_name: &str, report: &EvalReport, title: &str) -> CliResult<Vec<String>> {
    let txt = format!("eval_{split_name}.txt");
    let csv = format!("eval_{split_name}.csv");
    write_file(&dir.join(&txt), render_text(report, title, &class_name).as_bytes())?;
    let mut buf = Vec::new();
    write_csv(&mut buf, report)?;
    write_file(&dir.join(&csv), &buf)?;
    Ok(vec![txt, csv])
}

fn write_train_log(dir: &Path, log: &[EpochLog]) -> CliResult<String> {
    let mut buf = Vec::new();
    write_log(&mut buf, log)?;
    write_file(&dir.join(LOG_FILE), &buf)?;
    Ok(LOG_FILE.to_string())
}

fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(io_at(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// `manifest.txt`: run metadata and a digest per artifact. The timestamp
/// lives only here, so every other file is reproducible byte for byte.
fn write_manifest(ctx: &RunContext, command: &str, extra: &[(&str, String)], artifacts: &[String]) -> CliResult {
    let mut s = String::new();
    let now = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let config = ctx
        .config_path
        .as_ref()
        .map_or_else(|| "(defaults)".to_string(), |p| p.display().to_string());
    let _ = writeln!(s, "command = {command}");
    let _ = writeln!(s, "seed = {}", ctx.seed);
    let _ = writeln!(s, "seed.data = {}", ctx.seeds.data);
    let _ = writeln!(s, "seed.init = {}", ctx.seeds.init);
    let _ = writeln!(s, "seed.shuffle = {}", ctx.seeds.shuffle);
    let _ = writeln!(s, "config = {config}");
    let _ = writeln!(s, "out = {}", ctx.out.display());
    let _ = writeln!(s, "build = {} ({})", env!("ARC_BUILD_ID"), env!("CARGO_PKG_VERSION"));
    let _ = writeln!(s, "timestamp = {now}");
    for (k, v) in extra {
        let _ = writeln!(s, "{k} = {v}");
    }
    let _ = writeln!(s, "[artifacts]");
    for a in artifacts {
        let _ = writeln!(s, "{}  {a}", sha256_file(&ctx.out.join(a))?);
    }
    write_file(&ctx.out.join(MANIFEST_FILE), s.as_bytes())
}

/// Ordered `key = value` lines.
#[derive(Default)]
struct Summary(Vec<(String, String)>);

impl Summary {
    fn put(&mut self, k: &str, v: impl ToString) {
        self.0.push((k.to_string(), v.to_string()));
    }

    fn render(&self) -> String {
        self.0.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// Parse a `key = value` file such as `run_summary.txt`.
pub fn read_summary(path: &Path) -> crate::error::Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Parse(format!("{}: bad line `{l}`", path.display())))
        })
        .collect()
}

fn save_config(ctx: &RunContext) -> CliResult<String> {
    write_file(&ctx.out.join(CONFIG_FILE), ctx.cfg.render().as_bytes())?;
    Ok(CONFIG_FILE.to_string())
}

fn cmd_pretrain(args: RunArgs) -> CliResult {
    let ctx = context(args)?;
    let base = stream(&ctx.cfg, ctx.seeds, ClassMix::BaseOnly)?;
    let task = stream(&ctx.cfg, ctx.seeds, ClassMix::TaskOnly)?;
    let trained = pretrain_base::<Real>(&ctx.cfg, &base.train, ctx.seeds)?;
    let mut artifacts = vec![save_config(&ctx)?];
    trained.model.checkpoint().save(&ctx.out.join(CHECKPOINT_FILE))?;
    artifacts.push(CHECKPOINT_FILE.to_string());
    artifacts.push(write_train_log(&ctx.out, &trained.log)?);

    let (base_report, _) = evaluate_model(&trained.model, &base.test, ClassMix::BaseOnly, &ctx.cfg)?;
    let (task_report, _) = evaluate_model(&trained.model, &task.test, ClassMix::TaskOnly, &ctx.cfg)?;
    artifacts.extend(write_eval(
        &ctx.out,
        "base",
        &base_report,
        "pretrained: base test split",
    )?);
    artifacts.extend(write_eval(
        &ctx.out,
        "task",
        &task_report,
        "pretrained: task test split",
    )?);

    let mut sum = Summary::default();
    sum.put("mode", "pretrained");
    sum.put("seed", ctx.seed);
    sum.put("base_map50", base_report.map50);
    sum.put("base_map5095", base_report.map5095);
    sum.put("task_map50", task_report.map50);
    sum.put("task_map5095", task_report.map5095);
    sum.put("base_map50_before", base_report.map50);
    sum.put("map_floor", ctx.cfg.map_floor);
    write_file(&ctx.out.join(SUMMARY_FILE), sum.render().as_bytes())?;
    artifacts.push(SUMMARY_FILE.to_string());
    write_manifest(&ctx, "pretrain", &[("mode", "pretrained".into())], &artifacts)?;

    println!(
        "pretrained: base mAP@0.5 {:.4} (floor {:.2}), task mAP@0.5 {:.4}",
        base_report.map50, ctx.cfg.map_floor, task_report.map50
    );
    if base_report.map50 < ctx.cfg.map_floor {
        return Err(CliError::numerical(format!(
            "pretraining did not converge: base mAP@0.5 {:.4} is below the floor {:.2}",
            base_report.map50, ctx.cfg.map_floor
        )));
    }
    Ok(())
}

fn cmd_adapt(args: AdaptArgs) -> CliResult {
    let mode: AdaptMode = args.mode.into();
    let ctx = context(args.run)?;
    let base_ckpt = Checkpoint::load(&args.base_ckpt).map_err(|e| CliError {
        code: EXIT_IO,
        message: format!("{}: {e}", args.base_ckpt.display()),
    })?;
    let size = ctx.cfg.backbone.input_size;
    let base = stream(&ctx.cfg, ctx.seeds, ClassMix::BaseOnly)?;
    let task = stream(&ctx.cfg, ctx.seeds, ClassMix::TaskOnly)?;

    let pretrained = Model::<Real>::from_checkpoint(&base_ckpt, size)?;
    let (before, _) = evaluate_model(&pretrained, &base.test, ClassMix::BaseOnly, &ctx.cfg)?;
    let trained = adapt::<Real>(&base_ckpt, mode, &base.train, &task.train, &ctx.cfg, ctx.seeds)?;
    let after_ckpt = trained.model.checkpoint();

    let mut artifacts = vec![save_config(&ctx)?];
    after_ckpt.save(&ctx.out.join(CHECKPOINT_FILE))?;
    artifacts.push(CHECKPOINT_FILE.to_string());
    artifacts.push(write_train_log(&ctx.out, &trained.log)?);

    // Reference for the frozen check: the ARC model as built, or the
    // pretrained checkpoint for the modes that train every parameter.
    let reference = match mode {
        AdaptMode::Arc => {
            Checkpoint::from_store(&build_arc::<Real>(&base_ckpt, size, &ctx.cfg.arc, ctx.seeds.init)?.store)
        }
        _ => base_ckpt.clone(),
    };
    let frozen = verify_frozen(&reference, &after_ckpt)?;
    let mut frozen_txt = String::new();
    let _ = writeln!(
        frozen_txt,
        "preserved entries identical: {}",
        if frozen.identical() { "yes" } else { "no" }
    );
    for name in &frozen.differing {
        let _ = writeln!(frozen_txt, "differs: {name}");
    }
    write_file(&ctx.out.join(FROZEN_FILE), frozen_txt.as_bytes())?;
    artifacts.push(FROZEN_FILE.to_string());

    let (base_report, _) = evaluate_model(&trained.model, &base.test, ClassMix::BaseOnly, &ctx.cfg)?;
    let (task_report, _) = evaluate_model(&trained.model, &task.test, ClassMix::TaskOnly, &ctx.cfg)?;
    artifacts.extend(write_eval(
        &ctx.out,
        "base",
        &base_report,
        &format!("{mode}: base test split"),
    )?);
    artifacts.extend(write_eval(
        &ctx.out,
        "task",
        &task_report,
        &format!("{mode}: task test split"),
    )?);

    let points = forgetting_measure(before.map50, base_report.map50);
    let relative = relative_forgetting(before.map50, base_report.map50);
    let mut sum = Summary::default();
    sum.put("mode", mode);
    sum.put("seed", ctx.seed);
    sum.put("base_map50", base_report.map50);
    sum.put("base_map5095", base_report.map5095);
    sum.put("task_map50", task_report.map50);
    sum.put("task_map5095", task_report.map5095);
    sum.put("base_map50_before", before.map50);
    sum.put("forgetting_points", points);
    sum.put(
        "forgetting_relative_pct",
        relative.map_or("n/a".to_string(), |r| r.to_string()),
    );
    sum.put("frozen_identical", frozen.identical());
    sum.put("frozen_differing", frozen.differing.len());
    write_file(&ctx.out.join(SUMMARY_FILE), sum.render().as_bytes())?;
    artifacts.push(SUMMARY_FILE.to_string());
    write_manifest(
        &ctx,
        "adapt",
        &[
            ("mode", mode.to_string()),
            ("base_checkpoint", args.base_ckpt.display().to_string()),
            ("base_checkpoint.sha256", sha256_file(&args.base_ckpt)?),
        ],
        &artifacts,
    )?;

    println!(
        "{mode}: task mAP@0.5 {:.4}, base mAP@0.5 {:.4} (before {:.4}, forgetting {:+.1} points), preserved entries identical: {}",
        task_report.map50,
        base_report.map50,
        before.map50,
        points,
        frozen.identical()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> CliResult {
    let mix: ClassMix = args.split.into();
    let mut ctx = context(args.run)?;
    match args.veto {
        Some(OnOff::On) => {
            ctx.cfg.inference.veto.get_or_insert_with(Default::default);
        }
        Some(OnOff::Off) => ctx.cfg.inference.veto = None,
        None => {}
    }
    let classes = split_classes(mix);
    let mut artifacts = Vec::new();
    let mut extra = vec![("split", mix.to_string())];
    let (report, dets, title) = match (&args.ckpt, &args.dets, &args.gts) {
        (Some(ckpt_path), None, None) => {
            let ck = Checkpoint::load(ckpt_path).map_err(|e| CliError {
                code: EXIT_IO,
                message: format!("{}: {e}", ckpt_path.display()),
            })?;
            let model = Model::<Real>::from_checkpoint(&ck, ctx.cfg.backbone.input_size)?;
            let scenes = stream(&ctx.cfg, ctx.seeds, mix)?.test;
            let gts = ground_truth(&scenes);
            let (report, dets) = evaluate_model(&model, &scenes, mix, &ctx.cfg)?;
            let mut buf = Vec::new();
            write_ground_truth(&mut buf, &gts)?;
            write_file(&ctx.out.join("ground_truth.tsv"), &buf)?;
            artifacts.push("ground_truth.tsv".to_string());
            extra.push(("checkpoint", ckpt_path.display().to_string()));
            extra.push(("checkpoint.sha256", sha256_file(ckpt_path)?));
            let veto = if ctx.cfg.inference.veto.is_some() { "on" } else { "off" };
            extra.push(("veto", veto.to_string()));
            (report, dets, format!("checkpoint on {mix} test split, veto {veto}"))
        }
        (None, Some(dp), Some(gp)) => {
            let dets = read_detections(BufReader::new(std::fs::File::open(dp).map_err(io_at(dp))?))?;
            let gts = read_ground_truth(BufReader::new(std::fs::File::open(gp).map_err(io_at(gp))?))?;
            let report = evaluate(&dets, &gts, &classes)?;
            extra.push(("detections", dp.display().to_string()));
            extra.push(("ground_truth", gp.display().to_string()));
            (report, dets, format!("detection file on {mix} classes"))
        }
        _ => return Err(CliError::validation("pass either --ckpt or both --dets and --gts")),
    };
    let mut buf = Vec::new();
    write_detections(&mut buf, &dets)?;
    write_file(&ctx.out.join("detections.tsv"), &buf)?;
    artifacts.push("detections.tsv".to_string());
    artifacts.extend(write_eval(&ctx.out, &mix.to_string(), &report, &title)?);
    let specialist = dets.iter().filter(|d| d.branch == Branch::Specialist).count();
    extra.push(("specialist_detections", specialist.to_string()));
    write_manifest(&ctx, "eval", &extra, &artifacts)?;
    println!(
        "{title}: mAP@0.5 {:.4}, mAP@0.5:0.95 {:.4}, precision {:.4}, recall {:.4}, {} detections ({specialist} specialist)",
        report.map50,
        report.map5095,
        report.precision,
        report.recall,
        dets.len()
    );
    Ok(())
}

struct RunRow {
    name: String,
    mode: String,
    task_map50: f64,
    base_map50: f64,
    before: Option<f64>,
}

fn load_run(dir: &Path) -> CliResult<RunRow> {
    let summary_path = dir.join(SUMMARY_FILE);
    let summary = read_summary(&summary_path).map_err(|e| CliError {
        code: EXIT_IO,
        message: format!("{}: {e}", summary_path.display()),
    })?;
    let get = |k: &str| summary.iter().find(|(key, _)| key == k).map(|(_, v)| v.clone());
    let mode = get("mode").ok_or_else(|| CliError::validation(format!("{}: no `mode`", summary_path.display())))?;
    let mut maps = [0.0; 2];
    for (slot, name) in maps.iter_mut().zip(["eval_task.csv", "eval_base.csv"]) {
        let p = dir.join(name);
        let f = std::fs::File::open(&p).map_err(io_at(&p))?;
        *slot = read_csv(f)
            .map_err(|e| CliError::validation(format!("{}: {e}", p.display())))?
            .map50;
    }
    let before = match mode.as_str() {
        "pretrained" => None,
        _ => Some(
            get("base_map50_before")
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| CliError::validation(format!("{}: no `base_map50_before`", summary_path.display())))?,
        ),
    };
    Ok(RunRow {
        name: dir
            .file_name()
            .map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned()),
        mode,
        task_map50: maps[0],
        base_map50: maps[1],
        before,
    })
}

/// Comparison table: one row per run, forgetting in points and percent.
fn render_report(rows: &[RunRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<16} {:<11} {:>13} {:>13} {:>17} {:>15}",
        "run", "mode", "task mAP@0.5", "base mAP@0.5", "forgetting (pts)", "forgetting (%)"
    );
    for r in rows {
        let (pts, rel) = match r.before {
            None => ("N.A".to_string(), "N.A".to_string()),
            Some(b) => (
                format!("{:+.1}", forgetting_measure(b, r.base_map50)),
                relative_forgetting(b, r.base_map50).map_or("N.A".to_string(), |v| format!("{v:+.1}")),
            ),
        };
        let _ = writeln!(
            s,
            "{:<16} {:<11} {:>12.1}% {:>12.1}% {:>17} {:>15}",
            r.name,
            r.mode,
            100.0 * r.task_map50,
            100.0 * r.base_map50,
            pts,
            rel
        );
    }
    s
}

fn cmd_report(args: ReportArgs) -> CliResult {
    let rows = args.runs.iter().map(|d| load_run(d)).collect::<CliResult<Vec<_>>>()?;
    let table = render_report(&rows);
    print!("{table}");
    if let Some(p) = &args.out {
        write_file(p, table.as_bytes())?;
    }
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> CliResult {
    if args.cases == 0 {
        return Err(CliError::validation("--cases must be at least 1"));
    }
    #[cfg(feature = "fault-injection")]
    crate::autodiff::fault::set_sigmoid_sign_flip(args.inject_sigmoid_fault);
    let checks = run_suite(args.seed, args.cases)?;
    let mut failed = Vec::new();
    for c in &checks {
        let verdict = if c.passed() { "pass" } else { "FAIL" };
        println!(
            "{:<16} cases {:>4}  max rel err {:.3e}  {verdict}",
            c.op, c.cases, c.max_rel_err
        );
        if !c.passed() {
            failed.push(c.op);
        }
    }
    if failed.is_empty() {
        println!("all {} checks within {TOLERANCE:e}", checks.len());
        Ok(())
    } else {
        Err(CliError::numerical(format!(
            "gradient check failed for: {}",
            failed.join(", ")
        )))
    }
}

fn cmd_data(args: DataArgs) -> CliResult {
    let out = out_dir(args.out)?;
    let scenes = generate(&SceneSpec::default(), args.seed, args.count, args.mix.into())?;
    dump(&scenes, &out)?;
    println!("wrote {} scenes to {}", scenes.len(), out.display());
    Ok(())
}
