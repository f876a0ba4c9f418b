//! Command-line front end. Exit codes: 0 success, 1 usage, 2 data, 3 numeric.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::{Preset, RunConfig, SharingMode};
use crate::data::{DataConfig, Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, few_shot, finetune, Classifier, EvalReport, Protocol};
use crate::geom::PointCloud;
use crate::gradcheck::check_model;
use crate::model::Model;
use crate::params::OwnerCount;
use crate::render::render_cloud;
use crate::train::{pretrain, PretrainOptions};

pub const GRADCHECK_TOL: f64 = 1e-3;

#[derive(Debug, Parser)]
#[command(name = "pcexpert", version, about = "Point-cloud expert pre-training and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Warm up the image tower, then run self-supervised pre-training.
    Pretrain(PretrainArgs),
    /// Train a classification head under one protocol and evaluate it.
    Finetune(FinetuneArgs),
    /// Evaluate a fine-tuned checkpoint (or probe a pre-trained one).
    Eval(EvalArgs),
    /// Episodic few-shot evaluation.
    Fewshot(FewshotArgs),
    /// Render a point cloud to a PPM image.
    Render(RenderArgs),
    /// Print the parameter count table of a preset.
    Params(ParamsArgs),
    /// Finite-difference check of the full pre-training loss.
    Gradcheck(GradcheckArgs),
    /// Generate the synthetic shape dataset.
    GenData(GenDataArgs),
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Run configuration file; defaults to the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "desk")]
    pub preset: Preset,
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset directory; generated from the config when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub stop_after: Option<usize>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value = "linear")]
    pub protocol: Protocol,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory; defaults to `finetune-<protocol>` next to the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Protocol used when the checkpoint has no classification head yet.
    #[arg(long, default_value = "linear")]
    pub protocol: Protocol,
    #[arg(long, default_value = "test")]
    pub split: SplitArg,
    /// Report path; defaults to `eval-<split>.json` next to the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Args)]
pub struct FewshotArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub way: Option<usize>,
    #[arg(long)]
    pub shot: Option<usize>,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub query: Option<usize>,
    #[arg(long, default_value = "linear")]
    pub protocol: Protocol,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report path; defaults to `fewshot-<way>way-<shot>shot.json` next to the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Point cloud in `x y z` text format.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub yaw: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "desk")]
    pub preset: Preset,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    #[arg(long, default_value = "desk")]
    pub preset: Preset,
    #[arg(long, default_value = "shared")]
    pub sharing: SharingArg,
    #[arg(long)]
    pub json: bool,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum SharingArg {
    Shared,
    Separate,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "desk")]
    pub preset: Preset,
    #[arg(long, default_value_t = 2)]
    pub samples: usize,
    /// Sampled coordinates per tensor, on top of the largest-gradient one.
    #[arg(long, default_value_t = 3)]
    pub coords: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub h: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Run configuration whose `[data]` section is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Parses `argv` and runs the command, returning the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Fewshot(a) => cmd_fewshot(a),
        Command::Render(a) => cmd_render(a),
        Command::Params(a) => cmd_params(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::GenData(a) => cmd_gen_data(a),
    }
}

fn load_run(config: Option<&Path>, preset: Preset) -> Result<RunConfig> {
    match config {
        Some(p) => RunConfig::from_file(p),
        None => Ok(RunConfig::preset(preset)),
    }
}

fn load_data(dir: Option<&Path>, cfg: &DataConfig) -> Result<Dataset> {
    match dir {
        Some(d) => Dataset::load(d),
        None => Dataset::generate(cfg),
    }
}

fn run_of(ck: &Checkpoint) -> Result<RunConfig> {
    ck.meta.run.clone().ok_or_else(|| Error::Checkpoint("checkpoint does not record its run configuration".into()))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn sibling(ckpt: &Path, name: &str) -> PathBuf {
    ckpt.parent().unwrap_or(Path::new(".")).join(name)
}

fn print_report(r: &EvalReport) {
    println!("protocol {}  OA {:.2}% ({}/{})", r.protocol, r.overall_accuracy, r.correct, r.total);
    if let Some(e) = &r.episodes {
        println!("episodes {}  mean {:.2}%  std {:.2}", e.episodes, e.mean, e.std);
    }
}

fn cmd_pretrain(a: PretrainArgs) -> Result<()> {
    let run = load_run(a.config.as_deref(), a.preset)?;
    run.validate()?;
    let data = load_data(a.data.as_deref(), &run.data)?;
    let resume = a.resume.as_deref().map(|p| Checkpoint::load_for(p, &run.model)).transpose()?;
    let out = pretrain(
        &run,
        &data,
        PretrainOptions { out_dir: Some(a.out.clone()), resume, stop_after: a.stop_after, verbose: !a.quiet },
    )?;
    let m = &out.checkpoint.meta;
    println!("pretrained {} epochs ({} steps), checkpoint in {}", m.epoch, m.step, a.out.display());
    if let Some(w) = &out.warmup {
        if let Some(acc) = w.test_accuracy {
            println!("image warm-up test accuracy {:.1}%", 100.0 * acc);
        }
    }
    Ok(())
}

fn cmd_finetune(a: FinetuneArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let mut run = run_of(&ck)?;
    ck.check_model(&run.model)?;
    if let Some(s) = a.seed {
        run.finetune.seed = s;
    }
    let data = load_data(a.data.as_deref(), &run.data)?;
    let clf = finetune(&ck.model, &data, a.protocol, &run)?;
    let report = evaluate(&clf, &data, Split::Test, &run)?;
    let dir = a.out.unwrap_or_else(|| sibling(&a.ckpt, &format!("finetune-{}", a.protocol)));
    std::fs::create_dir_all(&dir)?;
    clf.to_checkpoint(&ck.meta).save(&dir.join("classifier.pcxp"))?;
    std::fs::write(dir.join("config.toml"), run.to_toml_string())?;
    write_json(&dir.join("report.json"), &report)?;
    print_report(&report);
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let run = run_of(&ck)?;
    ck.check_model(&run.model)?;
    let data = load_data(a.data.as_deref(), &run.data)?;
    let clf = match ck.meta.head {
        Some(_) => Classifier::from_checkpoint(&ck)?,
        None => finetune(&ck.model, &data, a.protocol, &run)?,
    };
    let split: Split = a.split.into();
    let report = evaluate(&clf, &data, split, &run)?;
    let name = format!("eval-{}.json", if split == Split::Train { "train" } else { "test" });
    write_json(&a.out.unwrap_or_else(|| sibling(&a.ckpt, &name)), &report)?;
    print_report(&report);
    Ok(())
}

fn cmd_fewshot(a: FewshotArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let run = run_of(&ck)?;
    ck.check_model(&run.model)?;
    let data = load_data(a.data.as_deref(), &run.data)?;
    let mut spec = run.fewshot.clone();
    spec.way = a.way.unwrap_or(spec.way);
    spec.shot = a.shot.unwrap_or(spec.shot);
    spec.episodes = a.episodes.unwrap_or(spec.episodes);
    spec.query = a.query.unwrap_or(spec.query);
    let report = few_shot(&ck.model, &data, &spec, a.protocol, &run, a.seed)?;
    let name = format!("fewshot-{}way-{}shot.json", spec.way, spec.shot);
    write_json(&a.out.unwrap_or_else(|| sibling(&a.ckpt, &name)), &report)?;
    print_report(&report);
    Ok(())
}

fn cmd_render(a: RenderArgs) -> Result<()> {
    let cloud = PointCloud::read_xyz(&a.input)?;
    let cfg = RunConfig::preset(a.preset).render;
    render_cloud(&cloud, a.yaw, &cfg).write_ppm(&a.out)?;
    Ok(())
}

#[derive(Serialize)]
struct ParamsTable {
    preset: Preset,
    sharing: SharingMode,
    total: usize,
    trainable: usize,
    frozen: usize,
    trainable_fraction: f64,
    by_owner: Vec<(String, OwnerCount)>,
}

fn cmd_params(a: ParamsArgs) -> Result<()> {
    let mut cfg = RunConfig::preset(a.preset).model;
    cfg.sharing = match a.sharing {
        SharingArg::Shared => SharingMode::Shared,
        SharingArg::Separate => SharingMode::Separate,
    };
    let model: Model<f32> = Model::initialized(cfg.clone(), 0)?;
    let c = model.count();
    let table = ParamsTable {
        preset: a.preset,
        sharing: cfg.sharing,
        total: c.total,
        trainable: c.trainable,
        frozen: c.frozen,
        trainable_fraction: c.fraction,
        by_owner: c.by_owner.iter().map(|(o, n)| (o.name().to_string(), *n)).collect(),
    };
    if a.json {
        println!("{}", serde_json::to_string_pretty(&table)?);
        return Ok(());
    }
    println!("{:<12} {:>14} {:>14}", "owner", "parameters", "trainable");
    for (o, n) in &table.by_owner {
        println!("{o:<12} {:>14} {:>14}", n.total, n.trainable);
    }
    println!("{:<12} {:>14}", "total", table.total);
    println!("{:<12} {:>14}", "trainable", table.trainable);
    println!("{:<12} {:>14}", "frozen", table.frozen);
    println!("trainable fraction {:.2}%", 100.0 * table.trainable_fraction);
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let run = RunConfig::preset(a.preset);
    let r = check_model(&run, a.samples, a.coords, a.h, a.seed)?;
    let coords: usize = r.tensors.iter().map(|t| t.coords).sum();
    println!("{} tensors, {coords} coordinates, loss {:.6}", r.tensors.len(), r.loss);
    if let Some(w) = r.worst() {
        println!("worst {}: coordinate {:.3e}, directional {:.3e}", w.name, w.max_rel_err, w.directional_rel_err);
    }
    println!("max relative error {:.3e} (tolerance {GRADCHECK_TOL:.0e})", r.max_rel_err);
    if !(r.max_rel_err < GRADCHECK_TOL) {
        return Err(Error::Numeric(format!("gradient check error {:.3e} exceeds {GRADCHECK_TOL:.0e}", r.max_rel_err)));
    }
    Ok(())
}

fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::from_file(p)?.data,
        None => RunConfig::preset(Preset::Desk).data,
    };
    cfg.seed = a.seed;
    let data = Dataset::generate(&cfg)?;
    data.write(&a.out, Some(&cfg))?;
    println!("wrote {} samples ({} classes) to {}", data.samples.len(), data.num_classes, a.out.display());
    Ok(())
}
