//! Argument parsing and config resolution. Precedence is flags, then the
//! `--config` JSON file, then built-in defaults; the resolved config is what
//! lands in the manifest.

use std::path::{Path, PathBuf};

use aitok_core::seq::Task;
use aitok_core::solver::{DecodeMode, TaskWeights};
use aitok_core::tokenizer::{MaskAugSpec, OutputKind, TokenizerConfig};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::commands::{self, EvalConfig, GenDataConfig, TrainSolverConfig, TrainTokenizerConfig};
use crate::manifest::RunManifest;
use crate::{store, suites, InvariantViolation};

#[derive(Debug, Parser)]
#[command(name = "aitok", version, about = "Toy-scale unified token pipeline for depth and instance segmentation")]
pub struct Cli {
    /// Base directory for relative paths.
    #[arg(long, global = true, env = "AITOK_DATA_ROOT", default_value = ".")]
    pub data_root: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic scenes.
    GenData(GenDataArgs),
    /// Train a depth or mask tokenizer.
    TrainTokenizer(TrainTokenizerArgs),
    /// Train the task solver against frozen tokenizers.
    TrainSolver(TrainSolverArgs),
    /// Evaluate a tokenizer or solver checkpoint; metrics JSON on stdout.
    Eval(EvalArgs),
    /// Run a roundtrip invariant suite.
    Roundtrip(RoundtripArgs),
    /// Finite-difference check of every autodiff primitive and model toy.
    Gradcheck(GradcheckArgs),
    /// Rerun a command from its manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Scene spec JSON (overrides the config file's `spec`).
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub previews: Option<usize>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TokTask {
    Depth,
    Mask,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Training seed (shuffling, augmentation).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Parameter-initialization seed.
    #[arg(long)]
    pub model_seed: Option<u64>,
    /// Continue from the checkpoint in `--out`.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct TrainTokenizerArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub task: Option<TokTask>,
    /// Fraction of input patches blanked during training.
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    /// Spatial downsample ratio (power of two).
    #[arg(long)]
    pub ratio: Option<usize>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainSolverArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', value_parser = parse_task)]
    pub tasks: Option<Vec<Task>>,
    #[arg(long)]
    pub depth_tokenizer: Option<PathBuf>,
    #[arg(long)]
    pub mask_tokenizer: Option<PathBuf>,
    /// Auxiliary reconstruction-loss weight, applied to both tasks.
    #[arg(long)]
    pub aux_weight: Option<f64>,
    /// Train the depth task with the parallel (non-causal) head.
    #[arg(long)]
    pub parallel: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Mode {
    Hard,
    Soft,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_parser = parse_task)]
    pub task: Option<Task>,
    /// Token fed back during autoregressive decoding.
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// How depth tokens are turned into a map.
    #[arg(long, value_enum)]
    pub detokenize: Option<Mode>,
    #[arg(long)]
    pub parallel: bool,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub max_instances: Option<usize>,
    #[arg(long)]
    pub depth_tokenizer: Option<PathBuf>,
    #[arg(long)]
    pub mask_tokenizer: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Also write metrics.json and a manifest here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Vq,
    Codec,
    Interp,
    All,
}

#[derive(Debug, Args)]
pub struct RoundtripArgs {
    #[arg(long, value_enum, default_value = "all")]
    pub suite: Suite,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = suites::GRAD_TOL)]
    pub tol: f64,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// A manifest file or the directory holding one.
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Fail (exit 2) unless every output hash matches the original.
    #[arg(long)]
    pub verify: bool,
}

fn parse_task(s: &str) -> Result<Task, String> {
    match s.trim() {
        "dep" | "depth" => Ok(Task::Dep),
        "ins" | "instance" | "instances" => Ok(Task::Ins),
        other => Err(format!("unknown task {other:?} (expected dep or ins)")),
    }
}

/// Recursively overlays `patch` onto `base`; objects merge, everything
/// else replaces.
pub fn deep_merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                deep_merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

fn read_config(path: Option<&Path>) -> Result<Value> {
    match path {
        None => Ok(Value::Object(Default::default())),
        Some(p) => {
            let v: Value = serde_json::from_slice(&store::read(p)?).with_context(|| format!("parsing {}", p.display()))?;
            if !v.is_object() {
                bail!("{}: config must be a JSON object", p.display());
            }
            Ok(v)
        }
    }
}

fn layered<C: Serialize + DeserializeOwned>(defaults: C, file: Value, flags: Value) -> Result<C> {
    let mut v = serde_json::to_value(defaults)?;
    deep_merge(&mut v, file);
    deep_merge(&mut v, flags);
    serde_json::from_value(v).context("resolving config")
}

/// A flag patch: only the flags that were given.
fn patch(pairs: &[(&str, Option<Value>)]) -> Value {
    let mut out = Value::Object(Default::default());
    for (path, v) in pairs {
        let Some(v) = v else { continue };
        let mut cur = &mut out;
        let keys: Vec<&str> = path.split('.').collect();
        for k in &keys[..keys.len() - 1] {
            cur = cur.as_object_mut().expect("patch nodes are objects").entry(*k).or_insert(Value::Object(Default::default()));
        }
        cur.as_object_mut().expect("patch nodes are objects").insert(keys[keys.len() - 1].to_string(), v.clone());
    }
    out
}

fn val<T: Serialize>(v: Option<T>) -> Option<Value> {
    v.map(|x| serde_json::to_value(x).expect("flag values serialize"))
}

fn abs(root: &Path, p: &Path) -> Result<PathBuf> {
    let p = store::resolve(root, p);
    if p.is_absolute() {
        Ok(p)
    } else {
        Ok(std::env::current_dir()?.join(p))
    }
}

fn abs_opt(root: &Path, p: &Option<PathBuf>) -> Result<Option<PathBuf>> {
    p.as_deref().map(|p| abs(root, p)).transpose()
}

fn train_patch(t: &TrainArgs) -> Vec<(&'static str, Option<Value>)> {
    vec![
        ("train.epochs", val(t.epochs)),
        ("train.lr", val(t.lr)),
        ("train.batch_size", val(t.batch_size)),
        ("train.seed", val(t.seed)),
        ("model_seed", val(t.model_seed)),
    ]
}

fn stderr_log(line: &str) {
    eprintln!("{line}");
}

fn print_json(v: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

pub fn resolve_gen_data(root: &Path, a: &GenDataArgs) -> Result<GenDataConfig> {
    let spec = match &a.spec {
        Some(p) => Some(serde_json::from_slice::<Value>(&store::read(&abs(root, p)?)?).context("parsing --spec")?),
        None => None,
    };
    let flags = patch(&[("spec", spec), ("n", val(a.n)), ("seed", val(a.seed)), ("previews", val(a.previews))]);
    layered(GenDataConfig::default(), read_config(abs_opt(root, &a.config)?.as_deref())?, flags)
}

pub fn resolve_train_tokenizer(root: &Path, a: &TrainTokenizerArgs) -> Result<TrainTokenizerConfig> {
    let file = read_config(abs_opt(root, &a.config)?.as_deref())?;
    let task = match a.task {
        Some(TokTask::Depth) => OutputKind::Depth,
        Some(TokTask::Mask) => OutputKind::Mask,
        None => serde_json::from_value(file["tokenizer"]["task"].clone()).unwrap_or(OutputKind::Depth),
    };
    let defaults = TrainTokenizerConfig {
        tokenizer: match task {
            OutputKind::Depth => TokenizerConfig::depth(),
            OutputKind::Mask => TokenizerConfig::mask(),
        },
        ..TrainTokenizerConfig::default()
    };
    let mut flags = train_patch(&a.train);
    flags.push(("tokenizer.task", val(a.task.map(|_| task))));
    let mut cfg = layered(defaults, file, patch(&flags))?;
    if let Some(r) = a.ratio {
        cfg.tokenizer = cfg.tokenizer.with_ratio(r);
    }
    if a.mask_ratio.is_some() || a.patch_size.is_some() {
        let base = cfg.mask_aug.unwrap_or_default();
        cfg.mask_aug = Some(MaskAugSpec {
            mask_ratio: a.mask_ratio.unwrap_or(base.mask_ratio),
            patch_size: a.patch_size.unwrap_or(base.patch_size),
            ..base
        });
    }
    cfg.data = abs(root, a.data.as_deref().unwrap_or(&cfg.data))?;
    Ok(cfg)
}

pub fn resolve_train_solver(root: &Path, a: &TrainSolverArgs) -> Result<TrainSolverConfig> {
    let file = read_config(abs_opt(root, &a.config)?.as_deref())?;
    let mut flags = train_patch(&a.train);
    flags.push(("tasks", val(a.tasks.clone())));
    flags.push(("loss.aux_loss_weight", val(a.aux_weight.map(|w| TaskWeights { dep: w, ins: w }))));
    flags.push(("loss.parallel_depth", val(a.parallel.then_some(true))));
    let mut cfg = layered(TrainSolverConfig::default(), file, patch(&flags))?;
    cfg.data = abs(root, a.data.as_deref().unwrap_or(&cfg.data))?;
    cfg.depth_tokenizer = abs_opt(root, &a.depth_tokenizer.clone().or(cfg.depth_tokenizer.clone()))?;
    cfg.mask_tokenizer = abs_opt(root, &a.mask_tokenizer.clone().or(cfg.mask_tokenizer.clone()))?;
    Ok(cfg)
}

pub fn resolve_eval(root: &Path, a: &EvalArgs) -> Result<EvalConfig> {
    let file = read_config(abs_opt(root, &a.config)?.as_deref())?;
    let mode = |m: Option<Mode>| {
        m.map(|m| match m {
            Mode::Hard => DecodeMode::Hard,
            Mode::Soft => DecodeMode::Soft,
        })
    };
    let flags = patch(&[
        ("task", val(a.task)),
        ("decode.mode", val(mode(a.mode))),
        ("decode.soft_detokenize", val(a.detokenize.map(|m| matches!(m, Mode::Soft)))),
        ("decode.parallel", val(a.parallel.then_some(true))),
        ("decode.temperature", val(a.temperature)),
        ("decode.max_instances", val(a.max_instances)),
    ]);
    let mut cfg = layered(EvalConfig::default(), file, flags)?;
    cfg.ckpt = abs(root, a.ckpt.as_deref().unwrap_or(&cfg.ckpt))?;
    cfg.data = abs(root, a.data.as_deref().unwrap_or(&cfg.data))?;
    cfg.depth_tokenizer = abs_opt(root, &a.depth_tokenizer.clone().or(cfg.depth_tokenizer.clone()))?;
    cfg.mask_tokenizer = abs_opt(root, &a.mask_tokenizer.clone().or(cfg.mask_tokenizer.clone()))?;
    Ok(cfg)
}

fn roundtrip(a: &RoundtripArgs) -> Result<()> {
    let mut reports = Vec::new();
    if matches!(a.suite, Suite::Vq | Suite::All) {
        reports.push(suites::vq_suite(a.n, a.seed)?);
    }
    if matches!(a.suite, Suite::Codec | Suite::All) {
        reports.push(suites::codec_suite(a.n, a.seed)?);
    }
    if matches!(a.suite, Suite::Interp | Suite::All) {
        reports.push(suites::interp_suite(a.n, a.seed)?);
    }
    print_json(&reports)?;
    if let Some(bad) = reports.iter().find(|r| !r.passed()) {
        let first = bad.first_failure.clone().unwrap_or_default();
        return Err(InvariantViolation(format!("{} suite: {} of {} checks failed; first: {first}", bad.suite, bad.failures, bad.cases)).into());
    }
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let results = suites::gradient_suite(|name, err| {
        println!("{name:<32} max rel err {err:.3e}");
    })?;
    let (worst, err) = results.iter().fold(("", 0.0f64), |acc, (n, e)| if *e > acc.1 { (n.as_str(), *e) } else { acc });
    println!("max rel err {err:.3e} ({worst}) over {} checks", results.len());
    if err.is_nan() || err >= a.tol {
        return Err(InvariantViolation(format!("gradient check {worst}: relative error {err:.3e} >= {:.0e}", a.tol)).into());
    }
    Ok(())
}

fn replay(root: &Path, a: &ReplayArgs) -> Result<()> {
    let original = RunManifest::load(&abs(root, &a.manifest)?)?;
    let out = abs(root, &a.out)?;
    let rerun = commands::replay(&original, &out, &mut stderr_log)?;
    let diff = original.diff_outputs(&rerun);
    print_json(&serde_json::json!({
        "command": rerun.command,
        "output_hash": rerun.output_hash(),
        "original_output_hash": original.output_hash(),
        "identical": diff.is_empty(),
        "differences": diff,
    }))?;
    if a.verify && !diff.is_empty() {
        return Err(InvariantViolation(format!("replay differs from the original run: {}", diff.join("; "))).into());
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    let root = cli.data_root.as_path();
    match &cli.command {
        Command::GenData(a) => {
            let cfg = resolve_gen_data(root, a)?;
            let m = commands::gen_data(&cfg, &abs(root, &a.out)?)?;
            print_json(&serde_json::json!({ "scenes": cfg.n, "output_hash": m.output_hash() }))
        }
        Command::TrainTokenizer(a) => {
            let cfg = resolve_train_tokenizer(root, a)?;
            let m = commands::train_tokenizer(&cfg, &abs(root, &a.out)?, a.train.resume, &mut stderr_log)?;
            print_json(&serde_json::json!({ "input_hash": m.input_hash, "output_hash": m.output_hash() }))
        }
        Command::TrainSolver(a) => {
            let cfg = resolve_train_solver(root, a)?;
            let m = commands::train_solver(&cfg, &abs(root, &a.out)?, a.train.resume, &mut stderr_log)?;
            print_json(&serde_json::json!({ "input_hash": m.input_hash, "output_hash": m.output_hash() }))
        }
        Command::Eval(a) => {
            let cfg = resolve_eval(root, a)?;
            let out = abs_opt(root, &a.out)?;
            print_json(&commands::eval(&cfg, out.as_deref())?)
        }
        Command::Roundtrip(a) => roundtrip(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Replay(a) => replay(root, a),
    }
}
