//! The pipeline stages behind each subcommand. Every stage takes a fully
//! resolved config, writes its outputs atomically and returns the manifest
//! that describes them.

use std::path::{Path, PathBuf};
use std::time::Instant;

use aitok_core::scene::{gen_scene, to_pgm, SceneSpec, SyntheticScene, MASK_SIDE};
use aitok_core::seq::Task;
use aitok_core::solver::{
    evaluate_depth, evaluate_instances, train_solver as fit_solver, DecodeMode, DecodeOptions, LossConfig, SolverConfig,
    SolverDataset, SolverModel, SolverState, Tokenizers,
};
use aitok_core::tensor::optim::TrainConfig;
use aitok_core::tokenizer::{
    reconstruction_iou, reconstruction_rmse, train_tokenizer as fit_tokenizer, InterpolationTokenizer, MaskAugSpec, OutputKind,
    TokenizerConfig, TokenizerDataset, TokenizerModel, TrainState,
};
use aitok_core::metrics::iou;
use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use crate::manifest::{FileEntry, RunManifest, MANIFEST};
use crate::store;

pub const CHECKPOINT: &str = "checkpoint.bin";
pub const METRICS: &str = "metrics.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenDataConfig {
    pub spec: SceneSpec,
    pub n: usize,
    pub seed: u64,
    /// PGM previews for the first this-many scenes.
    pub previews: usize,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        GenDataConfig { spec: SceneSpec::default(), n: 64, seed: 0, previews: 4 }
    }
}

pub fn scene_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64)
}

fn scene_file(i: usize) -> String {
    format!("scenes/scene-{i:05}.bin")
}

pub fn gen_data(cfg: &GenDataConfig, out: &Path) -> Result<RunManifest> {
    cfg.spec.validate()?;
    let mut m = RunManifest::new("gen-data", cfg.seed, cfg, Vec::new())?;
    for i in 0..cfg.n {
        let scene = gen_scene(&cfg.spec, scene_seed(cfg.seed, i))?;
        let rel = scene_file(i);
        let hash = store::write_archive(&out.join(&rel), &scene.to_archive(serde_json::json!({ "index": i }))?)?;
        m.add_output(&rel, hash);
        if i < cfg.previews {
            let s = cfg.spec.image_size;
            let gray: Vec<f32> = (0..s * s).map(|p| (0..3).map(|c| scene.image.data()[c * s * s + p]).sum::<f32>() / 3.0).collect();
            for (name, values) in [("image", gray), ("depth", scene.depth.normalized())] {
                let rel = format!("previews/scene-{i:05}-{name}.pgm");
                m.add_output(&rel, store::write_atomic(&out.join(&rel), &to_pgm(&values, s, s))?);
            }
        }
    }
    m.write(out)?;
    Ok(m)
}

/// Scenes of a gen-data directory, hash-checked against its manifest.
pub fn load_scenes(dir: &Path) -> Result<(Vec<SyntheticScene>, Vec<FileEntry>)> {
    let m = RunManifest::load(dir).with_context(|| format!("{} is not a data directory", dir.display()))?;
    m.expect_command("gen-data")?;
    let mut scenes = Vec::new();
    let mut inputs = Vec::new();
    for o in m.outputs.iter().filter(|o| o.path.starts_with("scenes/")) {
        let path = dir.join(&o.path);
        let bytes = store::read(&path)?;
        let hash = store::sha256_hex(&bytes);
        if hash != o.sha256 {
            bail!("{} does not match its manifest hash", path.display());
        }
        let a = aitok_core::tensor::io::Archive::from_bytes(&bytes)?;
        scenes.push(SyntheticScene::from_archive(&a)?);
        inputs.push(FileEntry { path: path.display().to_string(), sha256: hash });
    }
    Ok((scenes, inputs))
}

pub fn mask_crops(scenes: &[SyntheticScene]) -> Vec<Vec<bool>> {
    scenes.iter().flat_map(|s| s.instances.iter().map(|i| i.mask64.clone())).collect()
}

fn tokenizer_data(task: OutputKind, scenes: &[SyntheticScene]) -> Result<TokenizerDataset> {
    Ok(match task {
        OutputKind::Depth => TokenizerDataset::from_depth(&scenes.iter().map(|s| s.depth.clone()).collect::<Vec<_>>())?,
        OutputKind::Mask => TokenizerDataset::from_masks(&mask_crops(scenes), MASK_SIDE)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainTokenizerConfig {
    pub data: PathBuf,
    pub tokenizer: TokenizerConfig,
    pub train: TrainConfig,
    pub mask_aug: Option<MaskAugSpec>,
    pub model_seed: u64,
}

impl Default for TrainTokenizerConfig {
    fn default() -> Self {
        TrainTokenizerConfig {
            data: PathBuf::from("data"),
            tokenizer: TokenizerConfig::depth(),
            train: TrainConfig::default(),
            mask_aug: None,
            model_seed: 0,
        }
    }
}

fn write_metrics<M: Serialize>(path: &Path, rows: &[M]) -> Result<String> {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    store::write_atomic(path, s.as_bytes())
}

fn read_metrics<M: for<'de> Deserialize<'de>>(path: &Path, keep: usize) -> Result<Vec<M>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = String::from_utf8(store::read(path)?)?;
    text.lines().take(keep).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

/// Trains (or, with `resume`, continues) a tokenizer. A checkpoint with
/// optimizer state and the metrics log are rewritten after every epoch.
pub fn train_tokenizer(cfg: &TrainTokenizerConfig, out: &Path, resume: bool, log: &mut dyn FnMut(&str)) -> Result<RunManifest> {
    let (scenes, inputs) = load_scenes(&cfg.data)?;
    let data = tokenizer_data(cfg.tokenizer.task, &scenes)?;
    let ckpt = out.join(CHECKPOINT);
    let (mut model, mut state) = if resume && ckpt.exists() {
        let a = store::read_archive(&ckpt)?;
        let model = TokenizerModel::<f32>::from_archive(&a)?;
        if model.config != cfg.tokenizer {
            bail!("checkpoint {} was trained with a different tokenizer config", ckpt.display());
        }
        let state: TrainState = serde_json::from_value(a.manifest["train_state"].clone()).context("checkpoint lacks train_state")?;
        log(&format!("resuming from epoch {}", state.epoch));
        (model, state)
    } else {
        (TokenizerModel::<f32>::build(cfg.tokenizer.clone(), cfg.model_seed)?, TrainState::default())
    };
    let mut rows = read_metrics(&out.join(METRICS), state.epoch)?;
    fit_tokenizer(&mut model, &data, &cfg.train, cfg.mask_aug.as_ref(), &mut state, |m, model, state| {
        rows.push(m.clone());
        log(&serde_json::to_string(m).unwrap_or_default());
        let a = model.to_archive(serde_json::json!({ "train_state": state, "train": cfg.train }), true)?;
        store::write_archive(&ckpt, &a).map_err(|e| aitok_core::Error::Contract(e.to_string()))?;
        write_metrics(&out.join(METRICS), &rows).map_err(|e| aitok_core::Error::Contract(e.to_string()))?;
        Ok(())
    })?;
    if !ckpt.exists() {
        let a = model.to_archive(serde_json::json!({ "train_state": state, "train": cfg.train }), true)?;
        store::write_archive(&ckpt, &a)?;
        write_metrics(&out.join(METRICS), &rows)?;
    }
    let mut m = RunManifest::new("train-tokenizer", cfg.train.seed, cfg, inputs)?;
    m.add_output(CHECKPOINT, store::hash_file(&ckpt)?);
    m.add_output(METRICS, store::hash_file(&out.join(METRICS))?);
    m.write(out)?;
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSolverConfig {
    pub data: PathBuf,
    pub tasks: Vec<Task>,
    pub depth_tokenizer: Option<PathBuf>,
    pub mask_tokenizer: Option<PathBuf>,
    pub solver: SolverConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub model_seed: u64,
}

impl Default for TrainSolverConfig {
    fn default() -> Self {
        TrainSolverConfig {
            data: PathBuf::from("data"),
            tasks: vec![Task::Dep],
            depth_tokenizer: None,
            mask_tokenizer: None,
            solver: SolverConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            model_seed: 0,
        }
    }
}

/// Frozen tokenizers loaded from checkpoint paths, with their hashes.
pub struct LoadedTokenizers {
    pub depth: Option<TokenizerModel<f32>>,
    pub mask: Option<TokenizerModel<f32>>,
    pub inputs: Vec<FileEntry>,
}

impl LoadedTokenizers {
    pub fn load(depth: Option<&Path>, mask: Option<&Path>) -> Result<Self> {
        let mut inputs = Vec::new();
        let mut one = |p: Option<&Path>, kind: OutputKind| -> Result<Option<TokenizerModel<f32>>> {
            let Some(p) = p else { return Ok(None) };
            let bytes = store::read(p)?;
            inputs.push(FileEntry { path: p.display().to_string(), sha256: store::sha256_hex(&bytes) });
            let t = TokenizerModel::<f32>::from_archive(&aitok_core::tensor::io::Archive::from_bytes(&bytes)?)
                .with_context(|| format!("loading tokenizer {}", p.display()))?;
            if t.config.task != kind {
                bail!("{} holds a {:?} tokenizer, expected {kind:?}", p.display(), t.config.task);
            }
            Ok(Some(t))
        };
        let depth = one(depth, OutputKind::Depth)?;
        let mask = one(mask, OutputKind::Mask)?;
        Ok(LoadedTokenizers { depth, mask, inputs })
    }

    pub fn view(&self) -> Tokenizers<'_> {
        Tokenizers { depth: self.depth.as_ref(), mask: self.mask.as_ref() }
    }
}

/// Every way the solver's vocabulary or depth grid disagrees with the
/// tokenizers it is paired with.
pub fn vocabulary_diff(solver: &SolverConfig, toks: &LoadedTokenizers) -> Vec<String> {
    let mut diff = Vec::new();
    if let Some(d) = &toks.depth {
        if solver.vocab.depth_codes != d.config.codebook_size {
            diff.push(format!("vocab.depth_codes: solver {} vs depth tokenizer codebook {}", solver.vocab.depth_codes, d.config.codebook_size));
        }
        match d.grid_dims(solver.image_size, solver.image_size) {
            Ok((h, w)) if [h, w] != solver.depth_grid => {
                diff.push(format!("depth_grid: solver {:?} vs depth tokenizer grid [{h}, {w}]", solver.depth_grid))
            }
            Err(e) => diff.push(format!("depth tokenizer cannot tokenize {0}x{0} maps: {e}", solver.image_size)),
            _ => {}
        }
    }
    if let Some(m) = &toks.mask {
        if solver.vocab.mask_codes != m.config.codebook_size {
            diff.push(format!("vocab.mask_codes: solver {} vs mask tokenizer codebook {}", solver.vocab.mask_codes, m.config.codebook_size));
        }
    }
    diff
}

pub fn ensure_compatible(solver: &SolverConfig, toks: &LoadedTokenizers) -> Result<()> {
    let diff = vocabulary_diff(solver, toks);
    if !diff.is_empty() {
        bail!("solver and tokenizer checkpoints are incompatible:\n  {}", diff.join("\n  "));
    }
    Ok(())
}

pub fn train_solver(cfg: &TrainSolverConfig, out: &Path, resume: bool, log: &mut dyn FnMut(&str)) -> Result<RunManifest> {
    let toks = LoadedTokenizers::load(cfg.depth_tokenizer.as_deref(), cfg.mask_tokenizer.as_deref())?;
    ensure_compatible(&cfg.solver, &toks)?;
    let (scenes, mut inputs) = load_scenes(&cfg.data)?;
    inputs.extend(toks.inputs.iter().cloned());
    let data = SolverDataset::from_scenes(&scenes, toks.depth.as_ref(), cfg.tasks.contains(&Task::Ins))?;
    let ckpt = out.join(CHECKPOINT);
    let (mut model, mut state) = if resume && ckpt.exists() {
        let a = store::read_archive(&ckpt)?;
        let model = SolverModel::<f32>::from_archive(&a)?;
        if model.config != cfg.solver {
            bail!("checkpoint {} was trained with a different solver config", ckpt.display());
        }
        let state: SolverState = serde_json::from_value(a.manifest["train_state"].clone()).context("checkpoint lacks train_state")?;
        log(&format!("resuming from epoch {}", state.epoch));
        (model, state)
    } else {
        (SolverModel::<f32>::build(cfg.solver.clone(), cfg.model_seed)?, SolverState::default())
    };
    let mut rows = read_metrics(&out.join(METRICS), state.epoch)?;
    let save = |model: &SolverModel<f32>, state: &SolverState| -> Result<()> {
        let a = model.to_archive(serde_json::json!({ "train_state": state, "tasks": cfg.tasks }), true)?;
        store::write_archive(&ckpt, &a)?;
        Ok(())
    };
    fit_solver(&mut model, &data, &toks.view(), &cfg.loss, &cfg.train, &cfg.tasks, &mut state, |m, model, state| {
        rows.push(m.clone());
        log(&serde_json::to_string(m).unwrap_or_default());
        let io = |e: anyhow::Error| aitok_core::Error::Contract(e.to_string());
        save(model, state).map_err(io)?;
        write_metrics(&out.join(METRICS), &rows).map_err(io)?;
        Ok(())
    })?;
    if !ckpt.exists() {
        save(&model, &state)?;
        write_metrics(&out.join(METRICS), &rows)?;
    }
    let mut m = RunManifest::new("train-solver", cfg.train.seed, cfg, inputs)?;
    m.add_output(CHECKPOINT, store::hash_file(&ckpt)?);
    m.add_output(METRICS, store::hash_file(&out.join(METRICS))?);
    m.write(out)?;
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub ckpt: PathBuf,
    pub data: PathBuf,
    /// Solver checkpoints only; tokenizer checkpoints evaluate their own task.
    pub task: Task,
    pub decode: DecodeOptions,
    pub depth_tokenizer: Option<PathBuf>,
    pub mask_tokenizer: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ckpt: PathBuf::from(CHECKPOINT),
            data: PathBuf::from("data"),
            task: Task::Dep,
            decode: DecodeOptions::default(),
            depth_tokenizer: None,
            mask_tokenizer: None,
        }
    }
}

/// Metrics of a solver or tokenizer checkpoint on a data directory. With
/// `out`, the metrics and a manifest are also written there.
pub fn eval(cfg: &EvalConfig, out: Option<&Path>) -> Result<serde_json::Value> {
    let (scenes, mut inputs) = load_scenes(&cfg.data)?;
    let bytes = store::read(&cfg.ckpt)?;
    inputs.push(FileEntry { path: cfg.ckpt.display().to_string(), sha256: store::sha256_hex(&bytes) });
    let a = aitok_core::tensor::io::Archive::<f32>::from_bytes(&bytes)?;
    let kind = a.manifest.get("kind").and_then(|k| k.as_str()).unwrap_or_default().to_string();
    let started = Instant::now();
    let metrics = match kind.as_str() {
        "tokenizer" => {
            let t = TokenizerModel::<f32>::from_archive(&a)?;
            let data = tokenizer_data(t.config.task, &scenes)?;
            match t.config.task {
                OutputKind::Depth => serde_json::json!({
                    "task": "depth_tokenizer",
                    "rmse": reconstruction_rmse(&t, &data, &data.inputs, None)?,
                }),
                OutputKind::Mask => serde_json::json!({
                    "task": "mask_tokenizer",
                    "mean_iou": reconstruction_iou(&t, &data)?,
                    "interpolation_mean_iou": interpolation_iou(&mask_crops(&scenes), t.ratio())?,
                }),
            }
        }
        "solver" => {
            let model = SolverModel::<f32>::from_archive(&a)?;
            let toks = LoadedTokenizers::load(cfg.depth_tokenizer.as_deref(), cfg.mask_tokenizer.as_deref())?;
            ensure_compatible(&model.config, &toks)?;
            inputs.extend(toks.inputs.iter().cloned());
            let data = SolverDataset::from_scenes(&scenes, toks.depth.as_ref(), cfg.task == Task::Ins)?;
            let mode = match cfg.decode.mode {
                DecodeMode::Hard => "hard",
                DecodeMode::Soft => "soft",
            };
            let metrics = match cfg.task {
                Task::Dep => {
                    if toks.depth.is_none() {
                        bail!("depth evaluation needs --depth-tokenizer");
                    }
                    serde_json::to_value(evaluate_depth(&model, &data, &cfg.decode, &toks.view())?)?
                }
                Task::Ins => serde_json::to_value(evaluate_instances(&model, &data, &cfg.decode, &toks.view())?)?,
            };
            serde_json::json!({ "task": cfg.task, "mode": mode, "decode": cfg.decode, "metrics": metrics })
        }
        other => bail!("{} is not a checkpoint (kind {other:?})", cfg.ckpt.display()),
    };
    eprintln!("eval took {:.2}s", started.elapsed().as_secs_f64());
    if let Some(out) = out {
        let mut m = RunManifest::new("eval", 0, cfg, inputs)?;
        m.add_output("metrics.json", store::write_json(&out.join("metrics.json"), &metrics)?);
        m.write(out)?;
    }
    Ok(metrics)
}

/// Mean IoU of the nearest-neighbor interpolation codec on 64×64 crops.
pub fn interpolation_iou(crops: &[Vec<bool>], ratio: usize) -> Result<f64> {
    let interp = InterpolationTokenizer::for_masks(ratio);
    let mut total = 0.0;
    for m in crops {
        let x: Vec<f32> = m.iter().map(|&b| b as u8 as f32).collect();
        let y = interp.decode(&interp.encode(&x, MASK_SIDE, MASK_SIDE)?)?;
        let p: Vec<bool> = y.iter().map(|&v| v >= 0.5).collect();
        total += iou(&p, m);
    }
    Ok(total / crops.len().max(1) as f64)
}

/// Reruns the command recorded in a manifest into `out`.
pub fn replay(manifest: &RunManifest, out: &Path, log: &mut dyn FnMut(&str)) -> Result<RunManifest> {
    let cfg = manifest.config.clone();
    match manifest.command.as_str() {
        "gen-data" => gen_data(&serde_json::from_value(cfg)?, out),
        "train-tokenizer" => train_tokenizer(&serde_json::from_value(cfg)?, out, false, log),
        "train-solver" => train_solver(&serde_json::from_value(cfg)?, out, false, log),
        "eval" => {
            eval(&serde_json::from_value(cfg)?, Some(out))?;
            RunManifest::load(&out.join(MANIFEST))
        }
        other => Err(anyhow!("manifest command {other:?} cannot be replayed")),
    }
}
