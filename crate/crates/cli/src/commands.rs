use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use log::{info, warn};
use mft_core::data::{
    load_scene, normalize_scene, save_scene, split_from_masks, split_random, synth_scene, Coord, Scene, SceneHeader,
    Split, SynthConfig,
};
use mft_core::metrics::{render_map, EvalReport};
use mft_core::train::{evaluate, predict, Checkpoint, CheckpointManifest, EpochLog, TrainConfig, Trainer};
use mft_core::verify::{run_suite, ToyDims};
use mft_core::{MftError, ModelConfig, Rng};
use serde::Serialize;

use crate::args::{Command, EvalArgs, GradcheckArgs, InspectArgs, ReplayArgs, SplitSpec, SynthArgs, TrainArgs};
use crate::manifest::{io_err, write_json, RunManifest};
use crate::UsageError;

fn load(path: &Path) -> anyhow::Result<Scene> {
    let scene = load_scene(path).with_context(|| format!("loading scene {}", path.display()))?;
    Ok(normalize_scene(&scene)?)
}

fn make_split(scene: &Scene, spec: SplitSpec, seed: u64) -> anyhow::Result<Split> {
    Ok(match spec {
        SplitSpec::Disjoint => split_from_masks(scene)?,
        SplitSpec::Random(f) => split_random(scene, f, &Rng::new(seed))?,
        SplitSpec::All => Split { train: Vec::new(), test: scene.labeled() },
    })
}

/// `report.json` → `report.manifest.json`.
fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("manifest.json")
}

pub fn synth(a: &SynthArgs) -> anyhow::Result<()> {
    let cfg = SynthConfig {
        classes: a.classes as usize,
        rows: a.size.rows,
        cols: a.size.cols,
        bands: a.bands,
        aux_channels: a.aux_channels,
        aux_informative: !a.aux_noise,
        blobs_per_class: a.blobs,
        noise: a.noise,
        seed: a.seed,
    };
    let mut scene = synth_scene(&cfg)?;
    scene.modality = a.modality;
    save_scene(&scene, &a.output)?;
    let resolved = serde_json::to_value(&cfg)?;
    RunManifest::new(Command::Synth(a.clone()), Some(resolved)).save(&a.output.join("manifest.json"))?;

    let counts = scene.class_counts();
    println!("scene {} ({}x{}, B={}, C={})", a.output.display(), a.size.rows, a.size.cols, a.bands, a.aux_channels);
    println!("{:>8} {:>8}", "class", "pixels");
    for (c, n) in counts.iter().enumerate() {
        let name = if c == 0 { "bg".to_string() } else { c.to_string() };
        println!("{name:>8} {n:>8}");
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
struct RunResult {
    run: u64,
    seed: u64,
    split_seed: u64,
    train_pixels: usize,
    test_pixels: usize,
    epochs: usize,
    final_loss: Option<f64>,
    oa: f64,
    aa: f64,
    kappa: f64,
    per_class: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Serialize)]
struct Stat {
    mean: f64,
    std: f64,
}

impl Stat {
    /// Mean and sample standard deviation (0 for a single value).
    fn of(xs: impl IntoIterator<Item = f64>) -> Stat {
        let xs: Vec<f64> = xs.into_iter().collect();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Stat { mean, std }
    }
}

#[derive(Debug, Serialize)]
struct Summary {
    tokenizer: String,
    split: String,
    repeats: usize,
    oa: Stat,
    aa: Stat,
    kappa: Stat,
    per_class: Vec<Stat>,
    runs: Vec<RunResult>,
}

fn write_log(path: &Path, lines: &[String]) -> anyhow::Result<()> {
    let mut text = lines.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| io_err(path, e))?;
    Ok(())
}

fn save_checkpoint(ckpt: &Checkpoint, dir: &Path, log: &[String]) -> anyhow::Result<()> {
    ckpt.save(dir)?;
    write_log(&dir.join("log.jsonl"), log)
}

/// Log lines recorded before `epoch` in a checkpoint directory.
fn prior_log(dir: &Path, epoch: usize) -> anyhow::Result<Vec<String>> {
    let path = dir.join("log.jsonl");
    if !path.exists() {
        warn!("{} has no log.jsonl; the new log starts at epoch {epoch}", dir.display());
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let mut lines = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let entry: EpochLog = serde_json::from_str(line).map_err(MftError::from)?;
        if entry.epoch < epoch {
            lines.push(line.to_string());
        }
    }
    Ok(lines)
}

fn model_config(a: &TrainArgs, scene: &Scene) -> ModelConfig {
    let base = ModelConfig::new(scene.bands(), scene.aux_channels(), scene.classes);
    ModelConfig {
        patch: a.patch,
        tokens: a.tokens,
        heads: a.heads,
        depth: a.depth,
        embed_dim: a.embed_dim,
        mlp_hidden: 4 * a.embed_dim,
        dropout: a.dropout,
        tokenizer: a.tokenizer,
        ..base
    }
}

fn train_config(a: &TrainArgs, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        weight_decay: a.wd,
        batch_train: a.batch,
        step_size: a.step_size,
        gamma: a.gamma,
        seed,
        eval_every: a.eval_every,
        ..TrainConfig::default()
    }
}

fn train_one(a: &TrainArgs, scene: &Scene, run: u64, dir: &Path) -> anyhow::Result<RunResult> {
    let seed = a.seed + run;
    let split_seed = if a.resplit { seed } else { a.seed };
    if a.split == SplitSpec::All {
        return Err(UsageError("training needs a disjoint or random split".into()).into());
    }
    let split = make_split(scene, a.split, split_seed)?;
    if split.test.is_empty() {
        return Err(MftError::Split("test split is empty".into()).into());
    }
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    write_json(&dir.join("split.json"), &split)?;

    let (mut trainer, mut lines) = match &a.resume {
        Some(from) => {
            let ckpt = Checkpoint::load(from).with_context(|| format!("loading checkpoint {}", from.display()))?;
            if ckpt.epoch > a.epochs {
                return Err(MftError::Config(format!(
                    "checkpoint is already at epoch {}, past --epochs {}",
                    ckpt.epoch, a.epochs
                ))
                .into());
            }
            let expected = TrainConfig { epochs: ckpt.train.epochs, ..train_config(a, seed) };
            if ckpt.train != expected || ckpt.model != model_config(a, scene) {
                warn!("flags differ from the checkpoint; continuing with the checkpoint's settings");
            }
            let lines = prior_log(from, ckpt.epoch)?;
            info!("resuming {} at epoch {}", from.display(), ckpt.epoch);
            (Trainer::resume(scene, &split, ckpt, a.epochs)?, lines)
        }
        None => (Trainer::new(scene, &split, model_config(a, scene), train_config(a, seed))?, Vec::new()),
    };

    let log_path = dir.join("log.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| io_err(&log_path, e))?);
    for line in &lines {
        writeln!(log, "{line}").map_err(|e| io_err(&log_path, e))?;
    }
    let start = Instant::now();
    let mut final_loss = None;
    while !trainer.finished() {
        let entry = trainer.run_epoch()?;
        let line = serde_json::to_string(&entry).map_err(MftError::from)?;
        writeln!(log, "{line}").map_err(|e| io_err(&log_path, e))?;
        log.flush().map_err(|e| io_err(&log_path, e))?;
        lines.push(line);
        final_loss = Some(entry.train_loss);
        let done = trainer.epoch();
        if done % 10 == 0 || entry.eval_oa.is_some() || trainer.finished() {
            match entry.eval_oa {
                Some(oa) => info!("run {run} epoch {done}: loss {:.4}, test OA {oa:.4}", entry.train_loss),
                None => info!("run {run} epoch {done}: loss {:.4}", entry.train_loss),
            }
        }
        if a.save_every > 0 && done % a.save_every == 0 && !trainer.finished() {
            let at = dir.join("checkpoints").join(format!("epoch-{done:04}"));
            save_checkpoint(trainer.checkpoint(), &at, &lines)?;
        }
    }
    save_checkpoint(trainer.checkpoint(), &dir.join("checkpoint"), &lines)?;
    let seconds = start.elapsed().as_secs_f64();

    let eval = trainer.evaluate(&split.test)?;
    write_json(&dir.join("report.json"), &eval.report)?;
    let r = eval.report;
    info!("run {run}: OA {:.4}, AA {:.4}, kappa {:.4} ({seconds:.1}s)", r.oa, r.aa, r.kappa);
    Ok(RunResult {
        run,
        seed,
        split_seed,
        train_pixels: split.train.len(),
        test_pixels: split.test.len(),
        epochs: trainer.epoch(),
        final_loss,
        oa: r.oa,
        aa: r.aa,
        kappa: r.kappa,
        per_class: r.per_class,
    })
}

pub fn train(a: &TrainArgs) -> anyhow::Result<()> {
    if a.repeats == 0 {
        return Err(UsageError("--repeats must be at least 1".into()).into());
    }
    if a.resume.is_some() && a.repeats != 1 {
        return Err(UsageError("--resume continues a single run; drop --repeats".into()).into());
    }
    let scene = load(&a.scene)?;
    let resolved = serde_json::json!({
        "model": model_config(a, &scene),
        "train": train_config(a, a.seed),
    });
    fs::create_dir_all(&a.output).map_err(|e| io_err(&a.output, e))?;
    RunManifest::new(Command::Train(a.clone()), Some(resolved)).save(&a.output.join("manifest.json"))?;

    let mut runs = Vec::new();
    for r in 0..a.repeats {
        let dir = if a.repeats == 1 { a.output.clone() } else { a.output.join(format!("run-{r}")) };
        runs.push(train_one(a, &scene, r, &dir)?);
    }
    let classes = runs[0].per_class.len();
    let summary = Summary {
        tokenizer: a.tokenizer.to_string(),
        split: a.split.to_string(),
        repeats: runs.len(),
        oa: Stat::of(runs.iter().map(|r| r.oa)),
        aa: Stat::of(runs.iter().map(|r| r.aa)),
        kappa: Stat::of(runs.iter().map(|r| r.kappa)),
        per_class: (0..classes).map(|c| Stat::of(runs.iter().map(|r| r.per_class[c]))).collect(),
        runs,
    };
    write_json(&a.output.join("summary.json"), &summary)?;
    println!(
        "OA {:.4} ± {:.4}  AA {:.4} ± {:.4}  kappa {:.4} ± {:.4}  ({} run{})",
        summary.oa.mean,
        summary.oa.std,
        summary.aa.mean,
        summary.aa.std,
        summary.kappa.mean,
        summary.kappa.std,
        summary.repeats,
        if summary.repeats == 1 { "" } else { "s" }
    );
    Ok(())
}

pub fn eval(a: &EvalArgs) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint).with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let model = ckpt.build()?;
    let scene = load(&a.scene)?;
    let coords = make_split(&scene, a.split, a.seed)?.test;
    let report: EvalReport = evaluate(&model, &ckpt.params, &scene, &coords, a.batch)?.report;
    write_json(&a.output, &report)?;

    if let Some(map) = &a.map {
        let pixels: Vec<Coord> = if a.full {
            (0..scene.rows()).flat_map(|i| (0..scene.cols()).map(move |j| (i, j))).collect()
        } else {
            scene.labeled()
        };
        let predicted = predict(&model, &ckpt.params, &scene, &pixels, a.batch)?;
        let pairs: Vec<(Coord, usize)> = pixels.into_iter().zip(predicted).collect();
        let bytes = render_map(scene.rows(), scene.cols(), &pairs)?;
        if let Some(dir) = map.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
        fs::write(map, bytes).map_err(|e| io_err(map, e))?;
    }
    RunManifest::new(Command::Eval(a.clone()), None).save(&sidecar(&a.output))?;
    println!(
        "OA {:.4}  AA {:.4}  kappa {:.4}  over {} pixels",
        report.oa, report.aa, report.kappa, report.samples
    );
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> anyhow::Result<()> {
    let dims: ToyDims = a.dims.parse().map_err(|e: MftError| UsageError(e.to_string()))?;
    if let Some(f) = &a.fault {
        if !mft_core::verify::FAULT_SCOPES.contains(&f.as_str()) {
            return Err(UsageError(format!(
                "--break expects one of {}, got {f:?}",
                mft_core::verify::FAULT_SCOPES.join(", ")
            ))
            .into());
        }
    }
    let start = Instant::now();
    let rows = run_suite(&dims, a.seed, a.fault.as_deref())?;
    let seconds = start.elapsed().as_secs_f64();

    println!("gradcheck {dims} seed={}{}", a.seed, a.fault.as_ref().map(|f| format!(" break={f}")).unwrap_or_default());
    println!("{:<22} {:>11} {:>9}  {:<6} worst tensor", "check", "max error", "elements", "status");
    for r in &rows {
        println!(
            "{:<22} {:>11.3e} {:>9}  {:<6} {}",
            r.name,
            r.max_error,
            r.elements,
            if r.passed { "ok" } else { "FAIL" },
            r.worst.as_deref().unwrap_or("-")
        );
    }
    println!("{:.1}s", seconds);
    if let Some(out) = &a.output {
        write_json(out, &serde_json::json!({ "dims": dims.to_string(), "seconds": seconds, "rows": rows }))?;
        RunManifest::new(Command::Gradcheck(a.clone()), None).save(&sidecar(out))?;
    }
    let failed: Vec<String> = rows
        .iter()
        .filter(|r| !r.passed)
        .map(|r| format!("{} [{}]", r.name, r.failing.join(", ")))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(MftError::Verifier(format!("checks over tolerance: {}", failed.join("; "))).into())
    }
}

pub fn inspect(a: &InspectArgs) -> anyhow::Result<()> {
    let p = &a.path;
    let value = if p.join("header.json").exists() {
        let scene = load_scene(p)?;
        let text = fs::read_to_string(p.join("header.json")).map_err(|e| io_err(p, e))?;
        let header: SceneHeader = serde_json::from_str(&text).map_err(MftError::from)?;
        serde_json::json!({
            "kind": "scene",
            "header": header,
            "class_pixels": scene.class_counts(),
        })
    } else if p.join("model.json").exists() {
        let ckpt = Checkpoint::load(p)?;
        let text = fs::read_to_string(p.join("model.json")).map_err(|e| io_err(p, e))?;
        let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(MftError::from)?;
        serde_json::json!({
            "kind": "checkpoint",
            "model": ckpt.model,
            "train": ckpt.train,
            "epoch": ckpt.epoch,
            "adam_step": ckpt.adam.step,
            "learnable_parameters": ckpt.params.weight_count(),
            "tensors": manifest.tensors.len(),
        })
    } else if p.is_file() {
        serde_json::to_value(RunManifest::load(p)?)?
    } else {
        return Err(MftError::Format(format!("{} is not a scene, checkpoint or manifest", p.display())).into());
    };
    println!("{}", serde_json::to_string_pretty(&value)?);
    Ok(())
}

pub fn replay(a: &ReplayArgs) -> anyhow::Result<()> {
    let manifest = RunManifest::load(&a.manifest)?;
    if manifest.tool_version != env!("CARGO_PKG_VERSION") {
        warn!("manifest written by version {}", manifest.tool_version);
    }
    let mut command = manifest.invocation;
    if let Some(out) = &a.output {
        match &mut command {
            Command::Synth(c) => c.output = out.clone(),
            Command::Train(c) => c.output = out.clone(),
            Command::Eval(c) => c.output = out.clone(),
            Command::Gradcheck(c) => c.output = Some(out.clone()),
            Command::Inspect(_) | Command::Replay(_) => {}
        }
    }
    match command {
        Command::Inspect(_) | Command::Replay(_) => {
            Err(UsageError("manifest does not record a replayable command".into()).into())
        }
        other => crate::run(other),
    }
}
