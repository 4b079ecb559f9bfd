//! Optimizer, training loop, checkpoints and evaluation.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{extract_patches, extract_windows, Coord, PatchBatch, Scene, Split};
use crate::error::{MftError, Result};
use crate::metrics::{compute_metrics, ConfusionMatrix, EvalReport};
use crate::model::{Mft, ModelConfig};
use crate::nn::{Forward, Mode};
use crate::params::{ParamKind, ParamSet};
use crate::rng::Rng;
use crate::tape::Tape;
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_MAGIC: &str = "MFTCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_train: usize,
    pub batch_eval: usize,
    /// Epochs between learning-rate decays.
    pub step_size: usize,
    pub gamma: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Log test OA every this many epochs; 0 disables.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            lr: 5e-4,
            weight_decay: 5e-3,
            batch_train: 64,
            batch_eval: 500,
            step_size: 50,
            gamma: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(MftError::Config(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("learning rate must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail("weight decay must be non-negative");
        }
        if self.batch_train == 0 || self.batch_eval == 0 || self.step_size == 0 {
            return fail("batch sizes and step size must be positive");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return fail("gamma must lie in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("Adam betas must lie in [0, 1)");
        }
        if !(self.eps >= 0.0) {
            return fail("Adam eps must be non-negative");
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.gamma.powi((epoch / self.step_size) as i32)
    }

    pub fn adam(&self, epoch: usize) -> AdamConfig {
        AdamConfig {
            lr: self.lr_at(epoch),
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First and second moments per parameter, `None` for buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T = f32> {
    pub step: u64,
    pub m: Vec<Option<Tensor<T>>>,
    pub v: Vec<Option<Tensor<T>>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(ps: &ParamSet<T>) -> Self {
        let zeros: Vec<_> = ps
            .entries()
            .iter()
            .map(|e| (e.kind == ParamKind::Weight).then(|| Tensor::zeros(e.tensor.shape())))
            .collect();
        AdamState { step: 0, m: zeros.clone(), v: zeros }
    }
}

/// One Adam update with weight decay added to the gradient. `grads` is aligned
/// with `ps`; missing gradients count as zero. Nothing is modified when any
/// gradient is non-finite.
pub fn adam_step<T: Real>(
    ps: &mut ParamSet<T>,
    grads: &[Option<Tensor<T>>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != ps.len() || state.m.len() != ps.len() {
        return Err(MftError::Shape(format!(
            "{} parameters, {} gradients, {} moment slots",
            ps.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (entry, g) in ps.entries().iter().zip(grads) {
        if let Some(g) = g {
            if g.shape() != entry.tensor.shape() {
                return Err(MftError::Shape(format!(
                    "gradient of {} has shape {:?}, expected {:?}",
                    entry.name,
                    g.shape(),
                    entry.tensor.shape()
                )));
            }
            if !g.is_finite() {
                return Err(MftError::Divergence(format!("non-finite gradient in {}", entry.name)));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<_> = ps.ids().collect();
    for id in ids {
        let i = id.index();
        if ps.entry(id).kind != ParamKind::Weight {
            continue;
        }
        let (Some(m), Some(v)) = (state.m[i].as_mut(), state.v[i].as_mut()) else {
            return Err(MftError::Shape(format!("no moments for {}", ps.entry(id).name)));
        };
        let theta = ps.get_mut(id).data_mut();
        let g = grads[i].as_ref().map(|g| g.data());
        for (k, th) in theta.iter_mut().enumerate() {
            let p = th.as_f64();
            let gk = g.map_or(0.0, |g| g[k].as_f64()) + cfg.weight_decay * p;
            let mk = cfg.beta1 * m.data()[k].as_f64() + (1.0 - cfg.beta1) * gk;
            let vk = cfg.beta2 * v.data()[k].as_f64() + (1.0 - cfg.beta2) * gk * gk;
            m.data_mut()[k] = T::of(mk);
            v.data_mut()[k] = T::of(vk);
            *th = T::of(p - cfg.lr * (mk / c1) / ((vk / c2).sqrt() + cfg.eps));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_oa: Option<f64>,
}

/// Complete training state after `epoch` finished epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub epoch: usize,
    pub params: ParamSet<f32>,
    pub adam: AdamState<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorRole {
    Weight,
    Buffer,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub role: TensorRole,
    pub shape: Vec<usize>,
    /// Byte offset into `weights.f32`.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub magic: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub epoch: usize,
    pub adam_step: u64,
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn build(&self) -> Result<Mft> {
        let (model, _) = Mft::new::<f32>(self.model.clone(), self.train.seed)?;
        model.check_params(&self.params)?;
        Ok(model)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| MftError::io(dir, e))?;
        let mut tensors = Vec::new();
        let mut payload: Vec<u8> = Vec::new();
        let mut push = |name: &str, role: TensorRole, t: &Tensor<f32>| {
            tensors.push(TensorRecord {
                name: name.to_string(),
                role,
                shape: t.shape().to_vec(),
                offset: payload.len(),
            });
            for x in t.data() {
                payload.extend_from_slice(&x.to_le_bytes());
            }
        };
        for e in self.params.entries() {
            let role = match e.kind {
                ParamKind::Weight => TensorRole::Weight,
                ParamKind::Buffer => TensorRole::Buffer,
            };
            push(&e.name, role, &e.tensor);
        }
        for (e, m) in self.params.entries().iter().zip(&self.adam.m) {
            if let Some(m) = m {
                push(&e.name, TensorRole::AdamM, m);
            }
        }
        for (e, v) in self.params.entries().iter().zip(&self.adam.v) {
            if let Some(v) = v {
                push(&e.name, TensorRole::AdamV, v);
            }
        }
        let manifest = CheckpointManifest {
            magic: CHECKPOINT_MAGIC.into(),
            model: self.model.clone(),
            train: self.train.clone(),
            epoch: self.epoch,
            adam_step: self.adam.step,
            tensors,
        };
        let json = serde_json::to_string_pretty(&manifest)?;
        let path = dir.join("model.json");
        fs::write(&path, json + "\n").map_err(|e| MftError::io(&path, e))?;
        let path = dir.join("weights.f32");
        fs::write(&path, payload).map_err(|e| MftError::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Checkpoint> {
        let dir = dir.as_ref();
        let path = dir.join("model.json");
        let text = fs::read_to_string(&path).map_err(|e| MftError::io(&path, e))?;
        let manifest: CheckpointManifest = serde_json::from_str(&text)?;
        if manifest.magic != CHECKPOINT_MAGIC {
            return Err(MftError::Format(format!("{} is not a checkpoint manifest", path.display())));
        }
        let path = dir.join("weights.f32");
        let bytes = fs::read(&path).map_err(|e| MftError::io(&path, e))?;

        let (model, mut params) = Mft::new::<f32>(manifest.model.clone(), manifest.train.seed)?;
        drop(model);
        let mut adam = AdamState::new(&params);
        adam.step = manifest.adam_step;
        let expected: usize = params.entries().iter().map(|e| e.tensor.len()).sum::<usize>()
            + 2 * params.weight_count();
        if manifest.tensors.len() != params.len() + 2 * adam.m.iter().flatten().count() {
            return Err(MftError::Config(format!(
                "checkpoint lists {} tensors; the architecture needs {}",
                manifest.tensors.len(),
                params.len() + 2 * adam.m.iter().flatten().count()
            )));
        }
        if bytes.len() != expected * 4 {
            return Err(MftError::Length {
                file: path.display().to_string(),
                expected: expected * 4,
                actual: bytes.len(),
            });
        }
        for rec in &manifest.tensors {
            let id = params
                .find(&rec.name)
                .ok_or_else(|| MftError::Config(format!("unknown tensor {} in checkpoint", rec.name)))?;
            let want = params.get(id).shape().to_vec();
            if want != rec.shape {
                return Err(MftError::Config(format!(
                    "tensor {} has shape {:?}, architecture expects {want:?}",
                    rec.name, rec.shape
                )));
            }
            let len = want.iter().product::<usize>() * 4;
            let raw = bytes.get(rec.offset..rec.offset + len).ok_or_else(|| MftError::Length {
                file: path.display().to_string(),
                expected: rec.offset + len,
                actual: bytes.len(),
            })?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(want, data)?;
            let kind = params.entry(id).kind;
            let slot = match (&rec.role, kind) {
                (TensorRole::Weight, ParamKind::Weight) | (TensorRole::Buffer, ParamKind::Buffer) => {
                    params.set(id, t)?;
                    continue;
                }
                (TensorRole::AdamM, ParamKind::Weight) => &mut adam.m[id.index()],
                (TensorRole::AdamV, ParamKind::Weight) => &mut adam.v[id.index()],
                _ => {
                    return Err(MftError::Config(format!("tensor {} has the wrong role", rec.name)));
                }
            };
            *slot = Some(t);
        }
        Ok(Checkpoint {
            model: manifest.model,
            train: manifest.train,
            epoch: manifest.epoch,
            params,
            adam,
        })
    }
}

/// Copy rows `idx` of a `[n, ...]` tensor.
fn gather(t: &Tensor<f32>, idx: &[usize]) -> Result<Tensor<f32>> {
    let row = t.len() / t.shape()[0];
    let mut data = Vec::with_capacity(idx.len() * row);
    for &i in idx {
        data.extend_from_slice(&t.data()[i * row..(i + 1) * row]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, data)
}

fn check_scene(config: &ModelConfig, scene: &Scene) -> Result<()> {
    if config.bands != scene.bands() || config.aux_channels != scene.aux_channels() || config.classes != scene.classes {
        return Err(MftError::Config(format!(
            "model expects B={} C={} with {} classes; scene has B={} C={} with {} classes",
            config.bands,
            config.aux_channels,
            config.classes,
            scene.bands(),
            scene.aux_channels(),
            scene.classes
        )));
    }
    Ok(())
}

pub struct Trainer<'s> {
    model: Mft,
    state: Checkpoint,
    scene: &'s Scene,
    train: PatchBatch,
    eval_coords: Vec<Coord>,
    root: Rng,
}

impl<'s> Trainer<'s> {
    pub fn new(scene: &'s Scene, split: &Split, model: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let (mft, params) = Mft::new::<f32>(model.clone(), cfg.seed)?;
        let adam = AdamState::new(&params);
        let state = Checkpoint { model, train: cfg, epoch: 0, params, adam };
        Self::with_state(scene, split, mft, state)
    }

    /// Continue from a checkpoint until `epochs` epochs have run in total.
    pub fn resume(scene: &'s Scene, split: &Split, mut ckpt: Checkpoint, epochs: usize) -> Result<Self> {
        ckpt.train.epochs = epochs;
        let mft = ckpt.build()?;
        Self::with_state(scene, split, mft, ckpt)
    }

    fn with_state(scene: &'s Scene, split: &Split, model: Mft, state: Checkpoint) -> Result<Self> {
        check_scene(&state.model, scene)?;
        if split.train.is_empty() {
            return Err(MftError::Split("training split is empty".into()));
        }
        let train = extract_patches(scene, &split.train, state.model.patch)?;
        let root = Rng::new(state.train.seed).substream("train", &[]);
        Ok(Trainer {
            model,
            state,
            scene,
            train,
            eval_coords: split.test.clone(),
            root,
        })
    }

    pub fn epoch(&self) -> usize {
        self.state.epoch
    }

    pub fn finished(&self) -> bool {
        self.state.epoch >= self.state.train.epochs
    }

    pub fn model(&self) -> &Mft {
        &self.model
    }

    pub fn params(&self) -> &ParamSet<f32> {
        &self.state.params
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.state
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        self.state
    }

    /// Shuffled minibatches (last partial batch kept), one Adam step each.
    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let epoch = self.state.epoch;
        let cfg = self.state.train.clone();
        let adam = cfg.adam(epoch);
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        self.root.substream("shuffle", &[epoch as u64]).shuffle(&mut order);

        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(cfg.batch_train).enumerate() {
            let x_h = gather(&self.train.hsi, idx)?;
            let x_l = gather(&self.train.aux, idx)?;
            let labels: Vec<usize> = idx.iter().map(|&i| self.train.labels[i]).collect();

            let mut tape = Tape::new();
            let dropout = self.root.substream("dropout", &[epoch as u64, b as u64]);
            let mut fwd = Forward::new(&mut tape, &self.state.params, Mode::Train, dropout);
            let (h, l) = (fwd.tape.constant(x_h), fwd.tape.constant(x_l));
            let logits = self.model.forward(&mut fwd, h, l)?;
            let loss = fwd.tape.cross_entropy(logits, &labels)?;
            let value = fwd.tape.value(loss).item().as_f64();
            if !value.is_finite() {
                return Err(MftError::Divergence(format!("loss is {value} at epoch {epoch}, batch {b}")));
            }
            let grads = fwd.tape.backward(loss)?;
            let param_grads = fwd.param_grads(&grads);
            let updates = fwd.take_bn_updates();
            drop(fwd);
            for (id, t) in updates {
                self.state.params.set(id, t)?;
            }
            adam_step(&mut self.state.params, &param_grads, &mut self.state.adam, &adam)
                .map_err(|e| match e {
                    MftError::Divergence(m) => MftError::Divergence(format!("{m} at epoch {epoch}, batch {b}")),
                    other => other,
                })?;
            loss_sum += value * idx.len() as f64;
        }
        self.state.epoch += 1;

        let eval_oa = if cfg.eval_every > 0 && self.state.epoch % cfg.eval_every == 0 && !self.eval_coords.is_empty() {
            Some(self.evaluate(&self.eval_coords)?.report.oa)
        } else {
            None
        };
        Ok(EpochLog {
            epoch,
            lr: adam.lr,
            train_loss: loss_sum / self.train.len() as f64,
            eval_oa,
        })
    }

    pub fn evaluate(&self, coords: &[Coord]) -> Result<Evaluation> {
        evaluate(&self.model, &self.state.params, self.scene, coords, self.state.train.batch_eval)
    }
}

/// Train from scratch to `cfg.epochs`.
pub fn train(scene: &Scene, split: &Split, model: ModelConfig, cfg: TrainConfig) -> Result<(Checkpoint, Vec<EpochLog>)> {
    let mut trainer = Trainer::new(scene, split, model, cfg)?;
    let mut log = Vec::new();
    while !trainer.finished() {
        log.push(trainer.run_epoch()?);
    }
    Ok((trainer.into_checkpoint(), log))
}

/// Eval-mode argmax class (0-based) for each pixel, in batches.
pub fn predict(model: &Mft, params: &ParamSet<f32>, scene: &Scene, coords: &[Coord], batch: usize) -> Result<Vec<usize>> {
    check_scene(&model.config, scene)?;
    model.check_params(params)?;
    let mut out = Vec::with_capacity(coords.len());
    for chunk in coords.chunks(batch.max(1)) {
        let (x_h, x_l) = extract_windows(scene, chunk, model.config.patch)?;
        let mut tape = Tape::new();
        let mut fwd = Forward::new(&mut tape, params, Mode::Eval, Rng::new(0));
        let (h, l) = (fwd.tape.constant(x_h), fwd.tape.constant(x_l));
        let logits = model.forward(&mut fwd, h, l)?;
        let v = fwd.tape.value(logits);
        let classes = v.shape()[1];
        for row in v.data().chunks(classes) {
            let mut best = 0;
            for (c, x) in row.iter().enumerate() {
                if *x > row[best] {
                    best = c;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    pub predictions: Vec<(Coord, usize)>,
}

pub fn evaluate(model: &Mft, params: &ParamSet<f32>, scene: &Scene, coords: &[Coord], batch: usize) -> Result<Evaluation> {
    let predicted = predict(model, params, scene, coords, batch)?;
    let mut cm = ConfusionMatrix::new(scene.classes);
    for (&c, &p) in coords.iter().zip(&predicted) {
        match scene.label(c) {
            0 => return Err(MftError::Label(format!("pixel {c:?} is background"))),
            l => cm.accumulate(l as usize - 1, p)?,
        }
    }
    Ok(Evaluation {
        report: compute_metrics(&cm)?,
        predictions: coords.iter().copied().zip(predicted).collect(),
    })
}
