//! Forward-pass context and the small parameterized layers the model is built from.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::params::{Init, ParamId, ParamKind, ParamSet};
use crate::rng::Rng;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::{Real, Tensor};

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass: binds parameters onto a tape on first use, owns the
/// dropout stream, and collects batch-norm running-stat updates.
pub struct Forward<'t, 'p, T: Real> {
    pub tape: &'t mut Tape<T>,
    params: &'p ParamSet<T>,
    bound: Vec<Option<Var>>,
    mode: Mode,
    rng: Rng,
    bn_updates: Vec<(ParamId, Tensor<T>)>,
    attention: Vec<Var>,
}

impl<'t, 'p, T: Real> Forward<'t, 'p, T> {
    pub fn new(tape: &'t mut Tape<T>, params: &'p ParamSet<T>, mode: Mode, rng: Rng) -> Self {
        Forward {
            tape,
            params,
            bound: vec![None; params.len()],
            mode,
            rng,
            bn_updates: Vec::new(),
            attention: Vec::new(),
        }
    }

    /// Use an already-recorded leaf for parameter `id` instead of binding a
    /// fresh copy of its tensor.
    pub fn bind(&mut self, id: ParamId, v: Var) {
        self.bound[id.0] = Some(v);
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &'p ParamSet<T> {
        self.params
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let entry = self.params.entry(id);
        let v = self
            .tape
            .leaf(entry.tensor.clone(), entry.kind == ParamKind::Weight);
        self.bound[id.0] = Some(v);
        v
    }

    /// Inverted dropout; identity in eval mode or at rate 0.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if self.mode == Mode::Eval || rate <= 0.0 {
            return Ok(x);
        }
        let n = self.tape.value(x).len();
        let keep = T::of(1.0 / (1.0 - rate));
        let mask = (0..n)
            .map(|_| if self.rng.uniform() < rate { T::zero() } else { keep })
            .collect();
        self.tape.dropout_with_mask(x, mask)
    }

    pub(crate) fn push_bn_update(&mut self, id: ParamId, value: Tensor<T>) {
        self.bn_updates.push((id, value));
    }

    pub fn take_bn_updates(&mut self) -> Vec<(ParamId, Tensor<T>)> {
        std::mem::take(&mut self.bn_updates)
    }

    pub(crate) fn record_attention(&mut self, weights: Var) {
        self.attention.push(weights);
    }

    /// Attention-weight nodes recorded so far, one per encoder block.
    pub fn attention(&self) -> &[Var] {
        &self.attention
    }

    /// Gradients of every learnable parameter, aligned with `ParamSet` order;
    /// `None` for buffers and for weights that never entered the graph.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<Option<Tensor<T>>> {
        self.params
            .ids()
            .map(|id| match (self.params.entry(id).kind, self.bound[id.0]) {
                (ParamKind::Weight, Some(v)) => grads.get(v),
                _ => None,
            })
            .collect()
    }
}

/// Batch normalization over axis 1 with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    /// Count of training batches folded into the running statistics.
    pub tracked: ParamId,
}

impl BatchNorm {
    pub fn new<T: Real>(ps: &mut ParamSet<T>, prefix: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: ps.add(format!("{prefix}.gamma"), ParamKind::Weight, Tensor::ones([channels])),
            beta: ps.add(format!("{prefix}.beta"), ParamKind::Weight, Tensor::zeros([channels])),
            running_mean: ps.add(format!("{prefix}.running_mean"), ParamKind::Buffer, Tensor::zeros([channels])),
            running_var: ps.add(format!("{prefix}.running_var"), ParamKind::Buffer, Tensor::ones([channels])),
            tracked: ps.add(format!("{prefix}.tracked"), ParamKind::Buffer, Tensor::zeros([1])),
        }
    }

    pub fn forward<T: Real>(&self, fwd: &mut Forward<'_, '_, T>, x: Var) -> Result<Var> {
        let gamma = fwd.param(self.gamma);
        let beta = fwd.param(self.beta);
        let params = fwd.params();
        match fwd.mode() {
            Mode::Train => {
                let (y, stats) = fwd.tape.batch_norm(x, gamma, beta, None, NORM_EPS)?;
                let stats = stats.expect("training batch norm returns statistics");
                let m = T::of(BN_MOMENTUM);
                let blend = |old: &Tensor<T>, new: &[T]| {
                    Tensor::from_fn(old.shape().to_vec(), |i| (T::one() - m) * old.data()[i] + m * new[i])
                };
                let rm = blend(params.get(self.running_mean), &stats.mean);
                let rv = blend(params.get(self.running_var), &stats.var);
                let tracked = Tensor::scalar(params.get(self.tracked).item() + T::one()).reshape([1])?;
                fwd.push_bn_update(self.running_mean, rm);
                fwd.push_bn_update(self.running_var, rv);
                fwd.push_bn_update(self.tracked, tracked);
                Ok(y)
            }
            Mode::Eval => {
                if params.get(self.tracked).item() == T::zero() {
                    log::warn!(
                        "batch norm {} evaluated before any training step; using (0, 1) statistics",
                        params.entry(self.gamma).name.trim_end_matches(".gamma")
                    );
                }
                let rm = params.get(self.running_mean).data();
                let rv = params.get(self.running_var).data();
                let (y, _) = fwd.tape.batch_norm(x, gamma, beta, Some((rm, rv)), NORM_EPS)?;
                Ok(y)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(ps: &mut ParamSet<T>, prefix: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: ps.add(format!("{prefix}.gamma"), ParamKind::Weight, Tensor::ones([dim])),
            beta: ps.add(format!("{prefix}.beta"), ParamKind::Weight, Tensor::zeros([dim])),
        }
    }

    pub fn forward<T: Real>(&self, fwd: &mut Forward<'_, '_, T>, x: Var) -> Result<Var> {
        let gamma = fwd.param(self.gamma);
        let beta = fwd.param(self.beta);
        fwd.tape.layer_norm(x, gamma, beta, NORM_EPS)
    }
}

/// `y = x · W (+ b)` with `W[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Real>(ps: &mut ParamSet<T>, init: &mut Init<'_>, name: &str, inp: usize, out: usize, bias: bool) -> Self {
        let weight = ps.add(format!("{name}.weight"), ParamKind::Weight, init.fan_in([inp, out], inp));
        let bias = bias.then(|| ps.add(format!("{name}.bias"), ParamKind::Weight, Tensor::zeros([out])));
        Linear { weight, bias }
    }

    pub fn forward<T: Real>(&self, fwd: &mut Forward<'_, '_, T>, x: Var) -> Result<Var> {
        let w = fwd.param(self.weight);
        let y = fwd.tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = fwd.param(b);
                fwd.tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}
