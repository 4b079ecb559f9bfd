//! Reverse-mode differentiation over a linear tape of recorded operations.
//!
//! Every op appends one node holding its output value and whatever it needs for
//! the backward pass. [`Tape::backward`] walks the nodes in reverse order and
//! accumulates gradients for every node that requires them.

use crate::error::{MftError, Result};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::{numel, Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    BatchMatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: T },
    Sum { x: Var },
    Mean { x: Var },
    Relu { x: Var },
    Gelu { x: Var },
    Dropout { x: Var, mask: Vec<T> },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, normalized: Vec<T>, inv_std: Vec<T> },
    BatchNorm { x: Var, gamma: Var, beta: Var, normalized: Vec<T>, inv_std: Vec<T>, train: bool },
    Conv { x: Var, w: Var, b: Option<Var>, geometry: ConvGeometry },
    Reshape { x: Var },
    Permute { x: Var, perm: Vec<usize> },
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    scope: Option<&'static str>,
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    scopes: Vec<&'static str>,
    fault: Option<String>,
    kinks: Kinks,
}

/// ReLU activation patterns, for finite differencing a piecewise-smooth
/// function on the piece that contains the base point.
#[derive(Default)]
enum Kinks {
    #[default]
    Off,
    Record(Vec<Vec<bool>>),
    Replay(Vec<Vec<bool>>, usize),
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[v.0].clone(), g.clone()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        let shape = self.shapes[v.0].clone();
        self.grads[v.0].take().map(|g| Tensor::from_parts(shape, g))
    }
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

/// Sum `g` (shaped `out_shape`) down to `src_shape` under right-aligned broadcasting.
fn reduce_broadcast<T: Real>(g: &[T], src_shape: &[usize], out_shape: &[usize]) -> Vec<T> {
    if src_shape == out_shape {
        return g.to_vec();
    }
    let index = kernels::broadcast_index(src_shape, out_shape);
    let mut out = vec![T::zero(); numel(src_shape)];
    for (&i, &v) in index.iter().zip(g) {
        out[i] += v;
    }
    out
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Split `shape` at `axis` into (outer, extent, inner) element counts.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            scopes: Vec::new(),
            fault: None,
            kinks: Kinks::Off,
        }
    }

    /// Remember which units every `relu` lets through, in call order.
    pub(crate) fn record_kinks(&mut self) {
        self.kinks = Kinks::Record(Vec::new());
    }

    pub(crate) fn take_kinks(&mut self) -> Vec<Vec<bool>> {
        match std::mem::take(&mut self.kinks) {
            Kinks::Record(k) | Kinks::Replay(k, _) => k,
            Kinks::Off => Vec::new(),
        }
    }

    /// A tape whose `relu` calls use the recorded patterns instead of the
    /// sign of their input.
    pub(crate) fn with_kinks(kinks: Vec<Vec<bool>>) -> Self {
        Tape {
            kinks: Kinks::Replay(kinks, 0),
            ..Self::new()
        }
    }

    /// Move a node's value out, leaving it empty.
    pub(crate) fn take_value(&mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::from_parts(vec![0], Vec::new()))
    }

    /// Test hook: nodes recorded inside scope `name` get a deliberately wrong
    /// backward rule.
    pub fn with_fault(name: impl Into<String>) -> Self {
        Tape {
            fault: Some(name.into()),
            ..Self::new()
        }
    }

    pub fn push_scope(&mut self, name: &'static str) {
        self.scopes.push(name);
    }

    pub fn pop_scope(&mut self) {
        self.scopes.pop();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            scope: self.scopes.last().copied(),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            scope: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    // ── linear algebra ──────────────────────────────────────────────────

    /// `a[..., m, k] · b[k, p] → [..., m, p]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(MftError::dim("matmul", &sa, &sb));
        }
        let k = sb[0];
        let p = sb[1];
        let m = numel(&sa) / k;
        let mut out = vec![T::zero(); m * p];
        kernels::gemm_acc(m, k, p, self.value(a).data(), self.value(b).data(), &mut out);
        let mut shape = sa;
        *shape.last_mut().unwrap() = p;
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul { a, b }, &[a, b]))
    }

    /// `a[..., m, k] · b[..., k, p] → [..., m, p]` with identical leading extents.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let r = sa.len();
        if r < 2 || sb.len() != r || sa[..r - 2] != sb[..r - 2] || sa[r - 1] != sb[r - 2] {
            return Err(MftError::dim("bmm", &sa, &sb));
        }
        let (m, k, p) = (sa[r - 2], sa[r - 1], sb[r - 1]);
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![T::zero(); batch * m * p];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            kernels::gemm_acc(
                m,
                k,
                p,
                &ad[i * m * k..(i + 1) * m * k],
                &bd[i * k * p..(i + 1) * k * p],
                &mut out[i * m * p..(i + 1) * m * p],
            );
        }
        let mut shape = sa;
        shape[r - 1] = p;
        Ok(self.push(Tensor::from_parts(shape, out), Op::BatchMatMul { a, b }, &[a, b]))
    }

    // ── elementwise ─────────────────────────────────────────────────────

    /// Elementwise sum with right-aligned broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, |a, b| Op::Add { a, b })
    }

    /// Elementwise product with right-aligned broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: impl Fn(Var, Var) -> Op<T>,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let shape = broadcast_shape(&sa, &sb).ok_or_else(|| MftError::dim(name, &sa, &sb))?;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let out: Vec<T> = if sa == sb {
            ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ia = kernels::broadcast_index(&sa, &shape);
            let ib = kernels::broadcast_index(&sb, &shape);
            ia.iter().zip(&ib).map(|(&i, &j)| f(ad[i], bd[j])).collect()
        };
        Ok(self.push(Tensor::from_parts(shape, out), op(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let v = self.value(x);
        let out = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|&e| e * factor).collect());
        self.push(out, Op::Scale { x, factor }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / T::of(v.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean { x }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let mut pattern: Vec<bool> = v.data().iter().map(|&e| e > T::zero()).collect();
        match &mut self.kinks {
            Kinks::Off => {}
            Kinks::Record(all) => all.push(pattern.clone()),
            Kinks::Replay(all, next) => {
                if let Some(p) = all.get(*next).filter(|p| p.len() == pattern.len()) {
                    pattern.clone_from(p);
                }
                *next += 1;
            }
        }
        let out = v
            .data()
            .iter()
            .zip(&pattern)
            .map(|(&e, &on)| if on { e } else { T::zero() })
            .collect();
        let out = Tensor::from_parts(v.shape().to_vec(), out);
        self.push(out, Op::Relu { x }, &[x])
    }

    /// Exact GELU, `0.5·x·(1 + erf(x/√2))`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let half = T::of(0.5);
        let inv_sqrt2 = T::of(1.0 / SQRT_2);
        let out = v
            .data()
            .iter()
            .map(|&e| half * e * (T::one() + (e * inv_sqrt2).erf()))
            .collect();
        let out = Tensor::from_parts(v.shape().to_vec(), out);
        self.push(out, Op::Gelu { x }, &[x])
    }

    /// Multiply by a precomputed mask (already scaled by `1/(1-rate)`).
    pub fn dropout_with_mask(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        let v = self.value(x);
        if mask.len() != v.len() {
            return Err(MftError::dim("dropout", v.shape(), &[mask.len()]));
        }
        let out = v.data().iter().zip(&mask).map(|(&e, &m)| e * m).collect();
        let out = Tensor::from_parts(v.shape().to_vec(), out);
        Ok(self.push(out, Op::Dropout { x, mask }, &[x]))
    }

    // ── normalization & softmax ─────────────────────────────────────────

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(MftError::Shape(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |t: usize| o * len * inner + t * inner + i;
                let mut max = T::neg_infinity();
                for t in 0..len {
                    max = max.max(src[at(t)]);
                }
                let mut total = T::zero();
                for t in 0..len {
                    let e = (src[at(t)] - max).exp();
                    out[at(t)] = e;
                    total += e;
                }
                for t in 0..len {
                    out[at(t)] = out[at(t)] / total;
                }
            }
        }
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { x, axis }, &[x]))
    }

    /// Normalize over the last axis with biased variance, then scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| MftError::Shape("layer_norm on a scalar".into()))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(MftError::dim("layer_norm", &shape, self.shape(gamma)));
        }
        if !(eps >= 0.0) {
            return Err(MftError::Config(format!("layer_norm eps must be >= 0, got {eps}")));
        }
        let src = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = src.len() / d;
        let mut normalized = vec![T::zero(); src.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        let dn = T::of(d as f64);
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + T::of(eps)).sqrt();
            inv_std[r] = if is.is_finite() { is } else { T::zero() };
            for c in 0..d {
                let xh = (row[c] - mean) * inv_std[r];
                normalized[r * d + c] = xh;
                out[r * d + c] = xh * g[c] + b[c];
            }
        }
        let op = Op::LayerNorm { x, gamma, beta, normalized, inv_std };
        Ok(self.push(Tensor::from_parts(shape, out), op, &[x, gamma, beta]))
    }

    /// Batch normalization over axis 1 of `x[N, C, ...]`.
    ///
    /// With `running = None` the batch statistics are used and returned;
    /// otherwise the supplied running `(mean, var)` are applied.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(MftError::Shape(format!("batch_norm needs [N, C, ...], got {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(MftError::dim("batch_norm", &shape, self.shape(gamma)));
        }
        let spatial: usize = shape[2..].iter().product();
        let count = n * spatial;
        let train = running.is_none();
        if train && count < 2 {
            return Err(MftError::Shape(format!(
                "training batch norm needs at least 2 values per channel, got {count}"
            )));
        }
        let src = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        match running {
            Some((rm, rv)) => {
                mean.copy_from_slice(rm);
                var.copy_from_slice(rv);
            }
            None => {
                let cn = T::of(count as f64);
                for ch in 0..c {
                    let mut s = T::zero();
                    for s_ in 0..n {
                        for &v in &src[(s_ * c + ch) * spatial..][..spatial] {
                            s += v;
                        }
                    }
                    mean[ch] = s / cn;
                    let mut q = T::zero();
                    for s_ in 0..n {
                        for &v in &src[(s_ * c + ch) * spatial..][..spatial] {
                            q += (v - mean[ch]) * (v - mean[ch]);
                        }
                    }
                    var[ch] = q / cn;
                }
            }
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::of(eps)).sqrt()).collect();
        let mut normalized = vec![T::zero(); src.len()];
        let mut out = vec![T::zero(); src.len()];
        for s_ in 0..n {
            for ch in 0..c {
                let base = (s_ * c + ch) * spatial;
                for k in base..base + spatial {
                    let xh = (src[k] - mean[ch]) * inv_std[ch];
                    normalized[k] = xh;
                    out[k] = xh * g[ch] + b[ch];
                }
            }
        }
        let stats = train.then(|| BatchStats { mean, var });
        let op = Op::BatchNorm { x, gamma, beta, normalized, inv_std, train };
        Ok((self.push(Tensor::from_parts(shape, out), op, &[x, gamma, beta]), stats))
    }

    // ── convolution ─────────────────────────────────────────────────────

    /// Grouped 2-D cross-correlation, stride 1, symmetric zero padding.
    /// `x[N, Cin, H, W]`, `w[Cout, Cin/groups, kh, kw]`, optional `bias[Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, groups: usize, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 {
            return Err(MftError::dim("conv2d", &sx, &sw));
        }
        let geometry = ConvGeometry {
            batch: sx[0],
            in_channels: sx[1],
            out_channels: sw[0],
            groups,
            input: [sx[2], sx[3], 1],
            kernel: [sw[2], sw[3], 1],
            padding: [padding, padding, 0],
        };
        self.conv(x, w, bias, geometry, sw[1], "conv2d")
    }

    /// 3-D cross-correlation, stride 1. `x[N, Cin, H, W, D]`, `w[Cout, Cin, kh, kw, kd]`.
    pub fn conv3d(&mut self, x: Var, w: Var, bias: Option<Var>, padding: [usize; 3]) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 5 || sw.len() != 5 {
            return Err(MftError::dim("conv3d", &sx, &sw));
        }
        let geometry = ConvGeometry {
            batch: sx[0],
            in_channels: sx[1],
            out_channels: sw[0],
            groups: 1,
            input: [sx[2], sx[3], sx[4]],
            kernel: [sw[2], sw[3], sw[4]],
            padding,
        };
        self.conv(x, w, bias, geometry, sw[1], "conv3d")
    }

    fn conv(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        g: ConvGeometry,
        w_in: usize,
        name: &'static str,
    ) -> Result<Var> {
        if g.groups == 0 || g.in_channels % g.groups != 0 || g.out_channels % g.groups != 0 {
            return Err(MftError::GroupedConv(format!(
                "{} input and {} output channels are not divisible by {} groups",
                g.in_channels, g.out_channels, g.groups
            )));
        }
        if w_in != g.in_channels / g.groups {
            return Err(MftError::dim(name, self.shape(x), self.shape(w)));
        }
        for a in 0..3 {
            if g.kernel[a] > g.input[a] + 2 * g.padding[a] {
                return Err(MftError::Shape(format!(
                    "{name}: kernel {:?} larger than padded input {:?} (padding {:?})",
                    g.kernel, g.input, g.padding
                )));
            }
        }
        if let Some(b) = bias {
            if self.shape(b) != [g.out_channels] {
                return Err(MftError::dim(name, &[g.out_channels], self.shape(b)));
            }
        }
        let out = kernels::conv_forward(
            &g,
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
        );
        let o = g.output();
        let shape = if name == "conv2d" {
            vec![g.batch, g.out_channels, o[0], o[1]]
        } else {
            vec![g.batch, g.out_channels, o[0], o[1], o[2]]
        };
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        let op = Op::Conv { x, w, b: bias, geometry: g };
        Ok(self.push(Tensor::from_parts(shape, out), op, &inputs))
    }

    // ── shape manipulation ──────────────────────────────────────────────

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(v, Op::Reshape { x }, &[x]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(MftError::Shape(format!("invalid permutation {perm:?} for shape {shape:?}")));
        }
        let data = kernels::permute(&shape, perm, self.value(x).data());
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        let op = Op::Permute { x, perm: perm.to_vec() };
        Ok(self.push(Tensor::from_parts(out_shape, data), op, &[x]))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(MftError::Shape("transpose needs rank >= 2".into()));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| MftError::Shape("concat of nothing".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(MftError::Shape(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len() || s.iter().enumerate().any(|(a, &d)| a != axis && d != first[a]) {
                return Err(MftError::dim("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let op = Op::Concat { inputs: inputs.to_vec(), axis };
        Ok(self.push(Tensor::from_parts(shape, out), op, inputs))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(MftError::Shape(format!(
                "narrow({axis}, {start}, {len}) out of range for {shape:?}"
            )));
        }
        let (outer, ext, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::Narrow { x, axis, start }, &[x]))
    }

    // ── loss ────────────────────────────────────────────────────────────

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(MftError::dim("cross_entropy", &shape, &[labels.len()]));
        }
        let (n, c) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(MftError::Label(format!("label {bad} outside [0, {c})")));
        }
        let src = self.value(logits).data();
        let mut probs = vec![T::zero(); n * c];
        let mut loss = T::zero();
        for r in 0..n {
            let row = &src[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let total = row.iter().map(|&v| (v - max).exp()).sum::<T>();
            let log_z = max + total.ln();
            for k in 0..c {
                probs[r * c + k] = (row[k] - log_z).exp();
            }
            loss += log_z - row[labels[r]];
        }
        let loss = loss / T::of(n as f64);
        let op = Op::CrossEntropy { logits, labels: labels.to_vec(), probs };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Gradients of scalar `loss` with respect to every node that requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(MftError::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let corrupt = matches!((&self.fault, node.scope), (Some(f), Some(s)) if f == s);
            let mut contributions = self.node_backward(node, &g);
            if corrupt {
                for (_, c) in contributions.iter_mut() {
                    for v in c.iter_mut() {
                        *v *= T::of(1.5);
                    }
                }
            }
            for (target, c) in contributions {
                if self.nodes[target.0].requires_grad {
                    accumulate(&mut grads[target.0], c);
                }
            }
            // Leaves keep their gradient for the caller.
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn node_backward(&self, node: &Node<T>, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let val = |v: Var| self.nodes[v.0].value.data();
        let shp = |v: Var| self.nodes[v.0].value.shape();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let out_shape = node.value.shape();
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let sb = shp(*b);
                let (k, p) = (sb[0], sb[1]);
                let m = g.len() / p;
                if needs(*a) {
                    let mut da = vec![T::zero(); m * k];
                    kernels::gemm_a_bt_acc(m, p, k, g, val(*b), &mut da);
                    res.push((*a, da));
                }
                if needs(*b) {
                    let mut db = vec![T::zero(); k * p];
                    kernels::gemm_at_b_acc(m, k, p, val(*a), g, &mut db);
                    res.push((*b, db));
                }
            }
            Op::BatchMatMul { a, b } => {
                let (sa, sb) = (shp(*a), shp(*b));
                let r = sa.len();
                let (m, k, p) = (sa[r - 2], sa[r - 1], sb[r - 1]);
                let batch = numel(&sa[..r - 2]);
                let (ad, bd) = (val(*a), val(*b));
                if needs(*a) {
                    let mut da = vec![T::zero(); batch * m * k];
                    for i in 0..batch {
                        kernels::gemm_a_bt_acc(
                            m,
                            p,
                            k,
                            &g[i * m * p..(i + 1) * m * p],
                            &bd[i * k * p..(i + 1) * k * p],
                            &mut da[i * m * k..(i + 1) * m * k],
                        );
                    }
                    res.push((*a, da));
                }
                if needs(*b) {
                    let mut db = vec![T::zero(); batch * k * p];
                    for i in 0..batch {
                        kernels::gemm_at_b_acc(
                            m,
                            k,
                            p,
                            &ad[i * m * k..(i + 1) * m * k],
                            &g[i * m * p..(i + 1) * m * p],
                            &mut db[i * k * p..(i + 1) * k * p],
                        );
                    }
                    res.push((*b, db));
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if needs(v) {
                        res.push((v, reduce_broadcast(g, shp(v), out_shape)));
                    }
                }
            }
            Op::Mul { a, b } => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if !needs(v) {
                        continue;
                    }
                    let od = val(other);
                    let full: Vec<T> = if shp(other) == out_shape {
                        g.iter().zip(od).map(|(&x, &y)| x * y).collect()
                    } else {
                        let idx = kernels::broadcast_index(shp(other), out_shape);
                        g.iter().zip(&idx).map(|(&x, &j)| x * od[j]).collect()
                    };
                    res.push((v, reduce_broadcast(&full, shp(v), out_shape)));
                }
            }
            Op::Scale { x, factor } => {
                res.push((*x, g.iter().map(|&v| v * *factor).collect()));
            }
            Op::Sum { x } => {
                res.push((*x, vec![g[0]; val(*x).len()]));
            }
            Op::Mean { x } => {
                let n = val(*x).len();
                res.push((*x, vec![g[0] / T::of(n as f64); n]));
            }
            Op::Relu { x } => {
                let xd = val(*x);
                res.push((*x, g.iter().zip(xd).map(|(&d, &v)| if v > T::zero() { d } else { T::zero() }).collect()));
            }
            Op::Gelu { x } => {
                let xd = val(*x);
                let inv_sqrt2 = T::of(1.0 / SQRT_2);
                let half = T::of(0.5);
                let c = T::of(INV_SQRT_2PI);
                let dx = g
                    .iter()
                    .zip(xd)
                    .map(|(&d, &v)| {
                        let cdf = half * (T::one() + (v * inv_sqrt2).erf());
                        let pdf = c * (-half * v * v).exp();
                        d * (cdf + v * pdf)
                    })
                    .collect();
                res.push((*x, dx));
            }
            Op::Dropout { x, mask } => {
                res.push((*x, g.iter().zip(mask).map(|(&d, &m)| d * m).collect()));
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(out_shape, *axis);
                let y = node.value.data();
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |t: usize| o * len * inner + t * inner + i;
                        let mut dot = T::zero();
                        for t in 0..len {
                            dot += g[at(t)] * y[at(t)];
                        }
                        for t in 0..len {
                            dx[at(t)] = y[at(t)] * (g[at(t)] - dot);
                        }
                    }
                }
                res.push((*x, dx));
            }
            Op::LayerNorm { x, gamma, beta, normalized, inv_std } => {
                let d = *out_shape.last().unwrap();
                let rows = g.len() / d;
                let gm = val(*gamma);
                if needs(*gamma) || needs(*beta) {
                    let mut dg = vec![T::zero(); d];
                    let mut db = vec![T::zero(); d];
                    for r in 0..rows {
                        for c in 0..d {
                            dg[c] += g[r * d + c] * normalized[r * d + c];
                            db[c] += g[r * d + c];
                        }
                    }
                    res.push((*gamma, dg));
                    res.push((*beta, db));
                }
                if needs(*x) {
                    let dn = T::of(d as f64);
                    let mut dx = vec![T::zero(); g.len()];
                    for r in 0..rows {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for c in 0..d {
                            let dxh = g[r * d + c] * gm[c];
                            s1 += dxh;
                            s2 += dxh * normalized[r * d + c];
                        }
                        for c in 0..d {
                            let dxh = g[r * d + c] * gm[c];
                            dx[r * d + c] = inv_std[r] * (dxh - s1 / dn - normalized[r * d + c] * s2 / dn);
                        }
                    }
                    res.push((*x, dx));
                }
            }
            Op::BatchNorm { x, gamma, beta, normalized, inv_std, train } => {
                let (n, c) = (out_shape[0], out_shape[1]);
                let spatial = numel(&out_shape[2..]);
                let gm = val(*gamma);
                let mut dg = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * spatial;
                        for k in base..base + spatial {
                            dg[ch] += g[k] * normalized[k];
                            db[ch] += g[k];
                        }
                    }
                }
                if needs(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    let m = T::of((n * spatial) as f64);
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * spatial;
                            let scale = gm[ch] * inv_std[ch];
                            for k in base..base + spatial {
                                dx[k] = if *train {
                                    // dxhat·γ/σ − mean terms, written per channel
                                    scale * (g[k] - db[ch] / m - normalized[k] * dg[ch] / m)
                                } else {
                                    scale * g[k]
                                };
                            }
                        }
                    }
                    res.push((*x, dx));
                }
                res.push((*gamma, dg));
                res.push((*beta, db));
            }
            Op::Conv { x, w, b, geometry } => {
                let grads = kernels::conv_backward(geometry, val(*x), val(*w), g);
                res.push((*x, grads.dx));
                res.push((*w, grads.dw));
                if let Some(b) = b {
                    res.push((*b, grads.db));
                }
            }
            Op::Reshape { x } => res.push((*x, g.to_vec())),
            Op::Permute { x, perm } => {
                let inv = kernels::inverse_permutation(perm);
                res.push((*x, kernels::permute(out_shape, &inv, g)));
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_split(out_shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let ext = shp(v)[*axis];
                    let mut dv = Vec::with_capacity(outer * ext * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        dv.extend_from_slice(&g[base..base + ext * inner]);
                    }
                    offset += ext;
                    res.push((v, dv));
                }
            }
            Op::Narrow { x, axis, start } => {
                let sx = shp(*x);
                let (outer, ext, inner) = axis_split(sx, *axis);
                let len = out_shape[*axis];
                let mut dx = vec![T::zero(); numel(sx)];
                for o in 0..outer {
                    let base = (o * ext + start) * inner;
                    dx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                res.push((*x, dx));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = shp(*logits)[1];
                let scale = g[0] / T::of(labels.len() as f64);
                let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    dx[r * c + l] -= scale;
                }
                res.push((*logits, dx));
            }
        }
        res
    }
}
