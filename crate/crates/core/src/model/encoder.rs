//! Transformer encoder whose attention queries only the CLS token
//! (multi-head cross-patch attention), plus the classification head.

use crate::error::{MftError, Result};
use crate::nn::{Forward, LayerNorm, Linear};
use crate::params::{Init, ParamSet};
use crate::tape::Var;
use crate::tensor::Real;

#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub dim: usize,
    pub heads: usize,
    pub dropout: f64,
    pub ln1: LayerNorm,
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub w_l: Linear,
    pub ln2: LayerNorm,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

impl EncoderBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        ps: &mut ParamSet<T>,
        init: &mut Init<'_>,
        index: usize,
        dim: usize,
        heads: usize,
        hidden: usize,
        dropout: f64,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(MftError::Config(format!(
                "embedding width {dim} is not divisible by {heads} heads"
            )));
        }
        let p = format!("encoder.{index}");
        Ok(EncoderBlock {
            dim,
            heads,
            dropout,
            ln1: LayerNorm::new(ps, &format!("{p}.ln1"), dim),
            w_q: Linear::new(ps, init, &format!("{p}.attn.w_q"), dim, dim, false),
            w_k: Linear::new(ps, init, &format!("{p}.attn.w_k"), dim, dim, false),
            w_v: Linear::new(ps, init, &format!("{p}.attn.w_v"), dim, dim, false),
            w_l: Linear::new(ps, init, &format!("{p}.attn.w_l"), dim, dim, false),
            ln2: LayerNorm::new(ps, &format!("{p}.ln2"), dim),
            mlp_in: Linear::new(ps, init, &format!("{p}.mlp.fc1"), dim, hidden, true),
            mlp_out: Linear::new(ps, init, &format!("{p}.mlp.fc2"), hidden, dim, true),
        })
    }

    /// `x[N, T, d] → y'_cls[N, 1, d]`: the CLS row queries every row of `x`.
    /// Records the attention weights `[N, h, 1, T]` on `fwd`.
    pub fn mcrosspa<T: Real>(&self, fwd: &mut Forward<'_, '_, T>, x: Var) -> Result<Var> {
        fwd.tape.push_scope("attention");
        let out = self.mcrosspa_inner(fwd, x);
        fwd.tape.pop_scope();
        out
    }

    fn mcrosspa_inner<T: Real>(&self, fwd: &mut Forward<'_, '_, T>, x: Var) -> Result<Var> {
        let s = fwd.tape.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.dim {
            return Err(MftError::Shape(format!(
                "attention expects [N, T, {}], got {s:?}",
                self.dim
            )));
        }
        let (n, t, h) = (s[0], s[1], self.heads);
        let hd = self.dim / h;
        let cls = fwd.tape.narrow(x, 1, 0, 1)?;
        let q = self.w_q.forward(fwd, cls)?;
        let k = self.w_k.forward(fwd, x)?;
        let v = self.w_v.forward(fwd, x)?;
        let tape = &mut *fwd.tape;
        let q = tape.reshape(q, &[n, 1, h, hd])?;
        let q = tape.permute(q, &[0, 2, 1, 3])?;
        let k = tape.reshape(k, &[n, t, h, hd])?;
        let k = tape.permute(k, &[0, 2, 3, 1])?;
        let v = tape.reshape(v, &[n, t, h, hd])?;
        let v = tape.permute(v, &[0, 2, 1, 3])?;

        let scores = tape.bmm(q, k)?;
        let scores = tape.scale(scores, T::of(1.0 / (hd as f64).sqrt()));
        let z = tape.softmax(scores, 3)?;
        let mixed = tape.bmm(z, v)?;
        let mixed = tape.permute(mixed, &[0, 2, 1, 3])?;
        let mixed = tape.reshape(mixed, &[n, 1, self.dim])?;
        fwd.record_attention(z);

        let y = self.w_l.forward(fwd, mixed)?;
        fwd.dropout(y, self.dropout)
    }

    /// Pre-norm block: `y_k = x + y'_cls` (broadcast over rows), then
    /// `y_k + MLP(LN(y_k))`.
    pub fn forward<T: Real>(&self, fwd: &mut Forward<'_, '_, T>, x: Var) -> Result<Var> {
        fwd.tape.push_scope("encoder");
        let out = (|| {
            let normed = self.ln1.forward(fwd, x)?;
            let attended = self.mcrosspa(fwd, normed)?;
            let y = fwd.tape.add(x, attended)?;
            let m = self.ln2.forward(fwd, y)?;
            let m = self.mlp_in.forward(fwd, m)?;
            let m = fwd.tape.gelu(m);
            let m = fwd.dropout(m, self.dropout)?;
            let m = self.mlp_out.forward(fwd, m)?;
            let m = fwd.dropout(m, self.dropout)?;
            fwd.tape.add(y, m)
        })();
        fwd.tape.pop_scope();
        out
    }
}

/// LayerNorm then a linear map from the CLS row to class logits.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub ln: LayerNorm,
    pub head: Linear,
}

impl Classifier {
    pub fn new<T: Real>(ps: &mut ParamSet<T>, init: &mut Init<'_>, dim: usize, classes: usize) -> Self {
        Classifier {
            ln: LayerNorm::new(ps, "classifier.ln", dim),
            head: Linear::new(ps, init, "classifier.head", dim, classes, true),
        }
    }

    /// `seq[N, T, d] → logits[N, classes]`, reading row 0 only.
    pub fn forward<T: Real>(&self, fwd: &mut Forward<'_, '_, T>, seq: Var) -> Result<Var> {
        fwd.tape.push_scope("classifier");
        let out = (|| {
            let s = fwd.tape.shape(seq).to_vec();
            let cls = fwd.tape.narrow(seq, 1, 0, 1)?;
            let cls = fwd.tape.reshape(cls, &[s[0], s[2]])?;
            let cls = self.ln.forward(fwd, cls)?;
            self.head.forward(fwd, cls)
        })();
        fwd.tape.pop_scope();
        out
    }
}
