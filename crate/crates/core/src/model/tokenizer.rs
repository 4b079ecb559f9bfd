//! Soft tokenizers that turn spatial feature maps into a few tokens, and the
//! sequence assembly that prepends the auxiliary CLS token.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{MftError, Result};
use crate::nn::{BatchNorm, Forward};
use crate::params::{Init, ParamId, ParamKind, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// How the auxiliary patch becomes a CLS token.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerKind {
    /// Conv2D reduces the auxiliary channels to one.
    Pixel,
    /// Conv2D expands the auxiliary channels to the embedding width.
    #[default]
    Channel,
}

impl fmt::Display for TokenizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TokenizerKind::Pixel => "pixel",
            TokenizerKind::Channel => "channel",
        })
    }
}

impl FromStr for TokenizerKind {
    type Err = MftError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pixel" => Ok(TokenizerKind::Pixel),
            "channel" => Ok(TokenizerKind::Channel),
            other => Err(MftError::Config(format!("unknown tokenizer {other:?} (pixel|channel)"))),
        }
    }
}

/// `A = softmax_S((X·W_a)ᵀ)`, `tokens = A · (X·W_b)`.
///
/// `x_flat[N, S, c]`, `w_a[c, n]`, `w_b[c, d]` → `(A[N, n, S], tokens[N, n, d])`.
/// Each token is a convex combination of the projected spatial rows.
pub fn soft_tokenize<T: Real>(tape: &mut Tape<T>, x_flat: Var, w_a: Var, w_b: Var) -> Result<(Var, Var)> {
    let logits = tape.matmul(x_flat, w_a)?;
    let logits = tape.transpose(logits)?;
    let weights = tape.softmax(logits, 2)?;
    let projected = tape.matmul(x_flat, w_b)?;
    let tokens = tape.bmm(weights, projected)?;
    Ok((weights, tokens))
}

/// `[N, c, h, w] → [N, h·w, c]`, spatial positions row-major.
fn flatten_spatial<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let x = tape.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    tape.transpose(x)
}

#[derive(Clone, Debug)]
pub struct HsiTokenizer {
    pub tokens: usize,
    pub w_a: ParamId,
    pub w_b: ParamId,
}

impl HsiTokenizer {
    pub fn new<T: Real>(ps: &mut ParamSet<T>, init: &mut Init<'_>, dim: usize, tokens: usize) -> Self {
        HsiTokenizer {
            tokens,
            w_a: ps.add("hsi_tokenizer.w_a", ParamKind::Weight, init.fan_in([dim, tokens], dim)),
            w_b: ps.add("hsi_tokenizer.w_b", ParamKind::Weight, init.fan_in([dim, dim], dim)),
        }
    }

    /// `feat[N, d, k, k] → [N, n, d]`.
    pub fn forward<T: Real>(&self, fwd: &mut Forward<'_, '_, T>, feat: Var) -> Result<Var> {
        fwd.tape.push_scope("hsi_tokenizer");
        let out = (|| {
            let x_flat = flatten_spatial(fwd.tape, feat)?;
            let (w_a, w_b) = (fwd.param(self.w_a), fwd.param(self.w_b));
            soft_tokenize(fwd.tape, x_flat, w_a, w_b).map(|(_, t)| t)
        })();
        fwd.tape.pop_scope();
        out
    }
}

#[derive(Clone, Debug)]
pub struct AuxTokenizer {
    pub kind: TokenizerKind,
    pub in_channels: usize,
    pub conv_weight: ParamId,
    pub conv_bias: ParamId,
    pub bn: BatchNorm,
    pub w_a: ParamId,
    pub w_b: ParamId,
}

impl AuxTokenizer {
    pub fn conv_channels(kind: TokenizerKind, dim: usize) -> usize {
        match kind {
            TokenizerKind::Pixel => 1,
            TokenizerKind::Channel => dim,
        }
    }

    pub fn new<T: Real>(
        ps: &mut ParamSet<T>,
        init: &mut Init<'_>,
        kind: TokenizerKind,
        in_channels: usize,
        dim: usize,
    ) -> Self {
        let cc = Self::conv_channels(kind, dim);
        AuxTokenizer {
            kind,
            in_channels,
            conv_weight: ps.add(
                "aux_tokenizer.conv.weight",
                ParamKind::Weight,
                init.fan_in([cc, in_channels, 3, 3], in_channels * 9),
            ),
            conv_bias: ps.add("aux_tokenizer.conv.bias", ParamKind::Weight, Tensor::zeros([cc])),
            bn: BatchNorm::new(ps, "aux_tokenizer.bn", cc),
            w_a: ps.add("aux_tokenizer.w_a", ParamKind::Weight, init.fan_in([cc, 1], cc)),
            w_b: ps.add("aux_tokenizer.w_b", ParamKind::Weight, init.fan_in([cc, dim], cc)),
        }
    }

    /// `x_l[N, C, k, k] → [N, 1, d]`.
    pub fn forward<T: Real>(&self, fwd: &mut Forward<'_, '_, T>, x_l: Var) -> Result<Var> {
        let s = fwd.tape.shape(x_l).to_vec();
        if s.len() != 4 || s[1] != self.in_channels {
            return Err(MftError::Config(format!(
                "{} tokenizer built for {} auxiliary channels, got patches {s:?}",
                self.kind, self.in_channels
            )));
        }
        let w = fwd.params().get(self.w_a);
        if w.shape()[0] != fwd.params().get(self.conv_weight).shape()[0] {
            return Err(MftError::Config(format!(
                "{} tokenizer parameters do not match its variant",
                self.kind
            )));
        }
        fwd.tape.push_scope("aux_tokenizer");
        let out = (|| {
            let (cw, cb) = (fwd.param(self.conv_weight), fwd.param(self.conv_bias));
            let x = fwd.tape.conv2d(x_l, cw, Some(cb), 1, 1)?;
            let x = self.bn.forward(fwd, x)?;
            let x = fwd.tape.gelu(x);
            let x_conv = flatten_spatial(fwd.tape, x)?;
            let (w_a, w_b) = (fwd.param(self.w_a), fwd.param(self.w_b));
            soft_tokenize(fwd.tape, x_conv, w_a, w_b).map(|(_, t)| t)
        })();
        fwd.tape.pop_scope();
        out
    }
}

/// Concatenate `[CLS ‖ patch tokens]`, add learned position embeddings, dropout.
#[derive(Clone, Debug)]
pub struct SequenceAssembler {
    pub pos_embed: ParamId,
    pub dropout: f64,
}

impl SequenceAssembler {
    pub fn new<T: Real>(ps: &mut ParamSet<T>, init: &mut Init<'_>, tokens: usize, dim: usize, dropout: f64) -> Self {
        SequenceAssembler {
            pos_embed: ps.add("sequence.pos_embed", ParamKind::Weight, init.normal([tokens + 1, dim], 0.02)),
            dropout,
        }
    }

    pub fn forward<T: Real>(&self, fwd: &mut Forward<'_, '_, T>, cls: Var, patches: Var) -> Result<Var> {
        let (sc, sp) = (fwd.tape.shape(cls).to_vec(), fwd.tape.shape(patches).to_vec());
        if sc.len() != 3 || sp.len() != 3 || sc[1] != 1 || sc[0] != sp[0] || sc[2] != sp[2] {
            return Err(MftError::dim("assemble_sequence", &sc, &sp));
        }
        fwd.tape.push_scope("sequence");
        let out = (|| {
            let seq = fwd.tape.concat(&[cls, patches], 1)?;
            let pe = fwd.param(self.pos_embed);
            let seq = fwd.tape.add(seq, pe)?;
            fwd.dropout(seq, self.dropout)
        })();
        fwd.tape.pop_scope();
        out
    }
}
