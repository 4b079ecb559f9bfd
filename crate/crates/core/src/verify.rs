//! Finite-difference verification of every parameterized stage of the model
//! and of the full training loss, at small dimensions.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{MftError, Result};
use crate::gradcheck::{grad_check_with, GRAD_TOLERANCE};
use crate::model::{Mft, ModelConfig, TokenizerKind};
use crate::nn::{Forward, Mode};
use crate::params::{ParamId, ParamKind, ParamSet};
use crate::rng::Rng;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Model dimensions used by the suite.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ToyDims {
    pub batch: usize,
    pub bands: usize,
    pub aux_channels: usize,
    pub patch: usize,
    pub tokens: usize,
    pub depth: usize,
    pub classes: usize,
    pub embed_dim: usize,
    pub heads: usize,
}

impl Default for ToyDims {
    fn default() -> Self {
        ToyDims {
            batch: 1,
            bands: 12,
            aux_channels: 2,
            patch: 5,
            tokens: 2,
            depth: 1,
            classes: 3,
            embed_dim: 64,
            heads: 8,
        }
    }
}

impl ToyDims {
    pub fn config(&self, tokenizer: TokenizerKind) -> ModelConfig {
        ModelConfig {
            tokens: self.tokens,
            patch: self.patch,
            depth: self.depth,
            embed_dim: self.embed_dim,
            heads: self.heads,
            mlp_hidden: 4 * self.embed_dim,
            tokenizer,
            ..ModelConfig::new(self.bands, self.aux_channels, self.classes)
        }
    }
}

impl fmt::Display for ToyDims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "N={},B={},C={},k={},n={},depth={},classes={},d={},heads={}",
            self.batch,
            self.bands,
            self.aux_channels,
            self.patch,
            self.tokens,
            self.depth,
            self.classes,
            self.embed_dim,
            self.heads
        )
    }
}

/// Comma-separated `key=value` overrides of the defaults, e.g. `B=12,k=5,n=2`.
impl FromStr for ToyDims {
    type Err = MftError;

    fn from_str(s: &str) -> Result<Self> {
        let mut dims = ToyDims::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| MftError::Config(format!("expected key=value, got {part:?}")))?;
            let value: usize = value
                .trim()
                .parse()
                .map_err(|_| MftError::Config(format!("{key}: not a non-negative integer: {value:?}")))?;
            let slot = match key.trim() {
                "N" => &mut dims.batch,
                "B" => &mut dims.bands,
                "C" => &mut dims.aux_channels,
                "k" => &mut dims.patch,
                "n" => &mut dims.tokens,
                "depth" => &mut dims.depth,
                "classes" => &mut dims.classes,
                "d" => &mut dims.embed_dim,
                "heads" => &mut dims.heads,
                other => return Err(MftError::Config(format!("unknown dimension {other:?}"))),
            };
            *slot = value;
        }
        if dims.batch == 0 {
            return Err(MftError::Config("batch size must be positive".into()));
        }
        dims.config(TokenizerKind::Channel).validate()?;
        Ok(dims)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckRow {
    pub name: String,
    pub max_error: f64,
    /// Tensor holding the worst element.
    pub worst: Option<String>,
    /// Every tensor whose error exceeds the tolerance.
    pub failing: Vec<String>,
    pub elements: usize,
    pub passed: bool,
}

enum Loss {
    /// `Σ out ⊙ R` with a fixed random `R`.
    Probe,
    CrossEntropy(Vec<usize>),
}

struct Stage<'a> {
    model: &'a Mft,
    params: &'a ParamSet<f64>,
    seed: u64,
    fault: Option<&'a str>,
}

impl Stage<'_> {
    fn weights(&self, prefixes: &[&str]) -> Vec<ParamId> {
        self.params
            .ids()
            .filter(|&id| {
                let e = self.params.entry(id);
                e.kind == ParamKind::Weight && prefixes.iter().any(|p| e.name.starts_with(p))
            })
            .collect()
    }

    fn check<F>(&self, name: &str, inputs: Vec<Tensor<f64>>, ids: Vec<ParamId>, loss: Loss, f: F) -> Result<CheckRow>
    where
        F: Fn(&Mft, &mut Forward<'_, '_, f64>, &[Var]) -> Result<Var>,
    {
        let dropout = Rng::new(self.seed).substream("gradcheck-dropout", &[]);
        let run = |tape: &mut crate::Tape<f64>, xs: &[Var], ws: &[Var]| -> Result<Var> {
            let mut fwd = Forward::new(tape, self.params, Mode::Train, dropout.clone());
            for (&id, &v) in ids.iter().zip(ws) {
                fwd.bind(id, v);
            }
            f(self.model, &mut fwd, xs)
        };

        let probe = match loss {
            Loss::Probe => {
                let mut tape = crate::Tape::new();
                let xs: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
                let out = run(&mut tape, &xs, &[])?;
                let shape = tape.shape(out).to_vec();
                Some(Rng::new(self.seed).substream("gradcheck-probe", &[]).normal_tensor::<f64>(shape, 1.0))
            }
            Loss::CrossEntropy(_) => None,
        };

        let n_in = inputs.len();
        let mut all = inputs;
        all.extend(ids.iter().map(|&id| self.params.get(id).clone()));
        let report = grad_check_with(
            |tape, vars| {
                let (xs, ws) = vars.split_at(n_in);
                let out = run(tape, xs, ws)?;
                match (&loss, &probe) {
                    (Loss::CrossEntropy(labels), _) => tape.cross_entropy(out, labels),
                    (Loss::Probe, Some(p)) => {
                        let p = tape.constant(p.clone());
                        let y = tape.mul(out, p)?;
                        Ok(tape.sum(y))
                    }
                    (Loss::Probe, None) => unreachable!(),
                }
            },
            &all,
            self.fault,
        )?;
        let tensor_name = |i: usize| {
            if i < n_in {
                format!("input {i}")
            } else {
                self.params.entry(ids[i - n_in]).name.clone()
            }
        };
        let worst = report.worst.map(|(i, _)| tensor_name(i));
        let failing = (0..report.per_input.len())
            .filter(|&i| report.per_input[i] > GRAD_TOLERANCE)
            .map(tensor_name)
            .collect();
        Ok(CheckRow {
            name: name.to_string(),
            max_error: report.max_error,
            worst,
            failing,
            elements: report.elements,
            passed: report.max_error <= GRAD_TOLERANCE,
        })
    }
}

/// Tape scopes that `run_suite` can corrupt.
pub const FAULT_SCOPES: [&str; 7] = [
    "extractor",
    "hsi_tokenizer",
    "aux_tokenizer",
    "sequence",
    "encoder",
    "attention",
    "classifier",
];

/// Run every stage check and the end-to-end loss check. With `fault`, the
/// backward rules inside that scope (e.g. `"attention"`) are corrupted.
pub fn run_suite(dims: &ToyDims, seed: u64, fault: Option<&str>) -> Result<Vec<CheckRow>> {
    if let Some(f) = fault {
        if !FAULT_SCOPES.contains(&f) {
            return Err(MftError::Config(format!(
                "unknown scope {f:?}; expected one of {}",
                FAULT_SCOPES.join(", ")
            )));
        }
    }
    let mut rng = Rng::new(seed).substream("gradcheck-inputs", &[]);
    let (n, k, e, t) = (dims.batch, dims.patch, dims.embed_dim, dims.tokens + 1);
    let (channel, ps) = Mft::new::<f64>(dims.config(TokenizerKind::Channel), seed)?;
    let (pixel, ps_pixel) = Mft::new::<f64>(dims.config(TokenizerKind::Pixel), seed)?;
    let reduced = crate::model::FeatureExtractor::reduced_bands(dims.bands);
    let st = Stage { model: &channel, params: &ps, seed, fault };
    let sp = Stage { model: &pixel, params: &ps_pixel, seed, fault };
    let mut normal = |shape: Vec<usize>| rng.normal_tensor::<f64>(shape, 1.0);

    let x_h = normal(vec![n, k, k, dims.bands]);
    let x_l = normal(vec![n, k, k, dims.aux_channels]);
    let x_l_nchw = normal(vec![n, dims.aux_channels, k, k]);
    let x_3d = normal(vec![n, 8, k, k, reduced]);
    let feat = normal(vec![n, e, k, k]);
    let cls = normal(vec![n, 1, e]);
    let patches = normal(vec![n, dims.tokens, e]);
    let seq = normal(vec![n, t, e]);
    let labels: Vec<usize> = (0..n).map(|_| rng.below(dims.classes)).collect();

    let mut rows = vec![
        st.check("conv3d_block", vec![x_h.clone()], st.weights(&["extractor.conv3d", "extractor.bn3d"]), Loss::Probe, |m, f, x| {
            m.extractor.conv3d_block(f, x[0])
        })?,
        st.check("hetconv2d_block", vec![x_3d], st.weights(&["extractor.het", "extractor.bn2d"]), Loss::Probe, |m, f, x| {
            m.extractor.hetconv2d_block(f, x[0])
        })?,
        st.check("hsi_tokenize", vec![feat], st.weights(&["hsi_tokenizer."]), Loss::Probe, |m, f, x| {
            m.hsi_tokenizer.forward(f, x[0])
        })?,
        sp.check("aux_tokenize[pixel]", vec![x_l_nchw.clone()], sp.weights(&["aux_tokenizer."]), Loss::Probe, |m, f, x| {
            m.aux_tokenizer.forward(f, x[0])
        })?,
        st.check("aux_tokenize[channel]", vec![x_l_nchw], st.weights(&["aux_tokenizer."]), Loss::Probe, |m, f, x| {
            m.aux_tokenizer.forward(f, x[0])
        })?,
        st.check("assemble_sequence", vec![cls, patches], st.weights(&["sequence."]), Loss::Probe, |m, f, x| {
            m.sequence.forward(f, x[0], x[1])
        })?,
    ];
    for (b, _) in channel.blocks.iter().enumerate() {
        let attn = format!("encoder.{b}.attn.");
        let block = format!("encoder.{b}.");
        rows.push(st.check(&format!("mcrosspa[{b}]"), vec![seq.clone()], st.weights(&[&attn]), Loss::Probe, |m, f, x| {
            m.blocks[b].mcrosspa(f, x[0])
        })?);
        rows.push(st.check(&format!("encoder_block[{b}]"), vec![seq.clone()], st.weights(&[&block]), Loss::Probe, |m, f, x| {
            m.blocks[b].forward(f, x[0])
        })?);
    }
    rows.push(st.check("classify", vec![seq], st.weights(&["classifier."]), Loss::Probe, |m, f, x| {
        m.classifier.forward(f, x[0])
    })?);
    rows.push(st.check("mft_loss", vec![x_h, x_l], st.weights(&[""]), Loss::CrossEntropy(labels), |m, f, x| {
        m.forward(f, x[0], x[1])
    })?);
    Ok(rows)
}
