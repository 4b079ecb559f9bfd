//! The multimodal fusion transformer: feature extractor, tokenizers, encoder
//! stack and classifier, wired over a shared [`ParamSet`].

pub mod encoder;
pub mod extractor;
pub mod tokenizer;

use serde::{Deserialize, Serialize};

use crate::error::{MftError, Result};
use crate::nn::Forward;
use crate::params::{Init, ParamSet};
use crate::rng::Rng;
use crate::tape::Var;
use crate::tensor::Real;

pub use encoder::{Classifier, EncoderBlock};
pub use extractor::FeatureExtractor;
pub use tokenizer::{soft_tokenize, AuxTokenizer, HsiTokenizer, SequenceAssembler, TokenizerKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// HSI bands `B`.
    pub bands: usize,
    /// Auxiliary-modality channels `C`.
    pub aux_channels: usize,
    pub classes: usize,
    /// Patch side `k` (odd).
    pub patch: usize,
    /// HSI tokens `n`.
    pub tokens: usize,
    pub heads: usize,
    pub depth: usize,
    pub embed_dim: usize,
    pub mlp_hidden: usize,
    pub dropout: f64,
    pub tokenizer: TokenizerKind,
}

impl ModelConfig {
    /// Default architecture for a scene with the given modalities.
    pub fn new(bands: usize, aux_channels: usize, classes: usize) -> Self {
        ModelConfig {
            bands,
            aux_channels,
            classes,
            patch: 11,
            tokens: 4,
            heads: 8,
            depth: 1,
            embed_dim: 64,
            mlp_hidden: 256,
            dropout: 0.1,
            tokenizer: TokenizerKind::Channel,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(MftError::Config(m));
        if self.bands < extractor::CONV3D_KERNEL[2] {
            return fail(format!("need at least 9 HSI bands, got {}", self.bands));
        }
        if self.aux_channels == 0 {
            return fail("auxiliary modality needs at least one channel".into());
        }
        if self.classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.patch < 3 || self.patch % 2 == 0 {
            return fail(format!("patch size must be odd and at least 3, got {}", self.patch));
        }
        if self.tokens == 0 || self.depth == 0 || self.mlp_hidden == 0 {
            return fail("tokens, depth and MLP width must be positive".into());
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return fail(format!(
                "embedding width {} is not divisible by {} heads",
                self.embed_dim, self.heads
            ));
        }
        if self.embed_dim % extractor::HET_GROUPS != 0 {
            return fail(format!("embedding width {} must be a multiple of 4", self.embed_dim));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout rate {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Learnable scalars, in closed form.
    pub fn parameter_count(&self) -> usize {
        let (e, n, c, k) = (self.embed_dim, self.tokens, self.aux_channels, self.classes);
        let d = FeatureExtractor::reduced_bands(self.bands);
        let het_in = extractor::CONV3D_CHANNELS * d;
        let extractor = 8 * 81 + 8 + 2 * 8 + e * (het_in / 4) * 9 + e + e * het_in + e + 2 * e;
        let hsi = e * n + e * e;
        let cc = AuxTokenizer::conv_channels(self.tokenizer, e);
        let aux = cc * c * 9 + cc + 2 * cc + cc + cc * e;
        let sequence = (n + 1) * e;
        let h = self.mlp_hidden;
        let block = 2 * e + 4 * e * e + 2 * e + e * h + h + h * e + e;
        let classifier = 2 * e + e * k + k;
        extractor + hsi + aux + sequence + self.depth * block + classifier
    }
}

/// Intermediate nodes of one forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    pub conv3d: Var,
    pub hetconv: Var,
    pub patch_tokens: Var,
    pub cls: Var,
    pub sequence: Var,
    pub blocks: Vec<Var>,
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct Mft {
    pub config: ModelConfig,
    pub extractor: FeatureExtractor,
    pub hsi_tokenizer: HsiTokenizer,
    pub aux_tokenizer: AuxTokenizer,
    pub sequence: SequenceAssembler,
    pub blocks: Vec<EncoderBlock>,
    pub classifier: Classifier,
}

impl Mft {
    /// Build the layer structure and freshly initialized parameters.
    pub fn new<T: Real>(config: ModelConfig, seed: u64) -> Result<(Mft, ParamSet<T>)> {
        config.validate()?;
        let mut rng = Rng::new(seed).substream("init", &[]);
        let mut init = Init { rng: &mut rng };
        let mut ps = ParamSet::new();
        let e = config.embed_dim;
        let extractor = FeatureExtractor::new(&mut ps, &mut init, config.bands, e)?;
        let hsi_tokenizer = HsiTokenizer::new(&mut ps, &mut init, e, config.tokens);
        let aux_tokenizer = AuxTokenizer::new(&mut ps, &mut init, config.tokenizer, config.aux_channels, e);
        let sequence = SequenceAssembler::new(&mut ps, &mut init, config.tokens, e, config.dropout);
        let blocks = (0..config.depth)
            .map(|i| EncoderBlock::new(&mut ps, &mut init, i, e, config.heads, config.mlp_hidden, config.dropout))
            .collect::<Result<Vec<_>>>()?;
        let classifier = Classifier::new(&mut ps, &mut init, e, config.classes);
        let model = Mft {
            config,
            extractor,
            hsi_tokenizer,
            aux_tokenizer,
            sequence,
            blocks,
            classifier,
        };
        Ok((model, ps))
    }

    /// Check that `ps` has exactly the layout this model expects.
    pub fn check_params<T: Real>(&self, ps: &ParamSet<T>) -> Result<()> {
        let (_, fresh) = Mft::new::<T>(self.config.clone(), 0)?;
        if fresh.len() != ps.len() {
            return Err(MftError::Config(format!(
                "parameter table has {} tensors, model expects {}",
                ps.len(),
                fresh.len()
            )));
        }
        for (a, b) in fresh.entries().iter().zip(ps.entries()) {
            if a.name != b.name || a.kind != b.kind || a.tensor.shape() != b.tensor.shape() {
                return Err(MftError::Config(format!(
                    "parameter {} {:?} does not match expected {} {:?} for {} tokenizer",
                    b.name,
                    b.tensor.shape(),
                    a.name,
                    a.tensor.shape(),
                    self.config.tokenizer
                )));
            }
        }
        Ok(())
    }

    /// `x_h[N, k, k, B]`, `x_l[N, k, k, C]` → logits `[N, classes]`.
    pub fn forward<T: Real>(&self, fwd: &mut Forward<'_, '_, T>, x_h: Var, x_l: Var) -> Result<Var> {
        Ok(self.trace(fwd, x_h, x_l)?.logits)
    }

    pub fn trace<T: Real>(&self, fwd: &mut Forward<'_, '_, T>, x_h: Var, x_l: Var) -> Result<Trace> {
        let cfg = &self.config;
        let (sh, sl) = (fwd.tape.shape(x_h).to_vec(), fwd.tape.shape(x_l).to_vec());
        let k = cfg.patch;
        if sh.len() != 4 || sh[1..] != [k, k, cfg.bands] {
            return Err(MftError::Config(format!(
                "HSI batch {sh:?} does not match [N, {k}, {k}, {}]",
                cfg.bands
            )));
        }
        if sl.len() != 4 || sl[1..] != [k, k, cfg.aux_channels] || sl[0] != sh[0] {
            return Err(MftError::Config(format!(
                "auxiliary batch {sl:?} does not match [{}, {k}, {k}, {}]",
                sh[0], cfg.aux_channels
            )));
        }
        fwd.tape.push_scope("extractor");
        let conv3d = self.extractor.conv3d_block(fwd, x_h);
        let hetconv = conv3d.and_then(|c| Ok((c, self.extractor.hetconv2d_block(fwd, c)?)));
        fwd.tape.pop_scope();
        let (conv3d, hetconv) = hetconv?;
        let patch_tokens = self.hsi_tokenizer.forward(fwd, hetconv)?;
        let aux = fwd.tape.permute(x_l, &[0, 3, 1, 2])?;
        let cls = self.aux_tokenizer.forward(fwd, aux)?;
        let sequence = self.sequence.forward(fwd, cls, patch_tokens)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        let mut x = sequence;
        for block in &self.blocks {
            x = block.forward(fwd, x)?;
            blocks.push(x);
        }
        let logits = self.classifier.forward(fwd, x)?;
        Ok(Trace {
            conv3d,
            hetconv,
            patch_tokens,
            cls,
            sequence,
            blocks,
            logits,
        })
    }
}
