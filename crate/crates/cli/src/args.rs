//! Command-line surface. Every argument struct is also the serialized form
//! stored in a run manifest, so a manifest can be replayed verbatim.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use mft_core::data::Modality;
use mft_core::TokenizerKind;
use serde::{Deserialize, Serialize};

use crate::UsageError;

#[derive(Debug, Parser)]
#[command(name = "mft", version, about = "Multimodal fusion transformer for HSI + auxiliary rasters")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "lowercase")]
pub enum Command {
    /// Generate a synthetic labeled scene.
    Synth(SynthArgs),
    /// Train one or more models on a scene.
    Train(TrainArgs),
    /// Evaluate a checkpoint and optionally render a classification map.
    Eval(EvalArgs),
    /// Finite-difference check of every backward rule at toy sizes.
    Gradcheck(GradcheckArgs),
    /// Describe a scene, checkpoint or run manifest.
    Inspect(InspectArgs),
    /// Re-run the command recorded in a run manifest.
    Replay(ReplayArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct Size {
    pub rows: usize,
    pub cols: usize,
}

impl FromStr for Size {
    type Err = UsageError;

    fn from_str(s: &str) -> Result<Self, UsageError> {
        let bad = || UsageError(format!("size must look like 64x64, got {s:?}"));
        let (r, c) = s.split_once('x').ok_or_else(bad)?;
        let rows = r.trim().parse().map_err(|_| bad())?;
        let cols = c.trim().parse().map_err(|_| bad())?;
        Ok(Size { rows, cols })
    }
}

impl fmt::Display for Size {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

impl From<Size> for String {
    fn from(s: Size) -> String {
        s.to_string()
    }
}

impl TryFrom<String> for Size {
    type Error = UsageError;

    fn try_from(s: String) -> Result<Self, UsageError> {
        s.parse()
    }
}

/// Which labeled pixels train and which test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum SplitSpec {
    /// The scene's own train/test masks.
    Disjoint,
    /// Stratified random split with this training fraction per class.
    Random(f64),
    /// Every labeled pixel is a test pixel (evaluation only).
    All,
}

impl FromStr for SplitSpec {
    type Err = UsageError;

    fn from_str(s: &str) -> Result<Self, UsageError> {
        match s {
            "disjoint" => Ok(SplitSpec::Disjoint),
            "all" => Ok(SplitSpec::All),
            _ => {
                let frac = s
                    .strip_prefix("random:")
                    .and_then(|f| f.parse::<f64>().ok())
                    .ok_or_else(|| UsageError(format!("split must be disjoint, all or random:<fraction>, got {s:?}")))?;
                if !(frac > 0.0 && frac < 1.0) {
                    return Err(UsageError(format!("split fraction must lie in (0, 1), got {frac}")));
                }
                Ok(SplitSpec::Random(frac))
            }
        }
    }
}

impl fmt::Display for SplitSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitSpec::Disjoint => f.write_str("disjoint"),
            SplitSpec::All => f.write_str("all"),
            SplitSpec::Random(x) => write!(f, "random:{x}"),
        }
    }
}

impl From<SplitSpec> for String {
    fn from(s: SplitSpec) -> String {
        s.to_string()
    }
}

impl TryFrom<String> for SplitSpec {
    type Error = UsageError;

    fn try_from(s: String) -> Result<Self, UsageError> {
        s.parse()
    }
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u16).range(2..))]
    pub classes: u16,
    #[arg(long, default_value = "64x64")]
    pub size: Size,
    #[arg(long, default_value_t = 16)]
    pub bands: usize,
    #[arg(long, default_value_t = 1)]
    pub aux_channels: usize,
    #[arg(long, default_value_t = 2)]
    pub blobs: usize,
    /// Standard deviation of the additive noise.
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    /// Make the auxiliary modality pure noise, unrelated to the labels.
    #[arg(long)]
    pub aux_noise: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "lidar")]
    pub modality: Modality,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub scene: PathBuf,
    /// disjoint | random:<fraction>
    #[arg(long, default_value = "disjoint")]
    pub split: SplitSpec,
    #[arg(long, default_value = "channel")]
    pub tokenizer: TokenizerKind,
    #[arg(long, default_value_t = 4)]
    pub tokens: usize,
    #[arg(long, default_value_t = 8)]
    pub heads: usize,
    #[arg(long, default_value_t = 1)]
    pub depth: usize,
    #[arg(long, default_value_t = 11)]
    pub patch: usize,
    #[arg(long, default_value_t = 64)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 0.1)]
    pub dropout: f64,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 5e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 5e-3)]
    pub wd: f64,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 50)]
    pub step_size: usize,
    #[arg(long, default_value_t = 0.9)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Independent runs; run `r` uses seed `seed + r`.
    #[arg(long, default_value_t = 1)]
    pub repeats: u64,
    /// Draw a fresh random split for each repeat instead of reusing one.
    #[arg(long)]
    pub resplit: bool,
    /// Write an intermediate checkpoint every this many epochs (0 = never).
    #[arg(long, default_value_t = 0)]
    pub save_every: usize,
    /// Log test OA every this many epochs (0 = never).
    #[arg(long, default_value_t = 0)]
    pub eval_every: usize,
    /// Continue from this checkpoint directory up to `--epochs`.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub scene: PathBuf,
    /// Pixels to score: all | disjoint | random:<fraction> (test part).
    #[arg(long, default_value = "all")]
    pub split: SplitSpec,
    /// Seed of a random split.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 500)]
    pub batch: usize,
    /// Render predictions for every labeled pixel to this P6 file.
    #[arg(long)]
    pub map: Option<PathBuf>,
    /// Color every pixel of the map, labeled or not.
    #[arg(long, requires = "map")]
    pub full: bool,
    /// Report path.
    #[arg(short, long, default_value = "report.json")]
    pub output: PathBuf,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct GradcheckArgs {
    /// Toy dimensions, e.g. `B=12,C=2,k=5,n=2,depth=1,classes=3`.
    #[arg(long, default_value = "")]
    pub dims: String,
    /// Corrupt the backward rules inside this scope (negative control).
    #[arg(long = "break")]
    pub fault: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the table as JSON.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct InspectArgs {
    /// Scene directory, checkpoint directory or manifest file.
    pub path: PathBuf,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
    /// Write outputs here instead of the recorded location.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}
