//! Synthetic co-registered scenes with a known answer.
//!
//! Classes come in pairs that share one spectral signature, so the HSI alone
//! cannot tell the members of a pair apart; the auxiliary raster carries a
//! distinct elevation level per class and resolves them.

use serde::{Deserialize, Serialize};

use super::{Modality, Scene};
use crate::error::{MftError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    pub rows: usize,
    pub cols: usize,
    pub bands: usize,
    pub aux_channels: usize,
    pub aux_informative: bool,
    pub blobs_per_class: usize,
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 4,
            rows: 64,
            cols: 64,
            bands: 16,
            aux_channels: 1,
            aux_informative: true,
            blobs_per_class: 2,
            noise: 0.05,
            seed: 0,
        }
    }
}

/// Attempts per blob within one layout.
const PLACEMENT_TRIES: usize = 300;
/// Fresh layouts tried before giving up.
const LAYOUT_TRIES: u64 = 40;
/// Background pixels required between blobs.
const GAP: isize = 4;

struct Blob {
    ci: f64,
    cj: f64,
    pixels: Vec<(usize, usize)>,
}

fn try_blob(rng: &mut Rng, cfg: &SynthConfig, labels: &[u16]) -> Option<Blob> {
    let (m, n) = (cfg.rows, cfg.cols);
    let base = 0.1 * m.min(n) as f64;
    let a = base * rng.uniform_in(0.8, 1.25);
    let b = base * rng.uniform_in(0.8, 1.25);
    let theta = rng.uniform_in(0.0, std::f64::consts::PI);
    let reach = a.max(b);
    if 2.0 * reach + 2.0 >= m.min(n) as f64 {
        return None;
    }
    let ci = rng.uniform_in(reach + 1.0, m as f64 - reach - 1.0);
    let cj = rng.uniform_in(reach + 1.0, n as f64 - reach - 1.0);
    let (s, c) = theta.sin_cos();
    let mut pixels = Vec::new();
    let (i0, i1) = ((ci - reach).floor().max(0.0) as usize, ((ci + reach).ceil() as usize).min(m - 1));
    let (j0, j1) = ((cj - reach).floor().max(0.0) as usize, ((cj + reach).ceil() as usize).min(n - 1));
    for i in i0..=i1 {
        for j in j0..=j1 {
            let (di, dj) = (i as f64 - ci, j as f64 - cj);
            let (u, v) = (c * dj + s * di, -s * dj + c * di);
            if (u / a).powi(2) + (v / b).powi(2) <= 1.0 {
                pixels.push((i, j));
            }
        }
    }
    let clear = pixels.iter().all(|&(i, j)| {
        (-GAP..=GAP).all(|di| {
            (-GAP..=GAP).all(|dj| {
                let (y, x) = (i as isize + di, j as isize + dj);
                y < 0 || x < 0 || y >= m as isize || x >= n as isize || labels[y as usize * n + x as usize] == 0
            })
        })
    });
    (clear && pixels.len() >= 4).then_some(Blob { ci, cj, pixels })
}

/// Labels plus train/test masks; the left half of each blob trains.
fn layout(cfg: &SynthConfig, rng: &mut Rng) -> Option<(Vec<u16>, Vec<bool>, Vec<bool>)> {
    let (m, n) = (cfg.rows, cfg.cols);
    let mut labels = vec![0u16; m * n];
    let mut train = vec![false; m * n];
    let mut test = vec![false; m * n];
    for class in 1..=cfg.classes {
        for _ in 0..cfg.blobs_per_class {
            let blob = (0..PLACEMENT_TRIES).find_map(|_| try_blob(rng, cfg, &labels))?;
            for &(i, j) in &blob.pixels {
                let p = i * n + j;
                labels[p] = class as u16;
                if (j as f64) < blob.cj || ((j as f64) == blob.cj && (i as f64) < blob.ci) {
                    train[p] = true;
                } else {
                    test[p] = true;
                }
            }
        }
    }
    Some((labels, train, test))
}

/// A smooth curve over the bands: a baseline plus three Gaussian bumps.
fn signature(rng: &mut Rng, bands: usize) -> Vec<f64> {
    let base = rng.uniform_in(0.15, 0.35);
    let bumps: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| (rng.uniform_in(0.15, 0.45), rng.uniform_in(0.0, 1.0), rng.uniform_in(0.08, 0.25)))
        .collect();
    (0..bands)
        .map(|b| {
            let x = if bands > 1 { b as f64 / (bands - 1) as f64 } else { 0.5 };
            base + bumps
                .iter()
                .map(|&(amp, mu, w)| amp * (-(x - mu).powi(2) / (2.0 * w * w)).exp())
                .sum::<f64>()
        })
        .collect()
}

fn rms(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

/// Generate a scene with elliptical class blobs and disjoint train/test masks
/// (the left half of every blob trains, the right half tests).
pub fn synth_scene(cfg: &SynthConfig) -> Result<Scene> {
    if cfg.classes < 2 {
        return Err(MftError::Generator(format!("need at least 2 classes, got {}", cfg.classes)));
    }
    if cfg.bands == 0 || cfg.aux_channels == 0 || cfg.blobs_per_class == 0 || cfg.classes > u16::MAX as usize {
        return Err(MftError::Generator("bands, channels and blobs must be positive".into()));
    }
    let root = Rng::new(cfg.seed);
    let (m, n) = (cfg.rows, cfg.cols);
    let (labels, train, test) = (0..LAYOUT_TRIES)
        .find_map(|attempt| layout(cfg, &mut root.substream("layout", &[attempt])))
        .ok_or_else(|| {
            MftError::Generator(format!(
                "could not place {} blobs for each of {} classes in a {m}x{n} scene after {LAYOUT_TRIES} layouts",
                cfg.blobs_per_class, cfg.classes
            ))
        })?;

    // one signature per class pair, plus one for the background
    let pairs = cfg.classes.div_ceil(2);
    let mut spectra_rng = root.substream("signatures", &[]);
    let mut sigs: Vec<Vec<f64>> = Vec::with_capacity(pairs + 1);
    while sigs.len() < pairs + 1 {
        let s = signature(&mut spectra_rng, cfg.bands);
        if sigs.iter().all(|t| rms(t, &s) > 0.08) {
            sigs.push(s);
        }
    }
    let class_sig = |l: u16| if l == 0 { &sigs[pairs] } else { &sigs[(l as usize - 1) / 2] };

    let mut noise = root.substream("hsi-noise", &[]);
    let mut hsi = Vec::with_capacity(m * n * cfg.bands);
    for &l in &labels {
        for &s in class_sig(l) {
            hsi.push((s + noise.normal(0.0, cfg.noise)) as f32);
        }
    }

    let mut aux_noise = root.substream("aux-noise", &[]);
    let mut aux = Vec::with_capacity(m * n * cfg.aux_channels);
    for &l in &labels {
        let level = if !cfg.aux_informative {
            0.5
        } else if l == 0 {
            0.0
        } else {
            0.15 + 0.7 * (l as f64 - 1.0) / (cfg.classes - 1) as f64
        };
        for _ in 0..cfg.aux_channels {
            let v = if cfg.aux_informative {
                level + aux_noise.normal(0.0, cfg.noise)
            } else {
                level + aux_noise.normal(0.0, 0.25)
            };
            aux.push(v as f32);
        }
    }

    Scene::new(
        Tensor::new([m, n, cfg.bands], hsi)?,
        Tensor::new([m, n, cfg.aux_channels], aux)?,
        labels,
        Modality::Lidar,
        Some((train, test)),
    )
}
