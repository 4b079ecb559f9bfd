//! Co-registered scenes, normalization, patch extraction and train/test splits.

mod io;
mod synth;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{MftError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub use io::{load_scene, save_scene, SceneHeader, SCENE_MAGIC};
pub use synth::{synth_scene, SynthConfig};

/// `(row, col)` of a pixel.
pub type Coord = (usize, usize);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    #[default]
    Lidar,
    Sar,
    Dsm,
    Msi,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Lidar => "lidar",
            Modality::Sar => "sar",
            Modality::Dsm => "dsm",
            Modality::Msi => "msi",
        })
    }
}

impl FromStr for Modality {
    type Err = MftError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lidar" => Ok(Modality::Lidar),
            "sar" => Ok(Modality::Sar),
            "dsm" => Ok(Modality::Dsm),
            "msi" => Ok(Modality::Msi),
            other => Err(MftError::Format(format!("unknown modality {other:?}"))),
        }
    }
}

/// An HSI cube, an auxiliary raster and a label raster over the same grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// `[M, N, B]`, band fastest.
    pub hsi: Tensor<f32>,
    /// `[M, N, C]`.
    pub aux: Tensor<f32>,
    /// `M·N` labels, 0 for background, classes `1..=classes`.
    pub labels: Vec<u16>,
    pub classes: usize,
    pub modality: Modality,
    pub train_mask: Option<Vec<bool>>,
    pub test_mask: Option<Vec<bool>>,
}

impl Scene {
    /// Assemble and validate a scene.
    pub fn new(
        hsi: Tensor<f32>,
        aux: Tensor<f32>,
        labels: Vec<u16>,
        modality: Modality,
        masks: Option<(Vec<bool>, Vec<bool>)>,
    ) -> Result<Scene> {
        if hsi.rank() != 3 || aux.rank() != 3 || hsi.shape()[..2] != aux.shape()[..2] {
            return Err(MftError::dim("scene", hsi.shape(), aux.shape()));
        }
        let pixels = hsi.shape()[0] * hsi.shape()[1];
        if labels.len() != pixels {
            return Err(MftError::Shape(format!(
                "label raster has {} pixels, HSI has {pixels}",
                labels.len()
            )));
        }
        let classes = contiguous_classes(&labels)?;
        let (train_mask, test_mask) = match masks {
            Some((tr, te)) => {
                if tr.len() != pixels || te.len() != pixels {
                    return Err(MftError::Shape("mask size differs from the raster".into()));
                }
                (Some(tr), Some(te))
            }
            None => (None, None),
        };
        let scene = Scene {
            hsi,
            aux,
            labels,
            classes,
            modality,
            train_mask,
            test_mask,
        };
        scene.check_masks()?;
        Ok(scene)
    }

    pub fn rows(&self) -> usize {
        self.hsi.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.hsi.shape()[1]
    }

    pub fn bands(&self) -> usize {
        self.hsi.shape()[2]
    }

    pub fn aux_channels(&self) -> usize {
        self.aux.shape()[2]
    }

    pub fn label(&self, (i, j): Coord) -> u16 {
        self.labels[i * self.cols() + j]
    }

    /// Every labeled pixel in row-major order.
    pub fn labeled(&self) -> Vec<Coord> {
        let n = self.cols();
        (0..self.labels.len())
            .filter(|&p| self.labels[p] != 0)
            .map(|p| (p / n, p % n))
            .collect()
    }

    /// Labeled pixels per class, index 0 unused.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes + 1];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    fn check_masks(&self) -> Result<()> {
        if let (Some(tr), Some(te)) = (&self.train_mask, &self.test_mask) {
            if let Some(p) = (0..tr.len()).find(|&p| tr[p] && te[p]) {
                return Err(MftError::Integrity(format!(
                    "pixel ({}, {}) is in both the train and the test mask",
                    p / self.cols(),
                    p % self.cols()
                )));
            }
        }
        Ok(())
    }
}

/// Number of classes, requiring the nonzero labels to be exactly `1..=K`.
fn contiguous_classes(labels: &[u16]) -> Result<usize> {
    let max = labels.iter().copied().max().unwrap_or(0) as usize;
    let mut seen = vec![false; max + 1];
    for &l in labels {
        seen[l as usize] = true;
    }
    if let Some(missing) = (1..=max).find(|&c| !seen[c]) {
        return Err(MftError::Label(format!(
            "class ids are not contiguous: {missing} is absent but {max} is present"
        )));
    }
    if max == 0 {
        return Err(MftError::Label("scene has no labeled pixels".into()));
    }
    Ok(max)
}

/// Per-band min–max scaling of one `[M, N, B]` raster.
fn normalize_bands(t: &Tensor<f32>, what: &str) -> Result<Tensor<f32>> {
    let b = t.shape()[2];
    let data = t.data();
    if let Some(p) = data.iter().position(|v| !v.is_finite()) {
        return Err(MftError::Ingestion(format!(
            "non-finite {what} value at pixel {}, band {}",
            p / b,
            p % b
        )));
    }
    let mut lo = vec![f32::INFINITY; b];
    let mut hi = vec![f32::NEG_INFINITY; b];
    for (i, &v) in data.iter().enumerate() {
        lo[i % b] = lo[i % b].min(v);
        hi[i % b] = hi[i % b].max(v);
    }
    let out = data
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let (l, h) = (lo[i % b], hi[i % b]);
            if h > l {
                ((f64::from(v) - f64::from(l)) / (f64::from(h) - f64::from(l))) as f32
            } else {
                0.0
            }
        })
        .collect();
    Tensor::new(t.shape().to_vec(), out)
}

/// Scale every HSI band and auxiliary channel to `[0, 1]`; constant bands become 0.
pub fn normalize_scene(scene: &Scene) -> Result<Scene> {
    Ok(Scene {
        hsi: normalize_bands(&scene.hsi, "HSI")?,
        aux: normalize_bands(&scene.aux, "auxiliary")?,
        ..scene.clone()
    })
}

/// Patches and 0-based labels ready for the model.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchBatch {
    /// `[n, k, k, B]`.
    pub hsi: Tensor<f32>,
    /// `[n, k, k, C]`.
    pub aux: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl PatchBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn window(src: &Tensor<f32>, (ci, cj): Coord, k: usize, out: &mut Vec<f32>) {
    let (m, n, b) = (src.shape()[0], src.shape()[1], src.shape()[2]);
    let r = (k / 2) as isize;
    for di in -r..=r {
        let i = ci as isize + di;
        for dj in -r..=r {
            let j = cj as isize + dj;
            if i < 0 || j < 0 || i >= m as isize || j >= n as isize {
                out.extend(std::iter::repeat(0.0).take(b));
            } else {
                let start = (i as usize * n + j as usize) * b;
                out.extend_from_slice(&src.data()[start..start + b]);
            }
        }
    }
}

/// `k×k` windows centered on each coordinate, zero outside the raster.
/// Every coordinate must be a labeled pixel.
pub fn extract_patches(scene: &Scene, coords: &[Coord], k: usize) -> Result<PatchBatch> {
    let (hsi, aux) = extract_windows(scene, coords, k)?;
    let labels = coords
        .iter()
        .map(|&(i, j)| match scene.label((i, j)) {
            0 => Err(MftError::Label(format!("pixel ({i}, {j}) is background"))),
            l => Ok(l as usize - 1),
        })
        .collect::<Result<_>>()?;
    Ok(PatchBatch { hsi, aux, labels })
}

/// Windows for arbitrary pixels, labeled or not: `([n, k, k, B], [n, k, k, C])`.
pub fn extract_windows(scene: &Scene, coords: &[Coord], k: usize) -> Result<(Tensor<f32>, Tensor<f32>)> {
    if k == 0 || k % 2 == 0 {
        return Err(MftError::Config(format!("patch size must be odd, got {k}")));
    }
    if coords.is_empty() {
        return Err(MftError::Split("no coordinates to extract".into()));
    }
    let (m, n) = (scene.rows(), scene.cols());
    let mut hsi = Vec::with_capacity(coords.len() * k * k * scene.bands());
    let mut aux = Vec::with_capacity(coords.len() * k * k * scene.aux_channels());
    for &(i, j) in coords {
        if i >= m || j >= n {
            return Err(MftError::Bounds { row: i, col: j, rows: m, cols: n });
        }
        window(&scene.hsi, (i, j), k, &mut hsi);
        window(&scene.aux, (i, j), k, &mut aux);
    }
    Ok((
        Tensor::new([coords.len(), k, k, scene.bands()], hsi)?,
        Tensor::new([coords.len(), k, k, scene.aux_channels()], aux)?,
    ))
}

/// Train and test pixels, each in row-major order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<Coord>,
    pub test: Vec<Coord>,
}

/// Per class, `⌈fraction·count⌉` pixels for training and the rest for testing.
pub fn split_random(scene: &Scene, fraction: f64, rng: &Rng) -> Result<Split> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(MftError::Config(format!("train fraction {fraction} outside (0, 1)")));
    }
    let mut by_class: Vec<Vec<Coord>> = vec![Vec::new(); scene.classes + 1];
    for c in scene.labeled() {
        by_class[scene.label(c) as usize].push(c);
    }
    let mut split = Split::default();
    for (class, mut coords) in by_class.into_iter().enumerate().skip(1) {
        if coords.len() < 2 {
            return Err(MftError::Split(format!(
                "class {class} has {} labeled pixel(s); at least 2 are needed",
                coords.len()
            )));
        }
        let take = train_count(fraction, coords.len());
        rng.substream("split", &[class as u64]).shuffle(&mut coords);
        split.train.extend_from_slice(&coords[..take]);
        split.test.extend_from_slice(&coords[take..]);
    }
    split.train.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

/// `⌈fraction·count⌉`, ignoring representation error in the product.
pub fn train_count(fraction: f64, count: usize) -> usize {
    let x = fraction * count as f64;
    let r = x.round();
    let c = if (x - r).abs() < 1e-9 { r } else { x.ceil() };
    (c as usize).min(count)
}

/// The scene's own disjoint train/test masks, restricted to labeled pixels.
pub fn split_from_masks(scene: &Scene) -> Result<Split> {
    let (Some(tr), Some(te)) = (&scene.train_mask, &scene.test_mask) else {
        return Err(MftError::Split("scene has no train/test masks".into()));
    };
    scene.check_masks()?;
    let n = scene.cols();
    let pick = |mask: &[bool]| -> Vec<Coord> {
        (0..mask.len())
            .filter(|&p| mask[p] && scene.labels[p] != 0)
            .map(|p| (p / n, p % n))
            .collect()
    };
    let split = Split { train: pick(tr), test: pick(te) };
    if split.test.is_empty() {
        log::warn!("test mask selects no labeled pixels");
    }
    if split.train.is_empty() {
        log::warn!("train mask selects no labeled pixels");
    }
    Ok(split)
}
