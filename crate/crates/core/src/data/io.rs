//! Scene container: `header.json` plus raw little-endian payloads.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Modality, Scene};
use crate::error::{MftError, Result};
use crate::tensor::Tensor;

pub const SCENE_MAGIC: &str = "MFTSCN1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneHeader {
    pub magic: String,
    #[serde(rename = "M")]
    pub rows: usize,
    #[serde(rename = "N")]
    pub cols: usize,
    #[serde(rename = "B")]
    pub bands: usize,
    #[serde(rename = "C")]
    pub aux_channels: usize,
    pub classes: usize,
    pub modality: Modality,
    pub has_masks: bool,
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| MftError::io(path, e))
}

fn read_exact(dir: &Path, file: &str, expected: usize) -> Result<Vec<u8>> {
    let path = dir.join(file);
    let bytes = fs::read(&path).map_err(|e| MftError::io(&path, e))?;
    if bytes.len() != expected {
        return Err(MftError::Length {
            file: file.to_string(),
            expected,
            actual: bytes.len(),
        });
    }
    Ok(bytes)
}

fn f32_bytes(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn f32_from(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

pub fn save_scene(scene: &Scene, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| MftError::io(dir, e))?;
    let header = SceneHeader {
        magic: SCENE_MAGIC.to_string(),
        rows: scene.rows(),
        cols: scene.cols(),
        bands: scene.bands(),
        aux_channels: scene.aux_channels(),
        classes: scene.classes,
        modality: scene.modality,
        has_masks: scene.train_mask.is_some(),
    };
    write(&dir.join("header.json"), serde_json::to_string_pretty(&header)?.as_bytes())?;
    write(&dir.join("hsi.f32"), &f32_bytes(scene.hsi.data()))?;
    write(&dir.join("aux.f32"), &f32_bytes(scene.aux.data()))?;
    let labels: Vec<u8> = scene.labels.iter().flat_map(|l| l.to_le_bytes()).collect();
    write(&dir.join("labels.u16"), &labels)?;
    if let (Some(tr), Some(te)) = (&scene.train_mask, &scene.test_mask) {
        write(&dir.join("train_mask.u8"), &tr.iter().map(|&b| b as u8).collect::<Vec<_>>())?;
        write(&dir.join("test_mask.u8"), &te.iter().map(|&b| b as u8).collect::<Vec<_>>())?;
    }
    Ok(())
}

pub fn load_scene(dir: impl AsRef<Path>) -> Result<Scene> {
    let dir = dir.as_ref();
    let header_path = dir.join("header.json");
    let text = fs::read_to_string(&header_path).map_err(|e| MftError::io(&header_path, e))?;
    let h: SceneHeader = serde_json::from_str(&text)?;
    if h.magic != SCENE_MAGIC {
        return Err(MftError::Format(format!(
            "bad magic {:?}, expected {SCENE_MAGIC:?}",
            h.magic
        )));
    }
    if h.rows == 0 || h.cols == 0 || h.bands == 0 || h.aux_channels == 0 {
        return Err(MftError::Format(format!("header has a zero extent: {h:?}")));
    }
    let px = h.rows * h.cols;
    let hsi = f32_from(&read_exact(dir, "hsi.f32", px * h.bands * 4)?);
    let aux = f32_from(&read_exact(dir, "aux.f32", px * h.aux_channels * 4)?);
    let labels: Vec<u16> = read_exact(dir, "labels.u16", px * 2)?
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    let masks = if h.has_masks {
        let mask = |file| -> Result<Vec<bool>> {
            read_exact(dir, file, px)?
                .into_iter()
                .map(|b| match b {
                    0 => Ok(false),
                    1 => Ok(true),
                    other => Err(MftError::Format(format!("{file}: mask byte {other} is not 0 or 1"))),
                })
                .collect()
        };
        Some((mask("train_mask.u8")?, mask("test_mask.u8")?))
    } else {
        None
    };
    let scene = Scene::new(
        Tensor::new([h.rows, h.cols, h.bands], hsi)?,
        Tensor::new([h.rows, h.cols, h.aux_channels], aux)?,
        labels,
        h.modality,
        masks,
    )?;
    if scene.classes != h.classes {
        return Err(MftError::Label(format!(
            "header declares {} classes, labels use 1..={}",
            h.classes, scene.classes
        )));
    }
    Ok(scene)
}
