//! Confusion matrices, OA/AA/κ, and classification-map rendering.

use serde::{Deserialize, Serialize};

use crate::data::Coord;
use crate::error::{MftError, Result};

/// `counts[true][predicted]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let c = counts.len();
        if c == 0 || counts.iter().any(|r| r.len() != c) {
            return Err(MftError::Shape("confusion matrix must be square and nonempty".into()));
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn accumulate(&mut self, truth: usize, predicted: usize) -> Result<()> {
        let c = self.classes();
        if truth >= c || predicted >= c {
            return Err(MftError::Label(format!(
                "pair ({truth}, {predicted}) outside {c} classes"
            )));
        }
        self.counts[truth][predicted] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Elementwise sum with another shard.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes() != self.classes() {
            return Err(MftError::dim("merge", &[self.classes()], &[other.classes()]));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    /// Recall per class; 0 for classes with no samples.
    pub per_class: Vec<f64>,
    pub confusion: Vec<Vec<u64>>,
    pub samples: u64,
    /// Classes that had no samples and were left out of AA.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub empty_classes: Vec<usize>,
}

pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<EvalReport> {
    let total = cm.total();
    if total == 0 {
        return Err(MftError::EmptyEvaluation);
    }
    let c = cm.classes();
    let n = total as f64;
    let counts = cm.counts();
    let rows: Vec<u64> = counts.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<u64> = (0..c).map(|j| counts.iter().map(|r| r[j]).sum()).collect();
    let trace: u64 = (0..c).map(|i| counts[i][i]).sum();
    let oa = trace as f64 / n;

    let mut per_class = vec![0.0; c];
    let mut empty_classes = Vec::new();
    let mut recall_sum = 0.0;
    for i in 0..c {
        if rows[i] == 0 {
            empty_classes.push(i);
        } else {
            per_class[i] = counts[i][i] as f64 / rows[i] as f64;
            recall_sum += per_class[i];
        }
    }
    let aa = recall_sum / (c - empty_classes.len()) as f64;

    let pe = (0..c).map(|i| rows[i] as f64 * cols[i] as f64).sum::<f64>() / (n * n);
    let kappa = if pe >= 1.0 {
        log::warn!("chance agreement is 1; kappa reported as 0");
        0.0
    } else {
        (oa - pe) / (1.0 - pe)
    };
    Ok(EvalReport {
        oa,
        aa,
        kappa,
        per_class,
        confusion: counts.to_vec(),
        samples: total,
        empty_classes,
    })
}

/// Class colors; entry 0 is the background, class `c` (1-based) uses entry `c`.
pub const PALETTE: [[u8; 3]; 16] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [128, 0, 0],
];

/// Binary PPM of a `rows × cols` raster; `predictions` holds 0-based classes.
/// The header lists width (columns) before height (rows).
pub fn render_map(rows: usize, cols: usize, predictions: &[(Coord, usize)]) -> Result<Vec<u8>> {
    let mut pixels = vec![0u8; rows * cols * 3];
    for &((i, j), class) in predictions {
        if i >= rows || j >= cols {
            return Err(MftError::Bounds { row: i, col: j, rows, cols });
        }
        let color = PALETTE
            .get(class + 1)
            .ok_or(MftError::Palette { class, size: PALETTE.len() - 1 })?;
        pixels[(i * cols + j) * 3..][..3].copy_from_slice(color);
    }
    let mut out = format!("P6\n{cols} {rows}\n255\n").into_bytes();
    out.extend_from_slice(&pixels);
    Ok(out)
}
