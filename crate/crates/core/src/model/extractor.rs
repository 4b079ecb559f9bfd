//! Spectral–spatial feature extractor: a Conv3D block followed by a
//! heterogeneous (grouped 3×3 ⊕ pointwise 1×1) Conv2D block.

use crate::error::{MftError, Result};
use crate::nn::{BatchNorm, Forward};
use crate::params::{Init, ParamId, ParamKind, ParamSet};
use crate::tape::Var;
use crate::tensor::{Real, Tensor};

/// Feature channels produced by the Conv3D layer.
pub const CONV3D_CHANNELS: usize = 8;
/// Conv3D kernel over (height, width, spectrum).
pub const CONV3D_KERNEL: [usize; 3] = [3, 3, 9];
pub const CONV3D_PADDING: [usize; 3] = [1, 1, 0];
/// Groups of the 3×3 HetConv2D branch.
pub const HET_GROUPS: usize = 4;

#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    pub bands: usize,
    pub out_channels: usize,
    pub conv3d_weight: ParamId,
    pub conv3d_bias: ParamId,
    pub bn3d: BatchNorm,
    pub het_group_weight: ParamId,
    pub het_group_bias: ParamId,
    pub het_point_weight: ParamId,
    pub het_point_bias: ParamId,
    pub bn2d: BatchNorm,
}

impl FeatureExtractor {
    /// Spectral extent after the 9-tap Conv3D.
    pub fn reduced_bands(bands: usize) -> usize {
        bands + 1 - CONV3D_KERNEL[2]
    }

    pub fn new<T: Real>(ps: &mut ParamSet<T>, init: &mut Init<'_>, bands: usize, out_channels: usize) -> Result<Self> {
        if bands < CONV3D_KERNEL[2] {
            return Err(MftError::Config(format!(
                "HSI needs at least {} bands for the spectral kernel, got {bands}",
                CONV3D_KERNEL[2]
            )));
        }
        if out_channels % HET_GROUPS != 0 {
            return Err(MftError::Config(format!(
                "feature channels {out_channels} not divisible by {HET_GROUPS} groups"
            )));
        }
        let [kh, kw, kd] = CONV3D_KERNEL;
        let het_in = CONV3D_CHANNELS * Self::reduced_bands(bands);
        let per_group = het_in / HET_GROUPS;
        Ok(FeatureExtractor {
            bands,
            out_channels,
            conv3d_weight: ps.add(
                "extractor.conv3d.weight",
                ParamKind::Weight,
                init.fan_in([CONV3D_CHANNELS, 1, kh, kw, kd], kh * kw * kd),
            ),
            conv3d_bias: ps.add("extractor.conv3d.bias", ParamKind::Weight, Tensor::zeros([CONV3D_CHANNELS])),
            bn3d: BatchNorm::new(ps, "extractor.bn3d", CONV3D_CHANNELS),
            het_group_weight: ps.add(
                "extractor.het_group.weight",
                ParamKind::Weight,
                init.fan_in([out_channels, per_group, 3, 3], per_group * 9),
            ),
            het_group_bias: ps.add("extractor.het_group.bias", ParamKind::Weight, Tensor::zeros([out_channels])),
            het_point_weight: ps.add(
                "extractor.het_point.weight",
                ParamKind::Weight,
                init.fan_in([out_channels, het_in, 1, 1], het_in),
            ),
            het_point_bias: ps.add("extractor.het_point.bias", ParamKind::Weight, Tensor::zeros([out_channels])),
            bn2d: BatchNorm::new(ps, "extractor.bn2d", out_channels),
        })
    }

    /// `[N, k, k, B] → [N, 8, k, k, B−8]`: unsqueeze, Conv3D, BN, ReLU.
    pub fn conv3d_block<T: Real>(&self, fwd: &mut Forward<'_, '_, T>, x_h: Var) -> Result<Var> {
        let s = fwd.tape.shape(x_h).to_vec();
        if s.len() != 4 || s[3] != self.bands || s[1] != s[2] {
            return Err(MftError::Config(format!(
                "expected HSI patches [N, k, k, {}], got {s:?}",
                self.bands
            )));
        }
        let x = fwd.tape.reshape(x_h, &[s[0], 1, s[1], s[2], s[3]])?;
        let w = fwd.param(self.conv3d_weight);
        let b = fwd.param(self.conv3d_bias);
        let y = fwd.tape.conv3d(x, w, Some(b), CONV3D_PADDING)?;
        let y = self.bn3d.forward(fwd, y)?;
        Ok(fwd.tape.relu(y))
    }

    /// `[N, 8, k, k, D] → [N, C, k, k]`. Channels are flattened spectral-major
    /// within each Conv3D feature map (`c·D + d`).
    pub fn hetconv2d_block<T: Real>(&self, fwd: &mut Forward<'_, '_, T>, x_in: Var) -> Result<Var> {
        let merged = self.hetconv2d_merged(fwd, x_in)?;
        let y = self.bn2d.forward(fwd, merged)?;
        Ok(fwd.tape.relu(y))
    }

    /// Grouped ⊕ pointwise branches before normalization.
    pub fn hetconv2d_merged<T: Real>(&self, fwd: &mut Forward<'_, '_, T>, x_in: Var) -> Result<Var> {
        let s = fwd.tape.shape(x_in).to_vec();
        if s.len() != 5 || s[1] != CONV3D_CHANNELS {
            return Err(MftError::Shape(format!("HetConv2D expects [N, 8, k, k, D], got {s:?}")));
        }
        let (n, c, h, w, d) = (s[0], s[1], s[2], s[3], s[4]);
        let x = fwd.tape.permute(x_in, &[0, 1, 4, 2, 3])?;
        let x = fwd.tape.reshape(x, &[n, c * d, h, w])?;
        let (wg, bg) = (fwd.param(self.het_group_weight), fwd.param(self.het_group_bias));
        let (wp, bp) = (fwd.param(self.het_point_weight), fwd.param(self.het_point_bias));
        let grouped = fwd.tape.conv2d(x, wg, Some(bg), HET_GROUPS, 1)?;
        let pointwise = fwd.tape.conv2d(x, wp, Some(bp), 1, 0)?;
        fwd.tape.add(grouped, pointwise)
    }

    pub fn forward<T: Real>(&self, fwd: &mut Forward<'_, '_, T>, x_h: Var) -> Result<Var> {
        fwd.tape.push_scope("extractor");
        let out = self
            .conv3d_block(fwd, x_h)
            .and_then(|x| self.hetconv2d_block(fwd, x));
        fwd.tape.pop_scope();
        out
    }
}
