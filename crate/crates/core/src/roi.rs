//! Level assignment and bilinear crop-and-resize of RoIs.

use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::error::{shape_err, Result};
use crate::fpn::LEVEL_STRIDES;
use crate::tensor::kernels::{roi_apply, roi_plan};
use crate::tensor::{Element, RoiSample, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoiConfig {
    /// Box size mapped to p4.
    pub canonical_scale: f64,
    pub output_size: usize,
    pub sampling: usize,
}

impl Default for RoiConfig {
    fn default() -> Self {
        Self {
            canonical_scale: 56.0,
            output_size: 7,
            sampling: 2,
        }
    }
}

/// `clamp(⌊4 + log2(√(wh) / canonical)⌋, 2, 5)`; empty boxes go to level 2.
pub fn assign_level(b: &BBox, canonical_scale: f64) -> usize {
    let area = b.area();
    if area <= 0.0 {
        return 2;
    }
    let k = (4.0 + (area.sqrt() / canonical_scale).log2() + 1e-9).floor();
    k.clamp(2.0, 5.0) as usize
}

/// Crop `box_` (image coordinates) out of sample `n` of a `[N,C,H,W]` map
/// with the given stride into `[C, out, out]`.
pub fn roi_align<T: Element>(
    feature: &Tensor<T>,
    n: usize,
    box_: &BBox,
    stride: f64,
    out: usize,
    sampling: usize,
) -> Result<Tensor<T>> {
    let (nn, c, h, w) = feature.nchw();
    if n >= nn || feature.shape().len() != 4 {
        return shape_err("roi_align", format!("sample {n} of {:?}", feature.shape()));
    }
    let plan = roi_plan(box_.x1 / stride, box_.y1 / stride, box_.x2 / stride, box_.y2 / stride, h, w, out, sampling);
    let mut dst = vec![T::zero(); c * out * out];
    roi_apply(&plan, &feature.data()[n * c * h * w..(n + 1) * c * h * w], h * w, &mut dst);
    Tensor::new(&[c, out, out], dst)
}

/// Sampling plans for a batch of RoIs; `level` in each result indexes
/// `[p2, p3, p4, p5]`. `level_extents[k]` is `(H, W)` of pyramid slot `k`.
pub fn roi_samples(rois: &[(usize, BBox)], level_extents: &[(usize, usize); 4], cfg: &RoiConfig) -> Vec<RoiSample> {
    rois.iter()
        .map(|&(batch, b)| {
            let level = assign_level(&b, cfg.canonical_scale) - 2;
            let s = LEVEL_STRIDES[level] as f64;
            let (h, w) = level_extents[level];
            RoiSample {
                batch,
                level,
                plan: roi_plan(b.x1 / s, b.y1 / s, b.x2 / s, b.y2 / s, h, w, cfg.output_size, cfg.sampling),
            }
        })
        .collect()
}
