use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{GcaConfig, HeadOutput};
use crate::boxes::{encode, BBox};
use crate::error::{shape_err, Result};
use crate::tensor::{Element, Graph, NodeId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoiSamplingConfig {
    pub batch_per_image: usize,
    pub fg_fraction: f64,
    pub fg_iou: f64,
    /// Background IoU range `[bg_iou_lo, bg_iou_hi)`.
    pub bg_iou_lo: f64,
    pub bg_iou_hi: f64,
}

impl Default for RoiSamplingConfig {
    fn default() -> Self {
        Self {
            batch_per_image: 32,
            fg_fraction: 0.25,
            fg_iou: 0.5,
            bg_iou_lo: 0.1,
            bg_iou_hi: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampledRoi {
    pub bbox: BBox,
    /// 0 is background, `1..=K` foreground.
    pub label: usize,
    /// Regression target towards the matched ground truth (zero for
    /// background).
    pub target: [f64; 4],
}

/// Proposals plus the ground-truth boxes themselves, split into
/// foreground and background by best IoU and subsampled.
pub fn sample_rois<R: Rng>(proposals: &[BBox], gt: &[BBox], labels: &[usize], cfg: &RoiSamplingConfig, rng: &mut R) -> Vec<SampledRoi> {
    let candidates: Vec<BBox> = proposals.iter().chain(gt).copied().collect();
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for b in &candidates {
        let best = gt
            .iter()
            .enumerate()
            .map(|(j, g)| (j, b.iou(g)))
            .fold(None, |acc: Option<(usize, f64)>, (j, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((j, v)),
            });
        let (j, iou) = best.unwrap_or((0, 0.0));
        if !gt.is_empty() && iou >= cfg.fg_iou {
            fg.push(SampledRoi {
                bbox: *b,
                label: labels[j],
                target: encode(b, &gt[j]),
            });
        } else if iou >= cfg.bg_iou_lo && iou < cfg.bg_iou_hi {
            bg.push(SampledRoi {
                bbox: *b,
                label: 0,
                target: [0.0; 4],
            });
        }
    }
    let max_fg = (cfg.batch_per_image as f64 * cfg.fg_fraction).round() as usize;
    fg.shuffle(rng);
    fg.truncate(max_fg);
    bg.shuffle(rng);
    bg.truncate(cfg.batch_per_image - fg.len());
    fg.extend(bg);
    fg
}

/// Mean cross-entropy over all RoIs plus smooth-L1 on the labelled class's
/// deltas of foreground RoIs, divided by the RoI count. `None` when there
/// is nothing to learn from.
pub fn head_loss<T: Element>(g: &mut Graph<'_, T>, out: &HeadOutput, rois: &[SampledRoi], cfg: &GcaConfig) -> Result<Option<NodeId>> {
    let r = rois.len();
    if r == 0 {
        return Ok(None);
    }
    let (sr, sc) = (g.value(out.scores).dim(0), g.value(out.scores).dim(1));
    let dw = cfg.delta_width();
    if sr != r || sc != cfg.num_classes + 1 || g.value(out.deltas).shape() != [r, dw] {
        return shape_err(
            "head_loss",
            format!("{r} RoIs vs scores {:?}, deltas {:?}", g.value(out.scores).shape(), g.value(out.deltas).shape()),
        );
    }
    let w = T::of(1.0 / r as f64);
    let labels: Vec<usize> = rois.iter().map(|s| s.label).collect();
    let ce = g.softmax_cross_entropy(out.scores, labels, vec![w; r])?;
    let mut target = vec![T::zero(); r * dw];
    let mut weight = vec![T::zero(); r * dw];
    for (i, s) in rois.iter().enumerate().filter(|(_, s)| s.label > 0) {
        let col = if cfg.class_agnostic { 0 } else { 4 * (s.label - 1) };
        for k in 0..4 {
            target[i * dw + col + k] = T::of(s.target[k]);
            weight[i * dw + col + k] = w;
        }
    }
    let reg = g.smooth_l1(out.deltas, target, weight)?;
    g.add(ce, reg).map(Some)
}
