//! Second-stage RoI head with dense global context and context-aware
//! attention, plus the baseline and lightweight configurations used for
//! comparison.

mod attention;
mod lattice;
mod loss;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use attention::{
    fuse_branches, hidden_width, AttentionBranch, ConcatBranch, ContextModule, Descriptor, ENCODE_WIDTH, TRUNK_WIDTH,
};
pub use lattice::{pool_pyramid, DenseLattice, LatticeOutput, LatticePlan};
pub use loss::{head_loss, sample_rois, RoiSamplingConfig, SampledRoi};

use crate::boxes::BBox;
use crate::error::{shape_err, Error, Result};
use crate::fpn::{PyramidFeatures, PYRAMID_CHANNELS};
use crate::nn::{Builder, Fc};
use crate::roi::{roi_samples, RoiConfig};
use crate::tensor::{Element, Graph, NodeId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    Baseline,
    DenseNoAttention,
    Full,
    Lightweight,
}

impl HeadMode {
    pub const ALL: [HeadMode; 4] = [HeadMode::Baseline, HeadMode::DenseNoAttention, HeadMode::Full, HeadMode::Lightweight];

    pub fn name(self) -> &'static str {
        match self {
            HeadMode::Baseline => "baseline",
            HeadMode::DenseNoAttention => "dense_no_attention",
            HeadMode::Full => "full",
            HeadMode::Lightweight => "lightweight",
        }
    }
}

/// Where the context gates are applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionVariant {
    Conv,
    Fc1,
    Fc2,
    ConvFc1,
    ConvFc2,
    ConvFc1Fc2,
}

impl AttentionVariant {
    pub const ALL: [AttentionVariant; 6] = [
        AttentionVariant::Conv,
        AttentionVariant::Fc1,
        AttentionVariant::Fc2,
        AttentionVariant::ConvFc1,
        AttentionVariant::ConvFc2,
        AttentionVariant::ConvFc1Fc2,
    ];

    pub fn has_conv(self) -> bool {
        matches!(self, Self::Conv | Self::ConvFc1 | Self::ConvFc2 | Self::ConvFc1Fc2)
    }

    pub fn has_fc1(self) -> bool {
        matches!(self, Self::Fc1 | Self::ConvFc1 | Self::ConvFc1Fc2)
    }

    pub fn has_fc2(self) -> bool {
        matches!(self, Self::Fc2 | Self::ConvFc2 | Self::ConvFc1Fc2)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Conv => "conv",
            Self::Fc1 => "fc1",
            Self::Fc2 => "fc2",
            Self::ConvFc1 => "conv_fc1",
            Self::ConvFc2 => "conv_fc2",
            Self::ConvFc1Fc2 => "conv_fc1_fc2",
        }
    }
}

macro_rules! named_enum_parse {
    ($ty:ty) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                Self::ALL
                    .into_iter()
                    .find(|v| v.name() == s)
                    .ok_or_else(|| Error::Config(format!("unknown {} '{s}'", stringify!($ty))))
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }
    };
}

named_enum_parse!(HeadMode);
named_enum_parse!(AttentionVariant);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GcaConfig {
    /// `(M, N)` extent of `q0`.
    pub pool_size: (usize, usize),
    pub reduction: usize,
    pub variant: AttentionVariant,
    pub mode: HeadMode,
    pub num_classes: usize,
    /// One set of per-branch head weights reused by all four branches.
    pub share_branch_weights: bool,
    /// Four deltas per RoI instead of four per class.
    pub class_agnostic: bool,
}

impl Default for GcaConfig {
    fn default() -> Self {
        Self {
            pool_size: (16, 16),
            reduction: 8,
            variant: AttentionVariant::Conv,
            mode: HeadMode::Full,
            num_classes: 3,
            share_branch_weights: false,
            class_agnostic: false,
        }
    }
}

impl GcaConfig {
    pub fn validate(&self) -> Result<()> {
        LatticePlan::new(self.pool_size)?;
        hidden_width(self.reduction)?;
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be at least 1".into()));
        }
        Ok(())
    }

    pub fn delta_width(&self) -> usize {
        if self.class_agnostic {
            4
        } else {
            4 * self.num_classes
        }
    }
}

#[derive(Clone, Debug)]
enum Body {
    /// Two shared FCs; the lightweight form gates the RoI feature first.
    Plain { light: Option<ContextModule>, fc6: Fc, fc7: Fc },
    Dense { lattice: DenseLattice, branches: Vec<ConcatBranch> },
    Full { lattice: DenseLattice, branches: Vec<AttentionBranch> },
}

/// Class scores `[R, K+1]` and box deltas `[R, 4K]` (or `[R, 4]`).
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    pub scores: NodeId,
    pub deltas: NodeId,
}

#[derive(Clone, Debug)]
pub struct GcaHead {
    cfg: GcaConfig,
    roi_len: usize,
    body: Body,
    cls_score: Fc,
    bbox_pred: Fc,
}

fn branch_prefix(shared: bool, j: usize) -> String {
    if shared {
        "head.branch".into()
    } else {
        format!("head.branch{j}")
    }
}

impl GcaHead {
    /// `roi_out` is the RoIAlign output extent.
    pub fn new<T: Element>(b: &mut Builder<'_, T>, cfg: &GcaConfig, roi_out: usize) -> Result<Self> {
        cfg.validate()?;
        let roi_len = PYRAMID_CHANNELS * roi_out * roi_out;
        let n_branches = if cfg.share_branch_weights { 1 } else { 4 };
        let body = match cfg.mode {
            HeadMode::Baseline | HeadMode::Lightweight => Body::Plain {
                light: if cfg.mode == HeadMode::Lightweight {
                    Some(ContextModule::new(b, "head.light.se", cfg.reduction, AttentionVariant::Conv)?)
                } else {
                    None
                },
                fc6: b.fc("head.fc6", roi_len, TRUNK_WIDTH)?,
                fc7: b.fc("head.fc7", TRUNK_WIDTH, TRUNK_WIDTH)?,
            },
            HeadMode::DenseNoAttention => Body::Dense {
                lattice: DenseLattice::new(b, LatticePlan::new(cfg.pool_size)?)?,
                branches: (0..n_branches)
                    .map(|j| ConcatBranch::new(b, &branch_prefix(cfg.share_branch_weights, j), roi_len))
                    .collect::<Result<_>>()?,
            },
            HeadMode::Full => Body::Full {
                lattice: DenseLattice::new(b, LatticePlan::new(cfg.pool_size)?)?,
                branches: (0..n_branches)
                    .map(|j| AttentionBranch::new(b, &branch_prefix(cfg.share_branch_weights, j), roi_len, cfg.reduction, cfg.variant))
                    .collect::<Result<_>>()?,
            },
        };
        Ok(Self {
            cfg: cfg.clone(),
            roi_len,
            body,
            cls_score: b.fc("head.cls_score", TRUNK_WIDTH, cfg.num_classes + 1)?,
            bbox_pred: b.fc("head.bbox_pred", TRUNK_WIDTH, cfg.delta_width())?,
        })
    }

    pub fn config(&self) -> &GcaConfig {
        &self.cfg
    }

    pub fn lattice(&self) -> Option<&DenseLattice> {
        match &self.body {
            Body::Dense { lattice, .. } | Body::Full { lattice, .. } => Some(lattice),
            Body::Plain { .. } => None,
        }
    }

    pub fn attention_branches(&self) -> &[AttentionBranch] {
        match &self.body {
            Body::Full { branches, .. } => branches,
            _ => &[],
        }
    }

    pub fn light_context(&self) -> Option<&ContextModule> {
        match &self.body {
            Body::Plain { light, .. } => light.as_ref(),
            _ => None,
        }
    }

    /// Closed-form count of every `head.*` parameter.
    pub fn param_count(cfg: &GcaConfig, roi_out: usize) -> Result<usize> {
        cfg.validate()?;
        let roi_len = PYRAMID_CHANNELS * roi_out * roi_out;
        let n_branches = if cfg.share_branch_weights { 1 } else { 4 };
        let predict = Fc::param_count(TRUNK_WIDTH, cfg.num_classes + 1) + Fc::param_count(TRUNK_WIDTH, cfg.delta_width());
        let plain = Fc::param_count(roi_len, TRUNK_WIDTH) + Fc::param_count(TRUNK_WIDTH, TRUNK_WIDTH);
        let lattice = DenseLattice::param_count(&LatticePlan::new(cfg.pool_size)?);
        let body = match cfg.mode {
            HeadMode::Baseline => plain,
            HeadMode::Lightweight => plain + ContextModule::param_count(cfg.reduction, AttentionVariant::Conv)?,
            HeadMode::DenseNoAttention => lattice + n_branches * ConcatBranch::param_count(roi_len),
            HeadMode::Full => lattice + n_branches * AttentionBranch::param_count(roi_len, cfg.reduction, cfg.variant)?,
        };
        Ok(body + predict)
    }

    /// RoIAlign every `(image, box)` from its assigned pyramid level.
    pub fn roi_features<T: Element>(&self, g: &mut Graph<'_, T>, pyr: &PyramidFeatures, rois: &[(usize, BBox)], roi_cfg: &RoiConfig) -> Result<NodeId> {
        let levels = pyr.levels();
        let extents = levels.map(|p| {
            let (_, _, h, w) = g.value(p).nchw();
            (h, w)
        });
        let samples = roi_samples(rois, &extents, roi_cfg);
        let feat = g.roi_align(&levels, samples)?;
        if g.value(feat).len() != rois.len() * self.roi_len {
            return shape_err("roi_features", format!("{:?} vs roi length {}", g.value(feat).shape(), self.roi_len));
        }
        Ok(feat)
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, pyr: &PyramidFeatures, rois: &[(usize, BBox)], roi_cfg: &RoiConfig) -> Result<HeadOutput> {
        if rois.is_empty() {
            return Err(Error::Invalid("head forward with no RoIs".into()));
        }
        let feat = self.roi_features(g, pyr, rois, roi_cfg)?;
        let batch: Vec<usize> = rois.iter().map(|r| r.0).collect();
        self.forward_features(g, pyr, feat, &batch)
    }

    /// Head on precomputed RoI features `[R,256,k,k]`; `batch[i]` is the
    /// source image of RoI `i`.
    pub fn forward_features<T: Element>(&self, g: &mut Graph<'_, T>, pyr: &PyramidFeatures, roi: NodeId, batch: &[usize]) -> Result<HeadOutput> {
        let n_images = g.value(pyr.p2).dim(0);
        if g.value(roi).dim(0) != batch.len() || batch.iter().any(|&i| i >= n_images) {
            return shape_err("gca_head", format!("{} RoIs, batch map {batch:?}, {n_images} images", g.value(roi).dim(0)));
        }
        let (cls, loc) = match &self.body {
            Body::Plain { light, fc6, fc7 } => {
                let x = match light {
                    Some(ctx) => {
                        let z = pooled_pyramid_sum(g, pyr)?;
                        let d = ctx.from_pooled(g, z)?.per_roi(g, batch)?;
                        g.channel_scale(roi, d.s.expect("lightweight context has a channel gate"))?
                    }
                    None => roi,
                };
                let flat = g.flatten(x)?;
                let h = fc6.forward_relu(g, flat)?;
                let h = fc7.forward_relu(g, h)?;
                (h, h)
            }
            Body::Dense { lattice, branches } => {
                let ctx = self.context(g, lattice, pyr)?;
                let outs = (0..4)
                    .map(|j| branches[j.min(branches.len() - 1)].forward(g, ctx[j], roi, batch))
                    .collect::<Result<Vec<_>>>()?;
                fuse_branches(g, &outs)?
            }
            Body::Full { lattice, branches } => {
                let ctx = self.context(g, lattice, pyr)?;
                let outs = (0..4)
                    .map(|j| branches[j.min(branches.len() - 1)].forward(g, ctx[j], roi, batch))
                    .collect::<Result<Vec<_>>>()?;
                fuse_branches(g, &outs)?
            }
        };
        Ok(HeadOutput {
            scores: self.cls_score.forward(g, cls)?,
            deltas: self.bbox_pred.forward(g, loc)?,
        })
    }

    fn context<T: Element>(&self, g: &mut Graph<'_, T>, lattice: &DenseLattice, pyr: &PyramidFeatures) -> Result<[NodeId; 4]> {
        let q = pool_pyramid(g, pyr.levels(), lattice.plan())?;
        Ok(lattice.forward(g, q)?.g)
    }
}

/// `Σ_k GAP(p_k)`, the `[N,256]` input of the lightweight descriptor.
pub fn pooled_pyramid_sum<T: Element>(g: &mut Graph<'_, T>, pyr: &PyramidFeatures) -> Result<NodeId> {
    let pooled = pyr
        .levels()
        .into_iter()
        .map(|p| g.global_avg_pool(p))
        .collect::<Result<Vec<_>>>()?;
    g.add_all(&pooled)
}
