//! Squeeze-excitation context descriptors and the per-branch heads that
//! consume them.

use crate::error::{shape_err, Error, Result};
use crate::fpn::PYRAMID_CHANNELS;
use crate::nn::{Builder, Fc};
use crate::tensor::{Element, Graph, NodeId};

use super::AttentionVariant;

/// Width of the RoI trunk and the decoupled cls/loc features.
pub const TRUNK_WIDTH: usize = 1024;

pub fn hidden_width(reduction: usize) -> Result<usize> {
    if reduction == 0 || PYRAMID_CHANNELS % reduction != 0 {
        return Err(Error::Config(format!("reduction {reduction} must divide {PYRAMID_CHANNELS}")));
    }
    Ok(PYRAMID_CHANNELS / reduction)
}

/// Global pool → bottleneck FC + ReLU → one sigmoid projection per gate
/// site the variant uses.
#[derive(Clone, Debug)]
pub struct ContextModule {
    pub squeeze: Fc,
    pub out_conv: Option<Fc>,
    pub out_fc1: Option<Fc>,
    pub out_fc2: Option<Fc>,
    hidden: usize,
}

/// Per-image gates, each `[N, width]` with entries in (0, 1).
#[derive(Clone, Copy, Debug, Default)]
pub struct Descriptor {
    pub s: Option<NodeId>,
    pub s_fc1: Option<NodeId>,
    pub s_fc2: Option<NodeId>,
}

impl Descriptor {
    /// Gather rows so RoI `i` sees the descriptor of image `batch[i]`.
    pub fn per_roi<T: Element>(&self, g: &mut Graph<'_, T>, batch: &[usize]) -> Result<Descriptor> {
        let mut pick = |x: Option<NodeId>| -> Result<Option<NodeId>> { x.map(|x| g.index_rows(x, batch)).transpose() };
        Ok(Descriptor {
            s: pick(self.s)?,
            s_fc1: pick(self.s_fc1)?,
            s_fc2: pick(self.s_fc2)?,
        })
    }
}

impl ContextModule {
    pub fn new<T: Element>(b: &mut Builder<'_, T>, prefix: &str, reduction: usize, variant: AttentionVariant) -> Result<Self> {
        let c = PYRAMID_CHANNELS;
        let hidden = hidden_width(reduction)?;
        let mut proj = |on: bool, name: &str, dout: usize| -> Result<Option<Fc>> {
            if on {
                b.fc(&format!("{prefix}.{name}"), hidden, dout).map(Some)
            } else {
                Ok(None)
            }
        };
        let out_conv = proj(variant.has_conv(), "out_conv", c)?;
        let out_fc1 = proj(variant.has_fc1(), "out_fc1", TRUNK_WIDTH)?;
        let out_fc2 = proj(variant.has_fc2(), "out_fc2", TRUNK_WIDTH)?;
        Ok(Self {
            squeeze: b.fc(&format!("{prefix}.squeeze"), c, hidden)?,
            out_conv,
            out_fc1,
            out_fc2,
            hidden,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn param_count(reduction: usize, variant: AttentionVariant) -> Result<usize> {
        let h = hidden_width(reduction)?;
        let c = PYRAMID_CHANNELS;
        let mut n = Fc::param_count(c, h);
        if variant.has_conv() {
            n += Fc::param_count(h, c);
        }
        if variant.has_fc1() {
            n += Fc::param_count(h, TRUNK_WIDTH);
        }
        if variant.has_fc2() {
            n += Fc::param_count(h, TRUNK_WIDTH);
        }
        Ok(n)
    }

    /// `g: [N,256,h,w]` → gates.
    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, ctx: NodeId) -> Result<Descriptor> {
        let z = g.global_avg_pool(ctx)?;
        self.from_pooled(g, z)
    }

    /// Same as [`forward`](Self::forward) from an already pooled `[N,256]`.
    pub fn from_pooled<T: Element>(&self, g: &mut Graph<'_, T>, z: NodeId) -> Result<Descriptor> {
        let h = self.squeeze.forward_relu(g, z)?;
        let mut gate = |fc: &Option<Fc>| -> Result<Option<NodeId>> {
            match fc {
                Some(fc) => {
                    let y = fc.forward(g, h)?;
                    Ok(Some(g.sigmoid(y)))
                }
                None => Ok(None),
            }
        };
        Ok(Descriptor {
            s: gate(&self.out_conv)?,
            s_fc1: gate(&self.out_fc1)?,
            s_fc2: gate(&self.out_fc2)?,
        })
    }
}

/// Trunk + decoupled cls/loc layers of one context-aware branch.
#[derive(Clone, Debug)]
pub struct AttentionBranch {
    pub context: ContextModule,
    pub fc1: Fc,
    pub fc_cls: Fc,
    pub fc_loc: Fc,
}

impl AttentionBranch {
    pub fn new<T: Element>(b: &mut Builder<'_, T>, prefix: &str, roi_len: usize, reduction: usize, variant: AttentionVariant) -> Result<Self> {
        Ok(Self {
            context: ContextModule::new(b, &format!("{prefix}.se"), reduction, variant)?,
            fc1: b.fc(&format!("{prefix}.fc1"), roi_len, TRUNK_WIDTH)?,
            fc_cls: b.fc(&format!("{prefix}.fc_cls"), TRUNK_WIDTH, TRUNK_WIDTH)?,
            fc_loc: b.fc(&format!("{prefix}.fc_loc"), TRUNK_WIDTH, TRUNK_WIDTH)?,
        })
    }

    pub fn param_count(roi_len: usize, reduction: usize, variant: AttentionVariant) -> Result<usize> {
        Ok(ContextModule::param_count(reduction, variant)?
            + Fc::param_count(roi_len, TRUNK_WIDTH)
            + 2 * Fc::param_count(TRUNK_WIDTH, TRUNK_WIDTH))
    }

    /// `roi: [R,256,7,7]` → `[R,1024]`, gating the RoI feature with `s`
    /// and/or the trunk output with `s_fc1` when present.
    pub fn trunk<T: Element>(&self, g: &mut Graph<'_, T>, roi: NodeId, gates: &Descriptor) -> Result<NodeId> {
        let x = match gates.s {
            Some(s) => g.channel_scale(roi, s)?,
            None => roi,
        };
        let flat = g.flatten(x)?;
        let t = self.fc1.forward_relu(g, flat)?;
        match gates.s_fc1 {
            Some(s) => g.mul(t, s),
            None => Ok(t),
        }
    }

    /// Parallel cls/loc layers, each gated after its ReLU by `s_fc2`.
    pub fn decouple<T: Element>(&self, g: &mut Graph<'_, T>, trunk: NodeId, gates: &Descriptor) -> Result<(NodeId, NodeId)> {
        decouple(g, &self.fc_cls, &self.fc_loc, trunk, gates.s_fc2)
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, ctx: NodeId, roi: NodeId, batch: &[usize]) -> Result<(NodeId, NodeId)> {
        let d = self.context.forward(g, ctx)?.per_roi(g, batch)?;
        let t = self.trunk(g, roi, &d)?;
        self.decouple(g, t, &d)
    }
}

pub(crate) fn decouple<T: Element>(g: &mut Graph<'_, T>, fc_cls: &Fc, fc_loc: &Fc, trunk: NodeId, gate: Option<NodeId>) -> Result<(NodeId, NodeId)> {
    let mut cls = fc_cls.forward_relu(g, trunk)?;
    let mut loc = fc_loc.forward_relu(g, trunk)?;
    if let Some(s) = gate {
        cls = g.mul(cls, s)?;
        loc = g.mul(loc, s)?;
    }
    Ok((cls, loc))
}

/// Branch without attention: 512-wide encodings of the pooled context
/// and of the RoI, concatenated and fused to 1024.
#[derive(Clone, Debug)]
pub struct ConcatBranch {
    pub enc_g: Fc,
    pub enc_roi: Fc,
    pub fuse: Fc,
    pub fc_cls: Fc,
    pub fc_loc: Fc,
}

pub const ENCODE_WIDTH: usize = 512;

impl ConcatBranch {
    pub fn new<T: Element>(b: &mut Builder<'_, T>, prefix: &str, roi_len: usize) -> Result<Self> {
        Ok(Self {
            enc_g: b.fc(&format!("{prefix}.enc_g"), PYRAMID_CHANNELS, ENCODE_WIDTH)?,
            enc_roi: b.fc(&format!("{prefix}.enc_roi"), roi_len, ENCODE_WIDTH)?,
            fuse: b.fc(&format!("{prefix}.fuse"), 2 * ENCODE_WIDTH, TRUNK_WIDTH)?,
            fc_cls: b.fc(&format!("{prefix}.fc_cls"), TRUNK_WIDTH, TRUNK_WIDTH)?,
            fc_loc: b.fc(&format!("{prefix}.fc_loc"), TRUNK_WIDTH, TRUNK_WIDTH)?,
        })
    }

    pub fn param_count(roi_len: usize) -> usize {
        Fc::param_count(PYRAMID_CHANNELS, ENCODE_WIDTH)
            + Fc::param_count(roi_len, ENCODE_WIDTH)
            + Fc::param_count(2 * ENCODE_WIDTH, TRUNK_WIDTH)
            + 2 * Fc::param_count(TRUNK_WIDTH, TRUNK_WIDTH)
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, ctx: NodeId, roi: NodeId, batch: &[usize]) -> Result<(NodeId, NodeId)> {
        let z = g.global_avg_pool(ctx)?;
        let eg = self.enc_g.forward_relu(g, z)?;
        let eg = g.index_rows(eg, batch)?;
        let flat = g.flatten(roi)?;
        let er = self.enc_roi.forward_relu(g, flat)?;
        let cat = g.concat_channels(&[eg, er])?;
        let t = self.fuse.forward_relu(g, cat)?;
        decouple(g, &self.fc_cls, &self.fc_loc, t, None)
    }
}

/// Element-wise sum of the four branches' cls and loc streams, in order.
pub fn fuse_branches<T: Element>(g: &mut Graph<'_, T>, branches: &[(NodeId, NodeId)]) -> Result<(NodeId, NodeId)> {
    if branches.len() != 4 {
        return shape_err("fuse_branches", format!("{} branches, expected 4", branches.len()));
    }
    let cls: Vec<NodeId> = branches.iter().map(|b| b.0).collect();
    let loc: Vec<NodeId> = branches.iter().map(|b| b.1).collect();
    Ok((g.add_all(&cls)?, g.add_all(&loc)?))
}
