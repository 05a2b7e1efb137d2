//! Small trainable backbone and the feature pyramid built on top of it.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::nn::{Builder, Conv};
use crate::tensor::{Element, Graph, NodeId};

/// Channel width of every pyramid level.
pub const PYRAMID_CHANNELS: usize = 256;

/// Strides of c2..c5 / p2..p5 relative to the input image.
pub const LEVEL_STRIDES: [usize; 4] = [4, 8, 16, 32];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    /// Output widths of the c2..c5 stages.
    pub widths: [usize; 4],
    /// 3×3 smoothing convolution after each top-down merge.
    pub smooth: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            widths: [32, 64, 128, 256],
            smooth: true,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BackboneFeatures {
    pub c2: NodeId,
    pub c3: NodeId,
    pub c4: NodeId,
    pub c5: NodeId,
}

impl BackboneFeatures {
    pub fn levels(&self) -> [NodeId; 4] {
        [self.c2, self.c3, self.c4, self.c5]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PyramidFeatures {
    pub p2: NodeId,
    pub p3: NodeId,
    pub p4: NodeId,
    pub p5: NodeId,
}

impl PyramidFeatures {
    pub fn levels(&self) -> [NodeId; 4] {
        [self.p2, self.p3, self.p4, self.p5]
    }
}

/// Each stage is two 3×3 conv+ReLU layers whose first conv has stride 2.
/// The c2 stage is the stem: both of its convs have stride 2, which brings
/// it to stride 4.
#[derive(Clone, Debug)]
pub struct Backbone {
    stages: Vec<[Conv; 2]>,
}

impl Backbone {
    pub fn new<T: Element>(b: &mut Builder<'_, T>, widths: [usize; 4]) -> Result<Self> {
        let mut stages = Vec::with_capacity(4);
        let mut cin = 3;
        for (k, &w) in widths.iter().enumerate() {
            let path = format!("backbone.c{}", k + 2);
            let second_stride = if k == 0 { 2 } else { 1 };
            stages.push([
                b.conv(&format!("{path}.conv1"), cin, w, 3, 2)?,
                b.conv(&format!("{path}.conv2"), w, w, 3, second_stride)?,
            ]);
            cin = w;
        }
        Ok(Self { stages })
    }

    /// `Σ (Cout·Cin·9 + Cout)` over the eight convolutions.
    pub fn param_count(widths: [usize; 4]) -> usize {
        let mut cin = 3;
        let mut total = 0;
        for w in widths {
            total += Conv::param_count(cin, w, 3) + Conv::param_count(w, w, 3);
            cin = w;
        }
        total
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, image: NodeId) -> Result<BackboneFeatures> {
        let shape = g.value(image).shape().to_vec();
        if shape.len() != 4 || shape[1] != 3 || shape[2] % 32 != 0 || shape[3] % 32 != 0 || shape[2] == 0 || shape[3] == 0 {
            return shape_err("backbone", format!("image {shape:?} must be N×3×H×W with H, W divisible by 32"));
        }
        let mut x = image;
        let mut outs = Vec::with_capacity(4);
        for [a, b] in &self.stages {
            x = a.forward_relu(g, x)?;
            x = b.forward_relu(g, x)?;
            outs.push(x);
        }
        Ok(BackboneFeatures {
            c2: outs[0],
            c3: outs[1],
            c4: outs[2],
            c5: outs[3],
        })
    }
}

/// Lateral 1×1 projections, nearest-neighbour top-down pathway with
/// element-wise sums, and optional 3×3 smoothing.
#[derive(Clone, Debug)]
pub struct Fpn {
    lateral: [Conv; 4],
    smooth: Option<[Conv; 4]>,
}

impl Fpn {
    pub fn new<T: Element>(b: &mut Builder<'_, T>, widths: [usize; 4], smooth: bool) -> Result<Self> {
        let mut lateral = Vec::with_capacity(4);
        for (k, &w) in widths.iter().enumerate() {
            lateral.push(b.conv(&format!("fpn.lateral{}", k + 2), w, PYRAMID_CHANNELS, 1, 1)?);
        }
        let smooth = if smooth {
            let mut s = Vec::with_capacity(4);
            for k in 0..4 {
                s.push(b.conv(&format!("fpn.smooth{}", k + 2), PYRAMID_CHANNELS, PYRAMID_CHANNELS, 3, 1)?);
            }
            Some([s[0], s[1], s[2], s[3]])
        } else {
            None
        };
        Ok(Self {
            lateral: [lateral[0], lateral[1], lateral[2], lateral[3]],
            smooth,
        })
    }

    pub fn param_count(widths: [usize; 4], smooth: bool) -> usize {
        let lat: usize = widths.iter().map(|&w| Conv::param_count(w, PYRAMID_CHANNELS, 1)).sum();
        let sm = if smooth {
            4 * Conv::param_count(PYRAMID_CHANNELS, PYRAMID_CHANNELS, 3)
        } else {
            0
        };
        lat + sm
    }

    pub fn lateral(&self) -> &[Conv; 4] {
        &self.lateral
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, feats: &BackboneFeatures) -> Result<PyramidFeatures> {
        let levels = feats.levels();
        for pair in levels.windows(2) {
            let (lo, hi) = (g.value(pair[0]).nchw(), g.value(pair[1]).nchw());
            if lo.2 != 2 * hi.2 || lo.3 != 2 * hi.3 || lo.0 != hi.0 {
                return shape_err("build_pyramid", format!("levels {lo:?} / {hi:?} break the stride chain"));
            }
        }
        let mut merged = [levels[3]; 4];
        merged[3] = self.lateral[3].forward(g, levels[3])?;
        for k in (0..3).rev() {
            let lat = self.lateral[k].forward(g, levels[k])?;
            let up = g.upsample_nearest2x(merged[k + 1])?;
            merged[k] = g.add(lat, up)?;
        }
        let mut out = merged;
        if let Some(smooth) = &self.smooth {
            for k in 0..4 {
                out[k] = smooth[k].forward(g, merged[k])?;
            }
        }
        Ok(PyramidFeatures {
            p2: out[0],
            p3: out[1],
            p4: out[2],
            p5: out[3],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ParamStore, Tensor};

    fn build(widths: [usize; 4], smooth: bool) -> (ParamStore<f32>, Backbone, Fpn) {
        let mut store = ParamStore::new();
        let mut b = Builder::new(&mut store, 3);
        let bb = Backbone::new(&mut b, widths).unwrap();
        let fpn = Fpn::new(&mut b, widths, smooth).unwrap();
        (store, bb, fpn)
    }

    #[test]
    fn backbone_shapes_from_128() {
        let (store, bb, fpn) = build([32, 64, 128, 256], true);
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::full(&[1, 3, 128, 128], 0.3));
        let f = bb.forward(&mut g, x).unwrap();
        assert_eq!(g.value(f.c2).shape(), &[1, 32, 32, 32]);
        assert_eq!(g.value(f.c3).shape(), &[1, 64, 16, 16]);
        assert_eq!(g.value(f.c4).shape(), &[1, 128, 8, 8]);
        assert_eq!(g.value(f.c5).shape(), &[1, 256, 4, 4]);
        let p = fpn.forward(&mut g, &f).unwrap();
        for (lvl, s) in p.levels().iter().zip([32, 16, 8, 4]) {
            assert_eq!(g.value(*lvl).shape(), &[1, 256, s, s]);
        }
    }

    #[test]
    fn batch_two_is_preserved() {
        let (store, bb, _) = build([8, 8, 8, 8], true);
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::full(&[2, 3, 64, 64], 0.1));
        let f = bb.forward(&mut g, x).unwrap();
        for l in f.levels() {
            assert_eq!(g.value(l).dim(0), 2);
        }
    }

    #[test]
    fn rejects_indivisible_extents() {
        let (store, bb, _) = build([8, 8, 8, 8], true);
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::zeros(&[1, 3, 48, 64]));
        assert!(bb.forward(&mut g, x).is_err());
    }

    #[test]
    fn param_count_matches_closed_form() {
        let widths = [32, 64, 128, 256];
        let (store, _, _) = build(widths, true);
        assert_eq!(store.count("backbone."), Backbone::param_count(widths));
        assert_eq!(store.count("fpn."), Fpn::param_count(widths, true));
    }

    #[test]
    fn zero_features_and_biases_give_zero_pyramid() {
        let (store, _, fpn) = build([32, 64, 128, 256], true);
        let mut g = Graph::new(&store);
        let c: Vec<NodeId> = [(32, 32), (64, 16), (128, 8), (256, 4)]
            .iter()
            .map(|&(c, s)| g.input(Tensor::zeros(&[1, c, s, s])))
            .collect();
        let feats = BackboneFeatures { c2: c[0], c3: c[1], c4: c[2], c5: c[3] };
        let p = fpn.forward(&mut g, &feats).unwrap();
        for l in p.levels() {
            assert!(g.value(l).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn identity_laterals_without_smoothing_sum_top_down() {
        let (mut store, _, fpn) = build([256; 4], false);
        for conv in fpn.lateral() {
            let w = store.value_mut(conv.w);
            w.data_mut().iter_mut().for_each(|v| *v = 0.0);
            for c in 0..256 {
                w.data_mut()[c * 256 + c] = 1.0;
            }
        }
        let mut g = Graph::new(&store);
        let ramp = |n: usize, off: f32| Tensor::from_vec(&[1, 256, n, n], (0..256 * n * n).map(|i| (i as f32) * 0.001 + off).collect());
        let c5 = ramp(1, 1.0);
        let c4 = ramp(2, 0.5);
        let c = [g.input(ramp(8, 0.0)), g.input(ramp(4, 0.0)), g.input(c4.clone()), g.input(c5.clone())];
        let feats = BackboneFeatures { c2: c[0], c3: c[1], c4: c[2], c5: c[3] };
        let p = fpn.forward(&mut g, &feats).unwrap();
        let p4 = g.value(p.p4);
        for ch in 0..256 {
            for y in 0..2 {
                for x in 0..2 {
                    let want = c4.at(0, ch, y, x) + c5.at(0, ch, 0, 0);
                    assert_eq!(p4.at(0, ch, y, x), want);
                }
            }
        }
    }
}
