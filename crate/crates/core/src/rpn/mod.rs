//! Region proposal network with optional channel recalibration of its
//! input levels.

mod anchors;
mod loss;

use serde::{Deserialize, Serialize};

pub use anchors::{AnchorLevel, AnchorSet};
pub use loss::{assign_anchors, rpn_loss, AnchorLabel};

use crate::boxes::{argsort_desc, decode, nms, BBox};
use crate::error::{shape_err, Error, Result};
use crate::fpn::{PyramidFeatures, PYRAMID_CHANNELS};
use crate::nn::{Builder, Conv, Fc};
use crate::tensor::kernels::sigmoid_scalar;
use crate::tensor::{Element, Graph, NodeId, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RpnConfig {
    /// Global-pool → FC → channel-scale on every input level. Not part of
    /// the serialized form; experiments carry it as `rpn_recalibrate`.
    #[serde(skip)]
    pub recalibrate: bool,
    /// Sigmoid gate after the recalibration FC.
    pub recal_gate: bool,
    pub anchor_sizes: [f64; 4],
    pub ratios: Vec<f64>,
    pub pre_nms_top: usize,
    pub post_nms_top: usize,
    pub nms_iou: f64,
    pub min_size: f64,
    pub batch_per_image: usize,
    pub positive_fraction: f64,
    pub pos_iou: f64,
    pub neg_iou: f64,
}

impl Default for RpnConfig {
    fn default() -> Self {
        Self {
            recalibrate: false,
            recal_gate: true,
            anchor_sizes: [16.0, 32.0, 64.0, 128.0],
            ratios: vec![0.5, 1.0, 2.0],
            pre_nms_top: 256,
            post_nms_top: 64,
            nms_iou: 0.7,
            min_size: 1.0,
            batch_per_image: 64,
            positive_fraction: 0.5,
            pos_iou: 0.7,
            neg_iou: 0.3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub objectness: f64,
}

/// Per-level `(objectness logits [N,A,H,W], deltas [N,4A,H,W])`.
#[derive(Clone, Debug)]
pub struct RpnOutputs {
    pub levels: Vec<(NodeId, NodeId)>,
}

#[derive(Clone, Debug)]
pub struct RpnHead {
    conv: Conv,
    cls: Conv,
    reg: Conv,
    recal: Option<Fc>,
    gate: bool,
    num_anchors: usize,
}

impl RpnHead {
    pub fn new<T: Element>(b: &mut Builder<'_, T>, cfg: &RpnConfig) -> Result<Self> {
        let a = cfg.ratios.len();
        let c = PYRAMID_CHANNELS;
        Ok(Self {
            conv: b.conv("rpn.conv", c, c, 3, 1)?,
            cls: b.conv("rpn.cls", c, a, 1, 1)?,
            reg: b.conv("rpn.reg", c, 4 * a, 1, 1)?,
            recal: if cfg.recalibrate {
                Some(b.fc("rpn.recal.fc", c, c)?)
            } else {
                None
            },
            gate: cfg.recal_gate,
            num_anchors: a,
        })
    }

    pub fn num_anchors(&self) -> usize {
        self.num_anchors
    }

    pub fn recal_fc(&self) -> Option<&Fc> {
        self.recal.as_ref()
    }

    /// `p ⊗ σ(FC(GAP(p)))`, or `p ⊗ FC(GAP(p))` with the gate disabled.
    pub fn recalibrate_level<T: Element>(&self, g: &mut Graph<'_, T>, p: NodeId) -> Result<NodeId> {
        let fc = self
            .recal
            .as_ref()
            .ok_or_else(|| Error::Invalid("model was built without RPN recalibration".into()))?;
        let c = g.value(p).nchw().1;
        if c != PYRAMID_CHANNELS {
            return shape_err("recalibrate_level", format!("{c} channels, expected {PYRAMID_CHANNELS}"));
        }
        let z = g.global_avg_pool(p)?;
        let mut s = fc.forward(g, z)?;
        if self.gate {
            s = g.sigmoid(s);
        }
        g.channel_scale(p, s)
    }

    /// Shared 3×3 conv + ReLU, then sibling 1×1 objectness / delta convs.
    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, pyr: &PyramidFeatures, recalibrate: bool) -> Result<RpnOutputs> {
        let mut levels = Vec::with_capacity(4);
        for p in pyr.levels() {
            let x = if recalibrate { self.recalibrate_level(g, p)? } else { p };
            let h = self.conv.forward_relu(g, x)?;
            let logits = self.cls.forward(g, h)?;
            let deltas = self.reg.forward(g, h)?;
            levels.push((logits, deltas));
        }
        Ok(RpnOutputs { levels })
    }
}

/// Scored, decoded and suppressed proposals for image `n` of the batch.
pub fn propose<T: Element>(
    outputs: &[(Tensor<T>, Tensor<T>)],
    anchors: &AnchorSet,
    cfg: &RpnConfig,
    n: usize,
) -> Result<Vec<Proposal>> {
    if outputs.len() != anchors.levels.len() {
        return shape_err("propose", format!("{} output levels, {} anchor levels", outputs.len(), anchors.levels.len()));
    }
    let (iw, ih) = (anchors.image_width as f64, anchors.image_height as f64);
    let mut merged: Vec<Proposal> = Vec::new();
    for ((logits, deltas), level) in outputs.iter().zip(&anchors.levels) {
        let per_image = level.boxes.len();
        let (_, a4, h, w) = deltas.nchw();
        if logits.len() < (n + 1) * per_image || a4 * h * w != 4 * per_image {
            return shape_err("propose", format!("logits {:?}, deltas {:?}", logits.shape(), deltas.shape()));
        }
        let cells = level.cells();
        let scores: Vec<f64> = logits.data()[n * per_image..(n + 1) * per_image]
            .iter()
            .map(|v| sigmoid_scalar(v.as_f64()))
            .collect();
        let dd = &deltas.data()[n * 4 * per_image..(n + 1) * 4 * per_image];
        let mut boxes = Vec::new();
        let mut kept_scores = Vec::new();
        for i in argsort_desc(&scores).into_iter().take(cfg.pre_nms_top) {
            let (a, cell) = level.split(i);
            let d = [0, 1, 2, 3].map(|j| dd[(4 * a + j) * cells + cell].as_f64());
            let b = decode(&level.boxes[i], d).clip(iw, ih);
            if b.width() < cfg.min_size || b.height() < cfg.min_size {
                continue;
            }
            boxes.push(b);
            kept_scores.push(scores[i]);
        }
        for k in nms(&boxes, &kept_scores, cfg.nms_iou) {
            merged.push(Proposal {
                bbox: boxes[k],
                objectness: kept_scores[k],
            });
        }
    }
    let order = argsort_desc(&merged.iter().map(|p| p.objectness).collect::<Vec<_>>());
    Ok(order
        .into_iter()
        .take(cfg.post_nms_top)
        .map(|i| merged[i])
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fpn::PyramidFeatures;
    use crate::tensor::ParamStore;
    use rand::{Rng, SeedableRng};

    fn head(recal: bool) -> (ParamStore<f64>, RpnHead) {
        let mut store = ParamStore::new();
        let cfg = RpnConfig {
            recalibrate: recal,
            ..RpnConfig::default()
        };
        let h = RpnHead::new(&mut Builder::new(&mut store, 11), &cfg).unwrap();
        (store, h)
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn pyramid(g: &mut Graph<'_, f64>, base: usize) -> PyramidFeatures {
        let l: Vec<NodeId> = (0..4).map(|k| g.input(random(&[1, 256, base >> k, base >> k], k as u64))).collect();
        PyramidFeatures { p2: l[0], p3: l[1], p4: l[2], p5: l[3] }
    }

    #[test]
    fn recalibration_with_zero_fc_halves() {
        let (mut store, h) = head(true);
        let fc = *h.recal_fc().unwrap();
        store.value_mut(fc.w).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let mut g = Graph::new(&store);
        let x = random(&[1, 256, 4, 4], 5);
        let p = g.input(x.clone());
        let y = h.recalibrate_level(&mut g, p).unwrap();
        for (a, b) in g.value(y).data().iter().zip(x.data()) {
            assert_eq!(*a, b * 0.5);
        }
    }

    #[test]
    fn recalibration_of_zeros_is_zero_and_ratio_is_spatially_constant() {
        let (store, h) = head(true);
        let mut g = Graph::new(&store);
        let z = g.input(Tensor::zeros(&[1, 256, 4, 4]));
        let y = h.recalibrate_level(&mut g, z).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let x = random(&[1, 256, 4, 4], 9).map(|v| v + 2.0);
        let p = g.input(x.clone());
        let y = h.recalibrate_level(&mut g, p).unwrap();
        let yv = g.value(y);
        assert_eq!(yv.shape(), x.shape());
        for c in 0..256 {
            let r0 = yv.at(0, c, 0, 0) / x.at(0, c, 0, 0);
            for i in 0..4 {
                for j in 0..4 {
                    assert!((yv.at(0, c, i, j) / x.at(0, c, i, j) - r0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn output_shapes() {
        let (store, h) = head(false);
        let mut g = Graph::new(&store);
        let pyr = pyramid(&mut g, 32);
        let out = h.forward(&mut g, &pyr, false).unwrap();
        let (l, d) = out.levels[0];
        assert_eq!(g.value(l).shape(), &[1, 3, 32, 32]);
        assert_eq!(g.value(d).shape(), &[1, 12, 32, 32]);
    }

    #[test]
    fn recalibration_flag_bypass_and_effect() {
        let (store_on, h_on) = head(true);
        let (store_off, h_off) = head(false);
        let mut g_on = Graph::new(&store_on);
        let mut g_off = Graph::new(&store_off);
        let pyr_on = pyramid(&mut g_on, 16);
        let pyr_off = pyramid(&mut g_off, 16);
        let bypass = h_on.forward(&mut g_on, &pyr_on, false).unwrap();
        let plain = h_off.forward(&mut g_off, &pyr_off, false).unwrap();
        for ((a, _), (b, _)) in bypass.levels.iter().zip(&plain.levels) {
            assert_eq!(g_on.value(*a), g_off.value(*b));
        }
        let recal = h_on.forward(&mut g_on, &pyr_on, true).unwrap();
        assert_ne!(g_on.value(recal.levels[0].0), g_on.value(bypass.levels[0].0));
        assert!(h_off.forward(&mut g_off, &pyr_off, true).is_err());
    }

    fn fake_outputs(anchors: &AnchorSet, logit: impl Fn(usize, usize) -> f64) -> Vec<(Tensor<f64>, Tensor<f64>)> {
        anchors
            .levels
            .iter()
            .enumerate()
            .map(|(k, l)| {
                let n = l.boxes.len();
                let logits = Tensor::from_vec(&[1, l.num_ratios(), l.height, l.width], (0..n).map(|i| logit(k, i)).collect());
                let deltas = Tensor::zeros(&[1, 4 * l.num_ratios(), l.height, l.width]);
                (logits, deltas)
            })
            .collect()
    }

    #[test]
    fn equal_scores_select_in_index_order() {
        let anchors = AnchorSet::new(64, 64, &[16.0, 32.0, 64.0, 128.0], &[1.0]);
        let outs = fake_outputs(&anchors, |_, _| 0.0);
        let cfg = RpnConfig {
            nms_iou: 1.0,
            pre_nms_top: 10_000,
            post_nms_top: 10_000,
            ..RpnConfig::default()
        };
        let props = propose(&outs, &anchors, &cfg, 0).unwrap();
        let want: Vec<BBox> = anchors.iter().map(|b| b.clip(64.0, 64.0)).collect();
        assert_eq!(props.len(), want.len());
        for (p, w) in props.iter().zip(&want) {
            assert_eq!(p.bbox, *w);
        }
    }

    #[test]
    fn proposals_are_bounded_in_image_and_non_degenerate() {
        let anchors = AnchorSet::new(128, 128, &[16.0, 32.0, 64.0, 128.0], &[0.5, 1.0, 2.0]);
        let cfg = RpnConfig::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let outs: Vec<(Tensor<f64>, Tensor<f64>)> = anchors
                .levels
                .iter()
                .map(|l| {
                    let a = l.num_ratios();
                    let mk = |c: usize, rng: &mut rand_chacha::ChaCha8Rng| {
                        Tensor::from_vec(&[1, c, l.height, l.width], (0..c * l.cells()).map(|_| rng.gen_range(-2.0..2.0)).collect())
                    };
                    (mk(a, &mut rng), mk(4 * a, &mut rng))
                })
                .collect();
            let props = propose(&outs, &anchors, &cfg, 0).unwrap();
            assert!(props.len() <= cfg.post_nms_top);
            for p in &props {
                let b = p.bbox;
                assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= 128.0 && b.y2 <= 128.0);
                assert!(b.width() >= 1.0 && b.height() >= 1.0);
            }
            for w in props.windows(2) {
                assert!(w[0].objectness >= w[1].objectness);
            }
        }
    }

    #[test]
    fn few_candidates_all_survive() {
        let anchors = AnchorSet::new(32, 32, &[16.0, 32.0, 64.0, 128.0], &[1.0]);
        // 85 anchors in total, below both caps; NMS disabled.
        let outs = fake_outputs(&anchors, |k, i| (k * 100 + i) as f64 * 1e-3);
        let cfg = RpnConfig {
            nms_iou: 1.0,
            post_nms_top: 1000,
            ..RpnConfig::default()
        };
        let props = propose(&outs, &anchors, &cfg, 0).unwrap();
        assert_eq!(anchors.total(), 85);
        assert_eq!(props.len(), 85);
    }
}
