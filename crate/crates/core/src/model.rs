//! The assembled two-stage detector: backbone, pyramid, RPN and RoI head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::{decode, nms, BBox};
use crate::error::{shape_err, Error, Result};
use crate::fpn::{Backbone, BackboneConfig, Fpn, PyramidFeatures};
use crate::head::{head_loss, sample_rois, GcaConfig, GcaHead, RoiSamplingConfig, SampledRoi};
use crate::nn::Builder;
use crate::roi::RoiConfig;
use crate::rpn::{propose, rpn_loss, AnchorSet, Proposal, RpnConfig, RpnHead, RpnOutputs};
use crate::tensor::kernels::softmax_rows;
use crate::tensor::{Element, Graph, NodeId, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.05,
            nms_iou: 0.5,
            max_detections: 100,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub rpn: RpnConfig,
    pub roi: RoiConfig,
    pub head: GcaConfig,
    pub sampling: RoiSamplingConfig,
    pub inference: InferenceConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    /// `1..=K`.
    pub label: usize,
    pub score: f64,
}

/// Ground truth of one image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Targets {
    pub boxes: Vec<BBox>,
    pub labels: Vec<usize>,
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: NodeId,
    pub rpn: NodeId,
    /// Absent when no image produced a usable RoI sample.
    pub head: Option<NodeId>,
}

#[derive(Clone, Debug)]
pub struct Detector {
    cfg: ModelConfig,
    backbone: Backbone,
    fpn: Fpn,
    rpn: RpnHead,
    head: GcaHead,
}

fn image_extent<T: Element>(g: &Graph<'_, T>, image: NodeId) -> Result<(usize, usize, usize)> {
    let v = g.value(image);
    if v.shape().len() != 4 || v.dim(1) != 3 {
        return shape_err("detector", format!("image {:?} must be N×3×H×W", v.shape()));
    }
    Ok((v.dim(0), v.dim(2), v.dim(3)))
}

impl Detector {
    /// Register every parameter in `store` (which should be empty) and
    /// initialise them from `seed`.
    pub fn new<T: Element>(cfg: &ModelConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        cfg.head.validate()?;
        if cfg.rpn.ratios.is_empty() {
            return Err(Error::Config("rpn.ratios must not be empty".into()));
        }
        let mut b = Builder::new(store, seed);
        Ok(Self {
            cfg: cfg.clone(),
            backbone: Backbone::new(&mut b, cfg.backbone.widths)?,
            fpn: Fpn::new(&mut b, cfg.backbone.widths, cfg.backbone.smooth)?,
            rpn: RpnHead::new(&mut b, &cfg.rpn)?,
            head: GcaHead::new(&mut b, &cfg.head, cfg.roi.output_size)?,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn head(&self) -> &GcaHead {
        &self.head
    }

    pub fn anchors(&self, height: usize, width: usize) -> AnchorSet {
        AnchorSet::new(height, width, &self.cfg.rpn.anchor_sizes, &self.cfg.rpn.ratios)
    }

    pub fn features<T: Element>(&self, g: &mut Graph<'_, T>, image: NodeId) -> Result<PyramidFeatures> {
        let c = self.backbone.forward(g, image)?;
        self.fpn.forward(g, &c)
    }

    pub fn rpn_forward<T: Element>(&self, g: &mut Graph<'_, T>, pyr: &PyramidFeatures) -> Result<RpnOutputs> {
        self.rpn.forward(g, pyr, self.cfg.rpn.recalibrate)
    }

    /// Proposals per image from already computed RPN outputs.
    pub fn proposals<T: Element>(&self, g: &Graph<'_, T>, out: &RpnOutputs, anchors: &AnchorSet, images: usize) -> Result<Vec<Vec<Proposal>>> {
        let values: Vec<(Tensor<T>, Tensor<T>)> = out.levels.iter().map(|&(l, d)| (g.value(l).clone(), g.value(d).clone())).collect();
        (0..images).map(|n| propose(&values, anchors, &self.cfg.rpn, n)).collect()
    }

    /// RPN loss plus head loss on RoIs sampled from the current proposals.
    pub fn training_loss<T: Element, R: Rng>(&self, g: &mut Graph<'_, T>, image: NodeId, targets: &[Targets], rng: &mut R) -> Result<LossParts> {
        let (n, h, w) = image_extent(g, image)?;
        if targets.len() != n {
            return shape_err("training_loss", format!("{} target sets for {n} images", targets.len()));
        }
        let pyr = self.features(g, image)?;
        let out = self.rpn_forward(g, &pyr)?;
        let anchors = self.anchors(h, w);
        let props = self.proposals(g, &out, &anchors, n)?;
        let rois: Vec<Vec<SampledRoi>> = props
            .iter()
            .zip(targets)
            .map(|(p, t)| {
                let boxes: Vec<BBox> = p.iter().map(|p| p.bbox).collect();
                sample_rois(&boxes, &t.boxes, &t.labels, &self.cfg.sampling, rng)
            })
            .collect();
        self.loss_tail(g, &pyr, &out, &anchors, targets, &rois, rng)
    }

    /// The RoI sample a training step would draw at the current
    /// parameters, for replay with [`Detector::training_loss_fixed`].
    pub fn sample_training_rois<T: Element, R: Rng>(&self, store: &ParamStore<T>, image: &Tensor<T>, targets: &[Targets], rng: &mut R) -> Result<Vec<Vec<SampledRoi>>> {
        let mut g = Graph::new(store);
        let x = g.input(image.clone());
        let (n, h, w) = image_extent(&g, x)?;
        let pyr = self.features(&mut g, x)?;
        let out = self.rpn_forward(&mut g, &pyr)?;
        let props = self.proposals(&g, &out, &self.anchors(h, w), n)?;
        Ok(props
            .iter()
            .zip(targets)
            .map(|(p, t)| {
                let boxes: Vec<BBox> = p.iter().map(|p| p.bbox).collect();
                sample_rois(&boxes, &t.boxes, &t.labels, &self.cfg.sampling, rng)
            })
            .collect())
    }

    /// Training loss with the RoI sample held fixed, so the loss is a
    /// smooth function of the parameters and the image.
    pub fn training_loss_fixed<T: Element, R: Rng>(
        &self,
        g: &mut Graph<'_, T>,
        image: NodeId,
        targets: &[Targets],
        rois: &[Vec<SampledRoi>],
        rng: &mut R,
    ) -> Result<LossParts> {
        let (n, h, w) = image_extent(g, image)?;
        if targets.len() != n || rois.len() != n {
            return shape_err("training_loss_fixed", format!("{n} images, {} targets, {} RoI sets", targets.len(), rois.len()));
        }
        let pyr = self.features(g, image)?;
        let out = self.rpn_forward(g, &pyr)?;
        self.loss_tail(g, &pyr, &out, &self.anchors(h, w), targets, rois, rng)
    }

    #[allow(clippy::too_many_arguments)]
    fn loss_tail<T: Element, R: Rng>(
        &self,
        g: &mut Graph<'_, T>,
        pyr: &PyramidFeatures,
        out: &RpnOutputs,
        anchors: &AnchorSet,
        targets: &[Targets],
        rois: &[Vec<SampledRoi>],
        rng: &mut R,
    ) -> Result<LossParts> {
        let gt: Vec<Vec<BBox>> = targets.iter().map(|t| t.boxes.clone()).collect();
        let rpn = rpn_loss(g, out, anchors, &gt, &self.cfg.rpn, rng)?;
        let flat: Vec<SampledRoi> = rois.iter().flatten().copied().collect();
        let head = if flat.is_empty() {
            None
        } else {
            let tagged: Vec<(usize, BBox)> = rois.iter().enumerate().flat_map(|(n, r)| r.iter().map(move |s| (n, s.bbox))).collect();
            let ho = self.head.forward(g, pyr, &tagged, &self.cfg.roi)?;
            head_loss(g, &ho, &flat, &self.cfg.head)?
        };
        let total = match head {
            Some(h) => g.add(rpn, h)?,
            None => rpn,
        };
        Ok(LossParts { total, rpn, head })
    }

    /// Class probabilities `[R, K+1]` of given boxes on image 0.
    pub fn score_boxes<T: Element>(&self, store: &ParamStore<T>, image: &Tensor<T>, boxes: &[BBox]) -> Result<Tensor<T>> {
        let mut g = Graph::new(store);
        let x = g.input(image.clone());
        image_extent(&g, x)?;
        let pyr = self.features(&mut g, x)?;
        let tagged: Vec<(usize, BBox)> = boxes.iter().map(|b| (0, *b)).collect();
        let ho = self.head.forward(&mut g, &pyr, &tagged, &self.cfg.roi)?;
        Ok(softmax_rows(g.value(ho.scores)))
    }

    /// Detections for every image of an `[N,3,H,W]` batch.
    pub fn detect<T: Element>(&self, store: &ParamStore<T>, image: &Tensor<T>) -> Result<Vec<Vec<Detection>>> {
        let mut g = Graph::new(store);
        let x = g.input(image.clone());
        let (n, h, w) = image_extent(&g, x)?;
        let pyr = self.features(&mut g, x)?;
        let out = self.rpn_forward(&mut g, &pyr)?;
        let props = self.proposals(&g, &out, &self.anchors(h, w), n)?;
        let tagged: Vec<(usize, BBox)> = props.iter().enumerate().flat_map(|(i, p)| p.iter().map(move |p| (i, p.bbox))).collect();
        let mut result = vec![Vec::new(); n];
        if tagged.is_empty() {
            return Ok(result);
        }
        let ho = self.head.forward(&mut g, &pyr, &tagged, &self.cfg.roi)?;
        let probs = softmax_rows(g.value(ho.scores));
        let deltas = g.value(ho.deltas);
        let k = self.cfg.head.num_classes;
        let dw = self.cfg.head.delta_width();
        for (img, dets) in result.iter_mut().enumerate() {
            for class in 1..=k {
                let mut boxes = Vec::new();
                let mut scores = Vec::new();
                for (r, &(i, roi)) in tagged.iter().enumerate() {
                    let p = probs.data()[r * (k + 1) + class].as_f64();
                    if i != img || p < self.cfg.inference.score_threshold {
                        continue;
                    }
                    let col = if self.cfg.head.class_agnostic { 0 } else { 4 * (class - 1) };
                    let d = [0, 1, 2, 3].map(|j| deltas.data()[r * dw + col + j].as_f64());
                    boxes.push(decode(&roi, d).clip(w as f64, h as f64));
                    scores.push(p);
                }
                for keep in nms(&boxes, &scores, self.cfg.inference.nms_iou) {
                    dets.push(Detection {
                        bbox: boxes[keep],
                        label: class,
                        score: scores[keep],
                    });
                }
            }
            // stable sort keeps class order among equal scores
            dets.sort_by(|a, b| b.score.total_cmp(&a.score));
            dets.truncate(self.cfg.inference.max_detections);
        }
        Ok(result)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::default();
        cfg.backbone.widths = [8, 8, 16, 16];
        cfg.head.mode = crate::head::HeadMode::Lightweight;
        cfg.head.num_classes = 2;
        cfg
    }

    fn image(h: usize, w: usize) -> Tensor<f32> {
        Tensor::from_vec(&[1, 3, h, w], (0..3 * h * w).map(|i| ((i * 7919) % 255) as f32 / 255.0).collect())
    }

    #[test]
    fn loss_is_finite_and_reaches_every_head_parameter() {
        let cfg = small_cfg();
        let mut store = ParamStore::<f32>::new();
        let det = Detector::new(&cfg, &mut store, 0).unwrap();
        let targets = [Targets {
            boxes: vec![BBox::new(10.0, 12.0, 40.0, 50.0)],
            labels: vec![2],
        }];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new(&store);
        let x = g.input(image(64, 64));
        let parts = det.training_loss(&mut g, x, &targets, &mut rng).unwrap();
        assert!(parts.head.is_some());
        assert!(g.value(parts.total).all_finite());
        let grads = g.backward(parts.total).unwrap();
        let reached: std::collections::HashSet<usize> = grads.params.iter().map(|(id, _)| id.index()).collect();
        for (id, p) in store.iter() {
            assert!(reached.contains(&id.index()), "{} unreached", p.path);
        }
    }

    #[test]
    fn detections_are_bounded_and_sorted() {
        let mut cfg = small_cfg();
        cfg.inference.score_threshold = 0.0;
        cfg.inference.max_detections = 7;
        let mut store = ParamStore::<f32>::new();
        let det = Detector::new(&cfg, &mut store, 1).unwrap();
        let out = det.detect(&store, &image(64, 96)).unwrap();
        assert_eq!(out.len(), 1);
        assert!(out[0].len() <= 7);
        for d in &out[0] {
            assert!(d.bbox.x1 >= 0.0 && d.bbox.x2 <= 96.0 && d.bbox.y2 <= 64.0);
            assert!((1..=2).contains(&d.label));
        }
        assert!(out[0].windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn fixed_rois_replay_the_sampled_loss() {
        let cfg = small_cfg();
        let mut store = ParamStore::<f64>::new();
        let det = Detector::new(&cfg, &mut store, 2).unwrap();
        let targets = [Targets {
            boxes: vec![BBox::new(5.0, 5.0, 30.0, 20.0)],
            labels: vec![1],
        }];
        let img = image(64, 64).cast::<f64>();
        let rois = det
            .sample_training_rois(&store, &img, &targets, &mut rand_chacha::ChaCha8Rng::seed_from_u64(3))
            .unwrap();
        let eval = || {
            let mut g = Graph::new(&store);
            let x = g.input(img.clone());
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
            let p = det.training_loss_fixed(&mut g, x, &targets, &rois, &mut rng).unwrap();
            g.value(p.total).data()[0]
        };
        assert_eq!(eval(), eval());
    }
}
