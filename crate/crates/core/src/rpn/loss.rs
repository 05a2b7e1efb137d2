use rand::seq::SliceRandom;
use rand::Rng;

use super::{AnchorSet, RpnConfig, RpnOutputs};
use crate::boxes::{encode, BBox};
use crate::error::{shape_err, Result};
use crate::tensor::{Element, Graph, NodeId};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive(usize),
    Negative,
    Ignore,
}

/// Positive when IoU ≥ `pos_iou` or the anchor attains some ground truth's
/// best IoU; negative below `neg_iou`; ignored otherwise. Anchors are in
/// [`AnchorSet::iter`] order.
pub fn assign_anchors(anchors: &AnchorSet, gt: &[BBox], cfg: &RpnConfig) -> Vec<AnchorLabel> {
    let all: Vec<&BBox> = anchors.iter().collect();
    if gt.is_empty() {
        return vec![AnchorLabel::Negative; all.len()];
    }
    let ious: Vec<Vec<f64>> = all.iter().map(|a| gt.iter().map(|g| a.iou(g)).collect()).collect();
    let best_for_gt: Vec<f64> = (0..gt.len())
        .map(|j| ious.iter().map(|row| row[j]).fold(0.0, f64::max))
        .collect();
    ious.iter()
        .map(|row| {
            let (arg, best) = row
                .iter()
                .enumerate()
                .fold((0, -1.0), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc });
            let low_quality = (0..gt.len()).find(|&j| best_for_gt[j] > 0.0 && row[j] == best_for_gt[j]);
            if best >= cfg.pos_iou {
                AnchorLabel::Positive(arg)
            } else if let Some(j) = low_quality {
                AnchorLabel::Positive(j)
            } else if best < cfg.neg_iou {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignore
            }
        })
        .collect()
}

/// Objectness BCE plus smooth-L1 on positive deltas, both normalised by
/// the number of sampled anchors and averaged over the batch.
pub fn rpn_loss<T: Element, R: Rng>(
    g: &mut Graph<'_, T>,
    outputs: &RpnOutputs,
    anchors: &AnchorSet,
    gt: &[Vec<BBox>],
    cfg: &RpnConfig,
    rng: &mut R,
) -> Result<NodeId> {
    if outputs.levels.len() != anchors.levels.len() {
        return shape_err("rpn_loss", "level count mismatch");
    }
    let batch = g.value(outputs.levels[0].0).dim(0);
    if gt.len() != batch {
        return shape_err("rpn_loss", format!("{} gt lists for batch {batch}", gt.len()));
    }
    let mut targets: Vec<(Vec<T>, Vec<T>, Vec<T>, Vec<T>)> = outputs
        .levels
        .iter()
        .map(|&(l, d)| {
            let (nl, nd) = (g.value(l).len(), g.value(d).len());
            (vec![T::zero(); nl], vec![T::zero(); nl], vec![T::zero(); nd], vec![T::zero(); nd])
        })
        .collect();
    // global anchor index -> (level, local index)
    let mut locate = Vec::with_capacity(anchors.total());
    for (k, l) in anchors.levels.iter().enumerate() {
        locate.extend((0..l.boxes.len()).map(|i| (k, i)));
    }

    for (n, gt_n) in gt.iter().enumerate() {
        let labels = assign_anchors(anchors, gt_n, cfg);
        let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| matches!(labels[i], AnchorLabel::Positive(_))).collect();
        let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == AnchorLabel::Negative).collect();
        let max_pos = (cfg.batch_per_image as f64 * cfg.positive_fraction) as usize;
        pos.shuffle(rng);
        pos.truncate(max_pos);
        neg.shuffle(rng);
        neg.truncate(cfg.batch_per_image - pos.len());
        let sampled = pos.len() + neg.len();
        if sampled == 0 {
            continue;
        }
        let w = T::of(1.0 / (sampled as f64 * batch as f64));
        for (&i, positive) in pos.iter().map(|i| (i, true)).chain(neg.iter().map(|i| (i, false))) {
            let (k, local) = locate[i];
            let level = &anchors.levels[k];
            let per_image = level.boxes.len();
            let (a, cell) = level.split(local);
            let t = &mut targets[k];
            t.0[n * per_image + local] = if positive { T::one() } else { T::zero() };
            t.1[n * per_image + local] = w;
            if let (true, AnchorLabel::Positive(j)) = (positive, labels[i]) {
                let d = encode(&level.boxes[local], &gt_n[j]);
                for (c, dv) in d.iter().enumerate() {
                    let idx = n * 4 * per_image + (4 * a + c) * level.cells() + cell;
                    t.2[idx] = T::of(*dv);
                    t.3[idx] = w;
                }
            }
        }
    }

    let mut terms = Vec::with_capacity(2 * targets.len());
    for (&(l, d), (ct, cw, rt, rw)) in outputs.levels.iter().zip(targets) {
        terms.push(g.bce_with_logits(l, ct, cw)?);
        terms.push(g.smooth_l1(d, rt, rw)?);
    }
    g.add_all(&terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ParamStore, Tensor};
    use rand::SeedableRng;

    fn anchors() -> AnchorSet {
        AnchorSet::new(64, 64, &[16.0, 32.0, 64.0, 128.0], &[0.5, 1.0, 2.0])
    }

    fn outputs_from(
        g: &mut Graph<'_, f64>,
        a: &AnchorSet,
        logit: impl Fn(usize, usize) -> f64,
    ) -> RpnOutputs {
        let levels = a
            .levels
            .iter()
            .enumerate()
            .map(|(k, l)| {
                let n = l.boxes.len();
                let lg = g.input(Tensor::from_vec(&[1, l.num_ratios(), l.height, l.width], (0..n).map(|i| logit(k, i)).collect()));
                let dl = g.input(Tensor::zeros(&[1, 4 * l.num_ratios(), l.height, l.width]));
                (lg, dl)
            })
            .collect();
        RpnOutputs { levels }
    }

    #[test]
    fn perfect_prediction_has_tiny_loss() {
        let a = anchors();
        let gt_box = a.levels[1].boxes[a.levels[1].cells() + 10]; // ratio 1.0 anchor
        let cfg = RpnConfig::default();
        let labels = assign_anchors(&a, &[gt_box], &cfg);
        let positives: Vec<usize> = (0..labels.len()).filter(|&i| matches!(labels[i], AnchorLabel::Positive(_))).collect();
        assert_eq!(positives.len(), 1);
        let offsets: Vec<usize> = a.levels.iter().scan(0, |acc, l| { let o = *acc; *acc += l.boxes.len(); Some(o) }).collect();
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let out = outputs_from(&mut g, &a, |k, i| if positives.contains(&(offsets[k] + i)) { 10.0 } else { -10.0 });
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let loss = rpn_loss(&mut g, &out, &a, &[vec![gt_box]], &cfg, &mut rng).unwrap();
        let v = g.value(loss).data()[0];
        assert!(v >= 0.0 && v < 0.01, "loss {v}");
    }

    #[test]
    fn no_ground_truth_is_classification_only_and_finite() {
        let a = anchors();
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let out = outputs_from(&mut g, &a, |_, _| 0.0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let loss = rpn_loss(&mut g, &out, &a, &[vec![]], &RpnConfig::default(), &mut rng).unwrap();
        // 64 sampled negatives at logit 0: mean BCE is ln 2.
        assert!((g.value(loss).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn every_gt_gets_a_positive() {
        let a = anchors();
        let gt = [BBox::new(3.0, 5.0, 9.0, 30.0), BBox::new(40.0, 40.0, 63.0, 50.0)];
        let labels = assign_anchors(&a, &gt, &RpnConfig::default());
        for j in 0..gt.len() {
            assert!(labels.iter().any(|l| *l == AnchorLabel::Positive(j)));
        }
    }
}
