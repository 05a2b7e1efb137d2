//! Average precision over IoU thresholds and per-class RoI accuracy.

use serde::{Deserialize, Serialize};

use crate::boxes::{argsort_desc, BBox};
use crate::error::{Error, Result};
use crate::model::{Detection, Detector, Targets};
use crate::tensor::{Element, ParamStore};

use super::scene::Scene;

/// `0.50, 0.55, …, 0.95`.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// All-point interpolated AP of one class at one IoU threshold.
/// `detections[i]` and `ground_truth[i]` belong to image `i`; only boxes
/// of `class` are considered. `None` when the class has no ground truth.
pub fn average_precision(detections: &[Vec<Detection>], ground_truth: &[Targets], class: usize, iou_thr: f64) -> Option<f64> {
    let gts: Vec<Vec<BBox>> = ground_truth
        .iter()
        .map(|t| t.boxes.iter().zip(&t.labels).filter(|(_, &l)| l == class).map(|(b, _)| *b).collect())
        .collect();
    let total: usize = gts.iter().map(Vec::len).sum();
    if total == 0 {
        return None;
    }
    let dets: Vec<(usize, Detection)> = detections
        .iter()
        .enumerate()
        .flat_map(|(i, d)| d.iter().filter(|d| d.label == class).map(move |d| (i, *d)))
        .collect();
    let order = argsort_desc(&dets.iter().map(|d| d.1.score).collect::<Vec<_>>());
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = Vec::with_capacity(order.len());
    for i in order {
        let (img, d) = dets[i];
        // best still-unmatched ground truth at or above the threshold
        let best = gts[img]
            .iter()
            .enumerate()
            .filter(|(j, _)| !taken[img][*j])
            .map(|(j, g)| (j, d.bbox.iou(g)))
            .filter(|&(_, iou)| iou >= iou_thr)
            .fold(None, |acc: Option<(usize, f64)>, x| match acc {
                Some(a) if a.1 >= x.1 => Some(a),
                _ => Some(x),
            });
        match best {
            Some((j, _)) => {
                taken[img][j] = true;
                tp.push(true);
            }
            None => tp.push(false),
        }
    }
    Some(integrate(&tp, total))
}

/// Area under the precision envelope for a ranked hit list.
pub(crate) fn integrate(tp: &[bool], total: usize) -> f64 {
    let mut hits = 0usize;
    let mut points = Vec::with_capacity(tp.len());
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        points.push((hits as f64 / total as f64, hits as f64 / (k + 1) as f64));
    }
    for i in (0..points.len().saturating_sub(1)).rev() {
        points[i].1 = points[i].1.max(points[i + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in points {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    ap
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ApSummary {
    /// `(threshold, AP averaged over classes with ground truth)`.
    pub per_iou: Vec<(f64, f64)>,
    /// Mean over thresholds and classes.
    pub map: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// Per class `1..=K`, averaged over thresholds; `None` without ground truth.
    pub per_class: Vec<Option<f64>>,
}

pub fn summarize(detections: &[Vec<Detection>], ground_truth: &[Targets], num_classes: usize) -> ApSummary {
    let thresholds = iou_thresholds();
    let table: Vec<Vec<Option<f64>>> = (1..=num_classes)
        .map(|c| thresholds.iter().map(|&t| average_precision(detections, ground_truth, c, t)).collect())
        .collect();
    let mean = |xs: &mut dyn Iterator<Item = f64>| -> f64 {
        let v: Vec<f64> = xs.collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let per_iou: Vec<(f64, f64)> = thresholds
        .iter()
        .enumerate()
        .map(|(t, &thr)| (thr, mean(&mut table.iter().filter_map(|row| row[t]))))
        .collect();
    let per_class: Vec<Option<f64>> = table
        .iter()
        .map(|row| {
            let v: Vec<f64> = row.iter().flatten().copied().collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect();
    ApSummary {
        map: mean(&mut per_class.iter().flatten().copied()),
        ap50: per_iou[0].1,
        ap75: per_iou[5].1,
        per_iou,
        per_class,
    }
}

/// Run the detector over `scenes` and score the detections.
pub fn evaluate<T: Element>(det: &Detector, store: &ParamStore<T>, scenes: &[Scene]) -> Result<(ApSummary, Vec<Vec<Detection>>)> {
    if scenes.is_empty() {
        return Err(Error::Invalid("evaluation on an empty dataset".into()));
    }
    let mut all = Vec::with_capacity(scenes.len());
    for s in scenes {
        all.push(det.detect(store, &s.batch().cast())?.remove(0));
    }
    let gt: Vec<Targets> = scenes.iter().map(|s| s.targets.clone()).collect();
    Ok((summarize(&all, &gt, det.config().head.num_classes), all))
}

/// Head classification of the ground-truth boxes, restricted to the
/// classes in `group`: per class in `group`, the fraction of its
/// ground-truth RoIs whose highest score within `group` is the true class.
pub fn group_accuracy<T: Element>(det: &Detector, store: &ParamStore<T>, scenes: &[Scene], group: &[usize]) -> Result<Vec<f64>> {
    let mut hits = vec![0usize; group.len()];
    let mut counts = vec![0usize; group.len()];
    for s in scenes {
        let keep: Vec<(BBox, usize)> = s
            .targets
            .boxes
            .iter()
            .zip(&s.targets.labels)
            .filter(|(_, l)| group.contains(l))
            .map(|(b, &l)| (*b, l))
            .collect();
        if keep.is_empty() {
            continue;
        }
        let boxes: Vec<BBox> = keep.iter().map(|k| k.0).collect();
        let probs = det.score_boxes(store, &s.batch().cast(), &boxes)?;
        let width = probs.dim(1);
        for (r, &(_, label)) in keep.iter().enumerate() {
            let row = &probs.data()[r * width..(r + 1) * width];
            let pred = group
                .iter()
                .copied()
                .fold(group[0], |best, c| if row[c] > row[best] { c } else { best });
            let gi = group.iter().position(|&c| c == label).expect("label is in group");
            counts[gi] += 1;
            hits[gi] += (pred == label) as usize;
        }
    }
    Ok(hits
        .iter()
        .zip(&counts)
        .map(|(&h, &c)| if c == 0 { 0.0 } else { h as f64 / c as f64 })
        .collect())
}
