//! Axis-aligned boxes in continuous image coordinates.

use serde::{Deserialize, Serialize};

/// Upper clamp for log-space size deltas.
pub const MAX_LOG_RATIO: f64 = 2.772_588_722_239_781; // ln 16

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn width(&self) -> f64 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let iw = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let ih = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Clamp into `[0, width] × [0, height]`.
    pub fn clip(&self, width: f64, height: f64) -> BBox {
        BBox::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }

    pub fn flip_horizontal(&self, width: f64) -> BBox {
        BBox::new(width - self.x2, self.y1, width - self.x1, self.y2)
    }

    pub fn is_valid(&self) -> bool {
        self.x2 >= self.x1 && self.y2 >= self.y1
    }
}

/// Regression targets `(dx, dy, dw, dh)` that move `anchor` onto `target`.
pub fn encode(anchor: &BBox, target: &BBox) -> [f64; 4] {
    let (acx, acy) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let (tcx, tcy) = target.center();
    [
        (tcx - acx) / aw,
        (tcy - acy) / ah,
        (target.width() / aw).ln(),
        (target.height() / ah).ln(),
    ]
}

/// Inverse of [`encode`]; size deltas are clamped to `ln 16`.
pub fn decode(anchor: &BBox, d: [f64; 4]) -> BBox {
    let (acx, acy) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = acx + d[0] * aw;
    let cy = acy + d[1] * ah;
    let w = aw * d[2].min(MAX_LOG_RATIO).exp();
    let h = ah * d[3].min(MAX_LOG_RATIO).exp();
    BBox::from_center(cx, cy, w, h)
}

/// Greedy non-maximum suppression. Candidates are visited by descending
/// score (ties by lower index); a candidate is dropped when its IoU with an
/// already kept box exceeds `iou_thr`. Returns kept indices in visit order.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_thr: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "nms: boxes and scores differ in length");
    let order = argsort_desc(scores);
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| boxes[k].iou(&boxes[i]) <= iou_thr) {
            keep.push(i);
        }
    }
    keep
}

/// Indices sorted by descending value; equal values keep index order.
pub fn argsort_desc(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn iou_basics() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&BBox::new(20.0, 20.0, 30.0, 30.0)), 0.0);
        let b = BBox::new(5.0, 0.0, 15.0, 10.0);
        assert!((a.iou(&b) - 50.0 / 150.0).abs() < 1e-12);
    }

    #[test]
    fn zero_deltas_keep_anchor() {
        let a = BBox::new(3.0, 4.0, 19.0, 12.0);
        let d = decode(&a, [0.0; 4]);
        assert!((d.x1 - a.x1).abs() < 1e-12 && (d.y2 - a.y2).abs() < 1e-12);
    }

    #[test]
    fn log2_doubles_width() {
        let a = BBox::new(0.0, 0.0, 8.0, 8.0);
        let d = decode(&a, [0.0, 0.0, 2f64.ln(), 0.0]);
        assert!((d.width() - 16.0).abs() < 1e-12);
        assert!((d.height() - 8.0).abs() < 1e-12);
    }

    #[test]
    fn size_delta_is_clamped() {
        let a = BBox::new(0.0, 0.0, 1.0, 1.0);
        let d = decode(&a, [0.0, 0.0, 100.0, 100.0]);
        assert!((d.width() - 16.0).abs() < 1e-9);
    }

    #[test]
    fn nms_pair_and_disjoint() {
        // IoU 0.8: second box is 10x8 inside a 10x10 box.
        let boxes = [BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(0.0, 0.0, 10.0, 8.0)];
        assert!((boxes[0].iou(&boxes[1]) - 0.8).abs() < 1e-12);
        assert_eq!(nms(&boxes, &[0.9, 0.8], 0.7), vec![0]);
        let disjoint = [BBox::new(0.0, 0.0, 1.0, 1.0), BBox::new(5.0, 5.0, 6.0, 6.0)];
        assert_eq!(nms(&disjoint, &[0.1, 0.2], 0.7), vec![1, 0]);
    }

    #[test]
    fn nms_ties_prefer_lower_index() {
        let boxes = [BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(0.0, 0.0, 10.0, 10.0)];
        assert_eq!(nms(&boxes, &[0.5, 0.5], 0.5), vec![0]);
    }

    fn nms_brute(boxes: &[BBox], scores: &[f64], thr: f64) -> Vec<usize> {
        // Repeatedly pick the best remaining candidate and strike its overlaps.
        let mut alive = vec![true; boxes.len()];
        let mut keep = Vec::new();
        loop {
            let mut best: Option<usize> = None;
            for i in 0..boxes.len() {
                if alive[i] && best.map_or(true, |b| scores[i] > scores[b]) {
                    best = Some(i);
                }
            }
            let Some(b) = best else { break };
            keep.push(b);
            alive[b] = false;
            for j in 0..boxes.len() {
                if alive[j] && boxes[b].iou(&boxes[j]) > thr {
                    alive[j] = false;
                }
            }
        }
        keep
    }

    proptest! {
        #[test]
        fn encode_decode_roundtrip(
            x in 0.0f64..100.0, y in 0.0f64..100.0, w in 1.0f64..64.0, h in 1.0f64..64.0,
            dx in -1.0f64..1.0, dy in -1.0f64..1.0, dw in -2.0f64..2.0, dh in -2.0f64..2.0,
        ) {
            let a = BBox::new(x, y, x + w, y + h);
            let d = [dx, dy, dw, dh];
            let back = encode(&a, &decode(&a, d));
            for (u, v) in back.iter().zip(d) {
                prop_assert!((u - v).abs() < 1e-5);
            }
        }

        #[test]
        fn nms_matches_brute_force(seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = 100;
            let boxes: Vec<BBox> = (0..n).map(|_| {
                let x = rng.gen_range(0.0..100.0);
                let y = rng.gen_range(0.0..100.0);
                BBox::new(x, y, x + rng.gen_range(1.0..40.0), y + rng.gen_range(1.0..40.0))
            }).collect();
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            prop_assert_eq!(nms(&boxes, &scores, 0.5), nms_brute(&boxes, &scores, 0.5));
        }
    }
}
