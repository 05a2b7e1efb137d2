use crate::boxes::BBox;
use crate::fpn::LEVEL_STRIDES;

/// Anchors of one pyramid level. Anchor `i = a·H·W + y·W + x` matches the
/// memory order of an `[A, H, W]` objectness map.
#[derive(Clone, Debug)]
pub struct AnchorLevel {
    pub stride: usize,
    pub size: f64,
    pub ratios: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub boxes: Vec<BBox>,
}

impl AnchorLevel {
    pub fn num_ratios(&self) -> usize {
        self.ratios.len()
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    /// `(ratio, cell)` of anchor `i`.
    pub fn split(&self, i: usize) -> (usize, usize) {
        (i / self.cells(), i % self.cells())
    }
}

#[derive(Clone, Debug)]
pub struct AnchorSet {
    pub image_height: usize,
    pub image_width: usize,
    pub levels: Vec<AnchorLevel>,
}

impl AnchorSet {
    /// One square base size per level, several aspect ratios (`h / w`) per
    /// cell, centred on cell centres.
    pub fn new(image_height: usize, image_width: usize, sizes: &[f64], ratios: &[f64]) -> Self {
        let levels = LEVEL_STRIDES
            .iter()
            .zip(sizes)
            .map(|(&stride, &size)| {
                let (h, w) = (image_height / stride, image_width / stride);
                let mut boxes = Vec::with_capacity(h * w * ratios.len());
                for &r in ratios {
                    let bw = size / r.sqrt();
                    let bh = size * r.sqrt();
                    for y in 0..h {
                        for x in 0..w {
                            let cx = (x as f64 + 0.5) * stride as f64;
                            let cy = (y as f64 + 0.5) * stride as f64;
                            boxes.push(BBox::from_center(cx, cy, bw, bh));
                        }
                    }
                }
                AnchorLevel {
                    stride,
                    size,
                    ratios: ratios.to_vec(),
                    height: h,
                    width: w,
                    boxes,
                }
            })
            .collect();
        Self {
            image_height,
            image_width,
            levels,
        }
    }

    pub fn total(&self) -> usize {
        self.levels.iter().map(|l| l.boxes.len()).sum()
    }

    /// All anchors, level by level.
    pub fn iter(&self) -> impl Iterator<Item = &BBox> {
        self.levels.iter().flat_map(|l| l.boxes.iter())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_per_level() {
        let a = AnchorSet::new(128, 128, &[16.0, 32.0, 64.0, 128.0], &[0.5, 1.0, 2.0]);
        let counts: Vec<usize> = a.levels.iter().map(|l| l.boxes.len()).collect();
        assert_eq!(counts, vec![3 * 32 * 32, 3 * 16 * 16, 3 * 8 * 8, 3 * 4 * 4]);
        for l in &a.levels {
            assert_eq!(l.boxes.len(), l.height * l.width * l.num_ratios());
        }
    }

    #[test]
    fn areas_and_ratios() {
        let a = AnchorSet::new(64, 64, &[16.0, 32.0, 64.0, 128.0], &[0.5, 1.0, 2.0]);
        let l = &a.levels[1];
        for (r, ratio) in l.ratios.iter().enumerate() {
            let b = l.boxes[r * l.cells()];
            assert!((b.area() - 32.0 * 32.0).abs() < 1e-9);
            assert!((b.height() / b.width() - ratio).abs() < 1e-9);
            assert_eq!(b.center(), (4.0, 4.0));
        }
    }
}
