//! Deterministic synthetic detection scenes: solid rectangles, discs and
//! triangles over a flat background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::model::Targets;
use crate::tensor::Tensor;

pub const SHAPES: [&str; 3] = ["rectangle", "disc", "triangle"];
/// Background hue buckets in contextual mode.
pub const HUE_BUCKETS: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    /// `(H, W)`.
    pub image_size: (usize, usize),
    /// Inclusive `(min, max)` object count.
    pub objects_per_image: (usize, usize),
    pub classes: usize,
    /// Label = shape × background-hue bucket; the glyph is drawn identically
    /// for both buckets on a neutral mat.
    pub contextual_mode: bool,
    pub seed: u64,
    /// Object side range in pixels.
    pub object_size: (f64, f64),
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            image_size: (128, 128),
            objects_per_image: (1, 4),
            classes: 3,
            contextual_mode: false,
            seed: 0,
            object_size: (16.0, 56.0),
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.objects_per_image;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("objects_per_image {lo}..{hi}")));
        }
        let max_classes = if self.contextual_mode { SHAPES.len() * HUE_BUCKETS } else { SHAPES.len() };
        if self.classes == 0 || self.classes > max_classes {
            return Err(Error::Config(format!("classes {} outside 1..={max_classes}", self.classes)));
        }
        if self.contextual_mode && self.classes % HUE_BUCKETS != 0 {
            return Err(Error::Config(format!("contextual classes {} must be a multiple of {HUE_BUCKETS}", self.classes)));
        }
        let (smin, smax) = self.object_size;
        let (h, w) = self.image_size;
        if !(4.0..=smax).contains(&smin) || smax > h.min(w) as f64 * 0.9 {
            return Err(Error::Config(format!("object_size {smin}..{smax} for image {h}x{w}")));
        }
        Ok(())
    }

    /// Names for labels `1..=classes`.
    pub fn class_names(&self) -> Vec<String> {
        (0..self.classes)
            .map(|i| {
                if self.contextual_mode {
                    format!("{}_{}", SHAPES[i / HUE_BUCKETS], ["red", "blue"][i % HUE_BUCKETS])
                } else {
                    SHAPES[i].to_string()
                }
            })
            .collect()
    }

    fn shapes(&self) -> usize {
        if self.contextual_mode {
            self.classes / HUE_BUCKETS
        } else {
            self.classes
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub targets: Targets,
}

impl Scene {
    /// `(C, H, W)`.
    pub fn extent(&self) -> (usize, usize, usize) {
        (self.image.dim(0), self.image.dim(1), self.image.dim(2))
    }

    /// Mirror left-right, boxes included.
    pub fn flipped(&self) -> Scene {
        let (c, h, w) = self.extent();
        let mut data = vec![0.0; c * h * w];
        for (dst, src) in data.chunks_mut(w).zip(self.image.data().chunks(w)) {
            for (d, s) in dst.iter_mut().zip(src.iter().rev()) {
                *d = *s;
            }
        }
        Scene {
            image: Tensor::from_vec(self.image.shape(), data),
            targets: Targets {
                boxes: self.targets.boxes.iter().map(|b| b.flip_horizontal(w as f64)).collect(),
                labels: self.targets.labels.clone(),
            },
        }
    }

    /// `[1, 3, H, W]` view for the detector.
    pub fn batch(&self) -> Tensor<f32> {
        let (c, h, w) = self.extent();
        self.image.clone().reshape(&[1, c, h, w]).expect("scene image is 3-D")
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f32; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    let rgb = match i as usize {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [rgb.0 as f32, rgb.1 as f32, rgb.2 as f32]
}

#[derive(Clone, Copy, Debug)]
struct Glyph {
    shape: usize,
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

impl Glyph {
    /// Whether the pixel centre `(px + ½, py + ½)` lies inside.
    fn covers(&self, px: usize, py: usize) -> bool {
        let (u, v) = ((px as f64 + 0.5 - self.x) / self.w, (py as f64 + 0.5 - self.y) / self.h);
        if !(0.0..1.0).contains(&u) || !(0.0..1.0).contains(&v) {
            return false;
        }
        match self.shape {
            0 => true,
            1 => (u - 0.5).powi(2) + (v - 0.5).powi(2) < 0.25,
            _ => (u - 0.5).abs() * 2.0 <= v,
        }
    }

    /// Tight pixel bounds of the covered set, or `None` if empty.
    fn pixel_box(&self, h: usize, w: usize) -> Option<BBox> {
        let mut b: Option<(usize, usize, usize, usize)> = None;
        let (y0, y1) = (self.y.floor().max(0.0) as usize, ((self.y + self.h).ceil() as usize).min(h));
        let (x0, x1) = (self.x.floor().max(0.0) as usize, ((self.x + self.w).ceil() as usize).min(w));
        for py in y0..y1 {
            for px in x0..x1 {
                if self.covers(px, py) {
                    b = Some(match b {
                        None => (px, py, px, py),
                        Some((a, c, d, e)) => (a.min(px), c.min(py), d.max(px), e.max(py)),
                    });
                }
            }
        }
        b.map(|(x1, y1, x2, y2)| BBox::new(x1 as f64, y1 as f64, (x2 + 1) as f64, (y2 + 1) as f64))
    }
}

fn paint(img: &mut [f32], h: usize, w: usize, color: [f32; 3], mut inside: impl FnMut(usize, usize) -> bool) {
    for py in 0..h {
        for px in 0..w {
            if inside(px, py) {
                for (c, &v) in color.iter().enumerate() {
                    img[(c * h + py) * w + px] = v;
                }
            }
        }
    }
}

/// Scene `index` of the stream fixed by `spec.seed`.
pub fn generate_scene(spec: &SceneSpec, index: u64) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let (h, w) = spec.image_size;
    let mut img = vec![0.0f32; 3 * h * w];

    let bucket = rng.gen_range(0..HUE_BUCKETS);
    let background = if spec.contextual_mode {
        // reddish vs bluish, jittered within the bucket
        let hue = [0.02, 0.6][bucket] + rng.gen_range(-0.05..0.05);
        hsv(hue, rng.gen_range(0.6..0.9), rng.gen_range(0.5..0.8))
    } else {
        hsv(rng.gen(), rng.gen_range(0.0..0.5), rng.gen_range(0.1..0.35))
    };
    paint(&mut img, h, w, background, |_, _| true);

    let count = rng.gen_range(spec.objects_per_image.0..=spec.objects_per_image.1);
    let mut placed: Vec<(Glyph, BBox, usize)> = Vec::new();
    for _ in 0..count {
        let shape = rng.gen_range(0..spec.shapes());
        let mut chosen = None;
        for _ in 0..50 {
            let (smin, smax) = spec.object_size;
            let gw = rng.gen_range(smin..=smax);
            let gh = if shape == 1 { gw } else { rng.gen_range(smin..=smax) };
            // leave room for the mat in contextual mode
            let margin = if spec.contextual_mode { 6.0 } else { 1.0 };
            if gw + 2.0 * margin >= w as f64 || gh + 2.0 * margin >= h as f64 {
                continue;
            }
            let x = rng.gen_range(margin..w as f64 - gw - margin);
            let y = rng.gen_range(margin..h as f64 - gh - margin);
            let g = Glyph { shape, x, y, w: gw, h: gh };
            let Some(b) = g.pixel_box(h, w) else { continue };
            if placed.iter().all(|(_, o, _)| o.iou(&b) < 0.2) {
                chosen = Some((g, b));
                break;
            }
        }
        if let Some((g, b)) = chosen {
            let label = if spec.contextual_mode { shape * HUE_BUCKETS + bucket + 1 } else { shape + 1 };
            placed.push((g, b, label));
        }
    }
    if placed.is_empty() {
        return Err(Error::Invalid(format!("scene {index}: could not place any object")));
    }

    for (g, b, _) in &placed {
        let color = if spec.contextual_mode {
            let mat = BBox::new(b.x1 - 5.0, b.y1 - 5.0, b.x2 + 5.0, b.y2 + 5.0);
            paint(&mut img, h, w, [0.5; 3], |px, py| {
                let (cx, cy) = (px as f64 + 0.5, py as f64 + 0.5);
                cx > mat.x1 && cx < mat.x2 && cy > mat.y1 && cy < mat.y2
            });
            [0.95, 0.95, 0.95]
        } else {
            let mut c;
            loop {
                c = hsv(rng.gen(), rng.gen_range(0.5..1.0), rng.gen_range(0.6..1.0));
                let contrast: f32 = c.iter().zip(&background).map(|(a, b)| (a - b).abs()).sum();
                if contrast > 0.4 {
                    break;
                }
            }
            c
        };
        paint(&mut img, h, w, color, |px, py| g.covers(px, py));
    }

    Ok(Scene {
        image: Tensor::from_vec(&[3, h, w], img),
        targets: Targets {
            boxes: placed.iter().map(|p| p.1).collect(),
            labels: placed.iter().map(|p| p.2).collect(),
        },
    })
}

/// Scenes `first..first + count`.
pub fn generate_set(spec: &SceneSpec, first: u64, count: usize) -> Result<Vec<Scene>> {
    (first..first + count as u64).map(|i| generate_scene(spec, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_and_index_same_pixels() {
        let spec = SceneSpec::default();
        let a = generate_scene(&spec, 17).unwrap();
        let b = generate_scene(&spec, 17).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.image, generate_scene(&spec, 18).unwrap().image);
    }

    #[test]
    fn single_object_scenes_have_one_box() {
        let spec = SceneSpec {
            objects_per_image: (1, 1),
            ..SceneSpec::default()
        };
        for i in 0..20 {
            let s = generate_scene(&spec, i).unwrap();
            assert_eq!(s.targets.boxes.len(), 1);
            assert!((1..=3).contains(&s.targets.labels[0]));
        }
    }

    fn scan_bounds(s: &Scene, neutral: impl Fn([f32; 3]) -> bool) -> BBox {
        let (_, h, w) = s.extent();
        let px = |x: usize, y: usize| [0, 1, 2].map(|c| s.image.data()[(c * h + y) * w + x]);
        let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..h {
            for x in 0..w {
                if !neutral(px(x, y)) {
                    x1 = x1.min(x);
                    y1 = y1.min(y);
                    x2 = x2.max(x + 1);
                    y2 = y2.max(y + 1);
                }
            }
        }
        BBox::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64)
    }

    #[test]
    fn boxes_tightly_bound_painted_pixels() {
        for contextual in [false, true] {
            let spec = SceneSpec {
                objects_per_image: (1, 1),
                contextual_mode: contextual,
                classes: if contextual { 6 } else { 3 },
                seed: 5,
                ..SceneSpec::default()
            };
            for i in 0..100 {
                let s = generate_scene(&spec, i).unwrap();
                let corner = [0, 1, 2].map(|c| s.image.data()[c * 128 * 128]);
                let found = if contextual {
                    scan_bounds(&s, |p| p != [0.95; 3])
                } else {
                    scan_bounds(&s, |p| p == corner)
                };
                let b = s.targets.boxes[0];
                for (a, e) in [(found.x1, b.x1), (found.y1, b.y1), (found.x2, b.x2), (found.y2, b.y2)] {
                    assert!((a - e).abs() <= 1.0, "scene {i}: {found:?} vs {b:?}");
                }
                assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= 128.0 && b.y2 <= 128.0);
            }
        }
    }

    #[test]
    fn contextual_label_follows_background_hue() {
        let spec = SceneSpec {
            contextual_mode: true,
            classes: 2,
            seed: 3,
            ..SceneSpec::default()
        };
        let mut seen = [0usize; 2];
        for i in 0..40 {
            let s = generate_scene(&spec, i).unwrap();
            let corner = [0, 1, 2].map(|c| s.image.data()[c * 128 * 128]);
            let reddish = corner[0] > corner[2];
            for &l in &s.targets.labels {
                assert_eq!(l, if reddish { 1 } else { 2 });
                seen[l - 1] += 1;
            }
        }
        assert!(seen[0] > 0 && seen[1] > 0);
    }

    #[test]
    fn flip_mirrors_pixels_and_boxes() {
        let s = generate_scene(&SceneSpec::default(), 2).unwrap();
        let f = s.flipped();
        assert_eq!(f.flipped(), s);
        assert_eq!(f.image.data()[(128 + 10) * 128], s.image.data()[(128 + 10) * 128 + 127]);
        assert_eq!(f.targets.boxes[0].x2, 128.0 - s.targets.boxes[0].x1);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(SceneSpec { classes: 4, ..SceneSpec::default() }.validate().is_err());
        assert!(SceneSpec { contextual_mode: true, classes: 3, ..SceneSpec::default() }.validate().is_err());
        assert!(SceneSpec { objects_per_image: (0, 2), ..SceneSpec::default() }.validate().is_err());
    }
}
