//! wasm-bindgen surface for `www/index.html`: render a synthetic scene,
//! crop a dragged box with RoIAlign, and run NMS over jittered candidates.

use gca_rcnn::boxes::{nms, BBox};
use gca_rcnn::harness::scene::{generate_scene, Scene, SceneSpec};
use gca_rcnn::roi::roi_align;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn rgba(data: &[f32], h: usize, w: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            out.push((data[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        out.push(255);
    }
    out
}

#[derive(Serialize)]
struct LabeledBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
    label: usize,
    name: String,
}

#[derive(Serialize)]
struct NmsResult {
    boxes: Vec<[f64; 4]>,
    scores: Vec<f64>,
    keep: Vec<usize>,
}

#[wasm_bindgen]
pub struct Demo {
    spec: SceneSpec,
    scene: Scene,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new() -> Result<Demo, JsError> {
        let spec = SceneSpec::default();
        let scene = generate_scene(&spec, 0).map_err(|e| JsError::new(&e.to_string()))?;
        Ok(Demo { spec, scene })
    }

    /// Replace the current scene and return its pixels as RGBA.
    pub fn generate(&mut self, seed: u32, index: u32, contextual: bool) -> Result<Vec<u8>, JsError> {
        self.spec.seed = seed as u64;
        self.spec.contextual_mode = contextual;
        self.spec.classes = if contextual { 6 } else { 3 };
        self.scene = generate_scene(&self.spec, index as u64).map_err(|e| JsError::new(&e.to_string()))?;
        Ok(self.pixels())
    }

    pub fn pixels(&self) -> Vec<u8> {
        let (h, w) = self.spec.image_size;
        rgba(self.scene.image.data(), h, w)
    }

    pub fn width(&self) -> usize {
        self.spec.image_size.1
    }

    pub fn height(&self) -> usize {
        self.spec.image_size.0
    }

    /// Ground truth as a JSON array of `{x1, y1, x2, y2, label, name}`.
    pub fn boxes(&self) -> String {
        let names = self.spec.class_names();
        let v: Vec<LabeledBox> = self
            .scene
            .targets
            .boxes
            .iter()
            .zip(&self.scene.targets.labels)
            .map(|(b, &l)| LabeledBox {
                x1: b.x1,
                y1: b.y1,
                x2: b.x2,
                y2: b.y2,
                label: l,
                name: names[l - 1].clone(),
            })
            .collect();
        serde_json::to_string(&v).expect("boxes serialize")
    }

    /// RoIAlign crop of the image itself (stride 1) as `out × out` RGBA.
    pub fn crop(&self, x1: f64, y1: f64, x2: f64, y2: f64, out: usize, sampling: usize) -> Result<Vec<u8>, JsError> {
        let (h, w) = self.spec.image_size;
        let map = self.scene.image.clone().reshape(&[1, 3, h, w]).map_err(|e| JsError::new(&e.to_string()))?;
        let c = roi_align(&map, 0, &BBox::new(x1, y1, x2, y2), 1.0, out, sampling).map_err(|e| JsError::new(&e.to_string()))?;
        Ok(rgba(c.data(), out, out))
    }

    /// Bilinear sample locations the crop averages, as flat `(x, y)` pairs.
    pub fn sample_points(&self, x1: f64, y1: f64, x2: f64, y2: f64, out: usize, sampling: usize) -> Vec<f64> {
        sample_points(&BBox::new(x1, y1, x2, y2), out, sampling)
    }

    /// `count` jittered copies of every ground-truth box with scores that
    /// fall with the jitter, then greedy NMS at `iou`. JSON
    /// `{boxes, scores, keep}`.
    pub fn nms(&self, iou: f64, count: usize, seed: u32) -> String {
        serde_json::to_string(&jittered_nms(&self.scene.targets.boxes, iou, count, seed as u64)).expect("nms serializes")
    }
}

pub fn sample_points(b: &BBox, out: usize, sampling: usize) -> Vec<f64> {
    let (bw, bh) = (b.width().max(0.0) / out as f64, b.height().max(0.0) / out as f64);
    let mut pts = Vec::with_capacity(2 * out * out * sampling * sampling);
    for i in 0..out {
        for j in 0..out {
            for sy in 0..sampling {
                for sx in 0..sampling {
                    pts.push(b.x1 + bw * (j as f64 + (sx as f64 + 0.5) / sampling as f64));
                    pts.push(b.y1 + bh * (i as f64 + (sy as f64 + 0.5) / sampling as f64));
                }
            }
        }
    }
    pts
}

fn jittered_nms(gt: &[BBox], iou: f64, count: usize, seed: u64) -> NmsResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut boxes = Vec::new();
    let mut scores = Vec::new();
    for g in gt {
        for _ in 0..count {
            let j = rng.gen_range(0.0..0.25);
            let d = |s: f64, r: &mut ChaCha8Rng| s * j * r.gen_range(-1.0..1.0);
            let b = BBox::new(
                g.x1 + d(g.width(), &mut rng),
                g.y1 + d(g.height(), &mut rng),
                g.x2 + d(g.width(), &mut rng),
                g.y2 + d(g.height(), &mut rng),
            );
            boxes.push(b);
            scores.push((1.0 - 3.0 * j + rng.gen_range(-0.1..0.1)).clamp(0.01, 1.0));
        }
    }
    let keep = nms(&boxes, &scores, iou);
    NmsResult {
        boxes: boxes.iter().map(|b| [b.x1, b.y1, b.x2, b.y2]).collect(),
        scores,
        keep,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_round_trip() {
        let mut d = Demo::new().unwrap();
        let px = d.generate(3, 1, true).unwrap();
        assert_eq!(px.len(), 4 * d.width() * d.height());
        let boxes: Vec<serde_json::Value> = serde_json::from_str(&d.boxes()).unwrap();
        assert!(!boxes.is_empty());
        assert!(boxes[0]["name"].as_str().unwrap().contains('_'));
    }

    #[test]
    fn crop_has_the_requested_extent() {
        let d = Demo::new().unwrap();
        let b = d.scene.targets.boxes[0];
        let crop = d.crop(b.x1, b.y1, b.x2, b.y2, 7, 2).unwrap();
        assert_eq!(crop.len(), 4 * 49);
        assert!(crop.chunks(4).all(|p| p[3] == 255));
    }

    #[test]
    fn sample_grid_is_inside_the_box() {
        let b = BBox::new(10.0, 20.0, 38.0, 34.0);
        let p = sample_points(&b, 7, 2);
        assert_eq!(p.len(), 2 * 7 * 7 * 4);
        assert!(p.chunks(2).all(|q| q[0] > 10.0 && q[0] < 38.0 && q[1] > 20.0 && q[1] < 34.0));
        assert_eq!(p[0], 11.0);
    }

    #[test]
    fn nms_keeps_one_per_object_at_loose_threshold() {
        let gt = [BBox::new(0.0, 0.0, 20.0, 20.0), BBox::new(60.0, 60.0, 100.0, 90.0)];
        let r = jittered_nms(&gt, 0.3, 20, 1);
        assert_eq!(r.boxes.len(), 40);
        assert!(r.keep.len() >= 2 && r.keep.len() < 40);
        let all = jittered_nms(&gt, 1.0, 20, 1);
        assert_eq!(all.keep.len(), 40);
    }
}
