//! COCO-style annotation JSON with binary PPM images.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::scene::Scene;
use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::model::Targets;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    /// `[x, y, w, h]`
    pub bbox: [f64; 4],
    #[serde(default)]
    pub area: f64,
    #[serde(default)]
    pub iscrowd: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CocoDataset {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

/// Imported scenes plus the category names behind labels `1..=K`.
pub struct Imported {
    pub scenes: Vec<Scene>,
    pub class_names: Vec<String>,
}

pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    Ok(Tensor::from_vec(&[3, h, w], data))
}

pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let (h, w) = (image.dim(1), image.dim(2));
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        image::Rgb([0, 1, 2].map(|c| (image.data()[(c * h + y as usize) * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    buf.save_with_format(path, image::ImageFormat::Pnm).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

/// Zero-pad bottom and right so both extents are multiples of `multiple`.
pub fn pad_to_multiple(image: &Tensor<f32>, multiple: usize) -> Tensor<f32> {
    let (h, w) = (image.dim(1), image.dim(2));
    let (ph, pw) = (h.div_ceil(multiple) * multiple, w.div_ceil(multiple) * multiple);
    if (ph, pw) == (h, w) {
        return image.clone();
    }
    let mut out = Tensor::zeros(&[3, ph, pw]);
    for c in 0..3 {
        for y in 0..h {
            let src = &image.data()[(c * h + y) * w..][..w];
            out.data_mut()[(c * ph + y) * pw..][..w].copy_from_slice(src);
        }
    }
    out
}

/// Load `annotations` and the PPM files it names, resolved against
/// `image_dir`. Categories map to labels in ascending id order; crowd
/// annotations are dropped; images are padded to a multiple of 32.
pub fn import(annotations: &Path, image_dir: &Path) -> Result<Imported> {
    let ds: CocoDataset = serde_json::from_str(&std::fs::read_to_string(annotations)?)?;
    let mut cats = ds.categories.clone();
    cats.sort_by_key(|c| c.id);
    let label: BTreeMap<u64, usize> = cats.iter().enumerate().map(|(i, c)| (c.id, i + 1)).collect();
    let mut scenes = Vec::with_capacity(ds.images.len());
    for img in &ds.images {
        let pixels = read_ppm(&image_dir.join(&img.file_name))?;
        if (pixels.dim(1), pixels.dim(2)) != (img.height, img.width) {
            return Err(Error::Dataset(format!(
                "{}: file is {}x{}, annotation says {}x{}",
                img.file_name,
                pixels.dim(2),
                pixels.dim(1),
                img.width,
                img.height
            )));
        }
        let mut targets = Targets::default();
        for a in ds.annotations.iter().filter(|a| a.image_id == img.id && a.iscrowd == 0) {
            let l = *label
                .get(&a.category_id)
                .ok_or_else(|| Error::Dataset(format!("annotation {} has unknown category {}", a.id, a.category_id)))?;
            let [x, y, w, h] = a.bbox;
            targets.boxes.push(BBox::new(x, y, x + w, y + h));
            targets.labels.push(l);
        }
        scenes.push(Scene {
            image: pad_to_multiple(&pixels, 32),
            targets,
        });
    }
    Ok(Imported {
        scenes,
        class_names: cats.into_iter().map(|c| c.name).collect(),
    })
}

/// Write `scenes` as `dir/annotations.json` plus `dir/images/NNNNNN.ppm`.
pub fn export(dir: &Path, scenes: &[Scene], class_names: &[String]) -> Result<CocoDataset> {
    std::fs::create_dir_all(dir.join("images"))?;
    let mut ds = CocoDataset {
        categories: class_names
            .iter()
            .enumerate()
            .map(|(i, n)| CocoCategory {
                id: i as u64 + 1,
                name: n.clone(),
            })
            .collect(),
        ..CocoDataset::default()
    };
    for (i, s) in scenes.iter().enumerate() {
        let file_name = format!("images/{i:06}.ppm");
        write_ppm(&dir.join(&file_name), &s.image)?;
        ds.images.push(CocoImage {
            id: i as u64,
            file_name,
            width: s.image.dim(2),
            height: s.image.dim(1),
        });
        for (b, &l) in s.targets.boxes.iter().zip(&s.targets.labels) {
            ds.annotations.push(CocoAnnotation {
                id: ds.annotations.len() as u64,
                image_id: i as u64,
                category_id: l as u64,
                bbox: [b.x1, b.y1, b.width(), b.height()],
                area: b.area(),
                iscrowd: 0,
            });
        }
    }
    std::fs::write(dir.join("annotations.json"), serde_json::to_string_pretty(&ds)?)?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::scene::{generate_set, SceneSpec};

    #[test]
    fn export_import_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec {
            image_size: (64, 96),
            object_size: (10.0, 30.0),
            ..SceneSpec::default()
        };
        let scenes = generate_set(&spec, 0, 3).unwrap();
        let names: Vec<String> = ["a", "b", "c"].map(String::from).to_vec();
        export(dir.path(), &scenes, &names).unwrap();
        let back = import(&dir.path().join("annotations.json"), dir.path()).unwrap();
        assert_eq!(back.class_names, names);
        for (a, b) in scenes.iter().zip(&back.scenes) {
            assert_eq!(a.targets, b.targets);
            let err = a.image.data().iter().zip(b.image.data()).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
            assert!(err <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn handwritten_coco_with_odd_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::from_vec(&[3, 5, 7], (0..105).map(|i| (i % 11) as f32 / 10.0).collect());
        write_ppm(&dir.path().join("x.ppm"), &img).unwrap();
        let json = r#"{
            "images": [{"id": 7, "file_name": "x.ppm", "width": 7, "height": 5}],
            "annotations": [
                {"id": 1, "image_id": 7, "category_id": 20, "bbox": [1, 1, 3, 2]},
                {"id": 2, "image_id": 7, "category_id": 5, "bbox": [0, 0, 7, 5], "iscrowd": 1},
                {"id": 3, "image_id": 7, "category_id": 5, "bbox": [2, 0, 1, 1]}
            ],
            "categories": [{"id": 20, "name": "cup"}, {"id": 5, "name": "table"}]
        }"#;
        std::fs::write(dir.path().join("ann.json"), json).unwrap();
        let out = import(&dir.path().join("ann.json"), dir.path()).unwrap();
        assert_eq!(out.class_names, vec!["table", "cup"]);
        let s = &out.scenes[0];
        assert_eq!(s.image.shape(), &[3, 32, 32]);
        assert_eq!(s.targets.labels, vec![2, 1]);
        assert_eq!(s.targets.boxes[0], BBox::new(1.0, 1.0, 4.0, 3.0));
        assert_eq!(s.image.data()[32 + 3], img.data()[7 + 3]);
        assert_eq!(s.image.data()[32 * 32 - 1], 0.0);
    }

    #[test]
    fn bad_inputs_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("ann.json"), r#"{"images": [{"id": 0, "file_name": "missing.ppm", "width": 4, "height": 4}], "annotations": [], "categories": []}"#).unwrap();
        assert!(matches!(import(&dir.path().join("ann.json"), dir.path()), Err(Error::Dataset(_))));
    }
}
