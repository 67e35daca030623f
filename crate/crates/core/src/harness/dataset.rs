//! On-disk datasets: PNG images plus one COCO-like `annotations.json`.
//!
//! ```text
//! {
//!   "images":      [{"id", "file_name", "width", "height", "split"?}],
//!   "categories":  [{"id", "name"}],
//!   "annotations": [{"id", "image_id", "category_id",
//!                    "bbox": [x, y, w, h],                 absolute pixels
//!                    "mask": {"width", "height", "rows"}?,   box-aligned bitmap, rows of '0'/'1'
//!                    "segmentation": [[x, y, ...], ...]?,  polygons in absolute pixels
//!                    "keypoints": [x, y, v, ...]?}],       v = 2 visible, 0/1 not
//!   "captions":    [{"image_id", "caption"}]
//! }
//! ```
//!
//! Category ids are mapped to class indices in order of appearance in
//! `categories`. Images without captions simply take no part in captioning.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::shapes::{DatasetRecord, Split};
use crate::codec::{BBox, Bitmask, Instance, Keypoint, SceneAnnotation};
use crate::error::{Error, LoadError, Result};
use crate::model::Raster;

pub const ANNOTATION_FILE: &str = "annotations.json";
pub const IMAGE_DIR: &str = "images";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryEntry {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskEntry {
    pub width: usize,
    pub height: usize,
    pub rows: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationEntry {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<MaskEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segmentation: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keypoints: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionEntry {
    pub image_id: u64,
    pub caption: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    #[serde(default)]
    pub images: Vec<ImageEntry>,
    #[serde(default)]
    pub categories: Vec<CategoryEntry>,
    #[serde(default)]
    pub annotations: Vec<AnnotationEntry>,
    #[serde(default)]
    pub captions: Vec<CaptionEntry>,
}

impl MaskEntry {
    fn from_bitmask(m: &Bitmask) -> Self {
        let rows = m.bits.chunks(m.width).map(|r| r.iter().map(|&b| if b { '1' } else { '0' }).collect()).collect();
        MaskEntry { width: m.width, height: m.height, rows }
    }

    fn to_bitmask(&self) -> std::result::Result<Bitmask, String> {
        if self.rows.len() != self.height || self.rows.iter().any(|r| r.len() != self.width) {
            return Err(format!("mask rows do not form a {}x{} grid", self.width, self.height));
        }
        let mut bits = Vec::with_capacity(self.width * self.height);
        for c in self.rows.iter().flat_map(|r| r.chars()) {
            match c {
                '0' => bits.push(false),
                '1' => bits.push(true),
                _ => return Err(format!("mask character {c:?}")),
            }
        }
        Bitmask::new(self.width, self.height, bits).map_err(|e| e.to_string())
    }
}

/// Rasterizes polygons (absolute pixels, even-odd rule at pixel centres)
/// onto the pixel grid of the box `[x, y, w, h]`.
pub fn rasterize_polygons(polygons: &[Vec<f64>], bbox: [f64; 4]) -> std::result::Result<Bitmask, String> {
    let cols = bbox[2].round().max(1.0) as usize;
    let rows = bbox[3].round().max(1.0) as usize;
    for p in polygons {
        if p.len() < 6 || p.len() % 2 != 0 {
            return Err("polygon needs at least three (x, y) pairs".into());
        }
    }
    let mut bits = Vec::with_capacity(cols * rows);
    for r in 0..rows {
        let py = bbox[1] + (r as f64 + 0.5) * bbox[3] / rows as f64;
        for c in 0..cols {
            let px = bbox[0] + (c as f64 + 0.5) * bbox[2] / cols as f64;
            let mut inside = false;
            for poly in polygons {
                let n = poly.len() / 2;
                for i in 0..n {
                    let (x1, y1) = (poly[2 * i], poly[2 * i + 1]);
                    let (x2, y2) = (poly[2 * ((i + 1) % n)], poly[2 * ((i + 1) % n) + 1]);
                    if (y1 > py) != (y2 > py) && px < x1 + (py - y1) * (x2 - x1) / (y2 - y1) {
                        inside = !inside;
                    }
                }
            }
            bits.push(inside);
        }
    }
    Bitmask::new(cols, rows, bits).map_err(|e| e.to_string())
}

fn image_file_name(id: u64) -> String {
    format!("{IMAGE_DIR}/{id:06}.png")
}

/// Converts records to the on-disk schema. `class_names[i]` names class `i`.
pub fn to_annotation_file(records: &[DatasetRecord], class_names: &[String]) -> AnnotationFile {
    let mut file = AnnotationFile {
        categories: class_names.iter().enumerate().map(|(i, n)| CategoryEntry { id: i as u64 + 1, name: n.clone() }).collect(),
        ..Default::default()
    };
    let mut next_ann = 1;
    for r in records {
        let (w, h) = r.annotation.image_size;
        file.images.push(ImageEntry {
            id: r.id,
            file_name: image_file_name(r.id),
            width: w,
            height: h,
            split: Some(r.split.name().into()),
        });
        for inst in &r.annotation.instances {
            let b = inst.bbox;
            let (wf, hf) = (w as f64, h as f64);
            file.annotations.push(AnnotationEntry {
                id: next_ann,
                image_id: r.id,
                category_id: inst.class_id as u64 + 1,
                bbox: [b.x_min * wf, b.y_min * hf, (b.x_max - b.x_min) * wf, (b.y_max - b.y_min) * hf],
                mask: inst.mask.as_ref().map(MaskEntry::from_bitmask),
                segmentation: None,
                keypoints: inst
                    .keypoints
                    .as_ref()
                    .map(|kps| kps.iter().flat_map(|k| [k.x * wf, k.y * hf, if k.visible { 2.0 } else { 1.0 }]).collect()),
            });
            next_ann += 1;
        }
        for c in &r.annotation.captions {
            file.captions.push(CaptionEntry { image_id: r.id, caption: c.join(" ") });
        }
    }
    file
}

/// Writes `dir/images/*.png` and `dir/annotations.json`.
pub fn save_dataset(dir: &Path, records: &[DatasetRecord], class_names: &[String]) -> Result<()> {
    fs::create_dir_all(dir.join(IMAGE_DIR))?;
    for r in records {
        let img = &r.image;
        let bytes: Vec<u8> = img.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, bytes)
            .ok_or_else(|| Error::Shape("raster size does not match its pixels".into()))?;
        buf.save_with_format(dir.join(image_file_name(r.id)), image::ImageFormat::Png)?;
    }
    let file = to_annotation_file(records, class_names);
    fs::write(dir.join(ANNOTATION_FILE), serde_json::to_string_pretty(&file)? + "\n")?;
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadOptions {
    /// Keep the valid records and report the rest instead of failing.
    pub allow_partial: bool,
}

#[derive(Debug, Clone, Default)]
pub struct LoadedDataset {
    pub records: Vec<DatasetRecord>,
    pub class_names: Vec<String>,
    pub errors: Vec<LoadError>,
}

fn load_raster(path: &Path, width: u32, height: u32) -> std::result::Result<Raster, String> {
    let img = image::open(path).map_err(|e| e.to_string())?.to_rgb8();
    if img.width() != width || img.height() != height {
        return Err(format!("image is {}x{}, annotation says {width}x{height}", img.width(), img.height()));
    }
    let pixels = img.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
    Raster::new(height as usize, width as usize, pixels).map_err(|e| e.to_string())
}

fn convert_annotation(
    a: &AnnotationEntry,
    img: &ImageEntry,
    classes: &HashMap<u64, usize>,
) -> std::result::Result<Instance, String> {
    let class_id = *classes.get(&a.category_id).ok_or_else(|| format!("unknown category {}", a.category_id))?;
    let [x, y, w, h] = a.bbox;
    if !a.bbox.iter().all(|v| v.is_finite()) || w <= 0.0 || h <= 0.0 {
        return Err(format!("degenerate bbox {:?}", a.bbox));
    }
    let (iw, ih) = (img.width as f64, img.height as f64);
    if x < 0.0 || y < 0.0 || x + w > iw + 1e-9 || y + h > ih + 1e-9 {
        return Err(format!("bbox {:?} leaves the {}x{} image", a.bbox, img.width, img.height));
    }
    let bbox = BBox::new(x / iw, y / ih, ((x + w) / iw).min(1.0), ((y + h) / ih).min(1.0));
    let mask = match (&a.mask, &a.segmentation) {
        (Some(m), _) => Some(m.to_bitmask()?),
        (None, Some(polys)) => Some(rasterize_polygons(polys, a.bbox)?),
        (None, None) => None,
    };
    let keypoints = match &a.keypoints {
        None => None,
        Some(k) if k.len() % 3 != 0 => return Err(format!("{} keypoint values is not a multiple of 3", k.len())),
        Some(k) => Some(
            k.chunks(3)
                .map(|t| {
                    let visible = t[2] >= 2.0;
                    if visible && !(0.0..=iw).contains(&t[0]) || visible && !(0.0..=ih).contains(&t[1]) {
                        return Err(format!("visible keypoint ({}, {}) outside the image", t[0], t[1]));
                    }
                    Ok(Keypoint { x: (t[0] / iw).clamp(0.0, 1.0), y: (t[1] / ih).clamp(0.0, 1.0), visible })
                })
                .collect::<std::result::Result<Vec<_>, String>>()?,
        ),
    };
    Ok(Instance { bbox, class_id, mask, keypoints })
}

/// Reads a dataset directory. Every schema problem becomes an itemized
/// [`LoadError`]; with `allow_partial` the offending images are skipped,
/// otherwise the load fails listing all of them. An empty annotation file
/// yields an empty dataset.
pub fn load_dataset(dir: &Path, opts: LoadOptions) -> Result<LoadedDataset> {
    let text = fs::read_to_string(dir.join(ANNOTATION_FILE))?;
    if text.trim().is_empty() {
        return Ok(LoadedDataset::default());
    }
    let file: AnnotationFile = serde_json::from_str(&text)?;
    let classes: HashMap<u64, usize> = file.categories.iter().enumerate().map(|(i, c)| (c.id, i)).collect();
    let class_names = file.categories.iter().map(|c| c.name.clone()).collect();
    let mut errors = Vec::new();
    let mut by_image: BTreeMap<u64, (Vec<Instance>, Vec<Vec<String>>, bool)> = BTreeMap::new();
    let images: HashMap<u64, &ImageEntry> = file.images.iter().map(|i| (i.id, i)).collect();
    for img in &file.images {
        if by_image.insert(img.id, (Vec::new(), Vec::new(), true)).is_some() {
            errors.push(LoadError { record: format!("image:{}", img.id), message: "duplicate image id".into() });
        }
    }
    for a in &file.annotations {
        let record = format!("annotation:{}", a.id);
        let Some(img) = images.get(&a.image_id) else {
            errors.push(LoadError { record, message: format!("unknown image {}", a.image_id) });
            continue;
        };
        let slot = by_image.get_mut(&a.image_id).expect("registered above");
        match convert_annotation(a, img, &classes) {
            Ok(inst) => slot.0.push(inst),
            Err(message) => {
                slot.2 = false;
                errors.push(LoadError { record, message });
            }
        }
    }
    for c in &file.captions {
        match by_image.get_mut(&c.image_id) {
            Some(slot) => slot.1.push(c.caption.split_whitespace().map(String::from).collect()),
            None => errors.push(LoadError { record: format!("caption:image:{}", c.image_id), message: "unknown image".into() }),
        }
    }
    let mut records = Vec::new();
    for img in &file.images {
        let Some((instances, captions, ok)) = by_image.remove(&img.id) else { continue };
        if !ok {
            continue;
        }
        let record = format!("image:{}", img.id);
        let split = match img.split.as_deref().map(Split::parse).transpose() {
            Ok(s) => s.unwrap_or(Split::Train),
            Err(e) => {
                errors.push(LoadError { record, message: e.to_string() });
                continue;
            }
        };
        let image = match load_raster(&dir.join(&img.file_name), img.width, img.height) {
            Ok(r) => r,
            Err(message) => {
                errors.push(LoadError { record, message });
                continue;
            }
        };
        let annotation = SceneAnnotation { image_size: (img.width, img.height), instances, captions };
        records.push(DatasetRecord { id: img.id, image, annotation, split });
    }
    if !errors.is_empty() && !opts.allow_partial {
        return Err(Error::Dataset(errors));
    }
    Ok(LoadedDataset { records, class_names, errors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::shapes::{generate_dataset, ShapesWorldConfig};

    fn small() -> ShapesWorldConfig {
        ShapesWorldConfig { image_size: (64, 48), max_shapes: 4, ..Default::default() }
    }

    #[test]
    fn round_trip_preserves_records() {
        let cfg = small();
        let records = generate_dataset(&cfg, 4, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &records, &cfg.class_names()).unwrap();
        let loaded = load_dataset(dir.path(), LoadOptions::default()).unwrap();
        assert!(loaded.errors.is_empty());
        assert_eq!(loaded.class_names, cfg.class_names());
        assert_eq!(loaded.records.len(), records.len());
        for (a, b) in loaded.records.iter().zip(&records) {
            assert_eq!(a.image, b.image);
            assert_eq!(a.split, b.split);
            assert_eq!(a.annotation.captions, b.annotation.captions);
            for (x, y) in a.annotation.instances.iter().zip(&b.annotation.instances) {
                assert_eq!(x.mask, y.mask);
                assert_eq!(x.class_id, y.class_id);
                for (u, v) in x.bbox.coords().iter().zip(y.bbox.coords()) {
                    assert!((u - v).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn annotation_file_is_byte_identical_across_runs() {
        let cfg = small();
        let write = || {
            let dir = tempfile::tempdir().unwrap();
            save_dataset(dir.path(), &generate_dataset(&cfg, 3, 1).unwrap(), &cfg.class_names()).unwrap();
            fs::read(dir.path().join(ANNOTATION_FILE)).unwrap()
        };
        assert_eq!(write(), write());
    }

    fn write_json(dir: &Path, file: &AnnotationFile) {
        fs::create_dir_all(dir.join(IMAGE_DIR)).unwrap();
        fs::write(dir.join(ANNOTATION_FILE), serde_json::to_string(file).unwrap()).unwrap();
    }

    fn blank_png(dir: &Path, id: u64, w: u32, h: u32) {
        image::RgbImage::new(w, h).save(dir.join(image_file_name(id))).unwrap();
    }

    fn entry(id: u64, w: u32, h: u32) -> ImageEntry {
        ImageEntry { id, file_name: image_file_name(id), width: w, height: h, split: None }
    }

    fn ann(id: u64, image_id: u64, bbox: [f64; 4]) -> AnnotationEntry {
        AnnotationEntry { id, image_id, category_id: 7, bbox, mask: None, segmentation: None, keypoints: None }
    }

    #[test]
    fn boxes_are_normalized() {
        let dir = tempfile::tempdir().unwrap();
        let file = AnnotationFile {
            images: vec![entry(1, 100, 200)],
            categories: vec![CategoryEntry { id: 7, name: "thing".into() }],
            annotations: vec![ann(1, 1, [10.0, 20.0, 30.0, 40.0])],
            captions: vec![],
        };
        write_json(dir.path(), &file);
        blank_png(dir.path(), 1, 100, 200);
        let loaded = load_dataset(dir.path(), LoadOptions::default()).unwrap();
        let rec = &loaded.records[0];
        let b = rec.annotation.instances[0].bbox.coords();
        for (u, v) in b.iter().zip([0.10, 0.10, 0.40, 0.30]) {
            assert!((u - v).abs() < 1e-12);
        }
        assert!(rec.annotation.captions.is_empty());
        assert_eq!(rec.annotation.instances[0].class_id, 0);
    }

    #[test]
    fn empty_file_is_an_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(ANNOTATION_FILE), "").unwrap();
        assert!(load_dataset(dir.path(), LoadOptions::default()).unwrap().records.is_empty());
    }

    #[test]
    fn schema_errors_are_itemized() {
        let dir = tempfile::tempdir().unwrap();
        let mut bad_kp = ann(3, 2, [1.0, 1.0, 5.0, 5.0]);
        bad_kp.keypoints = Some(vec![1.0, 2.0]);
        let file = AnnotationFile {
            images: vec![entry(1, 20, 20), entry(2, 20, 20), entry(3, 20, 20)],
            categories: vec![CategoryEntry { id: 7, name: "thing".into() }],
            annotations: vec![ann(1, 1, [0.0, 0.0, 0.0, 4.0]), ann(2, 9, [0.0, 0.0, 4.0, 4.0]), bad_kp, ann(4, 3, [2.0, 2.0, 4.0, 4.0])],
            captions: vec![CaptionEntry { image_id: 3, caption: "a red circle".into() }],
        };
        write_json(dir.path(), &file);
        for id in 1..=3 {
            blank_png(dir.path(), id, 20, 20);
        }
        let Err(Error::Dataset(errs)) = load_dataset(dir.path(), LoadOptions::default()) else { panic!("expected dataset error") };
        let ids: Vec<&str> = errs.iter().map(|e| e.record.as_str()).collect();
        assert_eq!(ids, ["annotation:1", "annotation:2", "annotation:3"]);
        let partial = load_dataset(dir.path(), LoadOptions { allow_partial: true }).unwrap();
        assert_eq!(partial.records.len(), 1);
        assert_eq!(partial.records[0].id, 3);
        assert_eq!(partial.records[0].annotation.captions, vec![vec!["a", "red", "circle"]]);
        assert_eq!(partial.errors.len(), 3);
    }

    #[test]
    fn polygons_rasterize_inside_the_box() {
        let square = rasterize_polygons(&[vec![2.0, 2.0, 6.0, 2.0, 6.0, 6.0, 2.0, 6.0]], [2.0, 2.0, 4.0, 4.0]).unwrap();
        assert_eq!(square, Bitmask::filled(4, 4, true));
        let tri = rasterize_polygons(&[vec![0.0, 0.0, 8.0, 0.0, 0.0, 8.0]], [0.0, 0.0, 8.0, 8.0]).unwrap();
        assert_eq!(tri.count_ones(), 28);
        assert!(rasterize_polygons(&[vec![0.0, 0.0, 1.0, 1.0]], [0.0, 0.0, 2.0, 2.0]).is_err());
    }
}
