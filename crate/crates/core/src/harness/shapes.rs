//! Procedural "shapes world" scenes with exact annotations.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{BBox, Bitmask, Instance, Keypoint, SceneAnnotation};
use crate::error::{Error, Result};
use crate::model::Raster;
use crate::vocab::VocabSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Bar,
    Stickman,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle, ShapeKind::Bar, ShapeKind::Stickman];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Bar => "bar",
            ShapeKind::Stickman => "stickman",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown shape `{name}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Color {
    pub name: String,
    pub rgb: [f32; 3],
}

/// Stickman joints, in keypoint order.
pub const STICKMAN_JOINTS: [&str; 5] = ["head", "left_hand", "right_hand", "left_foot", "right_foot"];

const RELATIONS: [&str; 5] = ["left", "right", "of", "above", "below"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapesWorldConfig {
    /// `(width, height)` in pixels.
    pub image_size: (u32, u32),
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Class `i` is `classes[i]`.
    pub classes: Vec<ShapeKind>,
    pub palette: Vec<Color>,
    /// Shape extent as a fraction of the shorter image side.
    pub min_extent: f64,
    pub max_extent: f64,
    /// Captions per image when at least two shapes are present.
    pub captions_per_image: usize,
    pub seed: u64,
}

impl Default for ShapesWorldConfig {
    fn default() -> Self {
        let color = |name: &str, rgb: [f32; 3]| Color { name: name.into(), rgb };
        ShapesWorldConfig {
            image_size: (256, 256),
            min_shapes: 1,
            max_shapes: 8,
            classes: ShapeKind::ALL.to_vec(),
            palette: vec![
                color("red", [0.9, 0.12, 0.1]),
                color("green", [0.12, 0.8, 0.2]),
                color("blue", [0.15, 0.3, 0.95]),
                color("yellow", [0.95, 0.88, 0.1]),
                color("magenta", [0.88, 0.15, 0.85]),
                color("cyan", [0.1, 0.85, 0.9]),
            ],
            min_extent: 0.12,
            max_extent: 0.3,
            captions_per_image: 3,
            seed: 0,
        }
    }
}

impl ShapesWorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        let (w, h) = self.image_size;
        if w < 32 || h < 32 {
            return bad("shapes world images must be at least 32 x 32");
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return bad("need 1 <= min_shapes <= max_shapes");
        }
        if self.classes.is_empty() || self.palette.is_empty() {
            return bad("need at least one class and one color");
        }
        let mut seen = self.classes.clone();
        seen.dedup();
        if seen.len() != self.classes.len() {
            return bad("duplicate shape classes");
        }
        if !(0.0 < self.min_extent && self.min_extent <= self.max_extent && self.max_extent <= 0.9) {
            return bad("need 0 < min_extent <= max_extent <= 0.9");
        }
        if self.captions_per_image == 0 {
            return bad("captions_per_image must be positive");
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|k| k.name().to_string()).collect()
    }

    /// Class id of the stickman, the only class with keypoints.
    pub fn person_class(&self) -> Option<usize> {
        self.classes.iter().position(|&k| k == ShapeKind::Stickman)
    }

    /// Every word the caption grammar can emit.
    pub fn caption_words(&self) -> Vec<String> {
        let mut words = vec!["a".to_string()];
        words.extend(self.palette.iter().map(|c| c.name.clone()));
        words.extend(self.class_names());
        words.extend(RELATIONS.iter().map(|w| w.to_string()));
        words
    }

    pub fn vocab_spec(&self, num_bins: usize) -> VocabSpec {
        VocabSpec { num_bins, num_classes: self.classes.len(), words: self.caption_words() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            _ => Err(Error::Config(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub id: u64,
    pub image: Raster,
    pub annotation: SceneAnnotation,
    pub split: Split,
}

struct Placed {
    kind: ShapeKind,
    color: usize,
    /// Pixel footprint: `(x0, y0, w, h)` and a row-major coverage grid.
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
    cover: Vec<bool>,
    keypoints: Vec<(f64, f64)>,
}

impl Placed {
    fn center(&self) -> (f64, f64) {
        (self.x0 as f64 + self.w as f64 / 2.0, self.y0 as f64 + self.h as f64 / 2.0)
    }
}

fn dist_to_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

/// Rasterizes `kind` into a `w × h` frame. Returns the coverage grid and
/// keypoints in frame pixel coordinates.
fn draw(kind: ShapeKind, w: usize, h: usize) -> (Vec<bool>, Vec<(f64, f64)>) {
    let (wf, hf) = (w as f64, h as f64);
    let mut keypoints = Vec::new();
    let test: Box<dyn Fn(f64, f64) -> bool> = match kind {
        ShapeKind::Circle => {
            let r = wf.min(hf) / 2.0;
            Box::new(move |x, y| (x - wf / 2.0).powi(2) + (y - hf / 2.0).powi(2) <= r * r)
        }
        ShapeKind::Square | ShapeKind::Bar => Box::new(|_, _| true),
        ShapeKind::Triangle => Box::new(move |x, y| {
            // Apex at top centre, base along the bottom edge.
            let t = y / hf;
            (x - wf / 2.0).abs() <= t * wf / 2.0
        }),
        ShapeKind::Stickman => {
            let t = (hf * 0.07).max(1.5);
            let head_r = hf * 0.14;
            let head = (wf / 2.0, head_r + 0.5);
            let neck = (wf / 2.0, 2.0 * head_r);
            let hip = (wf / 2.0, hf * 0.62);
            let shoulder = (wf / 2.0, hf * 0.38);
            let inset = t / 2.0;
            let lhand = (inset, hf * 0.5);
            let rhand = (wf - inset, hf * 0.5);
            let lfoot = (inset, hf - inset);
            let rfoot = (wf - inset, hf - inset);
            keypoints = vec![head, lhand, rhand, lfoot, rfoot];
            let segs = [(neck, hip), (shoulder, lhand), (shoulder, rhand), (hip, lfoot), (hip, rfoot)];
            Box::new(move |x, y| {
                (x - head.0).powi(2) + (y - head.1).powi(2) <= head_r * head_r
                    || segs.iter().any(|&(a, b)| dist_to_segment((x, y), a, b) <= t / 2.0)
            })
        }
    };
    let mut cover = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            cover[y * w + x] = test(x as f64 + 0.5, y as f64 + 0.5);
        }
    }
    (cover, keypoints)
}

fn frame_size(kind: ShapeKind, extent: f64, rng: &mut impl Rng) -> (usize, usize) {
    let e = extent.round().max(6.0) as usize;
    match kind {
        ShapeKind::Circle | ShapeKind::Square => (e, e),
        ShapeKind::Triangle => (e, (extent * 0.9).round().max(6.0) as usize),
        ShapeKind::Bar => {
            let thin = (extent / 4.0).round().max(3.0) as usize;
            if rng.gen_bool(0.5) {
                (e, thin)
            } else {
                (thin, e)
            }
        }
        ShapeKind::Stickman => ((extent * 0.6).round().max(6.0) as usize, e),
    }
}

/// Tight box of the covered pixels, cropping the grid to it.
fn crop(cover: &[bool], w: usize, h: usize) -> (usize, usize, usize, usize, Vec<bool>) {
    let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
    for y in 0..h {
        for x in 0..w {
            if cover[y * w + x] {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    let (cw, ch) = (x1 + 1 - x0, y1 + 1 - y0);
    let mut out = Vec::with_capacity(cw * ch);
    for y in y0..=y1 {
        out.extend_from_slice(&cover[y * w + x0..y * w + x1 + 1]);
    }
    (x0, y0, cw, ch, out)
}

fn overlaps(a: &Placed, x0: usize, y0: usize, w: usize, h: usize, margin: usize) -> bool {
    x0 < a.x0 + a.w + margin && a.x0 < x0 + w + margin && y0 < a.y0 + a.h + margin && a.y0 < y0 + h + margin
}

fn relation(a: &Placed, b: &Placed) -> &'static [&'static str] {
    let ((ax, ay), (bx, by)) = (a.center(), b.center());
    let (dx, dy) = (ax - bx, ay - by);
    if dx.abs() >= dy.abs() {
        if dx < 0.0 {
            &["left", "of"]
        } else {
            &["right", "of"]
        }
    } else if dy < 0.0 {
        &["above"]
    } else {
        &["below"]
    }
}

/// One scene. Shapes never overlap, so every mask is fully visible; the
/// pixel values are quantized to 8 bits so a PNG round-trip is lossless.
pub fn generate_scene(cfg: &ShapesWorldConfig, id: u64, split: Split, rng: &mut impl Rng) -> Result<DatasetRecord> {
    cfg.validate()?;
    let (w, h) = (cfg.image_size.0 as usize, cfg.image_size.1 as usize);
    let side = w.min(h) as f64;
    let target = rng.gen_range(cfg.min_shapes..=cfg.max_shapes);
    let mut placed: Vec<Placed> = Vec::new();
    let mut attempts = 0;
    while placed.len() < target && attempts < 200 {
        attempts += 1;
        let kind = *cfg.classes.choose(rng).expect("validated non-empty");
        let extent = rng.gen_range(cfg.min_extent..=cfg.max_extent) * side;
        let (fw, fh) = frame_size(kind, extent, rng);
        if fw + 2 > w || fh + 2 > h {
            continue;
        }
        let fx = rng.gen_range(1..=w - fw - 1);
        let fy = rng.gen_range(1..=h - fh - 1);
        let (cover, kps) = draw(kind, fw, fh);
        let (cx, cy, cw, ch, cover) = crop(&cover, fw, fh);
        let (x0, y0) = (fx + cx, fy + cy);
        if placed.iter().any(|p| overlaps(p, x0, y0, cw, ch, 2)) {
            continue;
        }
        let keypoints = kps.iter().map(|&(kx, ky)| (fx as f64 + kx, fy as f64 + ky)).collect();
        let color = rng.gen_range(0..cfg.palette.len());
        placed.push(Placed { kind, color, x0, y0, w: cw, h: ch, cover, keypoints });
    }

    let base: f32 = rng.gen_range(0.05..0.25);
    let mut pixels = Vec::with_capacity(w * h * 3);
    for _ in 0..w * h * 3 {
        pixels.push(base + rng.gen_range(-0.03f32..0.03));
    }
    let mut instances = Vec::with_capacity(placed.len());
    for p in &placed {
        let rgb = cfg.palette[p.color].rgb;
        for y in 0..p.h {
            for x in 0..p.w {
                if p.cover[y * p.w + x] {
                    let o = ((p.y0 + y) * w + p.x0 + x) * 3;
                    pixels[o..o + 3].copy_from_slice(&rgb);
                }
            }
        }
        let bbox = BBox::new(
            p.x0 as f64 / w as f64,
            p.y0 as f64 / h as f64,
            (p.x0 + p.w) as f64 / w as f64,
            (p.y0 + p.h) as f64 / h as f64,
        );
        let keypoints = (!p.keypoints.is_empty())
            .then(|| p.keypoints.iter().map(|&(x, y)| Keypoint { x: x / w as f64, y: y / h as f64, visible: true }).collect());
        let class_id = cfg.classes.iter().position(|&k| k == p.kind).expect("drawn from classes");
        instances.push(Instance { bbox, class_id, mask: Some(Bitmask::new(p.w, p.h, p.cover.clone())?), keypoints });
    }
    for v in &mut pixels {
        *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }

    let describe = |p: &Placed| [cfg.palette[p.color].name.clone(), p.kind.name().to_string()];
    let mut captions = Vec::new();
    if placed.len() == 1 {
        let [c, s] = describe(&placed[0]);
        captions.push(vec!["a".into(), c, s]);
    } else {
        let mut pairs: Vec<(usize, usize)> =
            (0..placed.len()).flat_map(|i| (0..placed.len()).filter(move |&j| j != i).map(move |j| (i, j))).collect();
        pairs.shuffle(rng);
        for &(i, j) in pairs.iter().take(cfg.captions_per_image) {
            let [ci, si] = describe(&placed[i]);
            let [cj, sj] = describe(&placed[j]);
            let mut words = vec!["a".to_string(), ci, si];
            words.extend(relation(&placed[i], &placed[j]).iter().map(|w| w.to_string()));
            words.extend(["a".to_string(), cj, sj]);
            captions.push(words);
        }
    }
    let annotation = SceneAnnotation { image_size: cfg.image_size, instances, captions };
    Ok(DatasetRecord { id, image: Raster::new(h, w, pixels)?, annotation, split })
}

/// `train` records followed by `val` records; record `i` draws from its own
/// ChaCha stream so any subset can be regenerated independently.
pub fn generate_dataset(cfg: &ShapesWorldConfig, train: usize, val: usize) -> Result<Vec<DatasetRecord>> {
    (0..train + val)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            let split = if i < train { Split::Train } else { Split::Val };
            generate_scene(cfg, i as u64, split, &mut rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_shape_caption_names_it() {
        let cfg = ShapesWorldConfig { min_shapes: 1, max_shapes: 1, ..Default::default() };
        for seed in 0..20 {
            let r = generate_scene(&cfg, 0, Split::Train, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(r.annotation.instances.len(), 1);
            let name = cfg.classes[r.annotation.instances[0].class_id].name();
            assert_eq!(r.annotation.captions, vec![vec!["a".to_string(), r.annotation.captions[0][1].clone(), name.to_string()]]);
        }
    }

    #[test]
    fn same_seed_same_pixels() {
        let cfg = ShapesWorldConfig::default();
        let a = generate_dataset(&cfg, 3, 1).unwrap();
        let b = generate_dataset(&cfg, 3, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[3].split, Split::Val);
    }

    #[test]
    fn scenes_satisfy_annotation_invariants() {
        let cfg = ShapesWorldConfig { image_size: (96, 80), ..Default::default() };
        let words = cfg.caption_words();
        for seed in 0..1000 {
            let r = generate_scene(&cfg, seed, Split::Train, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let ann = &r.annotation;
            ann.validate(cfg.classes.len()).unwrap();
            assert!(!ann.instances.is_empty() && ann.instances.len() <= cfg.max_shapes);
            assert!(!ann.captions.is_empty());
            assert!(ann.captions.iter().flatten().all(|w| words.contains(w)));
            for inst in &ann.instances {
                let mask = inst.mask.as_ref().unwrap();
                assert!(mask.count_ones() > 0);
                assert_eq!(mask.width, (inst.bbox.width() * 96.0).round() as usize);
                assert_eq!(mask.height, (inst.bbox.height() * 80.0).round() as usize);
                let stick = cfg.classes[inst.class_id] == ShapeKind::Stickman;
                assert_eq!(inst.keypoints.is_some(), stick);
                for kp in inst.keypoints.iter().flatten() {
                    assert!(inst.bbox.x_min <= kp.x && kp.x <= inst.bbox.x_max);
                    assert!(inst.bbox.y_min <= kp.y && kp.y <= inst.bbox.y_max);
                }
            }
        }
    }

    #[test]
    fn relations_follow_geometry() {
        let cfg = ShapesWorldConfig { min_shapes: 2, max_shapes: 2, captions_per_image: 2, ..Default::default() };
        for seed in 0..50 {
            let r = generate_scene(&cfg, 0, Split::Train, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let ann = &r.annotation;
            if ann.instances.len() < 2 || ann.instances[0].class_id == ann.instances[1].class_id {
                continue;
            }
            for cap in &ann.captions {
                let first = cfg.classes.iter().position(|k| k.name() == cap[2]).unwrap();
                let subject = ann.instances.iter().find(|i| i.class_id == first).unwrap();
                let other = ann.instances.iter().find(|i| !std::ptr::eq(*i, subject)).unwrap();
                let (sx, sy) = ((subject.bbox.x_min + subject.bbox.x_max) / 2.0, (subject.bbox.y_min + subject.bbox.y_max) / 2.0);
                let (ox, oy) = ((other.bbox.x_min + other.bbox.x_max) / 2.0, (other.bbox.y_min + other.bbox.y_max) / 2.0);
                match cap[3].as_str() {
                    "left" => assert!(sx <= ox),
                    "right" => assert!(sx >= ox),
                    "above" => assert!(sy <= oy),
                    "below" => assert!(sy >= oy),
                    w => panic!("unexpected relation {w}"),
                }
            }
        }
    }
}
