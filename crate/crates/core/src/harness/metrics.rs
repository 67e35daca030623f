//! Detection/segmentation AP, keypoint PCK and corpus BLEU.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::codec::{BBox, Bitmask, Keypoint};

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// A prediction for AP: payload, class and confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored<T> {
    pub item: T,
    pub class_id: usize,
    pub score: f64,
}

/// A ground-truth object for AP.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth<T> {
    pub item: T,
    pub class_id: usize,
}

/// Predictions and ground truth of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEval<P, G> {
    pub preds: Vec<Scored<P>>,
    pub gts: Vec<Truth<G>>,
}

/// All-point interpolated area under a precision/recall curve given
/// per-detection TP flags in descending score order.
pub fn all_point_ap(tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        recall.push(hits as f64 / n_gt as f64);
        precision.push(hits as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev) * p;
        prev = *r;
    }
    ap
}

/// Mean over ground-truth classes of the per-class AP at `threshold`.
///
/// Predictions are visited by descending score (stable on ties); each one
/// claims the unmatched ground truth of its class and image with the
/// highest IoU, provided it reaches `threshold`. Classes that appear only
/// in predictions are ignored. Returns 0 when there is no ground truth.
pub fn average_precision<P, G>(images: &[ImageEval<P, G>], threshold: f64, iou: impl Fn(&P, &G) -> f64) -> f64 {
    let per_class = per_class_ap(images, threshold, &iou);
    if per_class.is_empty() {
        return 0.0;
    }
    per_class.values().sum::<f64>() / per_class.len() as f64
}

pub fn per_class_ap<P, G>(images: &[ImageEval<P, G>], threshold: f64, iou: impl Fn(&P, &G) -> f64) -> HashMap<usize, f64> {
    let mut n_gt: HashMap<usize, usize> = HashMap::new();
    for im in images {
        for g in &im.gts {
            *n_gt.entry(g.class_id).or_default() += 1;
        }
    }
    let mut out = HashMap::new();
    for (&class, &count) in &n_gt {
        let mut order: Vec<(usize, usize)> = Vec::new();
        for (i, im) in images.iter().enumerate() {
            for (j, p) in im.preds.iter().enumerate() {
                if p.class_id == class {
                    order.push((i, j));
                }
            }
        }
        order.sort_by(|a, b| images[b.0].preds[b.1].score.total_cmp(&images[a.0].preds[a.1].score));
        let mut taken: Vec<Vec<bool>> = images.iter().map(|im| vec![false; im.gts.len()]).collect();
        let mut tp = Vec::with_capacity(order.len());
        for (i, j) in order {
            let pred = &images[i].preds[j];
            let mut best: Option<(usize, f64)> = None;
            for (k, g) in images[i].gts.iter().enumerate() {
                if g.class_id != class || taken[i][k] {
                    continue;
                }
                let v = iou(&pred.item, &g.item);
                if v >= threshold && best.is_none_or(|(_, b)| v > b) {
                    best = Some((k, v));
                }
            }
            if let Some((k, _)) = best {
                taken[i][k] = true;
            }
            tp.push(best.is_some());
        }
        out.insert(class, all_point_ap(&tp, count));
    }
    out
}

pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

/// Detection AP at each threshold.
pub fn eval_detection(images: &[ImageEval<BBox, BBox>], thresholds: &[f64]) -> Vec<f64> {
    thresholds.iter().map(|&t| average_precision(images, t, box_iou)).collect()
}

/// A mask pasted into image pixels: the covered pixel rectangle and its bits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelMask {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
    pub area: usize,
}

impl PixelMask {
    /// Nearest-neighbour paste of a box-aligned `mask` into the pixels whose
    /// centres fall inside `bbox`, for an image of `(width, height)`.
    pub fn paste(mask: &Bitmask, bbox: &BBox, image_size: (u32, u32)) -> PixelMask {
        let (w, h) = (image_size.0 as f64, image_size.1 as f64);
        let span = |lo: f64, hi: f64, n: f64| {
            let a = (lo * n - 0.5).ceil().max(0.0) as usize;
            let b = ((hi * n - 0.5).ceil().min(n)) as usize;
            (a, b.max(a))
        };
        let (x0, x1) = span(bbox.x_min, bbox.x_max, w);
        let (y0, y1) = span(bbox.y_min, bbox.y_max, h);
        let (bw, bh) = ((bbox.x_max - bbox.x_min) * w, (bbox.y_max - bbox.y_min) * h);
        let mut bits = Vec::with_capacity((x1 - x0) * (y1 - y0));
        for y in y0..y1 {
            let sy = (((y as f64 + 0.5 - bbox.y_min * h) / bh * mask.height as f64) as usize).min(mask.height - 1);
            for x in x0..x1 {
                let sx = (((x as f64 + 0.5 - bbox.x_min * w) / bw * mask.width as f64) as usize).min(mask.width - 1);
                bits.push(mask.get(sx, sy));
            }
        }
        let area = bits.iter().filter(|&&b| b).count();
        PixelMask { x0, y0, width: x1 - x0, height: y1 - y0, bits, area }
    }

    fn at(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && y >= self.y0 && x < self.x0 + self.width && y < self.y0 + self.height && self.bits[(y - self.y0) * self.width + x - self.x0]
    }

    pub fn iou(&self, other: &PixelMask) -> f64 {
        let (x0, y0) = (self.x0.max(other.x0), self.y0.max(other.y0));
        let x1 = (self.x0 + self.width).min(other.x0 + other.width);
        let y1 = (self.y0 + self.height).min(other.y0 + other.height);
        let mut inter = 0;
        for y in y0..y1 {
            for x in x0..x1 {
                inter += (self.at(x, y) && other.at(x, y)) as usize;
            }
        }
        let union = self.area + other.area - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Mask AP at `threshold`, with IoU measured between pasted masks.
pub fn eval_segmentation(images: &[ImageEval<PixelMask, PixelMask>], threshold: f64) -> f64 {
    average_precision(images, threshold, |p, g| p.iou(g))
}

/// Correct and visible keypoint tallies.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PckCounts {
    pub correct: usize,
    pub visible: usize,
}

impl PckCounts {
    pub fn add(&mut self, other: PckCounts) {
        self.correct += other.correct;
        self.visible += other.visible;
    }

    /// `correct / visible`; 0 when nothing is visible.
    pub fn value(&self) -> f64 {
        if self.visible == 0 {
            0.0
        } else {
            self.correct as f64 / self.visible as f64
        }
    }
}

/// PCK tallies for one person. A visible ground-truth keypoint is correct
/// when the prediction lies within `alpha · max(box_w, box_h)`, measured in
/// pixels. A missing prediction (`None`) makes every visible joint wrong.
pub fn eval_keypoints(pred: Option<&[(f64, f64)]>, gt_box: &BBox, gt: &[Keypoint], image_size: (u32, u32), alpha: f64) -> PckCounts {
    let (w, h) = (image_size.0 as f64, image_size.1 as f64);
    let radius = alpha * (gt_box.width() * w).max(gt_box.height() * h);
    let mut counts = PckCounts::default();
    for (k, g) in gt.iter().enumerate() {
        if !g.visible {
            continue;
        }
        counts.visible += 1;
        if let Some(&(x, y)) = pred.and_then(|p| p.get(k)) {
            let d = ((x - g.x) * w).hypot((y - g.y) * h);
            counts.correct += (d <= radius) as usize;
        }
    }
    counts
}

/// Matches ground-truth boxes to scored predictions: predictions by
/// descending score each claim the free gt with highest IoU ≥ `threshold`.
/// Returns, per gt, the index of its prediction.
pub fn match_boxes(preds: &[(BBox, f64)], gts: &[BBox], threshold: f64) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].1.total_cmp(&preds[a].1));
    let mut out = vec![None; gts.len()];
    for p in order {
        let best = gts
            .iter()
            .enumerate()
            .filter(|(k, _)| out[*k].is_none())
            .map(|(k, g)| (k, preds[p].0.iou(g)))
            .filter(|&(_, v)| v >= threshold)
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        if let Some((k, _)) = best {
            out[k] = Some(p);
        }
    }
    out
}

/// Running n-gram statistics for corpus BLEU.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BleuStats {
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<S: AsRef<str>>(words: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut m = HashMap::new();
    if words.len() >= n {
        for win in words.windows(n) {
            *m.entry(win.iter().map(|w| w.as_ref()).collect()).or_default() += 1;
        }
    }
    m
}

impl BleuStats {
    /// Adds one hypothesis against its references: clipped n-gram matches
    /// and the reference length closest to the hypothesis (shorter on ties).
    pub fn add<S: AsRef<str>, R: AsRef<str>>(&mut self, hyp: &[S], refs: &[Vec<R>]) {
        for n in 1..=4 {
            let h = ngram_counts(hyp, n);
            let mut max_ref: HashMap<Vec<&str>, usize> = HashMap::new();
            for r in refs {
                for (g, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_default();
                    *e = (*e).max(c);
                }
            }
            self.matches[n - 1] += h.iter().map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum::<usize>();
            self.totals[n - 1] += hyp.len().saturating_sub(n - 1);
        }
        self.hyp_len += hyp.len();
        self.ref_len += refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(hyp.len()), l))
            .unwrap_or(0);
    }

    /// Geometric mean of the four modified precisions times the brevity
    /// penalty; 0 if any precision is 0. No smoothing.
    pub fn score(&self) -> f64 {
        if self.hyp_len == 0 || self.matches.contains(&0) {
            return 0.0;
        }
        let log_p: f64 = (0..4).map(|n| (self.matches[n] as f64 / self.totals[n] as f64).ln()).sum::<f64>() / 4.0;
        let (c, r) = (self.hyp_len as f64, self.ref_len as f64);
        let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
        bp * log_p.exp()
    }
}

/// BLEU@4 of a single hypothesis.
pub fn bleu4<S: AsRef<str>, R: AsRef<str>>(hyp: &[S], refs: &[Vec<R>]) -> f64 {
    let mut s = BleuStats::default();
    s.add(hyp, refs);
    s.score()
}
