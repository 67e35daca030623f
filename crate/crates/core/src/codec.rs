//! Annotation ⇄ token-sequence conversion for the four tasks.
//!
//! Body layouts:
//!
//! * detection: `N` slots of `[x_min, y_min, x_max, y_max, class]`; ground
//!   truth is injected into a sequence of random noise objects;
//! * segmentation: `M × M` row-major `<Foreground>`/`<Background>` tokens,
//!   prompted by `[<Segmentation>, box, class]`;
//! * keypoint: `K` triplets `[x, y, visibility]`, prompted by
//!   `[<Keypoint>, box, class]`;
//! * captioning: word tokens padded or truncated to a fixed length.

use ndarray::ArrayView2;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{dequantize_coord, quantize_coord, Special, TaskKind, TokenId, TokenKind, Vocab};

/// Axis-aligned box in normalized `[0, 1]` image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        BBox { x_min, y_min, x_max, y_max }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let w = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let h = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        let inter = w * h;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn is_valid(&self) -> bool {
        self.coords().iter().all(|c| c.is_finite() && (0.0..=1.0).contains(c))
            && self.x_min < self.x_max
            && self.y_min < self.y_max
    }

    fn validate(&self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(Error::Annotation(format!("invalid box {self:?}")))
        }
    }
}

/// Binary grid, row-major. For instance masks the grid is aligned to the box.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bitmask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl Bitmask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 || bits.len() != width * height {
            return Err(Error::Annotation(format!(
                "bitmask {width}x{height} with {} bits",
                bits.len()
            )));
        }
        Ok(Bitmask { width, height, bits })
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Bitmask { width, height, bits: vec![value; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    /// Nearest-neighbour resample to `width × height` (cell centers).
    pub fn resample(&self, width: usize, height: usize) -> Bitmask {
        let mut bits = Vec::with_capacity(width * height);
        for r in 0..height {
            let sy = (((r as f64 + 0.5) * self.height as f64 / height as f64) as usize).min(self.height - 1);
            for c in 0..width {
                let sx = (((c as f64 + 0.5) * self.width as f64 / width as f64) as usize).min(self.width - 1);
                bits.push(self.get(sx, sy));
            }
        }
        Bitmask { width, height, bits }
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// A keypoint in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub bbox: BBox,
    pub class_id: usize,
    /// Box-aligned mask.
    pub mask: Option<Bitmask>,
    pub keypoints: Option<Vec<Keypoint>>,
}

/// Ground truth for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneAnnotation {
    /// `(width, height)` in pixels.
    pub image_size: (u32, u32),
    pub instances: Vec<Instance>,
    pub captions: Vec<Vec<String>>,
}

impl SceneAnnotation {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        for (i, inst) in self.instances.iter().enumerate() {
            inst.bbox
                .validate()
                .map_err(|e| Error::Annotation(format!("instance {i}: {e}")))?;
            if inst.class_id >= num_classes {
                return Err(Error::Annotation(format!(
                    "instance {i}: class {} >= {num_classes}",
                    inst.class_id
                )));
            }
            for (k, kp) in inst.keypoints.iter().flatten().enumerate() {
                if kp.visible && !((0.0..=1.0).contains(&kp.x) && (0.0..=1.0).contains(&kp.y)) {
                    return Err(Error::Annotation(format!("instance {i}: visible keypoint {k} outside image")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    /// Detection slots `N`.
    pub num_slots: usize,
    /// Segmentation mask side `M`.
    pub mask_side: usize,
    pub num_keypoints: usize,
    pub caption_len: usize,
    pub caption_augment: bool,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig { num_slots: 100, mask_side: 16, num_keypoints: 5, caption_len: 20, caption_augment: true }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_slots < 1 || self.mask_side < 2 || self.caption_len < 2 {
            return Err(Error::Config(format!("codec config out of range: {self:?}")));
        }
        Ok(())
    }

    pub fn body_len(&self, task: TaskKind) -> usize {
        match task {
            TaskKind::Detection => 5 * self.num_slots,
            TaskKind::Segmentation => self.mask_side * self.mask_side,
            TaskKind::Keypoint => 3 * self.num_keypoints,
            TaskKind::Captioning => self.caption_len,
        }
    }

    pub fn prompt_len(&self, task: TaskKind) -> usize {
        match task {
            TaskKind::Detection | TaskKind::Captioning => 1,
            TaskKind::Segmentation | TaskKind::Keypoint => 6,
        }
    }

    /// Longest prompt + body over all tasks.
    pub fn max_sequence_len(&self) -> usize {
        TaskKind::ALL
            .iter()
            .map(|&t| self.prompt_len(t) + self.body_len(t))
            .max()
            .unwrap_or(0)
    }
}

/// Prompt plus body tokens for one task instance.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSequence {
    pub task: TaskKind,
    pub prompt: Vec<TokenId>,
    /// Target body tokens.
    pub body: Vec<TokenId>,
    /// `false` positions are excluded from the loss.
    pub supervise: Vec<bool>,
    /// Detection only: which slots hold injected ground truth.
    pub slot_is_gt: Vec<bool>,
    /// Detection only: the noise sequence the ground truth was injected into.
    pub filler: Vec<TokenId>,
    /// Captioning only: `(position, replacement)` applied to the input view.
    pub augmented: Option<(usize, TokenId)>,
}

impl TaskSequence {
    pub fn body_len(&self) -> usize {
        self.body.len()
    }

    /// Body as fed to the decoder before masking (captioning augmentation applied).
    pub fn input_body(&self) -> Vec<TokenId> {
        let mut body = self.body.clone();
        if let Some((pos, tok)) = self.augmented {
            body[pos] = tok;
        }
        body
    }

    /// Ground-truth slots of a detection sequence as `(slot, tokens)`.
    pub fn gt_objects(&self) -> Vec<(usize, [TokenId; 5])> {
        self.slot_is_gt
            .iter()
            .enumerate()
            .filter(|(_, &gt)| gt)
            .map(|(s, _)| {
                let mut obj = [0; 5];
                obj.copy_from_slice(&self.body[5 * s..5 * s + 5]);
                (s, obj)
            })
            .collect()
    }
}

/// A decoded detection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

/// Decoded segmentation mask (side × side).
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedMask {
    pub side: usize,
    pub soft: Vec<f64>,
    pub mask: Bitmask,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictedKeypoint {
    pub x: f64,
    pub y: f64,
    /// `p(<Visible>) / (p(<Visible>) + p(<Invisible>))`.
    pub visibility: f64,
}

/// Counters for tokens the decoders had to skip or repair.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeStats {
    pub dropped_slots: usize,
    pub skipped_tokens: usize,
}

impl DecodeStats {
    pub fn merge(&mut self, other: DecodeStats) {
        self.dropped_slots += other.dropped_slots;
        self.skipped_tokens += other.skipped_tokens;
    }
}

/// Encoders and decoders bound to a vocabulary and codec configuration.
#[derive(Debug, Clone)]
pub struct Codec {
    pub vocab: Vocab,
    pub config: CodecConfig,
}

impl Codec {
    pub fn new(vocab: Vocab, config: CodecConfig) -> Result<Self> {
        config.validate()?;
        Ok(Codec { vocab, config })
    }

    fn box_tokens(&self, b: &BBox) -> Result<[TokenId; 4]> {
        Ok([
            self.vocab.quantize(b.x_min)?,
            self.vocab.quantize(b.y_min)?,
            self.vocab.quantize(b.x_max)?,
            self.vocab.quantize(b.y_max)?,
        ])
    }

    fn instance_prompt(&self, task: TaskKind, bbox: &BBox, class_id: usize) -> Result<Vec<TokenId>> {
        let mut prompt = vec![self.vocab.prompt(task)];
        prompt.extend(self.box_tokens(bbox)?);
        prompt.push(self.vocab.class(class_id));
        Ok(prompt)
    }

    /// Prompt for an instance-level task (segmentation or keypoint) from a box.
    pub fn prompt_for(&self, task: TaskKind, bbox: &BBox, class_id: usize) -> Result<Vec<TokenId>> {
        match task {
            TaskKind::Segmentation | TaskKind::Keypoint => self.instance_prompt(task, bbox, class_id),
            TaskKind::Detection | TaskKind::Captioning => Ok(vec![self.vocab.prompt(task)]),
        }
    }

    fn random_noise_object(&self, rng: &mut impl Rng) -> [TokenId; 5] {
        let b = self.vocab.num_bins();
        let axis = |rng: &mut dyn rand::RngCore| {
            let (p, q) = (rng.gen_range(0..b), rng.gen_range(0..b));
            (p.min(q), p.max(q))
        };
        let (x0, x1) = axis(rng);
        let (y0, y1) = axis(rng);
        let class = rng.gen_range(0..self.vocab.num_classes());
        [
            self.vocab.coord(x0),
            self.vocab.coord(y0),
            self.vocab.coord(x1),
            self.vocab.coord(y1),
            self.vocab.class(class),
        ]
    }

    /// Fresh noise objects for `n` slots, flattened.
    pub fn noise_slots(&self, n: usize, rng: &mut impl Rng) -> Vec<TokenId> {
        (0..n).flat_map(|_| self.random_noise_object(rng)).collect()
    }

    /// `N` noise slots with every ground-truth instance injected into a
    /// distinct uniformly chosen slot. Instances beyond `N` are subsampled.
    pub fn encode_detection(&self, ann: &SceneAnnotation, rng: &mut impl Rng) -> Result<TaskSequence> {
        ann.validate(self.vocab.num_classes())?;
        let n = self.config.num_slots;
        let filler = self.noise_slots(n, rng);
        let kept: Vec<&Instance> = if ann.instances.len() > n {
            let mut idx = sample(rng, ann.instances.len(), n).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| &ann.instances[i]).collect()
        } else {
            ann.instances.iter().collect()
        };

        let mut body = filler.clone();
        let mut slot_is_gt = vec![false; n];
        let slots = sample(rng, n, kept.len());
        for (inst, slot) in kept.iter().zip(slots.iter()) {
            let coords = self.box_tokens(&inst.bbox)?;
            body[5 * slot..5 * slot + 4].copy_from_slice(&coords);
            body[5 * slot + 4] = self.vocab.class(inst.class_id);
            slot_is_gt[slot] = true;
        }
        Ok(TaskSequence {
            task: TaskKind::Detection,
            prompt: vec![self.vocab.prompt(TaskKind::Detection)],
            supervise: vec![true; body.len()],
            body,
            slot_is_gt,
            filler,
            augmented: None,
        })
    }

    /// Autoregressive-baseline layout: ground-truth objects first (random
    /// order), then noise slots whose class is supervised as NOISE and whose
    /// coordinates are unsupervised.
    pub fn encode_detection_ar(&self, ann: &SceneAnnotation, rng: &mut impl Rng) -> Result<TaskSequence> {
        let mut seq = self.encode_detection(ann, rng)?;
        let gts = seq.gt_objects();
        let n = self.config.num_slots;
        let mut order: Vec<usize> = (0..gts.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), rng);
        let mut body = seq.filler.clone();
        let mut supervise = vec![true; 5 * n];
        let mut slot_is_gt = vec![false; n];
        for (slot, &g) in order.iter().enumerate() {
            body[5 * slot..5 * slot + 5].copy_from_slice(&gts[g].1);
            slot_is_gt[slot] = true;
        }
        for slot in gts.len()..n {
            body[5 * slot + 4] = self.vocab.noise_class();
            supervise[5 * slot..5 * slot + 4].fill(false);
        }
        seq.body = body;
        seq.supervise = supervise;
        seq.slot_is_gt = slot_is_gt;
        Ok(seq)
    }

    pub fn encode_segmentation(&self, inst: &Instance) -> Result<TaskSequence> {
        inst.bbox.validate()?;
        let mask = inst
            .mask
            .as_ref()
            .ok_or_else(|| Error::Annotation("instance has no mask".into()))?;
        let m = self.config.mask_side;
        let grid = mask.resample(m, m);
        let fg = self.vocab.special(Special::Foreground);
        let bg = self.vocab.special(Special::Background);
        let body: Vec<TokenId> = grid.bits.iter().map(|&b| if b { fg } else { bg }).collect();
        Ok(TaskSequence {
            task: TaskKind::Segmentation,
            prompt: self.instance_prompt(TaskKind::Segmentation, &inst.bbox, inst.class_id)?,
            supervise: vec![true; body.len()],
            body,
            slot_is_gt: Vec::new(),
            filler: Vec::new(),
            augmented: None,
        })
    }

    /// Invisible keypoints get uniformly random coordinate bins inside the box.
    pub fn encode_keypoint(&self, inst: &Instance, rng: &mut impl Rng) -> Result<TaskSequence> {
        inst.bbox.validate()?;
        let kps = inst
            .keypoints
            .as_ref()
            .ok_or_else(|| Error::Annotation("instance has no keypoints".into()))?;
        if kps.len() != self.config.num_keypoints {
            return Err(Error::Annotation(format!(
                "expected {} keypoints, found {}",
                self.config.num_keypoints,
                kps.len()
            )));
        }
        let bins = self.vocab.num_bins();
        let (x_lo, x_hi) = (quantize_coord(inst.bbox.x_min, bins)?, quantize_coord(inst.bbox.x_max, bins)?);
        let (y_lo, y_hi) = (quantize_coord(inst.bbox.y_min, bins)?, quantize_coord(inst.bbox.y_max, bins)?);
        let visible = self.vocab.special(Special::Visible);
        let invisible = self.vocab.special(Special::Invisible);
        let mut body = Vec::with_capacity(3 * kps.len());
        for kp in kps {
            if kp.visible {
                body.extend([self.vocab.quantize(kp.x)?, self.vocab.quantize(kp.y)?, visible]);
            } else {
                body.extend([
                    self.vocab.coord(rng.gen_range(x_lo..=x_hi)),
                    self.vocab.coord(rng.gen_range(y_lo..=y_hi)),
                    invisible,
                ]);
            }
        }
        Ok(TaskSequence {
            task: TaskKind::Keypoint,
            prompt: self.instance_prompt(TaskKind::Keypoint, &inst.bbox, inst.class_id)?,
            supervise: vec![true; body.len()],
            body,
            slot_is_gt: Vec::new(),
            filler: Vec::new(),
            augmented: None,
        })
    }

    /// Pads with PAD or truncates to `caption_len`. With augmentation on, one
    /// word position of the input view is swapped for a different random word.
    pub fn encode_caption<S: AsRef<str>>(&self, caption: &[S], rng: &mut impl Rng) -> Result<TaskSequence> {
        let len = self.config.caption_len;
        let mut body = Vec::with_capacity(len);
        for w in caption.iter().take(len) {
            let w = w.as_ref();
            body.push(
                self.vocab
                    .word_id(w)
                    .ok_or_else(|| Error::Annotation(format!("out-of-vocabulary word {w:?}")))?,
            );
        }
        // Words past the cut are still validated.
        if let Some(w) = caption.iter().skip(len).find(|w| self.vocab.word_id(w.as_ref()).is_none()) {
            return Err(Error::Annotation(format!("out-of-vocabulary word {:?}", w.as_ref())));
        }
        let n_words = body.len();
        body.resize(len, self.vocab.pad());

        let n_vocab_words = self.vocab.words().len();
        let augmented = if self.config.caption_augment && n_words > 0 && n_vocab_words > 1 {
            let pos = rng.gen_range(0..n_words);
            let original = body[pos] - self.vocab.word(0);
            let mut pick = rng.gen_range(0..n_vocab_words - 1);
            if pick >= original as usize {
                pick += 1;
            }
            Some((pos, self.vocab.word(pick)))
        } else {
            None
        };
        Ok(TaskSequence {
            task: TaskKind::Captioning,
            prompt: vec![self.vocab.prompt(TaskKind::Captioning)],
            supervise: vec![true; len],
            body,
            slot_is_gt: Vec::new(),
            filler: Vec::new(),
            augmented,
        })
    }

    /// Per slot: dequantized box and class. NOISE slots are dropped silently;
    /// slots whose class position is not a class token are dropped and
    /// tallied. The score is the probability at the class position.
    pub fn decode_detection(&self, body: &[TokenId], probs: ArrayView2<'_, f32>) -> (Vec<ScoredBox>, DecodeStats) {
        let bins = self.vocab.num_bins();
        let mut stats = DecodeStats::default();
        let mut out = Vec::new();
        for (slot, chunk) in body.chunks_exact(5).enumerate() {
            let class_id = match self.vocab.classify(chunk[4]) {
                Some(TokenKind::Class(c)) if c == self.vocab.num_classes() => continue,
                Some(TokenKind::Class(c)) => c,
                _ => {
                    stats.dropped_slots += 1;
                    continue;
                }
            };
            let mut c = [0.0; 4];
            let mut ok = true;
            for (k, &tok) in chunk[..4].iter().enumerate() {
                match self.vocab.coord_bin(tok) {
                    Some(b) => c[k] = dequantize_coord(b, bins).unwrap_or(0.5),
                    None => ok = false,
                }
            }
            if !ok {
                stats.dropped_slots += 1;
                continue;
            }
            let bbox = BBox::new(c[0].min(c[2]), c[1].min(c[3]), c[0].max(c[2]), c[1].max(c[3]));
            let score = probs[[5 * slot + 4, chunk[4] as usize]] as f64;
            out.push(ScoredBox { bbox, class_id, score });
        }
        (out, stats)
    }

    /// Soft mask `p(fg) / (p(fg) + p(bg))`, binarized with a strict `> 0.5`.
    pub fn decode_segmentation(&self, probs: ArrayView2<'_, f32>) -> DecodedMask {
        let fg = self.vocab.special(Special::Foreground) as usize;
        let bg = self.vocab.special(Special::Background) as usize;
        let side = self.config.mask_side;
        let soft: Vec<f64> = probs
            .rows()
            .into_iter()
            .map(|row| ratio(row[fg] as f64, row[bg] as f64))
            .collect();
        let bits = soft.iter().map(|&s| s > 0.5).collect();
        DecodedMask { side, mask: Bitmask { width: side, height: side, bits }, soft }
    }

    /// Coordinates come from the tokens; a non-coordinate token at a
    /// coordinate position falls back to the best coordinate bin in `probs`.
    pub fn decode_keypoint(&self, body: &[TokenId], probs: ArrayView2<'_, f32>) -> (Vec<PredictedKeypoint>, DecodeStats) {
        let bins = self.vocab.num_bins();
        let vis = self.vocab.special(Special::Visible) as usize;
        let inv = self.vocab.special(Special::Invisible) as usize;
        let coords = self.vocab.coord_range();
        let mut stats = DecodeStats::default();
        let mut coord_at = |pos: usize| -> f64 {
            let bin = self.vocab.coord_bin(body[pos]).unwrap_or_else(|| {
                stats.skipped_tokens += 1;
                let row = probs.row(pos);
                (coords.start..coords.end)
                    .max_by(|&a, &b| row[a as usize].total_cmp(&row[b as usize]).then(b.cmp(&a)))
                    .map(|id| (id - coords.start) as usize)
                    .unwrap_or(0)
            });
            dequantize_coord(bin, bins).unwrap_or(0.5)
        };
        let mut out = Vec::with_capacity(body.len() / 3);
        for t in 0..body.len() / 3 {
            let x = coord_at(3 * t);
            let y = coord_at(3 * t + 1);
            let row = probs.row(3 * t + 2);
            out.push(PredictedKeypoint { x, y, visibility: ratio(row[vis] as f64, row[inv] as f64) });
        }
        (out, stats)
    }

    /// Words up to the first PAD; other non-word tokens are skipped and tallied.
    pub fn decode_caption(&self, body: &[TokenId]) -> (Vec<String>, DecodeStats) {
        let mut stats = DecodeStats::default();
        let mut words = Vec::new();
        for &tok in body {
            match self.vocab.classify(tok) {
                Some(TokenKind::Pad) => break,
                Some(TokenKind::Word(i)) => words.push(self.vocab.words()[i].clone()),
                _ => stats.skipped_tokens += 1,
            }
        }
        (words, stats)
    }
}

fn ratio(a: f64, b: f64) -> f64 {
    if a + b > 0.0 {
        a / (a + b)
    } else {
        0.5
    }
}

/// One-hot probability rows for a token sequence, handy for decoding targets.
pub fn one_hot_probs(tokens: &[TokenId], vocab_size: usize) -> ndarray::Array2<f32> {
    let mut p = ndarray::Array2::zeros((tokens.len(), vocab_size));
    for (i, &t) in tokens.iter().enumerate() {
        p[[i, t as usize]] = 1.0;
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::VocabSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn codec(slots: usize) -> Codec {
        let words = ["a", "red", "blue", "circle", "square", "left", "of", "above"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let vocab = Vocab::new(VocabSpec { num_bins: 500, num_classes: 5, words }).unwrap();
        Codec::new(vocab, CodecConfig { num_slots: slots, ..CodecConfig::default() }).unwrap()
    }

    fn inst(b: [f64; 4], class_id: usize) -> Instance {
        Instance { bbox: BBox::new(b[0], b[1], b[2], b[3]), class_id, mask: None, keypoints: None }
    }

    fn scene(instances: Vec<Instance>) -> SceneAnnotation {
        SceneAnnotation { image_size: (256, 256), instances, captions: vec![] }
    }

    #[test]
    fn detection_lengths_and_flags() {
        let c = codec(100);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let seq = c
            .encode_detection(&scene(vec![inst([0.1, 0.1, 0.3, 0.4], 0), inst([0.5, 0.5, 0.9, 0.8], 3)]), &mut rng)
            .unwrap();
        assert_eq!(seq.prompt.len(), 1);
        assert_eq!(seq.body.len(), 500);
        assert_eq!(seq.slot_is_gt.iter().filter(|&&g| g).count(), 2);
        assert_eq!(seq.filler.len(), 500);

        let empty = c.encode_detection(&scene(vec![]), &mut rng).unwrap();
        assert!(empty.slot_is_gt.iter().all(|&g| !g));
        assert_eq!(empty.body, empty.filler);
    }

    #[test]
    fn detection_subsamples_excess_instances() {
        let c = codec(3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let many: Vec<_> = (0..7).map(|i| inst([0.1 * i as f64, 0.1, 0.1 * i as f64 + 0.05, 0.2], 1)).collect();
        let seq = c.encode_detection(&scene(many), &mut rng).unwrap();
        assert!(seq.slot_is_gt.iter().all(|&g| g));
    }

    #[test]
    fn detection_rejects_invalid_boxes() {
        let c = codec(10);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(c.encode_detection(&scene(vec![inst([0.5, 0.1, 0.2, 0.4], 0)]), &mut rng).is_err());
        assert!(c.encode_detection(&scene(vec![inst([0.1, 0.1, 0.2, 0.4], 9)]), &mut rng).is_err());
    }

    #[test]
    fn detection_tokens_stay_in_filter() {
        let c = codec(20);
        let f = c.vocab.task_filter(TaskKind::Detection);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let seq = c.encode_detection(&scene(vec![inst([0.1, 0.2, 0.3, 0.4], 2)]), &mut rng).unwrap();
        assert!(seq.body.iter().all(|&t| f.contains(t)));
        // Noise uses real classes only.
        assert!(seq.body.chunks(5).all(|s| s[4] != c.vocab.noise_class()));
    }

    #[test]
    fn detection_decode_inverts_targets() {
        let c = codec(10);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let seq = c.encode_detection(&scene(vec![inst([0.1, 0.2, 0.3, 0.4], 2)]), &mut rng).unwrap();
        let mut target = seq.body.clone();
        for (s, &gt) in seq.slot_is_gt.iter().enumerate() {
            if !gt {
                target[5 * s + 4] = c.vocab.noise_class();
            }
        }
        let probs = one_hot_probs(&target, c.vocab.total_size());
        let (boxes, stats) = c.decode_detection(&target, probs.view());
        assert_eq!(stats, DecodeStats::default());
        assert_eq!(boxes.len(), 1);
        let b = boxes[0];
        assert_eq!(b.class_id, 2);
        assert_eq!(b.score, 1.0);
        for (got, want) in b.bbox.coords().iter().zip([0.1, 0.2, 0.3, 0.4]) {
            assert!((got - want).abs() <= 1.0 / 1000.0 + 1e-12);
        }
    }

    #[test]
    fn detection_decode_all_noise_is_empty() {
        let c = codec(4);
        let body: Vec<TokenId> = (0..4)
            .flat_map(|_| [c.vocab.coord(1), c.vocab.coord(2), c.vocab.coord(3), c.vocab.coord(4), c.vocab.noise_class()])
            .collect();
        let probs = one_hot_probs(&body, c.vocab.total_size());
        let (boxes, stats) = c.decode_detection(&body, probs.view());
        assert!(boxes.is_empty());
        assert_eq!(stats.dropped_slots, 0);
    }

    #[test]
    fn detection_decode_reorders_and_tallies() {
        let c = codec(2);
        let v = &c.vocab;
        let body = vec![
            v.coord(300), v.coord(400), v.coord(100), v.coord(200), v.class(1),
            v.coord(1), v.coord(1), v.coord(2), v.coord(2), v.pad(),
        ];
        let probs = one_hot_probs(&body, v.total_size());
        let (boxes, stats) = c.decode_detection(&body, probs.view());
        assert_eq!(stats.dropped_slots, 1);
        assert!(boxes[0].bbox.x_min < boxes[0].bbox.x_max && boxes[0].bbox.y_min < boxes[0].bbox.y_max);
    }

    fn checkerboard(n: usize) -> Bitmask {
        let bits = (0..n * n).map(|i| (i / n + i % n).is_multiple_of(2)).collect();
        Bitmask::new(n, n, bits).unwrap()
    }

    #[test]
    fn segmentation_round_trip() {
        let c = codec(10);
        let mut i = inst([0.2, 0.2, 0.6, 0.6], 1);
        i.mask = Some(checkerboard(16));
        let seq = c.encode_segmentation(&i).unwrap();
        assert_eq!(seq.prompt.len(), 6);
        assert_eq!(seq.body.len(), 256);
        let probs = one_hot_probs(&seq.body, c.vocab.total_size());
        let out = c.decode_segmentation(probs.view());
        assert_eq!(out.mask, checkerboard(16));

        i.mask = Some(Bitmask::filled(40, 30, true));
        let seq = c.encode_segmentation(&i).unwrap();
        assert!(seq.body.iter().all(|&t| t == c.vocab.special(Special::Foreground)));
    }

    #[test]
    fn segmentation_tie_is_background() {
        let c = codec(10);
        let mut probs = ndarray::Array2::<f32>::zeros((256, c.vocab.total_size()));
        probs.column_mut(c.vocab.special(Special::Foreground) as usize).fill(0.5);
        probs.column_mut(c.vocab.special(Special::Background) as usize).fill(0.5);
        let out = c.decode_segmentation(probs.view());
        assert!(out.soft.iter().all(|&s| s == 0.5));
        assert_eq!(out.mask.count_ones(), 0);
    }

    #[test]
    fn segmentation_requires_a_mask_and_valid_box() {
        let c = codec(10);
        assert!(c.encode_segmentation(&inst([0.2, 0.2, 0.6, 0.6], 1)).is_err());
        let mut degenerate = inst([0.2, 0.2, 0.2, 0.6], 1);
        degenerate.mask = Some(checkerboard(4));
        assert!(c.encode_segmentation(&degenerate).is_err());
    }

    #[test]
    fn keypoint_layout() {
        let c = codec(10);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut i = inst([0.2, 0.3, 0.5, 0.8], 4);
        i.keypoints = Some((0..5).map(|k| Keypoint { x: 0.25 + 0.05 * k as f64, y: 0.4, visible: k % 2 == 0 }).collect());
        let seq = c.encode_keypoint(&i, &mut rng).unwrap();
        assert_eq!(seq.prompt.len(), 6);
        assert_eq!(seq.body.len(), 15);

        i.keypoints = Some(vec![Keypoint { x: 0.0, y: 0.0, visible: false }; 5]);
        let seq = c.encode_keypoint(&i, &mut rng).unwrap();
        let inv = c.vocab.special(Special::Invisible);
        let (lo, hi) = (c.vocab.quantize(0.2).unwrap(), c.vocab.quantize(0.5).unwrap());
        for t in seq.body.chunks(3) {
            assert_eq!(t[2], inv);
            assert!((lo..=hi).contains(&t[0]));
        }
        let probs = one_hot_probs(&seq.body, c.vocab.total_size());
        let (kps, _) = c.decode_keypoint(&seq.body, probs.view());
        assert_eq!(kps.len(), 5);
        assert!(kps.iter().all(|k| k.visibility < 0.5));

        i.keypoints = Some(vec![Keypoint { x: 0.3, y: 0.4, visible: true }; 4]);
        assert!(c.encode_keypoint(&i, &mut rng).is_err());
    }

    #[test]
    fn caption_padding_truncation_and_augmentation() {
        let mut c = codec(10);
        c.config.caption_augment = false;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let seven = ["a", "red", "circle", "left", "of", "a", "square"];
        let seq = c.encode_caption(&seven, &mut rng).unwrap();
        assert_eq!(seq.body.len(), 20);
        assert_eq!(seq.body.iter().filter(|&&t| t == c.vocab.pad()).count(), 13);
        assert_eq!(c.decode_caption(&seq.body).0, seven);

        let long: Vec<&str> = std::iter::repeat_n("red", 25).collect();
        let seq = c.encode_caption(&long, &mut rng).unwrap();
        assert!(seq.body.iter().all(|&t| t == c.vocab.word_id("red").unwrap()));

        assert!(c.encode_caption(&["a", "zebra"], &mut rng).is_err());

        c.config.caption_augment = true;
        let seq = c.encode_caption(&seven, &mut rng).unwrap();
        let input = seq.input_body();
        let diffs = input.iter().zip(&seq.body).filter(|(a, b)| a != b).count();
        assert_eq!(diffs, 1);
        let (pos, _) = seq.augmented.unwrap();
        assert!(pos < 7);
    }

    #[test]
    fn caption_decode_stops_at_pad() {
        let c = codec(10);
        let v = &c.vocab;
        let body = vec![v.word(3), v.word(7), v.pad(), v.word(1)];
        assert_eq!(c.decode_caption(&body).0, vec!["circle", "above"]);
        assert!(c.decode_caption(&[v.pad(); 20]).0.is_empty());
        let (w, stats) = c.decode_caption(&[v.coord(3), v.word(0), v.pad()]);
        assert_eq!(w, vec!["a"]);
        assert_eq!(stats.skipped_tokens, 1);
    }

    #[test]
    fn encoding_is_deterministic_under_seed() {
        let c = codec(30);
        let s = scene(vec![inst([0.1, 0.2, 0.3, 0.4], 2), inst([0.4, 0.4, 0.6, 0.9], 0)]);
        let a = c.encode_detection(&s, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = c.encode_detection(&s, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ar_detection_puts_ground_truth_first() {
        let c = codec(6);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let s = scene(vec![inst([0.1, 0.2, 0.3, 0.4], 2), inst([0.4, 0.4, 0.6, 0.9], 0)]);
        let seq = c.encode_detection_ar(&s, &mut rng).unwrap();
        assert_eq!(seq.slot_is_gt, vec![true, true, false, false, false, false]);
        assert_eq!(seq.supervise.iter().filter(|&&s| s).count(), 10 + 4);
        assert!(seq.body[10..].chunks(5).all(|s| s[4] == c.vocab.noise_class()));
    }

    #[test]
    fn resample_nearest() {
        let m = Bitmask::new(2, 2, vec![true, false, false, true]).unwrap();
        let r = m.resample(4, 4);
        assert_eq!(r.resample(2, 2), m);
        assert_eq!(r.count_ones(), 8);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn boxes() -> impl Strategy<Value = Vec<([f64; 4], usize)>> {
            proptest::collection::vec(((0.0f64..0.9, 0.0f64..0.9, 0.01f64..0.1, 0.01f64..0.1), 0usize..5), 0..12)
                .prop_map(|v| v.into_iter().map(|((x, y, w, h), c)| ([x, y, x + w, y + h], c)).collect())
        }

        proptest! {
            #[test]
            fn detection_round_trip_within_half_a_bin(bs in boxes(), seed in any::<u64>()) {
                let c = codec(12);
                let v = &c.vocab;
                let ann = scene(bs.iter().map(|&(b, k)| inst(b, k)).collect());
                let seq = c.encode_detection(&ann, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
                prop_assert_eq!(seq.body.len(), 5 * 12);
                let f = v.task_filter(TaskKind::Detection);
                prop_assert!(seq.body.iter().all(|&t| f.contains(t)));
                let mut target = seq.body.clone();
                for (s, &gt) in seq.slot_is_gt.iter().enumerate() {
                    if !gt {
                        target[5 * s + 4] = v.noise_class();
                    }
                }
                let (decoded, _) = c.decode_detection(&target, one_hot_probs(&target, v.total_size()).view());
                prop_assert_eq!(decoded.len(), bs.len());
                let tol = 1.0 / (2.0 * 500.0) + 1e-12;
                for &(b, k) in &bs {
                    let close = decoded.iter().any(|d| d.class_id == k && d.bbox.coords().iter().zip(b).all(|(x, y)| (x - y).abs() <= tol));
                    prop_assert!(close, "{:?} not recovered", b);
                }
            }

            #[test]
            fn segmentation_is_exact(bits in proptest::collection::vec(any::<bool>(), 256)) {
                let c = codec(4);
                let mut i = inst([0.1, 0.1, 0.7, 0.9], 0);
                let mask = Bitmask::new(16, 16, bits).unwrap();
                i.mask = Some(mask.clone());
                let seq = c.encode_segmentation(&i).unwrap();
                let f = c.vocab.task_filter(TaskKind::Segmentation);
                prop_assert!(seq.body.iter().all(|&t| f.contains(t)));
                prop_assert_eq!(c.decode_segmentation(one_hot_probs(&seq.body, c.vocab.total_size()).view()).mask, mask);
            }

            #[test]
            fn keypoint_visibility_is_exact(vis in proptest::collection::vec(any::<bool>(), 5), xs in proptest::collection::vec(0.2f64..0.5, 5), seed in any::<u64>()) {
                let c = codec(4);
                let mut i = inst([0.2, 0.2, 0.5, 0.5], 4);
                i.keypoints = Some(vis.iter().zip(&xs).map(|(&visible, &x)| Keypoint { x, y: 0.3, visible }).collect());
                let seq = c.encode_keypoint(&i, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
                prop_assert_eq!(seq.body.len(), 15);
                let (kps, _) = c.decode_keypoint(&seq.body, one_hot_probs(&seq.body, c.vocab.total_size()).view());
                for ((k, &visible), &x) in kps.iter().zip(&vis).zip(&xs) {
                    prop_assert_eq!(k.visibility > 0.5, visible);
                    if visible {
                        prop_assert!((k.x - x).abs() <= 1.0 / 1000.0 + 1e-12);
                    }
                }
            }

            #[test]
            fn captions_are_exact(idx in proptest::collection::vec(0usize..8, 0..=20)) {
                let mut c = codec(4);
                c.config.caption_augment = false;
                let words: Vec<String> = idx.iter().map(|&i| c.vocab.words()[i].clone()).collect();
                let seq = c.encode_caption(&words, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
                prop_assert_eq!(seq.body.len(), 20);
                prop_assert_eq!(c.decode_caption(&seq.body).0, words);
            }
        }
    }
}
