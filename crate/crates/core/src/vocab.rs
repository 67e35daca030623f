//! The unified token space shared by every task.
//!
//! Ids are laid out as contiguous ranges in a fixed order:
//!
//! | range   | size              | contents                                        |
//! |---------|-------------------|-------------------------------------------------|
//! | PAD     | 1                 | padding (doubles as the autoregressive `<end>`)  |
//! | MASK    | 1                 | the shared `<Mask>` token                        |
//! | PROMPT  | 4                 | one prompt token per [`TaskKind`]                |
//! | COORD   | `num_bins`        | quantized coordinates                            |
//! | CLASS   | `num_classes + 1` | object categories, last id is the NOISE class    |
//! | SPECIAL | 4                 | foreground, background, visible, invisible      |
//! | WORD    | `words.len()`     | caption words                                    |
//!
//! The order never changes, so token ids are stable across runs and can be
//! baked into checkpoints (see [`Vocab::manifest`]).

use std::collections::HashMap;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// The four task families handled by the unified decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Detection,
    Segmentation,
    Keypoint,
    Captioning,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [
        TaskKind::Detection,
        TaskKind::Segmentation,
        TaskKind::Keypoint,
        TaskKind::Captioning,
    ];

    pub fn index(self) -> usize {
        match self {
            TaskKind::Detection => 0,
            TaskKind::Segmentation => 1,
            TaskKind::Keypoint => 2,
            TaskKind::Captioning => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Detection => "detection",
            TaskKind::Segmentation => "segmentation",
            TaskKind::Keypoint => "keypoint",
            TaskKind::Captioning => "captioning",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "detection" | "det" => Ok(TaskKind::Detection),
            "segmentation" | "seg" => Ok(TaskKind::Segmentation),
            "keypoint" | "keypoints" | "kpt" => Ok(TaskKind::Keypoint),
            "captioning" | "caption" | "cap" => Ok(TaskKind::Captioning),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

/// Task-related special tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Special {
    Foreground,
    Background,
    Visible,
    Invisible,
}

impl Special {
    pub const ALL: [Special; 4] = [
        Special::Foreground,
        Special::Background,
        Special::Visible,
        Special::Invisible,
    ];

    fn index(self) -> usize {
        match self {
            Special::Foreground => 0,
            Special::Background => 1,
            Special::Visible => 2,
            Special::Invisible => 3,
        }
    }
}

/// What a token id stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenKind {
    Pad,
    Mask,
    Prompt(TaskKind),
    Coord(usize),
    /// Category index; `num_classes` denotes the NOISE class.
    Class(usize),
    Special(Special),
    Word(usize),
}

/// Inputs to [`Vocab::new`].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct VocabSpec {
    pub num_bins: usize,
    pub num_classes: usize,
    pub words: Vec<String>,
}

/// Names of the id ranges, in layout order.
pub const RANGE_NAMES: [&str; 7] = ["PAD", "MASK", "PROMPT", "COORD", "CLASS", "SPECIAL", "WORD"];

const MANIFEST_MAGIC: &str = "mad-vocab v1";

/// Immutable token vocabulary with contiguous id ranges.
#[derive(Debug, Clone)]
pub struct Vocab {
    spec: VocabSpec,
    ranges: [Range<TokenId>; 7],
    word_ids: HashMap<String, usize>,
}

impl Vocab {
    pub fn new(spec: VocabSpec) -> Result<Self> {
        if spec.num_bins < 2 {
            return Err(Error::Vocab(format!("num_bins must be >= 2, got {}", spec.num_bins)));
        }
        if spec.num_classes < 1 {
            return Err(Error::Vocab("num_classes must be >= 1".into()));
        }
        if spec.words.is_empty() {
            return Err(Error::Vocab("word list is empty".into()));
        }
        let mut word_ids = HashMap::with_capacity(spec.words.len());
        for (i, w) in spec.words.iter().enumerate() {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::Vocab(format!("word {i} ({w:?}) is empty or contains whitespace")));
            }
            if word_ids.insert(w.clone(), i).is_some() {
                return Err(Error::Vocab(format!("duplicate word {w:?}")));
            }
        }

        let sizes = [
            1,
            1,
            TaskKind::ALL.len(),
            spec.num_bins,
            spec.num_classes + 1,
            Special::ALL.len(),
            spec.words.len(),
        ];
        let mut start = 0usize;
        let ranges = sizes.map(|size| {
            let r = start as TokenId..(start + size) as TokenId;
            start += size;
            r
        });
        Ok(Vocab { spec, ranges, word_ids })
    }

    pub fn spec(&self) -> &VocabSpec {
        &self.spec
    }

    pub fn num_bins(&self) -> usize {
        self.spec.num_bins
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn words(&self) -> &[String] {
        &self.spec.words
    }

    pub fn total_size(&self) -> usize {
        self.ranges[6].end as usize
    }

    /// The id ranges in layout order, paired with their names.
    pub fn ranges(&self) -> impl Iterator<Item = (&'static str, Range<TokenId>)> + '_ {
        RANGE_NAMES.iter().copied().zip(self.ranges.iter().cloned())
    }

    pub fn pad(&self) -> TokenId {
        self.ranges[0].start
    }

    pub fn mask(&self) -> TokenId {
        self.ranges[1].start
    }

    pub fn prompt(&self, task: TaskKind) -> TokenId {
        self.ranges[2].start + task.index() as TokenId
    }

    pub fn coord(&self, bin: usize) -> TokenId {
        debug_assert!(bin < self.spec.num_bins);
        self.ranges[3].start + bin as TokenId
    }

    pub fn class(&self, class_id: usize) -> TokenId {
        debug_assert!(class_id <= self.spec.num_classes);
        self.ranges[4].start + class_id as TokenId
    }

    pub fn noise_class(&self) -> TokenId {
        self.class(self.spec.num_classes)
    }

    pub fn special(&self, s: Special) -> TokenId {
        self.ranges[5].start + s.index() as TokenId
    }

    pub fn word(&self, index: usize) -> TokenId {
        debug_assert!(index < self.spec.words.len());
        self.ranges[6].start + index as TokenId
    }

    pub fn word_id(&self, word: &str) -> Option<TokenId> {
        self.word_ids.get(word).map(|&i| self.word(i))
    }

    pub fn coord_range(&self) -> Range<TokenId> {
        self.ranges[3].clone()
    }

    pub fn class_range(&self) -> Range<TokenId> {
        self.ranges[4].clone()
    }

    pub fn word_range(&self) -> Range<TokenId> {
        self.ranges[6].clone()
    }

    /// Maps an id back to what it denotes; `None` for ids past the end.
    pub fn classify(&self, id: TokenId) -> Option<TokenKind> {
        let slot = self.ranges.iter().position(|r| r.contains(&id))?;
        let offset = (id - self.ranges[slot].start) as usize;
        Some(match slot {
            0 => TokenKind::Pad,
            1 => TokenKind::Mask,
            2 => TokenKind::Prompt(TaskKind::ALL[offset]),
            3 => TokenKind::Coord(offset),
            4 => TokenKind::Class(offset),
            5 => TokenKind::Special(Special::ALL[offset]),
            _ => TokenKind::Word(offset),
        })
    }

    /// Inverse of [`Vocab::classify`].
    pub fn id_of(&self, kind: TokenKind) -> TokenId {
        match kind {
            TokenKind::Pad => self.pad(),
            TokenKind::Mask => self.mask(),
            TokenKind::Prompt(t) => self.prompt(t),
            TokenKind::Coord(b) => self.coord(b),
            TokenKind::Class(c) => self.class(c),
            TokenKind::Special(s) => self.special(s),
            TokenKind::Word(w) => self.word(w),
        }
    }

    /// Bin index of a coordinate token.
    pub fn coord_bin(&self, id: TokenId) -> Option<usize> {
        match self.classify(id)? {
            TokenKind::Coord(b) => Some(b),
            _ => None,
        }
    }

    pub fn quantize(&self, v: f64) -> Result<TokenId> {
        Ok(self.coord(quantize_coord(v, self.spec.num_bins)?))
    }

    /// The token subset a task may emit (and be supervised on).
    pub fn task_filter(&self, task: TaskKind) -> TaskFilter {
        let ids: Vec<TokenId> = match task {
            TaskKind::Detection => self.coord_range().chain(self.class_range()).collect(),
            TaskKind::Segmentation => vec![self.special(Special::Foreground), self.special(Special::Background)],
            TaskKind::Keypoint => self
                .coord_range()
                .chain([self.special(Special::Visible), self.special(Special::Invisible)])
                .collect(),
            TaskKind::Captioning => std::iter::once(self.pad()).chain(self.word_range()).collect(),
        };
        TaskFilter::new(task, ids, self.total_size())
    }

    /// Filter used by the autoregressive baseline: the task filter plus PAD,
    /// which plays the role of `<end>`.
    pub fn ar_filter(&self, task: TaskKind) -> TaskFilter {
        let mut ids = self.task_filter(task).ids;
        if !ids.contains(&self.pad()) {
            ids.insert(0, self.pad());
        }
        TaskFilter::new(task, ids, self.total_size())
    }

    /// Versioned text manifest: one `range` line per id range, then the word list.
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        out.push_str(MANIFEST_MAGIC);
        out.push('\n');
        out.push_str(&format!("num_bins {}\nnum_classes {}\n", self.spec.num_bins, self.spec.num_classes));
        for (name, r) in self.ranges() {
            out.push_str(&format!("range {name} {} {}\n", r.start, r.end - r.start));
        }
        out.push_str(&format!("words {}\n", self.spec.words.len()));
        for w in &self.spec.words {
            out.push_str(w);
            out.push('\n');
        }
        out
    }

    /// Parses a manifest written by [`Vocab::manifest`] and checks that the
    /// recorded ranges agree with the rebuilt layout.
    pub fn from_manifest(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::Vocab(format!("manifest: {m}"));
        let mut lines = text.lines();
        if lines.next() != Some(MANIFEST_MAGIC) {
            return Err(bad("missing version header"));
        }
        let mut field = |key: &str| -> Result<usize> {
            let line = lines.next().ok_or_else(|| bad("truncated"))?;
            let rest = line.strip_prefix(key).ok_or_else(|| bad(&format!("expected `{key}`")))?;
            rest.trim().parse().map_err(|_| bad(&format!("bad value for `{key}`")))
        };
        let num_bins = field("num_bins")?;
        let num_classes = field("num_classes")?;
        let mut recorded = Vec::with_capacity(7);
        for name in RANGE_NAMES {
            let line = lines.next().ok_or_else(|| bad("truncated"))?;
            let parts: Vec<&str> = line.split_whitespace().collect();
            match parts.as_slice() {
                ["range", n, start, size] if *n == name => {
                    let start: u32 = start.parse().map_err(|_| bad("bad range start"))?;
                    let size: u32 = size.parse().map_err(|_| bad("bad range size"))?;
                    recorded.push(start..start + size);
                }
                _ => return Err(bad(&format!("expected range {name}"))),
            }
        }
        let count: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("words "))
            .and_then(|n| n.trim().parse().ok())
            .ok_or_else(|| bad("missing word count"))?;
        let words: Vec<String> = lines.take(count).map(str::to_owned).collect();
        if words.len() != count {
            return Err(bad("word list truncated"));
        }
        let vocab = Vocab::new(VocabSpec { num_bins, num_classes, words })?;
        if vocab.ranges.iter().cloned().ne(recorded) {
            return Err(bad("recorded ranges disagree with layout"));
        }
        Ok(vocab)
    }

    /// SHA-256 of the manifest, hex encoded.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.manifest().as_bytes()))
    }
}

/// Sorted token subset for one task, with a dense id → local index map so
/// softmaxes can run over the subset only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskFilter {
    task: TaskKind,
    ids: Vec<TokenId>,
    local: Vec<Option<u32>>,
}

impl TaskFilter {
    fn new(task: TaskKind, mut ids: Vec<TokenId>, vocab_size: usize) -> Self {
        ids.sort_unstable();
        ids.dedup();
        let mut local = vec![None; vocab_size];
        for (i, &id) in ids.iter().enumerate() {
            local[id as usize] = Some(i as u32);
        }
        TaskFilter { task, ids, local }
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: TokenId) -> bool {
        self.local_index(id).is_some()
    }

    /// Position of `id` within [`TaskFilter::ids`].
    pub fn local_index(&self, id: TokenId) -> Option<usize> {
        self.local.get(id as usize).copied().flatten().map(|i| i as usize)
    }
}

/// `clamp(floor(v * num_bins), 0, num_bins - 1)`, after clamping `v` into `[0, 1]`.
pub fn quantize_coord(v: f64, num_bins: usize) -> Result<usize> {
    if !v.is_finite() {
        return Err(Error::NonFiniteCoordinate(v));
    }
    let v = v.clamp(0.0, 1.0);
    Ok(((v * num_bins as f64).floor() as usize).min(num_bins - 1))
}

/// Bin-center dequantization: `(bin + 0.5) / num_bins`.
pub fn dequantize_coord(bin: usize, num_bins: usize) -> Result<f64> {
    if bin >= num_bins {
        return Err(Error::BinOutOfRange { bin, num_bins });
    }
    Ok((bin as f64 + 0.5) / num_bins as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn words(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("w{i}")).collect()
    }

    fn vocab(bins: usize, classes: usize, n_words: usize) -> Vocab {
        Vocab::new(VocabSpec { num_bins: bins, num_classes: classes, words: words(n_words) }).unwrap()
    }

    #[test]
    fn total_sizes() {
        assert_eq!(vocab(500, 5, 30).total_size(), 546);
        assert_eq!(vocab(2, 1, 1).total_size(), 15);
        assert_eq!(vocab(500, 80, 11421).total_size(), 12012);
    }

    #[test]
    fn rejects_bad_specs() {
        let dup = VocabSpec { num_bins: 10, num_classes: 2, words: vec!["a".into(), "a".into()] };
        assert!(matches!(Vocab::new(dup), Err(Error::Vocab(_))));
        let empty = VocabSpec { num_bins: 10, num_classes: 2, words: vec![] };
        assert!(Vocab::new(empty).is_err());
        let one_bin = VocabSpec { num_bins: 1, num_classes: 2, words: words(2) };
        assert!(Vocab::new(one_bin).is_err());
        let no_class = VocabSpec { num_bins: 4, num_classes: 0, words: words(2) };
        assert!(Vocab::new(no_class).is_err());
    }

    #[test]
    fn ranges_are_contiguous_and_ordered() {
        let v = vocab(500, 5, 30);
        let mut next = 0;
        for (_, r) in v.ranges() {
            assert_eq!(r.start, next);
            assert!(r.end > r.start);
            next = r.end;
        }
        assert_eq!(next as usize, v.total_size());
        assert_eq!(v.pad(), 0);
        assert_eq!(v.mask(), 1);
        assert_eq!(v.prompt(TaskKind::Detection), 2);
        assert_eq!(v.coord(0), 6);
        assert_eq!(v.noise_class(), 6 + 500 + 5);
    }

    #[test]
    fn classify_is_a_bijection() {
        let v = vocab(37, 4, 9);
        for id in 0..v.total_size() as TokenId {
            let kind = v.classify(id).unwrap();
            assert_eq!(v.id_of(kind), id);
        }
        assert_eq!(v.classify(v.total_size() as TokenId), None);
    }

    #[test]
    fn quantization_examples() {
        assert_eq!(quantize_coord(0.5, 500).unwrap(), 250);
        assert_eq!(quantize_coord(1.0, 500).unwrap(), 499);
        assert_eq!(quantize_coord(0.1234, 500).unwrap(), 61);
        assert_eq!(quantize_coord(-3.0, 500).unwrap(), 0);
        assert_eq!(quantize_coord(7.0, 500).unwrap(), 499);
        assert!(quantize_coord(f64::NAN, 500).is_err());
        assert!(quantize_coord(f64::INFINITY, 500).is_err());
    }

    #[test]
    fn dequantization_examples() {
        assert!((dequantize_coord(250, 500).unwrap() - 0.501).abs() < 1e-12);
        assert!((dequantize_coord(0, 500).unwrap() - 0.001).abs() < 1e-12);
        assert!(matches!(dequantize_coord(500, 500), Err(Error::BinOutOfRange { .. })));
    }

    #[test]
    fn filter_sizes() {
        let v = vocab(500, 5, 30);
        assert_eq!(v.task_filter(TaskKind::Detection).len(), 506);
        assert_eq!(v.task_filter(TaskKind::Segmentation).len(), 2);
        assert_eq!(v.task_filter(TaskKind::Keypoint).len(), 502);
        assert_eq!(v.task_filter(TaskKind::Captioning).len(), 31);
        assert!(v.task_filter(TaskKind::Detection).contains(v.noise_class()));
        assert!(v.ar_filter(TaskKind::Detection).contains(v.pad()));
        assert_eq!(v.ar_filter(TaskKind::Captioning).len(), 31);
    }

    #[test]
    fn filters_plus_control_tokens_cover_vocab() {
        let v = vocab(20, 3, 7);
        let mut covered = vec![false; v.total_size()];
        for t in TaskKind::ALL {
            for &id in v.task_filter(t).ids() {
                covered[id as usize] = true;
            }
            covered[v.prompt(t) as usize] = true;
        }
        covered[v.pad() as usize] = true;
        covered[v.mask() as usize] = true;
        assert!(covered.iter().all(|&c| c));
    }

    #[test]
    fn filters_exclude_control_tokens() {
        let v = vocab(20, 3, 7);
        for t in TaskKind::ALL {
            let f = v.task_filter(t);
            assert!(!f.contains(v.mask()));
            for p in TaskKind::ALL {
                assert!(!f.contains(v.prompt(p)));
            }
            assert_eq!(f.contains(v.pad()), t == TaskKind::Captioning);
        }
    }

    #[test]
    fn manifest_round_trip() {
        let v = vocab(64, 5, 12);
        let text = v.manifest();
        let back = Vocab::from_manifest(&text).unwrap();
        assert_eq!(back.spec(), v.spec());
        assert_eq!(back.fingerprint(), v.fingerprint());
        assert!(Vocab::from_manifest(&text.replace("range COORD 6 64", "range COORD 6 65")).is_err());
        assert!(Vocab::from_manifest("nonsense").is_err());
    }

    #[test]
    fn fingerprint_changes_with_layout() {
        assert_ne!(vocab(64, 5, 12).fingerprint(), vocab(64, 6, 12).fingerprint());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]

        #[test]
        fn round_trip_error_is_half_a_bin(v in 0.0f64..1.0, bins in 2usize..1200) {
            let back = dequantize_coord(quantize_coord(v, bins).unwrap(), bins).unwrap();
            prop_assert!((v - back).abs() <= 1.0 / (2.0 * bins as f64) + 1e-12);
        }

        #[test]
        fn quantization_is_monotone(a in -0.5f64..1.5, b in -0.5f64..1.5) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(quantize_coord(lo, 500).unwrap() <= quantize_coord(hi, 500).unwrap());
        }
    }
}
