//! Minimum-cost bipartite assignment and the reconstruction targets built
//! from it for detection and captioning.

use ndarray::{Array2, ArrayView2};

use crate::codec::{BBox, TaskSequence};
use crate::error::{Error, Result};
use crate::vocab::{dequantize_coord, TokenId, TokenKind, Vocab};

/// Rows are prediction slots, columns are ground-truth items.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix(Array2<f64>);

impl CostMatrix {
    pub fn new(costs: Array2<f64>) -> Result<Self> {
        if costs.iter().any(|c| !c.is_finite()) {
            return Err(Error::Shape("cost matrix has non-finite entries".into()));
        }
        Ok(CostMatrix(costs))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged cost matrix".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let arr = Array2::from_shape_vec((rows.len(), cols), flat).map_err(|e| Error::Shape(e.to_string()))?;
        Self::new(arr)
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `(row, col)` pairs sorted by row.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

/// Minimum-cost one-to-one assignment of `min(rows, cols)` pairs.
///
/// Shortest augmenting paths with row/column potentials, `O(n² m)`. A
/// rectangular problem is solved on its narrow side, which is equivalent to
/// zero-padding it to a square and discarding the padded pairs.
pub fn hungarian(cost: &CostMatrix) -> Assignment {
    let (r, c) = (cost.rows(), cost.cols());
    if r == 0 || c == 0 {
        return Assignment { pairs: Vec::new(), total_cost: 0.0 };
    }
    let transposed = r > c;
    let a = if transposed { cost.0.t().to_owned() } else { cost.0.clone() };
    let (n, m) = a.dim();

    // 1-based; index 0 of `way`/`owner` is the virtual start column.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| owner[j] != 0)
        .map(|j| if transposed { (j - 1, owner[j] - 1) } else { (owner[j] - 1, j - 1) })
        .collect();
    pairs.sort_unstable();
    let total_cost = pairs.iter().map(|&(i, j)| cost.0[[i, j]]).sum();
    Assignment { pairs, total_cost }
}

/// Weights of the slot-to-ground-truth matching cost.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MatchWeights {
    pub class: f64,
    pub bbox: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        MatchWeights { class: 2.0, bbox: 5.0 }
    }
}

/// What the decoder currently believes about one detection slot.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotPrediction {
    /// Probabilities over the CLASS range (real classes then NOISE).
    pub class_probs: Vec<f64>,
    pub bbox: BBox,
}

impl SlotPrediction {
    /// Reads slot predictions from per-position probability rows (full
    /// vocabulary columns). Coordinates use the most likely bin.
    pub fn from_probs(probs: ArrayView2<'_, f32>, vocab: &Vocab) -> Vec<SlotPrediction> {
        let coords = vocab.coord_range();
        let classes = vocab.class_range();
        let bins = vocab.num_bins();
        let best_coord = |row: usize| -> f64 {
            let r = probs.row(row);
            let mut best = coords.start as usize;
            for id in coords.start as usize..coords.end as usize {
                if r[id] > r[best] {
                    best = id;
                }
            }
            dequantize_coord(best - coords.start as usize, bins).unwrap_or(0.5)
        };
        (0..probs.nrows() / 5)
            .map(|s| {
                let row = probs.row(5 * s + 4);
                let class_probs = (classes.start..classes.end).map(|id| row[id as usize] as f64).collect();
                let c = [best_coord(5 * s), best_coord(5 * s + 1), best_coord(5 * s + 2), best_coord(5 * s + 3)];
                SlotPrediction { class_probs, bbox: BBox::new(c[0], c[1], c[2], c[3]) }
            })
            .collect()
    }
}

/// `w_cls · (1 − p(gt_class)) + w_box · mean |Δcoord|`.
pub fn detection_cost(pred: &SlotPrediction, gt_box: &BBox, gt_class: usize, weights: MatchWeights) -> f64 {
    let p = pred.class_probs.get(gt_class).copied().unwrap_or(0.0);
    let l1: f64 = pred
        .bbox
        .coords()
        .iter()
        .zip(gt_box.coords())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / 4.0;
    weights.class * (1.0 - p) + weights.bbox * l1
}

/// Detection reconstruction targets for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionTargets {
    /// Body to show at unmasked positions of the partly masked view.
    pub input_body: Vec<TokenId>,
    pub target: Vec<TokenId>,
    pub supervise: Vec<bool>,
    /// `(slot, gt index)` in the order of [`TaskSequence::gt_objects`].
    pub assignment: Vec<(usize, usize)>,
}

impl DetectionTargets {
    pub fn supervised_count(&self) -> usize {
        self.supervise.iter().filter(|&&s| s).count()
    }
}

fn decode_object(obj: &[TokenId; 5], vocab: &Vocab) -> (BBox, usize) {
    let bins = vocab.num_bins();
    let c: Vec<f64> = obj[..4]
        .iter()
        .map(|&t| vocab.coord_bin(t).and_then(|b| dequantize_coord(b, bins).ok()).unwrap_or(0.5))
        .collect();
    let class = match vocab.classify(obj[4]) {
        Some(TokenKind::Class(c)) => c,
        _ => 0,
    };
    (BBox::new(c[0], c[1], c[2], c[3]), class)
}

/// Assigns the sequence's ground-truth objects to slots by Hungarian
/// matching against `preds`, or keeps the encoder's random placement when
/// `preds` is `None`.
///
/// Matched slots are fully supervised with the ground-truth tokens.
/// Unmatched slots are supervised only at the class position, towards NOISE;
/// their input shows the original noise object.
pub fn detection_targets(
    preds: Option<&[SlotPrediction]>,
    seq: &TaskSequence,
    vocab: &Vocab,
    weights: MatchWeights,
) -> DetectionTargets {
    let gts = seq.gt_objects();
    let n_slots = seq.slot_is_gt.len();
    let assignment: Vec<(usize, usize)> = match preds {
        Some(preds) if !gts.is_empty() => {
            let decoded: Vec<(BBox, usize)> = gts.iter().map(|(_, obj)| decode_object(obj, vocab)).collect();
            let mut costs = Array2::zeros((preds.len(), gts.len()));
            for (s, p) in preds.iter().enumerate() {
                for (g, (b, c)) in decoded.iter().enumerate() {
                    costs[[s, g]] = detection_cost(p, b, *c, weights);
                }
            }
            match CostMatrix::new(costs) {
                Ok(cm) => hungarian(&cm).pairs,
                // Non-finite predictions: fall back to the encoder's placement.
                Err(_) => gts.iter().enumerate().map(|(g, (s, _))| (*s, g)).collect(),
            }
        }
        _ => gts.iter().enumerate().map(|(g, (s, _))| (*s, g)).collect(),
    };

    let mut input_body = seq.filler.clone();
    let mut target = seq.filler.clone();
    let mut supervise = vec![false; 5 * n_slots];
    let mut matched = vec![false; n_slots];
    for &(slot, g) in &assignment {
        let obj = &gts[g].1;
        input_body[5 * slot..5 * slot + 5].copy_from_slice(obj);
        target[5 * slot..5 * slot + 5].copy_from_slice(obj);
        supervise[5 * slot..5 * slot + 5].fill(true);
        matched[slot] = true;
    }
    for slot in (0..n_slots).filter(|&s| !matched[s]) {
        target[5 * slot + 4] = vocab.noise_class();
        supervise[5 * slot + 4] = true;
    }
    DetectionTargets { input_body, target, supervise, assignment }
}

/// Index of the reference with the lowest negative log-likelihood under the
/// per-position distributions (full-vocabulary columns). Ties go to the
/// lowest index.
pub fn caption_target(probs: ArrayView2<'_, f32>, references: &[Vec<TokenId>]) -> usize {
    let mut best = 0;
    let mut best_cost = f64::INFINITY;
    for (r, reference) in references.iter().enumerate() {
        let cost: f64 = reference
            .iter()
            .enumerate()
            .map(|(i, &tok)| -(probs[[i, tok as usize]].max(1e-30) as f64).ln())
            .sum();
        if cost < best_cost {
            best = r;
            best_cost = cost;
        }
    }
    best
}
