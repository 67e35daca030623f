//! Fully and partly masked training views, and multi-stage masked inference.

use ndarray::Array2;
use rand::seq::index::sample;
use rand::Rng;

use crate::codec::TaskSequence;
use crate::error::{Error, Result};
use crate::vocab::{TaskKind, TokenId};

/// Decoder input / target pair for one task sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedView {
    pub task: TaskKind,
    /// Prompt followed by the (partly) masked body.
    pub input: Vec<TokenId>,
    pub prompt_len: usize,
    pub target: Vec<TokenId>,
    pub supervise: Vec<bool>,
    /// Sorted body positions in `M`.
    pub mask_positions: Vec<usize>,
}

impl MaskedView {
    /// `N_m`.
    pub fn n_masked(&self) -> usize {
        self.mask_positions.len()
    }

    pub fn body_len(&self) -> usize {
        self.target.len()
    }

    pub fn input_body(&self) -> &[TokenId] {
        &self.input[self.prompt_len..]
    }

    /// Masked positions that are also supervised.
    pub fn supervised_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask_positions.iter().copied().filter(|&p| self.supervise[p])
    }

    /// Replaces target, supervision and the visible input tokens while keeping
    /// the mask set. Used once matching has fixed the detection arrangement.
    pub fn retarget(&mut self, input_body: &[TokenId], target: Vec<TokenId>, supervise: Vec<bool>) {
        debug_assert_eq!(input_body.len(), self.target.len());
        let masked = position_flags(self.target.len(), &self.mask_positions);
        for (i, &tok) in input_body.iter().enumerate() {
            if !masked[i] {
                self.input[self.prompt_len + i] = tok;
            }
        }
        self.target = target;
        self.supervise = supervise;
    }
}

/// Ordered masking ratios for the refinement stages after the initial
/// fully masked decode. `K = ratios.len()`.
#[derive(Debug, Clone, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct RefinementSchedule {
    pub ratios: Vec<f64>,
}

impl RefinementSchedule {
    pub fn new(ratios: Vec<f64>) -> Result<Self> {
        if let Some(r) = ratios.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
            return Err(Error::Config(format!("refinement ratio {r} outside (0, 1]")));
        }
        Ok(RefinementSchedule { ratios })
    }

    /// No refinement: one parallel pass.
    pub fn single_pass() -> Self {
        RefinementSchedule { ratios: Vec::new() }
    }

    pub fn stages(&self) -> usize {
        self.ratios.len()
    }

    /// Parses `"0.8,0.6,0.4"`; the empty string means no refinement.
    pub fn parse(text: &str) -> Result<Self> {
        let text = text.trim();
        if text.is_empty() || text == "none" {
            return Ok(Self::single_pass());
        }
        let ratios = text
            .split(',')
            .map(|r| r.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad ratio `{r}`"))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(ratios)
    }
}

/// `round_half_up(ratio * len)` clamped so at least one position is masked.
pub fn mask_count(len: usize, ratio: f64) -> usize {
    if len == 0 {
        return 0;
    }
    let k = (ratio.clamp(0.0, 1.0) * len as f64 + 0.5).floor() as usize;
    k.clamp(1, len)
}

fn position_flags(len: usize, positions: &[usize]) -> Vec<bool> {
    let mut flags = vec![false; len];
    for &p in positions {
        flags[p] = true;
    }
    flags
}

fn build_view(seq: &TaskSequence, positions: Vec<usize>, mask_token: TokenId) -> MaskedView {
    let mut input = seq.prompt.clone();
    input.extend(seq.input_body());
    let prompt_len = seq.prompt.len();
    for &p in &positions {
        input[prompt_len + p] = mask_token;
    }
    MaskedView {
        task: seq.task,
        input,
        prompt_len,
        target: seq.body.clone(),
        supervise: seq.supervise.clone(),
        mask_positions: positions,
    }
}

/// Every body position replaced by `<Mask>`.
pub fn mask_fully(seq: &TaskSequence, mask_token: TokenId) -> MaskedView {
    build_view(seq, (0..seq.body_len()).collect(), mask_token)
}

/// `mask_count(len, ratio)` positions drawn uniformly without replacement.
pub fn remask(len: usize, ratio: f64, rng: &mut impl Rng) -> Vec<usize> {
    let mut positions = sample(rng, len, mask_count(len, ratio)).into_vec();
    positions.sort_unstable();
    positions
}

/// Uniformly masks `mask_count(len, ratio)` body positions.
///
/// A captioning augmentation position is never replaced by `<Mask>`; the
/// corrupted token stays visible and its position joins `M` on top of the
/// sampled count, so it is always supervised with the original word.
pub fn mask_partial(seq: &TaskSequence, ratio: f64, mask_token: TokenId, rng: &mut impl Rng) -> MaskedView {
    let positions = partial_positions(seq.body_len(), seq.augmented.map(|a| a.0), ratio, rng);
    apply_partial(seq, &positions, mask_token)
}

/// Samples the `<Mask>` positions of a partly masked view, avoiding `exclude`.
pub fn partial_positions(len: usize, exclude: Option<usize>, ratio: f64, rng: &mut impl Rng) -> Vec<usize> {
    match exclude {
        Some(skip) if len > 1 => {
            let k = mask_count(len, ratio).min(len - 1);
            let mut positions: Vec<usize> = sample(rng, len - 1, k)
                .into_iter()
                .map(|p| if p >= skip { p + 1 } else { p })
                .collect();
            positions.sort_unstable();
            positions
        }
        _ => remask(len, ratio, rng),
    }
}

/// Builds the partly masked view for precomputed `<Mask>` positions.
pub fn apply_partial(seq: &TaskSequence, mask_positions: &[usize], mask_token: TokenId) -> MaskedView {
    let mut view = build_view(seq, mask_positions.to_vec(), mask_token);
    if let Some((pos, _)) = seq.augmented {
        if let Err(i) = view.mask_positions.binary_search(&pos) {
            view.mask_positions.insert(i, pos);
        }
    }
    view
}

/// Log entry for one refinement stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    pub ratio: Option<f64>,
    pub masked: Vec<usize>,
    pub tokens: Vec<TokenId>,
}

/// Output of [`ensemble_refine`].
#[derive(Debug, Clone)]
pub struct Refined {
    pub tokens: Vec<TokenId>,
    /// Per position, the mean of the distributions observed while masked.
    pub probs: Array2<f32>,
    pub passes: usize,
    pub stages: Vec<StageRecord>,
}

/// Multi-stage masked inference.
///
/// Stage 0 decodes the fully masked body. Each later stage re-masks a
/// uniform subset at its ratio, decodes again, and folds the new
/// distributions into a running mean at the re-masked positions. Tokens are
/// the per-position argmax of that mean. `decode` receives prompt + body
/// and returns one probability row per body position; it is called exactly
/// `1 + K` times.
pub fn ensemble_refine<F>(
    mut decode: F,
    prompt: &[TokenId],
    body_len: usize,
    schedule: &RefinementSchedule,
    mask_token: TokenId,
    rng: &mut impl Rng,
) -> Result<Refined>
where
    F: FnMut(&[TokenId]) -> Result<Array2<f32>>,
{
    let mut input: Vec<TokenId> = prompt.to_vec();
    input.extend(std::iter::repeat_n(mask_token, body_len));
    let first = decode(&input)?;
    check_rows(&first, body_len)?;
    let mut sum = first.mapv(f64::from);
    let mut counts = vec![1u32; body_len];
    let mut tokens = argmax_rows(&first);
    let mut passes = 1;
    let mut stages = vec![StageRecord { ratio: None, masked: (0..body_len).collect(), tokens: tokens.clone() }];

    for &ratio in &schedule.ratios {
        let masked = remask(body_len, ratio, rng);
        input.truncate(prompt.len());
        input.extend_from_slice(&tokens);
        for &p in &masked {
            input[prompt.len() + p] = mask_token;
        }
        let probs = decode(&input)?;
        check_rows(&probs, body_len)?;
        passes += 1;
        for &p in &masked {
            let mut acc = sum.row_mut(p);
            acc.zip_mut_with(&probs.row(p), |a, &b| *a += f64::from(b));
            counts[p] += 1;
        }
        // The mean and the sum share an argmax.
        for &p in &masked {
            tokens[p] = argmax(sum.row(p));
        }
        stages.push(StageRecord { ratio: Some(ratio), masked, tokens: tokens.clone() });
    }

    let mut probs = Array2::<f32>::zeros(sum.raw_dim());
    for (p, (mut out, acc)) in probs.rows_mut().into_iter().zip(sum.rows()).enumerate() {
        let n = f64::from(counts[p]);
        out.zip_mut_with(&acc, |o, &a| *o = (a / n) as f32);
    }
    Ok(Refined { tokens, probs, passes, stages })
}

fn check_rows(probs: &Array2<f32>, body_len: usize) -> Result<()> {
    if probs.nrows() != body_len {
        return Err(Error::Shape(format!("decoder returned {} rows for body of {body_len}", probs.nrows())));
    }
    Ok(())
}

/// Row-wise argmax, lowest id on ties.
pub fn argmax_rows(probs: &Array2<f32>) -> Vec<TokenId> {
    probs
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best as TokenId
        })
        .collect()
}

fn argmax(sum: ndarray::ArrayView1<'_, f64>) -> TokenId {
    let mut best = 0;
    for (i, &v) in sum.iter().enumerate() {
        if v > sum[best] {
            best = i;
        }
    }
    best as TokenId
}
