//! Masked cross-entropy with task weights, task-mixed batches, the MAD and
//! autoregressive training steps, and the optimization loop.

mod optim;
mod trainer;

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{Codec, SceneAnnotation, TaskSequence};
use crate::error::{Error, Result};
use crate::masking::{apply_partial, mask_fully, partial_positions, MaskedView};
use crate::matching::{caption_target, detection_targets, MatchWeights, SlotPrediction};
use crate::model::{grad_check, GradCheckReport, DecoderInput, DecoderMode, Heads, Memory, Model, Raster};
use crate::tensor::{kernels, CeItem, Float, Graph, Var};
use crate::vocab::{TaskFilter, TaskKind, TokenId};

pub use optim::{clip_grad_norm, scheduled_lr, AdamW, UpdateRates};
pub use trainer::{train, StepRecord, TrainObserver, TrainSummary};

/// Which objective a model is trained with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Masked auto-decoding: bidirectional decoder, masked views.
    #[default]
    Mad,
    /// Next-token prediction with a causal decoder.
    Ar,
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mad" => Ok(Objective::Mad),
            "ar" => Ok(Objective::Ar),
            other => Err(Error::Config(format!("unknown mode `{other}` (expected mad or ar)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Loss weight per task, indexed by [`TaskKind::index`].
    pub task_weights: [f64; 4],
    pub train_mask_ratio: f64,
    pub lr: f64,
    pub stem_lr: f64,
    pub weight_decay: f64,
    /// Fraction of `total_steps` after which the learning rates drop.
    pub lr_drop_at: f64,
    pub lr_drop_factor: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub seed: u64,
    /// Segmentation/keypoint instances sampled per image.
    pub max_instances: usize,
    /// Recompute detection targets by bipartite matching each step. When
    /// off, the encoder's slot placement is the target.
    pub matching: bool,
    pub objective: Objective,
    pub log_every: usize,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            task_weights: [1.5, 2.7, 0.5, 0.3],
            train_mask_ratio: 0.7,
            lr: 1e-4,
            stem_lr: 1e-5,
            weight_decay: 1e-4,
            lr_drop_at: 0.8,
            lr_drop_factor: 0.1,
            grad_clip: 0.1,
            batch_size: 8,
            total_steps: 1000,
            seed: 0,
            max_instances: 10,
            matching: true,
            objective: Objective::Mad,
            log_every: 10,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.task_weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return bad(format!("task weights must be finite and non-negative: {:?}", self.task_weights));
        }
        if !(self.train_mask_ratio > 0.0 && self.train_mask_ratio < 1.0) {
            return bad(format!("train_mask_ratio {} outside (0, 1)", self.train_mask_ratio));
        }
        if !(self.lr >= 0.0 && self.stem_lr >= 0.0 && self.weight_decay >= 0.0) {
            return bad("learning rates and weight decay must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.lr_drop_at) || !(self.grad_clip > 0.0) {
            return bad("lr_drop_at must lie in [0, 1] and grad_clip must be positive".into());
        }
        if self.batch_size == 0 || self.max_instances == 0 {
            return bad("batch_size and max_instances must be positive".into());
        }
        Ok(())
    }

    pub fn weight(&self, task: TaskKind) -> f64 {
        self.task_weights[task.index()]
    }

    pub fn rates(&self, step: usize) -> UpdateRates {
        let drop_at = (self.lr_drop_at * self.total_steps as f64).round() as usize;
        UpdateRates {
            lr: scheduled_lr(self.lr, step, drop_at, self.lr_drop_factor),
            stem_lr: scheduled_lr(self.stem_lr, step, drop_at, self.lr_drop_factor),
            weight_decay: self.weight_decay,
        }
    }
}

/// An image with its annotations.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Raster,
    pub annotation: SceneAnnotation,
}

/// One candidate target sequence with its two training views.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub seq: TaskSequence,
    pub full: MaskedView,
    pub partial: MaskedView,
}

/// A task instance in a batch. Captions carry one candidate per reference
/// caption; the training step keeps the one the model finds most likely.
#[derive(Debug, Clone)]
pub struct TaskItem {
    pub image: usize,
    pub candidates: Vec<Candidate>,
}

#[derive(Debug, Clone)]
pub struct TaskGroup {
    pub task: TaskKind,
    pub items: Vec<TaskItem>,
}

/// Task-mixed training batch: every image's tasks share its memory.
#[derive(Debug, Clone)]
pub struct TrainBatch<'a> {
    pub images: Vec<&'a Raster>,
    pub groups: Vec<TaskGroup>,
    pub objective: Objective,
}

impl TrainBatch<'_> {
    /// Training views (two per task instance for MAD, one for AR).
    pub fn view_count(&self) -> usize {
        let per = if self.objective == Objective::Mad { 2 } else { 1 };
        self.groups.iter().map(|g| g.items.len() * per).sum()
    }

    pub fn group(&self, task: TaskKind) -> Option<&TaskGroup> {
        self.groups.iter().find(|g| g.task == task)
    }
}

fn candidate(seq: TaskSequence, ratio: f64, mask: TokenId, rng: &mut impl Rng) -> Candidate {
    let full = mask_fully(&seq, mask);
    let positions = partial_positions(seq.body_len(), seq.augmented.map(|a| a.0), ratio, rng);
    let partial = apply_partial(&seq, &positions, mask);
    Candidate { seq, full, partial }
}

/// Encodes every task present in each sample. Segmentation and keypoint
/// instances are subsampled to `cfg.max_instances` per image; images
/// without captions or keypoints simply contribute no such items.
pub fn build_batch<'a>(samples: &[&'a Sample], codec: &Codec, cfg: &TrainConfig, rng: &mut impl Rng) -> Result<TrainBatch<'a>> {
    let mask = codec.vocab.mask();
    let mut groups: Vec<TaskGroup> = TaskKind::ALL.iter().map(|&task| TaskGroup { task, items: vec![] }).collect();
    let ar = cfg.objective == Objective::Ar;
    for (image, sample) in samples.iter().enumerate() {
        let ann = &sample.annotation;
        let mut push = |task: TaskKind, seqs: Vec<TaskSequence>, rng: &mut _| {
            let candidates = seqs.into_iter().map(|s| candidate(s, cfg.train_mask_ratio, mask, rng)).collect();
            groups[task.index()].items.push(TaskItem { image, candidates });
        };
        if !ann.instances.is_empty() {
            let det = if ar { codec.encode_detection_ar(ann, rng)? } else { codec.encode_detection(ann, rng)? };
            push(TaskKind::Detection, vec![det], rng);
        }
        let mut with_masks: Vec<usize> = (0..ann.instances.len()).filter(|&i| ann.instances[i].mask.is_some()).collect();
        with_masks.shuffle(rng);
        for &i in with_masks.iter().take(cfg.max_instances) {
            let seq = codec.encode_segmentation(&ann.instances[i])?;
            push(TaskKind::Segmentation, vec![seq], rng);
        }
        let mut with_kpts: Vec<usize> = (0..ann.instances.len()).filter(|&i| ann.instances[i].keypoints.is_some()).collect();
        with_kpts.shuffle(rng);
        for &i in with_kpts.iter().take(cfg.max_instances) {
            let seq = codec.encode_keypoint(&ann.instances[i], rng)?;
            push(TaskKind::Keypoint, vec![seq], rng);
        }
        if !ann.captions.is_empty() {
            let seqs = ann.captions.iter().map(|c| codec.encode_caption(c, rng)).collect::<Result<Vec<_>>>()?;
            let seqs = if ar { vec![seqs[rng.gen_range(0..seqs.len())].clone()] } else { seqs };
            push(TaskKind::Captioning, seqs, rng);
        }
    }
    groups.retain(|g| !g.items.is_empty());
    Ok(TrainBatch { images: samples.iter().map(|s| &s.image).collect(), groups, objective: cfg.objective })
}

/// Per-step loss bookkeeping. `per_task[t] = W_t · mean over layers`, and
/// `per_layer[l] = Σ_t W_t · CE_{t,l}`, so both sum (resp. average) to
/// `total`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub per_task: [f64; 4],
    pub per_layer: Vec<f64>,
    /// Supervised masked positions per task.
    pub n_masked: [usize; 4],
    pub present: [bool; 4],
}

/// CE items of one view: its supervised masked positions, each weighted
/// `scale / N_m`. Empty when nothing is supervised.
pub fn view_items(view: &MaskedView, row_offset: usize, scale: f64) -> Vec<CeItem> {
    let positions: Vec<usize> = view.supervised_positions().collect();
    if positions.is_empty() {
        return Vec::new();
    }
    let w = scale / positions.len() as f64;
    positions.into_iter().map(|p| CeItem { row: row_offset + p, target: view.target[p], weight: w }).collect()
}

/// Masked cross-entropy of one view:
/// `W_t / N_m · Σ_{i ∈ M, supervised} −log softmax_filter(logits_i)[target_i]`.
/// `logits` rows `row_offset + i` hold body position `i`. Returns `None`
/// when the view has no supervised masked position.
pub fn masked_ce<T: Float>(
    g: &mut Graph<'_, T>,
    logits: Var,
    row_offset: usize,
    view: &MaskedView,
    filter: &TaskFilter,
    weight: f64,
) -> Result<Option<Var>> {
    let items = view_items(view, row_offset, weight);
    if items.is_empty() {
        return Ok(None);
    }
    g.cross_entropy(logits, filter, &items).map(Some)
}

/// Accumulates `(task, layer)` CE terms and turns them into the total.
struct LossTerms {
    terms: Vec<Vec<Vec<Var>>>,
    n_masked: [usize; 4],
}

impl LossTerms {
    fn new(layers: usize) -> Self {
        LossTerms { terms: vec![vec![Vec::new(); layers]; 4], n_masked: [0; 4] }
    }

    fn add(&mut self, task: TaskKind, layer: usize, v: Var) {
        self.terms[task.index()][layer].push(v);
    }

    fn finish<T: Float>(self, g: &mut Graph<'_, T>, weights: &[f64; 4]) -> (Option<Var>, LossBreakdown) {
        let layers = self.terms[0].len();
        let mut bd = LossBreakdown { per_layer: vec![0.0; layers], n_masked: self.n_masked, ..Default::default() };
        let mut total_terms = Vec::new();
        for (t, per_layer) in self.terms.iter().enumerate() {
            for (l, vars) in per_layer.iter().enumerate() {
                if vars.is_empty() {
                    continue;
                }
                bd.present[t] = true;
                let ce = if vars.len() == 1 { vars[0] } else { g.sum(vars) };
                let value = g.scalar(ce);
                bd.per_layer[l] += weights[t] * value;
                bd.per_task[t] += weights[t] * value / layers as f64;
                total_terms.push(g.scale(ce, weights[t] / layers as f64));
            }
        }
        bd.total = bd.per_task.iter().sum();
        let total = if total_terms.is_empty() { None } else { Some(g.sum(&total_terms)) };
        (total, bd)
    }
}

/// Concatenated decoder input for a list of views of one task.
fn stack_inputs<'v>(views: impl Iterator<Item = &'v MaskedView>) -> (Vec<TokenId>, usize) {
    let mut tokens = Vec::new();
    let mut len = 0;
    for v in views {
        len = v.input.len();
        tokens.extend_from_slice(&v.input);
    }
    (tokens, len)
}

/// Filtered last-layer probabilities of item `j` from stacked body logits.
fn item_probs<T: Float>(g: &Graph<'_, T>, logits: Var, j: usize, body_len: usize, filter: &TaskFilter) -> Array2<f32> {
    let rows = g.value(logits).slice(s![j * body_len..(j + 1) * body_len, ..]);
    kernels::filtered_softmax(rows, filter.ids())
}

/// Builds the weighted MAD loss of a batch in `g`.
///
/// Per task, CE is normalized per view by its `N_m`, summed over views and
/// divided by the number of images; per-layer values are averaged and
/// weighted by `W_t`. Detection targets come from matching the fully
/// masked view's predictions to the ground truth; captions use the
/// reference with the lowest NLL under those predictions.
pub fn mad_loss<T: Float>(
    model: &Model<T>,
    g: &mut Graph<'_, T>,
    batch: &TrainBatch<'_>,
    codec: &Codec,
    cfg: &TrainConfig,
) -> Result<(Option<Var>, LossBreakdown)> {
    let vocab = &codec.vocab;
    let layers = model.config().dec_layers;
    let memory = model.encode(g, &batch.images)?;
    let scale = 1.0 / batch.images.len() as f64;
    let mut terms = LossTerms::new(layers);
    for group in &batch.groups {
        let task = group.task;
        let filter = vocab.task_filter(task);
        let mem_index: Vec<usize> = group.items.iter().map(|it| it.image).collect();
        let prompt_len = codec.config.prompt_len(task);
        let body_len = codec.config.body_len(task);
        let rows: Vec<usize> = (prompt_len..prompt_len + body_len).collect();
        let two_pass = (task == TaskKind::Detection && cfg.matching)
            || (task == TaskKind::Captioning && group.items.iter().any(|it| it.candidates.len() > 1));

        let mut chosen: Vec<Candidate> = group.items.iter().map(|it| it.candidates[0].clone()).collect();
        if two_pass {
            let (tokens, len) = stack_inputs(chosen.iter().map(|c| &c.full));
            let input = DecoderInput { tokens: &tokens, seq_len: len, mem_index: &mem_index };
            let logits = model.decoder_forward(g, &memory, input, DecoderMode::Bidirectional, &rows, Heads::All)?;
            let last = *logits.last().expect("at least one layer");
            for (j, item) in group.items.iter().enumerate() {
                let probs = item_probs(g, last, j, body_len, &filter);
                match task {
                    TaskKind::Detection => {
                        let preds = SlotPrediction::from_probs(probs.view(), vocab);
                        let c = &mut chosen[j];
                        let t = detection_targets(Some(&preds), &c.seq, vocab, MatchWeights::default());
                        c.full.retarget(&t.input_body, t.target.clone(), t.supervise.clone());
                        c.partial.retarget(&t.input_body, t.target, t.supervise);
                    }
                    _ => {
                        let refs: Vec<Vec<TokenId>> = item.candidates.iter().map(|c| c.seq.body.clone()).collect();
                        chosen[j] = item.candidates[caption_target(probs.view(), &refs)].clone();
                    }
                }
            }
            for (l, &lg) in logits.iter().enumerate() {
                add_views(g, &mut terms, task, l, lg, chosen.iter().map(|c| &c.full), body_len, &filter, scale, l == 0)?;
            }
            let (tokens, len) = stack_inputs(chosen.iter().map(|c| &c.partial));
            let input = DecoderInput { tokens: &tokens, seq_len: len, mem_index: &mem_index };
            let logits = model.decoder_forward(g, &memory, input, DecoderMode::Bidirectional, &rows, Heads::All)?;
            for (l, &lg) in logits.iter().enumerate() {
                add_views(g, &mut terms, task, l, lg, chosen.iter().map(|c| &c.partial), body_len, &filter, scale, l == 0)?;
            }
        } else {
            let views: Vec<&MaskedView> = chosen.iter().flat_map(|c| [&c.full, &c.partial]).collect();
            let (tokens, len) = stack_inputs(views.iter().copied());
            let doubled: Vec<usize> = mem_index.iter().flat_map(|&m| [m, m]).collect();
            let input = DecoderInput { tokens: &tokens, seq_len: len, mem_index: &doubled };
            let logits = model.decoder_forward(g, &memory, input, DecoderMode::Bidirectional, &rows, Heads::All)?;
            for (l, &lg) in logits.iter().enumerate() {
                add_views(g, &mut terms, task, l, lg, views.iter().copied(), body_len, &filter, scale, l == 0)?;
            }
        }
    }
    Ok(terms.finish(g, &cfg.task_weights))
}

#[allow(clippy::too_many_arguments)]
fn add_views<'v, T: Float>(
    g: &mut Graph<'_, T>,
    terms: &mut LossTerms,
    task: TaskKind,
    layer: usize,
    logits: Var,
    views: impl Iterator<Item = &'v MaskedView>,
    body_len: usize,
    filter: &TaskFilter,
    scale: f64,
    count: bool,
) -> Result<()> {
    let mut items = Vec::new();
    for (j, view) in views.enumerate() {
        let v = view_items(view, j * body_len, scale);
        if count {
            terms.n_masked[task.index()] += v.len();
        }
        items.extend(v);
    }
    if !items.is_empty() {
        let ce = g.cross_entropy(logits, filter, &items)?;
        terms.add(task, layer, ce);
    }
    Ok(())
}

/// Builds the next-token loss of a batch in `g`. Each sequence is fed as
/// prompt + body; position `prompt_len − 1 + i` predicts body token `i` and
/// the last position predicts `<Pad>` as the end marker.
pub fn ar_loss<T: Float>(
    model: &Model<T>,
    g: &mut Graph<'_, T>,
    batch: &TrainBatch<'_>,
    codec: &Codec,
    cfg: &TrainConfig,
) -> Result<(Option<Var>, LossBreakdown)> {
    let vocab = &codec.vocab;
    let layers = model.config().dec_layers;
    let memory: Memory = model.encode(g, &batch.images)?;
    let scale = 1.0 / batch.images.len() as f64;
    let mut terms = LossTerms::new(layers);
    for group in &batch.groups {
        let task = group.task;
        let filter = vocab.ar_filter(task);
        let prompt_len = codec.config.prompt_len(task);
        let body_len = codec.config.body_len(task);
        let mem_index: Vec<usize> = group.items.iter().map(|it| it.image).collect();
        let mut tokens = Vec::new();
        for item in &group.items {
            let seq = &item.candidates[0].seq;
            tokens.extend_from_slice(&seq.prompt);
            tokens.extend_from_slice(&seq.body);
        }
        let len = prompt_len + body_len;
        let rows: Vec<usize> = (prompt_len - 1..len).collect();
        let input = DecoderInput { tokens: &tokens, seq_len: len, mem_index: &mem_index };
        let logits = model.decoder_forward(g, &memory, input, DecoderMode::Causal, &rows, Heads::All)?;
        let mut items = Vec::new();
        for (j, item) in group.items.iter().enumerate() {
            let seq = &item.candidates[0].seq;
            let n = seq.supervise.iter().filter(|&&s| s).count() + 1;
            let w = scale / n as f64;
            let base = j * rows.len();
            for (i, (&tok, &sup)) in seq.body.iter().zip(&seq.supervise).enumerate() {
                if sup {
                    items.push(CeItem { row: base + i, target: tok, weight: w });
                }
            }
            items.push(CeItem { row: base + body_len, target: vocab.pad(), weight: w });
        }
        terms.n_masked[task.index()] += items.len();
        for (l, &lg) in logits.iter().enumerate() {
            let ce = g.cross_entropy(lg, &filter, &items)?;
            terms.add(task, l, ce);
        }
    }
    Ok(terms.finish(g, &cfg.task_weights))
}

/// Loss of a batch under the configured objective.
pub fn batch_loss<T: Float>(
    model: &Model<T>,
    g: &mut Graph<'_, T>,
    batch: &TrainBatch<'_>,
    codec: &Codec,
    cfg: &TrainConfig,
) -> Result<(Option<Var>, LossBreakdown)> {
    match batch.objective {
        Objective::Mad => mad_loss(model, g, batch, codec, cfg),
        Objective::Ar => ar_loss(model, g, batch, codec, cfg),
    }
}

/// Forward, backward, clipping and one AdamW update. A non-finite loss or
/// gradient aborts the step without touching the parameters.
pub fn train_step(
    model: &mut Model<f32>,
    opt: &mut AdamW,
    batch: &TrainBatch<'_>,
    codec: &Codec,
    cfg: &TrainConfig,
    step: usize,
) -> Result<LossBreakdown> {
    let (grads, breakdown) = {
        let mut g = Graph::new(model.params());
        let (total, breakdown) = batch_loss(model, &mut g, batch, codec, cfg)?;
        if !breakdown.total.is_finite() {
            return Err(Error::NonFiniteLoss { step, detail: serde_json::to_string(&breakdown)? });
        }
        let Some(total) = total else { return Ok(breakdown) };
        (g.backward(total), breakdown)
    };
    let mut grads = grads;
    if !grads.all_finite() {
        return Err(Error::NonFiniteLoss { step, detail: format!("non-finite gradient; {}", serde_json::to_string(&breakdown)?) });
    }
    clip_grad_norm(&mut grads, cfg.grad_clip);
    opt.step(model.params_mut(), &grads, cfg.rates(step));
    Ok(breakdown)
}

/// Finite-difference check of the full training loss of `batch` at double
/// precision. Use it with `matching` off and one caption per image:
/// matching and caption selection pick targets by argmax, which makes the
/// loss piecewise.
pub fn check_gradients(
    model: &Model<f64>,
    batch: &TrainBatch<'_>,
    codec: &Codec,
    cfg: &TrainConfig,
    coords_per_tensor: usize,
    rng: &mut impl Rng,
) -> Result<GradCheckReport> {
    let mut params = model.params().clone();
    let loss = |g: &mut Graph<'_, f64>| {
        let (total, _) = batch_loss(model, g, batch, codec, cfg)?;
        total.ok_or_else(|| Error::Config("batch has no supervised masked positions".into()))
    };
    grad_check(&mut params, loss, 1e-4, coords_per_tensor, rng)
}
