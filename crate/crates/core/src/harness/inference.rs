//! Full multi-task inference on one image and dataset-level evaluation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::bench::{benchmark_decode, BenchRow, BenchSpec};
use super::config::EvalConfig;
use super::metrics::{self, BleuStats, ImageEval, PckCounts, PixelMask, Scored, Truth};
use super::shapes::DatasetRecord;
use crate::codec::{BBox, Bitmask, Codec, DecodeStats, ScoredBox, SceneAnnotation};
use crate::error::Result;
use crate::masking::{ensemble_refine, RefinementSchedule};
use crate::model::{ImageMemory, Model, Raster};
use crate::training::Objective;
use crate::vocab::{TaskKind, TokenId};

/// Decoding settings for [`run_inference`].
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceOptions {
    pub mode: Objective,
    pub detection: RefinementSchedule,
    pub segmentation: RefinementSchedule,
    pub keypoint: RefinementSchedule,
    pub caption: RefinementSchedule,
    pub instance_threshold: f64,
    pub max_instances: usize,
    /// Only instances of this class get keypoint decodes.
    pub person_class: Option<usize>,
}

impl InferenceOptions {
    pub fn from_eval(cfg: &EvalConfig, mode: Objective, person_class: Option<usize>) -> Result<Self> {
        Ok(InferenceOptions {
            mode,
            detection: EvalConfig::schedule(&cfg.detection_ratios)?,
            segmentation: EvalConfig::schedule(&cfg.segmentation_ratios)?,
            keypoint: EvalConfig::schedule(&cfg.keypoint_ratios)?,
            caption: EvalConfig::schedule(&cfg.caption_ratios)?,
            instance_threshold: cfg.instance_threshold,
            max_instances: cfg.max_instances,
            person_class,
        })
    }

    fn schedule(&self, task: TaskKind) -> &RefinementSchedule {
        match task {
            TaskKind::Detection => &self.detection,
            TaskKind::Segmentation => &self.segmentation,
            TaskKind::Keypoint => &self.keypoint,
            TaskKind::Captioning => &self.caption,
        }
    }
}

/// One kept detection with its downstream predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedInstance {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
    /// Box-aligned mask.
    pub mask: Option<Bitmask>,
    pub keypoints: Option<Vec<(f64, f64)>>,
}

/// Everything predicted for one image.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScenePrediction {
    pub detections: Vec<ScoredBox>,
    pub instances: Vec<PredictedInstance>,
    pub caption: Vec<String>,
    pub decoder_passes: usize,
    pub stats: DecodeStats,
}

impl ScenePrediction {
    /// The ground truth dressed up as a perfect prediction.
    pub fn from_annotation(ann: &SceneAnnotation) -> Self {
        let detections = ann.instances.iter().map(|i| ScoredBox { bbox: i.bbox, class_id: i.class_id, score: 1.0 }).collect();
        let instances = ann
            .instances
            .iter()
            .map(|i| PredictedInstance {
                bbox: i.bbox,
                class_id: i.class_id,
                score: 1.0,
                mask: i.mask.clone(),
                keypoints: i.keypoints.as_ref().map(|k| k.iter().map(|k| (k.x, k.y)).collect()),
            })
            .collect();
        ScenePrediction { detections, instances, caption: ann.captions.first().cloned().unwrap_or_default(), ..Default::default() }
    }
}

struct Decoded {
    tokens: Vec<TokenId>,
    probs: ndarray::Array2<f32>,
}

fn decode_task(
    model: &Model<f32>,
    codec: &Codec,
    memory: &ImageMemory<f32>,
    task: TaskKind,
    prompt: &[TokenId],
    opts: &InferenceOptions,
    rng: &mut ChaCha8Rng,
) -> Result<Decoded> {
    let body_len = codec.config.body_len(task);
    let vocab = &codec.vocab;
    match opts.mode {
        Objective::Mad => {
            let filter = vocab.task_filter(task);
            let decode = |tokens: &[TokenId]| model.mad_probs(memory, tokens, prompt.len(), &filter);
            let r = ensemble_refine(decode, prompt, body_len, opts.schedule(task), vocab.mask(), rng)?;
            Ok(Decoded { tokens: r.tokens, probs: r.probs })
        }
        Objective::Ar => {
            let out = model.ar_generate(memory, prompt, body_len, &vocab.ar_filter(task))?;
            Ok(Decoded { tokens: out.tokens, probs: out.probs })
        }
    }
}

/// Detection first; the kept boxes prompt segmentation and (for the person
/// class) keypoints; captioning last. Decoder passes are counted from the
/// model's counters.
pub fn run_inference(model: &Model<f32>, codec: &Codec, image: &Raster, opts: &InferenceOptions, rng: &mut ChaCha8Rng) -> Result<ScenePrediction> {
    let before = model.counters().decoder_passes();
    let memory = model.image_memory(image)?;
    let vocab = &codec.vocab;
    let mut out = ScenePrediction::default();

    let det = decode_task(model, codec, &memory, TaskKind::Detection, &[vocab.prompt(TaskKind::Detection)], opts, rng)?;
    let (detections, stats) = codec.decode_detection(&det.tokens, det.probs.view());
    out.stats.merge(stats);
    out.detections = detections;

    let mut kept: Vec<&ScoredBox> = out.detections.iter().filter(|d| d.score >= opts.instance_threshold).collect();
    kept.sort_by(|a, b| b.score.total_cmp(&a.score));
    kept.truncate(opts.max_instances);
    let mut instances = Vec::with_capacity(kept.len());
    for d in kept {
        let mut inst = PredictedInstance { bbox: d.bbox, class_id: d.class_id, score: d.score, mask: None, keypoints: None };
        if d.bbox.is_valid() {
            let prompt = codec.prompt_for(TaskKind::Segmentation, &d.bbox, d.class_id)?;
            let seg = decode_task(model, codec, &memory, TaskKind::Segmentation, &prompt, opts, rng)?;
            inst.mask = Some(codec.decode_segmentation(seg.probs.view()).mask);
            if opts.person_class == Some(d.class_id) {
                let prompt = codec.prompt_for(TaskKind::Keypoint, &d.bbox, d.class_id)?;
                let kp = decode_task(model, codec, &memory, TaskKind::Keypoint, &prompt, opts, rng)?;
                let (kps, stats) = codec.decode_keypoint(&kp.tokens, kp.probs.view());
                out.stats.merge(stats);
                inst.keypoints = Some(kps.iter().map(|k| (k.x, k.y)).collect());
            }
        }
        instances.push(inst);
    }
    out.instances = instances;

    let cap = decode_task(model, codec, &memory, TaskKind::Captioning, &[vocab.prompt(TaskKind::Captioning)], opts, rng)?;
    let (words, stats) = codec.decode_caption(&cap.tokens);
    out.stats.merge(stats);
    out.caption = words;
    out.decoder_passes = model.counters().decoder_passes() - before;
    Ok(out)
}

/// Metric suite over a set of images. All metrics lie in `[0, 1]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub images: usize,
    pub detection_ap50: f64,
    pub detection_map: f64,
    pub segmentation_ap50: f64,
    pub keypoint_pck: f64,
    pub keypoint_visible: usize,
    pub caption_bleu4: f64,
    pub captioned_images: usize,
}

/// Scores predictions against ground truth. `preds[i]` belongs to `gts[i]`.
pub fn score_predictions(preds: &[ScenePrediction], gts: &[&SceneAnnotation], person_class: Option<usize>, pck_alpha: f64) -> Metrics {
    let mut det = Vec::with_capacity(preds.len());
    let mut seg = Vec::with_capacity(preds.len());
    let mut pck = PckCounts::default();
    let mut bleu = BleuStats::default();
    let mut captioned = 0;
    for (p, g) in preds.iter().zip(gts) {
        let size = g.image_size;
        det.push(ImageEval {
            preds: p.detections.iter().map(|d| Scored { item: d.bbox, class_id: d.class_id, score: d.score }).collect(),
            gts: g.instances.iter().map(|i| Truth { item: i.bbox, class_id: i.class_id }).collect(),
        });
        seg.push(ImageEval {
            preds: p
                .instances
                .iter()
                .filter_map(|i| i.mask.as_ref().map(|m| Scored { item: PixelMask::paste(m, &i.bbox, size), class_id: i.class_id, score: i.score }))
                .collect(),
            gts: g
                .instances
                .iter()
                .filter_map(|i| i.mask.as_ref().map(|m| Truth { item: PixelMask::paste(m, &i.bbox, size), class_id: i.class_id }))
                .collect(),
        });
        if let Some(person) = person_class {
            let people: Vec<_> = g.instances.iter().filter(|i| i.class_id == person && i.keypoints.is_some()).collect();
            let cands: Vec<&PredictedInstance> = p.instances.iter().filter(|i| i.class_id == person && i.keypoints.is_some()).collect();
            let boxes: Vec<(BBox, f64)> = cands.iter().map(|i| (i.bbox, i.score)).collect();
            let gt_boxes: Vec<BBox> = people.iter().map(|i| i.bbox).collect();
            for (gt, m) in people.iter().zip(metrics::match_boxes(&boxes, &gt_boxes, 0.5)) {
                let kp = m.and_then(|k| cands[k].keypoints.as_deref());
                pck.add(metrics::eval_keypoints(kp, &gt.bbox, gt.keypoints.as_deref().unwrap_or(&[]), size, pck_alpha));
            }
        }
        if !g.captions.is_empty() {
            bleu.add(&p.caption, &g.captions);
            captioned += 1;
        }
    }
    let aps = metrics::eval_detection(&det, &metrics::coco_thresholds());
    Metrics {
        images: preds.len(),
        detection_ap50: aps[0],
        detection_map: aps.iter().sum::<f64>() / aps.len() as f64,
        segmentation_ap50: metrics::eval_segmentation(&seg, 0.5),
        keypoint_pck: pck.value(),
        keypoint_visible: pck.visible,
        caption_bleu4: bleu.score(),
        captioned_images: captioned,
    }
}

/// Metrics plus decode statistics and latency of one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: Objective,
    pub metrics: Metrics,
    pub decoder_passes: usize,
    pub decode_stats: DecodeStats,
    /// Detection decode latency in both modes on the first image.
    pub latency: Vec<BenchRow>,
}

/// Seeded per image, so results do not depend on evaluation order.
pub fn image_rng(seed: u64, image_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(image_id);
    rng
}

pub fn predict_all(model: &Model<f32>, codec: &Codec, records: &[&DatasetRecord], opts: &InferenceOptions, seed: u64) -> Result<Vec<ScenePrediction>> {
    records
        .iter()
        .map(|r| run_inference(model, codec, &r.image, opts, &mut image_rng(seed, r.id)))
        .collect()
}

/// Runs inference on `records` and scores it. With `with_latency`, the
/// first image is also benchmarked on detection in MAD(K=0) and AR mode.
pub fn evaluate(
    model: &Model<f32>,
    codec: &Codec,
    records: &[&DatasetRecord],
    cfg: &EvalConfig,
    mode: Objective,
    person_class: Option<usize>,
    with_latency: bool,
) -> Result<EvalReport> {
    let records = if cfg.max_images > 0 && records.len() > cfg.max_images { &records[..cfg.max_images] } else { records };
    let opts = InferenceOptions::from_eval(cfg, mode, person_class)?;
    let preds = predict_all(model, codec, records, &opts, cfg.seed)?;
    let gts: Vec<&SceneAnnotation> = records.iter().map(|r| &r.annotation).collect();
    let metrics = score_predictions(&preds, &gts, person_class, cfg.pck_alpha);
    let mut decode_stats = DecodeStats::default();
    for p in &preds {
        decode_stats.merge(p.stats);
    }
    let mut latency = Vec::new();
    if let (true, Some(first)) = (with_latency, records.first()) {
        for (m, k) in [(Objective::Mad, 0), (Objective::Ar, 0)] {
            let spec = BenchSpec { task: TaskKind::Detection, mode: m, refine_k: k, trials: cfg.bench_trials, warmup: cfg.bench_warmup };
            latency.push(benchmark_decode(model, codec, &first.image, &spec)?);
        }
    }
    Ok(EvalReport { mode, metrics, decoder_passes: preds.iter().map(|p| p.decoder_passes).sum(), decode_stats, latency })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CodecConfig;
    use crate::harness::shapes::{generate_dataset, ShapesWorldConfig};
    use crate::model::ModelConfig;
    use crate::vocab::Vocab;

    fn setup() -> (ShapesWorldConfig, Codec, Model<f32>) {
        let data = ShapesWorldConfig { image_size: (64, 64), max_shapes: 3, ..Default::default() };
        let codec = Codec::new(
            Vocab::new(data.vocab_spec(32)).unwrap(),
            CodecConfig { num_slots: 6, mask_side: 4, num_keypoints: 5, caption_len: 8, caption_augment: true },
        )
        .unwrap();
        let cfg = ModelConfig {
            embed_dim: 16,
            num_heads: 2,
            ffn_dim: 32,
            enc_layers: 1,
            dec_layers: 1,
            max_seq_len: codec.config.max_sequence_len(),
            vocab_size: codec.vocab.total_size(),
            image_size: (64, 64),
            stem_channels: (4, 8),
            residual: true,
        };
        let model = Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        (data, codec, model)
    }

    #[test]
    fn self_evaluation_is_perfect_and_empty_is_zero() {
        let data = ShapesWorldConfig { image_size: (96, 96), ..Default::default() };
        let records = generate_dataset(&data, 100, 0).unwrap();
        let gts: Vec<&SceneAnnotation> = records.iter().map(|r| &r.annotation).collect();
        let perfect: Vec<ScenePrediction> = gts.iter().map(|g| ScenePrediction::from_annotation(g)).collect();
        let m = score_predictions(&perfect, &gts, data.person_class(), 0.1);
        assert_eq!((m.detection_ap50, m.detection_map, m.segmentation_ap50, m.keypoint_pck, m.caption_bleu4), (1.0, 1.0, 1.0, 1.0, 1.0));
        assert!(m.keypoint_visible > 0);
        let empty = vec![ScenePrediction::default(); gts.len()];
        let m = score_predictions(&empty, &gts, data.person_class(), 0.1);
        assert_eq!((m.detection_ap50, m.detection_map, m.segmentation_ap50, m.keypoint_pck, m.caption_bleu4), (0.0, 0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn pass_counts_follow_the_schedules() {
        let (data, codec, model) = setup();
        let image = &generate_dataset(&data, 1, 0).unwrap()[0].image;
        let eval = EvalConfig { instance_threshold: 0.0, ..Default::default() };
        let opts = InferenceOptions::from_eval(&eval, Objective::Mad, data.person_class()).unwrap();
        let out = run_inference(&model, &codec, image, &opts, &mut image_rng(0, 0)).unwrap();
        let people = out.instances.iter().filter(|i| Some(i.class_id) == data.person_class()).count();
        assert_eq!(out.decoder_passes, 1 + out.instances.len() + 2 * people + 4);
        assert!(out.instances.len() <= eval.max_instances);

        let opts = InferenceOptions { mode: Objective::Ar, ..opts };
        let out = run_inference(&model, &codec, image, &opts, &mut image_rng(0, 0)).unwrap();
        let people = out.instances.iter().filter(|i| Some(i.class_id) == data.person_class()).count();
        let c = &codec.config;
        let expected = 5 * c.num_slots + out.instances.len() * 16 + people * 15 + c.caption_len;
        assert_eq!(out.decoder_passes, expected);
    }

    #[test]
    fn zero_detections_mean_no_instance_decodes() {
        let (data, codec, model) = setup();
        let image = &generate_dataset(&data, 1, 0).unwrap()[0].image;
        let eval = EvalConfig { instance_threshold: 1.0, caption_ratios: vec![], ..Default::default() };
        let opts = InferenceOptions::from_eval(&eval, Objective::Mad, data.person_class()).unwrap();
        let out = run_inference(&model, &codec, image, &opts, &mut image_rng(0, 0)).unwrap();
        assert!(out.instances.is_empty());
        assert_eq!(out.decoder_passes, 2);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let (data, codec, model) = setup();
        let records = generate_dataset(&data, 0, 3).unwrap();
        let refs: Vec<&DatasetRecord> = records.iter().collect();
        let cfg = EvalConfig { bench_trials: 1, bench_warmup: 0, ..Default::default() };
        let a = evaluate(&model, &codec, &refs, &cfg, Objective::Mad, data.person_class(), false).unwrap();
        let b = evaluate(&model, &codec, &refs, &cfg, Objective::Mad, data.person_class(), false).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.metrics.images, 3);
    }
}
