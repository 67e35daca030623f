//! Decode-latency benchmark: MAD(K) versus greedy AR on identical weights.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{BBox, Codec};
use crate::error::{Error, Result};
use crate::masking::{ensemble_refine, RefinementSchedule};
use crate::model::{Model, Raster};
use crate::training::Objective;
use crate::vocab::{TaskKind, TokenId};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSpec {
    pub task: TaskKind,
    pub mode: Objective,
    /// Refinement stages after the first MAD pass, each re-masking half the
    /// body (ignored for AR).
    pub refine_k: usize,
    pub trials: usize,
    pub warmup: usize,
}

/// One benchmark result. Times are per image, warm-up excluded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub task: String,
    pub mode: Objective,
    pub refine_k: usize,
    pub body_len: usize,
    pub decoder_passes: usize,
    pub trials: usize,
    pub encode_ms: f64,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

pub const CSV_HEADER: &str = "task,mode,refine_k,body_len,decoder_passes,trials,encode_ms,mean_ms,median_ms,min_ms,max_ms";

impl BenchRow {
    pub fn csv(&self) -> String {
        let mode = match self.mode {
            Objective::Mad => "mad",
            Objective::Ar => "ar",
        };
        format!(
            "{},{},{},{},{},{},{:.4},{:.4},{:.4},{:.4},{:.4}",
            self.task, mode, self.refine_k, self.body_len, self.decoder_passes, self.trials, self.encode_ms, self.mean_ms, self.median_ms, self.min_ms, self.max_ms
        )
    }
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv());
        out.push('\n');
    }
    out
}

fn bench_prompt(codec: &Codec, task: TaskKind) -> Result<Vec<TokenId>> {
    match task {
        TaskKind::Detection | TaskKind::Captioning => Ok(vec![codec.vocab.prompt(task)]),
        TaskKind::Segmentation | TaskKind::Keypoint => codec.prompt_for(task, &BBox::new(0.25, 0.25, 0.75, 0.75), 0),
    }
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Times the decode of one task sequence. The image is encoded once,
/// outside the timed region (its cost is reported as `encode_ms`); each
/// trial then runs the full decode: `1 + K` bidirectional passes for MAD,
/// `body_len` cached causal passes for AR. Pass counts come from the
/// model's counters and must agree across trials.
pub fn benchmark_decode(model: &Model<f32>, codec: &Codec, image: &Raster, spec: &BenchSpec) -> Result<BenchRow> {
    if spec.trials == 0 {
        return Err(Error::Config("benchmark needs at least one trial".into()));
    }
    let t0 = Instant::now();
    let memory = model.image_memory(image)?;
    let encode_ms = t0.elapsed().as_secs_f64() * 1e3;
    let vocab = &codec.vocab;
    let task = spec.task;
    let prompt = bench_prompt(codec, task)?;
    let body_len = codec.config.body_len(task);
    let schedule = RefinementSchedule::new(vec![0.5; spec.refine_k])?;
    let mad_filter = vocab.task_filter(task);
    let ar_filter = vocab.ar_filter(task);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut run = || -> Result<usize> {
        let before = model.counters().decoder_passes();
        match spec.mode {
            Objective::Mad => {
                let decode = |tokens: &[TokenId]| model.mad_probs(&memory, tokens, prompt.len(), &mad_filter);
                ensemble_refine(decode, &prompt, body_len, &schedule, vocab.mask(), &mut rng)?;
            }
            Objective::Ar => {
                model.ar_generate(&memory, &prompt, body_len, &ar_filter)?;
            }
        }
        Ok(model.counters().decoder_passes() - before)
    };
    for _ in 0..spec.warmup {
        run()?;
    }
    let mut times = Vec::with_capacity(spec.trials);
    let mut passes = None;
    for _ in 0..spec.trials {
        let t = Instant::now();
        let n = run()?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
        if passes.is_some_and(|p| p != n) {
            return Err(Error::Shape(format!("decoder pass count changed between trials ({passes:?} vs {n})")));
        }
        passes = Some(n);
    }
    let mean_ms = times.iter().sum::<f64>() / times.len() as f64;
    let min_ms = times.iter().copied().fold(f64::INFINITY, f64::min);
    let max_ms = times.iter().copied().fold(0.0, f64::max);
    Ok(BenchRow {
        task: task.name().to_string(),
        mode: spec.mode,
        refine_k: if spec.mode == Objective::Mad { spec.refine_k } else { 0 },
        body_len,
        decoder_passes: passes.unwrap_or(0),
        trials: spec.trials,
        encode_ms,
        mean_ms,
        median_ms: median(&mut times),
        min_ms,
        max_ms,
    })
}
