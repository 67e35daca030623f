use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{build_batch, train_step, AdamW, LossBreakdown, Sample, TrainConfig};
use crate::codec::Codec;
use crate::error::{Error, Result};
use crate::model::Model;

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: LossBreakdown,
    pub lr: f64,
    pub elapsed_ms: f64,
}

/// Called after every step; may write logs or checkpoints.
pub type TrainObserver<'a> = dyn FnMut(&StepRecord, &Model<f32>) -> Result<()> + 'a;

#[derive(Debug, Clone, Default)]
pub struct TrainSummary {
    pub history: Vec<StepRecord>,
}

impl TrainSummary {
    /// Mean total loss over the last `n` steps.
    pub fn recent_loss(&self, n: usize) -> f64 {
        let tail = &self.history[self.history.len().saturating_sub(n)..];
        tail.iter().map(|r| r.loss.total).sum::<f64>() / tail.len().max(1) as f64
    }
}

/// Runs `cfg.total_steps` steps over `samples`, visiting them in a fresh
/// seeded shuffle each epoch.
pub fn train(
    model: &mut Model<f32>,
    codec: &Codec,
    samples: &[Sample],
    cfg: &TrainConfig,
    observer: &mut TrainObserver<'_>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("no training samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(model.params());
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let start = Instant::now();
    let mut summary = TrainSummary::default();
    for step in 0..cfg.total_steps {
        let mut picked = Vec::with_capacity(cfg.batch_size);
        while picked.len() < cfg.batch_size.min(samples.len()) {
            if cursor == order.len() {
                order = (0..samples.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picked.push(&samples[order[cursor]]);
            cursor += 1;
        }
        let batch = build_batch(&picked, codec, cfg, &mut rng)?;
        let loss = train_step(model, &mut opt, &batch, codec, cfg, step)?;
        let record = StepRecord { step, loss, lr: cfg.rates(step).lr, elapsed_ms: start.elapsed().as_secs_f64() * 1e3 };
        observer(&record, model)?;
        summary.history.push(record);
    }
    Ok(summary)
}
