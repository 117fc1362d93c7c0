//! Mixed-batch training with per-partition gradient routing.
//!
//! Batches mix single- and multi-channel utterances; each item is forwarded
//! through its own path, so its gradients touch only that frontend's
//! partition plus the shared backend. Multi-channel data can additionally be
//! stripped of its auxiliary channels and re-enter the epoch as derived
//! single-channel data, which is what lets the single-channel frontend learn
//! from multi-channel recordings.

mod optimizer;

pub use optimizer::{Optimizer, OptimizerState};

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural_core::softmax_ce;
use crate::params::{GradStore, Partition};
use crate::rng::{derive_seed, rng_from_seed};
use crate::signal_sim::MultiChannelUtterance;
use crate::unified_model::{Model, Route};

/// How single- and multi-channel items are mixed within an epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum MixPolicy {
    /// Shuffle the union; batch composition follows dataset sizes.
    Proportional,
    /// Fixed single-channel fraction per batch.
    FixedRatio(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub mix: MixPolicy,
    /// Add every multi-channel utterance once per epoch as its
    /// auxiliary-stripped single-channel twin.
    pub derive_sc_from_mc: bool,
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            batch_size: 8,
            mix: MixPolicy::Proportional,
            derive_sc_from_mc: true,
            epochs: 5,
            learning_rate: 1e-3,
            optimizer: Optimizer::default(),
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be finite and >= 0".into()));
        }
        if let MixPolicy::FixedRatio(r) = self.mix {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("mix ratio {r} outside [0, 1]")));
            }
        }
        self.optimizer.validate()
    }
}

/// Data type of a batch item, independent of the model mode that will
/// consume it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputType {
    Sc,
    Mc,
}

#[derive(Clone, Debug)]
pub struct BatchItem {
    pub utterance: Arc<MultiChannelUtterance>,
    pub input_type: InputType,
}

#[derive(Clone, Debug, Default)]
pub struct TrainingBatch {
    pub items: Vec<BatchItem>,
}

/// Strip the auxiliary channels: identical primary waveform, labels, and
/// SNR tag; the id gains a "-scderived" suffix.
pub fn derive_sc_from_mc(mc: &MultiChannelUtterance) -> Result<MultiChannelUtterance> {
    if !mc.is_multi_channel() {
        return Err(Error::InvalidInput(format!(
            "{} has no auxiliary channels to strip",
            mc.utterance_id
        )));
    }
    Ok(MultiChannelUtterance {
        utterance_id: format!("{}-scderived", mc.utterance_id),
        sample_rate: mc.sample_rate,
        primary: mc.primary.clone(),
        auxiliary: vec![],
        labels: mc.labels.clone(),
        snr_db: mc.snr_db,
    })
}

fn shuffled<T>(mut items: Vec<T>, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<T> {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
    items
}

/// Deterministic epoch batches. The item stream depends only on the data,
/// the configuration, and the seed, never on the model mode, so runs that
/// differ only in routing consume identical streams.
pub fn build_batches(
    sc_items: &[Arc<MultiChannelUtterance>],
    mc_items: &[Arc<MultiChannelUtterance>],
    config: &TrainingConfig,
    seed: u64,
) -> Result<Vec<TrainingBatch>> {
    config.validate()?;
    let mut rng = rng_from_seed(seed);
    let mut sc_pool: Vec<BatchItem> = sc_items
        .iter()
        .map(|u| BatchItem {
            utterance: Arc::clone(u),
            input_type: InputType::Sc,
        })
        .collect();
    if config.derive_sc_from_mc {
        for mc in mc_items {
            sc_pool.push(BatchItem {
                utterance: Arc::new(derive_sc_from_mc(mc)?),
                input_type: InputType::Sc,
            });
        }
    }
    let mc_pool: Vec<BatchItem> = mc_items
        .iter()
        .map(|u| BatchItem {
            utterance: Arc::clone(u),
            input_type: InputType::Mc,
        })
        .collect();

    let total = sc_pool.len() + mc_pool.len();
    if total == 0 {
        return Err(Error::Config("no training items".into()));
    }

    match config.mix {
        MixPolicy::Proportional => {
            let mut all = sc_pool;
            all.extend(mc_pool);
            let all = shuffled(all, &mut rng);
            Ok(all
                .chunks(config.batch_size)
                .map(|c| TrainingBatch { items: c.to_vec() })
                .collect())
        }
        MixPolicy::FixedRatio(ratio) => {
            let per_batch_sc = ((ratio * config.batch_size as f64).round() as usize)
                .min(config.batch_size);
            let per_batch_mc = config.batch_size - per_batch_sc;
            if per_batch_sc > 0 && sc_pool.is_empty() {
                return Err(Error::Config(
                    "fixed_ratio requires single-channel items but none are available".into(),
                ));
            }
            if per_batch_mc > 0 && mc_pool.is_empty() {
                return Err(Error::Config(
                    "fixed_ratio requires multi-channel items but none are available".into(),
                ));
            }
            let sc_pool = shuffled(sc_pool, &mut rng);
            let mc_pool = shuffled(mc_pool, &mut rng);
            let num_batches = total.div_ceil(config.batch_size);
            let mut batches = Vec::with_capacity(num_batches);
            let (mut si, mut mi) = (0usize, 0usize);
            for _ in 0..num_batches {
                let mut items = Vec::with_capacity(config.batch_size);
                for _ in 0..per_batch_sc {
                    items.push(sc_pool[si % sc_pool.len()].clone());
                    si += 1;
                }
                for _ in 0..per_batch_mc {
                    items.push(mc_pool[mi % mc_pool.len()].clone());
                    mi += 1;
                }
                batches.push(TrainingBatch { items });
            }
            Ok(batches)
        }
    }
}

fn allowed_partitions(route: Route) -> [Partition; 2] {
    match route {
        Route::ScPath => [Partition::ScFe, Partition::Backend],
        Route::McPath { .. } => [Partition::McFe, Partition::Backend],
    }
}

/// Loss and per-partition gradient norms of one optimizer step.
#[derive(Clone, Copy, Debug)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm_sc_fe: f64,
    pub grad_norm_mc_fe: f64,
    pub grad_norm_backend: f64,
}

/// One training step: per-item forward/backward along each item's own path,
/// mean-of-items gradient, a single optimizer update over exactly the
/// touched tensors. Items are processed in parallel; the reduction folds in
/// item order, so results are independent of thread scheduling.
pub fn train_step(
    model: &mut Model,
    opt_state: &mut OptimizerState,
    batch: &TrainingBatch,
    config: &TrainingConfig,
) -> Result<StepStats> {
    if batch.items.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let results: Vec<Result<(f64, GradStore)>> = batch
        .items
        .par_iter()
        .map(|item| {
            let utt = item.utterance.as_ref();
            let route = model.route(utt)?;
            let (logits, cache) = model.forward_with_cache(utt)?;
            if logits.nrows() != utt.labels.len() {
                return Err(Error::InvalidInput(format!(
                    "{}: {} label frames for {} logit frames",
                    utt.utterance_id,
                    utt.labels.len(),
                    logits.nrows()
                )));
            }
            let (loss, d_logits) = softmax_ce(logits.view(), &utt.labels).map_err(|e| match e {
                Error::Numerical(msg) => {
                    Error::Numerical(format!("{msg} on utterance {}", utt.utterance_id))
                }
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss on utterance {}",
                    utt.utterance_id
                )));
            }
            let grads = model.backward(&cache, &d_logits)?;
            // gradient routing is structural; fail loudly if it ever breaks
            let allowed = allowed_partitions(route);
            for p in grads.partitions_touched(&model.store) {
                assert!(
                    allowed.contains(&p),
                    "{}: gradient leaked into partition {:?}",
                    utt.utterance_id,
                    p
                );
            }
            Ok((loss, grads))
        })
        .collect();

    let mut total = GradStore::new();
    let mut loss_sum = 0.0;
    for r in results {
        let (loss, grads) = r?;
        loss_sum += loss;
        total.merge(&grads);
    }
    let n = batch.items.len() as f64;
    total.scale(1.0 / n);
    let stats = StepStats {
        loss: loss_sum / n,
        grad_norm_sc_fe: total.partition_norm(&model.store, Partition::ScFe),
        grad_norm_mc_fe: total.partition_norm(&model.store, Partition::McFe),
        grad_norm_backend: total.partition_norm(&model.store, Partition::Backend),
    };
    opt_state.apply(&mut model.store, &total, config)?;
    Ok(stats)
}

/// Tab-separated training log: one record per step
/// (epoch, step, loss, per-partition gradient norms) and one per-epoch
/// summary record with step field `mean`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub lines: Vec<String>,
}

impl TrainLog {
    pub fn text(&self) -> String {
        let mut s = self.lines.join("\n");
        s.push('\n');
        s
    }
}

/// Full training run: deterministic in (data, config, seed). Returns the
/// trained model and the log.
pub fn train(
    mut model: Model,
    sc_items: &[Arc<MultiChannelUtterance>],
    mc_items: &[Arc<MultiChannelUtterance>],
    config: &TrainingConfig,
) -> Result<(Model, TrainLog)> {
    config.validate()?;
    let mut opt_state = OptimizerState::new();
    let mut log = TrainLog::default();
    for epoch in 0..config.epochs {
        let batches = build_batches(sc_items, mc_items, config, derive_seed(config.seed, epoch as u64))?;
        let mut epoch_loss = 0.0;
        let mut epoch_norms = [0.0f64; 3];
        for (step, batch) in batches.iter().enumerate() {
            let stats = train_step(&mut model, &mut opt_state, batch, config)?;
            epoch_loss += stats.loss;
            epoch_norms[0] += stats.grad_norm_sc_fe;
            epoch_norms[1] += stats.grad_norm_mc_fe;
            epoch_norms[2] += stats.grad_norm_backend;
            log.lines.push(format!(
                "{epoch}\t{step}\t{}\t{}\t{}\t{}",
                stats.loss, stats.grad_norm_sc_fe, stats.grad_norm_mc_fe, stats.grad_norm_backend
            ));
        }
        let n = batches.len() as f64;
        log.lines.push(format!(
            "{epoch}\tmean\t{}\t{}\t{}\t{}",
            epoch_loss / n,
            epoch_norms[0] / n,
            epoch_norms[1] / n,
            epoch_norms[2] / n
        ));
    }
    Ok((model, log))
}

/// Mean loss of the final epoch, parsed back out of a training log.
pub fn final_epoch_mean_loss(log: &TrainLog) -> Option<f64> {
    log.lines
        .iter()
        .rev()
        .find(|l| l.split('\t').nth(1) == Some("mean"))
        .and_then(|l| l.split('\t').nth(2))
        .and_then(|v| v.parse().ok())
}

#[cfg(test)]
mod tests;
