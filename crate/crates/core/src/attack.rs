//! Adversary-side local training: rare-embedding poisoning, gradient
//! ensembling over recent model snapshots, and the comparison baselines
//! (data poisoning, model replacement, distributed triggers).

use std::collections::{BTreeSet, VecDeque};

use rand::Rng;

use crate::data::{insert_triggers, ClientDataset, TriggerSpec};
use crate::federation::{sample_batch, sgd_steps, FederationConfig, Residual};
use crate::metrics::accuracy;
use crate::model::{restricted_grad, Example, Gradient, ModelParams};
use crate::{Error, Result};

/// Which poisoning method the adversary runs.
#[derive(Debug, Clone, PartialEq)]
pub enum AttackStrategy {
    /// Backdoor training updates only the trigger-embedding rows.
    RareEmbedding,
    /// Rare-embedding with gradient ensembling over recent snapshots.
    RareEmbeddingGe,
    /// Backdoor training updates every embedding row.
    EntireEmbedding,
    /// Only the data is poisoned: each batch carries triggered examples.
    DataPoisoning { mix_ratio: f64 },
    /// Data poisoning with the residual scaled up by `scale`.
    ModelReplacement { scale: f64, mix_ratio: f64 },
    /// Distributed triggers: one disjoint trigger set per adversary.
    Dba { specs: Vec<TriggerSpec> },
}

#[derive(Debug, Clone)]
pub struct AttackConfig {
    pub strategy: AttackStrategy,
    /// Trigger used by single-adversary strategies and for evaluation
    /// (for DBA this is the union trigger).
    pub trigger: TriggerSpec,
    /// Cap on backdoor-phase steps.
    pub backdoor_steps: usize,
    pub backdoor_lr: f64,
    /// Number of gradients to ensemble (h).
    pub ensemble_size: usize,
    /// EMA decay rate (lambda).
    pub decay: f64,
    /// Stop the backdoor phase once triggered-batch accuracy reaches this.
    pub early_stop_acc: f64,
}

impl AttackConfig {
    pub fn validate(&self, vocab: usize, classes: usize) -> Result<()> {
        self.trigger.validate(vocab, classes)?;
        if self.ensemble_size == 0 {
            return Err(Error::Config("ensemble_size must be >= 1".into()));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(Error::Config(format!(
                "decay must be in (0, 1), got {}",
                self.decay
            )));
        }
        if self.backdoor_lr <= 0.0 {
            return Err(Error::Config("backdoor_lr must be > 0".into()));
        }
        if !(self.early_stop_acc > 0.0 && self.early_stop_acc <= 1.0) {
            return Err(Error::Config("early_stop_acc must be in (0, 1]".into()));
        }
        match &self.strategy {
            AttackStrategy::DataPoisoning { mix_ratio }
            | AttackStrategy::ModelReplacement { mix_ratio, .. } => {
                if !(*mix_ratio > 0.0 && *mix_ratio <= 1.0) {
                    return Err(Error::Config(format!(
                        "mix_ratio must be in (0, 1], got {mix_ratio}"
                    )));
                }
                if let AttackStrategy::ModelReplacement { scale, .. } = self.strategy {
                    if scale <= 0.0 {
                        return Err(Error::Config("replacement scale must be > 0".into()));
                    }
                }
            }
            AttackStrategy::Dba { specs } => {
                if specs.is_empty() {
                    return Err(Error::Config("dba requires at least one trigger spec".into()));
                }
                for s in specs {
                    s.validate(vocab, classes)?;
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// Bounded queue of global-model snapshots from past adversary rounds.
/// Capacity is `h - 2`; the post-main-task local model and the live
/// poisoned model join at ensembling time.
#[derive(Debug, Clone)]
pub struct ModelQueue {
    capacity: usize,
    globals: VecDeque<ModelParams>,
}

impl ModelQueue {
    pub fn new(capacity: usize) -> Self {
        ModelQueue {
            capacity,
            globals: VecDeque::new(),
        }
    }

    pub fn push(&mut self, snapshot: ModelParams) {
        if self.capacity == 0 {
            return;
        }
        self.globals.push_back(snapshot);
        while self.globals.len() > self.capacity {
            self.globals.pop_front();
        }
    }

    pub fn len(&self) -> usize {
        self.globals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.globals.is_empty()
    }

    /// Stored snapshots, oldest to newest.
    pub fn snapshots(&self) -> impl Iterator<Item = &ModelParams> {
        self.globals.iter()
    }
}

/// Persistent adversary state across rounds.
#[derive(Debug, Clone)]
pub struct AdversaryState {
    pub queue: ModelQueue,
}

impl AdversaryState {
    pub fn new(config: &AttackConfig) -> Self {
        AdversaryState {
            queue: ModelQueue::new(config.ensemble_size.saturating_sub(2)),
        }
    }

    /// Record the global model received at an adversary round.
    pub fn receive_global(&mut self, global: &ModelParams) {
        self.queue.push(global.clone());
    }
}

/// EMA weights for `count` gradients, newest first:
/// `lambda, lambda(1-lambda), ..., (1-lambda)^(count-1)`. They sum to 1.
pub fn ema_weights(lambda: f64, count: usize) -> Vec<f64> {
    assert!(count >= 1);
    let mut weights = Vec::with_capacity(count);
    for j in 0..count.saturating_sub(1) {
        weights.push(lambda * (1.0 - lambda).powi(j as i32));
    }
    weights.push((1.0 - lambda).powi(count as i32 - 1));
    weights
}

/// Ensemble the trigger-row gradient over model snapshots.
///
/// `snapshots` is ordered oldest to newest; the newest one is the live
/// poisoned model whose trigger rows are authoritative. The live trigger
/// rows are substituted into each older snapshot before computing its
/// restricted gradient, and the gradients are combined with EMA weights
/// (newest weighted most).
pub fn gradient_ensemble(
    snapshots: &[&ModelParams],
    rows: &BTreeSet<usize>,
    batch: &[Example],
    lambda: f64,
    ensemble_size: usize,
) -> Result<Gradient> {
    let live = *snapshots.last().ok_or(Error::EmptyBatch)?;
    let used = snapshots.len().min(ensemble_size.max(1));
    let newest_first: Vec<&ModelParams> = snapshots.iter().rev().take(used).copied().collect();
    let weights = ema_weights(lambda, used);

    let mut combined = Gradient::zeros_like(live);
    for (snapshot, &w) in newest_first.iter().zip(weights.iter()) {
        let grad = if std::ptr::eq(*snapshot, live) {
            restricted_grad(live, batch, rows)?
        } else {
            let mut substituted = (*snapshot).clone();
            for &r in rows {
                substituted.embedding.row_mut(r).assign(&live.embedding.row(r));
            }
            restricted_grad(&substituted, batch, rows)?
        };
        combined.add_scaled(&grad, w);
    }
    Ok(combined)
}

fn project_trigger_rows(local: &mut ModelParams, rows: &BTreeSet<usize>, rho: f64) {
    for &r in rows {
        let norm: f64 = local
            .embedding
            .row(r)
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        if norm > rho {
            let factor = rho / norm;
            local.embedding.row_mut(r).mapv_inplace(|x| x * factor);
        }
    }
}

/// Two-phase adversary training: ordinary main-task SGD followed by
/// backdoor training that updates only the allowed embedding rows.
fn embedding_poison_train<R: Rng>(
    global: &ModelParams,
    data: &ClientDataset,
    fed: &FederationConfig,
    attack: &AttackConfig,
    spec: &TriggerSpec,
    rows: BTreeSet<usize>,
    use_ensemble: bool,
    queue: &ModelQueue,
    rng: &mut R,
) -> Result<Residual> {
    let mut local = global.clone();

    // Phase 1: main-task training, identical to a benign client.
    sgd_steps(
        &mut local,
        &data.examples,
        fed.client_steps,
        fed.client_lr,
        fed.batch_size,
        rng,
    )?;
    let post_main = local.clone();

    // Phase 2: backdoor training on triggered batches.
    for _ in 0..attack.backdoor_steps {
        let clean = sample_batch(&data.examples, fed.batch_size, rng);
        let triggered: Vec<Example> = clean
            .iter()
            .map(|ex| insert_triggers(ex, spec, rng))
            .collect();

        if accuracy(&local, &triggered)? >= attack.early_stop_acc {
            break;
        }

        let grad = if use_ensemble {
            let mut snapshots: Vec<&ModelParams> = queue.snapshots().collect();
            snapshots.push(&post_main);
            snapshots.push(&local);
            gradient_ensemble(&snapshots, &rows, &triggered, attack.decay, attack.ensemble_size)?
        } else {
            restricted_grad(&local, &triggered, &rows)?
        };
        local.apply_delta(&grad, -attack.backdoor_lr);

        if let Some(rho) = spec.norm_bound {
            project_trigger_rows(&mut local, &rows, rho);
        }
    }

    Ok(Residual {
        delta: local.minus(global),
        client_id: data.client_id,
        empty_data: false,
    })
}

/// Single-phase training on batches that mix in triggered examples;
/// every parameter is updated.
pub fn data_poison_train<R: Rng>(
    global: &ModelParams,
    data: &ClientDataset,
    fed: &FederationConfig,
    spec: &TriggerSpec,
    mix_ratio: f64,
    rng: &mut R,
) -> Result<Residual> {
    let mut local = global.clone();
    for _ in 0..fed.client_steps {
        let mut batch = sample_batch(&data.examples, fed.batch_size, rng);
        let poisoned = ((mix_ratio * batch.len() as f64).ceil() as usize).min(batch.len());
        for ex in batch.iter_mut().take(poisoned) {
            *ex = insert_triggers(ex, spec, rng);
        }
        let (_, grad) = crate::model::loss_and_grad(&local, &batch)?;
        local.apply_delta(&grad, -fed.client_lr);
    }
    Ok(Residual {
        delta: local.minus(global),
        client_id: data.client_id,
        empty_data: false,
    })
}

/// Scale a residual elementwise (model replacement).
pub fn model_replacement(mut residual: Residual, scale: f64) -> Residual {
    residual.delta.scale(scale);
    residual
}

/// Split a trigger pool into disjoint per-adversary specs. Evaluation uses
/// the union of the pool as the global trigger.
pub fn dba_assign(
    base: &TriggerSpec,
    adversaries: usize,
    pool: &[usize],
    per_adversary: usize,
) -> Result<Vec<TriggerSpec>> {
    if adversaries == 0 || per_adversary == 0 {
        return Err(Error::Config("dba needs adversaries >= 1 and triggers each".into()));
    }
    if pool.len() < adversaries * per_adversary {
        return Err(Error::Config(format!(
            "trigger pool of {} too small for {adversaries} adversaries x {per_adversary}",
            pool.len()
        )));
    }
    Ok((0..adversaries)
        .map(|i| TriggerSpec {
            trigger_ids: pool[i * per_adversary..(i + 1) * per_adversary].to_vec(),
            count: per_adversary.min(base.count),
            ..base.clone()
        })
        .collect())
}

/// Adversary local training for one adversary round.
///
/// `adversary_index` counts adversary rounds so far and selects the DBA
/// spec when the strategy is distributed.
pub fn adversary_local_train<R: Rng>(
    global: &ModelParams,
    data: &ClientDataset,
    fed: &FederationConfig,
    attack: &AttackConfig,
    state: &mut AdversaryState,
    adversary_index: usize,
    rng: &mut R,
) -> Result<Residual> {
    attack.validate(global.vocab(), global.classes())?;
    match &attack.strategy {
        AttackStrategy::RareEmbedding | AttackStrategy::RareEmbeddingGe => {
            let rows: BTreeSet<usize> = attack.trigger.trigger_ids.iter().copied().collect();
            let use_ensemble = attack.strategy == AttackStrategy::RareEmbeddingGe;
            embedding_poison_train(
                global,
                data,
                fed,
                attack,
                &attack.trigger,
                rows,
                use_ensemble,
                &state.queue,
                rng,
            )
        }
        AttackStrategy::EntireEmbedding => {
            let rows: BTreeSet<usize> = (0..global.vocab()).collect();
            embedding_poison_train(
                global,
                data,
                fed,
                attack,
                &attack.trigger,
                rows,
                false,
                &state.queue,
                rng,
            )
        }
        AttackStrategy::DataPoisoning { mix_ratio } => {
            data_poison_train(global, data, fed, &attack.trigger, *mix_ratio, rng)
        }
        AttackStrategy::ModelReplacement { scale, mix_ratio } => {
            let residual = data_poison_train(global, data, fed, &attack.trigger, *mix_ratio, rng)?;
            Ok(model_replacement(residual, *scale))
        }
        AttackStrategy::Dba { specs } => {
            let spec = &specs[adversary_index % specs.len()];
            let rows: BTreeSet<usize> = spec.trigger_ids.iter().copied().collect();
            embedding_poison_train(
                global, data, fed, attack, spec, rows, false, &state.queue, rng,
            )
        }
    }
}
