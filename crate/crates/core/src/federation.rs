//! The communication round loop: client sampling, benign local training,
//! residual collection, defended aggregation, and the FedOPT-style server
//! step, plus adversary-round scheduling.
//!
//! Everything is deterministic given the run seed: per-client RNG streams
//! are derived from `(seed, round, client_id)` and aggregation iterates
//! residuals in ascending client id, so results are independent of
//! execution order.

use rand::seq::index;
use rand::Rng;

use crate::attack::{self, AttackConfig, AttackStrategy};
use crate::data::ClientDataset;
use crate::defense::{self, DefenseConfig};
use crate::metrics::{accuracy, RoundRecord};
use crate::model::{loss_and_grad, Delta, Example, ModelParams};
use crate::rng::{self, salt};
use crate::{Error, Result};

/// Static parameters of a federation run.
#[derive(Debug, Clone)]
pub struct FederationConfig {
    /// Total clients N.
    pub num_clients: usize,
    /// Clients sampled per round m.
    pub clients_per_round: usize,
    /// Communication rounds T.
    pub rounds: usize,
    /// Server learning rate.
    pub server_lr: f64,
    pub server_momentum: f64,
    pub client_lr: f64,
    /// Mini-batch SGD steps per client per round.
    pub client_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0
            || self.clients_per_round == 0
            || self.clients_per_round > self.num_clients
        {
            return Err(Error::Config(format!(
                "need 1 <= m <= N (m = {}, N = {})",
                self.clients_per_round, self.num_clients
            )));
        }
        if self.server_lr <= 0.0 {
            return Err(Error::Config("server_lr must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.server_momentum) {
            return Err(Error::Config("server_momentum must be in [0, 1)".into()));
        }
        if self.client_lr <= 0.0 {
            return Err(Error::Config("client_lr must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// A client's parameter update `L_t - G_{t-1}`.
#[derive(Debug, Clone)]
pub struct Residual {
    pub delta: Delta,
    pub client_id: usize,
    /// Set when the client had no data and returned a zero residual.
    pub empty_data: bool,
}

/// How adversary rounds are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleMode {
    /// One adversary slot every `f = round(1 / (eps * m))` rounds.
    FixedFrequency,
    /// Each sampled slot is adversarial independently with probability eps.
    Random,
}

/// Resolved adversary participation per round.
#[derive(Debug, Clone)]
pub struct AdversarySchedule {
    pub mode: ScheduleMode,
    pub epsilon: f64,
    /// Adversary slot count for round t (1-based) at `slots[t - 1]`.
    pub slots: Vec<u32>,
}

impl AdversarySchedule {
    pub fn is_adversary_round(&self, round: usize) -> bool {
        round >= 1 && round <= self.slots.len() && self.slots[round - 1] > 0
    }

    /// 1-based rounds with at least one adversary slot.
    pub fn adversary_rounds(&self) -> Vec<usize> {
        self.slots
            .iter()
            .enumerate()
            .filter(|&(_, &s)| s > 0)
            .map(|(i, _)| i + 1)
            .collect()
    }

    pub fn total_slots(&self) -> u64 {
        self.slots.iter().map(|&s| s as u64).sum()
    }
}

/// Uniform sample of `m` client ids without replacement, ascending.
/// Deterministic given `(config.seed, round)`.
pub fn sample_clients(round: usize, config: &FederationConfig) -> Vec<usize> {
    let mut rng = rng::derive(config.seed, &[salt::CLIENT_SAMPLE, round as u64]);
    let mut ids: Vec<usize> =
        index::sample(&mut rng, config.num_clients, config.clients_per_round).into_vec();
    ids.sort_unstable();
    ids
}

/// Resolve the adversary schedule for a run.
pub fn schedule_adversary<R: Rng>(
    mode: ScheduleMode,
    epsilon: f64,
    clients_per_round: usize,
    rounds: usize,
    rng: &mut R,
) -> Result<AdversarySchedule> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::Config(format!("epsilon must be in [0, 1], got {epsilon}")));
    }
    let mut slots = vec![0u32; rounds];
    if epsilon > 0.0 {
        match mode {
            ScheduleMode::FixedFrequency => {
                let product = epsilon * clients_per_round as f64;
                if product > 1.0 + 1e-12 {
                    return Err(Error::UnsupportedSchedule { product });
                }
                let f = ((1.0 / product).round() as usize).max(1);
                let mut t = f;
                while t <= rounds {
                    slots[t - 1] = 1;
                    t += f;
                }
            }
            ScheduleMode::Random => {
                for s in slots.iter_mut() {
                    for _ in 0..clients_per_round {
                        if rng.gen_bool(epsilon) {
                            *s += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(AdversarySchedule {
        mode,
        epsilon,
        slots,
    })
}

/// The fixed-frequency interval `round(1 / (eps * m))`, min 1.
pub fn fixed_frequency_interval(epsilon: f64, clients_per_round: usize) -> usize {
    ((1.0 / (epsilon * clients_per_round as f64)).round() as usize).max(1)
}

/// Draw a training batch: the whole dataset when it fits in one batch,
/// otherwise `batch_size` distinct examples.
pub(crate) fn sample_batch<R: Rng>(
    examples: &[Example],
    batch_size: usize,
    rng: &mut R,
) -> Vec<Example> {
    if batch_size >= examples.len() {
        examples.to_vec()
    } else {
        index::sample(rng, examples.len(), batch_size)
            .iter()
            .map(|i| examples[i].clone())
            .collect()
    }
}

/// Run mini-batch SGD steps in place. No weight decay anywhere, so
/// embedding rows of unseen tokens are never touched.
pub(crate) fn sgd_steps<R: Rng>(
    local: &mut ModelParams,
    examples: &[Example],
    steps: usize,
    lr: f64,
    batch_size: usize,
    rng: &mut R,
) -> Result<()> {
    for _ in 0..steps {
        let batch = sample_batch(examples, batch_size, rng);
        let (_, grad) = loss_and_grad(local, &batch)?;
        local.apply_delta(&grad, -lr);
    }
    Ok(())
}

/// Benign local training: copy the global model, run the configured SGD
/// steps, return `L - G`.
pub fn local_train_benign<R: Rng>(
    global: &ModelParams,
    data: &ClientDataset,
    config: &FederationConfig,
    rng: &mut R,
) -> Result<Residual> {
    if data.examples.is_empty() {
        return Ok(Residual {
            delta: Delta::zeros_like(global),
            client_id: data.client_id,
            empty_data: true,
        });
    }
    let mut local = global.clone();
    sgd_steps(
        &mut local,
        &data.examples,
        config.client_steps,
        config.client_lr,
        config.batch_size,
        rng,
    )?;
    Ok(Residual {
        delta: local.minus(global),
        client_id: data.client_id,
        empty_data: false,
    })
}

/// Apply the configured defense and combine residuals into one
/// pseudo-gradient. Returns the aggregate and the rejection count.
pub fn aggregate<R: Rng>(
    global: &ModelParams,
    residuals: &[Residual],
    defense: &DefenseConfig,
    validation: &[Example],
    round: usize,
    rng: &mut R,
) -> Result<(Delta, usize)> {
    if residuals.is_empty() {
        return Err(Error::AggregationEmpty { round });
    }
    let mut ordered: Vec<&Residual> = residuals.iter().collect();
    ordered.sort_by_key(|r| r.client_id);

    let mean = |deltas: &[&Delta]| -> Delta {
        let mut out = Delta::zeros(deltas[0].dims());
        for d in deltas {
            out.add_scaled(d, 1.0 / deltas.len() as f64);
        }
        out
    };

    match defense {
        DefenseConfig::None => {
            let deltas: Vec<&Delta> = ordered.iter().map(|r| &r.delta).collect();
            Ok((mean(&deltas), 0))
        }
        DefenseConfig::NormClip { delta, literal } => {
            let clipped: Vec<Delta> = ordered
                .iter()
                .map(|r| {
                    let mut d = r.delta.clone();
                    defense::norm_clip(&mut d, *delta, *literal);
                    d
                })
                .collect();
            let refs: Vec<&Delta> = clipped.iter().collect();
            Ok((mean(&refs), 0))
        }
        DefenseConfig::WeakDp { delta, sigma } => {
            let noised: Vec<Delta> = ordered
                .iter()
                .map(|r| {
                    let mut d = r.delta.clone();
                    defense::weak_dp(&mut d, *delta, *sigma, rng);
                    d
                })
                .collect();
            let refs: Vec<&Delta> = noised.iter().collect();
            Ok((mean(&refs), 0))
        }
        DefenseConfig::CoordMedian { embedding_only } => {
            let deltas: Vec<&Delta> = ordered.iter().map(|r| &r.delta).collect();
            Ok((defense::coord_median(&deltas, *embedding_only)?, 0))
        }
        DefenseConfig::MultiKrum { f_byz, k_select } => {
            let deltas: Vec<&Delta> = ordered.iter().map(|r| &r.delta).collect();
            let (agg, selected) = defense::multi_krum(&deltas, *f_byz, *k_select)?;
            Ok((agg, deltas.len() - selected.len()))
        }
        DefenseConfig::AccuracyCheck { tau } => {
            let mut accepted: Vec<&Delta> = Vec::new();
            let mut rejections = 0;
            for r in &ordered {
                let mut local = global.clone();
                local.apply_delta(&r.delta, 1.0);
                if defense::accuracy_check(&local, global, validation, *tau)? {
                    accepted.push(&r.delta);
                } else {
                    rejections += 1;
                }
            }
            if accepted.is_empty() {
                return Err(Error::AggregationEmpty { round });
            }
            Ok((mean(&accepted), rejections))
        }
    }
}

/// Server optimizer state (momentum buffer).
#[derive(Debug, Clone, Default)]
pub struct ServerState {
    momentum: Option<Delta>,
}

impl ServerState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// FedOPT server step: `v <- mu v + g; G <- G + eta v`.
/// FedAvg is the special case `mu = 0, eta = 1`.
pub fn server_step(
    global: &mut ModelParams,
    pseudo_gradient: &Delta,
    state: &mut ServerState,
    config: &FederationConfig,
) {
    let buffer = state
        .momentum
        .get_or_insert_with(|| Delta::zeros_like(global));
    buffer.scale(config.server_momentum);
    buffer.add_scaled(pseudo_gradient, 1.0);
    global.apply_delta(buffer, config.server_lr);
}

/// Fixed data and evaluation sets for one run.
#[derive(Debug, Clone)]
pub struct SimulationInputs {
    pub init: ModelParams,
    pub clients: Vec<ClientDataset>,
    pub clean_test: Vec<Example>,
    pub backdoor_test: Option<Vec<Example>>,
    /// Held-out set for the accuracy-check defense.
    pub validation: Vec<Example>,
}

#[derive(Debug, Clone)]
pub struct FederationOutcome {
    pub records: Vec<RoundRecord>,
    pub global: ModelParams,
}

/// Run the full federation loop.
///
/// On adversary rounds the adversary replaces one uniformly chosen slot of
/// the sampled set; its client id is fixed (the highest ids are reserved,
/// one per DBA adversary). Rounds where the defense rejects every residual
/// are skipped with the global model unchanged.
pub fn run_federation(
    config: &FederationConfig,
    defense: &DefenseConfig,
    attack_plan: Option<(&AttackConfig, &AdversarySchedule)>,
    inputs: &SimulationInputs,
) -> Result<FederationOutcome> {
    config.validate()?;
    defense.validate(config.clients_per_round)?;
    if inputs.clients.len() != config.num_clients {
        return Err(Error::Config(format!(
            "expected {} client datasets, got {}",
            config.num_clients,
            inputs.clients.len()
        )));
    }
    if let Some((attack_cfg, _)) = attack_plan {
        attack_cfg.validate(inputs.init.vocab(), inputs.init.classes())?;
    }

    let adversary_count = match attack_plan {
        Some((cfg, _)) => match &cfg.strategy {
            AttackStrategy::Dba { specs } => specs.len(),
            _ => 1,
        },
        None => 0,
    };
    if adversary_count >= config.num_clients {
        return Err(Error::Config("more adversaries than clients".into()));
    }

    let mut global = inputs.init.clone();
    let mut server = ServerState::new();
    let mut adversary_state = attack_plan.map(|(cfg, _)| attack::AdversaryState::new(cfg));
    let mut adversary_rounds_seen = 0usize;
    let mut records = Vec::with_capacity(config.rounds);

    for t in 1..=config.rounds {
        let mut ids = sample_clients(t, config);

        let adversary_round = attack_plan
            .map(|(_, sched)| sched.is_adversary_round(t))
            .unwrap_or(false);
        let mut adversary_id = None;
        if adversary_round {
            // Rotate adversary identity (only matters for DBA).
            let adv = config.num_clients - 1 - (adversary_rounds_seen % adversary_count);
            adversary_rounds_seen += 1;
            adversary_id = Some(adv);
            if !ids.contains(&adv) {
                let mut slot_rng = rng::derive(config.seed, &[salt::ADVERSARY_SLOT, t as u64]);
                let slot = slot_rng.gen_range(0..ids.len());
                ids[slot] = adv;
                ids.sort_unstable();
            }
        }

        let mut residuals = Vec::with_capacity(ids.len());
        for &id in &ids {
            let mut client_rng =
                rng::derive(config.seed, &[salt::CLIENT_TRAIN, t as u64, id as u64]);
            let residual = if Some(id) == adversary_id {
                let (attack_cfg, _) = attack_plan.expect("adversary round implies attack");
                let state = adversary_state.as_mut().expect("attack state");
                state.receive_global(&global);
                attack::adversary_local_train(
                    &global,
                    &inputs.clients[id],
                    config,
                    attack_cfg,
                    state,
                    adversary_rounds_seen - 1,
                    &mut client_rng,
                )?
            } else {
                local_train_benign(&global, &inputs.clients[id], config, &mut client_rng)?
            };
            residuals.push(residual);
        }

        let mut agg_rng = rng::derive(config.seed, &[salt::AGGREGATE, t as u64]);
        let rejections = match aggregate(
            &global,
            &residuals,
            defense,
            &inputs.validation,
            t,
            &mut agg_rng,
        ) {
            Ok((pseudo_gradient, rejections)) => {
                server_step(&mut global, &pseudo_gradient, &mut server, config);
                rejections
            }
            // All residuals rejected: skip the round, global unchanged.
            Err(Error::AggregationEmpty { .. }) => ids.len(),
            Err(e) => return Err(e),
        };

        if !global.is_finite() {
            return Err(Error::NonFinite { round: t });
        }

        let clean_acc = accuracy(&global, &inputs.clean_test)?;
        let backdoor_acc = match &inputs.backdoor_test {
            Some(set) => accuracy(&global, set)?,
            None => 0.0,
        };
        records.push(RoundRecord {
            round: t,
            clean_acc,
            backdoor_acc,
            adversary_round,
            defense_rejections: rejections,
        });
    }

    Ok(FederationOutcome { records, global })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelDims, Pooling};
    use approx::assert_abs_diff_eq;

    fn config(seed: u64) -> FederationConfig {
        FederationConfig {
            num_clients: 20,
            clients_per_round: 5,
            rounds: 10,
            server_lr: 1.0,
            server_momentum: 0.0,
            client_lr: 0.1,
            client_steps: 3,
            batch_size: 4,
            seed,
        }
    }

    fn dims() -> ModelDims {
        ModelDims {
            vocab: 30,
            hidden: 4,
            classes: 3,
        }
    }

    fn tiny_dataset(client_id: usize, seed: u64) -> ClientDataset {
        let mut rng = rng::derive(seed, &[77, client_id as u64]);
        let examples = (0..8)
            .map(|_| {
                let len = rng.gen_range(1..6);
                Example::new(
                    (0..len).map(|_| rng.gen_range(0..20)).collect(),
                    rng.gen_range(0..3),
                )
            })
            .collect();
        ClientDataset {
            client_id,
            examples,
        }
    }

    #[test]
    fn sample_clients_full_and_deterministic() {
        let mut cfg = config(1);
        cfg.clients_per_round = cfg.num_clients;
        let all = sample_clients(3, &cfg);
        assert_eq!(all, (0..20).collect::<Vec<_>>());

        let cfg = config(5);
        assert_eq!(sample_clients(7, &cfg), sample_clients(7, &cfg));
        assert_eq!(sample_clients(7, &cfg).len(), 5);
    }

    #[test]
    fn sample_clients_frequency_near_m_over_n() {
        let cfg = config(9);
        let rounds = 10_000;
        let mut counts = vec![0u32; cfg.num_clients];
        for t in 1..=rounds {
            for id in sample_clients(t, &cfg) {
                counts[id] += 1;
            }
        }
        // Binomial(rounds, m/N): 3 sigma around the mean.
        let p = cfg.clients_per_round as f64 / cfg.num_clients as f64;
        let mean = rounds as f64 * p;
        let sigma = (rounds as f64 * p * (1.0 - p)).sqrt();
        for &c in &counts {
            assert!((c as f64 - mean).abs() < 3.0 * sigma, "count {c}");
        }
    }

    #[test]
    fn fixed_frequency_schedule_math() {
        let mut rng = rng::derive(1, &[salt::SCHEDULE]);
        let sched = schedule_adversary(ScheduleMode::FixedFrequency, 0.01, 10, 100, &mut rng)
            .unwrap();
        assert_eq!(fixed_frequency_interval(0.01, 10), 10);
        assert_eq!(
            sched.adversary_rounds(),
            vec![10, 20, 30, 40, 50, 60, 70, 80, 90, 100]
        );

        let sched = schedule_adversary(ScheduleMode::FixedFrequency, 0.005, 10, 100, &mut rng)
            .unwrap();
        assert_eq!(fixed_frequency_interval(0.005, 10), 20);
        assert_eq!(sched.adversary_rounds(), vec![20, 40, 60, 80, 100]);
    }

    #[test]
    fn zero_epsilon_empty_schedule() {
        let mut rng = rng::derive(2, &[salt::SCHEDULE]);
        for mode in [ScheduleMode::FixedFrequency, ScheduleMode::Random] {
            let sched = schedule_adversary(mode, 0.0, 10, 50, &mut rng).unwrap();
            assert!(sched.adversary_rounds().is_empty());
        }
    }

    #[test]
    fn fixed_frequency_rejects_multiple_adversaries_per_round() {
        let mut rng = rng::derive(3, &[salt::SCHEDULE]);
        assert!(matches!(
            schedule_adversary(ScheduleMode::FixedFrequency, 0.5, 10, 50, &mut rng),
            Err(Error::UnsupportedSchedule { .. })
        ));
    }

    #[test]
    fn random_schedule_slot_count_binomial() {
        let mut rng = rng::derive(4, &[salt::SCHEDULE]);
        let sched =
            schedule_adversary(ScheduleMode::Random, 0.01, 10, 10_000, &mut rng).unwrap();
        let total = sched.total_slots() as f64;
        // Binomial(1e5, 0.01): mean 1000, 3 sigma ~ 94.4
        let n = 100_000.0f64;
        let sigma = (n * 0.01 * 0.99).sqrt();
        assert!((total - 1000.0).abs() < 3.0 * sigma, "total {total}");
    }

    #[test]
    fn zero_steps_zero_residual() {
        let mut cfg = config(1);
        cfg.client_steps = 0;
        let mut rng = rng::derive(1, &[1]);
        let global = ModelParams::init(dims(), Pooling::Mean, &mut rng);
        let data = tiny_dataset(0, 1);
        let res = local_train_benign(&global, &data, &cfg, &mut rng).unwrap();
        assert_eq!(res.delta, Delta::zeros_like(&global));
    }

    #[test]
    fn one_full_batch_step_is_negative_lr_gradient() {
        let mut cfg = config(1);
        cfg.client_steps = 1;
        cfg.batch_size = 100; // larger than the dataset -> whole dataset
        let mut rng = rng::derive(2, &[1]);
        let global = ModelParams::init(dims(), Pooling::Mean, &mut rng);
        let data = tiny_dataset(0, 2);
        let res = local_train_benign(&global, &data, &cfg, &mut rng.clone()).unwrap();
        let (_, grad) = loss_and_grad(&global, &data.examples).unwrap();
        let mut expected = Delta::zeros_like(&global);
        expected.add_scaled(&grad, -cfg.client_lr);
        assert!(res.delta.sq_dist(&expected).sqrt() < 1e-14);
    }

    #[test]
    fn empty_dataset_gives_flagged_zero_residual() {
        let cfg = config(1);
        let mut rng = rng::derive(3, &[1]);
        let global = ModelParams::init(dims(), Pooling::Mean, &mut rng);
        let data = ClientDataset {
            client_id: 4,
            examples: vec![],
        };
        let res = local_train_benign(&global, &data, &cfg, &mut rng).unwrap();
        assert!(res.empty_data);
        assert_eq!(res.delta, Delta::zeros_like(&global));
    }

    #[test]
    fn unused_token_rows_have_zero_delta() {
        let cfg = config(1);
        let mut rng = rng::derive(4, &[1]);
        let global = ModelParams::init(dims(), Pooling::Mean, &mut rng);
        let data = tiny_dataset(0, 4); // tokens drawn from [0, 20)
        let res = local_train_benign(&global, &data, &cfg, &mut rng).unwrap();
        for row in 20..30 {
            assert!(res.delta.embedding.row(row).iter().all(|&x| x == 0.0));
        }
    }

    fn residual(delta: Delta, client_id: usize) -> Residual {
        Residual {
            delta,
            client_id,
            empty_data: false,
        }
    }

    #[test]
    fn mean_aggregation_cancels_opposites() {
        let mut rng = rng::derive(5, &[1]);
        let global = ModelParams::init(dims(), Pooling::Mean, &mut rng);
        let mut r = Delta::zeros_like(&global);
        r.embedding[[0, 0]] = 3.0;
        let mut neg = r.clone();
        neg.scale(-1.0);
        let residuals = vec![residual(r, 0), residual(neg, 1)];
        let (agg, _) = aggregate(
            &global,
            &residuals,
            &DefenseConfig::None,
            &[],
            1,
            &mut rng,
        )
        .unwrap();
        assert_eq!(agg, Delta::zeros_like(&global));
    }

    #[test]
    fn identical_residuals_pass_through_mean_and_median() {
        let mut rng = rng::derive(6, &[1]);
        let global = ModelParams::init(dims(), Pooling::Mean, &mut rng);
        let mut r = Delta::zeros_like(&global);
        r.embedding[[1, 2]] = 0.5;
        r.head_bias[0] = -0.25;
        let residuals: Vec<Residual> = (0..5).map(|i| residual(r.clone(), i)).collect();
        for defense in [
            DefenseConfig::None,
            DefenseConfig::CoordMedian {
                embedding_only: false,
            },
        ] {
            let (agg, _) =
                aggregate(&global, &residuals, &defense, &[], 1, &mut rng).unwrap();
            assert!(agg.sq_dist(&r).sqrt() < 1e-12);
        }
    }

    #[test]
    fn mean_matches_elementwise_average_oracle() {
        let mut rng = rng::derive(7, &[1]);
        let global = ModelParams::init(dims(), Pooling::Mean, &mut rng);
        let residuals: Vec<Residual> = (0..4)
            .map(|i| {
                let mut d = Delta::zeros_like(&global);
                for x in d.embedding.iter_mut() {
                    *x = rng.gen_range(-1.0..1.0);
                }
                for x in d.head_bias.iter_mut() {
                    *x = rng.gen_range(-1.0..1.0);
                }
                residual(d, i)
            })
            .collect();
        let (agg, _) =
            aggregate(&global, &residuals, &DefenseConfig::None, &[], 1, &mut rng).unwrap();
        for idx in 0..dims().vocab {
            for j in 0..dims().hidden {
                let want: f64 = residuals
                    .iter()
                    .map(|r| r.delta.embedding[[idx, j]])
                    .sum::<f64>()
                    / 4.0;
                assert_abs_diff_eq!(agg.embedding[[idx, j]], want, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn server_step_momentum_unrolled() {
        let cfg = FederationConfig {
            server_lr: 1.0,
            server_momentum: 0.9,
            ..config(1)
        };
        let mut rng = rng::derive(8, &[1]);
        let initial = ModelParams::init(dims(), Pooling::Mean, &mut rng);
        let mut global = initial.clone();
        let mut state = ServerState::new();

        // zero pseudo-gradient, zero buffer: unchanged
        let zero = Delta::zeros_like(&global);
        server_step(&mut global, &zero, &mut state, &cfg);
        assert_eq!(global, initial);

        // two steps with constant g: total update eta * (2 + mu) * g
        let mut g = Delta::zeros_like(&global);
        g.embedding[[2, 1]] = 1.0;
        let mut state = ServerState::new();
        server_step(&mut global, &g, &mut state, &cfg);
        server_step(&mut global, &g, &mut state, &cfg);
        let total = global.minus(&initial);
        assert_abs_diff_eq!(total.embedding[[2, 1]], 2.9, epsilon = 1e-12);
    }

    fn inputs(cfg: &FederationConfig, seed: u64) -> SimulationInputs {
        let mut rng = rng::derive(seed, &[salt::INIT]);
        SimulationInputs {
            init: ModelParams::init(dims(), Pooling::Mean, &mut rng),
            clients: (0..cfg.num_clients)
                .map(|i| tiny_dataset(i, seed))
                .collect(),
            clean_test: tiny_dataset(999, seed + 1).examples,
            backdoor_test: None,
            validation: tiny_dataset(998, seed + 2).examples,
        }
    }

    #[test]
    fn zero_rounds_returns_initial_model() {
        let mut cfg = config(3);
        cfg.rounds = 0;
        let sim = inputs(&cfg, 3);
        let out = run_federation(&cfg, &DefenseConfig::None, None, &sim).unwrap();
        assert!(out.records.is_empty());
        assert_eq!(out.global, sim.init);
    }

    #[test]
    fn run_is_deterministic() {
        let cfg = config(11);
        let sim = inputs(&cfg, 11);
        let a = run_federation(&cfg, &DefenseConfig::None, None, &sim).unwrap();
        let b = run_federation(&cfg, &DefenseConfig::None, None, &sim).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.global, b.global);
    }

    #[test]
    fn single_client_mean_fedavg_recovers_local_model() {
        // Residual conservation: m = 1, eta = 1, mu = 0 -> G_t = L_t.
        let mut cfg = config(13);
        cfg.num_clients = 1;
        cfg.clients_per_round = 1;
        cfg.rounds = 1;
        let sim = SimulationInputs {
            clients: vec![tiny_dataset(0, 13)],
            ..inputs(&config(13), 13)
        };
        let sim = SimulationInputs {
            clients: sim.clients,
            init: sim.init,
            clean_test: sim.clean_test,
            backdoor_test: None,
            validation: sim.validation,
        };
        let out = run_federation(&cfg, &DefenseConfig::None, None, &sim).unwrap();

        let mut rng = rng::derive(cfg.seed, &[salt::CLIENT_TRAIN, 1, 0]);
        let expected = local_train_benign(&sim.init, &sim.clients[0], &cfg, &mut rng).unwrap();
        let mut local = sim.init.clone();
        local.apply_delta(&expected.delta, 1.0);
        assert!(out.global.minus(&local).l2_norm() < 1e-14);
    }
}
