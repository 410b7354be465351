//! Round loop: state estimation, selection, latency realization, FedAvg
//! aggregation, reward computation, Q-updates, and replication statistics.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::Rng;
use rand::SeedableRng;
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::env::{self, Client, ClientClass, ClientState, EnvError};
use crate::policy::{
    select_cql, select_efficiency_first, select_fi, select_random, select_ucb, select_wilfq,
    Candidate, PolicyKind, SelectionContext, UcbStats,
};
use crate::task::{
    accuracy, aggregate, dataset_loss, dirichlet_partition, generate_synthetic, load_dataset_csv,
    local_train, optimal_loss_oracle, participant_loss, AggregationWeights, Dataset, ModelParams,
    Shard, TaskError,
};
use crate::whittle::{
    default_bracket, exact_whittle, Action, ArmMdp, IndexTable, SubsidizedQTable, SubsidySet,
    WhittleError,
};
use crate::SimRng;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Whittle(#[from] WhittleError),
}

/// Whether the server sees true client states or must infer them from
/// observed latencies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Observability {
    Oracle,
    Inferred,
}

/// Granularity at which Q-tables are shared.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sharing {
    PerClass,
    PerClient,
}

/// Polynomially decaying coefficient `scale * r^-exponent`, clamped to [0,1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub scale: f64,
    pub exponent: f64,
}

impl Schedule {
    pub fn value(&self, round: u32) -> f64 {
        (self.scale * (round as f64).powf(-self.exponent)).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic,
    Csv(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub dim: usize,
    pub n_classes: usize,
    pub cluster_spread: f64,
    pub tau: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub source: DataSource,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Budget {
    Count(usize),
    Fraction(f64),
}

impl Budget {
    pub fn resolve(self, n_clients: usize) -> Result<usize, SimError> {
        let count = match self {
            Budget::Count(c) => c,
            Budget::Fraction(f) => {
                if !(f > 0.0 && f <= 1.0) {
                    return Err(SimError::BadConfig(format!(
                        "participation fraction {f} outside (0, 1]"
                    )));
                }
                ((f * n_clients as f64).round() as usize).max(1)
            }
        };
        if count == 0 || count > n_clients {
            return Err(SimError::BadConfig(format!(
                "budget {count} out of range for {n_clients} clients"
            )));
        }
        Ok(count)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub classes: Vec<ClientClass>,
    pub budget: Budget,
    pub subsidies: SubsidySet,
    pub discount: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub eta: Schedule,
    pub gamma: Schedule,
    /// None: 3x the population-median expected normal-state latency.
    pub latency_cap: Option<f64>,
    pub max_rounds: u32,
    pub observability: Observability,
    pub sharing: Sharing,
    pub noise_power_w: f64,
    pub transmit_power_w: f64,
    /// Compute seconds per sample at unit capacity; per-client coefficient is
    /// this over the drawn capacity factor.
    pub base_secs_per_sample: f64,
    pub task: TaskConfig,
    /// Seed for the static draw (dataset, partition, capacities); run seeds
    /// only drive dynamics, so policy comparisons are paired.
    pub task_seed: u64,
}

impl SimConfig {
    pub fn n_clients(&self) -> usize {
        self.classes.iter().map(|c| c.population as usize).sum()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.classes.is_empty() {
            return Err(SimError::BadConfig("no client classes".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for class in &self.classes {
            class.validate()?;
            if !seen.insert(class.id) {
                return Err(SimError::BadConfig(format!(
                    "duplicate class id {}",
                    class.id
                )));
            }
        }
        let n = self.n_clients();
        self.budget.resolve(n)?;
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return Err(SimError::BadConfig(format!(
                "discount {} outside (0, 1)",
                self.discount
            )));
        }
        if !(self.lambda >= 0.0) {
            return Err(SimError::BadConfig("lambda must be non-negative".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(SimError::BadConfig(format!(
                "alpha {} outside (0, 1)",
                self.alpha
            )));
        }
        for (name, s) in [("eta", self.eta), ("gamma", self.gamma)] {
            if !(s.scale >= 0.0) || !(s.exponent >= 0.0) {
                return Err(SimError::BadConfig(format!(
                    "{name} schedule must have non-negative scale and exponent"
                )));
            }
        }
        if let Some(cap) = self.latency_cap {
            if !(cap > 0.0) {
                return Err(SimError::BadConfig("latency cap must be positive".into()));
            }
        }
        if self.max_rounds == 0 {
            return Err(SimError::BadConfig("max_rounds must be at least 1".into()));
        }
        if !(self.noise_power_w > 0.0) || !(self.transmit_power_w > 0.0) {
            return Err(SimError::BadConfig(
                "noise and transmit power must be positive".into(),
            ));
        }
        if !(self.base_secs_per_sample > 0.0) {
            return Err(SimError::BadConfig(
                "base seconds per sample must be positive".into(),
            ));
        }
        let t = &self.task;
        if t.n_train < n {
            return Err(SimError::BadConfig(format!(
                "{} training samples cannot cover {n} clients",
                t.n_train
            )));
        }
        if t.dim == 0 || t.n_classes < 2 {
            return Err(SimError::BadConfig(
                "task needs dim >= 1 and classes >= 2".into(),
            ));
        }
        if matches!(t.source, DataSource::Synthetic) && t.n_test == 0 {
            return Err(SimError::BadConfig("need at least one test sample".into()));
        }
        if !(t.cluster_spread >= 0.0) || !(t.tau > 0.0) || !(t.learning_rate > 0.0) {
            return Err(SimError::BadConfig(
                "task spread/tau/learning rate invalid".into(),
            ));
        }
        if t.batch_size == 0 || t.epochs == 0 {
            return Err(SimError::BadConfig(
                "batch size and epochs must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Immutable per-cell context shared by every run: population, data, oracle
/// loss, exact indices, cap. Built once from the task seed.
#[derive(Debug, Clone)]
pub struct SimWorld {
    pub config: SimConfig,
    pub clients: Vec<Client>,
    /// Index into `config.classes` per client id.
    pub class_of: Vec<usize>,
    pub train: Dataset,
    pub test: Dataset,
    pub shards: Vec<Shard>,
    pub oracle_loss: f64,
    pub latency_cap: f64,
    pub budget: usize,
    /// Stationary-unselected expected latency per client (EF ranking key).
    pub expected_latency: Vec<f64>,
    /// Representative expected latency per (class position, state).
    pub class_latencies: Vec<[f64; 3]>,
    pub exact_indices: BTreeMap<(u32, ClientState), f64>,
    pub stationary_unselected: Vec<[f64; 3]>,
    pub initial_accuracy: f64,
}

const ORACLE_GRAD_TOL: f64 = 1e-5;
const ORACLE_MAX_ITERS: usize = 200_000;
const EXACT_INDEX_TOL: f64 = 1e-9;

pub fn build_world(config: SimConfig) -> Result<SimWorld, SimError> {
    config.validate()?;
    let mut rng = SimRng::seed_from_u64(config.task_seed);
    let t = &config.task;
    let (train, test) = match &t.source {
        DataSource::Synthetic => {
            let full = generate_synthetic(
                t.n_train + t.n_test,
                t.n_classes,
                t.dim,
                t.cluster_spread,
                &mut rng,
            )?;
            full.split_tail(t.n_test)?
        }
        DataSource::Csv(path) => {
            // Imported data is not split; accuracy is measured in-sample.
            let ds = load_dataset_csv(path)?;
            let test = ds.clone();
            (ds, test)
        }
    };
    let n = config.n_clients();
    let shards = dirichlet_partition(&train, n, t.tau, &mut rng)?;
    let model_bits = (train.n_classes * (train.dim + 1) * 64) as f64;

    let mut clients = Vec::with_capacity(n);
    let mut class_of = Vec::with_capacity(n);
    let mut id = 0u32;
    for (pos, class) in config.classes.iter().enumerate() {
        for _ in 0..class.population {
            let (lo, hi) = class.capacity_range;
            let kappa = if hi > lo {
                rng.random_range(lo..hi)
            } else {
                lo
            };
            clients.push(Client {
                id,
                class_id: class.id,
                compute_coefficient: config.base_secs_per_sample / kappa,
                dataset_size: shards[id as usize].indices.len() as u32,
                transmit_power_w: config.transmit_power_w,
                model_bits,
            });
            class_of.push(pos);
            id += 1;
        }
    }

    let oracle_loss = optimal_loss_oracle(&train, ORACLE_GRAD_TOL, ORACLE_MAX_ITERS)?;

    let stationary_unselected: Vec<[f64; 3]> = config
        .classes
        .iter()
        .map(|c| env::stationary_distribution(&c.transitions.unselected))
        .collect::<Result<_, _>>()?;

    let comm_at_mean_gain = |class: &ClientClass| {
        env::communication_time(
            model_bits,
            class.bandwidth_hz,
            config.transmit_power_w,
            class.channel_gain_mean,
            config.noise_power_w,
        )
    };

    let expected_latency: Vec<f64> = clients
        .iter()
        .map(|cl| {
            let pos = class_of[cl.id as usize];
            let class = &config.classes[pos];
            let pi = stationary_unselected[pos];
            let train_mean: f64 = ClientState::ALL
                .iter()
                .map(|&s| pi[s.index()] * cl.expected_training_time(class.state_coefficients, s))
                .sum();
            train_mean + comm_at_mean_gain(class)
        })
        .collect();

    let latency_cap = match config.latency_cap {
        Some(cap) => cap,
        None => {
            let mut normal: Vec<f64> = clients
                .iter()
                .map(|cl| {
                    let class = &config.classes[class_of[cl.id as usize]];
                    cl.expected_training_time(class.state_coefficients, ClientState::Normal)
                        + comm_at_mean_gain(class)
                })
                .collect();
            normal.sort_by(f64::total_cmp);
            let median = if normal.len() % 2 == 1 {
                normal[normal.len() / 2]
            } else {
                0.5 * (normal[normal.len() / 2 - 1] + normal[normal.len() / 2])
            };
            3.0 * median
        }
    };

    // Representative per-(class,state) latencies drive the exact indices and
    // use class means so FI needs no per-client solve.
    let mut class_latencies = Vec::with_capacity(config.classes.len());
    let mut exact_indices = BTreeMap::new();
    for (pos, class) in config.classes.iter().enumerate() {
        let members: Vec<&Client> = clients
            .iter()
            .filter(|c| class_of[c.id as usize] == pos)
            .collect();
        let mean_coeff =
            members.iter().map(|c| c.compute_coefficient).sum::<f64>() / members.len() as f64;
        let mean_size =
            members.iter().map(|c| c.dataset_size as f64).sum::<f64>() / members.len() as f64;
        let shift = mean_coeff * mean_size;
        let comm = comm_at_mean_gain(class);
        let mut lat = [0.0; 3];
        for s in ClientState::ALL {
            lat[s.index()] = shift + class.state_coefficients[s.index()] * shift + comm;
        }
        class_latencies.push(lat);
        let mdp = ArmMdp::from_latencies(lat, class.transitions.clone(), config.discount)?;
        for s in ClientState::ALL {
            let w = exact_whittle(&mdp, s, default_bracket(&mdp), EXACT_INDEX_TOL)?;
            exact_indices.insert((class.id, s), w);
        }
    }

    let initial_accuracy = accuracy(&ModelParams::zeros(train.dim, train.n_classes), &test);
    let budget = config.budget.resolve(n)?;

    Ok(SimWorld {
        config,
        clients,
        class_of,
        train,
        test,
        shards,
        oracle_loss,
        latency_cap,
        budget,
        expected_latency,
        class_latencies,
        exact_indices,
        stationary_unselected,
        initial_accuracy,
    })
}

/// Per-round reward: active pays realized latency plus the weighted loss gap,
/// passive pays only the weighted loss gap.
pub fn reward(training_time: f64, comm_time: f64, loss_gap: f64, lambda: f64, active: bool) -> f64 {
    if active {
        -(training_time + comm_time + lambda * loss_gap)
    } else {
        -lambda * loss_gap
    }
}

/// Nearest analytic per-state mean classification of an observed training
/// latency.
pub fn classify_training_latency(
    client: &Client,
    coefficients: [f64; 3],
    observed: f64,
) -> ClientState {
    let mut best = ClientState::Normal;
    let mut best_dist = f64::INFINITY;
    for s in ClientState::ALL {
        let mean = client.expected_training_time(coefficients, s);
        let d = (observed - mean).abs();
        if d < best_dist {
            best_dist = d;
            best = s;
        }
    }
    best
}

/// Server-side state estimate for one client.
///
/// Oracle mode returns the true state. Inferred mode classifies the latest
/// observed training latency when one exists and otherwise carries the
/// previous estimate forward (cold start: Normal).
pub fn estimate_state(
    mode: Observability,
    true_state: ClientState,
    previous_estimate: ClientState,
    observed_training_time: Option<f64>,
    client: &Client,
    coefficients: [f64; 3],
) -> ClientState {
    match mode {
        Observability::Oracle => true_state,
        Observability::Inferred => match observed_training_time {
            Some(t) => classify_training_latency(client, coefficients, t),
            None => previous_estimate,
        },
    }
}

/// Everything recorded about one round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: u32,
    pub selected: Vec<u32>,
    /// Aligned with `selected`.
    pub train_times: Vec<f64>,
    /// Aligned with `selected`.
    pub comm_times: Vec<f64>,
    pub included: Vec<u32>,
    pub round_latency: f64,
    pub cum_delay: f64,
    /// Participant-weighted loss over included clients' personalized models.
    pub partial_loss: f64,
    pub full_loss: f64,
    pub test_accuracy: f64,
    /// `max(0, partial_loss - oracle_loss)`; drives stopping and rewards.
    pub loss_gap: f64,
    /// True-state fractions (normal, limited, busy) at selection time.
    pub state_fractions: [f64; 3],
    pub explored: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub records: Vec<RoundRecord>,
    pub converged: bool,
    pub rounds: u32,
    pub total_delay: f64,
    pub final_accuracy: f64,
    pub initial_accuracy: f64,
}

/// A finished run plus the policy's learned state, when the policy has any.
#[derive(Debug)]
pub struct PolicyRun {
    pub result: RunResult,
    pub qtable: Option<SubsidizedQTable>,
    pub index_table: Option<IndexTable>,
}

pub fn run_simulation(world: &SimWorld, policy: PolicyKind, seed: u64) -> RunResult {
    run_policy(world, policy, seed).result
}

pub fn run_policy(world: &SimWorld, policy: PolicyKind, seed: u64) -> PolicyRun {
    let cfg = &world.config;
    let n = world.clients.len();
    let mut rng = SimRng::seed_from_u64(seed);

    // Initial true states from each class's resting distribution.
    let mut true_states: Vec<ClientState> = (0..n)
        .map(|id| {
            let pi = world.stationary_unselected[world.class_of[id]];
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for s in ClientState::ALL {
                acc += pi[s.index()];
                if u < acc {
                    return s;
                }
            }
            ClientState::Busy
        })
        .collect();
    let mut est_states: Vec<ClientState> = match cfg.observability {
        Observability::Oracle => true_states.clone(),
        Observability::Inferred => vec![ClientState::Normal; n],
    };

    let scope_of = |id: u32| -> u32 {
        match cfg.sharing {
            Sharing::PerClass => world.clients[id as usize].class_id,
            Sharing::PerClient => id,
        }
    };
    let scope_ids: Vec<u32> = match cfg.sharing {
        Sharing::PerClass => cfg.classes.iter().map(|c| c.id).collect(),
        Sharing::PerClient => (0..n as u32).collect(),
    };
    let mut qtable = match policy {
        PolicyKind::WilfQ => Some(SubsidizedQTable::new(
            scope_ids.clone(),
            cfg.subsidies.len(),
        )),
        PolicyKind::Cql => Some(SubsidizedQTable::new(scope_ids.clone(), 1)),
        _ => None,
    };
    let mut index_table =
        (policy == PolicyKind::WilfQ).then(|| IndexTable::random_init(n, &cfg.subsidies, &mut rng));
    let mut ucb = (policy == PolicyKind::Ucb).then(|| UcbStats::new(n));

    let mut global = ModelParams::zeros(world.train.dim, world.train.n_classes);
    let mut prev_partial = dataset_loss(&global, &world.train);
    let mut cum_delay = 0.0f64;
    let mut records: Vec<RoundRecord> = Vec::new();
    let mut converged = false;

    for round in 1..=cfg.max_rounds {
        let gamma_r = cfg.gamma.value(round);

        let mut state_fractions = [0.0f64; 3];
        for &s in &true_states {
            state_fractions[s.index()] += 1.0 / n as f64;
        }

        // Refresh stored indices from the Q-table at current estimates.
        if policy == PolicyKind::WilfQ {
            let table = qtable.as_ref().unwrap();
            let index = index_table.as_mut().unwrap();
            for id in 0..n as u32 {
                let s = est_states[id as usize];
                index.set(
                    id,
                    s,
                    table.estimate_whittle(scope_of(id), s, &cfg.subsidies),
                );
            }
        }

        let candidates: Vec<Candidate> = (0..n as u32)
            .map(|id| Candidate {
                id,
                class_id: world.clients[id as usize].class_id,
                estimated_state: est_states[id as usize],
                true_state: true_states[id as usize],
            })
            .collect();
        let ctx = SelectionContext {
            round,
            budget: world.budget,
            candidates: &candidates,
        };

        let (selected, explored) = match policy {
            PolicyKind::Random => (select_random(&ctx, &mut rng), false),
            PolicyKind::EfficiencyFirst => (
                select_efficiency_first(&ctx, &world.expected_latency),
                false,
            ),
            PolicyKind::Ucb => (select_ucb(&ctx, ucb.as_ref().unwrap()), false),
            PolicyKind::Cql => select_cql(
                &ctx,
                qtable.as_ref().unwrap(),
                |c| scope_of(c.id),
                gamma_r,
                &mut rng,
            ),
            PolicyKind::FullInformation => (select_fi(&ctx, &world.exact_indices), false),
            PolicyKind::WilfQ => select_wilfq(
                &ctx,
                index_table.as_mut().unwrap(),
                gamma_r,
                &cfg.subsidies,
                &mut rng,
            ),
        };

        // Realize latencies for the selected set (ascending id order).
        let mut train_times = Vec::with_capacity(selected.len());
        let mut comm_times = Vec::with_capacity(selected.len());
        let mut totals = Vec::with_capacity(selected.len());
        for &id in &selected {
            let client = &world.clients[id as usize];
            let class = &cfg.classes[world.class_of[id as usize]];
            let t_train = env::sample_training_time(
                client,
                class.state_coefficients,
                true_states[id as usize],
                &mut rng,
            );
            let gain = env::sample_channel_gain_sq(class.channel_gain_mean, &mut rng);
            let t_comm = env::communication_time(
                client.model_bits,
                class.bandwidth_hz,
                client.transmit_power_w,
                gain,
                cfg.noise_power_w,
            );
            train_times.push(t_train);
            comm_times.push(t_comm);
            totals.push(t_train + t_comm);
        }
        let included: Vec<u32> = selected
            .iter()
            .zip(&totals)
            .filter(|&(_, &t)| t <= world.latency_cap)
            .map(|(&id, _)| id)
            .collect();
        let round_latency = env::round_latency(&totals, world.latency_cap).expect("budget >= 1");
        cum_delay += round_latency;

        // Local training and aggregation over arrivals within the cap.
        let mut partial_loss = prev_partial;
        if !included.is_empty() {
            let mut models = Vec::with_capacity(included.len());
            for &id in &included {
                let shard = &world.shards[id as usize];
                models.push(local_train(
                    &global,
                    &world.train,
                    &shard.indices,
                    cfg.task.learning_rate,
                    cfg.task.batch_size,
                    cfg.task.epochs,
                    &mut rng,
                ));
            }
            let sizes: Vec<(u32, u32)> = included
                .iter()
                .map(|&id| (id, world.clients[id as usize].dataset_size))
                .collect();
            let weights = AggregationWeights::from_sizes(&sizes).expect("non-empty shards");
            let refs: Vec<&ModelParams> = models.iter().collect();
            global = aggregate(&refs, &weights.weights()).expect("aligned weights");
            let entries: Vec<(&ModelParams, &[usize])> = included
                .iter()
                .zip(&models)
                .map(|(&id, m)| (m, world.shards[id as usize].indices.as_slice()))
                .collect();
            partial_loss =
                participant_loss(&world.train, &entries).expect("non-empty participants");
        }
        prev_partial = partial_loss;
        let full_loss = dataset_loss(&global, &world.train);
        let test_accuracy = accuracy(&global, &world.test);
        let loss_gap = (partial_loss - world.oracle_loss).max(0.0);

        if let Some(stats) = ucb.as_mut() {
            for (&id, &t) in selected.iter().zip(&totals) {
                stats.observe(id, t);
            }
        }

        // Advance true states, then refresh estimates for next round.
        let mut selected_mask = vec![false; n];
        for &id in &selected {
            selected_mask[id as usize] = true;
        }
        let est_snapshot = est_states.clone();
        for id in 0..n {
            let class = &cfg.classes[world.class_of[id]];
            true_states[id] = env::step_state(
                true_states[id],
                selected_mask[id],
                &class.transitions,
                &mut rng,
            );
        }
        match cfg.observability {
            Observability::Oracle => est_states.copy_from_slice(&true_states),
            Observability::Inferred => {
                for (slot, &id) in selected.iter().enumerate() {
                    let client = &world.clients[id as usize];
                    let class = &cfg.classes[world.class_of[id as usize]];
                    est_states[id as usize] = classify_training_latency(
                        client,
                        class.state_coefficients,
                        train_times[slot],
                    );
                }
            }
        }

        // Q-updates bootstrap on the realized next state (oracle) or the next
        // estimate (inferred). The observed transition does not depend on the
        // subsidy, so every subsidy slot is refreshed from it; only the
        // subsidy term in the target differs per slot. The learning rate
        // decays per cell visit, not per round: active cells are visited far
        // less often than passive ones and would otherwise absorb stale
        // targets with tiny steps.
        match policy {
            PolicyKind::WilfQ => {
                let table = qtable.as_mut().unwrap();
                let mut slot_of = vec![usize::MAX; n];
                for (slot, &id) in selected.iter().enumerate() {
                    slot_of[id as usize] = slot;
                }
                for id in 0..n as u32 {
                    let i = id as usize;
                    let s = est_snapshot[i];
                    let active = selected_mask[i];
                    // Timed-out clients pay their full realized latency even
                    // though the server discards their update; the cap only
                    // bounds the round clock and aggregation membership.
                    let r = if active {
                        let slot = slot_of[i];
                        reward(
                            train_times[slot],
                            comm_times[slot],
                            loss_gap,
                            cfg.lambda,
                            true,
                        )
                    } else {
                        reward(0.0, 0.0, loss_gap, cfg.lambda, false)
                    };
                    let next = match cfg.observability {
                        Observability::Oracle => true_states[i],
                        Observability::Inferred => est_states[i],
                    };
                    let action = if active {
                        Action::Active
                    } else {
                        Action::Passive
                    };
                    let scope = scope_of(id);
                    for (m_idx, &m_val) in cfg.subsidies.values().iter().enumerate() {
                        let eta = cfg
                            .eta
                            .value(table.visits(scope, s, action, m_idx) as u32 + 1);
                        table.q_update(scope, s, action, m_idx, m_val, r, next, eta, cfg.discount);
                    }
                }
            }
            PolicyKind::Cql => {
                let table = qtable.as_mut().unwrap();
                for (slot, &id) in selected.iter().enumerate() {
                    let i = id as usize;
                    let s = est_snapshot[i];
                    let r = reward(
                        train_times[slot],
                        comm_times[slot],
                        loss_gap,
                        cfg.lambda,
                        true,
                    );
                    let next = match cfg.observability {
                        Observability::Oracle => true_states[i],
                        Observability::Inferred => est_states[i],
                    };
                    let scope = scope_of(id);
                    let eta = cfg
                        .eta
                        .value(table.visits(scope, s, Action::Active, 0) as u32 + 1);
                    table.q_update(scope, s, Action::Active, 0, 0.0, r, next, eta, cfg.discount);
                }
            }
            _ => {}
        }

        records.push(RoundRecord {
            round,
            selected,
            train_times,
            comm_times,
            included,
            round_latency,
            cum_delay,
            partial_loss,
            full_loss,
            test_accuracy,
            loss_gap,
            state_fractions,
            explored,
        });

        if loss_gap <= cfg.alpha {
            converged = true;
            break;
        }
    }

    let last = records.last().expect("at least one round");
    let result = RunResult {
        rounds: records.len() as u32,
        converged,
        total_delay: last.cum_delay,
        final_accuracy: last.test_accuracy,
        initial_accuracy: world.initial_accuracy,
        records,
    };
    PolicyRun {
        result,
        qtable,
        index_table,
    }
}

/// Learned index estimates per (scope, state) read off the Q-table after one
/// WILF-Q run.
pub fn learned_indices(world: &SimWorld, seed: u64) -> BTreeMap<(u32, ClientState), f64> {
    let cfg = &world.config;
    let run = run_policy(world, PolicyKind::WilfQ, seed);
    let table = run.qtable.expect("wilf-q keeps a q-table");
    let scopes: Vec<u32> = match cfg.sharing {
        Sharing::PerClass => cfg.classes.iter().map(|c| c.id).collect(),
        Sharing::PerClient => (0..world.clients.len() as u32).collect(),
    };
    let mut out = BTreeMap::new();
    for scope in scopes {
        for s in ClientState::ALL {
            out.insert((scope, s), table.estimate_whittle(scope, s, &cfg.subsidies));
        }
    }
    out
}

/// Sample statistics with a Student-t 95 % confidence half-width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricStats {
    pub mean: f64,
    pub std_dev: f64,
    pub ci_half_width: Option<f64>,
    pub n: usize,
}

/// Mean, sample standard deviation and t-based 95 % CI half-width.
pub fn mean_ci(values: &[f64]) -> Option<MetricStats> {
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return Some(MetricStats {
            mean,
            std_dev: 0.0,
            ci_half_width: None,
            n,
        });
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let std_dev = var.sqrt();
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("valid degrees of freedom")
        .inverse_cdf(0.975);
    Some(MetricStats {
        mean,
        std_dev,
        ci_half_width: Some(t * std_dev / (n as f64).sqrt()),
        n,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationStats {
    pub n_runs: usize,
    pub n_converged: usize,
    /// Over converged runs only.
    pub total_delay: Option<MetricStats>,
    /// Over converged runs only.
    pub rounds: Option<MetricStats>,
    /// Over all runs.
    pub final_accuracy: Option<MetricStats>,
    /// Mean test accuracy resampled on a common cumulative-delay grid
    /// (101 points, 1 % steps of the largest observed delay).
    pub curve: Vec<(f64, f64)>,
}

#[derive(Debug)]
pub struct Replication {
    pub policy: PolicyKind,
    pub stats: ReplicationStats,
    pub runs: Vec<(u64, RunResult)>,
}

/// Aggregates finished runs into replication statistics.
pub fn summarize_runs(runs: &[RunResult]) -> ReplicationStats {
    let n_converged = runs.iter().filter(|r| r.converged).count();
    let delays: Vec<f64> = runs
        .iter()
        .filter(|r| r.converged)
        .map(|r| r.total_delay)
        .collect();
    let rounds: Vec<f64> = runs
        .iter()
        .filter(|r| r.converged)
        .map(|r| r.rounds as f64)
        .collect();
    let accs: Vec<f64> = runs.iter().map(|r| r.final_accuracy).collect();

    let max_delay = runs.iter().map(|r| r.total_delay).fold(0.0f64, f64::max);
    let mut curve = Vec::with_capacity(101);
    for i in 0..=100u32 {
        let t = max_delay * i as f64 / 100.0;
        let mut acc_sum = 0.0;
        for run in runs {
            let mut value = run.initial_accuracy;
            for rec in &run.records {
                if rec.cum_delay <= t {
                    value = rec.test_accuracy;
                } else {
                    break;
                }
            }
            acc_sum += value;
        }
        curve.push((t, acc_sum / runs.len().max(1) as f64));
    }

    ReplicationStats {
        n_runs: runs.len(),
        n_converged,
        total_delay: mean_ci(&delays),
        rounds: mean_ci(&rounds),
        final_accuracy: mean_ci(&accs),
        curve,
    }
}

/// Runs one policy across seeds and aggregates the statistics.
pub fn replicate(world: &SimWorld, policy: PolicyKind, seeds: &[u64]) -> Replication {
    let results: Vec<RunResult> = seeds
        .iter()
        .map(|&s| run_simulation(world, policy, s))
        .collect();
    let stats = summarize_runs(&results);
    let runs = seeds.iter().copied().zip(results).collect();
    Replication {
        policy,
        stats,
        runs,
    }
}
