//! Client-selection policies. Each selector is a pure function of a round
//! snapshot plus whatever learned state the policy carries, returning exactly
//! `budget` distinct client ids (sorted ascending). Ties always break toward
//! the smaller id so replays are deterministic.

use std::collections::BTreeMap;

use rand::Rng;

use crate::env::ClientState;
use crate::whittle::{Action, IndexTable, SubsidizedQTable, SubsidySet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PolicyKind {
    Random,
    EfficiencyFirst,
    Cql,
    Ucb,
    FullInformation,
    WilfQ,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 6] = [
        PolicyKind::Random,
        PolicyKind::EfficiencyFirst,
        PolicyKind::Cql,
        PolicyKind::Ucb,
        PolicyKind::FullInformation,
        PolicyKind::WilfQ,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Random => "ran",
            PolicyKind::EfficiencyFirst => "ef",
            PolicyKind::Cql => "cql",
            PolicyKind::Ucb => "ucb",
            PolicyKind::FullInformation => "fi",
            PolicyKind::WilfQ => "wilfq",
        }
    }

    pub fn from_name(name: &str) -> Option<PolicyKind> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }
}

impl std::fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One client as the selector sees it this round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Candidate {
    pub id: u32,
    pub class_id: u32,
    pub estimated_state: ClientState,
    pub true_state: ClientState,
}

/// Round snapshot shared by all selectors.
#[derive(Debug, Clone, Copy)]
pub struct SelectionContext<'a> {
    pub round: u32,
    pub budget: usize,
    pub candidates: &'a [Candidate],
}

impl SelectionContext<'_> {
    fn check(&self) {
        assert!(self.round >= 1, "rounds are 1-based");
        assert!(
            self.budget >= 1 && self.budget <= self.candidates.len(),
            "budget {} out of range for {} candidates",
            self.budget,
            self.candidates.len()
        );
    }
}

/// Takes the `budget` best candidates under `key` (ascending), id tie-break.
fn take_best(ctx: &SelectionContext, key: impl Fn(&Candidate) -> f64) -> Vec<u32> {
    let mut order: Vec<&Candidate> = ctx.candidates.iter().collect();
    order.sort_by(|a, b| key(a).total_cmp(&key(b)).then(a.id.cmp(&b.id)));
    let mut ids: Vec<u32> = order[..ctx.budget].iter().map(|c| c.id).collect();
    ids.sort_unstable();
    ids
}

/// Uniform budget-sized subset without replacement.
pub fn select_random<R: Rng + ?Sized>(ctx: &SelectionContext, rng: &mut R) -> Vec<u32> {
    ctx.check();
    let picks = rand::seq::index::sample(rng, ctx.candidates.len(), ctx.budget);
    let mut ids: Vec<u32> = picks.iter().map(|i| ctx.candidates[i].id).collect();
    ids.sort_unstable();
    ids
}

/// Smallest expected latency first; `expected_latency` is indexed by client id.
pub fn select_efficiency_first(ctx: &SelectionContext, expected_latency: &[f64]) -> Vec<u32> {
    ctx.check();
    take_best(ctx, |c| expected_latency[c.id as usize])
}

/// Running latency statistics for UCB, indexed by client id.
#[derive(Debug, Clone, PartialEq)]
pub struct UcbStats {
    entries: Vec<(u64, f64)>,
}

impl UcbStats {
    pub fn new(n_clients: usize) -> Self {
        UcbStats {
            entries: vec![(0, 0.0); n_clients],
        }
    }

    pub fn observe(&mut self, id: u32, latency: f64) {
        let (count, mean) = &mut self.entries[id as usize];
        *count += 1;
        *mean += (latency - *mean) / *count as f64;
    }

    pub fn count(&self, id: u32) -> u64 {
        self.entries[id as usize].0
    }

    pub fn mean(&self, id: u32) -> f64 {
        self.entries[id as usize].1
    }
}

/// Lower-confidence-bound rule on latency: picks the smallest
/// `mean - sqrt(2 ln r / n)`; never-sampled clients come first.
pub fn select_ucb(ctx: &SelectionContext, stats: &UcbStats) -> Vec<u32> {
    ctx.check();
    let ln_r = (ctx.round as f64).ln();
    take_best(ctx, |c| {
        let n = stats.count(c.id);
        if n == 0 {
            f64::NEG_INFINITY
        } else {
            stats.mean(c.id) - (2.0 * ln_r / n as f64).sqrt()
        }
    })
}

/// Plain Q-learning baseline: with probability `gamma` a uniform random
/// subset, otherwise the largest advantage `Q(s,active) - Q(s,passive)` at
/// the estimated state. The table has a single dummy subsidy slot.
pub fn select_cql<R: Rng + ?Sized>(
    ctx: &SelectionContext,
    table: &SubsidizedQTable,
    scope_of: impl Fn(&Candidate) -> u32,
    gamma: f64,
    rng: &mut R,
) -> (Vec<u32>, bool) {
    ctx.check();
    let explore = rng.random::<f64>() < gamma;
    if explore {
        return (select_random(ctx, rng), true);
    }
    let ids = take_best(ctx, |c| {
        let scope = scope_of(c);
        -(table.q(scope, c.estimated_state, Action::Active, 0)
            - table.q(scope, c.estimated_state, Action::Passive, 0))
    });
    (ids, false)
}

/// Full-information upper baseline: largest exact Whittle index at the TRUE
/// state, indices precomputed per (class, state).
pub fn select_fi(
    ctx: &SelectionContext,
    exact_indices: &BTreeMap<(u32, ClientState), f64>,
) -> Vec<u32> {
    ctx.check();
    take_best(ctx, |c| -exact_indices[&(c.class_id, c.true_state)])
}

/// Whittle-index rule over learned indices: ranks by the stored index at the
/// estimated state and takes the top `budget`. Independently, with
/// probability `gamma` the stored index of every candidate at its estimated
/// state is reassigned uniformly from the subsidy set and the action vector
/// is permuted across candidates (the round's selection becomes a uniform
/// random subset). Returns the selected set and whether exploration fired.
pub fn select_wilfq<R: Rng + ?Sized>(
    ctx: &SelectionContext,
    table: &mut IndexTable,
    gamma: f64,
    subsidies: &SubsidySet,
    rng: &mut R,
) -> (Vec<u32>, bool) {
    ctx.check();
    let ranked = take_best(ctx, |c| -table.get(c.id, c.estimated_state));
    let explore = rng.random::<f64>() < gamma;
    if !explore {
        return (ranked, false);
    }
    for c in ctx.candidates {
        let draw = subsidies.get(rng.random_range(0..subsidies.len()));
        table.set(c.id, c.estimated_state, draw);
    }
    (select_random(ctx, rng), true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::ClientState;
    use crate::SimRng;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn candidates(states: &[ClientState]) -> Vec<Candidate> {
        states
            .iter()
            .enumerate()
            .map(|(i, &s)| Candidate {
                id: i as u32,
                class_id: 1 + (i % 3) as u32,
                estimated_state: s,
                true_state: s,
            })
            .collect()
    }

    fn uniform_states(n: usize) -> Vec<ClientState> {
        (0..n).map(|i| ClientState::ALL[i % 3]).collect()
    }

    #[test]
    fn policy_names_round_trip() {
        for p in PolicyKind::ALL {
            assert_eq!(PolicyKind::from_name(p.name()), Some(p));
        }
        assert_eq!(PolicyKind::from_name("nope"), None);
    }

    #[test]
    fn efficiency_first_prefers_fast_clients_with_id_ties() {
        let cands = candidates(&uniform_states(5));
        let ctx = SelectionContext {
            round: 1,
            budget: 3,
            candidates: &cands,
        };
        let lat = [0.5, 0.2, 0.5, 0.1, 0.5];
        assert_eq!(select_efficiency_first(&ctx, &lat), vec![0, 1, 3]);
    }

    #[test]
    fn ucb_forces_never_selected_clients() {
        let cands = candidates(&uniform_states(4));
        let ctx = SelectionContext {
            round: 8,
            budget: 2,
            candidates: &cands,
        };
        let mut stats = UcbStats::new(4);
        for _ in 0..5 {
            stats.observe(0, 1.0);
        }
        stats.observe(1, 1.0);
        stats.observe(3, 0.01);
        // Client 2 was never sampled: it must be in the set.
        let sel = select_ucb(&ctx, &stats);
        assert!(sel.contains(&2));
        // Among sampled ones: idx(0) = 1 - sqrt(2 ln 8 / 5) ~ 0.088,
        // idx(1) = 1 - sqrt(2 ln 8) ~ -1.039, idx(3) = 0.01 - sqrt(2 ln 8) ~ -2.03.
        assert_eq!(sel, vec![2, 3]);
    }

    #[test]
    fn ucb_incremental_mean_is_exact() {
        let mut stats = UcbStats::new(1);
        for x in [1.0, 2.0, 6.0] {
            stats.observe(0, x);
        }
        assert!((stats.mean(0) - 3.0).abs() < 1e-12);
        assert_eq!(stats.count(0), 3);
    }

    #[test]
    fn cql_with_zero_table_takes_lowest_ids() {
        let cands = candidates(&uniform_states(6));
        let ctx = SelectionContext {
            round: 1,
            budget: 2,
            candidates: &cands,
        };
        let table = SubsidizedQTable::new(1..=3, 1);
        let mut rng = SimRng::seed_from_u64(1);
        let (sel, explored) = select_cql(&ctx, &table, |c| c.class_id, 0.0, &mut rng);
        assert_eq!(sel, vec![0, 1]);
        assert!(!explored);
    }

    #[test]
    fn cql_ranks_by_advantage() {
        let cands = candidates(&[ClientState::Normal, ClientState::Busy, ClientState::Normal]);
        let ctx = SelectionContext {
            round: 1,
            budget: 1,
            candidates: &cands,
        };
        let mut table = SubsidizedQTable::new(1..=3, 1);
        // Make busy-state activity in class 2 attractive, normal neutral.
        table.q_update(
            2,
            ClientState::Busy,
            Action::Active,
            0,
            0.0,
            5.0,
            ClientState::Busy,
            1.0,
            0.0,
        );
        let mut rng = SimRng::seed_from_u64(2);
        let (sel, _) = select_cql(&ctx, &table, |c| c.class_id, 0.0, &mut rng);
        assert_eq!(sel, vec![1]);
    }

    #[test]
    fn fi_ranks_by_exact_index_at_true_state() {
        // ids 0 and 3 are class-1 normal; promote id 4 to the same cell so
        // three candidates share the top index -0.1.
        let mut cands = candidates(&uniform_states(6));
        cands[4].true_state = ClientState::Normal;
        cands[4].class_id = 1;
        let mut exact = BTreeMap::new();
        for class in 1..=3u32 {
            exact.insert((class, ClientState::Normal), -0.1 * class as f64);
            exact.insert((class, ClientState::Limited), -0.2 * class as f64);
            exact.insert((class, ClientState::Busy), -0.3 * class as f64);
        }
        // Ties at -0.1 break toward smaller ids.
        let ctx = SelectionContext {
            round: 1,
            budget: 2,
            candidates: &cands,
        };
        assert_eq!(select_fi(&ctx, &exact), vec![0, 3]);
        let ctx = SelectionContext {
            round: 1,
            budget: 3,
            candidates: &cands,
        };
        assert_eq!(select_fi(&ctx, &exact), vec![0, 3, 4]);
    }

    #[test]
    fn wilfq_without_exploration_is_deterministic_top_k() {
        let cands = candidates(&uniform_states(5));
        let ctx = SelectionContext {
            round: 3,
            budget: 2,
            candidates: &cands,
        };
        let subsidies = SubsidySet::new(vec![-0.5, -0.4, -0.3, -0.2, -0.1]).unwrap();
        let mut table = IndexTable::new(5, -0.5);
        table.set(2, cands[2].estimated_state, -0.1);
        table.set(4, cands[4].estimated_state, -0.2);
        let mut rng = SimRng::seed_from_u64(3);
        let (sel, explored) = select_wilfq(&ctx, &mut table, 0.0, &subsidies, &mut rng);
        assert_eq!(sel, vec![2, 4]);
        assert!(!explored);
    }

    #[test]
    fn wilfq_matches_fi_when_indices_are_exact_and_states_true() {
        let subsidies = SubsidySet::new(vec![-0.5, -0.1]).unwrap();
        let mut exact = BTreeMap::new();
        let mut rng_states = SimRng::seed_from_u64(40);
        for class in 1..=3u32 {
            for (i, s) in ClientState::ALL.into_iter().enumerate() {
                exact.insert((class, s), -0.05 * class as f64 - 0.11 * i as f64);
            }
        }
        for trial in 0..50u64 {
            let states: Vec<ClientState> = (0..12)
                .map(|_| ClientState::ALL[rng_states.random_range(0..3)])
                .collect();
            let cands = candidates(&states);
            let ctx = SelectionContext {
                round: 1,
                budget: 4,
                candidates: &cands,
            };
            let mut table = IndexTable::new(12, 0.0);
            for c in &cands {
                for s in ClientState::ALL {
                    table.set(c.id, s, exact[&(c.class_id, s)]);
                }
            }
            let mut rng = SimRng::seed_from_u64(trial);
            let (wilfq, _) = select_wilfq(&ctx, &mut table, 0.0, &subsidies, &mut rng);
            assert_eq!(wilfq, select_fi(&ctx, &exact), "trial {trial}");
        }
    }

    #[test]
    fn wilfq_exploration_reassigns_uniformly_and_permutes_actions() {
        let n = 10usize;
        let cands = candidates(&uniform_states(n));
        let subsidies = SubsidySet::new(vec![-0.5, -0.4, -0.3, -0.2, -0.1]).unwrap();
        let mut table = IndexTable::new(n, -0.5);
        let mut rng = SimRng::seed_from_u64(7);
        let rounds = 10_000;
        let mut value_counts = BTreeMap::new();
        let mut pick_counts = vec![0usize; n];
        for r in 0..rounds {
            let ctx = SelectionContext {
                round: r + 1,
                budget: 2,
                candidates: &cands,
            };
            let (sel, explored) = select_wilfq(&ctx, &mut table, 1.0, &subsidies, &mut rng);
            assert!(explored);
            for c in &cands {
                let v = table.get(c.id, c.estimated_state);
                *value_counts
                    .entry((v * 10.0).round() as i64)
                    .or_insert(0usize) += 1;
            }
            for id in sel {
                pick_counts[id as usize] += 1;
            }
        }
        let total: usize = value_counts.values().sum();
        assert_eq!(value_counts.len(), 5);
        for (&v, &count) in &value_counts {
            let freq = count as f64 / total as f64;
            assert!((freq - 0.2).abs() < 0.02, "value {v}: frequency {freq}");
        }
        // Permuted actions give every client the same selection probability.
        for (id, &count) in pick_counts.iter().enumerate() {
            let freq = count as f64 / rounds as f64;
            assert!(
                (freq - 0.2).abs() < 0.02,
                "client {id}: pick frequency {freq}"
            );
        }
    }

    proptest! {
        #[test]
        fn selectors_return_budget_distinct_known_ids(
            seed in 0u64..500,
            n in 2usize..40,
            budget_frac in 0.05f64..1.0,
        ) {
            let states = uniform_states(n);
            let cands = candidates(&states);
            let budget = ((n as f64 * budget_frac).ceil() as usize).clamp(1, n);
            let ctx = SelectionContext { round: 5, budget, candidates: &cands };
            let subsidies = SubsidySet::new(vec![-0.5, -0.4, -0.3, -0.2, -0.1]).unwrap();
            let latencies: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37) % 1.0).collect();
            let table = SubsidizedQTable::new(1..=3, 1);
            let mut index_table = IndexTable::random_init(n, &subsidies, &mut SimRng::seed_from_u64(seed));
            let mut exact = BTreeMap::new();
            for class in 1..=3u32 {
                for (i, s) in ClientState::ALL.into_iter().enumerate() {
                    exact.insert((class, s), -(class as f64) * 0.1 - i as f64 * 0.03);
                }
            }
            let stats = UcbStats::new(n);

            let mut rng = SimRng::seed_from_u64(seed);
            let mut all = vec![
                select_random(&ctx, &mut rng),
                select_efficiency_first(&ctx, &latencies),
                select_ucb(&ctx, &stats),
                select_cql(&ctx, &table, |c| c.class_id, 0.3, &mut rng).0,
                select_fi(&ctx, &exact),
                select_wilfq(&ctx, &mut index_table, 0.3, &subsidies, &mut rng).0,
            ];
            for sel in all.drain(..) {
                prop_assert_eq!(sel.len(), budget);
                let mut sorted = sel.clone();
                sorted.sort_unstable();
                sorted.dedup();
                prop_assert_eq!(sorted.len(), budget, "duplicate ids in selection");
                prop_assert!(sel.iter().all(|&id| (id as usize) < n));
                prop_assert!(sel.windows(2).all(|w| w[0] < w[1]), "selection not sorted");
            }
        }

        #[test]
        fn selectors_replay_identically(seed in 0u64..300) {
            let states = uniform_states(15);
            let cands = candidates(&states);
            let ctx = SelectionContext { round: 2, budget: 4, candidates: &cands };
            let subsidies = SubsidySet::new(vec![-0.3, -0.2, -0.1]).unwrap();
            let run = |s: u64| {
                let mut table = IndexTable::random_init(15, &subsidies, &mut SimRng::seed_from_u64(s));
                let mut rng = SimRng::seed_from_u64(s);
                let a = select_random(&ctx, &mut rng);
                let b = select_wilfq(&ctx, &mut table, 0.5, &subsidies, &mut rng);
                (a, b)
            };
            prop_assert_eq!(run(seed), run(seed));
        }
    }
}
