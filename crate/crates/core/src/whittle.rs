//! Whittle index machinery for a single restless arm.
//!
//! An arm is a 3-state MDP with a passive and an active action. Adding a
//! subsidy `m` to the passive reward defines a family of MDPs; the Whittle
//! index of a state is the subsidy at which both actions become equally
//! attractive there. `exact_whittle` finds it by bisection over value
//! iterations; `SubsidizedQTable` learns tabular Q-values on a discrete
//! subsidy grid and `estimate_whittle` reads the index estimate back out.

use std::collections::BTreeMap;
use std::io::{self, Write};

use thiserror::Error;

use crate::env::{ClientState, TransitionPair};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WhittleError {
    #[error("subsidy set must be non-empty, finite and strictly increasing")]
    BadSubsidySet,
    #[error("discount must lie in [0, 1), got {0}")]
    BadDiscount(f64),
    #[error("no sign change over [{lo}, {hi}]: g(lo) = {g_lo:.6e}, g(hi) = {g_hi:.6e}")]
    NotBracketed {
        lo: f64,
        hi: f64,
        g_lo: f64,
        g_hi: f64,
    },
    #[error("unknown Q-table scope {0}")]
    UnknownScope(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Passive,
    Active,
}

impl Action {
    pub fn index(self) -> usize {
        match self {
            Action::Passive => 0,
            Action::Active => 1,
        }
    }
}

/// Discrete candidate subsidies, strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsidySet {
    values: Vec<f64>,
}

impl SubsidySet {
    pub fn new(values: Vec<f64>) -> Result<Self, WhittleError> {
        if values.is_empty()
            || values.iter().any(|v| !v.is_finite())
            || values.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(WhittleError::BadSubsidySet);
        }
        Ok(SubsidySet { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, i: usize) -> f64 {
        self.values[i]
    }

    /// Position of a value previously taken from this set.
    pub fn position_of(&self, value: f64) -> Option<usize> {
        self.values.iter().position(|&v| v == value)
    }
}

/// One restless arm: per-state rewards for both actions, action-dependent
/// transitions, and a discount factor.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmMdp {
    /// `rewards[state][action]` with the `Action` index convention.
    pub rewards: [[f64; 2]; 3],
    pub transitions: TransitionPair,
    pub discount: f64,
}

impl ArmMdp {
    pub fn new(
        rewards: [[f64; 2]; 3],
        transitions: TransitionPair,
        discount: f64,
    ) -> Result<Self, WhittleError> {
        if !(0.0..1.0).contains(&discount) {
            return Err(WhittleError::BadDiscount(discount));
        }
        Ok(ArmMdp {
            rewards,
            transitions,
            discount,
        })
    }

    /// Cost-shaped arm: active pays the expected latency, passive is free.
    pub fn from_latencies(
        latencies: [f64; 3],
        transitions: TransitionPair,
        discount: f64,
    ) -> Result<Self, WhittleError> {
        let rewards = [
            [0.0, -latencies[0]],
            [0.0, -latencies[1]],
            [0.0, -latencies[2]],
        ];
        ArmMdp::new(rewards, transitions, discount)
    }
}

/// Converged values, greedy policy and iteration diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueSolution {
    pub values: [f64; 3],
    pub policy: [Action; 3],
    pub iterations: usize,
    pub residual: f64,
}

const VALUE_ITER_CAP: usize = 1_000_000;

fn action_values(mdp: &ArmMdp, subsidy: f64, state: usize, values: &[f64; 3]) -> (f64, f64) {
    let row_p = &mdp.transitions.unselected[state];
    let row_a = &mdp.transitions.selected[state];
    let cont_p: f64 = (0..3).map(|j| row_p[j] * values[j]).sum();
    let cont_a: f64 = (0..3).map(|j| row_a[j] * values[j]).sum();
    let q_passive = mdp.rewards[state][0] + subsidy + mdp.discount * cont_p;
    let q_active = mdp.rewards[state][1] + mdp.discount * cont_a;
    (q_passive, q_active)
}

/// Value iteration at a fixed subsidy until the sup-norm step falls below
/// `tol` (hence the Bellman residual of the returned values is below
/// `discount * tol`).
pub fn value_iteration(mdp: &ArmMdp, subsidy: f64, tol: f64) -> ValueSolution {
    let mut values = [0.0f64; 3];
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < VALUE_ITER_CAP {
        let mut next = [0.0f64; 3];
        for (s, slot) in next.iter_mut().enumerate() {
            let (qp, qa) = action_values(mdp, subsidy, s, &values);
            *slot = qp.max(qa);
        }
        residual = (0..3)
            .map(|s| (next[s] - values[s]).abs())
            .fold(0.0, f64::max);
        values = next;
        iterations += 1;
        if residual < tol {
            break;
        }
    }
    let mut policy = [Action::Passive; 3];
    for (s, slot) in policy.iter_mut().enumerate() {
        let (qp, qa) = action_values(mdp, subsidy, s, &values);
        *slot = if qa > qp {
            Action::Active
        } else {
            Action::Passive
        };
    }
    ValueSolution {
        values,
        policy,
        iterations,
        residual,
    }
}

/// Q-values induced by a converged value function at the given subsidy.
pub fn q_values(mdp: &ArmMdp, subsidy: f64, values: &[f64; 3]) -> [[f64; 2]; 3] {
    let mut q = [[0.0; 2]; 3];
    for (s, row) in q.iter_mut().enumerate() {
        let (qp, qa) = action_values(mdp, subsidy, s, values);
        *row = [qp, qa];
    }
    q
}

const EXACT_VALUE_TOL: f64 = 1e-12;

/// Active-minus-passive advantage at subsidy `m`, under the optimal values.
fn advantage(mdp: &ArmMdp, state: ClientState, m: f64) -> f64 {
    let sol = value_iteration(mdp, m, EXACT_VALUE_TOL);
    let (qp, qa) = action_values(mdp, m, state.index(), &sol.values);
    qa - qp
}

/// Exact Whittle index of `state` by bisection on the advantage sign change.
///
/// The advantage is non-increasing in the subsidy for indexable arms; the
/// bracket must satisfy `g(lo) >= 0 >= g(hi)`.
pub fn exact_whittle(
    mdp: &ArmMdp,
    state: ClientState,
    bracket: (f64, f64),
    tol: f64,
) -> Result<f64, WhittleError> {
    let (mut lo, mut hi) = bracket;
    let g_lo = advantage(mdp, state, lo);
    let g_hi = advantage(mdp, state, hi);
    if g_lo < 0.0 || g_hi > 0.0 {
        return Err(WhittleError::NotBracketed { lo, hi, g_lo, g_hi });
    }
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if advantage(mdp, state, mid) >= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// A generous bisection bracket from the reward magnitudes.
pub fn default_bracket(mdp: &ArmMdp) -> (f64, f64) {
    let r_max = mdp
        .rewards
        .iter()
        .flat_map(|r| r.iter())
        .fold(0.0f64, |acc, &v| acc.max(v.abs()));
    let span = 2.0 * (r_max + 1.0) / (1.0 - mdp.discount);
    (-span, span)
}

/// Sweeps the subsidy grid and checks that the passive set only grows.
pub fn check_indexability(mdp: &ArmMdp, grid: &[f64]) -> bool {
    let mut prev_mask = 0u8;
    for (i, &m) in grid.iter().enumerate() {
        let sol = value_iteration(mdp, m, EXACT_VALUE_TOL);
        let mut mask = 0u8;
        for s in 0..3 {
            let (qp, qa) = action_values(mdp, m, s, &sol.values);
            if qp >= qa {
                mask |= 1 << s;
            }
        }
        if i > 0 && prev_mask & mask != prev_mask {
            return false;
        }
        prev_mask = mask;
    }
    true
}

/// Per-client stored index estimates, one value per state.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexTable {
    values: Vec<[f64; 3]>,
}

impl IndexTable {
    pub fn new(n_clients: usize, init: f64) -> Self {
        IndexTable {
            values: vec![[init; 3]; n_clients],
        }
    }

    /// Random initialization from the subsidy set, one draw per (client, state).
    pub fn random_init<R: rand::Rng + ?Sized>(
        n_clients: usize,
        subsidies: &SubsidySet,
        rng: &mut R,
    ) -> Self {
        let values = (0..n_clients)
            .map(|_| {
                let mut row = [0.0; 3];
                for slot in row.iter_mut() {
                    *slot = subsidies.get(rng.random_range(0..subsidies.len()));
                }
                row
            })
            .collect();
        IndexTable { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, client: u32, state: ClientState) -> f64 {
        self.values[client as usize][state.index()]
    }

    pub fn set(&mut self, client: u32, state: ClientState, value: f64) {
        self.values[client as usize][state.index()] = value;
    }
}

/// Tabular Q-values over (state, action, subsidy), per sharing scope.
///
/// A scope is a class id under class-level sharing or a client id under
/// per-client tables. Visit counts are tracked per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsidizedQTable {
    n_subsidies: usize,
    scopes: BTreeMap<u32, ScopeTable>,
}

#[derive(Debug, Clone, PartialEq)]
struct ScopeTable {
    q: Vec<f64>,
    visits: Vec<u64>,
}

impl SubsidizedQTable {
    pub fn new(scope_ids: impl IntoIterator<Item = u32>, n_subsidies: usize) -> Self {
        assert!(n_subsidies > 0, "need at least one subsidy slot");
        let cells = 3 * 2 * n_subsidies;
        let scopes = scope_ids
            .into_iter()
            .map(|id| {
                (
                    id,
                    ScopeTable {
                        q: vec![0.0; cells],
                        visits: vec![0; cells],
                    },
                )
            })
            .collect();
        SubsidizedQTable {
            n_subsidies,
            scopes,
        }
    }

    pub fn n_subsidies(&self) -> usize {
        self.n_subsidies
    }

    pub fn scope_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.scopes.keys().copied()
    }

    fn cell(&self, state: ClientState, action: Action, subsidy_index: usize) -> usize {
        assert!(
            subsidy_index < self.n_subsidies,
            "subsidy index out of range"
        );
        (state.index() * 2 + action.index()) * self.n_subsidies + subsidy_index
    }

    pub fn q(&self, scope: u32, state: ClientState, action: Action, subsidy_index: usize) -> f64 {
        let cell = self.cell(state, action, subsidy_index);
        self.scopes
            .get(&scope)
            .map(|t| t.q[cell])
            .unwrap_or_else(|| panic!("unknown scope {scope}"))
    }

    pub fn visits(
        &self,
        scope: u32,
        state: ClientState,
        action: Action,
        subsidy_index: usize,
    ) -> u64 {
        let cell = self.cell(state, action, subsidy_index);
        self.scopes
            .get(&scope)
            .map(|t| t.visits[cell])
            .unwrap_or_else(|| panic!("unknown scope {scope}"))
    }

    /// One subsidized Q-learning step:
    /// `Q <- (1-eta) Q + eta [reward + m 1{a=passive} + discount max_a' Q(s',a')]`
    /// where the bootstrap stays on the same subsidy slot.
    #[allow(clippy::too_many_arguments)]
    pub fn q_update(
        &mut self,
        scope: u32,
        state: ClientState,
        action: Action,
        subsidy_index: usize,
        subsidy_value: f64,
        reward: f64,
        next_state: ClientState,
        eta: f64,
        discount: f64,
    ) {
        debug_assert!((0.0..=1.0).contains(&eta), "eta out of [0,1]: {eta}");
        let cell = self.cell(state, action, subsidy_index);
        let next_p = self.cell(next_state, Action::Passive, subsidy_index);
        let next_a = self.cell(next_state, Action::Active, subsidy_index);
        let table = self
            .scopes
            .get_mut(&scope)
            .unwrap_or_else(|| panic!("unknown scope {scope}"));
        let bonus = if action == Action::Passive {
            subsidy_value
        } else {
            0.0
        };
        let bootstrap = table.q[next_p].max(table.q[next_a]);
        let target = reward + bonus + discount * bootstrap;
        table.q[cell] = (1.0 - eta) * table.q[cell] + eta * target;
        table.visits[cell] += 1;
        debug_assert!(table.q[cell].is_finite(), "non-finite Q value");
    }

    /// Index estimate: the subsidy whose two actions look most alike. Ties
    /// resolve toward the larger subsidy, so states whose cells are still at
    /// their optimistic initial values rank high and attract visits.
    pub fn estimate_whittle(&self, scope: u32, state: ClientState, subsidies: &SubsidySet) -> f64 {
        assert_eq!(
            subsidies.len(),
            self.n_subsidies,
            "subsidy set size mismatch"
        );
        let mut best_idx = 0;
        let mut best_gap = f64::INFINITY;
        for i in 0..self.n_subsidies {
            let gap = (self.q(scope, state, Action::Active, i)
                - self.q(scope, state, Action::Passive, i))
            .abs();
            if gap <= best_gap {
                best_gap = gap;
                best_idx = i;
            }
        }
        subsidies.get(best_idx)
    }

    /// Flat CSV dump: `scope,state,action,subsidy,value`.
    pub fn write_csv<W: Write>(&self, subsidies: &SubsidySet, mut w: W) -> io::Result<()> {
        assert_eq!(
            subsidies.len(),
            self.n_subsidies,
            "subsidy set size mismatch"
        );
        writeln!(w, "scope,state,action,subsidy,value")?;
        for (scope, table) in &self.scopes {
            for state in ClientState::ALL {
                for action in [Action::Passive, Action::Active] {
                    for i in 0..self.n_subsidies {
                        let cell = (state.index() * 2 + action.index()) * self.n_subsidies + i;
                        writeln!(
                            w,
                            "{scope},{},{},{},{}",
                            state.label(),
                            action.index(),
                            subsidies.get(i),
                            table.q[cell]
                        )?;
                    }
                }
            }
        }
        Ok(())
    }
}
