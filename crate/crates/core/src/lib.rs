//! Discrete-round simulator for Whittle-index client selection in wireless
//! federated learning.
//!
//! A server picks a budget-limited subset of clients each round. Every client
//! sits in a hidden three-state Markov chain (normal / limited / busy) whose
//! kernel depends on whether the client was selected, and its round latency is
//! a state-dependent shifted exponential plus a Shannon-rate uplink time. The
//! selection problem is a restless bandit; the library provides an exact
//! full-information Whittle solver, a subsidized Q-learning estimator of the
//! indices, four baselines, and a small FedAvg task (multinomial logistic
//! regression on synthetic clusters) so policies can be compared end to end on
//! accuracy-versus-delay curves.

// Validation deliberately writes `!(x > 0.0)` instead of `x <= 0.0`: the
// negated form also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod env;
pub mod policy;
pub mod report;
pub mod sim;
pub mod task;
pub mod whittle;

/// Deterministic RNG used everywhere; seeded streams keep runs replayable.
pub type SimRng = rand_chacha::ChaCha12Rng;
