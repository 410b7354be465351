//! Browser bindings for a desk-scale demo world: 30 clients in the three
//! default classes, budget 3, a small synthetic softmax-regression task.
//! Everything is seeded, so the page reproduces runs exactly.
//!
//! The exported functions are thin wrappers over `Result<String, String>`
//! internals; the internals stay testable on the host, where `JsError`
//! cannot be constructed.

use std::sync::OnceLock;

use fedwhittle::config::default_classes;
use fedwhittle::env::{ClientState, TransitionPair};
use fedwhittle::policy::PolicyKind;
use fedwhittle::sim::{build_world, run_simulation, Budget, Schedule, SimConfig, SimWorld};
use fedwhittle::whittle::{exact_whittle, ArmMdp, SubsidySet};
use serde_json::json;
use wasm_bindgen::prelude::*;

fn demo_config() -> SimConfig {
    let mut sim = fedwhittle::config::ExperimentSpec::default().sim;
    for class in &mut sim.classes {
        class.population = 10;
    }
    sim.budget = Budget::Count(3);
    sim.subsidies = SubsidySet::new((1..=20).map(|k| -0.025 * k as f64).rev().collect()).unwrap();
    sim.lambda = 0.01;
    sim.gamma = Schedule {
        scale: 1.0,
        exponent: 0.5,
    };
    sim.max_rounds = 250;
    sim.alpha = 0.05;
    sim.task.n_train = 600;
    sim.task.n_test = 200;
    sim.task.dim = 10;
    sim.task.n_classes = 4;
    sim.task.learning_rate = 0.02;
    sim
}

fn world() -> &'static SimWorld {
    static WORLD: OnceLock<SimWorld> = OnceLock::new();
    WORLD.get_or_init(|| build_world(demo_config()).expect("demo config is valid"))
}

fn index_table_json(discount: f64) -> Result<String, String> {
    if !(0.0..1.0).contains(&discount) {
        return Err("discount must lie in [0, 1)".into());
    }
    let w = world();
    let presets: [(&str, TransitionPair); 3] = [
        ("resilient", TransitionPair::resilient()),
        ("moderate", TransitionPair::moderate()),
        ("fragile", TransitionPair::fragile()),
    ];
    let mut classes = Vec::new();
    for (pos, (name, transitions)) in presets.into_iter().enumerate() {
        let latencies = w.class_latencies[pos];
        let arm =
            ArmMdp::from_latencies(latencies, transitions, discount).map_err(|e| e.to_string())?;
        // Subsidizing passivity by more than the worst state's total
        // discounted latency always wins, so the bracket below is safe.
        let lo = -(latencies[2] / (1.0 - discount)) - 1.0;
        let mut indices = Vec::new();
        for state in ClientState::ALL {
            let w = exact_whittle(&arm, state, (lo, 1.0), 1e-9).map_err(|e| e.to_string())?;
            indices.push(w);
        }
        classes.push(json!({ "name": name, "latencies": latencies, "indices": indices }));
    }
    Ok(json!({ "discount": discount, "classes": classes }).to_string())
}

fn run_policy_json(policy: &str, seed: u32) -> Result<String, String> {
    let kind = PolicyKind::from_name(policy).ok_or_else(|| format!("unknown policy {policy}"))?;
    let w = world();
    let run = run_simulation(w, kind, seed as u64);
    let trajectory: Vec<_> = run
        .records
        .iter()
        .map(|r| {
            json!({
                "round": r.round,
                "delay": r.cum_delay,
                "accuracy": r.test_accuracy,
                "busy": r.state_fractions[2],
            })
        })
        .collect();
    Ok(json!({
        "policy": policy,
        "seed": seed,
        "converged": run.converged,
        "rounds": run.rounds,
        "total_delay": run.total_delay,
        "final_accuracy": run.final_accuracy,
        "initial_accuracy": run.initial_accuracy,
        "trajectory": trajectory,
    })
    .to_string())
}

fn compare_policies_json(seed: u32) -> String {
    let w = world();
    let mut results = Vec::new();
    for kind in [
        PolicyKind::FullInformation,
        PolicyKind::WilfQ,
        PolicyKind::Cql,
        PolicyKind::Random,
    ] {
        let run = run_simulation(w, kind, seed as u64);
        results.push(json!({
            "policy": kind.name(),
            "converged": run.converged,
            "rounds": run.rounds,
            "total_delay": run.total_delay,
            "final_accuracy": run.final_accuracy,
        }));
    }
    json!({ "seed": seed, "results": results }).to_string()
}

fn world_summary_json() -> String {
    let w = world();
    let classes: Vec<_> = default_classes()
        .iter()
        .map(|c| json!({ "id": c.id, "population": 10 }))
        .collect();
    json!({
        "n_clients": w.clients.len(),
        "budget": w.budget,
        "latency_cap": w.latency_cap,
        "oracle_loss": w.oracle_loss,
        "classes": classes,
    })
    .to_string()
}

/// Exact Whittle indices of the three class presets at the given discount,
/// using each class's representative per-state latencies from the demo
/// world. Returns JSON: `{ discount, classes: [{ name, latencies, indices }] }`.
#[wasm_bindgen]
pub fn exact_index_table(discount: f64) -> Result<String, JsError> {
    index_table_json(discount).map_err(|e| JsError::new(&e))
}

/// Runs one policy on the demo world and returns the per-round trajectory:
/// `{ policy, seed, converged, rounds, total_delay, final_accuracy,
///    trajectory: [{ round, delay, accuracy, busy }] }`.
#[wasm_bindgen]
pub fn run_policy_demo(policy: &str, seed: u32) -> Result<String, JsError> {
    run_policy_json(policy, seed).map_err(|e| JsError::new(&e))
}

/// Runs the index policy, both Q-learning policies and the random baseline
/// on the same seed and returns their summary rows:
/// `{ seed, results: [{ policy, converged, rounds, total_delay, final_accuracy }] }`.
#[wasm_bindgen]
pub fn compare_policies(seed: u32) -> String {
    compare_policies_json(seed)
}

/// Static facts about the demo world for the page header.
#[wasm_bindgen]
pub fn world_summary() -> String {
    world_summary_json()
}
