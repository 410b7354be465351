//! CSV emission and experiment-matrix execution.
//!
//! Every file is built as a deterministic string first, so identical runs
//! produce byte-identical output. Floats are printed with 9 significant
//! digits.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::config::ExperimentSpec;
use crate::policy::PolicyKind;
use crate::sim::{
    build_world, run_policy, run_simulation, summarize_runs, MetricStats, ReplicationStats,
    RunResult, SimError, SimWorld,
};
use crate::whittle::SubsidySet;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("cannot write `{path}`: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Sim(#[from] SimError),
}

fn write_file(path: &Path, content: &str) -> Result<(), ReportError> {
    std::fs::write(path, content).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Formats with 9 significant digits, plain notation where readable and
/// scientific for extreme magnitudes.
pub fn fmt_g(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let exp = x.abs().log10().floor() as i32;
    if !(-5..=8).contains(&exp) {
        return format!("{x:.8e}");
    }
    let decimals = (8 - exp).max(0) as usize;
    let s = format!("{x:.decimals$}");
    trim_trailing_zeros(s)
}

fn trim_trailing_zeros(s: String) -> String {
    if !s.contains('.') {
        return s;
    }
    let t = s.trim_end_matches('0').trim_end_matches('.');
    t.to_string()
}

pub const ROUND_CSV_HEADER: &str = "round,cum_delay_s,round_latency_s,loss_gap,full_loss,test_acc,n_selected,n_included,frac_normal,frac_limited,frac_busy,explored";

pub fn round_csv_string(result: &RunResult) -> String {
    let mut out = String::with_capacity(64 * (result.records.len() + 1));
    out.push_str(ROUND_CSV_HEADER);
    out.push('\n');
    for rec in &result.records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            rec.round,
            fmt_g(rec.cum_delay),
            fmt_g(rec.round_latency),
            fmt_g(rec.loss_gap),
            fmt_g(rec.full_loss),
            fmt_g(rec.test_accuracy),
            rec.selected.len(),
            rec.included.len(),
            fmt_g(rec.state_fractions[0]),
            fmt_g(rec.state_fractions[1]),
            fmt_g(rec.state_fractions[2]),
            u8::from(rec.explored),
        ));
    }
    out
}

pub fn write_round_csv(result: &RunResult, path: &Path) -> Result<(), ReportError> {
    write_file(path, &round_csv_string(result))
}

pub fn curve_csv_string(stats: &ReplicationStats) -> String {
    let mut out = String::from("delay_s,mean_test_acc\n");
    for &(t, acc) in &stats.curve {
        out.push_str(&format!("{},{}\n", fmt_g(t), fmt_g(acc)));
    }
    out
}

/// One experiment cell: a policy at one Dirichlet concentration, aggregated
/// over seeds.
#[derive(Debug)]
pub struct CellResult {
    pub policy: PolicyKind,
    pub tau: f64,
    pub stats: ReplicationStats,
}

#[derive(Debug, Clone)]
pub struct SummaryRow {
    pub policy: PolicyKind,
    pub tau: f64,
    pub n_runs: usize,
    pub n_converged: usize,
    pub delay: Option<MetricStats>,
    pub rounds: Option<MetricStats>,
    pub final_acc: Option<MetricStats>,
    /// Percent mean-delay reduction against the random policy at the same
    /// tau; None when that reference cell is absent or non-convergent.
    pub reduction_vs_ran_pct: Option<f64>,
}

pub fn summary_rows(cells: &[CellResult]) -> Vec<SummaryRow> {
    cells
        .iter()
        .map(|cell| {
            let ran_mean = cells
                .iter()
                .find(|c| c.policy == PolicyKind::Random && c.tau == cell.tau)
                .and_then(|c| c.stats.total_delay.as_ref())
                .map(|m| m.mean);
            let reduction = match (ran_mean, cell.stats.total_delay.as_ref()) {
                (Some(ran), Some(own)) if ran > 0.0 => Some(100.0 * (ran - own.mean) / ran),
                _ => {
                    if ran_mean.is_none() {
                        log::warn!(
                            "no converged ran cell at tau={}; delay reduction left empty",
                            cell.tau
                        );
                    }
                    None
                }
            };
            SummaryRow {
                policy: cell.policy,
                tau: cell.tau,
                n_runs: cell.stats.n_runs,
                n_converged: cell.stats.n_converged,
                delay: cell.stats.total_delay,
                rounds: cell.stats.rounds,
                final_acc: cell.stats.final_accuracy,
                reduction_vs_ran_pct: reduction,
            }
        })
        .collect()
}

pub const SUMMARY_CSV_HEADER: &str = "policy,tau,n_runs,n_converged,mean_delay_s,delay_ci_half_s,mean_rounds,rounds_ci_half,mean_final_acc,final_acc_ci_half,delay_reduction_vs_ran_pct";

pub fn summary_csv_string(rows: &[SummaryRow]) -> String {
    let opt_mean = |m: &Option<MetricStats>| m.map(|s| fmt_g(s.mean)).unwrap_or_default();
    let opt_hw = |m: &Option<MetricStats>| {
        m.and_then(|s| s.ci_half_width)
            .map(fmt_g)
            .unwrap_or_default()
    };
    let mut out = String::from(SUMMARY_CSV_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            row.policy.name(),
            fmt_g(row.tau),
            row.n_runs,
            row.n_converged,
            opt_mean(&row.delay),
            opt_hw(&row.delay),
            opt_mean(&row.rounds),
            opt_hw(&row.rounds),
            opt_mean(&row.final_acc),
            opt_hw(&row.final_acc),
            row.reduction_vs_ran_pct.map(fmt_g).unwrap_or_default(),
        ));
    }
    out
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Also dump the learned Q-table of the first seed for wilfq and cql
    /// cells.
    pub dump_qtables: bool,
}

/// Runs seeds for one cell, fanning out across `workers` threads. Results
/// are reassembled in seed order, so the output is schedule-independent.
fn run_seeds(
    world: &SimWorld,
    policy: PolicyKind,
    seeds: &[u64],
    workers: usize,
) -> Vec<RunResult> {
    if workers <= 1 || seeds.len() <= 1 {
        return seeds
            .iter()
            .map(|&s| run_simulation(world, policy, s))
            .collect();
    }
    let chunk = seeds.len().div_ceil(workers);
    let mut out: Vec<Option<RunResult>> = seeds.iter().map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .chunks(chunk)
            .enumerate()
            .map(|(ci, chunk_seeds)| {
                (
                    ci,
                    scope.spawn(move || {
                        chunk_seeds
                            .iter()
                            .map(|&s| run_simulation(world, policy, s))
                            .collect::<Vec<_>>()
                    }),
                )
            })
            .collect();
        for (ci, handle) in handles {
            for (i, r) in handle
                .join()
                .expect("seed worker panicked")
                .into_iter()
                .enumerate()
            {
                out[ci * chunk + i] = Some(r);
            }
        }
    });
    out.into_iter()
        .map(|o| o.expect("every seed ran"))
        .collect()
}

/// Executes the full policy x tau x seed matrix, writing one round CSV per
/// run, one accuracy-vs-delay curve per cell, and a single summary CSV.
pub fn run_experiment(
    spec: &ExperimentSpec,
    options: RunOptions,
) -> Result<Vec<CellResult>, ReportError> {
    std::fs::create_dir_all(&spec.out_dir).map_err(|source| ReportError::Io {
        path: spec.out_dir.clone(),
        source,
    })?;

    let mut cells = Vec::new();
    for &tau in &spec.taus {
        let mut sim = spec.sim.clone();
        sim.task.tau = tau;
        let world = build_world(sim)?;
        for &policy in &spec.policies {
            log::info!(
                "cell policy={} tau={}: {} seeds",
                policy.name(),
                tau,
                spec.seeds.len()
            );
            let results = run_seeds(&world, policy, &spec.seeds, spec.workers);
            for (&seed, result) in spec.seeds.iter().zip(&results) {
                let name = format!(
                    "rounds_{}_tau{}_seed{}.csv",
                    policy.name(),
                    fmt_g(tau),
                    seed
                );
                write_round_csv(result, &spec.out_dir.join(name))?;
            }
            let stats = summarize_runs(&results);
            let curve_name = format!("curve_{}_tau{}.csv", policy.name(), fmt_g(tau));
            write_file(&spec.out_dir.join(curve_name), &curve_csv_string(&stats))?;
            if options.dump_qtables && matches!(policy, PolicyKind::WilfQ | PolicyKind::Cql) {
                if let Some(&seed) = spec.seeds.first() {
                    let run = run_policy(&world, policy, seed);
                    if let Some(table) = run.qtable {
                        // The classical learner keeps a single unsubsidized
                        // column, not the configured grid.
                        let subsidies = match policy {
                            PolicyKind::Cql => SubsidySet::new(vec![0.0]).expect("static set"),
                            _ => world.config.subsidies.clone(),
                        };
                        let name = format!(
                            "qtable_{}_tau{}_seed{}.csv",
                            policy.name(),
                            fmt_g(tau),
                            seed
                        );
                        let mut buf = Vec::new();
                        table.write_csv(&subsidies, &mut buf).map_err(|source| {
                            ReportError::Io {
                                path: spec.out_dir.join(&name),
                                source,
                            }
                        })?;
                        let text = String::from_utf8(buf).expect("csv is utf-8");
                        write_file(&spec.out_dir.join(name), &text)?;
                    }
                }
            }
            log::info!(
                "cell policy={} tau={}: {}/{} converged",
                policy.name(),
                tau,
                stats.n_converged,
                stats.n_runs
            );
            cells.push(CellResult { policy, tau, stats });
        }
    }

    let rows = summary_rows(&cells);
    write_file(
        &spec.out_dir.join("summary.csv"),
        &summary_csv_string(&rows),
    )?;
    Ok(cells)
}

/// Exact Whittle index table of a built world, one line per (class, state).
pub fn exact_index_table(world: &SimWorld) -> String {
    let mut out = String::from("class,state,whittle_index\n");
    for (&(class, state), &w) in &world.exact_indices {
        out.push_str(&format!("{},{},{}\n", class, state.label(), fmt_g(w)));
    }
    out
}
