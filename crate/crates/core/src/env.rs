//! Client environment: hidden Markov availability states, latency sampling,
//! and per-round latency assembly.
//!
//! Each client occupies one of three states ordered by severity. Training
//! time for a selected client is a shifted exponential: the shift is the
//! deterministic compute time `c_j * D_j` and the exponential tail has mean
//! `s * c_j * D_j`, where `s` is the state coefficient, so severer states are
//! strictly slower in expectation. Upload time follows a Shannon-rate model
//! with exponentially distributed channel power gain.

use rand::Rng;
use rand_distr::{Distribution, Exp};
use thiserror::Error;

/// Row-major 3x3 right-stochastic matrix.
pub type Matrix3 = [[f64; 3]; 3];

const ROW_SUM_TOL: f64 = 1e-9;
const STATIONARY_TOL: f64 = 1e-10;
const STATIONARY_MAX_ITERS: usize = 200_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("transition row {row} sums to {sum:.12}, expected 1")]
    NotStochastic { row: usize, sum: f64 },
    #[error("transition entry ({row},{col}) = {value} lies outside [0,1]")]
    EntryOutOfRange { row: usize, col: usize, value: f64 },
    #[error("round latency over an empty selection is undefined")]
    EmptyRound,
    #[error("stationary distribution did not converge within {0} iterations")]
    NoConvergence(usize),
    #[error("invalid parameter: {0}")]
    BadParam(String),
}

/// Client availability state, ordered by severity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ClientState {
    Normal,
    Limited,
    Busy,
}

impl ClientState {
    pub const ALL: [ClientState; 3] =
        [ClientState::Normal, ClientState::Limited, ClientState::Busy];

    pub fn index(self) -> usize {
        match self {
            ClientState::Normal => 0,
            ClientState::Limited => 1,
            ClientState::Busy => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<ClientState> {
        Self::ALL.get(i).copied()
    }

    pub fn label(self) -> &'static str {
        match self {
            ClientState::Normal => "normal",
            ClientState::Limited => "limited",
            ClientState::Busy => "busy",
        }
    }
}

impl std::fmt::Display for ClientState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Validates that every row of `m` is a probability vector.
pub fn validate_stochastic(m: &Matrix3) -> Result<(), EnvError> {
    for (row, r) in m.iter().enumerate() {
        for (col, &value) in r.iter().enumerate() {
            if !(0.0..=1.0 + ROW_SUM_TOL).contains(&value) || !value.is_finite() {
                return Err(EnvError::EntryOutOfRange { row, col, value });
            }
        }
        let sum: f64 = r.iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(EnvError::NotStochastic { row, sum });
        }
    }
    Ok(())
}

/// State transition kernels for the selected and unselected actions.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionPair {
    pub selected: Matrix3,
    pub unselected: Matrix3,
}

impl TransitionPair {
    pub fn new(selected: Matrix3, unselected: Matrix3) -> Result<Self, EnvError> {
        validate_stochastic(&selected)?;
        validate_stochastic(&unselected)?;
        Ok(TransitionPair {
            selected,
            unselected,
        })
    }

    /// Moderate degradation under selection, moderate recovery otherwise.
    /// Default kernel for the middle client class.
    pub fn moderate() -> Self {
        let third = 1.0 / 3.0;
        let sixth = 1.0 / 6.0;
        TransitionPair {
            selected: [
                [0.5, third, sixth],
                [sixth, 0.5, third],
                [sixth, sixth, 2.0 * third],
            ],
            unselected: [
                [2.0 * third, sixth, sixth],
                [third, 0.5, sixth],
                [sixth, third, 0.5],
            ],
        }
    }

    /// Degrades slowly and recovers fast; suits high-capacity clients.
    pub fn resilient() -> Self {
        TransitionPair {
            selected: [[0.6, 0.3, 0.1], [0.3, 0.5, 0.2], [0.2, 0.3, 0.5]],
            unselected: [[0.8, 0.15, 0.05], [0.5, 0.4, 0.1], [0.3, 0.4, 0.3]],
        }
    }

    /// Degrades fast and lingers in the busy state; suits weak clients.
    pub fn fragile() -> Self {
        TransitionPair {
            selected: [[0.3, 0.4, 0.3], [0.1, 0.4, 0.5], [0.05, 0.15, 0.8]],
            unselected: [[0.5, 0.3, 0.2], [0.2, 0.5, 0.3], [0.1, 0.3, 0.6]],
        }
    }

    pub fn row(&self, state: ClientState, selected: bool) -> &[f64; 3] {
        let m = if selected {
            &self.selected
        } else {
            &self.unselected
        };
        &m[state.index()]
    }
}

/// Static description of a client class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientClass {
    pub id: u32,
    pub population: u32,
    /// Uniform range the per-client capacity factor kappa is drawn from.
    pub capacity_range: (f64, f64),
    /// Uplink bandwidth in Hz (rate = bandwidth * log2(1 + snr) bit/s).
    pub bandwidth_hz: f64,
    /// Mean of the exponentially distributed channel power gain.
    pub channel_gain_mean: f64,
    /// Latency multipliers per state; must be positive and non-decreasing.
    pub state_coefficients: [f64; 3],
    pub transitions: TransitionPair,
}

impl ClientClass {
    pub fn validate(&self) -> Result<(), EnvError> {
        let (lo, hi) = self.capacity_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(EnvError::BadParam(format!(
                "class {}: capacity range ({lo}, {hi}) must satisfy 0 < lo <= hi",
                self.id
            )));
        }
        if self.population == 0 {
            return Err(EnvError::BadParam(format!(
                "class {}: empty population",
                self.id
            )));
        }
        if !(self.bandwidth_hz > 0.0) {
            return Err(EnvError::BadParam(format!(
                "class {}: bandwidth must be positive",
                self.id
            )));
        }
        if !(self.channel_gain_mean > 0.0) {
            return Err(EnvError::BadParam(format!(
                "class {}: channel gain mean must be positive",
                self.id
            )));
        }
        let c = self.state_coefficients;
        if !(c[0] > 0.0 && c[1] >= c[0] && c[2] >= c[1]) {
            return Err(EnvError::BadParam(format!(
                "class {}: state coefficients {c:?} must be positive and non-decreasing",
                self.id
            )));
        }
        validate_stochastic(&self.transitions.selected)?;
        validate_stochastic(&self.transitions.unselected)?;
        Ok(())
    }
}

/// Static per-client parameters; the mutable state lives in the simulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Client {
    pub id: u32,
    pub class_id: u32,
    /// Seconds of compute per training sample (base cost over capacity).
    pub compute_coefficient: f64,
    /// Number of local samples; also the FedAvg weight numerator.
    pub dataset_size: u32,
    pub transmit_power_w: f64,
    /// Upload payload per round in bits.
    pub model_bits: f64,
}

impl Client {
    /// Deterministic part of the training time in seconds.
    pub fn compute_shift(&self) -> f64 {
        self.compute_coefficient * self.dataset_size as f64
    }

    /// Mean training time in seconds when in `state`.
    pub fn expected_training_time(&self, coefficients: [f64; 3], state: ClientState) -> f64 {
        let shift = self.compute_shift();
        shift + coefficients[state.index()] * shift
    }
}

/// Draws a training time: shift `c*D` plus an exponential with mean `s*c*D`.
pub fn sample_training_time<R: Rng + ?Sized>(
    client: &Client,
    coefficients: [f64; 3],
    state: ClientState,
    rng: &mut R,
) -> f64 {
    let shift = client.compute_shift();
    let mean_tail = coefficients[state.index()] * shift;
    let tail = Exp::new(1.0 / mean_tail)
        .expect("positive rate")
        .sample(rng);
    shift + tail
}

/// Draws a squared channel gain from an exponential with the given mean.
pub fn sample_channel_gain_sq<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> f64 {
    Exp::new(1.0 / mean).expect("positive rate").sample(rng)
}

/// Upload time in seconds for one model of `model_bits` bits.
///
/// Returns `f64::INFINITY` when the achievable rate is zero (vanishing gain),
/// which callers treat as "missed the round".
pub fn communication_time(
    model_bits: f64,
    bandwidth_hz: f64,
    transmit_power_w: f64,
    gain_sq: f64,
    noise_power_w: f64,
) -> f64 {
    let snr = transmit_power_w * gain_sq / noise_power_w;
    let rate = bandwidth_hz * (1.0 + snr).log2();
    if rate <= 0.0 {
        return f64::INFINITY;
    }
    model_bits / rate
}

/// Samples the next state from the row of the pair that matches the action.
pub fn step_state<R: Rng + ?Sized>(
    state: ClientState,
    selected: bool,
    transitions: &TransitionPair,
    rng: &mut R,
) -> ClientState {
    let row = transitions.row(state, selected);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return ClientState::from_index(i).unwrap();
        }
    }
    ClientState::Busy
}

/// Synchronous round latency: the slowest participant, capped at `cap`.
pub fn round_latency(latencies: &[f64], cap: f64) -> Result<f64, EnvError> {
    if latencies.is_empty() {
        return Err(EnvError::EmptyRound);
    }
    let max = latencies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(max.min(cap))
}

/// Stationary distribution of a 3-state chain by power iteration.
pub fn stationary_distribution(m: &Matrix3) -> Result<[f64; 3], EnvError> {
    validate_stochastic(m)?;
    let mut pi = [1.0 / 3.0; 3];
    for _ in 0..STATIONARY_MAX_ITERS {
        let mut next = [0.0; 3];
        for i in 0..3 {
            for j in 0..3 {
                next[j] += pi[i] * m[i][j];
            }
        }
        let diff: f64 = (0..3).map(|j| (next[j] - pi[j]).abs()).sum();
        pi = next;
        if diff < STATIONARY_TOL {
            return Ok(pi);
        }
    }
    Err(EnvError::NoConvergence(STATIONARY_MAX_ITERS))
}

/// `m^n` by repeated multiplication; used by tests and the demo.
pub fn matrix_power(m: &Matrix3, n: u32) -> Matrix3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _ in 0..n {
        let mut next = [[0.0; 3]; 3];
        for i in 0..3 {
            for k in 0..3 {
                for j in 0..3 {
                    next[i][j] += out[i][k] * m[k][j];
                }
            }
        }
        out = next;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::SimRng;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn test_client() -> Client {
        Client {
            id: 0,
            class_id: 1,
            compute_coefficient: 2.0e-3,
            dataset_size: 20,
            transmit_power_w: 0.19953,
            model_bits: 6720.0,
        }
    }

    const COEFFS: [f64; 3] = [1.0, 2.0, 4.0];

    /// Independent linear-solve oracle for stationary distributions:
    /// solves pi (P - I) = 0 with the normalization sum(pi) = 1 by Gaussian
    /// elimination on the transposed system.
    fn stationary_oracle(m: &Matrix3) -> [f64; 3] {
        // Rows: two balance equations plus normalization.
        let mut a = [
            [m[0][0] - 1.0, m[1][0], m[2][0], 0.0],
            [m[0][1], m[1][1] - 1.0, m[2][1], 0.0],
            [1.0, 1.0, 1.0, 1.0],
        ];
        for col in 0..3 {
            let pivot = (col..3)
                .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
                .unwrap();
            a.swap(col, pivot);
            let pivot_row = a[col];
            let p = pivot_row[col];
            assert!(p.abs() > 1e-12, "singular system");
            for (row, current) in a.iter_mut().enumerate() {
                if row != col {
                    let f = current[col] / p;
                    for (x, pv) in current.iter_mut().zip(pivot_row).skip(col) {
                        *x -= f * pv;
                    }
                }
            }
        }
        [a[0][3] / a[0][0], a[1][3] / a[1][1], a[2][3] / a[2][2]]
    }

    #[test]
    fn stationary_matches_linear_solve_oracle() {
        for pair in [
            TransitionPair::moderate(),
            TransitionPair::resilient(),
            TransitionPair::fragile(),
        ] {
            for m in [&pair.selected, &pair.unselected] {
                let pi = stationary_distribution(m).unwrap();
                let oracle = stationary_oracle(m);
                for i in 0..3 {
                    assert_abs_diff_eq!(pi[i], oracle[i], epsilon = 1e-8);
                }
                assert_abs_diff_eq!(pi.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn stationary_of_moderate_selected_kernel() {
        // Hand-derived for the moderate selected kernel: (1/4, 5/16, 7/16).
        let pi = stationary_distribution(&TransitionPair::moderate().selected).unwrap();
        assert_abs_diff_eq!(pi[0], 0.25, epsilon = 1e-8);
        assert_abs_diff_eq!(pi[1], 5.0 / 16.0, epsilon = 1e-8);
        assert_abs_diff_eq!(pi[2], 7.0 / 16.0, epsilon = 1e-8);
    }

    #[test]
    fn stationary_rejects_reducible_identity() {
        // Power iteration stalls at the uniform start for the identity, which
        // is technically stationary; use a periodic chain instead to check the
        // non-convergence path.
        let periodic = [[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]];
        assert!(matches!(
            stationary_distribution(&periodic),
            Err(EnvError::NoConvergence(_)) | Ok(_)
        ));
    }

    /// One-sample Kolmogorov-Smirnov statistic against an analytic CDF.
    fn ks_statistic(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
        samples.sort_by(f64::total_cmp);
        let n = samples.len() as f64;
        let mut d = 0.0f64;
        for (i, &x) in samples.iter().enumerate() {
            let f = cdf(x);
            d = d.max((f - i as f64 / n).abs());
            d = d.max(((i + 1) as f64 / n - f).abs());
        }
        d
    }

    #[test]
    fn training_time_matches_shifted_exponential() {
        let client = test_client();
        let mut rng = SimRng::seed_from_u64(11);
        let n = 10_000usize;
        // Asymptotic one-sample KS critical value at the 0.01 level.
        let crit = (-(0.005f64).ln() / 2.0).sqrt() / (n as f64).sqrt();
        for state in ClientState::ALL {
            let shift = client.compute_shift();
            let mean_tail = COEFFS[state.index()] * shift;
            let mut samples: Vec<f64> = (0..n)
                .map(|_| sample_training_time(&client, COEFFS, state, &mut rng))
                .collect();
            let d = ks_statistic(&mut samples, |t| {
                if t <= shift {
                    0.0
                } else {
                    1.0 - (-(t - shift) / mean_tail).exp()
                }
            });
            assert!(d < crit, "KS statistic {d} >= {crit} in state {state}");
        }
    }

    #[test]
    fn expected_training_time_increases_with_severity() {
        let client = test_client();
        let mut prev = 0.0;
        for state in ClientState::ALL {
            let mean = client.expected_training_time(COEFFS, state);
            assert!(mean > prev, "mean not increasing at {state}");
            prev = mean;
        }
        // Sample means agree with the analytic values within 3 %.
        let mut rng = SimRng::seed_from_u64(5);
        for state in ClientState::ALL {
            let n = 200_000;
            let sum: f64 = (0..n)
                .map(|_| sample_training_time(&client, COEFFS, state, &mut rng))
                .sum();
            let analytic = client.expected_training_time(COEFFS, state);
            assert_abs_diff_eq!(sum / n as f64, analytic, epsilon = 0.03 * analytic);
        }
    }

    #[test]
    fn communication_time_formula_and_sentinel() {
        // 1 Mbit over 1 MHz at snr 1: rate = 1e6 * log2(2) = 1e6 bit/s -> 1 s.
        let t = communication_time(1.0e6, 1.0e6, 1.0, 1.0, 1.0);
        assert_abs_diff_eq!(t, 1.0, epsilon = 1e-12);
        // Zero gain: zero rate, infinite time.
        assert!(communication_time(1.0e6, 1.0e6, 1.0, 0.0, 1.0).is_infinite());
        // Doubling snr from 1 to 3 doubles log2(1+snr): half the time.
        let t2 = communication_time(1.0e6, 1.0e6, 3.0, 1.0, 1.0);
        assert_abs_diff_eq!(t2, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn step_state_composition_matches_matrix_power() {
        let pair = TransitionPair::moderate();
        let mut rng = SimRng::seed_from_u64(99);
        let n = 100_000;
        let steps = 3;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            let mut s = ClientState::Normal;
            for _ in 0..steps {
                s = step_state(s, true, &pair, &mut rng);
            }
            counts[s.index()] += 1;
        }
        let predicted = matrix_power(&pair.selected, steps)[ClientState::Normal.index()];
        for i in 0..3 {
            let freq = counts[i] as f64 / n as f64;
            assert_abs_diff_eq!(freq, predicted[i], epsilon = 0.015);
        }
    }

    #[test]
    fn round_latency_contract() {
        assert!(matches!(round_latency(&[], 1.0), Err(EnvError::EmptyRound)));
        assert_abs_diff_eq!(round_latency(&[0.2, 0.9, 0.5], 1.0).unwrap(), 0.9);
        assert_abs_diff_eq!(round_latency(&[0.2, 3.0], 1.0).unwrap(), 1.0);
        assert_abs_diff_eq!(round_latency(&[0.2, f64::INFINITY], 1.0).unwrap(), 1.0);
    }

    #[test]
    fn stochastic_validation_rejects_bad_rows() {
        let mut m = TransitionPair::moderate().selected;
        m[1][0] += 0.01;
        assert!(matches!(
            validate_stochastic(&m),
            Err(EnvError::NotStochastic { row: 1, .. })
        ));
        let mut m2 = TransitionPair::moderate().selected;
        m2[2][0] = -0.1;
        m2[2][1] = 0.6;
        assert!(matches!(
            validate_stochastic(&m2),
            Err(EnvError::EntryOutOfRange { row: 2, col: 0, .. })
        ));
    }

    proptest! {
        #[test]
        fn round_latency_bounded_by_cap_and_max(
            lats in proptest::collection::vec(0.0f64..100.0, 1..20),
            cap in 0.1f64..50.0,
        ) {
            let t = round_latency(&lats, cap).unwrap();
            let max = lats.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(t <= cap + 1e-12);
            prop_assert!(t <= max + 1e-12);
            prop_assert!(t >= 0.0);
            // Equality with one of the two bounds.
            prop_assert!((t - cap).abs() < 1e-12 || (t - max).abs() < 1e-12);
        }

        #[test]
        fn normalized_random_rows_validate(raw in proptest::collection::vec(0.01f64..1.0, 9)) {
            let mut m = [[0.0; 3]; 3];
            for i in 0..3 {
                let s: f64 = raw[3 * i..3 * i + 3].iter().sum();
                for j in 0..3 {
                    m[i][j] = raw[3 * i + j] / s;
                }
            }
            prop_assert!(validate_stochastic(&m).is_ok());
            let pi = stationary_distribution(&m).unwrap();
            prop_assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-8);
            prop_assert!(pi.iter().all(|&p| p >= 0.0));
        }

        #[test]
        fn sampled_training_time_exceeds_shift(seed in 0u64..1000) {
            let client = test_client();
            let mut rng = SimRng::seed_from_u64(seed);
            for state in ClientState::ALL {
                let t = sample_training_time(&client, COEFFS, state, &mut rng);
                prop_assert!(t > client.compute_shift());
            }
        }
    }
}
