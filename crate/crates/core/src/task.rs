//! Desk-scale FedAvg surrogate task: multinomial logistic regression on
//! synthetic Gaussian clusters, Dirichlet non-IID partitioning, local SGD,
//! weighted aggregation, and a centralized full-batch oracle for the optimal
//! loss.

use std::io::BufRead;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("invalid parameter: {0}")]
    BadParam(String),
    #[error("aggregation weights sum to {0}, expected 1")]
    BadWeightSum(f64),
    #[error("model shapes disagree")]
    ShapeMismatch,
    #[error("oracle did not reach gradient tolerance; best loss {best}")]
    OracleNotConverged { best: f64 },
    #[error("dataset file: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Dense classification dataset, row-major features.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<f64>,
    pub labels: Vec<u32>,
    pub n: usize,
    pub dim: usize,
    pub n_classes: usize,
}

impl Dataset {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        if self.features.len() != self.n * self.dim || self.labels.len() != self.n {
            return Err(TaskError::BadParam(
                "feature/label lengths disagree with n, dim".into(),
            ));
        }
        if self.n_classes < 2 {
            return Err(TaskError::BadParam("need at least two classes".into()));
        }
        if self.labels.iter().any(|&y| y as usize >= self.n_classes) {
            return Err(TaskError::BadParam("label outside class range".into()));
        }
        if self.features.iter().any(|x| !x.is_finite()) {
            return Err(TaskError::BadParam("non-finite feature".into()));
        }
        Ok(())
    }

    /// Splits off the last `n_tail` rows (labels stay balanced because the
    /// generator assigns them round-robin).
    pub fn split_tail(mut self, n_tail: usize) -> Result<(Dataset, Dataset), TaskError> {
        if n_tail >= self.n {
            return Err(TaskError::BadParam(format!(
                "cannot split {n_tail} of {} rows",
                self.n
            )));
        }
        let head_n = self.n - n_tail;
        let tail = Dataset {
            features: self.features.split_off(head_n * self.dim),
            labels: self.labels.split_off(head_n),
            n: n_tail,
            dim: self.dim,
            n_classes: self.n_classes,
        };
        self.n = head_n;
        Ok((self, tail))
    }
}

/// Softmax-regression parameters: per class a weight row plus bias,
/// `coef[class * (dim + 1) .. class * (dim + 1) + dim]` and the bias last.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub coef: Vec<f64>,
    pub dim: usize,
    pub n_classes: usize,
}

impl ModelParams {
    pub fn zeros(dim: usize, n_classes: usize) -> Self {
        ModelParams {
            coef: vec![0.0; n_classes * (dim + 1)],
            dim,
            n_classes,
        }
    }

    fn logits(&self, x: &[f64], out: &mut [f64]) {
        let stride = self.dim + 1;
        for (k, o) in out.iter_mut().enumerate() {
            let row = &self.coef[k * stride..k * stride + stride];
            let mut z = row[self.dim];
            for d in 0..self.dim {
                z += row[d] * x[d];
            }
            *o = z;
        }
    }
}

/// One client's slice of the dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    pub owner: u32,
    pub indices: Vec<usize>,
}

/// FedAvg weights aligned with a participant list, normalized to sum 1.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationWeights {
    pairs: Vec<(u32, f64)>,
}

impl AggregationWeights {
    /// Data-proportional weights renormalized over the given participants.
    pub fn from_sizes(sizes: &[(u32, u32)]) -> Result<Self, TaskError> {
        let total: u64 = sizes.iter().map(|&(_, s)| s as u64).sum();
        if total == 0 {
            return Err(TaskError::BadParam("participants hold no data".into()));
        }
        Ok(AggregationWeights {
            pairs: sizes
                .iter()
                .map(|&(id, s)| (id, s as f64 / total as f64))
                .collect(),
        })
    }

    pub fn pairs(&self) -> &[(u32, f64)] {
        &self.pairs
    }

    pub fn weights(&self) -> Vec<f64> {
        self.pairs.iter().map(|&(_, w)| w).collect()
    }
}

/// Synthetic task: one Gaussian cluster per class with distinct means,
/// labels assigned round-robin so any prefix stays balanced.
pub fn generate_synthetic<R: Rng + ?Sized>(
    n: usize,
    n_classes: usize,
    dim: usize,
    cluster_spread: f64,
    rng: &mut R,
) -> Result<Dataset, TaskError> {
    if n == 0 || dim == 0 || n_classes < 2 {
        return Err(TaskError::BadParam(
            "need n > 0, dim > 0, classes >= 2".into(),
        ));
    }
    if cluster_spread < 0.0 {
        return Err(TaskError::BadParam(
            "cluster spread must be non-negative".into(),
        ));
    }
    // Mean scale 2.0 keeps clusters well separated at unit spread for
    // moderate dimensions without making the task trivial at large spread.
    let mean_scale = 2.0;
    let std_normal = Normal::new(0.0, 1.0).expect("valid normal");
    let means: Vec<f64> = (0..n_classes * dim)
        .map(|_| mean_scale * std_normal.sample(rng))
        .collect();
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = (i % n_classes) as u32;
        let mean = &means[y as usize * dim..(y as usize + 1) * dim];
        for &m in mean {
            features.push(m + cluster_spread * std_normal.sample(rng));
        }
        labels.push(y);
    }
    let ds = Dataset {
        features,
        labels,
        n,
        dim,
        n_classes,
    };
    ds.validate()?;
    Ok(ds)
}

/// Loads `n,d,k` header followed by `n` comma-separated rows of `d` features
/// and an integer label.
pub fn load_dataset_csv(path: &Path) -> Result<Dataset, TaskError> {
    let file = std::fs::File::open(path)?;
    let mut lines = std::io::BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| TaskError::Parse("empty file".into()))??;
    let dims: Vec<usize> = header
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|e| TaskError::Parse(format!("header: {e}")))
        })
        .collect::<Result<_, _>>()?;
    let [n, dim, n_classes] = dims[..] else {
        return Err(TaskError::Parse("header must be `n,d,k`".into()));
    };
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != dim + 1 {
            return Err(TaskError::Parse(format!(
                "row {i}: expected {} fields, got {}",
                dim + 1,
                parts.len()
            )));
        }
        for p in &parts[..dim] {
            features.push(
                p.trim()
                    .parse::<f64>()
                    .map_err(|e| TaskError::Parse(format!("row {i}: {e}")))?,
            );
        }
        labels.push(
            parts[dim]
                .trim()
                .parse::<u32>()
                .map_err(|e| TaskError::Parse(format!("row {i} label: {e}")))?,
        );
    }
    if labels.len() != n {
        return Err(TaskError::Parse(format!(
            "expected {n} rows, got {}",
            labels.len()
        )));
    }
    let ds = Dataset {
        features,
        labels,
        n,
        dim,
        n_classes,
    };
    ds.validate()?;
    Ok(ds)
}

/// Non-IID split: for each class, client proportions drawn from a symmetric
/// Dirichlet(tau); every shard is rebalanced up to at least one sample.
pub fn dirichlet_partition<R: Rng + ?Sized>(
    ds: &Dataset,
    n_clients: usize,
    tau: f64,
    rng: &mut R,
) -> Result<Vec<Shard>, TaskError> {
    if n_clients == 0 || n_clients > ds.n {
        return Err(TaskError::BadParam(format!(
            "cannot split {} samples across {n_clients} clients",
            ds.n
        )));
    }
    if !(tau > 0.0) {
        return Err(TaskError::BadParam("tau must be positive".into()));
    }
    let gamma = Gamma::new(tau, 1.0).map_err(|e| TaskError::BadParam(format!("tau: {e}")))?;
    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); n_clients];
    for class in 0..ds.n_classes {
        let mut members: Vec<usize> = (0..ds.n)
            .filter(|&i| ds.labels[i] as usize == class)
            .collect();
        if members.is_empty() {
            continue;
        }
        members.shuffle(rng);
        let mut draws: Vec<f64> = (0..n_clients).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = draws.iter().sum();
        if !(sum > 0.0) {
            draws[0] = 1.0;
        }
        let total: f64 = draws.iter().sum();
        // Largest-remainder apportionment of the class count.
        let mut counts: Vec<usize> = Vec::with_capacity(n_clients);
        let mut remainders: Vec<(usize, f64)> = Vec::with_capacity(n_clients);
        let mut assigned = 0usize;
        for (j, d) in draws.iter().enumerate() {
            let share = d / total * members.len() as f64;
            let base = share.floor() as usize;
            counts.push(base);
            remainders.push((j, share - base as f64));
            assigned += base;
        }
        remainders.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for &(j, _) in remainders.iter().take(members.len() - assigned) {
            counts[j] += 1;
        }
        let mut cursor = 0;
        for (j, &c) in counts.iter().enumerate() {
            shards[j].extend_from_slice(&members[cursor..cursor + c]);
            cursor += c;
        }
    }
    // Guarantee non-empty shards by pulling from the currently largest one.
    while let Some(empty) = shards.iter().position(|s| s.is_empty()) {
        let donor = (0..shards.len())
            .max_by(|&a, &b| shards[a].len().cmp(&shards[b].len()).then(b.cmp(&a)))
            .unwrap();
        if shards[donor].len() <= 1 {
            return Err(TaskError::BadParam(
                "not enough samples to give every client one".into(),
            ));
        }
        let moved = shards[donor].pop().unwrap();
        shards[empty].push(moved);
    }
    let mut out: Vec<Shard> = shards
        .into_iter()
        .enumerate()
        .map(|(j, mut indices)| {
            indices.sort_unstable();
            Shard {
                owner: j as u32,
                indices,
            }
        })
        .collect();
    out.sort_by_key(|s| s.owner);
    Ok(out)
}

fn accumulate_loss_grad(
    params: &ModelParams,
    ds: &Dataset,
    indices: &[usize],
    mut grad: Option<&mut [f64]>,
) -> f64 {
    let k = params.n_classes;
    let stride = params.dim + 1;
    let mut logits = vec![0.0; k];
    let mut loss = 0.0;
    for &i in indices {
        let x = ds.row(i);
        let y = ds.labels[i] as usize;
        params.logits(x, &mut logits);
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        loss += lse - logits[y];
        if let Some(g) = grad.as_deref_mut() {
            for c in 0..k {
                let p = (logits[c] - lse).exp();
                let delta = p - if c == y { 1.0 } else { 0.0 };
                let row = &mut g[c * stride..(c + 1) * stride];
                for d in 0..params.dim {
                    row[d] += delta * x[d];
                }
                row[params.dim] += delta;
            }
        }
    }
    let scale = indices.len() as f64;
    if let Some(g) = grad {
        for v in g.iter_mut() {
            *v /= scale;
        }
    }
    loss / scale
}

/// Mean cross-entropy of `params` over the given sample indices.
pub fn local_loss(params: &ModelParams, ds: &Dataset, indices: &[usize]) -> f64 {
    assert!(!indices.is_empty(), "loss over an empty index set");
    accumulate_loss_grad(params, ds, indices, None)
}

/// Mean cross-entropy over the whole dataset.
pub fn dataset_loss(params: &ModelParams, ds: &Dataset) -> f64 {
    let all: Vec<usize> = (0..ds.n).collect();
    local_loss(params, ds, &all)
}

/// Fraction of samples whose arg-max class matches the label.
pub fn accuracy(params: &ModelParams, ds: &Dataset) -> f64 {
    let mut logits = vec![0.0; params.n_classes];
    let mut hits = 0usize;
    for i in 0..ds.n {
        params.logits(ds.row(i), &mut logits);
        let mut best = 0usize;
        for c in 1..params.n_classes {
            if logits[c] > logits[best] {
                best = c;
            }
        }
        if best as u32 == ds.labels[i] {
            hits += 1;
        }
    }
    hits as f64 / ds.n as f64
}

/// Mean-loss gradient over the given indices, same layout as the parameters.
pub fn loss_gradient(params: &ModelParams, ds: &Dataset, indices: &[usize]) -> Vec<f64> {
    assert!(!indices.is_empty(), "gradient over an empty index set");
    let mut grad = vec![0.0; params.coef.len()];
    accumulate_loss_grad(params, ds, indices, Some(&mut grad));
    grad
}

/// Epoch-based local minibatch SGD starting from `start`; `start` itself is
/// left untouched.
pub fn local_train<R: Rng + ?Sized>(
    start: &ModelParams,
    ds: &Dataset,
    shard: &[usize],
    learning_rate: f64,
    batch_size: usize,
    epochs: usize,
    rng: &mut R,
) -> ModelParams {
    assert!(!shard.is_empty(), "training on an empty shard");
    assert!(batch_size > 0, "batch size must be positive");
    let mut params = start.clone();
    let mut order = shard.to_vec();
    let mut grad = vec![0.0; params.coef.len()];
    for _ in 0..epochs {
        order.shuffle(rng);
        for batch in order.chunks(batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            accumulate_loss_grad(&params, ds, batch, Some(&mut grad));
            for (w, g) in params.coef.iter_mut().zip(&grad) {
                *w -= learning_rate * g;
            }
        }
    }
    params
}

/// Weighted average of aligned models; weights must sum to one.
pub fn aggregate(models: &[&ModelParams], weights: &[f64]) -> Result<ModelParams, TaskError> {
    let Some(first) = models.first() else {
        return Err(TaskError::BadParam("no models to aggregate".into()));
    };
    if models.len() != weights.len() {
        return Err(TaskError::ShapeMismatch);
    }
    if models
        .iter()
        .any(|m| m.dim != first.dim || m.n_classes != first.n_classes)
    {
        return Err(TaskError::ShapeMismatch);
    }
    if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
        return Err(TaskError::BadParam("negative or non-finite weight".into()));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(TaskError::BadWeightSum(sum));
    }
    let mut coef = vec![0.0; first.coef.len()];
    for (m, &w) in models.iter().zip(weights) {
        for (o, &c) in coef.iter_mut().zip(&m.coef) {
            *o += w * c;
        }
    }
    Ok(ModelParams {
        coef,
        dim: first.dim,
        n_classes: first.n_classes,
    })
}

/// Participant-weighted objective: sum of data-proportional weights times
/// each participant's local loss under its own (personalized) model.
pub fn participant_loss(
    ds: &Dataset,
    entries: &[(&ModelParams, &[usize])],
) -> Result<f64, TaskError> {
    if entries.is_empty() {
        return Err(TaskError::BadParam("no participants".into()));
    }
    let total: usize = entries.iter().map(|(_, idx)| idx.len()).sum();
    if total == 0 {
        return Err(TaskError::BadParam("participants hold no data".into()));
    }
    let mut loss = 0.0;
    for (model, indices) in entries {
        let k = indices.len() as f64 / total as f64;
        loss += k * local_loss(model, ds, indices);
    }
    Ok(loss)
}

const ORACLE_MAX_BACKTRACKS: usize = 60;

/// Centralized optimum of the full-dataset loss by full-batch gradient
/// descent with backtracking line search, run until the gradient norm falls
/// below `grad_tol`. Deterministic: always starts from zeros.
pub fn optimal_loss_oracle(
    ds: &Dataset,
    grad_tol: f64,
    max_iters: usize,
) -> Result<f64, TaskError> {
    // Accelerated full-batch descent with backtracking and adaptive restart.
    // Softmax regression on (quasi-)separable data attains its infimum only
    // as the weights grow without bound, so alongside the gradient test the
    // loop also stops once a whole window of iterations improves the best
    // loss by less than STALL_TOL; the residual left on the table is orders
    // of magnitude below any stopping threshold the loss gap is compared to.
    const STALL_WINDOW: usize = 100;
    const STALL_TOL: f64 = 1e-9;
    let all: Vec<usize> = (0..ds.n).collect();
    let mut x = ModelParams::zeros(ds.dim, ds.n_classes);
    let mut x_prev = x.clone();
    let mut y = x.clone();
    let mut t = 1.0f64;
    let mut best = local_loss(&x, ds, &all);
    let mut window_best = best;
    let mut step = 1.0f64;
    for iter in 1..=max_iters {
        let grad = loss_gradient(&y, ds, &all);
        let gnorm_sq: f64 = grad.iter().map(|g| g * g).sum();
        let loss_y = local_loss(&y, ds, &all);
        if gnorm_sq.sqrt() < grad_tol {
            return Ok(best.min(loss_y));
        }
        step = (step * 1.5).min(1e6);
        let mut loss_x = f64::INFINITY;
        let mut accepted = false;
        for _ in 0..ORACLE_MAX_BACKTRACKS {
            let mut trial = y.clone();
            for (w, g) in trial.coef.iter_mut().zip(&grad) {
                *w -= step * g;
            }
            let trial_loss = local_loss(&trial, ds, &all);
            if trial_loss <= loss_y - 0.5 * step * gnorm_sq {
                x_prev = std::mem::replace(&mut x, trial);
                loss_x = trial_loss;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // Step size underflowed: numerically at the optimum already.
            return Ok(best);
        }
        if loss_x > best {
            // Momentum overshoot: restart from the plain gradient step.
            t = 1.0;
        } else {
            best = loss_x;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let momentum = (t - 1.0) / t_next;
        t = t_next;
        y = x.clone();
        for (w, (&xc, &xp)) in y.coef.iter_mut().zip(x.coef.iter().zip(&x_prev.coef)) {
            *w = xc + momentum * (xc - xp);
        }
        if iter % STALL_WINDOW == 0 {
            if window_best - best < STALL_TOL {
                return Ok(best);
            }
            window_best = best;
        }
    }
    Err(TaskError::OracleNotConverged { best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::SimRng;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn small_dataset(seed: u64) -> Dataset {
        let mut rng = SimRng::seed_from_u64(seed);
        generate_synthetic(60, 3, 4, 1.0, &mut rng).unwrap()
    }

    fn random_params(ds: &Dataset, seed: u64) -> ModelParams {
        let mut rng = SimRng::seed_from_u64(seed);
        let mut p = ModelParams::zeros(ds.dim, ds.n_classes);
        for w in p.coef.iter_mut() {
            *w = rng.random_range(-0.5..0.5);
        }
        p
    }

    #[test]
    fn zero_model_loss_is_log_k() {
        let ds = small_dataset(1);
        let p = ModelParams::zeros(ds.dim, ds.n_classes);
        assert_abs_diff_eq!(
            dataset_loss(&p, &ds),
            (ds.n_classes as f64).ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let ds = small_dataset(2);
        let params = random_params(&ds, 3);
        let indices: Vec<usize> = (0..20).collect();
        let grad = loss_gradient(&params, &ds, &indices);
        let h = 1e-6;
        for probe in [0usize, 3, 7, params.coef.len() - 1] {
            let mut plus = params.clone();
            plus.coef[probe] += h;
            let mut minus = params.clone();
            minus.coef[probe] -= h;
            let fd =
                (local_loss(&plus, &ds, &indices) - local_loss(&minus, &ds, &indices)) / (2.0 * h);
            assert_abs_diff_eq!(grad[probe], fd, epsilon = 1e-6);
        }
    }

    #[test]
    fn full_batch_gd_step_decreases_loss() {
        let ds = small_dataset(4);
        let params = random_params(&ds, 5);
        let all: Vec<usize> = (0..ds.n).collect();
        let before = local_loss(&params, &ds, &all);
        let grad = loss_gradient(&params, &ds, &all);
        let mut next = params.clone();
        for (w, g) in next.coef.iter_mut().zip(&grad) {
            *w -= 1e-2 * g;
        }
        assert!(local_loss(&next, &ds, &all) < before);
    }

    #[test]
    fn local_train_replays_bit_for_bit() {
        let ds = small_dataset(6);
        let shard: Vec<usize> = (0..30).collect();
        let start = ModelParams::zeros(ds.dim, ds.n_classes);
        let a = local_train(
            &start,
            &ds,
            &shard,
            0.05,
            8,
            3,
            &mut SimRng::seed_from_u64(9),
        );
        let b = local_train(
            &start,
            &ds,
            &shard,
            0.05,
            8,
            3,
            &mut SimRng::seed_from_u64(9),
        );
        assert_eq!(a, b);
        assert_eq!(start, ModelParams::zeros(ds.dim, ds.n_classes));
        // Training reduces the shard loss from the zero model.
        assert!(local_loss(&a, &ds, &shard) < local_loss(&start, &ds, &shard));
    }

    #[test]
    fn aggregate_checks_weights_and_averages() {
        let ds = small_dataset(7);
        let a = random_params(&ds, 8);
        let b = random_params(&ds, 9);
        let out = aggregate(&[&a, &b], &[0.25, 0.75]).unwrap();
        for i in 0..out.coef.len() {
            assert_abs_diff_eq!(
                out.coef[i],
                0.25 * a.coef[i] + 0.75 * b.coef[i],
                epsilon = 1e-12
            );
        }
        assert!(matches!(
            aggregate(&[&a, &b], &[0.5, 0.6]),
            Err(TaskError::BadWeightSum(_))
        ));
        assert!(aggregate(&[], &[]).is_err());
    }

    #[test]
    fn aggregation_weights_renormalize() {
        let w = AggregationWeights::from_sizes(&[(3, 10), (5, 30)]).unwrap();
        assert_eq!(w.pairs(), &[(3, 0.25), (5, 0.75)]);
        assert_abs_diff_eq!(w.weights().iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert!(AggregationWeights::from_sizes(&[(1, 0)]).is_err());
    }

    #[test]
    fn participant_loss_weights_by_shard_size() {
        let ds = small_dataset(10);
        let a = random_params(&ds, 11);
        let b = random_params(&ds, 12);
        let sa: Vec<usize> = (0..10).collect();
        let sb: Vec<usize> = (10..40).collect();
        let got = participant_loss(&ds, &[(&a, &sa), (&b, &sb)]).unwrap();
        let expect = 0.25 * local_loss(&a, &ds, &sa) + 0.75 * local_loss(&b, &ds, &sb);
        assert_abs_diff_eq!(got, expect, epsilon = 1e-12);
        assert!(participant_loss(&ds, &[]).is_err());
    }

    #[test]
    fn partition_covers_dataset_without_overlap() {
        let ds = small_dataset(13);
        let mut rng = SimRng::seed_from_u64(14);
        let shards = dirichlet_partition(&ds, 12, 0.1, &mut rng).unwrap();
        assert_eq!(shards.len(), 12);
        let mut seen = vec![false; ds.n];
        for s in &shards {
            assert!(!s.indices.is_empty(), "empty shard for owner {}", s.owner);
            for &i in &s.indices {
                assert!(!seen[i], "index {i} assigned twice");
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&v| v), "index left unassigned");
    }

    fn mean_tv_from_global(ds: &Dataset, shards: &[Shard]) -> f64 {
        let mut global = vec![0.0f64; ds.n_classes];
        for &y in &ds.labels {
            global[y as usize] += 1.0 / ds.n as f64;
        }
        let mut total = 0.0;
        for s in shards {
            let mut hist = vec![0.0f64; ds.n_classes];
            for &i in &s.indices {
                hist[ds.labels[i] as usize] += 1.0 / s.indices.len() as f64;
            }
            let tv: f64 = 0.5
                * hist
                    .iter()
                    .zip(&global)
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>();
            total += tv;
        }
        total / shards.len() as f64
    }

    #[test]
    fn small_tau_is_more_skewed_than_large_tau() {
        let mut rng = SimRng::seed_from_u64(21);
        let ds = generate_synthetic(600, 5, 4, 1.0, &mut rng).unwrap();
        let mut skew_sum = 0.0;
        let mut mild_sum = 0.0;
        for seed in 0..5u64 {
            let skewed =
                dirichlet_partition(&ds, 20, 0.1, &mut SimRng::seed_from_u64(seed)).unwrap();
            let mild =
                dirichlet_partition(&ds, 20, 10.0, &mut SimRng::seed_from_u64(seed)).unwrap();
            skew_sum += mean_tv_from_global(&ds, &skewed);
            mild_sum += mean_tv_from_global(&ds, &mild);
        }
        assert!(
            skew_sum / 5.0 > mild_sum / 5.0,
            "tau 0.1 mean TV {} not above tau 10 mean TV {}",
            skew_sum / 5.0,
            mild_sum / 5.0
        );
    }

    #[test]
    fn huge_tau_is_nearly_iid() {
        let mut rng = SimRng::seed_from_u64(22);
        let ds = generate_synthetic(1000, 4, 3, 1.0, &mut rng).unwrap();
        let shards = dirichlet_partition(&ds, 10, 1e6, &mut SimRng::seed_from_u64(23)).unwrap();
        for s in &shards {
            let mut hist = vec![0.0f64; ds.n_classes];
            for &i in &s.indices {
                hist[ds.labels[i] as usize] += 1.0 / s.indices.len() as f64;
            }
            let tv: f64 = 0.5 * hist.iter().map(|h| (h - 0.25).abs()).sum::<f64>();
            assert!(tv < 0.05, "client {} TV {tv} too far from uniform", s.owner);
        }
    }

    #[test]
    fn oracle_loss_is_small_on_separable_data() {
        let mut rng = SimRng::seed_from_u64(30);
        // Zero spread: points sit exactly on their cluster means.
        let ds = generate_synthetic(200, 4, 6, 0.0, &mut rng).unwrap();
        let loss = optimal_loss_oracle(&ds, 1e-5, 50_000).unwrap();
        assert!(
            loss < 0.05,
            "oracle loss {loss} not small on separable data"
        );
    }

    #[test]
    fn oracle_lower_bounds_gd_iterates() {
        let ds = small_dataset(31);
        let oracle = optimal_loss_oracle(&ds, 1e-6, 50_000).unwrap();
        let all: Vec<usize> = (0..ds.n).collect();
        let mut params = ModelParams::zeros(ds.dim, ds.n_classes);
        for _ in 0..50 {
            let grad = loss_gradient(&params, &ds, &all);
            for (w, g) in params.coef.iter_mut().zip(&grad) {
                *w -= 0.05 * g;
            }
            assert!(local_loss(&params, &ds, &all) >= oracle - 1e-6);
        }
    }

    #[test]
    fn oracle_is_deterministic() {
        // The oracle consumes no randomness, so two calls on the same data
        // agree bit for bit.
        let a = optimal_loss_oracle(&small_dataset(32), 1e-5, 50_000).unwrap();
        let b = optimal_loss_oracle(&small_dataset(32), 1e-5, 50_000).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn generated_labels_are_balanced() {
        let ds = small_dataset(33);
        let mut counts = vec![0usize; ds.n_classes];
        for &y in &ds.labels {
            counts[y as usize] += 1;
        }
        let max = counts.iter().max().unwrap();
        let min = counts.iter().min().unwrap();
        assert!(max - min <= 1, "imbalanced labels: {counts:?}");
    }

    #[test]
    fn csv_round_trip() {
        let dir = std::env::temp_dir().join(format!("fedwhittle-task-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("tiny.csv");
        std::fs::write(&path, "3,2,2\n0.5,1.25,0\n-1.0,0.0,1\n2.5,-3.5,1\n").unwrap();
        let ds = load_dataset_csv(&path).unwrap();
        assert_eq!((ds.n, ds.dim, ds.n_classes), (3, 2, 2));
        assert_eq!(ds.labels, vec![0, 1, 1]);
        assert_abs_diff_eq!(ds.row(2)[1], -3.5);
        std::fs::write(&path, "3,2,2\n0.5,1.25,0\n").unwrap();
        assert!(load_dataset_csv(&path).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn split_tail_keeps_balance() {
        let mut rng = SimRng::seed_from_u64(40);
        let ds = generate_synthetic(250, 5, 3, 1.0, &mut rng).unwrap();
        let (train, test) = ds.split_tail(50).unwrap();
        assert_eq!(train.n, 200);
        assert_eq!(test.n, 50);
        let mut counts = vec![0usize; test.n_classes];
        for &y in &test.labels {
            counts[y as usize] += 1;
        }
        let max = counts.iter().max().unwrap();
        let min = counts.iter().min().unwrap();
        assert!(max - min <= 1, "imbalanced test labels: {counts:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn partition_preserves_label_multiset(
            seed in 0u64..500,
            tau in prop::sample::select(vec![0.1f64, 1.0, 10.0]),
            n_clients in 2usize..20,
        ) {
            let ds = small_dataset(seed);
            let shards = dirichlet_partition(&ds, n_clients, tau, &mut SimRng::seed_from_u64(seed)).unwrap();
            let mut got: Vec<u32> = shards.iter().flat_map(|s| s.indices.iter().map(|&i| ds.labels[i])).collect();
            let mut want = ds.labels.clone();
            got.sort_unstable();
            want.sort_unstable();
            prop_assert_eq!(got, want);
        }

        #[test]
        fn aggregate_is_linear_in_models(w in 0.0f64..1.0, seed in 0u64..100) {
            let ds = small_dataset(seed);
            let a = random_params(&ds, seed + 1);
            let b = random_params(&ds, seed + 2);
            let out = aggregate(&[&a, &b], &[w, 1.0 - w]).unwrap();
            for i in 0..out.coef.len() {
                prop_assert!((out.coef[i] - (w * a.coef[i] + (1.0 - w) * b.coef[i])).abs() < 1e-12);
            }
        }
    }
}
