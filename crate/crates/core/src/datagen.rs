//! Synthetic pools and the client partitioning schemes: Dirichlet label
//! shift, the two-class two-class label-shift federation, and shared-pool clients whose
//! losses are exact marginal-weighted sums of per-class pool losses.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::models::{self, LossGrad, ModelParams};
use crate::numerics::{dirichlet_sample, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    /// Zero-based class index.
    pub y: usize,
}

/// Labeled samples together with a per-class index.
#[derive(Debug, Clone)]
pub struct LabeledPool {
    samples: Vec<Sample>,
    class_index: Vec<Vec<usize>>,
    dim: usize,
}

impl LabeledPool {
    pub fn new(samples: Vec<Sample>, num_classes: usize, dim: usize) -> Result<Self> {
        let mut class_index = vec![Vec::new(); num_classes];
        for (i, s) in samples.iter().enumerate() {
            if s.y >= num_classes {
                return Err(Error::invalid(format!(
                    "sample {i} has label {} but there are {num_classes} classes",
                    s.y
                )));
            }
            if s.x.len() != dim {
                return Err(Error::ShapeMismatch {
                    op: "LabeledPool::new",
                    left: s.x.len(),
                    right: dim,
                });
            }
            class_index[s.y].push(i);
        }
        Ok(Self {
            samples,
            class_index,
            dim,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn class_indices(&self, class: usize) -> &[usize] {
        &self.class_index[class]
    }

    pub fn num_classes(&self) -> usize {
        self.class_index.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_marginal(&self) -> Vec<f64> {
        class_marginal(&self.samples, self.num_classes())
    }
}

fn class_marginal(samples: &[Sample], num_classes: usize) -> Vec<f64> {
    let mut counts = vec![0.0; num_classes];
    for s in samples {
        counts[s.y] += 1.0;
    }
    let n = samples.len().max(1) as f64;
    counts.iter().map(|c| c / n).collect()
}

/// One client's local data.
///
/// In shared-pool mode `class_weights` is set and `train`/`test` point at a
/// pool shared with every other client; the client's loss is then
/// `Σ_j class_weights[j] · (mean loss over the pool's class-j samples)`.
#[derive(Debug, Clone)]
pub struct ClientDataset {
    pub client_id: usize,
    pub train: Arc<Vec<Sample>>,
    pub test: Arc<Vec<Sample>>,
    /// Aggregation weight `p_i = n_i / N`.
    pub weight: f64,
    pub class_marginal: Vec<f64>,
    pub class_weights: Option<Vec<f64>>,
}

impl ClientDataset {
    pub fn is_shared_pool(&self) -> bool {
        self.class_weights.is_some()
    }

    /// `f_i(θ)` and its gradient over the full local train set.
    pub fn train_loss_and_grad(&self, params: &ModelParams) -> Result<LossGrad> {
        models::loss_and_grad(params, &self.train, self.class_weights.as_deref())
    }

    pub fn train_loss(&self, params: &ModelParams) -> Result<f64> {
        models::loss(params, &self.train, self.class_weights.as_deref())
    }

    /// Test accuracy in `[0, 1]`; class-weighted in shared-pool mode.
    pub fn test_accuracy(&self, params: &ModelParams) -> Result<f64> {
        match &self.class_weights {
            None => models::accuracy(params, &self.test),
            Some(w) => models::weighted_accuracy(params, &self.test, w),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Federation {
    pub clients: Vec<ClientDataset>,
    pub num_classes: usize,
    pub dim: usize,
}

impl Federation {
    pub fn len(&self) -> usize {
        self.clients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clients.is_empty()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.clients.iter().map(|c| c.weight).collect()
    }

    /// Per-client `f_i(θ)` on the train sets.
    pub fn train_losses(&self, params: &ModelParams) -> Result<Vec<f64>> {
        self.clients.iter().map(|c| c.train_loss(params)).collect()
    }

    pub fn is_shared_pool(&self) -> bool {
        !self.clients.is_empty() && self.clients.iter().all(ClientDataset::is_shared_pool)
    }
}

/// Isotropic unit-variance Gaussian per class. Class means sit at distance
/// `separation` from the origin along `+e_0, -e_0, +e_1, -e_1, …`; when
/// there are more classes than signed axes the remaining means use random
/// unit directions.
pub fn make_gaussian_mixture(
    rng: &mut Rng,
    num_classes: usize,
    dim: usize,
    per_class: usize,
    separation: f64,
) -> Result<LabeledPool> {
    if num_classes < 2 {
        return Err(Error::invalid(format!("need at least 2 classes, got {num_classes}")));
    }
    if dim == 0 || per_class == 0 {
        return Err(Error::invalid("input dimension and per-class count must be positive"));
    }
    if !(separation >= 0.0) || !separation.is_finite() {
        return Err(Error::invalid(format!("separation must be finite and >= 0, got {separation}")));
    }
    let mut mean_rng = rng.substream(0);
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|j| {
            let mut m = vec![0.0; dim];
            if j < 2 * dim {
                m[j / 2] = if j % 2 == 0 { separation } else { -separation };
            } else {
                let dir: Vec<f64> = (0..dim).map(|_| mean_rng.normal()).collect();
                let norm = crate::numerics::norm2(&dir).max(f64::MIN_POSITIVE);
                for (mi, di) in m.iter_mut().zip(&dir) {
                    *mi = separation * di / norm;
                }
            }
            m
        })
        .collect();

    let mut samples = Vec::with_capacity(num_classes * per_class);
    for (j, mean) in means.iter().enumerate() {
        let mut class_rng = rng.substream(1 + j as u64);
        for _ in 0..per_class {
            let x = mean.iter().map(|m| m + class_rng.normal()).collect();
            samples.push(Sample { x, y: j });
        }
    }
    LabeledPool::new(samples, num_classes, dim)
}

/// Shuffles and splits into `(train, test)` with `|train| = round(ratio·n)`,
/// clamped so that both sides are nonempty.
pub fn train_test_split(rng: &mut Rng, samples: &[Sample], ratio: f64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    let n = samples.len();
    if n < 2 {
        return Err(Error::invalid(format!("cannot split {n} samples into train and test")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let n_train = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
    let train = order[..n_train].iter().map(|&i| samples[i].clone()).collect();
    let test = order[n_train..].iter().map(|&i| samples[i].clone()).collect();
    Ok((train, test))
}

const MAX_PARTITION_RETRIES: u64 = 100;
const MIN_CLIENT_SAMPLES: usize = 2;

/// Splits each class's samples across clients with Dirichlet proportions,
/// then gathers each client's shares (class-major) and splits them into
/// train and test.
pub fn dirichlet_partition(
    rng: &mut Rng,
    pool: &LabeledPool,
    n_clients: usize,
    concentration: f64,
    split_ratio: f64,
) -> Result<Federation> {
    if n_clients < 1 {
        return Err(Error::invalid("need at least one client"));
    }
    if pool.len() < MIN_CLIENT_SAMPLES * n_clients {
        return Err(Error::invalid(format!(
            "pool of {} samples cannot give {n_clients} clients {MIN_CLIENT_SAMPLES} samples each",
            pool.len()
        )));
    }
    let num_classes = pool.num_classes();

    // shares[k][i] = pool indices of class k assigned to client i
    let mut shares: Vec<Vec<Vec<usize>>> = Vec::new();
    for attempt in 0..=MAX_PARTITION_RETRIES {
        let attempt_rng = rng.substream(attempt);
        shares = (0..num_classes)
            .map(|k| {
                let mut class_rng = attempt_rng.substream(k as u64);
                let mut members = pool.class_indices(k).to_vec();
                class_rng.shuffle(&mut members);
                let props = dirichlet_sample(&mut class_rng, concentration, n_clients)?;
                Ok(split_by_proportions(&members, &props))
            })
            .collect::<Result<_>>()?;
        if client_totals(&shares, n_clients)
            .iter()
            .all(|&t| t >= MIN_CLIENT_SAMPLES)
        {
            break;
        }
        if attempt == MAX_PARTITION_RETRIES {
            log::warn!("dirichlet partition still has undersized clients after {MAX_PARTITION_RETRIES} retries; rebalancing");
            rebalance(&mut shares, n_clients);
        }
    }

    let mut clients = Vec::with_capacity(n_clients);
    for i in 0..n_clients {
        let local: Vec<Sample> = shares
            .iter()
            .flat_map(|per_client| per_client[i].iter().map(|&idx| pool.samples()[idx].clone()))
            .collect();
        let mut split_rng = rng.substream(1_000_000 + i as u64);
        let (train, test) = train_test_split(&mut split_rng, &local, split_ratio)?;
        clients.push((train, test));
    }
    let total_train: usize = clients.iter().map(|(tr, _)| tr.len()).sum();
    let clients = clients
        .into_iter()
        .enumerate()
        .map(|(i, (train, test))| ClientDataset {
            client_id: i,
            weight: train.len() as f64 / total_train as f64,
            class_marginal: class_marginal(&train, num_classes),
            train: Arc::new(train),
            test: Arc::new(test),
            class_weights: None,
        })
        .collect();
    Ok(Federation {
        clients,
        num_classes,
        dim: pool.dim(),
    })
}

/// Contiguous split of `members` with boundaries `round(cumsum(props)·n)`.
fn split_by_proportions(members: &[usize], props: &[f64]) -> Vec<Vec<usize>> {
    let n = members.len();
    let mut out = Vec::with_capacity(props.len());
    let mut cum = 0.0;
    let mut start = 0;
    for (i, p) in props.iter().enumerate() {
        cum += p;
        let end = if i + 1 == props.len() {
            n
        } else {
            ((cum * n as f64).round() as usize).clamp(start, n)
        };
        out.push(members[start..end].to_vec());
        start = end;
    }
    out
}

fn client_totals(shares: &[Vec<Vec<usize>>], n_clients: usize) -> Vec<usize> {
    (0..n_clients)
        .map(|i| shares.iter().map(|per_client| per_client[i].len()).sum())
        .collect()
}

/// Moves single samples from the largest client to undersized ones.
fn rebalance(shares: &mut [Vec<Vec<usize>>], n_clients: usize) {
    loop {
        let totals = client_totals(shares, n_clients);
        let Some(needy) = totals.iter().position(|&t| t < MIN_CLIENT_SAMPLES) else {
            return;
        };
        let donor = (0..n_clients)
            .max_by_key(|&i| (totals[i], std::cmp::Reverse(i)))
            .expect("nonempty federation");
        let class = (0..shares.len())
            .max_by_key(|&k| (shares[k][donor].len(), std::cmp::Reverse(k)))
            .expect("at least one class");
        let moved = shares[class][donor].pop().expect("donor holds samples");
        shares[class][needy].push(moved);
    }
}

/// Class marginals of the two-class label-shift federation: client 0 gets
/// `αu + (1-α)δ_0`, every other client `αu + (1-α)δ_1`.
pub fn label_shift_marginals(n_clients: usize, alpha: f64) -> Result<Vec<Vec<f64>>> {
    if n_clients < 2 {
        return Err(Error::invalid(format!("label-shift federation needs at least 2 clients, got {n_clients}")));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let major = 1.0 - alpha / 2.0;
    let minor = alpha / 2.0;
    Ok((0..n_clients)
        .map(|i| if i == 0 { vec![major, minor] } else { vec![minor, major] })
        .collect())
}

/// two-class label-shift federation over a two-class pool, used for both train and test.
pub fn label_shift_partition(pool: &LabeledPool, n_clients: usize, alpha: f64) -> Result<Federation> {
    label_shift_partition_split(pool, pool, n_clients, alpha)
}

/// two-class label-shift federation with separate train and test pools.
pub fn label_shift_partition_split(
    train: &LabeledPool,
    test: &LabeledPool,
    n_clients: usize,
    alpha: f64,
) -> Result<Federation> {
    if train.num_classes() != 2 || test.num_classes() != 2 {
        return Err(Error::invalid(format!(
            "label-shift federation needs a two-class pool, got {} classes",
            train.num_classes()
        )));
    }
    let marginals = label_shift_marginals(n_clients, alpha)?;
    shared_pool_clients_split(train, test, &marginals)
}

/// Shared-pool clients evaluated on the same pool for train and test.
pub fn shared_pool_clients(pool: &LabeledPool, marginals: &[Vec<f64>]) -> Result<Federation> {
    shared_pool_clients_split(pool, pool, marginals)
}

/// Clients whose loss is exactly `Σ_j marginal_i(j) · ℓ̄_j(θ)` over a shared
/// pool. Every client gets weight `1/n`.
pub fn shared_pool_clients_split(
    train: &LabeledPool,
    test: &LabeledPool,
    marginals: &[Vec<f64>],
) -> Result<Federation> {
    let num_classes = train.num_classes();
    if test.num_classes() != num_classes || test.dim() != train.dim() {
        return Err(Error::invalid("train and test pools disagree on classes or dimension"));
    }
    if marginals.is_empty() {
        return Err(Error::invalid("need at least one client marginal"));
    }
    for (i, m) in marginals.iter().enumerate() {
        if m.len() != num_classes {
            return Err(Error::ShapeMismatch {
                op: "shared_pool_clients",
                left: m.len(),
                right: num_classes,
            });
        }
        let total: f64 = m.iter().sum();
        if (total - 1.0).abs() > 1e-9 || m.iter().any(|v| *v < 0.0) {
            return Err(Error::invalid(format!(
                "client {i} marginal must be a probability vector (sum {total})"
            )));
        }
        for (j, &w) in m.iter().enumerate() {
            if w > 0.0 && (train.class_indices(j).is_empty() || test.class_indices(j).is_empty()) {
                return Err(Error::invalid(format!("client {i} weights class {j}, which the pool lacks")));
            }
        }
    }
    let train_samples = Arc::new(train.samples().to_vec());
    let test_samples = Arc::new(test.samples().to_vec());
    let n = marginals.len();
    let clients = marginals
        .iter()
        .enumerate()
        .map(|(i, m)| ClientDataset {
            client_id: i,
            train: Arc::clone(&train_samples),
            test: Arc::clone(&test_samples),
            weight: 1.0 / n as f64,
            class_marginal: m.clone(),
            class_weights: Some(m.clone()),
        })
        .collect();
    Ok(Federation {
        clients,
        num_classes,
        dim: train.dim(),
    })
}

/// Writes samples as text: a `n p C` header, then `y x_1 … x_p` per line.
pub fn write_samples<W: Write>(mut out: W, samples: &[Sample], dim: usize, num_classes: usize) -> std::io::Result<()> {
    writeln!(out, "{} {} {}", samples.len(), dim, num_classes)?;
    let mut line = String::new();
    for s in samples {
        line.clear();
        let _ = write!(line, "{}", s.y);
        for v in &s.x {
            let _ = write!(line, " {v:?}");
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn read_samples<R: BufRead>(input: R, path: &Path) -> Result<LabeledPool> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = input.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(1, "missing header".into()))?;
    let header = header.map_err(|e| Error::io(path, e))?;
    let fields: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| parse_err(1, format!("bad header: {e}")))?;
    let [n, dim, num_classes] = fields[..] else {
        return Err(parse_err(1, format!("header needs `n p C`, got {header:?}")));
    };
    let mut samples = Vec::with_capacity(n);
    for (idx, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let mut tokens = line.split_whitespace();
        let y = tokens
            .next()
            .unwrap_or_default()
            .parse::<usize>()
            .map_err(|e| parse_err(lineno, format!("bad label: {e}")))?;
        let x: Vec<f64> = tokens
            .map(str::parse::<f64>)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| parse_err(lineno, format!("bad feature: {e}")))?;
        if x.len() != dim {
            return Err(parse_err(lineno, format!("expected {dim} features, got {}", x.len())));
        }
        if y >= num_classes {
            return Err(parse_err(lineno, format!("label {y} out of range for {num_classes} classes")));
        }
        samples.push(Sample { x, y });
    }
    if samples.len() != n {
        return Err(parse_err(1, format!("header declares {n} samples, found {}", samples.len())));
    }
    LabeledPool::new(samples, num_classes, dim)
}
