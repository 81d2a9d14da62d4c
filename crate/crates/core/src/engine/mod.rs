//! The outer federated loop: sample clients, train locally, aggregate,
//! step the global model, evaluate on schedule.

pub mod output;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{Aggregator, Strategy};
use crate::datagen::Federation;
use crate::error::{Error, Result};
use crate::localtrain::{local_sgd, ClientReport, LocalConfig};
use crate::metrics::{fairness_report, FairnessReport};
use crate::models::{Arch, ModelParams};
use crate::numerics::{self, Rng};

const STREAM_INIT: u64 = 0;
const STREAM_SAMPLING: u64 = 1;
const STREAM_CLIENTS: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    /// Fraction of clients sampled per round.
    #[serde(default = "default_participation")]
    pub participation: f64,
    #[serde(default)]
    pub local: LocalConfig,
    pub strategy: Strategy,
    /// Evaluate every this many rounds (the final round is always evaluated).
    #[serde(default)]
    pub eval_every: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    /// Train sampled clients on the rayon pool.
    #[serde(default = "default_parallel")]
    pub parallel: bool,
}

fn default_rounds() -> usize {
    200
}

fn default_participation() -> f64 {
    1.0
}

fn default_parallel() -> bool {
    true
}

impl RunConfig {
    pub fn new(strategy: Strategy, local: LocalConfig, rounds: usize, seed: u64) -> Self {
        Self {
            rounds,
            participation: default_participation(),
            local,
            strategy,
            eval_every: None,
            seed,
            parallel: default_parallel(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::Config(format!(
                "participation must lie in (0, 1], got {}",
                self.participation
            )));
        }
        if self.eval_every == Some(0) {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        self.local.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.strategy.validate()
    }
}

/// Everything recorded about one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: usize,
    pub strategy: String,
    pub sampled: Vec<usize>,
    /// `f_i(θ^(t))`, aligned with `sampled`.
    pub losses: Vec<f64>,
    pub mean_loss: f64,
    pub weights: Option<Vec<f64>>,
    /// `null` when unbounded or not applicable.
    pub beta_max: Option<f64>,
    pub update_norm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<FairnessReport>,
}

/// Mutable state threaded through rounds.
#[derive(Debug, Clone)]
pub struct RunState {
    pub params: ModelParams,
    pub round: usize,
    aggregator: Aggregator,
    rng: Rng,
}

impl RunState {
    pub fn new(federation: &Federation, arch: Arch, cfg: &RunConfig) -> Result<Self> {
        let rng = Rng::new(cfg.seed);
        let params = ModelParams::init(&mut rng.substream(STREAM_INIT), arch);
        Self::with_params(federation, params, cfg)
    }

    pub fn with_params(federation: &Federation, params: ModelParams, cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        params.arch().validate()?;
        if federation.is_empty() {
            return Err(Error::invalid("federation has no clients"));
        }
        if params.arch().inputs() != federation.dim || params.arch().classes() != federation.num_classes {
            return Err(Error::invalid(format!(
                "model {} does not fit data with {} features and {} classes",
                params.arch(),
                federation.dim,
                federation.num_classes
            )));
        }
        Ok(Self {
            params,
            round: 0,
            aggregator: Aggregator::new(cfg.strategy.clone(), &federation.weights())?,
            rng: Rng::new(cfg.seed),
        })
    }
}

fn diverged(round: usize, strategy: &Strategy, reason: String) -> Error {
    Error::Diverged {
        round,
        strategy: strategy.tag().to_string(),
        reason,
    }
}

/// Runs one round and advances `state`.
pub fn run_round(state: &mut RunState, federation: &Federation, cfg: &RunConfig) -> Result<RoundTrace> {
    let round = state.round;
    let n = federation.len();
    let k = ((cfg.participation * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    let sampled = if k == n {
        (0..n).collect()
    } else {
        state
            .rng
            .substream(STREAM_SAMPLING)
            .substream(round as u64)
            .sample_without_replacement(n, k)
    };

    let client_root = state.rng.substream(STREAM_CLIENTS).substream(round as u64);
    let params = &state.params;
    let train = |&i: &usize| -> Result<ClientReport> {
        let client = &federation.clients[i];
        local_sgd(params, client, &cfg.local, &mut client_root.substream(client.client_id as u64))
    };
    let reports: Vec<ClientReport> = if cfg.parallel {
        sampled.par_iter().map(train).collect::<Result<_>>()
    } else {
        sampled.iter().map(train).collect::<Result<_>>()
    }
    .map_err(|e| Error::Round {
        round,
        source: Box::new(e),
    })?;

    let strategy = state.aggregator.strategy().clone();
    for r in &reports {
        if !r.loss_at_start.is_finite() || r.delta.iter().any(|v| !v.is_finite()) {
            return Err(diverged(
                round,
                &strategy,
                format!("client {} produced a non-finite loss or update", r.client_id),
            ));
        }
    }

    let outcome = state.aggregator.aggregate(&reports).map_err(|e| Error::Round {
        round,
        source: Box::new(e),
    })?;
    numerics::axpy(-1.0, &outcome.delta, state.params.theta_mut())?;
    if state.params.theta().iter().any(|v| !v.is_finite()) {
        return Err(diverged(round, &strategy, "global parameters became non-finite".into()));
    }
    state.round += 1;

    Ok(RoundTrace {
        round,
        strategy: strategy.tag().to_string(),
        losses: reports.iter().map(|r| r.loss_at_start).collect(),
        sampled,
        mean_loss: outcome.mean_loss,
        weights: outcome.weights,
        beta_max: outcome.beta_max.filter(|b| b.is_finite()),
        update_norm: numerics::norm2(&outcome.delta),
        eval: None,
    })
}

/// Per-client test accuracies in percent.
pub fn evaluate(params: &ModelParams, federation: &Federation) -> Result<Vec<f64>> {
    federation
        .clients
        .iter()
        .map(|c| c.test_accuracy(params).map(|a| 100.0 * a))
        .collect()
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub params: ModelParams,
    pub traces: Vec<RoundTrace>,
    pub accuracies: Vec<f64>,
    pub report: FairnessReport,
}

pub fn run_experiment(federation: &Federation, arch: Arch, cfg: &RunConfig) -> Result<ExperimentOutcome> {
    run_experiment_with(federation, arch, cfg, |_| Ok(()))
}

/// Runs all rounds, handing each trace to `on_round` as soon as it exists,
/// so a divergence still leaves the completed rounds observable.
pub fn run_experiment_with<F>(federation: &Federation, arch: Arch, cfg: &RunConfig, mut on_round: F) -> Result<ExperimentOutcome>
where
    F: FnMut(&RoundTrace) -> Result<()>,
{
    let mut state = RunState::new(federation, arch, cfg)?;
    let mut traces = Vec::with_capacity(cfg.rounds);
    let mut last_eval = None;
    for t in 0..cfg.rounds {
        let mut trace = run_round(&mut state, federation, cfg)?;
        let due = t + 1 == cfg.rounds || cfg.eval_every.is_some_and(|e| (t + 1) % e == 0);
        if due {
            let acc = evaluate(&state.params, federation)?;
            let report = fairness_report(&acc)?;
            trace.eval = Some(report.clone());
            last_eval = Some((acc, report));
        }
        on_round(&trace)?;
        traces.push(trace);
    }
    let (accuracies, report) = last_eval.expect("final round is always evaluated");
    Ok(ExperimentOutcome {
        params: state.params,
        traces,
        accuracies,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{dirichlet_partition, make_gaussian_mixture};

    fn federation(seed: u64) -> Federation {
        let mut rng = Rng::new(seed);
        let pool = make_gaussian_mixture(&mut rng, 3, 4, 40, 2.0).unwrap();
        dirichlet_partition(&mut rng, &pool, 5, 0.3, 0.5).unwrap()
    }

    const ARCH: Arch = Arch::SoftmaxRegression { inputs: 4, classes: 3 };

    #[test]
    fn null_dynamics_keep_theta() {
        let fed = federation(1);
        let local = LocalConfig {
            eta: 0.0,
            ..LocalConfig::default()
        };
        let cfg = RunConfig::new(Strategy::VRed { beta: 0.5 }, local, 3, 9);
        let mut state = RunState::new(&fed, ARCH, &cfg).unwrap();
        let before = state.params.clone();
        let trace = run_round(&mut state, &fed, &cfg).unwrap();
        assert_eq!(state.params, before);
        assert_eq!(trace.losses, fed.train_losses(&before).unwrap());
    }

    #[test]
    fn single_client_round_is_a_gradient_step() {
        let fed = federation(2);
        let mut one = fed.clone();
        one.clients.truncate(1);
        one.clients[0].weight = 1.0;
        let cfg = RunConfig::new(Strategy::FedAvg, LocalConfig::full_batch_step(0.2), 1, 3);
        let mut state = RunState::new(&one, ARCH, &cfg).unwrap();
        let start = state.params.clone();
        run_round(&mut state, &one, &cfg).unwrap();
        let g = one.clients[0].train_loss_and_grad(&start).unwrap();
        for ((a, s), gi) in state.params.theta().iter().zip(start.theta()).zip(&g.grad) {
            assert!((a - (s - 0.2 * gi)).abs() < 1e-14);
        }
    }

    #[test]
    fn partial_participation_samples_ceil_fraction() {
        let fed = federation(3);
        let mut cfg = RunConfig::new(Strategy::FedAvg, LocalConfig::default(), 4, 5);
        cfg.participation = 0.5;
        let mut state = RunState::new(&fed, ARCH, &cfg).unwrap();
        for _ in 0..4 {
            let t = run_round(&mut state, &fed, &cfg).unwrap();
            assert_eq!(t.sampled.len(), 3);
            let p: Vec<f64> = t.sampled.iter().map(|&i| fed.clients[i].weight).collect();
            let total: f64 = p.iter().sum();
            let fbar: f64 = p.iter().zip(&t.losses).map(|(w, f)| w / total * f).sum();
            assert!((fbar - t.mean_loss).abs() < 1e-10);
        }
    }

    #[test]
    fn parallel_equals_serial() {
        let fed = federation(4);
        let mut cfg = RunConfig::new(Strategy::SemiVRed { beta: 0.2 }, LocalConfig::default(), 5, 11);
        cfg.local.batch_size = 8;
        cfg.participation = 0.6;
        let par = run_experiment(&fed, ARCH, &cfg).unwrap();
        cfg.parallel = false;
        let ser = run_experiment(&fed, ARCH, &cfg).unwrap();
        assert_eq!(par.traces, ser.traces);
        assert_eq!(par.params, ser.params);
    }

    #[test]
    fn divergence_is_reported() {
        let fed = federation(5);
        let local = LocalConfig {
            eta: f64::MAX,
            ..LocalConfig::default()
        };
        let cfg = RunConfig::new(Strategy::FedAvg, local, 20, 1);
        let mut seen = 0;
        let err = run_experiment_with(&fed, ARCH, &cfg, |_| {
            seen += 1;
            Ok(())
        })
        .unwrap_err();
        match err {
            Error::Diverged { round, ref strategy, .. } => {
                assert_eq!(strategy, "fedavg");
                assert_eq!(round, seen);
            }
            other => panic!("expected divergence, got {other}"),
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let fed = federation(6);
        let cfg = RunConfig::new(Strategy::FedAvg, LocalConfig::default(), 1, 0);
        let bad = Arch::SoftmaxRegression { inputs: 5, classes: 3 };
        assert!(RunState::new(&fed, bad, &cfg).is_err());
    }
}
