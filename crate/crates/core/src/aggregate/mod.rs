//! Server-side combination of client reports.
//!
//! The variance-regularized rule adds a correction to the FedAvg step,
//!
//! ```text
//! Δ = Σ p_i Δ_i + 2β Σ p_i g(f_i − f̄) (Δ_i − Δ̄)
//! ```
//!
//! with `g(x) = x` (VRed) or `g(x) = max(x, 0)` (Semi-VRed). Baselines
//! combine pseudo-gradients with the first-order weights of their
//! objectives. Reductions run in ascending client id.

mod baselines;
mod weights;

pub use baselines::{afl_step, baseline_weights, project_simplex, tail_count, PROPFAIR_FLOOR};
pub use weights::{above_mean, semivred_weights, vred_weights};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::localtrain::ClientReport;
use crate::numerics;

fn default_clamp() -> bool {
    true
}

/// Server strategy and its hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum Strategy {
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "vred")]
    VRed { beta: f64 },
    #[serde(rename = "semivred")]
    SemiVRed { beta: f64 },
    #[serde(rename = "gifair")]
    GiFair { lambda: f64 },
    #[serde(rename = "qffl")]
    QFfl { q: f64 },
    #[serde(rename = "term")]
    Term { alpha: f64 },
    #[serde(rename = "afl")]
    Afl {
        gamma_lambda: f64,
        /// Starting mixture weights; defaults to the client weights.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        initial_lambda: Option<Vec<f64>>,
    },
    #[serde(rename = "propfair")]
    PropFair {
        m: f64,
        /// Floor `M − f_i` instead of failing.
        #[serde(default = "default_clamp")]
        clamp: bool,
    },
    #[serde(rename = "deltafl")]
    DeltaFl { cvar_alpha: f64 },
}

impl Strategy {
    pub fn tag(&self) -> &'static str {
        match self {
            Strategy::FedAvg => "fedavg",
            Strategy::VRed { .. } => "vred",
            Strategy::SemiVRed { .. } => "semivred",
            Strategy::GiFair { .. } => "gifair",
            Strategy::QFfl { .. } => "qffl",
            Strategy::Term { .. } => "term",
            Strategy::Afl { .. } => "afl",
            Strategy::PropFair { .. } => "propfair",
            Strategy::DeltaFl { .. } => "deltafl",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, v: f64, range: &str| {
            Err(Error::Config(format!("strategy {}: {field} = {v} must be {range}", self.tag())))
        };
        match *self {
            Strategy::FedAvg => Ok(()),
            Strategy::VRed { beta } | Strategy::SemiVRed { beta } if !(beta >= 0.0 && beta.is_finite()) => {
                bad("beta", beta, ">= 0")
            }
            Strategy::GiFair { lambda } if !(lambda >= 0.0 && lambda.is_finite()) => bad("lambda", lambda, ">= 0"),
            Strategy::QFfl { q } if !(q >= 0.0 && q.is_finite()) => bad("q", q, ">= 0"),
            Strategy::Term { alpha } if !(alpha > 0.0 && alpha.is_finite()) => bad("alpha", alpha, "> 0"),
            Strategy::Afl { gamma_lambda, .. } if !(gamma_lambda > 0.0 && gamma_lambda.is_finite()) => {
                bad("gamma_lambda", gamma_lambda, "> 0")
            }
            Strategy::Afl {
                initial_lambda: Some(ref l),
                ..
            } if l.iter().any(|v| *v < 0.0) || (l.iter().sum::<f64>() - 1.0).abs() > 1e-9 => Err(Error::Config(
                "strategy afl: initial_lambda must be a probability vector".into(),
            )),
            Strategy::PropFair { m, .. } if !(m > 0.0 && m.is_finite()) => bad("m", m, "> 0"),
            Strategy::DeltaFl { cvar_alpha } if !(cvar_alpha > 0.0 && cvar_alpha < 1.0) => {
                bad("cvar_alpha", cvar_alpha, "in (0, 1)")
            }
            _ => Ok(()),
        }
    }

    /// Returns a copy with one named hyperparameter replaced.
    pub fn with_param(&self, name: &str, value: f64) -> Result<Strategy> {
        let mut s = self.clone();
        let slot = match (&mut s, name) {
            (Strategy::VRed { beta } | Strategy::SemiVRed { beta }, "beta") => beta,
            (Strategy::GiFair { lambda }, "lambda") => lambda,
            (Strategy::QFfl { q }, "q") => q,
            (Strategy::Term { alpha }, "alpha") => alpha,
            (Strategy::Afl { gamma_lambda, .. }, "gamma_lambda") => gamma_lambda,
            (Strategy::PropFair { m, .. }, "m") => m,
            (Strategy::DeltaFl { cvar_alpha }, "cvar_alpha") => cvar_alpha,
            _ => {
                return Err(Error::Config(format!(
                    "strategy {} has no hyperparameter `{name}`",
                    self.tag()
                )))
            }
        };
        *slot = value;
        Ok(s)
    }
}

/// Result of one server combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateOutcome {
    /// Server step `Δ^(t)`; the update is `θ ← θ − Δ`.
    pub delta: Vec<f64>,
    /// Per-client weights `w_i` with `Δ = Σ w_i Δ_i`, when the strategy has that form.
    pub weights: Option<Vec<f64>>,
    /// `f̄ = Σ p_i f_i` over the reporting clients.
    pub mean_loss: f64,
    pub beta_max: Option<f64>,
}

struct Prepared<'a> {
    reports: Vec<&'a ClientReport>,
    p: Vec<f64>,
    losses: Vec<f64>,
    mean_loss: f64,
    mean_delta: Vec<f64>,
}

impl Prepared<'_> {
    fn deltas(&self) -> Vec<&[f64]> {
        self.reports.iter().map(|r| r.delta.as_slice()).collect()
    }

    fn equal_weights(&self) -> bool {
        let first = self.p[0];
        self.p.iter().all(|&v| (v - first).abs() <= 1e-12 * first)
    }
}

/// Sorts by client id, renormalizes `p` over the reporting set and computes
/// `f̄` and `Δ̄`.
fn prepare(reports: &[ClientReport]) -> Result<Prepared<'_>> {
    let first = reports
        .first()
        .ok_or_else(|| Error::invalid("no client reports to aggregate"))?;
    let d = first.delta.len();
    let mut sorted: Vec<&ClientReport> = reports.iter().collect();
    sorted.sort_by_key(|r| r.client_id);
    for w in sorted.windows(2) {
        if w[0].client_id == w[1].client_id {
            return Err(Error::invalid(format!("duplicate report from client {}", w[0].client_id)));
        }
    }
    for r in &sorted {
        if r.delta.len() != d {
            return Err(Error::ShapeMismatch {
                op: "aggregate",
                left: r.delta.len(),
                right: d,
            });
        }
        if !(r.weight > 0.0) || !r.loss_at_start.is_finite() {
            return Err(Error::invalid(format!(
                "client {} reported weight {} and loss {}",
                r.client_id, r.weight, r.loss_at_start
            )));
        }
    }
    let total: f64 = sorted.iter().map(|r| r.weight).sum();
    let p: Vec<f64> = sorted.iter().map(|r| r.weight / total).collect();
    let losses: Vec<f64> = sorted.iter().map(|r| r.loss_at_start).collect();
    let mean_loss = losses.iter().zip(&p).map(|(f, w)| f * w).sum();
    let deltas: Vec<&[f64]> = sorted.iter().map(|r| r.delta.as_slice()).collect();
    let mean_delta = numerics::weighted_sum(&deltas, &p)?;
    Ok(Prepared {
        reports: sorted,
        p,
        losses,
        mean_loss,
        mean_delta,
    })
}

/// `Δ = Σ p_i Δ_i`
pub fn fedavg_aggregate(reports: &[ClientReport]) -> Result<AggregateOutcome> {
    let prep = prepare(reports)?;
    Ok(AggregateOutcome {
        delta: prep.mean_delta,
        weights: Some(prep.p),
        mean_loss: prep.mean_loss,
        beta_max: None,
    })
}

fn regularized(reports: &[ClientReport], beta: f64, semi: bool) -> Result<AggregateOutcome> {
    if !(beta >= 0.0) {
        return Err(Error::invalid(format!("beta must be >= 0, got {beta}")));
    }
    let prep = prepare(reports)?;
    let mut delta = prep.mean_delta.clone();
    // Identical losses: the correction is exactly zero; skip the roundoff in f̄.
    let spread = prep.losses.iter().any(|&f| f != prep.losses[0]);
    for ((r, &p), &f) in prep.reports.iter().zip(&prep.p).zip(&prep.losses) {
        let gap = f - prep.mean_loss;
        let gap = if semi { gap.max(0.0) } else { gap };
        let coeff = 2.0 * beta * p * gap;
        if spread && coeff != 0.0 {
            let centered = numerics::sub(&r.delta, &prep.mean_delta)?;
            numerics::axpy(coeff, &centered, &mut delta)?;
        }
    }
    let (weights, beta_max) = if prep.equal_weights() {
        let (w, b) = if semi {
            semivred_weights(&prep.losses, beta)
        } else {
            vred_weights(&prep.losses, beta)
        };
        (Some(w), Some(b))
    } else {
        (None, None)
    };
    Ok(AggregateOutcome {
        delta,
        weights,
        mean_loss: prep.mean_loss,
        beta_max,
    })
}

/// Variance-regularized combination.
pub fn vred_aggregate(reports: &[ClientReport], beta: f64) -> Result<AggregateOutcome> {
    regularized(reports, beta, false)
}

/// Semi-variance-regularized combination: only clients above the mean loss
/// contribute a correction.
pub fn semivred_aggregate(reports: &[ClientReport], beta: f64) -> Result<AggregateOutcome> {
    regularized(reports, beta, true)
}

/// Strategy dispatcher. Holds the AFL mixture weights across rounds.
#[derive(Debug, Clone)]
pub struct Aggregator {
    strategy: Strategy,
    afl_lambda: Vec<f64>,
}

impl Aggregator {
    /// `client_weights` are the federation-wide `p_i`, indexed by client id.
    pub fn new(strategy: Strategy, client_weights: &[f64]) -> Result<Self> {
        strategy.validate()?;
        let afl_lambda = match &strategy {
            Strategy::Afl {
                initial_lambda: Some(l),
                ..
            } => {
                if l.len() != client_weights.len() {
                    return Err(Error::Config(format!(
                        "initial_lambda has {} entries for {} clients",
                        l.len(),
                        client_weights.len()
                    )));
                }
                l.clone()
            }
            _ => client_weights.to_vec(),
        };
        Ok(Self { strategy, afl_lambda })
    }

    pub fn strategy(&self) -> &Strategy {
        &self.strategy
    }

    pub fn afl_lambda(&self) -> &[f64] {
        &self.afl_lambda
    }

    pub fn aggregate(&mut self, reports: &[ClientReport]) -> Result<AggregateOutcome> {
        match self.strategy {
            Strategy::FedAvg => fedavg_aggregate(reports),
            Strategy::VRed { beta } => vred_aggregate(reports, beta),
            Strategy::SemiVRed { beta } => semivred_aggregate(reports, beta),
            Strategy::Afl { gamma_lambda, .. } => self.afl(reports, gamma_lambda),
            _ => {
                let prep = prepare(reports)?;
                let w = baseline_weights(&self.strategy, &prep.losses, &prep.p)?;
                Ok(AggregateOutcome {
                    delta: numerics::weighted_sum(&prep.deltas(), &w)?,
                    weights: Some(w),
                    mean_loss: prep.mean_loss,
                    beta_max: None,
                })
            }
        }
    }

    /// Ascent on the sampled clients' share of `λ`, preserving that share's mass.
    fn afl(&mut self, reports: &[ClientReport], gamma_lambda: f64) -> Result<AggregateOutcome> {
        let prep = prepare(reports)?;
        let ids: Vec<usize> = prep.reports.iter().map(|r| r.client_id).collect();
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.afl_lambda.len()) {
            return Err(Error::invalid(format!("client {bad} outside the AFL mixture")));
        }
        let mass: f64 = ids.iter().map(|&i| self.afl_lambda[i]).sum();
        let local: Vec<f64> = if mass > 0.0 {
            ids.iter().map(|&i| self.afl_lambda[i] / mass).collect()
        } else {
            vec![1.0 / ids.len() as f64; ids.len()]
        };
        let updated = afl_step(&local, &prep.losses, gamma_lambda)?;
        // a sampled set with no mixture mass uses the local step but leaves λ alone
        if mass > 0.0 {
            for (&i, &l) in ids.iter().zip(&updated) {
                self.afl_lambda[i] = l * mass;
            }
        }
        Ok(AggregateOutcome {
            delta: numerics::weighted_sum(&prep.deltas(), &updated)?,
            weights: Some(updated),
            mean_loss: prep.mean_loss,
            beta_max: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(id: usize, delta: Vec<f64>, loss: f64, weight: f64) -> ClientReport {
        ClientReport {
            client_id: id,
            delta,
            loss_at_start: loss,
            weight,
        }
    }

    #[test]
    fn fedavg_cases() {
        let v = vec![1.0, -2.0, 0.5];
        let same: Vec<_> = (0..3).map(|i| report(i, v.clone(), 0.3, 1.0 / 3.0)).collect();
        let out = fedavg_aggregate(&same).unwrap();
        for (a, b) in out.delta.iter().zip(&v) {
            assert!((a - b).abs() < 1e-15);
        }

        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        let out = fedavg_aggregate(&[report(0, v.clone(), 0.1, 0.5), report(1, neg, 0.2, 0.5)]).unwrap();
        assert!(out.delta.iter().all(|&x| x == 0.0));

        let reps = vec![
            report(0, vec![1.0, 2.0], 0.1, 0.2),
            report(1, vec![-3.0, 0.5], 0.2, 0.3),
            report(2, vec![0.25, 4.0], 0.3, 0.5),
        ];
        let out = fedavg_aggregate(&reps).unwrap();
        let expect = [0.2 - 0.9 + 0.125, 0.4 + 0.15 + 2.0];
        assert!((out.delta[0] - expect[0]).abs() < 1e-15 && (out.delta[1] - expect[1]).abs() < 1e-15);
        assert!((out.mean_loss - 0.23).abs() < 1e-15);
    }

    #[test]
    fn sampled_weights_are_renormalized() {
        let reps = vec![report(4, vec![1.0], 0.1, 0.1), report(2, vec![3.0], 0.2, 0.3)];
        let out = fedavg_aggregate(&reps).unwrap();
        let w = out.weights.unwrap();
        assert!((w[0] - 0.75).abs() < 1e-15 && (w[1] - 0.25).abs() < 1e-15);
        assert!((out.delta[0] - 2.5).abs() < 1e-15);
    }

    #[test]
    fn mismatched_dimensions_are_rejected() {
        let reps = vec![report(0, vec![1.0], 0.1, 0.5), report(1, vec![1.0, 2.0], 0.1, 0.5)];
        assert!(fedavg_aggregate(&reps).is_err());
        assert!(fedavg_aggregate(&[]).is_err());
        assert!(vred_aggregate(&reps[..1], -1.0).is_err());
        assert!(semivred_aggregate(&reps[..1], -1.0).is_err());
    }

    #[test]
    fn regularizers_vanish_without_spread_or_beta() {
        let reps = vec![
            report(0, vec![1.0, 2.0], 0.4, 0.2),
            report(1, vec![-3.0, 0.5], 0.4, 0.3),
            report(2, vec![0.25, 4.0], 0.4, 0.5),
        ];
        let base = fedavg_aggregate(&reps).unwrap().delta;
        assert_eq!(vred_aggregate(&reps, 3.0).unwrap().delta, base);
        assert_eq!(semivred_aggregate(&reps, 3.0).unwrap().delta, base);

        let mut spread = reps.clone();
        spread[1].loss_at_start = 1.3;
        let base = fedavg_aggregate(&spread).unwrap().delta;
        assert_eq!(vred_aggregate(&spread, 0.0).unwrap().delta, base);
        assert_eq!(semivred_aggregate(&spread, 0.0).unwrap().delta, base);
    }

    #[test]
    fn combine_rule_matches_closed_form_weights() {
        let f = [0.2, 0.5, 0.8];
        let deltas = [vec![1.0, 0.0, 2.0], vec![0.5, -1.0, 0.0], vec![-2.0, 3.0, 1.0]];
        let reps: Vec<_> = (0..3).map(|i| report(i, deltas[i].clone(), f[i], 1.0 / 3.0)).collect();
        for (out, w) in [
            (vred_aggregate(&reps, 0.5).unwrap(), vec![0.7 / 3.0, 1.0 / 3.0, 1.3 / 3.0]),
            (semivred_aggregate(&reps, 0.5).unwrap(), vec![0.3, 0.3, 0.4]),
        ] {
            let expect = numerics::weighted_sum(&deltas, &w).unwrap();
            assert!(numerics::relative_error(&out.delta, &expect).unwrap() < 1e-14);
            let reported = out.weights.unwrap();
            assert!(reported.iter().zip(&w).all(|(a, b)| (a - b).abs() < 1e-15));
            assert!(out.beta_max.is_some());
        }
        let mut uneven = reps.clone();
        uneven[0].weight = 0.5;
        let out = vred_aggregate(&uneven, 0.5).unwrap();
        assert!(out.weights.is_none() && out.beta_max.is_none());
    }

    #[test]
    fn afl_tracks_mixture_across_rounds() {
        let mut agg = Aggregator::new(Strategy::Afl { gamma_lambda: 1.0, initial_lambda: None }, &[0.5, 0.5]).unwrap();
        let reps = vec![report(0, vec![1.0], 0.1, 0.5), report(1, vec![-1.0], 0.6, 0.5)];
        let out = agg.aggregate(&reps).unwrap();
        let w = out.weights.unwrap();
        assert!((w[0] - 0.25).abs() < 1e-15 && (w[1] - 0.75).abs() < 1e-15);
        assert!((out.delta[0] + 0.5).abs() < 1e-15);
        let l = agg.afl_lambda();
        assert!((l[0] - 0.25).abs() < 1e-15 && (l[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn strategy_validation_and_params() {
        assert!(Strategy::VRed { beta: -1.0 }.validate().is_err());
        assert!(Strategy::DeltaFl { cvar_alpha: 1.0 }.validate().is_err());
        assert!(Strategy::Term { alpha: 0.0 }.validate().is_err());
        let s = Strategy::SemiVRed { beta: 0.1 }.with_param("beta", 0.5).unwrap();
        assert_eq!(s, Strategy::SemiVRed { beta: 0.5 });
        assert!(Strategy::FedAvg.with_param("beta", 0.5).is_err());
    }
}
