//! First-order reweightings for the baseline fair objectives and the
//! projected-ascent update of agnostic federated learning.

use crate::error::{Error, Result};

use super::Strategy;

/// Floor applied to `M − f_i` when PropFair clamping is on.
pub const PROPFAIR_FLOOR: f64 = 1e-6;

fn normalized(mut w: Vec<f64>, fallback: &[f64]) -> Vec<f64> {
    let total: f64 = w.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return fallback.to_vec();
    }
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// `ceil(fraction · n)` clamped to `1..=n`, tolerant of representation error
/// in the product.
pub fn tail_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n.max(1))
}

/// Weight vector realizing one gradient step of a baseline objective as a
/// combination of client pseudo-gradients. `p` must already be normalized.
pub fn baseline_weights(strategy: &Strategy, losses: &[f64], p: &[f64]) -> Result<Vec<f64>> {
    if losses.len() != p.len() {
        return Err(Error::ShapeMismatch {
            op: "baseline_weights",
            left: losses.len(),
            right: p.len(),
        });
    }
    if losses.iter().any(|f| !f.is_finite()) {
        return Err(Error::invalid("client losses must be finite"));
    }
    let n = losses.len();
    let uniform = losses.iter().all(|&f| f == losses[0]);
    if uniform && !matches!(strategy, Strategy::DeltaFl { .. } | Strategy::PropFair { .. }) {
        return Ok(p.to_vec());
    }
    let w = match *strategy {
        Strategy::FedAvg => p.to_vec(),
        Strategy::QFfl { q } => {
            let raw = losses
                .iter()
                .zip(p)
                .map(|(f, pi)| pi * (q + 1.0) * f.max(0.0).powf(q))
                .collect();
            normalized(raw, p)
        }
        Strategy::Term { alpha } => {
            let max = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let raw = losses
                .iter()
                .zip(p)
                .map(|(f, pi)| pi * (alpha * (f - max)).exp())
                .collect();
            normalized(raw, p)
        }
        Strategy::PropFair { m, clamp } => {
            let mut raw = Vec::with_capacity(n);
            for (i, (f, pi)) in losses.iter().zip(p).enumerate() {
                let mut gap = m - f;
                if gap < PROPFAIR_FLOOR {
                    if !clamp {
                        return Err(Error::invalid(format!(
                            "PropFair needs f_i < M, client {i} has loss {f} with M = {m}"
                        )));
                    }
                    log::warn!("PropFair: clamping M - f_{i} = {gap:e} to {PROPFAIR_FLOOR:e}");
                    gap = PROPFAIR_FLOOR;
                }
                raw.push(pi / gap);
            }
            if uniform {
                p.to_vec()
            } else {
                normalized(raw, p)
            }
        }
        Strategy::GiFair { lambda } => losses
            .iter()
            .zip(p)
            .map(|(fi, pi)| {
                let below = losses.iter().filter(|&&fj| fj < *fi).count() as f64;
                let above = losses.iter().filter(|&&fj| fj > *fi).count() as f64;
                pi + lambda * (below - above)
            })
            .collect(),
        Strategy::DeltaFl { cvar_alpha } => {
            let k = tail_count(cvar_alpha, n);
            let mut order: Vec<usize> = (0..n).collect();
            // descending loss, ascending index on ties
            order.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]).then(a.cmp(&b)));
            let mut w = vec![0.0; n];
            for &i in &order[..k] {
                w[i] = 1.0 / k as f64;
            }
            w
        }
        Strategy::VRed { .. } | Strategy::SemiVRed { .. } | Strategy::Afl { .. } => {
            return Err(Error::invalid(format!(
                "{} has no static baseline reweighting",
                strategy.tag()
            )))
        }
    };
    Ok(w)
}

/// Euclidean projection onto the probability simplex (sort and threshold).
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    if v.is_empty() {
        return Vec::new();
    }
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut tau = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cum += uj;
        let t = (cum - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            tau = t;
        }
    }
    v.iter().map(|x| (x - tau).max(0.0)).collect()
}

/// One projected-gradient-ascent step on the mixture weights:
/// `λ' = Proj_Δ(λ + γ_λ · f)`.
pub fn afl_step(lambda: &[f64], losses: &[f64], gamma_lambda: f64) -> Result<Vec<f64>> {
    if lambda.len() != losses.len() {
        return Err(Error::ShapeMismatch {
            op: "afl_step",
            left: lambda.len(),
            right: losses.len(),
        });
    }
    let shifted: Vec<f64> = lambda
        .iter()
        .zip(losses)
        .map(|(l, f)| l + gamma_lambda * f)
        .collect();
    Ok(project_simplex(&shifted))
}
