//! Brute-force reference evaluations used to check the aggregation rules.
//!
//! Everything here is computed by direct summation of the objectives; this
//! module never calls into `aggregate`.

use crate::aggregate::Strategy;
use crate::datagen::{Federation, Sample};
use crate::error::{Error, Result};
use crate::models::{self, ModelParams};
use crate::numerics;

fn weighted_mean(values: &[f64], p: &[f64]) -> f64 {
    values.iter().zip(p).map(|(v, w)| v * w).sum()
}

/// `Σ p_i (f_i − f̄)²`
pub fn variance(losses: &[f64], p: &[f64]) -> f64 {
    let m = weighted_mean(losses, p);
    losses.iter().zip(p).map(|(f, w)| w * (f - m) * (f - m)).sum()
}

/// `Σ p_i (f_i − f̄)₊²`
pub fn semivariance(losses: &[f64], p: &[f64]) -> f64 {
    let m = weighted_mean(losses, p);
    losses
        .iter()
        .zip(p)
        .map(|(f, w)| {
            let g = (f - m).max(0.0);
            w * g * g
        })
        .sum()
}

/// Direct evaluation of a strategy's global objective from client losses.
pub fn eval_objective(strategy: &Strategy, losses: &[f64], p: &[f64]) -> Result<f64> {
    if losses.len() != p.len() || losses.is_empty() {
        return Err(Error::invalid("losses and weights must be nonempty and aligned"));
    }
    let mean = weighted_mean(losses, p);
    Ok(match *strategy {
        Strategy::FedAvg => mean,
        Strategy::VRed { beta } => mean + beta * variance(losses, p),
        Strategy::SemiVRed { beta } => mean + beta * semivariance(losses, p),
        Strategy::GiFair { lambda } => {
            let mut pairs = 0.0;
            for i in 0..losses.len() {
                for j in i + 1..losses.len() {
                    pairs += (losses[i] - losses[j]).abs();
                }
            }
            mean + lambda * pairs
        }
        Strategy::QFfl { q } => losses
            .iter()
            .zip(p)
            .map(|(f, w)| w * f.powf(q + 1.0) / (q + 1.0))
            .sum(),
        Strategy::Term { alpha } => {
            let s: f64 = losses.iter().zip(p).map(|(f, w)| w * (alpha * f).exp()).sum();
            s.ln() / alpha
        }
        Strategy::PropFair { m, .. } => {
            let mut total = 0.0;
            for (f, w) in losses.iter().zip(p) {
                if *f >= m {
                    return Err(Error::invalid(format!("PropFair objective undefined for loss {f} >= M = {m}")));
                }
                total -= w * (m - f).ln();
            }
            total
        }
        Strategy::Afl { .. } => losses.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        Strategy::DeltaFl { cvar_alpha } => {
            let n = losses.len();
            let k = ((cvar_alpha * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
            let mut sorted = losses.to_vec();
            sorted.sort_by(|a, b| b.total_cmp(a));
            sorted[..k].iter().sum::<f64>() / k as f64
        }
    })
}

/// Objective at `θ` with `f_i` the full train loss of each client.
pub fn eval_objective_at(strategy: &Strategy, params: &ModelParams, federation: &Federation) -> Result<f64> {
    let losses = federation
        .clients
        .iter()
        .map(|c| models::loss(params, &c.train, c.class_weights.as_deref()))
        .collect::<Result<Vec<f64>>>()?;
    eval_objective(strategy, &losses, &federation.weights())
}

/// Central-difference gradient of [`eval_objective_at`] over `θ`.
pub fn objective_gradient_fd(strategy: &Strategy, params: &ModelParams, federation: &Federation, eps: f64) -> Result<Vec<f64>> {
    // validate once so the closure below cannot fail on shape
    eval_objective_at(strategy, params, federation)?;
    numerics::central_difference(
        |theta| {
            let p = params.with_theta(theta).expect("same arch");
            eval_objective_at(strategy, &p, federation).unwrap_or(f64::NAN)
        },
        params.theta(),
        eps,
    )
}

/// Mean loss on each class of a shared pool, `ℓ̄_j(θ)`.
pub fn class_losses(params: &ModelParams, pool: &[Sample], num_classes: usize) -> Result<Vec<f64>> {
    (0..num_classes)
        .map(|j| {
            let class: Vec<Sample> = pool.iter().filter(|s| s.y == j).cloned().collect();
            if class.is_empty() {
                Ok(0.0)
            } else {
                models::loss(params, &class, None)
            }
        })
        .collect()
}

/// Class-decomposed semi-variance objective for label-shift federations:
/// `Σ_j P̄(j) ℓ̄_j + (β/n) Σ_i (Σ_j [P_i(j) − P̄(j)] ℓ̄_j)₊²`.
pub fn class_decomposition(params: &ModelParams, federation: &Federation, beta: f64) -> Result<f64> {
    if !federation.is_shared_pool() {
        return Err(Error::invalid("class decomposition needs a shared-pool federation"));
    }
    let pool = &federation.clients[0].train;
    if federation.clients.iter().any(|c| !std::sync::Arc::ptr_eq(&c.train, pool)) {
        return Err(Error::invalid("clients do not share one train pool"));
    }
    let n = federation.len() as f64;
    let c = federation.num_classes;
    let ell = class_losses(params, pool, c)?;
    let marginals: Vec<&[f64]> = federation
        .clients
        .iter()
        .map(|cl| cl.class_marginal.as_slice())
        .collect();
    let pbar: Vec<f64> = (0..c).map(|j| marginals.iter().map(|m| m[j]).sum::<f64>() / n).collect();
    let base: f64 = pbar.iter().zip(&ell).map(|(p, l)| p * l).sum();
    let reg: f64 = marginals
        .iter()
        .map(|m| {
            let shift: f64 = (0..c).map(|j| (m[j] - pbar[j]) * ell[j]).sum();
            let s = shift.max(0.0);
            s * s
        })
        .sum();
    Ok(base + beta / n * reg)
}

/// Closed-form semi-variance objective of the two-class federation where
/// client 0 favours class 0 and the other `n − 1` clients favour class 1.
pub fn label_shift_closed_form(ell1: f64, ell2: f64, n: usize, alpha: f64, beta: f64) -> f64 {
    let nf = n as f64;
    let fbar = (alpha / 2.0 + (1.0 - alpha) / nf) * ell1 + (alpha / 2.0 + (1.0 - alpha) * (nf - 1.0) / nf) * ell2;
    let d = (1.0 - alpha) * (ell1 - ell2);
    // client 0 alone above the mean when ell1 > ell2, otherwise the other n−1
    let mult = if ell1 >= ell2 { (nf - 1.0) * (nf - 1.0) } else { nf - 1.0 };
    fbar + beta * mult * d * d / (nf * nf * nf)
}

/// Equal-weight VRed objective in its unnormalized form
/// `Σ f_i + β Σ (f_i − f̄)²`.
pub fn vred_sum_form(losses: &[f64], beta: f64) -> f64 {
    let n = losses.len() as f64;
    let m = losses.iter().sum::<f64>() / n;
    losses.iter().sum::<f64>() + beta * losses.iter().map(|f| (f - m) * (f - m)).sum::<f64>()
}

/// The two upper bounds of the chain, over ordered pairs `i ≠ j`:
/// `(Σ f_i + (2β/n) Σ |f_i − f_j|², Σ f_i + (2β/n) Σ |f_i − f_j|)`.
pub fn gifair_bounds(losses: &[f64], beta: f64) -> (f64, f64) {
    let n = losses.len() as f64;
    let (mut sq, mut abs) = (0.0, 0.0);
    for (i, fi) in losses.iter().enumerate() {
        for (j, fj) in losses.iter().enumerate() {
            if i != j {
                sq += (fi - fj) * (fi - fj);
                abs += (fi - fj).abs();
            }
        }
    }
    let s: f64 = losses.iter().sum();
    (s + 2.0 * beta / n * sq, s + 2.0 * beta / n * abs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{label_shift_partition, make_gaussian_mixture, shared_pool_clients};
    use crate::models::Arch;
    use crate::numerics::Rng;

    const F: [f64; 3] = [0.2, 0.5, 0.8];
    const P: [f64; 3] = [1.0 / 3.0; 3];

    #[test]
    fn reference_objective_values() {
        let v = eval_objective(&Strategy::VRed { beta: 0.5 }, &F, &P).unwrap();
        assert!((v - 0.53).abs() < 1e-15);
        let s = eval_objective(&Strategy::SemiVRed { beta: 0.5 }, &F, &P).unwrap();
        assert!((s - 0.515).abs() < 1e-15);
    }

    #[test]
    fn label_shift_closed_form_value() {
        let v = label_shift_closed_form(1.0, 0.5, 4, 0.2, 1.0);
        assert!((v - 0.6725).abs() < 1e-12);
        let direct = eval_objective(&Strategy::SemiVRed { beta: 1.0 }, &[0.95, 0.55, 0.55, 0.55], &[0.25; 4]).unwrap();
        assert!((v - direct).abs() < 1e-12);
        // the other branch: classes reversed in difficulty
        let f1 = 0.9 * 0.5 + 0.1 * 1.0;
        let f2 = 0.1 * 0.5 + 0.9 * 1.0;
        let direct = eval_objective(&Strategy::SemiVRed { beta: 1.0 }, &[f1, f2, f2, f2], &[0.25; 4]).unwrap();
        assert!((label_shift_closed_form(0.5, 1.0, 4, 0.2, 1.0) - direct).abs() < 1e-12);
    }

    #[test]
    fn fedavg_gradient_is_weighted_client_gradient() {
        let mut rng = Rng::new(5);
        let pool = make_gaussian_mixture(&mut rng, 3, 2, 20, 1.0).unwrap();
        let fed = crate::datagen::dirichlet_partition(&mut rng, &pool, 3, 1.0, 0.5).unwrap();
        let params = ModelParams::init(&mut rng, Arch::SoftmaxRegression { inputs: 2, classes: 3 });
        let g = objective_gradient_fd(&Strategy::FedAvg, &params, &fed, 1e-5).unwrap();
        let mut expect = vec![0.0; params.len()];
        for c in &fed.clients {
            let gi = models::finite_diff_grad(&params, &c.train, None, 1e-5).unwrap();
            numerics::axpy(c.weight, &gi, &mut expect).unwrap();
        }
        assert!(numerics::max_abs(&numerics::sub(&g, &expect).unwrap()) < 1e-8);
        let g0 = objective_gradient_fd(&Strategy::VRed { beta: 0.0 }, &params, &fed, 1e-5).unwrap();
        assert!(numerics::max_abs(&numerics::sub(&g, &g0).unwrap()) < 1e-12);
    }

    #[test]
    fn class_decomposition_matches_direct_semivariance() {
        let mut rng = Rng::new(6);
        let pool = make_gaussian_mixture(&mut rng, 3, 2, 15, 1.0).unwrap();
        let params = ModelParams::init(&mut rng, Arch::SoftmaxRegression { inputs: 2, classes: 3 });
        let marginals = vec![vec![0.7, 0.2, 0.1], vec![0.1, 0.1, 0.8], vec![0.3, 0.4, 0.3], vec![0.0, 1.0, 0.0]];
        let fed = shared_pool_clients(&pool, &marginals).unwrap();
        for beta in [0.0, 0.3, 2.0] {
            let direct = eval_objective_at(&Strategy::SemiVRed { beta }, &params, &fed).unwrap();
            let decomposed = class_decomposition(&params, &fed, beta).unwrap();
            assert!((direct - decomposed).abs() < 1e-12);
        }

        let same = shared_pool_clients(&pool, &vec![pool.class_marginal(); 3]).unwrap();
        let ell = class_losses(&params, pool.samples(), 3).unwrap();
        let base: f64 = pool.class_marginal().iter().zip(&ell).map(|(p, l)| p * l).sum();
        assert!((class_decomposition(&params, &same, 5.0).unwrap() - base).abs() < 1e-12);

        let two = make_gaussian_mixture(&mut rng, 2, 2, 15, 1.0).unwrap();
        let params2 = ModelParams::init(&mut rng, Arch::SoftmaxRegression { inputs: 2, classes: 2 });
        let ex = label_shift_partition(&two, 4, 0.2).unwrap();
        let ell = class_losses(&params2, two.samples(), 2).unwrap();
        let closed = label_shift_closed_form(ell[0], ell[1], 4, 0.2, 1.0);
        assert!((class_decomposition(&params2, &ex, 1.0).unwrap() - closed).abs() < 1e-12);
    }

    #[test]
    fn class_decomposition_rejects_plain_federations() {
        let mut rng = Rng::new(7);
        let pool = make_gaussian_mixture(&mut rng, 2, 2, 20, 1.0).unwrap();
        let fed = crate::datagen::dirichlet_partition(&mut rng, &pool, 2, 1.0, 0.5).unwrap();
        let params = ModelParams::zeros(Arch::SoftmaxRegression { inputs: 2, classes: 2 });
        assert!(class_decomposition(&params, &fed, 1.0).is_err());
    }

    #[test]
    fn propfair_domain_error() {
        assert!(eval_objective(&Strategy::PropFair { m: 1.0, clamp: true }, &[0.5, 1.5], &[0.5, 0.5]).is_err());
    }
}
