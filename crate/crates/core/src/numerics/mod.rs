//! Deterministic random streams and the small dense kernel shared by the
//! rest of the crate.

mod linalg;
mod rng;

pub use linalg::{axpy, dot, max_abs, norm2, relative_error, sub, weighted_sum, MatRef};
pub use rng::Rng;

use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};

/// Draws a point from the symmetric Dirichlet distribution by normalizing
/// `k` independent `Gamma(concentration, 1)` variates.
pub fn dirichlet_sample(rng: &mut Rng, concentration: f64, k: usize) -> Result<Vec<f64>> {
    if !(concentration > 0.0) || !concentration.is_finite() {
        return Err(Error::invalid(format!(
            "dirichlet concentration must be positive and finite, got {concentration}"
        )));
    }
    if k == 0 {
        return Err(Error::invalid("dirichlet dimension must be at least 1"));
    }
    let gamma = Gamma::new(concentration, 1.0)
        .map_err(|e| Error::invalid(format!("gamma({concentration}): {e}")))?;
    // Small shapes underflow to zero; floor keeps every entry strictly positive.
    let mut draws: Vec<f64> = (0..k)
        .map(|_| gamma.sample(rng).max(f64::MIN_POSITIVE))
        .collect();
    let total: f64 = draws.iter().sum();
    for v in &mut draws {
        *v = (*v / total).max(f64::MIN_POSITIVE);
    }
    Ok(draws)
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(z: &[f64]) -> Result<Vec<f64>> {
    if z.iter().any(|v| v.is_nan()) {
        return Err(Error::invalid("softmax input contains NaN"));
    }
    if z.is_empty() {
        return Err(Error::invalid("softmax of empty vector"));
    }
    let mut out = z.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// In-place softmax without input validation; returns log-sum-exp of the input.
pub(crate) fn softmax_in_place(z: &mut [f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in z.iter_mut() {
        *v /= total;
    }
    max + total.ln()
}

/// Central-difference gradient of `f` at `point`.
pub fn central_difference<F>(f: F, point: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut probe = point.to_vec();
    let mut grad = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        probe[i] = point[i] + eps;
        let plus = f(&probe);
        probe[i] = point[i] - eps;
        let minus = f(&probe);
        probe[i] = point[i];
        grad.push((plus - minus) / (2.0 * eps));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dirichlet_large_concentration_is_uniform() {
        let mut rng = Rng::new(1);
        let v = dirichlet_sample(&mut rng, 1e9, 4).unwrap();
        for x in &v {
            assert!((x - 0.25).abs() < 1e-3, "{v:?}");
        }
    }

    #[test]
    fn dirichlet_small_concentration_is_peaked() {
        let mut rng = Rng::new(7);
        let mut mean_max = 0.0;
        for _ in 0..1000 {
            let v = dirichlet_sample(&mut rng, 0.05, 10).unwrap();
            assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(v.iter().all(|&x| x > 0.0));
            mean_max += v.iter().copied().fold(0.0, f64::max);
        }
        mean_max /= 1000.0;
        assert!(mean_max > 0.5, "mean max entry {mean_max}");
    }

    #[test]
    fn dirichlet_rejects_bad_concentration() {
        let mut rng = Rng::new(1);
        assert!(dirichlet_sample(&mut rng, -1.0, 3).is_err());
        assert!(dirichlet_sample(&mut rng, 0.0, 3).is_err());
        assert!(dirichlet_sample(&mut rng, 1.0, 0).is_err());
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for v in &s {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax(&[1000.0, 0.0]).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-15 && s[1] >= 0.0 && s[1] < 1e-300);

        let z = [1.0f64, 2.0, 3.0];
        let denom: f64 = z.iter().map(|v| v.exp()).sum();
        let s = softmax(&z).unwrap();
        for (a, zi) in s.iter().zip(z) {
            assert!((a - zi.exp() / denom).abs() < 1e-12);
        }
        assert!(softmax(&[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn central_difference_on_quadratic() {
        let theta = [0.3, -1.2, 2.5];
        let g = central_difference(|t| 0.5 * t.iter().map(|v| v * v).sum::<f64>(), &theta, 1e-5)
            .unwrap();
        for (a, b) in g.iter().zip(theta) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!(central_difference(|_| 0.0, &theta, 0.0).is_err());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_is_a_distribution_and_shift_invariant(
                z in proptest::collection::vec(-1e6f64..1e6, 1..12),
                c in -1e3f64..1e3,
            ) {
                let s = softmax(&z).unwrap();
                prop_assert!(s.iter().all(|v| *v >= 0.0 && v.is_finite()));
                prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
                let t = softmax(&shifted).unwrap();
                for (a, b) in s.iter().zip(&t) {
                    prop_assert!((a - b).abs() < 1e-9);
                }
            }
        }
    }
}
