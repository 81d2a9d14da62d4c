//! Equal-weight closed forms for the per-client gradient weights of the
//! variance and semi-variance regularized objectives, with the largest
//! regularization weight that keeps every client weight positive.

fn mean(losses: &[f64]) -> f64 {
    losses.iter().sum::<f64>() / losses.len() as f64
}

fn all_equal(losses: &[f64]) -> bool {
    losses.windows(2).all(|w| w[0] == w[1])
}

/// `w_i = 1/n + 2β(f_i − f̄)/n`, with `β_max = 1 / (2(f̄ − min_i f_i))`.
pub fn vred_weights(losses: &[f64], beta: f64) -> (Vec<f64>, f64) {
    let n = losses.len() as f64;
    if losses.is_empty() {
        return (Vec::new(), f64::INFINITY);
    }
    let fbar = mean(losses);
    let weights = losses
        .iter()
        .map(|f| 1.0 / n + 2.0 * beta * (f - fbar) / n)
        .collect();
    let min = losses.iter().copied().fold(f64::INFINITY, f64::min);
    let gap = fbar - min;
    let beta_max = if all_equal(losses) || gap <= 0.0 {
        f64::INFINITY
    } else {
        1.0 / (2.0 * gap)
    };
    (weights, beta_max)
}

/// Indices of clients whose loss exceeds the mean.
pub fn above_mean(losses: &[f64]) -> Vec<usize> {
    if losses.is_empty() || all_equal(losses) {
        return Vec::new();
    }
    let fbar = mean(losses);
    (0..losses.len()).filter(|&i| losses[i] > fbar).collect()
}

/// Piecewise weights: with `S = Σ_{j above mean}(f_j − f̄)`,
/// `w_i = 1/n + 2β(f_i − f̄)/n − 2βS/n²` above the mean and
/// `w_i = 1/n − 2βS/n²` otherwise; `β_max = n / (2S)`.
pub fn semivred_weights(losses: &[f64], beta: f64) -> (Vec<f64>, f64) {
    if losses.is_empty() {
        return (Vec::new(), f64::INFINITY);
    }
    let n = losses.len() as f64;
    let fbar = mean(losses);
    let above = above_mean(losses);
    let excess: f64 = above.iter().map(|&j| losses[j] - fbar).sum();
    let shared = 2.0 * beta * excess / (n * n);
    let mut weights = vec![1.0 / n - shared; losses.len()];
    for &i in &above {
        weights[i] += 2.0 * beta * (losses[i] - fbar) / n;
    }
    let beta_max = if excess > 0.0 {
        n / (2.0 * excess)
    } else {
        f64::INFINITY
    };
    (weights, beta_max)
}
