//! Client-side local SGD producing the pseudo-gradient `Δ_i = θ_start − θ_end`.

use serde::{Deserialize, Serialize};

use crate::datagen::{ClientDataset, Sample};
use crate::error::{Error, Result};
use crate::models::{self, ModelParams};
use crate::numerics::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalConfig {
    /// Explicit step count; `None` means one local epoch, `ceil(n_i / batch_size)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub eta: f64,
}

fn default_batch_size() -> usize {
    64
}

impl Default for LocalConfig {
    fn default() -> Self {
        Self {
            steps: None,
            batch_size: default_batch_size(),
            eta: 0.1,
        }
    }
}

impl LocalConfig {
    /// One full-batch gradient step; the pseudo-gradient is then `η∇f_i(θ)`.
    pub fn full_batch_step(eta: f64) -> Self {
        Self {
            steps: Some(1),
            batch_size: usize::MAX,
            eta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == Some(0) {
            return Err(Error::invalid("local step count must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(Error::invalid(format!("learning rate must be finite and >= 0, got {}", self.eta)));
        }
        Ok(())
    }

    pub fn steps_for(&self, n: usize) -> usize {
        self.steps.unwrap_or_else(|| n.div_ceil(self.batch_size).max(1))
    }
}

/// What a client sends back after local training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientReport {
    pub client_id: usize,
    /// `θ_start − θ_end`
    pub delta: Vec<f64>,
    /// `f_i(θ^(t))` on the full local train set.
    pub loss_at_start: f64,
    /// `p_i = n_i / N`
    pub weight: f64,
}

/// Runs `K` mini-batch SGD steps from the global parameters. Batches are
/// drawn without replacement within an epoch and reshuffled between
/// epochs; the final partial batch is kept. When the batch covers the whole
/// train set, samples are used in stored order and no randomness is drawn.
pub fn local_sgd(global: &ModelParams, client: &ClientDataset, cfg: &LocalConfig, rng: &mut Rng) -> Result<ClientReport> {
    cfg.validate()?;
    let train: &[Sample] = &client.train;
    if train.is_empty() {
        return Err(Error::invalid(format!("client {} has an empty train set", client.client_id)));
    }
    let class_weights = client.class_weights.as_deref();
    let n = train.len();
    let steps = cfg.steps_for(n);
    let loss_at_start = models::loss(global, train, class_weights)?;

    let mut params = global.clone();
    if cfg.batch_size >= n {
        for _ in 0..steps {
            let g = models::loss_and_grad(&params, train, class_weights)?;
            numerics::axpy(-cfg.eta, &g.grad, params.theta_mut())?;
        }
    } else {
        let mut order: Vec<usize> = (0..n).collect();
        let mut cursor = n;
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..steps {
            if cursor >= n {
                rng.shuffle(&mut order);
                cursor = 0;
            }
            let end = (cursor + cfg.batch_size).min(n);
            batch.clear();
            batch.extend(order[cursor..end].iter().map(|&i| train[i].clone()));
            cursor = end;
            // A shared-pool batch may hold only classes this client gives zero weight.
            if models::sample_weights(&batch, class_weights).is_none() {
                continue;
            }
            let g = models::loss_and_grad(&params, &batch, class_weights)?;
            numerics::axpy(-cfg.eta, &g.grad, params.theta_mut())?;
        }
    }

    let delta = numerics::sub(global.theta(), params.theta())?;
    Ok(ClientReport {
        client_id: client.client_id,
        delta,
        loss_at_start,
        weight: client.weight,
    })
}
