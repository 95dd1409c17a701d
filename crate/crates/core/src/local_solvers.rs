//! Client-side K-step optimizers.
//!
//! Every solver reports the end point it actually reached (`x_end`) and the
//! uncorrected local model (`x_local`), obtained by removing the displacement
//! contributed by the correction term. Contraction is measured on the
//! uncorrected model against the client's fixed optimum.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{check_dim, ModelVector};
use crate::objectives::ClientObjective;
use crate::seed;

/// Distance growth (relative to the starting distance) treated as divergence.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalMethod {
    ExactSolve,
    Gd,
    Sgd,
    Nesterov,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalSolverConfig {
    pub method: LocalMethod,
    pub steps: usize,
    pub local_lr: f64,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub noise_seed: u64,
    /// Fixed Nesterov momentum; `None` uses the `k/(k+3)` schedule.
    #[serde(default)]
    pub momentum: Option<f64>,
    /// Fold SGD sampling noise into the correction instead of the local model.
    #[serde(default)]
    pub noise_as_correction: bool,
}

impl LocalSolverConfig {
    pub fn new(method: LocalMethod, steps: usize, local_lr: f64) -> Self {
        Self {
            method,
            steps,
            local_lr,
            batch_size: None,
            noise_seed: 0,
            momentum: None,
            noise_as_correction: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("solver.steps", "must be a positive integer"));
        }
        if !(self.local_lr > 0.0) || !self.local_lr.is_finite() {
            return Err(Error::config("solver.local_lr", "must be a finite number > 0"));
        }
        if self.batch_size == Some(0) {
            return Err(Error::config("solver.batch_size", "must be positive"));
        }
        if self.method == LocalMethod::Sgd && self.batch_size.is_none() {
            return Err(Error::config("solver.batch_size", "required for sgd"));
        }
        if let Some(m) = self.momentum {
            if !(0.0..1.0).contains(&m) {
                return Err(Error::config("solver.momentum", "must lie in [0, 1)"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LocalRunResult {
    /// Point actually reached after K steps.
    pub x_end: ModelVector,
    /// `x_end` minus the correction displacement.
    pub x_local: ModelVector,
    pub sigma: f64,
    pub delta_start: ModelVector,
    pub delta_end: ModelVector,
    /// Per-step correction direction `h` (zero if none).
    pub correction: ModelVector,
    /// Total displacement added by the correction, `local_lr * K * h`
    /// (plus folded SGD noise when requested).
    pub applied_correction: ModelVector,
    pub noise_aggregate: ModelVector,
    pub sigma_exceeds_one: bool,
}

fn divergence_guard(x: &ModelVector, optimum: &ModelVector, scale: f64, iteration: usize) -> Result<()> {
    let dist = (x - optimum).norm();
    if !dist.is_finite() || dist > DIVERGENCE_FACTOR * scale {
        return Err(Error::Divergence { iteration });
    }
    Ok(())
}

/// Run `cfg.steps` local steps from `x_start`, adding `local_lr * h` to each.
pub fn run_local(
    obj: &ClientObjective,
    x_start: &ModelVector,
    cfg: &LocalSolverConfig,
    correction: Option<&ModelVector>,
) -> Result<LocalRunResult> {
    cfg.validate()?;
    let d = obj.dim();
    check_dim(d, x_start)?;
    if let Some(h) = correction {
        check_dim(d, h)?;
    }
    let optimum = obj.optimum().ok_or(Error::UnresolvedOptimum)?.clone();
    let h = correction.cloned().unwrap_or_else(|| ModelVector::zeros(d));
    let lr = cfg.local_lr;
    let delta_start = x_start - &optimum;
    let start_norm = delta_start.norm();
    let scale = if start_norm > 0.0 { start_norm } else { 1.0 };
    let mut noise = ModelVector::zeros(d);

    let x_end = match cfg.method {
        LocalMethod::ExactSolve => &optimum + &h * (lr * cfg.steps as f64),
        LocalMethod::Gd => {
            let mut x = x_start.clone();
            for k in 0..cfg.steps {
                let g = obj.gradient(&x)?;
                x.axpy(-lr, &g, 1.0);
                x.axpy(lr, &h, 1.0);
                divergence_guard(&x, &optimum, scale, k + 1)?;
            }
            x
        }
        LocalMethod::Nesterov => {
            let mut x = x_start.clone();
            let mut prev = x_start.clone();
            for k in 0..cfg.steps {
                let m = cfg.momentum.unwrap_or(k as f64 / (k as f64 + 3.0));
                let y = &x + (&x - &prev) * m;
                let g = obj.gradient(&y)?;
                let mut next = y;
                next.axpy(-lr, &g, 1.0);
                next.axpy(lr, &h, 1.0);
                prev = std::mem::replace(&mut x, next);
                divergence_guard(&x, &optimum, scale, k + 1)?;
            }
            x
        }
        LocalMethod::Sgd => {
            let ClientObjective::Logistic(l) = obj else {
                return Err(Error::UnsupportedObjective(
                    "sgd needs a sample-based (logistic) objective".into(),
                ));
            };
            let n = l.num_samples();
            let batch = cfg.batch_size.unwrap_or(n);
            if batch > n {
                return Err(Error::config(
                    "solver.batch_size",
                    format!("batch size {batch} exceeds local dataset size {n}"),
                ));
            }
            let full_batch = batch == n;
            let all: Vec<usize> = (0..n).collect();
            let mut rng = seed::rng(cfg.noise_seed, &[seed::STREAM_LOCAL]);
            let mut x = x_start.clone();
            for k in 0..cfg.steps {
                let g = if full_batch {
                    l.batch_gradient(&x, &all)?
                } else {
                    let mut rows = index::sample(&mut rng, n, batch).into_vec();
                    rows.sort_unstable();
                    let gb = l.batch_gradient(&x, &rows)?;
                    let gf = l.gradient(&x)?;
                    noise.axpy(-lr, &(&gb - &gf), 1.0);
                    gb
                };
                x.axpy(-lr, &g, 1.0);
                x.axpy(lr, &h, 1.0);
                divergence_guard(&x, &optimum, scale, k + 1)?;
            }
            x
        }
    };

    let mut applied = &h * (lr * cfg.steps as f64);
    if cfg.noise_as_correction {
        applied += &noise;
    }
    let x_local = &x_end - &applied;
    let delta_end = &x_local - &optimum;
    let sigma = if start_norm == 0.0 {
        0.0
    } else {
        delta_end.norm() / start_norm
    };
    Ok(LocalRunResult {
        x_end,
        x_local,
        sigma,
        delta_start,
        delta_end,
        correction: h,
        applied_correction: applied,
        noise_aggregate: noise,
        sigma_exceeds_one: sigma > 1.0,
    })
}

/// Empirical contraction factor for each K in `ks`, from a common start.
pub fn sigma_order_check(
    obj: &ClientObjective,
    x_start: &ModelVector,
    base: &LocalSolverConfig,
    ks: &[usize],
) -> Result<Vec<(usize, f64)>> {
    ks.iter()
        .map(|&k| {
            let cfg = LocalSolverConfig {
                steps: k,
                ..base.clone()
            };
            run_local(obj, x_start, &cfg, None).map(|r| (k, r.sigma))
        })
        .collect()
}
