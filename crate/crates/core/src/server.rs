//! Server side of a round: client sampling, pseudo-gradient aggregation and
//! the global update rules.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{check_dim, weighted_sum, ModelVector};
use crate::local_solvers::LocalRunResult;
use crate::objectives::ClientPopulation;
use crate::seed;

/// Floor applied to the adaptive divisor.
pub const PHI_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParticipationMode {
    #[default]
    All,
    UniformFraction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightRule {
    Uniform,
    ProportionalToSamples,
    /// The population's own weights, renormalized over the sampled set.
    #[default]
    #[serde(alias = "population")]
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticipationPolicy {
    #[serde(default)]
    pub mode: ParticipationMode,
    #[serde(default = "one")]
    pub fraction: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub weight_rule: WeightRule,
}

fn one() -> f64 {
    1.0
}

impl Default for ParticipationPolicy {
    fn default() -> Self {
        Self {
            mode: ParticipationMode::All,
            fraction: 1.0,
            seed: 0,
            weight_rule: WeightRule::Custom,
        }
    }
}

impl ParticipationPolicy {
    pub fn uniform_fraction(fraction: f64, seed: u64) -> Self {
        Self {
            mode: ParticipationMode::UniformFraction,
            fraction,
            seed,
            weight_rule: WeightRule::Custom,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::config("participation.fraction", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// The sampled client set of round `t` (sorted) and its renormalized weights.
pub fn sample_round(
    pop: &ClientPopulation,
    policy: &ParticipationPolicy,
    t: usize,
) -> Result<(Vec<usize>, Vec<f64>)> {
    policy.validate()?;
    let n = pop.len();
    if n == 0 {
        return Err(Error::Empty("population"));
    }
    let clients: Vec<usize> = match policy.mode {
        ParticipationMode::All => (0..n).collect(),
        ParticipationMode::UniformFraction => {
            let m = (policy.fraction * n as f64).round() as usize;
            if m == 0 {
                return Err(Error::config(
                    "participation.fraction",
                    format!("fraction {} selects no client out of {n}", policy.fraction),
                ));
            }
            let mut rng = seed::rng(policy.seed, &[seed::STREAM_SAMPLING, t as u64]);
            let mut picked = index::sample(&mut rng, n, m.min(n)).into_vec();
            picked.sort_unstable();
            picked
        }
    };
    if policy.mode == ParticipationMode::All && policy.weight_rule == WeightRule::Custom {
        return Ok((clients, pop.weights().to_vec()));
    }
    let raw: Vec<f64> = match policy.weight_rule {
        WeightRule::Uniform => vec![1.0; clients.len()],
        WeightRule::Custom => clients.iter().map(|&i| pop.weights()[i]).collect(),
        WeightRule::ProportionalToSamples => clients
            .iter()
            .map(|&i| {
                pop.client(i).num_samples().map(|s| s as f64).ok_or_else(|| {
                    Error::config(
                        "participation.weight_rule",
                        "proportional_to_samples needs sample-based clients",
                    )
                })
            })
            .collect::<Result<_>>()?,
    };
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) {
        return Err(Error::config("participation.weight_rule", "sampled clients carry zero total weight"));
    }
    Ok((clients, raw.iter().map(|w| w / total).collect()))
}

/// Weighted pseudo-gradient of a round and the aggregated correction.
#[derive(Debug, Clone)]
pub struct PseudoGradient {
    /// `sum_i rho_i (x_t - x_local_i)`.
    pub value: ModelVector,
    pub clients: Vec<usize>,
    pub weights: Vec<f64>,
    /// `sum_i rho_i * applied_correction_i`.
    pub correction: ModelVector,
}

pub fn aggregate(
    clients: &[usize],
    results: &[LocalRunResult],
    weights: &[f64],
    x_t: &ModelVector,
) -> Result<PseudoGradient> {
    if results.len() != weights.len() {
        return Err(Error::LengthMismatch {
            what: "results/weights",
            left: results.len(),
            right: weights.len(),
        });
    }
    if clients.len() != results.len() {
        return Err(Error::LengthMismatch {
            what: "clients/results",
            left: clients.len(),
            right: results.len(),
        });
    }
    for r in results {
        check_dim(x_t.len(), &r.x_local)?;
    }
    let diffs: Vec<ModelVector> = results.iter().map(|r| x_t - &r.x_local).collect();
    let corr: Vec<ModelVector> = results.iter().map(|r| r.applied_correction.clone()).collect();
    Ok(PseudoGradient {
        value: weighted_sum(&diffs, weights)?,
        clients: clients.to_vec(),
        weights: weights.to_vec(),
        correction: weighted_sum(&corr, weights)?,
    })
}

/// A scalar hyper-parameter as a function of the round index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Schedule {
    Constant(f64),
    /// Linear interpolation from `start` at `from_round` to `end` at
    /// `to_round`, constant outside that window.
    Linear {
        start: f64,
        end: f64,
        from_round: usize,
        to_round: usize,
    },
}

impl Schedule {
    pub fn at(&self, t: usize) -> f64 {
        match *self {
            Schedule::Constant(v) => v,
            Schedule::Linear {
                start,
                end,
                from_round,
                to_round,
            } => {
                if t <= from_round {
                    start
                } else if t >= to_round {
                    end
                } else {
                    let s = (t - from_round) as f64 / (to_round - from_round) as f64;
                    start + (end - start) * s
                }
            }
        }
    }

    fn range(&self) -> (f64, f64) {
        match *self {
            Schedule::Constant(v) => (v, v),
            Schedule::Linear { start, end, .. } => (start.min(end), start.max(end)),
        }
    }

    pub fn validate_unit(&self, field: &str) -> Result<()> {
        let (lo, hi) = self.range();
        if !(lo >= 0.0 && hi <= 1.0) {
            return Err(Error::config(field, "must stay within [0, 1]"));
        }
        Ok(())
    }

    pub fn validate_positive(&self, field: &str) -> Result<()> {
        let (lo, hi) = self.range();
        if !(lo > 0.0) || !hi.is_finite() {
            return Err(Error::config(field, "must stay > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub x: ModelVector,
    pub round: usize,
    /// Momentum buffer `d^{t-1}`.
    pub momentum: ModelVector,
    /// Adaptive second-moment accumulator `v_{t-1}`.
    pub accumulator: ModelVector,
}

impl ServerState {
    pub fn new(x0: ModelVector) -> Self {
        let d = x0.len();
        Self {
            x: x0,
            round: 0,
            momentum: ModelVector::zeros(d),
            accumulator: ModelVector::zeros(d),
        }
    }

    fn advanced(&self, x: ModelVector) -> Self {
        Self {
            x,
            round: self.round + 1,
            momentum: self.momentum.clone(),
            accumulator: self.accumulator.clone(),
        }
    }
}

/// `x_{t+1} = x_t - G` (unit global step).
pub fn step_fedavg(state: &ServerState, g: &PseudoGradient) -> ServerState {
    state.advanced(&state.x - &g.value)
}

/// `x_{t+1} = x_t - eta (G - H)`.
pub fn step_dc(state: &ServerState, g: &PseudoGradient, eta: f64) -> ServerState {
    state.advanced(&state.x - (&g.value - &g.correction) * eta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptiveMode {
    /// `phi = 1`.
    #[default]
    None,
    /// `phi = sqrt(v_t)` per coordinate.
    Elementwise,
    /// `phi = ||sqrt(v_t)|| / sqrt(d)`, a single divisor.
    Scalar,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaParams {
    pub eta: f64,
    pub nu: f64,
    pub beta: f64,
    pub beta2: f64,
    pub mode: AdaptiveMode,
}

/// What the adaptive step used, for the diagnostics of the same round.
#[derive(Debug, Clone)]
pub struct SaStepInfo {
    /// The scalar divisor (1 unless `mode == Scalar`).
    pub phi: f64,
    /// `eta / phi`.
    pub eta_phi: f64,
    pub momentum_prev: ModelVector,
}

/// Quasi-hyperbolic momentum step with optional adaptive scaling.
pub fn step_sa(state: &ServerState, g: &PseudoGradient, p: &SaParams) -> (ServerState, SaStepInfo) {
    let gv = &g.value;
    let d = gv * (1.0 - p.beta) + &state.momentum * p.beta;
    let v = gv.component_mul(gv) * p.beta2 + &state.accumulator * (1.0 - p.beta2);
    let direction = gv * (1.0 - p.nu) + &d * p.nu;
    let (x_next, phi) = match p.mode {
        AdaptiveMode::None => (&state.x - direction * p.eta, 1.0),
        AdaptiveMode::Scalar => {
            let rms = (v.sum() / v.len() as f64).sqrt();
            let phi = rms.max(PHI_FLOOR);
            (&state.x - direction * (p.eta / phi), phi)
        }
        AdaptiveMode::Elementwise => {
            let scaled = direction.zip_map(&v, |dir, vi| dir / vi.sqrt().max(PHI_FLOOR));
            (&state.x - scaled * p.eta, 1.0)
        }
    };
    let info = SaStepInfo {
        phi,
        eta_phi: p.eta / phi,
        momentum_prev: state.momentum.clone(),
    };
    let next = ServerState {
        x: x_next,
        round: state.round + 1,
        momentum: d,
        accumulator: v,
    };
    (next, info)
}

/// Where DC rounds take their per-client correction from.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorrectionSource {
    #[default]
    None,
    /// Control variates: `h_i = c_i - c` where `c_i` is the client's last
    /// average local gradient and `c` the mean over all clients.
    Scaffold,
    /// `h_i = gamma (x*_S - x_t) / (local_lr K)` from the known optima.
    Oracle { gamma: f64 },
}

/// Per-client control variates, zero-initialized.
#[derive(Debug, Clone)]
pub struct ControlVariates {
    client: Vec<ModelVector>,
}

impl ControlVariates {
    pub fn new(num_clients: usize, dim: usize) -> Self {
        Self {
            client: vec![ModelVector::zeros(dim); num_clients],
        }
    }

    pub fn global(&self) -> ModelVector {
        let mut c = ModelVector::zeros(self.client[0].len());
        for ci in &self.client {
            c += ci;
        }
        c / self.client.len() as f64
    }

    pub fn corrections(&self, sampled: &[usize]) -> Vec<ModelVector> {
        let c = self.global();
        sampled.iter().map(|&i| &self.client[i] - &c).collect()
    }

    /// `c_i <- (x_t - x_local_i) / (local_lr K)` for each sampled client.
    pub fn update(&mut self, sampled: &[usize], results: &[LocalRunResult], x_t: &ModelVector, local_lr: f64, steps: usize) {
        let scale = local_lr * steps as f64;
        for (&i, r) in sampled.iter().zip(results) {
            self.client[i] = (x_t - &r.x_local) / scale;
        }
    }
}

/// Oracle correction for one client; zero when `local_lr * K` is zero.
pub fn oracle_correction(x_t: &ModelVector, center: &ModelVector, gamma: f64, local_lr: f64, steps: usize) -> ModelVector {
    let scale = local_lr * steps as f64;
    if scale == 0.0 {
        return ModelVector::zeros(x_t.len());
    }
    (center - x_t) * (gamma / scale)
}
