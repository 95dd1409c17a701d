//! Randomized property suites over the distance identities, the decoupling
//! equality, the expected-descent interval and the objective lower bound.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::ModelVector;
use crate::local_solvers::{run_local, LocalMethod, LocalSolverConfig};
use crate::objectives::{global_objective, lower_bound, Averaging, ClientObjective, ClientPopulation, QuadraticObjective};
use crate::seed::{self, SimRng};
use crate::server::{aggregate, step_dc, step_fedavg, step_sa, AdaptiveMode, SaParams, ServerState};
use crate::theory::{
    decoupling_check, expected_descent_bounds, verify_corrected_distance, verify_fedavg_distance,
    verify_momentum_distance, ClientRoundRecord, RandomFamily, SelectorMode, IDENTITY_TOLERANCE,
};

/// Allowed `sigma_delta_gap`: the two routes to `||dK||^2` agree to
/// rounding on the scale of the summed client offsets.
pub const GAP_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    FedavgDistance,
    CorrectedDistance,
    MomentumDistance,
    Decoupling,
    Bounds,
    LowerBound,
    All,
}

impl Suite {
    /// Canonical names; numbered aliases `theorem2`..`theorem4` are also accepted.
    pub const NAMES: [&'static str; 7] = ["fedavg", "corrected", "momentum", "decoupling", "bounds", "lowerbound", "all"];

    pub fn default_trials(self) -> usize {
        match self {
            Suite::FedavgDistance | Suite::CorrectedDistance | Suite::MomentumDistance => 1000,
            Suite::Decoupling => 100_000,
            Suite::Bounds => 100,
            Suite::LowerBound => 10_000,
            Suite::All => 0,
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "theorem2" | "fedavg" => Suite::FedavgDistance,
            "theorem3" | "corrected" => Suite::CorrectedDistance,
            "theorem4" | "momentum" => Suite::MomentumDistance,
            "decoupling" => Suite::Decoupling,
            "bounds" => Suite::Bounds,
            "lowerbound" => Suite::LowerBound,
            "all" => Suite::All,
            other => {
                return Err(Error::config(
                    "suite",
                    format!("unknown suite `{other}`, expected one of {}", Suite::NAMES.join(", ")),
                ))
            }
        })
    }
}

/// One line of a suite's pass/fail table.
#[derive(Debug, Clone, Serialize)]
pub struct SuiteRow {
    pub name: String,
    pub cases: usize,
    pub failures: usize,
    /// Worst value of the row's metric.
    pub worst: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl fmt::Display for SuiteRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<32} {:>4} cases={:<7} failures={:<5} worst={:<12.4e} threshold={:.1e}",
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.cases,
            self.failures,
            self.worst,
            self.threshold
        )
    }
}

/// Run a suite. `trials = None` uses the suite default.
pub fn run_suite(suite: Suite, seed_value: u64, trials: Option<usize>) -> Result<Vec<SuiteRow>> {
    if trials == Some(0) {
        return Err(Error::Empty("trials"));
    }
    let n = trials.unwrap_or(suite.default_trials());
    let mut rng = seed::rng(seed_value, &[suite as u64]);
    match suite {
        Suite::FedavgDistance => fedavg_suite(n, &mut rng),
        Suite::CorrectedDistance => corrected_suite(n, &mut rng),
        Suite::MomentumDistance => momentum_suite(n, &mut rng),
        Suite::Decoupling => decoupling_suite(n, &mut rng),
        Suite::Bounds => bounds_suite(n, &mut rng),
        Suite::LowerBound => lower_bound_suite(n, &mut rng),
        Suite::All => {
            let mut rows = Vec::new();
            for s in [
                Suite::FedavgDistance,
                Suite::CorrectedDistance,
                Suite::MomentumDistance,
                Suite::Decoupling,
                Suite::Bounds,
                Suite::LowerBound,
            ] {
                rows.extend(run_suite(s, seed_value, trials)?);
            }
            Ok(rows)
        }
    }
}

fn gaussian(d: usize, scale: f64, rng: &mut SimRng) -> ModelVector {
    ModelVector::from_fn(d, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

/// Random SPD quadratic with spectrum roughly in `[0.1, 5]`.
pub fn random_quadratic(d: usize, center: ModelVector, rng: &mut SimRng) -> Result<QuadraticObjective> {
    let b = DMatrix::from_fn(d, d, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z
    });
    let shift = rng.random_range(0.1..1.0);
    let q = b.transpose() * &b / d as f64 + DMatrix::identity(d, d) * shift;
    QuadraticObjective::new(center, q, rng.random_range(0.0..2.0))
}

/// Positive weights summing to one.
pub fn random_weights(n: usize, rng: &mut SimRng) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|w| w / s).collect()
}

/// A randomized round: clients, starting model and local solver settings.
#[derive(Debug, Clone)]
pub struct RandomRound {
    pub clients: Vec<ClientObjective>,
    pub weights: Vec<f64>,
    pub x_t: ModelVector,
    pub solvers: Vec<LocalSolverConfig>,
}

impl RandomRound {
    pub fn dim(&self) -> usize {
        self.x_t.len()
    }

    pub fn optima(&self) -> Vec<ModelVector> {
        self.clients.iter().map(|c| c.optimum().expect("quadratic").clone()).collect()
    }

    /// `sum_i rho_i x*_i`.
    pub fn weighted_center(&self) -> ModelVector {
        let mut c = ModelVector::zeros(self.dim());
        for (o, w) in self.optima().iter().zip(&self.weights) {
            c.axpy(*w, o, 1.0);
        }
        c
    }
}

/// Dimension from {2, 10, 50}, 1..=20 clients, mixed local solvers.
pub fn random_round(rng: &mut SimRng) -> Result<RandomRound> {
    let d = [2, 10, 50][rng.random_range(0..3)];
    let n = rng.random_range(1..=20);
    let spread = rng.random_range(0.1..10.0);
    let mut clients = Vec::with_capacity(n);
    let mut solvers = Vec::with_capacity(n);
    for _ in 0..n {
        let q = random_quadratic(d, gaussian(d, spread, rng), rng)?;
        let lmax = q.lambda_max();
        let method = [LocalMethod::ExactSolve, LocalMethod::Gd, LocalMethod::Nesterov][rng.random_range(0..3)];
        let lr = match method {
            LocalMethod::Gd => rng.random_range(0.05..1.9) / lmax,
            _ => rng.random_range(0.05..1.0) / lmax,
        };
        solvers.push(LocalSolverConfig::new(method, rng.random_range(1..=10), lr));
        clients.push(ClientObjective::from(q));
    }
    Ok(RandomRound {
        clients,
        weights: random_weights(n, rng),
        x_t: gaussian(d, rng.random_range(0.1..20.0), rng),
        solvers,
    })
}

/// Run every client of `round` from `x_t` with per-client corrections.
pub fn local_records(
    round: &RandomRound,
    corrections: Option<&[ModelVector]>,
) -> Result<(Vec<ClientRoundRecord>, crate::server::PseudoGradient)> {
    let results = round
        .clients
        .iter()
        .zip(&round.solvers)
        .enumerate()
        .map(|(i, (c, s))| run_local(c, &round.x_t, s, corrections.map(|h| &h[i])))
        .collect::<Result<Vec<_>>>()?;
    let ids: Vec<usize> = (0..round.clients.len()).collect();
    let g = aggregate(&ids, &results, &round.weights, &round.x_t)?;
    let records = results
        .iter()
        .enumerate()
        .map(|(i, r)| ClientRoundRecord::from_result(i, round.clients[i].optimum().expect("quadratic").clone(), round.weights[i], r))
        .collect();
    Ok((records, g))
}

fn identity_row(name: &str, residuals: &[f64]) -> SuiteRow {
    let failures = residuals.iter().filter(|&&r| !(r <= IDENTITY_TOLERANCE)).count();
    SuiteRow {
        name: name.into(),
        cases: residuals.len(),
        failures,
        worst: residuals.iter().cloned().fold(0.0, f64::max),
        threshold: IDENTITY_TOLERANCE,
        passed: failures == 0,
    }
}

fn gap_row(gaps: &[f64]) -> SuiteRow {
    let failures = gaps.iter().filter(|&&g| !(g <= GAP_TOLERANCE)).count();
    SuiteRow {
        name: "descent vs dK consistency".into(),
        cases: gaps.len(),
        failures,
        worst: gaps.iter().cloned().fold(0.0, f64::max),
        threshold: GAP_TOLERANCE,
        passed: failures == 0,
    }
}

fn fedavg_suite(trials: usize, rng: &mut SimRng) -> Result<Vec<SuiteRow>> {
    let mut residuals = Vec::with_capacity(trials);
    for _ in 0..trials {
        let round = random_round(rng)?;
        let (records, g) = local_records(&round, None)?;
        let next = step_fedavg(&ServerState::new(round.x_t.clone()), &g);
        residuals.push(verify_fedavg_distance(&round.x_t, &next.x, &records)?.identity.relative_residual);
    }
    Ok(vec![identity_row("fedavg-distance identity", &residuals)])
}

fn corrected_suite(trials: usize, rng: &mut SimRng) -> Result<Vec<SuiteRow>> {
    let mut residuals = Vec::with_capacity(trials);
    let mut gaps = Vec::with_capacity(trials);
    let (mut effective, mut improved) = (0usize, 0usize);
    for _ in 0..trials {
        let round = random_round(rng)?;
        let eta = 1.0 - rng.random::<f64>();
        let oracle = rng.random::<bool>();
        let n = round.clients.len();
        let corrections: Vec<ModelVector> = if oracle {
            let gamma = rng.random_range(0.05..1.0);
            let toward = (round.weighted_center() - &round.x_t) * gamma;
            round
                .solvers
                .iter()
                .map(|s| &toward / (s.local_lr * s.steps as f64))
                .collect()
        } else {
            let scale = rng.random_range(0.01..5.0);
            (0..n).map(|_| gaussian(round.dim(), scale, rng)).collect()
        };
        let (records, g) = local_records(&round, Some(&corrections))?;
        let next = step_dc(&ServerState::new(round.x_t.clone()), &g, eta);
        let diag = verify_corrected_distance(&round.x_t, &next.x, &records, eta)?;
        residuals.push(diag.identity.relative_residual);
        gaps.push(diag.sigma_delta_gap);
        if oracle && diag.effective {
            effective += 1;
            if diag.identity.observed <= diag.counterfactual * (1.0 + 1e-12) {
                improved += 1;
            }
        }
    }
    let rate = if effective == 0 { 1.0 } else { improved as f64 / effective as f64 };
    Ok(vec![
        identity_row("corrected-distance identity", &residuals),
        gap_row(&gaps),
        SuiteRow {
            name: "effective correction helps".into(),
            cases: effective,
            failures: effective - improved,
            worst: rate,
            threshold: 0.99,
            passed: rate >= 0.99,
        },
    ])
}

fn momentum_suite(trials: usize, rng: &mut SimRng) -> Result<Vec<SuiteRow>> {
    let mut residuals = Vec::with_capacity(trials);
    let mut gaps = Vec::with_capacity(trials);
    for _ in 0..trials {
        let round = random_round(rng)?;
        let d = round.dim();
        let (records, g) = local_records(&round, None)?;
        let mut state = ServerState::new(round.x_t.clone());
        state.momentum = gaussian(d, rng.random_range(0.0..5.0), rng);
        state.accumulator = gaussian(d, 1.0, rng).map(|v| v * v);
        let params = SaParams {
            eta: rng.random_range(0.01..1.0),
            nu: rng.random::<f64>(),
            beta: rng.random::<f64>(),
            beta2: rng.random_range(0.5..1.0),
            mode: AdaptiveMode::Scalar,
        };
        let (next, info) = step_sa(&state, &g, &params);
        let diag = verify_momentum_distance(
            &round.x_t,
            &next.x,
            &records,
            info.eta_phi,
            params.nu,
            params.beta,
            &info.momentum_prev,
        )?;
        residuals.push(diag.identity.relative_residual);
        gaps.push(diag.sigma_delta_gap);
    }
    Ok(vec![identity_row("momentum-distance identity", &residuals), gap_row(&gaps)])
}

/// Zero-diagonal random matrix.
fn hollow_matrix(n: usize, rng: &mut SimRng) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { rng.random_range(-1.0..1.0) })
}

/// Ten randomized families, cycling through the distribution kinds.
pub fn random_family(k: usize, rng: &mut SimRng) -> RandomFamily {
    let n = rng.random_range(2..=6);
    let d = rng.random_range(1..=4);
    match k % 3 {
        0 => RandomFamily::Gaussian {
            means: (0..n).map(|_| gaussian(d, 1.0, rng)).collect(),
            stds: (0..n).map(|_| rng.random_range(0.1..2.0)).collect(),
        },
        1 => RandomFamily::Rademacher {
            scales: (0..n).map(|_| gaussian(d, 1.0, rng)).collect(),
        },
        _ => {
            let lo: Vec<ModelVector> = (0..n).map(|_| gaussian(d, 1.0, rng)).collect();
            let hi = lo.iter().map(|l| l.map(|v| v + rng.random_range(0.1..2.0))).collect();
            RandomFamily::UniformBox { lo, hi }
        }
    }
}

fn decoupling_suite(trials: usize, rng: &mut SimRng) -> Result<Vec<SuiteRow>> {
    let mut failures = 0;
    let mut worst: f64 = 0.0;
    for k in 0..10 {
        let family = random_family(k, rng);
        let a = hollow_matrix(family.len(), rng);
        let report = decoupling_check(&a, &family, trials, SelectorMode::Sampled, rng)?;
        let z = if report.mc_stderr > 0.0 { report.difference.abs() / report.mc_stderr } else { 0.0 };
        worst = worst.max(z);
        if !report.within_tolerance {
            failures += 1;
        }
    }
    let mut point_err: f64 = 0.0;
    for _ in 0..10 {
        let n = rng.random_range(2..=8);
        let d = rng.random_range(1..=5);
        let family = RandomFamily::PointMass((0..n).map(|_| gaussian(d, 1.0, rng)).collect());
        let a = hollow_matrix(n, rng);
        let r = decoupling_check(&a, &family, 1, SelectorMode::Exact, rng)?;
        point_err = point_err.max(r.difference.abs() / r.mc_lhs.abs().max(1.0));
    }
    Ok(vec![
        SuiteRow {
            name: "decoupling (3 stderr)".into(),
            cases: 10,
            failures,
            worst,
            threshold: 3.0,
            passed: failures == 0,
        },
        SuiteRow {
            name: "decoupling point mass".into(),
            cases: 10,
            failures: usize::from(point_err > 1e-12),
            worst: point_err,
            threshold: 1e-12,
            passed: point_err <= 1e-12,
        },
    ])
}

/// Round records whose starting offsets share a direction, so every
/// pairwise cosine is positive.
pub fn aligned_records(rng: &mut SimRng) -> Vec<ClientRoundRecord> {
    let d = rng.random_range(2..=6);
    let n = rng.random_range(2..=8);
    let mut axis = gaussian(d, 1.0, rng);
    axis /= axis.norm();
    let weights = random_weights(n, rng);
    let x_t = gaussian(d, 3.0, rng);
    (0..n)
        .map(|i| {
            let offset = (&axis + gaussian(d, 0.3, rng)) * rng.random_range(0.5..3.0);
            let optimum = &x_t - offset;
            ClientRoundRecord::from_points(i, optimum.clone(), weights[i], &x_t, &optimum)
        })
        .collect()
}

fn bounds_suite(configs: usize, rng: &mut SimRng) -> Result<Vec<SuiteRow>> {
    let mut inside = 0;
    let mut applicable = 0;
    while applicable < configs {
        let records = aligned_records(rng);
        let report = expected_descent_bounds(&records, 4000, rng)?;
        if !report.applicable {
            continue;
        }
        applicable += 1;
        if report.in_bounds {
            inside += 1;
        }
    }
    let rate = inside as f64 / configs as f64;
    Ok(vec![SuiteRow {
        name: "expected descent in bounds".into(),
        cases: configs,
        failures: configs - inside,
        worst: rate,
        threshold: 0.95,
        passed: rate >= 0.95,
    }])
}

/// A population of random quadratics in `d` dimensions.
pub fn random_population(d: usize, n: usize, rng: &mut SimRng) -> Result<ClientPopulation> {
    let spread = rng.random_range(0.1..5.0);
    let clients = (0..n)
        .map(|_| random_quadratic(d, gaussian(d, spread, rng), rng).map(ClientObjective::from))
        .collect::<Result<Vec<_>>>()?;
    ClientPopulation::uniform(clients)
}

/// Isotropic population with a shared curvature.
pub fn random_isotropic_population(d: usize, n: usize, rng: &mut SimRng) -> Result<ClientPopulation> {
    let scale = rng.random_range(0.2..4.0);
    let clients = (0..n)
        .map(|_| {
            QuadraticObjective::isotropic(gaussian(d, 2.0, rng), scale, rng.random_range(0.0..1.0))
                .map(ClientObjective::from)
        })
        .collect::<Result<Vec<_>>>()?;
    ClientPopulation::uniform(clients)
}

fn lower_bound_suite(trials: usize, rng: &mut SimRng) -> Result<Vec<SuiteRow>> {
    let mut violations = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let d = rng.random_range(1..=5);
        let pop = random_population(d, rng.random_range(1..=10), rng)?;
        let x = gaussian(d, 5.0, rng);
        let f = global_objective(&pop, &x, Averaging::Uniform)?;
        let lb = lower_bound(&pop, &x)?;
        let excess = (lb - f) / f.abs().max(1.0);
        worst = worst.max(excess);
        if excess > 1e-12 {
            violations += 1;
        }
    }
    let cases = (trials / 10).max(1);
    let mut eq_err: f64 = 0.0;
    for _ in 0..cases {
        let d = rng.random_range(1..=5);
        let pop = random_isotropic_population(d, rng.random_range(1..=10), rng)?;
        let centroid = crate::linalg::centroid(&pop.optima()?)?;
        let f = global_objective(&pop, &centroid, Averaging::Uniform)?;
        let lb = lower_bound(&pop, &centroid)?;
        eq_err = eq_err.max((f - lb).abs() / f.abs().max(1.0));
    }
    Ok(vec![
        SuiteRow {
            name: "lower bound never exceeds F".into(),
            cases: trials,
            failures: violations,
            worst,
            threshold: 1e-12,
            passed: violations == 0,
        },
        SuiteRow {
            name: "isotropic equality at centroid".into(),
            cases,
            failures: usize::from(eq_err > 1e-9),
            worst: eq_err,
            threshold: 1e-9,
            passed: eq_err <= 1e-9,
        },
    ])
}
