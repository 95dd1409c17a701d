//! Per-round distance identities and the quantities they are built from.
//!
//! All functions here are pure functions of a round snapshot: the model
//! before and after the server step and one [`ClientRoundRecord`] per
//! participating client.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{centroid, cosine, ModelVector};
use crate::local_solvers::LocalRunResult;
use crate::seed::SimRng;

/// Default relative tolerance of the identity checks.
pub const IDENTITY_TOLERANCE: f64 = 1e-9;

/// What one client contributed to one round.
#[derive(Debug, Clone)]
pub struct ClientRoundRecord {
    pub client: usize,
    pub optimum: ModelVector,
    /// `x_t - x*_i`.
    pub delta_start: ModelVector,
    /// `x_local - x*_i`.
    pub delta_end: ModelVector,
    pub sigma: f64,
    pub weight: f64,
    /// Total correction displacement this client added.
    pub applied_correction: ModelVector,
}

impl ClientRoundRecord {
    pub fn from_result(client: usize, optimum: ModelVector, weight: f64, r: &LocalRunResult) -> Self {
        Self {
            client,
            optimum,
            delta_start: r.delta_start.clone(),
            delta_end: r.delta_end.clone(),
            sigma: r.sigma,
            weight,
            applied_correction: r.applied_correction.clone(),
        }
    }

    /// Record for a client whose local model is `x_local`.
    pub fn from_points(client: usize, optimum: ModelVector, weight: f64, x_t: &ModelVector, x_local: &ModelVector) -> Self {
        let delta_start = x_t - &optimum;
        let delta_end = x_local - &optimum;
        let n = delta_start.norm();
        let sigma = if n == 0.0 { 0.0 } else { delta_end.norm() / n };
        Self {
            client,
            delta_start,
            delta_end,
            sigma,
            weight,
            applied_correction: ModelVector::zeros(optimum.len()),
            optimum,
        }
    }
}

/// `A_ij = cos(d_i, d_j) - s_i s_j cos(dK_i, dK_j)`, diagonal `1 - s_i^2`.
pub fn compute_a(records: &[ClientRoundRecord]) -> DMatrix<f64> {
    let n = records.len();
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n {
        let ri = &records[i];
        a[(i, i)] = 1.0 - ri.sigma * ri.sigma;
        for j in (i + 1)..n {
            let rj = &records[j];
            let v = cosine(&ri.delta_start, &rj.delta_start)
                - ri.sigma * rj.sigma * cosine(&ri.delta_end, &rj.delta_end);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
    a
}

/// `sum_ij rho_i rho_j ||d_i|| ||d_j|| A_ij`, positive meaning descent.
pub fn compute_descent(records: &[ClientRoundRecord]) -> f64 {
    descent_from_a(records, &compute_a(records))
}

pub fn descent_from_a(records: &[ClientRoundRecord], a: &DMatrix<f64>) -> f64 {
    let scaled: Vec<f64> = records.iter().map(|r| r.weight * r.delta_start.norm()).collect();
    let mut total = 0.0;
    for (i, si) in scaled.iter().enumerate() {
        for (j, sj) in scaled.iter().enumerate() {
            total += si * sj * a[(i, j)];
        }
    }
    total
}

/// `sum_i rho_i x*_i`.
pub fn weighted_center(records: &[ClientRoundRecord]) -> Result<ModelVector> {
    let first = records.first().ok_or(Error::Empty("round records"))?;
    let mut c = ModelVector::zeros(first.optimum.len());
    for r in records {
        c.axpy(r.weight, &r.optimum, 1.0);
    }
    Ok(c)
}

/// Weighted pseudo-gradient recomputed from the records,
/// `sum_i rho_i (d_i - dK_i)`.
pub fn pseudo_gradient(records: &[ClientRoundRecord]) -> Result<ModelVector> {
    let first = records.first().ok_or(Error::Empty("round records"))?;
    let mut g = ModelVector::zeros(first.optimum.len());
    for r in records {
        g.axpy(r.weight, &(&r.delta_start - &r.delta_end), 1.0);
    }
    Ok(g)
}

fn aggregated_correction(records: &[ClientRoundRecord]) -> ModelVector {
    let mut h = ModelVector::zeros(records[0].optimum.len());
    for r in records {
        h.axpy(r.weight, &r.applied_correction, 1.0);
    }
    h
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct IdentityCheck {
    pub observed: f64,
    pub predicted: f64,
    pub residual: f64,
    pub relative_residual: f64,
}

impl IdentityCheck {
    fn new(observed: f64, predicted: f64, scale: f64) -> Self {
        let residual = (observed - predicted).abs();
        Self {
            observed,
            predicted,
            residual,
            relative_residual: residual / scale,
        }
    }

    pub fn holds(&self, tol: f64) -> bool {
        self.relative_residual <= tol
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct FedavgDistanceCheck {
    pub descent: f64,
    pub descent_prefactored: f64,
    pub start_distance_sq: f64,
    #[serde(flatten)]
    pub identity: IdentityCheck,
}

/// Check `||x_{t+1} - x*_S||^2 = ||x_t - x*_S||^2 - descent` for a round
/// with unit global step and no correction.
pub fn verify_fedavg_distance(x_t: &ModelVector, x_next: &ModelVector, records: &[ClientRoundRecord]) -> Result<FedavgDistanceCheck> {
    if records.iter().any(|r| r.applied_correction.norm() > 0.0) {
        return Err(Error::Inapplicable("round carries a correction term".into()));
    }
    let center = weighted_center(records)?;
    let start = (x_t - &center).norm_squared();
    let descent = compute_descent(records);
    let observed = (x_next - &center).norm_squared();
    let n = records.len() as f64;
    Ok(FedavgDistanceCheck {
        descent,
        descent_prefactored: descent / (n * n),
        start_distance_sq: start,
        identity: IdentityCheck::new(observed, start - descent, start.max(1.0)),
    })
}

/// Coefficients of the corrected-update distance.
#[derive(Debug, Clone, Serialize)]
pub struct DcDiagnostics {
    pub eta: f64,
    pub descent: f64,
    /// `2 (1 - eta) (1 - cos(dK, d) sigma_delta)`.
    pub contraction_coef: f64,
    /// `-eta sigma_delta cos(dK, H) + (eta - 1) cos(d, H)`.
    pub alignment_coef: f64,
    /// `2 alignment ||d|| - eta ||H||`; positive means the correction helps.
    pub gain_coef: f64,
    pub sigma_delta: f64,
    /// `|(||d||^2 - descent) - ||dK||^2|`, relative.
    pub sigma_delta_gap: f64,
    /// `d = 0`; the identity was checked with the direct expansion instead.
    pub sigma_delta_degenerate: bool,
    pub correction_norm: f64,
    pub effective: bool,
    /// Norm condition plus `(1 - eta) / (eta sigma_delta) cos(d, H) < cos(dK, H)`.
    pub literal_direction_condition: bool,
    /// `||x_t - eta G - x*_S||^2`, the same round without correction.
    pub counterfactual: f64,
    #[serde(flatten)]
    pub identity: IdentityCheck,
}

/// Cosines and norms shared by the corrected and momentum identities.
struct SplitGeometry {
    delta: ModelVector,
    delta_k: ModelVector,
    norm: f64,
    sigma_delta: f64,
    sigma_delta_gap: f64,
    degenerate: bool,
    cos_k_delta: f64,
}

/// `sigma_delta = ||dK|| / ||d||`. The radicand form
/// `sqrt(||d||^2 - descent) / ||d||` agrees in exact arithmetic but loses
/// half the digits when `dK` is small, so it is only reported through
/// `sigma_delta_gap`, the disagreement of the squares relative to
/// `(sum_i rho_i ||d_i||)^2`.
fn split_geometry(x_t: &ModelVector, records: &[ClientRoundRecord], descent: f64) -> Result<SplitGeometry> {
    let center = weighted_center(records)?;
    let delta = x_t - &center;
    let delta_k = &delta - pseudo_gradient(records)?;
    let norm = delta.norm();
    let radicand = delta.norm_squared() - descent;
    let spread: f64 = records.iter().map(|r| r.weight * r.delta_start.norm()).sum();
    let sigma_delta_gap = (radicand - delta_k.norm_squared()).abs() / (spread * spread).max(1.0);
    let degenerate = norm == 0.0;
    let sigma_delta = if degenerate { 0.0 } else { delta_k.norm() / norm };
    let cos_k_delta = cosine(&delta_k, &delta);
    Ok(SplitGeometry {
        delta,
        delta_k,
        norm,
        sigma_delta,
        sigma_delta_gap,
        degenerate,
        cos_k_delta,
    })
}

/// Corrected update `x_{t+1} = x_t - eta (G - H)`.
pub fn verify_corrected_distance(x_t: &ModelVector, x_next: &ModelVector, records: &[ClientRoundRecord], eta: f64) -> Result<DcDiagnostics> {
    let descent = compute_descent(records);
    let geo = split_geometry(x_t, records, descent)?;
    let h = aggregated_correction(records);
    let h_norm = h.norm();
    let cos_d_h = cosine(&geo.delta, &h);
    let cos_k_h = cosine(&geo.delta_k, &h);
    let s = geo.sigma_delta;
    let d2 = geo.norm * geo.norm;

    let contraction = 2.0 * (1.0 - eta) * (1.0 - geo.cos_k_delta * s);
    let alignment = -eta * s * cos_k_h + (eta - 1.0) * cos_d_h;
    let gain = 2.0 * alignment * geo.norm - eta * h_norm;
    let predicted = if geo.degenerate {
        // direct expansion of ||(1 - eta) d + eta dK + eta H||^2
        let dk = geo.delta_k.norm();
        (1.0 - eta).powi(2) * d2
            + eta * eta * dk * dk
            + eta * eta * h_norm * h_norm
            + 2.0 * eta * (1.0 - eta) * geo.delta.dot(&geo.delta_k)
            + 2.0 * eta * (1.0 - eta) * geo.delta.dot(&h)
            + 2.0 * eta * eta * geo.delta_k.dot(&h)
    } else {
        (1.0 - eta * contraction) * d2 - eta * (eta * descent + gain * h_norm)
    };

    let center = x_t - &geo.delta;
    let observed = (x_next - &center).norm_squared();
    let counterfactual = (&geo.delta - pseudo_gradient(records)? * eta).norm_squared();
    let literal_direction_condition = h_norm < 2.0 * (alignment / eta) * geo.norm
        && (1.0 - eta) / (eta * s) * cos_d_h < cos_k_h;
    Ok(DcDiagnostics {
        eta,
        descent,
        contraction_coef: contraction,
        alignment_coef: alignment,
        gain_coef: gain,
        sigma_delta: s,
        sigma_delta_gap: geo.sigma_delta_gap,
        sigma_delta_degenerate: geo.degenerate,
        correction_norm: h_norm,
        effective: h_norm > 0.0 && gain > 0.0,
        literal_direction_condition,
        counterfactual,
        identity: IdentityCheck::new(observed, predicted, d2.max(observed).max(1.0)),
    })
}

/// Coefficients of the momentum/adaptive update distance (scalar divisor).
#[derive(Debug, Clone, Serialize)]
pub struct SaDiagnostics {
    pub eta_phi: f64,
    /// `eta_phi (1 - nu beta)`.
    pub eta_hat: f64,
    /// `-eta_phi nu beta`.
    pub eta_mom: f64,
    pub descent: f64,
    /// `2 eta_hat (1 - eta_hat) (1 - cos(dK, d) sigma_delta)`.
    pub contraction_coef: f64,
    /// `-eta_hat sigma_delta cos(dK, m) + (eta_hat - 1) cos(d, m)`.
    pub alignment_coef: f64,
    /// `eta_mom ||m|| - 2 alignment ||d||`.
    pub gain_coef: f64,
    pub sigma_delta: f64,
    pub sigma_delta_gap: f64,
    pub sigma_delta_degenerate: bool,
    pub momentum_prev_norm: f64,
    #[serde(flatten)]
    pub identity: IdentityCheck,
}

/// Update `x_{t+1} = x_t - eta_phi [(1 - nu) G + nu ((1 - beta) G + beta m)]`
/// with `m` the previous momentum buffer.
pub fn verify_momentum_distance(
    x_t: &ModelVector,
    x_next: &ModelVector,
    records: &[ClientRoundRecord],
    eta_phi: f64,
    nu: f64,
    beta: f64,
    momentum_prev: &ModelVector,
) -> Result<SaDiagnostics> {
    let descent = compute_descent(records);
    let geo = split_geometry(x_t, records, descent)?;
    let eta_hat = eta_phi * (1.0 - nu * beta);
    let eta_mom = -eta_phi * nu * beta;
    let m_norm = momentum_prev.norm();
    let cos_d_m = cosine(&geo.delta, momentum_prev);
    let cos_k_m = cosine(&geo.delta_k, momentum_prev);
    let s = geo.sigma_delta;
    let d2 = geo.norm * geo.norm;

    let contraction = 2.0 * eta_hat * (1.0 - eta_hat) * (1.0 - geo.cos_k_delta * s);
    let alignment = -eta_hat * s * cos_k_m + (eta_hat - 1.0) * cos_d_m;
    let gain = eta_mom * m_norm - 2.0 * alignment * geo.norm;
    let predicted = if geo.degenerate {
        let dk = geo.delta_k.norm();
        (1.0 - eta_hat).powi(2) * d2
            + eta_hat * eta_hat * dk * dk
            + eta_mom * eta_mom * m_norm * m_norm
            + 2.0 * eta_hat * (1.0 - eta_hat) * geo.delta.dot(&geo.delta_k)
            + 2.0 * eta_mom * (1.0 - eta_hat) * geo.delta.dot(momentum_prev)
            + 2.0 * eta_mom * eta_hat * geo.delta_k.dot(momentum_prev)
    } else {
        (1.0 - contraction) * d2 - eta_hat * eta_hat * descent - eta_phi * nu * beta * gain * m_norm
    };
    let center = x_t - &geo.delta;
    let observed = (x_next - &center).norm_squared();
    Ok(SaDiagnostics {
        eta_phi,
        eta_hat,
        eta_mom,
        descent,
        contraction_coef: contraction,
        alignment_coef: alignment,
        gain_coef: gain,
        sigma_delta: s,
        sigma_delta_gap: geo.sigma_delta_gap,
        sigma_delta_degenerate: geo.degenerate,
        momentum_prev_norm: m_norm,
        identity: IdentityCheck::new(observed, predicted, d2.max(observed).max(1.0)),
    })
}

/// Mean half pairwise distance of the optima.
pub fn region_radius(optima: &[ModelVector]) -> Result<f64> {
    let n = optima.len();
    if n < 2 {
        return Err(Error::UndefinedRegion(n));
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                total += (&optima[j] - &optima[i]).norm();
            }
        }
    }
    Ok(total / (2.0 * n as f64 * (n as f64 - 1.0)))
}

/// Center (unweighted centroid) and radius of the oscillatory region.
#[derive(Debug, Clone)]
pub struct Region {
    pub center: ModelVector,
    pub radius: f64,
}

impl Region {
    pub fn from_optima(optima: &[ModelVector]) -> Result<Self> {
        Ok(Self {
            radius: region_radius(optima)?,
            center: centroid(optima)?,
        })
    }

    pub fn distance(&self, x: &ModelVector) -> f64 {
        (x - &self.center).norm()
    }

    pub fn contains(&self, x: &ModelVector) -> bool {
        self.distance(x) <= self.radius
    }
}

pub fn in_region(x: &ModelVector, optima: &[ModelVector]) -> Result<bool> {
    Ok(Region::from_optima(optima)?.contains(x))
}

/// `cos(x - a, x - b)`: zero on the sphere with diameter `ab`, positive
/// outside, negative inside.
pub fn boundary_cosine_check(x: &ModelVector, a: &ModelVector, b: &ModelVector) -> f64 {
    cosine(&(x - a), &(x - b))
}

/// Mean of `cos(d_i, d_j)` over unordered pairs.
pub fn mean_pairwise_cosine(records: &[ClientRoundRecord]) -> Result<f64> {
    let deltas: Vec<&ModelVector> = records.iter().map(|r| &r.delta_start).collect();
    mean_pairwise_cosine_of(&deltas)
}

pub fn mean_pairwise_cosine_of(deltas: &[&ModelVector]) -> Result<f64> {
    let n = deltas.len();
    if n < 2 {
        return Err(Error::Inapplicable("pairwise cosine needs two clients".into()));
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            total += cosine(deltas[i], deltas[j]);
        }
    }
    Ok(total / (n * (n - 1) / 2) as f64)
}

/// Independent random vectors `X_1..X_n` for the decoupling check.
#[derive(Debug, Clone)]
pub enum RandomFamily {
    /// Deterministic vectors.
    PointMass(Vec<ModelVector>),
    /// `X_i ~ N(mean_i, std_i^2 I)`.
    Gaussian { means: Vec<ModelVector>, stds: Vec<f64> },
    /// `X_i = scale_i .* eps` with independent signs.
    Rademacher { scales: Vec<ModelVector> },
    /// `X_i` uniform in the axis-aligned box `[lo_i, hi_i]`.
    UniformBox { lo: Vec<ModelVector>, hi: Vec<ModelVector> },
}

impl RandomFamily {
    pub fn len(&self) -> usize {
        match self {
            RandomFamily::PointMass(v) => v.len(),
            RandomFamily::Gaussian { means, .. } => means.len(),
            RandomFamily::Rademacher { scales } => scales.len(),
            RandomFamily::UniformBox { lo, .. } => lo.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_deterministic(&self) -> bool {
        matches!(self, RandomFamily::PointMass(_))
    }

    pub fn sample(&self, rng: &mut SimRng) -> Vec<ModelVector> {
        match self {
            RandomFamily::PointMass(v) => v.clone(),
            RandomFamily::Gaussian { means, stds } => means
                .iter()
                .zip(stds)
                .map(|(m, s)| m.map(|c| {
                    let z: f64 = StandardNormal.sample(rng);
                    c + s * z
                }))
                .collect(),
            RandomFamily::Rademacher { scales } => scales
                .iter()
                .map(|s| s.map(|c| if rng.random::<bool>() { c } else { -c }))
                .collect(),
            RandomFamily::UniformBox { lo, hi } => lo
                .iter()
                .zip(hi)
                .map(|(l, h)| l.zip_map(h, |a, b| a + (b - a) * rng.random::<f64>()))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectorMode {
    /// Draw Bernoulli(1/2) membership each trial.
    Sampled,
    /// Average over all `2^n` memberships (n <= 16).
    Exact,
}

#[derive(Debug, Clone, Serialize)]
pub struct DecouplingReport {
    pub trials: usize,
    pub mc_lhs: f64,
    pub mc_rhs: f64,
    /// Standard error of the paired difference.
    pub mc_stderr: f64,
    pub difference: f64,
    pub within_tolerance: bool,
}

fn quadratic_form(a: &DMatrix<f64>, x: &[ModelVector]) -> f64 {
    let n = x.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if a[(i, j)] != 0.0 {
                s += a[(i, j)] * x[i].dot(&x[j]);
            }
        }
    }
    s
}

fn split_form(a: &DMatrix<f64>, x: &[ModelVector], xc: &[ModelVector], inside: &[bool]) -> f64 {
    let n = x.len();
    let mut s = 0.0;
    for i in (0..n).filter(|&i| inside[i]) {
        for j in (0..n).filter(|&j| !inside[j]) {
            if a[(i, j)] != 0.0 {
                s += a[(i, j)] * x[i].dot(&xc[j]);
            }
        }
    }
    4.0 * s
}

/// Compare `E sum_ij a_ij <X_i, X_j>` with
/// `4 E sum_{i in I, j not in I} a_ij <X_i, X'_j>` where `X'` is an
/// independent copy and `I` a uniformly random subset.
pub fn decoupling_check(
    a: &DMatrix<f64>,
    family: &RandomFamily,
    trials: usize,
    selectors: SelectorMode,
    rng: &mut SimRng,
) -> Result<DecouplingReport> {
    if trials == 0 {
        return Err(Error::Empty("trials"));
    }
    let n = family.len();
    if a.nrows() != n || a.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: a.nrows(),
        });
    }
    if (0..n).any(|i| a[(i, i)] != 0.0) {
        return Err(Error::Inapplicable("matrix must have a zero diagonal".into()));
    }
    if selectors == SelectorMode::Exact && n > 16 {
        return Err(Error::Inapplicable("exact selector enumeration needs n <= 16".into()));
    }
    let mut sum_l = 0.0;
    let mut sum_r = 0.0;
    let mut sum_d = 0.0;
    let mut sum_d2 = 0.0;
    for _ in 0..trials {
        let x = family.sample(rng);
        let xc = family.sample(rng);
        let lhs = quadratic_form(a, &x);
        let rhs = match selectors {
            SelectorMode::Sampled => {
                let inside: Vec<bool> = (0..n).map(|_| rng.random::<bool>()).collect();
                split_form(a, &x, &xc, &inside)
            }
            SelectorMode::Exact => {
                let count = 1u32 << n;
                let mut inside = vec![false; n];
                let mut total = 0.0;
                for mask in 0..count {
                    for (i, slot) in inside.iter_mut().enumerate() {
                        *slot = mask & (1 << i) != 0;
                    }
                    total += split_form(a, &x, &xc, &inside);
                }
                total / count as f64
            }
        };
        let diff = lhs - rhs;
        sum_l += lhs;
        sum_r += rhs;
        sum_d += diff;
        sum_d2 += diff * diff;
    }
    let t = trials as f64;
    let mean_d = sum_d / t;
    let var = if trials > 1 {
        ((sum_d2 - t * mean_d * mean_d) / (t - 1.0)).max(0.0)
    } else {
        0.0
    };
    let stderr = (var / t).sqrt();
    let mc_lhs = sum_l / t;
    let mc_rhs = sum_r / t;
    let scale = mc_lhs.abs().max(mc_rhs.abs()).max(1.0);
    let within = (mc_lhs - mc_rhs).abs() <= 3.0 * stderr || (mc_lhs - mc_rhs).abs() <= 1e-12 * scale;
    Ok(DecouplingReport {
        trials,
        mc_lhs,
        mc_rhs,
        mc_stderr: stderr,
        difference: mc_lhs - mc_rhs,
        within_tolerance: within,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct DescentBoundsReport {
    pub trials: usize,
    /// Monte-Carlo mean of the prefactored descent `descent / n^2`.
    pub mc_mean: f64,
    pub mc_stderr: f64,
    /// Expectation under the ball model in closed form.
    pub closed_form: f64,
    pub lower_bound: f64,
    pub upper_bound: f64,
    pub epsilon: f64,
    pub min_cos: f64,
    pub max_cos: f64,
    /// `E[sigma^2] = d / (d + 2)` for a uniform point in a d-ball.
    pub sigma_sq: f64,
    pub applicable: bool,
    pub in_bounds: bool,
}

/// Uniform point in the ball of radius `r` about `center`.
pub fn sample_ball(center: &ModelVector, r: f64, rng: &mut SimRng) -> ModelVector {
    let d = center.len();
    let mut dir = ModelVector::from_fn(d, |_, _| StandardNormal.sample(rng));
    let n = dir.norm();
    if n > 0.0 {
        dir /= n;
    }
    let radius = r * rng.random::<f64>().powf(1.0 / d as f64);
    center + dir * radius
}

/// Monte-Carlo expectation of the prefactored descent when each local end
/// point is uniform in the ball of radius `||d_i||` about `x*_i`, and the
/// interval it should fall in.
pub fn expected_descent_bounds(records: &[ClientRoundRecord], trials: usize, rng: &mut SimRng) -> Result<DescentBoundsReport> {
    if trials == 0 {
        return Err(Error::Empty("trials"));
    }
    let n = records.len();
    if n == 0 {
        return Err(Error::Empty("round records"));
    }
    let d = records[0].optimum.len();
    let nf = n as f64;
    let sigma_sq = d as f64 / (d as f64 + 2.0);

    let (mut min_cos, mut max_cos) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let c = cosine(&records[i].delta_start, &records[j].delta_start);
                min_cos = min_cos.min(c);
                max_cos = max_cos.max(c);
            }
        }
    }
    if n == 1 {
        min_cos = 0.0;
        max_cos = 0.0;
    }
    let applicable = n == 1 || min_cos > 0.0;

    let rho_min = records.iter().map(|r| r.weight).fold(f64::INFINITY, f64::min);
    let rho_max = records.iter().map(|r| r.weight).fold(f64::NEG_INFINITY, f64::max);
    let norms: Vec<f64> = records.iter().map(|r| r.delta_start.norm()).collect();
    let dmin = norms.iter().cloned().fold(f64::INFINITY, f64::min);
    let dmax = norms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let epsilon = 0.5 * (1.0 - 1.0 / nf.sqrt());
    let diag = (1.0 - sigma_sq) / nf;
    let lower = rho_min * rho_min * dmin * dmin * (diag + 4.0 * epsilon * (1.0 - epsilon) * min_cos);
    let upper = rho_max * rho_max * dmax * dmax * (diag + max_cos);

    let mut closed = 0.0;
    for (i, ri) in records.iter().enumerate() {
        for (j, rj) in records.iter().enumerate() {
            closed += if i == j {
                ri.weight * ri.weight * ri.delta_start.norm_squared() * 2.0 / (d as f64 + 2.0)
            } else {
                ri.weight * rj.weight * ri.delta_start.dot(&rj.delta_start)
            };
        }
    }
    closed /= nf * nf;

    let mut sample = records.to_vec();
    let (mut s1, mut s2) = (0.0, 0.0);
    for _ in 0..trials {
        for (rec, base) in sample.iter_mut().zip(records) {
            let r = base.delta_start.norm();
            let end = sample_ball(&base.optimum, r, rng);
            rec.delta_end = &end - &base.optimum;
            rec.sigma = if r == 0.0 { 0.0 } else { rec.delta_end.norm() / r };
        }
        let v = compute_descent(&sample) / (nf * nf);
        s1 += v;
        s2 += v * v;
    }
    let t = trials as f64;
    let mean = s1 / t;
    let var = if trials > 1 { ((s2 - t * mean * mean) / (t - 1.0)).max(0.0) } else { 0.0 };
    let stderr = (var / t).sqrt();
    let slack = 3.0 * stderr + 1e-12 * mean.abs().max(1e-300);
    let in_bounds = applicable && mean >= lower - slack && mean <= upper + slack;
    Ok(DescentBoundsReport {
        trials,
        mc_mean: mean,
        mc_stderr: stderr,
        closed_form: closed,
        lower_bound: lower,
        upper_bound: upper,
        epsilon,
        min_cos,
        max_cos,
        sigma_sq,
        applicable,
        in_bounds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> ModelVector {
        ModelVector::from_vec(xs.to_vec())
    }

    /// Exact-solve record: local model lands on the optimum.
    fn exact(client: usize, x: &ModelVector, opt: &[f64], w: f64) -> ClientRoundRecord {
        ClientRoundRecord::from_points(client, v(opt), w, x, &v(opt))
    }

    #[test]
    fn a_matrix_hand_example() {
        // d_1 = (1,2), d_2 = (-1,2) with x = (0,0): optima (-1,-2), (1,-2)
        let x = v(&[0.0, 0.0]);
        let recs = vec![exact(0, &x, &[-1.0, -2.0], 0.5), exact(1, &x, &[1.0, -2.0], 0.5)];
        let a = compute_a(&recs);
        assert_relative_eq!(a, DMatrix::from_row_slice(2, 2, &[1.0, 0.6, 0.6, 1.0]), epsilon = 1e-15);
        assert_relative_eq!(compute_descent(&recs), 4.0, epsilon = 1e-12);
        assert_relative_eq!(mean_pairwise_cosine(&recs).unwrap(), 0.6, epsilon = 1e-15);
        // full contraction: descent equals the start distance to x*_S = (0,-2)
        let plain = verify_fedavg_distance(&x, &v(&[0.0, -2.0]), &recs).unwrap();
        assert_relative_eq!(plain.start_distance_sq, 4.0, epsilon = 1e-12);
        assert!(plain.identity.residual <= 1e-12);
        assert_relative_eq!(plain.descent_prefactored, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn a_matrix_trivial_cases() {
        let x = v(&[1.0, 1.0]);
        let single = vec![exact(0, &x, &[0.0, 0.0], 1.0)];
        assert_eq!(compute_a(&single), DMatrix::from_element(1, 1, 1.0));
        assert_relative_eq!(compute_descent(&single), 2.0, epsilon = 1e-15);

        let same = vec![exact(0, &x, &[0.0, 0.0], 0.5), exact(1, &x, &[0.0, 0.0], 0.5)];
        assert_relative_eq!(compute_a(&same), DMatrix::from_element(2, 2, 1.0), epsilon = 1e-15);

        // local models do not move: sigma = 1 and d^K = d, so A = 0
        let stay: Vec<_> = [[0.0, 0.0], [3.0, -1.0]]
            .iter()
            .enumerate()
            .map(|(i, o)| ClientRoundRecord::from_points(i, v(o), 0.5, &x, &x))
            .collect();
        assert!(compute_a(&stay).iter().all(|e| e.abs() < 1e-15));
        assert!(compute_descent(&stay).abs() < 1e-15);
    }

    #[test]
    fn region_examples() {
        assert_relative_eq!(region_radius(&[v(&[0.0, 0.0]), v(&[2.0, 0.0])]).unwrap(), 1.0);
        let h = 3f64.sqrt();
        let tri = [v(&[0.0, 0.0]), v(&[2.0, 0.0]), v(&[1.0, h])];
        assert_relative_eq!(region_radius(&tri).unwrap(), 1.0, epsilon = 1e-15);
        assert_eq!(region_radius(&[v(&[1.0]), v(&[1.0]), v(&[1.0])]).unwrap(), 0.0);
        assert!(matches!(region_radius(&[v(&[1.0])]), Err(Error::UndefinedRegion(1))));
        assert!(in_region(&v(&[1.0, 0.5]), &[v(&[0.0, 0.0]), v(&[2.0, 0.0])]).unwrap());
        assert!(!in_region(&v(&[1.0, 1.5]), &[v(&[0.0, 0.0]), v(&[2.0, 0.0])]).unwrap());
    }

    #[test]
    fn boundary_cosine_examples() {
        let a = v(&[0.0, 0.0]);
        let b = v(&[2.0, 0.0]);
        assert!(boundary_cosine_check(&v(&[1.0, 1.0]), &a, &b).abs() <= 1e-12);
        assert_relative_eq!(boundary_cosine_check(&v(&[1.0, 2.0]), &a, &b), 0.6, epsilon = 1e-15);
        assert!(boundary_cosine_check(&v(&[1.0, 0.5]), &a, &b) < 0.0);
    }

    #[test]
    fn pairwise_cosine_cases() {
        let x = v(&[0.0, 0.0]);
        let orth = vec![exact(0, &x, &[-1.0, 0.0], 0.5), exact(1, &x, &[0.0, -1.0], 0.5)];
        assert_eq!(mean_pairwise_cosine(&orth).unwrap(), 0.0);
        let same = vec![exact(0, &x, &[-1.0, 0.0], 0.5), exact(1, &x, &[-2.0, 0.0], 0.5)];
        assert_eq!(mean_pairwise_cosine(&same).unwrap(), 1.0);
        assert!(mean_pairwise_cosine(&orth[..1]).is_err());
    }

    #[test]
    fn fedavg_check_rejects_corrected_rounds() {
        let x = v(&[1.0]);
        let mut r = exact(0, &x, &[0.0], 1.0);
        r.applied_correction = v(&[0.1]);
        assert!(matches!(verify_fedavg_distance(&x, &x, &[r]), Err(Error::Inapplicable(_))));
    }

    fn gd_records(x: &ModelVector, optima: &[ModelVector], weights: &[f64], contraction: f64) -> (Vec<ClientRoundRecord>, ModelVector) {
        let mut next = ModelVector::zeros(x.len());
        let recs = optima
            .iter()
            .zip(weights)
            .enumerate()
            .map(|(i, (o, w))| {
                let local = o + (x - o) * contraction;
                next.axpy(*w, &local, 1.0);
                ClientRoundRecord::from_points(i, o.clone(), *w, x, &local)
            })
            .collect();
        (recs, next)
    }

    #[test]
    fn corrected_distance_reduces_without_correction() {
        let x = v(&[3.0, -1.0]);
        let optima = [v(&[0.0, 0.0]), v(&[1.0, 2.0]), v(&[-1.0, 0.5])];
        let w = [0.2, 0.5, 0.3];
        let (recs, next) = gd_records(&x, &optima, &w, 0.3);
        let dc = verify_corrected_distance(&x, &next, &recs, 1.0).unwrap();
        let plain = verify_fedavg_distance(&x, &next, &recs).unwrap();
        assert_eq!(dc.contraction_coef, 0.0);
        assert!(dc.identity.holds(1e-12));
        assert_relative_eq!(dc.identity.predicted, plain.identity.predicted, max_relative = 1e-12);

        let still = verify_corrected_distance(&x, &x, &recs, 0.0).unwrap();
        assert_relative_eq!(still.identity.predicted, plain.start_distance_sq, max_relative = 1e-12);
    }

    #[test]
    fn oracle_correction_is_effective() {
        let x = v(&[5.0, 4.0]);
        let optima = [v(&[0.0, 0.0]), v(&[2.0, 1.0]), v(&[-1.0, 3.0])];
        let w = [1.0 / 3.0; 3];
        let (mut recs, _) = gd_records(&x, &optima, &w, 0.6);
        let center = weighted_center(&recs).unwrap();
        let h = (&center - &x) * 0.1;
        for r in &mut recs {
            r.applied_correction = h.clone();
        }
        let g = pseudo_gradient(&recs).unwrap();
        let next = &x - (&g - &h);
        let dc = verify_corrected_distance(&x, &next, &recs, 1.0).unwrap();
        assert!(dc.identity.holds(1e-12));
        assert!(dc.effective);
        assert!(dc.identity.observed < dc.counterfactual);
    }

    #[test]
    fn momentum_distance_reductions() {
        let x = v(&[2.0, -3.0, 1.0]);
        let optima = [v(&[0.0, 0.0, 0.0]), v(&[1.0, 1.0, -1.0])];
        let w = [0.4, 0.6];
        let (recs, next) = gd_records(&x, &optima, &w, 0.5);
        let zero = ModelVector::zeros(3);
        let sa = verify_momentum_distance(&x, &next, &recs, 1.0, 0.0, 0.7, &zero).unwrap();
        assert_eq!(sa.eta_hat, 1.0);
        assert_eq!(sa.eta_mom, 0.0);
        assert!(sa.identity.holds(1e-12));

        let m = v(&[0.3, -0.2, 0.9]);
        let (eta, nu, beta) = (0.8, 0.7, 0.9);
        let g = pseudo_gradient(&recs).unwrap();
        let dir = &g * (1.0 - nu) + (&g * (1.0 - beta) + &m * beta) * nu;
        let next = &x - dir * eta;
        let sa = verify_momentum_distance(&x, &next, &recs, eta, nu, beta, &m).unwrap();
        assert!(sa.identity.holds(1e-12), "{:?}", sa.identity);
    }

    #[test]
    fn decoupling_point_mass_is_exact() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let fam = RandomFamily::PointMass(vec![v(&[1.0, 2.0]), v(&[3.0, -1.0])]);
        let mut rng = seed::rng(1, &[]);
        let rep = decoupling_check(&a, &fam, 1, SelectorMode::Exact, &mut rng).unwrap();
        assert_relative_eq!(rep.mc_lhs, 2.0, epsilon = 1e-12);
        assert!((rep.mc_lhs - rep.mc_rhs).abs() <= 1e-12);

        let zero = DMatrix::zeros(2, 2);
        let rep = decoupling_check(&zero, &fam, 10, SelectorMode::Sampled, &mut rng).unwrap();
        assert_eq!((rep.mc_lhs, rep.mc_rhs), (0.0, 0.0));
        assert!(decoupling_check(&a, &fam, 0, SelectorMode::Sampled, &mut rng).is_err());
        let diag = DMatrix::identity(2, 2);
        assert!(decoupling_check(&diag, &fam, 5, SelectorMode::Sampled, &mut rng).is_err());
    }

    #[test]
    fn decoupling_gaussian_within_three_stderr() {
        let mut rng = seed::rng(5, &[]);
        let n = 5;
        let a = DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { ((i * 7 + j * 3) % 5) as f64 - 2.0 });
        let means = (0..n).map(|i| v(&[i as f64 * 0.3, 1.0 - i as f64 * 0.2, 0.5])).collect();
        let fam = RandomFamily::Gaussian { means, stds: vec![1.0; n] };
        let rep = decoupling_check(&a, &fam, 20_000, SelectorMode::Sampled, &mut rng).unwrap();
        assert!(rep.within_tolerance, "{rep:?}");
    }

    #[test]
    fn bounds_single_client_collapse() {
        let x = v(&[2.0, 0.0, 1.0]);
        let recs = vec![exact(0, &x, &[0.0, 0.0, 0.0], 1.0)];
        let mut rng = seed::rng(3, &[]);
        let rep = expected_descent_bounds(&recs, 20_000, &mut rng).unwrap();
        let expected = (1.0 - 3.0 / 5.0) * 5.0;
        assert_relative_eq!(rep.closed_form, expected, epsilon = 1e-12);
        assert_relative_eq!(rep.lower_bound, expected, epsilon = 1e-12);
        assert_relative_eq!(rep.upper_bound, expected, epsilon = 1e-12);
        assert!((rep.mc_mean - expected).abs() <= 4.0 * rep.mc_stderr);
    }

    #[test]
    fn bounds_gate_on_negative_cosine() {
        let x = v(&[0.0, 0.0]);
        let recs = vec![exact(0, &x, &[1.0, 0.0], 0.5), exact(1, &x, &[-1.0, 0.1], 0.5)];
        let mut rng = seed::rng(3, &[]);
        let rep = expected_descent_bounds(&recs, 100, &mut rng).unwrap();
        assert!(!rep.applicable);
        assert!(!rep.in_bounds);
    }

    #[test]
    fn ball_samples_stay_inside() {
        let mut rng = seed::rng(8, &[]);
        let c = v(&[1.0, -1.0, 0.0, 2.0]);
        for _ in 0..1000 {
            assert!((sample_ball(&c, 0.7, &mut rng) - &c).norm() <= 0.7 + 1e-12);
        }
    }

    fn arbitrary_round() -> impl Strategy<Value = (ModelVector, Vec<ClientRoundRecord>)> {
        (1usize..6, 1usize..5).prop_flat_map(|(n, d)| {
            let vec = move || prop::collection::vec(-5.0f64..5.0, d);
            (vec(), prop::collection::vec((vec(), vec(), 0.1f64..1.0), n)).prop_map(|(x, clients)| {
                let x_t = ModelVector::from_vec(x);
                let total: f64 = clients.iter().map(|c| c.2).sum();
                let records = clients
                    .into_iter()
                    .enumerate()
                    .map(|(i, (opt, local, w))| {
                        ClientRoundRecord::from_points(i, ModelVector::from_vec(opt), w / total, &x_t, &ModelVector::from_vec(local))
                    })
                    .collect();
                (x_t, records)
            })
        })
    }

    proptest! {
        #[test]
        fn fedavg_identity_on_arbitrary_local_models((x_t, records) in arbitrary_round()) {
            let a = compute_a(&records);
            prop_assert!((&a - a.transpose()).amax() < 1e-12);
            let direct = compute_descent(&records);
            prop_assert!((direct - descent_from_a(&records, &a)).abs() <= 1e-9 * direct.abs().max(1.0));
            let x_next = records
                .iter()
                .fold(ModelVector::zeros(x_t.len()), |acc, r| acc + (&r.optimum + &r.delta_end) * r.weight);
            let check = verify_fedavg_distance(&x_t, &x_next, &records).unwrap();
            prop_assert!(check.identity.holds(1e-9), "{:?}", check);
        }
    }
}
