//! Client objectives, the global objective and the heterogeneity metric.
//!
//! Two objective families are supported. Quadratics carry their optimum and
//! curvature in closed form, which makes every distance identity checkable
//! to rounding error. Multinomial logistic regression stands in for the
//! data-driven clients; its optimum is resolved numerically and cached.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{centroid, check_dim, is_symmetric, symmetric_eigen_range, ModelVector};

/// Gradient-norm tolerance used when resolving logistic optima.
pub const OPTIMUM_TOLERANCE: f64 = 1e-8;
const SYMMETRY_TOLERANCE: f64 = 1e-12;

/// `f(x) = c + 1/2 (x - x*)^T Q (x - x*)` with `Q` symmetric positive definite.
#[derive(Debug, Clone)]
pub struct QuadraticObjective {
    center: ModelVector,
    curvature: DMatrix<f64>,
    offset: f64,
    lambda_min: f64,
    lambda_max: f64,
}

impl QuadraticObjective {
    pub fn new(center: ModelVector, curvature: DMatrix<f64>, offset: f64) -> Result<Self> {
        let d = center.len();
        if d == 0 {
            return Err(Error::InvalidObjective("zero-dimensional center".into()));
        }
        if curvature.nrows() != d || curvature.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: curvature.nrows().max(curvature.ncols()),
            });
        }
        if !is_symmetric(&curvature, SYMMETRY_TOLERANCE) {
            return Err(Error::InvalidObjective("curvature is not symmetric".into()));
        }
        if !(offset >= 0.0) {
            return Err(Error::InvalidObjective(format!("offset {offset} must be >= 0")));
        }
        let (lambda_min, lambda_max) = symmetric_eigen_range(&curvature);
        if !(lambda_min > 0.0) {
            return Err(Error::InvalidObjective(format!(
                "curvature is not positive definite (lambda_min = {lambda_min})"
            )));
        }
        Ok(Self {
            center,
            curvature,
            offset,
            lambda_min,
            lambda_max,
        })
    }

    /// `Q = scale * I`.
    pub fn isotropic(center: ModelVector, scale: f64, offset: f64) -> Result<Self> {
        let d = center.len();
        Self::new(center, DMatrix::identity(d, d) * scale, offset)
    }

    pub fn center(&self) -> &ModelVector {
        &self.center
    }

    pub fn curvature(&self) -> &DMatrix<f64> {
        &self.curvature
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn lambda_min(&self) -> f64 {
        self.lambda_min
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda_max
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn evaluate(&self, x: &ModelVector) -> Result<f64> {
        check_dim(self.dim(), x)?;
        let delta = x - &self.center;
        Ok(self.offset + 0.5 * delta.dot(&(&self.curvature * &delta)))
    }

    pub fn gradient(&self, x: &ModelVector) -> Result<ModelVector> {
        check_dim(self.dim(), x)?;
        Ok(&self.curvature * (x - &self.center))
    }
}

/// Softmax cross-entropy over `num_classes` classes with an L2 penalty.
///
/// Parameters are laid out class-major: `x[c * p + k]` is the weight of
/// feature `k` for class `c`, so `dim = num_classes * p`.
#[derive(Debug, Clone)]
pub struct LogisticObjective {
    features: DMatrix<f64>,
    labels: Vec<usize>,
    num_classes: usize,
    l2_reg: f64,
    resolved_optimum: Option<ModelVector>,
}

impl LogisticObjective {
    pub fn new(
        features: DMatrix<f64>,
        labels: Vec<usize>,
        num_classes: usize,
        l2_reg: f64,
    ) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::InvalidObjective("logistic client has no samples".into()));
        }
        if features.nrows() != labels.len() {
            return Err(Error::LengthMismatch {
                what: "features/labels",
                left: features.nrows(),
                right: labels.len(),
            });
        }
        if num_classes < 2 {
            return Err(Error::InvalidObjective("need at least two classes".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::InvalidObjective(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if !(l2_reg >= 0.0) {
            return Err(Error::InvalidObjective("l2_reg must be >= 0".into()));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            l2_reg,
            resolved_optimum: None,
        })
    }

    pub fn num_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn num_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn l2_reg(&self) -> f64 {
        self.l2_reg
    }

    pub fn dim(&self) -> usize {
        self.num_classes * self.features.ncols()
    }

    pub fn resolved_optimum(&self) -> Option<&ModelVector> {
        self.resolved_optimum.as_ref()
    }

    fn logits(&self, x: &ModelVector, row: usize, out: &mut [f64]) {
        let p = self.features.ncols();
        for (c, o) in out.iter_mut().enumerate() {
            let mut z = 0.0;
            for k in 0..p {
                z += x[c * p + k] * self.features[(row, k)];
            }
            *o = z;
        }
    }

    /// Mean loss and gradient over `rows`, without the penalty.
    fn data_terms(&self, x: &ModelVector, rows: &[usize], want_grad: bool) -> (f64, ModelVector) {
        let p = self.features.ncols();
        let mut grad = ModelVector::zeros(if want_grad { self.dim() } else { 0 });
        let mut z = vec![0.0; self.num_classes];
        let mut loss = 0.0;
        for &row in rows {
            self.logits(x, row, &mut z);
            let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = z.iter().map(|v| (v - zmax).exp()).sum();
            let lse = zmax + sum.ln();
            let y = self.labels[row];
            loss += lse - z[y];
            if want_grad {
                for c in 0..self.num_classes {
                    let mut coef = (z[c] - lse).exp();
                    if c == y {
                        coef -= 1.0;
                    }
                    for k in 0..p {
                        grad[c * p + k] += coef * self.features[(row, k)];
                    }
                }
            }
        }
        let n = rows.len() as f64;
        (loss / n, grad / n)
    }

    fn all_rows(&self) -> Vec<usize> {
        (0..self.num_samples()).collect()
    }

    pub fn evaluate(&self, x: &ModelVector) -> Result<f64> {
        check_dim(self.dim(), x)?;
        let (loss, _) = self.data_terms(x, &self.all_rows(), false);
        Ok(loss + 0.5 * self.l2_reg * x.norm_squared())
    }

    pub fn gradient(&self, x: &ModelVector) -> Result<ModelVector> {
        check_dim(self.dim(), x)?;
        let (_, g) = self.data_terms(x, &self.all_rows(), true);
        Ok(g + x * self.l2_reg)
    }

    /// Gradient of the mini-batch loss (penalty included) over `rows`.
    pub fn batch_gradient(&self, x: &ModelVector, rows: &[usize]) -> Result<ModelVector> {
        check_dim(self.dim(), x)?;
        if rows.is_empty() {
            return Err(Error::Empty("mini-batch"));
        }
        let (_, g) = self.data_terms(x, rows, true);
        Ok(g + x * self.l2_reg)
    }

    /// Fraction of samples whose arg-max logit matches the label.
    pub fn accuracy(&self, x: &ModelVector) -> Result<f64> {
        check_dim(self.dim(), x)?;
        let mut z = vec![0.0; self.num_classes];
        let mut hits = 0usize;
        for row in 0..self.num_samples() {
            self.logits(x, row, &mut z);
            let (best, _) = z
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (c, &v)| if v > acc.1 { (c, v) } else { acc });
            if best == self.labels[row] {
                hits += 1;
            }
        }
        Ok(hits as f64 / self.num_samples() as f64)
    }

    /// Hessian of the full objective applied to `v`.
    pub fn hessian_vector(&self, x: &ModelVector, v: &ModelVector) -> Result<ModelVector> {
        check_dim(self.dim(), x)?;
        check_dim(self.dim(), v)?;
        let p = self.features.ncols();
        let k = self.num_classes;
        let mut out = ModelVector::zeros(self.dim());
        let mut z = vec![0.0; k];
        let mut u = vec![0.0; k];
        for row in 0..self.num_samples() {
            self.logits(x, row, &mut z);
            self.logits(v, row, &mut u);
            let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = z.iter().map(|t| (t - zmax).exp()).sum();
            let probs: Vec<f64> = z.iter().map(|t| (t - zmax).exp() / sum).collect();
            let mean_u: f64 = probs.iter().zip(&u).map(|(a, b)| a * b).sum();
            for c in 0..k {
                let coef = probs[c] * (u[c] - mean_u);
                for j in 0..p {
                    out[c * p + j] += coef * self.features[(row, j)];
                }
            }
        }
        Ok(out / self.num_samples() as f64 + v * self.l2_reg)
    }

    /// Newton-CG with Armijo backtracking until `||grad|| <= tol`. The
    /// result is cached.
    pub fn resolve_optimum(&mut self, tol: f64) -> Result<&ModelVector> {
        let x = minimize_newton_cg(
            |x| self.evaluate(x),
            |x| self.gradient(x),
            |x, v| self.hessian_vector(x, v),
            ModelVector::zeros(self.dim()),
            tol,
            500,
        )?;
        self.resolved_optimum = Some(x);
        Ok(self.resolved_optimum.as_ref().unwrap())
    }
}

/// Conjugate gradients for `H s = b` with `H` given as a product, stopped
/// at relative residual `rtol` or `max_iter` steps.
fn conjugate_gradient<H>(hv: &H, b: &ModelVector, rtol: f64, max_iter: usize) -> Result<ModelVector>
where
    H: Fn(&ModelVector) -> Result<ModelVector>,
{
    let mut s = ModelVector::zeros(b.len());
    let mut r = b.clone();
    let mut d = r.clone();
    let mut rr = r.norm_squared();
    let stop = rtol * rtol * rr;
    for _ in 0..max_iter {
        if rr <= stop {
            break;
        }
        let hd = hv(&d)?;
        let curv = d.dot(&hd);
        if curv <= 0.0 {
            break;
        }
        let a = rr / curv;
        s.axpy(a, &d, 1.0);
        r.axpy(-a, &hd, 1.0);
        let rr_next = r.norm_squared();
        d = &r + &d * (rr_next / rr);
        rr = rr_next;
    }
    if s.norm_squared() == 0.0 {
        // no usable curvature; fall back to the gradient direction
        return Ok(b.clone());
    }
    Ok(s)
}

/// Minimize a smooth convex function by inexact Newton steps (conjugate
/// gradients on Hessian-vector products) with Armijo backtracking.
pub fn minimize_newton_cg<F, G, H>(f: F, grad: G, hess_vec: H, mut x: ModelVector, tol: f64, max_iter: usize) -> Result<ModelVector>
where
    F: Fn(&ModelVector) -> Result<f64>,
    G: Fn(&ModelVector) -> Result<ModelVector>,
    H: Fn(&ModelVector, &ModelVector) -> Result<ModelVector>,
{
    let mut fx = f(&x)?;
    for _ in 0..max_iter {
        let g = grad(&x)?;
        let gn = g.norm();
        if gn <= tol {
            return Ok(x);
        }
        let rtol = gn.sqrt().min(0.5);
        let neg_g = -&g;
        let step_dir = conjugate_gradient(&|v: &ModelVector| hess_vec(&x, v), &neg_g, rtol, 2 * x.len() + 10)?;
        let slope = g.dot(&step_dir);
        let mut t = 1.0;
        loop {
            let cand = &x + &step_dir * t;
            let fc = f(&cand)?;
            // near the optimum f stops resolving the decrease; fall back to
            // the gradient norm when f is flat to rounding
            let flat = fc <= fx + 8.0 * f64::EPSILON * fx.abs().max(1.0);
            if fc <= fx + 1e-4 * t * slope || (flat && grad(&cand)?.norm() < gn) {
                x = cand;
                fx = fc;
                break;
            }
            t *= 0.5;
            if t < 1e-20 {
                // rounding floor of f reached; the gradient decides
                if gn <= tol * 1e3 {
                    return Ok(x);
                }
                return Err(Error::InvalidObjective("line search failed while resolving optimum".into()));
            }
        }
    }
    Err(Error::InvalidObjective(format!(
        "optimum not resolved to {tol} within {max_iter} Newton iterations"
    )))
}

/// A client's objective.
#[derive(Debug, Clone)]
pub enum ClientObjective {
    Quadratic(QuadraticObjective),
    Logistic(LogisticObjective),
}

impl From<QuadraticObjective> for ClientObjective {
    fn from(q: QuadraticObjective) -> Self {
        ClientObjective::Quadratic(q)
    }
}

impl From<LogisticObjective> for ClientObjective {
    fn from(l: LogisticObjective) -> Self {
        ClientObjective::Logistic(l)
    }
}

impl ClientObjective {
    pub fn dim(&self) -> usize {
        match self {
            ClientObjective::Quadratic(q) => q.dim(),
            ClientObjective::Logistic(l) => l.dim(),
        }
    }

    pub fn evaluate(&self, x: &ModelVector) -> Result<f64> {
        match self {
            ClientObjective::Quadratic(q) => q.evaluate(x),
            ClientObjective::Logistic(l) => l.evaluate(x),
        }
    }

    pub fn gradient(&self, x: &ModelVector) -> Result<ModelVector> {
        match self {
            ClientObjective::Quadratic(q) => q.gradient(x),
            ClientObjective::Logistic(l) => l.gradient(x),
        }
    }

    /// The exact (quadratic) or resolved (logistic) optimum.
    pub fn optimum(&self) -> Option<&ModelVector> {
        match self {
            ClientObjective::Quadratic(q) => Some(q.center()),
            ClientObjective::Logistic(l) => l.resolved_optimum(),
        }
    }

    pub fn num_samples(&self) -> Option<usize> {
        match self {
            ClientObjective::Quadratic(_) => None,
            ClientObjective::Logistic(l) => Some(l.num_samples()),
        }
    }

    pub fn resolve_optimum(&mut self) -> Result<&ModelVector> {
        match self {
            ClientObjective::Quadratic(q) => Ok(q.center()),
            ClientObjective::Logistic(l) => l.resolve_optimum(OPTIMUM_TOLERANCE),
        }
    }
}

/// How the global objective averages the client objectives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// `(1/|S|) sum_i f_i`.
    #[default]
    Uniform,
    /// `sum_i rho_i f_i`.
    Weighted,
}

/// Ordered clients with aggregation weights summing to one.
#[derive(Debug, Clone)]
pub struct ClientPopulation {
    clients: Vec<ClientObjective>,
    weights: Vec<f64>,
}

impl ClientPopulation {
    pub fn new(clients: Vec<ClientObjective>, weights: Vec<f64>) -> Result<Self> {
        let first = clients.first().ok_or(Error::Empty("population"))?;
        let d = first.dim();
        for c in &clients {
            if c.dim() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: c.dim(),
                });
            }
        }
        if weights.len() != clients.len() {
            return Err(Error::LengthMismatch {
                what: "clients/weights",
                left: clients.len(),
                right: weights.len(),
            });
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidObjective("weights must be nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidObjective(format!("weights sum to {total}, expected 1")));
        }
        Ok(Self { clients, weights })
    }

    pub fn uniform(clients: Vec<ClientObjective>) -> Result<Self> {
        let n = clients.len().max(1);
        Self::new(clients, vec![1.0 / n as f64; n])
    }

    pub fn len(&self) -> usize {
        self.clients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clients.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.clients[0].dim()
    }

    pub fn clients(&self) -> &[ClientObjective] {
        &self.clients
    }

    pub fn client(&self, i: usize) -> &ClientObjective {
        &self.clients[i]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Resolve every client optimum; must run before parallel phases.
    pub fn resolve_optima(&mut self) -> Result<()> {
        for c in &mut self.clients {
            c.resolve_optimum()?;
        }
        Ok(())
    }

    pub fn optima(&self) -> Result<Vec<ModelVector>> {
        self.clients
            .iter()
            .map(|c| c.optimum().cloned().ok_or(Error::UnresolvedOptimum))
            .collect()
    }
}

/// `F(x)` under the chosen averaging.
pub fn global_objective(pop: &ClientPopulation, x: &ModelVector, averaging: Averaging) -> Result<f64> {
    if pop.is_empty() {
        return Err(Error::Empty("population"));
    }
    let mut acc = 0.0;
    for (c, w) in pop.clients().iter().zip(pop.weights()) {
        let v = c.evaluate(x)?;
        acc += match averaging {
            Averaging::Uniform => v,
            Averaging::Weighted => w * v,
        };
    }
    Ok(match averaging {
        Averaging::Uniform => acc / pop.len() as f64,
        Averaging::Weighted => acc,
    })
}

/// Mean squared distance of the optima from their unweighted centroid.
pub fn heterogeneity(optima: &[ModelVector]) -> Result<f64> {
    let center = centroid(optima)?;
    Ok(optima.iter().map(|o| (o - &center).norm_squared()).sum::<f64>() / optima.len() as f64)
}

/// Curvature-and-spread lower bound on the uniform global objective:
/// `(1/|S|) sum_i [f_i(x*_i) + lambda_min^i / 2 (||x*_i - c|| - ||x - c||)^2]`
/// with `c` the unweighted centroid of the optima. Quadratic clients only.
pub fn lower_bound(pop: &ClientPopulation, x: &ModelVector) -> Result<f64> {
    if pop.is_empty() {
        return Err(Error::Empty("population"));
    }
    let quads = quadratic_clients(pop)?;
    let optima: Vec<ModelVector> = quads.iter().map(|q| q.center().clone()).collect();
    let center = centroid(&optima)?;
    check_dim(center.len(), x)?;
    let dist_x = (x - &center).norm();
    let total: f64 = quads
        .iter()
        .map(|q| {
            let gap = (q.center() - &center).norm() - dist_x;
            q.offset() + 0.5 * q.lambda_min() * gap * gap
        })
        .sum();
    Ok(total / quads.len() as f64)
}

fn quadratic_clients(pop: &ClientPopulation) -> Result<Vec<&QuadraticObjective>> {
    pop.clients()
        .iter()
        .enumerate()
        .map(|(i, c)| match c {
            ClientObjective::Quadratic(q) => Ok(q),
            ClientObjective::Logistic(_) => Err(Error::UnsupportedObjective(format!(
                "client {i} is logistic; the lower bound needs exact curvature"
            ))),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> ModelVector {
        ModelVector::from_vec(xs.to_vec())
    }

    fn unit_quad(center: &[f64]) -> ClientObjective {
        QuadraticObjective::isotropic(v(center), 1.0, 0.0).unwrap().into()
    }

    #[test]
    fn quadratic_evaluate_and_gradient() {
        let q = QuadraticObjective::isotropic(v(&[0.0, 0.0]), 1.0, 0.0).unwrap();
        assert_relative_eq!(q.evaluate(&v(&[1.0, 2.0])).unwrap(), 2.5);
        assert_eq!(q.gradient(&v(&[1.0, 2.0])).unwrap(), v(&[1.0, 2.0]));
    }

    #[test]
    fn quadratic_at_center() {
        let q = QuadraticObjective::isotropic(v(&[0.3, -1.0]), 2.0, 0.7).unwrap();
        assert_eq!(q.evaluate(q.center()).unwrap(), 0.7);
        assert!(q.gradient(q.center()).unwrap().norm() <= 1e-12);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let q = QuadraticObjective::isotropic(v(&[0.0, 0.0]), 1.0, 0.0).unwrap();
        assert!(matches!(
            q.evaluate(&v(&[1.0])),
            Err(Error::DimensionMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn rejects_indefinite_and_asymmetric_curvature() {
        let c = v(&[0.0, 0.0]);
        let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(QuadraticObjective::new(c.clone(), indefinite, 0.0).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        assert!(QuadraticObjective::new(c, asym, 0.0).is_err());
    }

    #[test]
    fn logistic_single_sample_zero_weights_is_ln2() {
        let l = LogisticObjective::new(DMatrix::from_row_slice(1, 3, &[0.4, -1.0, 2.0]), vec![1], 2, 0.0)
            .unwrap();
        assert_relative_eq!(l.evaluate(&ModelVector::zeros(6)).unwrap(), 2f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn global_objective_examples() {
        let pop = ClientPopulation::uniform(vec![unit_quad(&[0.0, 0.0]), unit_quad(&[2.0, 0.0])]).unwrap();
        assert_relative_eq!(global_objective(&pop, &v(&[1.0, 0.0]), Averaging::Uniform).unwrap(), 0.5);

        let same = ClientPopulation::uniform(vec![unit_quad(&[1.0, 1.0]), unit_quad(&[1.0, 1.0])]).unwrap();
        let x = v(&[0.2, -3.0]);
        assert_relative_eq!(
            global_objective(&same, &x, Averaging::Uniform).unwrap(),
            same.client(0).evaluate(&x).unwrap()
        );

        let single = ClientPopulation::uniform(vec![unit_quad(&[1.0, 1.0])]).unwrap();
        assert_eq!(
            global_objective(&single, &x, Averaging::Uniform).unwrap(),
            single.client(0).evaluate(&x).unwrap()
        );
    }

    #[test]
    fn weighted_global_objective() {
        let pop = ClientPopulation::new(vec![unit_quad(&[0.0]), unit_quad(&[2.0])], vec![0.25, 0.75]).unwrap();
        let x = v(&[0.0]);
        // f_1 = 0, f_2 = 2
        assert_relative_eq!(global_objective(&pop, &x, Averaging::Weighted).unwrap(), 1.5);
        assert_relative_eq!(global_objective(&pop, &x, Averaging::Uniform).unwrap(), 1.0);
    }

    #[test]
    fn population_rejects_bad_weights() {
        assert!(ClientPopulation::new(vec![unit_quad(&[0.0])], vec![0.9]).is_err());
        assert!(ClientPopulation::new(vec![unit_quad(&[0.0]), unit_quad(&[1.0])], vec![1.5, -0.5]).is_err());
        assert!(matches!(ClientPopulation::new(vec![], vec![]), Err(Error::Empty(_))));
    }

    #[test]
    fn heterogeneity_examples() {
        assert_eq!(heterogeneity(&[v(&[1.0, 2.0]), v(&[1.0, 2.0])]).unwrap(), 0.0);
        assert_relative_eq!(heterogeneity(&[v(&[0.0, 0.0]), v(&[2.0, 0.0])]).unwrap(), 1.0);
        assert!(heterogeneity(&[]).is_err());
    }

    #[test]
    fn lower_bound_examples() {
        let pop = ClientPopulation::uniform(vec![unit_quad(&[0.0, 0.0]), unit_quad(&[2.0, 0.0])]).unwrap();
        let x = v(&[1.0, 0.0]);
        let lb = lower_bound(&pop, &x).unwrap();
        assert_relative_eq!(lb, 0.5, epsilon = 1e-12);
        assert_relative_eq!(lb, global_objective(&pop, &x, Averaging::Uniform).unwrap(), epsilon = 1e-12);

        let single = ClientPopulation::uniform(vec![QuadraticObjective::isotropic(v(&[3.0, 1.0]), 4.0, 0.25)
            .unwrap()
            .into()])
        .unwrap();
        assert_relative_eq!(lower_bound(&single, &v(&[3.0, 1.0])).unwrap(), 0.25);
    }

    #[test]
    fn lower_bound_rejects_logistic() {
        let l = LogisticObjective::new(DMatrix::from_row_slice(1, 1, &[1.0]), vec![0], 2, 0.1).unwrap();
        let pop = ClientPopulation::uniform(vec![l.into()]).unwrap();
        assert!(matches!(
            lower_bound(&pop, &ModelVector::zeros(2)),
            Err(Error::UnsupportedObjective(_))
        ));
    }

    fn central_difference(f: impl Fn(&ModelVector) -> f64, x: &ModelVector, h: f64) -> ModelVector {
        let mut g = ModelVector::zeros(x.len());
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            g[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    #[test]
    fn logistic_gradient_matches_finite_difference() {
        use rand::Rng;
        let mut rng = crate::seed::rng(11, &[]);
        for _ in 0..20 {
            let n = rng.random_range(1..15);
            let p = rng.random_range(1..5);
            let k = rng.random_range(2..5);
            let feats = DMatrix::from_fn(n, p, |_, _| rng.random_range(-2.0..2.0));
            let labels = (0..n).map(|_| rng.random_range(0..k)).collect();
            let l = LogisticObjective::new(feats, labels, k, rng.random_range(0.0..0.5)).unwrap();
            let x = ModelVector::from_fn(l.dim(), |_, _| rng.random_range(-1.0..1.0));
            let fd = central_difference(|x| l.evaluate(x).unwrap(), &x, 1e-6);
            let g = l.gradient(&x).unwrap();
            let rel = (&g - &fd).norm() / g.norm().max(1e-8);
            assert!(rel <= 1e-5, "relative gradient error {rel}");
        }
    }

    #[test]
    fn logistic_hessian_vector_matches_gradient_difference() {
        use rand::Rng;
        let mut rng = crate::seed::rng(12, &[]);
        for _ in 0..20 {
            let n = rng.random_range(1..15);
            let p = rng.random_range(1..5);
            let k = rng.random_range(2..5);
            let feats = DMatrix::from_fn(n, p, |_, _| rng.random_range(-2.0..2.0));
            let labels = (0..n).map(|_| rng.random_range(0..k)).collect();
            let l = LogisticObjective::new(feats, labels, k, rng.random_range(0.0..0.5)).unwrap();
            let x = ModelVector::from_fn(l.dim(), |_, _| rng.random_range(-1.0..1.0));
            let dir = ModelVector::from_fn(l.dim(), |_, _| rng.random_range(-1.0..1.0));
            let h = 1e-6;
            let fd = (l.gradient(&(&x + &dir * h)).unwrap() - l.gradient(&(&x - &dir * h)).unwrap()) / (2.0 * h);
            let hv = l.hessian_vector(&x, &dir).unwrap();
            assert!((&hv - &fd).norm() <= 1e-6 * hv.norm().max(1.0));
        }
    }

    #[test]
    fn nearly_separable_client_resolves() {
        // few samples, weak penalty: large-norm optimum, flat directions
        let feats = DMatrix::from_row_slice(3, 2, &[2.0, 0.1, 2.2, -0.1, -2.0, 0.0]);
        let mut l = LogisticObjective::new(feats, vec![0, 0, 1], 4, 1e-3).unwrap();
        let x = l.resolve_optimum(OPTIMUM_TOLERANCE).unwrap().clone();
        assert!(l.gradient(&x).unwrap().norm() <= OPTIMUM_TOLERANCE);
    }

    #[test]
    fn quadratic_gradient_matches_finite_difference() {
        let q = QuadraticObjective::new(
            v(&[0.5, -1.0]),
            DMatrix::from_row_slice(2, 2, &[3.0, 0.4, 0.4, 1.0]),
            0.1,
        )
        .unwrap();
        let x = v(&[1.3, 0.2]);
        let fd = central_difference(|x| q.evaluate(x).unwrap(), &x, 1e-6);
        let g = q.gradient(&x).unwrap();
        assert!((&g - &fd).norm() / g.norm() <= 1e-5);
    }

    #[test]
    fn logistic_optimum_resolves_to_tolerance() {
        let feats = DMatrix::from_row_slice(4, 2, &[1.0, 0.2, -0.5, 1.0, 0.3, -1.2, -1.0, -0.1]);
        let mut l = LogisticObjective::new(feats, vec![0, 1, 2, 0], 3, 0.05).unwrap();
        let x = l.resolve_optimum(OPTIMUM_TOLERANCE).unwrap().clone();
        assert!(l.gradient(&x).unwrap().norm() <= OPTIMUM_TOLERANCE);
    }

    proptest! {
        #[test]
        fn heterogeneity_translation_invariant(
            pts in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 3), 1..8),
            shift in prop::collection::vec(-50.0f64..50.0, 3),
        ) {
            let optima: Vec<ModelVector> = pts.iter().map(|p| v(p)).collect();
            let s = v(&shift);
            let moved: Vec<ModelVector> = optima.iter().map(|o| o + &s).collect();
            let h0 = heterogeneity(&optima).unwrap();
            let h1 = heterogeneity(&moved).unwrap();
            prop_assert!(h0 >= 0.0);
            prop_assert!((h0 - h1).abs() <= 1e-9 * (1.0 + h0));
        }

        #[test]
        fn lower_bound_never_exceeds_objective(
            centers in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 2), 1..6),
            diag in prop::collection::vec(0.1f64..4.0, 2),
            x in prop::collection::vec(-8.0f64..8.0, 2),
        ) {
            let clients: Vec<ClientObjective> = centers
                .iter()
                .map(|c| {
                    QuadraticObjective::new(v(c), DMatrix::from_diagonal(&v(&diag)), 0.0)
                        .unwrap()
                        .into()
                })
                .collect();
            let pop = ClientPopulation::uniform(clients).unwrap();
            let x = v(&x);
            let f = global_objective(&pop, &x, Averaging::Uniform).unwrap();
            prop_assert!(lower_bound(&pop, &x).unwrap() <= f + 1e-12 * (1.0 + f));
        }

        #[test]
        fn uniform_global_objective_permutation_invariant(
            centers in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 2), 2..6),
            x in prop::collection::vec(-8.0f64..8.0, 2),
        ) {
            let clients: Vec<ClientObjective> = centers.iter().map(|c| unit_quad(c)).collect();
            let mut reversed = clients.clone();
            reversed.reverse();
            let x = v(&x);
            let a = global_objective(&ClientPopulation::uniform(clients).unwrap(), &x, Averaging::Uniform).unwrap();
            let b = global_objective(&ClientPopulation::uniform(reversed).unwrap(), &x, Averaging::Uniform).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }
}
