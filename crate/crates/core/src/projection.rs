//! Two-dimensional views of models and objectives.
//!
//! Models are placed in a plane spanned by two random Gaussian base
//! vectors, and objectives are evaluated on a grid in that plane around an
//! anchor model.

use std::fmt::Write as _;
use std::ops::Range;

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{check_dim, ModelVector};
use crate::objectives::{ClientObjective, ClientPopulation};
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionBasis {
    pub wx: ModelVector,
    pub wy: ModelVector,
    pub seed: u64,
}

impl ProjectionBasis {
    /// Two independent standard Gaussian base vectors.
    pub fn sample(dim: usize, seed_value: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("projection.dim", "must be positive"));
        }
        let mut rng = seed::rng(seed_value, &[seed::STREAM_BASIS]);
        let mut draw = || ModelVector::from_fn(dim, |_, _| StandardNormal.sample(&mut rng));
        let wx = draw();
        let wy = draw();
        Self::new(wx, wy, seed_value)
    }

    pub fn new(wx: ModelVector, wy: ModelVector, seed: u64) -> Result<Self> {
        check_dim(wx.len(), &wy)?;
        if wx.norm() == 0.0 || wy.norm() == 0.0 {
            return Err(Error::config("projection.basis", "base vectors must be nonzero"));
        }
        Ok(Self { wx, wy, seed })
    }

    pub fn dim(&self) -> usize {
        self.wx.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMode {
    /// `<W, W_x> / ||W_x||^2`, signed and linear in `W`.
    #[default]
    Normalized,
    /// `||W|| |cos(W, W_x)| / ||W_x||`, never negative.
    Literal,
}

/// Restrict a model to a contiguous coordinate block before projecting.
pub fn select(model: &ModelVector, range: Option<Range<usize>>) -> Result<ModelVector> {
    match range {
        None => Ok(model.clone()),
        Some(r) => {
            if r.start > r.end || r.end > model.len() {
                return Err(Error::config(
                    "projection.range",
                    format!("{}..{} outside a model of length {}", r.start, r.end, model.len()),
                ));
            }
            Ok(model.rows(r.start, r.end - r.start).into_owned())
        }
    }
}

fn coordinate(model: &ModelVector, base: &ModelVector, mode: ProjectionMode) -> f64 {
    let bn2 = base.norm_squared();
    match mode {
        ProjectionMode::Normalized => model.dot(base) / bn2,
        ProjectionMode::Literal => model.dot(base).abs() / bn2,
    }
}

/// Plane coordinates of `model`; the zero model maps to the origin.
pub fn relative_position(model: &ModelVector, basis: &ProjectionBasis, mode: ProjectionMode) -> Result<(f64, f64)> {
    check_dim(basis.dim(), model)?;
    if model.norm() == 0.0 {
        return Ok((0.0, 0.0));
    }
    Ok((coordinate(model, &basis.wx, mode), coordinate(model, &basis.wy, mode)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    /// Points per axis (at least 2).
    pub resolution: usize,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 2 {
            return Err(Error::config("grid.resolution", "need at least 2 points per axis"));
        }
        let ok = |r: (f64, f64)| r.0.is_finite() && r.1.is_finite() && r.0 < r.1;
        if !ok(self.x_range) || !ok(self.y_range) {
            return Err(Error::config("grid.range", "ranges must be finite with lo < hi"));
        }
        Ok(())
    }

    fn coord(range: (f64, f64), k: usize, n: usize) -> f64 {
        range.0 + (range.1 - range.0) * (k as f64 / (n - 1) as f64)
    }

    pub fn x(&self, k: usize) -> f64 {
        Self::coord(self.x_range, k, self.resolution)
    }

    pub fn y(&self, k: usize) -> f64 {
        Self::coord(self.y_range, k, self.resolution)
    }

    /// The grid with every cell split in two along each axis.
    pub fn refined(&self) -> Self {
        Self {
            resolution: 2 * self.resolution - 1,
            ..*self
        }
    }
}

/// `grid[(r, c)] = f(anchor + (x_c - ax) W_x + (y_r - ay) W_y)`.
pub fn landscape_grid(
    obj: &ClientObjective,
    anchor: &ModelVector,
    basis: &ProjectionBasis,
    anchor_coords: (f64, f64),
    grid: &GridSpec,
) -> Result<DMatrix<f64>> {
    grid.validate()?;
    check_dim(obj.dim(), anchor)?;
    check_dim(basis.dim(), anchor)?;
    let n = grid.resolution;
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|r| {
            let dy = grid.y(r) - anchor_coords.1;
            (0..n)
                .map(|c| {
                    let dx = grid.x(c) - anchor_coords.0;
                    let mut point = anchor.clone();
                    point.axpy(dx, &basis.wx, 1.0);
                    point.axpy(dy, &basis.wy, 1.0);
                    obj.evaluate(&point)
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    Ok(DMatrix::from_fn(n, n, |r, c| rows[r][c]))
}

/// Pointwise minimum of per-client grids. Each client is anchored at
/// `anchors[i]` (default: its optimum) placed at its own plane coordinates.
pub fn gathered_landscape(
    pop: &ClientPopulation,
    basis: &ProjectionBasis,
    grid: &GridSpec,
    anchors: Option<&[ModelVector]>,
) -> Result<DMatrix<f64>> {
    let default: Vec<ModelVector>;
    let anchors = match anchors {
        Some(a) => {
            if a.len() != pop.len() {
                return Err(Error::LengthMismatch {
                    what: "clients/anchors",
                    left: pop.len(),
                    right: a.len(),
                });
            }
            a
        }
        None => {
            default = pop.optima()?;
            &default
        }
    };
    let mut out: Option<DMatrix<f64>> = None;
    for (client, anchor) in pop.clients().iter().zip(anchors) {
        let coords = relative_position(anchor, basis, ProjectionMode::Normalized)?;
        let g = landscape_grid(client, anchor, basis, coords, grid)?;
        out = Some(match out {
            None => g,
            Some(acc) => acc.zip_map(&g, f64::min),
        });
    }
    out.ok_or(Error::Empty("population"))
}

/// Row-major CSV, rows ordered by increasing y; the header line records
/// the ranges and resolution.
pub fn grid_to_csv(grid: &DMatrix<f64>, spec: &GridSpec) -> String {
    let mut s = format!(
        "# x_range={}:{} y_range={}:{} resolution={}\n",
        spec.x_range.0, spec.x_range.1, spec.y_range.0, spec.y_range.1, spec.resolution
    );
    for r in 0..grid.nrows() {
        let row: Vec<String> = (0..grid.ncols()).map(|c| format!("{:e}", grid[(r, c)])).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrajectoryPoint {
    pub round: usize,
    pub x: f64,
    pub y: f64,
    pub distance: f64,
    pub in_region: bool,
}

pub fn trajectory_to_csv(points: &[TrajectoryPoint]) -> String {
    let mut s = String::from("t,x,y,distance,in_region\n");
    for p in points {
        let _ = writeln!(s, "{},{:e},{:e},{:e},{}", p.round, p.x, p.y, p.distance, p.in_region);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::QuadraticObjective;
    use approx::assert_relative_eq;

    fn v(xs: &[f64]) -> ModelVector {
        ModelVector::from_vec(xs.to_vec())
    }

    fn basis2() -> ProjectionBasis {
        ProjectionBasis::new(v(&[1.0, 0.0]), v(&[0.0, 1.0]), 0).unwrap()
    }

    #[test]
    fn self_projection_and_orthogonality() {
        let b = ProjectionBasis::sample(6, 4).unwrap();
        let (x, _) = relative_position(&b.wx, &b, ProjectionMode::Normalized).unwrap();
        assert_relative_eq!(x, 1.0, epsilon = 1e-15);
        let (x2, _) = relative_position(&(&b.wx * 2.0), &b, ProjectionMode::Normalized).unwrap();
        assert_relative_eq!(x2, 2.0, epsilon = 1e-15);

        let e = basis2();
        let (x, y) = relative_position(&v(&[0.0, 3.0]), &e, ProjectionMode::Normalized).unwrap();
        assert_eq!((x, y), (0.0, 3.0));
        assert_eq!(relative_position(&v(&[0.0, 0.0]), &e, ProjectionMode::Normalized).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn literal_mode_drops_sign() {
        let e = basis2();
        let (x, y) = relative_position(&v(&[-2.0, 1.0]), &e, ProjectionMode::Literal).unwrap();
        assert_eq!((x, y), (2.0, 1.0));
        let (x, _) = relative_position(&v(&[-2.0, 1.0]), &e, ProjectionMode::Normalized).unwrap();
        assert_eq!(x, -2.0);
    }

    #[test]
    fn positive_homogeneity() {
        let b = ProjectionBasis::sample(5, 1).unwrap();
        let m = v(&[0.3, -1.0, 2.0, 0.0, 0.7]);
        let (x, y) = relative_position(&m, &b, ProjectionMode::Normalized).unwrap();
        let (xs, ys) = relative_position(&(&m * 3.5), &b, ProjectionMode::Normalized).unwrap();
        assert_relative_eq!(xs, 3.5 * x, max_relative = 1e-14);
        assert_relative_eq!(ys, 3.5 * y, max_relative = 1e-14);
    }

    #[test]
    fn selector_slices() {
        let m = v(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(select(&m, Some(1..3)).unwrap(), v(&[2.0, 3.0]));
        assert_eq!(select(&m, None).unwrap(), m);
        assert!(select(&m, Some(2..9)).is_err());
    }

    fn quad(center: &[f64]) -> ClientObjective {
        QuadraticObjective::new(
            v(center),
            DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.0, 0.3, 1.0, 0.1, 0.0, 0.1, 0.5]),
            0.2,
        )
        .unwrap()
        .into()
    }

    #[test]
    fn anchor_grid_point_is_exact() {
        let obj = quad(&[0.5, -1.0, 2.0]);
        let b = ProjectionBasis::sample(3, 2).unwrap();
        let anchor = v(&[1.0, 1.0, 1.0]);
        let coords = (0.25, -0.5);
        let grid = GridSpec {
            x_range: (-0.75, 1.25),
            y_range: (-1.5, 0.5),
            resolution: 5,
        };
        assert_eq!(grid.x(2), 0.25);
        assert_eq!(grid.y(2), -0.5);
        let g = landscape_grid(&obj, &anchor, &b, coords, &grid).unwrap();
        assert_eq!(g[(2, 2)], obj.evaluate(&anchor).unwrap());
    }

    #[test]
    fn quadratic_restricted_to_plane_is_quadratic() {
        let obj = quad(&[0.5, -1.0, 2.0]);
        let b = ProjectionBasis::sample(3, 2).unwrap();
        let anchor = v(&[1.0, 0.0, -1.0]);
        let grid = GridSpec {
            x_range: (-2.0, 2.0),
            y_range: (-1.0, 3.0),
            resolution: 9,
        };
        let g = landscape_grid(&obj, &anchor, &b, (0.0, 0.0), &grid).unwrap();
        let n = grid.resolution;
        let design = DMatrix::from_fn(n * n, 6, |k, col| {
            let (x, y) = (grid.x(k % n), grid.y(k / n));
            [1.0, x, y, x * x, x * y, y * y][col]
        });
        let target = ModelVector::from_fn(n * n, |k, _| g[(k / n, k % n)]);
        let coef = design.clone().svd(true, true).solve(&target, 1e-14).unwrap();
        let resid = (&design * coef - &target).norm() / target.norm();
        assert!(resid <= 1e-9, "fit residual {resid}");
    }

    #[test]
    fn refinement_keeps_coincident_values() {
        let obj = quad(&[0.5, -1.0, 2.0]);
        let b = ProjectionBasis::sample(3, 3).unwrap();
        let anchor = v(&[0.0, 0.0, 0.0]);
        let grid = GridSpec {
            x_range: (-1.3, 2.1),
            y_range: (-0.7, 0.9),
            resolution: 6,
        };
        let coarse = landscape_grid(&obj, &anchor, &b, (0.1, 0.2), &grid).unwrap();
        let fine = landscape_grid(&obj, &anchor, &b, (0.1, 0.2), &grid.refined()).unwrap();
        for r in 0..6 {
            for c in 0..6 {
                assert_eq!(coarse[(r, c)], fine[(2 * r, 2 * c)]);
            }
        }
    }

    #[test]
    fn gathered_is_pointwise_min() {
        let p1 = ClientPopulation::uniform(vec![quad(&[0.0, 0.0, 0.0])]).unwrap();
        let b = ProjectionBasis::sample(3, 5).unwrap();
        let grid = GridSpec {
            x_range: (-1.0, 1.0),
            y_range: (-1.0, 1.0),
            resolution: 7,
        };
        let single = gathered_landscape(&p1, &b, &grid, None).unwrap();
        let own = landscape_grid(p1.client(0), &v(&[0.0, 0.0, 0.0]), &b, (0.0, 0.0), &grid).unwrap();
        assert_eq!(single, own);

        let p2 = ClientPopulation::uniform(vec![quad(&[0.0, 0.0, 0.0]), quad(&[1.0, -2.0, 0.5])]).unwrap();
        let g = gathered_landscape(&p2, &b, &grid, None).unwrap();
        let optima = p2.optima().unwrap();
        for (c, o) in p2.clients().iter().zip(&optima) {
            let coords = relative_position(o, &b, ProjectionMode::Normalized).unwrap();
            let own = landscape_grid(c, o, &b, coords, &grid).unwrap();
            assert!(g.iter().zip(own.iter()).all(|(a, b)| a <= b));
        }
    }

    #[test]
    fn two_basins_near_projected_optima() {
        let make = |c: &[f64]| -> ClientObjective { QuadraticObjective::isotropic(v(c), 1.0, 0.0).unwrap().into() };
        let pop = ClientPopulation::uniform(vec![make(&[-2.0, 0.0]), make(&[2.0, 1.0])]).unwrap();
        let b = basis2();
        let grid = GridSpec {
            x_range: (-4.0, 4.0),
            y_range: (-3.0, 3.0),
            resolution: 41,
        };
        let g = gathered_landscape(&pop, &b, &grid, None).unwrap();
        let cell_x = 8.0 / 40.0;
        let cell_y = 6.0 / 40.0;
        let mut minima = Vec::new();
        for r in 1..40 {
            for c in 1..40 {
                let v0 = g[(r, c)];
                let nb = [g[(r - 1, c)], g[(r + 1, c)], g[(r, c - 1)], g[(r, c + 1)]];
                if nb.iter().all(|&n| v0 < n) {
                    minima.push((grid.x(c), grid.y(r)));
                }
            }
        }
        assert_eq!(minima.len(), 2, "{minima:?}");
        for (ox, oy) in [(-2.0, 0.0), (2.0, 1.0)] {
            assert!(minima
                .iter()
                .any(|(x, y)| (x - ox).abs() <= cell_x && (y - oy).abs() <= cell_y));
        }
    }

    #[test]
    fn csv_exports() {
        let g = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let spec = GridSpec {
            x_range: (0.0, 1.0),
            y_range: (0.0, 1.0),
            resolution: 2,
        };
        let csv = grid_to_csv(&g, &spec);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("# x_range=0:1"));
        let t = trajectory_to_csv(&[TrajectoryPoint {
            round: 0,
            x: 1.0,
            y: 2.0,
            distance: 0.5,
            in_region: true,
        }]);
        assert_eq!(t.lines().nth(1).unwrap(), "0,1e0,2e0,5e-1,true");
    }
}
