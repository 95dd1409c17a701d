//! Shared fixtures for the benchmarks.

use fedhet_core::objectives::{ClientObjective, QuadraticObjective};
use fedhet_core::seed::{rng, SimRng};
use fedhet_core::theory::ClientRoundRecord;
use fedhet_core::verify::{random_quadratic, random_weights};
use fedhet_core::{run_local, LocalMethod, LocalSolverConfig, ModelVector};
use rand::Rng;

fn gaussian(d: usize, scale: f64, rng: &mut SimRng) -> ModelVector {
    ModelVector::from_fn(d, |_, _| {
        // Box-Muller, one draw per coordinate
        let u: f64 = rng.random_range(f64::EPSILON..1.0);
        let v: f64 = rng.random();
        scale * (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
    })
}

/// One round of `n` anisotropic quadratic clients in dimension `d`.
pub struct Fixture {
    pub x_t: ModelVector,
    pub clients: Vec<ClientObjective>,
    pub weights: Vec<f64>,
    pub solver: LocalSolverConfig,
}

impl Fixture {
    pub fn new(n: usize, d: usize, steps: usize, seed: u64) -> Self {
        let mut r = rng(seed, &[]);
        let quads: Vec<QuadraticObjective> = (0..n)
            .map(|_| {
                let c = gaussian(d, 3.0, &mut r);
                random_quadratic(d, c, &mut r).expect("well-formed quadratic")
            })
            .collect();
        let lmax = quads.iter().map(|q| q.lambda_max()).fold(0.0, f64::max);
        Self {
            x_t: gaussian(d, 10.0, &mut r),
            weights: random_weights(n, &mut r),
            clients: quads.into_iter().map(ClientObjective::Quadratic).collect(),
            solver: LocalSolverConfig::new(LocalMethod::Gd, steps, 0.5 / lmax),
        }
    }

    pub fn records(&self) -> Vec<ClientRoundRecord> {
        self.clients
            .iter()
            .zip(&self.weights)
            .enumerate()
            .map(|(i, (c, &w))| {
                let r = run_local(c, &self.x_t, &self.solver, None).expect("local run");
                ClientRoundRecord::from_result(i, c.optimum().expect("quadratic").clone(), w, &r)
            })
            .collect()
    }

    /// The aggregated next model with unit server step.
    pub fn next_model(&self, records: &[ClientRoundRecord]) -> ModelVector {
        let total: f64 = records.iter().map(|r| r.weight).sum();
        records
            .iter()
            .fold(ModelVector::zeros(self.x_t.len()), |acc, r| acc + (&r.optimum + &r.delta_end) * (r.weight / total))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_is_deterministic() {
        let a = Fixture::new(4, 3, 2, 9);
        let b = Fixture::new(4, 3, 2, 9);
        assert_eq!(a.x_t, b.x_t);
        assert_eq!(a.records().len(), 4);
    }
}
