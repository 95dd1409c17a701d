//! One experiment per parameter value (and seed), summarized as CSV rows.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::config::{Algorithm, ExperimentConfig, PopulationSpec};
use crate::error::{Error, Result};
use crate::experiment::{run_experiment, ExperimentOutcome};
use crate::server::{ParticipationMode, Schedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    Alpha,
    Participation,
    Steps,
    LocalLr,
    Nu,
    Beta,
}

impl SweepParameter {
    pub fn name(self) -> &'static str {
        match self {
            SweepParameter::Alpha => "alpha",
            SweepParameter::Participation => "participation",
            SweepParameter::Steps => "K",
            SweepParameter::LocalLr => "eta_l",
            SweepParameter::Nu => "nu",
            SweepParameter::Beta => "beta",
        }
    }
}

impl fmt::Display for SweepParameter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepParameter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "alpha" => SweepParameter::Alpha,
            "participation" => SweepParameter::Participation,
            "K" | "k" | "steps" => SweepParameter::Steps,
            "eta_l" | "local_lr" => SweepParameter::LocalLr,
            "nu" => SweepParameter::Nu,
            "beta" => SweepParameter::Beta,
            other => {
                return Err(Error::config(
                    "param",
                    format!("unknown sweep parameter `{other}`, expected alpha, participation, K, eta_l, nu or beta"),
                ))
            }
        })
    }
}

/// `cfg` with `param` set to `value`.
pub fn apply(cfg: &ExperimentConfig, param: SweepParameter, value: f64) -> Result<ExperimentConfig> {
    let mut c = cfg.clone();
    match param {
        SweepParameter::Alpha => match &mut c.population {
            PopulationSpec::LogisticDirichlet { alpha, .. } => *alpha = value,
            _ => return Err(Error::config("population.kind", "alpha sweeps need a logistic_dirichlet population")),
        },
        SweepParameter::Participation => {
            c.participation.mode = ParticipationMode::UniformFraction;
            c.participation.fraction = value;
        }
        SweepParameter::Steps => {
            if value < 1.0 || value.fract() != 0.0 {
                return Err(Error::config("solver.steps", format!("K must be a positive integer, got {value}")));
            }
            c.solver.steps = value as usize;
        }
        SweepParameter::LocalLr => c.solver.local_lr = value,
        SweepParameter::Nu | SweepParameter::Beta => {
            if c.server.algorithm != Algorithm::Sa {
                return Err(Error::config("server.algorithm", format!("{param} sweeps need algorithm = \"sa\"")));
            }
            let slot = if param == SweepParameter::Nu { &mut c.server.nu } else { &mut c.server.beta };
            *slot = Some(Schedule::Constant(value));
        }
    }
    c.validate()?;
    Ok(c)
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub parameter: SweepParameter,
    pub value: f64,
    pub seed: u64,
    pub heterogeneity: f64,
    pub final_objective: f64,
    pub final_distance: f64,
    pub region_radius: Option<f64>,
    pub region_entry_round: Option<usize>,
    pub dwell_fraction: Option<f64>,
    /// Mean local contraction over all rounds and sampled clients.
    pub mean_sigma: f64,
    /// Same, restricted to rounds that start outside the region.
    pub mean_sigma_outside: Option<f64>,
    /// Variance over rounds of `||x*_S - centroid||`.
    pub center_distance_variance: f64,
    pub max_identity_residual: Option<f64>,
}

impl SweepRow {
    pub fn from_outcome(parameter: SweepParameter, value: f64, seed: u64, out: &ExperimentOutcome) -> Self {
        let mean = |it: &mut dyn Iterator<Item = f64>| {
            let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
            (n > 0).then(|| s / n as f64)
        };
        let mean_sigma = mean(&mut out.rounds.iter().flat_map(|r| r.sigma.iter().copied())).unwrap_or(f64::NAN);
        let mean_sigma_outside = mean(
            &mut out
                .rounds
                .iter()
                .filter(|r| r.start_in_region == Some(false))
                .flat_map(|r| r.sigma.iter().copied()),
        );
        let centers: Vec<f64> = out.rounds.iter().map(|r| r.weighted_center_distance).collect();
        let s = &out.summary;
        SweepRow {
            parameter,
            value,
            seed,
            heterogeneity: s.heterogeneity,
            final_objective: s.final_objective,
            final_distance: s.final_distance,
            region_radius: s.region_radius,
            region_entry_round: s.region_entry_round,
            dwell_fraction: s.dwell_fraction,
            mean_sigma,
            mean_sigma_outside,
            center_distance_variance: variance(&centers),
            max_identity_residual: s.max_identity_residual,
        }
    }
}

/// Population variance; zero for fewer than two values.
pub fn variance(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n
}

/// Run every `(value, seed)` pair. An empty seed list means the config seed.
pub fn run_sweep(cfg: &ExperimentConfig, param: SweepParameter, values: &[f64], seeds: &[u64]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::config("values", "sweep needs at least one value"));
    }
    let default_seed = [cfg.seed];
    let seeds = if seeds.is_empty() { &default_seed[..] } else { seeds };
    let mut rows = Vec::with_capacity(values.len() * seeds.len());
    for &value in values {
        let base = apply(cfg, param, value)?;
        for &s in seeds {
            let c = ExperimentConfig { seed: s, ..base.clone() };
            let out = run_experiment(&c, &mut std::io::sink())?;
            rows.push(SweepRow::from_outcome(param, value, s, &out));
        }
    }
    Ok(rows)
}

fn opt<T: fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map(|x| x.to_string()).unwrap_or_default()
}

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from(
        "parameter,value,seed,heterogeneity,final_objective,final_distance,region_radius,region_entry_round,\
         dwell_fraction,mean_sigma,mean_sigma_outside,center_distance_variance,max_identity_residual\n",
    );
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{:e},{:e},{:e},{},{},{},{:e},{},{:e},{}\n",
            r.parameter,
            r.value,
            r.seed,
            r.heterogeneity,
            r.final_objective,
            r.final_distance,
            opt(&r.region_radius),
            opt(&r.region_entry_round),
            opt(&r.dwell_fraction),
            r.mean_sigma,
            opt(&r.mean_sigma_outside),
            r.center_distance_variance,
            opt(&r.max_identity_residual),
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ExperimentConfig {
        ExperimentConfig::from_toml_str(
            r#"
seed = 4
rounds = 15
[population]
kind = "paraboloid"
num_clients = 10
dim = 2
distribution = "gaussian"
[solver]
method = "gd"
steps = 2
local_lr = 0.1
[server]
algorithm = "la_fedavg"
initial = [6.0, 6.0]
"#,
        )
        .unwrap()
    }

    #[test]
    fn parameter_names_parse() {
        for p in ["alpha", "participation", "K", "eta_l", "nu", "beta"] {
            assert_eq!(p.parse::<SweepParameter>().unwrap().name(), p);
        }
        assert!("gamma".parse::<SweepParameter>().is_err());
    }

    #[test]
    fn empty_values_rejected() {
        let err = run_sweep(&base(), SweepParameter::Steps, &[], &[]).unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "values"));
    }

    #[test]
    fn alpha_needs_logistic_population() {
        assert!(apply(&base(), SweepParameter::Alpha, 1.0).is_err());
        assert!(apply(&base(), SweepParameter::Nu, 0.5).is_err());
        assert!(apply(&base(), SweepParameter::Steps, 1.5).is_err());
    }

    #[test]
    fn k_sweep_rows_and_csv() {
        let rows = run_sweep(&base(), SweepParameter::Steps, &[1.0, 4.0], &[1, 2]).unwrap();
        assert_eq!(rows.len(), 4);
        // more local steps contract further towards each optimum
        assert!(rows[2].mean_sigma < rows[0].mean_sigma);
        let csv = sweep_to_csv(&rows);
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.starts_with("parameter,value,seed"));
    }

    #[test]
    fn full_participation_has_fixed_center() {
        let rows = run_sweep(&base(), SweepParameter::Participation, &[0.3, 1.0], &[]).unwrap();
        assert!(rows[0].center_distance_variance > 0.0);
        assert!(rows[1].center_distance_variance < 1e-20);
    }

    #[test]
    fn variance_of_constant_is_zero() {
        assert_eq!(variance(&[2.0, 2.0, 2.0]), 0.0);
        assert!((variance(&[1.0, 3.0]) - 1.0).abs() < 1e-15);
    }
}
