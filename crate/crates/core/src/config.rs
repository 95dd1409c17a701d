//! Experiment configuration (TOML or JSON) and population construction.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::ModelVector;
use crate::local_solvers::LocalSolverConfig;
use crate::objectives::{Averaging, ClientObjective, ClientPopulation, LogisticObjective, QuadraticObjective};
use crate::partition::{client_objectives, make_synthetic_dataset, split, PartitionSpec};
use crate::seed::{self, SimRng};
use crate::server::{AdaptiveMode, CorrectionSource, ParticipationPolicy, Schedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimaDistribution {
    Gaussian,
    /// Unit-variance Laplace per coordinate.
    Laplace,
    /// First half Gaussian, second half Laplace.
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PopulationSpec {
    /// `f_i(x) = curvature/2 ||x - x*_i||^2 + offset` with random optima.
    Paraboloid {
        num_clients: usize,
        dim: usize,
        distribution: OptimaDistribution,
        #[serde(default = "default_one")]
        scale: f64,
        #[serde(default = "default_two")]
        curvature: f64,
        #[serde(default)]
        offset: f64,
    },
    /// Population described in a JSON file.
    File { path: PathBuf },
    /// Logistic clients over a synthetic dataset split by Dirichlet proportions.
    LogisticDirichlet {
        num_clients: usize,
        alpha: f64,
        #[serde(default = "default_classes")]
        num_classes: usize,
        samples_per_class: usize,
        feature_dim: usize,
        #[serde(default = "default_one")]
        class_separation: f64,
        #[serde(default = "default_l2")]
        l2_reg: f64,
        #[serde(default = "default_one_usize")]
        min_threshold: usize,
    },
}

fn default_one() -> f64 {
    1.0
}
fn default_two() -> f64 {
    2.0
}
fn default_classes() -> usize {
    10
}
fn default_l2() -> f64 {
    1e-2
}
fn default_one_usize() -> usize {
    1
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    LaFedavg,
    Dc,
    Sa,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerSpec {
    pub algorithm: Algorithm,
    #[serde(default = "default_unit_schedule")]
    pub global_lr: Schedule,
    #[serde(default)]
    pub nu: Option<Schedule>,
    #[serde(default)]
    pub beta: Option<Schedule>,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default)]
    pub adaptive: AdaptiveMode,
    #[serde(default)]
    pub correction: CorrectionSource,
    /// Starting model; zeros when absent.
    #[serde(default)]
    pub initial: Option<Vec<f64>>,
}

fn default_unit_schedule() -> Schedule {
    Schedule::Constant(1.0)
}
fn default_beta2() -> f64 {
    0.99
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsSpec {
    #[serde(default = "default_true")]
    pub identities: bool,
    #[serde(default)]
    pub dump_a: bool,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    /// Averaging used for the reported global objective.
    #[serde(default)]
    pub averaging: Averaging,
}

fn default_tolerance() -> f64 {
    1e-9
}

impl Default for DiagnosticsSpec {
    fn default() -> Self {
        Self {
            identities: true,
            dump_a: false,
            tolerance: default_tolerance(),
            averaging: Averaging::Uniform,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default = "default_out_dir")]
    pub dir: PathBuf,
    #[serde(default = "default_log")]
    pub log: String,
    #[serde(default = "default_summary")]
    pub summary: String,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_log() -> String {
    "trajectory.jsonl".into()
}
fn default_summary() -> String {
    "summary.json".into()
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self {
            dir: default_out_dir(),
            log: default_log(),
            summary: default_summary(),
        }
    }
}

/// Linear decay of the local learning rate to zero over the last rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrDecaySpec {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "default_decay_fraction")]
    pub final_fraction: f64,
}

fn default_decay_fraction() -> f64 {
    0.1
}

impl Default for LrDecaySpec {
    fn default() -> Self {
        Self {
            enabled: false,
            final_fraction: default_decay_fraction(),
        }
    }
}

impl LrDecaySpec {
    /// Multiplier of the local learning rate in round `t` of `rounds`.
    pub fn factor(&self, t: usize, rounds: usize) -> f64 {
        if !self.enabled || rounds == 0 {
            return 1.0;
        }
        let span = ((self.final_fraction * rounds as f64).ceil() as usize).clamp(1, rounds);
        let start = rounds - span;
        if t < start {
            1.0
        } else {
            (rounds - t) as f64 / span as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub rounds: usize,
    pub population: PopulationSpec,
    pub solver: LocalSolverConfig,
    pub server: ServerSpec,
    #[serde(default)]
    pub participation: ParticipationPolicy,
    #[serde(default)]
    pub diagnostics: DiagnosticsSpec,
    #[serde(default)]
    pub output: OutputSpec,
    #[serde(default)]
    pub lr_decay: LrDecaySpec,
}

fn deserialize_value<T: DeserializeOwned>(value: serde_json::Value) -> Result<T> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        Error::Config {
            field: if path == "." { "<root>".into() } else { path },
            message: e.into_inner().to_string(),
        }
    })
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::config("<toml>", e.to_string().trim_end()))?;
        let value = serde_json::to_value(table)?;
        let cfg: Self = deserialize_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::config("<json>", e.to_string()))?;
        let cfg: Self = deserialize_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load by extension (`.json` is JSON, anything else TOML). Relative
    /// population paths resolve against the config's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = if path.extension().is_some_and(|e| e == "json") {
            Self::from_json_str(&text)?
        } else {
            Self::from_toml_str(&text)?
        };
        if let PopulationSpec::File { path: p } = &mut cfg.population {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.solver.validate()?;
        self.participation.validate()?;
        let s = &self.server;
        s.global_lr.validate_positive("server.global_lr")?;
        if s.algorithm == Algorithm::LaFedavg && s.global_lr != Schedule::Constant(1.0) {
            return Err(Error::config("server.global_lr", "la_fedavg uses a unit global step"));
        }
        if s.algorithm == Algorithm::Sa {
            let nu = s.nu.as_ref().ok_or_else(|| Error::config("server.nu", "required for sa"))?;
            let beta = s.beta.as_ref().ok_or_else(|| Error::config("server.beta", "required for sa"))?;
            nu.validate_unit("server.nu")?;
            beta.validate_unit("server.beta")?;
        }
        if !(0.0..=1.0).contains(&s.beta2) {
            return Err(Error::config("server.beta2", "must lie in [0, 1]"));
        }
        if s.algorithm != Algorithm::Dc && s.correction != CorrectionSource::None {
            return Err(Error::config("server.correction", "corrections apply to dc only"));
        }
        if !(self.lr_decay.final_fraction > 0.0 && self.lr_decay.final_fraction <= 1.0) {
            return Err(Error::config("lr_decay.final_fraction", "must lie in (0, 1]"));
        }
        if !(self.diagnostics.tolerance > 0.0) {
            return Err(Error::config("diagnostics.tolerance", "must be > 0"));
        }
        match &self.population {
            PopulationSpec::Paraboloid {
                num_clients,
                dim,
                scale,
                curvature,
                offset,
                ..
            } => {
                if *num_clients == 0 || *dim == 0 {
                    return Err(Error::config("population", "num_clients and dim must be positive"));
                }
                if !(*curvature > 0.0) || !(*scale >= 0.0) || !(*offset >= 0.0) {
                    return Err(Error::config("population", "need curvature > 0, scale >= 0, offset >= 0"));
                }
                if let Some(x0) = &s.initial {
                    if x0.len() != *dim {
                        return Err(Error::config("server.initial", format!("expected {dim} entries, got {}", x0.len())));
                    }
                }
            }
            PopulationSpec::LogisticDirichlet { num_clients, alpha, .. } => {
                PartitionSpec {
                    num_clients: *num_clients,
                    alpha: *alpha,
                    min_threshold: 0,
                    seed: 0,
                }
                .validate()?;
            }
            PopulationSpec::File { .. } => {}
        }
        Ok(())
    }
}

fn laplace(rng: &mut SimRng) -> f64 {
    // unit variance: scale 1/sqrt(2)
    let u: f64 = rng.random::<f64>() - 0.5;
    -u.signum() * (1.0 - 2.0 * u.abs()).ln() / std::f64::consts::SQRT_2
}

/// Random optima for a paraboloid population.
pub fn sample_optima(num_clients: usize, dim: usize, dist: OptimaDistribution, scale: f64, rng: &mut SimRng) -> Vec<ModelVector> {
    (0..num_clients)
        .map(|i| {
            let gaussian = match dist {
                OptimaDistribution::Gaussian => true,
                OptimaDistribution::Laplace => false,
                OptimaDistribution::Mixed => i < num_clients.div_ceil(2),
            };
            ModelVector::from_fn(dim, |_, _| {
                let z: f64 = if gaussian { StandardNormal.sample(rng) } else { laplace(rng) };
                scale * z
            })
        })
        .collect()
}

#[derive(Debug, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
enum ClientEntry {
    Quadratic {
        center: Vec<f64>,
        curvature: CurvatureEntry,
        #[serde(default)]
        offset: f64,
    },
    Logistic { data_ref: PathBuf },
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum CurvatureEntry {
    Named(String),
    Scaled(f64),
    Dense(Vec<Vec<f64>>),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PopulationFile {
    dim: usize,
    clients: Vec<ClientEntry>,
    #[serde(default)]
    weights: Option<Vec<f64>>,
}

/// Sample file referenced by a logistic client entry.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogisticDataFile {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    #[serde(default)]
    pub l2_reg: f64,
}

fn dense(rows: &[Vec<f64>], field: &str) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(Error::config(field, "ragged matrix rows"));
    }
    Ok(DMatrix::from_fn(n, m, |r, c| rows[r][c]))
}

/// Parse a population file; `base` resolves relative `data_ref` paths.
pub fn population_from_json(text: &str, base: &Path) -> Result<ClientPopulation> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::config("<population>", e.to_string()))?;
    let file: PopulationFile = deserialize_value(value)?;
    let mut clients = Vec::with_capacity(file.clients.len());
    for (i, entry) in file.clients.into_iter().enumerate() {
        let obj: ClientObjective = match entry {
            ClientEntry::Quadratic {
                center,
                curvature,
                offset,
            } => {
                if center.len() != file.dim {
                    return Err(Error::DimensionMismatch {
                        expected: file.dim,
                        got: center.len(),
                    });
                }
                let d = file.dim;
                let q = match curvature {
                    CurvatureEntry::Named(n) if n == "identity" => DMatrix::identity(d, d),
                    CurvatureEntry::Named(n) => {
                        return Err(Error::config(format!("clients[{i}].curvature"), format!("unknown curvature '{n}'")))
                    }
                    CurvatureEntry::Scaled(s) => DMatrix::identity(d, d) * s,
                    CurvatureEntry::Dense(rows) => dense(&rows, &format!("clients[{i}].curvature"))?,
                };
                QuadraticObjective::new(ModelVector::from_vec(center), q, offset)?.into()
            }
            ClientEntry::Logistic { data_ref } => {
                let p = if data_ref.is_relative() { base.join(data_ref) } else { data_ref };
                let text = std::fs::read_to_string(&p)?;
                let data: LogisticDataFile = deserialize_value(serde_json::from_str(&text)?)?;
                let l = LogisticObjective::new(
                    dense(&data.features, &format!("clients[{i}].features"))?,
                    data.labels,
                    data.num_classes,
                    data.l2_reg,
                )?;
                if l.dim() != file.dim {
                    return Err(Error::DimensionMismatch {
                        expected: file.dim,
                        got: l.dim(),
                    });
                }
                l.into()
            }
        };
        clients.push(obj);
    }
    match file.weights {
        Some(w) => ClientPopulation::new(clients, w),
        None => ClientPopulation::uniform(clients),
    }
}

/// Build the population of a config with every optimum resolved.
pub fn build_population(spec: &PopulationSpec, master_seed: u64) -> Result<ClientPopulation> {
    let mut rng = seed::rng(master_seed, &[seed::STREAM_POPULATION]);
    let mut pop = match spec {
        PopulationSpec::Paraboloid {
            num_clients,
            dim,
            distribution,
            scale,
            curvature,
            offset,
        } => {
            let optima = sample_optima(*num_clients, *dim, *distribution, *scale, &mut rng);
            let clients = optima
                .into_iter()
                .map(|o| QuadraticObjective::isotropic(o, *curvature, *offset).map(ClientObjective::from))
                .collect::<Result<Vec<_>>>()?;
            ClientPopulation::uniform(clients)?
        }
        PopulationSpec::File { path } => {
            let text = std::fs::read_to_string(path)?;
            population_from_json(&text, path.parent().unwrap_or(Path::new(".")))?
        }
        PopulationSpec::LogisticDirichlet {
            num_clients,
            alpha,
            num_classes,
            samples_per_class,
            feature_dim,
            class_separation,
            l2_reg,
            min_threshold,
        } => {
            let data = make_synthetic_dataset(*num_classes, *samples_per_class, *feature_dim, *class_separation, seed::derive(master_seed, &[seed::STREAM_DATASET]))?;
            let part = split(
                &data.labels,
                &PartitionSpec {
                    num_clients: *num_clients,
                    alpha: *alpha,
                    min_threshold: *min_threshold,
                    seed: seed::derive(master_seed, &[seed::STREAM_PARTITION]),
                },
            )?;
            let clients = client_objectives(&data, &part, *l2_reg)?.into_iter().map(ClientObjective::from).collect();
            ClientPopulation::uniform(clients)?
        }
    };
    pop.resolve_optima()?;
    Ok(pop)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 3
rounds = 5

[population]
kind = "paraboloid"
num_clients = 4
dim = 2
distribution = "mixed"

[solver]
method = "gd"
steps = 2
local_lr = 0.1

[server]
algorithm = "la_fedavg"
"#;

    #[test]
    fn parses_minimal_toml() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(cfg.rounds, 5);
        assert_eq!(cfg.server.algorithm, Algorithm::LaFedavg);
        assert_eq!(cfg.participation, ParticipationPolicy::default());
        assert_eq!(cfg.diagnostics.tolerance, 1e-9);
    }

    #[test]
    fn bad_algorithm_names_field() {
        let text = MINIMAL.replace("la_fedavg", "fedprox");
        match ExperimentConfig::from_toml_str(&text) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "server.algorithm"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_field_rejected() {
        let text = MINIMAL.replace("steps = 2", "steps = 2\nstepz = 3");
        assert!(matches!(ExperimentConfig::from_toml_str(&text), Err(Error::Config { .. })));
    }

    #[test]
    fn syntax_error_mentions_line() {
        let err = ExperimentConfig::from_toml_str("seed = \nrounds = 2").unwrap_err();
        assert!(err.to_string().contains("line"), "{err}");
    }

    #[test]
    fn sa_requires_momentum_schedules() {
        let text = MINIMAL.replace("la_fedavg", "sa");
        match ExperimentConfig::from_toml_str(&text) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "server.nu"),
            other => panic!("unexpected {other:?}"),
        }
        let ok = text.replace("algorithm = \"sa\"", "algorithm = \"sa\"\nnu = 0.7\nbeta = 0.9");
        assert!(ExperimentConfig::from_toml_str(&ok).is_ok());
    }

    #[test]
    fn json_and_toml_agree() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json_str(&json).unwrap(), cfg);
    }

    #[test]
    fn decay_factor_reaches_small_values() {
        let d = LrDecaySpec {
            enabled: true,
            final_fraction: 0.2,
        };
        assert_eq!(d.factor(0, 100), 1.0);
        assert_eq!(d.factor(79, 100), 1.0);
        assert_eq!(d.factor(80, 100), 1.0);
        assert_eq!(d.factor(90, 100), 0.5);
        assert_eq!(d.factor(99, 100), 0.05);
        assert_eq!(LrDecaySpec::default().factor(99, 100), 1.0);
    }

    #[test]
    fn laplace_has_unit_variance() {
        let mut rng = seed::rng(1, &[]);
        let xs: Vec<f64> = (0..200_000).map(|_| laplace(&mut rng)).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        assert!(mean.abs() < 0.01);
        assert!((var - 1.0).abs() < 0.02, "{var}");
    }

    #[test]
    fn population_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data = LogisticDataFile {
            features: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            labels: vec![0, 1],
            num_classes: 2,
            l2_reg: 0.1,
        };
        std::fs::write(dir.path().join("c.json"), serde_json::to_string(&data).unwrap()).unwrap();
        let text = r#"{"dim": 4, "clients": [
            {"type": "quadratic", "center": [0, 1, 2, 3], "curvature": "identity", "offset": 0.5},
            {"type": "quadratic", "center": [1, 1, 1, 1], "curvature": [[2,0,0,0],[0,2,0,0],[0,0,2,0],[0,0,0,2]]},
            {"type": "logistic", "data_ref": "c.json"}
        ], "weights": [0.5, 0.25, 0.25]}"#;
        let mut pop = population_from_json(text, dir.path()).unwrap();
        pop.resolve_optima().unwrap();
        assert_eq!(pop.len(), 3);
        assert_eq!(pop.weights(), &[0.5, 0.25, 0.25]);
        assert!(population_from_json(r#"{"dim": 2, "clients": [{"type": "quadratic", "center": [0], "curvature": "identity"}]}"#, dir.path()).is_err());
    }

    #[test]
    fn build_population_is_seeded() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        let a = build_population(&cfg.population, 3).unwrap().optima().unwrap();
        let b = build_population(&cfg.population, 3).unwrap().optima().unwrap();
        let c = build_population(&cfg.population, 4).unwrap().optima().unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
