//! The round loop: sampling, parallel local runs, aggregation, server step
//! and per-round diagnostics, streamed as JSON lines.

use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{build_population, Algorithm, ExperimentConfig};
use crate::error::{Error, Result};
use crate::linalg::{to_vec, ModelVector};
use crate::local_solvers::{run_local, LocalRunResult, LocalSolverConfig};
use crate::objectives::{global_objective, heterogeneity, ClientPopulation};
use crate::seed;
use crate::server::{
    aggregate, oracle_correction, sample_round, step_dc, step_fedavg, step_sa, AdaptiveMode, ControlVariates,
    CorrectionSource, SaParams, ServerState,
};
use crate::theory::{
    compute_a, descent_from_a, mean_pairwise_cosine, verify_corrected_distance, verify_fedavg_distance,
    verify_momentum_distance, weighted_center, ClientRoundRecord, DcDiagnostics, FedavgDistanceCheck, Region,
    SaDiagnostics,
};

#[derive(Debug, Clone, Serialize)]
pub struct InitialLog {
    pub round: usize,
    pub x: Vec<f64>,
    pub center: Vec<f64>,
    pub distance: f64,
    pub in_region: Option<bool>,
    pub region_radius: Option<f64>,
    pub heterogeneity: f64,
    pub objective: f64,
}

/// One server step, mapping `x_t` (round `t`) to `x_{t+1}`.
#[derive(Debug, Clone, Serialize)]
pub struct RoundLog {
    pub round: usize,
    pub clients: Vec<usize>,
    pub weights: Vec<f64>,
    pub local_lr: f64,
    pub global_lr: f64,
    pub start_distance: f64,
    pub start_in_region: Option<bool>,
    pub x: Vec<f64>,
    pub distance: f64,
    pub in_region: Option<bool>,
    pub objective: f64,
    pub sigma: Vec<f64>,
    pub sigma_exceeds_one: usize,
    /// `||x*_S - centroid||` of the sampled, weighted optima center.
    pub weighted_center_distance: f64,
    pub descent: f64,
    pub descent_prefactored: f64,
    pub mean_pairwise_cos: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fedavg: Option<FedavgDistanceCheck>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corrected: Option<DcDiagnostics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub momentum: Option<SaDiagnostics>,
    /// Relative residual of whichever identity applies to this round.
    pub identity_residual: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogLine<'a> {
    Initial(&'a InitialLog),
    Round(&'a RoundLog),
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub rounds: usize,
    pub final_distance: f64,
    pub final_objective: f64,
    pub heterogeneity: f64,
    pub region_radius: Option<f64>,
    /// First `t` with `x_t` inside the region (0 = the starting point).
    pub region_entry_round: Option<usize>,
    /// Fraction of the iterates after first entry that lie in the region.
    pub dwell_fraction: Option<f64>,
    pub min_distance_after_entry: Option<f64>,
    pub max_identity_residual: Option<f64>,
    pub identity_checked_rounds: usize,
    pub identity_failures: usize,
    /// Rounds whose identity was not checked (elementwise adaptive steps).
    pub identity_unchecked_rounds: usize,
    pub sigma_exceeds_one_rounds: usize,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub initial: InitialLog,
    pub rounds: Vec<RoundLog>,
    pub summary: Summary,
    /// Per-round A matrices when requested.
    pub a_matrices: Vec<DMatrix<f64>>,
}

impl ExperimentOutcome {
    /// `||x_t - centroid||` for `t = 0..=T`.
    pub fn distances(&self) -> Vec<f64> {
        std::iter::once(self.initial.distance)
            .chain(self.rounds.iter().map(|r| r.distance))
            .collect()
    }
}

fn write_line<W: Write + ?Sized>(sink: &mut W, line: &LogLine<'_>) -> Result<()> {
    serde_json::to_writer(&mut *sink, line)?;
    sink.write_all(b"\n")?;
    Ok(())
}

fn local_config(cfg: &ExperimentConfig, t: usize, client: usize, lr: f64) -> LocalSolverConfig {
    LocalSolverConfig {
        local_lr: lr,
        noise_seed: seed::derive(cfg.seed, &[seed::STREAM_LOCAL, cfg.solver.noise_seed, t as u64, client as u64]),
        ..cfg.solver.clone()
    }
}

/// Run the configured experiment, streaming one JSON line per iterate into
/// `sink`. On error the lines written so far are flushed first.
pub fn run_experiment<W: Write + ?Sized>(cfg: &ExperimentConfig, sink: &mut W) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let pop = build_population(&cfg.population, cfg.seed)?;
    let result = run_with_population(cfg, &pop, sink);
    sink.flush()?;
    result
}

pub fn run_with_population<W: Write + ?Sized>(
    cfg: &ExperimentConfig,
    pop: &ClientPopulation,
    sink: &mut W,
) -> Result<ExperimentOutcome> {
    let optima = pop.optima()?;
    let dim = pop.dim();
    let region = if optima.len() >= 2 { Some(Region::from_optima(&optima)?) } else { None };
    let centroid = crate::linalg::centroid(&optima)?;
    let x0 = match &cfg.server.initial {
        Some(v) => {
            if v.len() != dim {
                return Err(Error::config("server.initial", format!("expected {dim} entries, got {}", v.len())));
            }
            ModelVector::from_vec(v.clone())
        }
        None => ModelVector::zeros(dim),
    };
    let averaging = cfg.diagnostics.averaging;
    let het = heterogeneity(&optima)?;
    let initial = InitialLog {
        round: 0,
        x: to_vec(&x0),
        center: to_vec(&centroid),
        distance: (&x0 - &centroid).norm(),
        in_region: region.as_ref().map(|r| r.contains(&x0)),
        region_radius: region.as_ref().map(|r| r.radius),
        heterogeneity: het,
        objective: global_objective(pop, &x0, averaging)?,
    };
    write_line(sink, &LogLine::Initial(&initial))?;

    let mut state = ServerState::new(x0);
    let mut variates = ControlVariates::new(pop.len(), dim);
    let mut rounds = Vec::with_capacity(cfg.rounds);
    let mut a_matrices = Vec::new();
    let tol = cfg.diagnostics.tolerance;

    for t in 0..cfg.rounds {
        let (clients, weights) = sample_round(pop, &cfg.participation, t)?;
        let lr = cfg.solver.local_lr * cfg.lr_decay.factor(t, cfg.rounds);
        let global_lr = cfg.server.global_lr.at(t);
        let x_t = state.x.clone();

        let corrections: Vec<Option<ModelVector>> = match (cfg.server.algorithm, cfg.server.correction) {
            (Algorithm::Dc, CorrectionSource::Scaffold) => variates.corrections(&clients).into_iter().map(Some).collect(),
            (Algorithm::Dc, CorrectionSource::Oracle { gamma }) => {
                let mut center = ModelVector::zeros(dim);
                for (&i, w) in clients.iter().zip(&weights) {
                    center.axpy(*w, &optima[i], 1.0);
                }
                let h = oracle_correction(&x_t, &center, gamma, lr, cfg.solver.steps);
                vec![Some(h); clients.len()]
            }
            _ => vec![None; clients.len()],
        };

        let results: Vec<LocalRunResult> = clients
            .par_iter()
            .zip(corrections.par_iter())
            .map(|(&i, h)| run_local(pop.client(i), &x_t, &local_config(cfg, t, i, lr), h.as_ref()))
            .collect::<Result<_>>()?;
        let g = aggregate(&clients, &results, &weights, &x_t)?;
        let records: Vec<ClientRoundRecord> = clients
            .iter()
            .zip(&weights)
            .zip(&results)
            .map(|((&i, &w), r)| ClientRoundRecord::from_result(i, optima[i].clone(), w, r))
            .collect();

        let mut fedavg = None;
        let mut corrected = None;
        let mut momentum = None;
        let next = match cfg.server.algorithm {
            Algorithm::LaFedavg => {
                let next = step_fedavg(&state, &g);
                if cfg.diagnostics.identities {
                    fedavg = Some(verify_fedavg_distance(&x_t, &next.x, &records)?);
                }
                next
            }
            Algorithm::Dc => {
                let next = step_dc(&state, &g, global_lr);
                if cfg.diagnostics.identities {
                    corrected = Some(verify_corrected_distance(&x_t, &next.x, &records, global_lr)?);
                }
                next
            }
            Algorithm::Sa => {
                let nu = cfg.server.nu.expect("validated").at(t);
                let beta = cfg.server.beta.expect("validated").at(t);
                let params = SaParams {
                    eta: global_lr,
                    nu,
                    beta,
                    beta2: cfg.server.beta2,
                    mode: cfg.server.adaptive,
                };
                let (next, info) = step_sa(&state, &g, &params);
                if cfg.diagnostics.identities && cfg.server.adaptive != AdaptiveMode::Elementwise {
                    momentum = Some(verify_momentum_distance(
                        &x_t,
                        &next.x,
                        &records,
                        info.eta_phi,
                        nu,
                        beta,
                        &info.momentum_prev,
                    )?);
                }
                next
            }
        };
        if cfg.server.algorithm == Algorithm::Dc && cfg.server.correction == CorrectionSource::Scaffold {
            variates.update(&clients, &results, &x_t, lr, cfg.solver.steps);
        }

        let a = compute_a(&records);
        let descent = descent_from_a(&records, &a);
        let n = records.len() as f64;
        let identity_residual = fedavg
            .map(|c| c.identity.relative_residual)
            .or(corrected.as_ref().map(|c| c.identity.relative_residual))
            .or(momentum.as_ref().map(|c| c.identity.relative_residual));
        let log = RoundLog {
            round: t,
            clients: clients.clone(),
            weights: weights.clone(),
            local_lr: lr,
            global_lr,
            start_distance: (&x_t - &centroid).norm(),
            start_in_region: region.as_ref().map(|r| r.contains(&x_t)),
            x: to_vec(&next.x),
            distance: (&next.x - &centroid).norm(),
            in_region: region.as_ref().map(|r| r.contains(&next.x)),
            objective: global_objective(pop, &next.x, averaging)?,
            sigma: results.iter().map(|r| r.sigma).collect(),
            sigma_exceeds_one: results.iter().filter(|r| r.sigma_exceeds_one).count(),
            weighted_center_distance: (weighted_center(&records)? - &centroid).norm(),
            descent,
            descent_prefactored: descent / (n * n),
            mean_pairwise_cos: if records.len() >= 2 { Some(mean_pairwise_cosine(&records)?) } else { None },
            fedavg,
            corrected,
            momentum,
            identity_residual,
        };
        write_line(sink, &LogLine::Round(&log))?;
        if cfg.diagnostics.dump_a {
            a_matrices.push(a);
        }
        rounds.push(log);
        state = next;
    }

    let summary = summarize(cfg, &initial, &rounds, region.as_ref(), het, tol);
    Ok(ExperimentOutcome {
        initial,
        rounds,
        summary,
        a_matrices,
    })
}

fn summarize(
    cfg: &ExperimentConfig,
    initial: &InitialLog,
    rounds: &[RoundLog],
    region: Option<&Region>,
    het: f64,
    tol: f64,
) -> Summary {
    let inside: Vec<bool> = std::iter::once(initial.in_region)
        .chain(rounds.iter().map(|r| r.in_region))
        .map(|v| v.unwrap_or(false))
        .collect();
    let distances: Vec<f64> = std::iter::once(initial.distance).chain(rounds.iter().map(|r| r.distance)).collect();
    let entry = region.and_then(|_| inside.iter().position(|&b| b));
    let after = entry.map(|e| e + 1..inside.len());
    let dwell = after
        .clone()
        .filter(|r| !r.is_empty())
        .map(|r| inside[r.clone()].iter().filter(|&&b| b).count() as f64 / r.len() as f64);
    let min_after = entry.map(|e| distances[e..].iter().cloned().fold(f64::INFINITY, f64::min));
    let residuals: Vec<f64> = rounds.iter().filter_map(|r| r.identity_residual).collect();
    let unchecked = if cfg.diagnostics.identities {
        rounds.len() - residuals.len()
    } else {
        0
    };
    Summary {
        rounds: rounds.len(),
        final_distance: *distances.last().expect("initial distance"),
        final_objective: rounds.last().map_or(initial.objective, |r| r.objective),
        heterogeneity: het,
        region_radius: region.map(|r| r.radius),
        region_entry_round: entry,
        dwell_fraction: dwell,
        min_distance_after_entry: min_after,
        max_identity_residual: residuals.iter().cloned().reduce(f64::max),
        identity_checked_rounds: residuals.len(),
        identity_failures: residuals.iter().filter(|&&r| !(r <= tol)).count(),
        identity_unchecked_rounds: unchecked,
        sigma_exceeds_one_rounds: rounds.iter().filter(|r| r.sigma_exceeds_one > 0).count(),
    }
}

/// A matrix as CSV rows.
pub fn matrix_to_csv(m: &DMatrix<f64>) -> String {
    let mut s = String::new();
    for r in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|c| format!("{:e}", m[(r, c)])).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}
