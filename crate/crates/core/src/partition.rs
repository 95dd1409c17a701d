//! Label-skewed client splits drawn from per-class Dirichlet proportions.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::LogisticObjective;
use crate::seed::{self, SimRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub num_clients: usize,
    pub alpha: f64,
    #[serde(default)]
    pub min_threshold: usize,
    #[serde(default)]
    pub seed: u64,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::config("partition.num_clients", "must be positive"));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::config("partition.alpha", "must be a finite number > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PartitionResult {
    /// Sorted sample indices per client.
    pub assignments: Vec<Vec<usize>>,
    /// `class_counts[i][c]`: samples of class `c` held by client `i`.
    pub class_counts: Vec<Vec<usize>>,
}

impl PartitionResult {
    pub fn num_clients(&self) -> usize {
        self.assignments.len()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.assignments)?)
    }

    pub fn class_counts_csv(&self) -> String {
        let k = self.class_counts.first().map_or(0, Vec::len);
        let mut out = String::from("client");
        for c in 0..k {
            out.push_str(&format!(",class_{c}"));
        }
        out.push('\n');
        for (i, row) in self.class_counts.iter().enumerate() {
            out.push_str(&i.to_string());
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

fn dirichlet(alpha: f64, n: usize, rng: &mut SimRng) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::config("partition.alpha", e.to_string()))?;
    let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 {
        return Ok(draws.iter().map(|g| g / total).collect());
    }
    // every draw underflowed: the small-alpha limit puts all mass on one client
    let mut p = vec![0.0; n];
    p[rng.random_range(0..n)] = 1.0;
    Ok(p)
}

fn num_classes(labels: &[usize]) -> usize {
    labels.iter().max().map_or(0, |m| m + 1)
}

/// Split sample indices across clients.
///
/// Each class draws one proportion vector over clients. Passes repeat while
/// any class still has unassigned samples; every pass visits clients in a
/// fresh random order and hands each client the next `ceil(p_i * n_c)`
/// samples of the class (`n_c` = samples still unassigned). Afterwards
/// clients below `min_threshold` receive random samples from the currently
/// largest client.
pub fn split(labels: &[usize], spec: &PartitionSpec) -> Result<PartitionResult> {
    spec.validate()?;
    if labels.is_empty() {
        return Err(Error::Empty("labels"));
    }
    let c = spec.num_clients;
    if spec.min_threshold.saturating_mul(c) > labels.len() {
        return Err(Error::InfeasiblePartition {
            min_threshold: spec.min_threshold,
            clients: c,
            total: labels.len(),
        });
    }
    let k = num_classes(labels);
    let mut rng = seed::rng(spec.seed, &[seed::STREAM_PARTITION]);
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &y) in labels.iter().enumerate() {
        pools[y].push(i);
    }
    let props: Vec<Vec<f64>> = (0..k).map(|_| dirichlet(spec.alpha, c, &mut rng)).collect::<Result<_>>()?;

    let mut assignments: Vec<Vec<usize>> = vec![Vec::new(); c];
    let mut order: Vec<usize> = (0..c).collect();
    let mut cursor = vec![0usize; k];
    while (0..k).any(|cl| cursor[cl] < pools[cl].len()) {
        order.shuffle(&mut rng);
        for cl in 0..k {
            let remaining = pools[cl].len() - cursor[cl];
            if remaining == 0 {
                continue;
            }
            for &i in &order {
                let left = pools[cl].len() - cursor[cl];
                let want = (props[cl][i] * remaining as f64).ceil() as usize;
                let take = want.min(left);
                assignments[i].extend_from_slice(&pools[cl][cursor[cl]..cursor[cl] + take]);
                cursor[cl] += take;
            }
        }
    }

    for i in 0..c {
        while assignments[i].len() < spec.min_threshold {
            let donor = (0..c)
                .max_by_key(|&j| (assignments[j].len(), std::cmp::Reverse(j)))
                .expect("at least one client");
            let pick = rng.random_range(0..assignments[donor].len());
            let moved = assignments[donor].swap_remove(pick);
            assignments[i].push(moved);
        }
    }

    for a in &mut assignments {
        a.sort_unstable();
    }
    let class_counts = assignments
        .iter()
        .map(|a| {
            let mut row = vec![0usize; k];
            for &idx in a {
                row[labels[idx]] += 1;
            }
            row
        })
        .collect();
    Ok(PartitionResult {
        assignments,
        class_counts,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct PartitionStats {
    pub total: usize,
    pub sizes: Vec<usize>,
    pub class_histograms: Vec<Vec<usize>>,
    /// Natural-log label entropy per client (0 for empty clients).
    pub label_entropy: Vec<f64>,
    /// Mean entropy over non-empty clients.
    pub mean_label_entropy: f64,
    /// Mean total-variation distance between client label distributions.
    pub mean_pairwise_tv: f64,
}

fn distribution(row: &[usize]) -> Option<Vec<f64>> {
    let n: usize = row.iter().sum();
    (n > 0).then(|| row.iter().map(|&v| v as f64 / n as f64).collect())
}

pub fn partition_stats(result: &PartitionResult, labels: &[usize]) -> PartitionStats {
    let k = num_classes(labels);
    let hist: Vec<Vec<usize>> = result
        .assignments
        .iter()
        .map(|a| {
            let mut row = vec![0usize; k];
            for &i in a {
                row[labels[i]] += 1;
            }
            row
        })
        .collect();
    let dists: Vec<Option<Vec<f64>>> = hist.iter().map(|r| distribution(r)).collect();
    let entropy: Vec<f64> = dists
        .iter()
        .map(|d| {
            d.as_ref()
                .map_or(0.0, |p| -p.iter().filter(|&&q| q > 0.0).map(|q| q * q.ln()).sum::<f64>())
        })
        .collect();
    let nonempty: Vec<f64> = entropy
        .iter()
        .zip(&dists)
        .filter(|(_, d)| d.is_some())
        .map(|(e, _)| *e)
        .collect();
    let mean_entropy = if nonempty.is_empty() {
        0.0
    } else {
        nonempty.iter().sum::<f64>() / nonempty.len() as f64
    };
    let present: Vec<&Vec<f64>> = dists.iter().flatten().collect();
    let mut tv = 0.0;
    let mut pairs = 0usize;
    for i in 0..present.len() {
        for j in (i + 1)..present.len() {
            tv += 0.5 * present[i].iter().zip(present[j]).map(|(a, b)| (a - b).abs()).sum::<f64>();
            pairs += 1;
        }
    }
    PartitionStats {
        total: result.assignments.iter().map(Vec::len).sum(),
        sizes: result.assignments.iter().map(Vec::len).collect(),
        class_histograms: hist,
        label_entropy: entropy,
        mean_label_entropy: mean_entropy,
        mean_pairwise_tv: if pairs == 0 { 0.0 } else { tv / pairs as f64 },
    }
}

/// Labeled feature matrix (one sample per row).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub features: DMatrix<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledDataset {
    pub fn subset(&self, rows: &[usize]) -> (DMatrix<f64>, Vec<usize>) {
        let p = self.features.ncols();
        let feats = DMatrix::from_fn(rows.len(), p, |r, c| self.features[(rows[r], c)]);
        (feats, rows.iter().map(|&r| self.labels[r]).collect())
    }
}

/// Gaussian class clusters with unit within-class spread. Class centers are
/// random unit directions scaled by `class_separation`; rows are grouped by
/// class.
pub fn make_synthetic_dataset(
    num_classes: usize,
    samples_per_class: usize,
    feature_dim: usize,
    class_separation: f64,
    seed_value: u64,
) -> Result<LabeledDataset> {
    if num_classes < 2 || samples_per_class == 0 || feature_dim == 0 {
        return Err(Error::config("dataset", "need >= 2 classes, >= 1 sample per class and >= 1 feature"));
    }
    if !(class_separation >= 0.0) {
        return Err(Error::config("dataset.class_separation", "must be >= 0"));
    }
    let mut rng = seed::rng(seed_value, &[seed::STREAM_DATASET]);
    let centers: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            let dir: Vec<f64> = (0..feature_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            dir.iter().map(|v| v / n * class_separation).collect()
        })
        .collect();
    let n = num_classes * samples_per_class;
    let mut features = DMatrix::zeros(n, feature_dim);
    let mut labels = Vec::with_capacity(n);
    for (c, center) in centers.iter().enumerate() {
        for s in 0..samples_per_class {
            let row = c * samples_per_class + s;
            for (j, mu) in center.iter().enumerate() {
                let z: f64 = StandardNormal.sample(&mut rng);
                features[(row, j)] = mu + z;
            }
            labels.push(c);
        }
    }
    Ok(LabeledDataset {
        features,
        labels,
        num_classes,
    })
}

/// One logistic objective per client over its assigned rows.
pub fn client_objectives(data: &LabeledDataset, result: &PartitionResult, l2_reg: f64) -> Result<Vec<LogisticObjective>> {
    result
        .assignments
        .iter()
        .map(|rows| {
            let (f, l) = data.subset(rows);
            LogisticObjective::new(f, l, data.num_classes, l2_reg)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels(k: usize, per: usize) -> Vec<usize> {
        (0..k).flat_map(|c| std::iter::repeat_n(c, per)).collect()
    }

    fn spec(c: usize, alpha: f64, seed: u64) -> PartitionSpec {
        PartitionSpec {
            num_clients: c,
            alpha,
            min_threshold: 0,
            seed,
        }
    }

    fn assert_conserves(r: &PartitionResult, n: usize) {
        let mut all: Vec<usize> = r.assignments.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn single_client_gets_everything() {
        let y = labels(3, 7);
        let r = split(&y, &spec(1, 0.5, 1)).unwrap();
        assert_eq!(r.assignments[0], (0..21).collect::<Vec<_>>());
        assert_eq!(r.class_counts, vec![vec![7, 7, 7]]);
    }

    #[test]
    fn deterministic_under_seed() {
        let y = labels(5, 40);
        assert_eq!(split(&y, &spec(6, 0.3, 9)).unwrap(), split(&y, &spec(6, 0.3, 9)).unwrap());
        assert_ne!(split(&y, &spec(6, 0.3, 9)).unwrap(), split(&y, &spec(6, 0.3, 10)).unwrap());
    }

    #[test]
    fn threshold_is_enforced_and_infeasible_rejected() {
        let y = labels(4, 25);
        let mut s = spec(10, 0.01, 3);
        s.min_threshold = 8;
        let r = split(&y, &s).unwrap();
        assert!(r.assignments.iter().all(|a| a.len() >= 8));
        assert_conserves(&r, 100);
        s.min_threshold = 11;
        assert!(matches!(split(&y, &s), Err(Error::InfeasiblePartition { .. })));
    }

    #[test]
    fn large_alpha_is_near_uniform_on_average() {
        let y = labels(10, 1000);
        let mut mean = vec![vec![0.0; 10]; 10];
        for seed in 0..20 {
            let r = split(&y, &spec(10, 10.0, seed)).unwrap();
            for (row, counts) in mean.iter_mut().zip(&r.class_counts) {
                for (m, &v) in row.iter_mut().zip(counts) {
                    *m += v as f64 / 20.0;
                }
            }
        }
        let share = 100.0;
        let worst = mean
            .iter()
            .flatten()
            .map(|v| (v - share).abs() / share)
            .fold(0.0, f64::max);
        assert!(worst <= 0.3, "max relative deviation {worst}");
    }

    #[test]
    fn small_alpha_has_lower_entropy() {
        let y = labels(10, 1000);
        let mean_entropy = |alpha: f64| {
            (0..20)
                .map(|s| partition_stats(&split(&y, &spec(10, alpha, s)).unwrap(), &y).mean_label_entropy)
                .sum::<f64>()
                / 20.0
        };
        assert!(mean_entropy(0.01) <= 0.5 * mean_entropy(10.0));
    }

    #[test]
    fn stats_edge_cases() {
        let y = vec![0, 0, 1, 1];
        let one_class = PartitionResult {
            assignments: vec![vec![0, 1], vec![2, 3]],
            class_counts: vec![vec![2, 0], vec![0, 2]],
        };
        let st = partition_stats(&one_class, &y);
        assert_eq!(st.mean_label_entropy, 0.0);
        assert_eq!(st.total, 4);
        assert_eq!(st.mean_pairwise_tv, 1.0);

        let mixed = PartitionResult {
            assignments: vec![vec![0, 2], vec![1, 3]],
            class_counts: vec![vec![1, 1], vec![1, 1]],
        };
        let st = partition_stats(&mixed, &y);
        assert!((st.mean_label_entropy - 2f64.ln()).abs() < 1e-15);
        assert_eq!(st.mean_pairwise_tv, 0.0);
    }

    #[test]
    fn csv_and_json_exports() {
        let y = labels(2, 3);
        let r = split(&y, &spec(2, 1.0, 1)).unwrap();
        let csv = r.class_counts_csv();
        assert!(csv.starts_with("client,class_0,class_1\n"));
        assert_eq!(csv.lines().count(), 3);
        let parsed: Vec<Vec<usize>> = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(parsed, r.assignments);
    }

    #[test]
    fn synthetic_dataset_is_reproducible() {
        let a = make_synthetic_dataset(3, 5, 4, 2.0, 7).unwrap();
        let b = make_synthetic_dataset(3, 5, 4, 2.0, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.labels, labels(3, 5));
        assert!(make_synthetic_dataset(1, 5, 4, 2.0, 7).is_err());
    }

    fn trained_accuracy(separation: f64) -> f64 {
        let data = make_synthetic_dataset(4, 60, 5, separation, 2).unwrap();
        let mut obj = LogisticObjective::new(data.features.clone(), data.labels.clone(), 4, 1e-3).unwrap();
        let x = obj.resolve_optimum(1e-6).unwrap().clone();
        obj.accuracy(&x).unwrap()
    }

    #[test]
    fn separation_controls_learnability() {
        assert!(trained_accuracy(30.0) >= 0.99);
        // training accuracy overfits slightly above chance on pure noise
        assert!(trained_accuracy(0.0) <= 0.5);
    }

    proptest! {
        #[test]
        fn conservation_and_disjointness(
            k in 1usize..6,
            per in 1usize..30,
            c in 1usize..8,
            alpha in 0.01f64..20.0,
            seed in 0u64..1000,
        ) {
            let y = labels(k, per);
            let r = split(&y, &spec(c, alpha, seed)).unwrap();
            let mut all: Vec<usize> = r.assignments.iter().flatten().copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..k * per).collect::<Vec<_>>());
            let counted: usize = r.class_counts.iter().flatten().sum();
            prop_assert_eq!(counted, k * per);
        }
    }
}
