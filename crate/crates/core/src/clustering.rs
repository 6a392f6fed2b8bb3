//! Behavioral taxonomy: per-agent features, k-means with silhouette, a Ward
//! linkage cross-check, and rank-based separability statistics.

use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};
use thiserror::Error;

use crate::analytics::{compute_agent_metrics, AnalyticsError};
use crate::game::RunLog;
use crate::policy::PersonalityKind;
use crate::rng::{replication_seed, stream};
use rand::Rng;

/// Columns of the clustering matrix, in order. Successful acquisitions are
/// held out and kept only for interpretation.
pub const FEATURE_NAMES: [&str; 5] = [
    "request_frequency",
    "max_starvation",
    "burst_variance",
    "efficiency",
    "overload_contribution",
];

pub const DEFAULT_K: usize = 3;
pub const DEFAULT_RESTARTS: usize = 25;
pub const MAX_LLOYD_ITERATIONS: usize = 300;
/// Reports on fewer instances than this carry a small-sample caveat.
pub const SMALL_SAMPLE: usize = 30;
pub const STEADY_REQUEST_TOLERANCE: f64 = 0.1;
pub const STEADY_STARVATION_LIMIT: f64 = 0.2;
pub const CAVEAT_DESCRIPTIVE: &str =
    "descriptive, not confirmatory: agents within a run are coupled, so instances are not independent";

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("undefined: {0}")]
    Undefined(String),
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
}

type Result<T> = std::result::Result<T, ClusterError>;

pub type Matrix = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehavioralFeatures {
    pub run: usize,
    pub agent: usize,
    pub policy: String,
    pub personality: Option<PersonalityKind>,
    pub rounds: usize,
    pub capacity_ratio: f64,
    pub request_frequency: f64,
    pub successful_acquisitions: usize,
    pub max_starvation: usize,
    pub burst_variance: f64,
    pub efficiency: f64,
    pub overload_contribution: f64,
}

impl BehavioralFeatures {
    /// The five clustered features in [`FEATURE_NAMES`] order.
    pub fn vector(&self) -> Vec<f64> {
        vec![
            self.request_frequency,
            self.max_starvation as f64,
            self.burst_variance,
            self.efficiency,
            self.overload_contribution,
        ]
    }

    /// Personality name when present, otherwise the policy label.
    pub fn group_label(&self) -> String {
        match self.personality {
            Some(p) => p.name().to_string(),
            None => self.policy.clone(),
        }
    }
}

/// One row per agent instance across all logs.
pub fn extract_features(logs: &[RunLog]) -> Result<Vec<BehavioralFeatures>> {
    if logs.is_empty() {
        return Err(ClusterError::InsufficientData("no logs".into()));
    }
    let mut rows = Vec::new();
    for (run, log) in logs.iter().enumerate() {
        if log.rounds.is_empty() {
            return Err(ClusterError::InsufficientData(format!(
                "log {run} has no rounds"
            )));
        }
        for agent in 0..log.n_agents() {
            let m = compute_agent_metrics(log, agent)?;
            let meta = log
                .agents
                .get(agent)
                .map(|a| a.policy.clone())
                .unwrap_or_default();
            rows.push(BehavioralFeatures {
                run,
                agent,
                policy: meta.policy,
                personality: meta.personality,
                rounds: log.n_rounds(),
                capacity_ratio: log.config.capacity_ratio(),
                request_frequency: m.request_frequency,
                successful_acquisitions: m.successful_acquisitions,
                max_starvation: m.max_starvation,
                burst_variance: m.burst_variance,
                efficiency: m.efficiency,
                overload_contribution: m.overload_contribution,
            });
        }
    }
    Ok(rows)
}

pub fn feature_matrix(rows: &[BehavioralFeatures]) -> Matrix {
    rows.iter().map(BehavioralFeatures::vector).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub means: Vec<f64>,
    /// Population standard deviations; 0 marks a constant column.
    pub stds: Vec<f64>,
}

impl Standardization {
    pub fn inverse(&self, data: &Matrix) -> Matrix {
        data.iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(j, z)| z * self.stds[j] + self.means[j])
                    .collect()
            })
            .collect()
    }
}

fn check_rectangular(data: &Matrix) -> Result<usize> {
    let dim = data.first().map_or(0, Vec::len);
    if data.iter().any(|r| r.len() != dim) {
        return Err(ClusterError::Config("rows differ in length".into()));
    }
    if data.iter().flatten().any(|x| !x.is_finite()) {
        return Err(ClusterError::Config("non-finite value in matrix".into()));
    }
    Ok(dim)
}

/// Column-wise z-scores with population standard deviation.
pub fn standardize(data: &Matrix) -> Result<(Matrix, Standardization)> {
    if data.len() < 2 {
        return Err(ClusterError::InsufficientData(format!(
            "need at least 2 rows, got {}",
            data.len()
        )));
    }
    let dim = check_rectangular(data)?;
    let n = data.len() as f64;
    let mut means = vec![0.0; dim];
    let mut stds = vec![0.0; dim];
    for j in 0..dim {
        means[j] = data.iter().map(|r| r[j]).sum::<f64>() / n;
        let var = data.iter().map(|r| (r[j] - means[j]).powi(2)).sum::<f64>() / n;
        stds[j] = var.sqrt();
        if stds[j] == 0.0 {
            warn!("feature column {j} is constant; standardized to 0");
        }
    }
    let z = data
        .iter()
        .map(|r| {
            (0..dim)
                .map(|j| {
                    if stds[j] == 0.0 {
                        0.0
                    } else {
                        (r[j] - means[j]) / stds[j]
                    }
                })
                .collect()
        })
        .collect();
    Ok((z, Standardization { means, stds }))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub centroids: Matrix,
    pub inertia: f64,
    /// `None` when fewer than two clusters are populated.
    pub silhouette: Option<f64>,
    pub iterations: usize,
    pub restart: usize,
}

/// Lloyd iterations from the given centroids. Returns the assignment and
/// the inertia after each iteration.
pub fn lloyd(
    data: &Matrix,
    initial: Matrix,
    max_iterations: usize,
) -> (Vec<usize>, Matrix, Vec<f64>) {
    let k = initial.len();
    let dim = initial.first().map_or(0, Vec::len);
    let mut centroids = initial;
    let mut labels: Vec<usize> = data.iter().map(|p| nearest(p, &centroids).0).collect();
    let mut trace = Vec::new();
    for _ in 0..max_iterations {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in data.iter().zip(&labels) {
            counts[l] += 1;
            for (s, x) in sums[l].iter_mut().zip(p) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        let next: Vec<usize> = data.iter().map(|p| nearest(p, &centroids).0).collect();
        let inertia = data
            .iter()
            .zip(&next)
            .map(|(p, &l)| sq_dist(p, &centroids[l]))
            .sum();
        trace.push(inertia);
        if next == labels {
            break;
        }
        labels = next;
    }
    (labels, centroids, trace)
}

/// First centroid drawn uniformly, each further one the point farthest from
/// those already chosen (ties to the lowest index).
fn farthest_point_seeds<R: Rng>(data: &Matrix, k: usize, rng: &mut R) -> Matrix {
    let mut seeds = vec![data[rng.gen_range(0..data.len())].clone()];
    let mut min_d: Vec<f64> = data.iter().map(|p| sq_dist(p, &seeds[0])).collect();
    while seeds.len() < k {
        let mut best = 0;
        for (i, &d) in min_d.iter().enumerate() {
            if d > min_d[best] {
                best = i;
            }
        }
        let chosen = data[best].clone();
        for (m, p) in min_d.iter_mut().zip(data) {
            *m = m.min(sq_dist(p, &chosen));
        }
        seeds.push(chosen);
    }
    seeds
}

/// Best-inertia k-means over `restarts` seeded initializations.
pub fn kmeans(data: &Matrix, k: usize, restarts: usize, seed: u64) -> Result<ClusterAssignment> {
    check_rectangular(data)?;
    if k == 0 || k > data.len() {
        return Err(ClusterError::Config(format!(
            "k = {k} with {} rows",
            data.len()
        )));
    }
    if restarts == 0 {
        return Err(ClusterError::Config("restarts must be at least 1".into()));
    }
    let mut best: Option<ClusterAssignment> = None;
    for restart in 0..restarts {
        let mut rng = stream(replication_seed(seed, restart as u64));
        let init = farthest_point_seeds(data, k, &mut rng);
        let (labels, centroids, trace) = lloyd(data, init, MAX_LLOYD_ITERATIONS);
        let inertia = *trace.last().expect("at least one iteration");
        if best.as_ref().is_none_or(|b| inertia < b.inertia) {
            best = Some(ClusterAssignment {
                labels,
                centroids,
                inertia,
                silhouette: None,
                iterations: trace.len(),
                restart,
            });
        }
    }
    let mut best = best.expect("restarts >= 1");
    best.silhouette = silhouette_score(data, &best.labels).ok();
    Ok(best)
}

/// Mean silhouette over all points with Euclidean distance.
pub fn silhouette_score(data: &Matrix, labels: &[usize]) -> Result<f64> {
    if data.len() != labels.len() {
        return Err(ClusterError::Config(
            "labels and rows differ in length".into(),
        ));
    }
    let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *sizes.entry(l).or_default() += 1;
    }
    if sizes.len() < 2 {
        return Err(ClusterError::Undefined(
            "silhouette needs at least 2 clusters".into(),
        ));
    }
    let mut total = 0.0;
    for (i, p) in data.iter().enumerate() {
        let own = labels[i];
        if sizes[&own] == 1 {
            continue;
        }
        let mut sums: BTreeMap<usize, f64> = BTreeMap::new();
        for (j, q) in data.iter().enumerate() {
            if i != j {
                *sums.entry(labels[j]).or_default() += sq_dist(p, q).sqrt();
            }
        }
        let a = sums.get(&own).copied().unwrap_or(0.0) / (sizes[&own] - 1) as f64;
        let b = sums
            .iter()
            .filter(|(&l, _)| l != own)
            .map(|(l, s)| s / sizes[l] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / data.len() as f64)
}

/// Relabels so that clusters are numbered in order of first appearance.
pub fn canonical_labels(labels: &[usize]) -> Vec<usize> {
    let mut map = BTreeMap::new();
    labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect()
}

/// Agglomerative Ward linkage cut at `k` clusters.
///
/// Distances are squared Euclidean, updated with the Lance-Williams
/// recurrence; ties merge the lowest index pair.
pub fn ward_hierarchical(data: &Matrix, k: usize) -> Result<Vec<usize>> {
    check_rectangular(data)?;
    let n = data.len();
    if k == 0 || k > n {
        return Err(ClusterError::Config(format!("k = {k} with {n} rows")));
    }
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            d[i][j] = sq_dist(&data[i], &data[j]);
            d[j][i] = d[i][j];
        }
    }
    let mut size = vec![1usize; n];
    let mut active = vec![true; n];
    let mut member: Vec<usize> = (0..n).collect();
    for _ in 0..n - k {
        let mut best = (f64::INFINITY, 0, 0);
        for i in 0..n {
            if !active[i] {
                continue;
            }
            for j in i + 1..n {
                if active[j] && d[i][j] < best.0 {
                    best = (d[i][j], i, j);
                }
            }
        }
        let (dij, i, j) = best;
        let (ni, nj) = (size[i] as f64, size[j] as f64);
        for m in 0..n {
            if !active[m] || m == i || m == j {
                continue;
            }
            let nm = size[m] as f64;
            let merged = ((ni + nm) * d[i][m] + (nj + nm) * d[j][m] - nm * dij) / (ni + nj + nm);
            d[i][m] = merged;
            d[m][i] = merged;
        }
        active[j] = false;
        size[i] += size[j];
        for owner in member.iter_mut() {
            if *owner == j {
                *owner = i;
            }
        }
    }
    Ok(canonical_labels(&member))
}

fn choose2(x: u64) -> f64 {
    (x * x.saturating_sub(1)) as f64 / 2.0
}

pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(ClusterError::Config(
            "label vectors differ in length".into(),
        ));
    }
    let mut table: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut rows: BTreeMap<usize, u64> = BTreeMap::new();
    let mut cols: BTreeMap<usize, u64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&c| choose2(c)).sum();
    let sum_a: f64 = rows.values().map(|&c| choose2(c)).sum();
    let sum_b: f64 = cols.values().map(|&c| choose2(c)).sum();
    let total = choose2(a.len() as u64);
    let expected = if total > 0.0 {
        sum_a * sum_b / total
    } else {
        0.0
    };
    let max = (sum_a + sum_b) / 2.0;
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Average ranks (1-based) and the tie term `sum(t^3 - t)`.
fn ranks(values: &[f64]) -> (Vec<f64>, f64) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut out = vec![0.0; values.len()];
    let mut ties = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            out[i] = avg;
        }
        let t = (end - start) as f64;
        ties += t * t * t - t;
        start = end;
    }
    (out, ties)
}

fn group_indices(groups: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &g) in groups.iter().enumerate() {
        map.entry(g).or_default().push(i);
    }
    map
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KruskalWallis {
    pub h: f64,
    pub eta_squared: f64,
    pub p_value: f64,
    pub df: usize,
}

/// Kruskal-Wallis H with tie correction and `eta^2 = (H - k + 1)/(n - k)`.
pub fn kruskal_wallis(values: &[f64], groups: &[usize]) -> Result<KruskalWallis> {
    if values.len() != groups.len() {
        return Err(ClusterError::Config(
            "values and groups differ in length".into(),
        ));
    }
    let by_group = group_indices(groups);
    let k = by_group.len();
    if k < 2 {
        return Err(ClusterError::Config("need at least 2 groups".into()));
    }
    let n = values.len() as f64;
    let (rank, ties) = ranks(values);
    let correction = 1.0 - ties / (n * n * n - n);
    let h = if correction <= 0.0 {
        0.0
    } else {
        let s: f64 = by_group
            .values()
            .map(|idx| {
                let r: f64 = idx.iter().map(|&i| rank[i]).sum();
                r * r / idx.len() as f64
            })
            .sum();
        ((12.0 / (n * (n + 1.0)) * s - 3.0 * (n + 1.0)) / correction).max(0.0)
    };
    let df = k - 1;
    let p_value = if h == 0.0 {
        1.0
    } else {
        ChiSquared::new(df as f64).expect("df >= 1").sf(h)
    };
    let eta_squared = if values.len() > k {
        ((h - k as f64 + 1.0) / (n - k as f64)).clamp(0.0, 1.0)
    } else {
        0.0
    };
    Ok(KruskalWallis {
        h,
        eta_squared,
        p_value,
        df,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MannWhitneyPair {
    pub group_a: usize,
    pub group_b: usize,
    pub u: f64,
    pub z: f64,
    pub p_value: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseReport {
    pub base_alpha: f64,
    /// Bonferroni threshold: `base_alpha / pairs`.
    pub threshold: f64,
    pub pairs: Vec<MannWhitneyPair>,
}

/// Two-sided Mann-Whitney U for one pair, normal approximation with tie
/// correction and continuity correction. Returns `(U_a, z, p)`.
pub fn mann_whitney(a: &[f64], b: &[f64]) -> Result<(f64, f64, f64)> {
    if a.is_empty() || b.is_empty() {
        return Err(ClusterError::Config("empty group".into()));
    }
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (rank, ties) = ranks(&pooled);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let n = na + nb;
    let ra: f64 = rank[..a.len()].iter().sum();
    let u = ra - na * (na + 1.0) / 2.0;
    let mean = na * nb / 2.0;
    let var = na * nb / 12.0 * ((n + 1.0) - ties / (n * (n - 1.0)));
    if var <= 0.0 {
        return Ok((u, 0.0, 1.0));
    }
    let z = ((u - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let p = (2.0 * Normal::new(0.0, 1.0).expect("unit normal").sf(z)).min(1.0);
    Ok((u, z, p))
}

pub fn mann_whitney_pairwise(
    values: &[f64],
    groups: &[usize],
    base_alpha: f64,
) -> Result<PairwiseReport> {
    if values.len() != groups.len() {
        return Err(ClusterError::Config(
            "values and groups differ in length".into(),
        ));
    }
    if !(base_alpha > 0.0 && base_alpha < 1.0) {
        return Err(ClusterError::Config(format!(
            "base alpha {base_alpha} outside (0, 1)"
        )));
    }
    let by_group = group_indices(groups);
    if by_group.len() < 2 {
        return Err(ClusterError::Config("need at least 2 groups".into()));
    }
    let keys: Vec<usize> = by_group.keys().copied().collect();
    let n_pairs = keys.len() * (keys.len() - 1) / 2;
    let threshold = base_alpha / n_pairs as f64;
    let mut pairs = Vec::with_capacity(n_pairs);
    for (x, &ga) in keys.iter().enumerate() {
        for &gb in &keys[x + 1..] {
            let a: Vec<f64> = by_group[&ga].iter().map(|&i| values[i]).collect();
            let b: Vec<f64> = by_group[&gb].iter().map(|&i| values[i]).collect();
            let (u, z, p_value) = mann_whitney(&a, &b)?;
            pairs.push(MannWhitneyPair {
                group_a: ga,
                group_b: gb,
                u,
                z,
                p_value,
                significant: p_value < threshold,
            });
        }
    }
    Ok(PairwiseReport {
        base_alpha,
        threshold,
        pairs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChiSquare {
    pub chi2: f64,
    pub df: usize,
    pub p_value: f64,
    pub dropped_rows: Vec<usize>,
    pub dropped_columns: Vec<usize>,
}

/// Pearson chi-square test of independence on a contingency table.
pub fn chi_square_association(table: &[Vec<u64>]) -> Result<ChiSquare> {
    let cols = table.first().map_or(0, Vec::len);
    if table.len() < 2 || cols < 2 {
        return Err(ClusterError::InsufficientData(
            "need at least 2 rows and 2 columns".into(),
        ));
    }
    if table.iter().any(|r| r.len() != cols) {
        return Err(ClusterError::Config("ragged contingency table".into()));
    }
    let row_sums: Vec<u64> = table.iter().map(|r| r.iter().sum()).collect();
    let col_sums: Vec<u64> = (0..cols)
        .map(|j| table.iter().map(|r| r[j]).sum())
        .collect();
    let keep_rows: Vec<usize> = (0..table.len()).filter(|&i| row_sums[i] > 0).collect();
    let keep_cols: Vec<usize> = (0..cols).filter(|&j| col_sums[j] > 0).collect();
    let dropped_rows: Vec<usize> = (0..table.len()).filter(|&i| row_sums[i] == 0).collect();
    let dropped_columns: Vec<usize> = (0..cols).filter(|&j| col_sums[j] == 0).collect();
    if !dropped_rows.is_empty() || !dropped_columns.is_empty() {
        warn!("dropping zero-marginal rows {dropped_rows:?} and columns {dropped_columns:?}");
    }
    if keep_rows.len() < 2 || keep_cols.len() < 2 {
        return Err(ClusterError::InsufficientData(
            "fewer than 2 non-empty rows or columns after dropping zero marginals".into(),
        ));
    }
    let total: f64 = row_sums.iter().sum::<u64>() as f64;
    let mut chi2 = 0.0;
    for &i in &keep_rows {
        for &j in &keep_cols {
            let expected = row_sums[i] as f64 * col_sums[j] as f64 / total;
            chi2 += (table[i][j] as f64 - expected).powi(2) / expected;
        }
    }
    let df = (keep_rows.len() - 1) * (keep_cols.len() - 1);
    let p_value = ChiSquared::new(df as f64).expect("df >= 1").sf(chi2);
    Ok(ChiSquare {
        chi2,
        df,
        p_value,
        dropped_rows,
        dropped_columns,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterOptions {
    pub k: usize,
    pub restarts: usize,
    pub seed: u64,
    pub base_alpha: f64,
}

impl Default for ClusterOptions {
    fn default() -> Self {
        ClusterOptions {
            k: DEFAULT_K,
            restarts: DEFAULT_RESTARTS,
            seed: 0,
            base_alpha: 0.05,
        }
    }
}

/// Per-cluster means. Leading columns follow the conventional taxonomy table
/// order: share, request frequency, max starvation, efficiency, overload
/// contribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRow {
    pub cluster: usize,
    pub count: usize,
    pub share: f64,
    pub request_frequency: f64,
    pub max_starvation: f64,
    pub efficiency: f64,
    pub overload_contribution: f64,
    pub burst_variance: f64,
    pub normalized_max_starvation: f64,
    pub capacity_ratio: f64,
    /// Held-out validation variable, not used for clustering.
    pub successful_acquisitions: f64,
    pub steady: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSeparability {
    pub feature: String,
    pub kruskal_wallis: Option<KruskalWallis>,
    pub mann_whitney: Option<PairwiseReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceLabel {
    pub run: usize,
    pub agent: usize,
    pub group: String,
    pub cluster: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub options: ClusterOptions,
    pub n_instances: usize,
    pub feature_names: Vec<String>,
    pub standardization: Standardization,
    pub kmeans: ClusterAssignment,
    pub ward_labels: Vec<usize>,
    pub ward_adjusted_rand: f64,
    pub clusters: Vec<ClusterRow>,
    pub instances: Vec<InstanceLabel>,
    pub separability: Vec<FeatureSeparability>,
    pub group_names: Vec<String>,
    /// Group (personality or policy) by cluster counts.
    pub contingency: Vec<Vec<u64>>,
    pub association: Option<ChiSquare>,
    pub steady_cluster_present: bool,
    pub small_sample: bool,
    pub caveats: Vec<String>,
}

/// Full pipeline from logs to a cluster report.
pub fn cluster_report(logs: &[RunLog], options: ClusterOptions) -> Result<ClusterReport> {
    let rows = extract_features(logs)?;
    cluster_report_from_features(&rows, options)
}

pub fn cluster_report_from_features(
    rows: &[BehavioralFeatures],
    options: ClusterOptions,
) -> Result<ClusterReport> {
    if options.k < 2 {
        return Err(ClusterError::Config("report needs k >= 2".into()));
    }
    if rows.len() < options.k {
        return Err(ClusterError::InsufficientData(format!(
            "{} instances for k = {}",
            rows.len(),
            options.k
        )));
    }
    let raw = feature_matrix(rows);
    let (z, standardization) = standardize(&raw)?;
    let km = kmeans(&z, options.k, options.restarts, options.seed)?;
    let ward_labels = ward_hierarchical(&z, options.k)?;
    let ward_adjusted_rand = adjusted_rand_index(&km.labels, &ward_labels)?;

    let mut clusters = Vec::with_capacity(options.k);
    let mut steady_cluster_present = false;
    for c in 0..options.k {
        let members: Vec<&BehavioralFeatures> = rows
            .iter()
            .zip(&km.labels)
            .filter(|(_, &l)| l == c)
            .map(|(r, _)| r)
            .collect();
        let count = members.len();
        let avg = |f: &dyn Fn(&BehavioralFeatures) -> f64| {
            if count == 0 {
                0.0
            } else {
                members.iter().map(|m| f(m)).sum::<f64>() / count as f64
            }
        };
        let request_frequency = avg(&|m| m.request_frequency);
        let capacity_ratio = avg(&|m| m.capacity_ratio);
        let normalized_max_starvation = avg(&|m| m.max_starvation as f64 / m.rounds as f64);
        let steady = count > 0
            && (request_frequency - capacity_ratio).abs() <= STEADY_REQUEST_TOLERANCE
            && normalized_max_starvation < STEADY_STARVATION_LIMIT;
        steady_cluster_present |= steady;
        clusters.push(ClusterRow {
            cluster: c,
            count,
            share: count as f64 / rows.len() as f64,
            request_frequency,
            max_starvation: avg(&|m| m.max_starvation as f64),
            efficiency: avg(&|m| m.efficiency),
            overload_contribution: avg(&|m| m.overload_contribution),
            burst_variance: avg(&|m| m.burst_variance),
            normalized_max_starvation,
            capacity_ratio,
            successful_acquisitions: avg(&|m| m.successful_acquisitions as f64),
            steady,
        });
    }

    let separability = FEATURE_NAMES
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let column: Vec<f64> = raw.iter().map(|r| r[j]).collect();
            FeatureSeparability {
                feature: name.to_string(),
                kruskal_wallis: kruskal_wallis(&column, &km.labels).ok(),
                mann_whitney: mann_whitney_pairwise(&column, &km.labels, options.base_alpha).ok(),
            }
        })
        .collect();

    let mut group_names: Vec<String> = rows.iter().map(BehavioralFeatures::group_label).collect();
    group_names.sort();
    group_names.dedup();
    let mut contingency = vec![vec![0u64; options.k]; group_names.len()];
    for (r, &l) in rows.iter().zip(&km.labels) {
        let g = group_names
            .binary_search(&r.group_label())
            .expect("group present");
        contingency[g][l] += 1;
    }
    let association = chi_square_association(&contingency).ok();

    let small_sample = rows.len() < SMALL_SAMPLE;
    let mut caveats = vec![CAVEAT_DESCRIPTIVE.to_string()];
    if small_sample {
        caveats.push(format!(
            "small sample: {} instances (< {SMALL_SAMPLE}); statistics are unstable",
            rows.len()
        ));
    }

    Ok(ClusterReport {
        options,
        n_instances: rows.len(),
        feature_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
        standardization,
        instances: rows
            .iter()
            .zip(&km.labels)
            .map(|(r, &cluster)| InstanceLabel {
                run: r.run,
                agent: r.agent,
                group: r.group_label(),
                cluster,
            })
            .collect(),
        kmeans: km,
        ward_labels,
        ward_adjusted_rand,
        clusters,
        separability,
        group_names,
        contingency,
        association,
        steady_cluster_present,
        small_sample,
        caveats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{run_game, GameConfig};
    use crate::policy::{BernoulliPolicy, PersonalityPolicy, Policy};
    use proptest::prelude::{prop_assert, proptest};
    use rand::distributions::Distribution;

    /// `per_blob` points around each center with isotropic Gaussian noise.
    pub(crate) fn planted_blobs(
        centers: &[Vec<f64>],
        per_blob: usize,
        sd: f64,
        seed: u64,
    ) -> (Matrix, Vec<usize>) {
        let noise = Normal::new(0.0, sd).unwrap();
        let mut rng = stream(seed);
        let mut data = Vec::new();
        let mut truth = Vec::new();
        for (c, center) in centers.iter().enumerate() {
            for _ in 0..per_blob {
                data.push(center.iter().map(|x| x + noise.sample(&mut rng)).collect());
                truth.push(c);
            }
        }
        (data, truth)
    }

    fn three_centers() -> Vec<Vec<f64>> {
        vec![
            vec![0.0; 5],
            vec![6.0, 0.0, 0.0, 0.0, 0.0],
            vec![0.0, 6.0, 0.0, 0.0, 0.0],
        ]
    }

    #[test]
    fn standardize_examples() {
        let (z, s) = standardize(&vec![vec![0.0, 5.0], vec![2.0, 5.0]]).unwrap();
        assert_eq!(z, vec![vec![-1.0, 0.0], vec![1.0, 0.0]]);
        assert_eq!(s.stds, vec![1.0, 0.0]);
        assert!(standardize(&vec![vec![1.0]]).is_err());

        let data = vec![vec![1.5, -2.0], vec![3.25, 7.0], vec![-4.0, 0.5]];
        let (z, s) = standardize(&data).unwrap();
        for (row, orig) in s.inverse(&z).iter().zip(&data) {
            for (a, b) in row.iter().zip(orig) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kmeans_recovers_planted_blobs() {
        let (data, truth) = planted_blobs(&three_centers(), 50, 0.1, 11);
        let km = kmeans(&data, 3, 25, 5).unwrap();
        assert!(adjusted_rand_index(&km.labels, &truth).unwrap() >= 0.95);
        assert!(km.silhouette.unwrap() >= 0.5);
        let again = kmeans(&data, 3, 25, 5).unwrap();
        assert_eq!(km, again);
    }

    #[test]
    fn kmeans_single_cluster_is_the_mean() {
        let data = vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![1.0, 3.0]];
        let km = kmeans(&data, 1, 3, 0).unwrap();
        assert!((km.centroids[0][0] - 1.0).abs() < 1e-12);
        assert!((km.centroids[0][1] - 1.0).abs() < 1e-12);
        // 1 + 1 + 0 in x, 1 + 1 + 4 in y
        assert!((km.inertia - 8.0).abs() < 1e-12);
        assert_eq!(km.silhouette, None);
        assert!(kmeans(&data, 4, 3, 0).is_err());
    }

    #[test]
    fn duplicate_rows_share_labels() {
        let (mut data, _) = planted_blobs(&three_centers(), 10, 0.5, 2);
        data.extend(data.clone());
        let km = kmeans(&data, 3, 5, 1).unwrap();
        let half = data.len() / 2;
        assert_eq!(km.labels[..half], km.labels[half..]);
    }

    #[test]
    fn silhouette_examples() {
        let data = vec![vec![0.0], vec![0.1], vec![10.0], vec![10.1]];
        assert!(silhouette_score(&data, &[0, 0, 1, 1]).unwrap() > 0.9);
        assert!(silhouette_score(&data, &[0, 0, 0, 0]).is_err());

        // middle point is equidistant from its own partner and the other cluster
        let data = vec![vec![0.0], vec![1.0], vec![2.0]];
        let s = silhouette_score(&data, &[0, 0, 1]).unwrap();
        // point 0: a=1, b=2 -> 0.5; point 1: a=1, b=1 -> 0; point 2 singleton -> 0
        assert!((s - 0.5 / 3.0).abs() < 1e-12);

        let (blob, _) = planted_blobs(&[vec![0.0, 0.0]], 200, 1.0, 9);
        let mut rng = stream(10);
        let labels: Vec<usize> = (0..200).map(|_| rng.gen_range(0..3)).collect();
        assert!(silhouette_score(&blob, &labels).unwrap().abs() < 0.1);
    }

    #[test]
    fn ward_examples() {
        let (data, truth) = planted_blobs(&three_centers(), 50, 0.1, 11);
        let ward = ward_hierarchical(&data, 3).unwrap();
        assert!(adjusted_rand_index(&ward, &truth).unwrap() >= 0.9);
        let km = kmeans(&data, 3, 25, 5).unwrap();
        assert!(adjusted_rand_index(&ward, &km.labels).unwrap() >= 0.9);

        let small = vec![vec![0.0], vec![5.0], vec![5.0], vec![9.0]];
        assert_eq!(ward_hierarchical(&small, 4).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(ward_hierarchical(&small, 3).unwrap(), vec![0, 1, 1, 2]);
    }

    /// Ward merge cost computed from cluster sizes and centroids.
    fn ward_cost(data: &Matrix, a: &[usize], b: &[usize]) -> f64 {
        let centroid = |idx: &[usize]| -> Vec<f64> {
            let dim = data[0].len();
            (0..dim)
                .map(|j| idx.iter().map(|&i| data[i][j]).sum::<f64>() / idx.len() as f64)
                .collect()
        };
        let (na, nb) = (a.len() as f64, b.len() as f64);
        na * nb / (na + nb) * sq_dist(&centroid(a), &centroid(b))
    }

    #[test]
    fn ward_matches_naive_cost_minimization() {
        let (data, _) = planted_blobs(&[vec![0.0, 0.0], vec![2.0, 1.0]], 8, 0.8, 21);
        let mut clusters: Vec<Vec<usize>> = (0..data.len()).map(|i| vec![i]).collect();
        while clusters.len() > 3 {
            let mut best = (f64::INFINITY, 0, 0);
            for i in 0..clusters.len() {
                for j in i + 1..clusters.len() {
                    let c = ward_cost(&data, &clusters[i], &clusters[j]);
                    if c < best.0 {
                        best = (c, i, j);
                    }
                }
            }
            let merged = clusters.remove(best.2);
            clusters[best.1].extend(merged);
        }
        let mut naive = vec![0; data.len()];
        for (c, members) in clusters.iter().enumerate() {
            for &i in members {
                naive[i] = c;
            }
        }
        let ward = ward_hierarchical(&data, 3).unwrap();
        assert_eq!(adjusted_rand_index(&ward, &naive).unwrap(), 1.0);
    }

    #[test]
    fn ari_examples() {
        assert_eq!(
            adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap(),
            1.0
        );
        let ari = adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap();
        assert!(ari < 0.0);
    }

    #[test]
    fn kruskal_wallis_examples() {
        let kw = kruskal_wallis(&[4.0; 9], &[0, 0, 0, 1, 1, 1, 2, 2, 2]).unwrap();
        assert_eq!((kw.h, kw.p_value), (0.0, 1.0));

        let values = [1.0, 2.0, 3.0, 10.0, 11.0, 12.0, 20.0, 21.0, 22.0];
        let groups = [0, 0, 0, 1, 1, 1, 2, 2, 2];
        let kw = kruskal_wallis(&values, &groups).unwrap();
        // rank sums 6, 15, 24: 12/90 * (36+225+576)/3 - 30 = 7.2
        assert!((kw.h - 7.2).abs() < 1e-12);
        assert!((kw.eta_squared - (7.2 - 2.0) / 6.0).abs() < 1e-12);
        assert!((kw.p_value - (-3.6f64).exp()).abs() < 1e-12);
        assert!(kruskal_wallis(&values, &[0; 9]).is_err());
    }

    #[test]
    fn kruskal_wallis_tie_correction() {
        // ranks: 1.5 1.5 3 | 4 5.5 5.5, ties term 6 + 6 = 12
        let kw = kruskal_wallis(&[1.0, 1.0, 2.0, 3.0, 4.0, 4.0], &[0, 0, 0, 1, 1, 1]).unwrap();
        let raw = 12.0 / 42.0 * (36.0 + 225.0) / 3.0 - 21.0;
        let expected = raw / (1.0 - 12.0 / 210.0);
        assert!((kw.h - expected).abs() < 1e-12);
    }

    #[test]
    fn kruskal_wallis_null_rejection_rate() {
        let mut rng = stream(77);
        let mut rejections = 0;
        let trials = 1000;
        for _ in 0..trials {
            let values: Vec<f64> = (0..60).map(|_| rng.gen::<f64>()).collect();
            let groups: Vec<usize> = (0..60).map(|i| i % 3).collect();
            if kruskal_wallis(&values, &groups).unwrap().p_value < 0.05 {
                rejections += 1;
            }
        }
        // 5% of 1000 with a 4-sigma binomial band
        assert!(
            (rejections as f64 - 50.0).abs() < 4.0 * (1000.0f64 * 0.05 * 0.95).sqrt(),
            "{rejections}"
        );
    }

    #[test]
    fn mann_whitney_examples() {
        let values: Vec<f64> = (0..9).map(|i| i as f64).collect();
        let report = mann_whitney_pairwise(&values, &[0, 0, 0, 1, 1, 1, 2, 2, 2], 0.05).unwrap();
        assert!((report.threshold - 0.05 / 3.0).abs() < 1e-15);
        assert_eq!(report.pairs.len(), 3);

        let same = [1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0];
        let report = mann_whitney_pairwise(&same, &[0, 0, 0, 0, 1, 1, 1, 1], 0.05).unwrap();
        assert!(report.pairs[0].p_value > 0.9);

        let disjoint: Vec<f64> = (0..40).map(|i| i as f64).collect();
        let groups: Vec<usize> = (0..40).map(|i| i / 20).collect();
        let report = mann_whitney_pairwise(&disjoint, &groups, 0.05).unwrap();
        assert_eq!(report.pairs[0].u, 0.0);
        assert!(report.pairs[0].p_value < 0.001);
        assert!(mann_whitney_pairwise(&disjoint, &[0; 40], 0.05).is_err());
    }

    #[test]
    fn chi_square_examples() {
        let c = chi_square_association(&[vec![10, 0], vec![0, 10]]).unwrap();
        assert!((c.chi2 - 20.0).abs() < 1e-12);
        assert_eq!(c.df, 1);
        let c = chi_square_association(&[vec![2, 4, 6], vec![1, 2, 3]]).unwrap();
        assert!(c.chi2.abs() < 1e-12);
        let table: Vec<Vec<u64>> = (0..6).map(|i| vec![3 + i, 5, 2 + 2 * i]).collect();
        assert_eq!(chi_square_association(&table).unwrap().df, 10);
        let c = chi_square_association(&[vec![5, 0, 1], vec![0, 0, 0], vec![1, 0, 5]]).unwrap();
        assert_eq!(
            (c.df, c.dropped_rows.clone(), c.dropped_columns.clone()),
            (1, vec![1], vec![1])
        );
    }

    fn run_population(
        policies: Vec<Box<dyn Policy>>,
        capacity: usize,
        rounds: usize,
        seed: u64,
    ) -> RunLog {
        let mut policies = policies;
        let config = GameConfig::new(policies.len(), capacity, rounds, seed).unwrap();
        run_game(&config, &mut policies).unwrap()
    }

    #[test]
    fn extract_features_matches_agent_metrics() {
        let log = run_population(
            vec![
                Box::new(BernoulliPolicy::new(0.4).unwrap()),
                Box::new(BernoulliPolicy::new(0.7).unwrap()),
            ],
            1,
            10,
            3,
        );
        let rows = extract_features(std::slice::from_ref(&log)).unwrap();
        assert_eq!(rows.len(), 2);
        for r in &rows {
            let m = compute_agent_metrics(&log, r.agent).unwrap();
            assert_eq!(r.request_frequency, m.request_frequency);
            assert_eq!(r.max_starvation, m.max_starvation);
            assert_eq!(r.burst_variance, m.burst_variance);
            assert_eq!(r.efficiency, m.efficiency);
            assert_eq!(r.overload_contribution, m.overload_contribution);
            assert_eq!(r.successful_acquisitions, m.successful_acquisitions);
        }
        assert!(extract_features(&[]).is_err());
    }

    #[test]
    fn never_succeeding_agent_starves_full_run() {
        let log = run_population(
            vec![
                Box::new(BernoulliPolicy::new(0.0).unwrap()),
                Box::new(BernoulliPolicy::new(1.0).unwrap()),
            ],
            1,
            100,
            0,
        );
        let rows = extract_features(&[log]).unwrap();
        assert_eq!(rows[0].max_starvation, 100);
    }

    #[test]
    fn proxy_population_separates_by_request_frequency() {
        let logs: Vec<RunLog> = (0..12)
            .map(|s| {
                run_population(
                    vec![
                        Box::new(PersonalityPolicy::plain(PersonalityKind::Optimist)),
                        Box::new(PersonalityPolicy::plain(PersonalityKind::Pessimist)),
                        Box::new(PersonalityPolicy::plain(PersonalityKind::Neutral)),
                    ],
                    1,
                    100,
                    s,
                )
            })
            .collect();
        let report = cluster_report(&logs, ClusterOptions::default()).unwrap();
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| {
            report.clusters[a]
                .request_frequency
                .total_cmp(&report.clusters[b].request_frequency)
        });
        let freqs: Vec<f64> = order
            .iter()
            .map(|&c| report.clusters[c].request_frequency)
            .collect();
        assert!(freqs[0] < freqs[1] && freqs[1] < freqs[2], "{freqs:?}");
        assert!(freqs[0] < 0.2 && freqs[2] > 0.8, "{freqs:?}");
        let top = order[2];
        for inst in &report.instances {
            match inst.group.as_str() {
                "optimist" => assert_eq!(inst.cluster, top),
                "pessimist" => assert_ne!(inst.cluster, top),
                _ => {}
            }
        }
        assert!(!report.small_sample);
        assert_eq!(report.caveats[0], CAVEAT_DESCRIPTIVE);
        assert_eq!(report.association.as_ref().unwrap().df, 4);
    }

    #[test]
    fn steady_detector_fires_for_capacity_matching() {
        let logs: Vec<RunLog> = (0..4)
            .map(|s| {
                let config = GameConfig::new(4, 2, 200, s).unwrap();
                run_population(
                    (0..4)
                        .map(|_| {
                            Box::new(BernoulliPolicy::capacity_matching(&config)) as Box<dyn Policy>
                        })
                        .collect(),
                    2,
                    200,
                    s,
                )
            })
            .collect();
        let report = cluster_report(&logs, ClusterOptions::default()).unwrap();
        assert!(report.steady_cluster_present);
        assert!(report.small_sample);
    }

    #[test]
    fn single_run_report_is_flagged() {
        let log = run_population(
            vec![
                Box::new(PersonalityPolicy::plain(PersonalityKind::Optimist)),
                Box::new(PersonalityPolicy::plain(PersonalityKind::Pessimist)),
                Box::new(PersonalityPolicy::plain(PersonalityKind::Contrarian)),
            ],
            1,
            50,
            2,
        );
        let report = cluster_report(&[log], ClusterOptions::default()).unwrap();
        assert_eq!(report.n_instances, 3);
        assert!(report.small_sample);
    }

    proptest! {
        #[test]
        fn lloyd_inertia_non_increasing(seed in 0u64..500, k in 1usize..5) {
            let (data, _) = planted_blobs(&[vec![0.0, 0.0], vec![1.5, 0.5]], 15, 1.0, seed);
            let mut rng = stream(seed);
            let init = farthest_point_seeds(&data, k, &mut rng);
            let (_, _, trace) = lloyd(&data, init, MAX_LLOYD_ITERATIONS);
            for w in trace.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9);
            }
        }

        #[test]
        fn restarts_never_worse_than_single(seed in 0u64..200) {
            let (data, _) = planted_blobs(&three_centers(), 10, 2.0, seed);
            let best = kmeans(&data, 3, 6, seed).unwrap();
            for r in 0..6 {
                let mut rng = stream(replication_seed(seed, r));
                let init = farthest_point_seeds(&data, 3, &mut rng);
                let (_, _, trace) = lloyd(&data, init, MAX_LLOYD_ITERATIONS);
                prop_assert!(best.inertia <= *trace.last().unwrap() + 1e-12);
            }
        }

        #[test]
        fn silhouette_in_range(seed in 0u64..200, n in 4usize..30) {
            let (data, _) = planted_blobs(&[vec![0.0, 0.0, 0.0]], n, 1.0, seed);
            let mut rng = stream(seed + 1);
            let mut labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
            labels[0] = 0;
            labels[1] = 1;
            let s = silhouette_score(&data, &labels).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
        }

        #[test]
        fn eta_squared_bounded_and_monotone(values in proptest::collection::vec(0.0f64..10.0, 6..40)) {
            let groups: Vec<usize> = (0..values.len()).map(|i| i % 3).collect();
            let kw = kruskal_wallis(&values, &groups).unwrap();
            prop_assert!((0.0..=1.0).contains(&kw.eta_squared));
            prop_assert!((0.0..=1.0).contains(&kw.p_value));
            let mut sorted = values.clone();
            sorted.sort_by(f64::total_cmp);
            let separated: Vec<usize> = (0..values.len()).map(|i| i * 3 / values.len()).collect();
            let kw_sep = kruskal_wallis(&sorted, &separated).unwrap();
            if kw_sep.h >= kw.h {
                prop_assert!(kw_sep.eta_squared >= kw.eta_squared);
            }
        }
    }
}
