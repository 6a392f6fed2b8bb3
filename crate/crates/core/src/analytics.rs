//! Binomial attendance oracles and run metrics.
//!
//! Under independent Bernoulli(p) agents attendance is Binomial(N, p); the
//! functions here give its exact tail beyond capacity, the expected number of
//! winners, the variance inflation caused by equicorrelated agents, and the
//! system- and agent-level metrics computed from a [`RunLog`].

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::game::{run_game, Action, GameConfig, RunLog};
use crate::policy::{BernoulliPolicy, Policy};

/// Length of the non-overlapping windows used for burst variance.
pub const BURST_WINDOW: usize = 5;

/// Above this population size binomial terms are evaluated in log space.
const DIRECT_PMF_LIMIT: u64 = 60;

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error(transparent)]
    Game(#[from] crate::game::GameError),
}

type Result<T> = std::result::Result<T, AnalyticsError>;

fn check_p(p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(AnalyticsError::InvalidArgument(format!(
            "probability {p} outside [0, 1]"
        )))
    }
}

fn check_capacity(n: u64, capacity: u64) -> Result<()> {
    if capacity == 0 || capacity > n {
        Err(AnalyticsError::InvalidArgument(format!(
            "capacity {capacity} outside [1, {n}]"
        )))
    } else {
        Ok(())
    }
}

fn choose(n: u64, k: u64) -> f64 {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc as f64
}

/// `P(A = a)` for `A ~ Binomial(n, p)`.
pub fn binomial_pmf(n: u64, p: f64, a: u64) -> Result<f64> {
    check_p(p)?;
    if a > n {
        return Err(AnalyticsError::InvalidArgument(format!(
            "a = {a} outside [0, {n}]"
        )));
    }
    if p == 0.0 {
        return Ok(if a == 0 { 1.0 } else { 0.0 });
    }
    if p == 1.0 {
        return Ok(if a == n { 1.0 } else { 0.0 });
    }
    if n <= DIRECT_PMF_LIMIT {
        return Ok(choose(n, a) * p.powi(a as i32) * (1.0 - p).powi((n - a) as i32));
    }
    let ln = statrs::function::factorial::ln_binomial(n, a)
        + a as f64 * p.ln()
        + (n - a) as f64 * (-p).ln_1p();
    Ok(ln.exp())
}

/// Attendance model with identical or per-agent GO probabilities.
#[derive(Debug, Clone, PartialEq)]
pub enum BinomialAttendanceModel {
    Homogeneous { n: u64, p: f64 },
    Heterogeneous(Vec<f64>),
}

impl BinomialAttendanceModel {
    pub fn validate(&self) -> Result<()> {
        match self {
            BinomialAttendanceModel::Homogeneous { p, .. } => check_p(*p),
            BinomialAttendanceModel::Heterogeneous(ps) => ps.iter().try_for_each(|&p| check_p(p)),
        }
    }

    pub fn n(&self) -> u64 {
        match self {
            BinomialAttendanceModel::Homogeneous { n, .. } => *n,
            BinomialAttendanceModel::Heterogeneous(ps) => ps.len() as u64,
        }
    }

    /// `P(A = a)` for `a = 0..=N`.
    pub fn distribution(&self) -> Result<Vec<f64>> {
        self.validate()?;
        match self {
            BinomialAttendanceModel::Homogeneous { n, p } => {
                (0..=*n).map(|a| binomial_pmf(*n, *p, a)).collect()
            }
            BinomialAttendanceModel::Heterogeneous(ps) => {
                // Poisson-binomial by dynamic programming over agents.
                let mut dist = vec![1.0];
                for &p in ps {
                    let mut next = vec![0.0; dist.len() + 1];
                    for (a, &mass) in dist.iter().enumerate() {
                        next[a] += mass * (1.0 - p);
                        next[a + 1] += mass * p;
                    }
                    dist = next;
                }
                Ok(dist)
            }
        }
    }

    pub fn overload_probability(&self, capacity: u64) -> Result<f64> {
        check_capacity(self.n(), capacity)?;
        match self {
            BinomialAttendanceModel::Homogeneous { n, p } => overload_probability(*n, capacity, *p),
            BinomialAttendanceModel::Heterogeneous(_) => {
                Ok(self.distribution()?[capacity as usize + 1..].iter().sum())
            }
        }
    }
}

/// Mean and variance of attendance.
pub fn attendance_mean_var(model: &BinomialAttendanceModel) -> Result<(f64, f64)> {
    model.validate()?;
    Ok(match model {
        BinomialAttendanceModel::Homogeneous { n, p } => {
            let n = *n as f64;
            (n * p, n * p * (1.0 - p))
        }
        BinomialAttendanceModel::Heterogeneous(ps) => {
            (ps.iter().sum(), ps.iter().map(|p| p * (1.0 - p)).sum())
        }
    })
}

/// `P(A > capacity)` for `A ~ Binomial(n, p)`, summed over the upper tail.
pub fn overload_probability(n: u64, capacity: u64, p: f64) -> Result<f64> {
    check_capacity(n, capacity)?;
    check_p(p)?;
    (capacity + 1..=n).map(|a| binomial_pmf(n, p, a)).sum()
}

/// Expected number of agents holding the winning action per round.
pub fn expected_winners(n: u64, capacity: u64, p: f64) -> Result<f64> {
    check_capacity(n, capacity)?;
    check_p(p)?;
    let mut total = 0.0;
    for a in 0..=n {
        let winners = if a <= capacity { a } else { n - a };
        total += binomial_pmf(n, p, a)? * winners as f64;
    }
    Ok(total)
}

/// Points `0, step, 2*step, ..` up to 1. When `1/step` is an integer the
/// points are formed as `i / m` so that e.g. 0.5 is hit exactly.
pub fn probability_grid(step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(AnalyticsError::InvalidArgument(format!(
            "grid step {step} outside (0, 1]"
        )));
    }
    let m = (1.0 / step).round();
    if (m * step - 1.0).abs() < 1e-9 {
        let m = m as u64;
        Ok((0..=m).map(|i| i as f64 / m as f64).collect())
    } else {
        let count = (1.0 / step).floor() as u64;
        Ok((0..=count).map(|i| i as f64 * step).collect())
    }
}

/// Grid maximizer of [`expected_winners`]; ties resolve to the smaller `p`.
pub fn argmax_expected_winners(n: u64, capacity: u64, grid_step: f64) -> Result<f64> {
    let mut best = (f64::NEG_INFINITY, 0.0);
    for p in probability_grid(grid_step)? {
        let w = expected_winners(n, capacity, p)?;
        if w > best.0 {
            best = (w, p);
        }
    }
    Ok(best.1)
}

/// Attendance variance when every pair of agents has correlation `rho`.
pub fn variance_with_correlation(n: u64, p: f64, rho: f64) -> Result<f64> {
    check_p(p)?;
    if n == 0 {
        return Err(AnalyticsError::InvalidArgument(
            "n must be at least 1".into(),
        ));
    }
    let lower = if n > 1 { -1.0 / (n - 1) as f64 } else { -1.0 };
    if !(rho >= lower && rho <= 1.0) {
        return Err(AnalyticsError::InvalidArgument(format!(
            "rho {rho} outside [{lower}, 1]"
        )));
    }
    let n = n as f64;
    Ok(n * p * (1.0 - p) * (1.0 + (n - 1.0) * rho))
}

/// One round of `n` equicorrelated Bernoulli(p) actions.
///
/// A shared draw `Z ~ Bernoulli(p)` is copied by each agent with probability
/// `sqrt(rho)`; otherwise the agent draws independently. Marginals stay
/// Bernoulli(p) and every pair has correlation `rho`.
pub fn sample_correlated_bernoulli<R: Rng + ?Sized>(
    n: usize,
    p: f64,
    rho: f64,
    rng: &mut R,
) -> Result<Vec<Action>> {
    check_p(p)?;
    if !(0.0..=1.0).contains(&rho) {
        return Err(AnalyticsError::InvalidArgument(format!(
            "rho {rho} outside [0, 1]"
        )));
    }
    let copy = rho.sqrt();
    let draw = |rng: &mut R| {
        if rng.gen::<f64>() < p {
            Action::Go
        } else {
            Action::Stay
        }
    };
    let shared = draw(rng);
    Ok((0..n)
        .map(|_| {
            if rng.gen::<f64>() < copy {
                shared
            } else {
                draw(rng)
            }
        })
        .collect())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population variance; 0 for fewer than two values.
pub fn population_variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
}

/// Pearson correlation; `None` when either input has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

fn as_bits(actions: &[Action]) -> Vec<f64> {
    actions.iter().map(|a| a.bit() as f64).collect()
}

/// `N^2 / sum_ij rho_ij^2` over per-agent action sequences.
///
/// Correlations involving a constant sequence are undefined and counted as 0.
pub fn effective_diversity(sequences: &[Vec<Action>]) -> Result<f64> {
    let n = sequences.len();
    if n == 0 {
        return Err(AnalyticsError::InsufficientData("no sequences".into()));
    }
    let t = sequences[0].len();
    if sequences.iter().any(|s| s.len() != t) {
        return Err(AnalyticsError::LengthMismatch(
            "sequences differ in length".into(),
        ));
    }
    if t < 2 {
        return Err(AnalyticsError::InsufficientData(format!(
            "need at least 2 rounds, got {t}"
        )));
    }
    let bits: Vec<Vec<f64>> = sequences.iter().map(|s| as_bits(s)).collect();
    let mut sum_sq = n as f64;
    for i in 0..n {
        for j in i + 1..n {
            let rho = pearson(&bits[i], &bits[j]).unwrap_or(0.0);
            sum_sq += 2.0 * rho * rho;
        }
    }
    Ok((n * n) as f64 / sum_sq)
}

/// Fraction of rounds in which the agent went while the system was overloaded.
pub fn overload_contribution_rate(
    actions: &[Action],
    attendance: &[usize],
    capacity: usize,
) -> Result<f64> {
    if actions.len() != attendance.len() {
        return Err(AnalyticsError::LengthMismatch(format!(
            "{} actions vs {} attendance values",
            actions.len(),
            attendance.len()
        )));
    }
    if actions.is_empty() {
        return Err(AnalyticsError::InsufficientData("no rounds".into()));
    }
    let hits = actions
        .iter()
        .zip(attendance)
        .filter(|(a, &att)| a.is_go() && att > capacity)
        .count();
    Ok(hits as f64 / actions.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemMetrics {
    pub rounds: usize,
    pub overload_frequency: f64,
    pub mean_overload_severity: f64,
    pub mean_waste: f64,
    pub extreme_full_rate: f64,
    pub extreme_empty_rate: f64,
    pub attendance_mean: f64,
    /// Population variance of attendance.
    pub attendance_variance: f64,
    pub mean_abs_deviation: f64,
    /// `None` when either adjacent slice is constant.
    pub lag1_autocorrelation: Option<f64>,
    /// `None` for single-round logs.
    pub s_eff: Option<f64>,
}

pub fn compute_system_metrics(log: &RunLog) -> Result<SystemMetrics> {
    let t = log.n_rounds();
    if t == 0 {
        return Err(AnalyticsError::InsufficientData("log has no rounds".into()));
    }
    let n = log.n_agents();
    let c = log.config.capacity as f64;
    let attendance: Vec<f64> = log.rounds.iter().map(|r| r.attendance as f64).collect();
    let tf = t as f64;
    let frac =
        |pred: &dyn Fn(f64) -> bool| attendance.iter().filter(|&&a| pred(a)).count() as f64 / tf;
    let lag1 = if t >= 2 {
        pearson(&attendance[..t - 1], &attendance[1..])
    } else {
        None
    };
    let s_eff = if t >= 2 {
        let seqs: Vec<Vec<Action>> = (0..n).map(|i| log.agent_actions(i)).collect();
        Some(effective_diversity(&seqs)?)
    } else {
        None
    };
    Ok(SystemMetrics {
        rounds: t,
        overload_frequency: frac(&|a| a > c),
        mean_overload_severity: attendance.iter().map(|a| (a - c).max(0.0)).sum::<f64>() / tf,
        mean_waste: attendance.iter().map(|a| (c - a).max(0.0)).sum::<f64>() / tf,
        extreme_full_rate: frac(&|a| a == n as f64),
        extreme_empty_rate: frac(&|a| a == 0.0),
        attendance_mean: mean(&attendance),
        attendance_variance: population_variance(&attendance),
        mean_abs_deviation: attendance.iter().map(|a| (a - c).abs()).sum::<f64>() / tf,
        lag1_autocorrelation: lag1,
        s_eff,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentMetrics {
    pub agent_index: usize,
    pub request_frequency: f64,
    pub successful_acquisitions: usize,
    /// Successes per request; 0 when the agent never requested.
    pub efficiency: f64,
    /// Longest run of consecutive rounds without a successful acquisition.
    pub max_starvation: usize,
    pub normalized_max_starvation: f64,
    pub burst_variance: f64,
    pub overload_contribution: f64,
    pub total_payoff: i64,
}

pub fn compute_agent_metrics(log: &RunLog, agent: usize) -> Result<AgentMetrics> {
    if agent >= log.n_agents() {
        return Err(AnalyticsError::InvalidArgument(format!(
            "agent {agent} outside [0, {})",
            log.n_agents()
        )));
    }
    let t = log.n_rounds();
    if t == 0 {
        return Err(AnalyticsError::InsufficientData("log has no rounds".into()));
    }
    let capacity = log.config.capacity;
    let actions = log.agent_actions(agent);
    let attendance = log.attendance();
    let requests = actions.iter().filter(|a| a.is_go()).count();

    let mut successes = 0;
    let mut streak = 0;
    let mut max_streak = 0;
    for (a, &att) in actions.iter().zip(&attendance) {
        if a.is_go() && att <= capacity {
            successes += 1;
            streak = 0;
        } else {
            streak += 1;
            max_streak = max_streak.max(streak);
        }
    }

    let window_counts: Vec<f64> = actions
        .chunks_exact(BURST_WINDOW)
        .map(|w| w.iter().filter(|a| a.is_go()).count() as f64)
        .collect();

    Ok(AgentMetrics {
        agent_index: agent,
        request_frequency: requests as f64 / t as f64,
        successful_acquisitions: successes,
        efficiency: if requests == 0 {
            0.0
        } else {
            successes as f64 / requests as f64
        },
        max_starvation: max_streak,
        normalized_max_starvation: max_streak as f64 / t as f64,
        burst_variance: population_variance(&window_counts),
        overload_contribution: overload_contribution_rate(&actions, &attendance, capacity)?,
        total_payoff: log.rounds.iter().map(|r| r.payoffs[agent] as i64).sum(),
    })
}

pub fn compute_all_agent_metrics(log: &RunLog) -> Result<Vec<AgentMetrics>> {
    (0..log.n_agents())
        .map(|i| compute_agent_metrics(log, i))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessSummary {
    /// Population standard deviation of successful acquisitions.
    pub std_of_successes: f64,
    pub max_min_range: usize,
    pub per_agent_successes: Vec<usize>,
}

pub fn fairness_summary(log: &RunLog) -> Result<FairnessSummary> {
    let per_agent: Vec<usize> = compute_all_agent_metrics(log)?
        .iter()
        .map(|m| m.successful_acquisitions)
        .collect();
    let as_f64: Vec<f64> = per_agent.iter().map(|&s| s as f64).collect();
    let max = per_agent.iter().copied().max().unwrap_or(0);
    let min = per_agent.iter().copied().min().unwrap_or(0);
    Ok(FairnessSummary {
        std_of_successes: population_variance(&as_f64).sqrt(),
        max_min_range: max - min,
        per_agent_successes: per_agent,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub n_agents: usize,
    pub capacity: usize,
    pub p: f64,
    pub rounds: usize,
    pub seed: u64,
    pub empirical_overload: f64,
    pub analytic_overload: f64,
    /// `(empirical - analytic) / sqrt(analytic (1 - analytic) / rounds)`.
    pub z_score: f64,
    pub empirical_mean_attendance: f64,
    pub analytic_mean_attendance: f64,
    pub empirical_variance: f64,
    pub analytic_variance: f64,
}

/// z-score of an observed frequency against its binomial expectation.
pub fn binomial_z_score(empirical: f64, analytic: f64, trials: usize) -> f64 {
    let sd = (analytic * (1.0 - analytic) / trials as f64).sqrt();
    if sd == 0.0 {
        if empirical == analytic {
            0.0
        } else {
            (empirical - analytic).signum() * f64::INFINITY
        }
    } else {
        (empirical - analytic) / sd
    }
}

/// Plays a population of independent Bernoulli(p) agents through the engine
/// and compares observed overload with the exact binomial tail.
pub fn monte_carlo_validate(
    n: usize,
    capacity: usize,
    p: f64,
    rounds: usize,
    seed: u64,
) -> Result<MonteCarloReport> {
    if rounds < 1000 {
        return Err(AnalyticsError::InvalidArgument(format!(
            "need at least 1000 rounds, got {rounds}"
        )));
    }
    let config = GameConfig::new(n, capacity, rounds, seed)?.with_history_window(1)?;
    let mut policies = (0..n)
        .map(|_| BernoulliPolicy::new(p).map(|b| Box::new(b) as Box<dyn Policy>))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| AnalyticsError::InvalidArgument(e.to_string()))?;
    let log = run_game(&config, &mut policies)?;
    let system = compute_system_metrics(&log)?;
    let analytic = overload_probability(n as u64, capacity as u64, p)?;
    let (mean_a, var_a) =
        attendance_mean_var(&BinomialAttendanceModel::Homogeneous { n: n as u64, p })?;
    Ok(MonteCarloReport {
        n_agents: n,
        capacity,
        p,
        rounds,
        seed,
        empirical_overload: system.overload_frequency,
        analytic_overload: analytic,
        z_score: binomial_z_score(system.overload_frequency, analytic, rounds),
        empirical_mean_attendance: system.attendance_mean,
        analytic_mean_attendance: mean_a,
        empirical_variance: system.attendance_variance,
        analytic_variance: var_a,
    })
}
