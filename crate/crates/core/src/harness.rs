//! Experiment runner: TOML configs, seeded replications, JSONL logs and
//! summary documents.
//!
//! Output layout for an experiment labelled `L`:
//!
//! ```text
//! <output_dir>/L/run_000.jsonl        header line, then one round record per line
//! <output_dir>/L/run_000.audit.jsonl  LLM request audit (only when LLM agents exist)
//! <output_dir>/L/run_000.meta.json    wall-clock metadata
//! <output_dir>/L/summary.json         metrics for every replication
//! ```
//!
//! Round logs and summaries contain no wall-clock data, so identical configs
//! produce byte-identical files.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::{
    attendance_mean_var, binomial_z_score, compute_all_agent_metrics, compute_system_metrics,
    fairness_summary, AgentMetrics, AnalyticsError, BinomialAttendanceModel, FairnessSummary,
    SystemMetrics,
};
use crate::game::{play, AgentMeta, GameConfig, GameError, RoundRecord, RunLog};
use crate::llm::{
    AuditLog, AuditRecord, ChatBackend, LlmBackendConfig, LlmClient, LlmPolicy, MockMode,
};
use crate::policy::{
    BernoulliPolicy, PersonalityPolicy, Policy, PolicySpec, ProxyDispositions, ScriptedPolicy,
};
use crate::rng::{replication_seed, SEED_DERIVATION};

pub const SOFTWARE_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const LOG_FORMAT_VERSION: u32 = 1;
/// Backend name usable without a declaration; answers like the agent's proxy.
pub const BUILTIN_MOCK_BACKEND: &str = "mock";
const PARTIAL_SUFFIX: &str = "partial";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {error}")]
    Io {
        path: PathBuf,
        error: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config field `{field}`: {message}")]
    Validation { field: String, message: String },
    #[error(transparent)]
    Game(#[from] GameError),
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
    #[error("backend `{name}`: {message}")]
    Backend { name: String, message: String },
}

type Result<T> = std::result::Result<T, HarnessError>;
type ReplicationOutcome = Result<(RunLog, RunSummary)>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |error| HarnessError::Io {
        path: path.to_path_buf(),
        error,
    }
}

fn invalid(field: impl Into<String>, message: impl ToString) -> HarnessError {
    HarnessError::Validation {
        field: field.into(),
        message: message.to_string(),
    }
}

fn default_replications() -> usize {
    1
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub label: String,
    #[serde(default = "default_replications")]
    pub replications: usize,
    /// Relative paths resolve against the working directory.
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Parallel replications; defaults to the available cores.
    #[serde(default)]
    pub workers: Option<usize>,
    pub game: GameConfig,
    pub agents: Vec<PolicySpec>,
    #[serde(default)]
    pub backends: BTreeMap<String, LlmBackendConfig>,
    #[serde(default)]
    pub proxies: ProxyDispositions,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.label.is_empty()
            || !self
                .label
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
            || self.label.starts_with('.')
        {
            return Err(invalid(
                "label",
                "must be non-empty and use only [A-Za-z0-9._-]",
            ));
        }
        if self.replications == 0 {
            return Err(invalid("replications", "must be at least 1"));
        }
        if self.workers == Some(0) {
            return Err(invalid("workers", "must be at least 1"));
        }
        self.game.validate().map_err(|e| invalid("game", e))?;
        if self.agents.len() != self.game.n_agents {
            return Err(invalid(
                "agents",
                format!(
                    "{} entries but game.n_agents = {}",
                    self.agents.len(),
                    self.game.n_agents
                ),
            ));
        }
        self.proxies.validate().map_err(|e| invalid("proxies", e))?;
        for (name, backend) in &self.backends {
            backend
                .validate()
                .map_err(|e| invalid(format!("backends.{name}"), e))?;
        }
        for (i, spec) in self.agents.iter().enumerate() {
            spec.validate()
                .map_err(|e| invalid(format!("agents[{i}]"), e))?;
            if let PolicySpec::Llm { backend, .. } = spec {
                if !self.backends.contains_key(backend) && backend != BUILTIN_MOCK_BACKEND {
                    return Err(invalid(
                        format!("agents[{i}].backend"),
                        format!("`{backend}` is not declared under [backends]"),
                    ));
                }
            }
        }
        Ok(())
    }

    /// GO probabilities when every agent is a memoryless baseline.
    pub fn analytic_probabilities(&self) -> Option<Vec<f64>> {
        self.agents
            .iter()
            .map(|s| s.analytic_p(&self.game))
            .collect()
    }

    pub fn has_llm_agents(&self) -> bool {
        self.agents
            .iter()
            .any(|s| matches!(s, PolicySpec::Llm { .. }))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.label)
    }

    /// Game config of one replication, with its derived seed.
    pub fn replication_game(&self, replication: usize) -> GameConfig {
        GameConfig {
            seed: replication_seed(self.game.seed, replication as u64),
            ..self.game
        }
    }
}

pub fn parse_config(text: &str, origin: &Path) -> Result<ExperimentConfig> {
    let config: ExperimentConfig = toml::from_str(text).map_err(|e| HarnessError::Parse {
        path: origin.to_path_buf(),
        message: e.to_string(),
    })?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_config(&text, path)
}

/// First line of every round log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogHeader {
    pub format_version: u32,
    pub software_version: String,
    pub label: String,
    pub replication: usize,
    pub master_seed: u64,
    pub seed_derivation: String,
    /// Game config of this run; `config.seed` is the derived run seed.
    pub config: GameConfig,
    pub agents: Vec<AgentMeta>,
    pub agent_specs: Vec<PolicySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audit_file: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    header: LogHeader,
}

/// Wall-clock facts about a run, kept out of the deterministic log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub software_version: String,
    pub started_unix_ms: u128,
    pub elapsed_ms: f64,
    pub llm_requests: usize,
    pub total_latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub replication: usize,
    pub run_seed: u64,
    pub log_file: String,
    pub rounds: usize,
    pub fallback_count: usize,
    pub system: SystemMetrics,
    pub agents: Vec<AgentMetrics>,
    pub fairness: FairnessSummary,
}

/// Observed overload and attendance pooled over replications, next to the
/// exact Poisson-binomial values for the configured GO probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryComparison {
    pub go_probabilities: Vec<f64>,
    pub analytic_overload: f64,
    pub empirical_overload: f64,
    pub z_score: f64,
    pub analytic_mean_attendance: f64,
    pub empirical_mean_attendance: f64,
    pub analytic_variance: f64,
    pub empirical_variance: f64,
    pub pooled_rounds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub label: String,
    pub software_version: String,
    pub master_seed: u64,
    pub config: ExperimentConfig,
    pub runs: Vec<RunSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theory: Option<TheoryComparison>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub summary: ExperimentSummary,
    pub dir: PathBuf,
    pub logs: Vec<PathBuf>,
    pub summary_path: PathBuf,
}

pub fn log_file_name(replication: usize) -> String {
    format!("run_{replication:03}.jsonl")
}

fn audit_file_name(replication: usize) -> String {
    format!("run_{replication:03}.audit.jsonl")
}

fn meta_file_name(replication: usize) -> String {
    format!("run_{replication:03}.meta.json")
}

fn partial_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".");
    name.push(PARTIAL_SUFFIX);
    path.with_file_name(name)
}

/// Writes `contents` to a sibling temp file, then renames over `path`.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = partial_path(path);
    let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(contents).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn to_json_line<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("log types serialize")
}

/// Policies for one replication and the audit sink shared by its LLM agents.
pub fn build_policies(config: &ExperimentConfig) -> Result<(Vec<Box<dyn Policy>>, AuditLog)> {
    let audit: AuditLog = Arc::new(Mutex::new(Vec::new()));
    let mut connections: BTreeMap<String, (Arc<dyn ChatBackend>, LlmBackendConfig)> =
        BTreeMap::new();
    let mut policies: Vec<Box<dyn Policy>> = Vec::with_capacity(config.agents.len());
    for (i, spec) in config.agents.iter().enumerate() {
        let field = || format!("agents[{i}]");
        let policy: Box<dyn Policy> = match spec {
            PolicySpec::CapacityMatching => {
                Box::new(BernoulliPolicy::capacity_matching(&config.game))
            }
            PolicySpec::UniformRandom => Box::new(BernoulliPolicy::uniform_random()),
            PolicySpec::Bernoulli { p } => {
                Box::new(BernoulliPolicy::new(*p).map_err(|e| invalid(field(), e))?)
            }
            PolicySpec::Personality {
                personality,
                params,
                epsilon,
            } => Box::new(
                PersonalityPolicy::new(*personality, *params, config.proxies, *epsilon)
                    .map_err(|e| invalid(field(), e))?,
            ),
            PolicySpec::Scripted { actions } => {
                Box::new(ScriptedPolicy::new(actions.clone()).map_err(|e| invalid(field(), e))?)
            }
            PolicySpec::Llm {
                personality,
                backend,
                params,
                epsilon,
            } => {
                if !connections.contains_key(backend) {
                    let backend_config = config
                        .backends
                        .get(backend)
                        .cloned()
                        .unwrap_or_else(|| LlmBackendConfig::mock(MockMode::EchoProxy));
                    let conn = backend_config
                        .connect()
                        .map_err(|e| HarnessError::Backend {
                            name: backend.clone(),
                            message: e.to_string(),
                        })?;
                    connections.insert(backend.clone(), (conn, backend_config));
                }
                let (conn, backend_config) = &connections[backend];
                Box::new(LlmPolicy::new(
                    LlmClient::new(Arc::clone(conn), backend_config.clone()),
                    backend.clone(),
                    *personality,
                    *params,
                    *epsilon,
                    Arc::clone(&audit),
                ))
            }
        };
        policies.push(policy);
    }
    Ok((policies, audit))
}

fn summarize_run(log: &RunLog, replication: usize, log_file: String) -> Result<RunSummary> {
    Ok(RunSummary {
        replication,
        run_seed: log.config.seed,
        log_file,
        rounds: log.n_rounds(),
        fallback_count: log.fallback_count(),
        system: compute_system_metrics(log)?,
        agents: compute_all_agent_metrics(log)?,
        fairness: fairness_summary(log)?,
    })
}

/// Plays one replication, streaming its log to disk.
pub fn run_replication(
    config: &ExperimentConfig,
    replication: usize,
) -> Result<(RunLog, RunSummary)> {
    let started = Instant::now();
    let started_unix_ms = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0);
    let dir = config.run_dir();
    let game = config.replication_game(replication);
    let (mut policies, audit) = build_policies(config)?;
    let has_llm = config.has_llm_agents();

    let header = LogHeader {
        format_version: LOG_FORMAT_VERSION,
        software_version: SOFTWARE_VERSION.to_string(),
        label: config.label.clone(),
        replication,
        master_seed: config.game.seed,
        seed_derivation: SEED_DERIVATION.to_string(),
        config: game,
        agents: policies
            .iter()
            .enumerate()
            .map(|(index, p)| AgentMeta {
                index,
                policy: p.meta(),
            })
            .collect(),
        agent_specs: config.agents.clone(),
        audit_file: has_llm.then(|| audit_file_name(replication)),
    };

    let log_path = dir.join(log_file_name(replication));
    let tmp = partial_path(&log_path);
    let file = File::create(&tmp).map_err(io_err(&tmp))?;
    let mut out = BufWriter::new(file);
    writeln!(out, "{}", to_json_line(&HeaderLine { header })).map_err(io_err(&tmp))?;
    out.flush().map_err(io_err(&tmp))?;

    let log = play(&game, &mut policies, |record: &RoundRecord| {
        writeln!(out, "{}", to_json_line(record))?;
        out.flush()
    })
    .map_err(|e| match e {
        GameError::Io(error) => HarnessError::Io {
            path: tmp.clone(),
            error,
        },
        other => HarnessError::Game(other),
    })?;
    let file = out.into_inner().map_err(|e| HarnessError::Io {
        path: tmp.clone(),
        error: e.into_error(),
    })?;
    file.sync_all().map_err(io_err(&tmp))?;
    drop(file);
    fs::rename(&tmp, &log_path).map_err(io_err(&log_path))?;

    let records: Vec<AuditRecord> = audit.lock().map(|a| a.clone()).unwrap_or_default();
    if has_llm {
        let mut text = String::new();
        for r in &records {
            text.push_str(&to_json_line(r));
            text.push('\n');
        }
        write_atomic(&dir.join(audit_file_name(replication)), text.as_bytes())?;
    }
    let meta = RunMeta {
        software_version: SOFTWARE_VERSION.to_string(),
        started_unix_ms,
        elapsed_ms: started.elapsed().as_secs_f64() * 1e3,
        llm_requests: records.len(),
        total_latency_ms: records.iter().map(|r| r.latency_ms).sum(),
    };
    let meta_json = serde_json::to_vec_pretty(&meta).expect("meta serializes");
    write_atomic(&dir.join(meta_file_name(replication)), &meta_json)?;

    let summary = summarize_run(&log, replication, log_file_name(replication))?;
    Ok((log, summary))
}

fn theory_comparison(
    config: &ExperimentConfig,
    logs: &[RunLog],
) -> Result<Option<TheoryComparison>> {
    let Some(ps) = config.analytic_probabilities() else {
        return Ok(None);
    };
    let model = BinomialAttendanceModel::Heterogeneous(ps.clone());
    let analytic_overload = model.overload_probability(config.game.capacity as u64)?;
    let (mean, var) = attendance_mean_var(&model)?;
    let attendance: Vec<f64> = logs
        .iter()
        .flat_map(|l| l.rounds.iter().map(|r| r.attendance as f64))
        .collect();
    let t = attendance.len();
    let c = config.game.capacity as f64;
    let empirical_overload = attendance.iter().filter(|&&a| a > c).count() as f64 / t as f64;
    Ok(Some(TheoryComparison {
        go_probabilities: ps,
        analytic_overload,
        empirical_overload,
        z_score: binomial_z_score(empirical_overload, analytic_overload, t),
        analytic_mean_attendance: mean,
        empirical_mean_attendance: attendance.iter().sum::<f64>() / t as f64,
        analytic_variance: var,
        empirical_variance: crate::analytics::population_variance(&attendance),
        pooled_rounds: t,
    }))
}

/// Runs every replication and writes logs plus `summary.json`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    config.validate()?;
    let dir = config.run_dir();
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;

    let workers = config
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .min(config.replications)
        .max(1);
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<ReplicationOutcome>>> =
        Mutex::new((0..config.replications).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let r = next.fetch_add(1, Ordering::SeqCst);
                if r >= config.replications {
                    break;
                }
                let outcome = run_replication(config, r);
                results.lock().expect("results lock")[r] = Some(outcome);
            });
        }
    });

    let mut logs = Vec::with_capacity(config.replications);
    let mut runs = Vec::with_capacity(config.replications);
    for outcome in results.into_inner().expect("results lock") {
        let (log, summary) = outcome.expect("every replication ran")?;
        logs.push(log);
        runs.push(summary);
    }
    let summary = ExperimentSummary {
        label: config.label.clone(),
        software_version: SOFTWARE_VERSION.to_string(),
        master_seed: config.game.seed,
        config: config.clone(),
        theory: theory_comparison(config, &logs)?,
        runs,
    };
    let summary_path = dir.join("summary.json");
    let mut bytes = serde_json::to_vec_pretty(&summary).expect("summary serializes");
    bytes.push(b'\n');
    write_atomic(&summary_path, &bytes)?;
    Ok(ExperimentOutput {
        summary,
        logs: (0..config.replications)
            .map(|r| dir.join(log_file_name(r)))
            .collect(),
        dir,
        summary_path,
    })
}

/// Reads a round log, validating every record.
///
/// Accepts the `.partial` file of an interrupted run; it yields the rounds
/// completed before the interruption.
pub fn read_run_log(path: &Path) -> Result<(LogHeader, RunLog)> {
    let file = File::open(path).map_err(io_err(path))?;
    let parse_err = |line: usize, message: String| HarnessError::Parse {
        path: path.to_path_buf(),
        message: format!("line {line}: {message}"),
    };
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty log".into()))?
        .map_err(io_err(path))?;
    let header: HeaderLine =
        serde_json::from_str(&first).map_err(|e| parse_err(1, e.to_string()))?;
    let header = header.header;
    let mut rounds = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RoundRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(i + 2, e.to_string()))?;
        rounds.push(record);
    }
    if rounds.len() > header.config.rounds {
        return Err(parse_err(
            0,
            format!(
                "{} rounds but header declares {}",
                rounds.len(),
                header.config.rounds
            ),
        ));
    }
    let log = RunLog {
        config: header.config,
        agents: header.agents.clone(),
        rounds,
    };
    log.validate()?;
    Ok((header, log))
}

/// Metrics recomputed offline from a log file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogReport {
    pub path: String,
    pub label: String,
    pub replication: usize,
    pub summary: RunSummary,
}

pub fn report_logs(paths: &[PathBuf]) -> Result<Vec<LogReport>> {
    paths
        .iter()
        .map(|p| {
            let (header, log) = read_run_log(p)?;
            let name = p
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok(LogReport {
                path: p.display().to_string(),
                label: header.label,
                replication: header.replication,
                summary: summarize_run(&log, header.replication, name)?,
            })
        })
        .collect()
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(io_err(path))?;
    Ok(csv::Writer::from_writer(file))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> HarnessError + '_ {
    move |e| HarnessError::Io {
        path: path.to_path_buf(),
        error: std::io::Error::other(e.to_string()),
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Plot data for a set of logs: attendance series, per-run overload bars,
/// and per-agent metrics. Returns the files written.
pub fn write_report_csv(paths: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let attendance_path = out_dir.join("attendance.csv");
    let overload_path = out_dir.join("overload.csv");
    let agents_path = out_dir.join("agents.csv");
    let mut att = csv_writer(&attendance_path)?;
    let mut bars = csv_writer(&overload_path)?;
    let mut agents = csv_writer(&agents_path)?;
    att.write_record(["run", "round", "attendance", "capacity", "overloaded"])
        .map_err(csv_err(&attendance_path))?;
    bars.write_record([
        "run",
        "overload_frequency",
        "mean_overload_severity",
        "mean_waste",
        "attendance_mean",
        "attendance_variance",
        "lag1_autocorrelation",
        "s_eff",
    ])
    .map_err(csv_err(&overload_path))?;
    agents
        .write_record([
            "run",
            "agent",
            "policy",
            "personality",
            "request_frequency",
            "successful_acquisitions",
            "efficiency",
            "max_starvation",
            "burst_variance",
            "overload_contribution",
            "total_payoff",
        ])
        .map_err(csv_err(&agents_path))?;
    for path in paths {
        let (header, log) = read_run_log(path)?;
        let run = format!("{}/{}", header.label, header.replication);
        for r in &log.rounds {
            att.write_record([
                run.clone(),
                r.round.to_string(),
                r.attendance.to_string(),
                r.capacity.to_string(),
                (r.overloaded as u8).to_string(),
            ])
            .map_err(csv_err(&attendance_path))?;
        }
        let s = compute_system_metrics(&log)?;
        bars.write_record([
            run.clone(),
            s.overload_frequency.to_string(),
            s.mean_overload_severity.to_string(),
            s.mean_waste.to_string(),
            s.attendance_mean.to_string(),
            s.attendance_variance.to_string(),
            opt(s.lag1_autocorrelation),
            opt(s.s_eff),
        ])
        .map_err(csv_err(&overload_path))?;
        for m in compute_all_agent_metrics(&log)? {
            let meta = &log.agents[m.agent_index].policy;
            agents
                .write_record([
                    run.clone(),
                    m.agent_index.to_string(),
                    meta.policy.clone(),
                    meta.personality
                        .map(|p| p.name().to_string())
                        .unwrap_or_default(),
                    m.request_frequency.to_string(),
                    m.successful_acquisitions.to_string(),
                    m.efficiency.to_string(),
                    m.max_starvation.to_string(),
                    m.burst_variance.to_string(),
                    m.overload_contribution.to_string(),
                    m.total_payoff.to_string(),
                ])
                .map_err(csv_err(&agents_path))?;
        }
    }
    att.flush().map_err(io_err(&attendance_path))?;
    bars.flush().map_err(io_err(&overload_path))?;
    agents.flush().map_err(io_err(&agents_path))?;
    Ok(vec![attendance_path, overload_path, agents_path])
}

/// Cluster scatter coordinates (standardized features) and the per-cluster table.
pub fn write_cluster_csv(
    report: &crate::clustering::ClusterReport,
    rows: &[crate::clustering::BehavioralFeatures],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let points_path = out_dir.join("cluster_points.csv");
    let table_path = out_dir.join("cluster_table.csv");
    let mut points = csv_writer(&points_path)?;
    let mut header = vec![
        "run".to_string(),
        "agent".into(),
        "group".into(),
        "cluster".into(),
    ];
    header.extend(
        crate::clustering::FEATURE_NAMES
            .iter()
            .map(|f| format!("z_{f}")),
    );
    points
        .write_record(&header)
        .map_err(csv_err(&points_path))?;
    let raw = crate::clustering::feature_matrix(rows);
    for (inst, x) in report.instances.iter().zip(&raw) {
        let mut rec = vec![
            inst.run.to_string(),
            inst.agent.to_string(),
            inst.group.clone(),
            inst.cluster.to_string(),
        ];
        for (j, v) in x.iter().enumerate() {
            let s = report.standardization.stds[j];
            let z = if s == 0.0 {
                0.0
            } else {
                (v - report.standardization.means[j]) / s
            };
            rec.push(z.to_string());
        }
        points.write_record(&rec).map_err(csv_err(&points_path))?;
    }
    points.flush().map_err(io_err(&points_path))?;

    let mut table = csv_writer(&table_path)?;
    table
        .write_record([
            "cluster",
            "count",
            "share",
            "request_frequency",
            "max_starvation",
            "efficiency",
            "overload_contribution",
            "burst_variance",
            "successful_acquisitions",
            "steady",
        ])
        .map_err(csv_err(&table_path))?;
    for c in &report.clusters {
        table
            .write_record([
                c.cluster.to_string(),
                c.count.to_string(),
                c.share.to_string(),
                c.request_frequency.to_string(),
                c.max_starvation.to_string(),
                c.efficiency.to_string(),
                c.overload_contribution.to_string(),
                c.burst_variance.to_string(),
                c.successful_acquisitions.to_string(),
                c.steady.to_string(),
            ])
            .map_err(csv_err(&table_path))?;
    }
    table.flush().map_err(io_err(&table_path))?;
    Ok(vec![points_path, table_path])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::Action;

    fn minimal(dir: &Path) -> String {
        format!(
            r#"
label = "baseline"
output_dir = "{}"

[game]
n_agents = 3
capacity = 1
rounds = 100
seed = 7

[[agents]]
kind = "capacity_matching"

[[agents]]
kind = "capacity_matching"

[[agents]]
kind = "capacity_matching"
"#,
            dir.display()
        )
    }

    fn parse(text: &str) -> Result<ExperimentConfig> {
        parse_config(text, Path::new("test.toml"))
    }

    #[test]
    fn minimal_config_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let c = parse(&minimal(dir.path())).unwrap();
        assert_eq!(c.replications, 1);
        assert_eq!(c.analytic_probabilities().unwrap(), vec![1.0 / 3.0; 3]);
    }

    #[test]
    fn config_errors_name_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let base = minimal(dir.path());
        let short = base.replacen("n_agents = 3", "n_agents = 4", 1);
        match parse(&short).unwrap_err() {
            HarnessError::Validation { field, .. } => assert_eq!(field, "agents"),
            e => panic!("{e}"),
        }
        let over = base.replacen("capacity = 1", "capacity = 4", 1);
        match parse(&over).unwrap_err() {
            HarnessError::Validation { field, .. } => assert_eq!(field, "game"),
            e => panic!("{e}"),
        }
        let unknown = base.replacen("rounds = 100", "rounds = 100\nturbo = true", 1);
        let msg = parse(&unknown).unwrap_err().to_string();
        assert!(msg.contains("turbo"), "{msg}");
        let undeclared = base.replacen(
            "kind = \"capacity_matching\"\n\n[[agents]]",
            "kind = \"llm\"\npersonality = \"neutral\"\nbackend = \"gpt\"\n\n[[agents]]",
            1,
        );
        match parse(&undeclared).unwrap_err() {
            HarnessError::Validation { field, .. } => assert_eq!(field, "agents[0].backend"),
            e => panic!("{e}"),
        }
        assert!(matches!(
            load_config(Path::new("/nonexistent/missing.toml")),
            Err(HarnessError::Io { .. })
        ));
    }

    #[test]
    fn baseline_summary_reports_theory() {
        let dir = tempfile::tempdir().unwrap();
        let c = parse(&minimal(dir.path())).unwrap();
        let out = run_experiment(&c).unwrap();
        let theory = out.summary.theory.as_ref().unwrap();
        assert!((theory.analytic_overload - 7.0 / 27.0).abs() < 1e-12);
        assert_eq!(theory.pooled_rounds, 100);
        assert_eq!(
            theory.empirical_overload,
            out.summary.runs[0].system.overload_frequency
        );
        assert!(out.summary_path.exists());
        assert!(dir.path().join("baseline/run_000.meta.json").exists());
        assert!(!dir.path().join("baseline/run_000.jsonl.partial").exists());
    }

    #[test]
    fn scripted_summary_matches_hand_values() {
        let dir = tempfile::tempdir().unwrap();
        let text = format!(
            r#"
label = "scripted"
output_dir = "{}"
[game]
n_agents = 2
capacity = 1
rounds = 5
seed = 1
[[agents]]
kind = "scripted"
actions = [1, 1, 0, 1, 0]
[[agents]]
kind = "scripted"
actions = [1, 0, 0, 0, 1]
"#,
            dir.path().display()
        );
        let out = run_experiment(&parse(&text).unwrap()).unwrap();
        let run = &out.summary.runs[0];
        // attendance 2,1,0,1,1
        assert_eq!(run.system.overload_frequency, 0.2);
        assert_eq!(run.system.extreme_empty_rate, 0.2);
        assert_eq!(run.system.attendance_mean, 1.0);
        assert_eq!(run.agents[0].successful_acquisitions, 2);
        assert_eq!(run.agents[0].max_starvation, 1);
        assert_eq!(run.agents[1].successful_acquisitions, 1);
        assert_eq!(run.agents[1].max_starvation, 4);
        assert_eq!(run.agents[1].total_payoff, -3);
        assert!(out.summary.theory.is_none());
        let (_, log) = read_run_log(&out.logs[0]).unwrap();
        assert_eq!(
            log.agent_actions(0),
            vec![
                Action::Go,
                Action::Go,
                Action::Stay,
                Action::Go,
                Action::Stay
            ]
        );
    }

    #[test]
    fn replications_get_distinct_seeds_and_logs() {
        let dir = tempfile::tempdir().unwrap();
        let text = minimal(dir.path()).replacen(
            "label = \"baseline\"",
            "label = \"reps\"\nreplications = 3",
            1,
        );
        let out = run_experiment(&parse(&text).unwrap()).unwrap();
        assert_eq!(out.logs.len(), 3);
        let seeds: Vec<u64> = out.summary.runs.iter().map(|r| r.run_seed).collect();
        assert!(seeds[0] != seeds[1] && seeds[1] != seeds[2] && seeds[0] != seeds[2]);
        let bytes: Vec<Vec<u8>> = out.logs.iter().map(|p| fs::read(p).unwrap()).collect();
        assert!(bytes[0] != bytes[1] && bytes[1] != bytes[2]);
        assert_eq!(out.summary.theory.as_ref().unwrap().pooled_rounds, 300);
    }

    #[test]
    fn offline_report_matches_online_summary() {
        let dir = tempfile::tempdir().unwrap();
        let text = minimal(dir.path());
        let out = run_experiment(&parse(&text).unwrap()).unwrap();
        let offline = report_logs(&out.logs).unwrap();
        assert_eq!(offline[0].summary, out.summary.runs[0]);
        let csv_dir = dir.path().join("csv");
        let files = write_report_csv(&out.logs, &csv_dir).unwrap();
        let attendance = fs::read_to_string(&files[0]).unwrap();
        assert_eq!(attendance.lines().count(), 101);
    }

    #[test]
    fn partial_log_is_readable() {
        let dir = tempfile::tempdir().unwrap();
        let out = run_experiment(&parse(&minimal(dir.path())).unwrap()).unwrap();
        let text = fs::read_to_string(&out.logs[0]).unwrap();
        let truncated: String = text.lines().take(11).map(|l| format!("{l}\n")).collect();
        let partial = dir.path().join("run_000.jsonl.partial");
        fs::write(&partial, truncated).unwrap();
        let (_, log) = read_run_log(&partial).unwrap();
        assert_eq!(log.n_rounds(), 10);
    }

    #[test]
    fn tampered_log_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let out = run_experiment(&parse(&minimal(dir.path())).unwrap()).unwrap();
        let text = fs::read_to_string(&out.logs[0]).unwrap();
        let tampered = text.replacen("\"attendance\":", "\"attendance\":9", 1);
        let path = dir.path().join("bad.jsonl");
        fs::write(&path, tampered).unwrap();
        assert!(read_run_log(&path).is_err());
    }
}
