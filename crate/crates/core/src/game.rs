//! Round-based game engine.
//!
//! Every round all agents submit an [`Action`] simultaneously. Attendance is
//! the number of GO actions; GO wins when attendance does not exceed capacity
//! and STAY wins otherwise. Agents see only attendance and their own
//! outcomes, never the individual choices of others.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::policy::{Policy, PolicyError, PolicyMeta};
use crate::rng;

pub const DEFAULT_HISTORY_WINDOW: usize = 10;

#[derive(Debug, Error)]
pub enum GameError {
    #[error("invalid game configuration: {0}")]
    InvalidConfig(String),
    #[error("attendance {attendance} outside [0, {n_agents}]")]
    AttendanceOutOfRange { attendance: usize, n_agents: usize },
    #[error("agent index {index} outside [0, {n_agents})")]
    AgentOutOfRange { index: usize, n_agents: usize },
    #[error("expected {expected} decisions, got {got}")]
    DecisionCount { expected: usize, got: usize },
    #[error("all {rounds} rounds have already been played")]
    Finished { rounds: usize },
    #[error("agent {agent} failed in round {round}: {source}")]
    Policy {
        round: usize,
        agent: usize,
        #[source]
        source: PolicyError,
    },
    #[error("round {round} violates record invariants: {reason}")]
    InvalidRecord { round: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Binary choice of one agent in one round. Serialized as `1` (GO) / `0` (STAY).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Action {
    Stay = 0,
    Go = 1,
}

impl Action {
    pub fn from_bit(bit: u8) -> Option<Action> {
        match bit {
            0 => Some(Action::Stay),
            1 => Some(Action::Go),
            _ => None,
        }
    }

    pub fn bit(self) -> u8 {
        self as u8
    }

    pub fn is_go(self) -> bool {
        self == Action::Go
    }

    pub fn flipped(self) -> Action {
        match self {
            Action::Go => Action::Stay,
            Action::Stay => Action::Go,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Action::Go => "GO",
            Action::Stay => "STAY",
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for Action {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_u8(self.bit())
    }
}

impl<'de> Deserialize<'de> for Action {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let bit = u8::deserialize(deserializer)?;
        Action::from_bit(bit)
            .ok_or_else(|| serde::de::Error::custom(format!("action must be 0 or 1, got {bit}")))
    }
}

/// One agent's decision for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentDecision {
    pub action: Action,
    pub confidence: f64,
    pub reasoning: String,
    /// Set when an exploration wrapper inverted the base action.
    pub flipped: bool,
    /// Set when the decision is a substitute draw after a backend failure.
    pub fallback: bool,
}

impl AgentDecision {
    pub fn new(action: Action, confidence: f64) -> Self {
        AgentDecision {
            action,
            confidence: confidence.clamp(0.0, 1.0),
            reasoning: String::new(),
            flipped: false,
            fallback: false,
        }
    }

    pub fn with_reasoning(mut self, reasoning: impl Into<String>) -> Self {
        self.reasoning = reasoning.into();
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GameConfig {
    pub n_agents: usize,
    pub capacity: usize,
    pub rounds: usize,
    #[serde(default = "default_history_window")]
    pub history_window: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_history_window() -> usize {
    DEFAULT_HISTORY_WINDOW
}

impl GameConfig {
    pub fn new(
        n_agents: usize,
        capacity: usize,
        rounds: usize,
        seed: u64,
    ) -> Result<Self, GameError> {
        let config = GameConfig {
            n_agents,
            capacity,
            rounds,
            history_window: DEFAULT_HISTORY_WINDOW,
            seed,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn with_history_window(mut self, window: usize) -> Result<Self, GameError> {
        self.history_window = window;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), GameError> {
        let fail = |msg: String| Err(GameError::InvalidConfig(msg));
        if self.n_agents == 0 {
            return fail("n_agents must be at least 1".into());
        }
        if self.capacity == 0 {
            return fail("capacity must be at least 1".into());
        }
        if self.capacity > self.n_agents {
            return fail(format!(
                "capacity {} exceeds n_agents {}",
                self.capacity, self.n_agents
            ));
        }
        if self.rounds == 0 {
            return fail("rounds must be at least 1".into());
        }
        if self.history_window == 0 {
            return fail("history_window must be at least 1".into());
        }
        Ok(())
    }

    /// Probability of GO that makes expected attendance equal capacity.
    pub fn capacity_ratio(&self) -> f64 {
        self.capacity as f64 / self.n_agents as f64
    }

    pub fn winning_action(&self, attendance: usize) -> Result<Action, GameError> {
        if attendance > self.n_agents {
            return Err(GameError::AttendanceOutOfRange {
                attendance,
                n_agents: self.n_agents,
            });
        }
        winning_action(attendance, self.capacity)
    }
}

/// GO wins iff `attendance <= capacity`.
pub fn winning_action(attendance: usize, capacity: usize) -> Result<Action, GameError> {
    if capacity == 0 {
        return Err(GameError::InvalidConfig(
            "capacity must be at least 1".into(),
        ));
    }
    Ok(if attendance <= capacity {
        Action::Go
    } else {
        Action::Stay
    })
}

/// +1 for matching the winning action, -1 otherwise.
pub fn payoff(action: Action, attendance: usize, capacity: usize) -> Result<i8, GameError> {
    let winner = winning_action(attendance, capacity)?;
    Ok(if action == winner { 1 } else { -1 })
}

/// Confidence and reasoning attached to one agent's action in a round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionNote {
    pub confidence: f64,
    #[serde(default)]
    pub reasoning: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub flipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundRecord {
    pub round: usize,
    pub actions: Vec<Action>,
    pub attendance: usize,
    pub capacity: usize,
    pub winning_action: Action,
    pub payoffs: Vec<i8>,
    pub overloaded: bool,
    #[serde(default)]
    pub fallbacks: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decisions: Option<Vec<DecisionNote>>,
}

impl RoundRecord {
    /// Builds a record from raw actions, applying the payoff rule.
    pub fn from_actions(
        round: usize,
        actions: Vec<Action>,
        capacity: usize,
    ) -> Result<Self, GameError> {
        let attendance = actions.iter().filter(|a| a.is_go()).count();
        let winner = winning_action(attendance, capacity)?;
        let payoffs = actions
            .iter()
            .map(|&a| if a == winner { 1 } else { -1 })
            .collect();
        Ok(RoundRecord {
            round,
            actions,
            attendance,
            capacity,
            winning_action: winner,
            payoffs,
            overloaded: attendance > capacity,
            fallbacks: Vec::new(),
            decisions: None,
        })
    }

    /// Checks the record against the payoff rule and its own bookkeeping.
    pub fn validate(&self, n_agents: usize) -> Result<(), GameError> {
        let bad = |reason: String| {
            Err(GameError::InvalidRecord {
                round: self.round,
                reason,
            })
        };
        if self.actions.len() != n_agents {
            return bad(format!(
                "{} actions for {} agents",
                self.actions.len(),
                n_agents
            ));
        }
        if self.payoffs.len() != n_agents {
            return bad(format!(
                "{} payoffs for {} agents",
                self.payoffs.len(),
                n_agents
            ));
        }
        let go = self.actions.iter().filter(|a| a.is_go()).count();
        if go != self.attendance {
            return bad(format!(
                "attendance {} but {} GO actions",
                self.attendance, go
            ));
        }
        if self.overloaded != (self.attendance > self.capacity) {
            return bad("overloaded flag disagrees with attendance".into());
        }
        let winner = match winning_action(self.attendance, self.capacity) {
            Ok(w) => w,
            Err(e) => return bad(e.to_string()),
        };
        if winner != self.winning_action {
            return bad("winning_action disagrees with attendance".into());
        }
        for (i, (&a, &r)) in self.actions.iter().zip(&self.payoffs).enumerate() {
            let expected = if a == winner { 1 } else { -1 };
            if r != expected {
                return bad(format!("payoff of agent {i} is {r}, expected {expected}"));
            }
        }
        if let Some(&i) = self.fallbacks.iter().find(|&&i| i >= n_agents) {
            return bad(format!("fallback index {i} out of range"));
        }
        if let Some(notes) = &self.decisions {
            if notes.len() != n_agents {
                return bad(format!(
                    "{} decision notes for {} agents",
                    notes.len(),
                    n_agents
                ));
            }
        }
        Ok(())
    }
}

/// What one agent can see before deciding: attendance and its own outcomes
/// for the most recent completed rounds, most recent first.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HistoryView {
    /// Index of the round about to be played.
    pub round: usize,
    pub agent: usize,
    pub recent_attendance: Vec<usize>,
    pub own_outcomes: Vec<(Action, i8)>,
}

impl HistoryView {
    pub fn is_empty(&self) -> bool {
        self.recent_attendance.is_empty()
    }

    pub fn len(&self) -> usize {
        self.recent_attendance.len()
    }
}

/// Mutable engine state for a single run.
#[derive(Debug, Clone)]
pub struct GameState {
    config: GameConfig,
    history: Vec<RoundRecord>,
}

impl GameState {
    pub fn new(config: GameConfig) -> Result<Self, GameError> {
        config.validate()?;
        Ok(GameState {
            config,
            history: Vec::with_capacity(config.rounds),
        })
    }

    pub fn config(&self) -> &GameConfig {
        &self.config
    }

    pub fn history(&self) -> &[RoundRecord] {
        &self.history
    }

    pub fn round(&self) -> usize {
        self.history.len()
    }

    pub fn is_finished(&self) -> bool {
        self.history.len() >= self.config.rounds
    }

    pub fn history_view(&self, agent: usize) -> Result<HistoryView, GameError> {
        if agent >= self.config.n_agents {
            return Err(GameError::AgentOutOfRange {
                index: agent,
                n_agents: self.config.n_agents,
            });
        }
        let recent = self.history.iter().rev().take(self.config.history_window);
        let (recent_attendance, own_outcomes) = recent
            .map(|r| (r.attendance, (r.actions[agent], r.payoffs[agent])))
            .unzip();
        Ok(HistoryView {
            round: self.round(),
            agent,
            recent_attendance,
            own_outcomes,
        })
    }

    /// Resolves one round from a full set of simultaneous decisions.
    pub fn step_round(&mut self, decisions: &[AgentDecision]) -> Result<&RoundRecord, GameError> {
        if self.is_finished() {
            return Err(GameError::Finished {
                rounds: self.config.rounds,
            });
        }
        if decisions.len() != self.config.n_agents {
            return Err(GameError::DecisionCount {
                expected: self.config.n_agents,
                got: decisions.len(),
            });
        }
        let actions = decisions.iter().map(|d| d.action).collect();
        let mut record = RoundRecord::from_actions(self.round(), actions, self.config.capacity)?;
        record.fallbacks = decisions
            .iter()
            .enumerate()
            .filter(|(_, d)| d.fallback)
            .map(|(i, _)| i)
            .collect();
        record.decisions = Some(
            decisions
                .iter()
                .map(|d| DecisionNote {
                    confidence: d.confidence,
                    reasoning: d.reasoning.clone(),
                    flipped: d.flipped,
                })
                .collect(),
        );
        self.history.push(record);
        Ok(self.history.last().expect("just pushed"))
    }

    pub fn into_history(self) -> Vec<RoundRecord> {
        self.history
    }
}

/// Identity of one agent in a run, as recorded in logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentMeta {
    pub index: usize,
    #[serde(flatten)]
    pub policy: PolicyMeta,
}

/// Complete record of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub config: GameConfig,
    pub agents: Vec<AgentMeta>,
    pub rounds: Vec<RoundRecord>,
}

impl RunLog {
    pub fn n_agents(&self) -> usize {
        self.config.n_agents
    }

    pub fn n_rounds(&self) -> usize {
        self.rounds.len()
    }

    pub fn attendance(&self) -> Vec<usize> {
        self.rounds.iter().map(|r| r.attendance).collect()
    }

    pub fn agent_actions(&self, agent: usize) -> Vec<Action> {
        self.rounds.iter().map(|r| r.actions[agent]).collect()
    }

    pub fn fallback_count(&self) -> usize {
        self.rounds.iter().map(|r| r.fallbacks.len()).sum()
    }

    pub fn validate(&self) -> Result<(), GameError> {
        self.config.validate()?;
        for (i, r) in self.rounds.iter().enumerate() {
            if r.round != i {
                return Err(GameError::InvalidRecord {
                    round: r.round,
                    reason: format!("expected round index {i}"),
                });
            }
            if r.capacity != self.config.capacity {
                return Err(GameError::InvalidRecord {
                    round: r.round,
                    reason: format!(
                        "capacity {} but config says {}",
                        r.capacity, self.config.capacity
                    ),
                });
            }
            r.validate(self.config.n_agents)?;
        }
        Ok(())
    }
}

/// Plays a full run, invoking `on_round` after every committed round.
///
/// Each agent draws from its own stream derived from `config.seed` and its
/// index, so the result is a pure function of the config and the policies.
pub fn play<F>(
    config: &GameConfig,
    policies: &mut [Box<dyn Policy>],
    mut on_round: F,
) -> Result<RunLog, GameError>
where
    F: FnMut(&RoundRecord) -> std::io::Result<()>,
{
    config.validate()?;
    if policies.len() != config.n_agents {
        return Err(GameError::DecisionCount {
            expected: config.n_agents,
            got: policies.len(),
        });
    }
    let mut rngs: Vec<_> = (0..config.n_agents)
        .map(|i| rng::agent_rng(config.seed, i))
        .collect();
    let mut state = GameState::new(*config)?;
    let mut decisions = Vec::with_capacity(config.n_agents);
    while !state.is_finished() {
        decisions.clear();
        for (agent, (policy, rng)) in policies.iter_mut().zip(rngs.iter_mut()).enumerate() {
            let view = state.history_view(agent)?;
            let decision =
                policy
                    .decide(config, &view, rng)
                    .map_err(|source| GameError::Policy {
                        round: view.round,
                        agent,
                        source,
                    })?;
            decisions.push(decision);
        }
        let record = state.step_round(&decisions)?;
        on_round(record)?;
    }
    let agents = policies
        .iter()
        .enumerate()
        .map(|(index, p)| AgentMeta {
            index,
            policy: p.meta(),
        })
        .collect();
    Ok(RunLog {
        config: *config,
        agents,
        rounds: state.into_history(),
    })
}

pub fn run_game(
    config: &GameConfig,
    policies: &mut [Box<dyn Policy>],
) -> Result<RunLog, GameError> {
    play(config, policies, |_| Ok(()))
}
