//! Decision policies.
//!
//! Every policy consumes exactly one uniform draw per round from its agent's
//! stream, whether or not it needs it, and an exploration wrapper consumes
//! exactly one more. Keeping the draw budget fixed means two populations that
//! differ only in policy kind still see aligned random streams.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::game::{Action, AgentDecision, GameConfig, HistoryView};
use crate::rng::AgentRng;

/// Default exploration rate for LLM-backed agents.
pub const DEFAULT_EPSILON: f64 = 0.15;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("invalid policy parameter: {0}")]
    InvalidParameter(String),
    #[error("backend error: {0}")]
    Backend(String),
}

/// Uniform contract every agent implementation satisfies.
pub trait Policy: Send {
    fn decide(
        &mut self,
        config: &GameConfig,
        view: &HistoryView,
        rng: &mut AgentRng,
    ) -> Result<AgentDecision, PolicyError>;

    fn meta(&self) -> PolicyMeta;
}

/// Descriptive identity of a policy, written into log headers.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PolicyMeta {
    pub policy: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub personality: Option<PersonalityKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_go: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PersonalityKind {
    Neutral,
    RiskAverse,
    Contrarian,
    TrendFollower,
    Optimist,
    Pessimist,
}

impl PersonalityKind {
    pub const ALL: [PersonalityKind; 6] = [
        PersonalityKind::Neutral,
        PersonalityKind::RiskAverse,
        PersonalityKind::Contrarian,
        PersonalityKind::TrendFollower,
        PersonalityKind::Optimist,
        PersonalityKind::Pessimist,
    ];

    /// Personality prompt shown to an LLM agent; empty for Neutral.
    pub fn prompt_text(self) -> &'static str {
        match self {
            PersonalityKind::Neutral => "",
            PersonalityKind::RiskAverse => {
                "You are cautious and prefer avoiding crowds. When in doubt, you prefer to stay home."
            }
            PersonalityKind::Contrarian => {
                "You are contrarian by nature. You like to do the opposite of what you think most people will do."
            }
            PersonalityKind::TrendFollower => {
                "You believe patterns repeat. If attendance has been low recently, it will likely stay low."
            }
            PersonalityKind::Optimist => {
                "You are optimistic and tend to believe things will work out. You expect the bar won't be too crowded."
            }
            PersonalityKind::Pessimist => {
                "You are pessimistic and expect the worst. You assume everyone else will show up."
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PersonalityKind::Neutral => "neutral",
            PersonalityKind::RiskAverse => "risk_averse",
            PersonalityKind::Contrarian => "contrarian",
            PersonalityKind::TrendFollower => "trend_follower",
            PersonalityKind::Optimist => "optimist",
            PersonalityKind::Pessimist => "pessimist",
        }
    }
}

impl fmt::Display for PersonalityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Heuristic parameters shown to LLM agents and used by the Neutral proxy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrategyParams {
    pub attendance_threshold: f64,
    pub crowd_penalty_weight: f64,
    pub recency_weight: f64,
}

impl Default for StrategyParams {
    fn default() -> Self {
        StrategyParams {
            attendance_threshold: 0.5,
            crowd_penalty_weight: 0.5,
            recency_weight: 0.7,
        }
    }
}

impl StrategyParams {
    pub fn validate(&self) -> Result<(), PolicyError> {
        check_probability("attendance_threshold", self.attendance_threshold)?;
        check_probability("crowd_penalty_weight", self.crowd_penalty_weight)?;
        if !(self.recency_weight > 0.0 && self.recency_weight < 1.0) {
            return Err(PolicyError::InvalidParameter(format!(
                "recency_weight must lie in (0, 1), got {}",
                self.recency_weight
            )));
        }
        Ok(())
    }
}

/// Free parameters of the personality proxies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProxyDispositions {
    /// GO probability of the Optimist proxy.
    pub optimist_p: f64,
    /// GO probability of the Pessimist proxy.
    pub pessimist_p: f64,
    /// Risk-averse agents go only while expected attendance is below this
    /// fraction of capacity.
    pub risk_averse_margin: f64,
}

impl Default for ProxyDispositions {
    fn default() -> Self {
        ProxyDispositions {
            optimist_p: 0.9,
            pessimist_p: 0.1,
            risk_averse_margin: 0.8,
        }
    }
}

impl ProxyDispositions {
    pub fn validate(&self) -> Result<(), PolicyError> {
        check_probability("optimist_p", self.optimist_p)?;
        check_probability("pessimist_p", self.pessimist_p)?;
        if !(self.risk_averse_margin.is_finite() && self.risk_averse_margin >= 0.0) {
            return Err(PolicyError::InvalidParameter(format!(
                "risk_averse_margin must be a nonnegative number, got {}",
                self.risk_averse_margin
            )));
        }
        Ok(())
    }
}

pub(crate) fn check_probability(name: &str, value: f64) -> Result<(), PolicyError> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(PolicyError::InvalidParameter(format!(
            "{name} must lie in [0, 1], got {value}"
        )))
    }
}

/// Agent specification as written in experiment config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicySpec {
    CapacityMatching,
    UniformRandom,
    Bernoulli {
        p: f64,
    },
    Personality {
        personality: PersonalityKind,
        #[serde(default)]
        params: StrategyParams,
        #[serde(default)]
        epsilon: Option<f64>,
    },
    Llm {
        personality: PersonalityKind,
        backend: String,
        #[serde(default)]
        params: StrategyParams,
        #[serde(default)]
        epsilon: Option<f64>,
    },
    Scripted {
        actions: Vec<Action>,
    },
}

impl PolicySpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            PolicySpec::CapacityMatching => "capacity_matching",
            PolicySpec::UniformRandom => "uniform_random",
            PolicySpec::Bernoulli { .. } => "bernoulli",
            PolicySpec::Personality { .. } => "personality",
            PolicySpec::Llm { .. } => "llm",
            PolicySpec::Scripted { .. } => "scripted",
        }
    }

    /// GO probability of analytic baselines; `None` for history-dependent kinds.
    pub fn analytic_p(&self, config: &GameConfig) -> Option<f64> {
        match self {
            PolicySpec::CapacityMatching => Some(config.capacity_ratio()),
            PolicySpec::UniformRandom => Some(0.5),
            PolicySpec::Bernoulli { p } => Some(*p),
            _ => None,
        }
    }

    pub fn personality(&self) -> Option<PersonalityKind> {
        match self {
            PolicySpec::Personality { personality, .. } | PolicySpec::Llm { personality, .. } => {
                Some(*personality)
            }
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        match self {
            PolicySpec::Bernoulli { p } => check_probability("p", *p),
            PolicySpec::Personality {
                params, epsilon, ..
            }
            | PolicySpec::Llm {
                params, epsilon, ..
            } => {
                params.validate()?;
                if let Some(e) = epsilon {
                    check_probability("epsilon", *e)?;
                }
                Ok(())
            }
            PolicySpec::Scripted { actions } if actions.is_empty() => Err(
                PolicyError::InvalidParameter("scripted policy needs at least one action".into()),
            ),
            _ => Ok(()),
        }
    }
}

/// Memoryless agent that goes with fixed probability `p`.
#[derive(Debug, Clone)]
pub struct BernoulliPolicy {
    p: f64,
    label: &'static str,
}

impl BernoulliPolicy {
    pub fn new(p: f64) -> Result<Self, PolicyError> {
        check_probability("p", p)?;
        Ok(BernoulliPolicy {
            p,
            label: "bernoulli",
        })
    }

    pub fn capacity_matching(config: &GameConfig) -> Self {
        BernoulliPolicy {
            p: config.capacity_ratio(),
            label: "capacity_matching",
        }
    }

    pub fn uniform_random() -> Self {
        BernoulliPolicy {
            p: 0.5,
            label: "uniform_random",
        }
    }

    pub fn p(&self) -> f64 {
        self.p
    }
}

impl Policy for BernoulliPolicy {
    fn decide(
        &mut self,
        _: &GameConfig,
        _: &HistoryView,
        rng: &mut AgentRng,
    ) -> Result<AgentDecision, PolicyError> {
        let action = bernoulli_action(self.p, rng);
        let confidence = if action.is_go() { self.p } else { 1.0 - self.p };
        Ok(AgentDecision::new(action, confidence))
    }

    fn meta(&self) -> PolicyMeta {
        PolicyMeta {
            policy: self.label.into(),
            p_go: Some(self.p),
            ..PolicyMeta::default()
        }
    }
}

/// One draw: GO iff `u < p` with `u` uniform on [0, 1).
pub fn bernoulli_action(p: f64, rng: &mut AgentRng) -> Action {
    if rng.gen::<f64>() < p {
        Action::Go
    } else {
        Action::Stay
    }
}

/// The GO probability that matches expected attendance to capacity.
pub fn capacity_matching_p(n_agents: usize, capacity: usize) -> Result<f64, PolicyError> {
    if capacity == 0 || capacity > n_agents {
        return Err(PolicyError::InvalidParameter(format!(
            "capacity {capacity} must lie in [1, {n_agents}]"
        )));
    }
    Ok(capacity as f64 / n_agents as f64)
}

/// Replays a fixed action list, cycling when the run is longer than the script.
#[derive(Debug, Clone)]
pub struct ScriptedPolicy {
    script: Vec<Action>,
}

impl ScriptedPolicy {
    pub fn new(script: Vec<Action>) -> Result<Self, PolicyError> {
        if script.is_empty() {
            return Err(PolicyError::InvalidParameter(
                "scripted policy needs at least one action".into(),
            ));
        }
        Ok(ScriptedPolicy { script })
    }
}

impl Policy for ScriptedPolicy {
    fn decide(
        &mut self,
        _: &GameConfig,
        view: &HistoryView,
        rng: &mut AgentRng,
    ) -> Result<AgentDecision, PolicyError> {
        // Keeps the per-round draw budget aligned with stochastic kinds.
        let _: f64 = rng.gen();
        let action = self.script[view.round % self.script.len()];
        Ok(AgentDecision::new(action, 1.0))
    }

    fn meta(&self) -> PolicyMeta {
        PolicyMeta {
            policy: "scripted".into(),
            ..PolicyMeta::default()
        }
    }
}

/// Inverts the action with probability `epsilon`. Always consumes one draw.
pub fn epsilon_greedy_wrap(base: AgentDecision, epsilon: f64, rng: &mut AgentRng) -> AgentDecision {
    let u: f64 = rng.gen();
    if u < epsilon {
        AgentDecision {
            action: base.action.flipped(),
            flipped: true,
            ..base
        }
    } else {
        base
    }
}

/// Exponentially weighted attendance estimate, most recent round weighted 1.
///
/// Returns `None` when no round has been played yet.
pub fn recency_weighted_attendance(view: &HistoryView, recency_weight: f64) -> Option<f64> {
    if view.recent_attendance.is_empty() {
        return None;
    }
    let mut weight = 1.0;
    let mut num = 0.0;
    let mut den = 0.0;
    for &a in &view.recent_attendance {
        num += weight * a as f64;
        den += weight;
        weight *= recency_weight;
    }
    Some(num / den)
}

/// Rule-based stand-in for an LLM agent of the given personality.
///
/// Consumes exactly one uniform draw regardless of the branch taken.
pub fn personality_decide(
    kind: PersonalityKind,
    params: &StrategyParams,
    dispositions: &ProxyDispositions,
    config: &GameConfig,
    view: &HistoryView,
    rng: &mut AgentRng,
) -> AgentDecision {
    let u: f64 = rng.gen();
    let capacity = config.capacity as f64;
    let estimate = recency_weighted_attendance(view, params.recency_weight);
    let draw = |p: f64| if u < p { Action::Go } else { Action::Stay };

    let (action, confidence, reasoning) = match (kind, estimate) {
        (PersonalityKind::Optimist, _) => (
            draw(dispositions.optimist_p),
            dispositions.optimist_p,
            "expects room at the bar".to_string(),
        ),
        (PersonalityKind::Pessimist, _) => (
            draw(dispositions.pessimist_p),
            1.0 - dispositions.pessimist_p,
            "expects everyone else to show up".to_string(),
        ),
        (PersonalityKind::RiskAverse, None) => {
            (Action::Stay, 0.5, "no history, staying home".to_string())
        }
        (PersonalityKind::RiskAverse, Some(est)) => {
            let limit = dispositions.risk_averse_margin * capacity;
            let action = if est < limit {
                Action::Go
            } else {
                Action::Stay
            };
            (
                action,
                1.0,
                format!("weighted attendance {est:.3} vs safe limit {limit:.3}"),
            )
        }
        (PersonalityKind::TrendFollower, None) => (
            draw(config.capacity_ratio()),
            0.5,
            "no history, going with capacity share".to_string(),
        ),
        (PersonalityKind::TrendFollower, Some(est)) => {
            let action = if est <= capacity {
                Action::Go
            } else {
                Action::Stay
            };
            (
                action,
                1.0,
                format!("recent attendance {est:.3} vs capacity {capacity}"),
            )
        }
        (PersonalityKind::Contrarian, None) => {
            (draw(0.5), 0.5, "no history, coin flip".to_string())
        }
        (PersonalityKind::Contrarian, Some(est)) => {
            let action = if est > capacity {
                Action::Go
            } else {
                Action::Stay
            };
            (action, 1.0, format!("crowd at {est:.3} should reverse"))
        }
        (PersonalityKind::Neutral, None) => (draw(0.5), 0.5, "no history, coin flip".to_string()),
        (PersonalityKind::Neutral, Some(est)) => {
            let penalty = params.crowd_penalty_weight * (est / capacity - 1.0).max(0.0);
            let score = params.attendance_threshold - penalty;
            let action = if score >= 0.5 {
                Action::Go
            } else {
                Action::Stay
            };
            (
                action,
                score.clamp(0.0, 1.0),
                format!("score {score:.3} from weighted attendance {est:.3}"),
            )
        }
    };
    AgentDecision::new(action, confidence).with_reasoning(reasoning)
}

/// Personality proxy with optional epsilon-greedy exploration.
#[derive(Debug, Clone)]
pub struct PersonalityPolicy {
    kind: PersonalityKind,
    params: StrategyParams,
    dispositions: ProxyDispositions,
    epsilon: Option<f64>,
}

impl PersonalityPolicy {
    pub fn new(
        kind: PersonalityKind,
        params: StrategyParams,
        dispositions: ProxyDispositions,
        epsilon: Option<f64>,
    ) -> Result<Self, PolicyError> {
        params.validate()?;
        dispositions.validate()?;
        if let Some(e) = epsilon {
            check_probability("epsilon", e)?;
        }
        Ok(PersonalityPolicy {
            kind,
            params,
            dispositions,
            epsilon,
        })
    }

    pub fn plain(kind: PersonalityKind) -> Self {
        PersonalityPolicy {
            kind,
            params: StrategyParams::default(),
            dispositions: ProxyDispositions::default(),
            epsilon: None,
        }
    }
}

impl Policy for PersonalityPolicy {
    fn decide(
        &mut self,
        config: &GameConfig,
        view: &HistoryView,
        rng: &mut AgentRng,
    ) -> Result<AgentDecision, PolicyError> {
        let decision = personality_decide(
            self.kind,
            &self.params,
            &self.dispositions,
            config,
            view,
            rng,
        );
        Ok(match self.epsilon {
            Some(e) => epsilon_greedy_wrap(decision, e, rng),
            None => decision,
        })
    }

    fn meta(&self) -> PolicyMeta {
        PolicyMeta {
            policy: "personality".into(),
            personality: Some(self.kind),
            epsilon: self.epsilon,
            ..PolicyMeta::default()
        }
    }
}
