//! LLM-backed agents: prompt rendering, chat-completion transport, response
//! parsing, retry with backoff, and flagged fallbacks.
//!
//! Prompts are laid out in a fixed order: game rules, personality, strategy
//! parameters, history, response instructions. The first two form the system
//! message and the rest form the user message.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::game::{Action, AgentDecision, GameConfig, HistoryView};
use crate::policy::{
    epsilon_greedy_wrap, personality_decide, PersonalityKind, Policy, PolicyError, PolicyMeta,
    ProxyDispositions, StrategyParams,
};
use crate::rng::{self, AgentRng};

/// Appended to the user message when the first reply could not be parsed.
pub const REPROMPT_SUFFIX: &str =
    "Respond only with the JSON object {\"action\": \"GO\" or \"STAY\", \"confidence\": number, \"reasoning\": string} and nothing else.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PromptBundle {
    pub system_text: String,
    pub personality_text: String,
    pub strategy_text: String,
    pub history_text: String,
    pub response_instructions: String,
}

impl PromptBundle {
    pub fn system_message(&self) -> String {
        if self.personality_text.is_empty() {
            self.system_text.clone()
        } else {
            format!("{}\n\n{}", self.system_text, self.personality_text)
        }
    }

    pub fn user_message(&self) -> String {
        format!(
            "{}\n\n{}\n\n{}",
            self.strategy_text, self.history_text, self.response_instructions
        )
    }

    /// SHA-256 of the rendered messages, hex encoded.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.system_message().as_bytes());
        hasher.update([0u8]);
        hasher.update(self.user_message().as_bytes());
        format!("{:x}", hasher.finalize())
    }
}

pub fn build_prompt(
    config: &GameConfig,
    kind: PersonalityKind,
    params: &StrategyParams,
    view: &HistoryView,
) -> PromptBundle {
    let n = config.n_agents;
    let c = config.capacity;
    let system_text = format!(
        "You are playing a repeated game with {n} players in total. Every round each player \
         independently chooses GO or STAY. The capacity is {c}. If attendance (the number of \
         players choosing GO) is at or below {c}, the round is a good outcome; if attendance is \
         above {c}, the round is a bad outcome. You receive +1 if you choose GO and attendance is \
         at or below capacity, +1 if you choose STAY and attendance is above capacity, and -1 \
         otherwise. Your goal is to maximize your cumulative payoff over many rounds by choosing \
         the winning action as often as possible."
    );
    let strategy_text = format!(
        "Strategy parameters you may consider: attendance threshold (p_GO) = {}, crowd penalty \
         weight = {}, recency weight = {}.",
        params.attendance_threshold, params.crowd_penalty_weight, params.recency_weight
    );
    let mut history_text = format!("This is round {}. ", view.round + 1);
    if view.is_empty() {
        history_text.push_str("No rounds have been played yet.");
    } else {
        history_text.push_str("Recent rounds, most recent first:");
        for (k, (&attendance, &(action, payoff))) in view
            .recent_attendance
            .iter()
            .zip(&view.own_outcomes)
            .enumerate()
        {
            let round = view.round - k;
            let _ = write!(
                history_text,
                "\n- Round {round}: attendance {attendance} (capacity {c}); you chose {action}, payoff {payoff:+}"
            );
        }
    }
    let response_instructions = "Respond with a JSON object containing exactly these fields: \
         \"action\" (\"GO\" or \"STAY\"), \"confidence\" (a number between 0 and 1), and \
         \"reasoning\" (a brief string)."
        .to_string();
    PromptBundle {
        system_text,
        personality_text: kind.prompt_text().to_string(),
        strategy_text,
        history_text,
        response_instructions,
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("no JSON object found in response")]
    MalformedResponse,
    #[error("response is missing field `{0}`")]
    MissingField(&'static str),
    #[error("field `{field}` is invalid: {reason}")]
    InvalidField { field: &'static str, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedResponse {
    pub action: Action,
    pub confidence: f64,
    pub reasoning: String,
    pub raw_text: String,
    /// The reported confidence fell outside [0, 1] and was clamped.
    pub confidence_clamped: bool,
}

/// Extracts the decision from a model reply.
///
/// The first `{` that starts a complete JSON object is used, so replies may
/// wrap the object in prose or code fences.
pub fn parse_response(raw: &str) -> Result<ParsedResponse, ParseError> {
    let object = first_json_object(raw).ok_or(ParseError::MalformedResponse)?;
    let action = match object.get("action") {
        None | Some(Value::Null) => return Err(ParseError::MissingField("action")),
        Some(v) => parse_action(v)?,
    };
    let reported = match object.get("confidence") {
        None | Some(Value::Null) => return Err(ParseError::MissingField("confidence")),
        Some(Value::Number(n)) => n.as_f64().unwrap_or(f64::NAN),
        Some(Value::String(s)) => {
            s.trim()
                .parse::<f64>()
                .map_err(|_| ParseError::InvalidField {
                    field: "confidence",
                    reason: format!("not a number: {s:?}"),
                })?
        }
        Some(other) => {
            return Err(ParseError::InvalidField {
                field: "confidence",
                reason: format!("expected a number, got {other}"),
            })
        }
    };
    if !reported.is_finite() {
        return Err(ParseError::InvalidField {
            field: "confidence",
            reason: "not finite".into(),
        });
    }
    let confidence = reported.clamp(0.0, 1.0);
    let confidence_clamped = confidence != reported;
    if confidence_clamped {
        log::warn!("confidence {reported} outside [0, 1], clamped to {confidence}");
    }
    let reasoning = match object.get("reasoning") {
        None | Some(Value::Null) => return Err(ParseError::MissingField("reasoning")),
        Some(Value::String(s)) => s.clone(),
        Some(other) => other.to_string(),
    };
    Ok(ParsedResponse {
        action,
        confidence,
        reasoning,
        raw_text: raw.to_string(),
        confidence_clamped,
    })
}

fn first_json_object(raw: &str) -> Option<serde_json::Map<String, Value>> {
    raw.match_indices('{').find_map(|(start, _)| {
        let mut stream = serde_json::Deserializer::from_str(&raw[start..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(Value::Object(map))) => Some(map),
            _ => None,
        }
    })
}

fn parse_action(value: &Value) -> Result<Action, ParseError> {
    let invalid = || ParseError::InvalidField {
        field: "action",
        reason: format!("expected GO or STAY, got {value}"),
    };
    match value {
        Value::String(s) => match s.trim().to_ascii_lowercase().as_str() {
            "go" | "1" => Ok(Action::Go),
            "stay" | "0" => Ok(Action::Stay),
            _ => Err(invalid()),
        },
        Value::Number(n) => match n.as_f64() {
            Some(1.0) => Ok(Action::Go),
            Some(0.0) => Ok(Action::Stay),
            _ => Err(invalid()),
        },
        _ => Err(invalid()),
    }
}

/// Renders a decision in the response schema.
pub fn serialize_response(action: Action, confidence: f64, reasoning: &str) -> String {
    json!({
        "action": action.as_str(),
        "confidence": confidence,
        "reasoning": reasoning,
    })
    .to_string()
}

/// Backend settings as written in experiment config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LlmBackendConfig {
    pub endpoint_url: String,
    pub model_name: String,
    /// `None` leaves the provider default in place.
    pub temperature: Option<f64>,
    pub timeout_secs: f64,
    pub max_retries: u32,
    /// First backoff delay; doubles on every retry.
    pub backoff_base_ms: u64,
    pub auth_token_env_var: String,
    /// When set, requests are served locally by a [`MockBackend`].
    pub mock: Option<MockMode>,
}

impl Default for LlmBackendConfig {
    fn default() -> Self {
        LlmBackendConfig {
            endpoint_url: "https://api.openai.com/v1/chat/completions".into(),
            model_name: String::new(),
            temperature: None,
            timeout_secs: 60.0,
            max_retries: 3,
            backoff_base_ms: 500,
            auth_token_env_var: "OPENAI_API_KEY".into(),
            mock: None,
        }
    }
}

impl LlmBackendConfig {
    pub fn mock(mode: MockMode) -> Self {
        LlmBackendConfig {
            endpoint_url: String::new(),
            model_name: "mock".into(),
            backoff_base_ms: 0,
            mock: Some(mode),
            ..LlmBackendConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if let Some(t) = self.temperature {
            if !(t.is_finite() && t >= 0.0) {
                return Err(format!("temperature must be >= 0, got {t}"));
            }
        }
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            return Err(format!(
                "timeout_secs must be positive, got {}",
                self.timeout_secs
            ));
        }
        if self.mock.is_none() && self.endpoint_url.is_empty() {
            return Err("endpoint_url is required for HTTP backends".into());
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }

    /// Instantiates the transport described by this config.
    pub fn connect(&self) -> Result<Arc<dyn ChatBackend>, BackendError> {
        match &self.mock {
            Some(mode) => Ok(Arc::new(MockBackend::new(mode.clone()))),
            None => Ok(Arc::new(HttpBackend::new(self)?)),
        }
    }
}

/// Per-request facts the transport may use; HTTP backends ignore most of it.
#[derive(Debug, Clone, Copy)]
pub struct RequestContext<'a> {
    pub round: usize,
    pub agent: usize,
    pub attempt: u32,
    pub personality: PersonalityKind,
    pub config: &'a GameConfig,
    pub view: &'a HistoryView,
}

#[derive(Debug, Clone)]
pub struct ChatRequest<'a> {
    pub model: &'a str,
    pub system: String,
    pub user: String,
    pub temperature: Option<f64>,
    pub context: RequestContext<'a>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ChatReply {
    pub content: String,
    pub model: Option<String>,
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("request timed out")]
    Timeout,
    #[error("transient backend failure: {0}")]
    Transient(String),
    #[error("backend failure: {0}")]
    Fatal(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        !matches!(self, BackendError::Fatal(_))
    }
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest<'_>) -> Result<ChatReply, BackendError>;
}

/// OpenAI-compatible chat-completions transport.
pub struct HttpBackend {
    client: reqwest::blocking::Client,
    endpoint: String,
    token: Option<String>,
}

impl HttpBackend {
    pub fn new(config: &LlmBackendConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout())
            .build()
            .map_err(|e| BackendError::Fatal(e.to_string()))?;
        let token = std::env::var(&config.auth_token_env_var).ok();
        if token.is_none() {
            log::warn!(
                "{} is not set; sending requests without authorization",
                config.auth_token_env_var
            );
        }
        Ok(HttpBackend {
            client,
            endpoint: config.endpoint_url.clone(),
            token,
        })
    }
}

#[derive(Deserialize)]
struct CompletionResponse {
    model: Option<String>,
    choices: Vec<CompletionChoice>,
    usage: Option<CompletionUsage>,
}

#[derive(Deserialize)]
struct CompletionChoice {
    message: CompletionMessage,
}

#[derive(Deserialize)]
struct CompletionMessage {
    content: Option<String>,
}

#[derive(Deserialize)]
struct CompletionUsage {
    prompt_tokens: Option<u64>,
    completion_tokens: Option<u64>,
}

impl ChatBackend for HttpBackend {
    fn complete(&self, request: &ChatRequest<'_>) -> Result<ChatReply, BackendError> {
        let mut body = json!({
            "model": request.model,
            "messages": [
                {"role": "system", "content": request.system},
                {"role": "user", "content": request.user},
            ],
        });
        if let Some(t) = request.temperature {
            body["temperature"] = json!(t);
        }
        let mut builder = self.client.post(&self.endpoint).json(&body);
        if let Some(token) = &self.token {
            builder = builder.bearer_auth(token);
        }
        let response = builder.send().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout
            } else {
                BackendError::Transient(e.to_string())
            }
        })?;
        let status = response.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(BackendError::Transient(format!("HTTP {status}")));
        }
        if !status.is_success() {
            let text = response.text().unwrap_or_default();
            return Err(BackendError::Fatal(format!("HTTP {status}: {text}")));
        }
        let parsed: CompletionResponse = response
            .json()
            .map_err(|e| BackendError::Transient(format!("unreadable completion body: {e}")))?;
        let content = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .unwrap_or_default();
        Ok(ChatReply {
            content,
            model: parsed.model,
            prompt_tokens: parsed.usage.as_ref().and_then(|u| u.prompt_tokens),
            completion_tokens: parsed.usage.as_ref().and_then(|u| u.completion_tokens),
        })
    }
}

/// Behaviors of the offline test backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum MockMode {
    /// Always answers with the given action.
    Fixed { action: String },
    /// Replies verbatim with `replies[round % len]`.
    Script { replies: Vec<String> },
    /// Answers as the personality proxy of the requesting agent would.
    EchoProxy,
    /// Answers with prose that contains no JSON object.
    Malformed,
    /// Times out `failures` times per (round, agent) before deferring to `then`.
    Flaky { failures: u32, then: Box<MockMode> },
}

pub struct MockBackend {
    mode: MockMode,
    calls: Mutex<HashMap<(usize, usize), u32>>,
}

impl MockBackend {
    pub fn new(mode: MockMode) -> Self {
        MockBackend {
            mode,
            calls: Mutex::new(HashMap::new()),
        }
    }

    fn answer(
        &self,
        mode: &MockMode,
        request: &ChatRequest<'_>,
        call: u32,
    ) -> Result<String, BackendError> {
        let ctx = &request.context;
        match mode {
            MockMode::Fixed { action } => Ok(json!({
                "action": action,
                "confidence": 0.9,
                "reasoning": "fixed mock reply",
            })
            .to_string()),
            MockMode::Script { replies } if replies.is_empty() => {
                Err(BackendError::Fatal("mock script has no replies".into()))
            }
            MockMode::Script { replies } => Ok(replies[ctx.round % replies.len()].clone()),
            MockMode::EchoProxy => {
                let seed = rng::splitmix64(ctx.config.seed ^ rng::splitmix64(ctx.round as u64));
                let mut proxy_rng = rng::agent_rng(seed, ctx.agent);
                let d = personality_decide(
                    ctx.personality,
                    &StrategyParams::default(),
                    &ProxyDispositions::default(),
                    ctx.config,
                    ctx.view,
                    &mut proxy_rng,
                );
                Ok(serialize_response(d.action, d.confidence, &d.reasoning))
            }
            MockMode::Malformed => Ok("I think I'll go.".to_string()),
            MockMode::Flaky { failures, then } => {
                if call < *failures {
                    Err(BackendError::Timeout)
                } else {
                    self.answer(then, request, call - failures)
                }
            }
        }
    }
}

impl ChatBackend for MockBackend {
    fn complete(&self, request: &ChatRequest<'_>) -> Result<ChatReply, BackendError> {
        let key = (request.context.round, request.context.agent);
        let call = {
            let mut calls = self.calls.lock().expect("mock call counter poisoned");
            let counter = calls.entry(key).or_insert(0);
            let call = *counter;
            *counter += 1;
            call
        };
        let content = self.answer(&self.mode, request, call)?;
        Ok(ChatReply {
            prompt_tokens: Some((request.system.len() + request.user.len()) as u64 / 4),
            completion_tokens: Some(content.len() as u64 / 4),
            content,
            model: Some("mock".into()),
        })
    }
}

/// One line of the per-run LLM audit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub round: usize,
    pub agent: usize,
    pub model: String,
    pub prompt_hash: String,
    pub raw_response: Option<String>,
    pub parse_outcome: String,
    pub reprompted: bool,
    pub retries: u32,
    pub latency_ms: f64,
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
    pub fallback: bool,
}

pub type AuditLog = Arc<Mutex<Vec<AuditRecord>>>;

pub struct LlmOutcome {
    pub decision: AgentDecision,
    pub audit: AuditRecord,
}

pub struct LlmClient {
    backend: Arc<dyn ChatBackend>,
    config: LlmBackendConfig,
}

impl LlmClient {
    pub fn new(backend: Arc<dyn ChatBackend>, config: LlmBackendConfig) -> Self {
        LlmClient { backend, config }
    }

    fn request_with_retry(
        &self,
        system: &str,
        user: String,
        ctx: RequestContext<'_>,
        retries: &mut u32,
    ) -> Result<ChatReply, BackendError> {
        let mut attempt = 0;
        loop {
            let request = ChatRequest {
                model: &self.config.model_name,
                system: system.to_string(),
                user: user.clone(),
                temperature: self.config.temperature,
                context: RequestContext { attempt, ..ctx },
            };
            match self.backend.complete(&request) {
                Ok(reply) => return Ok(reply),
                Err(e) if e.is_retryable() && attempt < self.config.max_retries => {
                    let delay = self
                        .config
                        .backoff_base_ms
                        .saturating_mul(1 << attempt.min(16));
                    log::debug!(
                        "round {} agent {}: {e}; retrying in {delay} ms",
                        ctx.round,
                        ctx.agent
                    );
                    if delay > 0 {
                        std::thread::sleep(Duration::from_millis(delay));
                    }
                    attempt += 1;
                    *retries += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    /// Queries the backend for one decision.
    ///
    /// A reply that cannot be parsed earns one reprompt. If that also fails,
    /// or the backend is unavailable after retries, the agent falls back to a
    /// capacity-matching draw using `fallback_draw` and the decision is
    /// flagged.
    pub fn decide_via_llm(
        &self,
        bundle: &PromptBundle,
        ctx: RequestContext<'_>,
        fallback_draw: f64,
    ) -> LlmOutcome {
        let started = Instant::now();
        let system = bundle.system_message();
        let mut retries = 0;
        let mut audit = AuditRecord {
            round: ctx.round,
            agent: ctx.agent,
            model: self.config.model_name.clone(),
            prompt_hash: bundle.hash(),
            raw_response: None,
            parse_outcome: String::new(),
            reprompted: false,
            retries: 0,
            latency_ms: 0.0,
            prompt_tokens: None,
            completion_tokens: None,
            fallback: false,
        };
        let mut parsed = None;
        for reprompt in [false, true] {
            let mut user = bundle.user_message();
            if reprompt {
                user.push_str("\n\n");
                user.push_str(REPROMPT_SUFFIX);
                audit.reprompted = true;
            }
            match self.request_with_retry(&system, user, ctx, &mut retries) {
                Ok(reply) => {
                    if let Some(model) = reply.model {
                        audit.model = model;
                    }
                    audit.prompt_tokens = sum_tokens(audit.prompt_tokens, reply.prompt_tokens);
                    audit.completion_tokens =
                        sum_tokens(audit.completion_tokens, reply.completion_tokens);
                    audit.raw_response = Some(reply.content.clone());
                    match parse_response(&reply.content) {
                        Ok(p) => {
                            audit.parse_outcome = if p.confidence_clamped {
                                "clamped"
                            } else {
                                "ok"
                            }
                            .into();
                            parsed = Some(p);
                            break;
                        }
                        Err(e) => audit.parse_outcome = e.to_string(),
                    }
                }
                Err(e) => {
                    audit.parse_outcome = e.to_string();
                    break;
                }
            }
        }
        audit.retries = retries;
        audit.latency_ms = started.elapsed().as_secs_f64() * 1000.0;
        let decision = match parsed {
            Some(p) => AgentDecision::new(p.action, p.confidence).with_reasoning(p.reasoning),
            None => {
                audit.fallback = true;
                let p = ctx.config.capacity_ratio();
                let action = if fallback_draw < p {
                    Action::Go
                } else {
                    Action::Stay
                };
                log::warn!(
                    "round {} agent {}: {}; substituting capacity-matching draw",
                    ctx.round,
                    ctx.agent,
                    audit.parse_outcome
                );
                AgentDecision {
                    fallback: true,
                    ..AgentDecision::new(action, if action.is_go() { p } else { 1.0 - p })
                        .with_reasoning(format!("fallback: {}", audit.parse_outcome))
                }
            }
        };
        LlmOutcome { decision, audit }
    }
}

fn sum_tokens(a: Option<u64>, b: Option<u64>) -> Option<u64> {
    match (a, b) {
        (None, None) => None,
        (a, b) => Some(a.unwrap_or(0) + b.unwrap_or(0)),
    }
}

/// Agent that asks a chat model for every decision.
pub struct LlmPolicy {
    client: LlmClient,
    backend_name: String,
    kind: PersonalityKind,
    params: StrategyParams,
    epsilon: Option<f64>,
    audit: AuditLog,
}

impl LlmPolicy {
    pub fn new(
        client: LlmClient,
        backend_name: impl Into<String>,
        kind: PersonalityKind,
        params: StrategyParams,
        epsilon: Option<f64>,
        audit: AuditLog,
    ) -> Self {
        LlmPolicy {
            client,
            backend_name: backend_name.into(),
            kind,
            params,
            epsilon,
            audit,
        }
    }
}

impl Policy for LlmPolicy {
    fn decide(
        &mut self,
        config: &GameConfig,
        view: &HistoryView,
        rng: &mut AgentRng,
    ) -> Result<AgentDecision, PolicyError> {
        // Drawn every round so fallbacks do not shift later draws.
        let fallback_draw: f64 = rng.gen();
        let bundle = build_prompt(config, self.kind, &self.params, view);
        let ctx = RequestContext {
            round: view.round,
            agent: view.agent,
            attempt: 0,
            personality: self.kind,
            config,
            view,
        };
        let outcome = self.client.decide_via_llm(&bundle, ctx, fallback_draw);
        self.audit
            .lock()
            .map_err(|_| PolicyError::Backend("audit log poisoned".into()))?
            .push(outcome.audit);
        Ok(match self.epsilon {
            Some(e) => epsilon_greedy_wrap(outcome.decision, e, rng),
            None => outcome.decision,
        })
    }

    fn meta(&self) -> PolicyMeta {
        PolicyMeta {
            policy: "llm".into(),
            personality: Some(self.kind),
            epsilon: self.epsilon,
            backend: Some(self.backend_name.clone()),
            ..PolicyMeta::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn view(attendance: &[usize]) -> HistoryView {
        HistoryView {
            round: attendance.len(),
            agent: 1,
            recent_attendance: attendance.to_vec(),
            own_outcomes: attendance
                .iter()
                .map(|&a| (Action::Go, if a <= 1 { 1 } else { -1 }))
                .collect(),
        }
    }

    fn config() -> GameConfig {
        GameConfig::new(3, 1, 30, 17).unwrap()
    }

    #[test]
    fn prompt_states_rules_and_personality() {
        let p = build_prompt(
            &config(),
            PersonalityKind::RiskAverse,
            &StrategyParams::default(),
            &view(&[]),
        );
        assert!(p.system_text.contains("3 players"));
        assert!(p.system_text.contains("capacity is 1"));
        assert!(p.personality_text.contains("prefer to stay home"));
        assert!(p.history_text.contains("No rounds have been played yet"));
        assert!(p.strategy_text.contains("0.5") && p.strategy_text.contains("0.7"));
        let neutral = build_prompt(
            &config(),
            PersonalityKind::Neutral,
            &StrategyParams::default(),
            &view(&[]),
        );
        assert!(neutral.personality_text.is_empty());
        let text = format!("{}{}", p.system_message(), p.user_message()).to_lowercase();
        assert!(!text.contains("llm") && !text.contains("language model"));
    }

    #[test]
    fn prompt_history_is_most_recent_first() {
        let p = build_prompt(
            &config(),
            PersonalityKind::Neutral,
            &StrategyParams::default(),
            &view(&[2, 0, 1]),
        );
        let lines: Vec<&str> = p.history_text.lines().skip(1).collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].contains("Round 3: attendance 2"));
        assert!(lines[2].contains("Round 1: attendance 1"));
        assert!(lines[0].contains("payoff -1"));
    }

    #[test]
    fn prompt_is_deterministic() {
        let v = view(&[1, 2]);
        let a = build_prompt(
            &config(),
            PersonalityKind::Contrarian,
            &StrategyParams::default(),
            &v,
        );
        let b = build_prompt(
            &config(),
            PersonalityKind::Contrarian,
            &StrategyParams::default(),
            &v,
        );
        assert_eq!(a, b);
        assert_eq!(a.hash(), b.hash());
        let c = build_prompt(
            &config(),
            PersonalityKind::Optimist,
            &StrategyParams::default(),
            &v,
        );
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn parse_schema_instance() {
        let r = parse_response(
            r#"{"action":"GO","confidence":0.8,"reasoning":"low recent attendance"}"#,
        )
        .unwrap();
        assert_eq!(r.action, Action::Go);
        assert_eq!(r.confidence, 0.8);
        assert_eq!(r.reasoning, "low recent attendance");
        assert!(!r.confidence_clamped);
    }

    #[test]
    fn parse_clamps_confidence() {
        let r =
            parse_response(r#"{"action":"stay","confidence":1.3,"reasoning":"crowded"}"#).unwrap();
        assert_eq!(r.action, Action::Stay);
        assert_eq!(r.confidence, 1.0);
        assert!(r.confidence_clamped);
    }

    #[test]
    fn parse_finds_object_inside_prose() {
        let raw = "Sure! Here is my answer:\n```json\n{\"action\": 1, \"confidence\": \"0.6\", \"reasoning\": \"ok\"}\n```";
        let r = parse_response(raw).unwrap();
        assert_eq!(r.action, Action::Go);
        assert_eq!(r.confidence, 0.6);
        assert_eq!(r.raw_text, raw);
        let r =
            parse_response("{not json} then {\"action\":0,\"confidence\":0,\"reasoning\":\"\"}")
                .unwrap();
        assert_eq!(r.action, Action::Stay);
    }

    #[test]
    fn parse_errors() {
        assert_eq!(
            parse_response("I think I'll go."),
            Err(ParseError::MalformedResponse)
        );
        assert_eq!(
            parse_response(r#"{"confidence":0.5,"reasoning":"x"}"#),
            Err(ParseError::MissingField("action"))
        );
        assert_eq!(
            parse_response(r#"{"action":"GO","reasoning":"x"}"#),
            Err(ParseError::MissingField("confidence"))
        );
        assert_eq!(
            parse_response(r#"{"action":"GO","confidence":0.2}"#),
            Err(ParseError::MissingField("reasoning"))
        );
        assert!(matches!(
            parse_response(r#"{"action":"maybe","confidence":0.2,"reasoning":""}"#),
            Err(ParseError::InvalidField {
                field: "action",
                ..
            })
        ));
    }

    proptest! {
        #[test]
        fn parse_inverts_serialize(go in any::<bool>(), confidence in 0.0f64..=1.0, reasoning in ".*") {
            let action = if go { Action::Go } else { Action::Stay };
            let raw = serialize_response(action, confidence, &reasoning);
            let parsed = parse_response(&raw).unwrap();
            prop_assert_eq!(parsed.action, action);
            prop_assert_eq!(parsed.confidence, confidence);
            prop_assert_eq!(parsed.reasoning, reasoning);
            prop_assert!(!parsed.confidence_clamped);
        }
    }

    fn ask(mode: MockMode, max_retries: u32, draw: f64) -> LlmOutcome {
        let backend_config = LlmBackendConfig {
            max_retries,
            ..LlmBackendConfig::mock(mode)
        };
        let client = LlmClient::new(backend_config.connect().unwrap(), backend_config);
        let cfg = config();
        let v = view(&[1, 2]);
        let bundle = build_prompt(
            &cfg,
            PersonalityKind::Neutral,
            &StrategyParams::default(),
            &v,
        );
        let ctx = RequestContext {
            round: v.round,
            agent: v.agent,
            attempt: 0,
            personality: PersonalityKind::Neutral,
            config: &cfg,
            view: &v,
        };
        client.decide_via_llm(&bundle, ctx, draw)
    }

    #[test]
    fn mock_fixed_reply() {
        let out = ask(
            MockMode::Fixed {
                action: "GO".into(),
            },
            3,
            0.99,
        );
        assert_eq!(out.decision.action, Action::Go);
        assert!(!out.decision.fallback);
        assert_eq!(out.audit.parse_outcome, "ok");
        assert_eq!(out.audit.retries, 0);
        assert!(!out.audit.reprompted);
    }

    #[test]
    fn malformed_twice_falls_back_to_capacity_matching() {
        // draw 0.2 < 1/3 gives GO, 0.5 gives STAY
        let out = ask(MockMode::Malformed, 3, 0.2);
        assert!(out.decision.fallback);
        assert_eq!(out.decision.action, Action::Go);
        assert!(out.audit.fallback && out.audit.reprompted);
        assert_eq!(out.audit.raw_response.as_deref(), Some("I think I'll go."));
        let out = ask(MockMode::Malformed, 3, 0.5);
        assert_eq!(out.decision.action, Action::Stay);
    }

    #[test]
    fn reprompt_recovers_from_one_bad_reply() {
        // first reply unparseable, reprompt answered properly
        struct TwoStage(Mutex<u32>);
        impl ChatBackend for TwoStage {
            fn complete(&self, _: &ChatRequest<'_>) -> Result<ChatReply, BackendError> {
                let mut n = self.0.lock().unwrap();
                *n += 1;
                let content = if *n == 1 {
                    "hmm".to_string()
                } else {
                    serialize_response(Action::Stay, 0.4, "retry")
                };
                Ok(ChatReply {
                    content,
                    ..ChatReply::default()
                })
            }
        }
        let cfg = config();
        let v = view(&[]);
        let client = LlmClient::new(
            Arc::new(TwoStage(Mutex::new(0))),
            LlmBackendConfig::mock(MockMode::Malformed),
        );
        let bundle = build_prompt(
            &cfg,
            PersonalityKind::Neutral,
            &StrategyParams::default(),
            &v,
        );
        let ctx = RequestContext {
            round: 0,
            agent: 0,
            attempt: 0,
            personality: PersonalityKind::Neutral,
            config: &cfg,
            view: &v,
        };
        let out = client.decide_via_llm(&bundle, ctx, 0.0);
        assert!(!out.decision.fallback);
        assert_eq!(out.decision.action, Action::Stay);
        assert!(out.audit.reprompted);
    }

    #[test]
    fn timeout_then_success_counts_one_retry() {
        let mode = MockMode::Flaky {
            failures: 1,
            then: Box::new(MockMode::Fixed {
                action: "STAY".into(),
            }),
        };
        let out = ask(mode, 3, 0.0);
        assert_eq!(out.decision.action, Action::Stay);
        assert!(!out.decision.fallback);
        assert_eq!(out.audit.retries, 1);
    }

    #[test]
    fn exhausted_retries_fall_back() {
        let mode = MockMode::Flaky {
            failures: 10,
            then: Box::new(MockMode::Fixed {
                action: "STAY".into(),
            }),
        };
        let out = ask(mode, 2, 0.0);
        assert!(out.decision.fallback);
        assert_eq!(out.decision.action, Action::Go);
        assert_eq!(out.audit.retries, 2);
        assert!(!out.audit.reprompted);
    }

    #[test]
    fn echo_proxy_matches_personality_rule() {
        // history (1, 2) gives a weighted estimate above capacity 1, so Neutral stays
        let out = ask(MockMode::EchoProxy, 0, 0.0);
        assert_eq!(out.decision.action, Action::Stay);
        assert!(!out.decision.fallback);
    }

    #[test]
    fn mock_mode_parses_from_toml() {
        let cfg: LlmBackendConfig = toml::from_str(
            "model_name = \"m\"\n[mock]\nmode = \"flaky\"\nfailures = 2\n[mock.then]\nmode = \"fixed\"\naction = \"GO\"\n",
        )
        .unwrap();
        assert!(matches!(
            cfg.mock,
            Some(MockMode::Flaky { failures: 2, .. })
        ));
        assert!(toml::from_str::<LlmBackendConfig>("bogus = 1").is_err());
    }
}
