//! Capacity-constrained El Farol congestion game.
//!
//! `N` agents repeatedly choose GO or STAY against a capacity `C`. The crate
//! provides the round engine, stochastic and heuristic policies, LLM-backed
//! agents, exact binomial oracles, run metrics, a behavioral clustering
//! pipeline, and an experiment harness.

pub mod analytics;
pub mod clustering;
pub mod game;
pub mod harness;
pub mod llm;
pub mod policy;
pub mod rng;

pub use game::{
    payoff, play, run_game, winning_action, Action, AgentDecision, GameConfig, GameError,
    GameState, HistoryView, RoundRecord, RunLog,
};
pub use policy::{PersonalityKind, Policy, PolicySpec, StrategyParams};
