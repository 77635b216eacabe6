//! Shepherding of non-cohesive targets: stochastic simulation, a model-based
//! baseline, and a two-layer learned controller (continuous driving plus
//! discrete target selection) trained with PPO and parameter-shared MAPPO.

pub mod env;
pub mod harness;
pub mod heuristic;
pub mod hierarchy;
pub mod nn;
pub mod rl;
pub mod sim;
pub mod stats;

pub use env::{Controller, EpisodeConfig, EpisodeRecord, RewardGains};
pub use sim::{RngStream, SimParams, Vec2, WorldState};
