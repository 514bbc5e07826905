//! Synthetic demonstrations and a kinematic evaluation harness.

pub mod scenario;
pub mod world;

pub use scenario::{generate, pick_and_place, pick_and_place_varied, ScenarioSpec};
pub use world::{evaluate, EvalConfig, EvalSummary, Policy, TaskPolicy, World};
