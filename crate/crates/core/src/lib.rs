//! Power-constrained coverage path planning with recharge on grid maps.
//!
//! A UAV must see every target cell and end the episode landed. Its battery
//! drains one unit per step and refills only while landed on a landing cell.
//! The crate provides the simulator, action masks that keep the agent
//! provably able to return home, a greedy baseline planner and a masked PPO
//! trainer.

pub mod config;
pub mod coverage;
pub mod dynamics;
pub mod env;
pub mod error;
pub mod eval;
pub mod grid;
pub mod heuristic;
pub mod observation;
pub mod par;
pub mod render;
pub mod reward;
pub mod safety;
pub mod trace;
pub mod trainer;

pub use coverage::{FovConfig, FovTable, GeneratorConfig, LosBlocking, Objective, Scenario, TargetMap};
pub use dynamics::{Action, BatteryModel, CrashReason, UavState};
pub use env::{Env, EnvConfig, ScenarioSource, StepResult, World};
pub use error::{Error, ParseError, Result};
pub use grid::{Cell, DistanceField, GridMap};
pub use safety::{mask, ActionMask, MaskLevel};
