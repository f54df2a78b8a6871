//! Dual-gate resin infusion laboratory.
//!
//! A randomized porous-media fill simulator, a partially observable gate
//! control environment built on top of it, and a small PPO trainer with
//! two reward formulations for synchronising opposing flow fronts.
//!
//! Module map:
//!
//! - [`field_gen`]: correlated log-normal permeability fields with a
//!   guaranteed top/bottom asymmetry and straight racetrack channels.
//! - [`flow_sim`]: quasi-static Darcy pressure solve on the saturated
//!   region plus an explicit control-volume fill advance.
//! - [`env`]: sensors, gate actions, termination and rewards.
//! - [`nn`]: dense tanh networks with hand-written backprop and Adam.
//! - [`ppo`]: GAE, the clipped surrogate and the minibatch update.
//! - [`trainer`]: training, evaluation, rollouts, calibration and logs.

pub mod checkpoint;
pub mod config;
pub mod env;
pub mod error;
pub mod field_gen;
pub mod flow_sim;
pub mod nn;
pub mod ppo;
pub mod render;
pub mod seeding;
pub mod trainer;

pub use error::{Error, Result};
