//! Solver library for one-sided optimal stopping problems with linear
//! running costs.
//!
//! The stopping problem maximizes E[γ(Y_τ) − Σ h(Y_i)] over stopping times
//! for a real-valued Markov chain, random walk, or Lévy process with
//! non-decreasing payoff γ and non-negative running cost h. The central
//! object is the threshold function f = (φ − γ)/E(τ⁺) built from first
//! strict-ascent (ladder) statistics; its unique root is the optimal
//! threshold when the certified monotonicity hypotheses hold.
//!
//! Modules:
//! - [`model`]: problem-definition types, samplers, feasibility diagnostics.
//! - [`ladder`]: ladder statistics E_y(τ⁺), φ(y), accumulated cost/weight,
//!   and the descending-ladder cost transform ĥ.
//! - [`threshold`]: f evaluation, hypothesis certification, CI-aware root
//!   finding, and threshold-rule pricing via the ladder-sum representation.
//! - [`oracle`]: independent ground truth — dynamic-programming value
//!   iteration, Brownian scale/Green closed forms, identity checkers.
//! - [`discretize`]: dyadic time and spatial discretizations of a Lévy
//!   problem with convergence diagnostics.

pub mod discretize;
pub mod error;
pub mod ladder;
pub mod levy_sim;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod quad;
pub mod rng;
pub mod stats;
pub mod threshold;

pub use error::{Error, Result};
