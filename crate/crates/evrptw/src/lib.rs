//! EVRPTW workbench: a curriculum-trained neural constructor for the
//! electric vehicle routing problem with time windows, together with the
//! exact and heuristic baselines needed to benchmark it.
//!
//! The crate is organised around a phase-gated environment: a
//! [`model::ConstraintSet`] selects which feasibility rules (capacity,
//! battery, time windows) shape action masks, transition dynamics and
//! solution validation. The [`curriculum`] module maps training epochs to
//! phases, [`policy`] holds the heterogeneous attention policy, [`ppo`]
//! the trainer, [`baselines`] an exact branch-and-bound solver and a VNS
//! heuristic, and [`bench`] the evaluation harness.

pub mod baselines;
pub mod bench;
pub mod curriculum;
pub mod env;
pub mod instancegen;
pub mod model;
pub mod nn;
pub mod policy;
pub mod ppo;
