//! Curriculum controller: epoch -> phase, phase -> constraint set and
//! phase-specific hyperparameter overlay.

use crate::model::ConstraintSet;
use crate::ppo::PPOConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PhaseId {
    A,
    B,
    C,
}

impl std::fmt::Display for PhaseId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PhaseId::A => write!(f, "A"),
            PhaseId::B => write!(f, "B"),
            PhaseId::C => write!(f, "C"),
        }
    }
}

impl PhaseId {
    pub fn parse(s: &str) -> Option<PhaseId> {
        match s {
            "A" | "a" => Some(PhaseId::A),
            "B" | "b" => Some(PhaseId::B),
            "C" | "c" => Some(PhaseId::C),
            _ => None,
        }
    }
}

/// Epoch boundaries between phases; defaults follow the three-phase
/// schedule with A for k < 10, B for 10 <= k < 20 and C from 20 on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub boundary_ab: usize,
    pub boundary_bc: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule { boundary_ab: 10, boundary_bc: 20 }
    }
}

impl Schedule {
    pub fn new(boundary_ab: usize, boundary_bc: usize) -> Schedule {
        assert!(
            0 < boundary_ab && boundary_ab < boundary_bc,
            "schedule boundaries must satisfy 0 < ab < bc"
        );
        Schedule { boundary_ab, boundary_bc }
    }
}

pub fn phase_for_epoch(epoch: usize, schedule: Schedule) -> PhaseId {
    if epoch < schedule.boundary_ab {
        PhaseId::A
    } else if epoch < schedule.boundary_bc {
        PhaseId::B
    } else {
        PhaseId::C
    }
}

pub fn constraint_set(phase: PhaseId) -> ConstraintSet {
    match phase {
        PhaseId::A => ConstraintSet::PHASE_A,
        PhaseId::B => ConstraintSet::PHASE_B,
        PhaseId::C => ConstraintSet::PHASE_C,
    }
}

/// Entropy coefficients per phase: exploration while the problem is
/// loose, lower when constraints are dense.
pub fn phase_entropy_coef(phase: PhaseId) -> f64 {
    match phase {
        PhaseId::A => 0.02,
        PhaseId::B => 0.01,
        PhaseId::C => 0.005,
    }
}

/// Applies the phase overlay to a base config. Explicit overrides in the
/// base survive; the learning-rate warm restart itself is realised by
/// `ppo::lr_schedule`, which restarts the cosine at each phase boundary.
pub fn hyperparams_for_phase(phase: PhaseId, base: &PPOConfig) -> PPOConfig {
    let mut cfg = base.clone();
    cfg.entropy_coef = base.entropy_override.unwrap_or_else(|| phase_entropy_coef(phase));
    cfg
}
