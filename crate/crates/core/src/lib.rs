//! Distributed ADMM for general consensus problems, in plaintext and under a
//! leveled additively homomorphic LWE scheme with multi-instance key
//! switching, plus a robot-formation case study.
//!
//! The most used types are re-exported at the crate root.

pub mod admm;
pub mod channel;
pub mod experiment;
pub mod fixed_point;
pub mod formation;
pub mod graph;
pub mod he;
pub mod linalg;
pub mod problem;
pub mod protocol;

pub use admm::{run_plain_admm, AdmmParams, AdmmTrace, Schedule};
pub use experiment::{run_experiment, verify, ExperimentConfig, ExperimentResult, Mode};
pub use fixed_point::{FpCodec, FpValue};
pub use formation::{scenario, FormationProblem, Scenario, ScenarioKind};
pub use graph::{CommGraph, IndexLayout};
pub use he::{Ciphertext, HeScheme, SchemePreset};
pub use linalg::{Matrix, Vector};
pub use problem::{centralized_solve, AgentCost, ConsensusProblem, StructuredParam, StructuredVar};
pub use protocol::{EncryptedSystem, ProtocolConfig};
