//! Emulation, discrepancy, history matching, chained uncertainty propagation
//! and expected-utility decision support for expensive black-box simulators.
//!
//! The pipeline this crate supports, end to end:
//!
//! 1. describe a simulator's input space and generate a space-filling design
//!    ([`space`], [`design`]),
//! 2. run the simulator over the design ([`simulator`]),
//! 3. fit a fast statistical emulator (global polynomial trend plus a local
//!    correlated-residual process) to the runs ([`emulator`]),
//! 4. quantify structural discrepancy between the model and the real system,
//!    both by perturbation experiments on the simulator and by an expert-set
//!    additive error ([`discrepancy`]),
//! 5. screen the input space against observations by implausibility and
//!    forecast over the retained region ([`calibration`]),
//! 6. chain several emulated models into a DAG and push samples through it
//!    ([`chain`]),
//! 7. rank and prune decisions by expected utility, identify Pareto
//!    boundaries, compare risk profiles, and solve sequential decision trees
//!    ([`decision`]),
//! 8. declare how every recognised source of uncertainty was treated, and
//!    keep a tamper-evident audit chain of every step ([`ledger`], [`report`]).
//!
//! Reproducibility convention: bulk sampling operations take a `seed: u64`
//! and derive one counter-based substream per sample via [`seed::substream`],
//! so results are independent of thread scheduling. Pointwise draws take a
//! caller-owned RNG.

pub mod calibration;
pub mod chain;
pub mod decision;
pub mod design;
pub mod discrepancy;
pub mod emulator;
pub mod error;
pub mod ledger;
pub mod report;
pub mod seed;
pub mod simulator;
pub mod space;

pub use error::{Error, Result};
