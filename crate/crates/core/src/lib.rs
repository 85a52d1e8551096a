//! Hierarchical control stack for cooperative on-ramp merging.
//!
//! * [`scenario`]: vehicle types, road geometry, the virtual Z-axis and
//!   scenario documents.
//! * [`sequencer`]: merging-sequence assignment (branch-and-bound and FIFO).
//! * [`qp`]: dense convex QP solver used by both MPC layers.
//! * [`longitudinal`]: distributed longitudinal MPC and the serial platoon
//!   update.
//! * [`stability`]: explicit unconstrained MPC gains and string-stability
//!   analysis.
//! * [`reachability`]: polytopes, backward reachable sets and feasible-set
//!   comparison of terminal constraints.
//! * [`lateral`]: kinematic bicycle model and lateral tracking MPC.
//! * [`sim`]: closed-loop simulation, metrics and logs.

pub mod error;
pub mod lateral;
pub mod longitudinal;
pub mod qp;
pub mod reachability;
pub mod scenario;
pub mod sequencer;
pub mod sim;
pub mod stability;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    mod overview {}
    #[doc = include_str!("../../../book/src/scenarios.md")]
    mod scenarios {}
    #[doc = include_str!("../../../book/src/sequencing.md")]
    mod sequencing {}
    #[doc = include_str!("../../../book/src/longitudinal.md")]
    mod longitudinal {}
    #[doc = include_str!("../../../book/src/stability.md")]
    mod stability {}
    #[doc = include_str!("../../../book/src/feasible_sets.md")]
    mod feasible_sets {}
    #[doc = include_str!("../../../book/src/lateral.md")]
    mod lateral {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
}
