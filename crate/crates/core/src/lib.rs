//! Collision-model toolkit for steering an open, coherently driven qubit by
//! measuring its environment.
//!
//! A system qubit repeatedly collides with fresh two-level subenvironments
//! (drive + excitation exchange per collision). Measuring each subenvironment
//! right after its collision unravels the reduced dynamics into discrete
//! trajectories; the set of trajectory endpoints — the endpoint ensemble —
//! depends on the measurement scenario while the averaged dynamics never
//! does. The crate builds those scenarios (fixed-direction, adaptive
//! dichotomic, and a nonlocal control-qubit construction), evaluates a
//! three-term steering inequality on the resulting ensembles, locates the
//! critical bath polarization where steerability is lost, and maps the
//! system–subenvironment entanglement boundary.

pub mod error;
pub mod model;
pub mod protocol;
pub mod qla;
pub mod rng;
pub mod scenarios;
pub mod steering;

pub use error::{Error, Result};
pub use model::{BlochVec, ModelParams, ThetaRep};
pub use qla::{C64, QOperator, QState, SchmidtDecomposition};
