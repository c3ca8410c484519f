//! Deterministic simulator for stream-triggered one-sided communication on
//! GPU clusters, plus the Faces nearest-neighbor benchmark built on it.

pub mod cost;
pub mod error;
pub mod experiment;
pub mod faces;
pub mod gpu;
pub mod host;
pub mod nic;
pub mod p2p;
pub mod rma;
pub mod sim;
pub mod simcore;

pub use cost::CostModel;
pub use error::SimError;
pub use sim::{SimConfig, SimOutcome, SimReport, Simulator};
