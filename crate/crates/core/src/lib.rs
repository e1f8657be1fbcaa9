//! Decentralized proximal primal-dual optimization with two-tier privacy.
//!
//! Nodes of a connected network cooperatively minimize `Σ_i f_i(x)` while
//! exchanging only masked, Laplace-perturbed messages. The crate provides the
//! iteration itself ([`algorithm`]), the communication graph ([`graph`]),
//! objective oracles ([`problems`]), noise generation and privacy accounting
//! ([`privacy`]), analysis tools ([`diagnostics`]) and a config-driven
//! experiment runner ([`harness`]).

pub mod algorithm;
pub mod diagnostics;
pub mod graph;
pub mod harness;
pub mod privacy;
pub mod problems;
pub mod seeds;
