//! Setchain: a Byzantine-tolerant grow-only set whose elements are periodically
//! stamped into epochs, simulated over a seeded discrete-event network.

pub mod adversary;
pub mod bench;
pub mod brb;
pub mod byz_model;
pub mod client;
pub mod cluster;
pub mod incentives;
pub mod msg;
pub mod sbc;
pub mod server;
pub mod simnet;
pub mod suite;
pub mod types;
