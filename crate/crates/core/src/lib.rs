//! Voted popularity lists of DNS records.

pub mod cli;
pub mod config;
pub mod delta;
pub mod exposure;
pub mod mixnet;
pub mod model;
pub mod poplist;
pub mod sim;
pub mod voting;
pub mod wire;
