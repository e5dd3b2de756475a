//! Oracles shared by the core integration tests and the acceptance suite.
#![allow(dead_code)]

pub mod gradcheck;
pub mod pairing_oracle;
