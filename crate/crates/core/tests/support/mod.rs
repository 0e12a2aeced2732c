//! Checks shared by the regular test targets and the acceptance harness.
#![allow(dead_code)]

pub mod grad;
pub mod identities;
pub mod metrics;
pub mod runs;
