//! Weighted backward shifts on `l2(N; l2)` built to be epsilon-hypercyclic
//! for a prescribed epsilon, and the tools to check how sharp that is.

pub mod cli;
pub mod constructor;
pub mod nets;
pub mod orbit;
pub mod schedule;
pub mod space;
pub mod verify;
