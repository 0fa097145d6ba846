//! A small training harness wired to the collectives: synthetic problems
//! with known optima, the momentum-SGD update rule the cluster replicates
//! on every rank, scaling/efficiency metrics, and the worker/driver loops
//! that tie problems, optimizer, job server, and data plane together.

pub mod metrics;
pub mod problem;
pub mod sgd;
pub mod train;
