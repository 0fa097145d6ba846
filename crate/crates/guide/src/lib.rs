//! The book under `book/` rendered as documentation, so `cargo test --doc`
//! compiles and runs every code snippet in it. mdbook itself can't execute
//! examples against a real dependency graph; including each chapter as a
//! module here gives every fenced block genuine doctest semantics, and the
//! failing module name points back at the chapter.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/partitioning.md")]
pub mod partitioning {}

#[doc = include_str!("../../../book/src/transport.md")]
pub mod transport {}

#[doc = include_str!("../../../book/src/direct-exchange.md")]
pub mod direct_exchange {}

#[doc = include_str!("../../../book/src/baselines.md")]
pub mod baselines {}

#[doc = include_str!("../../../book/src/cost-model.md")]
pub mod cost_model {}

#[doc = include_str!("../../../book/src/job-server.md")]
pub mod job_server {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
