//! GPUDirect-RDMA-aware all-reduce and the training architecture around it.
//!
//! The crate models a cluster of training workers whose NICs write gradients
//! directly into each other's registered GPU memory, with no receiver-side
//! copies. Around that core it provides:
//!
//! * [`buffers`] — gradient block partitioning and the registered
//!   send/receive memory region;
//! * [`transport`] — the one-sided data plane and the control plane, with an
//!   in-process loopback fabric and a TCP implementation sharing one wire
//!   format;
//! * [`collectives`] — the direct reduce-scatter/broadcast all-reduce plus
//!   ring and parameter-server baselines for comparison;
//! * [`sim`] — an α–β cost model with a message-level engine, closed-form
//!   cross-checks, and scaling tables.
//!
//! Everything is deterministic by construction: aggregation orders are
//! fixed, loopback delivery is logically timestamped, and random inputs are
//! always seeded.

pub mod buffers;
pub mod collectives;
pub mod harness;
pub mod jobserver;
pub mod sim;
pub mod transport;
