//! Message types and the two data/control planes.
//!
//! The data plane emulates one-sided RDMA writes: a [`DataMessage`] names the
//! destination range and the payload lands directly in the peer's registered
//! region, with a [`CompletionEvent`] queued at the receiver. Placement is
//! fixed by the phase:
//!
//! * [`Phase::ReduceScatter`] — payload lands in the receive slot indexed by
//!   the **sender's rank**;
//! * [`Phase::Broadcast`] — payload lands in the send buffer at
//!   **`block_index`**.
//!
//! The control plane carries orchestration messages only. A
//! [`ControlMessage`] has no element-array field by construction, so gradient
//! data cannot traverse it. Two interchangeable transports implement both
//! planes: a deterministic in-memory loopback ([`loopback`]) and a TCP socket
//! transport ([`socket`]) that frames messages with the 32-byte header defined
//! in [`wire`].

use std::collections::BTreeMap;
use std::time::Duration;

use thiserror::Error;

use crate::buffers::{RecvPlacement, RegisteredRegion};

pub mod loopback;
pub mod socket;
pub mod wire;

/// The two data-plane phases of an iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    ReduceScatter,
    Broadcast,
}

impl Phase {
    pub const fn as_u8(self) -> u8 {
        match self {
            Phase::ReduceScatter => 0,
            Phase::Broadcast => 1,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Phase::ReduceScatter),
            1 => Some(Phase::Broadcast),
            _ => None,
        }
    }
}

/// A one-sided write of one gradient block.
///
/// `(iteration, phase, sender, block_index)` uniquely identifies a message
/// within a run; collectives that subdivide an iteration fold the extra bit
/// into `iteration`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataMessage {
    pub iteration: u64,
    pub phase: Phase,
    pub sender: u32,
    pub block_index: u32,
    pub payload: Vec<u8>,
}

/// Addressable endpoints on the control plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeId {
    Worker(u32),
    JobServer,
}

impl NodeId {
    pub const fn as_u32(self) -> u32 {
        match self {
            NodeId::Worker(r) => r,
            NodeId::JobServer => u32::MAX,
        }
    }

    pub fn from_u32(v: u32) -> Self {
        if v == u32::MAX {
            NodeId::JobServer
        } else {
            NodeId::Worker(v)
        }
    }
}

/// Orchestration message kinds exchanged with the job server.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ControlKind {
    JobSubmit,
    StageData,
    IterStart,
    WorkerReady,
    IterDone,
    Heartbeat,
    CheckpointDone,
    Shutdown,
}

impl ControlKind {
    pub const ALL: [ControlKind; 8] = [
        ControlKind::JobSubmit,
        ControlKind::StageData,
        ControlKind::IterStart,
        ControlKind::WorkerReady,
        ControlKind::IterDone,
        ControlKind::Heartbeat,
        ControlKind::CheckpointDone,
        ControlKind::Shutdown,
    ];

    pub const fn token(self) -> &'static str {
        match self {
            ControlKind::JobSubmit => "job_submit",
            ControlKind::StageData => "stage_data",
            ControlKind::IterStart => "iter_start",
            ControlKind::WorkerReady => "worker_ready",
            ControlKind::IterDone => "iter_done",
            ControlKind::Heartbeat => "heartbeat",
            ControlKind::CheckpointDone => "checkpoint_done",
            ControlKind::Shutdown => "shutdown",
        }
    }

    pub fn from_token(t: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.token() == t)
    }
}

/// A control-plane message: a kind plus string key/value pairs.
///
/// The body is a string map on purpose — there is no field an element array
/// could ride in, which is what keeps the job server off the data path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ControlMessage {
    pub kind: ControlKind,
    pub sender: NodeId,
    pub iteration: u64,
    pub body: BTreeMap<String, String>,
}

impl ControlMessage {
    pub fn new(kind: ControlKind, sender: NodeId, iteration: u64) -> Self {
        Self {
            kind,
            sender,
            iteration,
            body: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.body.insert(key.to_string(), value.to_string());
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.body.get(key).map(String::as_str)
    }

    pub fn get_u64(&self, key: &str) -> Option<u64> {
        self.get(key)?.parse().ok()
    }

    pub fn get_f64(&self, key: &str) -> Option<f64> {
        self.get(key)?.parse().ok()
    }
}

/// Receiver-side record that a data message has been delivered into the
/// region. `timestamp` is in transport-defined delivery units (loopback: the
/// phase tick `2*iteration + phase`; socket: a per-endpoint arrival counter).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompletionEvent {
    pub iteration: u64,
    pub phase: Phase,
    pub sender: u32,
    pub block_index: u32,
    pub timestamp: u64,
}

/// Outcome of a `send_block` call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SendReceipt {
    /// Payload bytes that went on the wire (0 for a suppressed send).
    pub wire_bytes: u64,
    /// True when the block had zero length and no message was emitted.
    pub suppressed: bool,
}

/// Byte and message counters kept by every endpoint.
///
/// `data_bytes_*` count payload bytes only; framing overhead is tracked
/// separately in `header_bytes_*` (always zero on loopback), so payload
/// conservation can be asserted across both transports.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TransportStats {
    pub data_bytes_sent: u64,
    pub data_bytes_received: u64,
    pub data_msgs_sent: u64,
    pub data_msgs_received: u64,
    pub suppressed_sends: u64,
    pub header_bytes_sent: u64,
    pub header_bytes_received: u64,
    pub control_msgs_sent: u64,
    pub control_msgs_received: u64,
    pub control_bytes_sent: u64,
    pub control_bytes_received: u64,
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("self-delivery is a local copy, not a transport call (rank {0})")]
    SelfSend(u32),
    #[error("unknown peer {0}")]
    UnknownPeer(u32),
    #[error("payload size mismatch from rank {sender} block {block_index}: expected {expected} bytes, got {got}")]
    PayloadSizeMismatch {
        sender: u32,
        block_index: u32,
        expected: usize,
        got: usize,
    },
    #[error("connection to peer {peer} lost: {detail}")]
    ConnectionLost { peer: u32, detail: String },
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("transport closed")]
    Closed,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The one-sided data plane. Endpoints move between threads but are not
/// shared concurrently.
pub trait DataPlane: Send {
    fn rank(&self) -> u32;

    fn cluster_size(&self) -> usize;

    /// Write one block into `peer`'s region. Zero-length payloads are
    /// suppressed: no bytes move and no completion fires at the peer.
    fn send_block(&mut self, peer: u32, msg: DataMessage) -> Result<SendReceipt, TransportError>;

    /// Apply every delivery queued since the last poll to `region` and return
    /// the completions ordered by `(timestamp, sender, block_index)`. Blocks
    /// up to `timeout` when the queue is empty (`None` polls without
    /// waiting).
    fn poll_completions(
        &mut self,
        region: &mut RegisteredRegion,
        timeout: Option<Duration>,
    ) -> Result<Vec<CompletionEvent>, TransportError>;

    fn stats(&self) -> TransportStats;
}

/// The control plane: reliable, FIFO per sender/receiver pair.
pub trait ControlPlane: Send {
    fn node(&self) -> NodeId;

    fn send_control(&mut self, to: NodeId, msg: ControlMessage) -> Result<(), TransportError>;

    /// Next queued control message, or `None` on timeout.
    fn recv_control(
        &mut self,
        timeout: Option<Duration>,
    ) -> Result<Option<ControlMessage>, TransportError>;

    fn stats(&self) -> TransportStats;
}

/// Payload bytes a message must carry, per the placement rules.
pub(crate) fn expected_payload_bytes(
    region: &RegisteredRegion,
    msg: &DataMessage,
) -> Result<usize, TransportError> {
    let block = region
        .block(msg.block_index)
        .ok_or(TransportError::Malformed(format!(
            "block index {} out of range",
            msg.block_index
        )))?;
    Ok(block.len * region.width().bytes())
}

/// Land a delivered message in the region per the placement rules. The
/// region is untouched when validation fails.
pub(crate) fn apply_to_region(
    region: &mut RegisteredRegion,
    msg: &DataMessage,
) -> Result<(), TransportError> {
    let expected = expected_payload_bytes(region, msg)?;
    if msg.payload.len() != expected {
        return Err(TransportError::PayloadSizeMismatch {
            sender: msg.sender,
            block_index: msg.block_index,
            expected,
            got: msg.payload.len(),
        });
    }
    let width = region.width();
    let len = expected / width.bytes().max(1);
    match msg.phase {
        Phase::ReduceScatter => {
            let slot_index = match region.recv_placement() {
                RecvPlacement::BySender => msg.sender as usize,
                RecvPlacement::ByBlockIndex => msg.block_index as usize,
            };
            let slot = region
                .recv_slot_mut(slot_index, len)
                .map_err(|e| TransportError::Malformed(e.to_string()))?;
            wire::decode_elements(&msg.payload, width, slot)?;
        }
        Phase::Broadcast => {
            let dst = region
                .sb_block_mut(msg.block_index)
                .map_err(|e| TransportError::Malformed(e.to_string()))?;
            wire::decode_elements(&msg.payload, width, dst)?;
        }
    }
    Ok(())
}
