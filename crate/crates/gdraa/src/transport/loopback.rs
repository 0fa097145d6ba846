//! Deterministic in-memory transport.
//!
//! All endpoints share a [`LoopbackFabric`]. Sends copy the payload into the
//! peer's mailbox immediately; deliveries are applied when the receiver
//! polls. Delivery timestamps are logical ticks derived from the message
//! itself (`2 * iteration + phase`), never from the wall clock, so completion
//! order is a pure function of the traffic: two runs over the same inputs
//! observe identical event logs regardless of thread scheduling.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use crate::buffers::{BlockRange, ElementWidth, RegisteredRegion};
use crate::transport::{
    apply_to_region, wire, CompletionEvent, ControlMessage, ControlPlane, DataMessage, DataPlane,
    NodeId, SendReceipt, TransportError, TransportStats,
};

struct Mailbox<T> {
    q: Mutex<VecDeque<T>>,
    cv: Condvar,
}

impl<T> Mailbox<T> {
    fn new() -> Self {
        Self {
            q: Mutex::new(VecDeque::new()),
            cv: Condvar::new(),
        }
    }

    fn push(&self, item: T) {
        self.q.lock().unwrap().push_back(item);
        self.cv.notify_one();
    }

    /// Drain everything queued, waiting up to `timeout` for the first item.
    fn drain(&self, timeout: Option<Duration>) -> Vec<T> {
        let mut q = self.q.lock().unwrap();
        if q.is_empty() {
            if let Some(t) = timeout {
                let deadline = Instant::now() + t;
                while q.is_empty() {
                    let left = deadline.saturating_duration_since(Instant::now());
                    if left.is_zero() {
                        break;
                    }
                    let (guard, _) = self.cv.wait_timeout(q, left).unwrap();
                    q = guard;
                }
            }
        }
        q.drain(..).collect()
    }
}

struct Inner {
    workers: usize,
    data: Vec<Mailbox<DataMessage>>,
    /// Control mailboxes: one per worker plus the job server at index `workers`.
    control: Vec<Mailbox<(ControlMessage, usize)>>,
    /// Payload bytes enqueued toward each node's data mailbox (job server at
    /// index `workers` — unaddressable by `send_block`, so it stays 0; the
    /// counter exists so the invariant is asserted against a real number).
    data_bytes_in: Vec<AtomicU64>,
}

/// Shared in-memory fabric connecting data endpoints `0..workers` and the
/// control nodes (workers plus the job server).
#[derive(Clone)]
pub struct LoopbackFabric {
    inner: Arc<Inner>,
}

impl LoopbackFabric {
    pub fn new(workers: usize) -> Self {
        let inner = Inner {
            workers,
            data: (0..workers).map(|_| Mailbox::new()).collect(),
            control: (0..=workers).map(|_| Mailbox::new()).collect(),
            data_bytes_in: (0..=workers).map(|_| AtomicU64::new(0)).collect(),
        };
        Self {
            inner: Arc::new(inner),
        }
    }

    pub fn workers(&self) -> usize {
        self.inner.workers
    }

    /// Data endpoint for `rank`. `blocks` is the block layout messages are
    /// validated against on the sending side.
    pub fn data_endpoint(
        &self,
        rank: u32,
        blocks: Vec<BlockRange>,
        width: ElementWidth,
    ) -> LoopbackData {
        assert!(
            (rank as usize) < self.inner.workers,
            "rank {rank} out of range for a {}-endpoint fabric",
            self.inner.workers
        );
        LoopbackData {
            rank,
            inner: Arc::clone(&self.inner),
            blocks,
            width,
            stats: TransportStats::default(),
        }
    }

    pub fn control_endpoint(&self, node: NodeId) -> LoopbackControl {
        let idx = self.control_index(node);
        assert!(idx < self.inner.control.len(), "unknown control node");
        LoopbackControl {
            node,
            inner: Arc::clone(&self.inner),
            stats: TransportStats::default(),
        }
    }

    /// Payload bytes ever enqueued toward a node's data mailbox.
    pub fn data_bytes_enqueued_to(&self, node: NodeId) -> u64 {
        self.inner.data_bytes_in[self.control_index(node)].load(Ordering::Relaxed)
    }

    fn control_index(&self, node: NodeId) -> usize {
        match node {
            NodeId::Worker(r) => r as usize,
            NodeId::JobServer => self.inner.workers,
        }
    }
}

/// One worker's loopback data endpoint.
pub struct LoopbackData {
    rank: u32,
    inner: Arc<Inner>,
    blocks: Vec<BlockRange>,
    width: ElementWidth,
    stats: TransportStats,
}

impl DataPlane for LoopbackData {
    fn rank(&self) -> u32 {
        self.rank
    }

    fn cluster_size(&self) -> usize {
        self.inner.workers
    }

    fn send_block(&mut self, peer: u32, msg: DataMessage) -> Result<SendReceipt, TransportError> {
        if peer == self.rank {
            return Err(TransportError::SelfSend(self.rank));
        }
        let peer_idx = peer as usize;
        if peer_idx >= self.inner.workers {
            return Err(TransportError::UnknownPeer(peer));
        }
        let block = self
            .blocks
            .get(msg.block_index as usize)
            .ok_or(TransportError::Malformed(format!(
                "block index {} out of range",
                msg.block_index
            )))?;
        let expected = block.len * self.width.bytes();
        if msg.payload.len() != expected {
            return Err(TransportError::PayloadSizeMismatch {
                sender: self.rank,
                block_index: msg.block_index,
                expected,
                got: msg.payload.len(),
            });
        }
        if expected == 0 {
            self.stats.suppressed_sends += 1;
            return Ok(SendReceipt {
                wire_bytes: 0,
                suppressed: true,
            });
        }
        let bytes = msg.payload.len() as u64;
        self.inner.data_bytes_in[peer_idx].fetch_add(bytes, Ordering::Relaxed);
        self.inner.data[peer_idx].push(msg);
        self.stats.data_bytes_sent += bytes;
        self.stats.data_msgs_sent += 1;
        Ok(SendReceipt {
            wire_bytes: bytes,
            suppressed: false,
        })
    }

    fn poll_completions(
        &mut self,
        region: &mut RegisteredRegion,
        timeout: Option<Duration>,
    ) -> Result<Vec<CompletionEvent>, TransportError> {
        let msgs = self.inner.data[self.rank as usize].drain(timeout);
        let mut events = Vec::with_capacity(msgs.len());
        for msg in &msgs {
            apply_to_region(region, msg)?;
            self.stats.data_bytes_received += msg.payload.len() as u64;
            self.stats.data_msgs_received += 1;
            events.push(CompletionEvent {
                iteration: msg.iteration,
                phase: msg.phase,
                sender: msg.sender,
                block_index: msg.block_index,
                timestamp: 2 * msg.iteration + msg.phase.as_u8() as u64,
            });
        }
        events.sort_by_key(|e| (e.timestamp, e.sender, e.block_index));
        Ok(events)
    }

    fn stats(&self) -> TransportStats {
        self.stats
    }
}

/// One node's loopback control endpoint.
pub struct LoopbackControl {
    node: NodeId,
    inner: Arc<Inner>,
    stats: TransportStats,
}

impl ControlPlane for LoopbackControl {
    fn node(&self) -> NodeId {
        self.node
    }

    fn send_control(&mut self, to: NodeId, msg: ControlMessage) -> Result<(), TransportError> {
        let idx = match to {
            NodeId::Worker(r) if (r as usize) < self.inner.workers => r as usize,
            NodeId::JobServer => self.inner.workers,
            NodeId::Worker(r) => return Err(TransportError::UnknownPeer(r)),
        };
        let bytes = wire::encode_control_payload(&msg)?.len();
        self.inner.control[idx].push((msg, bytes));
        self.stats.control_msgs_sent += 1;
        self.stats.control_bytes_sent += bytes as u64;
        Ok(())
    }

    fn recv_control(
        &mut self,
        timeout: Option<Duration>,
    ) -> Result<Option<ControlMessage>, TransportError> {
        let idx = match self.node {
            NodeId::Worker(r) => r as usize,
            NodeId::JobServer => self.inner.workers,
        };
        let mailbox = &self.inner.control[idx];
        let mut q = mailbox.q.lock().unwrap();
        if q.is_empty() {
            if let Some(t) = timeout {
                let deadline = Instant::now() + t;
                while q.is_empty() {
                    let left = deadline.saturating_duration_since(Instant::now());
                    if left.is_zero() {
                        break;
                    }
                    let (guard, _) = mailbox.cv.wait_timeout(q, left).unwrap();
                    q = guard;
                }
            }
        }
        match q.pop_front() {
            Some((msg, bytes)) => {
                drop(q);
                self.stats.control_msgs_received += 1;
                self.stats.control_bytes_received += bytes as u64;
                Ok(Some(msg))
            }
            None => Ok(None),
        }
    }

    fn stats(&self) -> TransportStats {
        self.stats
    }
}
