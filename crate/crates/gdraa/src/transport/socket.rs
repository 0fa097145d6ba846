//! TCP transport: the same planes as loopback, framed per [`super::wire`].
//!
//! A full mesh connects `n` endpoints on one host (or several): endpoint `r`
//! binds `addrs[r]`, dials every lower rank, and accepts from every higher
//! rank, so each pair shares exactly one duplex stream. A dialer introduces
//! itself with a `worker_ready` control frame before any traffic. One reader
//! thread per incoming stream decodes frames into a shared queue; deliveries
//! are applied to the region when the owner polls, stamped with a
//! per-endpoint arrival counter.
//!
//! Delivery *order* over sockets is scheduling-dependent; result determinism
//! comes from the collectives' fixed aggregation order, which is what the
//! loopback-vs-socket parity checks pin down.

use std::collections::HashMap;
use std::io::BufReader;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crate::buffers::{BlockRange, ElementWidth, RegisteredRegion};
use crate::transport::{
    apply_to_region, wire, CompletionEvent, ControlKind, ControlMessage, ControlPlane,
    DataMessage, DataPlane, NodeId, SendReceipt, TransportError, TransportStats,
};

const DIAL_ATTEMPTS: u32 = 100;
const DIAL_DELAY: Duration = Duration::from_millis(50);

/// Everything an endpoint needs to join a mesh.
#[derive(Debug, Clone)]
pub struct MeshConfig {
    pub rank: u32,
    /// Listen address of every endpoint, indexed by rank.
    pub addrs: Vec<SocketAddr>,
    pub blocks: Vec<BlockRange>,
    pub width: ElementWidth,
}

enum Inbound {
    Frame(u64, DataMessage),
    Control(ControlMessage),
    Lost(u32, String),
}

/// A connected mesh endpoint implementing the data plane (and carrying any
/// control frames peers send over the same streams).
pub struct SocketData {
    rank: u32,
    n: usize,
    blocks: Vec<BlockRange>,
    width: ElementWidth,
    writers: HashMap<u32, TcpStream>,
    rx: Receiver<Inbound>,
    _readers: Vec<JoinHandle<()>>,
    stats: TransportStats,
    pending_control: Vec<ControlMessage>,
}

fn dial(addr: SocketAddr) -> Result<TcpStream, TransportError> {
    let mut last = None;
    for _ in 0..DIAL_ATTEMPTS {
        match TcpStream::connect(addr) {
            Ok(s) => return Ok(s),
            Err(e) => last = Some(e),
        }
        thread::sleep(DIAL_DELAY);
    }
    Err(TransportError::Io(last.unwrap()))
}

// Takes the existing reader rather than a stream: any hello-frame read on an
// accepted connection may have buffered bytes that arrived right behind it,
// and building a fresh reader here would silently drop them.
fn spawn_reader(
    peer: u32,
    mut reader: BufReader<TcpStream>,
    tx: Sender<Inbound>,
    seq: Arc<AtomicU64>,
) -> JoinHandle<()> {
    thread::spawn(move || {
        loop {
            match wire::read_frame(&mut reader) {
                Ok(wire::Frame::Data(msg)) => {
                    let stamp = seq.fetch_add(1, Ordering::SeqCst);
                    if tx.send(Inbound::Frame(stamp, msg)).is_err() {
                        return;
                    }
                }
                Ok(wire::Frame::Control(msg)) => {
                    if tx.send(Inbound::Control(msg)).is_err() {
                        return;
                    }
                }
                Err(TransportError::Io(e))
                    if e.kind() == std::io::ErrorKind::UnexpectedEof =>
                {
                    // Peer closed cleanly after its last send.
                    return;
                }
                Err(e) => {
                    let _ = tx.send(Inbound::Lost(peer, e.to_string()));
                    return;
                }
            }
        }
    })
}

/// Join the mesh described by `cfg`, blocking until all `n - 1` streams are
/// up. Dials retry while peers are still binding.
pub fn connect_mesh(cfg: MeshConfig) -> Result<SocketData, TransportError> {
    let n = cfg.addrs.len();
    let rank = cfg.rank;
    assert!((rank as usize) < n, "rank {rank} outside address list");

    let listener = TcpListener::bind(cfg.addrs[rank as usize])?;
    let (tx, rx) = mpsc::channel();
    let seq = Arc::new(AtomicU64::new(0));
    let mut writers = HashMap::new();
    let mut readers = Vec::new();

    // Dial every lower rank, introducing ourselves with a hello frame.
    for peer in 0..rank {
        let stream = dial(cfg.addrs[peer as usize])?;
        stream.set_nodelay(true)?;
        let hello = ControlMessage::new(ControlKind::WorkerReady, NodeId::Worker(rank), 0);
        let mut w = stream.try_clone()?;
        wire::write_frame(&mut w, &wire::encode_control_frame(&hello)?)?;
        readers.push(spawn_reader(
            peer,
            BufReader::new(stream.try_clone()?),
            tx.clone(),
            Arc::clone(&seq),
        ));
        writers.insert(peer, stream);
    }

    // Accept every higher rank; the hello frame tells us who dialed.
    for _ in (rank as usize + 1)..n {
        let (stream, _) = listener.accept()?;
        stream.set_nodelay(true)?;
        let mut r = BufReader::new(stream.try_clone()?);
        let peer = match wire::read_frame(&mut r)? {
            wire::Frame::Control(c) if c.kind == ControlKind::WorkerReady => c.sender.as_u32(),
            _ => return Err(TransportError::Malformed("expected hello frame".into())),
        };
        // Hand `r` itself to the reader: a peer's first data frames can ride
        // in right behind its hello and already sit in the buffer.
        readers.push(spawn_reader(peer, r, tx.clone(), Arc::clone(&seq)));
        writers.insert(peer, stream);
    }

    Ok(SocketData {
        rank,
        n,
        blocks: cfg.blocks,
        width: cfg.width,
        writers,
        rx,
        _readers: readers,
        stats: TransportStats::default(),
        pending_control: Vec::new(),
    })
}

impl SocketData {
    /// Control messages peers pushed over the mesh streams, in arrival order.
    pub fn take_control(&mut self) -> Vec<ControlMessage> {
        std::mem::take(&mut self.pending_control)
    }

    fn handle(&mut self, inbound: Inbound, region: &mut RegisteredRegion, out: &mut Vec<CompletionEvent>) -> Result<(), TransportError> {
        match inbound {
            Inbound::Frame(stamp, msg) => {
                apply_to_region(region, &msg)?;
                self.stats.data_bytes_received += msg.payload.len() as u64;
                self.stats.data_msgs_received += 1;
                self.stats.header_bytes_received += wire::HEADER_LEN as u64;
                out.push(CompletionEvent {
                    iteration: msg.iteration,
                    phase: msg.phase,
                    sender: msg.sender,
                    block_index: msg.block_index,
                    timestamp: stamp,
                });
                Ok(())
            }
            Inbound::Control(msg) => {
                self.stats.control_msgs_received += 1;
                self.pending_control.push(msg);
                Ok(())
            }
            Inbound::Lost(peer, detail) => Err(TransportError::ConnectionLost { peer, detail }),
        }
    }
}

impl DataPlane for SocketData {
    fn rank(&self) -> u32 {
        self.rank
    }

    fn cluster_size(&self) -> usize {
        self.n
    }

    fn send_block(&mut self, peer: u32, msg: DataMessage) -> Result<SendReceipt, TransportError> {
        if peer == self.rank {
            return Err(TransportError::SelfSend(self.rank));
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
        let stream = self
            .writers
            .get_mut(&peer)
            .ok_or(TransportError::UnknownPeer(peer))?;
        let frame = wire::encode_data_frame(&msg);
        wire::write_frame(stream, &frame).map_err(|e| TransportError::ConnectionLost {
            peer,
            detail: e.to_string(),
        })?;
        self.stats.data_bytes_sent += msg.payload.len() as u64;
        self.stats.data_msgs_sent += 1;
        self.stats.header_bytes_sent += wire::HEADER_LEN as u64;
        Ok(SendReceipt {
            wire_bytes: msg.payload.len() as u64,
            suppressed: false,
        })
    }

    fn poll_completions(
        &mut self,
        region: &mut RegisteredRegion,
        timeout: Option<Duration>,
    ) -> Result<Vec<CompletionEvent>, TransportError> {
        let mut out = Vec::new();
        let first = match timeout {
            Some(t) => match self.rx.recv_timeout(t) {
                Ok(m) => Some(m),
                Err(RecvTimeoutError::Timeout) => None,
                Err(RecvTimeoutError::Disconnected) => return Err(TransportError::Closed),
            },
            None => self.rx.try_recv().ok(),
        };
        if let Some(m) = first {
            self.handle(m, region, &mut out)?;
        }
        while let Ok(m) = self.rx.try_recv() {
            self.handle(m, region, &mut out)?;
        }
        out.sort_by_key(|e| (e.timestamp, e.sender, e.block_index));
        Ok(out)
    }

    fn stats(&self) -> TransportStats {
        self.stats
    }
}

/// Client half of a control connection (typically worker → job server).
pub struct SocketControlClient {
    node: NodeId,
    stream: TcpStream,
    rx: Receiver<Inbound>,
    _reader: JoinHandle<()>,
    stats: TransportStats,
}

/// Connect to a control server and introduce ourselves.
pub fn connect_control(server: SocketAddr, node: NodeId) -> Result<SocketControlClient, TransportError> {
    let stream = dial(server)?;
    stream.set_nodelay(true)?;
    let mut w = stream.try_clone()?;
    let hello = ControlMessage::new(ControlKind::WorkerReady, node, 0).with("hello", 1u8);
    wire::write_frame(&mut w, &wire::encode_control_frame(&hello)?)?;
    let (tx, rx) = mpsc::channel();
    let reader = spawn_reader(
        NodeId::JobServer.as_u32(),
        BufReader::new(stream.try_clone()?),
        tx,
        Arc::new(AtomicU64::new(0)),
    );
    Ok(SocketControlClient {
        node,
        stream,
        rx,
        _reader: reader,
        stats: TransportStats::default(),
    })
}

impl ControlPlane for SocketControlClient {
    fn node(&self) -> NodeId {
        self.node
    }

    fn send_control(&mut self, _to: NodeId, msg: ControlMessage) -> Result<(), TransportError> {
        let frame = wire::encode_control_frame(&msg)?;
        wire::write_frame(&mut self.stream, &frame)?;
        self.stats.control_msgs_sent += 1;
        self.stats.control_bytes_sent += (frame.len() - wire::HEADER_LEN) as u64;
        self.stats.header_bytes_sent += wire::HEADER_LEN as u64;
        Ok(())
    }

    fn recv_control(
        &mut self,
        timeout: Option<Duration>,
    ) -> Result<Option<ControlMessage>, TransportError> {
        let inbound = match timeout {
            Some(t) => match self.rx.recv_timeout(t) {
                Ok(m) => m,
                Err(RecvTimeoutError::Timeout) => return Ok(None),
                Err(RecvTimeoutError::Disconnected) => return Err(TransportError::Closed),
            },
            None => match self.rx.try_recv() {
                Ok(m) => m,
                Err(_) => return Ok(None),
            },
        };
        match inbound {
            Inbound::Control(msg) => {
                self.stats.control_msgs_received += 1;
                Ok(Some(msg))
            }
            Inbound::Frame(..) => Err(TransportError::Malformed(
                "data frame on a control-only connection".into(),
            )),
            Inbound::Lost(peer, detail) => Err(TransportError::ConnectionLost { peer, detail }),
        }
    }

    fn stats(&self) -> TransportStats {
        self.stats
    }
}

/// Server half of the control plane: accepts `n` identified clients and
/// multiplexes their messages into one queue.
pub struct SocketControlServer {
    clients: HashMap<NodeId, TcpStream>,
    rx: Receiver<Inbound>,
    _readers: Vec<JoinHandle<()>>,
    stats: TransportStats,
}

/// Bind `addr` and accept exactly `n` clients (each sends a hello frame).
pub fn bind_control_server(addr: SocketAddr, n: usize) -> Result<SocketControlServer, TransportError> {
    let listener = TcpListener::bind(addr)?;
    let (tx, rx) = mpsc::channel();
    let mut clients = HashMap::new();
    let mut readers = Vec::new();
    for _ in 0..n {
        let (stream, _) = listener.accept()?;
        stream.set_nodelay(true)?;
        let mut r = BufReader::new(stream.try_clone()?);
        let node = match wire::read_frame(&mut r)? {
            wire::Frame::Control(c) if c.kind == ControlKind::WorkerReady => c.sender,
            _ => return Err(TransportError::Malformed("expected hello frame".into())),
        };
        // Keep `r`: a client's next frame may already sit in its buffer.
        readers.push(spawn_reader(node.as_u32(), r, tx.clone(), Arc::new(AtomicU64::new(0))));
        clients.insert(node, stream);
    }
    Ok(SocketControlServer {
        clients,
        rx,
        _readers: readers,
        stats: TransportStats::default(),
    })
}

impl SocketControlServer {
    pub fn local_addr_of(&self, node: NodeId) -> Option<SocketAddr> {
        self.clients.get(&node).and_then(|s| s.peer_addr().ok())
    }
}

impl ControlPlane for SocketControlServer {
    fn node(&self) -> NodeId {
        NodeId::JobServer
    }

    fn send_control(&mut self, to: NodeId, msg: ControlMessage) -> Result<(), TransportError> {
        let stream = self
            .clients
            .get_mut(&to)
            .ok_or(TransportError::UnknownPeer(to.as_u32()))?;
        let frame = wire::encode_control_frame(&msg)?;
        wire::write_frame(stream, &frame)?;
        self.stats.control_msgs_sent += 1;
        self.stats.control_bytes_sent += (frame.len() - wire::HEADER_LEN) as u64;
        self.stats.header_bytes_sent += wire::HEADER_LEN as u64;
        Ok(())
    }

    fn recv_control(
        &mut self,
        timeout: Option<Duration>,
    ) -> Result<Option<ControlMessage>, TransportError> {
        let inbound = match timeout {
            Some(t) => match self.rx.recv_timeout(t) {
                Ok(m) => m,
                Err(RecvTimeoutError::Timeout) => return Ok(None),
                Err(RecvTimeoutError::Disconnected) => return Err(TransportError::Closed),
            },
            None => match self.rx.try_recv() {
                Ok(m) => m,
                Err(_) => return Ok(None),
            },
        };
        match inbound {
            Inbound::Control(msg) => {
                self.stats.control_msgs_received += 1;
                Ok(Some(msg))
            }
            Inbound::Frame(..) => Err(TransportError::Malformed(
                "data frame on a control-only connection".into(),
            )),
            Inbound::Lost(peer, detail) => Err(TransportError::ConnectionLost { peer, detail }),
        }
    }

    fn stats(&self) -> TransportStats {
        self.stats
    }
}

/// Pick `n` distinct loopback addresses by briefly binding port 0.
///
/// There is a small window between releasing these ports and the mesh
/// re-binding them; [`connect_mesh`] retries dials to ride it out.
pub fn ephemeral_addrs(n: usize) -> Result<Vec<SocketAddr>, TransportError> {
    let listeners: Vec<TcpListener> = (0..n)
        .map(|_| TcpListener::bind(("127.0.0.1", 0)))
        .collect::<Result<_, _>>()?;
    listeners
        .iter()
        .map(|l| l.local_addr().map_err(TransportError::from))
        .collect()
}
