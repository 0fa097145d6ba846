//! Gradient buffers, block partitioning, and the registered memory region.
//!
//! Each worker owns one contiguous allocation registered with its NIC, split
//! into a send buffer (`SB`, the local gradient of `L` elements) and a receive
//! buffer (`RB`, one slot per peer). One-sided writes land either in an `RB`
//! slot indexed by the sender's rank or directly in an `SB` block, so a
//! receiver never has to post matching receives; see the transport module for
//! the placement rules.

use thiserror::Error;

/// Upper bound on cluster size accepted by [`partition`] and the collectives.
pub const MAX_WORKERS: usize = 32;

#[derive(Debug, Error, PartialEq)]
pub enum BufferError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("block {index}: offset {offset} + len {len} exceeds buffer of {buffer_len} elements")]
    OutOfBounds {
        index: u32,
        offset: usize,
        len: usize,
        buffer_len: usize,
    },
}

/// Bytes used to encode one gradient element on the wire.
///
/// Buffers hold `f64` working precision in memory; 4-byte framing rounds each
/// element to `f32` at the sender. All byte counters across the crate are
/// derived from this width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ElementWidth {
    #[default]
    Four,
    Eight,
}

impl ElementWidth {
    pub const fn bytes(self) -> usize {
        match self {
            ElementWidth::Four => 4,
            ElementWidth::Eight => 8,
        }
    }

    pub fn from_bytes(bytes: usize) -> Result<Self, BufferError> {
        match bytes {
            4 => Ok(ElementWidth::Four),
            8 => Ok(ElementWidth::Eight),
            other => Err(BufferError::InvalidArgument(format!(
                "element width must be 4 or 8 bytes, got {other}"
            ))),
        }
    }

    /// Rounds values in place to what they would be after a trip across the
    /// wire at this width.
    ///
    /// Collectives apply this to values a rank keeps locally (its own
    /// contribution, the block it aggregates) so a replica's bits never depend
    /// on whether a particular value physically crossed the fabric.
    pub fn round_to_wire(self, values: &mut [f64]) {
        if let ElementWidth::Four = self {
            for v in values {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// One worker's slice of the gradient: `[offset, offset + len)`.
///
/// `len` may be zero for trailing blocks when the cluster is larger than the
/// gradient; zero-length blocks transmit nothing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockRange {
    pub index: u32,
    pub offset: usize,
    pub len: usize,
}

impl BlockRange {
    /// Wire payload size of this block at the given element width.
    pub fn wire_bytes(&self, width: ElementWidth) -> usize {
        self.len * width.bytes()
    }
}

/// A dense gradient (or parameter) vector with an associated wire width.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBuffer {
    elems: Vec<f64>,
    width: ElementWidth,
}

impl GradientBuffer {
    pub fn zeros(len: usize, width: ElementWidth) -> Self {
        Self {
            elems: vec![0.0; len],
            width,
        }
    }

    pub fn from_vec(elems: Vec<f64>, width: ElementWidth) -> Self {
        Self { elems, width }
    }

    pub fn len(&self) -> usize {
        self.elems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elems.is_empty()
    }

    pub fn width(&self) -> ElementWidth {
        self.width
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.elems
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.elems
    }

    /// Total bytes this buffer would occupy on the wire.
    pub fn wire_bytes(&self) -> usize {
        self.elems.len() * self.width.bytes()
    }

    pub fn iter_finite(&self) -> bool {
        self.elems.iter().all(|x| x.is_finite())
    }
}

/// Where reduce-phase messages land in the receive buffer.
///
/// The direct all-reduce hears from every peer at once and posts one slot
/// per sender. The ring hears only from its upstream neighbour but cycles
/// through every block, and a neighbour running one step (or one iteration)
/// ahead may write before the last arrival was consumed — so the ring
/// spreads arrivals across slots by block index instead, giving each block a
/// private landing zone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RecvPlacement {
    #[default]
    BySender,
    ByBlockIndex,
}

/// Split `elements` into `workers` contiguous blocks.
///
/// Every block except possibly the last has `ceil(elements / workers)`
/// elements; the last is shorter (possibly empty) when the division is
/// uneven. Blocks are sorted by offset, non-overlapping, and cover
/// `[0, elements)` exactly.
pub fn partition(elements: usize, workers: usize) -> Result<Vec<BlockRange>, BufferError> {
    if elements == 0 {
        return Err(BufferError::InvalidArgument(
            "gradient length must be positive".into(),
        ));
    }
    if workers == 0 || workers > MAX_WORKERS {
        return Err(BufferError::InvalidArgument(format!(
            "worker count must be in 1..={MAX_WORKERS}, got {workers}"
        )));
    }
    let slot = elements.div_ceil(workers);
    let mut blocks = Vec::with_capacity(workers);
    let mut offset = 0;
    for index in 0..workers {
        let len = slot.min(elements - offset);
        blocks.push(BlockRange {
            index: index as u32,
            offset,
            len,
        });
        offset += len;
    }
    Ok(blocks)
}

/// Borrow the sub-slice of `buf` covered by `range`.
pub fn block_view<'a>(buf: &'a [f64], range: &BlockRange) -> Result<&'a [f64], BufferError> {
    let end = range.offset.checked_add(range.len).ok_or(BufferError::OutOfBounds {
        index: range.index,
        offset: range.offset,
        len: range.len,
        buffer_len: buf.len(),
    })?;
    if end > buf.len() {
        return Err(BufferError::OutOfBounds {
            index: range.index,
            offset: range.offset,
            len: range.len,
            buffer_len: buf.len(),
        });
    }
    Ok(&buf[range.offset..end])
}

/// The contiguous NIC-registered allocation: `[ SB | RB slot 0 | .. | RB slot S-1 ]`.
///
/// The send buffer holds the local gradient laid out by a block partition;
/// each receive slot is sized for the largest block (the first block always
/// carries the ceil length) so any peer's block fits at a fixed offset.
#[derive(Debug)]
pub struct RegisteredRegion {
    elems: Vec<f64>,
    gradient_len: usize,
    slot_len: usize,
    slots: usize,
    blocks: Vec<BlockRange>,
    width: ElementWidth,
    recv_placement: RecvPlacement,
}

impl RegisteredRegion {
    /// Build a region from an explicit block layout with `slots` receive slots.
    pub fn new(blocks: Vec<BlockRange>, slots: usize, width: ElementWidth) -> Result<Self, BufferError> {
        if blocks.is_empty() {
            return Err(BufferError::InvalidArgument("empty block layout".into()));
        }
        let mut expect = 0;
        for b in &blocks {
            if b.offset != expect {
                return Err(BufferError::InvalidArgument(format!(
                    "blocks must be contiguous; block {} starts at {} but {} expected",
                    b.index, b.offset, expect
                )));
            }
            expect += b.len;
        }
        let gradient_len = expect;
        let slot_len = blocks[0].len;
        if blocks.iter().any(|b| b.len > slot_len) {
            return Err(BufferError::InvalidArgument(
                "first block must carry the largest length".into(),
            ));
        }
        Ok(Self {
            elems: vec![0.0; gradient_len + slots * slot_len],
            gradient_len,
            slot_len,
            slots,
            blocks,
            width,
            recv_placement: RecvPlacement::BySender,
        })
    }

    /// Change how reduce-phase arrivals are mapped to receive slots.
    pub fn with_recv_placement(mut self, placement: RecvPlacement) -> Self {
        self.recv_placement = placement;
        self
    }

    pub fn recv_placement(&self) -> RecvPlacement {
        self.recv_placement
    }

    /// Region for an N-worker collective over `elements` gradient elements:
    /// an N-block partition plus N receive slots.
    pub fn for_collective(
        elements: usize,
        workers: usize,
        width: ElementWidth,
    ) -> Result<Self, BufferError> {
        Self::new(partition(elements, workers)?, workers, width)
    }

    pub fn gradient_len(&self) -> usize {
        self.gradient_len
    }

    pub fn slot_len(&self) -> usize {
        self.slot_len
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn width(&self) -> ElementWidth {
        self.width
    }

    pub fn blocks(&self) -> &[BlockRange] {
        &self.blocks
    }

    pub fn block(&self, index: u32) -> Option<&BlockRange> {
        self.blocks.get(index as usize)
    }

    pub fn send_buffer(&self) -> &[f64] {
        &self.elems[..self.gradient_len]
    }

    pub fn send_buffer_mut(&mut self) -> &mut [f64] {
        &mut self.elems[..self.gradient_len]
    }

    pub fn sb_block(&self, index: u32) -> Result<&[f64], BufferError> {
        let b = self.block_checked(index)?;
        Ok(&self.elems[b.offset..b.offset + b.len])
    }

    pub fn sb_block_mut(&mut self, index: u32) -> Result<&mut [f64], BufferError> {
        let b = *self.block_checked(index)?;
        Ok(&mut self.elems[b.offset..b.offset + b.len])
    }

    /// Receive slot `slot`, truncated to `len` elements.
    pub fn recv_slot(&self, slot: usize, len: usize) -> Result<&[f64], BufferError> {
        self.slot_range(slot, len)
            .map(|(start, end)| &self.elems[start..end])
    }

    pub fn recv_slot_mut(&mut self, slot: usize, len: usize) -> Result<&mut [f64], BufferError> {
        self.slot_range(slot, len)
            .map(|(start, end)| &mut self.elems[start..end])
    }

    /// Copy a gradient into the send buffer.
    pub fn load_gradient(&mut self, g: &[f64]) -> Result<(), BufferError> {
        if g.len() != self.gradient_len {
            return Err(BufferError::InvalidArgument(format!(
                "gradient has {} elements, region expects {}",
                g.len(),
                self.gradient_len
            )));
        }
        self.send_buffer_mut().copy_from_slice(g);
        Ok(())
    }

    /// Copy the send buffer out into a gradient.
    pub fn store_gradient(&self, g: &mut [f64]) -> Result<(), BufferError> {
        if g.len() != self.gradient_len {
            return Err(BufferError::InvalidArgument(format!(
                "gradient has {} elements, region holds {}",
                g.len(),
                self.gradient_len
            )));
        }
        g.copy_from_slice(self.send_buffer());
        Ok(())
    }

    /// The whole allocation, exposing that SB and RB share one extent.
    pub fn contiguous_extent(&self) -> &[f64] {
        &self.elems
    }

    fn block_checked(&self, index: u32) -> Result<&BlockRange, BufferError> {
        self.blocks
            .get(index as usize)
            .ok_or(BufferError::OutOfBounds {
                index,
                offset: 0,
                len: 0,
                buffer_len: self.gradient_len,
            })
    }

    fn slot_range(&self, slot: usize, len: usize) -> Result<(usize, usize), BufferError> {
        if slot >= self.slots || len > self.slot_len {
            return Err(BufferError::OutOfBounds {
                index: slot as u32,
                offset: self.gradient_len + slot * self.slot_len,
                len,
                buffer_len: self.elems.len(),
            });
        }
        let start = self.gradient_len + slot * self.slot_len;
        Ok((start, start + len))
    }
}
