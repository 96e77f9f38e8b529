//! Memory-access event streams.
//!
//! Every simulated kernel reports the byte address of each element it touches,
//! in program order, to a [`TraceSink`]. Sinks either buffer the events for a
//! later replay ([`VecTrace`]) or feed them straight into the cache hierarchy
//! (`LiveSink` in the `cache` module). Buffered events are packed into a
//! single `u64` per access — bit 63 distinguishes writes — so a billion-event
//! component costs 8 GB at most and usually far less.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::SimError;

/// Bit 63 of a packed event marks the access as a write.
pub const WRITE_BIT: u64 = 1 << 63;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum AccessKind {
    Read,
    Write,
}

/// Receives the per-element byte addresses a kernel touches, in order.
///
/// Methods are monomorphized into the kernels (no virtual dispatch on the
/// per-event path).
pub trait TraceSink {
    fn read(&mut self, addr: u64);
    fn write(&mut self, addr: u64);
}

/// Discards all events. Useful for pure numeric runs.
pub struct NullSink;

impl TraceSink for NullSink {
    #[inline]
    fn read(&mut self, _addr: u64) {}
    #[inline]
    fn write(&mut self, _addr: u64) {}
}

/// Buffers events packed as `addr | WRITE_BIT`.
#[derive(Default, Clone)]
pub struct VecTrace {
    pub events: Vec<u64>,
}

impl VecTrace {
    pub fn new() -> Self {
        Self { events: Vec::new() }
    }

    pub fn with_capacity(n: usize) -> Self {
        Self { events: Vec::with_capacity(n) }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    #[inline]
    pub fn unpack(event: u64) -> (AccessKind, u64) {
        if event & WRITE_BIT != 0 {
            (AccessKind::Write, event & !WRITE_BIT)
        } else {
            (AccessKind::Read, event)
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (AccessKind, u64)> + '_ {
        self.events.iter().map(|&e| Self::unpack(e))
    }
}

impl TraceSink for VecTrace {
    #[inline]
    fn read(&mut self, addr: u64) {
        debug_assert_eq!(addr & WRITE_BIT, 0);
        self.events.push(addr);
    }

    #[inline]
    fn write(&mut self, addr: u64) {
        debug_assert_eq!(addr & WRITE_BIT, 0);
        self.events.push(addr | WRITE_BIT);
    }
}

/// Keeps reads and writes in separate address lists. Handy in tests that
/// assert on exact access orders.
#[derive(Default)]
pub struct RecordingSink {
    pub reads: Vec<u64>,
    pub writes: Vec<u64>,
}

impl RecordingSink {
    pub fn new() -> Self {
        Self::default()
    }
}

impl TraceSink for RecordingSink {
    fn read(&mut self, addr: u64) {
        self.reads.push(addr);
    }

    fn write(&mut self, addr: u64) {
        self.writes.push(addr);
    }
}

/// Counts events without storing them.
#[derive(Default)]
pub struct CountingSink {
    pub reads: u64,
    pub writes: u64,
}

impl TraceSink for CountingSink {
    #[inline]
    fn read(&mut self, _addr: u64) {
        self.reads += 1;
    }

    #[inline]
    fn write(&mut self, _addr: u64) {
        self.writes += 1;
    }
}

/// One record of an on-disk trace dump.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct TraceRecord {
    pub core: u8,
    pub kind: AccessKind,
    pub addr: u64,
}

/// Magic prefix of the binary trace dump format.
pub const TRACE_MAGIC: &[u8; 8] = b"BWMATRC1";

/// Writes a trace dump: the 8-byte magic `BWMATRC1` followed by fixed-width
/// records of `core: u8`, `kind: u8` (0 = read, 1 = write) and
/// `addr: u64` little-endian.
pub fn write_trace_file(path: &Path, records: &[TraceRecord]) -> Result<(), SimError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(TRACE_MAGIC)?;
    for rec in records {
        w.write_all(&[rec.core, if rec.kind == AccessKind::Write { 1 } else { 0 }])?;
        w.write_all(&rec.addr.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a trace dump written by [`write_trace_file`].
pub fn read_trace_file(path: &Path) -> Result<Vec<TraceRecord>, SimError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| SimError::TraceFormat("file shorter than the magic header".into()))?;
    if &magic != TRACE_MAGIC {
        return Err(SimError::TraceFormat(format!(
            "bad magic {:?}, expected {:?}",
            magic, TRACE_MAGIC
        )));
    }
    let mut records = Vec::new();
    let mut buf = [0u8; 10];
    loop {
        match r.read_exact(&mut buf) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let kind = match buf[1] {
            0 => AccessKind::Read,
            1 => AccessKind::Write,
            other => {
                return Err(SimError::TraceFormat(format!(
                    "unknown access kind byte {other}"
                )))
            }
        };
        records.push(TraceRecord {
            core: buf[0],
            kind,
            addr: u64::from_le_bytes(buf[2..10].try_into().unwrap()),
        });
    }
    Ok(records)
}
