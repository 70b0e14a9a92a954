//! Shape-aware transport for inter-stage tensor dictionaries.
//!
//! Hidden-state dictionaries cross stage boundaries over a reliable ordered
//! byte stream in one of two protocols:
//!
//! - unaware (mode 0): every frame carries self-describing metadata. The
//!   receiver learns nothing in advance, so each frame costs two metadata
//!   rounds (blob size, then blob) before the payload rounds.
//! - aware (mode 1): both ends hold a captured [`HiddenStructure`] in which
//!   every dimension except dim0 (the batch dimension) is frozen. The frame
//!   is the header plus raw payload bytes, zero metadata; the receiver
//!   derives full shapes from the structure plus the iteration's batch size
//!   and allocates its buffers before reading a single byte.
//!
//! Structure changes are sender-driven: when a dict stops matching the
//! captured structure the sender emits one mode-0 frame and both sides
//! re-capture, then mode 1 resumes. The receiver never guesses.
//!
//! All integers on the wire are little-endian. The frame layout is
//! documented byte-for-byte in `docs/wire.md`.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use thiserror::Error;

// ─── Wire constants ──────────────────────────────────────────────────────

pub const MAGIC: [u8; 4] = *b"SATW";
pub const VERSION: u8 = 1;
/// Frame header length: magic + version + mode + iteration.
pub const HEADER_LEN: usize = 4 + 1 + 1 + 8;

/// Upper bounds enforced while parsing, so a corrupt length field cannot
/// trigger an absurd allocation.
const MAX_BLOB_LEN: u64 = 64 << 20;
const MAX_PAYLOAD_LEN: u64 = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Unaware,
    Aware,
    Control,
}

impl Mode {
    pub fn code(self) -> u8 {
        match self {
            Mode::Unaware => 0,
            Mode::Aware => 1,
            Mode::Control => 2,
        }
    }

    fn from_code(c: u8) -> Result<Mode, SatError> {
        match c {
            0 => Ok(Mode::Unaware),
            1 => Ok(Mode::Aware),
            2 => Ok(Mode::Control),
            other => Err(SatError::BadMode(other)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dtype {
    F32,
    F16,
    Bf16,
    F64,
    I32,
    I64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F16 => 1,
            Dtype::Bf16 => 2,
            Dtype::F64 => 3,
            Dtype::I32 => 4,
            Dtype::I64 => 5,
        }
    }

    pub fn from_code(c: u8) -> Result<Dtype, SatError> {
        match c {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F16),
            2 => Ok(Dtype::Bf16),
            3 => Ok(Dtype::F64),
            4 => Ok(Dtype::I32),
            5 => Ok(Dtype::I64),
            other => Err(SatError::BadDtype(other)),
        }
    }

    /// Element size in bytes.
    pub fn size(self) -> usize {
        match self {
            Dtype::F16 | Dtype::Bf16 => 2,
            Dtype::F32 | Dtype::I32 => 4,
            Dtype::F64 | Dtype::I64 => 8,
        }
    }
}

#[derive(Debug, Error)]
pub enum SatError {
    #[error("transport: {0}")]
    Io(#[from] std::io::Error),
    #[error("stream truncated")]
    Truncated,
    #[error("bad frame magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported frame version {0}")]
    BadVersion(u8),
    #[error("unknown frame mode {0}")]
    BadMode(u8),
    #[error("unexpected frame mode {got} (expected {expected})")]
    UnexpectedMode { expected: u8, got: u8 },
    #[error("unknown dtype code {0}")]
    BadDtype(u8),
    #[error("metadata size mismatch: declared {declared}, consumed {consumed}")]
    SizeMismatch { declared: u64, consumed: u64 },
    #[error("key length {0} exceeds 65535 bytes")]
    KeyTooLong(usize),
    #[error("duplicate key {0:?}")]
    DuplicateKey(String),
    #[error("payload length {got} does not match dims ({want} bytes) for key {key:?}")]
    PayloadLen { key: String, want: u64, got: u64 },
    #[error("tensor {0:?} has no dimensions; dim0 must exist")]
    ZeroRank(String),
    #[error("dict does not match captured structure")]
    StructureMismatch,
    #[error("no structure captured for aware receive")]
    NoStructure,
    #[error("corrupt frame: {0}")]
    Corrupt(String),
    #[error("batch size must be positive")]
    ZeroBatch,
    #[error("invalid key encoding")]
    BadKey,
}

// ─── Tensor dictionary ───────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tensor {
    pub dtype: Dtype,
    pub dims: Vec<u64>,
    pub payload: Vec<u8>,
}

impl Tensor {
    pub fn new(dtype: Dtype, dims: Vec<u64>, payload: Vec<u8>) -> Result<Self, SatError> {
        let want = byte_len(&dims, dtype)?;
        if payload.len() as u64 != want {
            return Err(SatError::PayloadLen {
                key: String::new(),
                want,
                got: payload.len() as u64,
            });
        }
        Ok(Tensor { dtype, dims, payload })
    }
}

fn byte_len(dims: &[u64], dtype: Dtype) -> Result<u64, SatError> {
    let mut n: u64 = 1;
    for &d in dims {
        n = n
            .checked_mul(d)
            .ok_or_else(|| SatError::Corrupt("dim product overflow".into()))?;
    }
    n.checked_mul(dtype.size() as u64)
        .ok_or_else(|| SatError::Corrupt("byte length overflow".into()))
}

/// Ordered key → tensor mapping; keys unique, order is sender insertion
/// order and is preserved on the wire.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TensorDict {
    entries: Vec<(String, Tensor)>,
}

impl TensorDict {
    pub fn new() -> Self {
        TensorDict::default()
    }

    pub fn insert(&mut self, key: &str, tensor: Tensor) -> Result<(), SatError> {
        if key.len() > u16::MAX as usize {
            return Err(SatError::KeyTooLong(key.len()));
        }
        if self.entries.iter().any(|(k, _)| k == key) {
            return Err(SatError::DuplicateKey(key.to_string()));
        }
        self.entries.push((key.to_string(), tensor));
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = &(String, Tensor)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

// ─── Metadata codec ──────────────────────────────────────────────────────

/// Serializes a dict's metadata: u32 entry count, then per entry a u16 key
/// length, the key bytes, u8 dtype code, u8 ndim, ndim u64 dims, and a u8
/// device code (always 0: host memory).
pub fn encode_metadata(dict: &TensorDict) -> Result<Vec<u8>, SatError> {
    let mut blob = Vec::new();
    blob.extend_from_slice(&(dict.len() as u32).to_le_bytes());
    for (key, t) in dict.iter() {
        if key.len() > u16::MAX as usize {
            return Err(SatError::KeyTooLong(key.len()));
        }
        blob.extend_from_slice(&(key.len() as u16).to_le_bytes());
        blob.extend_from_slice(key.as_bytes());
        blob.push(t.dtype.code());
        blob.push(t.dims.len() as u8);
        for &d in &t.dims {
            blob.extend_from_slice(&d.to_le_bytes());
        }
        blob.push(0); // device code: host
    }
    Ok(blob)
}

/// One decoded metadata entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetaEntry {
    pub key: String,
    pub dtype: Dtype,
    pub dims: Vec<u64>,
    pub device: u8,
}

/// Parses a metadata blob; the whole blob must be consumed exactly.
pub fn decode_metadata(blob: &[u8]) -> Result<Vec<MetaEntry>, SatError> {
    let mut cur = Cursor { buf: blob, pos: 0 };
    let count = cur.u32()?;
    let mut entries = Vec::with_capacity(count as usize);
    let mut seen = HashSet::new();
    for _ in 0..count {
        let klen = cur.u16()? as usize;
        let key = std::str::from_utf8(cur.bytes(klen)?)
            .map_err(|_| SatError::BadKey)?
            .to_string();
        if !seen.insert(key.clone()) {
            return Err(SatError::DuplicateKey(key));
        }
        let dtype = Dtype::from_code(cur.u8()?)?;
        let ndim = cur.u8()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(cur.u64()?);
        }
        let device = cur.u8()?;
        entries.push(MetaEntry { key, dtype, dims, device });
    }
    if cur.pos != blob.len() {
        return Err(SatError::SizeMismatch {
            declared: blob.len() as u64,
            consumed: cur.pos as u64,
        });
    }
    Ok(entries)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8], SatError> {
        if self.pos + n > self.buf.len() {
            return Err(SatError::Truncated);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, SatError> {
        Ok(self.bytes(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, SatError> {
        Ok(u16::from_le_bytes(self.bytes(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, SatError> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, SatError> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }
}

// ─── Structure capture ───────────────────────────────────────────────────

/// The frozen part of a dict's layout: everything except dim0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HiddenStructure {
    pub entries: Vec<StructureEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StructureEntry {
    pub key: String,
    pub dtype: Dtype,
    /// All dims except dim0, in order.
    pub fixed_dims: Vec<u64>,
}

/// Records everything but dim0 of each tensor; entry order is preserved.
pub fn capture_structure(dict: &TensorDict) -> Result<HiddenStructure, SatError> {
    let mut entries = Vec::with_capacity(dict.len());
    for (key, t) in dict.iter() {
        if t.dims.is_empty() {
            return Err(SatError::ZeroRank(key.clone()));
        }
        entries.push(StructureEntry {
            key: key.clone(),
            dtype: t.dtype,
            fixed_dims: t.dims[1..].to_vec(),
        });
    }
    Ok(HiddenStructure { entries })
}

/// True when the dict fits the structure with some uniform dim0: same entry
/// order, keys, dtypes, and trailing dims, and every tensor shares dim0.
pub fn structure_matches(structure: &HiddenStructure, dict: &TensorDict) -> bool {
    if structure.entries.len() != dict.len() {
        return false;
    }
    let mut dim0: Option<u64> = None;
    for (se, (key, t)) in structure.entries.iter().zip(dict.iter()) {
        if se.key != *key || se.dtype != t.dtype || t.dims.is_empty() {
            return false;
        }
        if t.dims[1..] != se.fixed_dims[..] {
            return false;
        }
        match dim0 {
            None => dim0 = Some(t.dims[0]),
            Some(d) if d != t.dims[0] => return false,
            _ => {}
        }
    }
    true
}

/// Full dims and byte lengths for one iteration, given the batch size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapePlan {
    pub entries: Vec<PlannedEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlannedEntry {
    pub key: String,
    pub dtype: Dtype,
    pub dims: Vec<u64>,
    pub byte_len: usize,
}

/// Sets dim0 := batch_size on every entry and computes byte lengths, so
/// receive buffers can be allocated before any bytes arrive.
pub fn infer_shapes(structure: &HiddenStructure, batch_size: u64) -> Result<ShapePlan, SatError> {
    if batch_size == 0 {
        return Err(SatError::ZeroBatch);
    }
    let mut entries = Vec::with_capacity(structure.entries.len());
    for se in &structure.entries {
        let mut dims = Vec::with_capacity(1 + se.fixed_dims.len());
        dims.push(batch_size);
        dims.extend_from_slice(&se.fixed_dims);
        let len = byte_len(&dims, se.dtype)?;
        if len > MAX_PAYLOAD_LEN {
            return Err(SatError::Corrupt(format!("payload {} too large", len)));
        }
        entries.push(PlannedEntry {
            key: se.key.clone(),
            dtype: se.dtype,
            dims,
            byte_len: len as usize,
        });
    }
    Ok(ShapePlan { entries })
}

// ─── Transport ───────────────────────────────────────────────────────────

/// Reliable ordered byte stream. `write_message` is one wire round; the
/// reader sees a continuous byte sequence.
pub trait ByteStream {
    fn write_message(&mut self, buf: &[u8]) -> Result<(), SatError>;
    fn read_exact_bytes(&mut self, buf: &mut [u8]) -> Result<(), SatError>;
}

impl ByteStream for std::net::TcpStream {
    fn write_message(&mut self, buf: &[u8]) -> Result<(), SatError> {
        self.write_all(buf)?;
        Ok(())
    }

    fn read_exact_bytes(&mut self, buf: &mut [u8]) -> Result<(), SatError> {
        match self.read_exact(buf) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Err(SatError::Truncated),
            Err(e) => Err(e.into()),
        }
    }
}

/// In-process duplex pipe: `memory_pipe()` returns the two ends. Writes are
/// buffered without bound, so a sender never blocks on the receiver; reads
/// block until bytes or hangup. Dropping an end hangs up its peer.
pub fn memory_pipe() -> (PipeEnd, PipeEnd) {
    let a = Arc::new(PipeHalf::default());
    let b = Arc::new(PipeHalf::default());
    (
        PipeEnd { read: a.clone(), write: b.clone() },
        PipeEnd { read: b, write: a },
    )
}

#[derive(Default)]
struct PipeHalf {
    state: std::sync::Mutex<PipeState>,
    cond: std::sync::Condvar,
}

#[derive(Default)]
struct PipeState {
    buf: std::collections::VecDeque<u8>,
    closed: bool,
}

pub struct PipeEnd {
    read: Arc<PipeHalf>,
    write: Arc<PipeHalf>,
}

impl Drop for PipeEnd {
    fn drop(&mut self) {
        let mut st = self.write.state.lock().unwrap();
        st.closed = true;
        self.write.cond.notify_all();
        let mut st2 = self.read.state.lock().unwrap();
        st2.closed = true;
        self.read.cond.notify_all();
    }
}

impl ByteStream for PipeEnd {
    fn write_message(&mut self, buf: &[u8]) -> Result<(), SatError> {
        let mut st = self.write.state.lock().unwrap();
        if st.closed {
            return Err(SatError::Truncated);
        }
        st.buf.extend(buf.iter().copied());
        self.write.cond.notify_all();
        Ok(())
    }

    fn read_exact_bytes(&mut self, buf: &mut [u8]) -> Result<(), SatError> {
        let mut st = self.read.state.lock().unwrap();
        let mut filled = 0;
        while filled < buf.len() {
            if st.buf.is_empty() {
                if st.closed {
                    return Err(SatError::Truncated);
                }
                st = self.read.cond.wait(st).unwrap();
                continue;
            }
            while filled < buf.len() {
                match st.buf.pop_front() {
                    Some(byte) => {
                        buf[filled] = byte;
                        filled += 1;
                    }
                    None => break,
                }
            }
        }
        Ok(())
    }
}

/// Shared counters for an instrumented stream.
#[derive(Debug, Default)]
pub struct WireCounters {
    pub writes: AtomicU64,
    pub bytes_written: AtomicU64,
    pub reads: AtomicU64,
    pub bytes_read: AtomicU64,
}

impl WireCounters {
    pub fn snapshot(&self) -> (u64, u64, u64, u64) {
        (
            self.writes.load(Ordering::SeqCst),
            self.bytes_written.load(Ordering::SeqCst),
            self.reads.load(Ordering::SeqCst),
            self.bytes_read.load(Ordering::SeqCst),
        )
    }
}

/// Wraps any stream and counts rounds and bytes in both directions.
pub struct Counting<S: ByteStream> {
    pub inner: S,
    pub counters: Arc<WireCounters>,
}

impl<S: ByteStream> Counting<S> {
    pub fn new(inner: S) -> Self {
        Counting { inner, counters: Arc::new(WireCounters::default()) }
    }
}

impl<S: ByteStream> ByteStream for Counting<S> {
    fn write_message(&mut self, buf: &[u8]) -> Result<(), SatError> {
        self.counters.writes.fetch_add(1, Ordering::SeqCst);
        self.counters.bytes_written.fetch_add(buf.len() as u64, Ordering::SeqCst);
        self.inner.write_message(buf)
    }

    fn read_exact_bytes(&mut self, buf: &mut [u8]) -> Result<(), SatError> {
        self.counters.reads.fetch_add(1, Ordering::SeqCst);
        self.counters.bytes_read.fetch_add(buf.len() as u64, Ordering::SeqCst);
        self.inner.read_exact_bytes(buf)
    }
}

// ─── Frames ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameHeader {
    pub mode: Mode,
    pub iteration: u64,
}

fn header_bytes(mode: Mode, iteration: u64) -> [u8; HEADER_LEN] {
    let mut h = [0u8; HEADER_LEN];
    h[0..4].copy_from_slice(&MAGIC);
    h[4] = VERSION;
    h[5] = mode.code();
    h[6..14].copy_from_slice(&iteration.to_le_bytes());
    h
}

/// Reads and validates a frame header.
pub fn read_header(stream: &mut dyn ByteStream) -> Result<FrameHeader, SatError> {
    let mut h = [0u8; HEADER_LEN];
    stream.read_exact_bytes(&mut h)?;
    if h[0..4] != MAGIC {
        return Err(SatError::BadMagic([h[0], h[1], h[2], h[3]]));
    }
    if h[4] != VERSION {
        return Err(SatError::BadVersion(h[4]));
    }
    let mode = Mode::from_code(h[5])?;
    let iteration = u64::from_le_bytes(h[6..14].try_into().unwrap());
    Ok(FrameHeader { mode, iteration })
}

/// Per-frame transmission accounting, split by byte class. Framing (the
/// header) is counted apart from metadata so the aware path's zero-metadata
/// property is directly observable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FrameStats {
    pub header_bytes: u64,
    pub metadata_rounds: u64,
    pub metadata_bytes: u64,
    pub payload_rounds: u64,
    pub payload_bytes: u64,
}

/// Mode-0 send: header, u64 blob size, blob, then each payload in entry
/// order. One write per item.
pub fn send_unaware(
    stream: &mut dyn ByteStream,
    dict: &TensorDict,
    iteration: u64,
) -> Result<FrameStats, SatError> {
    let blob = encode_metadata(dict)?;
    let mut stats = FrameStats::default();
    stream.write_message(&header_bytes(Mode::Unaware, iteration))?;
    stats.header_bytes = HEADER_LEN as u64;
    stream.write_message(&(blob.len() as u64).to_le_bytes())?;
    stats.metadata_rounds += 1;
    stats.metadata_bytes += 8;
    stream.write_message(&blob)?;
    stats.metadata_rounds += 1;
    stats.metadata_bytes += blob.len() as u64;
    for (_, t) in dict.iter() {
        stream.write_message(&t.payload)?;
        stats.payload_rounds += 1;
        stats.payload_bytes += t.payload.len() as u64;
    }
    Ok(stats)
}

/// Mode-0 receive body (header already consumed): allocate the size buffer,
/// read the size, allocate the blob buffer, read the blob, deserialize, then
/// per tensor allocate and read the payload.
pub fn recv_unaware_body(stream: &mut dyn ByteStream) -> Result<TensorDict, SatError> {
    let mut size_buf = [0u8; 8];
    stream.read_exact_bytes(&mut size_buf)?;
    let blob_len = u64::from_le_bytes(size_buf);
    if blob_len > MAX_BLOB_LEN {
        return Err(SatError::Corrupt(format!("metadata blob {} too large", blob_len)));
    }
    let mut blob = vec![0u8; blob_len as usize];
    stream.read_exact_bytes(&mut blob)?;
    let entries = decode_metadata(&blob)?;
    let mut dict = TensorDict::new();
    for e in entries {
        let len = byte_len(&e.dims, e.dtype)?;
        if len > MAX_PAYLOAD_LEN {
            return Err(SatError::Corrupt(format!("payload {} too large", len)));
        }
        let mut payload = vec![0u8; len as usize];
        stream.read_exact_bytes(&mut payload)?;
        dict.insert(&e.key, Tensor { dtype: e.dtype, dims: e.dims, payload })?;
    }
    Ok(dict)
}

/// Mode-0 receive including the header.
pub fn recv_unaware(stream: &mut dyn ByteStream) -> Result<(TensorDict, u64), SatError> {
    let h = read_header(stream)?;
    if h.mode != Mode::Unaware {
        return Err(SatError::UnexpectedMode { expected: 0, got: h.mode.code() });
    }
    Ok((recv_unaware_body(stream)?, h.iteration))
}

/// Mode-1 send: header plus concatenated raw payloads in structure order.
/// The dict must match the captured structure; callers that want fallback
/// handle [`SatError::StructureMismatch`] by sending mode 0 instead.
pub fn send_aware(
    stream: &mut dyn ByteStream,
    structure: &HiddenStructure,
    dict: &TensorDict,
    iteration: u64,
) -> Result<FrameStats, SatError> {
    if !structure_matches(structure, dict) {
        return Err(SatError::StructureMismatch);
    }
    let mut stats = FrameStats::default();
    stream.write_message(&header_bytes(Mode::Aware, iteration))?;
    stats.header_bytes = HEADER_LEN as u64;
    for (_, t) in dict.iter() {
        stream.write_message(&t.payload)?;
        stats.payload_rounds += 1;
        stats.payload_bytes += t.payload.len() as u64;
    }
    Ok(stats)
}

/// Receive buffers allocated from a shape plan before any bytes arrive.
pub struct PreparedReceive {
    plan: ShapePlan,
    buffers: Vec<Vec<u8>>,
}

/// Allocates every receive buffer for one aware frame. Touches no stream:
/// pre-posting completes with zero bytes read.
pub fn prepare_receive(
    structure: &HiddenStructure,
    batch_size: u64,
) -> Result<PreparedReceive, SatError> {
    let plan = infer_shapes(structure, batch_size)?;
    let buffers = plan.entries.iter().map(|e| vec![0u8; e.byte_len]).collect();
    Ok(PreparedReceive { plan, buffers })
}

/// Mode-1 receive body (header already consumed): fills the pre-allocated
/// buffers in structure order.
pub fn recv_aware_into(
    stream: &mut dyn ByteStream,
    mut prepared: PreparedReceive,
) -> Result<TensorDict, SatError> {
    let mut dict = TensorDict::new();
    for (e, buf) in prepared.plan.entries.iter().zip(prepared.buffers.iter_mut()) {
        stream.read_exact_bytes(buf)?;
        dict.insert(
            &e.key,
            Tensor { dtype: e.dtype, dims: e.dims.clone(), payload: std::mem::take(buf) },
        )?;
    }
    Ok(dict)
}

/// Mode-1 receive including the header: pre-posts buffers, then reads.
pub fn recv_aware(
    stream: &mut dyn ByteStream,
    structure: &HiddenStructure,
    batch_size: u64,
) -> Result<(TensorDict, u64), SatError> {
    let prepared = prepare_receive(structure, batch_size)?;
    let h = read_header(stream)?;
    if h.mode != Mode::Aware {
        return Err(SatError::UnexpectedMode { expected: 1, got: h.mode.code() });
    }
    Ok((recv_aware_into(stream, prepared)?, h.iteration))
}

/// Mode-2 send: header, u32 body length, body. Used for out-of-band signals
/// (shutdown, poison batches).
pub fn send_control(
    stream: &mut dyn ByteStream,
    iteration: u64,
    body: &[u8],
) -> Result<(), SatError> {
    stream.write_message(&header_bytes(Mode::Control, iteration))?;
    stream.write_message(&(body.len() as u32).to_le_bytes())?;
    stream.write_message(body)?;
    Ok(())
}

fn recv_control_body(stream: &mut dyn ByteStream) -> Result<Vec<u8>, SatError> {
    let mut len_buf = [0u8; 4];
    stream.read_exact_bytes(&mut len_buf)?;
    let len = u32::from_le_bytes(len_buf);
    if len as u64 > MAX_BLOB_LEN {
        return Err(SatError::Corrupt(format!("control body {} too large", len)));
    }
    let mut body = vec![0u8; len as usize];
    stream.read_exact_bytes(&mut body)?;
    Ok(body)
}

// ─── Session endpoints ───────────────────────────────────────────────────

/// Which protocol a sender prefers once a structure is captured.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preference {
    Unaware,
    Aware,
}

/// Sender endpoint handling capture and fallback. With `Preference::Aware`
/// the first frame (and any frame whose dict stopped matching) goes out as
/// mode 0 and re-captures; matching frames go out as mode 1.
pub struct SatSender {
    preference: Preference,
    structure: Option<HiddenStructure>,
}

impl SatSender {
    pub fn new(preference: Preference) -> Self {
        SatSender { preference, structure: None }
    }

    pub fn structure(&self) -> Option<&HiddenStructure> {
        self.structure.as_ref()
    }

    /// Sends one dict, choosing the mode; returns the mode used and stats.
    pub fn send(
        &mut self,
        stream: &mut dyn ByteStream,
        dict: &TensorDict,
        iteration: u64,
    ) -> Result<(Mode, FrameStats), SatError> {
        if self.preference == Preference::Aware {
            if let Some(s) = &self.structure {
                if structure_matches(s, dict) {
                    let stats = send_aware(stream, s, dict, iteration)?;
                    return Ok((Mode::Aware, stats));
                }
            }
            // First frame or structure change: fall back and re-capture.
            self.structure = Some(capture_structure(dict)?);
        }
        let stats = send_unaware(stream, dict, iteration)?;
        Ok((Mode::Unaware, stats))
    }
}

/// One received message: a tensor frame or a control frame.
#[derive(Debug)]
pub enum SatMessage {
    Tensors { dict: TensorDict, iteration: u64, mode: Mode },
    Control { body: Vec<u8>, iteration: u64 },
}

/// Receiver endpoint: pre-posts buffers when a structure is held, follows
/// the sender's mode byte, and re-captures on every mode-0 frame.
pub struct SatReceiver {
    structure: Option<HiddenStructure>,
}

impl SatReceiver {
    pub fn new() -> Self {
        SatReceiver { structure: None }
    }

    pub fn structure(&self) -> Option<&HiddenStructure> {
        self.structure.as_ref()
    }

    /// Receives one message. `batch_size` is the expected dim0 for an aware
    /// frame this iteration (from scheduling); pass the scheduled size even
    /// when a fallback might arrive.
    pub fn recv(
        &mut self,
        stream: &mut dyn ByteStream,
        batch_size: u64,
    ) -> Result<SatMessage, SatError> {
        // Pre-post while the structure is known; discarded on fallback.
        let prepared = match &self.structure {
            Some(s) if batch_size > 0 => Some(prepare_receive(s, batch_size)?),
            _ => None,
        };
        let h = read_header(stream)?;
        match h.mode {
            Mode::Aware => {
                let prepared = prepared.ok_or(SatError::NoStructure)?;
                let dict = recv_aware_into(stream, prepared)?;
                Ok(SatMessage::Tensors { dict, iteration: h.iteration, mode: Mode::Aware })
            }
            Mode::Unaware => {
                let dict = recv_unaware_body(stream)?;
                self.structure = Some(capture_structure(&dict)?);
                Ok(SatMessage::Tensors { dict, iteration: h.iteration, mode: Mode::Unaware })
            }
            Mode::Control => {
                let body = recv_control_body(stream)?;
                Ok(SatMessage::Control { body, iteration: h.iteration })
            }
        }
    }
}

impl Default for SatReceiver {
    fn default() -> Self {
        SatReceiver::new()
    }
}

// ─── Tests ───────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn tensor_f32(dims: &[u64], seed: u64) -> Tensor {
        let n: u64 = dims.iter().product::<u64>() * 4;
        let payload: Vec<u8> = (0..n).map(|i| rng::counter_u64(seed, i) as u8).collect();
        Tensor::new(Dtype::F32, dims.to_vec(), payload).unwrap()
    }

    fn random_dict(key: u64, entries: usize, uniform_dim0: Option<u64>) -> TensorDict {
        let mut s = rng::Stream::new(key);
        let mut dict = TensorDict::new();
        for i in 0..entries {
            let dtype = Dtype::from_code(s.next_bounded(6) as u8).unwrap();
            let ndim = 1 + s.next_bounded(3) as usize;
            let mut dims: Vec<u64> = (0..ndim).map(|_| 1 + s.next_bounded(8)).collect();
            if let Some(d0) = uniform_dim0 {
                dims[0] = d0;
            }
            let len = dims.iter().product::<u64>() * dtype.size() as u64;
            let payload: Vec<u8> = (0..len).map(|_| s.next_u64() as u8).collect();
            dict.insert(
                &format!("t{}_{}", i, s.next_bounded(1000)),
                Tensor::new(dtype, dims, payload).unwrap(),
            )
            .unwrap();
        }
        dict
    }

    // ── metadata codec ──

    #[test]
    fn empty_dict_encodes_to_four_zero_bytes() {
        let blob = encode_metadata(&TensorDict::new()).unwrap();
        assert_eq!(blob, vec![0, 0, 0, 0]);
    }

    #[test]
    fn single_entry_blob_length_matches_layout_arithmetic() {
        let mut dict = TensorDict::new();
        dict.insert("h", tensor_f32(&[2, 4], 1)).unwrap();
        let blob = encode_metadata(&dict).unwrap();
        assert_eq!(blob.len(), 26);
        // count=1, keylen=1, key 'h', dtype 0, ndim 2, dims 2 and 4, device 0
        assert_eq!(&blob[0..4], &[1, 0, 0, 0]);
        assert_eq!(&blob[4..6], &[1, 0]);
        assert_eq!(blob[6], b'h');
        assert_eq!(blob[7], 0);
        assert_eq!(blob[8], 2);
        assert_eq!(&blob[9..17], &2u64.to_le_bytes());
        assert_eq!(&blob[17..25], &4u64.to_le_bytes());
        assert_eq!(blob[25], 0);
    }

    #[test]
    fn metadata_roundtrip_is_lossless() {
        for seed in 0..50u64 {
            let dict = random_dict(seed, (seed % 5) as usize, None);
            let blob = encode_metadata(&dict).unwrap();
            let entries = decode_metadata(&blob).unwrap();
            assert_eq!(entries.len(), dict.len());
            for (e, (key, t)) in entries.iter().zip(dict.iter()) {
                assert_eq!(&e.key, key);
                assert_eq!(e.dtype, t.dtype);
                assert_eq!(e.dims, t.dims);
                assert_eq!(e.device, 0);
            }
        }
    }

    #[test]
    fn truncated_blob_rejected() {
        let mut dict = TensorDict::new();
        dict.insert("h", tensor_f32(&[2, 4], 1)).unwrap();
        let blob = encode_metadata(&dict).unwrap();
        assert!(matches!(decode_metadata(&blob[..blob.len() - 1]), Err(SatError::Truncated)));
    }

    #[test]
    fn trailing_garbage_rejected() {
        let mut blob = encode_metadata(&TensorDict::new()).unwrap();
        blob.push(0);
        assert!(matches!(decode_metadata(&blob), Err(SatError::SizeMismatch { .. })));
    }

    // ── structure ──

    #[test]
    fn capture_drops_only_dim0() {
        let mut dict = TensorDict::new();
        dict.insert("h", tensor_f32(&[7, 4096], 2)).unwrap();
        let s = capture_structure(&dict).unwrap();
        assert_eq!(s.entries[0].fixed_dims, vec![4096]);
    }

    #[test]
    fn dicts_differing_only_in_dim0_share_a_structure() {
        let mut a = TensorDict::new();
        a.insert("h", tensor_f32(&[3, 8], 1)).unwrap();
        let mut b = TensorDict::new();
        b.insert("h", tensor_f32(&[9, 8], 2)).unwrap();
        assert_eq!(capture_structure(&a).unwrap(), capture_structure(&b).unwrap());
    }

    #[test]
    fn dicts_differing_in_key_capture_unequal_structures() {
        let mut a = TensorDict::new();
        a.insert("h", tensor_f32(&[3, 8], 1)).unwrap();
        let mut b = TensorDict::new();
        b.insert("g", tensor_f32(&[3, 8], 1)).unwrap();
        assert_ne!(capture_structure(&a).unwrap(), capture_structure(&b).unwrap());
    }

    #[test]
    fn infer_shapes_sets_dim0_and_byte_lengths() {
        let mut dict = TensorDict::new();
        dict.insert("h", tensor_f32(&[1, 8], 1)).unwrap();
        dict.insert("r", tensor_f32(&[1, 8], 2)).unwrap();
        let s = capture_structure(&dict).unwrap();
        let plan = infer_shapes(&s, 3).unwrap();
        assert_eq!(plan.entries[0].dims, vec![3, 8]);
        assert_eq!(plan.entries[0].byte_len, 96);
        assert_eq!(plan.entries[1].byte_len, 96);
    }

    #[test]
    fn infer_shapes_batch_one_is_fixed_product_times_dtype_size() {
        let mut dict = TensorDict::new();
        dict.insert("h", Tensor::new(Dtype::F64, vec![5, 2, 3], vec![0; 240]).unwrap()).unwrap();
        let s = capture_structure(&dict).unwrap();
        let plan = infer_shapes(&s, 1).unwrap();
        assert_eq!(plan.entries[0].byte_len, 2 * 3 * 8);
    }

    #[test]
    fn zero_batch_rejected() {
        let s = HiddenStructure { entries: vec![] };
        assert!(matches!(infer_shapes(&s, 0), Err(SatError::ZeroBatch)));
    }

    // ── unaware protocol ──

    #[test]
    fn unaware_roundtrip_is_bit_exact() {
        for seed in 0..20u64 {
            let dict = random_dict(100 + seed, 1 + (seed % 4) as usize, None);
            let (mut tx, mut rx) = memory_pipe();
            let stats = send_unaware(&mut tx, &dict, seed).unwrap();
            let (got, iter) = recv_unaware(&mut rx).unwrap();
            assert_eq!(got, dict);
            assert_eq!(iter, seed);
            assert_eq!(stats.metadata_rounds, 2);
            assert_eq!(stats.payload_rounds, dict.len() as u64);
        }
    }

    #[test]
    fn empty_dict_frame_has_no_payload_rounds() {
        let (mut tx, mut rx) = memory_pipe();
        let stats = send_unaware(&mut tx, &TensorDict::new(), 7).unwrap();
        assert_eq!(stats.payload_rounds, 0);
        assert_eq!(stats.metadata_rounds, 2);
        assert_eq!(stats.header_bytes + stats.metadata_bytes, 26);
        let (dict, _) = recv_unaware(&mut rx).unwrap();
        assert!(dict.is_empty());
    }

    #[test]
    fn unaware_write_count_is_header_plus_two_plus_k() {
        let dict = random_dict(55, 3, None);
        let (tx, _rx) = memory_pipe();
        let mut counted = Counting::new(tx);
        send_unaware(&mut counted, &dict, 0).unwrap();
        let (writes, _, _, _) = counted.counters.snapshot();
        assert_eq!(writes, 1 + 2 + 3);
    }

    #[test]
    fn bad_magic_detected() {
        let (mut tx, mut rx) = memory_pipe();
        tx.write_message(b"NOPE").unwrap();
        tx.write_message(&[0u8; 10]).unwrap();
        assert!(matches!(recv_unaware(&mut rx), Err(SatError::BadMagic(_))));
    }

    #[test]
    fn truncated_stream_detected() {
        let (mut tx, rx) = memory_pipe();
        let mut dict = TensorDict::new();
        dict.insert("h", tensor_f32(&[2, 4], 3)).unwrap();
        send_unaware(&mut tx, &dict, 0).unwrap();
        // Replay only a prefix into a fresh pipe.
        let mut all = Vec::new();
        {
            let mut rx = rx;
            let mut buf = vec![0u8; HEADER_LEN + 8 + 26];
            rx.read_exact_bytes(&mut buf).unwrap();
            all.extend_from_slice(&buf);
        }
        let (mut tx2, mut rx2) = memory_pipe();
        tx2.write_message(&all).unwrap();
        drop(tx2);
        assert!(matches!(recv_unaware(&mut rx2), Err(SatError::Truncated)));
    }

    // ── aware protocol ──

    #[test]
    fn aware_roundtrip_bit_equals_unaware_roundtrip() {
        for seed in 0..20u64 {
            let batch = 1 + seed % 5;
            let dict = random_dict(200 + seed, 1 + (seed % 4) as usize, Some(batch));
            let structure = capture_structure(&dict).unwrap();

            let (mut tx1, mut rx1) = memory_pipe();
            send_unaware(&mut tx1, &dict, seed).unwrap();
            let (via_unaware, _) = recv_unaware(&mut rx1).unwrap();

            let (mut tx2, mut rx2) = memory_pipe();
            send_aware(&mut tx2, &structure, &dict, seed).unwrap();
            let (via_aware, iter) = recv_aware(&mut rx2, &structure, batch).unwrap();

            assert_eq!(via_aware, via_unaware);
            assert_eq!(iter, seed);
        }
    }

    #[test]
    fn aware_frame_carries_zero_metadata_bytes() {
        let dict = random_dict(300, 3, Some(4));
        let structure = capture_structure(&dict).unwrap();
        let (tx, _rx) = memory_pipe();
        let mut counted = Counting::new(tx);
        let stats = send_aware(&mut counted, &structure, &dict, 9).unwrap();
        assert_eq!(stats.metadata_rounds, 0);
        assert_eq!(stats.metadata_bytes, 0);
        let (writes, bytes, _, _) = counted.counters.snapshot();
        assert_eq!(writes, 1 + dict.len() as u64);
        assert_eq!(bytes, HEADER_LEN as u64 + stats.payload_bytes);
    }

    #[test]
    fn prepare_receive_reads_zero_bytes() {
        let dict = random_dict(301, 2, Some(3));
        let structure = capture_structure(&dict).unwrap();
        let (_tx, rx) = memory_pipe();
        let counted = Counting::new(rx);
        let counters = counted.counters.clone();
        let prepared = prepare_receive(&structure, 3).unwrap();
        let (_, _, reads, bytes_read) = counters.snapshot();
        assert_eq!(reads, 0);
        assert_eq!(bytes_read, 0);
        assert_eq!(prepared.buffers.len(), 2);
    }

    #[test]
    fn send_aware_rejects_structure_mismatch() {
        let dict = random_dict(302, 2, Some(3));
        let structure = capture_structure(&dict).unwrap();
        let mut other = TensorDict::new();
        other.insert("zzz", tensor_f32(&[3, 4], 1)).unwrap();
        let (mut tx, _rx) = memory_pipe();
        assert!(matches!(
            send_aware(&mut tx, &structure, &other, 0),
            Err(SatError::StructureMismatch)
        ));
    }

    #[test]
    fn mixed_dim0_dict_does_not_match_any_structure() {
        let mut dict = TensorDict::new();
        dict.insert("a", tensor_f32(&[2, 4], 1)).unwrap();
        dict.insert("b", tensor_f32(&[3, 4], 2)).unwrap();
        let s = capture_structure(&dict).unwrap();
        assert!(!structure_matches(&s, &dict));
    }

    // ── endpoints and fallback ──

    #[test]
    fn aware_session_sends_unaware_first_then_aware() {
        let (mut tx, mut rx) = memory_pipe();
        let mut sender = SatSender::new(Preference::Aware);
        let mut receiver = SatReceiver::new();
        for iter in 0..4u64 {
            let dict = random_dict(400, 2, Some(4));
            let (mode, _) = sender.send(&mut tx, &dict, iter).unwrap();
            let expected = if iter == 0 { Mode::Unaware } else { Mode::Aware };
            assert_eq!(mode, expected);
            match receiver.recv(&mut rx, 4).unwrap() {
                SatMessage::Tensors { dict: got, iteration, mode: rmode } => {
                    assert_eq!(got, dict);
                    assert_eq!(iteration, iter);
                    assert_eq!(rmode, expected);
                }
                _ => panic!("expected tensors"),
            }
        }
    }

    #[test]
    fn structure_change_falls_back_for_one_frame_then_resumes() {
        let (mut tx, mut rx) = memory_pipe();
        let mut sender = SatSender::new(Preference::Aware);
        let mut receiver = SatReceiver::new();
        let make = |rename: bool| {
            let mut d = TensorDict::new();
            d.insert(if rename { "renamed" } else { "h" }, tensor_f32(&[4, 8], 7)).unwrap();
            d
        };
        let mut modes = Vec::new();
        for iter in 0..6u64 {
            let dict = make(iter >= 3);
            let (mode, _) = sender.send(&mut tx, &dict, iter).unwrap();
            modes.push(mode);
            match receiver.recv(&mut rx, 4).unwrap() {
                SatMessage::Tensors { dict: got, .. } => assert_eq!(got, dict),
                _ => panic!("expected tensors"),
            }
        }
        assert_eq!(
            modes,
            vec![
                Mode::Unaware,
                Mode::Aware,
                Mode::Aware,
                Mode::Unaware, // rename: one fallback frame
                Mode::Aware,
                Mode::Aware
            ]
        );
    }

    #[test]
    fn unaware_preference_never_uses_aware_mode() {
        let (mut tx, mut rx) = memory_pipe();
        let mut sender = SatSender::new(Preference::Unaware);
        let mut receiver = SatReceiver::new();
        for iter in 0..3u64 {
            let dict = random_dict(500, 2, Some(2));
            let (mode, stats) = sender.send(&mut tx, &dict, iter).unwrap();
            assert_eq!(mode, Mode::Unaware);
            assert_eq!(stats.metadata_rounds, 2);
            assert!(stats.header_bytes + stats.metadata_bytes >= 26);
            match receiver.recv(&mut rx, 2).unwrap() {
                SatMessage::Tensors { dict: got, .. } => assert_eq!(got, dict),
                _ => panic!("expected tensors"),
            }
        }
    }

    #[test]
    fn control_frames_pass_through() {
        let (mut tx, mut rx) = memory_pipe();
        send_control(&mut tx, 42, b"halt").unwrap();
        let mut receiver = SatReceiver::new();
        match receiver.recv(&mut rx, 0).unwrap() {
            SatMessage::Control { body, iteration } => {
                assert_eq!(body, b"halt");
                assert_eq!(iteration, 42);
            }
            _ => panic!("expected control"),
        }
    }

    #[test]
    fn sender_does_not_block_without_a_reader() {
        // Buffered pipe: a full frame enqueues with no receiver activity.
        let (mut tx, _rx) = memory_pipe();
        let dict = random_dict(600, 4, Some(8));
        send_unaware(&mut tx, &dict, 0).unwrap();
        let structure = capture_structure(&dict).unwrap();
        send_aware(&mut tx, &structure, &dict, 1).unwrap();
    }

    #[test]
    fn protocol_equivalence_over_a_frame_sequence() {
        // First-unaware-then-aware must equal all-unaware byte-identically.
        let dicts: Vec<TensorDict> =
            (0..5).map(|i| random_dict(700 + i, 2, Some(3))).collect();

        let mut via_mixed = Vec::new();
        {
            let (mut tx, mut rx) = memory_pipe();
            let mut sender = SatSender::new(Preference::Aware);
            let mut receiver = SatReceiver::new();
            for (i, d) in dicts.iter().enumerate() {
                sender.send(&mut tx, d, i as u64).unwrap();
                match receiver.recv(&mut rx, 3).unwrap() {
                    SatMessage::Tensors { dict, .. } => via_mixed.push(dict),
                    _ => panic!("expected tensors"),
                }
            }
        }
        let mut via_unaware = Vec::new();
        {
            let (mut tx, mut rx) = memory_pipe();
            for (i, d) in dicts.iter().enumerate() {
                send_unaware(&mut tx, d, i as u64).unwrap();
                let (dict, _) = recv_unaware(&mut rx).unwrap();
                via_unaware.push(dict);
            }
        }
        assert_eq!(via_mixed, via_unaware);
    }

    #[test]
    fn tcp_loopback_roundtrip() {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let dict = random_dict(800, 2, Some(4));
        let d2 = dict.clone();
        let h = std::thread::spawn(move || {
            let mut conn = std::net::TcpStream::connect(addr).unwrap();
            send_unaware(&mut conn, &d2, 5).unwrap();
        });
        let (mut conn, _) = listener.accept().unwrap();
        let (got, iter) = recv_unaware(&mut conn).unwrap();
        h.join().unwrap();
        assert_eq!(got, dict);
        assert_eq!(iter, 5);
    }
}
