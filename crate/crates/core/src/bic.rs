//! Buffered IPC channels.
//!
//! Two channel families serve the dispatch and combine sides of the decode
//! loop:
//!
//! - [`RingChannel`]: a single-producer multi-consumer ring over a shared
//!   memory region (`/dev/shm/bic.<name>`), one advisory file lock per slot.
//!   The producer runs one slot ahead of its writes: before writing slot
//!   n mod N it already holds the exclusive lock on that slot (acquired
//!   while producing iteration n-1) and first acquires the lock on slot
//!   (n+1) mod N. A reader holding a shared lock therefore stalls the
//!   producer at the lock-ahead acquisition, never mid-write, and a reader
//!   that falls N slots behind sees a higher iteration in the slot header (a
//!   lag fault) instead of torn data.
//! - [`BicoCollector`]: a multi-producer combine channel. Sampler workers
//!   frame (sequence id, token id) pairs over any reliable byte stream; the
//!   collector fills one subslot per sampler and releases an iteration only
//!   when all S subslots are present.
//!
//! Locks are Linux open-file-description (OFD) record locks, so two handles
//! within one process conflict like two processes would; every handle owns
//! its own file description. Payloads are opaque bytes; framing and
//! checksums belong to callers. Byte offsets are documented in
//! `docs/bic.md`.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::os::fd::AsRawFd;
use std::os::unix::fs::FileExt;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use thiserror::Error;

// ─── Region layout ───────────────────────────────────────────────────────

pub const REGION_MAGIC: [u8; 4] = *b"BICR";
pub const REGION_VERSION: u8 = 1;
/// magic(4) + version(1) + ready(1) + pad(2) + n_slots(4) + capacity(4).
pub const REGION_HEADER_LEN: u64 = 16;
/// iteration(8) + payload_len(4) + generation(4).
pub const SLOT_HEADER_LEN: u64 = 16;

/// Poll backoff bounds for consumers waiting on an unwritten slot.
const BACKOFF_START: Duration = Duration::from_micros(20);
const BACKOFF_CAP: Duration = Duration::from_millis(1);

#[derive(Debug, Error)]
pub enum BicError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("channel name {0:?} already exists")]
    NameCollision(String),
    #[error("invalid channel name {0:?}")]
    BadName(String),
    #[error("slot capacity must be positive")]
    ZeroCapacity,
    #[error("need at least 2 slots, got {0}")]
    TooFewSlots(u32),
    #[error("region not initialized or incompatible: {0}")]
    BadRegion(String),
    #[error("payload of {len} bytes exceeds slot capacity {capacity}")]
    Oversized { len: usize, capacity: u32 },
    #[error("producer iteration {got} out of order (expected {expected})")]
    IterationOrder { expected: u64, got: u64 },
    #[error("consumer lagged: wanted iteration {expected}, slot holds {found}")]
    Lag { expected: u64, found: u64 },
    #[error("timed out waiting for iteration {0}")]
    Timeout(u64),
    #[error("handle is not a producer")]
    NotProducer,
    #[error("duplicate subslot write: iteration {iteration}, sampler {sampler_index}")]
    DuplicateSubslot { iteration: u64, sampler_index: u16 },
    #[error("frame for already-collected iteration {0}")]
    StaleIteration(u64),
    #[error("sampler index {got} out of range (S = {s})")]
    SamplerIndex { got: u16, s: u16 },
    #[error("malformed combine frame: {0}")]
    BadFrame(String),
    #[error("combine channel fault: {0}")]
    CollectorFault(String),
}

/// Shared-memory path for a channel name.
pub fn shm_path(name: &str) -> PathBuf {
    PathBuf::from(format!("/dev/shm/bic.{}", name))
}

fn validate_name(name: &str) -> Result<(), BicError> {
    let ok = !name.is_empty()
        && name.len() <= 200
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'));
    if ok {
        Ok(())
    } else {
        Err(BicError::BadName(name.to_string()))
    }
}

/// Removes a channel's backing region if present.
pub fn unlink(name: &str) -> Result<(), BicError> {
    validate_name(name)?;
    match std::fs::remove_file(shm_path(name)) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(e.into()),
    }
}

// ─── Locking ─────────────────────────────────────────────────────────────

/// Acquires (or releases) an OFD record lock on [start, start+len).
/// Returns false when `wait` is off and the lock is contended.
fn fcntl_lock(
    file: &File,
    lock_type: libc::c_int,
    start: u64,
    len: u64,
    wait: bool,
) -> Result<bool, BicError> {
    let fl = libc::flock {
        l_type: lock_type as libc::c_short,
        l_whence: libc::SEEK_SET as libc::c_short,
        l_start: start as libc::off_t,
        l_len: len as libc::off_t,
        l_pid: 0, // required 0 for OFD locks
    };
    let cmd = if wait { libc::F_OFD_SETLKW } else { libc::F_OFD_SETLK };
    loop {
        let rc = unsafe { libc::fcntl(file.as_raw_fd(), cmd, &fl) };
        if rc == 0 {
            return Ok(true);
        }
        let err = std::io::Error::last_os_error();
        match err.raw_os_error() {
            Some(libc::EINTR) => continue,
            Some(libc::EAGAIN) | Some(libc::EACCES) if !wait => return Ok(false),
            _ => return Err(err.into()),
        }
    }
}

// ─── Ring channel ────────────────────────────────────────────────────────

/// One slot's header as stored in the region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotHeader {
    pub iteration: u64,
    pub payload_len: u32,
    /// Wrap count + 1; zero means the slot was never written.
    pub generation: u32,
}

/// Producer phase reported by [`RingChannel::produce_with_probe`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProducePhase {
    /// About to block on the exclusive lock for slot (n+1) mod N.
    LockAheadStart,
    LockAheadAcquired,
    WriteStart,
    WriteEnd,
    /// Slot n's exclusive lock released (always the last step).
    ReleasedCurrent,
}

enum Role {
    /// Holds the exclusive lock on slot (next mod N).
    Producer { next: u64 },
    Consumer,
}

/// Single-producer multi-consumer shared-memory ring. The handle returned by
/// [`RingChannel::create`] is the producer; handles from [`RingChannel::open`]
/// are consumers. A handle is used from one thread at a time.
pub struct RingChannel {
    file: File,
    name: String,
    n_slots: u32,
    capacity: u32,
    role: Role,
}

impl RingChannel {
    /// Creates the shared region (failing on collision), zeroes every slot
    /// header, and pre-acquires the exclusive lock on slot 0 so the first
    /// produce starts under the lock-ahead convention.
    pub fn create(name: &str, n_slots: u32, capacity: u32) -> Result<RingChannel, BicError> {
        validate_name(name)?;
        if n_slots < 2 {
            return Err(BicError::TooFewSlots(n_slots));
        }
        if capacity == 0 {
            return Err(BicError::ZeroCapacity);
        }
        let path = shm_path(name);
        let file = match OpenOptions::new().read(true).write(true).create_new(true).open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(BicError::NameCollision(name.to_string()))
            }
            Err(e) => return Err(e.into()),
        };
        let stride = SLOT_HEADER_LEN + capacity as u64;
        let total = REGION_HEADER_LEN + n_slots as u64 * stride;
        file.set_len(total)?;
        let mut header = [0u8; REGION_HEADER_LEN as usize];
        header[0..4].copy_from_slice(&REGION_MAGIC);
        header[4] = REGION_VERSION;
        header[5] = 0; // not ready yet
        header[8..12].copy_from_slice(&n_slots.to_le_bytes());
        header[12..16].copy_from_slice(&capacity.to_le_bytes());
        file.write_all_at(&header, 0)?;
        // set_len zeroed the slots; publish readiness last.
        file.write_all_at(&[1], 5)?;
        let ch = RingChannel {
            file,
            name: name.to_string(),
            n_slots,
            capacity,
            role: Role::Producer { next: 0 },
        };
        // Lock-ahead bootstrap: produce(0) must already hold slot 0.
        fcntl_lock(&ch.file, libc::F_WRLCK, ch.slot_offset(0), ch.stride(), true)?;
        Ok(ch)
    }

    /// Opens an existing channel as a consumer.
    pub fn open(name: &str) -> Result<RingChannel, BicError> {
        validate_name(name)?;
        let file = OpenOptions::new().read(true).write(true).open(shm_path(name))?;
        let mut header = [0u8; REGION_HEADER_LEN as usize];
        file.read_exact_at(&mut header, 0)?;
        if header[0..4] != REGION_MAGIC {
            return Err(BicError::BadRegion("bad magic".into()));
        }
        if header[4] != REGION_VERSION {
            return Err(BicError::BadRegion(format!("version {}", header[4])));
        }
        if header[5] != 1 {
            return Err(BicError::BadRegion("region not ready".into()));
        }
        let n_slots = u32::from_le_bytes(header[8..12].try_into().unwrap());
        let capacity = u32::from_le_bytes(header[12..16].try_into().unwrap());
        if n_slots < 2 || capacity == 0 {
            return Err(BicError::BadRegion("invalid geometry".into()));
        }
        Ok(RingChannel {
            file,
            name: name.to_string(),
            n_slots,
            capacity,
            role: Role::Consumer,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n_slots(&self) -> u32 {
        self.n_slots
    }

    pub fn capacity(&self) -> u32 {
        self.capacity
    }

    fn stride(&self) -> u64 {
        SLOT_HEADER_LEN + self.capacity as u64
    }

    fn slot_offset(&self, slot: u32) -> u64 {
        REGION_HEADER_LEN + slot as u64 * self.stride()
    }

    fn slot_of(&self, iteration: u64) -> u32 {
        (iteration % self.n_slots as u64) as u32
    }

    /// Writes iteration n's payload into slot n mod N under the lock-ahead
    /// discipline. Blocks while any reader holds the next slot.
    pub fn produce(&mut self, iteration: u64, payload: &[u8]) -> Result<(), BicError> {
        self.produce_with_probe(iteration, payload, &mut |_| {})
    }

    /// [`RingChannel::produce`] with a phase probe for blocking-point
    /// observation.
    pub fn produce_with_probe(
        &mut self,
        iteration: u64,
        payload: &[u8],
        probe: &mut dyn FnMut(ProducePhase),
    ) -> Result<(), BicError> {
        let next = match &self.role {
            Role::Producer { next } => *next,
            Role::Consumer => return Err(BicError::NotProducer),
        };
        if iteration != next {
            return Err(BicError::IterationOrder { expected: next, got: iteration });
        }
        if payload.len() > self.capacity as usize {
            return Err(BicError::Oversized { len: payload.len(), capacity: self.capacity });
        }
        let slot = self.slot_of(iteration);
        let ahead = self.slot_of(iteration + 1);

        probe(ProducePhase::LockAheadStart);
        fcntl_lock(&self.file, libc::F_WRLCK, self.slot_offset(ahead), self.stride(), true)?;
        probe(ProducePhase::LockAheadAcquired);

        probe(ProducePhase::WriteStart);
        let base = self.slot_offset(slot);
        if !payload.is_empty() {
            self.file.write_all_at(payload, base + SLOT_HEADER_LEN)?;
        }
        let mut header = [0u8; SLOT_HEADER_LEN as usize];
        header[0..8].copy_from_slice(&iteration.to_le_bytes());
        header[8..12].copy_from_slice(&(payload.len() as u32).to_le_bytes());
        let generation = (iteration / self.n_slots as u64 + 1) as u32;
        header[12..16].copy_from_slice(&generation.to_le_bytes());
        self.file.write_all_at(&header, base)?;
        probe(ProducePhase::WriteEnd);

        fcntl_lock(&self.file, libc::F_UNLCK, base, self.stride(), true)?;
        probe(ProducePhase::ReleasedCurrent);

        self.role = Role::Producer { next: iteration + 1 };
        Ok(())
    }

    /// Blocking consume: polls slot n mod N under a shared lock until the
    /// header shows iteration n, then copies the payload out. A header
    /// already past n is a lag fault.
    pub fn consume(&mut self, iteration: u64) -> Result<Vec<u8>, BicError> {
        self.consume_inner(iteration, None)
    }

    /// [`RingChannel::consume`] with a deadline.
    pub fn consume_timeout(
        &mut self,
        iteration: u64,
        timeout: Duration,
    ) -> Result<Vec<u8>, BicError> {
        self.consume_inner(iteration, Some(Instant::now() + timeout))
    }

    fn consume_inner(
        &mut self,
        iteration: u64,
        deadline: Option<Instant>,
    ) -> Result<Vec<u8>, BicError> {
        let slot = self.slot_of(iteration);
        let base = self.slot_offset(slot);
        let mut backoff = BACKOFF_START;
        loop {
            // A contended lock means the producer has claimed the slot for
            // an upcoming write; that is the same wait as an unwritten
            // header, and taking it non-blocking keeps the deadline live.
            if fcntl_lock(&self.file, libc::F_RDLCK, base, self.stride(), false)? {
                let result = self.read_slot_locked(base, iteration);
                fcntl_lock(&self.file, libc::F_UNLCK, base, self.stride(), true)?;
                if let Some(payload) = result? {
                    return Ok(payload);
                }
            }
            if let Some(d) = deadline {
                if Instant::now() >= d {
                    return Err(BicError::Timeout(iteration));
                }
            }
            std::thread::sleep(backoff);
            backoff = (backoff * 2).min(BACKOFF_CAP);
        }
    }

    /// Under the caller-held lock: returns Some(payload) when the slot holds
    /// the wanted iteration, None when it is still older, and a lag fault
    /// when the producer has already moved past it.
    fn read_slot_locked(&self, base: u64, iteration: u64) -> Result<Option<Vec<u8>>, BicError> {
        let header = self.read_header_at(base)?;
        if header.generation == 0 || header.iteration < iteration {
            return Ok(None);
        }
        if header.iteration > iteration {
            return Err(BicError::Lag { expected: iteration, found: header.iteration });
        }
        if header.payload_len > self.capacity {
            return Err(BicError::BadRegion(format!(
                "payload length {} exceeds capacity {}",
                header.payload_len, self.capacity
            )));
        }
        let mut payload = vec![0u8; header.payload_len as usize];
        if !payload.is_empty() {
            self.file.read_exact_at(&mut payload, base + SLOT_HEADER_LEN)?;
        }
        Ok(Some(payload))
    }

    fn read_header_at(&self, base: u64) -> Result<SlotHeader, BicError> {
        let mut h = [0u8; SLOT_HEADER_LEN as usize];
        self.file.read_exact_at(&mut h, base)?;
        Ok(SlotHeader {
            iteration: u64::from_le_bytes(h[0..8].try_into().unwrap()),
            payload_len: u32::from_le_bytes(h[8..12].try_into().unwrap()),
            generation: u32::from_le_bytes(h[12..16].try_into().unwrap()),
        })
    }

    /// Unsynchronized diagnostic snapshot of one slot's header. It does not
    /// take the slot lock (a fresh producer claims its next slot ahead of
    /// writing, which would stall this), so it may race an in-progress
    /// write; callers needing a consistent view use [`RingChannel::consume`].
    pub fn slot_header(&self, slot: u32) -> Result<SlotHeader, BicError> {
        let base = self.slot_offset(slot % self.n_slots);
        self.read_header_at(base)
    }
}

// ─── Combine channel (BIC-O) ─────────────────────────────────────────────

/// One sampler's contribution to one iteration:
/// `u64 iteration, u16 sampler_index, u16 count, count x (u64 seq_id, u32 token_id)`,
/// all little-endian; 12 + 12·count bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BicoFrame {
    pub iteration: u64,
    pub sampler_index: u16,
    pub tokens: Vec<(u64, u32)>,
}

impl BicoFrame {
    pub fn encode(&self) -> Result<Vec<u8>, BicError> {
        if self.tokens.len() > u16::MAX as usize {
            return Err(BicError::BadFrame(format!("{} tokens exceed u16", self.tokens.len())));
        }
        let mut out = Vec::with_capacity(12 + 12 * self.tokens.len());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&self.sampler_index.to_le_bytes());
        out.extend_from_slice(&(self.tokens.len() as u16).to_le_bytes());
        for &(seq, tok) in &self.tokens {
            out.extend_from_slice(&seq.to_le_bytes());
            out.extend_from_slice(&tok.to_le_bytes());
        }
        Ok(out)
    }
}

/// Writes one combine frame to a reliable stream.
pub fn bico_submit<W: Write>(
    w: &mut W,
    iteration: u64,
    sampler_index: u16,
    tokens: &[(u64, u32)],
) -> Result<(), BicError> {
    let frame = BicoFrame { iteration, sampler_index, tokens: tokens.to_vec() };
    w.write_all(&frame.encode()?)?;
    Ok(())
}

/// Reads one frame; Ok(None) on clean EOF at a frame boundary.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<BicoFrame>, BicError> {
    let mut prefix = [0u8; 12];
    let mut filled = 0;
    while filled < prefix.len() {
        match r.read(&mut prefix[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(BicError::BadFrame("eof mid-frame".into())),
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e.into()),
        }
    }
    let iteration = u64::from_le_bytes(prefix[0..8].try_into().unwrap());
    let sampler_index = u16::from_le_bytes(prefix[8..10].try_into().unwrap());
    let count = u16::from_le_bytes(prefix[10..12].try_into().unwrap()) as usize;
    let mut body = vec![0u8; count * 12];
    r.read_exact(&mut body)?;
    let tokens = (0..count)
        .map(|i| {
            let o = i * 12;
            (
                u64::from_le_bytes(body[o..o + 8].try_into().unwrap()),
                u32::from_le_bytes(body[o + 8..o + 12].try_into().unwrap()),
            )
        })
        .collect();
    Ok(Some(BicoFrame { iteration, sampler_index, tokens }))
}

/// Pure combine-ring state: one logical slot per in-flight iteration, S
/// subslots per slot, recycled when the iteration is taken.
pub struct BicoState {
    s: u16,
    /// Lowest iteration not yet collected.
    next_collect: u64,
    pending: BTreeMap<u64, Vec<Option<Vec<(u64, u32)>>>>,
}

impl BicoState {
    pub fn new(s: u16) -> Self {
        assert!(s >= 1, "need at least one subslot");
        BicoState { s, next_collect: 0, pending: BTreeMap::new() }
    }

    pub fn subslots(&self) -> u16 {
        self.s
    }

    /// Places a frame into its subslot. Duplicate (iteration, sampler) or a
    /// frame for an already-collected iteration is a protocol fault.
    pub fn ingest(&mut self, frame: BicoFrame) -> Result<(), BicError> {
        if frame.sampler_index >= self.s {
            return Err(BicError::SamplerIndex { got: frame.sampler_index, s: self.s });
        }
        if frame.iteration < self.next_collect {
            return Err(BicError::StaleIteration(frame.iteration));
        }
        let slot = self
            .pending
            .entry(frame.iteration)
            .or_insert_with(|| vec![None; self.s as usize]);
        let sub = &mut slot[frame.sampler_index as usize];
        if sub.is_some() {
            return Err(BicError::DuplicateSubslot {
                iteration: frame.iteration,
                sampler_index: frame.sampler_index,
            });
        }
        *sub = Some(frame.tokens);
        Ok(())
    }

    /// True when all S subslots for the iteration are filled.
    pub fn ready(&self, iteration: u64) -> bool {
        self.pending
            .get(&iteration)
            .map(|slot| slot.iter().all(|s| s.is_some()))
            .unwrap_or(false)
    }

    /// Takes a complete iteration as a seq_id → token map and recycles its
    /// slot. Returns None while incomplete.
    pub fn take(&mut self, iteration: u64) -> Option<BTreeMap<u64, u32>> {
        if !self.ready(iteration) {
            return None;
        }
        let slot = self.pending.remove(&iteration).unwrap();
        self.next_collect = self.next_collect.max(iteration + 1);
        let mut map = BTreeMap::new();
        for sub in slot.into_iter().flatten() {
            for (seq, tok) in sub {
                map.insert(seq, tok);
            }
        }
        Some(map)
    }
}

/// Thread-safe collector: reader threads ingest frames, one consumer blocks
/// in [`BicoCollector::collect`] until an iteration completes.
#[derive(Clone)]
pub struct BicoCollector {
    shared: Arc<CollectorShared>,
}

struct CollectorShared {
    state: Mutex<CollectorInner>,
    cond: Condvar,
}

struct CollectorInner {
    ring: BicoState,
    fault: Option<String>,
}

impl BicoCollector {
    pub fn new(s: u16) -> Self {
        BicoCollector {
            shared: Arc::new(CollectorShared {
                state: Mutex::new(CollectorInner { ring: BicoState::new(s), fault: None }),
                cond: Condvar::new(),
            }),
        }
    }

    /// Ingests one frame and wakes the collector.
    pub fn submit(&self, frame: BicoFrame) -> Result<(), BicError> {
        let mut st = self.shared.state.lock().unwrap();
        let result = st.ring.ingest(frame);
        if let Err(e) = &result {
            st.fault = Some(e.to_string());
        }
        self.shared.cond.notify_all();
        result
    }

    /// Reads frames from a stream until EOF, ingesting each.
    pub fn ingest_stream<R: Read>(&self, mut reader: R) -> Result<(), BicError> {
        while let Some(frame) = read_frame(&mut reader)? {
            self.submit(frame)?;
        }
        Ok(())
    }

    /// Blocks until the iteration's S subslots are all present, then returns
    /// the union token map. Faults recorded by any reader surface here.
    pub fn collect(
        &self,
        iteration: u64,
        timeout: Duration,
    ) -> Result<BTreeMap<u64, u32>, BicError> {
        let deadline = Instant::now() + timeout;
        let mut st = self.shared.state.lock().unwrap();
        loop {
            if let Some(f) = &st.fault {
                return Err(BicError::CollectorFault(f.clone()));
            }
            if let Some(map) = st.ring.take(iteration) {
                return Ok(map);
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(BicError::Timeout(iteration));
            }
            let (guard, _) = self
                .shared
                .cond
                .wait_timeout(st, deadline - now)
                .unwrap();
            st = guard;
        }
    }

    /// Last recorded protocol fault, if any.
    pub fn fault(&self) -> Option<String> {
        self.shared.state.lock().unwrap().fault.clone()
    }
}

/// TCP front end for the collector: accepts sampler connections and feeds
/// every frame into the shared state.
pub struct BicoServer {
    collector: BicoCollector,
    addr: std::net::SocketAddr,
    stop: Arc<AtomicBool>,
    accept_handle: Option<std::thread::JoinHandle<()>>,
}

impl BicoServer {
    pub fn start(s: u16) -> Result<BicoServer, BicError> {
        let listener = std::net::TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let collector = BicoCollector::new(s);
        let stop = Arc::new(AtomicBool::new(false));
        let accept_collector = collector.clone();
        let accept_stop = stop.clone();
        let accept_handle = std::thread::Builder::new()
            .name("bico-accept".into())
            .spawn(move || {
                let readers: Arc<Mutex<Vec<std::thread::JoinHandle<()>>>> =
                    Arc::new(Mutex::new(Vec::new()));
                for conn in listener.incoming() {
                    if accept_stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(conn) = conn else { break };
                    let c = accept_collector.clone();
                    let h = std::thread::Builder::new()
                        .name("bico-reader".into())
                        .spawn(move || {
                            // A protocol fault is already recorded in shared
                            // state; transport errors end the connection.
                            let _ = c.ingest_stream(conn);
                        })
                        .expect("spawn reader");
                    readers.lock().unwrap().push(h);
                }
                for h in readers.lock().unwrap().drain(..) {
                    let _ = h.join();
                }
            })
            .expect("spawn acceptor");
        Ok(BicoServer { collector, addr, stop, accept_handle: Some(accept_handle) })
    }

    pub fn addr(&self) -> std::net::SocketAddr {
        self.addr
    }

    pub fn collector(&self) -> BicoCollector {
        self.collector.clone()
    }

    /// Stops accepting and joins the accept thread. Senders must have closed
    /// their connections already.
    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Nudge the accept loop out of its blocking accept.
        let _ = std::net::TcpStream::connect(self.addr);
        if let Some(h) = self.accept_handle.take() {
            let _ = h.join();
        }
    }
}

// ─── Tests ───────────────────────────────────────────────────────────────
