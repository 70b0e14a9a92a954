//! Token-safe execution: indicator-guarded double buffering between input
//! preparation and forward execution.
//!
//! Two finite-state machines share an [`ExecState`]: a CPU executor that
//! turns scheduling outputs into model input buffers, and a GPU executor
//! that consumes input descriptors and runs the (simulated) forward pass.
//! Coordination is two iteration indicators, CI and GI, both starting at -1:
//!
//! - the CPU executor prepares iteration i = CI+1 only when CI == GI, writes
//!   input buffer version i mod 2, enqueues a descriptor carrying a checksum
//!   of the written bytes, then advances CI;
//! - the GPU executor increments GI immediately after accepting a
//!   descriptor, reads the buffer version its descriptor names (GI mod 2),
//!   and validates the checksum at read start and again at read end, with
//!   the forward pass running between the two reads.
//!
//! Why this is safe: the CPU writes version (CI+1) mod 2 only while
//! CI == GI, and the GPU reads version GI mod 2, so the version under write
//! always differs from the version under read. Disabling the guard (a test
//! mode) lets the preparer lap the reader; the double checksum read then
//! reports the write-after-read hazard instead of letting it pass silently.
//!
//! Each of the p microbatch identities keeps a precomputed batch-metadata
//! slot; a slot whose membership is unchanged from p iterations ago is
//! reused rather than rebuilt, and both outcomes are counted.
//!
//! Shutdown travels in-band: a scheduling output with batch_size 0 is a
//! poison control frame that halts the CPU executor and is forwarded so the
//! GPU executor halts too.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicI64, AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use thiserror::Error;

use crate::rng;

// ─── Types ───────────────────────────────────────────────────────────────

/// One sequence's slice of a scheduling output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MicrobatchEntry {
    pub seq_id: u64,
    pub new_tokens: u32,
    pub params_digest: u64,
}

/// What the scheduler broadcasts for one iteration. `batch_size` 0 marks a
/// poison control frame used for shutdown.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchedulingOutput {
    pub iteration: u64,
    pub microbatch: Vec<MicrobatchEntry>,
    pub batch_size: u32,
}

impl SchedulingOutput {
    pub fn new(iteration: u64, microbatch: Vec<MicrobatchEntry>) -> Self {
        let batch_size = microbatch.len() as u32;
        SchedulingOutput { iteration, microbatch, batch_size }
    }

    /// Shutdown control frame.
    pub fn poison(iteration: u64) -> Self {
        SchedulingOutput { iteration, microbatch: Vec::new(), batch_size: 0 }
    }

    pub fn is_poison(&self) -> bool {
        self.batch_size == 0
    }

    pub fn validate(&self) -> Result<(), TsemError> {
        if !self.is_poison() && self.batch_size as usize != self.microbatch.len() {
            return Err(TsemError::BadSchedule(format!(
                "batch_size {} != {} entries",
                self.batch_size,
                self.microbatch.len()
            )));
        }
        Ok(())
    }
}

/// Lightweight handle from preparer to executor; the buffer itself stays in
/// place.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelInputDescriptor {
    pub iteration: u64,
    pub batch_size: u32,
    pub buffer_version: u8,
    /// FNV-1a over the buffer bytes at write time.
    pub checksum: u64,
}

impl ModelInputDescriptor {
    fn poison(iteration: u64) -> Self {
        ModelInputDescriptor { iteration, batch_size: 0, buffer_version: 0, checksum: 0 }
    }

    fn is_poison(&self) -> bool {
        self.batch_size == 0
    }
}

/// Identity of a captured execution graph: one per (buffer version,
/// supported batch bucket).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct GraphKey {
    pub version: u8,
    pub batch_size: u32,
}

/// Cached per-sequence metadata maintained by the CPU executor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CachedSeq {
    pub length: u64,
    pub digest: u64,
}

#[derive(Debug, Error)]
pub enum TsemError {
    #[error("write-after-read hazard on iteration {iteration} ({} read)", if *.at_end { "end" } else { "start" })]
    WarHazard { iteration: u64, at_end: bool },
    #[error("iteration {got} out of order (expected {expected})")]
    IterationOrder { expected: u64, got: u64 },
    #[error("descriptor for iteration {iteration} names buffer version {version}")]
    DescriptorParity { iteration: u64, version: u8 },
    #[error("no captured graph bucket fits batch size {0}")]
    GraphMissing(u32),
    #[error("invalid scheduling output: {0}")]
    BadSchedule(String),
}

/// Why a step made no progress.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdleReason {
    /// CPU executor waiting for GI to catch up to CI.
    GuardHeld,
    /// Nothing queued.
    NoInput,
    /// Downstream queue full.
    Backpressure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CpuOutcome {
    Progressed { iteration: u64 },
    Idle(IdleReason),
    Halted,
}

#[derive(Debug)]
pub enum GpuOutcome {
    Progressed(GpuProgress),
    Idle(IdleReason),
    Halted,
}

/// One executed iteration's result, handed to the caller (the communicator).
#[derive(Debug)]
pub struct GpuProgress {
    pub iteration: u64,
    pub graph: GraphKey,
    pub payload: Vec<u8>,
}

/// Monotonic counters exposed for tests and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TsemCounters {
    pub cpu_iterations: u64,
    pub gpu_iterations: u64,
    pub metadata_rebuilds: u64,
    pub metadata_reuses: u64,
    pub war_faults: u64,
}

// ─── Configuration ───────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct TsemConfig {
    /// p: microbatch identities in flight; also the batch-metadata slot count.
    pub replica_slots: usize,
    /// Scheduling queue bound (default: replica_slots).
    pub sched_queue_cap: usize,
    /// Input descriptor queue bound (default 1: one prepared iteration in
    /// flight; raised only by fault-injection harnesses).
    pub input_queue_cap: usize,
    /// The CI == GI preparation guard. Disabled only to demonstrate that the
    /// checksum detector catches the resulting hazards.
    pub guard_enabled: bool,
    /// Captured-graph batch buckets, ascending; a batch selects the smallest
    /// bucket that fits.
    pub graph_buckets: Vec<u32>,
}

impl TsemConfig {
    pub fn for_replicas(p: usize) -> Self {
        assert!(p >= 1, "need at least one replica slot");
        TsemConfig {
            replica_slots: p,
            sched_queue_cap: p,
            input_queue_cap: 1,
            guard_enabled: true,
            graph_buckets: (0..=10).map(|e| 1u32 << e).collect(),
        }
    }
}

// ─── Execution state ─────────────────────────────────────────────────────

#[derive(Default)]
struct MetadataSlot {
    members: Vec<u64>,
    built_for: u64,
    built: bool,
}

/// Shared state between the two executors. CI is written only by the CPU
/// executor, GI only by the GPU executor; both are sequentially consistent
/// atomics. Buffers are parity-partitioned by the indicator guards.
pub struct ExecState {
    config: TsemConfig,
    ci: AtomicI64,
    gi: AtomicI64,
    buffers: [Mutex<Vec<u8>>; 2],
    sched_queue: Mutex<VecDeque<SchedulingOutput>>,
    input_queue: Mutex<VecDeque<ModelInputDescriptor>>,
    sequence_cache: Mutex<HashMap<u64, CachedSeq>>,
    batch_metadata: Mutex<Vec<MetadataSlot>>,
    graph_use: Mutex<BTreeMap<GraphKey, u64>>,
    cpu_halted: AtomicBool,
    gpu_halted: AtomicBool,
    cpu_iterations: AtomicU64,
    gpu_iterations: AtomicU64,
    metadata_rebuilds: AtomicU64,
    metadata_reuses: AtomicU64,
    war_faults: AtomicU64,
}

impl ExecState {
    pub fn new(config: TsemConfig) -> Self {
        assert!(config.replica_slots >= 1);
        assert!(config.sched_queue_cap >= 1);
        assert!(config.input_queue_cap >= 1);
        let slots = (0..config.replica_slots).map(|_| MetadataSlot::default()).collect();
        ExecState {
            config,
            ci: AtomicI64::new(-1),
            gi: AtomicI64::new(-1),
            buffers: [Mutex::new(Vec::new()), Mutex::new(Vec::new())],
            sched_queue: Mutex::new(VecDeque::new()),
            input_queue: Mutex::new(VecDeque::new()),
            sequence_cache: Mutex::new(HashMap::new()),
            batch_metadata: Mutex::new(slots),
            graph_use: Mutex::new(BTreeMap::new()),
            cpu_halted: AtomicBool::new(false),
            gpu_halted: AtomicBool::new(false),
            cpu_iterations: AtomicU64::new(0),
            gpu_iterations: AtomicU64::new(0),
            metadata_rebuilds: AtomicU64::new(0),
            metadata_reuses: AtomicU64::new(0),
            war_faults: AtomicU64::new(0),
        }
    }

    pub fn config(&self) -> &TsemConfig {
        &self.config
    }

    /// (CI, GI) snapshot.
    pub fn indicators(&self) -> (i64, i64) {
        (self.ci.load(Ordering::SeqCst), self.gi.load(Ordering::SeqCst))
    }

    pub fn counters(&self) -> TsemCounters {
        TsemCounters {
            cpu_iterations: self.cpu_iterations.load(Ordering::SeqCst),
            gpu_iterations: self.gpu_iterations.load(Ordering::SeqCst),
            metadata_rebuilds: self.metadata_rebuilds.load(Ordering::SeqCst),
            metadata_reuses: self.metadata_reuses.load(Ordering::SeqCst),
            war_faults: self.war_faults.load(Ordering::SeqCst),
        }
    }

    pub fn is_halted(&self) -> bool {
        self.cpu_halted.load(Ordering::SeqCst) && self.gpu_halted.load(Ordering::SeqCst)
    }

    /// Per-graph execution counts.
    pub fn graph_use(&self) -> BTreeMap<GraphKey, u64> {
        self.graph_use.lock().unwrap().clone()
    }

    pub fn cached(&self, seq_id: u64) -> Option<CachedSeq> {
        self.sequence_cache.lock().unwrap().get(&seq_id).copied()
    }

    /// Test/diagnostic access to a buffer's current bytes.
    pub fn buffer_bytes(&self, version: u8) -> Vec<u8> {
        self.buffers[version as usize % 2].lock().unwrap().clone()
    }

    /// Offers one scheduling output; false when the bounded queue is full.
    pub fn enqueue_scheduling(&self, out: SchedulingOutput) -> Result<bool, TsemError> {
        out.validate()?;
        let mut q = self.sched_queue.lock().unwrap();
        if q.len() >= self.config.sched_queue_cap {
            return Ok(false);
        }
        q.push_back(out);
        Ok(true)
    }

    /// One CPU executor step. `build_input` turns the consumed scheduling
    /// output plus the updated sequence cache into the raw input bytes for
    /// this iteration.
    pub fn cpu_step<F>(&self, build_input: F) -> Result<CpuOutcome, TsemError>
    where
        F: FnOnce(&SchedulingOutput, &HashMap<u64, CachedSeq>) -> Vec<u8>,
    {
        if self.cpu_halted.load(Ordering::SeqCst) {
            return Ok(CpuOutcome::Halted);
        }
        let ci = self.ci.load(Ordering::SeqCst);
        if self.config.guard_enabled && ci != self.gi.load(Ordering::SeqCst) {
            return Ok(CpuOutcome::Idle(IdleReason::GuardHeld));
        }
        // Claim the scheduling output only if the descriptor will fit.
        let sched = {
            let mut sq = self.sched_queue.lock().unwrap();
            if sq.is_empty() {
                return Ok(CpuOutcome::Idle(IdleReason::NoInput));
            }
            if self.input_queue.lock().unwrap().len() >= self.config.input_queue_cap {
                return Ok(CpuOutcome::Idle(IdleReason::Backpressure));
            }
            sq.pop_front().unwrap()
        };

        if sched.is_poison() {
            self.input_queue
                .lock()
                .unwrap()
                .push_back(ModelInputDescriptor::poison(sched.iteration));
            self.cpu_halted.store(true, Ordering::SeqCst);
            return Ok(CpuOutcome::Halted);
        }

        let iteration = (ci + 1) as u64;
        if sched.iteration != iteration {
            return Err(TsemError::IterationOrder { expected: iteration, got: sched.iteration });
        }

        // Sequence cache update.
        {
            let mut cache = self.sequence_cache.lock().unwrap();
            for e in &sched.microbatch {
                let c = cache.entry(e.seq_id).or_default();
                c.length += e.new_tokens as u64;
                c.digest = rng::mix64(c.digest ^ rng::mix64(e.params_digest) ^ iteration);
            }
        }

        // Batch metadata: reuse the slot when membership is unchanged.
        {
            let mut slots = self.batch_metadata.lock().unwrap();
            let idx = (iteration as usize) % self.config.replica_slots;
            let slot = &mut slots[idx];
            let members: Vec<u64> = sched.microbatch.iter().map(|e| e.seq_id).collect();
            if slot.built && slot.members == members {
                self.metadata_reuses.fetch_add(1, Ordering::SeqCst);
            } else {
                slot.members = members;
                slot.built = true;
                self.metadata_rebuilds.fetch_add(1, Ordering::SeqCst);
            }
            slot.built_for = iteration;
        }

        let bytes = {
            let cache = self.sequence_cache.lock().unwrap();
            build_input(&sched, &cache)
        };
        let checksum = rng::fnv1a(&bytes);
        let version = (iteration % 2) as u8;
        *self.buffers[version as usize].lock().unwrap() = bytes;

        self.input_queue.lock().unwrap().push_back(ModelInputDescriptor {
            iteration,
            batch_size: sched.batch_size,
            buffer_version: version,
            checksum,
        });
        // Indicator advance marks the step boundary; it must follow the
        // buffer write and descriptor enqueue.
        self.ci.store(iteration as i64, Ordering::SeqCst);
        self.cpu_iterations.fetch_add(1, Ordering::SeqCst);
        Ok(CpuOutcome::Progressed { iteration })
    }

    /// One GPU executor step. `forward` maps (buffer bytes, descriptor) to
    /// the stage output payload; it runs between the two checksum reads, so
    /// a preparer overwriting the buffer mid-flight is detected.
    pub fn gpu_step<F>(&self, forward: F) -> Result<GpuOutcome, TsemError>
    where
        F: FnOnce(&[u8], &ModelInputDescriptor) -> Vec<u8>,
    {
        if self.gpu_halted.load(Ordering::SeqCst) {
            return Ok(GpuOutcome::Halted);
        }
        let desc = {
            let mut q = self.input_queue.lock().unwrap();
            match q.pop_front() {
                Some(d) => d,
                None => return Ok(GpuOutcome::Idle(IdleReason::NoInput)),
            }
        };
        if desc.is_poison() {
            self.gpu_halted.store(true, Ordering::SeqCst);
            return Ok(GpuOutcome::Halted);
        }
        // GI advances immediately on entry; the parity proof depends on the
        // increment preceding the buffer read.
        let gi = self.gi.fetch_add(1, Ordering::SeqCst) + 1;
        if desc.iteration != gi as u64 {
            return Err(TsemError::IterationOrder { expected: gi as u64, got: desc.iteration });
        }
        if desc.buffer_version != (gi % 2) as u8 {
            return Err(TsemError::DescriptorParity {
                iteration: desc.iteration,
                version: desc.buffer_version,
            });
        }
        let graph = self.select_graph(desc.buffer_version, desc.batch_size)?;

        let bytes = {
            let buf = self.buffers[desc.buffer_version as usize].lock().unwrap();
            let start_sum = rng::fnv1a(&buf);
            if start_sum != desc.checksum {
                drop(buf);
                self.war_faults.fetch_add(1, Ordering::SeqCst);
                return Err(TsemError::WarHazard { iteration: desc.iteration, at_end: false });
            }
            buf.clone()
        };

        let payload = forward(&bytes, &desc);

        let end_sum = rng::fnv1a(&self.buffers[desc.buffer_version as usize].lock().unwrap());
        if end_sum != desc.checksum {
            self.war_faults.fetch_add(1, Ordering::SeqCst);
            return Err(TsemError::WarHazard { iteration: desc.iteration, at_end: true });
        }

        self.gpu_iterations.fetch_add(1, Ordering::SeqCst);
        Ok(GpuOutcome::Progressed(GpuProgress { iteration: desc.iteration, graph, payload }))
    }

    /// Smallest captured bucket that fits the batch; batches between buckets
    /// pad up.
    fn select_graph(&self, version: u8, batch_size: u32) -> Result<GraphKey, TsemError> {
        let bucket = self
            .config
            .graph_buckets
            .iter()
            .copied()
            .find(|&b| b >= batch_size)
            .ok_or(TsemError::GraphMissing(batch_size))?;
        let key = GraphKey { version, batch_size: bucket };
        *self.graph_use.lock().unwrap().entry(key).or_insert(0) += 1;
        Ok(key)
    }
}

// ─── Simulated forward ───────────────────────────────────────────────────

/// Stands in for the device forward pass: sleeps the modeled duration, then
/// emits a payload of batch_size x hidden 8-byte words derived from a digest
/// of the input bytes and the stage id. Any flipped input byte changes every
/// output word.
pub fn simulated_forward(
    input: &[u8],
    stage_id: u32,
    batch_size: u32,
    hidden: u32,
    delay: Duration,
) -> Vec<u8> {
    if !delay.is_zero() {
        std::thread::sleep(delay);
    }
    let key = rng::fnv1a(input) ^ rng::mix64(0x57A6_E000_0000_0000 | stage_id as u64);
    let words = batch_size as u64 * hidden as u64;
    let mut out = Vec::with_capacity((words * 8) as usize);
    for i in 0..words {
        out.extend_from_slice(&rng::counter_u64(key, i).to_le_bytes());
    }
    out
}

// ─── Tests ───────────────────────────────────────────────────────────────
