//! Decode-pipeline simulator: a round-robin scheduler feeding p simulated
//! worker stages, with sampling either inline at the last stage or offloaded
//! to a CPU worker pool, plus the bubble-accounting instrumentation used to
//! compare the two arrangements.
//!
//! The data plane is real: scheduling outputs travel through a broadcast
//! ring ([`crate::bic::RingChannel`]), every stage runs its two-executor
//! state machine ([`crate::tsem::ExecState`]), hidden payloads hop between
//! stages over tensor transport sessions ([`crate::sat`]), final-stage
//! logits ride a second ring, and drawn tokens return through the combine
//! framing ([`crate::bic::BicoFrame`]). The "model" is a per-stage digest
//! chain over those bytes, so any torn, misrouted, or stale payload changes
//! the tokens.
//!
//! Two engines drive the same plumbing:
//! - [`run`] (and [`run_with_features`]): a single-threaded engine that
//!   executes the data plane in dependency order and assigns every event a
//!   virtual timestamp from the configured delay model. Timestamps are exact
//!   and reruns are byte-identical, which makes it the instrumentation-grade
//!   path for bubble accounting and A/B ratios.
//! - [`run_threaded`]: real threads per stage plus a sampler pool over
//!   loopback TCP, used to check liveness and that the transcript does not
//!   depend on interleaving. Its timestamps come from the process monotonic
//!   clock and carry scheduler noise.
//!
//! Tokens are engine- and feature-invariant: both engines, every feature
//! combination, and the flat reference runner ([`run_oracle`]) produce the
//! same transcript for a given config and seed. Only timing differs.

use std::collections::{BTreeMap, VecDeque};
use std::io::Cursor;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bic::{self, BicError, BicoFrame, BicoState, RingChannel};
use crate::oracle;
use crate::rng;
use crate::sampler::{
    apply_penalties, draw_column, filter, sample, temperature_softmax, LogitsMatrix, SamplerError,
    SamplerReplica, SamplingParams,
};
use crate::sat::{self, Counting, PipeEnd, SatError, SatMessage, Tensor, TensorDict};
use crate::tsem::{
    CpuOutcome, ExecState, GpuOutcome, MicrobatchEntry, SchedulingOutput, TsemConfig, TsemCounters,
    TsemError,
};

// ─── Configuration ───────────────────────────────────────────────────────

/// Which end-to-end arrangement to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Synchronous prep, sampling inside the final stage's critical path,
    /// structure-unaware transmission by default.
    Baseline,
    /// Overlapped prep, CPU sampler pool, structure-aware transmission by
    /// default.
    Optimized,
}

impl Mode {
    pub fn label(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Optimized => "optimized",
        }
    }
}

/// Transmission protocol preference for the stage-to-stage hops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SatMode {
    Aware,
    Unaware,
}

impl SatMode {
    pub fn label(self) -> &'static str {
        match self {
            SatMode::Aware => "aware",
            SatMode::Unaware => "unaware",
        }
    }
}

/// Simulated cost model, all in milliseconds. `forward_ms` holds either one
/// entry (every stage equal) or one entry per stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DelayModel {
    pub forward_ms: Vec<f64>,
    /// Symmetric relative jitter on each (stage, iteration) forward, in
    /// [0, 1); drawn deterministically from the run seed.
    pub forward_jitter_pct: f64,
    pub prep_ms: f64,
    /// Sampling cost for one microbatch; the pool divides it by S.
    pub sampling_ms: f64,
    /// One metadata round trip in the unaware receive path (charged twice).
    pub meta_round_ms: f64,
    /// Wire time for one hidden payload hop.
    pub hop_payload_ms: f64,
    /// Wire time for the final-stage logits push to the pool.
    pub logits_payload_ms: f64,
    /// Scheduler work per dispatched iteration.
    pub sched_ms: f64,
    /// Combine-side merge cost per iteration.
    pub combine_ms: f64,
}

impl Default for DelayModel {
    fn default() -> Self {
        DelayModel {
            forward_ms: vec![1.0],
            forward_jitter_pct: 0.0,
            prep_ms: 0.15,
            sampling_ms: 0.3,
            meta_round_ms: 0.04,
            hop_payload_ms: 0.01,
            logits_payload_ms: 0.015,
            sched_ms: 0.002,
            combine_ms: 0.002,
        }
    }
}

/// Full run description. Defaults give a desk-scale smoke configuration;
/// bundled profiles override every field.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Pipeline depth p.
    pub stages: usize,
    /// Tensor-parallel degree t; recorded in manifests and used by the
    /// analytic predictions, not by the simulation itself.
    pub tensor_parallel: usize,
    /// Global batch b; split into p microbatches of ceil(b/p) columns, the
    /// last padded with idle columns when p does not divide b.
    pub batch: usize,
    pub vocab: usize,
    /// Sampler pool width S.
    pub samplers: usize,
    /// Decode iterations to dispatch.
    pub iterations: u64,
    pub seed: u64,
    pub mode: Mode,
    pub sat: SatMode,
    /// Synthetic request supply; the first `batch` fill the columns, the
    /// rest queue for backfill as sequences finish.
    pub total_sequences: usize,
    /// Tokens each sequence generates before its column is recycled.
    pub max_new_tokens: u32,
    /// Synthetic prompt length.
    pub prompt_len: usize,
    /// Bytes of hidden payload per stage hop (padded digest carrier).
    pub hidden_payload_bytes: usize,
    pub delays: DelayModel,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            stages: 4,
            tensor_parallel: 1,
            batch: 8,
            vocab: 256,
            samplers: 2,
            iterations: 64,
            seed: 7,
            mode: Mode::Optimized,
            sat: SatMode::Aware,
            total_sequences: 16,
            max_new_tokens: 8,
            prompt_len: 5,
            hidden_payload_bytes: 4096,
            delays: DelayModel::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.stages == 0 {
            return bad("stages must be >= 1".into());
        }
        if self.tensor_parallel == 0 {
            return bad("tensor_parallel must be >= 1".into());
        }
        if self.batch == 0 {
            return bad("batch must be >= 1".into());
        }
        if self.vocab < 2 {
            return bad("vocab must be >= 2".into());
        }
        if self.samplers == 0 {
            return bad("samplers must be >= 1".into());
        }
        if self.max_new_tokens == 0 {
            return bad("max_new_tokens must be >= 1".into());
        }
        // ceil(b/p) columns per microbatch: padding may idle trailing
        // columns of the last microbatch, but a fully empty microbatch
        // would be indistinguishable from a drained supply.
        if self.stages > 1 && (self.stages - 1) * self.microbatch() >= self.batch {
            return bad(format!(
                "batch {} leaves the last of {} microbatches of {} columns empty",
                self.batch,
                self.stages,
                self.microbatch()
            ));
        }
        let d = &self.delays;
        if d.forward_ms.len() != 1 && d.forward_ms.len() != self.stages {
            return bad(format!(
                "forward_ms needs 1 or {} entries, got {}",
                self.stages,
                d.forward_ms.len()
            ));
        }
        let all = [
            d.prep_ms,
            d.sampling_ms,
            d.meta_round_ms,
            d.hop_payload_ms,
            d.logits_payload_ms,
            d.sched_ms,
            d.combine_ms,
        ];
        if d.forward_ms.iter().chain(all.iter()).any(|x| !x.is_finite() || *x < 0.0) {
            return bad("delays must be finite and nonnegative".into());
        }
        if !(0.0..1.0).contains(&d.forward_jitter_pct) {
            return bad("forward_jitter_pct must be in [0, 1)".into());
        }
        Ok(())
    }

    /// Columns per microbatch: ceil(b/p). With p not dividing b the trailing
    /// columns of the last microbatch stay idle (padding).
    pub fn microbatch(&self) -> usize {
        self.batch.div_ceil(self.stages)
    }

    /// Feature set implied by mode and transmission preference.
    pub fn features(&self) -> Features {
        Features {
            pool_sampling: self.mode == Mode::Optimized,
            overlapped_prep: self.mode == Mode::Optimized,
            aware_transmission: self.sat == SatMode::Aware,
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self, PipelineError> {
        let cfg: PipelineConfig =
            toml::from_str(s).map_err(|e| PipelineError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(s: &str) -> Result<Self, PipelineError> {
        let cfg: PipelineConfig =
            serde_json::from_str(s).map_err(|e| PipelineError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// The three independently toggleable design features. [`run_with_features`]
/// accepts any combination; [`PipelineConfig::features`] maps the two public
/// modes onto it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Features {
    /// Sampling in the CPU pool instead of inside the final stage's forward.
    pub pool_sampling: bool,
    /// Prepare iteration n+1 while n executes instead of serializing.
    pub overlapped_prep: bool,
    /// Structure-aware hops (pre-posted receives) instead of per-frame
    /// metadata rounds.
    pub aware_transmission: bool,
}

impl Features {
    pub fn all_off() -> Features {
        Features { pool_sampling: false, overlapped_prep: false, aware_transmission: false }
    }

    pub fn all_on() -> Features {
        Features { pool_sampling: true, overlapped_prep: true, aware_transmission: true }
    }
}

// ─── Errors ──────────────────────────────────────────────────────────────

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("config parse: {0}")]
    Parse(String),
    #[error("stage {stage} iteration {iteration}: {detail}")]
    Stage { stage: usize, iteration: u64, detail: String },
    #[error("sampler pool iteration {iteration}: {detail}")]
    Pool { iteration: u64, detail: String },
    #[error("scheduler: {0}")]
    Scheduler(String),
    #[error("timeline: {0}")]
    Timeline(String),
    #[error("worker thread failure: {0}")]
    Thread(String),
    #[error(transparent)]
    Tsem(#[from] TsemError),
    #[error(transparent)]
    Sat(#[from] SatError),
    #[error(transparent)]
    Bic(#[from] BicError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
}

fn stage_err(stage: usize, iteration: u64, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Stage { stage, iteration, detail: e.to_string() }
}

fn pool_err(iteration: u64, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Pool { iteration, detail: e.to_string() }
}

// ─── Wire schema ─────────────────────────────────────────────────────────

// Key-derivation tags for the run's deterministic streams.
const TAG_PROMPT: u64 = 0x70_72_6f_6d_70_74; // prompt tokens
const TAG_SEQ_SEED: u64 = 0x73_65_65_64; // per-sequence draw seed
const TAG_JITTER: u64 = 0x6a_69_74; // forward jitter
const TAG_STAGE: u64 = 0x73_74_61_67_65; // hidden-chain stage salt

/// Per-sequence sampling controls in wire form (mirrors
/// [`SamplingParams`] field for field; kept separate so the wire schema is
/// explicit and serializable).
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct WireParams {
    pub temperature: f64,
    pub top_k: Option<usize>,
    pub top_p: Option<f64>,
    pub min_p: Option<f64>,
    pub alpha_freq: f64,
    pub alpha_pres: f64,
    pub alpha_rep: f64,
    pub seed: u64,
}

impl From<SamplingParams> for WireParams {
    fn from(p: SamplingParams) -> Self {
        WireParams {
            temperature: p.temperature,
            top_k: p.top_k,
            top_p: p.top_p,
            min_p: p.min_p,
            alpha_freq: p.alpha_freq,
            alpha_pres: p.alpha_pres,
            alpha_rep: p.alpha_rep,
            seed: p.seed,
        }
    }
}

impl From<WireParams> for SamplingParams {
    fn from(p: WireParams) -> Self {
        SamplingParams {
            temperature: p.temperature,
            top_k: p.top_k,
            top_p: p.top_p,
            min_p: p.min_p,
            alpha_freq: p.alpha_freq,
            alpha_pres: p.alpha_pres,
            alpha_rep: p.alpha_rep,
            seed: p.seed,
        }
    }
}

/// Admission payload carried the first time a sequence appears in a column.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct WireAdmit {
    pub prompt: Vec<u32>,
    pub params: WireParams,
}

/// One occupied column of a scheduling output.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct WireEntry {
    pub seq_id: u64,
    pub column: u32,
    /// Rolling digest of the sequence identity and its accepted tokens; the
    /// final stage folds it into that column's logits.
    pub hist_digest: u64,
    pub generated: u32,
    pub params_digest: u64,
    pub admit: Option<WireAdmit>,
}

/// The scheduler's broadcast frame for one iteration, serialized as JSON
/// onto the input ring. Entry order is ascending column.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SchedulingWire {
    pub iteration: u64,
    pub microbatch_index: u32,
    pub poison: bool,
    pub entries: Vec<WireEntry>,
}

impl SchedulingWire {
    fn poison(iteration: u64, p: usize) -> Self {
        SchedulingWire {
            iteration,
            microbatch_index: (iteration % p as u64) as u32,
            poison: true,
            entries: Vec::new(),
        }
    }

    fn encode(&self) -> Result<Vec<u8>, PipelineError> {
        serde_json::to_vec(self).map_err(|e| PipelineError::Scheduler(e.to_string()))
    }

    fn decode(bytes: &[u8]) -> Result<Self, PipelineError> {
        serde_json::from_slice(bytes).map_err(|e| PipelineError::Scheduler(e.to_string()))
    }
}

/// Stable digest of a parameter set, LE field bits in declaration order.
fn params_digest(p: &SamplingParams) -> u64 {
    let mut bytes = Vec::with_capacity(64);
    bytes.extend_from_slice(&p.temperature.to_bits().to_le_bytes());
    let opt_usize = |b: &mut Vec<u8>, o: Option<usize>| match o {
        Some(v) => {
            b.push(1);
            b.extend_from_slice(&(v as u64).to_le_bytes());
        }
        None => b.push(0),
    };
    let opt_f64 = |b: &mut Vec<u8>, o: Option<f64>| match o {
        Some(v) => {
            b.push(1);
            b.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        None => b.push(0),
    };
    opt_usize(&mut bytes, p.top_k);
    opt_f64(&mut bytes, p.top_p);
    opt_f64(&mut bytes, p.min_p);
    bytes.extend_from_slice(&p.alpha_freq.to_bits().to_le_bytes());
    bytes.extend_from_slice(&p.alpha_pres.to_bits().to_le_bytes());
    bytes.extend_from_slice(&p.alpha_rep.to_bits().to_le_bytes());
    bytes.extend_from_slice(&p.seed.to_le_bytes());
    rng::fnv1a(&bytes)
}

/// Synthetic prompt for a sequence, deterministic in (seed, seq_id).
fn synth_prompt(root_seed: u64, seq_id: u64, len: usize, vocab: usize) -> Vec<u32> {
    let key = rng::derive_key(root_seed, TAG_PROMPT ^ seq_id);
    (0..len).map(|i| rng::bounded(key, i as u64, vocab as u64) as u32).collect()
}

/// Synthetic per-sequence sampling controls cycling through greedy, nucleus,
/// penalized, and plain-temperature styles so replicas exercise every path.
fn synth_params(root_seed: u64, seq_id: u64) -> SamplingParams {
    let style = (seq_id % 4) as usize;
    SamplingParams {
        temperature: [1.0, 0.7, 0.0, 1.3][style],
        top_k: [None, Some(5), None, Some(3)][style],
        top_p: [None, Some(0.9), Some(0.8), None][style],
        min_p: [None, None, Some(0.05), Some(0.1)][style],
        alpha_freq: [0.0, 0.3, 0.0, 0.7][style],
        alpha_pres: [0.0, 0.1, 0.5, 0.0][style],
        alpha_rep: [0.0, 0.2, 0.0, 0.4][style],
        seed: rng::derive_key(root_seed, TAG_SEQ_SEED ^ seq_id),
    }
}

// ─── Scheduler ───────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
struct SeqTracker {
    prompt: Vec<u32>,
    params: SamplingParams,
    params_digest: u64,
    target: u32,
    generated: u32,
    hist_digest: u64,
    finished: bool,
}

/// Round-robin microbatch scheduler: iteration n serves microbatch n mod p;
/// finished sequences free their column, backfilled from the pending queue
/// the next time that microbatch is scheduled.
pub struct Scheduler {
    p: usize,
    mb: usize,
    batch: usize,
    slots: Vec<Vec<Option<u64>>>,
    pending: VecDeque<u64>,
    seqs: BTreeMap<u64, SeqTracker>,
}

impl Scheduler {
    pub fn new(cfg: &PipelineConfig) -> Scheduler {
        let mut seqs = BTreeMap::new();
        let mut pending = VecDeque::new();
        for id in 0..cfg.total_sequences as u64 {
            let prompt = synth_prompt(cfg.seed, id, cfg.prompt_len, cfg.vocab);
            let params = synth_params(cfg.seed, id);
            let digest = params_digest(&params);
            let hist = rng::derive_key(rng::fnv1a(&prompt_bytes(&prompt)), id);
            seqs.insert(
                id,
                SeqTracker {
                    prompt,
                    params,
                    params_digest: digest,
                    target: cfg.max_new_tokens,
                    generated: 0,
                    hist_digest: hist,
                    finished: false,
                },
            );
            pending.push_back(id);
        }
        Scheduler {
            p: cfg.stages,
            mb: cfg.microbatch(),
            batch: cfg.batch,
            slots: vec![vec![None; cfg.microbatch()]; cfg.stages],
            pending,
            seqs,
        }
    }

    fn prompt_of(&self, seq: u64) -> &[u32] {
        &self.seqs[&seq].prompt
    }

    fn params_of(&self, seq: u64) -> SamplingParams {
        self.seqs[&seq].params
    }

    /// Builds iteration n's scheduling output: evicts finished occupants of
    /// microbatch n mod p, admits queued sequences into the freed columns,
    /// and snapshots each occupant's digest. An output with no entries means
    /// the supply is exhausted for this microbatch.
    pub fn schedule(&mut self, iteration: u64) -> SchedulingWire {
        let m = (iteration % self.p as u64) as usize;
        let mut entries = Vec::new();
        // Capped to the global batch so a padded last microbatch keeps its
        // trailing columns idle instead of admitting extra work.
        let limit = self.column_limit(m);
        for c in 0..self.mb {
            if c >= limit {
                break;
            }
            if let Some(id) = self.slots[m][c] {
                if self.seqs[&id].finished {
                    self.slots[m][c] = None;
                }
            }
            let mut admit = None;
            if self.slots[m][c].is_none() {
                if let Some(id) = self.pending.pop_front() {
                    self.slots[m][c] = Some(id);
                    let t = &self.seqs[&id];
                    admit = Some(WireAdmit { prompt: t.prompt.clone(), params: t.params.into() });
                }
            }
            if let Some(id) = self.slots[m][c] {
                let t = &self.seqs[&id];
                entries.push(WireEntry {
                    seq_id: id,
                    column: c as u32,
                    hist_digest: t.hist_digest,
                    generated: t.generated,
                    params_digest: t.params_digest,
                    admit,
                });
            }
        }
        SchedulingWire { iteration, microbatch_index: m as u32, poison: false, entries }
    }

    /// Columns of microbatch m backed by the global batch (padding rule).
    fn column_limit(&self, m: usize) -> usize {
        let before = m * self.mb;
        self.mb.min(self.batch.saturating_sub(before))
    }

    /// Applies one iteration's combined sampling output.
    pub fn apply(&mut self, map: &BTreeMap<u64, u32>) {
        for (&seq, &tok) in map {
            let t = self.seqs.get_mut(&seq).expect("combined token for unknown sequence");
            t.generated += 1;
            t.hist_digest = rng::mix64(t.hist_digest ^ rng::mix64(tok as u64 + 1));
            if t.generated >= t.target {
                t.finished = true;
            }
        }
    }

    pub fn finished_count(&self) -> u64 {
        self.seqs.values().filter(|t| t.finished).count() as u64
    }
}

fn prompt_bytes(prompt: &[u32]) -> Vec<u8> {
    let mut b = Vec::with_capacity(prompt.len() * 4);
    for &t in prompt {
        b.extend_from_slice(&t.to_le_bytes());
    }
    b
}

// ─── Timeline and bubbles ────────────────────────────────────────────────

/// One stage-iteration's event times, seconds on the run's clock (virtual
/// for the deterministic engine, monotonic for the threaded one).
///
/// `input_ready` is when this stage's own input became usable (scheduling
/// output arrival at stage 0, handled hidden payload elsewhere);
/// `send_start`/`send_end` bracket this stage's output push; `recv_ready` is
/// when the downstream consumer had that output usable.
///
/// `send_end` means delivery completion, not wire exit: a layout-blind
/// receiver accepts a frame only once its previous iteration is done, and
/// the push completes at that acceptance, so a frame sent early sits in the
/// sender's send window rather than inflating the receiver's idle
/// attribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimelineRecord {
    pub stage: usize,
    pub iteration: u64,
    pub prep_start: f64,
    pub prep_end: f64,
    pub input_ready: f64,
    pub fwd_start: f64,
    pub fwd_end: f64,
    pub send_start: f64,
    pub send_end: f64,
    pub recv_ready: f64,
}

impl TimelineRecord {
    /// The in-record ordering that must hold everywhere.
    pub fn check_monotonic(&self) -> Result<(), PipelineError> {
        let chain = [self.prep_start, self.prep_end, self.fwd_start, self.fwd_end, self.send_end];
        if chain.windows(2).any(|w| w[0] > w[1]) {
            return Err(PipelineError::Timeline(format!(
                "stage {} iteration {} violates prep<=fwd<=send ordering",
                self.stage, self.iteration
            )));
        }
        Ok(())
    }
}

/// Aggregated idle-time attribution for one stage.
///
/// Operational definitions, per iteration and clamped at zero, skipping each
/// stage's first recorded iteration (no predecessor):
/// - `intra_stage` = fwd_start − max(previous fwd_end, input_ready): the
///   stage's own dead time before launching on input it already had
///   (serialized prep shows up here).
/// - `inter_stage` = input_ready − upstream send_end: transmission exposure
///   past the sender's delivery completion (metadata handling shows up
///   here). Zero for stage 0, which has no upstream. A sender-stall term
///   would belong here too, but both engines push into buffered transports
///   that never block the sender's compute lane, so it is identically zero
///   and not recorded.
/// - `load_imbalance` = max over stages of busy(n) minus own busy(n), where
///   busy = fwd_end − fwd_start (inline sampling counts as busy time for the
///   stage that performs it).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BubbleReport {
    pub stage: usize,
    /// Span between the first and last aggregated forward completions.
    pub wall_s: f64,
    pub busy_s: f64,
    pub load_imbalance_s: f64,
    pub intra_stage_s: f64,
    pub inter_stage_s: f64,
}

impl BubbleReport {
    pub fn total_bubble_s(&self) -> f64 {
        self.load_imbalance_s + self.intra_stage_s + self.inter_stage_s
    }

    fn frac(&self, x: f64) -> f64 {
        if self.wall_s > 0.0 {
            x / self.wall_s
        } else {
            0.0
        }
    }

    pub fn load_imbalance_frac(&self) -> f64 {
        self.frac(self.load_imbalance_s)
    }

    pub fn intra_stage_frac(&self) -> f64 {
        self.frac(self.intra_stage_s)
    }

    pub fn inter_stage_frac(&self) -> f64 {
        self.frac(self.inter_stage_s)
    }

    pub fn total_bubble_frac(&self) -> f64 {
        self.frac(self.total_bubble_s())
    }
}

/// Attributes per-stage idle time to the three bubble categories. Requires
/// every stage to cover the same iterations; gaps are a fault.
pub fn bubble_breakdown(records: &[TimelineRecord]) -> Result<Vec<BubbleReport>, PipelineError> {
    if records.is_empty() {
        return Ok(Vec::new());
    }
    let p = records.iter().map(|r| r.stage).max().unwrap() + 1;
    let mut by_stage: Vec<BTreeMap<u64, &TimelineRecord>> = vec![BTreeMap::new(); p];
    for r in records {
        r.check_monotonic()?;
        if by_stage[r.stage].insert(r.iteration, r).is_some() {
            return Err(PipelineError::Timeline(format!(
                "duplicate record for stage {} iteration {}",
                r.stage, r.iteration
            )));
        }
    }
    let iters: Vec<u64> = by_stage[0].keys().copied().collect();
    for (s, m) in by_stage.iter().enumerate() {
        let this: Vec<u64> = m.keys().copied().collect();
        if this != iters {
            return Err(PipelineError::Timeline(format!(
                "stage {} covers different iterations than stage 0",
                s
            )));
        }
    }
    let busy = |r: &TimelineRecord| r.fwd_end - r.fwd_start;
    let mut reports = Vec::with_capacity(p);
    for s in 0..p {
        let mut load = 0.0;
        let mut intra = 0.0;
        let mut inter = 0.0;
        let mut busy_total = 0.0;
        let mut first_end = f64::NAN;
        let mut last_end = f64::NAN;
        for (i, &n) in iters.iter().enumerate() {
            if i == 0 {
                continue;
            }
            let r = by_stage[s][&n];
            let prev = by_stage[s][&iters[i - 1]];
            let max_busy =
                (0..p).map(|u| busy(by_stage[u][&n])).fold(f64::NEG_INFINITY, f64::max);
            load += (max_busy - busy(r)).max(0.0);
            intra += (r.fwd_start - prev.fwd_end.max(r.input_ready)).max(0.0);
            if s > 0 {
                inter += (r.input_ready - by_stage[s - 1][&n].send_end).max(0.0);
            }
            busy_total += busy(r);
            if first_end.is_nan() {
                first_end = prev.fwd_end;
            }
            last_end = r.fwd_end;
        }
        let wall = if first_end.is_nan() { 0.0 } else { last_end - first_end };
        reports.push(BubbleReport {
            stage: s,
            wall_s: wall,
            busy_s: busy_total,
            load_imbalance_s: load,
            intra_stage_s: intra,
            inter_stage_s: inter,
        });
    }
    Ok(reports)
}

// ─── Run outputs ─────────────────────────────────────────────────────────

/// One accepted token, in combine order (iteration, then ascending seq id).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenEvent {
    pub iteration: u64,
    pub seq_id: u64,
    pub token: u32,
}

/// Throughput and latency digest of one run. TPOT is the gap between a
/// sequence's consecutive token acceptances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSummary {
    pub iterations: u64,
    pub tokens: u64,
    pub sequences_finished: u64,
    pub wall_s: f64,
    pub throughput_tok_s: f64,
    pub mean_tpot_s: f64,
    pub p50_tpot_s: f64,
    pub p99_tpot_s: f64,
}

/// Sender-side traffic totals for one stage hop.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct HopTraffic {
    pub hop: usize,
    pub frames: u64,
    pub aware_frames: u64,
    pub header_bytes: u64,
    pub metadata_rounds: u64,
    pub metadata_bytes: u64,
    pub payload_bytes: u64,
}

impl HopTraffic {
    fn add(&mut self, mode: sat::Mode, stats: sat::FrameStats) {
        self.frames += 1;
        if mode == sat::Mode::Aware {
            self.aware_frames += 1;
        }
        self.header_bytes += stats.header_bytes;
        self.metadata_rounds += stats.metadata_rounds;
        self.metadata_bytes += stats.metadata_bytes;
        self.payload_bytes += stats.payload_bytes;
    }
}

/// Everything one engine run produces.
#[derive(Debug)]
pub struct RunOutput {
    pub features: Features,
    pub timeline: Vec<TimelineRecord>,
    pub transcript: Vec<TokenEvent>,
    pub summary: RunSummary,
    pub hops: Vec<HopTraffic>,
    pub tsem_counters: Vec<TsemCounters>,
}

/// Builds the summary from per-iteration acceptance times.
fn summarize(
    iterations: u64,
    finished: u64,
    transcript: &[TokenEvent],
    accept_time: &BTreeMap<u64, f64>,
    wall_s: f64,
) -> RunSummary {
    let mut last_emit: BTreeMap<u64, f64> = BTreeMap::new();
    let mut deltas: Vec<f64> = Vec::new();
    for ev in transcript {
        let t = accept_time[&ev.iteration];
        if let Some(prev) = last_emit.insert(ev.seq_id, t) {
            deltas.push(t - prev);
        }
    }
    deltas.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pct = |q: f64| -> f64 {
        if deltas.is_empty() {
            return 0.0;
        }
        let rank = ((q * deltas.len() as f64).ceil() as usize).clamp(1, deltas.len());
        deltas[rank - 1]
    };
    let mean = if deltas.is_empty() { 0.0 } else { deltas.iter().sum::<f64>() / deltas.len() as f64 };
    RunSummary {
        iterations,
        tokens: transcript.len() as u64,
        sequences_finished: finished,
        wall_s,
        throughput_tok_s: if wall_s > 0.0 { transcript.len() as f64 / wall_s } else { 0.0 },
        mean_tpot_s: mean,
        p50_tpot_s: pct(0.50),
        p99_tpot_s: pct(0.99),
    }
}

// ─── Digest-chain model ──────────────────────────────────────────────────

/// Per-stage salt for the hidden-digest chain.
fn stage_salt(stage: usize) -> u64 {
    rng::derive_key(TAG_STAGE, stage as u64)
}

/// One stage's simulated forward over the digest chain: stage 0 hashes the
/// scheduling bytes it was handed, later stages fold the upstream digest.
fn fold_stage(base: u64, stage: usize) -> u64 {
    rng::mix64(base ^ stage_salt(stage))
}

/// Raw logit for token v of a column whose key folds the final hidden digest
/// with the sequence's history digest. Uniform in [-8, 8).
fn column_logit(column_key: u64, v: usize) -> f64 {
    rng::unit_f64(column_key, v as u64) * 16.0 - 8.0
}

fn column_key(hidden: u64, hist_digest: u64) -> u64 {
    rng::mix64(hidden ^ rng::mix64(hist_digest))
}

/// Final-stage output: a vocab x mb column-major-in-columns logits block
/// (row-major v*mb + c, matching the sampler's layout), zero for idle
/// columns.
fn logits_block(hidden: u64, entries: &[WireEntry], vocab: usize, mb: usize) -> Vec<u8> {
    let mut out = vec![0u8; vocab * mb * 8];
    for e in entries {
        let key = column_key(hidden, e.hist_digest);
        let c = e.column as usize;
        for v in 0..vocab {
            let x = column_logit(key, v);
            let o = (v * mb + c) * 8;
            out[o..o + 8].copy_from_slice(&x.to_le_bytes());
        }
    }
    out
}

fn logits_matrix(bytes: &[u8], vocab: usize, mb: usize) -> Result<LogitsMatrix, PipelineError> {
    if bytes.len() != vocab * mb * 8 {
        return Err(PipelineError::Timeline(format!(
            "logits payload {} bytes, expected {}",
            bytes.len(),
            vocab * mb * 8
        )));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(LogitsMatrix::new(data, vocab, mb)?)
}

/// Hidden payload carrier: one F32 tensor [mb, width] whose first 8 bytes
/// hold the stage digest, padded with zeros to the configured hop size.
fn hidden_dict(digest: u64, mb: usize, width: usize) -> Result<TensorDict, PipelineError> {
    let mut payload = vec![0u8; mb * width * 4];
    payload[..8].copy_from_slice(&digest.to_le_bytes());
    let mut dict = TensorDict::new();
    let t = Tensor::new(sat::Dtype::F32, vec![mb as u64, width as u64], payload)?;
    dict.insert("hidden", t)?;
    Ok(dict)
}

fn hidden_digest(dict: &TensorDict) -> Result<u64, PipelineError> {
    let t = dict
        .get("hidden")
        .ok_or_else(|| PipelineError::Timeline("hop frame missing hidden tensor".into()))?;
    if t.payload.len() < 8 {
        return Err(PipelineError::Timeline("hop payload too short for digest".into()));
    }
    Ok(u64::from_le_bytes(t.payload[..8].try_into().unwrap()))
}

/// Payload f32 width per column of the hidden carrier.
fn hidden_width(cfg: &PipelineConfig) -> usize {
    (cfg.hidden_payload_bytes.div_ceil(4 * cfg.microbatch())).max(2)
}

// ─── Ring plumbing ───────────────────────────────────────────────────────

static RING_NONCE: AtomicU64 = AtomicU64::new(0);

/// Unlinks its rings when dropped so no run leaks shared-memory regions.
struct RingGuard {
    names: Vec<String>,
}

impl RingGuard {
    fn fresh(tag: &str) -> (String, RingGuard) {
        let nonce = RING_NONCE.fetch_add(1, Ordering::SeqCst);
        let name = format!("pk-{}-{}-{}", std::process::id(), nonce, tag);
        (name.clone(), RingGuard { names: vec![name] })
    }
}

impl Drop for RingGuard {
    fn drop(&mut self) {
        for n in &self.names {
            let _ = bic::unlink(n);
        }
    }
}

const RING_WAIT: Duration = Duration::from_secs(60);

/// Input-ring capacity: admission frames carry prompts and full parameter
/// sets in JSON, so size generously.
fn input_ring_capacity(cfg: &PipelineConfig) -> u32 {
    let per_entry = 512 + cfg.prompt_len * 12;
    (4096 + cfg.microbatch() * per_entry) as u32
}

// ─── Deterministic engine ────────────────────────────────────────────────

/// Virtual-clock costs in seconds.
struct Costs {
    fwd: Vec<f64>,
    jitter: f64,
    prep: f64,
    samp: f64,
    meta: f64,
    hop: f64,
    logits: f64,
    sched: f64,
    combine: f64,
}

impl Costs {
    fn new(cfg: &PipelineConfig) -> Costs {
        let d = &cfg.delays;
        let fwd = if d.forward_ms.len() == 1 {
            vec![d.forward_ms[0] / 1e3; cfg.stages]
        } else {
            d.forward_ms.iter().map(|x| x / 1e3).collect()
        };
        Costs {
            fwd,
            jitter: d.forward_jitter_pct,
            prep: d.prep_ms / 1e3,
            samp: d.sampling_ms / 1e3,
            meta: d.meta_round_ms / 1e3,
            hop: d.hop_payload_ms / 1e3,
            logits: d.logits_payload_ms / 1e3,
            sched: d.sched_ms / 1e3,
            combine: d.combine_ms / 1e3,
        }
    }

    fn fwd_cost(&self, seed: u64, stage: usize, iteration: u64) -> f64 {
        let base = self.fwd[stage];
        if self.jitter == 0.0 {
            return base;
        }
        let u = rng::unit_f64(rng::derive_key(seed, TAG_JITTER ^ stage as u64), iteration);
        base * (1.0 + self.jitter * (2.0 * u - 1.0))
    }
}

/// Runs the configured mode on the deterministic engine.
pub fn run(cfg: &PipelineConfig) -> Result<RunOutput, PipelineError> {
    run_with_features(cfg, cfg.features())
}

/// Deterministic engine with an explicit feature set (the A/B driver uses
/// this to toggle one feature at a time). `features.aware_transmission`
/// overrides the config's transmission preference.
pub fn run_with_features(
    cfg: &PipelineConfig,
    feat: Features,
) -> Result<RunOutput, PipelineError> {
    cfg.validate()?;
    let p = cfg.stages;
    let mb = cfg.microbatch();
    let width = hidden_width(cfg);
    let costs = Costs::new(cfg);
    let sat_pref = if feat.aware_transmission {
        sat::Preference::Aware
    } else {
        sat::Preference::Unaware
    };
    let s_eff = if feat.pool_sampling { cfg.samplers } else { 1 };

    // Data plane: broadcast ring (one consumer per stage plus the pool),
    // per-stage execution state, transport session per hop, logits ring,
    // combine ring, sampler replicas.
    let (in_name, _in_guard) = RingGuard::fresh("i");
    let mut in_prod = RingChannel::create(&in_name, (p + 2).max(4) as u32, input_ring_capacity(cfg))?;
    let mut stage_cons: Vec<RingChannel> =
        (0..p).map(|_| RingChannel::open(&in_name)).collect::<Result<_, _>>()?;
    let mut pool_in = RingChannel::open(&in_name)?;

    let (l_name, _l_guard) = RingGuard::fresh("l");
    let logits_cap = (cfg.vocab * mb * 8) as u32;
    let mut l_prod = RingChannel::create(&l_name, 4, logits_cap)?;
    let mut l_cons = RingChannel::open(&l_name)?;

    let tsems: Vec<ExecState> =
        (0..p).map(|_| ExecState::new(TsemConfig::for_replicas(p))).collect();

    let mut senders: Vec<sat::SatSender> = Vec::new();
    let mut receivers: Vec<sat::SatReceiver> = Vec::new();
    let mut send_ends: Vec<Counting<PipeEnd>> = Vec::new();
    let mut recv_ends: Vec<Counting<PipeEnd>> = Vec::new();
    for _ in 1..p {
        let (a, b) = sat::memory_pipe();
        senders.push(sat::SatSender::new(sat_pref));
        receivers.push(sat::SatReceiver::new());
        send_ends.push(Counting::new(a));
        recv_ends.push(Counting::new(b));
    }
    let mut hops: Vec<HopTraffic> =
        (0..p.saturating_sub(1)).map(|h| HopTraffic { hop: h, ..Default::default() }).collect();

    let mut bank: Vec<SamplerReplica> = Vec::with_capacity(p);
    let l_max = (cfg.max_new_tokens as usize).max(cfg.prompt_len);
    for m in 0..p {
        let ids = vec![0u64; mb];
        let prompts = vec![Vec::new(); mb];
        let params = vec![SamplingParams::default(); mb];
        let mut r = SamplerReplica::new(cfg.vocab, mb, l_max, &ids, &prompts, &params)?;
        r.sampler_index = m as u32;
        // Fresh replicas start with every column idle until admission.
        for c in 0..mb {
            r.evict_and_admit(c, None)?;
        }
        bank.push(r);
    }
    let mut bico = BicoState::new(s_eff as u16);

    let mut sched = Scheduler::new(cfg);

    // Virtual-clock state.
    let mut prev_busy_end = vec![0.0f64; p];
    let mut prev_fwd_start = vec![0.0f64; p];
    let mut prev_prep_end = vec![0.0f64; p];
    let mut prev_samp_end = 0.0f64;
    let mut combine_done: Vec<f64> = Vec::new();
    let mut accept_time: BTreeMap<u64, f64> = BTreeMap::new();

    let mut records: Vec<TimelineRecord> = Vec::new();
    let mut last_rec: Vec<Option<usize>> = vec![None; p];
    let mut transcript: Vec<TokenEvent> = Vec::new();
    let mut iterations_run = 0u64;
    let mut wall_end = 0.0f64;

    let mut poisoned = false;
    let mut n = 0u64;
    while n < cfg.iterations {
        let wire = sched.schedule(n);
        if wire.entries.is_empty() {
            // Supply drained: stop early through the poison path.
            broadcast_poison(&mut in_prod, &mut stage_cons, &tsems, n, p)?;
            poisoned = true;
            break;
        }
        let dispatch = if n < p as u64 {
            n as f64 * costs.sched
        } else {
            combine_done[(n - p as u64) as usize] + costs.sched
        };
        let wire_bytes = wire.encode()?;
        in_prod.produce(n, &wire_bytes)?;

        let mut up_send_end = 0.0f64;
        let mut final_send_end = 0.0f64;
        for s in 0..p {
            let bytes = stage_cons[s]
                .consume_timeout(n, RING_WAIT)
                .map_err(|e| stage_err(s, n, e))?;
            let stage_wire = SchedulingWire::decode(&bytes)?;
            let microbatch: Vec<MicrobatchEntry> = stage_wire
                .entries
                .iter()
                .map(|e| MicrobatchEntry {
                    seq_id: e.seq_id,
                    new_tokens: 1,
                    params_digest: e.params_digest,
                })
                .collect();
            let out = SchedulingOutput::new(n, microbatch);
            if !tsems[s].enqueue_scheduling(out).map_err(|e| stage_err(s, n, e))? {
                return Err(stage_err(s, n, "scheduling queue full"));
            }
            let input_bytes = bytes.clone();
            match tsems[s]
                .cpu_step(move |_, _| input_bytes)
                .map_err(|e| stage_err(s, n, e))?
            {
                CpuOutcome::Progressed { .. } => {}
                other => {
                    return Err(stage_err(s, n, format!("cpu executor stalled: {:?}", other)))
                }
            }

            // Receive the upstream hidden digest before executing; the mode
            // actually used (a first aware frame falls back once) prices the
            // receive.
            let (h_in, mode_used) = if s == 0 {
                (0u64, None)
            } else {
                let msg = receivers[s - 1]
                    .recv(&mut recv_ends[s - 1], mb as u64)
                    .map_err(|e| stage_err(s, n, e))?;
                match msg {
                    SatMessage::Tensors { dict, iteration, mode } => {
                        if iteration != n {
                            return Err(stage_err(
                                s,
                                n,
                                format!("hop delivered iteration {}", iteration),
                            ));
                        }
                        (hidden_digest(&dict)?, Some(mode))
                    }
                    SatMessage::Control { .. } => {
                        return Err(stage_err(s, n, "unexpected control frame"))
                    }
                }
            };

            let is_final = s == p - 1;
            let vocab = cfg.vocab;
            let entries = stage_wire.entries.clone();
            let progress = match tsems[s]
                .gpu_step(move |input, _| {
                    let base = if s == 0 { rng::fnv1a(input) } else { h_in };
                    let h = fold_stage(base, s);
                    if is_final {
                        logits_block(h, &entries, vocab, mb)
                    } else {
                        h.to_le_bytes().to_vec()
                    }
                })
                .map_err(|e| stage_err(s, n, e))?
            {
                GpuOutcome::Progressed(pr) => pr,
                other => {
                    return Err(stage_err(s, n, format!("gpu executor stalled: {:?}", other)))
                }
            };

            // Virtual timestamps from the dependency recurrences.
            let fwd_cost = costs.fwd_cost(cfg.seed, s, n);
            let input_ready = if s == 0 {
                dispatch
            } else {
                match mode_used {
                    Some(sat::Mode::Aware) => up_send_end,
                    // Layout-blind handling occupies the receiving stage:
                    // the transfer is accepted once the frame has arrived
                    // and the previous iteration's work is done, then both
                    // metadata rounds run before the payload is usable.
                    // The upstream send completes at acceptance (transport
                    // frames are held in flight until the receiver posts
                    // its size exchange), so the delivery wait created by
                    // an early sender lands in the sender's send window,
                    // not in the receiver's synchronization gap.
                    _ => {
                        let acceptance = up_send_end.max(prev_busy_end[s]);
                        let up = last_rec[s - 1].expect("upstream record exists");
                        records[up].send_end = acceptance;
                        acceptance + 2.0 * costs.meta
                    }
                }
            };
            let prep_start = if feat.overlapped_prep {
                // Guard semantics: preparing n may begin once the stage
                // entered iteration n-1, not when it finished it.
                dispatch.max(prev_fwd_start[s]).max(prev_prep_end[s])
            } else {
                input_ready.max(prev_busy_end[s])
            };
            let prep_end = prep_start + costs.prep;
            let fwd_start = prep_end.max(input_ready).max(prev_busy_end[s]);
            let inline_samp = if is_final && !feat.pool_sampling { costs.samp } else { 0.0 };
            let fwd_end = fwd_start + fwd_cost + inline_samp;
            let send_start = fwd_end;
            let send_cost = if !is_final {
                costs.hop
            } else if feat.pool_sampling {
                costs.logits
            } else {
                // Inline-sampled tokens leave as a tiny combine frame.
                0.0
            };
            let send_end = send_start + send_cost;

            prev_fwd_start[s] = fwd_start;
            prev_prep_end[s] = prep_end;
            prev_busy_end[s] = fwd_end;

            records.push(TimelineRecord {
                stage: s,
                iteration: n,
                prep_start,
                prep_end,
                input_ready,
                fwd_start,
                fwd_end,
                send_start,
                send_end,
                recv_ready: f64::NAN,
            });
            let idx = records.len() - 1;
            if s > 0 {
                // Downstream usability of the upstream record's send.
                let up = last_rec[s - 1].unwrap();
                records[up].recv_ready = input_ready;
            }
            last_rec[s] = Some(idx);
            if is_final {
                // The pool (or combine) ingests as soon as the push lands.
                records[idx].recv_ready = send_end;
                final_send_end = send_end;
            }
            up_send_end = send_end;

            // Push the hidden payload onward.
            if !is_final {
                let h = u64::from_le_bytes(progress.payload[..8].try_into().unwrap());
                let dict = hidden_dict(h, mb, width)?;
                let (mode, stats) = senders[s]
                    .send(&mut send_ends[s], &dict, n)
                    .map_err(|e| stage_err(s, n, e))?;
                hops[s].add(mode, stats);
            } else {
                l_prod.produce(n, &progress.payload)?;
            }
        }

        // Sampler pool: timing first, then the data plane.
        let (samp_end, done) = if feat.pool_sampling {
            let start = final_send_end.max(prev_samp_end);
            let end = start + costs.samp / cfg.samplers as f64;
            (end, end + costs.combine)
        } else {
            (final_send_end, final_send_end + costs.combine)
        };
        prev_samp_end = samp_end;
        combine_done.push(done);

        let pool_wire = SchedulingWire::decode(&pool_in.consume_timeout(n, RING_WAIT)?)?;
        let map = pool_step(
            &mut bank,
            &mut bico,
            &mut l_cons,
            &pool_wire,
            cfg,
            mb,
            s_eff,
            n,
        )?;
        sched.apply(&map);
        for (&seq, &tok) in &map {
            transcript.push(TokenEvent { iteration: n, seq_id: seq, token: tok });
        }
        accept_time.insert(n, done);
        wall_end = done;
        iterations_run += 1;
        n += 1;
    }

    if !poisoned {
        broadcast_poison(&mut in_prod, &mut stage_cons, &tsems, n, p)?;
    }

    for r in &records {
        r.check_monotonic()?;
    }
    let summary = summarize(
        iterations_run,
        sched.finished_count(),
        &transcript,
        &accept_time,
        wall_end,
    );
    Ok(RunOutput {
        features: feat,
        timeline: records,
        transcript,
        summary,
        hops,
        tsem_counters: tsems.iter().map(|t| t.counters()).collect(),
    })
}

/// Shuts the stages down through the control path: one poison frame on the
/// broadcast ring halts both executors of every stage.
fn broadcast_poison(
    in_prod: &mut RingChannel,
    stage_cons: &mut [RingChannel],
    tsems: &[ExecState],
    iteration: u64,
    p: usize,
) -> Result<(), PipelineError> {
    let wire = SchedulingWire::poison(iteration, p);
    in_prod.produce(iteration, &wire.encode()?)?;
    for (s, cons) in stage_cons.iter_mut().enumerate() {
        let bytes = cons
            .consume_timeout(iteration, RING_WAIT)
            .map_err(|e| stage_err(s, iteration, e))?;
        let w = SchedulingWire::decode(&bytes)?;
        if !w.poison {
            return Err(stage_err(s, iteration, "expected poison frame"));
        }
        if !tsems[s]
            .enqueue_scheduling(SchedulingOutput::poison(iteration))
            .map_err(|e| stage_err(s, iteration, e))?
        {
            return Err(stage_err(s, iteration, "scheduling queue full at shutdown"));
        }
        match tsems[s].cpu_step(|_, _| Vec::new()).map_err(|e| stage_err(s, iteration, e))? {
            CpuOutcome::Halted => {}
            other => {
                return Err(stage_err(s, iteration, format!("cpu ignored poison: {:?}", other)))
            }
        }
        match tsems[s].gpu_step(|_, _| Vec::new()).map_err(|e| stage_err(s, iteration, e))? {
            GpuOutcome::Halted => {}
            other => {
                return Err(stage_err(s, iteration, format!("gpu ignored poison: {:?}", other)))
            }
        }
    }
    Ok(())
}

/// One pool iteration: apply admissions/evictions from the scheduling frame
/// to the owning replica, run the chain on the delivered logits, draw, and
/// route the results through the combine framing exactly once per subslot.
#[allow(clippy::too_many_arguments)]
fn pool_step(
    bank: &mut [SamplerReplica],
    bico: &mut BicoState,
    l_cons: &mut RingChannel,
    wire: &SchedulingWire,
    cfg: &PipelineConfig,
    mb: usize,
    s_eff: usize,
    n: u64,
) -> Result<BTreeMap<u64, u32>, PipelineError> {
    let m = (n % cfg.stages as u64) as usize;
    let replica = &mut bank[m];
    let mut active = vec![false; mb];
    for e in &wire.entries {
        let c = e.column as usize;
        active[c] = true;
        if let Some(a) = &e.admit {
            replica
                .evict_and_admit(c, Some((e.seq_id, &a.prompt, a.params.into())))
                .map_err(|e| pool_err(n, e))?;
        } else if !replica.is_active(c) || replica.seq_id(c) != e.seq_id {
            return Err(pool_err(n, format!("column {} does not hold sequence {}", c, e.seq_id)));
        }
    }
    for c in 0..mb {
        if !active[c] && replica.is_active(c) {
            replica.evict_and_admit(c, None).map_err(|e| pool_err(n, e))?;
        }
    }

    let logits_bytes = l_cons.consume_timeout(n, RING_WAIT).map_err(|e| pool_err(n, e))?;
    let mut matrix = logits_matrix(&logits_bytes, cfg.vocab, mb)?;
    apply_penalties(&mut matrix, replica).map_err(|e| pool_err(n, e))?;
    temperature_softmax(&mut matrix, replica).map_err(|e| pool_err(n, e))?;
    filter(&mut matrix, replica).map_err(|e| pool_err(n, e))?;
    let out = sample(&matrix, replica, n).map_err(|e| pool_err(n, e))?;

    let active_cols: Vec<usize> = (0..mb).filter(|&c| replica.is_active(c)).collect();
    if active_cols.len() != out.token_ids.len() {
        return Err(pool_err(n, "sampling output does not cover the active columns"));
    }
    // Column ownership split across the S subslots, routed through the real
    // frame encoding so the collector sees exactly what workers would send.
    for w in 0..s_eff {
        let tokens: Vec<(u64, u32)> = active_cols
            .iter()
            .zip(&out.token_ids)
            .filter(|(&c, _)| c % s_eff == w)
            .map(|(&c, &t)| (replica.seq_id(c), t))
            .collect();
        let frame = BicoFrame { iteration: n, sampler_index: w as u16, tokens };
        let encoded = frame.encode()?;
        let decoded = bic::read_frame(&mut Cursor::new(&encoded))?
            .ok_or_else(|| pool_err(n, "combine frame did not round-trip"))?;
        bico.ingest(decoded)?;
    }
    bico.take(n).ok_or_else(|| pool_err(n, "combine incomplete after all subslots"))
}

// ─── Flat reference runner ───────────────────────────────────────────────

/// Replays the schedule with no pipeline at all: one loop folds every
/// stage's digest in place, rebuilds each column's logits, and draws through
/// the from-scratch reference chain with full retained histories. Pipelining
/// must not change tokens, so [`run`] and [`run_threaded`] under every
/// feature combination must match this transcript exactly.
pub fn run_oracle(cfg: &PipelineConfig) -> Result<Vec<TokenEvent>, PipelineError> {
    cfg.validate()?;
    let p = cfg.stages;
    let mut sched = Scheduler::new(cfg);
    let mut outputs: BTreeMap<u64, Vec<u32>> = BTreeMap::new();
    let mut events = Vec::new();
    for n in 0..cfg.iterations {
        let wire = sched.schedule(n);
        if wire.entries.is_empty() {
            break;
        }
        let bytes = wire.encode()?;
        let mut h = rng::fnv1a(&bytes);
        for s in 0..p {
            h = fold_stage(if s == 0 { rng::fnv1a(&bytes) } else { h }, s);
        }
        let mut map = BTreeMap::new();
        for e in &wire.entries {
            let key = column_key(h, e.hist_digest);
            let logits: Vec<f64> = (0..cfg.vocab).map(|v| column_logit(key, v)).collect();
            let col = oracle::ReferenceColumn {
                prompt: sched.prompt_of(e.seq_id).to_vec(),
                outputs: outputs.get(&e.seq_id).cloned().unwrap_or_default(),
                logits,
                params: sched.params_of(e.seq_id),
            };
            let (_, token) = oracle::reference_column_step(&col, n)?;
            map.insert(e.seq_id, token);
        }
        sched.apply(&map);
        for (&seq, &tok) in &map {
            outputs.entry(seq).or_default().push(tok);
            events.push(TokenEvent { iteration: n, seq_id: seq, token: tok });
        }
    }
    Ok(events)
}

// ─── A/B comparison ──────────────────────────────────────────────────────

/// One arm of the comparison.
#[derive(Debug)]
pub struct AbRun {
    pub label: &'static str,
    pub features: Features,
    pub summary: RunSummary,
}

/// Baseline, each single feature, and the full stack, on identical seeds.
#[derive(Debug)]
pub struct AbReport {
    pub runs: Vec<AbRun>,
}

impl AbReport {
    fn throughput(&self, label: &str) -> f64 {
        self.runs
            .iter()
            .find(|r| r.label == label)
            .map(|r| r.summary.throughput_tok_s)
            .unwrap_or(0.0)
    }

    /// Throughput ratio of one arm over the all-off baseline.
    pub fn ratio(&self, label: &str) -> f64 {
        let base = self.throughput("baseline");
        if base > 0.0 {
            self.throughput(label) / base
        } else {
            0.0
        }
    }

    pub fn full_speedup(&self) -> f64 {
        self.ratio("optimized")
    }

    pub fn aware_transmission_gain(&self) -> f64 {
        self.ratio("aware_transmission") - 1.0
    }
}

/// Runs the five arms on the deterministic engine. Transcripts are identical
/// across arms by construction; only the timing differs.
pub fn ab_compare(cfg: &PipelineConfig) -> Result<AbReport, PipelineError> {
    let arms: [(&'static str, Features); 5] = [
        ("baseline", Features::all_off()),
        (
            "pool_sampling",
            Features { pool_sampling: true, ..Features::all_off() },
        ),
        (
            "overlapped_prep",
            Features { overlapped_prep: true, ..Features::all_off() },
        ),
        (
            "aware_transmission",
            Features { aware_transmission: true, ..Features::all_off() },
        ),
        ("optimized", Features::all_on()),
    ];
    let mut runs = Vec::with_capacity(arms.len());
    for (label, feat) in arms {
        let out = run_with_features(cfg, feat)?;
        runs.push(AbRun { label, features: feat, summary: out.summary });
    }
    Ok(AbReport { runs })
}

// ─── CSV writers ─────────────────────────────────────────────────────────

pub const TIMELINE_HEADER: &str =
    "stage,iteration,prep_start,prep_end,input_ready,fwd_start,fwd_end,send_start,send_end,recv_ready";
pub const BUBBLES_HEADER: &str = "stage,busy_s,load_imbalance_s,intra_stage_s,inter_stage_s,total_bubble_s,load_imbalance_frac,intra_stage_frac,inter_stage_frac,total_bubble_frac";
pub const SUMMARY_HEADER: &str = "mode,sat,iterations,sequences_completed,tokens,wall_s,throughput_tok_s,mean_tpot_s,p50_tpot_s,p99_tpot_s";

pub fn timeline_csv(records: &[TimelineRecord]) -> String {
    let mut out = String::from(TIMELINE_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.stage,
            r.iteration,
            r.prep_start,
            r.prep_end,
            r.input_ready,
            r.fwd_start,
            r.fwd_end,
            r.send_start,
            r.send_end,
            r.recv_ready
        ));
    }
    out
}

pub fn bubbles_csv(reports: &[BubbleReport]) -> String {
    let mut out = String::from(BUBBLES_HEADER);
    out.push('\n');
    for b in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            b.stage,
            b.busy_s,
            b.load_imbalance_s,
            b.intra_stage_s,
            b.inter_stage_s,
            b.total_bubble_s(),
            b.load_imbalance_frac(),
            b.intra_stage_frac(),
            b.inter_stage_frac(),
            b.total_bubble_frac()
        ));
    }
    out
}

pub fn summary_csv(cfg: &PipelineConfig, s: &RunSummary) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    out.push_str(&format!(
        "{},{},{},{},{},{},{},{},{},{}\n",
        cfg.mode.label(),
        cfg.sat.label(),
        s.iterations,
        s.sequences_finished,
        s.tokens,
        s.wall_s,
        s.throughput_tok_s,
        s.mean_tpot_s,
        s.p50_tpot_s,
        s.p99_tpot_s
    ));
    out
}

// ─── Threaded engine ─────────────────────────────────────────────────────

/// Runs the same data plane on real actors: one preparer and one executor
/// thread per stage, a pool dispatcher with S drawing workers submitting
/// over loopback TCP, and the scheduler on the calling thread. Timestamps
/// come from the process clock, so this engine checks liveness and
/// interleaving-independence rather than exact timing. Sleeps follow the
/// delay model; the actor topology always offloads sampling to the pool.
pub fn run_threaded(cfg: &PipelineConfig) -> Result<RunOutput, PipelineError> {
    cfg.validate()?;
    let feat = cfg.features();
    let p = cfg.stages;
    let mb = cfg.microbatch();
    let width = hidden_width(cfg);
    let costs = Arc::new(Costs::new(cfg));
    let t0 = Instant::now();

    let (in_name, _in_guard) = RingGuard::fresh("ti");
    let mut in_prod =
        RingChannel::create(&in_name, (p + 2).max(4) as u32, input_ring_capacity(cfg))?;
    let (l_name, _l_guard) = RingGuard::fresh("tl");
    let mut l_prod_handle = Some(RingChannel::create(&l_name, 4, (cfg.vocab * mb * 8).max(16) as u32)?);

    let tsems: Vec<Arc<ExecState>> =
        (0..p).map(|_| Arc::new(ExecState::new(TsemConfig::for_replicas(p)))).collect();

    // Hop pipes: sender end for stage s, receiver end for stage s+1.
    let mut hop_send: Vec<Option<PipeEnd>> = Vec::new();
    let mut hop_recv: Vec<Option<PipeEnd>> = Vec::new();
    for _ in 1..p {
        let (a, b) = sat::memory_pipe();
        hop_send.push(Some(a));
        hop_recv.push(Some(b));
    }

    let server = bic::BicoServer::start(if feat.pool_sampling { cfg.samplers } else { 1 } as u16)
        .map_err(PipelineError::from)?;
    let collector = server.collector();

    let records: Arc<Mutex<Vec<TimelineRecord>>> = Arc::new(Mutex::new(Vec::new()));
    let mut handles: Vec<std::thread::JoinHandle<Result<(), PipelineError>>> = Vec::new();

    // Stage preparer threads: consume the broadcast, enqueue, prep.
    for s in 0..p {
        let name = in_name.clone();
        let tsem = tsems[s].clone();
        let recs = records.clone();
        let prep_sleep = costs.prep;
        handles.push(
            std::thread::Builder::new()
                .name(format!("stage{}-prep", s))
                .spawn(move || {
                    let mut cons = RingChannel::open(&name)?;
                    let mut n = 0u64;
                    loop {
                        let bytes = cons
                            .consume_timeout(n, RING_WAIT)
                            .map_err(|e| stage_err(s, n, e))?;
                        let wire = SchedulingWire::decode(&bytes)?;
                        if wire.poison {
                            while !tsem
                                .enqueue_scheduling(SchedulingOutput::poison(n))
                                .map_err(|e| stage_err(s, n, e))?
                            {
                                std::thread::yield_now();
                            }
                            loop {
                                match tsem
                                    .cpu_step(|_, _| Vec::new())
                                    .map_err(|e| stage_err(s, n, e))?
                                {
                                    CpuOutcome::Halted => return Ok(()),
                                    _ => std::thread::yield_now(),
                                }
                            }
                        }
                        let microbatch: Vec<MicrobatchEntry> = wire
                            .entries
                            .iter()
                            .map(|e| MicrobatchEntry {
                                seq_id: e.seq_id,
                                new_tokens: 1,
                                params_digest: e.params_digest,
                            })
                            .collect();
                        while !tsem
                            .enqueue_scheduling(SchedulingOutput::new(n, microbatch.clone()))
                            .map_err(|e| stage_err(s, n, e))?
                        {
                            std::thread::yield_now();
                        }
                        let t_in = t0.elapsed().as_secs_f64();
                        sleep_s(prep_sleep);
                        loop {
                            let input = bytes.clone();
                            match tsem
                                .cpu_step(move |_, _| input)
                                .map_err(|e| stage_err(s, n, e))?
                            {
                                CpuOutcome::Progressed { .. } => break,
                                CpuOutcome::Halted => return Ok(()),
                                CpuOutcome::Idle(_) => std::thread::yield_now(),
                            }
                        }
                        let t_done = t0.elapsed().as_secs_f64();
                        let mut g = recs.lock().unwrap();
                        g.push(TimelineRecord {
                            stage: s,
                            iteration: n,
                            // The preparer owns prep timestamps; the
                            // executor patches the forward and send fields.
                            prep_start: t_in,
                            prep_end: t_done,
                            input_ready: t_in,
                            fwd_start: f64::NAN,
                            fwd_end: f64::NAN,
                            send_start: f64::NAN,
                            send_end: f64::NAN,
                            recv_ready: f64::NAN,
                        });
                        n += 1;
                    }
                })
                .expect("spawn preparer"),
        );
    }

    // Stage executor threads: receive upstream digest, execute, send down.
    for s in 0..p {
        let tsem = tsems[s].clone();
        let mut rx = if s > 0 { hop_recv[s - 1].take() } else { None };
        let mut tx = if s + 1 < p { hop_send[s].take() } else { None };
        let mut l_prod = if s == p - 1 { l_prod_handle.take() } else { None };
        let sat_pref = if feat.aware_transmission {
            sat::Preference::Aware
        } else {
            sat::Preference::Unaware
        };
        let vocab = cfg.vocab;
        let fwd_sleep = costs.fwd[s];
        let is_final = s == p - 1;
        let recs = records.clone();
        handles.push(
            std::thread::Builder::new()
                .name(format!("stage{}-exec", s))
                .spawn(move || {
                    let mut sender = sat::SatSender::new(sat_pref);
                    let mut receiver = sat::SatReceiver::new();
                    let mut n = 0u64;
                    loop {
                        let h_in = if let Some(stream) = rx.as_mut() {
                            match receiver.recv(stream, mb as u64).map_err(|e| stage_err(s, n, e))? {
                                SatMessage::Tensors { dict, iteration, .. } => {
                                    if iteration != n {
                                        return Err(stage_err(
                                            s,
                                            n,
                                            format!("hop delivered iteration {}", iteration),
                                        ));
                                    }
                                    hidden_digest(&dict)?
                                }
                                SatMessage::Control { .. } => {
                                    // Upstream halted; consume the local
                                    // poison descriptor then propagate.
                                    loop {
                                        match tsem
                                            .gpu_step(|_, _| Vec::new())
                                            .map_err(|e| stage_err(s, n, e))?
                                        {
                                            GpuOutcome::Halted => break,
                                            _ => std::thread::yield_now(),
                                        }
                                    }
                                    if let Some(t) = tx.as_mut() {
                                        sat::send_control(t, n, b"halt")
                                            .map_err(|e| stage_err(s, n, e))?;
                                    }
                                    if let Some(lp) = l_prod.as_mut() {
                                        lp.produce(n, &[])?;
                                    }
                                    return Ok(());
                                }
                            }
                        } else {
                            0
                        };
                        // Scheduling bytes for this iteration come from the
                        // descriptor's buffer; the digest keys need the
                        // entry list, so re-read it out of the buffer.
                        let outcome = loop {
                            let step = tsem.gpu_step(|input, _| {
                                sleep_s(fwd_sleep);
                                let wire = SchedulingWire::decode(input)
                                    .expect("buffer holds the scheduling frame");
                                let base = if s == 0 { rng::fnv1a(input) } else { h_in };
                                let h = fold_stage(base, s);
                                if is_final {
                                    logits_block(h, &wire.entries, vocab, mb)
                                } else {
                                    h.to_le_bytes().to_vec()
                                }
                            });
                            match step.map_err(|e| stage_err(s, n, e))? {
                                GpuOutcome::Progressed(pr) => break Some(pr),
                                GpuOutcome::Halted => break None,
                                GpuOutcome::Idle(_) => std::thread::yield_now(),
                            }
                        };
                        let Some(progress) = outcome else {
                            if let Some(t) = tx.as_mut() {
                                sat::send_control(t, n, b"halt").map_err(|e| stage_err(s, n, e))?;
                            }
                            if let Some(lp) = l_prod.as_mut() {
                                lp.produce(n, &[])?;
                            }
                            return Ok(());
                        };
                        let t_fwd_end = t0.elapsed().as_secs_f64();
                        if let Some(t) = tx.as_mut() {
                            let h = u64::from_le_bytes(progress.payload[..8].try_into().unwrap());
                            let dict = hidden_dict(h, mb, width)?;
                            sender.send(t, &dict, n).map_err(|e| stage_err(s, n, e))?;
                        }
                        if let Some(lp) = l_prod.as_mut() {
                            lp.produce(n, &progress.payload)?;
                        }
                        let t_sent = t0.elapsed().as_secs_f64();
                        // The preparer pushes this record right after its
                        // cpu_step progressed, which strictly precedes this
                        // executor progressing the same iteration; it may
                        // still be a few instructions away, so wait for it.
                        loop {
                            let mut g = recs.lock().unwrap();
                            if let Some(r) = g
                                .iter_mut()
                                .find(|r| r.stage == s && r.iteration == n && r.fwd_start.is_nan())
                            {
                                r.fwd_start = t_fwd_end - fwd_sleep;
                                r.fwd_end = t_fwd_end;
                                r.send_start = t_fwd_end;
                                r.send_end = t_sent;
                                r.recv_ready = t_sent;
                                break;
                            }
                            drop(g);
                            std::thread::yield_now();
                        }
                        n += 1;
                    }
                })
                .expect("spawn executor"),
        );
    }

    // Sampler pool: dispatcher plus S drawing workers over real sockets.
    let s_workers = if feat.pool_sampling { cfg.samplers } else { 1 };
    let mut worker_tx: Vec<mpsc::Sender<DrawJob>> = Vec::new();
    let (reply_tx, reply_rx) = mpsc::channel::<DrawReply>();
    for w in 0..s_workers {
        let (tx, rx) = mpsc::channel::<DrawJob>();
        worker_tx.push(tx);
        let reply = reply_tx.clone();
        let addr = server.addr();
        handles.push(
            std::thread::Builder::new()
                .name(format!("sampler{}", w))
                .spawn(move || {
                    let mut conn = std::net::TcpStream::connect(addr)
                        .map_err(|e| PipelineError::Thread(e.to_string()))?;
                    while let Ok(job) = rx.recv() {
                        let mut tokens = Vec::with_capacity(job.columns.len());
                        for col in &job.columns {
                            let u = rng::unit_f64(col.seed, job.iteration);
                            let probs = LogitsMatrix::new(col.probs.clone(), col.probs.len(), 1)
                                .map_err(|e| pool_err(job.iteration, e))?;
                            let tok = draw_column(&probs, 0, u)
                                .map_err(|e| pool_err(job.iteration, e))?;
                            tokens.push((col.seq_id, tok, col.column));
                        }
                        let frame_tokens: Vec<(u64, u32)> =
                            tokens.iter().map(|&(seq, tok, _)| (seq, tok)).collect();
                        bic::bico_submit(&mut conn, job.iteration, w as u16, &frame_tokens)
                            .map_err(|e| pool_err(job.iteration, e))?;
                        if reply
                            .send(DrawReply { iteration: job.iteration, tokens })
                            .is_err()
                        {
                            break;
                        }
                    }
                    Ok(())
                })
                .expect("spawn sampler"),
        );
    }
    drop(reply_tx);

    // Pool dispatcher on its own thread.
    {
        let in_name = in_name.clone();
        let l_name = l_name.clone();
        let cfg = cfg.clone();
        let samp_sleep = costs.samp / s_workers as f64;
        handles.push(
            std::thread::Builder::new()
                .name("pool".into())
                .spawn(move || {
                    let mut pool_in = RingChannel::open(&in_name)?;
                    let mut l_cons = RingChannel::open(&l_name)?;
                    let mb = cfg.microbatch();
                    let l_max = (cfg.max_new_tokens as usize).max(cfg.prompt_len);
                    let mut bank: Vec<SamplerReplica> = Vec::new();
                    for m in 0..cfg.stages {
                        let mut r = SamplerReplica::new(
                            cfg.vocab,
                            mb,
                            l_max,
                            &vec![0u64; mb],
                            &vec![Vec::new(); mb],
                            &vec![SamplingParams::default(); mb],
                        )
                        .map_err(|e| pool_err(0, e))?;
                        r.sampler_index = m as u32;
                        for c in 0..mb {
                            r.evict_and_admit(c, None).map_err(|e| pool_err(0, e))?;
                        }
                        bank.push(r);
                    }
                    let mut n = 0u64;
                    loop {
                        let wire =
                            SchedulingWire::decode(&pool_in.consume_timeout(n, RING_WAIT)?)?;
                        if wire.poison {
                            return Ok(());
                        }
                        let logits = l_cons.consume_timeout(n, RING_WAIT)?;
                        if logits.is_empty() {
                            return Ok(());
                        }
                        let m = (n % cfg.stages as u64) as usize;
                        let replica = &mut bank[m];
                        let mut active = vec![false; mb];
                        for e in &wire.entries {
                            let c = e.column as usize;
                            active[c] = true;
                            if let Some(a) = &e.admit {
                                replica
                                    .evict_and_admit(c, Some((e.seq_id, &a.prompt, a.params.into())))
                                    .map_err(|e| pool_err(n, e))?;
                            }
                        }
                        for c in 0..mb {
                            if !active[c] && replica.is_active(c) {
                                replica.evict_and_admit(c, None).map_err(|e| pool_err(n, e))?;
                            }
                        }
                        let mut matrix = logits_matrix(&logits, cfg.vocab, mb)?;
                        apply_penalties(&mut matrix, replica).map_err(|e| pool_err(n, e))?;
                        temperature_softmax(&mut matrix, replica).map_err(|e| pool_err(n, e))?;
                        filter(&mut matrix, replica).map_err(|e| pool_err(n, e))?;
                        sleep_s(samp_sleep);
                        // Ship column slices to the workers; they draw and
                        // submit their combine frames independently.
                        for (w, tx) in worker_tx.iter().enumerate() {
                            let columns: Vec<DrawColumn> = (0..mb)
                                .filter(|&c| replica.is_active(c) && c % worker_tx.len() == w)
                                .map(|c| DrawColumn {
                                    column: c,
                                    seq_id: replica.seq_id(c),
                                    seed: replica.params(c).seed,
                                    probs: (0..cfg.vocab).map(|v| matrix.get(v, c)).collect(),
                                })
                                .collect();
                            tx.send(DrawJob { iteration: n, columns })
                                .map_err(|e| pool_err(n, e))?;
                        }
                        let mut expected: usize =
                            (0..mb).filter(|&c| replica.is_active(c)).count();
                        let mut drawn: Vec<(usize, u32)> = Vec::with_capacity(expected);
                        while expected > 0 {
                            let reply = reply_rx
                                .recv_timeout(RING_WAIT)
                                .map_err(|e| pool_err(n, e))?;
                            if reply.iteration != n {
                                return Err(pool_err(n, "stale draw reply"));
                            }
                            expected -= reply.tokens.len();
                            drawn.extend(reply.tokens.iter().map(|&(_, tok, c)| (c, tok)));
                        }
                        drawn.sort_unstable_by_key(|&(c, _)| c);
                        for (c, tok) in drawn {
                            replica
                                .append_token_at(c, tok, &mut |_, _, _| {})
                                .map_err(|e| pool_err(n, e))?;
                        }
                        n += 1;
                    }
                })
                .expect("spawn pool"),
        );
    }

    // Scheduler on this thread: initial burst, then one dispatch per
    // combined iteration.
    let mut sched = Scheduler::new(cfg);
    let mut transcript = Vec::new();
    let mut accept_time: BTreeMap<u64, f64> = BTreeMap::new();
    let mut next_dispatch = 0u64;
    let mut budget = cfg.iterations;
    let mut fault: Option<PipelineError> = None;

    'drive: {
        while next_dispatch < budget.min(p as u64) {
            let wire = sched.schedule(next_dispatch);
            if wire.entries.is_empty() {
                budget = next_dispatch;
                break;
            }
            match wire.encode().and_then(|b| in_prod.produce(next_dispatch, &b).map_err(Into::into))
            {
                Ok(()) => next_dispatch += 1,
                Err(e) => {
                    fault = Some(e);
                    break 'drive;
                }
            }
        }
        let mut n = 0u64;
        while n < budget {
            let map = match collector.collect(n, RING_WAIT) {
                Ok(m) => m,
                Err(e) => {
                    fault = Some(e.into());
                    break 'drive;
                }
            };
            sleep_s(costs.combine);
            sched.apply(&map);
            let t = t0.elapsed().as_secs_f64();
            for (&seq, &tok) in &map {
                transcript.push(TokenEvent { iteration: n, seq_id: seq, token: tok });
            }
            accept_time.insert(n, t);
            if next_dispatch < budget {
                let wire = sched.schedule(next_dispatch);
                if wire.entries.is_empty() {
                    budget = next_dispatch;
                } else {
                    sleep_s(costs.sched);
                    match wire
                        .encode()
                        .and_then(|b| in_prod.produce(next_dispatch, &b).map_err(Into::into))
                    {
                        Ok(()) => next_dispatch += 1,
                        Err(e) => {
                            fault = Some(e);
                            break 'drive;
                        }
                    }
                }
            }
            n += 1;
        }
    }

    // Shutdown: poison after the last dispatched iteration.
    if fault.is_none() {
        let wire = SchedulingWire::poison(next_dispatch, p);
        if let Err(e) =
            wire.encode().and_then(|b| in_prod.produce(next_dispatch, &b).map_err(Into::into))
        {
            fault = Some(e);
        }
    }
    let mut first_thread_err = None;
    for h in handles {
        match h.join() {
            Ok(Ok(())) => {}
            Ok(Err(e)) => {
                if first_thread_err.is_none() {
                    first_thread_err = Some(e);
                }
            }
            Err(_) => {
                if first_thread_err.is_none() {
                    first_thread_err = Some(PipelineError::Thread("panic".into()));
                }
            }
        }
    }
    server.shutdown();
    if let Some(e) = fault.or(first_thread_err) {
        return Err(e);
    }

    let wall = accept_time.values().copied().fold(0.0, f64::max);
    let iterations_run = accept_time.len() as u64;
    let summary = summarize(
        iterations_run,
        sched.finished_count(),
        &transcript,
        &accept_time,
        wall,
    );
    let mut timeline = Arc::try_unwrap(records)
        .map_err(|_| PipelineError::Thread("timeline still shared".into()))?
        .into_inner()
        .unwrap();
    timeline.retain(|r| !r.fwd_start.is_nan());
    timeline.sort_by_key(|r| (r.iteration, r.stage));
    Ok(RunOutput {
        features: feat,
        timeline,
        transcript,
        summary,
        hops: Vec::new(),
        tsem_counters: tsems.iter().map(|t| t.counters()).collect(),
    })
}

/// Column slice a drawing worker receives: filtered probabilities plus the
/// draw key material.
struct DrawColumn {
    column: usize,
    seq_id: u64,
    seed: u64,
    probs: Vec<f64>,
}

struct DrawJob {
    iteration: u64,
    columns: Vec<DrawColumn>,
}

struct DrawReply {
    iteration: u64,
    tokens: Vec<(u64, u32, usize)>,
}

fn sleep_s(seconds: f64) {
    // Sub-50us sleeps are noise on this clock; skip them.
    if seconds >= 50e-6 {
        std::thread::sleep(Duration::from_secs_f64(seconds));
    }
}
