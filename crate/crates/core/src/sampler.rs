//! Incremental column-wise token sampling.
//!
//! Logits live transposed (vocab-major, sequence-minor): entry (v, c) of a
//! V×B matrix sits at `data[v*B + c]`. Two consequences drive the design:
//!
//! - per-worker logits shards of shape (V/t)×B concatenate along the row
//!   dimension by plain buffer append, with no element reordering;
//! - the penalty state for one decode step touches exactly one row of each
//!   penalty buffer, so maintaining penalties across iterations costs O(B)
//!   writes instead of an O(V·B) rebuild.
//!
//! A replica owns the mutable per-sequence state for one microbatch identity:
//! a preallocated output buffer Y (L_max×B), three penalty buffers
//! (frequency count, output presence, prompt-or-output presence; all V×B),
//! and per-column parameters. The sampling chain is: subtractive penalties,
//! temperature scaling (temperature 0 selects greedy one-hot), softmax,
//! filters in the fixed order top-k then top-p then min-p with a single
//! renormalization at the end, and an inverse-CDF draw fed by the
//! counter-based generator keyed on (per-sequence seed, iteration).
//!
//! Every accumulation (softmax sums, cumulative distribution) runs in f64,
//! iterating token ids in ascending order; the from-scratch reference in
//! [`crate::oracle`] uses the same expression shapes and the same traversal
//! order, which is what makes the two paths token-identical.
//!
//! Concurrency: a replica is owned by exactly one worker at a time; distinct
//! replicas may run on distinct threads. Nothing here synchronizes.

use thiserror::Error;

use crate::rng;

// ─── Types ───────────────────────────────────────────────────────────────

/// Transposed logits/probabilities: V×B, vocab-major, entry (v, c) at
/// `data[v*b + c]`. Holds raw logits on ingestion and is mutated in place
/// through the chain into a filtered probability matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsMatrix {
    data: Vec<f64>,
    v: usize,
    b: usize,
}

impl LogitsMatrix {
    pub fn new(data: Vec<f64>, v: usize, b: usize) -> Result<Self, SamplerError> {
        if v == 0 || b == 0 || data.len() != v * b {
            return Err(SamplerError::Shape(format!(
                "logits buffer {} does not match {}x{}",
                data.len(),
                v,
                b
            )));
        }
        if !data.iter().all(|x| x.is_finite()) {
            return Err(SamplerError::NonFinite);
        }
        Ok(LogitsMatrix { data, v, b })
    }

    pub fn vocab(&self) -> usize {
        self.v
    }

    pub fn batch(&self) -> usize {
        self.b
    }

    #[inline]
    pub fn get(&self, v: usize, c: usize) -> f64 {
        self.data[v * self.b + c]
    }

    #[inline]
    pub fn set(&mut self, v: usize, c: usize, x: f64) {
        self.data[v * self.b + c] = x;
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.v).map(|v| self.get(v, c)).collect()
    }
}

/// Concatenates stage-ordered shards, each (V_i)×B, along the row dimension.
/// No element moves within a shard; the output buffer is the shards' buffers
/// appended in order.
pub fn assemble_shards(shards: &[LogitsMatrix]) -> Result<LogitsMatrix, SamplerError> {
    let first = shards.first().ok_or_else(|| SamplerError::Shape("no shards".into()))?;
    let b = first.b;
    let mut data = Vec::new();
    let mut v = 0usize;
    for s in shards {
        if s.b != b {
            return Err(SamplerError::Shape(format!(
                "shard batch {} does not match {}",
                s.b, b
            )));
        }
        v += s.v;
        data.extend_from_slice(&s.data);
    }
    LogitsMatrix::new(data, v, b)
}

/// Per-sequence sampling controls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingParams {
    /// Temperature; 0 selects greedy (argmax) decoding.
    pub temperature: f64,
    /// Keep the k most probable tokens; None disables.
    pub top_k: Option<usize>,
    /// Nucleus threshold in (0, 1]; None disables.
    pub top_p: Option<f64>,
    /// Drop tokens below min_p times the column max; None disables.
    pub min_p: Option<f64>,
    /// Frequency penalty weight (applied to output counts).
    pub alpha_freq: f64,
    /// Presence penalty weight (applied to the output indicator).
    pub alpha_pres: f64,
    /// Repetition penalty weight (applied to the prompt-or-output indicator).
    pub alpha_rep: f64,
    /// Per-sequence draw seed.
    pub seed: u64,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams {
            temperature: 1.0,
            top_k: None,
            top_p: None,
            min_p: None,
            alpha_freq: 0.0,
            alpha_pres: 0.0,
            alpha_rep: 0.0,
            seed: 0,
        }
    }
}

impl SamplingParams {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.temperature < 0.0 {
            return Err(SamplerError::BadParams("temperature must be >= 0".into()));
        }
        if let Some(k) = self.top_k {
            if k == 0 {
                return Err(SamplerError::BadParams("top_k must be >= 1".into()));
            }
        }
        if let Some(p) = self.top_p {
            if !(p > 0.0 && p <= 1.0) {
                return Err(SamplerError::BadParams("top_p must be in (0, 1]".into()));
            }
        }
        if let Some(mp) = self.min_p {
            if !(0.0..=1.0).contains(&mp) {
                return Err(SamplerError::BadParams("min_p must be in [0, 1]".into()));
            }
        }
        Ok(())
    }
}

/// One iteration's drawn tokens for a replica's active columns, in column
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingOutput {
    pub token_ids: Vec<u32>,
    pub iteration: u64,
    pub sampler_index: u32,
}

/// Which buffer a traced write landed in. Used by instrumentation that
/// asserts the incremental update touches exactly 3·B penalty entries and
/// B output entries per append.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TracedBuf {
    Freq,
    Pres,
    Rep,
    Output,
}

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("logits must be finite on ingestion")]
    NonFinite,
    #[error("token id {0} out of range for vocab {1}")]
    TokenOutOfRange(u32, usize),
    #[error("prompt length {0} exceeds maximum length {1}")]
    PromptTooLong(usize, usize),
    #[error("output buffer full for column {0}")]
    OutputOverflow(usize),
    #[error("column {0} has no finite probability mass")]
    EmptyColumn(usize),
    #[error("invalid sampling parameters: {0}")]
    BadParams(String),
    #[error("column {0} is out of range for batch {1}")]
    ColumnOutOfRange(usize, usize),
}

// ─── Replica ─────────────────────────────────────────────────────────────

/// Mutable sampling state for one microbatch identity (one of the p replicas
/// a sampler worker keeps).
///
/// Buffer footprint is exactly 3·V·B penalty elements plus L_max·B output
/// elements plus O(B) bookkeeping; prompts are not retained.
#[derive(Debug, Clone)]
pub struct SamplerReplica {
    v: usize,
    b: usize,
    l_max: usize,
    /// Output buffer, row-major: token for (step, c) at `y[step*b + c]`.
    y: Vec<u32>,
    /// Per-column generated-token count (fill cursor into `y`).
    len: Vec<usize>,
    /// Columns currently holding a live sequence.
    active: Vec<bool>,
    f_freq: Vec<f64>,
    f_pres: Vec<f64>,
    f_rep: Vec<f64>,
    params: Vec<SamplingParams>,
    seq_ids: Vec<u64>,
    /// Total append operations applied to this replica.
    steps: u64,
    /// Pool position stamped into outputs.
    pub sampler_index: u32,
}

impl SamplerReplica {
    /// Fresh replica: empty output buffer, zero frequency/presence buffers,
    /// repetition indicator seeded from the prompts.
    pub fn new(
        v: usize,
        b: usize,
        l_max: usize,
        seq_ids: &[u64],
        prompts: &[Vec<u32>],
        params: &[SamplingParams],
    ) -> Result<Self, SamplerError> {
        if v == 0 || b == 0 || l_max == 0 {
            return Err(SamplerError::Shape("v, b, l_max must be positive".into()));
        }
        if prompts.len() != b || params.len() != b || seq_ids.len() != b {
            return Err(SamplerError::Shape("per-column inputs must have length B".into()));
        }
        let mut r = SamplerReplica {
            v,
            b,
            l_max,
            y: vec![0; l_max * b],
            len: vec![0; b],
            active: vec![true; b],
            f_freq: vec![0.0; v * b],
            f_pres: vec![0.0; v * b],
            f_rep: vec![0.0; v * b],
            params: params.to_vec(),
            seq_ids: seq_ids.to_vec(),
            steps: 0,
            sampler_index: 0,
        };
        for (c, (prompt, p)) in prompts.iter().zip(params).enumerate() {
            p.validate()?;
            r.seed_rep_column(c, prompt)?;
        }
        Ok(r)
    }

    fn seed_rep_column(&mut self, c: usize, prompt: &[u32]) -> Result<(), SamplerError> {
        if prompt.len() > self.l_max {
            return Err(SamplerError::PromptTooLong(prompt.len(), self.l_max));
        }
        for &tok in prompt {
            if tok as usize >= self.v {
                return Err(SamplerError::TokenOutOfRange(tok, self.v));
            }
            self.f_rep[tok as usize * self.b + c] = 1.0;
        }
        Ok(())
    }

    pub fn vocab(&self) -> usize {
        self.v
    }

    pub fn batch(&self) -> usize {
        self.b
    }

    pub fn max_len(&self) -> usize {
        self.l_max
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn column_len(&self, c: usize) -> usize {
        self.len[c]
    }

    pub fn is_active(&self, c: usize) -> bool {
        self.active[c]
    }

    pub fn seq_id(&self, c: usize) -> u64 {
        self.seq_ids[c]
    }

    pub fn params(&self, c: usize) -> &SamplingParams {
        &self.params[c]
    }

    /// Generated token at (step, column); step < column_len(c).
    pub fn output_token(&self, step: usize, c: usize) -> u32 {
        debug_assert!(step < self.len[c]);
        self.y[step * self.b + c]
    }

    pub fn freq(&self, v: usize, c: usize) -> f64 {
        self.f_freq[v * self.b + c]
    }

    pub fn pres(&self, v: usize, c: usize) -> f64 {
        self.f_pres[v * self.b + c]
    }

    pub fn rep(&self, v: usize, c: usize) -> f64 {
        self.f_rep[v * self.b + c]
    }

    /// Element footprint of the mutable buffers: 3·V·B + L_max·B.
    pub fn buffer_elements(&self) -> usize {
        self.f_freq.len() + self.f_pres.len() + self.f_rep.len() + self.y.len()
    }

    /// Appends one token to every active column; `tokens` is full width B
    /// (entries for inactive columns are ignored).
    pub fn append_tokens(&mut self, tokens: &[u32]) -> Result<(), SamplerError> {
        self.append_tokens_traced(tokens, &mut |_, _, _| {})
    }

    /// Append with write instrumentation: `trace(buffer, row, column)` fires
    /// once per element written.
    pub fn append_tokens_traced(
        &mut self,
        tokens: &[u32],
        trace: &mut dyn FnMut(TracedBuf, usize, usize),
    ) -> Result<(), SamplerError> {
        if tokens.len() != self.b {
            return Err(SamplerError::Shape(format!(
                "append width {} does not match batch {}",
                tokens.len(),
                self.b
            )));
        }
        // Validate all columns first so a failed append mutates nothing.
        for c in 0..self.b {
            if !self.active[c] {
                continue;
            }
            if tokens[c] as usize >= self.v {
                return Err(SamplerError::TokenOutOfRange(tokens[c], self.v));
            }
            if self.len[c] >= self.l_max {
                return Err(SamplerError::OutputOverflow(c));
            }
        }
        for c in 0..self.b {
            if self.active[c] {
                self.append_one(c, tokens[c], trace);
            }
        }
        self.steps += 1;
        Ok(())
    }

    /// Appends one token to a single active column (used when a microbatch
    /// runs partially filled).
    pub fn append_token_at(
        &mut self,
        c: usize,
        token: u32,
        trace: &mut dyn FnMut(TracedBuf, usize, usize),
    ) -> Result<(), SamplerError> {
        if c >= self.b {
            return Err(SamplerError::ColumnOutOfRange(c, self.b));
        }
        if token as usize >= self.v {
            return Err(SamplerError::TokenOutOfRange(token, self.v));
        }
        if self.len[c] >= self.l_max {
            return Err(SamplerError::OutputOverflow(c));
        }
        self.append_one(c, token, trace);
        Ok(())
    }

    fn append_one(&mut self, c: usize, token: u32, trace: &mut dyn FnMut(TracedBuf, usize, usize)) {
        let step = self.len[c];
        let vi = token as usize;
        self.y[step * self.b + c] = token;
        trace(TracedBuf::Output, step, c);
        self.f_freq[vi * self.b + c] += 1.0;
        trace(TracedBuf::Freq, vi, c);
        self.f_pres[vi * self.b + c] = 1.0;
        trace(TracedBuf::Pres, vi, c);
        self.f_rep[vi * self.b + c] = 1.0;
        trace(TracedBuf::Rep, vi, c);
        self.len[c] = step + 1;
    }

    /// Clears a column and installs a new sequence (or leaves the column
    /// inactive when `admit` is None). Only that column's state changes.
    pub fn evict_and_admit(
        &mut self,
        c: usize,
        admit: Option<(u64, &[u32], SamplingParams)>,
    ) -> Result<(), SamplerError> {
        if c >= self.b {
            return Err(SamplerError::ColumnOutOfRange(c, self.b));
        }
        for step in 0..self.l_max {
            self.y[step * self.b + c] = 0;
        }
        self.len[c] = 0;
        for v in 0..self.v {
            self.f_freq[v * self.b + c] = 0.0;
            self.f_pres[v * self.b + c] = 0.0;
            self.f_rep[v * self.b + c] = 0.0;
        }
        match admit {
            Some((seq_id, prompt, params)) => {
                params.validate()?;
                self.seed_rep_column(c, prompt)?;
                self.seq_ids[c] = seq_id;
                self.params[c] = params;
                self.active[c] = true;
            }
            None => {
                self.active[c] = false;
            }
        }
        Ok(())
    }
}

// ─── Chain ───────────────────────────────────────────────────────────────

/// Subtracts the weighted penalty buffers from the logits in place:
/// Z := Z − alpha_freq⊙f_freq − alpha_pres⊙f_pres − alpha_rep⊙f_rep,
/// each alpha a per-column scalar broadcast down its column.
pub fn apply_penalties(logits: &mut LogitsMatrix, replica: &SamplerReplica) -> Result<(), SamplerError> {
    check_shapes(logits, replica)?;
    let b = replica.b;
    for c in 0..b {
        if !replica.active[c] {
            continue;
        }
        let p = &replica.params[c];
        for v in 0..replica.v {
            let i = v * b + c;
            let z = logits.data[i];
            // Expression shape shared with the reference path; keep the
            // subtraction order.
            logits.data[i] =
                ((z - p.alpha_freq * replica.f_freq[i]) - p.alpha_pres * replica.f_pres[i])
                    - p.alpha_rep * replica.f_rep[i];
        }
    }
    Ok(())
}

/// Scales by temperature and converts each active column to probabilities in
/// place. Temperature 0 produces a one-hot column at the argmax (lower token
/// id wins ties); otherwise a numerically stabilized softmax accumulated in
/// f64 over ascending token ids.
pub fn temperature_softmax(
    logits: &mut LogitsMatrix,
    replica: &SamplerReplica,
) -> Result<(), SamplerError> {
    check_shapes(logits, replica)?;
    let b = replica.b;
    for c in 0..b {
        if !replica.active[c] {
            continue;
        }
        let tau = replica.params[c].temperature;
        if tau == 0.0 {
            let hot = column_argmax(logits, c);
            for v in 0..replica.v {
                logits.data[v * b + c] = if v == hot { 1.0 } else { 0.0 };
            }
            continue;
        }
        let mut m = f64::NEG_INFINITY;
        for v in 0..replica.v {
            let z = logits.data[v * b + c] / tau;
            logits.data[v * b + c] = z;
            if z > m {
                m = z;
            }
        }
        if !m.is_finite() {
            return Err(SamplerError::EmptyColumn(c));
        }
        let mut sum = 0.0f64;
        for v in 0..replica.v {
            let e = (logits.data[v * b + c] - m).exp();
            logits.data[v * b + c] = e;
            sum += e;
        }
        for v in 0..replica.v {
            logits.data[v * b + c] /= sum;
        }
    }
    Ok(())
}

/// Argmax of a column with lower-id tie-breaking.
fn column_argmax(m: &LogitsMatrix, c: usize) -> usize {
    let mut best = 0usize;
    let mut best_val = f64::NEG_INFINITY;
    for v in 0..m.v {
        let x = m.get(v, c);
        if x > best_val {
            best_val = x;
            best = v;
        }
    }
    best
}

/// Applies top-k, top-p, and min-p in that fixed order to each active
/// column, then renormalizes the survivors once. The column maximum always
/// survives, so a column can never be emptied.
///
/// top-p keeps the smallest prefix of the descending-sorted survivors whose
/// cumulative (pre-renormalization) probability reaches the threshold; if the
/// surviving mass never reaches it, everything is kept. min-p drops entries
/// strictly below min_p times the surviving maximum.
pub fn filter(probs: &mut LogitsMatrix, replica: &SamplerReplica) -> Result<(), SamplerError> {
    check_shapes(probs, replica)?;
    let b = replica.b;
    let vn = replica.v;
    // (probability, id) scratch reused across columns.
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(vn);
    for c in 0..b {
        if !replica.active[c] {
            continue;
        }
        let p = &replica.params[c];
        if p.top_k.is_none() && p.top_p.is_none() && p.min_p.is_none() {
            continue;
        }
        order.clear();
        for v in 0..vn {
            order.push((probs.get(v, c), v));
        }
        // Descending probability, ascending id on ties.
        order.sort_unstable_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));

        let mut keep = order.len();
        if let Some(k) = p.top_k {
            keep = keep.min(k);
        }
        if let Some(tp) = p.top_p {
            let mut cum = 0.0f64;
            let mut cut = keep;
            for (i, &(prob, _)) in order[..keep].iter().enumerate() {
                cum += prob;
                if cum >= tp {
                    cut = i + 1;
                    break;
                }
            }
            keep = cut;
        }
        if let Some(mp) = p.min_p {
            let threshold = mp * order[0].0;
            while keep > 1 && order[keep - 1].0 < threshold {
                keep -= 1;
            }
        }

        for &(_, v) in &order[keep..] {
            probs.set(v, c, 0.0);
        }
        // Single renormalization over ascending ids.
        let mut sum = 0.0f64;
        for v in 0..vn {
            sum += probs.get(v, c);
        }
        for v in 0..vn {
            let x = probs.get(v, c);
            if x != 0.0 {
                probs.set(v, c, x / sum);
            }
        }
    }
    Ok(())
}

/// Draws one token per active column by inverse CDF: u from the
/// counter-based generator keyed on (per-sequence seed, iteration), token is
/// the smallest id whose cumulative probability exceeds u. Appends the drawn
/// tokens to the replica.
pub fn sample(
    probs: &LogitsMatrix,
    replica: &mut SamplerReplica,
    iteration: u64,
) -> Result<SamplingOutput, SamplerError> {
    check_shapes(probs, replica)?;
    let b = replica.b;
    let mut tokens = Vec::with_capacity(b);
    for c in 0..b {
        if !replica.active[c] {
            continue;
        }
        let u = rng::unit_f64(replica.params[c].seed, iteration);
        tokens.push((c, draw_column(probs, c, u)?));
    }
    for &(c, tok) in &tokens {
        replica.append_token_at(c, tok, &mut |_, _, _| {})?;
    }
    replica.steps += 1;
    Ok(SamplingOutput {
        token_ids: tokens.into_iter().map(|(_, t)| t).collect(),
        iteration,
        sampler_index: replica.sampler_index,
    })
}

/// Inverse-CDF pick: smallest v with cumulative probability > u, walking
/// ascending ids. Falls back to the last nonzero entry if rounding leaves
/// the total a hair under u.
pub(crate) fn draw_column(probs: &LogitsMatrix, c: usize, u: f64) -> Result<u32, SamplerError> {
    let mut cum = 0.0f64;
    let mut last_nonzero: Option<usize> = None;
    for v in 0..probs.v {
        let p = probs.get(v, c);
        if p > 0.0 {
            last_nonzero = Some(v);
            cum += p;
            if cum > u {
                return Ok(v as u32);
            }
        }
    }
    last_nonzero
        .map(|v| v as u32)
        .ok_or(SamplerError::EmptyColumn(c))
}

fn check_shapes(m: &LogitsMatrix, r: &SamplerReplica) -> Result<(), SamplerError> {
    if m.v != r.v || m.b != r.b {
        return Err(SamplerError::Shape(format!(
            "matrix {}x{} does not match replica {}x{}",
            m.v, m.b, r.v, r.b
        )));
    }
    Ok(())
}

// ─── Tests ───────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_params() -> SamplingParams {
        SamplingParams::default()
    }

    fn replica(v: usize, b: usize, l_max: usize, prompts: &[Vec<u32>]) -> SamplerReplica {
        let params = vec![uniform_params(); b];
        let ids: Vec<u64> = (0..b as u64).collect();
        SamplerReplica::new(v, b, l_max, &ids, prompts, &params).unwrap()
    }

    fn matrix(v: usize, b: usize, f: impl Fn(usize, usize) -> f64) -> LogitsMatrix {
        let mut data = vec![0.0; v * b];
        for vi in 0..v {
            for c in 0..b {
                data[vi * b + c] = f(vi, c);
            }
        }
        LogitsMatrix::new(data, v, b).unwrap()
    }

    // ── construction ──

    #[test]
    fn fresh_replica_has_zero_buffers_for_empty_prompts() {
        let r = replica(8, 3, 4, &[vec![], vec![], vec![]]);
        for v in 0..8 {
            for c in 0..3 {
                assert_eq!(r.freq(v, c), 0.0);
                assert_eq!(r.pres(v, c), 0.0);
                assert_eq!(r.rep(v, c), 0.0);
            }
        }
    }

    #[test]
    fn prompt_tokens_set_rep_indicator_only() {
        let r = replica(16, 2, 4, &[vec![3, 3, 7], vec![]]);
        assert_eq!(r.rep(3, 0), 1.0);
        assert_eq!(r.rep(7, 0), 1.0);
        assert_eq!(r.freq(3, 0), 0.0);
        assert_eq!(r.pres(3, 0), 0.0);
        assert_eq!(r.rep(3, 1), 0.0);
    }

    #[test]
    fn full_vocab_prompt_fills_rep_column() {
        let r = replica(4, 1, 8, &[vec![0, 1, 2, 3]]);
        for v in 0..4 {
            assert_eq!(r.rep(v, 0), 1.0);
        }
    }

    #[test]
    fn prompt_longer_than_max_len_rejected() {
        let params = vec![uniform_params()];
        let err = SamplerReplica::new(8, 1, 2, &[0], &[vec![1, 2, 3]], &params);
        assert!(matches!(err, Err(SamplerError::PromptTooLong(3, 2))));
    }

    #[test]
    fn replica_footprint_is_three_penalty_buffers_plus_output() {
        let r = replica(32, 4, 16, &[vec![], vec![], vec![], vec![]]);
        assert_eq!(r.buffer_elements(), 3 * 32 * 4 + 16 * 4);
    }

    // ── append ──

    #[test]
    fn repeated_append_accumulates_frequency() {
        let mut r = replica(8, 1, 4, &[vec![]]);
        r.append_tokens(&[5]).unwrap();
        r.append_tokens(&[5]).unwrap();
        assert_eq!(r.freq(5, 0), 2.0);
        assert_eq!(r.pres(5, 0), 1.0);
        assert_eq!(r.column_len(0), 2);
        assert_eq!(r.output_token(0, 0), 5);
        assert_eq!(r.output_token(1, 0), 5);
    }

    #[test]
    fn appending_prompt_token_leaves_rep_unchanged() {
        let mut r = replica(8, 1, 4, &[vec![5]]);
        assert_eq!(r.rep(5, 0), 1.0);
        r.append_tokens(&[5]).unwrap();
        assert_eq!(r.rep(5, 0), 1.0);
    }

    #[test]
    fn append_writes_exactly_3b_penalty_and_b_output_entries() {
        let mut r = replica(16, 4, 8, &[vec![], vec![], vec![], vec![]]);
        let mut counts = [0usize; 4];
        r.append_tokens_traced(&[1, 2, 3, 1], &mut |buf, _, _| {
            counts[match buf {
                TracedBuf::Freq => 0,
                TracedBuf::Pres => 1,
                TracedBuf::Rep => 2,
                TracedBuf::Output => 3,
            }] += 1;
        })
        .unwrap();
        assert_eq!(counts, [4, 4, 4, 4]);
    }

    #[test]
    fn append_past_max_len_rejected_without_mutation() {
        let mut r = replica(8, 2, 1, &[vec![], vec![]]);
        r.append_tokens(&[1, 2]).unwrap();
        let before = r.clone();
        assert!(matches!(r.append_tokens(&[3, 4]), Err(SamplerError::OutputOverflow(_))));
        assert_eq!(r.freq(3, 0), before.freq(3, 0));
        assert_eq!(r.column_len(0), 1);
    }

    #[test]
    fn append_rejects_out_of_vocab_token() {
        let mut r = replica(8, 1, 4, &[vec![]]);
        assert!(matches!(
            r.append_tokens(&[8]),
            Err(SamplerError::TokenOutOfRange(8, 8))
        ));
    }

    // ── evict/admit ──

    #[test]
    fn evict_and_admit_rebuilds_column_from_new_prompt_only() {
        let mut r = replica(8, 2, 4, &[vec![1], vec![2]]);
        r.append_tokens(&[3, 4]).unwrap();
        r.evict_and_admit(0, Some((9, &[6], uniform_params()))).unwrap();
        assert_eq!(r.column_len(0), 0);
        assert_eq!(r.freq(3, 0), 0.0);
        assert_eq!(r.rep(1, 0), 0.0);
        assert_eq!(r.rep(6, 0), 1.0);
        assert_eq!(r.seq_id(0), 9);
    }

    #[test]
    fn admitting_empty_prompt_clears_rep_column() {
        let mut r = replica(8, 1, 4, &[vec![1, 2, 3]]);
        r.evict_and_admit(0, Some((1, &[], uniform_params()))).unwrap();
        for v in 0..8 {
            assert_eq!(r.rep(v, 0), 0.0);
        }
    }

    #[test]
    fn evict_leaves_neighbor_columns_bit_identical() {
        let mut r = replica(8, 3, 4, &[vec![1], vec![2, 3], vec![4]]);
        r.append_tokens(&[5, 6, 7]).unwrap();
        let before = r.clone();
        r.evict_and_admit(1, Some((42, &[0], uniform_params()))).unwrap();
        for v in 0..8 {
            for c in [0usize, 2] {
                assert_eq!(r.freq(v, c).to_bits(), before.freq(v, c).to_bits());
                assert_eq!(r.pres(v, c).to_bits(), before.pres(v, c).to_bits());
                assert_eq!(r.rep(v, c).to_bits(), before.rep(v, c).to_bits());
            }
        }
        assert_eq!(r.column_len(0), 1);
        assert_eq!(r.column_len(2), 1);
    }

    #[test]
    fn evicted_column_without_admission_goes_inactive() {
        let mut r = replica(8, 2, 4, &[vec![], vec![]]);
        r.evict_and_admit(1, None).unwrap();
        assert!(!r.is_active(1));
        r.append_tokens(&[1, 7]).unwrap(); // column 1 entry ignored
        assert_eq!(r.column_len(1), 0);
        assert_eq!(r.column_len(0), 1);
    }

    // ── shards ──

    #[test]
    fn single_shard_assembles_to_itself() {
        let m = matrix(4, 2, |v, c| (v * 2 + c) as f64);
        let out = assemble_shards(std::slice::from_ref(&m)).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn two_column_shards_concatenate_rows_in_order() {
        let a = LogitsMatrix::new(vec![1.0, 2.0], 2, 1).unwrap();
        let b = LogitsMatrix::new(vec![3.0, 4.0], 2, 1).unwrap();
        let out = assemble_shards(&[a, b]).unwrap();
        assert_eq!(out.vocab(), 4);
        assert_eq!(
            (0..4).map(|v| out.get(v, 0)).collect::<Vec<_>>(),
            vec![1.0, 2.0, 3.0, 4.0]
        );
    }

    #[test]
    fn assembled_row_maps_to_shard_by_index_arithmetic() {
        // V=8, t=4 shards of 2 rows each, B=3.
        let shards: Vec<LogitsMatrix> = (0..4)
            .map(|s| matrix(2, 3, |v, c| (s * 100 + v * 10 + c) as f64))
            .collect();
        let out = assemble_shards(&shards).unwrap();
        for r in 0..8 {
            for c in 0..3 {
                assert_eq!(out.get(r, c), shards[r / 2].get(r % 2, c));
            }
        }
    }

    #[test]
    fn mismatched_shard_batch_rejected() {
        let a = matrix(2, 2, |_, _| 0.0);
        let b = matrix(2, 3, |_, _| 0.0);
        assert!(assemble_shards(&[a, b]).is_err());
    }

    // ── penalties ──

    #[test]
    fn zero_alphas_leave_logits_unchanged() {
        let r = replica(4, 1, 4, &[vec![1, 2]]);
        let mut m = matrix(4, 1, |v, _| v as f64);
        let before = m.clone();
        apply_penalties(&mut m, &r).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn frequency_penalty_scalar_hand_check() {
        let mut params = uniform_params();
        params.alpha_freq = 1.0;
        let mut r =
            SamplerReplica::new(8, 1, 4, &[0], &[vec![]], &[params]).unwrap();
        r.append_tokens(&[5]).unwrap();
        r.append_tokens(&[5]).unwrap();
        let mut m = matrix(8, 1, |v, _| if v == 5 { 1.0 } else { 0.0 });
        apply_penalties(&mut m, &r).unwrap();
        assert_eq!(m.get(5, 0), -1.0);
    }

    // ── temperature/softmax ──

    #[test]
    fn uniform_logits_give_uniform_probabilities() {
        let r = replica(5, 1, 4, &[vec![]]);
        let mut m = matrix(5, 1, |_, _| 3.25);
        temperature_softmax(&mut m, &r).unwrap();
        for v in 0..5 {
            assert!((m.get(v, 0) - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_temperature_is_one_hot_at_argmax() {
        let mut params = uniform_params();
        params.temperature = 0.0;
        let r = SamplerReplica::new(4, 1, 4, &[0], &[vec![]], &[params]).unwrap();
        let mut m = matrix(4, 1, |v, _| if v == 3 { 9.0 } else { 1.0 });
        temperature_softmax(&mut m, &r).unwrap();
        assert_eq!(m.column(0), vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn zero_temperature_ties_pick_lower_id() {
        let mut params = uniform_params();
        params.temperature = 0.0;
        let r = SamplerReplica::new(4, 1, 4, &[0], &[vec![]], &[params]).unwrap();
        let mut m = matrix(4, 1, |_, _| 2.0);
        temperature_softmax(&mut m, &r).unwrap();
        assert_eq!(m.column(0), vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn two_entry_softmax_hand_check() {
        let r = replica(2, 1, 4, &[vec![]]);
        let mut m = LogitsMatrix::new(vec![0.0, 3.0f64.ln()], 2, 1).unwrap();
        temperature_softmax(&mut m, &r).unwrap();
        assert!((m.get(0, 0) - 0.25).abs() < 1e-12);
        assert!((m.get(1, 0) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn columns_sum_to_one_after_softmax() {
        let r = replica(33, 4, 4, &[vec![], vec![], vec![], vec![]]);
        let mut m = matrix(33, 4, |v, c| ((v * 7 + c * 13) % 11) as f64 - 5.0);
        temperature_softmax(&mut m, &r).unwrap();
        for c in 0..4 {
            let s: f64 = (0..33).map(|v| m.get(v, c)).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    // ── filters ──

    fn filtered(probs: Vec<f64>, params: SamplingParams) -> Vec<f64> {
        let v = probs.len();
        let r = SamplerReplica::new(v, 1, 4, &[0], &[vec![]], &[params]).unwrap();
        let mut m = LogitsMatrix::new(probs, v, 1).unwrap();
        filter(&mut m, &r).unwrap();
        m.column(0)
    }

    #[test]
    fn top_k_one_is_one_hot_at_argmax() {
        let mut p = uniform_params();
        p.top_k = Some(1);
        let out = filtered(vec![0.2, 0.5, 0.3], p);
        assert_eq!(out, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn nucleus_hand_check() {
        let mut p = uniform_params();
        p.top_p = Some(0.7);
        let out = filtered(vec![0.5, 0.3, 0.2], p);
        assert!((out[0] - 0.625).abs() < 1e-12);
        assert!((out[1] - 0.375).abs() < 1e-12);
        assert_eq!(out[2], 0.0);
    }

    #[test]
    fn identity_filters_change_nothing() {
        let mut p = uniform_params();
        p.top_k = Some(3);
        p.top_p = Some(1.0);
        p.min_p = Some(0.0);
        let input = vec![0.5, 0.3, 0.2];
        let out = filtered(input.clone(), p);
        for (a, b) in out.iter().zip(&input) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn min_p_drops_entries_below_scaled_max() {
        let mut p = uniform_params();
        p.min_p = Some(0.5);
        let out = filtered(vec![0.6, 0.25, 0.15], p);
        // threshold 0.3: only 0.6 survives.
        assert_eq!(out[1], 0.0);
        assert_eq!(out[2], 0.0);
        assert!((out[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn max_probability_always_survives() {
        let mut p = uniform_params();
        p.top_k = Some(1);
        p.top_p = Some(0.01);
        p.min_p = Some(1.0);
        let out = filtered(vec![0.25, 0.4, 0.35], p);
        assert!((out[1] - 1.0).abs() < 1e-12);
    }

    // ── draws ──

    #[test]
    fn one_hot_column_always_returns_hot_token() {
        let m = LogitsMatrix::new(vec![0.0, 1.0, 0.0], 3, 1).unwrap();
        for u in [0.0, 0.3, 0.999_999] {
            assert_eq!(draw_column(&m, 0, u).unwrap(), 1);
        }
    }

    #[test]
    fn inverse_cdf_hand_check() {
        let m = LogitsMatrix::new(vec![0.25, 0.75], 2, 1).unwrap();
        assert_eq!(draw_column(&m, 0, 0.5).unwrap(), 1);
        assert_eq!(draw_column(&m, 0, 0.2).unwrap(), 0);
        assert_eq!(draw_column(&m, 0, 0.25).unwrap(), 1);
    }

    #[test]
    fn sampling_is_deterministic_per_seed_and_iteration() {
        let mk = || {
            let mut params = uniform_params();
            params.seed = 77;
            SamplerReplica::new(4, 1, 8, &[0], &[vec![]], &[params]).unwrap()
        };
        let probs = LogitsMatrix::new(vec![0.1, 0.2, 0.3, 0.4], 4, 1).unwrap();
        let mut r1 = mk();
        let mut r2 = mk();
        let a = sample(&probs, &mut r1, 3).unwrap();
        let b = sample(&probs, &mut r2, 3).unwrap();
        assert_eq!(a.token_ids, b.token_ids);
        let c = sample(&probs, &mut mk(), 4).unwrap();
        // Different iteration may differ; determinism is per (seed, iteration).
        assert_eq!(c.iteration, 4);
    }

    #[test]
    fn sample_appends_drawn_tokens() {
        let mut r = replica(4, 2, 8, &[vec![], vec![]]);
        let probs = matrix(4, 2, |v, _| if v == 2 { 1.0 } else { 0.0 });
        let out = sample(&probs, &mut r, 0).unwrap();
        assert_eq!(out.token_ids, vec![2, 2]);
        assert_eq!(r.column_len(0), 1);
        assert_eq!(r.output_token(0, 0), 2);
        assert_eq!(r.freq(2, 1), 1.0);
    }
}
