//! From-scratch reference sampler used to check the incremental path.
//!
//! This module recomputes one decode step with no retained state: penalty
//! counts are rebuilt by scanning the full prompt and output history, the
//! logits live in plain row-major rows (one `Vec<f64>` per sequence), and the
//! chain (penalties, temperature, softmax, top-k/top-p/min-p, inverse-CDF
//! draw) is evaluated independently of the column-wise buffers.
//!
//! Scalar expression shapes and traversal order (ascending token id for every
//! accumulation) deliberately match the incremental path, so agreement is
//! exact on tokens and bitwise-tight on probabilities; tests still compare
//! with a small relative tolerance.

use crate::rng;
use crate::sampler::{SamplerError, SamplerReplica, SamplingParams};

/// One sequence's inputs for a reference step: full history plus this step's
/// raw logits row.
#[derive(Debug, Clone)]
pub struct ReferenceColumn {
    pub prompt: Vec<u32>,
    pub outputs: Vec<u32>,
    pub logits: Vec<f64>,
    pub params: SamplingParams,
}

/// Probabilities (post-filter, pre-draw) and the drawn token for each column.
#[derive(Debug, Clone)]
pub struct ReferenceStep {
    pub probs: Vec<Vec<f64>>,
    pub tokens: Vec<u32>,
}

/// Recomputes penalties from scratch for one sequence: frequency counts over
/// outputs, output presence indicator, prompt-or-output presence indicator.
pub fn recount_penalties(vocab: usize, prompt: &[u32], outputs: &[u32]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut freq = vec![0.0f64; vocab];
    let mut pres = vec![0.0f64; vocab];
    let mut rep = vec![0.0f64; vocab];
    for &t in prompt {
        rep[t as usize] = 1.0;
    }
    for &t in outputs {
        freq[t as usize] += 1.0;
        pres[t as usize] = 1.0;
        rep[t as usize] = 1.0;
    }
    (freq, pres, rep)
}

/// Runs the full chain for one sequence from scratch and returns the filtered
/// probability row and the drawn token.
pub fn reference_column_step(
    col: &ReferenceColumn,
    iteration: u64,
) -> Result<(Vec<f64>, u32), SamplerError> {
    let vocab = col.logits.len();
    if vocab == 0 {
        return Err(SamplerError::Shape("empty logits row".into()));
    }
    col.params.validate()?;
    for &t in col.prompt.iter().chain(&col.outputs) {
        if t as usize >= vocab {
            return Err(SamplerError::TokenOutOfRange(t, vocab));
        }
    }
    let (freq, pres, rep) = recount_penalties(vocab, &col.prompt, &col.outputs);
    let p = &col.params;

    let mut row = vec![0.0f64; vocab];
    for v in 0..vocab {
        let z = col.logits[v];
        // Same subtraction order as the incremental path.
        row[v] = ((z - p.alpha_freq * freq[v]) - p.alpha_pres * pres[v]) - p.alpha_rep * rep[v];
    }

    if p.temperature == 0.0 {
        let mut hot = 0usize;
        let mut best = f64::NEG_INFINITY;
        for (v, &x) in row.iter().enumerate() {
            if x > best {
                best = x;
                hot = v;
            }
        }
        for (v, x) in row.iter_mut().enumerate() {
            *x = if v == hot { 1.0 } else { 0.0 };
        }
    } else {
        let tau = p.temperature;
        let mut m = f64::NEG_INFINITY;
        for x in row.iter_mut() {
            *x /= tau;
            if *x > m {
                m = *x;
            }
        }
        if !m.is_finite() {
            return Err(SamplerError::EmptyColumn(0));
        }
        let mut sum = 0.0f64;
        for x in row.iter_mut() {
            *x = (*x - m).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }

    filter_row(&mut row, p);

    let mut cum = 0.0f64;
    let u = rng::unit_f64(p.seed, iteration);
    let mut token: Option<u32> = None;
    let mut last_nonzero: Option<u32> = None;
    for (v, &x) in row.iter().enumerate() {
        if x > 0.0 {
            last_nonzero = Some(v as u32);
            cum += x;
            if cum > u {
                token = Some(v as u32);
                break;
            }
        }
    }
    let token = token
        .or(last_nonzero)
        .ok_or(SamplerError::EmptyColumn(0))?;
    Ok((row, token))
}

/// top-k, then top-p, then min-p, then one renormalization; mirrors the
/// incremental filter exactly.
fn filter_row(row: &mut [f64], p: &SamplingParams) {
    if p.top_k.is_none() && p.top_p.is_none() && p.min_p.is_none() {
        return;
    }
    let mut order: Vec<(f64, usize)> = row.iter().copied().zip(0..).map(|(x, v)| (x, v)).collect();
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
        row[v] = 0.0;
    }
    let mut sum = 0.0f64;
    for &x in row.iter() {
        sum += x;
    }
    for x in row.iter_mut() {
        if *x != 0.0 {
            *x /= sum;
        }
    }
}

/// Runs a whole batch of reference columns for one iteration.
pub fn reference_step(cols: &[ReferenceColumn], iteration: u64) -> Result<ReferenceStep, SamplerError> {
    let mut probs = Vec::with_capacity(cols.len());
    let mut tokens = Vec::with_capacity(cols.len());
    for col in cols {
        let (row, tok) = reference_column_step(col, iteration)?;
        probs.push(row);
        tokens.push(tok);
    }
    Ok(ReferenceStep { probs, tokens })
}

/// Recomputes a replica's penalty buffers from scratch given the prompts the
/// replica was built from, reading the output history out of the replica.
/// Returns (freq, pres, rep) in the replica's vocab-major layout.
pub fn recount_replica(
    replica: &SamplerReplica,
    prompts: &[Vec<u32>],
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), SamplerError> {
    let v = replica.vocab();
    let b = replica.batch();
    if prompts.len() != b {
        return Err(SamplerError::Shape("prompt count must equal batch".into()));
    }
    let mut freq = vec![0.0f64; v * b];
    let mut pres = vec![0.0f64; v * b];
    let mut rep = vec![0.0f64; v * b];
    for c in 0..b {
        let outputs: Vec<u32> = (0..replica.column_len(c))
            .map(|s| replica.output_token(s, c))
            .collect();
        let (f, pr, rp) = recount_penalties(v, &prompts[c], &outputs);
        for vi in 0..v {
            freq[vi * b + c] = f[vi];
            pres[vi * b + c] = pr[vi];
            rep[vi * b + c] = rp[vi];
        }
    }
    Ok((freq, pres, rep))
}

// ─── Tests ───────────────────────────────────────────────────────────────
