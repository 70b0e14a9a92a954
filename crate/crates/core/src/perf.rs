//! Analytic throughput/delay models and configuration sweeps.
//!
//! Closed-form estimates for decode-phase model parallelism:
//!
//! - pure tensor parallelism (two allreduces per layer),
//! - pure pipeline parallelism (staged compute plus inter-stage transfers),
//! - hybrid (both enabled, p·t = N),
//! - multi-node variants where part of the traffic crosses a slower
//!   inter-host network,
//!
//! plus the per-GPU communication-volume formula and a sweep that enumerates
//! every (p, t) factorization of a GPU budget under a latency SLO.
//!
//! Conventions: times in seconds, bandwidths in bytes/second. The tensor term
//! s·b·h is converted to bytes via `bytes_per_element` before any division by
//! bandwidth. log2(1) = 0 exactly; no other special cases.
//!
//! All functions are pure; call them from any thread.

use serde::{Deserialize, Serialize};
use thiserror::Error;

// ─── Specs ───────────────────────────────────────────────────────────────

/// Static model description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Transformer layer count (the L of the formulas).
    pub layers: u64,
    /// Per-layer compute time on one GPU, seconds.
    pub per_layer_compute_s: f64,
    /// Context length s, tokens.
    pub seq_len: u64,
    /// Batch size b, sequences.
    pub batch: u64,
    /// Hidden size h, elements.
    pub hidden: u64,
    /// Bytes per tensor element (2 for half, 4 for single, ...).
    pub bytes_per_element: u64,
    /// Vocabulary size (consumed by the sampler and channels, not the
    /// formulas here).
    pub vocab: u64,
    /// Maximum sequence length, tokens.
    pub max_len: u64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), PerfError> {
        let positive = self.layers > 0
            && self.per_layer_compute_s > 0.0
            && self.seq_len > 0
            && self.batch > 0
            && self.hidden > 0
            && self.bytes_per_element > 0
            && self.vocab > 0
            && self.max_len > 0;
        if !positive {
            return Err(PerfError::Invalid("model fields must be strictly positive".into()));
        }
        if self.max_len < self.seq_len {
            return Err(PerfError::Invalid("max_len must be >= seq_len".into()));
        }
        Ok(())
    }

    /// s·b·h in bytes.
    fn sbh_bytes(&self) -> f64 {
        (self.seq_len as f64) * (self.batch as f64) * (self.hidden as f64)
            * (self.bytes_per_element as f64)
    }
}

/// Deployment description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterSpec {
    /// Total GPUs N.
    pub gpus: u64,
    /// Pipeline-parallel degree p.
    pub pp_degree: u64,
    /// Tensor-parallel degree t.
    pub tp_degree: u64,
    /// Communication launch delay alpha, seconds.
    pub launch_delay_s: f64,
    /// Intra-node link bandwidth B1, bytes/second.
    pub intra_bw: f64,
    /// Inter-node link bandwidth B2, bytes/second.
    pub inter_bw: f64,
    /// Microbatch count m; None means m = p (one in flight per stage).
    pub microbatches: Option<u64>,
    /// Host count n.
    pub hosts: u64,
}

impl ClusterSpec {
    pub fn validate(&self) -> Result<(), PerfError> {
        if self.pp_degree == 0 || self.tp_degree == 0 {
            return Err(PerfError::ZeroDegree);
        }
        if self.pp_degree * self.tp_degree != self.gpus {
            return Err(PerfError::Invalid(format!(
                "pp_degree * tp_degree must equal gpus ({} * {} != {})",
                self.pp_degree, self.tp_degree, self.gpus
            )));
        }
        if self.hosts == 0 {
            return Err(PerfError::Invalid("hosts must be >= 1".into()));
        }
        if !(self.inter_bw > 0.0) || self.intra_bw < self.inter_bw {
            return Err(PerfError::Invalid("need intra_bw >= inter_bw > 0".into()));
        }
        if self.microbatches == Some(0) {
            return Err(PerfError::Invalid("microbatches must be >= 1".into()));
        }
        if !(self.launch_delay_s >= 0.0) {
            return Err(PerfError::Invalid("launch_delay_s must be >= 0".into()));
        }
        Ok(())
    }

    /// Effective microbatch count: explicit m, or p.
    pub fn effective_microbatches(&self) -> u64 {
        self.microbatches.unwrap_or(self.pp_degree)
    }
}

/// Which closed-form model produced an estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParallelMode {
    Tp,
    Pp,
    Hybrid,
    MultinodeTp,
    MultinodePp,
    MultinodeHybrid,
}

/// Throughput/delay estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerfEstimate {
    /// Tokens per second.
    pub throughput: f64,
    /// Seconds per token.
    pub delay: f64,
    pub mode: ParallelMode,
}

#[derive(Debug, Error)]
pub enum PerfError {
    #[error("parallel degree must be nonzero")]
    ZeroDegree,
    #[error("invalid model or cluster description: {0}")]
    Invalid(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
}

// ─── Communication volume ────────────────────────────────────────────────

/// Per-GPU communication volume in elements for a (p, t) split:
/// b·h·(4·L·(t−1)/(p·t) + p − 1).
///
/// The result is a real number; it is fractional whenever p·t does not
/// divide 4·L·(t−1).
pub fn comm_volume(model: &ModelSpec, p: u64, t: u64) -> Result<f64, PerfError> {
    if p == 0 || t == 0 {
        return Err(PerfError::ZeroDegree);
    }
    model.validate()?;
    let b = model.batch as f64;
    let h = model.hidden as f64;
    let l = model.layers as f64;
    Ok(b * h * (4.0 * l * (t as f64 - 1.0) / ((p * t) as f64) + p as f64 - 1.0))
}

// ─── Closed-form estimates ───────────────────────────────────────────────

/// Allreduce communication cost of tensor parallelism on N GPUs over a link
/// of bandwidth `bw`: 2·L·(alpha·log2(N) + 2·sbh/bw). Two allreduces per
/// layer, each costing a launch plus two transfer units.
pub fn tp_comm_cost(model: &ModelSpec, gpus: u64, launch_delay_s: f64, bw: f64) -> f64 {
    let l = model.layers as f64;
    2.0 * l * (launch_delay_s * (gpus as f64).log2() + 2.0 * model.sbh_bytes() / bw)
}

/// Pure tensor parallelism (requires pp_degree = 1).
pub fn eval_tp(model: &ModelSpec, cluster: &ClusterSpec) -> Result<PerfEstimate, PerfError> {
    model.validate()?;
    cluster.validate()?;
    if cluster.pp_degree != 1 {
        return Err(PerfError::Precondition("eval_tp requires pp_degree = 1".into()));
    }
    let l = model.layers as f64;
    let c = model.per_layer_compute_s;
    let n = cluster.gpus as f64;
    let delay = l * c / n
        + 2.0 * l * cluster.launch_delay_s * n.log2()
        + 4.0 * model.sbh_bytes() * l / cluster.intra_bw;
    finish(model.batch as f64 / delay, delay, ParallelMode::Tp)
}

/// Per-stage latency of pure pipeline parallelism: L·C/N + sbh/B1.
pub fn pp_stage_latency(model: &ModelSpec, cluster: &ClusterSpec) -> f64 {
    let l = model.layers as f64;
    l * model.per_layer_compute_s / cluster.gpus as f64 + model.sbh_bytes() / cluster.intra_bw
}

/// Pure pipeline parallelism (requires tp_degree = 1).
pub fn eval_pp(model: &ModelSpec, cluster: &ClusterSpec) -> Result<PerfEstimate, PerfError> {
    model.validate()?;
    cluster.validate()?;
    if cluster.tp_degree != 1 {
        return Err(PerfError::Precondition("eval_pp requires tp_degree = 1".into()));
    }
    let m = cluster.effective_microbatches();
    if m == 0 {
        return Err(PerfError::Precondition("microbatch count must be nonzero".into()));
    }
    let l = model.layers as f64;
    let c = model.per_layer_compute_s;
    let n = cluster.gpus as f64;
    let throughput = (model.batch as f64 / m as f64) / pp_stage_latency(model, cluster);
    let delay = l * c + (n - 1.0) * model.sbh_bytes() / cluster.intra_bw;
    finish(throughput, delay, ParallelMode::Pp)
}

/// Hybrid parallelism, p·t = N. Implemented verbatim; at t = 1 the
/// 2L/p · 2sbh/B1 term remains (it does not reduce to the pure-pipeline
/// form), which is a property of the formula itself.
pub fn eval_hybrid(model: &ModelSpec, cluster: &ClusterSpec) -> Result<PerfEstimate, PerfError> {
    model.validate()?;
    cluster.validate()?;
    let l = model.layers as f64;
    let c = model.per_layer_compute_s;
    let n = cluster.gpus as f64;
    let p = cluster.pp_degree as f64;
    let t = cluster.tp_degree as f64;
    let m = cluster.effective_microbatches() as f64;
    let sbh = model.sbh_bytes();
    let comm = (2.0 * l / p)
        * (cluster.launch_delay_s * t.log2() + 2.0 * sbh / cluster.intra_bw);
    let throughput = (model.batch as f64 / m) / (l * c / n + sbh / cluster.intra_bw + comm);
    let delay = p * (l * c / n + comm) + (p - 1.0) * sbh / cluster.intra_bw;
    finish(throughput, delay, ParallelMode::Hybrid)
}

/// Multi-node estimates. `mode` selects the variant; hosts must satisfy
/// 2 <= hosts <= gpus. For the pipeline variant, the hosts − 1 inter-stage
/// transfers that cross hosts run at B2 and the remaining N − hosts at B1.
pub fn eval_multinode(
    model: &ModelSpec,
    cluster: &ClusterSpec,
    mode: ParallelMode,
) -> Result<PerfEstimate, PerfError> {
    model.validate()?;
    cluster.validate()?;
    if cluster.hosts < 2 {
        return Err(PerfError::Precondition("multinode evaluation requires hosts >= 2".into()));
    }
    if cluster.hosts > cluster.gpus {
        return Err(PerfError::Precondition("hosts must not exceed gpus".into()));
    }
    let l = model.layers as f64;
    let c = model.per_layer_compute_s;
    let n = cluster.gpus as f64;
    let hosts = cluster.hosts as f64;
    let m = cluster.effective_microbatches() as f64;
    let sbh = model.sbh_bytes();
    let b1 = cluster.intra_bw;
    let b2 = cluster.inter_bw;
    let alpha = cluster.launch_delay_s;

    match mode {
        ParallelMode::MultinodeTp => {
            let delay = l * c / n + 2.0 * l * (alpha * n.log2() + 2.0 * sbh / b2);
            finish(model.batch as f64 / delay, delay, mode)
        }
        ParallelMode::MultinodePp => {
            let throughput = (model.batch as f64 / m) / (l * c / n + sbh / b2);
            let delay = l * c + (hosts - 1.0) * sbh / b2 + (n - hosts) * sbh / b1;
            finish(throughput, delay, mode)
        }
        ParallelMode::MultinodeHybrid => {
            let comm = 2.0 * l * (alpha * n.log2() + 2.0 * sbh / b2);
            let throughput = (model.batch as f64 / m) / (l * c / n + sbh / b2 + comm);
            let delay = l * c + (hosts - 1.0) * sbh / b2 + (n - hosts) * sbh / b1 + comm;
            finish(throughput, delay, mode)
        }
        _ => Err(PerfError::Precondition(
            "eval_multinode mode must be one of the multinode variants".into(),
        )),
    }
}

fn finish(throughput: f64, delay: f64, mode: ParallelMode) -> Result<PerfEstimate, PerfError> {
    if !(throughput > 0.0 && delay > 0.0) {
        return Err(PerfError::Invalid(format!(
            "estimate out of range: throughput {throughput}, delay {delay}"
        )));
    }
    Ok(PerfEstimate { throughput, delay, mode })
}

// ─── Sweep ───────────────────────────────────────────────────────────────

/// One sweep row: a (p, t) factorization with its estimate and SLO verdict.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub pp_degree: u64,
    pub tp_degree: u64,
    pub estimate: PerfEstimate,
    pub feasible: bool,
}

/// Enumerates every integer factorization p·t = `gpus`, evaluates each with
/// the matching closed form (pure TP at p=1, pure PP at t=1, hybrid
/// otherwise; multi-node variants when the template has hosts >= 2), and
/// marks rows feasible where delay <= `slo_delay_s`. Rows come back sorted
/// by throughput descending, ties broken by smaller p.
pub fn sweep(
    model: &ModelSpec,
    cluster_template: &ClusterSpec,
    gpus: u64,
    slo_delay_s: f64,
) -> Result<Vec<SweepRow>, PerfError> {
    if gpus == 0 {
        return Err(PerfError::Precondition("sweep requires gpus >= 1".into()));
    }
    model.validate()?;
    let multinode = cluster_template.hosts >= 2;
    let mut rows = Vec::new();
    for p in 1..=gpus {
        if gpus % p != 0 {
            continue;
        }
        let t = gpus / p;
        let cluster = ClusterSpec {
            gpus,
            pp_degree: p,
            tp_degree: t,
            ..cluster_template.clone()
        };
        let estimate = if multinode {
            let mode = if p == 1 {
                ParallelMode::MultinodeTp
            } else if t == 1 {
                ParallelMode::MultinodePp
            } else {
                ParallelMode::MultinodeHybrid
            };
            eval_multinode(model, &cluster, mode)?
        } else if p == 1 {
            eval_tp(model, &cluster)?
        } else if t == 1 {
            eval_pp(model, &cluster)?
        } else {
            eval_hybrid(model, &cluster)?
        };
        rows.push(SweepRow {
            pp_degree: p,
            tp_degree: t,
            feasible: estimate.delay <= slo_delay_s,
            estimate,
        });
    }
    rows.sort_by(|a, b| {
        b.estimate
            .throughput
            .partial_cmp(&a.estimate.throughput)
            .expect("throughput is finite")
            .then(a.pp_degree.cmp(&b.pp_degree))
    });
    Ok(rows)
}

/// Renders sweep rows as CSV with the stable header
/// `p,t,throughput_tok_s,delay_s,feasible`.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("p,t,throughput_tok_s,delay_s,feasible\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.12e},{:.12e},{}\n",
            r.pp_degree, r.tp_degree, r.estimate.throughput, r.estimate.delay, r.feasible
        ));
    }
    out
}

/// Renders the communication-volume table over every factorization of
/// `gpus`, CSV header `p,t,comm_volume_elements`.
pub fn comm_volume_csv(model: &ModelSpec, gpus: u64) -> Result<String, PerfError> {
    let mut out = String::from("p,t,comm_volume_elements\n");
    for p in 1..=gpus {
        if gpus % p != 0 {
            continue;
        }
        let t = gpus / p;
        out.push_str(&format!("{},{},{:.12e}\n", p, t, comm_volume(model, p, t)?));
    }
    Ok(out)
}

// ─── Tests ───────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;

    fn model(layers: u64) -> ModelSpec {
        ModelSpec {
            layers,
            per_layer_compute_s: 1.0,
            seq_len: 1,
            batch: 1,
            hidden: 1,
            bytes_per_element: 1,
            vocab: 16,
            max_len: 8,
        }
    }

    fn cluster(gpus: u64, p: u64, t: u64) -> ClusterSpec {
        ClusterSpec {
            gpus,
            pp_degree: p,
            tp_degree: t,
            launch_delay_s: 1.0,
            intra_bw: 1.0,
            inter_bw: 1.0,
            microbatches: None,
            hosts: 1,
        }
    }

    // ── communication volume ──

    #[test]
    fn comm_volume_matches_hand_evaluations() {
        let m = model(80);
        assert_eq!(comm_volume(&m, 2, 4).unwrap(), 121.0);
        assert_eq!(comm_volume(&m, 4, 2).unwrap(), 43.0);
    }

    #[test]
    fn comm_volume_zero_without_tp_or_pp() {
        let m = model(80);
        assert_eq!(comm_volume(&m, 1, 1).unwrap(), 0.0);
    }

    #[test]
    fn comm_volume_scales_with_batch_and_hidden() {
        let mut m = model(80);
        m.batch = 3;
        m.hidden = 5;
        assert_eq!(comm_volume(&m, 2, 4).unwrap(), 15.0 * 121.0);
    }

    #[test]
    fn comm_volume_can_be_fractional() {
        let m = model(50);
        // 4*50*1/16 + 7 = 19.5
        assert_eq!(comm_volume(&m, 8, 2).unwrap(), 19.5);
    }

    #[test]
    fn comm_volume_rejects_zero_degrees() {
        let m = model(80);
        assert!(comm_volume(&m, 0, 4).is_err());
        assert!(comm_volume(&m, 4, 0).is_err());
    }

    // ── pure TP ──

    #[test]
    fn tp_delay_hand_evaluation() {
        // L=2, C=4, N=2, alpha=1, sbh/B1=0.5 -> 4 + 4*log2(2) + 4*0.5*2 = 12.
        let mut m = model(2);
        m.per_layer_compute_s = 4.0;
        let mut c = cluster(2, 1, 2);
        c.intra_bw = 2.0; // sbh = 1 byte, so sbh/B1 = 0.5
        let e = eval_tp(&m, &c).unwrap();
        assert_eq!(e.delay, 12.0);
        assert_eq!(e.throughput, 1.0 / 12.0);
    }

    #[test]
    fn tp_single_gpu_drops_launch_term() {
        let mut m = model(2);
        m.per_layer_compute_s = 4.0;
        let mut c = cluster(1, 1, 1);
        c.launch_delay_s = 123.0;
        let e = eval_tp(&m, &c).unwrap();
        // L*C + 4*sbh*L/B1 = 8 + 8 = 16; log2(1) = 0 kills the launch term.
        assert_eq!(e.delay, 16.0);
    }

    #[test]
    fn tp_doubling_bandwidth_halves_only_bandwidth_term() {
        let mut m = model(4);
        m.per_layer_compute_s = 2.0;
        m.hidden = 64;
        let c1 = cluster(4, 1, 4);
        let mut c2 = c1.clone();
        c2.intra_bw *= 2.0;
        let d1 = eval_tp(&m, &c1).unwrap().delay;
        let d2 = eval_tp(&m, &c2).unwrap().delay;
        let bw_term = 4.0 * 64.0 * 4.0 / c1.intra_bw;
        assert!((d1 - d2 - bw_term / 2.0).abs() < 1e-12);
    }

    #[test]
    fn tp_allreduce_term_monotone_in_gpus() {
        let m = model(8);
        let mut prev = f64::NEG_INFINITY;
        for n in [1u64, 2, 4, 8, 16] {
            let cost = tp_comm_cost(&m, n, 1e-5, 1e9);
            assert!(cost >= prev);
            prev = cost;
        }
    }

    #[test]
    fn tp_requires_pp_degree_one() {
        let m = model(2);
        assert!(eval_tp(&m, &cluster(4, 2, 2)).is_err());
    }

    // ── pure PP ──

    #[test]
    fn pp_throughput_hand_evaluation() {
        // b=8, m=4, L=2, C=4, N=2, bandwidth term ~0 -> (8/4)/(8/2) = 0.5.
        let mut m = model(2);
        m.per_layer_compute_s = 4.0;
        m.batch = 8;
        let mut c = cluster(2, 2, 1);
        c.microbatches = Some(4);
        c.intra_bw = 1e30; // suppress the bandwidth term
        let e = eval_pp(&m, &c).unwrap();
        assert!((e.throughput - 0.5).abs() < 1e-15);
    }

    #[test]
    fn pp_delay_hand_evaluation() {
        // L=2, C=4, N=4, sbh/B1=1 -> 8 + 3*1 = 11.
        let mut m = model(2);
        m.per_layer_compute_s = 4.0;
        let e = eval_pp(&m, &cluster(4, 4, 1)).unwrap();
        assert_eq!(e.delay, 11.0);
    }

    #[test]
    fn pp_single_gpu_delay_is_pure_compute() {
        let mut m = model(2);
        m.per_layer_compute_s = 4.0;
        let e = eval_pp(&m, &cluster(1, 1, 1)).unwrap();
        assert_eq!(e.delay, 8.0);
    }

    #[test]
    fn pp_throughput_increases_with_gpus_at_fixed_bandwidth_term() {
        let mut m = model(16);
        m.per_layer_compute_s = 0.01;
        let mut prev = 0.0;
        for n in [1u64, 2, 4, 8] {
            let mut c = cluster(n, n, 1);
            c.microbatches = Some(4);
            let e = eval_pp(&m, &c).unwrap();
            assert!(e.throughput > prev);
            prev = e.throughput;
        }
    }

    #[test]
    fn pp_requires_tp_degree_one() {
        let m = model(2);
        assert!(eval_pp(&m, &cluster(4, 2, 2)).is_err());
    }

    // ── hybrid ──

    #[test]
    fn hybrid_numeric_hand_evaluation() {
        // L=2, C=2, N=4, p=2, t=2, alpha=1, sbh/B1=1, b=8, m=2:
        // T = (8/2)/(1 + 1 + (4/2)*(1 + 2)) = 4/8 = 0.5.
        let mut m = model(2);
        m.per_layer_compute_s = 2.0;
        m.batch = 8;
        let mut c = cluster(4, 2, 2);
        c.microbatches = Some(2);
        c.intra_bw = 8.0; // sbh = 8 bytes at batch 8, so sbh/B1 = 1
        let e = eval_hybrid(&m, &c).unwrap();
        assert!((e.throughput - 0.5).abs() < 1e-15);
    }

    #[test]
    fn hybrid_at_t1_keeps_residual_bandwidth_term() {
        // The verbatim formula retains 2L/p * 2sbh/B1 at t=1, so hybrid and
        // pure-PP throughputs differ whenever that term is nonzero.
        let mut m = model(2);
        m.per_layer_compute_s = 2.0;
        m.batch = 8;
        let mut c = cluster(2, 2, 1);
        c.microbatches = Some(2);
        c.intra_bw = 8.0; // sbh = 8 bytes at batch 8, so sbh/B1 = 1
        let hybrid = eval_hybrid(&m, &c).unwrap();
        let pure = eval_pp(&m, &c).unwrap();
        assert!(hybrid.throughput < pure.throughput);
        let l = 2.0;
        let p = 2.0;
        let residual = (2.0 * l / p) * 2.0 * 1.0; // alpha*log2(1)=0 vanishes
        let expected = (8.0 / 2.0) / (2.0 + 1.0 + residual);
        assert!((hybrid.throughput - expected).abs() < 1e-15);
    }

    #[test]
    fn hybrid_at_p1_matches_tp_comm_plus_extra_transfer_term() {
        // At p=1, m=1 the hybrid denominator is Eq-2's denominator plus one
        // inter-stage sbh/B1 term.
        let mut m = model(3);
        m.per_layer_compute_s = 0.7;
        m.hidden = 16;
        let mut c = cluster(4, 1, 4);
        c.microbatches = Some(1);
        c.launch_delay_s = 0.01;
        c.intra_bw = 256.0;
        let hybrid = eval_hybrid(&m, &c).unwrap();
        let l = 3.0;
        let sbh = 16.0;
        let tp_denominator =
            l * 0.7 / 4.0 + 2.0 * l * (0.01 * 4.0f64.log2() + 2.0 * sbh / 256.0);
        let expected = 1.0 / (tp_denominator + sbh / 256.0);
        assert!((hybrid.throughput - expected).abs() < 1e-15);
    }

    // ── multinode ──

    #[test]
    fn multinode_pp_delay_hand_evaluation() {
        // L=1, C=1, N=4, hosts=2, sbh=1, B1=1, B2=0.5 -> 1 + 1*2 + 2*1 = 5.
        let mut m = model(1);
        m.per_layer_compute_s = 1.0;
        let mut c = cluster(4, 4, 1);
        c.hosts = 2;
        c.intra_bw = 1.0;
        c.inter_bw = 0.5;
        let e = eval_multinode(&m, &c, ParallelMode::MultinodePp).unwrap();
        assert_eq!(e.delay, 5.0);
    }

    #[test]
    fn multinode_pp_with_equal_bandwidth_matches_single_node_delay() {
        let mut m = model(2);
        m.per_layer_compute_s = 4.0;
        let mut c = cluster(4, 4, 1);
        c.hosts = 2;
        let multi = eval_multinode(&m, &c, ParallelMode::MultinodePp).unwrap();
        let single = eval_pp(&m, &c).unwrap();
        assert_eq!(multi.delay, single.delay);
    }

    #[test]
    fn multinode_tp_slower_than_single_node_when_inter_bw_lower() {
        let mut m = model(2);
        m.per_layer_compute_s = 4.0;
        let mut c = cluster(4, 1, 4);
        c.hosts = 2;
        c.inter_bw = 0.25;
        let multi = eval_multinode(&m, &c, ParallelMode::MultinodeTp).unwrap();
        let single = eval_tp(&m, &c).unwrap();
        assert!(multi.delay > single.delay);
    }

    #[test]
    fn multinode_rejects_single_host_and_excess_hosts() {
        let m = model(2);
        let c = cluster(4, 1, 4);
        assert!(eval_multinode(&m, &c, ParallelMode::MultinodeTp).is_err());
        let mut c2 = c.clone();
        c2.hosts = 8;
        assert!(eval_multinode(&m, &c2, ParallelMode::MultinodeTp).is_err());
    }

    // ── sweep ──

    #[test]
    fn sweep_enumerates_factorizations_of_four() {
        let m = model(4);
        let rows = sweep(&m, &cluster(4, 1, 4), 4, f64::INFINITY).unwrap();
        let mut pairs: Vec<(u64, u64)> =
            rows.iter().map(|r| (r.pp_degree, r.tp_degree)).collect();
        pairs.sort_unstable();
        assert_eq!(pairs, vec![(1, 4), (2, 2), (4, 1)]);
        assert!(rows.iter().all(|r| r.feasible));
    }

    #[test]
    fn sweep_sorted_by_throughput_then_smaller_p() {
        let m = model(8);
        let rows = sweep(&m, &cluster(16, 1, 16), 16, f64::INFINITY).unwrap();
        for w in rows.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            assert!(
                a.estimate.throughput > b.estimate.throughput
                    || (a.estimate.throughput == b.estimate.throughput
                        && a.pp_degree <= b.pp_degree)
            );
        }
    }

    #[test]
    fn sweep_with_slow_inter_node_link_prefers_pipeline_split() {
        let mut m = model(48);
        m.per_layer_compute_s = 1e-3;
        m.seq_len = 512;
        m.max_len = 4096;
        m.hidden = 4096;
        m.bytes_per_element = 2;
        m.batch = 32;
        let mut tmpl = cluster(8, 1, 8);
        tmpl.hosts = 2;
        tmpl.intra_bw = 300e9;
        tmpl.inter_bw = 1e9; // much slower cross-host link
        tmpl.launch_delay_s = 10e-6;
        let rows = sweep(&m, &tmpl, 8, f64::INFINITY).unwrap();
        let top = rows.iter().find(|r| r.feasible).unwrap();
        assert!(top.pp_degree >= 2, "top row was p={}", top.pp_degree);
    }

    #[test]
    fn sweep_csv_has_pinned_header() {
        let m = model(4);
        let rows = sweep(&m, &cluster(4, 1, 4), 4, f64::INFINITY).unwrap();
        let csv = sweep_csv(&rows);
        assert!(csv.starts_with("p,t,throughput_tok_s,delay_s,feasible\n"));
        assert_eq!(csv.lines().count(), 1 + rows.len());
    }

    #[test]
    fn infeasible_rows_marked_under_tight_slo() {
        let mut m = model(4);
        m.per_layer_compute_s = 10.0;
        let rows = sweep(&m, &cluster(4, 1, 4), 4, 1e-9).unwrap();
        assert!(rows.iter().all(|r| !r.feasible));
    }
}
