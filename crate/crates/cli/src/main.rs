//! pipekit command-line driver: config ingestion, report generation, and
//! three subcommands over the core library.
//!
//! - `predict`: closed-form deployment sweep over every (p, t) device
//!   factorization plus the communication-volume table.
//! - `simulate`: one pipeline run; writes timeline, bubbles, and summary
//!   CSVs; exits nonzero on any module fault.
//! - `sample-bench`: times incremental column-wise sampling against
//!   from-scratch recomputation and reports ns/iteration and their ratio.
//!
//! Every subcommand writes a `manifest.json` into its output directory
//! (config path, seed, output directory, subcommand, tool version), so an
//! output tree names exactly what produced it. Reruns with the same
//! manifest reproduce CSVs byte-identically, except the benchmark's timing
//! columns, which are load-dependent by nature.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use pipekit_core::oracle::{reference_column_step, ReferenceColumn};
use pipekit_core::perf::{self, ClusterSpec, ModelSpec};
use pipekit_core::pipeline::{self, Mode, PipelineConfig, SatMode};
use pipekit_core::rng;
use pipekit_core::sampler::{
    apply_penalties, filter, sample, temperature_softmax, LogitsMatrix, SamplerReplica,
    SamplingParams,
};
use serde::Deserialize;

// ─── Arguments ───────────────────────────────────────────────────────────

#[derive(Parser)]
#[command(
    name = "pipekit",
    version,
    about = "Pipeline-parallel decode simulator and analytic deployment planner"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the analytic throughput/delay sweep and communication-volume tables
    Predict(PredictArgs),
    /// Run the pipeline simulation and write timeline/bubbles/summary CSVs
    Simulate(SimulateArgs),
    /// Benchmark incremental sampling against from-scratch recomputation
    SampleBench(BenchArgs),
}

#[derive(Args)]
struct PredictArgs {
    /// Config file (TOML; JSON with a .json extension)
    #[arg(long)]
    config: PathBuf,
    /// Output directory for sweep.csv, comm_volume.csv, manifest.json
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Config file (TOML; JSON with a .json extension)
    #[arg(long)]
    config: PathBuf,
    /// Output directory for timeline.csv, bubbles.csv, summary.csv, manifest.json
    #[arg(long)]
    out: PathBuf,
    /// Override the config's execution mode
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Override the config's transmission preference
    #[arg(long, value_enum)]
    sat: Option<SatArg>,
    /// Override the config's iteration count
    #[arg(long)]
    iterations: Option<u64>,
    /// Override the config's root seed
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct BenchArgs {
    /// Vocabulary size V
    #[arg(long, default_value_t = 32768)]
    vocab: usize,
    /// Column count B
    #[arg(long, default_value_t = 64)]
    batch: usize,
    /// Decode steps per repetition
    #[arg(long, default_value_t = 128)]
    steps: usize,
    /// Root seed for logits, params, and draws
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output directory for sample_bench.csv, manifest.json
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Baseline,
    Optimized,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Baseline => Mode::Baseline,
            ModeArg::Optimized => Mode::Optimized,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SatArg {
    Aware,
    Unaware,
}

impl From<SatArg> for SatMode {
    fn from(s: SatArg) -> SatMode {
        match s {
            SatArg::Aware => SatMode::Aware,
            SatArg::Unaware => SatMode::Unaware,
        }
    }
}

// ─── Config file ─────────────────────────────────────────────────────────

/// On-disk config with independent sections so one profile file drives
/// every subcommand: `simulate` consumes [pipeline]; `predict` consumes
/// [model] and [cluster], tuned by an optional [predict] section.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ToolConfig {
    pipeline: Option<PipelineConfig>,
    model: Option<ModelSpec>,
    cluster: Option<ClusterSpec>,
    predict: Option<PredictSection>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictSection {
    /// Device count whose factorizations are swept; cluster.gpus when absent.
    gpus: Option<u64>,
    /// Feasibility cutoff on per-iteration delay, seconds; unlimited when absent.
    slo_delay_s: Option<f64>,
}

fn load_config(path: &Path) -> Result<ToolConfig> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let cfg: ToolConfig = if is_json {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
    } else {
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
    };
    Ok(cfg)
}

// ─── Manifest ────────────────────────────────────────────────────────────

fn write_manifest(out: &Path, subcommand: &str, config: Option<&Path>, seed: u64) -> Result<()> {
    let manifest = serde_json::json!({
        "subcommand": subcommand,
        "config": config.map(|p| p.display().to_string()),
        "seed": seed,
        "out_dir": out.display().to_string(),
        "tool_version": env!("CARGO_PKG_VERSION"),
    });
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(out.join("manifest.json"), text + "\n")
        .with_context(|| format!("writing manifest into {}", out.display()))
}

// ─── predict ─────────────────────────────────────────────────────────────

fn cmd_predict(args: &PredictArgs) -> Result<()> {
    let tool = load_config(&args.config)?;
    let model = tool.model.context("config has no [model] section")?;
    let cluster = tool.cluster.context("config has no [cluster] section")?;
    let section = tool.predict.unwrap_or(PredictSection { gpus: None, slo_delay_s: None });
    let gpus = section.gpus.unwrap_or(cluster.gpus);
    let slo = section.slo_delay_s.unwrap_or(f64::INFINITY);

    let rows = perf::sweep(&model, &cluster, gpus, slo)?;
    let comm = perf::comm_volume_csv(&model, gpus)?;
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating output directory {}", args.out.display()))?;
    fs::write(args.out.join("sweep.csv"), perf::sweep_csv(&rows))?;
    fs::write(args.out.join("comm_volume.csv"), comm)?;
    write_manifest(&args.out, "predict", Some(&args.config), 0)?;

    let best = rows.first().expect("sweep returns at least the trivial factorization");
    println!(
        "predict: {} factorizations of {} devices; best p={} t={} at {:.3} tok/s (feasible: {})",
        rows.len(),
        gpus,
        best.pp_degree,
        best.tp_degree,
        best.estimate.throughput,
        best.feasible
    );
    Ok(())
}

// ─── simulate ────────────────────────────────────────────────────────────

fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let tool = load_config(&args.config)?;
    let mut cfg = tool.pipeline.context("config has no [pipeline] section")?;
    if let Some(m) = args.mode {
        cfg.mode = m.into();
    }
    if let Some(s) = args.sat {
        cfg.sat = s.into();
    }
    if let Some(n) = args.iterations {
        cfg.iterations = n;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;

    let out = pipeline::run(&cfg)?;
    let bubbles = pipeline::bubble_breakdown(&out.timeline)?;
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating output directory {}", args.out.display()))?;
    fs::write(args.out.join("timeline.csv"), pipeline::timeline_csv(&out.timeline))?;
    fs::write(args.out.join("bubbles.csv"), pipeline::bubbles_csv(&bubbles))?;
    fs::write(args.out.join("summary.csv"), pipeline::summary_csv(&cfg, &out.summary))?;
    write_manifest(&args.out, "simulate", Some(&args.config), cfg.seed)?;

    let s = &out.summary;
    println!(
        "simulate: mode {} sat {}: {} iterations, {} tokens, {:.6} s wall, {:.3} tok/s",
        cfg.mode.label(),
        cfg.sat.label(),
        s.iterations,
        s.tokens,
        s.wall_s,
        s.throughput_tok_s
    );
    Ok(())
}

// ─── sample-bench ────────────────────────────────────────────────────────

const BENCH_PROMPT_LEN: usize = 4;

/// Synthetic logits row for one step, shared by every column so that row
/// generation is identical (and cheap) on both timed paths.
fn bench_row(seed: u64, step: u64, vocab: usize) -> Vec<f64> {
    let key = rng::derive_key(seed, step);
    (0..vocab).map(|v| rng::unit_f64(key, v as u64) * 16.0 - 8.0).collect()
}

fn bench_prompt(seed: u64, c: usize, vocab: usize) -> Vec<u32> {
    let key = rng::derive_key(seed, 0x7072 ^ c as u64);
    (0..BENCH_PROMPT_LEN).map(|i| rng::bounded(key, i as u64, vocab as u64) as u32).collect()
}

/// Per-column styles cycling through every penalty and filter.
fn bench_params(seed: u64, c: usize) -> SamplingParams {
    let mut p = SamplingParams { seed: rng::derive_key(seed, 0x6273 ^ c as u64), ..Default::default() };
    match c % 4 {
        0 => {
            p.alpha_freq = 0.2;
        }
        1 => {
            p.temperature = 0.7;
            p.top_k = Some(40);
            p.alpha_pres = 0.3;
        }
        2 => {
            p.temperature = 1.3;
            p.top_p = Some(0.95);
            p.alpha_rep = 0.4;
        }
        _ => {
            p.temperature = 0.9;
            p.min_p = Some(0.02);
        }
    }
    p
}

/// Incremental path: one replica keeps penalty buffers up to date while
/// each step runs penalties, softmax, filters, and the draw in place.
fn run_incremental(vocab: usize, batch: usize, steps: usize, seed: u64) -> Result<Vec<u32>> {
    let ids: Vec<u64> = (0..batch as u64).collect();
    let prompts: Vec<Vec<u32>> = (0..batch).map(|c| bench_prompt(seed, c, vocab)).collect();
    let params: Vec<SamplingParams> = (0..batch).map(|c| bench_params(seed, c)).collect();
    let mut replica =
        SamplerReplica::new(vocab, batch, BENCH_PROMPT_LEN + steps, &ids, &prompts, &params)?;
    let mut transcript = Vec::with_capacity(batch * steps);
    for n in 0..steps as u64 {
        let row = bench_row(seed, n, vocab);
        let mut data = vec![0.0f64; vocab * batch];
        for (v, &x) in row.iter().enumerate() {
            data[v * batch..(v + 1) * batch].fill(x);
        }
        let mut m = LogitsMatrix::new(data, vocab, batch)?;
        apply_penalties(&mut m, &replica)?;
        temperature_softmax(&mut m, &replica)?;
        filter(&mut m, &replica)?;
        transcript.extend(sample(&m, &mut replica, n)?.token_ids);
    }
    Ok(transcript)
}

/// From-scratch path: every step recounts each column's penalties from its
/// full history and reruns the chain on fresh buffers.
fn run_scratch(vocab: usize, batch: usize, steps: usize, seed: u64) -> Result<Vec<u32>> {
    let mut cols: Vec<ReferenceColumn> = (0..batch)
        .map(|c| ReferenceColumn {
            prompt: bench_prompt(seed, c, vocab),
            outputs: Vec::new(),
            logits: Vec::new(),
            params: bench_params(seed, c),
        })
        .collect();
    let mut transcript = Vec::with_capacity(batch * steps);
    for n in 0..steps as u64 {
        let row = bench_row(seed, n, vocab);
        for col in cols.iter_mut() {
            col.logits = row.clone();
            let (_, tok) = reference_column_step(col, n)?;
            col.outputs.push(tok);
            transcript.push(tok);
        }
    }
    Ok(transcript)
}

fn digest_tokens(tokens: &[u32]) -> u64 {
    let mut bytes = Vec::with_capacity(tokens.len() * 4);
    for &t in tokens {
        bytes.extend_from_slice(&t.to_le_bytes());
    }
    rng::fnv1a(&bytes)
}

struct BenchSide {
    ns_per_iter: f64,
    digest: u64,
}

/// Times `f` over `reps` repetitions and keeps the fastest (least noisy)
/// one, verifying every repetition replays the same transcript.
fn time_side<F: Fn() -> Result<Vec<u32>>>(f: F, steps: usize, reps: usize) -> Result<BenchSide> {
    let digest = digest_tokens(&f()?);
    let mut best = f64::INFINITY;
    for _ in 0..reps {
        let t0 = Instant::now();
        let tokens = f()?;
        let spent = t0.elapsed().as_nanos() as f64;
        if digest_tokens(&tokens) != digest {
            bail!("benchmark transcript changed between repetitions");
        }
        best = best.min(spent);
    }
    Ok(BenchSide { ns_per_iter: best / steps as f64, digest })
}

fn cmd_sample_bench(args: &BenchArgs) -> Result<()> {
    if args.vocab < 2 {
        bail!("vocab must be >= 2");
    }
    if args.batch == 0 {
        bail!("batch must be >= 1");
    }
    if args.steps == 0 {
        bail!("steps must be >= 1");
    }
    let (v, b, s, seed) = (args.vocab, args.batch, args.steps, args.seed);
    let reps = (512 / s).clamp(2, 32);

    let inc = time_side(|| run_incremental(v, b, s, seed), s, reps)?;
    let scr = time_side(|| run_scratch(v, b, s, seed), s, reps)?;
    if inc.digest != scr.digest {
        bail!("incremental and from-scratch transcripts diverged");
    }
    let ratio = scr.ns_per_iter / inc.ns_per_iter;

    let mut csv = String::from("path,vocab,batch,steps,reps,ns_per_iteration,transcript_digest\n");
    csv.push_str(&format!(
        "incremental,{v},{b},{s},{reps},{:.0},{:#018x}\n",
        inc.ns_per_iter, inc.digest
    ));
    csv.push_str(&format!(
        "from_scratch,{v},{b},{s},{reps},{:.0},{:#018x}\n",
        scr.ns_per_iter, scr.digest
    ));
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating output directory {}", args.out.display()))?;
    fs::write(args.out.join("sample_bench.csv"), csv)?;
    write_manifest(&args.out, "sample-bench", None, seed)?;

    println!(
        "sample-bench: V={v} B={b} steps={s}: incremental {:.0} ns/iter, from-scratch {:.0} ns/iter, ratio {:.3}",
        inc.ns_per_iter, scr.ns_per_iter, ratio
    );
    Ok(())
}

// ─── Entry ───────────────────────────────────────────────────────────────

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Predict(a) => cmd_predict(&a),
        Command::Simulate(a) => cmd_simulate(&a),
        Command::SampleBench(a) => cmd_sample_bench(&a),
    }
}
