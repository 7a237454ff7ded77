//! Stage-timing and error-sweep benchmarks, plus schema-stable report
//! emission in JSON and CSV.
//!
//! The timing benchmark measures the handoff stages (create card →
//! inject → generate) against the re-prefill alternative on synthetic
//! contexts sized so fp16 K/V would occupy round memory footprints at a
//! reference architecture. Re-prefill is modeled as a full forward pass
//! with one query per cached token (quadratic in context length), while
//! the handoff path reconstructs in linear time and generates from a
//! single query — the time-to-first-token comparison this sets up is
//! structural, not an artifact of constants.
//!
//! All medians are computed over `trials ≥ 2` timed runs after a
//! discarded warmup. Reports render deterministically; timing fields can
//! be redacted (zeroed) where byte-identical output across runs matters
//! more than the measurements.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::allocator::{
    allocate_exact, build_error_table, feasible_uniform_width, uniform_assignment, AllocError,
    ErrorTableMode,
};
use crate::cachecard::{build_card, decode_card, encode_card, CardError};
use crate::handoff::{
    inject_card, run_chain, seeded_queries, select_bits, toy_forward, AgentSpec, ChainConfig,
    HandoffError, HopPolicy, HopReport, Method, TopologyGraph, ToyModel, ToyModelConfig,
};
use crate::importance::{local_importance, AnchorPool};
use crate::quantizer::{quantize_cache, QuantError};
use crate::tensorio::{
    generate_attention_stats, generate_synthetic_cache, SyntheticConfig, TensorError,
};

/// Errors from benchmark configuration, execution, and report emission.
#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Handoff(#[from] HandoffError),
    #[error(transparent)]
    Alloc(#[from] AllocError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Card(#[from] CardError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("report serialization failed: {0}")]
    Serialize(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Output format for report emission.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl ReportFormat {
    pub fn as_str(self) -> &'static str {
        match self {
            ReportFormat::Json => "json",
            ReportFormat::Csv => "csv",
        }
    }

    pub fn parse(s: &str) -> Option<ReportFormat> {
        match s {
            "json" => Some(ReportFormat::Json),
            "csv" => Some(ReportFormat::Csv),
            _ => None,
        }
    }
}

/// Median of a non-empty sample; even-sized samples average the two
/// middle order statistics.
pub(crate) fn median(samples: &[f64]) -> f64 {
    debug_assert!(!samples.is_empty());
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("timing samples are finite"));
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    }
}

// ---------------------------------------------------------------------------
// Stage timing
// ---------------------------------------------------------------------------

/// Stage-timing benchmark parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TimingConfig {
    /// Labeled context lengths to measure.
    pub contexts: Vec<(String, usize)>,
    /// Timed trials per context; at least 2.
    pub trials: usize,
    /// Untimed warmup runs discarded before the trials.
    pub warmup: usize,
    pub seed: u64,
    /// Method used for the create-card stage.
    pub method: Method,
    pub budget_bits_per_token: f64,
    pub model: ToyModelConfig,
}

/// The nominal context ladder: lengths whose fp16 K/V footprint at the
/// reference architecture (32 layers × 8 heads × 128 dims) lands on
/// 1 GiB / 4 GiB / 8 GiB boundaries, scaled to desk size by keeping the
/// token counts and shrinking the model.
pub fn nominal_contexts() -> Vec<(String, usize)> {
    vec![
        ("nominal-1k".to_owned(), 476),
        ("nominal-4k".to_owned(), 1939),
        ("nominal-8k".to_owned(), 3877),
    ]
}

impl Default for TimingConfig {
    fn default() -> Self {
        Self {
            contexts: nominal_contexts(),
            trials: 3,
            warmup: 1,
            seed: 71,
            method: Method::UniformQ4,
            budget_bits_per_token: 4.0,
            model: ToyModelConfig::default(),
        }
    }
}

/// Per-context stage medians, in milliseconds.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StageTimingReport {
    pub label: String,
    pub tokens: usize,
    pub trials: usize,
    pub create_card_ms: f64,
    pub inject_ms: f64,
    pub generate_ms: f64,
    /// Rebuilding the context from scratch: one forward pass with a
    /// query per cached token.
    pub reprefill_ms: f64,
    /// Time-to-first-token analogue of the handoff path:
    /// `inject_ms + generate_ms`.
    pub handoff_ttft_ms: f64,
}

/// Run the stage-timing benchmark over every configured context.
pub fn run_stage_timing(cfg: &TimingConfig) -> Result<Vec<StageTimingReport>, BenchError> {
    if cfg.trials < 2 {
        return Err(BenchError::InvalidParameter(format!(
            "at least 2 trials are required, got {}",
            cfg.trials
        )));
    }
    if cfg.contexts.is_empty() {
        return Err(BenchError::InvalidParameter(
            "at least one context is required".into(),
        ));
    }
    let model = ToyModel::new(&cfg.model);
    let chain_cfg = ChainConfig {
        budget_bits_per_token: cfg.budget_bits_per_token,
        ..ChainConfig::default()
    };
    let anchors = AnchorPool::new(chain_cfg.anchor_capacity);
    let mut reports = Vec::with_capacity(cfg.contexts.len());

    for (index, (label, tokens)) in cfg.contexts.iter().enumerate() {
        if *tokens == 0 {
            return Err(BenchError::InvalidParameter(format!(
                "context {label:?} has zero tokens"
            )));
        }
        let cache = generate_synthetic_cache(&SyntheticConfig {
            seed: cfg.seed.wrapping_add(index as u64),
            layers: model.layers(),
            heads: model.heads(),
            tokens: *tokens,
            head_dim: model.head_dim(),
            ..Default::default()
        })?;
        let generate_queries = seeded_queries(cfg.seed, index as u64, 1, model.head_dim());
        let reprefill_queries = seeded_queries(cfg.seed, index as u64, *tokens, model.head_dim());

        let mut create = Vec::with_capacity(cfg.trials);
        let mut inject = Vec::with_capacity(cfg.trials);
        let mut generate = Vec::with_capacity(cfg.trials);
        let mut reprefill = Vec::with_capacity(cfg.trials);

        for round in 0..cfg.warmup + cfg.trials {
            let t0 = Instant::now();
            let bits = select_bits(cfg.method, &cache, &anchors, &chain_cfg)?;
            let q = quantize_cache(&cache, &bits)?;
            let card = build_card(q, model.model_id(), "bench")?;
            let bytes = encode_card(&card);
            let create_elapsed = t0.elapsed();

            let decoded = decode_card(&bytes)?;
            let (restored, inject_elapsed) = inject_card(&model, &decoded)?;

            let t1 = Instant::now();
            let out = toy_forward(&model, &restored, &generate_queries)?;
            let generate_elapsed = t1.elapsed();
            debug_assert_eq!(out.len(), 1);

            let t2 = Instant::now();
            let full = toy_forward(&model, &cache, &reprefill_queries)?;
            let reprefill_elapsed = t2.elapsed();
            debug_assert_eq!(full.len(), *tokens);

            if round >= cfg.warmup {
                create.push(create_elapsed.as_secs_f64() * 1e3);
                inject.push(inject_elapsed.as_secs_f64() * 1e3);
                generate.push(generate_elapsed.as_secs_f64() * 1e3);
                reprefill.push(reprefill_elapsed.as_secs_f64() * 1e3);
            }
        }

        let inject_ms = median(&inject);
        let generate_ms = median(&generate);
        reports.push(StageTimingReport {
            label: label.clone(),
            tokens: *tokens,
            trials: cfg.trials,
            create_card_ms: median(&create),
            inject_ms,
            generate_ms,
            reprefill_ms: median(&reprefill),
            handoff_ttft_ms: inject_ms + generate_ms,
        });
    }
    Ok(reports)
}

/// Zero every timing field, leaving structure and counters intact. Used
/// where byte-identical reports across runs matter more than the
/// measurements.
pub fn redact_timing(reports: &mut [StageTimingReport]) {
    for r in reports {
        r.create_card_ms = 0.0;
        r.inject_ms = 0.0;
        r.generate_ms = 0.0;
        r.reprefill_ms = 0.0;
        r.handoff_ttft_ms = 0.0;
    }
}

/// Zero the stage timings of chain hop reports.
pub fn redact_hops(reports: &mut [HopReport]) {
    for r in reports {
        r.stage_times.create_card_ms = 0.0;
        r.stage_times.inject_ms = 0.0;
        r.stage_times.generate_ms = 0.0;
    }
}

// ---------------------------------------------------------------------------
// Error sweep
// ---------------------------------------------------------------------------

/// Error-sweep grid parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub methods: Vec<Method>,
    /// Handoff counts; a cell with h hops simulates a chain of h+1 agents.
    pub hops: Vec<usize>,
    /// Average bit budgets per token.
    pub budgets: Vec<f64>,
    /// Source-cache seeds aggregated per cell.
    pub seeds: Vec<u64>,
    pub tokens: usize,
    pub alpha: f64,
    pub model: ToyModelConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            hops: vec![2, 3, 4, 5],
            budgets: vec![4.0, 8.0],
            seeds: vec![101, 102, 103],
            tokens: 32,
            alpha: 0.5,
            model: ToyModelConfig::default(),
        }
    }
}

/// One grid cell of the error sweep, aggregated over the seed set.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SweepCell {
    pub method: String,
    pub hops: usize,
    pub budget_bits: f64,
    pub seeds: Vec<u64>,
    /// Final-hop output error, mean and max over seeds.
    pub mean_error: f64,
    pub max_error: f64,
    pub mean_card_bytes: f64,
    pub mean_average_bits: f64,
    /// Weighted-error objective of the exact allocation at this budget.
    pub adaptive_objective: f64,
    /// Objective of the best uniform width fitting the same budget.
    pub uniform_objective: f64,
}

/// The full sweep grid.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SweepReport {
    pub tokens: usize,
    pub policy: String,
    pub cells: Vec<SweepCell>,
}

/// Run the error sweep: every (method × hop count × budget) cell under
/// the re-quantize-each-hop policy, aggregated over the seed set. Cells
/// are emitted methods-outermost, then hops, then budgets.
pub fn run_error_sweep(cfg: &SweepConfig) -> Result<SweepReport, BenchError> {
    if cfg.methods.is_empty() || cfg.hops.is_empty() || cfg.budgets.is_empty() {
        return Err(BenchError::InvalidParameter(
            "methods, hops, and budgets must all be non-empty".into(),
        ));
    }
    if cfg.seeds.is_empty() {
        return Err(BenchError::InvalidParameter(
            "at least one seed is required".into(),
        ));
    }
    if cfg.hops.iter().any(|&h| h == 0) {
        return Err(BenchError::InvalidParameter(
            "hop counts must be at least 1".into(),
        ));
    }
    if cfg.tokens == 0 {
        return Err(BenchError::InvalidParameter(
            "tokens must be at least 1".into(),
        ));
    }
    let model = ToyModel::new(&cfg.model);

    // Source caches and per-(budget, seed) allocator objectives are
    // method- and hop-independent; compute them once.
    let mut caches = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        caches.push(generate_synthetic_cache(&SyntheticConfig {
            seed,
            layers: model.layers(),
            heads: model.heads(),
            tokens: cfg.tokens,
            head_dim: model.head_dim(),
            ..Default::default()
        })?);
    }
    let mut objectives: HashMap<(u64, u64), (f64, f64)> = HashMap::new();
    for &budget in &cfg.budgets {
        for (&seed, cache) in cfg.seeds.iter().zip(&caches) {
            let stats = generate_attention_stats(
                &SyntheticConfig {
                    seed,
                    layers: model.layers(),
                    heads: model.heads(),
                    tokens: cfg.tokens,
                    head_dim: model.head_dim(),
                    ..Default::default()
                },
                cache,
            )?;
            let scores = local_importance(&stats);
            let table = build_error_table(cache, ErrorTableMode::Analytic)?;
            let total_budget = budget * cfg.tokens as f64;
            let exact = allocate_exact(&scores, &table, total_budget)?;
            let width = feasible_uniform_width(cfg.tokens, total_budget).ok_or_else(|| {
                BenchError::InvalidParameter(format!(
                    "budget {budget} bits/token admits no uniform width"
                ))
            })?;
            let uniform = uniform_assignment(width, &scores, &table)?;
            objectives.insert(
                (budget.to_bits(), seed),
                (exact.objective_value, uniform.objective_value),
            );
        }
    }

    let mut cells = Vec::with_capacity(cfg.methods.len() * cfg.hops.len() * cfg.budgets.len());
    for &method in &cfg.methods {
        for &hops in &cfg.hops {
            let agents = (0..hops + 1)
                .map(|i| AgentSpec {
                    id: format!("agent-{i}"),
                    model_id: cfg.model.model_id.clone(),
                })
                .collect();
            let graph = TopologyGraph::linear(agents)?;
            for &budget in &cfg.budgets {
                let mut errors = Vec::with_capacity(cfg.seeds.len());
                let mut bytes = Vec::with_capacity(cfg.seeds.len());
                let mut avg_bits = Vec::with_capacity(cfg.seeds.len());
                let mut adaptive_sum = 0.0;
                let mut uniform_sum = 0.0;
                for (&seed, cache) in cfg.seeds.iter().zip(&caches) {
                    let chain_cfg = ChainConfig {
                        budget_bits_per_token: budget,
                        alpha: cfg.alpha,
                        stats_seed: seed,
                        query_seed: seed,
                        ..ChainConfig::default()
                    };
                    let outcome = run_chain(
                        &graph,
                        cache,
                        method,
                        HopPolicy::RequantizeEachHop,
                        &model,
                        &chain_cfg,
                    )?;
                    let last = outcome.reports.last().expect("k ≥ 2 agents yield a report");
                    errors.push(last.output_relative_error);
                    bytes.push(last.card_bytes as f64);
                    avg_bits.push(last.average_bits);
                    let (adaptive, uniform) = objectives[&(budget.to_bits(), seed)];
                    adaptive_sum += adaptive;
                    uniform_sum += uniform;
                }
                let count = cfg.seeds.len() as f64;
                cells.push(SweepCell {
                    method: method.as_str().to_owned(),
                    hops,
                    budget_bits: budget,
                    seeds: cfg.seeds.clone(),
                    mean_error: errors.iter().sum::<f64>() / count,
                    max_error: errors.iter().copied().fold(0.0, f64::max),
                    mean_card_bytes: bytes.iter().sum::<f64>() / count,
                    mean_average_bits: avg_bits.iter().sum::<f64>() / count,
                    adaptive_objective: adaptive_sum / count,
                    uniform_objective: uniform_sum / count,
                });
            }
        }
    }
    Ok(SweepReport {
        tokens: cfg.tokens,
        policy: HopPolicy::RequantizeEachHop.as_str().to_owned(),
        cells,
    })
}

// ---------------------------------------------------------------------------
// Report emission
// ---------------------------------------------------------------------------

/// A renderable report payload.
#[derive(Debug, Clone, PartialEq)]
pub enum ReportPayload<'a> {
    Timing(&'a [StageTimingReport]),
    Sweep(&'a SweepReport),
    Chain(&'a [HopReport]),
}

const TIMING_CSV_HEADER: &str =
    "label,tokens,trials,create_card_ms,inject_ms,generate_ms,reprefill_ms,handoff_ttft_ms";
const SWEEP_CSV_HEADER: &str = "method,hops,budget_bits,seeds,mean_error,max_error,\
                                mean_card_bytes,mean_average_bits,adaptive_objective,\
                                uniform_objective";
const CHAIN_CSV_HEADER: &str = "hop,method,policy,average_bits,output_relative_error,\
                                card_bytes,create_card_ms,inject_ms,generate_ms";

fn join_seeds(seeds: &[u64]) -> String {
    seeds
        .iter()
        .map(|s| s.to_string())
        .collect::<Vec<_>>()
        .join("|")
}

/// Render a report to text. JSON is pretty-printed `serde_json`; CSV has
/// one header line and one row per record, with seed lists joined by
/// `|`. Both forms end with a newline and are deterministic functions of
/// the report value.
pub fn render_report(payload: &ReportPayload<'_>, format: ReportFormat) -> Result<String, BenchError> {
    match format {
        ReportFormat::Json => {
            let text = match payload {
                ReportPayload::Timing(r) => serde_json::to_string_pretty(r)?,
                ReportPayload::Sweep(r) => serde_json::to_string_pretty(r)?,
                ReportPayload::Chain(r) => serde_json::to_string_pretty(r)?,
            };
            Ok(text + "\n")
        }
        ReportFormat::Csv => {
            let mut out = String::new();
            match payload {
                ReportPayload::Timing(reports) => {
                    out.push_str(TIMING_CSV_HEADER);
                    out.push('\n');
                    for r in *reports {
                        out.push_str(&format!(
                            "{},{},{},{},{},{},{},{}\n",
                            r.label,
                            r.tokens,
                            r.trials,
                            r.create_card_ms,
                            r.inject_ms,
                            r.generate_ms,
                            r.reprefill_ms,
                            r.handoff_ttft_ms
                        ));
                    }
                }
                ReportPayload::Sweep(report) => {
                    out.push_str(SWEEP_CSV_HEADER);
                    out.push('\n');
                    for c in &report.cells {
                        out.push_str(&format!(
                            "{},{},{},{},{},{},{},{},{},{}\n",
                            c.method,
                            c.hops,
                            c.budget_bits,
                            join_seeds(&c.seeds),
                            c.mean_error,
                            c.max_error,
                            c.mean_card_bytes,
                            c.mean_average_bits,
                            c.adaptive_objective,
                            c.uniform_objective
                        ));
                    }
                }
                ReportPayload::Chain(reports) => {
                    out.push_str(CHAIN_CSV_HEADER);
                    out.push('\n');
                    for r in *reports {
                        out.push_str(&format!(
                            "{},{},{},{},{},{},{},{},{}\n",
                            r.hop,
                            r.method,
                            r.policy,
                            r.average_bits,
                            r.output_relative_error,
                            r.card_bytes,
                            r.stage_times.create_card_ms,
                            r.stage_times.inject_ms,
                            r.stage_times.generate_ms
                        ));
                    }
                }
            }
            Ok(out)
        }
    }
}

/// Render a report and write it to `path`.
pub fn emit_report(
    payload: &ReportPayload<'_>,
    format: ReportFormat,
    path: &Path,
) -> Result<(), BenchError> {
    let text = render_report(payload, format)?;
    let mut file = std::fs::File::create(path)?;
    file.write_all(text.as_bytes())?;
    Ok(())
}
