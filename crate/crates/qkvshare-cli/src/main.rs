//! `qkvshare` — synthesize caches, quantize them into cards, simulate
//! multi-hop handoffs, run the benchmarks, and move cards over TCP.
//!
//! Subcommand-specific knobs come from a flat `key=value` config file
//! (`--config`); unknown keys are hard errors. Everything seeded is
//! deterministic: the same seed and config produce byte-identical
//! reports, with `--redact-timings` zeroing wall-clock fields where
//! that matters. Exit codes: 0 success, 2 usage error, 3 data/format
//! error, 4 protocol error.

use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::{Parser, Subcommand, ValueEnum};

use qkvshare::allocator::ErrorTableMode;
use qkvshare::bench::{
    emit_report, redact_hops, redact_timing, render_report, run_error_sweep, run_stage_timing,
    BenchError, ReportFormat, ReportPayload, SweepConfig, TimingConfig,
};
use qkvshare::cachecard::{
    build_card, encode_card, load_card, store_card, CacheCard, CardError,
};
use qkvshare::config::{load_config, ConfigError, ConfigMap};
use qkvshare::handoff::{
    density_calculator, parse_topology, run_chain, select_bits, AgentSpec, ChainConfig,
    HandoffError, HopPolicy, Method, TopologyGraph, ToyModel, ToyModelConfig,
};
use qkvshare::importance::AnchorPool;
use qkvshare::quantizer::{dequantize_cache, quantize_cache, BitWidth, QuantError};
use qkvshare::tensorio::{
    generate_synthetic_cache, load_container, store_container, KVCache, SyntheticConfig,
    TensorError,
};
use qkvshare::transport::{Session, TransportError};

#[derive(Parser)]
#[command(name = "qkvshare", version, about = "Quantized KV-cache handoff toolkit")]
struct Cli {
    /// Seed for everything random in the subcommand.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat key=value config file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output file; reports go to stdout when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Report format.
    #[arg(long, global = true, value_enum, default_value_t = FormatArg::Json)]
    format: FormatArg,
    /// Zero wall-clock fields in reports (byte-identical reruns).
    #[arg(long, global = true)]
    redact_timings: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    Json,
    Csv,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> ReportFormat {
        match f {
            FormatArg::Json => ReportFormat::Json,
            FormatArg::Csv => ReportFormat::Csv,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic KV-cache container (requires --out).
    Synth,
    /// Quantize a container, report quality and size, optionally write
    /// the card to --out.
    Quantize {
        /// Container file from `synth`.
        container: PathBuf,
    },
    /// Card codec operations.
    Card {
        #[command(subcommand)]
        op: CardOp,
    },
    /// Multi-hop handoff simulation.
    Handoff {
        #[command(subcommand)]
        op: HandoffOp,
    },
    /// Benchmarks.
    Bench {
        #[command(subcommand)]
        op: BenchOp,
    },
    /// KV-cache memory density calculator.
    Density,
    /// Receive one card over TCP and report on it.
    Serve,
    /// Send a card file over TCP.
    Send {
        /// Card file to send.
        card: PathBuf,
    },
}

#[derive(Subcommand)]
enum CardOp {
    /// Container → card file (requires --out).
    Encode { container: PathBuf },
    /// Card → reconstructed container file (requires --out).
    Decode { card: PathBuf },
    /// Print a card's header and size statistics.
    Stats { card: PathBuf },
}

#[derive(Subcommand)]
enum HandoffOp {
    /// Run a chain handoff and report every hop.
    Run {
        /// Topology file; defaults to a linear chain of `agents` agents.
        topology: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum BenchOp {
    /// Stage timings and the reprefill-vs-handoff TTFT comparison.
    Ttft,
    /// Method × hops × budget error sweep.
    Sweep,
}

// ---------------------------------------------------------------------------
// Error → exit code mapping
// ---------------------------------------------------------------------------

#[derive(Debug)]
enum CliError {
    /// Bad invocation or config: exit 2.
    Usage(String),
    /// Bad data, file, or format: exit 3.
    Data(String),
    /// Transport/protocol failure: exit 4.
    Protocol(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Protocol(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Protocol(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io(io) => CliError::Data(format!("config: {io}")),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<TransportError> for CliError {
    fn from(e: TransportError) -> Self {
        CliError::Protocol(e.to_string())
    }
}

macro_rules! data_error {
    ($($ty:ty),+) => {$(
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Data(e.to_string())
            }
        }
    )+};
}
data_error!(
    TensorError,
    QuantError,
    CardError,
    HandoffError,
    BenchError,
    std::io::Error,
    serde_json::Error
);

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

// ---------------------------------------------------------------------------
// Config plumbing
// ---------------------------------------------------------------------------

fn read_config(cli: &Cli) -> Result<ConfigMap, CliError> {
    match &cli.config {
        Some(path) => Ok(load_config(path)?),
        None => Ok(ConfigMap::default()),
    }
}

fn model_config(cfg: &ConfigMap) -> Result<ToyModelConfig, CliError> {
    let mut m = ToyModelConfig::default();
    if let Some(id) = cfg.get("model_id") {
        if id.is_empty() {
            return Err(CliError::Usage("model_id must be non-empty".into()));
        }
        m.model_id = id.to_owned();
    }
    if let Some(v) = cfg.get_usize("layers")? {
        m.layers = v;
    }
    if let Some(v) = cfg.get_usize("heads")? {
        m.heads = v;
    }
    if let Some(v) = cfg.get_usize("head_dim")? {
        m.head_dim = v;
    }
    if let Some(v) = cfg.get_f64("temperature")? {
        m.temperature = v;
    }
    if let Some(v) = cfg.get_u64("weight_seed")? {
        m.weight_seed = v;
    }
    if m.layers == 0 || m.heads == 0 || m.head_dim == 0 {
        return Err(CliError::Usage(
            "layers, heads, and head_dim must be at least 1".into(),
        ));
    }
    if !(m.temperature.is_finite() && m.temperature > 0.0) {
        return Err(CliError::Usage(
            "temperature must be a positive finite real".into(),
        ));
    }
    Ok(m)
}

const SYNTH_KEYS: &[&str] = &[
    "tokens",
    "layers",
    "heads",
    "head_dim",
    "value_scale",
    "heavy_hitter_fraction",
];

fn synth_config(cfg: &ConfigMap, seed: u64) -> Result<SyntheticConfig, CliError> {
    let mut s = SyntheticConfig {
        seed,
        ..Default::default()
    };
    if let Some(v) = cfg.get_usize("tokens")? {
        s.tokens = v;
    }
    if let Some(v) = cfg.get_usize("layers")? {
        s.layers = v;
    }
    if let Some(v) = cfg.get_usize("heads")? {
        s.heads = v;
    }
    if let Some(v) = cfg.get_usize("head_dim")? {
        s.head_dim = v;
    }
    if let Some(v) = cfg.get_f64("value_scale")? {
        s.value_scale = v;
    }
    if let Some(v) = cfg.get_f64("heavy_hitter_fraction")? {
        s.heavy_hitter_fraction = v;
    }
    Ok(s)
}

fn chain_config(cfg: &ConfigMap) -> Result<ChainConfig, CliError> {
    let mut c = ChainConfig::default();
    if let Some(v) = cfg.get_f64("budget_bits_per_token")? {
        c.budget_bits_per_token = v;
    }
    if let Some(v) = cfg.get_f64("alpha")? {
        c.alpha = v;
    }
    if let Some(v) = cfg.get_u64("stats_seed")? {
        c.stats_seed = v;
    }
    if let Some(v) = cfg.get_f64("heavy_hitter_fraction")? {
        c.heavy_hitter_fraction = v;
    }
    if let Some(v) = cfg.get_u64("query_seed")? {
        c.query_seed = v;
    }
    if let Some(v) = cfg.get_usize("queries_per_hop")? {
        c.queries_per_hop = v;
    }
    if let Some(v) = cfg.get_usize("anchor_capacity")? {
        c.anchor_capacity = v;
    }
    if let Some(raw) = cfg.get("table_mode") {
        c.table_mode = ErrorTableMode::parse(raw)
            .ok_or_else(|| CliError::Usage(format!("table_mode {raw:?} (analytic|measured)")))?;
    }
    if let Some(v) = cfg.get_usize("append_tokens_per_hop")? {
        c.append_tokens_per_hop = v;
    }
    if let Some(v) = cfg.get_u64("append_seed")? {
        c.append_seed = v;
    }
    if let Some(v) = cfg.get_f64("append_value_scale")? {
        c.append_value_scale = v;
    }
    Ok(c)
}

fn parse_method(raw: &str) -> Result<Method, CliError> {
    Method::parse(raw).ok_or_else(|| {
        CliError::Usage(format!(
            "unknown method {raw:?}; expected one of {}",
            Method::ALL
                .iter()
                .map(|m| m.as_str())
                .collect::<Vec<_>>()
                .join(", ")
        ))
    })
}

fn parse_policy(raw: &str) -> Result<HopPolicy, CliError> {
    HopPolicy::parse(raw).ok_or_else(|| {
        CliError::Usage(format!(
            "unknown policy {raw:?}; expected requantize_each_hop or pass_through"
        ))
    })
}

/// Comma-separated list with a per-item parser.
fn parse_list<T>(raw: &str, what: &str, parse: impl Fn(&str) -> Option<T>) -> Result<Vec<T>, CliError> {
    let mut items = Vec::new();
    for part in raw.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        items.push(
            parse(part).ok_or_else(|| CliError::Usage(format!("bad {what} entry {part:?}")))?,
        );
    }
    if items.is_empty() {
        return Err(CliError::Usage(format!("{what} list is empty")));
    }
    Ok(items)
}

// ---------------------------------------------------------------------------
// Output plumbing
// ---------------------------------------------------------------------------

fn write_text(text: &str, out: &Option<PathBuf>) -> Result<(), CliError> {
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

/// Render a flat summary struct as pretty JSON or two-line CSV.
fn render_summary<T: serde::Serialize>(value: &T, format: FormatArg) -> Result<String, CliError> {
    match format {
        FormatArg::Json => Ok(serde_json::to_string_pretty(value)? + "\n"),
        FormatArg::Csv => {
            let json = serde_json::to_value(value)?;
            let obj = json
                .as_object()
                .expect("summaries serialize to flat objects");
            let mut header = Vec::with_capacity(obj.len());
            let mut row = Vec::with_capacity(obj.len());
            for (key, val) in obj {
                header.push(key.clone());
                row.push(match val {
                    serde_json::Value::String(s) => s.clone(),
                    other => other.to_string(),
                });
            }
            Ok(format!("{}\n{}\n", header.join(","), row.join(",")))
        }
    }
}

fn require_out(out: &Option<PathBuf>, what: &str) -> Result<PathBuf, CliError> {
    out.clone()
        .ok_or_else(|| CliError::Usage(format!("{what} requires --out <path>")))
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = read_config(&cli)?;
    match &cli.command {
        Command::Synth => cmd_synth(&cli, &cfg),
        Command::Quantize { container } => cmd_quantize(&cli, &cfg, container),
        Command::Card { op } => match op {
            CardOp::Encode { container } => cmd_card_encode(&cli, &cfg, container),
            CardOp::Decode { card } => cmd_card_decode(&cli, &cfg, card),
            CardOp::Stats { card } => cmd_card_stats(&cli, &cfg, card),
        },
        Command::Handoff { op } => match op {
            HandoffOp::Run { topology } => cmd_handoff_run(&cli, &cfg, topology.as_deref()),
        },
        Command::Bench { op } => match op {
            BenchOp::Ttft => cmd_bench_ttft(&cli, &cfg),
            BenchOp::Sweep => cmd_bench_sweep(&cli, &cfg),
        },
        Command::Density => cmd_density(&cli, &cfg),
        Command::Serve => cmd_serve(&cli, &cfg),
        Command::Send { card } => cmd_send(&cli, &cfg, card),
    }
}

#[derive(serde::Serialize)]
struct SynthSummary {
    tokens: usize,
    layers: usize,
    heads: usize,
    head_dim: usize,
    container_bytes: u64,
}

fn cmd_synth(cli: &Cli, cfg: &ConfigMap) -> Result<(), CliError> {
    cfg.ensure_known(SYNTH_KEYS)?;
    let out = require_out(&cli.out, "synth")?;
    let synth = synth_config(cfg, cli.seed.unwrap_or(7))?;
    let cache = generate_synthetic_cache(&synth)?;
    let container_bytes = store_container(&cache, &out)?;
    let summary = SynthSummary {
        tokens: cache.tokens(),
        layers: cache.layers(),
        heads: cache.heads(),
        head_dim: cache.head_dim(),
        container_bytes,
    };
    print!("{}", render_summary(&summary, cli.format)?);
    Ok(())
}

/// Widths for `quantize`/`card encode`: uniform `bits`, or an adaptive
/// method with a budget.
fn widths_from_config(cfg: &ConfigMap, cache: &KVCache) -> Result<(Vec<BitWidth>, String), CliError> {
    let method = cfg.get("method").map(parse_method).transpose()?;
    let bits = cfg.get_u64("bits")?;
    match (method, bits) {
        (Some(_), Some(_)) => Err(CliError::Usage(
            "give either bits= or method=, not both".into(),
        )),
        (None, raw_bits) => {
            let bits = raw_bits.unwrap_or(4);
            let width = u8::try_from(bits)
                .ok()
                .and_then(BitWidth::from_bits)
                .ok_or_else(|| {
                    CliError::Usage(format!("bits must be one of 2, 4, 8, 16; got {bits}"))
                })?;
            Ok((vec![width; cache.tokens()], format!("uniform-{bits}")))
        }
        (Some(method), None) => {
            let chain = chain_config(cfg)?;
            let anchors = AnchorPool::new(chain.anchor_capacity);
            let widths = select_bits(method, cache, &anchors, &chain)?;
            Ok((widths, method.as_str().to_owned()))
        }
    }
}

const QUANTIZE_KEYS: &[&str] = &[
    "bits",
    "method",
    "model_id",
    "sender_id",
    "budget_bits_per_token",
    "alpha",
    "stats_seed",
    "heavy_hitter_fraction",
    "table_mode",
];

#[derive(serde::Serialize)]
struct QuantizeReport {
    mode: String,
    tokens: usize,
    average_bits: f64,
    payload_bytes: u64,
    fp16_equivalent_bytes: u64,
    compression_ratio: f64,
    max_abs_error: f64,
}

fn cmd_quantize(cli: &Cli, cfg: &ConfigMap, container: &Path) -> Result<(), CliError> {
    cfg.ensure_known(QUANTIZE_KEYS)?;
    let cache = load_container(container)?;
    let (widths, mode) = widths_from_config(cfg, &cache)?;
    let quantized = quantize_cache(&cache, &widths)?;
    let restored = dequantize_cache(&quantized)?;
    let max_abs_error = cache
        .keys()
        .iter()
        .chain(cache.values())
        .zip(restored.keys().iter().chain(restored.values()))
        .map(|(a, b)| (*a as f64 - *b as f64).abs())
        .fold(0.0f64, f64::max);
    let card = build_card(
        quantized,
        cfg.get("model_id").unwrap_or("toy-v1"),
        cfg.get("sender_id").unwrap_or("cli"),
    )?;
    let stats = card.stats();
    let report = QuantizeReport {
        mode,
        tokens: cache.tokens(),
        average_bits: stats.average_bits,
        payload_bytes: stats.payload_bytes,
        fp16_equivalent_bytes: stats.fp16_equivalent_bytes,
        compression_ratio: stats.compression_ratio,
        max_abs_error,
    };
    if let Some(out) = &cli.out {
        store_card(&card, out)?;
    }
    print!("{}", render_summary(&report, cli.format)?);
    Ok(())
}

const CARD_ENCODE_KEYS: &[&str] = &[
    "bits",
    "method",
    "model_id",
    "sender_id",
    "position_offset",
    "budget_bits_per_token",
    "alpha",
    "stats_seed",
    "heavy_hitter_fraction",
    "table_mode",
];

#[derive(serde::Serialize)]
struct EncodeSummary {
    mode: String,
    tokens: usize,
    average_bits: f64,
    card_bytes: u64,
}

fn cmd_card_encode(cli: &Cli, cfg: &ConfigMap, container: &Path) -> Result<(), CliError> {
    cfg.ensure_known(CARD_ENCODE_KEYS)?;
    let out = require_out(&cli.out, "card encode")?;
    let cache = load_container(container)?;
    let (widths, mode) = widths_from_config(cfg, &cache)?;
    let quantized = quantize_cache(&cache, &widths)?;
    let mut card = build_card(
        quantized,
        cfg.get("model_id").unwrap_or("toy-v1"),
        cfg.get("sender_id").unwrap_or("cli"),
    )?;
    if let Some(offset) = cfg.get_i32("position_offset")? {
        card = card.with_position_offset(offset);
    }
    let card_bytes = store_card(&card, &out)?;
    let summary = EncodeSummary {
        mode,
        tokens: card.tokens(),
        average_bits: card.stats().average_bits,
        card_bytes,
    };
    print!("{}", render_summary(&summary, cli.format)?);
    Ok(())
}

#[derive(serde::Serialize)]
struct DecodeSummary {
    model_id: String,
    sender_id: String,
    tokens: usize,
    average_bits: f64,
    container_bytes: u64,
}

fn cmd_card_decode(cli: &Cli, cfg: &ConfigMap, card_path: &Path) -> Result<(), CliError> {
    cfg.ensure_known(&[])?;
    let out = require_out(&cli.out, "card decode")?;
    let card = load_card(card_path)?;
    let cache = dequantize_cache(card.payload())?;
    let container_bytes = store_container(&cache, &out)?;
    let summary = DecodeSummary {
        model_id: card.model_id().to_owned(),
        sender_id: card.sender_id().to_owned(),
        tokens: card.tokens(),
        average_bits: card.stats().average_bits,
        container_bytes,
    };
    print!("{}", render_summary(&summary, cli.format)?);
    Ok(())
}

#[derive(serde::Serialize)]
struct CardInfo {
    model_id: String,
    sender_id: String,
    position_offset: i32,
    layers: usize,
    heads: usize,
    tokens: usize,
    head_dim: usize,
    average_bits: f64,
    payload_bytes: u64,
    fp16_equivalent_bytes: u64,
    compression_ratio: f64,
}

fn card_info(card: &CacheCard) -> CardInfo {
    let stats = card.stats();
    CardInfo {
        model_id: card.model_id().to_owned(),
        sender_id: card.sender_id().to_owned(),
        position_offset: card.position_offset(),
        layers: card.layers(),
        heads: card.heads(),
        tokens: card.tokens(),
        head_dim: card.head_dim(),
        average_bits: stats.average_bits,
        payload_bytes: stats.payload_bytes,
        fp16_equivalent_bytes: stats.fp16_equivalent_bytes,
        compression_ratio: stats.compression_ratio,
    }
}

fn cmd_card_stats(cli: &Cli, cfg: &ConfigMap, card_path: &Path) -> Result<(), CliError> {
    cfg.ensure_known(&[])?;
    let card = load_card(card_path)?;
    let text = render_summary(&card_info(&card), cli.format)?;
    write_text(&text, &cli.out)
}

const HANDOFF_KEYS: &[&str] = &[
    "agents",
    "method",
    "policy",
    "tokens",
    "value_scale",
    "model_id",
    "layers",
    "heads",
    "head_dim",
    "temperature",
    "weight_seed",
    "budget_bits_per_token",
    "alpha",
    "stats_seed",
    "heavy_hitter_fraction",
    "query_seed",
    "queries_per_hop",
    "anchor_capacity",
    "table_mode",
    "append_tokens_per_hop",
    "append_seed",
    "append_value_scale",
];

fn cmd_handoff_run(cli: &Cli, cfg: &ConfigMap, topology: Option<&Path>) -> Result<(), CliError> {
    cfg.ensure_known(HANDOFF_KEYS)?;
    let model_cfg = model_config(cfg)?;
    let model = ToyModel::new(&model_cfg);
    let graph = match topology {
        Some(path) => parse_topology(&std::fs::read_to_string(path)?)?,
        None => {
            let agents = cfg.get_usize("agents")?.unwrap_or(3);
            if agents < 2 {
                return Err(CliError::Usage("agents must be at least 2".into()));
            }
            TopologyGraph::linear(
                (0..agents)
                    .map(|i| AgentSpec {
                        id: format!("agent-{i}"),
                        model_id: model_cfg.model_id.clone(),
                    })
                    .collect(),
            )?
        }
    };
    let method = parse_method(cfg.get("method").unwrap_or("uniform_q4"))?;
    let policy = parse_policy(cfg.get("policy").unwrap_or("requantize_each_hop"))?;
    let chain = chain_config(cfg)?;
    let mut synth = SyntheticConfig {
        seed: cli.seed.unwrap_or(7),
        layers: model_cfg.layers,
        heads: model_cfg.heads,
        head_dim: model_cfg.head_dim,
        heavy_hitter_fraction: chain.heavy_hitter_fraction,
        ..Default::default()
    };
    if let Some(v) = cfg.get_usize("tokens")? {
        synth.tokens = v;
    }
    if let Some(v) = cfg.get_f64("value_scale")? {
        synth.value_scale = v;
    }
    let source = generate_synthetic_cache(&synth)?;
    let outcome = run_chain(&graph, &source, method, policy, &model, &chain)?;
    let mut reports = outcome.reports;
    if cli.redact_timings {
        redact_hops(&mut reports);
    }
    let text = render_report(&ReportPayload::Chain(&reports), cli.format.into())
        .map_err(CliError::from)?;
    write_text(&text, &cli.out)
}

const BENCH_TTFT_KEYS: &[&str] = &[
    "contexts",
    "trials",
    "warmup",
    "method",
    "budget_bits_per_token",
    "model_id",
    "layers",
    "heads",
    "head_dim",
    "temperature",
    "weight_seed",
];

fn cmd_bench_ttft(cli: &Cli, cfg: &ConfigMap) -> Result<(), CliError> {
    cfg.ensure_known(BENCH_TTFT_KEYS)?;
    let mut timing = TimingConfig {
        model: model_config(cfg)?,
        ..Default::default()
    };
    if let Some(seed) = cli.seed {
        timing.seed = seed;
    }
    if let Some(raw) = cfg.get("contexts") {
        timing.contexts = parse_list(raw, "contexts", |part| {
            let (label, tokens) = part.split_once(':')?;
            let tokens: usize = tokens.trim().parse().ok()?;
            let label = label.trim();
            (!label.is_empty() && tokens > 0).then(|| (label.to_owned(), tokens))
        })?;
    }
    if let Some(v) = cfg.get_usize("trials")? {
        timing.trials = v;
    }
    if let Some(v) = cfg.get_usize("warmup")? {
        timing.warmup = v;
    }
    if let Some(raw) = cfg.get("method") {
        timing.method = parse_method(raw)?;
    }
    if let Some(v) = cfg.get_f64("budget_bits_per_token")? {
        timing.budget_bits_per_token = v;
    }
    let mut reports = run_stage_timing(&timing)?;
    if cli.redact_timings {
        redact_timing(&mut reports);
    }
    let text = render_report(&ReportPayload::Timing(&reports), cli.format.into())
        .map_err(CliError::from)?;
    write_text(&text, &cli.out)
}

const BENCH_SWEEP_KEYS: &[&str] = &[
    "methods",
    "hops",
    "budgets",
    "seeds",
    "tokens",
    "alpha",
    "model_id",
    "layers",
    "heads",
    "head_dim",
    "temperature",
    "weight_seed",
];

fn cmd_bench_sweep(cli: &Cli, cfg: &ConfigMap) -> Result<(), CliError> {
    cfg.ensure_known(BENCH_SWEEP_KEYS)?;
    let mut sweep = SweepConfig {
        model: model_config(cfg)?,
        ..Default::default()
    };
    if let Some(raw) = cfg.get("methods") {
        sweep.methods = parse_list(raw, "methods", Method::parse)?;
    }
    if let Some(raw) = cfg.get("hops") {
        sweep.hops = parse_list(raw, "hops", |p| p.parse().ok())?;
    }
    if let Some(raw) = cfg.get("budgets") {
        sweep.budgets = parse_list(raw, "budgets", |p| p.parse().ok())?;
    }
    if let Some(raw) = cfg.get("seeds") {
        sweep.seeds = parse_list(raw, "seeds", |p| p.parse().ok())?;
    } else if let Some(seed) = cli.seed {
        sweep.seeds = vec![seed, seed.wrapping_add(1), seed.wrapping_add(2)];
    }
    if let Some(v) = cfg.get_usize("tokens")? {
        sweep.tokens = v;
    }
    if let Some(v) = cfg.get_f64("alpha")? {
        sweep.alpha = v;
    }
    let report = run_error_sweep(&sweep)?;
    match &cli.out {
        Some(path) => {
            emit_report(&ReportPayload::Sweep(&report), cli.format.into(), path)
                .map_err(CliError::from)?;
        }
        None => {
            let text = render_report(&ReportPayload::Sweep(&report), cli.format.into())
                .map_err(CliError::from)?;
            print!("{text}");
        }
    }
    Ok(())
}

const DENSITY_KEYS: &[&str] = &[
    "device_gib",
    "device_bytes",
    "overhead_bytes",
    "layers",
    "heads",
    "tokens",
    "head_dim",
    "bytes_per_element",
];

#[derive(serde::Serialize)]
struct DensityReport {
    device_bytes: u64,
    overhead_bytes: u64,
    layers: usize,
    heads: usize,
    tokens: usize,
    head_dim: usize,
    bytes_per_element: f64,
    contexts: u64,
}

fn cmd_density(cli: &Cli, cfg: &ConfigMap) -> Result<(), CliError> {
    cfg.ensure_known(DENSITY_KEYS)?;
    let device_bytes = match (cfg.get_f64("device_gib")?, cfg.get_u64("device_bytes")?) {
        (Some(_), Some(_)) => {
            return Err(CliError::Usage(
                "give either device_gib= or device_bytes=, not both".into(),
            ))
        }
        (Some(gib), None) if gib > 0.0 && gib.is_finite() => (gib * (1u64 << 30) as f64) as u64,
        (Some(gib), None) => {
            return Err(CliError::Usage(format!(
                "device_gib must be a positive finite real, got {gib}"
            )))
        }
        (None, Some(bytes)) => bytes,
        (None, None) => 12 * (1u64 << 30),
    };
    let overhead_bytes = cfg.get_u64("overhead_bytes")?.unwrap_or(0);
    // Reference decoder architecture used throughout the size examples.
    let layers = cfg.get_usize("layers")?.unwrap_or(32);
    let heads = cfg.get_usize("heads")?.unwrap_or(8);
    let tokens = cfg.get_usize("tokens")?.unwrap_or(8192);
    let head_dim = cfg.get_usize("head_dim")?.unwrap_or(128);
    let bytes_per_element = cfg.get_f64("bytes_per_element")?.unwrap_or(2.0);
    let contexts = density_calculator(
        device_bytes,
        overhead_bytes,
        layers,
        heads,
        tokens,
        head_dim,
        bytes_per_element,
    )?;
    let report = DensityReport {
        device_bytes,
        overhead_bytes,
        layers,
        heads,
        tokens,
        head_dim,
        bytes_per_element,
        contexts,
    };
    let text = render_summary(&report, cli.format)?;
    write_text(&text, &cli.out)
}

const SERVE_KEYS: &[&str] = &["port", "agent_id", "model_id"];
const SEND_KEYS: &[&str] = &["host", "port", "agent_id", "model_id", "connect_timeout_ms"];
const DEFAULT_PORT: u16 = 47561;

#[derive(serde::Serialize)]
struct ServeSummary {
    peer_agent: String,
    sender_id: String,
    model_id: String,
    tokens: usize,
    average_bits: f64,
    card_bytes: u64,
}

fn cmd_serve(cli: &Cli, cfg: &ConfigMap) -> Result<(), CliError> {
    cfg.ensure_known(SERVE_KEYS)?;
    let port = cfg
        .get_u64("port")?
        .map(|p| u16::try_from(p).map_err(|_| CliError::Usage(format!("port {p} out of range"))))
        .transpose()?
        .unwrap_or(DEFAULT_PORT);
    let agent_id = cfg.get("agent_id").unwrap_or("server").to_owned();
    let model_id = cfg.get("model_id").unwrap_or("toy-v1").to_owned();

    let listener =
        TcpListener::bind(("127.0.0.1", port)).map_err(|e| CliError::Protocol(e.to_string()))?;
    let (stream, _) = listener
        .accept()
        .map_err(|e| CliError::Protocol(e.to_string()))?;
    let mut session = Session::new(stream, &agent_id, &model_id);
    session.accept()?;
    let peer_agent = session
        .peer()
        .map(|h| h.agent_id.clone())
        .unwrap_or_default();
    let card = session.receive_card()?;
    session.receive_bye()?;

    let card_bytes = match &cli.out {
        Some(path) => store_card(&card, path)?,
        None => encode_card(&card).len() as u64,
    };
    let summary = ServeSummary {
        peer_agent,
        sender_id: card.sender_id().to_owned(),
        model_id: card.model_id().to_owned(),
        tokens: card.tokens(),
        average_bits: card.stats().average_bits,
        card_bytes,
    };
    print!("{}", render_summary(&summary, cli.format)?);
    Ok(())
}

#[derive(serde::Serialize)]
struct SendSummary {
    peer_agent: String,
    tokens: usize,
    card_bytes: u64,
}

fn cmd_send(cli: &Cli, cfg: &ConfigMap, card_path: &Path) -> Result<(), CliError> {
    cfg.ensure_known(SEND_KEYS)?;
    let host = cfg.get("host").unwrap_or("127.0.0.1").to_owned();
    let port = cfg
        .get_u64("port")?
        .map(|p| u16::try_from(p).map_err(|_| CliError::Usage(format!("port {p} out of range"))))
        .transpose()?
        .unwrap_or(DEFAULT_PORT);
    let agent_id = cfg.get("agent_id").unwrap_or("client").to_owned();
    let model_id = cfg.get("model_id").unwrap_or("toy-v1").to_owned();
    let timeout = Duration::from_millis(cfg.get_u64("connect_timeout_ms")?.unwrap_or(2_000));

    let card = load_card(card_path)?;
    let card_bytes = encode_card(&card).len() as u64;

    // The peer may still be starting up; retry within the deadline.
    let deadline = Instant::now() + timeout;
    let stream = loop {
        match TcpStream::connect((host.as_str(), port)) {
            Ok(s) => break s,
            Err(_) if Instant::now() < deadline => {
                std::thread::sleep(Duration::from_millis(25));
            }
            Err(e) => return Err(CliError::Protocol(format!("connect {host}:{port}: {e}"))),
        }
    };
    let mut session = Session::new(stream, &agent_id, &model_id);
    session.initiate()?;
    let peer_agent = session
        .peer()
        .map(|h| h.agent_id.clone())
        .unwrap_or_default();
    session.send_card(&card)?;
    session.send_bye()?;

    let summary = SendSummary {
        peer_agent,
        tokens: card.tokens(),
        card_bytes,
    };
    print!("{}", render_summary(&summary, cli.format)?);
    Ok(())
}
