//! Agent topology, the receiver-side inject path, a deterministic
//! toy-attention evaluator, multi-hop chain simulation, and the
//! memory-density calculator.
//!
//! The toy model stands in for a real receiving model at desk scale: per
//! layer and head it runs standard scaled-dot-product attention over the
//! cached K/V and combines the heads with fixed seeded scalar projection
//! weights. Everything is f64 and seeded, so a given input produces
//! bit-identical outputs across runs; quantization quality is measured as
//! the relative L2 distance between toy outputs from a reconstructed
//! cache and from the never-quantized reference.
//!
//! [`run_chain`] simulates k agents handing one context down a chain:
//! score → allocate → quantize → build card → inject → evaluate, either
//! re-quantizing the reconstruction at every hop (error accumulates) or
//! forwarding the identical card (error is constant by construction).

use std::collections::HashMap;
use std::time::{Duration, Instant};

use crate::allocator::{
    allocate_exact, allocate_greedy, build_error_table, AllocError, ErrorTableMode,
    EXACT_TOKEN_CAP,
};
use crate::cachecard::{build_card, decode_card, encode_card, CacheCard, CardError};
use crate::importance::{
    anchor_embeddings, combine_scores, downstream_demand, local_importance, update_anchor_pool,
    AnchorPool, ImportanceError, SegmentMap,
};
use crate::quantizer::{dequantize_cache, quantize_cache, BitWidth, QuantError};
use crate::rng::SplitMix64;
use crate::tensorio::{generate_attention_stats, KVCache, SyntheticConfig, TensorError};

/// Sub-stream id for toy-model projection weights.
const STREAM_MODEL_WEIGHTS: u64 = 9;
/// Query sets live at stream ids `256 + substream` (see `FORMAT.md`).
const STREAM_QUERIES_BASE: u64 = 256;
/// Appended-token keys live at `512 + hop`, values at `768 + hop`.
const STREAM_APPEND_KEYS_BASE: u64 = 512;
const STREAM_APPEND_VALUES_BASE: u64 = 768;

/// Errors from topology handling, evaluation, and chain simulation.
#[derive(Debug, thiserror::Error)]
pub enum HandoffError {
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
    #[error("unsupported topology: {0}")]
    UnsupportedTopology(String),
    #[error("card for model {card_model:?} cannot inject into receiver model {receiver_model:?}")]
    ModelMismatch {
        card_model: String,
        receiver_model: String,
    },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("non-finite input: {0}")]
    NonFiniteInput(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Card(#[from] CardError),
    #[error(transparent)]
    Alloc(#[from] AllocError),
    #[error(transparent)]
    Importance(#[from] ImportanceError),
}

// ---------------------------------------------------------------------------
// Topology
// ---------------------------------------------------------------------------

/// One agent in a topology: its id and the model it runs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentSpec {
    pub id: String,
    pub model_id: String,
}

/// Shape class of a topology, inferred from its edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TopologyKind {
    Chain,
    Tree,
}

/// A directed agent graph. Construction validates that edges reference
/// existing agents and that the shape is a simple path (chain) or a
/// rooted tree; anything else is rejected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopologyGraph {
    agents: Vec<AgentSpec>,
    /// Edges as (from, to) agent indices.
    edges: Vec<(usize, usize)>,
    kind: TopologyKind,
}

impl TopologyGraph {
    pub fn new(agents: Vec<AgentSpec>, named_edges: &[(String, String)]) -> Result<Self, HandoffError> {
        if agents.is_empty() {
            return Err(HandoffError::InvalidTopology("no agents".into()));
        }
        let mut index = HashMap::new();
        for (i, agent) in agents.iter().enumerate() {
            if agent.id.is_empty() || agent.model_id.is_empty() {
                return Err(HandoffError::InvalidTopology(format!(
                    "agent {i} has an empty id or model id"
                )));
            }
            if index.insert(agent.id.clone(), i).is_some() {
                return Err(HandoffError::InvalidTopology(format!(
                    "duplicate agent id {:?}",
                    agent.id
                )));
            }
        }
        let mut edges = Vec::with_capacity(named_edges.len());
        for (from, to) in named_edges {
            let f = *index.get(from).ok_or_else(|| {
                HandoffError::InvalidTopology(format!("edge references unknown agent {from:?}"))
            })?;
            let t = *index.get(to).ok_or_else(|| {
                HandoffError::InvalidTopology(format!("edge references unknown agent {to:?}"))
            })?;
            if f == t {
                return Err(HandoffError::InvalidTopology(format!(
                    "self-loop on agent {from:?}"
                )));
            }
            if edges.contains(&(f, t)) {
                return Err(HandoffError::InvalidTopology(format!(
                    "duplicate edge {from:?} -> {to:?}"
                )));
            }
            edges.push((f, t));
        }
        let kind = infer_kind(agents.len(), &edges)?;
        Ok(Self {
            agents,
            edges,
            kind,
        })
    }

    /// Convenience: a linear chain in the given order.
    pub fn linear(agents: Vec<AgentSpec>) -> Result<Self, HandoffError> {
        let edges: Vec<(String, String)> = agents
            .windows(2)
            .map(|w| (w[0].id.clone(), w[1].id.clone()))
            .collect();
        Self::new(agents, &edges)
    }

    pub fn agents(&self) -> &[AgentSpec] {
        &self.agents
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn kind(&self) -> TopologyKind {
        self.kind
    }

    /// Agent indices in path order. Errors on non-chain topologies —
    /// quantitative multi-hop results are defined for chains only.
    pub fn chain_order(&self) -> Result<Vec<usize>, HandoffError> {
        if self.kind != TopologyKind::Chain {
            return Err(HandoffError::UnsupportedTopology(
                "multi-hop simulation requires a chain topology".into(),
            ));
        }
        let mut next = vec![None; self.agents.len()];
        let mut has_incoming = vec![false; self.agents.len()];
        for &(f, t) in &self.edges {
            next[f] = Some(t);
            has_incoming[t] = true;
        }
        let start = (0..self.agents.len())
            .find(|&i| !has_incoming[i])
            .expect("a validated chain has a start");
        let mut order = Vec::with_capacity(self.agents.len());
        let mut at = Some(start);
        while let Some(i) = at {
            order.push(i);
            at = next[i];
        }
        Ok(order)
    }
}

fn infer_kind(agent_count: usize, edges: &[(usize, usize)]) -> Result<TopologyKind, HandoffError> {
    if edges.len() != agent_count - 1 {
        return Err(HandoffError::InvalidTopology(format!(
            "{} edges over {agent_count} agents cannot form a chain or tree",
            edges.len()
        )));
    }
    let mut in_deg = vec![0usize; agent_count];
    let mut out_deg = vec![0usize; agent_count];
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); agent_count];
    for &(f, t) in edges {
        out_deg[f] += 1;
        in_deg[t] += 1;
        children[f].push(t);
    }
    let roots: Vec<usize> = (0..agent_count).filter(|&i| in_deg[i] == 0).collect();
    if roots.len() != 1 || in_deg.iter().any(|&d| d > 1) {
        return Err(HandoffError::InvalidTopology(
            "edges must form a single-rooted acyclic graph".into(),
        ));
    }
    // Reachability from the root; with k−1 edges and unique parents this
    // rules out cycles and disconnection.
    let mut seen = vec![false; agent_count];
    let mut stack = vec![roots[0]];
    let mut visited = 0;
    while let Some(i) = stack.pop() {
        if seen[i] {
            continue;
        }
        seen[i] = true;
        visited += 1;
        stack.extend(&children[i]);
    }
    if visited != agent_count {
        return Err(HandoffError::InvalidTopology(
            "not every agent is reachable from the root".into(),
        ));
    }
    let is_path = out_deg.iter().all(|&d| d <= 1);
    Ok(if is_path {
        TopologyKind::Chain
    } else {
        TopologyKind::Tree
    })
}

/// Parse the plain-text topology format: one `agent <id> <model>` line
/// per agent and one `edge <from> <to>` line per edge; `#` starts a
/// comment; blank lines are skipped.
pub fn parse_topology(text: &str) -> Result<TopologyGraph, HandoffError> {
    let mut agents = Vec::new();
    let mut edges = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            ["agent", id, model] => agents.push(AgentSpec {
                id: (*id).to_owned(),
                model_id: (*model).to_owned(),
            }),
            ["edge", from, to] => edges.push(((*from).to_owned(), (*to).to_owned())),
            _ => {
                return Err(HandoffError::InvalidTopology(format!(
                    "line {}: expected 'agent <id> <model>' or 'edge <from> <to>', got {line:?}",
                    lineno + 1
                )))
            }
        }
    }
    TopologyGraph::new(agents, &edges)
}

// ---------------------------------------------------------------------------
// Toy model
// ---------------------------------------------------------------------------

/// Parameters of the deterministic toy-attention model.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModelConfig {
    pub model_id: String,
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Softmax temperature; logits are `q·k / (√d · temperature)`.
    pub temperature: f64,
    /// Seed for the fixed per-layer/head projection weights.
    pub weight_seed: u64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            model_id: "toy-v1".into(),
            layers: 2,
            heads: 2,
            head_dim: 16,
            temperature: 1.0,
            weight_seed: 13,
        }
    }
}

/// Desk-scale stand-in for a receiving model: scaled-dot-product
/// attention per layer/head over cached K/V, combined by fixed scalar
/// projection weights in [0.5, 1.5).
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    config: ToyModelConfig,
    /// One weight per (layer, head), layer-major.
    projection: Vec<f64>,
}

impl ToyModel {
    pub fn new(config: &ToyModelConfig) -> Self {
        assert!(
            config.layers > 0 && config.heads > 0 && config.head_dim > 0,
            "toy model dimensions must be at least 1"
        );
        assert!(
            config.temperature.is_finite() && config.temperature > 0.0,
            "temperature must be a positive finite real"
        );
        let mut rng = SplitMix64::stream(config.weight_seed, STREAM_MODEL_WEIGHTS);
        let projection = (0..config.layers * config.heads)
            .map(|_| rng.next_range(0.5, 1.5))
            .collect();
        Self {
            config: config.clone(),
            projection,
        }
    }

    pub fn model_id(&self) -> &str {
        &self.config.model_id
    }

    pub fn layers(&self) -> usize {
        self.config.layers
    }

    pub fn heads(&self) -> usize {
        self.config.heads
    }

    pub fn head_dim(&self) -> usize {
        self.config.head_dim
    }

    pub fn temperature(&self) -> f64 {
        self.config.temperature
    }

    pub fn projection_weight(&self, layer: usize, head: usize) -> f64 {
        self.projection[layer * self.config.heads + head]
    }
}

fn check_model_dims(model: &ToyModel, cache: &KVCache) -> Result<(), HandoffError> {
    if cache.layers() != model.layers()
        || cache.heads() != model.heads()
        || cache.head_dim() != model.head_dim()
    {
        return Err(HandoffError::DimensionMismatch(format!(
            "cache shape [{},{},·,{}] does not fit model [{},{},·,{}]",
            cache.layers(),
            cache.heads(),
            cache.head_dim(),
            model.layers(),
            model.heads(),
            model.head_dim()
        )));
    }
    Ok(())
}

fn check_queries(queries: &[Vec<f32>], head_dim: usize) -> Result<(), HandoffError> {
    if queries.is_empty() {
        return Err(HandoffError::InvalidParameter(
            "at least one query is required".into(),
        ));
    }
    for (i, q) in queries.iter().enumerate() {
        if q.len() != head_dim {
            return Err(HandoffError::DimensionMismatch(format!(
                "query {i} has dim {}, model expects {head_dim}",
                q.len()
            )));
        }
        if q.iter().any(|v| !v.is_finite()) {
            return Err(HandoffError::NonFiniteInput(format!("query {i}")));
        }
    }
    Ok(())
}

/// Softmax attention distribution of one query against one (layer, head).
fn attention_probs(model: &ToyModel, cache: &KVCache, query: &[f32], layer: usize, head: usize) -> Vec<f64> {
    let n = cache.tokens();
    let scale = (model.head_dim() as f64).sqrt() * model.temperature();
    let mut logits = Vec::with_capacity(n);
    for t in 0..n {
        let mut dot = 0.0f64;
        for (q, k) in query.iter().zip(cache.key_row(layer, head, t)) {
            dot += *q as f64 * *k as f64;
        }
        logits.push(dot / scale);
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for l in &mut logits {
        *l = (*l - max).exp();
        sum += *l;
    }
    for l in &mut logits {
        *l /= sum;
    }
    logits
}

/// Toy-attention forward pass: per layer/head
/// `softmax(q·Kᵀ/(√d·τ))·V`, combined as the projection-weighted mean
/// over all layers and heads. Returns one d-dimensional output per query.
pub fn toy_forward(
    model: &ToyModel,
    cache: &KVCache,
    queries: &[Vec<f32>],
) -> Result<Vec<Vec<f64>>, HandoffError> {
    check_model_dims(model, cache)?;
    check_queries(queries, model.head_dim())?;
    let d = model.head_dim();
    let denom = (model.layers() * model.heads()) as f64;
    let mut outputs = Vec::with_capacity(queries.len());
    for query in queries {
        let mut out = vec![0.0f64; d];
        for layer in 0..model.layers() {
            for head in 0..model.heads() {
                let probs = attention_probs(model, cache, query, layer, head);
                let w = model.projection_weight(layer, head);
                for (t, &p) in probs.iter().enumerate() {
                    let row = cache.value_row(layer, head, t);
                    let wp = w * p;
                    for (o, &v) in out.iter_mut().zip(row) {
                        *o += wp * v as f64;
                    }
                }
            }
        }
        for o in &mut out {
            *o /= denom;
        }
        outputs.push(out);
    }
    Ok(outputs)
}

/// Mean attention mass each token receives, averaged over layers, heads,
/// and queries (unweighted — this is the receiver's observed demand, not
/// the projected output). Sums to 1.
pub fn attention_received(
    model: &ToyModel,
    cache: &KVCache,
    queries: &[Vec<f32>],
) -> Result<Vec<f64>, HandoffError> {
    check_model_dims(model, cache)?;
    check_queries(queries, model.head_dim())?;
    let n = cache.tokens();
    let mut received = vec![0.0f64; n];
    for query in queries {
        for layer in 0..model.layers() {
            for head in 0..model.heads() {
                let probs = attention_probs(model, cache, query, layer, head);
                for (r, p) in received.iter_mut().zip(probs) {
                    *r += p;
                }
            }
        }
    }
    let denom = (queries.len() * model.layers() * model.heads()) as f64;
    for r in &mut received {
        *r /= denom;
    }
    Ok(received)
}

/// Deterministic standard-normal query set. `substream` separates query
/// sets sharing one seed: calibration uses 0, chain hops use the hop
/// index (or 1 for every pass-through hop).
pub fn seeded_queries(seed: u64, substream: u64, count: usize, dim: usize) -> Vec<Vec<f32>> {
    let mut rng = SplitMix64::stream(seed, STREAM_QUERIES_BASE + substream);
    (0..count)
        .map(|_| (0..dim).map(|_| rng.next_normal() as f32).collect())
        .collect()
}

/// Relative L2 distance `‖a − b‖₂ / ‖b‖₂` over flattened outputs, with
/// `b` as the reference. A zero-norm reference degrades to the absolute
/// distance.
pub fn relative_l2(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut diff = 0.0f64;
    let mut norm = 0.0f64;
    for (ra, rb) in a.iter().zip(b) {
        debug_assert_eq!(ra.len(), rb.len());
        for (&x, &y) in ra.iter().zip(rb) {
            diff += (x - y) * (x - y);
            norm += y * y;
        }
    }
    if norm == 0.0 {
        diff.sqrt()
    } else {
        (diff / norm).sqrt()
    }
}

/// Rebuild a full-precision cache from a card, gated on model identity.
/// The returned duration covers reconstruction only.
pub fn inject_card(
    model: &ToyModel,
    card: &CacheCard,
) -> Result<(KVCache, Duration), HandoffError> {
    if card.model_id() != model.model_id() {
        return Err(HandoffError::ModelMismatch {
            card_model: card.model_id().to_owned(),
            receiver_model: model.model_id().to_owned(),
        });
    }
    if card.layers() != model.layers()
        || card.heads() != model.heads()
        || card.head_dim() != model.head_dim()
    {
        return Err(HandoffError::DimensionMismatch(format!(
            "card shape [{},{},{},{}] does not fit model [{},{},·,{}]",
            card.layers(),
            card.heads(),
            card.tokens(),
            card.head_dim(),
            model.layers(),
            model.heads(),
            model.head_dim()
        )));
    }
    let start = Instant::now();
    let cache = dequantize_cache(card.payload())?;
    Ok((cache, start.elapsed()))
}

// ---------------------------------------------------------------------------
// Chain simulation
// ---------------------------------------------------------------------------

/// Cache-sharing method along a chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Lossless 16-bit share (FP16 semantics at the accounting level).
    Fp16Share,
    UniformQ4,
    UniformQ8,
    /// Budgeted allocation from local importance only (α = 1).
    AdaptiveLocal,
    /// Budgeted allocation blending local importance with downstream
    /// demand (configured α < 1, segments and anchors active).
    AdaptiveTopology,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Fp16Share,
        Method::UniformQ4,
        Method::UniformQ8,
        Method::AdaptiveLocal,
        Method::AdaptiveTopology,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Fp16Share => "fp16_share",
            Method::UniformQ4 => "uniform_q4",
            Method::UniformQ8 => "uniform_q8",
            Method::AdaptiveLocal => "adaptive_local",
            Method::AdaptiveTopology => "adaptive_topology",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

/// What happens to the artifact at intermediate agents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HopPolicy {
    /// Each agent re-scores, re-allocates, and re-quantizes the cache it
    /// reconstructed — quantization error can accumulate.
    RequantizeEachHop,
    /// Each agent forwards the identical card bytes.
    PassThrough,
}

impl HopPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            HopPolicy::RequantizeEachHop => "requantize_each_hop",
            HopPolicy::PassThrough => "pass_through",
        }
    }

    pub fn parse(s: &str) -> Option<HopPolicy> {
        match s {
            "requantize_each_hop" => Some(HopPolicy::RequantizeEachHop),
            "pass_through" => Some(HopPolicy::PassThrough),
            _ => None,
        }
    }
}

/// Wall-clock stage durations of one hop, in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StageTimes {
    pub create_card_ms: f64,
    pub inject_ms: f64,
    pub generate_ms: f64,
}

/// Result of one hop in a chain simulation.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HopReport {
    /// 1-based hop index; a k-agent chain reports hops 1..k−1.
    pub hop: usize,
    pub method: String,
    pub policy: String,
    pub average_bits: f64,
    /// Relative L2 of toy outputs against the never-quantized reference.
    pub output_relative_error: f64,
    pub card_bytes: u64,
    pub stage_times: StageTimes,
}

/// Everything a chain run produced: per-hop reports plus the exact card
/// bytes each hop transferred (pass-through invariance is asserted on
/// these).
#[derive(Debug, Clone, PartialEq)]
pub struct ChainOutcome {
    pub reports: Vec<HopReport>,
    pub encoded_cards: Vec<Vec<u8>>,
}

/// Chain-simulation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainConfig {
    /// Average bit budget per token for the adaptive methods.
    pub budget_bits_per_token: f64,
    /// Blend for adaptive_topology; adaptive_local always uses α = 1.
    pub alpha: f64,
    /// Seed for the synthetic attention statistics behind I(t).
    pub stats_seed: u64,
    pub heavy_hitter_fraction: f64,
    /// Seed for per-hop evaluation query sets.
    pub query_seed: u64,
    pub queries_per_hop: usize,
    pub anchor_capacity: usize,
    pub table_mode: ErrorTableMode,
    /// Synthetic tokens appended after each re-quantizing hop to model
    /// receiver-side generation (0 = pure propagation study).
    pub append_tokens_per_hop: usize,
    pub append_seed: u64,
    pub append_value_scale: f64,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            budget_bits_per_token: 4.0,
            alpha: 0.5,
            stats_seed: 17,
            heavy_hitter_fraction: 0.125,
            query_seed: 29,
            queries_per_hop: 4,
            anchor_capacity: 16,
            table_mode: ErrorTableMode::Analytic,
            append_tokens_per_hop: 0,
            append_seed: 41,
            append_value_scale: 1.0,
        }
    }
}

impl ChainConfig {
    fn validate(&self) -> Result<(), HandoffError> {
        if !self.budget_bits_per_token.is_finite() || self.budget_bits_per_token < 2.0 {
            return Err(HandoffError::InvalidParameter(format!(
                "budget_bits_per_token must be at least 2, got {}",
                self.budget_bits_per_token
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(HandoffError::InvalidParameter(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if self.queries_per_hop == 0 {
            return Err(HandoffError::InvalidParameter(
                "queries_per_hop must be at least 1".into(),
            ));
        }
        if !self.append_value_scale.is_finite() || self.append_value_scale <= 0.0 {
            return Err(HandoffError::InvalidParameter(format!(
                "append_value_scale must be a positive finite real, got {}",
                self.append_value_scale
            )));
        }
        Ok(())
    }
}

/// Pick the per-token widths one sender would use for `cache` under a
/// method: uniform methods map directly, adaptive methods run the full
/// score → error-table → allocate pipeline (exact solver up to
/// [`EXACT_TOKEN_CAP`] tokens, greedy beyond).
pub fn select_bits(
    method: Method,
    cache: &KVCache,
    anchors: &AnchorPool,
    cfg: &ChainConfig,
) -> Result<Vec<BitWidth>, HandoffError> {
    let n = cache.tokens();
    Ok(match method {
        Method::Fp16Share => vec![BitWidth::B16; n],
        Method::UniformQ4 => vec![BitWidth::B4; n],
        Method::UniformQ8 => vec![BitWidth::B8; n],
        Method::AdaptiveLocal | Method::AdaptiveTopology => {
            let stats_cfg = SyntheticConfig {
                seed: cfg.stats_seed,
                layers: cache.layers(),
                heads: cache.heads(),
                tokens: n,
                head_dim: cache.head_dim(),
                value_scale: 1.0,
                heavy_hitter_fraction: cfg.heavy_hitter_fraction,
            };
            let stats = generate_attention_stats(&stats_cfg, cache)?;
            let local = local_importance(&stats);
            let segments = SegmentMap::synthetic(n)?;
            let embeddings = anchor_embeddings(cache);
            let demand = downstream_demand(&embeddings, anchors, &segments)?;
            let alpha = match method {
                Method::AdaptiveLocal => 1.0,
                _ => cfg.alpha,
            };
            let scores = combine_scores(&local, &demand, alpha)?;
            let table = build_error_table(cache, cfg.table_mode)?;
            let budget = cfg.budget_bits_per_token * n as f64;
            let assignment = if n <= EXACT_TOKEN_CAP {
                allocate_exact(&scores.combined, &table, budget)?
            } else {
                allocate_greedy(&scores.combined, &table, budget)?
            };
            assignment.bits
        }
    })
}

/// Deterministic rows appended after a re-quantizing hop; the same rows
/// extend the degraded cache and the reference so the comparison stays
/// apples-to-apples.
fn appended_rows(
    cfg: &ChainConfig,
    hop: u64,
    layers: usize,
    heads: usize,
    count: usize,
    dim: usize,
) -> (Vec<f32>, Vec<f32>) {
    let volume = layers * heads * count * dim;
    let fill = |base: u64| -> Vec<f32> {
        let mut rng = SplitMix64::stream(cfg.append_seed, base + hop);
        (0..volume)
            .map(|_| (rng.next_normal() * cfg.append_value_scale) as f32)
            .collect()
    };
    (
        fill(STREAM_APPEND_KEYS_BASE),
        fill(STREAM_APPEND_VALUES_BASE),
    )
}

/// Extend a cache with `count` extra tokens whose per-(layer, head) key
/// and value rows are given in `[layer][head][token][dim]` order.
fn with_appended(
    cache: &KVCache,
    new_keys: &[f32],
    new_values: &[f32],
    count: usize,
) -> Result<KVCache, HandoffError> {
    let (layers, heads, tokens, dim) = (
        cache.layers(),
        cache.heads(),
        cache.tokens(),
        cache.head_dim(),
    );
    let grown = tokens + count;
    let mut keys = Vec::with_capacity(layers * heads * grown * dim);
    let mut values = Vec::with_capacity(layers * heads * grown * dim);
    for layer in 0..layers {
        for head in 0..heads {
            for token in 0..tokens {
                keys.extend_from_slice(cache.key_row(layer, head, token));
                values.extend_from_slice(cache.value_row(layer, head, token));
            }
            let block = ((layer * heads) + head) * count * dim;
            keys.extend_from_slice(&new_keys[block..block + count * dim]);
            values.extend_from_slice(&new_values[block..block + count * dim]);
        }
    }
    Ok(KVCache::new(layers, heads, grown, dim, keys, values)?)
}

/// Simulate handing `source` down a chain of agents.
///
/// Per hop: select widths → quantize → build and encode a card → decode
/// and inject at the receiver → one toy evaluation against the
/// never-quantized reference. Under [`HopPolicy::PassThrough`] the hop-1
/// card is forwarded verbatim and every hop evaluates the same query set
/// (substream 1), so reported errors are constant; under
/// [`HopPolicy::RequantizeEachHop`] hop `i` uses query substream `i` and
/// the next hop re-quantizes the reconstruction.
pub fn run_chain(
    graph: &TopologyGraph,
    source: &KVCache,
    method: Method,
    policy: HopPolicy,
    model: &ToyModel,
    cfg: &ChainConfig,
) -> Result<ChainOutcome, HandoffError> {
    cfg.validate()?;
    let order = graph.chain_order()?;
    if order.len() < 2 {
        return Err(HandoffError::InvalidTopology(
            "a chain handoff needs at least 2 agents".into(),
        ));
    }
    check_model_dims(model, source)?;

    let mut current = source.clone();
    let mut reference = source.clone();
    let mut anchors = AnchorPool::new(cfg.anchor_capacity);
    let mut carried: Option<(CacheCard, Vec<u8>)> = None;
    let mut reports = Vec::with_capacity(order.len() - 1);
    let mut encoded_cards = Vec::with_capacity(order.len() - 1);

    for hop in 1..order.len() {
        let sender = &graph.agents()[order[hop - 1]];
        let substream = match policy {
            HopPolicy::PassThrough => 1,
            HopPolicy::RequantizeEachHop => hop as u64,
        };
        let queries = seeded_queries(
            cfg.query_seed,
            substream,
            cfg.queries_per_hop,
            model.head_dim(),
        );

        let create_start = Instant::now();
        let (card, bytes) = match (&policy, &carried) {
            (HopPolicy::PassThrough, Some((card, bytes))) => (card.clone(), bytes.clone()),
            _ => {
                let bits = select_bits(method, &current, &anchors, cfg)?;
                let q = quantize_cache(&current, &bits)?;
                let card = build_card(q, model.model_id(), &sender.id)?;
                let bytes = encode_card(&card);
                (card, bytes)
            }
        };
        let create_card = create_start.elapsed();

        let decoded = decode_card(&bytes)?;
        let (injected, inject) = inject_card(model, &decoded)?;

        let generate_start = Instant::now();
        let outputs = toy_forward(model, &injected, &queries)?;
        let generate = generate_start.elapsed();

        let reference_outputs = toy_forward(model, &reference, &queries)?;
        let output_relative_error = relative_l2(&outputs, &reference_outputs);

        // Anchors observed once, at the first handoff, then reused.
        if hop == 1 && method == Method::AdaptiveTopology {
            let received = attention_received(model, &injected, &queries)?;
            let embeddings = anchor_embeddings(&injected);
            anchors = update_anchor_pool(&anchors, &embeddings, &received)?;
        }

        reports.push(HopReport {
            hop,
            method: method.as_str().to_owned(),
            policy: policy.as_str().to_owned(),
            average_bits: decoded.stats().average_bits,
            output_relative_error,
            card_bytes: bytes.len() as u64,
            stage_times: StageTimes {
                create_card_ms: create_card.as_secs_f64() * 1e3,
                inject_ms: inject.as_secs_f64() * 1e3,
                generate_ms: generate.as_secs_f64() * 1e3,
            },
        });
        encoded_cards.push(bytes.clone());

        match policy {
            HopPolicy::PassThrough => carried = Some((card, bytes)),
            HopPolicy::RequantizeEachHop => {
                current = injected;
                if cfg.append_tokens_per_hop > 0 {
                    let (nk, nv) = appended_rows(
                        cfg,
                        hop as u64,
                        current.layers(),
                        current.heads(),
                        cfg.append_tokens_per_hop,
                        current.head_dim(),
                    );
                    current = with_appended(&current, &nk, &nv, cfg.append_tokens_per_hop)?;
                    reference = with_appended(&reference, &nk, &nv, cfg.append_tokens_per_hop)?;
                }
            }
        }
    }
    Ok(ChainOutcome {
        reports,
        encoded_cards,
    })
}

/// Concurrent contexts a device can hold:
/// `floor((device − overhead) / (2·L·H·n·d·bytes_per_element))`.
pub fn density_calculator(
    device_bytes: u64,
    weight_overhead_bytes: u64,
    layers: usize,
    heads: usize,
    tokens: usize,
    head_dim: usize,
    bytes_per_element: f64,
) -> Result<u64, HandoffError> {
    if layers == 0 || heads == 0 || tokens == 0 || head_dim == 0 {
        return Err(HandoffError::InvalidParameter(
            "all dimensions must be at least 1".into(),
        ));
    }
    if !bytes_per_element.is_finite() || bytes_per_element <= 0.0 {
        return Err(HandoffError::InvalidParameter(format!(
            "bytes_per_element must be a positive finite real, got {bytes_per_element}"
        )));
    }
    if weight_overhead_bytes > device_bytes {
        return Err(HandoffError::InvalidParameter(format!(
            "weight overhead {weight_overhead_bytes} exceeds device capacity {device_bytes}"
        )));
    }
    let per_context = 2.0
        * layers as f64
        * heads as f64
        * tokens as f64
        * head_dim as f64
        * bytes_per_element;
    let available = (device_bytes - weight_overhead_bytes) as f64;
    Ok((available / per_context).floor() as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorio::generate_synthetic_cache;
    use proptest::prelude::*;

    fn toy(layers: usize, heads: usize, head_dim: usize) -> ToyModel {
        ToyModel::new(&ToyModelConfig {
            layers,
            heads,
            head_dim,
            ..Default::default()
        })
    }

    fn cache_for(model: &ToyModel, seed: u64, tokens: usize) -> KVCache {
        generate_synthetic_cache(&SyntheticConfig {
            seed,
            layers: model.layers(),
            heads: model.heads(),
            tokens,
            head_dim: model.head_dim(),
            ..Default::default()
        })
        .unwrap()
    }

    fn linear_graph(k: usize) -> TopologyGraph {
        let agents = (0..k)
            .map(|i| AgentSpec {
                id: format!("agent-{i}"),
                model_id: "toy-v1".into(),
            })
            .collect();
        TopologyGraph::linear(agents).unwrap()
    }

    #[test]
    fn topology_parse_and_kinds() {
        let chain = parse_topology(
            "# a three-agent relay\n\
             agent a toy-v1\n\
             agent b toy-v1\n\
             agent c toy-v1\n\
             edge a b\n\
             edge b c\n",
        )
        .unwrap();
        assert_eq!(chain.kind(), TopologyKind::Chain);
        assert_eq!(chain.chain_order().unwrap(), vec![0, 1, 2]);

        let tree = parse_topology(
            "agent root toy-v1\nagent l toy-v1\nagent r toy-v1\nedge root l\nedge root r\n",
        )
        .unwrap();
        assert_eq!(tree.kind(), TopologyKind::Tree);
        assert!(matches!(
            tree.chain_order(),
            Err(HandoffError::UnsupportedTopology(_))
        ));
    }

    #[test]
    fn topology_order_is_edge_driven_not_listing_order() {
        let g = parse_topology(
            "agent last toy-v1\nagent first toy-v1\nagent mid toy-v1\n\
             edge first mid\nedge mid last\n",
        )
        .unwrap();
        let order = g.chain_order().unwrap();
        let ids: Vec<&str> = order.iter().map(|&i| g.agents()[i].id.as_str()).collect();
        assert_eq!(ids, vec!["first", "mid", "last"]);
    }

    #[test]
    fn bad_topologies_rejected() {
        for text in [
            "agent a toy\nagent b toy\nedge a b\nedge b a\n",       // cycle (edge count)
            "agent a toy\nagent a toy\nedge a a\n",                 // duplicate id
            "agent a toy\nagent b toy\nedge a c\n",                 // unknown agent
            "agent a toy\nagent b toy\nedge a b\nedge a b\n",       // duplicate edge
            "agent a toy\nagent b toy\nagent c toy\nedge a b\n",    // disconnected
            "agent a toy\nnonsense line\n",                         // syntax
            "agent a toy\nagent b toy\nagent c toy\nedge a b\nedge c b\n", // two parents
        ] {
            assert!(
                matches!(parse_topology(text), Err(HandoffError::InvalidTopology(_))),
                "accepted: {text}"
            );
        }
    }

    #[test]
    fn single_token_output_ignores_query() {
        let model = toy(2, 2, 4);
        let cache = cache_for(&model, 5, 1);
        let q1 = vec![vec![1.0f32, -2.0, 0.5, 3.0]];
        let q2 = vec![vec![-9.0f32, 4.0, 0.0, 0.25]];
        let out1 = toy_forward(&model, &cache, &q1).unwrap();
        let out2 = toy_forward(&model, &cache, &q2).unwrap();
        assert_eq!(out1, out2);
        // And it equals the projection-weighted mean of the single value
        // row per layer/head.
        let mut expected = vec![0.0f64; 4];
        for l in 0..2 {
            for h in 0..2 {
                let w = model.projection_weight(l, h);
                for (e, &v) in expected.iter_mut().zip(cache.value_row(l, h, 0)) {
                    *e += w * v as f64;
                }
            }
        }
        for e in &mut expected {
            *e /= 4.0;
        }
        for (a, b) in out1[0].iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_keys_give_mean_of_values() {
        let model = toy(1, 2, 4);
        let n = 6;
        // Same key row everywhere; distinct value rows.
        let mut keys = Vec::new();
        let mut values = Vec::new();
        for h in 0..2 {
            for t in 0..n {
                keys.extend_from_slice(&[0.3f32, -0.7, 0.1, 0.9]);
                values.extend((0..4).map(|j| (h * 100 + t * 4 + j) as f32 * 0.01));
            }
        }
        let cache = KVCache::new(1, 2, n, 4, keys, values).unwrap();
        let out = toy_forward(&model, &cache, &[vec![2.0f32, 1.0, -1.0, 0.5]]).unwrap();
        let mut expected = vec![0.0f64; 4];
        for h in 0..2 {
            let w = model.projection_weight(0, h);
            for t in 0..n {
                for (e, &v) in expected.iter_mut().zip(cache.value_row(0, h, t)) {
                    *e += w * v as f64 / n as f64;
                }
            }
        }
        for e in &mut expected {
            *e /= 2.0;
        }
        for (a, b) in out[0].iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let model = toy(2, 2, 8);
        let cache = cache_for(&model, 7, 12);
        let queries = seeded_queries(3, 0, 3, 8);
        let a = toy_forward(&model, &cache, &queries).unwrap();
        let b = toy_forward(&model, &cache, &queries).unwrap();
        for (ra, rb) in a.iter().zip(&b) {
            for (x, y) in ra.iter().zip(rb) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn received_mass_sums_to_one() {
        let model = toy(2, 2, 8);
        let cache = cache_for(&model, 9, 10);
        let queries = seeded_queries(4, 0, 5, 8);
        let received = attention_received(&model, &cache, &queries).unwrap();
        assert_eq!(received.len(), 10);
        let total: f64 = received.iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert!(received.iter().all(|&r| r >= 0.0));

        let single = cache_for(&model, 9, 1);
        let received = attention_received(&model, &single, &queries).unwrap();
        assert!((received[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn inject_gates_on_model_identity() {
        let model = toy(1, 1, 8);
        let cache = cache_for(&model, 11, 8);
        let q = quantize_cache(&cache, &vec![BitWidth::B16; 8]).unwrap();
        let card = build_card(q, "toy-v1", "sender").unwrap();
        let (restored, _) = inject_card(&model, &card).unwrap();
        assert_eq!(restored.keys(), cache.keys());
        assert_eq!(restored.values(), cache.values());

        let q = quantize_cache(&cache, &vec![BitWidth::B4; 8]).unwrap();
        let foreign = build_card(q, "llama-3.1-8b", "sender").unwrap();
        assert!(matches!(
            inject_card(&model, &foreign),
            Err(HandoffError::ModelMismatch { .. })
        ));
    }

    #[test]
    fn relative_l2_examples() {
        let a = vec![vec![2.0, 0.0]];
        let b = vec![vec![1.0, 0.0]];
        assert_eq!(relative_l2(&a, &b), 1.0);
        assert_eq!(relative_l2(&b, &b), 0.0);
        // Zero-norm reference degrades to the absolute distance.
        let z = vec![vec![0.0, 0.0]];
        assert_eq!(relative_l2(&a, &z), 2.0);
    }

    #[test]
    fn fp16_chain_has_zero_error() {
        let model = toy(2, 2, 8);
        let cache = cache_for(&model, 13, 24);
        let out = run_chain(
            &linear_graph(4),
            &cache,
            Method::Fp16Share,
            HopPolicy::RequantizeEachHop,
            &model,
            &ChainConfig::default(),
        )
        .unwrap();
        assert_eq!(out.reports.len(), 3);
        for (i, r) in out.reports.iter().enumerate() {
            assert_eq!(r.hop, i + 1);
            assert_eq!(r.output_relative_error, 0.0);
            assert_eq!(r.average_bits, 16.0);
        }
    }

    #[test]
    fn pass_through_cards_and_errors_are_hop_invariant() {
        let model = toy(2, 2, 8);
        let cache = cache_for(&model, 15, 20);
        let out = run_chain(
            &linear_graph(5),
            &cache,
            Method::UniformQ4,
            HopPolicy::PassThrough,
            &model,
            &ChainConfig::default(),
        )
        .unwrap();
        assert_eq!(out.encoded_cards.len(), 4);
        for bytes in &out.encoded_cards[1..] {
            assert_eq!(bytes, &out.encoded_cards[0]);
        }
        let first = out.reports[0].output_relative_error;
        assert!(first > 0.0);
        for r in &out.reports[1..] {
            assert_eq!(r.output_relative_error.to_bits(), first.to_bits());
        }
    }

    #[test]
    fn requantize_chain_reports_positive_errors() {
        let model = toy(2, 2, 8);
        let cache = cache_for(&model, 17, 24);
        let out = run_chain(
            &linear_graph(3),
            &cache,
            Method::UniformQ4,
            HopPolicy::RequantizeEachHop,
            &model,
            &ChainConfig::default(),
        )
        .unwrap();
        assert_eq!(out.reports.len(), 2);
        for r in &out.reports {
            assert!(r.output_relative_error > 0.0);
            assert_eq!(r.average_bits, 4.0);
            assert!(r.card_bytes > 0);
        }
    }

    #[test]
    fn adaptive_methods_respect_budget() {
        let model = toy(2, 2, 8);
        let cache = cache_for(&model, 19, 32);
        for method in [Method::AdaptiveLocal, Method::AdaptiveTopology] {
            let out = run_chain(
                &linear_graph(3),
                &cache,
                method,
                HopPolicy::RequantizeEachHop,
                &model,
                &ChainConfig {
                    budget_bits_per_token: 4.0,
                    ..Default::default()
                },
            )
            .unwrap();
            for r in &out.reports {
                assert!(
                    r.average_bits <= 4.0 + 1e-12,
                    "{method:?} hop {} used {} bits",
                    r.hop,
                    r.average_bits
                );
            }
        }
    }

    #[test]
    fn appended_tokens_grow_later_cards() {
        let model = toy(1, 2, 8);
        let cache = cache_for(&model, 21, 16);
        let out = run_chain(
            &linear_graph(3),
            &cache,
            Method::UniformQ8,
            HopPolicy::RequantizeEachHop,
            &model,
            &ChainConfig {
                append_tokens_per_hop: 2,
                ..Default::default()
            },
        )
        .unwrap();
        let first = decode_card(&out.encoded_cards[0]).unwrap();
        let second = decode_card(&out.encoded_cards[1]).unwrap();
        assert_eq!(first.tokens(), 16);
        assert_eq!(second.tokens(), 18);
    }

    #[test]
    fn non_chain_graph_is_rejected_by_run() {
        let model = toy(1, 1, 4);
        let cache = cache_for(&model, 23, 4);
        let tree = parse_topology(
            "agent root toy-v1\nagent l toy-v1\nagent r toy-v1\nedge root l\nedge root r\n",
        )
        .unwrap();
        assert!(matches!(
            run_chain(
                &tree,
                &cache,
                Method::Fp16Share,
                HopPolicy::PassThrough,
                &model,
                &ChainConfig::default(),
            ),
            Err(HandoffError::UnsupportedTopology(_))
        ));
    }

    #[test]
    fn density_examples() {
        let gib = 1u64 << 30;
        assert_eq!(
            density_calculator(12 * gib, 0, 32, 8, 8192, 128, 2.0).unwrap(),
            12
        );
        assert_eq!(
            density_calculator(12 * gib, 0, 32, 8, 8192, 128, 0.5).unwrap(),
            48
        );
        assert_eq!(
            density_calculator(5 * gib, 5 * gib, 32, 8, 8192, 128, 2.0).unwrap(),
            0
        );
        assert!(matches!(
            density_calculator(gib, gib + 1, 32, 8, 8192, 128, 2.0),
            Err(HandoffError::InvalidParameter(_))
        ));
    }

    #[test]
    fn density_ratio_between_fp16_and_q4_accounting_is_four() {
        for device in [1u64 << 30, 7 * (1 << 28), 13_000_000_000] {
            let fp16 = density_calculator(device, 0, 4, 4, 512, 64, 2.0).unwrap();
            let q4 = density_calculator(device, 0, 4, 4, 512, 64, 0.5).unwrap();
            // Ratio is exactly 4 whenever the fp16 count divides evenly;
            // in general q4 ≥ 4·fp16 because the floor is taken last.
            assert!(q4 >= 4 * fp16, "{q4} < 4·{fp16}");
            assert!(q4 <= 4 * fp16 + 3);
        }
    }

    #[test]
    fn method_and_policy_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.as_str()), Some(m));
        }
        for p in [HopPolicy::RequantizeEachHop, HopPolicy::PassThrough] {
            assert_eq!(HopPolicy::parse(p.as_str()), Some(p));
        }
        assert_eq!(Method::parse("uniform_q3"), None);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        /// Toy outputs are finite and shaped [queries][d] for any
        /// synthetic cache.
        #[test]
        fn forward_outputs_finite(seed in 0u64..1_000, tokens in 1usize..20, nq in 1usize..4) {
            let model = toy(1, 2, 8);
            let cache = cache_for(&model, seed, tokens);
            let queries = seeded_queries(seed ^ 0xABCD, 0, nq, 8);
            let out = toy_forward(&model, &cache, &queries).unwrap();
            prop_assert_eq!(out.len(), nq);
            for row in &out {
                prop_assert_eq!(row.len(), 8);
                prop_assert!(row.iter().all(|v| v.is_finite()));
            }
        }

        /// More bits never hurt much: at matched method family, the
        /// 8-bit uniform error is at most the 4-bit error on the same
        /// cache and queries (checked at hop 1).
        #[test]
        fn eight_bit_no_worse_than_four_bit(seed in 0u64..300) {
            let model = toy(2, 2, 8);
            let cache = cache_for(&model, seed, 16);
            let graph = linear_graph(2);
            let cfg = ChainConfig::default();
            let e4 = run_chain(&graph, &cache, Method::UniformQ4, HopPolicy::RequantizeEachHop, &model, &cfg)
                .unwrap().reports[0].output_relative_error;
            let e8 = run_chain(&graph, &cache, Method::UniformQ8, HopPolicy::RequantizeEachHop, &model, &cfg)
                .unwrap().reports[0].output_relative_error;
            prop_assert!(e8 <= e4 + 1e-12, "e8 {} > e4 {}", e8, e4);
        }
    }
}
