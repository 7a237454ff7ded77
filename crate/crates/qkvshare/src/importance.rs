//! Per-token importance scoring: the 6-dimensional feature vector, local
//! importance `I(t)`, downstream demand `T(t)`, and the combined score
//! `S(t) = α·I(t) + (1 − α)·T(t)`.
//!
//! Local importance summarizes how much the *current* agent's output leans
//! on a token: each of the four attention statistics (received mass,
//! quality, variance, outgoing entropy) is min–max normalized over the
//! cache's tokens — a constant statistic maps to 0.5 — and `I(t)` is their
//! unweighted mean. Downstream demand estimates how much *future* agents
//! will lean on it, combining a per-segment prior with the attention weight
//! of the most similar previously-shared token from the [`AnchorPool`].
//! The α knob then trades local accuracy against shareability.

use crate::tensorio::{AttentionStats, KVCache};

/// Errors from importance computation and segment parsing.
#[derive(Debug, thiserror::Error)]
pub enum ImportanceError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid segment map: {0}")]
    InvalidSegments(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
}

/// Context-segment kinds, in normative code order 0..=4.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SegmentKind {
    System,
    SharedDoc,
    Conversation,
    SharedState,
    AgentPrivate,
}

impl SegmentKind {
    pub const ALL: [SegmentKind; 5] = [
        SegmentKind::System,
        SegmentKind::SharedDoc,
        SegmentKind::Conversation,
        SegmentKind::SharedState,
        SegmentKind::AgentPrivate,
    ];

    /// Stable numeric code (0..=4) used in features and sidecar files.
    pub fn code(self) -> u8 {
        match self {
            SegmentKind::System => 0,
            SegmentKind::SharedDoc => 1,
            SegmentKind::Conversation => 2,
            SegmentKind::SharedState => 3,
            SegmentKind::AgentPrivate => 4,
        }
    }

    /// Baseline downstream-demand prior: shared kinds rank higher because
    /// they are by construction relevant to downstream agents.
    pub fn prior(self) -> f64 {
        match self {
            SegmentKind::System => 0.75,
            SegmentKind::SharedDoc => 0.5,
            SegmentKind::Conversation => 0.25,
            SegmentKind::SharedState => 0.75,
            SegmentKind::AgentPrivate => 0.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SegmentKind::System => "system",
            SegmentKind::SharedDoc => "shared_doc",
            SegmentKind::Conversation => "conversation",
            SegmentKind::SharedState => "shared_state",
            SegmentKind::AgentPrivate => "agent_private",
        }
    }

    pub fn parse(s: &str) -> Option<SegmentKind> {
        SegmentKind::ALL.iter().copied().find(|k| k.as_str() == s)
    }
}

/// One contiguous token span `[start, end)` of a single segment kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentSpan {
    pub start: usize,
    pub end: usize,
    pub kind: SegmentKind,
}

/// A total, non-overlapping segmentation of the token range `[0, n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentMap {
    spans: Vec<SegmentSpan>,
    tokens: usize,
}

impl SegmentMap {
    /// Build from spans, validating order, disjointness, and full cover.
    pub fn new(spans: Vec<SegmentSpan>, tokens: usize) -> Result<Self, ImportanceError> {
        if tokens == 0 {
            return Err(ImportanceError::InvalidSegments(
                "segment map needs at least one token".into(),
            ));
        }
        let mut cursor = 0usize;
        for (i, span) in spans.iter().enumerate() {
            if span.start != cursor {
                return Err(ImportanceError::InvalidSegments(format!(
                    "span {i} starts at {} but the previous span ended at {cursor} \
                     (spans must be sorted, disjoint, and gap-free)",
                    span.start
                )));
            }
            if span.end <= span.start {
                return Err(ImportanceError::InvalidSegments(format!(
                    "span {i} is empty or inverted ({}..{})",
                    span.start, span.end
                )));
            }
            cursor = span.end;
        }
        if cursor != tokens {
            return Err(ImportanceError::InvalidSegments(format!(
                "spans cover [0, {cursor}) but the map must cover [0, {tokens})"
            )));
        }
        Ok(Self { spans, tokens })
    }

    /// Single-kind map covering all tokens.
    pub fn single(tokens: usize, kind: SegmentKind) -> Result<Self, ImportanceError> {
        Self::new(
            vec![SegmentSpan {
                start: 0,
                end: tokens,
                kind,
            }],
            tokens,
        )
    }

    /// Default synthetic segmentation: an eighth of the tokens (at least
    /// one) of system prompt, then shared document up to the midpoint,
    /// then conversation — a plausible shared-context layout for the
    /// simulator when no sidecar is supplied.
    pub fn synthetic(tokens: usize) -> Result<Self, ImportanceError> {
        let sys_end = (tokens / 8).max(1).min(tokens);
        let doc_end = (tokens / 2).max(sys_end).min(tokens);
        let mut spans = vec![SegmentSpan {
            start: 0,
            end: sys_end,
            kind: SegmentKind::System,
        }];
        if doc_end > sys_end {
            spans.push(SegmentSpan {
                start: sys_end,
                end: doc_end,
                kind: SegmentKind::SharedDoc,
            });
        }
        if tokens > doc_end {
            spans.push(SegmentSpan {
                start: doc_end,
                end: tokens,
                kind: SegmentKind::Conversation,
            });
        }
        Self::new(spans, tokens)
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn spans(&self) -> &[SegmentSpan] {
        &self.spans
    }

    /// Kind of the segment containing token `t`.
    pub fn kind_at(&self, token: usize) -> SegmentKind {
        debug_assert!(token < self.tokens);
        // Spans are sorted and gap-free; binary search by start.
        let idx = self
            .spans
            .partition_point(|s| s.end <= token)
            .min(self.spans.len() - 1);
        self.spans[idx].kind
    }

    /// Parse the plain-text sidecar: one `start end kind` line per span.
    /// Blank lines and `#` comments are permitted.
    pub fn parse_sidecar(text: &str, tokens: usize) -> Result<Self, ImportanceError> {
        let mut spans = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(ImportanceError::InvalidSegments(format!(
                    "line {}: expected 'start end kind', got {line:?}",
                    lineno + 1
                )));
            }
            let parse_num = |s: &str| {
                s.parse::<usize>().map_err(|_| {
                    ImportanceError::InvalidSegments(format!(
                        "line {}: {s:?} is not a token index",
                        lineno + 1
                    ))
                })
            };
            let kind = SegmentKind::parse(fields[2]).ok_or_else(|| {
                ImportanceError::InvalidSegments(format!(
                    "line {}: unknown segment kind {:?}",
                    lineno + 1,
                    fields[2]
                ))
            })?;
            spans.push(SegmentSpan {
                start: parse_num(fields[0])?,
                end: parse_num(fields[1])?,
                kind,
            });
        }
        Self::new(spans, tokens)
    }

    /// Render the sidecar text form.
    pub fn to_sidecar(&self) -> String {
        let mut out = String::new();
        for span in &self.spans {
            out.push_str(&format!("{} {} {}\n", span.start, span.end, span.kind.as_str()));
        }
        out
    }
}

/// One previously-shared token: its embedding and the attention weight it
/// received downstream.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub embedding: Vec<f32>,
    pub downstream_weight: f64,
}

/// Bounded pool of anchors; updates are functional (a new pool is
/// returned) and evict the lowest-weight anchors first.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorPool {
    anchors: Vec<Anchor>,
    capacity: usize,
}

impl AnchorPool {
    pub fn new(capacity: usize) -> Self {
        Self {
            anchors: Vec::new(),
            capacity,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn anchors(&self) -> &[Anchor] {
        &self.anchors
    }
}

/// Append new anchors to a pool, evicting lowest-weight anchors when over
/// capacity (ties evict the earliest-inserted). Duplicate embeddings are
/// retained — no deduplication.
pub fn update_anchor_pool(
    pool: &AnchorPool,
    shared_keys: &[Vec<f32>],
    observed_weights: &[f64],
) -> Result<AnchorPool, ImportanceError> {
    if shared_keys.len() != observed_weights.len() {
        return Err(ImportanceError::DimensionMismatch(format!(
            "{} embeddings with {} weights",
            shared_keys.len(),
            observed_weights.len()
        )));
    }
    for (i, &w) in observed_weights.iter().enumerate() {
        if !w.is_finite() || !(0.0..=1.0).contains(&w) {
            return Err(ImportanceError::InvalidParameter(format!(
                "observed weight [{i}] = {w} outside [0, 1]"
            )));
        }
    }
    let mut anchors = pool.anchors.clone();
    anchors.extend(
        shared_keys
            .iter()
            .zip(observed_weights)
            .map(|(k, &w)| Anchor {
                embedding: k.clone(),
                downstream_weight: w,
            }),
    );
    while anchors.len() > pool.capacity {
        // Evict the minimum weight; among ties, the earliest inserted.
        let evict = anchors
            .iter()
            .enumerate()
            .min_by(|(ia, a), (ib, b)| {
                a.downstream_weight
                    .partial_cmp(&b.downstream_weight)
                    .expect("weights are finite")
                    .then(ia.cmp(ib))
            })
            .map(|(i, _)| i)
            .expect("pool is non-empty while over capacity");
        anchors.remove(evict);
    }
    Ok(AnchorPool {
        anchors,
        capacity: pool.capacity,
    })
}

/// The 6-dimensional per-token feature rows, in normative column order:
/// frequency, quality, attention_variance, entropy, downstream_demand,
/// segment_type_code.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenFeatures {
    pub rows: Vec<[f64; 6]>,
}

impl TokenFeatures {
    pub fn tokens(&self) -> usize {
        self.rows.len()
    }
}

/// Per-token importance scores with the α used to combine them.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceScores {
    /// Local importance I(t), in [0, 1].
    pub local: Vec<f64>,
    /// Downstream demand / transferability T(t), in [0, 1].
    pub transfer: Vec<f64>,
    /// Combined score S(t) = α·I(t) + (1 − α)·T(t).
    pub combined: Vec<f64>,
    pub alpha: f64,
}

/// Min–max normalize to [0, 1]; a constant vector maps to all 0.5.
fn minmax_normalize(x: &[f64]) -> Vec<f64> {
    let min = x.iter().copied().fold(f64::INFINITY, f64::min);
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max > min {
        let span = max - min;
        x.iter().map(|&v| (v - min) / span).collect()
    } else {
        vec![0.5; x.len()]
    }
}

/// Local importance `I(t)`: the unweighted mean of the four min–max
/// normalized attention statistics. Always in [0, 1].
pub fn local_importance(stats: &AttentionStats) -> Vec<f64> {
    let freq = minmax_normalize(&stats.received_weight);
    let qual = minmax_normalize(&stats.quality);
    let var = minmax_normalize(&stats.weight_variance);
    let ent = minmax_normalize(&stats.query_entropy);
    (0..stats.tokens())
        .map(|t| (freq[t] + qual[t] + var[t] + ent[t]) / 4.0)
        .collect()
}

fn cosine_similarity(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na += (x as f64).powi(2);
        nb += (y as f64).powi(2);
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Downstream demand `D(t) = clamp(prior(kind(t)) + nearest_anchor_weight, 0, 1)`.
///
/// The anchor term is the downstream weight of the pool anchor most
/// cosine-similar to the token's key embedding (ties resolved toward the
/// lowest anchor index); an empty pool contributes zero.
pub fn downstream_demand(
    keys_at_anchor_layer: &[Vec<f32>],
    pool: &AnchorPool,
    segments: &SegmentMap,
) -> Result<Vec<f64>, ImportanceError> {
    let n = keys_at_anchor_layer.len();
    if n == 0 {
        return Err(ImportanceError::EmptyInput("token embeddings"));
    }
    if segments.tokens() != n {
        return Err(ImportanceError::DimensionMismatch(format!(
            "segment map covers {} tokens, embeddings cover {n}",
            segments.tokens()
        )));
    }
    for (t, k) in keys_at_anchor_layer.iter().enumerate() {
        if k.is_empty() {
            return Err(ImportanceError::EmptyInput("token embedding"));
        }
        if let Some(a) = pool.anchors.first() {
            if a.embedding.len() != k.len() {
                return Err(ImportanceError::DimensionMismatch(format!(
                    "anchor embeddings have dim {}, token {t} has dim {}",
                    a.embedding.len(),
                    k.len()
                )));
            }
        }
    }
    Ok(keys_at_anchor_layer
        .iter()
        .enumerate()
        .map(|(t, key)| {
            let prior = segments.kind_at(t).prior();
            let anchor_term = pool
                .anchors
                .iter()
                .map(|a| (cosine_similarity(key, &a.embedding), a.downstream_weight))
                // Strict > keeps the lowest-index anchor among exact ties.
                .fold(None::<(f64, f64)>, |best, cand| match best {
                    Some((bs, _)) if cand.0 <= bs => best,
                    _ => Some(cand),
                })
                .map(|(_, w)| w)
                .unwrap_or(0.0);
            (prior + anchor_term).clamp(0.0, 1.0)
        })
        .collect())
}

/// Anchor-layer embeddings for a cache: layer-0 keys, averaged over heads.
/// Returns one length-d vector per token.
pub fn anchor_embeddings(cache: &KVCache) -> Vec<Vec<f32>> {
    let heads = cache.heads();
    let d = cache.head_dim();
    (0..cache.tokens())
        .map(|t| {
            let mut acc = vec![0.0f64; d];
            for h in 0..heads {
                for (a, &k) in acc.iter_mut().zip(cache.key_row(0, h, t)) {
                    *a += k as f64;
                }
            }
            acc.iter().map(|&v| (v / heads as f64) as f32).collect()
        })
        .collect()
}

/// Combine local and transfer scores: `S = α·I + (1 − α)·T`, exact.
pub fn combine_scores(
    local: &[f64],
    transfer: &[f64],
    alpha: f64,
) -> Result<ImportanceScores, ImportanceError> {
    if !(0.0..=1.0).contains(&alpha) || !alpha.is_finite() {
        return Err(ImportanceError::InvalidParameter(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    if local.len() != transfer.len() {
        return Err(ImportanceError::DimensionMismatch(format!(
            "local has {} entries, transfer has {}",
            local.len(),
            transfer.len()
        )));
    }
    let combined = local
        .iter()
        .zip(transfer)
        .map(|(&i, &t)| alpha * i + (1.0 - alpha) * t)
        .collect();
    Ok(ImportanceScores {
        local: local.to_vec(),
        transfer: transfer.to_vec(),
        combined,
        alpha,
    })
}

/// Assemble the 6-dimensional feature rows.
///
/// Columns: min–max normalized received mass (frequency), raw quality,
/// raw attention variance, raw outgoing entropy, downstream demand, and
/// `segment code / 4`.
pub fn compute_features(
    stats: &AttentionStats,
    segments: &SegmentMap,
    demand: &[f64],
) -> Result<TokenFeatures, ImportanceError> {
    let n = stats.tokens();
    if segments.tokens() != n || demand.len() != n {
        return Err(ImportanceError::DimensionMismatch(format!(
            "stats cover {n} tokens, segments {} and demand {}",
            segments.tokens(),
            demand.len()
        )));
    }
    for (t, &d) in demand.iter().enumerate() {
        if !d.is_finite() || !(0.0..=1.0).contains(&d) {
            return Err(ImportanceError::InvalidParameter(format!(
                "demand[{t}] = {d} outside [0, 1]"
            )));
        }
    }
    let freq = minmax_normalize(&stats.received_weight);
    let rows = (0..n)
        .map(|t| {
            [
                freq[t],
                stats.quality[t],
                stats.weight_variance[t],
                stats.query_entropy[t],
                demand[t],
                segments.kind_at(t).code() as f64 / 4.0,
            ]
        })
        .collect();
    Ok(TokenFeatures { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorio::{generate_attention_stats, generate_synthetic_cache, SyntheticConfig};
    use proptest::prelude::*;

    fn stats_from(received: Vec<f64>, quality: Vec<f64>) -> AttentionStats {
        let n = received.len();
        AttentionStats::new(received, vec![0.1; n], vec![0.2; n], quality).unwrap()
    }

    #[test]
    fn segment_map_accepts_exact_cover_only() {
        let ok = SegmentMap::new(
            vec![
                SegmentSpan { start: 0, end: 2, kind: SegmentKind::System },
                SegmentSpan { start: 2, end: 5, kind: SegmentKind::SharedDoc },
            ],
            5,
        );
        assert!(ok.is_ok());
        let gap = SegmentMap::new(
            vec![
                SegmentSpan { start: 0, end: 2, kind: SegmentKind::System },
                SegmentSpan { start: 3, end: 5, kind: SegmentKind::SharedDoc },
            ],
            5,
        );
        assert!(matches!(gap, Err(ImportanceError::InvalidSegments(_))));
        let short = SegmentMap::new(
            vec![SegmentSpan { start: 0, end: 4, kind: SegmentKind::System }],
            5,
        );
        assert!(matches!(short, Err(ImportanceError::InvalidSegments(_))));
    }

    #[test]
    fn segment_sidecar_round_trip() {
        let map = SegmentMap::new(
            vec![
                SegmentSpan { start: 0, end: 3, kind: SegmentKind::System },
                SegmentSpan { start: 3, end: 8, kind: SegmentKind::SharedState },
                SegmentSpan { start: 8, end: 10, kind: SegmentKind::AgentPrivate },
            ],
            10,
        )
        .unwrap();
        let text = map.to_sidecar();
        let parsed = SegmentMap::parse_sidecar(&text, 10).unwrap();
        assert_eq!(map, parsed);
        assert_eq!(map.kind_at(0), SegmentKind::System);
        assert_eq!(map.kind_at(7), SegmentKind::SharedState);
        assert_eq!(map.kind_at(9), SegmentKind::AgentPrivate);
    }

    #[test]
    fn sidecar_rejects_unknown_kind() {
        assert!(matches!(
            SegmentMap::parse_sidecar("0 4 mystery\n", 4),
            Err(ImportanceError::InvalidSegments(_))
        ));
    }

    #[test]
    fn local_importance_endpoints() {
        // Token 0 maximal in every stat, token 1 minimal → I = [1, 0].
        let stats = AttentionStats::new(
            vec![0.9, 0.1],
            vec![0.3, 0.0],
            vec![1.0, 0.0],
            vec![1.0, 0.0],
        )
        .unwrap();
        assert_eq!(local_importance(&stats), vec![1.0, 0.0]);
    }

    #[test]
    fn local_importance_constant_stats_map_to_half() {
        let stats = stats_from(vec![0.25; 4], vec![0.5; 4]);
        assert_eq!(local_importance(&stats), vec![0.5; 4]);
    }

    #[test]
    fn local_importance_scale_invariant() {
        // Positive scaling of a raw stat is absorbed by normalization,
        // up to rounding in (x − min)/(max − min).
        let a = stats_from(vec![0.1, 0.2, 0.7], vec![0.0, 0.5, 1.0]);
        let b = stats_from(
            vec![0.02, 0.04, 0.14],
            vec![0.0, 0.5, 1.0],
        );
        for (x, y) in local_importance(&a).iter().zip(local_importance(&b)) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn heavy_hitter_has_larger_frequency_feature() {
        let cfg = SyntheticConfig {
            seed: 11,
            layers: 1,
            heads: 1,
            tokens: 16,
            head_dim: 4,
            value_scale: 1.0,
            heavy_hitter_fraction: 0.125,
        };
        let cache = generate_synthetic_cache(&cfg).unwrap();
        let stats = generate_attention_stats(&cfg, &cache).unwrap();
        let segments = SegmentMap::single(16, SegmentKind::Conversation).unwrap();
        let features = compute_features(&stats, &segments, &vec![0.0; 16]).unwrap();
        let mean = stats.received_weight.iter().sum::<f64>() / 16.0;
        let heavy: Vec<usize> = (0..16)
            .filter(|&t| stats.received_weight[t] >= 2.0 * mean)
            .collect();
        assert_eq!(heavy.len(), 2);
        for &h in &heavy {
            for t in 0..16 {
                if !heavy.contains(&t) {
                    assert!(features.rows[h][0] > features.rows[t][0]);
                }
            }
        }
    }

    #[test]
    fn feature_columns_follow_definitions() {
        let stats = stats_from(vec![0.5, 0.25, 0.25], vec![0.9, 0.2, 0.4]);
        let segments = SegmentMap::new(
            vec![
                SegmentSpan { start: 0, end: 3, kind: SegmentKind::SharedDoc },
            ],
            3,
        )
        .unwrap();
        let features = compute_features(&stats, &segments, &[0.1, 0.2, 0.3]).unwrap();
        assert_eq!(features.rows[2][4], 0.3);
        // shared_doc has code 1 → 0.25 normalized.
        assert_eq!(features.rows[0][5], 0.25);
        assert_eq!(features.rows[1][1], 0.2);
    }

    #[test]
    fn empty_pool_demand_is_the_segment_prior() {
        let keys = vec![vec![1.0f32, 0.0]; 4];
        let pool = AnchorPool::new(8);
        for (kind, want) in [
            (SegmentKind::AgentPrivate, 0.0),
            (SegmentKind::SharedDoc, 0.5),
            (SegmentKind::System, 0.75),
            (SegmentKind::SharedState, 0.75),
            (SegmentKind::Conversation, 0.25),
        ] {
            let segments = SegmentMap::single(4, kind).unwrap();
            let d = downstream_demand(&keys, &pool, &segments).unwrap();
            assert_eq!(d, vec![want; 4]);
        }
    }

    #[test]
    fn anchor_term_adds_nearest_weight() {
        // One anchor equal to the token's own key: cosine 1 selects it;
        // conversation prior 0.25 + weight 0.4 = 0.65.
        let keys = vec![vec![0.6f32, 0.8]];
        let pool = update_anchor_pool(&AnchorPool::new(4), &keys, &[0.4]).unwrap();
        let segments = SegmentMap::single(1, SegmentKind::Conversation).unwrap();
        let d = downstream_demand(&keys, &pool, &segments).unwrap();
        assert_eq!(d, vec![0.65]);
    }

    #[test]
    fn nearest_anchor_ties_resolve_to_lowest_index() {
        let keys = vec![vec![1.0f32, 0.0]];
        // Both anchors have cosine 1 with the key (same direction, any
        // positive length); the first one's weight must win.
        let pool = update_anchor_pool(
            &AnchorPool::new(4),
            &[vec![2.0, 0.0], vec![1.0, 0.0]],
            &[0.1, 0.9],
        )
        .unwrap();
        let segments = SegmentMap::single(1, SegmentKind::AgentPrivate).unwrap();
        let d = downstream_demand(&keys, &pool, &segments).unwrap();
        assert_eq!(d, vec![0.1]);
    }

    #[test]
    fn demand_clamps_to_one() {
        let keys = vec![vec![1.0f32, 0.0]];
        let pool = update_anchor_pool(&AnchorPool::new(4), &keys, &[0.9]).unwrap();
        let segments = SegmentMap::single(1, SegmentKind::System).unwrap();
        let d = downstream_demand(&keys, &pool, &segments).unwrap();
        assert_eq!(d, vec![1.0]);
    }

    #[test]
    fn pool_eviction_drops_lowest_weight() {
        let pool = update_anchor_pool(
            &AnchorPool::new(2),
            &[vec![1.0, 0.0], vec![0.0, 1.0]],
            &[0.3, 0.5],
        )
        .unwrap();
        let pool = update_anchor_pool(&pool, &[vec![1.0, 1.0]], &[0.4]).unwrap();
        assert_eq!(pool.len(), 2);
        let weights: Vec<f64> = pool.anchors().iter().map(|a| a.downstream_weight).collect();
        assert_eq!(weights, vec![0.5, 0.4]);
    }

    #[test]
    fn pool_keeps_duplicates_and_rejects_bad_weights() {
        let e = vec![1.0f32, 2.0];
        let pool =
            update_anchor_pool(&AnchorPool::new(4), &[e.clone(), e.clone()], &[0.2, 0.2]).unwrap();
        assert_eq!(pool.len(), 2);
        assert!(matches!(
            update_anchor_pool(&pool, &[e], &[1.5]),
            Err(ImportanceError::InvalidParameter(_))
        ));
    }

    #[test]
    fn combine_scores_examples() {
        let s = combine_scores(&[0.8], &[0.2], 0.5).unwrap();
        assert_eq!(s.combined, vec![0.5]);
        let s = combine_scores(&[0.8, 0.1], &[0.2, 0.9], 1.0).unwrap();
        assert_eq!(s.combined, s.local);
        let s = combine_scores(&[0.8, 0.1], &[0.2, 0.9], 0.0).unwrap();
        assert_eq!(s.combined, s.transfer);
        assert!(matches!(
            combine_scores(&[0.1], &[0.1], 1.5),
            Err(ImportanceError::InvalidParameter(_))
        ));
    }

    #[test]
    fn anchor_embeddings_average_heads() {
        let cache = generate_synthetic_cache(&SyntheticConfig {
            seed: 3,
            layers: 2,
            heads: 2,
            tokens: 4,
            head_dim: 3,
            value_scale: 1.0,
            heavy_hitter_fraction: 0.0,
        })
        .unwrap();
        let emb = anchor_embeddings(&cache);
        assert_eq!(emb.len(), 4);
        assert_eq!(emb[0].len(), 3);
        for j in 0..3 {
            let manual = ((cache.key_row(0, 0, 1)[j] as f64)
                + (cache.key_row(0, 1, 1)[j] as f64))
                / 2.0;
            assert_eq!(emb[1][j], manual as f32);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        /// The affine combination identity holds exactly, and monotone
        /// raw statistics produce monotone local importance.
        #[test]
        fn combined_is_exact_affine(
            n in 1usize..20,
            alpha in 0.0f64..=1.0,
            seed in 0u64..1_000,
        ) {
            let mut rng = crate::rng::SplitMix64::new(seed);
            let local: Vec<f64> = (0..n).map(|_| rng.next_f64()).collect();
            let transfer: Vec<f64> = (0..n).map(|_| rng.next_f64()).collect();
            let s = combine_scores(&local, &transfer, alpha).unwrap();
            for t in 0..n {
                prop_assert_eq!(s.combined[t], alpha * local[t] + (1.0 - alpha) * transfer[t]);
            }
        }

        /// Raising one token's raw stat (bounds fixed) never lowers I(t).
        #[test]
        fn local_importance_monotone_in_each_stat(
            seed in 0u64..500,
            bump in 0.01f64..0.2,
        ) {
            let mut rng = crate::rng::SplitMix64::new(seed);
            let n = 6usize;
            // Keep the normalization bounds pinned by fixed endpoint
            // tokens 0 (all zeros) and 1 (all ones); bump token 2.
            let mut col = |lo: f64, hi: f64| -> Vec<f64> {
                let mut v: Vec<f64> = (0..n).map(|_| rng.next_range(lo, hi)).collect();
                v[0] = lo;
                v[1] = hi;
                v
            };
            let received = col(0.0, 0.3 / n as f64);
            let variance = col(0.0, 0.2);
            let entropy = col(0.0, 1.0);
            let quality = col(0.0, 1.0);
            let base = AttentionStats::new(
                received.clone(), variance.clone(), entropy.clone(), quality.clone(),
            ).unwrap();
            let before = local_importance(&base)[2];
            let mut bumped = quality.clone();
            bumped[2] = (bumped[2] + bump).min(1.0);
            let after = local_importance(
                &AttentionStats::new(received, variance, entropy, bumped).unwrap(),
            )[2];
            prop_assert!(after >= before);
        }

        /// D(t) stays in [0, 1] for arbitrary pools and segments.
        #[test]
        fn demand_always_in_unit_interval(
            seed in 0u64..500,
            n in 1usize..12,
            anchors in 0usize..6,
        ) {
            let mut rng = crate::rng::SplitMix64::new(seed);
            let keys: Vec<Vec<f32>> = (0..n)
                .map(|_| (0..4).map(|_| rng.next_range(-1.0, 1.0) as f32).collect())
                .collect();
            let pool_keys: Vec<Vec<f32>> = (0..anchors)
                .map(|_| (0..4).map(|_| rng.next_range(-1.0, 1.0) as f32).collect())
                .collect();
            let weights: Vec<f64> = (0..anchors).map(|_| rng.next_f64()).collect();
            let pool = update_anchor_pool(&AnchorPool::new(8), &pool_keys, &weights).unwrap();
            let segments = SegmentMap::synthetic(n).unwrap();
            let d = downstream_demand(&keys, &pool, &segments).unwrap();
            for v in d {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
