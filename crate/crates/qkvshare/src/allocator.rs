//! Budgeted per-token bit-width assignment.
//!
//! Given per-token scores `S(t)` and a per-token/per-width error table
//! `ε(t, b)`, the allocator minimizes `Σ_t ε(t, b(t))·S(t)` subject to
//! `Σ_t b(t) ≤ budget_bits` with `b(t) ∈ {2, 4, 8, 16}`. The budget is
//! expressed in total bits per token-row — the per-element dim factor is
//! divided out of both sides — and the CLI surfaces it as average bits per
//! token times the token count.
//!
//! Three solvers are provided:
//!
//! - [`allocate_exact`] — a dynamic program over (token, remaining budget)
//!   at 2-bit granularity. Globally optimal; deterministic tie-break
//!   prefers the lower token index at higher bits. Capped at
//!   [`EXACT_TOKEN_CAP`] tokens (its tables grow with n·budget).
//! - [`allocate_greedy`] — starts all-2-bit and repeatedly applies the
//!   (token, next-width) upgrade with the highest `S·Δε/Δbits` that still
//!   fits. Terminates in at most 3n upgrades because the error table is
//!   non-increasing along the bit axis.
//! - [`controller`] — a small trained MLP that predicts widths from token
//!   features, for use beyond the exact solver's token cap.
//!
//! [`label_calibration`] produces the controller's training labels by
//! probing each token against the deterministic toy model: the smallest
//! width whose solo-quantization output error stays below a threshold.

pub mod controller;

use crate::handoff::{relative_l2, seeded_queries, toy_forward, ToyModel};
use crate::quantizer::{
    self, analytic_error, dequantize_cache, quantize_cache, BitWidth, QuantError, GROUP_SIZE,
};
use crate::tensorio::KVCache;

/// Largest instance the exact dynamic program accepts.
pub const EXACT_TOKEN_CAP: usize = 64;

/// Width costs in 2-bit budget units, indexed by [`BitWidth::index`].
const UNIT_COSTS: [usize; 4] = [1, 2, 4, 8];

/// Errors from allocation, training, labeling, and weight I/O.
#[derive(Debug, thiserror::Error)]
pub enum AllocError {
    #[error("budget of {budget_bits} bits is infeasible: {tokens} tokens need at least {} bits", 2 * tokens)]
    InfeasibleBudget { budget_bits: f64, tokens: usize },
    #[error("{tokens} tokens exceed the exact solver's cap of {cap}")]
    TokenCapExceeded { tokens: usize, cap: usize },
    #[error("invalid scores: {0}")]
    InvalidScores(String),
    #[error("invalid error table: {0}")]
    InvalidTable(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("controller weights are not finite")]
    NonFiniteModel,
    #[error("toy-model evaluation failed: {0}")]
    Evaluator(String),
    #[error("bad weights magic {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },
    #[error("unsupported weights version {0}")]
    UnsupportedVersion(u16),
    #[error("weights CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("truncated weights: needed {needed} more bytes for {section}")]
    Truncated { section: &'static str, needed: u64 },
    #[error("malformed weights: {0}")]
    Malformed(String),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How per-token quantization errors are estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorTableMode {
    /// Closed form `Δ²/12` from each token's value range.
    Analytic,
    /// Actually quantize each token's value rows at each width and record
    /// the mean squared error.
    Measured,
}

impl ErrorTableMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorTableMode::Analytic => "analytic",
            ErrorTableMode::Measured => "measured",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "analytic" => Some(ErrorTableMode::Analytic),
            "measured" => Some(ErrorTableMode::Measured),
            _ => None,
        }
    }
}

/// Per-token, per-width expected quantization error `ε(t, b)`.
///
/// Rows follow [`BitWidth::ALL`] column order. Entries are non-negative,
/// zero in the 16-bit column, and non-increasing along the bit axis.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorTable {
    pub eps: Vec<[f64; 4]>,
    pub mode: ErrorTableMode,
}

impl ErrorTable {
    pub fn tokens(&self) -> usize {
        self.eps.len()
    }

    /// Check the structural invariants.
    pub fn validate(&self) -> Result<(), AllocError> {
        for (t, row) in self.eps.iter().enumerate() {
            for (w, &e) in row.iter().enumerate() {
                if !e.is_finite() || e < 0.0 {
                    return Err(AllocError::InvalidTable(format!(
                        "eps[{t}][{w}] = {e} is not a non-negative finite real"
                    )));
                }
                if w > 0 && e > row[w - 1] {
                    return Err(AllocError::InvalidTable(format!(
                        "eps[{t}] increases from column {} to {w}",
                        w - 1
                    )));
                }
            }
            if row[3] != 0.0 {
                return Err(AllocError::InvalidTable(format!(
                    "eps[{t}] is {} in the 16-bit column, expected 0",
                    row[3]
                )));
            }
        }
        Ok(())
    }
}

/// Build the error table for a cache.
///
/// Both modes work on value rows (the per-token quantized tensor). The
/// measured mode replicates the cache quantizer's grouping (32-wide dim
/// chunks per layer/head). Rows are clamped to be non-increasing along the
/// bit axis with a running minimum: mathematically the quantization grids
/// nest (3 | 15 | 255 levels), so more bits never measure worse, but data
/// lying exactly on a coarse grid can wobble by an ulp of reconstruction
/// rounding; the clamp absorbs that without touching generic data.
pub fn build_error_table(cache: &KVCache, mode: ErrorTableMode) -> Result<ErrorTable, AllocError> {
    let n = cache.tokens();
    let mut eps = vec![[0.0f64; 4]; n];
    match mode {
        ErrorTableMode::Analytic => {
            for (t, row) in eps.iter_mut().enumerate() {
                let mut min = f64::INFINITY;
                let mut max = f64::NEG_INFINITY;
                for layer in 0..cache.layers() {
                    for head in 0..cache.heads() {
                        for &v in cache.value_row(layer, head, t) {
                            min = min.min(v as f64);
                            max = max.max(v as f64);
                        }
                    }
                }
                let range = max - min;
                for (w, &bits) in BitWidth::ALL.iter().enumerate() {
                    row[w] = analytic_error(bits, range);
                }
            }
        }
        ErrorTableMode::Measured => {
            for (t, row) in eps.iter_mut().enumerate() {
                for (w, &bits) in BitWidth::ALL.iter().enumerate() {
                    if bits == BitWidth::B16 {
                        row[w] = 0.0;
                        continue;
                    }
                    let mut sq = 0.0f64;
                    let mut count = 0usize;
                    for layer in 0..cache.layers() {
                        for head in 0..cache.heads() {
                            let value_row = cache.value_row(layer, head, t);
                            for chunk in value_row.chunks(GROUP_SIZE) {
                                let group = quantizer::quantize_group(chunk, bits)?;
                                let back = quantizer::dequantize_group(&group)?;
                                for (&a, &b) in chunk.iter().zip(&back) {
                                    sq += (a as f64 - b as f64).powi(2);
                                }
                                count += chunk.len();
                            }
                        }
                    }
                    row[w] = sq / count as f64;
                }
            }
        }
    }
    for row in &mut eps {
        for w in 1..4 {
            row[w] = row[w].min(row[w - 1]);
        }
    }
    let table = ErrorTable { eps, mode };
    table.validate()?;
    Ok(table)
}

/// A per-token bit-width assignment with its achieved budget and weighted
/// objective value.
#[derive(Debug, Clone, PartialEq)]
pub struct BitAssignment {
    pub bits: Vec<BitWidth>,
    /// Mean of the assigned widths.
    pub average_bits: f64,
    /// Σ ε(t, b(t))·S(t) under the table and scores used by the solver.
    pub objective_value: f64,
}

/// Total assigned bits of an assignment.
pub fn total_bits(bits: &[BitWidth]) -> u64 {
    bits.iter().map(|b| b.bits() as u64).sum()
}

/// Weighted objective Σ ε(t, b(t))·S(t) of an assignment.
pub fn assignment_objective(bits: &[BitWidth], scores: &[f64], table: &ErrorTable) -> f64 {
    bits.iter()
        .enumerate()
        .map(|(t, b)| table.eps[t][b.index()] * scores[t])
        .sum()
}

fn finish_assignment(bits: Vec<BitWidth>, scores: &[f64], table: &ErrorTable) -> BitAssignment {
    let average_bits = total_bits(&bits) as f64 / bits.len() as f64;
    let objective_value = assignment_objective(&bits, scores, table);
    BitAssignment {
        bits,
        average_bits,
        objective_value,
    }
}

/// Build a uniform assignment at one width, with its objective under the
/// given scores and table.
pub fn uniform_assignment(
    width: BitWidth,
    scores: &[f64],
    table: &ErrorTable,
) -> Result<BitAssignment, AllocError> {
    validate_instance(scores, table)?;
    Ok(finish_assignment(
        vec![width; scores.len()],
        scores,
        table,
    ))
}

/// Widest uniform width whose total fits `budget_bits`, if any.
pub fn feasible_uniform_width(tokens: usize, budget_bits: f64) -> Option<BitWidth> {
    BitWidth::ALL
        .iter()
        .rev()
        .copied()
        .find(|w| (w.bits() as u64 * tokens as u64) as f64 <= budget_bits)
}

fn validate_instance(scores: &[f64], table: &ErrorTable) -> Result<(), AllocError> {
    if scores.is_empty() {
        return Err(AllocError::InvalidScores("no tokens".into()));
    }
    if table.tokens() != scores.len() {
        return Err(AllocError::DimensionMismatch(format!(
            "{} scores with a {}-token error table",
            scores.len(),
            table.tokens()
        )));
    }
    for (t, &s) in scores.iter().enumerate() {
        if !s.is_finite() || s < 0.0 {
            return Err(AllocError::InvalidScores(format!(
                "score[{t}] = {s} is not a non-negative finite real"
            )));
        }
    }
    table.validate()
}

fn check_budget(tokens: usize, budget_bits: f64) -> Result<(), AllocError> {
    if !budget_bits.is_finite() || budget_bits < 2.0 * tokens as f64 {
        return Err(AllocError::InfeasibleBudget {
            budget_bits,
            tokens,
        });
    }
    Ok(())
}

/// Globally optimal assignment by dynamic programming.
///
/// The program runs over (token, remaining budget) at 2-bit granularity,
/// suffix-first, so ties in the objective always resolve toward the higher
/// width at the lower token index. Budget beyond 8 bits per token is
/// ignored (nothing wider than 16 bits exists to buy).
pub fn allocate_exact(
    scores: &[f64],
    table: &ErrorTable,
    budget_bits: f64,
) -> Result<BitAssignment, AllocError> {
    validate_instance(scores, table)?;
    let n = scores.len();
    if n > EXACT_TOKEN_CAP {
        return Err(AllocError::TokenCapExceeded {
            tokens: n,
            cap: EXACT_TOKEN_CAP,
        });
    }
    check_budget(n, budget_bits)?;
    let units = ((budget_bits / 2.0).floor() as usize).min(8 * n);

    // g[t][r]: minimum suffix objective from token t with r units left.
    let mut g = vec![vec![f64::INFINITY; units + 1]; n + 1];
    for cell in &mut g[n] {
        *cell = 0.0;
    }
    for t in (0..n).rev() {
        let tail_min = n - t - 1; // later tokens need ≥ 1 unit each
        for r in (n - t)..=units {
            let mut best = f64::INFINITY;
            for (w, &cost) in UNIT_COSTS.iter().enumerate() {
                if cost + tail_min > r {
                    continue;
                }
                let v = table.eps[t][w] * scores[t] + g[t + 1][r - cost];
                if v < best {
                    best = v;
                }
            }
            g[t][r] = best;
        }
    }

    // Walk forward, spending the budget on the widest width that attains
    // the optimum at each token.
    let mut bits = Vec::with_capacity(n);
    let mut r = units;
    for t in 0..n {
        let tail_min = n - t - 1;
        let target = g[t][r];
        let mut chosen = None;
        for (w, &cost) in UNIT_COSTS.iter().enumerate().rev() {
            if cost + tail_min > r {
                continue;
            }
            if table.eps[t][w] * scores[t] + g[t + 1][r - cost] == target {
                chosen = Some((w, cost));
                break;
            }
        }
        let (w, cost) = chosen.expect("DP recurrence covers every reachable state");
        bits.push(BitWidth::from_index(w).expect("index in range"));
        r -= cost;
    }
    Ok(finish_assignment(bits, scores, table))
}

/// Greedy assignment by marginal benefit per bit.
///
/// Starts all-2-bit and repeatedly applies the upgrade (token, any
/// higher width) with the maximum `S(t)·Δε/Δbits` that fits the
/// remaining budget, stopping when none fits. Multi-step jumps average
/// their steps, so a steep improvement hiding behind a flat step is
/// still reachable. Ties prefer the lowest token index, then the
/// smallest jump. Each applied move raises a token by at least one
/// width, so the loop runs at most 3n times. Feasible by construction.
pub fn allocate_greedy(
    scores: &[f64],
    table: &ErrorTable,
    budget_bits: f64,
) -> Result<BitAssignment, AllocError> {
    validate_instance(scores, table)?;
    let n = scores.len();
    check_budget(n, budget_bits)?;
    let budget_units = ((budget_bits / 2.0).floor() as usize).min(8 * n);

    let mut width_index = vec![0usize; n];
    let mut used_units = n;
    loop {
        // Candidate moves raise one token to any higher width; the rate
        // of a multi-step jump averages its steps, which lets the climb
        // see past a flat step in a non-convex error row. Ties keep the
        // earliest candidate: lowest token index, then smallest jump.
        let mut best: Option<(f64, usize, usize)> = None;
        for (t, &w) in width_index.iter().enumerate() {
            for target in w + 1..=3 {
                let step_units = UNIT_COSTS[target] - UNIT_COSTS[w];
                if used_units + step_units > budget_units {
                    break;
                }
                let gain = scores[t] * (table.eps[t][w] - table.eps[t][target])
                    / (2.0 * step_units as f64);
                if best.is_none_or(|(g, _, _)| gain > g) {
                    best = Some((gain, t, target));
                }
            }
        }
        let Some((_, t, target)) = best else { break };
        used_units += UNIT_COSTS[target] - UNIT_COSTS[width_index[t]];
        width_index[t] = target;
    }
    let bits = width_index
        .into_iter()
        .map(|w| BitWidth::from_index(w).expect("index in range"))
        .collect();
    Ok(finish_assignment(bits, scores, table))
}

/// Configuration for calibration labeling.
#[derive(Debug, Clone)]
pub struct LabelConfig {
    /// Relative output-error threshold: a token is labeled with the
    /// smallest width keeping its solo-quantization error strictly below
    /// this. Must be positive (infinity means "always the narrowest").
    pub threshold: f64,
    /// Seed for the probe query set.
    pub query_seed: u64,
    /// Number of probe queries.
    pub queries: usize,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            threshold: 1e-2,
            query_seed: 97,
            queries: 4,
        }
    }
}

/// Produce per-token calibration labels against the toy model.
///
/// For each token, quantize only that token (all others lossless at 16
/// bits) at each width and measure the relative change of the toy model's
/// attention output; the label is the smallest width whose error falls
/// below `cfg.threshold`. The 16-bit width always qualifies (zero error).
pub fn label_calibration(
    cache: &KVCache,
    model: &ToyModel,
    cfg: &LabelConfig,
) -> Result<Vec<BitWidth>, AllocError> {
    if !(cfg.threshold > 0.0) {
        return Err(AllocError::InvalidParameter(format!(
            "label threshold must be positive, got {}",
            cfg.threshold
        )));
    }
    if cfg.queries == 0 {
        return Err(AllocError::InvalidParameter(
            "label calibration needs at least one probe query".into(),
        ));
    }
    let n = cache.tokens();
    let queries = seeded_queries(cfg.query_seed, 0, cfg.queries, cache.head_dim());
    let reference =
        toy_forward(model, cache, &queries).map_err(|e| AllocError::Evaluator(e.to_string()))?;

    let mut labels = Vec::with_capacity(n);
    let mut bits = vec![BitWidth::B16; n];
    for t in 0..n {
        let mut label = BitWidth::B16;
        for width in [BitWidth::B2, BitWidth::B4, BitWidth::B8] {
            bits[t] = width;
            let reconstructed = dequantize_cache(&quantize_cache(cache, &bits)?)?;
            let out = toy_forward(model, &reconstructed, &queries)
                .map_err(|e| AllocError::Evaluator(e.to_string()))?;
            if relative_l2(&out, &reference) < cfg.threshold {
                label = width;
                break;
            }
        }
        bits[t] = BitWidth::B16;
        labels.push(label);
    }
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::handoff::ToyModelConfig;
    use crate::importance::local_importance;
    use crate::rng::SplitMix64;
    use crate::tensorio::{generate_attention_stats, generate_synthetic_cache, SyntheticConfig};
    use proptest::prelude::*;

    /// Exhaustive-enumeration oracle for the exact solver: walks every
    /// feasible assignment recursively (no memoization), widest width
    /// first with strict improvement, which reproduces the documented
    /// tie-break. Exponential in n — tests keep n small.
    pub(super) fn enumerate_optimum(
        scores: &[f64],
        table: &ErrorTable,
        budget_bits: f64,
    ) -> BitAssignment {
        let n = scores.len();
        let units = ((budget_bits / 2.0).floor() as usize).min(8 * n);
        fn recurse(
            t: usize,
            units_left: usize,
            scores: &[f64],
            eps: &[[f64; 4]],
        ) -> Option<(f64, Vec<usize>)> {
            let n = scores.len();
            if t == n {
                return Some((0.0, Vec::new()));
            }
            let tail_min = n - t - 1;
            let mut best: Option<(f64, Vec<usize>)> = None;
            for (w, &cost) in UNIT_COSTS.iter().enumerate().rev() {
                if cost + tail_min > units_left {
                    continue;
                }
                if let Some((sub, assign)) = recurse(t + 1, units_left - cost, scores, eps) {
                    let v = eps[t][w] * scores[t] + sub;
                    if best.as_ref().is_none_or(|(b, _)| v < *b) {
                        let mut full = Vec::with_capacity(n - t);
                        full.push(w);
                        full.extend(assign);
                        best = Some((v, full));
                    }
                }
            }
            best
        }
        let (_, widths) =
            recurse(0, units, scores, &table.eps).expect("budget ≥ 2n is always feasible");
        let bits: Vec<BitWidth> = widths
            .into_iter()
            .map(|w| BitWidth::from_index(w).unwrap())
            .collect();
        finish_assignment(bits, scores, table)
    }

    fn hand_table(n: usize, rows: &[[f64; 4]]) -> ErrorTable {
        assert_eq!(rows.len(), n);
        ErrorTable {
            eps: rows.to_vec(),
            mode: ErrorTableMode::Analytic,
        }
    }

    fn random_instance(seed: u64, n: usize) -> (Vec<f64>, ErrorTable) {
        let mut rng = SplitMix64::new(seed);
        let scores: Vec<f64> = (0..n).map(|_| rng.next_f64()).collect();
        let eps: Vec<[f64; 4]> = (0..n)
            .map(|_| {
                let base = rng.next_range(0.01, 1.0);
                // Strictly decreasing rows ending at 0 keep the table
                // invariants while exercising varied magnitudes.
                [
                    base,
                    base * rng.next_range(0.1, 0.9),
                    base * rng.next_range(0.001, 0.05),
                    0.0,
                ]
            })
            .map(|mut row| {
                for w in 1..4 {
                    row[w] = row[w].min(row[w - 1]);
                }
                row
            })
            .collect();
        (
            scores,
            ErrorTable {
                eps,
                mode: ErrorTableMode::Measured,
            },
        )
    }

    #[test]
    fn constant_cache_gives_zero_table() {
        let cache = KVCache::new(1, 1, 4, 4, vec![2.5; 16], vec![2.5; 16]).unwrap();
        for mode in [ErrorTableMode::Analytic, ErrorTableMode::Measured] {
            let table = build_error_table(&cache, mode).unwrap();
            assert!(table.eps.iter().all(|row| row.iter().all(|&e| e == 0.0)));
        }
    }

    #[test]
    fn sixteen_bit_column_is_zero_and_rows_monotone() {
        let cache = generate_synthetic_cache(&SyntheticConfig {
            tokens: 12,
            ..Default::default()
        })
        .unwrap();
        for mode in [ErrorTableMode::Analytic, ErrorTableMode::Measured] {
            let table = build_error_table(&cache, mode).unwrap();
            table.validate().unwrap();
            assert!(table.eps.iter().all(|row| row[3] == 0.0));
        }
    }

    #[test]
    fn measured_tracks_analytic_on_uniform_data() {
        // Uniform data in [0, 1]: measured MSE should sit within 3× of
        // the Δ²/12 closed form in both directions.
        let (l, h, n, d) = (1usize, 2usize, 8usize, 64usize);
        let mut rng = SplitMix64::new(77);
        let elements = l * h * n * d;
        let values: Vec<f32> = (0..elements).map(|_| rng.next_f64() as f32).collect();
        let keys = values.clone();
        let cache = KVCache::new(l, h, n, d, keys, values).unwrap();
        let analytic = build_error_table(&cache, ErrorTableMode::Analytic).unwrap();
        let measured = build_error_table(&cache, ErrorTableMode::Measured).unwrap();
        for t in 0..n {
            for w in 0..3 {
                let a = analytic.eps[t][w];
                let m = measured.eps[t][w];
                assert!(
                    m <= 3.0 * a && m >= a / 3.0,
                    "token {t} width column {w}: measured {m} vs analytic {a}"
                );
            }
        }
    }

    #[test]
    fn symmetric_instance_goes_all_four_bit() {
        let n = 6;
        let rows = vec![[0.9, 0.4, 0.1, 0.0]; n];
        let table = hand_table(n, &rows);
        let scores = vec![1.0; n];
        let exact = allocate_exact(&scores, &table, 4.0 * n as f64).unwrap();
        assert_eq!(exact.bits, vec![BitWidth::B4; n]);
        assert_eq!(exact.average_bits, 4.0);
        let greedy = allocate_greedy(&scores, &table, 4.0 * n as f64).unwrap();
        assert_eq!(greedy.bits, exact.bits);
    }

    #[test]
    fn single_important_token_takes_sixteen_bits() {
        let n = 4;
        let rows = vec![[0.9, 0.4, 0.1, 0.0]; n];
        let table = hand_table(n, &rows);
        let mut scores = vec![0.0; n];
        scores[2] = 1.0;
        let budget = (2 * (n - 1) + 16) as f64;
        let exact = allocate_exact(&scores, &table, budget).unwrap();
        assert_eq!(
            exact.bits,
            vec![BitWidth::B2, BitWidth::B2, BitWidth::B16, BitWidth::B2]
        );
        assert_eq!(exact.objective_value, 0.0);
        // The enumeration oracle agrees bit for bit.
        let oracle = enumerate_optimum(&scores, &table, budget);
        assert_eq!(exact.bits, oracle.bits);
        // Greedy finds the same optimum here.
        let greedy = allocate_greedy(&scores, &table, budget).unwrap();
        assert_eq!(greedy.bits, exact.bits);
    }

    #[test]
    fn full_budget_gives_all_sixteen_and_zero_objective() {
        let (scores, table) = random_instance(5, 10);
        let exact = allocate_exact(&scores, &table, 160.0).unwrap();
        assert_eq!(exact.bits, vec![BitWidth::B16; 10]);
        assert_eq!(exact.objective_value, 0.0);
    }

    #[test]
    fn minimum_budget_gives_all_two() {
        let (scores, table) = random_instance(6, 10);
        for solver in [allocate_exact, allocate_greedy] {
            let a = solver(&scores, &table, 20.0).unwrap();
            assert_eq!(a.bits, vec![BitWidth::B2; 10]);
        }
    }

    #[test]
    fn infeasible_budget_rejected() {
        let (scores, table) = random_instance(7, 10);
        for solver in [allocate_exact, allocate_greedy] {
            assert!(matches!(
                solver(&scores, &table, 19.9),
                Err(AllocError::InfeasibleBudget { .. })
            ));
        }
    }

    #[test]
    fn exact_solver_caps_instance_size() {
        let (scores, table) = random_instance(8, EXACT_TOKEN_CAP + 1);
        assert!(matches!(
            allocate_exact(&scores, &table, 1000.0),
            Err(AllocError::TokenCapExceeded { .. })
        ));
    }

    #[test]
    fn score_scaling_leaves_exact_assignment_unchanged() {
        for seed in 0..20 {
            let (scores, table) = random_instance(seed, 9);
            let budget = 4.0 * 9.0;
            let base = allocate_exact(&scores, &table, budget).unwrap();
            let scaled: Vec<f64> = scores.iter().map(|s| s * 37.5).collect();
            let scaled_out = allocate_exact(&scaled, &table, budget).unwrap();
            assert_eq!(base.bits, scaled_out.bits, "seed {seed}");
        }
    }

    #[test]
    fn exact_matches_enumeration_and_dominates_uniform() {
        let mut rng = SplitMix64::new(404);
        for trial in 0..150 {
            let n = 2 + (rng.next_below(5) as usize); // 2..=6
            let (scores, table) = random_instance(rng.next_u64(), n);
            let budget = rng.next_range(2.0 * n as f64, 16.0 * n as f64);
            let exact = allocate_exact(&scores, &table, budget).unwrap();
            let oracle = enumerate_optimum(&scores, &table, budget);
            assert_eq!(exact.bits, oracle.bits, "trial {trial}");
            assert!(total_bits(&exact.bits) as f64 <= budget);
            // Oracle dominance over every feasible uniform width.
            for width in BitWidth::ALL {
                if (width.bits() as f64) * (n as f64) <= budget {
                    let uniform = uniform_assignment(width, &scores, &table).unwrap();
                    assert!(exact.objective_value <= uniform.objective_value);
                }
            }
        }
    }

    #[test]
    fn greedy_is_feasible_and_near_optimal() {
        // Quality is measured on the allocator's actual domain:
        // quantization error tables from synthetic caches, importance
        // scores from synthetic attention statistics. The adversarial
        // random-table distribution stays in the exact-vs-enumeration
        // stress test, where it belongs.
        let mut rng = SplitMix64::new(505);
        let mut good = 0usize;
        let trials = 200;
        for _ in 0..trials {
            let n = 2 + (rng.next_below(9) as usize); // 2..=10
            let seed = rng.next_u64();
            let cfg = SyntheticConfig {
                seed,
                layers: 1,
                heads: 2,
                tokens: n,
                head_dim: 8,
                ..Default::default()
            };
            let cache = generate_synthetic_cache(&cfg).unwrap();
            let stats = generate_attention_stats(&cfg, &cache).unwrap();
            let scores = local_importance(&stats);
            let mode = if seed % 2 == 0 {
                ErrorTableMode::Analytic
            } else {
                ErrorTableMode::Measured
            };
            let table = build_error_table(&cache, mode).unwrap();
            let budget = rng.next_range(2.0 * n as f64, 16.0 * n as f64);
            let exact = allocate_exact(&scores, &table, budget).unwrap();
            let greedy = allocate_greedy(&scores, &table, budget).unwrap();
            assert!(total_bits(&greedy.bits) as f64 <= budget);
            if greedy.objective_value <= 1.05 * exact.objective_value + 1e-15 {
                good += 1;
            }
        }
        assert!(
            good * 100 >= trials * 95,
            "greedy within 1.05× on only {good}/{trials}"
        );
    }

    #[test]
    fn greedy_is_feasible_on_adversarial_tables() {
        let mut rng = SplitMix64::new(909);
        for _ in 0..200 {
            let n = 2 + (rng.next_below(9) as usize);
            let (scores, table) = random_instance(rng.next_u64(), n);
            let budget = rng.next_range(2.0 * n as f64, 16.0 * n as f64);
            let greedy = allocate_greedy(&scores, &table, budget).unwrap();
            assert!(total_bits(&greedy.bits) as f64 <= budget);
            assert!(greedy.objective_value.is_finite());
        }
    }

    #[test]
    fn label_calibration_extremes() {
        let cfg = SyntheticConfig {
            seed: 21,
            layers: 1,
            heads: 2,
            tokens: 8,
            head_dim: 8,
            value_scale: 1.0,
            heavy_hitter_fraction: 0.0,
        };
        let cache = generate_synthetic_cache(&cfg).unwrap();
        let model = ToyModel::new(&ToyModelConfig {
            layers: 1,
            heads: 2,
            head_dim: 8,
            ..Default::default()
        });

        // Vacuous threshold → everything fits at 2 bits.
        let labels = label_calibration(
            &cache,
            &model,
            &LabelConfig {
                threshold: f64::INFINITY,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(labels, vec![BitWidth::B2; 8]);

        // Constant cache → zero error at any width → all 2-bit.
        let flat = KVCache::new(1, 2, 8, 8, vec![1.0; 128], vec![1.0; 128]).unwrap();
        let labels = label_calibration(&flat, &model, &LabelConfig::default()).unwrap();
        assert_eq!(labels, vec![BitWidth::B2; 8]);
    }

    #[test]
    fn label_calibration_flags_large_magnitude_token() {
        let cfg = SyntheticConfig {
            seed: 22,
            layers: 1,
            heads: 1,
            tokens: 6,
            head_dim: 8,
            value_scale: 0.5,
            heavy_hitter_fraction: 0.0,
        };
        let cache = generate_synthetic_cache(&cfg).unwrap();
        // Rebuild with token 3's value row scaled 10×.
        let mut values = cache.values().to_vec();
        let d = cache.head_dim();
        let row = 3 * d;
        for v in &mut values[row..row + d] {
            *v *= 10.0;
        }
        let loud = KVCache::new(1, 1, 6, 8, cache.keys().to_vec(), values).unwrap();
        let model = ToyModel::new(&ToyModelConfig {
            layers: 1,
            heads: 1,
            head_dim: 8,
            ..Default::default()
        });
        let labels = label_calibration(
            &loud,
            &model,
            &LabelConfig {
                threshold: 2e-3,
                ..Default::default()
            },
        )
        .unwrap();
        let mut sorted: Vec<u8> = labels.iter().map(|b| b.bits()).collect();
        sorted.sort_unstable();
        let median = sorted[sorted.len() / 2];
        assert!(
            labels[3].bits() >= median,
            "loud token labeled {:?}, median {median}",
            labels[3]
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(120))]

        /// Every solver output is budget-feasible and matches the
        /// enumeration oracle for the exact path.
        #[test]
        fn solvers_feasible_exact_optimal(
            seed in 0u64..5_000,
            n in 2usize..7,
            budget_scale in 0.0f64..1.0,
        ) {
            let (scores, table) = random_instance(seed, n);
            let budget = 2.0 * n as f64 + budget_scale * 14.0 * n as f64;
            let exact = allocate_exact(&scores, &table, budget).unwrap();
            let greedy = allocate_greedy(&scores, &table, budget).unwrap();
            prop_assert!(total_bits(&exact.bits) as f64 <= budget);
            prop_assert!(total_bits(&greedy.bits) as f64 <= budget);
            let oracle = enumerate_optimum(&scores, &table, budget);
            prop_assert_eq!(&exact.bits, &oracle.bits);
            prop_assert!(greedy.objective_value + 1e-15 >= exact.objective_value);
        }
    }
}
