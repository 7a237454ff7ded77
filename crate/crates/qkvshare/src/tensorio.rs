//! Full-precision cache container, synthetic generation, and `QKVT` file I/O.
//!
//! This is the ingestion layer for everything downstream: a [`KVCache`]
//! holds the key/value tensors an agent would have produced while
//! prefilling a shared context, [`AttentionStats`] holds the per-token
//! attention summary the importance pipeline consumes, and the `QKVT`
//! container (documented byte-by-byte in `FORMAT.md`) persists caches on
//! disk.
//!
//! Real LLM runtimes are out of scope; caches are generated synthetically
//! with zero-mean Gaussian-like activations and a configurable fraction of
//! "heavy hitter" tokens that concentrate attention mass, so the grouping,
//! allocation, and handoff machinery can be exercised deterministically at
//! desk scale.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::rng::SplitMix64;

/// Container format magic.
pub const QKVT_MAGIC: &[u8; 4] = b"QKVT";
/// Current container format version.
pub const QKVT_VERSION: u16 = 1;
/// Cap on elements per tensor (keys or values): 2^28 ≈ 268M floats, 1 GiB.
/// Generous for desk scale while keeping hostile headers from driving
/// multi-gigabyte allocations.
pub const MAX_TENSOR_ELEMENTS: usize = 1 << 28;

// Sub-stream ids hung off the user seed (normative; see FORMAT.md).
const STREAM_KEYS: u64 = 1;
const STREAM_VALUES: u64 = 2;
const STREAM_HEAVY_PICK: u64 = 3;
const STREAM_RECEIVED: u64 = 4;
const STREAM_VARIANCE: u64 = 5;
const STREAM_ENTROPY: u64 = 6;
const STREAM_QUALITY: u64 = 7;

/// Synthetic stand-in scale for the entropy stat (in place of ln(n), which
/// would drag platform-varying libm results into generated artifacts).
const ENTROPY_SCALE: f64 = 4.0;

/// Errors from container I/O, validation, and synthetic generation.
#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("tensor of {elements} elements exceeds the cap of {cap}")]
    SizeOverflow { elements: u128, cap: usize },
    #[error("bad container magic {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated container: needed {needed} more bytes for {section}")]
    Truncated { section: &'static str, needed: u64 },
    #[error("container has {extra} trailing bytes beyond the declared shape")]
    TrailingData { extra: u64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite element in {tensor} at flat index {index}")]
    NonFinite { tensor: &'static str, index: usize },
    #[error("malformed container: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Full-precision key/value cache for `layers × heads × tokens × head_dim`.
///
/// Both tensors are stored flat in row-major `[layer][head][token][dim]`
/// order. Every element is finite; all dimensions are at least 1. The
/// struct is immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct KVCache {
    layers: usize,
    heads: usize,
    tokens: usize,
    head_dim: usize,
    keys: Vec<f32>,
    values: Vec<f32>,
}

impl KVCache {
    /// Build a cache from flat tensors, validating shape and finiteness.
    pub fn new(
        layers: usize,
        heads: usize,
        tokens: usize,
        head_dim: usize,
        keys: Vec<f32>,
        values: Vec<f32>,
    ) -> Result<Self, TensorError> {
        let elements = checked_elements(layers, heads, tokens, head_dim)?;
        for (name, tensor) in [("keys", &keys), ("values", &values)] {
            if tensor.len() != elements {
                return Err(TensorError::DimensionMismatch(format!(
                    "{name} tensor has {} elements, shape implies {elements}",
                    tensor.len()
                )));
            }
            if let Some(index) = tensor.iter().position(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite {
                    tensor: name,
                    index,
                });
            }
        }
        Ok(Self {
            layers,
            heads,
            tokens,
            head_dim,
            keys,
            values,
        })
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    /// Elements per tensor: `layers · heads · tokens · head_dim`.
    pub fn elements(&self) -> usize {
        self.keys.len()
    }

    /// Flat key tensor in `[layer][head][token][dim]` order.
    pub fn keys(&self) -> &[f32] {
        &self.keys
    }

    /// Flat value tensor in `[layer][head][token][dim]` order.
    pub fn values(&self) -> &[f32] {
        &self.values
    }

    #[inline]
    fn row_offset(&self, layer: usize, head: usize, token: usize) -> usize {
        ((layer * self.heads + head) * self.tokens + token) * self.head_dim
    }

    /// One token's key row for a given layer and head.
    #[inline]
    pub fn key_row(&self, layer: usize, head: usize, token: usize) -> &[f32] {
        let o = self.row_offset(layer, head, token);
        &self.keys[o..o + self.head_dim]
    }

    /// One token's value row for a given layer and head.
    #[inline]
    pub fn value_row(&self, layer: usize, head: usize, token: usize) -> &[f32] {
        let o = self.row_offset(layer, head, token);
        &self.values[o..o + self.head_dim]
    }
}

/// Per-token attention summary consumed by the importance pipeline.
///
/// All vectors have one entry per token. `received_weight` is normalized
/// attention mass (sums to 1 here, satisfying the looser "≤ n" contract);
/// `weight_variance` is the variance of that mass across heads/queries;
/// `query_entropy` is the entropy of the token's outgoing attention in
/// nats; `quality` is a [0, 1] quality score.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStats {
    pub received_weight: Vec<f64>,
    pub weight_variance: Vec<f64>,
    pub query_entropy: Vec<f64>,
    pub quality: Vec<f64>,
}

impl AttentionStats {
    /// Validate lengths, finiteness, and the stated ranges.
    pub fn new(
        received_weight: Vec<f64>,
        weight_variance: Vec<f64>,
        query_entropy: Vec<f64>,
        quality: Vec<f64>,
    ) -> Result<Self, TensorError> {
        let n = received_weight.len();
        if n == 0 {
            return Err(TensorError::InvalidConfig(
                "attention stats need at least one token".into(),
            ));
        }
        for (name, v) in [
            ("weight_variance", &weight_variance),
            ("query_entropy", &query_entropy),
            ("quality", &quality),
        ] {
            if v.len() != n {
                return Err(TensorError::DimensionMismatch(format!(
                    "{name} has {} entries, received_weight has {n}",
                    v.len()
                )));
            }
        }
        let check_range = |name: &'static str, v: &[f64], lo: f64, hi: f64| {
            for (i, &x) in v.iter().enumerate() {
                if !x.is_finite() || x < lo || x > hi {
                    return Err(TensorError::InvalidConfig(format!(
                        "{name}[{i}] = {x} outside [{lo}, {hi}]"
                    )));
                }
            }
            Ok(())
        };
        check_range("received_weight", &received_weight, 0.0, 1.0)?;
        check_range("weight_variance", &weight_variance, 0.0, f64::INFINITY)?;
        check_range("query_entropy", &query_entropy, 0.0, f64::INFINITY)?;
        check_range("quality", &quality, 0.0, 1.0)?;
        let total: f64 = received_weight.iter().sum();
        if total > n as f64 {
            return Err(TensorError::InvalidConfig(format!(
                "received_weight sums to {total}, above the token count {n}"
            )));
        }
        Ok(Self {
            received_weight,
            weight_variance,
            query_entropy,
            quality,
        })
    }

    pub fn tokens(&self) -> usize {
        self.received_weight.len()
    }
}

/// Parameters for deterministic synthetic generation.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub layers: usize,
    pub heads: usize,
    pub tokens: usize,
    pub head_dim: usize,
    /// Standard deviation of generated activations; must be positive.
    pub value_scale: f64,
    /// Fraction of tokens given concentrated attention mass, in [0, 1].
    pub heavy_hitter_fraction: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            layers: 2,
            heads: 2,
            tokens: 64,
            head_dim: 16,
            value_scale: 1.0,
            heavy_hitter_fraction: 0.125,
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<(), TensorError> {
        if self.layers == 0 || self.heads == 0 || self.tokens == 0 || self.head_dim == 0 {
            return Err(TensorError::InvalidConfig(
                "all dimensions must be at least 1".into(),
            ));
        }
        if !(self.value_scale > 0.0) || !self.value_scale.is_finite() {
            return Err(TensorError::InvalidConfig(format!(
                "value_scale must be a positive finite real, got {}",
                self.value_scale
            )));
        }
        if !(0.0..=1.0).contains(&self.heavy_hitter_fraction) {
            return Err(TensorError::InvalidConfig(format!(
                "heavy_hitter_fraction must lie in [0, 1], got {}",
                self.heavy_hitter_fraction
            )));
        }
        Ok(())
    }
}

fn checked_elements(
    layers: usize,
    heads: usize,
    tokens: usize,
    head_dim: usize,
) -> Result<usize, TensorError> {
    if layers == 0 || heads == 0 || tokens == 0 || head_dim == 0 {
        return Err(TensorError::InvalidConfig(
            "all dimensions must be at least 1".into(),
        ));
    }
    let elements = layers as u128 * heads as u128 * tokens as u128 * head_dim as u128;
    if elements > MAX_TENSOR_ELEMENTS as u128 {
        return Err(TensorError::SizeOverflow {
            elements,
            cap: MAX_TENSOR_ELEMENTS,
        });
    }
    Ok(elements as usize)
}

/// Generate a deterministic synthetic cache.
///
/// Elements are zero-mean with standard deviation `value_scale`, drawn from
/// dedicated key/value sub-streams of `cfg.seed` and narrowed to f32. The
/// result is bit-identical across runs and platforms.
pub fn generate_synthetic_cache(cfg: &SyntheticConfig) -> Result<KVCache, TensorError> {
    cfg.validate()?;
    let elements = checked_elements(cfg.layers, cfg.heads, cfg.tokens, cfg.head_dim)?;
    let fill = |stream_id: u64| -> Vec<f32> {
        let mut rng = SplitMix64::stream(cfg.seed, stream_id);
        (0..elements)
            .map(|_| (rng.next_normal() * cfg.value_scale) as f32)
            .collect()
    };
    let keys = fill(STREAM_KEYS);
    let values = fill(STREAM_VALUES);
    KVCache::new(cfg.layers, cfg.heads, cfg.tokens, cfg.head_dim, keys, values)
}

/// Round-half-away-from-zero count of heavy-hitter tokens for a config.
pub fn heavy_hitter_count(tokens: usize, fraction: f64) -> usize {
    (fraction * tokens as f64).round() as usize
}

/// Generate deterministic synthetic attention statistics for a cache.
///
/// `heavy_hitter_count(n, cfg.heavy_hitter_fraction)` tokens are flagged
/// heavy and receive at least twice the mean attention mass; the remaining
/// tokens sit within ±5% of each other. `received_weight` is normalized to
/// sum to exactly 1. Guaranteeing the 2× separation is impossible once the
/// flagged share approaches half the tokens (k tokens at ≥ 2× the mean
/// already account for 2k/n of the total mass), so fractions whose rounded
/// count exceeds 45% of the tokens are rejected.
pub fn generate_attention_stats(
    cfg: &SyntheticConfig,
    cache: &KVCache,
) -> Result<AttentionStats, TensorError> {
    cfg.validate()?;
    if cache.layers() != cfg.layers
        || cache.heads() != cfg.heads
        || cache.tokens() != cfg.tokens
        || cache.head_dim() != cfg.head_dim
    {
        return Err(TensorError::DimensionMismatch(format!(
            "cache shape [{},{},{},{}] does not match config [{},{},{},{}]",
            cache.layers(),
            cache.heads(),
            cache.tokens(),
            cache.head_dim(),
            cfg.layers,
            cfg.heads,
            cfg.tokens,
            cfg.head_dim,
        )));
    }
    let n = cfg.tokens;
    let h = heavy_hitter_count(n, cfg.heavy_hitter_fraction);
    if h as f64 > 0.45 * n as f64 {
        return Err(TensorError::InvalidConfig(format!(
            "heavy_hitter_fraction {} flags {h} of {n} tokens; at most 45% \
             can each hold twice the mean attention mass",
            cfg.heavy_hitter_fraction
        )));
    }

    // Pick h distinct heavy indices with a partial Fisher–Yates shuffle.
    let mut heavy = vec![false; n];
    let mut pick = SplitMix64::stream(cfg.seed, STREAM_HEAVY_PICK);
    let mut indices: Vec<usize> = (0..n).collect();
    for i in 0..h {
        let j = i + pick.next_below((n - i) as u64) as usize;
        indices.swap(i, j);
        heavy[indices[i]] = true;
    }

    // Raw mass: normals at 1±5%, heavy hitters at c·(1±5%) where c keeps
    // them at ≥ 2× the mean even in the worst jitter configuration (the
    // 1.25 factor is slack on top of the exact worst-case bound).
    let boost = if h == 0 {
        0.0
    } else {
        let worst = 2.1 * (n - h) as f64 / (0.95 * n as f64 - 2.1 * h as f64);
        (1.25 * worst).max(4.0)
    };
    let mut jitter = SplitMix64::stream(cfg.seed, STREAM_RECEIVED);
    let mut received: Vec<f64> = (0..n)
        .map(|t| {
            let base = 1.0 + jitter.next_range(-0.05, 0.05);
            if heavy[t] {
                boost * base
            } else {
                base
            }
        })
        .collect();
    let total: f64 = received.iter().sum();
    for r in &mut received {
        *r /= total;
    }

    // Variance of received mass is bounded by r(1-r) for mass in [0, 1];
    // draw a random fraction of that bound. A single token receives all
    // the mass, so its variance is exactly zero.
    let mut vr = SplitMix64::stream(cfg.seed, STREAM_VARIANCE);
    let weight_variance: Vec<f64> = received
        .iter()
        .map(|&r| vr.next_f64() * r * (1.0 - r))
        .collect();

    // Outgoing-attention entropy: a random fraction of a fixed synthetic
    // scale, shrunk by (1 - 1/n) so a single-token context has zero
    // entropy. (A libm ln(n) here would leak platform-specific bits into
    // generated artifacts.)
    let mut er = SplitMix64::stream(cfg.seed, STREAM_ENTROPY);
    let ceiling = ENTROPY_SCALE * (1.0 - 1.0 / n as f64);
    let query_entropy: Vec<f64> = (0..n).map(|_| er.next_f64() * ceiling).collect();

    let mut qr = SplitMix64::stream(cfg.seed, STREAM_QUALITY);
    let quality: Vec<f64> = (0..n).map(|_| qr.next_f64()).collect();

    AttentionStats::new(received, weight_variance, query_entropy, quality)
}

// ---------------------------------------------------------------------------
// QKVT container I/O
// ---------------------------------------------------------------------------

/// Serialize a cache into the `QKVT` container layout.
pub fn write_container<W: Write>(cache: &KVCache, mut w: W) -> Result<u64, TensorError> {
    w.write_all(QKVT_MAGIC)?;
    w.write_all(&QKVT_VERSION.to_le_bytes())?;
    w.write_all(&0u16.to_le_bytes())?; // reserved
    for dim in [cache.layers(), cache.heads(), cache.tokens(), cache.head_dim()] {
        w.write_all(&(dim as u32).to_le_bytes())?;
    }
    for tensor in [cache.keys(), cache.values()] {
        for &v in tensor {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(24 + 8 * cache.elements() as u64)
}

/// Parse a `QKVT` container from a reader.
pub fn read_container<R: Read>(mut r: R) -> Result<KVCache, TensorError> {
    let mut magic = [0u8; 4];
    read_section(&mut r, &mut magic, "magic")?;
    if &magic != QKVT_MAGIC {
        return Err(TensorError::BadMagic {
            found: magic,
            expected: *QKVT_MAGIC,
        });
    }
    let mut two = [0u8; 2];
    read_section(&mut r, &mut two, "version")?;
    let version = u16::from_le_bytes(two);
    if version != QKVT_VERSION {
        return Err(TensorError::UnsupportedVersion(version));
    }
    read_section(&mut r, &mut two, "reserved")?;
    if u16::from_le_bytes(two) != 0 {
        return Err(TensorError::Malformed(
            "reserved field must be zero".into(),
        ));
    }
    let mut four = [0u8; 4];
    let mut dims = [0usize; 4];
    for dim in &mut dims {
        read_section(&mut r, &mut four, "dimensions")?;
        *dim = u32::from_le_bytes(four) as usize;
    }
    let [layers, heads, tokens, head_dim] = dims;
    let elements = checked_elements(layers, heads, tokens, head_dim)?;

    let mut payload = vec![0u8; 4 * elements];
    let mut read_tensor = |section: &'static str| -> Result<Vec<f32>, TensorError> {
        read_section(&mut r, &mut payload, section)?;
        Ok(payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    };
    let keys = read_tensor("keys payload")?;
    let values = read_tensor("values payload")?;

    let mut probe = [0u8; 1];
    let extra = count_remaining(&mut r, &mut probe)?;
    if extra > 0 {
        return Err(TensorError::TrailingData { extra });
    }
    KVCache::new(layers, heads, tokens, head_dim, keys, values)
}

/// Write a cache to `path` in the `QKVT` layout; returns bytes written.
pub fn store_container<P: AsRef<Path>>(cache: &KVCache, path: P) -> Result<u64, TensorError> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    let bytes = write_container(cache, &mut w)?;
    w.flush()?;
    Ok(bytes)
}

/// Load a cache from a `QKVT` file at `path`.
pub fn load_container<P: AsRef<Path>>(path: P) -> Result<KVCache, TensorError> {
    let file = File::open(path)?;
    read_container(BufReader::new(file))
}

/// Read exactly `buf.len()` bytes, mapping EOF to a truncation error that
/// names the section and the shortfall.
fn read_section<R: Read>(
    r: &mut R,
    buf: &mut [u8],
    section: &'static str,
) -> Result<(), TensorError> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => {
                return Err(TensorError::Truncated {
                    section,
                    needed: (buf.len() - filled) as u64,
                })
            }
            Ok(k) => filled += k,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

/// Count bytes left in the reader (drains it).
fn count_remaining<R: Read>(r: &mut R, probe: &mut [u8; 1]) -> Result<u64, TensorError> {
    let mut extra = 0u64;
    loop {
        match r.read(probe) {
            Ok(0) => return Ok(extra),
            Ok(k) => extra += k as u64,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e.into()),
        }
    }
}
