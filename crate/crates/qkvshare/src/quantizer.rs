//! Group-wise asymmetric uniform quantization at 2/4/8 bits with a 16-bit
//! lossless pass-through, plus bit-exact code packing.
//!
//! The cache-level scheme follows the usual key/value asymmetry: value rows
//! are grouped *per token* along the dim axis and quantized at that token's
//! assigned width, while key columns are grouped *per channel* along the
//! token axis. A per-channel key group can span tokens with different
//! assigned widths; it conservatively takes the maximum width among them so
//! high-importance tokens never lose key precision to a low-bit neighbour.
//!
//! Quantization is affine-asymmetric: `scale = (max − min) / (2^bits − 1)`,
//! `zero_point = min`, `code = round((x − zero_point) / scale)` with
//! round-half-away-from-zero, clamped to the code range. A constant group
//! has `scale = 0` and all-zero codes, reconstructing exactly. The 16-bit
//! width stores raw f32 values and is exact by construction.
//!
//! Packed code layout (normative, see `FORMAT.md`): codes packed LSB-first
//! within each byte, groups concatenated in iteration order, padding bits
//! in a group's final byte zero.

use crate::tensorio::KVCache;

/// Values per quantization group along the grouped axis.
pub const GROUP_SIZE: usize = 32;

/// Errors from quantization, packing, and reconstruction.
#[derive(Debug, thiserror::Error)]
pub enum QuantError {
    #[error("cannot quantize an empty group")]
    EmptyGroup,
    #[error("non-finite input at index {index}")]
    NonFinite { index: usize },
    #[error("code {code} at index {index} exceeds the {bits}-bit maximum {max}")]
    CodeOutOfRange {
        index: usize,
        code: u32,
        bits: u8,
        max: u32,
    },
    #[error("packed codes truncated: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("corrupt group: {0}")]
    CorruptGroup(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// A legal per-token bit width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BitWidth {
    B2,
    B4,
    B8,
    B16,
}

impl BitWidth {
    /// All widths in ascending order; also the error-table column order.
    pub const ALL: [BitWidth; 4] = [BitWidth::B2, BitWidth::B4, BitWidth::B8, BitWidth::B16];

    /// Numeric width in bits.
    #[inline]
    pub fn bits(self) -> u8 {
        match self {
            BitWidth::B2 => 2,
            BitWidth::B4 => 4,
            BitWidth::B8 => 8,
            BitWidth::B16 => 16,
        }
    }

    /// Largest code at this width (`2^bits − 1`); the 16-bit pass-through
    /// stores raw floats, but the value is still meaningful for packing.
    #[inline]
    pub fn max_code(self) -> u32 {
        (1u32 << self.bits()) - 1
    }

    /// Column index in a 4-wide error table / logit vector.
    #[inline]
    pub fn index(self) -> usize {
        match self {
            BitWidth::B2 => 0,
            BitWidth::B4 => 1,
            BitWidth::B8 => 2,
            BitWidth::B16 => 3,
        }
    }

    /// Inverse of [`BitWidth::index`].
    pub fn from_index(index: usize) -> Option<BitWidth> {
        BitWidth::ALL.get(index).copied()
    }

    pub fn from_bits(bits: u8) -> Option<BitWidth> {
        match bits {
            2 => Some(BitWidth::B2),
            4 => Some(BitWidth::B4),
            8 => Some(BitWidth::B8),
            16 => Some(BitWidth::B16),
        _ => None,
        }
    }
}

/// Payload of a quantized group: packed codes below 16 bits, raw floats at
/// the 16-bit pass-through width.
#[derive(Debug, Clone, PartialEq)]
pub enum GroupData {
    Packed(Vec<u8>),
    Raw(Vec<f32>),
}

/// One quantized group: `len` source values sharing a scale and zero point.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedGroup {
    pub bits: BitWidth,
    pub scale: f32,
    pub zero_point: f32,
    pub len: usize,
    pub data: GroupData,
}

/// A fully quantized cache: per-channel key groups and per-token value
/// groups in the canonical iteration order (see `FORMAT.md`), plus the
/// per-token bit-width vector that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedKV {
    layers: usize,
    heads: usize,
    tokens: usize,
    head_dim: usize,
    token_bits: Vec<BitWidth>,
    key_groups: Vec<QuantizedGroup>,
    value_groups: Vec<QuantizedGroup>,
}

impl QuantizedKV {
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

    pub fn token_bits(&self) -> &[BitWidth] {
        &self.token_bits
    }

    pub fn key_groups(&self) -> &[QuantizedGroup] {
        &self.key_groups
    }

    pub fn value_groups(&self) -> &[QuantizedGroup] {
        &self.value_groups
    }

    /// Mean of the per-token bit widths.
    pub fn average_bits(&self) -> f64 {
        let total: u64 = self.token_bits.iter().map(|b| b.bits() as u64).sum();
        total as f64 / self.token_bits.len() as f64
    }

    /// Exact encoded payload size of all groups (see `FORMAT.md`):
    /// 8 bytes of scale/zero-point plus packed codes per sub-16-bit group,
    /// 4 bytes per value for 16-bit groups.
    pub fn payload_bytes(&self) -> u64 {
        self.key_groups
            .iter()
            .chain(self.value_groups.iter())
            .map(|g| group_payload_bytes(g.bits, g.len))
            .sum()
    }

    /// Construct from parts, revalidating the group structure against the
    /// dims and bit-width vector (used by the card decoder).
    pub fn from_parts(
        layers: usize,
        heads: usize,
        tokens: usize,
        head_dim: usize,
        token_bits: Vec<BitWidth>,
        key_groups: Vec<QuantizedGroup>,
        value_groups: Vec<QuantizedGroup>,
    ) -> Result<Self, QuantError> {
        if token_bits.len() != tokens {
            return Err(QuantError::DimensionMismatch(format!(
                "bit-width vector has {} entries for {} tokens",
                token_bits.len(),
                tokens
            )));
        }
        let expect_keys = expected_key_groups(layers, heads, tokens, head_dim, &token_bits);
        let expect_values = expected_value_groups(layers, heads, tokens, head_dim, &token_bits);
        for (name, groups, expect) in [
            ("key", &key_groups, expect_keys),
            ("value", &value_groups, expect_values),
        ] {
            if groups.len() != expect.len() {
                return Err(QuantError::DimensionMismatch(format!(
                    "{name} groups: have {}, shape implies {}",
                    groups.len(),
                    expect.len()
                )));
            }
            for (i, (g, (bits, len))) in groups.iter().zip(expect.iter()).enumerate() {
                if g.bits != *bits || g.len != *len {
                    return Err(QuantError::CorruptGroup(format!(
                        "{name} group {i}: ({:?}, len {}) where canonical order implies ({bits:?}, len {len})",
                        g.bits, g.len
                    )));
                }
                validate_group(g)?;
            }
        }
        Ok(Self {
            layers,
            heads,
            tokens,
            head_dim,
            token_bits,
            key_groups,
            value_groups,
        })
    }
}

/// Encoded size in bytes of one group at a given width and length.
#[inline]
pub fn group_payload_bytes(bits: BitWidth, len: usize) -> u64 {
    match bits {
        BitWidth::B16 => 4 * len as u64,
        b => 8 + packed_len(len, b) as u64,
    }
}

/// Packed byte length for `count` codes at a width: `ceil(count·bits/8)`.
#[inline]
pub fn packed_len(count: usize, bits: BitWidth) -> usize {
    (count * bits.bits() as usize).div_ceil(8)
}

/// Pack codes LSB-first within bytes.
///
/// Works at every legal width (16-bit codes occupy two bytes, low byte
/// first). Padding bits in the final byte are zero.
pub fn pack_codes(codes: &[u32], bits: BitWidth) -> Result<Vec<u8>, QuantError> {
    let width = bits.bits() as usize;
    let max = bits.max_code();
    let mut out = vec![0u8; packed_len(codes.len(), bits)];
    let mut bitpos = 0usize;
    for (index, &code) in codes.iter().enumerate() {
        if code > max {
            return Err(QuantError::CodeOutOfRange {
                index,
                code,
                bits: bits.bits(),
                max,
            });
        }
        let mut remaining = width;
        let mut value = code;
        while remaining > 0 {
            let byte = bitpos / 8;
            let offset = bitpos % 8;
            let take = remaining.min(8 - offset);
            out[byte] |= (((value & ((1u32 << take) - 1)) as u8) << offset) as u8;
            value >>= take;
            remaining -= take;
            bitpos += take;
        }
    }
    Ok(out)
}

/// Unpack `count` codes packed LSB-first.
///
/// The byte string must be exactly `ceil(count·bits/8)` long with zero
/// padding bits, so every accepted input re-packs to identical bytes.
pub fn unpack_codes(bytes: &[u8], bits: BitWidth, count: usize) -> Result<Vec<u32>, QuantError> {
    let needed = packed_len(count, bits);
    if bytes.len() < needed {
        return Err(QuantError::Truncated {
            needed,
            have: bytes.len(),
        });
    }
    if bytes.len() > needed {
        return Err(QuantError::CorruptGroup(format!(
            "{} packed bytes where {needed} were expected",
            bytes.len()
        )));
    }
    let width = bits.bits() as usize;
    let mut codes = Vec::with_capacity(count);
    let mut bitpos = 0usize;
    for _ in 0..count {
        let mut value = 0u32;
        let mut got = 0usize;
        while got < width {
            let byte = bitpos / 8;
            let offset = bitpos % 8;
            let take = (width - got).min(8 - offset);
            let chunk = (bytes[byte] >> offset) & ((1u16 << take) - 1) as u8;
            value |= (chunk as u32) << got;
            got += take;
            bitpos += take;
        }
        codes.push(value);
    }
    let used_bits = count * width;
    if used_bits % 8 != 0 {
        let last = bytes[needed - 1];
        let pad_mask = !((1u16 << (used_bits % 8)) - 1) as u8;
        if last & pad_mask != 0 {
            return Err(QuantError::CorruptGroup(
                "non-zero padding bits in final packed byte".into(),
            ));
        }
    }
    Ok(codes)
}

/// Quantize one group of values at the given width.
pub fn quantize_group(x: &[f32], bits: BitWidth) -> Result<QuantizedGroup, QuantError> {
    if x.is_empty() {
        return Err(QuantError::EmptyGroup);
    }
    if let Some(index) = x.iter().position(|v| !v.is_finite()) {
        return Err(QuantError::NonFinite { index });
    }
    if bits == BitWidth::B16 {
        return Ok(QuantizedGroup {
            bits,
            scale: 0.0,
            zero_point: 0.0,
            len: x.len(),
            data: GroupData::Raw(x.to_vec()),
        });
    }
    let min = x.iter().copied().fold(f32::INFINITY, f32::min);
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let levels = bits.max_code() as f64;
    // The scale is narrowed to f32 before codes are computed so that the
    // error bound |x − x̂| ≤ scale/2 holds against the *stored* scale.
    let scale = if max > min {
        ((max as f64 - min as f64) / levels) as f32
    } else {
        0.0
    };
    let codes: Vec<u32> = if scale == 0.0 {
        vec![0; x.len()]
    } else {
        x.iter()
            .map(|&v| {
                let q = ((v as f64 - min as f64) / scale as f64).round();
                q.clamp(0.0, levels) as u32
            })
            .collect()
    };
    Ok(QuantizedGroup {
        bits,
        scale,
        zero_point: min,
        len: x.len(),
        data: GroupData::Packed(pack_codes(&codes, bits)?),
    })
}

fn validate_group(q: &QuantizedGroup) -> Result<(), QuantError> {
    if q.len == 0 {
        return Err(QuantError::EmptyGroup);
    }
    if !q.scale.is_finite() || !q.zero_point.is_finite() || q.scale < 0.0 {
        return Err(QuantError::CorruptGroup(format!(
            "scale {} / zero point {} out of domain",
            q.scale, q.zero_point
        )));
    }
    match (&q.data, q.bits) {
        (GroupData::Raw(v), BitWidth::B16) => {
            if v.len() != q.len {
                return Err(QuantError::DimensionMismatch(format!(
                    "raw group holds {} values, length field says {}",
                    v.len(),
                    q.len
                )));
            }
            if let Some(index) = v.iter().position(|x| !x.is_finite()) {
                return Err(QuantError::NonFinite { index });
            }
            Ok(())
        }
        (GroupData::Packed(bytes), bits) if bits != BitWidth::B16 => {
            let needed = packed_len(q.len, bits);
            if bytes.len() != needed {
                return Err(QuantError::Truncated {
                    needed,
                    have: bytes.len(),
                });
            }
            Ok(())
        }
        _ => Err(QuantError::CorruptGroup(
            "payload kind does not match bit width".into(),
        )),
    }
}

/// Reconstruct a group: `x̂ = zero_point + scale·code`, exact for the
/// 16-bit pass-through and for constant (`scale = 0`) groups.
pub fn dequantize_group(q: &QuantizedGroup) -> Result<Vec<f32>, QuantError> {
    validate_group(q)?;
    match &q.data {
        GroupData::Raw(v) => Ok(v.clone()),
        GroupData::Packed(bytes) => {
            let codes = unpack_codes(bytes, q.bits, q.len)?;
            if q.scale == 0.0 {
                return Ok(vec![q.zero_point; q.len]);
            }
            Ok(codes
                .iter()
                .map(|&c| (q.zero_point as f64 + q.scale as f64 * c as f64) as f32)
                .collect())
        }
    }
}

/// Per-token-group key widths under the conservative max rule: key group
/// `g` spans tokens `[32g, min(32(g+1), n))` and takes the widest
/// assignment among them.
pub fn key_group_widths(token_bits: &[BitWidth]) -> Vec<BitWidth> {
    token_bits
        .chunks(GROUP_SIZE)
        .map(|chunk| chunk.iter().copied().max().expect("chunks are non-empty"))
        .collect()
}

/// Canonical (width, length) sequence of key groups for a shape: iteration
/// order `[layer][head][channel][token-group]`.
fn expected_key_groups(
    layers: usize,
    heads: usize,
    tokens: usize,
    head_dim: usize,
    token_bits: &[BitWidth],
) -> Vec<(BitWidth, usize)> {
    let widths = key_group_widths(token_bits);
    let mut out = Vec::with_capacity(layers * heads * head_dim * widths.len());
    for _lh in 0..layers * heads {
        for _channel in 0..head_dim {
            for (g, &bits) in widths.iter().enumerate() {
                let len = (tokens - g * GROUP_SIZE).min(GROUP_SIZE);
                out.push((bits, len));
            }
        }
    }
    out
}

/// Canonical (width, length) sequence of value groups: iteration order
/// `[layer][head][token][dim-group]`.
fn expected_value_groups(
    layers: usize,
    heads: usize,
    tokens: usize,
    head_dim: usize,
    token_bits: &[BitWidth],
) -> Vec<(BitWidth, usize)> {
    let dim_groups = head_dim.div_ceil(GROUP_SIZE);
    let mut out = Vec::with_capacity(layers * heads * tokens * dim_groups);
    for _lh in 0..layers * heads {
        for &bits in token_bits.iter().take(tokens) {
            for g in 0..dim_groups {
                let len = (head_dim - g * GROUP_SIZE).min(GROUP_SIZE);
                out.push((bits, len));
            }
        }
    }
    out
}

/// The canonical group sequences implied by a shape and bit-width vector:
/// exactly the `(width, length)` pairs, in order, that `quantize_cache`
/// produces and that the card codec reads back without any per-group
/// header on the wire.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupLayout {
    pub key_groups: Vec<(BitWidth, usize)>,
    pub value_groups: Vec<(BitWidth, usize)>,
}

/// Compute the canonical [`GroupLayout`] for a shape.
pub fn expected_group_layout(
    layers: usize,
    heads: usize,
    tokens: usize,
    head_dim: usize,
    token_bits: &[BitWidth],
) -> GroupLayout {
    GroupLayout {
        key_groups: expected_key_groups(layers, heads, tokens, head_dim, token_bits),
        value_groups: expected_value_groups(layers, heads, tokens, head_dim, token_bits),
    }
}

/// Quantize a full cache under a per-token bit-width assignment.
///
/// Values are grouped per token along the dim axis at `token_bits[t]`;
/// keys are grouped per channel along the token axis at the group-max
/// width. Tail groups shorter than [`GROUP_SIZE`] are permitted.
pub fn quantize_cache(cache: &KVCache, token_bits: &[BitWidth]) -> Result<QuantizedKV, QuantError> {
    let (layers, heads, tokens, head_dim) = (
        cache.layers(),
        cache.heads(),
        cache.tokens(),
        cache.head_dim(),
    );
    if token_bits.len() != tokens {
        return Err(QuantError::DimensionMismatch(format!(
            "assignment has {} entries for {} tokens",
            token_bits.len(),
            tokens
        )));
    }

    let key_widths = key_group_widths(token_bits);
    let mut key_groups =
        Vec::with_capacity(layers * heads * head_dim * key_widths.len());
    let mut column = vec![0f32; GROUP_SIZE];
    for layer in 0..layers {
        for head in 0..heads {
            for channel in 0..head_dim {
                for (g, &bits) in key_widths.iter().enumerate() {
                    let start = g * GROUP_SIZE;
                    let len = (tokens - start).min(GROUP_SIZE);
                    for (i, slot) in column[..len].iter_mut().enumerate() {
                        *slot = cache.key_row(layer, head, start + i)[channel];
                    }
                    key_groups.push(quantize_group(&column[..len], bits)?);
                }
            }
        }
    }

    let dim_groups = head_dim.div_ceil(GROUP_SIZE);
    let mut value_groups = Vec::with_capacity(layers * heads * tokens * dim_groups);
    for layer in 0..layers {
        for head in 0..heads {
            for (token, &bits) in token_bits.iter().enumerate() {
                let row = cache.value_row(layer, head, token);
                for chunk in row.chunks(GROUP_SIZE) {
                    value_groups.push(quantize_group(chunk, bits)?);
                }
            }
        }
    }

    Ok(QuantizedKV {
        layers,
        heads,
        tokens,
        head_dim,
        token_bits: token_bits.to_vec(),
        key_groups,
        value_groups,
    })
}

/// Reconstruct a full-precision cache of the original shape.
pub fn dequantize_cache(q: &QuantizedKV) -> Result<KVCache, QuantError> {
    let (layers, heads, tokens, head_dim) = (q.layers, q.heads, q.tokens, q.head_dim);
    let elements = layers * heads * tokens * head_dim;
    let row_offset =
        |layer: usize, head: usize, token: usize| ((layer * heads + head) * tokens + token) * head_dim;

    let mut keys = vec![0f32; elements];
    let token_groups = tokens.div_ceil(GROUP_SIZE);
    let mut it = q.key_groups.iter();
    for layer in 0..layers {
        for head in 0..heads {
            for channel in 0..head_dim {
                for g in 0..token_groups {
                    let group = it.next().ok_or_else(|| {
                        QuantError::DimensionMismatch("missing key group".into())
                    })?;
                    let values = dequantize_group(group)?;
                    let start = g * GROUP_SIZE;
                    for (i, &v) in values.iter().enumerate() {
                        keys[row_offset(layer, head, start + i) + channel] = v;
                    }
                }
            }
        }
    }

    let mut values_flat = vec![0f32; elements];
    let dim_groups = head_dim.div_ceil(GROUP_SIZE);
    let mut it = q.value_groups.iter();
    for layer in 0..layers {
        for head in 0..heads {
            for token in 0..tokens {
                let base = row_offset(layer, head, token);
                for g in 0..dim_groups {
                    let group = it.next().ok_or_else(|| {
                        QuantError::DimensionMismatch("missing value group".into())
                    })?;
                    let vals = dequantize_group(group)?;
                    let start = g * GROUP_SIZE;
                    values_flat[base + start..base + start + vals.len()].copy_from_slice(&vals);
                }
            }
        }
    }

    KVCache::new(layers, heads, tokens, head_dim, keys, values_flat).map_err(|e| {
        QuantError::CorruptGroup(format!("reconstructed cache failed validation: {e}"))
    })
}

/// Expected mean squared error of uniform quantization over a value range:
/// `Δ²/12` with `Δ = range/(2^bits − 1)`; zero at the 16-bit pass-through.
///
/// The caller guarantees `range ≥ 0` (it is a max−min by construction).
pub fn analytic_error(bits: BitWidth, value_range: f64) -> f64 {
    assert!(
        value_range >= 0.0 && value_range.is_finite(),
        "value_range must be a finite non-negative real"
    );
    if bits == BitWidth::B16 {
        return 0.0;
    }
    let delta = value_range / bits.max_code() as f64;
    delta * delta / 12.0
}
