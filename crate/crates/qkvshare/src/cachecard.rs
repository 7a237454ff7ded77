//! The CacheCard artifact: a self-contained, integrity-checked container
//! for a quantized KV cache, the unit every handoff transfers.
//!
//! A card couples a [`QuantizedKV`] payload with the identifiers a
//! receiver needs (model id, sender id), the sequence shape, a verbatim
//! position-offset placeholder, and derived compression statistics.
//!
//! The binary `QKVC` layout (normative, field-by-field in `FORMAT.md`) is
//! canonical: group widths and lengths are fully derived from the shape
//! and the per-token bit-width vector, so the wire carries no redundant
//! structure, `decode(encode(c)) = c`, and `encode(decode(bytes)) =
//! bytes` for every accepted input. A CRC32 trailer over all preceding
//! bytes is verified right after the magic/version envelope, before any
//! body parsing, so corruption is always reported as corruption.

use std::io::{Read, Write};
use std::path::Path;

use crate::quantizer::{BitWidth, GroupData, QuantError, QuantizedGroup, QuantizedKV};
use crate::tensorio::MAX_TENSOR_ELEMENTS;

/// Magic bytes of the card container.
pub const QKVC_MAGIC: &[u8; 4] = b"QKVC";
/// Current card format version.
pub const QKVC_VERSION: u16 = 1;
/// Maximum byte length of the model and sender id strings.
pub const MAX_ID_BYTES: usize = 255;

/// Errors from card construction and the codec.
#[derive(Debug, thiserror::Error)]
pub enum CardError {
    #[error("bad card magic {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },
    #[error("unsupported card version {0}")]
    UnsupportedVersion(u16),
    #[error("card CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("truncated card: needed {needed} more bytes for {section}")]
    Truncated { section: &'static str, needed: u64 },
    #[error("malformed card: {0}")]
    Malformed(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Identity and placement fields of a card.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CardHeader {
    pub version: u16,
    /// Model the cache was produced for; receivers gate on it.
    pub model_id: String,
    /// Agent that built the card.
    pub sender_id: String,
    /// Carried verbatim end to end; never interpreted by this toolkit.
    pub position_offset: i32,
}

/// Derived compression statistics of a card.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct CardStats {
    /// Mean of the per-token bit widths.
    pub average_bits: f64,
    /// Exact payload accounting per `FORMAT.md` (scale/zero-point plus
    /// packed codes per group; 4 bytes per value for 16-bit groups).
    pub payload_bytes: u64,
    /// What an FP16 cache of the same shape would occupy: 2·L·H·n·d
    /// elements at 2 bytes each.
    pub fp16_equivalent_bytes: u64,
    /// payload_bytes / fp16_equivalent_bytes.
    pub compression_ratio: f64,
}

/// A self-contained quantized-cache artifact.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheCard {
    header: CardHeader,
    payload: QuantizedKV,
    stats: CardStats,
}

impl CacheCard {
    pub fn header(&self) -> &CardHeader {
        &self.header
    }

    pub fn model_id(&self) -> &str {
        &self.header.model_id
    }

    pub fn sender_id(&self) -> &str {
        &self.header.sender_id
    }

    pub fn position_offset(&self) -> i32 {
        self.header.position_offset
    }

    pub fn payload(&self) -> &QuantizedKV {
        &self.payload
    }

    pub fn token_bits(&self) -> &[BitWidth] {
        self.payload.token_bits()
    }

    pub fn layers(&self) -> usize {
        self.payload.layers()
    }

    pub fn heads(&self) -> usize {
        self.payload.heads()
    }

    pub fn tokens(&self) -> usize {
        self.payload.tokens()
    }

    pub fn head_dim(&self) -> usize {
        self.payload.head_dim()
    }

    pub fn stats(&self) -> &CardStats {
        &self.stats
    }

    /// Return a copy carrying a different position offset (the field is
    /// opaque; cards are otherwise immutable).
    pub fn with_position_offset(mut self, offset: i32) -> Self {
        self.header.position_offset = offset;
        self
    }
}

/// FP16-equivalence size of a cache shape: `2·L·H·n·d` elements at 2
/// bytes each. This is the accounting baseline for compression ratios
/// even though local reconstruction is 32-bit.
pub fn fp16_equivalent_bytes(layers: usize, heads: usize, tokens: usize, head_dim: usize) -> u64 {
    2 * layers as u64 * heads as u64 * tokens as u64 * head_dim as u64 * 2
}

/// Compute the stats block for a payload.
pub fn compute_stats(payload: &QuantizedKV) -> CardStats {
    let payload_bytes = payload.payload_bytes();
    let fp16 = fp16_equivalent_bytes(
        payload.layers(),
        payload.heads(),
        payload.tokens(),
        payload.head_dim(),
    );
    CardStats {
        average_bits: payload.average_bits(),
        payload_bytes,
        fp16_equivalent_bytes: fp16,
        compression_ratio: payload_bytes as f64 / fp16 as f64,
    }
}

fn validate_id(name: &str, id: &str) -> Result<(), CardError> {
    if id.is_empty() {
        return Err(CardError::InvalidParameter(format!(
            "{name} must be non-empty"
        )));
    }
    if id.len() > MAX_ID_BYTES {
        return Err(CardError::InvalidParameter(format!(
            "{name} is {} bytes, limit {MAX_ID_BYTES}",
            id.len()
        )));
    }
    Ok(())
}

/// Build a card from a quantized payload. The position offset starts at
/// zero; see [`CacheCard::with_position_offset`].
pub fn build_card(
    payload: QuantizedKV,
    model_id: &str,
    sender_id: &str,
) -> Result<CacheCard, CardError> {
    validate_id("model id", model_id)?;
    validate_id("sender id", sender_id)?;
    let stats = compute_stats(&payload);
    Ok(CacheCard {
        header: CardHeader {
            version: QKVC_VERSION,
            model_id: model_id.to_owned(),
            sender_id: sender_id.to_owned(),
            position_offset: 0,
        },
        payload,
        stats,
    })
}

/// The stats block of a card.
pub fn card_stats(card: &CacheCard) -> CardStats {
    card.stats
}

/// Serialize a card to its canonical `QKVC` byte string.
pub fn encode_card(card: &CacheCard) -> Vec<u8> {
    let q = &card.payload;
    let mut buf = Vec::new();
    buf.extend_from_slice(QKVC_MAGIC);
    buf.extend_from_slice(&card.header.version.to_le_bytes());
    buf.extend_from_slice(&0u16.to_le_bytes()); // reserved
    buf.push(card.header.model_id.len() as u8);
    buf.extend_from_slice(card.header.model_id.as_bytes());
    buf.push(card.header.sender_id.len() as u8);
    buf.extend_from_slice(card.header.sender_id.as_bytes());
    buf.extend_from_slice(&card.header.position_offset.to_le_bytes());
    for dim in [q.layers(), q.heads(), q.tokens(), q.head_dim()] {
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for bits in q.token_bits() {
        buf.push(bits.bits());
    }
    for group in q.key_groups().iter().chain(q.value_groups()) {
        encode_group(group, &mut buf);
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

/// Groups carry no per-group header on the wire: their width and length
/// are derived from the shape and bit-width vector during decode.
fn encode_group(group: &QuantizedGroup, buf: &mut Vec<u8>) {
    match &group.data {
        GroupData::Raw(values) => {
            for v in values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        GroupData::Packed(bytes) => {
            buf.extend_from_slice(&group.scale.to_le_bytes());
            buf.extend_from_slice(&group.zero_point.to_le_bytes());
            buf.extend_from_slice(bytes);
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, count: usize, section: &'static str) -> Result<&'a [u8], CardError> {
        if self.bytes.len() - self.at < count {
            return Err(CardError::Truncated {
                section,
                needed: (count - (self.bytes.len() - self.at)) as u64,
            });
        }
        let slice = &self.bytes[self.at..self.at + count];
        self.at += count;
        Ok(slice)
    }

    fn take_u8(&mut self, section: &'static str) -> Result<u8, CardError> {
        Ok(self.take(1, section)?[0])
    }

    fn take_u32(&mut self, section: &'static str) -> Result<u32, CardError> {
        Ok(u32::from_le_bytes(self.take(4, section)?.try_into().unwrap()))
    }

    fn take_f32(&mut self, section: &'static str) -> Result<f32, CardError> {
        Ok(f32::from_le_bytes(self.take(4, section)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.at
    }
}

fn take_id(cursor: &mut Cursor, section: &'static str) -> Result<String, CardError> {
    let len = cursor.take_u8(section)? as usize;
    if len == 0 {
        return Err(CardError::Malformed(format!("{section} is empty")));
    }
    let bytes = cursor.take(len, section)?;
    String::from_utf8(bytes.to_vec())
        .map_err(|_| CardError::Malformed(format!("{section} is not valid UTF-8")))
}

/// Deserialize and fully validate a card.
///
/// Every accepted byte string is canonical: re-encoding the result
/// reproduces the input exactly, and the payload dequantizes cleanly.
pub fn decode_card(bytes: &[u8]) -> Result<CacheCard, CardError> {
    let mut cursor = Cursor { bytes, at: 0 };
    let magic = cursor.take(4, "magic")?;
    if magic != QKVC_MAGIC {
        return Err(CardError::BadMagic {
            found: magic.try_into().unwrap(),
            expected: *QKVC_MAGIC,
        });
    }
    let version = u16::from_le_bytes(cursor.take(2, "version")?.try_into().unwrap());
    if version != QKVC_VERSION {
        return Err(CardError::UnsupportedVersion(version));
    }
    // Integrity before structure: the CRC trailer is checked before any
    // body parsing so corruption anywhere surfaces as CrcMismatch.
    if cursor.remaining() < 2 + 4 {
        return Err(CardError::Truncated {
            section: "checksum",
            needed: (2 + 4 - cursor.remaining()) as u64,
        });
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CardError::CrcMismatch { stored, computed });
    }

    let reserved = u16::from_le_bytes(cursor.take(2, "reserved")?.try_into().unwrap());
    if reserved != 0 {
        return Err(CardError::Malformed(format!(
            "reserved field is {reserved}, expected 0"
        )));
    }
    let model_id = take_id(&mut cursor, "model id")?;
    let sender_id = take_id(&mut cursor, "sender id")?;
    let position_offset =
        i32::from_le_bytes(cursor.take(4, "position offset")?.try_into().unwrap());
    let layers = cursor.take_u32("dims")? as usize;
    let heads = cursor.take_u32("dims")? as usize;
    let tokens = cursor.take_u32("dims")? as usize;
    let head_dim = cursor.take_u32("dims")? as usize;
    if layers == 0 || heads == 0 || tokens == 0 || head_dim == 0 {
        return Err(CardError::Malformed(
            "all dimensions must be at least 1".into(),
        ));
    }
    let elements = layers as u128 * heads as u128 * tokens as u128 * head_dim as u128;
    if elements > MAX_TENSOR_ELEMENTS as u128 {
        return Err(CardError::Malformed(format!(
            "shape implies {elements} elements, over the {MAX_TENSOR_ELEMENTS} cap"
        )));
    }

    let mut token_bits = Vec::with_capacity(tokens);
    for raw in cursor.take(tokens, "bit-width vector")? {
        token_bits.push(BitWidth::from_bits(*raw).ok_or_else(|| {
            CardError::Malformed(format!("token bit width {raw} is not one of 2/4/8/16"))
        })?);
    }

    // Group structure is fully derived; read exactly the implied bytes.
    let expected = crate::quantizer::expected_group_layout(layers, heads, tokens, head_dim, &token_bits);
    let mut key_groups = Vec::with_capacity(expected.key_groups.len());
    let mut value_groups = Vec::with_capacity(expected.value_groups.len());
    for (dst, section, spec) in [
        (&mut key_groups, "key groups", &expected.key_groups),
        (&mut value_groups, "value groups", &expected.value_groups),
    ] {
        for &(bits, len) in spec.iter() {
            dst.push(decode_group(&mut cursor, bits, len, section)?);
        }
    }
    if cursor.remaining() != 4 {
        return Err(CardError::Malformed(format!(
            "{} trailing bytes after the payload",
            cursor.remaining() - 4
        )));
    }

    let payload = QuantizedKV::from_parts(
        layers,
        heads,
        tokens,
        head_dim,
        token_bits,
        key_groups,
        value_groups,
    )?;
    // Reject non-canonical padding bits up front; accepted cards always
    // dequantize.
    for group in payload.key_groups().iter().chain(payload.value_groups()) {
        if let GroupData::Packed(bytes) = &group.data {
            crate::quantizer::unpack_codes(bytes, group.bits, group.len)?;
        }
    }
    let stats = compute_stats(&payload);
    Ok(CacheCard {
        header: CardHeader {
            version,
            model_id,
            sender_id,
            position_offset,
        },
        payload,
        stats,
    })
}

fn decode_group(
    cursor: &mut Cursor,
    bits: BitWidth,
    len: usize,
    section: &'static str,
) -> Result<QuantizedGroup, CardError> {
    if bits == BitWidth::B16 {
        let bytes = cursor.take(4 * len, section)?;
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        return Ok(QuantizedGroup {
            bits,
            scale: 0.0,
            zero_point: 0.0,
            len,
            data: GroupData::Raw(values),
        });
    }
    let scale = cursor.take_f32(section)?;
    let zero_point = cursor.take_f32(section)?;
    let packed = cursor
        .take(crate::quantizer::packed_len(len, bits), section)?
        .to_vec();
    Ok(QuantizedGroup {
        bits,
        scale,
        zero_point,
        len,
        data: GroupData::Packed(packed),
    })
}

/// Write a card's canonical encoding to a file. Returns the byte count.
pub fn store_card<P: AsRef<Path>>(card: &CacheCard, path: P) -> Result<u64, CardError> {
    let bytes = encode_card(card);
    let mut file = std::fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(bytes.len() as u64)
}

/// Read and decode a card file.
pub fn load_card<P: AsRef<Path>>(path: P) -> Result<CacheCard, CardError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_card(&bytes)
}
