//! Symbol-stream transforms and the per-section payload coders.
//!
//! Three entropy-coded sections make up an archive's variable part:
//!
//! * rank stream: permuted to (x, y)-major, t-minor order and first-order
//!   differenced within each temporal run, then coded with one model for
//!   run-opening absolute symbols and another for signed differences;
//! * correction set: position gaps as varints through a byte model,
//!   interleaved with true tokens through a vocabulary model;
//! * residual stream: zigzagged varints through a byte model.
//!
//! Every coder here is deterministic and consumes its bytes exactly.

use alloc::vec;
use alloc::vec::Vec;

use crate::codec::adaptive::AdaptiveModel;
use crate::codec::range::{RangeDecoder, RangeEncoder};
use crate::error::{Error, Result};
use crate::field::Dims;
use crate::layout::LayoutKind;

/// One escape entry: the stream position that escaped and the true token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Correction {
    pub position: u64,
    pub token: u32,
}

// --- varint / zigzag -------------------------------------------------------

pub(crate) fn zigzag(v: i64) -> u64 {
    ((v as u64) << 1) ^ ((v >> 63) as u64)
}

pub(crate) fn unzigzag(u: u64) -> i64 {
    ((u >> 1) as i64) ^ -((u & 1) as i64)
}

/// LEB128 through an adaptive byte model: seven payload bits per byte,
/// high bit flags continuation. Self-terminating, so the decoder needs no
/// length.
pub(crate) fn write_varint(
    enc: &mut RangeEncoder,
    bytes: &mut AdaptiveModel,
    mut v: u64,
) -> Result<()> {
    loop {
        let b = (v & 0x7F) as u32;
        v >>= 7;
        if v == 0 {
            return bytes.encode_symbol(enc, b);
        }
        bytes.encode_symbol(enc, b | 0x80)?;
    }
}

pub(crate) fn read_varint(dec: &mut RangeDecoder, bytes: &mut AdaptiveModel) -> Result<u64> {
    let mut v = 0u64;
    let mut shift = 0u32;
    loop {
        let b = bytes.decode_symbol(dec)?;
        if shift == 63 && b & 0x7F > 1 || shift > 63 {
            return Err(Error::CorruptStream("varint overflows 64 bits"));
        }
        v |= u64::from(b & 0x7F) << shift;
        if b & 0x80 == 0 {
            return Ok(v);
        }
        shift += 7;
    }
}

// --- fixed-width bit packing (prefix section) ------------------------------

/// Bits needed for values in [0, vocab): the width of vocab - 1.
pub(crate) fn token_bits(vocab: u32) -> u32 {
    debug_assert!(vocab >= 2);
    32 - (vocab - 1).leading_zeros()
}

/// MSB-first fixed-width packing; the final partial byte is zero-padded.
pub(crate) fn pack_bits(values: &[u32], width: u32) -> Vec<u8> {
    debug_assert!((1..=32).contains(&width));
    let mut out = Vec::with_capacity((values.len() * width as usize).div_ceil(8));
    let mut acc = 0u64;
    let mut nbits = 0u32;
    for &v in values {
        debug_assert!(u64::from(v) < 1u64 << width);
        acc = acc << width | u64::from(v);
        nbits += width;
        while nbits >= 8 {
            nbits -= 8;
            out.push((acc >> nbits) as u8);
        }
    }
    if nbits > 0 {
        out.push((acc << (8 - nbits)) as u8);
    }
    out
}

pub(crate) fn unpack_bits(bytes: &[u8], count: usize, width: u32) -> Result<Vec<u32>> {
    debug_assert!((1..=32).contains(&width));
    if bytes.len() != (count * width as usize).div_ceil(8) {
        return Err(Error::CorruptStream("packed section length mismatch"));
    }
    let mut out = Vec::with_capacity(count);
    let mut acc = 0u64;
    let mut nbits = 0u32;
    let mut iter = bytes.iter();
    for _ in 0..count {
        while nbits < width {
            acc = acc << 8 | u64::from(*iter.next().ok_or(Error::TruncatedStream)?);
            nbits += 8;
        }
        nbits -= width;
        out.push((acc >> nbits & ((1u64 << width) - 1)) as u32);
    }
    if acc & ((1u64 << nbits) - 1) != 0 {
        return Err(Error::CorruptStream("nonzero padding bits"));
    }
    Ok(out)
}

// --- temporal delta --------------------------------------------------------

/// Lengths of the nonempty temporal runs, in run order. Run `s` visits the
/// stream positions t * M * N + s for increasing t, keeping only positions
/// at or past the prefix boundary; runs follow the layout's within-timestep
/// spatial enumeration, so symbols of one grid cell are consecutive.
fn run_lengths(dims: Dims, prefix: u64) -> Vec<u64> {
    let mn = dims.spatial();
    let t_dim = u64::from(dims.t);
    let mut lens = Vec::with_capacity(mn as usize);
    for s in 0..mn {
        let t0 = if s >= prefix {
            0
        } else {
            (prefix - s).div_ceil(mn)
        };
        if t0 < t_dim {
            lens.push(t_dim - t0);
        }
    }
    lens
}

/// Stream indices (position - prefix) in run-traversal order.
fn temporal_order(dims: Dims, prefix: u64) -> Vec<u64> {
    let mn = dims.spatial();
    let t_dim = u64::from(dims.t);
    let mut order = Vec::with_capacity((dims.len() - prefix) as usize);
    for s in 0..mn {
        let t0 = if s >= prefix {
            0
        } else {
            (prefix - s).div_ceil(mn)
        };
        for t in t0..t_dim {
            order.push(t * mn + s - prefix);
        }
    }
    order
}

fn check_stream_len(len: usize, dims: Dims) -> Result<u64> {
    let total = dims.len();
    if len as u64 > total {
        return Err(Error::SampleCountMismatch {
            expected: total,
            actual: len as u64,
        });
    }
    Ok(total - len as u64) // implied prefix length
}

/// Permute the rank stream to (x, y)-major, t-minor order and difference
/// consecutive symbols within each temporal run. The first symbol of a run
/// stays absolute (the prefix cuts into the early timesteps unevenly, so
/// runs have no common start). The layout tags which spatial enumeration
/// the stream is already in; the run structure itself only needs dims.
pub fn delta_encode_temporal(
    ranks: &[u32],
    dims: Dims,
    _layout: LayoutKind,
) -> Result<Vec<i32>> {
    let prefix = check_stream_len(ranks.len(), dims)?;
    let mut out = Vec::with_capacity(ranks.len());
    let mut cursor = 0usize;
    let order = temporal_order(dims, prefix);
    for len in run_lengths(dims, prefix) {
        let mut prev: i64 = 0;
        for i in 0..len {
            let r = i64::from(ranks[order[cursor] as usize]);
            out.push(if i == 0 { r as i32 } else { (r - prev) as i32 });
            prev = r;
            cursor += 1;
        }
    }
    Ok(out)
}

/// Exact inverse of `delta_encode_temporal`.
pub fn delta_decode_temporal(deltas: &[i32], dims: Dims, _layout: LayoutKind) -> Result<Vec<u32>> {
    let prefix = check_stream_len(deltas.len(), dims)?;
    let mut ranks = vec![0u32; deltas.len()];
    let mut cursor = 0usize;
    let order = temporal_order(dims, prefix);
    for len in run_lengths(dims, prefix) {
        let mut prev: i64 = 0;
        for i in 0..len {
            let v = if i == 0 {
                i64::from(deltas[cursor])
            } else {
                prev + i64::from(deltas[cursor])
            };
            if v < 0 || v > i64::from(u32::MAX) {
                return Err(Error::CorruptStream("rank delta leaves symbol range"));
            }
            ranks[order[cursor] as usize] = v as u32;
            prev = v;
            cursor += 1;
        }
    }
    Ok(ranks)
}

// --- section payloads ------------------------------------------------------

/// Rank section: delta symbols routed to two models. Run-opening symbols
/// are absolute over {0..k}; the rest are differences over {-k..k}, stored
/// shifted by +k.
pub(crate) fn encode_rank_payload(
    ranks: &[u32],
    k: u32,
    dims: Dims,
    layout: LayoutKind,
) -> Result<Vec<u8>> {
    if let Some(&bad) = ranks.iter().find(|&&r| r > k) {
        return Err(Error::SymbolOutOfAlphabet {
            symbol: bad,
            alphabet: k + 1,
        });
    }
    if ranks.is_empty() {
        return Ok(Vec::new());
    }
    let prefix = check_stream_len(ranks.len(), dims)?;
    let deltas = delta_encode_temporal(ranks, dims, layout)?;
    let mut opening = AdaptiveModel::new(k + 1)?;
    let mut diffs = AdaptiveModel::new(2 * k + 1)?;
    let mut enc = RangeEncoder::new();
    let mut cursor = 0usize;
    for len in run_lengths(dims, prefix) {
        for i in 0..len {
            let d = deltas[cursor];
            if i == 0 {
                opening.encode_symbol(&mut enc, d as u32)?;
            } else {
                diffs.encode_symbol(&mut enc, (d + k as i32) as u32)?;
            }
            cursor += 1;
        }
    }
    Ok(enc.finish())
}

pub(crate) fn decode_rank_payload(
    payload: &[u8],
    count: u64,
    k: u32,
    dims: Dims,
    layout: LayoutKind,
) -> Result<Vec<u32>> {
    if count == 0 {
        if !payload.is_empty() {
            return Err(Error::CorruptStream("nonempty payload for zero symbols"));
        }
        return Ok(Vec::new());
    }
    let prefix = check_stream_len(count as usize, dims)?;
    let mut opening = AdaptiveModel::new(k + 1)?;
    let mut diffs = AdaptiveModel::new(2 * k + 1)?;
    let mut dec = RangeDecoder::new(payload)?;
    let mut deltas = Vec::with_capacity(count as usize);
    for len in run_lengths(dims, prefix) {
        for i in 0..len {
            if i == 0 {
                deltas.push(opening.decode_symbol(&mut dec)? as i32);
            } else {
                deltas.push(diffs.decode_symbol(&mut dec)? as i32 - k as i32);
            }
        }
    }
    if dec.consumed() != payload.len() {
        return Err(Error::CorruptStream("rank payload has trailing bytes"));
    }
    let ranks = delta_decode_temporal(&deltas, dims, layout)?;
    if ranks.iter().any(|&r| r > k) {
        return Err(Error::CorruptStream("rank symbol exceeds top-k"));
    }
    Ok(ranks)
}

/// Correction section: strictly increasing positions stored as gaps (the
/// first relative to the prefix boundary), each followed by its token.
pub(crate) fn encode_corrections(
    corrections: &[Correction],
    prefix: u64,
    vocab: u32,
) -> Result<Vec<u8>> {
    if corrections.is_empty() {
        return Ok(Vec::new());
    }
    let mut bytes = AdaptiveModel::new(256)?;
    let mut tokens = AdaptiveModel::new(vocab)?;
    let mut enc = RangeEncoder::new();
    let mut prev = prefix;
    for (i, c) in corrections.iter().enumerate() {
        if c.position < prev || (i > 0 && c.position == prev) {
            return Err(Error::Internal("correction positions must increase"));
        }
        write_varint(&mut enc, &mut bytes, c.position - prev)?;
        tokens.encode_symbol(&mut enc, c.token)?;
        prev = c.position;
    }
    Ok(enc.finish())
}

pub(crate) fn decode_corrections(
    payload: &[u8],
    count: u64,
    prefix: u64,
    len: u64,
    vocab: u32,
) -> Result<Vec<Correction>> {
    if count == 0 {
        if !payload.is_empty() {
            return Err(Error::CorruptStream("nonempty payload for zero symbols"));
        }
        return Ok(Vec::new());
    }
    let mut bytes = AdaptiveModel::new(256)?;
    let mut tokens = AdaptiveModel::new(vocab)?;
    let mut dec = RangeDecoder::new(payload)?;
    let mut out = Vec::with_capacity(count as usize);
    let mut prev = prefix;
    for i in 0..count {
        let gap = read_varint(&mut dec, &mut bytes)?;
        let position = prev
            .checked_add(gap)
            .ok_or(Error::CorruptStream("correction position overflows"))?;
        if i > 0 && gap == 0 {
            return Err(Error::CorruptStream("correction positions must increase"));
        }
        if position >= len {
            return Err(Error::CorruptStream("correction position out of range"));
        }
        let token = tokens.decode_symbol(&mut dec)?;
        out.push(Correction { position, token });
        prev = position;
    }
    if dec.consumed() != payload.len() {
        return Err(Error::CorruptStream("correction payload has trailing bytes"));
    }
    Ok(out)
}

/// Residual section: signed grid steps, zigzagged, as varints through one
/// byte model.
pub(crate) fn encode_residuals(residuals: &[i64]) -> Result<Vec<u8>> {
    if residuals.is_empty() {
        return Ok(Vec::new());
    }
    let mut bytes = AdaptiveModel::new(256)?;
    let mut enc = RangeEncoder::new();
    for &q in residuals {
        write_varint(&mut enc, &mut bytes, zigzag(q))?;
    }
    Ok(enc.finish())
}

pub(crate) fn decode_residuals(payload: &[u8], count: u64) -> Result<Vec<i64>> {
    if count == 0 {
        if !payload.is_empty() {
            return Err(Error::CorruptStream("nonempty payload for zero symbols"));
        }
        return Ok(Vec::new());
    }
    let mut bytes = AdaptiveModel::new(256)?;
    let mut dec = RangeDecoder::new(payload)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        out.push(unzigzag(read_varint(&mut dec, &mut bytes)?));
    }
    if dec.consumed() != payload.len() {
        return Err(Error::CorruptStream("residual payload has trailing bytes"));
    }
    Ok(out)
}
