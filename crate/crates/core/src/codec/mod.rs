//! Token codec: rank/correction/residual stream coding, temporal delta
//! transform, adaptive range coding, and the bit-exact archive container.
//!
//! Correctness here never depends on predictor quality: any deterministic
//! predictor yields a token-exact round-trip, a good one just makes the
//! rank stream cheap to code.

mod adaptive;
mod archive;
mod range;
mod streams;

pub use adaptive::{AdaptiveModel, BASE_TOTAL_CAP, COUNT_INCREMENT, MAX_ALPHABET};
pub use archive::{
    bitrate, compress, compression_ratio, decompress, decompress_tokens, Archive, ArchiveHeader,
    PredictorInfo, QuantizerSpec, SectionSizes, FORMAT_VERSION, HEADER_LEN, MAGIC,
};
pub use range::{RangeDecoder, RangeEncoder, RANGE_TOP};
pub use streams::{delta_decode_temporal, delta_encode_temporal, Correction};

use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Adaptive order-0 coding of one symbol stream. The empty stream encodes
/// to the empty payload.
pub fn entropy_encode(symbols: &[u32], alphabet: u32) -> Result<Vec<u8>> {
    if symbols.is_empty() {
        AdaptiveModel::new(alphabet)?; // still reject bad alphabets
        return Ok(Vec::new());
    }
    let mut model = AdaptiveModel::new(alphabet)?;
    let mut enc = RangeEncoder::new();
    for &s in symbols {
        model.encode_symbol(&mut enc, s)?;
    }
    Ok(enc.finish())
}

/// Exact inverse of `entropy_encode` given the symbol count. Rejects
/// truncated and trailing bytes.
pub fn entropy_decode(bytes: &[u8], count: usize, alphabet: u32) -> Result<Vec<u32>> {
    if count == 0 {
        AdaptiveModel::new(alphabet)?;
        if !bytes.is_empty() {
            return Err(Error::CorruptStream("nonempty payload for zero symbols"));
        }
        return Ok(Vec::new());
    }
    let mut model = AdaptiveModel::new(alphabet)?;
    let mut dec = RangeDecoder::new(bytes)?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        out.push(model.decode_symbol(&mut dec)?);
    }
    if dec.consumed() != bytes.len() {
        return Err(Error::CorruptStream("trailing bytes after last symbol"));
    }
    Ok(out)
}
