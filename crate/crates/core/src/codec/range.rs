//! Carry-aware byte-oriented range coder.
//!
//! The archive format depends on these exact constants: a 32-bit range
//! register renormalized one byte at a time whenever it drops below 2^24,
//! and a 64-bit low accumulator whose pending carries are resolved through
//! a cache byte plus a run counter of deferred 0xFF bytes. Pure integer
//! arithmetic, so encoded bytes are identical on every platform.
//!
//! The encoder's first output byte is always the initial zero cache; the
//! decoder skips it and then primes its 32-bit code register with the next
//! four bytes. Because encoder and decoder apply the same sequence of
//! range updates, the decoder consumes exactly the bytes the encoder
//! emitted: `finish` pushes five closing bytes and provably leaves nothing
//! pending.

use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Renormalization threshold. The range register never goes below this
/// between symbols, which caps the total frequency a model may use.
pub const RANGE_TOP: u32 = 1 << 24;

/// Streams symbols into bytes. Call `encode` once per symbol with that
/// symbol's cumulative slice of the frequency table, then `finish`.
#[derive(Debug)]
pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    /// Deferred bytes awaiting carry resolution: the cache byte plus a run
    /// of 0xFFs. Starts at 1 to account for the initial zero cache.
    cache_size: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> RangeEncoder {
        RangeEncoder {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
        }
    }

    /// Narrow to the sub-interval [cum, cum + freq) out of `total`.
    /// Caller guarantees freq > 0, cum + freq <= total, total < 2^24.
    pub fn encode(&mut self, cum: u32, freq: u32, total: u32) {
        debug_assert!(freq > 0 && total < RANGE_TOP);
        debug_assert!(cum.checked_add(freq).is_some_and(|c| c <= total));
        let r = self.range / total;
        self.low += u64::from(cum) * u64::from(r);
        self.range = r * freq;
        while self.range < RANGE_TOP {
            self.shift_low();
            self.range <<= 8;
        }
    }

    fn shift_low(&mut self) {
        let low32 = self.low as u32;
        // Resolve when the top byte can no longer be bumped by a later
        // carry: either it is below 0xFF or a carry already arrived.
        if low32 < 0xFF00_0000 || self.low >> 32 != 0 {
            let carry = (self.low >> 32) as u8;
            self.out.push(self.cache.wrapping_add(carry));
            for _ in 1..self.cache_size {
                self.out.push(0xFFu8.wrapping_add(carry));
            }
            self.cache = (low32 >> 24) as u8;
            self.cache_size = 0;
        }
        self.cache_size += 1;
        // The dropped top byte is in `cache` (resolved) or counted as a
        // deferred 0xFF (cache_size), so the left shift loses nothing.
        self.low = u64::from(low32 << 8);
    }

    /// Flush the final interval. The fifth shift always resolves (the low
    /// register has at most four meaningful bytes and no carry can arrive
    /// after the last `encode`), so no bytes stay pending.
    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

/// Mirror of `RangeEncoder` over a byte slice. Reading past the end means
/// the stream was truncated; valid streams consume their bytes exactly.
#[derive(Debug)]
pub struct RangeDecoder<'a> {
    input: &'a [u8],
    pos: usize,
    range: u32,
    code: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a [u8]) -> Result<RangeDecoder<'a>> {
        let mut dec = RangeDecoder {
            input,
            pos: 0,
            range: u32::MAX,
            code: 0,
        };
        dec.next_byte()?; // the encoder's initial zero cache
        for _ in 0..4 {
            dec.code = dec.code << 8 | u32::from(dec.next_byte()?);
        }
        Ok(dec)
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = self
            .input
            .get(self.pos)
            .copied()
            .ok_or(Error::TruncatedStream)?;
        self.pos += 1;
        Ok(b)
    }

    /// Cumulative-frequency value of the next symbol under `total`. The
    /// clamp keeps corrupt streams inside the table; checksums catch them.
    pub fn decode_freq(&self, total: u32) -> u32 {
        let r = self.range / total;
        (self.code / r).min(total - 1)
    }

    /// Consume the symbol whose slice is [cum, cum + freq); must mirror the
    /// `encode` call exactly, with the same `total`.
    pub fn decode_update(&mut self, cum: u32, freq: u32, total: u32) -> Result<()> {
        let r = self.range / total;
        self.code -= cum * r;
        self.range = r * freq;
        while self.range < RANGE_TOP {
            self.code = self.code << 8 | u32::from(self.next_byte()?);
            self.range <<= 8;
        }
        Ok(())
    }

    /// Bytes consumed so far; equals the payload length after the last
    /// symbol of a well-formed stream.
    pub fn consumed(&self) -> usize {
        self.pos
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Static (non-adaptive) coding against hand-built tables exercises the
    /// coder alone; cum/freq pairs mirror on both sides by construction.
    fn round_trip_static(symbols: &[u32], freqs: &[u32]) {
        let total: u32 = freqs.iter().sum();
        let cums: Vec<u32> = freqs
            .iter()
            .scan(0, |acc, &f| {
                let c = *acc;
                *acc += f;
                Some(c)
            })
            .collect();
        let mut enc = RangeEncoder::new();
        for &s in symbols {
            enc.encode(cums[s as usize], freqs[s as usize], total);
        }
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes).unwrap();
        for &s in symbols {
            let dv = dec.decode_freq(total);
            let sym = match cums.binary_search(&dv) {
                Ok(i) => {
                    // dv on a cumulative edge: skip zero-frequency entries.
                    let mut i = i;
                    while freqs[i] == 0 {
                        i += 1;
                    }
                    i
                }
                Err(i) => i - 1,
            };
            assert_eq!(sym as u32, s);
            dec.decode_update(cums[sym], freqs[sym], total).unwrap();
        }
        assert_eq!(dec.consumed(), bytes.len(), "exact byte consumption");
    }

    #[test]
    fn static_tables_round_trip() {
        round_trip_static(&[0, 1, 2, 1, 0, 2, 2, 1], &[1, 1, 1]);
        round_trip_static(&[0; 100], &[1, 65535]);
        round_trip_static(&[1; 100], &[65535, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let freqs: Vec<u32> = (0..50).map(|_| rng.gen_range(1..1000)).collect();
        let symbols: Vec<u32> = (0..20_000).map(|_| rng.gen_range(0..50)).collect();
        round_trip_static(&symbols, &freqs);
    }

    /// Skewed tables drive `low` through long 0xFF runs, forcing deferred
    /// carries to resolve in both directions.
    #[test]
    fn carry_chains_survive_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for trial in 0..50 {
            let hot = rng.gen_range(0..4u32);
            let symbols: Vec<u32> = (0..3000)
                .map(|_| {
                    if rng.gen_range(0..100) < 97 {
                        hot
                    } else {
                        rng.gen_range(0..4u32)
                    }
                })
                .collect();
            let mut freqs = [1u32; 4];
            freqs[hot as usize] = 60000 + trial; // near-full intervals
            round_trip_static(&symbols, &freqs);
        }
    }

    #[test]
    fn empty_encode_flushes_five_bytes() {
        let enc = RangeEncoder::new();
        let bytes = enc.finish();
        assert_eq!(bytes, alloc::vec![0, 0, 0, 0, 0]);
        // Decoder init consumes exactly those five bytes.
        let dec = RangeDecoder::new(&bytes).unwrap();
        assert_eq!(dec.consumed(), 5);
    }

    #[test]
    fn truncated_input_is_rejected() {
        assert_eq!(
            RangeDecoder::new(&[0, 1, 2]).unwrap_err(),
            crate::error::Error::TruncatedStream
        );
    }
}
