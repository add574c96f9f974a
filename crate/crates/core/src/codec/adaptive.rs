//! Adaptive order-0 frequency model.
//!
//! Counts start at one per symbol, the coded symbol's count is bumped by a
//! fixed increment after every encode/decode, and all counts are halved
//! (rounding up, so none hits zero) once the total crosses a cap. Encoder
//! and decoder run the identical update schedule, so their tables stay in
//! lockstep without any side information. Cumulative sums live in a Fenwick
//! tree: lookup, update, and inverse lookup are all O(log n).
//!
//! These constants are part of the archive format.

use alloc::vec;
use alloc::vec::Vec;

use crate::codec::range::{RangeDecoder, RangeEncoder};
use crate::error::{Error, Result};

/// Hard ceiling on alphabet size. Covers the largest model the codec ever
/// builds (signed rank differences over the maximum vocabulary).
pub const MAX_ALPHABET: u32 = 1 << 18;

/// Count added to a symbol each time it is coded.
pub const COUNT_INCREMENT: u32 = 32;

/// Totals are capped at max(2^16, 8 * alphabet): large alphabets get
/// headroom so rescaling stays rare, and the total always fits the range
/// coder's 2^24 renormalization floor.
pub const BASE_TOTAL_CAP: u32 = 1 << 16;

#[derive(Debug, Clone)]
pub struct AdaptiveModel {
    /// One-based Fenwick tree over per-symbol counts.
    tree: Vec<u32>,
    alphabet: u32,
    total: u32,
    cap: u32,
}

impl AdaptiveModel {
    pub fn new(alphabet: u32) -> Result<AdaptiveModel> {
        if alphabet < 2 || alphabet > MAX_ALPHABET {
            return Err(Error::BadAlphabet {
                alphabet,
                max: MAX_ALPHABET,
            });
        }
        let n = alphabet as usize;
        // Fenwick node i of an all-ones array holds its subtree size.
        let mut tree = vec![0u32; n + 1];
        for (i, node) in tree.iter_mut().enumerate().skip(1) {
            *node = (i & i.wrapping_neg()) as u32;
        }
        Ok(AdaptiveModel {
            tree,
            alphabet,
            total: alphabet,
            cap: BASE_TOTAL_CAP.max(alphabet * 8),
        })
    }

    pub fn alphabet(&self) -> u32 {
        self.alphabet
    }

    pub fn total(&self) -> u32 {
        self.total
    }

    /// Sum of counts of symbols below `i`.
    fn prefix(&self, mut i: usize) -> u32 {
        let mut sum = 0;
        while i > 0 {
            sum += self.tree[i];
            i -= i & i.wrapping_neg();
        }
        sum
    }

    fn add(&mut self, sym: u32, delta: u32) {
        let mut i = sym as usize + 1;
        while i < self.tree.len() {
            self.tree[i] += delta;
            i += i & i.wrapping_neg();
        }
    }

    /// (cumulative, frequency) of `sym`.
    pub fn lookup(&self, sym: u32) -> (u32, u32) {
        let below = self.prefix(sym as usize);
        (below, self.prefix(sym as usize + 1) - below)
    }

    /// Inverse lookup: the symbol whose cumulative slice contains `dv`,
    /// plus that slice. Standard Fenwick descent from the highest power of
    /// two, keeping the running prefix at most `dv`.
    pub fn find(&self, dv: u32) -> (u32, u32, u32) {
        debug_assert!(dv < self.total);
        let n = self.alphabet as usize;
        let mut node = 0usize;
        let mut rem = dv;
        let mut half = 1usize << (31 - (n as u32).leading_zeros());
        while half > 0 {
            let next = node + half;
            if next <= n && self.tree[next] <= rem {
                node = next;
                rem -= self.tree[next];
            }
            half >>= 1;
        }
        // node is the largest index with prefix(node) <= dv; counts stay
        // positive and dv < total, so node is a valid symbol.
        let cum = dv - rem;
        let freq = self.prefix(node + 1) - cum;
        (node as u32, cum, freq)
    }

    /// Record one coded occurrence, rescaling at the cap.
    fn update(&mut self, sym: u32) {
        self.add(sym, COUNT_INCREMENT);
        self.total += COUNT_INCREMENT;
        if self.total > self.cap {
            self.rescale();
        }
    }

    fn rescale(&mut self) {
        let n = self.alphabet as usize;
        let mut counts = Vec::with_capacity(n);
        let mut prev = 0;
        for i in 1..=n {
            let cum = self.prefix(i);
            counts.push((cum - prev + 1) / 2);
            prev = cum;
        }
        // Rebuild in place: start from raw counts, then push each node's
        // sum into its parent, lowest first.
        for (i, node) in self.tree.iter_mut().enumerate().skip(1) {
            *node = counts[i - 1];
        }
        for i in 1..=n {
            let parent = i + (i & i.wrapping_neg());
            if parent <= n {
                let v = self.tree[i];
                self.tree[parent] += v;
            }
        }
        self.total = counts.iter().sum();
    }

    /// Code `sym` and adapt. The model supplies the slice, the coder the
    /// bytes.
    pub fn encode_symbol(&mut self, enc: &mut RangeEncoder, sym: u32) -> Result<()> {
        if sym >= self.alphabet {
            return Err(Error::SymbolOutOfAlphabet {
                symbol: sym,
                alphabet: self.alphabet,
            });
        }
        let (cum, freq) = self.lookup(sym);
        enc.encode(cum, freq, self.total);
        self.update(sym);
        Ok(())
    }

    /// Decode one symbol and adapt; exact mirror of `encode_symbol`.
    pub fn decode_symbol(&mut self, dec: &mut RangeDecoder) -> Result<u32> {
        let dv = dec.decode_freq(self.total);
        let (sym, cum, freq) = self.find(dv);
        dec.decode_update(cum, freq, self.total)?;
        self.update(sym);
        Ok(sym)
    }
}
