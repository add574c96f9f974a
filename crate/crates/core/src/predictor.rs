//! The next-token predictor contract shared by the transformer and the
//! baselines. Ranking and tie-breaking live here, in one place, so the
//! encoder and decoder produce identical top-k lists for any predictor.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::layout::Coord;

/// A fixed window of C preceding tokens plus the coordinates of those C
/// positions and of the target position (coords[C] is the target).
#[derive(Debug, Clone, Copy)]
pub struct Context<'a> {
    pub tokens: &'a [u32],
    pub coords: &'a [Coord],
}

impl<'a> Context<'a> {
    pub fn new(tokens: &'a [u32], coords: &'a [Coord]) -> Result<Context<'a>> {
        if coords.len() != tokens.len() + 1 {
            return Err(Error::BadContextCoords);
        }
        Ok(Context { tokens, coords })
    }

    pub fn target_coord(&self) -> Coord {
        self.coords[self.coords.len() - 1]
    }
}

/// The k highest-scoring tokens, highest first; equal scores are ordered by
/// ascending token ID.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopKResult {
    pub ranked: Vec<u32>,
}

/// Scoring interface. Implementations fill `scores` (length V) with any
/// monotone preference values; selection and tie-breaking are shared so the
/// ranking is a pure function of the scores.
pub trait Predictor {
    fn vocab(&self) -> u32;
    fn context_len(&self) -> usize;
    /// Write a score per token into `out` (len == vocab). Must be
    /// deterministic: same context, same scores, bit for bit.
    fn score(&self, ctx: &Context, out: &mut [f64]) -> Result<()>;
    /// Identification byte written into archives. Custom implementations
    /// default to External: such archives decode only when the caller
    /// supplies the same predictor again out of band.
    fn kind(&self) -> PredictorKind {
        PredictorKind::External
    }
}

/// Rank the k best tokens under the predictor's scores. Deterministic for
/// any score vector: a single pass keeps candidates ordered by
/// (score descending, token ascending).
pub fn predict_topk(predictor: &dyn Predictor, ctx: &Context, k: usize) -> Result<TopKResult> {
    let vocab = predictor.vocab();
    if k > vocab as usize {
        return Err(Error::BadTopK { k, vocab });
    }
    if ctx.tokens.len() != predictor.context_len() {
        return Err(Error::BadContextLen {
            expected: predictor.context_len(),
            actual: ctx.tokens.len(),
        });
    }
    if ctx.coords.len() != ctx.tokens.len() + 1 {
        return Err(Error::BadContextCoords);
    }
    for &t in ctx.tokens {
        if t >= vocab {
            return Err(Error::TokenOutOfRange { token: t, vocab });
        }
    }
    let mut scores = alloc::vec![0.0f64; vocab as usize];
    predictor.score(ctx, &mut scores)?;
    Ok(TopKResult {
        ranked: select_topk(&scores, k),
    })
}

/// (score desc, token asc) selection. Insertion into a small sorted buffer:
/// O(V*k), no float total-order subtleties since scores are finite.
fn select_topk(scores: &[f64], k: usize) -> Vec<u32> {
    let mut best: Vec<(f64, u32)> = Vec::with_capacity(k + 1);
    for (token, &s) in scores.iter().enumerate() {
        let token = token as u32;
        if best.len() == k {
            let (tail_s, tail_t) = best[k - 1];
            if !(s > tail_s || (s == tail_s && token < tail_t)) {
                continue;
            }
        }
        let pos = best.partition_point(|&(bs, bt)| bs > s || (bs == s && bt < token));
        best.insert(pos, (s, token));
        best.truncate(k);
    }
    best.into_iter().map(|(_, t)| t).collect()
}

/// How a predictor is identified in the archive header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictorKind {
    Transformer,
    LastValue,
    Frequency,
    Uniform,
    /// Supplied out of band by the caller; the archive stores no way to
    /// rebuild it. Refused by the CLI, used by tests and library callers.
    External,
}

impl PredictorKind {
    pub fn code(self) -> u8 {
        match self {
            PredictorKind::Transformer => 0,
            PredictorKind::LastValue => 1,
            PredictorKind::Frequency => 2,
            PredictorKind::Uniform => 3,
            PredictorKind::External => 4,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(PredictorKind::Transformer),
            1 => Ok(PredictorKind::LastValue),
            2 => Ok(PredictorKind::Frequency),
            3 => Ok(PredictorKind::Uniform),
            4 => Ok(PredictorKind::External),
            _ => Err(Error::BadArchiveField("unknown predictor code")),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PredictorKind::Transformer => "transformer",
            PredictorKind::LastValue => "last",
            PredictorKind::Frequency => "freq",
            PredictorKind::Uniform => "uniform",
            PredictorKind::External => "external",
        }
    }
}

/// Shared shape of the cheap baselines: a static preference order over the
/// vocabulary, optionally bumping the most recent context token to the top.
/// The order is what gets serialized into the archive, making decode-side
/// reconstruction exact by construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BaselinePredictor {
    kind: PredictorKind,
    context_len: usize,
    /// Tokens in descending preference; a permutation of [0, V).
    order: Vec<u32>,
}

impl BaselinePredictor {
    /// Rank 0 is the last context token, the rest follow the global
    /// frequency order of `counts` (ties by ascending token ID).
    pub fn last_value(counts: &[u64], context_len: usize) -> Result<BaselinePredictor> {
        Ok(BaselinePredictor {
            kind: PredictorKind::LastValue,
            context_len,
            order: order_from_counts(counts)?,
        })
    }

    /// Static ranking by corpus counts, ties by ascending token ID.
    pub fn frequency(counts: &[u64], context_len: usize) -> Result<BaselinePredictor> {
        Ok(BaselinePredictor {
            kind: PredictorKind::Frequency,
            context_len,
            order: order_from_counts(counts)?,
        })
    }

    /// No information: every token scores equally, so the ranking is plain
    /// ascending token ID and the k=V rank symbol equals the token itself.
    pub fn uniform(vocab: u32, context_len: usize) -> Result<BaselinePredictor> {
        if vocab < 2 {
            return Err(Error::BadVocab {
                vocab,
                max: crate::quant::MAX_VOCAB,
            });
        }
        Ok(BaselinePredictor {
            kind: PredictorKind::Uniform,
            context_len,
            order: (0..vocab).collect(),
        })
    }

    /// Rebuild from a serialized preference order (archive aux section).
    pub fn from_order(
        kind: PredictorKind,
        order: Vec<u32>,
        context_len: usize,
    ) -> Result<BaselinePredictor> {
        let vocab = order.len() as u32;
        let mut seen = alloc::vec![false; order.len()];
        for &t in &order {
            if t >= vocab || seen[t as usize] {
                return Err(Error::CorruptStream("baseline order is not a permutation"));
            }
            seen[t as usize] = true;
        }
        if vocab < 2 {
            return Err(Error::BadVocab {
                vocab,
                max: crate::quant::MAX_VOCAB,
            });
        }
        match kind {
            PredictorKind::LastValue | PredictorKind::Frequency | PredictorKind::Uniform => {
                Ok(BaselinePredictor {
                    kind,
                    context_len,
                    order,
                })
            }
            _ => Err(Error::BadArchiveField("kind carries no baseline order")),
        }
    }

    pub fn kind(&self) -> PredictorKind {
        self.kind
    }

    pub fn order(&self) -> &[u32] {
        &self.order
    }

    /// Serialized form for the archive's predictor aux section. Uniform is
    /// fully determined by (kind, V) so it serializes to nothing; the other
    /// baselines store their preference order as little-endian u32s.
    pub fn aux_bytes(&self) -> Vec<u8> {
        match self.kind {
            PredictorKind::Uniform => Vec::new(),
            _ => {
                let mut out = Vec::with_capacity(self.order.len() * 4);
                for &t in &self.order {
                    out.extend_from_slice(&t.to_le_bytes());
                }
                out
            }
        }
    }

    /// Inverse of `aux_bytes`, given the header's kind, V, and C.
    pub fn from_aux(
        kind: PredictorKind,
        aux: &[u8],
        vocab: u32,
        context_len: usize,
    ) -> Result<BaselinePredictor> {
        match kind {
            PredictorKind::Uniform => {
                if !aux.is_empty() {
                    return Err(Error::CorruptStream("uniform baseline carries aux bytes"));
                }
                BaselinePredictor::uniform(vocab, context_len)
            }
            PredictorKind::LastValue | PredictorKind::Frequency => {
                if aux.len() != vocab as usize * 4 {
                    return Err(Error::CorruptStream("baseline order length mismatch"));
                }
                let order: Vec<u32> = aux
                    .chunks_exact(4)
                    .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                BaselinePredictor::from_order(kind, order, context_len)
            }
            _ => Err(Error::BadArchiveField("kind carries no baseline order")),
        }
    }
}

/// Count vector -> tokens sorted by (count desc, token asc).
fn order_from_counts(counts: &[u64]) -> Result<Vec<u32>> {
    if counts.len() < 2 || counts.len() > crate::quant::MAX_VOCAB as usize {
        return Err(Error::BadCounts {
            actual: counts.len(),
            vocab: counts.len() as u32,
        });
    }
    let mut order: Vec<u32> = (0..counts.len() as u32).collect();
    order.sort_by(|&a, &b| {
        counts[b as usize]
            .cmp(&counts[a as usize])
            .then(a.cmp(&b))
    });
    Ok(order)
}

impl Predictor for BaselinePredictor {
    fn vocab(&self) -> u32 {
        self.order.len() as u32
    }

    fn context_len(&self) -> usize {
        self.context_len
    }

    fn kind(&self) -> PredictorKind {
        self.kind
    }

    fn score(&self, ctx: &Context, out: &mut [f64]) -> Result<()> {
        let vocab = self.vocab();
        // Preference position i gets score V - i, so earlier entries win.
        for (i, &token) in self.order.iter().enumerate() {
            out[token as usize] = (vocab as usize - i) as f64;
        }
        if self.kind == PredictorKind::LastValue {
            if let Some(&last) = ctx.tokens.last() {
                out[last as usize] = vocab as f64 + 1.0;
            }
        }
        Ok(())
    }
}
