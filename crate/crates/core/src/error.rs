use thiserror::Error;

/// Crate-wide error type. Variants carry enough context to produce a
/// single-line diagnostic without any further lookup.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("empty dims: every axis of (T, M, N) must be nonzero")]
    EmptyDims,
    #[error("dims overflow: {t}x{m}x{n} exceeds addressable sample count")]
    DimsOverflow { t: u32, m: u32, n: u32 },
    #[error("sample count mismatch: dims imply {expected} samples, got {actual}")]
    SampleCountMismatch { expected: u64, actual: u64 },
    #[error("non-finite sample at flat index {index}")]
    NonFiniteSample { index: u64 },

    #[error("stream position {pos} out of range for {len} samples")]
    PositionOutOfRange { pos: u64, len: u64 },
    #[error("coordinate ({x}, {y}, {t}) outside grid")]
    CoordOutOfGrid { x: u32, y: u32, t: u32 },
    #[error("index map covers {map} cells but dims imply {dims}")]
    IndexMapMismatch { map: u64, dims: u64 },

    #[error("vocab size {vocab} unsupported: need 2 <= V <= {max}")]
    BadVocab { vocab: u32, max: u32 },
    #[error("no samples to fit on")]
    NoSamples,
    #[error("error bound must be finite and nonnegative, got {value}")]
    BadErrorBound { value: f64 },
    #[error("error bound too tight for the value magnitudes at this precision")]
    BoundTooTight,
    #[error("token {token} out of range for vocab {vocab}")]
    TokenOutOfRange { token: u32, vocab: u32 },
    #[error("wide-bin token {token} requires a residual")]
    ResidualMissing { token: u32 },
    #[error("narrow-bin token {token} must not carry a residual")]
    ResidualUnexpected { token: u32 },
    #[error("residual stream exhausted early")]
    ResidualUnderrun,
    #[error("residual stream has {extra} unconsumed entries")]
    ResidualOverrun { extra: u64 },

    #[error("top-k width {k} exceeds vocab {vocab}")]
    BadTopK { k: usize, vocab: u32 },
    #[error("context holds {actual} tokens, predictor expects {expected}")]
    BadContextLen { expected: usize, actual: usize },
    #[error("context coords must hold exactly one more entry than tokens")]
    BadContextCoords,
    #[error("frequency baseline needs a count per vocab entry, got {actual} for vocab {vocab}")]
    BadCounts { actual: usize, vocab: u32 },

    #[error("bad model config: {0}")]
    BadModelConfig(&'static str),
    #[error("coordinate ({x}, {y}) outside embedding tables ({max_m}, {max_n})")]
    CoordOutOfEmbed { x: u32, y: u32, max_m: u32, max_n: u32 },
    #[error("bad training config: {0}")]
    BadTrainConfig(&'static str),
    #[error("training diverged at step {step}: loss {loss}")]
    TrainDiverged { step: u64, loss: f64 },
    #[error("no candidate target positions: need sequence length > context")]
    NoCandidates,

    #[error("sequence length {len} must exceed context {context}")]
    SequenceTooShort { len: u64, context: u32 },
    #[error("alphabet size {alphabet} unsupported: need 2 <= A <= {max}")]
    BadAlphabet { alphabet: u32, max: u32 },
    #[error("symbol {symbol} outside alphabet {alphabet}")]
    SymbolOutOfAlphabet { symbol: u32, alphabet: u32 },
    #[error("coded stream truncated")]
    TruncatedStream,
    #[error("corrupt stream: {0}")]
    CorruptStream(&'static str),
    #[error("correction at position {expected} found {actual}")]
    CorrectionMismatch { expected: u64, actual: u64 },
    #[error("archive field out of range: {0}")]
    BadArchiveField(&'static str),
    #[error("predictor does not match archive: {0}")]
    PredictorMismatch(&'static str),

    #[error("internal invariant violated: {0}")]
    Internal(&'static str),
}

pub type Result<T> = core::result::Result<T, Error>;
