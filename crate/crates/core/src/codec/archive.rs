//! The archive container: a fixed little-endian header plus six
//! length-prefixed, CRC-32-guarded sections, and the top-level compress /
//! decompress operations that fill and drain it.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! header (117 bytes):
//!   magic "LLMC" | version u16 | precision u8 | layout u8 | predictor u8
//!   | dims t,m,n u32x3 | epsilon f64 | vmin f64 | vmax f64
//!   | vocab u32 | context u32 | k u32 | len u64
//!   | correction count u64 | residual count u64
//!   | checkpoint hash [32] | crc32 of the preceding 113 bytes
//! sections, in order: quantizer, predictor aux, prefix, ranks,
//!   corrections, residuals; each as payload length u64 | payload
//!   | crc32 of the payload
//! ```
//!
//! `from_bytes` verifies every checksum before any payload is decoded, so
//! tampering surfaces as a checksum error, never as garbage output. The
//! compressed size |Z| used in the compression-ratio metric is exactly the
//! serialized byte length of this container.

use alloc::vec::Vec;

use crate::codec::streams::{
    decode_corrections, decode_rank_payload, decode_residuals, encode_corrections,
    encode_rank_payload, encode_residuals, pack_bits, token_bits, unpack_bits, Correction,
};
use crate::error::{Error, Result};
use crate::field::{Dims, ErrorBound, Field, Precision};
use crate::layout::{stream_coords, LayoutKind};
use crate::predictor::{predict_topk, BaselinePredictor, Context, Predictor, PredictorKind};
use crate::quant::{
    dequantize_tokens, fit_field, quantize_field, working_bound, FitParams, QuantizerModel,
    ResidualStream, TokenSequence, MAX_VOCAB,
};

pub const MAGIC: [u8; 4] = *b"LLMC";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 117;
/// Per-section framing: u64 length plus u32 checksum.
const SECTION_OVERHEAD: u64 = 12;
const SECTION_COUNT: u64 = 6;

/// Parsed fixed-size header. Every field is validated on parse; a header
/// that deserializes is internally consistent.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveHeader {
    pub version: u16,
    pub precision: Precision,
    pub layout: LayoutKind,
    pub predictor: PredictorKind,
    pub dims: Dims,
    pub epsilon: f64,
    pub vmin: f64,
    pub vmax: f64,
    pub vocab: u32,
    pub context: u32,
    pub k: u32,
    pub len: u64,
    pub n_corrections: u64,
    pub n_residuals: u64,
    pub checkpoint_hash: [u8; 32],
}

impl ArchiveHeader {
    pub fn rank_count(&self) -> u64 {
        self.len - u64::from(self.context)
    }

    /// The bound every decompressed point honors, recomputed from header
    /// fields with the same arithmetic the encoder used.
    pub fn error_bound(&self) -> Result<ErrorBound> {
        ErrorBound::from_range(self.epsilon, self.vmin, self.vmax)
    }

    fn write(&self, out: &mut Vec<u8>) {
        let start = out.len();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.push(self.precision.code());
        out.push(self.layout.code());
        out.push(self.predictor.code());
        out.extend_from_slice(&self.dims.t.to_le_bytes());
        out.extend_from_slice(&self.dims.m.to_le_bytes());
        out.extend_from_slice(&self.dims.n.to_le_bytes());
        out.extend_from_slice(&self.epsilon.to_le_bytes());
        out.extend_from_slice(&self.vmin.to_le_bytes());
        out.extend_from_slice(&self.vmax.to_le_bytes());
        out.extend_from_slice(&self.vocab.to_le_bytes());
        out.extend_from_slice(&self.context.to_le_bytes());
        out.extend_from_slice(&self.k.to_le_bytes());
        out.extend_from_slice(&self.len.to_le_bytes());
        out.extend_from_slice(&self.n_corrections.to_le_bytes());
        out.extend_from_slice(&self.n_residuals.to_le_bytes());
        out.extend_from_slice(&self.checkpoint_hash);
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
        debug_assert_eq!(out.len() - start, HEADER_LEN);
    }

    fn parse(bytes: &[u8]) -> Result<ArchiveHeader> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::TruncatedStream);
        }
        let mut r = Reader::new(&bytes[..HEADER_LEN]);
        if r.take(4)? != MAGIC {
            return Err(Error::CorruptStream("bad magic"));
        }
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(Error::BadArchiveField("unsupported format version"));
        }
        let precision = Precision::from_code(r.u8()?)?;
        let layout = LayoutKind::from_code(r.u8()?)?;
        let predictor = PredictorKind::from_code(r.u8()?)?;
        let dims = Dims::new(r.u32()?, r.u32()?, r.u32()?)?;
        let epsilon = r.f64()?;
        let vmin = r.f64()?;
        let vmax = r.f64()?;
        if !vmin.is_finite() || !vmax.is_finite() || vmin > vmax {
            return Err(Error::BadArchiveField("field value range"));
        }
        ErrorBound::from_range(epsilon, vmin, vmax)?;
        let vocab = r.u32()?;
        if vocab < 2 || vocab > MAX_VOCAB {
            return Err(Error::BadVocab {
                vocab,
                max: MAX_VOCAB,
            });
        }
        let context = r.u32()?;
        let k = r.u32()?;
        if k < 1 || k > vocab {
            return Err(Error::BadTopK {
                k: k as usize,
                vocab,
            });
        }
        let len = r.u64()?;
        if len != dims.len() {
            return Err(Error::BadArchiveField("sample count disagrees with dims"));
        }
        if context < 1 || u64::from(context) >= len {
            return Err(Error::SequenceTooShort { len, context });
        }
        let n_corrections = r.u64()?;
        let n_residuals = r.u64()?;
        if n_corrections > len - u64::from(context) || n_residuals > len {
            return Err(Error::BadArchiveField("stream counts exceed field size"));
        }
        let mut checkpoint_hash = [0u8; 32];
        checkpoint_hash.copy_from_slice(r.take(32)?);
        let crc = r.u32()?;
        if crc != crc32fast::hash(&bytes[..HEADER_LEN - 4]) {
            return Err(Error::CorruptStream("header checksum mismatch"));
        }
        Ok(ArchiveHeader {
            version,
            precision,
            layout,
            predictor,
            dims,
            epsilon,
            vmin,
            vmax,
            vocab,
            context,
            k,
            len,
            n_corrections,
            n_residuals,
            checkpoint_hash,
        })
    }
}

/// In-memory archive: parsed header and quantizer, raw coded payloads.
/// Payloads stay coded until decompression asks for them, so checksum
/// verification alone never runs the entropy decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub header: ArchiveHeader,
    pub quantizer: QuantizerModel,
    pub predictor_aux: Vec<u8>,
    pub prefix: Vec<u32>,
    pub rank_payload: Vec<u8>,
    pub correction_payload: Vec<u8>,
    pub residual_payload: Vec<u8>,
}

/// Byte accounting per archive region; `framing` counts section length and
/// checksum fields. The parts sum to the serialized size exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SectionSizes {
    pub header: u64,
    pub quantizer: u64,
    pub predictor_aux: u64,
    pub prefix: u64,
    pub ranks: u64,
    pub corrections: u64,
    pub residuals: u64,
    pub framing: u64,
}

impl SectionSizes {
    pub fn total(&self) -> u64 {
        self.header
            + self.quantizer
            + self.predictor_aux
            + self.prefix
            + self.ranks
            + self.corrections
            + self.residuals
            + self.framing
    }

    /// Everything that is not one of the three coded streams: the fixed
    /// price of being able to decode at all.
    pub fn metadata(&self) -> u64 {
        self.header + self.quantizer + self.predictor_aux + self.prefix + self.framing
    }
}

impl Archive {
    fn quantizer_payload(&self) -> Vec<u8> {
        let q = &self.quantizer;
        let v = q.vocab() as usize;
        let mut out = Vec::with_capacity((2 * v - 1) * 8 + v.div_ceil(8));
        for &b in q.boundaries() {
            out.extend_from_slice(&b.to_le_bytes());
        }
        for &l in q.levels() {
            out.extend_from_slice(&l.to_le_bytes());
        }
        for chunk in q.wide_bin().chunks(8) {
            let mut byte = 0u8;
            for (i, &wide) in chunk.iter().enumerate() {
                byte |= u8::from(wide) << i;
            }
            out.push(byte);
        }
        out
    }

    fn prefix_payload(&self) -> Vec<u8> {
        pack_bits(&self.prefix, token_bits(self.header.vocab))
    }

    pub fn section_sizes(&self) -> SectionSizes {
        let v = u64::from(self.header.vocab);
        let quantizer = (2 * v - 1) * 8 + v.div_ceil(8);
        let prefix_bits = u64::from(self.header.context) * u64::from(token_bits(self.header.vocab));
        SectionSizes {
            header: HEADER_LEN as u64,
            quantizer,
            predictor_aux: self.predictor_aux.len() as u64,
            prefix: prefix_bits.div_ceil(8),
            ranks: self.rank_payload.len() as u64,
            corrections: self.correction_payload.len() as u64,
            residuals: self.residual_payload.len() as u64,
            framing: SECTION_COUNT * SECTION_OVERHEAD,
        }
    }

    /// Exact byte length `to_bytes` will produce: the |Z| of the ratio.
    pub fn serialized_len(&self) -> u64 {
        self.section_sizes().total()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.serialized_len() as usize);
        self.header.write(&mut out);
        let quantizer = self.quantizer_payload();
        let prefix = self.prefix_payload();
        let sections: [&[u8]; 6] = [
            &quantizer,
            &self.predictor_aux,
            &prefix,
            &self.rank_payload,
            &self.correction_payload,
            &self.residual_payload,
        ];
        for payload in sections {
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(payload);
            out.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
        }
        debug_assert_eq!(out.len() as u64, self.serialized_len());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Archive> {
        let header = ArchiveHeader::parse(bytes)?;
        let mut r = Reader::new(bytes);
        r.take(HEADER_LEN)?;
        let mut sections: [Vec<u8>; 6] = Default::default();
        for section in sections.iter_mut() {
            let len = r.u64()?;
            let len = usize::try_from(len).map_err(|_| Error::TruncatedStream)?;
            let payload = r.take(len)?;
            let crc = crc32fast::hash(payload);
            if crc != r.u32()? {
                return Err(Error::CorruptStream("section checksum mismatch"));
            }
            *section = payload.to_vec();
        }
        if !r.is_empty() {
            return Err(Error::CorruptStream("trailing bytes after last section"));
        }
        let [quantizer_bytes, predictor_aux, prefix_bytes, rank_payload, correction_payload, residual_payload] =
            sections;

        let quantizer = parse_quantizer(&quantizer_bytes, &header)?;
        validate_predictor_aux(&predictor_aux, &header)?;
        let prefix = unpack_bits(
            &prefix_bytes,
            header.context as usize,
            token_bits(header.vocab),
        )?;
        if prefix.iter().any(|&t| t >= header.vocab) {
            return Err(Error::CorruptStream("prefix token out of range"));
        }
        Ok(Archive {
            header,
            quantizer,
            predictor_aux,
            prefix,
            rank_payload,
            correction_payload,
            residual_payload,
        })
    }
}

fn parse_quantizer(bytes: &[u8], header: &ArchiveHeader) -> Result<QuantizerModel> {
    let v = header.vocab as usize;
    let expected = (2 * v - 1) * 8 + v.div_ceil(8);
    if bytes.len() != expected {
        return Err(Error::CorruptStream("quantizer section length"));
    }
    let mut r = Reader::new(bytes);
    let boundaries: Vec<f64> = (0..v - 1)
        .map(|_| r.f64())
        .collect::<Result<_>>()?;
    let levels: Vec<f64> = (0..v).map(|_| r.f64()).collect::<Result<_>>()?;
    let mut wide_bin = Vec::with_capacity(v);
    let bits = r.take(v.div_ceil(8))?;
    for (i, &byte) in bits.iter().enumerate() {
        for bit in 0..8 {
            let idx = i * 8 + bit;
            if idx < v {
                wide_bin.push(byte >> bit & 1 == 1);
            } else if byte >> bit & 1 == 1 {
                return Err(Error::CorruptStream("nonzero padding bits"));
            }
        }
    }
    let bound = header.error_bound()?;
    let e_work = working_bound(bound.e_abs, header.vmin, header.vmax, header.precision)?;
    QuantizerModel::from_parts(
        header.vocab,
        boundaries,
        levels,
        wide_bin,
        bound.e_abs,
        e_work,
        header.vmin,
        header.vmax,
    )
}

fn validate_predictor_aux(aux: &[u8], header: &ArchiveHeader) -> Result<()> {
    match header.predictor {
        PredictorKind::LastValue | PredictorKind::Frequency | PredictorKind::Uniform => {
            BaselinePredictor::from_aux(
                header.predictor,
                aux,
                header.vocab,
                header.context as usize,
            )
            .map(|_| ())
        }
        PredictorKind::Transformer | PredictorKind::External => {
            if aux.is_empty() {
                Ok(())
            } else {
                Err(Error::BadArchiveField("unexpected predictor aux payload"))
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Reader<'a> {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::TruncatedStream)?;
        if end > self.buf.len() {
            return Err(Error::TruncatedStream);
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn is_empty(&self) -> bool {
        self.pos == self.buf.len()
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let s = self.take(2)?;
        Ok(u16::from_le_bytes([s[0], s[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let s = self.take(4)?;
        Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let s = self.take(8)?;
        let mut b = [0u8; 8];
        b.copy_from_slice(s);
        Ok(u64::from_le_bytes(b))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
}

/// How `compress` obtains its quantizer: fit one on the field now, or use
/// one fitted earlier (it must match the field's range and bound exactly,
/// or training-time and compression-time tokens would disagree).
#[derive(Debug, Clone, Copy)]
pub enum QuantizerSpec<'a> {
    Fit { vocab: u32, params: &'a FitParams },
    Model(&'a QuantizerModel),
}

/// A predictor plus what the archive must remember about it: the checkpoint
/// hash pinning an external transformer checkpoint, and the aux bytes that
/// let baselines be rebuilt at decode time with no side files.
pub struct PredictorInfo<'a> {
    pub predictor: &'a dyn Predictor,
    pub checkpoint_hash: [u8; 32],
    pub aux: Vec<u8>,
}

impl<'a> PredictorInfo<'a> {
    pub fn baseline(p: &'a BaselinePredictor) -> PredictorInfo<'a> {
        PredictorInfo {
            predictor: p,
            checkpoint_hash: [0; 32],
            aux: p.aux_bytes(),
        }
    }

    /// Caller-managed predictor the archive cannot rebuild.
    pub fn external(p: &'a dyn Predictor) -> PredictorInfo<'a> {
        PredictorInfo {
            predictor: p,
            checkpoint_hash: [0; 32],
            aux: Vec::new(),
        }
    }

    /// Predictor loaded from a checkpoint file whose hash pins identity.
    pub fn checkpointed(p: &'a dyn Predictor, checkpoint_hash: [u8; 32]) -> PredictorInfo<'a> {
        PredictorInfo {
            predictor: p,
            checkpoint_hash,
            aux: Vec::new(),
        }
    }
}

/// Compress one field. Tokens are produced by the (fitted or supplied)
/// quantizer, each non-prefix position is ranked against the predictor's
/// top-k (teacher-forced on ground-truth context, which the decoder
/// reproduces exactly because token recovery is exact), and the three
/// symbol streams are entropy-coded into the container. Every coded
/// section is decoded back and compared before the archive is returned.
pub fn compress(
    field: &Field,
    epsilon: f64,
    quantizer: QuantizerSpec,
    predictor: &PredictorInfo,
    k: u32,
    layout: LayoutKind,
) -> Result<Archive> {
    let vocab = predictor.predictor.vocab();
    let context = predictor.predictor.context_len();
    let dims = field.dims();
    let len = dims.len();
    if k < 1 || k > vocab {
        return Err(Error::BadTopK {
            k: k as usize,
            vocab,
        });
    }
    if context < 1 || context as u64 >= len || context > u32::MAX as usize {
        return Err(Error::SequenceTooShort {
            len,
            context: context.min(u32::MAX as usize) as u32,
        });
    }
    let model = match quantizer {
        QuantizerSpec::Fit { vocab: qv, params } => {
            if qv != vocab {
                return Err(Error::PredictorMismatch(
                    "quantizer vocab differs from predictor vocab",
                ));
            }
            fit_field(field, vocab, epsilon, params)?.0
        }
        QuantizerSpec::Model(m) => {
            if m.vocab() != vocab {
                return Err(Error::PredictorMismatch(
                    "quantizer vocab differs from predictor vocab",
                ));
            }
            let bound = ErrorBound::for_field(field, epsilon)?;
            if m.e_abs().to_bits() != bound.e_abs.to_bits()
                || m.data_min().to_bits() != field.vmin().to_bits()
                || m.data_max().to_bits() != field.vmax().to_bits()
            {
                return Err(Error::BadArchiveField(
                    "supplied quantizer does not match field range and epsilon",
                ));
            }
            m.clone()
        }
    };

    let (seq, residuals) = quantize_field(field, &model, layout)?;
    let tokens = &seq.tokens;
    let coords = &seq.coords;
    let mut ranks = Vec::with_capacity(tokens.len() - context);
    let mut corrections = Vec::new();
    for p in context..tokens.len() {
        let ctx = Context::new(&tokens[p - context..p], &coords[p - context..=p])?;
        let topk = predict_topk(predictor.predictor, &ctx, k as usize)?;
        let truth = tokens[p];
        match topk.ranked.iter().position(|&t| t == truth) {
            Some(r) => ranks.push(r as u32),
            None => {
                ranks.push(k);
                corrections.push(Correction {
                    position: p as u64,
                    token: truth,
                });
            }
        }
    }

    let rank_payload = encode_rank_payload(&ranks, k, dims, layout)?;
    let correction_payload = encode_corrections(&corrections, context as u64, vocab)?;
    let residual_payload = encode_residuals(&residuals.residuals)?;

    // Lossless self-check: what was just coded must decode back bit for
    // bit, independent of any predictor or model assumption.
    if decode_rank_payload(&rank_payload, ranks.len() as u64, k, dims, layout)? != ranks {
        return Err(Error::Internal("rank section failed its round-trip"));
    }
    if decode_corrections(
        &correction_payload,
        corrections.len() as u64,
        context as u64,
        len,
        vocab,
    )? != corrections
    {
        return Err(Error::Internal("correction section failed its round-trip"));
    }
    if decode_residuals(&residual_payload, residuals.residuals.len() as u64)?
        != residuals.residuals
    {
        return Err(Error::Internal("residual section failed its round-trip"));
    }

    let header = ArchiveHeader {
        version: FORMAT_VERSION,
        precision: field.precision(),
        layout,
        predictor: predictor.predictor.kind(),
        dims,
        epsilon,
        vmin: field.vmin(),
        vmax: field.vmax(),
        vocab,
        context: context as u32,
        k,
        len,
        n_corrections: corrections.len() as u64,
        n_residuals: residuals.residuals.len() as u64,
        checkpoint_hash: predictor.checkpoint_hash,
    };
    Ok(Archive {
        header,
        quantizer: model,
        predictor_aux: predictor.aux.clone(),
        prefix: tokens[..context].to_vec(),
        rank_payload,
        correction_payload,
        residual_payload,
    })
}

/// Rebuild the exact token sequence: prefix verbatim, then one token per
/// rank symbol, autoregressively re-querying the predictor on already
/// recovered context; escapes pull the next correction, which must sit at
/// exactly the current position.
pub fn decompress_tokens(
    archive: &Archive,
    predictor: &PredictorInfo,
) -> Result<(TokenSequence, ResidualStream)> {
    let h = &archive.header;
    if predictor.predictor.kind() != h.predictor {
        return Err(Error::PredictorMismatch("predictor kind differs"));
    }
    if predictor.predictor.vocab() != h.vocab {
        return Err(Error::PredictorMismatch("vocab differs"));
    }
    if predictor.predictor.context_len() != h.context as usize {
        return Err(Error::PredictorMismatch("context length differs"));
    }
    if predictor.checkpoint_hash != h.checkpoint_hash {
        return Err(Error::PredictorMismatch("checkpoint hash differs"));
    }
    if predictor.aux != archive.predictor_aux {
        return Err(Error::PredictorMismatch("predictor aux differs"));
    }
    if archive.prefix.len() != h.context as usize {
        return Err(Error::CorruptStream("prefix length mismatch"));
    }
    let dims = h.dims;
    let layout = h.layout;
    let context = h.context as usize;
    let len = h.len as usize;
    let k = h.k;

    let ranks = decode_rank_payload(&archive.rank_payload, h.rank_count(), k, dims, layout)?;
    let corrections = decode_corrections(
        &archive.correction_payload,
        h.n_corrections,
        context as u64,
        h.len,
        h.vocab,
    )?;
    let residuals = decode_residuals(&archive.residual_payload, h.n_residuals)?;

    let coords = stream_coords(dims, layout);
    let mut tokens = Vec::with_capacity(len);
    tokens.extend_from_slice(&archive.prefix);
    let mut next_correction = 0usize;
    for p in context..len {
        let ctx = Context::new(&tokens[p - context..p], &coords[p - context..=p])?;
        let sym = ranks[p - context];
        let token = if sym < k {
            let topk = predict_topk(predictor.predictor, &ctx, k as usize)?;
            topk.ranked[sym as usize]
        } else {
            let c = corrections
                .get(next_correction)
                .ok_or(Error::CorruptStream("correction set exhausted"))?;
            if c.position != p as u64 {
                return Err(Error::CorrectionMismatch {
                    expected: p as u64,
                    actual: c.position,
                });
            }
            next_correction += 1;
            c.token
        };
        tokens.push(token);
    }
    if next_correction != corrections.len() {
        return Err(Error::CorruptStream("unconsumed corrections"));
    }
    Ok((
        TokenSequence {
            tokens,
            coords,
            dims,
            layout,
        },
        ResidualStream { residuals },
    ))
}

/// Full inverse of `compress`: recovered tokens, dequantized on the
/// archive's own quantizer, scattered back to row-major storage.
pub fn decompress(archive: &Archive, predictor: &PredictorInfo) -> Result<Field> {
    let (seq, residuals) = decompress_tokens(archive, predictor)?;
    dequantize_tokens(&seq, &residuals, &archive.quantizer, archive.header.precision)
}

/// rho = |X| / |Z| over the serialized container.
pub fn compression_ratio(original: &Field, archive: &Archive) -> f64 {
    crate::metrics::compression_ratio(original, archive.serialized_len())
}

/// Bits per sample of the serialized container.
pub fn bitrate(original: &Field, archive: &Archive) -> f64 {
    crate::metrics::bitrate(original, archive.serialized_len())
}
