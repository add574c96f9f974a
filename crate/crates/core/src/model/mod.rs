//! A small decoder-only transformer trained from scratch to rank the next
//! token of a flattened field, written directly against `alloc` + `libm`.
//!
//! Every sample the model sees is a fixed window of `context` tokens, each
//! embedded as token + row + column + time vectors; the last slot
//! additionally receives the *target's* coordinate embeddings so the model
//! knows where the prediction lands. Parameters live in one flat `f64`
//! vector with a canonical tensor order (see [`Model::tensors`]), which
//! makes the optimizer, the checkpoint format and the finite-difference
//! tests all trivial to keep in sync.
//!
//! Determinism contract: forward, backward and training touch parameters
//! in fixed order on a single thread, all transcendentals go through
//! `libm`, and every public constructor rounds parameters through `f32`,
//! so a freshly trained model and the model reloaded from its checkpoint
//! are bitwise interchangeable inside the codec.

mod net;
mod train;

pub use net::{hybrid_loss, LossParts};
pub use train::{
    target_aware_sample, train, EvalStats, OptimizerKind, Sampler, SamplingKind, StepCount,
    StepStats, TrainReport, TrainingConfig,
};

use alloc::vec::Vec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::predictor::{Context, Predictor, PredictorKind};
use crate::quant::MAX_VOCAB;

/// Feed-forward width as a multiple of the hidden size.
const FFN_MULT: usize = 4;
/// Gaussian initialization scale for embeddings and weight matrices.
const INIT_STD: f64 = 0.02;
/// LayerNorm variance floor.
pub(crate) const LN_EPS: f64 = 1e-5;

/// Geometry of the network and its embedding tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub layers: u32,
    pub hidden: u32,
    pub heads: u32,
    pub vocab: u32,
    pub context: u32,
    /// Row-coordinate embedding table size; rows must satisfy x < max_rows.
    pub max_rows: u32,
    /// Column-coordinate embedding table size; cols must satisfy y < max_cols.
    pub max_cols: u32,
    /// Temporal table size; indexed by t mod max_time, so any T is legal.
    pub max_time: u32,
}

impl Default for ModelConfig {
    /// Desk-scale geometry used by tests and quick experiments.
    fn default() -> Self {
        ModelConfig {
            layers: 2,
            hidden: 64,
            heads: 4,
            vocab: 1024,
            context: 32,
            max_rows: 64,
            max_cols: 64,
            max_time: 256,
        }
    }
}

impl ModelConfig {
    /// The geometry used for the full-scale runs: 12 layers, hidden 768,
    /// 12 heads of dimension 64.
    pub fn full_scale() -> Self {
        ModelConfig {
            layers: 12,
            hidden: 768,
            heads: 12,
            ..ModelConfig::default()
        }
    }

    pub fn head_dim(&self) -> u32 {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::BadModelConfig("layers must be >= 1"));
        }
        if self.heads == 0 || self.hidden == 0 || self.hidden % self.heads != 0 {
            return Err(Error::BadModelConfig("hidden must be a positive multiple of heads"));
        }
        if self.vocab < 2 || self.vocab > MAX_VOCAB {
            return Err(Error::BadModelConfig("vocab out of range"));
        }
        if self.context == 0 {
            return Err(Error::BadModelConfig("context must be >= 1"));
        }
        if self.max_rows == 0 || self.max_cols == 0 || self.max_time == 0 {
            return Err(Error::BadModelConfig("embedding tables must be nonempty"));
        }
        // Keeps activation and parameter buffers comfortably indexable.
        if self.hidden > 1 << 14 || self.context > 1 << 14 {
            return Err(Error::BadModelConfig("hidden/context beyond supported size"));
        }
        Ok(())
    }
}

/// One named span of the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: &'static str,
    /// Layer index, or u32::MAX for tensors outside the layer stack.
    pub layer: u32,
    pub offset: usize,
    pub len: usize,
}

/// Per-layer parameter offsets into the flat vector.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerOff {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub w_qkv: usize,
    pub b_qkv: usize,
    pub w_o: usize,
    pub b_o: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w_fc1: usize,
    pub b_fc1: usize,
    pub w_fc2: usize,
    pub b_fc2: usize,
}

/// All parameter offsets, derived from the config once.
#[derive(Debug, Clone)]
pub(crate) struct Offsets {
    pub tok: usize,
    pub row: usize,
    pub col: usize,
    pub time: usize,
    pub layers: Vec<LayerOff>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub head_w: usize,
    pub head_b: usize,
    pub total: usize,
}

impl Offsets {
    fn new(c: &ModelConfig) -> Offsets {
        let d = c.hidden as usize;
        let f = FFN_MULT * d;
        let mut at = 0usize;
        let mut take = |n: usize| {
            let here = at;
            at += n;
            here
        };
        let tok = take(c.vocab as usize * d);
        let row = take(c.max_rows as usize * d);
        let col = take(c.max_cols as usize * d);
        let time = take(c.max_time as usize * d);
        let mut layers = Vec::with_capacity(c.layers as usize);
        for _ in 0..c.layers {
            layers.push(LayerOff {
                ln1_g: take(d),
                ln1_b: take(d),
                w_qkv: take(d * 3 * d),
                b_qkv: take(3 * d),
                w_o: take(d * d),
                b_o: take(d),
                ln2_g: take(d),
                ln2_b: take(d),
                w_fc1: take(d * f),
                b_fc1: take(f),
                w_fc2: take(f * d),
                b_fc2: take(d),
            });
        }
        let lnf_g = take(d);
        let lnf_b = take(d);
        let head_w = take(d * c.vocab as usize);
        let head_b = take(c.vocab as usize);
        Offsets {
            tok,
            row,
            col,
            time,
            layers,
            lnf_g,
            lnf_b,
            head_w,
            head_b,
            total: at,
        }
    }
}

/// The transformer: a config plus one flat parameter vector.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: Vec<f64>,
    off: Offsets,
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl Model {
    /// Fresh model: Gaussian(0, 0.02) embeddings and weight matrices, zero
    /// biases, unit LayerNorm gains, and a zero output head so the initial
    /// distribution is exactly uniform.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let off = Offsets::new(&config);
        let mut params = alloc::vec![0.0f64; off.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("constant std");
        let mut model = Model { config, params: Vec::new(), off };
        for spec in model.tensors() {
            if is_gaussian_init(spec.name) {
                for slot in &mut params[spec.offset..spec.offset + spec.len] {
                    *slot = normal.sample(&mut rng);
                }
            } else if is_ln_gain(spec.name) {
                params[spec.offset..spec.offset + spec.len].fill(1.0);
            }
            // Biases, LayerNorm shifts and the whole output head stay zero.
        }
        round_to_f32(&mut params);
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Flat parameter vector in the canonical tensor order (see [`tensors`]).
    /// Values are always exactly representable as f32.
    ///
    /// [`tensors`]: Model::tensors
    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable view of the parameter vector. Writes are taken as-is; callers
    /// that need the f32-clean checkpoint invariant after hand-editing must
    /// round the values they store (training and `init` already do).
    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub(crate) fn offsets(&self) -> &Offsets {
        &self.off
    }

    /// Canonical tensor order: embeddings, then per-layer blocks, then the
    /// final norm and output head. The checkpoint blob is exactly this
    /// order, flattened row-major.
    pub fn tensors(&self) -> Vec<TensorSpec> {
        let c = &self.config;
        let d = c.hidden as usize;
        let f = FFN_MULT * d;
        let o = &self.off;
        let mut specs = alloc::vec![
            TensorSpec { name: "tok_embed", layer: u32::MAX, offset: o.tok, len: c.vocab as usize * d },
            TensorSpec { name: "row_embed", layer: u32::MAX, offset: o.row, len: c.max_rows as usize * d },
            TensorSpec { name: "col_embed", layer: u32::MAX, offset: o.col, len: c.max_cols as usize * d },
            TensorSpec { name: "time_embed", layer: u32::MAX, offset: o.time, len: c.max_time as usize * d },
        ];
        for (l, lo) in o.layers.iter().enumerate() {
            let l = l as u32;
            specs.extend_from_slice(&[
                TensorSpec { name: "ln1.gain", layer: l, offset: lo.ln1_g, len: d },
                TensorSpec { name: "ln1.shift", layer: l, offset: lo.ln1_b, len: d },
                TensorSpec { name: "attn.w_qkv", layer: l, offset: lo.w_qkv, len: d * 3 * d },
                TensorSpec { name: "attn.b_qkv", layer: l, offset: lo.b_qkv, len: 3 * d },
                TensorSpec { name: "attn.w_out", layer: l, offset: lo.w_o, len: d * d },
                TensorSpec { name: "attn.b_out", layer: l, offset: lo.b_o, len: d },
                TensorSpec { name: "ln2.gain", layer: l, offset: lo.ln2_g, len: d },
                TensorSpec { name: "ln2.shift", layer: l, offset: lo.ln2_b, len: d },
                TensorSpec { name: "ffn.w_in", layer: l, offset: lo.w_fc1, len: d * f },
                TensorSpec { name: "ffn.b_in", layer: l, offset: lo.b_fc1, len: f },
                TensorSpec { name: "ffn.w_out", layer: l, offset: lo.w_fc2, len: f * d },
                TensorSpec { name: "ffn.b_out", layer: l, offset: lo.b_fc2, len: d },
            ]);
        }
        specs.extend_from_slice(&[
            TensorSpec { name: "ln_f.gain", layer: u32::MAX, offset: o.lnf_g, len: d },
            TensorSpec { name: "ln_f.shift", layer: u32::MAX, offset: o.lnf_b, len: d },
            TensorSpec { name: "head.w", layer: u32::MAX, offset: o.head_w, len: d * c.vocab as usize },
            TensorSpec { name: "head.b", layer: u32::MAX, offset: o.head_b, len: c.vocab as usize },
        ]);
        specs
    }

    /// Next-token distribution for one context window. Sums to 1 within
    /// 1e-5; deterministic for fixed parameters.
    pub fn forward(&self, ctx: &Context) -> Result<Vec<f64>> {
        let logits = net::forward_logits(self, ctx.tokens, ctx.coords, None)?;
        Ok(net::softmax(&logits))
    }

    /// Hybrid loss at one (context, target) pair and its gradient with
    /// respect to every parameter, in the flat order of [`Model::params`].
    /// `midpoints` must hold one reconstruction value per vocabulary entry.
    pub fn loss_and_grads(
        &self,
        ctx: &Context,
        target: u32,
        midpoints: &[f64],
        alpha: f64,
    ) -> Result<(LossParts, Vec<f64>)> {
        if target >= self.config.vocab {
            return Err(Error::TokenOutOfRange { token: target, vocab: self.config.vocab });
        }
        let mut trace = net::Trace::new();
        let logits = net::forward_logits(self, ctx.tokens, ctx.coords, Some(&mut trace))?;
        let probs = net::softmax(&logits);
        hybrid_loss(&probs, target, midpoints, alpha)?;
        let mut dlogits = alloc::vec![0.0f64; probs.len()];
        let parts = net::loss_and_dlogits(&probs, target, midpoints, alpha, &mut dlogits);
        let mut grads = alloc::vec![0.0f64; self.params.len()];
        net::backward(self, ctx.tokens, ctx.coords, &trace, &dlogits, &mut grads);
        Ok((parts, grads))
    }

    /// Serialized checkpoint: magic, config, f32 parameter blob in tensor
    /// order, SHA-256 of everything preceding the hash.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(CKPT_FIXED + 4 * self.params.len());
        out.extend_from_slice(CKPT_MAGIC);
        for v in [
            self.config.layers,
            self.config.hidden,
            self.config.heads,
            self.config.vocab,
            self.config.context,
            self.config.max_rows,
            self.config.max_cols,
            self.config.max_time,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for &p in &self.params {
            out.extend_from_slice(&(p as f32).to_le_bytes());
        }
        let hash: [u8; 32] = Sha256::digest(&out).into();
        out.extend_from_slice(&hash);
        out
    }
}

/// Checkpoint magic. The trailing digit is the format version.
pub const CKPT_MAGIC: &[u8; 8] = b"LLMCKPT1";
/// Magic + 8 config words + parameter count.
const CKPT_FIXED: usize = 8 + 8 * 4 + 8;

/// A parsed checkpoint: the model plus the content hash archives use to
/// pin the predictor identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub hash: [u8; 32],
}

/// Parse and verify checkpoint bytes. The stored hash must match the
/// recomputed SHA-256 and the parameter count must match the config.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < CKPT_FIXED + 32 {
        return Err(Error::CorruptStream("checkpoint too short"));
    }
    if &bytes[..8] != CKPT_MAGIC {
        return Err(Error::CorruptStream("bad checkpoint magic"));
    }
    let body = &bytes[..bytes.len() - 32];
    let stored = &bytes[bytes.len() - 32..];
    let hash: [u8; 32] = Sha256::digest(body).into();
    if stored != hash {
        return Err(Error::CorruptStream("checkpoint hash mismatch"));
    }
    let mut words = [0u32; 8];
    for (i, w) in words.iter_mut().enumerate() {
        *w = u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().expect("span"));
    }
    let config = ModelConfig {
        layers: words[0],
        hidden: words[1],
        heads: words[2],
        vocab: words[3],
        context: words[4],
        max_rows: words[5],
        max_cols: words[6],
        max_time: words[7],
    };
    config.validate()?;
    let count = u64::from_le_bytes(bytes[CKPT_FIXED - 8..CKPT_FIXED].try_into().expect("span"));
    let off = Offsets::new(&config);
    if count != off.total as u64 {
        return Err(Error::CorruptStream("checkpoint parameter count mismatch"));
    }
    let blob = &body[CKPT_FIXED..];
    if blob.len() as u64 != 4 * count {
        return Err(Error::CorruptStream("checkpoint blob length mismatch"));
    }
    let mut params = Vec::with_capacity(off.total);
    for chunk in blob.chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().expect("span"));
        if !v.is_finite() {
            return Err(Error::CorruptStream("non-finite checkpoint parameter"));
        }
        params.push(f64::from(v));
    }
    Ok(Checkpoint { model: Model { config, params, off }, hash })
}

/// Content hash of serialized checkpoint bytes, verified first.
pub fn checkpoint_hash(bytes: &[u8]) -> Result<[u8; 32]> {
    parse_checkpoint(bytes).map(|c| c.hash)
}

/// Round every parameter onto the f32 grid (f32 -> f64 widening is exact,
/// so models round-trip through checkpoints bitwise).
pub(crate) fn round_to_f32(params: &mut [f64]) {
    for p in params {
        *p = f64::from(*p as f32);
    }
}

fn is_gaussian_init(name: &str) -> bool {
    matches!(
        name,
        "tok_embed" | "row_embed" | "col_embed" | "time_embed" | "attn.w_qkv" | "attn.w_out"
            | "ffn.w_in" | "ffn.w_out"
    )
}

fn is_ln_gain(name: &str) -> bool {
    matches!(name, "ln1.gain" | "ln2.gain" | "ln_f.gain")
}

/// [`Predictor`] adapter so the codec can drive the transformer.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerPredictor {
    model: Model,
}

impl TransformerPredictor {
    pub fn new(model: Model) -> TransformerPredictor {
        TransformerPredictor { model }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }
}

impl Predictor for TransformerPredictor {
    fn vocab(&self) -> u32 {
        self.model.config.vocab
    }

    fn context_len(&self) -> usize {
        self.model.config.context as usize
    }

    fn score(&self, ctx: &Context, out: &mut [f64]) -> Result<()> {
        let p = self.model.forward(ctx)?;
        out.copy_from_slice(&p);
        Ok(())
    }

    fn kind(&self) -> PredictorKind {
        PredictorKind::Transformer
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{Dims, Field, Precision};
    use crate::layout::{stream_coords, Coord, LayoutKind};
    use crate::quant::{fit_field, quantize_field, FitParams};
    use rand::Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            layers: 1,
            hidden: 8,
            heads: 2,
            vocab: 6,
            context: 4,
            max_rows: 5,
            max_cols: 5,
            max_time: 7,
        }
    }

    fn coords5() -> Vec<Coord> {
        alloc::vec![
            Coord { x: 0, y: 1, t: 0 },
            Coord { x: 1, y: 1, t: 3 },
            Coord { x: 2, y: 4, t: 9 },
            Coord { x: 4, y: 0, t: 10 },
            Coord { x: 3, y: 2, t: 11 },
        ]
    }

    /// Overwrite one named tensor with Gaussian draws (tests need a
    /// nonzero head for gradients to reach the trunk).
    fn randomize(model: &mut Model, name: &str, seed: u64) {
        let spec = model
            .tensors()
            .into_iter()
            .find(|s| s.name == name)
            .expect("tensor name");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.2).expect("std");
        for v in &mut model.params_mut()[spec.offset..spec.offset + spec.len] {
            *v = normal.sample(&mut rng);
        }
    }

    #[test]
    fn zero_head_gives_exactly_uniform_probabilities() {
        let model = Model::init(tiny_config(), 11).unwrap();
        let tokens = [1u32, 0, 5, 2];
        let coords = coords5();
        let p = model.forward(&Context::new(&tokens, &coords).unwrap()).unwrap();
        assert_eq!(p.len(), 6);
        for &v in &p {
            assert_eq!(v, p[0], "all entries equal exactly");
        }
        assert!((p[0] - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn probabilities_normalize_and_are_deterministic() {
        let mut model = Model::init(tiny_config(), 11).unwrap();
        randomize(&mut model, "head.w", 5);
        randomize(&mut model, "head.b", 6);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..50 {
            let tokens: Vec<u32> = (0..4).map(|_| rng.gen_range(0..6)).collect();
            let coords: Vec<Coord> = (0..5)
                .map(|_| Coord {
                    x: rng.gen_range(0..5),
                    y: rng.gen_range(0..5),
                    t: rng.gen_range(0..1000),
                })
                .collect();
            let ctx = Context::new(&tokens, &coords).unwrap();
            let p = model.forward(&ctx).unwrap();
            let sum: f64 = p.iter().sum();
            assert!((sum - 1.0).abs() < 1e-5, "sum {sum}");
            assert!(p.iter().all(|&v| v > 0.0));
            assert_eq!(model.forward(&ctx).unwrap(), p, "bitwise repeatable");
        }
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let model = Model::init(tiny_config(), 11).unwrap();
        let coords = coords5();
        assert!(matches!(
            model.forward(&Context::new(&[1, 0, 6, 2], &coords).unwrap()),
            Err(Error::TokenOutOfRange { token: 6, vocab: 6 })
        ));
        assert!(matches!(
            model.forward(&Context::new(&[1, 0], &coords[..3]).unwrap()),
            Err(Error::BadContextLen { expected: 4, actual: 2 })
        ));
        let mut bad = coords.clone();
        bad[2].x = 5;
        assert!(matches!(
            model.forward(&Context::new(&[1, 0, 5, 2], &bad).unwrap()),
            Err(Error::CoordOutOfEmbed { x: 5, .. })
        ));
    }

    /// Independent arithmetic oracle: a 1-layer, single-head model where
    /// the last position's attention is computed over every position with
    /// no masking code at all. For one layer the causal output at the last
    /// slot must equal this brute-force value.
    #[test]
    fn forward_matches_bruteforce_unmasked_single_layer() {
        let cfg = ModelConfig {
            layers: 1,
            hidden: 4,
            heads: 1,
            vocab: 5,
            context: 3,
            max_rows: 4,
            max_cols: 4,
            max_time: 5,
        };
        let mut model = Model::init(cfg, 21).unwrap();
        randomize(&mut model, "head.w", 1);
        randomize(&mut model, "head.b", 2);
        randomize(&mut model, "ln1.shift", 3);
        randomize(&mut model, "ln2.shift", 4);
        randomize(&mut model, "attn.b_qkv", 5);
        randomize(&mut model, "attn.b_out", 6);
        randomize(&mut model, "ffn.b_in", 7);
        randomize(&mut model, "ffn.b_out", 8);
        let tokens = [3u32, 0, 4];
        let coords = [
            Coord { x: 0, y: 3, t: 0 },
            Coord { x: 2, y: 2, t: 1 },
            Coord { x: 3, y: 0, t: 2 },
            Coord { x: 1, y: 1, t: 3 },
        ];
        let got = model.forward(&Context::new(&tokens, &coords).unwrap()).unwrap();
        let want = naive_last_position_probs(&model, &tokens, &coords);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-9 * w.abs().max(1.0), "{got:?} vs {want:?}");
        }
    }

    /// The brute-force reference used above: plain nested loops, no mask.
    fn naive_last_position_probs(model: &Model, tokens: &[u32], coords: &[Coord]) -> Vec<f64> {
        let cfg = model.config();
        let (c, d) = (cfg.context as usize, cfg.hidden as usize);
        let f = FFN_MULT * d;
        let v = cfg.vocab as usize;
        let p = model.params();
        let o = model.offsets();
        let lo = o.layers[0];
        let table = |base: usize, idx: usize, j: usize| p[base + idx * d + j];

        let ln = |x: &[f64], g: usize, b: usize| -> Vec<f64> {
            let mean = x.iter().sum::<f64>() / x.len() as f64;
            let var = x.iter().map(|&xi| (xi - mean) * (xi - mean)).sum::<f64>() / x.len() as f64;
            (0..x.len())
                .map(|j| p[g + j] * (x[j] - mean) / libm::sqrt(var + LN_EPS) + p[b + j])
                .collect()
        };

        // Embeddings, target coords added at the last slot.
        let mut h: Vec<Vec<f64>> = (0..c)
            .map(|i| {
                (0..d)
                    .map(|j| {
                        table(o.tok, tokens[i] as usize, j)
                            + table(o.row, coords[i].x as usize, j)
                            + table(o.col, coords[i].y as usize, j)
                            + table(o.time, (coords[i].t % cfg.max_time) as usize, j)
                    })
                    .collect()
            })
            .collect();
        for j in 0..d {
            h[c - 1][j] += table(o.row, coords[c].x as usize, j)
                + table(o.col, coords[c].y as usize, j)
                + table(o.time, (coords[c].t % cfg.max_time) as usize, j);
        }

        let a: Vec<Vec<f64>> = h.iter().map(|r| ln(r, lo.ln1_g, lo.ln1_b)).collect();
        let qkv: Vec<Vec<f64>> = a
            .iter()
            .map(|r| {
                (0..3 * d)
                    .map(|j| {
                        p[lo.b_qkv + j]
                            + (0..d).map(|i| r[i] * p[lo.w_qkv + i * 3 * d + j]).sum::<f64>()
                    })
                    .collect()
            })
            .collect();
        // Unmasked attention for the last query over all positions.
        let q = &qkv[c - 1][..d];
        let scale = 1.0 / libm::sqrt(d as f64);
        let scores: Vec<f64> = (0..c)
            .map(|j| (0..d).map(|t| q[t] * qkv[j][d + t]).sum::<f64>() * scale)
            .collect();
        let smax = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ws: Vec<f64> = scores.iter().map(|&s| libm::exp(s - smax)).collect();
        let wsum: f64 = ws.iter().sum();
        let mix: Vec<f64> = (0..d)
            .map(|t| (0..c).map(|j| ws[j] / wsum * qkv[j][2 * d + t]).sum::<f64>())
            .collect();
        let atto: Vec<f64> = (0..d)
            .map(|j| p[lo.b_o + j] + (0..d).map(|i| mix[i] * p[lo.w_o + i * d + j]).sum::<f64>())
            .collect();
        let h_mid: Vec<f64> = (0..d).map(|j| h[c - 1][j] + atto[j]).collect();

        let m = ln(&h_mid, lo.ln2_g, lo.ln2_b);
        let u: Vec<f64> = (0..f)
            .map(|j| p[lo.b_fc1 + j] + (0..d).map(|i| m[i] * p[lo.w_fc1 + i * f + j]).sum::<f64>())
            .collect();
        let g: Vec<f64> = u
            .iter()
            .map(|&x| 0.5 * x * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2)))
            .collect();
        let ffn: Vec<f64> = (0..d)
            .map(|j| p[lo.b_fc2 + j] + (0..f).map(|i| g[i] * p[lo.w_fc2 + i * d + j]).sum::<f64>())
            .collect();
        let h_out: Vec<f64> = (0..d).map(|j| h_mid[j] + ffn[j]).collect();

        let z = ln(&h_out, o.lnf_g, o.lnf_b);
        let logits: Vec<f64> = (0..v)
            .map(|j| p[o.head_b + j] + (0..d).map(|i| z[i] * p[o.head_w + i * v + j]).sum::<f64>())
            .collect();
        let lmax = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let es: Vec<f64> = logits.iter().map(|&s| libm::exp(s - lmax)).collect();
        let esum: f64 = es.iter().sum();
        es.iter().map(|&e| e / esum).collect()
    }

    /// Causal mask probe on a 2-layer model: changing only the last
    /// context token must leave the first layer's outputs at every earlier
    /// position bitwise unchanged.
    #[test]
    fn earlier_positions_cannot_see_later_tokens() {
        let cfg = ModelConfig { layers: 2, ..tiny_config() };
        let mut model = Model::init(cfg, 9).unwrap();
        randomize(&mut model, "head.w", 1);
        let coords = coords5();
        let (c, d) = (4usize, 8usize);

        let mut t1 = net::Trace::new();
        net::forward_logits(&model, &[1, 0, 5, 2], &coords, Some(&mut t1)).unwrap();
        let mut t2 = net::Trace::new();
        net::forward_logits(&model, &[1, 0, 5, 3], &coords, Some(&mut t2)).unwrap();

        // hs[1] is the output of layer 0 (input to layer 1).
        let (a, b) = (&t1.hs[1], &t2.hs[1]);
        assert_eq!(&a[..(c - 1) * d], &b[..(c - 1) * d], "earlier rows identical");
        assert_ne!(&a[(c - 1) * d..], &b[(c - 1) * d..], "last row must differ");

        // And the final distribution differs: the changed token is used.
        let p1 = model.forward(&Context::new(&[1, 0, 5, 2], &coords).unwrap()).unwrap();
        let p2 = model.forward(&Context::new(&[1, 0, 5, 3], &coords).unwrap()).unwrap();
        assert_ne!(p1, p2);
        // Changing the first token changes p as well.
        let p3 = model.forward(&Context::new(&[2, 0, 5, 2], &coords).unwrap()).unwrap();
        assert_ne!(p1, p3);
        // Identical contexts give identical p.
        let p4 = model.forward(&Context::new(&[1, 0, 5, 2], &coords).unwrap()).unwrap();
        assert_eq!(p1, p4);
    }

    #[test]
    fn loss_trivial_cases() {
        let mids = [0.0, 1.0, 2.0, 3.0];
        let onehot = [0.0, 0.0, 1.0, 0.0];
        let l = hybrid_loss(&onehot, 2, &mids, 0.7).unwrap();
        assert_eq!(l.ce, 0.0);
        assert_eq!(l.mse, 0.0);
        assert_eq!(l.total, 0.0);

        let p = [0.1, 0.2, 0.3, 0.4];
        let l0 = hybrid_loss(&p, 1, &mids, 0.0).unwrap();
        assert_eq!(l0.total, l0.ce, "alpha 0 reduces to cross-entropy");
        // Monotone non-decreasing in alpha for p != one-hot.
        let mut last = l0.total;
        for alpha in [0.01, 0.1, 0.5, 2.0] {
            let l = hybrid_loss(&p, 1, &mids, alpha).unwrap();
            assert!(l.total >= last);
            last = l.total;
        }
        assert!(hybrid_loss(&p, 4, &mids, 0.1).is_err());
    }

    /// Central finite differences over every parameter of a tiny model.
    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let mut model = Model::init(tiny_config(), 42).unwrap();
        randomize(&mut model, "head.w", 1);
        randomize(&mut model, "head.b", 2);
        let tokens = [1u32, 0, 5, 2];
        let coords = coords5();
        let midpoints = [-1.0, -0.3, 0.1, 0.4, 0.9, 1.7];
        let alpha = 0.37;
        let target = 3u32;

        let mut trace = net::Trace::new();
        let logits = net::forward_logits(&model, &tokens, &coords, Some(&mut trace)).unwrap();
        let probs = net::softmax(&logits);
        let mut dlogits = alloc::vec![0.0f64; 6];
        net::loss_and_dlogits(&probs, target, &midpoints, alpha, &mut dlogits);
        let mut grads = alloc::vec![0.0f64; model.param_count()];
        net::backward(&model, &tokens, &coords, &trace, &dlogits, &mut grads);

        let loss_at = |model: &Model| -> f64 {
            let logits = net::forward_logits(model, &tokens, &coords, None).unwrap();
            let probs = net::softmax(&logits);
            hybrid_loss(&probs, target, &midpoints, alpha).unwrap().total
        };
        let mut worst = 0.0f64;
        for i in 0..model.param_count() {
            let orig = model.params()[i];
            let h = 1e-5 * (1.0 + orig.abs());
            model.params_mut()[i] = orig + h;
            let up = loss_at(&model);
            model.params_mut()[i] = orig - h;
            let down = loss_at(&model);
            model.params_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let rel = (grads[i] - numeric).abs() / (grads[i].abs() + numeric.abs()).max(1e-7);
            worst = worst.max(rel);
            assert!(
                rel <= 1e-3,
                "param {i}: analytic {} vs numeric {numeric} (rel {rel})",
                grads[i]
            );
        }
        assert!(worst > 0.0, "finite differences actually ran");
    }

    #[test]
    fn sampler_balances_skewed_targets() {
        // 900 zeros then 100 ones, shuffled deterministically.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tokens = alloc::vec![0u32; 900];
        tokens.extend(core::iter::repeat(1).take(100));
        for i in (1..tokens.len()).rev() {
            tokens.swap(i, rng.gen_range(0..=i));
        }
        let c = 8u32;
        let mut sampler = Sampler::new(SamplingKind::TargetAware, &tokens, c, 1000).unwrap();
        let mut counts = [0u64; 2];
        for _ in 0..1000 {
            let pos = sampler.draw(&mut rng);
            counts[tokens[pos as usize] as usize] += 1;
        }
        for &n in &counts {
            assert!((420..=580).contains(&n), "round-robin is near-even: {counts:?}");
        }

        let mut random = Sampler::new(SamplingKind::Random, &tokens, c, 1000).unwrap();
        let mut rcounts = [0u64; 2];
        for _ in 0..1000 {
            let pos = random.draw(&mut rng);
            rcounts[tokens[pos as usize] as usize] += 1;
        }
        assert!(rcounts[0] > 800, "random sampling follows the skew: {rcounts:?}");

        // Max/min target-frequency ratio stays bounded for a larger vocab.
        let vocab = 5u32;
        let mut tokens2 = Vec::new();
        for (tok, reps) in [(0u32, 2000), (1, 300), (2, 80), (3, 40), (4, 20)] {
            tokens2.extend(core::iter::repeat(tok).take(reps));
        }
        for i in (1..tokens2.len()).rev() {
            tokens2.swap(i, rng.gen_range(0..=i));
        }
        let draws = 100 * vocab as usize * 2;
        let mut s2 = Sampler::new(SamplingKind::TargetAware, &tokens2, c, draws as u64).unwrap();
        let mut c2 = [0u64; 5];
        for _ in 0..draws {
            let pos = s2.draw(&mut rng);
            c2[tokens2[pos as usize] as usize] += 1;
        }
        let max = *c2.iter().max().unwrap() as f64;
        let min = *c2.iter().min().unwrap() as f64;
        assert!(max / min <= 3.0, "ratio {} for {c2:?}", max / min);
    }

    #[test]
    fn sampler_rejects_sequences_without_targets() {
        let tokens = alloc::vec![0u32; 8];
        assert_eq!(
            Sampler::new(SamplingKind::TargetAware, &tokens, 8, 10).unwrap_err(),
            Error::NoCandidates
        );
    }

    #[test]
    fn uniform_sampler_covers_the_range_deterministically() {
        let tokens: Vec<u32> = (0..100).map(|i| i % 3).collect();
        let mut s = Sampler::new(SamplingKind::Uniform, &tokens, 10, 90).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut seen = alloc::vec![false; 100];
        for _ in 0..90 {
            let pos = s.draw(&mut rng) as usize;
            assert!((10..100).contains(&pos));
            seen[pos] = true;
        }
        assert_eq!(seen[10..].iter().filter(|&&b| b).count(), 90, "full sweep");
    }

    /// Builds the period-4 token sequence used in the training tests.
    fn periodic_sequence(len: u32) -> (crate::quant::TokenSequence, crate::quant::QuantizerModel) {
        let dims = Dims::new(len, 1, 1).unwrap();
        let tokens: Vec<u32> = (0..len).map(|i| i % 4).collect();
        let coords = stream_coords(dims, LayoutKind::RowMajor);
        let seq = crate::quant::TokenSequence {
            tokens,
            coords,
            dims,
            layout: LayoutKind::RowMajor,
        };
        let values: Vec<f64> = (0..len).map(|i| f64::from(i % 4)).collect();
        let field = Field::new(dims, Precision::F64, values).unwrap();
        let (quant, _) = fit_field(&field, 4, 1e-3, &FitParams::default()).unwrap();
        (seq, quant)
    }

    fn periodic_model_config() -> ModelConfig {
        ModelConfig {
            layers: 1,
            hidden: 32,
            heads: 2,
            vocab: 4,
            context: 8,
            max_rows: 1,
            max_cols: 1,
            max_time: 16,
        }
    }

    #[test]
    fn training_learns_a_periodic_sequence() {
        let (seq, quant) = periodic_sequence(512);
        let training = TrainingConfig {
            steps: StepCount::Fixed(600),
            batch: 8,
            lr: 0.5,
            seed: 7,
            ..TrainingConfig::default()
        };
        let (model, report) =
            train(&seq, &quant, &periodic_model_config(), &training).unwrap();
        assert!(
            report.final_top1 >= 0.99,
            "final top-1 accuracy {}",
            report.final_top1
        );
        assert_eq!(report.steps.len(), 600);
        // Loss went down substantially from the uniform baseline ln(4).
        let first = report.steps.first().unwrap().total;
        let last = report.steps.last().unwrap().total;
        assert!(last < 0.25 * first, "loss {first} -> {last}");
        assert_eq!(model.param_count(), model.tensors().iter().map(|s| s.len).sum::<usize>());
    }

    #[test]
    fn zero_steps_returns_the_initialization() {
        let (seq, quant) = periodic_sequence(64);
        let cfg = periodic_model_config();
        let training = TrainingConfig {
            steps: StepCount::Fixed(0),
            seed: 3,
            ..TrainingConfig::default()
        };
        let (model, report) = train(&seq, &quant, &cfg, &training).unwrap();
        assert_eq!(model, Model::init(cfg, 3).unwrap());
        assert!(report.steps.is_empty());
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let (seq, quant) = periodic_sequence(128);
        let cfg = periodic_model_config();
        let training = TrainingConfig {
            steps: StepCount::Fixed(25),
            batch: 4,
            seed: 99,
            ..TrainingConfig::default()
        };
        let (m1, r1) = train(&seq, &quant, &cfg, &training).unwrap();
        let (m2, r2) = train(&seq, &quant, &cfg, &training).unwrap();
        assert_eq!(m1.to_checkpoint_bytes(), m2.to_checkpoint_bytes());
        assert_eq!(r1, r2);
        // A different seed gives a different model.
        let other = TrainingConfig { seed: 100, ..training };
        let (m3, _) = train(&seq, &quant, &cfg, &other).unwrap();
        assert_ne!(m1.to_checkpoint_bytes(), m3.to_checkpoint_bytes());
    }

    #[test]
    fn adam_also_trains_deterministically() {
        let (seq, quant) = periodic_sequence(128);
        let cfg = periodic_model_config();
        let training = TrainingConfig {
            steps: StepCount::Fixed(25),
            batch: 4,
            lr: 0.01,
            optimizer: OptimizerKind::Adam,
            seed: 5,
            ..TrainingConfig::default()
        };
        let (m1, _) = train(&seq, &quant, &cfg, &training).unwrap();
        let (m2, _) = train(&seq, &quant, &cfg, &training).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn absurd_learning_rate_reports_divergence() {
        // Random tokens are unlearnable, so a huge step size cannot luck
        // into a zero-loss fixed point the way it can on a separable task.
        let (mut seq, quant) = periodic_sequence(128);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for t in &mut seq.tokens {
            *t = rng.gen_range(0..4);
        }
        let training = TrainingConfig {
            steps: StepCount::Fixed(200),
            lr: 1e12,
            seed: 1,
            ..TrainingConfig::default()
        };
        match train(&seq, &quant, &periodic_model_config(), &training) {
            Err(Error::TrainDiverged { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn train_validates_inputs() {
        let (seq, quant) = periodic_sequence(64);
        let cfg = periodic_model_config();
        let bad = TrainingConfig { alpha: -1.0, ..TrainingConfig::default() };
        assert!(matches!(
            train(&seq, &quant, &cfg, &bad),
            Err(Error::BadTrainConfig(_))
        ));
        let wrong_vocab = ModelConfig { vocab: 8, ..cfg };
        assert!(matches!(
            train(&seq, &quant, &wrong_vocab, &TrainingConfig::default()),
            Err(Error::BadTrainConfig(_))
        ));
        let wide = ModelConfig { max_rows: 0, ..cfg };
        assert!(wide.validate().is_err());
        let (short, quant2) = periodic_sequence(8);
        assert!(matches!(
            train(&short, &quant2, &cfg, &TrainingConfig::default()),
            Err(Error::SequenceTooShort { .. })
        ));
    }

    #[test]
    fn checkpoints_round_trip_bitwise() {
        let (seq, quant) = periodic_sequence(128);
        let training = TrainingConfig {
            steps: StepCount::Fixed(10),
            batch: 4,
            seed: 13,
            ..TrainingConfig::default()
        };
        let (model, _) = train(&seq, &quant, &periodic_model_config(), &training).unwrap();
        let bytes = model.to_checkpoint_bytes();
        let ckpt = parse_checkpoint(&bytes).unwrap();
        assert_eq!(ckpt.model, model, "f32-rounded params reload exactly");
        assert_eq!(ckpt.model.to_checkpoint_bytes(), bytes, "save-load-save identity");
        assert_eq!(checkpoint_hash(&bytes).unwrap(), ckpt.hash);

        // Tampering anywhere is caught by the content hash.
        for i in [0usize, 9, 40, bytes.len() / 2, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[i] ^= 0x10;
            assert!(parse_checkpoint(&bad).is_err(), "flip at {i}");
        }
        assert!(parse_checkpoint(&bytes[..bytes.len() - 5]).is_err());
        assert!(parse_checkpoint(b"LLMCKPT0").is_err());
    }

    /// Pins the checkpoint format: a fixed-seed initialization must
    /// serialize to these exact bytes.
    #[test]
    fn checkpoint_format_freeze() {
        let model = Model::init(tiny_config(), 2024).unwrap();
        let bytes = model.to_checkpoint_bytes();
        assert_eq!(bytes.len(), 48 + 4 * model.param_count() + 32);
        assert_eq!(bytes.len(), 4584);
        assert_eq!(crc32fast::hash(&bytes), 2259701120);
    }

    /// End to end through the codec: compress with a freshly trained
    /// transformer, decompress with the model reloaded from its
    /// checkpoint, and recover the exact token stream.
    #[test]
    fn trained_model_round_trips_through_the_codec() {
        use crate::codec::{compress, decompress_tokens, PredictorInfo, QuantizerSpec};
        use crate::field::{gen_synthetic, SyntheticKind};

        let dims = Dims::new(6, 6, 6).unwrap();
        let field = gen_synthetic(SyntheticKind::SmoothAdvection, dims, 17);
        let params = FitParams::default();
        let (quant, _) = fit_field(&field, 12, 1e-3, &params).unwrap();
        let (seq, residuals) = quantize_field(&field, &quant, LayoutKind::ZOrder).unwrap();

        let cfg = ModelConfig {
            layers: 1,
            hidden: 16,
            heads: 2,
            vocab: 12,
            context: 6,
            max_rows: 6,
            max_cols: 6,
            max_time: 8,
        };
        let training = TrainingConfig {
            steps: StepCount::Fixed(40),
            batch: 4,
            seed: 21,
            ..TrainingConfig::default()
        };
        let (model, _) = train(&seq, &quant, &cfg, &training).unwrap();
        let bytes = model.to_checkpoint_bytes();
        let ckpt = parse_checkpoint(&bytes).unwrap();

        let tp = TransformerPredictor::new(model);
        let info = PredictorInfo::checkpointed(&tp, ckpt.hash);
        let archive = compress(
            &field,
            1e-3,
            QuantizerSpec::Model(&quant),
            &info,
            4,
            LayoutKind::ZOrder,
        )
        .unwrap();
        assert_eq!(archive.header.predictor, PredictorKind::Transformer);
        assert_eq!(archive.header.checkpoint_hash, ckpt.hash);

        // Decode with the reloaded model, as a different machine would.
        let tp2 = TransformerPredictor::new(ckpt.model);
        let info2 = PredictorInfo::checkpointed(&tp2, ckpt.hash);
        let (seq2, res2) = decompress_tokens(&archive, &info2).unwrap();
        assert_eq!(seq2.tokens, seq.tokens);
        assert_eq!(res2.residuals, residuals.residuals);

        // A predictor with a different hash is refused.
        let wrong = PredictorInfo::checkpointed(&tp2, [9; 32]);
        assert!(matches!(
            decompress_tokens(&archive, &wrong),
            Err(Error::PredictorMismatch(_))
        ));
    }

    #[test]
    fn target_aware_sample_returns_well_formed_windows() {
        let (seq, _) = periodic_sequence(64);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = target_aware_sample(&seq, 8, 12, &mut rng).unwrap();
        assert_eq!(batch.len(), 12);
        for (ctx, target) in &batch {
            assert_eq!(ctx.tokens.len(), 8);
            assert_eq!(ctx.coords.len(), 9);
            assert!(*target < 4);
        }
    }
}
