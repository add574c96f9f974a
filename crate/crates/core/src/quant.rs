//! Lloyd-Max scalar quantization plus the residual stream that upholds the
//! pointwise error bound when bins are wider than the bound allows.
//!
//! The error-bound bookkeeping is deliberately conservative in two ways:
//!
//! * A bin is "narrow" (needs no residual) only if the worst-case distance
//!   from its reconstruction level to any reachable value in the bin is
//!   within the bound. Levels are conditional means, not bin centers, so the
//!   naive half-width test would under-cover off-center levels.
//! * All classification and residual rounding happens against a working
//!   bound slightly inside e_abs. The shave covers float rounding in the
//!   reconstruction arithmetic and, for f32 fields, the final cast back to
//!   f32. The decoder recomputes the identical working bound from header
//!   fields, so both sides agree bit for bit and the user-facing bound holds
//!   with zero tolerance after the cast.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::field::{ErrorBound, Field, Precision};
use crate::layout::{flatten, Coord, LayoutKind};

/// Largest supported vocabulary. Keeps entropy-coder frequency totals far
/// below the range coder's renormalization floor.
pub const MAX_VOCAB: u32 = 1 << 16;

/// Stopping and subsampling knobs for `lloyd_max_fit` / `fit_field`.
#[derive(Debug, Clone, Copy)]
pub struct FitParams {
    pub max_iters: u32,
    /// Convergence threshold as a fraction of the sample range.
    pub tol_rel: f64,
    /// Fit on at most this many samples (seeded choice; the field min and
    /// max are always included so the fit range equals the field range).
    pub max_samples: usize,
    pub seed: u64,
}

impl Default for FitParams {
    fn default() -> Self {
        FitParams {
            max_iters: 200,
            tol_rel: 1e-9,
            max_samples: 1_000_000,
            seed: 0xC0FFEE,
        }
    }
}

/// The working bound used for narrow/wide classification and the residual
/// grid: e_abs minus a guard band for reconstruction-arithmetic rounding
/// and (for f32 fields) the final precision cast. Pure function of header
/// fields, recomputed identically at decode time.
pub fn working_bound(e_abs: f64, vmin: f64, vmax: f64, precision: Precision) -> Result<f64> {
    if !e_abs.is_finite() || e_abs <= 0.0 {
        return Err(Error::BadErrorBound { value: e_abs });
    }
    // A degenerate range means a constant field: every bin reconstructs the
    // constant exactly, residuals are never emitted, no guard band needed.
    if !(vmax > vmin) {
        return Ok(e_abs);
    }
    // Reconstructions stay within the data range plus one bound.
    let maxmag = libm::fmax(libm::fabs(vmin), libm::fabs(vmax)) + e_abs;
    let cast_slack = match precision {
        Precision::F64 => 0.0,
        Precision::F32 => {
            let g = maxmag as f32;
            if g.is_finite() {
                (g.next_up() as f64) - (g as f64)
            } else {
                return Err(Error::BoundTooTight);
            }
        }
    };
    // One correctly rounded multiply plus one add leave the reconstruction
    // within ~2.2e-16 * maxmag of the exact grid point; 1e-15 keeps margin.
    let arith_slack = libm::fmax(e_abs * 1e-9, maxmag * 1e-15);
    let e_work = e_abs - cast_slack - arith_slack;
    if e_work <= 0.0 {
        return Err(Error::BoundTooTight);
    }
    Ok(e_work)
}

/// A fitted scalar quantizer. `boundaries` are the V-1 interior thresholds
/// (implicit -inf/+inf at the ends); bin v covers [b_v, b_{v+1}) and ties on
/// a boundary go to the higher bin. `levels` are the reconstruction values.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizerModel {
    vocab: u32,
    boundaries: Vec<f64>,
    levels: Vec<f64>,
    wide_bin: Vec<bool>,
    e_abs: f64,
    e_work: f64,
    data_min: f64,
    data_max: f64,
}

impl QuantizerModel {
    pub fn vocab(&self) -> u32 {
        self.vocab
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn wide_bin(&self) -> &[bool] {
        &self.wide_bin
    }

    pub fn e_abs(&self) -> f64 {
        self.e_abs
    }

    pub fn e_work(&self) -> f64 {
        self.e_work
    }

    pub fn data_min(&self) -> f64 {
        self.data_min
    }

    pub fn data_max(&self) -> f64 {
        self.data_max
    }

    pub fn any_wide(&self) -> bool {
        self.wide_bin.iter().any(|&w| w)
    }

    /// Rebuild a model from serialized parts plus header-derived bounds.
    /// Validates the structural invariants the decoder relies on.
    pub fn from_parts(
        vocab: u32,
        boundaries: Vec<f64>,
        levels: Vec<f64>,
        wide_bin: Vec<bool>,
        e_abs: f64,
        e_work: f64,
        data_min: f64,
        data_max: f64,
    ) -> Result<QuantizerModel> {
        if vocab < 2 || vocab > MAX_VOCAB {
            return Err(Error::BadVocab {
                vocab,
                max: MAX_VOCAB,
            });
        }
        if boundaries.len() != vocab as usize - 1
            || levels.len() != vocab as usize
            || wide_bin.len() != vocab as usize
        {
            return Err(Error::CorruptStream("quantizer section shape"));
        }
        if boundaries.windows(2).any(|w| !(w[0] < w[1]))
            || boundaries.iter().any(|b| !b.is_finite())
            || levels.iter().any(|l| !l.is_finite())
        {
            return Err(Error::CorruptStream("quantizer thresholds not increasing"));
        }
        Ok(QuantizerModel {
            vocab,
            boundaries,
            levels,
            wide_bin,
            e_abs,
            e_work,
            data_min,
            data_max,
        })
    }

    /// Bin index containing x: binary search, ties on a boundary go up.
    pub fn quantize(&self, x: f64) -> u32 {
        self.boundaries.partition_point(|&b| b <= x) as u32
    }

    /// Reconstruction value. A residual must be present exactly when the
    /// token's bin is wide; the residual shifts the level on the working
    /// grid of step 2*e_work.
    pub fn dequantize(&self, token: u32, residual: Option<i64>) -> Result<f64> {
        if token >= self.vocab {
            return Err(Error::TokenOutOfRange {
                token,
                vocab: self.vocab,
            });
        }
        let level = self.levels[token as usize];
        match (self.wide_bin[token as usize], residual) {
            (false, None) => Ok(level),
            (true, Some(q)) => Ok(level + q as f64 * (2.0 * self.e_work)),
            (true, None) => Err(Error::ResidualMissing { token }),
            (false, Some(_)) => Err(Error::ResidualUnexpected { token }),
        }
    }

    /// Clamped-bin midpoints, used as the numeric target of the hybrid
    /// training loss. Edge bins are clamped to the observed fit range so
    /// every midpoint is finite.
    pub fn midpoints(&self) -> Vec<f64> {
        let v = self.vocab as usize;
        let mut mids = Vec::with_capacity(v);
        for i in 0..v {
            let lo = if i == 0 { self.data_min } else { self.boundaries[i - 1] };
            let hi = if i == v - 1 { self.data_max } else { self.boundaries[i] };
            mids.push(0.5 * (lo + hi));
        }
        mids
    }

    /// Worst-case distance from the level to any reachable value of bin v,
    /// where "reachable" clamps the bin to the observed data range. Returns
    /// 0 for bins whose clamped interval is empty (never hit by this data).
    pub fn max_bin_error(&self, v: u32) -> f64 {
        let i = v as usize;
        let lo = if i == 0 {
            self.data_min
        } else {
            libm::fmax(self.boundaries[i - 1], self.data_min)
        };
        let hi = if i == self.vocab as usize - 1 {
            self.data_max
        } else {
            libm::fmin(self.boundaries[i], self.data_max)
        };
        if lo > hi {
            return 0.0;
        }
        let r = self.levels[i];
        libm::fmax(r - lo, hi - r)
    }

    /// Pick the residual for sample x in wide bin `token`, verifying the
    /// bound on the value the decoder will actually reconstruct (including
    /// the final precision cast). The working-bound guard band guarantees a
    /// candidate exists.
    pub fn choose_residual(&self, x: f64, token: u32, precision: Precision) -> Result<i64> {
        let level = self.levels[token as usize];
        let step = 2.0 * self.e_work;
        let q0 = libm::rint((x - level) / step) as i64;
        let mut best: Option<(f64, i64)> = None;
        for q in [q0, q0 - 1, q0 + 1] {
            let recon = precision.round(self.dequantize(token, Some(q))?);
            let err = libm::fabs(x - recon);
            if best.map_or(true, |(e, _)| err < e) {
                best = Some((err, q));
            }
        }
        let (err, q) = best.expect("candidate list is nonempty");
        if err <= self.e_abs {
            Ok(q)
        } else {
            Err(Error::Internal("residual selection exceeded the bound"))
        }
    }
}

/// Lloyd-Max fit returning the per-iteration MSE trace alongside the model.
/// Index 0 of the trace is the MSE of the uniform-bin initialization.
pub fn lloyd_max_fit_traced(
    samples: &[f64],
    vocab: u32,
    e_abs: f64,
    precision: Precision,
    params: &FitParams,
) -> Result<(QuantizerModel, Vec<f64>)> {
    if vocab < 2 || vocab > MAX_VOCAB {
        return Err(Error::BadVocab {
            vocab,
            max: MAX_VOCAB,
        });
    }
    if samples.is_empty() {
        return Err(Error::NoSamples);
    }
    if !e_abs.is_finite() || e_abs <= 0.0 {
        return Err(Error::BadErrorBound { value: e_abs });
    }
    let mut sorted = samples.to_vec();
    for (i, &s) in sorted.iter().enumerate() {
        if !s.is_finite() {
            return Err(Error::NonFiniteSample { index: i as u64 });
        }
    }
    sorted.sort_by(f64::total_cmp);
    let lo = sorted[0];
    let hi = sorted[sorted.len() - 1];
    let e_work = working_bound(e_abs, lo, hi, precision)?;
    let v = vocab as usize;

    if lo == hi {
        // Degenerate data: one effective level, bins collapsed onto it.
        // Boundaries are nudged upward to stay strictly increasing; visited
        // only by bin quantize(lo) = 0, which reconstructs exactly.
        let mut boundaries = Vec::with_capacity(v - 1);
        let mut b = lo;
        for _ in 0..v - 1 {
            b = b.next_up();
            boundaries.push(b);
        }
        let model = QuantizerModel {
            vocab,
            boundaries,
            levels: alloc::vec![lo; v],
            wide_bin: alloc::vec![false; v],
            e_abs,
            e_work,
            data_min: lo,
            data_max: hi,
        };
        return Ok((model, alloc::vec![0.0]));
    }

    // Prefix sums of x and x^2 over the sorted samples make per-bin means
    // and the global MSE O(V) per iteration.
    let n = sorted.len();
    let mut psum = Vec::with_capacity(n + 1);
    let mut psq = Vec::with_capacity(n + 1);
    psum.push(0.0f64);
    psq.push(0.0f64);
    for &x in &sorted {
        psum.push(psum.last().unwrap() + x);
        psq.push(psq.last().unwrap() + x * x);
    }

    let range = hi - lo;
    let tol = params.tol_rel * range;
    // Uniform-bin initialization: equispaced boundaries, levels at centers.
    // Centers' adjacent midpoints equal the boundaries, so the start state
    // is already consistent and the MSE trace is monotone from index 0.
    let mut boundaries: Vec<f64> = (1..v).map(|i| lo + range * i as f64 / v as f64).collect();
    let mut levels: Vec<f64> = (0..v)
        .map(|i| lo + range * (i as f64 + 0.5) / v as f64)
        .collect();

    let seg_starts = |boundaries: &[f64]| -> Vec<usize> {
        let mut starts = Vec::with_capacity(v + 1);
        starts.push(0);
        for &b in boundaries {
            starts.push(sorted.partition_point(|&x| x < b));
        }
        starts.push(n);
        starts
    };
    let mse_of = |starts: &[usize], levels: &[f64]| -> f64 {
        let mut total = 0.0;
        for i in 0..v {
            let (a, b) = (starts[i], starts[i + 1]);
            if a == b {
                continue;
            }
            let cnt = (b - a) as f64;
            let s = psum[b] - psum[a];
            let ss = psq[b] - psq[a];
            let r = levels[i];
            total += ss - 2.0 * r * s + cnt * r * r;
        }
        total / n as f64
    };

    let mut trace = Vec::new();
    let mut starts = seg_starts(&boundaries);
    trace.push(mse_of(&starts, &levels));

    for _ in 0..params.max_iters {
        // Levels step: conditional means; empty bins take the midpoint of
        // their boundary interval (clamped to the data range at the edges)
        // which preserves the non-decreasing level order.
        let mut moved = 0.0f64;
        for i in 0..v {
            let (a, b) = (starts[i], starts[i + 1]);
            let new_level = if a == b {
                let blo = if i == 0 { lo } else { boundaries[i - 1] };
                let bhi = if i == v - 1 { hi } else { boundaries[i] };
                0.5 * (blo + bhi)
            } else {
                (psum[b] - psum[a]) / (b - a) as f64
            };
            moved = libm::fmax(moved, libm::fabs(new_level - levels[i]));
            levels[i] = new_level;
        }
        // Boundaries step: midpoints of adjacent levels, nudged to stay
        // strictly increasing when neighboring levels tie (the zero-width
        // interval holds no samples, so assignments are unaffected).
        for i in 0..v - 1 {
            boundaries[i] = 0.5 * (levels[i] + levels[i + 1]);
        }
        for i in 1..v - 1 {
            if boundaries[i] <= boundaries[i - 1] {
                boundaries[i] = boundaries[i - 1].next_up();
            }
        }
        starts = seg_starts(&boundaries);
        trace.push(mse_of(&starts, &levels));
        if moved < tol {
            break;
        }
    }

    let mut model = QuantizerModel {
        vocab,
        boundaries,
        levels,
        wide_bin: alloc::vec![false; v],
        e_abs,
        e_work,
        data_min: lo,
        data_max: hi,
    };
    for i in 0..vocab {
        model.wide_bin[i as usize] = model.max_bin_error(i) > e_work;
    }
    Ok((model, trace))
}

/// Lloyd-Max fit without the MSE trace.
pub fn lloyd_max_fit(
    samples: &[f64],
    vocab: u32,
    e_abs: f64,
    precision: Precision,
    params: &FitParams,
) -> Result<QuantizerModel> {
    lloyd_max_fit_traced(samples, vocab, e_abs, precision, params).map(|(m, _)| m)
}

/// Fit a quantizer for one field: derives e_abs from epsilon, subsamples
/// deterministically, and always includes the field's extreme samples so
/// the fit range equals the field range (wide-bin coverage then reasons
/// about every value the quantizer can see for this field).
pub fn fit_field(
    field: &Field,
    vocab: u32,
    epsilon: f64,
    params: &FitParams,
) -> Result<(QuantizerModel, ErrorBound)> {
    let bound = ErrorBound::for_field(field, epsilon)?;
    let values = field.values();
    let n = values.len();
    let subsample: Vec<f64> = if n <= params.max_samples {
        values.to_vec()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let mut picked: Vec<f64> = (0..params.max_samples)
            .map(|_| values[rng.gen_range(0..n)])
            .collect();
        picked[0] = field.vmin();
        picked[1] = field.vmax();
        picked
    };
    let model = lloyd_max_fit(&subsample, vocab, bound.e_abs, field.precision(), params)?;
    Ok((model, bound))
}

/// Token stream in flatten order with per-position coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
    pub coords: Vec<Coord>,
    pub dims: crate::field::Dims,
    pub layout: LayoutKind,
}

/// One signed residual per wide-bin token occurrence, in flatten order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResidualStream {
    pub residuals: Vec<i64>,
}

/// Quantize a whole field along a layout. Every emitted (token, residual)
/// pair is verified against the bound on the exact value the decoder will
/// reconstruct, cast to the field's precision.
pub fn quantize_field(
    field: &Field,
    model: &QuantizerModel,
    layout_kind: LayoutKind,
) -> Result<(TokenSequence, ResidualStream)> {
    let (samples, coords, _) = flatten(field, layout_kind);
    let precision = field.precision();
    let mut tokens = Vec::with_capacity(samples.len());
    let mut residuals = Vec::new();
    for &x in &samples {
        let token = model.quantize(x);
        let residual = if model.wide_bin()[token as usize] {
            let q = model.choose_residual(x, token, precision)?;
            residuals.push(q);
            Some(q)
        } else {
            None
        };
        let recon = precision.round(model.dequantize(token, residual)?);
        if libm::fabs(x - recon) > model.e_abs() {
            return Err(Error::Internal("narrow bin exceeded the bound"));
        }
        tokens.push(token);
    }
    Ok((
        TokenSequence {
            tokens,
            coords,
            dims: field.dims(),
            layout: layout_kind,
        },
        ResidualStream { residuals },
    ))
}

/// Invert `quantize_field`: rebuild the row-major field from tokens plus
/// residuals. Residual count must match the wide-bin occurrences exactly.
pub fn dequantize_tokens(
    seq: &TokenSequence,
    residuals: &ResidualStream,
    model: &QuantizerModel,
    precision: Precision,
) -> Result<Field> {
    let mut cursor = 0usize;
    let mut samples = Vec::with_capacity(seq.tokens.len());
    for &token in &seq.tokens {
        if token >= model.vocab() {
            return Err(Error::TokenOutOfRange {
                token,
                vocab: model.vocab(),
            });
        }
        let residual = if model.wide_bin()[token as usize] {
            let q = *residuals
                .residuals
                .get(cursor)
                .ok_or(Error::ResidualUnderrun)?;
            cursor += 1;
            Some(q)
        } else {
            None
        };
        samples.push(precision.round(model.dequantize(token, residual)?));
    }
    if cursor != residuals.residuals.len() {
        return Err(Error::ResidualOverrun {
            extra: (residuals.residuals.len() - cursor) as u64,
        });
    }
    crate::layout::unflatten(&samples, seq.dims, seq.layout, precision)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{gen_synthetic, Dims, SyntheticKind};
    use rand::Rng;

    fn uniform_samples(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()
    }

    #[test]
    fn rejects_bad_vocab() {
        let s = uniform_samples(100, 1);
        assert!(matches!(
            lloyd_max_fit(&s, 1, 0.01, Precision::F64, &FitParams::default()),
            Err(Error::BadVocab { .. })
        ));
        assert!(matches!(
            lloyd_max_fit(&s, MAX_VOCAB + 1, 0.01, Precision::F64, &FitParams::default()),
            Err(Error::BadVocab { .. })
        ));
    }

    #[test]
    fn uniform_v2_converges_to_analytic_optimum() {
        // Analytic Lloyd-Max optimum for Uniform[0,1] with V=2: boundary at
        // 1/2, levels at the conditional means 1/4 and 3/4.
        let s = uniform_samples(100_000, 7);
        let (model, trace) =
            lloyd_max_fit_traced(&s, 2, 0.01, Precision::F64, &FitParams::default()).unwrap();
        assert!((model.boundaries()[0] - 0.5).abs() < 0.01, "{}", model.boundaries()[0]);
        assert!((model.levels()[0] - 0.25).abs() < 0.01);
        assert!((model.levels()[1] - 0.75).abs() < 0.01);
        assert!(trace.len() >= 2);
    }

    #[test]
    fn mse_trace_is_monotone_on_random_datasets() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for case in 0..50 {
            let n = rng.gen_range(200..3000);
            let kind = case % 3;
            let samples: Vec<f64> = match kind {
                0 => (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect(),
                1 => (0..n)
                    .map(|_| {
                        let c = if rng.gen_bool(0.9) { 0.0 } else { 1.0 };
                        c + rng.gen_range(-0.01..0.01)
                    })
                    .collect(),
                _ => (0..n)
                    .map(|_| {
                        let u: f64 = rng.gen_range(0.0f64..1.0);
                        u * u * 10.0
                    })
                    .collect(),
            };
            let vocab = [2u32, 4, 8, 16][case % 4];
            let (_, trace) =
                lloyd_max_fit_traced(&samples, vocab, 0.01, Precision::F64, &FitParams::default())
                    .unwrap();
            for w in trace.windows(2) {
                assert!(
                    w[1] <= w[0] + 1e-12 * (1.0 + w[0].abs()),
                    "case {}: MSE rose {} -> {}",
                    case,
                    w[0],
                    w[1]
                );
            }
        }
    }

    #[test]
    fn two_cluster_data_beats_uniform_quantizer() {
        // 90% of mass near 0.0, 10% near 1.0. The fitted V=2 quantizer must
        // place levels near the clusters, far from the uniform 0.25/0.75.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples: Vec<f64> = (0..20_000)
            .map(|_| {
                let c = if rng.gen_bool(0.9) { 0.0 } else { 1.0 };
                c + rng.gen_range(-0.01..0.01)
            })
            .collect();
        let model =
            lloyd_max_fit(&samples, 2, 0.01, Precision::F64, &FitParams::default()).unwrap();
        assert!((model.levels()[0] - 0.0).abs() < 0.05, "{}", model.levels()[0]);
        assert!((model.levels()[1] - 1.0).abs() < 0.05, "{}", model.levels()[1]);
        // Direct MSE comparison against the uniform initialization.
        let mse = |levels: &[f64], boundary: f64| -> f64 {
            samples
                .iter()
                .map(|&x| {
                    let r = if x < boundary { levels[0] } else { levels[1] };
                    (x - r) * (x - r)
                })
                .sum::<f64>()
                / samples.len() as f64
        };
        let fitted = mse(model.levels(), model.boundaries()[0]);
        let uniform = mse(&[0.25, 0.75], 0.5);
        assert!(fitted < uniform * 0.5);
    }

    #[test]
    fn quantize_matches_linear_scan_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let samples: Vec<f64> = (0..5000).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let model =
            lloyd_max_fit(&samples, 16, 0.01, Precision::F64, &FitParams::default()).unwrap();
        let oracle = |x: f64| -> u32 {
            // Linear scan with the same tie rule: boundary values go up.
            let mut token = 0u32;
            for &b in model.boundaries() {
                if x >= b {
                    token += 1;
                } else {
                    break;
                }
            }
            token
        };
        for _ in 0..10_000 {
            let x = rng.gen_range(-4.0..4.0);
            assert_eq!(model.quantize(x), oracle(x));
        }
        for &b in model.boundaries() {
            assert_eq!(model.quantize(b), oracle(b), "tie at boundary {}", b);
        }
    }

    #[test]
    fn boundary_tie_goes_to_higher_bin() {
        let samples = uniform_samples(1000, 5);
        let model =
            lloyd_max_fit(&samples, 4, 0.01, Precision::F64, &FitParams::default()).unwrap();
        for (i, &b) in model.boundaries().iter().enumerate() {
            assert_eq!(model.quantize(b), i as u32 + 1);
        }
        assert_eq!(model.quantize(f64::NEG_INFINITY.next_up()), 0);
    }

    #[test]
    fn levels_lie_inside_their_bins() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let samples: Vec<f64> = (0..2000).map(|_| rng.gen_range(0.0..100.0)).collect();
            let model =
                lloyd_max_fit(&samples, 8, 0.5, Precision::F64, &FitParams::default()).unwrap();
            for v in 0..model.vocab() as usize {
                let lo = if v == 0 {
                    f64::NEG_INFINITY
                } else {
                    model.boundaries()[v - 1]
                };
                let hi = if v == model.vocab() as usize - 1 {
                    f64::INFINITY
                } else {
                    model.boundaries()[v]
                };
                let r = model.levels()[v];
                assert!(lo <= r && r <= hi, "level {} outside [{}, {}]", r, lo, hi);
            }
            for w in model.boundaries().windows(2) {
                assert!(w[0] < w[1]);
            }
        }
    }

    #[test]
    fn wide_bin_residual_covers_dense_grid() {
        // Every x on a dense grid inside a wide bin must reconstruct within
        // e_abs via the chosen residual.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let samples: Vec<f64> = (0..5000).map(|_| rng.gen_range(0.0..10.0)).collect();
        let e_abs = 0.001;
        let model =
            lloyd_max_fit(&samples, 4, e_abs, Precision::F64, &FitParams::default()).unwrap();
        assert!(model.any_wide(), "V=4 bins over range 10 must be wide at e=0.001");
        for v in 0..4u32 {
            if !model.wide_bin()[v as usize] {
                continue;
            }
            let lo = if v == 0 { model.data_min() } else { model.boundaries()[v as usize - 1] };
            let hi = if v == 3 { model.data_max() } else { model.boundaries()[v as usize] };
            for i in 0..=2000 {
                let x = lo + (hi - lo) * i as f64 / 2000.0;
                if model.quantize(x) != v {
                    continue;
                }
                let q = model.choose_residual(x, v, Precision::F64).unwrap();
                let recon = model.dequantize(v, Some(q)).unwrap();
                assert!((x - recon).abs() <= e_abs);
            }
        }
    }

    #[test]
    fn dequantize_enforces_residual_presence() {
        let samples = uniform_samples(2000, 2);
        let model =
            lloyd_max_fit(&samples, 4, 1e-4, Precision::F64, &FitParams::default()).unwrap();
        let wide = (0..4).find(|&v| model.wide_bin()[v as usize]).unwrap();
        assert!(matches!(
            model.dequantize(wide, None),
            Err(Error::ResidualMissing { .. })
        ));
        let narrow_samples = uniform_samples(2000, 2);
        let narrow_model =
            lloyd_max_fit(&narrow_samples, 256, 0.1, Precision::F64, &FitParams::default())
                .unwrap();
        let narrow = (0..256)
            .find(|&v| !narrow_model.wide_bin()[v as usize])
            .unwrap();
        assert!(matches!(
            narrow_model.dequantize(narrow, Some(1)),
            Err(Error::ResidualUnexpected { .. })
        ));
        assert!(matches!(
            model.dequantize(99, None),
            Err(Error::TokenOutOfRange { .. })
        ));
    }

    #[test]
    fn degenerate_constant_data_reconstructs_exactly() {
        let samples = alloc::vec![5.0; 100];
        let (model, _) =
            lloyd_max_fit_traced(&samples, 8, 1e-300, Precision::F64, &FitParams::default())
                .unwrap();
        let t = model.quantize(5.0);
        assert_eq!(model.dequantize(t, None).unwrap(), 5.0);
        for w in model.boundaries().windows(2) {
            assert!(w[0] < w[1]);
        }
    }

    #[test]
    fn quantize_field_round_trip_meets_bound() {
        for kind in SyntheticKind::ALL {
            for &epsilon in &[1e-2, 1e-3] {
                let field = gen_synthetic(kind, Dims::new(3, 12, 12).unwrap(), 31);
                let (model, bound) =
                    fit_field(&field, 32, epsilon, &FitParams::default()).unwrap();
                let (seq, res) = quantize_field(&field, &model, LayoutKind::ZOrder).unwrap();
                let recon =
                    dequantize_tokens(&seq, &res, &model, field.precision()).unwrap();
                let mut max_err = 0.0f64;
                for (a, b) in field.values().iter().zip(recon.values()) {
                    max_err = max_err.max((a - b).abs());
                }
                assert!(
                    max_err <= bound.e_abs,
                    "{:?} eps {}: max err {} > {}",
                    kind,
                    epsilon,
                    max_err,
                    bound.e_abs
                );
            }
        }
    }

    #[test]
    fn residual_stream_empty_iff_no_wide_bins() {
        let field = gen_synthetic(SyntheticKind::SmoothAdvection, Dims::new(2, 16, 16).unwrap(), 8);
        // Small vocab at a tight bound: wide bins and a nonempty stream.
        let (small, _) = fit_field(&field, 16, 1e-3, &FitParams::default()).unwrap();
        let (_, res_small) = quantize_field(&field, &small, LayoutKind::ZOrder).unwrap();
        assert!(small.any_wide());
        assert!(!res_small.residuals.is_empty());
        // Large vocab at a loose bound: every bin narrow, empty stream.
        let (big, _) = fit_field(&field, 4096, 1e-2, &FitParams::default()).unwrap();
        let (_, res_big) = quantize_field(&field, &big, LayoutKind::ZOrder).unwrap();
        assert!(!big.any_wide());
        assert!(res_big.residuals.is_empty());
    }

    #[test]
    fn residual_count_matches_wide_occurrences() {
        let field = gen_synthetic(SyntheticKind::WhiteNoise, Dims::new(2, 10, 10).unwrap(), 55);
        let (model, _) = fit_field(&field, 8, 1e-3, &FitParams::default()).unwrap();
        let (seq, res) = quantize_field(&field, &model, LayoutKind::RowMajor).unwrap();
        let wide_occurrences = seq
            .tokens
            .iter()
            .filter(|&&t| model.wide_bin()[t as usize])
            .count();
        assert_eq!(res.residuals.len(), wide_occurrences);
    }

    #[test]
    fn f32_precision_round_trip_meets_bound_after_cast() {
        let field = gen_synthetic(SyntheticKind::SinusoidMixture, Dims::new(2, 16, 16).unwrap(), 13)
            .with_precision(Precision::F32);
        for &epsilon in &[1e-2, 1e-4] {
            let (model, bound) = fit_field(&field, 64, epsilon, &FitParams::default()).unwrap();
            let (seq, res) = quantize_field(&field, &model, LayoutKind::ZOrder).unwrap();
            let recon = dequantize_tokens(&seq, &res, &model, Precision::F32).unwrap();
            for (a, b) in field.values().iter().zip(recon.values()) {
                assert_eq!(*b, *b as f32 as f64, "reconstruction must sit on the f32 grid");
                assert!((a - b).abs() <= bound.e_abs);
            }
        }
    }

    #[test]
    fn fit_is_deterministic_under_subsampling() {
        let field = gen_synthetic(SyntheticKind::WhiteNoise, Dims::new(4, 32, 32).unwrap(), 77);
        let params = FitParams {
            max_samples: 1000,
            ..FitParams::default()
        };
        let (a, _) = fit_field(&field, 32, 1e-3, &params).unwrap();
        let (b, _) = fit_field(&field, 32, 1e-3, &params).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.data_min(), field.vmin());
        assert_eq!(a.data_max(), field.vmax());
    }
}
