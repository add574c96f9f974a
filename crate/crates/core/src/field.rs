//! Data model for 3D spatiotemporal fields plus deterministic synthetic
//! generators used by tests and desk-scale experiments.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Sample width of a field on disk. In memory all math runs in f64; an f32
/// field holds values that are exactly representable in f32 so that the
/// round trip through a 4-byte file is bitwise lossless.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn bytes(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }

    pub fn code(self) -> u8 {
        self.bytes() as u8
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            4 => Ok(Precision::F32),
            8 => Ok(Precision::F64),
            _ => Err(Error::BadArchiveField("unknown precision code")),
        }
    }

    /// Round a value to this precision's representable set.
    pub fn round(self, v: f64) -> f64 {
        match self {
            Precision::F32 => v as f32 as f64,
            Precision::F64 => v,
        }
    }
}

/// Grid extent (T, M, N): T timesteps of an M x N spatial grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub t: u32,
    pub m: u32,
    pub n: u32,
}

impl Dims {
    pub fn new(t: u32, m: u32, n: u32) -> Result<Self> {
        if t == 0 || m == 0 || n == 0 {
            return Err(Error::EmptyDims);
        }
        // Cell indices within a timestep must fit in u32, total in u64.
        if (m as u64) * (n as u64) > u32::MAX as u64 {
            return Err(Error::DimsOverflow { t, m, n });
        }
        Ok(Dims { t, m, n })
    }

    /// Cells per timestep.
    pub fn spatial(&self) -> u64 {
        self.m as u64 * self.n as u64
    }

    /// Total sample count T*M*N. Never zero for a validated Dims.
    pub fn len(&self) -> u64 {
        self.t as u64 * self.spatial()
    }
}

/// A fully validated field: finite samples in row-major (t, m, n) order with
/// cached true min/max.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    dims: Dims,
    precision: Precision,
    values: Vec<f64>,
    vmin: f64,
    vmax: f64,
}

impl Field {
    /// Validates length and finiteness, recomputes vmin/vmax. The first
    /// non-finite sample is reported by flat index.
    pub fn new(dims: Dims, precision: Precision, values: Vec<f64>) -> Result<Self> {
        if values.len() as u64 != dims.len() {
            return Err(Error::SampleCountMismatch {
                expected: dims.len(),
                actual: values.len() as u64,
            });
        }
        let mut vmin = f64::INFINITY;
        let mut vmax = f64::NEG_INFINITY;
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFiniteSample { index: i as u64 });
            }
            if v < vmin {
                vmin = v;
            }
            if v > vmax {
                vmax = v;
            }
        }
        Ok(Field {
            dims,
            precision,
            values,
            vmin,
            vmax,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn vmin(&self) -> f64 {
        self.vmin
    }

    pub fn vmax(&self) -> f64 {
        self.vmax
    }

    pub fn vrange(&self) -> f64 {
        self.vmax - self.vmin
    }

    /// Flat index of (t, m, n) in row-major storage order.
    pub fn index(&self, t: u32, m: u32, n: u32) -> usize {
        (t as u64 * self.dims.spatial() + m as u64 * self.dims.n as u64 + n as u64) as usize
    }

    pub fn value_at(&self, t: u32, m: u32, n: u32) -> f64 {
        self.values[self.index(t, m, n)]
    }

    /// Re-round every sample to the given precision and retag the field.
    /// Used when generating f32 test data from f64 generators.
    pub fn with_precision(self, precision: Precision) -> Field {
        let values: Vec<f64> = self.values.iter().map(|&v| precision.round(v)).collect();
        // Rounding cannot produce non-finite values from finite f64 inputs
        // within f32 range for the generators used here, but extreme f64
        // magnitudes would overflow to infinity; clamp instead.
        let values: Vec<f64> = values
            .iter()
            .map(|&v| {
                if v.is_finite() {
                    v
                } else if v > 0.0 {
                    f32::MAX as f64
                } else {
                    f32::MIN as f64
                }
            })
            .collect();
        Field::new(self.dims, precision, values).expect("rounded field stays valid")
    }
}

/// The user-facing relative bound and its absolute form for one field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorBound {
    pub epsilon: f64,
    pub e_abs: f64,
}

impl ErrorBound {
    /// e_abs = epsilon * vrange. A constant field (vrange 0) degrades to the
    /// smallest positive step above vmax so quantizer construction never
    /// divides by zero; reconstruction of a constant field is exact anyway.
    pub fn for_field(field: &Field, epsilon: f64) -> Result<ErrorBound> {
        ErrorBound::from_range(epsilon, field.vmin(), field.vmax())
    }

    pub fn from_range(epsilon: f64, vmin: f64, vmax: f64) -> Result<ErrorBound> {
        if !epsilon.is_finite() || epsilon <= 0.0 {
            return Err(Error::BadErrorBound { value: epsilon });
        }
        let vrange = vmax - vmin;
        let e_abs = if vrange > 0.0 {
            epsilon * vrange
        } else {
            smallest_positive_step(vmax)
        };
        Ok(ErrorBound { epsilon, e_abs })
    }
}

/// Distance from |v| to the next representable f64 above it, floored at the
/// smallest positive normal so the result is always a usable step.
pub(crate) fn smallest_positive_step(v: f64) -> f64 {
    let mag = libm::fabs(v);
    let a = if mag > 0.0 { mag } else { f64::MIN_POSITIVE };
    let step = a.next_up() - a;
    if step > 0.0 {
        step
    } else {
        f64::MIN_POSITIVE
    }
}

/// Synthetic field families. Each is a pure function of (kind, dims, seed).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    /// Smooth Gaussian bumps drifting slowly across the grid.
    SmoothAdvection,
    /// Sum of spatiotemporal sinusoids with long temporal periods.
    SinusoidMixture,
    /// Exactly four constant plateaus cut from a smooth latent surface.
    PiecewiseConstant,
    /// Independent Gaussian noise.
    WhiteNoise,
}

impl SyntheticKind {
    pub fn parse(name: &str) -> Option<SyntheticKind> {
        match name {
            "smooth-advection" => Some(SyntheticKind::SmoothAdvection),
            "sinusoid-mixture" => Some(SyntheticKind::SinusoidMixture),
            "piecewise-constant" => Some(SyntheticKind::PiecewiseConstant),
            "white-noise" => Some(SyntheticKind::WhiteNoise),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SyntheticKind::SmoothAdvection => "smooth-advection",
            SyntheticKind::SinusoidMixture => "sinusoid-mixture",
            SyntheticKind::PiecewiseConstant => "piecewise-constant",
            SyntheticKind::WhiteNoise => "white-noise",
        }
    }

    pub const ALL: [SyntheticKind; 4] = [
        SyntheticKind::SmoothAdvection,
        SyntheticKind::SinusoidMixture,
        SyntheticKind::PiecewiseConstant,
        SyntheticKind::WhiteNoise,
    ];
}

const TWO_PI: f64 = core::f64::consts::TAU;

/// Deterministic synthetic field in f64. Cast with `with_precision` for f32
/// experiments. Smooth kinds keep lag-1 temporal autocorrelation above 0.9
/// by bounding drift speed and temporal frequency.
pub fn gen_synthetic(kind: SyntheticKind, dims: Dims, seed: u64) -> Field {
    // Salt the seed per kind so (kind A, s) and (kind B, s) decorrelate.
    let salt: u64 = match kind {
        SyntheticKind::SmoothAdvection => 0,
        SyntheticKind::SinusoidMixture => 1,
        SyntheticKind::PiecewiseConstant => 2,
        SyntheticKind::WhiteNoise => 3,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt);
    match kind {
        SyntheticKind::SmoothAdvection => gen_smooth_advection(dims, &mut rng),
        SyntheticKind::SinusoidMixture => gen_sinusoid_mixture(dims, &mut rng),
        SyntheticKind::PiecewiseConstant => gen_piecewise_constant(dims, &mut rng),
        SyntheticKind::WhiteNoise => gen_white_noise(dims, &mut rng),
    }
}

fn gen_smooth_advection(dims: Dims, rng: &mut ChaCha8Rng) -> Field {
    struct Band {
        cm: f64,
        cn: f64,
        um: f64,
        un: f64,
        amp: f64,
        inv2su2: f64,
        inv2sw2: f64,
    }
    let (t_len, m_len, n_len) = (dims.t as usize, dims.m as usize, dims.n as usize);
    let base: f64 = rng.gen_range(250.0..300.0);
    let spread: f64 = rng.gen_range(8.0..25.0);
    // Shear-tilted texture: smooth bands elongated along the grid
    // anti-diagonal, the way a constant shear stretches advected features.
    // Sign-mixed amplitudes fill the whole domain with structure instead of
    // leaving spikes on a flat background, plain planar distances keep the
    // field aperiodic across grid edges, and the tilt keeps scan-order
    // comparisons non-degenerate: no axis-parallel traversal runs along the
    // bands.
    let min_axis = (m_len.min(n_len) as f64).max(4.0);
    let diag = ((m_len + n_len) as f64) / 2.0;
    let bands: Vec<Band> = (0..28)
        .map(|_| {
            let sigma_u = (rng.gen_range(0.08..0.16) * min_axis).max(1.0);
            let sigma_w = rng.gen_range(0.5..0.9) * diag;
            let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            Band {
                cm: rng.gen_range(0.0..m_len as f64),
                cn: rng.gen_range(0.0..n_len as f64),
                // Slow drift keeps lag-1 temporal autocorrelation high.
                um: rng.gen_range(-0.3..0.3),
                un: rng.gen_range(-0.3..0.3),
                amp: sign * rng.gen_range(0.4..1.0) * spread,
                inv2su2: 1.0 / (2.0 * sigma_u * sigma_u),
                inv2sw2: 1.0 / (2.0 * sigma_w * sigma_w),
            }
        })
        .collect();
    let mut values = Vec::with_capacity(dims.len() as usize);
    for t in 0..t_len {
        for m in 0..m_len {
            for n in 0..n_len {
                let mut v = base;
                for b in &bands {
                    let dm = m as f64 - (b.cm + b.um * t as f64);
                    let dn = n as f64 - (b.cn + b.un * t as f64);
                    // u runs across the bands, w along them.
                    let u = core::f64::consts::FRAC_1_SQRT_2 * (dm + dn);
                    let w = core::f64::consts::FRAC_1_SQRT_2 * (dm - dn);
                    v += b.amp * libm::exp(-(u * u * b.inv2su2 + w * w * b.inv2sw2));
                }
                values.push(v);
            }
        }
    }
    Field::new(dims, Precision::F64, values).expect("generator output is finite")
}

fn gen_sinusoid_mixture(dims: Dims, rng: &mut ChaCha8Rng) -> Field {
    struct Wave {
        amp: f64,
        fm: f64,
        fn_: f64,
        ft: f64,
        phase: f64,
    }
    let (t_len, m_len, n_len) = (dims.t as usize, dims.m as usize, dims.n as usize);
    let offset: f64 = rng.gen_range(-5.0..5.0);
    let scale: f64 = rng.gen_range(1.0..10.0);
    let waves: Vec<Wave> = (0..4)
        .map(|_| Wave {
            amp: rng.gen_range(0.3..1.0) * scale,
            fm: rng.gen_range(0u32..4) as f64,
            fn_: rng.gen_range(0u32..4) as f64,
            // Temporal period of at least 20 steps: lag-1 correlation of a
            // single wave is cos(2*pi/period) >= 0.95.
            ft: 1.0 / rng.gen_range(20.0..60.0),
            phase: rng.gen_range(0.0..TWO_PI),
        })
        .collect();
    let mut values = Vec::with_capacity(dims.len() as usize);
    for t in 0..t_len {
        for m in 0..m_len {
            for n in 0..n_len {
                let mut v = offset;
                for w in &waves {
                    let arg = TWO_PI
                        * (w.fm * m as f64 / m_len as f64
                            + w.fn_ * n as f64 / n_len as f64
                            + w.ft * t as f64)
                        + w.phase;
                    v += w.amp * libm::sin(arg);
                }
                values.push(v);
            }
        }
    }
    Field::new(dims, Precision::F64, values).expect("generator output is finite")
}

fn gen_piecewise_constant(dims: Dims, rng: &mut ChaCha8Rng) -> Field {
    // Latent smooth surface, then cut at its quartiles into 4 plateaus.
    let latent = gen_sinusoid_mixture(dims, rng);
    let mut sorted: Vec<f64> = latent.values().to_vec();
    sorted.sort_by(f64::total_cmp);
    let len = sorted.len();
    let cut = |q: usize| sorted[(len * q / 4).min(len - 1)];
    let cuts = [cut(1), cut(2), cut(3)];
    let base: f64 = rng.gen_range(0.0..100.0);
    let step: f64 = rng.gen_range(5.0..20.0);
    let plateaus = [
        base,
        base + step,
        base + 2.0 * step,
        base + 3.0 * step,
    ];
    let values: Vec<f64> = latent
        .values()
        .iter()
        .map(|&u| {
            let mut class = 0usize;
            for &c in &cuts {
                if u > c {
                    class += 1;
                }
            }
            plateaus[class]
        })
        .collect();
    Field::new(dims, Precision::F64, values).expect("generator output is finite")
}

fn gen_white_noise(dims: Dims, rng: &mut ChaCha8Rng) -> Field {
    let offset: f64 = rng.gen_range(-10.0..10.0);
    let scale: f64 = rng.gen_range(0.5..5.0);
    let values: Vec<f64> = (0..dims.len())
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            offset + scale * z
        })
        .collect();
    Field::new(dims, Precision::F64, values).expect("generator output is finite")
}
