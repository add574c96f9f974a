//! Rate and fidelity metrics for compressed fields.

use crate::error::{Error, Result};
use crate::field::Field;

/// ratio = original bytes / compressed bytes.
pub fn compression_ratio(original: &Field, archive_bytes: u64) -> f64 {
    let x_bytes = original.dims().len() * original.precision().bytes() as u64;
    x_bytes as f64 / archive_bytes as f64
}

/// Compressed bits per original sample.
pub fn bitrate(original: &Field, archive_bytes: u64) -> f64 {
    8.0 * archive_bytes as f64 / original.dims().len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FidelityMetrics {
    pub max_abs_err: f64,
    /// Max absolute error over the original's value range; equals the
    /// observed relative error of the bound contract. 0 for constant fields.
    pub max_rel_err: f64,
    pub mse: f64,
    /// 10*log10(vrange^2 / MSE). Infinite when the reconstruction is exact.
    pub psnr_db: f64,
}

/// Pointwise comparison of a reconstruction against its original.
pub fn fidelity(original: &Field, recon: &Field) -> Result<FidelityMetrics> {
    if original.dims() != recon.dims() {
        return Err(Error::SampleCountMismatch {
            expected: original.dims().len(),
            actual: recon.dims().len(),
        });
    }
    let mut max_abs = 0.0f64;
    let mut se = 0.0f64;
    for (&a, &b) in original.values().iter().zip(recon.values()) {
        let d = libm::fabs(a - b);
        max_abs = libm::fmax(max_abs, d);
        se += (a - b) * (a - b);
    }
    let n = original.dims().len() as f64;
    let mse = se / n;
    let vrange = original.vrange();
    let max_rel = if vrange > 0.0 {
        max_abs / vrange
    } else if max_abs == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    let psnr = if mse == 0.0 || vrange == 0.0 {
        f64::INFINITY
    } else {
        10.0 * libm::log10(vrange * vrange / mse)
    };
    Ok(FidelityMetrics {
        max_abs_err: max_abs,
        max_rel_err: max_rel,
        mse,
        psnr_db: psnr,
    })
}

/// Order-0 empirical entropy in bits per symbol.
pub fn order0_entropy(symbols: &[u32], alphabet: u32) -> f64 {
    if symbols.is_empty() {
        return 0.0;
    }
    let mut counts = alloc::vec![0u64; alphabet as usize];
    for &s in symbols {
        counts[s as usize] += 1;
    }
    let n = symbols.len() as f64;
    let mut h = 0.0;
    for &c in &counts {
        if c > 0 {
            let p = c as f64 / n;
            h -= p * libm::log2(p);
        }
    }
    h
}
