use llmc_core::field::{gen_synthetic, Dims, SyntheticKind};
use llmc_core::layout::LayoutKind;
use llmc_core::metrics::order0_entropy;
use llmc_core::predictor::{predict_topk, BaselinePredictor, Context};
use llmc_core::quant::{fit_field, quantize_field, FitParams};
use llmc_core::codec::{compress, PredictorInfo, QuantizerSpec};

fn rank_h0(field: &llmc_core::field::Field, vocab: u32, ctx_len: usize, layout: LayoutKind) -> f64 {
    let (quant, _) = fit_field(field, vocab, 1e-3, &FitParams::default()).unwrap();
    let (seq, _) = quantize_field(field, &quant, layout).unwrap();
    let mut counts = vec![0u64; vocab as usize];
    for &t in &seq.tokens {
        counts[t as usize] += 1;
    }
    let pred = BaselinePredictor::last_value(&counts, ctx_len).unwrap();
    let k = vocab as usize;
    let mut ranks = Vec::new();
    for p in ctx_len..seq.tokens.len() {
        let ctx = Context::new(&seq.tokens[p - ctx_len..p], &seq.coords[p - ctx_len..=p]).unwrap();
        let top = predict_topk(&pred, &ctx, k).unwrap();
        let rank = top.ranked.iter().position(|&t| t == seq.tokens[p]).unwrap() as u32;
        ranks.push(rank);
    }
    order0_entropy(&ranks, vocab)
}

fn main() {
    // c7c: zorder rank H0 <= row-major, last-value, smooth advection.
    for dims in [Dims::new(4, 64, 16).unwrap(), Dims::new(4, 64, 64).unwrap(), Dims::new(6, 32, 32).unwrap()] {
        for seed in [1u64, 2, 3] {
            let field = gen_synthetic(SyntheticKind::SmoothAdvection, dims, seed);
            let row = rank_h0(&field, 16, 4, LayoutKind::RowMajor);
            let z = rank_h0(&field, 16, 4, LayoutKind::ZOrder);
            println!(
                "c7c dims=({},{},{}) seed={seed} row={row:.4} z={z:.4} {}",
                dims.t, dims.m, dims.n,
                if z <= row { "OK" } else { "VIOLATION" }
            );
        }
    }
    // c7b: vocab sweep at eps 1e-3; V=64 residuals>0+wide, V=1024 none.
    for kind in [SyntheticKind::SmoothAdvection, SyntheticKind::SinusoidMixture] {
        let dims = Dims::new(4, 32, 32).unwrap();
        let field = gen_synthetic(kind, dims, 7);
        for vocab in [64u32, 1024] {
            let (quant, _) = fit_field(&field, vocab, 1e-3, &FitParams::default()).unwrap();
            let mut counts = vec![0u64; vocab as usize];
            let (seq, res) = quantize_field(&field, &quant, LayoutKind::RowMajor).unwrap();
            for &t in &seq.tokens {
                counts[t as usize] += 1;
            }
            let pred = BaselinePredictor::frequency(&counts, 4).unwrap();
            let archive = compress(
                &field,
                1e-3,
                QuantizerSpec::Model(&quant),
                &PredictorInfo::baseline(&pred),
                4,
                LayoutKind::RowMajor,
            )
            .unwrap();
            let sizes = archive.section_sizes();
            println!(
                "c7b {kind:?} V={vocab} any_wide={} residual_count={} residual_bytes={}",
                quant.any_wide(),
                res.residuals.len(),
                sizes.residuals
            );
        }
    }
}
