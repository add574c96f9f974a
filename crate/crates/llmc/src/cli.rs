//! The `llmc` command line: gen, train, compress, decompress, verify,
//! bench, inspect. Failures print exactly one `error[<category>]: ...`
//! line on stderr and exit with the category's code, so scripts can
//! dispatch on either.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use llmc_core::codec::{compress, decompress, Archive, PredictorInfo, QuantizerSpec};
use llmc_core::field::{gen_synthetic, Dims, Field, Precision, SyntheticKind};
use llmc_core::layout::LayoutKind;
use llmc_core::metrics::{bitrate, compression_ratio, fidelity};
use llmc_core::model::{
    checkpoint_hash, train, Model, ModelConfig, OptimizerKind, SamplingKind, StepCount,
    TrainingConfig, TransformerPredictor,
};
use llmc_core::predictor::{BaselinePredictor, Predictor, PredictorKind};
use llmc_core::quant::{fit_field, quantize_field, FitParams};
use llmc_core::Error as CoreError;

use crate::bench::{emit_report, parse_spec, run_sweep, BenchError, ReportFormat};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::container::{load_archive, save_archive};
use crate::io::{load_field, save_field, FileError};

const EXIT_HELP: &str = "Exit codes:
  0  success
  2  usage or validation error
  3  I/O error
  4  malformed input data
  5  corrupted archive or checkpoint (integrity check failed)
  6  error bound violated (verify)
  7  training diverged

Errors print a single line: error[<category>]: <message>.
LLMC_THREADS caps bench worker threads; RUST_LOG=info shows training logs.";

#[derive(Parser)]
#[command(
    name = "llmc",
    version,
    about = "Error-bounded lossy compression for 3D spatiotemporal fields \
             with a learned token predictor",
    after_help = EXIT_HELP
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic field file.
    Gen(GenArgs),
    /// Fit a quantizer and train a transformer predictor on a field.
    Train(Box<TrainArgs>),
    /// Compress a raw field file into an archive.
    Compress(Box<CompressArgs>),
    /// Reconstruct a field from an archive.
    Decompress(DecompressArgs),
    /// Decompress and re-check the error bound against the original.
    Verify(VerifyArgs),
    /// Run an ablation sweep from a JSON spec.
    Bench(BenchArgs),
    /// Print an archive's header and storage breakdown.
    Inspect(InspectArgs),
}

fn parse_dims(s: &str) -> Result<Dims, String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err("expected T,M,N".into());
    }
    let mut v = [0u32; 3];
    for (slot, part) in v.iter_mut().zip(&parts) {
        *slot = part.trim().parse().map_err(|_| format!("bad axis {part:?}"))?;
    }
    Dims::new(v[0], v[1], v[2]).map_err(|e| e.to_string())
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    match s {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        _ => Err("expected f32 or f64".into()),
    }
}

fn parse_layout(s: &str) -> Result<LayoutKind, String> {
    LayoutKind::parse(s).ok_or_else(|| "expected zorder, row or col".into())
}

fn parse_kind(s: &str) -> Result<SyntheticKind, String> {
    SyntheticKind::parse(s).ok_or_else(|| {
        "expected smooth-advection, sinusoid-mixture, piecewise-constant or white-noise".into()
    })
}

fn parse_sampling(s: &str) -> Result<SamplingKind, String> {
    SamplingKind::parse(s).ok_or_else(|| "expected random, uniform or target-aware".into())
}

fn parse_optimizer(s: &str) -> Result<OptimizerKind, String> {
    OptimizerKind::parse(s).ok_or_else(|| "expected sgd or adam".into())
}

fn parse_steps(s: &str) -> Result<StepCount, String> {
    if s == "auto" {
        Ok(StepCount::Auto)
    } else {
        s.parse().map(StepCount::Fixed).map_err(|_| "expected auto or a step count".into())
    }
}

#[derive(Args)]
struct GenArgs {
    /// smooth-advection | sinusoid-mixture | piecewise-constant | white-noise
    #[arg(long, value_parser = parse_kind)]
    kind: SyntheticKind,
    /// Grid extent as T,M,N.
    #[arg(long, value_parser = parse_dims)]
    dims: Dims,
    /// f32 | f64
    #[arg(long, default_value = "f64", value_parser = parse_precision)]
    precision: Precision,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output raw field file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Raw little-endian field file.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_parser = parse_dims)]
    dims: Dims,
    #[arg(long, default_value = "f64", value_parser = parse_precision)]
    precision: Precision,
    /// Relative error bound the quantizer is fitted for.
    #[arg(long, default_value_t = 1e-3)]
    eps: f64,
    #[arg(long, default_value_t = 1024)]
    vocab: u32,
    #[arg(long, default_value_t = 32)]
    context: u32,
    #[arg(long, default_value_t = 2)]
    layers: u32,
    #[arg(long, default_value_t = 64)]
    hidden: u32,
    #[arg(long, default_value_t = 4)]
    heads: u32,
    /// Temporal embedding table size (time indices wrap modulo this).
    #[arg(long, default_value_t = 256)]
    max_time: u32,
    #[arg(long, default_value = "zorder", value_parser = parse_layout)]
    layout: LayoutKind,
    /// "auto" derives the budget from --sampling-ratio.
    #[arg(long, default_value = "auto", value_parser = parse_steps)]
    steps: StepCount,
    #[arg(long, default_value_t = 16)]
    batch: u32,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    /// Weight of the value-space MSE term in the hybrid loss.
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    /// random | uniform | target-aware
    #[arg(long, default_value = "target-aware", value_parser = parse_sampling)]
    sampling: SamplingKind,
    #[arg(long, default_value_t = 0.01)]
    sampling_ratio: f64,
    /// sgd | adam
    #[arg(long, default_value = "sgd", value_parser = parse_optimizer)]
    optimizer: OptimizerKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output checkpoint file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompressArgs {
    /// Raw little-endian field file.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_parser = parse_dims)]
    dims: Dims,
    #[arg(long, default_value = "f64", value_parser = parse_precision)]
    precision: Precision,
    /// Pointwise relative error bound.
    #[arg(long, default_value_t = 1e-3)]
    eps: f64,
    /// Quantizer vocabulary size. With --predictor transformer this comes
    /// from the checkpoint; passing a conflicting value is an error.
    #[arg(long)]
    vocab: Option<u32>,
    #[arg(long, default_value_t = 8)]
    topk: u32,
    /// Context window length; from the checkpoint for transformers.
    #[arg(long)]
    context: Option<u32>,
    #[arg(long, default_value = "zorder", value_parser = parse_layout)]
    layout: LayoutKind,
    /// transformer | last | freq | uniform
    #[arg(long)]
    predictor: String,
    /// Checkpoint file; required for --predictor transformer.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output archive file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DecompressArgs {
    #[arg(long)]
    archive: PathBuf,
    /// Required when the archive was built with a transformer.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output raw field file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    archive: PathBuf,
    /// The original raw field file (dims and precision come from the
    /// archive header).
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Sweep spec JSON file.
    #[arg(long)]
    spec: PathBuf,
    /// Report file; .csv or .json picks the format.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    archive: PathBuf,
}

/// One-line CLI failure with its exit code.
#[derive(Debug)]
pub struct CliError {
    category: &'static str,
    code: i32,
    message: String,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "error[{}]: {}", self.category, self.message)
    }
}

fn usage(message: impl Into<String>) -> CliError {
    CliError { category: "usage", code: 2, message: message.into() }
}

fn bound_failure(message: String) -> CliError {
    CliError { category: "bound", code: 6, message }
}

fn from_core(e: CoreError) -> CliError {
    let (category, code) = match &e {
        CoreError::CorruptStream(_) | CoreError::TruncatedStream
        | CoreError::CorrectionMismatch { .. } => ("corrupt", 5),
        CoreError::TrainDiverged { .. } => ("diverged", 7),
        CoreError::SampleCountMismatch { .. }
        | CoreError::NonFiniteSample { .. }
        | CoreError::BadArchiveField(_)
        | CoreError::TokenOutOfRange { .. }
        | CoreError::ResidualMissing { .. }
        | CoreError::ResidualUnexpected { .. }
        | CoreError::ResidualUnderrun
        | CoreError::ResidualOverrun { .. }
        | CoreError::SymbolOutOfAlphabet { .. }
        | CoreError::Internal(_) => ("data", 4),
        _ => ("usage", 2),
    };
    CliError { category, code, message: e.to_string() }
}

fn from_file(e: FileError) -> CliError {
    match e {
        FileError::Io { path, source } => {
            CliError { category: "io", code: 3, message: format!("{path}: {source}") }
        }
        FileError::Core(e) => from_core(e),
    }
}

fn from_bench(e: BenchError) -> CliError {
    match e {
        BenchError::Spec(m) => usage(m),
        BenchError::File(e) => from_file(e),
        BenchError::Core { value, source } => {
            let mut err = from_core(source);
            err.message = format!("sweep point {value}: {}", err.message);
            err
        }
        BenchError::Bound { value, max_rel_err, epsilon } => bound_failure(format!(
            "sweep point {value}: max rel err {max_rel_err:e} exceeds epsilon {epsilon:e}"
        )),
    }
}

/// Entry point: parse, dispatch, report. Returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.code
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Gen(a) => cmd_gen(a),
        Cmd::Train(a) => cmd_train(*a),
        Cmd::Compress(a) => cmd_compress(*a),
        Cmd::Decompress(a) => cmd_decompress(a),
        Cmd::Verify(a) => cmd_verify(a),
        Cmd::Bench(a) => cmd_bench(a),
        Cmd::Inspect(a) => cmd_inspect(a),
    }
}

fn cmd_gen(a: GenArgs) -> Result<(), CliError> {
    let field = gen_synthetic(a.kind, a.dims, a.seed).with_precision(a.precision);
    save_field(&a.out, &field).map_err(from_file)?;
    println!(
        "gen: {} {}x{}x{} {} -> {} ({} bytes, vrange {:e})",
        a.kind.name(),
        a.dims.t,
        a.dims.m,
        a.dims.n,
        precision_name(a.precision),
        a.out.display(),
        a.dims.len() * a.precision.bytes() as u64,
        field.vrange(),
    );
    Ok(())
}

fn precision_name(p: Precision) -> &'static str {
    match p {
        Precision::F32 => "f32",
        Precision::F64 => "f64",
    }
}

fn hex8(hash: &[u8; 32]) -> String {
    hash[..8].iter().map(|b| format!("{b:02x}")).collect()
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let field = load_field(&a.input, a.dims, a.precision).map_err(from_file)?;
    let (quant, _) =
        fit_field(&field, a.vocab, a.eps, &FitParams::default()).map_err(from_core)?;
    let (seq, _) = quantize_field(&field, &quant, a.layout).map_err(from_core)?;
    let config = ModelConfig {
        layers: a.layers,
        hidden: a.hidden,
        heads: a.heads,
        vocab: a.vocab,
        context: a.context,
        max_rows: a.dims.m,
        max_cols: a.dims.n,
        max_time: a.max_time,
    };
    let training = TrainingConfig {
        alpha: a.alpha,
        lr: a.lr,
        steps: a.steps,
        batch: a.batch,
        sampling: a.sampling,
        sampling_ratio: a.sampling_ratio,
        seed: a.seed,
        optimizer: a.optimizer,
    };
    let (model, report) = train(&seq, &quant, &config, &training).map_err(from_core)?;
    save_checkpoint(&a.out, &model).map_err(from_file)?;
    let hash = checkpoint_hash(&model.to_checkpoint_bytes()).map_err(from_core)?;
    println!(
        "train: {} params, {} steps, final top-1 {:.4} -> {} (hash {})",
        model.param_count(),
        report.steps.len(),
        report.final_top1,
        a.out.display(),
        hex8(&hash),
    );
    Ok(())
}

fn cmd_compress(a: CompressArgs) -> Result<(), CliError> {
    let field = load_field(&a.input, a.dims, a.precision).map_err(from_file)?;

    enum Built {
        Baseline(BaselinePredictor),
        Model(Box<TransformerPredictor>, [u8; 32]),
    }
    let built;
    let vocab;
    let context;
    match a.predictor.as_str() {
        "transformer" => {
            let path = a
                .checkpoint
                .as_ref()
                .ok_or_else(|| usage("--predictor transformer requires --checkpoint"))?;
            let ckpt = load_checkpoint(path).map_err(from_file)?;
            let cfg = *ckpt.model.config();
            if let Some(v) = a.vocab {
                if v != cfg.vocab {
                    return Err(usage(format!(
                        "--vocab {v} conflicts with the checkpoint's vocab {}",
                        cfg.vocab
                    )));
                }
            }
            if let Some(c) = a.context {
                if c != cfg.context {
                    return Err(usage(format!(
                        "--context {c} conflicts with the checkpoint's context {}",
                        cfg.context
                    )));
                }
            }
            vocab = cfg.vocab;
            context = cfg.context as usize;
            built = Built::Model(Box::new(TransformerPredictor::new(ckpt.model)), ckpt.hash);
        }
        name @ ("last" | "freq" | "uniform") => {
            vocab = a.vocab.unwrap_or(1024);
            context = a.context.unwrap_or(32) as usize;
            let baseline = if name == "uniform" {
                BaselinePredictor::uniform(vocab, context).map_err(from_core)?
            } else {
                let (quant, _) = fit_field(&field, vocab, a.eps, &FitParams::default())
                    .map_err(from_core)?;
                let (seq, _) = quantize_field(&field, &quant, a.layout).map_err(from_core)?;
                let mut counts = vec![0u64; vocab as usize];
                for &t in &seq.tokens {
                    counts[t as usize] += 1;
                }
                if name == "last" {
                    BaselinePredictor::last_value(&counts, context).map_err(from_core)?
                } else {
                    BaselinePredictor::frequency(&counts, context).map_err(from_core)?
                }
            };
            built = Built::Baseline(baseline);
        }
        other => {
            return Err(usage(format!(
                "unknown predictor {other:?}: expected transformer, last, freq or uniform"
            )))
        }
    }

    let info = match &built {
        Built::Baseline(b) => PredictorInfo::baseline(b),
        Built::Model(tp, hash) => PredictorInfo::checkpointed(tp.as_ref(), *hash),
    };
    let archive = compress(
        &field,
        a.eps,
        QuantizerSpec::Fit { vocab, params: &FitParams::default() },
        &info,
        a.topk,
        a.layout,
    )
    .map_err(from_core)?;
    debug_assert_eq!(archive.header.context as usize, context);
    save_archive(&a.out, &archive).map_err(from_file)?;
    println!(
        "compress: {} -> {} ({} bytes, rho {:.2}, {:.4} bits/sample, {} corrections, {} residuals)",
        a.input.display(),
        a.out.display(),
        archive.serialized_len(),
        compression_ratio(&field, archive.serialized_len()),
        bitrate(&field, archive.serialized_len()),
        archive.header.n_corrections,
        archive.header.n_residuals,
    );
    Ok(())
}

/// Rebuild the predictor an archive was made with. Baselines come out of
/// the archive itself; transformers need the checkpoint file back.
enum ArchivePredictor {
    Baseline(BaselinePredictor),
    Model(Box<TransformerPredictor>, [u8; 32]),
}

impl ArchivePredictor {
    fn build(archive: &Archive, checkpoint: Option<&Path>) -> Result<ArchivePredictor, CliError> {
        let h = &archive.header;
        match h.predictor {
            PredictorKind::Transformer => {
                let path = checkpoint.ok_or_else(|| {
                    usage("this archive was compressed with a transformer; pass --checkpoint")
                })?;
                let ckpt = load_checkpoint(path).map_err(from_file)?;
                Ok(ArchivePredictor::Model(
                    Box::new(TransformerPredictor::new(ckpt.model)),
                    ckpt.hash,
                ))
            }
            PredictorKind::LastValue | PredictorKind::Frequency | PredictorKind::Uniform => {
                let b = BaselinePredictor::from_aux(
                    h.predictor,
                    &archive.predictor_aux,
                    h.vocab,
                    h.context as usize,
                )
                .map_err(from_core)?;
                Ok(ArchivePredictor::Baseline(b))
            }
            PredictorKind::External => Err(usage(
                "archive was built with an external predictor the CLI cannot reconstruct",
            )),
        }
    }

    fn info(&self) -> PredictorInfo<'_> {
        match self {
            ArchivePredictor::Baseline(b) => PredictorInfo::baseline(b),
            ArchivePredictor::Model(tp, hash) => PredictorInfo::checkpointed(tp.as_ref(), *hash),
        }
    }
}

fn cmd_decompress(a: DecompressArgs) -> Result<(), CliError> {
    let archive = load_archive(&a.archive).map_err(from_file)?;
    let predictor = ArchivePredictor::build(&archive, a.checkpoint.as_deref())?;
    let field = decompress(&archive, &predictor.info()).map_err(from_core)?;
    save_field(&a.out, &field).map_err(from_file)?;
    let d = field.dims();
    println!(
        "decompress: {} -> {} ({}x{}x{} {}, {} bytes)",
        a.archive.display(),
        a.out.display(),
        d.t,
        d.m,
        d.n,
        precision_name(field.precision()),
        d.len() * field.precision().bytes() as u64,
    );
    Ok(())
}

fn cmd_verify(a: VerifyArgs) -> Result<(), CliError> {
    let archive = load_archive(&a.archive).map_err(from_file)?;
    let h = &archive.header;
    let original = load_field(&a.input, h.dims, h.precision).map_err(from_file)?;
    let predictor = ArchivePredictor::build(&archive, a.checkpoint.as_deref())?;
    let recon = decompress(&archive, &predictor.info()).map_err(from_core)?;
    let fid = fidelity(&original, &recon).map_err(from_core)?;
    if fid.max_rel_err > h.epsilon {
        return Err(bound_failure(format!(
            "max rel err {:e} exceeds epsilon {:e}",
            fid.max_rel_err, h.epsilon
        )));
    }
    println!(
        "verify: ok (max rel err {:e} <= epsilon {:e}, rho {:.2}, {:.4} bits/sample, psnr {:.1} dB)",
        fid.max_rel_err,
        h.epsilon,
        compression_ratio(&original, archive.serialized_len()),
        bitrate(&original, archive.serialized_len()),
        fid.psnr_db,
    );
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<(), CliError> {
    let format = ReportFormat::from_path(&a.out)
        .ok_or_else(|| usage("--out must end in .csv or .json"))?;
    let bytes = std::fs::read(&a.spec).map_err(|e| {
        from_file(FileError::Io { path: a.spec.display().to_string(), source: e })
    })?;
    let spec = parse_spec(&bytes).map_err(from_bench)?;
    let report = run_sweep(&spec).map_err(from_bench)?;
    emit_report(&report, format, &a.out).map_err(from_bench)?;
    for r in &report.records {
        println!(
            "bench: {}={} accuracy {:.4} rho {:.2} bitrate {:.4} archive {} B",
            r.axis, r.value, r.accuracy, r.rho, r.bitrate, r.archive_bytes
        );
    }
    println!("bench: {} points -> {}", report.records.len(), a.out.display());
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> Result<(), CliError> {
    let archive = load_archive(&a.archive).map_err(from_file)?;
    let h = &archive.header;
    let s = archive.section_sizes();
    println!("version: {}", h.version);
    println!("precision: {}", precision_name(h.precision));
    println!("layout: {}", h.layout.name());
    println!("predictor: {}", h.predictor.name());
    println!("dims: {},{},{}", h.dims.t, h.dims.m, h.dims.n);
    println!("len: {}", h.len);
    println!("epsilon: {:e}", h.epsilon);
    println!("vmin: {:e}", h.vmin);
    println!("vmax: {:e}", h.vmax);
    println!("vocab: {}", h.vocab);
    println!("context: {}", h.context);
    println!("k: {}", h.k);
    println!("corrections: {}", h.n_corrections);
    println!("residuals: {}", h.n_residuals);
    let hash = if h.checkpoint_hash == [0; 32] {
        "-".to_string()
    } else {
        hex8(&h.checkpoint_hash)
    };
    println!("checkpoint: {hash}");
    println!(
        "sections: header {} quantizer {} predictor_aux {} prefix {} ranks {} corrections {} residuals {} framing {}",
        s.header, s.quantizer, s.predictor_aux, s.prefix, s.ranks, s.corrections, s.residuals,
        s.framing
    );
    println!("bytes: {}", archive.serialized_len());
    Ok(())
}

// Compile-time guarantee that every referenced core item stays public.
#[allow(dead_code)]
fn _api_surface(_: &Field, _: &Model, _: &dyn Predictor) {}
