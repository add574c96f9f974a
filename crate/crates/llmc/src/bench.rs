//! Ablation sweeps: vary one axis (top-k, vocabulary, context length,
//! sampling strategy or ratio, data order, model width) against a fixed
//! base configuration and report accuracy, compression and the per-stream
//! storage breakdown for every point.
//!
//! Every point is re-verified end to end: the sweep decompresses its own
//! archive and checks the error bound against the original field, and the
//! reported storage breakdown must reconcile with the archive size
//! exactly. A bound violation aborts the whole sweep.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use llmc_core::codec::{compress, decompress, PredictorInfo, QuantizerSpec};
use llmc_core::field::{gen_synthetic, Dims, Field, Precision, SyntheticKind};
use llmc_core::layout::LayoutKind;
use llmc_core::metrics::fidelity;
use llmc_core::model::{
    train, ModelConfig, OptimizerKind, SamplingKind, StepCount, TrainingConfig,
    TransformerPredictor,
};
use llmc_core::predictor::BaselinePredictor;
use llmc_core::quant::{fit_field, quantize_field, FitParams};

use crate::io::{atomic_write, load_field, FileError};

/// The one dimension a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    TopK,
    Vocab,
    Context,
    Sampling,
    SamplingRatio,
    Layout,
    ModelSize,
}

impl Axis {
    pub fn parse(name: &str) -> Option<Axis> {
        match name {
            "topk" => Some(Axis::TopK),
            "vocab" => Some(Axis::Vocab),
            "context" => Some(Axis::Context),
            "sampling" => Some(Axis::Sampling),
            "sampling_ratio" => Some(Axis::SamplingRatio),
            "layout" => Some(Axis::Layout),
            "model_size" => Some(Axis::ModelSize),
        _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::TopK => "topk",
            Axis::Vocab => "vocab",
            Axis::Context => "context",
            Axis::Sampling => "sampling",
            Axis::SamplingRatio => "sampling_ratio",
            Axis::Layout => "layout",
            Axis::ModelSize => "model_size",
        }
    }
}

/// Where the sweep's field comes from: a synthetic generator or a raw
/// file. Exactly one of `kind` and `file` must be set.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
    /// (T, M, N).
    pub dims: [u32; 3],
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_precision")]
    pub precision: String,
}

fn default_precision() -> String {
    "f64".into()
}

/// Fixed configuration shared by every sweep point; the axis overrides
/// exactly one of these per value.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseConfig {
    pub vocab: u32,
    pub topk: u32,
    pub context: u32,
    pub layout: String,
    /// One of "last", "freq", "uniform", "transformer".
    pub predictor: String,
    pub layers: u32,
    pub hidden: u32,
    pub heads: u32,
    pub max_time: u32,
    /// Absent means the auto budget derived from `sampling_ratio`.
    pub steps: Option<u64>,
    pub batch: u32,
    pub lr: f64,
    pub alpha: f64,
    pub sampling: String,
    pub sampling_ratio: f64,
    pub optimizer: String,
    pub seed: u64,
}

impl Default for BaseConfig {
    fn default() -> Self {
        BaseConfig {
            vocab: 1024,
            topk: 8,
            context: 32,
            layout: "zorder".into(),
            predictor: "last".into(),
            layers: 1,
            hidden: 16,
            heads: 2,
            max_time: 256,
            steps: None,
            batch: 16,
            lr: 0.1,
            alpha: 0.1,
            sampling: "target-aware".into(),
            sampling_ratio: 0.01,
            optimizer: "sgd".into(),
            seed: 0,
        }
    }
}

/// A whole sweep, as parsed from the JSON spec file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: String,
    pub values: Vec<serde_json::Value>,
    pub epsilon: f64,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub base: BaseConfig,
}

/// JSON cannot carry IEEE infinities, and PSNR is infinite whenever the
/// reconstruction is exact, so that one field serializes as a string in
/// the non-finite case and a number otherwise.
mod psnr_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&v.to_string())
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// One sweep point's results. Byte columns are payload sizes;
/// `metadata_bytes` absorbs the header, quantizer, predictor aux and all
/// section framing so the six byte columns sum to `archive_bytes`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Record {
    pub axis: String,
    pub value: String,
    pub accuracy: f64,
    pub rho: f64,
    pub bitrate: f64,
    #[serde(with = "psnr_serde")]
    pub psnr_db: f64,
    pub max_rel_err: f64,
    pub prefix_bytes: u64,
    pub rank_bytes: u64,
    pub correction_bytes: u64,
    pub residual_bytes: u64,
    pub metadata_bytes: u64,
    pub archive_bytes: u64,
    pub train_time_s: f64,
    pub compress_time_s: f64,
}

impl Record {
    /// CSV column order; stable across releases.
    pub const FIELDS: [&'static str; 15] = [
        "axis",
        "value",
        "accuracy",
        "rho",
        "bitrate",
        "psnr_db",
        "max_rel_err",
        "prefix_bytes",
        "rank_bytes",
        "correction_bytes",
        "residual_bytes",
        "metadata_bytes",
        "archive_bytes",
        "train_time_s",
        "compress_time_s",
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub records: Vec<Record>,
}

/// Sweep failures carry enough context to point at the offending value.
#[derive(Debug)]
pub enum BenchError {
    Spec(String),
    File(FileError),
    Core { value: String, source: llmc_core::Error },
    /// A decompressed point violated the error bound; the sweep aborts.
    Bound { value: String, max_rel_err: f64, epsilon: f64 },
}

impl std::fmt::Display for BenchError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BenchError::Spec(msg) => write!(f, "bad sweep spec: {msg}"),
            BenchError::File(e) => write!(f, "{e}"),
            BenchError::Core { value, source } => {
                write!(f, "sweep point {value}: {source}")
            }
            BenchError::Bound { value, max_rel_err, epsilon } => write!(
                f,
                "sweep point {value}: bound violated (max rel err {max_rel_err:e} > epsilon {epsilon:e})"
            ),
        }
    }
}

impl std::error::Error for BenchError {}

impl From<FileError> for BenchError {
    fn from(e: FileError) -> Self {
        BenchError::File(e)
    }
}

fn spec_err(msg: impl Into<String>) -> BenchError {
    BenchError::Spec(msg.into())
}

/// A fully resolved point: the base config with the axis value applied.
#[derive(Debug, Clone)]
struct Point {
    value: String,
    cfg: BaseConfig,
}

fn apply_axis(axis: Axis, base: &BaseConfig, value: &serde_json::Value) -> Result<Point, BenchError> {
    let mut cfg = base.clone();
    let rendered;
    match axis {
        Axis::TopK | Axis::Vocab | Axis::Context | Axis::ModelSize => {
            let n = value
                .as_u64()
                .ok_or_else(|| spec_err(format!("axis {} needs integer values, got {value}", axis.name())))?;
            let n = u32::try_from(n)
                .map_err(|_| spec_err(format!("axis value {n} out of range")))?;
            match axis {
                Axis::TopK => cfg.topk = n,
                Axis::Vocab => cfg.vocab = n,
                Axis::Context => cfg.context = n,
                Axis::ModelSize => cfg.hidden = n,
                _ => unreachable!(),
            }
            rendered = n.to_string();
        }
        Axis::SamplingRatio => {
            let r = value
                .as_f64()
                .ok_or_else(|| spec_err(format!("axis sampling_ratio needs numbers, got {value}")))?;
            cfg.sampling_ratio = r;
            rendered = format!("{r}");
        }
        Axis::Sampling | Axis::Layout => {
            let s = value
                .as_str()
                .ok_or_else(|| spec_err(format!("axis {} needs strings, got {value}", axis.name())))?;
            match axis {
                Axis::Sampling => {
                    SamplingKind::parse(s)
                        .ok_or_else(|| spec_err(format!("unknown sampling kind {s:?}")))?;
                    cfg.sampling = s.to_string();
                }
                Axis::Layout => {
                    LayoutKind::parse(s)
                        .ok_or_else(|| spec_err(format!("unknown layout {s:?}")))?;
                    cfg.layout = s.to_string();
                }
                _ => unreachable!(),
            }
            rendered = s.to_string();
        }
    }
    Ok(Point { value: rendered, cfg })
}

fn load_dataset(spec: &DatasetSpec) -> Result<Field, BenchError> {
    let dims = Dims::new(spec.dims[0], spec.dims[1], spec.dims[2])
        .map_err(|e| spec_err(format!("dataset dims: {e}")))?;
    let precision = match spec.precision.as_str() {
        "f32" => Precision::F32,
        "f64" => Precision::F64,
        other => return Err(spec_err(format!("unknown precision {other:?}"))),
    };
    match (&spec.kind, &spec.file) {
        (Some(kind), None) => {
            let kind = SyntheticKind::parse(kind)
                .ok_or_else(|| spec_err(format!("unknown synthetic kind {kind:?}")))?;
            Ok(gen_synthetic(kind, dims, spec.seed).with_precision(precision))
        }
        (None, Some(file)) => Ok(load_field(Path::new(file), dims, precision)?),
        _ => Err(spec_err("dataset needs exactly one of \"kind\" or \"file\"")),
    }
}

/// Worker thread count: `LLMC_THREADS` if set, else the machine's
/// parallelism, always clamped to the number of sweep points.
fn thread_count(points: usize) -> usize {
    let configured = std::env::var("LLMC_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
        });
    configured.clamp(1, points.max(1))
}

/// Run every point of the sweep. Points are independent and may run on
/// worker threads; results are deterministic either way because all seeds
/// are fixed by the spec.
pub fn run_sweep(spec: &SweepSpec) -> Result<Report, BenchError> {
    let axis = Axis::parse(&spec.axis)
        .ok_or_else(|| spec_err(format!("unknown axis {:?}", spec.axis)))?;
    if spec.values.is_empty() {
        return Err(spec_err("values must be nonempty"));
    }
    if !(spec.epsilon.is_finite() && spec.epsilon > 0.0) {
        return Err(spec_err("epsilon must be finite and positive"));
    }
    let field = load_dataset(&spec.dataset)?;
    let points: Vec<Point> = spec
        .values
        .iter()
        .map(|v| apply_axis(axis, &spec.base, v))
        .collect::<Result<_, _>>()?;

    let threads = thread_count(points.len());
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<Record, BenchError>>>> =
        Mutex::new((0..points.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= points.len() {
                    break;
                }
                let record = run_point(&field, spec.epsilon, axis, &points[i]);
                results.lock().expect("poisoned")[i] = Some(record);
            });
        }
    });

    let mut records = Vec::with_capacity(points.len());
    for slot in results.into_inner().expect("poisoned") {
        records.push(slot.expect("every point ran")?);
    }
    Ok(Report { records })
}

fn run_point(field: &Field, epsilon: f64, axis: Axis, point: &Point) -> Result<Record, BenchError> {
    let cfg = &point.cfg;
    let core = |e: llmc_core::Error| BenchError::Core { value: point.value.clone(), source: e };
    let layout = LayoutKind::parse(&cfg.layout)
        .ok_or_else(|| spec_err(format!("unknown layout {:?}", cfg.layout)))?;

    let (quant, _) =
        fit_field(field, cfg.vocab, epsilon, &FitParams::default()).map_err(core)?;
    let (seq, _) = quantize_field(field, &quant, layout).map_err(core)?;
    let context = cfg.context as usize;

    let mut counts = vec![0u64; cfg.vocab as usize];
    for &t in &seq.tokens {
        counts[t as usize] += 1;
    }

    let train_started = Instant::now();
    enum Built {
        Baseline(BaselinePredictor),
        Model(TransformerPredictor),
    }
    let built = match cfg.predictor.as_str() {
        "last" => Built::Baseline(BaselinePredictor::last_value(&counts, context).map_err(core)?),
        "freq" => Built::Baseline(BaselinePredictor::frequency(&counts, context).map_err(core)?),
        "uniform" => {
            Built::Baseline(BaselinePredictor::uniform(cfg.vocab, context).map_err(core)?)
        }
        "transformer" => {
            let model_cfg = ModelConfig {
                layers: cfg.layers,
                hidden: cfg.hidden,
                heads: cfg.heads,
                vocab: cfg.vocab,
                context: cfg.context,
                max_rows: field.dims().m,
                max_cols: field.dims().n,
                max_time: cfg.max_time,
            };
            let training = TrainingConfig {
                alpha: cfg.alpha,
                lr: cfg.lr,
                steps: cfg.steps.map_or(StepCount::Auto, StepCount::Fixed),
                batch: cfg.batch,
                sampling: SamplingKind::parse(&cfg.sampling)
                    .ok_or_else(|| spec_err(format!("unknown sampling kind {:?}", cfg.sampling)))?,
                sampling_ratio: cfg.sampling_ratio,
                seed: cfg.seed,
                optimizer: OptimizerKind::parse(&cfg.optimizer)
                    .ok_or_else(|| spec_err(format!("unknown optimizer {:?}", cfg.optimizer)))?,
            };
            let (model, _) = train(&seq, &quant, &model_cfg, &training).map_err(core)?;
            Built::Model(TransformerPredictor::new(model))
        }
        other => return Err(spec_err(format!("unknown predictor {other:?}"))),
    };
    let train_time_s = match built {
        Built::Model(_) => train_started.elapsed().as_secs_f64(),
        Built::Baseline(_) => 0.0,
    };
    let info = match &built {
        Built::Baseline(b) => PredictorInfo::baseline(b),
        // Sweeps keep the model in memory; archives record its hash.
        Built::Model(tp) => {
            let hash = llmc_core::model::checkpoint_hash(&tp.model().to_checkpoint_bytes())
                .map_err(core)?;
            PredictorInfo::checkpointed(tp, hash)
        }
    };

    let compress_started = Instant::now();
    let archive = compress(
        field,
        epsilon,
        QuantizerSpec::Model(&quant),
        &info,
        cfg.topk,
        layout,
    )
    .map_err(core)?;
    let compress_time_s = compress_started.elapsed().as_secs_f64();

    // Never trust the encoder: decode and re-check the bound.
    let recon = decompress(&archive, &info).map_err(core)?;
    let fid = fidelity(field, &recon).map_err(core)?;
    if fid.max_rel_err > epsilon {
        return Err(BenchError::Bound {
            value: point.value.clone(),
            max_rel_err: fid.max_rel_err,
            epsilon,
        });
    }

    let sizes = archive.section_sizes();
    let archive_bytes = archive.serialized_len();
    let metadata_bytes = sizes.header + sizes.quantizer + sizes.predictor_aux + sizes.framing;
    assert_eq!(
        sizes.prefix + sizes.ranks + sizes.corrections + sizes.residuals + metadata_bytes,
        archive_bytes,
        "storage breakdown must reconcile exactly"
    );
    assert_eq!(archive_bytes, archive.to_bytes().len() as u64);

    let h = &archive.header;
    let rank_count = h.rank_count();
    let accuracy = if rank_count == 0 {
        1.0
    } else {
        1.0 - h.n_corrections as f64 / rank_count as f64
    };
    Ok(Record {
        axis: axis.name().to_string(),
        value: point.value.clone(),
        accuracy,
        rho: llmc_core::metrics::compression_ratio(field, archive_bytes),
        bitrate: llmc_core::metrics::bitrate(field, archive_bytes),
        psnr_db: fid.psnr_db,
        max_rel_err: fid.max_rel_err,
        prefix_bytes: sizes.prefix,
        rank_bytes: sizes.ranks,
        correction_bytes: sizes.corrections,
        residual_bytes: sizes.residuals,
        metadata_bytes,
        archive_bytes,
        train_time_s,
        compress_time_s,
    })
}

/// Report file format, inferred from the output extension.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl ReportFormat {
    pub fn from_path(path: &Path) -> Option<ReportFormat> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => Some(ReportFormat::Csv),
            Some("json") => Some(ReportFormat::Json),
            _ => None,
        }
    }
}

/// Serialize with a stable column order. An empty report still writes the
/// CSV header line. All floats use the shortest round-trip decimal form,
/// so csv -> json -> csv preserves every field exactly.
pub fn emit_report(report: &Report, format: ReportFormat, path: &Path) -> Result<(), BenchError> {
    let bytes = match format {
        ReportFormat::Csv => report_to_csv(report)?,
        ReportFormat::Json => {
            let mut v = serde_json::to_vec_pretty(&report.records)
                .map_err(|e| spec_err(format!("json: {e}")))?;
            v.push(b'\n');
            v
        }
    };
    atomic_write(path, &bytes)?;
    Ok(())
}

pub fn report_to_csv(report: &Report) -> Result<Vec<u8>, BenchError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let as_csv = |e: csv::Error| spec_err(format!("csv: {e}"));
    w.write_record(Record::FIELDS).map_err(as_csv)?;
    for r in &report.records {
        let row = [
            r.axis.clone(),
            r.value.clone(),
            r.accuracy.to_string(),
            r.rho.to_string(),
            r.bitrate.to_string(),
            r.psnr_db.to_string(),
            r.max_rel_err.to_string(),
            r.prefix_bytes.to_string(),
            r.rank_bytes.to_string(),
            r.correction_bytes.to_string(),
            r.residual_bytes.to_string(),
            r.metadata_bytes.to_string(),
            r.archive_bytes.to_string(),
            r.train_time_s.to_string(),
            r.compress_time_s.to_string(),
        ];
        w.write_record(&row).map_err(as_csv)?;
    }
    w.into_inner().map_err(|e| spec_err(format!("csv: {e}")))
}

pub fn report_from_csv(bytes: &[u8]) -> Result<Report, BenchError> {
    let mut r = csv::Reader::from_reader(bytes);
    let as_csv = |e: csv::Error| spec_err(format!("csv: {e}"));
    {
        let headers = r.headers().map_err(as_csv)?;
        if headers.iter().ne(Record::FIELDS) {
            return Err(spec_err("csv header does not match the report schema"));
        }
    }
    let mut records = Vec::new();
    for row in r.records() {
        let row = row.map_err(as_csv)?;
        if row.len() != Record::FIELDS.len() {
            return Err(spec_err("csv row width does not match the report schema"));
        }
        let f = |i: usize| -> Result<f64, BenchError> {
            row[i].parse().map_err(|_| spec_err(format!("bad float {:?}", &row[i])))
        };
        let u = |i: usize| -> Result<u64, BenchError> {
            row[i].parse().map_err(|_| spec_err(format!("bad integer {:?}", &row[i])))
        };
        records.push(Record {
            axis: row[0].to_string(),
            value: row[1].to_string(),
            accuracy: f(2)?,
            rho: f(3)?,
            bitrate: f(4)?,
            psnr_db: f(5)?,
            max_rel_err: f(6)?,
            prefix_bytes: u(7)?,
            rank_bytes: u(8)?,
            correction_bytes: u(9)?,
            residual_bytes: u(10)?,
            metadata_bytes: u(11)?,
            archive_bytes: u(12)?,
            train_time_s: f(13)?,
            compress_time_s: f(14)?,
        });
    }
    Ok(Report { records })
}

pub fn report_from_json(bytes: &[u8]) -> Result<Report, BenchError> {
    let records: Vec<Record> =
        serde_json::from_slice(bytes).map_err(|e| spec_err(format!("json: {e}")))?;
    Ok(Report { records })
}

/// Parse a sweep spec from its JSON file contents.
pub fn parse_spec(bytes: &[u8]) -> Result<SweepSpec, BenchError> {
    serde_json::from_slice(bytes).map_err(|e| spec_err(e.to_string()))
}
