//! Raw field files: headerless little-endian samples in (t, m, n)
//! row-major order, dims and precision supplied out of band. Writes are
//! atomic (temp file + rename) so a failed run never leaves a partial
//! output behind.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use llmc_core::field::{Dims, Field, Precision};

/// Anything the std layer can fail with: an OS error with the offending
/// path, or a core validation/codec error.
#[derive(Debug)]
pub enum FileError {
    Io { path: String, source: std::io::Error },
    Core(llmc_core::Error),
}

impl std::fmt::Display for FileError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FileError::Io { path, source } => write!(f, "{path}: {source}"),
            FileError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for FileError {}

impl From<llmc_core::Error> for FileError {
    fn from(e: llmc_core::Error) -> Self {
        FileError::Core(e)
    }
}

pub type FileResult<T> = std::result::Result<T, FileError>;

fn io_err(path: &Path, source: std::io::Error) -> FileError {
    FileError::Io { path: path.display().to_string(), source }
}

/// Write `bytes` to `path` atomically: a temp file in the same directory
/// is written, flushed, then renamed over the target.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> FileResult<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_err(path, e))?;
    tmp.write_all(bytes).map_err(|e| io_err(path, e))?;
    tmp.flush().map_err(|e| io_err(path, e))?;
    tmp.persist(path).map_err(|e| io_err(path, e.error))?;
    Ok(())
}

/// Load a raw field file. The file must hold exactly T*M*N samples of the
/// given precision; non-finite samples are rejected.
pub fn load_field(path: &Path, dims: Dims, precision: Precision) -> FileResult<Field> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    field_from_bytes(&bytes, dims, precision).map_err(FileError::Core)
}

/// Save a field as raw little-endian samples in flatten order.
pub fn save_field(path: &Path, field: &Field) -> FileResult<()> {
    atomic_write(path, &field_to_bytes(field))
}

/// Decode raw little-endian samples into a validated field.
pub fn field_from_bytes(bytes: &[u8], dims: Dims, precision: Precision) -> llmc_core::Result<Field> {
    let expected = dims.len() * precision.bytes() as u64;
    if bytes.len() as u64 != expected {
        return Err(llmc_core::Error::SampleCountMismatch {
            expected: dims.len(),
            actual: bytes.len() as u64 / precision.bytes() as u64,
        });
    }
    let values: Vec<f64> = match precision {
        Precision::F32 => bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect(),
        Precision::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk size")))
            .collect(),
    };
    Field::new(dims, precision, values)
}

/// Encode a field as raw little-endian samples in flatten order.
pub fn field_to_bytes(field: &Field) -> Vec<u8> {
    let values = field.values();
    let mut out = Vec::with_capacity(values.len() * field.precision().bytes());
    match field.precision() {
        Precision::F32 => {
            for &v in values {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Precision::F64 => {
            for &v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}
