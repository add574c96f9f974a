//! Archive files: the core's serialized container written verbatim. All
//! integrity checks live in the container format itself.

use std::path::Path;

use llmc_core::codec::Archive;

use crate::io::{atomic_write, FileError, FileResult};

pub fn save_archive(path: &Path, archive: &Archive) -> FileResult<()> {
    atomic_write(path, &archive.to_bytes())
}

pub fn load_archive(path: &Path) -> FileResult<Archive> {
    let bytes = std::fs::read(path)
        .map_err(|e| FileError::Io { path: path.display().to_string(), source: e })?;
    Archive::from_bytes(&bytes).map_err(FileError::Core)
}

#[cfg(test)]
mod tests {
    use super::*;
    use llmc_core::codec::{compress, PredictorInfo, QuantizerSpec};
    use llmc_core::field::{gen_synthetic, Dims, SyntheticKind};
    use llmc_core::layout::LayoutKind;
    use llmc_core::predictor::BaselinePredictor;
    use llmc_core::quant::FitParams;

    #[test]
    fn archive_files_round_trip() {
        let dims = Dims::new(3, 8, 8).unwrap();
        let field = gen_synthetic(SyntheticKind::SmoothAdvection, dims, 5);
        let baseline = BaselinePredictor::last_value(&[1; 16], 2).unwrap();
        let archive = compress(
            &field,
            1e-3,
            QuantizerSpec::Fit { vocab: 16, params: &FitParams::default() },
            &PredictorInfo::baseline(&baseline),
            4,
            LayoutKind::ZOrder,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.llmc");
        save_archive(&path, &archive).unwrap();
        assert_eq!(
            std::fs::metadata(&path).unwrap().len(),
            archive.serialized_len(),
            "on-disk size is the container's own accounting"
        );
        let back = load_archive(&path).unwrap();
        assert_eq!(back.to_bytes(), archive.to_bytes());

        // Corruption on disk is refused at load.
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x80;
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_archive(&path).is_err());
    }
}
