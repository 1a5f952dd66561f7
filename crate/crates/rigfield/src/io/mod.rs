//! Persistence and evaluation: dataset layout, trajectory/calibration text
//! formats, field checkpoints, run configuration, error metrics and report
//! emission.

pub mod calib_file;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod metrics;
pub mod pfm;
pub mod ppm;
pub mod report;
pub mod traj;

use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {msg}")]
    Parse { file: PathBuf, line: usize, msg: String },
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
}

impl DataError {
    pub fn io(path: &Path, source: std::io::Error) -> DataError {
        DataError::Io { path: path.to_path_buf(), source }
    }

    pub fn parse(file: &Path, line: usize, msg: impl Into<String>) -> DataError {
        DataError::Parse { file: file.to_path_buf(), line, msg: msg.into() }
    }
}

/// 17-significant-digit formatting: lossless for f64 round trips.
pub fn fmt17(x: f64) -> String {
    format!("{:.16e}", x)
}

pub(crate) fn read_to_string(path: &Path) -> Result<String, DataError> {
    if !path.exists() {
        return Err(DataError::MissingFile(path.to_path_buf()));
    }
    std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    std::fs::write(path, bytes).map_err(|e| DataError::io(path, e))
}

pub(crate) fn parse_f64(file: &Path, line: usize, tok: &str) -> Result<f64, DataError> {
    tok.parse::<f64>()
        .map_err(|_| DataError::parse(file, line, format!("bad float `{tok}`")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fmt17_roundtrips_exactly() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let x: f64 = rng.gen_range(-1e6..1e6) * 10f64.powi(rng.gen_range(-12..12));
            let back: f64 = fmt17(x).parse().unwrap();
            assert_eq!(x.to_bits(), back.to_bits(), "{x}");
        }
    }
}
