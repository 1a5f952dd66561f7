//! Field checkpoint: magic `MOISSTCK`, format version, config header, then
//! all parameters as little-endian 64-bit reals in layout order (grid
//! tables level by level, then decoder blocks).

use super::DataError;
use crate::field::{FieldConfig, FieldModel};
use std::path::Path;

const MAGIC: &[u8; 8] = b"MOISSTCK";
const VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, model: &FieldModel) -> Result<(), DataError> {
    let cfg = &model.cfg;
    let mut bytes = Vec::with_capacity(16 + model.params.len() * 8);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    for v in [
        cfg.levels as u32,
        cfg.base_resolution,
        cfg.max_resolution,
        cfg.features_per_level as u32,
        cfg.hash_size as u32,
        cfg.hidden_dim as u32,
        cfg.geo_features as u32,
        cfg.sh_degree as u32,
    ] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes.extend_from_slice(&cfg.density_bias.to_le_bytes());
    for b in cfg.bounds_min.iter().chain(cfg.bounds_max.iter()) {
        bytes.extend_from_slice(&b.to_le_bytes());
    }
    bytes.extend_from_slice(&(model.params.len() as u64).to_le_bytes());
    for p in &model.params {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    super::write_bytes(path, &bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], DataError> {
        if self.at + n > self.bytes.len() {
            return Err(DataError::parse(self.path, 0, format!("truncated checkpoint: {what}")));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, DataError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64, DataError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<FieldModel, DataError> {
    if !path.exists() {
        return Err(DataError::MissingFile(path.to_path_buf()));
    }
    let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    let mut r = Reader { bytes: &bytes, at: 0, path };
    if r.take(8, "magic")? != MAGIC {
        return Err(DataError::parse(path, 0, "bad magic (not a field checkpoint)"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(DataError::parse(path, 0, format!("unsupported version {version}")));
    }
    let levels = r.u32("levels")? as usize;
    let base_resolution = r.u32("base_resolution")?;
    let max_resolution = r.u32("max_resolution")?;
    let features_per_level = r.u32("features_per_level")? as usize;
    let hash_size = r.u32("hash_size")? as usize;
    let hidden_dim = r.u32("hidden_dim")? as usize;
    let geo_features = r.u32("geo_features")? as usize;
    let sh_degree = r.u32("sh_degree")? as usize;
    let density_bias = r.f64("density_bias")?;
    let mut bounds = [0.0; 6];
    for b in &mut bounds {
        *b = r.f64("bounds")?;
    }
    let cfg = FieldConfig {
        levels,
        base_resolution,
        max_resolution,
        features_per_level,
        hash_size,
        hidden_dim,
        geo_features,
        sh_degree,
        density_bias,
        bounds_min: [bounds[0], bounds[1], bounds[2]],
        bounds_max: [bounds[3], bounds[4], bounds[5]],
    };
    let n = r.u64("param count")? as usize;
    let mut params = Vec::with_capacity(n);
    for _ in 0..n {
        params.push(r.f64("parameters")?);
    }
    FieldModel::from_parts(cfg, params).map_err(|e| DataError::parse(path, 0, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_model(seed: u64) -> FieldModel {
        let cfg = FieldConfig {
            levels: 3,
            base_resolution: 4,
            max_resolution: 16,
            features_per_level: 2,
            hash_size: 1 << 12,
            hidden_dim: 8,
            geo_features: 4,
            sh_degree: 2,
            density_bias: -2.5,
            bounds_min: [-1.0, -2.0, -3.0],
            bounds_max: [4.0, 5.0, 6.0],
        };
        FieldModel::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn save_load_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("field.ckpt");
        let model = small_model(4);
        save_checkpoint(&path, &model).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.cfg, model.cfg);
        assert_eq!(back.params.len(), model.params.len());
        for (a, b) in model.params.iter().zip(&back.params) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOTMAGIC rest").unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn truncation_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("field.ckpt");
        let model = small_model(5);
        save_checkpoint(&path, &model).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
