//! Grayscale PFM (`Pf`) output for depth maps: little-endian f32 scanlines,
//! bottom row first, scale -1.0.

use super::DataError;
use std::path::Path;

pub fn write_pfm(path: &Path, width: u32, height: u32, values: &[f64]) -> Result<(), DataError> {
    debug_assert_eq!(values.len(), (width * height) as usize);
    let mut bytes = format!("Pf\n{width} {height}\n-1.0\n").into_bytes();
    for row in (0..height).rev() {
        for col in 0..width {
            let v = values[(row * width + col) as usize] as f32;
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    super::write_bytes(path, &bytes)
}

pub fn read_pfm(path: &Path) -> Result<(u32, u32, Vec<f64>), DataError> {
    if !path.exists() {
        return Err(DataError::MissingFile(path.to_path_buf()));
    }
    let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    let header_end = bytes
        .iter()
        .enumerate()
        .filter(|(_, b)| **b == b'\n')
        .nth(2)
        .map(|(i, _)| i + 1)
        .ok_or_else(|| DataError::parse(path, 1, "truncated header"))?;
    let header = String::from_utf8_lossy(&bytes[..header_end]);
    let mut lines = header.lines();
    if lines.next() != Some("Pf") {
        return Err(DataError::parse(path, 1, "expected grayscale Pf"));
    }
    let dims: Vec<&str> = lines.next().unwrap_or("").split_whitespace().collect();
    if dims.len() != 2 {
        return Err(DataError::parse(path, 2, "bad dimensions"));
    }
    let width: u32 = dims[0].parse().map_err(|_| DataError::parse(path, 2, "bad width"))?;
    let height: u32 = dims[1].parse().map_err(|_| DataError::parse(path, 2, "bad height"))?;
    let scale: f64 = lines
        .next()
        .unwrap_or("")
        .trim()
        .parse()
        .map_err(|_| DataError::parse(path, 3, "bad scale"))?;
    if scale >= 0.0 {
        return Err(DataError::parse(path, 3, "big-endian PFM unsupported"));
    }
    let need = (width * height) as usize * 4;
    if bytes.len() < header_end + need {
        return Err(DataError::parse(path, 3, "truncated raster"));
    }
    let mut values = vec![0.0f64; (width * height) as usize];
    let mut at = header_end;
    for row in (0..height).rev() {
        for col in 0..width {
            let v = f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
            values[(row * width + col) as usize] = v as f64;
            at += 4;
        }
    }
    Ok((width, height, values))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_at_f32_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("depth.pfm");
        let values: Vec<f64> = (0..6).map(|i| i as f64 * 1.25 + 0.5).collect();
        write_pfm(&path, 3, 2, &values).unwrap();
        let (w, h, back) = read_pfm(&path).unwrap();
        assert_eq!((w, h), (3, 2));
        for (a, b) in values.iter().zip(&back) {
            assert_eq!(*a as f32, *b as f32);
        }
    }
}
