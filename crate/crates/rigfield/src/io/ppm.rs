//! Binary PPM (P6, 8-bit) image I/O.

use super::DataError;
use crate::geometry::Vec3;
use std::path::Path;

/// Write an image of `[0,1]` colors as binary P6 with maxval 255.
pub fn write_ppm(path: &Path, width: u32, height: u32, pixels: &[Vec3]) -> Result<(), DataError> {
    debug_assert_eq!(pixels.len(), (width * height) as usize);
    let mut bytes = format!("P6\n{width} {height}\n255\n").into_bytes();
    bytes.reserve(pixels.len() * 3);
    for p in pixels {
        for c in [p.x, p.y, p.z] {
            bytes.push((c.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    super::write_bytes(path, &bytes)
}

/// Read a binary P6 image back to `[0,1]` colors.
pub fn read_ppm(path: &Path) -> Result<(u32, u32, Vec<Vec3>), DataError> {
    if !path.exists() {
        return Err(DataError::MissingFile(path.to_path_buf()));
    }
    let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    let mut at = 0usize;
    let mut token = |what: &str| -> Result<String, DataError> {
        while at < bytes.len() && bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        let start = at;
        while at < bytes.len() && !bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        if start == at {
            return Err(DataError::parse(path, 1, format!("truncated header: missing {what}")));
        }
        Ok(String::from_utf8_lossy(&bytes[start..at]).into_owned())
    };
    let magic = token("magic")?;
    if magic != "P6" {
        return Err(DataError::parse(path, 1, format!("expected P6, got {magic}")));
    }
    let width: u32 = token("width")?
        .parse()
        .map_err(|_| DataError::parse(path, 1, "bad width"))?;
    let height: u32 = token("height")?
        .parse()
        .map_err(|_| DataError::parse(path, 1, "bad height"))?;
    let maxval: u32 = token("maxval")?
        .parse()
        .map_err(|_| DataError::parse(path, 1, "bad maxval"))?;
    if maxval != 255 {
        return Err(DataError::parse(path, 1, format!("unsupported maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    at += 1;
    let need = (width * height) as usize * 3;
    if bytes.len() < at + need {
        return Err(DataError::parse(
            path,
            1,
            format!("truncated raster: need {need} bytes, have {}", bytes.len().saturating_sub(at)),
        ));
    }
    let pixels = bytes[at..at + need]
        .chunks_exact(3)
        .map(|c| Vec3::new(c[0] as f64 / 255.0, c[1] as f64 / 255.0, c[2] as f64 / 255.0))
        .collect();
    Ok((width, height, pixels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::quantize_rgb;

    #[test]
    fn roundtrip_preserves_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        let pixels: Vec<Vec3> = (0..12)
            .map(|i| quantize_rgb(Vec3::new(i as f64 / 11.0, 0.5, 1.0 - i as f64 / 11.0)))
            .collect();
        write_ppm(&path, 4, 3, &pixels).unwrap();
        let (w, h, back) = read_ppm(&path).unwrap();
        assert_eq!((w, h), (4, 3));
        assert_eq!(back, pixels, "8-bit-quantized values reload exactly");
    }

    #[test]
    fn truncated_file_reports_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.ppm");
        std::fs::write(&path, b"P6\n4 3\n255\n\0\0").unwrap();
        let err = read_ppm(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("broken.ppm"), "{msg}");
        assert!(msg.contains("truncated"), "{msg}");
    }

    #[test]
    fn missing_file_is_distinguished() {
        let err = read_ppm(Path::new("/nonexistent/x.ppm")).unwrap_err();
        assert!(matches!(err, DataError::MissingFile(_)));
    }
}
