//! Calibration file: human-readable sections with per-sensor quaternion,
//! translation (meters) and clock offset (seconds). The same schema serves
//! optimizer results, priors and simulator ground truth.

use super::{fmt17, parse_f64, DataError};
use crate::geometry::{Quat, Vec3};
use crate::optim::calib::{CalibrationState, SensorCalib};
use std::path::Path;

pub fn calibration_to_string(state: &CalibrationState) -> String {
    let mut out = String::from("# sensor calibration: rotation = qw qx qy qz (sensor-to-reference)\n");
    for s in &state.sensors {
        let q = s.rotation;
        out.push_str(&format!("\n[sensor {}]\n", s.name));
        out.push_str(&format!("reference = {}\n", s.reference));
        out.push_str(&format!(
            "rotation = {} {} {} {}\n",
            fmt17(q.w),
            fmt17(q.x),
            fmt17(q.y),
            fmt17(q.z)
        ));
        out.push_str(&format!(
            "translation = {} {} {}\n",
            fmt17(s.translation.x),
            fmt17(s.translation.y),
            fmt17(s.translation.z)
        ));
        out.push_str(&format!("delta = {}\n", fmt17(s.delta)));
    }
    out
}

pub fn write_calibration(path: &Path, state: &CalibrationState) -> Result<(), DataError> {
    super::write_bytes(path, calibration_to_string(state).as_bytes())
}

pub fn read_calibration(path: &Path) -> Result<CalibrationState, DataError> {
    let text = super::read_to_string(path)?;
    let mut sensors: Vec<SensorCalib> = Vec::new();
    let mut current: Option<(String, bool, Option<Quat>, Option<Vec3>, Option<f64>)> = None;

    let finish = |cur: Option<(String, bool, Option<Quat>, Option<Vec3>, Option<f64>)>,
                      ln: usize|
     -> Result<Option<SensorCalib>, DataError> {
        let Some((name, reference, q, t, d)) = cur else {
            return Ok(None);
        };
        if reference {
            return Ok(Some(SensorCalib::reference(&name)));
        }
        let q = q.ok_or_else(|| DataError::parse(path, ln, format!("sensor {name}: missing rotation")))?;
        let t = t.ok_or_else(|| DataError::parse(path, ln, format!("sensor {name}: missing translation")))?;
        let d = d.ok_or_else(|| DataError::parse(path, ln, format!("sensor {name}: missing delta")))?;
        Ok(Some(SensorCalib::new(&name, q, t, d)))
    };

    for (ln0, raw) in text.lines().enumerate() {
        let ln = ln0 + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(rest) = line.strip_prefix("[sensor ") {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| DataError::parse(path, ln, "unterminated section header"))?;
            if let Some(s) = finish(current.take(), ln)? {
                sensors.push(s);
            }
            current = Some((name.to_string(), false, None, None, None));
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| DataError::parse(path, ln, "expected key = value"))?;
        let key = key.trim();
        let value = value.trim();
        let cur = current
            .as_mut()
            .ok_or_else(|| DataError::parse(path, ln, "key outside a [sensor] section"))?;
        match key {
            "reference" => {
                cur.1 = value
                    .parse()
                    .map_err(|_| DataError::parse(path, ln, "bad reference flag"))?;
            }
            "rotation" => {
                let toks: Vec<&str> = value.split_whitespace().collect();
                if toks.len() != 4 {
                    return Err(DataError::parse(path, ln, "rotation needs 4 components"));
                }
                cur.2 = Some(Quat::new(
                    parse_f64(path, ln, toks[0])?,
                    parse_f64(path, ln, toks[1])?,
                    parse_f64(path, ln, toks[2])?,
                    parse_f64(path, ln, toks[3])?,
                ));
            }
            "translation" => {
                let toks: Vec<&str> = value.split_whitespace().collect();
                if toks.len() != 3 {
                    return Err(DataError::parse(path, ln, "translation needs 3 components"));
                }
                cur.3 = Some(Vec3::new(
                    parse_f64(path, ln, toks[0])?,
                    parse_f64(path, ln, toks[1])?,
                    parse_f64(path, ln, toks[2])?,
                ));
            }
            "delta" => {
                cur.4 = Some(parse_f64(path, ln, value)?);
            }
            other => {
                return Err(DataError::parse(path, ln, format!("unknown key `{other}`")));
            }
        }
    }
    if let Some(s) = finish(current.take(), text.lines().count())? {
        sensors.push(s);
    }
    if sensors.is_empty() {
        return Err(DataError::parse(path, 0, "no sensors in calibration file"));
    }
    Ok(CalibrationState { sensors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_state(seed: u64) -> CalibrationState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sensors = vec![SensorCalib::reference("cam0")];
        for i in 0..3 {
            let axis = Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            sensors.push(SensorCalib::new(
                &format!("s{i}"),
                Quat::from_axis_angle(axis, rng.gen_range(-2.0..2.0)),
                Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
                rng.gen_range(-0.2..0.2),
            ));
        }
        CalibrationState { sensors }
    }

    #[test]
    fn roundtrip_is_byte_stable_at_17_digits() {
        let dir = tempfile::tempdir().unwrap();
        for seed in 0..20 {
            let state = random_state(seed);
            let p1 = dir.path().join(format!("c{seed}_1.txt"));
            let p2 = dir.path().join(format!("c{seed}_2.txt"));
            write_calibration(&p1, &state).unwrap();
            let s1 = read_calibration(&p1).unwrap();
            write_calibration(&p2, &s1).unwrap();
            let f1 = std::fs::read(&p1).unwrap();
            let f2 = std::fs::read(&p2).unwrap();
            assert_eq!(f1, f2, "seed {seed}: write -> read -> write is byte-identical");
        }
    }

    #[test]
    fn translation_and_delta_reload_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        let state = random_state(3);
        write_calibration(&path, &state).unwrap();
        let back = read_calibration(&path).unwrap();
        for (a, b) in state.sensors.iter().zip(&back.sensors) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.reference, b.reference);
            if !a.reference {
                assert_eq!(a.translation.x.to_bits(), b.translation.x.to_bits());
                assert_eq!(a.delta.to_bits(), b.delta.to_bits());
            }
        }
    }

    #[test]
    fn parse_errors_carry_location() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        std::fs::write(&path, "[sensor a]\nreference = false\nrotation = 1 0 0\n").unwrap();
        let err = read_calibration(&path).unwrap_err();
        assert!(err.to_string().contains("bad.txt:3"), "{err}");
    }
}
