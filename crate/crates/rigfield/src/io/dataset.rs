//! On-disk dataset layout:
//!
//! ```text
//! manifest.txt          key=value sections per sensor: kind, intrinsics, files
//! trajectory.txt        reference trajectory (trajectory text format)
//! cam<i>/<frame>.ppm    binary P6, 8-bit
//! cam<i>/<frame>.t      timestamp, seconds, text
//! lidar<i>/<frame>.xyz  text lines `dx dy dz range`, sensor frame
//! lidar<i>/<frame>.t    timestamp, seconds, text
//! gt_calib.txt          calibration schema; absent in blind mode
//! priors.txt            perturbed calibration priors (written by simulate)
//! ```

use super::{calib_file, fmt17, parse_f64, ppm, traj, DataError};
use crate::geometry::Vec3;
use crate::optim::calib::CalibrationState;
use crate::render::PinholeIntrinsics;
use crate::sim::{RigDataset, SensorData, SensorKind};
use std::path::{Path, PathBuf};

fn frame_stem(index: usize) -> String {
    format!("{index:06}")
}

fn write_timestamp(path: &Path, t: f64) -> Result<(), DataError> {
    super::write_bytes(path, format!("{}\n", fmt17(t)).as_bytes())
}

fn read_timestamp(path: &Path) -> Result<f64, DataError> {
    let text = super::read_to_string(path)?;
    parse_f64(path, 1, text.trim())
}

fn write_scan(path: &Path, scan: &[(Vec3, f64)]) -> Result<(), DataError> {
    let mut out = String::with_capacity(scan.len() * 80);
    for (dir, range) in scan {
        out.push_str(&format!(
            "{} {} {} {}\n",
            fmt17(dir.x),
            fmt17(dir.y),
            fmt17(dir.z),
            fmt17(*range)
        ));
    }
    super::write_bytes(path, out.as_bytes())
}

fn read_scan(path: &Path) -> Result<Vec<(Vec3, f64)>, DataError> {
    let text = super::read_to_string(path)?;
    let mut out = Vec::new();
    for (ln0, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 4 {
            return Err(DataError::parse(path, ln0 + 1, format!("expected 4 fields, got {}", toks.len())));
        }
        out.push((
            Vec3::new(
                parse_f64(path, ln0 + 1, toks[0])?,
                parse_f64(path, ln0 + 1, toks[1])?,
                parse_f64(path, ln0 + 1, toks[2])?,
            ),
            parse_f64(path, ln0 + 1, toks[3])?,
        ));
    }
    Ok(out)
}

/// Write the dataset directory; `gt` is omitted in blind mode.
pub fn write_dataset(
    dir: &Path,
    ds: &RigDataset,
    gt: Option<&CalibrationState>,
) -> Result<(), DataError> {
    std::fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    traj::write_trajectory(&dir.join("trajectory.txt"), &ds.track)?;
    if let Some(gt) = gt {
        calib_file::write_calibration(&dir.join("gt_calib.txt"), gt)?;
    }

    let mut manifest = String::from("# rig dataset manifest\nversion = 1\n");
    manifest.push_str(&format!("duration = {}\n", fmt17(ds.duration)));
    manifest.push_str("trajectory = trajectory.txt\n");

    for sensor in &ds.sensors {
        let sensor_dir = dir.join(&sensor.name);
        std::fs::create_dir_all(&sensor_dir).map_err(|e| DataError::io(&sensor_dir, e))?;
        manifest.push_str(&format!("\n[sensor {}]\n", sensor.name));
        match &sensor.kind {
            SensorKind::Camera { intr, rate } => {
                manifest.push_str("kind = camera\n");
                manifest.push_str(&format!("width = {}\n", intr.width));
                manifest.push_str(&format!("height = {}\n", intr.height));
                manifest.push_str(&format!("fx = {}\n", fmt17(intr.fx)));
                manifest.push_str(&format!("fy = {}\n", fmt17(intr.fy)));
                manifest.push_str(&format!("cx = {}\n", fmt17(intr.cx)));
                manifest.push_str(&format!("cy = {}\n", fmt17(intr.cy)));
                manifest.push_str(&format!("rate = {}\n", fmt17(*rate)));
                for (fi, t) in sensor.timestamps.iter().enumerate() {
                    let stem = frame_stem(fi);
                    let img_rel = format!("{}/{}.ppm", sensor.name, stem);
                    let t_rel = format!("{}/{}.t", sensor.name, stem);
                    ppm::write_ppm(&dir.join(&img_rel), intr.width, intr.height, &sensor.images[fi])?;
                    write_timestamp(&dir.join(&t_rel), *t)?;
                    manifest.push_str(&format!("frame = {img_rel} {t_rel}\n"));
                }
            }
            SensorKind::Lidar { rings, azimuth_steps, vfov_deg, rate, max_range } => {
                manifest.push_str("kind = lidar\n");
                manifest.push_str(&format!("rings = {rings}\n"));
                manifest.push_str(&format!("azimuth_steps = {azimuth_steps}\n"));
                manifest.push_str(&format!("vfov_deg = {}\n", fmt17(*vfov_deg)));
                manifest.push_str(&format!("max_range = {}\n", fmt17(*max_range)));
                manifest.push_str(&format!("rate = {}\n", fmt17(*rate)));
                for (fi, t) in sensor.timestamps.iter().enumerate() {
                    let stem = frame_stem(fi);
                    let scan_rel = format!("{}/{}.xyz", sensor.name, stem);
                    let t_rel = format!("{}/{}.t", sensor.name, stem);
                    write_scan(&dir.join(&scan_rel), &sensor.scans[fi])?;
                    write_timestamp(&dir.join(&t_rel), *t)?;
                    manifest.push_str(&format!("frame = {scan_rel} {t_rel}\n"));
                }
            }
        }
    }
    super::write_bytes(&dir.join("manifest.txt"), manifest.as_bytes())
}

struct PendingSensor {
    name: String,
    kind: Option<String>,
    fields: std::collections::BTreeMap<String, String>,
    frames: Vec<(String, String)>,
    header_line: usize,
}

impl PendingSensor {
    fn finish(self, dir: &Path, manifest: &Path) -> Result<SensorData, DataError> {
        let get = |key: &str| -> Result<&String, DataError> {
            self.fields.get(key).ok_or_else(|| {
                DataError::parse(
                    manifest,
                    self.header_line,
                    format!("sensor {}: missing key `{key}`", self.name),
                )
            })
        };
        let getf = |key: &str| -> Result<f64, DataError> {
            parse_f64(manifest, self.header_line, get(key)?)
        };
        let kind = match self.kind.as_deref() {
            Some("camera") => SensorKind::Camera {
                intr: PinholeIntrinsics {
                    fx: getf("fx")?,
                    fy: getf("fy")?,
                    cx: getf("cx")?,
                    cy: getf("cy")?,
                    width: getf("width")? as u32,
                    height: getf("height")? as u32,
                },
                rate: getf("rate")?,
            },
            Some("lidar") => SensorKind::Lidar {
                rings: getf("rings")? as u32,
                azimuth_steps: getf("azimuth_steps")? as u32,
                vfov_deg: getf("vfov_deg")?,
                rate: getf("rate")?,
                max_range: getf("max_range")?,
            },
            other => {
                return Err(DataError::parse(
                    manifest,
                    self.header_line,
                    format!("sensor {}: bad kind {other:?}", self.name),
                ))
            }
        };
        let mut data = SensorData {
            name: self.name,
            kind,
            timestamps: Vec::with_capacity(self.frames.len()),
            images: Vec::new(),
            scans: Vec::new(),
        };
        for (payload_rel, t_rel) in &self.frames {
            let payload = dir.join(payload_rel);
            let t_path = dir.join(t_rel);
            if !payload.exists() {
                return Err(DataError::MissingFile(payload));
            }
            data.timestamps.push(read_timestamp(&t_path)?);
            match &data.kind {
                SensorKind::Camera { intr, .. } => {
                    let (w, h, pixels) = ppm::read_ppm(&payload)?;
                    if (w, h) != (intr.width, intr.height) {
                        return Err(DataError::parse(
                            &payload,
                            1,
                            format!("image is {w}x{h}, manifest says {}x{}", intr.width, intr.height),
                        ));
                    }
                    data.images.push(pixels);
                }
                SensorKind::Lidar { .. } => {
                    data.scans.push(read_scan(&payload)?);
                }
            }
        }
        Ok(data)
    }
}

/// Load a dataset directory back into memory (exact reload of what
/// `write_dataset` wrote).
pub fn load_dataset(dir: &Path) -> Result<RigDataset, DataError> {
    let manifest_path = dir.join("manifest.txt");
    let text = super::read_to_string(&manifest_path)?;

    let mut duration: Option<f64> = None;
    let mut trajectory_rel: Option<String> = None;
    let mut sensors: Vec<SensorData> = Vec::new();
    let mut current: Option<PendingSensor> = None;

    for (ln0, raw) in text.lines().enumerate() {
        let ln = ln0 + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(rest) = line.strip_prefix("[sensor ") {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| DataError::parse(&manifest_path, ln, "unterminated section header"))?;
            if let Some(pending) = current.take() {
                sensors.push(pending.finish(dir, &manifest_path)?);
            }
            current = Some(PendingSensor {
                name: name.to_string(),
                kind: None,
                fields: Default::default(),
                frames: Vec::new(),
                header_line: ln,
            });
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| DataError::parse(&manifest_path, ln, "expected key = value"))?;
        let key = key.trim();
        let value = value.trim();
        match (&mut current, key) {
            (None, "version") => {}
            (None, "duration") => duration = Some(parse_f64(&manifest_path, ln, value)?),
            (None, "trajectory") => trajectory_rel = Some(value.to_string()),
            (None, other) => {
                return Err(DataError::parse(&manifest_path, ln, format!("unknown key `{other}`")))
            }
            (Some(cur), "kind") => cur.kind = Some(value.to_string()),
            (Some(cur), "frame") => {
                let mut toks = value.split_whitespace();
                let payload = toks.next().map(str::to_string);
                let stamp = toks.next().map(str::to_string);
                match (payload, stamp) {
                    (Some(p), Some(t)) => cur.frames.push((p, t)),
                    _ => return Err(DataError::parse(&manifest_path, ln, "frame needs 2 paths")),
                }
            }
            (Some(cur), other) => {
                cur.fields.insert(other.to_string(), value.to_string());
            }
        }
    }
    if let Some(pending) = current.take() {
        sensors.push(pending.finish(dir, &manifest_path)?);
    }

    let duration =
        duration.ok_or_else(|| DataError::parse(&manifest_path, 0, "missing duration"))?;
    let trajectory_rel =
        trajectory_rel.ok_or_else(|| DataError::parse(&manifest_path, 0, "missing trajectory"))?;
    let track = traj::read_trajectory(&dir.join(trajectory_rel))?;
    Ok(RigDataset { duration, track, sensors })
}

/// Paths of every file a dataset directory contains (for byte-identity
/// comparisons in tests).
pub fn dataset_files(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let entries = std::fs::read_dir(&d).map_err(|e| DataError::io(&d, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| DataError::io(&d, e))?;
            let p = entry.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push(p);
            }
        }
    }
    files.sort();
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Quat, SE3Pose};
    use crate::sim::{
        default_scene, lidar_to_camera_rotation, make_trajectory, simulate_rig, NoiseConfig,
        RigSpec, SensorSpec, TrajectoryKind,
    };
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_rig() -> RigSpec {
        let intr = PinholeIntrinsics::from_hfov(16, 12, 60.0);
        RigSpec {
            sensors: vec![
                SensorSpec {
                    name: "cam0".into(),
                    kind: SensorKind::Camera { intr, rate: 2.0 },
                    gt_extrinsic: SE3Pose::identity(),
                    gt_delta: 0.0,
                    reference: true,
                },
                SensorSpec {
                    name: "lidar0".into(),
                    kind: SensorKind::Lidar {
                        rings: 4,
                        azimuth_steps: 12,
                        vfov_deg: 30.0,
                        rate: 2.0,
                        max_range: 60.0,
                    },
                    gt_extrinsic: SE3Pose::new(
                        lidar_to_camera_rotation(),
                        crate::geometry::Vec3::new(0.0, -0.3, 0.0),
                    ),
                    gt_delta: 0.04,
                    reference: false,
                },
            ],
        }
    }

    fn small_dataset() -> (RigDataset, RigSpec) {
        let rig = small_rig();
        let track = make_trajectory(TrajectoryKind::Arc, 2.0, 2.0, 10.0, 1.5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ds = simulate_rig(&default_scene(), &rig, &track, 2.0, &NoiseConfig::default(), &mut rng);
        (ds, rig)
    }

    #[test]
    fn write_then_load_reproduces_content_exactly() {
        let (ds, rig) = small_dataset();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &ds, Some(&rig.gt_calibration())).unwrap();
        let back = load_dataset(dir.path()).unwrap();

        assert_eq!(back.duration.to_bits(), ds.duration.to_bits());
        assert_eq!(back.sensors.len(), ds.sensors.len());
        for (a, b) in ds.sensors.iter().zip(&back.sensors) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.timestamps.len(), b.timestamps.len());
            for (ta, tb) in a.timestamps.iter().zip(&b.timestamps) {
                assert_eq!(ta.to_bits(), tb.to_bits(), "timestamps exact");
            }
            for (ia, ib) in a.images.iter().zip(&b.images) {
                assert_eq!(ia, ib, "images exact (8-bit quantized)");
            }
            for (sa, sb) in a.scans.iter().zip(&b.scans) {
                assert_eq!(sa.len(), sb.len());
                for ((da, ra), (db, rb)) in sa.iter().zip(sb) {
                    assert_eq!(da.x.to_bits(), db.x.to_bits());
                    assert_eq!(ra.to_bits(), rb.to_bits());
                }
            }
        }
        // Rewriting the loaded dataset is byte-identical.
        let dir2 = tempfile::tempdir().unwrap();
        write_dataset(dir2.path(), &back, Some(&rig.gt_calibration())).unwrap();
        let f1 = dataset_files(dir.path()).unwrap();
        let f2 = dataset_files(dir2.path()).unwrap();
        assert_eq!(f1.len(), f2.len());
        for (a, b) in f1.iter().zip(&f2) {
            assert_eq!(
                a.strip_prefix(dir.path()).unwrap(),
                b.strip_prefix(dir2.path()).unwrap()
            );
            assert_eq!(
                std::fs::read(a).unwrap(),
                std::fs::read(b).unwrap(),
                "file {a:?} byte-identical"
            );
        }
    }

    #[test]
    fn missing_frame_file_is_reported() {
        let (ds, _) = small_dataset();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &ds, None).unwrap();
        std::fs::remove_file(dir.path().join("cam0/000001.ppm")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, DataError::MissingFile(p) if p.ends_with("cam0/000001.ppm")));
    }

    #[test]
    fn truncated_image_names_the_file() {
        let (ds, _) = small_dataset();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &ds, None).unwrap();
        let victim = dir.path().join("cam0/000000.ppm");
        let bytes = std::fs::read(&victim).unwrap();
        std::fs::write(&victim, &bytes[..bytes.len() / 2]).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("000000.ppm"), "{err}");
    }

    #[test]
    fn blind_mode_omits_ground_truth() {
        let (ds, rig) = small_dataset();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &ds, None).unwrap();
        assert!(!dir.path().join("gt_calib.txt").exists());
        let dir2 = tempfile::tempdir().unwrap();
        write_dataset(dir2.path(), &ds, Some(&rig.gt_calibration())).unwrap();
        assert!(dir2.path().join("gt_calib.txt").exists());
    }
}
