//! Trajectory text format: one knot per line,
//! `t qw qx qy qz tx ty tz`, 17 significant digits, `#` comments ignored.

use super::{fmt17, parse_f64, DataError};
use crate::geometry::{Quat, SE3Pose, Vec3};
use crate::trajectory::{build_track, TimedPoseTrack};
use std::path::Path;

pub fn write_trajectory(path: &Path, track: &TimedPoseTrack) -> Result<(), DataError> {
    let mut out = String::from("# trajectory knots: t qw qx qy qz tx ty tz\n");
    for (t, pose) in track.knots() {
        let q = pose.rotation;
        let p = pose.translation;
        out.push_str(&format!(
            "{} {} {} {} {} {} {} {}\n",
            fmt17(*t),
            fmt17(q.w),
            fmt17(q.x),
            fmt17(q.y),
            fmt17(q.z),
            fmt17(p.x),
            fmt17(p.y),
            fmt17(p.z)
        ));
    }
    super::write_bytes(path, out.as_bytes())
}

pub fn read_trajectory(path: &Path) -> Result<TimedPoseTrack, DataError> {
    let text = super::read_to_string(path)?;
    let mut samples = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 8 {
            return Err(DataError::parse(path, ln + 1, format!("expected 8 fields, got {}", toks.len())));
        }
        let mut vals = [0.0f64; 8];
        for (i, tok) in toks.iter().enumerate() {
            vals[i] = parse_f64(path, ln + 1, tok)?;
        }
        samples.push((
            vals[0],
            SE3Pose::new(
                Quat::new(vals[1], vals[2], vals[3], vals[4]),
                Vec3::new(vals[5], vals[6], vals[7]),
            ),
        ));
    }
    build_track(samples).map_err(|e| DataError::parse(path, 0, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{make_trajectory, TrajectoryKind};

    #[test]
    fn trajectory_file_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trajectory.txt");
        let track = make_trajectory(TrajectoryKind::SCurve, 3.0, 1.7, 7.0, 1.4);
        write_trajectory(&path, &track).unwrap();
        let back = read_trajectory(&path).unwrap();
        assert_eq!(track.knots().len(), back.knots().len());
        for ((ta, pa), (tb, pb)) in track.knots().iter().zip(back.knots()) {
            assert_eq!(ta.to_bits(), tb.to_bits());
            assert_eq!(pa.translation.x.to_bits(), pb.translation.x.to_bits());
            assert_eq!(pa.rotation.w.to_bits(), pb.rotation.w.to_bits());
            assert_eq!(pa.rotation.z.to_bits(), pb.rotation.z.to_bits());
        }
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.txt");
        std::fs::write(
            &path,
            "# header\n\n0 1 0 0 0 0 0 0\n# middle\n1 1 0 0 0 2 0 0\n",
        )
        .unwrap();
        let track = read_trajectory(&path).unwrap();
        assert_eq!(track.knots().len(), 2);
    }

    #[test]
    fn bad_line_reports_position() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.txt");
        std::fs::write(&path, "0 1 0 0 0 0 0 0\n1 1 0 nope 0 2 0 0\n").unwrap();
        let err = read_trajectory(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("t.txt:2"), "{msg}");
    }
}
