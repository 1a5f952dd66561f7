//! Continuous reference-sensor trajectory built from timestamped pose knots.
//!
//! Rotation interpolates by SLERP (shorter arc), translation by LERP.
//! Queries before the first knot or after the last return the boundary pose
//! (clamped extrapolation), and the analytic time derivative is zero there —
//! clock-offset gradients vanish in the clamped regions and the optimizer
//! has to survive that.

use crate::geometry::{lerp, slerp, Quat, SE3Pose, Vec3};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TrajectoryError {
    #[error("track needs at least 2 knots, got {0}")]
    TooFewKnots(usize),
    #[error("duplicate knot timestamp {0}")]
    DuplicateTimestamp(f64),
}

/// Sorted `(timestamp, pose)` knots with strictly increasing timestamps.
#[derive(Debug, Clone)]
pub struct TimedPoseTrack {
    knots: Vec<(f64, SE3Pose)>,
}

/// Build a validated track: knots are sorted (stably) by timestamp.
pub fn build_track(samples: Vec<(f64, SE3Pose)>) -> Result<TimedPoseTrack, TrajectoryError> {
    if samples.len() < 2 {
        return Err(TrajectoryError::TooFewKnots(samples.len()));
    }
    let mut knots = samples;
    knots.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("non-finite knot timestamp"));
    for pair in knots.windows(2) {
        if pair[0].0 == pair[1].0 {
            return Err(TrajectoryError::DuplicateTimestamp(pair[0].0));
        }
    }
    Ok(TimedPoseTrack { knots })
}

impl TimedPoseTrack {
    pub fn knots(&self) -> &[(f64, SE3Pose)] {
        &self.knots
    }

    pub fn start_time(&self) -> f64 {
        self.knots[0].0
    }

    pub fn end_time(&self) -> f64 {
        self.knots[self.knots.len() - 1].0
    }

    /// Index of the segment `[t_k, t_{k+1})` containing `t`; assumes
    /// `t` within the knot range. At `t == end_time` returns the last segment.
    fn segment_index(&self, t: f64) -> usize {
        // partition_point: count of knots with timestamp <= t.
        let after = self.knots.partition_point(|(kt, _)| *kt <= t);
        after.clamp(1, self.knots.len() - 1) - 1
    }

    /// Rotation step of segment `k` with the SLERP shorter-arc sign flip
    /// applied: returns (q0, rotation vector to q1').
    fn segment_rotvec(&self, k: usize) -> (Quat, Vec3) {
        let q0 = self.knots[k].1.rotation;
        let mut q1 = self.knots[k + 1].1.rotation;
        if q0.dot(q1) < 0.0 {
            q1 = Quat::new(-q1.w, -q1.x, -q1.y, -q1.z);
        }
        (q0, q0.inverse().mul_quat(q1).log_rotvec())
    }

    /// Interpolated pose at time `t`, clamped outside the knot range.
    pub fn pose_at(&self, t: f64) -> SE3Pose {
        if t <= self.start_time() {
            return self.knots[0].1;
        }
        if t >= self.end_time() {
            return self.knots[self.knots.len() - 1].1;
        }
        let k = self.segment_index(t);
        let (t0, p0) = self.knots[k];
        let (t1, p1) = self.knots[k + 1];
        let u = (t - t0) / (t1 - t0);
        SE3Pose::new(
            slerp(p0.rotation, p1.rotation, u),
            lerp(p0.translation, p1.translation, u),
        )
    }

    /// Analytic time derivative at `t`: translation velocity in m/s and the
    /// constant body-frame angular velocity of the SLERP segment in rad/s.
    /// Zero in the clamped regions; right-sided at interior knots.
    pub fn pose_time_derivative(&self, t: f64) -> (Vec3, Vec3) {
        if t < self.start_time() || t >= self.end_time() {
            return (Vec3::ZERO, Vec3::ZERO);
        }
        let k = self.segment_index(t);
        let (t0, p0) = self.knots[k];
        let (t1, p1) = self.knots[k + 1];
        let dt = t1 - t0;
        let v = (p1.translation - p0.translation) / dt;
        let (_, rotvec) = self.segment_rotvec(k);
        (v, rotvec / dt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{quat_angle_rad, Quat, Vec3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rot_z(deg: f64) -> Quat {
        Quat::from_axis_angle(Vec3::new(0.0, 0.0, 1.0), deg.to_radians())
    }

    fn random_track(rng: &mut impl Rng, n: usize) -> TimedPoseTrack {
        let mut samples = Vec::new();
        let mut t = 0.0;
        for _ in 0..n {
            t += rng.gen_range(0.2..1.0);
            let q = Quat::from_axis_angle(
                Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
                rng.gen_range(-1.5..1.5),
            );
            let p = Vec3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
            samples.push((t, SE3Pose::new(q, p)));
        }
        build_track(samples).unwrap()
    }

    #[test]
    fn build_track_validation() {
        let id = SE3Pose::identity();
        assert!(build_track(vec![(0.0, id), (1.0, id)]).is_ok());
        assert_eq!(build_track(vec![(0.0, id)]).unwrap_err(), TrajectoryError::TooFewKnots(1));
        assert_eq!(
            build_track(vec![(0.5, id), (0.5, id)]).unwrap_err(),
            TrajectoryError::DuplicateTimestamp(0.5)
        );
        // Unsorted input comes back sorted.
        let track = build_track(vec![
            (2.0, SE3Pose::new(Quat::IDENTITY, Vec3::new(2.0, 0.0, 0.0))),
            (0.0, SE3Pose::identity()),
            (1.0, SE3Pose::new(Quat::IDENTITY, Vec3::new(1.0, 0.0, 0.0))),
        ])
        .unwrap();
        let ts: Vec<f64> = track.knots().iter().map(|(t, _)| *t).collect();
        assert_eq!(ts, vec![0.0, 1.0, 2.0]);
    }

    #[test]
    fn pose_at_knots_and_clamps() {
        let p1 = SE3Pose::new(rot_z(90.0), Vec3::new(2.0, 0.0, 0.0));
        let track = build_track(vec![(0.0, SE3Pose::identity()), (1.0, p1)]).unwrap();

        // Exactly at a knot.
        let at0 = track.pose_at(0.0);
        assert!(quat_angle_rad(at0.rotation, Quat::IDENTITY) < 1e-12);
        assert!(at0.translation.norm() < 1e-12);
        let at1 = track.pose_at(1.0);
        assert!(quat_angle_rad(at1.rotation, p1.rotation) < 1e-12);

        // Clamped extrapolation on both sides.
        let before = track.pose_at(-5.0);
        assert!(quat_angle_rad(before.rotation, Quat::IDENTITY) < 1e-12);
        assert!(before.translation.norm() < 1e-12);
        let after = track.pose_at(9.0);
        assert!(quat_angle_rad(after.rotation, p1.rotation) < 1e-12);
        assert!((after.translation - p1.translation).norm() < 1e-12);
    }

    #[test]
    fn pose_at_midpoint_matches_slerp_lerp_oracle() {
        let p1 = SE3Pose::new(rot_z(90.0), Vec3::new(2.0, 0.0, 0.0));
        let track = build_track(vec![(0.0, SE3Pose::identity()), (1.0, p1)]).unwrap();
        let mid = track.pose_at(0.5);
        assert!((mid.translation - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
        assert!(quat_angle_rad(mid.rotation, rot_z(45.0)) < 1e-12);
    }

    #[test]
    fn derivative_zero_outside_range() {
        let p1 = SE3Pose::new(rot_z(90.0), Vec3::new(2.0, 0.0, 0.0));
        let track = build_track(vec![(0.0, SE3Pose::identity()), (1.0, p1)]).unwrap();
        for t in [-1.0, 1.0, 1.5, 100.0] {
            let (v, w) = track.pose_time_derivative(t);
            assert_eq!(v, Vec3::ZERO, "dtrans at {t}");
            assert_eq!(w, Vec3::ZERO, "drot at {t}");
        }
    }

    #[test]
    fn derivative_linear_segment() {
        let track = build_track(vec![
            (0.0, SE3Pose::identity()),
            (2.0, SE3Pose::new(Quat::IDENTITY, Vec3::new(4.0, 0.0, 0.0))),
        ])
        .unwrap();
        let (v, w) = track.pose_time_derivative(1.0);
        assert!((v - Vec3::new(2.0, 0.0, 0.0)).norm() < 1e-12);
        assert!(w.norm() < 1e-12);
    }

    #[test]
    fn derivative_angular_velocity_oracle() {
        // 90 degrees about z over 1 s: body angular velocity (0,0,pi/2).
        let track = build_track(vec![(0.0, SE3Pose::identity()), (1.0, SE3Pose::new(rot_z(90.0), Vec3::ZERO))])
            .unwrap();
        let (_, w) = track.pose_time_derivative(0.5);
        let expect = Vec3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2);
        assert!((w - expect).norm() < 1e-9, "{w:?}");

        // Central finite difference of pose_at, geodesic/h.
        let h = 1e-5;
        let qa = track.pose_at(0.5 - h).rotation;
        let qb = track.pose_at(0.5 + h).rotation;
        let fd_mag = quat_angle_rad(qa, qb) / (2.0 * h);
        assert!((fd_mag - w.norm()).abs() / w.norm() < 1e-6, "fd {fd_mag} vs {}", w.norm());
    }

    #[test]
    fn derivative_matches_finite_differences_randomized() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let track = random_track(&mut rng, 12);
        let (t0, t1) = (track.start_time(), track.end_time());
        let h = 1e-5;
        for _ in 0..100 {
            let t = rng.gen_range((t0 + 2.0 * h)..(t1 - 2.0 * h));
            let (v, w) = track.pose_time_derivative(t);
            let pa = track.pose_at(t - h);
            let pb = track.pose_at(t + h);

            let v_fd = (pb.translation - pa.translation) / (2.0 * h);
            assert!((v - v_fd).norm() < 1e-6, "translation fd at {t}: {v:?} vs {v_fd:?}");

            // Body-frame angular velocity from the relative rotation.
            let w_fd = pa.rotation.inverse().mul_quat(pb.rotation).log_rotvec() / (2.0 * h);
            if w.norm() > 1e-9 {
                assert!(
                    (w - w_fd).norm() / w.norm() < 1e-4,
                    "rotation fd at {t}: {w:?} vs {w_fd:?}"
                );
            } else {
                assert!(w_fd.norm() < 1e-6);
            }
        }
    }

    #[test]
    fn continuity_at_knots() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let track = random_track(&mut rng, 8);
        let eps = 1e-9;
        for &(kt, _) in track.knots() {
            let a = track.pose_at(kt - eps);
            let b = track.pose_at(kt + eps);
            assert!(quat_angle_rad(a.rotation, b.rotation) < 1e-6, "rotation jump at {kt}");
            assert!((a.translation - b.translation).norm() < 1e-6, "translation jump at {kt}");
        }
    }

    #[test]
    fn right_sided_derivative_at_interior_knot() {
        // Two segments with different velocities; at the shared knot the
        // derivative must be the right segment's.
        let track = build_track(vec![
            (0.0, SE3Pose::identity()),
            (1.0, SE3Pose::new(Quat::IDENTITY, Vec3::new(1.0, 0.0, 0.0))),
            (2.0, SE3Pose::new(Quat::IDENTITY, Vec3::new(4.0, 0.0, 0.0))),
        ])
        .unwrap();
        let (v, _) = track.pose_time_derivative(1.0);
        assert!((v - Vec3::new(3.0, 0.0, 0.0)).norm() < 1e-12, "{v:?}");
    }

    #[test]
    fn clamped_region_is_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let track = random_track(&mut rng, 5);
        let first = track.pose_at(track.start_time());
        let last = track.pose_at(track.end_time());
        for i in 1..10 {
            let before = track.pose_at(track.start_time() - i as f64);
            let after = track.pose_at(track.end_time() + i as f64);
            assert_eq!(before.translation, first.translation);
            assert_eq!(after.translation, last.translation);
        }
    }
}
