//! Per-sensor calibration state: 6D rotation + translation (the
//! sensor-to-reference extrinsic) and a clock offset, with the pose chain
//! rule that routes world-pose gradients into those parameters. The clock
//! gradient flows through the trajectory's analytic time derivative.

use crate::geometry::{compose, Mat3, Quat, Rot6D, SE3Pose, Vec3};
use crate::trajectory::TimedPoseTrack;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CalibError {
    #[error("unknown sensor index {0}")]
    UnknownSensor(usize),
    #[error("degenerate calibration rotation for sensor {0} (optimization diverged)")]
    DegenerateRotation(String),
    #[error("calibration needs exactly one reference sensor, found {0}")]
    BadReferenceCount(usize),
    #[error("sensor sets differ: {0}")]
    SensorSetMismatch(String),
}

/// Calibration entry for one sensor. The reference sensor is pinned to the
/// identity extrinsic and zero clock offset and never optimized.
///
/// `rotation` is the canonical quaternion used by file I/O and metrics: for
/// a state built from a quaternion (or loaded from a file) it holds that
/// exact value, so calibration files round-trip bit-for-bit. After the
/// optimizer moves `rot6d`, call [`SensorCalib::sync_rotation`] to refresh
/// it (the trainer does this at every snapshot point).
#[derive(Debug, Clone, PartialEq)]
pub struct SensorCalib {
    pub name: String,
    pub rotation: Quat,
    pub rot6d: Rot6D,
    pub translation: Vec3,
    pub delta: f64,
    pub reference: bool,
}

impl SensorCalib {
    pub fn reference(name: &str) -> SensorCalib {
        SensorCalib {
            name: name.to_string(),
            rotation: Quat::IDENTITY,
            rot6d: Rot6D::identity(),
            translation: Vec3::ZERO,
            delta: 0.0,
            reference: true,
        }
    }

    pub fn new(name: &str, rotation: Quat, translation: Vec3, delta: f64) -> SensorCalib {
        SensorCalib {
            name: name.to_string(),
            rotation,
            rot6d: Rot6D::from_matrix(&rotation.to_mat3()),
            translation,
            delta,
            reference: false,
        }
    }

    /// Decoded sensor-to-reference extrinsic (always derived from the live
    /// 6D parameters).
    pub fn extrinsic(&self) -> SE3Pose {
        let r = self.rot6d.decode().expect("calibration rotation decodable");
        SE3Pose::new(Quat::from_mat3(&r), self.translation)
    }

    /// Refresh the canonical quaternion from the 6D parameters.
    pub fn sync_rotation(&mut self) -> Result<(), CalibError> {
        let r = self
            .rot6d
            .decode()
            .map_err(|_| CalibError::DegenerateRotation(self.name.clone()))?;
        self.rotation = Quat::from_mat3(&r);
        Ok(())
    }
}

/// Number of scalar parameters per optimized sensor: 6 rotation + 3
/// translation + 1 clock offset.
pub const PARAMS_PER_SENSOR: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationState {
    pub sensors: Vec<SensorCalib>,
}

/// Gradient of a scalar loss with respect to one sensor's calibration.
#[derive(Debug, Clone, Copy, Default)]
pub struct SensorCalibGrad {
    pub d_a1: Vec3,
    pub d_a2: Vec3,
    pub d_translation: Vec3,
    pub d_delta: f64,
}

impl CalibrationState {
    pub fn validate(&self) -> Result<(), CalibError> {
        let refs = self.sensors.iter().filter(|s| s.reference).count();
        if refs != 1 {
            return Err(CalibError::BadReferenceCount(refs));
        }
        Ok(())
    }

    pub fn sensor_index(&self, name: &str) -> Option<usize> {
        self.sensors.iter().position(|s| s.name == name)
    }

    pub fn reference_index(&self) -> usize {
        self.sensors.iter().position(|s| s.reference).expect("validated state")
    }

    /// World pose of `sensor` for a frame stamped `t` on that sensor's
    /// clock: trajectory pose at `t + delta` composed with the extrinsic.
    pub fn sensor_pose(
        &self,
        track: &TimedPoseTrack,
        sensor: usize,
        t: f64,
    ) -> Result<SE3Pose, CalibError> {
        let s = self.sensors.get(sensor).ok_or(CalibError::UnknownSensor(sensor))?;
        if s.reference {
            return Ok(track.pose_at(t));
        }
        Ok(compose(&track.pose_at(t + s.delta), &s.extrinsic()))
    }

    /// Chain rule from a world-pose gradient `(dL/dR_w, dL/dt_w)` to the
    /// sensor's calibration parameters. The reference sensor returns zeros.
    pub fn sensor_pose_backward(
        &self,
        track: &TimedPoseTrack,
        sensor: usize,
        t: f64,
        d_rot_world: &Mat3,
        d_trans_world: Vec3,
    ) -> Result<SensorCalibGrad, CalibError> {
        let s = self.sensors.get(sensor).ok_or(CalibError::UnknownSensor(sensor))?;
        if s.reference {
            return Ok(SensorCalibGrad::default());
        }
        let tau = t + s.delta;
        let traj = track.pose_at(tau);
        let r_tr = traj.rotation_matrix();
        let r_tr_t = r_tr.transpose();
        let r_e = s.rot6d.decode().expect("calibration rotation decodable");

        // dL/dR_E = R_tr^T dL/dR_w, then through Gram-Schmidt.
        let d_r_e = r_tr_t.mul_mat(d_rot_world);
        let (d_a1, d_a2) = s.rot6d.decode_backward(&d_r_e);

        // t_w = R_tr t_E + t_tr.
        let d_translation = r_tr_t.mul_vec(d_trans_world);

        // dL/dR_tr = dL/dR_w R_E^T + g_t t_E^T.
        let d_r_tr = d_rot_world
            .mul_mat(&r_e.transpose())
            .add_mat(&Mat3::outer(d_trans_world, s.translation));

        // Clock offset: dR_tr/dtau = R_tr [w]x, dt_tr/dtau = v.
        let (v, omega) = track.pose_time_derivative(tau);
        let d_delta = d_r_tr.frob_dot(&r_tr.mul_mat(&Mat3::skew(omega))) + d_trans_world.dot(v);

        Ok(SensorCalibGrad { d_a1, d_a2, d_translation, d_delta })
    }

    /// Flatten the optimized (non-reference) parameters, sensor-major:
    /// `[a1, a2, translation, delta]` per sensor.
    pub fn pack(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for s in &self.sensors {
            if s.reference {
                continue;
            }
            out.extend_from_slice(&s.rot6d.a1.to_array());
            out.extend_from_slice(&s.rot6d.a2.to_array());
            out.extend_from_slice(&s.translation.to_array());
            out.push(s.delta);
        }
        out
    }

    /// Inverse of [`CalibrationState::pack`].
    pub fn unpack(&mut self, v: &[f64]) {
        let mut at = 0;
        for s in &mut self.sensors {
            if s.reference {
                continue;
            }
            s.rot6d.a1 = Vec3::new(v[at], v[at + 1], v[at + 2]);
            s.rot6d.a2 = Vec3::new(v[at + 3], v[at + 4], v[at + 5]);
            s.translation = Vec3::new(v[at + 6], v[at + 7], v[at + 8]);
            s.delta = v[at + 9];
            at += PARAMS_PER_SENSOR;
        }
        debug_assert_eq!(at, v.len());
    }

    /// Pack a per-sensor gradient set in the same order as
    /// [`CalibrationState::pack`].
    pub fn pack_grads(&self, grads: &[SensorCalibGrad]) -> Vec<f64> {
        debug_assert_eq!(grads.len(), self.sensors.len());
        let mut out = Vec::new();
        for (s, g) in self.sensors.iter().zip(grads) {
            if s.reference {
                continue;
            }
            out.extend_from_slice(&g.d_a1.to_array());
            out.extend_from_slice(&g.d_a2.to_array());
            out.extend_from_slice(&g.d_translation.to_array());
            out.push(g.d_delta);
        }
        out
    }
}
