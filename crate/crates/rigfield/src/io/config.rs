//! Run configuration: sectioned key=value text (TOML) covering the field,
//! renderer, losses, schedule, rig and perturbation defaults. Every key is
//! optional; omitted keys take the defaults baked in here.

use super::DataError;
use crate::field::FieldConfig;
use crate::geometry::{Quat, SE3Pose, Vec3};
use crate::losses::{LossWeights, PatchSpec};
use crate::optim::TrainSchedule;
use crate::render::{PinholeIntrinsics, RenderConfig};
use crate::sim::{
    lidar_to_camera_rotation, NoiseConfig, PerturbRanges, RigSpec, SensorKind, SensorSpec,
    TrajectoryKind,
};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct LossesConfig {
    pub lambda_c: f64,
    pub lambda_d: f64,
    pub lambda_ssim: f64,
    pub lambda_ds: f64,
    pub patch_size: u32,
    pub patches_per_image: u32,
}

impl Default for LossesConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        let p = PatchSpec::default();
        LossesConfig {
            lambda_c: w.lambda_c,
            lambda_d: w.lambda_d,
            lambda_ssim: w.lambda_ssim,
            lambda_ds: w.lambda_ds,
            patch_size: p.size,
            patches_per_image: p.patches_per_image,
        }
    }
}

impl LossesConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_c: self.lambda_c,
            lambda_d: self.lambda_d,
            lambda_ssim: self.lambda_ssim,
            lambda_ds: self.lambda_ds,
        }
    }

    pub fn patches(&self) -> PatchSpec {
        PatchSpec { size: self.patch_size, patches_per_image: self.patches_per_image }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SensorConfig {
    pub name: String,
    /// "camera" or "lidar".
    pub kind: String,
    pub reference: bool,
    pub rate: f64,
    // Camera fields.
    pub width: u32,
    pub height: u32,
    pub hfov_deg: f64,
    // LiDAR fields.
    pub rings: u32,
    pub azimuth_steps: u32,
    pub vfov_deg: f64,
    pub max_range: f64,
    // Ground-truth extrinsic (sensor to reference) and clock offset.
    pub rotation: [f64; 4],
    pub translation: [f64; 3],
    pub delta: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        SensorConfig {
            name: String::new(),
            kind: "camera".into(),
            reference: false,
            rate: 2.0,
            width: 80,
            height: 60,
            hfov_deg: 60.0,
            rings: 16,
            azimuth_steps: 90,
            vfov_deg: 30.0,
            max_range: 60.0,
            rotation: [1.0, 0.0, 0.0, 0.0],
            translation: [0.0, 0.0, 0.0],
            delta: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RigConfig {
    pub duration: f64,
    pub speed: f64,
    pub trajectory: TrajectoryKind,
    pub knot_rate: f64,
    /// Height of the reference sensor above the ground plane, meters.
    pub height: f64,
    pub sensors: Vec<SensorConfig>,
}

impl Default for RigConfig {
    fn default() -> Self {
        let yaw30 = Quat::from_axis_angle(Vec3::new(0.0, 1.0, 0.0), -30f64.to_radians());
        let lidar_rot = lidar_to_camera_rotation();
        RigConfig {
            duration: 10.0,
            speed: 2.0,
            trajectory: TrajectoryKind::Arc,
            knot_rate: 10.0,
            height: 1.5,
            sensors: vec![
                SensorConfig {
                    name: "cam0".into(),
                    reference: true,
                    ..Default::default()
                },
                SensorConfig {
                    name: "cam1".into(),
                    rotation: [yaw30.w, yaw30.x, yaw30.y, yaw30.z],
                    translation: [0.5, 0.0, 0.0],
                    ..Default::default()
                },
                SensorConfig {
                    name: "lidar0".into(),
                    kind: "lidar".into(),
                    rotation: [lidar_rot.w, lidar_rot.x, lidar_rot.y, lidar_rot.z],
                    translation: [0.0, -0.3, 0.0],
                    ..Default::default()
                },
            ],
        }
    }
}

impl RigConfig {
    pub fn to_rig_spec(&self) -> Result<RigSpec, String> {
        if self.sensors.is_empty() {
            return Err("rig: no sensors configured".into());
        }
        let refs = self.sensors.iter().filter(|s| s.reference).count();
        if refs != 1 {
            return Err(format!("rig: need exactly one reference sensor, found {refs}"));
        }
        let mut sensors = Vec::with_capacity(self.sensors.len());
        for s in &self.sensors {
            if s.name.is_empty() {
                return Err("rig: sensor without a name".into());
            }
            if s.rate <= 0.0 {
                return Err(format!("rig: sensor {} needs a positive rate", s.name));
            }
            let kind = match s.kind.as_str() {
                "camera" => SensorKind::Camera {
                    intr: PinholeIntrinsics::from_hfov(s.width, s.height, s.hfov_deg),
                    rate: s.rate,
                },
                "lidar" => SensorKind::Lidar {
                    rings: s.rings,
                    azimuth_steps: s.azimuth_steps,
                    vfov_deg: s.vfov_deg,
                    rate: s.rate,
                    max_range: s.max_range,
                },
                other => return Err(format!("rig: sensor {}: unknown kind `{other}`", s.name)),
            };
            let q = Quat::new(s.rotation[0], s.rotation[1], s.rotation[2], s.rotation[3]);
            let gt_extrinsic = if s.reference {
                if s.translation != [0.0; 3] || (q.dot(Quat::IDENTITY).abs() - 1.0).abs() > 1e-9 {
                    return Err(format!(
                        "rig: reference sensor {} must have the identity extrinsic",
                        s.name
                    ));
                }
                if s.delta != 0.0 {
                    return Err(format!("rig: reference sensor {} must have delta = 0", s.name));
                }
                SE3Pose::identity()
            } else {
                SE3Pose::new(q, Vec3::from_array(s.translation))
            };
            sensors.push(SensorSpec {
                name: s.name.clone(),
                kind,
                gt_extrinsic,
                gt_delta: s.delta,
                reference: s.reference,
            });
        }
        Ok(RigSpec { sensors })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(default)]
pub struct AppConfig {
    pub field: FieldConfig,
    pub render: RenderConfig,
    pub losses: LossesConfig,
    pub schedule: TrainSchedule,
    pub rig: RigConfig,
    pub perturb: PerturbRanges,
    pub noise: NoiseConfig,
}

impl AppConfig {
    pub fn validate(&self) -> Result<(), String> {
        self.field.validate()?;
        self.render.validate()?;
        self.schedule.validate()?;
        self.rig.to_rig_spec().map(|_| ())?;
        if self.losses.lambda_c < 0.0
            || self.losses.lambda_d < 0.0
            || self.losses.lambda_ssim < 0.0
            || self.losses.lambda_ds < 0.0
        {
            return Err("losses: weights must be non-negative".into());
        }
        Ok(())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Load a config file; `None` yields the defaults.
pub fn load_config(path: Option<&Path>) -> Result<AppConfig, DataError> {
    let cfg = match path {
        None => AppConfig::default(),
        Some(p) => {
            let text = super::read_to_string(p)?;
            toml::from_str(&text).map_err(|e| DataError::parse(p, 0, e.to_string()))?
        }
    };
    cfg.validate()
        .map_err(|e| DataError::parse(path.unwrap_or(Path::new("<defaults>")), 0, e))?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_roundtrips() {
        let cfg = AppConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml_string();
        let back: AppConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn defaults_match_the_published_values() {
        let cfg = AppConfig::default();
        assert_eq!(cfg.losses.lambda_c, 1.0);
        assert_eq!(cfg.losses.lambda_d, 20.0);
        assert_eq!(cfg.losses.lambda_ssim, 0.1);
        assert_eq!(cfg.losses.lambda_ds, 1e-4);
        assert_eq!(cfg.schedule.epochs, 50);
        assert_eq!(cfg.schedule.lr_final_factor, 1e-2);
        assert_eq!(cfg.schedule.depth_loss_start_epoch, 2);
        assert_eq!(cfg.schedule.grid_decay_epochs, 5);
        assert_eq!(cfg.render.n_samples, 96);
        assert_eq!(cfg.render.near, 0.1);
        assert_eq!(cfg.render.far, 60.0);
        assert_eq!(cfg.field.levels, 8);
        assert_eq!(cfg.field.base_resolution, 16);
        assert_eq!(cfg.field.max_resolution, 256);
        assert_eq!(cfg.field.hash_size, 1 << 16);
        assert_eq!(cfg.perturb.translation_cm, 50.0);
        assert_eq!(cfg.perturb.rotation_deg, 5.0);
        assert_eq!(cfg.perturb.time_ms, 100.0);
    }

    #[test]
    fn partial_file_overrides_only_named_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        std::fs::write(&path, "[schedule]\nepochs = 3\nseed = 9\n").unwrap();
        let cfg = load_config(Some(&path)).unwrap();
        assert_eq!(cfg.schedule.epochs, 3);
        assert_eq!(cfg.schedule.seed, 9);
        assert_eq!(cfg.schedule.depth_loss_start_epoch, 2, "untouched default");
        assert_eq!(cfg.render.n_samples, 96, "untouched default");
    }

    #[test]
    fn rig_validation_rejects_bad_reference() {
        let mut cfg = AppConfig::default();
        cfg.rig.sensors[0].translation = [1.0, 0.0, 0.0];
        assert!(cfg.validate().is_err());
        let mut cfg = AppConfig::default();
        cfg.rig.sensors[1].reference = true;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn bad_toml_reports_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        std::fs::write(&path, "[schedule\nepochs = 3\n").unwrap();
        let err = load_config(Some(&path)).unwrap_err();
        assert!(err.to_string().contains("cfg.toml"), "{err}");
    }
}
