//! Synthetic rig simulator: an analytic raycast scene of textured
//! primitives, a smooth vehicle-like trajectory, simulated camera frames and
//! LiDAR scans with exact timestamps, and seeded calibration perturbation.
//!
//! Sensor clocks are deliberately unsynchronized: a frame captured at
//! reference time `t` is recorded with timestamp `t - delta`, so a dataset
//! built with nonzero clock offsets embodies the miscalibration the
//! optimizer must recover. Camera pixels are quantized to 8 bits at
//! simulation time so a written dataset reloads to exactly the in-memory
//! values.

use crate::exec::chunked_map_range;
use crate::geometry::{compose, Quat, SE3Pose, Vec3};
use crate::optim::calib::{CalibrationState, SensorCalib};
use crate::render::{PinholeIntrinsics, Ray};
use crate::trajectory::{build_track, TimedPoseTrack};
use rand::Rng;
use serde::{Deserialize, Serialize};

// ---------------------------------------------------------------------------
// Scene

#[derive(Debug, Clone)]
pub enum Shape {
    ///Infinite plane through `point` with unit `normal`.
    Plane { point: Vec3, normal: Vec3 },
    Sphere { center: Vec3, radius: f64 },
    Aabb { min: Vec3, max: Vec3 },
}

#[derive(Debug, Clone)]
pub enum Albedo {
    Solid(Vec3),
    /// 3D checkerboard: cell parity of floor(p / cell) per axis.
    Checker { a: Vec3, b: Vec3, cell: f64 },
}

impl Albedo {
    fn at(&self, p: Vec3) -> Vec3 {
        match self {
            Albedo::Solid(c) => *c,
            Albedo::Checker { a, b, cell } => {
                let parity = (p.x / cell).floor() + (p.y / cell).floor() + (p.z / cell).floor();
                if (parity as i64).rem_euclid(2) == 0 {
                    *a
                } else {
                    *b
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Lighting {
    /// Color = albedo, independent of geometry.
    Flat,
    /// Albedo scaled by `ambient + (1 - ambient) * max(0, n . -sun_dir)`.
    Lambertian { sun_dir: Vec3, ambient: f64 },
}

#[derive(Debug, Clone)]
pub struct Primitive {
    pub shape: Shape,
    pub albedo: Albedo,
}

#[derive(Debug, Clone)]
pub struct PrimitiveScene {
    pub primitives: Vec<Primitive>,
    pub background: Vec3,
    pub lighting: Lighting,
}

const RAY_EPS: f64 = 1e-9;

fn intersect(shape: &Shape, origin: Vec3, dir: Vec3) -> Option<(f64, Vec3)> {
    match shape {
        Shape::Plane { point, normal } => {
            let denom = normal.dot(dir);
            if denom.abs() < 1e-12 {
                return None;
            }
            let t = (*point - origin).dot(*normal) / denom;
            (t > RAY_EPS).then_some((t, *normal))
        }
        Shape::Sphere { center, radius } => {
            let oc = origin - *center;
            let b = oc.dot(dir);
            let c = oc.norm_squared() - radius * radius;
            let disc = b * b - c;
            if disc < 0.0 {
                return None;
            }
            let sq = disc.sqrt();
            let t = if -b - sq > RAY_EPS { -b - sq } else { -b + sq };
            if t <= RAY_EPS {
                return None;
            }
            let n = (origin + dir * t - *center).normalized();
            Some((t, n))
        }
        Shape::Aabb { min, max } => {
            let mut t_enter = f64::NEG_INFINITY;
            let mut t_exit = f64::INFINITY;
            let mut enter_axis = 0;
            for (axis, (o, d, lo, hi)) in [
                (origin.x, dir.x, min.x, max.x),
                (origin.y, dir.y, min.y, max.y),
                (origin.z, dir.z, min.z, max.z),
            ]
            .into_iter()
            .enumerate()
            {
                if d.abs() < 1e-15 {
                    if o < lo || o > hi {
                        return None;
                    }
                    continue;
                }
                let (mut t0, mut t1) = ((lo - o) / d, (hi - o) / d);
                if t0 > t1 {
                    std::mem::swap(&mut t0, &mut t1);
                }
                if t0 > t_enter {
                    t_enter = t0;
                    enter_axis = axis;
                }
                t_exit = t_exit.min(t1);
                if t_enter > t_exit {
                    return None;
                }
            }
            let t = if t_enter > RAY_EPS { t_enter } else { t_exit };
            if t <= RAY_EPS || t_enter > t_exit {
                return None;
            }
            let mut n = Vec3::ZERO;
            let p = origin + dir * t;
            match enter_axis {
                0 => n.x = if p.x - min.x < max.x - p.x { -1.0 } else { 1.0 },
                1 => n.y = if p.y - min.y < max.y - p.y { -1.0 } else { 1.0 },
                _ => n.z = if p.z - min.z < max.z - p.z { -1.0 } else { 1.0 },
            }
            Some((t, n))
        }
    }
}

/// Nearest positive intersection and its shaded color; `None` on miss.
pub fn raycast(scene: &PrimitiveScene, ray: &Ray) -> Option<(f64, Vec3)> {
    let mut best: Option<(f64, Vec3, Vec3)> = None;
    for prim in &scene.primitives {
        if let Some((t, n)) = intersect(&prim.shape, ray.origin, ray.direction) {
            if best.as_ref().map_or(true, |(bt, _, _)| t < *bt) {
                let p = ray.origin + ray.direction * t;
                best = Some((t, prim.albedo.at(p), n));
            }
        }
    }
    best.map(|(t, albedo, n)| {
        let color = match scene.lighting {
            Lighting::Flat => albedo,
            Lighting::Lambertian { sun_dir, ambient } => {
                // Orient the normal toward the viewer.
                let n = if n.dot(ray.direction) > 0.0 { -n } else { n };
                let l = -sun_dir.normalized();
                let shade = ambient + (1.0 - ambient) * n.dot(l).max(0.0);
                albedo * shade
            }
        };
        (t, color)
    })
}

// ---------------------------------------------------------------------------
// Trajectories

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrajectoryKind {
    /// Constant-velocity straight line.
    Straight,
    /// Straight lead-in for half the duration, then a constant-rate turn
    /// totalling 90 degrees.
    Arc,
    /// Straight, then 60 degrees left, then 60 degrees right.
    SCurve,
}

/// Camera-convention pose (z forward, x right, y down) moving along a
/// ground path at `height`, heading tangent to the motion.
fn camera_pose(p: Vec3, yaw: f64) -> SE3Pose {
    let (s, c) = yaw.sin_cos();
    let forward = Vec3::new(c, s, 0.0);
    let right = Vec3::new(s, -c, 0.0);
    let down = Vec3::new(0.0, 0.0, -1.0);
    let r = crate::geometry::Mat3::from_cols(right, down, forward);
    SE3Pose::new(Quat::from_mat3(&r), p)
}

/// Position/yaw after driving `dt` at `speed` with constant `yaw_rate`,
/// starting from `(p0, yaw0)` (closed form; z is kept).
fn drive(p0: Vec3, yaw0: f64, speed: f64, yaw_rate: f64, dt: f64) -> (Vec3, f64) {
    if yaw_rate.abs() < 1e-12 {
        let p = p0 + Vec3::new(yaw0.cos(), yaw0.sin(), 0.0) * (speed * dt);
        return (p, yaw0);
    }
    let r = speed / yaw_rate;
    let yaw = yaw0 + yaw_rate * dt;
    let p = p0 + Vec3::new(r * (yaw.sin() - yaw0.sin()), -r * (yaw.cos() - yaw0.cos()), 0.0);
    (p, yaw)
}

/// Smooth ground-vehicle trajectory with knots at `knot_rate` Hz.
pub fn make_trajectory(
    kind: TrajectoryKind,
    duration: f64,
    speed: f64,
    knot_rate: f64,
    height: f64,
) -> TimedPoseTrack {
    assert!(duration > 0.0 && speed > 0.0 && knot_rate > 0.0);
    // (segment end time, yaw rate) pairs.
    let segments: Vec<(f64, f64)> = match kind {
        TrajectoryKind::Straight => vec![(duration, 0.0)],
        TrajectoryKind::Arc => {
            let turn = 90f64.to_radians() / (duration / 2.0);
            vec![(duration / 2.0, 0.0), (duration, turn)]
        }
        TrajectoryKind::SCurve => {
            let third = duration / 3.0;
            let rate = 60f64.to_radians() / third;
            vec![(third, 0.0), (2.0 * third, rate), (duration, -rate)]
        }
    };

    let n = (duration * knot_rate).round() as usize;
    let mut knots = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let t = k as f64 / knot_rate;
        // Integrate segment by segment up to t (each segment closed form).
        let mut p = Vec3::new(0.0, 0.0, height);
        let mut yaw = 0.0;
        let mut at = 0.0;
        for &(end, rate) in &segments {
            let seg_end = end.min(t);
            if seg_end > at {
                let (np, nyaw) = drive(p, yaw, speed, rate, seg_end - at);
                p = np;
                yaw = nyaw;
                at = seg_end;
            }
            if at >= t {
                break;
            }
        }
        knots.push((t, camera_pose(p, yaw)));
    }
    build_track(knots).expect("generated knots are valid")
}

// ---------------------------------------------------------------------------
// Rig specification

#[derive(Debug, Clone)]
pub enum SensorKind {
    Camera { intr: PinholeIntrinsics, rate: f64 },
    Lidar { rings: u32, azimuth_steps: u32, vfov_deg: f64, rate: f64, max_range: f64 },
}

impl SensorKind {
    pub fn rate(&self) -> f64 {
        match self {
            SensorKind::Camera { rate, .. } => *rate,
            SensorKind::Lidar { rate, .. } => *rate,
        }
    }

    pub fn is_camera(&self) -> bool {
        matches!(self, SensorKind::Camera { .. })
    }
}

#[derive(Debug, Clone)]
pub struct SensorSpec {
    pub name: String,
    pub kind: SensorKind,
    /// Ground-truth sensor-to-reference extrinsic.
    pub gt_extrinsic: SE3Pose,
    /// Ground-truth clock offset: reference time = recorded time + delta.
    pub gt_delta: f64,
    pub reference: bool,
}

#[derive(Debug, Clone)]
pub struct RigSpec {
    pub sensors: Vec<SensorSpec>,
}

impl RigSpec {
    /// The ground-truth calibration state of this rig.
    pub fn gt_calibration(&self) -> CalibrationState {
        CalibrationState {
            sensors: self
                .sensors
                .iter()
                .map(|s| {
                    if s.reference {
                        SensorCalib::reference(&s.name)
                    } else {
                        SensorCalib::new(
                            &s.name,
                            s.gt_extrinsic.rotation,
                            s.gt_extrinsic.translation,
                            s.gt_delta,
                        )
                    }
                })
                .collect(),
        }
    }
}

/// Unit LiDAR beam directions in the sensor frame (x forward, z up):
/// `rings` elevations spanning the vertical FOV times `azimuth_steps`
/// azimuths.
pub fn lidar_directions(rings: u32, azimuth_steps: u32, vfov_deg: f64) -> Vec<Vec3> {
    let mut dirs = Vec::with_capacity((rings * azimuth_steps) as usize);
    let half = vfov_deg.to_radians() / 2.0;
    for r in 0..rings {
        let elev = if rings == 1 {
            0.0
        } else {
            -half + vfov_deg.to_radians() * r as f64 / (rings - 1) as f64
        };
        let (se, ce) = elev.sin_cos();
        for a in 0..azimuth_steps {
            let az = 2.0 * std::f64::consts::PI * a as f64 / azimuth_steps as f64;
            let (sa, ca) = az.sin_cos();
            dirs.push(Vec3::new(ce * ca, ce * sa, se));
        }
    }
    dirs
}

// ---------------------------------------------------------------------------
// Frame simulation

/// Per-pixel raycast of a camera frame; misses fall to the scene background.
/// Pixels are quantized to 8 bits (the on-disk format).
pub fn simulate_camera_frame(
    scene: &PrimitiveScene,
    intr: &PinholeIntrinsics,
    pose: &SE3Pose,
) -> Vec<Vec3> {
    let rows = chunked_map_range(intr.height as usize, 8, |_, range| {
        let r = pose.rotation_matrix();
        let mut out = Vec::with_capacity(range.len() * intr.width as usize);
        for v in range {
            for u in 0..intr.width {
                let dir = r
                    .mul_vec(crate::render::pixel_dir_cam(intr, u, v as u32))
                    .normalized();
                let ray = Ray { origin: pose.translation, direction: dir, near: 0.0, far: f64::MAX };
                let color = raycast(scene, &ray).map(|(_, c)| c).unwrap_or(scene.background);
                out.push(quantize_rgb(color));
            }
        }
        out
    });
    rows.into_iter().flatten().collect()
}

/// 8-bit quantization used by the PPM writer, applied at simulation time so
/// in-memory and reloaded datasets agree exactly.
pub fn quantize_rgb(c: Vec3) -> Vec3 {
    let q = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    Vec3::new(q(c.x), q(c.y), q(c.z))
}

/// Raycast a full LiDAR scan from one pose (no intra-scan motion). Misses
/// and hits beyond `max_range` are dropped.
pub fn simulate_lidar_scan(
    scene: &PrimitiveScene,
    rings: u32,
    azimuth_steps: u32,
    vfov_deg: f64,
    max_range: f64,
    pose: &SE3Pose,
) -> Vec<(Vec3, f64)> {
    let r = pose.rotation_matrix();
    lidar_directions(rings, azimuth_steps, vfov_deg)
        .into_iter()
        .filter_map(|u| {
            let ray = Ray {
                origin: pose.translation,
                direction: r.mul_vec(u),
                near: 0.0,
                far: max_range,
            };
            match raycast(scene, &ray) {
                Some((range, _)) if range <= max_range => Some((u, range)),
                _ => None,
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Dataset assembly

/// One sensor's recorded stream.
#[derive(Debug, Clone)]
pub struct SensorData {
    pub name: String,
    pub kind: SensorKind,
    /// Recorded timestamps, on the sensor's own clock.
    pub timestamps: Vec<f64>,
    /// One image per frame for cameras (row-major, 8-bit-quantized values).
    pub images: Vec<Vec<Vec3>>,
    /// One scan per frame for LiDARs: (unit direction sensor frame, range).
    pub scans: Vec<Vec<(Vec3, f64)>>,
}

/// A rig dataset: reference trajectory plus per-sensor frame streams.
#[derive(Debug, Clone)]
pub struct RigDataset {
    pub duration: f64,
    pub track: TimedPoseTrack,
    pub sensors: Vec<SensorData>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct NoiseConfig {
    pub pixel_sigma: f64,
    pub range_sigma: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { pixel_sigma: 0.0, range_sigma: 0.0 }
    }
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    // Box-Muller.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Simulate every sensor of the rig over `[0, duration]`. Frame events fire
/// on the reference clock at each sensor's rate; recorded timestamps are
/// shifted by that sensor's ground-truth clock offset.
pub fn simulate_rig(
    scene: &PrimitiveScene,
    rig: &RigSpec,
    track: &TimedPoseTrack,
    duration: f64,
    noise: &NoiseConfig,
    rng: &mut impl Rng,
) -> RigDataset {
    let mut sensors = Vec::with_capacity(rig.sensors.len());
    for spec in &rig.sensors {
        let rate = spec.kind.rate();
        let n_frames = (duration * rate).floor() as usize + 1;
        let mut data = SensorData {
            name: spec.name.clone(),
            kind: spec.kind.clone(),
            timestamps: Vec::with_capacity(n_frames),
            images: Vec::new(),
            scans: Vec::new(),
        };
        for k in 0..n_frames {
            let t_ref = k as f64 / rate;
            let pose = compose(&track.pose_at(t_ref), &spec.gt_extrinsic);
            data.timestamps.push(t_ref - spec.gt_delta);
            match &spec.kind {
                SensorKind::Camera { intr, .. } => {
                    let mut img = simulate_camera_frame(scene, intr, &pose);
                    if noise.pixel_sigma > 0.0 {
                        for px in &mut img {
                            *px = quantize_rgb(
                                *px + Vec3::new(
                                    gaussian(rng) * noise.pixel_sigma,
                                    gaussian(rng) * noise.pixel_sigma,
                                    gaussian(rng) * noise.pixel_sigma,
                                ),
                            );
                        }
                    }
                    data.images.push(img);
                }
                SensorKind::Lidar { rings, azimuth_steps, vfov_deg, max_range, .. } => {
                    let mut scan = simulate_lidar_scan(
                        scene,
                        *rings,
                        *azimuth_steps,
                        *vfov_deg,
                        *max_range,
                        &pose,
                    );
                    if noise.range_sigma > 0.0 {
                        for (_, range) in &mut scan {
                            *range = (*range + gaussian(rng) * noise.range_sigma).max(0.01);
                        }
                    }
                    data.scans.push(scan);
                }
            }
        }
        sensors.push(data);
    }
    RigDataset { duration, track: track.clone(), sensors }
}

// ---------------------------------------------------------------------------
// Perturbation

/// Uniform perturbation ranges: translation in centimeters per axis,
/// rotation in degrees per Euler axis, clock offset in milliseconds.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct PerturbRanges {
    pub translation_cm: f64,
    pub rotation_deg: f64,
    pub time_ms: f64,
}

impl Default for PerturbRanges {
    fn default() -> Self {
        PerturbRanges { translation_cm: 50.0, rotation_deg: 5.0, time_ms: 100.0 }
    }
}

fn uniform(rng: &mut impl Rng, range: f64) -> f64 {
    if range == 0.0 {
        0.0
    } else {
        rng.gen_range(-range..range)
    }
}

/// Corrupt a ground-truth calibration with independent uniform draws per
/// axis (prior generation). The reference sensor is left untouched.
pub fn perturb(gt: &CalibrationState, ranges: &PerturbRanges, rng: &mut impl Rng) -> CalibrationState {
    let mut out = gt.clone();
    for s in &mut out.sensors {
        if s.reference {
            continue;
        }
        let dt = Vec3::new(
            uniform(rng, ranges.translation_cm / 100.0),
            uniform(rng, ranges.translation_cm / 100.0),
            uniform(rng, ranges.translation_cm / 100.0),
        );
        let rx = uniform(rng, ranges.rotation_deg).to_radians();
        let ry = uniform(rng, ranges.rotation_deg).to_radians();
        let rz = uniform(rng, ranges.rotation_deg).to_radians();
        let q_err = Quat::from_axis_angle(Vec3::new(0.0, 0.0, 1.0), rz)
            .mul_quat(Quat::from_axis_angle(Vec3::new(0.0, 1.0, 0.0), ry))
            .mul_quat(Quat::from_axis_angle(Vec3::new(1.0, 0.0, 0.0), rx));
        let q_new = s.rotation.mul_quat(q_err);
        s.rotation = q_new;
        s.rot6d = crate::geometry::Rot6D::from_matrix(&q_new.to_mat3());
        s.translation += dt;
        s.delta += uniform(rng, ranges.time_ms / 1000.0);
    }
    out
}

// ---------------------------------------------------------------------------
// Default desk-scale scene and rig

/// Textured primitives around the default trajectory: a checkered ground,
/// assorted boxes and spheres on both sides of the path, and a back wall.
/// Depth varies along the direction of motion so clock offsets stay
/// observable.
pub fn default_scene() -> PrimitiveScene {
    let p = |shape, albedo| Primitive { shape, albedo };
    PrimitiveScene {
        background: Vec3::new(1.0, 1.0, 1.0),
        lighting: Lighting::Flat,
        primitives: vec![
            p(
                Shape::Plane { point: Vec3::ZERO, normal: Vec3::new(0.0, 0.0, 1.0) },
                Albedo::Checker {
                    a: Vec3::new(0.82, 0.80, 0.75),
                    b: Vec3::new(0.28, 0.33, 0.38),
                    cell: 2.0,
                },
            ),
            p(
                Shape::Plane { point: Vec3::new(40.0, 0.0, 0.0), normal: Vec3::new(1.0, 0.0, 0.0) },
                Albedo::Checker {
                    a: Vec3::new(0.75, 0.70, 0.60),
                    b: Vec3::new(0.35, 0.25, 0.20),
                    cell: 3.0,
                },
            ),
            p(
                Shape::Aabb { min: Vec3::new(6.0, -4.0, 0.0), max: Vec3::new(8.0, -2.0, 2.0) },
                Albedo::Checker {
                    a: Vec3::new(0.85, 0.25, 0.20),
                    b: Vec3::new(0.95, 0.85, 0.75),
                    cell: 0.5,
                },
            ),
            p(
                Shape::Aabb { min: Vec3::new(10.0, 2.5, 0.0), max: Vec3::new(12.0, 4.5, 3.0) },
                Albedo::Solid(Vec3::new(0.20, 0.35, 0.80)),
            ),
            p(
                Shape::Aabb { min: Vec3::new(16.0, -5.0, 0.0), max: Vec3::new(19.0, -2.5, 2.5) },
                Albedo::Checker {
                    a: Vec3::new(0.25, 0.65, 0.30),
                    b: Vec3::new(0.90, 0.90, 0.85),
                    cell: 0.6,
                },
            ),
            p(
                Shape::Aabb { min: Vec3::new(21.0, 5.0, 0.0), max: Vec3::new(23.5, 7.5, 2.2) },
                Albedo::Solid(Vec3::new(0.90, 0.55, 0.15)),
            ),
            p(
                Shape::Aabb { min: Vec3::new(26.0, -2.0, 0.0), max: Vec3::new(28.0, 0.5, 3.5) },
                Albedo::Checker {
                    a: Vec3::new(0.55, 0.20, 0.60),
                    b: Vec3::new(0.95, 0.95, 0.90),
                    cell: 0.7,
                },
            ),
            p(
                Shape::Sphere { center: Vec3::new(14.0, -1.5, 1.0), radius: 1.0 },
                Albedo::Solid(Vec3::new(0.95, 0.85, 0.20)),
            ),
            p(
                Shape::Sphere { center: Vec3::new(20.0, 2.0, 1.5), radius: 1.5 },
                Albedo::Checker {
                    a: Vec3::new(0.15, 0.60, 0.70),
                    b: Vec3::new(0.90, 0.95, 0.95),
                    cell: 0.8,
                },
            ),
        ],
    }
}

/// LiDAR-to-reference-camera rotation: LiDAR x (forward) to camera z,
/// LiDAR y (left) to camera -x, LiDAR z (up) to camera -y.
pub fn lidar_to_camera_rotation() -> Quat {
    let r = crate::geometry::Mat3::from_cols(
        Vec3::new(0.0, 0.0, 1.0),
        Vec3::new(-1.0, 0.0, 0.0),
        Vec3::new(0.0, -1.0, 0.0),
    );
    Quat::from_mat3(&r)
}
