//! Finite-difference validation of every analytic adjoint in the pipeline:
//! field parameters and query positions, ray origins/directions, the four
//! losses, and the calibration parameters including the clock offsets
//! (checked end to end through a frozen ray batch).

use crate::field::{FieldConfig, FieldModel};
use crate::geometry::{Quat, SE3Pose, Vec3};
use crate::losses::{
    color_loss, depth_loss, depth_smoothness_loss, dssim_loss, LossWeights, Patch,
};
use crate::optim::calib::CalibrationState;
use crate::optim::train::{process_batch, BatchPlan, PlanItem};
use crate::render::{
    render_batch_backward, render_batch_with_key, PinholeIntrinsics, Ray, RayAdjoint,
    RenderConfig, SampleKey,
};
use crate::sim::{
    default_scene, lidar_to_camera_rotation, make_trajectory, simulate_rig, NoiseConfig, RigSpec,
    SensorKind, SensorSpec, TrajectoryKind,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err <= self.tolerance
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradcheckReport {
    pub checks: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed())
    }

    fn push(&mut self, name: &str, max_rel_err: f64, tolerance: f64) {
        self.checks.push(CheckResult { name: name.into(), max_rel_err, tolerance });
    }

    pub fn merge(&mut self, other: GradcheckReport) {
        self.checks.extend(other.checks);
    }
}

fn rel_err(analytic: f64, fd: f64, floor: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(floor)
}

fn small_field(seed: u64) -> FieldModel {
    let cfg = FieldConfig {
        levels: 3,
        base_resolution: 4,
        max_resolution: 16,
        features_per_level: 2,
        hash_size: 1 << 14,
        hidden_dim: 16,
        geo_features: 7,
        sh_degree: 2,
        density_bias: -1.5,
        // Asymmetric bounds keep grid-cell faces off the y = 0 plane, where
        // the rig's symmetric beams would otherwise sit exactly on the
        // trilinear kink and bias finite differences.
        bounds_min: [-6.1, -14.3, -1.2],
        bounds_max: [26.3, 13.8, 6.4],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = FieldModel::init(cfg, &mut rng);
    let grid_end = model.grid.param_len;
    for v in &mut model.params[..grid_end] {
        *v = rng.gen_range(-0.4..0.4);
    }
    model
}

/// Field parameter, position and direction adjoints.
pub fn field_suite() -> GradcheckReport {
    let mut report = GradcheckReport::default();
    let model = small_field(101);
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let a = 0.6;
    let b = Vec3::new(0.4, -0.7, 0.3);
    let probe = |model: &FieldModel, x: Vec3, d: Vec3| {
        let mut s = model.new_scratch();
        let (sigma, rgb) = model.eval(x, d, &mut s).unwrap();
        a * sigma + b.dot(rgb)
    };

    // 20 parameters across grid and decoder, h = 1e-4, rel tol 1e-3.
    {
        let x = Vec3::new(3.1, -2.4, 2.2);
        let d = Vec3::new(0.3, 0.1, 0.95).normalized();
        let mut s = model.new_scratch();
        let mut model = model.clone();
        model.eval(x, d, &mut s).unwrap();
        let mut d_params = vec![0.0; model.param_len()];
        model.eval_backward(x, d, &mut s, a, b, &mut d_params);

        let grid_len = model.grid.param_len;
        let touched: Vec<usize> = (0..grid_len).filter(|i| d_params[*i] != 0.0).collect();
        let mut indices = Vec::new();
        for k in 0..10 {
            indices.push(touched[k * touched.len() / 10]);
        }
        let dec = model.decoder_range();
        for k in 0..10 {
            indices.push(dec.start + k * dec.len() / 10);
        }
        let h = 1e-4;
        let mut worst = 0.0f64;
        for idx in indices {
            let orig = model.params[idx];
            model.params[idx] = orig + h;
            let lp = probe(&model, x, d);
            model.params[idx] = orig - h;
            let lm = probe(&model, x, d);
            model.params[idx] = orig;
            worst = worst.max(rel_err(d_params[idx], (lp - lm) / (2.0 * h), 1e-6));
        }
        report.push("field: parameter gradients (20 params)", worst, 1e-3);
    }

    // Position and direction gradients at 20 random in-bounds points.
    {
        let h = 1e-5;
        let mut worst_pos = 0.0f64;
        let mut worst_dir = 0.0f64;
        let lo = Vec3::from_array(model.cfg.bounds_min);
        let hi = Vec3::from_array(model.cfg.bounds_max);
        for _ in 0..20 {
            let x = Vec3::new(
                rng.gen_range(lo.x + 0.5..hi.x - 0.5),
                rng.gen_range(lo.y + 0.5..hi.y - 0.5),
                rng.gen_range(lo.z + 0.5..hi.z - 0.5),
            );
            let d = Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )
            .normalized();
            let mut s = model.new_scratch();
            model.eval(x, d, &mut s).unwrap();
            let mut d_params = vec![0.0; model.param_len()];
            let (d_x, d_dir) = model.eval_backward(x, d, &mut s, a, b, &mut d_params);
            for axis in 0..3 {
                let mut step = Vec3::ZERO;
                match axis {
                    0 => step.x = h,
                    1 => step.y = h,
                    _ => step.z = h,
                }
                let fd = (probe(&model, x + step, d) - probe(&model, x - step, d)) / (2.0 * h);
                worst_pos = worst_pos.max(rel_err([d_x.x, d_x.y, d_x.z][axis], fd, 1e-4));
                let fd = (probe(&model, x, d + step) - probe(&model, x, d - step)) / (2.0 * h);
                worst_dir = worst_dir.max(rel_err([d_dir.x, d_dir.y, d_dir.z][axis], fd, 1e-4));
            }
        }
        report.push("field: position gradients (20 points)", worst_pos, 1e-3);
        report.push("field: direction gradients (20 points)", worst_dir, 1e-3);
    }
    report
}

/// Ray origin/direction adjoints through the full render pipeline.
pub fn render_suite() -> GradcheckReport {
    let mut report = GradcheckReport::default();
    let model = small_field(303);
    let cfg = RenderConfig {
        near: 0.3,
        far: 22.0,
        n_samples: 32,
        importance: false,
        background: [1.0, 1.0, 1.0],
        early_stop_transmittance: 0.0,
    };
    let seed = 404;
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let h = 1e-5;
    let mut worst_origin = 0.0f64;
    let mut worst_dir = 0.0f64;
    for _ in 0..6 {
        let adj = RayAdjoint {
            d_color: Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ),
            d_depth: rng.gen_range(-0.5..0.5),
        };
        let base = Ray {
            origin: Vec3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), 1.5),
            direction: Vec3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), 1.0)
                .normalized(),
            near: cfg.near,
            far: cfg.far,
        };
        let (_, grads) =
            render_batch_backward(&model, &[base], &cfg, seed, SampleKey::Indexed, &[adj]);
        let g = grads[0];
        let loss = |ray: Ray| {
            let r = render_batch_with_key(&model, &[ray], &cfg, seed, SampleKey::Indexed)[0];
            adj.d_color.dot(r.color) + adj.d_depth * r.depth
        };
        for axis in 0..3 {
            let mut step = Vec3::ZERO;
            match axis {
                0 => step.x = h,
                1 => step.y = h,
                _ => step.z = h,
            }
            let fd = (loss(Ray { origin: base.origin + step, ..base })
                - loss(Ray { origin: base.origin - step, ..base }))
                / (2.0 * h);
            worst_origin =
                worst_origin.max(rel_err([g.d_origin.x, g.d_origin.y, g.d_origin.z][axis], fd, 1e-4));
            let fd = (loss(Ray { direction: base.direction + step, ..base })
                - loss(Ray { direction: base.direction - step, ..base }))
                / (2.0 * h);
            worst_dir = worst_dir
                .max(rel_err([g.d_direction.x, g.d_direction.y, g.d_direction.z][axis], fd, 1e-4));
        }
    }
    report.push("render: ray origin gradients", worst_origin, 1e-3);
    report.push("render: ray direction gradients", worst_dir, 1e-3);
    report
}

/// All four loss adjoints.
pub fn losses_suite() -> GradcheckReport {
    let mut report = GradcheckReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(606);

    // Color (linear adjoint; tight tolerance).
    {
        let gt: Vec<Vec3> = (0..8).map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen())).collect();
        let pred: Vec<Vec3> = (0..8).map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen())).collect();
        let (_, adj) = color_loss(&pred, &gt).unwrap();
        let h = 1e-7;
        let mut worst = 0.0f64;
        for i in 0..pred.len() {
            let mut pp = pred.clone();
            let mut pm = pred.clone();
            pp[i].z += h;
            pm[i].z -= h;
            let fd =
                (color_loss(&pp, &gt).unwrap().0 - color_loss(&pm, &gt).unwrap().0) / (2.0 * h);
            worst = worst.max(rel_err(adj[i].z, fd, 1e-9));
        }
        report.push("losses: color adjoint", worst, 1e-6);
    }

    // Depth.
    {
        let gt: Vec<f64> = (0..8).map(|_| rng.gen_range(1.0..10.0)).collect();
        let pred: Vec<f64> = (0..8).map(|_| rng.gen_range(1.0..10.0)).collect();
        let mask: Vec<bool> = (0..8).map(|i| i % 3 != 0).collect();
        let (_, adj) = depth_loss(&pred, &gt, &mask).unwrap();
        let h = 1e-6;
        let mut worst = 0.0f64;
        for i in 0..pred.len() {
            let mut pp = pred.clone();
            let mut pm = pred.clone();
            pp[i] += h;
            pm[i] -= h;
            let fd = (depth_loss(&pp, &gt, &mask).unwrap().0
                - depth_loss(&pm, &gt, &mask).unwrap().0)
                / (2.0 * h);
            worst = worst.max(rel_err(adj[i], fd, 1e-9));
        }
        report.push("losses: depth adjoint", worst, 1e-6);
    }

    // DSSIM.
    {
        let mk = |rng: &mut ChaCha8Rng| {
            Patch::new(
                6,
                6,
                (0..36).map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen())).collect(),
            )
        };
        let gt = mk(&mut rng);
        let pred = mk(&mut rng);
        let (_, adj) = dssim_loss(&pred, &gt).unwrap();
        let h = 1e-6;
        let mut worst = 0.0f64;
        for i in (0..36).step_by(5) {
            let mut pp = pred.clone();
            let mut pm = pred.clone();
            pp.pixels[i].x += h;
            pm.pixels[i].x -= h;
            let fd =
                (dssim_loss(&pp, &gt).unwrap().0 - dssim_loss(&pm, &gt).unwrap().0) / (2.0 * h);
            worst = worst.max(rel_err(adj[i].x, fd, 1e-9));
        }
        report.push("losses: DSSIM adjoint", worst, 1e-4);
    }

    // Depth smoothness.
    {
        let depth: Vec<f64> = (0..20).map(|_| rng.gen_range(1.0..5.0)).collect();
        let (_, adj) = depth_smoothness_loss(&depth, 5, 4).unwrap();
        let h = 1e-6;
        let mut worst = 0.0f64;
        for i in 0..depth.len() {
            let mut dp = depth.clone();
            let mut dm = depth.clone();
            dp[i] += h;
            dm[i] -= h;
            let fd = (depth_smoothness_loss(&dp, 5, 4).unwrap().0
                - depth_smoothness_loss(&dm, 5, 4).unwrap().0)
                / (2.0 * h);
            worst = worst.max(rel_err(adj[i], fd, 1e-9));
        }
        report.push("losses: depth smoothness adjoint", worst, 1e-4);
    }
    report
}

/// Full-chain check: d(total loss)/d(calibration parameters) including the
/// clock offsets, against central finite differences on a frozen ray batch.
pub fn calib_suite() -> GradcheckReport {
    let mut report = GradcheckReport::default();

    // Tiny two-camera + LiDAR rig on the default scene.
    let intr = PinholeIntrinsics::from_hfov(20, 15, 60.0);
    let rig = RigSpec {
        sensors: vec![
            SensorSpec {
                name: "cam0".into(),
                kind: SensorKind::Camera { intr, rate: 2.0 },
                gt_extrinsic: SE3Pose::identity(),
                gt_delta: 0.0,
                reference: true,
            },
            SensorSpec {
                name: "cam1".into(),
                kind: SensorKind::Camera { intr, rate: 2.0 },
                gt_extrinsic: SE3Pose::new(
                    Quat::from_axis_angle(Vec3::new(0.0, 1.0, 0.0), -0.4),
                    Vec3::new(0.5, 0.0, 0.1),
                ),
                gt_delta: 0.03,
                reference: false,
            },
            SensorSpec {
                name: "lidar0".into(),
                kind: SensorKind::Lidar {
                    rings: 4,
                    azimuth_steps: 24,
                    vfov_deg: 30.0,
                    rate: 2.0,
                    max_range: 40.0,
                },
                gt_extrinsic: SE3Pose::new(lidar_to_camera_rotation(), Vec3::new(0.0, -0.3, 0.0)),
                gt_delta: -0.02,
                reference: false,
            },
        ],
    };
    let track = make_trajectory(TrajectoryKind::Arc, 4.0, 2.0, 10.0, 1.5);
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let dataset =
        simulate_rig(&default_scene(), &rig, &track, 4.0, &NoiseConfig::default(), &mut rng);

    let model = small_field(808);
    let render_cfg = RenderConfig {
        near: 0.3,
        far: 22.0,
        n_samples: 24,
        importance: false,
        background: [1.0, 1.0, 1.0],
        early_stop_transmittance: 0.0,
    };
    let weights = LossWeights::default();

    // Frozen batch: camera rays, a patch, LiDAR rays, mixed frames.
    let mut items = Vec::new();
    for frame in [1usize, 4] {
        let pixels: Vec<(u32, u32)> =
            (0..40).map(|_| (rng.gen_range(0..20), rng.gen_range(0..15))).collect();
        items.push(PlanItem::CameraRays { sensor: 1, frame, pixels });
    }
    items.push(PlanItem::CameraPatch { sensor: 1, frame: 2, x0: 4, y0: 3, size: 4 });
    for frame in [0usize, 3] {
        let n = dataset.sensors[2].scans[frame].len();
        let returns: Vec<usize> = (0..40).map(|_| rng.gen_range(0..n)).collect();
        items.push(PlanItem::LidarRays { sensor: 2, frame, returns });
    }
    let plan = BatchPlan { items, sample_key: SampleKey::Indexed, seed: 909 };

    let calib = {
        // Start slightly off ground truth so gradients are informative, and
        // off the scene's symmetry planes so no sample sits exactly on a
        // grid-cell face (where the C0 interpolant has one-sided gradients).
        let mut c = rig.gt_calibration();
        c.sensors[1].translation += Vec3::new(0.05, -0.03, 0.02);
        c.sensors[1].delta += 0.01;
        c.sensors[2].translation += Vec3::new(0.017, -0.023, 0.011);
        c.sensors[2].delta -= 0.015;
        c
    };

    let out = process_batch(&model, &calib, &dataset, &plan, &weights, weights.lambda_d, &render_cfg, true)
        .expect("batch processes");
    let analytic = calib.pack_grads(&out.calib_grads.expect("grads"));

    let loss_of = |c: &CalibrationState| {
        process_batch(&model, c, &dataset, &plan, &weights, weights.lambda_d, &render_cfg, false)
            .expect("batch processes")
            .total
    };

    let base = calib.pack();
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut worst_delta = 0.0f64;
    for (k, an) in analytic.iter().enumerate() {
        let mut vp = base.clone();
        let mut vm = base.clone();
        vp[k] += h;
        vm[k] -= h;
        let mut cp = calib.clone();
        let mut cm = calib.clone();
        cp.unpack(&vp);
        cm.unpack(&vm);
        let fd = (loss_of(&cp) - loss_of(&cm)) / (2.0 * h);
        let e = rel_err(*an, fd, 1e-6);
        // Parameter 9 of each sensor block is the clock offset.
        if k % 10 == 9 {
            worst_delta = worst_delta.max(e);
        } else {
            worst = worst.max(e);
        }
    }
    report.push("calib: extrinsic gradients (frozen rays)", worst, 1e-2);
    report.push("calib: clock-offset gradients (frozen rays)", worst_delta, 1e-2);
    report
}

/// Run the selected module's suite(s): `all`, `field`, `render` or `calib`
/// (`all` additionally runs the loss-adjoint suite).
pub fn run(module: &str) -> Result<GradcheckReport, String> {
    let mut report = GradcheckReport::default();
    match module {
        "all" => {
            report.merge(field_suite());
            report.merge(render_suite());
            report.merge(losses_suite());
            report.merge(calib_suite());
        }
        "field" => report.merge(field_suite()),
        "render" => report.merge(render_suite()),
        "calib" => report.merge(calib_suite()),
        other => return Err(format!("unknown gradcheck module `{other}`")),
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn losses_suite_passes() {
        let r = losses_suite();
        assert!(r.passed(), "{:?}", r.checks);
    }

    #[test]
    fn field_suite_passes() {
        let r = field_suite();
        assert!(r.passed(), "{:?}", r.checks);
    }
}
