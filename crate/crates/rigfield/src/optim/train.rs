//! The joint optimization loop: Adam over the scene field and the
//! per-sensor calibration parameters (6D rotation + translation + clock
//! offset), with exponential learning-rate decay, grid weight decay removed
//! after a few epochs, a delayed depth loss, and per-epoch calibration
//! snapshots averaged over the last epochs.

use crate::exec::mix_seed;
use crate::field::{FieldConfig, FieldModel};
use crate::geometry::{quat_chordal_mean, Quat, Vec3};
use crate::losses::{
    color_loss, depth_loss, depth_smoothness_loss, dssim_loss, total_loss, LossError, LossParts,
    LossWeights, Patch, PatchSpec,
};
use crate::optim::adam::{adam_step, AdamState, OptimError};
use crate::optim::calib::{CalibError, CalibrationState, SensorCalibGrad};
use crate::render::{
    camera_rays, camera_rays_backward, lidar_rays, lidar_rays_backward, render_batch_backward,
    render_batch_with_key, Ray, RayAdjoint, RenderConfig, RenderError, SampleKey,
};
use crate::sim::{RigDataset, SensorKind};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("epoch {epoch} batch {batch} diverged: {source}")]
    Diverged {
        epoch: usize,
        batch: usize,
        source: LossError,
    },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Calib(#[from] CalibError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("dataset/priors mismatch: {0}")]
    Setup(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub lr_network: f64,
    pub lr_calib: f64,
    /// Learning rates decay geometrically to `lr * lr_final_factor`.
    pub lr_final_factor: f64,
    /// Decoder weight decay, active for the whole run.
    pub weight_decay: f64,
    /// Grid weight decay, active only during the first `grid_decay_epochs`
    /// (the coarse-to-fine stand-in).
    pub grid_weight_decay: f64,
    pub grid_decay_epochs: usize,
    pub depth_loss_start_epoch: usize,
    pub rays_per_frame: usize,
    pub batch_rays: usize,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            epochs: 50,
            lr_network: 1e-2,
            lr_calib: 5e-5,
            lr_final_factor: 1e-2,
            weight_decay: 1e-6,
            grid_weight_decay: 1e-6,
            grid_decay_epochs: 5,
            depth_loss_start_epoch: 2,
            rays_per_frame: 1024,
            batch_rays: 1024,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<(), String> {
        if self.epochs == 0 {
            return Err("schedule: epochs must be >= 1".into());
        }
        if !(self.lr_final_factor > 0.0 && self.lr_final_factor <= 1.0) {
            return Err("schedule: lr_final_factor must be in (0, 1]".into());
        }
        if self.rays_per_frame == 0 || self.batch_rays == 0 {
            return Err("schedule: rays_per_frame and batch_rays must be positive".into());
        }
        Ok(())
    }
}

/// Geometric interpolation `lr0 * final_factor^(epoch/epochs)` for the
/// network and calibration groups.
pub fn lr_at_epoch(s: &TrainSchedule, epoch: usize) -> (f64, f64) {
    let f = s.lr_final_factor.powf(epoch as f64 / s.epochs as f64);
    (s.lr_network * f, s.lr_calib * f)
}

/// Grid weight decay is dropped after `grid_decay_epochs`.
pub fn grid_weight_decay_at(s: &TrainSchedule, epoch: usize) -> f64 {
    if epoch < s.grid_decay_epochs {
        s.grid_weight_decay
    } else {
        0.0
    }
}

/// The depth loss is gated off for the first `depth_loss_start_epoch` epochs.
pub fn depth_weight_at(s: &TrainSchedule, weights: &LossWeights, epoch: usize) -> f64 {
    if epoch < s.depth_loss_start_epoch {
        0.0
    } else {
        weights.lambda_d
    }
}

/// Which calibration parameter groups stay frozen at their priors.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TrainOptions {
    pub freeze_spatial: bool,
    pub freeze_temporal: bool,
}

/// Everything `calibrate` needs besides the dataset and priors.
#[derive(Debug, Clone)]
pub struct TrainSetup {
    pub field: FieldConfig,
    pub render: RenderConfig,
    pub weights: LossWeights,
    pub patches: PatchSpec,
    pub schedule: TrainSchedule,
    pub options: TrainOptions,
}

#[derive(Debug, Clone)]
pub struct EpochReport {
    pub epoch: usize,
    /// Epoch-averaged unweighted loss parts.
    pub losses: LossParts,
    /// Weighted total (with the epoch's effective depth weight).
    pub total: f64,
    /// Calibration snapshot at the end of the epoch.
    pub calib: CalibrationState,
}

#[derive(Debug, Clone)]
pub struct CalibrationResult {
    /// Per-parameter mean over the last snapshots (rotations via chordal
    /// quaternion mean).
    pub final_calib: CalibrationState,
    pub history: Vec<EpochReport>,
}

// ---------------------------------------------------------------------------
// Batch plans

#[derive(Debug, Clone)]
pub enum PlanItem {
    /// Random camera rays supervised by the photometric loss.
    CameraRays { sensor: usize, frame: usize, pixels: Vec<(u32, u32)> },
    /// Random LiDAR beams supervised by the depth loss.
    LidarRays { sensor: usize, frame: usize, returns: Vec<usize> },
    /// A full camera patch supervised by DSSIM and depth smoothness.
    CameraPatch { sensor: usize, frame: usize, x0: u32, y0: u32, size: u32 },
}

impl PlanItem {
    fn ray_count(&self, _ds: &RigDataset) -> usize {
        match self {
            PlanItem::CameraRays { pixels, .. } => pixels.len(),
            PlanItem::LidarRays { returns, .. } => returns.len(),
            PlanItem::CameraPatch { size, .. } => (*size as usize) * (*size as usize),
        }
    }
}

/// One batch of work items with its sampling configuration.
#[derive(Debug, Clone)]
pub struct BatchPlan {
    pub items: Vec<PlanItem>,
    pub sample_key: SampleKey,
    pub seed: u64,
}

/// Output of one processed batch.
pub struct BatchOutput {
    pub parts: LossParts,
    pub total: f64,
    /// Ray counts backing each loss part (color, depth, patches).
    pub counts: (usize, usize, usize),
    pub field_grads: Option<Vec<f64>>,
    pub calib_grads: Option<Vec<SensorCalibGrad>>,
}

struct Segment {
    item: usize,
    rays: std::ops::Range<usize>,
}

/// Render one batch, compute the weighted loss and (optionally) propagate
/// gradients to field parameters and per-sensor calibration. The same code
/// path serves training (content-keyed samples) and the frozen-ray
/// finite-difference suites (index-keyed samples).
pub fn process_batch(
    model: &FieldModel,
    calib: &CalibrationState,
    dataset: &RigDataset,
    plan: &BatchPlan,
    weights: &LossWeights,
    lambda_d_effective: f64,
    render_cfg: &RenderConfig,
    compute_grads: bool,
) -> Result<BatchOutput, TrainError> {
    let mut rays: Vec<Ray> = Vec::new();
    let mut segments: Vec<Segment> = Vec::with_capacity(plan.items.len());

    // Ray assembly, one pose per item.
    for (idx, item) in plan.items.iter().enumerate() {
        let start = rays.len();
        match item {
            PlanItem::CameraRays { sensor, frame, pixels } => {
                let sd = &dataset.sensors[*sensor];
                let SensorKind::Camera { intr, .. } = &sd.kind else {
                    return Err(TrainError::Setup(format!("sensor {sensor} is not a camera")));
                };
                let t = sd.timestamps[*frame];
                let pose = calib.sensor_pose(&dataset.track, *sensor, t)?;
                rays.extend(camera_rays(intr, &pose, pixels, render_cfg.near, render_cfg.far)?);
            }
            PlanItem::CameraPatch { sensor, frame, x0, y0, size } => {
                let sd = &dataset.sensors[*sensor];
                let SensorKind::Camera { intr, .. } = &sd.kind else {
                    return Err(TrainError::Setup(format!("sensor {sensor} is not a camera")));
                };
                let t = sd.timestamps[*frame];
                let pose = calib.sensor_pose(&dataset.track, *sensor, t)?;
                let pixel_list = patch_pixels(*x0, *y0, *size);
                rays.extend(camera_rays(intr, &pose, &pixel_list, render_cfg.near, render_cfg.far)?);
            }
            PlanItem::LidarRays { sensor, frame, returns } => {
                let sd = &dataset.sensors[*sensor];
                let t = sd.timestamps[*frame];
                let pose = calib.sensor_pose(&dataset.track, *sensor, t)?;
                let dirs: Vec<Vec3> =
                    returns.iter().map(|&ri| sd.scans[*frame][ri].0).collect();
                rays.extend(lidar_rays(&pose, &dirs, render_cfg.near, render_cfg.far)?);
            }
        }
        segments.push(Segment { item: idx, rays: start..rays.len() });
    }

    let results = render_batch_with_key(model, &rays, render_cfg, plan.seed, plan.sample_key);

    // Losses and per-ray adjoints.
    let mut adjoints = vec![RayAdjoint::default(); rays.len()];
    let mut parts = LossParts::default();
    let mut n_color = 0usize;
    let mut n_depth = 0usize;
    let mut n_patches = 0usize;

    // Photometric loss over all random camera rays of the batch.
    {
        let mut preds = Vec::new();
        let mut gts = Vec::new();
        let mut targets = Vec::new();
        for seg in &segments {
            if let PlanItem::CameraRays { sensor, frame, pixels } = &plan.items[seg.item] {
                let sd = &dataset.sensors[*sensor];
                let SensorKind::Camera { intr, .. } = &sd.kind else { unreachable!() };
                for (k, &(u, v)) in pixels.iter().enumerate() {
                    preds.push(results[seg.rays.start + k].color);
                    gts.push(sd.images[*frame][(v * intr.width + u) as usize]);
                    targets.push(seg.rays.start + k);
                }
            }
        }
        if !preds.is_empty() {
            let (loss, adj) = color_loss(&preds, &gts)?;
            parts.color = loss;
            n_color = preds.len();
            for (t, a) in targets.iter().zip(adj) {
                adjoints[*t].d_color += a * weights.lambda_c;
            }
        }
    }

    // Depth loss over all LiDAR rays of the batch (every recorded return is
    // a valid hit; the mask exists for generality).
    {
        let mut preds = Vec::new();
        let mut gts = Vec::new();
        let mut targets = Vec::new();
        for seg in &segments {
            if let PlanItem::LidarRays { sensor, frame, returns } = &plan.items[seg.item] {
                let sd = &dataset.sensors[*sensor];
                for (k, &ri) in returns.iter().enumerate() {
                    preds.push(results[seg.rays.start + k].depth);
                    gts.push(sd.scans[*frame][ri].1);
                    targets.push(seg.rays.start + k);
                }
            }
        }
        if !preds.is_empty() {
            let mask = vec![true; preds.len()];
            let (loss, adj) = depth_loss(&preds, &gts, &mask)?;
            parts.depth = loss;
            n_depth = preds.len();
            if lambda_d_effective != 0.0 {
                for (t, a) in targets.iter().zip(adj) {
                    adjoints[*t].d_depth += a * lambda_d_effective;
                }
            }
        }
    }

    // Patch losses, averaged over the batch's patches.
    {
        let patch_count = plan
            .items
            .iter()
            .filter(|i| matches!(i, PlanItem::CameraPatch { .. }))
            .count();
        if patch_count > 0 {
            let scale = 1.0 / patch_count as f64;
            for seg in &segments {
                let PlanItem::CameraPatch { sensor, frame, x0, y0, size } = &plan.items[seg.item]
                else {
                    continue;
                };
                let sd = &dataset.sensors[*sensor];
                let SensorKind::Camera { intr, .. } = &sd.kind else { unreachable!() };
                let s = *size as usize;
                let pred_pixels: Vec<Vec3> =
                    results[seg.rays.clone()].iter().map(|r| r.color).collect();
                let gt_pixels: Vec<Vec3> = (0..s)
                    .flat_map(|dy| {
                        (0..s).map(move |dx| {
                            let u = x0 + dx as u32;
                            let v = y0 + dy as u32;
                            sd.images[*frame][(v * intr.width + u) as usize]
                        })
                    })
                    .collect();
                let pred_patch = Patch::new(s, s, pred_pixels);
                let gt_patch = Patch::new(s, s, gt_pixels);
                let (ssim_l, ssim_adj) = dssim_loss(&pred_patch, &gt_patch)?;
                parts.ssim += ssim_l * scale;

                let depths: Vec<f64> =
                    results[seg.rays.clone()].iter().map(|r| r.depth).collect();
                let (ds_l, ds_adj) = depth_smoothness_loss(&depths, s, s)?;
                parts.smooth += ds_l * scale;

                for k in 0..s * s {
                    adjoints[seg.rays.start + k].d_color +=
                        ssim_adj[k] * (weights.lambda_ssim * scale);
                    adjoints[seg.rays.start + k].d_depth +=
                        ds_adj[k] * (weights.lambda_ds * scale);
                }
            }
            n_patches = patch_count;
        }
    }

    let gated = LossWeights { lambda_d: lambda_d_effective, ..*weights };
    let total = total_loss(&parts, &gated)?;

    if !compute_grads {
        return Ok(BatchOutput {
            parts,
            total,
            counts: (n_color, n_depth, n_patches),
            field_grads: None,
            calib_grads: None,
        });
    }

    let (field_grads, ray_grads) =
        render_batch_backward(model, &rays, render_cfg, plan.seed, plan.sample_key, &adjoints);

    // Ray-generation backward, then the pose chain into calibration space.
    let mut calib_grads = vec![SensorCalibGrad::default(); calib.sensors.len()];
    for seg in &segments {
        let (sensor, frame, pose_grad) = match &plan.items[seg.item] {
            PlanItem::CameraRays { sensor, frame, pixels } => {
                let sd = &dataset.sensors[*sensor];
                let SensorKind::Camera { intr, .. } = &sd.kind else { unreachable!() };
                let t = sd.timestamps[*frame];
                let pose = calib.sensor_pose(&dataset.track, *sensor, t)?;
                (*sensor, *frame, camera_rays_backward(intr, &pose, pixels, &ray_grads[seg.rays.clone()]))
            }
            PlanItem::CameraPatch { sensor, frame, x0, y0, size } => {
                let sd = &dataset.sensors[*sensor];
                let SensorKind::Camera { intr, .. } = &sd.kind else { unreachable!() };
                let t = sd.timestamps[*frame];
                let pose = calib.sensor_pose(&dataset.track, *sensor, t)?;
                let pixels = patch_pixels(*x0, *y0, *size);
                (*sensor, *frame, camera_rays_backward(intr, &pose, &pixels, &ray_grads[seg.rays.clone()]))
            }
            PlanItem::LidarRays { sensor, frame, returns } => {
                let sd = &dataset.sensors[*sensor];
                let dirs: Vec<Vec3> =
                    returns.iter().map(|&ri| sd.scans[*frame][ri].0).collect();
                (*sensor, *frame, lidar_rays_backward(&dirs, &ray_grads[seg.rays.clone()]))
            }
        };
        let t = dataset.sensors[sensor].timestamps[frame];
        let g = calib.sensor_pose_backward(
            &dataset.track,
            sensor,
            t,
            &pose_grad.d_rot,
            pose_grad.d_trans,
        )?;
        let acc = &mut calib_grads[sensor];
        acc.d_a1 += g.d_a1;
        acc.d_a2 += g.d_a2;
        acc.d_translation += g.d_translation;
        acc.d_delta += g.d_delta;
    }

    Ok(BatchOutput {
        parts,
        total,
        counts: (n_color, n_depth, n_patches),
        field_grads: Some(field_grads),
        calib_grads: Some(calib_grads),
    })
}

fn patch_pixels(x0: u32, y0: u32, size: u32) -> Vec<(u32, u32)> {
    (0..size)
        .flat_map(|dy| (0..size).map(move |dx| (x0 + dx, y0 + dy)))
        .collect()
}

// ---------------------------------------------------------------------------
// The trainer

pub struct Trainer {
    pub model: FieldModel,
    pub calib: CalibrationState,
    pub setup: TrainSetup,
    adam_grid: AdamState,
    adam_decoder: AdamState,
    adam_calib: AdamState,
}

/// Work-item group size when splitting a frame's ray budget; patches stay
/// whole so their loss renders jointly.
const GROUP_RAYS: usize = 256;

impl Trainer {
    pub fn new(setup: TrainSetup, dataset: &RigDataset, priors: &CalibrationState) -> Result<Trainer, TrainError> {
        priors.validate()?;
        setup.field.validate().map_err(TrainError::Setup)?;
        setup.render.validate().map_err(TrainError::Setup)?;
        setup.schedule.validate().map_err(TrainError::Setup)?;
        // Priors must cover the dataset's sensors, in order.
        if dataset.sensors.len() != priors.sensors.len() {
            return Err(TrainError::Setup(format!(
                "dataset has {} sensors, priors {}",
                dataset.sensors.len(),
                priors.sensors.len()
            )));
        }
        for (d, p) in dataset.sensors.iter().zip(&priors.sensors) {
            if d.name != p.name {
                return Err(TrainError::Setup(format!(
                    "sensor order mismatch: dataset {} vs priors {}",
                    d.name, p.name
                )));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[setup.schedule.seed, 0x11D]));
        let model = FieldModel::init(setup.field.clone(), &mut rng);
        let grid_len = model.grid_range().len();
        let dec_len = model.decoder_range().len();
        let calib_len = priors.pack().len();
        Ok(Trainer {
            model,
            calib: priors.clone(),
            setup,
            adam_grid: AdamState::new(grid_len),
            adam_decoder: AdamState::new(dec_len),
            adam_calib: AdamState::new(calib_len),
        })
    }

    /// Build this epoch's shuffled work items (random rays + patches).
    fn plan_epoch(&self, dataset: &RigDataset, rng: &mut ChaCha8Rng) -> Vec<PlanItem> {
        let sched = &self.setup.schedule;
        let patch = self.setup.patches;
        let mut items = Vec::new();
        for (si, sd) in dataset.sensors.iter().enumerate() {
            match &sd.kind {
                SensorKind::Camera { intr, .. } => {
                    for fi in 0..sd.timestamps.len() {
                        let mut pixels: Vec<(u32, u32)> = (0..sched.rays_per_frame)
                            .map(|_| (rng.gen_range(0..intr.width), rng.gen_range(0..intr.height)))
                            .collect();
                        while !pixels.is_empty() {
                            let take = pixels.len().min(GROUP_RAYS);
                            let rest = pixels.split_off(take);
                            items.push(PlanItem::CameraRays { sensor: si, frame: fi, pixels });
                            pixels = rest;
                        }
                        if patch.size >= 2
                            && intr.width >= patch.size
                            && intr.height >= patch.size
                        {
                            for _ in 0..patch.patches_per_image {
                                items.push(PlanItem::CameraPatch {
                                    sensor: si,
                                    frame: fi,
                                    x0: rng.gen_range(0..=intr.width - patch.size),
                                    y0: rng.gen_range(0..=intr.height - patch.size),
                                    size: patch.size,
                                });
                            }
                        }
                    }
                }
                SensorKind::Lidar { .. } => {
                    for fi in 0..sd.timestamps.len() {
                        let n_returns = sd.scans[fi].len();
                        if n_returns == 0 {
                            continue;
                        }
                        let mut returns: Vec<usize> = (0..sched.rays_per_frame)
                            .map(|_| rng.gen_range(0..n_returns))
                            .collect();
                        while !returns.is_empty() {
                            let take = returns.len().min(GROUP_RAYS);
                            let rest = returns.split_off(take);
                            items.push(PlanItem::LidarRays { sensor: si, frame: fi, returns });
                            returns = rest;
                        }
                    }
                }
            }
        }
        items.shuffle(rng);
        items
    }

    /// One pass over the epoch's ray budget with an Adam step per batch.
    pub fn train_epoch(&mut self, dataset: &RigDataset, epoch: usize) -> Result<EpochReport, TrainError> {
        let sched = self.setup.schedule.clone();
        let weights = self.setup.weights;
        let (lr_net, lr_calib) = lr_at_epoch(&sched, epoch);
        let grid_wd = grid_weight_decay_at(&sched, epoch);
        let lambda_d = depth_weight_at(&sched, &weights, epoch);

        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[sched.seed, 0xE90C, epoch as u64]));
        let items = self.plan_epoch(dataset, &mut rng);

        // Pack shuffled items into batches of ~batch_rays rays.
        let mut batches: Vec<Vec<PlanItem>> = Vec::new();
        let mut current: Vec<PlanItem> = Vec::new();
        let mut current_rays = 0usize;
        for item in items {
            current_rays += item.ray_count(dataset);
            current.push(item);
            if current_rays >= sched.batch_rays {
                batches.push(std::mem::take(&mut current));
                current_rays = 0;
            }
        }
        if !current.is_empty() {
            batches.push(current);
        }

        let mut acc = LossParts::default();
        let mut acc_counts = (0usize, 0usize, 0usize);
        let decoder_range = self.model.decoder_range();
        let grid_range = self.model.grid_range();

        for (bi, batch_items) in batches.into_iter().enumerate() {
            let plan = BatchPlan {
                items: batch_items,
                sample_key: SampleKey::Content,
                seed: mix_seed(&[sched.seed, 0xBA7C4, epoch as u64, bi as u64]),
            };
            let out = match process_batch(
                &self.model,
                &self.calib,
                dataset,
                &plan,
                &weights,
                lambda_d,
                &self.setup.render,
                true,
            ) {
                Ok(out) => out,
                Err(TrainError::Loss(e @ LossError::NonFiniteLoss(_))) => {
                    return Err(TrainError::Diverged { epoch, batch: bi, source: e })
                }
                Err(e) => return Err(e),
            };

            let field_grads = out.field_grads.expect("grads requested");
            let mut calib_grads = out.calib_grads.expect("grads requested");

            if self.setup.options.freeze_spatial || self.setup.options.freeze_temporal {
                for g in &mut calib_grads {
                    if self.setup.options.freeze_spatial {
                        g.d_a1 = Vec3::ZERO;
                        g.d_a2 = Vec3::ZERO;
                        g.d_translation = Vec3::ZERO;
                    }
                    if self.setup.options.freeze_temporal {
                        g.d_delta = 0.0;
                    }
                }
            }

            adam_step(
                &mut self.model.params[grid_range.clone()],
                &field_grads[grid_range.clone()],
                &mut self.adam_grid,
                lr_net,
                grid_wd,
            )?;
            adam_step(
                &mut self.model.params[decoder_range.clone()],
                &field_grads[decoder_range.clone()],
                &mut self.adam_decoder,
                lr_net,
                sched.weight_decay,
            )?;

            let packed = self.calib.pack_grads(&calib_grads);
            if !packed.is_empty() {
                let mut params = self.calib.pack();
                adam_step(&mut params, &packed, &mut self.adam_calib, lr_calib, 0.0)?;
                self.calib.unpack(&params);
            }

            // Ray-weighted epoch aggregation.
            acc.color += out.parts.color * out.counts.0 as f64;
            acc.depth += out.parts.depth * out.counts.1 as f64;
            acc.ssim += out.parts.ssim * out.counts.2 as f64;
            acc.smooth += out.parts.smooth * out.counts.2 as f64;
            acc_counts.0 += out.counts.0;
            acc_counts.1 += out.counts.1;
            acc_counts.2 += out.counts.2;
        }

        let losses = LossParts {
            color: if acc_counts.0 > 0 { acc.color / acc_counts.0 as f64 } else { 0.0 },
            depth: if acc_counts.1 > 0 { acc.depth / acc_counts.1 as f64 } else { 0.0 },
            ssim: if acc_counts.2 > 0 { acc.ssim / acc_counts.2 as f64 } else { 0.0 },
            smooth: if acc_counts.2 > 0 { acc.smooth / acc_counts.2 as f64 } else { 0.0 },
        };
        let gated = LossWeights { lambda_d, ..weights };
        let total = total_loss(&losses, &gated)?;
        let mut snapshot = self.calib.clone();
        for s in &mut snapshot.sensors {
            s.sync_rotation()?;
        }
        Ok(EpochReport { epoch, losses, total, calib: snapshot })
    }
}

/// Run the full schedule and average the last `AVERAGE_WINDOW` snapshots
/// into the final calibration.
pub const AVERAGE_WINDOW: usize = 10;

pub fn calibrate(
    dataset: &RigDataset,
    priors: &CalibrationState,
    setup: TrainSetup,
) -> Result<(CalibrationResult, FieldModel), TrainError> {
    let epochs = setup.schedule.epochs;
    let mut trainer = Trainer::new(setup, dataset, priors)?;
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        history.push(trainer.train_epoch(dataset, epoch)?);
    }
    let final_calib = average_last_snapshots(&history, AVERAGE_WINDOW);
    Ok((CalibrationResult { final_calib, history }, trainer.model))
}

/// Per-parameter mean over the last `window` epoch snapshots; rotations are
/// averaged as sign-aligned quaternions (chordal mean).
pub fn average_last_snapshots(history: &[EpochReport], window: usize) -> CalibrationState {
    assert!(!history.is_empty());
    let take = window.min(history.len());
    let snaps = &history[history.len() - take..];
    let mut out = snaps[snaps.len() - 1].calib.clone();
    for (si, sensor) in out.sensors.iter_mut().enumerate() {
        if sensor.reference {
            continue;
        }
        let n = snaps.len() as f64;
        let mut t = Vec3::ZERO;
        let mut d = 0.0;
        let quats: Vec<Quat> = snaps
            .iter()
            .map(|r| {
                let s = &r.calib.sensors[si];
                t += s.translation;
                d += s.delta;
                s.rotation
            })
            .collect();
        *sensor = crate::optim::calib::SensorCalib::new(
            &sensor.name,
            quat_chordal_mean(&quats),
            t / n,
            d / n,
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::calib::SensorCalib;
    use crate::render::PinholeIntrinsics;
    use crate::sim::{
        default_scene, make_trajectory, simulate_rig, NoiseConfig, RigSpec, SensorSpec,
        TrajectoryKind,
    };
    use crate::geometry::SE3Pose;

    fn lr_paper_schedule() -> TrainSchedule {
        TrainSchedule {
            epochs: 50,
            lr_network: 1e-2,
            lr_calib: 5e-5,
            lr_final_factor: 1e-2,
            ..Default::default()
        }
    }

    #[test]
    fn learning_rate_schedule_endpoints() {
        let s = lr_paper_schedule();
        let (net0, cal0) = lr_at_epoch(&s, 0);
        assert_eq!(net0, 1e-2);
        assert_eq!(cal0, 5e-5);
        let (net_end, cal_end) = lr_at_epoch(&s, 50);
        assert!((net_end - 1e-4).abs() < 1e-12);
        assert!((cal_end - 5e-7).abs() < 1e-15);
        // Geometric midpoint: lr0 * sqrt(0.01) = lr0 * 0.1.
        let (net_mid, _) = lr_at_epoch(&s, 25);
        assert!((net_mid - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn schedule_gates() {
        let s = TrainSchedule::default();
        let w = LossWeights::default();
        assert_eq!(depth_weight_at(&s, &w, 0), 0.0);
        assert_eq!(depth_weight_at(&s, &w, 1), 0.0);
        assert_eq!(depth_weight_at(&s, &w, 2), 20.0);
        assert_eq!(grid_weight_decay_at(&s, 4), 1e-6);
        assert_eq!(grid_weight_decay_at(&s, 5), 0.0);
    }

    #[test]
    fn averaging_constant_history_is_identity() {
        let calib = CalibrationState {
            sensors: vec![
                SensorCalib::reference("cam0"),
                SensorCalib::new(
                    "cam1",
                    Quat::from_axis_angle(Vec3::new(0.0, 1.0, 0.0), 0.3),
                    Vec3::new(0.4, 0.1, -0.2),
                    0.025,
                ),
            ],
        };
        let history: Vec<EpochReport> = (0..15)
            .map(|e| EpochReport {
                epoch: e,
                losses: LossParts::default(),
                total: 0.0,
                calib: calib.clone(),
            })
            .collect();
        let avg = average_last_snapshots(&history, 10);
        let a = &avg.sensors[1];
        let b = &calib.sensors[1];
        assert!((a.translation - b.translation).norm() < 1e-12);
        assert!((a.delta - b.delta).abs() < 1e-15);
        assert!(crate::geometry::quat_angle_rad(a.rotation, b.rotation) < 1e-9);
    }

    fn tiny_setup(epochs: usize, seed: u64) -> TrainSetup {
        TrainSetup {
            field: FieldConfig {
                levels: 4,
                base_resolution: 8,
                max_resolution: 32,
                features_per_level: 2,
                hash_size: 1 << 14,
                hidden_dim: 16,
                geo_features: 7,
                sh_degree: 1,
                density_bias: -2.0,
                bounds_min: [-5.0, -12.0, -1.0],
                bounds_max: [30.0, 12.0, 6.0],
            },
            render: RenderConfig {
                near: 0.1,
                far: 25.0,
                n_samples: 24,
                importance: false,
                background: [1.0, 1.0, 1.0],
                early_stop_transmittance: 1e-7,
            },
            weights: LossWeights::default(),
            patches: PatchSpec { size: 4, patches_per_image: 1 },
            schedule: TrainSchedule {
                epochs,
                lr_network: 1e-2,
                lr_calib: 1e-3,
                rays_per_frame: 64,
                batch_rays: 256,
                seed,
                ..Default::default()
            },
            options: TrainOptions::default(),
        }
    }

    fn tiny_dataset() -> (RigDataset, RigSpec) {
        let intr = PinholeIntrinsics::from_hfov(16, 12, 60.0);
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
                        Quat::from_axis_angle(Vec3::new(0.0, 1.0, 0.0), -0.3),
                        Vec3::new(0.4, 0.0, 0.1),
                    ),
                    gt_delta: 0.0,
                    reference: false,
                },
            ],
        };
        let track = make_trajectory(TrajectoryKind::Arc, 3.0, 2.0, 10.0, 1.5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ds = simulate_rig(&default_scene(), &rig, &track, 3.0, &NoiseConfig::default(), &mut rng);
        (ds, rig)
    }

    #[test]
    fn epochs_are_bit_deterministic() {
        let (ds, rig) = tiny_dataset();
        let priors = rig.gt_calibration();
        let run = || {
            let mut tr = Trainer::new(tiny_setup(2, 7), &ds, &priors).unwrap();
            let r0 = tr.train_epoch(&ds, 0).unwrap();
            let r1 = tr.train_epoch(&ds, 1).unwrap();
            (r0.total, r0.losses, r1.total, r1.calib)
        };
        let a = run();
        let b = run();
        assert_eq!(a.0.to_bits(), b.0.to_bits(), "epoch-0 loss bit-identical");
        assert_eq!(a.1, b.1);
        assert_eq!(a.2.to_bits(), b.2.to_bits());
        assert_eq!(a.3, b.3, "calibration snapshots identical");
    }

    #[test]
    fn depth_loss_gated_for_first_epochs() {
        let (mut ds, rig) = tiny_dataset();
        // Graft a lidar stream onto the dataset so the depth path runs.
        let scan: Vec<(Vec3, f64)> =
            vec![(Vec3::new(1.0, 0.0, 0.0), 3.0), (Vec3::new(0.0, 1.0, 0.0), 4.0)];
        ds.sensors.push(crate::sim::SensorData {
            name: "lidar0".into(),
            kind: SensorKind::Lidar {
                rings: 1,
                azimuth_steps: 2,
                vfov_deg: 0.0,
                rate: 1.0,
                max_range: 60.0,
            },
            timestamps: vec![0.0, 1.0, 2.0],
            images: vec![],
            scans: vec![scan.clone(), scan.clone(), scan],
        });
        let mut priors = rig.gt_calibration();
        priors.sensors.push(SensorCalib::new(
            "lidar0",
            crate::sim::lidar_to_camera_rotation(),
            Vec3::new(0.0, -0.3, 0.0),
            0.0,
        ));

        let mut tr = Trainer::new(tiny_setup(4, 3), &ds, &priors).unwrap();
        let r0 = tr.train_epoch(&ds, 0).unwrap();
        let r1 = tr.train_epoch(&ds, 1).unwrap();
        let r2 = tr.train_epoch(&ds, 2).unwrap();
        // The part is still measured, but contributes 0 to the total while
        // gated.
        let w = LossWeights::default();
        let manual0 = w.lambda_c * r0.losses.color
            + w.lambda_ssim * r0.losses.ssim
            + w.lambda_ds * r0.losses.smooth;
        assert!((r0.total - manual0).abs() < 1e-12, "no depth term at epoch 0");
        let manual1 = w.lambda_c * r1.losses.color
            + w.lambda_ssim * r1.losses.ssim
            + w.lambda_ds * r1.losses.smooth;
        assert!((r1.total - manual1).abs() < 1e-12, "no depth term at epoch 1");
        let manual2 = manual_total(&r2.losses, &w);
        assert!((r2.total - manual2).abs() < 1e-12, "depth active from epoch 2");
    }

    fn manual_total(p: &LossParts, w: &LossWeights) -> f64 {
        w.lambda_c * p.color + w.lambda_d * p.depth + w.lambda_ssim * p.ssim + w.lambda_ds * p.smooth
    }

    #[test]
    fn reference_sensor_is_bit_identical_after_calibrate() {
        let (ds, rig) = tiny_dataset();
        let priors = rig.gt_calibration();
        let (result, _) = calibrate(&ds, &priors, tiny_setup(2, 5)).unwrap();
        let ref_before = &priors.sensors[0];
        let ref_after = &result.final_calib.sensors[0];
        assert_eq!(ref_before, ref_after);
        for r in &result.history {
            assert_eq!(&r.calib.sensors[0], ref_before);
        }
        assert_eq!(result.history.len(), 2);
    }

    #[test]
    fn photometric_only_field_fitting_descends() {
        let (ds, rig) = tiny_dataset();
        let priors = rig.gt_calibration();
        let mut setup = tiny_setup(5, 11);
        setup.weights = LossWeights { lambda_c: 1.0, lambda_d: 0.0, lambda_ssim: 0.0, lambda_ds: 0.0 };
        setup.patches.patches_per_image = 0;
        // Enough field capacity and optimizer steps that five epochs stay in
        // the descent regime.
        setup.field.levels = 6;
        setup.field.max_resolution = 128;
        setup.schedule.lr_network = 1e-2;
        setup.schedule.rays_per_frame = 512;
        setup.schedule.batch_rays = 256;
        setup.options = TrainOptions { freeze_spatial: true, freeze_temporal: true };
        let mut tr = Trainer::new(setup, &ds, &priors).unwrap();
        let mut last = f64::INFINITY;
        for epoch in 0..5 {
            let r = tr.train_epoch(&ds, epoch).unwrap();
            assert!(
                r.losses.color < last,
                "photometric loss strictly decreases: epoch {epoch}: {} vs {last}",
                r.losses.color
            );
            last = r.losses.color;
            // Calibration must not have moved (raw optimizer parameters).
            assert_eq!(r.calib.pack(), priors.pack());
        }
    }
}
