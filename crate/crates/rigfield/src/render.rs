//! Ray generation for cameras and LiDAR, stratified sampling, volumetric
//! compositing, and batch rendering through the scene field with the full
//! backward chain: loss adjoints propagate to field parameters and to ray
//! origins/directions (and from there to calibration parameters).
//!
//! Batches are partitioned into fixed-size chunks; per-chunk gradients merge
//! in chunk order so results are reproducible bit-for-bit given a seed.

use crate::exec::{chunked_map, chunked_map_seq, RAY_CHUNK};
use crate::field::{FieldModel, FieldScratch};
use crate::geometry::{Mat3, SE3Pose, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RenderError {
    #[error("pixel ({0}, {1}) outside image bounds")]
    PixelOutOfBounds(u32, u32),
    #[error("LiDAR direction norm {0} is not unit")]
    NonUnitDirection(f64),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct PinholeIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl PinholeIntrinsics {
    /// Square-pixel intrinsics from a horizontal field of view.
    pub fn from_hfov(width: u32, height: u32, hfov_deg: f64) -> PinholeIntrinsics {
        let f = width as f64 / 2.0 / (hfov_deg.to_radians() / 2.0).tan();
        PinholeIntrinsics {
            fx: f,
            fy: f,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }
}

/// World-frame ray with a unit direction and sampling range in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub near: f64,
    pub far: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderResult {
    pub color: Vec3,
    pub depth: f64,
    pub opacity: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RenderConfig {
    pub near: f64,
    pub far: f64,
    pub n_samples: usize,
    /// One round of inverse-CDF importance sampling with n/2 extra samples.
    pub importance: bool,
    pub background: [f64; 3],
    /// Stop marching once transmittance falls below this (0 disables; the
    /// truncation error is bounded by the threshold itself).
    pub early_stop_transmittance: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            near: 0.1,
            far: 60.0,
            n_samples: 96,
            importance: false,
            background: [1.0, 1.0, 1.0],
            early_stop_transmittance: 1e-7,
        }
    }
}

impl RenderConfig {
    pub fn background_color(&self) -> Vec3 {
        Vec3::from_array(self.background)
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.near >= 0.0 && self.near < self.far) {
            return Err("render: need 0 <= near < far".into());
        }
        if self.n_samples < 2 {
            return Err("render: n_samples must be at least 2".into());
        }
        Ok(())
    }
}

/// How per-ray sample streams are keyed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SampleKey {
    /// Keyed by ray content: identical rays get identical samples (pure).
    Content,
    /// Keyed by batch index: stable under small ray perturbations, used by
    /// finite-difference checks.
    Indexed,
}

/// Adjoint of a loss with respect to one rendered ray.
#[derive(Debug, Clone, Copy, Default)]
pub struct RayAdjoint {
    pub d_color: Vec3,
    pub d_depth: f64,
}

/// Gradient of a loss with respect to one ray's origin and direction.
#[derive(Debug, Clone, Copy, Default)]
pub struct RayGrad {
    pub d_origin: Vec3,
    pub d_direction: Vec3,
}

/// Accumulated gradient with respect to a world pose (rotation matrix plus
/// translation), produced by the ray-generation backward passes.
#[derive(Debug, Clone, Copy)]
pub struct PoseGrad {
    pub d_rot: Mat3,
    pub d_trans: Vec3,
}

impl PoseGrad {
    pub fn zero() -> PoseGrad {
        PoseGrad { d_rot: Mat3::zero(), d_trans: Vec3::ZERO }
    }

    pub fn add(&mut self, o: &PoseGrad) {
        self.d_rot = self.d_rot.add_mat(&o.d_rot);
        self.d_trans += o.d_trans;
    }
}

// ---------------------------------------------------------------------------
// Ray generation

/// Camera-frame direction (unnormalized) of a pixel center: x right,
/// y down, z forward, pixel-center convention (+0.5).
pub fn pixel_dir_cam(intr: &PinholeIntrinsics, u: u32, v: u32) -> Vec3 {
    Vec3::new(
        (u as f64 + 0.5 - intr.cx) / intr.fx,
        (v as f64 + 0.5 - intr.cy) / intr.fy,
        1.0,
    )
}

/// World rays through the given pixel centers.
pub fn camera_rays(
    intr: &PinholeIntrinsics,
    pose: &SE3Pose,
    pixels: &[(u32, u32)],
    near: f64,
    far: f64,
) -> Result<Vec<Ray>, RenderError> {
    let r = pose.rotation_matrix();
    pixels
        .iter()
        .map(|&(u, v)| {
            if u >= intr.width || v >= intr.height {
                return Err(RenderError::PixelOutOfBounds(u, v));
            }
            let dir = r.mul_vec(pixel_dir_cam(intr, u, v)).normalized();
            Ok(Ray { origin: pose.translation, direction: dir, near, far })
        })
        .collect()
}

/// Maps per-ray gradients back to the camera's world pose, including the
/// normalization Jacobian of the ray direction.
pub fn camera_rays_backward(
    intr: &PinholeIntrinsics,
    pose: &SE3Pose,
    pixels: &[(u32, u32)],
    grads: &[RayGrad],
) -> PoseGrad {
    let r = pose.rotation_matrix();
    let mut out = PoseGrad::zero();
    for (&(u, v), g) in pixels.iter().zip(grads) {
        let v_cam = pixel_dir_cam(intr, u, v);
        let w = r.mul_vec(v_cam);
        let n = w.norm();
        let d = w / n;
        // d = w / |w|  =>  dL/dw = (dL/dd - d (d . dL/dd)) / |w|
        let d_w = (g.d_direction - d * d.dot(g.d_direction)) / n;
        out.d_rot = out.d_rot.add_mat(&Mat3::outer(d_w, v_cam));
        out.d_trans += g.d_origin;
    }
    out
}

/// World rays for LiDAR beams given unit directions in the sensor frame.
pub fn lidar_rays(
    pose: &SE3Pose,
    dirs_sensor: &[Vec3],
    near: f64,
    far: f64,
) -> Result<Vec<Ray>, RenderError> {
    let r = pose.rotation_matrix();
    dirs_sensor
        .iter()
        .map(|&u| {
            let n = u.norm();
            if (n - 1.0).abs() > 1e-6 {
                return Err(RenderError::NonUnitDirection(n));
            }
            Ok(Ray { origin: pose.translation, direction: r.mul_vec(u), near, far })
        })
        .collect()
}

/// Rotations preserve norm, so no normalization Jacobian here.
pub fn lidar_rays_backward(dirs_sensor: &[Vec3], grads: &[RayGrad]) -> PoseGrad {
    let mut out = PoseGrad::zero();
    for (&u, g) in dirs_sensor.iter().zip(grads) {
        out.d_rot = out.d_rot.add_mat(&Mat3::outer(g.d_direction, u));
        out.d_trans += g.d_origin;
    }
    out
}

// ---------------------------------------------------------------------------
// Sampling

/// One uniform draw per equal bin of `[near, far]`; strictly increasing.
pub fn stratified_samples(ray: &Ray, n: usize, rng: &mut impl Rng) -> Vec<f64> {
    debug_assert!(n >= 2);
    let fracs: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
    stratified_from_fractions(ray.near, ray.far, &fracs)
}

/// Deterministic core of [`stratified_samples`]: bin `i` gets
/// `near + (i + frac_i) * width`.
pub fn stratified_from_fractions(near: f64, far: f64, fracs: &[f64]) -> Vec<f64> {
    let n = fracs.len();
    let w = (far - near) / n as f64;
    fracs
        .iter()
        .enumerate()
        .map(|(i, f)| near + (i as f64 + f) * w)
        .collect()
}

// ---------------------------------------------------------------------------
// Compositing

fn deltas(ts: &[f64], far: f64) -> Vec<f64> {
    let n = ts.len();
    (0..n)
        .map(|k| if k + 1 < n { ts[k + 1] - ts[k] } else { far - ts[k] })
        .collect()
}

/// Alpha compositing: `alpha_k = 1 - exp(-sigma_k delta_k)`,
/// `w_k = T_k alpha_k`. Residual transmittance falls to the background color
/// and to `far` in the expected depth.
pub fn composite_with_weights(
    sigmas: &[f64],
    colors: &[Vec3],
    ts: &[f64],
    far: f64,
    background: Vec3,
) -> (RenderResult, Vec<f64>) {
    debug_assert_eq!(sigmas.len(), colors.len());
    debug_assert_eq!(sigmas.len(), ts.len());
    let ds = deltas(ts, far);
    let mut transmittance = 1.0;
    let mut color = Vec3::ZERO;
    let mut depth = 0.0;
    let mut opacity = 0.0;
    let mut weights = Vec::with_capacity(sigmas.len());
    for k in 0..sigmas.len() {
        let alpha = 1.0 - (-sigmas[k] * ds[k]).exp();
        let w = transmittance * alpha;
        color += colors[k] * w;
        depth += ts[k] * w;
        opacity += w;
        weights.push(w);
        transmittance *= 1.0 - alpha;
    }
    let residual = 1.0 - opacity;
    color += background * residual;
    depth += far * residual;
    (RenderResult { color, depth, opacity }, weights)
}

pub fn composite(
    sigmas: &[f64],
    colors: &[Vec3],
    ts: &[f64],
    far: f64,
    background: Vec3,
) -> RenderResult {
    composite_with_weights(sigmas, colors, ts, far, background).0
}

/// Exact adjoint of [`composite`] for the sample densities and colors,
/// written without divisions by `1 - alpha` so saturated samples stay
/// stable: `dL/dsigma_k = delta_k (a_k T_k (1 - alpha_k) - sum_{m>k} a_m w_m)`.
pub fn composite_backward(
    sigmas: &[f64],
    colors: &[Vec3],
    ts: &[f64],
    far: f64,
    background: Vec3,
    adj: &RayAdjoint,
) -> (Vec<f64>, Vec<Vec3>) {
    let n = sigmas.len();
    let ds = deltas(ts, far);
    let mut trans = Vec::with_capacity(n);
    let mut alphas = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    let mut t_cur = 1.0;
    for k in 0..n {
        let alpha = 1.0 - (-sigmas[k] * ds[k]).exp();
        trans.push(t_cur);
        alphas.push(alpha);
        weights.push(t_cur * alpha);
        t_cur *= 1.0 - alpha;
    }
    // a_k = dL/dw_k including the residual coupling through (1 - sum w).
    let res_term = adj.d_color.dot(background) + adj.d_depth * far;
    let a: Vec<f64> = (0..n)
        .map(|k| adj.d_color.dot(colors[k]) + adj.d_depth * ts[k] - res_term)
        .collect();

    let mut d_sigmas = vec![0.0; n];
    let mut d_colors = vec![Vec3::ZERO; n];
    let mut suffix = 0.0; // sum over m > k of a_m w_m
    for k in (0..n).rev() {
        d_sigmas[k] = ds[k] * (a[k] * trans[k] * (1.0 - alphas[k]) - suffix);
        d_colors[k] = adj.d_color * weights[k];
        suffix += a[k] * weights[k];
    }
    (d_sigmas, d_colors)
}

// ---------------------------------------------------------------------------
// Batch rendering through the field

fn splitmix64(mut h: u64) -> u64 {
    h = h.wrapping_add(0x9e3779b97f4a7c15);
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d049bb133111eb);
    h ^ (h >> 31)
}

fn ray_stream(seed: u64, key: SampleKey, index: usize, ray: &Ray) -> ChaCha8Rng {
    let mut h = splitmix64(seed);
    match key {
        SampleKey::Indexed => {
            h = splitmix64(h ^ index as u64);
        }
        SampleKey::Content => {
            for bits in [
                ray.origin.x.to_bits(),
                ray.origin.y.to_bits(),
                ray.origin.z.to_bits(),
                ray.direction.x.to_bits(),
                ray.direction.y.to_bits(),
                ray.direction.z.to_bits(),
                ray.near.to_bits(),
                ray.far.to_bits(),
            ] {
                h = splitmix64(h ^ bits);
            }
        }
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Per-sample record of a traced ray.
struct Traced {
    ts: Vec<f64>,
    sigmas: Vec<f64>,
    colors: Vec<Vec3>,
    evaluated: Vec<bool>,
}

/// Draw extra samples proportional to first-pass weights (inverse CDF over
/// the piecewise-constant bin histogram).
fn importance_resample(
    ts: &[f64],
    weights: &[f64],
    near: f64,
    far: f64,
    count: usize,
    rng: &mut impl Rng,
) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    let mut extra = Vec::with_capacity(count);
    if total <= 1e-12 || ts.is_empty() {
        for _ in 0..count {
            extra.push(rng.gen_range(near..far));
        }
        return extra;
    }
    for _ in 0..count {
        let mut u = rng.gen::<f64>() * total;
        let mut k = 0;
        while k + 1 < weights.len() && u > weights[k] {
            u -= weights[k];
            k += 1;
        }
        let lo = ts[k];
        let hi = if k + 1 < ts.len() { ts[k + 1] } else { far };
        let frac = if weights[k] > 0.0 { (u / weights[k]).clamp(0.0, 1.0) } else { 0.5 };
        extra.push(lo + frac * (hi - lo));
    }
    extra
}

/// Field evaluation along fixed sample positions with optional early stop.
/// Out-of-bounds samples contribute zero density and are not evaluated.
fn eval_samples(
    model: &FieldModel,
    ray: &Ray,
    ts: &[f64],
    scratch: &mut FieldScratch,
    early_stop: f64,
) -> (Vec<f64>, Vec<Vec3>, Vec<bool>) {
    let n = ts.len();
    let mut sigmas = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    let mut evaluated = Vec::with_capacity(n);
    let mut transmittance = 1.0f64;
    for (k, &t) in ts.iter().enumerate() {
        let pos = ray.origin + ray.direction * t;
        if model.grid.contains(pos) {
            let (sigma, rgb) = model
                .eval(pos, ray.direction, scratch)
                .expect("in-bounds eval cannot fail");
            sigmas.push(sigma);
            colors.push(rgb);
            evaluated.push(true);
            if early_stop > 0.0 {
                let delta = if k + 1 < n { ts[k + 1] - t } else { ray.far - t };
                transmittance *= (-sigma * delta).exp();
                if transmittance < early_stop {
                    break;
                }
            }
        } else {
            sigmas.push(0.0);
            colors.push(Vec3::ZERO);
            evaluated.push(false);
        }
    }
    (sigmas, colors, evaluated)
}

/// Evaluate the field along a ray: stratified samples, optional importance
/// round, early termination.
fn trace_ray(
    model: &FieldModel,
    ray: &Ray,
    cfg: &RenderConfig,
    rng: &mut ChaCha8Rng,
    scratch: &mut FieldScratch,
) -> Traced {
    let mut ts = stratified_samples(ray, cfg.n_samples, rng);
    if cfg.importance {
        let (sigmas, colors, _) = eval_samples(model, ray, &ts, scratch, 0.0);
        let (_, weights) =
            composite_with_weights(&sigmas, &colors, &ts, ray.far, cfg.background_color());
        let extra = importance_resample(&ts, &weights, ray.near, ray.far, cfg.n_samples / 2, rng);
        ts.extend(extra);
        ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ts.dedup();
    }
    let (sigmas, colors, evaluated) =
        eval_samples(model, ray, &ts, scratch, cfg.early_stop_transmittance);
    let n = sigmas.len();
    ts.truncate(n);
    Traced { ts, sigmas, colors, evaluated }
}

fn render_one(
    model: &FieldModel,
    ray: &Ray,
    cfg: &RenderConfig,
    seed: u64,
    key: SampleKey,
    index: usize,
    scratch: &mut FieldScratch,
) -> RenderResult {
    let mut rng = ray_stream(seed, key, index, ray);
    let tr = trace_ray(model, ray, cfg, &mut rng, scratch);
    composite(&tr.sigmas, &tr.colors, &tr.ts, ray.far, cfg.background_color())
}

/// Render a batch of rays (parallel when the `parallel` feature is on).
/// Sampling is keyed by ray content and `seed`, so identical rays render
/// identically and reruns are bit-identical.
pub fn render_batch(
    model: &FieldModel,
    rays: &[Ray],
    cfg: &RenderConfig,
    seed: u64,
) -> Vec<RenderResult> {
    render_batch_with_key(model, rays, cfg, seed, SampleKey::Content)
}

pub fn render_batch_with_key(
    model: &FieldModel,
    rays: &[Ray],
    cfg: &RenderConfig,
    seed: u64,
    key: SampleKey,
) -> Vec<RenderResult> {
    let chunks = chunked_map(rays, RAY_CHUNK, |ci, chunk| {
        let mut scratch = model.new_scratch();
        chunk
            .iter()
            .enumerate()
            .map(|(i, ray)| render_one(model, ray, cfg, seed, key, ci * RAY_CHUNK + i, &mut scratch))
            .collect::<Vec<_>>()
    });
    chunks.into_iter().flatten().collect()
}

/// Sequential twin of [`render_batch`] (benchmark baseline).
pub fn render_batch_seq(
    model: &FieldModel,
    rays: &[Ray],
    cfg: &RenderConfig,
    seed: u64,
) -> Vec<RenderResult> {
    let chunks = chunked_map_seq(rays, RAY_CHUNK, |ci, chunk| {
        let mut scratch = model.new_scratch();
        chunk
            .iter()
            .enumerate()
            .map(|(i, ray)| {
                render_one(model, ray, cfg, seed, SampleKey::Content, ci * RAY_CHUNK + i, &mut scratch)
            })
            .collect::<Vec<_>>()
    });
    chunks.into_iter().flatten().collect()
}

/// Backward pass for a rendered batch: re-traces each ray with the same
/// sample stream, pushes the per-ray adjoints through compositing and the
/// field, and accumulates field-parameter gradients (merged in chunk order)
/// plus per-ray origin/direction gradients.
pub fn render_batch_backward(
    model: &FieldModel,
    rays: &[Ray],
    cfg: &RenderConfig,
    seed: u64,
    key: SampleKey,
    adjoints: &[RayAdjoint],
) -> (Vec<f64>, Vec<RayGrad>) {
    debug_assert_eq!(rays.len(), adjoints.len());
    let n_params = model.param_len();
    let chunks = chunked_map(rays, RAY_CHUNK, |ci, chunk| {
        let mut scratch = model.new_scratch();
        let mut d_params = vec![0.0; n_params];
        let mut ray_grads = Vec::with_capacity(chunk.len());
        for (i, ray) in chunk.iter().enumerate() {
            let index = ci * RAY_CHUNK + i;
            let adj = &adjoints[index];
            let mut rng = ray_stream(seed, key, index, ray);
            let tr = trace_ray(model, ray, cfg, &mut rng, &mut scratch);
            let (d_sigmas, d_colors) = composite_backward(
                &tr.sigmas,
                &tr.colors,
                &tr.ts,
                ray.far,
                cfg.background_color(),
                adj,
            );
            let mut g = RayGrad::default();
            for k in 0..tr.ts.len() {
                if !tr.evaluated[k] {
                    continue;
                }
                if d_sigmas[k] == 0.0 && d_colors[k] == Vec3::ZERO {
                    continue;
                }
                let pos = ray.origin + ray.direction * tr.ts[k];
                // Recompute activations for this sample, then run the adjoint.
                model
                    .eval(pos, ray.direction, &mut scratch)
                    .expect("in-bounds eval cannot fail");
                let (d_x, d_dir) = model.eval_backward(
                    pos,
                    ray.direction,
                    &mut scratch,
                    d_sigmas[k],
                    d_colors[k],
                    &mut d_params,
                );
                g.d_origin += d_x;
                g.d_direction += d_x * tr.ts[k] + d_dir;
            }
            ray_grads.push(g);
        }
        (d_params, ray_grads)
    });

    let mut d_params = vec![0.0; n_params];
    let mut ray_grads = Vec::with_capacity(rays.len());
    for (chunk_grad, chunk_rays) in chunks {
        for (dst, src) in d_params.iter_mut().zip(&chunk_grad) {
            *dst += src;
        }
        ray_grads.extend(chunk_rays);
    }
    (d_params, ray_grads)
}

/// Render a full camera image; returns row-major colors and depths.
pub fn render_image(
    model: &FieldModel,
    intr: &PinholeIntrinsics,
    pose: &SE3Pose,
    cfg: &RenderConfig,
    seed: u64,
) -> Result<(Vec<Vec3>, Vec<f64>), RenderError> {
    let pixels: Vec<(u32, u32)> = (0..intr.height)
        .flat_map(|v| (0..intr.width).map(move |u| (u, v)))
        .collect();
    let rays = camera_rays(intr, pose, &pixels, cfg.near, cfg.far)?;
    let results = render_batch(model, &rays, cfg, seed);
    Ok((
        results.iter().map(|r| r.color).collect(),
        results.iter().map(|r| r.depth).collect(),
    ))
}
