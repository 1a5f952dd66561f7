//! The four training losses with exact adjoints: photometric L2, masked
//! depth L2, patch DSSIM and patch depth smoothness, plus their weighted sum.

use crate::geometry::Vec3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// SSIM stabilizers for dynamic range 1: C1 = 0.01^2, C2 = 0.03^2.
const SSIM_C1: f64 = 1e-4;
const SSIM_C2: f64 = 9e-4;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("pred/gt length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("patch {0}x{1} below the 2x2 minimum")]
    PatchTooSmall(usize, usize),
    #[error("non-finite loss value {0} (optimization diverged)")]
    NonFiniteLoss(f64),
}

/// Weight factors of the total loss.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub lambda_d: f64,
    pub lambda_ssim: f64,
    pub lambda_ds: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_c: 1.0, lambda_d: 20.0, lambda_ssim: 0.1, lambda_ds: 1e-4 }
    }
}

/// Square patches sampled per image per epoch (origins drawn seeded so runs
/// reproduce).
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct PatchSpec {
    pub size: u32,
    pub patches_per_image: u32,
}

impl Default for PatchSpec {
    fn default() -> Self {
        PatchSpec { size: 8, patches_per_image: 4 }
    }
}

/// Unweighted loss terms of one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub color: f64,
    pub depth: f64,
    pub ssim: f64,
    pub smooth: f64,
}

/// An RGB patch in row-major order.
#[derive(Debug, Clone)]
pub struct Patch {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<Vec3>,
}

impl Patch {
    pub fn new(width: usize, height: usize, pixels: Vec<Vec3>) -> Patch {
        debug_assert_eq!(pixels.len(), width * height);
        Patch { width, height, pixels }
    }
}

/// Mean over rays of the squared RGB error; adjoint is `2 (pred - gt) / N`.
pub fn color_loss(pred: &[Vec3], gt: &[Vec3]) -> Result<(f64, Vec<Vec3>), LossError> {
    if pred.len() != gt.len() {
        return Err(LossError::LengthMismatch(pred.len(), gt.len()));
    }
    if pred.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let mut adj = Vec::with_capacity(pred.len());
    for (p, g) in pred.iter().zip(gt) {
        let e = *p - *g;
        loss += e.norm_squared();
        adj.push(e * (2.0 / n));
    }
    Ok((loss / n, adj))
}

/// Mean squared depth error over rays with a valid return; masked-out rays
/// get a zero adjoint.
pub fn depth_loss(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<(f64, Vec<f64>), LossError> {
    if pred.len() != gt.len() || pred.len() != mask.len() {
        return Err(LossError::LengthMismatch(pred.len(), gt.len()));
    }
    let n_valid = mask.iter().filter(|m| **m).count();
    if n_valid == 0 {
        return Err(LossError::EmptyBatch);
    }
    let n = n_valid as f64;
    let mut loss = 0.0;
    let mut adj = vec![0.0; pred.len()];
    for i in 0..pred.len() {
        if mask[i] {
            let e = pred[i] - gt[i];
            loss += e * e;
            adj[i] = 2.0 * e / n;
        }
    }
    Ok((loss / n, adj))
}

fn channel(v: &Vec3, c: usize) -> f64 {
    match c {
        0 => v.x,
        1 => v.y,
        _ => v.z,
    }
}

fn channel_mut(v: &mut Vec3, c: usize) -> &mut f64 {
    match c {
        0 => &mut v.x,
        1 => &mut v.y,
        _ => &mut v.z,
    }
}

/// Structural dissimilarity `(1 - SSIM) / 2` with a uniform window spanning
/// the whole patch, population statistics, channels averaged. Returns the
/// adjoint with respect to the predicted pixels.
pub fn dssim_loss(pred: &Patch, gt: &Patch) -> Result<(f64, Vec<Vec3>), LossError> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(LossError::LengthMismatch(pred.pixels.len(), gt.pixels.len()));
    }
    if pred.width < 2 || pred.height < 2 {
        return Err(LossError::PatchTooSmall(pred.width, pred.height));
    }
    let n = (pred.width * pred.height) as f64;
    let mut ssim_sum = 0.0;
    let mut adj = vec![Vec3::ZERO; pred.pixels.len()];

    for c in 0..3 {
        let xs: Vec<f64> = pred.pixels.iter().map(|p| channel(p, c)).collect();
        let ys: Vec<f64> = gt.pixels.iter().map(|p| channel(p, c)).collect();
        let mu_x = xs.iter().sum::<f64>() / n;
        let mu_y = ys.iter().sum::<f64>() / n;
        let var_x = xs.iter().map(|x| (x - mu_x) * (x - mu_x)).sum::<f64>() / n;
        let var_y = ys.iter().map(|y| (y - mu_y) * (y - mu_y)).sum::<f64>() / n;
        let cov = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| (x - mu_x) * (y - mu_y))
            .sum::<f64>()
            / n;

        let a1 = 2.0 * mu_x * mu_y + SSIM_C1;
        let a2 = 2.0 * cov + SSIM_C2;
        let b1 = mu_x * mu_x + mu_y * mu_y + SSIM_C1;
        let b2 = var_x + var_y + SSIM_C2;
        let s = (a1 * a2) / (b1 * b2);
        ssim_sum += s;

        // dS/dx_i, then dDSSIM/dx_i = -dS/dx_i / (2 * channels).
        for (i, (x, y)) in xs.iter().zip(&ys).enumerate() {
            let d_a1 = 2.0 * mu_y / n;
            let d_a2 = 2.0 * (y - mu_y) / n;
            let d_b1 = 2.0 * mu_x / n;
            let d_b2 = 2.0 * (x - mu_x) / n;
            let ds = (d_a1 * a2 + a1 * d_a2) / (b1 * b2) - s * (d_b1 / b1 + d_b2 / b2);
            *channel_mut(&mut adj[i], c) = -ds / (2.0 * 3.0);
        }
    }
    let dssim = (1.0 - ssim_sum / 3.0) / 2.0;
    Ok((dssim, adj))
}

/// Sum over the patch of squared horizontal and vertical neighbor depth
/// differences.
pub fn depth_smoothness_loss(
    depth: &[f64],
    width: usize,
    height: usize,
) -> Result<(f64, Vec<f64>), LossError> {
    if depth.len() != width * height {
        return Err(LossError::LengthMismatch(depth.len(), width * height));
    }
    if width < 2 || height < 2 {
        return Err(LossError::PatchTooSmall(width, height));
    }
    let mut loss = 0.0;
    let mut adj = vec![0.0; depth.len()];
    for r in 0..height {
        for c in 0..width {
            let i = r * width + c;
            if c + 1 < width {
                let e = depth[i + 1] - depth[i];
                loss += e * e;
                adj[i + 1] += 2.0 * e;
                adj[i] -= 2.0 * e;
            }
            if r + 1 < height {
                let e = depth[i + width] - depth[i];
                loss += e * e;
                adj[i + width] += 2.0 * e;
                adj[i] -= 2.0 * e;
            }
        }
    }
    Ok((loss, adj))
}

/// Weighted sum of the four loss terms; rejects non-finite values so a
/// diverged epoch aborts with diagnostics instead of poisoning parameters.
pub fn total_loss(parts: &LossParts, weights: &LossWeights) -> Result<f64, LossError> {
    let total = weights.lambda_c * parts.color
        + weights.lambda_d * parts.depth
        + weights.lambda_ssim * parts.ssim
        + weights.lambda_ds * parts.smooth;
    if !total.is_finite() {
        return Err(LossError::NonFiniteLoss(total));
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_patch(rng: &mut impl Rng, w: usize, h: usize) -> Patch {
        Patch::new(
            w,
            h,
            (0..w * h).map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen())).collect(),
        )
    }

    #[test]
    fn color_loss_cases() {
        let a = vec![Vec3::new(0.2, 0.4, 0.6)];
        let (l, adj) = color_loss(&a, &a).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(adj[0], Vec3::ZERO);

        // +0.1 on one channel of one ray, N = 1 -> 0.01.
        let b = vec![Vec3::new(0.3, 0.4, 0.6)];
        let (l, _) = color_loss(&b, &a).unwrap();
        assert!((l - 0.01).abs() < 1e-15);

        assert_eq!(color_loss(&[], &[]).unwrap_err(), LossError::EmptyBatch);
    }

    #[test]
    fn color_adjoint_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt: Vec<Vec3> = (0..5).map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen())).collect();
        let pred: Vec<Vec3> = (0..5).map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen())).collect();
        let (_, adj) = color_loss(&pred, &gt).unwrap();
        let h = 1e-7;
        for i in 0..pred.len() {
            let mut pp = pred.clone();
            let mut pm = pred.clone();
            pp[i].y += h;
            pm[i].y -= h;
            let fd = (color_loss(&pp, &gt).unwrap().0 - color_loss(&pm, &gt).unwrap().0) / (2.0 * h);
            assert!((fd - adj[i].y).abs() / fd.abs().max(1e-9) < 1e-6, "ray {i}");
        }
    }

    #[test]
    fn depth_loss_cases() {
        let gt = vec![2.0, 3.0, 4.0];
        let mask = vec![true, true, true];
        let (l, _) = depth_loss(&gt, &gt, &mask).unwrap();
        assert_eq!(l, 0.0);

        // One valid ray with 0.5 m error -> 0.25.
        let (l, adj) = depth_loss(&[2.5], &[2.0], &[true]).unwrap();
        assert!((l - 0.25).abs() < 1e-15);
        assert!((adj[0] - 1.0).abs() < 1e-15);

        // All rays masked out.
        assert_eq!(
            depth_loss(&gt, &gt, &[false, false, false]).unwrap_err(),
            LossError::EmptyBatch
        );

        // Masked rays do not contribute.
        let (l, adj) = depth_loss(&[2.5, 99.0], &[2.0, 1.0], &[true, false]).unwrap();
        assert!((l - 0.25).abs() < 1e-15);
        assert_eq!(adj[1], 0.0);
    }

    #[test]
    fn dssim_identical_patches() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_patch(&mut rng, 8, 8);
        let (l, adj) = dssim_loss(&p, &p).unwrap();
        assert!(l.abs() < 1e-12, "SSIM of identical patches is 1");
        // Perfect prediction sits at the loss minimum.
        let g: f64 = adj.iter().map(|a| a.norm()).sum();
        assert!(g < 1e-9, "gradient at the minimum: {g}");
    }

    #[test]
    fn dssim_constant_contrast_case() {
        // Constant 0 vs constant 1: SSIM = C1 / (1 + C1).
        let zeros = Patch::new(4, 4, vec![Vec3::ZERO; 16]);
        let ones = Patch::new(4, 4, vec![Vec3::new(1.0, 1.0, 1.0); 16]);
        let (l, _) = dssim_loss(&zeros, &ones).unwrap();
        let ssim = SSIM_C1 / (1.0 + SSIM_C1);
        let expect = (1.0 - ssim) / 2.0;
        assert!((l - expect).abs() < 1e-12, "{l} vs {expect}");
        assert!((l - 0.49995).abs() < 1e-7);
    }

    #[test]
    fn dssim_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let a = random_patch(&mut rng, 6, 5);
            let b = random_patch(&mut rng, 6, 5);
            let (lab, _) = dssim_loss(&a, &b).unwrap();
            let (lba, _) = dssim_loss(&b, &a).unwrap();
            assert!((lab - lba).abs() < 1e-12);
        }
    }

    #[test]
    fn dssim_rejects_tiny_patches() {
        let p = Patch::new(1, 4, vec![Vec3::ZERO; 4]);
        assert_eq!(dssim_loss(&p, &p).unwrap_err(), LossError::PatchTooSmall(1, 4));
    }

    #[test]
    fn dssim_adjoint_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gt = random_patch(&mut rng, 5, 4);
        let pred = random_patch(&mut rng, 5, 4);
        let (_, adj) = dssim_loss(&pred, &gt).unwrap();
        let h = 1e-6;
        for i in [0usize, 7, 13, 19] {
            for c in 0..3 {
                let mut pp = pred.clone();
                let mut pm = pred.clone();
                *channel_mut(&mut pp.pixels[i], c) += h;
                *channel_mut(&mut pm.pixels[i], c) -= h;
                let fd =
                    (dssim_loss(&pp, &gt).unwrap().0 - dssim_loss(&pm, &gt).unwrap().0) / (2.0 * h);
                let an = channel(&adj[i], c);
                assert!(
                    (fd - an).abs() / fd.abs().max(1e-7) < 1e-4,
                    "pixel {i} channel {c}: {an} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn smoothness_cases() {
        // Constant patch.
        let (l, adj) = depth_smoothness_loss(&[3.0; 9], 3, 3).unwrap();
        assert_eq!(l, 0.0);
        assert!(adj.iter().all(|a| *a == 0.0));

        // 2x2 patch with both rows (1.0, 2.0): two horizontal unit steps.
        let (l, _) = depth_smoothness_loss(&[1.0, 2.0, 1.0, 2.0], 2, 2).unwrap();
        assert!((l - 2.0).abs() < 1e-15);

        // Linear ramp: every horizontal edge steps by `step`.
        let (w, h, step) = (5usize, 4usize, 0.25f64);
        let ramp: Vec<f64> = (0..w * h).map(|i| (i % w) as f64 * step).collect();
        let (l, _) = depth_smoothness_loss(&ramp, w, h).unwrap();
        let edges = (w - 1) * h;
        assert!((l - edges as f64 * step * step).abs() < 1e-12);

        assert_eq!(
            depth_smoothness_loss(&[1.0, 2.0], 2, 1).unwrap_err(),
            LossError::PatchTooSmall(2, 1)
        );
    }

    #[test]
    fn smoothness_adjoint_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let depth: Vec<f64> = (0..12).map(|_| rng.gen_range(1.0..5.0)).collect();
        let (_, adj) = depth_smoothness_loss(&depth, 4, 3).unwrap();
        let h = 1e-6;
        for i in 0..depth.len() {
            let mut dp = depth.clone();
            let mut dm = depth.clone();
            dp[i] += h;
            dm[i] -= h;
            let fd = (depth_smoothness_loss(&dp, 4, 3).unwrap().0
                - depth_smoothness_loss(&dm, 4, 3).unwrap().0)
                / (2.0 * h);
            assert!((fd - adj[i]).abs() < 1e-6 * (1.0 + fd.abs()), "cell {i}");
        }
    }

    #[test]
    fn total_loss_cases() {
        let w = LossWeights::default();
        assert_eq!(w.lambda_c, 1.0);
        assert_eq!(w.lambda_d, 20.0);
        assert_eq!(w.lambda_ssim, 0.1);
        assert_eq!(w.lambda_ds, 1e-4);

        let zero = LossParts::default();
        assert_eq!(total_loss(&zero, &w).unwrap(), 0.0);

        let parts = LossParts { color: 0.5, depth: 0.25, ssim: 0.1, smooth: 2.0 };
        let t = total_loss(&parts, &w).unwrap();
        assert!((t - (0.5 + 20.0 * 0.25 + 0.1 * 0.1 + 1e-4 * 2.0)).abs() < 1e-15);

        // lambda_d = 0 reproduces photometric-only training.
        let photo_only = LossWeights { lambda_d: 0.0, lambda_ssim: 0.0, lambda_ds: 0.0, ..w };
        assert!((total_loss(&parts, &photo_only).unwrap() - 0.5).abs() < 1e-15);

        let bad = LossParts { color: f64::NAN, ..parts };
        assert!(matches!(total_loss(&bad, &w), Err(LossError::NonFiniteLoss(_))));
    }
}
