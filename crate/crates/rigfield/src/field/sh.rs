//! Real spherical-harmonics basis for direction encoding, degrees 0 to 2,
//! with the exact polynomial adjoint. The basis is treated as a polynomial
//! in the raw (x, y, z) components so finite-difference probes that leave
//! the unit sphere still match the analytic derivative.

use crate::geometry::Vec3;

pub const MAX_DEGREE: usize = 2;

/// Number of basis values for `degree`: (degree + 1)^2.
pub fn basis_len(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

const C0: f64 = 0.282_094_791_773_878_14;
const C1: f64 = 0.488_602_511_902_919_92;
const C2_XY: f64 = 1.092_548_430_592_079_2;
const C2_ZZ: f64 = 0.946_174_695_757_560_08;
const C2_K: f64 = 0.315_391_565_252_520_05;
const C2_XX: f64 = 0.546_274_215_296_039_59;

pub fn sh_basis(degree: usize, d: Vec3, out: &mut [f64]) {
    debug_assert!(degree <= MAX_DEGREE);
    debug_assert_eq!(out.len(), basis_len(degree));
    let (x, y, z) = (d.x, d.y, d.z);
    out[0] = C0;
    if degree >= 1 {
        out[1] = -C1 * y;
        out[2] = C1 * z;
        out[3] = -C1 * x;
    }
    if degree >= 2 {
        out[4] = C2_XY * x * y;
        out[5] = -C2_XY * y * z;
        out[6] = C2_ZZ * z * z - C2_K;
        out[7] = -C2_XY * x * z;
        out[8] = C2_XX * (x * x - y * y);
    }
}

/// Adjoint of [`sh_basis`]: maps `dL/d(basis)` to `dL/dd`.
pub fn sh_basis_backward(degree: usize, d: Vec3, d_out: &[f64]) -> Vec3 {
    debug_assert!(degree <= MAX_DEGREE);
    let (x, y, z) = (d.x, d.y, d.z);
    let mut g = Vec3::ZERO;
    if degree >= 1 {
        g.y += -C1 * d_out[1];
        g.z += C1 * d_out[2];
        g.x += -C1 * d_out[3];
    }
    if degree >= 2 {
        g.x += C2_XY * y * d_out[4];
        g.y += C2_XY * x * d_out[4];
        g.y += -C2_XY * z * d_out[5];
        g.z += -C2_XY * y * d_out[5];
        g.z += 2.0 * C2_ZZ * z * d_out[6];
        g.x += -C2_XY * z * d_out[7];
        g.z += -C2_XY * x * d_out[7];
        g.x += 2.0 * C2_XX * x * d_out[8];
        g.y += -2.0 * C2_XX * y * d_out[8];
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn degree_zero_is_constant() {
        let mut out = [0.0; 1];
        sh_basis(0, Vec3::new(0.3, -0.5, 0.8), &mut out);
        assert_eq!(out[0], C0);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = 1e-6;
        for _ in 0..50 {
            let d = Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let adj: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let g = sh_basis_backward(2, d, &adj);

            let loss = |d: Vec3| {
                let mut out = [0.0; 9];
                sh_basis(2, d, &mut out);
                out.iter().zip(&adj).map(|(a, b)| a * b).sum::<f64>()
            };
            for (axis, analytic) in [(0, g.x), (1, g.y), (2, g.z)] {
                let mut dp = d;
                let mut dm = d;
                match axis {
                    0 => {
                        dp.x += h;
                        dm.x -= h;
                    }
                    1 => {
                        dp.y += h;
                        dm.y -= h;
                    }
                    _ => {
                        dp.z += h;
                        dm.z -= h;
                    }
                }
                let fd = (loss(dp) - loss(dm)) / (2.0 * h);
                assert!(
                    (fd - analytic).abs() < 1e-7 * (1.0 + fd.abs()),
                    "axis {axis}: {analytic} vs fd {fd}"
                );
            }
        }
    }
}
