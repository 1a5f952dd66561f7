//! Multi-resolution feature grid with trilinear interpolation.
//!
//! Level resolutions grow geometrically between the base and max
//! resolution. A level stores its feature rows densely while the vertex
//! count fits the table budget, otherwise rows are addressed through the
//! fixed spatial hash below (pinned bit-exact by tests).

use crate::geometry::Vec3;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FieldError {
    #[error("query position ({0}, {1}, {2}) outside scene bounds")]
    OutOfBounds(f64, f64, f64),
}

/// `h(i,j,k) = (i*1 XOR j*2654435761 XOR k*805459861) mod table_len`.
pub fn spatial_hash(i: u32, j: u32, k: u32, table_len: usize) -> usize {
    let h = (i as u64) ^ (j as u64).wrapping_mul(2_654_435_761) ^ (k as u64).wrapping_mul(805_459_861);
    (h % table_len as u64) as usize
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelSpec {
    /// Cells per axis; vertex indices run 0..=resolution.
    pub resolution: u32,
    /// Feature rows in this level's table.
    pub table_len: usize,
    /// Scalar offset of this level's first parameter within the grid region.
    pub offset: usize,
    pub hashed: bool,
}

/// Grid geometry: level layout plus scene bounds. Feature values live in the
/// field model's flat parameter vector; this struct only knows how to
/// address and interpolate them.
#[derive(Debug, Clone)]
pub struct MultiResGrid {
    pub levels: Vec<LevelSpec>,
    pub features_per_level: usize,
    pub bounds_min: Vec3,
    pub bounds_max: Vec3,
    /// Total scalar parameter count across all level tables.
    pub param_len: usize,
}

/// Geometric level resolutions from `base` to `max` inclusive.
pub fn level_resolutions(levels: usize, base: u32, max: u32) -> Vec<u32> {
    assert!(levels >= 1 && base >= 1 && max >= base);
    if levels == 1 {
        return vec![base];
    }
    let growth = (max as f64 / base as f64).powf(1.0 / (levels - 1) as f64);
    (0..levels)
        .map(|l| ((base as f64) * growth.powi(l as i32) + 1e-9).floor() as u32)
        .collect()
}

impl MultiResGrid {
    pub fn new(
        levels: usize,
        base_resolution: u32,
        max_resolution: u32,
        features_per_level: usize,
        hash_size: usize,
        bounds_min: Vec3,
        bounds_max: Vec3,
    ) -> MultiResGrid {
        Self::with_storage_rule(
            levels,
            base_resolution,
            max_resolution,
            features_per_level,
            hash_size,
            bounds_min,
            bounds_max,
            None,
        )
    }

    /// `force_hashed`, when given, overrides the dense-vs-hashed rule per
    /// level (used by tests that pin hashed/dense agreement).
    pub(crate) fn with_storage_rule(
        levels: usize,
        base_resolution: u32,
        max_resolution: u32,
        features_per_level: usize,
        hash_size: usize,
        bounds_min: Vec3,
        bounds_max: Vec3,
        force_hashed: Option<&[bool]>,
    ) -> MultiResGrid {
        let mut specs = Vec::with_capacity(levels);
        let mut offset = 0usize;
        for (l, res) in level_resolutions(levels, base_resolution, max_resolution)
            .into_iter()
            .enumerate()
        {
            let verts = (res as usize + 1).pow(3);
            let hashed = match force_hashed {
                Some(f) => f[l],
                None => verts > hash_size,
            };
            let table_len = if hashed { hash_size } else { verts };
            specs.push(LevelSpec { resolution: res, table_len, offset, hashed });
            offset += table_len * features_per_level;
        }
        MultiResGrid {
            levels: specs,
            features_per_level,
            bounds_min,
            bounds_max,
            param_len: offset,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.levels.len() * self.features_per_level
    }

    /// Scalar parameter index of feature `f` at vertex `(i, j, k)` of
    /// `level` (routing through the hash for hashed levels).
    pub fn vertex_param_index(&self, level: usize, i: u32, j: u32, k: u32, f: usize) -> usize {
        let spec = &self.levels[level];
        let row = if spec.hashed {
            spatial_hash(i, j, k, spec.table_len)
        } else {
            let r1 = spec.resolution as usize + 1;
            (k as usize * r1 + j as usize) * r1 + i as usize
        };
        spec.offset + row * self.features_per_level + f
    }

    pub fn contains(&self, x: Vec3) -> bool {
        x.x >= self.bounds_min.x
            && x.y >= self.bounds_min.y
            && x.z >= self.bounds_min.z
            && x.x <= self.bounds_max.x
            && x.y <= self.bounds_max.y
            && x.z <= self.bounds_max.z
    }

    /// Cell coordinates and fractional offsets of `x` at `level`.
    fn cell_of(&self, level: usize, x: Vec3) -> ([u32; 3], [f64; 3]) {
        let res = self.levels[level].resolution;
        let ext = self.bounds_max - self.bounds_min;
        let p = x - self.bounds_min;
        let mut idx = [0u32; 3];
        let mut frac = [0.0f64; 3];
        for (a, (pa, ea)) in [(p.x, ext.x), (p.y, ext.y), (p.z, ext.z)].into_iter().enumerate() {
            let s = pa / ea * res as f64;
            let i = (s.floor() as i64).clamp(0, res as i64 - 1);
            idx[a] = i as u32;
            frac[a] = s - i as f64;
        }
        (idx, frac)
    }

    /// Trilinear interpolation of the 8 corner feature rows per level,
    /// concatenated across levels into `out` (length `feature_dim()`).
    pub fn encode(&self, params: &[f64], x: Vec3, out: &mut [f64]) -> Result<(), FieldError> {
        if !self.contains(x) {
            return Err(FieldError::OutOfBounds(x.x, x.y, x.z));
        }
        let nf = self.features_per_level;
        debug_assert_eq!(out.len(), self.feature_dim());
        out.fill(0.0);
        for (l, _spec) in self.levels.iter().enumerate() {
            let ([ix, iy, iz], [fx, fy, fz]) = self.cell_of(l, x);
            let dst = &mut out[l * nf..(l + 1) * nf];
            for dz in 0..2u32 {
                let wz = if dz == 0 { 1.0 - fz } else { fz };
                for dy in 0..2u32 {
                    let wy = if dy == 0 { 1.0 - fy } else { fy };
                    for dx in 0..2u32 {
                        let wx = if dx == 0 { 1.0 - fx } else { fx };
                        let w = wx * wy * wz;
                        let base = self.vertex_param_index(l, ix + dx, iy + dy, iz + dz, 0);
                        for f in 0..nf {
                            dst[f] += w * params[base + f];
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Adjoint of [`encode`]: accumulates grid-parameter gradients into
    /// `d_params` (same layout as `params`) and returns `dL/dx`.
    pub fn encode_backward(
        &self,
        params: &[f64],
        x: Vec3,
        d_out: &[f64],
        d_params: &mut [f64],
    ) -> Vec3 {
        let nf = self.features_per_level;
        let ext = self.bounds_max - self.bounds_min;
        let mut d_x = Vec3::ZERO;
        for (l, spec) in self.levels.iter().enumerate() {
            let ([ix, iy, iz], [fx, fy, fz]) = self.cell_of(l, x);
            let adj = &d_out[l * nf..(l + 1) * nf];
            let res = spec.resolution as f64;
            // d frac / d x per axis.
            let sx = res / ext.x;
            let sy = res / ext.y;
            let sz = res / ext.z;
            for dz in 0..2u32 {
                let (wz, gz) = if dz == 0 { (1.0 - fz, -1.0) } else { (fz, 1.0) };
                for dy in 0..2u32 {
                    let (wy, gy) = if dy == 0 { (1.0 - fy, -1.0) } else { (fy, 1.0) };
                    for dx in 0..2u32 {
                        let (wx, gx) = if dx == 0 { (1.0 - fx, -1.0) } else { (fx, 1.0) };
                        let w = wx * wy * wz;
                        let base = self.vertex_param_index(l, ix + dx, iy + dy, iz + dz, 0);
                        let mut corner_dot = 0.0;
                        for f in 0..nf {
                            d_params[base + f] += w * adj[f];
                            corner_dot += params[base + f] * adj[f];
                        }
                        d_x.x += corner_dot * gx * wy * wz * sx;
                        d_x.y += corner_dot * wx * gy * wz * sy;
                        d_x.z += corner_dot * wx * wy * gz * sz;
                    }
                }
            }
        }
        d_x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_grid(levels: usize, base: u32, max: u32, hash: usize) -> MultiResGrid {
        MultiResGrid::new(levels, base, max, 2, hash, Vec3::ZERO, Vec3::new(1.0, 1.0, 1.0))
    }

    #[test]
    fn resolutions_are_geometric() {
        let r = level_resolutions(8, 16, 256);
        assert_eq!(r.first(), Some(&16));
        assert_eq!(r.last(), Some(&256));
        for w in r.windows(2) {
            assert!(w[1] > w[0]);
        }
    }

    #[test]
    fn hash_function_is_pinned() {
        // Hand-evaluated: 1*1 XOR 2*2654435761 XOR 3*805459861 = 7187592668.
        let h = 1u64 ^ 5_308_871_522 ^ 2_416_379_583;
        assert_eq!(h, 7_187_592_668);
        assert_eq!(spatial_hash(1, 2, 3, 1 << 16), 62_940);
        assert_eq!(spatial_hash(5, 7, 11, 4096), 181);
        assert_eq!(spatial_hash(0, 0, 0, 77), 0);
    }

    #[test]
    fn weights_sum_to_one() {
        let grid = unit_grid(4, 4, 32, 1 << 14);
        let params = vec![1.0; grid.param_len];
        let mut out = vec![0.0; grid.feature_dim()];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            let x = Vec3::new(rng.gen(), rng.gen(), rng.gen());
            grid.encode(&params, x, &mut out).unwrap();
            for v in &out {
                // All features 1.0: interpolated value = sum of weights.
                assert!((v - 1.0).abs() < 1e-12, "weight sum {v}");
            }
        }
    }

    #[test]
    fn vertex_query_returns_vertex_row() {
        let grid = unit_grid(1, 2, 2, 1 << 14);
        let mut params = vec![0.0; grid.param_len];
        // Vertex (1,0,1) of a resolution-2 level sits at (0.5, 0.0, 0.5).
        let idx = grid.vertex_param_index(0, 1, 0, 1, 0);
        params[idx] = 7.25;
        params[idx + 1] = -3.5;
        let mut out = vec![0.0; 2];
        grid.encode(&params, Vec3::new(0.5, 0.0, 0.5), &mut out).unwrap();
        assert!((out[0] - 7.25).abs() < 1e-12);
        assert!((out[1] + 3.5).abs() < 1e-12);
    }

    #[test]
    fn cell_center_is_mean_of_corners() {
        let grid = unit_grid(1, 2, 2, 1 << 14);
        let mut params = vec![0.0; grid.param_len];
        let mut sum = 0.0;
        for dz in 0..2 {
            for dy in 0..2 {
                for dx in 0..2 {
                    let v = (dx + 2 * dy + 4 * dz) as f64;
                    params[grid.vertex_param_index(0, dx, dy, dz, 0)] = v;
                    sum += v;
                }
            }
        }
        let mut out = vec![0.0; 2];
        grid.encode(&params, Vec3::new(0.25, 0.25, 0.25), &mut out).unwrap();
        assert!((out[0] - sum / 8.0).abs() < 1e-12, "{} vs {}", out[0], sum / 8.0);
    }

    #[test]
    fn trilinear_matches_hand_formula() {
        // 1-level grid, resolution 2, features = corner-index values.
        let grid = unit_grid(1, 2, 2, 1 << 14);
        let mut params = vec![0.0; grid.param_len];
        let value = |i: u32, j: u32, k: u32| (i + 3 * j + 9 * k) as f64;
        for k in 0..3 {
            for j in 0..3 {
                for i in 0..3 {
                    params[grid.vertex_param_index(0, i, j, k, 0)] = value(i, j, k);
                }
            }
        }
        let x = Vec3::new(0.25, 0.5, 0.75);
        // Cell at scaled coords (0.5, 1.0, 1.5): cell (0, 1, 1), frac (0.5, 0.0, 0.5).
        let (fx, fy, fz) = (0.5, 0.0, 0.5);
        let mut oracle = 0.0;
        for dz in 0..2u32 {
            for dy in 0..2u32 {
                for dx in 0..2u32 {
                    let w = (if dx == 0 { 1.0 - fx } else { fx })
                        * (if dy == 0 { 1.0 - fy } else { fy })
                        * (if dz == 0 { 1.0 - fz } else { fz });
                    oracle += w * value(dx, 1 + dy, 1 + dz);
                }
            }
        }
        let mut out = vec![0.0; 2];
        grid.encode(&params, x, &mut out).unwrap();
        assert!((out[0] - oracle).abs() < 1e-12, "{} vs {}", out[0], oracle);
    }

    #[test]
    fn out_of_bounds_is_an_error() {
        let grid = unit_grid(1, 2, 2, 1 << 14);
        let params = vec![0.0; grid.param_len];
        let mut out = vec![0.0; 2];
        assert!(matches!(
            grid.encode(&params, Vec3::new(1.5, 0.5, 0.5), &mut out),
            Err(FieldError::OutOfBounds(..))
        ));
        // Boundary points are inside.
        assert!(grid.encode(&params, Vec3::new(1.0, 1.0, 1.0), &mut out).is_ok());
        assert!(grid.encode(&params, Vec3::ZERO, &mut out).is_ok());
    }

    #[test]
    fn hashed_and_dense_storage_agree_when_collision_free() {
        let bounds = (Vec3::ZERO, Vec3::new(1.0, 1.0, 1.0));
        let dense = MultiResGrid::new(1, 3, 3, 2, 4096, bounds.0, bounds.1);
        assert!(!dense.levels[0].hashed);
        let hashed = MultiResGrid::with_storage_rule(
            1,
            3,
            3,
            2,
            4096,
            bounds.0,
            bounds.1,
            Some(&[true]),
        );
        assert!(hashed.levels[0].hashed);

        // The 4^3 vertex cube must hash without collisions into 4096 slots.
        let mut seen = std::collections::HashSet::new();
        for k in 0..4u32 {
            for j in 0..4u32 {
                for i in 0..4u32 {
                    assert!(seen.insert(spatial_hash(i, j, k, 4096)), "hash collision at {i},{j},{k}");
                }
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pd = vec![0.0; dense.param_len];
        let mut ph = vec![0.0; hashed.param_len];
        for k in 0..4u32 {
            for j in 0..4u32 {
                for i in 0..4u32 {
                    for f in 0..2 {
                        let v: f64 = rng.gen_range(-1.0..1.0);
                        pd[dense.vertex_param_index(0, i, j, k, f)] = v;
                        ph[hashed.vertex_param_index(0, i, j, k, f)] = v;
                    }
                }
            }
        }
        let mut od = vec![0.0; 2];
        let mut oh = vec![0.0; 2];
        for _ in 0..200 {
            let x = Vec3::new(rng.gen(), rng.gen(), rng.gen());
            dense.encode(&pd, x, &mut od).unwrap();
            hashed.encode(&ph, x, &mut oh).unwrap();
            assert_eq!(od, oh, "exact agreement at {x:?}");
        }
    }

    #[test]
    fn encode_backward_matches_finite_differences() {
        let grid = unit_grid(2, 2, 4, 1 << 14);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params: Vec<f64> = (0..grid.param_len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let adj: Vec<f64> = (0..grid.feature_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h = 1e-6;

        for _ in 0..20 {
            let x = Vec3::new(rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9));
            let mut d_params = vec![0.0; grid.param_len];
            let d_x = grid.encode_backward(&params, x, &adj, &mut d_params);

            let loss = |p: &[f64], x: Vec3| {
                let mut out = vec![0.0; grid.feature_dim()];
                grid.encode(p, x, &mut out).unwrap();
                out.iter().zip(&adj).map(|(a, b)| a * b).sum::<f64>()
            };

            // Position gradient (skip probes that straddle a cell face).
            for axis in 0..3 {
                let mut xp = x;
                let mut xm = x;
                match axis {
                    0 => {
                        xp.x += h;
                        xm.x -= h;
                    }
                    1 => {
                        xp.y += h;
                        xm.y -= h;
                    }
                    _ => {
                        xp.z += h;
                        xm.z -= h;
                    }
                }
                let fd = (loss(&params, xp) - loss(&params, xm)) / (2.0 * h);
                let analytic = [d_x.x, d_x.y, d_x.z][axis];
                assert!(
                    (fd - analytic).abs() < 1e-5 * (1.0 + fd.abs()),
                    "position axis {axis}: {analytic} vs {fd}"
                );
            }

            // A few touched parameter gradients.
            for _ in 0..5 {
                let idx = (0..grid.param_len)
                    .filter(|i| d_params[*i] != 0.0)
                    .nth(rng.gen_range(0..8))
                    .unwrap();
                let mut pp = params.clone();
                let mut pm = params.clone();
                pp[idx] += h;
                pm[idx] -= h;
                let fd = (loss(&pp, x) - loss(&pm, x)) / (2.0 * h);
                assert!(
                    (fd - d_params[idx]).abs() < 1e-6 * (1.0 + fd.abs()),
                    "param {idx}: {} vs {fd}",
                    d_params[idx]
                );
            }

            // Untouched vertices keep zero gradient (locality).
            let touched = d_params.iter().filter(|v| **v != 0.0).count();
            assert!(touched <= 8 * 2 * 2, "at most 8 corners x features x levels");
        }
    }
}
