//! The differentiable volumetric scene representation: a multi-resolution
//! feature-grid encoder plus a tiny decoder producing density and
//! view-dependent color, with exact reverse-mode adjoints for the
//! parameters, the query position and the view direction.
//!
//! The compute graph is static, so the adjoints are hand-written over the
//! fixed pipeline rather than taped.

pub mod grid;
pub mod mlp;
pub mod sh;

pub use grid::{FieldError, LevelSpec, MultiResGrid};

use crate::geometry::Vec3;
use mlp::{
    glorot_init, linear_backward, linear_forward, relu_backward_inplace, relu_inplace, sigmoid,
    softplus,
};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::ops::Range;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct FieldConfig {
    pub levels: usize,
    pub base_resolution: u32,
    pub max_resolution: u32,
    pub features_per_level: usize,
    pub hash_size: usize,
    pub hidden_dim: usize,
    pub geo_features: usize,
    pub sh_degree: usize,
    /// Initial bias of the raw-density output; negative values start the
    /// field close to transparent.
    pub density_bias: f64,
    pub bounds_min: [f64; 3],
    pub bounds_max: [f64; 3],
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            levels: 8,
            base_resolution: 16,
            max_resolution: 256,
            features_per_level: 2,
            hash_size: 1 << 16,
            hidden_dim: 64,
            geo_features: 15,
            sh_degree: 2,
            density_bias: -4.0,
            bounds_min: [-12.0, -30.0, -1.0],
            bounds_max: [52.0, 30.0, 11.0],
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.levels == 0 || self.features_per_level == 0 || self.hidden_dim == 0 {
            return Err("field: levels, features_per_level and hidden_dim must be positive".into());
        }
        if self.geo_features == 0 {
            return Err("field: geo_features must be positive".into());
        }
        if self.max_resolution < self.base_resolution || self.base_resolution == 0 {
            return Err("field: need 0 < base_resolution <= max_resolution".into());
        }
        if self.sh_degree > sh::MAX_DEGREE {
            return Err(format!("field: sh_degree must be <= {}", sh::MAX_DEGREE));
        }
        for a in 0..3 {
            if !(self.bounds_max[a] > self.bounds_min[a]) {
                return Err("field: bounds_max must exceed bounds_min".into());
            }
        }
        Ok(())
    }

    pub fn sh_len(&self) -> usize {
        sh::basis_len(self.sh_degree)
    }
}

/// Absolute parameter ranges of the decoder blocks within the flat vector.
#[derive(Debug, Clone)]
struct DecoderLayout {
    dens_w1: Range<usize>,
    dens_b1: Range<usize>,
    dens_w2: Range<usize>,
    dens_b2: Range<usize>,
    col_w1: Range<usize>,
    col_b1: Range<usize>,
    col_w2: Range<usize>,
    col_b2: Range<usize>,
    total: usize,
}

fn decoder_layout(cfg: &FieldConfig, grid_len: usize) -> DecoderLayout {
    let feat = cfg.levels * cfg.features_per_level;
    let hid = cfg.hidden_dim;
    let dens_out = 1 + cfg.geo_features;
    let col_in = cfg.geo_features + cfg.sh_len();
    let mut at = grid_len;
    let mut take = |n: usize| {
        let r = at..at + n;
        at += n;
        r
    };
    DecoderLayout {
        dens_w1: take(hid * feat),
        dens_b1: take(hid),
        dens_w2: take(dens_out * hid),
        dens_b2: take(dens_out),
        col_w1: take(hid * col_in),
        col_b1: take(hid),
        col_w2: take(3 * hid),
        col_b2: take(3),
        total: at,
    }
}

/// Reusable per-worker buffers for one field evaluation; backward reuses the
/// activations stored by the matching forward call.
#[derive(Debug, Clone)]
pub struct FieldScratch {
    features: Vec<f64>,
    h1: Vec<f64>,
    dens_out: Vec<f64>,
    sh: Vec<f64>,
    col_in: Vec<f64>,
    h2: Vec<f64>,
    col_out: Vec<f64>,
    rgb: Vec3,
    d_features: Vec<f64>,
    d_h1: Vec<f64>,
    d_dens_out: Vec<f64>,
    d_col_in: Vec<f64>,
    d_h2: Vec<f64>,
    d_col_out: Vec<f64>,
}

/// The scene field: grid geometry, decoder layout and one flat parameter
/// vector (grid tables first, decoder weights after).
#[derive(Debug, Clone)]
pub struct FieldModel {
    pub cfg: FieldConfig,
    pub grid: MultiResGrid,
    layout: DecoderLayout,
    pub params: Vec<f64>,
}

impl FieldModel {
    fn build_grid(cfg: &FieldConfig) -> MultiResGrid {
        MultiResGrid::new(
            cfg.levels,
            cfg.base_resolution,
            cfg.max_resolution,
            cfg.features_per_level,
            cfg.hash_size,
            Vec3::from_array(cfg.bounds_min),
            Vec3::from_array(cfg.bounds_max),
        )
    }

    /// Total parameter count for a configuration without building a model.
    pub fn param_len_for(cfg: &FieldConfig) -> usize {
        let grid = Self::build_grid(cfg);
        decoder_layout(cfg, grid.param_len).total
    }

    /// Initialize: grid features uniform in ±1e-4, decoder weights
    /// Glorot-uniform, biases zero except the raw-density bias.
    pub fn init(cfg: FieldConfig, rng: &mut impl Rng) -> FieldModel {
        let grid = Self::build_grid(&cfg);
        let layout = decoder_layout(&cfg, grid.param_len);
        let mut params = vec![0.0; layout.total];
        for v in &mut params[..grid.param_len] {
            *v = rng.gen_range(-1e-4..1e-4);
        }
        let feat = cfg.levels * cfg.features_per_level;
        let hid = cfg.hidden_dim;
        let dens_out = 1 + cfg.geo_features;
        let col_in = cfg.geo_features + cfg.sh_len();
        glorot_init(rng, feat, hid, &mut params[layout.dens_w1.clone()]);
        glorot_init(rng, hid, dens_out, &mut params[layout.dens_w2.clone()]);
        glorot_init(rng, col_in, hid, &mut params[layout.col_w1.clone()]);
        glorot_init(rng, hid, 3, &mut params[layout.col_w2.clone()]);
        params[layout.dens_b2.start] = cfg.density_bias;
        FieldModel { cfg, grid, layout, params }
    }

    /// Rebuild a model from a configuration plus a flat parameter vector
    /// (checkpoint loading).
    pub fn from_parts(cfg: FieldConfig, params: Vec<f64>) -> Result<FieldModel, String> {
        cfg.validate()?;
        let grid = Self::build_grid(&cfg);
        let layout = decoder_layout(&cfg, grid.param_len);
        if params.len() != layout.total {
            return Err(format!(
                "parameter count mismatch: expected {}, got {}",
                layout.total,
                params.len()
            ));
        }
        Ok(FieldModel { cfg, grid, layout, params })
    }

    pub fn param_len(&self) -> usize {
        self.layout.total
    }

    /// Index of the raw-density output bias within the parameter vector.
    pub fn density_bias_index(&self) -> usize {
        self.layout.dens_b2.start
    }

    /// Parameters belonging to the grid tables (weight-decay group).
    pub fn grid_range(&self) -> Range<usize> {
        0..self.grid.param_len
    }

    /// Parameters belonging to the decoder.
    pub fn decoder_range(&self) -> Range<usize> {
        self.grid.param_len..self.layout.total
    }

    pub fn new_scratch(&self) -> FieldScratch {
        let cfg = &self.cfg;
        let feat = cfg.levels * cfg.features_per_level;
        let dens_out = 1 + cfg.geo_features;
        let col_in = cfg.geo_features + cfg.sh_len();
        FieldScratch {
            features: vec![0.0; feat],
            h1: vec![0.0; cfg.hidden_dim],
            dens_out: vec![0.0; dens_out],
            sh: vec![0.0; cfg.sh_len()],
            col_in: vec![0.0; col_in],
            h2: vec![0.0; cfg.hidden_dim],
            col_out: vec![0.0; 3],
            rgb: Vec3::ZERO,
            d_features: vec![0.0; feat],
            d_h1: vec![0.0; cfg.hidden_dim],
            d_dens_out: vec![0.0; dens_out],
            d_col_in: vec![0.0; col_in],
            d_h2: vec![0.0; cfg.hidden_dim],
            d_col_out: vec![0.0; 3],
        }
    }

    /// Encoder output for an in-bounds position (trilinear per level,
    /// concatenated).
    pub fn encode(&self, x: Vec3) -> Result<Vec<f64>, FieldError> {
        let mut out = vec![0.0; self.grid.feature_dim()];
        self.grid.encode(&self.params[self.grid_range()], x, &mut out)?;
        Ok(out)
    }

    /// Density (softplus, per meter) and color (sigmoid, in [0,1]) at
    /// position `x` viewed along `d`. Stores activations in `scratch` for a
    /// following [`FieldModel::eval_backward`].
    pub fn eval(&self, x: Vec3, d: Vec3, s: &mut FieldScratch) -> Result<(f64, Vec3), FieldError> {
        let p = &self.params;
        self.grid.encode(&p[self.grid_range()], x, &mut s.features)?;
        linear_forward(&p[self.layout.dens_w1.clone()], &p[self.layout.dens_b1.clone()], &s.features, &mut s.h1);
        relu_inplace(&mut s.h1);
        linear_forward(&p[self.layout.dens_w2.clone()], &p[self.layout.dens_b2.clone()], &s.h1, &mut s.dens_out);
        let sigma = softplus(s.dens_out[0]);

        sh::sh_basis(self.cfg.sh_degree, d, &mut s.sh);
        let geo = self.cfg.geo_features;
        s.col_in[..geo].copy_from_slice(&s.dens_out[1..]);
        s.col_in[geo..].copy_from_slice(&s.sh);
        linear_forward(&p[self.layout.col_w1.clone()], &p[self.layout.col_b1.clone()], &s.col_in, &mut s.h2);
        relu_inplace(&mut s.h2);
        linear_forward(&p[self.layout.col_w2.clone()], &p[self.layout.col_b2.clone()], &s.h2, &mut s.col_out);
        let rgb = Vec3::new(sigmoid(s.col_out[0]), sigmoid(s.col_out[1]), sigmoid(s.col_out[2]));
        s.rgb = rgb;
        Ok((sigma, rgb))
    }

    /// Exact adjoint of [`FieldModel::eval`]. `scratch` must hold the
    /// activations of the matching forward call. Parameter gradients are
    /// accumulated into `d_params`; returns `(dL/dx, dL/dd)`.
    pub fn eval_backward(
        &self,
        x: Vec3,
        d: Vec3,
        s: &mut FieldScratch,
        d_sigma: f64,
        d_rgb: Vec3,
        d_params: &mut [f64],
    ) -> (Vec3, Vec3) {
        debug_assert_eq!(d_params.len(), self.layout.total);
        let p = &self.params;
        let geo = self.cfg.geo_features;

        // Sigmoid color output.
        let d_rgb_arr = d_rgb.to_array();
        for c in 0..3 {
            let y = [s.rgb.x, s.rgb.y, s.rgb.z][c];
            s.d_col_out[c] = d_rgb_arr[c] * y * (1.0 - y);
        }

        // Color head.
        s.d_h2.fill(0.0);
        {
            let (dw, db) = two_ranges(d_params, self.layout.col_w2.clone(), self.layout.col_b2.clone());
            linear_backward(&p[self.layout.col_w2.clone()], &s.h2, &s.d_col_out, dw, db, &mut s.d_h2);
        }
        relu_backward_inplace(&s.h2, &mut s.d_h2);
        s.d_col_in.fill(0.0);
        {
            let (dw, db) = two_ranges(d_params, self.layout.col_w1.clone(), self.layout.col_b1.clone());
            linear_backward(&p[self.layout.col_w1.clone()], &s.col_in, &s.d_h2, dw, db, &mut s.d_col_in);
        }

        // Split color-head input adjoint into geometry features and SH.
        s.d_dens_out[0] = d_sigma * sigmoid(s.dens_out[0]);
        s.d_dens_out[1..].copy_from_slice(&s.d_col_in[..geo]);
        let d_dir = sh::sh_basis_backward(self.cfg.sh_degree, d, &s.d_col_in[geo..]);

        // Density head.
        s.d_h1.fill(0.0);
        {
            let (dw, db) = two_ranges(d_params, self.layout.dens_w2.clone(), self.layout.dens_b2.clone());
            linear_backward(&p[self.layout.dens_w2.clone()], &s.h1, &s.d_dens_out, dw, db, &mut s.d_h1);
        }
        relu_backward_inplace(&s.h1, &mut s.d_h1);
        s.d_features.fill(0.0);
        {
            let (dw, db) = two_ranges(d_params, self.layout.dens_w1.clone(), self.layout.dens_b1.clone());
            linear_backward(&p[self.layout.dens_w1.clone()], &s.features, &s.d_h1, dw, db, &mut s.d_features);
        }

        // Grid.
        let grid_len = self.grid.param_len;
        let d_x = self.grid.encode_backward(
            &p[..grid_len],
            x,
            &s.d_features,
            &mut d_params[..grid_len],
        );
        (d_x, d_dir)
    }
}

/// Two disjoint mutable sub-slices of `buf` (`a` must end before `b` starts).
fn two_ranges(buf: &mut [f64], a: Range<usize>, b: Range<usize>) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a.end <= b.start);
    let (head, tail) = buf.split_at_mut(b.start);
    (&mut head[a], &mut tail[..b.len()])
}
