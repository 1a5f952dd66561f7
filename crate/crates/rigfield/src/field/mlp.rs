//! Dense layer primitives for the tiny field decoder, written as flat-slice
//! loops so the hot path stays allocation-free.

use rand::Rng;

/// `y = W x + b` with `W` row-major `[n_out x n_in]`.
pub fn linear_forward(w: &[f64], b: &[f64], x: &[f64], y: &mut [f64]) {
    let n_in = x.len();
    let n_out = y.len();
    debug_assert_eq!(w.len(), n_in * n_out);
    debug_assert_eq!(b.len(), n_out);
    for o in 0..n_out {
        let row = &w[o * n_in..(o + 1) * n_in];
        let mut acc = b[o];
        for i in 0..n_in {
            acc += row[i] * x[i];
        }
        y[o] = acc;
    }
}

/// Accumulates `dW`, `db` and `dx` for a linear layer. `dx` is accumulated
/// into (callers zero it first when starting a new chain).
pub fn linear_backward(
    w: &[f64],
    x: &[f64],
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    dx: &mut [f64],
) {
    let n_in = x.len();
    let n_out = dy.len();
    debug_assert_eq!(w.len(), n_in * n_out);
    for o in 0..n_out
    {
        let g = dy[o];
        if g == 0.0 {
            continue;
        }
        let row = &w[o * n_in..(o + 1) * n_in];
        let drow = &mut dw[o * n_in..(o + 1) * n_in];
        for i in 0..n_in {
            drow[i] += g * x[i];
            dx[i] += g * row[i];
        }
        db[o] += g;
    }
}

pub fn relu_inplace(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Masks `dx` by the post-activation values `h` of the matching forward
/// pass (`h > 0` keeps the gradient).
pub fn relu_backward_inplace(h: &[f64], dx: &mut [f64]) {
    for (g, &a) in dx.iter_mut().zip(h) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// d softplus / dx = sigmoid(x).
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Glorot-uniform initialization for a `[n_out x n_in]` weight block.
pub fn glorot_init(rng: &mut impl Rng, n_in: usize, n_out: usize, w: &mut [f64]) {
    let bound = (6.0 / (n_in + n_out) as f64).sqrt();
    for v in w.iter_mut() {
        *v = rng.gen_range(-bound..bound);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_forward_backward_consistency() {
        let w = vec![0.5, -1.0, 2.0, 0.25, 1.5, -0.75]; // 2x3
        let b = vec![0.1, -0.2];
        let x = vec![1.0, 2.0, -1.0];
        let mut y = vec![0.0; 2];
        linear_forward(&w, &b, &x, &mut y);
        assert!((y[0] - (0.1 + 0.5 - 2.0 - 2.0)).abs() < 1e-15);

        let dy = vec![1.0, -2.0];
        let mut dw = vec![0.0; 6];
        let mut db = vec![0.0; 2];
        let mut dx = vec![0.0; 3];
        linear_backward(&w, &x, &dy, &mut dw, &mut db, &mut dx);

        let h = 1e-6;
        for i in 0..3 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let mut yp = vec![0.0; 2];
            let mut ym = vec![0.0; 2];
            linear_forward(&w, &b, &xp, &mut yp);
            linear_forward(&w, &b, &xm, &mut ym);
            let fd = ((yp[0] - ym[0]) * dy[0] + (yp[1] - ym[1]) * dy[1]) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-8, "dx[{i}]");
        }
    }

    #[test]
    fn softplus_and_sigmoid_baselines() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        assert!((softplus(100.0) - 100.0).abs() < 1e-9);
        assert!(softplus(-100.0) > 0.0);
    }
}
