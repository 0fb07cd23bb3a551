//! Forward and backward kernels. Activations are flat row-major buffers;
//! spatial ones are `[C, H, W]`.

use rand::{Rng, RngCore};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Chw {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Chw {
    pub fn len(self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }

    pub fn plane(self) -> usize {
        self.h * self.w
    }
}

/// Valid output range along one axis for kernel offset `d` in {-1, 0, 1}.
#[inline]
fn span(n: usize, d: isize) -> (usize, usize) {
    let lo = if d < 0 { 1 } else { 0 };
    let hi = if d > 0 { n.saturating_sub(1) } else { n };
    (lo, hi.max(lo))
}

/// Patch matrix `[c * 9, h * w]`: row `c * 9 + ky * 3 + kx` holds the input
/// plane `c` shifted by `(ky - 1, kx - 1)`, zero outside.
fn im2col(x: &[f64], dims: Chw) -> Vec<f64> {
    let (h, w, plane) = (dims.h, dims.w, dims.plane());
    let mut cols = vec![0.0; dims.c * 9 * plane];
    for c in 0..dims.c {
        let in_plane = &x[c * plane..(c + 1) * plane];
        for ky in 0..3 {
            let dy = ky as isize - 1;
            let (y_lo, y_hi) = span(h, dy);
            for kx in 0..3 {
                let dx = kx as isize - 1;
                let (x_lo, x_hi) = span(w, dx);
                let row = &mut cols[(c * 9 + ky * 3 + kx) * plane..][..plane];
                for y in y_lo..y_hi {
                    let s0 = (y as isize + dy) as usize * w + (x_lo as isize + dx) as usize;
                    row[y * w + x_lo..y * w + x_hi].copy_from_slice(&in_plane[s0..s0 + x_hi - x_lo]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im(cols: &[f64], dims: Chw) -> Vec<f64> {
    let (h, w, plane) = (dims.h, dims.w, dims.plane());
    let mut x = vec![0.0; dims.len()];
    for c in 0..dims.c {
        let out_plane = &mut x[c * plane..(c + 1) * plane];
        for ky in 0..3 {
            let dy = ky as isize - 1;
            let (y_lo, y_hi) = span(h, dy);
            for kx in 0..3 {
                let dx = kx as isize - 1;
                let (x_lo, x_hi) = span(w, dx);
                let row = &cols[(c * 9 + ky * 3 + kx) * plane..][..plane];
                for y in y_lo..y_hi {
                    let s0 = (y as isize + dy) as usize * w + (x_lo as isize + dx) as usize;
                    let src = &row[y * w + x_lo..y * w + x_hi];
                    for (d, v) in out_plane[s0..s0 + src.len()].iter_mut().zip(src) {
                        *d += v;
                    }
                }
            }
        }
    }
    x
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (d, s) in y.iter_mut().zip(x) {
        *d += a * s;
    }
}

/// Dot product with four interleaved partial sums, combined in a fixed order.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// 3x3 cross-correlation, stride 1, zero padding 1. `weight` is
/// `[c_out, c_in, 3, 3]`.
pub fn conv3x3_forward(
    x: &[f64],
    dims: Chw,
    weight: &[f64],
    bias: &[f64],
    c_out: usize,
) -> Result<Vec<f64>> {
    if x.len() != dims.len() || weight.len() != c_out * dims.c * 9 || bias.len() != c_out {
        return Err(Error::DimMismatch(format!(
            "conv3x3: input {:?} ({} values), weight {} values, bias {} values, c_out {}",
            dims,
            x.len(),
            weight.len(),
            bias.len(),
            c_out
        )));
    }
    let plane = dims.plane();
    let taps = dims.c * 9;
    let cols = im2col(x, dims);
    let mut out = vec![0.0; c_out * plane];
    for (o, out_plane) in out.chunks_exact_mut(plane.max(1)).enumerate().take(c_out) {
        out_plane.fill(bias[o]);
        for (k, &kv) in weight[o * taps..(o + 1) * taps].iter().enumerate() {
            axpy(out_plane, kv, &cols[k * plane..(k + 1) * plane]);
        }
    }
    Ok(out)
}

/// Accumulates weight and bias gradients and returns the input gradient,
/// or an empty vector when `input_grad` is false.
#[allow(clippy::too_many_arguments)]
pub fn conv3x3_backward(
    x: &[f64],
    dims: Chw,
    weight: &[f64],
    c_out: usize,
    grad_out: &[f64],
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
    input_grad: bool,
) -> Vec<f64> {
    let plane = dims.plane();
    let taps = dims.c * 9;
    let cols = im2col(x, dims);
    let mut grad_cols = vec![0.0; if input_grad { cols.len() } else { 0 }];
    for o in 0..c_out {
        let g = &grad_out[o * plane..(o + 1) * plane];
        grad_bias[o] += g.iter().sum::<f64>();
        for k in 0..taps {
            let col = &cols[k * plane..(k + 1) * plane];
            grad_weight[o * taps + k] += dot(g, col);
            if input_grad {
                axpy(&mut grad_cols[k * plane..(k + 1) * plane], weight[o * taps + k], g);
            }
        }
    }
    if input_grad {
        col2im(&grad_cols, dims)
    } else {
        Vec::new()
    }
}

/// `y = W x + b` with `W` stored `[m, n]`.
pub fn linear_forward(x: &[f64], weight: &[f64], bias: &[f64]) -> Result<Vec<f64>> {
    let m = bias.len();
    if m == 0 || weight.len() != m * x.len() {
        return Err(Error::DimMismatch(format!(
            "linear: input {} values, weight {} values, bias {} values",
            x.len(),
            weight.len(),
            m
        )));
    }
    let n = x.len();
    Ok((0..m).map(|i| bias[i] + dot(&weight[i * n..(i + 1) * n], x)).collect())
}

/// Accumulates weight and bias gradients; returns the input gradient when
/// `input_grad` is set.
pub fn linear_backward(
    x: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
    input_grad: bool,
) -> Vec<f64> {
    let n = x.len();
    let mut grad_x = vec![0.0; if input_grad { n } else { 0 }];
    for (i, &g) in grad_out.iter().enumerate() {
        grad_bias[i] += g;
        axpy(&mut grad_weight[i * n..(i + 1) * n], g, x);
        if input_grad {
            axpy(&mut grad_x, g, &weight[i * n..(i + 1) * n]);
        }
    }
    grad_x
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// GELU with the exact Gaussian CDF: `x * Phi(x)`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    cdf + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

#[inline]
pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

#[inline]
pub fn relu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Per-channel mean of a `[C, H, W]` buffer.
pub fn global_avg_pool(x: &[f64], dims: Chw) -> Vec<f64> {
    let plane = dims.plane();
    x.chunks_exact(plane)
        .map(|p| p.iter().sum::<f64>() / plane as f64)
        .collect()
}

pub fn global_avg_pool_backward(grad_out: &[f64], dims: Chw) -> Vec<f64> {
    let plane = dims.plane();
    grad_out
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g / plane as f64, plane))
        .collect()
}

/// Inverted-dropout multipliers: `0` with probability `rate`, otherwise
/// `1 / (1 - rate)`.
pub fn dropout_mask(n: usize, rate: f64, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
    check_dropout_rate(rate)?;
    if rate == 0.0 {
        return Ok(vec![1.0; n]);
    }
    let keep = 1.0 / (1.0 - rate);
    Ok((0..n)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect())
}

pub fn check_dropout_rate(rate: f64) -> Result<()> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_kernel() {
        let dims = Chw { c: 2, h: 3, w: 4 };
        let x: Vec<f64> = (0..dims.len()).map(|i| i as f64 * 0.5 - 3.0).collect();
        let mut weight = vec![0.0; 2 * 2 * 9];
        weight[4] = 1.0; // out 0 <- in 0 centre
        weight[(2 + 1) * 9 + 4] = 1.0; // out 1 <- in 1 centre
        let y = conv3x3_forward(&x, dims, &weight, &[0.0, 0.0], 2).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn single_pixel_sees_only_centre_tap() {
        let dims = Chw { c: 1, h: 1, w: 1 };
        let y = conv3x3_forward(&[2.5], dims, &[1.0; 9], &[0.0], 1).unwrap();
        assert_eq!(y, vec![2.5]);
    }

    #[test]
    fn conv_matches_naive_loop() {
        let dims = Chw { c: 3, h: 4, w: 5 };
        let c_out = 2;
        let x: Vec<f64> = (0..dims.len()).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
        let wt: Vec<f64> = (0..c_out * 3 * 9).map(|i| ((i * 13 % 7) as f64) * 0.1 - 0.3).collect();
        let b = [0.5, -0.25];
        let y = conv3x3_forward(&x, dims, &wt, &b, c_out).unwrap();
        for o in 0..c_out {
            for yy in 0..4isize {
                for xx in 0..5isize {
                    let mut acc = b[o];
                    for c in 0..3 {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let (sy, sx) = (yy + ky - 1, xx + kx - 1);
                                if (0..4).contains(&sy) && (0..5).contains(&sx) {
                                    acc += wt[((o * 3 + c) * 9) + (ky * 3 + kx) as usize]
                                        * x[c * 20 + (sy * 5 + sx) as usize];
                                }
                            }
                        }
                    }
                    let got = y[o * 20 + (yy * 5 + xx) as usize];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_channel_mismatch() {
        let dims = Chw { c: 2, h: 2, w: 2 };
        assert!(conv3x3_forward(&[0.0; 8], dims, &[0.0; 9], &[0.0], 1).is_err());
    }

    #[test]
    fn linear_identity_and_zero_input() {
        let w = [1.0, 0.0, 0.0, 1.0];
        assert_eq!(linear_forward(&[3.0, -2.0], &w, &[0.0, 0.0]).unwrap(), vec![3.0, -2.0]);
        assert_eq!(linear_forward(&[0.0, 0.0], &w, &[0.7, -0.1]).unwrap(), vec![0.7, -0.1]);
        assert!(linear_forward(&[1.0; 3], &w, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn activation_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert_eq!(relu(-1.0), 0.0);
        assert!((gelu(10.0) - 10.0).abs() < 1e-6);
        assert!(gelu(-10.0).abs() < 1e-6);
        // Phi(1) = 0.8413447460685429
        assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-12);
    }

    #[test]
    fn activation_grads_match_central_differences() {
        let h = 1e-6;
        for &x in &[-3.0, -0.7, -0.1, 0.2, 1.3, 4.0] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() / fd.abs().max(1e-6) < 1e-4);
            let fd = (relu(x + h) - relu(x - h)) / (2.0 * h);
            assert!((fd - relu_grad(x)).abs() < 1e-6);
        }
    }

    #[test]
    fn pooling() {
        let dims = Chw { c: 2, h: 2, w: 2 };
        assert_eq!(global_avg_pool(&[3.0; 8], dims), vec![3.0, 3.0]);
        let one = Chw { c: 3, h: 1, w: 1 };
        assert_eq!(global_avg_pool(&[1.0, 2.0, 3.0], one), vec![1.0, 2.0, 3.0]);
        assert_eq!(global_avg_pool_backward(&[4.0, 8.0], dims), vec![1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn dropout_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 1_000_000;
        let mask = dropout_mask(n, 0.25, &mut rng).unwrap();
        let survivors = mask.iter().filter(|&&m| m != 0.0).count() as f64 / n as f64;
        assert!((survivors - 0.75).abs() < 0.01, "{survivors}");
        // E[mask * x] = x for x = 1
        let mean = mask.iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.01, "{mean}");
    }

    #[test]
    fn dropout_rate_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(dropout_mask(4, 0.0, &mut rng).unwrap(), vec![1.0; 4]);
        assert!(dropout_mask(4, 1.0, &mut rng).is_err());
        assert!(dropout_mask(4, -0.1, &mut rng).is_err());
    }
}
