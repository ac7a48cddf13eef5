//! Shared neural primitives: activations, depthwise causal convolution,
//! head-wise group normalization and (block-diagonal) linear maps.
//! Every primitive comes with a hand-written backward.

use crate::error::{Error, Result};
use crate::tensor::{gemm_acc, matmul, Tensor};

pub const GROUP_NORM_EPS: f64 = 1e-5;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// log sigma(x) = -softplus(-x), stable for large |x|.
#[inline]
pub fn logsigmoid(x: f64) -> f64 {
    -softplus(-x)
}

#[inline]
pub fn swish(x: f64) -> f64 {
    x * sigmoid(x)
}

/// Exact erf-based GeLU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Tanh,
    Exp,
    Gelu,
    Swish,
    Identity,
}

impl Activation {
    #[inline]
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Exp => x.exp(),
            Activation::Gelu => gelu(x),
            Activation::Swish => swish(x),
            Activation::Identity => x,
        }
    }

    /// Derivative evaluated at the pre-activation.
    #[inline]
    pub fn deriv(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Exp => x.exp(),
            Activation::Gelu => {
                let phi = (-(x * x) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
                0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)) + x * phi
            }
            Activation::Swish => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Elementwise activation with overflow reporting.
pub fn apply_activation(x: &Tensor, kind: Activation) -> Result<Tensor> {
    let mut out = x.zeros_like();
    for (i, (&v, o)) in x.data().iter().zip(out.data_mut()).enumerate() {
        let y = kind.eval(v);
        if !y.is_finite() {
            return Err(Error::NonFinite {
                context: format!("{kind:?} overflow at flat index {i} (input {v})"),
            });
        }
        *o = y;
    }
    Ok(out)
}

/// Gradient of `apply_activation` given upstream dy and the cached input.
pub fn activation_backward(x: &Tensor, kind: Activation, dy: &Tensor) -> Tensor {
    let mut dx = x.zeros_like();
    for ((&v, &g), o) in x.data().iter().zip(dy.data()).zip(dx.data_mut()) {
        *o = kind.deriv(v) * g;
    }
    dx
}

/// Depthwise causal 1-D convolution. `x` is [T, d], `kernel` is [w, d],
/// `bias` is [d]. Output at step t depends on steps <= t only (zero
/// left-padding).
pub fn causal_conv1d(x: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (t_len, d) = (x.rows(), x.cols());
    let w = kernel.rows();
    if kernel.cols() != d || bias.len() != d || w == 0 {
        return Err(Error::ShapeMismatch(format!(
            "conv: x [{t_len},{d}], kernel {:?}, bias {:?}",
            kernel.shape(),
            bias.shape()
        )));
    }
    let mut y = Tensor::zeros(&[t_len, d]);
    for t in 0..t_len {
        let yt = y.row_mut(t);
        yt.copy_from_slice(bias.data());
        for j in 0..w {
            let s = t as isize - (w as isize - 1) + j as isize;
            if s < 0 {
                continue;
            }
            let xs = x.row(s as usize);
            let kj = kernel.row(j);
            for c in 0..d {
                yt[c] += kj[c] * xs[c];
            }
        }
    }
    Ok(y)
}

/// Backward of `causal_conv1d`: returns (dx, dkernel, dbias).
pub fn causal_conv1d_backward(
    x: &Tensor,
    kernel: &Tensor,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (t_len, d) = (x.rows(), x.cols());
    let w = kernel.rows();
    let mut dx = Tensor::zeros(&[t_len, d]);
    let mut dk = Tensor::zeros(&[w, d]);
    let mut db = Tensor::zeros(&[d]);
    for t in 0..t_len {
        let g = dy.row(t);
        for c in 0..d {
            db.data_mut()[c] += g[c];
        }
        for j in 0..w {
            let s = t as isize - (w as isize - 1) + j as isize;
            if s < 0 {
                continue;
            }
            let s = s as usize;
            let xs = x.row(s);
            for c in 0..d {
                dk.data_mut()[j * d + c] += g[c] * xs[c];
                dx.data_mut()[s * d + c] += kernel.data()[j * d + c] * g[c];
            }
        }
    }
    (dx, dk, db)
}

/// Cache for the group-norm backward: normalized values and inverse stds.
pub struct GroupNormCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>, // one per (t, head)
    pub num_heads: usize,
}

/// Head-wise normalization of [T, d]: per timestep and per head slice of
/// width d / num_heads, subtract mean and divide by sqrt(var + eps), then
/// apply elementwise gain and shift.
pub fn group_norm(
    x: &Tensor,
    num_heads: usize,
    gain: &Tensor,
    shift: &Tensor,
    eps: f64,
) -> Result<(Tensor, GroupNormCache)> {
    let (t_len, d) = (x.rows(), x.cols());
    if num_heads == 0 || d % num_heads != 0 {
        return Err(Error::ShapeMismatch(format!(
            "group_norm: d={d} not divisible by num_heads={num_heads}"
        )));
    }
    if gain.len() != d || shift.len() != d {
        return Err(Error::ShapeMismatch("group_norm gain/shift".into()));
    }
    let g = d / num_heads;
    let mut xhat = Tensor::zeros(&[t_len, d]);
    let mut inv_std = Vec::with_capacity(t_len * num_heads);
    let mut y = Tensor::zeros(&[t_len, d]);
    for t in 0..t_len {
        for h in 0..num_heads {
            let lo = h * g;
            let slice = &x.row(t)[lo..lo + g];
            let mean = slice.iter().sum::<f64>() / g as f64;
            let var = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / g as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for c in 0..g {
                let xh = (slice[c] - mean) * is;
                xhat.data_mut()[t * d + lo + c] = xh;
                y.data_mut()[t * d + lo + c] = gain.data()[lo + c] * xh + shift.data()[lo + c];
            }
        }
    }
    Ok((
        y,
        GroupNormCache {
            xhat,
            inv_std,
            num_heads,
        },
    ))
}

/// Backward of `group_norm`: returns (dx, dgain, dshift).
pub fn group_norm_backward(
    cache: &GroupNormCache,
    gain: &Tensor,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (t_len, d) = (dy.rows(), dy.cols());
    let num_heads = cache.num_heads;
    let g = d / num_heads;
    let mut dx = Tensor::zeros(&[t_len, d]);
    let mut dgain = Tensor::zeros(&[d]);
    let mut dshift = Tensor::zeros(&[d]);
    for t in 0..t_len {
        for h in 0..num_heads {
            let lo = h * g;
            let is = cache.inv_std[t * num_heads + h];
            let mut sum_dxh = 0.0;
            let mut sum_dxh_xh = 0.0;
            for c in 0..g {
                let idx = t * d + lo + c;
                let dyv = dy.data()[idx];
                let xh = cache.xhat.data()[idx];
                dgain.data_mut()[lo + c] += dyv * xh;
                dshift.data_mut()[lo + c] += dyv;
                let dxh = dyv * gain.data()[lo + c];
                sum_dxh += dxh;
                sum_dxh_xh += dxh * xh;
            }
            let inv_g = 1.0 / g as f64;
            for c in 0..g {
                let idx = t * d + lo + c;
                let dxh = dy.data()[idx] * gain.data()[lo + c];
                let xh = cache.xhat.data()[idx];
                dx.data_mut()[idx] = is * (dxh - inv_g * sum_dxh - xh * inv_g * sum_dxh_xh);
            }
        }
    }
    (dx, dgain, dshift)
}

/// Dense linear map y = x W^T + b applied per timestep. `w` is [out, in].
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Tensor,
    pub b: Option<Tensor>,
}

impl Linear {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (t_len, d_in) = (x.rows(), x.cols());
        if self.w.cols() != d_in {
            return Err(Error::ShapeMismatch(format!(
                "linear: x [{t_len},{d_in}] vs W {:?}",
                self.w.shape()
            )));
        }
        let mut y = matmul(x, false, &self.w, true);
        if let Some(b) = &self.b {
            for t in 0..t_len {
                let row = y.row_mut(t);
                for (v, bv) in row.iter_mut().zip(b.data()) {
                    *v += bv;
                }
            }
        }
        Ok(y)
    }

    /// Returns dx; accumulates dW and db into the given grads.
    pub fn backward(
        &self,
        x: &Tensor,
        dy: &Tensor,
        dw: &mut Tensor,
        db: Option<&mut Tensor>,
    ) -> Tensor {
        gemm_acc(dw, dy, true, x, false);
        if let Some(db) = db {
            for t in 0..dy.rows() {
                for (g, v) in db.data_mut().iter_mut().zip(dy.row(t)) {
                    *g += v;
                }
            }
        }
        matmul(dy, false, &self.w, false)
    }
}

/// Block-diagonal linear map: `num_blocks` independent square-ish blocks.
/// Parameter count for d -> d with N_h blocks is d^2/N_h (+ d with bias).
#[derive(Debug, Clone)]
pub struct BlockDiagLinear {
    /// Packed block weights, shape [num_blocks, out_b, in_b].
    pub w: Tensor,
    pub b: Option<Tensor>,
    pub num_blocks: usize,
    pub out_b: usize,
    pub in_b: usize,
}

impl BlockDiagLinear {
    pub fn new(w: Tensor, b: Option<Tensor>, num_blocks: usize) -> Result<Self> {
        let sh = w.shape();
        if sh.len() != 3 || sh[0] != num_blocks {
            return Err(Error::ShapeMismatch(format!(
                "block-diag weights {:?} for {num_blocks} blocks",
                sh
            )));
        }
        Ok(BlockDiagLinear {
            num_blocks,
            out_b: sh[1],
            in_b: sh[2],
            w,
            b,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.num_blocks * self.out_b
    }

    pub fn in_dim(&self) -> usize {
        self.num_blocks * self.in_b
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.as_ref().map_or(0, Tensor::len)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (t_len, d_in) = (x.rows(), x.cols());
        if d_in != self.in_dim() {
            return Err(Error::ShapeMismatch(format!(
                "block-diag: input dim {d_in}, expected {}",
                self.in_dim()
            )));
        }
        let mut y = Tensor::zeros(&[t_len, self.out_dim()]);
        for t in 0..t_len {
            let xr = x.row(t);
            let yr = y.row_mut(t);
            self.apply_row(xr, yr);
        }
        if let Some(b) = &self.b {
            for t in 0..t_len {
                for (v, bv) in y.row_mut(t).iter_mut().zip(b.data()) {
                    *v += bv;
                }
            }
        }
        Ok(y)
    }

    /// One row, no bias: yr += blocks applied to xr (yr must be zeroed or
    /// pre-filled by the caller as desired).
    pub fn apply_row(&self, xr: &[f64], yr: &mut [f64]) {
        let (nb, ob, ib) = (self.num_blocks, self.out_b, self.in_b);
        let w = self.w.data();
        for blk in 0..nb {
            let wb = &w[blk * ob * ib..(blk + 1) * ob * ib];
            let xb = &xr[blk * ib..(blk + 1) * ib];
            let yb = &mut yr[blk * ob..(blk + 1) * ob];
            for (o, yo) in yb.iter_mut().enumerate() {
                let mut acc = 0.0;
                let row = &wb[o * ib..(o + 1) * ib];
                for (wv, xv) in row.iter().zip(xb) {
                    acc += wv * xv;
                }
                *yo += acc;
            }
        }
    }

    /// Transpose application for the backward: xr_grad += W^T yr_grad.
    pub fn apply_row_transpose(&self, gy: &[f64], gx: &mut [f64]) {
        let (nb, ob, ib) = (self.num_blocks, self.out_b, self.in_b);
        let w = self.w.data();
        for blk in 0..nb {
            let wb = &w[blk * ob * ib..(blk + 1) * ob * ib];
            let gyb = &gy[blk * ob..(blk + 1) * ob];
            let gxb = &mut gx[blk * ib..(blk + 1) * ib];
            for (o, &g) in gyb.iter().enumerate() {
                let row = &wb[o * ib..(o + 1) * ib];
                for (xv, wv) in gxb.iter_mut().zip(row) {
                    *xv += wv * g;
                }
            }
        }
    }

    /// Weight-gradient accumulation for one timestep: dW += gy x^T per block.
    pub fn accumulate_weight_grad(&self, xr: &[f64], gy: &[f64], dw: &mut Tensor) {
        let (nb, ob, ib) = (self.num_blocks, self.out_b, self.in_b);
        let dwd = dw.data_mut();
        for blk in 0..nb {
            let base = blk * ob * ib;
            let xb = &xr[blk * ib..(blk + 1) * ib];
            let gyb = &gy[blk * ob..(blk + 1) * ob];
            for (o, &g) in gyb.iter().enumerate() {
                let row = &mut dwd[base + o * ib..base + (o + 1) * ib];
                for (wv, xv) in row.iter_mut().zip(xb) {
                    *wv += g * xv;
                }
            }
        }
    }

    /// Returns dx; accumulates dW/db for a full [T, d] sequence.
    pub fn backward(
        &self,
        x: &Tensor,
        dy: &Tensor,
        dw: &mut Tensor,
        mut db: Option<&mut Tensor>,
    ) -> Tensor {
        let t_len = x.rows();
        let mut dx = Tensor::zeros(&[t_len, self.in_dim()]);
        for t in 0..t_len {
            let gy = dy.row(t);
            self.accumulate_weight_grad(x.row(t), gy, dw);
            if let Some(db) = db.as_deref_mut() {
                for (g, v) in db.data_mut().iter_mut().zip(gy) {
                    *g += v;
                }
            }
            self.apply_row_transpose(gy, dx.row_mut(t));
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central_diff(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn sigmoid_symmetry_and_exp_identity() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(Activation::Exp.eval(0.0), 1.0);
    }

    #[test]
    fn swish_matches_finite_difference() {
        for &x in &[-2.0, 0.0, 3.0] {
            let analytic = Activation::Swish.deriv(x);
            let numeric = central_diff(swish, x, 1e-6);
            let denom = analytic.abs().max(1e-8);
            assert!(
                ((analytic - numeric) / denom).abs() < 1e-6,
                "swish' at {x}: {analytic} vs {numeric}"
            );
        }
    }

    #[test]
    fn all_activation_derivs_match_finite_difference() {
        let kinds = [
            Activation::Sigmoid,
            Activation::Tanh,
            Activation::Exp,
            Activation::Gelu,
            Activation::Swish,
            Activation::Identity,
        ];
        for kind in kinds {
            for &x in &[-1.7, -0.3, 0.0, 0.9, 2.4] {
                let a = kind.deriv(x);
                let n = central_diff(|v| kind.eval(v), x, 1e-6);
                assert!(
                    (a - n).abs() / a.abs().max(1.0) < 1e-5,
                    "{kind:?}' at {x}: {a} vs {n}"
                );
            }
        }
    }

    #[test]
    fn exp_overflow_reports_index() {
        let x = Tensor::from_vec(&[3], vec![0.0, 800.0, 1.0]).unwrap();
        let err = apply_activation(&x, Activation::Exp).unwrap_err();
        assert!(err.to_string().contains("index 1"), "{err}");
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::from_vec(&[4, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let k = Tensor::from_vec(&[1, 2], vec![1.0, 1.0]).unwrap();
        let b = Tensor::zeros(&[2]);
        let y = causal_conv1d(&x, &k, &b).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_impulse_response() {
        // unit impulse at t=0, w=4, d=1: y[t] = kernel[w-1-t] for t < w, else 0
        let t_len = 6;
        let mut xv = vec![0.0; t_len];
        xv[0] = 1.0;
        let x = Tensor::from_vec(&[t_len, 1], xv).unwrap();
        let k = Tensor::from_vec(&[4, 1], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = causal_conv1d(&x, &k, &b).unwrap();
        let expected = [0.4, 0.3, 0.2, 0.1, 0.0, 0.0];
        for (t, e) in expected.iter().enumerate() {
            assert!((y.data()[t] - e).abs() < 1e-15, "t={t}");
        }
    }

    #[test]
    fn conv_is_causal() {
        let mut rng = crate::tensor::Rng::new(3);
        let x = rng.normal_tensor(&[8, 3], 1.0);
        let k = rng.normal_tensor(&[4, 3], 1.0);
        let b = rng.normal_tensor(&[3], 1.0);
        let y = causal_conv1d(&x, &k, &b).unwrap();
        let t0 = 5;
        let mut x2 = x.clone();
        x2.data_mut()[t0 * 3 + 1] += 1.0;
        let y2 = causal_conv1d(&x2, &k, &b).unwrap();
        for t in 0..t0 {
            assert_eq!(y.row(t), y2.row(t), "output changed before perturbation");
        }
    }

    #[test]
    fn group_norm_constant_input_collapses() {
        let x = Tensor::full(&[2, 4], 3.7);
        let gain = Tensor::full(&[4], 1.0);
        let shift = Tensor::zeros(&[4]);
        let (y, _) = group_norm(&x, 2, &gain, &shift, GROUP_NORM_EPS).unwrap();
        for v in y.data() {
            assert!(v.abs() < 1e-10);
        }
    }

    #[test]
    fn group_norm_moments() {
        let mut rng = crate::tensor::Rng::new(11);
        let x = rng.normal_tensor(&[5, 16], 2.0);
        let gain = Tensor::full(&[16], 1.0);
        let shift = Tensor::zeros(&[16]);
        let (y, _) = group_norm(&x, 4, &gain, &shift, 0.0).unwrap();
        for t in 0..5 {
            for h in 0..4 {
                let s = &y.row(t)[h * 4..(h + 1) * 4];
                let mean = s.iter().sum::<f64>() / 4.0;
                let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
                assert!(mean.abs() < 1e-6);
                assert!((var - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn group_norm_shift_invariance() {
        let mut rng = crate::tensor::Rng::new(5);
        let x = rng.normal_tensor(&[3, 8], 1.0);
        let gain = rng.normal_tensor(&[8], 1.0);
        let shift = rng.normal_tensor(&[8], 1.0);
        let (y, _) = group_norm(&x, 2, &gain, &shift, GROUP_NORM_EPS).unwrap();
        let mut x2 = x.clone();
        for t in 0..3 {
            for c in 0..4 {
                x2.data_mut()[t * 8 + c] += 42.0; // constant on head 0 only
            }
        }
        let (y2, _) = group_norm(&x2, 2, &gain, &shift, GROUP_NORM_EPS).unwrap();
        for (a, b) in y.data().iter().zip(y2.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn group_norm_rejects_bad_heads() {
        let x = Tensor::zeros(&[2, 6]);
        let g = Tensor::zeros(&[6]);
        assert!(group_norm(&x, 4, &g, &g, GROUP_NORM_EPS).is_err());
    }

    #[test]
    fn linear_identity() {
        let w = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let lin = Linear { w, b: None };
        let x = Tensor::from_vec(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(lin.forward(&x).unwrap(), x);
    }

    #[test]
    fn block_diag_isolates_heads() {
        let mut rng = crate::tensor::Rng::new(1);
        let w = rng.normal_tensor(&[2, 3, 3], 1.0);
        let bd = BlockDiagLinear::new(w, None, 2).unwrap();
        // input only in second head
        let x = Tensor::from_vec(&[1, 6], vec![0.0, 0.0, 0.0, 1.0, -2.0, 0.5]).unwrap();
        let y = bd.forward(&x).unwrap();
        for c in 0..3 {
            assert_eq!(y.data()[c], 0.0);
        }
        assert!(y.row(0)[3..].iter().any(|v| *v != 0.0));
    }

    #[test]
    fn block_diag_param_count_formula() {
        // d -> d with N_h heads: d^2/N_h weights + d bias
        let d = 16;
        let nh = 4;
        let w = Tensor::zeros(&[nh, d / nh, d / nh]);
        let bd = BlockDiagLinear::new(w, Some(Tensor::zeros(&[d])), nh).unwrap();
        assert_eq!(bd.param_count(), d * d / nh + d);
    }

    #[test]
    fn primitive_backwards_match_finite_differences() {
        // scalar loss: sum of sin(y) over outputs, checked against central
        // differences for conv, group norm and both linear maps
        let mut rng = crate::tensor::Rng::new(99);
        let x = rng.normal_tensor(&[6, 4], 0.8);

        // conv
        let k = rng.normal_tensor(&[3, 4], 0.5);
        let b = rng.normal_tensor(&[4], 0.5);
        let loss = |x: &Tensor, k: &Tensor, b: &Tensor| -> f64 {
            causal_conv1d(x, k, b).unwrap().data().iter().map(|v| v.sin()).sum()
        };
        let y = causal_conv1d(&x, &k, &b).unwrap();
        let dy = y.map(f64::cos);
        let (dx, dk, db) = causal_conv1d_backward(&x, &k, &dy);
        let h = 1e-6;
        for idx in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let num = (loss(&xp, &k, &b) - loss(&xm, &k, &b)) / (2.0 * h);
            assert!((dx.data()[idx] - num).abs() / num.abs().max(1.0) < 1e-5);
        }
        for idx in 0..k.len() {
            let mut kp = k.clone();
            kp.data_mut()[idx] += h;
            let mut km = k.clone();
            km.data_mut()[idx] -= h;
            let num = (loss(&x, &kp, &b) - loss(&x, &km, &b)) / (2.0 * h);
            assert!((dk.data()[idx] - num).abs() / num.abs().max(1.0) < 1e-5);
        }
        for idx in 0..b.len() {
            let mut bp = b.clone();
            bp.data_mut()[idx] += h;
            let mut bm = b.clone();
            bm.data_mut()[idx] -= h;
            let num = (loss(&x, &k, &bp) - loss(&x, &k, &bm)) / (2.0 * h);
            assert!((db.data()[idx] - num).abs() / num.abs().max(1.0) < 1e-5);
        }

        // group norm
        let gain = rng.normal_tensor(&[4], 0.7);
        let shift = rng.normal_tensor(&[4], 0.7);
        let gloss = |x: &Tensor, gain: &Tensor, shift: &Tensor| -> f64 {
            group_norm(x, 2, gain, shift, GROUP_NORM_EPS)
                .unwrap()
                .0
                .data()
                .iter()
                .map(|v| v.sin())
                .sum()
        };
        let (y, cache) = group_norm(&x, 2, &gain, &shift, GROUP_NORM_EPS).unwrap();
        let dy = y.map(f64::cos);
        let (dx, dgain, dshift) = group_norm_backward(&cache, &gain, &dy);
        for idx in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let num = (gloss(&xp, &gain, &shift) - gloss(&xm, &gain, &shift)) / (2.0 * h);
            assert!((dx.data()[idx] - num).abs() / num.abs().max(1.0) < 1e-5);
        }
        for idx in 0..gain.len() {
            let mut gp = gain.clone();
            gp.data_mut()[idx] += h;
            let mut gm = gain.clone();
            gm.data_mut()[idx] -= h;
            let num = (gloss(&x, &gp, &shift) - gloss(&x, &gm, &shift)) / (2.0 * h);
            assert!((dgain.data()[idx] - num).abs() / num.abs().max(1.0) < 1e-5);
        }
        for idx in 0..shift.len() {
            let mut sp = shift.clone();
            sp.data_mut()[idx] += h;
            let mut sm = shift.clone();
            sm.data_mut()[idx] -= h;
            let num = (gloss(&x, &gain, &sp) - gloss(&x, &gain, &sm)) / (2.0 * h);
            assert!((dshift.data()[idx] - num).abs() / num.abs().max(1.0) < 1e-5);
        }

        // block-diag linear
        let w = rng.normal_tensor(&[2, 2, 2], 0.6);
        let bias = rng.normal_tensor(&[4], 0.3);
        let bd = BlockDiagLinear::new(w.clone(), Some(bias.clone()), 2).unwrap();
        let bdl = |w: &Tensor, bias: &Tensor, x: &Tensor| -> f64 {
            let bd = BlockDiagLinear::new(w.clone(), Some(bias.clone()), 2).unwrap();
            bd.forward(x).unwrap().data().iter().map(|v| v.sin()).sum()
        };
        let y = bd.forward(&x).unwrap();
        let dy = y.map(f64::cos);
        let mut dw = w.zeros_like();
        let mut dbias = bias.zeros_like();
        let dx = bd.backward(&x, &dy, &mut dw, Some(&mut dbias));
        for idx in 0..w.len() {
            let mut wp = w.clone();
            wp.data_mut()[idx] += h;
            let mut wm = w.clone();
            wm.data_mut()[idx] -= h;
            let num = (bdl(&wp, &bias, &x) - bdl(&wm, &bias, &x)) / (2.0 * h);
            assert!((dw.data()[idx] - num).abs() / num.abs().max(1.0) < 1e-5);
        }
        for idx in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let num = (bdl(&w, &bias, &xp) - bdl(&w, &bias, &xm)) / (2.0 * h);
            assert!((dx.data()[idx] - num).abs() / num.abs().max(1.0) < 1e-5);
        }
        for idx in 0..bias.len() {
            let mut bp = bias.clone();
            bp.data_mut()[idx] += h;
            let mut bm = bias.clone();
            bm.data_mut()[idx] -= h;
            let num = (bdl(&w, &bp, &x) - bdl(&w, &bm, &x)) / (2.0 * h);
            assert!((dbias.data()[idx] - num).abs() / num.abs().max(1.0) < 1e-5);
        }
    }
}
