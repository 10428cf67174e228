//! Forward and backward kernels for the layer primitives: 2-D convolution,
//! average pooling, fully-connected and ReLU.
//!
//! All kernels are bias-free and operate on a single sample (`[C, H, W]` maps
//! or flat vectors); the fully-connected kernels additionally accept a
//! leading batch dimension.

use crate::error::{config_err, Result};
use crate::tensor::Tensor;

/// Output extent of a sliding window along one axis.
pub fn window_out(input: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || k == 0 || input + 2 * padding < k {
        return None;
    }
    Some((input + 2 * padding - k) / stride + 1)
}

/// Valid output range `[lo, hi)` along one axis for kernel offset `kk`.
#[inline]
fn valid_range(kk: usize, stride: usize, pad: usize, input: usize, out: usize) -> (usize, usize) {
    // in = o*stride + kk - pad must lie in [0, input)
    let lo = if pad > kk { (pad - kk).div_ceil(stride) } else { 0 };
    let hi = if input + pad > kk {
        ((input - 1 + pad - kk) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn conv_dims(input: &Tensor, weights: &Tensor, stride: usize, padding: usize) -> Result<ConvDims> {
    let (c, h, w) = match input.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(config_err!("conv input must be [C,H,W], got {:?}", s)),
    };
    let (m, wc, kh, kw) = match weights.shape() {
        [m, wc, kh, kw] => (*m, *wc, *kh, *kw),
        s => return Err(config_err!("conv weights must be [M,C,k,k], got {:?}", s)),
    };
    if wc != c {
        return Err(config_err!("conv input has {} channels but weights expect {}", c, wc));
    }
    if kh != kw {
        return Err(config_err!("conv kernel must be square, got {}x{}", kh, kw));
    }
    let ho = window_out(h, kh, stride, padding).ok_or_else(|| {
        config_err!(
            "conv kernel {} (stride {}, padding {}) does not fit input height {}",
            kh,
            stride,
            padding,
            h
        )
    })?;
    let wo = window_out(w, kw, stride, padding).ok_or_else(|| {
        config_err!(
            "conv kernel {} (stride {}, padding {}) does not fit input width {}",
            kw,
            stride,
            padding,
            w
        )
    })?;
    Ok(ConvDims {
        c,
        h,
        w,
        m,
        k: kh,
        ho,
        wo,
        stride,
        padding,
    })
}

struct ConvDims {
    c: usize,
    h: usize,
    w: usize,
    m: usize,
    k: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    padding: usize,
}

/// Cross-correlation of `input [C,H,W]` with `weights [M,C,k,k]`.
pub fn conv2d_forward(input: &Tensor, weights: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let d = conv_dims(input, weights, stride, padding)?;
    let mut out = Tensor::zeros(&[d.m, d.ho, d.wo]);
    let x = input.data();
    let wt = weights.data();
    let o = out.data_mut();
    let kk = d.k * d.k;
    for m in 0..d.m {
        for c in 0..d.c {
            let xplane = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
            for ky in 0..d.k {
                let (oy0, oy1) = valid_range(ky, d.stride, d.padding, d.h, d.ho);
                for kx in 0..d.k {
                    let wv = wt[(m * d.c + c) * kk + ky * d.k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox0, ox1) = valid_range(kx, d.stride, d.padding, d.w, d.wo);
                    for oy in oy0..oy1 {
                        let iy = oy * d.stride + ky - d.padding;
                        let orow = &mut o[(m * d.ho + oy) * d.wo..(m * d.ho + oy + 1) * d.wo];
                        let xrow = &xplane[iy * d.w..(iy + 1) * d.w];
                        for ox in ox0..ox1 {
                            let ix = ox * d.stride + kx - d.padding;
                            orow[ox] += wv * xrow[ix];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d_forward`] with respect to its input and weights.
pub fn conv2d_backward(
    grad_out: &Tensor,
    input: &Tensor,
    weights: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Tensor)> {
    let grad_input = conv2d_backward_input(grad_out, input.shape(), weights, stride, padding)?;
    let grad_weights = conv2d_backward_weights(grad_out, input, weights.shape(), stride, padding)?;
    Ok((grad_input, grad_weights))
}

fn check_grad_out(grad_out: &Tensor, d: &ConvDims) -> Result<()> {
    if grad_out.shape() != [d.m, d.ho, d.wo] {
        return Err(config_err!(
            "conv grad_out shape {:?} does not match forward output [{}, {}, {}]",
            grad_out.shape(),
            d.m,
            d.ho,
            d.wo
        ));
    }
    Ok(())
}

pub fn conv2d_backward_input(
    grad_out: &Tensor,
    input_shape: &[usize],
    weights: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let probe = Tensor::zeros(input_shape);
    let d = conv_dims(&probe, weights, stride, padding)?;
    check_grad_out(grad_out, &d)?;
    let mut gi = probe;
    let g = grad_out.data();
    let wt = weights.data();
    let gx = gi.data_mut();
    let kk = d.k * d.k;
    for m in 0..d.m {
        for c in 0..d.c {
            for ky in 0..d.k {
                let (oy0, oy1) = valid_range(ky, d.stride, d.padding, d.h, d.ho);
                for kx in 0..d.k {
                    let wv = wt[(m * d.c + c) * kk + ky * d.k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox0, ox1) = valid_range(kx, d.stride, d.padding, d.w, d.wo);
                    for oy in oy0..oy1 {
                        let iy = oy * d.stride + ky - d.padding;
                        let grow = &g[(m * d.ho + oy) * d.wo..(m * d.ho + oy + 1) * d.wo];
                        let base = (c * d.h + iy) * d.w;
                        for ox in ox0..ox1 {
                            let ix = ox * d.stride + kx - d.padding;
                            gx[base + ix] += wv * grow[ox];
                        }
                    }
                }
            }
        }
    }
    Ok(gi)
}

pub fn conv2d_backward_weights(
    grad_out: &Tensor,
    input: &Tensor,
    weight_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let mut gw = Tensor::zeros(weight_shape);
    let d = conv_dims(input, &gw, stride, padding)?;
    check_grad_out(grad_out, &d)?;
    let g = grad_out.data();
    let x = input.data();
    let gwd = gw.data_mut();
    let kk = d.k * d.k;
    for m in 0..d.m {
        for c in 0..d.c {
            let xplane = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
            for ky in 0..d.k {
                let (oy0, oy1) = valid_range(ky, d.stride, d.padding, d.h, d.ho);
                for kx in 0..d.k {
                    let (ox0, ox1) = valid_range(kx, d.stride, d.padding, d.w, d.wo);
                    let mut acc = 0.0f32;
                    for oy in oy0..oy1 {
                        let iy = oy * d.stride + ky - d.padding;
                        let grow = &g[(m * d.ho + oy) * d.wo..(m * d.ho + oy + 1) * d.wo];
                        let xrow = &xplane[iy * d.w..(iy + 1) * d.w];
                        for ox in ox0..ox1 {
                            acc += grow[ox] * xrow[ox * d.stride + kx - d.padding];
                        }
                    }
                    gwd[(m * d.c + c) * kk + ky * d.k + kx] += acc;
                }
            }
        }
    }
    Ok(gw)
}

/// Average pooling with a `p x p` window and stride `s_p`, no padding.
pub fn avgpool_forward(input: &Tensor, p: usize, s_p: usize) -> Result<Tensor> {
    let (c, h, w) = match input.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(config_err!("pool input must be [C,H,W], got {:?}", s)),
    };
    if p > h || p > w {
        return Err(config_err!("pool window {}x{} larger than input {}x{}", p, p, h, w));
    }
    let ho = window_out(h, p, s_p, 0).ok_or_else(|| config_err!("invalid pool stride {}", s_p))?;
    let wo = window_out(w, p, s_p, 0).ok_or_else(|| config_err!("invalid pool stride {}", s_p))?;
    let inv = 1.0 / (p * p) as f32;
    let x = input.data();
    let mut out = Tensor::zeros(&[c, ho, wo]);
    let o = out.data_mut();
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for dy in 0..p {
                    let row = (ch * h + oy * s_p + dy) * w + ox * s_p;
                    acc += x[row..row + p].iter().sum::<f32>();
                }
                o[(ch * ho + oy) * wo + ox] = acc * inv;
            }
        }
    }
    Ok(out)
}

pub fn avgpool_backward(grad_out: &Tensor, input_shape: &[usize], p: usize, s_p: usize) -> Result<Tensor> {
    let (c, h, w) = match input_shape {
        [c, h, w] => (*c, *h, *w),
        s => return Err(config_err!("pool input must be [C,H,W], got {:?}", s)),
    };
    let ho = window_out(h, p, s_p, 0).ok_or_else(|| config_err!("invalid pool window"))?;
    let wo = window_out(w, p, s_p, 0).ok_or_else(|| config_err!("invalid pool window"))?;
    if grad_out.shape() != [c, ho, wo] {
        return Err(config_err!(
            "pool grad_out shape {:?} does not match [{}, {}, {}]",
            grad_out.shape(),
            c,
            ho,
            wo
        ));
    }
    let inv = 1.0 / (p * p) as f32;
    let g = grad_out.data();
    let mut gi = Tensor::zeros(input_shape);
    let gx = gi.data_mut();
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let v = g[(ch * ho + oy) * wo + ox] * inv;
                for dy in 0..p {
                    let row = (ch * h + oy * s_p + dy) * w + ox * s_p;
                    for gv in &mut gx[row..row + p] {
                        *gv += v;
                    }
                }
            }
        }
    }
    Ok(gi)
}

fn fc_dims(input: &Tensor, weights: &Tensor) -> Result<(usize, usize, usize)> {
    let (y, x) = match weights.shape() {
        [y, x] => (*y, *x),
        s => return Err(config_err!("fc weights must be [Y,X], got {:?}", s)),
    };
    let batch = match input.shape() {
        [b, xi] if *xi == x && input.len() != x => *b,
        _ => {
            if input.len() != x {
                return Err(config_err!(
                    "fc expects {} inputs, got {} (shape {:?})",
                    x,
                    input.len(),
                    input.shape()
                ));
            }
            1
        }
    };
    Ok((batch, y, x))
}

/// `weights [Y,X] · input`. A `[B,X]` input yields `[B,Y]`; anything else
/// with `X` elements is flattened and yields `[Y]`.
pub fn fc_forward(input: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let (batch, y, x) = fc_dims(input, weights)?;
    let wt = weights.data();
    let xin = input.data();
    let mut out = vec![0.0f32; batch * y];
    for b in 0..batch {
        let xv = &xin[b * x..(b + 1) * x];
        for (j, o) in out[b * y..(b + 1) * y].iter_mut().enumerate() {
            let row = &wt[j * x..(j + 1) * x];
            *o = row.iter().zip(xv).map(|(a, b)| a * b).sum();
        }
    }
    let shape = if batch == 1 && input.shape().len() != 2 {
        vec![y]
    } else {
        vec![batch, y]
    };
    Tensor::from_vec(&shape, out)
}

/// Returns `(grad_input, grad_weights)`; `grad_input` has the input's shape.
pub fn fc_backward(grad_out: &Tensor, input: &Tensor, weights: &Tensor) -> Result<(Tensor, Tensor)> {
    let (batch, y, x) = fc_dims(input, weights)?;
    if grad_out.len() != batch * y {
        return Err(config_err!(
            "fc grad_out has {} elements, expected {}",
            grad_out.len(),
            batch * y
        ));
    }
    let wt = weights.data();
    let xin = input.data();
    let g = grad_out.data();
    let mut gi = Tensor::zeros(input.shape());
    let mut gw = Tensor::zeros(weights.shape());
    {
        let gid = gi.data_mut();
        let gwd = gw.data_mut();
        for b in 0..batch {
            let xv = &xin[b * x..(b + 1) * x];
            let gx = &mut gid[b * x..(b + 1) * x];
            for j in 0..y {
                let gj = g[b * y + j];
                if gj == 0.0 {
                    continue;
                }
                let row = &wt[j * x..(j + 1) * x];
                let grow = &mut gwd[j * x..(j + 1) * x];
                for i in 0..x {
                    gx[i] += gj * row[i];
                    grow[i] += gj * xv[i];
                }
            }
        }
    }
    Ok((gi, gw))
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Passes the gradient where `pre > 0`; the subgradient at 0 is 0.
pub fn relu_backward(grad_out: &Tensor, pre: &Tensor) -> Result<Tensor> {
    grad_out.zip_map(pre, |g, x| if x > 0.0 { g } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn rand_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap()
    }

    /// Central finite differences of `sum(f(x) * g)` in f64 around `x`.
    fn fd_grad(x: &Tensor, g: &Tensor, f: impl Fn(&Tensor) -> Tensor, h: f32) -> Vec<f64> {
        let mut out = Vec::with_capacity(x.len());
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let dot = |t: &Tensor| -> f64 { t.data().iter().zip(g.data()).map(|(&a, &b)| a as f64 * b as f64).sum() };
            out.push((dot(&f(&xp)) - dot(&f(&xm))) / (2.0 * h as f64));
        }
        out
    }

    fn rel_err(a: &[f32], b: &[f64]) -> f64 {
        let num: f64 = a
            .iter()
            .zip(b)
            .map(|(&x, &y)| (x as f64 - y).powi(2))
            .sum::<f64>()
            .sqrt();
        let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-12);
        num / den
    }

    #[test]
    fn conv_zero_input_gives_zero() {
        let mut rng = Rng::new(0);
        let w = rand_tensor(&[2, 1, 3, 3], &mut rng);
        let out = conv2d_forward(&Tensor::zeros(&[1, 5, 5]), &w, 1, 1).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_degenerate_scalar() {
        let x = Tensor::from_vec(&[1, 1, 1], vec![1.5]).unwrap();
        let w = Tensor::from_vec(&[1, 1, 1, 1], vec![-2.0]).unwrap();
        let out = conv2d_forward(&x, &w, 1, 0).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert_eq!(out.data(), &[-3.0]);
        let g = Tensor::from_vec(&[1, 1, 1], vec![0.5]).unwrap();
        let (gi, gw) = conv2d_backward(&g, &x, &w, 1, 0).unwrap();
        assert_eq!(gi.data(), &[0.5 * -2.0]);
        assert_eq!(gw.data(), &[0.5 * 1.5]);
    }

    #[test]
    fn conv_ones_sum_to_nine() {
        let x = Tensor::full(&[1, 3, 3], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let out = conv2d_forward(&x, &w, 1, 0).unwrap();
        assert_eq!(out.data(), &[9.0]);
    }

    #[test]
    fn conv_shape_mismatch_is_named() {
        let x = Tensor::zeros(&[2, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        let err = conv2d_forward(&x, &w, 1, 1).unwrap_err().to_string();
        assert!(err.contains("2 channels") && err.contains("expect 3"), "{err}");
        let big = Tensor::zeros(&[1, 5, 5, 5]);
        assert!(conv2d_forward(&Tensor::zeros(&[1, 3, 3]), &big, 1, 0).is_err());
    }

    #[test]
    fn conv_zero_cotangent() {
        let mut rng = Rng::new(1);
        let x = rand_tensor(&[1, 4, 4], &mut rng);
        let w = rand_tensor(&[2, 1, 3, 3], &mut rng);
        let (gi, gw) = conv2d_backward(&Tensor::zeros(&[2, 4, 4]), &x, &w, 1, 1).unwrap();
        assert!(gi.data().iter().chain(gw.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
            let mut rng = Rng::new(7 + stride as u64 * 10 + pad as u64);
            let x = rand_tensor(&[1, 4, 4], &mut rng);
            let w = rand_tensor(&[2, 1, 3, 3], &mut rng);
            let out = conv2d_forward(&x, &w, stride, pad).unwrap();
            let g = rand_tensor(out.shape(), &mut rng);
            let (gi, gw) = conv2d_backward(&g, &x, &w, stride, pad).unwrap();
            let fd_x = fd_grad(&x, &g, |xx| conv2d_forward(xx, &w, stride, pad).unwrap(), 1e-3);
            let fd_w = fd_grad(&w, &g, |ww| conv2d_forward(&x, ww, stride, pad).unwrap(), 1e-3);
            assert!(rel_err(gi.data(), &fd_x) < 1e-3);
            assert!(rel_err(gw.data(), &fd_w) < 1e-3);
        }
    }

    #[test]
    fn avgpool_examples() {
        let x = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(avgpool_forward(&x, 2, 2).unwrap().data(), &[2.5]);
        let c = Tensor::full(&[2, 4, 4], 0.7);
        let out = avgpool_forward(&c, 2, 2).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.7).abs() < 1e-7));
        assert!(avgpool_forward(&Tensor::zeros(&[1, 2, 2]), 3, 1).is_err());
    }

    #[test]
    fn avgpool_backward_matches_finite_differences() {
        let mut rng = Rng::new(11);
        let x = rand_tensor(&[2, 4, 4], &mut rng);
        let g = rand_tensor(&[2, 2, 2], &mut rng);
        let gi = avgpool_backward(&g, x.shape(), 2, 2).unwrap();
        let fd = fd_grad(&x, &g, |xx| avgpool_forward(xx, 2, 2).unwrap(), 1e-2);
        assert!(rel_err(gi.data(), &fd) < 1e-4);
        // uniform spread of grad / p^2
        assert!((gi.data()[0] - g.data()[0] / 4.0).abs() < 1e-7);
    }

    #[test]
    fn fc_examples() {
        let x = Tensor::from_vec(&[3], vec![1.0, -2.0, 3.0]).unwrap();
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        assert_eq!(fc_forward(&x, &eye).unwrap(), x);
        let zero = fc_forward(&x, &Tensor::zeros(&[2, 3])).unwrap();
        assert_eq!(zero.data(), &[0.0, 0.0]);
        assert!(fc_forward(&x, &Tensor::zeros(&[2, 4])).is_err());
        let batch = Tensor::stack(&[x.clone(), x.clone()]).unwrap();
        assert_eq!(fc_forward(&batch, &eye).unwrap().shape(), &[2, 3]);
    }

    #[test]
    fn fc_backward_matches_finite_differences() {
        let mut rng = Rng::new(5);
        let x = rand_tensor(&[6], &mut rng);
        let w = rand_tensor(&[4, 6], &mut rng);
        let g = rand_tensor(&[4], &mut rng);
        let (gi, gw) = fc_backward(&g, &x, &w).unwrap();
        let fd_x = fd_grad(&x, &g, |xx| fc_forward(xx, &w).unwrap(), 1e-3);
        let fd_w = fd_grad(&w, &g, |ww| fc_forward(&x, ww).unwrap(), 1e-3);
        assert!(rel_err(gi.data(), &fd_x) < 1e-3);
        assert!(rel_err(gw.data(), &fd_w) < 1e-3);
    }

    #[test]
    fn relu_and_mask() {
        let x = Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let mask = relu_backward(&Tensor::full(&[3], 1.0), &x).unwrap();
        assert_eq!(mask.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_backward_matches_finite_differences_away_from_kink() {
        let mut rng = Rng::new(9);
        let x = rand_tensor(&[32], &mut rng).map(|v| if v.abs() < 0.05 { 0.5 } else { v });
        let g = rand_tensor(&[32], &mut rng);
        let gi = relu_backward(&g, &x).unwrap();
        let fd = fd_grad(&x, &g, relu, 1e-2);
        assert!(rel_err(gi.data(), &fd) < 1e-5);
    }
}
