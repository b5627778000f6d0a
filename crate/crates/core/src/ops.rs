//! Forward kernels for the neural primitives, plus the adjoint kernels the
//! tape uses. Everything here is a pure function of its inputs.

use crate::error::{Error, Result};
use crate::tensor::{shape_str, Element, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Sigmoid,
    Softplus,
}

pub fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)` computed as `max(x, 0) + ln(1 + e^{-|x|})`, which never overflows.
pub fn softplus<T: Element>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn silu<T: Element>(x: T) -> T {
    x * sigmoid(x)
}

impl Activation {
    pub fn apply<T: Element>(self, x: T) -> T {
        match self {
            Activation::Silu => silu(x),
            Activation::Sigmoid => sigmoid(x),
            Activation::Softplus => softplus(x),
        }
    }

    pub fn derivative<T: Element>(self, x: T) -> T {
        let s = sigmoid(x);
        match self {
            Activation::Silu => s + x * s * (T::one() - s),
            Activation::Sigmoid => s * (T::one() - s),
            Activation::Softplus => s,
        }
    }
}

pub fn activation<T: Element>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    x.map(|v| kind.apply(v))
}

/// `y[..., j] = Σ_i x[..., i] · w[i, j] + b[j]`.
pub fn linear<T: Element>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (c_in, c_out) = linear_dims(x, w, b)?;
    let rows = x.numel() / c_in;
    let mut out = match b {
        Some(b) => {
            let mut v = Vec::with_capacity(rows * c_out);
            for _ in 0..rows {
                v.extend_from_slice(b.data());
            }
            v
        }
        None => vec![T::zero(); rows * c_out],
    };
    T::gemm(rows, c_in, c_out, x.data(), w.data(), T::one(), &mut out);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = c_out;
    Tensor::new(&shape, out)
}

fn linear_dims<T: Element>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<(usize, usize)> {
    let (c_in, c_out) = match w.shape() {
        [i, o] => (*i, *o),
        _ => {
            return Err(Error::shape(
                "linear",
                format!("weight must be rank 2, got {}", shape_str(w.shape())),
            ))
        }
    };
    if x.channels() != c_in {
        return Err(Error::shape(
            "linear",
            format!("x {} vs weight {}", shape_str(x.shape()), shape_str(w.shape())),
        ));
    }
    if let Some(b) = b {
        if b.shape() != [c_out] {
            return Err(Error::shape(
                "linear",
                format!("bias {} vs weight {}", shape_str(b.shape()), shape_str(w.shape())),
            ));
        }
    }
    Ok((c_in, c_out))
}

/// Gradients of [`linear`]: `(dx, dw, db)`.
pub fn linear_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    need: [bool; 3],
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let (c_in, c_out) = (w.shape()[0], w.shape()[1]);
    let rows = x.numel() / c_in;
    let dx = need[0].then(|| {
        let mut d = vec![T::zero(); rows * c_in];
        T::gemm_nt(rows, c_out, c_in, dy.data(), w.data(), T::zero(), &mut d);
        Tensor::new(x.shape(), d).expect("dx shape")
    });
    let dw = need[1].then(|| {
        let mut d = vec![T::zero(); c_in * c_out];
        T::gemm_tn(c_in, rows, c_out, x.data(), dy.data(), T::zero(), &mut d);
        Tensor::new(w.shape(), d).expect("dw shape")
    });
    let db = need[2].then(|| column_sums(dy));
    (dx, dw, db)
}

/// Sum over every axis but the last.
pub fn column_sums<T: Element>(t: &Tensor<T>) -> Tensor<T> {
    let c = t.channels();
    let mut out = vec![T::zero(); c];
    for row in t.data().chunks_exact(c) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o = *o + v;
        }
    }
    Tensor::new(&[c], out).expect("column sums")
}

/// Per-channel 2D convolution with zero "same" padding on `[B, H, W, C]`.
pub fn conv2d_depthwise<T: Element>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (b, h, w, c) = x.dims4("conv2d_depthwise")?;
    let k = conv_kernel_size(kernel, c)?;
    if let Some(bias) = bias {
        if bias.shape() != [c] {
            return Err(Error::shape(
                "conv2d_depthwise",
                format!("bias {} for {c} channels", shape_str(bias.shape())),
            ));
        }
    }
    let pad = (k / 2) as isize;
    let xd = x.data();
    let kd = kernel.data();
    let mut out = vec![T::zero(); x.numel()];
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let o = &mut out[((bi * h + i) * w + j) * c..][..c];
                if let Some(bias) = bias {
                    o.copy_from_slice(bias.data());
                }
                for u in 0..k {
                    let ii = i as isize + u as isize - pad;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for v in 0..k {
                        let jj = j as isize + v as isize - pad;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        let xin = &xd[((bi * h + ii as usize) * w + jj as usize) * c..][..c];
                        let kk = &kd[(u * k + v) * c..][..c];
                        for ch in 0..c {
                            o[ch] = o[ch] + xin[ch] * kk[ch];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(x.shape(), out)
}

fn conv_kernel_size<T: Element>(kernel: &Tensor<T>, c: usize) -> Result<usize> {
    match *kernel.shape() {
        [k1, k2, kc] if k1 == k2 && kc == c => {
            if k1 % 2 == 0 {
                Err(Error::Config(format!(
                    "depthwise conv needs an odd kernel size for same padding, got {k1}"
                )))
            } else {
                Ok(k1)
            }
        }
        _ => Err(Error::shape(
            "conv2d_depthwise",
            format!("kernel {} for {c} channels", shape_str(kernel.shape())),
        )),
    }
}

/// Gradients of [`conv2d_depthwise`]: `(dx, dkernel, dbias)`.
pub fn conv2d_depthwise_backward<T: Element>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    dy: &Tensor<T>,
    need: [bool; 3],
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let (b, h, w, c) = x.dims4("conv2d_depthwise").expect("checked in forward");
    let k = kernel.shape()[0];
    let pad = (k / 2) as isize;
    let xd = x.data();
    let kd = kernel.data();
    let gd = dy.data();
    let mut dx = need[0].then(|| vec![T::zero(); x.numel()]);
    let mut dk = need[1].then(|| vec![T::zero(); kernel.numel()]);
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let g = &gd[((bi * h + i) * w + j) * c..][..c];
                for u in 0..k {
                    let ii = i as isize + u as isize - pad;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for v in 0..k {
                        let jj = j as isize + v as isize - pad;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        let at = ((bi * h + ii as usize) * w + jj as usize) * c;
                        let kat = (u * k + v) * c;
                        if let Some(dx) = dx.as_mut() {
                            let kk = &kd[kat..][..c];
                            let d = &mut dx[at..][..c];
                            for ch in 0..c {
                                d[ch] = d[ch] + g[ch] * kk[ch];
                            }
                        }
                        if let Some(dk) = dk.as_mut() {
                            let xin = &xd[at..][..c];
                            let d = &mut dk[kat..][..c];
                            for ch in 0..c {
                                d[ch] = d[ch] + g[ch] * xin[ch];
                            }
                        }
                    }
                }
            }
        }
    }
    (
        dx.map(|d| Tensor::new(x.shape(), d).expect("dx")),
        dk.map(|d| Tensor::new(kernel.shape(), d).expect("dk")),
        need[2].then(|| column_sums(dy)),
    )
}

/// Normalized activations and reciprocal std-devs kept for the adjoint.
pub struct LayerNormCache<T> {
    pub xhat: Tensor<T>,
    pub rstd: Vec<T>,
}

/// Normalizes over the last axis with biased variance, then applies `gamma`, `beta`.
pub fn layer_norm<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    layer_norm_cached(x, gamma, beta, eps).map(|(y, _)| y)
}

pub fn layer_norm_cached<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let c = x.channels();
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            "layer_norm",
            format!(
                "x {} vs gamma {} / beta {}",
                shape_str(x.shape()),
                shape_str(gamma.shape()),
                shape_str(beta.shape())
            ),
        ));
    }
    let inv_c = T::one() / T::lit(c as f64);
    let mut xhat = vec![T::zero(); x.numel()];
    let mut y = vec![T::zero(); x.numel()];
    let mut rstd = Vec::with_capacity(x.rows());
    for ((row, xh), yr) in x
        .data()
        .chunks_exact(c)
        .zip(xhat.chunks_exact_mut(c))
        .zip(y.chunks_exact_mut(c))
    {
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) * inv_c;
        let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_c;
        let r = T::one() / (var + eps).sqrt();
        for i in 0..c {
            xh[i] = (row[i] - mean) * r;
            yr[i] = xh[i] * gamma.data()[i] + beta.data()[i];
        }
        rstd.push(r);
    }
    Ok((
        Tensor::new(x.shape(), y)?,
        LayerNormCache {
            xhat: Tensor::new(x.shape(), xhat)?,
            rstd,
        },
    ))
}

/// Gradients of [`layer_norm`]: `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward<T: Element>(
    cache: &LayerNormCache<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
    need: [bool; 3],
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let c = gamma.numel();
    let inv_c = T::one() / T::lit(c as f64);
    let xhat = cache.xhat.data();
    let dx = need[0].then(|| {
        let mut dx = vec![T::zero(); dy.numel()];
        for (r, ((g, xh), d)) in dy
            .data()
            .chunks_exact(c)
            .zip(xhat.chunks_exact(c))
            .zip(dx.chunks_exact_mut(c))
            .enumerate()
        {
            let mut mean_g = T::zero();
            let mut mean_gx = T::zero();
            for i in 0..c {
                let gh = g[i] * gamma.data()[i];
                mean_g = mean_g + gh;
                mean_gx = mean_gx + gh * xh[i];
            }
            mean_g = mean_g * inv_c;
            mean_gx = mean_gx * inv_c;
            let rs = cache.rstd[r];
            for i in 0..c {
                let gh = g[i] * gamma.data()[i];
                d[i] = rs * (gh - mean_g - xh[i] * mean_gx);
            }
        }
        Tensor::new(dy.shape(), dx).expect("dx")
    });
    let dgamma = need[1].then(|| {
        let mut dg = vec![T::zero(); c];
        for (g, xh) in dy.data().chunks_exact(c).zip(xhat.chunks_exact(c)) {
            for i in 0..c {
                dg[i] = dg[i] + g[i] * xh[i];
            }
        }
        Tensor::new(&[c], dg).expect("dgamma")
    });
    (dx, dgamma, need[2].then(|| column_sums(dy)))
}

/// Channel-to-space rearrangement on `[B, H, W, r·r·c]`:
/// `out[b, r·i + p, r·j + q, ch] = x[b, i, j, (r·p + q)·c + ch]`.
pub fn depth_to_space<T: Element>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (b, h, w, cc) = x.dims4("depth_to_space")?;
    if r == 0 || cc % (r * r) != 0 {
        return Err(Error::Config(format!(
            "depth_to_space: {cc} channels cannot be split into {r}x{r} blocks"
        )));
    }
    let c = cc / (r * r);
    let xd = x.data();
    let mut out = vec![T::zero(); x.numel()];
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let src = &xd[((bi * h + i) * w + j) * cc..][..cc];
                for p in 0..r {
                    for q in 0..r {
                        let dst = ((bi * h * r + r * i + p) * w * r + r * j + q) * c;
                        out[dst..dst + c].copy_from_slice(&src[(r * p + q) * c..][..c]);
                    }
                }
            }
        }
    }
    Tensor::new(&[b, h * r, w * r, c], out)
}

/// Inverse of [`depth_to_space`].
pub fn space_to_depth<T: Element>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (b, hh, ww, c) = x.dims4("space_to_depth")?;
    if r == 0 || hh % r != 0 || ww % r != 0 {
        return Err(Error::Config(format!(
            "space_to_depth: spatial {hh}x{ww} not divisible by {r}"
        )));
    }
    let (h, w) = (hh / r, ww / r);
    let cc = c * r * r;
    let xd = x.data();
    let mut out = vec![T::zero(); x.numel()];
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let dst = &mut out[((bi * h + i) * w + j) * cc..][..cc];
                for p in 0..r {
                    for q in 0..r {
                        let src = ((bi * hh + r * i + p) * ww + r * j + q) * c;
                        dst[(r * p + q) * c..][..c].copy_from_slice(&xd[src..src + c]);
                    }
                }
            }
        }
    }
    Tensor::new(&[b, h, w, cc], out)
}

/// Concatenates along the last axis; all leading dims must agree.
pub fn concat_channels<T: Element>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
    let lead = &first.shape()[..first.rank() - 1];
    for p in parts {
        if p.rank() != first.rank() || &p.shape()[..p.rank() - 1] != lead {
            return Err(Error::shape(
                "concat",
                format!("{} vs {}", shape_str(first.shape()), shape_str(p.shape())),
            ));
        }
    }
    let total: usize = parts.iter().map(|p| p.channels()).sum();
    let rows = first.rows();
    let mut out = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for p in parts {
            let c = p.channels();
            out.extend_from_slice(&p.data()[r * c..(r + 1) * c]);
        }
    }
    let mut shape = first.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = total;
    Tensor::new(&shape, out)
}

/// Splits the last axis into consecutive blocks of the given widths.
pub fn split_channels<T: Element>(x: &Tensor<T>, widths: &[usize]) -> Vec<Tensor<T>> {
    let total = x.channels();
    assert_eq!(widths.iter().sum::<usize>(), total, "split widths");
    let rows = x.rows();
    let mut outs: Vec<Vec<T>> = widths.iter().map(|w| Vec::with_capacity(rows * w)).collect();
    for row in x.data().chunks_exact(total) {
        let mut off = 0;
        for (o, &w) in outs.iter_mut().zip(widths) {
            o.extend_from_slice(&row[off..off + w]);
            off += w;
        }
    }
    outs.into_iter()
        .zip(widths)
        .map(|(d, &w)| {
            let mut shape = x.shape().to_vec();
            *shape.last_mut().expect("rank") = w;
            Tensor::new(&shape, d).expect("split")
        })
        .collect()
}

/// Reorders tokens of `[B, L, C]`: `y[b, k, :] = x[b, perm[k], :]`.
pub fn permute_tokens<T: Element>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let (b, l, c) = x.dims3("permute_tokens")?;
    if perm.len() != l {
        return Err(Error::shape(
            "permute_tokens",
            format!("permutation of length {} for {l} tokens", perm.len()),
        ));
    }
    let xd = x.data();
    let mut out = Vec::with_capacity(x.numel());
    for bi in 0..b {
        for &p in perm {
            out.extend_from_slice(&xd[(bi * l + p) * c..][..c]);
        }
    }
    Tensor::new(x.shape(), out)
}

/// Inverse permutation: `inv[perm[k]] = k`.
pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (k, &p) in perm.iter().enumerate() {
        inv[p] = k;
    }
    inv
}
