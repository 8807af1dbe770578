//! Differentiable tensor operations.

use super::{broadcast_shape, broadcast_strides, reduce_broadcast, Tensor};
use crate::error::{Error, Result};

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_stable(x: f32) -> f32 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tensor {
    // ── elementwise ──────────────────────────────────────────────────

    fn unary(
        &self,
        f: impl Fn(f32) -> f32,
        df: impl Fn(f32) -> f32 + 'static,
    ) -> Tensor {
        let data: Vec<f32> = self.data().iter().map(|&v| f(v)).collect();
        let xs = self.storage();
        Tensor::from_op(self.shape().to_vec(), data, &[self], move |g| {
            let x = xs.borrow();
            vec![g.iter().zip(x.iter()).map(|(&g, &x)| g * df(x)).collect()]
        })
    }

    fn binary(
        &self,
        other: &Tensor,
        f: impl Fn(f32, f32) -> f32,
        dfa: impl Fn(f32, f32) -> f32 + 'static,
        dfb: impl Fn(f32, f32) -> f32 + 'static,
    ) -> Result<Tensor> {
        let out_shape = broadcast_shape(self.shape(), other.shape())?;
        let numel: usize = out_shape.iter().product();
        let sa = broadcast_strides(self.shape(), &out_shape);
        let sb = broadcast_strides(other.shape(), &out_shape);
        let a = self.data();
        let b = other.data();

        let mut data = vec![0.0f32; numel];
        let mut idx = vec![0usize; out_shape.len()];
        for v in data.iter_mut() {
            let (mut ia, mut ib) = (0usize, 0usize);
            for (d, &i) in idx.iter().enumerate() {
                ia += i * sa[d];
                ib += i * sb[d];
            }
            *v = f(a[ia], b[ib]);
            for d in (0..out_shape.len()).rev() {
                idx[d] += 1;
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        drop(a);
        drop(b);

        let (a_store, b_store) = (self.storage(), other.storage());
        let (a_shape, b_shape) = (self.shape().to_vec(), other.shape().to_vec());
        let (sa2, sb2) = (sa, sb);
        let out_shape2 = out_shape.clone();
        Ok(Tensor::from_op(out_shape, data, &[self, other], move |g| {
            let a = a_store.borrow();
            let b = b_store.borrow();
            let mut ga_full = vec![0.0f32; g.len()];
            let mut gb_full = vec![0.0f32; g.len()];
            let mut idx = vec![0usize; out_shape2.len()];
            for i in 0..g.len() {
                let (mut ia, mut ib) = (0usize, 0usize);
                for (d, &ix) in idx.iter().enumerate() {
                    ia += ix * sa2[d];
                    ib += ix * sb2[d];
                }
                ga_full[i] = g[i] * dfa(a[ia], b[ib]);
                gb_full[i] = g[i] * dfb(a[ia], b[ib]);
                for d in (0..out_shape2.len()).rev() {
                    idx[d] += 1;
                    if idx[d] < out_shape2[d] {
                        break;
                    }
                    idx[d] = 0;
                }
            }
            vec![
                reduce_broadcast(&ga_full, &out_shape2, &a_shape),
                reduce_broadcast(&gb_full, &out_shape2, &b_shape),
            ]
        }))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, |a, b| a + b, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, |a, b| a - b, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn silu(&self) -> Result<Tensor> {
        Ok(self.unary(
            |x| x * sigmoid(x),
            |x| {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            },
        ))
    }

    pub fn softplus(&self) -> Result<Tensor> {
        Ok(self.unary(softplus_stable, sigmoid))
    }

    pub fn abs(&self) -> Result<Tensor> {
        Ok(self.unary(
            |x| x.abs(),
            |x| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            },
        ))
    }

    pub fn exp(&self) -> Result<Tensor> {
        Ok(self.unary(|x| x.exp(), |x| x.exp()))
    }

    pub fn neg(&self) -> Result<Tensor> {
        Ok(self.unary(|x| -x, |_| -1.0))
    }

    pub fn scale(&self, c: f32) -> Result<Tensor> {
        Ok(self.unary(move |x| x * c, move |_| c))
    }

    pub fn add_scalar(&self, c: f32) -> Result<Tensor> {
        Ok(self.unary(move |x| x + c, |_| 1.0))
    }

    /// Clamp to [lo, hi]; gradient passes through inside the range.
    pub fn clamp(&self, lo: f32, hi: f32) -> Result<Tensor> {
        Ok(self.unary(
            move |x| x.clamp(lo, hi),
            move |x| if (lo..=hi).contains(&x) { 1.0 } else { 0.0 },
        ))
    }

    // ── reductions ───────────────────────────────────────────────────

    pub fn sum(&self) -> Result<Tensor> {
        let total: f64 = self.data().iter().map(|&v| v as f64).sum();
        let n = self.numel();
        Ok(Tensor::from_op(vec![1], vec![total as f32], &[self], move |g| {
            vec![vec![g[0]; n]]
        }))
    }

    pub fn mean(&self) -> Result<Tensor> {
        let n = self.numel();
        if n == 0 {
            return Err(Error::InvalidArgument("mean of empty tensor".into()));
        }
        let total: f64 = self.data().iter().map(|&v| v as f64).sum();
        let inv = 1.0 / n as f32;
        Ok(Tensor::from_op(vec![1], vec![(total / n as f64) as f32], &[self], move |g| {
            vec![vec![g[0] * inv; n]]
        }))
    }

    // ── structure ────────────────────────────────────────────────────

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::ShapeMismatch {
                left: self.shape().to_vec(),
                right: shape.to_vec(),
            });
        }
        let data = self.to_vec();
        Ok(Tensor::from_op(shape.to_vec(), data, &[self], |g| vec![g.to_vec()]))
    }

    /// Concatenate two tensors along `axis`; all other dimensions must match.
    pub fn concat(&self, other: &Tensor, axis: usize) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != sb.len()
            || axis >= sa.len()
            || sa.iter().zip(sb).enumerate().any(|(d, (x, y))| d != axis && x != y)
        {
            return Err(Error::ShapeMismatch { left: sa.to_vec(), right: sb.to_vec() });
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let (la, lb) = (sa[axis], sb[axis]);
        let mut shape = sa.to_vec();
        shape[axis] = la + lb;

        let a = self.data();
        let b = other.data();
        let mut data = Vec::with_capacity(a.len() + b.len());
        for o in 0..outer {
            data.extend_from_slice(&a[o * la * inner..(o + 1) * la * inner]);
            data.extend_from_slice(&b[o * lb * inner..(o + 1) * lb * inner]);
        }
        drop(a);
        drop(b);

        Ok(Tensor::from_op(shape, data, &[self, other], move |g| {
            let mut ga = Vec::with_capacity(outer * la * inner);
            let mut gb = Vec::with_capacity(outer * lb * inner);
            let chunk = (la + lb) * inner;
            for o in 0..outer {
                let base = o * chunk;
                ga.extend_from_slice(&g[base..base + la * inner]);
                gb.extend_from_slice(&g[base + la * inner..base + chunk]);
            }
            vec![ga, gb]
        }))
    }

    // ── linear algebra ───────────────────────────────────────────────

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::DimMismatch(format!(
                "matmul needs [m,k]x[k,n], got {:?} x {:?}",
                sa, sb
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let a = self.data();
        let b = other.data();
        let mut data = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f64;
                for l in 0..k {
                    acc += a[i * k + l] as f64 * b[l * n + j] as f64;
                }
                data[i * n + j] = acc as f32;
            }
        }
        drop(a);
        drop(b);

        let (a_store, b_store) = (self.storage(), other.storage());
        Ok(Tensor::from_op(vec![m, n], data, &[self, other], move |g| {
            let a = a_store.borrow();
            let b = b_store.borrow();
            // dA = g Bᵀ, dB = Aᵀ g
            let mut ga = vec![0.0f32; m * k];
            let mut gb = vec![0.0f32; k * n];
            for i in 0..m {
                for l in 0..k {
                    let mut acc = 0.0f64;
                    for j in 0..n {
                        acc += g[i * n + j] as f64 * b[l * n + j] as f64;
                    }
                    ga[i * k + l] = acc as f32;
                }
            }
            for l in 0..k {
                for j in 0..n {
                    let mut acc = 0.0f64;
                    for i in 0..m {
                        acc += a[i * k + l] as f64 * g[i * n + j] as f64;
                    }
                    gb[l * n + j] = acc as f32;
                }
            }
            vec![ga, gb]
        }))
    }

    /// 2D convolution, zero padding. `x` is [C_in,H,W], `kernel` is
    /// [C_out,C_in,kh,kw] with odd kh,kw; optional per-output-channel bias.
    pub fn conv2d(
        &self,
        kernel: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        pad_h: usize,
        pad_w: usize,
    ) -> Result<Tensor> {
        let xs = self.shape();
        let ks = kernel.shape();
        if xs.len() != 3 || ks.len() != 4 {
            return Err(Error::DimMismatch(format!(
                "conv2d needs [C,H,W] input and [Co,Ci,kh,kw] kernel, got {:?} and {:?}",
                xs, ks
            )));
        }
        let (ci, h, w) = (xs[0], xs[1], xs[2]);
        let (co, kci, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if kci != ci {
            return Err(Error::DimMismatch(format!(
                "conv2d channel mismatch: input {} vs kernel {}",
                ci, kci
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::InvalidArgument(format!("kernel size must be odd, got {}x{}", kh, kw)));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be >= 1".into()));
        }
        if let Some(b) = bias {
            if b.shape() != [co] {
                return Err(Error::ShapeMismatch { left: b.shape().to_vec(), right: vec![co] });
            }
        }
        let span_h = h + 2 * pad_h;
        let span_w = w + 2 * pad_w;
        if span_h < kh || span_w < kw || (span_h - kh) % stride != 0 || (span_w - kw) % stride != 0 {
            return Err(Error::InvalidArgument(format!(
                "non-integer conv output size for input {}x{}, kernel {}x{}, stride {}, padding {}x{}",
                h, w, kh, kw, stride, pad_h, pad_w
            )));
        }
        let oh = (span_h - kh) / stride + 1;
        let ow = (span_w - kw) / stride + 1;

        let x = self.data();
        let k = kernel.data();
        let bdata: Option<Vec<f32>> = bias.map(|b| b.to_vec());
        let mut data = vec![0.0f32; co * oh * ow];
        for c_out in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bdata.as_ref().map_or(0.0f64, |b| b[c_out] as f64);
                    for c_in in 0..ci {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad_h as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad_w as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[(c_in * h + iy as usize) * w + ix as usize];
                                let kv = k[((c_out * ci + c_in) * kh + ky) * kw + kx];
                                acc += xv as f64 * kv as f64;
                            }
                        }
                    }
                    data[(c_out * oh + oy) * ow + ox] = acc as f32;
                }
            }
        }
        drop(x);
        drop(k);

        let (x_store, k_store) = (self.storage(), kernel.storage());
        let has_bias = bias.is_some();
        let mut inputs: Vec<&Tensor> = vec![self, kernel];
        if let Some(b) = bias {
            inputs.push(b);
        }
        Ok(Tensor::from_op(vec![co, oh, ow], data, &inputs, move |g| {
            let x = x_store.borrow();
            let k = k_store.borrow();
            let mut gx = vec![0.0f32; ci * h * w];
            let mut gk = vec![0.0f32; co * ci * kh * kw];
            let mut gb = vec![0.0f32; co];
            for c_out in 0..co {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let go = g[(c_out * oh + oy) * ow + ox];
                        if go == 0.0 {
                            continue;
                        }
                        gb[c_out] += go;
                        for c_in in 0..ci {
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - pad_h as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - pad_w as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let xi = (c_in * h + iy as usize) * w + ix as usize;
                                    let kidx = ((c_out * ci + c_in) * kh + ky) * kw + kx;
                                    gx[xi] += go * k[kidx];
                                    gk[kidx] += go * x[xi];
                                }
                            }
                        }
                    }
                }
            }
            if has_bias {
                vec![gx, gk, gb]
            } else {
                vec![gx, gk]
            }
        }))
    }

    // ── normalization ────────────────────────────────────────────────

    /// Numerically stable softmax along `axis` (max subtraction, 64-bit sums).
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidArgument(format!(
                "softmax axis {} out of range for shape {:?}",
                axis, shape
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();

        let x = self.data();
        let mut data = vec![0.0f32; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let mut max = f32::NEG_INFINITY;
                for a in 0..len {
                    max = max.max(x[at(a)]);
                }
                let mut sum = 0.0f64;
                for a in 0..len {
                    let e = ((x[at(a)] - max) as f64).exp();
                    data[at(a)] = e as f32;
                    sum += e;
                }
                for a in 0..len {
                    data[at(a)] = (data[at(a)] as f64 / sum) as f32;
                }
            }
        }
        drop(x);

        let y = data.clone();
        Ok(Tensor::from_op(shape, data, &[self], move |g| {
            let mut gx = vec![0.0f32; g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |a: usize| (o * len + a) * inner + i;
                    let mut dot = 0.0f64;
                    for a in 0..len {
                        dot += y[at(a)] as f64 * g[at(a)] as f64;
                    }
                    for a in 0..len {
                        gx[at(a)] = (y[at(a)] as f64 * (g[at(a)] as f64 - dot)) as f32;
                    }
                }
            }
            vec![gx]
        }))
    }

    /// Layer normalization along `axis` with per-position affine (gamma,
    /// beta of length shape[axis]).
    pub fn layernorm(&self, axis: usize, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidArgument(format!(
                "layernorm axis {} out of range for shape {:?}",
                axis, shape
            )));
        }
        if eps <= 0.0 {
            return Err(Error::InvalidArgument("layernorm eps must be > 0".into()));
        }
        let len = shape[axis];
        if gamma.shape() != [len] || beta.shape() != [len] {
            return Err(Error::ShapeMismatch {
                left: gamma.shape().to_vec(),
                right: vec![len],
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();

        let x = self.data();
        let gm = gamma.data();
        let bt = beta.data();
        let mut data = vec![0.0f32; x.len()];
        let mut xhat = vec![0.0f32; x.len()];
        let mut ivars = vec![0.0f32; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let mut mean = 0.0f64;
                for a in 0..len {
                    mean += x[at(a)] as f64;
                }
                mean /= len as f64;
                let mut var = 0.0f64;
                for a in 0..len {
                    let d = x[at(a)] as f64 - mean;
                    var += d * d;
                }
                var /= len as f64;
                let ivar = 1.0 / (var + eps as f64).sqrt();
                ivars[o * inner + i] = ivar as f32;
                for a in 0..len {
                    let xh = ((x[at(a)] as f64 - mean) * ivar) as f32;
                    xhat[at(a)] = xh;
                    data[at(a)] = gm[a] * xh + bt[a];
                }
            }
        }
        drop(x);
        drop(gm);
        drop(bt);

        let gamma_store = gamma.storage();
        Ok(Tensor::from_op(shape, data, &[self, gamma, beta], move |g| {
            let gm = gamma_store.borrow();
            let mut gx = vec![0.0f32; g.len()];
            let mut ggamma = vec![0.0f32; len];
            let mut gbeta = vec![0.0f32; len];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |a: usize| (o * len + a) * inner + i;
                    let ivar = ivars[o * inner + i] as f64;
                    let mut sum_dxhat = 0.0f64;
                    let mut sum_dxhat_xhat = 0.0f64;
                    for a in 0..len {
                        let dxhat = g[at(a)] as f64 * gm[a] as f64;
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat[at(a)] as f64;
                        ggamma[a] += g[at(a)] * xhat[at(a)];
                        gbeta[a] += g[at(a)];
                    }
                    let n = len as f64;
                    for a in 0..len {
                        let dxhat = g[at(a)] as f64 * gm[a] as f64;
                        gx[at(a)] = (ivar
                            * (dxhat - sum_dxhat / n - xhat[at(a)] as f64 * sum_dxhat_xhat / n))
                            as f32;
                    }
                }
            }
            vec![gx, ggamma, gbeta]
        }))
    }

    // ── spatial ──────────────────────────────────────────────────────

    /// Block-average downsampling of a [C,H,W] tensor by an integer factor.
    pub fn down_average(&self, factor: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 3 {
            return Err(Error::DimMismatch(format!("expected [C,H,W], got {:?}", s)));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::InvalidArgument(format!(
                "spatial size {}x{} not divisible by factor {}",
                h, w, factor
            )));
        }
        let (oh, ow) = (h / factor, w / factor);
        let x = self.data();
        let mut data = vec![0.0f32; c * oh * ow];
        let inv = 1.0 / (factor * factor) as f64;
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f64;
                    for dy in 0..factor {
                        for dx in 0..factor {
                            acc += x[(ch * h + oy * factor + dy) * w + ox * factor + dx] as f64;
                        }
                    }
                    data[(ch * oh + oy) * ow + ox] = (acc * inv) as f32;
                }
            }
        }
        drop(x);

        Ok(Tensor::from_op(vec![c, oh, ow], data, &[self], move |g| {
            let mut gx = vec![0.0f32; c * h * w];
            let inv = 1.0 / (factor * factor) as f32;
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let go = g[(ch * oh + oy) * ow + ox] * inv;
                        for dy in 0..factor {
                            for dx in 0..factor {
                                gx[(ch * h + oy * factor + dy) * w + ox * factor + dx] += go;
                            }
                        }
                    }
                }
            }
            vec![gx]
        }))
    }

    /// Bilinear upsampling of a [C,H,W] tensor by an integer factor
    /// (half-pixel centers, edge clamped).
    pub fn up_bilinear(&self, factor: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 3 {
            return Err(Error::DimMismatch(format!("expected [C,H,W], got {:?}", s)));
        }
        if factor == 0 {
            return Err(Error::InvalidArgument("factor must be >= 1".into()));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h * factor, w * factor);
        // (dst_index, low_src, high_src, high_weight)
        let taps = |len: usize, olen: usize| -> Vec<(usize, usize, f32)> {
            (0..olen)
                .map(|o| {
                    let src = ((o as f32 + 0.5) / factor as f32 - 0.5).clamp(0.0, (len - 1) as f32);
                    let lo = src.floor() as usize;
                    let hi = (lo + 1).min(len - 1);
                    (lo, hi, src - lo as f32)
                })
                .collect()
        };
        let ty = taps(h, oh);
        let tx = taps(w, ow);

        let x = self.data();
        let mut data = vec![0.0f32; c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                let (y0, y1, wy) = ty[oy];
                for ox in 0..ow {
                    let (x0, x1, wx) = tx[ox];
                    let v00 = x[(ch * h + y0) * w + x0];
                    let v01 = x[(ch * h + y0) * w + x1];
                    let v10 = x[(ch * h + y1) * w + x0];
                    let v11 = x[(ch * h + y1) * w + x1];
                    let top = v00 * (1.0 - wx) + v01 * wx;
                    let bot = v10 * (1.0 - wx) + v11 * wx;
                    data[(ch * oh + oy) * ow + ox] = top * (1.0 - wy) + bot * wy;
                }
            }
        }
        drop(x);

        Ok(Tensor::from_op(vec![c, oh, ow], data, &[self], move |g| {
            let mut gx = vec![0.0f32; c * h * w];
            for ch in 0..c {
                for oy in 0..oh {
                    let (y0, y1, wy) = ty[oy];
                    for ox in 0..ow {
                        let (x0, x1, wx) = tx[ox];
                        let go = g[(ch * oh + oy) * ow + ox];
                        gx[(ch * h + y0) * w + x0] += go * (1.0 - wx) * (1.0 - wy);
                        gx[(ch * h + y0) * w + x1] += go * wx * (1.0 - wy);
                        gx[(ch * h + y1) * w + x0] += go * (1.0 - wx) * wy;
                        gx[(ch * h + y1) * w + x1] += go * wx * wy;
                    }
                }
            }
            vec![gx]
        }))
    }

    /// Forward-difference spatial gradient of a [C,H,W] tensor. The trailing
    /// row/column is zero.
    pub fn spatial_gradient(&self, axis: GradientAxis) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 3 {
            return Err(Error::DimMismatch(format!("expected [C,H,W], got {:?}", s)));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        if h < 2 || w < 2 {
            return Err(Error::InvalidArgument("spatial_gradient needs H,W >= 2".into()));
        }
        let x = self.data();
        let mut data = vec![0.0f32; c * h * w];
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let i = (ch * h + y) * w + xx;
                    data[i] = match axis {
                        GradientAxis::X if xx + 1 < w => x[i + 1] - x[i],
                        GradientAxis::Y if y + 1 < h => x[i + w] - x[i],
                        _ => 0.0,
                    };
                }
            }
        }
        drop(x);

        Ok(Tensor::from_op(s.to_vec(), data, &[self], move |g| {
            let mut gx = vec![0.0f32; c * h * w];
            for ch in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        let i = (ch * h + y) * w + xx;
                        match axis {
                            GradientAxis::X if xx + 1 < w => {
                                gx[i + 1] += g[i];
                                gx[i] -= g[i];
                            }
                            GradientAxis::Y if y + 1 < h => {
                                gx[i + w] += g[i];
                                gx[i] -= g[i];
                            }
                            _ => {}
                        }
                    }
                }
            }
            vec![gx]
        }))
    }

    // ── sequence scan ────────────────────────────────────────────────

    /// Per-channel linear recurrence over the row-major pixel sequence:
    /// h_k = a·h_{k-1} + b·x_k, y_k = c·h_k, h_0 = 0. `a`, `b`, `c` are
    /// per-channel scalars of shape [C].
    pub fn ssm_scan(&self, a: &Tensor, b: &Tensor, c: &Tensor) -> Result<Tensor> {
        let s = self.shape();
        if s.is_empty() {
            return Err(Error::DimMismatch("ssm_scan needs at least [C,L]".into()));
        }
        let channels = s[0];
        let len: usize = s[1..].iter().product();
        for p in [a, b, c] {
            if p.shape() != [channels] {
                return Err(Error::ShapeMismatch {
                    left: p.shape().to_vec(),
                    right: vec![channels],
                });
            }
        }
        let x = self.data();
        let (av, bv, cv) = (a.to_vec(), b.to_vec(), c.to_vec());
        let mut data = vec![0.0f32; x.len()];
        let mut hs = vec![0.0f32; x.len()];
        for ch in 0..channels {
            let mut h = 0.0f64;
            let (ac, bc, cc) = (av[ch] as f64, bv[ch] as f64, cv[ch] as f64);
            for k in 0..len {
                let i = ch * len + k;
                h = ac * h + bc * x[i] as f64;
                hs[i] = h as f32;
                data[i] = (cc * h) as f32;
            }
        }
        drop(x);

        let x_store = self.storage();
        Ok(Tensor::from_op(s.to_vec(), data, &[self, a, b, c], move |g| {
            let x = x_store.borrow();
            let mut gx = vec![0.0f32; x.len()];
            let mut ga = vec![0.0f32; channels];
            let mut gb = vec![0.0f32; channels];
            let mut gc = vec![0.0f32; channels];
            for ch in 0..channels {
                let (ac, bc, cc) = (av[ch] as f64, bv[ch] as f64, cv[ch] as f64);
                let (mut da, mut db, mut dc) = (0.0f64, 0.0f64, 0.0f64);
                let mut dh = 0.0f64; // dL/dh_{k+1} carried backwards through a
                for k in (0..len).rev() {
                    let i = ch * len + k;
                    dc += g[i] as f64 * hs[i] as f64;
                    let dhk = cc * g[i] as f64 + ac * dh;
                    let h_prev = if k == 0 { 0.0 } else { hs[i - 1] as f64 };
                    da += h_prev * dhk;
                    db += x[i] as f64 * dhk;
                    gx[i] = (bc * dhk) as f32;
                    dh = dhk;
                }
                ga[ch] = da as f32;
                gb[ch] = db as f32;
                gc[ch] = dc as f32;
            }
            vec![gx, ga, gb, gc]
        }))
    }

    // ── pixel mutual learning ────────────────────────────────────────

    /// Correlation-softmax exchange between two aligned feature maps.
    ///
    /// For each pixel, the query feature vector is dotted against each of
    /// the k×k zero-padded neighborhood features of `context`; the softmax
    /// of those correlations weights the neighborhood aggregation.
    pub fn pixel_mutual_learning(&self, context: &Tensor, window: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 3 || context.shape().len() != 3 || s != context.shape() {
            return Err(Error::ShapeMismatch {
                left: s.to_vec(),
                right: context.shape().to_vec(),
            });
        }
        if window % 2 == 0 || window == 0 {
            return Err(Error::InvalidArgument(format!("window must be odd, got {}", window)));
        }
        let (f, h, w) = (s[0], s[1], s[2]);
        let r = (window / 2) as isize;
        let k2 = window * window;

        let q = self.data();
        let n = context.data();
        let mut data = vec![0.0f32; f * h * w];
        let mut weights = vec![0.0f32; h * w * k2];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                // correlations over the window, zero-padded outside
                let mut scores = vec![0.0f64; k2];
                let mut m = 0usize;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (ny, nx) = (y as isize + dy, x as isize + dx);
                        if ny >= 0 && ny < h as isize && nx >= 0 && nx < w as isize {
                            let np = ny as usize * w + nx as usize;
                            let mut dot = 0.0f64;
                            for c in 0..f {
                                dot += q[c * h * w + p] as f64 * n[c * h * w + np] as f64;
                            }
                            scores[m] = dot;
                        }
                        m += 1;
                    }
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0f64;
                for sc in scores.iter_mut() {
                    *sc = (*sc - max).exp();
                    sum += *sc;
                }
                let mut m = 0usize;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let wgt = (scores[m] / sum) as f32;
                        weights[p * k2 + m] = wgt;
                        let (ny, nx) = (y as isize + dy, x as isize + dx);
                        if ny >= 0 && ny < h as isize && nx >= 0 && nx < w as isize {
                            let np = ny as usize * w + nx as usize;
                            for c in 0..f {
                                data[c * h * w + p] += wgt * n[c * h * w + np];
                            }
                        }
                        m += 1;
                    }
                }
            }
        }
        drop(q);
        drop(n);

        let (q_store, n_store) = (self.storage(), context.storage());
        Ok(Tensor::from_op(s.to_vec(), data, &[self, context], move |g| {
            let q = q_store.borrow();
            let n = n_store.borrow();
            let mut gq = vec![0.0f32; f * h * w];
            let mut gn = vec![0.0f32; f * h * w];
            let mut neighbor = vec![0usize; k2]; // flat index or usize::MAX when padded
            for y in 0..h {
                for x in 0..w {
                    let p = y * w + x;
                    let mut m = 0usize;
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let (ny, nx) = (y as isize + dy, x as isize + dx);
                            neighbor[m] = if ny >= 0 && ny < h as isize && nx >= 0 && nx < w as isize
                            {
                                ny as usize * w + nx as usize
                            } else {
                                usize::MAX
                            };
                            m += 1;
                        }
                    }
                    // dL/dw_m and softmax backward
                    let mut dw = vec![0.0f64; k2];
                    let mut dot = 0.0f64;
                    for m in 0..k2 {
                        if neighbor[m] != usize::MAX {
                            let np = neighbor[m];
                            let mut acc = 0.0f64;
                            for c in 0..f {
                                acc += g[c * h * w + p] as f64 * n[c * h * w + np] as f64;
                            }
                            dw[m] = acc;
                        }
                        dot += weights[p * k2 + m] as f64 * dw[m];
                    }
                    for m in 0..k2 {
                        let wgt = weights[p * k2 + m] as f64;
                        let ds = wgt * (dw[m] - dot);
                        if neighbor[m] != usize::MAX {
                            let np = neighbor[m];
                            for c in 0..f {
                                gq[c * h * w + p] += (ds * n[c * h * w + np] as f64) as f32;
                                gn[c * h * w + np] += (wgt * g[c * h * w + p] as f64
                                    + ds * q[c * h * w + p] as f64)
                                    as f32;
                            }
                        }
                    }
                }
            }
            vec![gq, gn]
        }))
    }
}

/// Axis selector for `spatial_gradient`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientAxis {
    X,
    Y,
}
