//! Single-level orthonormal Haar transform and per-sub-band consensus
//! attention.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The four Haar sub-bands of a [C,H,W] tensor, each [C,H/2,W/2].
#[derive(Debug, Clone)]
pub struct WaveletPyramid {
    pub ll: Tensor,
    pub lh: Tensor,
    pub hl: Tensor,
    pub hh: Tensor,
    pub source_shape: Vec<usize>,
}

/// Orthonormal Haar analysis: for each 2x2 block [a b; c d],
/// LL=(a+b+c+d)/2, LH=(a-b+c-d)/2, HL=(a+b-c-d)/2, HH=(a-b-c+d)/2.
pub fn dwt2(x: &Tensor) -> Result<WaveletPyramid> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::DimMismatch(format!("dwt2 expects [C,H,W], got {:?}", s)));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!(
            "dwt2 needs even nonzero H,W, got {}x{}",
            h, w
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let data = x.data();
    let mut ll = vec![0.0f32; c * oh * ow];
    let mut lh = vec![0.0f32; c * oh * ow];
    let mut hl = vec![0.0f32; c * oh * ow];
    let mut hh = vec![0.0f32; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for x2 in 0..ow {
                let a = data[(ch * h + 2 * y) * w + 2 * x2];
                let b = data[(ch * h + 2 * y) * w + 2 * x2 + 1];
                let cc = data[(ch * h + 2 * y + 1) * w + 2 * x2];
                let d = data[(ch * h + 2 * y + 1) * w + 2 * x2 + 1];
                let o = (ch * oh + y) * ow + x2;
                ll[o] = (a + b + cc + d) / 2.0;
                lh[o] = (a - b + cc - d) / 2.0;
                hl[o] = (a + b - cc - d) / 2.0;
                hh[o] = (a - b - cc + d) / 2.0;
            }
        }
    }
    let shape = [c, oh, ow];
    Ok(WaveletPyramid {
        ll: Tensor::new(&shape, ll)?,
        lh: Tensor::new(&shape, lh)?,
        hl: Tensor::new(&shape, hl)?,
        hh: Tensor::new(&shape, hh)?,
        source_shape: s.to_vec(),
    })
}

/// Exact inverse of `dwt2`.
pub fn idwt2(p: &WaveletPyramid) -> Result<Tensor> {
    let bs = p.ll.shape().to_vec();
    for band in [&p.lh, &p.hl, &p.hh] {
        if band.shape() != bs {
            return Err(Error::ShapeMismatch {
                left: band.shape().to_vec(),
                right: bs.clone(),
            });
        }
    }
    if bs.len() != 3 {
        return Err(Error::DimMismatch(format!("pyramid bands must be [C,H,W], got {:?}", bs)));
    }
    let (c, oh, ow) = (bs[0], bs[1], bs[2]);
    let (h, w) = (oh * 2, ow * 2);
    let (ll, lh, hl, hh) = (p.ll.data(), p.lh.data(), p.hl.data(), p.hh.data());
    let mut out = vec![0.0f32; c * h * w];
    for ch in 0..c {
        for y in 0..oh {
            for x2 in 0..ow {
                let o = (ch * oh + y) * ow + x2;
                let (s, dh, dv, dd) = (ll[o], lh[o], hl[o], hh[o]);
                out[(ch * h + 2 * y) * w + 2 * x2] = (s + dh + dv + dd) / 2.0;
                out[(ch * h + 2 * y) * w + 2 * x2 + 1] = (s - dh + dv - dd) / 2.0;
                out[(ch * h + 2 * y + 1) * w + 2 * x2] = (s + dh - dv - dd) / 2.0;
                out[(ch * h + 2 * y + 1) * w + 2 * x2 + 1] = (s - dh - dv + dd) / 2.0;
            }
        }
    }
    Tensor::new(&[c, h, w], out)
}

/// Query/key/value projections shared across the four sub-bands, plus the
/// dot-product scale (alpha = feature dimension, scores divide by sqrt(alpha)).
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub alpha: f32,
}

impl AttentionParams {
    /// Identity projections for `feat` channels.
    pub fn identity(feat: usize) -> AttentionParams {
        let mut eye = vec![0.0f32; feat * feat];
        for i in 0..feat {
            eye[i * feat + i] = 1.0;
        }
        AttentionParams {
            w_q: Tensor::new(&[feat, feat], eye.clone()).expect("square"),
            w_k: Tensor::new(&[feat, feat], eye.clone()).expect("square"),
            w_v: Tensor::new(&[feat, feat], eye).expect("square"),
            alpha: feat as f32,
        }
    }

    fn validate(&self, feat: usize) -> Result<()> {
        for w in [&self.w_q, &self.w_k, &self.w_v] {
            if w.shape() != [feat, feat] {
                return Err(Error::ShapeMismatch {
                    left: w.shape().to_vec(),
                    right: vec![feat, feat],
                });
            }
        }
        if !(self.alpha > 0.0) {
            return Err(Error::InvalidArgument("attention scale must be positive".into()));
        }
        Ok(())
    }
}

/// Scaled dot-product attention on one sub-band. Spatial positions are the
/// tokens, channels the features; the query band supplies Q, the context
/// band K and V. Output is reshaped back to the band shape.
pub fn subband_attention(
    query_band: &Tensor,
    context_band: &Tensor,
    params: &AttentionParams,
) -> Result<Tensor> {
    let qs = query_band.shape();
    let cs = context_band.shape();
    if qs.len() != 3 || cs.len() != 3 || qs[0] != cs[0] {
        return Err(Error::ShapeMismatch { left: qs.to_vec(), right: cs.to_vec() });
    }
    let feat = qs[0];
    params.validate(feat)?;
    let tq = qs[1] * qs[2];
    let tc = cs[1] * cs[2];

    // [C,H,W] -> tokens [T,C]
    let to_tokens = |t: &Tensor, tokens: usize| -> Vec<f64> {
        let d = t.data();
        let mut out = vec![0.0f64; tokens * feat];
        for c in 0..feat {
            for p in 0..tokens {
                out[p * feat + c] = d[c * tokens + p] as f64;
            }
        }
        out
    };
    let xq = to_tokens(query_band, tq);
    let xc = to_tokens(context_band, tc);
    let wq: Vec<f64> = params.w_q.data().iter().map(|&v| v as f64).collect();
    let wk: Vec<f64> = params.w_k.data().iter().map(|&v| v as f64).collect();
    let wv: Vec<f64> = params.w_v.data().iter().map(|&v| v as f64).collect();

    let proj = |x: &[f64], w: &[f64], tokens: usize| -> Vec<f64> {
        let mut out = vec![0.0f64; tokens * feat];
        for p in 0..tokens {
            for j in 0..feat {
                let mut acc = 0.0f64;
                for i in 0..feat {
                    acc += x[p * feat + i] * w[i * feat + j];
                }
                out[p * feat + j] = acc;
            }
        }
        out
    };
    let q = proj(&xq, &wq, tq);
    let k = proj(&xc, &wk, tc);
    let v = proj(&xc, &wv, tc);

    let scale = 1.0 / (params.alpha as f64).sqrt();
    let mut out = vec![0.0f32; feat * tq];
    let mut scores = vec![0.0f64; tc];
    for p in 0..tq {
        let mut max = f64::NEG_INFINITY;
        for t in 0..tc {
            let mut acc = 0.0f64;
            for c in 0..feat {
                acc += q[p * feat + c] * k[t * feat + c];
            }
            scores[t] = acc * scale;
            max = max.max(scores[t]);
        }
        let mut sum = 0.0f64;
        for t in 0..tc {
            scores[t] = (scores[t] - max).exp();
            sum += scores[t];
        }
        for c in 0..feat {
            let mut acc = 0.0f64;
            for t in 0..tc {
                acc += scores[t] / sum * v[t * feat + c];
            }
            out[c * tq + p] = acc as f32;
        }
    }
    Tensor::new(qs, out)
}

/// Wavelet consensus attention: decompose both latents, attend per band
/// (query's band attends to context's band), reassemble.
pub fn wca(query_latent: &Tensor, context_latent: &Tensor, params: &AttentionParams) -> Result<Tensor> {
    if query_latent.shape() != context_latent.shape() {
        return Err(Error::ShapeMismatch {
            left: query_latent.shape().to_vec(),
            right: context_latent.shape().to_vec(),
        });
    }
    let pq = dwt2(query_latent)?;
    let pc = dwt2(context_latent)?;
    let attended = WaveletPyramid {
        ll: subband_attention(&pq.ll, &pc.ll, params)?,
        lh: subband_attention(&pq.lh, &pc.lh, params)?,
        hl: subband_attention(&pq.hl, &pc.hl, params)?,
        hh: subband_attention(&pq.hh, &pc.hh, params)?,
        source_shape: pq.source_shape.clone(),
    };
    idwt2(&attended)
}

/// Blend self-attention with the mean of the cross-view attentions:
/// lambda * self + (1 - lambda) * mean(cross). The endpoints are exact.
pub fn blend_attention(self_out: &Tensor, cross_outs: &[Tensor], lambda: f32) -> Result<Tensor> {
    if cross_outs.is_empty() {
        return Err(Error::InvalidArgument("blend_attention needs >= 1 cross output".into()));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda {} outside [0,1]", lambda)));
    }
    for c in cross_outs {
        if c.shape() != self_out.shape() {
            return Err(Error::ShapeMismatch {
                left: c.shape().to_vec(),
                right: self_out.shape().to_vec(),
            });
        }
    }
    if lambda == 1.0 {
        return Ok(self_out.clone());
    }
    let n = cross_outs.len() as f32;
    let s = self_out.data();
    let mut out = vec![0.0f32; s.len()];
    if lambda == 0.0 && cross_outs.len() == 1 {
        return Ok(cross_outs[0].clone());
    }
    for (i, o) in out.iter_mut().enumerate() {
        let mut cross = 0.0f32;
        for c in cross_outs {
            cross += c.data()[i];
        }
        *o = lambda * s[i] + (1.0 - lambda) * cross / n;
    }
    Tensor::new(self_out.shape(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn constant_image_bands() {
        let v = 0.7f32;
        let x = Tensor::full(&[1, 4, 4], v);
        let p = dwt2(&x).unwrap();
        assert!(p.lh.data().iter().all(|&z| z.abs() < 1e-6));
        assert!(p.hl.data().iter().all(|&z| z.abs() < 1e-6));
        assert!(p.hh.data().iter().all(|&z| z.abs() < 1e-6));
        // orthonormal normalization puts 2v in LL
        assert!(p.ll.data().iter().all(|&z| (z - 2.0 * v).abs() < 1e-6));
        let back = idwt2(&p).unwrap();
        assert!(back.data().iter().all(|&z| (z - v).abs() < 1e-6));
    }

    #[test]
    fn dwt_matches_per_block_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(&[1, 8, 8], &mut rng);
        let p = dwt2(&x).unwrap();
        let d = x.data();
        for y in 0..4 {
            for xx in 0..4 {
                let a = d[2 * y * 8 + 2 * xx];
                let b = d[2 * y * 8 + 2 * xx + 1];
                let c = d[(2 * y + 1) * 8 + 2 * xx];
                let e = d[(2 * y + 1) * 8 + 2 * xx + 1];
                assert_eq!(p.ll.data()[y * 4 + xx], (a + b + c + e) / 2.0);
                assert_eq!(p.lh.data()[y * 4 + xx], (a - b + c - e) / 2.0);
                assert_eq!(p.hl.data()[y * 4 + xx], (a + b - c - e) / 2.0);
                assert_eq!(p.hh.data()[y * 4 + xx], (a - b - c + e) / 2.0);
            }
        }
    }

    #[test]
    fn odd_size_is_an_error() {
        let x = Tensor::zeros(&[1, 3, 4]);
        assert!(dwt2(&x).is_err());
    }

    #[test]
    fn perfect_reconstruction_and_parseval() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let c = rng.gen_range(1..4usize);
            let h = 2 * rng.gen_range(1..17usize);
            let w = 2 * rng.gen_range(1..17usize);
            let x = random_tensor(&[c, h, w], &mut rng);
            let p = dwt2(&x).unwrap();
            let back = idwt2(&p).unwrap();
            let max_abs = x
                .data()
                .iter()
                .zip(back.data().iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(max_abs <= 1e-5, "round trip error {}", max_abs);

            let energy = |t: &Tensor| t.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>();
            let ex = energy(&x);
            let eb = energy(&p.ll) + energy(&p.lh) + energy(&p.hl) + energy(&p.hh);
            assert!((ex - eb).abs() / ex.max(1e-12) <= 1e-4, "parseval {} vs {}", ex, eb);
        }
    }

    #[test]
    fn single_token_identity_attention() {
        let x = Tensor::new(&[3, 1, 1], vec![0.3, -0.7, 1.1]).unwrap();
        let p = AttentionParams::identity(3);
        let y = subband_attention(&x, &x, &p).unwrap();
        for (a, b) in x.data().iter().zip(y.data().iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn identical_context_tokens_average() {
        // two identical context tokens: weights are 0.5/0.5 for any query
        let q = Tensor::new(&[2, 1, 1], vec![5.0, -3.0]).unwrap();
        let ctx = Tensor::new(&[2, 1, 2], vec![1.0, 1.0, 2.0, 2.0]).unwrap();
        let p = AttentionParams::identity(2);
        let y = subband_attention(&q, &ctx, &p).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-6);
        assert!((y.data()[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn attention_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = random_tensor(&[8, 2, 2], &mut rng);
        let ctx = random_tensor(&[8, 2, 2], &mut rng);
        let mut params = AttentionParams::identity(8);
        params.w_q = random_tensor(&[8, 8], &mut rng);
        params.w_k = random_tensor(&[8, 8], &mut rng);
        params.w_v = random_tensor(&[8, 8], &mut rng);
        let y = subband_attention(&q, &ctx, &params).unwrap();

        // explicit 64-bit oracle
        let feat = 8usize;
        let tokens = 4usize;
        let get = |t: &Tensor, p: usize, c: usize| t.data()[c * tokens + p] as f64;
        let wget = |t: &Tensor, i: usize, j: usize| t.data()[i * feat + j] as f64;
        for p in 0..tokens {
            let qv: Vec<f64> = (0..feat)
                .map(|j| (0..feat).map(|i| get(&q, p, i) * wget(&params.w_q, i, j)).sum())
                .collect();
            let mut scores = vec![0.0f64; tokens];
            for t in 0..tokens {
                let kv: Vec<f64> = (0..feat)
                    .map(|j| (0..feat).map(|i| get(&ctx, t, i) * wget(&params.w_k, i, j)).sum())
                    .collect();
                scores[t] = qv.iter().zip(&kv).map(|(a, b)| a * b).sum::<f64>() / (feat as f64).sqrt();
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for c in 0..feat {
                let mut expect = 0.0f64;
                for t in 0..tokens {
                    let vv: f64 =
                        (0..feat).map(|i| get(&ctx, t, i) * wget(&params.w_v, i, c)).sum();
                    expect += exps[t] / sum * vv;
                }
                let got = y.data()[c * tokens + p] as f64;
                assert!((got - expect).abs() <= 1e-5, "{} vs {}", got, expect);
            }
        }
    }

    #[test]
    fn wca_equals_composed_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = random_tensor(&[4, 8, 8], &mut rng);
        let ctx = random_tensor(&[4, 8, 8], &mut rng);
        let params = AttentionParams::identity(4);
        let direct = wca(&q, &ctx, &params).unwrap();

        let pq = dwt2(&q).unwrap();
        let pc = dwt2(&ctx).unwrap();
        let manual = idwt2(&WaveletPyramid {
            ll: subband_attention(&pq.ll, &pc.ll, &params).unwrap(),
            lh: subband_attention(&pq.lh, &pc.lh, &params).unwrap(),
            hl: subband_attention(&pq.hl, &pc.hl, &params).unwrap(),
            hh: subband_attention(&pq.hh, &pc.hh, &params).unwrap(),
            source_shape: vec![4, 8, 8],
        })
        .unwrap();
        for (a, b) in direct.data().iter().zip(manual.data().iter()) {
            assert!((a - b).abs() <= 1e-5);
        }
        assert_eq!(direct.shape(), &[4, 8, 8]);
    }

    #[test]
    fn blend_endpoints_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = random_tensor(&[2, 4, 4], &mut rng);
        let c = random_tensor(&[2, 4, 4], &mut rng);
        let b1 = blend_attention(&s, std::slice::from_ref(&c), 1.0).unwrap();
        assert_eq!(b1.to_vec(), s.to_vec());
        let b0 = blend_attention(&s, std::slice::from_ref(&c), 0.0).unwrap();
        assert_eq!(b0.to_vec(), c.to_vec());
        // lambda=0.5 with cross = 2*self gives 1.5*self
        let double = s.scale(2.0).unwrap();
        let half = blend_attention(&s, std::slice::from_ref(&double), 0.5).unwrap();
        for (a, b) in half.data().iter().zip(s.data().iter()) {
            assert!((a - 1.5 * b).abs() < 1e-6);
        }
    }

    #[test]
    fn blend_rejects_empty_cross() {
        let s = Tensor::zeros(&[1, 2, 2]);
        assert!(blend_attention(&s, &[], 0.5).is_err());
    }
}
