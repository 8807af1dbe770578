//! Central finite-difference gradient verification.

use super::{zero_grad, Tensor};
use crate::error::Result;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compare the tape gradient of a scalar-valued function against central
/// finite differences at step `h`. Returns the max relative error over all
/// input coordinates.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let leaf = Tensor::param(x.shape(), x.to_vec())?;
    let loss = f(&leaf)?;
    loss.backward()?;
    let analytic = leaf.grad().expect("leaf requires grad");

    let probe = Tensor::new(x.shape(), x.to_vec())?;
    let mut max_err = 0.0f64;
    for i in 0..probe.numel() {
        let orig = probe.data()[i];
        let mut buf = probe.to_vec();
        buf[i] = (orig as f64 + h) as f32;
        probe.set_data(&buf);
        let fp = f(&probe)?.item() as f64;
        buf[i] = (orig as f64 - h) as f32;
        probe.set_data(&buf);
        let fm = f(&probe)?.item() as f64;
        buf[i] = orig;
        probe.set_data(&buf);
        let cd = (fp - fm) / (2.0 * h);
        max_err = max_err.max(rel_err(analytic[i] as f64, cd));
    }
    Ok(max_err)
}

/// Finite-difference check of a closure's gradient with respect to a set of
/// parameter leaves (perturbed in place). Returns the max relative error.
pub fn grad_check_params<F>(f: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn() -> Result<Tensor>,
{
    zero_grad(params);
    let loss = f()?;
    loss.backward()?;
    let analytic: Vec<Vec<f32>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    zero_grad(params);

    let mut max_err = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        for i in 0..p.numel() {
            let orig = p.data()[i];
            let mut buf = p.to_vec();
            buf[i] = (orig as f64 + h) as f32;
            p.set_data(&buf);
            let fp = f()?.item() as f64;
            buf[i] = (orig as f64 - h) as f32;
            p.set_data(&buf);
            let fm = f()?.item() as f64;
            buf[i] = orig;
            p.set_data(&buf);
            let cd = (fp - fm) / (2.0 * h);
            max_err = max_err.max(rel_err(analytic[pi][i] as f64, cd));
        }
    }
    Ok(max_err)
}

/// Finite differences against a 64-bit reference forward. The tape provides
/// the analytic gradients; `reference` recomputes the scalar from the raw
/// input values with f64 arithmetic, which keeps h=1e-3 differences above
/// the rounding floor. Returns the max relative error.
pub fn grad_check_ref<F, G>(f: F, reference: G, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
    G: Fn(&[f64]) -> f64,
{
    let leaf = Tensor::param(x.shape(), x.to_vec())?;
    let loss = f(&leaf)?;
    loss.backward()?;
    let analytic = leaf.grad().expect("leaf requires grad");

    let mut buf: Vec<f64> = x.to_vec().iter().map(|&v| v as f64).collect();
    let mut max_err = 0.0f64;
    for i in 0..buf.len() {
        let orig = buf[i];
        buf[i] = orig + h;
        let fp = reference(&buf);
        buf[i] = orig - h;
        let fm = reference(&buf);
        buf[i] = orig;
        let cd = (fp - fm) / (2.0 * h);
        max_err = max_err.max(rel_err(analytic[i] as f64, cd));
    }
    Ok(max_err)
}

/// `grad_check_ref` over a set of parameter leaves: `f` is the tape-side
/// scalar, `reference` the 64-bit scalar as a function of all parameter
/// buffers in order.
pub fn grad_check_params_ref<F, G>(f: F, reference: G, params: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn() -> Result<Tensor>,
    G: Fn(&[Vec<f64>]) -> f64,
{
    zero_grad(params);
    let loss = f()?;
    loss.backward()?;
    let analytic: Vec<Vec<f32>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    zero_grad(params);

    let mut buf: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.to_vec().iter().map(|&v| v as f64).collect())
        .collect();
    let mut max_err = 0.0f64;
    for pi in 0..buf.len() {
        for i in 0..buf[pi].len() {
            let orig = buf[pi][i];
            buf[pi][i] = orig + h;
            let fp = reference(&buf);
            buf[pi][i] = orig - h;
            let fm = reference(&buf);
            buf[pi][i] = orig;
            let cd = (fp - fm) / (2.0 * h);
            max_err = max_err.max(rel_err(analytic[pi][i] as f64, cd));
        }
    }
    Ok(max_err)
}
