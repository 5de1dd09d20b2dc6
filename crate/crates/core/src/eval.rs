//! Pixelwise errors and windowed structural similarity.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, Result};
use crate::tensor::Field2D;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
/// `(0.01 L)²` and `(0.03 L)²` for a dynamic range `L = 1`.
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub mae: f64,
    pub rmse: f64,
    pub ssim: f64,
}

fn check(a: &Field2D, b: &Field2D) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(invalid_input(format!("fields differ in shape: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

pub fn mae(a: &Field2D, b: &Field2D) -> Result<f64> {
    check(a, b)?;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.data().len() as f64)
}

pub fn rmse(a: &Field2D, b: &Field2D) -> Result<f64> {
    check(a, b)?;
    Ok((a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data().len() as f64).sqrt())
}

/// Window side used on an `h × w` field: 11, or the largest odd size that fits.
pub fn ssim_window(h: usize, w: usize) -> usize {
    let m = h.min(w).min(SSIM_WINDOW);
    if m % 2 == 0 {
        m - 1
    } else {
        m
    }
}

/// Normalized 1D Gaussian taps; the 2D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size).map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering: rows first, then columns.
fn filter_valid(x: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let n = taps.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = taps.iter().enumerate().map(|(k, t)| t * x[i * w + j + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = taps.iter().enumerate().map(|(k, t)| t * rows[(i + k) * ow + j]).sum();
        }
    }
    out
}

/// Mean SSIM over every window position fully inside the field.
pub fn ssim(a: &Field2D, b: &Field2D) -> Result<f64> {
    check(a, b)?;
    let (h, w) = a.dims();
    let taps = gaussian_taps(ssim_window(h, w), SSIM_SIGMA);
    let (x, y) = (a.data(), b.data());
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<f64>>();
    let mx = filter_valid(x, h, w, &taps);
    let my = filter_valid(y, h, w, &taps);
    let xx = filter_valid(&prod(x, x), h, w, &taps);
    let yy = filter_valid(&prod(y, y), h, w, &taps);
    let xy = filter_valid(&prod(x, y), h, w, &taps);
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let (vx, vy, cxy) = (xx[i] - ux * ux, yy[i] - uy * uy, xy[i] - ux * uy);
            ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2)) / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2))
        })
        .sum();
    Ok(total / n as f64)
}

pub fn eval_metrics(y_hat: &Field2D, y: &Field2D) -> Result<EvalMetrics> {
    Ok(EvalMetrics { mae: mae(y_hat, y)?, rmse: rmse(y_hat, y)?, ssim: ssim(y_hat, y)? })
}
