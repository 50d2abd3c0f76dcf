use crate::autodiff::gaussian_kernel;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reported PSNR for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "metric inputs differ: {} vs {}",
            a.shape(),
            b.shape()
        )));
    }
    if a.numel() == 0 {
        return Err(Error::Shape("metric of empty images".into()));
    }
    Ok(())
}

/// Peak signal-to-noise ratio on unit range, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// 11-tap Gaussian window truncated from the σ = 1.5 kernel.
fn window() -> Vec<f64> {
    let full = gaussian_kernel(SSIM_SIGMA);
    let r = full.len() / 2;
    let half = SSIM_WINDOW / 2;
    let taps = &full[r - half..=r + half];
    let s: f64 = taps.iter().sum();
    taps.iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of one `h`×`w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for xo in 0..ow {
            rows[y * ow + xo] = k.iter().enumerate().map(|(i, kv)| kv * x[y * w + xo + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for yo in 0..oh {
        for xo in 0..ow {
            out[yo * ow + xo] = k.iter().enumerate().map(|(i, kv)| kv * rows[(yo + i) * ow + xo]).sum();
        }
    }
    out
}

/// Structural similarity with an 11×11 Gaussian window, averaged over valid
/// window positions and then over channels.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    let s = a.shape();
    if s.h < SSIM_WINDOW || s.w < SSIM_WINDOW {
        return Err(Error::Config(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            s.h, s.w
        )));
    }
    let k = window();
    let plane = s.plane();
    let mut total = 0.0;
    for p in 0..s.n * s.c {
        let x = &a.data()[p * plane..(p + 1) * plane];
        let y = &b.data()[p * plane..(p + 1) * plane];
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(u, v)| u * v).collect();
        let [mx, my, sxx, syy, sxy] =
            [x, y, &xx[..], &yy[..], &xy[..]].map(|t| filter_valid(t, s.h, s.w, &k));
        let sum: f64 = (0..mx.len())
            .map(|i| {
                let (m1, m2) = (mx[i], my[i]);
                let v1 = sxx[i] - m1 * m1;
                let v2 = syy[i] - m2 * m2;
                let cov = sxy[i] - m1 * m2;
                ((2.0 * m1 * m2 + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((m1 * m1 + m2 * m2 + SSIM_C1) * (v1 + v2 + SSIM_C2))
            })
            .sum();
        total += sum / mx.len() as f64;
    }
    Ok(total / (s.n * s.c) as f64)
}
