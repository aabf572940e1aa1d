//! Full-reference image quality metrics on `[C, H, W]` images in `[0, 1]`.

use crate::error::{dim_err, Error, Result};
use crate::tensor::{Real, Tensor};

/// Returned by [`psnr`] when the images are (numerically) identical.
pub const PSNR_CAP_DB: f64 = 99.0;
const PSNR_MIN_MSE: f64 = 1e-10;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_same<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err(op, a.shape(), b.shape()));
    }
    Ok(())
}

pub fn mse<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    check_same("mse", a, b)?;
    if a.numel() == 0 {
        return Err(Error::Metric("mse of empty images".into()));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum();
    Ok(sum / a.numel() as f64)
}

/// `10·log10(1 / MSE)` over all channels, capped at [`PSNR_CAP_DB`].
pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let m = mse(a, b)?;
    if m < PSNR_MIN_MSE {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * (1.0 / m).log10())
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of one `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = taps.len();
    let (ho, wo) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = (0..k).map(|t| taps[t] * plane[y * w + x + t]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..k).map(|t| taps[t] * rows[(y + t) * wo + x]).sum();
        }
    }
    (out, ho, wo)
}

fn planes<T: Real>(t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(dim_err("ssim", s, &[3, 0, 0])),
    }
}

/// Gaussian-window SSIM (dynamic range 1), averaged over channels and positions.
pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    check_same("ssim", a, b)?;
    let (c, h, w) = planes(a)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Metric(format!(
            "ssim needs extents of at least {SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let taps = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let range = ch * h * w..(ch + 1) * h * w;
        let x: Vec<f64> = a.data()[range.clone()].iter().map(|v| v.as_f64()).collect();
        let y: Vec<f64> = b.data()[range].iter().map(|v| v.as_f64()).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, _, _) = filter_valid(&x, h, w, &taps);
        let (my, _, _) = filter_valid(&y, h, w, &taps);
        let (sxx, _, _) = filter_valid(&xx, h, w, &taps);
        let (syy, _, _) = filter_valid(&yy, h, w, &taps);
        let (sxy, _, _) = filter_valid(&xy, h, w, &taps);
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            total += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        count += mx.len();
    }
    Ok(total / count as f64)
}
