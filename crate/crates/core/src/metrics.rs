//! Image quality metrics on `[N, C, H, W]` tensors with values in `[0, 1]`.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const PSNR_CAP_DB: f64 = 100.0;

fn check_pair<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<[usize; 4]> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    a.dims4()
}

/// `10·log10(1 / MSE)` on images clamped to `[0, 1]`; 100 dB when the MSE
/// is below `1e-10`.
pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    check_pair("psnr", a, b)?;
    let clamp = |v: T| v.as_f64().clamp(0.0, 1.0);
    let se: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = clamp(x) - clamp(y);
            d * d
        })
        .sum();
    let mse = se / a.len() as f64;
    if mse < 1e-10 {
        return Ok(PSNR_CAP_DB);
    }
    Ok(-10.0 * mse.log10())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - r;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable "valid" filtering of one plane.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ho, wo) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * wo];
    for i in 0..h {
        for j in 0..wo {
            rows[i * wo + j] = (0..SSIM_WINDOW).map(|t| k[t] * x[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for i in 0..ho {
        for j in 0..wo {
            out[i * wo + j] = (0..SSIM_WINDOW).map(|t| k[t] * rows[(i + t) * wo + j]).sum();
        }
    }
    out
}

/// Mean local SSIM over every full 11×11 Gaussian window (σ = 1.5, dynamic
/// range 1), averaged over channels and batch.
pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let [n, c, h, w] = check_pair("ssim", a, b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(
            "ssim",
            format!("{}x{} is smaller than the {}x{} window", h, w, SSIM_WINDOW, SSIM_WINDOW),
        ));
    }
    let k = gaussian_window();
    let c1 = (K1 * 1.0) * (K1 * 1.0);
    let c2 = (K2 * 1.0) * (K2 * 1.0);
    let plane = h * w;
    let mut total = 0.0;
    for p in 0..n * c {
        let x: Vec<f64> = a.data()[p * plane..(p + 1) * plane].iter().map(|v| v.as_f64()).collect();
        let y: Vec<f64> = b.data()[p * plane..(p + 1) * plane].iter().map(|v| v.as_f64()).collect();
        let prod = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| p * q).collect::<Vec<_>>();
        let mx = filter_valid(&x, h, w, &k);
        let my = filter_valid(&y, h, w, &k);
        let mxx = filter_valid(&prod(&x, &x), h, w, &k);
        let myy = filter_valid(&prod(&y, &y), h, w, &k);
        let mxy = filter_valid(&prod(&x, &y), h, w, &k);
        let mut s = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cov = mxy[i] - ux * uy;
            s += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += s / mx.len() as f64;
    }
    Ok(total / (n * c) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub image_id: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// CSV with a header, one row per image and a final `mean` row.
pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("image_id,psnr_db,ssim\n");
    for r in rows {
        let _ = writeln!(out, "{},{:.6},{:.6}", r.image_id, r.psnr_db, r.ssim);
    }
    let n = rows.len().max(1) as f64;
    let mp = rows.iter().map(|r| r.psnr_db).sum::<f64>() / n;
    let ms = rows.iter().map(|r| r.ssim).sum::<f64>() / n;
    let _ = writeln!(out, "mean,{:.6},{:.6}", mp, ms);
    out
}
