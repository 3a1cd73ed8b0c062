//! Image quality metrics and evaluation reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Image;

/// Reported when the images are (nearly) identical.
pub const PSNR_CAP: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_size(b)?;
    let n = a.data.len().max(1) as f64;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n)
}

/// `10 log10(1 / MSE)` over all channels, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m < 1e-10 { PSNR_CAP } else { (10.0 * (1.0 / m).log10()).min(PSNR_CAP) })
}

/// PSNR over the pixels where `keep` is true.
pub fn masked_psnr(a: &Image, b: &Image, keep: &[bool]) -> Result<f64> {
    a.check_same_size(b)?;
    if keep.len() != a.num_pixels() {
        return Err(Error::LengthMismatch { what: "pixel mask", expected: a.num_pixels(), actual: keep.len() });
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for p in (0..a.num_pixels()).filter(|&p| keep[p]) {
        let (x, y) = (a.pixel(p), b.pixel(p));
        sum += (0..3).map(|c| (x[c] - y[c]).powi(2)).sum::<f64>();
        count += 3;
    }
    if count == 0 {
        return Err(Error::Config("no pixels selected for PSNR".into()));
    }
    let m = sum / count as f64;
    Ok(if m < 1e-10 { PSNR_CAP } else { (10.0 * (1.0 / m).log10()).min(PSNR_CAP) })
}

fn luma(img: &Image) -> Vec<f64> {
    (0..img.num_pixels())
        .map(|p| {
            let [r, g, b] = img.pixel(p);
            0.299 * r + 0.587 * g + 0.114 * b
        })
        .collect()
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-(i as f64 - half).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let total: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|v| v / total).collect();
    g.iter().flat_map(|a| g.iter().map(move |b| a * b)).collect()
}

/// Mean SSIM of the luma channels over every full window position.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_size(b)?;
    let (w, h) = (a.width, a.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::ImageTooSmall { width: w, height: h, window: SSIM_WINDOW });
    }
    let (x, y) = (luma(a), luma(b));
    let win = gaussian_window();
    let mut total = 0.0;
    let mut count = 0usize;
    for r0 in 0..=h - SSIM_WINDOW {
        for c0 in 0..=w - SSIM_WINDOW {
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..SSIM_WINDOW {
                for j in 0..SSIM_WINDOW {
                    let g = win[i * SSIM_WINDOW + j];
                    let p = (r0 + i) * w + c0 + j;
                    mx += g * x[p];
                    my += g * y[p];
                    xx += g * x[p] * x[p];
                    yy += g * y[p] * y[p];
                    xy += g * x[p] * y[p];
                }
            }
            let (vx, vy, cov) = (xx - mx * mx, yy - my * my, xy - mx * my);
            let num = (2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// One evaluated view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub view: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn mean_psnr(&self) -> f64 {
        self.rows.iter().map(|r| r.psnr).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn mean_ssim(&self) -> f64 {
        self.rows.iter().map(|r| r.ssim).sum::<f64>() / self.rows.len().max(1) as f64
    }

    /// Tab-separated table with a header and a closing `mean` row.
    pub fn to_table(&self) -> String {
        let mut out = String::from("view\tpsnr\tssim\n");
        for r in &self.rows {
            writeln!(out, "{}\t{:.4}\t{:.6}", r.view, r.psnr, r.ssim).unwrap();
        }
        writeln!(out, "mean\t{:.4}\t{:.6}", self.mean_psnr(), self.mean_ssim()).unwrap();
        out
    }
}
