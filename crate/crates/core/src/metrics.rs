//! Full-reference quality metrics and dataset evaluation.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::{synthesize_dir, ImageSample};
use crate::error::{shape_err, Error, Result};
use crate::model::{denoise_padded, Denoiser};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err!("metric inputs differ in shape: {} vs {}", a.shape(), b.shape()));
    }
    Ok(())
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.len().max(1) as f64)
}

/// `10 log10(peak^2 / MSE)` over every element; `+inf` when MSE is zero.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Separable valid-region filtering of one plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let src = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = g.iter().zip(&src[x..x + SSIM_WINDOW]).map(|(k, v)| k * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| g[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f32], b: &[f32], h: usize, w: usize, peak: f64, g: &[f64; SSIM_WINDOW]) -> f64 {
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let a: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let b: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let mu_a = filter_valid(&a, h, w, g);
    let mu_b = filter_valid(&b, h, w, g);
    let e_aa = filter_valid(&prod(&a, &a), h, w, g);
    let e_bb = filter_valid(&prod(&b, &b), h, w, g);
    let e_ab = filter_valid(&prod(&a, &b), h, w, g);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / mu_a.len() as f64
}

/// Single-scale SSIM, mean over channels and batch items.
pub fn ssim_with_peak(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    same_shape(a, b)?;
    let s = a.shape();
    if s.h < SSIM_WINDOW || s.w < SSIM_WINDOW {
        return Err(Error::Argument(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {}x{}",
            s.h, s.w
        )));
    }
    let g = gaussian_window();
    let plane = s.plane();
    let mut total = 0.0;
    for i in 0..s.n * s.c {
        let r = i * plane..(i + 1) * plane;
        total += ssim_plane(&a.data()[r.clone()], &b.data()[r], s.h, s.w, peak, &g);
    }
    Ok(total / (s.n * s.c) as f64)
}

pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    ssim_with_peak(a, b, 1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore {
    pub path: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub images: Vec<ImageScore>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl MetricReport {
    pub fn from_scores(images: Vec<ImageScore>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Argument("metric report needs at least one image".into()));
        }
        let n = images.len() as f64;
        let mean_psnr = images.iter().map(|s| s.psnr).sum::<f64>() / n;
        let mean_ssim = images.iter().map(|s| s.ssim).sum::<f64>() / n;
        Ok(MetricReport {
            images,
            mean_psnr,
            mean_ssim,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("image_path,psnr_db,ssim\n");
        for s in &self.images {
            let _ = writeln!(out, "{},{:.6},{:.6}", s.path, s.psnr, s.ssim);
        }
        let _ = writeln!(out, "MEAN,{:.6},{:.6}", self.mean_psnr, self.mean_ssim);
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Denoises every noisy member and scores it against its clean target.
/// Outputs are clamped to `[0, 1]` before measuring.
pub fn evaluate(d: &dyn Denoiser, pairs: &[ImageSample]) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::Argument("evaluation dataset is empty".into()));
    }
    let mut scores = Vec::with_capacity(pairs.len());
    for p in pairs {
        let out = denoise_padded(d, &p.noisy)?.clamp(0.0, 1.0);
        scores.push(ImageScore {
            path: p.source_path.clone(),
            psnr: psnr(&out, &p.clean, 1.0)?,
            ssim: ssim(&out, &p.clean)?,
        });
    }
    MetricReport::from_scores(scores)
}

/// Synthesizes noisy copies of the images in `dir` and evaluates them.
pub fn evaluate_dir(d: &dyn Denoiser, dir: impl AsRef<Path>, sigma: f32, seed: u64, grayscale: bool) -> Result<MetricReport> {
    let pairs = synthesize_dir(dir, sigma, seed, grayscale)?;
    evaluate(d, &pairs)
}
