//! Distortion metrics and rate-distortion points.
//!
//! SSIM uses an 11×11 Gaussian window (σ = 1.5) over valid positions only,
//! computed per channel and averaged. MS-SSIM downsamples by 2×2 mean pooling
//! between scales, clips negative contrast-structure terms to zero, and uses
//! as many of the five standard scales as the image supports.

use crate::bitstream::bits_per_pixel;
use crate::codec::{compress, CodecModel, ReconstructionMode};
use crate::dataio::{crop, pad_to_multiple};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.check_same_shape(b, "mse")?;
    if a.is_empty() {
        return Err(Error::invalid("mse of empty tensors"));
    }
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.len() as f64)
}

/// `10·log10(peak² / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / m).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-(d * d) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Valid-mode separable Gaussian filter of an `h × w` plane.
fn blur(x: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let k = SSIM_WINDOW;
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x0 in 0..ow {
            let src = &x[y * w + x0..y * w + x0 + k];
            rows[y * ow + x0] = src.iter().zip(g).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y0 in 0..oh {
        for (i, gi) in g.iter().enumerate() {
            let src = &rows[(y0 + i) * ow..(y0 + i + 1) * ow];
            for (o, s) in out[y0 * ow..(y0 + 1) * ow].iter_mut().zip(src) {
                *o += gi * s;
            }
        }
    }
    out
}

/// Mean SSIM and mean contrast-structure term of one plane.
fn plane_ssim(x: &[f64], y: &[f64], h: usize, w: usize, peak: f64) -> (f64, f64) {
    let g = gaussian_window();
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let (mu1, mu2) = (blur(x, h, w, &g), blur(y, h, w, &g));
    let (exx, eyy, exy) = (blur(&xx, h, w, &g), blur(&yy, h, w, &g), blur(&xy, h, w, &g));
    let n = mu1.len() as f64;
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..mu1.len() {
        let (m1, m2) = (mu1[i], mu2[i]);
        let s1 = exx[i] - m1 * m1;
        let s2 = eyy[i] - m2 * m2;
        let s12 = exy[i] - m1 * m2;
        let c = (2.0 * s12 + c2) / (s1 + s2 + c2);
        ssim += (2.0 * m1 * m2 + c1) / (m1 * m1 + m2 * m2 + c1) * c;
        cs += c;
    }
    (ssim / n, cs / n)
}

fn planes<'a>(a: &'a Tensor, b: &'a Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    a.check_same_shape(b, op)?;
    let (n, c, h, w) = a.dims4()?;
    Ok((n * c, h, w))
}

/// Single-scale SSIM averaged over batch and channels.
pub fn ssim(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    let (planes, h, w) = planes(a, b, "ssim")?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "ssim needs at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {h}×{w}"
        )));
    }
    let hw = h * w;
    let total: f64 = (0..planes)
        .map(|p| {
            let r = p * hw..(p + 1) * hw;
            plane_ssim(&a.data()[r.clone()], &b.data()[r], h, w, peak).0
        })
        .sum();
    Ok(total / planes as f64)
}

fn pool2(x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        for x0 in 0..ow {
            let i = 2 * y * w + 2 * x0;
            out.push(0.25 * (x[i] + x[i + 1] + x[i + w] + x[i + w + 1]));
        }
    }
    out
}

/// Number of scales an `h × w` image supports, at most five.
pub fn ms_ssim_scales(h: usize, w: usize) -> usize {
    let mut n = 0;
    let (mut h, mut w) = (h, w);
    while n < MS_SSIM_WEIGHTS.len() && h >= SSIM_WINDOW && w >= SSIM_WINDOW {
        n += 1;
        h /= 2;
        w /= 2;
    }
    n
}

/// Multi-scale SSIM averaged over batch and channels. Images too small for
/// five scales use the leading weights, renormalized to sum to one.
pub fn ms_ssim(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    let (planes, h, w) = planes(a, b, "ms_ssim")?;
    let levels = ms_ssim_scales(h, w);
    if levels == 0 {
        return Err(Error::invalid(format!(
            "ms_ssim needs at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {h}×{w}"
        )));
    }
    let wsum: f64 = MS_SSIM_WEIGHTS[..levels].iter().sum();
    let weights: Vec<f64> = MS_SSIM_WEIGHTS[..levels].iter().map(|v| v / wsum).collect();
    let hw = h * w;
    let mut total = 0.0;
    for p in 0..planes {
        let mut x = a.data()[p * hw..(p + 1) * hw].to_vec();
        let mut y = b.data()[p * hw..(p + 1) * hw].to_vec();
        let (mut lh, mut lw) = (h, w);
        let mut value = 1.0;
        for (level, wt) in weights.iter().enumerate() {
            let (s, cs) = plane_ssim(&x, &y, lh, lw, peak);
            let term = if level + 1 == levels { s } else { cs };
            value *= term.max(0.0).powf(*wt);
            if level + 1 < levels {
                x = pool2(&x, lh, lw);
                y = pool2(&y, lh, lw);
                lh /= 2;
                lw /= 2;
            }
        }
        total += value;
    }
    Ok(total / planes as f64)
}

/// One point of a rate-distortion curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RdPoint {
    /// 1-based.
    pub iteration: usize,
    pub bpp: f64,
    pub psnr_db: f64,
    pub ms_ssim: f64,
}

/// Metrics of the reconstruction after each of the first `t_max`
/// iterations, measured on the original (unpadded) pixels. `image` is
/// `1×3×H×W`; it is replicate-padded for coding.
pub fn rd_points(
    model: &CodecModel,
    image: &Tensor,
    t_max: usize,
    mode: ReconstructionMode,
) -> Result<Vec<RdPoint>> {
    let (padded, (h, w)) = pad_to_multiple(image, crate::codec::DOWNSAMPLING)?;
    let trace = compress(model, &padded, t_max, mode)?;
    trace
        .reconstructions
        .iter()
        .enumerate()
        .map(|(i, recon)| {
            let recon = crop(recon, h, w)?;
            Ok(RdPoint {
                iteration: i + 1,
                bpp: bits_per_pixel(i + 1, model.config.code_channels),
                psnr_db: psnr(image, &recon, 1.0)?,
                ms_ssim: ms_ssim(image, &recon, 1.0)?,
            })
        })
        .collect()
}
