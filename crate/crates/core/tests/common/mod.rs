//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use std::path::Path;

use grnc::dataio::{to_image, write_ppm};
use grnc::Tensor;

// Produced by tests/reference/ssim_reference.py from the pairs
// gradient(64, 64) vs noisy(.., 1, 0.1) and textured(256, 256) vs noisy(.., 2, 0.2).
pub const SSIM_64: f64 = 0.6304139540337913;
pub const SSIM_256: f64 = 0.43088663165960533;
pub const MS_SSIM_256: f64 = 0.9250208626877413;

const MASK_MUL: u64 = 6364136223846793005;
const MASK_ADD: u64 = 1442695040888963407;

/// Uniform `[0, 1)` samples from a 64-bit LCG; `tests/reference` rebuilds the
/// same sequence in Python.
pub fn lcg_uniform(seed: u64, n: usize) -> Vec<f64> {
    let mut s = seed;
    (0..n)
        .map(|_| {
            s = s.wrapping_mul(MASK_MUL).wrapping_add(MASK_ADD);
            (s >> 11) as f64 / (1u64 << 53) as f64
        })
        .collect()
}

fn planes(h: usize, w: usize, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
    Tensor::from_fn(&[1, 3, h, w], |i| {
        let c = i / (h * w);
        let y = (i / w) % h;
        let x = i % w;
        f(c as f64, y as f64, x as f64)
    })
}

pub fn gradient(h: usize, w: usize) -> Tensor {
    planes(h, w, |c, y, x| (x + y + 8.0 * c) / (h as f64 + w as f64 + 14.0))
}

pub fn textured(h: usize, w: usize) -> Tensor {
    planes(h, w, |c, y, x| {
        0.5 + 0.3 * (x * 0.11 + c).sin() * (y * 0.07 - 0.5 * c).cos()
    })
}

pub fn noisy(img: &Tensor, seed: u64, amp: f64) -> Tensor {
    let u = lcg_uniform(seed, img.len());
    let data = img
        .data()
        .iter()
        .zip(u)
        .map(|(v, u)| (v + amp * (u - 0.5)).clamp(0.0, 1.0))
        .collect();
    Tensor::new(img.shape(), data).unwrap()
}

/// A smooth, image-like `1×3×h×w` picture with a per-seed layout.
pub fn synthetic_image(seed: u64, h: usize, w: usize) -> Tensor {
    synthetic_family(seed as f64, h, w)
}

/// The family behind [`synthetic_image`], continuous in `s`; fractional
/// values give pictures between the integer seeds.
pub fn synthetic_family(s: f64, h: usize, w: usize) -> Tensor {
    planes(h, w, |c, y, x| {
        let v = 0.5
            + 0.25 * (x * (0.1 + 0.03 * s) + y * 0.07 * (c + 1.0) + s).sin()
            + 0.15 * (y * 0.2 - x * 0.05 * s + c).cos();
        v.clamp(0.0, 1.0)
    })
}

/// Writes `synthetic_image` as an 8-bit PPM and returns the tensor that the
/// file decodes to.
pub fn write_synthetic_ppm(path: &Path, seed: u64, h: usize, w: usize) -> Tensor {
    let img = to_image(&synthetic_image(seed, h, w)).unwrap();
    write_ppm(path, &img).unwrap();
    grnc::dataio::to_tensor(&img)
}

/// A random but valid stream: header plus ±1 codes of the matching shape.
pub fn random_stream(
    rng: &mut impl rand::Rng,
) -> (grnc::bitstream::BitstreamHeader, Vec<Tensor>) {
    use grnc::codec::ReconstructionMode;
    let ph = 16 * rng.gen_range(1..=6u32);
    let pw = 16 * rng.gen_range(1..=6u32);
    let mut digest = [0u8; 32];
    rng.fill(&mut digest);
    let header = grnc::bitstream::BitstreamHeader {
        original_width: rng.gen_range(pw - 15..=pw),
        original_height: rng.gen_range(ph - 15..=ph),
        padded_width: pw,
        padded_height: ph,
        iterations: rng.gen_range(1..=8),
        code_channels: rng.gen_range(1..=40),
        mode: if rng.gen() {
            ReconstructionMode::Additive
        } else {
            ReconstructionMode::OneShot
        },
        model_digest: digest,
    };
    let shape = header.code_shape();
    let codes = (0..header.iterations)
        .map(|_| Tensor::from_fn(&shape, |_| if rng.gen() { 1.0 } else { -1.0 }))
        .collect();
    (header, codes)
}
