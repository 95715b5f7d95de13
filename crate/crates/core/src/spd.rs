//! Single-pass reduction-enhancement.
//!
//! Every mip level of a tile is convolved directly from the full-resolution
//! reference with its own normalized sharpening kernel: a discrete Gaussian
//! plus a zero-mean Ricker (Mexican-hat) term. Accumulation is in `f64` and
//! no level is derived from another.

use serde::{Deserialize, Serialize};
use std::cell::RefCell;

use thiserror::Error;

use crate::pyramid::{TILE_BYTES, TILE_EDGE};

/// Deepest supported level: 256 / 2^3 = 32 px.
pub const MAX_MIP_LEVELS: u32 = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpdError {
    #[error("sigma must be finite and positive, got {0}")]
    Sigma(f64),
    #[error("beta must be finite and non-negative, got {0}")]
    Beta(f64),
    #[error("mip level {0} outside 1..={MAX_MIP_LEVELS}")]
    Level(u32),
}

/// 2D Ricker wavelet: `(1 / (pi s^4)) (1 - r^2 / (2 s^2)) exp(-r^2 / (2 s^2))`.
pub fn ricker2d(x: f64, y: f64, sigma: f64) -> Result<f64, SpdError> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(SpdError::Sigma(sigma));
    }
    let s2 = sigma * sigma;
    let r2 = (x * x + y * y) / s2;
    Ok((1.0 - 0.5 * r2) * (-0.5 * r2).exp() / (std::f64::consts::PI * s2 * s2))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MipParams {
    pub sigma_base: f64,
    pub beta: f64,
    pub levels: u32,
}

impl Default for MipParams {
    fn default() -> Self {
        Self {
            sigma_base: 1.0,
            beta: 2.0,
            levels: 3,
        }
    }
}

impl MipParams {
    pub fn validate(&self) -> Result<(), SpdError> {
        if !(self.sigma_base.is_finite() && self.sigma_base > 0.0) {
            return Err(SpdError::Sigma(self.sigma_base));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(SpdError::Beta(self.beta));
        }
        if self.levels > MAX_MIP_LEVELS {
            return Err(SpdError::Level(self.levels));
        }
        Ok(())
    }
}

/// Square convolution kernel for one reduction level.
#[derive(Debug, Clone, PartialEq)]
pub struct EnhanceKernel {
    pub level: u32,
    pub sigma: f64,
    pub radius: u32,
    /// Row-major `(2r+1)^2` grid; `coeffs[(v + r) * w + (u + r)]`.
    pub coeffs: Vec<f64>,
}

impl EnhanceKernel {
    pub fn width(&self) -> usize {
        2 * self.radius as usize + 1
    }

    /// Coefficient at offset `(u, v)`, each in `-r..=r`.
    pub fn at(&self, u: i32, v: i32) -> f64 {
        let r = self.radius as i32;
        self.coeffs[((v + r) * (2 * r + 1) + (u + r)) as usize]
    }

    pub fn sum(&self) -> f64 {
        self.coeffs.iter().sum()
    }
}

/// Builds `G(s_k) + beta * (Psi(s_k) - mean Psi)` with `s_k = sigma_base * 2^(k-1)`
/// on a grid of radius `ceil(3 s_k)`.
pub fn build_kernel(level: u32, sigma_base: f64, beta: f64) -> Result<EnhanceKernel, SpdError> {
    if level == 0 || level > MAX_MIP_LEVELS {
        return Err(SpdError::Level(level));
    }
    if !(sigma_base.is_finite() && sigma_base > 0.0) {
        return Err(SpdError::Sigma(sigma_base));
    }
    if !(beta.is_finite() && beta >= 0.0) {
        return Err(SpdError::Beta(beta));
    }
    let sigma = sigma_base * f64::powi(2.0, level as i32 - 1);
    let radius = (3.0 * sigma).ceil() as u32;
    let r = radius as i32;
    let offsets = || (-r..=r).flat_map(|v| (-r..=r).map(move |u| (u as f64, v as f64)));

    let gauss: Vec<f64> = offsets()
        .map(|(u, v)| (-(u * u + v * v) / (2.0 * sigma * sigma)).exp())
        .collect();
    let gauss_sum: f64 = gauss.iter().sum();
    let psi: Vec<f64> = offsets().map(|(u, v)| ricker2d(u, v, sigma).unwrap()).collect();
    let psi_mean = psi.iter().sum::<f64>() / psi.len() as f64;

    let coeffs = gauss
        .iter()
        .zip(&psi)
        .map(|(g, p)| g / gauss_sum + beta * (p - psi_mean))
        .collect();
    Ok(EnhanceKernel {
        level,
        sigma,
        radius,
        coeffs,
    })
}

/// One quantized mip level, `edge x edge` RGBA8.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MipLevel {
    pub edge: u32,
    pub pixels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MipChain {
    /// `levels[k - 1]` is the 2^k reduction.
    pub levels: Vec<MipLevel>,
}

pub const fn level_edge(level: u32) -> u32 {
    TILE_EDGE >> level
}

/// Precomputed kernels for a parameter set; shared read-only by all workers.
#[derive(Debug, Clone)]
pub struct Enhancer {
    params: MipParams,
    kernels: Vec<EnhanceKernel>,
}

impl Enhancer {
    pub fn new(params: MipParams) -> Result<Self, SpdError> {
        params.validate()?;
        let kernels = (1..=params.levels)
            .map(|k| build_kernel(k, params.sigma_base, params.beta))
            .collect::<Result<_, _>>()?;
        Ok(Self { params, kernels })
    }

    pub fn params(&self) -> &MipParams {
        &self.params
    }

    pub fn kernels(&self) -> &[EnhanceKernel] {
        &self.kernels
    }

    /// All levels before quantization, each `edge * edge * 4` values.
    pub fn generate_unquantized(&self, reference: &[u8]) -> Vec<Vec<f64>> {
        assert_eq!(reference.len(), TILE_BYTES, "reference tile must be full size");
        SCRATCH.with(|scratch| {
            let mut planar = scratch.borrow_mut();
            to_f64(reference, &mut planar);
            self.kernels.iter().map(|k| convolve_level(&planar, k)).collect()
        })
    }

    pub fn generate_mips(&self, reference: &[u8]) -> MipChain {
        let levels = self
            .generate_unquantized(reference)
            .into_iter()
            .zip(&self.kernels)
            .map(|(values, k)| MipLevel {
                edge: level_edge(k.level),
                pixels: quantize(&values),
            })
            .collect();
        MipChain { levels }
    }
}

/// Rounds half away from zero and clamps to `0..=255`.
pub fn quantize(values: &[f64]) -> Vec<u8> {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the required CPU feature was detected at runtime.
        return unsafe { quantize_avx2(values) };
    }
    quantize_impl(values)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn quantize_avx2(values: &[f64]) -> Vec<u8> {
    quantize_impl(values)
}

#[inline(always)]
fn quantize_impl(values: &[f64]) -> Vec<u8> {
    values.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect()
}

thread_local! {
    // The widened reference is 2 MiB; reusing it avoids page-faulting a
    // fresh allocation for every tile.
    static SCRATCH: RefCell<Vec<[f64; 4]>> = const { RefCell::new(Vec::new()) };
}

fn to_f64(reference: &[u8], out: &mut Vec<[f64; 4]>) {
    out.clear();
    out.extend(
        reference
            .chunks_exact(4)
            .map(|p| [p[0] as f64, p[1] as f64, p[2] as f64, p[3] as f64]),
    );
}

/// Strided convolution with clamp-to-edge taps: output texel `(i, j)` is
/// centred on reference pixel `(2^k i, 2^k j)`.
fn convolve_level(src: &[[f64; 4]], kernel: &EnhanceKernel) -> Vec<f64> {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
        // SAFETY: the required CPU features were detected at runtime.
        return unsafe { convolve_level_fma(src, kernel) };
    }
    convolve_level_impl::<false, false>(src, kernel)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn convolve_level_fma(src: &[[f64; 4]], kernel: &EnhanceKernel) -> Vec<f64> {
    use std::arch::x86_64::*;

    let mut out = convolve_level_impl::<true, true>(src, kernel);
    // Texels whose taps all lie inside the tile: one 4-channel vector per tap.
    const E: i32 = TILE_EDGE as i32;
    let stride = 1i32 << kernel.level;
    let edge = E / stride;
    let r = kernel.radius as i32;
    let w = kernel.width();
    let lo = (r + stride - 1) / stride;
    let hi = (E - 1 - r) / stride;
    let offsets: Vec<usize> = (0..kernel.coeffs.len()).map(|n| ((n / w) * E as usize + n % w) * 4).collect();
    let coeffs = &kernel.coeffs[..];
    let taps = coeffs.len();
    let whole = taps / 4 * 4;
    let base = src.as_ptr() as *const f64;
    for j in lo..=hi {
        let y0 = (j * stride - r) as usize;
        for i in lo..=hi {
            let corner = base.add((y0 * E as usize + (i * stride - r) as usize) * 4);
            let tap = |n: usize, acc: __m256d| {
                let c = _mm256_set1_pd(*coeffs.get_unchecked(n));
                _mm256_fmadd_pd(c, _mm256_loadu_pd(corner.add(*offsets.get_unchecked(n))), acc)
            };
            let mut a = [_mm256_setzero_pd(); 4];
            let mut n = 0;
            while n < whole {
                a[0] = tap(n, a[0]);
                a[1] = tap(n + 1, a[1]);
                a[2] = tap(n + 2, a[2]);
                a[3] = tap(n + 3, a[3]);
                n += 4;
            }
            for (t, m) in (whole..taps).enumerate() {
                a[t] = tap(m, a[t]);
            }
            let sum = _mm256_add_pd(_mm256_add_pd(a[0], a[1]), _mm256_add_pd(a[2], a[3]));
            let o = ((j * edge + i) * 4) as usize;
            _mm256_storeu_pd(out.as_mut_ptr().add(o), sum);
        }
    }
    out
}

#[inline(always)]
fn madd<const FMA: bool>(acc: f64, c: f64, p: f64) -> f64 {
    if FMA {
        c.mul_add(p, acc)
    } else {
        acc + c * p
    }
}

#[inline(always)]
fn convolve_level_impl<const FMA: bool, const BORDER_ONLY: bool>(src: &[[f64; 4]], kernel: &EnhanceKernel) -> Vec<f64> {
    const E: i32 = TILE_EDGE as i32;
    let stride = 1i32 << kernel.level;
    let edge = E / stride;
    let r = kernel.radius as i32;
    let w = kernel.width();
    let mut out = vec![0f64; (edge * edge * 4) as usize];
    let mut cols = vec![0usize; w];
    let mut rows = vec![0usize; w];

    for j in 0..edge {
        let cy = j * stride;
        for (v, row) in rows.iter_mut().enumerate() {
            *row = (cy - r + v as i32).clamp(0, E - 1) as usize * E as usize;
        }
        let row_inside = cy - r >= 0 && cy + r < E;
        for i in 0..edge {
            let cx = i * stride;
            if BORDER_ONLY && row_inside && cx - r >= 0 && cx + r < E {
                continue;
            }
            // Four independent accumulators keep the FMA pipeline busy.
            let mut lanes = [[0f64; 4]; 4];
            if cx - r >= 0 && cx + r < E {
                let x0 = (cx - r) as usize;
                for (krow, &row) in kernel.coeffs.chunks_exact(w).zip(&rows) {
                    let line = &src[row + x0..row + x0 + w];
                    let mut kc = krow.chunks_exact(4);
                    let mut pc = line.chunks_exact(4);
                    for (c4, p4) in (&mut kc).zip(&mut pc) {
                        for t in 0..4 {
                            for ch in 0..4 {
                                lanes[t][ch] = madd::<FMA>(lanes[t][ch], c4[t], p4[t][ch]);
                            }
                        }
                    }
                    for (c, p) in kc.remainder().iter().zip(pc.remainder()) {
                        for ch in 0..4 {
                            lanes[0][ch] = madd::<FMA>(lanes[0][ch], *c, p[ch]);
                        }
                    }
                }
            } else {
                for (u, col) in cols.iter_mut().enumerate() {
                    *col = (cx - r + u as i32).clamp(0, E - 1) as usize;
                }
                for (krow, &row) in kernel.coeffs.chunks_exact(w).zip(&rows) {
                    for (c, &col) in krow.iter().zip(&cols) {
                        let p = &src[row + col];
                        for ch in 0..4 {
                            lanes[0][ch] = madd::<FMA>(lanes[0][ch], *c, p[ch]);
                        }
                    }
                }
            }
            let o = ((j * edge + i) * 4) as usize;
            for ch in 0..4 {
                out[o + ch] = (lanes[0][ch] + lanes[1][ch]) + (lanes[2][ch] + lanes[3][ch]);
            }
        }
    }
    out
}
