//! Dense-convolution reference for reduction-enhancement.
#![allow(dead_code)]

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tilestream::pyramid::{TILE_BYTES, TILE_EDGE};
use tilestream::spd::{quantize, Enhancer, MipParams};

pub const E: i64 = TILE_EDGE as i64;

/// Kernel rebuilt from first principles, independent of the library.
pub fn oracle_kernel(level: u32, sigma_base: f64, beta: f64) -> (i64, Vec<f64>) {
    let sigma = sigma_base * 2f64.powi(level as i32 - 1);
    let r = (3.0 * sigma).ceil() as i64;
    let mut g = Vec::new();
    let mut psi = Vec::new();
    for v in -r..=r {
        for u in -r..=r {
            let d2 = (u * u + v * v) as f64;
            g.push((-d2 / (2.0 * sigma * sigma)).exp());
            let s2 = sigma * sigma;
            psi.push(1.0 / (PI * s2 * s2) * (1.0 - 0.5 * d2 / s2) * (-d2 / (2.0 * s2)).exp());
        }
    }
    let gs: f64 = g.iter().sum();
    let pm = psi.iter().sum::<f64>() / psi.len() as f64;
    let k = g.iter().zip(&psi).map(|(g, p)| g / gs + beta * (p - pm)).collect();
    (r, k)
}

/// Full-resolution convolution at every pixel, then decimation.
pub fn oracle_level(tile: &[u8], level: u32, sigma_base: f64, beta: f64) -> Vec<f64> {
    let (r, k) = oracle_kernel(level, sigma_base, beta);
    let w = 2 * r + 1;
    let mut full = vec![0f64; TILE_BYTES];
    for y in 0..E {
        for x in 0..E {
            for c in 0..4 {
                let mut acc = 0.0;
                for v in -r..=r {
                    for u in -r..=r {
                        let sx = (x + u).clamp(0, E - 1);
                        let sy = (y + v).clamp(0, E - 1);
                        acc += k[((v + r) * w + (u + r)) as usize] * tile[((sy * E + sx) * 4 + c) as usize] as f64;
                    }
                }
                full[((y * E + x) * 4 + c) as usize] = acc;
            }
        }
    }
    let stride = 1i64 << level;
    let edge = E / stride;
    let mut out = Vec::with_capacity((edge * edge * 4) as usize);
    for j in 0..edge {
        for i in 0..edge {
            let o = ((j * stride * E + i * stride) * 4) as usize;
            out.extend_from_slice(&full[o..o + 4]);
        }
    }
    out
}

pub fn random_tile(seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..TILE_BYTES).map(|_| rng.gen()).collect()
}

/// Largest deviation from the dense reference over `tiles` seeded random
/// tiles, before quantization and after (in LSB). Levels rotate across
/// seeds so that each is covered by several tiles.
pub fn random_tile_errors(tiles: u64) -> (f64, u8) {
    let params = MipParams::default();
    let e = Enhancer::new(params).unwrap();
    let (mut max_err, mut max_lsb) = (0f64, 0u8);
    for seed in 0..tiles {
        let tile = random_tile(seed);
        let level = 1 + (seed % params.levels as u64) as u32;
        let want = oracle_level(&tile, level, params.sigma_base, params.beta);
        let have = &e.generate_unquantized(&tile)[level as usize - 1];
        assert_eq!(have.len(), want.len());
        for (a, b) in have.iter().zip(&want) {
            max_err = max_err.max((a - b).abs());
        }
        let q = quantize(&want);
        let chain = e.generate_mips(&tile);
        for (a, b) in chain.levels[level as usize - 1].pixels.iter().zip(&q) {
            max_lsb = max_lsb.max(a.abs_diff(*b));
        }
    }
    (max_err, max_lsb)
}
