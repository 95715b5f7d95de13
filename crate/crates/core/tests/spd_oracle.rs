//! Reduction-enhancement checked against an independent dense convolution.

#[path = "support/spd.rs"]
mod oracle;

use std::f64::consts::PI;

use oracle::{oracle_kernel, oracle_level, random_tile, E};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tilestream::pyramid::TILE_BYTES;
use tilestream::spd::{build_kernel, quantize, ricker2d, Enhancer, MipParams};
use tilestream::synth::{render_tile, PatternFn};
use tilestream::{Pattern, Pyramid, TileAddress};

#[test]
fn ricker_closed_form() {
    assert!((ricker2d(0.0, 0.0, 1.0).unwrap() - 1.0 / PI).abs() < 1e-12);
    assert!((ricker2d(0.0, 0.0, 2.0).unwrap() - 0.019_894_367_886_486_918).abs() < 1e-12);
}

#[test]
fn kernels_match_independent_construction() {
    for (sigma_base, beta) in [(1.0, 2.0), (0.7, 0.0), (1.3, 5.0)] {
        for level in 1..=3 {
            let lib = build_kernel(level, sigma_base, beta).unwrap();
            let (r, k) = oracle_kernel(level, sigma_base, beta);
            assert_eq!(lib.radius as i64, r);
            assert!((lib.sum() - 1.0).abs() < 1e-12);
            for (a, b) in lib.coeffs.iter().zip(&k) {
                assert!((a - b).abs() < 1e-14, "level {level}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn random_tiles_match_dense_oracle() {
    let (err, lsb) = oracle::random_tile_errors(10);
    assert!(err < 1e-9, "{err}");
    assert!(lsb <= 1, "{lsb}");
}

#[test]
fn impulse_response_reproduces_kernel() {
    let e = Enhancer::new(MipParams { beta: 0.0, ..Default::default() }).unwrap();
    let mut tile = vec![0u8; TILE_BYTES];
    let (cx, cy) = (128i64, 128i64);
    tile[((cy * E + cx) * 4) as usize] = 255;
    let got = e.generate_unquantized(&tile);
    for (k, kernel) in e.kernels().iter().enumerate() {
        let stride = 1i64 << kernel.level;
        let edge = E / stride;
        let r = kernel.radius as i64;
        for j in 0..edge {
            for i in 0..edge {
                let (u, v) = (cx - i * stride, cy - j * stride);
                let want = if u.abs() <= r && v.abs() <= r {
                    255.0 * kernel.at(u as i32, v as i32)
                } else {
                    0.0
                };
                let have = got[k][((j * edge + i) * 4) as usize];
                assert!((have - want).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn linear_before_clamping() {
    let e = Enhancer::new(MipParams::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a: Vec<u8> = (0..TILE_BYTES).map(|_| rng.gen_range(0..100)).collect();
    let b: Vec<u8> = (0..TILE_BYTES).map(|_| rng.gen_range(0..100)).collect();
    let sum: Vec<u8> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
    let (ga, gb, gs) = (e.generate_unquantized(&a), e.generate_unquantized(&b), e.generate_unquantized(&sum));
    for k in 0..3 {
        for ((x, y), s) in ga[k].iter().zip(&gb[k]).zip(&gs[k]) {
            assert!((x + y - s).abs() < 1e-9);
        }
    }
}

#[test]
fn channels_are_independent() {
    let e = Enhancer::new(MipParams::default()).unwrap();
    let tile = random_tile(99);
    let mut swapped = tile.clone();
    for px in swapped.chunks_exact_mut(4) {
        px.swap(0, 2);
    }
    let (m, s) = (e.generate_mips(&tile), e.generate_mips(&swapped));
    for (lm, ls) in m.levels.iter().zip(&s.levels) {
        for (pm, ps) in lm.pixels.chunks_exact(4).zip(ls.pixels.chunks_exact(4)) {
            assert_eq!([pm[2], pm[1], pm[0], pm[3]], [ps[0], ps[1], ps[2], ps[3]]);
        }
    }
}

fn mean_abs_laplacian(px: &[u8], edge: usize) -> f64 {
    let at = |x: usize, y: usize| px[(y * edge + x) * 4] as f64;
    let mut total = 0.0;
    for y in 1..edge - 1 {
        for x in 1..edge - 1 {
            total += (4.0 * at(x, y) - at(x - 1, y) - at(x + 1, y) - at(x, y - 1) - at(x, y + 1)).abs();
        }
    }
    total / ((edge - 2) * (edge - 2)) as f64
}

#[test]
fn sharpening_raises_edge_contrast() {
    let pyramid = Pyramid::from_downsamples(1024, 1024, &[1.0]).unwrap();
    let tile = render_tile(&PatternFn::new(3, Pattern::Checker), &pyramid, TileAddress::new(0, 1, 1));
    let sharp = Enhancer::new(MipParams::default()).unwrap().generate_mips(&tile);
    let plain = Enhancer::new(MipParams { beta: 0.0, ..Default::default() }).unwrap().generate_mips(&tile);
    for (s, p) in sharp.levels.iter().zip(&plain.levels) {
        let (ls, lp) = (mean_abs_laplacian(&s.pixels, s.edge as usize), mean_abs_laplacian(&p.pixels, p.edge as usize));
        assert!(ls > lp, "edge {}: {ls} <= {lp}", s.edge);
    }
}

/// Each level a 2x2 box reduction of the one before: the cascaded path the
/// engine must not take.
fn box_halve(px: &[u8], edge: usize) -> Vec<u8> {
    let h = edge / 2;
    let mut out = Vec::with_capacity(h * h * 4);
    for y in 0..h {
        for x in 0..h {
            for c in 0..4 {
                let at = |dx, dy| px[((2 * y + dy) * edge + 2 * x + dx) * 4 + c] as u32;
                out.push(((at(0, 0) + at(1, 0) + at(0, 1) + at(1, 1) + 2) / 4) as u8);
            }
        }
    }
    out
}

#[test]
fn mips_come_from_the_reference_not_a_cascade() {
    let e = Enhancer::new(MipParams::default()).unwrap();
    let tile = random_tile(5);
    let direct = e.generate_mips(&tile);
    for k in 1..3 {
        let prev = &direct.levels[k - 1];
        let cascade = box_halve(&prev.pixels, prev.edge as usize);
        assert_ne!(direct.levels[k].pixels, cascade);
        let want = quantize(&oracle_level(&tile, k as u32 + 1, 1.0, 2.0));
        assert!(direct.levels[k].pixels.iter().zip(&want).all(|(a, b)| a.abs_diff(*b) <= 1));
    }
}
