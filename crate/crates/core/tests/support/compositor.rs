//! Per-pixel, single-threaded reference compositor.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tilestream::compositor::{render_frame, CompositorConfig, DEFAULT_BACKGROUND};
use tilestream::{Clock, Enhancer, MipChain, MipParams, Pyramid, SlotPool, TileAddress, Viewport, TILE_BYTES, TILE_EDGE};

pub struct Image {
    pub base: Vec<u8>,
    pub mips: MipChain,
}

impl Image {
    fn texel(&self, level: u32, x: usize, y: usize) -> [f64; 4] {
        let (px, edge) = if level == 0 {
            (&self.base, TILE_EDGE as usize)
        } else {
            let l = &self.mips.levels[level as usize - 1];
            (&l.pixels, l.edge as usize)
        };
        let o = (y * edge + x) * 4;
        [px[o] as f64, px[o + 1] as f64, px[o + 2] as f64, px[o + 3] as f64]
    }

    fn bilinear(&self, level: u32, x: f64, y: f64) -> [f64; 4] {
        let last = (TILE_EDGE >> level) as f64 - 1.0;
        let (x, y) = (x.max(0.0).min(last), y.max(0.0).min(last));
        let (fx, fy) = (x - x.floor(), y - y.floor());
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(last as usize), (y0 + 1).min(last as usize));
        let mut out = [0.0; 4];
        for (c, o) in out.iter_mut().enumerate() {
            let top = self.texel(level, x0, y0)[c] * (1.0 - fx) + self.texel(level, x1, y0)[c] * fx;
            let bottom = self.texel(level, x0, y1)[c] * (1.0 - fx) + self.texel(level, x1, y1)[c] * fx;
            *o = top * (1.0 - fy) + bottom * fy;
        }
        out
    }

    fn sample(&self, x: f64, y: f64, scale: f64) -> [u8; 4] {
        let levels = self.mips.levels.len() as u32;
        let v = if scale >= 1.0 {
            self.bilinear(0, x, y)
        } else {
            let m = (1.0 / scale).log2();
            if m >= levels as f64 {
                let f = (1u32 << levels) as f64;
                self.bilinear(levels, x / f, y / f)
            } else {
                let k = m.floor() as u32;
                let w = m - m.floor();
                let lo = self.bilinear(k, x / (1u32 << k) as f64, y / (1u32 << k) as f64);
                if w == 0.0 {
                    lo
                } else {
                    let hi = self.bilinear(k + 1, x / (2u32 << k) as f64, y / (2u32 << k) as f64);
                    [0, 1, 2, 3].map(|c| lo[c] * (1.0 - w) + hi[c] * w)
                }
            }
        };
        v.map(|c| c.round().clamp(0.0, 255.0) as u8)
    }
}

/// High resolution where buffered, else low resolution where buffered, else
/// background; one pixel at a time.
pub fn oracle(view: &Viewport, pyramid: &Pyramid, active: &BTreeSet<TileAddress>, images: &BTreeMap<TileAddress, Image>) -> Vec<u8> {
    let pair = pyramid.select_layers(view.zoom).unwrap();
    let mut out = Vec::with_capacity((view.width_scr * view.height_scr * 4) as usize);
    for sy in 0..view.height_scr {
        for sx in 0..view.width_scr {
            let mut px = DEFAULT_BACKGROUND;
            for layer in [pair.hr, pair.lr].into_iter().flatten() {
                let info = pyramid.layer(layer).unwrap();
                let e = TILE_EDGE as f64;
                let lx = (view.origin_x + sx as f64 / view.zoom) / info.downsample;
                let ly = (view.origin_y + sy as f64 / view.zoom) / info.downsample;
                let (tx, ty) = ((lx / e).floor(), (ly / e).floor());
                if tx < 0.0 || ty < 0.0 || tx >= info.tiles_x as f64 || ty >= info.tiles_y as f64 {
                    continue;
                }
                let addr = TileAddress::new(layer, tx as u32, ty as u32);
                if active.contains(&addr) {
                    px = images[&addr].sample(lx - tx * e, ly - ty * e, view.zoom * info.downsample);
                    break;
                }
            }
            out.extend_from_slice(&px);
        }
    }
    out
}

pub fn build_images(pyramid: &Pyramid, rng: &mut ChaCha8Rng) -> BTreeMap<TileAddress, Image> {
    let enhancer = Enhancer::new(MipParams::default()).unwrap();
    let mut images = BTreeMap::new();
    for l in pyramid.layers() {
        for row in 0..l.tiles_y {
            for col in 0..l.tiles_x {
                // Smooth gradient plus noise, so every blend weight matters.
                let (a, b): (u8, u8) = (rng.gen(), rng.gen());
                let base: Vec<u8> = (0..TILE_BYTES)
                    .map(|i| {
                        let p = i / 4;
                        let g = ((p % 256) as u32 * a as u32 / 255 + (p / 256) as u32 * b as u32 / 255) as u8;
                        g.wrapping_add(rng.gen_range(0..40))
                    })
                    .collect();
                let mips = enhancer.generate_mips(&base);
                images.insert(TileAddress::new(l.index, col, row), Image { base, mips });
            }
        }
    }
    images
}

pub fn publish(pool: &SlotPool, addr: TileAddress, image: &Image) {
    let claim = pool.claim_free_slot(addr).unwrap().expect("free slot");
    pool.write_base(claim, &image.base).unwrap();
    pool.write_mips(claim, &image.mips).unwrap();
    pool.publish(claim.slot_index, addr).unwrap();
}

/// Renders `states` random buffering states, each under three compositor
/// configurations, and returns a description of every mismatch.
pub fn randomized_state_mismatches(seed: u64, states: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pyramid = Pyramid::from_downsamples(2000, 1500, &[1.0, 2.0, 4.0, 8.0]).unwrap();
    let images = build_images(&pyramid, &mut rng);
    let all: Vec<_> = images.keys().copied().collect();
    let clock = Clock::new();
    let mut failures = Vec::new();
    for state in 0..states {
        let pool = SlotPool::new(&pyramid, all.len(), 3);
        let mut active = BTreeSet::new();
        for &addr in &all {
            match rng.gen_range(0..10) {
                0..=5 => {
                    publish(&pool, addr, &images[&addr]);
                    active.insert(addr);
                }
                // Claimed but never published: must not show.
                6 => {
                    let claim = pool.claim_free_slot(addr).unwrap().unwrap();
                    pool.write_base(claim, &images[&addr].base).unwrap();
                }
                _ => {}
            }
        }
        let zoom = 2f64.powf(rng.gen_range(-3.5..1.5));
        let view = Viewport::new(
            rng.gen_range(-300.0..1800.0),
            rng.gen_range(-300.0..1300.0),
            rng.gen_range(50..320),
            rng.gen_range(50..240),
            zoom,
        );
        let want = oracle(&view, &pyramid, &active, &images);
        for (lr_skip, parallel) in [(true, true), (false, false), (true, false)] {
            let config = CompositorConfig {
                lr_skip,
                parallel,
                ..Default::default()
            };
            let (fb, stats) = render_frame(&view, &pool, &pyramid, &config, state, &clock);
            let bad = fb.pixels.chunks_exact(4).zip(want.chunks_exact(4)).filter(|(a, b)| a != b).count();
            if bad > 0 || stats.rejected > 0 {
                failures.push(format!("state {state} ({view:?}, lr_skip {lr_skip}): {bad} pixels differ, {} rejected", stats.rejected));
            }
        }
        if pool.total_refcount() != 0 {
            failures.push(format!("state {state}: refcount {} after render", pool.total_refcount()));
        }
    }
    failures
}

/// Zoom 1, tile-aligned, fully buffered: the frame is the source bytes.
pub fn identity_case_holds(seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pyramid = Pyramid::from_downsamples(2048, 2048, &[1.0, 4.0]).unwrap();
    let images = build_images(&pyramid, &mut rng);
    let pool = SlotPool::new(&pyramid, 16, 3);
    let view = Viewport::new(512.0, 256.0, 512, 256, 1.0);
    for (c, r) in [(2, 1), (3, 1)] {
        let a = TileAddress::new(0, c, r);
        publish(&pool, a, &images[&a]);
    }
    let (fb, _) = render_frame(&view, &pool, &pyramid, &CompositorConfig::default(), 0, &Clock::new());
    (0..256usize).all(|y| {
        [2u32, 3].into_iter().enumerate().all(|(i, c)| {
            let src = &images[&TileAddress::new(0, c, 1)].base[y * 1024..(y + 1) * 1024];
            &fb.pixels[(y * 512 + i * 256) * 4..(y * 512 + (i + 1) * 256) * 4] == src
        })
    })
}
