//! Brute-force scans for layer selection, visibility and dilation.
#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tilestream::pyramid::{select_layers, visible_tiles};
use tilestream::{LayerInfo, Pyramid, TileAddress, Viewport, TILE_EDGE};

pub const CASES: usize = 10_000;

pub fn random_pyramid(rng: &mut ChaCha8Rng) -> Pyramid {
    let n = rng.gen_range(1..=6);
    let mut ds = vec![1.0];
    for _ in 1..n {
        let last = *ds.last().unwrap();
        ds.push(last * rng.gen_range(1.5..5.0));
    }
    Pyramid::from_downsamples(rng.gen_range(256..20_000), rng.gen_range(256..20_000), &ds).unwrap()
}

pub fn random_viewport(rng: &mut ChaCha8Rng, p: &Pyramid) -> Viewport {
    let base = p.base();
    let zoom = 2f64.powf(rng.gen_range(-7.0..3.0));
    // Mostly on the slide, sometimes hanging off an edge.
    let x = rng.gen_range(-2000.0..base.width_px as f64 + 500.0);
    let y = rng.gen_range(-2000.0..base.height_px as f64 + 500.0);
    Viewport::new(x, y, rng.gen_range(1..3000), rng.gen_range(1..2000), zoom)
}

pub fn brute_select(zoom: f64, layers: &[LayerInfo]) -> (Option<u32>, Option<u32>) {
    let mut hr: Option<&LayerInfo> = None;
    let mut lr: Option<&LayerInfo> = None;
    for l in layers {
        if l.downsample * zoom <= 1.0 {
            if hr.map_or(true, |h| l.downsample > h.downsample) {
                hr = Some(l);
            }
        } else if lr.map_or(true, |h| l.downsample < h.downsample) {
            lr = Some(l);
        }
    }
    (hr.map(|l| l.index), lr.map(|l| l.index))
}

/// Every tile whose footprint shares positive area with the viewport.
pub fn brute_visible(vp: &Viewport, layer: &LayerInfo) -> BTreeSet<TileAddress> {
    let x0 = vp.origin_x / layer.downsample;
    let y0 = vp.origin_y / layer.downsample;
    let x1 = (vp.origin_x + vp.width_scr as f64 / vp.zoom) / layer.downsample;
    let y1 = (vp.origin_y + vp.height_scr as f64 / vp.zoom) / layer.downsample;
    let e = TILE_EDGE as f64;
    let mut out = BTreeSet::new();
    for row in 0..layer.tiles_y {
        for col in 0..layer.tiles_x {
            let (tx0, ty0) = (col as f64 * e, row as f64 * e);
            if x0.max(tx0) < x1.min(tx0 + e) && y0.max(ty0) < y1.min(ty0 + e) {
                out.insert(TileAddress::new(layer.index, col, row));
            }
        }
    }
    out
}

pub fn brute_region(visible: &BTreeSet<TileAddress>, radius: u32, layer: &LayerInfo) -> BTreeSet<TileAddress> {
    let mut out = BTreeSet::new();
    for row in 0..layer.tiles_y {
        for col in 0..layer.tiles_x {
            let near = visible
                .iter()
                .any(|v| v.col.abs_diff(col) <= radius && v.row.abs_diff(row) <= radius);
            if near {
                out.insert(TileAddress::new(layer.index, col, row));
            }
        }
    }
    out
}

/// Random pyramids and zooms (a tenth of them exactly on a layer
/// threshold); returns the number of disagreements with the scan.
pub fn select_layers_mismatches(seed: u64, cases: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    for _ in 0..cases {
        let p = random_pyramid(&mut rng);
        let zoom = if rng.gen_bool(0.1) {
            1.0 / p.layers()[rng.gen_range(0..p.layers().len())].downsample
        } else {
            2f64.powf(rng.gen_range(-10.0..4.0))
        };
        let got = select_layers(zoom, p.layers()).unwrap();
        if (got.hr, got.lr) != brute_select(zoom, p.layers()) {
            mismatches += 1;
        }
    }
    mismatches
}

pub fn visible_tiles_mismatches(seed: u64, cases: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    for _ in 0..cases {
        let p = random_pyramid(&mut rng);
        let vp = random_viewport(&mut rng, &p);
        let layer = &p.layers()[rng.gen_range(0..p.layers().len())];
        if visible_tiles(&vp, layer) != brute_visible(&vp, layer) {
            mismatches += 1;
        }
    }
    mismatches
}
