//! Software compositor.
//!
//! A frame is drawn in two layers. The low-resolution layer is drawn
//! enlarged underneath; the high-resolution layer is drawn on top, and any of
//! its tiles that are not buffered simply contribute nothing so the layer
//! below shows through. Every tile is sampled through a render lease into a
//! scratch area and only committed to the frame if the lease still validates
//! afterwards, so a slot recycled mid-frame never leaks foreign pixels.
//!
//! Screen pixel `(sx, sy)` shows slide position `(ox + sx / zoom, oy + sy / zoom)`
//! in layer-0 pixels; texel `(i, j)` of a tile sits at integer tile-local
//! coordinates and texel `i` of mip level `k` at local coordinate `2^k i`.

use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clock::{Clock, Timestamp};
use crate::device::{RenderLease, SlotPool};
use crate::pyramid::{visible_tiles, LayerInfo, Pyramid, TileAddress, Viewport, TILE_EDGE};
use crate::spd::{level_edge, MipChain};

pub const DEFAULT_BACKGROUND: [u8; 4] = [128, 128, 128, 255];

/// Read access to one tile's base image and mip chain.
pub trait Texels {
    fn mip_levels(&self) -> u32;
    fn texel(&self, level: u32, x: u32, y: u32) -> [u8; 4];
}

impl Texels for RenderLease<'_> {
    fn mip_levels(&self) -> u32 {
        RenderLease::mip_levels(self)
    }

    fn texel(&self, level: u32, x: u32, y: u32) -> [u8; 4] {
        RenderLease::texel(self, level, x, y)
    }
}

/// An owned tile image, used by tools and reference renderers.
#[derive(Debug, Clone)]
pub struct TileImage {
    pub base: Vec<u8>,
    pub mips: MipChain,
}

impl Texels for TileImage {
    fn mip_levels(&self) -> u32 {
        self.mips.levels.len() as u32
    }

    fn texel(&self, level: u32, x: u32, y: u32) -> [u8; 4] {
        let (px, edge) = if level == 0 {
            (&self.base[..], TILE_EDGE)
        } else {
            let l = &self.mips.levels[level as usize - 1];
            (&l.pixels[..], l.edge)
        };
        let i = ((y * edge + x) * 4) as usize;
        [px[i], px[i + 1], px[i + 2], px[i + 3]]
    }
}

fn bilinear<T: Texels + ?Sized>(t: &T, level: u32, x: f64, y: f64) -> [f64; 4] {
    let max = (level_edge(level) - 1) as f64;
    let x = x.clamp(0.0, max);
    let y = y.clamp(0.0, max);
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as u32, y0 as u32);
    let x1 = (x0 + 1).min(max as u32);
    let y1 = (y0 + 1).min(max as u32);
    let (a, b, c, d) = (t.texel(level, x0, y0), t.texel(level, x1, y0), t.texel(level, x0, y1), t.texel(level, x1, y1));
    let mut out = [0f64; 4];
    for ch in 0..4 {
        let top = a[ch] as f64 * (1.0 - fx) + b[ch] as f64 * fx;
        let bottom = c[ch] as f64 * (1.0 - fx) + d[ch] as f64 * fx;
        out[ch] = top * (1.0 - fy) + bottom * fy;
    }
    out
}

/// Mip levels and blend weight for a minification `scale < 1`: the result is
/// `(1 - w) * level k + w * level k + 1`. Beyond the last level the last
/// level is used alone.
pub fn mip_blend(scale: f64, levels: u32) -> (u32, u32, f64) {
    if scale >= 1.0 {
        return (0, 0, 0.0);
    }
    let m = (1.0 / scale).log2();
    if m >= levels as f64 {
        return (levels, levels, 0.0);
    }
    let k = m.floor();
    (k as u32, k as u32 + 1, m - k)
}

/// Samples a tile at tile-local coordinates; `scale` is on-screen pixels per
/// tile pixel.
pub fn sample_tile<T: Texels + ?Sized>(t: &T, local_x: f64, local_y: f64, scale: f64) -> [u8; 4] {
    let v = if scale >= 1.0 {
        bilinear(t, 0, local_x, local_y)
    } else {
        let (k0, k1, w) = mip_blend(scale, t.mip_levels());
        let at = |k: u32| {
            let f = (1u32 << k) as f64;
            bilinear(t, k, local_x / f, local_y / f)
        };
        let a = at(k0);
        if w == 0.0 {
            a
        } else {
            let b = at(k1);
            std::array::from_fn(|ch| a[ch] * (1.0 - w) + b[ch] * w)
        }
    };
    v.map(|c| c.round().clamp(0.0, 255.0) as u8)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompositorConfig {
    pub background: [u8; 4],
    /// Skip low-resolution sampling under validated high-resolution tiles.
    pub lr_skip: bool,
    /// Sample tiles on the rayon pool.
    pub parallel: bool,
}

impl Default for CompositorConfig {
    fn default() -> Self {
        Self {
            background: DEFAULT_BACKGROUND,
            lr_skip: true,
            parallel: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Framebuffer {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
    pub frame_index: u64,
    pub started_at: Timestamp,
    pub finished_at: Timestamp,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RenderStats {
    pub leased: u32,
    pub committed: u32,
    /// Leases that failed validation; their pixels were discarded.
    pub rejected: u32,
}

/// Screen columns (or rows) grouped by the tile index they fall in.
#[derive(Debug, Clone)]
struct AxisMap {
    /// Tile index per screen pixel, `None` outside the layer.
    tile: Vec<Option<u32>>,
    /// Tile-local coordinate per screen pixel.
    local: Vec<f64>,
}

impl AxisMap {
    fn new(origin: f64, pixels: u32, zoom: f64, downsample: f64, tiles: u32) -> Self {
        let mut tile = Vec::with_capacity(pixels as usize);
        let mut local = Vec::with_capacity(pixels as usize);
        for s in 0..pixels {
            let l = (origin + s as f64 / zoom) / downsample;
            let t = (l / TILE_EDGE as f64).floor();
            if t >= 0.0 && t < tiles as f64 {
                tile.push(Some(t as u32));
                local.push(l - t * TILE_EDGE as f64);
            } else {
                tile.push(None);
                local.push(0.0);
            }
        }
        Self { tile, local }
    }

    /// Contiguous screen span covered by tile `t`.
    fn span(&self, t: u32) -> Option<(usize, usize)> {
        let start = self.tile.iter().position(|&x| x == Some(t))?;
        let len = self.tile[start..].iter().take_while(|&&x| x == Some(t)).count();
        Some((start, start + len))
    }
}

struct LayerGeometry<'a> {
    layer: &'a LayerInfo,
    cols: AxisMap,
    rows: AxisMap,
    scale: f64,
}

impl<'a> LayerGeometry<'a> {
    fn new(view: &Viewport, layer: &'a LayerInfo) -> Self {
        Self {
            layer,
            cols: AxisMap::new(view.origin_x, view.width_scr, view.zoom, layer.downsample, layer.tiles_x),
            rows: AxisMap::new(view.origin_y, view.height_scr, view.zoom, layer.downsample, layer.tiles_y),
            scale: view.zoom * layer.downsample,
        }
    }
}

/// One tile's sampled screen rectangle, waiting for validation.
struct Patch {
    x: (usize, usize),
    y: (usize, usize),
    pixels: Vec<u8>,
    /// Pixels left unsampled because a validated tile above covers them.
    skipped: Option<Vec<bool>>,
}

fn sample_patch(geo: &LayerGeometry, lease: &dyn Texels, addr: TileAddress, covered: Option<&[bool]>, width: usize) -> Option<Patch> {
    let x = geo.cols.span(addr.col)?;
    let y = geo.rows.span(addr.row)?;
    let w = x.1 - x.0;
    let mut pixels = vec![0u8; w * (y.1 - y.0) * 4];
    let mut skipped = covered.map(|_| vec![false; w * (y.1 - y.0)]);
    for (j, sy) in (y.0..y.1).enumerate() {
        let ly = geo.rows.local[sy];
        for (i, sx) in (x.0..x.1).enumerate() {
            if let (Some(cov), Some(sk)) = (covered, skipped.as_mut()) {
                if cov[sy * width + sx] {
                    sk[j * w + i] = true;
                    continue;
                }
            }
            let px = sample_tile(lease, geo.cols.local[sx], ly, geo.scale);
            pixels[(j * w + i) * 4..][..4].copy_from_slice(&px);
        }
    }
    Some(Patch { x, y, pixels, skipped })
}

fn commit(fb: &mut [u8], width: usize, patch: &Patch, covered: Option<&mut [bool]>) {
    let w = patch.x.1 - patch.x.0;
    for (j, sy) in (patch.y.0..patch.y.1).enumerate() {
        let row = &patch.pixels[j * w * 4..(j + 1) * w * 4];
        match &patch.skipped {
            None => fb[(sy * width + patch.x.0) * 4..(sy * width + patch.x.1) * 4].copy_from_slice(row),
            Some(sk) => {
                for i in 0..w {
                    if !sk[j * w + i] {
                        let o = (sy * width + patch.x.0 + i) * 4;
                        fb[o..o + 4].copy_from_slice(&row[i * 4..i * 4 + 4]);
                    }
                }
            }
        }
    }
    if let Some(cov) = covered {
        for sy in patch.y.0..patch.y.1 {
            cov[sy * width + patch.x.0..sy * width + patch.x.1].fill(true);
        }
    }
}

/// Samples every leased tile of one layer; returns validated patches.
fn draw_layer(
    geo: &LayerGeometry,
    leases: &[RenderLease<'_>],
    covered: Option<&[bool]>,
    width: usize,
    parallel: bool,
    stats: &mut RenderStats,
) -> Vec<Patch> {
    let sample = |lease: &RenderLease<'_>| {
        let patch = sample_patch(geo, lease, lease.addr, covered, width);
        // Validate only after every texel of the tile has been read.
        (patch, lease.validate())
    };
    let results: Vec<_> = if parallel {
        leases.par_iter().map(sample).collect()
    } else {
        leases.iter().map(sample).collect()
    };
    let mut out = Vec::with_capacity(results.len());
    for (patch, valid) in results {
        if !valid {
            stats.rejected += 1;
        } else if let Some(p) = patch {
            stats.committed += 1;
            out.push(p);
        }
    }
    out
}

fn acquire_layer<'p>(pool: &'p SlotPool, view: &Viewport, layer: &LayerInfo) -> Vec<RenderLease<'p>> {
    visible_tiles(view, layer)
        .into_iter()
        .filter_map(|a| pool.acquire_for_render(a))
        .collect()
}

/// Renders one frame from whatever is resident in `pool`.
pub fn render_frame(
    view: &Viewport,
    pool: &SlotPool,
    pyramid: &Pyramid,
    config: &CompositorConfig,
    frame_index: u64,
    clock: &Clock,
) -> (Framebuffer, RenderStats) {
    let started_at = clock.now();
    let (w, h) = (view.width_scr as usize, view.height_scr as usize);
    let mut pixels: Vec<u8> = std::iter::repeat(config.background).take(w * h).flatten().collect();
    let mut stats = RenderStats::default();
    let pair = pyramid.select_layers(view.zoom).unwrap_or_default();
    let lr = pair.lr.and_then(|l| pyramid.layer(l)).map(|l| LayerGeometry::new(view, l));
    let hr = pair.hr.and_then(|l| pyramid.layer(l)).map(|l| LayerGeometry::new(view, l));

    let lr_leases = lr.as_ref().map(|g| acquire_layer(pool, view, g.layer)).unwrap_or_default();
    let hr_leases = hr.as_ref().map(|g| acquire_layer(pool, view, g.layer)).unwrap_or_default();
    stats.leased = (lr_leases.len() + hr_leases.len()) as u32;

    if config.lr_skip {
        // High resolution first; low resolution only where it shows through.
        let mut covered = vec![false; w * h];
        if let Some(g) = &hr {
            for p in draw_layer(g, &hr_leases, None, w, config.parallel, &mut stats) {
                commit(&mut pixels, w, &p, Some(&mut covered));
            }
        }
        drop(hr_leases);
        if let Some(g) = &lr {
            for p in draw_layer(g, &lr_leases, Some(&covered), w, config.parallel, &mut stats) {
                commit(&mut pixels, w, &p, None);
            }
        }
    } else {
        if let Some(g) = &lr {
            for p in draw_layer(g, &lr_leases, None, w, config.parallel, &mut stats) {
                commit(&mut pixels, w, &p, None);
            }
        }
        if let Some(g) = &hr {
            for p in draw_layer(g, &hr_leases, None, w, config.parallel, &mut stats) {
                commit(&mut pixels, w, &p, None);
            }
        }
    }
    drop(lr_leases);
    let fb = Framebuffer {
        width: view.width_scr,
        height: view.height_scr,
        pixels,
        frame_index,
        started_at,
        finished_at: clock.now(),
    };
    (fb, stats)
}

/// The tick a frame should be drawn for and when, given the time now.
///
/// Ticks fall every `period` after `origin`. If `now` is already past the
/// tick following `last`, missed ticks are skipped rather than replayed.
pub fn next_deadline(origin: Instant, period: Duration, last: Option<u64>, now: Instant) -> (u64, Instant) {
    let at = |tick: u64| origin + period.mul_f64(tick as f64);
    let elapsed = now.saturating_duration_since(origin);
    let current = (elapsed.as_nanos() / period.as_nanos().max(1)) as u64;
    let candidate = match last {
        None => 0,
        Some(l) => l + 1,
    };
    // A tick already passed is only drawn if it is the most recent one.
    let tick = candidate.max(current);
    (tick, at(tick))
}

/// Fixed-cadence frame scheduler with catch-up skipping.
#[derive(Debug)]
pub struct FramePacer {
    origin: Instant,
    period: Duration,
    last: Option<u64>,
    skipped: u64,
}

impl FramePacer {
    pub fn new(target_hz: u32) -> Self {
        assert!(target_hz > 0, "frame rate must be positive");
        Self {
            origin: Instant::now(),
            period: Duration::from_secs_f64(1.0 / target_hz as f64),
            last: None,
            skipped: 0,
        }
    }

    pub fn period(&self) -> Duration {
        self.period
    }

    /// Ticks skipped because a frame overran.
    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    /// Blocks until the next tick is due and returns its index.
    pub fn wait(&mut self) -> u64 {
        let (tick, at) = next_deadline(self.origin, self.period, self.last, Instant::now());
        if let Some(l) = self.last {
            self.skipped += tick - l - 1;
        }
        // Sleep most of the way, then spin for precision.
        loop {
            let now = Instant::now();
            if now >= at {
                break;
            }
            let left = at - now;
            if left > Duration::from_micros(1500) {
                std::thread::sleep(left - Duration::from_millis(1));
            } else {
                std::hint::spin_loop();
            }
        }
        self.last = Some(tick);
        tick
    }
}
