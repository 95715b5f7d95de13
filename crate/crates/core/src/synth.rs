//! Procedural slides.
//!
//! Layer 0 is a seeded function of pixel position; every other layer is the
//! exact area average of layer 0 over each layer pixel's footprint. Edge
//! tiles are padded with opaque white.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{Codec, ContainerError, ContainerHeader, ContainerWriter};
use crate::pyramid::{LayerInfo, Pyramid, TileAddress, TILE_BYTES, TILE_EDGE};
use crate::source::TileSource;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pattern {
    Checker,
    Disks,
    GradientText,
    Mixed,
    /// Uniform color; handy for conservation checks.
    Constant([u8; 4]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub width_px: u32,
    pub height_px: u32,
    pub layer_downsamples: Vec<f64>,
    pub pattern: Pattern,
    pub codec: u8,
}

impl SynthSpec {
    pub fn new(seed: u64, width_px: u32, height_px: u32, layer_downsamples: Vec<f64>, pattern: Pattern) -> Self {
        Self {
            seed,
            width_px,
            height_px,
            layer_downsamples,
            pattern,
            codec: Codec::Raw as u8,
        }
    }

    pub fn with_codec(mut self, codec: Codec) -> Self {
        self.codec = codec as u8;
        self
    }

    pub fn pyramid(&self) -> Result<Pyramid, ContainerError> {
        if self.width_px < TILE_EDGE || self.height_px < TILE_EDGE {
            return Err(ContainerError::InvalidSpec(format!(
                "extent {}x{} is below one tile",
                self.width_px, self.height_px
            )));
        }
        if self.layer_downsamples.len() > u8::MAX as usize {
            return Err(ContainerError::InvalidSpec("too many layers".into()));
        }
        Ok(Pyramid::from_downsamples(self.width_px, self.height_px, &self.layer_downsamples)?)
    }
}

const WHITE: [u8; 4] = [255; 4];

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn hash3(seed: u64, a: u64, b: u64) -> u64 {
    mix64(seed ^ mix64(a ^ mix64(b)))
}

/// Layer-0 pixel generator.
#[derive(Debug, Clone, Copy)]
pub struct PatternFn {
    seed: u64,
    pattern: Pattern,
}

impl PatternFn {
    pub fn new(seed: u64, pattern: Pattern) -> Self {
        Self { seed, pattern }
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 4] {
        match self.pattern {
            Pattern::Constant(c) => c,
            Pattern::Checker => self.checker(x, y),
            Pattern::Disks => self.disks(x, y),
            Pattern::GradientText => self.gradient_text(x, y),
            Pattern::Mixed => {
                // 1024-px regions alternate between the three textures.
                match hash3(self.seed, (x / 1024) as u64, (y / 1024) as u64) % 3 {
                    0 => self.checker(x, y),
                    1 => self.disks(x, y),
                    _ => self.gradient_text(x, y),
                }
            }
        }
    }

    fn checker(&self, x: u32, y: u32) -> [u8; 4] {
        let h = mix64(self.seed);
        let cell = 4 + (h % 5) as u32;
        let on = ((x / cell) + (y / cell)) % 2 == 0;
        let (a, b) = ((h >> 8) as u8 | 0x80, (h >> 16) as u8 & 0x3F);
        if on {
            [a, a / 2, 255 - a, 255]
        } else {
            [b, 255 - b, b / 2 + 60, 255]
        }
    }

    /// Nucleus-like disks on a pink background, one candidate per 48-px cell.
    fn disks(&self, x: u32, y: u32) -> [u8; 4] {
        const CELL: u32 = 48;
        let mut px = [236u8, 208, 222, 255];
        let (cx, cy) = (x / CELL, y / CELL);
        for gy in cy.saturating_sub(1)..=cy + 1 {
            for gx in cx.saturating_sub(1)..=cx + 1 {
                let h = hash3(self.seed, gx as u64, gy as u64);
                if h % 4 == 0 {
                    continue;
                }
                let r = 6.0 + (h >> 8 & 0xF) as f64;
                let ox = (gx * CELL) as f64 + (h >> 16 & 0x3F) as f64 % CELL as f64;
                let oy = (gy * CELL) as f64 + (h >> 24 & 0x3F) as f64 % CELL as f64;
                let d2 = (x as f64 - ox).powi(2) + (y as f64 - oy).powi(2);
                if d2 <= r * r {
                    let rim = d2 > (r - 2.0) * (r - 2.0);
                    let shade = (h >> 32) as u8 & 0x3F;
                    px = if rim {
                        [40, 20, 90, 255]
                    } else {
                        [80 + shade, 50 + shade / 2, 150 + shade, 255]
                    };
                }
            }
        }
        px
    }

    /// Smooth background with blocky glyph strokes in 8x12 character cells.
    fn gradient_text(&self, x: u32, y: u32) -> [u8; 4] {
        let g = ((x % 2048) / 8) as u8;
        let base = [g, 200u8.wrapping_sub(g / 2), ((y % 2048) / 8) as u8, 255];
        let (cx, cy) = (x / 8, y / 12);
        let glyph = hash3(self.seed ^ 0x7E57, cx as u64, cy as u64);
        let (gx, gy) = (x % 8, y % 12);
        if gx >= 1 && gx <= 5 && gy >= 2 && gy <= 9 && (cy % 3 != 2) {
            let bit = (gy - 2) * 5 + (gx - 1);
            if glyph >> bit & 1 == 1 {
                return [20, 20, 30, 255];
            }
        }
        base
    }
}

/// Area average of layer 0 over one layer pixel's footprint, clipped to the
/// slide extent.
fn box_pixel(f: &PatternFn, base_w: u32, base_h: u32, d: f64, px: u32, py: u32) -> [u8; 4] {
    let span = |p: u32, limit: u32| {
        let a = p as f64 * d;
        let b = ((p + 1) as f64 * d).min(limit as f64);
        (a, b)
    };
    let (x0, x1) = span(px, base_w);
    let (y0, y1) = span(py, base_h);
    let mut acc = [0f64; 4];
    let mut area = 0f64;
    let mut y = y0.floor() as u32;
    while (y as f64) < y1 {
        let wy = (y1.min(y as f64 + 1.0) - y0.max(y as f64)).max(0.0);
        let mut x = x0.floor() as u32;
        while (x as f64) < x1 {
            let wx = (x1.min(x as f64 + 1.0) - x0.max(x as f64)).max(0.0);
            let w = wx * wy;
            if w > 0.0 {
                let p = f.pixel(x, y);
                for c in 0..4 {
                    acc[c] += w * p[c] as f64;
                }
                area += w;
            }
            x += 1;
        }
        y += 1;
    }
    acc.map(|v| (v / area).round().clamp(0.0, 255.0) as u8)
}

/// Renders one full-size tile of the synthetic slide.
pub fn render_tile(f: &PatternFn, pyramid: &Pyramid, addr: TileAddress) -> Vec<u8> {
    let base = pyramid.base();
    let layer: &LayerInfo = pyramid.layer(addr.layer).expect("tile layer in pyramid");
    let mut out = vec![0u8; TILE_BYTES];
    for ty in 0..TILE_EDGE {
        let py = addr.row * TILE_EDGE + ty;
        for tx in 0..TILE_EDGE {
            let px = addr.col * TILE_EDGE + tx;
            let rgba = if px >= layer.width_px || py >= layer.height_px {
                WHITE
            } else if addr.layer == 0 {
                f.pixel(px, py)
            } else {
                box_pixel(f, base.width_px, base.height_px, layer.downsample, px, py)
            };
            let o = ((ty * TILE_EDGE + tx) * 4) as usize;
            out[o..o + 4].copy_from_slice(&rgba);
        }
    }
    out
}

/// Writes a synthetic slide container to `path`.
pub fn synth_slide(spec: &SynthSpec, path: impl AsRef<Path>) -> Result<ContainerHeader, ContainerError> {
    let pyramid = spec.pyramid()?;
    let codec = Codec::try_from(spec.codec).map_err(|c| ContainerError::InvalidSpec(format!("unknown codec {c}")))?;
    let f = PatternFn::new(spec.seed, spec.pattern);
    let mut writer = ContainerWriter::create(path, pyramid.clone())?;
    for layer in pyramid.layers() {
        for row in 0..layer.tiles_y {
            let tiles: Vec<Vec<u8>> = (0..layer.tiles_x)
                .into_par_iter()
                .map(|col| render_tile(&f, &pyramid, TileAddress::new(layer.index, col, row)))
                .collect();
            for (col, pixels) in tiles.iter().enumerate() {
                writer.write_tile(TileAddress::new(layer.index, col as u32, row), pixels, codec)?;
            }
        }
    }
    writer.finish()
}

/// In-memory source that renders tiles on demand; no file involved.
pub struct SyntheticSource {
    pyramid: Pyramid,
    f: PatternFn,
}

impl SyntheticSource {
    pub fn new(spec: &SynthSpec) -> Result<Self, ContainerError> {
        Ok(Self {
            pyramid: spec.pyramid()?,
            f: PatternFn::new(spec.seed, spec.pattern),
        })
    }
}

impl TileSource for SyntheticSource {
    fn pyramid(&self) -> &Pyramid {
        &self.pyramid
    }

    fn load(&self, addr: TileAddress) -> Result<Vec<u8>, ContainerError> {
        if !self.pyramid.contains(addr) {
            return Err(ContainerError::OutOfRange(addr));
        }
        Ok(render_tile(&self.f, &self.pyramid, addr))
    }
}

/// Source whose tiles are each a single color derived from the address.
/// Every layer pixel of a tile (and of its mips) has the same value, so a
/// rendered pixel identifies the tile it came from.
pub struct FlatSource {
    pyramid: Pyramid,
    seed: u64,
}

impl FlatSource {
    pub fn new(pyramid: Pyramid, seed: u64) -> Self {
        Self { pyramid, seed }
    }

    pub fn color(&self, addr: TileAddress) -> [u8; 4] {
        let h = hash3(self.seed, addr.layer as u64, ((addr.row as u64) << 32) | addr.col as u64);
        // The low bit of red is forced on so no tile matches the gray background.
        [(h as u8) | 1, (h >> 8) as u8, (h >> 16) as u8, 255]
    }
}

impl TileSource for FlatSource {
    fn pyramid(&self) -> &Pyramid {
        &self.pyramid
    }

    fn load(&self, addr: TileAddress) -> Result<Vec<u8>, ContainerError> {
        if !self.pyramid.contains(addr) {
            return Err(ContainerError::OutOfRange(addr));
        }
        Ok(self.color(addr).repeat(TILE_BYTES / 4))
    }
}
