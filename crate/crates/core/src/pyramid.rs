//! Pyramid geometry: layer selection, visible tile enumeration, the buffering
//! perimeter and field-of-view overlap.
//!
//! Every function here is pure and works on slide coordinates expressed in
//! layer-0 pixels. A layer with downsample `d` maps layer-0 coordinate `x` to
//! layer-native coordinate `x / d`.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Edge length of every tile, in layer-native pixels.
pub const TILE_EDGE: u32 = 256;

/// Bytes in one decoded RGBA8 tile.
pub const TILE_BYTES: usize = (TILE_EDGE * TILE_EDGE * 4) as usize;

/// Largest accepted buffering perimeter radius.
pub const MAX_PERIMETER_RADIUS: u32 = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PyramidError {
    #[error("pyramid has no layers")]
    Empty,
    #[error("layer {index}: downsample {downsample} is not strictly increasing")]
    NotIncreasing { index: usize, downsample: f64 },
    #[error("layer 0 must have downsample 1, found {0}")]
    BaseDownsample(f64),
    #[error("layer {index}: invalid extent {width}x{height}")]
    BadExtent { index: usize, width: u32, height: u32 },
    #[error("zoom must be finite and positive, got {0}")]
    BadZoom(f64),
}

/// One resolution layer of the pyramid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub index: u32,
    /// Layer-0 pixels per layer-native pixel.
    pub downsample: f64,
    pub width_px: u32,
    pub height_px: u32,
    pub tiles_x: u32,
    pub tiles_y: u32,
}

impl LayerInfo {
    pub fn new(index: u32, downsample: f64, width_px: u32, height_px: u32) -> Self {
        Self {
            index,
            downsample,
            width_px,
            height_px,
            tiles_x: width_px.div_ceil(TILE_EDGE),
            tiles_y: height_px.div_ceil(TILE_EDGE),
        }
    }

    pub fn tile_count(&self) -> usize {
        self.tiles_x as usize * self.tiles_y as usize
    }

    pub fn contains(&self, addr: TileAddress) -> bool {
        addr.layer == self.index && addr.col < self.tiles_x && addr.row < self.tiles_y
    }
}

/// A tile within one layer's grid.
///
/// Ordering is (layer, row, col), i.e. row-major within a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TileAddress {
    pub layer: u32,
    pub row: u32,
    pub col: u32,
}

impl TileAddress {
    pub const fn new(layer: u32, col: u32, row: u32) -> Self {
        Self { layer, row, col }
    }
}

impl fmt::Display for TileAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}({},{})", self.layer, self.col, self.row)
    }
}

/// The on-screen window onto the slide.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Viewport {
    /// Top-left corner in layer-0 slide pixels.
    pub origin_x: f64,
    pub origin_y: f64,
    pub width_scr: u32,
    pub height_scr: u32,
    /// Screen pixels per layer-0 slide pixel.
    pub zoom: f64,
}

impl Viewport {
    pub fn new(origin_x: f64, origin_y: f64, width_scr: u32, height_scr: u32, zoom: f64) -> Self {
        Self {
            origin_x,
            origin_y,
            width_scr,
            height_scr,
            zoom,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.width_scr > 0
            && self.height_scr > 0
            && self.zoom.is_finite()
            && self.zoom > 0.0
            && self.origin_x.is_finite()
            && self.origin_y.is_finite()
    }

    /// Width of the covered rectangle in layer-0 pixels.
    pub fn slide_width(&self) -> f64 {
        self.width_scr as f64 / self.zoom
    }

    pub fn slide_height(&self) -> f64 {
        self.height_scr as f64 / self.zoom
    }

    /// `(x0, y0, x1, y1)` in layer-0 pixels, half-open.
    pub fn slide_rect(&self) -> (f64, f64, f64, f64) {
        (
            self.origin_x,
            self.origin_y,
            self.origin_x + self.slide_width(),
            self.origin_y + self.slide_height(),
        )
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            origin_x: self.origin_x + dx,
            origin_y: self.origin_y + dy,
            ..*self
        }
    }
}

/// The high-resolution (shrunk) and low-resolution (enlarged) layers drawn
/// for a given zoom.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LayerPair {
    pub hr: Option<u32>,
    pub lr: Option<u32>,
}

/// Validated, ordered list of layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pyramid {
    layers: Vec<LayerInfo>,
}

impl Pyramid {
    pub fn new(layers: Vec<LayerInfo>) -> Result<Self, PyramidError> {
        validate_layers(&layers)?;
        Ok(Self { layers })
    }

    /// Builds the layer list for a layer-0 extent and a list of downsamples,
    /// each layer being `ceil(extent / downsample)` pixels across.
    pub fn from_downsamples(width_px: u32, height_px: u32, downsamples: &[f64]) -> Result<Self, PyramidError> {
        let layers = downsamples
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                LayerInfo::new(
                    i as u32,
                    d,
                    (width_px as f64 / d).ceil() as u32,
                    (height_px as f64 / d).ceil() as u32,
                )
            })
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[LayerInfo] {
        &self.layers
    }

    pub fn layer(&self, index: u32) -> Option<&LayerInfo> {
        self.layers.get(index as usize)
    }

    pub fn base(&self) -> &LayerInfo {
        &self.layers[0]
    }

    pub fn contains(&self, addr: TileAddress) -> bool {
        self.layer(addr.layer).is_some_and(|l| l.contains(addr))
    }

    pub fn total_tiles(&self) -> usize {
        self.layers.iter().map(LayerInfo::tile_count).sum()
    }

    /// Dense index of a tile across all layers, row-major within each layer.
    pub fn linear_index(&self, addr: TileAddress) -> Option<usize> {
        let layer = self.layer(addr.layer)?;
        if !layer.contains(addr) {
            return None;
        }
        let before: usize = self.layers[..addr.layer as usize]
            .iter()
            .map(LayerInfo::tile_count)
            .sum();
        Some(before + addr.row as usize * layer.tiles_x as usize + addr.col as usize)
    }

    pub fn select_layers(&self, zoom: f64) -> Result<LayerPair, PyramidError> {
        select_layers(zoom, &self.layers)
    }
}

fn validate_layers(layers: &[LayerInfo]) -> Result<(), PyramidError> {
    let first = layers.first().ok_or(PyramidError::Empty)?;
    if first.downsample != 1.0 {
        return Err(PyramidError::BaseDownsample(first.downsample));
    }
    for (i, l) in layers.iter().enumerate() {
        if l.width_px == 0 || l.height_px == 0 || l.index as usize != i {
            return Err(PyramidError::BadExtent {
                index: i,
                width: l.width_px,
                height: l.height_px,
            });
        }
        if i > 0 && !(l.downsample > layers[i - 1].downsample) {
            return Err(PyramidError::NotIncreasing {
                index: i,
                downsample: l.downsample,
            });
        }
    }
    Ok(())
}

/// Picks the layer drawn shrunk (`downsample * zoom <= 1`, the largest such
/// downsample) and the layer drawn enlarged (`downsample * zoom > 1`, the
/// smallest such downsample).
pub fn select_layers(zoom: f64, layers: &[LayerInfo]) -> Result<LayerPair, PyramidError> {
    if layers.is_empty() {
        return Err(PyramidError::Empty);
    }
    if !(zoom.is_finite() && zoom > 0.0) {
        return Err(PyramidError::BadZoom(zoom));
    }
    // Downsamples are strictly increasing, so the shrunk layers form a prefix.
    let split = layers.partition_point(|l| l.downsample * zoom <= 1.0);
    Ok(LayerPair {
        hr: split.checked_sub(1).map(|i| layers[i].index),
        lr: layers.get(split).map(|l| l.index),
    })
}

/// Grid range `[lo, hi)` of tiles overlapping the open interval `(a, b)` in
/// layer-native pixels, clipped to `[0, count)`.
fn tile_span(a: f64, b: f64, count: u32) -> (u32, u32) {
    if !(b > a) {
        return (0, 0);
    }
    let edge = TILE_EDGE as f64;
    let lo = (a / edge).floor().max(0.0);
    let hi = (b / edge).ceil().min(count as f64);
    if hi <= lo {
        (0, 0)
    } else {
        (lo as u32, hi as u32)
    }
}

/// Tiles of `layer` whose footprint shares area with the viewport.
pub fn visible_tiles(vp: &Viewport, layer: &LayerInfo) -> BTreeSet<TileAddress> {
    let (x0, y0, x1, y1) = vp.slide_rect();
    let d = layer.downsample;
    let (c0, c1) = tile_span(x0 / d, x1 / d, layer.tiles_x);
    let (r0, r1) = tile_span(y0 / d, y1 / d, layer.tiles_y);
    let mut out = BTreeSet::new();
    for row in r0..r1 {
        for col in c0..c1 {
            out.insert(TileAddress::new(layer.index, col, row));
        }
    }
    out
}

/// Chebyshev dilation of `visible` by `radius` tiles, clipped to the grid.
pub fn buffer_region(visible: &BTreeSet<TileAddress>, radius: u32, layer: &LayerInfo) -> BTreeSet<TileAddress> {
    let mut out = BTreeSet::new();
    for t in visible {
        let c0 = t.col.saturating_sub(radius);
        let r0 = t.row.saturating_sub(radius);
        let c1 = (t.col + radius + 1).min(layer.tiles_x);
        let r1 = (t.row + radius + 1).min(layer.tiles_y);
        for row in r0..r1 {
            for col in c0..c1 {
                out.insert(TileAddress::new(t.layer, col, row));
            }
        }
    }
    out
}

/// True iff the two viewport rectangles share a positive area of slide.
pub fn fov_overlap(prev: &Viewport, next: &Viewport) -> bool {
    let (ax0, ay0, ax1, ay1) = prev.slide_rect();
    let (bx0, by0, bx1, by1) = next.slide_rect();
    ax0.max(bx0) < ax1.min(bx1) && ay0.max(by0) < ay1.min(by1)
}
