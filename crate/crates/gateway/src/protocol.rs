//! Wire formats. Text frames carry JSON; binary frames carry one rendered
//! frame as a 16-byte little-endian header followed by a PNG image.
//!
//! ```text
//! offset  size  field
//! 0       8     frame_index (u64 LE)
//! 8       4     width       (u32 LE)
//! 12      4     height      (u32 LE)
//! 16      ..    PNG, 8-bit RGBA, width x height
//! ```

use serde::{Deserialize, Serialize};
use tilestream::Framebuffer;

pub const FRAME_HEADER_BYTES: usize = 16;

/// Client to gateway: move the view. Commands with a `client_seq` not above
/// the highest one seen on the connection are ignored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewportCommand {
    /// Left edge of the view in layer-0 pixels.
    pub x: f64,
    /// Top edge of the view in layer-0 pixels.
    pub y: f64,
    /// Screen pixels per layer-0 pixel.
    pub zoom: f64,
    pub client_seq: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsPacket {
    /// Median frame rate over the frames since the previous packet.
    pub fps: Option<f64>,
    /// Bytes buffered over the same frames, divided by their span.
    pub buffer_rate_gbps: Option<f64>,
    pub last_tefov_ms: Option<f64>,
    pub last_tpt_us: Option<f64>,
    /// Fraction of slots holding a published tile.
    pub pool_occupancy: f64,
    /// Engine clock, milliseconds since engine start.
    pub timestamp: f64,
}

/// Gateway to client text messages, tagged by `type`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Metrics(MetricsPacket),
    /// Reply to every well-formed command; `applied` is false when the
    /// command was stale.
    Ack { client_seq: u64, applied: bool },
    /// A message was rejected; the connection stays open.
    Error { message: String },
}

#[derive(Debug, thiserror::Error)]
pub enum PacketError {
    #[error("frame packet shorter than its header")]
    Truncated,
    #[error("PNG: {0}")]
    Png(String),
    #[error("PNG is {got:?}, header says {want:?}")]
    Size { got: (u32, u32), want: (u32, u32) },
}

/// A decoded binary frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FramePacket {
    pub frame_index: u64,
    pub width: u32,
    pub height: u32,
    /// RGBA8, row-major.
    pub pixels: Vec<u8>,
}

/// Lossless RGBA8 PNG of a framebuffer.
pub fn encode_png(fb: &Framebuffer) -> Vec<u8> {
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, fb.width, fb.height);
    enc.set_color(png::ColorType::Rgba);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_compression(png::Compression::Fast);
    let mut w = enc.write_header().expect("PNG header to memory");
    w.write_image_data(&fb.pixels).expect("PNG data to memory");
    w.finish().expect("PNG end to memory");
    out
}

pub fn encode_frame_packet(fb: &Framebuffer) -> Vec<u8> {
    let png = encode_png(fb);
    let mut out = Vec::with_capacity(FRAME_HEADER_BYTES + png.len());
    out.extend_from_slice(&fb.frame_index.to_le_bytes());
    out.extend_from_slice(&fb.width.to_le_bytes());
    out.extend_from_slice(&fb.height.to_le_bytes());
    out.extend_from_slice(&png);
    out
}

pub fn decode_frame_packet(bytes: &[u8]) -> Result<FramePacket, PacketError> {
    if bytes.len() < FRAME_HEADER_BYTES {
        return Err(PacketError::Truncated);
    }
    let frame_index = u64::from_le_bytes(bytes[0..8].try_into().unwrap());
    let width = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let height = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
    let dec = png::Decoder::new(&bytes[FRAME_HEADER_BYTES..]);
    let mut reader = dec.read_info().map_err(|e| PacketError::Png(e.to_string()))?;
    let mut pixels = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut pixels).map_err(|e| PacketError::Png(e.to_string()))?;
    if (info.width, info.height) != (width, height) {
        return Err(PacketError::Size {
            got: (info.width, info.height),
            want: (width, height),
        });
    }
    if info.color_type != png::ColorType::Rgba || info.bit_depth != png::BitDepth::Eight {
        return Err(PacketError::Png(format!("unexpected format {:?} {:?}", info.color_type, info.bit_depth)));
    }
    pixels.truncate(info.buffer_size());
    Ok(FramePacket {
        frame_index,
        width,
        height,
        pixels,
    })
}
