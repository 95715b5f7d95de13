//! Tiled pyramid container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! 0   magic      [u8; 8]  "TILESTRM"
//! 8   version    u16      1
//! 10  layers     u8
//! 11  tile_edge  u16      256
//! 13  layer records, 24 bytes each:
//!       downsample f64, width_px u32, height_px u32, tile_table_offset u64
//! ..  tile tables, one per layer, row-major, 13 bytes per tile:
//!       offset u64, length u32, codec u8
//! ..  tile payloads
//! ```
//!
//! Codec 0 stores raw RGBA8, codec 1 stores a raw deflate (RFC 1951) stream
//! of the same bytes. Every decoded payload is exactly [`TILE_BYTES`] long.

use std::fs::File;
use std::io::{self, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use flate2::read::DeflateDecoder;
use flate2::write::DeflateEncoder;
use flate2::Compression;
use thiserror::Error;

use crate::pyramid::{LayerInfo, Pyramid, PyramidError, TileAddress, TILE_BYTES, TILE_EDGE};
use crate::source::TileSource;

pub const MAGIC: [u8; 8] = *b"TILESTRM";
pub const VERSION: u16 = 1;

const FIXED_HEADER_LEN: u64 = 13;
const LAYER_RECORD_LEN: u64 = 24;
const TILE_RECORD_LEN: u64 = 13;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    Version(u16),
    #[error("unsupported tile edge {0}")]
    TileEdge(u16),
    #[error("invalid pyramid: {0}")]
    Pyramid(#[from] PyramidError),
    #[error("tile {0} is outside the pyramid")]
    OutOfRange(TileAddress),
    #[error("tile {0} has not been written")]
    Missing(TileAddress),
    #[error("unknown codec {codec} for tile {addr}")]
    UnknownCodec { addr: TileAddress, codec: u8 },
    #[error("pixel buffer is {0} bytes, expected {TILE_BYTES}")]
    BadLength(usize),
    #[error("tile {addr} failed to decode: {reason}")]
    Decode { addr: TileAddress, reason: String },
    #[error("invalid synthetic slide spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Codec {
    Raw = 0,
    Deflate = 1,
}

impl TryFrom<u8> for Codec {
    type Error = u8;
    fn try_from(v: u8) -> Result<Self, u8> {
        match v {
            0 => Ok(Codec::Raw),
            1 => Ok(Codec::Deflate),
            other => Err(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TileRecord {
    pub offset: u64,
    pub length: u32,
    pub codec: u8,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerRecord {
    pub info: LayerInfo,
    pub tile_table_offset: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContainerHeader {
    pub version: u16,
    pub pyramid: Pyramid,
    pub layers: Vec<LayerRecord>,
}

impl ContainerHeader {
    fn for_pyramid(pyramid: Pyramid) -> Self {
        let mut offset = FIXED_HEADER_LEN + LAYER_RECORD_LEN * pyramid.layers().len() as u64;
        let layers = pyramid
            .layers()
            .iter()
            .map(|&info| {
                let rec = LayerRecord {
                    info,
                    tile_table_offset: offset,
                };
                offset += TILE_RECORD_LEN * info.tile_count() as u64;
                rec
            })
            .collect();
        Self {
            version: VERSION,
            pyramid,
            layers,
        }
    }

    /// First byte after the tile tables.
    fn payload_start(&self) -> u64 {
        self.layers
            .last()
            .map(|l| l.tile_table_offset + TILE_RECORD_LEN * l.info.tile_count() as u64)
            .unwrap_or(FIXED_HEADER_LEN)
    }

    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.payload_start() as usize);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.push(self.layers.len() as u8);
        out.extend_from_slice(&(TILE_EDGE as u16).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&l.info.downsample.to_le_bytes());
            out.extend_from_slice(&l.info.width_px.to_le_bytes());
            out.extend_from_slice(&l.info.height_px.to_le_bytes());
            out.extend_from_slice(&l.tile_table_offset.to_le_bytes());
        }
        out
    }

    fn decode(mut r: impl Read) -> Result<Self, ContainerError> {
        let mut fixed = [0u8; FIXED_HEADER_LEN as usize];
        r.read_exact(&mut fixed)?;
        if fixed[..8] != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        let version = u16::from_le_bytes([fixed[8], fixed[9]]);
        if version != VERSION {
            return Err(ContainerError::Version(version));
        }
        let count = fixed[10] as usize;
        let edge = u16::from_le_bytes([fixed[11], fixed[12]]);
        if edge as u32 != TILE_EDGE {
            return Err(ContainerError::TileEdge(edge));
        }
        let mut infos = Vec::with_capacity(count);
        let mut offsets = Vec::with_capacity(count);
        for i in 0..count {
            let mut rec = [0u8; LAYER_RECORD_LEN as usize];
            r.read_exact(&mut rec)?;
            let downsample = f64::from_le_bytes(rec[0..8].try_into().unwrap());
            let width = u32::from_le_bytes(rec[8..12].try_into().unwrap());
            let height = u32::from_le_bytes(rec[12..16].try_into().unwrap());
            offsets.push(u64::from_le_bytes(rec[16..24].try_into().unwrap()));
            infos.push(LayerInfo::new(i as u32, downsample, width, height));
        }
        let pyramid = Pyramid::new(infos)?;
        let layers = pyramid
            .layers()
            .iter()
            .zip(offsets)
            .map(|(&info, tile_table_offset)| LayerRecord {
                info,
                tile_table_offset,
            })
            .collect();
        Ok(Self {
            version,
            pyramid,
            layers,
        })
    }
}

fn encode_record(rec: &TileRecord) -> [u8; TILE_RECORD_LEN as usize] {
    let mut b = [0u8; TILE_RECORD_LEN as usize];
    b[0..8].copy_from_slice(&rec.offset.to_le_bytes());
    b[8..12].copy_from_slice(&rec.length.to_le_bytes());
    b[12] = rec.codec;
    b
}

fn decode_record(b: &[u8]) -> TileRecord {
    TileRecord {
        offset: u64::from_le_bytes(b[0..8].try_into().unwrap()),
        length: u32::from_le_bytes(b[8..12].try_into().unwrap()),
        codec: b[12],
    }
}

/// Single-writer container builder. Tile tables are written by [`finish`].
///
/// [`finish`]: ContainerWriter::finish
pub struct ContainerWriter {
    out: BufWriter<File>,
    header: ContainerHeader,
    records: Vec<TileRecord>,
    end: u64,
}

impl ContainerWriter {
    pub fn create(path: impl AsRef<Path>, pyramid: Pyramid) -> Result<Self, ContainerError> {
        let header = ContainerHeader::for_pyramid(pyramid);
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(&header.encode())?;
        let end = header.payload_start();
        // Zeroed tables; patched in `finish`.
        io::copy(
            &mut io::repeat(0).take(end - FIXED_HEADER_LEN - LAYER_RECORD_LEN * header.layers.len() as u64),
            &mut out,
        )?;
        let records = vec![TileRecord::default(); header.pyramid.total_tiles()];
        Ok(Self {
            out,
            header,
            records,
            end,
        })
    }

    pub fn header(&self) -> &ContainerHeader {
        &self.header
    }

    pub fn write_tile(&mut self, addr: TileAddress, pixels: &[u8], codec: Codec) -> Result<TileRecord, ContainerError> {
        if pixels.len() != TILE_BYTES {
            return Err(ContainerError::BadLength(pixels.len()));
        }
        let index = self
            .header
            .pyramid
            .linear_index(addr)
            .ok_or(ContainerError::OutOfRange(addr))?;
        let payload = match codec {
            Codec::Raw => std::borrow::Cow::Borrowed(pixels),
            Codec::Deflate => {
                let mut enc = DeflateEncoder::new(Vec::new(), Compression::new(6));
                enc.write_all(pixels)?;
                std::borrow::Cow::Owned(enc.finish()?)
            }
        };
        self.out.write_all(&payload)?;
        let rec = TileRecord {
            offset: self.end,
            length: payload.len() as u32,
            codec: codec as u8,
        };
        self.end += payload.len() as u64;
        self.records[index] = rec;
        Ok(rec)
    }

    pub fn finish(mut self) -> Result<ContainerHeader, ContainerError> {
        self.out.flush()?;
        let mut file = self.out.into_inner().map_err(|e| e.into_error())?;
        let table_start = self.header.layers.first().map_or(0, |l| l.tile_table_offset);
        file.seek(SeekFrom::Start(table_start))?;
        let mut tables = Vec::with_capacity(self.records.len() * TILE_RECORD_LEN as usize);
        for rec in &self.records {
            tables.extend_from_slice(&encode_record(rec));
        }
        file.write_all(&tables)?;
        file.sync_all()?;
        Ok(self.header)
    }
}

/// An open container. Reads are positional, so one instance may be shared
/// by any number of threads.
pub struct Container {
    path: PathBuf,
    file: File,
    header: ContainerHeader,
    records: Vec<TileRecord>,
}

impl std::fmt::Debug for Container {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Container")
            .field("path", &self.path)
            .field("header", &self.header)
            .finish_non_exhaustive()
    }
}

impl Container {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, ContainerError> {
        let path = path.as_ref().to_path_buf();
        let mut file = File::open(&path)?;
        let header = ContainerHeader::decode(io::BufReader::new(&mut file))?;
        let mut tables = vec![0u8; (header.pyramid.total_tiles() as u64 * TILE_RECORD_LEN) as usize];
        if let Some(first) = header.layers.first() {
            read_at(&file, &mut tables, first.tile_table_offset)?;
        }
        let records = tables.chunks_exact(TILE_RECORD_LEN as usize).map(decode_record).collect();
        Ok(Self {
            path,
            file,
            header,
            records,
        })
    }

    pub fn header(&self) -> &ContainerHeader {
        &self.header
    }

    pub fn pyramid(&self) -> &Pyramid {
        &self.header.pyramid
    }

    pub fn record(&self, addr: TileAddress) -> Result<TileRecord, ContainerError> {
        let index = self
            .header
            .pyramid
            .linear_index(addr)
            .ok_or(ContainerError::OutOfRange(addr))?;
        Ok(self.records[index])
    }

    pub fn read_tile(&self, addr: TileAddress) -> Result<Vec<u8>, ContainerError> {
        let rec = self.record(addr)?;
        if rec.offset == 0 {
            return Err(ContainerError::Missing(addr));
        }
        let codec = Codec::try_from(rec.codec).map_err(|codec| ContainerError::UnknownCodec { addr, codec })?;
        let decode_err = |reason: String| ContainerError::Decode { addr, reason };
        match codec {
            Codec::Raw => {
                if rec.length as usize != TILE_BYTES {
                    return Err(decode_err(format!("raw payload is {} bytes", rec.length)));
                }
                let mut buf = vec![0u8; TILE_BYTES];
                read_at(&self.file, &mut buf, rec.offset)?;
                Ok(buf)
            }
            Codec::Deflate => {
                let mut stored = vec![0u8; rec.length as usize];
                read_at(&self.file, &mut stored, rec.offset)?;
                let mut buf = Vec::with_capacity(TILE_BYTES);
                DeflateDecoder::new(&stored[..])
                    .take(TILE_BYTES as u64 + 1)
                    .read_to_end(&mut buf)
                    .map_err(|e| decode_err(e.to_string()))?;
                if buf.len() != TILE_BYTES {
                    return Err(decode_err(format!("inflated to {} bytes", buf.len())));
                }
                Ok(buf)
            }
        }
    }
}

impl TileSource for Container {
    fn pyramid(&self) -> &Pyramid {
        Container::pyramid(self)
    }

    fn load(&self, addr: TileAddress) -> Result<Vec<u8>, ContainerError> {
        self.read_tile(addr)
    }
}

#[cfg(unix)]
fn read_at(file: &File, buf: &mut [u8], offset: u64) -> io::Result<()> {
    use std::os::unix::fs::FileExt;
    file.read_exact_at(buf, offset)
}

#[cfg(windows)]
fn read_at(file: &File, mut buf: &mut [u8], mut offset: u64) -> io::Result<()> {
    use std::os::windows::fs::FileExt;
    while !buf.is_empty() {
        match file.seek_read(buf, offset)? {
            0 => return Err(io::ErrorKind::UnexpectedEof.into()),
            n => {
                buf = &mut buf[n..];
                offset += n as u64;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_pyramid() -> Pyramid {
        Pyramid::from_downsamples(600, 300, &[1.0, 4.0]).unwrap()
    }

    fn noise(seed: u8) -> Vec<u8> {
        (0..TILE_BYTES).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect()
    }

    #[test]
    fn raw_and_deflate_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tiles");
        let mut w = ContainerWriter::create(&path, small_pyramid()).unwrap();
        let a = TileAddress::new(0, 2, 1);
        let b = TileAddress::new(1, 0, 0);
        let constant = vec![7u8; TILE_BYTES];
        w.write_tile(a, &noise(3), Codec::Raw).unwrap();
        let rec = w.write_tile(b, &constant, Codec::Deflate).unwrap();
        assert!((rec.length as usize) < TILE_BYTES);
        w.finish().unwrap();

        let c = Container::open(&path).unwrap();
        assert_eq!(c.read_tile(a).unwrap(), noise(3));
        assert_eq!(c.read_tile(b).unwrap(), constant);
        assert!(matches!(c.read_tile(TileAddress::new(0, 0, 0)), Err(ContainerError::Missing(_))));
    }

    #[test]
    fn rejects_bad_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tiles");
        let mut w = ContainerWriter::create(&path, small_pyramid()).unwrap();
        assert!(matches!(
            w.write_tile(TileAddress::new(0, 0, 0), &[0u8; 12], Codec::Raw),
            Err(ContainerError::BadLength(12))
        ));
        let tiles_x = w.header().pyramid.base().tiles_x;
        assert!(matches!(
            w.write_tile(TileAddress::new(0, tiles_x, 0), &noise(0), Codec::Raw),
            Err(ContainerError::OutOfRange(_))
        ));
        w.finish().unwrap();
        let c = Container::open(&path).unwrap();
        assert!(matches!(
            c.read_tile(TileAddress::new(0, tiles_x, 0)),
            Err(ContainerError::OutOfRange(_))
        ));
    }

    #[test]
    fn corrupt_deflate_payload_names_the_tile() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tiles");
        let mut w = ContainerWriter::create(&path, small_pyramid()).unwrap();
        let addr = TileAddress::new(0, 1, 0);
        let rec = w.write_tile(addr, &noise(9), Codec::Deflate).unwrap();
        w.finish().unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        for b in &mut bytes[rec.offset as usize..(rec.offset + 16) as usize] {
            *b ^= 0xA5;
        }
        std::fs::write(&path, bytes).unwrap();
        let err = Container::open(&path).unwrap().read_tile(addr).unwrap_err();
        match err {
            ContainerError::Decode { addr: a, .. } => assert_eq!(a, addr),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk");
        std::fs::write(&path, b"NOTTILES\x01\x00\x01\x00\x01").unwrap();
        assert!(matches!(Container::open(&path), Err(ContainerError::BadMagic)));
    }
}
