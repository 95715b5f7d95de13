//! Frame-rate, buffer-rate, TeFOV and TPT.
//!
//! * frame rate: inverse of the time between consecutive frame starts;
//! * buffer rate: bytes buffered and enhanced during a frame window divided
//!   by that window's duration, in GB/s (10^9 bytes);
//! * TeFOV: time from a move-field command until every tile of the new field
//!   is buffered, counted only when the new field shares no pixels with the
//!   previous one and was not already buffered;
//! * TPT: TeFOV divided by the tiles of the field plus its perimeter.
//!
//! Summaries report the median and the 25th/75th percentiles using the
//! nearest-rank method on sorted data.

use std::collections::BTreeMap;
use std::io;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Timestamp;

pub const GB: f64 = 1e9;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("insufficient data for {0}")]
    InsufficientData(&'static str),
    #[error("{0} must be positive")]
    Domain(&'static str),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LayerClass {
    LR,
    HR,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameSample {
    pub frame_index: u64,
    pub start: Timestamp,
    /// End of the frame window (start of the next frame).
    pub end: Timestamp,
    /// Time spent filling the framebuffer.
    pub shader_ns: u64,
    pub bytes_completed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FovEvent {
    pub layer_class: LayerClass,
    pub move_field_at: Timestamp,
    pub completed_at: Timestamp,
    /// Tiles of the field plus its buffering perimeter.
    pub fov_tiles: u32,
    /// Tiles of the field alone.
    pub visible_tiles: u32,
    pub overlap: bool,
    pub pre_buffered: bool,
}

impl FovEvent {
    pub fn is_included(&self) -> bool {
        !self.overlap && !self.pre_buffered
    }

    pub fn tefov(&self) -> Duration {
        self.completed_at.saturating_since(self.move_field_at)
    }
}

/// One finished microtransaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxnRecord {
    pub tiles: u32,
    /// Bytes of tiles actually published.
    pub bytes: u64,
    pub submitted_at: Timestamp,
    pub completed_at: Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub median: f64,
    pub p25: f64,
    pub p75: f64,
    pub n: usize,
}

/// Nearest-rank percentile of already sorted data, `0 < p <= 100`.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

pub fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Some(Summary {
        median: nearest_rank(&sorted, 50.0),
        p25: nearest_rank(&sorted, 25.0),
        p75: nearest_rank(&sorted, 75.0),
        n: sorted.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub values: Vec<f64>,
    pub summary: Summary,
    /// Samples that could not contribute (zero-length intervals).
    pub skipped: usize,
}

/// Per-frame FPS from consecutive frame starts.
pub fn frame_rate(samples: &[FrameSample]) -> Result<Series, MetricsError> {
    if samples.len() < 2 {
        return Err(MetricsError::InsufficientData("frame rate"));
    }
    let mut values = Vec::with_capacity(samples.len() - 1);
    let mut skipped = 0;
    for w in samples.windows(2) {
        let dt = w[1].start.0.saturating_sub(w[0].start.0);
        if dt == 0 {
            skipped += 1;
        } else {
            values.push(1e9 / dt as f64);
        }
    }
    let summary = summarize(&values).ok_or(MetricsError::InsufficientData("frame rate"))?;
    Ok(Series {
        values,
        summary,
        skipped,
    })
}

/// Per-frame buffer rate in GB/s.
pub fn buffer_rate(samples: &[FrameSample]) -> Result<Series, MetricsError> {
    let mut values = Vec::with_capacity(samples.len());
    let mut skipped = 0;
    for s in samples {
        let dt = s.end.0.saturating_sub(s.start.0);
        if dt == 0 {
            skipped += 1;
        } else {
            values.push(s.bytes_completed as f64 / (dt as f64 * 1e-9) / GB);
        }
    }
    let summary = summarize(&values).ok_or(MetricsError::InsufficientData("buffer rate"))?;
    Ok(Series {
        values,
        summary,
        skipped,
    })
}

/// Mean buffer rate in GB/s over a run of consecutive frames: total bytes
/// over the span from the first start to the last end.
pub fn window_buffer_rate(samples: &[FrameSample]) -> Option<f64> {
    let (first, last) = (samples.first()?, samples.last()?);
    let dt = last.end.0.saturating_sub(first.start.0);
    let bytes: u64 = samples.iter().map(|s| s.bytes_completed).sum();
    (dt > 0).then(|| bytes as f64 / (dt as f64 * 1e-9) / GB)
}

/// Time per tile, kept as the exact ratio `tefov / tiles`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tpt {
    pub tefov: Duration,
    pub tiles: u32,
}

impl Tpt {
    pub fn secs(&self) -> f64 {
        self.tefov.as_secs_f64() / self.tiles as f64
    }

    pub fn micros(&self) -> f64 {
        self.tefov.as_nanos() as f64 / self.tiles as f64 / 1e3
    }

    /// `tpt * n`; exact when `n` is the tile count the ratio was formed with.
    pub fn times(&self, n: u32) -> Duration {
        if n == self.tiles {
            self.tefov
        } else {
            Duration::from_secs_f64(self.secs() * n as f64)
        }
    }
}

/// TPT of one event; `None` when it has no tiles.
pub fn tpt(event: &FovEvent) -> Option<Tpt> {
    (event.fov_tiles > 0).then(|| Tpt {
        tefov: event.tefov(),
        tiles: event.fov_tiles,
    })
}

/// Bytes per second from a per-tile time.
pub fn bitrate_from_tpt(tpt_secs: f64, bytes_per_tile: u64) -> Result<f64, MetricsError> {
    if !(tpt_secs > 0.0) {
        return Err(MetricsError::Domain("time per tile"));
    }
    Ok(bytes_per_tile as f64 / tpt_secs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub tefov_ms: Summary,
    pub tpt_us: Option<Summary>,
}

/// TeFOV and TPT summaries per layer class over included events only.
pub fn tefov(events: &[FovEvent]) -> Result<BTreeMap<LayerClass, ClassSummary>, MetricsError> {
    let mut out = BTreeMap::new();
    for class in [LayerClass::LR, LayerClass::HR] {
        let included: Vec<_> = events
            .iter()
            .filter(|e| e.layer_class == class && e.is_included())
            .collect();
        let tefovs: Vec<f64> = included.iter().map(|e| e.tefov().as_nanos() as f64 / 1e6).collect();
        let tpts: Vec<f64> = included.iter().filter_map(|e| tpt(e)).map(|t| t.micros()).collect();
        if let Some(tefov_ms) = summarize(&tefovs) {
            out.insert(
                class,
                ClassSummary {
                    tefov_ms,
                    tpt_us: summarize(&tpts),
                },
            );
        }
    }
    if out.is_empty() {
        return Err(MetricsError::InsufficientData("TeFOV"));
    }
    Ok(out)
}

/// Non-blocking sinks for engine threads; aggregation happens on snapshots.
#[derive(Debug, Default)]
pub struct MetricsRecorder {
    frames: Mutex<Vec<FrameSample>>,
    events: Mutex<Vec<FovEvent>>,
    txns: Mutex<Vec<TxnRecord>>,
    window_bytes: AtomicU64,
    total_bytes: AtomicU64,
}

impl MetricsRecorder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_txn(&self, rec: TxnRecord) {
        self.window_bytes.fetch_add(rec.bytes, Ordering::SeqCst);
        self.total_bytes.fetch_add(rec.bytes, Ordering::Relaxed);
        self.txns.lock().push(rec);
    }

    /// Takes the bytes completed since the last call.
    pub fn take_window_bytes(&self) -> u64 {
        self.window_bytes.swap(0, Ordering::SeqCst)
    }

    pub fn record_frame(&self, sample: FrameSample) {
        self.frames.lock().push(sample);
    }

    pub fn record_event(&self, event: FovEvent) {
        self.events.lock().push(event);
    }

    pub fn total_txn_bytes(&self) -> u64 {
        self.total_bytes.load(Ordering::Relaxed)
    }

    pub fn frames(&self) -> Vec<FrameSample> {
        self.frames.lock().clone()
    }

    /// The last `n` frame samples, oldest first.
    pub fn recent_frames(&self, n: usize) -> Vec<FrameSample> {
        let frames = self.frames.lock();
        frames[frames.len().saturating_sub(n)..].to_vec()
    }

    pub fn events(&self) -> Vec<FovEvent> {
        self.events.lock().clone()
    }

    pub fn txns(&self) -> Vec<TxnRecord> {
        self.txns.lock().clone()
    }

    pub fn last_event(&self) -> Option<FovEvent> {
        self.events.lock().iter().rev().find(|e| e.is_included()).copied()
    }

    pub fn frame_count(&self) -> usize {
        self.frames.lock().len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRow {
    pub frame_index: u64,
    pub start_ns: u64,
    pub end_ns: u64,
    pub shader_ns: u64,
    pub bytes_completed: u64,
}

impl From<&FrameSample> for FrameRow {
    fn from(s: &FrameSample) -> Self {
        Self {
            frame_index: s.frame_index,
            start_ns: s.start.0,
            end_ns: s.end.0,
            shader_ns: s.shader_ns,
            bytes_completed: s.bytes_completed,
        }
    }
}

impl From<&FrameRow> for FrameSample {
    fn from(r: &FrameRow) -> Self {
        Self {
            frame_index: r.frame_index,
            start: Timestamp(r.start_ns),
            end: Timestamp(r.end_ns),
            shader_ns: r.shader_ns,
            bytes_completed: r.bytes_completed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRow {
    pub layer_class: LayerClass,
    pub move_field_ns: u64,
    pub completed_ns: u64,
    pub fov_tiles: u32,
    pub visible_tiles: u32,
    pub overlap: bool,
    pub pre_buffered: bool,
    pub tefov_ms: f64,
    /// Empty when `fov_tiles` is zero.
    pub tpt_us: Option<f64>,
}

impl From<&FovEvent> for EventRow {
    fn from(e: &FovEvent) -> Self {
        Self {
            layer_class: e.layer_class,
            move_field_ns: e.move_field_at.0,
            completed_ns: e.completed_at.0,
            fov_tiles: e.fov_tiles,
            visible_tiles: e.visible_tiles,
            overlap: e.overlap,
            pre_buffered: e.pre_buffered,
            tefov_ms: e.tefov().as_nanos() as f64 / 1e6,
            tpt_us: tpt(e).map(|t| t.micros()),
        }
    }
}

impl From<&EventRow> for FovEvent {
    fn from(r: &EventRow) -> Self {
        Self {
            layer_class: r.layer_class,
            move_field_at: Timestamp(r.move_field_ns),
            completed_at: Timestamp(r.completed_ns),
            fov_tiles: r.fov_tiles,
            visible_tiles: r.visible_tiles,
            overlap: r.overlap,
            pre_buffered: r.pre_buffered,
        }
    }
}

pub const FRAME_CSV_HEADER: &[&str] = &["frame_index", "start_ns", "end_ns", "shader_ns", "bytes_completed"];
pub const EVENT_CSV_HEADER: &[&str] = &[
    "layer_class",
    "move_field_ns",
    "completed_ns",
    "fov_tiles",
    "visible_tiles",
    "overlap",
    "pre_buffered",
    "tefov_ms",
    "tpt_us",
];

/// Writes `header` and then one row per record; the header is present even
/// when there are no rows.
pub fn write_csv<R: Serialize>(path: impl AsRef<Path>, header: &[&str], rows: impl IntoIterator<Item = R>) -> Result<(), MetricsError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<R>, MetricsError> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().collect::<Result<_, _>>().map_err(Into::into)
}
