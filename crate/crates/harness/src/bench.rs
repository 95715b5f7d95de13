//! Headless benchmark: plays a trace against a live engine and checks the
//! accounting invariants on the recorded data.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use tilestream::metrics::{
    buffer_rate, frame_rate, tefov, tpt, write_csv, ClassSummary, EventRow, EVENT_CSV_HEADER, FRAME_CSV_HEADER, FovEvent, FrameRow, FrameSample, LayerClass, Summary,
    TxnRecord,
};
use tilestream::pyramid::fov_overlap;
use tilestream::rtbs::{EngineCounters, ViewAudit};
use tilestream::session::FrameLoopReport;
use tilestream::{CompositorConfig, Engine, EngineConfig, FrameLoop, FrameLoopConfig, Framebuffer, TileSource};

use crate::trace::Trace;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub engine: EngineConfig,
    pub target_hz: u32,
    pub compositor: CompositorConfig,
    /// Wait for quiescence before each move to a new field, so that every
    /// field completes and yields its events.
    pub settle: bool,
    pub settle_timeout_ms: u64,
    /// Run the paced render loop; without it no frames are recorded.
    pub render: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            engine: EngineConfig::default(),
            target_hz: 120,
            compositor: CompositorConfig::default(),
            settle: true,
            settle_timeout_ms: 30_000,
            render: true,
        }
    }
}

impl BenchConfig {
    /// One loader, one executor and a serial compositor.
    pub fn single_thread(mut self) -> Self {
        self.engine.loader_workers = 1;
        self.engine.executors = 1;
        self.compositor.parallel = false;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvariantCheck {
    pub name: String,
    pub ok: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct BenchResult {
    pub frames: Vec<FrameSample>,
    pub events: Vec<FovEvent>,
    pub txns: Vec<TxnRecord>,
    pub audits: Vec<ViewAudit>,
    pub counters: EngineCounters,
    pub frame_loop: FrameLoopReport,
    pub new_fields: usize,
    pub settle_failures: usize,
    pub wall: Duration,
    pub last_frame: Option<Arc<Framebuffer>>,
    pub invariants: Vec<InvariantCheck>,
}

impl BenchResult {
    pub fn healthy(&self) -> bool {
        self.invariants.iter().all(|c| c.ok)
    }

    pub fn failures(&self) -> Vec<&InvariantCheck> {
        self.invariants.iter().filter(|c| !c.ok).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchSummary {
    pub version: u32,
    pub trace_seed: u64,
    pub trace_style: String,
    pub commands: usize,
    pub new_fields: usize,
    pub config: BenchConfig,
    pub wall_ms: f64,
    pub frames: usize,
    pub skipped_ticks: u64,
    pub frame_rate_fps: Option<Summary>,
    pub buffer_rate_gbps: Option<Summary>,
    pub tefov: BTreeMap<LayerClass, ClassSummary>,
    pub counters: EngineCounters,
    pub invariants: Vec<InvariantCheck>,
}

fn check(name: &str, ok: bool, detail: impl Into<String>) -> InvariantCheck {
    InvariantCheck {
        name: name.into(),
        ok,
        detail: detail.into(),
    }
}

/// Plays `trace` against a fresh engine over `source`.
pub fn run_bench(source: Arc<dyn TileSource>, trace: &Trace, config: &BenchConfig) -> Result<BenchResult> {
    trace.validate()?;
    let screen = trace.screen();
    let engine = Arc::new(Engine::start(source, config.engine, screen)?);
    let frame_loop = config.render.then(|| {
        FrameLoop::start(
            engine.clone(),
            FrameLoopConfig {
                target_hz: config.target_hz,
                compositor: config.compositor,
            },
        )
    });
    let settle_timeout = Duration::from_millis(config.settle_timeout_ms);
    let viewports = trace.viewports();
    let started = Instant::now();
    let mut shift = Duration::ZERO;
    let mut settle_failures = 0;
    for (i, (cmd, vp)) in trace.commands.iter().zip(&viewports).enumerate() {
        let new_field = i == 0 || !fov_overlap(&viewports[i - 1], vp);
        if config.settle && new_field && i > 0 {
            let t = Instant::now();
            if engine.wait_quiescent(settle_timeout).is_none() {
                settle_failures += 1;
            }
            shift += t.elapsed();
        }
        let due = started + shift + Duration::from_millis(cmd.t_ms);
        if let Some(wait) = due.checked_duration_since(Instant::now()) {
            std::thread::sleep(wait);
        }
        engine.set_view(*vp)?;
    }
    if engine.wait_quiescent(settle_timeout).is_none() && config.settle {
        settle_failures += 1;
    }
    if config.render {
        // Let the last completions land in a frame window.
        std::thread::sleep(Duration::from_secs_f64(2.0 / config.target_hz as f64));
    }
    engine.shutdown();
    let mailbox = frame_loop.as_ref().map(|f| f.mailbox().clone());
    let frame_loop = frame_loop.map(FrameLoop::stop).unwrap_or_default();
    let wall = started.elapsed();

    let metrics = engine.metrics();
    let mut result = BenchResult {
        frames: metrics.frames(),
        events: metrics.events(),
        txns: metrics.txns(),
        audits: engine.view_audits(),
        counters: engine.counters(),
        frame_loop,
        new_fields: trace.new_fields(),
        settle_failures,
        wall,
        last_frame: mailbox.and_then(|m| m.latest()),
        invariants: Vec::new(),
    };
    let pool = engine.pool();
    let mut checks = invariants(&result, config);
    checks.push(check(
        "pool_consistency",
        pool.check_consistency().is_ok() && pool.total_refcount() == 0 && pool.occupancy().pending == 0,
        format!("refcount {} pending {}", pool.total_refcount(), pool.occupancy().pending),
    ));
    result.invariants = checks;
    Ok(result)
}

fn invariants(r: &BenchResult, config: &BenchConfig) -> Vec<InvariantCheck> {
    let mut out = Vec::new();
    let bad_tpt = r
        .events
        .iter()
        .filter(|e| e.is_included())
        .filter(|e| tpt(e).is_some_and(|t| t.times(e.fov_tiles) != e.tefov()))
        .count();
    out.push(check("tpt_identity", bad_tpt == 0, format!("{bad_tpt} events violate TPT x tiles = TeFOV")));

    let backwards = r.events.iter().filter(|e| e.completed_at < e.move_field_at).count();
    out.push(check("event_ordering", backwards == 0, format!("{backwards} events complete before they start")));

    let txn_bytes: u64 = r.txns.iter().map(|t| t.bytes).sum();
    if config.render {
        let frame_bytes: u64 = r.frames.iter().map(|f| f.bytes_completed).sum();
        out.push(check(
            "byte_conservation",
            frame_bytes == txn_bytes,
            format!("frames {frame_bytes} B, transactions {txn_bytes} B"),
        ));
        let chained = r
            .frames
            .windows(2)
            .all(|w| w[0].end == w[1].start && w[0].frame_index < w[1].frame_index);
        let positive = r.frames.iter().all(|f| f.end > f.start);
        out.push(check("frame_windows", chained && positive, "frame windows must tile the timeline"));
    }

    let hr_first = r
        .audits
        .iter()
        .filter(|a| !a.overlap && a.lr_unbuffered && a.first_publish == Some(LayerClass::HR))
        .count();
    out.push(check("lr_first", hr_first == 0, format!("{hr_first} new fields published high resolution first")));

    out.push(check(
        "no_contract_violations",
        r.counters.contract_violations == 0,
        format!("{} device contract violations", r.counters.contract_violations),
    ));

    if config.settle {
        // One event per layer class and new field, completed or pre-buffered.
        let fresh = r.events.iter().filter(|e| !e.overlap).count();
        let audits = r.audits.iter().filter(|a| !a.overlap).count();
        let ok = audits == r.new_fields && r.settle_failures == 0 && fresh >= r.new_fields && r.counters.abandoned_events == 0;
        out.push(check(
            "new_field_events",
            ok,
            format!(
                "{} new fields, {audits} audited, {fresh} events, {} abandoned, {} settle timeouts",
                r.new_fields, r.counters.abandoned_events, r.settle_failures
            ),
        ));
    }
    out
}

pub fn summarize_bench(result: &BenchResult, trace: &Trace, config: &BenchConfig) -> BenchSummary {
    BenchSummary {
        version: 1,
        trace_seed: trace.seed,
        trace_style: trace.style.to_string(),
        commands: trace.commands.len(),
        new_fields: result.new_fields,
        config: *config,
        wall_ms: result.wall.as_secs_f64() * 1e3,
        frames: result.frames.len(),
        skipped_ticks: result.frame_loop.skipped_ticks,
        frame_rate_fps: frame_rate(&result.frames).ok().map(|s| s.summary),
        buffer_rate_gbps: buffer_rate(&result.frames).ok().map(|s| s.summary),
        tefov: tefov(&result.events).unwrap_or_default(),
        counters: result.counters,
        invariants: result.invariants.clone(),
    }
}

/// Writes `frames.csv`, `events.csv` and `summary.json` into `dir`.
pub fn write_outputs(dir: &Path, result: &BenchResult, summary: &BenchSummary) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_csv(dir.join("frames.csv"), FRAME_CSV_HEADER, result.frames.iter().map(FrameRow::from))?;
    write_csv(dir.join("events.csv"), EVENT_CSV_HEADER, result.events.iter().map(EventRow::from))?;
    let mut json = serde_json::to_string_pretty(summary)?;
    json.push('\n');
    std::fs::write(dir.join("summary.json"), json)?;
    Ok(())
}
