//! Rapid tile buffering sequence.
//!
//! One scheduler thread repeatedly rebuilds a model of outstanding work from
//! shared state (the current view, the slot map and the cache), forwards
//! missing tiles to the loader, and drains what is immediately available
//! into small microtransactions that executor threads copy, enhance and
//! publish. Nothing is pushed to the scheduler: completions only raise a
//! payload-free signal and the next pass re-derives everything.
//!
//! Low-resolution tiles are always drained before high-resolution ones, and
//! high-resolution tiles are held back until every low-resolution tile of
//! the field is resident or is being buffered in the same transaction.

use std::collections::{BTreeSet, HashSet, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, Sender};
use parking_lot::{Condvar, Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::{default_loader_workers, LoadRequest, LoaderConfig, Priority, TileLoader, DEFAULT_CACHE_BUDGET};
use crate::clock::{Clock, Timestamp};
use crate::compositor::{render_frame, CompositorConfig, Framebuffer, RenderStats};
use crate::device::{SlotClaim, SlotPool};
use crate::metrics::{FovEvent, LayerClass, MetricsRecorder, TxnRecord};
use crate::pyramid::{buffer_region, fov_overlap, visible_tiles, LayerPair, Pyramid, TileAddress, Viewport, MAX_PERIMETER_RADIUS, TILE_BYTES, TILE_EDGE};
use crate::signal::ChangeSignal;
use crate::source::TileSource;
use crate::spd::{Enhancer, MipParams, SpdError};

pub const DEFAULT_RADIUS: u32 = 2;
pub const DEFAULT_TXN_TILES: usize = 16;

/// How long an idle scheduler sleeps between unprompted passes. Every state
/// change raises the wake signal, so this only bounds the damage of a bug.
const IDLE_PARK: Duration = Duration::from_secs(30);

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid viewport")]
    Viewport,
    #[error("perimeter radius {0} exceeds {MAX_PERIMETER_RADIUS}")]
    Radius(u32),
    #[error("microtransaction size must be positive")]
    TxnSize,
    #[error(transparent)]
    Spd(#[from] SpdError),
}

/// Executor threads by default: half the hardware threads, at least one.
pub fn default_executors() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get() / 2).max(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub radius: u32,
    /// Tiles per microtransaction.
    pub txn_tiles: usize,
    /// Slot pool size; `None` sizes it from the screen.
    pub pool_size: Option<usize>,
    pub mip: MipParams,
    pub loader_workers: usize,
    pub cache_budget: usize,
    pub executors: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            radius: DEFAULT_RADIUS,
            txn_tiles: DEFAULT_TXN_TILES,
            pool_size: None,
            mip: MipParams::default(),
            loader_workers: default_loader_workers(),
            cache_budget: DEFAULT_CACHE_BUDGET,
            executors: default_executors(),
        }
    }
}

/// High- plus low-resolution regions at 1:1 zoom, tripled, rounded up to a
/// power of two.
pub fn default_pool_size(pyramid: &Pyramid, width_scr: u32, height_scr: u32, radius: u32) -> usize {
    // A window straddling tile boundaries touches one extra row and column.
    let region = |d: f64| {
        let cols = (width_scr as f64 / d / TILE_EDGE as f64).ceil() as usize + 1 + 2 * radius as usize;
        let rows = (height_scr as f64 / d / TILE_EDGE as f64).ceil() as usize + 1 + 2 * radius as usize;
        cols * rows
    };
    let lr = pyramid.layers().get(1).map_or(0, |l| region(l.downsample));
    let need = (region(1.0) + lr).min(pyramid.total_tiles()).max(1) * 3;
    need.next_power_of_two()
}

/// Outstanding work for one view, rebuilt from scratch on every pass.
#[derive(Debug, Clone)]
pub struct BufferModel {
    pub epoch: u64,
    pub view: Viewport,
    pub layers: LayerPair,
    pub lr_visible: BTreeSet<TileAddress>,
    pub hr_visible: BTreeSet<TileAddress>,
    pub lr_region: BTreeSet<TileAddress>,
    pub hr_region: BTreeSet<TileAddress>,
    /// Cached but unmapped; drained from the front.
    pub lr_pending: VecDeque<TileAddress>,
    /// Cached but unmapped; a stack drained from the back.
    pub hr_pending: Vec<TileAddress>,
    pub lr_missing: Vec<TileAddress>,
    pub hr_missing: Vec<TileAddress>,
}

impl BufferModel {
    /// Both regions combined.
    pub fn region(&self) -> HashSet<TileAddress> {
        self.lr_region.iter().chain(&self.hr_region).copied().collect()
    }

    /// Nothing left to load or buffer.
    pub fn is_settled(&self) -> bool {
        self.lr_pending.is_empty() && self.hr_pending.is_empty() && self.lr_missing.is_empty() && self.hr_missing.is_empty()
    }

    pub fn class_of(&self, addr: TileAddress) -> Option<LayerClass> {
        if Some(addr.layer) == self.layers.lr {
            Some(LayerClass::LR)
        } else if Some(addr.layer) == self.layers.hr {
            Some(LayerClass::HR)
        } else {
            None
        }
    }
}

/// Region tiles ordered visible first, then outward from the view centre.
fn centre_out(view: &Viewport, downsample: f64, visible: &BTreeSet<TileAddress>, region: &BTreeSet<TileAddress>) -> Vec<TileAddress> {
    let (x0, y0, x1, y1) = view.slide_rect();
    let cx = (x0 + x1) / 2.0 / downsample / TILE_EDGE as f64;
    let cy = (y0 + y1) / 2.0 / downsample / TILE_EDGE as f64;
    let mut tiles: Vec<_> = region
        .iter()
        .map(|&a| {
            let dx = a.col as f64 + 0.5 - cx;
            let dy = a.row as f64 + 0.5 - cy;
            (!visible.contains(&a), dx * dx + dy * dy, a)
        })
        .collect();
    tiles.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)));
    tiles.into_iter().map(|t| t.2).collect()
}

/// Partitions the view's regions into mapped (skipped), cached-unmapped
/// (pending) and uncached (missing) tiles.
pub fn rebuild_model(view: &Viewport, epoch: u64, pyramid: &Pyramid, pool: &SlotPool, loader: &TileLoader, radius: u32) -> BufferModel {
    let layers = pyramid.select_layers(view.zoom).unwrap_or_default();
    let mut model = BufferModel {
        epoch,
        view: *view,
        layers,
        lr_visible: BTreeSet::new(),
        hr_visible: BTreeSet::new(),
        lr_region: BTreeSet::new(),
        hr_region: BTreeSet::new(),
        lr_pending: VecDeque::new(),
        hr_pending: Vec::new(),
        lr_missing: Vec::new(),
        hr_missing: Vec::new(),
    };
    for class in [LayerClass::LR, LayerClass::HR] {
        let index = match class {
            LayerClass::LR => layers.lr,
            LayerClass::HR => layers.hr,
        };
        let Some(layer) = index.and_then(|i| pyramid.layer(i)) else { continue };
        let visible = visible_tiles(view, layer);
        let region = buffer_region(&visible, radius, layer);
        let mut pending = Vec::new();
        let mut missing = Vec::new();
        for addr in centre_out(view, layer.downsample, &visible, &region) {
            if pool.is_mapped(addr) || loader.is_failed(addr) {
                continue;
            }
            if loader.contains(addr) {
                pending.push(addr);
            } else {
                missing.push(addr);
            }
        }
        match class {
            LayerClass::LR => {
                model.lr_visible = visible;
                model.lr_region = region;
                model.lr_pending = pending.into();
                model.lr_missing = missing;
            }
            LayerClass::HR => {
                model.hr_visible = visible;
                model.hr_region = region;
                // Pushed farthest first so the stack yields the centre first.
                pending.reverse();
                model.hr_pending = pending;
                model.hr_missing = missing;
            }
        }
    }
    model
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TxnTile {
    pub addr: TileAddress,
    pub class: LayerClass,
    pub claim: SlotClaim,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MicroTransaction {
    /// View epoch of the model the tiles were drained from.
    pub epoch: u64,
    pub tiles: Vec<TxnTile>,
    pub submitted_at: Timestamp,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DrainOutcome {
    /// Pending tiles whose cache entry vanished since the model was built.
    pub uncached: usize,
    pub pool_exhausted: bool,
}

fn lr_gate_open(model: &BufferModel, pool: &SlotPool, loader: &TileLoader, claimed: &[TxnTile]) -> bool {
    model.lr_visible.iter().all(|&a| {
        pool.is_active(a) || loader.is_failed(a) || claimed.iter().any(|t| t.addr == a)
    })
}

/// Claims a slot for one pending tile. False when the pool is exhausted.
fn take(pool: &SlotPool, loader: &TileLoader, addr: TileAddress, class: LayerClass, tiles: &mut Vec<TxnTile>, outcome: &mut DrainOutcome) -> bool {
    if !loader.contains(addr) {
        outcome.uncached += 1;
        return true;
    }
    match pool.claim_free_slot(addr) {
        Ok(Some(claim)) => {
            tiles.push(TxnTile { addr, class, claim });
            true
        }
        Ok(None) => {
            outcome.pool_exhausted = true;
            false
        }
        // Already in flight or out of range: nothing to do.
        Err(_) => true,
    }
}

/// Claims up to `max_tiles` cached, unmapped tiles: low resolution first in
/// model order, then high resolution most recently modeled first. Never
/// waits for loads; returns `None` when nothing can be claimed right now.
pub fn drain_microtransaction(
    model: &mut BufferModel,
    pool: &SlotPool,
    loader: &TileLoader,
    max_tiles: usize,
    clock: &Clock,
    outcome: &mut DrainOutcome,
) -> Option<MicroTransaction> {
    let mut tiles = Vec::new();
    while tiles.len() < max_tiles {
        let Some(addr) = model.lr_pending.pop_front() else { break };
        if !take(pool, loader, addr, LayerClass::LR, &mut tiles, outcome) {
            model.lr_pending.push_front(addr);
            break;
        }
    }
    if !outcome.pool_exhausted && lr_gate_open(model, pool, loader, &tiles) {
        while tiles.len() < max_tiles {
            let Some(addr) = model.hr_pending.pop() else { break };
            if !take(pool, loader, addr, LayerClass::HR, &mut tiles, outcome) {
                model.hr_pending.push(addr);
                break;
            }
        }
    }
    (!tiles.is_empty()).then(|| MicroTransaction {
        epoch: model.epoch,
        tiles,
        submitted_at: clock.now(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublishRecord {
    pub addr: TileAddress,
    pub class: LayerClass,
    pub at: Timestamp,
    pub txn_epoch: u64,
    /// Epoch of the region the tile was checked against when published.
    pub region_epoch: u64,
}

/// Which layer published first after a view change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewAudit {
    pub epoch: u64,
    pub overlap: bool,
    /// Some low-resolution tile of the field was not resident at the change.
    pub lr_unbuffered: bool,
    pub first_publish: Option<LayerClass>,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineCounters {
    pub passes: u64,
    pub txns: u64,
    pub tiles_published: u64,
    /// Claimed tiles whose cache entry was gone at copy time.
    pub aborted_evicted: u64,
    /// Claimed tiles that left the region before they could be published.
    pub dropped_stale: u64,
    pub contract_violations: u64,
    /// View changes superseded before the scheduler saw them.
    pub coalesced_views: u64,
    /// Field events superseded by a view change before completing.
    pub abandoned_events: u64,
    pub purged: u64,
    pub deferred_purges: u64,
}

#[derive(Default)]
struct Counters {
    passes: AtomicU64,
    txns: AtomicU64,
    tiles_published: AtomicU64,
    aborted_evicted: AtomicU64,
    dropped_stale: AtomicU64,
    contract_violations: AtomicU64,
    coalesced_views: AtomicU64,
    abandoned_events: AtomicU64,
    purged: AtomicU64,
    deferred_purges: AtomicU64,
}

impl Counters {
    fn snapshot(&self) -> EngineCounters {
        let l = |a: &AtomicU64| a.load(Ordering::Relaxed);
        EngineCounters {
            passes: l(&self.passes),
            txns: l(&self.txns),
            tiles_published: l(&self.tiles_published),
            aborted_evicted: l(&self.aborted_evicted),
            dropped_stale: l(&self.dropped_stale),
            contract_violations: l(&self.contract_violations),
            coalesced_views: l(&self.coalesced_views),
            abandoned_events: l(&self.abandoned_events),
            purged: l(&self.purged),
            deferred_purges: l(&self.deferred_purges),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ViewCommand {
    viewport: Viewport,
    prev: Option<Viewport>,
    epoch: u64,
    at: Timestamp,
}

#[derive(Default)]
struct ViewCell {
    current: Option<ViewCommand>,
    /// Highest epoch a scheduler pass has modeled.
    seen: u64,
}

struct RegionSnapshot {
    epoch: u64,
    tiles: HashSet<TileAddress>,
}

struct OpenEvent {
    class: LayerClass,
    move_field_at: Timestamp,
    fov_tiles: u32,
    visible_tiles: u32,
    overlap: bool,
    remaining: HashSet<TileAddress>,
}

struct OpenAudit {
    audit: ViewAudit,
    region: HashSet<TileAddress>,
}

#[derive(Default)]
struct Tracker {
    open: Vec<OpenEvent>,
    audit: Option<OpenAudit>,
    audits: Vec<ViewAudit>,
}

impl Tracker {
    fn finish(metrics: &MetricsRecorder, e: &OpenEvent, at: Timestamp) {
        metrics.record_event(FovEvent {
            layer_class: e.class,
            move_field_at: e.move_field_at,
            completed_at: at,
            fov_tiles: e.fov_tiles,
            visible_tiles: e.visible_tiles,
            overlap: e.overlap,
            pre_buffered: false,
        });
    }

    fn on_publish(&mut self, metrics: &MetricsRecorder, addr: TileAddress, class: LayerClass, at: Timestamp, txn_epoch: u64) {
        self.open.retain_mut(|e| {
            if e.remaining.remove(&addr) && e.remaining.is_empty() {
                Self::finish(metrics, e, at);
                return false;
            }
            true
        });
        if let Some(a) = &mut self.audit {
            if a.audit.first_publish.is_none() && txn_epoch >= a.audit.epoch && a.region.contains(&addr) {
                a.audit.first_publish = Some(class);
            }
        }
    }
}

struct Shared {
    pyramid: Pyramid,
    pool: SlotPool,
    loader: TileLoader,
    enhancer: Enhancer,
    signal: Arc<ChangeSignal>,
    clock: Clock,
    config: EngineConfig,
    metrics: Arc<MetricsRecorder>,
    view: Mutex<ViewCell>,
    region: RwLock<Arc<RegionSnapshot>>,
    tracker: Mutex<Tracker>,
    publish_log: Mutex<Vec<PublishRecord>>,
    counters: Counters,
    inflight: AtomicUsize,
    stop: AtomicBool,
    quiescent: Mutex<Option<(u64, Timestamp)>>,
    quiescent_cv: Condvar,
}

/// The buffering engine: slot pool, cache and loaders, scheduler and
/// executors for one open slide.
pub struct Engine {
    shared: Arc<Shared>,
    screen: (u32, u32),
    threads: Mutex<Vec<JoinHandle<()>>>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("config", &self.shared.config)
            .field("pool", &self.shared.pool)
            .finish()
    }
}

impl Engine {
    /// Starts the engine. `screen` (width, height) sizes the default pool.
    pub fn start(source: Arc<dyn TileSource>, config: EngineConfig, screen: (u32, u32)) -> Result<Self, EngineError> {
        Self::start_with(source, config, screen, Clock::new(), Arc::new(MetricsRecorder::new()))
    }

    pub fn start_with(
        source: Arc<dyn TileSource>,
        config: EngineConfig,
        screen: (u32, u32),
        clock: Clock,
        metrics: Arc<MetricsRecorder>,
    ) -> Result<Self, EngineError> {
        if config.radius > MAX_PERIMETER_RADIUS {
            return Err(EngineError::Radius(config.radius));
        }
        if config.txn_tiles == 0 {
            return Err(EngineError::TxnSize);
        }
        let enhancer = Enhancer::new(config.mip)?;
        let pyramid = source.pyramid().clone();
        let pool_size = config
            .pool_size
            .unwrap_or_else(|| default_pool_size(&pyramid, screen.0, screen.1, config.radius));
        let pool = SlotPool::new(&pyramid, pool_size, config.mip.levels);
        let signal = Arc::new(ChangeSignal::new());
        let loader = TileLoader::start(
            source,
            LoaderConfig {
                workers: config.loader_workers,
                budget_bytes: config.cache_budget,
            },
            clock,
            signal.clone(),
        );
        let shared = Arc::new(Shared {
            pyramid,
            pool,
            loader,
            enhancer,
            signal,
            clock,
            config,
            metrics,
            view: Mutex::new(ViewCell::default()),
            region: RwLock::new(Arc::new(RegionSnapshot {
                epoch: 0,
                tiles: HashSet::new(),
            })),
            tracker: Mutex::new(Tracker::default()),
            publish_log: Mutex::new(Vec::new()),
            counters: Counters::default(),
            inflight: AtomicUsize::new(0),
            stop: AtomicBool::new(false),
            quiescent: Mutex::new(None),
            quiescent_cv: Condvar::new(),
        });
        let (tx, rx) = crossbeam_channel::unbounded::<MicroTransaction>();
        let mut threads = Vec::new();
        for i in 0..config.executors.max(1) {
            let shared = shared.clone();
            let rx: Receiver<MicroTransaction> = rx.clone();
            threads.push(
                std::thread::Builder::new()
                    .name(format!("tile-exec-{i}"))
                    .spawn(move || {
                        while let Ok(txn) = rx.recv() {
                            execute(&shared, txn);
                        }
                    })
                    .expect("spawn executor thread"),
            );
        }
        let sched = shared.clone();
        threads.insert(
            0,
            std::thread::Builder::new()
                .name("tile-scheduler".into())
                .spawn(move || scheduler_loop(&sched, tx))
                .expect("spawn scheduler thread"),
        );
        Ok(Self {
            shared,
            screen,
            threads: Mutex::new(threads),
        })
    }

    /// Screen size the engine was started for.
    pub fn screen(&self) -> (u32, u32) {
        self.screen
    }

    pub fn pyramid(&self) -> &Pyramid {
        &self.shared.pyramid
    }

    pub fn pool(&self) -> &SlotPool {
        &self.shared.pool
    }

    pub fn loader(&self) -> &TileLoader {
        &self.shared.loader
    }

    pub fn clock(&self) -> &Clock {
        &self.shared.clock
    }

    pub fn config(&self) -> &EngineConfig {
        &self.shared.config
    }

    pub fn metrics(&self) -> &Arc<MetricsRecorder> {
        &self.shared.metrics
    }

    pub fn counters(&self) -> EngineCounters {
        self.shared.counters.snapshot()
    }

    /// Moves the field of view. Returns the new view epoch.
    pub fn set_view(&self, viewport: Viewport) -> Result<u64, EngineError> {
        if !viewport.is_valid() {
            return Err(EngineError::Viewport);
        }
        let at = self.shared.clock.now();
        let mut cell = self.shared.view.lock();
        let prev = cell.current.map(|c| c.viewport);
        let epoch = cell.current.map_or(1, |c| c.epoch + 1);
        if cell.current.is_some_and(|c| c.epoch > cell.seen) {
            self.shared.counters.coalesced_views.fetch_add(1, Ordering::Relaxed);
        }
        cell.current = Some(ViewCommand {
            viewport,
            prev,
            epoch,
            at,
        });
        drop(cell);
        self.shared.signal.raise();
        Ok(epoch)
    }

    pub fn view(&self) -> Option<Viewport> {
        self.shared.view.lock().current.map(|c| c.viewport)
    }

    pub fn view_epoch(&self) -> u64 {
        self.shared.view.lock().current.map_or(0, |c| c.epoch)
    }

    /// Waits until the current view has nothing left to load or buffer.
    /// Returns the time the scheduler observed quiescence.
    pub fn wait_quiescent(&self, timeout: Duration) -> Option<Timestamp> {
        let deadline = Instant::now() + timeout;
        let mut q = self.shared.quiescent.lock();
        loop {
            let epoch = self.view_epoch();
            if let Some((e, at)) = *q {
                if e == epoch && epoch > 0 {
                    return Some(at);
                }
            }
            if self.shared.quiescent_cv.wait_until(&mut q, deadline).timed_out() {
                return match *q {
                    Some((e, at)) if e == self.view_epoch() && e > 0 => Some(at),
                    _ => None,
                };
            }
        }
    }

    pub fn is_quiescent(&self) -> bool {
        let epoch = self.view_epoch();
        matches!(*self.shared.quiescent.lock(), Some((e, _)) if e == epoch && epoch > 0)
    }

    pub fn publish_log(&self) -> Vec<PublishRecord> {
        self.shared.publish_log.lock().clone()
    }

    pub fn view_audits(&self) -> Vec<ViewAudit> {
        let t = self.shared.tracker.lock();
        t.audits.iter().copied().chain(t.audit.as_ref().map(|a| a.audit)).collect()
    }

    /// Renders the current view (or `view`, if given).
    pub fn render(&self, view: Option<&Viewport>, config: &CompositorConfig, frame_index: u64) -> Option<(Framebuffer, RenderStats)> {
        let vp = view.copied().or_else(|| self.view())?;
        Some(render_frame(&vp, &self.shared.pool, &self.shared.pyramid, config, frame_index, &self.shared.clock))
    }

    /// Stops all engine threads after in-flight transactions finish. The
    /// pool, cache contents and records stay readable. Idempotent.
    pub fn shutdown(&self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        self.shared.signal.raise();
        let threads = std::mem::take(&mut *self.threads.lock());
        for t in threads {
            let _ = t.join();
        }
        self.shared.loader.shutdown();
    }
}

impl Drop for Engine {
    fn drop(&mut self) {
        self.shutdown();
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExecOutcome {
    pub published: Vec<TileAddress>,
    /// Cache entry gone at copy time; the slot was returned to the pool.
    pub evicted: Vec<TileAddress>,
    /// Left the region before publishing; the slot was returned to the pool.
    pub stale: Vec<TileAddress>,
    pub violations: u32,
}

/// What a commit callback did with a fully written tile.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Commit {
    Published,
    /// Outside the current region; the caller did not publish it.
    Stale,
    Failed,
}

/// Copies, enhances and commits every tile of a transaction. `commit` is
/// called once per written tile and decides whether to publish it.
pub fn execute_transaction(
    txn: &MicroTransaction,
    pool: &SlotPool,
    loader: &TileLoader,
    enhancer: &Enhancer,
    mut commit: impl FnMut(&TxnTile) -> Commit,
) -> ExecOutcome {
    let mut out = ExecOutcome::default();
    for t in &txn.tiles {
        let Some(entry) = loader.fetch(t.addr) else {
            if pool.abort(t.claim, t.addr).is_err() {
                out.violations += 1;
            }
            out.evicted.push(t.addr);
            continue;
        };
        let mips = enhancer.generate_mips(&entry.pixels);
        let written = pool
            .write_base(t.claim, &entry.pixels)
            .and_then(|_| pool.write_mips(t.claim, &mips));
        if written.is_err() {
            out.violations += 1;
            let _ = pool.abort(t.claim, t.addr);
            continue;
        }
        match commit(t) {
            Commit::Published => out.published.push(t.addr),
            Commit::Stale => {
                if pool.abort(t.claim, t.addr).is_err() {
                    out.violations += 1;
                }
                out.stale.push(t.addr);
            }
            Commit::Failed => out.violations += 1,
        }
    }
    out
}

fn execute(shared: &Shared, txn: MicroTransaction) {
    let out = execute_transaction(&txn, &shared.pool, &shared.loader, &shared.enhancer, |t| {
        // The region cannot change between this check and the publish.
        let region = shared.region.read();
        if !region.tiles.contains(&t.addr) {
            return Commit::Stale;
        }
        if shared.pool.publish(t.claim.slot_index, t.addr).is_err() {
            return Commit::Failed;
        }
        let at = shared.clock.now();
        shared.publish_log.lock().push(PublishRecord {
            addr: t.addr,
            class: t.class,
            at,
            txn_epoch: txn.epoch,
            region_epoch: region.epoch,
        });
        shared.tracker.lock().on_publish(&shared.metrics, t.addr, t.class, at, txn.epoch);
        Commit::Published
    });
    let published = out.published.len() as u64;
    shared.metrics.record_txn(TxnRecord {
        tiles: txn.tiles.len() as u32,
        bytes: published * TILE_BYTES as u64,
        submitted_at: txn.submitted_at,
        completed_at: shared.clock.now(),
    });
    let c = &shared.counters;
    c.txns.fetch_add(1, Ordering::Relaxed);
    c.tiles_published.fetch_add(published, Ordering::Relaxed);
    c.aborted_evicted.fetch_add(out.evicted.len() as u64, Ordering::Relaxed);
    c.dropped_stale.fetch_add(out.stale.len() as u64, Ordering::Relaxed);
    c.contract_violations.fetch_add(out.violations as u64, Ordering::Relaxed);
    shared.inflight.fetch_sub(1, Ordering::SeqCst);
    shared.signal.raise();
}

/// Opens the field events and the priority audit for a new view.
fn open_view(shared: &Shared, cmd: &ViewCommand, model: &BufferModel) {
    let mut tracker = shared.tracker.lock();
    let abandoned = tracker.open.len() as u64;
    shared.counters.abandoned_events.fetch_add(abandoned, Ordering::Relaxed);
    tracker.open.clear();
    if let Some(a) = tracker.audit.take() {
        tracker.audits.push(a.audit);
    }
    let overlap = cmd.prev.is_some_and(|p| fov_overlap(&p, &cmd.viewport));
    let mut lr_unbuffered = false;
    for (class, visible, region) in [
        (LayerClass::LR, &model.lr_visible, &model.lr_region),
        (LayerClass::HR, &model.hr_visible, &model.hr_region),
    ] {
        if visible.is_empty() {
            continue;
        }
        let remaining: HashSet<_> = visible
            .iter()
            .copied()
            .filter(|&a| !shared.pool.is_active(a) && !shared.loader.is_failed(a))
            .collect();
        if class == LayerClass::LR {
            lr_unbuffered = !remaining.is_empty();
        }
        let event = OpenEvent {
            class,
            move_field_at: cmd.at,
            fov_tiles: region.len() as u32,
            visible_tiles: visible.len() as u32,
            overlap,
            remaining,
        };
        if event.remaining.is_empty() {
            shared.metrics.record_event(FovEvent {
                layer_class: class,
                move_field_at: cmd.at,
                completed_at: cmd.at,
                fov_tiles: event.fov_tiles,
                visible_tiles: event.visible_tiles,
                overlap,
                pre_buffered: true,
            });
        } else {
            tracker.open.push(event);
        }
    }
    tracker.audit = Some(OpenAudit {
        audit: ViewAudit {
            epoch: cmd.epoch,
            overlap,
            lr_unbuffered,
            first_publish: None,
        },
        region: model.region(),
    });
}

/// Closes events whose remaining tiles all failed to load.
fn sweep_failed(shared: &Shared) {
    let mut tracker = shared.tracker.lock();
    let now = shared.clock.now();
    let metrics = &shared.metrics;
    tracker.open.retain_mut(|e| {
        e.remaining.retain(|&a| !shared.loader.is_failed(a));
        if e.remaining.is_empty() {
            Tracker::finish(metrics, e, now);
            false
        } else {
            true
        }
    });
}

fn scheduler_loop(shared: &Shared, tx: Sender<MicroTransaction>) {
    let max_inflight = shared.config.executors.max(1) * 2;
    let mut opened = 0u64;
    while !shared.stop.load(Ordering::SeqCst) {
        shared.counters.passes.fetch_add(1, Ordering::Relaxed);
        let cmd = {
            let mut cell = shared.view.lock();
            let cmd = cell.current;
            if let Some(c) = cmd {
                cell.seen = c.epoch;
            }
            cmd
        };
        let Some(cmd) = cmd else {
            shared.signal.wait(IDLE_PARK);
            continue;
        };
        let mut model = rebuild_model(&cmd.viewport, cmd.epoch, &shared.pyramid, &shared.pool, &shared.loader, shared.config.radius);
        let region = model.region();
        if shared.region.read().tiles != region || shared.region.read().epoch != cmd.epoch {
            *shared.region.write() = Arc::new(RegionSnapshot {
                epoch: cmd.epoch,
                tiles: region.clone(),
            });
        }
        if cmd.epoch != opened {
            open_view(shared, &cmd, &model);
            opened = cmd.epoch;
        }
        sweep_failed(shared);
        shared.loader.retain_region(&region);
        let now = shared.clock.now();
        let requests = model
            .lr_missing
            .iter()
            .map(|&addr| (addr, Priority::High))
            .chain(model.hr_missing.iter().map(|&addr| (addr, Priority::Low)))
            .map(|(addr, priority)| LoadRequest {
                addr,
                priority,
                requested_at: now,
            });
        shared.loader.request_tiles(requests);

        let settled = model.is_settled();
        let mut drain = DrainOutcome::default();
        let mut view_changed = false;
        while shared.inflight.load(Ordering::SeqCst) < max_inflight {
            if shared.view.lock().current.map(|c| c.epoch) != Some(cmd.epoch) {
                view_changed = true;
                break;
            }
            match drain_microtransaction(&mut model, &shared.pool, &shared.loader, shared.config.txn_tiles, &shared.clock, &mut drain) {
                Some(txn) => {
                    shared.inflight.fetch_add(1, Ordering::SeqCst);
                    if tx.send(txn).is_err() {
                        shared.inflight.fetch_sub(1, Ordering::SeqCst);
                        break;
                    }
                }
                None => break,
            }
        }

        let stale: Vec<_> = shared
            .pool
            .mapped_addresses()
            .into_iter()
            .filter(|a| !region.contains(a))
            .collect();
        let purge = shared.pool.purge(&stale);
        shared.counters.purged.fetch_add(purge.freed as u64, Ordering::Relaxed);
        shared.counters.deferred_purges.fetch_add(purge.deferred as u64, Ordering::Relaxed);

        if settled && shared.inflight.load(Ordering::SeqCst) == 0 && !view_changed {
            let mut q = shared.quiescent.lock();
            if q.map(|(e, _)| e) != Some(cmd.epoch) {
                *q = Some((cmd.epoch, shared.clock.now()));
                shared.quiescent_cv.notify_all();
            }
        }

        let retry = view_changed || drain.uncached > 0 || (purge.freed > 0 && drain.pool_exhausted);
        if !retry {
            shared.signal.wait(IDLE_PARK);
        }
    }
    // Let in-flight transactions land before the executors are released.
    while shared.inflight.load(Ordering::SeqCst) > 0 {
        shared.signal.wait(Duration::from_millis(5));
    }
    drop(tx);
}
