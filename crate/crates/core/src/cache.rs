//! Short-term RAM cache of decoded tiles and the loader workers feeding it.
//!
//! Requests are deduplicated against queued, in-flight and cached tiles and
//! served high-priority first. A queued request whose tile has left the
//! retained region by the time a worker picks it up is dropped without
//! decoding. Published entries are immutable `Arc`s, so a reader sees either
//! no entry or a complete one.

use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use parking_lot::{Condvar, Mutex, RwLock};
use serde::Serialize;

use crate::clock::{Clock, Timestamp};
use crate::pyramid::{TileAddress, TILE_BYTES};
use crate::signal::ChangeSignal;
use crate::source::TileSource;

pub const DEFAULT_CACHE_BUDGET: usize = 512 * 1024 * 1024;

/// Default loader worker count: hardware threads minus two, at least two.
pub fn default_loader_workers() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get().saturating_sub(2))
        .unwrap_or(0)
        .max(2)
}

#[derive(Debug)]
pub struct CacheEntry {
    pub addr: TileAddress,
    pub pixels: Box<[u8]>,
    pub loaded_at: Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Priority {
    /// Low-resolution layer tiles.
    High,
    /// High-resolution layer tiles.
    Low,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadRequest {
    pub addr: TileAddress,
    pub priority: Priority,
    pub requested_at: Timestamp,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LoaderCounters {
    pub loads: u64,
    pub cancels: u64,
    pub evictions: u64,
    pub dropped_invalid: u64,
    pub failures: u64,
}

#[derive(Debug, Default)]
struct Counters {
    loads: AtomicU64,
    cancels: AtomicU64,
    evictions: AtomicU64,
    dropped_invalid: AtomicU64,
    failures: AtomicU64,
}

struct CacheState {
    entries: HashMap<TileAddress, (Arc<CacheEntry>, u64)>,
    bytes: usize,
    budget: usize,
    epoch: u64,
}

impl CacheState {
    /// Evicts least-recently-retained entries until within budget.
    fn trim(&mut self, counters: &Counters) {
        while self.bytes > self.budget {
            let Some((&victim, _)) = self.entries.iter().min_by_key(|(a, (_, stamp))| (*stamp, **a)) else {
                break;
            };
            if let Some((e, _)) = self.entries.remove(&victim) {
                self.bytes -= e.pixels.len();
                counters.evictions.fetch_add(1, Ordering::Relaxed);
            }
        }
    }
}

#[derive(Default)]
struct QueueState {
    high: VecDeque<LoadRequest>,
    low: VecDeque<LoadRequest>,
    queued: HashSet<TileAddress>,
    inflight: HashSet<TileAddress>,
    failed: HashSet<TileAddress>,
}

struct Shared {
    source: Arc<dyn TileSource>,
    clock: Clock,
    signal: Arc<ChangeSignal>,
    cache: Mutex<CacheState>,
    queue: Mutex<QueueState>,
    queue_cv: Condvar,
    region: RwLock<Option<Arc<HashSet<TileAddress>>>>,
    counters: Counters,
    shutdown: AtomicBool,
}

#[derive(Debug, Clone, Copy)]
pub struct LoaderConfig {
    pub workers: usize,
    pub budget_bytes: usize,
}

impl Default for LoaderConfig {
    fn default() -> Self {
        Self {
            workers: default_loader_workers(),
            budget_bytes: DEFAULT_CACHE_BUDGET,
        }
    }
}

/// The tile cache together with its loader worker pool.
pub struct TileLoader {
    shared: Arc<Shared>,
    workers: Mutex<Vec<JoinHandle<()>>>,
}

impl TileLoader {
    pub fn start(source: Arc<dyn TileSource>, config: LoaderConfig, clock: Clock, signal: Arc<ChangeSignal>) -> Self {
        let shared = Arc::new(Shared {
            source,
            clock,
            signal,
            cache: Mutex::new(CacheState {
                entries: HashMap::new(),
                bytes: 0,
                budget: config.budget_bytes,
                epoch: 0,
            }),
            queue: Mutex::new(QueueState::default()),
            queue_cv: Condvar::new(),
            region: RwLock::new(None),
            counters: Counters::default(),
            shutdown: AtomicBool::new(false),
        });
        let workers = (0..config.workers.max(1))
            .map(|i| {
                let shared = shared.clone();
                std::thread::Builder::new()
                    .name(format!("tile-loader-{i}"))
                    .spawn(move || worker(&shared))
                    .expect("spawn loader thread")
            })
            .collect();
        Self {
            shared,
            workers: Mutex::new(workers),
        }
    }

    /// Enqueues loads; never blocks on I/O. Cached, queued and in-flight
    /// addresses are skipped, invalid ones counted and dropped.
    pub fn request_tiles(&self, requests: impl IntoIterator<Item = LoadRequest>) {
        let pyramid = self.shared.source.pyramid();
        let mut fresh = Vec::new();
        {
            let cache = self.shared.cache.lock();
            for r in requests {
                if !pyramid.contains(r.addr) {
                    self.shared.counters.dropped_invalid.fetch_add(1, Ordering::Relaxed);
                } else if !cache.entries.contains_key(&r.addr) {
                    fresh.push(r);
                }
            }
        }
        if fresh.is_empty() {
            return;
        }
        let mut q = self.shared.queue.lock();
        let mut added = false;
        for r in fresh {
            if q.queued.contains(&r.addr) || q.inflight.contains(&r.addr) || q.failed.contains(&r.addr) {
                continue;
            }
            q.queued.insert(r.addr);
            match r.priority {
                Priority::High => q.high.push_back(r),
                Priority::Low => q.low.push_back(r),
            }
            added = true;
        }
        drop(q);
        if added {
            self.shared.queue_cv.notify_all();
        }
    }

    /// The cached entry for `addr`, if any. Never waits for a load.
    pub fn fetch(&self, addr: TileAddress) -> Option<Arc<CacheEntry>> {
        self.shared.cache.lock().entries.get(&addr).map(|(e, _)| e.clone())
    }

    pub fn contains(&self, addr: TileAddress) -> bool {
        self.shared.cache.lock().entries.contains_key(&addr)
    }

    /// Marks `region` as the tiles worth keeping. Everything else becomes an
    /// eviction candidate and stale queued loads are dropped at decode start.
    pub fn retain_region(&self, region: &HashSet<TileAddress>) {
        let changed = self.shared.region.read().as_deref() != Some(region);
        if changed {
            *self.shared.region.write() = Some(Arc::new(region.clone()));
        }
        let mut cache = self.shared.cache.lock();
        if changed {
            cache.epoch += 1;
        }
        let epoch = cache.epoch;
        for addr in region {
            if let Some((_, stamp)) = cache.entries.get_mut(addr) {
                *stamp = epoch;
            }
        }
        cache.trim(&self.shared.counters);
    }

    /// Drops one cached entry. Fault-injection hook.
    pub fn evict(&self, addr: TileAddress) -> bool {
        let mut cache = self.shared.cache.lock();
        match cache.entries.remove(&addr) {
            Some((e, _)) => {
                cache.bytes -= e.pixels.len();
                self.shared.counters.evictions.fetch_add(1, Ordering::Relaxed);
                true
            }
            None => false,
        }
    }

    pub fn is_failed(&self, addr: TileAddress) -> bool {
        self.shared.queue.lock().failed.contains(&addr)
    }

    pub fn is_loading(&self, addr: TileAddress) -> bool {
        let q = self.shared.queue.lock();
        q.queued.contains(&addr) || q.inflight.contains(&addr)
    }

    pub fn cached_bytes(&self) -> usize {
        self.shared.cache.lock().bytes
    }

    pub fn budget_bytes(&self) -> usize {
        self.shared.cache.lock().budget
    }

    pub fn cached_len(&self) -> usize {
        self.shared.cache.lock().entries.len()
    }

    /// Queued plus in-flight loads.
    pub fn outstanding(&self) -> usize {
        let q = self.shared.queue.lock();
        q.queued.len() + q.inflight.len()
    }

    pub fn counters(&self) -> LoaderCounters {
        let c = &self.shared.counters;
        LoaderCounters {
            loads: c.loads.load(Ordering::Relaxed),
            cancels: c.cancels.load(Ordering::Relaxed),
            evictions: c.evictions.load(Ordering::Relaxed),
            dropped_invalid: c.dropped_invalid.load(Ordering::Relaxed),
            failures: c.failures.load(Ordering::Relaxed),
        }
    }

    /// Stops the workers after their current decode. Idempotent.
    pub fn shutdown(&self) {
        self.shared.shutdown.store(true, Ordering::SeqCst);
        {
            let _q = self.shared.queue.lock();
            self.shared.queue_cv.notify_all();
        }
        let workers = std::mem::take(&mut *self.workers.lock());
        for h in workers {
            let _ = h.join();
        }
    }
}

impl Drop for TileLoader {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn worker(shared: &Shared) {
    loop {
        let req = {
            let mut q = shared.queue.lock();
            loop {
                if shared.shutdown.load(Ordering::SeqCst) {
                    return;
                }
                if let Some(r) = q.high.pop_front().or_else(|| q.low.pop_front()) {
                    q.queued.remove(&r.addr);
                    let stale = shared
                        .region
                        .read()
                        .as_ref()
                        .is_some_and(|region| !region.contains(&r.addr));
                    if stale {
                        shared.counters.cancels.fetch_add(1, Ordering::Relaxed);
                        continue;
                    }
                    if shared.cache.lock().entries.contains_key(&r.addr) {
                        continue;
                    }
                    q.inflight.insert(r.addr);
                    break r;
                }
                shared.queue_cv.wait(&mut q);
            }
        };

        let result = shared.source.load(req.addr);
        shared.counters.loads.fetch_add(1, Ordering::Relaxed);
        let ok = match result {
            Ok(pixels) if pixels.len() == TILE_BYTES => {
                let entry = Arc::new(CacheEntry {
                    addr: req.addr,
                    pixels: pixels.into_boxed_slice(),
                    loaded_at: shared.clock.now(),
                });
                let in_region = shared
                    .region
                    .read()
                    .as_ref()
                    .map_or(true, |region| region.contains(&req.addr));
                let mut cache = shared.cache.lock();
                let stamp = if in_region { cache.epoch } else { 0 };
                cache.bytes += entry.pixels.len();
                if let Some((old, _)) = cache.entries.insert(req.addr, (entry, stamp)) {
                    cache.bytes -= old.pixels.len();
                }
                cache.trim(&shared.counters);
                true
            }
            Ok(_) | Err(_) => {
                shared.counters.failures.fetch_add(1, Ordering::Relaxed);
                false
            }
        };
        {
            let mut q = shared.queue.lock();
            q.inflight.remove(&req.addr);
            if !ok {
                q.failed.insert(req.addr);
            }
        }
        shared.signal.raise();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::container::ContainerError;
    use crate::pyramid::Pyramid;
    use std::time::{Duration, Instant};

    /// Source that records decode order and can be held shut.
    struct Probe {
        pyramid: Pyramid,
        started: Mutex<Vec<TileAddress>>,
        gate: Mutex<bool>,
        gate_cv: Condvar,
        concurrent: AtomicU64,
        max_concurrent: AtomicU64,
    }

    impl Probe {
        fn new(open: bool) -> Arc<Self> {
            Arc::new(Self {
                pyramid: Pyramid::from_downsamples(4096, 4096, &[1.0, 4.0]).unwrap(),
                started: Mutex::new(Vec::new()),
                gate: Mutex::new(open),
                gate_cv: Condvar::new(),
                concurrent: AtomicU64::new(0),
                max_concurrent: AtomicU64::new(0),
            })
        }

        fn open(&self) {
            *self.gate.lock() = true;
            self.gate_cv.notify_all();
        }

        fn decodes_of(&self, addr: TileAddress) -> usize {
            self.started.lock().iter().filter(|a| **a == addr).count()
        }
    }

    impl TileSource for Probe {
        fn pyramid(&self) -> &Pyramid {
            &self.pyramid
        }

        fn load(&self, addr: TileAddress) -> Result<Vec<u8>, ContainerError> {
            self.started.lock().push(addr);
            let now = self.concurrent.fetch_add(1, Ordering::SeqCst) + 1;
            self.max_concurrent.fetch_max(now, Ordering::SeqCst);
            {
                let mut g = self.gate.lock();
                while !*g {
                    self.gate_cv.wait(&mut g);
                }
            }
            self.concurrent.fetch_sub(1, Ordering::SeqCst);
            Ok(vec![(addr.col + addr.row * 7) as u8; TILE_BYTES])
        }
    }

    fn req(addr: TileAddress, priority: Priority) -> LoadRequest {
        LoadRequest {
            addr,
            priority,
            requested_at: Timestamp(0),
        }
    }

    fn loader(probe: &Arc<Probe>, workers: usize, budget_tiles: usize) -> (TileLoader, Arc<ChangeSignal>) {
        let signal = Arc::new(ChangeSignal::new());
        let l = TileLoader::start(
            probe.clone(),
            LoaderConfig {
                workers,
                budget_bytes: budget_tiles * TILE_BYTES,
            },
            Clock::new(),
            signal.clone(),
        );
        (l, signal)
    }

    fn wait_until(mut f: impl FnMut() -> bool) {
        let deadline = Instant::now() + Duration::from_secs(10);
        while !f() {
            assert!(Instant::now() < deadline, "condition not reached");
            std::thread::sleep(Duration::from_millis(1));
        }
    }

    #[test]
    fn duplicate_requests_decode_once() {
        let probe = Probe::new(false);
        let (l, _) = loader(&probe, 4, 64);
        let a = TileAddress::new(0, 1, 1);
        l.request_tiles([req(a, Priority::Low), req(a, Priority::High)]);
        l.request_tiles([req(a, Priority::Low)]);
        probe.open();
        wait_until(|| l.contains(a));
        l.request_tiles([req(a, Priority::Low)]);
        std::thread::sleep(Duration::from_millis(20));
        assert_eq!(probe.decodes_of(a), 1);
        assert_eq!(l.counters().loads, 1);
    }

    #[test]
    fn high_priority_decodes_start_first() {
        let probe = Probe::new(false);
        let (l, _) = loader(&probe, 1, 256);
        // The single worker parks on this one while the rest queue up.
        let blocker = TileAddress::new(0, 15, 15);
        l.request_tiles([req(blocker, Priority::Low)]);
        wait_until(|| probe.started.lock().len() == 1);
        let lows: Vec<_> = (0..6).map(|c| req(TileAddress::new(0, c, 0), Priority::Low)).collect();
        let highs: Vec<_> = (0..4).map(|c| req(TileAddress::new(1, c, 0), Priority::High)).collect();
        l.request_tiles(lows.iter().copied().zip(highs.iter().copied()).flat_map(|(a, b)| [a, b]));
        l.request_tiles(lows[4..].iter().copied());
        probe.open();
        wait_until(|| l.cached_len() == 11);
        let order = probe.started.lock().clone();
        let first_low = order[1..].iter().position(|a| a.layer == 0).unwrap();
        let last_high = order[1..].iter().rposition(|a| a.layer == 1).unwrap();
        assert!(last_high < first_low, "{order:?}");
    }

    #[test]
    fn fetch_semantics() {
        let probe = Probe::new(true);
        let (l, signal) = loader(&probe, 2, 64);
        let a = TileAddress::new(0, 2, 3);
        assert!(l.fetch(a).is_none());
        l.request_tiles([req(a, Priority::Low)]);
        let deadline = Instant::now() + Duration::from_secs(10);
        while l.fetch(a).is_none() {
            assert!(Instant::now() < deadline);
            signal.wait(Duration::from_millis(50));
        }
        let e1 = l.fetch(a).unwrap();
        let e2 = l.fetch(a).unwrap();
        assert_eq!(&e1.pixels[..], &vec![23u8; TILE_BYTES][..]);
        assert!(Arc::ptr_eq(&e1, &e2));
    }

    #[test]
    fn invalid_addresses_are_counted() {
        let probe = Probe::new(true);
        let (l, _) = loader(&probe, 1, 4);
        l.request_tiles([req(TileAddress::new(0, 99, 0), Priority::Low), req(TileAddress::new(5, 0, 0), Priority::High)]);
        assert_eq!(l.counters().dropped_invalid, 2);
        assert_eq!(l.outstanding(), 0);
    }

    #[test]
    fn unchanged_region_evicts_nothing() {
        let probe = Probe::new(true);
        let (l, _) = loader(&probe, 2, 8);
        let region: HashSet<_> = (0..4).map(|c| TileAddress::new(0, c, 0)).collect();
        l.retain_region(&region);
        l.request_tiles(region.iter().map(|&a| req(a, Priority::Low)));
        wait_until(|| l.cached_len() == 4);
        l.retain_region(&region);
        l.retain_region(&region);
        assert_eq!(l.counters().evictions, 0);
        assert_eq!(l.cached_len(), 4);
    }

    #[test]
    fn moving_region_evicts_old_tiles_within_budget() {
        let probe = Probe::new(true);
        let (l, _) = loader(&probe, 2, 4);
        let old: HashSet<_> = (0..4).map(|c| TileAddress::new(0, c, 0)).collect();
        l.retain_region(&old);
        l.request_tiles(old.iter().map(|&a| req(a, Priority::Low)));
        wait_until(|| l.cached_len() == 4);
        let new: HashSet<_> = (0..4).map(|c| TileAddress::new(0, c, 9)).collect();
        l.retain_region(&new);
        l.request_tiles(new.iter().map(|&a| req(a, Priority::Low)));
        wait_until(|| new.iter().all(|&a| l.contains(a)));
        assert!(old.iter().all(|&a| l.fetch(a).is_none()));
        assert!(l.cached_bytes() <= l.budget_bytes());
    }

    #[test]
    fn stale_queued_loads_are_cancelled() {
        let probe = Probe::new(false);
        let (l, _) = loader(&probe, 1, 64);
        let blocker = TileAddress::new(0, 15, 15);
        let mut region: HashSet<_> = [blocker].into_iter().collect();
        let queued: Vec<_> = (0..5).map(|c| TileAddress::new(0, c, 4)).collect();
        region.extend(queued.iter().copied());
        l.retain_region(&region);
        l.request_tiles([req(blocker, Priority::Low)]);
        wait_until(|| probe.started.lock().len() == 1);
        l.request_tiles(queued.iter().map(|&a| req(a, Priority::Low)));
        l.retain_region(&[blocker].into_iter().collect());
        probe.open();
        wait_until(|| l.outstanding() == 0);
        assert_eq!(probe.started.lock().len(), 1);
        assert_eq!(l.counters().cancels, 5);
    }

    #[test]
    fn no_concurrent_decode_of_one_address() {
        let probe = Probe::new(true);
        let (l, _) = loader(&probe, 4, 512);
        let addrs: Vec<_> = (0..16).map(|c| TileAddress::new(0, c, 2)).collect();
        std::thread::scope(|s| {
            for _ in 0..4 {
                s.spawn(|| {
                    for _ in 0..20 {
                        l.request_tiles(addrs.iter().map(|&a| req(a, Priority::Low)));
                    }
                });
            }
        });
        wait_until(|| l.cached_len() == 16);
        for &a in &addrs {
            assert_eq!(probe.decodes_of(a), 1);
        }
    }
}
