//! The paced render loop: one thread drawing the engine's current view on a
//! fixed cadence and accounting buffered bytes to frame windows.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};

use crate::clock::Timestamp;
use crate::compositor::{CompositorConfig, FramePacer, Framebuffer};
use crate::metrics::FrameSample;
use crate::rtbs::Engine;

/// Latest rendered frame, overwritten by each new one.
#[derive(Debug, Default)]
pub struct FrameMailbox {
    latest: Mutex<Option<Arc<Framebuffer>>>,
    cv: Condvar,
}

impl FrameMailbox {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put(&self, frame: Arc<Framebuffer>) {
        *self.latest.lock() = Some(frame);
        self.cv.notify_all();
    }

    pub fn latest(&self) -> Option<Arc<Framebuffer>> {
        self.latest.lock().clone()
    }

    /// Waits for a frame with an index above `after`.
    pub fn wait_newer(&self, after: Option<u64>, timeout: Duration) -> Option<Arc<Framebuffer>> {
        let deadline = Instant::now() + timeout;
        let mut latest = self.latest.lock();
        loop {
            if let Some(f) = latest.as_ref() {
                if after.map_or(true, |a| f.frame_index > a) {
                    return Some(f.clone());
                }
            }
            if self.cv.wait_until(&mut latest, deadline).timed_out() {
                return None;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameLoopConfig {
    pub target_hz: u32,
    pub compositor: CompositorConfig,
}

impl Default for FrameLoopConfig {
    fn default() -> Self {
        Self {
            target_hz: 120,
            compositor: CompositorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FrameLoopReport {
    pub frames: u64,
    pub skipped_ticks: u64,
    pub rejected_leases: u64,
}

struct LoopShared {
    engine: Arc<Engine>,
    mailbox: Arc<FrameMailbox>,
    stop: AtomicBool,
    stall_ns: AtomicU64,
}

struct OpenFrame {
    index: u64,
    start: Timestamp,
    shader_ns: u64,
}

struct LoopExit {
    open: Option<OpenFrame>,
    carry: u64,
    report: FrameLoopReport,
}

/// Render thread for one engine. Frame `i` is credited with the bytes whose
/// transactions completed between the start of frame `i` and the start of
/// frame `i + 1`; bytes completed before the first frame go to the first.
pub struct FrameLoop {
    shared: Arc<LoopShared>,
    handle: Option<JoinHandle<LoopExit>>,
}

impl FrameLoop {
    pub fn start(engine: Arc<Engine>, config: FrameLoopConfig) -> Self {
        Self::with_mailbox(engine, config, Arc::new(FrameMailbox::new()))
    }

    pub fn with_mailbox(engine: Arc<Engine>, config: FrameLoopConfig, mailbox: Arc<FrameMailbox>) -> Self {
        let shared = Arc::new(LoopShared {
            engine,
            mailbox,
            stop: AtomicBool::new(false),
            stall_ns: AtomicU64::new(0),
        });
        let s = shared.clone();
        let handle = std::thread::Builder::new()
            .name("frame-loop".into())
            .spawn(move || run(&s, config))
            .expect("spawn frame loop");
        Self {
            shared,
            handle: Some(handle),
        }
    }

    pub fn mailbox(&self) -> &Arc<FrameMailbox> {
        &self.shared.mailbox
    }

    /// Test hook: the next frame takes at least this much longer to draw.
    pub fn inject_stall(&self, stall: Duration) {
        self.shared.stall_ns.store(stall.as_nanos() as u64, Ordering::SeqCst);
    }

    /// Stops the loop and closes the last frame window. Shut the engine
    /// down first so that no transaction completes after the final window.
    pub fn stop(mut self) -> FrameLoopReport {
        self.finish()
    }

    fn finish(&mut self) -> FrameLoopReport {
        self.shared.stop.store(true, Ordering::SeqCst);
        let Some(handle) = self.handle.take() else {
            return FrameLoopReport::default();
        };
        let exit = handle.join().expect("frame loop panicked");
        let engine = &self.shared.engine;
        let bytes = engine.metrics().take_window_bytes();
        if let Some(open) = exit.open {
            let end = engine.clock().now();
            engine.metrics().record_frame(FrameSample {
                frame_index: open.index,
                start: open.start,
                end: end.max(Timestamp(open.start.0 + 1)),
                shader_ns: open.shader_ns,
                bytes_completed: exit.carry + bytes,
            });
        }
        exit.report
    }
}

impl Drop for FrameLoop {
    fn drop(&mut self) {
        self.finish();
    }
}

fn run(shared: &LoopShared, config: FrameLoopConfig) -> LoopExit {
    let engine = &shared.engine;
    let metrics = engine.metrics();
    let mut pacer = FramePacer::new(config.target_hz);
    let mut open: Option<OpenFrame> = None;
    let mut carry = 0u64;
    let mut report = FrameLoopReport::default();
    while !shared.stop.load(Ordering::SeqCst) {
        let tick = pacer.wait();
        let start = engine.clock().now();
        let bytes = metrics.take_window_bytes();
        match open.take() {
            Some(prev) => {
                metrics.record_frame(FrameSample {
                    frame_index: prev.index,
                    start: prev.start,
                    end: start,
                    shader_ns: prev.shader_ns,
                    bytes_completed: carry + bytes,
                });
                carry = 0;
            }
            None => carry += bytes,
        }
        let mut shader_ns = 0;
        if let Some((fb, stats)) = engine.render(None, &config.compositor, tick) {
            shader_ns = fb.finished_at.saturating_since(fb.started_at).as_nanos() as u64;
            report.rejected_leases += stats.rejected as u64;
            shared.mailbox.put(Arc::new(fb));
        }
        let stall = shared.stall_ns.swap(0, Ordering::SeqCst);
        if stall > 0 {
            std::thread::sleep(Duration::from_nanos(stall));
        }
        report.frames += 1;
        open = Some(OpenFrame {
            index: tick,
            start,
            shader_ns,
        });
    }
    report.skipped_ticks = pacer.skipped();
    LoopExit { open, carry, report }
}
