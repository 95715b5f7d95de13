//! The paced render loop driving a live engine.

use std::sync::Arc;
use std::time::{Duration, Instant};

use tilestream::metrics::frame_rate;
use tilestream::{CompositorConfig, Engine, EngineConfig, FlatSource, FrameLoop, FrameLoopConfig, Pyramid, Viewport};

fn engine() -> Arc<Engine> {
    let src = Arc::new(FlatSource::new(Pyramid::from_downsamples(4096, 4096, &[1.0, 4.0, 16.0]).unwrap(), 3));
    let config = EngineConfig {
        pool_size: Some(128),
        loader_workers: 1,
        executors: 1,
        ..Default::default()
    };
    Arc::new(Engine::start(src, config, (320, 240)).unwrap())
}

fn small_frames() -> FrameLoopConfig {
    FrameLoopConfig {
        target_hz: 60,
        compositor: CompositorConfig {
            parallel: false,
            ..Default::default()
        },
    }
}

#[test]
fn frame_windows_account_for_every_buffered_byte() {
    let engine = engine();
    // Buffering starts before the first frame; those bytes go to frame 0.
    engine.set_view(Viewport::new(0.0, 0.0, 320, 240, 1.0)).unwrap();
    std::thread::sleep(Duration::from_millis(30));
    let frames = FrameLoop::start(engine.clone(), small_frames());
    for (x, y) in [(2000.0, 100.0), (100.0, 3000.0), (3000.0, 3000.0)] {
        engine.wait_quiescent(Duration::from_secs(20)).expect("quiescence");
        engine.set_view(Viewport::new(x, y, 320, 240, 1.0)).unwrap();
    }
    std::thread::sleep(Duration::from_millis(50));
    engine.shutdown();
    let report = frames.stop();
    let metrics = engine.metrics();
    let samples = metrics.frames();
    assert_eq!(samples.len() as u64, report.frames);
    assert!(samples.windows(2).all(|w| w[0].frame_index < w[1].frame_index && w[0].end == w[1].start));
    assert!(samples.iter().all(|s| s.end > s.start));
    let framed: u64 = samples.iter().map(|s| s.bytes_completed).sum();
    let txns: u64 = metrics.txns().iter().map(|t| t.bytes).sum();
    assert!(txns > 0);
    assert_eq!(framed, txns);
    assert_eq!(report.rejected_leases, 0);
}

#[test]
fn stalled_frame_skips_ticks_instead_of_bursting() {
    let engine = engine();
    let frames = FrameLoop::start(engine.clone(), small_frames());
    std::thread::sleep(Duration::from_millis(100));
    let t0 = Instant::now();
    frames.inject_stall(Duration::from_millis(200));
    std::thread::sleep(Duration::from_millis(400));
    let elapsed = t0.elapsed();
    engine.shutdown();
    let report = frames.stop();
    assert!(report.skipped_ticks >= 10, "skipped {}", report.skipped_ticks);
    let samples = engine.metrics().frames();
    let period = Duration::from_secs_f64(1.0 / 60.0);
    let since = engine.clock().at(t0);
    let after = samples.iter().filter(|s| s.start >= since).count() as f64;
    // Ticks after the stall are paced normally: no catch-up burst.
    assert!(after <= (elapsed - Duration::from_millis(200)).as_secs_f64() / period.as_secs_f64() + 3.0);
    assert!(samples.windows(2).any(|w| w[1].frame_index - w[0].frame_index >= 10));
}

#[test]
fn idle_scene_paces_at_target_rate() {
    let engine = engine();
    let frames = FrameLoop::start(engine.clone(), small_frames());
    std::thread::sleep(Duration::from_millis(600));
    engine.shutdown();
    frames.stop();
    let fps = frame_rate(&engine.metrics().frames()).unwrap();
    assert!((fps.summary.median - 60.0).abs() < 3.0, "median {}", fps.summary.median);
}
