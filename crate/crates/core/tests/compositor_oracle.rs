//! The compositor against a per-pixel, single-threaded reference renderer.

#[path = "support/compositor.rs"]
mod oracle;

use oracle::{build_images, publish};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tilestream::compositor::{render_frame, CompositorConfig};
use tilestream::{Clock, Pyramid, SlotPool, Viewport};

#[test]
fn randomized_states_match_reference() {
    let failures = oracle::randomized_state_mismatches(2024, 50);
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn aligned_unit_zoom_reproduces_source_bytes() {
    assert!(oracle::identity_case_holds(9));
}

#[test]
fn identical_state_renders_identical_bytes() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let pyramid = Pyramid::from_downsamples(1024, 1024, &[1.0, 2.0]).unwrap();
    let images = build_images(&pyramid, &mut rng);
    let pool = SlotPool::new(&pyramid, 32, 3);
    for (&a, img) in images.iter().step_by(2) {
        publish(&pool, a, img);
    }
    let view = Viewport::new(100.5, 77.25, 300, 200, 0.7);
    let clock = Clock::new();
    let (a, _) = render_frame(&view, &pool, &pyramid, &CompositorConfig::default(), 0, &clock);
    let (b, _) = render_frame(&view, &pool, &pyramid, &CompositorConfig::default(), 1, &clock);
    assert_eq!(a.pixels, b.pixels);
}
