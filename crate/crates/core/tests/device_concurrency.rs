//! Slot pool under concurrent claim/publish/purge, readers and forced
//! recycles.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tilestream::{Enhancer, FlatSource, MipChain, MipParams, Pyramid, SlotPool, TileAddress, TileSource};

struct Fixture {
    pool: SlotPool,
    addrs: Vec<TileAddress>,
    images: HashMap<TileAddress, (Vec<u8>, MipChain)>,
    colors: HashMap<TileAddress, [u8; 4]>,
}

fn fixture(pool_size: usize) -> Fixture {
    let pyramid = Pyramid::from_downsamples(2048, 2048, &[1.0]).unwrap();
    let src = FlatSource::new(pyramid.clone(), 5);
    let enhancer = Enhancer::new(MipParams::default()).unwrap();
    let addrs: Vec<_> = (0..8).flat_map(|r| (0..8).map(move |c| TileAddress::new(0, c, r))).collect();
    let mut images = HashMap::new();
    let mut colors = HashMap::new();
    for &a in &addrs {
        let base = src.load(a).unwrap();
        let mips = enhancer.generate_mips(&base);
        images.insert(a, (base, mips));
        colors.insert(a, src.color(a));
    }
    Fixture {
        pool: SlotPool::new(&pyramid, pool_size, 3),
        addrs,
        images,
        colors,
    }
}

#[test]
fn readers_never_accept_foreign_pixels() {
    let f = Arc::new(fixture(16));
    let allocations = f.pool.storage_allocations();
    let storage = f.pool.storage_addresses();
    let stop = Arc::new(AtomicBool::new(false));
    let foreign = Arc::new(AtomicU64::new(0));
    let accepted = Arc::new(AtomicU64::new(0));
    let rejected = Arc::new(AtomicU64::new(0));
    let mut threads = Vec::new();

    for seed in 0..2u64 {
        let (f, stop) = (f.clone(), stop.clone());
        threads.push(std::thread::spawn(move || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            while !stop.load(Ordering::Relaxed) {
                let a = f.addrs[rng.gen_range(0..f.addrs.len())];
                if let Ok(Some(claim)) = f.pool.claim_free_slot(a) {
                    let (base, mips) = &f.images[&a];
                    f.pool.write_base(claim, base).unwrap();
                    f.pool.write_mips(claim, mips).unwrap();
                    if rng.gen_bool(0.1) {
                        f.pool.abort(claim, a).unwrap();
                    } else {
                        f.pool.publish(claim.slot_index, a).unwrap();
                    }
                }
            }
        }));
    }
    {
        let (f, stop) = (f.clone(), stop.clone());
        threads.push(std::thread::spawn(move || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            while !stop.load(Ordering::Relaxed) {
                let a = f.addrs[rng.gen_range(0..f.addrs.len())];
                if rng.gen_bool(0.5) {
                    f.pool.force_recycle(a);
                } else {
                    f.pool.purge(&[a]);
                }
                std::thread::yield_now();
            }
        }));
    }
    for seed in 10..12u64 {
        let (f, stop) = (f.clone(), stop.clone());
        let (foreign, accepted, rejected) = (foreign.clone(), accepted.clone(), rejected.clone());
        threads.push(std::thread::spawn(move || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            while !stop.load(Ordering::Relaxed) {
                let a = f.addrs[rng.gen_range(0..f.addrs.len())];
                let Some(lease) = f.pool.acquire_for_render(a) else { continue };
                let mut texels = Vec::new();
                for _ in 0..64 {
                    let level = rng.gen_range(0..=3u32);
                    let edge = 256 >> level;
                    texels.push(lease.texel(level, rng.gen_range(0..edge), rng.gen_range(0..edge)));
                    if rng.gen_bool(0.05) {
                        std::thread::yield_now();
                    }
                }
                if lease.validate() {
                    accepted.fetch_add(1, Ordering::Relaxed);
                    if texels.iter().any(|t| *t != f.colors[&a]) {
                        foreign.fetch_add(1, Ordering::Relaxed);
                    }
                } else {
                    rejected.fetch_add(1, Ordering::Relaxed);
                }
            }
        }));
    }
    let deadline = Instant::now() + Duration::from_secs(2);
    let mut checks = 0;
    while Instant::now() < deadline {
        f.pool.check_consistency().unwrap();
        assert_eq!(f.pool.occupancy().total(), 16);
        checks += 1;
    }
    stop.store(true, Ordering::SeqCst);
    for t in threads {
        t.join().unwrap();
    }
    assert!(checks > 0);
    assert_eq!(foreign.load(Ordering::SeqCst), 0);
    assert!(accepted.load(Ordering::SeqCst) > 0);
    assert_eq!(f.pool.total_refcount(), 0);
    assert_eq!(f.pool.occupancy().pending, 0);
    assert_eq!(f.pool.storage_allocations(), allocations);
    assert_eq!(f.pool.storage_addresses(), storage);
    f.pool.check_consistency().unwrap();
    eprintln!(
        "accepted {} rejected {} recycles {}",
        accepted.load(Ordering::SeqCst),
        rejected.load(Ordering::SeqCst),
        f.pool.recycles()
    );
}

#[test]
fn one_claim_per_address_under_contention() {
    let f = Arc::new(fixture(64));
    let a = f.addrs[7];
    for _ in 0..50 {
        let barrier = Arc::new(std::sync::Barrier::new(4));
        let handles: Vec<_> = (0..4)
            .map(|_| {
                let (f, barrier) = (f.clone(), barrier.clone());
                std::thread::spawn(move || {
                    barrier.wait();
                    f.pool.claim_free_slot(a).ok().flatten()
                })
            })
            .collect();
        let claims: Vec<_> = handles.into_iter().filter_map(|h| h.join().unwrap()).collect();
        let winners = claims.len();
        for c in claims {
            f.pool.abort(c, a).unwrap();
        }
        assert_eq!(winners, 1);
    }
}
