//! Software stand-in for GPU tile memory.
//!
//! A fixed pool of tile slots is allocated once and recycled forever. Each
//! slot carries one atomic state word (status, purge-pending bit, generation),
//! an atomic render refcount, and pixel storage made of relaxed atomic words.
//! The generation behaves like a seqlock sequence number: a renderer that
//! samples a slot and then sees the same generation in [`RenderLease::validate`]
//! is guaranteed that no writer touched the storage in between.
//!
//! The address-to-slot map is a dense table of atomic words indexed by the
//! tile's linear index in the pyramid, so lookups never take a lock.

use std::sync::atomic::{fence, AtomicU32, AtomicU64, AtomicUsize, Ordering};

use serde::Serialize;
use thiserror::Error;

use crate::pyramid::{Pyramid, TileAddress, TILE_BYTES, TILE_EDGE};
use crate::spd::{level_edge, MipChain, MAX_MIP_LEVELS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum SlotStatus {
    Free,
    Pending,
    Active,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DeviceError {
    #[error("tile {0} is already mapped")]
    AlreadyMapped(TileAddress),
    #[error("tile {0} is outside the pyramid")]
    OutOfRange(TileAddress),
    #[error("contract violation on slot {slot}: {what}")]
    Contract { slot: u32, what: String },
}

const STATUS_MASK: u64 = 0b11;
const PURGE_PENDING: u64 = 0b100;
const GEN_SHIFT: u32 = 3;

const ST_FREE: u64 = 0;
const ST_PENDING: u64 = 1;
const ST_ACTIVE: u64 = 2;

#[inline]
fn pack(status: u64, generation: u64) -> u64 {
    (generation << GEN_SHIFT) | status
}

#[inline]
fn status_of(word: u64) -> SlotStatus {
    match word & STATUS_MASK {
        ST_FREE => SlotStatus::Free,
        ST_PENDING => SlotStatus::Pending,
        _ => SlotStatus::Active,
    }
}

#[inline]
fn generation_of(word: u64) -> u64 {
    word >> GEN_SHIFT
}

// Map entries: slot index + 1 in the top 24 bits, low 40 bits of generation.
const MAP_GEN_BITS: u32 = 40;
const MAP_GEN_MASK: u64 = (1 << MAP_GEN_BITS) - 1;

#[inline]
fn map_entry(slot: u32, generation: u64) -> u64 {
    ((slot as u64 + 1) << MAP_GEN_BITS) | (generation & MAP_GEN_MASK)
}

#[inline]
fn unpack_entry(entry: u64) -> Option<(u32, u64)> {
    (entry != 0).then(|| (((entry >> MAP_GEN_BITS) - 1) as u32, entry & MAP_GEN_MASK))
}

/// Result of a successful [`SlotPool::claim_free_slot`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SlotClaim {
    pub slot_index: u32,
    pub generation: u64,
}

struct Slot {
    state: AtomicU64,
    refcount: AtomicU32,
    /// Linear tile index + 1 of the owning address; meaningful only while
    /// the slot is PENDING or ACTIVE.
    owner: AtomicU64,
    storage: Box<[AtomicU32]>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct PoolOccupancy {
    pub free: usize,
    pub pending: usize,
    pub active: usize,
}

impl PoolOccupancy {
    pub fn total(&self) -> usize {
        self.free + self.pending + self.active
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PurgeOutcome {
    pub freed: usize,
    pub deferred: usize,
}

/// Fixed pool of recycled tile slots plus the tile-to-slot map.
pub struct SlotPool {
    pyramid: Pyramid,
    slots: Box<[Slot]>,
    map: Box<[AtomicU64]>,
    mip_levels: u32,
    level_offsets: Vec<usize>,
    cursor: AtomicUsize,
    storage_allocations: AtomicU64,
    claims: AtomicU64,
    recycles: AtomicU64,
}

impl std::fmt::Debug for SlotPool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SlotPool")
            .field("slots", &self.slots.len())
            .field("mip_levels", &self.mip_levels)
            .field("occupancy", &self.occupancy())
            .finish()
    }
}

impl SlotPool {
    pub fn new(pyramid: &Pyramid, pool_size: usize, mip_levels: u32) -> Self {
        assert!(pool_size > 0, "pool must hold at least one slot");
        assert!(pool_size < (1 << 24), "pool too large for map encoding");
        assert!(mip_levels <= MAX_MIP_LEVELS);
        let mut level_offsets = vec![0usize];
        let mut words = TILE_BYTES / 4;
        for k in 1..=mip_levels {
            level_offsets.push(words);
            words += (level_edge(k) * level_edge(k)) as usize;
        }
        let slots: Box<[Slot]> = (0..pool_size)
            .map(|_| Slot {
                state: AtomicU64::new(pack(ST_FREE, 0)),
                refcount: AtomicU32::new(0),
                owner: AtomicU64::new(0),
                storage: (0..words).map(|_| AtomicU32::new(0)).collect(),
            })
            .collect();
        let map = (0..pyramid.total_tiles()).map(|_| AtomicU64::new(0)).collect();
        Self {
            pyramid: pyramid.clone(),
            slots,
            map,
            mip_levels,
            level_offsets,
            cursor: AtomicUsize::new(0),
            storage_allocations: AtomicU64::new(pool_size as u64),
            claims: AtomicU64::new(0),
            recycles: AtomicU64::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn mip_levels(&self) -> u32 {
        self.mip_levels
    }

    /// Bytes of pixel storage per slot.
    pub fn slot_bytes(&self) -> usize {
        self.slots[0].storage.len() * 4
    }

    /// Number of storage buffers ever allocated; fixed at construction.
    pub fn storage_allocations(&self) -> u64 {
        self.storage_allocations.load(Ordering::Relaxed)
    }

    pub fn claims(&self) -> u64 {
        self.claims.load(Ordering::Relaxed)
    }

    /// ACTIVE -> FREE transitions.
    pub fn recycles(&self) -> u64 {
        self.recycles.load(Ordering::Relaxed)
    }

    fn map_index(&self, addr: TileAddress) -> Result<usize, DeviceError> {
        self.pyramid.linear_index(addr).ok_or(DeviceError::OutOfRange(addr))
    }

    fn contract(slot: u32, what: impl Into<String>) -> DeviceError {
        DeviceError::Contract {
            slot,
            what: what.into(),
        }
    }

    /// Claims a FREE slot for `addr` and maps it. Returns `Ok(None)` when the
    /// pool is exhausted; never blocks.
    pub fn claim_free_slot(&self, addr: TileAddress) -> Result<Option<SlotClaim>, DeviceError> {
        let index = self.map_index(addr)?;
        if self.map[index].load(Ordering::SeqCst) != 0 {
            return Err(DeviceError::AlreadyMapped(addr));
        }
        let n = self.slots.len();
        let start = self.cursor.fetch_add(1, Ordering::Relaxed) % n;
        for off in 0..n {
            let slot_index = (start + off) % n;
            let slot = &self.slots[slot_index];
            let word = slot.state.load(Ordering::SeqCst);
            if word & STATUS_MASK != ST_FREE {
                continue;
            }
            let generation = generation_of(word) + 1;
            if slot
                .state
                .compare_exchange(word, pack(ST_PENDING, generation), Ordering::SeqCst, Ordering::SeqCst)
                .is_err()
            {
                continue;
            }
            // Storage writes that follow must not become visible before the
            // generation bump.
            fence(Ordering::Release);
            slot.owner.store(index as u64 + 1, Ordering::SeqCst);
            let entry = map_entry(slot_index as u32, generation);
            if self.map[index]
                .compare_exchange(0, entry, Ordering::SeqCst, Ordering::SeqCst)
                .is_err()
            {
                slot.state.store(pack(ST_FREE, generation), Ordering::SeqCst);
                return Err(DeviceError::AlreadyMapped(addr));
            }
            self.claims.fetch_add(1, Ordering::Relaxed);
            return Ok(Some(SlotClaim {
                slot_index: slot_index as u32,
                generation,
            }));
        }
        Ok(None)
    }

    fn pending_slot(&self, claim: SlotClaim) -> Result<&Slot, DeviceError> {
        let slot = self
            .slots
            .get(claim.slot_index as usize)
            .ok_or_else(|| Self::contract(claim.slot_index, "no such slot"))?;
        let word = slot.state.load(Ordering::SeqCst);
        if word != pack(ST_PENDING, claim.generation) {
            return Err(Self::contract(
                claim.slot_index,
                format!("write to {:?} slot of generation {}", status_of(word), generation_of(word)),
            ));
        }
        Ok(slot)
    }

    /// Overwrites the base image of a PENDING slot.
    pub fn write_base(&self, claim: SlotClaim, pixels: &[u8]) -> Result<(), DeviceError> {
        if pixels.len() != TILE_BYTES {
            return Err(Self::contract(claim.slot_index, "base image is not full size"));
        }
        let slot = self.pending_slot(claim)?;
        for (word, px) in slot.storage[..TILE_BYTES / 4].iter().zip(pixels.chunks_exact(4)) {
            word.store(u32::from_le_bytes([px[0], px[1], px[2], px[3]]), Ordering::Relaxed);
        }
        Ok(())
    }

    /// Overwrites the mip levels of a PENDING slot.
    pub fn write_mips(&self, claim: SlotClaim, mips: &MipChain) -> Result<(), DeviceError> {
        if mips.levels.len() != self.mip_levels as usize {
            return Err(Self::contract(claim.slot_index, "mip chain length mismatch"));
        }
        let slot = self.pending_slot(claim)?;
        for (k, level) in mips.levels.iter().enumerate() {
            let start = self.level_offsets[k + 1];
            let dst = &slot.storage[start..start + (level.edge * level.edge) as usize];
            for (word, px) in dst.iter().zip(level.pixels.chunks_exact(4)) {
                word.store(u32::from_le_bytes([px[0], px[1], px[2], px[3]]), Ordering::Relaxed);
            }
        }
        Ok(())
    }

    /// PENDING -> ACTIVE; the tile becomes renderable.
    pub fn publish(&self, slot_index: u32, addr: TileAddress) -> Result<(), DeviceError> {
        let index = self.map_index(addr)?;
        let slot = self
            .slots
            .get(slot_index as usize)
            .ok_or_else(|| Self::contract(slot_index, "no such slot"))?;
        let word = slot.state.load(Ordering::SeqCst);
        if word & STATUS_MASK != ST_PENDING {
            return Err(Self::contract(slot_index, format!("publish of {:?} slot", status_of(word))));
        }
        if slot.owner.load(Ordering::SeqCst) != index as u64 + 1 {
            return Err(Self::contract(slot_index, format!("publish of {addr} by non-owner")));
        }
        slot.state
            .compare_exchange(word, pack(ST_ACTIVE, generation_of(word)), Ordering::SeqCst, Ordering::SeqCst)
            .map(|_| ())
            .map_err(|_| Self::contract(slot_index, "concurrent transition during publish"))
    }

    /// Returns a PENDING slot to FREE and unmaps it, e.g. when its source
    /// tile vanished before it could be copied.
    pub fn abort(&self, claim: SlotClaim, addr: TileAddress) -> Result<(), DeviceError> {
        let index = self.map_index(addr)?;
        let slot = self.pending_slot(claim)?;
        let _ = self.map[index].compare_exchange(
            map_entry(claim.slot_index, claim.generation),
            0,
            Ordering::SeqCst,
            Ordering::SeqCst,
        );
        slot.state
            .compare_exchange(
                pack(ST_PENDING, claim.generation),
                pack(ST_FREE, claim.generation),
                Ordering::SeqCst,
                Ordering::SeqCst,
            )
            .map(|_| ())
            .map_err(|_| Self::contract(claim.slot_index, "concurrent transition during abort"))
    }

    /// Unmaps each ACTIVE address and flips its slot to FREE, or defers the
    /// flip until the last render lease is released. Storage is untouched.
    pub fn purge<'a>(&self, addrs: impl IntoIterator<Item = &'a TileAddress>) -> PurgeOutcome {
        let mut out = PurgeOutcome::default();
        for &addr in addrs {
            let Ok(index) = self.map_index(addr) else { continue };
            let entry = self.map[index].load(Ordering::SeqCst);
            let Some((slot_index, gen_bits)) = unpack_entry(entry) else { continue };
            let slot = &self.slots[slot_index as usize];
            let word = slot.state.load(Ordering::SeqCst);
            if word & STATUS_MASK != ST_ACTIVE || word & PURGE_PENDING != 0 || generation_of(word) & MAP_GEN_MASK != gen_bits {
                continue;
            }
            if self.map[index]
                .compare_exchange(entry, 0, Ordering::SeqCst, Ordering::SeqCst)
                .is_err()
            {
                continue;
            }
            if slot
                .state
                .compare_exchange(word, word | PURGE_PENDING, Ordering::SeqCst, Ordering::SeqCst)
                .is_err()
            {
                continue;
            }
            if slot.refcount.load(Ordering::SeqCst) == 0 && self.finish_purge(slot, word | PURGE_PENDING) {
                out.freed += 1;
            } else {
                out.deferred += 1;
            }
        }
        out
    }

    fn finish_purge(&self, slot: &Slot, pending_word: u64) -> bool {
        let freed = slot
            .state
            .compare_exchange(
                pending_word,
                pack(ST_FREE, generation_of(pending_word)),
                Ordering::SeqCst,
                Ordering::SeqCst,
            )
            .is_ok();
        if freed {
            self.recycles.fetch_add(1, Ordering::Relaxed);
        }
        freed
    }

    fn release_ref(&self, slot_index: u32) {
        let slot = &self.slots[slot_index as usize];
        if slot.refcount.fetch_sub(1, Ordering::SeqCst) == 1 {
            let word = slot.state.load(Ordering::SeqCst);
            if word & STATUS_MASK == ST_ACTIVE && word & PURGE_PENDING != 0 {
                self.finish_purge(slot, word);
            }
        }
    }

    /// Leases an ACTIVE tile for sampling. Absent when unmapped, PENDING, or
    /// being purged.
    pub fn acquire_for_render(&self, addr: TileAddress) -> Option<RenderLease<'_>> {
        let index = self.pyramid.linear_index(addr)?;
        let (slot_index, gen_bits) = unpack_entry(self.map[index].load(Ordering::SeqCst))?;
        let slot = &self.slots[slot_index as usize];
        slot.refcount.fetch_add(1, Ordering::SeqCst);
        let word = slot.state.load(Ordering::SeqCst);
        if word & STATUS_MASK == ST_ACTIVE && word & PURGE_PENDING == 0 && generation_of(word) & MAP_GEN_MASK == gen_bits {
            Some(RenderLease {
                pool: self,
                addr,
                slot_index,
                generation: generation_of(word),
            })
        } else {
            self.release_ref(slot_index);
            None
        }
    }

    /// Mapping for `addr`, if any: `(slot, generation, status)`.
    pub fn lookup(&self, addr: TileAddress) -> Option<(u32, u64, SlotStatus)> {
        let index = self.pyramid.linear_index(addr)?;
        let (slot_index, gen_bits) = unpack_entry(self.map[index].load(Ordering::SeqCst))?;
        let word = self.slots[slot_index as usize].state.load(Ordering::SeqCst);
        (generation_of(word) & MAP_GEN_MASK == gen_bits).then(|| (slot_index, generation_of(word), status_of(word)))
    }

    pub fn is_active(&self, addr: TileAddress) -> bool {
        matches!(self.lookup(addr), Some((_, _, SlotStatus::Active)))
    }

    pub fn is_mapped(&self, addr: TileAddress) -> bool {
        self.pyramid
            .linear_index(addr)
            .is_some_and(|i| self.map[i].load(Ordering::SeqCst) != 0)
    }

    /// Every currently mapped address, in pyramid order.
    pub fn mapped_addresses(&self) -> Vec<TileAddress> {
        let mut out = Vec::new();
        let mut base = 0usize;
        for layer in self.pyramid.layers() {
            for i in 0..layer.tile_count() {
                if self.map[base + i].load(Ordering::Relaxed) != 0 {
                    let (row, col) = (i / layer.tiles_x as usize, i % layer.tiles_x as usize);
                    out.push(TileAddress::new(layer.index, col as u32, row as u32));
                }
            }
            base += layer.tile_count();
        }
        out
    }

    pub fn status(&self, slot_index: u32) -> SlotStatus {
        status_of(self.slots[slot_index as usize].state.load(Ordering::SeqCst))
    }

    pub fn generation(&self, slot_index: u32) -> u64 {
        generation_of(self.slots[slot_index as usize].state.load(Ordering::SeqCst))
    }

    pub fn refcount(&self, slot_index: u32) -> u32 {
        self.slots[slot_index as usize].refcount.load(Ordering::SeqCst)
    }

    pub fn total_refcount(&self) -> u64 {
        self.slots.iter().map(|s| s.refcount.load(Ordering::SeqCst) as u64).sum()
    }

    pub fn occupancy(&self) -> PoolOccupancy {
        let mut occ = PoolOccupancy::default();
        for s in self.slots.iter() {
            match status_of(s.state.load(Ordering::Relaxed)) {
                SlotStatus::Free => occ.free += 1,
                SlotStatus::Pending => occ.pending += 1,
                SlotStatus::Active => occ.active += 1,
            }
        }
        occ
    }

    /// Copies a slot's base image regardless of status. Test and debugging
    /// access only; not synchronized with writers.
    pub fn read_base_raw(&self, slot_index: u32) -> Vec<u8> {
        self.slots[slot_index as usize].storage[..TILE_BYTES / 4]
            .iter()
            .flat_map(|w| w.load(Ordering::Relaxed).to_le_bytes())
            .collect()
    }

    /// Address of each slot's storage; stable for the pool's lifetime.
    pub fn storage_addresses(&self) -> Vec<usize> {
        self.slots.iter().map(|s| s.storage.as_ptr() as usize).collect()
    }

    /// Fault injection: unmaps `addr` and frees its slot immediately, ignoring
    /// outstanding leases. Those leases then fail validation once the slot is
    /// claimed again.
    pub fn force_recycle(&self, addr: TileAddress) -> bool {
        let Some(index) = self.pyramid.linear_index(addr) else { return false };
        let entry = self.map[index].load(Ordering::SeqCst);
        let Some((slot_index, gen_bits)) = unpack_entry(entry) else { return false };
        let slot = &self.slots[slot_index as usize];
        let word = slot.state.load(Ordering::SeqCst);
        if word & STATUS_MASK != ST_ACTIVE || generation_of(word) & MAP_GEN_MASK != gen_bits {
            return false;
        }
        if self.map[index]
            .compare_exchange(entry, 0, Ordering::SeqCst, Ordering::SeqCst)
            .is_err()
        {
            return false;
        }
        let freed = slot
            .state
            .compare_exchange(word, pack(ST_FREE, generation_of(word)), Ordering::SeqCst, Ordering::SeqCst)
            .is_ok();
        if freed {
            self.recycles.fetch_add(1, Ordering::Relaxed);
        }
        freed
    }

    /// Cross-checks the map against slot states while other threads run.
    ///
    /// Flags a map entry whose slot is FREE at a generation matching the
    /// entry, whose owner differs from the mapped address, or two entries
    /// naming the same slot incarnation. An entry is only reported if it is
    /// unchanged after the slot was inspected.
    pub fn check_consistency(&self) -> Result<(), String> {
        let mut seen: std::collections::HashMap<(u32, u64), usize> = std::collections::HashMap::new();
        for (index, cell) in self.map.iter().enumerate() {
            let entry = cell.load(Ordering::SeqCst);
            let Some((slot_index, gen_bits)) = unpack_entry(entry) else { continue };
            let Some(slot) = self.slots.get(slot_index as usize) else {
                return Err(format!("map entry {index} names slot {slot_index} outside the pool"));
            };
            let word = slot.state.load(Ordering::SeqCst);
            let owner = slot.owner.load(Ordering::SeqCst);
            let word_after = slot.state.load(Ordering::SeqCst);
            if cell.load(Ordering::SeqCst) != entry || generation_of(word) & MAP_GEN_MASK != gen_bits || word != word_after {
                continue;
            }
            if status_of(word) == SlotStatus::Free {
                return Err(format!("tile #{index} mapped to FREE slot {slot_index}"));
            }
            if owner != index as u64 + 1 {
                return Err(format!("tile #{index} mapped to slot {slot_index} owned by #{}", owner.wrapping_sub(1)));
            }
            if let Some(other) = seen.insert((slot_index, gen_bits), index) {
                if cell.load(Ordering::SeqCst) == entry && self.map[other].load(Ordering::SeqCst) == entry {
                    return Err(format!("slot {slot_index} mapped to tiles #{other} and #{index}"));
                }
            }
        }
        if self.occupancy().total() != self.slots.len() {
            return Err("slot count not conserved".into());
        }
        Ok(())
    }

    fn texel_word(&self, slot_index: u32, level: u32, x: u32, y: u32) -> u32 {
        let edge = TILE_EDGE >> level;
        debug_assert!(x < edge && y < edge && level <= self.mip_levels);
        let i = self.level_offsets[level as usize] + (y * edge + x) as usize;
        self.slots[slot_index as usize].storage[i].load(Ordering::Relaxed)
    }
}

/// A counted reference to an ACTIVE slot. Dropping it releases the count.
///
/// Texels read through the lease are only trustworthy if [`validate`]
/// returns true afterwards.
///
/// [`validate`]: RenderLease::validate
pub struct RenderLease<'a> {
    pool: &'a SlotPool,
    pub addr: TileAddress,
    pub slot_index: u32,
    pub generation: u64,
}

impl std::fmt::Debug for RenderLease<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RenderLease")
            .field("addr", &self.addr)
            .field("slot_index", &self.slot_index)
            .field("generation", &self.generation)
            .finish()
    }
}

impl RenderLease<'_> {
    /// True iff the slot has not been reclaimed since the lease was taken,
    /// so every texel read before this call belonged to `addr`.
    pub fn validate(&self) -> bool {
        fence(Ordering::Acquire);
        let word = self.pool.slots[self.slot_index as usize].state.load(Ordering::Relaxed);
        generation_of(word) == self.generation
    }

    pub fn mip_levels(&self) -> u32 {
        self.pool.mip_levels
    }

    pub fn texel(&self, level: u32, x: u32, y: u32) -> [u8; 4] {
        self.pool.texel_word(self.slot_index, level, x, y).to_le_bytes()
    }

    pub fn release(self) {}
}

impl Drop for RenderLease<'_> {
    fn drop(&mut self) {
        self.pool.release_ref(self.slot_index);
    }
}
