//! Edge-coverage bitmap: 65536 8-bit saturating counters indexed by a fixed
//! edge hash, with the classic power-of-two hit classes. A run is
//! interesting when some bucket's hit class exceeds the global map's; the
//! global map then absorbs the run's maxima and only ever grows.

use std::io::{self, Read, Write};

use crate::engine::BranchTrace;

pub const MAP_SIZE: usize = 65536;

/// Fixed hash rule: `((source >> 2) * 0x9e3779b1) xor
/// ((target >> 2) * 0x85ebca77) mod 65536`, wrapping 64-bit products.
pub fn edge_hash(source: u64, target: u64) -> u16 {
    let s = (source >> 2).wrapping_mul(0x9e37_79b1);
    let t = (target >> 2).wrapping_mul(0x85eb_ca77);
    (s ^ t) as u16
}

/// Hit classes over counter values: {0, 1, 2, 3, 4-7, 8-15, 16-31, 32-127,
/// 128-255} map to 0..=8.
pub fn hit_class(count: u8) -> u8 {
    match count {
        0 => 0,
        1 => 1,
        2 => 2,
        3 => 3,
        4..=7 => 4,
        8..=15 => 5,
        16..=31 => 6,
        32..=127 => 7,
        128..=255 => 8,
    }
}

#[derive(Clone)]
pub struct CoverageBitmap {
    pub buckets: Box<[u8; MAP_SIZE]>,
}

impl Default for CoverageBitmap {
    fn default() -> Self {
        CoverageBitmap { buckets: Box::new([0; MAP_SIZE]) }
    }
}

impl std::fmt::Debug for CoverageBitmap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "CoverageBitmap({} occupied)", self.occupied())
    }
}

impl PartialEq for CoverageBitmap {
    fn eq(&self, other: &Self) -> bool {
        self.buckets[..] == other.buckets[..]
    }
}

impl CoverageBitmap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn clear(&mut self) {
        self.buckets.fill(0);
    }

    pub fn add_edge(&mut self, source: u64, target: u64) {
        let idx = edge_hash(source, target) as usize;
        self.buckets[idx] = self.buckets[idx].saturating_add(1);
    }

    pub fn occupied(&self) -> usize {
        self.buckets.iter().filter(|&&b| b != 0).count()
    }

    pub fn occupancy(&self) -> f64 {
        self.occupied() as f64 / MAP_SIZE as f64
    }

    pub fn max_class(&self) -> u8 {
        self.buckets.iter().copied().map(hit_class).max().unwrap_or(0)
    }

    pub fn occupied_set(&self) -> Vec<u16> {
        self.buckets
            .iter()
            .enumerate()
            .filter(|(_, &b)| b != 0)
            .map(|(i, _)| i as u16)
            .collect()
    }

    pub fn write_to(&self, w: &mut dyn Write) -> io::Result<()> {
        w.write_all(&self.buckets[..])
    }

    pub fn read_from(r: &mut dyn Read) -> io::Result<CoverageBitmap> {
        let mut map = CoverageBitmap::new();
        r.read_exact(&mut map.buckets[..])?;
        Ok(map)
    }
}

/// Count the trace's edges into the zeroed per-run map, then compare hit
/// classes against the global map. Returns true (and absorbs the run's
/// maxima) when some bucket reached a class the global map has not seen.
pub fn update_coverage(
    trace: &BranchTrace,
    local: &mut CoverageBitmap,
    global: &mut CoverageBitmap,
) -> bool {
    debug_assert!(local.buckets.iter().all(|&b| b == 0), "per-run map must start zeroed");
    for e in &trace.events {
        local.add_edge(e.source, e.target);
    }
    let mut interesting = false;
    for (l, g) in local.buckets.iter().zip(global.buckets.iter()) {
        if hit_class(*l) > hit_class(*g) {
            interesting = true;
            break;
        }
    }
    if interesting {
        for (l, g) in local.buckets.iter().zip(global.buckets.iter_mut()) {
            *g = (*g).max(*l);
        }
    }
    interesting
}
