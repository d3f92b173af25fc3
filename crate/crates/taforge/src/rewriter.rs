//! Supervisor-call hijack: scan executable regions for `svc` words and patch
//! each into an unconditional branch to a dedicated trampoline that saves
//! context, dispatches the emulated syscall and branches back to the next
//! instruction.
//!
//! Each trampoline is a 64-byte slot: a hook word the engine dispatches on,
//! followed by a real branch back to site+4. Branch reach is the `b`
//! immediate's ±32 MiB, so the trampoline region sits right after the
//! highest executable segment.

use std::collections::BTreeMap;

use crate::isa::{self, Insn};
use crate::loader::LoadedImage;
use crate::util::{align_up, PAGE_SIZE};
use crate::vas::{Perms, RegionKind};

pub const TRAMPOLINE_SLOT: u64 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SvcSite {
    pub address: u64,
    /// 16-bit syscall-hint immediate decoded from the instruction word.
    pub immediate: u16,
    pub original_word: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrampolineEntry {
    pub trampoline_addr: u64,
    pub return_addr: u64,
}

#[derive(Debug, Clone, Default)]
pub struct TrampolineTable {
    /// site address -> slot.
    pub entries: BTreeMap<u64, TrampolineEntry>,
    by_trampoline: BTreeMap<u64, SvcSite>,
    /// [base, end) of the trampoline region; (0, 0) when no sites exist.
    pub region: (u64, u64),
}

impl TrampolineTable {
    /// Site that owns the hook word at `pc` (= slot start).
    pub fn site_for_hook(&self, pc: u64) -> Option<&SvcSite> {
        self.by_trampoline.get(&pc)
    }

    pub fn contains_addr(&self, addr: u64) -> bool {
        addr >= self.region.0 && addr < self.region.1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RewriteError {
    #[error("no trampoline slot within ±32 MiB of site {site:#x}")]
    RangeExceeded { site: u64 },
    #[error("trampoline region full: {sites} sites need {needed:#x} bytes, region holds {avail:#x}")]
    RegionFull { sites: usize, needed: u64, avail: u64 },
    #[error("address {0:#x} is not a trampoline entry")]
    UnknownTrampoline(u64),
    #[error("no room for a trampoline region of {needed:#x} bytes")]
    NoRegionSpace { needed: u64 },
}

/// Every 4-aligned word in an executable region whose encoding is a
/// supervisor call, in ascending address order.
pub fn scan_svc_sites(image: &LoadedImage) -> Vec<SvcSite> {
    let mut sites = Vec::new();
    for region in image.vas.regions() {
        if !region.perms.x || region.kind == RegionKind::Trampoline {
            continue;
        }
        for (i, chunk) in region.bytes.chunks_exact(4).enumerate() {
            let word = u32::from_le_bytes(chunk.try_into().unwrap());
            if isa::is_svc(word) {
                sites.push(SvcSite {
                    address: region.base + i as u64 * 4,
                    immediate: isa::svc_imm(word),
                    original_word: word,
                });
            }
        }
    }
    sites.sort_by_key(|s| s.address);
    sites
}

/// Install one trampoline per site in a region allocated adjacent to the
/// highest executable segment, then patch every site into a branch.
pub fn install_trampolines(
    image: &mut LoadedImage,
    sites: &[SvcSite],
) -> Result<TrampolineTable, RewriteError> {
    if sites.is_empty() {
        return Ok(TrampolineTable::default());
    }
    let needed = align_up(sites.len() as u64 * TRAMPOLINE_SLOT, PAGE_SIZE);
    let code_end = image
        .vas
        .regions()
        .iter()
        .filter(|r| r.perms.x)
        .map(|r| r.end())
        .max()
        .unwrap_or(image.window.0);
    let base = image
        .vas
        .find_free(needed, align_up(code_end, PAGE_SIZE), image.window.1)
        .ok_or(RewriteError::NoRegionSpace { needed })?;
    image
        .vas
        .map(base, needed, Perms::RX, RegionKind::Trampoline)
        .map_err(|_| RewriteError::NoRegionSpace { needed })?;
    match install_in_region(image, sites, (base, base + needed)) {
        Ok(table) => Ok(table),
        Err(e) => {
            image.vas.unmap(base).expect("trampoline region was just mapped");
            Err(e)
        }
    }
}

/// Install into an existing trampoline region. Exposed so tests can force
/// degenerate placements (out-of-range, undersized).
pub fn install_in_region(
    image: &mut LoadedImage,
    sites: &[SvcSite],
    region: (u64, u64),
) -> Result<TrampolineTable, RewriteError> {
    let avail = region.1 - region.0;
    let needed = sites.len() as u64 * TRAMPOLINE_SLOT;
    if needed > avail {
        return Err(RewriteError::RegionFull { sites: sites.len(), needed, avail });
    }

    // Validate reach for every site before touching any bytes.
    for (i, site) in sites.iter().enumerate() {
        let slot = region.0 + i as u64 * TRAMPOLINE_SLOT;
        if isa::branch_word_offset(site.address, slot).is_none()
            || isa::branch_word_offset(slot + 4, site.address + 4).is_none()
        {
            return Err(RewriteError::RangeExceeded { site: site.address });
        }
    }

    let mut table = TrampolineTable { region, ..Default::default() };
    for (i, site) in sites.iter().enumerate() {
        let slot = region.0 + i as u64 * TRAMPOLINE_SLOT;
        let return_addr = site.address + 4;

        let hook = isa::encode(&Insn::Hcall { index: i as u16 });
        let back = isa::encode(&Insn::B {
            offset: isa::branch_word_offset(slot + 4, return_addr).unwrap(),
        });
        let mut slot_bytes = [0u8; TRAMPOLINE_SLOT as usize];
        slot_bytes[0..4].copy_from_slice(&hook.to_le_bytes());
        slot_bytes[4..8].copy_from_slice(&back.to_le_bytes());
        image.vas.poke(slot, &slot_bytes).expect("trampoline region is mapped");

        let jump = isa::encode(&Insn::B {
            offset: isa::branch_word_offset(site.address, slot).unwrap(),
        });
        image.vas.poke(site.address, &jump.to_le_bytes()).expect("site is mapped");

        table.entries.insert(site.address, TrampolineEntry { trampoline_addr: slot, return_addr });
        table.by_trampoline.insert(slot, *site);
    }
    Ok(table)
}

/// Reverse lookup: which site does a trampoline belong to.
pub fn site_for_trampoline(
    table: &TrampolineTable,
    trampoline_addr: u64,
) -> Result<&SvcSite, RewriteError> {
    table
        .by_trampoline
        .get(&trampoline_addr)
        .ok_or(RewriteError::UnknownTrampoline(trampoline_addr))
}

/// One line per site: `site_addr old_word new_word trampoline_addr`.
pub fn patch_report(table: &TrampolineTable) -> String {
    let mut out = String::new();
    for (site_addr, entry) in &table.entries {
        let site = table.by_trampoline[&entry.trampoline_addr];
        let new_word = isa::encode(&Insn::B {
            offset: isa::branch_word_offset(*site_addr, entry.trampoline_addr).unwrap(),
        });
        out.push_str(&format!(
            "{site_addr:#x} {:#010x} {new_word:#010x} {:#x}\n",
            site.original_word, entry.trampoline_addr
        ));
    }
    out
}
