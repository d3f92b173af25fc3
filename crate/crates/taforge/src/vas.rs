//! Modeled virtual address space of a rehosted TA: page-aligned regions with
//! permissions, byte backing, and fault-reporting accessors.
//!
//! Faults are values, not errors: the engine turns them into run exits and
//! the fuzzer turns those into crash reports. Host-side misuse (mapping
//! overlap, bad arguments) is a [`VasError`] instead.

use crate::isa::WordWidth;
use crate::util::{align_up, Fnv64, PAGE_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Perms {
    pub r: bool,
    pub w: bool,
    pub x: bool,
}

impl Perms {
    pub const R: Perms = Perms { r: true, w: false, x: false };
    pub const RW: Perms = Perms { r: true, w: true, x: false };
    pub const RX: Perms = Perms { r: true, w: false, x: true };
    pub const RWX: Perms = Perms { r: true, w: true, x: true };
}

impl std::fmt::Display for Perms {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}{}{}",
            if self.r { 'R' } else { '-' },
            if self.w { 'W' } else { '-' },
            if self.x { 'X' } else { '-' }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum RegionKind {
    Segment,
    Stack,
    Heap,
    Trampoline,
    DeviceShm,
}

impl std::fmt::Display for RegionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            RegionKind::Segment => "SEGMENT",
            RegionKind::Stack => "STACK",
            RegionKind::Heap => "HEAP",
            RegionKind::Trampoline => "TRAMPOLINE",
            RegionKind::DeviceShm => "DEVICE_SHM",
        };
        f.write_str(s)
    }
}

/// Why a guest memory access failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum FaultKind {
    OobRead,
    OobWrite,
    ExecNx,
    Unaligned,
    IllegalInsn,
    DivZero,
}

impl std::fmt::Display for FaultKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            FaultKind::OobRead => "OOB_READ",
            FaultKind::OobWrite => "OOB_WRITE",
            FaultKind::ExecNx => "EXEC_NX",
            FaultKind::Unaligned => "UNALIGNED",
            FaultKind::IllegalInsn => "ILLEGAL_INSN",
            FaultKind::DivZero => "DIV_ZERO",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Fault {
    pub kind: FaultKind,
    /// Program counter at the faulting instruction; filled by the engine.
    pub pc: u64,
    pub access_addr: Option<u64>,
}

impl Fault {
    pub fn access(kind: FaultKind, addr: u64) -> Self {
        Fault { kind, pc: 0, access_addr: Some(addr) }
    }

    pub fn at_pc(kind: FaultKind) -> Self {
        Fault { kind, pc: 0, access_addr: None }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum VasError {
    #[error("region {base:#x}+{len:#x} overlaps an existing region")]
    Overlap { base: u64, len: u64 },
    #[error("region {base:#x}+{len:#x} is not page-aligned")]
    Unaligned { base: u64, len: u64 },
    #[error("region {base:#x}+{len:#x} exceeds the {width:?} address limit")]
    WidthOverflow { base: u64, len: u64, width: WordWidth },
    #[error("no free window slot of {len:#x} bytes in [{lo:#x}, {hi:#x})")]
    Exhausted { len: u64, lo: u64, hi: u64 },
    #[error("no region mapped at {base:#x}")]
    NotMapped { base: u64 },
}

const PAGES_PER_BIT_WORD: u64 = 64;

#[derive(Debug, Clone)]
pub struct Region {
    pub base: u64,
    pub len: u64,
    pub perms: Perms,
    pub kind: RegionKind,
    pub bytes: Vec<u8>,
    /// One bit per page, set on write since the last dirty reset.
    dirty: Vec<u64>,
}

impl Region {
    fn new(base: u64, len: u64, perms: Perms, kind: RegionKind, bytes: Vec<u8>) -> Self {
        let pages = len / PAGE_SIZE;
        let words = align_up(pages, PAGES_PER_BIT_WORD) / PAGES_PER_BIT_WORD;
        Region { base, len, perms, kind, bytes, dirty: vec![0; words as usize] }
    }

    pub fn end(&self) -> u64 {
        self.base + self.len
    }

    pub fn contains(&self, addr: u64) -> bool {
        addr >= self.base && addr < self.end()
    }

    fn mark_dirty(&mut self, addr: u64, width: u64) {
        let first = (addr - self.base) / PAGE_SIZE;
        let last = (addr + width - 1 - self.base) / PAGE_SIZE;
        for page in first..=last {
            self.dirty[(page / PAGES_PER_BIT_WORD) as usize] |= 1 << (page % PAGES_PER_BIT_WORD);
        }
    }

    fn clear_dirty(&mut self) {
        self.dirty.iter_mut().for_each(|w| *w = 0);
    }

    fn dirty_pages(&self) -> impl Iterator<Item = u64> + '_ {
        self.dirty.iter().enumerate().flat_map(|(wi, &w)| {
            (0..PAGES_PER_BIT_WORD)
                .filter(move |b| w & (1 << b) != 0)
                .map(move |b| wi as u64 * PAGES_PER_BIT_WORD + b)
        })
    }
}

/// The rehosted address space: disjoint page-aligned regions, sorted by base.
#[derive(Debug, Clone)]
pub struct VirtualAddressSpace {
    regions: Vec<Region>,
    pub page_size: u64,
    pub width: WordWidth,
    /// Bumped on map/unmap; snapshots use it to tell layouts apart.
    pub layout_epoch: u64,
}

impl VirtualAddressSpace {
    pub fn new(width: WordWidth) -> Self {
        VirtualAddressSpace { regions: Vec::new(), page_size: PAGE_SIZE, width, layout_epoch: 0 }
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn map(
        &mut self,
        base: u64,
        len: u64,
        perms: Perms,
        kind: RegionKind,
    ) -> Result<(), VasError> {
        if base % PAGE_SIZE != 0 || len % PAGE_SIZE != 0 || len == 0 {
            return Err(VasError::Unaligned { base, len });
        }
        let end = base.checked_add(len).ok_or(VasError::WidthOverflow {
            base,
            len,
            width: self.width,
        })?;
        // The final page below the width limit stays reserved for the
        // return-to-host sentinel.
        let limit = match self.width {
            WordWidth::W32 => 1u64 << 32,
            WordWidth::W64 => u64::MAX,
        };
        if end > limit - PAGE_SIZE {
            return Err(VasError::WidthOverflow { base, len, width: self.width });
        }
        if self.regions.iter().any(|r| base < r.end() && r.base < end) {
            return Err(VasError::Overlap { base, len });
        }
        let region = Region::new(base, len, perms, kind, vec![0; len as usize]);
        let pos = self.regions.partition_point(|r| r.base < base);
        self.regions.insert(pos, region);
        self.layout_epoch += 1;
        Ok(())
    }

    pub fn unmap(&mut self, base: u64) -> Result<(), VasError> {
        let pos = self
            .regions
            .iter()
            .position(|r| r.base == base)
            .ok_or(VasError::NotMapped { base })?;
        self.regions.remove(pos);
        self.layout_epoch += 1;
        Ok(())
    }

    /// Lowest page-aligned free slot of `len` bytes within `[lo, hi)`.
    pub fn find_free(&self, len: u64, lo: u64, hi: u64) -> Option<u64> {
        let len = align_up(len, PAGE_SIZE);
        let mut cursor = align_up(lo, PAGE_SIZE);
        for r in &self.regions {
            if r.end() <= cursor {
                continue;
            }
            if r.base >= cursor + len {
                break;
            }
            cursor = align_up(r.end(), PAGE_SIZE);
        }
        if cursor + len <= hi {
            Some(cursor)
        } else {
            None
        }
    }

    pub fn region_at(&self, addr: u64) -> Option<&Region> {
        let idx = self.regions.partition_point(|r| r.end() <= addr);
        self.regions.get(idx).filter(|r| r.contains(addr))
    }

    fn region_index(&self, addr: u64) -> Option<usize> {
        let idx = self.regions.partition_point(|r| r.end() <= addr);
        self.regions.get(idx).filter(|r| r.contains(addr)).map(|_| idx)
    }

    /// Whole-range access check: `addr..addr+width` must sit inside one
    /// region carrying the needed permission.
    fn check(&self, addr: u64, width: u64, need_w: bool, need_x: bool) -> Result<usize, Fault> {
        let oob = if need_w { FaultKind::OobWrite } else { FaultKind::OobRead };
        let idx = self.region_index(addr).ok_or(Fault::access(oob, addr))?;
        let r = &self.regions[idx];
        if addr + width > r.end() {
            return Err(Fault::access(oob, addr));
        }
        if need_x {
            if !r.perms.x {
                return Err(Fault::access(FaultKind::ExecNx, addr));
            }
        } else if need_w {
            if !r.perms.w {
                return Err(Fault::access(FaultKind::OobWrite, addr));
            }
        } else if !r.perms.r {
            return Err(Fault::access(FaultKind::OobRead, addr));
        }
        Ok(idx)
    }

    pub fn read(&self, addr: u64, width: u64) -> Result<u64, Fault> {
        debug_assert!(matches!(width, 1 | 2 | 4 | 8));
        let idx = self.check(addr, width, false, false)?;
        let r = &self.regions[idx];
        let off = (addr - r.base) as usize;
        let mut buf = [0u8; 8];
        buf[..width as usize].copy_from_slice(&r.bytes[off..off + width as usize]);
        Ok(u64::from_le_bytes(buf))
    }

    pub fn write(&mut self, addr: u64, width: u64, value: u64) -> Result<(), Fault> {
        debug_assert!(matches!(width, 1 | 2 | 4 | 8));
        let idx = self.check(addr, width, true, false)?;
        let r = &mut self.regions[idx];
        let off = (addr - r.base) as usize;
        r.bytes[off..off + width as usize].copy_from_slice(&value.to_le_bytes()[..width as usize]);
        r.mark_dirty(addr, width);
        Ok(())
    }

    /// Instruction fetch: executable permission plus 4-alignment.
    pub fn fetch(&self, addr: u64) -> Result<u32, Fault> {
        if addr % 4 != 0 {
            return Err(Fault::access(FaultKind::Unaligned, addr));
        }
        let idx = self.check(addr, 4, false, true)?;
        let r = &self.regions[idx];
        let off = (addr - r.base) as usize;
        Ok(u32::from_le_bytes(r.bytes[off..off + 4].try_into().unwrap()))
    }

    pub fn read_bytes(&self, addr: u64, len: u64) -> Result<Vec<u8>, Fault> {
        if len == 0 {
            return Ok(Vec::new());
        }
        let idx = self.check(addr, len, false, false)?;
        let r = &self.regions[idx];
        let off = (addr - r.base) as usize;
        Ok(r.bytes[off..off + len as usize].to_vec())
    }

    pub fn write_bytes(&mut self, addr: u64, bytes: &[u8]) -> Result<(), Fault> {
        if bytes.is_empty() {
            return Ok(());
        }
        let idx = self.check(addr, bytes.len() as u64, true, false)?;
        let r = &mut self.regions[idx];
        let off = (addr - r.base) as usize;
        r.bytes[off..off + bytes.len()].copy_from_slice(bytes);
        r.mark_dirty(addr, bytes.len() as u64);
        Ok(())
    }

    /// Read a NUL-terminated string, bounded to `max` bytes.
    pub fn read_cstr(&self, addr: u64, max: u64) -> Result<String, Fault> {
        let mut out = Vec::new();
        for i in 0..max {
            let b = self.read(addr + i, 1)? as u8;
            if b == 0 {
                break;
            }
            out.push(b);
        }
        Ok(String::from_utf8_lossy(&out).into_owned())
    }

    /// Direct byte write that ignores permissions; loader, rewriter and
    /// marshaling use. Still marks pages dirty so snapshot restore stays
    /// exact.
    pub fn poke(&mut self, addr: u64, bytes: &[u8]) -> Result<(), VasError> {
        let idx = self.region_index(addr).ok_or(VasError::NotMapped { base: addr })?;
        let r = &mut self.regions[idx];
        if addr + bytes.len() as u64 > r.end() {
            return Err(VasError::NotMapped { base: addr });
        }
        let off = (addr - r.base) as usize;
        r.bytes[off..off + bytes.len()].copy_from_slice(bytes);
        if !bytes.is_empty() {
            r.mark_dirty(addr, bytes.len() as u64);
        }
        Ok(())
    }

    pub fn peek(&self, addr: u64, len: u64) -> Option<&[u8]> {
        let r = self.region_at(addr)?;
        if addr + len > r.end() {
            return None;
        }
        let off = (addr - r.base) as usize;
        Some(&r.bytes[off..off + len as usize])
    }

    /// Hash of the full space contents and layout.
    pub fn content_hash(&self) -> u64 {
        let mut h = Fnv64::new();
        for r in &self.regions {
            h.write_u64(r.base);
            h.write_u64(r.len);
            h.write(&[r.perms.r as u8, r.perms.w as u8, r.perms.x as u8]);
            h.write(&r.bytes);
        }
        h.finish()
    }

    /// Hash over writable regions only: the part a run can change.
    pub fn writable_hash(&self) -> u64 {
        let mut h = Fnv64::new();
        for r in &self.regions {
            if r.perms.w {
                h.write_u64(r.base);
                h.write(&r.bytes);
            }
        }
        h.finish()
    }

    pub(crate) fn snapshot_writable(&mut self) -> Vec<(u64, Vec<u8>)> {
        let mut out = Vec::new();
        for r in &mut self.regions {
            if r.perms.w {
                out.push((r.base, r.bytes.clone()));
                r.clear_dirty();
            }
        }
        out
    }

    /// Copy back only pages dirtied since the matching snapshot was taken.
    pub(crate) fn restore_writable_dirty(&mut self, saved: &[(u64, Vec<u8>)]) {
        let mut si = 0;
        for r in &mut self.regions {
            if !r.perms.w {
                continue;
            }
            let (base, bytes) = &saved[si];
            debug_assert_eq!(*base, r.base);
            si += 1;
            let pages: Vec<u64> = r.dirty_pages().collect();
            for page in pages {
                let lo = (page * PAGE_SIZE) as usize;
                let hi = lo + PAGE_SIZE as usize;
                r.bytes[lo..hi].copy_from_slice(&bytes[lo..hi]);
            }
            r.clear_dirty();
        }
    }

    pub(crate) fn restore_writable_full(&mut self, saved: &[(u64, Vec<u8>)]) {
        let mut si = 0;
        for r in &mut self.regions {
            if !r.perms.w {
                continue;
            }
            let (base, bytes) = &saved[si];
            debug_assert_eq!(*base, r.base);
            si += 1;
            r.bytes.copy_from_slice(bytes);
            r.clear_dirty();
        }
    }

    pub(crate) fn region_meta(&self) -> Vec<(u64, u64, Perms, RegionKind)> {
        self.regions.iter().map(|r| (r.base, r.len, r.perms, r.kind)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space() -> VirtualAddressSpace {
        let mut vas = VirtualAddressSpace::new(WordWidth::W64);
        vas.map(0x40_0000, 0x2000, Perms::RX, RegionKind::Segment).unwrap();
        vas.map(0x40_2000, 0x1000, Perms::RW, RegionKind::Segment).unwrap();
        vas
    }

    #[test]
    fn overlap_rejected() {
        let mut vas = space();
        assert!(matches!(
            vas.map(0x40_1000, 0x2000, Perms::RW, RegionKind::Heap),
            Err(VasError::Overlap { .. })
        ));
    }

    #[test]
    fn read_below_base_is_oob() {
        let vas = space();
        let err = vas.read(0x40_0000 - 1, 1).unwrap_err();
        assert_eq!(err.kind, FaultKind::OobRead);
    }

    #[test]
    fn straddling_access_is_oob() {
        // 8-byte access crossing the last byte of a region fails even though
        // the next region is adjacent.
        let vas = space();
        let err = vas.read(0x40_1ffc, 8).unwrap_err();
        assert_eq!(err.kind, FaultKind::OobRead);
    }

    #[test]
    fn write_inside_rw_succeeds() {
        let mut vas = space();
        vas.write(0x40_2ff8, 8, 0xdead_beef_cafe_f00d).unwrap();
        assert_eq!(vas.read(0x40_2ff8, 8).unwrap(), 0xdead_beef_cafe_f00d);
    }

    #[test]
    fn fetch_from_rw_is_exec_nx() {
        let vas = space();
        assert_eq!(vas.fetch(0x40_2000).unwrap_err().kind, FaultKind::ExecNx);
    }

    #[test]
    fn misaligned_fetch_faults() {
        let vas = space();
        assert_eq!(vas.fetch(0x40_0002).unwrap_err().kind, FaultKind::Unaligned);
    }

    #[test]
    fn write_to_rx_faults() {
        let mut vas = space();
        assert_eq!(vas.write(0x40_0000, 4, 1).unwrap_err().kind, FaultKind::OobWrite);
    }

    #[test]
    fn find_free_skips_mappings() {
        let vas = space();
        assert_eq!(vas.find_free(0x1000, 0x40_0000, 0x50_0000), Some(0x40_3000));
        assert_eq!(vas.find_free(0x1000, 0x30_0000, 0x50_0000), Some(0x30_0000));
    }

    #[test]
    fn dirty_restore_roundtrip() {
        let mut vas = space();
        vas.write(0x40_2010, 8, 7).unwrap();
        let snap = vas.snapshot_writable();
        let h0 = vas.writable_hash();
        vas.write(0x40_2010, 8, 99).unwrap();
        vas.write(0x40_2800, 4, 1).unwrap();
        vas.restore_writable_dirty(&snap);
        assert_eq!(vas.writable_hash(), h0);
        assert_eq!(vas.read(0x40_2010, 8).unwrap(), 7);
    }

    #[test]
    fn w32_confinement() {
        let mut vas = VirtualAddressSpace::new(WordWidth::W32);
        // The final page holds the return-to-host sentinel and stays free.
        assert!(vas.map(0xffff_f000, 0x1000, Perms::RW, RegionKind::Heap).is_err());
        vas.map(0xfff0_0000, 0x1000, Perms::RW, RegionKind::Heap).unwrap();
    }
}
