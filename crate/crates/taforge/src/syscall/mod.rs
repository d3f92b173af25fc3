//! Emulated secure-world kernel services: per-TZOS syscall number tables and
//! the handler working set TAs actually use (read/write/close/ioctl/mmap/
//! open, memory helpers, randomness). Unknown numbers route to `unsupported`,
//! which logs and returns the profile's generic error code; the run goes on.
//!
//! Handlers touch nothing but the modeled address space and the device
//! model. Memory they move on behalf of the TA goes through the fault-
//! checked accessors, so a bad TA pointer surfaces as a run fault attributed
//! to the TA.
//!
//! `phys://` is exposed as a device path backed by one dedicated RW page
//! with cursor read/write semantics.

pub mod devices;

use std::collections::BTreeMap;

use crate::engine::{MachineState, SvcHook, SvcOrigin};
use crate::profile::{TzosName, TzosProfile};
use crate::util::PAGE_SIZE;
use crate::vas::{Fault, Perms, RegionKind};

pub use devices::{DeviceModel, ScriptEntry, ScriptError, ScriptResult, PHYS_PATH};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum HandlerId {
    Open,
    Read,
    Write,
    Close,
    Ioctl,
    Mmap,
    MemMove,
    Alloc,
    Free,
    GetRandom,
    Unsupported,
}

impl HandlerId {
    pub fn name(self) -> &'static str {
        match self {
            HandlerId::Open => "open",
            HandlerId::Read => "read",
            HandlerId::Write => "write",
            HandlerId::Close => "close",
            HandlerId::Ioctl => "ioctl",
            HandlerId::Mmap => "mmap",
            HandlerId::MemMove => "mem_move",
            HandlerId::Alloc => "alloc",
            HandlerId::Free => "free",
            HandlerId::GetRandom => "get_random",
            HandlerId::Unsupported => "unsupported",
        }
    }
}

/// Where the syscall number lives: a register (Teegris, and QSEE's generic
/// dispatch function) or the svc immediate itself (OP-TEE, Trusty).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NumberSource {
    Register(u8),
    Immediate,
}

#[derive(Debug, Clone)]
pub struct SyscallTable {
    pub profile: TzosName,
    pub number_source: NumberSource,
    pub arg_registers: Vec<u8>,
    pub entries: BTreeMap<u32, HandlerId>,
}

pub const TEEGRIS_NUM_REG: u8 = 8;
pub const QSEE_NUM_REG: u8 = 12;

impl SyscallTable {
    /// The four built-in tables deliberately reuse numbers with different
    /// meanings (e.g. 2 is `read` on OP-TEE but `close` on QSEE), so
    /// dispatch must consult only the active profile's table.
    pub fn builtin(profile: TzosName) -> SyscallTable {
        use HandlerId::*;
        let (number_source, base): (NumberSource, &[(u32, HandlerId)]) = match profile {
            TzosName::Optee => (
                NumberSource::Immediate,
                &[
                    (1, Open),
                    (2, Read),
                    (3, Write),
                    (4, Close),
                    (5, Ioctl),
                    (6, Mmap),
                    (7, MemMove),
                    (8, Alloc),
                    (9, Free),
                    (10, GetRandom),
                ],
            ),
            TzosName::Teegris => (
                NumberSource::Register(TEEGRIS_NUM_REG),
                &[
                    (0x20, Open),
                    (0x21, Read),
                    (0x22, Write),
                    (0x23, Close),
                    (0x24, Ioctl),
                    (0x25, Mmap),
                    (0x26, MemMove),
                    (0x27, Alloc),
                    (0x28, Free),
                    (0x29, GetRandom),
                ],
            ),
            TzosName::Qsee => (
                NumberSource::Register(QSEE_NUM_REG),
                &[
                    (1, Ioctl),
                    (2, Close),
                    (3, Open),
                    (4, Write),
                    (5, Read),
                    (6, Mmap),
                    (7, Alloc),
                    (8, GetRandom),
                    (9, MemMove),
                    (10, Free),
                ],
            ),
            TzosName::Trusty => (
                NumberSource::Immediate,
                &[
                    (0x30, Open),
                    (0x31, Read),
                    (0x32, Write),
                    (0x33, Close),
                    (0x34, Ioctl),
                    (0x35, Mmap),
                    (0x36, MemMove),
                    (0x37, Alloc),
                    (0x38, Free),
                    (0x39, GetRandom),
                ],
            ),
        };
        SyscallTable {
            profile,
            number_source,
            arg_registers: vec![0, 1, 2],
            entries: base.iter().copied().collect(),
        }
    }

    pub fn number_for(&self, handler: HandlerId) -> Option<u32> {
        self.entries.iter().find(|(_, h)| **h == handler).map(|(n, _)| *n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyscallRecord {
    pub number: u32,
    pub handler: HandlerId,
    pub ret: u64,
}

/// The emulated kernel a session talks to; implements the engine hook.
pub struct SyscallEmu {
    pub table: SyscallTable,
    pub devices: DeviceModel,
    pub log: Vec<SyscallRecord>,
    pub generic_error: u64,
    /// Low-address window for mmap/alloc placements.
    pub window: (u64, u64),
}

impl SyscallEmu {
    pub fn new(profile: &TzosProfile, devices: DeviceModel, window: (u64, u64)) -> SyscallEmu {
        SyscallEmu {
            table: SyscallTable::builtin(profile.syscall_table_id),
            devices,
            log: Vec::new(),
            generic_error: profile.generic_error_code,
            window,
        }
    }

    pub fn snapshot_devices(&self) -> DeviceModel {
        self.devices.clone()
    }

    pub fn restore_devices(&mut self, snap: &DeviceModel) {
        self.devices = snap.clone();
    }

    fn handler_for(&self, number: u32) -> HandlerId {
        self.table.entries.get(&number).copied().unwrap_or(HandlerId::Unsupported)
    }

    fn ensure_phys(&mut self, state: &mut MachineState) -> Option<u64> {
        if let Some(base) = self.devices.phys_base {
            return Some(base);
        }
        let base = state.vas.find_free(PAGE_SIZE, self.window.0, self.window.1)?;
        state.vas.map(base, PAGE_SIZE, Perms::RW, RegionKind::DeviceShm).ok()?;
        self.devices.phys_base = Some(base);
        Some(base)
    }

    fn do_open(&mut self, state: &mut MachineState, path_ptr: u64) -> Result<u64, Fault> {
        let path = state.vas.read_cstr(path_ptr, 256)?;
        if path == PHYS_PATH && self.devices.devices.contains_key(PHYS_PATH) {
            if self.ensure_phys(state).is_none() {
                return Ok(self.generic_error);
            }
        }
        Ok(self.devices.open(&path).unwrap_or(self.generic_error))
    }

    fn do_read(&mut self, state: &mut MachineState, fd: u64, buf: u64, n: u64) -> Result<u64, Fault> {
        if let Some(fd_state) = self.devices.fd(fd) {
            if fd_state.path == PHYS_PATH {
                let base = match self.devices.phys_base {
                    Some(b) => b,
                    None => return Ok(self.generic_error),
                };
                let cursor = fd_state.cursor;
                let avail = PAGE_SIZE.saturating_sub(cursor);
                let count = n.min(avail);
                let bytes = state.vas.read_bytes(base + cursor, count)?;
                state.vas.write_bytes(buf, &bytes)?;
                self.devices.fds.get_mut(&fd).unwrap().cursor += count;
                return Ok(count);
            }
        }
        match self.devices.next_scripted(fd) {
            ScriptResult::Entry(entry) => {
                let count = (entry.response.len() as u64).min(n);
                state.vas.write_bytes(buf, &entry.response[..count as usize])?;
                if entry.status != 0 {
                    Ok(entry.status as u64)
                } else {
                    Ok(count)
                }
            }
            ScriptResult::Exhausted => Ok(0),
            ScriptResult::PatternMiss | ScriptResult::BadFd => Ok(self.generic_error),
        }
    }

    fn do_write(
        &mut self,
        state: &mut MachineState,
        fd: u64,
        buf: u64,
        n: u64,
    ) -> Result<u64, Fault> {
        // Copy-in happens before any device effect; a bad TA buffer faults
        // here, attributed to the TA.
        let bytes = state.vas.read_bytes(buf, n)?;
        if let Some(fd_state) = self.devices.fd(fd) {
            if fd_state.path == PHYS_PATH {
                let base = match self.devices.phys_base {
                    Some(b) => b,
                    None => return Ok(self.generic_error),
                };
                let cursor = fd_state.cursor;
                let avail = PAGE_SIZE.saturating_sub(cursor);
                let count = n.min(avail);
                state.vas.write_bytes(base + cursor, &bytes[..count as usize])?;
                self.devices.fds.get_mut(&fd).unwrap().cursor += count;
                return Ok(count);
            }
        }
        if self.devices.record_write(fd, &bytes) {
            Ok(n)
        } else {
            Ok(self.generic_error)
        }
    }

    fn do_ioctl(
        &mut self,
        state: &mut MachineState,
        fd: u64,
        _code: u64,
        argp: u64,
    ) -> Result<u64, Fault> {
        match self.devices.next_scripted(fd) {
            ScriptResult::Entry(entry) => {
                if !entry.response.is_empty() {
                    state.vas.write_bytes(argp, &entry.response)?;
                }
                Ok(entry.status as u64)
            }
            _ => Ok(self.generic_error),
        }
    }

    fn do_mmap(&mut self, state: &mut MachineState, len: u64, prot: u64) -> u64 {
        if len == 0 {
            return 0;
        }
        let perms = Perms { r: prot & 1 != 0, w: prot & 2 != 0, x: prot & 4 != 0 };
        let Some(base) = state.vas.find_free(len, self.window.0, self.window.1) else {
            return 0;
        };
        let size = crate::util::align_up(len, PAGE_SIZE);
        match state.vas.map(base, size, perms, RegionKind::Heap) {
            Ok(()) => base,
            Err(_) => 0,
        }
    }

    fn do_mem_move(
        &mut self,
        state: &mut MachineState,
        dst: u64,
        src: u64,
        n: u64,
    ) -> Result<u64, Fault> {
        if n > 0 {
            let bytes = state.vas.read_bytes(src, n)?;
            state.vas.write_bytes(dst, &bytes)?;
        }
        Ok(dst)
    }

    fn do_alloc(&mut self, state: &mut MachineState, len: u64) -> u64 {
        if len == 0 {
            return 0;
        }
        self.do_mmap(state, len, 3)
    }

    fn do_free(&mut self, state: &mut MachineState, ptr: u64) -> u64 {
        let is_heap = state
            .vas
            .region_at(ptr)
            .map(|r| r.base == ptr && r.kind == RegionKind::Heap)
            .unwrap_or(false);
        if is_heap {
            state.vas.unmap(ptr).expect("checked above");
            0
        } else {
            self.generic_error
        }
    }

    fn do_get_random(&mut self, state: &mut MachineState, buf: u64, n: u64) -> Result<u64, Fault> {
        let mut bytes = Vec::with_capacity(n as usize);
        while (bytes.len() as u64) < n {
            bytes.extend_from_slice(&self.devices.next_random().to_le_bytes());
        }
        bytes.truncate(n as usize);
        state.vas.write_bytes(buf, &bytes)?;
        Ok(n)
    }
}

impl SvcHook for SyscallEmu {
    fn dispatch(&mut self, state: &mut MachineState, origin: SvcOrigin) -> Result<u64, Fault> {
        let number = match self.table.number_source {
            NumberSource::Register(r) => state.reg(r) as u32,
            NumberSource::Immediate => u32::from(origin.immediate),
        };
        let handler = self.handler_for(number);
        let arg = |i: usize| state.reg(self.table.arg_registers[i]);
        let (a0, a1, a2) = (arg(0), arg(1), arg(2));
        let ret = match handler {
            HandlerId::Open => self.do_open(state, a0)?,
            HandlerId::Read => self.do_read(state, a0, a1, a2)?,
            HandlerId::Write => self.do_write(state, a0, a1, a2)?,
            HandlerId::Close => {
                if self.devices.close(a0) {
                    0
                } else {
                    self.generic_error
                }
            }
            HandlerId::Ioctl => self.do_ioctl(state, a0, a1, a2)?,
            HandlerId::Mmap => self.do_mmap(state, a0, a1),
            HandlerId::MemMove => self.do_mem_move(state, a0, a1, a2)?,
            HandlerId::Alloc => self.do_alloc(state, a0),
            HandlerId::Free => self.do_free(state, a0),
            HandlerId::GetRandom => self.do_get_random(state, a0, a1)?,
            HandlerId::Unsupported => {
                log::debug!("unsupported syscall {number} at {:#x}", origin.site_addr);
                self.generic_error
            }
        };
        self.log.push(SyscallRecord { number, handler, ret });
        Ok(ret)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tables_reuse_numbers_with_different_meanings() {
        let optee = SyscallTable::builtin(TzosName::Optee);
        let qsee = SyscallTable::builtin(TzosName::Qsee);
        assert_eq!(optee.entries[&2], HandlerId::Read);
        assert_eq!(qsee.entries[&2], HandlerId::Close);
    }

    #[test]
    fn every_table_names_the_working_set() {
        for p in TzosName::ALL {
            let t = SyscallTable::builtin(p);
            for h in [
                HandlerId::Open,
                HandlerId::Read,
                HandlerId::Write,
                HandlerId::Close,
                HandlerId::Ioctl,
                HandlerId::Mmap,
                HandlerId::MemMove,
                HandlerId::Alloc,
                HandlerId::Free,
                HandlerId::GetRandom,
            ] {
                assert!(t.number_for(h).is_some(), "{p} missing {h:?}");
            }
        }
    }
}
