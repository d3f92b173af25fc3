//! Deterministic interpreter for rehosted TA code.
//!
//! Executes the fixed-width instruction set over a [`VirtualAddressSpace`],
//! emits a taken-branch trace through an address filter, detects memory
//! faults as run exits, and supports snapshot/restore for per-iteration
//! state reset. Calls follow the register convention (first 8 arguments in
//! r0..r7); a run ends when control reaches the return-to-host sentinel the
//! engine plants in the link register.
//!
//! Supervisor calls reach the installed [`SvcHook`] two ways: `direct-trap`
//! mode intercepts `svc` words natively, `rewritten` mode executes the
//! branch-to-trampoline sequence the rewriter installed and dispatches at
//! the trampoline's hook word. Around either dispatch the engine saves and
//! restores all general registers, the stack pointer and flags; only the
//! return register differs afterwards.

pub mod trace;

use crate::isa::{self, AluOp, Cond, Insn, WordWidth};
use crate::loader::LoadedImage;
use crate::rewriter::TrampolineTable;
use crate::util::Fnv64;
use crate::vas::{Fault, FaultKind, Perms, RegionKind, VirtualAddressSpace};

pub use trace::{BranchTrace, TraceEvent, TraceFilter, TraceKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Flags {
    pub n: bool,
    pub z: bool,
    pub c: bool,
    pub v: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Returned { value: u64 },
    Fault(Fault),
    BudgetExhausted,
}

impl ExitStatus {
    pub fn fault(&self) -> Option<&Fault> {
        match self {
            ExitStatus::Fault(f) => Some(f),
            _ => None,
        }
    }

    pub fn returned(&self) -> Option<u64> {
        match self {
            ExitStatus::Returned { value } => Some(*value),
            _ => None,
        }
    }
}

/// Identity of a dispatched supervisor call.
#[derive(Debug, Clone, Copy)]
pub struct SvcOrigin {
    pub site_addr: u64,
    pub immediate: u16,
}

/// Receiver for emulated syscalls. A returned `Fault` is attributed to the
/// TA (bad pointer handed to the kernel) and ends the run.
pub trait SvcHook {
    fn dispatch(&mut self, state: &mut MachineState, origin: SvcOrigin) -> Result<u64, Fault>;
}

/// Hook that answers every syscall with zero; for pure-engine tests.
pub struct NullHook;

impl SvcHook for NullHook {
    fn dispatch(&mut self, _state: &mut MachineState, _origin: SvcOrigin) -> Result<u64, Fault> {
        Ok(0)
    }
}

#[derive(Clone, Copy)]
pub enum ExecMode<'a> {
    DirectTrap,
    Rewritten(&'a TrampolineTable),
}

pub struct RunConfig<'a> {
    pub budget: u64,
    pub filter: &'a TraceFilter,
    pub mode: ExecMode<'a>,
}

#[derive(Debug, thiserror::Error)]
pub enum SnapshotError {
    #[error("snapshot mismatch: snapshot was taken from a different image")]
    Mismatch,
}

#[derive(Debug, Clone)]
pub struct Snapshot {
    fingerprint: u64,
    baseline: u64,
    layout_epoch: u64,
    regs: [u64; 31],
    sp: u64,
    pc: u64,
    flags: Flags,
    writable: Vec<(u64, Vec<u8>)>,
    region_meta: Vec<(u64, u64, Perms, RegionKind)>,
}

impl PartialEq for Snapshot {
    fn eq(&self, other: &Self) -> bool {
        self.fingerprint == other.fingerprint
            && self.regs == other.regs
            && self.sp == other.sp
            && self.pc == other.pc
            && self.flags == other.flags
            && self.writable == other.writable
            && self.region_meta == other.region_meta
    }
}

#[derive(Debug, Clone)]
pub struct MachineState {
    regs: [u64; 31],
    sp: u64,
    pub pc: u64,
    pub flags: Flags,
    pub width: WordWidth,
    pub vas: VirtualAddressSpace,
    pub instret: u64,
    pub stack_top: u64,
    fingerprint: u64,
    baseline: u64,
}

impl MachineState {
    /// Build an execution context over a copy of the image's address space.
    pub fn boot(image: &LoadedImage) -> MachineState {
        let vas = image.vas.clone();
        let fingerprint = {
            let mut h = Fnv64::new();
            h.write_u64(vas.content_hash());
            h.write_u64(image.word_width.bytes());
            h.finish()
        };
        MachineState {
            regs: [0; 31],
            sp: image.stack_top,
            pc: 0,
            flags: Flags::default(),
            width: image.word_width,
            vas,
            instret: 0,
            stack_top: image.stack_top,
            fingerprint,
            baseline: 0,
        }
    }

    pub fn reg(&self, r: u8) -> u64 {
        if r == isa::SP {
            self.sp
        } else {
            self.regs[r as usize]
        }
    }

    pub fn set_reg(&mut self, r: u8, v: u64) {
        let v = v & self.width.mask();
        if r == isa::SP {
            self.sp = v;
        } else {
            self.regs[r as usize] = v;
        }
    }

    pub fn sentinel(&self) -> u64 {
        self.width.sentinel()
    }

    /// Hash of the architectural state a TA can observe: registers, flags,
    /// pc and all writable memory. Deliberately excludes the instruction
    /// counter and read-only code so rewritten and direct-trap runs of the
    /// same program compare equal.
    pub fn state_hash(&self) -> u64 {
        let mut h = Fnv64::new();
        for r in self.regs {
            h.write_u64(r);
        }
        h.write_u64(self.sp);
        h.write_u64(self.pc);
        h.write(&[
            self.flags.n as u8,
            self.flags.z as u8,
            self.flags.c as u8,
            self.flags.v as u8,
        ]);
        h.write_u64(self.vas.writable_hash());
        h.finish()
    }

    /// Deep-copy capture of registers, flags and all writable regions.
    /// Read-only regions are shared with the live state, not copied. The
    /// capture becomes the dirty-tracking baseline.
    pub fn snapshot(&mut self) -> Snapshot {
        self.baseline += 1;
        Snapshot {
            fingerprint: self.fingerprint,
            baseline: self.baseline,
            layout_epoch: self.vas.layout_epoch,
            regs: self.regs,
            sp: self.sp,
            pc: self.pc,
            flags: self.flags,
            writable: self.vas.snapshot_writable(),
            region_meta: self.vas.region_meta(),
        }
    }

    /// Bring registers, writable memory and the region layout back to
    /// capture time. Restoring the current baseline touches only pages
    /// dirtied since the capture; anything else (layout changed by
    /// alloc/free/mmap, an older snapshot) takes the full path.
    pub fn restore(&mut self, snap: &Snapshot) -> Result<(), SnapshotError> {
        if snap.fingerprint != self.fingerprint {
            return Err(SnapshotError::Mismatch);
        }
        self.regs = snap.regs;
        self.sp = snap.sp;
        self.pc = snap.pc;
        self.flags = snap.flags;
        if snap.baseline == self.baseline && snap.layout_epoch == self.vas.layout_epoch {
            self.vas.restore_writable_dirty(&snap.writable);
        } else {
            self.reconcile_layout(snap);
            self.vas.restore_writable_full(&snap.writable);
            // The restored content is exactly the capture; future restores
            // of this snapshot may use the dirty path again.
            self.vas.layout_epoch = snap.layout_epoch;
            self.baseline = snap.baseline;
        }
        Ok(())
    }

    fn reconcile_layout(&mut self, snap: &Snapshot) {
        let wanted: std::collections::BTreeMap<u64, (u64, Perms, RegionKind)> = snap
            .region_meta
            .iter()
            .map(|&(base, len, perms, kind)| (base, (len, perms, kind)))
            .collect();
        let current = self.vas.region_meta();
        for (base, len, perms, _kind) in &current {
            match wanted.get(base) {
                Some((wlen, wperms, _)) if wlen == len && wperms == perms => {}
                _ => {
                    self.vas.unmap(*base).expect("region listed by meta");
                }
            }
        }
        let have: std::collections::BTreeMap<u64, (u64, Perms, RegionKind)> = self
            .vas
            .region_meta()
            .into_iter()
            .map(|(base, len, perms, kind)| (base, (len, perms, kind)))
            .collect();
        for (&base, &(len, perms, kind)) in &wanted {
            if !have.contains_key(&base) {
                self.vas.map(base, len, perms, kind).expect("snapshot layout is consistent");
            }
        }
    }

    fn mask(&self, v: u64) -> u64 {
        v & self.width.mask()
    }

    fn set_cmp_flags(&mut self, a: u64, b: u64) {
        let bits = match self.width {
            WordWidth::W32 => 32,
            WordWidth::W64 => 64,
        };
        let a = self.mask(a);
        let b = self.mask(b);
        let result = self.mask(a.wrapping_sub(b));
        let msb = 1u64 << (bits - 1);
        self.flags.n = result & msb != 0;
        self.flags.z = result == 0;
        self.flags.c = a >= b;
        self.flags.v = ((a ^ b) & (a ^ result)) & msb != 0;
    }

    fn cond_holds(&self, cond: Cond) -> bool {
        let f = self.flags;
        match cond {
            Cond::Eq => f.z,
            Cond::Ne => !f.z,
            Cond::Lt => f.n != f.v,
            Cond::Ge => f.n == f.v,
            Cond::Gt => !f.z && f.n == f.v,
            Cond::Le => f.z || f.n != f.v,
            Cond::Lo => !f.c,
            Cond::Hs => f.c,
            Cond::Hi => f.c && !f.z,
            Cond::Ls => !f.c || f.z,
        }
    }
}

fn alu(op: AluOp, a: u64, b: u64, width: WordWidth) -> Result<u64, FaultKind> {
    let mask = width.mask();
    let bits = if width == WordWidth::W32 { 32 } else { 64 };
    let a = a & mask;
    let b = b & mask;
    let v = match op {
        AluOp::Add => a.wrapping_add(b),
        AluOp::Sub => a.wrapping_sub(b),
        AluOp::And => a & b,
        AluOp::Orr => a | b,
        AluOp::Eor => a ^ b,
        AluOp::Mul => a.wrapping_mul(b),
        AluOp::Udiv => {
            if b == 0 {
                return Err(FaultKind::DivZero);
            }
            a / b
        }
        AluOp::Sdiv => {
            if b == 0 {
                return Err(FaultKind::DivZero);
            }
            let (sa, sb) = if width == WordWidth::W32 {
                (a as u32 as i32 as i64, b as u32 as i32 as i64)
            } else {
                (a as i64, b as i64)
            };
            sa.wrapping_div(sb) as u64
        }
        AluOp::Lsl => a.wrapping_shl((b & (bits - 1)) as u32),
        AluOp::Lsr => a.wrapping_shr((b & (bits - 1)) as u32),
        AluOp::Asr => {
            let sh = (b & (bits - 1)) as u32;
            if width == WordWidth::W32 {
                ((a as u32 as i32) >> sh) as u32 as u64
            } else {
                ((a as i64) >> sh) as u64
            }
        }
    };
    Ok(v & mask)
}

/// Execute `entry(args...)` until the sentinel return, a fault, or budget
/// exhaustion. Registers are cleared, arguments go to r0.., the stack
/// pointer resets to the image's stack top and the link register takes the
/// sentinel. Taken control transfers passing the filter are recorded.
pub fn call(
    state: &mut MachineState,
    hook: &mut dyn SvcHook,
    entry: u64,
    args: &[u64],
    cfg: &RunConfig,
) -> (ExitStatus, BranchTrace) {
    debug_assert!(cfg.budget > 0);
    debug_assert!(args.len() <= 8);
    let sentinel = state.sentinel();
    state.regs = [0; 31];
    for (i, &a) in args.iter().enumerate() {
        state.set_reg(i as u8, a);
    }
    state.sp = state.stack_top;
    state.set_reg(isa::LR, sentinel);
    state.pc = entry;
    state.flags = Flags::default();
    state.instret = 0;

    let mut trace = BranchTrace::new();
    let passes = |addr: u64| addr == sentinel || cfg.filter.passes(addr);
    let record = |trace: &mut BranchTrace, source: u64, target: u64, kind: TraceKind| {
        if passes(source) && passes(target) {
            trace.events.push(TraceEvent { source, target, kind });
        }
    };
    record(&mut trace, sentinel, entry, TraceKind::Call);

    loop {
        if state.pc == sentinel {
            return (ExitStatus::Returned { value: state.reg(0) }, trace);
        }
        if state.instret >= cfg.budget {
            return (ExitStatus::BudgetExhausted, trace);
        }
        let pc = state.pc;
        let word = match state.vas.fetch(pc) {
            Ok(w) => w,
            Err(mut f) => {
                f.pc = pc;
                return (ExitStatus::Fault(f), trace);
            }
        };
        let insn = match isa::decode(word) {
            Some(i) => i,
            None => {
                return (
                    ExitStatus::Fault(Fault { kind: FaultKind::IllegalInsn, pc, access_addr: None }),
                    trace,
                )
            }
        };
        state.instret += 1;
        let mut next = pc.wrapping_add(4) & state.width.mask();

        macro_rules! fault {
            ($f:expr) => {{
                let mut f = $f;
                f.pc = pc;
                return (ExitStatus::Fault(f), trace);
            }};
        }

        match insn {
            Insn::AluReg { op, rd, rn, rm } => {
                match alu(op, state.reg(rn), state.reg(rm), state.width) {
                    Ok(v) => state.set_reg(rd, v),
                    Err(kind) => fault!(Fault { kind, pc, access_addr: None }),
                }
            }
            Insn::AluImm { op, rd, rn, imm } => {
                match alu(op, state.reg(rn), u64::from(imm), state.width) {
                    Ok(v) => state.set_reg(rd, v),
                    Err(kind) => fault!(Fault { kind, pc, access_addr: None }),
                }
            }
            Insn::ShiftImm { op, rd, rn, amount } => {
                match alu(op, state.reg(rn), u64::from(amount), state.width) {
                    Ok(v) => state.set_reg(rd, v),
                    Err(kind) => fault!(Fault { kind, pc, access_addr: None }),
                }
            }
            Insn::Movz { rd, imm, hw } => {
                state.set_reg(rd, u64::from(imm) << (16 * hw));
            }
            Insn::Movk { rd, imm, hw } => {
                let shift = 16 * u32::from(hw);
                let keep = !(0xffffu64 << shift);
                state.set_reg(rd, (state.reg(rd) & keep) | (u64::from(imm) << shift));
            }
            Insn::MovReg { rd, rn } => state.set_reg(rd, state.reg(rn)),
            Insn::CmpReg { rn, rm } => state.set_cmp_flags(state.reg(rn), state.reg(rm)),
            Insn::CmpImm { rn, imm } => state.set_cmp_flags(state.reg(rn), u64::from(imm)),
            Insn::B { offset } => {
                let target = state.mask(pc.wrapping_add_signed(i64::from(offset) * 4));
                record(&mut trace, pc, target, TraceKind::Uncond);
                next = target;
            }
            Insn::Bcond { cond, offset } => {
                if state.cond_holds(cond) {
                    let target = state.mask(pc.wrapping_add_signed(i64::from(offset) * 4));
                    record(&mut trace, pc, target, TraceKind::CondTaken);
                    next = target;
                }
            }
            Insn::Bl { offset } => {
                let target = state.mask(pc.wrapping_add_signed(i64::from(offset) * 4));
                state.set_reg(isa::LR, pc.wrapping_add(4));
                record(&mut trace, pc, target, TraceKind::Call);
                next = target;
            }
            Insn::Br { rn } => {
                let target = state.mask(state.reg(rn));
                record(&mut trace, pc, target, TraceKind::Uncond);
                next = target;
            }
            Insn::Blr { rn } => {
                let target = state.mask(state.reg(rn));
                state.set_reg(isa::LR, pc.wrapping_add(4));
                record(&mut trace, pc, target, TraceKind::Call);
                next = target;
            }
            Insn::Ret { rn } => {
                let target = state.mask(state.reg(rn));
                record(&mut trace, pc, target, TraceKind::Ret);
                next = target;
            }
            Insn::Cbz { rt, offset } => {
                if state.mask(state.reg(rt)) == 0 {
                    let target = state.mask(pc.wrapping_add_signed(i64::from(offset) * 4));
                    record(&mut trace, pc, target, TraceKind::CondTaken);
                    next = target;
                }
            }
            Insn::Cbnz { rt, offset } => {
                if state.mask(state.reg(rt)) != 0 {
                    let target = state.mask(pc.wrapping_add_signed(i64::from(offset) * 4));
                    record(&mut trace, pc, target, TraceKind::CondTaken);
                    next = target;
                }
            }
            Insn::Adr { rd, offset } => {
                state.set_reg(rd, pc.wrapping_add_signed(i64::from(offset) * 4));
            }
            Insn::Ldr { size, rt, rn, offset } => {
                let addr = state.mask(state.reg(rn).wrapping_add_signed(i64::from(offset)));
                match state.vas.read(addr, size.bytes()) {
                    Ok(v) => state.set_reg(rt, v),
                    Err(f) => fault!(f),
                }
            }
            Insn::Str { size, rt, rn, offset } => {
                let addr = state.mask(state.reg(rn).wrapping_add_signed(i64::from(offset)));
                if let Err(f) = state.vas.write(addr, size.bytes(), state.reg(rt)) {
                    fault!(f);
                }
            }
            Insn::Svc { imm } => {
                // Direct trap; in rewritten mode this only happens for a
                // site the rewriter did not patch, and behaves identically.
                let origin = SvcOrigin { site_addr: pc, immediate: imm };
                match dispatch_with_context(state, hook, origin) {
                    Ok(()) => record(&mut trace, pc, pc.wrapping_add(4), TraceKind::Trap),
                    Err(f) => fault!(f),
                }
            }
            Insn::Hcall { .. } => {
                let site = match cfg.mode {
                    ExecMode::Rewritten(table) => table.site_for_hook(pc),
                    ExecMode::DirectTrap => None,
                };
                match site {
                    Some(site) => {
                        let origin =
                            SvcOrigin { site_addr: site.address, immediate: site.immediate };
                        if let Err(f) = dispatch_with_context(state, hook, origin) {
                            fault!(f);
                        }
                        // Falls through to the trampoline's branch-back word.
                    }
                    None => fault!(Fault { kind: FaultKind::IllegalInsn, pc, access_addr: None }),
                }
            }
            Insn::Nop => {}
        }
        state.pc = next;
    }
}

/// Save the register context, run the hook, restore everything except the
/// return register.
fn dispatch_with_context(
    state: &mut MachineState,
    hook: &mut dyn SvcHook,
    origin: SvcOrigin,
) -> Result<(), Fault> {
    let regs = state.regs;
    let sp = state.sp;
    let flags = state.flags;
    let result = hook.dispatch(state, origin);
    state.regs = regs;
    state.sp = sp;
    state.flags = flags;
    let ret = result?;
    state.set_reg(0, ret);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::{AluOp, Insn, MemSize};
    use crate::vas::{Perms, RegionKind};

    fn asm_into(vas: &mut VirtualAddressSpace, base: u64, insns: &[Insn]) {
        let bytes: Vec<u8> = insns.iter().flat_map(|i| isa::encode(i).to_le_bytes()).collect();
        vas.poke(base, &bytes).unwrap();
    }

    fn mini_state(insns: &[Insn]) -> MachineState {
        let mut vas = VirtualAddressSpace::new(WordWidth::W64);
        vas.map(0x40_0000, 0x1000, Perms::RX, RegionKind::Segment).unwrap();
        vas.map(0x40_1000, 0x1000, Perms::RW, RegionKind::Segment).unwrap();
        vas.map(0x50_0000, 0x4000, Perms::RW, RegionKind::Stack).unwrap();
        asm_into(&mut vas, 0x40_0000, insns);
        MachineState {
            regs: [0; 31],
            sp: 0x50_4000,
            pc: 0,
            flags: Flags::default(),
            width: WordWidth::W64,
            vas,
            instret: 0,
            stack_top: 0x50_4000,
            fingerprint: 1,
            baseline: 0,
        }
    }

    fn run(state: &mut MachineState, budget: u64) -> (ExitStatus, BranchTrace) {
        let filter = TraceFilter::All;
        let cfg = RunConfig { budget, filter: &filter, mode: ExecMode::DirectTrap };
        call(state, &mut NullHook, 0x40_0000, &[], &cfg)
    }

    #[test]
    fn immediate_return_traces_entry_call_and_final_ret() {
        let mut st = mini_state(&[
            Insn::Movz { rd: 0, imm: 0, hw: 0 },
            Insn::Ret { rn: isa::LR },
        ]);
        let (exit, trace) = run(&mut st, 100);
        assert_eq!(exit, ExitStatus::Returned { value: 0 });
        assert_eq!(trace.events.len(), 2);
        assert_eq!(trace.events[0].kind, TraceKind::Call);
        assert_eq!(trace.events[0].target, 0x40_0000);
        assert_eq!(trace.events[1].kind, TraceKind::Ret);
        assert_eq!(trace.events[1].target, st.sentinel());
    }

    #[test]
    fn budget_exhaustion_is_exact() {
        // Infinite loop: b .
        let mut st = mini_state(&[Insn::B { offset: 0 }]);
        let (exit, _) = run(&mut st, 7);
        assert_eq!(exit, ExitStatus::BudgetExhausted);
        assert_eq!(st.instret, 7);
    }

    #[test]
    fn div_zero_faults() {
        let mut st = mini_state(&[
            Insn::Movz { rd: 1, imm: 4, hw: 0 },
            Insn::AluReg { op: AluOp::Udiv, rd: 0, rn: 1, rm: 2 },
        ]);
        let (exit, _) = run(&mut st, 100);
        let f = exit.fault().unwrap();
        assert_eq!(f.kind, FaultKind::DivZero);
        assert_eq!(f.pc, 0x40_0004);
    }

    #[test]
    fn store_out_of_bounds_faults_with_access_addr() {
        let mut st = mini_state(&[
            Insn::Movz { rd: 1, imm: 0, hw: 0 },
            Insn::Movk { rd: 1, imm: 0x40, hw: 1 }, // r1 = 0x400000
            Insn::Str { size: MemSize::B1, rt: 0, rn: 1, offset: -1 },
        ]);
        let (exit, _) = run(&mut st, 100);
        let f = exit.fault().unwrap();
        assert_eq!(f.kind, FaultKind::OobWrite);
        assert_eq!(f.access_addr, Some(0x3f_ffff));
    }

    #[test]
    fn determinism_two_fresh_states() {
        let prog = [
            Insn::Movz { rd: 1, imm: 3, hw: 0 },
            Insn::Movz { rd: 2, imm: 4, hw: 0 },
            Insn::AluReg { op: AluOp::Mul, rd: 0, rn: 1, rm: 2 },
            Insn::CmpImm { rn: 0, imm: 12 },
            Insn::Bcond { cond: Cond::Eq, offset: 2 },
            Insn::Movz { rd: 0, imm: 99, hw: 0 },
            Insn::Ret { rn: isa::LR },
        ];
        let mut a = mini_state(&prog);
        let mut b = mini_state(&prog);
        let (ea, ta) = run(&mut a, 100);
        let (eb, tb) = run(&mut b, 100);
        assert_eq!(ea, ExitStatus::Returned { value: 12 });
        assert_eq!(ea, eb);
        assert_eq!(ta, tb);
        assert_eq!(a.state_hash(), b.state_hash());
    }

    #[test]
    fn snapshot_restore_roundtrip_is_identity() {
        let mut st = mini_state(&[Insn::Ret { rn: isa::LR }]);
        st.vas.write(0x40_1000, 8, 0x1111).unwrap();
        let snap = st.snapshot();
        let h0 = st.state_hash();
        st.vas.write(0x40_1000, 8, 0x2222).unwrap();
        st.set_reg(5, 77);
        st.restore(&snap).unwrap();
        assert_eq!(st.state_hash(), h0);
        assert_eq!(st.vas.read(0x40_1000, 8).unwrap(), 0x1111);
        let snap2 = st.snapshot();
        assert_eq!(snap, snap2);
    }

    #[test]
    fn restore_rejects_foreign_snapshot() {
        let mut a = mini_state(&[Insn::Ret { rn: isa::LR }]);
        let mut b = mini_state(&[Insn::Nop, Insn::Ret { rn: isa::LR }]);
        b.fingerprint = 2;
        let snap = a.snapshot();
        assert!(b.restore(&snap).is_err());
    }

    #[test]
    fn snapshot_survives_layout_changes() {
        let mut st = mini_state(&[Insn::Ret { rn: isa::LR }]);
        let snap = st.snapshot();
        let h0 = st.state_hash();
        st.vas.map(0x60_0000, 0x1000, Perms::RW, RegionKind::Heap).unwrap();
        st.vas.write(0x60_0000, 8, 5).unwrap();
        st.restore(&snap).unwrap();
        assert_eq!(st.state_hash(), h0);
        assert!(st.vas.region_at(0x60_0000).is_none());
        // And the reverse: a region unmapped after capture comes back.
        let snap2 = st.snapshot();
        let h2 = st.state_hash();
        st.vas.unmap(0x40_1000).unwrap();
        st.restore(&snap2).unwrap();
        assert_eq!(st.state_hash(), h2);
        assert!(st.vas.region_at(0x40_1000).is_some());
    }

    #[test]
    fn w32_truncates_addresses_and_registers() {
        let mut vas = VirtualAddressSpace::new(WordWidth::W32);
        vas.map(0x40_0000, 0x1000, Perms::RX, RegionKind::Segment).unwrap();
        vas.map(0x50_0000, 0x1000, Perms::RW, RegionKind::Stack).unwrap();
        asm_into(
            &mut vas,
            0x40_0000,
            &[
                Insn::Movz { rd: 0, imm: 0xffff, hw: 3 },
                Insn::Ret { rn: isa::LR },
            ],
        );
        let mut st = MachineState {
            regs: [0; 31],
            sp: 0x50_1000,
            pc: 0,
            flags: Flags::default(),
            width: WordWidth::W32,
            vas,
            instret: 0,
            stack_top: 0x50_1000,
            fingerprint: 1,
            baseline: 0,
        };
        let filter = TraceFilter::All;
        let cfg = RunConfig { budget: 10, filter: &filter, mode: ExecMode::DirectTrap };
        let (exit, _) = call(&mut st, &mut NullHook, 0x40_0000, &[], &cfg);
        // The hw=3 chunk is masked away in 32-bit mode.
        assert_eq!(exit, ExitStatus::Returned { value: 0 });
    }
}
