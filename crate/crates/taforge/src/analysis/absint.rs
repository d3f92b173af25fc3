//! Per-function forward abstract interpretation: a small value lattice
//! tracking constants, parameters, command-id taint, stack slots and
//! memory-derived values. This is the substrate for command-id enumeration
//! (taint filtering), dependency recovery (helper-call arguments, stored
//! descriptors) and branch classification (operand provenance).

use std::collections::{BTreeMap, VecDeque};

use crate::isa::{AluOp, Insn, SP};

use super::cfg::{Cfg, EdgeKind, Terminator};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AbsVal {
    /// Unknown, but not known to come from memory.
    Top,
    Const(u64),
    /// Incoming argument register i, unmodified.
    Param(u8),
    /// Derived from the command-id entry parameter.
    Tainted,
    /// The request pointer (QSEE convention) plus a byte delta.
    ReqPtr(i64),
    /// Stack pointer plus a byte delta from function entry.
    StackRef(i64),
    /// Return value of the call at this site.
    CallRet(u64),
    /// Loaded from this constant address.
    Loaded(u64),
    /// Loaded through an untracked pointer, or derived from such a load.
    MemDerived,
}

impl AbsVal {
    pub fn from_memory(&self) -> bool {
        matches!(self, AbsVal::Loaded(_) | AbsVal::MemDerived)
    }

    pub fn tainted(&self) -> bool {
        matches!(self, AbsVal::Tainted)
    }

    pub fn const_value(&self) -> Option<u64> {
        match self {
            AbsVal::Const(c) => Some(*c),
            _ => None,
        }
    }

    fn join(&self, other: &AbsVal) -> AbsVal {
        if self == other {
            return self.clone();
        }
        if self.tainted() || other.tainted() {
            return AbsVal::Tainted;
        }
        if self.from_memory() && other.from_memory() {
            return AbsVal::MemDerived;
        }
        AbsVal::Top
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AbsState {
    /// r0..r30 then sp at index 31.
    pub regs: Vec<AbsVal>,
    pub stack: BTreeMap<i64, AbsVal>,
}

impl AbsState {
    fn entry(seed: &BTreeMap<u8, AbsVal>) -> AbsState {
        let mut regs = vec![AbsVal::Top; 32];
        for i in 0..8u8 {
            regs[i as usize] = AbsVal::Param(i);
        }
        for (&r, v) in seed {
            regs[r as usize] = v.clone();
        }
        regs[SP as usize] = AbsVal::StackRef(0);
        AbsState { regs, stack: BTreeMap::new() }
    }

    fn join_with(&mut self, other: &AbsState) -> bool {
        let mut changed = false;
        for i in 0..32 {
            let joined = self.regs[i].join(&other.regs[i]);
            if joined != self.regs[i] {
                self.regs[i] = joined;
                changed = true;
            }
        }
        // Slot intersection: keep only agreeing entries.
        let keys: Vec<i64> = self.stack.keys().copied().collect();
        for k in keys {
            match other.stack.get(&k) {
                Some(v) => {
                    let joined = self.stack[&k].join(v);
                    if joined != self.stack[&k] {
                        self.stack.insert(k, joined);
                        changed = true;
                    }
                }
                None => {
                    self.stack.remove(&k);
                    changed = true;
                }
            }
        }
        changed
    }

    pub fn reg(&self, r: u8) -> &AbsVal {
        &self.regs[r as usize]
    }

    fn set_reg(&mut self, r: u8, v: AbsVal) {
        self.regs[r as usize] = v;
    }
}

#[derive(Debug, Clone)]
pub struct CompareEvent {
    pub addr: u64,
    pub block: u64,
    pub lhs: AbsVal,
    pub rhs: AbsVal,
}

#[derive(Debug, Clone)]
pub struct CallEvent {
    pub addr: u64,
    pub block: u64,
    pub target: Option<u64>,
    pub args: Vec<AbsVal>,
}

#[derive(Debug, Clone)]
pub struct StoreEvent {
    pub addr: u64,
    pub block: u64,
    pub target: u64,
    pub value: AbsVal,
    pub width: u64,
}

#[derive(Debug, Default)]
pub struct FnAnalysis {
    pub entry: u64,
    pub block_entry: BTreeMap<u64, AbsState>,
    pub compares: Vec<CompareEvent>,
    pub calls: Vec<CallEvent>,
    pub global_stores: Vec<StoreEvent>,
}

impl FnAnalysis {
    /// Value a register holds just before the instruction at `addr`,
    /// derived by re-simulating its block from the recorded entry state.
    pub fn value_before(&self, cfg: &Cfg, addr: u64, reg: u8) -> AbsVal {
        let Some(block) = cfg.block_containing(addr) else {
            return AbsVal::Top;
        };
        let Some(entry) = self.block_entry.get(&block.start) else {
            return AbsVal::Top;
        };
        let mut state = entry.clone();
        for (ia, insn) in &block.insns {
            if *ia == addr {
                break;
            }
            step(&mut state, *ia, insn, &mut Sink::default());
        }
        state.reg(reg).clone()
    }
}

#[derive(Default)]
struct Sink {
    compares: Vec<(u64, AbsVal, AbsVal)>,
    calls: Vec<(u64, Option<u64>, Vec<AbsVal>)>,
    stores: Vec<(u64, u64, AbsVal, u64)>,
}

fn binop(op: AluOp, a: &AbsVal, b: &AbsVal) -> AbsVal {
    use AbsVal::*;
    // Pointer-ish arithmetic first.
    match (op, a, b) {
        (AluOp::Add, StackRef(d), Const(c)) | (AluOp::Add, Const(c), StackRef(d)) => {
            return StackRef(d.wrapping_add(*c as i64))
        }
        (AluOp::Sub, StackRef(d), Const(c)) => return StackRef(d.wrapping_sub(*c as i64)),
        (AluOp::Add, ReqPtr(d), Const(c)) | (AluOp::Add, Const(c), ReqPtr(d)) => {
            return ReqPtr(d.wrapping_add(*c as i64))
        }
        (AluOp::Sub, ReqPtr(d), Const(c)) => return ReqPtr(d.wrapping_sub(*c as i64)),
        _ => {}
    }
    if let (Const(x), Const(y)) = (a, b) {
        let v = match op {
            AluOp::Add => x.wrapping_add(*y),
            AluOp::Sub => x.wrapping_sub(*y),
            AluOp::And => x & y,
            AluOp::Orr => x | y,
            AluOp::Eor => x ^ y,
            AluOp::Mul => x.wrapping_mul(*y),
            AluOp::Udiv => {
                if *y == 0 {
                    return Top;
                }
                x / y
            }
            AluOp::Sdiv => {
                if *y == 0 {
                    return Top;
                }
                ((*x as i64).wrapping_div(*y as i64)) as u64
            }
            AluOp::Lsl => x.wrapping_shl(*y as u32),
            AluOp::Lsr => x.wrapping_shr(*y as u32),
            AluOp::Asr => ((*x as i64) >> (*y & 63)) as u64,
        };
        return Const(v);
    }
    if a.tainted() || b.tainted() {
        return Tainted;
    }
    if a.from_memory() || b.from_memory() {
        return MemDerived;
    }
    Top
}

fn step(state: &mut AbsState, addr: u64, insn: &Insn, sink: &mut Sink) {
    match insn {
        Insn::AluReg { op, rd, rn, rm } => {
            let v = binop(*op, state.reg(*rn), state.reg(*rm));
            state.set_reg(*rd, v);
        }
        Insn::AluImm { op, rd, rn, imm } => {
            let v = binop(*op, state.reg(*rn), &AbsVal::Const(u64::from(*imm)));
            state.set_reg(*rd, v);
        }
        Insn::ShiftImm { op, rd, rn, amount } => {
            let v = binop(*op, state.reg(*rn), &AbsVal::Const(u64::from(*amount)));
            state.set_reg(*rd, v);
        }
        Insn::Movz { rd, imm, hw } => {
            state.set_reg(*rd, AbsVal::Const(u64::from(*imm) << (16 * hw)));
        }
        Insn::Movk { rd, imm, hw } => {
            let v = match state.reg(*rd) {
                AbsVal::Const(base) => {
                    let keep = base & !(0xffffu64 << (16 * hw));
                    AbsVal::Const(keep | (u64::from(*imm) << (16 * hw)))
                }
                _ => AbsVal::Top,
            };
            state.set_reg(*rd, v);
        }
        Insn::MovReg { rd, rn } => {
            let v = state.reg(*rn).clone();
            state.set_reg(*rd, v);
        }
        Insn::Adr { rd, offset } => {
            state.set_reg(*rd, AbsVal::Const(addr.wrapping_add_signed(i64::from(*offset) * 4)));
        }
        Insn::CmpReg { rn, rm } => {
            sink.compares.push((addr, state.reg(*rn).clone(), state.reg(*rm).clone()));
        }
        Insn::CmpImm { rn, imm } => {
            sink.compares.push((
                addr,
                state.reg(*rn).clone(),
                AbsVal::Const(u64::from(*imm)),
            ));
        }
        Insn::Ldr { rt, rn, offset, .. } => {
            let v = match state.reg(*rn) {
                AbsVal::StackRef(d) => state
                    .stack
                    .get(&(d.wrapping_add(i64::from(*offset))))
                    .cloned()
                    .unwrap_or(AbsVal::Top),
                AbsVal::ReqPtr(d) => {
                    // The command id sits at request offset zero; anything
                    // else behind the request pointer is plain memory.
                    if d.wrapping_add(i64::from(*offset)) == 0 {
                        AbsVal::Tainted
                    } else {
                        AbsVal::MemDerived
                    }
                }
                AbsVal::Const(a) => AbsVal::Loaded(a.wrapping_add_signed(i64::from(*offset))),
                _ => AbsVal::MemDerived,
            };
            state.set_reg(*rt, v);
        }
        Insn::Str { rt, rn, offset, size } => match state.reg(*rn) {
            AbsVal::StackRef(d) => {
                let slot = d.wrapping_add(i64::from(*offset));
                let v = state.reg(*rt).clone();
                state.stack.insert(slot, v);
            }
            AbsVal::Const(a) => {
                sink.stores.push((
                    addr,
                    a.wrapping_add_signed(i64::from(*offset)),
                    state.reg(*rt).clone(),
                    size.bytes(),
                ));
            }
            _ => {}
        },
        Insn::Bl { .. } | Insn::Blr { .. } => {
            // Calls return in r0 and burn the scratch range; generated
            // callees preserve the argument registers r1..r7, so values
            // parked there survive helper calls.
            for r in 8..19u8 {
                state.set_reg(r, AbsVal::Top);
            }
            state.set_reg(0, AbsVal::CallRet(addr));
        }
        Insn::Svc { .. } | Insn::Hcall { .. } => {
            state.set_reg(0, AbsVal::CallRet(addr));
        }
        Insn::B { .. }
        | Insn::Bcond { .. }
        | Insn::Br { .. }
        | Insn::Ret { .. }
        | Insn::Cbz { .. }
        | Insn::Cbnz { .. }
        | Insn::Nop => {}
    }
}

/// Run the abstract interpreter over one function to a fixpoint, then
/// collect compare/call/store events with the settled states.
pub fn analyze_fn(cfg: &Cfg, entry: u64, seed: &BTreeMap<u8, AbsVal>) -> FnAnalysis {
    let mut out = FnAnalysis { entry, ..Default::default() };
    let Some(blocks) = cfg.functions.get(&entry) else {
        return out;
    };
    let Some(entry_block) = cfg.block_containing(entry).map(|b| b.start) else {
        return out;
    };

    out.block_entry.insert(entry_block, AbsState::entry(seed));
    let mut work: VecDeque<u64> = VecDeque::from([entry_block]);
    let mut visits = 0usize;
    while let Some(b) = work.pop_front() {
        visits += 1;
        if visits > blocks.len() * 64 + 256 {
            break;
        }
        let Some(block) = cfg.blocks.get(&b) else { continue };
        let mut state = out.block_entry[&b].clone();
        let mut sink = Sink::default();
        for (addr, insn) in &block.insns {
            step(&mut state, *addr, insn, &mut sink);
        }
        for (dst_start, kind) in successors(cfg, b) {
            if kind == EdgeKind::Call || !blocks.contains(&dst_start) {
                continue;
            }
            match out.block_entry.get_mut(&dst_start) {
                Some(existing) => {
                    if existing.join_with(&state) {
                        work.push_back(dst_start);
                    }
                }
                None => {
                    out.block_entry.insert(dst_start, state.clone());
                    work.push_back(dst_start);
                }
            }
        }
    }

    // Final event collection with settled entry states.
    for (&b, entry_state) in &out.block_entry {
        let Some(block) = cfg.blocks.get(&b) else { continue };
        let mut state = entry_state.clone();
        let mut sink = Sink::default();
        for (addr, insn) in &block.insns {
            if matches!(insn, Insn::Bl { .. } | Insn::Blr { .. }) {
                // Argument values at the call site, before the clobber.
                let args = (0..6).map(|r| state.reg(r).clone()).collect();
                sink.calls.push((*addr, None, args));
            }
            step(&mut state, *addr, insn, &mut sink);
        }
        for (addr, lhs, rhs) in sink.compares {
            out.compares.push(CompareEvent { addr, block: b, lhs, rhs });
        }
        for (addr, _t, args) in sink.calls {
            let target = match block.term {
                Terminator::Call { target } if addr == block.last_addr() => target,
                _ => None,
            };
            out.calls.push(CallEvent { addr, block: b, target, args });
        }
        for (addr, target, value, width) in sink.stores {
            out.global_stores.push(StoreEvent { addr, block: b, target, value, width });
        }
    }
    out.compares.sort_by_key(|e| e.addr);
    out.calls.sort_by_key(|e| e.addr);
    out.global_stores.sort_by_key(|e| e.addr);
    out
}

fn successors(cfg: &Cfg, block: u64) -> Vec<(u64, EdgeKind)> {
    cfg.edges
        .range((block, 0, EdgeKind::Fallthrough)..)
        .take_while(|(s, _, _)| *s == block)
        .map(|&(_, d, k)| (d, k))
        .collect()
}
