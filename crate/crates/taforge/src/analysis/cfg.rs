//! Control-flow recovery: linear-sweep disassembly of executable regions
//! into basic blocks split at branch targets and terminators, with the
//! jump-table idiom (bounds check, scaled indexed load, indirect branch)
//! materialized into resolved indirect edges.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::engine::{BranchTrace, TraceKind};
use crate::isa::{self, AluOp, Cond, Insn, MemSize};
use crate::loader::LoadedImage;
use crate::vas::RegionKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum EdgeKind {
    Fallthrough,
    Cond,
    Uncond,
    Call,
    Ret,
    Indirect,
}

impl std::fmt::Display for EdgeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            EdgeKind::Fallthrough => "fallthrough",
            EdgeKind::Cond => "cond",
            EdgeKind::Uncond => "uncond",
            EdgeKind::Call => "call",
            EdgeKind::Ret => "ret",
            EdgeKind::Indirect => "indirect",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Terminator {
    /// Block closed because the next address starts a block.
    Fallthrough,
    Jump(u64),
    CondBranch { target: u64 },
    Call { target: Option<u64> },
    /// Indirect branch with resolved target set (jump table or
    /// constant-register jump).
    IndirectResolved(Vec<u64>),
    IndirectUnresolved,
    Ret,
    Svc,
    /// Undecodable word or fall into unmapped space; no successors.
    Dead,
}

#[derive(Debug, Clone)]
pub struct Block {
    pub start: u64,
    /// Decoded instructions; undecodable words never join a block.
    pub insns: Vec<(u64, Insn)>,
    pub term: Terminator,
}

impl Block {
    pub fn end(&self) -> u64 {
        self.start + self.insns.len() as u64 * 4
    }

    pub fn last_addr(&self) -> u64 {
        self.end() - 4
    }
}

#[derive(Debug, Clone)]
pub struct JumpTableInfo {
    pub br_addr: u64,
    pub table_addr: u64,
    pub entry_count: u64,
    /// Added to the table index to recover the original scrutinee value.
    pub bias: u64,
    /// Register holding the pre-bias scrutinee at the bounds check.
    pub scrutinee_reg: u8,
    /// Address of the bounds-check compare.
    pub bounds_addr: u64,
    /// Targets in table order (entry k -> targets[k]).
    pub targets: Vec<u64>,
    pub default_target: u64,
}

#[derive(Debug, Default)]
pub struct Cfg {
    pub blocks: BTreeMap<u64, Block>,
    pub edges: BTreeSet<(u64, u64, EdgeKind)>,
    /// Function entry -> reachable block starts (via intraprocedural edges).
    pub functions: BTreeMap<u64, BTreeSet<u64>>,
    pub jump_tables: BTreeMap<u64, JumpTableInfo>,
    /// Blocks whose indirect terminator could not be resolved.
    pub incomplete: BTreeSet<u64>,
}

impl Cfg {
    pub fn block_containing(&self, addr: u64) -> Option<&Block> {
        self.blocks
            .range(..=addr)
            .next_back()
            .map(|(_, b)| b)
            .filter(|b| addr < b.end())
    }

    /// Function entry owning a block, if any.
    pub fn function_of(&self, block_start: u64) -> Option<u64> {
        self.functions
            .iter()
            .find(|(_, blocks)| blocks.contains(&block_start))
            .map(|(entry, _)| *entry)
    }
}

fn is_terminator(insn: &Insn) -> bool {
    matches!(
        insn,
        Insn::B { .. }
            | Insn::Bcond { .. }
            | Insn::Bl { .. }
            | Insn::Br { .. }
            | Insn::Blr { .. }
            | Insn::Ret { .. }
            | Insn::Cbz { .. }
            | Insn::Cbnz { .. }
            | Insn::Svc { .. }
    )
}

fn branch_target(addr: u64, insn: &Insn) -> Option<u64> {
    let off = match insn {
        Insn::B { offset } | Insn::Bl { offset } | Insn::Bcond { offset, .. } => *offset,
        Insn::Cbz { offset, .. } | Insn::Cbnz { offset, .. } => *offset,
        _ => return None,
    };
    Some(addr.wrapping_add_signed(i64::from(off) * 4))
}

/// Backward scan inside a block for a movz/movk constant bound to `reg`.
fn const_before(block: &[(u64, Insn)], upto: usize, reg: u8) -> Option<u64> {
    let mut value: Option<u64> = None;
    let mut idx = upto;
    while idx > 0 {
        idx -= 1;
        match block[idx].1 {
            Insn::Movk { rd, imm, hw } if rd == reg => {
                // movk extends an earlier movz; keep folding.
                let base = value.unwrap_or(0);
                value = Some(base | (u64::from(imm) << (16 * hw)));
            }
            Insn::Movz { rd, imm, hw } if rd == reg => {
                let base = value.unwrap_or(0);
                let keep = base & !(0xffffu64 << (16 * hw));
                return Some(keep | (u64::from(imm) << (16 * hw)));
            }
            Insn::Adr { rd, offset } if rd == reg => {
                return Some(block[idx].0.wrapping_add_signed(i64::from(offset) * 4));
            }
            ref other if writes_reg(other, reg) => return None,
            _ => {}
        }
    }
    None
}

fn writes_reg(insn: &Insn, reg: u8) -> bool {
    match insn {
        Insn::AluReg { rd, .. }
        | Insn::AluImm { rd, .. }
        | Insn::ShiftImm { rd, .. }
        | Insn::Movz { rd, .. }
        | Insn::Movk { rd, .. }
        | Insn::MovReg { rd, .. }
        | Insn::Adr { rd, .. } => *rd == reg,
        Insn::Ldr { rt, .. } => *rt == reg,
        Insn::Bl { .. } | Insn::Blr { .. } => reg == isa::LR || reg == 0,
        Insn::Svc { .. } | Insn::Hcall { .. } => reg == 0,
        _ => false,
    }
}

/// Linear-sweep CFG recovery over the image's executable segments (the
/// trampoline region, if present, is excluded: analysis targets the
/// pre-rewrite program).
pub fn recover_cfg(image: &LoadedImage) -> Cfg {
    // Decode every 4-aligned word of X segments.
    let mut words: BTreeMap<u64, Option<Insn>> = BTreeMap::new();
    for region in image.vas.regions() {
        if !region.perms.x || region.kind == RegionKind::Trampoline {
            continue;
        }
        for (i, chunk) in region.bytes.chunks_exact(4).enumerate() {
            let addr = region.base + i as u64 * 4;
            let word = u32::from_le_bytes(chunk.try_into().unwrap());
            words.insert(addr, isa::decode(word));
        }
    }

    // Leaders from direct branch targets; indirect targets join after the
    // jump-table pass.
    let mut leaders: BTreeSet<u64> = BTreeSet::new();
    for (&addr, insn) in &words {
        if let Some(insn) = insn {
            if let Some(t) = branch_target(addr, insn) {
                leaders.insert(t);
            }
        }
    }

    let mut cfg = Cfg::default();
    for _pass in 0..4 {
        let blocks = split_blocks(&words, &leaders);
        let tables = resolve_jump_tables(image, &blocks);
        let mut new_leader = false;
        for info in tables.values() {
            for &t in &info.targets {
                if leaders.insert(t) {
                    new_leader = true;
                }
            }
        }
        if !new_leader {
            cfg.blocks = blocks;
            cfg.jump_tables = tables;
            break;
        }
    }

    // Attach resolved indirect targets and build edges.
    for (block_start, info) in &cfg.jump_tables {
        if let Some(block) = cfg.blocks.get_mut(block_start) {
            block.term = Terminator::IndirectResolved(info.targets.clone());
        }
    }
    let block_list: Vec<u64> = cfg.blocks.keys().copied().collect();
    for start in block_list {
        let (term, _last_addr, next_addr) = {
            let b = &cfg.blocks[&start];
            (b.term.clone(), b.last_addr(), b.end())
        };
        let add = |cfg: &mut Cfg, dst: u64, kind: EdgeKind| {
            cfg.edges.insert((start, dst, kind));
        };
        match term {
            Terminator::Fallthrough => add(&mut cfg, next_addr, EdgeKind::Fallthrough),
            Terminator::Jump(t) => add(&mut cfg, t, EdgeKind::Uncond),
            Terminator::CondBranch { target } => {
                add(&mut cfg, target, EdgeKind::Cond);
                add(&mut cfg, next_addr, EdgeKind::Fallthrough);
            }
            Terminator::Call { target } => {
                if let Some(t) = target {
                    add(&mut cfg, t, EdgeKind::Call);
                }
                add(&mut cfg, next_addr, EdgeKind::Fallthrough);
            }
            Terminator::Svc => add(&mut cfg, next_addr, EdgeKind::Fallthrough),
            Terminator::Ret | Terminator::Dead => {}
            Terminator::IndirectUnresolved => {
                // Try the jump-table result or constant propagation; both
                // already ran during block construction, so this block stays
                // annotated incomplete.
                cfg.incomplete.insert(start);
            }
            Terminator::IndirectResolved(ref targets) => {
                let distinct: BTreeSet<u64> = targets.iter().copied().collect();
                for t in distinct {
                    add(&mut cfg, t, EdgeKind::Indirect);
                }
            }
        }
    }

    // Functions: resolved entrypoints plus every direct call target,
    // reachable over intraprocedural edges.
    let mut entries: BTreeSet<u64> = image.entrypoints.values().copied().collect();
    for b in cfg.blocks.values() {
        if let Terminator::Call { target: Some(t) } = b.term {
            entries.insert(t);
        }
    }
    for entry in entries {
        let Some(entry_block) = cfg.block_containing(entry).map(|b| b.start) else {
            continue;
        };
        let mut seen = BTreeSet::new();
        let mut queue = VecDeque::from([entry_block]);
        while let Some(b) = queue.pop_front() {
            if !seen.insert(b) {
                continue;
            }
            for &(src, dst, kind) in cfg.edges.range((b, 0, EdgeKind::Fallthrough)..) {
                if src != b {
                    break;
                }
                if kind == EdgeKind::Call {
                    continue;
                }
                if cfg.blocks.contains_key(&dst) {
                    queue.push_back(dst);
                }
            }
        }
        cfg.functions.insert(entry, seen);
    }

    cfg
}

fn split_blocks(
    words: &BTreeMap<u64, Option<Insn>>,
    leaders: &BTreeSet<u64>,
) -> BTreeMap<u64, Block> {
    let mut blocks = BTreeMap::new();
    let mut current: Option<Block> = None;

    let flush = |blocks: &mut BTreeMap<u64, Block>, b: Option<Block>| {
        if let Some(b) = b {
            if !b.insns.is_empty() {
                blocks.insert(b.start, b);
            }
        }
    };

    let mut prev_addr: Option<u64> = None;
    for (&addr, insn) in words {
        // A gap between regions ends any open block.
        if prev_addr.map(|p| p + 4 != addr).unwrap_or(false) {
            if let Some(b) = current.as_mut() {
                b.term = Terminator::Dead;
            }
            flush(&mut blocks, current.take());
        }
        prev_addr = Some(addr);

        let Some(insn) = insn else {
            if let Some(b) = current.as_mut() {
                b.term = Terminator::Dead;
            }
            flush(&mut blocks, current.take());
            continue;
        };

        if leaders.contains(&addr) {
            flush(&mut blocks, current.take());
        }
        let block = current.get_or_insert_with(|| Block {
            start: addr,
            insns: Vec::new(),
            term: Terminator::Fallthrough,
        });
        block.insns.push((addr, *insn));

        if is_terminator(insn) {
            block.term = match insn {
                Insn::B { .. } => Terminator::Jump(branch_target(addr, insn).unwrap()),
                Insn::Bcond { .. } | Insn::Cbz { .. } | Insn::Cbnz { .. } => {
                    Terminator::CondBranch { target: branch_target(addr, insn).unwrap() }
                }
                Insn::Bl { .. } => {
                    Terminator::Call { target: Some(branch_target(addr, insn).unwrap()) }
                }
                Insn::Blr { rn } => {
                    let target = const_before(&block.insns, block.insns.len() - 1, *rn);
                    Terminator::Call { target }
                }
                Insn::Br { rn } => {
                    match const_before(&block.insns, block.insns.len() - 1, *rn) {
                        Some(t) => Terminator::IndirectResolved(vec![t]),
                        None => Terminator::IndirectUnresolved,
                    }
                }
                Insn::Ret { .. } => Terminator::Ret,
                Insn::Svc { .. } => Terminator::Svc,
                _ => unreachable!(),
            };
            flush(&mut blocks, current.take());
        }
    }
    if let Some(b) = current.as_mut() {
        b.term = Terminator::Dead;
    }
    flush(&mut blocks, current);
    blocks
}

/// Recognize the emitted table-branch idiom. The dispatcher lowers a dense
/// switch as:
///
/// ```text
///   sub  rt, rs, #bias        (bias may be zero: mov rt, rs)
///   cmp  rt, #count
///   b.hs default
///   lsl  ri, rt, #3           (2 on 32-bit images)
///   adr  rb, table
///   add  ra, rb, ri
///   ldr  rv, [ra]
///   br   rv
/// ```
fn resolve_jump_tables(
    image: &LoadedImage,
    blocks: &BTreeMap<u64, Block>,
) -> BTreeMap<u64, JumpTableInfo> {
    let mut out = BTreeMap::new();
    let starts: Vec<u64> = blocks.keys().copied().collect();
    for (i, &start) in starts.iter().enumerate() {
        let block = &blocks[&start];
        let Some(&(br_addr, Insn::Br { rn })) = block.insns.last() else {
            continue;
        };
        // Backward pattern match inside the table block.
        let insns = &block.insns;
        let n = insns.len();
        if n < 5 {
            continue;
        }
        let Insn::Ldr { size, rt: rv, rn: ra, offset: 0 } = insns[n - 2].1 else {
            continue;
        };
        if rv != rn {
            continue;
        }
        let entry_bytes = size.bytes();
        if !matches!(size, MemSize::B8 | MemSize::B4) {
            continue;
        }
        let Insn::AluReg { op: AluOp::Add, rd, rn: rb, rm: ri } = insns[n - 3].1 else {
            continue;
        };
        if rd != ra {
            continue;
        }
        let Insn::Adr { rd: adr_rd, offset: adr_off } = insns[n - 4].1 else {
            continue;
        };
        if adr_rd != rb {
            continue;
        }
        let table_addr = insns[n - 4].0.wrapping_add_signed(i64::from(adr_off) * 4);
        let Insn::ShiftImm { op: AluOp::Lsl, rd: lsl_rd, rn: rt, amount } = insns[n - 5].1 else {
            continue;
        };
        if lsl_rd != ri || (1u64 << amount) != entry_bytes {
            continue;
        }

        // Bounds check in the physically preceding block.
        if i == 0 {
            continue;
        }
        let bounds = &blocks[&starts[i - 1]];
        if bounds.end() != start {
            continue;
        }
        let Terminator::CondBranch { target: default_target } = bounds.term else {
            continue;
        };
        let bn = bounds.insns.len();
        if bn < 2 {
            continue;
        }
        let Insn::Bcond { cond: Cond::Hs, .. } = bounds.insns[bn - 1].1 else {
            continue;
        };
        let Insn::CmpImm { rn: cmp_reg, imm: count } = bounds.insns[bn - 2].1 else {
            continue;
        };
        if cmp_reg != rt {
            continue;
        }
        let bounds_addr = bounds.insns[bn - 2].0;
        // Optional bias: sub rt, rs, #min right before the compare.
        let (bias, scrutinee_reg) = if bn >= 3 {
            match bounds.insns[bn - 3].1 {
                Insn::AluImm { op: AluOp::Sub, rd, rn: rs, imm } if rd == rt => {
                    (u64::from(imm), rs)
                }
                Insn::AluReg { op: AluOp::Sub, rd, rn: rs, rm } if rd == rt => {
                    match const_before(&bounds.insns, bn - 3, rm) {
                        Some(v) => (v, rs),
                        None => (0, rt),
                    }
                }
                Insn::MovReg { rd, rn: rs } if rd == rt => (0, rs),
                _ => (0, rt),
            }
        } else {
            (0, rt)
        };

        // Materialize targets from the loaded image bytes (relocated).
        let mut targets = Vec::with_capacity(count as usize);
        let mut ok = true;
        for k in 0..u64::from(count) {
            let slot = table_addr + k * entry_bytes;
            match image.vas.peek(slot, entry_bytes) {
                Some(bytes) => {
                    let mut buf = [0u8; 8];
                    buf[..entry_bytes as usize].copy_from_slice(bytes);
                    let t = u64::from_le_bytes(buf);
                    let exec =
                        image.vas.region_at(t).map(|r| r.perms.x).unwrap_or(false);
                    if t % 4 != 0 || !exec {
                        ok = false;
                        break;
                    }
                    targets.push(t);
                }
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            continue;
        }
        out.insert(
            start,
            JumpTableInfo {
                br_addr,
                table_addr,
                entry_count: u64::from(count),
                bias,
                scrutinee_reg,
                bounds_addr,
                targets,
                default_target,
            },
        );
    }
    out
}

/// Trace-soundness check: every recorded non-indirect edge inside the image
/// extent must exist in the CFG. Events whose source is not a block's final
/// instruction, indirect/return transfers, and host-boundary events are
/// skipped.
pub fn trace_is_sound(cfg: &Cfg, trace: &BranchTrace, extent: (u64, u64)) -> Result<(), String> {
    let inside = |a: u64| a >= extent.0 && a < extent.1;
    for e in &trace.events {
        if !inside(e.source) || !inside(e.target) {
            continue;
        }
        if matches!(e.kind, TraceKind::Ret) {
            continue;
        }
        let Some(block) = cfg.block_containing(e.source) else {
            return Err(format!("event source {:#x} is not in any block", e.source));
        };
        if block.last_addr() != e.source {
            return Err(format!("event source {:#x} is mid-block", e.source));
        }
        if matches!(
            block.term,
            Terminator::IndirectResolved(_) | Terminator::IndirectUnresolved
        ) {
            continue;
        }
        let found = cfg
            .edges
            .range((block.start, 0, EdgeKind::Fallthrough)..)
            .take_while(|(s, _, _)| *s == block.start)
            .any(|&(_, dst, _)| dst == e.target);
        if !found {
            return Err(format!(
                "edge {:#x} -> {:#x} ({:?}) not in CFG",
                e.source, e.target, e.kind
            ));
        }
    }
    Ok(())
}
