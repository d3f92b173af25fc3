//! Turn a [`TaSpec`] into a loadable TA image (plus stub libraries on the
//! dynamically-linked profiles) and its ground-truth manifest.
//!
//! Image layout: profile entry shims, decoy switches, the command dispatcher
//! (if/else chain or jump table) with per-arm guard checks, one handler
//! function per command, a branch-mix filler, then the syscall wrappers
//! (local `svc` wrappers on OP-TEE/Trusty, import thunks into the stub
//! libraries on Teegris/QSEE). The context object lives in bss: a
//! ran-commands word consulted by dispatch guards, one descriptor slot per
//! device path, then the named fields moved through the memory helper.
//!
//! Frame sizes are part of the contract with planted stack vulnerabilities:
//! shim 32 + dispatcher 32 + handler 48 bytes put a handler's copy buffer at
//! sp+16 exactly 96 bytes below the stack top.

use std::collections::BTreeMap;

use crate::isa::{AluOp, Cond, Insn, MemSize, WordWidth, SP};
use crate::profile::{
    TzosName, TEE_ERROR_BAD_PARAMETERS, TEE_ERROR_BAD_STATE, TEE_ERROR_INVALID_COMMAND,
};
use crate::syscall::{HandlerId, NumberSource, SyscallTable};
use crate::util::{Fnv64, PAGE_SIZE};

use super::asm::{ground_truth_edge_count, Asm, Label, Section};
use super::elfout::{build_object, ElfOptions, TEXT_VADDR};
use super::manifest::{synth_uuid, Manifest, ManifestField, ManifestVuln};
use super::spec::{BodyPlan, DispatchStyle, SpecError, TaSpec, VulnKind};

/// Packed parameter-type word the entry shims expect: slot0 memref-in,
/// slot1 memref-out, slots 2-3 none.
pub const EXPECTED_PTYPES: u16 = 0x0065;

/// Request header on the QSEE buffer convention: u64 command id, u32 param
/// types, u32 pad.
pub const QSEE_HEADER: u64 = 16;

const SCRATCH: u8 = 9;
const SCRATCH2: u8 = 10;
const SCRATCH3: u8 = 11;
const SCRATCH4: u8 = 12;
const SCRATCH5: u8 = 13;
const THUNK_REG: u8 = 16;

// Callee-saved by generated handler prologues.
const REQ: u8 = 19;
const REQ_SIZE: u8 = 20;
const RESP: u8 = 21;
const RESP_SIZE_PTR: u8 = 22;
const TMP_SAVED: u8 = 23;

pub struct GeneratedTa {
    pub elf: Vec<u8>,
    pub stubs: Vec<(String, Vec<u8>)>,
    pub manifest: Manifest,
    /// Campaign device script declaring every path the TA touches.
    pub device_script: String,
}

struct Gen<'a> {
    spec: &'a TaSpec,
    asm: Asm,
    simple: u64,
    complex: u64,
    table: SyscallTable,
    wrappers: BTreeMap<HandlerId, Label>,
    ctx: Label,
    oob: Label,
    fd_offsets: BTreeMap<String, i16>,
    field_offsets: BTreeMap<String, i16>,
    path_labels: BTreeMap<String, Label>,
    w64: bool,
    /// (command, fault vaddr, kind, predicate threshold).
    vuln_faults: Vec<(u64, u64, VulnKind, u64)>,
}

impl<'a> Gen<'a> {
    fn ptr_mem(&self) -> MemSize {
        if self.w64 {
            MemSize::B8
        } else {
            MemSize::B4
        }
    }

    fn ldr_ptr(&mut self, rt: u8, rn: u8, off: i16) {
        let size = self.ptr_mem();
        self.asm.ldr(size, rt, rn, off);
    }

    fn str_ptr(&mut self, rt: u8, rn: u8, off: i16) {
        let size = self.ptr_mem();
        self.asm.str_(size, rt, rn, off);
    }

    fn wrapper(&mut self, h: HandlerId) -> Label {
        if let Some(l) = self.wrappers.get(&h) {
            return *l;
        }
        let l = self.asm.new_label();
        self.wrappers.insert(h, l);
        l
    }

    fn frame_push(&mut self, bytes: u16, saves: &[u8]) {
        self.asm.sub_imm(SP, SP, bytes);
        for (i, &r) in saves.iter().enumerate() {
            self.str_ptr(r, SP, (i * 8) as i16);
        }
    }

    fn frame_pop(&mut self, bytes: u16, saves: &[u8]) {
        for (i, &r) in saves.iter().enumerate() {
            self.ldr_ptr(r, SP, (i * 8) as i16);
        }
        self.asm.add_imm(SP, SP, bytes);
        self.asm.ret();
    }

    /// `rd = min(rd, 256)`; keeps copy loops inside the per-request budget.
    fn clamp_256(&mut self, rd: u8) {
        let ok = self.asm.new_label();
        self.asm.emit(Insn::CmpImm { rn: rd, imm: 256 });
        self.asm.bcond(Cond::Ls, ok);
        self.simple += 1;
        self.asm.emit(Insn::Movz { rd, imm: 256, hw: 0 });
        self.asm.bind(ok);
    }

    fn emit_plan(&mut self, plan: &BodyPlan, cmd: u64) {
        match plan {
            BodyPlan::Echo => {
                self.asm.mov(SCRATCH, REQ_SIZE);
                self.clamp_256(SCRATCH);
                self.asm.emit(Insn::Movz { rd: SCRATCH2, imm: 0, hw: 0 });
                let loop_top = self.asm.new_label();
                let done = self.asm.new_label();
                self.asm.bind(loop_top);
                self.asm.cmp_reg(SCRATCH2, SCRATCH);
                self.asm.bcond(Cond::Hs, done);
                self.simple += 1;
                self.asm.emit(Insn::AluReg { op: AluOp::Add, rd: SCRATCH3, rn: REQ, rm: SCRATCH2 });
                self.asm.ldr(MemSize::B1, SCRATCH4, SCRATCH3, 0);
                self.asm.emit(Insn::AluReg { op: AluOp::Add, rd: SCRATCH3, rn: RESP, rm: SCRATCH2 });
                self.asm.str_(MemSize::B1, SCRATCH4, SCRATCH3, 0);
                self.asm.add_imm(SCRATCH2, SCRATCH2, 1);
                self.asm.b(loop_top);
                self.asm.bind(done);
                self.str_ptr(SCRATCH, RESP_SIZE_PTR, 0);
            }
            BodyPlan::Checksum => {
                self.asm.mov(SCRATCH, REQ_SIZE);
                self.clamp_256(SCRATCH);
                self.asm.emit(Insn::Movz { rd: SCRATCH2, imm: 0, hw: 0 });
                self.asm.emit(Insn::Movz { rd: SCRATCH5, imm: 0, hw: 0 });
                let loop_top = self.asm.new_label();
                let done = self.asm.new_label();
                self.asm.bind(loop_top);
                self.asm.cmp_reg(SCRATCH2, SCRATCH);
                self.asm.bcond(Cond::Hs, done);
                self.simple += 1;
                self.asm.emit(Insn::AluReg { op: AluOp::Add, rd: SCRATCH3, rn: REQ, rm: SCRATCH2 });
                self.asm.ldr(MemSize::B1, SCRATCH4, SCRATCH3, 0);
                self.asm.emit(Insn::AluReg {
                    op: AluOp::Add,
                    rd: SCRATCH5,
                    rn: SCRATCH5,
                    rm: SCRATCH4,
                });
                self.asm.add_imm(SCRATCH2, SCRATCH2, 1);
                self.asm.b(loop_top);
                self.asm.bind(done);
                self.str_ptr(SCRATCH5, RESP, 0);
                self.asm.emit(Insn::Movz { rd: SCRATCH, imm: 8, hw: 0 });
                self.str_ptr(SCRATCH, RESP_SIZE_PTR, 0);
            }
            BodyPlan::DeviceOpen(path) => {
                let path_label = self.path_labels[path];
                let open = self.wrapper(HandlerId::Open);
                self.asm.adr(0, path_label);
                self.asm.emit(Insn::Movz { rd: 1, imm: 0, hw: 0 });
                self.asm.bl(open);
                let off = self.fd_offsets[path];
                self.asm.adr(SCRATCH, self.ctx);
                self.asm.str_(MemSize::B4, 0, SCRATCH, off);
            }
            BodyPlan::DeviceUse(path) => {
                let read = self.wrapper(HandlerId::Read);
                let off = self.fd_offsets[path];
                self.asm.adr(SCRATCH, self.ctx);
                self.asm.ldr(MemSize::B4, 0, SCRATCH, off);
                self.asm.mov(1, RESP);
                self.asm.emit(Insn::Movz { rd: 2, imm: 16, hw: 0 });
                self.asm.bl(read);
                self.str_ptr(0, RESP_SIZE_PTR, 0);
            }
            BodyPlan::DeviceClose(path) => {
                let close = self.wrapper(HandlerId::Close);
                let off = self.fd_offsets[path];
                self.asm.adr(SCRATCH, self.ctx);
                self.asm.ldr(MemSize::B4, 0, SCRATCH, off);
                self.asm.bl(close);
            }
            BodyPlan::DeviceIo(path) => {
                let path_label = self.path_labels[path];
                let open = self.wrapper(HandlerId::Open);
                let read = self.wrapper(HandlerId::Read);
                let close = self.wrapper(HandlerId::Close);
                self.asm.adr(0, path_label);
                self.asm.emit(Insn::Movz { rd: 1, imm: 0, hw: 0 });
                self.asm.bl(open);
                self.asm.mov(TMP_SAVED, 0);
                self.asm.mov(1, RESP);
                self.asm.emit(Insn::Movz { rd: 2, imm: 16, hw: 0 });
                self.asm.bl(read);
                self.asm.mov(0, TMP_SAVED);
                self.asm.bl(close);
            }
            BodyPlan::ContextWrite(field) => {
                let mem_move = self.wrapper(HandlerId::MemMove);
                let off = self.field_offsets[field];
                self.asm.adr(SCRATCH, self.ctx);
                self.asm.add_imm(0, SCRATCH, off as u16);
                self.asm.mov(1, REQ);
                self.asm.emit(Insn::Movz { rd: 2, imm: 8, hw: 0 });
                self.asm.bl(mem_move);
            }
            BodyPlan::ContextRead { field, .. } => {
                let mem_move = self.wrapper(HandlerId::MemMove);
                let off = self.field_offsets[field];
                self.asm.mov(0, RESP);
                self.asm.adr(SCRATCH, self.ctx);
                self.asm.add_imm(1, SCRATCH, off as u16);
                self.asm.emit(Insn::Movz { rd: 2, imm: 8, hw: 0 });
                self.asm.bl(mem_move);
                self.asm.emit(Insn::Movz { rd: SCRATCH, imm: 8, hw: 0 });
                self.str_ptr(SCRATCH, RESP_SIZE_PTR, 0);
            }
            BodyPlan::Vuln { kind } => self.emit_vuln(*kind, cmd),
        }
    }

    fn emit_vuln(&mut self, kind: VulnKind, cmd: u64) {
        let safe = self.asm.new_label();
        self.asm.cbz(REQ_SIZE, safe);
        self.simple += 1;
        self.asm.ldr(MemSize::B1, SCRATCH, REQ, 0);
        let predicate: u64 = match kind {
            VulnKind::StackOverflow => 96,
            _ => 64,
        };
        self.asm.emit(Insn::CmpImm { rn: SCRATCH, imm: predicate as u16 });
        self.asm.bcond(Cond::Ls, safe);
        self.complex += 1;
        let fault_off;
        match kind {
            VulnKind::OobWrite => {
                let buf = self.oob;
                self.asm.adr(SCRATCH2, buf);
                self.asm.emit(Insn::AluReg {
                    op: AluOp::Add,
                    rd: SCRATCH2,
                    rn: SCRATCH2,
                    rm: SCRATCH,
                });
                fault_off = TEXT_VADDR + self.asm.here();
                self.asm.str_(MemSize::B1, SCRATCH, SCRATCH2, 0);
            }
            VulnKind::OobRead => {
                let buf = self.oob;
                self.asm.adr(SCRATCH2, buf);
                self.asm.emit(Insn::AluReg {
                    op: AluOp::Add,
                    rd: SCRATCH2,
                    rn: SCRATCH2,
                    rm: SCRATCH,
                });
                fault_off = TEXT_VADDR + self.asm.here();
                self.asm.ldr(MemSize::B1, SCRATCH3, SCRATCH2, 0);
            }
            VulnKind::StackOverflow => {
                self.asm.add_imm(SCRATCH2, SP, 16);
                self.asm.emit(Insn::Movz { rd: SCRATCH3, imm: 0, hw: 0 });
                let loop_top = self.asm.new_label();
                self.asm.bind(loop_top);
                // The bound is the memory-loaded payload byte, so this loop
                // head counts as a complex dependency.
                self.asm.cmp_reg(SCRATCH3, SCRATCH);
                self.asm.bcond(Cond::Hs, safe);
                self.complex += 1;
                self.asm.emit(Insn::AluReg {
                    op: AluOp::Add,
                    rd: SCRATCH4,
                    rn: SCRATCH2,
                    rm: SCRATCH3,
                });
                fault_off = TEXT_VADDR + self.asm.here();
                self.asm.str_(MemSize::B1, SCRATCH3, SCRATCH4, 0);
                self.asm.add_imm(SCRATCH3, SCRATCH3, 1);
                self.asm.b(loop_top);
            }
            VulnKind::UafStub => {
                let alloc = self.wrapper(HandlerId::Alloc);
                let free = self.wrapper(HandlerId::Free);
                self.asm.emit(Insn::Movz { rd: 0, imm: 4096, hw: 0 });
                self.asm.bl(alloc);
                self.asm.cbz(0, safe);
                self.simple += 1;
                self.asm.mov(TMP_SAVED, 0);
                self.asm.bl(free);
                fault_off = TEXT_VADDR + self.asm.here();
                self.asm.ldr(MemSize::B1, SCRATCH3, TMP_SAVED, 0);
            }
        }
        self.asm.bind(safe);
        self.vuln_faults.push((cmd, fault_off, kind, predicate));
    }

    fn emit_wrapper_bodies(&mut self) {
        let profile = self.spec.profile;
        let wrappers: Vec<(HandlerId, Label)> =
            self.wrappers.iter().map(|(h, l)| (*h, *l)).collect();
        for (h, label) in wrappers {
            self.asm.bind(label);
            let num = self.table.number_for(h).expect("working set is fully numbered");
            match profile {
                TzosName::Optee | TzosName::Trusty => {
                    self.asm.svc(num as u16, num);
                    self.asm.ret();
                }
                TzosName::Teegris | TzosName::Qsee => {
                    let prefix_dev = if profile == TzosName::Teegris { "tz" } else { "cm" };
                    let prefix_mem = if profile == TzosName::Teegris { "sc" } else { "cm" };
                    let sym = match h {
                        HandlerId::Open => format!("{prefix_dev}_open"),
                        HandlerId::Read => format!("{prefix_dev}_read"),
                        HandlerId::Write => format!("{prefix_dev}_write"),
                        HandlerId::Close => format!("{prefix_dev}_close"),
                        HandlerId::Ioctl => format!("{prefix_dev}_ioctl"),
                        HandlerId::Mmap => format!("{prefix_dev}_mmap"),
                        HandlerId::MemMove => format!("{prefix_mem}_mem_move"),
                        HandlerId::Alloc => format!("{prefix_mem}_alloc"),
                        HandlerId::Free => format!("{prefix_mem}_free"),
                        HandlerId::GetRandom => format!("{prefix_mem}_random"),
                        HandlerId::Unsupported => unreachable!(),
                    };
                    self.asm.br_import(THUNK_REG, &sym);
                }
            }
        }
    }
}

const SHIM_SAVES: [u8; 1] = [crate::isa::LR];
const HANDLER_SAVES: [u8; 6] = [crate::isa::LR, REQ, REQ_SIZE, RESP, RESP_SIZE_PTR, TMP_SAVED];

/// The session-state guard: one shared function, called from the entry shim
/// with the command id, returning 1 when every prerequisite of that command
/// already ran this session. The verdict is computed branchlessly and the
/// shim's failure path is a pure fallthrough into the common epilogue, so a
/// guard rejection exercises no taken edge that a successful session would
/// not also exercise.
fn emit_guard_fn(gen: &mut Gen) {
    let done = gen.asm.new_label();
    let guarded: Vec<(u64, u64)> = gen
        .spec
        .commands
        .iter()
        .filter(|c| !c.guard.is_empty())
        .map(|c| {
            let mask: u64 = c
                .guard
                .iter()
                .map(|g| {
                    let gidx =
                        gen.spec.commands.iter().position(|x| x.id == *g).expect("validated");
                    1u64 << gidx
                })
                .fold(0, |a, b| a | b);
            (c.id, mask)
        })
        .collect();
    let checks: Vec<(u64, u64, Label)> = guarded
        .into_iter()
        .map(|(id, mask)| (id, mask, gen.asm.new_label()))
        .collect();
    for (id, _mask, label) in &checks {
        gen.asm.cmp_const(0, *id, SCRATCH);
        gen.asm.bcond(Cond::Eq, *label);
        gen.simple += 1;
    }
    gen.asm.emit(Insn::Movz { rd: 0, imm: 1, hw: 0 });
    gen.asm.ret();
    if checks.is_empty() {
        let _ = done;
        return;
    }
    for (_id, mask, label) in &checks {
        gen.asm.bind(*label);
        gen.asm.mov_const(SCRATCH, *mask);
        gen.asm.b(done);
    }
    // r0 = ((ran & mask) == mask) as a branch-free boolean.
    gen.asm.bind(done);
    gen.asm.adr(SCRATCH2, gen.ctx);
    gen.ldr_ptr(SCRATCH3, SCRATCH2, 0);
    gen.asm.emit(Insn::AluReg { op: AluOp::And, rd: SCRATCH3, rn: SCRATCH3, rm: SCRATCH });
    gen.asm.emit(Insn::AluReg { op: AluOp::Eor, rd: SCRATCH3, rn: SCRATCH3, rm: SCRATCH });
    gen.asm.emit(Insn::Movz { rd: SCRATCH4, imm: 0, hw: 0 });
    gen.asm.emit(Insn::AluReg { op: AluOp::Sub, rd: SCRATCH4, rn: SCRATCH4, rm: SCRATCH3 });
    gen.asm.emit(Insn::AluReg { op: AluOp::Orr, rd: SCRATCH4, rn: SCRATCH4, rm: SCRATCH3 });
    let sign = if gen.w64 { 63 } else { 31 };
    gen.asm.emit(Insn::ShiftImm { op: AluOp::Lsr, rd: SCRATCH4, rn: SCRATCH4, amount: sign });
    gen.asm.emit(Insn::AluImm { op: AluOp::Eor, rd: 0, rn: SCRATCH4, imm: 1 });
    gen.asm.ret();
}

/// Guard call and bad-state tail shared by every shim: on success branch
/// over the fallthrough failure path into `go_on`.
fn emit_guard_gate(gen: &mut Gen, guard_fn: Label, cmd_src: u8, exit: Label, go_on: Label) {
    if cmd_src != 0 {
        gen.asm.mov(0, cmd_src);
    }
    gen.asm.bl(guard_fn);
    gen.asm.cbnz(0, go_on);
    gen.simple += 1;
    gen.asm.mov_const(0, TEE_ERROR_BAD_STATE);
    gen.asm.bind(exit);
    gen.frame_pop(32, &SHIM_SAVES);
}

fn emit_gp_shim(
    gen: &mut Gen,
    dispatch: Label,
    guard_fn: Label,
    filler: Label,
    decoys: &[Label],
    has_op: bool,
) {
    gen.frame_push(32, &SHIM_SAVES);
    let exit = gen.asm.new_label();
    let bad = gen.asm.new_label();
    let go_on = gen.asm.new_label();
    if has_op {
        // r0 selects session creation (0) vs command invocation.
        let invoke_path = gen.asm.new_label();
        gen.asm.cbnz(0, invoke_path);
        gen.simple += 1;
        gen.asm.emit(Insn::Movz { rd: 0, imm: 0, hw: 0 });
        gen.asm.b(exit);
        gen.asm.bind(invoke_path);
    }
    for d in decoys {
        gen.asm.bl(*d);
    }
    gen.asm.bl(filler);
    gen.asm.emit(Insn::CmpImm { rn: 2, imm: EXPECTED_PTYPES });
    gen.asm.bcond(Cond::Ne, bad);
    gen.simple += 1;
    emit_guard_gate(gen, guard_fn, 1, exit, go_on);
    gen.asm.bind(go_on);
    // (session/op, cmd, ptypes, req, req_size, resp, resp_size_ptr) ->
    // dispatcher (cmd, req, req_size, resp, resp_size_ptr).
    gen.asm.mov(0, 1);
    gen.asm.mov(1, 3);
    gen.asm.mov(2, 4);
    gen.asm.mov(3, 5);
    gen.asm.mov(4, 6);
    gen.asm.bl(dispatch);
    gen.asm.b(exit);
    gen.asm.bind(bad);
    gen.asm.mov_const(0, TEE_ERROR_BAD_PARAMETERS);
    gen.asm.b(exit);
}

fn emit_trusty_shim(
    gen: &mut Gen,
    dispatch: Label,
    guard_fn: Label,
    filler: Label,
    decoys: &[Label],
) {
    gen.frame_push(32, &SHIM_SAVES);
    let exit = gen.asm.new_label();
    let bad = gen.asm.new_label();
    let go_on = gen.asm.new_label();
    // The command arrives in r0, which helper calls return through; park it.
    gen.asm.mov(6, 0);
    for d in decoys {
        gen.asm.bl(*d);
    }
    gen.asm.bl(filler);
    gen.asm.emit(Insn::CmpImm { rn: 1, imm: EXPECTED_PTYPES });
    gen.asm.bcond(Cond::Ne, bad);
    gen.simple += 1;
    emit_guard_gate(gen, guard_fn, 6, exit, go_on);
    gen.asm.bind(go_on);
    // (cmd, ptypes, req, req_size, resp, resp_size_ptr) -> dispatcher args.
    gen.asm.mov(0, 6);
    gen.asm.mov(1, 2);
    gen.asm.mov(2, 3);
    gen.asm.mov(3, 4);
    gen.asm.mov(4, 5);
    gen.asm.bl(dispatch);
    gen.asm.b(exit);
    gen.asm.bind(bad);
    gen.asm.mov_const(0, TEE_ERROR_BAD_PARAMETERS);
    gen.asm.b(exit);
}

fn emit_qsee_shim(
    gen: &mut Gen,
    dispatch: Label,
    guard_fn: Label,
    filler: Label,
    decoys: &[Label],
    rsp_slot: Label,
) {
    gen.frame_push(32, &SHIM_SAVES);
    let exit = gen.asm.new_label();
    let bad = gen.asm.new_label();
    let go_on = gen.asm.new_label();
    // (req, req_size, resp, resp_size) with the command id and param types
    // in the request header. Park the buffer registers out of r0's way: the
    // helper calls below return through r0.
    gen.asm.mov(5, 0);
    gen.asm.mov(6, 1);
    gen.asm.mov(7, 2);
    gen.asm.adr(SCRATCH3, rsp_slot);
    gen.str_ptr(3, SCRATCH3, 0);
    for d in decoys {
        gen.asm.bl(*d);
    }
    gen.asm.bl(filler);
    gen.ldr_ptr(SCRATCH, 5, 0);
    gen.asm.ldr(MemSize::B4, SCRATCH2, 5, 8);
    gen.asm.emit(Insn::CmpImm { rn: SCRATCH2, imm: EXPECTED_PTYPES });
    gen.asm.bcond(Cond::Ne, bad);
    gen.complex += 1;
    // Park the command where the guard call cannot burn it.
    gen.asm.mov(2, SCRATCH);
    emit_guard_gate(gen, guard_fn, 2, exit, go_on);
    gen.asm.bind(go_on);
    gen.asm.mov(0, 2);
    gen.asm.adr(SCRATCH3, rsp_slot);
    gen.asm.mov(4, SCRATCH3);
    gen.asm.mov(3, 7);
    gen.asm.sub_imm(2, 6, QSEE_HEADER as u16);
    gen.asm.add_imm(1, 5, QSEE_HEADER as u16);
    gen.asm.bl(dispatch);
    gen.asm.b(exit);
    gen.asm.bind(bad);
    gen.asm.mov_const(0, TEE_ERROR_BAD_PARAMETERS);
    gen.asm.b(exit);
}

fn emit_dispatch(gen: &mut Gen, handlers: &BTreeMap<u64, Label>, default_label: Label) {
    gen.frame_push(32, &SHIM_SAVES);
    let exit = gen.asm.new_label();
    let arms: BTreeMap<u64, Label> =
        gen.spec.commands.iter().map(|c| (c.id, gen_arm_label(gen))).collect();

    match gen.spec.dispatch_style {
        DispatchStyle::IfElseChain => {
            for c in &gen.spec.commands {
                gen.asm.cmp_const(0, c.id, SCRATCH);
                gen.asm.bcond(Cond::Eq, arms[&c.id]);
                gen.simple += 1;
            }
            gen.asm.bind(default_label);
            gen.asm.mov_const(0, TEE_ERROR_INVALID_COMMAND);
            gen.asm.b(exit);
        }
        DispatchStyle::JumpTable => {
            let min = gen.spec.commands.iter().map(|c| c.id).min().unwrap();
            let max = gen.spec.commands.iter().map(|c| c.id).max().unwrap();
            let span = max - min + 1;
            if min > 0 {
                if min < (1 << 14) {
                    gen.asm.sub_imm(SCRATCH, 0, min as u16);
                } else {
                    gen.asm.mov_const(SCRATCH2, min);
                    gen.asm.emit(Insn::AluReg {
                        op: AluOp::Sub,
                        rd: SCRATCH,
                        rn: 0,
                        rm: SCRATCH2,
                    });
                }
            } else {
                gen.asm.mov(SCRATCH, 0);
            }
            gen.asm.emit(Insn::CmpImm { rn: SCRATCH, imm: span as u16 });
            gen.asm.bcond(Cond::Hs, default_label);
            gen.simple += 1;
            let shift = if gen.w64 { 3 } else { 2 };
            gen.asm.emit(Insn::ShiftImm { op: AluOp::Lsl, rd: SCRATCH2, rn: SCRATCH, amount: shift });
            let targets: Vec<Label> = (0..span)
                .map(|k| arms.get(&(min + k)).copied().unwrap_or(default_label))
                .collect();
            let table = gen.asm.rodata_table(&targets);
            gen.asm.adr(SCRATCH3, table);
            gen.asm.emit(Insn::AluReg {
                op: AluOp::Add,
                rd: SCRATCH4,
                rn: SCRATCH3,
                rm: SCRATCH2,
            });
            gen.ldr_ptr(SCRATCH5, SCRATCH4, 0);
            gen.asm.br_table(SCRATCH5, targets);
            gen.asm.bind(default_label);
            gen.asm.mov_const(0, TEE_ERROR_INVALID_COMMAND);
            gen.asm.b(exit);
        }
    }

    let ids: Vec<u64> = gen.spec.commands.iter().map(|c| c.id).collect();
    for (idx, id) in ids.iter().enumerate() {
        gen.asm.bind(arms[id]);
        // Mark this command as executed in the session; the shim's guard
        // gate already rejected out-of-order requests.
        gen.asm.adr(SCRATCH, gen.ctx);
        gen.ldr_ptr(SCRATCH2, SCRATCH, 0);
        gen.asm.mov_const(SCRATCH3, 1u64 << idx);
        gen.asm.emit(Insn::AluReg { op: AluOp::Orr, rd: SCRATCH2, rn: SCRATCH2, rm: SCRATCH3 });
        gen.str_ptr(SCRATCH2, SCRATCH, 0);
        // (cmd, req, req_size, resp, resp_size_ptr) -> handler args.
        gen.asm.mov(0, 1);
        gen.asm.mov(1, 2);
        gen.asm.mov(2, 3);
        gen.asm.mov(3, 4);
        gen.asm.bl(handlers[id]);
        gen.asm.b(exit);
    }

    gen.asm.bind(exit);
    gen.frame_pop(32, &SHIM_SAVES);
}

fn gen_arm_label(gen: &mut Gen) -> Label {
    gen.asm.new_label()
}

fn emit_handler_body(gen: &mut Gen, cmd: u64, plans: &[BodyPlan]) {
    gen.frame_push(48, &HANDLER_SAVES);
    gen.asm.mov(REQ, 0);
    gen.asm.mov(REQ_SIZE, 1);
    gen.asm.mov(RESP, 2);
    gen.asm.mov(RESP_SIZE_PTR, 3);
    for plan in plans {
        gen.emit_plan(plan, cmd);
    }
    gen.asm.emit(Insn::Movz { rd: 0, imm: 0, hw: 0 });
    gen.frame_pop(48, &HANDLER_SAVES);
}

/// Top up the branch mix toward the spec's target percentages. Totals of at
/// least 60 keep one branch under half a percentage point.
fn filler_counts(simple: u64, complex: u64, target_simple_pct: u32) -> (u64, u64) {
    let p = f64::from(target_simple_pct) / 100.0;
    let mut best = (0u64, 0u64, f64::MAX);
    let base = simple + complex;
    for total in base.max(60)..base.max(60) + 400 {
        let want_simple = (p * total as f64).round() as u64;
        if want_simple < simple {
            continue;
        }
        let n_s = want_simple - simple;
        let Some(n_c) = total.checked_sub(base + n_s) else { continue };
        let err = ((simple + n_s) as f64 / total as f64 - p).abs();
        if err < best.2 {
            best = (n_s, n_c, err);
        }
        if err <= 0.005 {
            break;
        }
    }
    (best.0, best.1)
}

fn emit_filler(gen: &mut Gen, filler_word: Label) {
    let (n_s, n_c) = filler_counts(gen.simple, gen.complex, gen.spec.branch_mix.0);
    for i in 0..n_s {
        let skip = gen.asm.new_label();
        gen.asm.emit(Insn::Movz { rd: SCRATCH, imm: (i % 1000) as u16, hw: 0 });
        gen.asm.emit(Insn::CmpImm { rn: SCRATCH, imm: ((i + 1) % 1000) as u16 });
        gen.asm.bcond(Cond::Eq, skip);
        gen.simple += 1;
        gen.asm.emit(Insn::Nop);
        gen.asm.bind(skip);
    }
    for _ in 0..n_c {
        let skip = gen.asm.new_label();
        gen.asm.adr(SCRATCH, filler_word);
        gen.asm.ldr(MemSize::B4, SCRATCH2, SCRATCH, 0);
        gen.asm.cbnz(SCRATCH2, skip);
        gen.complex += 1;
        gen.asm.emit(Insn::Nop);
        gen.asm.bind(skip);
    }
}

fn build_stub(
    profile: TzosName,
    width: WordWidth,
    exports: &[(&str, HandlerId)],
    needed: Vec<String>,
) -> (Vec<u8>, Vec<super::asm::InsnRecord>, BTreeMap<String, u64>, Vec<(u64, u16, u32)>) {
    let table = SyscallTable::builtin(profile);
    let num_reg = match table.number_source {
        NumberSource::Register(r) => r,
        NumberSource::Immediate => unreachable!("stubbed profiles use register numbering"),
    };
    let mut asm = Asm::new(width.bytes());
    let mut offsets = BTreeMap::new();
    for (name, h) in exports {
        let l = asm.bound_label();
        offsets.insert(name.to_string(), TEXT_VADDR + asm.here());
        let num = table.number_for(*h).unwrap();
        asm.emit(Insn::Movz { rd: num_reg, imm: num as u16, hw: 0 });
        asm.svc(0, num);
        asm.ret();
        asm.define_symbol(name, l, 12, true);
    }
    let built = build_object(
        asm,
        &ElfOptions {
            width,
            needed,
            manifest_note: None,
            stack_size: None,
            entry: TEXT_VADDR,
        },
    );
    let svc_sites = built.fin.svc_sites.clone();
    (built.bytes, built.fin.records, offsets, svc_sites)
}

pub fn generate(spec: &TaSpec) -> Result<GeneratedTa, SpecError> {
    spec.validate()?;
    if spec.word_width == WordWidth::W32 && spec.commands.len() > 32 {
        return Err(SpecError("32-bit images support at most 32 commands".into()));
    }
    if spec.commands.len() > 64 {
        return Err(SpecError("at most 64 commands per TA".into()));
    }

    let w64 = spec.word_width == WordWidth::W64;
    let mut asm = Asm::new(spec.word_width.bytes());

    // ---- data layout -----------------------------------------------------
    let mut device_paths: Vec<String> = Vec::new();
    let mut field_names: Vec<String> = Vec::new();
    for c in &spec.commands {
        for p in &c.plans {
            match p {
                BodyPlan::DeviceOpen(d)
                | BodyPlan::DeviceUse(d)
                | BodyPlan::DeviceClose(d)
                | BodyPlan::DeviceIo(d) => {
                    if !device_paths.contains(d) {
                        device_paths.push(d.clone());
                    }
                }
                BodyPlan::ContextWrite(f) => {
                    if !field_names.contains(f) {
                        field_names.push(f.clone());
                    }
                }
                BodyPlan::ContextRead { field, .. } => {
                    if !field_names.contains(field) {
                        field_names.push(field.clone());
                    }
                }
                _ => {}
            }
        }
    }
    let mut off: i16 = 8;
    let mut fd_offsets = BTreeMap::new();
    for d in &device_paths {
        fd_offsets.insert(d.clone(), off);
        off += 8;
    }
    let mut field_offsets = BTreeMap::new();
    for f in &field_names {
        field_offsets.insert(f.clone(), off);
        off += 8;
    }
    let ctx_size = off as u64;
    let ctx = asm.bss_alloc(ctx_size);
    asm.define_symbol("ta_context", ctx, ctx_size, false);
    let scratch_buf = asm.bss_alloc(64);
    asm.define_symbol("scratch_buf", scratch_buf, 64, false);
    // QSEE passes the response size by value; its shim parks it here so
    // handlers keep a uniform size-pointer argument.
    let rsp_slot = asm.bss_alloc(8);
    asm.define_symbol("resp_size_slot", rsp_slot, 8, false);
    // Out-of-bounds target: the final 64 bytes of the data segment, so any
    // index above 64 lands on an unmapped page.
    asm.bss_pad_to_page_end(64, PAGE_SIZE);
    let oob = asm.bss_alloc(64);
    asm.define_symbol("oob_buffer", oob, 64, false);

    let filler_word = asm.rodata_bytes(&[0u8; 4]);
    let mut path_labels = BTreeMap::new();
    for d in &device_paths {
        let l = asm.rodata_cstr(d);
        path_labels.insert(d.clone(), l);
    }

    let manifest_fields = field_offsets.clone();
    let mut gen = Gen {
        spec,
        asm,
        simple: 0,
        complex: 0,
        table: SyscallTable::builtin(spec.profile),
        wrappers: BTreeMap::new(),
        ctx,
        oob,
        fd_offsets,
        field_offsets,
        path_labels,
        w64,
        vuln_faults: Vec::new(),
    };
    let _ = scratch_buf;

    // ---- code ---------------------------------------------------------------
    let dispatch = gen.asm.new_label();
    let guard_fn = gen.asm.new_label();
    let filler = gen.asm.new_label();
    let decoys: Vec<Label> = (0..spec.decoy_switches).map(|_| gen.asm.new_label()).collect();
    let handler_labels: BTreeMap<u64, Label> = spec
        .commands
        .iter()
        .map(|c| (c.id, gen.asm.named_label(&format!("handler_{}", c.id))))
        .collect();

    let mut entry_roles: Vec<(&'static str, Label)> = Vec::new();
    match spec.profile {
        TzosName::Teegris => {
            let create = gen.asm.named_label("entry_create");
            gen.asm.bind(create);
            gen.asm.emit(Insn::Movz { rd: 0, imm: 0, hw: 0 });
            gen.asm.ret();
            gen.asm.define_symbol("TA_CreateEntryPoint", create, 8, true);
            entry_roles.push(("create", create));

            let open = gen.asm.named_label("entry_open");
            gen.asm.bind(open);
            gen.asm.emit(Insn::Movz { rd: 0, imm: 0, hw: 0 });
            gen.asm.ret();
            gen.asm.define_symbol("TA_OpenSessionEntryPoint", open, 8, true);
            entry_roles.push(("open", open));

            let invoke = gen.asm.named_label("entry_invoke");
            gen.asm.bind(invoke);
            emit_gp_shim(&mut gen, dispatch, guard_fn, filler, &decoys, false);
            gen.asm.define_symbol("TA_InvokeCommandEntryPoint", invoke, 0, true);
            entry_roles.push(("invoke", invoke));
        }
        TzosName::Optee => {
            let invoke = gen.asm.named_label("entry_invoke");
            gen.asm.bind(invoke);
            emit_gp_shim(&mut gen, dispatch, guard_fn, filler, &decoys, true);
            gen.asm.define_symbol("__ta_entry", invoke, 0, true);
            entry_roles.push(("invoke", invoke));
        }
        TzosName::Trusty => {
            let invoke = gen.asm.named_label("entry_invoke");
            gen.asm.bind(invoke);
            emit_trusty_shim(&mut gen, dispatch, guard_fn, filler, &decoys);
            entry_roles.push(("invoke", invoke));
        }
        TzosName::Qsee => {
            let init = gen.asm.named_label("entry_init");
            gen.asm.bind(init);
            gen.asm.emit(Insn::Movz { rd: 0, imm: 0, hw: 0 });
            gen.asm.ret();
            gen.asm.define_symbol("tz_app_init", init, 8, true);
            entry_roles.push(("init", init));

            let invoke = gen.asm.named_label("entry_invoke");
            gen.asm.bind(invoke);
            emit_qsee_shim(&mut gen, dispatch, guard_fn, filler, &decoys, rsp_slot);
            gen.asm.define_symbol("CApp_invoke", invoke, 0, true);
            entry_roles.push(("invoke", invoke));
        }
    }

    gen.asm.bind(guard_fn);
    emit_guard_fn(&mut gen);

    // Decoy switches: real comparison chains over constants unrelated to
    // the command parameter.
    let max_id = spec.commands.iter().map(|c| c.id).max().unwrap();
    let mut decoy_values = Vec::new();
    for (k, label) in decoys.iter().enumerate() {
        gen.asm.bind(*label);
        let base = max_id + 100 + k as u64 * 10;
        gen.asm.mov_const(SCRATCH, base + 1);
        for j in 0..3u64 {
            let next = gen.asm.new_label();
            decoy_values.push(base + j);
            gen.asm.cmp_const(SCRATCH, base + j, SCRATCH2);
            gen.asm.bcond(Cond::Ne, next);
            gen.simple += 1;
            gen.asm.emit(Insn::Nop);
            gen.asm.bind(next);
        }
        gen.asm.ret();
    }

    let default_label = gen.asm.named_label("dispatch_default");
    gen.asm.bind(dispatch);
    emit_dispatch(&mut gen, &handler_labels, default_label);

    for c in &spec.commands {
        gen.asm.bind(handler_labels[&c.id]);
        emit_handler_body(&mut gen, c.id, &c.plans);
    }

    gen.asm.bind(filler);
    emit_filler(&mut gen, filler_word);
    gen.asm.ret();

    gen.emit_wrapper_bodies();

    // ---- emission -------------------------------------------------------
    let needed: Vec<String> = match spec.profile {
        TzosName::Teegris => vec!["libtzsl.so".into(), "libscrypto.so".into()],
        TzosName::Qsee => vec!["cmnlib.so".into()],
        _ => Vec::new(),
    };
    let uuid = synth_uuid(spec.seed);
    let invoke_off = {
        let l = entry_roles.iter().find(|(r, _)| *r == "invoke").unwrap().1;
        let (sec, off) = gen.asm.label_offset(l).expect("invoke shim is bound");
        debug_assert_eq!(sec, Section::Text);
        TEXT_VADDR + off
    };
    let mut note = format!("uuid={uuid}\n");
    if spec.profile == TzosName::Trusty {
        note.push_str(&format!("msg_handler={invoke_off:#x}\n"));
    }

    let simple_count = gen.simple;
    let complex_count = gen.complex;
    let vuln_faults = gen.vuln_faults.clone();
    let built = build_object(
        gen.asm,
        &ElfOptions {
            width: spec.word_width,
            needed: needed.clone(),
            manifest_note: Some(note),
            stack_size: spec.stack_size,
            entry: invoke_off,
        },
    );

    // ---- stubs ------------------------------------------------------------
    let mut stubs = Vec::new();
    let mut stub_exports: BTreeMap<String, BTreeMap<String, u64>> = BTreeMap::new();
    let mut stub_records = Vec::new();
    let mut stub_svc: BTreeMap<String, Vec<(u64, u16, u32)>> = BTreeMap::new();
    match spec.profile {
        TzosName::Teegris => {
            let (bytes, records, exports, svc) = build_stub(
                spec.profile,
                spec.word_width,
                &[
                    ("tz_open", HandlerId::Open),
                    ("tz_read", HandlerId::Read),
                    ("tz_write", HandlerId::Write),
                    ("tz_close", HandlerId::Close),
                    ("tz_ioctl", HandlerId::Ioctl),
                    ("tz_mmap", HandlerId::Mmap),
                ],
                vec!["libscrypto.so".into()],
            );
            stubs.push(("libtzsl.so".to_string(), bytes));
            stub_exports.insert("libtzsl.so".into(), exports);
            stub_svc.insert("libtzsl.so".into(), svc);
            stub_records.push(records);

            let (bytes, records, exports, svc) = build_stub(
                spec.profile,
                spec.word_width,
                &[
                    ("sc_mem_move", HandlerId::MemMove),
                    ("sc_alloc", HandlerId::Alloc),
                    ("sc_free", HandlerId::Free),
                    ("sc_random", HandlerId::GetRandom),
                ],
                Vec::new(),
            );
            stubs.push(("libscrypto.so".to_string(), bytes));
            stub_exports.insert("libscrypto.so".into(), exports);
            stub_svc.insert("libscrypto.so".into(), svc);
            stub_records.push(records);
        }
        TzosName::Qsee => {
            let (bytes, records, exports, svc) = build_stub(
                spec.profile,
                spec.word_width,
                &[
                    ("cm_open", HandlerId::Open),
                    ("cm_read", HandlerId::Read),
                    ("cm_write", HandlerId::Write),
                    ("cm_close", HandlerId::Close),
                    ("cm_ioctl", HandlerId::Ioctl),
                    ("cm_mmap", HandlerId::Mmap),
                    ("cm_mem_move", HandlerId::MemMove),
                    ("cm_alloc", HandlerId::Alloc),
                    ("cm_free", HandlerId::Free),
                    ("cm_random", HandlerId::GetRandom),
                ],
                Vec::new(),
            );
            stubs.push(("cmnlib.so".to_string(), bytes));
            stub_exports.insert("cmnlib.so".into(), exports);
            stub_svc.insert("cmnlib.so".into(), svc);
            stub_records.push(records);
        }
        _ => {}
    }

    // ---- manifest ---------------------------------------------------------
    let mut manifest = Manifest {
        profile: Some(spec.profile),
        seed: spec.seed,
        word_width: Some(spec.word_width),
        uuid,
        ..Default::default()
    };
    for (role, _label) in &entry_roles {
        let vaddr = built.fin.label_vaddrs[&format!("entry_{role}")];
        manifest.entrypoints.insert(role.to_string(), vaddr);
    }
    for c in &spec.commands {
        manifest
            .commands
            .insert(c.id, built.fin.label_vaddrs[&format!("handler_{}", c.id)]);
        if !c.guard.is_empty() {
            manifest.guards.insert(c.id, c.guard.clone());
        }
    }
    manifest.default_handler = Some(built.fin.label_vaddrs["dispatch_default"]);
    manifest.svc_sites.insert("<ta>".into(), built.fin.svc_sites.clone());
    for (lib, svc) in stub_svc {
        manifest.svc_sites.insert(lib, svc);
    }
    for (a, b, kind) in spec.planted_edges() {
        manifest.dependencies.insert((a, b, kind.to_string()));
    }
    for (name, f_off) in &manifest_fields {
        let mut field = ManifestField {
            name: name.clone(),
            offset: *f_off as u64,
            width: 8,
            writers: Default::default(),
            readers: Default::default(),
        };
        for c in &spec.commands {
            for p in &c.plans {
                match p {
                    BodyPlan::ContextWrite(f) if f == name => {
                        field.writers.insert(c.id);
                    }
                    BodyPlan::ContextRead { field: f, .. } if f == name => {
                        field.readers.insert(c.id);
                    }
                    _ => {}
                }
            }
        }
        manifest.context_fields.push(field);
    }
    for (cmd, fault_off, kind, predicate) in &vuln_faults {
        let guard = spec
            .commands
            .iter()
            .find(|c| c.id == *cmd)
            .map(|c| c.guard.clone())
            .unwrap_or_default();
        let mut trigger = guard;
        trigger.push(*cmd);
        manifest.vulns.push(ManifestVuln {
            kind: *kind,
            cmd: *cmd,
            trigger,
            predicate_gt: *predicate,
            fault_offset: *fault_off,
        });
    }
    manifest.cfg_edges = ground_truth_edge_count(&built.fin.records)
        + stub_records.iter().map(|r| ground_truth_edge_count(r)).sum::<u64>();
    manifest.branch_counts = (simple_count, complex_count);
    manifest.stubs = stub_exports;
    manifest.needed = needed;
    manifest.decoy_values = decoy_values.into_iter().collect();

    let device_script = default_device_script(spec, &device_paths);

    Ok(GeneratedTa { elf: built.bytes, stubs, manifest, device_script })
}

/// A generous canned script: 64 deterministic responses per device path.
fn default_device_script(spec: &TaSpec, paths: &[String]) -> String {
    let mut out = String::new();
    for path in paths {
        out.push_str(&format!("device {path}\n"));
        for i in 0..64u64 {
            let mut h = Fnv64::new();
            h.write_u64(spec.seed);
            h.write(path.as_bytes());
            h.write_u64(i);
            let bytes = h.finish().to_le_bytes();
            out.push_str(&format!("respond {} status 0\n", crate::util::to_hex(&bytes)));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpusgen::spec::DispatchStyle;

    #[test]
    fn generation_is_deterministic() {
        let spec = TaSpec::hdcp_shaped(TzosName::Teegris, 7);
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.elf, b.elf);
        assert_eq!(a.stubs, b.stubs);
        assert_eq!(a.manifest.write_text(), b.manifest.write_text());
    }

    #[test]
    fn zero_commands_rejected() {
        let mut spec = TaSpec::hdcp_shaped(TzosName::Optee, 1);
        spec.commands.clear();
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn filler_counts_hit_target_within_half_point() {
        for (s0, c0, pct) in [(10u64, 5u64, 60u32), (0, 0, 50), (40, 2, 70), (3, 30, 40)] {
            let (ns, nc) = filler_counts(s0, c0, pct);
            let total = (s0 + c0 + ns + nc) as f64;
            let frac = (s0 + ns) as f64 / total;
            assert!(
                (frac - f64::from(pct) / 100.0).abs() <= 0.005,
                "{s0},{c0},{pct} -> {ns},{nc} gives {frac}"
            );
        }
    }

    #[test]
    fn manifests_cover_all_profiles_and_styles() {
        for profile in TzosName::ALL {
            for style in [DispatchStyle::IfElseChain, DispatchStyle::JumpTable] {
                let spec = TaSpec::randomized(profile, 11, style);
                let ta = generate(&spec).unwrap();
                assert_eq!(ta.manifest.commands.len(), spec.commands.len());
                assert!(ta.manifest.cfg_edges > 0);
                if profile == TzosName::Teegris {
                    assert_eq!(ta.manifest.needed, vec!["libtzsl.so", "libscrypto.so"]);
                    assert_eq!(ta.stubs.len(), 2);
                }
            }
        }
    }
}
