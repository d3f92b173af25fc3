//! Label-based assembler for the engine's instruction set.
//!
//! Besides the raw words, the assembler keeps per-instruction marks (branch
//! targets, call sites, jump tables, svc numbers). Those records are the
//! generator's own ground truth for the manifest: block and edge counts are
//! derived from them, independently of any later disassembly of the image.

use std::collections::BTreeMap;

use crate::isa::{self, AluOp, Cond, Insn, MemSize, Reg};
use crate::util::align_up;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Section {
    Text,
    Rodata,
    Data,
    Bss,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Label(usize);

/// Ground-truth classification of one emitted instruction.
#[derive(Debug, Clone)]
pub enum Mark {
    Plain,
    B(Label),
    Bcond(Label),
    Cbz(Label),
    Cbnz(Label),
    Bl(Label),
    /// Register call whose target binds to an imported symbol at link time.
    BlrImport(String),
    /// Tail jump through a register bound to an imported symbol (thunk body).
    BrImport(String),
    /// Table-driven indirect branch with the full resolved target set.
    BrTable(Vec<Label>),
    Ret,
    Svc { number: u32 },
}

#[derive(Debug, Clone, Copy)]
enum Fixup {
    B { word: usize, label: Label },
    Bcond { word: usize, label: Label },
    Cbz { word: usize, label: Label },
    Adr { word: usize, label: Label },
}

#[derive(Debug, Clone)]
struct TableSlot {
    rodata_off: u64,
    target: Label,
}

#[derive(Debug, Clone)]
struct MovwPair {
    movz_word: usize,
    movk_word: usize,
    symbol: String,
}

#[derive(Debug, Clone)]
pub struct SymbolDef {
    pub name: String,
    pub section: Section,
    pub offset: u64,
    pub size: u64,
    pub is_func: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct SectionAddrs {
    pub text: u64,
    pub rodata: u64,
    pub data: u64,
    pub bss: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelocKind {
    /// Pointer-size absolute: S + A.
    AbsPtr,
    /// Bits [15:0] of S + A into a movz immediate.
    MovwG0,
    /// Bits [31:16] of S + A into a movk immediate.
    MovwG1,
}

impl RelocKind {
    /// Relocation numbers follow the native convention of each class:
    /// AArch64 ABS64 / MOVW_UABS_G0_NC / G1_NC on 64-bit images, ARM
    /// ABS32 / MOVW_ABS_NC / MOVT_ABS on 32-bit ones.
    pub fn code(self, is64: bool) -> u32 {
        match (self, is64) {
            (RelocKind::AbsPtr, true) => 257,
            (RelocKind::MovwG0, true) => 263,
            (RelocKind::MovwG1, true) => 265,
            (RelocKind::AbsPtr, false) => 2,
            (RelocKind::MovwG0, false) => 43,
            (RelocKind::MovwG1, false) => 44,
        }
    }

    pub fn from_code(code: u32, is64: bool) -> Option<RelocKind> {
        Some(match (code, is64) {
            (257, true) | (2, false) => RelocKind::AbsPtr,
            (263, true) | (43, false) => RelocKind::MovwG0,
            (265, true) | (44, false) => RelocKind::MovwG1,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone)]
pub enum SymRef {
    /// Undefined symbol resolved from another object at link time.
    Import(String),
    /// Section-base symbol of this object.
    Section(Section),
}

#[derive(Debug, Clone)]
pub struct RelocOut {
    pub vaddr: u64,
    pub kind: RelocKind,
    pub sym: SymRef,
    pub addend: i64,
}

/// One emitted instruction with its resolved address; feeds the manifest's
/// block/edge ground truth.
#[derive(Debug, Clone)]
pub struct InsnRecord {
    pub vaddr: u64,
    pub mark: ResolvedMark,
}

#[derive(Debug, Clone)]
pub enum ResolvedMark {
    Plain,
    B(u64),
    Bcond(u64),
    Bl(u64),
    BlrImport,
    BrImport,
    BrTable(Vec<u64>),
    Ret,
    Svc { number: u32 },
}

#[derive(Debug)]
pub struct Finalized {
    pub text: Vec<u8>,
    pub rodata: Vec<u8>,
    pub data: Vec<u8>,
    pub bss_len: u64,
    pub symbols: Vec<SymbolDef>,
    pub imports: Vec<String>,
    pub relocs: Vec<RelocOut>,
    pub records: Vec<InsnRecord>,
    pub svc_sites: Vec<(u64, u16, u32)>,
    pub label_vaddrs: BTreeMap<String, u64>,
}

pub struct Asm {
    words: Vec<u32>,
    marks: Vec<Mark>,
    rodata: Vec<u8>,
    data: Vec<u8>,
    bss_len: u64,
    labels: Vec<Option<(Section, u64)>>,
    named_labels: Vec<(String, Label)>,
    fixups: Vec<Fixup>,
    table_slots: Vec<TableSlot>,
    movw_pairs: Vec<MovwPair>,
    symbols: Vec<SymbolDef>,
    imports: Vec<String>,
    ptr_bytes: u64,
}

impl Asm {
    pub fn new(ptr_bytes: u64) -> Self {
        Asm {
            words: Vec::new(),
            marks: Vec::new(),
            rodata: Vec::new(),
            data: Vec::new(),
            bss_len: 0,
            labels: Vec::new(),
            named_labels: Vec::new(),
            fixups: Vec::new(),
            table_slots: Vec::new(),
            movw_pairs: Vec::new(),
            symbols: Vec::new(),
            imports: Vec::new(),
            ptr_bytes,
        }
    }

    pub fn new_label(&mut self) -> Label {
        self.labels.push(None);
        Label(self.labels.len() - 1)
    }

    pub fn named_label(&mut self, name: &str) -> Label {
        let l = self.new_label();
        self.named_labels.push((name.to_string(), l));
        l
    }

    pub fn here(&self) -> u64 {
        self.words.len() as u64 * 4
    }

    pub fn bind(&mut self, label: Label) {
        debug_assert!(self.labels[label.0].is_none(), "label bound twice");
        self.labels[label.0] = Some((Section::Text, self.here()));
    }

    pub fn bound_label(&mut self) -> Label {
        let l = self.new_label();
        self.bind(l);
        l
    }

    fn push(&mut self, insn: Insn, mark: Mark) {
        self.words.push(isa::encode(&insn));
        self.marks.push(mark);
    }

    pub fn emit(&mut self, insn: Insn) {
        debug_assert!(!matches!(
            insn,
            Insn::B { .. }
                | Insn::Bcond { .. }
                | Insn::Bl { .. }
                | Insn::Cbz { .. }
                | Insn::Cbnz { .. }
                | Insn::Ret { .. }
                | Insn::Svc { .. }
                | Insn::Br { .. }
                | Insn::Blr { .. }
        ));
        self.push(insn, Mark::Plain);
    }

    pub fn b(&mut self, label: Label) {
        self.fixups.push(Fixup::B { word: self.words.len(), label });
        self.push(Insn::B { offset: 0 }, Mark::B(label));
    }

    pub fn bcond(&mut self, cond: Cond, label: Label) {
        self.fixups.push(Fixup::Bcond { word: self.words.len(), label });
        self.push(Insn::Bcond { cond, offset: 0 }, Mark::Bcond(label));
    }

    pub fn cbz(&mut self, rt: Reg, label: Label) {
        self.fixups.push(Fixup::Cbz { word: self.words.len(), label });
        self.push(Insn::Cbz { rt, offset: 0 }, Mark::Cbz(label));
    }

    pub fn cbnz(&mut self, rt: Reg, label: Label) {
        self.fixups.push(Fixup::Cbz { word: self.words.len(), label });
        self.push(Insn::Cbnz { rt, offset: 0 }, Mark::Cbnz(label));
    }

    pub fn bl(&mut self, label: Label) {
        self.fixups.push(Fixup::B { word: self.words.len(), label });
        self.push(Insn::Bl { offset: 0 }, Mark::Bl(label));
    }

    pub fn adr(&mut self, rd: Reg, label: Label) {
        self.fixups.push(Fixup::Adr { word: self.words.len(), label });
        self.push(Insn::Adr { rd, offset: 0 }, Mark::Plain);
    }

    pub fn ret(&mut self) {
        self.push(Insn::Ret { rn: isa::LR }, Mark::Ret);
    }

    pub fn svc(&mut self, imm: u16, number: u32) {
        self.push(Insn::Svc { imm }, Mark::Svc { number });
    }

    /// Indirect branch through a jump table; `targets` in table order.
    pub fn br_table(&mut self, rn: Reg, targets: Vec<Label>) {
        self.push(Insn::Br { rn }, Mark::BrTable(targets));
    }

    /// Materialize an imported symbol's address (two movw relocations) and
    /// tail-jump to it. This is the import thunk body.
    pub fn br_import(&mut self, scratch: Reg, symbol: &str) {
        self.movw_import(scratch, symbol);
        self.push(Insn::Br { rn: scratch }, Mark::BrImport(symbol.to_string()));
    }

    pub fn blr_import(&mut self, scratch: Reg, symbol: &str) {
        self.movw_import(scratch, symbol);
        self.push(Insn::Blr { rn: scratch }, Mark::BlrImport(symbol.to_string()));
    }

    fn movw_import(&mut self, rd: Reg, symbol: &str) {
        let movz_word = self.words.len();
        self.push(Insn::Movz { rd, imm: 0, hw: 0 }, Mark::Plain);
        let movk_word = self.words.len();
        self.push(Insn::Movk { rd, imm: 0, hw: 1 }, Mark::Plain);
        self.movw_pairs.push(MovwPair { movz_word, movk_word, symbol: symbol.to_string() });
        if !self.imports.iter().any(|i| i == symbol) {
            self.imports.push(symbol.to_string());
        }
    }

    /// Load an arbitrary 64-bit constant with a movz/movk chain.
    pub fn mov_const(&mut self, rd: Reg, value: u64) {
        self.emit(Insn::Movz { rd, imm: (value & 0xffff) as u16, hw: 0 });
        for hw in 1..4u8 {
            let chunk = ((value >> (16 * hw)) & 0xffff) as u16;
            if chunk != 0 {
                self.emit(Insn::Movk { rd, imm: chunk, hw });
            }
        }
    }

    /// Compare a register against an arbitrary constant, spilling to a
    /// scratch register when the value exceeds the 14-bit immediate.
    pub fn cmp_const(&mut self, rn: Reg, value: u64, scratch: Reg) {
        if value < (1 << 14) {
            self.push(Insn::CmpImm { rn, imm: value as u16 }, Mark::Plain);
        } else {
            self.mov_const(scratch, value);
            self.push(Insn::CmpReg { rn, rm: scratch }, Mark::Plain);
        }
    }

    pub fn cmp_reg(&mut self, rn: Reg, rm: Reg) {
        self.push(Insn::CmpReg { rn, rm }, Mark::Plain);
    }

    pub fn mov(&mut self, rd: Reg, rn: Reg) {
        self.emit(Insn::MovReg { rd, rn });
    }

    pub fn add_imm(&mut self, rd: Reg, rn: Reg, imm: u16) {
        self.emit(Insn::AluImm { op: AluOp::Add, rd, rn, imm });
    }

    pub fn sub_imm(&mut self, rd: Reg, rn: Reg, imm: u16) {
        self.emit(Insn::AluImm { op: AluOp::Sub, rd, rn, imm });
    }

    pub fn ldr(&mut self, size: MemSize, rt: Reg, rn: Reg, offset: i16) {
        self.emit(Insn::Ldr { size, rt, rn, offset });
    }

    pub fn str_(&mut self, size: MemSize, rt: Reg, rn: Reg, offset: i16) {
        self.emit(Insn::Str { size, rt, rn, offset });
    }

    // ---- data sections ------------------------------------------------

    pub fn rodata_bytes(&mut self, bytes: &[u8]) -> Label {
        let off = align_up(self.rodata.len() as u64, 8);
        self.rodata.resize(off as usize, 0);
        let l = self.new_label();
        self.labels[l.0] = Some((Section::Rodata, off));
        self.rodata.extend_from_slice(bytes);
        l
    }

    pub fn rodata_cstr(&mut self, s: &str) -> Label {
        let mut bytes = s.as_bytes().to_vec();
        bytes.push(0);
        self.rodata_bytes(&bytes)
    }

    /// Reserve a pointer-size jump-table slot whose final content is the
    /// absolute address of `target`, kept correct across rebasing by an
    /// absolute relocation against the text section symbol.
    pub fn rodata_table(&mut self, targets: &[Label]) -> Label {
        let off = align_up(self.rodata.len() as u64, 8);
        self.rodata.resize(off as usize, 0);
        let l = self.new_label();
        self.labels[l.0] = Some((Section::Rodata, off));
        for &t in targets {
            let slot_off = self.rodata.len() as u64;
            self.rodata.extend_from_slice(&vec![0u8; self.ptr_bytes as usize]);
            self.table_slots.push(TableSlot { rodata_off: slot_off, target: t });
        }
        l
    }

    pub fn data_bytes(&mut self, bytes: &[u8]) -> Label {
        let off = align_up(self.data.len() as u64, 8);
        self.data.resize(off as usize, 0);
        let l = self.new_label();
        self.labels[l.0] = Some((Section::Data, off));
        self.data.extend_from_slice(bytes);
        l
    }

    /// Zero-initialized allocation carried as bss (memsz beyond filesz).
    pub fn bss_alloc(&mut self, len: u64) -> Label {
        let off = align_up(self.bss_len, 8);
        self.bss_len = off + len;
        let l = self.new_label();
        self.labels[l.0] = Some((Section::Bss, off));
        l
    }

    /// Pad bss so that the next allocation of `tail` bytes ends exactly on a
    /// page boundary of the whole data+bss span. The bss base follows the
    /// 8-aligned end of file-backed data, mirroring the object writer.
    pub fn bss_pad_to_page_end(&mut self, tail: u64, page: u64) {
        let data_len = align_up(self.data.len() as u64, 8);
        let total = data_len + align_up(self.bss_len, 8) + tail;
        let padded = align_up(total, page);
        self.bss_len = padded - tail - data_len;
    }

    pub fn symbols(&self) -> &[SymbolDef] {
        &self.symbols
    }

    /// Section and offset of a bound label; text offsets are final as soon
    /// as the label is bound.
    pub fn label_offset(&self, label: Label) -> Option<(Section, u64)> {
        self.labels[label.0]
    }

    pub fn imports(&self) -> &[String] {
        &self.imports
    }

    pub fn reloc_count(&self) -> usize {
        self.table_slots.len() + self.movw_pairs.len() * 2
    }

    pub fn define_symbol(&mut self, name: &str, at: Label, size: u64, is_func: bool) {
        let (section, offset) = self.labels[at.0].expect("symbol label must be bound");
        self.symbols.push(SymbolDef { name: name.to_string(), section, offset, size, is_func });
    }

    pub fn text_len(&self) -> u64 {
        self.words.len() as u64 * 4
    }

    pub fn rodata_len(&self) -> u64 {
        self.rodata.len() as u64
    }

    pub fn data_len(&self) -> u64 {
        self.data.len() as u64
    }

    pub fn bss_len(&self) -> u64 {
        self.bss_len
    }

    fn label_vaddr(&self, label: Label, addrs: &SectionAddrs) -> u64 {
        let (section, off) = self.labels[label.0].expect("unbound label at finalize");
        let base = match section {
            Section::Text => addrs.text,
            Section::Rodata => addrs.rodata,
            Section::Data => addrs.data,
            Section::Bss => addrs.bss,
        };
        base + off
    }

    pub fn finalize(mut self, addrs: &SectionAddrs) -> Finalized {
        // Patch branch and adr immediates now that every label has a vaddr.
        for fixup in self.fixups.clone() {
            match fixup {
                Fixup::B { word, label } => {
                    let from = addrs.text + word as u64 * 4;
                    let to = self.label_vaddr(label, addrs);
                    let off = isa::branch_word_offset(from, to).expect("branch out of range");
                    let old = self.words[word];
                    self.words[word] = (old & 0xff00_0000) | ((off as u32) & 0x00ff_ffff);
                }
                Fixup::Bcond { word, label } => {
                    let from = addrs.text + word as u64 * 4;
                    let to = self.label_vaddr(label, addrs);
                    let off = isa::branch_word_offset(from, to).expect("bcond out of range");
                    assert!(off >= -(1 << 19) && off < (1 << 19), "bcond out of range");
                    let old = self.words[word];
                    self.words[word] = (old & 0xfff0_0000) | ((off as u32) & 0x000f_ffff);
                }
                Fixup::Cbz { word, label } => {
                    let from = addrs.text + word as u64 * 4;
                    let to = self.label_vaddr(label, addrs);
                    let off = isa::branch_word_offset(from, to).expect("cbz out of range");
                    assert!(off >= -(1 << 18) && off < (1 << 18), "cbz out of range");
                    let old = self.words[word];
                    self.words[word] = (old & 0xfff8_0000) | ((off as u32) & 0x0007_ffff);
                }
                Fixup::Adr { word, label } => {
                    let from = addrs.text + word as u64 * 4;
                    let to = self.label_vaddr(label, addrs);
                    let off = isa::branch_word_offset(from, to).expect("adr target unaligned");
                    assert!(off >= -(1 << 18) && off < (1 << 18), "adr out of range");
                    let old = self.words[word];
                    self.words[word] = (old & 0xfff8_0000) | ((off as u32) & 0x0007_ffff);
                }
            }
        }

        let mut relocs = Vec::new();

        // Jump-table slots: prefill with the link-time address and emit an
        // absolute relocation against the text section base.
        for slot in &self.table_slots {
            let target = self.label_vaddr(slot.target, addrs);
            let off = slot.rodata_off as usize;
            let bytes = target.to_le_bytes();
            self.rodata[off..off + self.ptr_bytes as usize]
                .copy_from_slice(&bytes[..self.ptr_bytes as usize]);
            relocs.push(RelocOut {
                vaddr: addrs.rodata + slot.rodata_off,
                kind: RelocKind::AbsPtr,
                sym: SymRef::Section(Section::Text),
                addend: (target - addrs.text) as i64,
            });
        }

        // Import call sites: movz/movk pair patched by the loader.
        for pair in &self.movw_pairs {
            relocs.push(RelocOut {
                vaddr: addrs.text + pair.movz_word as u64 * 4,
                kind: RelocKind::MovwG0,
                sym: SymRef::Import(pair.symbol.clone()),
                addend: 0,
            });
            relocs.push(RelocOut {
                vaddr: addrs.text + pair.movk_word as u64 * 4,
                kind: RelocKind::MovwG1,
                sym: SymRef::Import(pair.symbol.clone()),
                addend: 0,
            });
        }

        let records: Vec<InsnRecord> = self
            .marks
            .iter()
            .enumerate()
            .map(|(i, mark)| {
                let vaddr = addrs.text + i as u64 * 4;
                let resolved = match mark {
                    Mark::Plain => ResolvedMark::Plain,
                    Mark::B(l) => ResolvedMark::B(self.label_vaddr(*l, addrs)),
                    Mark::Bcond(l) | Mark::Cbz(l) | Mark::Cbnz(l) => {
                        ResolvedMark::Bcond(self.label_vaddr(*l, addrs))
                    }
                    Mark::Bl(l) => ResolvedMark::Bl(self.label_vaddr(*l, addrs)),
                    Mark::BlrImport(_) => ResolvedMark::BlrImport,
                    Mark::BrImport(_) => ResolvedMark::BrImport,
                    Mark::BrTable(ts) => ResolvedMark::BrTable(
                        ts.iter().map(|t| self.label_vaddr(*t, addrs)).collect(),
                    ),
                    Mark::Ret => ResolvedMark::Ret,
                    Mark::Svc { number } => ResolvedMark::Svc { number: *number },
                };
                InsnRecord { vaddr, mark: resolved }
            })
            .collect();

        let svc_sites = records
            .iter()
            .filter_map(|r| match r.mark {
                ResolvedMark::Svc { number } => {
                    let word = self.words[((r.vaddr - addrs.text) / 4) as usize];
                    Some((r.vaddr, isa::svc_imm(word), number))
                }
                _ => None,
            })
            .collect();

        let label_vaddrs = self
            .named_labels
            .iter()
            .map(|(name, l)| (name.clone(), self.label_vaddr(*l, addrs)))
            .collect();

        let text = self.words.iter().flat_map(|w| w.to_le_bytes()).collect();
        Finalized {
            text,
            rodata: self.rodata,
            data: self.data,
            bss_len: self.bss_len,
            symbols: self.symbols,
            imports: self.imports,
            relocs,
            records,
            svc_sites,
            label_vaddrs,
        }
    }
}

/// Count CFG edges from emission records, mirroring the block-splitting rules
/// the analyzer applies to decoded words: blocks split at branch targets and
/// terminators; conditionals and calls add a fall-through edge; indirect
/// table branches add one edge per distinct target; returns add none.
pub fn ground_truth_edge_count(records: &[InsnRecord]) -> u64 {
    use std::collections::BTreeSet;
    let mut leaders: BTreeSet<u64> = BTreeSet::new();
    let text_lo = records.first().map(|r| r.vaddr).unwrap_or(0);
    let text_hi = records.last().map(|r| r.vaddr + 4).unwrap_or(0);
    let mut local = |t: u64| {
        if t >= text_lo && t < text_hi {
            leaders.insert(t);
        }
    };
    for r in records {
        match &r.mark {
            ResolvedMark::B(t) | ResolvedMark::Bcond(t) | ResolvedMark::Bl(t) => local(*t),
            ResolvedMark::BrTable(ts) => ts.iter().for_each(|t| local(*t)),
            _ => {}
        }
    }
    let mut edges = 0u64;
    for (i, r) in records.iter().enumerate() {
        let next_is_leader =
            i + 1 < records.len() && leaders.contains(&records[i + 1].vaddr);
        match &r.mark {
            ResolvedMark::Plain => {
                if next_is_leader {
                    edges += 1;
                }
            }
            ResolvedMark::B(_) => edges += 1,
            ResolvedMark::Bcond(_) => edges += 2,
            ResolvedMark::Bl(_) => edges += 2,
            ResolvedMark::BlrImport => edges += 2,
            ResolvedMark::BrImport => edges += 1,
            ResolvedMark::BrTable(ts) => {
                let distinct: BTreeSet<u64> = ts.iter().copied().collect();
                edges += distinct.len() as u64;
            }
            ResolvedMark::Ret => {}
            ResolvedMark::Svc { .. } => edges += 1,
        }
    }
    edges
}
