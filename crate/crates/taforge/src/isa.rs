//! The fixed-width instruction set interpreted by the execution engine.
//!
//! Every instruction is one little-endian 32-bit word, program counters are
//! 4-aligned, and registers are 64 bits wide (truncated to 32 bits when a
//! 32-bit image runs). The encoding uses the top byte as the primary opcode:
//!
//! ```text
//! 0x01..=0x0b  ALU register      op | rd[23:19] rn[18:14] rm[13:9]
//! 0x11..=0x15  ALU immediate     op | rd[23:19] rn[18:14] imm14[13:0]  (zero-extended)
//! 0x16..=0x18  shift immediate   op | rd[23:19] rn[18:14] imm6[13:8]
//! 0x19 / 0x1a  movz / movk       op | rd[23:19] hw[17:16] imm16[15:0]
//! 0x1b         mov (register)    op | rd[23:19] rn[18:14]
//! 0x20 / 0x21  cmp reg / imm     op |           rn[18:14] rm[13:9] / imm14[13:0]
//! 0x30 / 0x32  b / bl            op | simm24[23:0]        (word offset, ±32 MiB)
//! 0x31         b.cond            op | cond[23:20] simm20[19:0]
//! 0x33..=0x35  br / blr / ret    op |           rn[18:14]
//! 0x36 / 0x37  cbz / cbnz        op | rt[23:19] simm19[18:0]
//! 0x38         adr               op | rd[23:19] simm19[18:0]  (rd = pc + off*4)
//! 0x40..=0x43  ldrb/h/w/d        op | rt[23:19] rn[18:14] simm14[13:0] (byte offset)
//! 0x48..=0x4b  strb/h/w/d        op | rt[23:19] rn[18:14] simm14[13:0]
//! 0xd4         svc               0xd4000001 | imm16 << 5
//! 0xd5         nop               0xd503201f exactly
//! 0xd6         hook call         0xd6000000 | index16   (trampoline slots only)
//! ```
//!
//! `svc` and `nop` reuse the AArch64 encodings so stock disassemblers agree
//! on the supervisor-call sites the rewriter patches. Register numbers 0..=30
//! name the general registers (r30 doubles as the link register); number 31
//! addresses the stack pointer.

/// Bytes per instruction word.
pub const WORD: u64 = 4;

/// Register operand: 0..=30 general purpose, 31 = stack pointer.
pub type Reg = u8;

/// Link register.
pub const LR: Reg = 30;
/// Stack pointer register number.
pub const SP: Reg = 31;

/// Width of the rehosted image's addresses and registers.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize,
)]
pub enum WordWidth {
    W32,
    W64,
}

impl WordWidth {
    pub fn mask(self) -> u64 {
        match self {
            WordWidth::W32 => 0xffff_ffff,
            WordWidth::W64 => u64::MAX,
        }
    }

    /// Pointer size in bytes.
    pub fn bytes(self) -> u64 {
        match self {
            WordWidth::W32 => 4,
            WordWidth::W64 => 8,
        }
    }

    /// Return-to-host sentinel: a 4-aligned address the loader never maps.
    pub fn sentinel(self) -> u64 {
        match self {
            WordWidth::W32 => 0xffff_fffc,
            WordWidth::W64 => 0xffff_ffff_ffff_fffc,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AluOp {
    Add,
    Sub,
    And,
    Orr,
    Eor,
    Mul,
    Udiv,
    Sdiv,
    Lsl,
    Lsr,
    Asr,
}

impl AluOp {
    fn reg_opcode(self) -> u8 {
        match self {
            AluOp::Add => 0x01,
            AluOp::Sub => 0x02,
            AluOp::And => 0x03,
            AluOp::Orr => 0x04,
            AluOp::Eor => 0x05,
            AluOp::Mul => 0x06,
            AluOp::Udiv => 0x07,
            AluOp::Sdiv => 0x08,
            AluOp::Lsl => 0x09,
            AluOp::Lsr => 0x0a,
            AluOp::Asr => 0x0b,
        }
    }

    fn from_reg_opcode(op: u8) -> Option<Self> {
        Some(match op {
            0x01 => AluOp::Add,
            0x02 => AluOp::Sub,
            0x03 => AluOp::And,
            0x04 => AluOp::Orr,
            0x05 => AluOp::Eor,
            0x06 => AluOp::Mul,
            0x07 => AluOp::Udiv,
            0x08 => AluOp::Sdiv,
            0x09 => AluOp::Lsl,
            0x0a => AluOp::Lsr,
            0x0b => AluOp::Asr,
            _ => return None,
        })
    }
}

/// Condition codes for `b.cond`, evaluated against NZCV.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cond {
    Eq,
    Ne,
    Lt,
    Ge,
    Gt,
    Le,
    Lo,
    Hs,
    Hi,
    Ls,
}

impl Cond {
    pub fn bits(self) -> u8 {
        match self {
            Cond::Eq => 0,
            Cond::Ne => 1,
            Cond::Lt => 2,
            Cond::Ge => 3,
            Cond::Gt => 4,
            Cond::Le => 5,
            Cond::Lo => 6,
            Cond::Hs => 7,
            Cond::Hi => 8,
            Cond::Ls => 9,
        }
    }

    pub fn from_bits(bits: u8) -> Option<Self> {
        Some(match bits {
            0 => Cond::Eq,
            1 => Cond::Ne,
            2 => Cond::Lt,
            3 => Cond::Ge,
            4 => Cond::Gt,
            5 => Cond::Le,
            6 => Cond::Lo,
            7 => Cond::Hs,
            8 => Cond::Hi,
            9 => Cond::Ls,
            _ => return None,
        })
    }
}

/// Memory access width for loads and stores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemSize {
    B1,
    B2,
    B4,
    B8,
}

impl MemSize {
    pub fn bytes(self) -> u64 {
        match self {
            MemSize::B1 => 1,
            MemSize::B2 => 2,
            MemSize::B4 => 4,
            MemSize::B8 => 8,
        }
    }

    fn index(self) -> u8 {
        match self {
            MemSize::B1 => 0,
            MemSize::B2 => 1,
            MemSize::B4 => 2,
            MemSize::B8 => 3,
        }
    }

    fn from_index(i: u8) -> Self {
        match i {
            0 => MemSize::B1,
            1 => MemSize::B2,
            2 => MemSize::B4,
            _ => MemSize::B8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Insn {
    AluReg { op: AluOp, rd: Reg, rn: Reg, rm: Reg },
    /// `op rd, rn, #imm14` (zero-extended immediate).
    AluImm { op: AluOp, rd: Reg, rn: Reg, imm: u16 },
    /// Shift by immediate amount 0..=63.
    ShiftImm { op: AluOp, rd: Reg, rn: Reg, amount: u8 },
    Movz { rd: Reg, imm: u16, hw: u8 },
    Movk { rd: Reg, imm: u16, hw: u8 },
    MovReg { rd: Reg, rn: Reg },
    CmpReg { rn: Reg, rm: Reg },
    CmpImm { rn: Reg, imm: u16 },
    /// `offset` is in words relative to this instruction.
    B { offset: i32 },
    Bcond { cond: Cond, offset: i32 },
    Bl { offset: i32 },
    Br { rn: Reg },
    Blr { rn: Reg },
    Ret { rn: Reg },
    Cbz { rt: Reg, offset: i32 },
    Cbnz { rt: Reg, offset: i32 },
    /// `rd = pc + offset * 4`.
    Adr { rd: Reg, offset: i32 },
    Ldr { size: MemSize, rt: Reg, rn: Reg, offset: i16 },
    Str { size: MemSize, rt: Reg, rn: Reg, offset: i16 },
    Svc { imm: u16 },
    Nop,
    /// Engine hook word installed in trampoline slots by the rewriter.
    Hcall { index: u16 },
}

pub const NOP_WORD: u32 = 0xd503_201f;
const SVC_BASE: u32 = 0xd400_0001;
const SVC_MASK: u32 = 0xffe0_001f;
const HCALL_BASE: u32 = 0xd600_0000;

/// True when `word` encodes a supervisor call.
pub fn is_svc(word: u32) -> bool {
    word & SVC_MASK == SVC_BASE
}

/// Immediate carried by a supervisor-call word.
pub fn svc_imm(word: u32) -> u16 {
    ((word >> 5) & 0xffff) as u16
}

pub fn encode_svc(imm: u16) -> u32 {
    SVC_BASE | (u32::from(imm) << 5)
}

fn field(v: u32, hi: u32, lo: u32) -> u32 {
    (v >> lo) & ((1 << (hi - lo + 1)) - 1)
}

fn sext(v: u32, bits: u32) -> i32 {
    let shift = 32 - bits;
    ((v << shift) as i32) >> shift
}

fn fits_signed(v: i64, bits: u32) -> bool {
    let min = -(1i64 << (bits - 1));
    let max = (1i64 << (bits - 1)) - 1;
    v >= min && v <= max
}

/// Word offset between two 4-aligned addresses if it fits a `b`/`bl`
/// immediate (±32 MiB).
pub fn branch_word_offset(from: u64, to: u64) -> Option<i32> {
    let delta = (to as i64).wrapping_sub(from as i64);
    if delta % 4 != 0 {
        return None;
    }
    let words = delta / 4;
    if fits_signed(words, 24) {
        Some(words as i32)
    } else {
        None
    }
}

pub fn encode(insn: &Insn) -> u32 {
    let rd = |r: Reg| (u32::from(r) & 0x1f) << 19;
    let rn = |r: Reg| (u32::from(r) & 0x1f) << 14;
    let rm = |r: Reg| (u32::from(r) & 0x1f) << 9;
    let op = |o: u8| u32::from(o) << 24;
    match *insn {
        Insn::AluReg { op: o, rd: d, rn: n, rm: m } => {
            op(o.reg_opcode()) | rd(d) | rn(n) | rm(m)
        }
        Insn::AluImm { op: o, rd: d, rn: n, imm } => {
            let opc = match o {
                AluOp::Add => 0x11,
                AluOp::Sub => 0x12,
                AluOp::And => 0x13,
                AluOp::Orr => 0x14,
                AluOp::Eor => 0x15,
                _ => panic!("no immediate form for {o:?}"),
            };
            debug_assert!(imm < (1 << 14));
            op(opc) | rd(d) | rn(n) | u32::from(imm & 0x3fff)
        }
        Insn::ShiftImm { op: o, rd: d, rn: n, amount } => {
            let opc = match o {
                AluOp::Lsl => 0x16,
                AluOp::Lsr => 0x17,
                AluOp::Asr => 0x18,
                _ => panic!("no shift-immediate form for {o:?}"),
            };
            op(opc) | rd(d) | rn(n) | ((u32::from(amount) & 0x3f) << 8)
        }
        Insn::Movz { rd: d, imm, hw } => {
            op(0x19) | rd(d) | ((u32::from(hw) & 3) << 16) | u32::from(imm)
        }
        Insn::Movk { rd: d, imm, hw } => {
            op(0x1a) | rd(d) | ((u32::from(hw) & 3) << 16) | u32::from(imm)
        }
        Insn::MovReg { rd: d, rn: n } => op(0x1b) | rd(d) | rn(n),
        Insn::CmpReg { rn: n, rm: m } => op(0x20) | rn(n) | rm(m),
        Insn::CmpImm { rn: n, imm } => {
            debug_assert!(imm < (1 << 14));
            op(0x21) | rn(n) | u32::from(imm & 0x3fff)
        }
        Insn::B { offset } => {
            debug_assert!(fits_signed(offset as i64, 24));
            op(0x30) | ((offset as u32) & 0x00ff_ffff)
        }
        Insn::Bcond { cond, offset } => {
            debug_assert!(fits_signed(offset as i64, 20));
            op(0x31) | (u32::from(cond.bits()) << 20) | ((offset as u32) & 0x000f_ffff)
        }
        Insn::Bl { offset } => {
            debug_assert!(fits_signed(offset as i64, 24));
            op(0x32) | ((offset as u32) & 0x00ff_ffff)
        }
        Insn::Br { rn: n } => op(0x33) | rn(n),
        Insn::Blr { rn: n } => op(0x34) | rn(n),
        Insn::Ret { rn: n } => op(0x35) | rn(n),
        Insn::Cbz { rt, offset } => {
            debug_assert!(fits_signed(offset as i64, 19));
            op(0x36) | rd(rt) | ((offset as u32) & 0x0007_ffff)
        }
        Insn::Cbnz { rt, offset } => {
            debug_assert!(fits_signed(offset as i64, 19));
            op(0x37) | rd(rt) | ((offset as u32) & 0x0007_ffff)
        }
        Insn::Adr { rd: d, offset } => {
            debug_assert!(fits_signed(offset as i64, 19));
            op(0x38) | rd(d) | ((offset as u32) & 0x0007_ffff)
        }
        Insn::Ldr { size, rt, rn: n, offset } => {
            debug_assert!(fits_signed(offset as i64, 14));
            op(0x40 + size.index()) | rd(rt) | rn(n) | ((offset as u32) & 0x3fff)
        }
        Insn::Str { size, rt, rn: n, offset } => {
            debug_assert!(fits_signed(offset as i64, 14));
            op(0x48 + size.index()) | rd(rt) | rn(n) | ((offset as u32) & 0x3fff)
        }
        Insn::Svc { imm } => encode_svc(imm),
        Insn::Nop => NOP_WORD,
        Insn::Hcall { index } => HCALL_BASE | u32::from(index),
    }
}

pub fn decode(word: u32) -> Option<Insn> {
    if is_svc(word) {
        return Some(Insn::Svc { imm: svc_imm(word) });
    }
    if word == NOP_WORD {
        return Some(Insn::Nop);
    }
    if word & 0xffff_0000 == HCALL_BASE {
        return Some(Insn::Hcall { index: (word & 0xffff) as u16 });
    }
    let opc = (word >> 24) as u8;
    let rd = field(word, 23, 19) as Reg;
    let rn = field(word, 18, 14) as Reg;
    let rm = field(word, 13, 9) as Reg;
    let imm14 = field(word, 13, 0) as u16;
    let insn = match opc {
        0x01..=0x0b => {
            if word & 0x1ff != 0 {
                return None;
            }
            Insn::AluReg { op: AluOp::from_reg_opcode(opc)?, rd, rn, rm }
        }
        0x11 => Insn::AluImm { op: AluOp::Add, rd, rn, imm: imm14 },
        0x12 => Insn::AluImm { op: AluOp::Sub, rd, rn, imm: imm14 },
        0x13 => Insn::AluImm { op: AluOp::And, rd, rn, imm: imm14 },
        0x14 => Insn::AluImm { op: AluOp::Orr, rd, rn, imm: imm14 },
        0x15 => Insn::AluImm { op: AluOp::Eor, rd, rn, imm: imm14 },
        0x16 => Insn::ShiftImm { op: AluOp::Lsl, rd, rn, amount: field(word, 13, 8) as u8 },
        0x17 => Insn::ShiftImm { op: AluOp::Lsr, rd, rn, amount: field(word, 13, 8) as u8 },
        0x18 => Insn::ShiftImm { op: AluOp::Asr, rd, rn, amount: field(word, 13, 8) as u8 },
        0x19 => Insn::Movz { rd, imm: (word & 0xffff) as u16, hw: field(word, 17, 16) as u8 },
        0x1a => Insn::Movk { rd, imm: (word & 0xffff) as u16, hw: field(word, 17, 16) as u8 },
        0x1b => Insn::MovReg { rd, rn },
        0x20 => {
            if word & 0x1ff != 0 || rd != 0 {
                return None;
            }
            Insn::CmpReg { rn, rm }
        }
        0x21 => {
            if rd != 0 {
                return None;
            }
            Insn::CmpImm { rn, imm: imm14 }
        }
        0x30 => Insn::B { offset: sext(field(word, 23, 0), 24) },
        0x31 => Insn::Bcond {
            cond: Cond::from_bits(field(word, 23, 20) as u8)?,
            offset: sext(field(word, 19, 0), 20),
        },
        0x32 => Insn::Bl { offset: sext(field(word, 23, 0), 24) },
        0x33 => Insn::Br { rn },
        0x34 => Insn::Blr { rn },
        0x35 => Insn::Ret { rn },
        0x36 => Insn::Cbz { rt: rd, offset: sext(field(word, 18, 0), 19) },
        0x37 => Insn::Cbnz { rt: rd, offset: sext(field(word, 18, 0), 19) },
        0x38 => Insn::Adr { rd, offset: sext(field(word, 18, 0), 19) },
        0x40..=0x43 => Insn::Ldr {
            size: MemSize::from_index(opc - 0x40),
            rt: rd,
            rn,
            offset: sext(field(word, 13, 0), 14) as i16,
        },
        0x48..=0x4b => Insn::Str {
            size: MemSize::from_index(opc - 0x48),
            rt: rd,
            rn,
            offset: sext(field(word, 13, 0), 14) as i16,
        },
        _ => return None,
    };
    Some(insn)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn aarch64_svc_encoding_is_honored() {
        // 0xd4000001 is `svc #0` in the AArch64 reference encoding
        // (0xd4000001 | imm16 << 5); the decoder must agree bit for bit.
        assert!(is_svc(0xd400_0001));
        assert_eq!(decode(0xd400_0001), Some(Insn::Svc { imm: 0 }));
        assert_eq!(decode(0xd400_0421), Some(Insn::Svc { imm: 0x21 }));
        assert_eq!(encode_svc(0), 0xd400_0001);
        for imm in [0u16, 1, 7, 0x1234, 0xffff] {
            let w = encode_svc(imm);
            assert!(is_svc(w));
            // Independent extraction straight from the reference formula.
            assert_eq!((w >> 5) & 0xffff, u32::from(imm));
        }
    }

    #[test]
    fn zero_word_is_illegal() {
        assert_eq!(decode(0), None);
    }

    #[test]
    fn nop_is_aarch64_nop() {
        assert_eq!(decode(0xd503_201f), Some(Insn::Nop));
        assert_eq!(decode(0xd503_201e), None);
    }

    #[test]
    fn branch_offsets_cover_32mib() {
        assert!(branch_word_offset(0x1000, 0x1000 + (32 << 20) - 4).is_some());
        assert!(branch_word_offset(0x1000, 0x1000 + (32 << 20) + 4).is_none());
        assert!(branch_word_offset(0x4000_0000, 0x4000_0000 - (32 << 20)).is_some());
        assert_eq!(branch_word_offset(0x1000, 0x1004), Some(1));
    }

    fn arb_reg() -> impl Strategy<Value = Reg> {
        0u8..=31
    }

    fn arb_insn() -> impl Strategy<Value = Insn> {
        prop_oneof![
            (0u8..=10, arb_reg(), arb_reg(), arb_reg()).prop_map(|(o, rd, rn, rm)| {
                let op = AluOp::from_reg_opcode(o + 1).unwrap();
                Insn::AluReg { op, rd, rn, rm }
            }),
            (arb_reg(), arb_reg(), 0u16..(1 << 14)).prop_map(|(rd, rn, imm)| Insn::AluImm {
                op: AluOp::Add,
                rd,
                rn,
                imm
            }),
            (arb_reg(), any::<u16>(), 0u8..=3)
                .prop_map(|(rd, imm, hw)| Insn::Movz { rd, imm, hw }),
            (-(1i32 << 23)..(1 << 23)).prop_map(|offset| Insn::B { offset }),
            (-(1i32 << 19)..(1 << 19)).prop_map(|offset| Insn::Bcond {
                cond: Cond::Lo,
                offset
            }),
            (arb_reg(), -(1i32 << 18)..(1 << 18))
                .prop_map(|(rt, offset)| Insn::Cbz { rt, offset }),
            (arb_reg(), arb_reg(), -(1i16 << 13)..(1 << 13)).prop_map(|(rt, rn, offset)| {
                Insn::Ldr { size: MemSize::B8, rt, rn, offset }
            }),
            (arb_reg(), arb_reg(), -(1i16 << 13)..(1 << 13)).prop_map(|(rt, rn, offset)| {
                Insn::Str { size: MemSize::B1, rt, rn, offset }
            }),
            any::<u16>().prop_map(|imm| Insn::Svc { imm }),
            any::<u16>().prop_map(|index| Insn::Hcall { index }),
        ]
    }

    proptest! {
        #[test]
        fn encode_decode_roundtrip(insn in arb_insn()) {
            prop_assert_eq!(decode(encode(&insn)), Some(insn));
        }
    }
}
