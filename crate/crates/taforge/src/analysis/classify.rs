//! Conditional-branch complexity: a conditional is SIMPLE when its decisive
//! comparison reads immediates, constants or parameters; COMPLEX when an
//! operand's reaching definition loads through a pointer.

use std::collections::BTreeMap;

use crate::isa::Insn;

use super::absint::{analyze_fn, AbsVal, FnAnalysis};
use super::cfg::{Cfg, Terminator};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchClass {
    Simple,
    Complex,
}

#[derive(Debug, Clone, Default)]
pub struct BranchComplexity {
    pub labels: BTreeMap<u64, BranchClass>,
    pub simple: u64,
    pub complex: u64,
}

impl BranchComplexity {
    pub fn simple_fraction(&self) -> f64 {
        let total = self.simple + self.complex;
        if total == 0 {
            return 0.0;
        }
        self.simple as f64 / total as f64
    }

    pub fn complex_fraction(&self) -> f64 {
        let total = self.simple + self.complex;
        if total == 0 {
            return 0.0;
        }
        self.complex as f64 / total as f64
    }
}

/// Label every conditional block in the CFG. Each block's decisive operands
/// come from the owning function's abstract state; a conditional outside
/// any recovered function defaults to SIMPLE (nothing ties it to memory).
pub fn classify_branches(cfg: &Cfg) -> BranchComplexity {
    let mut walks: BTreeMap<u64, FnAnalysis> = BTreeMap::new();
    for &entry in cfg.functions.keys() {
        walks.insert(entry, analyze_fn(cfg, entry, &BTreeMap::new()));
    }
    // Block -> owning function (first wins deterministically).
    let mut owner: BTreeMap<u64, u64> = BTreeMap::new();
    for (&entry, blocks) in &cfg.functions {
        for &b in blocks {
            owner.entry(b).or_insert(entry);
        }
    }

    let mut out = BranchComplexity::default();
    for (&start, block) in &cfg.blocks {
        if !matches!(block.term, Terminator::CondBranch { .. }) {
            continue;
        }
        let operands = owner
            .get(&start)
            .and_then(|entry| walks.get(entry))
            .map(|walk| decisive_operands(cfg, walk, start))
            .unwrap_or_default();
        let complex = operands.iter().any(AbsVal::from_memory);
        let class = if complex { BranchClass::Complex } else { BranchClass::Simple };
        out.labels.insert(start, class);
        match class {
            BranchClass::Simple => out.simple += 1,
            BranchClass::Complex => out.complex += 1,
        }
    }
    out
}

fn decisive_operands(cfg: &Cfg, walk: &FnAnalysis, block_start: u64) -> Vec<AbsVal> {
    let block = &cfg.blocks[&block_start];
    let (term_addr, term) = match block.insns.last() {
        Some((a, i)) => (*a, i),
        None => return Vec::new(),
    };
    match term {
        Insn::Cbz { rt, .. } | Insn::Cbnz { rt, .. } => {
            vec![walk.value_before(cfg, term_addr, *rt)]
        }
        Insn::Bcond { .. } => {
            // The flag-setting compare sits in the same block on this
            // compiler's output; scan backward for it.
            for (addr, insn) in block.insns.iter().rev().skip(1) {
                match insn {
                    Insn::CmpReg { rn, rm } => {
                        return vec![
                            walk.value_before(cfg, *addr, *rn),
                            walk.value_before(cfg, *addr, *rm),
                        ]
                    }
                    Insn::CmpImm { rn, imm } => {
                        return vec![
                            walk.value_before(cfg, *addr, *rn),
                            AbsVal::Const(u64::from(*imm)),
                        ]
                    }
                    _ => {}
                }
            }
            Vec::new()
        }
        _ => Vec::new(),
    }
}
