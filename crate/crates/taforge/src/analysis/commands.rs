//! Command-ID enumeration: comparison chains and jump tables whose
//! scrutinee is tainted by the invoke entrypoint's command-id parameter.
//! Comparisons over values not inherited from the entrypoint (decoy
//! switches, parameter-type checks, guard words) are filtered out.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::loader::LoadedImage;
use crate::profile::{ParamConvention, TzosProfile, TEE_ERROR_INVALID_COMMAND};

use super::absint::{analyze_fn, AbsVal, FnAnalysis};
use super::cfg::{Cfg, EdgeKind, Terminator};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct CommandId {
    pub value: u64,
    pub handler_addr: u64,
    pub dispatch_site: u64,
}

#[derive(Debug, Clone, Default)]
pub struct CommandIdSet {
    pub ids: BTreeSet<CommandId>,
    pub default_handler: Option<u64>,
}

impl CommandIdSet {
    pub fn values(&self) -> BTreeSet<u64> {
        self.ids.iter().map(|c| c.value).collect()
    }

    pub fn handler_of(&self, value: u64) -> Option<u64> {
        self.ids.iter().find(|c| c.value == value).map(|c| c.handler_addr)
    }
}

/// Seed the invoke function's abstract state per the profile convention:
/// the command-id register is tainted on the register conventions; on the
/// QSEE buffer convention the request pointer is tracked and only a load at
/// its command offset yields taint.
fn invoke_seed(profile: &TzosProfile) -> BTreeMap<u8, AbsVal> {
    let mut seed = BTreeMap::new();
    match profile.param_convention {
        ParamConvention::GpRegisters { cmd_reg } => {
            seed.insert(cmd_reg, AbsVal::Tainted);
        }
        ParamConvention::QseeBuffer { .. } => {
            seed.insert(0, AbsVal::ReqPtr(0));
        }
    }
    seed
}

/// Walks of the invoke entry function plus one level of call inlining:
/// every resolved call out of the entry is re-analyzed with the caller's
/// argument values as its seed, so taint follows into the dispatcher.
fn entry_walks(cfg: &Cfg, invoke_entry: u64, profile: &TzosProfile) -> Vec<FnAnalysis> {
    let mut walks = Vec::new();
    let top = analyze_fn(cfg, invoke_entry, &invoke_seed(profile));
    let calls = top.calls.clone();
    walks.push(top);
    let mut seen = BTreeSet::new();
    for call in calls {
        let Some(target) = call.target else { continue };
        if !cfg.functions.contains_key(&target) || !seen.insert(target) {
            continue;
        }
        let mut seed = BTreeMap::new();
        for (i, v) in call.args.iter().enumerate() {
            match v {
                AbsVal::Tainted | AbsVal::ReqPtr(_) => {
                    seed.insert(i as u8, v.clone());
                }
                _ => {}
            }
        }
        walks.push(analyze_fn(cfg, target, &seed));
    }
    walks
}

/// First call target reachable from an arm block inside the dispatch
/// function: that call is the handler invocation.
fn handler_from_arm(cfg: &Cfg, walk: &FnAnalysis, arm: u64) -> Option<u64> {
    let function = cfg.function_of(cfg.block_containing(arm)?.start)?;
    let blocks = &cfg.functions[&function];
    let mut queue = VecDeque::from([cfg.block_containing(arm)?.start]);
    let mut seen = BTreeSet::new();
    let _ = walk;
    while let Some(b) = queue.pop_front() {
        if !seen.insert(b) {
            continue;
        }
        let block = &cfg.blocks[&b];
        if let Terminator::Call { target: Some(t) } = block.term {
            return Some(t);
        }
        for (s, d, k) in cfg
            .edges
            .range((b, 0, EdgeKind::Fallthrough)..)
            .take_while(|(s, _, _)| *s == b)
        {
            debug_assert_eq!(*s, b);
            if *k != EdgeKind::Call && blocks.contains(d) {
                queue.push_back(*d);
            }
        }
    }
    None
}

/// The default arm is the block that materializes the invalid-command
/// status into the return register.
fn find_default_handler(cfg: &Cfg, walks: &[FnAnalysis]) -> Option<u64> {
    for walk in walks {
        for &b in walk.block_entry.keys() {
            let block = &cfg.blocks[&b];
            for (i, (_, insn)) in block.insns.iter().enumerate() {
                if let crate::isa::Insn::Movz { rd: 0, imm, hw: 0 } = insn {
                    let mut val = u64::from(*imm);
                    for (_, later) in &block.insns[i + 1..] {
                        if let crate::isa::Insn::Movk { rd: 0, imm, hw } = later {
                            val |= u64::from(*imm) << (16 * hw);
                        } else {
                            break;
                        }
                    }
                    if val == TEE_ERROR_INVALID_COMMAND {
                        return Some(b);
                    }
                }
            }
        }
    }
    None
}

pub fn enumerate_command_ids(
    cfg: &Cfg,
    image: &LoadedImage,
    invoke_entry: u64,
    profile: &TzosProfile,
) -> CommandIdSet {
    let _ = image;
    let walks = entry_walks(cfg, invoke_entry, profile);
    let mut out = CommandIdSet::default();

    for walk in &walks {
        // Comparison chains: tainted scrutinee against a constant, with the
        // equal path selecting the arm.
        for cmp in &walk.compares {
            let value = match (&cmp.lhs, &cmp.rhs) {
                (AbsVal::Tainted, AbsVal::Const(c)) | (AbsVal::Const(c), AbsVal::Tainted) => *c,
                _ => continue,
            };
            let block = &cfg.blocks[&cmp.block];
            let Terminator::CondBranch { target } = block.term else {
                continue;
            };
            let Some((_, crate::isa::Insn::Bcond { cond, .. })) = block.insns.last() else {
                continue;
            };
            let arm = match cond {
                crate::isa::Cond::Eq => target,
                crate::isa::Cond::Ne => block.end(),
                _ => continue,
            };
            if let Some(handler_addr) = handler_from_arm(cfg, walk, arm) {
                out.ids.insert(CommandId { value, handler_addr, dispatch_site: cmp.addr });
            }
        }

        // Jump tables whose index inherits the command-id taint.
        for (block_start, info) in &cfg.jump_tables {
            if !walk.block_entry.contains_key(block_start) {
                continue;
            }
            let scrutinee = walk.value_before(cfg, info.bounds_addr, info.scrutinee_reg);
            if !scrutinee.tainted() {
                continue;
            }
            for (k, &target) in info.targets.iter().enumerate() {
                if target == info.default_target {
                    continue;
                }
                if let Some(handler_addr) = handler_from_arm(cfg, walk, target) {
                    out.ids.insert(CommandId {
                        value: info.bias + k as u64,
                        handler_addr,
                        dispatch_site: info.br_addr,
                    });
                }
            }
        }
    }

    out.default_handler = find_default_handler(cfg, &walks);
    out
}
