//! State-dependency recovery: device-descriptor flows (a command that opens
//! a device feeds the commands that read through the stored descriptor) and
//! context-memory flows (fields written through the memory helper in one
//! handler and read in another). The syscall behind a callee is identified
//! by walking its body to the `svc`, following one constant-register thunk
//! hop to the imported stub if needed.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::loader::LoadedImage;
use crate::syscall::{HandlerId, NumberSource, SyscallTable};

use super::absint::{analyze_fn, AbsVal, FnAnalysis};
use super::cfg::{Cfg, EdgeKind, Terminator};
use super::commands::CommandIdSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum DepKind {
    DeviceFd,
    ContextMemory,
}

impl DepKind {
    pub fn name(self) -> &'static str {
        match self {
            DepKind::DeviceFd => "device_fd",
            DepKind::ContextMemory => "context_memory",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "device_fd" => DepKind::DeviceFd,
            "context_memory" => DepKind::ContextMemory,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextField {
    pub offset: u64,
    pub width: u64,
    pub writers: BTreeSet<u64>,
    pub readers: BTreeSet<u64>,
}

#[derive(Debug, Clone, Default)]
pub struct DependencyGraph {
    pub nodes: BTreeSet<u64>,
    pub edges: BTreeSet<(u64, u64, DepKind)>,
    pub context_fields: Vec<ContextField>,
    pub context_base: Option<u64>,
}

impl DependencyGraph {
    pub fn plain_edges(&self) -> BTreeSet<(u64, u64)> {
        self.edges.iter().map(|&(a, b, _)| (a, b)).collect()
    }
}

/// Classify a callee as one of the emulated kernel services by walking its
/// blocks to the `svc` word. Thunks (constant-register tail jumps into an
/// imported stub) are crossed via their resolved indirect edge.
pub fn classify_wrapper(cfg: &Cfg, table: &SyscallTable, entry: u64) -> Option<HandlerId> {
    let start = cfg.block_containing(entry)?.start;
    let mut queue = VecDeque::from([start]);
    let mut seen = BTreeSet::new();
    while let Some(b) = queue.pop_front() {
        if !seen.insert(b) || seen.len() > 32 {
            if seen.len() > 32 {
                return None;
            }
            continue;
        }
        let block = cfg.blocks.get(&b)?;
        for (i, (_, insn)) in block.insns.iter().enumerate() {
            if let crate::isa::Insn::Svc { imm } = insn {
                let number = match table.number_source {
                    NumberSource::Immediate => u32::from(*imm),
                    NumberSource::Register(reg) => {
                        number_from_movz(&block.insns[..i], reg)? as u32
                    }
                };
                return table.entries.get(&number).copied();
            }
        }
        match &block.term {
            Terminator::IndirectResolved(targets) if targets.len() == 1 => {
                if let Some(nb) = cfg.block_containing(targets[0]) {
                    queue.push_back(nb.start);
                }
            }
            _ => {
                for (s, d, k) in cfg
                    .edges
                    .range((b, 0, EdgeKind::Fallthrough)..)
                    .take_while(|(s, _, _)| *s == b)
                {
                    debug_assert_eq!(*s, b);
                    if matches!(k, EdgeKind::Fallthrough | EdgeKind::Cond | EdgeKind::Uncond) {
                        queue.push_back(*d);
                    }
                }
            }
        }
    }
    None
}

fn number_from_movz(insns: &[(u64, crate::isa::Insn)], reg: u8) -> Option<u64> {
    for (_, insn) in insns.iter().rev() {
        if let crate::isa::Insn::Movz { rd, imm, hw: 0 } = insn {
            if *rd == reg {
                return Some(u64::from(*imm));
            }
        }
    }
    None
}

struct HandlerFacts {
    cmd: u64,
    walk: FnAnalysis,
    /// (call site, service, argument values).
    services: Vec<(u64, HandlerId, Vec<AbsVal>)>,
}

fn handler_walks(
    cfg: &Cfg,
    table: &SyscallTable,
    ids: &CommandIdSet,
) -> Vec<HandlerFacts> {
    let mut wrapper_cache: BTreeMap<u64, Option<HandlerId>> = BTreeMap::new();
    let mut out = Vec::new();
    let mut seen_handlers = BTreeSet::new();
    for id in &ids.ids {
        if !seen_handlers.insert((id.value, id.handler_addr)) {
            continue;
        }
        let walk = analyze_fn(cfg, id.handler_addr, &BTreeMap::new());
        let mut services = Vec::new();
        for call in &walk.calls {
            let Some(target) = call.target else { continue };
            let service = *wrapper_cache
                .entry(target)
                .or_insert_with(|| classify_wrapper(cfg, table, target));
            if let Some(service) = service {
                services.push((call.addr, service, call.args.clone()));
            }
        }
        out.push(HandlerFacts { cmd: id.value, walk, services });
    }
    out
}

/// Device flows: for each constant device-path string reaching an `open`
/// argument, the opener command becomes a prerequisite of every command
/// whose read/write/ioctl descriptor loads from the address the opener
/// stored its result to.
pub fn analyze_device_dependencies(
    cfg: &Cfg,
    image: &LoadedImage,
    table: &SyscallTable,
    ids: &CommandIdSet,
) -> BTreeSet<(u64, u64, DepKind)> {
    let facts = handler_walks(cfg, table, ids);
    // (slot address) -> (path, opener commands)
    let mut slots: BTreeMap<u64, (String, BTreeSet<u64>)> = BTreeMap::new();
    for f in &facts {
        for (site, service, args) in &f.services {
            if *service != HandlerId::Open {
                continue;
            }
            let Some(AbsVal::Const(path_addr)) = args.first().cloned() else { continue };
            let Ok(path) = image.vas.read_cstr(path_addr, 256) else { continue };
            // Where did this open's result get stored?
            for store in &f.walk.global_stores {
                if store.value == AbsVal::CallRet(*site) {
                    slots
                        .entry(store.target)
                        .or_insert_with(|| (path.clone(), BTreeSet::new()))
                        .1
                        .insert(f.cmd);
                }
            }
        }
    }

    let mut edges = BTreeSet::new();
    for f in &facts {
        for (_site, service, args) in &f.services {
            if !matches!(service, HandlerId::Read | HandlerId::Write | HandlerId::Ioctl) {
                continue;
            }
            let Some(AbsVal::Loaded(addr)) = args.first().cloned() else { continue };
            if let Some((_path, openers)) = slots.get(&addr) {
                for &opener in openers {
                    if opener != f.cmd {
                        edges.insert((opener, f.cmd, DepKind::DeviceFd));
                    }
                }
            }
        }
    }
    edges
}

/// Context-memory flows through the memory helper, with the context object
/// identified as the most frequent symbol-resolved base among helper
/// pointer arguments (ties to the lowest address).
pub fn analyze_memory_dependencies(
    cfg: &Cfg,
    image: &LoadedImage,
    table: &SyscallTable,
    ids: &CommandIdSet,
) -> (BTreeSet<(u64, u64, DepKind)>, Vec<ContextField>, Option<u64>) {
    let facts = handler_walks(cfg, table, ids);

    // Helper pointer args -> enclosing data symbol.
    let sym_of = |addr: u64| -> Option<(u64, u64)> {
        image
            .symbol_meta
            .values()
            .filter(|m| !m.is_func && m.size > 0)
            .find(|m| addr >= m.addr && addr < m.addr + m.size)
            .map(|m| (m.addr, m.size))
    };

    // (cmd, field offset, width, is_write) per helper move touching a
    // symbol-resolved address.
    struct Access {
        cmd: u64,
        sym: u64,
        offset: u64,
        width: u64,
        write: bool,
    }
    let mut accesses: Vec<Access> = Vec::new();
    for f in &facts {
        for (_site, service, args) in &f.services {
            if *service != HandlerId::MemMove {
                continue;
            }
            let width = args.get(2).and_then(|v| v.const_value()).unwrap_or(8);
            for (idx, write) in [(0usize, true), (1usize, false)] {
                if let Some(AbsVal::Const(addr)) = args.get(idx).cloned() {
                    if let Some((sym, _len)) = sym_of(addr) {
                        accesses.push(Access {
                            cmd: f.cmd,
                            sym,
                            offset: addr - sym,
                            width,
                            write,
                        });
                    }
                }
            }
        }
    }

    // Most frequent base symbol wins; ties break to the lowest address.
    let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
    for a in &accesses {
        *counts.entry(a.sym).or_default() += 1;
    }
    let context_base = counts
        .iter()
        .max_by(|(a_sym, a_n), (b_sym, b_n)| a_n.cmp(b_n).then(b_sym.cmp(a_sym)))
        .map(|(&sym, _)| sym);

    let mut fields: BTreeMap<(u64, u64), ContextField> = BTreeMap::new();
    if let Some(base) = context_base {
        for a in accesses.iter().filter(|a| a.sym == base) {
            let f = fields.entry((a.offset, a.width)).or_insert_with(|| ContextField {
                offset: a.offset,
                width: a.width,
                writers: BTreeSet::new(),
                readers: BTreeSet::new(),
            });
            if a.write {
                f.writers.insert(a.cmd);
            } else {
                f.readers.insert(a.cmd);
            }
        }
    }

    let mut edges = BTreeSet::new();
    let field_list: Vec<ContextField> = fields.into_values().collect();
    for f in &field_list {
        for &w in &f.writers {
            for &r in &f.readers {
                if w != r {
                    edges.insert((w, r, DepKind::ContextMemory));
                }
            }
        }
    }
    (edges, field_list, context_base)
}

pub fn build_dependency_graph(
    cfg: &Cfg,
    image: &LoadedImage,
    table: &SyscallTable,
    ids: &CommandIdSet,
) -> DependencyGraph {
    let device = analyze_device_dependencies(cfg, image, table, ids);
    let (memory, context_fields, context_base) =
        analyze_memory_dependencies(cfg, image, table, ids);
    let mut graph = DependencyGraph {
        nodes: ids.values(),
        edges: device,
        context_fields,
        context_base,
    };
    graph.edges.extend(memory);
    graph
}
