//! Static analysis of a loaded TA: control-flow recovery, command-ID
//! enumeration by taint, device/memory dependency graphs, branch
//! complexity, and the state model that drives the stateful fuzzer.

pub mod absint;
pub mod cfg;
pub mod classify;
pub mod commands;
pub mod deps;
pub mod statemodel;

use crate::loader::LoadedImage;
use crate::profile::{EntryRole, TzosProfile};
use crate::syscall::SyscallTable;
use crate::util::parse_u64;

pub use cfg::{recover_cfg, trace_is_sound, Cfg, EdgeKind, JumpTableInfo};
pub use classify::{classify_branches, BranchClass, BranchComplexity};
pub use commands::{enumerate_command_ids, CommandId, CommandIdSet};
pub use deps::{
    analyze_device_dependencies, analyze_memory_dependencies, build_dependency_graph,
    classify_wrapper, ContextField, DepKind, DependencyGraph,
};
pub use statemodel::{build_state_model, AnalysisError, StateModel};

#[derive(Debug)]
pub struct AnalysisReport {
    pub commands: CommandIdSet,
    pub graph: DependencyGraph,
    pub complexity: BranchComplexity,
    pub model: StateModel,
}

/// Full pipeline over a linked image with resolved entrypoints.
pub fn analyze_image(
    image: &LoadedImage,
    profile: &TzosProfile,
) -> Result<AnalysisReport, AnalysisError> {
    let cfg = recover_cfg(image);
    let invoke = image.entrypoints[&EntryRole::Invoke];
    let commands = enumerate_command_ids(&cfg, image, invoke, profile);
    let table = SyscallTable::builtin(profile.syscall_table_id);
    let graph = build_dependency_graph(&cfg, image, &table, &commands);
    let complexity = classify_branches(&cfg);
    let model = build_state_model(&graph)?;
    Ok(AnalysisReport { commands, graph, complexity, model })
}

/// Structured text report: command table, dependency edges, context fields,
/// branch-complexity summary.
pub fn write_report(report: &AnalysisReport) -> String {
    let mut out = String::new();
    out.push_str("[commands]\n");
    for id in &report.commands.ids {
        out.push_str(&format!(
            "{} = {:#x} dispatch={:#x}\n",
            id.value, id.handler_addr, id.dispatch_site
        ));
    }
    if let Some(d) = report.commands.default_handler {
        out.push_str(&format!("default = {d:#x}\n"));
    }
    out.push_str("[dependencies]\n");
    for (a, b, kind) in &report.graph.edges {
        out.push_str(&format!("{a} -> {b} {}\n", kind.name()));
    }
    out.push_str("[context_fields]\n");
    for f in &report.graph.context_fields {
        let w: Vec<String> = f.writers.iter().map(|x| x.to_string()).collect();
        let r: Vec<String> = f.readers.iter().map(|x| x.to_string()).collect();
        out.push_str(&format!(
            "offset={} width={} writers={} readers={}\n",
            f.offset,
            f.width,
            if w.is_empty() { "-".into() } else { w.join(",") },
            if r.is_empty() { "-".into() } else { r.join(",") },
        ));
    }
    out.push_str("[branch_complexity]\n");
    out.push_str(&format!("simple = {}\n", report.complexity.simple));
    out.push_str(&format!("complex = {}\n", report.complexity.complex));
    out.push_str(&format!("simple_fraction = {:.6}\n", report.complexity.simple_fraction()));
    out.push_str(&format!(
        "complex_fraction = {:.6}\n",
        report.complexity.complex_fraction()
    ));
    out
}

/// Command values listed in a written report; the fuzzer mutates from this
/// set without re-running the analysis.
pub fn commands_from_report(text: &str) -> Vec<u64> {
    let mut out = Vec::new();
    let mut in_commands = false;
    for raw in text.lines() {
        let line = raw.trim();
        if line.starts_with('[') {
            in_commands = line == "[commands]";
            continue;
        }
        if !in_commands || line.is_empty() {
            continue;
        }
        let Some((id, _)) = line.split_once('=') else { continue };
        let id = id.trim();
        if id == "default" {
            continue;
        }
        if let Some(v) = parse_u64(id) {
            out.push(v);
        }
    }
    out
}
