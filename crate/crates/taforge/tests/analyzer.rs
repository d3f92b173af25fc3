//! Analyzer fidelity against corpus ground truth: svc-site scans, command-ID
//! enumeration with decoy filtering, dependency recovery, CFG edge counts,
//! branch-mix measurement, and trace soundness.

use std::collections::BTreeSet;

use taforge::analysis::{self, DepKind};
use taforge::corpusgen::{self, BodyPlan, DispatchStyle, TaSpec};
use taforge::fuzzer::{FuzzInput, SessionConfig, SessionMode, TaSession};
use taforge::loader::{self, MapResolver};
use taforge::profile::{LayoutConfig, TzosName, TzosProfile};
use taforge::rewriter;
use taforge::syscall::DeviceModel;

fn linked(
    ta: &corpusgen::GeneratedTa,
    profile: &TzosProfile,
) -> loader::LoadedImage {
    let mut image =
        loader::load_image(&ta.elf, profile, &LayoutConfig::default()).expect("load");
    let resolver = MapResolver(ta.stubs.iter().cloned().collect());
    loader::link_dependencies(&mut image, &resolver, profile).expect("link");
    loader::resolve_entrypoints(&mut image, profile).expect("entries");
    image
}

/// Expected svc sites per the manifest: TA sites plus each stub's sites,
/// rebased by the object load biases.
fn manifest_svc_sites(
    ta: &corpusgen::GeneratedTa,
    image: &loader::LoadedImage,
) -> BTreeSet<(u64, u16)> {
    let mut out = BTreeSet::new();
    for (obj, sites) in &ta.manifest.svc_sites {
        let bias = if obj == "<ta>" {
            image.image_base
        } else {
            image.objects.iter().find(|o| &o.name == obj).expect("stub loaded").base
        };
        for (addr, imm, _num) in sites {
            out.insert((bias + addr, *imm));
        }
    }
    out
}

#[test]
fn svc_scan_reproduces_manifest_sites() {
    for profile_name in TzosName::ALL {
        let spec = TaSpec::hdcp_shaped(profile_name, 13);
        let ta = corpusgen::generate(&spec).unwrap();
        let profile = TzosProfile::builtin(profile_name);
        let image = linked(&ta, &profile);
        let scanned: BTreeSet<(u64, u16)> =
            rewriter::scan_svc_sites(&image).iter().map(|s| (s.address, s.immediate)).collect();
        assert_eq!(scanned, manifest_svc_sites(&ta, &image), "{profile_name}");
        // Sites come back in ascending order.
        let sites = rewriter::scan_svc_sites(&image);
        assert!(sites.windows(2).all(|w| w[0].address < w[1].address));
    }
}

#[test]
fn hdcp_command_ids_exact_with_decoys_excluded() {
    for profile_name in TzosName::ALL {
        for style in [DispatchStyle::IfElseChain, DispatchStyle::JumpTable] {
            let mut spec = TaSpec::hdcp_shaped(profile_name, 21);
            spec.dispatch_style = style;
            let ta = corpusgen::generate(&spec).unwrap();
            let profile = TzosProfile::builtin(profile_name);
            let image = linked(&ta, &profile);
            let report = analysis::analyze_image(&image, &profile).unwrap();

            let expected: BTreeSet<u64> = ta.manifest.commands.keys().copied().collect();
            let got = report.commands.values();
            assert!(
                got.is_superset(&[202, 222, 230, 231, 251, 252].into()),
                "{profile_name} {style:?}: {got:?}"
            );
            assert_eq!(got, expected, "{profile_name} {style:?} precision/recall");
            for v in &ta.manifest.decoy_values {
                assert!(!got.contains(v), "decoy {v} leaked into commands");
            }
            // Handler addresses match the manifest ground truth.
            for id in &report.commands.ids {
                assert_eq!(
                    id.handler_addr,
                    image.image_base + ta.manifest.commands[&id.value],
                    "{profile_name} {style:?} handler of {}",
                    id.value
                );
            }
            assert_eq!(
                report.commands.default_handler,
                ta.manifest.default_handler.map(|d| image.image_base + d),
                "{profile_name} {style:?} default arm"
            );
        }
    }
}

#[test]
fn invoke_without_comparisons_yields_empty_set() {
    // Hand-built image: the invoke entry returns immediately.
    use taforge::corpusgen::asm::Asm;
    use taforge::corpusgen::elfout::{build_object, ElfOptions, TEXT_VADDR};
    use taforge::isa::{Insn, WordWidth};

    let mut asm = Asm::new(8);
    let entry = asm.bound_label();
    asm.emit(Insn::Movz { rd: 0, imm: 0, hw: 0 });
    asm.ret();
    asm.define_symbol("__ta_entry", entry, 8, true);
    let built = build_object(
        asm,
        &ElfOptions {
            width: WordWidth::W64,
            needed: vec![],
            manifest_note: None,
            stack_size: None,
            entry: TEXT_VADDR,
        },
    );
    let profile = TzosProfile::builtin(TzosName::Optee);
    let mut image =
        loader::load_image(&built.bytes, &profile, &LayoutConfig::default()).unwrap();
    loader::link_dependencies(&mut image, &loader::NoLibraries, &profile).unwrap();
    loader::resolve_entrypoints(&mut image, &profile).unwrap();
    let report = analysis::analyze_image(&image, &profile).unwrap();
    assert!(report.commands.ids.is_empty());
    assert!(report.model.is_empty());
}

#[test]
fn straight_line_function_is_one_block_without_internal_edges() {
    use taforge::corpusgen::asm::Asm;
    use taforge::corpusgen::elfout::{build_object, ElfOptions, TEXT_VADDR};
    use taforge::isa::{AluOp, Insn, WordWidth};

    let mut asm = Asm::new(8);
    let entry = asm.bound_label();
    asm.emit(Insn::Movz { rd: 0, imm: 1, hw: 0 });
    asm.emit(Insn::Movz { rd: 1, imm: 2, hw: 0 });
    asm.emit(Insn::AluReg { op: AluOp::Add, rd: 0, rn: 0, rm: 1 });
    asm.emit(Insn::MovReg { rd: 2, rn: 0 });
    asm.ret();
    asm.define_symbol("__ta_entry", entry, 20, true);
    let built = build_object(
        asm,
        &ElfOptions {
            width: WordWidth::W64,
            needed: vec![],
            manifest_note: None,
            stack_size: None,
            entry: TEXT_VADDR,
        },
    );
    let profile = TzosProfile::builtin(TzosName::Optee);
    let mut image =
        loader::load_image(&built.bytes, &profile, &LayoutConfig::default()).unwrap();
    loader::link_dependencies(&mut image, &loader::NoLibraries, &profile).unwrap();
    loader::resolve_entrypoints(&mut image, &profile).unwrap();
    let cfg = analysis::recover_cfg(&image);
    let entry_addr = image.entrypoints[&taforge::profile::EntryRole::Invoke];
    let block = cfg.block_containing(entry_addr).expect("block exists");
    assert_eq!(block.start, entry_addr);
    assert_eq!(block.insns.len(), 5);
    let internal: Vec<_> = cfg.edges.iter().filter(|(s, _, _)| *s == block.start).collect();
    assert!(internal.is_empty(), "{internal:?}");
}

#[test]
fn unresolved_register_branch_is_annotated_incomplete() {
    use taforge::corpusgen::asm::Asm;
    use taforge::corpusgen::elfout::{build_object, ElfOptions, TEXT_VADDR};
    use taforge::isa::{Insn, MemSize, WordWidth};

    let mut asm = Asm::new(8);
    let entry = asm.bound_label();
    let slot = asm.data_bytes(&[0u8; 8]);
    // Branch through a value loaded at runtime: no table idiom, no constant.
    asm.adr(9, slot);
    asm.ldr(MemSize::B8, 10, 9, 0);
    asm.emit(Insn::MovReg { rd: 11, rn: 10 });
    asm.br_table(11, vec![]); // plain BR, no recorded targets
    asm.define_symbol("__ta_entry", entry, 16, true);
    let built = build_object(
        asm,
        &ElfOptions {
            width: WordWidth::W64,
            needed: vec![],
            manifest_note: None,
            stack_size: None,
            entry: TEXT_VADDR,
        },
    );
    let profile = TzosProfile::builtin(TzosName::Optee);
    let mut image =
        loader::load_image(&built.bytes, &profile, &LayoutConfig::default()).unwrap();
    loader::link_dependencies(&mut image, &loader::NoLibraries, &profile).unwrap();
    loader::resolve_entrypoints(&mut image, &profile).unwrap();
    let cfg = analysis::recover_cfg(&image);
    assert!(!cfg.incomplete.is_empty(), "unresolved BR must be annotated");
}

#[test]
fn cfg_edge_count_matches_manifest_ground_truth() {
    let mut seed = 40;
    for profile_name in TzosName::ALL {
        for style in [DispatchStyle::IfElseChain, DispatchStyle::JumpTable] {
            seed += 1;
            let spec = TaSpec::randomized(profile_name, seed, style);
            let ta = corpusgen::generate(&spec).unwrap();
            let profile = TzosProfile::builtin(profile_name);
            let image = linked(&ta, &profile);
            let cfg = analysis::recover_cfg(&image);
            assert_eq!(
                cfg.edges.len() as u64,
                ta.manifest.cfg_edges,
                "{profile_name} {style:?} seed {seed}"
            );
            assert!(cfg.incomplete.is_empty(), "{profile_name} {style:?}: all BRs resolve");
        }
    }
}

#[test]
fn dependencies_match_manifest_exactly() {
    let mut seed = 60;
    for profile_name in TzosName::ALL {
        for style in [DispatchStyle::IfElseChain, DispatchStyle::JumpTable] {
            for _ in 0..3 {
                seed += 1;
                let spec = TaSpec::randomized(profile_name, seed, style);
                let ta = corpusgen::generate(&spec).unwrap();
                let profile = TzosProfile::builtin(profile_name);
                let image = linked(&ta, &profile);
                let report = analysis::analyze_image(&image, &profile).unwrap();
                let got: BTreeSet<(u64, u64, String)> = report
                    .graph
                    .edges
                    .iter()
                    .map(|&(a, b, k)| (a, b, k.name().to_string()))
                    .collect();
                assert_eq!(got, ta.manifest.dependencies, "{profile_name} {style:?} seed {seed}");
            }
        }
    }
}

#[test]
fn hdcp_dependencies_and_state_model() {
    let spec = TaSpec::hdcp_shaped(TzosName::Teegris, 5);
    let ta = corpusgen::generate(&spec).unwrap();
    let profile = TzosProfile::builtin(TzosName::Teegris);
    let image = linked(&ta, &profile);
    let report = analysis::analyze_image(&image, &profile).unwrap();

    let expected: BTreeSet<(u64, u64, DepKind)> = [
        (202, 222, DepKind::ContextMemory),
        (230, 222, DepKind::DeviceFd),
        (252, 222, DepKind::ContextMemory),
    ]
    .into();
    assert_eq!(report.graph.edges, expected);
    assert_eq!(report.model.prereqs[&222], vec![202, 230, 252]);
    assert!(report.model.prereqs[&230].is_empty());
    // Context fields: init and key are written and read; wrapped is
    // write-only (no readers, no edge).
    let wrapped = report
        .graph
        .context_fields
        .iter()
        .find(|f| f.writers.contains(&251))
        .expect("251 writes a field");
    assert!(wrapped.readers.is_empty());
}

#[test]
fn self_contained_device_io_creates_no_edges() {
    let mut spec = TaSpec::hdcp_shaped(TzosName::Optee, 8);
    // Each handler opens/reads/closes its own device.
    for c in &mut spec.commands {
        c.plans = vec![BodyPlan::DeviceIo("dev://crypto".into())];
        c.guard.clear();
    }
    let ta = corpusgen::generate(&spec).unwrap();
    let profile = TzosProfile::builtin(TzosName::Optee);
    let image = linked(&ta, &profile);
    let report = analysis::analyze_image(&image, &profile).unwrap();
    assert!(report.graph.edges.is_empty(), "{:?}", report.graph.edges);
}

#[test]
fn branch_mix_measured_within_two_points_of_generation_target() {
    for (seed, target) in [(71u64, (60u32, 40u32)), (72, (50, 50)), (73, (70, 30))] {
        let mut spec = TaSpec::hdcp_shaped(TzosName::Teegris, seed);
        spec.branch_mix = target;
        let ta = corpusgen::generate(&spec).unwrap();
        let profile = TzosProfile::builtin(TzosName::Teegris);
        let image = linked(&ta, &profile);
        let report = analysis::analyze_image(&image, &profile).unwrap();
        let measured = report.complexity.simple_fraction();
        let want = f64::from(target.0) / 100.0;
        assert!(
            (measured - want).abs() <= 0.02,
            "target {target:?}, measured {measured} (simple {} complex {})",
            report.complexity.simple,
            report.complexity.complex
        );
        // The generator's own tally agrees with the measurement.
        assert_eq!(
            (report.complexity.simple, report.complexity.complex),
            ta.manifest.branch_counts,
            "seed {seed}"
        );
    }
}

#[test]
fn classify_is_total_over_cond_blocks() {
    let spec = TaSpec::randomized(TzosName::Trusty, 99, DispatchStyle::JumpTable);
    let ta = corpusgen::generate(&spec).unwrap();
    let profile = TzosProfile::builtin(TzosName::Trusty);
    let image = linked(&ta, &profile);
    let cfg = analysis::recover_cfg(&image);
    let complexity = analysis::classify_branches(&cfg);
    let cond_blocks = cfg
        .blocks
        .values()
        .filter(|b| matches!(b.term, analysis::cfg::Terminator::CondBranch { .. }))
        .count();
    assert_eq!(complexity.labels.len(), cond_blocks);
    assert_eq!(complexity.simple + complexity.complex, cond_blocks as u64);
}

#[test]
fn traces_replay_soundly_over_the_cfg()  {
    let spec = TaSpec::hdcp_shaped(TzosName::Teegris, 33);
    let ta = corpusgen::generate(&spec).unwrap();
    let profile = TzosProfile::builtin(TzosName::Teegris);
    let image = linked(&ta, &profile);
    let cfg = analysis::recover_cfg(&image);
    let extent = image.segment_extent();

    let devices = DeviceModel::from_script(&ta.device_script).unwrap();
    let mut session = TaSession::prepare(
        image,
        &profile,
        SessionConfig { mode: SessionMode::DirectTrap, devices, ..Default::default() },
    )
    .unwrap();
    let mut input = FuzzInput::single(202, vec![1; 8]);
    input.sequence.push(taforge::fuzzer::CommandInvocation::with_request(230, vec![]));
    input.sequence.push(taforge::fuzzer::CommandInvocation::with_request(252, vec![2; 8]));
    input.sequence.push(taforge::fuzzer::CommandInvocation::with_request(222, vec![3; 16]));
    input.sequence.push(taforge::fuzzer::CommandInvocation::with_request(9999, vec![]));
    let out = session.run_case(&input, true).unwrap();
    assert!(out.fault.is_none());
    analysis::trace_is_sound(&cfg, &out.trace, extent).expect("trace within CFG");
}

#[test]
fn report_text_lists_commands() {
    let spec = TaSpec::hdcp_shaped(TzosName::Optee, 2);
    let ta = corpusgen::generate(&spec).unwrap();
    let profile = TzosProfile::builtin(TzosName::Optee);
    let image = linked(&ta, &profile);
    let report = analysis::analyze_image(&image, &profile).unwrap();
    let text = analysis::write_report(&report);
    let ids = analysis::commands_from_report(&text);
    assert_eq!(
        ids.iter().copied().collect::<BTreeSet<u64>>(),
        ta.manifest.commands.keys().copied().collect::<BTreeSet<u64>>()
    );
    let model_text = report.model.write_text();
    let parsed = taforge::analysis::StateModel::parse_text(&model_text).unwrap();
    assert_eq!(parsed.prereqs, report.model.prereqs);
}
