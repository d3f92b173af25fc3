//! End-to-end pipeline coverage: generated TAs load, link, resolve their
//! entrypoints, and run benign commands without faulting, across all four
//! TZOS profiles; loader results cross-check against an independent ELF
//! parser; session semantics (guards, devices, context flows) behave.

use std::collections::BTreeMap;

use taforge::corpusgen::{self, spec::write_spec, DispatchStyle, TaSpec};
use taforge::engine::ExitStatus;
use taforge::fuzzer::{FuzzInput, SessionConfig, SessionMode, TaSession};
use taforge::isa::WordWidth;
use taforge::loader::{self, LoadError, MapResolver, NoLibraries};
use taforge::profile::{LayoutConfig, TzosName, TzosProfile, TEE_ERROR_BAD_STATE};
use taforge::syscall::DeviceModel;
use taforge::util::PAGE_SIZE;
use taforge::vas::RegionKind;

fn resolver_for(ta: &corpusgen::GeneratedTa) -> MapResolver {
    MapResolver(ta.stubs.iter().cloned().collect())
}

fn load_linked(
    ta: &corpusgen::GeneratedTa,
    profile: &TzosProfile,
    layout: &LayoutConfig,
) -> loader::LoadedImage {
    let mut image = loader::load_image(&ta.elf, profile, layout).expect("load");
    loader::link_dependencies(&mut image, &resolver_for(ta), profile).expect("link");
    image
}

fn hdcp_session(profile_name: TzosName, mode: SessionMode) -> (TaSession, corpusgen::GeneratedTa) {
    let spec = TaSpec::hdcp_shaped(profile_name, 7);
    let ta = corpusgen::generate(&spec).expect("generate");
    let profile = TzosProfile::builtin(profile_name);
    let image = load_linked(&ta, &profile, &LayoutConfig::default());
    let devices = DeviceModel::from_script(&ta.device_script).expect("script");
    let session = TaSession::prepare(
        image,
        &profile,
        SessionConfig { mode, devices, ..Default::default() },
    )
    .expect("prepare");
    (session, ta)
}

#[test]
fn garbage_bytes_are_malformed() {
    let profile = TzosProfile::builtin(TzosName::Optee);
    let err = loader::load_image(&[0, 0, 0, 0], &profile, &LayoutConfig::default()).unwrap_err();
    assert!(matches!(err, LoadError::MalformedImage(_)));
}

#[test]
fn teegris_declares_its_libraries_in_order() {
    let spec = TaSpec::hdcp_shaped(TzosName::Teegris, 7);
    let ta = corpusgen::generate(&spec).unwrap();
    let profile = TzosProfile::builtin(TzosName::Teegris);
    let image = loader::load_image(&ta.elf, &profile, &LayoutConfig::default()).unwrap();
    let queue: Vec<&str> = image.dependency_queue.iter().map(|s| s.as_str()).collect();
    assert_eq!(queue, vec!["libtzsl.so", "libscrypto.so"]);
}

#[test]
fn loader_agrees_with_independent_elf_parser() {
    // Cross-check against goblin on the generated OP-TEE image: every
    // loadable segment must appear as a region at base + page-floor(vaddr)
    // with page-rounded length and matching permissions.
    let spec = TaSpec::hdcp_shaped(TzosName::Optee, 3);
    let ta = corpusgen::generate(&spec).unwrap();
    let elf = goblin::elf::Elf::parse(&ta.elf).expect("goblin parses our output");
    assert!(elf.little_endian);
    let profile = TzosProfile::builtin(TzosName::Optee);
    let layout = LayoutConfig::default();
    let image = loader::load_image(&ta.elf, &profile, &layout).unwrap();

    let loads: Vec<_> = elf.program_headers.iter().filter(|p| p.p_type == 1).collect();
    assert!(loads.len() >= 3, "text, rodata, data segments expected");
    for ph in &loads {
        let base = image.image_base + (ph.p_vaddr & !(PAGE_SIZE - 1));
        let region = image
            .vas
            .regions()
            .iter()
            .find(|r| r.base == base)
            .unwrap_or_else(|| panic!("no region at {base:#x}"));
        assert_eq!(region.kind, RegionKind::Segment);
        assert_eq!(region.perms.x, ph.p_flags & 1 != 0, "X at {base:#x}");
        assert_eq!(region.perms.w, ph.p_flags & 2 != 0, "W at {base:#x}");
        let span = (ph.p_vaddr + ph.p_memsz + PAGE_SIZE - 1) & !(PAGE_SIZE - 1);
        assert_eq!(region.len, span - (ph.p_vaddr & !(PAGE_SIZE - 1)));
        // File bytes landed verbatim.
        let file = &ta.elf[ph.p_offset as usize..(ph.p_offset + ph.p_filesz) as usize];
        let mapped = image
            .vas
            .peek(image.image_base + ph.p_vaddr, ph.p_filesz)
            .expect("mapped bytes");
        assert_eq!(mapped, file);
    }
    // Dynamic symbols agree too.
    for sym in elf.dynsyms.iter() {
        let name = elf.dynstrtab.get_at(sym.st_name).unwrap_or("");
        if sym.st_shndx != 0 && !name.is_empty() && !name.starts_with('.') {
            assert_eq!(
                image.symbols.get(name).copied(),
                Some(image.image_base + sym.st_value),
                "symbol {name}"
            );
        }
    }
}

#[test]
fn static_only_link_is_noop_and_idempotent_layout() {
    let spec = TaSpec::hdcp_shaped(TzosName::Optee, 3);
    let ta = corpusgen::generate(&spec).unwrap();
    let profile = TzosProfile::builtin(TzosName::Optee);
    let layout = LayoutConfig::default();
    let mut a = loader::load_image(&ta.elf, &profile, &layout).unwrap();
    assert!(a.dependency_queue.is_empty());
    let before = a.vas.content_hash();
    loader::link_dependencies(&mut a, &NoLibraries, &profile).unwrap();
    assert_eq!(a.vas.content_hash(), before, "static-only link changes nothing");

    // Determinism: same bytes, same config, byte-identical space.
    let mut b = loader::load_image(&ta.elf, &profile, &layout).unwrap();
    loader::link_dependencies(&mut b, &NoLibraries, &profile).unwrap();
    assert_eq!(a.vas.content_hash(), b.vas.content_hash());
    let ea = loader::resolve_entrypoints(&mut a, &profile).unwrap();
    let eb = loader::resolve_entrypoints(&mut b, &profile).unwrap();
    assert_eq!(ea, eb);
}

#[test]
fn import_binds_to_stub_export() {
    let spec = TaSpec::hdcp_shaped(TzosName::Teegris, 7);
    let ta = corpusgen::generate(&spec).unwrap();
    let profile = TzosProfile::builtin(TzosName::Teegris);
    let image = load_linked(&ta, &profile, &LayoutConfig::default());
    let tzsl = image.objects.iter().find(|o| o.name == "libtzsl.so").expect("stub loaded");
    let manifest_off = ta.manifest.stubs["libtzsl.so"]["tz_read"];
    assert_eq!(image.symbols["tz_read"], tzsl.base + manifest_off);
}

#[test]
fn resolver_miss_and_unresolved_symbol() {
    let spec = TaSpec::hdcp_shaped(TzosName::Teegris, 7);
    let ta = corpusgen::generate(&spec).unwrap();
    let profile = TzosProfile::builtin(TzosName::Teegris);
    let layout = LayoutConfig::default();

    let mut image = loader::load_image(&ta.elf, &profile, &layout).unwrap();
    let err = loader::link_dependencies(&mut image, &NoLibraries, &profile).unwrap_err();
    assert!(matches!(err, LoadError::ResolverMiss(name) if name == "libtzsl.so"));

    // Providers present but one export stripped: swap in an empty stub.
    let mut resolver = resolver_for(&ta);
    let empty = {
        let dummy = corpusgen::generate(&TaSpec::hdcp_shaped(TzosName::Optee, 1)).unwrap();
        dummy.elf
    };
    resolver.0.insert("libtzsl.so".into(), empty);
    let mut image = loader::load_image(&ta.elf, &profile, &layout).unwrap();
    let err = loader::link_dependencies(&mut image, &resolver, &profile).unwrap_err();
    assert!(matches!(err, LoadError::UnresolvedSymbol(_)));
}

#[test]
fn entrypoints_match_manifest_across_profiles() {
    for profile_name in TzosName::ALL {
        let spec = TaSpec::hdcp_shaped(profile_name, 5);
        let ta = corpusgen::generate(&spec).unwrap();
        let profile = TzosProfile::builtin(profile_name);
        let mut image = load_linked(&ta, &profile, &LayoutConfig::default());
        let entries = loader::resolve_entrypoints(&mut image, &profile).unwrap();
        for (role, vaddr) in &ta.manifest.entrypoints {
            let role = taforge::profile::EntryRole::parse(role).unwrap();
            assert_eq!(
                entries.get(&role).copied(),
                Some(image.image_base + vaddr),
                "{profile_name} {role}"
            );
            let region = image.vas.region_at(entries[&role]).unwrap();
            assert!(region.perms.x, "{profile_name} {role} must be executable");
        }
    }
}

#[test]
fn missing_invoke_symbol_is_entry_not_found() {
    let spec = TaSpec::hdcp_shaped(TzosName::Optee, 3);
    let ta = corpusgen::generate(&spec).unwrap();
    let mut profile = TzosProfile::builtin(TzosName::Optee);
    profile.entry_symbols =
        vec![(taforge::profile::EntryRole::Invoke, "no_such_symbol".into())];
    let mut image = loader::load_image(&ta.elf, &profile, &LayoutConfig::default()).unwrap();
    loader::link_dependencies(&mut image, &NoLibraries, &profile).unwrap();
    let err = loader::resolve_entrypoints(&mut image, &profile).unwrap_err();
    assert!(matches!(err, LoadError::EntryNotFound(taforge::profile::EntryRole::Invoke)));
}

#[test]
fn unsupported_class_rejected() {
    let spec = TaSpec::randomized(TzosName::Qsee, 2, DispatchStyle::IfElseChain);
    assert_eq!(spec.word_width, WordWidth::W32);
    let ta = corpusgen::generate(&spec).unwrap();
    let mut profile = TzosProfile::builtin(TzosName::Qsee);
    profile.word_widths = [WordWidth::W64].into();
    let err = loader::load_image(&ta.elf, &profile, &LayoutConfig::default()).unwrap_err();
    assert!(matches!(err, LoadError::UnsupportedClass { width: WordWidth::W32 }));
}

#[test]
fn window_exhausted_when_too_small() {
    let spec = TaSpec::hdcp_shaped(TzosName::Optee, 3);
    let ta = corpusgen::generate(&spec).unwrap();
    let profile = TzosProfile::builtin(TzosName::Optee);
    let layout = LayoutConfig {
        window_base: 0x40_0000,
        window_limit: 0x40_2000,
        ..Default::default()
    };
    let err = loader::load_image(&ta.elf, &profile, &layout).unwrap_err();
    assert!(matches!(err, LoadError::WindowExhausted { .. }));
}

#[test]
fn region_disjointness_and_w32_confinement() {
    for profile_name in TzosName::ALL {
        for style in [DispatchStyle::IfElseChain, DispatchStyle::JumpTable] {
            let spec = TaSpec::randomized(profile_name, 31, style);
            let ta = corpusgen::generate(&spec).unwrap();
            let profile = TzosProfile::builtin(profile_name);
            let image = load_linked(&ta, &profile, &LayoutConfig::default());
            let regions = image.vas.regions();
            for (i, a) in regions.iter().enumerate() {
                assert_eq!(a.base % PAGE_SIZE, 0);
                assert_eq!(a.len % PAGE_SIZE, 0);
                for b in &regions[i + 1..] {
                    assert!(
                        a.end() <= b.base || b.end() <= a.base,
                        "{profile_name}: {a:#x?} overlaps {b:#x?}",
                        a = a.base,
                        b = b.base
                    );
                }
                if image.word_width == WordWidth::W32 {
                    assert!(a.end() < (1 << 32));
                }
            }
        }
    }
}

#[test]
fn benign_commands_run_clean_on_all_profiles_and_modes() {
    for profile_name in TzosName::ALL {
        for mode in [SessionMode::DirectTrap, SessionMode::Rewritten] {
            let (mut session, _ta) = hdcp_session(profile_name, mode);
            // 251 (wrap key) is guard-free and exercises the checksum body.
            let out = session.run_single(251, vec![7u8; 32], true).unwrap();
            assert_eq!(
                out.statuses[0],
                ExitStatus::Returned { value: 0 },
                "{profile_name} {mode:?}"
            );
            assert!(out.fault.is_none());
            assert!(!out.trace.events.is_empty());
        }
    }
}

#[test]
fn guard_returns_bad_state_until_prereq_ran() {
    let (mut session, _ta) = hdcp_session(TzosName::Teegris, SessionMode::Rewritten);
    // 222 alone: the initialized check fails.
    let out = session.run_single(222, vec![1, 2, 3], true).unwrap();
    assert_eq!(out.statuses[0], ExitStatus::Returned { value: TEE_ERROR_BAD_STATE });

    // Within one sequence, 202 first makes 222 legal; device read works
    // because 230 opened the crypto device earlier in the session.
    let mut input = FuzzInput::single(202, vec![0x11; 16]);
    input.sequence.push(taforge::fuzzer::CommandInvocation::with_request(230, vec![]));
    input.sequence.push(taforge::fuzzer::CommandInvocation::with_request(252, vec![0x22; 16]));
    input.sequence.push(taforge::fuzzer::CommandInvocation::with_request(222, vec![0x33; 8]));
    let out = session.run_case(&input, true).unwrap();
    for (i, status) in out.statuses.iter().enumerate() {
        assert_eq!(*status, ExitStatus::Returned { value: 0 }, "command index {i}");
    }

    // Reset soundness: state does not leak across sequences.
    let again = session.run_single(222, vec![1, 2, 3], true).unwrap();
    assert_eq!(again.statuses[0], ExitStatus::Returned { value: TEE_ERROR_BAD_STATE });
}

#[test]
fn invalid_command_hits_default_arm() {
    let (mut session, _ta) = hdcp_session(TzosName::Optee, SessionMode::DirectTrap);
    let out = session.run_single(9999, vec![], true).unwrap();
    assert_eq!(
        out.statuses[0],
        ExitStatus::Returned { value: taforge::profile::TEE_ERROR_INVALID_COMMAND }
    );
}

#[test]
fn bad_param_types_rejected_by_shim() {
    let (mut session, _ta) = hdcp_session(TzosName::Teegris, SessionMode::Rewritten);
    let mut input = FuzzInput::single(251, vec![1, 2, 3]);
    input.sequence[0].param_types = [0, 0, 0, 0];
    let out = session.run_case(&input, true).unwrap();
    assert_eq!(
        out.statuses[0],
        ExitStatus::Returned { value: taforge::profile::TEE_ERROR_BAD_PARAMETERS }
    );
}

#[test]
fn echo_copies_request_into_response() {
    // 222 ends with an echo body; drive the full chain then check staging.
    let (mut session, _ta) = hdcp_session(TzosName::Trusty, SessionMode::Rewritten);
    let mut input = FuzzInput::single(202, vec![0x11; 16]);
    input.sequence.push(taforge::fuzzer::CommandInvocation::with_request(230, vec![]));
    input.sequence.push(taforge::fuzzer::CommandInvocation::with_request(252, vec![0x22; 16]));
    let payload = vec![0xa5u8; 24];
    input
        .sequence
        .push(taforge::fuzzer::CommandInvocation::with_request(222, payload.clone()));
    let out = session.run_case(&input, true).unwrap();
    assert!(out.fault.is_none());
    assert_eq!(out.statuses.len(), 4);
    assert_eq!(*out.statuses.last().unwrap(), ExitStatus::Returned { value: 0 });
}

#[test]
fn spec_text_file_drives_generation() {
    let spec = TaSpec::hdcp_shaped(TzosName::Teegris, 9);
    let text = write_spec(&spec);
    let reparsed = corpusgen::spec::parse_spec(&text).unwrap();
    let a = corpusgen::generate(&spec).unwrap();
    let b = corpusgen::generate(&reparsed).unwrap();
    assert_eq!(a.elf, b.elf);
}

#[test]
fn corpus_round_trip_all_profiles_both_styles() {
    // Every generated TA loads, links, and runs a benign echo command
    // without fault.
    let mut seed = 100;
    for profile_name in TzosName::ALL {
        for style in [DispatchStyle::IfElseChain, DispatchStyle::JumpTable] {
            seed += 1;
            let spec = TaSpec::randomized(profile_name, seed, style);
            let ta = corpusgen::generate(&spec).unwrap();
            let profile = TzosProfile::builtin(profile_name);
            let image = load_linked(&ta, &profile, &LayoutConfig::default());
            let devices = DeviceModel::from_script(&ta.device_script).unwrap();
            let mut session = TaSession::prepare(
                image,
                &profile,
                SessionConfig { mode: SessionMode::Rewritten, devices, ..Default::default() },
            )
            .unwrap();
            // Pick a guard-free command.
            let cmd = spec
                .commands
                .iter()
                .find(|c| c.guard.is_empty())
                .map(|c| c.id)
                .unwrap_or(spec.commands[0].id);
            let out = session.run_single(cmd, vec![5; 16], true).unwrap();
            assert!(out.fault.is_none(), "{profile_name} {style:?} seed {seed}: {:?}", out);
        }
    }
}

#[test]
fn profile_entry_symbol_shapes() {
    let qsee: BTreeMap<_, _> = TzosProfile::builtin(TzosName::Qsee)
        .entry_symbols
        .iter()
        .cloned()
        .collect();
    assert_eq!(qsee[&taforge::profile::EntryRole::Init], "tz_app_init");
    assert_eq!(qsee[&taforge::profile::EntryRole::Invoke], "CApp_invoke");
    let teegris: Vec<_> = TzosProfile::builtin(TzosName::Teegris)
        .entry_symbols
        .iter()
        .map(|(_, s)| s.clone())
        .collect();
    assert_eq!(
        teegris,
        vec!["TA_CreateEntryPoint", "TA_OpenSessionEntryPoint", "TA_InvokeCommandEntryPoint"]
    );
}
