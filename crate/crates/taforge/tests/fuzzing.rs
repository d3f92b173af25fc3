//! Fuzzer-facing integration: rewriter equivalence and patch minimality,
//! planted-vulnerability discovery and replay, campaign determinism,
//! checkpoint resume, and the statefulness effect.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use taforge::analysis;
use taforge::corpusgen::{self, plant_vulnerability, TaSpec, VulnKind};
use taforge::fuzzer::{
    bitmap_of_traces, Campaign, CampaignConfig, CommandInvocation, CrashReport, FuzzInput,
    SessionConfig, SessionMode, TaSession,
};
use taforge::loader::{self, MapResolver};
use taforge::profile::{LayoutConfig, TzosName, TzosProfile};
use taforge::rewriter;
use taforge::syscall::DeviceModel;
use taforge::tracecmp::{self, TraceOrigin};
use taforge::vas::FaultKind;

fn build_session(
    ta: &corpusgen::GeneratedTa,
    profile_name: TzosName,
    mode: SessionMode,
) -> TaSession {
    let profile = TzosProfile::builtin(profile_name);
    let mut image =
        loader::load_image(&ta.elf, &profile, &LayoutConfig::default()).expect("load");
    let resolver = MapResolver(ta.stubs.iter().cloned().collect());
    loader::link_dependencies(&mut image, &resolver, &profile).expect("link");
    let devices = DeviceModel::from_script(&ta.device_script).expect("script");
    TaSession::prepare(image, &profile, SessionConfig { mode, devices, ..Default::default() })
        .expect("prepare")
}

fn random_input(spec: &TaSpec, rng: &mut ChaCha8Rng) -> FuzzInput {
    let n = rng.gen_range(1..=4usize);
    let ids: Vec<u64> = spec.commands.iter().map(|c| c.id).collect();
    let sequence = (0..n)
        .map(|_| {
            let id = ids[rng.gen_range(0..ids.len())];
            let len = rng.gen_range(0..=48usize);
            let payload = (0..len).map(|_| rng.gen()).collect();
            CommandInvocation::with_request(id, payload)
        })
        .collect();
    FuzzInput { sequence, seed_id: 0 }
}

#[test]
fn rewritten_and_direct_runs_are_equivalent() {
    // 200 randomized inputs per profile; the full 10k-run oracle lives in
    // the acceptance suite.
    for profile_name in TzosName::ALL {
        let spec = TaSpec::hdcp_shaped(profile_name, 77);
        let ta = corpusgen::generate(&spec).unwrap();
        let mut rw = build_session(&ta, profile_name, SessionMode::Rewritten);
        let mut dt = build_session(&ta, profile_name, SessionMode::DirectTrap);
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        for case in 0..200 {
            let input = random_input(&spec, &mut rng);
            let a = rw.run_case(&input, true).unwrap();
            let b = dt.run_case(&input, true).unwrap();
            assert_eq!(a.statuses, b.statuses, "{profile_name} case {case}");
            assert_eq!(
                rw.state.state_hash(),
                dt.state.state_hash(),
                "{profile_name} case {case}: final state"
            );
            assert_eq!(rw.emu.log, dt.emu.log, "{profile_name} case {case}: syscall sequence");
            let na = tracecmp::normalize(
                &a.trace,
                rw.image_base,
                rw.segment_extent,
                rw.trampolines.as_ref(),
                TraceOrigin::Rewritten,
            )
            .unwrap();
            let nb = tracecmp::normalize(
                &b.trace,
                dt.image_base,
                dt.segment_extent,
                None,
                TraceOrigin::DirectTrap,
            )
            .unwrap();
            assert_eq!(na.edges, nb.edges, "{profile_name} case {case}: edge sets");
        }
    }
}

#[test]
fn patch_minimality() {
    let spec = TaSpec::hdcp_shaped(TzosName::Optee, 3);
    let ta = corpusgen::generate(&spec).unwrap();
    let profile = TzosProfile::builtin(TzosName::Optee);
    let mut image = loader::load_image(&ta.elf, &profile, &LayoutConfig::default()).unwrap();
    loader::link_dependencies(&mut image, &loader::NoLibraries, &profile).unwrap();
    let pristine = image.clone();

    let sites = rewriter::scan_svc_sites(&image);
    assert!(!sites.is_empty());
    let table = rewriter::install_trampolines(&mut image, &sites).unwrap();

    let site_addrs: BTreeSet<u64> = sites.iter().map(|s| s.address).collect();
    let mut diffs = Vec::new();
    for region in pristine.vas.regions() {
        let after = image
            .vas
            .regions()
            .iter()
            .find(|r| r.base == region.base)
            .expect("regions preserved");
        for (i, (a, b)) in region.bytes.iter().zip(after.bytes.iter()).enumerate() {
            if a != b {
                diffs.push(region.base + i as u64);
            }
        }
    }
    // Every differing byte belongs to a patched site word.
    for addr in &diffs {
        let word = addr & !3;
        assert!(site_addrs.contains(&word), "unexpected diff at {addr:#x}");
    }
    let touched_words: BTreeSet<u64> = diffs.iter().map(|a| a & !3).collect();
    assert_eq!(touched_words, site_addrs, "every site patched exactly once");
    // The trampoline region is new and holds one slot per site.
    assert_eq!(table.len(), sites.len());

    // Reverse lookup is the inverse of installation.
    for site in &sites {
        let entry = table.entries[&site.address];
        let back = rewriter::site_for_trampoline(&table, entry.trampoline_addr).unwrap();
        assert_eq!(back.address, site.address);
        assert_eq!(entry.return_addr, site.address + 4);
    }
    let report = rewriter::patch_report(&table);
    assert_eq!(report.lines().count(), sites.len());

    // Unknown trampoline address.
    assert!(rewriter::site_for_trampoline(&table, table.region.0 + 8).is_err());
}

#[test]
fn empty_site_list_changes_nothing() {
    let spec = TaSpec::hdcp_shaped(TzosName::Teegris, 3);
    let ta = corpusgen::generate(&spec).unwrap();
    let profile = TzosProfile::builtin(TzosName::Teegris);
    let mut image = loader::load_image(&ta.elf, &profile, &LayoutConfig::default()).unwrap();
    let before = image.vas.content_hash();
    let table = rewriter::install_trampolines(&mut image, &[]).unwrap();
    assert!(table.is_empty());
    assert_eq!(image.vas.content_hash(), before);
}

#[test]
fn trampoline_range_and_capacity_errors() {
    let spec = TaSpec::hdcp_shaped(TzosName::Optee, 3);
    let ta = corpusgen::generate(&spec).unwrap();
    let profile = TzosProfile::builtin(TzosName::Optee);
    let layout = LayoutConfig { window_limit: 0x1000_0000, ..Default::default() };
    let mut image = loader::load_image(&ta.elf, &profile, &layout).unwrap();
    loader::link_dependencies(&mut image, &loader::NoLibraries, &profile).unwrap();
    let sites = rewriter::scan_svc_sites(&image);

    // A region 48 MiB away exceeds branch reach.
    let far = 0x400_0000u64 + (48 << 20);
    image
        .vas
        .map(far, 0x1000, taforge::vas::Perms::RX, taforge::vas::RegionKind::Trampoline)
        .unwrap();
    let err = rewriter::install_in_region(&mut image, &sites, (far, far + 0x1000)).unwrap_err();
    assert!(matches!(err, rewriter::RewriteError::RangeExceeded { .. }));

    // A region too small for the sites reports capacity.
    let err = rewriter::install_in_region(&mut image, &sites, (far, far + 64)).unwrap_err();
    assert!(matches!(err, rewriter::RewriteError::RegionFull { .. }));
}

fn vuln_fixture(seed: u64) -> (corpusgen::GeneratedTa, TaSpec, u64) {
    let base = TaSpec::hdcp_shaped(TzosName::Teegris, seed);
    let spec = plant_vulnerability(&base, VulnKind::OobWrite, vec![202, 230, 252]).unwrap();
    let ta = corpusgen::generate(&spec).unwrap();
    let vuln_cmd = ta.manifest.vulns[0].cmd;
    (ta, spec, vuln_cmd)
}

#[test]
fn planted_vuln_faults_only_with_guard_and_predicate() {
    let (ta, _spec, vuln_cmd) = vuln_fixture(91);
    let mut session = build_session(&ta, TzosName::Teegris, SessionMode::Rewritten);
    let vuln = &ta.manifest.vulns[0];

    let chain = |payload: Vec<u8>| {
        let mut input = FuzzInput::single(202, vec![1; 8]);
        input.sequence.push(CommandInvocation::with_request(230, vec![]));
        input.sequence.push(CommandInvocation::with_request(252, vec![2; 8]));
        input.sequence.push(CommandInvocation::with_request(vuln_cmd, payload));
        input
    };

    // Guard satisfied + predicate satisfied: deterministic fault at the
    // manifest's planted offset.
    let out = session.run_case(&chain(vec![200, 0, 0]), true).unwrap();
    let fault = out.fault.expect("must fault");
    assert_eq!(fault.kind, FaultKind::OobWrite);
    assert_eq!(fault.pc, session.image_base + vuln.fault_offset);

    // Guard satisfied, predicate unsatisfied: clean run.
    let out = session.run_case(&chain(vec![10, 0, 0]), true).unwrap();
    assert!(out.fault.is_none());

    // Any prefix missing a guard command: bad-state, no fault.
    let mut partial = FuzzInput::single(202, vec![1; 8]);
    partial.sequence.push(CommandInvocation::with_request(vuln_cmd, vec![200, 0, 0]));
    let out = session.run_case(&partial, true).unwrap();
    assert!(out.fault.is_none());
    assert_eq!(
        out.statuses[1],
        taforge::engine::ExitStatus::Returned {
            value: taforge::profile::TEE_ERROR_BAD_STATE
        }
    );
}

#[test]
fn uaf_faults_as_oob_read_at_manifest_offset() {
    let base = TaSpec::hdcp_shaped(TzosName::Optee, 17);
    let spec = plant_vulnerability(&base, VulnKind::UafStub, vec![202]).unwrap();
    let ta = corpusgen::generate(&spec).unwrap();
    let vuln = &ta.manifest.vulns[0];
    let mut session = build_session(&ta, TzosName::Optee, SessionMode::Rewritten);
    let mut input = FuzzInput::single(202, vec![1; 8]);
    input.sequence.push(CommandInvocation::with_request(vuln.cmd, vec![255]));
    let out = session.run_case(&input, true).unwrap();
    let fault = out.fault.expect("use after free must fault");
    assert_eq!(fault.kind, FaultKind::OobRead);
    assert_eq!(fault.pc, session.image_base + vuln.fault_offset);
}

#[test]
fn stack_overflow_walks_off_the_stack() {
    let base = TaSpec::hdcp_shaped(TzosName::Trusty, 19);
    let spec = plant_vulnerability(&base, VulnKind::StackOverflow, vec![]).unwrap();
    let ta = corpusgen::generate(&spec).unwrap();
    let vuln = &ta.manifest.vulns[0];
    assert_eq!(vuln.predicate_gt, 96);
    let mut session = build_session(&ta, TzosName::Trusty, SessionMode::DirectTrap);
    // At the threshold: still inside the stack.
    let out = session.run_single(vuln.cmd, vec![96], true).unwrap();
    assert!(out.fault.is_none());
    // One past: the copy crosses the stack top.
    let out = session.run_single(vuln.cmd, vec![97], true).unwrap();
    let fault = out.fault.expect("stack overflow");
    assert_eq!(fault.kind, FaultKind::OobWrite);
    assert_eq!(fault.pc, session.image_base + vuln.fault_offset);
}

#[test]
fn crash_reports_replay_with_identical_key() {
    let (ta, _spec, vuln_cmd) = vuln_fixture(23);
    let mut session = build_session(&ta, TzosName::Teegris, SessionMode::Rewritten);
    let mut input = FuzzInput::single(202, vec![1; 8]);
    input.sequence.push(CommandInvocation::with_request(230, vec![]));
    input.sequence.push(CommandInvocation::with_request(252, vec![2; 8]));
    input.sequence.push(CommandInvocation::with_request(vuln_cmd, vec![99, 1, 2]));
    let out = session.run_case(&input, true).unwrap();
    let report = CrashReport::from_outcome(&input, &out).expect("crash report");

    // Replay through the serialized form, as the CLI does.
    let restored = CrashReport::from_bytes(&report.to_bytes()).unwrap();
    let replay = session.run_case(&restored.input, true).unwrap();
    assert!(restored.matches(&replay), "replay must reproduce kind, pc and dedup key");
}

fn analysis_of(ta: &corpusgen::GeneratedTa, profile_name: TzosName) -> analysis::AnalysisReport {
    let profile = TzosProfile::builtin(profile_name);
    let mut image = loader::load_image(&ta.elf, &profile, &LayoutConfig::default()).unwrap();
    let resolver = MapResolver(ta.stubs.iter().cloned().collect());
    loader::link_dependencies(&mut image, &resolver, &profile).unwrap();
    loader::resolve_entrypoints(&mut image, &profile).unwrap();
    analysis::analyze_image(&image, &profile).unwrap()
}

#[test]
fn campaign_finds_guarded_crash_with_state_model() {
    let (ta, _spec, _vuln_cmd) = vuln_fixture(29);
    let report = analysis_of(&ta, TzosName::Teegris);
    let campaign = Campaign {
        config: CampaignConfig {
            iterations: Some(30_000),
            seed: 7,
            ..Default::default()
        },
        model: report.model.clone(),
        known_ids: report.commands.values().into_iter().collect(),
    };
    let result = campaign
        .run(|| {
            Ok(build_session(&ta, TzosName::Teegris, SessionMode::Rewritten))
        })
        .unwrap();
    assert!(result.stats.unique_crashes >= 1, "stats: {:?}", result.stats);
    assert!(!result.crashes.is_empty());
    assert_eq!(result.stats.executions, 30_000);
}

#[test]
fn single_worker_campaigns_are_deterministic() {
    let (ta, _spec, _vuln) = vuln_fixture(31);
    let report = analysis_of(&ta, TzosName::Teegris);
    let run = || {
        let campaign = Campaign {
            config: CampaignConfig { iterations: Some(1500), seed: 42, ..Default::default() },
            model: report.model.clone(),
            known_ids: report.commands.values().into_iter().collect(),
        };
        campaign
            .run(|| Ok(build_session(&ta, TzosName::Teegris, SessionMode::Rewritten)))
            .unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(a.global, b.global, "global bitmaps must be byte-identical");
    assert_eq!(a.stats.executions, b.stats.executions);
    assert_eq!(a.stats.requests, b.stats.requests);
    assert_eq!(a.stats.unique_crashes, b.stats.unique_crashes);
}

#[test]
fn resumed_campaign_matches_uninterrupted_run() {
    let (ta, _spec, _vuln) = vuln_fixture(37);
    let report = analysis_of(&ta, TzosName::Teegris);
    let make = || Ok(build_session(&ta, TzosName::Teegris, SessionMode::Rewritten));

    let full = Campaign {
        config: CampaignConfig { iterations: Some(1000), seed: 9, ..Default::default() },
        model: report.model.clone(),
        known_ids: report.commands.values().into_iter().collect(),
    }
    .run(make)
    .unwrap();

    let dir = tempfile::tempdir().unwrap();
    let half = Campaign {
        config: CampaignConfig {
            iterations: Some(500),
            seed: 9,
            out_dir: Some(dir.path().to_path_buf()),
            ..Default::default()
        },
        model: report.model.clone(),
        known_ids: report.commands.values().into_iter().collect(),
    };
    half.run(make).unwrap();
    let resumed = Campaign {
        config: CampaignConfig {
            iterations: Some(1000),
            seed: 9,
            out_dir: Some(dir.path().to_path_buf()),
            ..Default::default()
        },
        model: report.model.clone(),
        known_ids: report.commands.values().into_iter().collect(),
    }
    .run(make)
    .unwrap();

    assert_eq!(resumed.stats.executions, 1000);
    assert_eq!(full.global, resumed.global, "resume must continue the exact trajectory");
}

#[test]
fn statefulness_widens_reachable_edges() {
    let spec = TaSpec::hdcp_shaped(TzosName::Teegris, 41);
    let ta = corpusgen::generate(&spec).unwrap();
    let mut session = build_session(&ta, TzosName::Teegris, SessionMode::Rewritten);

    let mut staged = FuzzInput::single(202, vec![1; 8]);
    staged.sequence.push(CommandInvocation::with_request(230, vec![]));
    staged.sequence.push(CommandInvocation::with_request(252, vec![2; 8]));
    staged.sequence.push(CommandInvocation::with_request(222, vec![3; 16]));
    let full = session.run_case(&staged, true).unwrap();
    let full_edges: BTreeSet<(u64, u64)> =
        full.trace.events.iter().map(|e| (e.source, e.target)).collect();

    // Every command of the staged sequence reaches strictly fewer edges on
    // its own -- including 222, whose lone run stops at the bad-state gate.
    for cmd in [202u64, 230, 252, 222] {
        let out = session.run_single(cmd, vec![3; 16], true).unwrap();
        let single: BTreeSet<(u64, u64)> =
            out.trace.events.iter().map(|e| (e.source, e.target)).collect();
        assert!(
            full_edges.is_superset(&single) && full_edges.len() > single.len(),
            "sequence edges must strictly contain those of single command {cmd}"
        );
    }
}

#[test]
fn reset_soundness_identical_traces() {
    let spec = TaSpec::hdcp_shaped(TzosName::Qsee, 43);
    let ta = corpusgen::generate(&spec).unwrap();
    let mut session = build_session(&ta, TzosName::Qsee, SessionMode::Rewritten);
    let input = FuzzInput::single(251, vec![5; 24]);
    let a = session.run_case(&input, true).unwrap();
    let b = session.run_case(&input, true).unwrap();
    assert_eq!(a.trace, b.trace, "no state may leak across reset sequences");
    assert_eq!(a.statuses, b.statuses);
}

#[test]
fn snapshot_restore_cycles_preserve_initial_hash() {
    let spec = TaSpec::hdcp_shaped(TzosName::Optee, 47);
    let ta = corpusgen::generate(&spec).unwrap();
    let mut session = build_session(&ta, TzosName::Optee, SessionMode::Rewritten);
    session.reset().unwrap();
    let h0 = session.state.state_hash();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let spec_ids: Vec<u64> = spec.commands.iter().map(|c| c.id).collect();
    for _ in 0..1000 {
        let id = spec_ids[rng.gen_range(0..spec_ids.len())];
        let len = rng.gen_range(0..=32usize);
        let payload = (0..len).map(|_| rng.gen()).collect();
        session.run_single(id, payload, false).unwrap();
        session.reset().unwrap();
        assert_eq!(session.state.state_hash(), h0);
    }
}

#[test]
fn recorded_inputs_replay_to_matching_bitmaps_across_modes() {
    let spec = TaSpec::hdcp_shaped(TzosName::Teegris, 53);
    let ta = corpusgen::generate(&spec).unwrap();
    let report = analysis_of(&ta, TzosName::Teegris);
    let campaign = Campaign {
        config: CampaignConfig {
            iterations: Some(400),
            seed: 3,
            record_inputs: true,
            ..Default::default()
        },
        model: report.model.clone(),
        known_ids: report.commands.values().into_iter().collect(),
    };
    let result = campaign
        .run(|| Ok(build_session(&ta, TzosName::Teegris, SessionMode::Rewritten)))
        .unwrap();
    assert_eq!(result.recorded.len(), 400);

    let mut rw = build_session(&ta, TzosName::Teegris, SessionMode::Rewritten);
    let mut dt = build_session(&ta, TzosName::Teegris, SessionMode::DirectTrap);
    let mut rw_traces = Vec::new();
    let mut dt_traces = Vec::new();
    for input in &result.recorded {
        let a = rw.run_case(input, true).unwrap();
        let b = dt.run_case(input, true).unwrap();
        let na = tracecmp::normalize(
            &a.trace,
            rw.image_base,
            rw.segment_extent,
            rw.trampolines.as_ref(),
            TraceOrigin::Rewritten,
        )
        .unwrap();
        let nb = tracecmp::normalize(
            &b.trace,
            dt.image_base,
            dt.segment_extent,
            None,
            TraceOrigin::DirectTrap,
        )
        .unwrap();
        rw_traces.push(synthetic_trace(&na.edges));
        dt_traces.push(synthetic_trace(&nb.edges));
    }
    let map_a = bitmap_of_traces(rw_traces.iter());
    let map_b = bitmap_of_traces(dt_traces.iter());
    let cmp = tracecmp::compare_bitmaps(&map_a, &map_b);
    assert!(cmp.jaccard >= 0.99, "jaccard {}", cmp.jaccard);
}

fn synthetic_trace(edges: &BTreeSet<(u64, u64)>) -> taforge::engine::BranchTrace {
    taforge::engine::BranchTrace {
        events: edges
            .iter()
            .map(|&(source, target)| taforge::engine::TraceEvent {
                source,
                target,
                kind: taforge::engine::TraceKind::Uncond,
            })
            .collect(),
    }
}
