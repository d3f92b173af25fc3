//! A prepared fuzzing session: the loaded (and optionally rewritten) image
//! booted into a machine state, the emulated kernel, the profile's init
//! entrypoints already run, and a snapshot to reset to between sequences.
//!
//! State deliberately persists across the commands of one sequence and is
//! reset between sequences; that asymmetry is what makes the fuzzing
//! stateful.

use std::collections::BTreeMap;

use crate::engine::{
    self, BranchTrace, ExecMode, ExitStatus, MachineState, RunConfig, Snapshot, SnapshotError,
    TraceFilter,
};
use crate::loader::{LoadedImage, LoadError};
use crate::profile::{EntryRole, ParamConvention, TzosName, TzosProfile};
use crate::rewriter::{self, RewriteError, TrampolineTable};
use crate::syscall::{DeviceModel, SyscallEmu};
use crate::util::PAGE_SIZE;
use crate::vas::{Fault, Perms, RegionKind};

use super::input::{CommandInvocation, FuzzInput};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionMode {
    DirectTrap,
    Rewritten,
}

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error(transparent)]
    Rewrite(#[from] RewriteError),
    #[error(transparent)]
    Snapshot(#[from] SnapshotError),
    #[error("session init entrypoint `{role}` did not return cleanly: {what}")]
    Init { role: EntryRole, what: String },
    #[error("no staging space in the address window")]
    NoStaging,
}

pub struct SessionConfig {
    pub mode: SessionMode,
    pub devices: DeviceModel,
    pub budget_per_call: u64,
    pub max_payload: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            mode: SessionMode::Rewritten,
            devices: DeviceModel::default(),
            budget_per_call: 10_000,
            max_payload: super::input::DEFAULT_MAX_PAYLOAD,
        }
    }
}

/// Outcome of one input: per-command exits, the accumulated trace with
/// per-command event spans, and the fault that stopped the sequence, if any.
#[derive(Debug, Clone)]
pub struct CaseOutcome {
    pub statuses: Vec<ExitStatus>,
    pub trace: BranchTrace,
    pub cmd_spans: Vec<(usize, usize)>,
    pub fault: Option<Fault>,
}

pub struct TaSession {
    pub state: MachineState,
    pub emu: SyscallEmu,
    pub profile: TzosProfile,
    pub entrypoints: BTreeMap<EntryRole, u64>,
    pub trampolines: Option<TrampolineTable>,
    pub filter: TraceFilter,
    pub budget_per_call: u64,
    pub max_payload: usize,
    pub image_base: u64,
    pub segment_extent: (u64, u64),
    snapshot: Snapshot,
    device_snapshot: DeviceModel,
    staging: u64,
}

impl TaSession {
    /// Consume a linked image: rewrite if requested, allocate the staging
    /// area, boot, run the profile's init entrypoints (create/open session,
    /// or app init), and capture the session snapshot.
    pub fn prepare(
        mut image: LoadedImage,
        profile: &TzosProfile,
        config: SessionConfig,
    ) -> Result<TaSession, SessionError> {
        let entrypoints = crate::loader::resolve_entrypoints(&mut image, profile)?;

        // Staging first, so its placement (and every address the TA sees)
        // is identical across rewritten and direct-trap sessions of the
        // same image: request page(s), response page, control page.
        let req_pages = (config.max_payload as u64 + 16).div_ceil(PAGE_SIZE).max(1);
        let staging_len = (req_pages + 2) * PAGE_SIZE;
        let staging = image
            .vas
            .find_free(staging_len, image.window.0, image.window.1)
            .ok_or(SessionError::NoStaging)?;
        image
            .vas
            .map(staging, staging_len, Perms::RW, RegionKind::Heap)
            .map_err(|_| SessionError::NoStaging)?;

        let trampolines = match config.mode {
            SessionMode::Rewritten => {
                let sites = rewriter::scan_svc_sites(&image);
                Some(rewriter::install_trampolines(&mut image, &sites)?)
            }
            SessionMode::DirectTrap => None,
        };

        let segment_extent = image.segment_extent();
        let mut ranges = vec![segment_extent];
        if let Some(t) = &trampolines {
            if !t.is_empty() {
                ranges.push(t.region);
            }
        }
        let filter = TraceFilter::Ranges(ranges);

        let emu = SyscallEmu::new(profile, config.devices, image.window);
        let mut state = MachineState::boot(&image);

        let mut session = TaSession {
            profile: profile.clone(),
            entrypoints,
            trampolines,
            filter,
            budget_per_call: config.budget_per_call,
            max_payload: config.max_payload,
            image_base: image.image_base,
            segment_extent,
            // Placeholder snapshot; replaced after init below.
            snapshot: state.snapshot(),
            device_snapshot: emu.snapshot_devices(),
            staging,
            state,
            emu,
        };

        session.run_init()?;
        session.snapshot = session.state.snapshot();
        session.device_snapshot = session.emu.snapshot_devices();
        Ok(session)
    }

    fn run_init(&mut self) -> Result<(), SessionError> {
        let init_budget = self.budget_per_call;
        let run_entry = |session: &mut TaSession, role: EntryRole, args: &[u64]| {
            let Some(&addr) = session.entrypoints.get(&role) else {
                return Ok(());
            };
            let cfg = RunConfig {
                budget: init_budget,
                filter: &session.filter,
                mode: match &session.trampolines {
                    Some(t) => ExecMode::Rewritten(t),
                    None => ExecMode::DirectTrap,
                },
            };
            let (exit, _) = engine::call(&mut session.state, &mut session.emu, addr, args, &cfg);
            match exit {
                ExitStatus::Returned { value: 0 } => Ok(()),
                ExitStatus::Returned { value } => {
                    Err(SessionError::Init { role, what: format!("status {value:#x}") })
                }
                other => Err(SessionError::Init { role, what: format!("{other:?}") }),
            }
        };
        match self.profile.name {
            TzosName::Teegris => {
                run_entry(self, EntryRole::Create, &[])?;
                run_entry(self, EntryRole::Open, &[])?;
            }
            TzosName::Qsee => {
                run_entry(self, EntryRole::Init, &[])?;
            }
            TzosName::Optee => {
                // The single entry symbol opens the session when the op
                // selector is zero.
                run_entry(self, EntryRole::Invoke, &[0])?;
            }
            TzosName::Trusty => {}
        }
        Ok(())
    }

    /// Back to the post-init snapshot: registers, writable memory, region
    /// layout and device state.
    pub fn reset(&mut self) -> Result<(), SessionError> {
        self.state.restore(&self.snapshot)?;
        let devices = self.device_snapshot.clone();
        self.emu.devices = devices;
        Ok(())
    }

    pub fn exec_mode(&self) -> ExecMode<'_> {
        match &self.trampolines {
            Some(t) => ExecMode::Rewritten(t),
            None => ExecMode::DirectTrap,
        }
    }

    fn staging_req(&self) -> u64 {
        self.staging
    }

    fn staging_resp(&self) -> u64 {
        let req_pages = (self.max_payload as u64 + 16).div_ceil(PAGE_SIZE).max(1);
        self.staging + req_pages * PAGE_SIZE
    }

    fn staging_ctl(&self) -> u64 {
        self.staging_resp() + PAGE_SIZE
    }

    /// Write one invocation's request into staging and produce the entry
    /// arguments for the profile's convention.
    fn marshal(&mut self, inv: &CommandInvocation) -> Vec<u64> {
        let req = self.staging_req();
        let resp = self.staging_resp();
        let resp_size_ptr = self.staging_ctl();
        let cap = PAGE_SIZE;
        let payload: &[u8] =
            &inv.payloads[0][..inv.payloads[0].len().min(self.max_payload)];
        let ptypes = u64::from(inv.ptypes_word());

        match self.profile.param_convention {
            ParamConvention::GpRegisters { .. } => {
                self.state.vas.poke(req, payload).expect("staging is mapped");
                self.state
                    .vas
                    .poke(resp_size_ptr, &cap.to_le_bytes())
                    .expect("staging is mapped");
                let req_size = payload.len() as u64;
                match self.profile.name {
                    TzosName::Optee => {
                        vec![1, inv.command_id, ptypes, req, req_size, resp, resp_size_ptr]
                    }
                    TzosName::Teegris => {
                        vec![0, inv.command_id, ptypes, req, req_size, resp, resp_size_ptr]
                    }
                    _ => vec![inv.command_id, ptypes, req, req_size, resp, resp_size_ptr],
                }
            }
            ParamConvention::QseeBuffer { .. } => {
                let mut buf = Vec::with_capacity(16 + payload.len());
                buf.extend_from_slice(&inv.command_id.to_le_bytes());
                buf.extend_from_slice(&(ptypes as u32).to_le_bytes());
                buf.extend_from_slice(&[0u8; 4]);
                buf.extend_from_slice(payload);
                self.state.vas.poke(req, &buf).expect("staging is mapped");
                vec![req, buf.len() as u64, resp, cap]
            }
        }
    }

    /// Invoke once per sequence element, accumulating one trace. On a fault
    /// the remaining commands are skipped. State persists across the
    /// sequence; `reset` restores the snapshot first.
    pub fn run_case(&mut self, input: &FuzzInput, reset: bool) -> Result<CaseOutcome, SessionError> {
        if reset {
            self.reset()?;
        }
        self.emu.log.clear();
        let invoke = self.entrypoints[&EntryRole::Invoke];
        let mut outcome = CaseOutcome {
            statuses: Vec::with_capacity(input.sequence.len()),
            trace: BranchTrace::new(),
            cmd_spans: Vec::with_capacity(input.sequence.len()),
            fault: None,
        };
        for inv in &input.sequence {
            let args = self.marshal(inv);
            let cfg = RunConfig {
                budget: self.budget_per_call,
                filter: &self.filter,
                mode: match &self.trampolines {
                    Some(t) => ExecMode::Rewritten(t),
                    None => ExecMode::DirectTrap,
                },
            };
            let (exit, trace) = engine::call(&mut self.state, &mut self.emu, invoke, &args, &cfg);
            let start = outcome.trace.events.len();
            outcome.trace.events.extend_from_slice(&trace.events);
            outcome.cmd_spans.push((start, outcome.trace.events.len()));
            let fault = exit.fault().copied();
            outcome.statuses.push(exit);
            if let Some(f) = fault {
                outcome.fault = Some(f);
                break;
            }
        }
        Ok(outcome)
    }

    /// Convenience wrapper: run one command with a request payload.
    pub fn run_single(
        &mut self,
        command_id: u64,
        request: Vec<u8>,
        reset: bool,
    ) -> Result<CaseOutcome, SessionError> {
        self.run_case(&FuzzInput::single(command_id, request), reset)
    }
}
