//! Crash reports: the faulting input, the fault record, the trace tail, and
//! a dedup key over (fault kind, faulting pc, last four edges). Persisted
//! reports replay to the same key.

use std::io::{self, Read, Write};

use crate::engine::{BranchTrace, TraceEvent, TraceKind};
use crate::util::Fnv64;
use crate::vas::{Fault, FaultKind};

use super::input::FuzzInput;
use super::session::CaseOutcome;

pub const TRACE_TAIL: usize = 64;
const DEDUP_EDGES: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct CrashReport {
    pub input: FuzzInput,
    pub fault: Fault,
    pub dedup_key: u64,
    pub trace_tail: Vec<TraceEvent>,
}

fn fault_kind_code(kind: FaultKind) -> u8 {
    match kind {
        FaultKind::OobRead => 0,
        FaultKind::OobWrite => 1,
        FaultKind::ExecNx => 2,
        FaultKind::Unaligned => 3,
        FaultKind::IllegalInsn => 4,
        FaultKind::DivZero => 5,
    }
}

fn fault_kind_from(code: u8) -> Option<FaultKind> {
    Some(match code {
        0 => FaultKind::OobRead,
        1 => FaultKind::OobWrite,
        2 => FaultKind::ExecNx,
        3 => FaultKind::Unaligned,
        4 => FaultKind::IllegalInsn,
        5 => FaultKind::DivZero,
        _ => return None,
    })
}

pub fn dedup_key(fault: &Fault, tail: &[TraceEvent]) -> u64 {
    let mut h = Fnv64::new();
    h.write(&[fault_kind_code(fault.kind)]);
    h.write_u64(fault.pc);
    for e in tail.iter().rev().take(DEDUP_EDGES) {
        h.write_u64(e.source);
        h.write_u64(e.target);
    }
    h.finish()
}

impl CrashReport {
    pub fn from_outcome(input: &FuzzInput, outcome: &CaseOutcome) -> Option<CrashReport> {
        let fault = outcome.fault?;
        let tail_start = outcome.trace.events.len().saturating_sub(TRACE_TAIL);
        let trace_tail = outcome.trace.events[tail_start..].to_vec();
        let dedup_key = dedup_key(&fault, &trace_tail);
        Some(CrashReport { input: input.clone(), fault, dedup_key, trace_tail })
    }

    /// True when a replay outcome reproduces this report's fault identity.
    pub fn matches(&self, outcome: &CaseOutcome) -> bool {
        match CrashReport::from_outcome(&self.input, outcome) {
            Some(replayed) => {
                replayed.fault.kind == self.fault.kind
                    && replayed.fault.pc == self.fault.pc
                    && replayed.dedup_key == self.dedup_key
            }
            None => false,
        }
    }

    pub fn serialize(&self, w: &mut dyn Write) -> io::Result<()> {
        self.input.serialize(w)?;
        w.write_all(&[fault_kind_code(self.fault.kind)])?;
        w.write_all(&self.fault.pc.to_le_bytes())?;
        match self.fault.access_addr {
            Some(a) => {
                w.write_all(&[1])?;
                w.write_all(&a.to_le_bytes())?;
            }
            None => w.write_all(&[0, 0, 0, 0, 0, 0, 0, 0, 0])?,
        }
        w.write_all(&self.dedup_key.to_le_bytes())?;
        w.write_all(&(self.trace_tail.len() as u32).to_le_bytes())?;
        let tail = BranchTrace { events: self.trace_tail.clone() };
        tail.write_binary(w)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.serialize(&mut buf).expect("vec write");
        buf
    }

    pub fn deserialize(r: &mut dyn Read) -> io::Result<CrashReport> {
        let input = FuzzInput::deserialize(r)?;
        let mut byte = [0u8; 1];
        r.read_exact(&mut byte)?;
        let kind = fault_kind_from(byte[0])
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "bad fault kind"))?;
        let mut word = [0u8; 8];
        r.read_exact(&mut word)?;
        let pc = u64::from_le_bytes(word);
        r.read_exact(&mut byte)?;
        r.read_exact(&mut word)?;
        let access_addr = if byte[0] == 1 { Some(u64::from_le_bytes(word)) } else { None };
        r.read_exact(&mut word)?;
        let dedup = u64::from_le_bytes(word);
        let mut count = [0u8; 4];
        r.read_exact(&mut count)?;
        let n = u32::from_le_bytes(count) as usize;
        if n > 4096 {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "tail too long"));
        }
        let mut tail_bytes = vec![0u8; n * 17];
        r.read_exact(&mut tail_bytes)?;
        let tail = BranchTrace::read_binary(&tail_bytes)?;
        Ok(CrashReport {
            input,
            fault: Fault { kind, pc, access_addr },
            dedup_key: dedup,
            trace_tail: tail.events,
        })
    }

    pub fn from_bytes(data: &[u8]) -> io::Result<CrashReport> {
        Self::deserialize(&mut &data[..])
    }

    /// Stable, line-oriented fault description for the CLI.
    pub fn fault_line(&self) -> String {
        let addr = match self.fault.access_addr {
            Some(a) => format!(" addr={a:#x}"),
            None => String::new(),
        };
        format!(
            "fault kind={} pc={:#x}{addr} dedup={:016x}",
            self.fault.kind, self.fault.pc, self.dedup_key
        )
    }
}

/// Synthetic trace-tail helper for tests.
pub fn tail_of(edges: &[(u64, u64)]) -> Vec<TraceEvent> {
    edges
        .iter()
        .map(|&(source, target)| TraceEvent { source, target, kind: TraceKind::Uncond })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn serialization_roundtrip() {
        let report = CrashReport {
            input: FuzzInput::single(240, vec![0x80; 16]),
            fault: Fault { kind: FaultKind::OobWrite, pc: 0x401440, access_addr: Some(0x409000) },
            dedup_key: 0,
            trace_tail: tail_of(&[(0x401000, 0x401440), (0x401440, 0x401444)]),
        };
        let mut report = report;
        report.dedup_key = dedup_key(&report.fault, &report.trace_tail);
        let bytes = report.to_bytes();
        let back = CrashReport::from_bytes(&bytes).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn dedup_distinguishes_pc() {
        let tail = tail_of(&[(0x100, 0x200)]);
        let a = dedup_key(
            &Fault { kind: FaultKind::OobWrite, pc: 0x1000, access_addr: None },
            &tail,
        );
        let b = dedup_key(
            &Fault { kind: FaultKind::OobWrite, pc: 0x1004, access_addr: None },
            &tail,
        );
        assert_ne!(a, b);
    }

    #[test]
    fn dedup_uses_last_four_edges_only() {
        let fault = Fault { kind: FaultKind::OobRead, pc: 0x2000, access_addr: None };
        let long = tail_of(&[(1, 2), (3, 4), (5, 6), (7, 8), (9, 10), (11, 12)]);
        let short = tail_of(&[(5, 6), (7, 8), (9, 10), (11, 12)]);
        assert_eq!(dedup_key(&fault, &long), dedup_key(&fault, &short));
    }
}
