//! Branch traces: ordered taken-edge events with an address filter, plus the
//! text and binary file formats (one record per line, or fixed 17-byte
//! little-endian records).

use std::io::{self, BufRead, Write};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum TraceKind {
    CondTaken,
    Uncond,
    Call,
    Ret,
    Trap,
}

impl TraceKind {
    pub fn code(self) -> u8 {
        match self {
            TraceKind::CondTaken => 0,
            TraceKind::Uncond => 1,
            TraceKind::Call => 2,
            TraceKind::Ret => 3,
            TraceKind::Trap => 4,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => TraceKind::CondTaken,
            1 => TraceKind::Uncond,
            2 => TraceKind::Call,
            3 => TraceKind::Ret,
            4 => TraceKind::Trap,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            TraceKind::CondTaken => "COND_TAKEN",
            TraceKind::Uncond => "UNCOND",
            TraceKind::Call => "CALL",
            TraceKind::Ret => "RET",
            TraceKind::Trap => "TRAP",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "COND_TAKEN" => TraceKind::CondTaken,
            "UNCOND" => TraceKind::Uncond,
            "CALL" => TraceKind::Call,
            "RET" => TraceKind::Ret,
            "TRAP" => TraceKind::Trap,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TraceEvent {
    pub source: u64,
    pub target: u64,
    pub kind: TraceKind,
}

/// Which addresses get recorded. The return-to-host sentinel is a member of
/// every filter set so the synthetic entry/exit events stay visible.
#[derive(Debug, Clone)]
pub enum TraceFilter {
    All,
    Ranges(Vec<(u64, u64)>),
}

impl TraceFilter {
    pub fn passes(&self, addr: u64) -> bool {
        match self {
            TraceFilter::All => true,
            TraceFilter::Ranges(ranges) => {
                ranges.iter().any(|&(lo, hi)| addr >= lo && addr < hi)
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BranchTrace {
    pub events: Vec<TraceEvent>,
}

impl BranchTrace {
    pub fn new() -> Self {
        BranchTrace { events: Vec::new() }
    }

    pub fn write_text(&self, w: &mut dyn Write) -> io::Result<()> {
        for e in &self.events {
            writeln!(w, "{:#x} {:#x} {}", e.source, e.target, e.kind.name())?;
        }
        Ok(())
    }

    pub fn read_text(r: &mut dyn BufRead) -> io::Result<BranchTrace> {
        let mut events = Vec::new();
        for line in r.lines() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let parse = |s: Option<&str>| {
                s.and_then(crate::util::parse_u64)
                    .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "bad trace line"))
            };
            let source = parse(it.next())?;
            let target = parse(it.next())?;
            let kind = it
                .next()
                .and_then(TraceKind::parse)
                .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "bad trace kind"))?;
            events.push(TraceEvent { source, target, kind });
        }
        Ok(BranchTrace { events })
    }

    pub fn write_binary(&self, w: &mut dyn Write) -> io::Result<()> {
        for e in &self.events {
            w.write_all(&e.source.to_le_bytes())?;
            w.write_all(&e.target.to_le_bytes())?;
            w.write_all(&[e.kind.code()])?;
        }
        Ok(())
    }

    pub fn read_binary(data: &[u8]) -> io::Result<BranchTrace> {
        if data.len() % 17 != 0 {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                "binary trace length is not a multiple of 17",
            ));
        }
        let mut events = Vec::with_capacity(data.len() / 17);
        for rec in data.chunks_exact(17) {
            let source = u64::from_le_bytes(rec[0..8].try_into().unwrap());
            let target = u64::from_le_bytes(rec[8..16].try_into().unwrap());
            let kind = TraceKind::from_code(rec[16])
                .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "bad trace kind"))?;
            events.push(TraceEvent { source, target, kind });
        }
        Ok(BranchTrace { events })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> BranchTrace {
        BranchTrace {
            events: vec![
                TraceEvent { source: 0x1000, target: 0x2000, kind: TraceKind::Call },
                TraceEvent { source: 0x2004, target: 0x1004, kind: TraceKind::Ret },
            ],
        }
    }

    #[test]
    fn text_roundtrip() {
        let t = sample();
        let mut buf = Vec::new();
        t.write_text(&mut buf).unwrap();
        let back = BranchTrace::read_text(&mut buf.as_slice()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn binary_records_are_17_bytes() {
        let t = sample();
        let mut buf = Vec::new();
        t.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), 34);
        assert_eq!(BranchTrace::read_binary(&buf).unwrap(), t);
    }
}
