//! Fuzz inputs: a command sequence with GP-style 4-slot parameter payloads,
//! and the length-prefixed corpus serialization (sequence length, then per
//! command: id as 8-byte little-endian, 4 slot descriptors, per-slot size
//! and bytes).

use std::io::{self, Read, Write};

/// Slot types on the GP convention; the generated shims expect
/// (memref-in, memref-out, none, none).
pub const PTYPE_NONE: u8 = 0;
pub const PTYPE_VALUE_IN: u8 = 1;
pub const PTYPE_MEMREF_IN: u8 = 5;
pub const PTYPE_MEMREF_OUT: u8 = 6;

pub const DEFAULT_MAX_PAYLOAD: usize = 4096;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandInvocation {
    pub command_id: u64,
    pub param_types: [u8; 4],
    pub payloads: [Vec<u8>; 4],
}

impl CommandInvocation {
    pub fn new(command_id: u64) -> Self {
        CommandInvocation {
            command_id,
            param_types: [PTYPE_MEMREF_IN, PTYPE_MEMREF_OUT, PTYPE_NONE, PTYPE_NONE],
            payloads: Default::default(),
        }
    }

    pub fn with_request(command_id: u64, request: Vec<u8>) -> Self {
        let mut inv = Self::new(command_id);
        inv.payloads[0] = request;
        inv
    }

    /// Packed nibble word the entry shims validate.
    pub fn ptypes_word(&self) -> u16 {
        u16::from(self.param_types[0])
            | u16::from(self.param_types[1]) << 4
            | u16::from(self.param_types[2]) << 8
            | u16::from(self.param_types[3]) << 12
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FuzzInput {
    pub sequence: Vec<CommandInvocation>,
    /// Lineage identifier assigned at corpus insertion.
    pub seed_id: u64,
}

impl FuzzInput {
    pub fn single(command_id: u64, request: Vec<u8>) -> Self {
        FuzzInput {
            sequence: vec![CommandInvocation::with_request(command_id, request)],
            seed_id: 0,
        }
    }

    pub fn serialize(&self, w: &mut dyn Write) -> io::Result<()> {
        w.write_all(&(self.sequence.len() as u64).to_le_bytes())?;
        for inv in &self.sequence {
            w.write_all(&inv.command_id.to_le_bytes())?;
            w.write_all(&inv.param_types)?;
            for slot in &inv.payloads {
                w.write_all(&(slot.len() as u64).to_le_bytes())?;
                w.write_all(slot)?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.serialize(&mut buf).expect("vec write");
        buf
    }

    pub fn deserialize(r: &mut dyn Read) -> io::Result<FuzzInput> {
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u64buf)?;
        let len = u64::from_le_bytes(u64buf);
        if len == 0 || len > 4096 {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "bad sequence length"));
        }
        let mut sequence = Vec::with_capacity(len as usize);
        for _ in 0..len {
            r.read_exact(&mut u64buf)?;
            let command_id = u64::from_le_bytes(u64buf);
            let mut param_types = [0u8; 4];
            r.read_exact(&mut param_types)?;
            let mut payloads: [Vec<u8>; 4] = Default::default();
            for slot in &mut payloads {
                r.read_exact(&mut u64buf)?;
                let n = u64::from_le_bytes(u64buf);
                if n > (1 << 20) {
                    return Err(io::Error::new(io::ErrorKind::InvalidData, "slot too large"));
                }
                let mut bytes = vec![0u8; n as usize];
                r.read_exact(&mut bytes)?;
                *slot = bytes;
            }
            sequence.push(CommandInvocation { command_id, param_types, payloads });
        }
        Ok(FuzzInput { sequence, seed_id: 0 })
    }

    pub fn from_bytes(data: &[u8]) -> io::Result<FuzzInput> {
        Self::deserialize(&mut &data[..])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let mut input = FuzzInput::single(202, vec![1, 2, 3]);
        input.sequence.push(CommandInvocation::with_request(222, vec![9; 64]));
        input.sequence[1].param_types = [5, 6, 1, 0];
        input.sequence[1].payloads[2] = vec![0xaa; 8];
        let bytes = input.to_bytes();
        let back = FuzzInput::from_bytes(&bytes).unwrap();
        assert_eq!(back.sequence, input.sequence);
    }

    #[test]
    fn ptypes_word_packs_nibbles() {
        let inv = CommandInvocation::new(1);
        assert_eq!(inv.ptypes_word(), 0x0065);
    }

    #[test]
    fn empty_sequence_rejected() {
        let bytes = 0u64.to_le_bytes().to_vec();
        assert!(FuzzInput::from_bytes(&bytes).is_err());
    }
}
