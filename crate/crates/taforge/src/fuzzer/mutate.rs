//! Input mutation: exactly one operator per call, drawn from bit/byte
//! flips, interesting-value splices, length changes, block duplication,
//! command-id substitution from the recovered set, and sequence
//! truncation/extension.

use rand::Rng;

use super::input::{CommandInvocation, FuzzInput};

pub const INTERESTING_WIDTHS: [usize; 4] = [1, 2, 4, 8];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Op {
    BitFlip,
    ByteFlip,
    InterestingSplice,
    Grow,
    Shrink,
    DuplicateBlock,
    SubstituteId,
    TruncateSeq,
    ExtendSeq,
}

pub struct Mutator {
    pub known_ids: Vec<u64>,
    pub max_payload: usize,
    /// One in this many id substitutions draws an out-of-set value.
    pub wild_id_every: u64,
    /// Sequence truncation/extension; off in single-command baselines.
    pub allow_sequence_ops: bool,
    pub(crate) wild_counter: u64,
}

impl Mutator {
    pub fn new(known_ids: Vec<u64>, max_payload: usize) -> Mutator {
        Mutator {
            known_ids,
            max_payload,
            wild_id_every: 16,
            allow_sequence_ops: true,
            wild_counter: 0,
        }
    }

    fn applicable(&self, input: &FuzzInput) -> Vec<Op> {
        let any_payload = input.sequence.iter().any(|c| !c.payloads[0].is_empty());
        let mut ops = Vec::new();
        if any_payload {
            ops.extend([Op::BitFlip, Op::ByteFlip, Op::InterestingSplice, Op::Shrink]);
            if input.sequence.iter().any(|c| c.payloads[0].len() >= 2) {
                ops.push(Op::DuplicateBlock);
            }
        }
        ops.push(Op::Grow);
        if !self.known_ids.is_empty() {
            ops.push(Op::SubstituteId);
            if self.allow_sequence_ops {
                ops.push(Op::ExtendSeq);
            }
        }
        if self.allow_sequence_ops && input.sequence.len() > 1 {
            ops.push(Op::TruncateSeq);
        }
        ops
    }

    /// Apply one operator; the result differs from the input except in
    /// vanishingly rare splice-over-identical-bytes cases.
    pub fn mutate(&mut self, input: &FuzzInput, rng: &mut impl Rng) -> FuzzInput {
        let mut out = input.clone();
        let ops = self.applicable(input);
        let op = ops[rng.gen_range(0..ops.len())];
        match op {
            Op::BitFlip => {
                let (ci, payload) = pick_nonempty(&mut out, rng);
                let byte = rng.gen_range(0..payload.len());
                let bit = rng.gen_range(0..8);
                out.sequence[ci].payloads[0][byte] ^= 1 << bit;
            }
            Op::ByteFlip => {
                let (ci, payload) = pick_nonempty(&mut out, rng);
                let byte = rng.gen_range(0..payload.len());
                out.sequence[ci].payloads[0][byte] ^= 0xff;
            }
            Op::InterestingSplice => {
                let (ci, payload) = pick_nonempty(&mut out, rng);
                let width = INTERESTING_WIDTHS[rng.gen_range(0..INTERESTING_WIDTHS.len())]
                    .min(payload.len());
                let offset = rng.gen_range(0..=payload.len() - width);
                let value: u64 = match rng.gen_range(0..4) {
                    0 => 0,
                    1 => 1,
                    2 => u64::MAX,                         // -1 at every width
                    _ => (1 << (width * 8 - 1)) - 1,       // signed max
                };
                let bytes = value.to_le_bytes();
                out.sequence[ci].payloads[0][offset..offset + width]
                    .copy_from_slice(&bytes[..width]);
            }
            Op::Grow => {
                let ci = rng.gen_range(0..out.sequence.len());
                let grow = rng.gen_range(1..=32usize);
                let payload = &mut out.sequence[ci].payloads[0];
                for _ in 0..grow {
                    if payload.len() >= self.max_payload {
                        break;
                    }
                    payload.push(rng.gen());
                }
            }
            Op::Shrink => {
                let (ci, payload) = pick_nonempty(&mut out, rng);
                let cut = rng.gen_range(1..=payload.len());
                let new_len = payload.len() - cut;
                out.sequence[ci].payloads[0].truncate(new_len);
            }
            Op::DuplicateBlock => {
                let candidates: Vec<usize> = out
                    .sequence
                    .iter()
                    .enumerate()
                    .filter(|(_, c)| c.payloads[0].len() >= 2)
                    .map(|(i, _)| i)
                    .collect();
                let ci = candidates[rng.gen_range(0..candidates.len())];
                let payload = &mut out.sequence[ci].payloads[0];
                let len = payload.len();
                let block = rng.gen_range(1..=len / 2);
                let src = rng.gen_range(0..=len - block);
                let mut dst = rng.gen_range(0..=len - block);
                if dst == src {
                    dst = (dst + block).min(len - block);
                }
                let chunk: Vec<u8> = payload[src..src + block].to_vec();
                payload[dst..dst + block].copy_from_slice(&chunk);
            }
            Op::SubstituteId => {
                let ci = rng.gen_range(0..out.sequence.len());
                self.wild_counter += 1;
                let new_id = if self.wild_counter % self.wild_id_every == 0 {
                    rng.gen_range(0..=0xffff)
                } else {
                    let current = out.sequence[ci].command_id;
                    let choices: Vec<u64> = self
                        .known_ids
                        .iter()
                        .copied()
                        .filter(|&id| id != current)
                        .collect();
                    if choices.is_empty() {
                        rng.gen_range(0..=0xffff)
                    } else {
                        choices[rng.gen_range(0..choices.len())]
                    }
                };
                out.sequence[ci].command_id = new_id;
            }
            Op::TruncateSeq => {
                out.sequence.pop();
            }
            Op::ExtendSeq => {
                let id = self.known_ids[rng.gen_range(0..self.known_ids.len())];
                let len = rng.gen_range(0..=64usize);
                let payload = (0..len).map(|_| rng.gen()).collect();
                out.sequence.push(CommandInvocation::with_request(id, payload));
            }
        }
        out
    }
}

fn pick_nonempty(input: &mut FuzzInput, rng: &mut impl Rng) -> (usize, Vec<u8>) {
    let candidates: Vec<usize> = input
        .sequence
        .iter()
        .enumerate()
        .filter(|(_, c)| !c.payloads[0].is_empty())
        .map(|(i, _)| i)
        .collect();
    let ci = candidates[rng.gen_range(0..candidates.len())];
    (ci, input.sequence[ci].payloads[0].clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(9)
    }

    #[test]
    fn shrink_can_reach_zero_length() {
        let mut m = Mutator::new(vec![1], 4096);
        let input = FuzzInput::single(1, vec![0xaa]);
        let mut rng = rng();
        let mut seen_empty = false;
        for _ in 0..200 {
            let out = m.mutate(&input, &mut rng);
            if out.sequence[0].payloads[0].is_empty() && out.sequence.len() == 1 {
                seen_empty = true;
                break;
            }
        }
        assert!(seen_empty, "a 1-byte payload must be shrinkable to 0 bytes");
    }

    #[test]
    fn substitution_draws_mostly_known_ids() {
        let known = vec![202u64, 222, 230];
        let mut m = Mutator::new(known.clone(), 4096);
        let input = FuzzInput::single(202, vec![1, 2, 3, 4]);
        let mut rng = rng();
        let mut in_set = 0u32;
        let mut out_of_set = 0u32;
        for _ in 0..4000 {
            let out = m.mutate(&input, &mut rng);
            for inv in &out.sequence {
                if inv.command_id != 202 {
                    if known.contains(&inv.command_id) {
                        in_set += 1;
                    } else {
                        out_of_set += 1;
                    }
                }
            }
        }
        assert!(in_set > 0 && out_of_set > 0);
        let ratio = f64::from(out_of_set) / f64::from(in_set + out_of_set);
        // One wild draw per 16 substitutions.
        assert!(ratio > 0.01 && ratio < 0.15, "wild ratio {ratio}");
    }

    #[test]
    fn mutate_is_rarely_identity_on_random_inputs() {
        use rand::Rng as _;
        let mut m = Mutator::new(vec![202, 222], 4096);
        let mut rng = rng();
        let mut identical = 0;
        let trials = 2000;
        for _ in 0..trials {
            let input = {
                let p0: Vec<u8> = (0..16).map(|_| rng.gen()).collect();
                let p1: Vec<u8> = (0..8).map(|_| rng.gen()).collect();
                let mut i = FuzzInput::single(202, p0);
                i.sequence.push(CommandInvocation::with_request(222, p1));
                i
            };
            if m.mutate(&input, &mut rng) == input {
                identical += 1;
            }
        }
        // Non-identity with probability at least 0.99.
        assert!(
            f64::from(identical) / f64::from(trials) < 0.01,
            "{identical}/{trials} identical"
        );
    }

    #[test]
    fn payload_sizes_respect_the_cap() {
        let mut m = Mutator::new(vec![1], 64);
        let mut input = FuzzInput::single(1, vec![0; 64]);
        let mut rng = rng();
        for _ in 0..500 {
            input = m.mutate(&input, &mut rng);
            if input.sequence.is_empty() {
                break;
            }
            for inv in &input.sequence {
                assert!(inv.payloads[0].len() <= 64);
            }
        }
    }
}
