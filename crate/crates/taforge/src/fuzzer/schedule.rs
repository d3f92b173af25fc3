//! Input scheduling: pick a target command weighted toward the least
//! covered, prepend one of its minimal prerequisite chains from the state
//! model, and attach payloads mutated from a corpus parent or generated
//! fresh. With probability epsilon the chain is deliberately broken to
//! exercise the bad-state arms.

use std::collections::BTreeMap;

use rand::Rng;

use crate::analysis::StateModel;

use super::input::{CommandInvocation, FuzzInput};

pub struct Scheduler {
    pub model: StateModel,
    pub known_ids: Vec<u64>,
    pub epsilon: f64,
    /// Upper bound for freshly generated request payloads.
    pub fresh_payload_max: usize,
    /// Single-command mode: ignore the state model entirely (baseline).
    pub use_state_model: bool,
}

impl Scheduler {
    pub fn new(model: StateModel, known_ids: Vec<u64>) -> Scheduler {
        Scheduler {
            model,
            known_ids,
            epsilon: 0.1,
            fresh_payload_max: 64,
            use_state_model: true,
        }
    }

    /// `cmd_cov` carries the number of distinct coverage buckets already
    /// attributed to each command; less-covered commands get more weight.
    pub fn schedule(
        &self,
        cmd_cov: &BTreeMap<u64, usize>,
        corpus: &[FuzzInput],
        rng: &mut impl Rng,
    ) -> FuzzInput {
        let target = self.pick_target(cmd_cov, rng);
        let mut sequence_ids: Vec<u64> = Vec::new();
        if self.use_state_model {
            let mut chain = self.model.sample_chain(target, rng);
            if !chain.is_empty() && self.epsilon > 0.0 && rng.gen_bool(self.epsilon) {
                // Deliberate violation: drop one prerequisite.
                let drop = rng.gen_range(0..chain.len());
                chain.remove(drop);
            }
            sequence_ids.extend(chain);
        }
        sequence_ids.push(target);

        let parent = if !corpus.is_empty() && rng.gen_bool(0.8) {
            Some(&corpus[rng.gen_range(0..corpus.len())])
        } else {
            None
        };

        let sequence = sequence_ids
            .into_iter()
            .map(|id| {
                if let Some(p) = parent {
                    if let Some(inv) = p.sequence.iter().find(|inv| inv.command_id == id) {
                        let mut inv = inv.clone();
                        inv.command_id = id;
                        return inv;
                    }
                }
                self.fresh_invocation(id, rng)
            })
            .collect();
        FuzzInput { sequence, seed_id: 0 }
    }

    fn pick_target(&self, cmd_cov: &BTreeMap<u64, usize>, rng: &mut impl Rng) -> u64 {
        if self.known_ids.is_empty() {
            return rng.gen_range(0..=0xffff);
        }
        let weights: Vec<f64> = self
            .known_ids
            .iter()
            .map(|id| 1.0 / (1.0 + cmd_cov.get(id).copied().unwrap_or(0) as f64))
            .collect();
        let total: f64 = weights.iter().sum();
        let mut draw = rng.gen_range(0.0..total);
        for (id, w) in self.known_ids.iter().zip(&weights) {
            if draw < *w {
                return *id;
            }
            draw -= w;
        }
        *self.known_ids.last().unwrap()
    }

    fn fresh_invocation(&self, id: u64, rng: &mut impl Rng) -> CommandInvocation {
        let len = rng.gen_range(0..=self.fresh_payload_max);
        let payload = (0..len).map(|_| rng.gen()).collect();
        let mut inv = CommandInvocation::with_request(id, payload);
        // Occasionally perturb the parameter types to poke the shim's
        // validation arm.
        if rng.gen_bool(0.05) {
            let slot = rng.gen_range(0..4);
            inv.param_types[slot] = rng.gen_range(0..=7);
        }
        inv
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::deps::{DepKind, DependencyGraph};
    use crate::analysis::statemodel::build_state_model;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model_202_before_222() -> StateModel {
        let mut g = DependencyGraph::default();
        g.nodes.extend([202, 222]);
        g.edges.insert((202, 222, DepKind::ContextMemory));
        build_state_model(&g).unwrap()
    }

    #[test]
    fn zero_epsilon_never_breaks_the_chain() {
        let mut sched = Scheduler::new(model_202_before_222(), vec![202, 222]);
        sched.epsilon = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cov = BTreeMap::new();
        for _ in 0..1000 {
            let input = sched.schedule(&cov, &[], &mut rng);
            let ids: Vec<u64> = input.sequence.iter().map(|c| c.command_id).collect();
            if let Some(pos_222) = ids.iter().position(|&i| i == 222) {
                if let Some(pos_202) = ids.iter().position(|&i| i == 202) {
                    assert!(pos_202 < pos_222, "202 must precede 222 in {ids:?}");
                } else {
                    panic!("222 scheduled without its prerequisite in {ids:?}");
                }
            }
        }
    }

    #[test]
    fn empty_model_schedules_single_commands() {
        let sched = Scheduler::new(StateModel::default(), vec![7, 8, 9]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let input = sched.schedule(&BTreeMap::new(), &[], &mut rng);
            assert_eq!(input.sequence.len(), 1);
        }
    }

    #[test]
    fn coverage_weighting_prefers_cold_commands() {
        let sched = Scheduler::new(StateModel::default(), vec![1, 2]);
        let mut cov = BTreeMap::new();
        cov.insert(1u64, 10_000usize);
        cov.insert(2u64, 0usize);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut hot = 0;
        let mut cold = 0;
        for _ in 0..1000 {
            match sched.pick_target(&cov, &mut rng) {
                1 => hot += 1,
                2 => cold += 1,
                _ => unreachable!(),
            }
        }
        assert!(cold > hot * 10, "cold {cold} vs hot {hot}");
    }
}
