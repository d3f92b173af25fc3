//! The state model: per command, the minimal prerequisite chains implied by
//! the dependency graph (transitively reduced ancestors in dependency
//! order). Scheduling samples random linear extensions; the file format
//! stores one canonical chain per command (`cmd <id>: prereqs <id list>`).

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use super::deps::DependencyGraph;

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error("cycle detected in the dependency graph")]
    CycleDetected,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StateModel {
    /// Command -> all ancestors, in canonical topological order.
    pub prereqs: BTreeMap<u64, Vec<u64>>,
    /// Transitively reduced order edges among commands; empty in models
    /// loaded from a file (the canonical chain already satisfies it).
    pub order: BTreeSet<(u64, u64)>,
}

impl StateModel {
    pub fn is_empty(&self) -> bool {
        self.prereqs.values().all(|p| p.is_empty())
    }

    pub fn commands(&self) -> impl Iterator<Item = u64> + '_ {
        self.prereqs.keys().copied()
    }

    /// One minimal legal prefix for `cmd`: a random linear extension of its
    /// ancestor set under the order edges.
    pub fn sample_chain(&self, cmd: u64, rng: &mut impl Rng) -> Vec<u64> {
        let Some(ancestors) = self.prereqs.get(&cmd) else {
            return Vec::new();
        };
        if ancestors.len() <= 1 || self.order.is_empty() {
            return ancestors.clone();
        }
        let set: BTreeSet<u64> = ancestors.iter().copied().collect();
        let mut indeg: BTreeMap<u64, usize> = set.iter().map(|&n| (n, 0)).collect();
        let mut succ: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
        for &(a, b) in &self.order {
            if set.contains(&a) && set.contains(&b) {
                *indeg.get_mut(&b).unwrap() += 1;
                succ.entry(a).or_default().push(b);
            }
        }
        let mut ready: Vec<u64> = indeg.iter().filter(|(_, &d)| d == 0).map(|(&n, _)| n).collect();
        let mut out = Vec::with_capacity(set.len());
        while !ready.is_empty() {
            let pick = rng.gen_range(0..ready.len());
            let n = ready.swap_remove(pick);
            out.push(n);
            for &m in succ.get(&n).into_iter().flatten() {
                let d = indeg.get_mut(&m).unwrap();
                *d -= 1;
                if *d == 0 {
                    ready.push(m);
                }
            }
        }
        debug_assert_eq!(out.len(), set.len());
        out
    }

    /// Enumerate all minimal chains for `cmd` (every linear extension of
    /// its ancestors), up to `cap` results.
    pub fn chains(&self, cmd: u64, cap: usize) -> Vec<Vec<u64>> {
        let Some(ancestors) = self.prereqs.get(&cmd) else {
            return vec![Vec::new()];
        };
        let set: BTreeSet<u64> = ancestors.iter().copied().collect();
        let mut out = Vec::new();
        let mut current = Vec::new();
        let mut remaining = set.clone();
        self.extend_chains(&set, &mut remaining, &mut current, &mut out, cap);
        out
    }

    fn extend_chains(
        &self,
        all: &BTreeSet<u64>,
        remaining: &mut BTreeSet<u64>,
        current: &mut Vec<u64>,
        out: &mut Vec<Vec<u64>>,
        cap: usize,
    ) {
        if out.len() >= cap {
            return;
        }
        if remaining.is_empty() {
            out.push(current.clone());
            return;
        }
        let candidates: Vec<u64> = remaining
            .iter()
            .copied()
            .filter(|&n| {
                // Every in-set predecessor already placed.
                self.order
                    .iter()
                    .filter(|&&(a, b)| b == n && all.contains(&a))
                    .all(|&(a, _)| current.contains(&a))
            })
            .collect();
        for n in candidates {
            remaining.remove(&n);
            current.push(n);
            self.extend_chains(all, remaining, current, out, cap);
            current.pop();
            remaining.insert(n);
        }
    }

    pub fn write_text(&self) -> String {
        let mut out = String::new();
        for (cmd, prereqs) in &self.prereqs {
            let list: Vec<String> = prereqs.iter().map(|p| p.to_string()).collect();
            out.push_str(&format!("cmd {cmd}: prereqs {}\n", list.join(" ")));
        }
        out
    }

    pub fn parse_text(text: &str) -> Result<StateModel, String> {
        let mut model = StateModel::default();
        for raw in text.lines() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let rest = line.strip_prefix("cmd ").ok_or("expected `cmd <id>: prereqs ...`")?;
            let (id, rest) = rest.split_once(':').ok_or("missing `:`")?;
            let id = crate::util::parse_u64(id.trim()).ok_or("bad command id")?;
            let rest = rest.trim().strip_prefix("prereqs").ok_or("missing `prereqs`")?;
            let prereqs: Vec<u64> = rest
                .split_whitespace()
                .map(|t| crate::util::parse_u64(t).ok_or("bad prereq id"))
                .collect::<Result<_, _>>()?;
            model.prereqs.insert(id, prereqs);
        }
        Ok(model)
    }
}

/// Build the model from a dependency graph: topological order, transitive
/// reduction, then each command's ancestor chain.
pub fn build_state_model(graph: &DependencyGraph) -> Result<StateModel, AnalysisError> {
    let edges = graph.plain_edges();
    let nodes: BTreeSet<u64> = graph
        .nodes
        .iter()
        .copied()
        .chain(edges.iter().flat_map(|&(a, b)| [a, b]))
        .collect();

    // Kahn with a deterministic (smallest-first) tie break.
    let mut indeg: BTreeMap<u64, usize> = nodes.iter().map(|&n| (n, 0)).collect();
    let mut succ: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
    for &(a, b) in &edges {
        *indeg.get_mut(&b).unwrap() += 1;
        succ.entry(a).or_default().push(b);
    }
    let mut ready: BTreeSet<u64> =
        indeg.iter().filter(|(_, &d)| d == 0).map(|(&n, _)| n).collect();
    let mut topo = Vec::with_capacity(nodes.len());
    let mut indeg_m = indeg.clone();
    while let Some(&n) = ready.iter().next() {
        ready.remove(&n);
        topo.push(n);
        for &m in succ.get(&n).into_iter().flatten() {
            let d = indeg_m.get_mut(&m).unwrap();
            *d -= 1;
            if *d == 0 {
                ready.insert(m);
            }
        }
    }
    if topo.len() != nodes.len() {
        return Err(AnalysisError::CycleDetected);
    }

    // Reachability for the transitive reduction.
    let reachable = |from: u64, to: u64, skip: (u64, u64)| -> bool {
        let mut stack = vec![from];
        let mut seen = BTreeSet::new();
        while let Some(n) = stack.pop() {
            if n == to {
                return true;
            }
            if !seen.insert(n) {
                continue;
            }
            for &m in succ.get(&n).into_iter().flatten() {
                if (n, m) == skip {
                    continue;
                }
                stack.push(m);
            }
        }
        false
    };
    let reduced: BTreeSet<(u64, u64)> = edges
        .iter()
        .copied()
        .filter(|&(a, b)| !reachable(a, b, (a, b)))
        .collect();

    // Ancestors per node over the reduced graph.
    let mut pred: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
    for &(a, b) in &reduced {
        pred.entry(b).or_default().push(a);
    }
    let topo_pos: BTreeMap<u64, usize> = topo.iter().enumerate().map(|(i, &n)| (n, i)).collect();
    let mut model = StateModel { prereqs: BTreeMap::new(), order: reduced.clone() };
    for &n in &nodes {
        let mut ancestors = BTreeSet::new();
        let mut stack: Vec<u64> = pred.get(&n).cloned().unwrap_or_default();
        while let Some(a) = stack.pop() {
            if ancestors.insert(a) {
                stack.extend(pred.get(&a).cloned().unwrap_or_default());
            }
        }
        let mut chain: Vec<u64> = ancestors.into_iter().collect();
        chain.sort_by_key(|a| topo_pos[a]);
        model.prereqs.insert(n, chain);
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::deps::DepKind;
    use rand::SeedableRng;

    fn graph(edges: &[(u64, u64)]) -> DependencyGraph {
        let mut g = DependencyGraph::default();
        for &(a, b) in edges {
            g.nodes.insert(a);
            g.nodes.insert(b);
            g.edges.insert((a, b, DepKind::ContextMemory));
        }
        g
    }

    #[test]
    fn fan_in_enumerates_all_interleavings() {
        // Brute-force expectation: three unordered prerequisites of 222
        // admit every one of the 3! interleavings.
        let mut g = graph(&[(202, 222), (230, 222), (252, 222)]);
        g.nodes.insert(231);
        let model = build_state_model(&g).unwrap();
        let chains = model.chains(222, 100);
        assert_eq!(chains.len(), 6);
        let brute: BTreeSet<Vec<u64>> = {
            let mut all = BTreeSet::new();
            let items = [202u64, 230, 252];
            for a in 0..3 {
                for b in 0..3 {
                    for c in 0..3 {
                        let p = [items[a], items[b], items[c]];
                        let set: BTreeSet<u64> = p.iter().copied().collect();
                        if set.len() == 3 {
                            all.insert(p.to_vec());
                        }
                    }
                }
            }
            all
        };
        let got: BTreeSet<Vec<u64>> = chains.into_iter().collect();
        assert_eq!(got, brute);
        assert!(model.prereqs[&231].is_empty());
    }

    #[test]
    fn empty_graph_gives_empty_prefixes() {
        let mut g = DependencyGraph::default();
        g.nodes.extend([1, 2, 3]);
        let model = build_state_model(&g).unwrap();
        for c in [1, 2, 3] {
            assert!(model.prereqs[&c].is_empty());
        }
    }

    #[test]
    fn cycle_detected() {
        let g = graph(&[(1, 2), (2, 3), (3, 1)]);
        assert!(matches!(build_state_model(&g), Err(AnalysisError::CycleDetected)));
    }

    #[test]
    fn transitive_reduction_and_chain_order() {
        // 1 -> 2 -> 3 plus the redundant 1 -> 3.
        let g = graph(&[(1, 2), (2, 3), (1, 3)]);
        let model = build_state_model(&g).unwrap();
        assert_eq!(model.prereqs[&3], vec![1, 2]);
        assert!(model.order.contains(&(1, 2)));
        assert!(model.order.contains(&(2, 3)));
        assert!(!model.order.contains(&(1, 3)), "redundant edge must be reduced");
        let chains = model.chains(3, 10);
        assert_eq!(chains, vec![vec![1, 2]]);
    }

    #[test]
    fn sampled_chains_respect_order() {
        let g = graph(&[(202, 222)]);
        let model = build_state_model(&g).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let chain = model.sample_chain(222, &mut rng);
            assert_eq!(chain, vec![202]);
        }
    }

    #[test]
    fn text_roundtrip_keeps_canonical_chains() {
        let g = graph(&[(202, 222), (230, 222)]);
        let model = build_state_model(&g).unwrap();
        let text = model.write_text();
        let back = StateModel::parse_text(&text).unwrap();
        assert_eq!(back.prereqs, model.prereqs);
    }
}
