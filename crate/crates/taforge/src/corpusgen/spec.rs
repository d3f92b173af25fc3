//! TA generation specs: what commands a synthetic TA exposes, how its
//! dispatcher is shaped, which state dependencies and vulnerabilities are
//! planted. Parsed from a line-oriented text format (grammar in the README)
//! and also produced by the randomized corpus generator.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::isa::WordWidth;
use crate::profile::TzosName;
use crate::util::parse_u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DispatchStyle {
    IfElseChain,
    JumpTable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum VulnKind {
    StackOverflow,
    OobWrite,
    OobRead,
    UafStub,
}

impl VulnKind {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "stack_overflow" => VulnKind::StackOverflow,
            "oob_write" => VulnKind::OobWrite,
            "oob_read" => VulnKind::OobRead,
            "uaf_stub" => VulnKind::UafStub,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            VulnKind::StackOverflow => "stack_overflow",
            VulnKind::OobWrite => "oob_write",
            VulnKind::OobRead => "oob_read",
            VulnKind::UafStub => "uaf_stub",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BodyPlan {
    /// Copy request bytes into the response.
    Echo,
    /// Sum request bytes into the response.
    Checksum,
    /// Open a device and store the descriptor in the context.
    DeviceOpen(String),
    /// Read through the stored descriptor (depends on the opener).
    DeviceUse(String),
    /// Close the stored descriptor.
    DeviceClose(String),
    /// Self-contained open/read/close; creates no dependency.
    DeviceIo(String),
    /// Copy request bytes into a named context field via the memory helper.
    ContextWrite(String),
    /// Copy a named context field into the response via the memory helper.
    ContextRead { field: String, dangling_ok: bool },
    /// Guarded bad access; faults only after the guard commands ran in this
    /// session and the payload predicate holds.
    Vuln { kind: VulnKind },
}

#[derive(Debug, Clone)]
pub struct CommandSpec {
    pub id: u64,
    pub plans: Vec<BodyPlan>,
    /// Commands that must have executed earlier in the session, else the
    /// dispatcher returns the bad-state code without running the handler.
    pub guard: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct TaSpec {
    pub profile: TzosName,
    pub word_width: WordWidth,
    pub commands: Vec<CommandSpec>,
    pub dispatch_style: DispatchStyle,
    pub decoy_switches: u32,
    /// Target (simple, complex) branch percentages; fillers top up the mix.
    pub branch_mix: (u32, u32),
    pub seed: u64,
    pub stack_size: Option<u64>,
}

#[derive(Debug, thiserror::Error)]
#[error("invalid TA spec: {0}")]
pub struct SpecError(pub String);

impl TaSpec {
    pub fn validate(&self) -> Result<(), SpecError> {
        if self.commands.is_empty() {
            return Err(SpecError("a TA spec needs at least one command".into()));
        }
        let ids: BTreeSet<u64> = self.commands.iter().map(|c| c.id).collect();
        if ids.len() != self.commands.len() {
            return Err(SpecError("command ids must be distinct".into()));
        }
        if self.branch_mix.0 + self.branch_mix.1 != 100 {
            return Err(SpecError("branch mix percentages must sum to 100".into()));
        }
        let mut writes: BTreeSet<&str> = BTreeSet::new();
        for c in &self.commands {
            for p in &c.plans {
                if let BodyPlan::ContextWrite(f) = p {
                    writes.insert(f);
                }
            }
        }
        for c in &self.commands {
            for g in &c.guard {
                if !ids.contains(g) {
                    return Err(SpecError(format!(
                        "command {} guards on undeclared command {g}",
                        c.id
                    )));
                }
                if *g == c.id {
                    return Err(SpecError(format!("command {} guards on itself", c.id)));
                }
            }
            for p in &c.plans {
                if let BodyPlan::ContextRead { field, dangling_ok } = p {
                    if !dangling_ok && !writes.contains(field.as_str()) {
                        return Err(SpecError(format!(
                            "context field `{field}` is read but never written \
                             (use `{field}?` to flag an intentional dangling read)"
                        )));
                    }
                }
            }
        }
        if self.dispatch_style == DispatchStyle::JumpTable {
            let min = ids.iter().min().unwrap();
            let max = ids.iter().max().unwrap();
            if max - min >= 4096 {
                return Err(SpecError("jump-table dispatch needs an id span below 4096".into()));
            }
        }
        // The dependency edges this spec plants must form a DAG, otherwise
        // no legal command ordering exists.
        let edges = self.planted_edges();
        if has_cycle(&ids, edges.iter().map(|&(a, b, _)| (a, b))) {
            return Err(SpecError("planted dependencies form a cycle".into()));
        }
        Ok(())
    }

    /// The dependency edges the generated binary will exhibit, as
    /// (prereq, dependent, kind) with kind `"device_fd"`/`"context_memory"`.
    pub fn planted_edges(&self) -> Vec<(u64, u64, &'static str)> {
        let mut edges = BTreeSet::new();
        let mut ctx_writers: BTreeMap<&str, Vec<u64>> = BTreeMap::new();
        let mut dev_openers: BTreeMap<&str, Vec<u64>> = BTreeMap::new();
        for c in &self.commands {
            for p in &c.plans {
                match p {
                    BodyPlan::ContextWrite(f) => ctx_writers.entry(f).or_default().push(c.id),
                    BodyPlan::DeviceOpen(d) => dev_openers.entry(d).or_default().push(c.id),
                    _ => {}
                }
            }
        }
        for c in &self.commands {
            for p in &c.plans {
                match p {
                    BodyPlan::ContextRead { field, .. } => {
                        for w in ctx_writers.get(field.as_str()).into_iter().flatten() {
                            if *w != c.id {
                                edges.insert((*w, c.id, "context_memory"));
                            }
                        }
                    }
                    BodyPlan::DeviceUse(d) => {
                        for o in dev_openers.get(d.as_str()).into_iter().flatten() {
                            if *o != c.id {
                                edges.insert((*o, c.id, "device_fd"));
                            }
                        }
                    }
                    _ => {}
                }
            }
        }
        edges.into_iter().collect()
    }

    /// The HDCP-shaped fixture used across tests: six commands transcribing
    /// the classic session flow (init context, open/close the crypto device,
    /// decrypt, wrap/unwrap key) with one decoy switch.
    pub fn hdcp_shaped(profile: TzosName, seed: u64) -> TaSpec {
        let cmd = |id, plans: Vec<BodyPlan>, guard: Vec<u64>| CommandSpec { id, plans, guard };
        TaSpec {
            profile,
            word_width: WordWidth::W64,
            commands: vec![
                cmd(202, vec![BodyPlan::ContextWrite("init".into())], vec![]),
                cmd(
                    222,
                    vec![
                        BodyPlan::ContextRead { field: "init".into(), dangling_ok: false },
                        BodyPlan::ContextRead { field: "key".into(), dangling_ok: false },
                        BodyPlan::DeviceUse("dev://crypto".into()),
                        BodyPlan::Echo,
                    ],
                    vec![202],
                ),
                cmd(230, vec![BodyPlan::DeviceOpen("dev://crypto".into())], vec![]),
                cmd(231, vec![BodyPlan::DeviceClose("dev://crypto".into())], vec![]),
                cmd(251, vec![BodyPlan::ContextWrite("wrapped".into()), BodyPlan::Checksum], vec![]),
                cmd(252, vec![BodyPlan::ContextWrite("key".into())], vec![]),
            ],
            dispatch_style: DispatchStyle::IfElseChain,
            decoy_switches: 1,
            branch_mix: (60, 40),
            seed,
            stack_size: None,
        }
    }

    /// Deterministic randomized spec for corpus tests: 4..=10 commands with
    /// mixed body plans, valid planted dependencies, at least one decoy.
    pub fn randomized(profile: TzosName, seed: u64, style: DispatchStyle) -> TaSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a5a_5a7a);
        let n = rng.gen_range(4..=10usize);
        // Cluster ids so jump tables stay dense enough.
        let base: u64 = rng.gen_range(1..=700);
        let mut ids: Vec<u64> = Vec::new();
        while ids.len() < n {
            let id = base + rng.gen_range(0..180);
            if !ids.contains(&id) {
                ids.push(id);
            }
        }
        // Dependencies only from earlier to later ids in shuffled order keep
        // the planted graph acyclic.
        let mut order = ids.clone();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let devices = ["dev://crypto", "dev://rng", "dev://sec_store"];
        let mut commands: Vec<CommandSpec> = Vec::new();
        let mut fields: Vec<String> = Vec::new();
        let mut opened: Vec<&str> = Vec::new();
        for (pos, id) in order.iter().enumerate() {
            let mut plans = Vec::new();
            let mut guard = Vec::new();
            match rng.gen_range(0..6) {
                0 => plans.push(BodyPlan::Echo),
                1 => plans.push(BodyPlan::Checksum),
                2 => {
                    let d = devices[rng.gen_range(0..devices.len())];
                    plans.push(BodyPlan::DeviceOpen(d.into()));
                    opened.push(d);
                }
                3 if !opened.is_empty() => {
                    let d = opened[rng.gen_range(0..opened.len())];
                    plans.push(BodyPlan::DeviceUse(d.into()));
                }
                4 => {
                    let f = format!("f{pos}");
                    plans.push(BodyPlan::ContextWrite(f.clone()));
                    fields.push(f);
                }
                _ if !fields.is_empty() && pos > 0 => {
                    let f = fields[rng.gen_range(0..fields.len())].clone();
                    plans.push(BodyPlan::ContextRead { field: f, dangling_ok: false });
                    plans.push(BodyPlan::Echo);
                }
                _ => plans.push(BodyPlan::DeviceIo(devices[0].into())),
            }
            // Occasionally guard on an earlier command.
            if pos > 0 && rng.gen_bool(0.3) {
                guard.push(order[rng.gen_range(0..pos)]);
            }
            commands.push(CommandSpec { id: *id, plans, guard });
        }
        commands.sort_by_key(|c| c.id);
        let spec = TaSpec {
            profile,
            word_width: if profile == TzosName::Qsee { WordWidth::W32 } else { WordWidth::W64 },
            commands,
            dispatch_style: style,
            decoy_switches: 1 + rng.gen_range(0..2),
            branch_mix: (50 + rng.gen_range(0..4) * 5, 0),
            seed,
            stack_size: None,
        };
        let mut spec = spec;
        spec.branch_mix.1 = 100 - spec.branch_mix.0;
        spec.validate().expect("randomized specs are valid by construction");
        spec
    }
}

fn has_cycle(nodes: &BTreeSet<u64>, edges: impl Iterator<Item = (u64, u64)>) -> bool {
    let mut adj: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
    let mut indeg: BTreeMap<u64, usize> = nodes.iter().map(|&n| (n, 0)).collect();
    for (a, b) in edges {
        adj.entry(a).or_default().push(b);
        *indeg.entry(b).or_default() += 1;
    }
    let mut ready: Vec<u64> = indeg.iter().filter(|(_, &d)| d == 0).map(|(&n, _)| n).collect();
    let mut seen = 0;
    while let Some(n) = ready.pop() {
        seen += 1;
        for &m in adj.get(&n).into_iter().flatten() {
            let d = indeg.get_mut(&m).unwrap();
            *d -= 1;
            if *d == 0 {
                ready.push(m);
            }
        }
    }
    seen != indeg.len()
}

/// Append a guarded vulnerable command to a spec. Besides the hard run-time
/// guard (bad-state until every guard command executed this session), each
/// guard command gains a context-field flow into the new handler, so the
/// prerequisite chain is statically recoverable and lands in the state
/// model.
pub fn plant_vulnerability(
    spec: &TaSpec,
    kind: VulnKind,
    guard: Vec<u64>,
) -> Result<TaSpec, SpecError> {
    let ids: BTreeSet<u64> = spec.commands.iter().map(|c| c.id).collect();
    for g in &guard {
        if !ids.contains(g) {
            return Err(SpecError(format!("vulnerability guard references undeclared command {g}")));
        }
    }
    let new_id = (1..).map(|i| ids.iter().max().unwrap() + i).find(|id| !ids.contains(id)).unwrap();
    let mut out = spec.clone();
    let mut plans = Vec::new();
    for g in &guard {
        let field = format!("vguard_{g}");
        let writer = out.commands.iter_mut().find(|c| c.id == *g).expect("checked above");
        writer.plans.push(BodyPlan::ContextWrite(field.clone()));
        plans.push(BodyPlan::ContextRead { field, dangling_ok: false });
    }
    plans.push(BodyPlan::Vuln { kind });
    out.commands.push(CommandSpec { id: new_id, plans, guard });
    out.validate()?;
    Ok(out)
}

/// Parse the text spec grammar.
pub fn parse_spec(text: &str) -> Result<TaSpec, SpecError> {
    let mut profile = None;
    let mut width = WordWidth::W64;
    let mut commands = Vec::new();
    let mut style = DispatchStyle::IfElseChain;
    let mut decoys = 1;
    let mut mix = (60, 40);
    let mut seed = 0;
    let mut stack = None;

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut toks = line.split_whitespace();
        let head = toks.next().unwrap();
        let err = |msg: &str| SpecError(format!("line {}: {msg}", lineno + 1));
        match head {
            "profile" => {
                let v = toks.next().ok_or_else(|| err("missing profile name"))?;
                profile = Some(TzosName::parse(v).ok_or_else(|| err("unknown profile"))?);
            }
            "width" => {
                width = match toks.next() {
                    Some("32") => WordWidth::W32,
                    Some("64") => WordWidth::W64,
                    _ => return Err(err("width must be 32 or 64")),
                };
            }
            "seed" => {
                seed = toks
                    .next()
                    .and_then(parse_u64)
                    .ok_or_else(|| err("bad seed"))?;
            }
            "stack" => {
                stack = Some(toks.next().and_then(parse_u64).ok_or_else(|| err("bad size"))?);
            }
            "dispatch" => {
                style = match toks.next() {
                    Some("if_else") => DispatchStyle::IfElseChain,
                    Some("jump_table") => DispatchStyle::JumpTable,
                    _ => return Err(err("dispatch must be if_else or jump_table")),
                };
            }
            "decoys" => {
                decoys = toks.next().and_then(parse_u64).ok_or_else(|| err("bad count"))? as u32;
            }
            "branch_mix" => {
                let s = toks.next().and_then(parse_u64).ok_or_else(|| err("bad mix"))?;
                let c = toks.next().and_then(parse_u64).ok_or_else(|| err("bad mix"))?;
                mix = (s as u32, c as u32);
            }
            "command" => {
                let id = toks.next().and_then(parse_u64).ok_or_else(|| err("bad command id"))?;
                let mut plans = Vec::new();
                let mut guard = Vec::new();
                let rest: Vec<&str> = toks.collect();
                let mut i = 0;
                while i < rest.len() {
                    match rest[i] {
                        "guard" => {
                            let list = rest.get(i + 1).ok_or_else(|| err("guard needs ids"))?;
                            for part in list.split(',') {
                                guard.push(
                                    parse_u64(part).ok_or_else(|| err("bad guard id"))?,
                                );
                            }
                            i += 2;
                        }
                        "echo" => {
                            plans.push(BodyPlan::Echo);
                            i += 1;
                        }
                        "checksum" => {
                            plans.push(BodyPlan::Checksum);
                            i += 1;
                        }
                        "device_open" | "device_use" | "device_close" | "device_io" => {
                            let path = rest
                                .get(i + 1)
                                .ok_or_else(|| err("device plan needs a path"))?
                                .to_string();
                            plans.push(match rest[i] {
                                "device_open" => BodyPlan::DeviceOpen(path),
                                "device_use" => BodyPlan::DeviceUse(path),
                                "device_close" => BodyPlan::DeviceClose(path),
                                _ => BodyPlan::DeviceIo(path),
                            });
                            i += 2;
                        }
                        "context_write" => {
                            let f = rest.get(i + 1).ok_or_else(|| err("needs a field"))?;
                            plans.push(BodyPlan::ContextWrite(f.to_string()));
                            i += 2;
                        }
                        "context_read" => {
                            let f = rest.get(i + 1).ok_or_else(|| err("needs a field"))?;
                            let (name, dangling) = match f.strip_suffix('?') {
                                Some(n) => (n, true),
                                None => (*f, false),
                            };
                            plans.push(BodyPlan::ContextRead {
                                field: name.to_string(),
                                dangling_ok: dangling,
                            });
                            i += 2;
                        }
                        "vuln" => {
                            let k = rest.get(i + 1).ok_or_else(|| err("vuln needs a kind"))?;
                            let kind =
                                VulnKind::parse(k).ok_or_else(|| err("unknown vuln kind"))?;
                            plans.push(BodyPlan::Vuln { kind });
                            i += 2;
                        }
                        other => return Err(err(&format!("unknown plan `{other}`"))),
                    }
                }
                commands.push(CommandSpec { id, plans, guard });
            }
            other => return Err(err(&format!("unknown directive `{other}`"))),
        }
    }

    let spec = TaSpec {
        profile: profile.ok_or(SpecError("missing `profile` directive".into()))?,
        word_width: width,
        commands,
        dispatch_style: style,
        decoy_switches: decoys,
        branch_mix: mix,
        seed,
        stack_size: stack,
    };
    spec.validate()?;
    Ok(spec)
}

/// Render a spec back to its text form.
pub fn write_spec(spec: &TaSpec) -> String {
    let mut out = String::new();
    out.push_str(&format!("profile {}\n", spec.profile));
    out.push_str(&format!(
        "width {}\n",
        if spec.word_width == WordWidth::W32 { 32 } else { 64 }
    ));
    out.push_str(&format!("seed {}\n", spec.seed));
    out.push_str(&format!(
        "dispatch {}\n",
        if spec.dispatch_style == DispatchStyle::JumpTable { "jump_table" } else { "if_else" }
    ));
    out.push_str(&format!("decoys {}\n", spec.decoy_switches));
    out.push_str(&format!("branch_mix {} {}\n", spec.branch_mix.0, spec.branch_mix.1));
    if let Some(s) = spec.stack_size {
        out.push_str(&format!("stack {s}\n"));
    }
    for c in &spec.commands {
        out.push_str(&format!("command {}", c.id));
        if !c.guard.is_empty() {
            let ids: Vec<String> = c.guard.iter().map(|g| g.to_string()).collect();
            out.push_str(&format!(" guard {}", ids.join(",")));
        }
        for p in &c.plans {
            match p {
                BodyPlan::Echo => out.push_str(" echo"),
                BodyPlan::Checksum => out.push_str(" checksum"),
                BodyPlan::DeviceOpen(d) => out.push_str(&format!(" device_open {d}")),
                BodyPlan::DeviceUse(d) => out.push_str(&format!(" device_use {d}")),
                BodyPlan::DeviceClose(d) => out.push_str(&format!(" device_close {d}")),
                BodyPlan::DeviceIo(d) => out.push_str(&format!(" device_io {d}")),
                BodyPlan::ContextWrite(f) => out.push_str(&format!(" context_write {f}")),
                BodyPlan::ContextRead { field, dangling_ok } => {
                    out.push_str(&format!(
                        " context_read {field}{}",
                        if *dangling_ok { "?" } else { "" }
                    ));
                }
                BodyPlan::Vuln { kind } => out.push_str(&format!(" vuln {}", kind.name())),
            }
        }
        out.push('\n');
    }
    out
}
