//! Ground-truth manifest emitted alongside every generated TA. All addresses
//! are link-time vaddrs; add the load bias to compare against a loaded image.

use std::collections::{BTreeMap, BTreeSet};

use crate::isa::WordWidth;
use crate::profile::TzosName;
use crate::util::{parse_u64, to_hex};

use super::spec::VulnKind;

#[derive(Debug, Clone)]
pub struct ManifestField {
    pub name: String,
    pub offset: u64,
    pub width: u64,
    pub writers: BTreeSet<u64>,
    pub readers: BTreeSet<u64>,
}

#[derive(Debug, Clone)]
pub struct ManifestVuln {
    pub kind: VulnKind,
    pub cmd: u64,
    /// Minimal command sequence that reaches the bad access.
    pub trigger: Vec<u64>,
    /// Payload predicate: first request byte must exceed this.
    pub predicate_gt: u64,
    /// Link vaddr of the faulting instruction.
    pub fault_offset: u64,
}

#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub profile: Option<TzosName>,
    pub seed: u64,
    pub word_width: Option<WordWidth>,
    pub uuid: String,
    pub entrypoints: BTreeMap<String, u64>,
    pub commands: BTreeMap<u64, u64>,
    pub default_handler: Option<u64>,
    pub guards: BTreeMap<u64, Vec<u64>>,
    /// Per object: (site vaddr, decoded immediate, syscall number).
    pub svc_sites: BTreeMap<String, Vec<(u64, u16, u32)>>,
    pub dependencies: BTreeSet<(u64, u64, String)>,
    pub context_fields: Vec<ManifestField>,
    pub vulns: Vec<ManifestVuln>,
    pub cfg_edges: u64,
    /// (simple, complex) conditional-branch counts as generated.
    pub branch_counts: (u64, u64),
    pub stubs: BTreeMap<String, BTreeMap<String, u64>>,
    pub needed: Vec<String>,
    /// Decoy comparison values that must NOT be enumerated as commands.
    pub decoy_values: BTreeSet<u64>,
}

impl Manifest {
    pub fn write_text(&self) -> String {
        let mut out = String::new();
        out.push_str("[meta]\n");
        if let Some(p) = self.profile {
            out.push_str(&format!("profile = {p}\n"));
        }
        out.push_str(&format!("seed = {}\n", self.seed));
        if let Some(w) = self.word_width {
            out.push_str(&format!(
                "word_width = {}\n",
                if w == WordWidth::W32 { 32 } else { 64 }
            ));
        }
        out.push_str(&format!("uuid = {}\n", self.uuid));
        out.push_str(&format!("cfg_edges = {}\n", self.cfg_edges));
        out.push_str(&format!(
            "branch_counts = {} {}\n",
            self.branch_counts.0, self.branch_counts.1
        ));

        out.push_str("[entrypoints]\n");
        for (role, addr) in &self.entrypoints {
            out.push_str(&format!("{role} = {addr:#x}\n"));
        }

        out.push_str("[commands]\n");
        for (id, addr) in &self.commands {
            out.push_str(&format!("{id} = {addr:#x}\n"));
        }
        if let Some(d) = self.default_handler {
            out.push_str(&format!("default = {d:#x}\n"));
        }

        if !self.guards.is_empty() {
            out.push_str("[guards]\n");
            for (id, prereqs) in &self.guards {
                let list: Vec<String> = prereqs.iter().map(|p| p.to_string()).collect();
                out.push_str(&format!("{id} = {}\n", list.join(",")));
            }
        }

        for (obj, sites) in &self.svc_sites {
            out.push_str(&format!("[svc_sites {obj}]\n"));
            for (addr, imm, num) in sites {
                out.push_str(&format!("{addr:#x} imm={imm} num={num}\n"));
            }
        }

        out.push_str("[dependencies]\n");
        for (a, b, kind) in &self.dependencies {
            out.push_str(&format!("{a} -> {b} {kind}\n"));
        }

        if !self.context_fields.is_empty() {
            out.push_str("[context_fields]\n");
            for f in &self.context_fields {
                let w: Vec<String> = f.writers.iter().map(|x| x.to_string()).collect();
                let r: Vec<String> = f.readers.iter().map(|x| x.to_string()).collect();
                out.push_str(&format!(
                    "name={} offset={} width={} writers={} readers={}\n",
                    f.name,
                    f.offset,
                    f.width,
                    if w.is_empty() { "-".into() } else { w.join(",") },
                    if r.is_empty() { "-".into() } else { r.join(",") },
                ));
            }
        }

        if !self.vulns.is_empty() {
            out.push_str("[vulns]\n");
            for v in &self.vulns {
                let t: Vec<String> = v.trigger.iter().map(|x| x.to_string()).collect();
                out.push_str(&format!(
                    "kind={} cmd={} trigger={} predicate_gt={} fault_offset={:#x}\n",
                    v.kind.name(),
                    v.cmd,
                    t.join(","),
                    v.predicate_gt,
                    v.fault_offset
                ));
            }
        }

        for (lib, exports) in &self.stubs {
            out.push_str(&format!("[stubs {lib}]\n"));
            for (name, addr) in exports {
                out.push_str(&format!("{name} = {addr:#x}\n"));
            }
        }

        if !self.needed.is_empty() {
            out.push_str("[needed]\n");
            for n in &self.needed {
                out.push_str(n);
                out.push('\n');
            }
        }

        if !self.decoy_values.is_empty() {
            out.push_str("[decoys]\n");
            for v in &self.decoy_values {
                out.push_str(&format!("{v}\n"));
            }
        }
        out
    }

    pub fn parse_text(text: &str) -> Result<Manifest, String> {
        let mut m = Manifest::default();
        let mut section = String::new();
        for raw in text.lines() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line.starts_with('[') && line.ends_with(']') {
                section = line[1..line.len() - 1].to_string();
                continue;
            }
            let sec = section.as_str();
            match sec {
                "meta" => {
                    let (k, v) = line.split_once('=').ok_or("bad meta line")?;
                    let (k, v) = (k.trim(), v.trim());
                    match k {
                        "profile" => m.profile = TzosName::parse(v),
                        "seed" => m.seed = parse_u64(v).ok_or("bad seed")?,
                        "word_width" => {
                            m.word_width = Some(if v == "32" {
                                WordWidth::W32
                            } else {
                                WordWidth::W64
                            })
                        }
                        "uuid" => m.uuid = v.to_string(),
                        "cfg_edges" => m.cfg_edges = parse_u64(v).ok_or("bad edge count")?,
                        "branch_counts" => {
                            let mut it = v.split_whitespace();
                            m.branch_counts = (
                                it.next().and_then(parse_u64).ok_or("bad counts")?,
                                it.next().and_then(parse_u64).ok_or("bad counts")?,
                            );
                        }
                        _ => return Err(format!("unknown meta key `{k}`")),
                    }
                }
                "entrypoints" => {
                    let (k, v) = line.split_once('=').ok_or("bad entrypoint line")?;
                    m.entrypoints
                        .insert(k.trim().to_string(), parse_u64(v.trim()).ok_or("bad addr")?);
                }
                "commands" => {
                    let (k, v) = line.split_once('=').ok_or("bad command line")?;
                    let addr = parse_u64(v.trim()).ok_or("bad addr")?;
                    if k.trim() == "default" {
                        m.default_handler = Some(addr);
                    } else {
                        m.commands.insert(parse_u64(k.trim()).ok_or("bad id")?, addr);
                    }
                }
                "guards" => {
                    let (k, v) = line.split_once('=').ok_or("bad guard line")?;
                    let prereqs: Vec<u64> = v
                        .trim()
                        .split(',')
                        .filter(|s| !s.is_empty())
                        .map(|s| parse_u64(s).ok_or("bad guard id"))
                        .collect::<Result<_, _>>()?;
                    m.guards.insert(parse_u64(k.trim()).ok_or("bad id")?, prereqs);
                }
                "dependencies" => {
                    let mut it = line.split_whitespace();
                    let a = it.next().and_then(parse_u64).ok_or("bad dep")?;
                    let arrow = it.next().ok_or("bad dep")?;
                    if arrow != "->" {
                        return Err("bad dep arrow".into());
                    }
                    let b = it.next().and_then(parse_u64).ok_or("bad dep")?;
                    let kind = it.next().ok_or("bad dep kind")?.to_string();
                    m.dependencies.insert((a, b, kind));
                }
                "context_fields" => {
                    let mut f = ManifestField {
                        name: String::new(),
                        offset: 0,
                        width: 0,
                        writers: BTreeSet::new(),
                        readers: BTreeSet::new(),
                    };
                    for part in line.split_whitespace() {
                        let (k, v) = part.split_once('=').ok_or("bad field attr")?;
                        match k {
                            "name" => f.name = v.to_string(),
                            "offset" => f.offset = parse_u64(v).ok_or("bad offset")?,
                            "width" => f.width = parse_u64(v).ok_or("bad width")?,
                            "writers" | "readers" => {
                                let set: BTreeSet<u64> = if v == "-" {
                                    BTreeSet::new()
                                } else {
                                    v.split(',')
                                        .map(|s| parse_u64(s).ok_or("bad id"))
                                        .collect::<Result<_, _>>()?
                                };
                                if k == "writers" {
                                    f.writers = set;
                                } else {
                                    f.readers = set;
                                }
                            }
                            _ => return Err(format!("unknown field attr `{k}`")),
                        }
                    }
                    m.context_fields.push(f);
                }
                "vulns" => {
                    let mut kind = None;
                    let mut cmd = 0;
                    let mut trigger = Vec::new();
                    let mut predicate_gt = 0;
                    let mut fault_offset = 0;
                    for part in line.split_whitespace() {
                        let (k, v) = part.split_once('=').ok_or("bad vuln attr")?;
                        match k {
                            "kind" => kind = VulnKind::parse(v),
                            "cmd" => cmd = parse_u64(v).ok_or("bad cmd")?,
                            "trigger" => {
                                trigger = v
                                    .split(',')
                                    .map(|s| parse_u64(s).ok_or("bad id"))
                                    .collect::<Result<_, _>>()?
                            }
                            "predicate_gt" => predicate_gt = parse_u64(v).ok_or("bad value")?,
                            "fault_offset" => fault_offset = parse_u64(v).ok_or("bad addr")?,
                            _ => return Err(format!("unknown vuln attr `{k}`")),
                        }
                    }
                    m.vulns.push(ManifestVuln {
                        kind: kind.ok_or("missing vuln kind")?,
                        cmd,
                        trigger,
                        predicate_gt,
                        fault_offset,
                    });
                }
                "needed" => m.needed.push(line.to_string()),
                "decoys" => {
                    m.decoy_values.insert(parse_u64(line).ok_or("bad decoy value")?);
                }
                _ if sec.starts_with("svc_sites ") => {
                    let obj = sec["svc_sites ".len()..].to_string();
                    let mut it = line.split_whitespace();
                    let addr = it.next().and_then(parse_u64).ok_or("bad site addr")?;
                    let imm = it
                        .next()
                        .and_then(|s| s.strip_prefix("imm="))
                        .and_then(parse_u64)
                        .ok_or("bad imm")? as u16;
                    let num = it
                        .next()
                        .and_then(|s| s.strip_prefix("num="))
                        .and_then(parse_u64)
                        .ok_or("bad num")? as u32;
                    m.svc_sites.entry(obj).or_default().push((addr, imm, num));
                }
                _ if sec.starts_with("stubs ") => {
                    let lib = sec["stubs ".len()..].to_string();
                    let (k, v) = line.split_once('=').ok_or("bad stub line")?;
                    m.stubs
                        .entry(lib)
                        .or_default()
                        .insert(k.trim().to_string(), parse_u64(v.trim()).ok_or("bad addr")?);
                }
                _ => return Err(format!("line outside a known section: `{line}`")),
            }
        }
        Ok(m)
    }
}

/// Deterministic opaque UUID derived from the generation seed.
pub fn synth_uuid(seed: u64) -> String {
    let mut bytes = Vec::new();
    let mut s = seed ^ 0x0123_4567_89ab_cdef;
    for _ in 0..2 {
        s = s.wrapping_mul(0x2545_f491_4f6c_dd1d).rotate_left(17);
        bytes.extend_from_slice(&s.to_le_bytes());
    }
    to_hex(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip() {
        let mut m = Manifest {
            profile: Some(TzosName::Teegris),
            seed: 7,
            word_width: Some(WordWidth::W64),
            uuid: synth_uuid(7),
            cfg_edges: 42,
            branch_counts: (30, 20),
            default_handler: Some(0x1198),
            ..Default::default()
        };
        m.entrypoints.insert("invoke".into(), 0x1080);
        m.commands.insert(202, 0x1200);
        m.guards.insert(222, vec![202]);
        m.dependencies.insert((202, 222, "context_memory".into()));
        m.svc_sites.insert("<ta>".into(), vec![(0x1300, 0, 0x21)]);
        m.context_fields.push(ManifestField {
            name: "key".into(),
            offset: 16,
            width: 8,
            writers: [252].into(),
            readers: [222].into(),
        });
        m.vulns.push(ManifestVuln {
            kind: VulnKind::OobWrite,
            cmd: 240,
            trigger: vec![202, 240],
            predicate_gt: 64,
            fault_offset: 0x1440,
        });
        m.stubs.insert("libtzsl.so".into(), [("tz_read".to_string(), 0x1040u64)].into());
        m.needed.push("libtzsl.so".into());
        m.decoy_values.insert(7);

        let text = m.write_text();
        let back = Manifest::parse_text(&text).unwrap();
        assert_eq!(back.commands, m.commands);
        assert_eq!(back.dependencies, m.dependencies);
        assert_eq!(back.svc_sites, m.svc_sites);
        assert_eq!(back.vulns.len(), 1);
        assert_eq!(back.vulns[0].fault_offset, 0x1440);
        assert_eq!(back.stubs, m.stubs);
        assert_eq!(back.guards, m.guards);
        assert_eq!(back.cfg_edges, 42);
        assert_eq!(back.decoy_values, m.decoy_values);
    }
}
