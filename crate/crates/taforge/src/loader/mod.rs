//! Load a TA binary into a fresh modeled address space at low addresses,
//! pull in its static and dynamic dependencies, bind relocations, and locate
//! the TZOS-specific entrypoints.
//!
//! Loading is two-phase: `load_image` maps the main object, queues its
//! declared dependencies and applies locally-resolvable relocations;
//! `link_dependencies` drains the queue through a resolver (transitively),
//! then binds every import. Entry resolution is profile-driven; the Trusty
//! message handler comes from the image's `.ta.manifest` metadata section
//! rather than the symbol table.

pub mod elf;

use std::collections::{BTreeMap, VecDeque};
use std::path::PathBuf;

use crate::isa::WordWidth;
use crate::profile::{DependencyPolicy, EntryRole, LayoutConfig, TzosProfile};
use crate::util::{align_down, align_up, kv_lines, parse_u64, PAGE_SIZE};
use crate::vas::{Perms, RegionKind, VirtualAddressSpace};

use crate::corpusgen::asm::RelocKind;
use elf::{ElfReloc, ElfSymbol, ParsedElf, PF_W, PF_X};

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("malformed image: {0}")]
    MalformedImage(String),
    #[error("window exhausted: cannot place {needed:#x} bytes")]
    WindowExhausted { needed: u64 },
    #[error("unsupported class: profile does not accept {width:?} images")]
    UnsupportedClass { width: WordWidth },
    #[error("unresolved symbol: {0}")]
    UnresolvedSymbol(String),
    #[error("resolver miss: library `{0}` not found")]
    ResolverMiss(String),
    #[error("entrypoint not found for role `{0}`")]
    EntryNotFound(EntryRole),
}

pub trait LibraryResolver {
    fn resolve(&self, name: &str) -> Option<Vec<u8>>;
}

/// Searches a directory by file name.
pub struct DirResolver(pub PathBuf);

impl LibraryResolver for DirResolver {
    fn resolve(&self, name: &str) -> Option<Vec<u8>> {
        std::fs::read(self.0.join(name)).ok()
    }
}

/// In-memory resolver keyed by library name.
#[derive(Default)]
pub struct MapResolver(pub BTreeMap<String, Vec<u8>>);

impl LibraryResolver for MapResolver {
    fn resolve(&self, name: &str) -> Option<Vec<u8>> {
        self.0.get(name).cloned()
    }
}

/// Empty resolver for statically-complete images.
pub struct NoLibraries;

impl LibraryResolver for NoLibraries {
    fn resolve(&self, _name: &str) -> Option<Vec<u8>> {
        None
    }
}

#[derive(Debug, Clone)]
pub struct LoadedObject {
    pub name: String,
    /// Load bias: runtime address = base + link vaddr.
    pub base: u64,
    pub span: (u64, u64),
}

#[derive(Debug, Clone, Default)]
pub struct ImageMetadata {
    pub uuid: Option<String>,
    /// Link vaddr of the registered message handler (Trusty).
    pub msg_handler: Option<u64>,
}

#[derive(Debug, Clone)]
struct PendingReloc {
    bias: u64,
    reloc: ElfReloc,
    symbol: String,
}

#[derive(Debug, Clone, Copy)]
pub struct SymbolMeta {
    pub addr: u64,
    pub size: u64,
    pub is_func: bool,
}

#[derive(Debug, Clone)]
pub struct LoadedImage {
    pub vas: VirtualAddressSpace,
    pub entrypoints: BTreeMap<EntryRole, u64>,
    pub dependency_queue: VecDeque<String>,
    pub symbols: BTreeMap<String, u64>,
    pub symbol_meta: BTreeMap<String, SymbolMeta>,
    pub stack_top: u64,
    pub image_base: u64,
    pub word_width: WordWidth,
    pub objects: Vec<LoadedObject>,
    pub metadata: ImageMetadata,
    pub window: (u64, u64),
    pub linked: bool,
    pending: Vec<PendingReloc>,
}

impl LoadedImage {
    /// Address span covered by mapped segments (TA plus libraries); the
    /// trace normalizer treats this as the image extent.
    pub fn segment_extent(&self) -> (u64, u64) {
        let mut lo = u64::MAX;
        let mut hi = 0;
        for r in self.vas.regions() {
            if r.kind == RegionKind::Segment {
                lo = lo.min(r.base);
                hi = hi.max(r.end());
            }
        }
        (lo, hi)
    }

    pub fn trampoline_region(&self) -> Option<(u64, u64)> {
        self.vas
            .regions()
            .iter()
            .find(|r| r.kind == RegionKind::Trampoline)
            .map(|r| (r.base, r.end()))
    }
}

fn parse_or_malformed(bytes: &[u8]) -> Result<ParsedElf, LoadError> {
    elf::parse(bytes).map_err(LoadError::MalformedImage)
}

fn seg_perms(flags: u32) -> Perms {
    Perms { r: true, w: flags & PF_W != 0, x: flags & PF_X != 0 }
}

/// Map one parsed object at `bias`, copy file bytes, zero-fill the rest, and
/// apply locally-resolvable relocations. Returns the object span.
fn map_object(
    vas: &mut VirtualAddressSpace,
    parsed: &ParsedElf,
    raw: &[u8],
    bias: u64,
    window: (u64, u64),
) -> Result<(u64, u64), LoadError> {
    // Reject overlapping or page-sharing segments up front.
    let mut spans: Vec<(u64, u64)> = Vec::new();
    for seg in &parsed.loads {
        let lo = align_down(seg.vaddr, PAGE_SIZE);
        let hi = align_up(seg.vaddr + seg.memsz.max(1), PAGE_SIZE);
        if spans.iter().any(|&(a, b)| lo < b && a < hi) {
            return Err(LoadError::MalformedImage("overlapping segments".into()));
        }
        spans.push((lo, hi));
    }

    let mut span_lo = u64::MAX;
    let mut span_hi = 0u64;
    for seg in &parsed.loads {
        let region_base = bias + align_down(seg.vaddr, PAGE_SIZE);
        let region_len = align_up(seg.vaddr + seg.memsz.max(1), PAGE_SIZE)
            - align_down(seg.vaddr, PAGE_SIZE);
        if region_base < window.0 || region_base + region_len > window.1 {
            return Err(LoadError::WindowExhausted { needed: region_len });
        }
        vas.map(region_base, region_len, seg_perms(seg.flags), RegionKind::Segment)
            .map_err(|e| LoadError::MalformedImage(format!("mapping failed: {e}")))?;
        let file = &raw[seg.offset as usize..(seg.offset + seg.filesz) as usize];
        vas.poke(bias + seg.vaddr, file)
            .map_err(|e| LoadError::MalformedImage(format!("populate failed: {e}")))?;
        span_lo = span_lo.min(region_base);
        span_hi = span_hi.max(region_base + region_len);
    }
    Ok((span_lo, span_hi))
}

fn apply_reloc(
    vas: &mut VirtualAddressSpace,
    width: WordWidth,
    bias: u64,
    reloc: &ElfReloc,
    target: u64,
) -> Result<(), LoadError> {
    let place = bias + reloc.offset;
    let value = target.wrapping_add(reloc.addend as u64);
    let kind = RelocKind::from_code(reloc.kind, width == WordWidth::W64).ok_or_else(|| {
        LoadError::UnresolvedSymbol(format!(
            "unsupported relocation type {} at {place:#x}",
            reloc.kind
        ))
    })?;
    match kind {
        RelocKind::AbsPtr => {
            let bytes = value.to_le_bytes();
            vas.poke(place, &bytes[..width.bytes() as usize])
                .map_err(|e| LoadError::MalformedImage(format!("bad reloc site: {e}")))?;
        }
        RelocKind::MovwG0 | RelocKind::MovwG1 => {
            let word = vas
                .peek(place, 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| LoadError::MalformedImage("bad reloc site".into()))?;
            let chunk = if kind == RelocKind::MovwG0 {
                (value & 0xffff) as u32
            } else {
                ((value >> 16) & 0xffff) as u32
            };
            let patched = (word & 0xffff_0000) | chunk;
            vas.poke(place, &patched.to_le_bytes())
                .map_err(|e| LoadError::MalformedImage(format!("bad reloc site: {e}")))?;
        }
    }
    Ok(())
}

/// Merge one object's contributions into the image: symbols, queued
/// dependencies, relocations (local now, imports deferred).
fn absorb_object(
    image: &mut LoadedImage,
    name: &str,
    parsed: &ParsedElf,
    bias: u64,
    span: (u64, u64),
) -> Result<(), LoadError> {
    image.objects.push(LoadedObject { name: name.to_string(), base: bias, span });

    for dep in &parsed.needed {
        if !image.dependency_queue.contains(dep)
            && !image.objects.iter().any(|o| &o.name == dep)
        {
            image.dependency_queue.push_back(dep.clone());
        }
    }

    for sym in &parsed.symbols {
        if sym.defined && !sym.name.is_empty() && !sym.name.starts_with('.') {
            let addr = bias + sym.value;
            image.symbols.entry(sym.name.clone()).or_insert(addr);
            image
                .symbol_meta
                .entry(sym.name.clone())
                .or_insert(SymbolMeta { addr, size: sym.size, is_func: sym.is_func });
        }
    }

    for reloc in &parsed.relocs {
        let sym: &ElfSymbol = parsed
            .symbols
            .get(reloc.sym_index as usize)
            .ok_or_else(|| LoadError::MalformedImage("relocation symbol out of range".into()))?;
        if sym.defined {
            apply_reloc(&mut image.vas, image.word_width, bias, reloc, bias + sym.value)?;
        } else {
            image.pending.push(PendingReloc {
                bias,
                reloc: reloc.clone(),
                symbol: sym.name.clone(),
            });
        }
    }

    if let Some(note) = &parsed.manifest_note {
        for (k, v) in kv_lines(note) {
            match k.as_str() {
                "uuid" => image.metadata.uuid = Some(v),
                "msg_handler" => image.metadata.msg_handler = parse_u64(&v),
                _ => {}
            }
        }
    }
    Ok(())
}

/// Parse and map a TA binary into a fresh address space within the
/// configured low-address window, queue dynamic dependencies in declaration
/// order, and allocate the stack (image-declared size or profile default).
pub fn load_image(
    ta_bytes: &[u8],
    profile: &TzosProfile,
    layout: &LayoutConfig,
) -> Result<LoadedImage, LoadError> {
    let parsed = parse_or_malformed(ta_bytes)?;
    if !profile.supports_width(parsed.width) {
        return Err(LoadError::UnsupportedClass { width: parsed.width });
    }

    let window = (layout.window_base, layout.window_limit);
    let mut vas = VirtualAddressSpace::new(parsed.width);

    let span_min = align_down(parsed.loads.first().unwrap().vaddr, PAGE_SIZE);
    let bias = layout.window_base.checked_sub(span_min).ok_or(LoadError::MalformedImage(
        "segment addresses precede the window".into(),
    ))?;

    let span = map_object(&mut vas, &parsed, ta_bytes, bias, window)?;

    let mut image = LoadedImage {
        vas,
        entrypoints: BTreeMap::new(),
        dependency_queue: VecDeque::new(),
        symbols: BTreeMap::new(),
        symbol_meta: BTreeMap::new(),
        stack_top: 0,
        image_base: bias,
        word_width: parsed.width,
        objects: Vec::new(),
        metadata: ImageMetadata::default(),
        window,
        linked: false,
        pending: Vec::new(),
    };
    absorb_object(&mut image, "<ta>", &parsed, bias, span)?;

    // Stack: image-declared size when present, else the profile default;
    // placed at the top of the window, away from segments and heap.
    let stack_size = align_up(parsed.stack_memsz.unwrap_or(layout.default_stack), PAGE_SIZE);
    let stack_base = layout
        .window_limit
        .checked_sub(stack_size)
        .filter(|b| *b >= layout.window_base)
        .ok_or(LoadError::WindowExhausted { needed: stack_size })?;
    image
        .vas
        .map(stack_base, stack_size, Perms::RW, RegionKind::Stack)
        .map_err(|_| LoadError::WindowExhausted { needed: stack_size })?;
    image.stack_top = stack_base + stack_size;

    Ok(image)
}

/// Iteratively load every queued dependency into the same address space,
/// merging exported symbols and appending transitive dependencies, then bind
/// all deferred import relocations. Under the common-library policy the
/// first library lands at the profile's fixed base.
pub fn link_dependencies(
    image: &mut LoadedImage,
    resolver: &dyn LibraryResolver,
    profile: &TzosProfile,
) -> Result<(), LoadError> {
    let mut first_lib = true;
    while let Some(name) = image.dependency_queue.pop_front() {
        if image.objects.iter().any(|o| o.name == name) {
            continue;
        }
        let bytes = resolver.resolve(&name).ok_or_else(|| LoadError::ResolverMiss(name.clone()))?;
        let parsed = parse_or_malformed(&bytes)?;
        if parsed.width != image.word_width {
            return Err(LoadError::MalformedImage(format!(
                "library `{name}` word width differs from image"
            )));
        }

        let span_min = align_down(parsed.loads.first().unwrap().vaddr, PAGE_SIZE);
        let span_len: u64 = {
            let last = parsed.loads.last().unwrap();
            align_up(last.vaddr + last.memsz, PAGE_SIZE) - span_min
        };
        let bias = if first_lib
            && profile.dependency_policy == DependencyPolicy::CommonLibrary
        {
            let base = profile.common_library_base.expect("validated profile");
            base - span_min
        } else {
            // One guard page between objects keeps out-of-bounds probes from
            // silently landing in a neighbor.
            let hint = image
                .objects
                .iter()
                .map(|o| o.span.1)
                .max()
                .unwrap_or(image.window.0)
                + PAGE_SIZE;
            let slot = image
                .vas
                .find_free(span_len, hint, image.window.1)
                .ok_or(LoadError::WindowExhausted { needed: span_len })?;
            slot - span_min
        };
        first_lib = false;

        let span = map_object(&mut image.vas, &parsed, &bytes, bias, image.window)?;
        absorb_object(image, &name, &parsed, bias, span)?;
    }

    // Bind imports now that every provider is mapped.
    let pending = std::mem::take(&mut image.pending);
    for p in pending {
        let target = *image
            .symbols
            .get(&p.symbol)
            .ok_or_else(|| LoadError::UnresolvedSymbol(p.symbol.clone()))?;
        apply_reloc(&mut image.vas, image.word_width, p.bias, &p.reloc, target)?;
    }
    image.linked = true;
    Ok(())
}

/// Resolve each profile entry role to an executable address. Symbols
/// starting with `@` resolve through the `.ta.manifest` metadata section
/// (the Trusty message handler is registered there, not exported).
pub fn resolve_entrypoints(
    image: &mut LoadedImage,
    profile: &TzosProfile,
) -> Result<BTreeMap<EntryRole, u64>, LoadError> {
    let mut out = BTreeMap::new();
    for (role, symbol) in &profile.entry_symbols {
        let addr = if symbol.starts_with('@') {
            image
                .metadata
                .msg_handler
                .map(|vaddr| image.image_base + vaddr)
                .ok_or(LoadError::EntryNotFound(*role))?
        } else {
            *image.symbols.get(symbol).ok_or(LoadError::EntryNotFound(*role))?
        };
        let executable = image.vas.region_at(addr).map(|r| r.perms.x).unwrap_or(false);
        if !executable {
            return Err(LoadError::EntryNotFound(*role));
        }
        out.insert(*role, addr);
    }
    image.entrypoints = out.clone();
    Ok(out)
}
