//! ELF emission for generated TAs and stub libraries.
//!
//! Output is a little-endian ET_DYN image (both ELF classes) with three
//! loadable segments (RX text, R rodata holding the dynamic tables, RW
//! data+bss), real DT_NEEDED records, a RELA table using the relocation
//! kinds the loader binds (abs pointer, movw G0/G1), and an optional
//! non-alloc `.ta.manifest` metadata section (UUID, Trusty message handler).

use crate::isa::WordWidth;
use crate::util::align_up;

use super::asm::{Asm, Finalized, RelocOut, Section, SectionAddrs, SymRef};

pub const TEXT_VADDR: u64 = 0x1000;
const PAGE: u64 = 0x1000;

pub const PT_LOAD: u32 = 1;
pub const PT_DYNAMIC: u32 = 2;
pub const PT_GNU_STACK: u32 = 0x6474_e551;

pub const DT_NEEDED: u64 = 1;
pub const DT_STRTAB: u64 = 5;
pub const DT_SYMTAB: u64 = 6;
pub const DT_RELA: u64 = 7;
pub const DT_RELASZ: u64 = 8;
pub const DT_RELAENT: u64 = 9;
pub const DT_SYMENT: u64 = 11;

pub const EM_OUR_ISA: u16 = 183;

pub struct ElfOptions {
    pub width: WordWidth,
    pub needed: Vec<String>,
    pub manifest_note: Option<String>,
    pub stack_size: Option<u64>,
    /// Link-time vaddr the header's e_entry points at.
    pub entry: u64,
}

pub struct BuiltObject {
    pub bytes: Vec<u8>,
    pub fin: Finalized,
}

struct W {
    buf: Vec<u8>,
}

impl W {
    fn new() -> Self {
        W { buf: Vec::new() }
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn word(&mut self, v: u64, width: WordWidth) {
        match width {
            WordWidth::W32 => self.u32(v as u32),
            WordWidth::W64 => self.u64(v),
        }
    }
    fn pad_to(&mut self, off: u64) {
        assert!(self.buf.len() as u64 <= off);
        self.buf.resize(off as usize, 0);
    }
}

struct StrTab {
    bytes: Vec<u8>,
}

impl StrTab {
    fn new() -> Self {
        StrTab { bytes: vec![0] }
    }
    fn add(&mut self, s: &str) -> u32 {
        let off = self.bytes.len() as u32;
        self.bytes.extend_from_slice(s.as_bytes());
        self.bytes.push(0);
        off
    }
}

/// Lay out, finalize and serialize one object. The section address plan is
/// computed first (sizes are known before finalize), then the assembler
/// resolves its fixups against it.
pub fn build_object(asm: Asm, opts: &ElfOptions) -> BuiltObject {
    let width = opts.width;
    let is64 = width == WordWidth::W64;
    let (syment, relaent, dynent) = if is64 { (24u64, 24u64, 16u64) } else { (16, 12, 8) };

    let text_len = asm.text_len();
    let user_rodata_len = asm.rodata_len();
    let data_len = asm.data_len();
    let _bss_len = asm.bss_len();

    // Names for .dynstr have to exist before sizes are final.
    let mut dynstr = StrTab::new();
    let mut needed_offs = Vec::new();
    for n in &opts.needed {
        needed_offs.push(dynstr.add(n));
    }
    let section_sym_names = [".text", ".rodata", ".data"];
    let mut sym_name_offs: Vec<u32> = Vec::new();
    for s in section_sym_names {
        sym_name_offs.push(dynstr.add(s));
    }
    for sym in asm.symbols() {
        sym_name_offs.push(dynstr.add(&sym.name));
    }
    for imp in asm.imports() {
        sym_name_offs.push(dynstr.add(imp));
    }

    let nsyms = 1 + 3 + asm.symbols().len() + asm.imports().len();
    let nrelocs = asm.reloc_count();
    let ndyn = opts.needed.len() + 6 + 1;

    let rodata_vaddr = align_up(TEXT_VADDR + text_len, PAGE);
    let dynamic_vaddr = align_up(rodata_vaddr + user_rodata_len, 8);
    let dynsym_vaddr = dynamic_vaddr + ndyn as u64 * dynent;
    let dynstr_vaddr = dynsym_vaddr + nsyms as u64 * syment;
    let rela_vaddr = align_up(dynstr_vaddr + dynstr.bytes.len() as u64, 8);
    let rela_size = nrelocs as u64 * relaent;
    let rodata_seg_end = rela_vaddr + rela_size;
    let data_vaddr = align_up(rodata_seg_end, PAGE);
    let bss_vaddr = data_vaddr + align_up(data_len, 8);

    let addrs = SectionAddrs {
        text: TEXT_VADDR,
        rodata: rodata_vaddr,
        data: data_vaddr,
        bss: bss_vaddr,
    };
    let fin = asm.finalize(&addrs);

    // Symbol table: index map for relocations.
    let text_sym = 1u32;
    let rodata_sym = 2u32;
    let data_sym = 3u32;
    let defined_base = 4u32;
    let import_base = defined_base + fin.symbols.len() as u32;

    let sym_index = |sym: &SymRef| -> u32 {
        match sym {
            SymRef::Section(Section::Text) => text_sym,
            SymRef::Section(Section::Rodata) => rodata_sym,
            SymRef::Section(Section::Data | Section::Bss) => data_sym,
            SymRef::Import(name) => {
                let idx = fin
                    .imports
                    .iter()
                    .position(|i| i == name)
                    .expect("import recorded");
                import_base + idx as u32
            }
        }
    };

    let sec_vaddr = |s: Section| match s {
        Section::Text => addrs.text,
        Section::Rodata => addrs.rodata,
        Section::Data => addrs.data,
        Section::Bss => addrs.bss,
    };

    // Section header indices (fixed order, null first).
    let sh_text = 1u16;
    let sh_rodata = 2u16;
    let _sh_dynamic = 3u16;
    let sh_dynsym = 4u16;
    let sh_dynstr = 5u16;
    let _sh_rela = 6u16;
    let sh_data = 7u16;
    let sh_bss = 8u16;
    let mut shnum = 10u16; // incl. null and .shstrtab
    let sh_manifest = if opts.manifest_note.is_some() {
        shnum += 1;
        Some(shnum - 2)
    } else {
        None
    };
    let sh_shstr = shnum - 1;

    let sec_shndx = |s: Section| match s {
        Section::Text => sh_text,
        Section::Rodata => sh_rodata,
        Section::Data => sh_data,
        Section::Bss => sh_bss,
    };

    let mut dynsym = W::new();
    let mut name_iter = sym_name_offs.iter();
    // Null symbol.
    dynsym.buf.extend_from_slice(&vec![0u8; syment as usize]);
    let push_sym = |w: &mut W, name: u32, value: u64, size: u64, info: u8, shndx: u16| {
        if is64 {
            w.u32(name);
            w.u8(info);
            w.u8(0);
            w.u16(shndx);
            w.u64(value);
            w.u64(size);
        } else {
            w.u32(name);
            w.u32(value as u32);
            w.u32(size as u32);
            w.u8(info);
            w.u8(0);
            w.u16(shndx);
        }
    };
    const STB_GLOBAL: u8 = 1 << 4;
    const STT_OBJECT: u8 = 1;
    const STT_FUNC: u8 = 2;
    const STT_SECTION: u8 = 3;
    for s in [Section::Text, Section::Rodata, Section::Data] {
        let name = *name_iter.next().unwrap();
        push_sym(&mut dynsym, name, sec_vaddr(s), 0, STB_GLOBAL | STT_SECTION, sec_shndx(s));
    }
    for sym in &fin.symbols {
        let name = *name_iter.next().unwrap();
        let value = sec_vaddr(sym.section) + sym.offset;
        let info = STB_GLOBAL | if sym.is_func { STT_FUNC } else { STT_OBJECT };
        push_sym(&mut dynsym, name, value, sym.size, info, sec_shndx(sym.section));
    }
    for _imp in &fin.imports {
        let name = *name_iter.next().unwrap();
        push_sym(&mut dynsym, name, 0, 0, STB_GLOBAL | STT_FUNC, 0);
    }

    let mut dynamic = W::new();
    let dyn_entry = |w: &mut W, tag: u64, val: u64| {
        if is64 {
            w.u64(tag);
            w.u64(val);
        } else {
            w.u32(tag as u32);
            w.u32(val as u32);
        }
    };
    for off in &needed_offs {
        dyn_entry(&mut dynamic, DT_NEEDED, u64::from(*off));
    }
    dyn_entry(&mut dynamic, DT_STRTAB, dynstr_vaddr);
    dyn_entry(&mut dynamic, DT_SYMTAB, dynsym_vaddr);
    dyn_entry(&mut dynamic, DT_RELA, rela_vaddr);
    dyn_entry(&mut dynamic, DT_RELASZ, rela_size);
    dyn_entry(&mut dynamic, DT_RELAENT, relaent);
    dyn_entry(&mut dynamic, DT_SYMENT, syment);
    dyn_entry(&mut dynamic, 0, 0);

    let mut rela = W::new();
    let push_rela = |w: &mut W, r: &RelocOut| {
        let sym = sym_index(&r.sym);
        if is64 {
            w.u64(r.vaddr);
            w.u64((u64::from(sym) << 32) | u64::from(r.kind.code(true)));
            w.u64(r.addend as u64);
        } else {
            w.u32(r.vaddr as u32);
            w.u32((sym << 8) | r.kind.code(false));
            w.u32(r.addend as u32);
        }
    };
    for r in &fin.relocs {
        push_rela(&mut rela, r);
    }

    // ---- file image ---------------------------------------------------

    let mut shstr = StrTab::new();
    let shstr_names: Vec<u32> = [
        ".text",
        ".rodata",
        ".dynamic",
        ".dynsym",
        ".dynstr",
        ".rela.dyn",
        ".data",
        ".bss",
    ]
    .iter()
    .map(|n| shstr.add(n))
    .collect();
    let manifest_name = opts.manifest_note.as_ref().map(|_| shstr.add(".ta.manifest"));
    let shstrtab_name = shstr.add(".shstrtab");

    let (ehsize, phentsize, shentsize) = if is64 { (64u64, 56u64, 64u64) } else { (52, 32, 40) };
    let phnum: u64 = 3 + 1 + u64::from(opts.stack_size.is_some());

    let mut f = W::new();
    // ELF header, patched later for e_shoff.
    f.buf.extend_from_slice(b"\x7fELF");
    f.u8(if is64 { 2 } else { 1 });
    f.u8(1); // little endian
    f.u8(1); // version
    f.u8(0); // generic osabi
    f.buf.extend_from_slice(&[0u8; 8]);
    if is64 {
        f.u16(3); // ET_DYN
        f.u16(EM_OUR_ISA);
        f.u32(1);
        f.u64(opts.entry);
        f.u64(ehsize); // e_phoff
        f.u64(0); // e_shoff patched below
        f.u32(0);
        f.u16(ehsize as u16);
        f.u16(phentsize as u16);
        f.u16(phnum as u16);
        f.u16(shentsize as u16);
        f.u16(shnum);
        f.u16(sh_shstr);
    } else {
        f.u16(3);
        f.u16(EM_OUR_ISA);
        f.u32(1);
        f.u32(opts.entry as u32);
        f.u32(ehsize as u32);
        f.u32(0);
        f.u32(0);
        f.u16(ehsize as u16);
        f.u16(phentsize as u16);
        f.u16(phnum as u16);
        f.u16(shentsize as u16);
        f.u16(shnum);
        f.u16(sh_shstr);
    }

    let data_filesz = align_up(data_len, 8);
    let data_memsz = data_filesz + fin.bss_len;
    let rodata_seg_len = rodata_seg_end - rodata_vaddr;

    struct Ph {
        typ: u32,
        flags: u32,
        off: u64,
        vaddr: u64,
        filesz: u64,
        memsz: u64,
        align: u64,
    }
    let mut phdrs = vec![
        Ph {
            typ: PT_LOAD,
            flags: 5,
            off: TEXT_VADDR,
            vaddr: TEXT_VADDR,
            filesz: text_len,
            memsz: text_len,
            align: PAGE,
        },
        Ph {
            typ: PT_LOAD,
            flags: 4,
            off: rodata_vaddr,
            vaddr: rodata_vaddr,
            filesz: rodata_seg_len,
            memsz: rodata_seg_len,
            align: PAGE,
        },
        Ph {
            typ: PT_LOAD,
            flags: 6,
            off: data_vaddr,
            vaddr: data_vaddr,
            filesz: data_filesz,
            memsz: data_memsz,
            align: PAGE,
        },
        Ph {
            typ: PT_DYNAMIC,
            flags: 4,
            off: dynamic_vaddr,
            vaddr: dynamic_vaddr,
            filesz: dynamic.buf.len() as u64,
            memsz: dynamic.buf.len() as u64,
            align: 8,
        },
    ];
    if let Some(stack) = opts.stack_size {
        phdrs.push(Ph {
            typ: PT_GNU_STACK,
            flags: 6,
            off: 0,
            vaddr: 0,
            filesz: 0,
            memsz: stack,
            align: 16,
        });
    }
    for p in &phdrs {
        if is64 {
            f.u32(p.typ);
            f.u32(p.flags);
            f.u64(p.off);
            f.u64(p.vaddr);
            f.u64(p.vaddr);
            f.u64(p.filesz);
            f.u64(p.memsz);
            f.u64(p.align);
        } else {
            f.u32(p.typ);
            f.u32(p.off as u32);
            f.u32(p.vaddr as u32);
            f.u32(p.vaddr as u32);
            f.u32(p.filesz as u32);
            f.u32(p.memsz as u32);
            f.u32(p.flags);
            f.u32(p.align as u32);
        }
    }

    f.pad_to(TEXT_VADDR);
    f.buf.extend_from_slice(&fin.text);
    f.pad_to(rodata_vaddr);
    f.buf.extend_from_slice(&fin.rodata);
    f.pad_to(dynamic_vaddr);
    f.buf.extend_from_slice(&dynamic.buf);
    f.buf.extend_from_slice(&dynsym.buf);
    f.buf.extend_from_slice(&dynstr.bytes);
    f.pad_to(rela_vaddr);
    f.buf.extend_from_slice(&rela.buf);
    f.pad_to(data_vaddr);
    f.buf.extend_from_slice(&fin.data);
    f.pad_to(data_vaddr + data_filesz);

    let manifest_off = f.buf.len() as u64;
    if let Some(note) = &opts.manifest_note {
        f.buf.extend_from_slice(note.as_bytes());
    }
    let manifest_len = f.buf.len() as u64 - manifest_off;
    let shstr_off = f.buf.len() as u64;
    f.buf.extend_from_slice(&shstr.bytes);

    let shoff = align_up(f.buf.len() as u64, 8);
    f.pad_to(shoff);

    const SHT_PROGBITS: u32 = 1;
    const SHT_STRTAB: u32 = 3;
    const SHT_RELA: u32 = 4;
    const SHT_DYNAMIC: u32 = 6;
    const SHT_NOBITS: u32 = 8;
    const SHT_DYNSYM: u32 = 11;
    const SHF_ALLOC: u64 = 2;
    const SHF_WRITE: u64 = 1;
    const SHF_EXEC: u64 = 4;

    struct Sh {
        name: u32,
        typ: u32,
        flags: u64,
        addr: u64,
        off: u64,
        size: u64,
        link: u32,
        entsize: u64,
    }
    let mut shdrs = vec![
        Sh { name: 0, typ: 0, flags: 0, addr: 0, off: 0, size: 0, link: 0, entsize: 0 },
        Sh {
            name: shstr_names[0],
            typ: SHT_PROGBITS,
            flags: SHF_ALLOC | SHF_EXEC,
            addr: TEXT_VADDR,
            off: TEXT_VADDR,
            size: text_len,
            link: 0,
            entsize: 0,
        },
        Sh {
            name: shstr_names[1],
            typ: SHT_PROGBITS,
            flags: SHF_ALLOC,
            addr: rodata_vaddr,
            off: rodata_vaddr,
            size: user_rodata_len,
            link: 0,
            entsize: 0,
        },
        Sh {
            name: shstr_names[2],
            typ: SHT_DYNAMIC,
            flags: SHF_ALLOC,
            addr: dynamic_vaddr,
            off: dynamic_vaddr,
            size: dynamic.buf.len() as u64,
            link: u32::from(sh_dynstr),
            entsize: dynent,
        },
        Sh {
            name: shstr_names[3],
            typ: SHT_DYNSYM,
            flags: SHF_ALLOC,
            addr: dynsym_vaddr,
            off: dynsym_vaddr,
            size: dynsym.buf.len() as u64,
            link: u32::from(sh_dynstr),
            entsize: syment,
        },
        Sh {
            name: shstr_names[4],
            typ: SHT_STRTAB,
            flags: SHF_ALLOC,
            addr: dynstr_vaddr,
            off: dynstr_vaddr,
            size: dynstr.bytes.len() as u64,
            link: 0,
            entsize: 0,
        },
        Sh {
            name: shstr_names[5],
            typ: SHT_RELA,
            flags: SHF_ALLOC,
            addr: rela_vaddr,
            off: rela_vaddr,
            size: rela_size,
            link: u32::from(sh_dynsym),
            entsize: relaent,
        },
        Sh {
            name: shstr_names[6],
            typ: SHT_PROGBITS,
            flags: SHF_ALLOC | SHF_WRITE,
            addr: data_vaddr,
            off: data_vaddr,
            size: data_filesz,
            link: 0,
            entsize: 0,
        },
        Sh {
            name: shstr_names[7],
            typ: SHT_NOBITS,
            flags: SHF_ALLOC | SHF_WRITE,
            addr: bss_vaddr,
            off: data_vaddr + data_filesz,
            size: fin.bss_len,
            link: 0,
            entsize: 0,
        },
    ];
    if let Some(name) = manifest_name {
        shdrs.push(Sh {
            name,
            typ: SHT_PROGBITS,
            flags: 0,
            addr: 0,
            off: manifest_off,
            size: manifest_len,
            link: 0,
            entsize: 0,
        });
        debug_assert_eq!(shdrs.len() as u16 - 1, sh_manifest.unwrap());
    }
    shdrs.push(Sh {
        name: shstrtab_name,
        typ: SHT_STRTAB,
        flags: 0,
        addr: 0,
        off: shstr_off,
        size: shstr.bytes.len() as u64,
        link: 0,
        entsize: 0,
    });
    assert_eq!(shdrs.len() as u16, shnum);

    for s in &shdrs {
        if is64 {
            f.u32(s.name);
            f.u32(s.typ);
            f.u64(s.flags);
            f.u64(s.addr);
            f.u64(s.off);
            f.u64(s.size);
            f.u32(s.link);
            f.u32(0);
            f.u64(if s.typ == SHT_NOBITS { 8 } else { 1 });
            f.u64(s.entsize);
        } else {
            f.u32(s.name);
            f.u32(s.typ);
            f.u32(s.flags as u32);
            f.u32(s.addr as u32);
            f.u32(s.off as u32);
            f.u32(s.size as u32);
            f.u32(s.link);
            f.u32(0);
            f.u32(if s.typ == SHT_NOBITS { 8 } else { 1 });
            f.u32(s.entsize as u32);
        }
    }

    // Patch e_shoff.
    if is64 {
        f.buf[0x28..0x30].copy_from_slice(&shoff.to_le_bytes());
    } else {
        f.buf[0x20..0x24].copy_from_slice(&(shoff as u32).to_le_bytes());
    }

    let _ = dynent;
    let _ = opts.width.bytes();
    BuiltObject { bytes: f.buf, fin }
}

// Keep the writer honest about widths used in the word helper.
impl W {
    #[allow(dead_code)]
    fn ptr(&mut self, v: u64, width: WordWidth) {
        self.word(v, width);
    }
}
