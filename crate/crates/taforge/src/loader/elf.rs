//! Minimal ELF reader for TA images: little-endian, both classes, loadable
//! segments, dynamic needed-list, dynamic symbols, RELA relocations, and the
//! optional `.ta.manifest` metadata section.
//!
//! Every offset is bounds-checked; any structural problem surfaces as a
//! parse error string that the loader converts into MALFORMED_IMAGE.

use crate::isa::WordWidth;

pub const PT_LOAD: u32 = 1;
pub const PT_DYNAMIC: u32 = 2;
pub const PT_GNU_STACK: u32 = 0x6474_e551;

pub const PF_X: u32 = 1;
pub const PF_W: u32 = 2;
pub const PF_R: u32 = 4;

#[derive(Debug, Clone)]
pub struct SegmentInfo {
    pub vaddr: u64,
    pub offset: u64,
    pub filesz: u64,
    pub memsz: u64,
    pub flags: u32,
}

#[derive(Debug, Clone)]
pub struct ElfSymbol {
    pub name: String,
    pub value: u64,
    pub size: u64,
    pub defined: bool,
    pub is_func: bool,
}

#[derive(Debug, Clone)]
pub struct ElfReloc {
    pub offset: u64,
    pub kind: u32,
    pub sym_index: u32,
    pub addend: i64,
}

#[derive(Debug, Clone)]
pub struct ParsedElf {
    pub width: WordWidth,
    pub entry: u64,
    pub loads: Vec<SegmentInfo>,
    pub stack_memsz: Option<u64>,
    pub needed: Vec<String>,
    pub symbols: Vec<ElfSymbol>,
    pub relocs: Vec<ElfReloc>,
    pub manifest_note: Option<String>,
}

type PResult<T> = Result<T, String>;

fn slice(data: &[u8], off: u64, len: u64) -> PResult<&[u8]> {
    let end = off.checked_add(len).ok_or("offset overflow")?;
    if end > data.len() as u64 {
        return Err(format!("truncated: need {end:#x} bytes, have {:#x}", data.len()));
    }
    Ok(&data[off as usize..end as usize])
}

fn u16le(data: &[u8], off: u64) -> PResult<u16> {
    Ok(u16::from_le_bytes(slice(data, off, 2)?.try_into().unwrap()))
}

fn u32le(data: &[u8], off: u64) -> PResult<u32> {
    Ok(u32::from_le_bytes(slice(data, off, 4)?.try_into().unwrap()))
}

fn u64le(data: &[u8], off: u64) -> PResult<u64> {
    Ok(u64::from_le_bytes(slice(data, off, 8)?.try_into().unwrap()))
}

fn word(data: &[u8], off: u64, width: WordWidth) -> PResult<u64> {
    match width {
        WordWidth::W32 => Ok(u64::from(u32le(data, off)?)),
        WordWidth::W64 => u64le(data, off),
    }
}

fn cstr(table: &[u8], off: u64) -> PResult<String> {
    let start = off as usize;
    if start >= table.len() {
        return Err("string offset out of range".into());
    }
    let end = table[start..]
        .iter()
        .position(|&b| b == 0)
        .map(|p| start + p)
        .ok_or("unterminated string")?;
    Ok(String::from_utf8_lossy(&table[start..end]).into_owned())
}

pub fn parse(data: &[u8]) -> PResult<ParsedElf> {
    let ident = slice(data, 0, 16)?;
    if &ident[0..4] != b"\x7fELF" {
        return Err("bad magic".into());
    }
    let width = match ident[4] {
        1 => WordWidth::W32,
        2 => WordWidth::W64,
        c => return Err(format!("bad class {c}")),
    };
    if ident[5] != 1 {
        return Err("not little-endian".into());
    }
    if ident[6] != 1 {
        return Err("bad ident version".into());
    }
    let is64 = width == WordWidth::W64;

    let e_type = u16le(data, 16)?;
    if e_type != 2 && e_type != 3 {
        return Err(format!("unsupported object type {e_type}"));
    }
    let machine = u16le(data, 18)?;
    if machine != crate::corpusgen::elfout::EM_OUR_ISA {
        return Err(format!("unsupported machine {machine}"));
    }

    let (entry, phoff, shoff, phentsize, phnum, shentsize, shnum, shstrndx) = if is64 {
        (
            u64le(data, 24)?,
            u64le(data, 32)?,
            u64le(data, 40)?,
            u16le(data, 54)?,
            u16le(data, 56)?,
            u16le(data, 58)?,
            u16le(data, 60)?,
            u16le(data, 62)?,
        )
    } else {
        (
            u64::from(u32le(data, 24)?),
            u64::from(u32le(data, 28)?),
            u64::from(u32le(data, 32)?),
            u16le(data, 42)?,
            u16le(data, 44)?,
            u16le(data, 46)?,
            u16le(data, 48)?,
            u16le(data, 50)?,
        )
    };

    let min_phent = if is64 { 56 } else { 32 };
    if phnum > 0 && (phentsize as u64) < min_phent {
        return Err("program header entries too small".into());
    }

    let mut loads = Vec::new();
    let mut stack_memsz = None;
    let mut dynamic_range: Option<(u64, u64)> = None;
    for i in 0..phnum {
        let base = phoff + u64::from(i) * u64::from(phentsize);
        let p_type = u32le(data, base)?;
        let (flags, offset, vaddr, filesz, memsz) = if is64 {
            (
                u32le(data, base + 4)?,
                u64le(data, base + 8)?,
                u64le(data, base + 16)?,
                u64le(data, base + 32)?,
                u64le(data, base + 40)?,
            )
        } else {
            (
                u32le(data, base + 24)?,
                u64::from(u32le(data, base + 4)?),
                u64::from(u32le(data, base + 8)?),
                u64::from(u32le(data, base + 16)?),
                u64::from(u32le(data, base + 20)?),
            )
        };
        match p_type {
            PT_LOAD => {
                if filesz > memsz {
                    return Err("segment filesz exceeds memsz".into());
                }
                slice(data, offset, filesz)?;
                loads.push(SegmentInfo { vaddr, offset, filesz, memsz, flags });
            }
            PT_GNU_STACK => {
                if memsz > 0 {
                    stack_memsz = Some(memsz);
                }
            }
            PT_DYNAMIC => dynamic_range = Some((offset, filesz)),
            _ => {}
        }
    }
    if loads.is_empty() {
        return Err("no loadable segments".into());
    }
    loads.sort_by_key(|s| s.vaddr);

    // Section headers locate the dynamic tables and metadata by name.
    let mut dynsym_raw: Option<&[u8]> = None;
    let mut dynstr_raw: Option<&[u8]> = None;
    let mut rela_raw: Option<&[u8]> = None;
    let mut manifest_note = None;
    if shnum > 0 {
        let min_shent = if is64 { 64u64 } else { 40 };
        if (shentsize as u64) < min_shent {
            return Err("section header entries too small".into());
        }
        let sh = |i: u16| -> PResult<(u32, u32, u64, u64)> {
            let base = shoff + u64::from(i) * u64::from(shentsize);
            let name = u32le(data, base)?;
            let typ = u32le(data, base + 4)?;
            let (off, size) = if is64 {
                (u64le(data, base + 24)?, u64le(data, base + 32)?)
            } else {
                (u64::from(u32le(data, base + 16)?), u64::from(u32le(data, base + 20)?))
            };
            Ok((name, typ, off, size))
        };
        if shstrndx >= shnum {
            return Err("bad shstrndx".into());
        }
        let (_, _, stroff, strsize) = sh(shstrndx)?;
        let shstr = slice(data, stroff, strsize)?;
        for i in 0..shnum {
            let (name_off, typ, off, size) = sh(i)?;
            let name = cstr(shstr, u64::from(name_off)).unwrap_or_default();
            const SHT_NOBITS: u32 = 8;
            if typ == SHT_NOBITS {
                continue;
            }
            match name.as_str() {
                ".dynsym" => dynsym_raw = Some(slice(data, off, size)?),
                ".dynstr" => dynstr_raw = Some(slice(data, off, size)?),
                ".rela.dyn" => rela_raw = Some(slice(data, off, size)?),
                ".ta.manifest" => {
                    manifest_note =
                        Some(String::from_utf8_lossy(slice(data, off, size)?).into_owned())
                }
                _ => {}
            }
        }
    }

    let mut needed = Vec::new();
    if let (Some((dyn_off, dyn_size)), Some(strtab)) = (dynamic_range, dynstr_raw) {
        let entsize = if is64 { 16 } else { 8 };
        let raw = slice(data, dyn_off, dyn_size)?;
        let count = raw.len() as u64 / entsize;
        for i in 0..count {
            let tag = word(raw, i * entsize, width)?;
            let val = word(raw, i * entsize + entsize / 2, width)?;
            if tag == 0 {
                break;
            }
            if tag == 1 {
                needed.push(cstr(strtab, val)?);
            }
        }
    }

    let mut symbols = Vec::new();
    if let (Some(raw), Some(strtab)) = (dynsym_raw, dynstr_raw) {
        let entsize: u64 = if is64 { 24 } else { 16 };
        let count = raw.len() as u64 / entsize;
        for i in 0..count {
            let base = i * entsize;
            let (name_off, value, size, info, shndx) = if is64 {
                (
                    u32le(raw, base)?,
                    u64le(raw, base + 8)?,
                    u64le(raw, base + 16)?,
                    slice(raw, base + 4, 1)?[0],
                    u16le(raw, base + 6)?,
                )
            } else {
                (
                    u32le(raw, base)?,
                    u64::from(u32le(raw, base + 4)?),
                    u64::from(u32le(raw, base + 8)?),
                    slice(raw, base + 12, 1)?[0],
                    u16le(raw, base + 14)?,
                )
            };
            symbols.push(ElfSymbol {
                name: cstr(strtab, u64::from(name_off))?,
                value,
                size,
                defined: shndx != 0,
                is_func: info & 0xf == 2,
            });
        }
    }

    let mut relocs = Vec::new();
    if let Some(raw) = rela_raw {
        let entsize: u64 = if is64 { 24 } else { 12 };
        let count = raw.len() as u64 / entsize;
        for i in 0..count {
            let base = i * entsize;
            let (offset, info, addend) = if is64 {
                (u64le(raw, base)?, u64le(raw, base + 8)?, u64le(raw, base + 16)? as i64)
            } else {
                (
                    u64::from(u32le(raw, base)?),
                    u64::from(u32le(raw, base + 4)?),
                    i64::from(u32le(raw, base + 8)? as i32),
                )
            };
            let (kind, sym_index) = if is64 {
                ((info & 0xffff_ffff) as u32, (info >> 32) as u32)
            } else {
                ((info & 0xff) as u32, (info >> 8) as u32)
            };
            relocs.push(ElfReloc { offset, kind, sym_index, addend });
        }
    }

    Ok(ParsedElf { width, entry, loads, stack_memsz, needed, symbols, relocs, manifest_note })
}
