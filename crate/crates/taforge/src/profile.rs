//! Per-TZOS ABI contracts: entry symbols, dependency policy, syscall table
//! selection, invoke-parameter conventions, plus the address-window layout
//! configuration shared with the loader.
//!
//! Profiles are loaded from a `key = value` text file or taken from the four
//! built-ins (`optee`, `teegris`, `qsee`, `trusty`).

use std::collections::BTreeSet;
use std::fmt;

use crate::isa::WordWidth;
use crate::util::{kv_lines, parse_u64, PAGE_SIZE};

/// GlobalPlatform-style status values used by generated TAs and the
/// syscall layer. BAD_PARAMETERS matches the GP constant; the invalid-command
/// value is this artifact's fixed choice.
pub const TEE_SUCCESS: u64 = 0;
pub const TEE_ERROR_BAD_PARAMETERS: u64 = 0xffff_0006;
pub const TEE_ERROR_BAD_STATE: u64 = 0xffff_0007;
pub const TEE_ERROR_INVALID_COMMAND: u64 = 0xffff_0010;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TzosName {
    Optee,
    Teegris,
    Qsee,
    Trusty,
}

impl TzosName {
    pub const ALL: [TzosName; 4] =
        [TzosName::Optee, TzosName::Teegris, TzosName::Qsee, TzosName::Trusty];

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s.to_ascii_lowercase().as_str() {
            "optee" | "op-tee" => TzosName::Optee,
            "teegris" => TzosName::Teegris,
            "qsee" => TzosName::Qsee,
            "trusty" => TzosName::Trusty,
            _ => return None,
        })
    }
}

impl fmt::Display for TzosName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TzosName::Optee => "optee",
            TzosName::Teegris => "teegris",
            TzosName::Qsee => "qsee",
            TzosName::Trusty => "trusty",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EntryRole {
    Create,
    Open,
    Init,
    Invoke,
}

impl EntryRole {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "create" => EntryRole::Create,
            "open" => EntryRole::Open,
            "init" => EntryRole::Init,
            "invoke" => EntryRole::Invoke,
            _ => return None,
        })
    }
}

impl fmt::Display for EntryRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            EntryRole::Create => "create",
            EntryRole::Open => "open",
            EntryRole::Init => "init",
            EntryRole::Invoke => "invoke",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DependencyPolicy {
    StaticOnly,
    DynamicList,
    CommonLibrary,
}

impl DependencyPolicy {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "static_only" => DependencyPolicy::StaticOnly,
            "dynamic_list" => DependencyPolicy::DynamicList,
            "common_library" => DependencyPolicy::CommonLibrary,
            _ => return None,
        })
    }
}

/// How the invoke entrypoint receives a command.
///
/// `GpRegisters` covers the GP-compliant TZOSes: the command id, packed
/// parameter-type word, request pointer/size and response pointer/size-pointer
/// all arrive in registers, with `cmd_reg` naming the command-id register
/// (OP-TEE and Teegris carry a session/op word in r0, so the command sits in
/// r1; Trusty's message handler takes it in r0). `QseeBuffer` is the 2-buffer
/// convention: registers carry (request ptr, request size, response ptr,
/// response size) and the command id is the first 8 bytes of the request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamConvention {
    GpRegisters { cmd_reg: u8 },
    QseeBuffer { cmd_offset: u64 },
}

impl fmt::Display for ParamConvention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamConvention::GpRegisters { cmd_reg } => write!(
                f,
                "registers: command id in r{cmd_reg}, then param types, request ptr, \
                 request size, response ptr, response-size ptr"
            ),
            ParamConvention::QseeBuffer { cmd_offset } => write!(
                f,
                "buffers: (request ptr, request size, response ptr, response size); \
                 command id at request+{cmd_offset:#x}"
            ),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TzosProfile {
    pub name: TzosName,
    /// Ordered (role, symbol) pairs; exactly one `invoke` role. A symbol
    /// starting with `@` is resolved from the image's metadata section
    /// instead of the symbol table (Trusty message handler).
    pub entry_symbols: Vec<(EntryRole, String)>,
    pub dependency_policy: DependencyPolicy,
    pub common_library_base: Option<u64>,
    /// Which syscall table dispatch consults.
    pub syscall_table_id: TzosName,
    pub param_convention: ParamConvention,
    /// In-band error value handlers return for unknown requests.
    pub generic_error_code: u64,
    pub word_widths: BTreeSet<WordWidth>,
}

#[derive(Debug, thiserror::Error)]
pub enum ProfileError {
    #[error("unknown profile `{0}`")]
    UnknownProfile(String),
    #[error("bad profile config: {0}")]
    BadConfig(String),
    #[error("profile invariant violated: {0}")]
    Invariant(String),
}

impl TzosProfile {
    pub fn builtin(name: TzosName) -> Self {
        let both: BTreeSet<WordWidth> = [WordWidth::W32, WordWidth::W64].into();
        let profile = match name {
            TzosName::Optee => TzosProfile {
                name,
                entry_symbols: vec![(EntryRole::Invoke, "__ta_entry".into())],
                dependency_policy: DependencyPolicy::StaticOnly,
                common_library_base: None,
                syscall_table_id: name,
                param_convention: ParamConvention::GpRegisters { cmd_reg: 1 },
                generic_error_code: TEE_ERROR_BAD_PARAMETERS,
                word_widths: both.clone(),
            },
            TzosName::Teegris => TzosProfile {
                name,
                entry_symbols: vec![
                    (EntryRole::Create, "TA_CreateEntryPoint".into()),
                    (EntryRole::Open, "TA_OpenSessionEntryPoint".into()),
                    (EntryRole::Invoke, "TA_InvokeCommandEntryPoint".into()),
                ],
                dependency_policy: DependencyPolicy::DynamicList,
                common_library_base: None,
                syscall_table_id: name,
                param_convention: ParamConvention::GpRegisters { cmd_reg: 1 },
                generic_error_code: TEE_ERROR_BAD_PARAMETERS,
                word_widths: both.clone(),
            },
            TzosName::Qsee => TzosProfile {
                name,
                entry_symbols: vec![
                    (EntryRole::Init, "tz_app_init".into()),
                    (EntryRole::Invoke, "CApp_invoke".into()),
                ],
                dependency_policy: DependencyPolicy::CommonLibrary,
                common_library_base: Some(0x0800_0000),
                syscall_table_id: name,
                param_convention: ParamConvention::QseeBuffer { cmd_offset: 0 },
                generic_error_code: TEE_ERROR_BAD_PARAMETERS,
                word_widths: both.clone(),
            },
            TzosName::Trusty => TzosProfile {
                name,
                entry_symbols: vec![(EntryRole::Invoke, "@msg_handler".into())],
                dependency_policy: DependencyPolicy::StaticOnly,
                common_library_base: None,
                syscall_table_id: name,
                param_convention: ParamConvention::GpRegisters { cmd_reg: 0 },
                generic_error_code: TEE_ERROR_BAD_PARAMETERS,
                word_widths: both,
            },
        };
        profile.validate().expect("builtin profiles are valid");
        profile
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        let invokes =
            self.entry_symbols.iter().filter(|(r, _)| *r == EntryRole::Invoke).count();
        if invokes != 1 {
            return Err(ProfileError::Invariant(format!(
                "expected exactly one invoke entry symbol, found {invokes}"
            )));
        }
        let is_common = self.dependency_policy == DependencyPolicy::CommonLibrary;
        if is_common != self.common_library_base.is_some() {
            return Err(ProfileError::Invariant(
                "common_library_base must be present exactly when policy is common_library"
                    .into(),
            ));
        }
        if self.word_widths.is_empty() {
            return Err(ProfileError::Invariant("no supported word widths".into()));
        }
        Ok(())
    }

    pub fn invoke_symbol(&self) -> &str {
        self.entry_symbols
            .iter()
            .find(|(r, _)| *r == EntryRole::Invoke)
            .map(|(_, s)| s.as_str())
            .expect("validated profile has an invoke symbol")
    }

    pub fn supports_width(&self, w: WordWidth) -> bool {
        self.word_widths.contains(&w)
    }
}

/// Address-window and stack configuration consumed by the loader.
#[derive(Debug, Clone, Copy)]
pub struct LayoutConfig {
    pub window_base: u64,
    pub window_limit: u64,
    pub default_stack: u64,
    pub page_size: u64,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        LayoutConfig {
            window_base: 0x0040_0000,
            window_limit: 0x1000_0000,
            default_stack: 1 << 20,
            page_size: PAGE_SIZE,
        }
    }
}

/// Parse the text profile config. Unknown keys are rejected so typos do not
/// silently fall back to defaults.
pub fn parse_profile_config(text: &str) -> Result<(TzosProfile, LayoutConfig), ProfileError> {
    let mut name = None;
    for (k, v) in kv_lines(text) {
        if k == "tzos" {
            name = Some(
                TzosName::parse(&v).ok_or_else(|| ProfileError::UnknownProfile(v.clone()))?,
            );
        }
    }
    let name = name.ok_or_else(|| ProfileError::BadConfig("missing `tzos` key".into()))?;
    let mut profile = TzosProfile::builtin(name);
    let mut layout = LayoutConfig::default();
    let mut entry_overrides: Vec<(EntryRole, String)> = Vec::new();

    for (k, v) in kv_lines(text) {
        match k.as_str() {
            "tzos" => {}
            "dependency_policy" => {
                profile.dependency_policy = DependencyPolicy::parse(&v)
                    .ok_or_else(|| ProfileError::BadConfig(format!("bad policy `{v}`")))?;
                if profile.dependency_policy != DependencyPolicy::CommonLibrary {
                    profile.common_library_base = None;
                }
            }
            "common_library_base" => {
                profile.common_library_base = Some(
                    parse_u64(&v)
                        .ok_or_else(|| ProfileError::BadConfig(format!("bad address `{v}`")))?,
                );
            }
            "error_code" => {
                profile.generic_error_code = parse_u64(&v)
                    .ok_or_else(|| ProfileError::BadConfig(format!("bad error code `{v}`")))?;
            }
            "word_width" => {
                let mut widths = BTreeSet::new();
                for part in v.split(',') {
                    match part.trim() {
                        "32" => widths.insert(WordWidth::W32),
                        "64" => widths.insert(WordWidth::W64),
                        other => {
                            return Err(ProfileError::BadConfig(format!(
                                "bad word width `{other}`"
                            )))
                        }
                    };
                }
                profile.word_widths = widths;
            }
            "window.base" => {
                layout.window_base = parse_u64(&v)
                    .ok_or_else(|| ProfileError::BadConfig(format!("bad address `{v}`")))?;
            }
            "window.limit" => {
                layout.window_limit = parse_u64(&v)
                    .ok_or_else(|| ProfileError::BadConfig(format!("bad address `{v}`")))?;
            }
            "stack_size" => {
                layout.default_stack = parse_u64(&v)
                    .ok_or_else(|| ProfileError::BadConfig(format!("bad size `{v}`")))?;
            }
            _ if k.starts_with("entry.") => {
                let role = EntryRole::parse(&k["entry.".len()..]).ok_or_else(|| {
                    ProfileError::BadConfig(format!("bad entry role in `{k}`"))
                })?;
                entry_overrides.push((role, v));
            }
            other => {
                return Err(ProfileError::BadConfig(format!("unknown key `{other}`")));
            }
        }
    }
    if !entry_overrides.is_empty() {
        profile.entry_symbols = entry_overrides;
    }
    profile.validate()?;
    Ok((profile, layout))
}

/// Render a profile + layout back to the config text format.
pub fn write_profile_config(profile: &TzosProfile, layout: &LayoutConfig) -> String {
    let mut out = String::new();
    out.push_str(&format!("tzos = {}\n", profile.name));
    for (role, sym) in &profile.entry_symbols {
        out.push_str(&format!("entry.{role} = {sym}\n"));
    }
    let policy = match profile.dependency_policy {
        DependencyPolicy::StaticOnly => "static_only",
        DependencyPolicy::DynamicList => "dynamic_list",
        DependencyPolicy::CommonLibrary => "common_library",
    };
    out.push_str(&format!("dependency_policy = {policy}\n"));
    if let Some(base) = profile.common_library_base {
        out.push_str(&format!("common_library_base = {base:#x}\n"));
    }
    out.push_str(&format!("error_code = {:#x}\n", profile.generic_error_code));
    let widths: Vec<&str> = profile
        .word_widths
        .iter()
        .map(|w| if *w == WordWidth::W32 { "32" } else { "64" })
        .collect();
    out.push_str(&format!("word_width = {}\n", widths.join(",")));
    out.push_str(&format!("window.base = {:#x}\n", layout.window_base));
    out.push_str(&format!("window.limit = {:#x}\n", layout.window_limit));
    out.push_str(&format!("stack_size = {}\n", layout.default_stack));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_validate() {
        for name in TzosName::ALL {
            TzosProfile::builtin(name).validate().unwrap();
        }
    }

    #[test]
    fn qsee_is_common_library() {
        let p = TzosProfile::builtin(TzosName::Qsee);
        assert_eq!(p.dependency_policy, DependencyPolicy::CommonLibrary);
        assert!(p.common_library_base.is_some());
    }

    #[test]
    fn config_roundtrip() {
        let p = TzosProfile::builtin(TzosName::Teegris);
        let l = LayoutConfig::default();
        let text = write_profile_config(&p, &l);
        let (p2, l2) = parse_profile_config(&text).unwrap();
        assert_eq!(p2.name, TzosName::Teegris);
        assert_eq!(p2.entry_symbols, p.entry_symbols);
        assert_eq!(l2.window_base, l.window_base);
        assert_eq!(l2.default_stack, l.default_stack);
    }

    #[test]
    fn paper_example_window_is_configurable() {
        let text = "tzos = optee\nwindow.base = 0xff001000\nwindow.limit = 0xff022000\n";
        let (_, layout) = parse_profile_config(text).unwrap();
        assert_eq!(layout.window_base, 0xff00_1000);
        assert_eq!(layout.window_limit, 0xff02_2000);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(parse_profile_config("tzos = optee\nbogus = 1\n").is_err());
    }

    #[test]
    fn common_library_invariant() {
        let mut p = TzosProfile::builtin(TzosName::Qsee);
        p.common_library_base = None;
        assert!(p.validate().is_err());
    }
}
