//! Synthetic TA generation: deterministic binaries in the engine's
//! instruction set for all four TZOS profiles, with ground-truth manifests
//! covering command tables, svc sites, dependencies, planted vulnerabilities
//! and CFG edge counts.

pub mod asm;
pub mod codegen;
pub mod elfout;
pub mod manifest;
pub mod spec;

pub use codegen::{generate, GeneratedTa};
pub use manifest::Manifest;
pub use spec::{plant_vulnerability, BodyPlan, CommandSpec, DispatchStyle, SpecError, TaSpec, VulnKind};
