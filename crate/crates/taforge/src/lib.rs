//! taforge: rehost TrustZone trusted applications outside their TEE and
//! fuzz them with stateful, coverage-guided input generation.
//!
//! The pipeline: [`corpusgen`] emits synthetic TAs with ground-truth
//! manifests; [`loader`] maps a TA and its libraries into a modeled address
//! space; [`rewriter`] patches supervisor calls into trampoline branches;
//! [`engine`] interprets the code, emitting a branch trace and detecting
//! memory faults; [`syscall`] mimics the secure-world kernel services;
//! [`analysis`] recovers command IDs and the state-dependency model;
//! [`fuzzer`] drives snapshot-reset command sequences from coverage
//! feedback; [`tracecmp`] normalizes and compares traces across execution
//! modes.

pub mod analysis;
pub mod corpusgen;
pub mod engine;
pub mod fuzzer;
pub mod isa;
pub mod loader;
pub mod profile;
pub mod rewriter;
pub mod syscall;
pub mod tracecmp;
pub mod util;
pub mod vas;
