//! Stateful coverage-guided fuzzing: schedule command sequences from the
//! state model, mutate payloads, execute with snapshot-based state reset,
//! track edge coverage in a bitmap, and triage crashes into deduplicated,
//! replayable reports.

pub mod bitmap;
pub mod campaign;
pub mod crash;
pub mod input;
pub mod mutate;
pub mod schedule;
pub mod session;

pub use bitmap::{edge_hash, hit_class, update_coverage, CoverageBitmap, MAP_SIZE};
pub use campaign::{
    bitmap_of_traces, Campaign, CampaignConfig, CampaignError, CampaignResult, CampaignStats,
};
pub use crash::{dedup_key, CrashReport};
pub use input::{CommandInvocation, FuzzInput};
pub use mutate::Mutator;
pub use schedule::Scheduler;
pub use session::{CaseOutcome, SessionConfig, SessionError, SessionMode, TaSession};
