//! The fuzzing campaign: schedule -> mutate -> run -> update coverage,
//! bounded by iterations or wall time, with periodic checkpoints and exact
//! single-worker resumability (the RNG stream position and every piece of
//! scheduling state persist).
//!
//! Persistence layout under the output directory:
//!   corpus/<seed_id>.bin   length-prefixed serialized inputs
//!   crashes/<key>.bin      input plus fault record
//!   stats.txt              key = value lines
//!   bitmap.bin             raw 65536-byte coverage map
//!   checkpoint.json        resume state (single worker)

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::analysis::StateModel;
use crate::engine::BranchTrace;

use super::bitmap::{edge_hash, update_coverage, CoverageBitmap};
use super::crash::CrashReport;
use super::input::FuzzInput;
use super::mutate::Mutator;
use super::schedule::Scheduler;
use super::session::{SessionError, TaSession};

#[derive(Debug, thiserror::Error)]
pub enum CampaignError {
    #[error("campaign i/o failure at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CampaignError + '_ {
    move |source| CampaignError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone)]
pub struct CampaignConfig {
    pub iterations: Option<u64>,
    pub seconds: Option<u64>,
    pub seed: u64,
    pub workers: usize,
    pub out_dir: Option<PathBuf>,
    pub epsilon: f64,
    pub checkpoint_every: u64,
    /// Keep every executed input in memory (trace-fidelity replays).
    pub record_inputs: bool,
    pub reset_between_sequences: bool,
    pub use_state_model: bool,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        CampaignConfig {
            iterations: Some(10_000),
            seconds: None,
            seed: 1,
            workers: 1,
            out_dir: None,
            epsilon: 0.1,
            checkpoint_every: 1000,
            record_inputs: false,
            reset_between_sequences: true,
            use_state_model: true,
        }
    }
}

#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct CampaignStats {
    pub executions: u64,
    pub requests: u64,
    pub unique_crashes: u64,
    pub execs_per_sec: f64,
    pub requests_per_sec: f64,
    pub bitmap_occupancy: f64,
}

impl CampaignStats {
    pub fn write_text(&self) -> String {
        format!(
            "executions = {}\nexecs_per_sec = {:.2}\nunique_crashes = {}\n\
             bitmap_occupancy = {:.6}\nrequests = {}\nrequests_per_sec = {:.2}\n",
            self.executions,
            self.execs_per_sec,
            self.unique_crashes,
            self.bitmap_occupancy,
            self.requests,
            self.requests_per_sec
        )
    }

    pub fn parse_text(text: &str) -> CampaignStats {
        let mut s = CampaignStats::default();
        for (k, v) in crate::util::kv_lines(text) {
            match k.as_str() {
                "executions" => s.executions = v.parse().unwrap_or(0),
                "execs_per_sec" => s.execs_per_sec = v.parse().unwrap_or(0.0),
                "unique_crashes" => s.unique_crashes = v.parse().unwrap_or(0),
                "bitmap_occupancy" => s.bitmap_occupancy = v.parse().unwrap_or(0.0),
                "requests" => s.requests = v.parse().unwrap_or(0),
                "requests_per_sec" => s.requests_per_sec = v.parse().unwrap_or(0.0),
                _ => {}
            }
        }
        s
    }
}

pub struct CampaignResult {
    pub stats: CampaignStats,
    pub global: CoverageBitmap,
    pub corpus: Vec<FuzzInput>,
    pub crashes: Vec<CrashReport>,
    /// Every executed input, in execution order (single worker), when
    /// recording was requested.
    pub recorded: Vec<FuzzInput>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Checkpoint {
    executions: u64,
    requests: u64,
    next_seed_id: u64,
    rng_word_pos: u128,
    wild_counter: u64,
    cmd_cov: BTreeMap<u64, Vec<u16>>,
    corpus_ids: Vec<u64>,
    crash_keys: Vec<u64>,
}

/// Shared campaign state; workers merge under one lock so updates are
/// linearizable. Determinism holds for a single worker.
struct Shared {
    global: CoverageBitmap,
    corpus: Vec<FuzzInput>,
    cmd_cov: BTreeMap<u64, BTreeSet<u16>>,
    crash_keys: BTreeSet<u64>,
    crashes: Vec<CrashReport>,
    recorded: Vec<FuzzInput>,
    executions: u64,
    requests: u64,
    next_seed_id: u64,
    since_checkpoint: u64,
}

impl Shared {
    fn cov_counts(&self) -> BTreeMap<u64, usize> {
        self.cmd_cov.iter().map(|(&c, s)| (c, s.len())).collect()
    }
}

pub struct Campaign {
    pub config: CampaignConfig,
    pub model: StateModel,
    pub known_ids: Vec<u64>,
}

impl Campaign {
    /// Drive the loop with sessions supplied by `make_session` (one per
    /// worker). Aborts loudly on persistence failures.
    pub fn run<F>(&self, make_session: F) -> Result<CampaignResult, CampaignError>
    where
        F: Fn() -> Result<TaSession, SessionError> + Sync,
    {
        let dirs = self.prepare_dirs()?;
        let mut shared = Shared {
            global: CoverageBitmap::new(),
            corpus: Vec::new(),
            cmd_cov: BTreeMap::new(),
            crash_keys: BTreeSet::new(),
            crashes: Vec::new(),
            recorded: Vec::new(),
            executions: 0,
            requests: 0,
            next_seed_id: 0,
            since_checkpoint: 0,
        };
        let mut resume_rng: Option<(u128, u64)> = None;
        if let Some(dir) = &self.config.out_dir {
            if dir.join("checkpoint.json").exists() {
                resume_rng = Some(self.load_checkpoint(dir, &mut shared)?);
            }
        }

        let start = Instant::now();
        let deadline = self.config.seconds.map(|s| start + Duration::from_secs(s));
        let already = shared.executions;
        let shared = Mutex::new(shared);

        let worker_count = self.config.workers.max(1);
        // Returns the worker's final RNG stream state for the closing
        // checkpoint (meaningful for worker 0 / single-worker runs).
        let run_worker = |worker: usize| -> Result<(u128, u64), CampaignError> {
            let mut session = make_session()?;
            let mut rng = ChaCha8Rng::seed_from_u64(
                self.config.seed ^ (worker as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
            );
            let mut mutator = Mutator::new(self.known_ids.clone(), session.max_payload);
            // The baseline comparison schedules single commands only; its
            // mutator must not regrow sequences either.
            mutator.allow_sequence_ops = self.config.use_state_model;
            if worker == 0 {
                if let Some((pos, wild)) = resume_rng {
                    rng.set_word_pos(pos);
                    mutator.wild_counter = wild;
                }
            }
            let mut scheduler = Scheduler::new(self.model.clone(), self.known_ids.clone());
            scheduler.epsilon = self.config.epsilon;
            scheduler.use_state_model = self.config.use_state_model;

            let mut local = CoverageBitmap::new();
            loop {
                // Bounds check plus input construction under the lock.
                let (mut input, seed_id) = {
                    let mut s = shared.lock().unwrap();
                    if let Some(limit) = self.config.iterations {
                        if s.executions >= limit {
                            return Ok((rng.get_word_pos(), mutator.wild_counter));
                        }
                    }
                    if let Some(d) = deadline {
                        if Instant::now() >= d {
                            return Ok((rng.get_word_pos(), mutator.wild_counter));
                        }
                    }
                    // Claim the iteration now so workers never overshoot.
                    s.executions += 1;
                    let counts = s.cov_counts();
                    let scheduled = scheduler.schedule(&counts, &s.corpus, &mut rng);
                    let mutated = mutator.mutate(&scheduled, &mut rng);
                    let id = s.next_seed_id;
                    s.next_seed_id += 1;
                    (mutated, id)
                };
                debug_assert!(!input.sequence.is_empty());
                input.seed_id = seed_id;

                let outcome = session.run_case(&input, self.config.reset_between_sequences)?;

                local.clear();
                let mut s = shared.lock().unwrap();
                s.requests += outcome.statuses.len() as u64;
                let interesting = update_coverage(&outcome.trace, &mut local, &mut s.global);

                // Attribute buckets to the commands whose spans produced
                // them; scheduling later favors the least-covered commands.
                for (inv, &(lo, hi)) in input.sequence.iter().zip(&outcome.cmd_spans) {
                    let set = s.cmd_cov.entry(inv.command_id).or_default();
                    for e in &outcome.trace.events[lo..hi] {
                        set.insert(edge_hash(e.source, e.target));
                    }
                }

                if interesting {
                    s.corpus.push(input.clone());
                    if let Some(dirs) = &dirs {
                        let path = dirs.corpus.join(format!("{seed_id}.bin"));
                        std::fs::write(&path, input.to_bytes()).map_err(io_err(&path))?;
                    }
                }

                if outcome.fault.is_some() {
                    if let Some(report) = CrashReport::from_outcome(&input, &outcome) {
                        if s.crash_keys.insert(report.dedup_key) {
                            if let Some(dirs) = &dirs {
                                let path =
                                    dirs.crashes.join(format!("{:016x}.bin", report.dedup_key));
                                std::fs::write(&path, report.to_bytes())
                                    .map_err(io_err(&path))?;
                            }
                            s.crashes.push(report);
                        }
                    }
                }

                if self.config.record_inputs {
                    s.recorded.push(input);
                }

                s.since_checkpoint += 1;
                if s.since_checkpoint >= self.config.checkpoint_every {
                    s.since_checkpoint = 0;
                    if let Some(dir) = &self.config.out_dir {
                        self.persist(
                            dir,
                            &s,
                            start.elapsed(),
                            already,
                            (rng.get_word_pos(), mutator.wild_counter),
                        )?;
                    }
                }
            }
        };

        let final_rng_state = if worker_count == 1 {
            run_worker(0)?
        } else {
            std::thread::scope(|scope| -> Result<(u128, u64), CampaignError> {
                let mut handles = Vec::new();
                for w in 0..worker_count {
                    handles.push(scope.spawn(move || run_worker(w)));
                }
                let mut first = (0, 0);
                for (w, h) in handles.into_iter().enumerate() {
                    let state = h.join().expect("worker panicked")?;
                    if w == 0 {
                        first = state;
                    }
                }
                Ok(first)
            })?
        };

        let shared = shared.into_inner().unwrap();
        let elapsed = start.elapsed();
        let stats = stats_of(&shared, elapsed, already);
        if let Some(dir) = &self.config.out_dir {
            self.persist(dir, &shared, elapsed, already, final_rng_state)?;
        }
        Ok(CampaignResult {
            stats,
            global: shared.global,
            corpus: shared.corpus,
            crashes: shared.crashes,
            recorded: shared.recorded,
        })
    }

    fn prepare_dirs(&self) -> Result<Option<OutDirs>, CampaignError> {
        let Some(dir) = &self.config.out_dir else { return Ok(None) };
        let corpus = dir.join("corpus");
        let crashes = dir.join("crashes");
        std::fs::create_dir_all(&corpus).map_err(io_err(&corpus))?;
        std::fs::create_dir_all(&crashes).map_err(io_err(&crashes))?;
        Ok(Some(OutDirs { corpus, crashes }))
    }

    fn persist(
        &self,
        dir: &Path,
        shared: &Shared,
        elapsed: Duration,
        already: u64,
        rng_state: (u128, u64),
    ) -> Result<(), CampaignError> {
        let bitmap_path = dir.join("bitmap.bin");
        let mut buf = Vec::with_capacity(super::bitmap::MAP_SIZE);
        shared.global.write_to(&mut buf).expect("vec write");
        std::fs::write(&bitmap_path, &buf).map_err(io_err(&bitmap_path))?;

        let stats = stats_of(shared, elapsed, already);
        let stats_path = dir.join("stats.txt");
        std::fs::write(&stats_path, stats.write_text()).map_err(io_err(&stats_path))?;

        let checkpoint = Checkpoint {
            executions: shared.executions,
            requests: shared.requests,
            next_seed_id: shared.next_seed_id,
            rng_word_pos: rng_state.0,
            wild_counter: rng_state.1,
            cmd_cov: shared
                .cmd_cov
                .iter()
                .map(|(&c, s)| (c, s.iter().copied().collect()))
                .collect(),
            corpus_ids: shared.corpus.iter().map(|i| i.seed_id).collect(),
            crash_keys: shared.crash_keys.iter().copied().collect(),
        };
        let ck_path = dir.join("checkpoint.json");
        let json = serde_json::to_string(&checkpoint)
            .map_err(|e| CampaignError::BadCheckpoint(e.to_string()))?;
        std::fs::write(&ck_path, json).map_err(io_err(&ck_path))?;
        Ok(())
    }

    fn load_checkpoint(
        &self,
        dir: &Path,
        shared: &mut Shared,
    ) -> Result<(u128, u64), CampaignError> {
        let ck_path = dir.join("checkpoint.json");
        let json = std::fs::read_to_string(&ck_path).map_err(io_err(&ck_path))?;
        let ck: Checkpoint = serde_json::from_str(&json)
            .map_err(|e| CampaignError::BadCheckpoint(e.to_string()))?;
        let bitmap_path = dir.join("bitmap.bin");
        let bytes = std::fs::read(&bitmap_path).map_err(io_err(&bitmap_path))?;
        shared.global = CoverageBitmap::read_from(&mut bytes.as_slice())
            .map_err(|e| CampaignError::BadCheckpoint(format!("bitmap: {e}")))?;
        for id in &ck.corpus_ids {
            let path = dir.join("corpus").join(format!("{id}.bin"));
            let bytes = std::fs::read(&path).map_err(io_err(&path))?;
            let mut input = FuzzInput::from_bytes(&bytes)
                .map_err(|e| CampaignError::BadCheckpoint(format!("corpus {id}: {e}")))?;
            input.seed_id = *id;
            shared.corpus.push(input);
        }
        for key in &ck.crash_keys {
            let path = dir.join("crashes").join(format!("{key:016x}.bin"));
            if let Ok(bytes) = std::fs::read(&path) {
                if let Ok(report) = CrashReport::from_bytes(&bytes) {
                    shared.crashes.push(report);
                }
            }
            shared.crash_keys.insert(*key);
        }
        shared.cmd_cov = ck
            .cmd_cov
            .iter()
            .map(|(&c, v)| (c, v.iter().copied().collect()))
            .collect();
        shared.executions = ck.executions;
        shared.requests = ck.requests;
        shared.next_seed_id = ck.next_seed_id;
        Ok((ck.rng_word_pos, ck.wild_counter))
    }
}

struct OutDirs {
    corpus: PathBuf,
    crashes: PathBuf,
}

fn stats_of(shared: &Shared, elapsed: Duration, already: u64) -> CampaignStats {
    let secs = elapsed.as_secs_f64().max(1e-9);
    let fresh_execs = shared.executions.saturating_sub(already);
    CampaignStats {
        executions: shared.executions,
        requests: shared.requests,
        unique_crashes: shared.crash_keys.len() as u64,
        execs_per_sec: fresh_execs as f64 / secs,
        requests_per_sec: shared.requests as f64 / secs,
        bitmap_occupancy: shared.global.occupancy(),
    }
}

/// Rebuild a trace-equivalent bitmap from a set of traces; used by replay
/// comparisons.
pub fn bitmap_of_traces<'a>(traces: impl Iterator<Item = &'a BranchTrace>) -> CoverageBitmap {
    let mut map = CoverageBitmap::new();
    for t in traces {
        for e in &t.events {
            map.add_edge(e.source, e.target);
        }
    }
    map
}
