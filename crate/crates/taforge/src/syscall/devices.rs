//! Canned device models behind the emulated kernel: per-path response
//! scripts consumed in order, a session-unique descriptor table, and the
//! `phys://` path backed by a dedicated shared-memory page.
//!
//! Script file format, consumed per device in order:
//!
//! ```text
//! device dev://crypto
//! respond deadbeef status 0
//! respond - status -22
//! ```

use std::collections::BTreeMap;

use crate::util::parse_hex_bytes;

pub const FIRST_FD: u64 = 3;
pub const PHYS_PATH: &str = "phys://";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptEntry {
    /// Optional request pattern matched against the latest write on the
    /// descriptor; `None` always matches.
    pub pattern: Option<Vec<u8>>,
    pub response: Vec<u8>,
    pub status: i64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DeviceState {
    pub script: Vec<ScriptEntry>,
    pub next_entry: usize,
    pub open_count: u64,
    pub last_write: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FdState {
    pub path: String,
    pub cursor: u64,
    pub open: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceModel {
    pub devices: BTreeMap<String, DeviceState>,
    pub fds: BTreeMap<u64, FdState>,
    pub next_fd: u64,
    /// Deterministic stream for the get_random handler; part of the
    /// snapshot-restored device state vector.
    pub rng_state: u64,
    /// Base of the shared page backing `phys://`, once allocated.
    pub phys_base: Option<u64>,
}

impl Default for DeviceModel {
    fn default() -> Self {
        DeviceModel {
            devices: BTreeMap::new(),
            fds: BTreeMap::new(),
            next_fd: FIRST_FD,
            rng_state: 0x5eed_1234_dead_beef,
            phys_base: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("bad device script: {0}")]
pub struct ScriptError(pub String);

impl DeviceModel {
    /// Parse the script text; declares devices and queues responses.
    pub fn from_script(text: &str) -> Result<DeviceModel, ScriptError> {
        let mut model = DeviceModel::default();
        let mut current: Option<String> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: &str| ScriptError(format!("line {}: {msg}", lineno + 1));
            let mut toks = line.split_whitespace();
            match toks.next().unwrap() {
                "device" => {
                    let path = toks.next().ok_or_else(|| err("device needs a path"))?;
                    model.devices.entry(path.to_string()).or_default();
                    current = Some(path.to_string());
                }
                "respond" => {
                    let path = current.clone().ok_or_else(|| err("respond before device"))?;
                    let hex = toks.next().ok_or_else(|| err("respond needs hex bytes or -"))?;
                    let response =
                        parse_hex_bytes(hex).ok_or_else(|| err("bad hex in respond"))?;
                    let kw = toks.next();
                    if kw != Some("status") {
                        return Err(err("respond needs `status <int>`"));
                    }
                    let status: i64 = toks
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| err("bad status"))?;
                    model
                        .devices
                        .get_mut(&path)
                        .unwrap()
                        .script
                        .push(ScriptEntry { pattern: None, response, status });
                }
                other => return Err(err(&format!("unknown directive `{other}`"))),
            }
        }
        Ok(model)
    }

    pub fn declare(&mut self, path: &str) -> &mut DeviceState {
        self.devices.entry(path.to_string()).or_default()
    }

    /// Known path -> fresh descriptor; unknown path -> None (the caller
    /// turns that into the profile's in-band error, no fd consumed).
    pub fn open(&mut self, path: &str) -> Option<u64> {
        if !self.devices.contains_key(path) {
            return None;
        }
        let fd = self.next_fd;
        self.next_fd += 1;
        self.devices.get_mut(path).unwrap().open_count += 1;
        self.fds.insert(fd, FdState { path: path.to_string(), cursor: 0, open: true });
        Some(fd)
    }

    pub fn close(&mut self, fd: u64) -> bool {
        match self.fds.get_mut(&fd) {
            Some(state) if state.open => {
                state.open = false;
                true
            }
            _ => false,
        }
    }

    pub fn fd(&self, fd: u64) -> Option<&FdState> {
        self.fds.get(&fd).filter(|s| s.open)
    }

    /// Consume the next script entry for the device behind `fd`, honoring
    /// an optional request pattern against the latest write.
    pub fn next_scripted(&mut self, fd: u64) -> ScriptResult {
        let Some(state) = self.fds.get(&fd).filter(|s| s.open) else {
            return ScriptResult::BadFd;
        };
        let path = state.path.clone();
        let dev = self.devices.get_mut(&path).expect("fd references a declared device");
        let Some(entry) = dev.script.get(dev.next_entry) else {
            return ScriptResult::Exhausted;
        };
        if let Some(pattern) = &entry.pattern {
            if &dev.last_write != pattern {
                return ScriptResult::PatternMiss;
            }
        }
        let entry = entry.clone();
        dev.next_entry += 1;
        ScriptResult::Entry(entry)
    }

    pub fn record_write(&mut self, fd: u64, bytes: &[u8]) -> bool {
        let Some(state) = self.fds.get(&fd).filter(|s| s.open) else {
            return false;
        };
        let path = state.path.clone();
        let dev = self.devices.get_mut(&path).expect("fd references a declared device");
        dev.last_write = bytes.to_vec();
        true
    }

    pub fn next_random(&mut self) -> u64 {
        // xorshift64*; deterministic and snapshot-friendly.
        let mut x = self.rng_state;
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        self.rng_state = x;
        x.wrapping_mul(0x2545_f491_4f6c_dd1d)
    }
}

pub enum ScriptResult {
    Entry(ScriptEntry),
    Exhausted,
    PatternMiss,
    BadFd,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_fd_is_three_and_unique() {
        let mut m = DeviceModel::default();
        m.declare("dev://crypto");
        assert_eq!(m.open("dev://crypto"), Some(3));
        assert_eq!(m.open("dev://crypto"), Some(4));
        assert_eq!(m.devices["dev://crypto"].open_count, 2);
    }

    #[test]
    fn unknown_path_consumes_no_fd() {
        let mut m = DeviceModel::default();
        m.declare("dev://crypto");
        assert_eq!(m.open("dev://missing"), None);
        assert_eq!(m.open("dev://crypto"), Some(3));
    }

    #[test]
    fn script_consumed_in_order() {
        let mut m = DeviceModel::from_script(
            "device dev://crypto\nrespond 0102 status 0\nrespond - status -22\n",
        )
        .unwrap();
        let fd = m.open("dev://crypto").unwrap();
        match m.next_scripted(fd) {
            ScriptResult::Entry(e) => {
                assert_eq!(e.response, vec![1, 2]);
                assert_eq!(e.status, 0);
            }
            _ => panic!("expected entry"),
        }
        match m.next_scripted(fd) {
            ScriptResult::Entry(e) => assert_eq!(e.status, -22),
            _ => panic!("expected entry"),
        }
        assert!(matches!(m.next_scripted(fd), ScriptResult::Exhausted));
    }

    #[test]
    fn reads_on_closed_fd_fail() {
        let mut m = DeviceModel::default();
        m.declare("dev://crypto");
        let fd = m.open("dev://crypto").unwrap();
        assert!(m.close(fd));
        assert!(matches!(m.next_scripted(fd), ScriptResult::BadFd));
        assert!(!m.close(fd));
    }

    #[test]
    fn random_stream_is_deterministic() {
        let mut a = DeviceModel::default();
        let mut b = DeviceModel::default();
        let xs: Vec<u64> = (0..4).map(|_| a.next_random()).collect();
        let ys: Vec<u64> = (0..4).map(|_| b.next_random()).collect();
        assert_eq!(xs, ys);
    }
}
