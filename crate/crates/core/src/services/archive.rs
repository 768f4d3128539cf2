//! Shot-data archive keyed by `(shot_id, source)` with CRC-32 verification.
//!
//! Disk layout under the root directory:
//! `archive/<shot_id>/<source>.bin` holds the payload and `archive/index.log`
//! holds one line per store: `shot_id \t source \t crc \t len \t stored_at_ns`.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::bus::is_valid_name;
use crate::clock::{SimClock, SimTime};
use crate::wire::{self, ErrorKind};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchiveRecord {
    pub shot_id: String,
    pub source: String,
    #[serde(with = "wire::b64")]
    pub payload: Vec<u8>,
    pub checksum: u32,
    pub stored_at: SimTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FetchStatus {
    Verified,
    ChecksumMismatch { expected: u32, actual: u32 },
    Missing,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FetchedRecord {
    pub record: ArchiveRecord,
    pub status: FetchStatus,
}

impl FetchedRecord {
    pub fn verified(&self) -> bool {
        self.status == FetchStatus::Verified
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum ArchiveError {
    /// Key is `shot_id/source`.
    #[error("empty payload for {0}")]
    EmptyPayload(String),
    #[error("record {0} already stored")]
    DuplicateRecord(String),
    #[error("malformed archive key {0:?}")]
    MalformedKey(String),
    #[error("storage failure: {0}")]
    StorageFailure(String),
}

impl ErrorKind for ArchiveError {
    fn kind(&self) -> &'static str {
        match self {
            ArchiveError::EmptyPayload(_) => "EmptyPayload",
            ArchiveError::DuplicateRecord(_) => "DuplicateRecord",
            ArchiveError::MalformedKey(_) => "MalformedKey",
            ArchiveError::StorageFailure(_) => "StorageFailure",
        }
    }
}

pub fn crc32(bytes: &[u8]) -> u32 {
    crc32fast::hash(bytes)
}

#[derive(Debug, Clone)]
struct Meta {
    checksum: u32,
    stored_at: SimTime,
}

enum Backend {
    Memory(BTreeMap<(String, String), Vec<u8>>),
    Disk { root: PathBuf, index: fs::File },
}

struct State {
    backend: Backend,
    index: BTreeMap<String, BTreeMap<String, Meta>>,
    fail_writes: bool,
}

pub struct Archive {
    clock: SimClock,
    state: Mutex<State>,
}

fn valid_key(s: &str) -> bool {
    is_valid_name(s) && s.split('/').all(|seg| seg != "." && seg != "..")
}

impl Archive {
    pub fn in_memory(clock: SimClock) -> Self {
        Archive {
            clock,
            state: Mutex::new(State {
                backend: Backend::Memory(BTreeMap::new()),
                index: BTreeMap::new(),
                fail_writes: false,
            }),
        }
    }

    /// Opens or creates an archive rooted at `dir`, replaying `index.log`.
    /// A torn final index line is truncated away.
    pub fn open(clock: SimClock, dir: impl AsRef<Path>) -> io::Result<Self> {
        let root = dir.as_ref().join("archive");
        fs::create_dir_all(&root)?;
        let index_path = root.join("index.log");
        let file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(&index_path)?;
        let len = file.metadata()?.len();
        let mut index: BTreeMap<String, BTreeMap<String, Meta>> = BTreeMap::new();
        let mut complete = 0u64;
        let mut reader = BufReader::new(&file);
        let mut line = String::new();
        loop {
            line.clear();
            let n = reader.read_line(&mut line)?;
            if n == 0 || !line.ends_with('\n') {
                break;
            }
            let f: Vec<&str> = line.trim_end_matches('\n').split('\t').collect();
            let parsed = match f.as_slice() {
                [shot, src, crc, _len, at] => crc
                    .parse::<u32>()
                    .ok()
                    .zip(at.parse::<u64>().ok())
                    .map(|(c, a)| (shot.to_string(), src.to_string(), c, a)),
                _ => None,
            };
            let Some((shot, src, checksum, at)) = parsed else { break };
            index.entry(shot).or_default().insert(
                src,
                Meta {
                    checksum,
                    stored_at: SimTime(at),
                },
            );
            complete += n as u64;
        }
        drop(reader);
        if complete < len {
            file.set_len(complete)?;
        }
        Ok(Archive {
            clock,
            state: Mutex::new(State {
                backend: Backend::Disk { root, index: file },
                index,
                fail_writes: false,
            }),
        })
    }

    /// Path of the payload blob for a disk archive.
    pub fn blob_path(&self, shot_id: &str, source: &str) -> Option<PathBuf> {
        match &self.state.lock().backend {
            Backend::Disk { root, .. } => Some(root.join(shot_id).join(format!("{source}.bin"))),
            Backend::Memory(_) => None,
        }
    }

    /// Makes subsequent stores fail with `StorageFailure`.
    pub fn set_fail_writes(&self, fail: bool) {
        self.state.lock().fail_writes = fail;
    }

    /// Overwrites stored payload bytes without touching the index, to model
    /// media corruption in a memory archive.
    pub fn tamper(&self, shot_id: &str, source: &str, payload: Vec<u8>) -> bool {
        let mut st = self.state.lock();
        match &mut st.backend {
            Backend::Memory(m) => match m.get_mut(&(shot_id.to_string(), source.to_string())) {
                Some(p) => {
                    *p = payload;
                    true
                }
                None => false,
            },
            Backend::Disk { root, .. } => {
                fs::write(root.join(shot_id).join(format!("{source}.bin")), payload).is_ok()
            }
        }
    }

    pub fn store(&self, shot_id: &str, source: &str, payload: &[u8], overwrite: bool) -> Result<ArchiveRecord, ArchiveError> {
        for k in [shot_id, source] {
            if !valid_key(k) {
                return Err(ArchiveError::MalformedKey(k.to_string()));
            }
        }
        if shot_id.contains('/') {
            return Err(ArchiveError::MalformedKey(shot_id.to_string()));
        }
        if payload.is_empty() {
            return Err(ArchiveError::EmptyPayload(format!("{shot_id}/{source}")));
        }
        let now = self.clock.now();
        let checksum = crc32(payload);
        let mut st = self.state.lock();
        if st.fail_writes {
            return Err(ArchiveError::StorageFailure("writes disabled".into()));
        }
        let exists = st.index.get(shot_id).is_some_and(|m| m.contains_key(source));
        if exists && !overwrite {
            return Err(ArchiveError::DuplicateRecord(format!("{shot_id}/{source}")));
        }
        let storage = |e: io::Error| ArchiveError::StorageFailure(e.to_string());
        match &mut st.backend {
            Backend::Memory(m) => {
                m.insert((shot_id.to_string(), source.to_string()), payload.to_vec());
            }
            Backend::Disk { root, index } => {
                let path = root.join(shot_id).join(format!("{source}.bin"));
                fs::create_dir_all(path.parent().unwrap()).map_err(storage)?;
                let tmp = path.with_extension("bin.tmp");
                fs::write(&tmp, payload).map_err(storage)?;
                fs::rename(&tmp, &path).map_err(storage)?;
                let line = format!("{shot_id}\t{source}\t{checksum}\t{}\t{}\n", payload.len(), now.0);
                index
                    .write_all(line.as_bytes())
                    .and_then(|_| index.flush())
                    .map_err(storage)?;
            }
        }
        st.index.entry(shot_id.to_string()).or_default().insert(
            source.to_string(),
            Meta {
                checksum,
                stored_at: now,
            },
        );
        Ok(ArchiveRecord {
            shot_id: shot_id.to_string(),
            source: source.to_string(),
            payload: payload.to_vec(),
            checksum,
            stored_at: now,
        })
    }

    /// Every record of `shot_id`, ordered by source. Unknown shots give an
    /// empty list; corrupt records are returned with their mismatch flagged.
    pub fn fetch(&self, shot_id: &str) -> Vec<FetchedRecord> {
        let st = self.state.lock();
        let Some(entries) = st.index.get(shot_id) else {
            return Vec::new();
        };
        entries
            .iter()
            .map(|(source, meta)| {
                let bytes = match &st.backend {
                    Backend::Memory(m) => m.get(&(shot_id.to_string(), source.clone())).cloned(),
                    Backend::Disk { root, .. } => fs::read(root.join(shot_id).join(format!("{source}.bin"))).ok(),
                };
                let (payload, status) = match bytes {
                    None => (Vec::new(), FetchStatus::Missing),
                    Some(p) => {
                        let actual = crc32(&p);
                        let status = if actual == meta.checksum {
                            FetchStatus::Verified
                        } else {
                            FetchStatus::ChecksumMismatch {
                                expected: meta.checksum,
                                actual,
                            }
                        };
                        (p, status)
                    }
                };
                FetchedRecord {
                    record: ArchiveRecord {
                        shot_id: shot_id.to_string(),
                        source: source.clone(),
                        payload,
                        checksum: meta.checksum,
                        stored_at: meta.stored_at,
                    },
                    status,
                }
            })
            .collect()
    }

    pub fn sources(&self, shot_id: &str) -> Vec<String> {
        self.state
            .lock()
            .index
            .get(shot_id)
            .map(|m| m.keys().cloned().collect())
            .unwrap_or_default()
    }

    pub fn shots(&self) -> Vec<String> {
        self.state.lock().index.keys().cloned().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn crc_known_value() {
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
    }

    #[test]
    fn round_trip_and_duplicates() {
        let a = Archive::in_memory(SimClock::new_virtual());
        a.store("shot1", "pt/beam01/dig0", b"wave", false).unwrap();
        let got = a.fetch("shot1");
        assert_eq!(got.len(), 1);
        assert!(got[0].verified());
        assert_eq!(got[0].record.payload, b"wave");
        assert!(matches!(
            a.store("shot1", "pt/beam01/dig0", b"x", false),
            Err(ArchiveError::DuplicateRecord(_))
        ));
        a.store("shot1", "pt/beam01/dig0", b"x", true).unwrap();
        assert_eq!(a.fetch("shot1")[0].record.payload, b"x");
        assert!(a.fetch("nope").is_empty());
    }

    #[test]
    fn rejects_empty_and_traversal() {
        let a = Archive::in_memory(SimClock::new_virtual());
        assert!(matches!(a.store("s", "x", b"", false), Err(ArchiveError::EmptyPayload(_))));
        assert!(matches!(a.store("s", "../x", b"1", false), Err(ArchiveError::MalformedKey(_))));
        assert!(matches!(a.store("a/b", "x", b"1", false), Err(ArchiveError::MalformedKey(_))));
    }

    #[test]
    fn disk_corruption_detected() {
        let dir = tempfile::tempdir().unwrap();
        let a = Archive::open(SimClock::new_virtual(), dir.path()).unwrap();
        a.store("s7", "sup/laser_diag", b"bundle-bytes", false).unwrap();
        a.store("s7", "pt/beam01/cal", b"energy", false).unwrap();
        let p = a.blob_path("s7", "sup/laser_diag").unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes[0] ^= 0xff;
        fs::write(&p, bytes).unwrap();
        let got = a.fetch("s7");
        assert_eq!(got.len(), 2);
        let bad = got.iter().find(|r| r.record.source == "sup/laser_diag").unwrap();
        assert!(matches!(bad.status, FetchStatus::ChecksumMismatch { .. }));
        assert!(got.iter().find(|r| r.record.source == "pt/beam01/cal").unwrap().verified());
    }

    #[test]
    fn disk_reopen_recovers_index() {
        let dir = tempfile::tempdir().unwrap();
        {
            let a = Archive::open(SimClock::new_virtual(), dir.path()).unwrap();
            a.store("s1", "a", b"1", false).unwrap();
            a.store("s1", "b", b"22", false).unwrap();
        }
        let idx = dir.path().join("archive/index.log");
        let mut f = OpenOptions::new().append(true).open(&idx).unwrap();
        f.write_all(b"s1\tc\t12").unwrap();
        drop(f);
        let a = Archive::open(SimClock::new_virtual(), dir.path()).unwrap();
        assert_eq!(a.sources("s1"), vec!["a", "b"]);
        assert!(a.fetch("s1").iter().all(|r| r.verified()));
    }

    #[test]
    fn storage_failure_injected() {
        let a = Archive::in_memory(SimClock::new_virtual());
        a.set_fail_writes(true);
        assert!(matches!(a.store("s", "x", b"1", false), Err(ArchiveError::StorageFailure(_))));
        assert!(a.fetch("s").is_empty());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn fetch_returns_exactly_the_stored_set(sources in proptest::collection::btree_set("[a-z]{1,6}(/[a-z0-9]{1,4})?", 0..20)) {
                let a = Archive::in_memory(SimClock::new_virtual());
                for s in &sources {
                    a.store("shot", s, s.as_bytes(), false).unwrap();
                }
                let got: BTreeSet<String> = a.fetch("shot").into_iter().map(|r| {
                    assert!(r.verified());
                    r.record.source
                }).collect();
                prop_assert_eq!(got, sources);
            }
        }
    }
}
