//! Versioned bandit configs and parameters with compare-and-swap writes.
//!
//! Each bandit owns an append-only log `<bandit_id>.log` of framed
//! [`LogRecord`]s; the latest config and params are also held in memory as an
//! immutable [`Snapshot`] behind an atomic pointer, so readers never wait on a
//! writer. Writes to one bandit serialize through its mutex and are appended
//! (and optionally fsynced) before the snapshot swaps.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use arc_swap::ArcSwap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{Clock, Millis, SystemClock};
use crate::config::{validate_config, Algorithm, BanditConfig, Status, Violations};
use crate::framing;
use crate::policy::{PolicyError, PolicyState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamDocument {
    pub bandit_id: String,
    pub version: u64,
    pub algorithm: Algorithm,
    pub state: Arc<PolicyState>,
    pub updated_at: Millis,
    /// Highest training batch sequence number folded into `state`.
    pub train_seq: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConflictReason {
    VersionMismatch { expected: u64, actual: u64 },
    StaleTrainSeq { stored: u64, offered: u64 },
    Frozen,
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("unknown bandit {0:?}")]
    UnknownBandit(String),
    #[error("invalid config: {0}")]
    InvalidConfig(Violations),
    #[error("field {0} cannot change after creation")]
    ImmutableFieldChanged(&'static str),
    #[error("write conflict: {0:?}")]
    Conflict(ConflictReason),
    #[error("bandit {0:?} is already frozen")]
    AlreadyFrozen(String),
    #[error("initial state: {0}")]
    Policy(#[from] PolicyError),
    #[error("corrupt log for {bandit}: {reason}")]
    Corrupt { bandit: String, reason: String },
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum LogRecord {
    Config { config_version: u64, config: BanditConfig },
    Params(ParamDocument),
}

/// Latest committed config and params of one bandit.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub config: Arc<BanditConfig>,
    pub config_version: u64,
    pub params: Arc<ParamDocument>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PutOutcome {
    pub params_version: u64,
    pub config_version: u64,
    pub created: bool,
}

#[derive(Debug, Clone)]
enum Backend {
    Memory,
    Dir { root: PathBuf, fsync: bool },
}

struct Writer {
    file: Option<File>,
    records: usize,
}

struct Entry {
    snapshot: ArcSwap<Snapshot>,
    writer: Mutex<Writer>,
}

/// Records a log may hold before it is rewritten down to two.
pub const DEFAULT_COMPACT_AFTER: usize = 1024;

pub struct BanditStore {
    backend: Backend,
    clock: Arc<dyn Clock>,
    entries: ArcSwap<HashMap<String, Arc<Entry>>>,
    create: Mutex<()>,
    compact_after: usize,
}

impl std::fmt::Debug for BanditStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BanditStore")
            .field("backend", &self.backend)
            .field("bandits", &self.entries.load().len())
            .finish()
    }
}

fn log_path(root: &Path, bandit_id: &str) -> PathBuf {
    root.join(format!("{bandit_id}.log"))
}

impl BanditStore {
    pub fn in_memory() -> Self {
        Self::with_backend(Backend::Memory, Arc::new(SystemClock))
    }

    /// Opens (or creates) a directory-backed store, recovering every
    /// `<bandit_id>.log` it finds. Torn tails from an interrupted write are
    /// truncated away.
    pub fn open_dir(root: impl AsRef<Path>, fsync: bool) -> Result<Self, StoreError> {
        Self::open_dir_with_clock(root, fsync, Arc::new(SystemClock))
    }

    pub fn open_dir_with_clock(root: impl AsRef<Path>, fsync: bool, clock: Arc<dyn Clock>) -> Result<Self, StoreError> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root)?;
        let store = Self::with_backend(Backend::Dir { root: root.clone(), fsync }, clock);
        let mut map = HashMap::new();
        for dirent in fs::read_dir(&root)? {
            let path = dirent?.path();
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
            let Some(id) = name.strip_suffix(".log") else { continue };
            if id.contains('.') {
                continue;
            }
            if let Some(entry) = recover(&path, id)? {
                map.insert(id.to_string(), Arc::new(entry));
            }
        }
        store.entries.store(Arc::new(map));
        Ok(store)
    }

    fn with_backend(backend: Backend, clock: Arc<dyn Clock>) -> Self {
        Self {
            backend,
            clock,
            entries: ArcSwap::from_pointee(HashMap::new()),
            create: Mutex::new(()),
            compact_after: DEFAULT_COMPACT_AFTER,
        }
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_compact_after(mut self, records: usize) -> Self {
        self.compact_after = records.max(2);
        self
    }

    pub fn bandit_ids(&self) -> Vec<String> {
        let mut ids: Vec<_> = self.entries.load().keys().cloned().collect();
        ids.sort();
        ids
    }

    fn entry(&self, bandit_id: &str) -> Result<Arc<Entry>, StoreError> {
        self.entries
            .load()
            .get(bandit_id)
            .cloned()
            .ok_or_else(|| StoreError::UnknownBandit(bandit_id.to_string()))
    }

    pub fn snapshot(&self, bandit_id: &str) -> Result<Arc<Snapshot>, StoreError> {
        Ok(self.entry(bandit_id)?.snapshot.load_full())
    }

    pub fn get_params(&self, bandit_id: &str) -> Result<Arc<ParamDocument>, StoreError> {
        Ok(self.snapshot(bandit_id)?.params.clone())
    }

    pub fn get_config(&self, bandit_id: &str) -> Result<Arc<BanditConfig>, StoreError> {
        Ok(self.snapshot(bandit_id)?.config.clone())
    }

    /// Creates a bandit at params version 0, or updates the mutable fields of
    /// an existing one. Status is only changed through [`Self::freeze`].
    pub fn put_config(&self, config: BanditConfig) -> Result<PutOutcome, StoreError> {
        validate_config(&config).map_err(StoreError::InvalidConfig)?;
        if let Ok(entry) = self.entry(&config.bandit_id) {
            return self.update_config(&entry, config);
        }
        let _guard = self.create.lock().unwrap();
        if let Ok(entry) = self.entry(&config.bandit_id) {
            return self.update_config(&entry, config);
        }
        let state = PolicyState::initial(&config)?;
        let params = ParamDocument {
            bandit_id: config.bandit_id.clone(),
            version: 0,
            algorithm: config.algorithm,
            state: Arc::new(state),
            updated_at: self.clock.now_ms(),
            train_seq: 0,
        };
        let file = match &self.backend {
            Backend::Memory => None,
            Backend::Dir { root, fsync } => {
                // Written to a temp file first so a crash never leaves a config
                // without its initial params.
                let path = log_path(root, &config.bandit_id);
                let tmp = path.with_extension("log.tmp");
                let mut f = File::create(&tmp)?;
                let mut buf = framing::encode(&LogRecord::Config {
                    config_version: 0,
                    config: config.clone(),
                })?;
                buf.extend(framing::encode(&LogRecord::Params(params.clone()))?);
                f.write_all(&buf)?;
                if *fsync {
                    f.sync_all()?;
                }
                fs::rename(&tmp, &path)?;
                Some(OpenOptions::new().append(true).open(&path)?)
            }
        };
        let entry = Entry {
            snapshot: ArcSwap::from_pointee(Snapshot {
                config: Arc::new(config.clone()),
                config_version: 0,
                params: Arc::new(params),
            }),
            writer: Mutex::new(Writer { file, records: 2 }),
        };
        let mut map = HashMap::clone(&self.entries.load());
        map.insert(config.bandit_id.clone(), Arc::new(entry));
        self.entries.store(Arc::new(map));
        Ok(PutOutcome {
            params_version: 0,
            config_version: 0,
            created: true,
        })
    }

    fn update_config(&self, entry: &Entry, mut config: BanditConfig) -> Result<PutOutcome, StoreError> {
        let mut writer = entry.writer.lock().unwrap();
        let snap = entry.snapshot.load_full();
        let current = &snap.config;
        if current.arm_space != config.arm_space {
            return Err(StoreError::ImmutableFieldChanged("arm_space"));
        }
        if current.algorithm != config.algorithm {
            return Err(StoreError::ImmutableFieldChanged("algorithm"));
        }
        if current.context_schema != config.context_schema {
            return Err(StoreError::ImmutableFieldChanged("context_schema"));
        }
        if current.reward_spec != config.reward_spec {
            return Err(StoreError::ImmutableFieldChanged("reward_spec"));
        }
        config.status = current.status;
        if **current == config {
            return Ok(PutOutcome {
                params_version: snap.params.version,
                config_version: snap.config_version,
                created: false,
            });
        }
        let config_version = snap.config_version + 1;
        self.append(
            &mut writer,
            &config.bandit_id,
            &snap,
            &LogRecord::Config {
                config_version,
                config: config.clone(),
            },
        )?;
        entry.snapshot.store(Arc::new(Snapshot {
            config: Arc::new(config),
            config_version,
            params: snap.params.clone(),
        }));
        Ok(PutOutcome {
            params_version: snap.params.version,
            config_version,
            created: false,
        })
    }

    /// Commits `state` as version `expected_version + 1` if the stored version
    /// is still `expected_version` and `train_seq` is newer than the stored one.
    pub fn cas_put_params(
        &self,
        bandit_id: &str,
        expected_version: u64,
        state: PolicyState,
        train_seq: u64,
    ) -> Result<u64, StoreError> {
        let entry = self.entry(bandit_id)?;
        let mut writer = entry.writer.lock().unwrap();
        let snap = entry.snapshot.load_full();
        if snap.config.is_frozen() {
            return Err(StoreError::Conflict(ConflictReason::Frozen));
        }
        let stored = &snap.params;
        if stored.version != expected_version {
            return Err(StoreError::Conflict(ConflictReason::VersionMismatch {
                expected: expected_version,
                actual: stored.version,
            }));
        }
        if train_seq <= stored.train_seq {
            return Err(StoreError::Conflict(ConflictReason::StaleTrainSeq {
                stored: stored.train_seq,
                offered: train_seq,
            }));
        }
        if !state.matches(snap.config.algorithm) {
            return Err(StoreError::Policy(PolicyError::Integrity(format!(
                "{} state for a {} bandit",
                state.family(),
                snap.config.algorithm
            ))));
        }
        let params = ParamDocument {
            bandit_id: bandit_id.to_string(),
            version: expected_version + 1,
            algorithm: snap.config.algorithm,
            state: Arc::new(state),
            updated_at: self.clock.now_ms(),
            train_seq,
        };
        self.append(&mut writer, bandit_id, &snap, &LogRecord::Params(params.clone()))?;
        let version = params.version;
        entry.snapshot.store(Arc::new(Snapshot {
            config: snap.config.clone(),
            config_version: snap.config_version,
            params: Arc::new(params),
        }));
        Ok(version)
    }

    /// Flips a learning bandit to frozen; returns the new config version.
    pub fn freeze(&self, bandit_id: &str) -> Result<u64, StoreError> {
        let entry = self.entry(bandit_id)?;
        let mut writer = entry.writer.lock().unwrap();
        let snap = entry.snapshot.load_full();
        if snap.config.is_frozen() {
            return Err(StoreError::AlreadyFrozen(bandit_id.to_string()));
        }
        let mut config = BanditConfig::clone(&snap.config);
        config.status = Status::Frozen;
        let config_version = snap.config_version + 1;
        self.append(
            &mut writer,
            bandit_id,
            &snap,
            &LogRecord::Config {
                config_version,
                config: config.clone(),
            },
        )?;
        entry.snapshot.store(Arc::new(Snapshot {
            config: Arc::new(config),
            config_version,
            params: snap.params.clone(),
        }));
        Ok(config_version)
    }

    fn append(&self, writer: &mut Writer, bandit_id: &str, current: &Snapshot, record: &LogRecord) -> Result<(), StoreError> {
        let Backend::Dir { root, fsync } = &self.backend else {
            return Ok(());
        };
        if writer.records + 1 > self.compact_after {
            // Rewrite the log as (config, params) with the new record applied.
            let (config, config_version, params) = match record {
                LogRecord::Config { config_version, config } => (config.clone(), *config_version, (*current.params).clone()),
                LogRecord::Params(p) => ((*current.config).clone(), current.config_version, p.clone()),
            };
            writer.file = Some(compact_to(root, bandit_id, config_version, &config, &params, *fsync)?);
            writer.records = 2;
            return Ok(());
        }
        let file = writer.file.as_mut().expect("dir backend keeps an open log");
        file.write_all(&framing::encode(record)?)?;
        if *fsync {
            file.sync_data()?;
        }
        writer.records += 1;
        Ok(())
    }

    /// Rewrites a bandit's log down to its latest config and params.
    pub fn compact(&self, bandit_id: &str) -> Result<(), StoreError> {
        let entry = self.entry(bandit_id)?;
        let mut writer = entry.writer.lock().unwrap();
        let Backend::Dir { root, fsync } = &self.backend else {
            return Ok(());
        };
        let snap = entry.snapshot.load_full();
        writer.file = Some(compact_to(root, bandit_id, snap.config_version, &snap.config, &snap.params, *fsync)?);
        writer.records = 2;
        Ok(())
    }
}

fn compact_to(
    root: &Path,
    bandit_id: &str,
    config_version: u64,
    config: &BanditConfig,
    params: &ParamDocument,
    fsync: bool,
) -> Result<File, StoreError> {
    let path = log_path(root, bandit_id);
    let tmp = path.with_extension("log.tmp");
    let mut buf = framing::encode(&LogRecord::Config {
        config_version,
        config: config.clone(),
    })?;
    buf.extend(framing::encode(&LogRecord::Params(params.clone()))?);
    let mut f = File::create(&tmp)?;
    f.write_all(&buf)?;
    if fsync {
        f.sync_all()?;
    }
    fs::rename(&tmp, &path)?;
    Ok(OpenOptions::new().append(true).open(&path)?)
}

fn recover(path: &Path, bandit_id: &str) -> Result<Option<Entry>, StoreError> {
    let bytes = fs::read(path)?;
    let decoded: framing::Decoded<LogRecord> = framing::decode_all(&bytes);
    if decoded.torn(bytes.len()) {
        log::warn!(
            "{}: dropping {} torn bytes after offset {}",
            path.display(),
            bytes.len() - decoded.valid_len,
            decoded.valid_len
        );
        OpenOptions::new().write(true).open(path)?.set_len(decoded.valid_len as u64)?;
    }
    let mut config = None;
    let mut params = None;
    for record in &decoded.records {
        match record {
            LogRecord::Config { config_version, config: c } => config = Some((*config_version, c.clone())),
            LogRecord::Params(p) => params = Some(p.clone()),
        }
    }
    let (Some((config_version, config)), Some(params)) = (config, params) else {
        if decoded.records.is_empty() {
            return Ok(None);
        }
        return Err(StoreError::Corrupt {
            bandit: bandit_id.to_string(),
            reason: "log lacks a config or params record".into(),
        });
    };
    if config.bandit_id != bandit_id || params.bandit_id != bandit_id {
        return Err(StoreError::Corrupt {
            bandit: bandit_id.to_string(),
            reason: "record bandit_id does not match file name".into(),
        });
    }
    params
        .state
        .check_integrity(&config)
        .map_err(|e| StoreError::Corrupt {
            bandit: bandit_id.to_string(),
            reason: e.to_string(),
        })?;
    let file = OpenOptions::new().append(true).open(path)?;
    Ok(Some(Entry {
        snapshot: ArcSwap::from_pointee(Snapshot {
            config: Arc::new(config),
            config_version,
            params: Arc::new(params),
        }),
        writer: Mutex::new(Writer {
            file: Some(file),
            records: decoded.records.len(),
        }),
    }))
}
