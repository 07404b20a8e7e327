//! Clickstream logs, reward attribution and batching.
//!
//! Impressions and rewards land in two append-only logs per bandit. A
//! [`Collector`] reads them in a fixed merge order (timestamp, impressions
//! before rewards, offset), joins rewards to impressions by `request_id`
//! inside the attribution window, and groups finished examples into
//! [`TrainingBatch`]es. Expiry is driven by event time only, so the same log
//! contents always produce the same batches; [`replay`] relies on that.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Millis;
use crate::config::{Algorithm, BanditConfig, RewardSpec};
use crate::context::encoded_dim;
use crate::events::{ArmChoice, ImpressionEvent, RewardEvent, TrainingBatch, TrainingExample};
use crate::framing;
use crate::policy::ArmCatalog;
use crate::store::{BanditStore, StoreError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("unknown bandit {0:?}")]
    UnknownBandit(String),
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Store(StoreError),
}

fn violation(msg: impl Into<String>) -> PipelineError {
    PipelineError::SchemaViolation(msg.into())
}

// ── Event log ───────────────────────────────────────────────────────────

struct LogFiles {
    impressions: File,
    rewards: File,
    fsync: bool,
}

#[derive(Default)]
struct LogInner {
    impressions: Vec<ImpressionEvent>,
    rewards: Vec<RewardEvent>,
    request_ids: HashSet<String>,
    /// Events appended from now on are stamped after this time.
    sealed_until: Option<Millis>,
}

/// The impression and reward logs of one bandit.
pub struct EventLog {
    config: Arc<BanditConfig>,
    catalog: ArmCatalog,
    context_dim: usize,
    inner: Mutex<LogInner>,
    files: Option<Mutex<LogFiles>>,
}

pub fn impressions_path(root: &Path, bandit_id: &str) -> PathBuf {
    root.join(format!("{bandit_id}.impressions.log"))
}

pub fn rewards_path(root: &Path, bandit_id: &str) -> PathBuf {
    root.join(format!("{bandit_id}.rewards.log"))
}

pub fn batches_path(root: &Path, bandit_id: &str) -> PathBuf {
    root.join(format!("{bandit_id}.batches.log"))
}

fn read_framed<T: serde::de::DeserializeOwned>(path: &Path) -> io::Result<Vec<T>> {
    match fs::read(path) {
        Ok(bytes) => {
            let d = framing::decode_all(&bytes);
            if d.torn(bytes.len()) {
                log::warn!("{}: ignoring torn tail at offset {}", path.display(), d.valid_len);
                OpenOptions::new().write(true).open(path)?.set_len(d.valid_len as u64)?;
            }
            Ok(d.records)
        }
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(e),
    }
}

fn open_append(path: &Path) -> io::Result<File> {
    OpenOptions::new().create(true).append(true).open(path)
}

/// Reads a bandit's event logs from a directory.
pub fn read_event_logs(root: &Path, bandit_id: &str) -> io::Result<(Vec<ImpressionEvent>, Vec<RewardEvent>)> {
    Ok((
        read_framed(&impressions_path(root, bandit_id))?,
        read_framed(&rewards_path(root, bandit_id))?,
    ))
}

impl EventLog {
    pub fn in_memory(config: Arc<BanditConfig>) -> Self {
        Self {
            catalog: ArmCatalog::new(&config.arm_space),
            context_dim: encoded_dim(&config.context_schema),
            config,
            inner: Mutex::new(LogInner::default()),
            files: None,
        }
    }

    /// Opens the logs under `root`, loading whatever is already there.
    pub fn open_dir(config: Arc<BanditConfig>, root: &Path, fsync: bool) -> Result<Self, PipelineError> {
        fs::create_dir_all(root)?;
        let id = &config.bandit_id;
        let (impressions, rewards) = read_event_logs(root, id)?;
        let mut log = Self::in_memory(config.clone());
        {
            let inner = log.inner.get_mut().unwrap();
            inner.request_ids = impressions.iter().map(|i| i.request_id.clone()).collect();
            inner.impressions = impressions;
            inner.rewards = rewards;
        }
        log.files = Some(Mutex::new(LogFiles {
            impressions: open_append(&impressions_path(root, id))?,
            rewards: open_append(&rewards_path(root, id))?,
            fsync,
        }));
        Ok(log)
    }

    pub fn config(&self) -> &Arc<BanditConfig> {
        &self.config
    }

    pub fn bandit_id(&self) -> &str {
        &self.config.bandit_id
    }

    fn check_arms(&self, arm: &ArmChoice) -> Result<(), PipelineError> {
        let cascade = self.config.algorithm == Algorithm::CascadeTs;
        match (arm, cascade) {
            (ArmChoice::Single(_), true) => return Err(violation("cascade impressions carry a ranking")),
            (ArmChoice::Ranking(_), false) => return Err(violation("only cascade impressions carry a ranking")),
            _ => {}
        }
        if let ArmChoice::Ranking(r) = arm {
            if r.is_empty() {
                return Err(violation("empty ranking"));
            }
            let distinct: HashSet<_> = r.iter().collect();
            if distinct.len() != r.len() {
                return Err(violation("ranking repeats an item"));
            }
        }
        for id in arm.ids() {
            if !self.catalog.contains(id) {
                return Err(violation(format!("unknown arm {id:?}")));
            }
        }
        Ok(())
    }

    pub fn validate_impression(&self, ev: &ImpressionEvent) -> Result<(), PipelineError> {
        if ev.bandit_id != self.config.bandit_id {
            return Err(violation("bandit_id does not match the log"));
        }
        self.check_arms(&ev.arm)?;
        if ev.context.len() != self.context_dim {
            return Err(violation(format!(
                "context has {} entries, schema encodes {}",
                ev.context.len(),
                self.context_dim
            )));
        }
        if ev.context.iter().any(|v| !v.is_finite()) {
            return Err(violation("non-finite context"));
        }
        if let Some(p) = ev.propensity {
            if !(p > 0.0 && p <= 1.0) {
                return Err(violation(format!("propensity {p} outside (0, 1]")));
            }
        }
        Ok(())
    }

    pub fn validate_reward(&self, ev: &RewardEvent) -> Result<(), PipelineError> {
        if ev.bandit_id != self.config.bandit_id {
            return Err(violation("bandit_id does not match the log"));
        }
        let k = self.config.reward_spec.len();
        if ev.values.len() != k {
            return Err(violation(format!("{} reward values, spec has {k}", ev.values.len())));
        }
        if ev.values.iter().any(|v| !v.is_finite()) {
            return Err(violation("non-finite reward"));
        }
        if self.config.reward_spec == RewardSpec::Binary && ev.values.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(violation(format!("reward {:?} on a Binary bandit", ev.values)));
        }
        let cascade = self.config.algorithm == Algorithm::CascadeTs;
        match (cascade, ev.click_position) {
            (false, Some(_)) => return Err(violation("click_position on a non-ranking bandit")),
            (true, Some(p)) if p >= self.config.hyperparameters.ranking_k => {
                return Err(violation(format!("click_position {p} beyond ranking length")))
            }
            (true, None) if ev.values[0] == 1.0 => return Err(violation("ranking click without position")),
            _ => {}
        }
        Ok(())
    }

    fn stamp(inner: &LogInner, ts: Millis, last: Option<Millis>) -> Millis {
        let mut ts = ts.max(last.unwrap_or(0));
        if let Some(sealed) = inner.sealed_until {
            ts = ts.max(sealed + 1);
        }
        ts
    }

    /// Appends an impression and returns its offset. The timestamp is raised
    /// if needed to keep the log nondecreasing.
    pub fn append_impression(&self, mut ev: ImpressionEvent) -> Result<u64, PipelineError> {
        self.validate_impression(&ev)?;
        let mut inner = self.inner.lock().unwrap();
        if inner.request_ids.contains(&ev.request_id) {
            return Err(violation(format!("duplicate request_id {:?}", ev.request_id)));
        }
        ev.timestamp = Self::stamp(&inner, ev.timestamp, inner.impressions.last().map(|e| e.timestamp));
        if let Some(files) = &self.files {
            let mut f = files.lock().unwrap();
            let fsync = f.fsync;
            f.impressions.write_all(&framing::encode(&ev)?)?;
            if fsync {
                f.impressions.sync_data()?;
            }
        }
        inner.request_ids.insert(ev.request_id.clone());
        inner.impressions.push(ev);
        Ok(inner.impressions.len() as u64 - 1)
    }

    pub fn append_reward(&self, mut ev: RewardEvent) -> Result<u64, PipelineError> {
        self.validate_reward(&ev)?;
        let mut inner = self.inner.lock().unwrap();
        ev.timestamp = Self::stamp(&inner, ev.timestamp, inner.rewards.last().map(|e| e.timestamp));
        if let Some(files) = &self.files {
            let mut f = files.lock().unwrap();
            let fsync = f.fsync;
            f.rewards.write_all(&framing::encode(&ev)?)?;
            if fsync {
                f.rewards.sync_data()?;
            }
        }
        inner.rewards.push(ev);
        Ok(inner.rewards.len() as u64 - 1)
    }

    pub fn len(&self) -> (usize, usize) {
        let inner = self.inner.lock().unwrap();
        (inner.impressions.len(), inner.rewards.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == (0, 0)
    }

    pub fn snapshot(&self) -> (Vec<ImpressionEvent>, Vec<RewardEvent>) {
        let inner = self.inner.lock().unwrap();
        (inner.impressions.clone(), inner.rewards.clone())
    }

    /// Seals everything up to `cutoff` and returns the unread events at or
    /// before it, starting at the given offsets.
    fn take_until(&self, from: (usize, usize), cutoff: Millis) -> (Vec<ImpressionEvent>, Vec<RewardEvent>) {
        let mut inner = self.inner.lock().unwrap();
        inner.sealed_until = Some(inner.sealed_until.map_or(cutoff, |s| s.max(cutoff)));
        let imps = inner.impressions[from.0..]
            .iter()
            .take_while(|e| e.timestamp <= cutoff)
            .cloned()
            .collect();
        let rews = inner.rewards[from.1..]
            .iter()
            .take_while(|e| e.timestamp <= cutoff)
            .cloned()
            .collect();
        (imps, rews)
    }
}

/// Event logs for every bandit in a store, opened on first use.
pub struct EventLogs {
    store: Arc<BanditStore>,
    root: Option<PathBuf>,
    fsync: bool,
    logs: RwLock<HashMap<String, Arc<EventLog>>>,
}

impl EventLogs {
    pub fn in_memory(store: Arc<BanditStore>) -> Self {
        Self {
            store,
            root: None,
            fsync: false,
            logs: RwLock::new(HashMap::new()),
        }
    }

    pub fn in_dir(store: Arc<BanditStore>, root: impl Into<PathBuf>, fsync: bool) -> Self {
        Self {
            store,
            root: Some(root.into()),
            fsync,
            logs: RwLock::new(HashMap::new()),
        }
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub fn get(&self, bandit_id: &str) -> Result<Arc<EventLog>, PipelineError> {
        if let Some(log) = self.logs.read().unwrap().get(bandit_id) {
            return Ok(log.clone());
        }
        let config = self.store.get_config(bandit_id).map_err(|e| match e {
            StoreError::UnknownBandit(id) => PipelineError::UnknownBandit(id),
            other => PipelineError::Store(other),
        })?;
        let mut logs = self.logs.write().unwrap();
        if let Some(log) = logs.get(bandit_id) {
            return Ok(log.clone());
        }
        let log = Arc::new(match &self.root {
            Some(root) => EventLog::open_dir(config, root, self.fsync)?,
            None => EventLog::in_memory(config),
        });
        logs.insert(bandit_id.to_string(), log.clone());
        Ok(log)
    }

    pub fn append_impression(&self, ev: ImpressionEvent) -> Result<u64, PipelineError> {
        self.get(&ev.bandit_id)?.append_impression(ev)
    }

    pub fn append_reward(&self, ev: RewardEvent) -> Result<u64, PipelineError> {
        self.get(&ev.bandit_id)?.append_reward(ev)
    }
}

// ── Join ────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct JoinCounters {
    pub impressions: u64,
    pub matched: u64,
    pub defaulted: u64,
    /// Continuous and multi-objective impressions that expired without reward.
    pub dropped: u64,
    pub late_rewards: u64,
}

impl JoinCounters {
    pub fn examples(&self) -> u64 {
        self.matched + self.defaulted
    }
}

#[derive(Debug, Clone)]
struct Pending {
    impression: ImpressionEvent,
    reward: Option<Vec<f64>>,
    click_position: Option<usize>,
}

/// One merged-log event, in processing order.
#[derive(Debug, Clone)]
pub enum LogEvent {
    Impression(ImpressionEvent),
    Reward(RewardEvent),
}

impl LogEvent {
    pub fn timestamp(&self) -> Millis {
        match self {
            LogEvent::Impression(e) => e.timestamp,
            LogEvent::Reward(e) => e.timestamp,
        }
    }
}

/// Merges the two logs by (timestamp, impressions first, offset).
pub fn merge(impressions: Vec<ImpressionEvent>, rewards: Vec<RewardEvent>) -> Vec<LogEvent> {
    let mut out = Vec::with_capacity(impressions.len() + rewards.len());
    let mut imps = impressions.into_iter().peekable();
    let mut rews = rewards.into_iter().peekable();
    loop {
        let take_impression = match (imps.peek(), rews.peek()) {
            (Some(i), Some(r)) => i.timestamp <= r.timestamp,
            (Some(_), None) => true,
            (None, Some(_)) => false,
            (None, None) => break,
        };
        if take_impression {
            out.push(LogEvent::Impression(imps.next().unwrap()));
        } else {
            out.push(LogEvent::Reward(rews.next().unwrap()));
        }
    }
    out
}

/// A finished training example with its impression time.
#[derive(Debug, Clone, PartialEq)]
pub struct Attributed {
    pub example: TrainingExample,
    pub impression_ts: Millis,
}

/// Windowed reward attribution over a merged event stream.
#[derive(Debug, Clone)]
pub struct Joiner {
    window: Millis,
    spec: RewardSpec,
    ranking: bool,
    pending: HashMap<String, Pending>,
    order: VecDeque<String>,
    watermark: Millis,
    counters: JoinCounters,
}

impl Joiner {
    pub fn new(config: &BanditConfig) -> Self {
        Self {
            window: config.window_ms(),
            spec: config.reward_spec.clone(),
            ranking: config.algorithm == Algorithm::CascadeTs,
            pending: HashMap::new(),
            order: VecDeque::new(),
            watermark: 0,
            counters: JoinCounters::default(),
        }
    }

    pub fn counters(&self) -> JoinCounters {
        self.counters
    }

    pub fn watermark(&self) -> Millis {
        self.watermark
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    /// Binary successes and ranking clicks cannot change any more.
    fn settled(spec: &RewardSpec, ranking: bool, p: &Pending) -> bool {
        match (&p.reward, ranking) {
            (Some(_), true) => p.click_position.is_some(),
            (Some(r), false) => *spec == RewardSpec::Binary && r[0] == 1.0,
            (None, _) => false,
        }
    }

    fn finalize(&mut self, p: Pending, out: &mut Vec<Attributed>) {
        let reward = match p.reward {
            Some(r) => {
                self.counters.matched += 1;
                Some((r, false))
            }
            None => match self.spec {
                RewardSpec::Binary => {
                    self.counters.defaulted += 1;
                    Some((vec![0.0], true))
                }
                _ => {
                    self.counters.dropped += 1;
                    None
                }
            },
        };
        if let Some((reward, defaulted)) = reward {
            let imp = p.impression;
            out.push(Attributed {
                impression_ts: imp.timestamp,
                example: TrainingExample {
                    request_id: imp.request_id,
                    context: imp.context,
                    arm: imp.arm,
                    reward,
                    click_position: p.click_position,
                    propensity: imp.propensity,
                    defaulted,
                },
            });
        }
    }

    /// Advances event time and finalizes impressions whose window has passed.
    pub fn advance(&mut self, ts: Millis, out: &mut Vec<Attributed>) {
        self.watermark = self.watermark.max(ts);
        while let Some(id) = self.order.front() {
            let Some(p) = self.pending.get(id) else {
                // settled early
                self.order.pop_front();
                continue;
            };
            if self.watermark <= p.impression.timestamp + self.window {
                break;
            }
            let id = self.order.pop_front().unwrap();
            let p = self.pending.remove(&id).unwrap();
            self.finalize(p, out);
        }
    }

    pub fn push(&mut self, event: LogEvent, out: &mut Vec<Attributed>) {
        self.advance(event.timestamp(), out);
        match event {
            LogEvent::Impression(imp) => {
                self.counters.impressions += 1;
                self.order.push_back(imp.request_id.clone());
                self.pending.insert(
                    imp.request_id.clone(),
                    Pending {
                        impression: imp,
                        reward: None,
                        click_position: None,
                    },
                );
            }
            LogEvent::Reward(rew) => {
                let Some(p) = self.pending.get_mut(&rew.request_id) else {
                    self.counters.late_rewards += 1;
                    return;
                };
                match &mut p.reward {
                    None => {
                        p.reward = Some(rew.values);
                        p.click_position = rew.click_position;
                    }
                    Some(acc) => {
                        if self.ranking {
                            // first recorded click stands
                            if p.click_position.is_none() {
                                *acc = rew.values;
                                p.click_position = rew.click_position;
                            }
                        } else if self.spec == RewardSpec::Binary {
                            acc[0] = acc[0].max(rew.values[0]);
                        } else {
                            for (a, v) in acc.iter_mut().zip(&rew.values) {
                                *a += v;
                            }
                        }
                    }
                }
                if Self::settled(&self.spec, self.ranking, p) {
                    let p = self.pending.remove(&rew.request_id).unwrap();
                    self.finalize(p, out);
                }
            }
        }
    }

    /// Finalizes everything still pending, in impression order.
    pub fn finish(&mut self, out: &mut Vec<Attributed>) {
        while let Some(id) = self.order.pop_front() {
            if let Some(p) = self.pending.remove(&id) {
                self.finalize(p, out);
            }
        }
    }
}

/// Joins two whole logs; returns finished examples and the counters.
pub fn join_window(
    config: &BanditConfig,
    impressions: Vec<ImpressionEvent>,
    rewards: Vec<RewardEvent>,
    finish: bool,
) -> (Vec<Attributed>, JoinCounters) {
    let mut joiner = Joiner::new(config);
    let mut out = Vec::new();
    for ev in merge(impressions, rewards) {
        joiner.push(ev, &mut out);
    }
    if finish {
        joiner.finish(&mut out);
    }
    (out, joiner.counters())
}

// ── Batching ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlushPolicy {
    pub max_examples: usize,
    /// Event-time milliseconds a partial batch may wait.
    pub max_wait: Millis,
}

impl Default for FlushPolicy {
    fn default() -> Self {
        Self {
            max_examples: 100,
            max_wait: 60_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Batcher {
    bandit_id: String,
    policy: FlushPolicy,
    next_seq: u64,
    buffer: Vec<Attributed>,
    opened_at: Millis,
}

impl Batcher {
    pub fn new(bandit_id: impl Into<String>, policy: FlushPolicy, first_seq: u64) -> Self {
        Self {
            bandit_id: bandit_id.into(),
            policy: FlushPolicy {
                max_examples: policy.max_examples.max(1),
                ..policy
            },
            next_seq: first_seq,
            buffer: Vec::new(),
            opened_at: 0,
        }
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    fn flush(&mut self) -> Option<TrainingBatch> {
        if self.buffer.is_empty() {
            return None;
        }
        let examples = std::mem::take(&mut self.buffer);
        let window = (
            examples.iter().map(|a| a.impression_ts).min().unwrap(),
            examples.iter().map(|a| a.impression_ts).max().unwrap(),
        );
        let batch = TrainingBatch {
            bandit_id: self.bandit_id.clone(),
            seq: self.next_seq,
            examples: examples.into_iter().map(|a| a.example).collect(),
            window,
        };
        self.next_seq += 1;
        Some(batch)
    }

    /// Flushes a partial batch that has waited `max_wait` by `watermark`.
    pub fn tick(&mut self, watermark: Millis, out: &mut Vec<TrainingBatch>) {
        if !self.buffer.is_empty() && watermark.saturating_sub(self.opened_at) >= self.policy.max_wait {
            out.extend(self.flush());
        }
    }

    pub fn push(&mut self, item: Attributed, watermark: Millis, out: &mut Vec<TrainingBatch>) {
        if self.buffer.is_empty() {
            self.opened_at = watermark;
        }
        self.buffer.push(item);
        if self.buffer.len() >= self.policy.max_examples {
            out.extend(self.flush());
        }
    }

    pub fn finish(&mut self, out: &mut Vec<TrainingBatch>) {
        out.extend(self.flush());
    }
}

/// Groups examples into batches under `policy`, numbering from `first_seq`.
/// Each item's flush clock is its impression time.
pub fn emit_batches(bandit_id: &str, items: Vec<Attributed>, policy: FlushPolicy, first_seq: u64) -> Vec<TrainingBatch> {
    let mut batcher = Batcher::new(bandit_id, policy, first_seq);
    let mut out = Vec::new();
    for item in items {
        let ts = item.impression_ts;
        batcher.tick(ts, &mut out);
        batcher.push(item, ts, &mut out);
    }
    batcher.finish(&mut out);
    out
}

// ── Collector ───────────────────────────────────────────────────────────

/// Incremental join + batch over one bandit's logs.
#[derive(Debug, Clone)]
pub struct Collector {
    joiner: Joiner,
    batcher: Batcher,
    cursor: (usize, usize),
    scratch: Vec<Attributed>,
}

impl Collector {
    pub fn new(config: &BanditConfig, policy: FlushPolicy) -> Self {
        Self {
            joiner: Joiner::new(config),
            batcher: Batcher::new(config.bandit_id.clone(), policy, 1),
            cursor: (0, 0),
            scratch: Vec::new(),
        }
    }

    pub fn counters(&self) -> JoinCounters {
        self.joiner.counters()
    }

    pub fn pending(&self) -> usize {
        self.joiner.pending()
    }

    fn feed(&mut self, ev: LogEvent, out: &mut Vec<TrainingBatch>) {
        self.joiner.push(ev, &mut self.scratch);
        let wm = self.joiner.watermark();
        self.batcher.tick(wm, out);
        for item in self.scratch.drain(..) {
            self.batcher.push(item, wm, out);
        }
    }

    /// Processes every event stamped at or before `cutoff`. Later appends are
    /// stamped after `cutoff`, so repeated pumps see the log in merge order.
    pub fn pump(&mut self, log: &EventLog, cutoff: Millis) -> Vec<TrainingBatch> {
        let (imps, rews) = log.take_until(self.cursor, cutoff);
        self.cursor.0 += imps.len();
        self.cursor.1 += rews.len();
        let mut out = Vec::new();
        for ev in merge(imps, rews) {
            self.feed(ev, &mut out);
        }
        out
    }

    /// Feeds a whole merged stream (used by replay).
    pub fn feed_all(&mut self, events: Vec<LogEvent>) -> Vec<TrainingBatch> {
        let mut out = Vec::new();
        for ev in events {
            self.feed(ev, &mut out);
        }
        out
    }

    /// End of stream: finalizes pending impressions and flushes the tail.
    pub fn finish(&mut self) -> Vec<TrainingBatch> {
        self.joiner.finish(&mut self.scratch);
        let mut out = Vec::new();
        let wm = self.joiner.watermark();
        for item in self.scratch.drain(..) {
            self.batcher.push(item, wm, &mut out);
        }
        self.batcher.finish(&mut out);
        out
    }
}

// ── Decoupled batch handoff and replay ──────────────────────────────────

/// Append-only `<bandit_id>.batches.log`.
pub struct BatchLog {
    file: Mutex<File>,
}

impl BatchLog {
    pub fn create(root: &Path, bandit_id: &str) -> io::Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Self {
            file: Mutex::new(open_append(&batches_path(root, bandit_id))?),
        })
    }

    pub fn append(&self, batch: &TrainingBatch) -> io::Result<()> {
        let mut f = self.file.lock().unwrap();
        f.write_all(&framing::encode(batch)?)
    }

    pub fn read(root: &Path, bandit_id: &str) -> io::Result<Vec<TrainingBatch>> {
        read_framed(&batches_path(root, bandit_id))
    }
}

/// Re-derives all batches from complete logs.
pub fn replay(
    config: &BanditConfig,
    policy: FlushPolicy,
    impressions: Vec<ImpressionEvent>,
    rewards: Vec<RewardEvent>,
    finish: bool,
) -> (Vec<TrainingBatch>, JoinCounters) {
    let mut c = Collector::new(config, policy);
    let mut batches = c.feed_all(merge(impressions, rewards));
    if finish {
        batches.extend(c.finish());
    }
    (batches, c.counters())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub recorded: usize,
    pub derived: usize,
    /// Recorded batches equal the derived ones byte for byte (a recorded
    /// prefix counts as identical when the stream was still open).
    pub identical: bool,
    pub first_mismatch: Option<u64>,
    pub counters: JoinCounters,
}

pub fn compare_batches(recorded: &[TrainingBatch], derived: &[TrainingBatch], counters: JoinCounters) -> ReplayReport {
    let bytes = |b: &TrainingBatch| serde_json::to_vec(b).expect("batch serializes");
    let first_mismatch = recorded
        .iter()
        .zip(derived)
        .find(|(a, b)| bytes(a) != bytes(b))
        .map(|(a, _)| a.seq);
    ReplayReport {
        recorded: recorded.len(),
        derived: derived.len(),
        identical: first_mismatch.is_none() && recorded.len() <= derived.len(),
        first_mismatch,
        counters,
    }
}

/// Replays a bandit's on-disk logs and checks them against its batch log.
pub fn replay_dir(config: &BanditConfig, policy: FlushPolicy, root: &Path, finish: bool) -> io::Result<ReplayReport> {
    let (imps, rews) = read_event_logs(root, &config.bandit_id)?;
    let recorded = BatchLog::read(root, &config.bandit_id)?;
    let (derived, counters) = replay(config, policy, imps, rews, finish);
    Ok(compare_batches(&recorded, &derived, counters))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ArmSpace;
    use proptest::prelude::*;

    fn config(spec: RewardSpec, window_secs: u64) -> BanditConfig {
        let mut c = BanditConfig::new("b", Algorithm::ThompsonBernoulli, ArmSpace::explicit(["a", "b"]), spec);
        if c.reward_spec != RewardSpec::Binary {
            c.algorithm = Algorithm::EpsilonGreedy;
        }
        c.attribution_window = window_secs;
        c
    }

    fn imp(id: &str, ts: Millis) -> ImpressionEvent {
        ImpressionEvent {
            bandit_id: "b".into(),
            request_id: id.into(),
            session_id: id.into(),
            arm: ArmChoice::Single("a".into()),
            context: vec![1.0],
            param_version: 0,
            propensity: None,
            timestamp: ts,
        }
    }

    fn rew(id: &str, v: f64, ts: Millis) -> RewardEvent {
        RewardEvent {
            bandit_id: "b".into(),
            request_id: id.into(),
            values: vec![v],
            click_position: None,
            timestamp: ts,
        }
    }

    const S: Millis = 1000;

    #[test]
    fn offsets_are_contiguous() {
        let log = EventLog::in_memory(Arc::new(config(RewardSpec::Binary, 60)));
        assert_eq!(log.append_impression(imp("r1", 0)).unwrap(), 0);
        assert_eq!(log.append_impression(imp("r2", 0)).unwrap(), 1);
        assert_eq!(log.append_reward(rew("r1", 1.0, 0)).unwrap(), 0);
    }

    #[test]
    fn binary_half_reward_is_rejected() {
        let log = EventLog::in_memory(Arc::new(config(RewardSpec::Binary, 60)));
        assert!(matches!(log.append_reward(rew("r1", 0.5, 0)), Err(PipelineError::SchemaViolation(_))));
        let mut bad = imp("r1", 0);
        bad.arm = ArmChoice::Single("z".into());
        assert!(log.append_impression(bad).is_err());
        log.append_impression(imp("r1", 0)).unwrap();
        assert!(log.append_impression(imp("r1", 0)).is_err());
    }

    #[test]
    fn unknown_bandit() {
        let logs = EventLogs::in_memory(Arc::new(BanditStore::in_memory()));
        assert!(matches!(logs.append_impression(imp("r", 0)), Err(PipelineError::UnknownBandit(_))));
    }

    #[test]
    fn in_window_click_matches() {
        let c = config(RewardSpec::Binary, 60);
        let (out, n) = join_window(&c, vec![imp("r", 0)], vec![rew("r", 1.0, 10 * S)], false);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].example.reward, vec![1.0]);
        assert!(!out[0].example.defaulted);
        assert_eq!(n.matched, 1);
    }

    #[test]
    fn late_click_is_discarded() {
        let c = config(RewardSpec::Binary, 60);
        let (out, n) = join_window(&c, vec![imp("r", 0)], vec![rew("r", 1.0, 120 * S)], false);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].example.reward, vec![0.0]);
        assert!(out[0].example.defaulted);
        assert_eq!(n.late_rewards, 1);
    }

    #[test]
    fn window_boundary_is_inclusive() {
        let c = config(RewardSpec::Binary, 60);
        let (out, _) = join_window(&c, vec![imp("r", 0)], vec![rew("r", 1.0, 60 * S)], false);
        assert_eq!(out[0].example.reward, vec![1.0]);
    }

    #[test]
    fn double_click_is_one_example() {
        let c = config(RewardSpec::Binary, 60);
        let (out, n) = join_window(
            &c,
            vec![imp("r", 0)],
            vec![rew("r", 1.0, S), rew("r", 1.0, 2 * S)],
            true,
        );
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].example.reward, vec![1.0]);
        assert_eq!(n.examples(), 1);
    }

    #[test]
    fn continuous_sums_and_drops() {
        let c = config(RewardSpec::Continuous, 60);
        let (out, n) = join_window(
            &c,
            vec![imp("r1", 0), imp("r2", 0)],
            vec![rew("r1", 2.5, S), rew("r1", 1.5, 2 * S), rew("r2", 9.0, 100 * S)],
            true,
        );
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].example.reward, vec![4.0]);
        assert_eq!((n.dropped, n.late_rewards), (1, 1));
        assert_eq!(n.impressions, n.examples() + n.dropped);
    }

    fn attributed(n: usize, spacing: Millis) -> Vec<Attributed> {
        (0..n)
            .map(|i| Attributed {
                example: TrainingExample {
                    request_id: format!("r{i}"),
                    context: vec![1.0],
                    arm: ArmChoice::Single("a".into()),
                    reward: vec![1.0],
                    click_position: None,
                    propensity: None,
                    defaulted: false,
                },
                impression_ts: i as Millis * spacing,
            })
            .collect()
    }

    #[test]
    fn size_flush() {
        let p = FlushPolicy { max_examples: 100, max_wait: Millis::MAX };
        let b = emit_batches("b", attributed(250, 1), p, 7);
        assert_eq!(b.iter().map(|b| b.examples.len()).collect::<Vec<_>>(), vec![100, 100, 50]);
        assert_eq!(b.iter().map(|b| b.seq).collect::<Vec<_>>(), vec![7, 8, 9]);
    }

    #[test]
    fn time_flush_and_no_empty_batches() {
        let p = FlushPolicy { max_examples: 100, max_wait: 5 * S };
        let mut batcher = Batcher::new("b", p, 1);
        let mut out = Vec::new();
        batcher.push(attributed(1, 0).remove(0), 0, &mut out);
        batcher.tick(4 * S, &mut out);
        assert!(out.is_empty());
        batcher.tick(5 * S, &mut out);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].examples.len(), 1);
        batcher.tick(100 * S, &mut out);
        batcher.finish(&mut out);
        assert_eq!(out.len(), 1);
        assert!(emit_batches("b", Vec::new(), p, 1).is_empty());
    }

    #[test]
    fn dir_logs_round_trip_and_replay() {
        let dir = tempfile::tempdir().unwrap();
        let c = Arc::new(config(RewardSpec::Binary, 5));
        let policy = FlushPolicy { max_examples: 3, max_wait: 10 * S };
        let log = EventLog::open_dir(c.clone(), dir.path(), false).unwrap();
        let batches = BatchLog::create(dir.path(), "b").unwrap();
        let mut collector = Collector::new(&c, policy);
        for t in 0..40u64 {
            log.append_impression(imp(&format!("r{t}"), t * S)).unwrap();
            if t % 3 == 0 {
                log.append_reward(rew(&format!("r{}", t.saturating_sub(2)), 1.0, t * S)).unwrap();
            }
            for b in collector.pump(&log, t * S) {
                batches.append(&b).unwrap();
            }
        }
        for b in collector.finish() {
            batches.append(&b).unwrap();
        }
        let report = replay_dir(&c, policy, dir.path(), true).unwrap();
        assert!(report.identical, "{report:?}");
        assert_eq!(report.recorded, report.derived);
        assert_eq!(report.counters.impressions, 40);
        assert_eq!(report.counters.examples(), 40);
    }

    #[derive(Debug, Clone)]
    enum Op {
        Impression(u64),
        Reward(usize, bool, u64),
        Pump(u64),
    }

    fn ops() -> impl Strategy<Value = Vec<Op>> {
        prop::collection::vec(
            prop_oneof![
                (0u64..5).prop_map(Op::Impression),
                (0usize..50, any::<bool>(), 0u64..30).prop_map(|(i, v, d)| Op::Reward(i, v, d)),
                (0u64..10).prop_map(Op::Pump),
            ],
            1..120,
        )
    }

    proptest! {
        #[test]
        fn incremental_collection_equals_replay(ops in ops(), window in 0u64..20, max_examples in 1usize..8, wait in 1u64..15) {
            let c = Arc::new(config(RewardSpec::Binary, window));
            let policy = FlushPolicy { max_examples, max_wait: wait * S };
            let log = EventLog::in_memory(c.clone());
            let mut collector = Collector::new(&c, policy);
            let mut live = Vec::new();
            let (mut clock, mut n) = (0u64, 0usize);
            for op in ops {
                match op {
                    Op::Impression(dt) => {
                        clock += dt * S;
                        log.append_impression(imp(&format!("r{n}"), clock)).unwrap();
                        n += 1;
                    }
                    Op::Reward(i, v, d) => {
                        log.append_reward(rew(&format!("r{i}"), v as u8 as f64, clock + d * S)).unwrap();
                    }
                    Op::Pump(dt) => {
                        clock += dt * S;
                        live.extend(collector.pump(&log, clock));
                    }
                }
            }
            live.extend(collector.pump(&log, Millis::MAX - 1));
            live.extend(collector.finish());
            let (imps, rews) = log.snapshot();
            let (derived, counters) = replay(&c, policy, imps, rews, true);
            prop_assert_eq!(serde_json::to_vec(&live).unwrap(), serde_json::to_vec(&derived).unwrap());
            prop_assert_eq!(counters.impressions as usize, n);
            prop_assert_eq!(counters.impressions, counters.examples() + counters.dropped);
            let total: usize = derived.iter().map(|b| b.examples.len()).sum();
            prop_assert_eq!(total, n);
            prop_assert!(derived.iter().all(|b| !b.examples.is_empty() && b.bandit_id == "b"));
            prop_assert!(derived.windows(2).all(|w| w[1].seq == w[0].seq + 1));
        }
    }
}
