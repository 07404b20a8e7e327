//! The integrated service: store, event logs, sampler, pipeline and trainer
//! sharing one data directory.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use adaptex::clock::{Clock, SystemClock};
use adaptex::events::TrainingBatch;
use adaptex::pipeline::{BatchLog, Collector, EventLog, EventLogs, FlushPolicy, JoinCounters};
use adaptex::sampler::{Sampler, SamplerSettings};
use adaptex::store::BanditStore;
use adaptex::trainer::Trainer;
use anyhow::{Context, Result};

/// `store/`, `logs/` and `reports/` under one root.
#[derive(Debug, Clone)]
pub struct DataDir {
    pub root: PathBuf,
}

impl DataDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn store(&self) -> PathBuf {
        self.root.join("store")
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn open_store(&self, fsync: bool) -> Result<Arc<BanditStore>> {
        let store = BanditStore::open_dir(self.store(), fsync).with_context(|| format!("opening store under {}", self.store().display()))?;
        Ok(Arc::new(store))
    }
}

fn flush_path(logs: &Path, bandit_id: &str) -> PathBuf {
    logs.join(format!("{bandit_id}.flush.json"))
}

/// Records the flush policy a bandit's batch log was cut with, so `replay`
/// can use the same one.
pub fn record_flush_policy(logs: &Path, bandit_id: &str, policy: FlushPolicy) -> Result<()> {
    fs::create_dir_all(logs)?;
    fs::write(flush_path(logs, bandit_id), serde_json::to_vec(&policy)?)?;
    Ok(())
}

pub fn recorded_flush_policy(logs: &Path, bandit_id: &str) -> Result<Option<FlushPolicy>> {
    match fs::read(flush_path(logs, bandit_id)) {
        Ok(bytes) => Ok(Some(serde_json::from_slice(&bytes)?)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}

#[derive(Debug, Clone)]
pub struct ServiceOptions {
    pub sampler: SamplerSettings,
    pub flush: FlushPolicy,
    pub seed: u64,
    pub fsync: bool,
}

struct Lane {
    log: Arc<EventLog>,
    collector: Collector,
    batch_log: BatchLog,
    recorded: u64,
}

pub struct Service {
    data: DataDir,
    store: Arc<BanditStore>,
    events: Arc<EventLogs>,
    sampler: Arc<Sampler>,
    trainer: Arc<Trainer>,
    clock: Arc<dyn Clock>,
    flush: FlushPolicy,
    lanes: Mutex<HashMap<String, Lane>>,
}

impl Service {
    pub fn open(data: DataDir, options: ServiceOptions) -> Result<Arc<Self>> {
        Self::open_with_clock(data, options, Arc::new(SystemClock))
    }

    pub fn open_with_clock(data: DataDir, options: ServiceOptions, clock: Arc<dyn Clock>) -> Result<Arc<Self>> {
        let store = data.open_store(options.fsync)?;
        fs::create_dir_all(data.logs())?;
        let events = Arc::new(EventLogs::in_dir(store.clone(), data.logs(), options.fsync));
        let sampler = Arc::new(Sampler::new(
            store.clone(),
            Some(events.clone()),
            clock.clone(),
            options.sampler,
            options.seed,
        ));
        Ok(Arc::new(Self {
            data,
            trainer: Arc::new(Trainer::new(store.clone())),
            store,
            events,
            sampler,
            clock,
            flush: options.flush,
            lanes: Mutex::new(HashMap::new()),
        }))
    }

    pub fn store(&self) -> &Arc<BanditStore> {
        &self.store
    }

    pub fn events(&self) -> &Arc<EventLogs> {
        &self.events
    }

    pub fn sampler(&self) -> &Arc<Sampler> {
        &self.sampler
    }

    pub fn trainer(&self) -> &Arc<Trainer> {
        &self.trainer
    }

    pub fn now_ms(&self) -> u64 {
        self.clock.now_ms()
    }

    fn lane<'a>(&self, lanes: &'a mut HashMap<String, Lane>, id: &str) -> Result<&'a mut Lane> {
        if !lanes.contains_key(id) {
            let log = self.events.get(id)?;
            let logs = self.data.logs();
            // a restart re-derives the batches already on disk; the trainer
            // skips them by sequence number and the batch log is not rewritten
            let recorded = BatchLog::read(&logs, id)?.last().map_or(0, |b| b.seq);
            record_flush_policy(&logs, id, self.flush)?;
            lanes.insert(
                id.to_string(),
                Lane {
                    collector: Collector::new(log.config(), self.flush),
                    batch_log: BatchLog::create(&logs, id)?,
                    log,
                    recorded,
                },
            );
        }
        Ok(lanes.get_mut(id).expect("inserted above"))
    }

    /// Joins and batches everything logged up to now, for every bandit.
    pub fn pump(&self) -> Result<Vec<TrainingBatch>> {
        let now = self.clock.now_ms();
        let mut lanes = self.lanes.lock().unwrap();
        let mut out = Vec::new();
        for id in self.store.bandit_ids() {
            let lane = self.lane(&mut lanes, &id)?;
            for batch in lane.collector.pump(&lane.log, now) {
                if batch.seq > lane.recorded {
                    lane.batch_log.append(&batch)?;
                    lane.recorded = batch.seq;
                }
                out.push(batch);
            }
        }
        Ok(out)
    }

    /// Pumps and trains synchronously. Used by tests and by shutdown.
    pub fn drain(&self) -> Result<usize> {
        let batches = self.pump()?;
        for b in &batches {
            self.trainer.process(b)?;
        }
        Ok(batches.len())
    }

    pub fn join_counters(&self, bandit_id: &str) -> Option<JoinCounters> {
        self.lanes.lock().unwrap().get(bandit_id).map(|l| l.collector.counters())
    }

    /// Plain-text `key value` lines for GET /metrics.
    pub fn render_metrics(&self) -> String {
        let mut s = self.trainer.metrics().counters().render();
        let m = self.sampler.metrics();
        for (k, v) in [
            ("sampler_requests", &m.requests),
            ("sampler_cache_hits", &m.cache_hits),
            ("sampler_impressions", &m.impressions),
            ("sampler_refresh_failures", &m.refresh_failures),
            ("sampler_overloaded", &m.overloaded),
        ] {
            s.push_str(&format!("{k} {}\n", v.load(Ordering::Relaxed)));
        }
        s.push_str(&format!("sampler_cached_sessions {}\n", self.sampler.cached_sessions()));
        s
    }

    /// Starts the refresher, the pipeline pump and the trainer. Threads exit
    /// once `stop` is set; the pump drains one last time on the way out.
    pub fn spawn_background(self: &Arc<Self>, pump_every: Duration, stop: Arc<AtomicBool>) -> Vec<JoinHandle<()>> {
        let (tx, rx) = mpsc::channel::<TrainingBatch>();
        let trainer = self.trainer.clone();
        let pipeline = {
            let service = self.clone();
            let stop = stop.clone();
            thread::spawn(move || pump_loop(&service, &tx, pump_every, &stop))
        };
        vec![
            self.sampler.spawn_refresher(stop),
            pipeline,
            thread::spawn(move || trainer.run(rx)),
        ]
    }
}

fn pump_loop(service: &Service, tx: &Sender<TrainingBatch>, every: Duration, stop: &AtomicBool) {
    loop {
        let last = stop.load(Ordering::SeqCst);
        match service.pump() {
            Ok(batches) => {
                for b in batches {
                    if tx.send(b).is_err() {
                        return;
                    }
                }
            }
            Err(e) => log::error!("pipeline: {e:#}"),
        }
        if last {
            return;
        }
        thread::sleep(every);
    }
}
