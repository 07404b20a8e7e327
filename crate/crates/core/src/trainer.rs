//! Applies training batches to stored parameters.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::Receiver;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::BanditConfig;
use crate::events::TrainingBatch;
use crate::policy::{update_batch, ArmCatalog, PolicyState, UpdateStats};
use crate::store::{BanditStore, ConflictReason, StoreError};

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("batch for {batch:?} applied to bandit {bandit:?}")]
    BanditMismatch { batch: String, bandit: String },
    #[error("stored {state} state cannot serve {algorithm}")]
    AlgorithmMismatch { state: &'static str, algorithm: String },
    #[error("batch {seq} for {bandit_id:?} still conflicts after a retry")]
    PersistentConflict { bandit_id: String, seq: u64 },
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Folds a batch into a copy of `state`. Bad examples are skipped and counted.
pub fn apply_batch(
    state: &PolicyState,
    config: &BanditConfig,
    catalog: &ArmCatalog,
    batch: &TrainingBatch,
) -> Result<(PolicyState, UpdateStats), TrainerError> {
    if batch.bandit_id != config.bandit_id {
        return Err(TrainerError::BanditMismatch {
            batch: batch.bandit_id.clone(),
            bandit: config.bandit_id.clone(),
        });
    }
    if !state.matches(config.algorithm) {
        return Err(TrainerError::AlgorithmMismatch {
            state: state.family(),
            algorithm: config.algorithm.to_string(),
        });
    }
    let mut next = state.clone();
    let stats = update_batch(&mut next, config, catalog, &batch.examples);
    Ok((next, stats))
}

#[derive(Debug, Default)]
pub struct TrainerMetrics {
    pub applied_batches: AtomicU64,
    pub poisoned_examples: AtomicU64,
    pub dropped_frozen: AtomicU64,
    pub cas_conflicts: AtomicU64,
    pub skipped_replays: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainerCounters {
    pub applied_batches: u64,
    pub poisoned_examples: u64,
    pub dropped_frozen: u64,
    pub cas_conflicts: u64,
    pub skipped_replays: u64,
}

impl TrainerMetrics {
    pub fn counters(&self) -> TrainerCounters {
        TrainerCounters {
            applied_batches: self.applied_batches.load(Ordering::Relaxed),
            poisoned_examples: self.poisoned_examples.load(Ordering::Relaxed),
            dropped_frozen: self.dropped_frozen.load(Ordering::Relaxed),
            cas_conflicts: self.cas_conflicts.load(Ordering::Relaxed),
            skipped_replays: self.skipped_replays.load(Ordering::Relaxed),
        }
    }
}

impl TrainerCounters {
    /// Plain-text `key value` lines.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("applied_batches", self.applied_batches),
            ("poisoned_examples", self.poisoned_examples),
            ("dropped_frozen", self.dropped_frozen),
            ("cas_conflicts", self.cas_conflicts),
            ("skipped_replays", self.skipped_replays),
        ] {
            let _ = writeln!(s, "{k} {v}");
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Applied { version: u64, stats: UpdateStats },
    SkippedReplay,
    DroppedFrozen,
}

pub struct Trainer {
    store: Arc<BanditStore>,
    metrics: Arc<TrainerMetrics>,
    catalogs: Mutex<HashMap<String, Arc<ArmCatalog>>>,
}

impl Trainer {
    pub fn new(store: Arc<BanditStore>) -> Self {
        Self {
            store,
            metrics: Arc::new(TrainerMetrics::default()),
            catalogs: Mutex::new(HashMap::new()),
        }
    }

    pub fn metrics(&self) -> &Arc<TrainerMetrics> {
        &self.metrics
    }

    fn catalog(&self, config: &BanditConfig) -> Arc<ArmCatalog> {
        // arm spaces are immutable, so one catalog per bandit suffices
        self.catalogs
            .lock()
            .unwrap()
            .entry(config.bandit_id.clone())
            .or_insert_with(|| Arc::new(ArmCatalog::new(&config.arm_space)))
            .clone()
    }

    /// Applies one batch unless it was applied already, then commits.
    pub fn process(&self, batch: &TrainingBatch) -> Result<Outcome, TrainerError> {
        let mut retried = false;
        loop {
            let snap = self.store.snapshot(&batch.bandit_id)?;
            if batch.seq <= snap.params.train_seq {
                self.metrics.skipped_replays.fetch_add(1, Ordering::Relaxed);
                return Ok(Outcome::SkippedReplay);
            }
            let catalog = self.catalog(&snap.config);
            let (state, stats) = apply_batch(&snap.params.state, &snap.config, &catalog, batch)?;
            match self
                .store
                .cas_put_params(&batch.bandit_id, snap.params.version, state, batch.seq)
            {
                Ok(version) => {
                    self.metrics.applied_batches.fetch_add(1, Ordering::Relaxed);
                    if !stats.poisoned.is_empty() {
                        self.metrics
                            .poisoned_examples
                            .fetch_add(stats.poisoned.len() as u64, Ordering::Relaxed);
                        for (i, e) in &stats.poisoned {
                            log::warn!("{} batch {}: example {i} skipped: {e}", batch.bandit_id, batch.seq);
                        }
                    }
                    return Ok(Outcome::Applied { version, stats });
                }
                Err(StoreError::Conflict(ConflictReason::Frozen)) => {
                    self.metrics.dropped_frozen.fetch_add(1, Ordering::Relaxed);
                    return Ok(Outcome::DroppedFrozen);
                }
                Err(StoreError::Conflict(reason)) => {
                    self.metrics.cas_conflicts.fetch_add(1, Ordering::Relaxed);
                    if retried {
                        log::error!("{} batch {}: conflict after retry: {reason:?}", batch.bandit_id, batch.seq);
                        return Err(TrainerError::PersistentConflict {
                            bandit_id: batch.bandit_id.clone(),
                            seq: batch.seq,
                        });
                    }
                    retried = true;
                }
                Err(e) => return Err(e.into()),
            }
        }
    }

    /// Consumes batches until the sender hangs up.
    pub fn run(&self, batches: Receiver<TrainingBatch>) {
        for batch in batches {
            if let Err(e) = self.process(&batch) {
                log::error!("{} batch {}: {e}", batch.bandit_id, batch.seq);
            }
        }
    }
}
