//! Closed-loop simulation: sampler → environment → event logs → collector →
//! trainer → store, all on a manual clock with one simulated second per step.

pub mod env;
pub mod output;

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{ManualClock, Millis};
use crate::config::{Algorithm, BanditConfig, Status};
use crate::context::RawContext;
use crate::events::{ArmChoice, RewardEvent};
use crate::par::{self, Execution};
use crate::pipeline::{BatchLog, Collector, EventLog, EventLogs, FlushPolicy, JoinCounters, PipelineError};
use crate::policy::{ArmCatalog, PolicyError, PolicyState};
use crate::sampler::{SampleError, Sampler, SamplerSettings};
use crate::store::{BanditStore, StoreError};
use crate::trainer::{Trainer, TrainerCounters, TrainerError};

pub use env::{Delay, EnvModel, Environment};

/// Simulated milliseconds per step.
pub const STEP_MS: Millis = 1000;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid environment: {0}")]
    InvalidEnvironment(String),
    #[error("bandit is not frozen")]
    NotFrozen,
    #[error("{count} poisoned training examples")]
    Poisoned { count: u64 },
    #[error("unknown grid parameter {0:?}")]
    UnknownGridParam(String),
    #[error("grid value for {param}: {reason}")]
    BadGridValue { param: String, reason: String },
    #[error("unknown control arm {0:?}")]
    UnknownControlArm(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Trainer(#[from] TrainerError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineParams {
    pub flush: FlushPolicy,
    /// Event-time period between sampler snapshot refreshes.
    pub refresh_period: Millis,
    pub allow_poison: bool,
    pub curve_points: usize,
    pub pull_windows: usize,
}

impl Default for PipelineParams {
    fn default() -> Self {
        Self {
            flush: FlushPolicy::default(),
            refresh_period: SamplerSettings::default().refresh_period.as_millis() as Millis,
            allow_poison: false,
            curve_points: 200,
            pull_windows: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    pub cumulative_regret: f64,
    /// Oracle-arm fraction over the steps since the previous point.
    pub best_arm_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PullWindow {
    pub start: u64,
    pub end: u64,
    pub fractions: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunCounters {
    pub decisions: u64,
    pub impressions: u64,
    pub reward_events: u64,
    pub join: JoinCounters,
    pub batches: u64,
    pub trainer: TrainerCounters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalState {
    pub param_version: u64,
    pub train_seq: u64,
    pub status: Status,
    /// Posterior mean reward per arm where the policy keeps one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub arm_means: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub bandit_id: String,
    pub algorithm: Algorithm,
    pub seed: u64,
    pub horizon: u64,
    pub arm_ids: Vec<String>,
    pub regret_curve: Vec<CurvePoint>,
    pub pull_fractions: Vec<PullWindow>,
    pub final_regret: f64,
    pub mean_reward: f64,
    /// Oracle-arm fraction over the final 10% of steps.
    pub best_arm_fraction: f64,
    /// First curve point after which every interval is ≥ 90% oracle.
    pub convergence_step: Option<u64>,
    pub counters: RunCounters,
    pub final_state: FinalState,
}

impl RunReport {
    /// Cumulative regret at `step`, read off the recorded curve.
    pub fn regret_at(&self, step: u64) -> Option<f64> {
        self.regret_curve.iter().find(|p| p.step == step).map(|p| p.cumulative_regret)
    }
}

/// Wall-clock decision latency. Kept out of [`RunReport`] so reports stay
/// reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyHistogram {
    /// Upper bounds in microseconds; the last bucket is open-ended.
    pub bounds_us: Vec<u64>,
    pub counts: Vec<u64>,
    pub max_us: u64,
}

impl Default for LatencyHistogram {
    fn default() -> Self {
        let bounds_us: Vec<u64> = (0..20).map(|i| 1u64 << i).collect();
        Self {
            counts: vec![0; bounds_us.len() + 1],
            bounds_us,
            max_us: 0,
        }
    }
}

impl LatencyHistogram {
    pub fn record(&mut self, us: u64) {
        let i = self.bounds_us.partition_point(|&b| b < us);
        self.counts[i] += 1;
        self.max_us = self.max_us.max(us);
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Upper bound of the bucket holding quantile `q`.
    pub fn quantile_upper_us(&self, q: f64) -> u64 {
        let target = (q * self.total() as f64).ceil() as u64;
        let mut acc = 0;
        for (i, c) in self.counts.iter().enumerate() {
            acc += c;
            if acc >= target.max(1) {
                return self.bounds_us.get(i).copied().unwrap_or(self.max_us);
            }
        }
        self.max_us
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub latency: LatencyHistogram,
}

/// Where a simulation keeps its store and logs.
#[derive(Debug, Clone, Default)]
pub enum Storage {
    #[default]
    Memory,
    /// `<root>/store`, `<root>/logs`; any previous files of the bandit are removed first.
    Dir(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Uplift {
    pub treatment_mean: f64,
    pub control_mean: f64,
    pub uplift: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_treatment: u64,
    pub n_control: u64,
}

impl Uplift {
    pub fn excludes_zero(&self) -> bool {
        self.ci_low > 0.0 || self.ci_high < 0.0
    }
}

#[derive(Default)]
struct Tally {
    regret: f64,
    reward: f64,
    hits_since_point: u64,
    steps_since_point: u64,
    final_hits: u64,
    final_steps: u64,
    curve: Vec<CurvePoint>,
    pulls: Vec<u64>,
    windows: Vec<PullWindow>,
    window_start: u64,
}

pub struct Simulation {
    config: BanditConfig,
    env: Environment,
    params: PipelineParams,
    seed: u64,
    horizon: u64,
    clock: Arc<ManualClock>,
    store: Arc<BanditStore>,
    log: Arc<EventLog>,
    sampler: Sampler,
    trainer: Trainer,
    collector: Collector,
    catalog: Arc<ArmCatalog>,
    index: HashMap<String, usize>,
    env_rng: ChaCha8Rng,
    step: u64,
    due: BTreeMap<u64, Vec<RewardEvent>>,
    batch_log: Option<BatchLog>,
    last_refresh: Millis,
    counters: RunCounters,
    tally: Tally,
    latency: LatencyHistogram,
}

fn remove_if_exists(path: &Path) -> std::io::Result<()> {
    match std::fs::remove_file(path) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(e),
        _ => Ok(()),
    }
}

impl Simulation {
    pub fn new(
        config: BanditConfig,
        env: Environment,
        seed: u64,
        params: PipelineParams,
        storage: Storage,
    ) -> Result<Self, SimError> {
        let catalog = Arc::new(ArmCatalog::new(&config.arm_space));
        env.validate(&config, &catalog)?;
        let clock = Arc::new(ManualClock::new(0));
        let id = config.bandit_id.clone();
        let (store, events, batch_log) = match &storage {
            Storage::Memory => {
                let store = Arc::new(BanditStore::in_memory().with_clock(clock.clone()));
                let events = Arc::new(EventLogs::in_memory(store.clone()));
                (store, events, None)
            }
            Storage::Dir(root) => {
                let (store_dir, logs_dir) = (root.join("store"), root.join("logs"));
                std::fs::create_dir_all(&store_dir)?;
                std::fs::create_dir_all(&logs_dir)?;
                remove_if_exists(&store_dir.join(format!("{id}.log")))?;
                for p in [
                    crate::pipeline::impressions_path(&logs_dir, &id),
                    crate::pipeline::rewards_path(&logs_dir, &id),
                    crate::pipeline::batches_path(&logs_dir, &id),
                ] {
                    remove_if_exists(&p)?;
                }
                let store = Arc::new(BanditStore::open_dir_with_clock(&store_dir, false, clock.clone())?);
                let events = Arc::new(EventLogs::in_dir(store.clone(), &logs_dir, false));
                let batch_log = BatchLog::create(&logs_dir, &id)?;
                (store, events, Some(batch_log))
            }
        };
        let mut config = config;
        config.status = Status::Learning;
        store.put_config(config.clone())?;
        let log = events.get(&id)?;
        let settings = SamplerSettings {
            refresh_period: std::time::Duration::from_millis(params.refresh_period),
            ..SamplerSettings::default()
        };
        let sampler = Sampler::new(store.clone(), Some(events), clock.clone(), settings, seed);
        let trainer = Trainer::new(store.clone());
        let collector = Collector::new(&config, params.flush);
        let mut env_rng = ChaCha8Rng::seed_from_u64(seed);
        env_rng.set_stream(u64::MAX);
        let index = catalog
            .ids()
            .unwrap_or_default()
            .iter()
            .enumerate()
            .map(|(i, a)| (a.clone(), i))
            .collect();
        let arms = catalog.ids().map_or(0, <[String]>::len);
        Ok(Self {
            config,
            env,
            params,
            seed,
            horizon: 0,
            clock,
            store,
            log,
            sampler,
            trainer,
            collector,
            catalog,
            index,
            env_rng,
            step: 0,
            due: BTreeMap::new(),
            batch_log,
            last_refresh: 0,
            counters: RunCounters::default(),
            tally: Tally {
                pulls: vec![0; arms],
                ..Tally::default()
            },
            latency: LatencyHistogram::default(),
        })
    }

    pub fn store(&self) -> &Arc<BanditStore> {
        &self.store
    }

    pub fn sampler(&self) -> &Sampler {
        &self.sampler
    }

    pub fn config(&self) -> &BanditConfig {
        &self.config
    }

    pub fn flush_policy(&self) -> FlushPolicy {
        self.params.flush
    }

    fn indices(&self, choice: &ArmChoice) -> Result<Vec<usize>, SimError> {
        choice
            .ids()
            .into_iter()
            .map(|a| {
                self.index
                    .get(a)
                    .copied()
                    .ok_or_else(|| SimError::Policy(PolicyError::UnknownArmId(a.to_string())))
            })
            .collect()
    }

    fn pump(&mut self, now: Millis) -> Result<(), SimError> {
        let batches = self.collector.pump(&self.log, now);
        self.train(batches)
    }

    fn train(&mut self, batches: Vec<crate::events::TrainingBatch>) -> Result<(), SimError> {
        for b in batches {
            if let Some(bl) = &self.batch_log {
                bl.append(&b)?;
            }
            self.counters.batches += 1;
            self.trainer.process(&b)?;
        }
        Ok(())
    }

    /// One simulated second: deliver due rewards, serve one decision (or a
    /// control arm), and run the pipeline up to now. Returns the realized reward.
    fn step_once(&mut self, control: Option<usize>) -> Result<(f64, bool, Vec<usize>, f64, f64), SimError> {
        let t = self.step;
        let now = t * STEP_MS;
        self.clock.set(now);
        if let Some(rewards) = self.due.remove(&t) {
            for mut r in rewards {
                r.timestamp = now;
                self.log.append_reward(r)?;
                self.counters.reward_events += 1;
            }
        }
        if now.saturating_sub(self.last_refresh) >= self.params.refresh_period {
            self.last_refresh = now;
            let _ = self.sampler.refresh(&self.config.bandit_id);
        }
        let raw: RawContext = Environment::draw_context(&self.config, &mut self.env_rng);
        let (arms, request_id) = match control {
            Some(c) => (vec![c], None),
            None => {
                let started = Instant::now();
                let d = self.sampler.sample(&self.config.bandit_id, &format!("s{t}"), &raw)?;
                self.latency.record(started.elapsed().as_micros() as u64);
                self.counters.decisions += 1;
                (self.indices(&d.arm)?, Some(d.request_id))
            }
        };
        let outcome = self.env.respond(&self.config, &raw, &arms, &mut self.env_rng)?;
        if let (Some(request_id), Some((values, click_position))) = (request_id, outcome.event) {
            let ev = RewardEvent {
                bandit_id: self.config.bandit_id.clone(),
                request_id,
                values,
                click_position,
                timestamp: now,
            };
            let delay = self.env.delay.draw(&mut self.env_rng);
            if delay == 0 {
                self.log.append_reward(ev)?;
                self.counters.reward_events += 1;
            } else {
                self.due.entry(t + delay).or_default().push(ev);
            }
        }
        self.pump(now)?;
        self.step += 1;
        Ok((outcome.realized, outcome.hit_oracle, arms, outcome.expected, outcome.oracle))
    }

    /// Runs `horizon` learning decisions.
    pub fn run(&mut self, horizon: u64) -> Result<(), SimError> {
        self.horizon += horizon;
        let start = self.step;
        let final_from = start + horizon - horizon / 10;
        let point_every = (horizon / self.params.curve_points.max(1) as u64).max(1);
        let window_len = (horizon / self.params.pull_windows.max(1) as u64).max(1);
        self.tally.window_start = start;
        for _ in 0..horizon {
            let (realized, hit, arms, expected, oracle) = self.step_once(None)?;
            let tally = &mut self.tally;
            tally.regret += (oracle - expected).max(0.0);
            tally.reward += realized;
            tally.hits_since_point += hit as u64;
            tally.steps_since_point += 1;
            if self.step > final_from {
                tally.final_hits += hit as u64;
                tally.final_steps += 1;
            }
            if let Some(p) = tally.pulls.get_mut(arms[0]) {
                *p += 1;
            }
            let done = self.step - start;
            if done % point_every == 0 || done == horizon {
                tally.curve.push(CurvePoint {
                    step: self.step,
                    cumulative_regret: tally.regret,
                    best_arm_fraction: tally.hits_since_point as f64 / tally.steps_since_point as f64,
                });
                tally.hits_since_point = 0;
                tally.steps_since_point = 0;
            }
            if done % window_len == 0 || done == horizon {
                let n = (self.step - tally.window_start) as f64;
                tally.windows.push(PullWindow {
                    start: tally.window_start,
                    end: self.step,
                    fractions: tally.pulls.iter().map(|&c| c as f64 / n).collect(),
                });
                tally.pulls.iter_mut().for_each(|c| *c = 0);
                tally.window_start = self.step;
            }
        }
        let poisoned = self.trainer.metrics().counters().poisoned_examples;
        if poisoned > 0 && !self.params.allow_poison {
            return Err(SimError::Poisoned { count: poisoned });
        }
        Ok(())
    }

    /// Closes the streams (pending impressions finalize) and builds the report.
    pub fn finish(&mut self) -> Result<RunOutput, SimError> {
        let tail = self.collector.finish();
        self.train(tail)?;
        let poisoned = self.trainer.metrics().counters().poisoned_examples;
        if poisoned > 0 && !self.params.allow_poison {
            return Err(SimError::Poisoned { count: poisoned });
        }
        self.counters.impressions = self.sampler.metrics().impressions.load(std::sync::atomic::Ordering::Relaxed);
        self.counters.join = self.collector.counters();
        self.counters.trainer = self.trainer.metrics().counters();
        let snap = self.store.snapshot(&self.config.bandit_id)?;
        let arm_means = match &*snap.params.state {
            PolicyState::ThompsonBernoulli(s) => Some(s.means()),
            PolicyState::EpsilonGreedy(s) => Some(s.means()),
            PolicyState::Cascade(s) => Some(s.items.iter().map(|b| b.mean()).collect()),
            _ => None,
        };
        let t = &self.tally;
        let convergence_step = {
            let mut start = None;
            for (i, p) in t.curve.iter().enumerate() {
                if p.best_arm_fraction < 0.9 {
                    start = None;
                } else if start.is_none() {
                    start = Some(if i == 0 { 0 } else { t.curve[i - 1].step });
                }
            }
            start
        };
        let report = RunReport {
            bandit_id: self.config.bandit_id.clone(),
            algorithm: self.config.algorithm,
            seed: self.seed,
            horizon: self.horizon,
            arm_ids: self.catalog.ids().unwrap_or_default().to_vec(),
            regret_curve: t.curve.clone(),
            pull_fractions: t.windows.clone(),
            final_regret: t.regret,
            mean_reward: if self.horizon == 0 { 0.0 } else { t.reward / self.horizon as f64 },
            best_arm_fraction: if t.final_steps == 0 { 0.0 } else { t.final_hits as f64 / t.final_steps as f64 },
            convergence_step,
            counters: self.counters,
            final_state: FinalState {
                param_version: snap.params.version,
                train_seq: snap.params.train_seq,
                status: snap.config.status,
                arm_means,
            },
        };
        Ok(RunOutput {
            report,
            latency: self.latency.clone(),
        })
    }

    pub fn freeze(&self) -> Result<(), SimError> {
        self.sampler.admin_freeze(&self.config.bandit_id)?;
        Ok(())
    }

    /// Alternates frozen-bandit and control traffic, `per_side` decisions each.
    pub fn ab_test(&mut self, control_arm: &str, per_side: u64) -> Result<Uplift, SimError> {
        if !self.store.get_config(&self.config.bandit_id)?.is_frozen() {
            return Err(SimError::NotFrozen);
        }
        let control = *self
            .index
            .get(control_arm)
            .ok_or_else(|| SimError::UnknownControlArm(control_arm.to_string()))?;
        let (mut sum_t, mut sq_t, mut sum_c, mut sq_c) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..2 * per_side {
            let arm = (i % 2 == 1).then_some(control);
            let (r, ..) = self.step_once(arm)?;
            if arm.is_some() {
                sum_c += r;
                sq_c += r * r;
            } else {
                sum_t += r;
                sq_t += r * r;
            }
        }
        let n = per_side as f64;
        let (mt, mc) = (sum_t / n, sum_c / n);
        let var = |sq: f64, m: f64| ((sq - n * m * m) / (n - 1.0).max(1.0)).max(0.0);
        let se = (var(sq_t, mt) / n + var(sq_c, mc) / n).sqrt();
        let uplift = mt - mc;
        Ok(Uplift {
            treatment_mean: mt,
            control_mean: mc,
            uplift,
            ci_low: uplift - 1.96 * se,
            ci_high: uplift + 1.96 * se,
            n_treatment: per_side,
            n_control: per_side,
        })
    }
}

pub fn run_experiment(
    config: &BanditConfig,
    env: &Environment,
    horizon: u64,
    seed: u64,
    params: &PipelineParams,
) -> Result<RunOutput, SimError> {
    let mut sim = Simulation::new(config.clone(), env.clone(), seed, params.clone(), Storage::Memory)?;
    sim.run(horizon)?;
    sim.finish()
}

/// Independent runs over `seeds`.
pub fn run_seeds(
    config: &BanditConfig,
    env: &Environment,
    horizon: u64,
    seeds: &[u64],
    params: &PipelineParams,
    exec: Execution,
) -> Result<Vec<RunOutput>, SimError> {
    par::map(exec, seeds.to_vec(), |seed| run_experiment(config, env, horizon, seed, params))
        .into_iter()
        .collect()
}

/// Freezes the simulated bandit and A/B tests it against `control_arm`.
pub fn freeze_and_ab(sim: &mut Simulation, control_arm: &str, per_side: u64) -> Result<Uplift, SimError> {
    sim.ab_test(control_arm, per_side)
}

// ── Sweeps ──────────────────────────────────────────────────────────────

pub type Grid = BTreeMap<String, Vec<serde_json::Value>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub params: BTreeMap<String, serde_json::Value>,
    pub seed: u64,
    pub report: RunReport,
}

const IDENTITY_FIELDS: [&str; 5] = ["bandit_id", "algorithm", "arm_space", "context_schema", "reward_spec"];

/// Applies one grid assignment to copies of the config and pipeline params.
pub fn apply_grid_point(
    config: &BanditConfig,
    params: &PipelineParams,
    point: &BTreeMap<String, serde_json::Value>,
) -> Result<(BanditConfig, PipelineParams), SimError> {
    let mut c = serde_json::to_value(config).expect("config serializes");
    let mut p = serde_json::to_value(params).expect("params serialize");
    for (key, value) in point {
        let target = if c["hyperparameters"].get(key).is_some() {
            &mut c["hyperparameters"][key]
        } else if c.get(key).is_some() && !IDENTITY_FIELDS.contains(&key.as_str()) {
            &mut c[key]
        } else if p["flush"].get(key).is_some() {
            &mut p["flush"][key]
        } else if p.get(key).is_some() {
            &mut p[key]
        } else {
            return Err(SimError::UnknownGridParam(key.clone()));
        };
        *target = value.clone();
    }
    let bad = |param: &str, e: serde_json::Error| SimError::BadGridValue {
        param: param.to_string(),
        reason: e.to_string(),
    };
    let keys = point.keys().cloned().collect::<Vec<_>>().join(",");
    Ok((
        serde_json::from_value(c).map_err(|e| bad(&keys, e))?,
        serde_json::from_value(p).map_err(|e| bad(&keys, e))?,
    ))
}

/// Every assignment of the grid's Cartesian product, in key order.
pub fn grid_points(grid: &Grid) -> Vec<BTreeMap<String, serde_json::Value>> {
    let mut points = vec![BTreeMap::new()];
    for (key, values) in grid {
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.insert(key.clone(), v.clone());
                    q
                })
            })
            .collect();
    }
    points
}

pub fn sweep(
    config: &BanditConfig,
    env: &Environment,
    grid: &Grid,
    seeds: &[u64],
    horizon: u64,
    params: &PipelineParams,
    exec: Execution,
) -> Result<Vec<SweepRow>, SimError> {
    let mut jobs = Vec::new();
    for point in grid_points(grid) {
        let (c, p) = apply_grid_point(config, params, &point)?;
        for &seed in seeds {
            jobs.push((point.clone(), c.clone(), p.clone(), seed));
        }
    }
    par::map(exec, jobs, |(point, c, p, seed)| {
        run_experiment(&c, env, horizon, seed, &p).map(|out| SweepRow {
            params: point,
            seed,
            report: out.report,
        })
    })
    .into_iter()
    .collect()
}
