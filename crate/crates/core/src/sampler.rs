//! Decision service: cached parameter snapshots, session stickiness,
//! impression logging and the admin operations.

use std::collections::HashMap;
use std::num::NonZeroUsize;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use arc_swap::ArcSwap;
use lru::LruCache;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{Clock, Millis};
use crate::config::BanditConfig;
use crate::context::{encode_context, EncodeError, RawContext};
use crate::events::{Decision, ImpressionEvent};
use crate::pipeline::{EventLogs, PipelineError};
use crate::policy::{select, ArmCatalog, Mode, PolicyError};
use crate::store::{BanditStore, PutOutcome, Snapshot, StoreError};

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("unknown bandit {0:?}")]
    UnknownBandit(String),
    #[error("invalid context: {0}")]
    InvalidContext(#[from] EncodeError),
    #[error("too many requests in flight")]
    Overloaded,
    #[error("selection failed: {0}")]
    Policy(#[from] PolicyError),
    #[error("impression log: {0}")]
    Log(#[from] PipelineError),
    #[error("refresh failed: {0}")]
    RefreshFailed(String),
    #[error(transparent)]
    Store(StoreError),
}

impl From<StoreError> for SampleError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::UnknownBandit(id) => SampleError::UnknownBandit(id),
            other => SampleError::Store(other),
        }
    }
}

/// Read side of the store as the sampler sees it.
pub trait ParamSource: Send + Sync {
    fn fetch(&self, bandit_id: &str) -> Result<Arc<Snapshot>, StoreError>;
}

impl ParamSource for BanditStore {
    fn fetch(&self, bandit_id: &str) -> Result<Arc<Snapshot>, StoreError> {
        self.snapshot(bandit_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerSettings {
    pub refresh_period: Duration,
    pub ttl: Duration,
    pub cache_capacity: usize,
    pub max_in_flight: usize,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        Self {
            refresh_period: Duration::from_secs(10),
            ttl: Duration::from_secs(30 * 60),
            cache_capacity: 100_000,
            max_in_flight: 1024,
        }
    }
}

/// One immutable, decoded view of a bandit.
#[derive(Debug)]
pub struct Served {
    pub snapshot: Arc<Snapshot>,
    pub catalog: Arc<ArmCatalog>,
    pub fetched_at: Millis,
}

impl Served {
    fn key(&self) -> (u64, u64) {
        (self.snapshot.params.version, self.snapshot.config_version)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Refresh {
    Unchanged,
    Swapped { from: (u64, u64), to: (u64, u64) },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeAck {
    pub config_version: u64,
    pub already_frozen: bool,
}

#[derive(Debug, Default)]
pub struct SamplerMetrics {
    pub requests: AtomicU64,
    pub cache_hits: AtomicU64,
    pub impressions: AtomicU64,
    pub refresh_failures: AtomicU64,
    pub overloaded: AtomicU64,
}

#[derive(Debug, Clone)]
struct Sticky {
    decision: Decision,
    expires_at: Millis,
}

type SessionKey = (String, String);

pub struct Sampler {
    store: Arc<BanditStore>,
    source: Arc<dyn ParamSource>,
    events: Option<Arc<EventLogs>>,
    clock: Arc<dyn Clock>,
    settings: SamplerSettings,
    snapshots: ArcSwap<HashMap<String, Arc<ArcSwap<Served>>>>,
    install: Mutex<()>,
    sessions: Mutex<LruCache<SessionKey, Sticky>>,
    seed: u64,
    counter: AtomicU64,
    in_flight: AtomicUsize,
    metrics: SamplerMetrics,
}

struct InFlight<'a>(&'a AtomicUsize);

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::AcqRel);
    }
}

impl Sampler {
    /// `seed` fixes every random draw; request ids are derived from it too,
    /// so distinct processes sharing logs need distinct seeds.
    pub fn new(store: Arc<BanditStore>, events: Option<Arc<EventLogs>>, clock: Arc<dyn Clock>, settings: SamplerSettings, seed: u64) -> Self {
        let capacity = NonZeroUsize::new(settings.cache_capacity.max(1)).unwrap();
        Self {
            source: store.clone(),
            store,
            events,
            clock,
            settings,
            snapshots: ArcSwap::from_pointee(HashMap::new()),
            install: Mutex::new(()),
            sessions: Mutex::new(LruCache::new(capacity)),
            seed,
            counter: AtomicU64::new(0),
            in_flight: AtomicUsize::new(0),
            metrics: SamplerMetrics::default(),
        }
    }

    /// Reads parameters from `source` instead of the admin store.
    pub fn with_source(mut self, source: Arc<dyn ParamSource>) -> Self {
        self.source = source;
        self
    }

    pub fn settings(&self) -> &SamplerSettings {
        &self.settings
    }

    pub fn metrics(&self) -> &SamplerMetrics {
        &self.metrics
    }

    pub fn store(&self) -> &Arc<BanditStore> {
        &self.store
    }

    pub fn cached_sessions(&self) -> usize {
        self.sessions.lock().unwrap().len()
    }

    fn decode(&self, snapshot: Arc<Snapshot>, previous: Option<&Served>) -> Served {
        let catalog = match previous {
            Some(p) if p.snapshot.config.arm_space == snapshot.config.arm_space => p.catalog.clone(),
            _ => Arc::new(ArmCatalog::new(&snapshot.config.arm_space)),
        };
        Served {
            snapshot,
            catalog,
            fetched_at: self.clock.now_ms(),
        }
    }

    /// The snapshot a request uses, fetched on first sight of a bandit.
    pub fn served(&self, bandit_id: &str) -> Result<Arc<Served>, SampleError> {
        if let Some(slot) = self.snapshots.load().get(bandit_id) {
            return Ok(slot.load_full());
        }
        let _guard = self.install.lock().unwrap();
        if let Some(slot) = self.snapshots.load().get(bandit_id) {
            return Ok(slot.load_full());
        }
        let served = Arc::new(self.decode(self.source.fetch(bandit_id)?, None));
        let mut map = HashMap::clone(&self.snapshots.load());
        map.insert(bandit_id.to_string(), Arc::new(ArcSwap::new(served.clone())));
        self.snapshots.store(Arc::new(map));
        Ok(served)
    }

    /// Pulls the latest committed version; keeps the old snapshot on failure.
    pub fn refresh(&self, bandit_id: &str) -> Result<Refresh, SampleError> {
        let slot = self.snapshots.load().get(bandit_id).cloned();
        let Some(slot) = slot else {
            self.served(bandit_id)?;
            return Ok(Refresh::Unchanged);
        };
        let current = slot.load_full();
        let fetched = match self.source.fetch(bandit_id) {
            Ok(s) => s,
            Err(e) => {
                self.metrics.refresh_failures.fetch_add(1, Ordering::Relaxed);
                log::warn!("refresh of {bandit_id} failed, serving version {:?}: {e}", current.key());
                return Err(SampleError::RefreshFailed(e.to_string()));
            }
        };
        let next = self.decode(fetched, Some(&current));
        if next.key() == current.key() {
            return Ok(Refresh::Unchanged);
        }
        let (from, to) = (current.key(), next.key());
        slot.store(Arc::new(next));
        Ok(Refresh::Swapped { from, to })
    }

    pub fn refresh_all(&self) {
        let ids: Vec<String> = self.snapshots.load().keys().cloned().collect();
        for id in ids {
            let _ = self.refresh(&id);
        }
    }

    /// Refreshes every known bandit each `refresh_period` until `stop` is set.
    pub fn spawn_refresher(self: &Arc<Self>, stop: Arc<AtomicBool>) -> JoinHandle<()> {
        let me = self.clone();
        std::thread::spawn(move || {
            let tick = Duration::from_millis(50).min(me.settings.refresh_period);
            let mut waited = Duration::ZERO;
            while !stop.load(Ordering::Relaxed) {
                std::thread::sleep(tick);
                waited += tick;
                if waited >= me.settings.refresh_period {
                    waited = Duration::ZERO;
                    me.refresh_all();
                }
            }
        })
    }

    fn sticky(&self, key: &SessionKey, now: Millis) -> Option<Decision> {
        let mut sessions = self.sessions.lock().unwrap();
        match sessions.get(key) {
            Some(s) if s.expires_at > now => Some(s.decision.clone()),
            Some(_) => {
                sessions.pop(key);
                None
            }
            None => None,
        }
    }

    pub fn sample(&self, bandit_id: &str, session_id: &str, raw: &RawContext) -> Result<Decision, SampleError> {
        let in_flight = self.in_flight.fetch_add(1, Ordering::AcqRel) + 1;
        let _guard = InFlight(&self.in_flight);
        if in_flight > self.settings.max_in_flight {
            self.metrics.overloaded.fetch_add(1, Ordering::Relaxed);
            return Err(SampleError::Overloaded);
        }
        self.metrics.requests.fetch_add(1, Ordering::Relaxed);
        let now = self.clock.now_ms();
        let key = (bandit_id.to_string(), session_id.to_string());
        if let Some(d) = self.sticky(&key, now) {
            self.metrics.cache_hits.fetch_add(1, Ordering::Relaxed);
            return Ok(d);
        }

        let served = self.served(bandit_id)?;
        let config: &BanditConfig = &served.snapshot.config;
        let params = &served.snapshot.params;
        let x = encode_context(&config.context_schema, raw)?;
        let n = self.counter.fetch_add(1, Ordering::Relaxed);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(n);
        let mode = if config.is_frozen() { Mode::Exploit } else { Mode::Explore };
        let selection = select(config, &served.catalog, &params.state, x.as_slice(), mode, &mut rng)?;
        let decision = Decision {
            bandit_id: bandit_id.to_string(),
            request_id: format!("{:x}-{n}", self.seed),
            arm: selection.choice,
            param_version: params.version,
            served_at: now,
        };

        {
            let mut sessions = self.sessions.lock().unwrap();
            // a concurrent request for the same session may have won
            if let Some(s) = sessions.get(&key) {
                if s.expires_at > now {
                    self.metrics.cache_hits.fetch_add(1, Ordering::Relaxed);
                    return Ok(s.decision.clone());
                }
            }
            sessions.put(
                key,
                Sticky {
                    decision: decision.clone(),
                    expires_at: now + self.settings.ttl.as_millis() as Millis,
                },
            );
        }

        if let Some(events) = &self.events {
            events.append_impression(ImpressionEvent {
                bandit_id: bandit_id.to_string(),
                request_id: decision.request_id.clone(),
                session_id: session_id.to_string(),
                arm: decision.arm.clone(),
                context: x.0,
                param_version: params.version,
                propensity: selection.propensity,
                timestamp: now,
            })?;
        }
        self.metrics.impressions.fetch_add(1, Ordering::Relaxed);
        Ok(decision)
    }

    pub fn admin_create(&self, config: BanditConfig) -> Result<PutOutcome, StoreError> {
        let id = config.bandit_id.clone();
        let out = self.store.put_config(config)?;
        if !out.created {
            let _ = self.refresh(&id);
        }
        Ok(out)
    }

    /// Idempotent freeze; the local snapshot is refreshed right away.
    pub fn admin_freeze(&self, bandit_id: &str) -> Result<FreezeAck, StoreError> {
        let ack = match self.store.freeze(bandit_id) {
            Ok(v) => FreezeAck {
                config_version: v,
                already_frozen: false,
            },
            Err(StoreError::AlreadyFrozen(_)) => FreezeAck {
                config_version: self.store.snapshot(bandit_id)?.config_version,
                already_frozen: true,
            },
            Err(e) => return Err(e),
        };
        if self.snapshots.load().contains_key(bandit_id) {
            let _ = self.refresh(bandit_id);
        }
        Ok(ack)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use crate::config::{Algorithm, ArmSpace, FeatureSpec, RewardSpec};
    use crate::events::ArmChoice;
    use crate::policy::mab::{BetaArm, BetaState};
    use crate::policy::PolicyState;
    use std::time::Instant;

    fn setup(alg: Algorithm) -> (Arc<BanditStore>, Arc<ManualClock>, Sampler, Arc<EventLogs>) {
        let store = Arc::new(BanditStore::in_memory());
        let mut c = BanditConfig::new("b", alg, ArmSpace::explicit(["a", "c"]), RewardSpec::Binary);
        c.context_schema = vec![FeatureSpec::categorical("seg", 3)];
        store.put_config(c).unwrap();
        let clock = Arc::new(ManualClock::new(0));
        let events = Arc::new(EventLogs::in_memory(store.clone()));
        let s = Sampler::new(store.clone(), Some(events.clone()), clock.clone(), SamplerSettings::default(), 7);
        (store, clock, s, events)
    }

    fn ctx(seg: f64) -> RawContext {
        RawContext::from([("seg".to_string(), seg)])
    }

    fn impressions(events: &EventLogs) -> usize {
        events.get("b").unwrap().len().0
    }

    #[test]
    fn same_session_is_sticky_within_ttl() {
        let (_, clock, s, events) = setup(Algorithm::ThompsonBernoulli);
        let d1 = s.sample("b", "u1", &ctx(0.0)).unwrap();
        clock.advance(60_000);
        let d2 = s.sample("b", "u1", &ctx(2.0)).unwrap();
        assert_eq!(d1, d2);
        assert_eq!(impressions(&events), 1);
        clock.advance(30 * 60_000);
        let d3 = s.sample("b", "u1", &ctx(0.0)).unwrap();
        assert_ne!(d3.request_id, d1.request_id);
        assert_eq!(impressions(&events), 2);
    }

    #[test]
    fn frozen_bernoulli_takes_best_mean() {
        let (store, _, s, _) = setup(Algorithm::ThompsonBernoulli);
        let state = PolicyState::ThompsonBernoulli(BetaState {
            arms: vec![
                BetaArm { arm: "a".into(), alpha: 2.0, beta: 8.0 },
                BetaArm { arm: "c".into(), alpha: 7.0, beta: 3.0 },
            ],
        });
        store.cas_put_params("b", 0, state, 1).unwrap();
        s.admin_freeze("b").unwrap();
        for i in 0..100 {
            let d = s.sample("b", &format!("u{i}"), &ctx(0.0)).unwrap();
            assert_eq!(d.arm, ArmChoice::Single("c".into()));
            assert_eq!(d.param_version, 1);
        }
        let again = s.admin_freeze("b").unwrap();
        assert!(again.already_frozen);
    }

    #[test]
    fn refresh_swaps_only_on_new_versions() {
        let (store, _, s, _) = setup(Algorithm::ThompsonBernoulli);
        s.sample("b", "u", &ctx(0.0)).unwrap();
        assert_eq!(s.refresh("b").unwrap(), Refresh::Unchanged);
        let st = PolicyState::initial(&store.get_config("b").unwrap()).unwrap();
        store.cas_put_params("b", 0, st, 1).unwrap();
        assert_eq!(s.refresh("b").unwrap(), Refresh::Swapped { from: (0, 0), to: (1, 0) });
        assert_eq!(s.sample("b", "v", &ctx(0.0)).unwrap().param_version, 1);
    }

    struct Down;
    impl ParamSource for Down {
        fn fetch(&self, _: &str) -> Result<Arc<Snapshot>, StoreError> {
            Err(StoreError::Io(std::io::Error::other("unreachable")))
        }
    }

    #[test]
    fn stale_snapshot_served_when_store_is_down() {
        let (_, _, s, _) = setup(Algorithm::ThompsonBernoulli);
        s.served("b").unwrap();
        let s = s.with_source(Arc::new(Down));
        assert!(matches!(s.refresh("b"), Err(SampleError::RefreshFailed(_))));
        assert_eq!(s.sample("b", "u", &ctx(1.0)).unwrap().param_version, 0);
        assert_eq!(s.metrics().refresh_failures.load(Ordering::Relaxed), 1);
    }

    #[test]
    fn errors_map_to_kinds() {
        let (_, _, s, _) = setup(Algorithm::ThompsonBernoulli);
        assert!(matches!(s.sample("zz", "u", &ctx(0.0)), Err(SampleError::UnknownBandit(_))));
        assert!(matches!(s.sample("b", "u", &ctx(5.0)), Err(SampleError::InvalidContext(_))));
    }

    #[test]
    fn capacity_bound_holds() {
        let store = Arc::new(BanditStore::in_memory());
        store
            .put_config(BanditConfig::new("b", Algorithm::Exp3, ArmSpace::explicit(["a", "c"]), RewardSpec::Binary))
            .unwrap();
        let settings = SamplerSettings { cache_capacity: 10, ..Default::default() };
        let s = Sampler::new(store, None, Arc::new(ManualClock::new(0)), settings, 0);
        for i in 0..50 {
            s.sample("b", &format!("u{i}"), &RawContext::new()).unwrap();
        }
        assert_eq!(s.cached_sessions(), 10);
    }

    #[test]
    fn exp3_impressions_carry_propensity() {
        let (_, _, s, events) = setup(Algorithm::Exp3);
        s.sample("b", "u", &ctx(0.0)).unwrap();
        let (imps, _) = events.get("b").unwrap().snapshot();
        assert!((imps[0].propensity.unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn exploit_path_latency_within_budget() {
        let (store, _, s, _) = setup(Algorithm::LinearTs);
        store.freeze("b").unwrap();
        let budget = store.get_config("b").unwrap().hyperparameters.latency_budget as f64;
        let mut times: Vec<f64> = (0..5000)
            .map(|i| {
                let t = Instant::now();
                s.sample("b", &format!("u{i}"), &ctx((i % 3) as f64)).unwrap();
                t.elapsed().as_secs_f64() * 1e3
            })
            .collect();
        times.sort_by(f64::total_cmp);
        assert!(times[times.len() * 99 / 100] <= budget);
    }
}
