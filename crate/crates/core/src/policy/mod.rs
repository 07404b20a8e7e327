//! Policy state and dispatch.
//!
//! [`PolicyState`] is the versioned learned state persisted by the store.
//! [`select`] turns a state plus an encoded context into a [`Selection`];
//! [`update_batch`] folds training examples into a state.
//!
//! Explicit arm spaces keep one model per arm. Slotted spaces under the
//! linear and multi-objective policies keep one shared model over
//! `context ⊗ slot-option` features, so the score of an assignment is a sum of
//! per-slot terms and greedy search can pick the best arm without enumerating
//! the product.

pub mod linear;
pub mod mab;
pub mod structured;

use std::collections::HashMap;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{
    enumerate_arms, parse_slotted_arm, slotted_arm_id, Algorithm, ArmSpace, BanditConfig, RewardSpec, Slot,
};
use crate::context::encoded_dim;
use crate::events::{ArmChoice, TrainingExample};
use crate::linalg::{argmax, dot};

use linear::{igw_distribution, igw_gamma, BlrState, LinearModel, RlsState};
use mab::{BetaState, EgState, Exp3State};
use structured::{greedy_search, ggi_scalarize, CascadeState, GgiWeights, GreedySearchBudget};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("empty arm set")]
    EmptyArmSet,
    #[error("unknown arm index {0}")]
    UnknownArm(usize),
    #[error("unknown arm id {0:?}")]
    UnknownArmId(String),
    #[error("reward {0} is not binary")]
    NonBinaryReward(f64),
    #[error("label {0} is not binary")]
    NonBinaryLabel(f64),
    #[error("sampling probability must be > 0")]
    ZeroProbability,
    #[error("example carries no sampling probability")]
    MissingPropensity,
    #[error("reward {0} outside [0, 1]")]
    RewardOutOfRange(f64),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("non-finite input")]
    NonFiniteInput,
    #[error("non-finite score")]
    NonFiniteScore,
    #[error("empty batch")]
    EmptyBatch,
    #[error("mode search did not converge after {iterations} iterations")]
    NoConvergence { iterations: usize },
    #[error("k = {k} exceeds item count {items}")]
    KTooLarge { k: usize, items: usize },
    #[error("click position {position} outside ranking of length {shown}")]
    PositionOutOfRange { position: usize, shown: usize },
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("GGI weights must be positive and nonincreasing")]
    InvalidWeights,
    #[error("example shape does not fit the policy: {0}")]
    WrongChoiceShape(&'static str),
    #[error("stored state does not match the bandit config: {0}")]
    Integrity(String),
    #[error("arm space is not enumerable")]
    NotEnumerable,
}

/// Draws an index from a probability vector.
pub fn sample_index<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &pi) in p.iter().enumerate() {
        if pi > 0.0 {
            last_positive = i;
        }
        acc += pi;
        if u < acc {
            return i;
        }
    }
    last_positive
}

// ── Arm catalog ─────────────────────────────────────────────────────────

/// Resolved arm space: ids, index lookup and slot structure.
#[derive(Debug, Clone)]
pub struct ArmCatalog {
    slots: Option<Vec<Slot>>,
    ids: Option<Vec<String>>,
    index: HashMap<String, usize>,
    total: u64,
}

impl ArmCatalog {
    pub fn new(space: &ArmSpace) -> Self {
        let ids = enumerate_arms(space).ok();
        let index = ids
            .as_ref()
            .map(|ids| ids.iter().enumerate().map(|(i, a)| (a.clone(), i)).collect())
            .unwrap_or_default();
        let slots = match space {
            ArmSpace::Slotted { slots } => Some(slots.clone()),
            ArmSpace::Explicit { .. } => None,
        };
        Self {
            slots,
            ids,
            index,
            total: space.total(),
        }
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn ids(&self) -> Option<&[String]> {
        self.ids.as_deref()
    }

    pub fn slots(&self) -> Option<&[Slot]> {
        self.slots.as_deref()
    }

    pub fn index_of(&self, arm: &str) -> Option<usize> {
        self.index.get(arm).copied()
    }

    pub fn id(&self, i: usize) -> Option<&str> {
        self.ids.as_ref().and_then(|ids| ids.get(i)).map(String::as_str)
    }

    pub fn contains(&self, arm: &str) -> bool {
        if self.ids.is_some() {
            self.index.contains_key(arm)
        } else {
            self.assignment_of(arm).is_some()
        }
    }

    pub fn assignment_of(&self, arm: &str) -> Option<Vec<usize>> {
        parse_slotted_arm(self.slots.as_ref()?, arm)
    }

    fn enumerated(&self) -> Result<&[String], PolicyError> {
        self.ids.as_deref().ok_or(PolicyError::NotEnumerable)
    }
}

// ── Policy state ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layout {
    PerArm,
    /// One model over `context ⊗ slot-option` features.
    SharedSlotted,
}

const SHARED_UNIT: &str = "shared";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearPolicy {
    pub layout: Layout,
    /// Context dimension before any slot expansion.
    pub context_dim: usize,
    pub model: LinearModel,
    /// Applied training batches; drives the IGW schedule.
    pub batches: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiObjectivePolicy {
    pub layout: Layout,
    pub context_dim: usize,
    pub objectives: Vec<RlsState>,
    pub batches: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", content = "params")]
pub enum PolicyState {
    EpsilonGreedy(EgState),
    ThompsonBernoulli(BetaState),
    Exp3(Exp3State),
    Linear(LinearPolicy),
    Cascade(CascadeState),
    MultiObjective(MultiObjectivePolicy),
}

fn model_dim(layout: Layout, context_dim: usize, slots: Option<&[Slot]>) -> usize {
    match (layout, slots) {
        (Layout::SharedSlotted, Some(slots)) => {
            context_dim * slots.iter().map(|s| s.options.len()).sum::<usize>()
        }
        _ => context_dim,
    }
}

impl PolicyState {
    /// Prior state for a validated config.
    pub fn initial(config: &BanditConfig) -> Result<Self, PolicyError> {
        let catalog = ArmCatalog::new(&config.arm_space);
        let hp = &config.hyperparameters;
        let d = encoded_dim(&config.context_schema);
        let shared = config.arm_space.is_slotted();
        let layout = if shared { Layout::SharedSlotted } else { Layout::PerArm };
        let unit_ids: Vec<String> = if shared {
            vec![SHARED_UNIT.to_string()]
        } else {
            catalog.enumerated()?.to_vec()
        };
        let dim = model_dim(layout, d, catalog.slots());
        Ok(match config.algorithm {
            Algorithm::EpsilonGreedy => PolicyState::EpsilonGreedy(EgState::new(catalog.enumerated()?)),
            Algorithm::ThompsonBernoulli => PolicyState::ThompsonBernoulli(BetaState::new(catalog.enumerated()?)),
            Algorithm::Exp3 => PolicyState::Exp3(Exp3State::new(catalog.enumerated()?)),
            Algorithm::CascadeTs => PolicyState::Cascade(CascadeState::new(catalog.enumerated()?)),
            Algorithm::LinearTs | Algorithm::LinearEg | Algorithm::LinearIgw => {
                let model = match config.reward_spec {
                    RewardSpec::Binary => LinearModel::Blr(BlrState::new(&unit_ids, dim, hp.prior_variance)),
                    _ => LinearModel::Rls(RlsState::new(&unit_ids, dim, hp.prior_variance)),
                };
                PolicyState::Linear(LinearPolicy {
                    layout,
                    context_dim: d,
                    model,
                    batches: 0,
                })
            }
            Algorithm::MultiObjectiveGgi => PolicyState::MultiObjective(MultiObjectivePolicy {
                layout,
                context_dim: d,
                objectives: (0..config.reward_spec.len())
                    .map(|_| RlsState::new(&unit_ids, dim, hp.prior_variance))
                    .collect(),
                batches: 0,
            }),
        })
    }

    pub fn family(&self) -> &'static str {
        match self {
            PolicyState::EpsilonGreedy(_) => "EpsilonGreedy",
            PolicyState::ThompsonBernoulli(_) => "ThompsonBernoulli",
            PolicyState::Exp3(_) => "Exp3",
            PolicyState::Linear(_) => "Linear",
            PolicyState::Cascade(_) => "Cascade",
            PolicyState::MultiObjective(_) => "MultiObjective",
        }
    }

    pub fn matches(&self, algorithm: Algorithm) -> bool {
        matches!(
            (self, algorithm),
            (PolicyState::EpsilonGreedy(_), Algorithm::EpsilonGreedy)
                | (PolicyState::ThompsonBernoulli(_), Algorithm::ThompsonBernoulli)
                | (PolicyState::Exp3(_), Algorithm::Exp3)
                | (PolicyState::Cascade(_), Algorithm::CascadeTs)
                | (PolicyState::MultiObjective(_), Algorithm::MultiObjectiveGgi)
                | (
                    PolicyState::Linear(_),
                    Algorithm::LinearTs | Algorithm::LinearEg | Algorithm::LinearIgw
                )
        )
    }

    /// Checks arm ordering and dimensions against the config after a load.
    pub fn check_integrity(&self, config: &BanditConfig) -> Result<(), PolicyError> {
        if !self.matches(config.algorithm) {
            return Err(PolicyError::Integrity(format!(
                "state family {} does not serve {}",
                self.family(),
                config.algorithm
            )));
        }
        let expected = PolicyState::initial(config)?;
        let shape_ok = match (self, &expected) {
            (PolicyState::EpsilonGreedy(a), PolicyState::EpsilonGreedy(b)) => {
                a.arms.iter().map(|x| &x.arm).eq(b.arms.iter().map(|x| &x.arm))
            }
            (PolicyState::ThompsonBernoulli(a), PolicyState::ThompsonBernoulli(b)) => {
                a.arms.iter().map(|x| &x.arm).eq(b.arms.iter().map(|x| &x.arm))
            }
            (PolicyState::Exp3(a), PolicyState::Exp3(b)) => {
                a.arms.iter().map(|x| &x.arm).eq(b.arms.iter().map(|x| &x.arm))
            }
            (PolicyState::Cascade(a), PolicyState::Cascade(b)) => {
                a.items.iter().map(|x| &x.arm).eq(b.items.iter().map(|x| &x.arm))
            }
            (PolicyState::Linear(a), PolicyState::Linear(b)) => {
                a.layout == b.layout
                    && a.model.dim() == b.model.dim()
                    && a.model.unit_ids() == b.model.unit_ids()
                    && std::mem::discriminant(&a.model) == std::mem::discriminant(&b.model)
            }
            (PolicyState::MultiObjective(a), PolicyState::MultiObjective(b)) => {
                a.layout == b.layout
                    && a.objectives.len() == b.objectives.len()
                    && a.objectives.iter().zip(&b.objectives).all(|(x, y)| {
                        x.dim == y.dim && x.arms.iter().map(|u| &u.arm).eq(y.arms.iter().map(|u| &u.arm))
                    })
            }
            _ => false,
        };
        if shape_ok {
            Ok(())
        } else {
            Err(PolicyError::Integrity("arm ordering or dimension differs".into()))
        }
    }
}

// ── Selection ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Explore,
    /// Frozen bandits: posterior-mean argmax, no exploration.
    Exploit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub choice: ArmChoice,
    pub propensity: Option<f64>,
}

impl Selection {
    fn single(id: &str, propensity: Option<f64>) -> Self {
        Self {
            choice: ArmChoice::Single(id.to_string()),
            propensity,
        }
    }
}

fn budget(config: &BanditConfig) -> GreedySearchBudget {
    GreedySearchBudget::new(
        config.hyperparameters.greedy_passes,
        Duration::from_millis(config.hyperparameters.latency_budget),
    )
}

/// Slotted feature map: the context copied into the block of each chosen option.
pub fn slotted_features(slots: &[Slot], x: &[f64], assignment: &[usize]) -> Vec<f64> {
    let d = x.len();
    let total: usize = slots.iter().map(|s| s.options.len()).sum();
    let mut phi = vec![0.0; d * total];
    let mut offset = 0;
    for (slot, &o) in slots.iter().zip(assignment) {
        let start = (offset + o) * d;
        phi[start..start + d].copy_from_slice(x);
        offset += slot.options.len();
    }
    phi
}

/// Per-slot, per-option score contributions `wᵀφ` decomposes into.
fn slot_table(slots: &[Slot], w: &[f64], x: &[f64]) -> Vec<Vec<f64>> {
    let d = x.len();
    let mut offset = 0;
    slots
        .iter()
        .map(|slot| {
            let row = (0..slot.options.len())
                .map(|o| {
                    let start = (offset + o) * d;
                    dot(&w[start..start + d], x)
                })
                .collect();
            offset += slot.options.len();
            row
        })
        .collect()
}

fn table_score(table: &[Vec<f64>], assignment: &[usize]) -> f64 {
    table.iter().zip(assignment).map(|(row, &o)| row[o]).sum()
}

fn random_assignment<R: Rng + ?Sized>(slots: &[Slot], rng: &mut R) -> Vec<usize> {
    slots.iter().map(|s| rng.random_range(0..s.options.len())).collect()
}

/// Picks the served arm (or ranking) for one request.
pub fn select<R: Rng + ?Sized>(
    config: &BanditConfig,
    catalog: &ArmCatalog,
    state: &PolicyState,
    x: &[f64],
    mode: Mode,
    rng: &mut R,
) -> Result<Selection, PolicyError> {
    let hp = &config.hyperparameters;
    let id = |i: usize| catalog.id(i).ok_or(PolicyError::UnknownArm(i));
    match state {
        PolicyState::EpsilonGreedy(s) => {
            let eps = if mode == Mode::Exploit { 0.0 } else { hp.epsilon };
            let arm = s.sample(eps, rng)?;
            Ok(Selection::single(id(arm)?, Some(s.propensity(eps, arm)?)))
        }
        PolicyState::ThompsonBernoulli(s) => {
            let arm = match mode {
                Mode::Explore => s.sample(rng)?,
                Mode::Exploit => s.exploit()?,
            };
            Ok(Selection::single(id(arm)?, None))
        }
        PolicyState::Exp3(s) => match mode {
            Mode::Explore => {
                let (arm, p) = s.sample(hp.exp3_gamma, rng)?;
                Ok(Selection::single(id(arm)?, Some(p)))
            }
            Mode::Exploit => Ok(Selection::single(id(s.exploit()?)?, Some(1.0))),
        },
        PolicyState::Cascade(s) => {
            let ranked = match mode {
                Mode::Explore => s.sample(hp.ranking_k, rng)?,
                Mode::Exploit => s.exploit(hp.ranking_k)?,
            };
            let ids = ranked
                .into_iter()
                .map(|i| id(i).map(str::to_string))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Selection {
                choice: ArmChoice::Ranking(ids),
                propensity: None,
            })
        }
        PolicyState::Linear(p) => select_linear(config, catalog, p, x, mode, rng),
        PolicyState::MultiObjective(p) => select_ggi(config, catalog, p, x, mode, rng),
    }
}

fn check_context(expected: usize, x: &[f64]) -> Result<(), PolicyError> {
    if x.len() != expected {
        return Err(PolicyError::DimensionMismatch {
            expected,
            actual: x.len(),
        });
    }
    Ok(())
}

fn select_linear<R: Rng + ?Sized>(
    config: &BanditConfig,
    catalog: &ArmCatalog,
    policy: &LinearPolicy,
    x: &[f64],
    mode: Mode,
    rng: &mut R,
) -> Result<Selection, PolicyError> {
    check_context(policy.context_dim, x)?;
    let hp = &config.hyperparameters;
    let model = &policy.model;
    let algorithm = match mode {
        Mode::Explore => config.algorithm,
        Mode::Exploit => Algorithm::LinearEg,
    };
    let epsilon = if mode == Mode::Exploit { 0.0 } else { hp.epsilon };

    match policy.layout {
        Layout::PerArm => {
            let k = model.units();
            let id = |i: usize| catalog.id(i).ok_or(PolicyError::UnknownArm(i));
            match algorithm {
                Algorithm::LinearTs => {
                    let arm = linear::linear_ts_sample(model, x, rng)?;
                    Ok(Selection::single(id(arm)?, None))
                }
                Algorithm::LinearIgw => {
                    let scores = (0..k)
                        .map(|a| model.mean_reward(a, x))
                        .collect::<Result<Vec<_>, _>>()?;
                    let p = igw_distribution(&scores, igw_gamma(hp.igw_gamma0, policy.batches))?;
                    let arm = sample_index(&p, rng);
                    Ok(Selection::single(id(arm)?, Some(p[arm])))
                }
                _ => {
                    let scores = (0..k)
                        .map(|a| model.mean_score(a, x))
                        .collect::<Result<Vec<_>, _>>()?;
                    let greedy = argmax(&scores).ok_or(PolicyError::EmptyArmSet)?;
                    let explore = epsilon > 0.0 && rng.random::<f64>() < epsilon;
                    let arm = if explore { rng.random_range(0..k) } else { greedy };
                    let base = epsilon / k as f64;
                    let p = if arm == greedy { 1.0 - epsilon + base } else { base };
                    Ok(Selection::single(id(arm)?, Some(p)))
                }
            }
        }
        Layout::SharedSlotted => {
            let slots = catalog.slots().ok_or(PolicyError::NotEnumerable)?;
            match algorithm {
                Algorithm::LinearIgw => {
                    let ids = catalog.enumerated()?;
                    let table_w = model.mean_weights(0)?;
                    let scores = ids
                        .iter()
                        .map(|a| {
                            let phi = slotted_features(slots, x, &catalog.assignment_of(a).expect("enumerated id"));
                            match model {
                                LinearModel::Rls(_) => dot(table_w, &phi),
                                LinearModel::Blr(_) => crate::linalg::sigmoid(dot(table_w, &phi)),
                            }
                        })
                        .collect::<Vec<_>>();
                    let p = igw_distribution(&scores, igw_gamma(hp.igw_gamma0, policy.batches))?;
                    let arm = sample_index(&p, rng);
                    Ok(Selection::single(&ids[arm], Some(p[arm])))
                }
                Algorithm::LinearTs => {
                    let w = model.sample_weights(0, rng)?;
                    let table = slot_table(slots, &w, x);
                    let out = greedy_search(slots, &budget(config), |a| table_score(&table, a));
                    Ok(Selection::single(&out.arm_id, None))
                }
                _ => {
                    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
                        let a = random_assignment(slots, rng);
                        return Ok(Selection::single(&slotted_arm_id(slots, &a), None));
                    }
                    let table = slot_table(slots, model.mean_weights(0)?, x);
                    let out = greedy_search(slots, &budget(config), |a| table_score(&table, a));
                    Ok(Selection::single(&out.arm_id, None))
                }
            }
        }
    }
}

fn select_ggi<R: Rng + ?Sized>(
    config: &BanditConfig,
    catalog: &ArmCatalog,
    policy: &MultiObjectivePolicy,
    x: &[f64],
    mode: Mode,
    rng: &mut R,
) -> Result<Selection, PolicyError> {
    check_context(policy.context_dim, x)?;
    let weights = GgiWeights::new(&config.hyperparameters.ggi_weights)?;
    let objectives: Vec<LinearModel> = policy.objectives.iter().cloned().map(LinearModel::Rls).collect();
    match policy.layout {
        Layout::PerArm => {
            let arm = match mode {
                Mode::Explore => structured::ggi_ts_sample(&objectives, x, &weights, rng)?,
                Mode::Exploit => {
                    let k = objectives.first().map(LinearModel::units).unwrap_or(0);
                    let mut values = Vec::with_capacity(k);
                    for a in 0..k {
                        let v = objectives
                            .iter()
                            .map(|o| o.mean_reward(a, x))
                            .collect::<Result<Vec<_>, _>>()?;
                        values.push(ggi_scalarize(&v, &weights)?);
                    }
                    argmax(&values).ok_or(PolicyError::EmptyArmSet)?
                }
            };
            Ok(Selection::single(catalog.id(arm).ok_or(PolicyError::UnknownArm(arm))?, None))
        }
        Layout::SharedSlotted => {
            let slots = catalog.slots().ok_or(PolicyError::NotEnumerable)?;
            let tables = objectives
                .iter()
                .map(|o| {
                    let w = match mode {
                        Mode::Explore => o.sample_weights(0, rng)?,
                        Mode::Exploit => o.mean_weights(0)?.to_vec(),
                    };
                    Ok(slot_table(slots, &w, x))
                })
                .collect::<Result<Vec<_>, PolicyError>>()?;
            let mut buf = vec![0.0; tables.len()];
            let out = greedy_search(slots, &budget(config), |a| {
                for (b, t) in buf.iter_mut().zip(&tables) {
                    *b = table_score(t, a);
                }
                ggi_scalarize(&buf, &weights).unwrap_or(f64::NEG_INFINITY)
            });
            Ok(Selection::single(&out.arm_id, None))
        }
    }
}

// ── Updates ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Default, PartialEq)]
pub struct UpdateStats {
    pub applied: usize,
    /// Index into the batch and the reason the example was skipped.
    pub poisoned: Vec<(usize, PolicyError)>,
}

fn single_arm<'a>(ex: &'a TrainingExample) -> Result<&'a str, PolicyError> {
    ex.arm.single().ok_or(PolicyError::WrongChoiceShape("expected a single arm"))
}

fn scalar_reward(ex: &TrainingExample) -> Result<f64, PolicyError> {
    match ex.reward.as_slice() {
        [r] if r.is_finite() => Ok(*r),
        [_] => Err(PolicyError::NonFiniteInput),
        other => Err(PolicyError::LengthMismatch {
            expected: 1,
            actual: other.len(),
        }),
    }
}

fn enumerated_index(catalog: &ArmCatalog, arm: &str) -> Result<usize, PolicyError> {
    catalog
        .index_of(arm)
        .ok_or_else(|| PolicyError::UnknownArmId(arm.to_string()))
}

/// Model unit index and feature vector for a linear example.
fn linear_row(
    layout: Layout,
    context_dim: usize,
    catalog: &ArmCatalog,
    ex: &TrainingExample,
) -> Result<(usize, Vec<f64>), PolicyError> {
    check_context(context_dim, &ex.context)?;
    let arm = single_arm(ex)?;
    match layout {
        Layout::PerArm => Ok((enumerated_index(catalog, arm)?, ex.context.clone())),
        Layout::SharedSlotted => {
            let slots = catalog.slots().ok_or(PolicyError::NotEnumerable)?;
            let a = catalog
                .assignment_of(arm)
                .ok_or_else(|| PolicyError::UnknownArmId(arm.to_string()))?;
            Ok((0, slotted_features(slots, &ex.context, &a)))
        }
    }
}

/// Folds a batch of examples into `state` in list order.
///
/// Invalid examples are skipped and reported; the rest still apply. Logistic
/// posteriors take one Laplace update per arm over all of that arm's examples.
pub fn update_batch(
    state: &mut PolicyState,
    config: &BanditConfig,
    catalog: &ArmCatalog,
    examples: &[TrainingExample],
) -> UpdateStats {
    let mut stats = UpdateStats::default();
    let hp = &config.hyperparameters;
    let per_example = |i: usize, r: Result<(), PolicyError>, stats: &mut UpdateStats| match r {
        Ok(()) => stats.applied += 1,
        Err(e) => stats.poisoned.push((i, e)),
    };

    match state {
        PolicyState::EpsilonGreedy(s) => {
            for (i, ex) in examples.iter().enumerate() {
                let r = (|| {
                    let arm = enumerated_index(catalog, single_arm(ex)?)?;
                    s.update(arm, scalar_reward(ex)?)
                })();
                per_example(i, r, &mut stats);
            }
        }
        PolicyState::ThompsonBernoulli(s) => {
            for (i, ex) in examples.iter().enumerate() {
                let r = (|| {
                    let arm = enumerated_index(catalog, single_arm(ex)?)?;
                    s.update(arm, scalar_reward(ex)?)
                })();
                per_example(i, r, &mut stats);
            }
        }
        PolicyState::Exp3(s) => {
            for (i, ex) in examples.iter().enumerate() {
                let r = (|| {
                    let arm = enumerated_index(catalog, single_arm(ex)?)?;
                    let p = ex.propensity.ok_or(PolicyError::MissingPropensity)?;
                    s.update(arm, scalar_reward(ex)?, p, hp.exp3_gamma)
                })();
                per_example(i, r, &mut stats);
            }
        }
        PolicyState::Cascade(s) => {
            for (i, ex) in examples.iter().enumerate() {
                let r = (|| {
                    let ArmChoice::Ranking(shown) = &ex.arm else {
                        return Err(PolicyError::WrongChoiceShape("expected a ranking"));
                    };
                    let reward = scalar_reward(ex)?;
                    if reward != 0.0 && reward != 1.0 {
                        return Err(PolicyError::NonBinaryReward(reward));
                    }
                    if reward == 1.0 && ex.click_position.is_none() {
                        return Err(PolicyError::WrongChoiceShape("click without position"));
                    }
                    let idx = shown
                        .iter()
                        .map(|a| enumerated_index(catalog, a))
                        .collect::<Result<Vec<_>, _>>()?;
                    s.update(&idx, ex.click_position)
                })();
                per_example(i, r, &mut stats);
            }
        }
        PolicyState::Linear(p) => {
            let (layout, context_dim) = (p.layout, p.context_dim);
            match &mut p.model {
                LinearModel::Rls(s) => {
                    for (i, ex) in examples.iter().enumerate() {
                        let r = (|| {
                            let (unit, phi) = linear_row(layout, context_dim, catalog, ex)?;
                            s.update(unit, &phi, scalar_reward(ex)?)
                        })();
                        per_example(i, r, &mut stats);
                    }
                }
                LinearModel::Blr(s) => {
                    let mut groups: Vec<(usize, Vec<(usize, Vec<f64>, f64)>)> = Vec::new();
                    for (i, ex) in examples.iter().enumerate() {
                        let row = (|| {
                            let (unit, phi) = linear_row(layout, context_dim, catalog, ex)?;
                            let y = scalar_reward(ex)?;
                            if y != 0.0 && y != 1.0 {
                                return Err(PolicyError::NonBinaryLabel(y));
                            }
                            Ok((unit, phi, y))
                        })();
                        match row {
                            Ok((unit, phi, y)) => match groups.iter_mut().find(|(u, _)| *u == unit) {
                                Some((_, rows)) => rows.push((i, phi, y)),
                                None => groups.push((unit, vec![(i, phi, y)])),
                            },
                            Err(e) => stats.poisoned.push((i, e)),
                        }
                    }
                    for (unit, rows) in groups {
                        let batch: Vec<(&[f64], f64)> = rows.iter().map(|(_, x, y)| (x.as_slice(), *y)).collect();
                        match s.update(unit, &batch) {
                            Ok(_) => stats.applied += rows.len(),
                            Err(e) => stats.poisoned.extend(rows.iter().map(|(i, _, _)| (*i, e.clone()))),
                        }
                    }
                    stats.poisoned.sort_by_key(|(i, _)| *i);
                }
            }
            p.batches += 1;
        }
        PolicyState::MultiObjective(p) => {
            let k = p.objectives.len();
            for (i, ex) in examples.iter().enumerate() {
                let r = (|| {
                    let (unit, phi) = linear_row(p.layout, p.context_dim, catalog, ex)?;
                    if ex.reward.len() != k {
                        return Err(PolicyError::LengthMismatch {
                            expected: k,
                            actual: ex.reward.len(),
                        });
                    }
                    if ex.reward.iter().any(|v| !v.is_finite()) {
                        return Err(PolicyError::NonFiniteInput);
                    }
                    for (o, &y) in p.objectives.iter_mut().zip(&ex.reward) {
                        o.update(unit, &phi, y)?;
                    }
                    Ok(())
                })();
                per_example(i, r, &mut stats);
            }
            p.batches += 1;
        }
    }
    stats
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{FeatureSpec, Slot};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn example(arm: &str, reward: f64) -> TrainingExample {
        TrainingExample {
            request_id: "r".into(),
            context: vec![1.0],
            arm: ArmChoice::Single(arm.into()),
            reward: vec![reward],
            click_position: None,
            propensity: None,
            defaulted: false,
        }
    }

    fn slotted_config(alg: Algorithm, reward: RewardSpec) -> BanditConfig {
        let slots = (0..3)
            .map(|i| Slot {
                slot_name: format!("s{i}"),
                options: (0..4).map(|o| format!("o{o}")).collect(),
            })
            .collect();
        let mut c = BanditConfig::new("s", alg, ArmSpace::Slotted { slots }, reward);
        c.context_schema = vec![FeatureSpec::categorical("seg", 2)];
        c
    }

    #[test]
    fn initial_states_match_their_algorithm() {
        for alg in [
            Algorithm::EpsilonGreedy,
            Algorithm::ThompsonBernoulli,
            Algorithm::Exp3,
            Algorithm::LinearTs,
            Algorithm::LinearEg,
            Algorithm::LinearIgw,
        ] {
            let c = BanditConfig::new("b", alg, ArmSpace::explicit(["a", "b"]), RewardSpec::Binary);
            let s = PolicyState::initial(&c).unwrap();
            assert!(s.matches(alg));
            s.check_integrity(&c).unwrap();
        }
        let c = BanditConfig::new("b", Algorithm::LinearTs, ArmSpace::explicit(["a", "b"]), RewardSpec::Binary);
        let mut other = c.clone();
        other.arm_space = ArmSpace::explicit(["b", "a"]);
        assert!(PolicyState::initial(&other).unwrap().check_integrity(&c).is_err());
    }

    #[test]
    fn shared_slotted_model_dimension() {
        let c = slotted_config(Algorithm::LinearTs, RewardSpec::Continuous);
        let PolicyState::Linear(p) = PolicyState::initial(&c).unwrap() else { panic!() };
        assert_eq!(p.layout, Layout::SharedSlotted);
        assert_eq!(p.model.dim(), 3 * 12);
        assert_eq!(p.model.units(), 1);
    }

    #[test]
    fn slotted_linear_learns_additive_best_arm() {
        let c = slotted_config(Algorithm::LinearEg, RewardSpec::Continuous);
        let catalog = ArmCatalog::new(&c.arm_space);
        let mut state = PolicyState::initial(&c).unwrap();
        // true reward: slot s gets 1.0 for option s+1, in segment 0
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut examples = Vec::new();
        for _ in 0..2000 {
            let a: Vec<usize> = (0..3).map(|_| rng.random_range(0..4)).collect();
            let y: f64 = a.iter().enumerate().map(|(s, &o)| if o == s + 1 { 1.0 } else { 0.0 }).sum();
            let slots = catalog.slots().unwrap();
            examples.push(TrainingExample {
                context: vec![1.0, 1.0, 0.0],
                ..example(&slotted_arm_id(slots, &a), y)
            });
        }
        let stats = update_batch(&mut state, &c, &catalog, &examples);
        assert_eq!(stats.applied, 2000);
        let sel = select(&c, &catalog, &state, &[1.0, 1.0, 0.0], Mode::Exploit, &mut rng).unwrap();
        assert_eq!(sel.choice, ArmChoice::Single("o1/o2/o3".into()));
    }

    #[test]
    fn frozen_selection_is_posterior_mean_argmax() {
        let c = BanditConfig::new(
            "b",
            Algorithm::ThompsonBernoulli,
            ArmSpace::explicit(["a", "b"]),
            RewardSpec::Binary,
        );
        let catalog = ArmCatalog::new(&c.arm_space);
        let state = PolicyState::ThompsonBernoulli(BetaState {
            arms: vec![
                mab::BetaArm { arm: "a".into(), alpha: 2.0, beta: 8.0 },
                mab::BetaArm { arm: "b".into(), alpha: 7.0, beta: 3.0 },
            ],
        });
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let s = select(&c, &catalog, &state, &[1.0], Mode::Exploit, &mut rng).unwrap();
            assert_eq!(s.choice, ArmChoice::Single("b".into()));
        }
    }

    #[test]
    fn poisoned_examples_are_skipped() {
        let c = BanditConfig::new(
            "b",
            Algorithm::ThompsonBernoulli,
            ArmSpace::explicit(["a", "b"]),
            RewardSpec::Binary,
        );
        let catalog = ArmCatalog::new(&c.arm_space);
        let mut state = PolicyState::initial(&c).unwrap();
        let mut ex: Vec<_> = (0..9).map(|_| example("a", 1.0)).collect();
        ex.insert(4, example("a", 0.5));
        let stats = update_batch(&mut state, &c, &catalog, &ex);
        assert_eq!(stats.applied, 9);
        assert_eq!(stats.poisoned, vec![(4, PolicyError::NonBinaryReward(0.5))]);
    }

    #[test]
    fn exp3_needs_propensity() {
        let c = BanditConfig::new("b", Algorithm::Exp3, ArmSpace::explicit(["a", "b"]), RewardSpec::Binary);
        let catalog = ArmCatalog::new(&c.arm_space);
        let mut state = PolicyState::initial(&c).unwrap();
        let stats = update_batch(&mut state, &c, &catalog, &[example("a", 1.0)]);
        assert_eq!(stats.poisoned, vec![(0, PolicyError::MissingPropensity)]);
    }

    #[test]
    fn ggi_slotted_selection_runs() {
        let mut c = slotted_config(Algorithm::MultiObjectiveGgi, RewardSpec::MultiObjective { k: 2 });
        c.hyperparameters.ggi_weights = vec![0.6, 0.4];
        let catalog = ArmCatalog::new(&c.arm_space);
        let state = PolicyState::initial(&c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = select(&c, &catalog, &state, &[1.0, 0.0, 1.0], Mode::Explore, &mut rng).unwrap();
        assert!(catalog.contains(s.choice.single().unwrap()));
    }

    #[test]
    fn state_json_is_keyed_by_arm() {
        let c = BanditConfig::new(
            "b",
            Algorithm::ThompsonBernoulli,
            ArmSpace::explicit(["a", "b"]),
            RewardSpec::Binary,
        );
        let json = serde_json::to_value(PolicyState::initial(&c).unwrap()).unwrap();
        assert_eq!(json["family"], "ThompsonBernoulli");
        assert_eq!(json["params"]["arms"][1]["arm"], "b");
        let back: PolicyState = serde_json::from_value(json).unwrap();
        back.check_integrity(&c).unwrap();
    }
}
