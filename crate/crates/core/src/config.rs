//! Bandit configuration model.
//!
//! A [`BanditConfig`] is the payload of the self-serve configuration API and
//! of `adaptex create-bandit`. It serializes to JSON with snake_case field
//! names; enums use serde's external tagging, for example
//! `{"MultiObjective": {"k": 2}}` or `{"Explicit": {"arm_ids": ["a", "b"]}}`.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Maximum number of arms [`enumerate_arms`] will materialize.
pub const ENUMERATION_CAP: u64 = 1_000_000;

/// Separator between slot options in a slotted arm id.
pub const SLOT_SEPARATOR: char = '/';

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    EpsilonGreedy,
    ThompsonBernoulli,
    Exp3,
    #[serde(rename = "LinearTS")]
    LinearTs,
    #[serde(rename = "LinearEG")]
    LinearEg,
    #[serde(rename = "LinearIGW")]
    LinearIgw,
    #[serde(rename = "CascadeTS")]
    CascadeTs,
    #[serde(rename = "MultiObjectiveGGI")]
    MultiObjectiveGgi,
}

impl Algorithm {
    pub fn is_linear(self) -> bool {
        matches!(self, Algorithm::LinearTs | Algorithm::LinearEg | Algorithm::LinearIgw)
    }

    /// Policies that keep one parameter record per enumerated arm.
    pub fn needs_enumeration(self) -> bool {
        matches!(
            self,
            Algorithm::EpsilonGreedy
                | Algorithm::ThompsonBernoulli
                | Algorithm::Exp3
                | Algorithm::CascadeTs
                | Algorithm::LinearIgw
        )
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Algorithm::EpsilonGreedy => "EpsilonGreedy",
            Algorithm::ThompsonBernoulli => "ThompsonBernoulli",
            Algorithm::Exp3 => "Exp3",
            Algorithm::LinearTs => "LinearTS",
            Algorithm::LinearEg => "LinearEG",
            Algorithm::LinearIgw => "LinearIGW",
            Algorithm::CascadeTs => "CascadeTS",
            Algorithm::MultiObjectiveGgi => "MultiObjectiveGGI",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub slot_name: String,
    pub options: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArmSpace {
    Explicit { arm_ids: Vec<String> },
    Slotted { slots: Vec<Slot> },
}

impl ArmSpace {
    pub fn explicit<I, S>(ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ArmSpace::Explicit {
            arm_ids: ids.into_iter().map(Into::into).collect(),
        }
    }

    /// Total number of arms; saturates at `u64::MAX` for absurd slotted spaces.
    pub fn total(&self) -> u64 {
        match self {
            ArmSpace::Explicit { arm_ids } => arm_ids.len() as u64,
            ArmSpace::Slotted { slots } => slots
                .iter()
                .fold(1u64, |acc, s| acc.saturating_mul(s.options.len() as u64)),
        }
    }

    pub fn is_slotted(&self) -> bool {
        matches!(self, ArmSpace::Slotted { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FeatureKind {
    Categorical { cardinality: usize },
    Numeric { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
}

impl FeatureSpec {
    pub fn categorical(name: impl Into<String>, cardinality: usize) -> Self {
        Self {
            name: name.into(),
            kind: FeatureKind::Categorical { cardinality },
        }
    }

    pub fn numeric(name: impl Into<String>, lo: f64, hi: f64) -> Self {
        Self {
            name: name.into(),
            kind: FeatureKind::Numeric { lo, hi },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RewardSpec {
    Binary,
    Continuous,
    MultiObjective { k: usize },
}

impl RewardSpec {
    /// Length of the reward vector carried by reward events.
    pub fn len(&self) -> usize {
        match self {
            RewardSpec::Binary | RewardSpec::Continuous => 1,
            RewardSpec::MultiObjective { k } => *k,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Status {
    #[default]
    Learning,
    Frozen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperParams {
    pub epsilon: f64,
    pub exp3_gamma: f64,
    pub prior_variance: f64,
    pub igw_gamma0: f64,
    pub ggi_weights: Vec<f64>,
    pub ranking_k: usize,
    pub greedy_passes: usize,
    /// Milliseconds.
    pub latency_budget: u64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            exp3_gamma: 0.1,
            prior_variance: 1.0,
            igw_gamma0: 10.0,
            ggi_weights: Vec::new(),
            ranking_k: 1,
            greedy_passes: 3,
            latency_budget: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BanditConfig {
    pub bandit_id: String,
    pub algorithm: Algorithm,
    pub arm_space: ArmSpace,
    #[serde(default)]
    pub context_schema: Vec<FeatureSpec>,
    pub reward_spec: RewardSpec,
    #[serde(default)]
    pub hyperparameters: HyperParams,
    /// Seconds.
    #[serde(default)]
    pub attribution_window: u64,
    #[serde(default)]
    pub status: Status,
}

impl BanditConfig {
    /// Minimal learning-status config with default hyperparameters.
    pub fn new(
        bandit_id: impl Into<String>,
        algorithm: Algorithm,
        arm_space: ArmSpace,
        reward_spec: RewardSpec,
    ) -> Self {
        Self {
            bandit_id: bandit_id.into(),
            algorithm,
            arm_space,
            context_schema: Vec::new(),
            reward_spec,
            hyperparameters: HyperParams::default(),
            attribution_window: 0,
            status: Status::Learning,
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.status == Status::Frozen
    }

    /// Attribution window in milliseconds.
    pub fn window_ms(&self) -> u64 {
        self.attribution_window.saturating_mul(1000)
    }
}

/// One violated configuration invariant.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Violation {
    EmptyBanditId,
    InvalidBanditId(String),
    TooFewArms(u64),
    DuplicateArm(String),
    EmptySlot(String),
    DuplicateSlotOption { slot: String, option: String },
    SlotOptionHasSeparator { slot: String, option: String },
    SpaceTooLargeForAlgorithm { algorithm: Algorithm, total: u64 },
    DuplicateFeature(String),
    ZeroCardinality(String),
    EmptyNumericRange(String),
    RewardMismatch { algorithm: Algorithm, required: &'static str },
    TooFewObjectives(usize),
    GgiWeightsLength { expected: usize, actual: usize },
    GgiWeightsNotPositive,
    GgiWeightsIncreasing,
    Epsilon(f64),
    Exp3Gamma(f64),
    PriorVariance(f64),
    IgwGamma0(f64),
    RankingK { k: usize, items: u64 },
    GreedyPasses,
    LatencyBudget,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyBanditId => write!(f, "bandit_id must be non-empty"),
            Violation::InvalidBanditId(id) => write!(
                f,
                "bandit_id {id:?} may only contain ASCII letters, digits, '-' and '_'"
            ),
            Violation::TooFewArms(n) => write!(f, "arm_space needs ≥ 2 arms (has {n})"),
            Violation::DuplicateArm(a) => write!(f, "duplicate arm id {a:?}"),
            Violation::EmptySlot(s) => write!(f, "slot {s:?} needs ≥ 1 option"),
            Violation::DuplicateSlotOption { slot, option } => {
                write!(f, "slot {slot:?} lists option {option:?} twice")
            }
            Violation::SlotOptionHasSeparator { slot, option } => write!(
                f,
                "slot {slot:?} option {option:?} must not contain '{SLOT_SEPARATOR}'"
            ),
            Violation::SpaceTooLargeForAlgorithm { algorithm, total } => write!(
                f,
                "{algorithm} needs an enumerable arm space (≤ {ENUMERATION_CAP} arms, has {total})"
            ),
            Violation::DuplicateFeature(n) => write!(f, "duplicate context feature {n:?}"),
            Violation::ZeroCardinality(n) => {
                write!(f, "categorical feature {n:?} needs cardinality ≥ 1")
            }
            Violation::EmptyNumericRange(n) => {
                write!(f, "numeric feature {n:?} needs finite lo < hi")
            }
            Violation::RewardMismatch {
                algorithm,
                required,
            } => write!(f, "{algorithm} requires {required} reward"),
            Violation::TooFewObjectives(k) => {
                write!(f, "MultiObjective reward needs k ≥ 2 (has {k})")
            }
            Violation::GgiWeightsLength { expected, actual } => write!(
                f,
                "ggi_weights must have length {expected} (has {actual})"
            ),
            Violation::GgiWeightsNotPositive => {
                write!(f, "ggi_weights must be finite and strictly positive")
            }
            Violation::GgiWeightsIncreasing => write!(f, "ggi_weights must be nonincreasing"),
            Violation::Epsilon(e) => write!(f, "epsilon must lie in [0, 1] (is {e})"),
            Violation::Exp3Gamma(g) => write!(f, "exp3_gamma must lie in (0, 1] (is {g})"),
            Violation::PriorVariance(v) => write!(f, "prior_variance must be > 0 (is {v})"),
            Violation::IgwGamma0(g) => write!(f, "igw_gamma0 must be > 0 (is {g})"),
            Violation::RankingK { k, items } => {
                write!(f, "ranking_k must lie in [1, {items}] (is {k})")
            }
            Violation::GreedyPasses => write!(f, "greedy_passes must be ≥ 1"),
            Violation::LatencyBudget => write!(f, "latency_budget must be ≥ 1 ms"),
        }
    }
}

/// The full list of violations found by [`validate_config`].
#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid bandit config: {}", join_violations(.0))]
pub struct Violations(pub Vec<Violation>);

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}

fn valid_id(id: &str) -> bool {
    id.chars()
        .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

/// Checks every config invariant and reports all violations, not just the first.
pub fn validate_config(config: &BanditConfig) -> Result<(), Violations> {
    let mut out = Vec::new();

    if config.bandit_id.is_empty() {
        out.push(Violation::EmptyBanditId);
    } else if !valid_id(&config.bandit_id) {
        // ids become file names
        out.push(Violation::InvalidBanditId(config.bandit_id.clone()));
    }

    match &config.arm_space {
        ArmSpace::Explicit { arm_ids } => {
            let mut seen = HashSet::new();
            for a in arm_ids {
                if !seen.insert(a.as_str()) {
                    out.push(Violation::DuplicateArm(a.clone()));
                }
            }
        }
        ArmSpace::Slotted { slots } => {
            for s in slots {
                if s.options.is_empty() {
                    out.push(Violation::EmptySlot(s.slot_name.clone()));
                }
                let mut seen = HashSet::new();
                for o in &s.options {
                    if !seen.insert(o.as_str()) {
                        out.push(Violation::DuplicateSlotOption {
                            slot: s.slot_name.clone(),
                            option: o.clone(),
                        });
                    }
                    if o.contains(SLOT_SEPARATOR) {
                        out.push(Violation::SlotOptionHasSeparator {
                            slot: s.slot_name.clone(),
                            option: o.clone(),
                        });
                    }
                }
            }
        }
    }
    let total = config.arm_space.total();
    if total < 2 {
        out.push(Violation::TooFewArms(total));
    }
    if config.arm_space.is_slotted() && config.algorithm.needs_enumeration() && total > ENUMERATION_CAP
    {
        out.push(Violation::SpaceTooLargeForAlgorithm {
            algorithm: config.algorithm,
            total,
        });
    }

    let mut names = HashSet::new();
    for f in &config.context_schema {
        if !names.insert(f.name.as_str()) {
            out.push(Violation::DuplicateFeature(f.name.clone()));
        }
        match f.kind {
            FeatureKind::Categorical { cardinality } if cardinality == 0 => {
                out.push(Violation::ZeroCardinality(f.name.clone()))
            }
            FeatureKind::Numeric { lo, hi } if !(lo.is_finite() && hi.is_finite() && lo < hi) => {
                out.push(Violation::EmptyNumericRange(f.name.clone()))
            }
            _ => {}
        }
    }

    let alg = config.algorithm;
    let reward = config.reward_spec;
    let mismatch = |required| Violation::RewardMismatch {
        algorithm: alg,
        required,
    };
    match alg {
        Algorithm::ThompsonBernoulli | Algorithm::CascadeTs => {
            if reward != RewardSpec::Binary {
                out.push(mismatch("Binary"));
            }
        }
        Algorithm::EpsilonGreedy | Algorithm::Exp3 => {
            if matches!(reward, RewardSpec::MultiObjective { .. }) {
                out.push(mismatch("Binary or Continuous"));
            }
        }
        // Binary selects the logistic posterior, Continuous the least-squares one.
        Algorithm::LinearTs | Algorithm::LinearEg | Algorithm::LinearIgw => {
            if matches!(reward, RewardSpec::MultiObjective { .. }) {
                out.push(mismatch("Binary or Continuous"));
            }
        }
        Algorithm::MultiObjectiveGgi => {
            if !matches!(reward, RewardSpec::MultiObjective { .. }) {
                out.push(mismatch("MultiObjective"));
            }
        }
    }

    let hp = &config.hyperparameters;
    if let RewardSpec::MultiObjective { k } = reward {
        if k < 2 {
            out.push(Violation::TooFewObjectives(k));
        }
        if hp.ggi_weights.len() != k {
            out.push(Violation::GgiWeightsLength {
                expected: k,
                actual: hp.ggi_weights.len(),
            });
        }
    }
    if alg == Algorithm::MultiObjectiveGgi || !hp.ggi_weights.is_empty() {
        if hp.ggi_weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            out.push(Violation::GgiWeightsNotPositive);
        }
        if hp.ggi_weights.windows(2).any(|w| w[1] > w[0]) {
            out.push(Violation::GgiWeightsIncreasing);
        }
    }

    if !(0.0..=1.0).contains(&hp.epsilon) {
        out.push(Violation::Epsilon(hp.epsilon));
    }
    if !(hp.exp3_gamma > 0.0 && hp.exp3_gamma <= 1.0) {
        out.push(Violation::Exp3Gamma(hp.exp3_gamma));
    }
    if !(hp.prior_variance > 0.0 && hp.prior_variance.is_finite()) {
        out.push(Violation::PriorVariance(hp.prior_variance));
    }
    if !(hp.igw_gamma0 > 0.0 && hp.igw_gamma0.is_finite()) {
        out.push(Violation::IgwGamma0(hp.igw_gamma0));
    }
    if alg == Algorithm::CascadeTs && (hp.ranking_k == 0 || hp.ranking_k as u64 > total) {
        out.push(Violation::RankingK {
            k: hp.ranking_k,
            items: total,
        });
    }
    if hp.greedy_passes == 0 {
        out.push(Violation::GreedyPasses);
    }
    if hp.latency_budget == 0 {
        out.push(Violation::LatencyBudget);
    }

    if out.is_empty() {
        Ok(())
    } else {
        Err(Violations(out))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ArmSpaceError {
    #[error("arm space has {total} arms, above the enumeration cap of {cap}; use greedy search")]
    SpaceTooLarge { total: u64, cap: u64 },
}

/// Lists every arm id in deterministic order.
///
/// Explicit spaces keep declaration order. Slotted spaces enumerate the
/// product lexicographically in slot order, joining options with `/`.
pub fn enumerate_arms(space: &ArmSpace) -> Result<Vec<String>, ArmSpaceError> {
    match space {
        ArmSpace::Explicit { arm_ids } => Ok(arm_ids.clone()),
        ArmSpace::Slotted { slots } => {
            let total = space.total();
            if total > ENUMERATION_CAP {
                return Err(ArmSpaceError::SpaceTooLarge {
                    total,
                    cap: ENUMERATION_CAP,
                });
            }
            let mut out = Vec::with_capacity(total as usize);
            let mut assignment = vec![0usize; slots.len()];
            if slots.iter().any(|s| s.options.is_empty()) {
                return Ok(out);
            }
            loop {
                out.push(slotted_arm_id(slots, &assignment));
                // odometer increment, last slot fastest
                let mut i = slots.len();
                loop {
                    if i == 0 {
                        return Ok(out);
                    }
                    i -= 1;
                    assignment[i] += 1;
                    if assignment[i] < slots[i].options.len() {
                        break;
                    }
                    assignment[i] = 0;
                }
            }
        }
    }
}

/// Arm id of a slot assignment (option index per slot).
pub fn slotted_arm_id(slots: &[Slot], assignment: &[usize]) -> String {
    let mut id = String::new();
    for (i, (slot, &o)) in slots.iter().zip(assignment).enumerate() {
        if i > 0 {
            id.push(SLOT_SEPARATOR);
        }
        id.push_str(&slot.options[o]);
    }
    id
}

/// Inverse of [`slotted_arm_id`].
pub fn parse_slotted_arm(slots: &[Slot], arm_id: &str) -> Option<Vec<usize>> {
    let parts: Vec<&str> = arm_id.split(SLOT_SEPARATOR).collect();
    if parts.len() != slots.len() {
        return None;
    }
    slots
        .iter()
        .zip(parts)
        .map(|(s, p)| s.options.iter().position(|o| o == p))
        .collect()
}
