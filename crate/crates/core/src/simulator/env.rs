//! Synthetic environments with known reward models.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::{BanditConfig, FeatureKind};
use crate::context::{encode_context, encoded_dim, RawContext};
use crate::linalg::{argmax, dot, sigmoid};
use crate::policy::structured::{ggi_scalarize, GgiWeights};
use crate::policy::ArmCatalog;

use super::SimError;

/// Feedback delay in simulation steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Delay {
    Fixed { steps: u64 },
    /// Failures before the first success: support {0, 1, …}, mean (1 − p) / p.
    Geometric { p: f64 },
}

impl Default for Delay {
    fn default() -> Self {
        Delay::Fixed { steps: 0 }
    }
}

impl Delay {
    pub fn with_mean(mean_steps: f64) -> Self {
        Delay::Geometric { p: 1.0 / (mean_steps + 1.0) }
    }

    pub fn draw(&self, rng: &mut ChaCha8Rng) -> u64 {
        match *self {
            Delay::Fixed { steps } => steps,
            Delay::Geometric { p } => Geometric::new(p).expect("validated p").sample(rng),
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        match *self {
            Delay::Fixed { .. } => Ok(()),
            Delay::Geometric { p } if p > 0.0 && p <= 1.0 => Ok(()),
            Delay::Geometric { p } => Err(SimError::InvalidEnvironment(format!("geometric p = {p} outside (0, 1]"))),
        }
    }
}

/// Reward model. Contextual weights are over the encoded context (intercept
/// first) and indexed by arm in catalog order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum EnvModel {
    BernoulliArms { means: Vec<f64> },
    LinearContext { weights: Vec<Vec<f64>>, noise: f64 },
    LogisticContext { weights: Vec<Vec<f64>> },
    CascadeClicks { attraction: Vec<f64>, k: usize },
    /// `weights[objective][arm]`.
    MultiObjectiveLinear { weights: Vec<Vec<Vec<f64>>>, noise: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub model: EnvModel,
    #[serde(default)]
    pub delay: Delay,
}

/// What the environment did with one decision.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    /// Reward values to report, if any event is emitted.
    pub event: Option<(Vec<f64>, Option<usize>)>,
    /// Scalar realized reward (GGI-scalarized for multi-objective).
    pub realized: f64,
    pub expected: f64,
    pub oracle: f64,
    pub hit_oracle: bool,
}

fn check_prob(v: f64, what: &str) -> Result<(), SimError> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(SimError::InvalidEnvironment(format!("{what} {v} outside [0, 1]")))
    }
}

impl Environment {
    pub fn new(model: EnvModel) -> Self {
        Self {
            model,
            delay: Delay::default(),
        }
    }

    pub fn with_delay(mut self, delay: Delay) -> Self {
        self.delay = delay;
        self
    }

    pub fn bernoulli(means: &[f64]) -> Self {
        Self::new(EnvModel::BernoulliArms { means: means.to_vec() })
    }

    pub fn cascade(attraction: &[f64], k: usize) -> Self {
        Self::new(EnvModel::CascadeClicks {
            attraction: attraction.to_vec(),
            k,
        })
    }

    /// Logistic personalization instance over a one-hot context: every arm
    /// shares a base logit, one random arm per context gets `lift` on top,
    /// and the rest get small per-context effects in `[0, noise_effect)`.
    pub fn logistic_personalization(
        arms: usize,
        contexts: usize,
        base: f64,
        lift: f64,
        noise_effect: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let mut weights = vec![vec![0.0; contexts + 1]; arms];
        for w in weights.iter_mut() {
            w[0] = base;
        }
        for c in 0..contexts {
            let best = rng.random_range(0..arms);
            for (a, w) in weights.iter_mut().enumerate() {
                w[c + 1] = if a == best {
                    lift
                } else {
                    rng.random::<f64>() * noise_effect
                };
            }
        }
        Self::new(EnvModel::LogisticContext { weights })
    }

    pub fn arms(&self) -> usize {
        match &self.model {
            EnvModel::BernoulliArms { means } => means.len(),
            EnvModel::LinearContext { weights, .. } | EnvModel::LogisticContext { weights } => weights.len(),
            EnvModel::CascadeClicks { attraction, .. } => attraction.len(),
            EnvModel::MultiObjectiveLinear { weights, .. } => weights.first().map_or(0, Vec::len),
        }
    }

    /// Checks the model against the bandit it will drive.
    pub fn validate(&self, config: &BanditConfig, catalog: &ArmCatalog) -> Result<(), SimError> {
        self.delay.validate()?;
        let Some(ids) = catalog.ids() else {
            return Err(SimError::InvalidEnvironment("arm space too large to simulate".into()));
        };
        if self.arms() != ids.len() {
            return Err(SimError::InvalidEnvironment(format!(
                "environment has {} arms, bandit has {}",
                self.arms(),
                ids.len()
            )));
        }
        let d = encoded_dim(&config.context_schema);
        let dims_ok = |ws: &[Vec<f64>]| ws.iter().all(|w| w.len() == d);
        match &self.model {
            EnvModel::BernoulliArms { means } => means.iter().try_for_each(|&m| check_prob(m, "mean")),
            EnvModel::LinearContext { weights, noise } => {
                if !dims_ok(weights) || *noise < 0.0 {
                    return Err(SimError::InvalidEnvironment("weight dimension or noise".into()));
                }
                Ok(())
            }
            EnvModel::LogisticContext { weights } => {
                if !dims_ok(weights) {
                    return Err(SimError::InvalidEnvironment(format!("weights must have length {d}")));
                }
                Ok(())
            }
            EnvModel::CascadeClicks { attraction, k } => {
                if *k != config.hyperparameters.ranking_k {
                    return Err(SimError::InvalidEnvironment("k differs from ranking_k".into()));
                }
                attraction.iter().try_for_each(|&a| check_prob(a, "attraction"))
            }
            EnvModel::MultiObjectiveLinear { weights, noise } => {
                if weights.len() != config.reward_spec.len() || !weights.iter().all(|w| dims_ok(w) && w.len() == ids.len()) || *noise < 0.0 {
                    return Err(SimError::InvalidEnvironment("objective weights do not fit the bandit".into()));
                }
                Ok(())
            }
        }
    }

    /// A uniformly random raw context for `config`'s schema.
    pub fn draw_context(config: &BanditConfig, rng: &mut ChaCha8Rng) -> RawContext {
        config
            .context_schema
            .iter()
            .map(|f| {
                let v = match f.kind {
                    FeatureKind::Categorical { cardinality } => rng.random_range(0..cardinality) as f64,
                    FeatureKind::Numeric { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
                };
                (f.name.clone(), v)
            })
            .collect()
    }

    /// Expected reward vector of each arm for context `x`.
    fn expected_single(&self, x: &[f64]) -> Vec<f64> {
        match &self.model {
            EnvModel::BernoulliArms { means } => means.clone(),
            EnvModel::LinearContext { weights, .. } => weights.iter().map(|w| dot(w, x)).collect(),
            EnvModel::LogisticContext { weights } => weights.iter().map(|w| sigmoid(dot(w, x))).collect(),
            _ => unreachable!("single-arm models only"),
        }
    }

    /// Resolves one decision. `arms` are catalog indices (one, or a ranking).
    pub fn respond(
        &self,
        config: &BanditConfig,
        raw: &RawContext,
        arms: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<Outcome, SimError> {
        let x = encode_context(&config.context_schema, raw).map_err(|e| SimError::InvalidEnvironment(e.to_string()))?;
        let x = x.as_slice();
        match &self.model {
            EnvModel::BernoulliArms { .. } | EnvModel::LogisticContext { .. } => {
                let p = self.expected_single(x);
                let a = arms[0];
                let best = argmax(&p).unwrap();
                let success = rng.random::<f64>() < p[a];
                Ok(Outcome {
                    event: success.then(|| (vec![1.0], None)),
                    realized: success as u8 as f64,
                    expected: p[a],
                    oracle: p[best],
                    hit_oracle: p[a] == p[best],
                })
            }
            EnvModel::LinearContext { noise, .. } => {
                let mu = self.expected_single(x);
                let a = arms[0];
                let best = argmax(&mu).unwrap();
                let eps: f64 = rng.sample(StandardNormal);
                let y = mu[a] + noise * eps;
                Ok(Outcome {
                    event: Some((vec![y], None)),
                    realized: y,
                    expected: mu[a],
                    oracle: mu[best],
                    hit_oracle: mu[a] == mu[best],
                })
            }
            EnvModel::CascadeClicks { attraction, k } => {
                let no_click = |items: &[usize]| items.iter().map(|&i| 1.0 - attraction[i]).product::<f64>();
                let mut order: Vec<usize> = (0..attraction.len()).collect();
                order.sort_by(|&a, &b| attraction[b].total_cmp(&attraction[a]).then(a.cmp(&b)));
                let top = &order[..*k];
                let oracle = 1.0 - no_click(top);
                let expected = 1.0 - no_click(arms);
                let click = arms.iter().position(|&i| rng.random::<f64>() < attraction[i]);
                let mut shown: Vec<usize> = arms.to_vec();
                shown.sort_unstable();
                let mut best: Vec<usize> = top.to_vec();
                best.sort_unstable();
                Ok(Outcome {
                    event: click.map(|p| (vec![1.0], Some(p))),
                    realized: click.is_some() as u8 as f64,
                    expected,
                    oracle,
                    hit_oracle: shown == best || (expected - oracle).abs() < 1e-12,
                })
            }
            EnvModel::MultiObjectiveLinear { weights, noise } => {
                let g = GgiWeights::new(&config.hyperparameters.ggi_weights)?;
                let mean_of = |a: usize| weights.iter().map(|wo| dot(&wo[a], x)).collect::<Vec<_>>();
                let values: Vec<f64> = (0..self.arms())
                    .map(|a| ggi_scalarize(&mean_of(a), &g))
                    .collect::<Result<_, _>>()?;
                let a = arms[0];
                let best = argmax(&values).unwrap();
                let y: Vec<f64> = mean_of(a)
                    .into_iter()
                    .map(|m| m + noise * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let realized = ggi_scalarize(&y, &g)?;
                Ok(Outcome {
                    event: Some((y, None)),
                    realized,
                    expected: values[a],
                    oracle: values[best],
                    hit_oracle: values[a] == values[best],
                })
            }
        }
    }
}
