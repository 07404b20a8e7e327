//! Non-contextual policies: epsilon greedy, Beta-Bernoulli Thompson sampling
//! and Exp3.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use super::{sample_index, PolicyError};
use crate::linalg::argmax;

// ── Epsilon greedy ──────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EgArm {
    pub arm: String,
    pub n: u64,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EgState {
    pub arms: Vec<EgArm>,
}

impl EgState {
    pub fn new<S: AsRef<str>>(arm_ids: &[S]) -> Self {
        Self {
            arms: arm_ids
                .iter()
                .map(|a| EgArm {
                    arm: a.as_ref().to_string(),
                    n: 0,
                    mean: 0.0,
                })
                .collect(),
        }
    }

    pub fn means(&self) -> Vec<f64> {
        self.arms.iter().map(|a| a.mean).collect()
    }

    /// Greedy arm, ties to the smallest index.
    pub fn exploit(&self) -> Result<usize, PolicyError> {
        argmax(&self.means()).ok_or(PolicyError::EmptyArmSet)
    }

    pub fn sample<R: Rng + ?Sized>(&self, epsilon: f64, rng: &mut R) -> Result<usize, PolicyError> {
        if self.arms.is_empty() {
            return Err(PolicyError::EmptyArmSet);
        }
        if epsilon > 0.0 && rng.random::<f64>() < epsilon {
            return Ok(rng.random_range(0..self.arms.len()));
        }
        self.exploit()
    }

    /// Probability that [`EgState::sample`] returns `arm`.
    pub fn propensity(&self, epsilon: f64, arm: usize) -> Result<f64, PolicyError> {
        let greedy = self.exploit()?;
        let k = self.arms.len() as f64;
        let explore = epsilon / k;
        Ok(if arm == greedy {
            1.0 - epsilon + explore
        } else {
            explore
        })
    }

    /// Exact incremental mean.
    pub fn update(&mut self, arm: usize, reward: f64) -> Result<(), PolicyError> {
        if !reward.is_finite() {
            return Err(PolicyError::NonFiniteInput);
        }
        let a = self
            .arms
            .get_mut(arm)
            .ok_or(PolicyError::UnknownArm(arm))?;
        a.n += 1;
        a.mean += (reward - a.mean) / a.n as f64;
        Ok(())
    }
}

// ── Beta-Bernoulli Thompson sampling ────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaArm {
    pub arm: String,
    pub alpha: f64,
    pub beta: f64,
}

impl BetaArm {
    pub fn mean(&self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaState {
    pub arms: Vec<BetaArm>,
}

impl BetaState {
    /// Uniform `Beta(1, 1)` priors.
    pub fn new<S: AsRef<str>>(arm_ids: &[S]) -> Self {
        Self {
            arms: arm_ids
                .iter()
                .map(|a| BetaArm {
                    arm: a.as_ref().to_string(),
                    alpha: 1.0,
                    beta: 1.0,
                })
                .collect(),
        }
    }

    pub fn from_params(params: &[(f64, f64)]) -> Self {
        Self {
            arms: params
                .iter()
                .enumerate()
                .map(|(i, &(alpha, beta))| BetaArm {
                    arm: format!("arm{i}"),
                    alpha,
                    beta,
                })
                .collect(),
        }
    }

    pub fn means(&self) -> Vec<f64> {
        self.arms.iter().map(BetaArm::mean).collect()
    }

    /// One posterior draw per arm, in arm order.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.arms
            .iter()
            .map(|a| match Beta::new(a.alpha, a.beta) {
                Ok(d) => d.sample(rng),
                Err(_) => a.mean(),
            })
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<usize, PolicyError> {
        if self.arms.is_empty() {
            return Err(PolicyError::EmptyArmSet);
        }
        argmax(&self.draw(rng)).ok_or(PolicyError::EmptyArmSet)
    }

    pub fn exploit(&self) -> Result<usize, PolicyError> {
        argmax(&self.means()).ok_or(PolicyError::EmptyArmSet)
    }

    /// Conjugate update: success bumps α, failure bumps β.
    pub fn update(&mut self, arm: usize, reward: f64) -> Result<(), PolicyError> {
        let a = self
            .arms
            .get_mut(arm)
            .ok_or(PolicyError::UnknownArm(arm))?;
        if reward == 1.0 {
            a.alpha += 1.0;
        } else if reward == 0.0 {
            a.beta += 1.0;
        } else {
            return Err(PolicyError::NonBinaryReward(reward));
        }
        Ok(())
    }
}

// ── Exp3 ────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exp3Arm {
    pub arm: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exp3State {
    pub arms: Vec<Exp3Arm>,
}

impl Exp3State {
    pub fn new<S: AsRef<str>>(arm_ids: &[S]) -> Self {
        Self {
            arms: arm_ids
                .iter()
                .map(|a| Exp3Arm {
                    arm: a.as_ref().to_string(),
                    weight: 1.0,
                })
                .collect(),
        }
    }

    pub fn from_weights(weights: &[f64]) -> Self {
        Self {
            arms: weights
                .iter()
                .enumerate()
                .map(|(i, &weight)| Exp3Arm {
                    arm: format!("arm{i}"),
                    weight,
                })
                .collect(),
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        self.arms.iter().map(|a| a.weight).collect()
    }

    /// `p_a = (1 − γ) w_a / Σw + γ / K`.
    pub fn distribution(&self, gamma: f64) -> Result<Vec<f64>, PolicyError> {
        let k = self.arms.len();
        if k == 0 {
            return Err(PolicyError::EmptyArmSet);
        }
        let total: f64 = self.arms.iter().map(|a| a.weight).sum();
        let floor = gamma / k as f64;
        Ok(self
            .arms
            .iter()
            .map(|a| (1.0 - gamma) * a.weight / total + floor)
            .collect())
    }

    /// Returns the drawn arm and the probability it was drawn with.
    pub fn sample<R: Rng + ?Sized>(&self, gamma: f64, rng: &mut R) -> Result<(usize, f64), PolicyError> {
        let p = self.distribution(gamma)?;
        let i = sample_index(&p, rng);
        Ok((i, p[i]))
    }

    pub fn exploit(&self) -> Result<usize, PolicyError> {
        argmax(&self.weights()).ok_or(PolicyError::EmptyArmSet)
    }

    /// Importance-weighted exponential update, then rescale so `max w = 1`.
    pub fn update(&mut self, arm: usize, reward: f64, p_arm: f64, gamma: f64) -> Result<(), PolicyError> {
        if !(0.0..=1.0).contains(&reward) {
            return Err(PolicyError::RewardOutOfRange(reward));
        }
        if !(p_arm > 0.0 && p_arm.is_finite()) {
            return Err(PolicyError::ZeroProbability);
        }
        let k = self.arms.len() as f64;
        let a = self
            .arms
            .get_mut(arm)
            .ok_or(PolicyError::UnknownArm(arm))?;
        let estimate = reward / p_arm;
        a.weight *= (gamma * estimate / k).exp();
        let max = self
            .arms
            .iter()
            .map(|a| a.weight)
            .fold(f64::NEG_INFINITY, f64::max);
        for a in &mut self.arms {
            a.weight /= max;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn eg(means: &[f64]) -> EgState {
        EgState {
            arms: means
                .iter()
                .enumerate()
                .map(|(i, &m)| EgArm {
                    arm: format!("a{i}"),
                    n: 1,
                    mean: m,
                })
                .collect(),
        }
    }

    #[test]
    fn eg_pure_argmax_and_tie() {
        assert_eq!(eg(&[0.1, 0.5, 0.2]).sample(0.0, &mut rng()).unwrap(), 1);
        assert_eq!(eg(&[0.3, 0.3]).sample(0.0, &mut rng()).unwrap(), 0);
        assert_eq!(EgState::new::<&str>(&[]).sample(0.5, &mut rng()), Err(PolicyError::EmptyArmSet));
    }

    #[test]
    fn eg_uniform_at_epsilon_one() {
        let s = eg(&[0.9, 0.1, 0.0]);
        let mut r = rng();
        let mut counts = [0usize; 3];
        let n = 100_000;
        for _ in 0..n {
            counts[s.sample(1.0, &mut r).unwrap()] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 1.0 / 3.0).abs() < 0.02);
        }
    }

    #[test]
    fn eg_incremental_mean() {
        let mut s = EgState::new(&["a"]);
        s.update(0, 1.0).unwrap();
        assert_eq!((s.arms[0].n, s.arms[0].mean), (1, 1.0));
        let mut s = EgState::new(&["a"]);
        for r in [1.0, 0.0, 1.0] {
            s.update(0, r).unwrap();
        }
        assert!((s.arms[0].mean - 2.0 / 3.0).abs() < 1e-15);
        let mut s = eg(&[0.37]);
        s.arms[0].n = 1_000_000;
        s.update(0, 0.37).unwrap();
        assert_eq!(s.arms[0].mean, 0.37);
        assert_eq!(s.update(3, 1.0), Err(PolicyError::UnknownArm(3)));
    }

    #[test]
    fn beta_exchangeable_priors() {
        let s = BetaState::new(&["a", "b"]);
        let mut r = rng();
        let n = 100_000;
        let zero = (0..n).filter(|_| s.sample(&mut r).unwrap() == 0).count();
        assert!((zero as f64 / n as f64 - 0.5).abs() < 0.02);
    }

    #[test]
    fn beta_near_degenerate() {
        let s = BetaState::from_params(&[(1000.0, 1.0), (1.0, 1000.0)]);
        let mut r = rng();
        let n = 10_000;
        let zero = (0..n).filter(|_| s.sample(&mut r).unwrap() == 0).count();
        assert!(zero as f64 / n as f64 > 0.999);
        assert_eq!(BetaState::new(&["x"]).sample(&mut r).unwrap(), 0);
    }

    #[test]
    fn beta_conjugate_updates() {
        let mut s = BetaState::new(&["a", "b"]);
        s.update(0, 1.0).unwrap();
        assert_eq!((s.arms[0].alpha, s.arms[0].beta), (2.0, 1.0));
        let mut s = BetaState::new(&["a", "b"]);
        s.update(0, 0.0).unwrap();
        assert_eq!((s.arms[0].alpha, s.arms[0].beta), (1.0, 2.0));
        assert_eq!((s.arms[1].alpha, s.arms[1].beta), (1.0, 1.0));

        let mut s = BetaState::new(&["a"]);
        for _ in 0..30 {
            s.update(0, 1.0).unwrap();
        }
        for _ in 0..70 {
            s.update(0, 0.0).unwrap();
        }
        assert_eq!((s.arms[0].alpha, s.arms[0].beta), (31.0, 71.0));
        assert_eq!(s.arms[0].mean(), 31.0 / 102.0);
        assert_eq!(s.update(0, 0.5), Err(PolicyError::NonBinaryReward(0.5)));
        assert_eq!(s.update(4, 1.0), Err(PolicyError::UnknownArm(4)));
    }

    #[test]
    fn exp3_distribution_examples() {
        let p = Exp3State::from_weights(&[1.0, 1.0]).distribution(0.1).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        let p = Exp3State::from_weights(&[3.0, 1.0]).distribution(0.1).unwrap();
        assert!((p[0] - 0.725).abs() < 1e-12 && (p[1] - 0.275).abs() < 1e-12);
        let p = Exp3State::from_weights(&[5.0, 0.1, 2.0, 9.0]).distribution(1.0).unwrap();
        assert_eq!(p, vec![0.25; 4]);
    }

    #[test]
    fn exp3_update_examples() {
        let mut s = Exp3State::from_weights(&[1.0, 1.0]);
        s.update(0, 0.0, 0.5, 0.1).unwrap();
        assert_eq!(s.weights(), vec![1.0, 1.0]);

        let mut s = Exp3State::from_weights(&[1.0, 1.0]);
        s.update(0, 1.0, 0.5, 0.1).unwrap();
        let w = s.weights();
        assert_eq!(w[0], 1.0);
        assert!((w[1] - (-0.1f64).exp()).abs() < 1e-15);

        assert_eq!(s.update(0, 1.5, 0.5, 0.1), Err(PolicyError::RewardOutOfRange(1.5)));
        assert_eq!(s.update(0, 1.0, 0.0, 0.1), Err(PolicyError::ZeroProbability));
    }

    #[test]
    fn exp3_long_horizon_stays_finite() {
        let mut s = Exp3State::new(&["a", "b", "c"]);
        let mut r = rng();
        for _ in 0..100_000 {
            let (arm, p) = s.sample(0.05, &mut r).unwrap();
            s.update(arm, if arm == 0 { 1.0 } else { 0.0 }, p, 0.05).unwrap();
        }
        let w = s.weights();
        assert!(w.iter().all(|x| x.is_finite() && *x > 0.0));
        assert_eq!(w.iter().cloned().fold(0.0, f64::max), 1.0);
    }

    #[test]
    fn seeded_sampling_replays() {
        let s = BetaState::new(&["a", "b", "c"]);
        let a: Vec<usize> = {
            let mut r = rng();
            (0..50).map(|_| s.sample(&mut r).unwrap()).collect()
        };
        let b: Vec<usize> = {
            let mut r = rng();
            (0..50).map(|_| s.sample(&mut r).unwrap()).collect()
        };
        assert_eq!(a, b);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn exp3_valid_distribution(w in proptest::collection::vec(1e-6f64..1e6, 1..20),
                                       gamma in 1e-3f64..=1.0) {
                let p = Exp3State::from_weights(&w).distribution(gamma).unwrap();
                let k = w.len() as f64;
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                prop_assert!(p.iter().all(|&x| x >= gamma / k - 1e-15));
            }

            #[test]
            fn beta_update_order_free(mut rewards in proptest::collection::vec(0u8..2, 0..200),
                                      seed in any::<u64>()) {
                let mut a = BetaState::new(&["x"]);
                for &r in &rewards {
                    a.update(0, r as f64).unwrap();
                }
                let mut rr = ChaCha8Rng::seed_from_u64(seed);
                for i in (1..rewards.len()).rev() {
                    rewards.swap(i, rr.random_range(0..=i));
                }
                let mut b = BetaState::new(&["x"]);
                for &r in &rewards {
                    b.update(0, r as f64).unwrap();
                }
                prop_assert_eq!(a, b);
            }

            #[test]
            fn eg_incremental_matches_batch(rewards in proptest::collection::vec(0.0f64..=1.0, 1..10_000)) {
                let mut s = EgState::new(&["x"]);
                for &r in &rewards {
                    s.update(0, r).unwrap();
                }
                let batch = rewards.iter().sum::<f64>() / rewards.len() as f64;
                prop_assert!((s.arms[0].mean - batch).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn beta_identical_params_within_binomial_bound() {
        let k = 4;
        let s = BetaState {
            arms: (0..k)
                .map(|i| BetaArm {
                    arm: i.to_string(),
                    alpha: 3.0,
                    beta: 5.0,
                })
                .collect(),
        };
        let mut r = rng();
        let n = 100_000;
        let mut counts = vec![0usize; k];
        for _ in 0..n {
            counts[s.sample(&mut r).unwrap()] += 1;
        }
        let p = 1.0 / k as f64;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        for c in counts {
            assert!((c as f64 / n as f64 - p).abs() <= 3.0 * sigma);
        }
    }
}
