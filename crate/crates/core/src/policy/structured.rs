//! Structured decisions: cascading bandits for ranking, Generalized Gini
//! Index scalarization for multiple objectives, and budgeted greedy search
//! over slotted arm spaces.

use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mab::BetaArm;
use super::linear::LinearModel;
use super::PolicyError;
use crate::config::{slotted_arm_id, Slot};
use crate::linalg::argmax;

// ── Cascading bandit ────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeState {
    pub items: Vec<BetaArm>,
}

impl CascadeState {
    pub fn new<S: AsRef<str>>(item_ids: &[S]) -> Self {
        Self {
            items: item_ids
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
            items: params
                .iter()
                .enumerate()
                .map(|(i, &(alpha, beta))| BetaArm {
                    arm: format!("item{i}"),
                    alpha,
                    beta,
                })
                .collect(),
        }
    }

    fn check_k(&self, k: usize) -> Result<(), PolicyError> {
        if k > self.items.len() {
            return Err(PolicyError::KTooLarge {
                k,
                items: self.items.len(),
            });
        }
        Ok(())
    }

    /// Top `k` items by one Beta draw each, descending; ties to the smallest index.
    pub fn sample<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Result<Vec<usize>, PolicyError> {
        self.check_k(k)?;
        let draws: Vec<f64> = self
            .items
            .iter()
            .map(|a| match rand_distr::Beta::new(a.alpha, a.beta) {
                Ok(d) => rand_distr::Distribution::sample(&d, rng),
                Err(_) => a.mean(),
            })
            .collect();
        Ok(top_k(&draws, k))
    }

    /// Top `k` items by posterior mean.
    pub fn exploit(&self, k: usize) -> Result<Vec<usize>, PolicyError> {
        self.check_k(k)?;
        let means: Vec<f64> = self.items.iter().map(BetaArm::mean).collect();
        Ok(top_k(&means, k))
    }

    /// Strict cascade credit: items above the click were examined and skipped,
    /// the clicked item was attractive, items below were never examined.
    pub fn update(&mut self, shown: &[usize], click_position: Option<usize>) -> Result<(), PolicyError> {
        if let Some(&bad) = shown.iter().find(|&&i| i >= self.items.len()) {
            return Err(PolicyError::UnknownArm(bad));
        }
        if let Some(pos) = click_position {
            if pos >= shown.len() {
                return Err(PolicyError::PositionOutOfRange {
                    position: pos,
                    shown: shown.len(),
                });
            }
        }
        match click_position {
            Some(pos) => {
                for &i in &shown[..pos] {
                    self.items[i].beta += 1.0;
                }
                self.items[shown[pos]].alpha += 1.0;
            }
            None => {
                for &i in shown {
                    self.items[i].beta += 1.0;
                }
            }
        }
        Ok(())
    }
}

fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

// ── Generalized Gini Index ──────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct GgiWeights(Vec<f64>);

impl GgiWeights {
    /// Validates `w_1 ≥ … ≥ w_k > 0` and normalizes to `Σw = 1`.
    pub fn new(raw: &[f64]) -> Result<Self, PolicyError> {
        if raw.is_empty() || raw.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(PolicyError::InvalidWeights);
        }
        if raw.windows(2).any(|p| p[1] > p[0]) {
            return Err(PolicyError::InvalidWeights);
        }
        let total: f64 = raw.iter().sum();
        Ok(Self(raw.iter().map(|w| w / total).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<f64>> for GgiWeights {
    type Error = PolicyError;
    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        GgiWeights::new(&v)
    }
}

impl From<GgiWeights> for Vec<f64> {
    fn from(w: GgiWeights) -> Self {
        w.0
    }
}

/// Sorts rewards ascending and dots them with the weights, so the largest
/// weight multiplies the worst objective.
pub fn ggi_scalarize(rewards: &[f64], weights: &GgiWeights) -> Result<f64, PolicyError> {
    if rewards.len() != weights.len() {
        return Err(PolicyError::LengthMismatch {
            expected: weights.len(),
            actual: rewards.len(),
        });
    }
    let mut sorted = rewards.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted.iter().zip(&weights.0).map(|(r, w)| r * w).sum())
}

/// Thompson sampling over independent per-objective linear posteriors,
/// scalarized with GGI. Draw order: arm-major, objective-minor.
pub fn ggi_ts_sample<R: Rng + ?Sized>(
    objectives: &[LinearModel],
    x: &[f64],
    weights: &GgiWeights,
    rng: &mut R,
) -> Result<usize, PolicyError> {
    let arms = objectives.first().map(LinearModel::units).unwrap_or(0);
    if objectives.iter().any(|o| o.units() != arms) {
        return Err(PolicyError::LengthMismatch {
            expected: arms,
            actual: objectives.iter().map(|o| o.units()).max().unwrap_or(0),
        });
    }
    let mut values = Vec::with_capacity(arms);
    let mut draw = vec![0.0; objectives.len()];
    for a in 0..arms {
        for (slot, o) in draw.iter_mut().zip(objectives) {
            *slot = o.sample_score(a, x, rng)?;
        }
        values.push(ggi_scalarize(&draw, weights)?);
    }
    argmax(&values).ok_or(PolicyError::EmptyArmSet)
}

// ── Greedy search ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GreedySearchBudget {
    pub max_passes: usize,
    pub deadline: Duration,
}

impl GreedySearchBudget {
    pub fn new(max_passes: usize, deadline: Duration) -> Self {
        Self {
            max_passes: max_passes.max(1),
            deadline,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GreedyOutcome {
    pub assignment: Vec<usize>,
    pub arm_id: String,
    pub score: f64,
    /// Full passes completed.
    pub passes: usize,
    /// Score evaluations per started pass.
    pub evaluations: Vec<usize>,
    pub deadline_hit: bool,
    /// The deadline expired before the first pass completed; the initial
    /// assignment is returned.
    pub deadline_before_first_pass: bool,
}

/// Coordinate ascent over slot assignments.
///
/// Starts from every slot's first option. Each pass visits slots in order,
/// scores every option of that slot with the others held fixed and keeps the
/// best (ties to the lower option index). Stops after `max_passes`, after a
/// pass without change, or once the deadline has expired (checked between
/// slots).
pub fn greedy_search<F>(slots: &[Slot], budget: &GreedySearchBudget, mut score: F) -> GreedyOutcome
where
    F: FnMut(&[usize]) -> f64,
{
    let start = Instant::now();
    let initial = vec![0usize; slots.len()];
    let mut current = initial.clone();
    let mut evaluations = Vec::new();
    let mut passes = 0;
    let mut deadline_hit = false;

    'passes: for _ in 0..budget.max_passes.max(1) {
        let mut changed = false;
        let mut evals = 0;
        for (s, slot) in slots.iter().enumerate() {
            if start.elapsed() >= budget.deadline {
                deadline_hit = true;
                evaluations.push(evals);
                break 'passes;
            }
            let mut best = (current[s], f64::NEG_INFINITY);
            let mut trial = current.clone();
            for o in 0..slot.options.len() {
                trial[s] = o;
                let v = score(&trial);
                evals += 1;
                if v > best.1 {
                    best = (o, v);
                }
            }
            if best.0 != current[s] {
                current[s] = best.0;
                changed = true;
            }
        }
        evaluations.push(evals);
        passes += 1;
        if !changed {
            break;
        }
    }

    let before_first = passes == 0;
    if before_first {
        current = initial;
    }
    let final_score = score(&current);
    GreedyOutcome {
        arm_id: slotted_arm_id(slots, &current),
        assignment: current,
        score: final_score,
        passes,
        evaluations,
        deadline_hit,
        deadline_before_first_pass: before_first,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::linear::RlsState;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn cascade_update_rules() {
        let mut s = CascadeState::new(&["a", "b", "c"]);
        s.update(&[0, 1, 2], Some(1)).unwrap();
        let ab: Vec<(f64, f64)> = s.items.iter().map(|i| (i.alpha, i.beta)).collect();
        assert_eq!(ab, vec![(1.0, 2.0), (2.0, 1.0), (1.0, 1.0)]);

        let mut s = CascadeState::new(&["a", "b"]);
        s.update(&[0, 1], None).unwrap();
        assert!(s.items.iter().all(|i| i.alpha == 1.0 && i.beta == 2.0));

        let mut s = CascadeState::new(&["a", "b"]);
        s.update(&[1, 0], Some(0)).unwrap();
        assert_eq!((s.items[1].alpha, s.items[1].beta), (2.0, 1.0));
        assert_eq!((s.items[0].alpha, s.items[0].beta), (1.0, 1.0));

        assert_eq!(
            s.update(&[0, 1], Some(2)),
            Err(PolicyError::PositionOutOfRange {
                position: 2,
                shown: 2
            })
        );
    }

    #[test]
    fn cascade_k_too_large() {
        let s = CascadeState::new(&["a", "b"]);
        assert_eq!(s.sample(3, &mut rng(1)), Err(PolicyError::KTooLarge { k: 3, items: 2 }));
    }

    #[test]
    fn cascade_near_degenerate() {
        let s = CascadeState::from_params(&[(9000.0, 1000.0), (5000.0, 5000.0), (1000.0, 9000.0)]);
        let mut r = rng(2);
        let n = 10_000;
        let hits = (0..n).filter(|_| s.sample(2, &mut r).unwrap() == vec![0, 1]).count();
        assert!(hits as f64 / n as f64 > 0.99);
    }

    #[test]
    fn cascade_k1_is_beta_sample() {
        let params = [(2.0, 3.0), (4.0, 1.0), (1.0, 1.0)];
        let cascade = CascadeState::from_params(&params);
        let beta = crate::policy::mab::BetaState::from_params(&params);
        let mut r1 = rng(8);
        let mut r2 = rng(8);
        for _ in 0..1000 {
            assert_eq!(cascade.sample(1, &mut r1).unwrap(), vec![beta.sample(&mut r2).unwrap()]);
        }
    }

    #[test]
    fn cascade_uniform_positions() {
        let k = 4;
        let s = CascadeState::new(&["a", "b", "c", "d"]);
        let mut r = rng(3);
        let n = 100_000;
        let mut counts = vec![vec![0usize; k]; k];
        for _ in 0..n {
            for (pos, item) in s.sample(k, &mut r).unwrap().into_iter().enumerate() {
                counts[item][pos] += 1;
            }
        }
        let mut chi2 = 0.0;
        let expected = n as f64 / k as f64;
        for row in &counts {
            for &c in row {
                assert!((c as f64 / n as f64 - 1.0 / k as f64).abs() < 0.02);
                chi2 += (c as f64 - expected).powi(2) / expected;
            }
        }
        // (k−1)² = 9 degrees of freedom; χ²₉ upper 0.001 quantile is 27.88
        assert!(chi2 < 27.88, "chi2 = {chi2}");
    }

    #[test]
    fn ggi_examples() {
        let w = GgiWeights::new(&[3.0, 2.0, 1.0]).unwrap();
        assert!((ggi_scalarize(&[0.4, 0.4, 0.4], &w).unwrap() - 0.4).abs() < 1e-15);
        let w = GgiWeights::new(&[2.0 / 3.0, 1.0 / 3.0]).unwrap();
        assert!((ggi_scalarize(&[0.2, 0.8], &w).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(
            ggi_scalarize(&[0.8, 0.2], &w).unwrap(),
            ggi_scalarize(&[0.2, 0.8], &w).unwrap()
        );
        assert_eq!(
            ggi_scalarize(&[0.1], &w),
            Err(PolicyError::LengthMismatch {
                expected: 2,
                actual: 1
            })
        );
        assert!(GgiWeights::new(&[1.0, 2.0]).is_err());
        assert!(GgiWeights::new(&[1.0, 0.0]).is_err());
    }

    fn rls_with_means(means: &[f64]) -> LinearModel {
        let ids: Vec<String> = (0..means.len()).map(|i| i.to_string()).collect();
        let mut s = RlsState::new(&ids, 1, 1e-8);
        for (a, &m) in s.arms.iter_mut().zip(means) {
            a.mean = vec![m];
        }
        LinearModel::Rls(s)
    }

    #[test]
    fn ggi_ts_dominance() {
        let objectives = vec![rls_with_means(&[0.2, 0.9]), rls_with_means(&[0.1, 0.5])];
        let w = GgiWeights::new(&[0.7, 0.3]).unwrap();
        let mut r = rng(4);
        let n = 10_000;
        let hits = (0..n)
            .filter(|_| ggi_ts_sample(&objectives, &[1.0], &w, &mut r).unwrap() == 1)
            .count();
        assert!(hits as f64 / n as f64 > 0.999);
    }

    #[test]
    fn ggi_ts_permuted_objectives_split() {
        let objectives = vec![rls_with_means(&[0.3, 0.6]), rls_with_means(&[0.6, 0.3])];
        let w = GgiWeights::new(&[0.7, 0.3]).unwrap();
        let mut r = rng(6);
        let n = 20_000;
        let zero = (0..n)
            .filter(|_| ggi_ts_sample(&objectives, &[1.0], &w, &mut r).unwrap() == 0)
            .count();
        assert!((zero as f64 / n as f64 - 0.5).abs() < 0.02);
    }

    #[test]
    fn ggi_ts_single_objective_matches_linear_ts() {
        let model = rls_with_means(&[0.2, 0.25, 0.1]);
        let LinearModel::Rls(mut s) = model else { unreachable!() };
        for a in &mut s.arms {
            a.cov = vec![0.05];
        }
        let model = LinearModel::Rls(s);
        let w = GgiWeights::new(&[1.0]).unwrap();
        let mut r1 = rng(10);
        let mut r2 = rng(10);
        for _ in 0..1000 {
            assert_eq!(
                ggi_ts_sample(std::slice::from_ref(&model), &[1.0], &w, &mut r1).unwrap(),
                crate::policy::linear::linear_ts_sample(&model, &[1.0], &mut r2).unwrap()
            );
        }
    }

    fn slots(sizes: &[usize]) -> Vec<Slot> {
        sizes
            .iter()
            .enumerate()
            .map(|(i, &n)| Slot {
                slot_name: format!("s{i}"),
                options: (0..n).map(|o| format!("o{o}")).collect(),
            })
            .collect()
    }

    fn budget() -> GreedySearchBudget {
        GreedySearchBudget::new(5, Duration::from_secs(5))
    }

    #[test]
    fn greedy_single_slot_is_exhaustive() {
        let s = slots(&[6]);
        let vals = [0.1, 0.4, 0.9, 0.2, 0.9, 0.0];
        let out = greedy_search(&s, &budget(), |a| vals[a[0]]);
        assert_eq!(out.assignment, vec![2]);
        assert_eq!(out.arm_id, "o2");
    }

    #[test]
    fn greedy_constant_score_stops_after_one_pass() {
        let s = slots(&[3, 4]);
        let out = greedy_search(&s, &budget(), |_| 1.0);
        assert_eq!(out.assignment, vec![0, 0]);
        assert_eq!(out.passes, 1);
        assert_eq!(out.evaluations, vec![7]);
    }

    #[test]
    fn greedy_zero_deadline_is_flagged() {
        let s = slots(&[3, 4]);
        let out = greedy_search(&s, &GreedySearchBudget::new(3, Duration::ZERO), |a| a[0] as f64);
        assert!(out.deadline_before_first_pass && out.deadline_hit);
        assert_eq!(out.assignment, vec![0, 0]);
    }

    #[test]
    fn greedy_never_worse_than_start() {
        let s = slots(&[4, 4, 4]);
        let table: Vec<f64> = (0..64).map(|i| ((i * 37) % 17) as f64).collect();
        let f = |a: &[usize]| table[a[0] * 16 + a[1] * 4 + a[2]];
        let out = greedy_search(&s, &budget(), f);
        assert!(out.score >= f(&[0, 0, 0]));
    }
}
