//! Closed-loop runs across the store, pipeline, trainer and sampler.

use adaptex::config::{Algorithm, ArmSpace, BanditConfig, FeatureSpec, RewardSpec, Slot, Status};
use adaptex::par::Execution;
use adaptex::pipeline::{self, FlushPolicy};
use adaptex::simulator::{self, Delay, EnvModel, Environment, PipelineParams, Simulation, Storage};
use adaptex::store::BanditStore;

fn explicit(id: &str, alg: Algorithm, arms: usize, spec: RewardSpec) -> BanditConfig {
    BanditConfig::new(id, alg, ArmSpace::explicit((0..arms).map(|i| format!("arm{i}"))), spec)
}

#[test]
fn on_disk_state_matches_the_report_after_reopen() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = explicit("disk", Algorithm::Exp3, 3, RewardSpec::Binary);
    c.attribution_window = 20;
    let env = Environment::bernoulli(&[0.2, 0.7, 0.4]).with_delay(Delay::with_mean(5.0));
    let mut sim = Simulation::new(c.clone(), env, 11, PipelineParams::default(), Storage::Dir(dir.path().into())).unwrap();
    sim.run(3_000).unwrap();
    let report = sim.finish().unwrap().report;
    drop(sim);

    let store = BanditStore::open_dir(dir.path().join("store"), false).unwrap();
    let params = store.get_params("disk").unwrap();
    assert_eq!(params.version, report.final_state.param_version);
    assert_eq!(params.train_seq, report.counters.batches);
    let recorded = pipeline::BatchLog::read(&dir.path().join("logs"), "disk").unwrap();
    assert_eq!(recorded.len() as u64, report.counters.batches);
    assert!(recorded.windows(2).all(|w| w[1].seq == w[0].seq + 1));
}

#[test]
fn linear_policies_learn_a_context_dependent_best_arm() {
    // arm 0 wins for segment 0, arm 1 for segment 1
    let weights = vec![vec![0.5, 0.4, -0.4], vec![0.5, -0.4, 0.4], vec![0.45, 0.0, 0.0]];
    for alg in [Algorithm::LinearTs, Algorithm::LinearEg, Algorithm::LinearIgw] {
        let mut c = explicit("lin", alg, 3, RewardSpec::Continuous);
        c.context_schema = vec![FeatureSpec::categorical("segment", 2)];
        c.attribution_window = 5;
        c.hyperparameters.epsilon = 0.05;
        let env = Environment::new(EnvModel::LinearContext {
            weights: weights.clone(),
            noise: 0.1,
        });
        let runs =
            simulator::run_seeds(&c, &env, 4_000, &[1, 2], &PipelineParams::default(), Execution::Parallel).unwrap();
        for r in runs {
            assert!(r.report.best_arm_fraction > 0.8, "{alg}: {}", r.report.best_arm_fraction);
        }
    }
}

#[test]
fn ggi_prefers_the_balanced_arm() {
    // arm 0 is great on objective 0 only, arm 1 on objective 1 only, arm 2
    // is decent on both and maximizes the Gini-weighted score
    let mut c = explicit("fair", Algorithm::MultiObjectiveGgi, 3, RewardSpec::MultiObjective { k: 2 });
    c.hyperparameters.ggi_weights = vec![0.8, 0.2];
    c.attribution_window = 5;
    let env = Environment::new(EnvModel::MultiObjectiveLinear {
        weights: vec![vec![vec![0.9], vec![0.1], vec![0.6]], vec![vec![0.1], vec![0.9], vec![0.6]]],
        noise: 0.05,
    });
    let out = simulator::run_experiment(&c, &env, 3_000, 4, &PipelineParams::default()).unwrap();
    assert!(out.report.best_arm_fraction > 0.8, "{}", out.report.best_arm_fraction);
}

#[test]
fn slotted_layouts_train_through_the_pipeline() {
    let slots: Vec<Slot> = (0..3)
        .map(|s| Slot {
            slot_name: format!("slot{s}"),
            options: (0..4).map(|o| format!("o{o}")).collect(),
        })
        .collect();
    let mut c = BanditConfig::new("layout", Algorithm::LinearTs, ArmSpace::Slotted { slots }, RewardSpec::Continuous);
    c.attribution_window = 5;
    // additive: option 3 of every slot is best
    let weights: Vec<Vec<f64>> = (0..64)
        .map(|a| {
            let picks = [a / 16, (a / 4) % 4, a % 4];
            vec![picks.iter().map(|&o| 0.1 * o as f64).sum::<f64>()]
        })
        .collect();
    let env = Environment::new(EnvModel::LinearContext { weights, noise: 0.1 });
    let params = PipelineParams {
        flush: FlushPolicy {
            max_examples: 20,
            ..FlushPolicy::default()
        },
        ..PipelineParams::default()
    };
    let out = simulator::run_experiment(&c, &env, 3_000, 9, &params).unwrap();
    assert!(out.report.best_arm_fraction > 0.5, "{}", out.report.best_arm_fraction);
}

#[test]
fn freezing_stops_learning_but_keeps_serving() {
    let c = explicit("freeze", Algorithm::ThompsonBernoulli, 2, RewardSpec::Binary);
    let mut sim = Simulation::new(c, Environment::bernoulli(&[0.8, 0.2]), 3, PipelineParams::default(), Storage::Memory).unwrap();
    sim.run(1_000).unwrap();
    sim.freeze().unwrap();
    let before = sim.store().get_params("freeze").unwrap().version;
    sim.run(1_000).unwrap();
    let out = sim.finish().unwrap();
    assert_eq!(out.report.final_state.status, Status::Frozen);
    assert_eq!(out.report.final_state.param_version, before);
    assert!(out.report.counters.trainer.dropped_frozen > 0);
}
