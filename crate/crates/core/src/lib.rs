//! Adaptive experimentation service: bandit policies, a versioned parameter
//! store, a low-latency sampler, a reward attribution pipeline, a batch trainer
//! and a simulator that drives them end to end.

pub mod clock;
pub mod config;
pub mod context;
pub mod events;
pub mod linalg;
pub mod policy;
pub mod framing;
pub mod store;
pub mod pipeline;
pub mod trainer;
pub mod sampler;
pub mod par;
pub mod simulator;
