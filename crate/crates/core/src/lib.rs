//! Differentiable MPC imitation learning for lane keeping.

pub mod closed_loop;
pub mod datasets;
pub mod experiment;
pub mod gradcheck;
pub mod metrics;
pub mod ocp;
pub mod policy;
pub mod scalar;
pub mod sensitivity;
pub mod track;
pub mod trainer;
pub mod vehicle;
