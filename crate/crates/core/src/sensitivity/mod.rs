//! Implicit differentiation of the MPC solution map: adjoint products of
//! the first control with respect to the cost parameters and the initial
//! state.

pub mod banded;
mod kkt;

use thiserror::Error;

use crate::ocp::OcpError;

pub use kkt::{
    adjoint_vjp, build_kkt_system, policy_jacobians, Adjoint, KktSystem, PolicyJacobians,
    RowClass, EPS_ACT, MAX_CONDITION,
};

#[derive(Debug, Error)]
pub enum SensitivityError {
    #[error("sensitivities requested at a non-converged solution")]
    NotConverged,
    #[error("KKT matrix singular or ill-conditioned (condition estimate {condition:.3e})")]
    SingularKkt { condition: f64 },
    #[error(transparent)]
    Ocp(#[from] OcpError),
}

#[cfg(test)]
mod tests;
