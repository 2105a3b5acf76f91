//! K-step MAML on quadratic clients with gradient-descent inner steps.
//!
//! The meta-objective of client `i` is `m_K(x) = f_i(X_K(x))` where `X_K`
//! is the result of `K` gradient steps of size `γ` from `x`. On quadratics
//! `X_K(x) = c_i + P(x − c_i)` with `P = (I − γA_i)^K`, so
//! `∇m_K(x) = P A_i P (x − c_i)`.

use crate::error::{Error, Result};
use crate::linalg::Vector;
use crate::localupdate::{sample_clients, server_apply, ServerOptimizer, ServerState, UpdateMode};
use crate::problem::{Client, Population};
use crate::surrogate::step_matrix_power;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MamlConfig {
    pub gamma: f64,
    pub k_steps: usize,
}

impl MamlConfig {
    pub fn new(gamma: f64, k_steps: usize) -> Result<Self> {
        if !(gamma >= 0.0) || !gamma.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "MAML step size must be finite and >= 0, got {gamma}"
            )));
        }
        if k_steps < 1 {
            return Err(Error::InvalidParameter("MAML needs K >= 1 inner steps".into()));
        }
        Ok(MamlConfig { gamma, k_steps })
    }
}

/// `X_K = c_i + (I − γA_i)^K (x − c_i)`.
pub fn gd_k_steps(cl: &Client, x: &Vector, cfg: &MamlConfig) -> Result<Vector> {
    x.check_dim(cl.dim())?;
    let p = step_matrix_power(cl.a_eff(), cfg.gamma, cfg.k_steps);
    Ok(cl.c_eff().add(&p.mul_vec(&x.sub(cl.c_eff()))?))
}

/// `∇m_K(x) = (I − γA_i)^K A_i (I − γA_i)^K (x − c_i)`.
pub fn maml_grad(cl: &Client, x: &Vector, cfg: &MamlConfig) -> Result<Vector> {
    x.check_dim(cl.dim())?;
    let p = step_matrix_power(cl.a_eff(), cfg.gamma, cfg.k_steps);
    let r = p.mul_vec(&x.sub(cl.c_eff()))?;
    p.mul_vec(&cl.a_eff().mul_vec(&r)?)
}

/// One MAML server step over `M` clients sampled exactly as in
/// [`crate::localupdate::outer_round`], using exact client meta-gradients.
pub fn maml_round(
    pop: &Population,
    x: &Vector,
    clients_per_round: usize,
    cfg: &MamlConfig,
    eta: f64,
    master_seed: u64,
    t: usize,
) -> Result<Vector> {
    x.check_dim(pop.dim())?;
    let sampled = sample_clients(pop.len(), clients_per_round, master_seed, t)?;
    let scale = pop.len() as f64 / sampled.len() as f64;
    let mut q = Vector::zeros(pop.dim());
    for &i in &sampled {
        q.axpy(scale * pop.weights()[i], &maml_grad(pop.client(i), x, cfg)?);
    }
    let mut server = ServerState::new(ServerOptimizer::Sgd, UpdateMode::GradientSum, pop.dim())?;
    server_apply(&mut server, x, &q, eta, cfg.gamma)
}

/// Runs `rounds` MAML server steps from `x0` and returns the final iterate.
pub fn maml_run(
    pop: &Population,
    x0: &Vector,
    clients_per_round: usize,
    cfg: &MamlConfig,
    eta: f64,
    master_seed: u64,
    rounds: usize,
) -> Result<Vector> {
    let mut x = x0.clone();
    for t in 1..=rounds {
        x = maml_round(pop, &x, clients_per_round, cfg, eta, master_seed, t)?;
    }
    Ok(x)
}
