//! The LocalUpdate algorithm family: client inner loops, server optimizers,
//! learning-rate schedules and the round driver.

use std::io::Write;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{sym_eigen_named, Vector};
use crate::problem::{Client, Population};
use crate::rng::{label, Stream};
use crate::surrogate::{
    phi, qa_matrix, qa_spectrum, surrogate_client_grad, surrogate_hessian, surrogate_minimizer, ThetaWeights,
};

/// Iterates with a norm above this mark the run as diverged.
pub const DIVERGENCE_NORM: f64 = 1e12;

/// Client-side parameters of one inner loop.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerConfig {
    pub gamma: f64,
    pub theta: ThetaWeights,
    pub batch_size: usize,
}

impl InnerConfig {
    pub fn new(gamma: f64, theta: ThetaWeights, batch_size: usize) -> Result<Self> {
        if !(gamma >= 0.0) || !gamma.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "client learning rate must be finite and >= 0, got {gamma}"
            )));
        }
        if batch_size < 1 {
            return Err(Error::InvalidParameter("batch size B must be >= 1".into()));
        }
        Ok(InnerConfig {
            gamma,
            theta,
            batch_size,
        })
    }
}

/// Runs `K(Θ)` mini-batch SGD steps from `x` and returns `Σ θ_k g_k`.
///
/// Each mini-batch draws `B` examples with replacement from the client's
/// distribution. Clients whose examples all coincide skip sampling.
pub fn inner_loop<R: Rng + ?Sized>(cl: &Client, x: &Vector, cfg: &InnerConfig, rng: &mut R) -> Result<Vector> {
    x.check_dim(cl.dim())?;
    let d = cl.dim();
    let mut xk = x.as_slice().to_vec();
    let mut acc = vec![0.0; d];
    let mut g = vec![0.0; d];
    let mut tmp = vec![0.0; d];
    let deterministic = cl.is_deterministic();
    let inv_b = 1.0 / cfg.batch_size as f64;
    for &theta in cfg.theta.as_slice() {
        if deterministic {
            cl.examples()[0].grad_into(&xk, &mut g);
        } else {
            g.iter_mut().for_each(|v| *v = 0.0);
            for _ in 0..cfg.batch_size {
                let z = cl.sample_index(rng);
                cl.examples()[z].grad_into(&xk, &mut tmp);
                for (gi, ti) in g.iter_mut().zip(&tmp) {
                    *gi += ti;
                }
            }
            g.iter_mut().for_each(|v| *v *= inv_b);
        }
        for i in 0..d {
            acc[i] += theta * g[i];
            xk[i] -= cfg.gamma * g[i];
        }
    }
    Ok(Vector::new(acc))
}

/// Expected inner-loop output `Q_i A_i (x − c_i)`.
pub fn inner_loop_expected(cl: &Client, gamma: f64, theta: &ThetaWeights, x: &Vector) -> Result<Vector> {
    surrogate_client_grad(cl, gamma, theta, x)
}

/// How the server consumes the averaged client output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    /// `x ← x − η q`
    #[default]
    GradientSum,
    /// `x ← x − η γ q`, i.e. the server steps along the averaged model change.
    ModelDelta,
}

/// Server optimizer and its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ServerOptimizer {
    #[default]
    Sgd,
    Yogi {
        #[serde(default = "yogi_beta1")]
        beta1: f64,
        #[serde(default = "yogi_beta2")]
        beta2: f64,
        #[serde(default = "yogi_eps")]
        eps: f64,
    },
}

fn yogi_beta1() -> f64 {
    0.9
}
fn yogi_beta2() -> f64 {
    0.99
}
fn yogi_eps() -> f64 {
    1e-5
}

impl ServerOptimizer {
    pub fn yogi() -> Self {
        ServerOptimizer::Yogi {
            beta1: yogi_beta1(),
            beta2: yogi_beta2(),
            eps: yogi_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let ServerOptimizer::Yogi { beta1, beta2, eps } = *self {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                return Err(Error::InvalidParameter(format!(
                    "yogi betas must lie in [0, 1), got ({beta1}, {beta2})"
                )));
            }
            if !(eps > 0.0) {
                return Err(Error::InvalidParameter(format!("yogi eps must be > 0, got {eps}")));
            }
        }
        Ok(())
    }
}

/// Mutable server state: optimizer accumulators plus the update mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub optimizer: ServerOptimizer,
    pub mode: UpdateMode,
    pub m: Vector,
    pub v: Vector,
}

impl ServerState {
    pub fn new(optimizer: ServerOptimizer, mode: UpdateMode, dim: usize) -> Result<Self> {
        optimizer.validate()?;
        Ok(ServerState {
            optimizer,
            mode,
            m: Vector::zeros(dim),
            v: Vector::zeros(dim),
        })
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Applies one server step and returns the next iterate.
pub fn server_apply(state: &mut ServerState, x: &Vector, q: &Vector, eta: f64, gamma: f64) -> Result<Vector> {
    if !(eta >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "server learning rate must be >= 0, got {eta}"
        )));
    }
    x.check_dim(q.len())?;
    let q = match state.mode {
        UpdateMode::GradientSum => q.clone(),
        UpdateMode::ModelDelta => q.scale(gamma),
    };
    match state.optimizer {
        ServerOptimizer::Sgd => {
            let mut next = x.clone();
            next.axpy(-eta, &q);
            Ok(next)
        }
        ServerOptimizer::Yogi { beta1, beta2, eps } => {
            let mut next = x.clone();
            for i in 0..x.len() {
                let qi = q[i];
                let q2 = qi * qi;
                state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * qi;
                state.v[i] -= (1.0 - beta2) * q2 * sign(state.v[i] - q2);
                next[i] -= eta * state.m[i] / (state.v[i].sqrt() + eps);
            }
            Ok(next)
        }
    }
}

/// Learning-rate schedule, evaluated once per round `t ≥ 1`.
///
/// Parameters left out of the theorem-driven variants are derived from the
/// population and `Θ` at run time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    Constant {
        value: f64,
    },
    /// `a/(b + t)`
    InverseTime {
        a: f64,
        b: f64,
    },
    /// Server rate `a_γ/(b_γ + t)` with `a_γ = 2/μ_γ` and
    /// `b_γ = 2L_γ²/μ_γ²` unless given.
    FixedClientDecayingServer {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        a: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        b: Option<f64>,
    },
    /// Joint decay: `γ_t = min{1/(L(b+t)), ln2/(Kμ)}` and
    /// `η_t = (3/φ_{K,μ}(γ_t))/(b + t)` with `b = 3κ²` unless given.
    Joint {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        b: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        k: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mu: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        l: Option<f64>,
    },
    /// Server rate `λ_min(H̃)/λ_max(H̃)²` for the aggregate surrogate
    /// curvature `H̃` at the current client rate.
    DescentCap,
    /// `initial · factor^n` where `n` counts the listed rounds strictly
    /// before `t`.
    StepDecay {
        initial: f64,
        factor: f64,
        rounds: Vec<usize>,
    },
}

/// What a schedule may depend on besides `t`.
#[derive(Debug, Clone, Copy)]
pub struct ScheduleContext<'a> {
    pub mu: f64,
    pub l: f64,
    pub theta: &'a ThetaWeights,
    pub pop: Option<&'a Population>,
}

impl<'a> ScheduleContext<'a> {
    pub fn from_population(pop: &'a Population, theta: &'a ThetaWeights) -> Self {
        ScheduleContext {
            mu: pop.stats().mu,
            l: pop.stats().l,
            theta,
            pop: Some(pop),
        }
    }

    pub fn from_constants(mu: f64, l: f64, theta: &'a ThetaWeights) -> Self {
        ScheduleContext {
            mu,
            l,
            theta,
            pop: None,
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0) || !v.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "{name} must be finite and > 0, got {v}"
        )));
    }
    Ok(())
}

fn nonnegative(name: &str, v: f64) -> Result<()> {
    if !(v >= 0.0) || !v.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "{name} must be finite and >= 0, got {v}"
        )));
    }
    Ok(())
}

impl Schedule {
    pub fn constant(value: f64) -> Self {
        Schedule::Constant { value }
    }

    pub fn joint() -> Self {
        Schedule::Joint {
            b: None,
            k: None,
            mu: None,
            l: None,
        }
    }

    /// Checks parameters. `for_gamma` selects the client-rate rules, which
    /// allow zero values and only support a subset of variants.
    pub fn validate(&self, for_gamma: bool) -> Result<()> {
        let who = if for_gamma { "gamma schedule" } else { "eta schedule" };
        match self {
            Schedule::Constant { value } => {
                if for_gamma {
                    nonnegative(&format!("{who} value"), *value)
                } else {
                    positive(&format!("{who} value"), *value)
                }
            }
            Schedule::InverseTime { a, b } => {
                if for_gamma {
                    nonnegative(&format!("{who} a"), *a)?;
                } else {
                    positive(&format!("{who} a"), *a)?;
                }
                nonnegative(&format!("{who} b"), *b)
            }
            Schedule::FixedClientDecayingServer { a, b } => {
                if for_gamma {
                    return Err(Error::InvalidParameter(format!(
                        "{who}: fixed_client_decaying_server only applies to the server rate"
                    )));
                }
                if let Some(a) = a {
                    positive(&format!("{who} a"), *a)?;
                }
                if let Some(b) = b {
                    nonnegative(&format!("{who} b"), *b)?;
                }
                Ok(())
            }
            Schedule::Joint { b, k, mu, l } => {
                if let Some(b) = b {
                    nonnegative(&format!("{who} b"), *b)?;
                }
                if *k == Some(0) {
                    return Err(Error::InvalidParameter(format!("{who} k must be >= 1")));
                }
                if let Some(mu) = mu {
                    positive(&format!("{who} mu"), *mu)?;
                }
                if let Some(l) = l {
                    positive(&format!("{who} l"), *l)?;
                }
                if let (Some(mu), Some(l)) = (mu, l) {
                    if mu > l {
                        return Err(Error::InvalidParameter(format!("{who}: mu must not exceed l")));
                    }
                }
                Ok(())
            }
            Schedule::DescentCap => {
                if for_gamma {
                    return Err(Error::InvalidParameter(format!(
                        "{who}: descent_cap only applies to the server rate"
                    )));
                }
                Ok(())
            }
            Schedule::StepDecay {
                initial,
                factor,
                rounds,
            } => {
                if for_gamma {
                    nonnegative(&format!("{who} initial"), *initial)?;
                } else {
                    positive(&format!("{who} initial"), *initial)?;
                }
                if !(*factor > 0.0 && *factor <= 1.0) {
                    return Err(Error::InvalidParameter(format!(
                        "{who} factor must lie in (0, 1], got {factor}"
                    )));
                }
                if rounds.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::InvalidParameter(format!(
                        "{who} rounds must be strictly increasing"
                    )));
                }
                Ok(())
            }
        }
    }

    /// Value at round `t` for a constant-like schedule, if it does not
    /// depend on the round.
    pub fn constant_value(&self) -> Option<f64> {
        match self {
            Schedule::Constant { value } => Some(*value),
            _ => None,
        }
    }
}

fn joint_params(
    b: &Option<f64>,
    k: &Option<usize>,
    mu: &Option<f64>,
    l: &Option<f64>,
    ctx: &ScheduleContext,
) -> (f64, usize, f64, f64) {
    let mu = mu.unwrap_or(ctx.mu);
    let l = l.unwrap_or(ctx.l);
    let k = k.unwrap_or(ctx.theta.k());
    let b = b.unwrap_or(3.0 * (l / mu) * (l / mu));
    (b, k, mu, l)
}

/// `(μ_γ, L_γ) = (φ_{K,μ}(γ), φ_{K,L}(γ))`.
pub fn smoothness_params(mu: f64, l: f64, gamma: f64, k: usize) -> (f64, f64) {
    (phi(k, mu, gamma), phi(k, l, gamma))
}

/// Strong convexity and smoothness of the surrogate for the context's `Θ`:
/// exact for uniform weights, the generic spectral bounds otherwise.
fn context_smoothness(ctx: &ScheduleContext, gamma: f64) -> Result<(f64, f64)> {
    if ctx.theta.is_uniform() {
        let a = ctx.theta.as_slice()[0];
        let (m, l) = smoothness_params(ctx.mu, ctx.l, gamma, ctx.theta.k());
        return Ok((a * m, a * l));
    }
    qa_spectrum(ctx.mu, ctx.l, gamma, ctx.theta)
}

/// `a_γ = 2/μ_γ`, `b_γ = 2L_γ²/μ_γ²` from the decaying-server theorem.
pub fn decaying_server_params(mu_g: f64, l_g: f64) -> (f64, f64) {
    (2.0 / mu_g, 2.0 * (l_g / mu_g) * (l_g / mu_g))
}

/// Largest server rate allowed by the descent-lemma condition, `μ_γ/L_γ²`.
pub fn descent_cap(mu_g: f64, l_g: f64) -> f64 {
    mu_g / (l_g * l_g)
}

/// Evaluates `(γ_t, η_t)`. The client rate is computed first; the server
/// schedule may depend on it.
pub fn schedule_eval(gamma: &Schedule, eta: &Schedule, t: usize, ctx: &ScheduleContext) -> Result<(f64, f64)> {
    let g = eval_gamma(gamma, t, ctx)?;
    let e = eval_eta(eta, t, g, ctx)?;
    Ok((g, e))
}

fn check_round(t: usize) -> Result<()> {
    if t < 1 {
        return Err(Error::InvalidParameter("schedules are evaluated from round 1".into()));
    }
    Ok(())
}

fn step_decay(initial: f64, factor: f64, rounds: &[usize], t: usize) -> f64 {
    let n = rounds.iter().take_while(|&&r| r < t).count();
    initial * factor.powi(n as i32)
}

/// Client rate at round `t`.
pub fn eval_gamma(s: &Schedule, t: usize, ctx: &ScheduleContext) -> Result<f64> {
    check_round(t)?;
    match s {
        Schedule::Constant { value } => Ok(*value),
        Schedule::InverseTime { a, b } => Ok(a / (b + t as f64)),
        Schedule::Joint { b, k, mu, l } => {
            let (b, k, mu, l) = joint_params(b, k, mu, l, ctx);
            Ok((1.0 / (l * (b + t as f64))).min(std::f64::consts::LN_2 / (k as f64 * mu)))
        }
        Schedule::StepDecay {
            initial,
            factor,
            rounds,
        } => Ok(step_decay(*initial, *factor, rounds, t)),
        Schedule::FixedClientDecayingServer { .. } | Schedule::DescentCap => Err(Error::InvalidParameter(
            "this schedule only applies to the server rate".into(),
        )),
    }
}

/// Server rate at round `t` given the client rate `gamma` of that round.
pub fn eval_eta(s: &Schedule, t: usize, gamma: f64, ctx: &ScheduleContext) -> Result<f64> {
    check_round(t)?;
    match s {
        Schedule::Constant { value } => Ok(*value),
        Schedule::InverseTime { a, b } => Ok(a / (b + t as f64)),
        Schedule::FixedClientDecayingServer { a, b } => {
            let (a, b) = match (a, b) {
                (Some(a), Some(b)) => (*a, *b),
                _ => {
                    let (mu_g, l_g) = context_smoothness(ctx, gamma)?;
                    let (a0, b0) = decaying_server_params(mu_g, l_g);
                    (a.unwrap_or(a0), b.unwrap_or(b0))
                }
            };
            Ok(a / (b + t as f64))
        }
        Schedule::Joint { b, k, mu, l } => {
            let (b, k, mu, _) = joint_params(b, k, mu, l, ctx);
            Ok(3.0 / phi(k, mu, gamma) / (b + t as f64))
        }
        Schedule::DescentCap => {
            let pop = ctx
                .pop
                .ok_or_else(|| Error::InvalidParameter("descent_cap needs a population".into()))?;
            let h = surrogate_hessian(pop, gamma, ctx.theta);
            let e = sym_eigen_named(&h, "aggregate surrogate curvature")?;
            if !(e.min() > 0.0) {
                return Err(Error::Regime {
                    gamma,
                    reason: "aggregate surrogate curvature is not positive definite".into(),
                });
            }
            Ok(e.min() / (e.max() * e.max()))
        }
        Schedule::StepDecay {
            initial,
            factor,
            rounds,
        } => Ok(step_decay(*initial, *factor, rounds, t)),
    }
}

/// `KG²/(MB)`, the variance bound on the averaged client output.
pub fn variance_bound(g_sq: f64, k: usize, m: usize, b: usize) -> Result<f64> {
    if m < 1 || b < 1 {
        return Err(Error::InvalidParameter("M and B must be >= 1".into()));
    }
    Ok(k as f64 * g_sq / (m as f64 * b as f64))
}

/// `ηKG²/(μ_γ M B)`, the stationary error term for constant rates.
pub fn error_floor(eta: f64, k: usize, g_sq: f64, m: usize, b: usize, mu_g: f64) -> f64 {
    eta * k as f64 * g_sq / (mu_g * m as f64 * b as f64)
}

/// `ν_γ = max{4KG²/(μ_γ²MB), (b_γ + 1)‖x_1 − x_γ*‖²}`.
pub fn decaying_server_nu(k: usize, g_sq: f64, mu_g: f64, m: usize, b: usize, b_gamma: f64, dist1_sq: f64) -> f64 {
    let noise = 4.0 * k as f64 * g_sq / (mu_g * mu_g * m as f64 * b as f64);
    noise.max((b_gamma + 1.0) * dist1_sq)
}

/// `ν = max{18G²/(μ²KMB), (b + 1)‖x_1 − x_1*‖²}` for the joint schedule.
pub fn joint_nu(k: usize, g_sq: f64, mu: f64, m: usize, b: usize, b_joint: f64, dist1_sq: f64) -> f64 {
    let noise = 18.0 * g_sq / (mu * mu * k as f64 * m as f64 * b as f64);
    noise.max((b_joint + 1.0) * dist1_sq)
}

/// `(2ν + 16σ_c²κ²)/(b + t)`.
pub fn joint_bound(nu: f64, sigma_c_sq: f64, kappa: f64, b_joint: f64, t: usize) -> f64 {
    (2.0 * nu + 16.0 * sigma_c_sq * kappa * kappa) / (b_joint + t as f64)
}

/// Round-invariant parameters of the outer loop.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundParams {
    pub theta: ThetaWeights,
    pub clients_per_round: usize,
    pub batch_size: usize,
    pub master_seed: u64,
}

/// Result of one outer round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutput {
    pub x_next: Vector,
    pub q: Vector,
    /// `ℓ_t`, the aggregated client loss at the round's starting point.
    pub mean_client_loss: f64,
    /// Client indices in slot order.
    pub sampled: Vec<usize>,
}

/// Draws the `M` clients of round `t` uniformly without replacement.
pub fn sample_clients(n: usize, m: usize, master_seed: u64, t: usize) -> Result<Vec<usize>> {
    if m < 1 || m > n {
        return Err(Error::InvalidParameter(format!(
            "clients per round M = {m} must lie in [1, {n}]"
        )));
    }
    let mut rng = Stream::new(master_seed).derive_path(&[label::CLIENT_SAMPLING, t as u64]);
    Ok(index::sample(&mut rng, n, m).into_vec())
}

/// One round: sample `M` clients, run their inner loops (possibly in
/// parallel), aggregate and apply the server step.
///
/// Sampled client `i` contributes with coefficient `N w_i / M`, so the
/// aggregate is an unbiased estimate of the `𝒫`-weighted mean and equals it
/// exactly under full participation. Contributions are summed in slot order.
pub fn outer_round(
    pop: &Population,
    x: &Vector,
    gamma: f64,
    eta: f64,
    params: &RoundParams,
    server: &mut ServerState,
    t: usize,
) -> Result<RoundOutput> {
    x.check_dim(pop.dim())?;
    let cfg = InnerConfig::new(gamma, params.theta.clone(), params.batch_size)?;
    let sampled = sample_clients(pop.len(), params.clients_per_round, params.master_seed, t)?;
    let outputs: Vec<Result<(f64, Vector)>> = sampled
        .par_iter()
        .enumerate()
        .map(|(slot, &i)| {
            let cl = pop.client(i);
            let mut rng = Stream::for_slot(params.master_seed, label::INNER_LOOP, t as u64, slot as u64);
            let loss = cl.loss(x)?;
            let q = inner_loop(cl, x, &cfg, &mut rng)?;
            Ok((loss, q))
        })
        .collect();
    let scale = pop.len() as f64 / sampled.len() as f64;
    let mut q = Vector::zeros(pop.dim());
    let mut loss = 0.0;
    for (out, &i) in outputs.into_iter().zip(&sampled) {
        let (l_i, q_i) = out?;
        let coef = scale * pop.weights()[i];
        q.axpy(coef, &q_i);
        loss += coef * l_i;
    }
    let x_next = server_apply(server, x, &q, eta, gamma)?;
    Ok(RoundOutput {
        x_next,
        q,
        mean_client_loss: loss,
        sampled,
    })
}

/// Everything a run needs besides the population.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub theta: ThetaWeights,
    pub gamma: Schedule,
    pub eta: Schedule,
    pub server: ServerOptimizer,
    pub mode: UpdateMode,
    pub clients_per_round: usize,
    pub batch_size: usize,
    pub rounds: usize,
    pub x0: Vector,
    pub master_seed: u64,
    /// Worker threads for client inner loops; 0 uses the global pool.
    pub workers: usize,
}

impl RunSpec {
    /// Full participation, plain SGD on the gradient sum, constant rates.
    pub fn simple(pop: &Population, theta: ThetaWeights, gamma: f64, eta: f64, rounds: usize) -> Self {
        RunSpec {
            theta,
            gamma: Schedule::constant(gamma),
            eta: Schedule::constant(eta),
            server: ServerOptimizer::Sgd,
            mode: UpdateMode::GradientSum,
            clients_per_round: pop.len(),
            batch_size: 1,
            rounds,
            x0: Vector::zeros(pop.dim()),
            master_seed: 0,
            workers: 0,
        }
    }

    pub fn validate(&self, pop: &Population) -> Result<()> {
        self.gamma.validate(true)?;
        self.eta.validate(false)?;
        self.server.validate()?;
        if self.batch_size < 1 {
            return Err(Error::InvalidParameter("batch size B must be >= 1".into()));
        }
        if self.clients_per_round < 1 || self.clients_per_round > pop.len() {
            return Err(Error::InvalidParameter(format!(
                "clients per round M = {} must lie in [1, {}]",
                self.clients_per_round,
                pop.len()
            )));
        }
        self.x0.check_dim(pop.dim())
    }

    pub fn round_params(&self) -> RoundParams {
        RoundParams {
            theta: self.theta.clone(),
            clients_per_round: self.clients_per_round,
            batch_size: self.batch_size,
            master_seed: self.master_seed,
        }
    }

    /// Warnings for constant rates above the descent-lemma cap `μ_γ/L_γ²`.
    pub fn warnings(&self, pop: &Population) -> Vec<String> {
        let mut out = Vec::new();
        if let (Some(g), Some(e)) = (self.gamma.constant_value(), self.eta.constant_value()) {
            let ctx = ScheduleContext::from_population(pop, &self.theta);
            if let Ok((mu_g, l_g)) = context_smoothness(&ctx, g) {
                let cap = descent_cap(mu_g, l_g);
                if e > cap {
                    out.push(format!(
                        "server learning rate {e} exceeds the descent cap mu_gamma/L_gamma^2 = {cap:.6e}"
                    ));
                }
            }
        }
        out
    }
}

/// Per-round metrics, evaluated at the iterate `x_t` that starts round `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub gamma: f64,
    pub eta: f64,
    pub true_loss: f64,
    pub surrogate_loss: f64,
    pub dist_true_min: f64,
    pub dist_surrogate_min: f64,
    pub update_norm: f64,
    pub mean_client_loss: f64,
    pub decayed: bool,
}

/// Outcome of a run: metrics for rounds `1..=T` and the final iterate
/// `x_{T+1}`, or the round at which the iterate blew up.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub metrics: Vec<RoundMetrics>,
    pub final_x: Vector,
    pub diverged_at: Option<usize>,
}

/// Caches `x*(γ, Θ)` across rounds with the same client rate.
pub(crate) struct MinimizerCache {
    gamma: Option<u64>,
    x: Option<Vector>,
}

impl MinimizerCache {
    pub(crate) fn new() -> Self {
        MinimizerCache { gamma: None, x: None }
    }

    pub(crate) fn get(&mut self, pop: &Population, gamma: f64, theta: &ThetaWeights) -> Option<&Vector> {
        if self.gamma != Some(gamma.to_bits()) {
            self.gamma = Some(gamma.to_bits());
            self.x = surrogate_minimizer(pop, gamma, theta).ok();
        }
        self.x.as_ref()
    }
}

/// Caches server rates of [`Schedule::DescentCap`] by client rate.
pub(crate) struct EtaCache {
    gamma: Option<u64>,
    value: f64,
}

impl EtaCache {
    pub(crate) fn new() -> Self {
        EtaCache {
            gamma: None,
            value: 0.0,
        }
    }

    pub(crate) fn eval(&mut self, s: &Schedule, t: usize, gamma: f64, ctx: &ScheduleContext) -> Result<f64> {
        if !matches!(s, Schedule::DescentCap) {
            return eval_eta(s, t, gamma, ctx);
        }
        if self.gamma != Some(gamma.to_bits()) {
            self.value = eval_eta(s, t, gamma, ctx)?;
            self.gamma = Some(gamma.to_bits());
        }
        Ok(self.value)
    }
}

/// `½ Σ w_i (x − c_i)ᵀ Q_iA_i (x − c_i)` without the regime check, so that
/// metrics stay defined for any client rate.
pub(crate) fn surrogate_loss_value(pop: &Population, gamma: f64, theta: &ThetaWeights, x: &Vector) -> f64 {
    pop.iter()
        .map(|(cl, w)| {
            let qa = qa_matrix(cl, gamma, theta);
            let r = x.sub(cl.c_eff());
            w * 0.5 * qa.mul_vec(&r).map(|v| v.dot(&r)).unwrap_or(f64::NAN)
        })
        .sum()
}

pub(crate) fn diverged(x: &Vector) -> bool {
    !x.is_finite() || x.norm() > DIVERGENCE_NORM
}

/// Metrics shared by the plain and decaying drivers.
#[allow(clippy::too_many_arguments)]
pub(crate) fn round_metrics(
    pop: &Population,
    theta: &ThetaWeights,
    cache: &mut MinimizerCache,
    t: usize,
    gamma: f64,
    eta: f64,
    x: &Vector,
    out: &RoundOutput,
) -> Result<RoundMetrics> {
    let dist_surrogate_min = cache.get(pop, gamma, theta).map(|xs| x.dist(xs)).unwrap_or(f64::NAN);
    Ok(RoundMetrics {
        round: t,
        gamma,
        eta,
        true_loss: pop.true_loss(x)?,
        surrogate_loss: surrogate_loss_value(pop, gamma, theta, x),
        dist_true_min: x.dist(&pop.stats().x_star),
        dist_surrogate_min,
        update_norm: out.q.norm(),
        mean_client_loss: out.mean_client_loss,
        decayed: false,
    })
}

/// Runs `f` inside a pool with `workers` threads, or directly for 0.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if workers == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidParameter(format!("cannot build worker pool: {e}")))?;
    Ok(pool.install(f))
}

/// Runs `T` rounds of LocalUpdate with the given schedules.
pub fn run(pop: &Population, spec: &RunSpec) -> Result<RunResult> {
    spec.validate(pop)?;
    with_workers(spec.workers, || run_inner(pop, spec))?
}

fn run_inner(pop: &Population, spec: &RunSpec) -> Result<RunResult> {
    let params = spec.round_params();
    let ctx = ScheduleContext::from_population(pop, &spec.theta);
    let mut server = ServerState::new(spec.server, spec.mode, pop.dim())?;
    let mut cache = MinimizerCache::new();
    let mut eta_cache = EtaCache::new();
    let mut x = spec.x0.clone();
    let mut metrics = Vec::with_capacity(spec.rounds);
    for t in 1..=spec.rounds {
        if diverged(&x) {
            return Ok(RunResult {
                metrics,
                final_x: x,
                diverged_at: Some(t),
            });
        }
        let gamma = eval_gamma(&spec.gamma, t, &ctx)?;
        let eta = eta_cache.eval(&spec.eta, t, gamma, &ctx)?;
        let out = outer_round(pop, &x, gamma, eta, &params, &mut server, t)?;
        metrics.push(round_metrics(pop, &spec.theta, &mut cache, t, gamma, eta, &x, &out)?);
        x = out.x_next;
    }
    let diverged_at = diverged(&x).then_some(spec.rounds + 1);
    Ok(RunResult {
        metrics,
        final_x: x,
        diverged_at,
    })
}

pub const CSV_HEADER: &str =
    "round,gamma,eta,true_loss,surrogate_loss,dist_true_min,dist_surrogate_min,update_norm,mean_client_loss,decayed";

/// Formats a float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}

pub(crate) fn metrics_fields(m: &RoundMetrics) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{}",
        m.round,
        fmt_f64(m.gamma),
        fmt_f64(m.eta),
        fmt_f64(m.true_loss),
        fmt_f64(m.surrogate_loss),
        fmt_f64(m.dist_true_min),
        fmt_f64(m.dist_surrogate_min),
        fmt_f64(m.update_norm),
        fmt_f64(m.mean_client_loss),
        u8::from(m.decayed)
    )
}

/// Writes the metrics table; a trailing `# diverged` line marks a blown-up run.
pub fn write_metrics_csv<W: Write>(w: &mut W, result: &RunResult) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for m in &result.metrics {
        writeln!(w, "{}", metrics_fields(m))?;
    }
    if let Some(t) = result.diverged_at {
        writeln!(w, "# diverged at round {t}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::random_spd;
    use crate::problem::{make_synthetic, make_two_point, QuadraticExample, SyntheticParams};
    use crate::surrogate::{surrogate_grad, surrogate_minimizer};
    use rand::SeedableRng;
    use rand_distr::StandardNormal;

    fn scalar_client(a: f64, c: f64) -> Client {
        Client::single(QuadraticExample::scalar(a, c)).unwrap()
    }

    #[test]
    fn inner_config_validation() {
        let th = ThetaWeights::fedavg(2).unwrap();
        assert!(InnerConfig::new(-0.1, th.clone(), 1).is_err());
        assert!(InnerConfig::new(0.1, th.clone(), 0).is_err());
        assert!(InnerConfig::new(0.0, th, 3).is_ok());
    }

    #[test]
    fn inner_loop_hand_trace() {
        let cl = scalar_client(2.0, 0.5);
        let cfg = InnerConfig::new(0.25, ThetaWeights::fedavg(2).unwrap(), 1).unwrap();
        let q = inner_loop(&cl, &Vector::from_scalar(1.0), &cfg, &mut Stream::new(0)).unwrap();
        assert_eq!(q.get(0), 1.5);
        let e = inner_loop_expected(&cl, 0.25, &cfg.theta, &Vector::from_scalar(1.0)).unwrap();
        assert_eq!(e.get(0), 1.5);
    }

    #[test]
    fn inner_loop_at_optimum_is_zero() {
        let mut r = rand::rngs::StdRng::seed_from_u64(1);
        let a = random_spd(3, 0.5, 2.0, &mut r).unwrap();
        let c = Vector::new(vec![0.2, -0.4, 1.0]);
        let cl = Client::single(QuadraticExample::new(a, c.clone()).unwrap()).unwrap();
        for th in [ThetaWeights::fedavg(5).unwrap(), ThetaWeights::fomaml(3).unwrap()] {
            let cfg = InnerConfig::new(0.3, th, 2).unwrap();
            let q = inner_loop(&cl, &c, &cfg, &mut Stream::new(3)).unwrap();
            assert_eq!(q.max_abs(), 0.0);
        }
    }

    #[test]
    fn inner_loop_zero_gamma() {
        let cl = scalar_client(3.0, 1.0);
        let th = ThetaWeights::new(vec![0.5, 2.0, 1.0]).unwrap();
        let cfg = InnerConfig::new(0.0, th, 4).unwrap();
        let q = inner_loop(&cl, &Vector::from_scalar(2.0), &cfg, &mut Stream::new(0)).unwrap();
        assert_eq!(q.get(0), 3.5 * 3.0);
    }

    #[test]
    fn inner_loop_deterministic_matches_closed_form() {
        let mut r = rand::rngs::StdRng::seed_from_u64(7);
        for _ in 0..20 {
            let a = random_spd(4, 0.3, 3.0, &mut r).unwrap();
            let c = Vector::new((0..4).map(|_| r.sample(StandardNormal)).collect());
            let cl = Client::single(QuadraticExample::new(a, c).unwrap()).unwrap();
            let x = Vector::new((0..4).map(|_| r.sample(StandardNormal)).collect());
            let th = ThetaWeights::new((0..4).map(|_| r.random::<f64>()).chain([1.0]).collect()).unwrap();
            let gamma = r.random_range(0.0..1.0) / cl.l();
            let cfg = InnerConfig::new(gamma, th.clone(), 3).unwrap();
            let q = inner_loop(&cl, &x, &cfg, &mut Stream::new(9)).unwrap();
            let e = inner_loop_expected(&cl, gamma, &th, &x).unwrap();
            assert!(q.sub(&e).max_abs() < 1e-12);
        }
    }

    #[test]
    fn inner_loop_is_reproducible() {
        let pop = make_synthetic(&SyntheticParams::default()).unwrap();
        let cl = pop.client(0);
        let cfg = InnerConfig::new(0.1, ThetaWeights::fedavg(4).unwrap(), 2).unwrap();
        let x = Vector::zeros(pop.dim());
        let a = inner_loop(cl, &x, &cfg, &mut Stream::new(5)).unwrap();
        let b = inner_loop(cl, &x, &cfg, &mut Stream::new(5)).unwrap();
        let c = inner_loop(cl, &x, &cfg, &mut Stream::new(6)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn inner_loop_monte_carlo() {
        let pop = make_synthetic(&SyntheticParams {
            dim: 3,
            n_clients: 1,
            ..Default::default()
        })
        .unwrap();
        let cl = pop.client(0);
        let th = ThetaWeights::fedavg(3).unwrap();
        let cfg = InnerConfig::new(0.1, th.clone(), 2).unwrap();
        let x = Vector::new(vec![1.0, -1.0, 0.5]);
        let n = 20_000;
        let mut sum = Vector::zeros(3);
        let mut sq = Vector::zeros(3);
        let mut rng = Stream::new(11);
        for _ in 0..n {
            let q = inner_loop(cl, &x, &cfg, &mut rng).unwrap();
            for i in 0..3 {
                sum[i] += q[i];
                sq[i] += q[i] * q[i];
            }
        }
        let e = inner_loop_expected(cl, 0.1, &th, &x).unwrap();
        for i in 0..3 {
            let mean = sum[i] / n as f64;
            let var = sq[i] / n as f64 - mean * mean;
            assert!((mean - e[i]).abs() <= 5.0 * (var / n as f64).sqrt());
        }
    }

    #[test]
    fn server_apply_cases() {
        let x = Vector::new(vec![1.0, 2.0]);
        let zero = Vector::zeros(2);
        for opt in [ServerOptimizer::Sgd, ServerOptimizer::yogi()] {
            for mode in [UpdateMode::GradientSum, UpdateMode::ModelDelta] {
                let mut s = ServerState::new(opt, mode, 2).unwrap();
                assert_eq!(server_apply(&mut s, &x, &zero, 0.5, 0.1).unwrap(), x);
            }
        }
        let q = Vector::new(vec![3.0, -1.0]);
        let mut s = ServerState::new(ServerOptimizer::Sgd, UpdateMode::ModelDelta, 2).unwrap();
        assert_eq!(server_apply(&mut s, &x, &q, 0.5, 0.0).unwrap(), x);
        let mut s = ServerState::new(ServerOptimizer::Sgd, UpdateMode::GradientSum, 2).unwrap();
        assert_eq!(server_apply(&mut s, &x, &q, 0.5, 0.1).unwrap().as_slice(), &[-0.5, 2.5]);
        assert!(server_apply(&mut s, &x, &q, -1.0, 0.1).is_err());
    }

    #[test]
    fn yogi_hand_trace() {
        let mut s = ServerState::new(ServerOptimizer::yogi(), UpdateMode::GradientSum, 1).unwrap();
        let x = server_apply(&mut s, &Vector::from_scalar(0.0), &Vector::from_scalar(1.0), 1.0, 0.0).unwrap();
        assert!((s.m.get(0) - 0.1).abs() < 1e-15);
        assert!((s.v.get(0) - 0.01).abs() < 1e-15);
        assert!((x.get(0) + 0.1 / (0.1 + 1e-5)).abs() < 1e-12);
        assert!(ServerState::new(
            ServerOptimizer::Yogi {
                beta1: 0.9,
                beta2: 0.99,
                eps: 0.0
            },
            UpdateMode::GradientSum,
            1
        )
        .is_err());
    }

    #[test]
    fn model_delta_coupling() {
        let x = Vector::new(vec![0.3, -0.2]);
        let q = Vector::new(vec![1.5, 0.25]);
        let mut a = ServerState::new(ServerOptimizer::Sgd, UpdateMode::ModelDelta, 2).unwrap();
        let mut b = ServerState::new(ServerOptimizer::Sgd, UpdateMode::GradientSum, 2).unwrap();
        let (eta, gamma) = (0.5, 0.25);
        assert_eq!(
            server_apply(&mut a, &x, &q, eta, gamma).unwrap(),
            server_apply(&mut b, &x, &q, eta * gamma, gamma).unwrap()
        );
    }

    #[test]
    fn outer_round_hand_trace() {
        let pop = make_two_point();
        let params = RoundParams {
            theta: ThetaWeights::fedavg(2).unwrap(),
            clients_per_round: 2,
            batch_size: 1,
            master_seed: 1,
        };
        let mut s = ServerState::new(ServerOptimizer::Sgd, UpdateMode::GradientSum, 1).unwrap();
        let out = outer_round(&pop, &Vector::from_scalar(1.0), 0.25, 0.1, &params, &mut s, 1).unwrap();
        assert!((out.q.get(0) - 0.75).abs() < 1e-15);
        assert!((out.x_next.get(0) - 0.925).abs() < 1e-15);
        let out = outer_round(&pop, &Vector::from_scalar(1.0), 0.25, 0.0, &params, &mut s, 2).unwrap();
        assert_eq!(out.x_next.get(0), 1.0);
        let bad = RoundParams {
            clients_per_round: 3,
            ..params
        };
        assert!(outer_round(&pop, &Vector::from_scalar(1.0), 0.25, 0.1, &bad, &mut s, 1).is_err());
    }

    #[test]
    fn fedavg_equivalence() {
        let mut r = rand::rngs::StdRng::seed_from_u64(17);
        let clients: Vec<Client> = (0..5)
            .map(|_| {
                let a = random_spd(3, 0.5, 2.0, &mut r).unwrap();
                let c = Vector::new((0..3).map(|_| r.sample(StandardNormal)).collect());
                Client::single(QuadraticExample::new(a, c).unwrap()).unwrap()
            })
            .collect();
        let pop = Population::uniform(clients).unwrap();
        let gamma = 0.2;
        let k = 4;
        let x = Vector::new(vec![0.5, 1.0, -1.0]);
        let params = RoundParams {
            theta: ThetaWeights::fedavg(k).unwrap(),
            clients_per_round: 5,
            batch_size: 1,
            master_seed: 3,
        };
        let mut s = ServerState::new(ServerOptimizer::Sgd, UpdateMode::GradientSum, 3).unwrap();
        let out = outer_round(&pop, &x, gamma, gamma, &params, &mut s, 1).unwrap();
        let mut avg = Vector::zeros(3);
        for cl in pop.clients() {
            let mut xi = x.clone();
            for _ in 0..k {
                let g = cl.grad(&xi).unwrap();
                xi.axpy(-gamma, &g);
            }
            avg.axpy(0.2, &xi);
        }
        assert!(out.x_next.sub(&avg).max_abs() < 1e-12);
    }

    #[test]
    fn horvitz_thompson_is_unbiased() {
        let pop = Population::new(vec![
            (scalar_client(1.0, 0.0), 0.7),
            (scalar_client(2.0, 1.0), 0.2),
            (scalar_client(3.0, -1.0), 0.1),
        ])
        .unwrap();
        let th = ThetaWeights::fedavg(1).unwrap();
        let x = Vector::from_scalar(0.5);
        let want = pop.true_grad(&x).unwrap().get(0);
        let n = 30_000;
        let mut sum = 0.0;
        for t in 1..=n {
            let params = RoundParams {
                theta: th.clone(),
                clients_per_round: 2,
                batch_size: 1,
                master_seed: 4,
            };
            let mut s = ServerState::new(ServerOptimizer::Sgd, UpdateMode::GradientSum, 1).unwrap();
            sum += outer_round(&pop, &x, 0.0, 0.0, &params, &mut s, t).unwrap().q.get(0);
        }
        assert!((sum / n as f64 - want).abs() < 0.01);
    }

    #[test]
    fn sampling_is_without_replacement() {
        for t in 1..50 {
            let mut s = sample_clients(10, 7, 1, t).unwrap();
            s.sort();
            s.dedup();
            assert_eq!(s.len(), 7);
        }
        assert!(sample_clients(3, 0, 1, 1).is_err());
        assert!(sample_clients(3, 4, 1, 1).is_err());
    }

    #[test]
    fn schedules() {
        let th = ThetaWeights::fedavg(10).unwrap();
        let ctx = ScheduleContext::from_constants(1.0, 2.0, &th);
        let c = Schedule::constant(0.01);
        for t in [1, 10, 1000] {
            assert_eq!(eval_eta(&c, t, 0.3, &ctx).unwrap(), 0.01);
        }
        let (g, e) = schedule_eval(&Schedule::joint(), &Schedule::joint(), 1, &ctx).unwrap();
        assert!((g - 1.0 / 26.0).abs() < 1e-15);
        assert!((e - 3.0 / phi(10, 1.0, g) / 13.0).abs() < 1e-15);
        let mut prev = (f64::INFINITY, f64::INFINITY);
        for t in 1..500 {
            let (g, e) = schedule_eval(&Schedule::joint(), &Schedule::joint(), t, &ctx).unwrap();
            assert!(g > 0.0 && e > 0.0 && g <= prev.0 && e <= prev.1);
            prev = (g, e);
        }
        let (_, e) = schedule_eval(
            &Schedule::constant(0.1),
            &Schedule::FixedClientDecayingServer { a: None, b: None },
            1,
            &ctx,
        )
        .unwrap();
        let (mu_g, l_g) = smoothness_params(1.0, 2.0, 0.1, 10);
        let b = 2.0 * l_g * l_g / (mu_g * mu_g);
        assert!((e - (2.0 / mu_g) / (b + 1.0)).abs() < 1e-15);
        assert!(eval_eta(&Schedule::constant(1.0), 0, 0.1, &ctx).is_err());
        assert!(eval_gamma(&Schedule::DescentCap, 1, &ctx).is_err());
        assert!(eval_eta(&Schedule::DescentCap, 1, 0.1, &ctx).is_err());
        let s = Schedule::StepDecay {
            initial: 1.0,
            factor: 0.5,
            rounds: vec![2, 5],
        };
        let vals: Vec<f64> = (1..8).map(|t| eval_gamma(&s, t, &ctx).unwrap()).collect();
        assert_eq!(vals, vec![1.0, 1.0, 0.5, 0.5, 0.5, 0.25, 0.25]);
    }

    #[test]
    fn schedule_validation() {
        assert!(Schedule::constant(0.0).validate(true).is_ok());
        assert!(Schedule::constant(0.0).validate(false).is_err());
        assert!(Schedule::constant(-1.0).validate(true).is_err());
        assert!(Schedule::DescentCap.validate(true).is_err());
        assert!(Schedule::InverseTime { a: 1.0, b: -1.0 }.validate(false).is_err());
        assert!(Schedule::Joint {
            b: None,
            k: Some(0),
            mu: None,
            l: None
        }
        .validate(true)
        .is_err());
        assert!(Schedule::StepDecay {
            initial: 1.0,
            factor: 1.5,
            rounds: vec![]
        }
        .validate(false)
        .is_err());
        let s: Schedule = serde_json::from_str(r#"{"kind":"inverse_time","a":1.0,"b":2.0}"#).unwrap();
        assert_eq!(s, Schedule::InverseTime { a: 1.0, b: 2.0 });
    }

    #[test]
    fn smoothness_and_bounds() {
        assert_eq!(smoothness_params(1.0, 2.0, 0.0, 5), (5.0, 10.0));
        let (m, l) = smoothness_params(1.0, 2.0, 0.25, 2);
        assert!((m - 1.75).abs() < 1e-15 && (l - 3.0).abs() < 1e-15);
        assert_eq!(smoothness_params(0.3, 7.0, 0.1, 1), (0.3, 7.0));
        assert_eq!(variance_bound(0.0, 3, 2, 2).unwrap(), 0.0);
        assert_eq!(variance_bound(4.0, 10, 5, 2).unwrap(), 4.0);
        assert!(variance_bound(4.0, 10, 0, 2).is_err());
        assert_eq!(error_floor(0.1, 3, 0.0, 2, 1, 1.0), 0.0);
        let f1 = error_floor(0.1, 3, 2.0, 2, 1, 1.5);
        let f2 = error_floor(0.1, 3, 2.0, 4, 1, 1.5);
        assert!((f1 - 2.0 * f2).abs() < 1e-15);
        assert_eq!(descent_cap(1.0, 2.0), 0.25);
    }

    #[test]
    fn run_converges_to_true_minimizer_at_zero_gamma() {
        let pop = make_two_point();
        for k in [1, 3] {
            let th = ThetaWeights::fedavg(k).unwrap();
            let spec = RunSpec::simple(&pop, th.clone(), 0.0, 0.1 * th.tau(), 2000);
            let r = run(&pop, &spec).unwrap();
            assert!((r.final_x.get(0) - 2.0 / 3.0).abs() < 1e-8);
            assert_eq!(r.metrics.len(), 2000);
        }
    }

    #[test]
    fn run_converges_to_surrogate_minimizer() {
        let pop = make_two_point();
        let spec = RunSpec::simple(&pop, ThetaWeights::fedavg(2).unwrap(), 0.2, 0.1, 2000);
        let r = run(&pop, &spec).unwrap();
        assert!((r.final_x.get(0) - 0.68).abs() < 1e-8);
        let last = r.metrics.last().unwrap();
        assert!((last.dist_true_min - 1.0 / 75.0).abs() < 1e-6);
        assert!(last.dist_surrogate_min < 1e-8);
    }

    #[test]
    fn run_with_zero_rounds() {
        let pop = make_two_point();
        let mut spec = RunSpec::simple(&pop, ThetaWeights::fedavg(2).unwrap(), 0.2, 0.1, 0);
        spec.x0 = Vector::from_scalar(3.0);
        let r = run(&pop, &spec).unwrap();
        assert!(r.metrics.is_empty());
        assert_eq!(r.final_x.get(0), 3.0);
    }

    #[test]
    fn run_marks_divergence() {
        let pop = make_two_point();
        let spec = RunSpec::simple(&pop, ThetaWeights::fedavg(2).unwrap(), 0.2, 10.0, 500);
        let r = run(&pop, &spec).unwrap();
        assert!(r.diverged_at.is_some());
        assert!(r.metrics.len() < 500);
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &r).unwrap();
        assert!(String::from_utf8(buf).unwrap().contains("# diverged at round"));
    }

    #[test]
    fn run_is_deterministic_across_workers() {
        let pop = make_synthetic(&SyntheticParams {
            n_clients: 12,
            ..Default::default()
        })
        .unwrap();
        let mut spec = RunSpec::simple(&pop, ThetaWeights::fedavg(3).unwrap(), 0.05, 0.05, 40);
        spec.clients_per_round = 5;
        spec.batch_size = 2;
        spec.master_seed = 99;
        let mut outs = Vec::new();
        for w in [1, 3, 8] {
            spec.workers = w;
            let r = run(&pop, &spec).unwrap();
            let mut buf = Vec::new();
            write_metrics_csv(&mut buf, &r).unwrap();
            outs.push(buf);
        }
        assert_eq!(outs[0], outs[1]);
        assert_eq!(outs[0], outs[2]);
    }

    #[test]
    fn descent_cap_schedule_one_step_in_1d() {
        let pop = make_two_point();
        let th = ThetaWeights::fedavg(3).unwrap();
        let mut spec = RunSpec::simple(&pop, th.clone(), 0.3, 1.0, 3);
        spec.eta = Schedule::DescentCap;
        let r = run(&pop, &spec).unwrap();
        let xs = surrogate_minimizer(&pop, 0.3, &th).unwrap();
        assert!(r.final_x.sub(&xs).max_abs() < 1e-14);
        assert!(surrogate_grad(&pop, 0.3, &th, &r.final_x).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn warnings_flag_large_eta() {
        let pop = make_two_point();
        let spec = RunSpec::simple(&pop, ThetaWeights::fedavg(2).unwrap(), 0.2, 5.0, 1);
        assert_eq!(spec.warnings(&pop).len(), 1);
        let spec = RunSpec::simple(&pop, ThetaWeights::fedavg(2).unwrap(), 0.2, 0.01, 1);
        assert!(spec.warnings(&pop).is_empty());
    }

    #[test]
    fn csv_format() {
        let m = RoundMetrics {
            round: 3,
            gamma: 0.5,
            eta: 0.1,
            true_loss: 1.0 / 3.0,
            surrogate_loss: 0.0,
            dist_true_min: 2.0,
            dist_surrogate_min: f64::NAN,
            update_norm: 1.0,
            mean_client_loss: 1.0,
            decayed: true,
        };
        let s = metrics_fields(&m);
        assert!(s.starts_with("3,5.0000000000000000e-1,"));
        assert!(s.contains("3.3333333333333331e-1"));
        assert!(s.ends_with(",1"));
        assert_eq!(s.split(',').count(), CSV_HEADER.split(',').count());
    }
}
