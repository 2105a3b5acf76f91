//! Closed-form surrogate analytics.
//!
//! A round of local updates with client step size `γ` and weights `Θ` is, in
//! expectation, one gradient step on the surrogate
//! `f̃(x) = Σ_i w_i ½(x − c_i)ᵀ Q_i A_i (x − c_i)` with distortion matrix
//! `Q_i = Σ_k θ_k (I − γA_i)^{k−1}`. This module evaluates the distortion
//! matrices, the surrogate loss and its minimizer, the spectral maps that
//! govern its conditioning, and the bounds on how far the surrogate
//! minimizer drifts from the true one.
//!
//! Power sums are evaluated by Horner iteration; eigendecompositions are only
//! used for norms and for the independent checks in the tests.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{operator_norm, quad_form, sym_eigen_named, sym_inverse_named, sym_solve, SymMatrix, Vector};
use crate::problem::{Client, Population, PopulationStats};

/// Coefficients `(θ_1, …, θ_K)` selecting which local gradients a client
/// reports. Trailing zeros are trimmed so the last entry is positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ThetaWeights(Vec<f64>);

impl ThetaWeights {
    pub fn new(mut weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "theta weights must be finite and nonnegative, got {weights:?}"
            )));
        }
        while weights.last() == Some(&0.0) {
            weights.pop();
        }
        if weights.is_empty() {
            return Err(Error::InvalidParameter(
                "theta needs at least one positive weight".into(),
            ));
        }
        Ok(ThetaWeights(weights))
    }

    /// `Θ_{1:K}`: FedAvg / Reptile with `K` local steps.
    pub fn fedavg(k: usize) -> Result<Self> {
        check_k(k)?;
        Ok(ThetaWeights(vec![1.0; k]))
    }

    /// `Θ_K`: first-order MAML, reporting only the last of `K` gradients.
    pub fn fomaml(k: usize) -> Result<Self> {
        check_k(k)?;
        let mut w = vec![0.0; k];
        w[k - 1] = 1.0;
        Ok(ThetaWeights(w))
    }

    /// `Θ_{2K+1}`, which reproduces MAML with `K` gradient-descent steps on
    /// quadratics.
    pub fn maml_equiv(k: usize) -> Result<Self> {
        check_k(k)?;
        Self::fomaml(2 * k + 1)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// `K(Θ)`, the number of local steps.
    pub fn k(&self) -> usize {
        self.0.len()
    }

    /// `Σ θ_k`
    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    /// `τ = (Σ θ_k)⁻¹`
    pub fn tau(&self) -> f64 {
        1.0 / self.sum()
    }

    /// All weights equal (a scaled `Θ_{1:K}`).
    pub fn is_uniform(&self) -> bool {
        self.0.iter().all(|&w| w == self.0[0])
    }

    /// Only the last weight is nonzero (a scaled `Θ_K`).
    pub fn is_last_only(&self) -> bool {
        self.0[..self.0.len() - 1].iter().all(|&w| w == 0.0)
    }

    /// `Σ θ_k r^{k−1}` by Horner's rule.
    pub fn poly(&self, r: f64) -> f64 {
        self.0.iter().rev().fold(0.0, |acc, &t| acc * r + t)
    }
}

fn check_k(k: usize) -> Result<()> {
    if k < 1 {
        return Err(Error::InvalidParameter("number of local steps K must be >= 1".into()));
    }
    Ok(())
}

impl TryFrom<Vec<f64>> for ThetaWeights {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        ThetaWeights::new(v)
    }
}

impl From<ThetaWeights> for Vec<f64> {
    fn from(t: ThetaWeights) -> Self {
        t.0
    }
}

/// A bound that may be infinite when its denominator vanishes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bound {
    Finite(f64),
    Unbounded,
}

impl Bound {
    pub fn dominates(&self, value: f64) -> bool {
        match self {
            Bound::Finite(b) => value <= *b,
            Bound::Unbounded => true,
        }
    }

    pub fn finite(&self) -> Option<f64> {
        match self {
            Bound::Finite(b) => Some(*b),
            Bound::Unbounded => None,
        }
    }
}

impl std::fmt::Display for Bound {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Bound::Finite(b) => write!(f, "{b:.6e}"),
            Bound::Unbounded => write!(f, "unbounded"),
        }
    }
}

fn regime(gamma: f64, limit: f64, what: &str) -> Result<()> {
    if !(gamma >= 0.0) || !(gamma < limit) {
        return Err(Error::Regime {
            gamma,
            reason: format!("requires 0 <= gamma < {limit} ({what})"),
        });
    }
    Ok(())
}

/// `Q_i(γ, Θ) = Σ θ_k (I − γA_i)^{k−1}`, valid for any `γ`.
pub fn distortion_matrix(cl: &Client, gamma: f64, theta: &ThetaWeights) -> SymMatrix {
    distortion_of(cl.a_eff(), gamma, theta)
}

/// Distortion matrix for an arbitrary curvature `a`.
pub fn distortion_of(a: &SymMatrix, gamma: f64, theta: &ThetaWeights) -> SymMatrix {
    let d = a.dim();
    let step = a.scale(-gamma).add_identity(1.0);
    let w = theta.as_slice();
    let mut acc = SymMatrix::scaled_identity(d, w[w.len() - 1]);
    for &t in w[..w.len() - 1].iter().rev() {
        acc = step.sym_product(&acc).expect("matching dimensions").add_identity(t);
    }
    acc
}

/// `(I − γA)^k` by repeated squaring.
pub fn step_matrix_power(a: &SymMatrix, gamma: f64, k: usize) -> SymMatrix {
    let mut base = a.scale(-gamma).add_identity(1.0);
    let mut acc = SymMatrix::identity(a.dim());
    let mut e = k;
    while e > 0 {
        if e & 1 == 1 {
            acc = acc.sym_product(&base).expect("matching dimensions");
        }
        e >>= 1;
        if e > 0 {
            base = base.sym_product(&base).expect("matching dimensions");
        }
    }
    acc
}

/// Geometric-sum form `(I − (I − γA_i)^K)(γA_i)⁻¹` of `Q_i(γ, Θ_{1:K})`,
/// defined for `γ > 0`.
pub fn fedavg_distortion_closed_form(cl: &Client, gamma: f64, k: usize) -> Result<SymMatrix> {
    check_k(k)?;
    if !(gamma > 0.0) {
        return Err(Error::Regime {
            gamma,
            reason: "the geometric-sum form needs gamma > 0".into(),
        });
    }
    let a = cl.a_eff();
    let num = SymMatrix::identity(a.dim()).sub(&step_matrix_power(a, gamma, k))?;
    let inv = sym_inverse_named(&a.scale(gamma), "gamma * client curvature")?;
    num.sym_product(&inv)
}

/// Symmetrized `Q_i(γ, Θ) A_i`.
pub fn qa_matrix(cl: &Client, gamma: f64, theta: &ThetaWeights) -> SymMatrix {
    distortion_matrix(cl, gamma, theta)
        .sym_product(cl.a_eff())
        .expect("matching dimensions")
}

/// Expected inner-loop output `Q_i A_i (x − c_i)`.
pub fn surrogate_client_grad(cl: &Client, gamma: f64, theta: &ThetaWeights, x: &Vector) -> Result<Vector> {
    x.check_dim(cl.dim())?;
    let g = cl.grad(x)?;
    distortion_matrix(cl, gamma, theta).mul_vec(&g)
}

/// `½ (x − c_i)ᵀ Q_i A_i (x − c_i)`; requires `γ < 1/L_i` so that the form is
/// positive definite.
pub fn surrogate_client_loss(cl: &Client, gamma: f64, theta: &ThetaWeights, x: &Vector) -> Result<f64> {
    x.check_dim(cl.dim())?;
    regime(gamma, 1.0 / cl.l(), "client surrogate must be positive definite")?;
    let qa = qa_matrix(cl, gamma, theta);
    Ok(0.5 * quad_form(&qa, &x.sub(cl.c_eff()))?)
}

/// `f̃(x, γ, Θ) = Σ w_i f̃_i(x, γ, Θ)`.
pub fn surrogate_loss(pop: &Population, gamma: f64, theta: &ThetaWeights, x: &Vector) -> Result<f64> {
    let mut s = 0.0;
    for (cl, w) in pop.iter() {
        s += w * surrogate_client_loss(cl, gamma, theta, x)?;
    }
    Ok(s)
}

/// `∇f̃(x, γ, Θ) = Σ w_i Q_i A_i (x − c_i)`.
pub fn surrogate_grad(pop: &Population, gamma: f64, theta: &ThetaWeights, x: &Vector) -> Result<Vector> {
    let mut g = Vector::zeros(pop.dim());
    for (cl, w) in pop.iter() {
        g.axpy(w, &surrogate_client_grad(cl, gamma, theta, x)?);
    }
    Ok(g)
}

/// Aggregate surrogate curvature `Σ w_i Q_i A_i`.
pub fn surrogate_hessian(pop: &Population, gamma: f64, theta: &ThetaWeights) -> SymMatrix {
    let mut h = SymMatrix::zeros(pop.dim());
    for (cl, w) in pop.iter() {
        h.axpy(w, &qa_matrix(cl, gamma, theta));
    }
    h
}

/// `x*(γ, Θ) = (Σ w_i Q_iA_i)⁻¹ Σ w_i Q_iA_i c_i`.
///
/// Only the aggregate curvature needs to be positive definite, so this also
/// covers step sizes where individual client surrogates are indefinite.
pub fn surrogate_minimizer(pop: &Population, gamma: f64, theta: &ThetaWeights) -> Result<Vector> {
    if !(gamma >= 0.0) {
        return Err(Error::Regime {
            gamma,
            reason: "client learning rate must be nonnegative".into(),
        });
    }
    let d = pop.dim();
    let mut h = SymMatrix::zeros(d);
    let mut rhs = Vector::zeros(d);
    for (cl, w) in pop.iter() {
        let qa = qa_matrix(cl, gamma, theta);
        rhs.axpy(w, &qa.mul_vec(cl.c_eff())?);
        h.axpy(w, &qa);
    }
    sym_solve(&h, &rhs, "aggregate surrogate curvature").map_err(|e| match e {
        Error::Singular { lambda_min, .. } => Error::Regime {
            gamma,
            reason: format!("aggregate surrogate curvature is not positive definite (lambda_min = {lambda_min:e})"),
        },
        other => other,
    })
}

/// The limit of `x*(γ, Θ_{1:K})` as `K → ∞`: the average client minimizer.
pub fn asymptotic_minimizer(pop: &Population) -> Vector {
    pop.stats().c_bar.clone()
}

/// `φ_{K,λ}(γ) = γ⁻¹(1 − (1 − γλ)^K)`, extended by `φ_{K,λ}(0) = Kλ`.
pub fn phi(k: usize, lambda: f64, gamma: f64) -> f64 {
    let x = gamma * lambda;
    if gamma == 0.0 || k == 1 {
        k as f64 * lambda
    } else if x.abs() < 1.0 {
        -(k as f64 * (-x).ln_1p()).exp_m1() / gamma
    } else {
        (1.0 - (1.0 - x).powi(k as i32)) / gamma
    }
}

/// `Kλ − φ_{K,λ}(γ)`, without cancellation for small `γ`.
pub fn phi_deficit(k: usize, lambda: f64, gamma: f64) -> f64 {
    let x = gamma * lambda;
    if gamma == 0.0 {
        return 0.0;
    }
    if x.abs() < 1.0 {
        let l = (-x).ln_1p();
        (1..k).map(|j| -lambda * (j as f64 * l).exp_m1()).sum()
    } else {
        k as f64 * lambda - phi(k, lambda, gamma)
    }
}

/// Eigenvalue of `Q_i` belonging to eigenvalue `λ` of `A_i`.
pub fn q_eigenvalue(lambda: f64, gamma: f64, theta: &ThetaWeights) -> f64 {
    theta.poly(1.0 - gamma * lambda)
}

/// Eigenvalue of `Q_i A_i` belonging to eigenvalue `λ` of `A_i`.
pub fn qa_eigenvalue(lambda: f64, gamma: f64, theta: &ThetaWeights) -> f64 {
    q_eigenvalue(lambda, gamma, theta) * lambda
}

/// Extreme eigenvalues of `Q_i A_i` from the extreme eigenvalues of `A_i`.
///
/// For uniform `Θ` (FedAvg) the eigenvalue map is increasing when
/// `γ < 1/L_i`, and for last-only `Θ` (FOMAML) when `γ < 1/(K L_i)`; the
/// result is then exact. Any other `Θ` gets the generic two-sided bound
/// `(Σθ_k(1−γL_i)^{k−1}μ_i, Σθ_k(1−γμ_i)^{k−1}L_i)`.
pub fn qa_spectrum(mu_i: f64, l_i: f64, gamma: f64, theta: &ThetaWeights) -> Result<(f64, f64)> {
    if theta.is_last_only() && theta.k() > 1 {
        regime(gamma, 1.0 / (theta.k() as f64 * l_i), "last-only theta spectrum")?;
        return Ok((qa_eigenvalue(mu_i, gamma, theta), qa_eigenvalue(l_i, gamma, theta)));
    }
    regime(gamma, 1.0 / l_i, "surrogate spectrum")?;
    if theta.is_uniform() {
        let a = theta.as_slice()[0];
        let k = theta.k();
        return Ok((a * phi(k, mu_i, gamma), a * phi(k, l_i, gamma)));
    }
    Ok((
        theta.poly(1.0 - gamma * l_i) * mu_i,
        theta.poly(1.0 - gamma * mu_i) * l_i,
    ))
}

/// Exact extreme eigenvalues of the symmetrized `Q_iA_i` of a client,
/// from the eigenvalue map applied to every eigenvalue of `A_i`.
pub fn client_qa_extremes(cl: &Client, gamma: f64, theta: &ThetaWeights) -> Result<(f64, f64)> {
    let eig = sym_eigen_named(cl.a_eff(), "client curvature")?;
    let mapped = eig.values.iter().map(|&l| qa_eigenvalue(l, gamma, theta));
    Ok(mapped.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v))))
}

/// Upper bound on the condition number of the surrogate.
pub fn condition_bound(mu: f64, l: f64, gamma: f64, theta: &ThetaWeights) -> Result<f64> {
    let k = theta.k();
    if theta.is_last_only() && k > 1 {
        regime(gamma, 1.0 / (k as f64 * l), "last-only theta condition bound")?;
        return Ok(((1.0 - gamma * l) / (1.0 - gamma * mu)).powi(k as i32 - 1) * l / mu);
    }
    regime(gamma, 1.0 / l, "condition bound")?;
    if theta.is_uniform() {
        return Ok(phi(k, l, gamma) / phi(k, mu, gamma));
    }
    let (lo, hi) = qa_spectrum(mu, l, gamma, theta)?;
    Ok(hi / lo)
}

/// `χ(γ, Θ) = Σθ_k(1 − γL)^{k−1} / Σθ_k`.
pub fn chi(gamma: f64, theta: &ThetaWeights, l: f64) -> f64 {
    theta.poly(1.0 - gamma * l) / theta.sum()
}

/// Distance bound for general `Θ`:
/// `‖x*(γ,Θ) − x*‖ ≤ (Lσ_c/μ)(1 + σ_A/μ)(1 − χ)/χ`.
pub fn distance_bound_general(stats: &PopulationStats, gamma: f64, theta: &ThetaWeights) -> Result<Bound> {
    regime(gamma, 1.0 / stats.l, "distance bound")?;
    if stats.sigma_c_sq == 0.0 || gamma == 0.0 {
        return Ok(Bound::Finite(0.0));
    }
    let c = chi(gamma, theta, stats.l);
    if !(c > 0.0) {
        return Ok(Bound::Unbounded);
    }
    let prefactor = stats.l * stats.sigma_c() / stats.mu * (1.0 + stats.sigma_a() / stats.mu);
    Ok(Bound::Finite(prefactor * (1.0 - c) / c))
}

/// FedAvg distance bound:
/// `‖x*(γ,Θ_{1:K}) − x*‖ ≤ σ_c(1 + σ_A/μ)(KL − φ_{K,L}(γ))/φ_{K,μ}(γ)`.
pub fn distance_bound_fedavg(stats: &PopulationStats, gamma: f64, k: usize) -> Result<Bound> {
    check_k(k)?;
    regime(gamma, 1.0 / stats.l, "FedAvg distance bound")?;
    if stats.sigma_c_sq == 0.0 || gamma == 0.0 {
        return Ok(Bound::Finite(0.0));
    }
    let denom = phi(k, stats.mu, gamma);
    if !(denom > 0.0) {
        return Ok(Bound::Unbounded);
    }
    let lead = stats.sigma_c() * (1.0 + stats.sigma_a() / stats.mu);
    Ok(Bound::Finite(lead * phi_deficit(k, stats.l, gamma) / denom))
}

/// Largest `γ` with `φ_{K,λ}(γ) ≥ (1 − ε)Kλ` for every `λ ≤ L`:
/// `ln(1/(1 − ε))/(KL)`.
pub fn gamma_for_eps(k: usize, l: f64, eps: f64) -> Result<f64> {
    check_eps(k, eps)?;
    Ok(-(-eps).ln_1p() / (k as f64 * l))
}

fn check_eps(k: usize, eps: f64) -> Result<()> {
    check_k(k)?;
    let hi = -(-(k as f64)).exp_m1();
    if !(eps >= 0.0) || eps > hi {
        return Err(Error::InvalidParameter(format!(
            "epsilon must lie in [0, 1 - e^-K] = [0, {hi}], got {eps}"
        )));
    }
    Ok(())
}

/// `σ_c(1 + σ_A/μ)(L/μ)ε/(1 − ε)`, valid at `γ = gamma_for_eps(K, L, ε)`.
pub fn distance_bound_eps(stats: &PopulationStats, k: usize, eps: f64) -> Result<f64> {
    check_eps(k, eps)?;
    Ok(stats.sigma_c() * (1.0 + stats.sigma_a() / stats.mu) * stats.kappa() * eps / (1.0 - eps))
}

/// Bounds on `‖x*(γ1, Θ_{1:K}) − x*(γ2, Θ_{1:K})‖` for `γ1 ≤ γ2 < 1/L`:
/// the φ-ratio form and the looser `2σ_c(L³/μ²)(γ2 − γ1)`.
pub fn distance_bound_gamma_pair(stats: &PopulationStats, k: usize, gamma1: f64, gamma2: f64) -> Result<(f64, f64)> {
    check_k(k)?;
    if !(gamma1 >= 0.0) || !(gamma1 <= gamma2) {
        return Err(Error::InvalidParameter(format!(
            "gamma pair needs 0 <= gamma1 <= gamma2, got ({gamma1}, {gamma2})"
        )));
    }
    regime(gamma2, 1.0 / stats.l, "gamma-pair distance bound")?;
    let (mu, l) = (stats.mu, stats.l);
    let sc = stats.sigma_c();
    if sc == 0.0 || gamma1 == gamma2 {
        return Ok((0.0, 0.0));
    }
    let ratio2 = phi(k, l, gamma2) / phi(k, mu, gamma2);
    let spread = phi_deficit(k, l, gamma2) - phi_deficit(k, l, gamma1);
    let tight = sc * (1.0 + ratio2) * spread / phi(k, mu, gamma1);
    let simple = 2.0 * sc * l.powi(3) / (mu * mu) * (gamma2 - gamma1);
    Ok((tight, simple))
}

/// Everything about the surrogate at one `(γ, Θ)`.
#[derive(Debug, Clone)]
pub struct SurrogateAnalysis {
    pub gamma: f64,
    pub theta: ThetaWeights,
    /// Per-client distortion matrices.
    pub q: Vec<SymMatrix>,
    /// Aggregate curvature `Σ w_i Q_iA_i`.
    pub hessian: SymMatrix,
    pub x_surr: Vector,
    pub mu_surr: f64,
    pub l_surr: f64,
    pub kappa_surr: f64,
}

impl SurrogateAnalysis {
    /// Requires `γ < 1/L`, where every client surrogate is strongly convex.
    pub fn new(pop: &Population, gamma: f64, theta: &ThetaWeights) -> Result<Self> {
        regime(gamma, 1.0 / pop.stats().l, "surrogate analysis")?;
        let q = pop
            .clients()
            .iter()
            .map(|c| distortion_matrix(c, gamma, theta))
            .collect();
        let hessian = surrogate_hessian(pop, gamma, theta);
        let eig = sym_eigen_named(&hessian, "aggregate surrogate curvature")?;
        let x_surr = surrogate_minimizer(pop, gamma, theta)?;
        Ok(SurrogateAnalysis {
            gamma,
            theta: theta.clone(),
            q,
            hessian,
            x_surr,
            mu_surr: eig.min(),
            l_surr: eig.max(),
            kappa_surr: eig.max() / eig.min(),
        })
    }

    /// `Ã_i = τ Q_i A_i`.
    pub fn a_tilde(&self, pop: &Population, i: usize) -> SymMatrix {
        self.q[i]
            .sym_product(pop.client(i).a_eff())
            .expect("matching dimensions")
            .scale(self.theta.tau())
    }
}

/// `‖τ Q_i(γ, Θ_{1:K}) A_i − A_i‖`, the per-client surrogate discrepancy.
pub fn fedavg_discrepancy(cl: &Client, gamma: f64, k: usize) -> Result<f64> {
    let theta = ThetaWeights::fedavg(k)?;
    let qa = qa_matrix(cl, gamma, &theta).scale(theta.tau());
    operator_norm(&qa.sub(cl.a_eff())?)
}
