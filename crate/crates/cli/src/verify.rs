//! Named verification suites. Each suite returns checks of the form
//! `observed <= bound`; the report prints one line per check.

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;

use fedsurrogate::linalg::{random_spd, sym_eigen, Vector};
use fedsurrogate::localupdate::{
    eval_eta, eval_gamma, inner_loop, inner_loop_expected, outer_round, run, server_apply, smoothness_params,
    variance_bound, write_metrics_csv, RoundParams, RunSpec, Schedule, ScheduleContext, ServerOptimizer, ServerState,
    UpdateMode,
};
use fedsurrogate::lrdecay::{decay_step, run_decay, DecayConfig, DecayState};
use fedsurrogate::maml::{gd_k_steps, maml_grad, maml_round, MamlConfig};
use fedsurrogate::problem::{make_two_point, Client, Population, QuadraticExample};
use fedsurrogate::rng::{label, Stream};
use fedsurrogate::surrogate::{
    asymptotic_minimizer, condition_bound, distance_bound_fedavg, distance_bound_gamma_pair, distance_bound_general,
    distortion_matrix, fedavg_discrepancy, fedavg_distortion_closed_form, gamma_for_eps, phi, phi_deficit,
    q_eigenvalue, qa_eigenvalue, qa_matrix, qa_spectrum, surrogate_client_grad, surrogate_client_loss, surrogate_grad,
    surrogate_minimizer, Bound, SurrogateAnalysis, ThetaWeights,
};
use fedsurrogate::Result;

/// Sizes of the randomized suites.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Inner-loop draws per Monte-Carlo estimate.
    pub mc_draws: usize,
    /// Random instances per randomized check.
    pub instances: usize,
    /// Seeds for the statistical convergence checks.
    pub seeds: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            seed: 0,
            mc_draws: 100_000,
            instances: 1000,
            seeds: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub observed: f64,
    pub bound: f64,
    pub pass: bool,
}

impl Check {
    /// Passes when `observed <= bound`.
    pub fn le(suite: &'static str, name: &str, observed: f64, bound: f64) -> Self {
        Check {
            suite,
            name: name.to_string(),
            observed,
            bound,
            pass: observed <= bound,
        }
    }

    /// Passes when `observed >= bound`.
    pub fn ge(suite: &'static str, name: &str, observed: f64, bound: f64) -> Self {
        Check {
            suite,
            name: name.to_string(),
            observed,
            bound,
            pass: observed >= bound,
        }
    }

    /// Boolean property reported as a violation count against 0.
    pub fn holds(suite: &'static str, name: &str, violations: usize) -> Self {
        Check::le(suite, name, violations as f64, 0.0)
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}.{} {:.6e} {:.6e}",
            if self.pass { "PASS" } else { "FAIL" },
            self.suite,
            self.name,
            self.observed,
            self.bound
        )
    }
}

type SuiteFn = fn(&VerifyOptions) -> Result<Vec<Check>>;

/// All suites in report order.
pub const SUITES: &[(&str, SuiteFn)] = &[
    ("closed_forms", closed_forms),
    ("theorem1", theorem1),
    ("spectra", spectra),
    ("surrogate", surrogate_identities),
    ("bounds", bounds),
    ("lemmas", lemmas),
    ("asymptotic", asymptotic),
    ("maml", maml),
    ("schedules", schedules),
    ("localupdate", localupdate),
    ("decay", decay),
    ("convergence", convergence),
];

pub fn suite_names() -> Vec<&'static str> {
    SUITES.iter().map(|(n, _)| *n).collect()
}

/// Runs one suite by name, or every suite for `"all"`.
pub fn run_suites(name: &str, opts: &VerifyOptions) -> Result<Vec<Check>> {
    if name == "all" {
        let mut out = Vec::new();
        for (_, f) in SUITES {
            out.extend(f(opts)?);
        }
        return Ok(out);
    }
    match SUITES.iter().find(|(n, _)| *n == name) {
        Some((_, f)) => f(opts),
        None => Err(fedsurrogate::Error::InvalidParameter(format!(
            "unknown suite '{name}'; available: all, {}",
            suite_names().join(", ")
        ))),
    }
}

fn stream(opts: &VerifyOptions, suite: u64) -> Stream {
    Stream::new(opts.seed).derive_path(&[label::VERIFY, suite])
}

fn gaussian_vector(rng: &mut impl Rng, d: usize, scale: f64) -> Vector {
    Vector::new((0..d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect())
}

/// Random single-example client with spectrum inside `[lo, hi]`.
pub fn random_client(rng: &mut impl Rng, d: usize, lo: f64, hi: f64) -> Result<Client> {
    let a = random_spd(d, lo, hi, rng)?;
    let c = gaussian_vector(rng, d, 1.0);
    Client::single(QuadraticExample::new(a, c)?)
}

/// Random client whose examples share one curvature and differ in center.
pub fn random_stochastic_client(rng: &mut impl Rng, d: usize, lo: f64, hi: f64) -> Result<Client> {
    let a = random_spd(d, lo, hi, rng)?;
    let n = rng.random_range(2..=5);
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let center = gaussian_vector(rng, d, 1.0);
    let mut examples = Vec::with_capacity(n);
    for p in raw {
        let c = center.add(&gaussian_vector(rng, d, 0.7));
        examples.push((QuadraticExample::new(a.clone(), c)?, p / total));
    }
    Client::new(examples)
}

/// Random population of single-example clients with random weights.
pub fn random_population(rng: &mut impl Rng, d: usize, n: usize, lo: f64, hi: f64) -> Result<Population> {
    let mut clients = Vec::with_capacity(n);
    for _ in 0..n {
        let w = rng.random_range(0.1..1.0);
        clients.push((random_client(rng, d, lo, hi)?, w));
    }
    let total: f64 = clients.iter().map(|(_, w)| w).sum();
    for c in clients.iter_mut() {
        c.1 /= total;
    }
    Population::new(clients)
}

/// Random `Θ`: uniform, last-only, or arbitrary nonnegative weights.
pub fn random_theta(rng: &mut impl Rng, max_k: usize) -> Result<ThetaWeights> {
    let k = rng.random_range(1..=max_k);
    match rng.random_range(0..3) {
        0 => ThetaWeights::fedavg(k),
        1 => ThetaWeights::fomaml(k),
        _ => {
            let mut w: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..2.0)).collect();
            w[k - 1] = rng.random_range(0.1..2.0);
            ThetaWeights::new(w)
        }
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

fn two_point_minimizer(gamma: f64, k: usize) -> f64 {
    surrogate_minimizer(&make_two_point(), gamma, &ThetaWeights::fedavg(k).unwrap())
        .map(|v| v.get(0))
        .unwrap_or(f64::NAN)
}

fn closed_forms(_: &VerifyOptions) -> Result<Vec<Check>> {
    const S: &str = "closed_forms";
    let mut out = Vec::new();
    let mut err = 0.0f64;
    for g in [0.0, 0.1, 0.2, 0.4] {
        err = err.max((two_point_minimizer(g, 2) - (4.0 - 3.0 * g) / (6.0 - 5.0 * g)).abs());
    }
    out.push(Check::le(S, "two_point_minimizer_gamma", err, 1e-12));
    let mut err = 0.0f64;
    for k in 1..=20 {
        let p = 2f64.powi(k as i32);
        err = err.max((two_point_minimizer(0.5, k) - (3.0 * p - 2.0) / (4.0 * p - 2.0)).abs());
    }
    out.push(Check::le(S, "two_point_minimizer_k_series", err, 1e-12));
    let mut err = 0.0f64;
    for g in [0.0, 0.1, 0.2, 0.4] {
        err = err.max(((two_point_minimizer(g, 2) - 2.0 / 3.0).abs() - g / (3.0 * (6.0 - 5.0 * g))).abs());
    }
    for k in 1..=20 {
        let p = 2f64.powi(k as i32);
        err = err.max(((two_point_minimizer(0.5, k) - 2.0 / 3.0).abs() - (p - 2.0) / (6.0 * (2.0 * p - 1.0))).abs());
    }
    out.push(Check::le(S, "two_point_gap", err, 1e-12));
    let q = distortion_matrix(
        &Client::single(QuadraticExample::scalar(2.0, 0.0))?,
        0.25,
        &ThetaWeights::fedavg(2)?,
    );
    out.push(Check::le(S, "distortion_scalar", (q.get(0, 0) - 1.5).abs(), 0.0));
    out.push(Check::le(S, "phi_example", (phi(2, 2.0, 0.25) - 3.0).abs(), 1e-15));
    Ok(out)
}

fn theorem1(opts: &VerifyOptions) -> Result<Vec<Check>> {
    const S: &str = "theorem1";
    let mut rng = stream(opts, 1);
    let mut worst_z = 0.0f64;
    let mut worst_det = 0.0f64;
    let mut worst_var = 0.0f64;
    for j in 0..20u64 {
        let d = rng.random_range(1..=6);
        let cl = random_stochastic_client(&mut rng, d, 0.3, 3.0)?;
        let theta = random_theta(&mut rng, 5)?;
        let gamma = rng.random_range(0.0..1.0) / cl.l();
        let b = rng.random_range(1..=3);
        let cfg = fedsurrogate::localupdate::InnerConfig::new(gamma, theta.clone(), b)?;
        let x = gaussian_vector(&mut rng, d, 1.5);
        let expected = inner_loop_expected(&cl, gamma, &theta, &x)?;
        let n = opts.mc_draws;
        let mut mean = vec![0.0; d];
        let mut m2 = vec![0.0; d];
        let mut draws = Stream::new(opts.seed).derive_path(&[label::VERIFY, 1, j]);
        let mut tot_var = 0.0;
        for s in 1..=n {
            let q = inner_loop(&cl, &x, &cfg, &mut draws)?;
            for i in 0..d {
                let delta = q[i] - mean[i];
                mean[i] += delta / s as f64;
                m2[i] += delta * (q[i] - mean[i]);
            }
        }
        for i in 0..d {
            let var = m2[i] / (n as f64 - 1.0);
            tot_var += var;
            let se = (var / n as f64).sqrt();
            if se > 0.0 {
                worst_z = worst_z.max((mean[i] - expected[i]).abs() / se);
            }
        }
        if theta.is_uniform() && theta.as_slice()[0] == 1.0 {
            let bound = variance_bound(cl.grad_noise_sq()?, theta.k(), 1, b)?;
            worst_var = worst_var.max(tot_var / bound);
        }
        let det = Client::single(QuadraticExample::new(cl.a_eff().clone(), cl.c_eff().clone())?)?;
        let q = inner_loop(&det, &x, &cfg, &mut Stream::new(j))?;
        let e = inner_loop_expected(&det, gamma, &theta, &x)?;
        worst_det = worst_det.max(q.sub(&e).max_abs());
    }
    Ok(vec![
        Check::le(S, "monte_carlo_standard_errors", worst_z, 5.0),
        Check::le(S, "deterministic_exact", worst_det, 1e-12),
        Check::le(
            S,
            "variance_over_bound",
            worst_var,
            1.0 + 5.0 / (opts.mc_draws as f64).sqrt(),
        ),
    ])
}

fn spectra(opts: &VerifyOptions) -> Result<Vec<Check>> {
    const S: &str = "spectra";
    let mut rng = stream(opts, 2);
    let (mut e_fedavg, mut e_fomaml, mut e_general, mut e_q, mut e_geo, mut e_bounds) =
        (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..opts.instances {
        let d = rng.random_range(1..=8);
        let lo = rng.random_range(0.05..1.0);
        let hi = lo * rng.random_range(1.0..20.0);
        let cl = random_client(&mut rng, d, lo, hi)?;
        let eig_a = sym_eigen(cl.a_eff())?;
        let k = rng.random_range(1..=20);
        let gamma = rng.random_range(0.0..1.0) / cl.l();
        let cases = [
            (ThetaWeights::fedavg(k)?, 0),
            (ThetaWeights::fomaml(k)?, 1),
            (random_theta(&mut rng, 20)?, 2),
        ];
        for (theta, kind) in cases {
            let got = sym_eigen(&qa_matrix(&cl, gamma, &theta))?;
            let mut want: Vec<f64> = eig_a
                .values
                .iter()
                .map(|&l| match kind {
                    0 => phi(k, l, gamma),
                    1 => (1.0 - gamma * l).powi(k as i32 - 1) * l,
                    _ => qa_eigenvalue(l, gamma, &theta),
                })
                .collect();
            want.sort_by(f64::total_cmp);
            let err = got
                .values
                .iter()
                .zip(&want)
                .map(|(a, b)| rel_err(*a, *b))
                .fold(0.0, f64::max);
            match kind {
                0 => e_fedavg = e_fedavg.max(err),
                1 => e_fomaml = e_fomaml.max(err),
                _ => e_general = e_general.max(err),
            }
            let qe = sym_eigen(&distortion_matrix(&cl, gamma, &theta))?;
            let mut qw: Vec<f64> = eig_a.values.iter().map(|&l| q_eigenvalue(l, gamma, &theta)).collect();
            qw.sort_by(f64::total_cmp);
            e_q = e_q.max(
                qe.values
                    .iter()
                    .zip(&qw)
                    .map(|(a, b)| rel_err(*a, *b))
                    .fold(0.0, f64::max),
            );
            if let Ok((lo_b, hi_b)) = qa_spectrum(cl.mu(), cl.l(), gamma, &theta) {
                let exact = theta.is_uniform() || theta.is_last_only();
                if exact {
                    e_bounds = e_bounds.max(rel_err(got.min(), lo_b)).max(rel_err(got.max(), hi_b));
                } else {
                    let slack = 1e-12 * hi_b.abs().max(1.0);
                    if got.min() < lo_b - slack || got.max() > hi_b + slack {
                        e_bounds = f64::INFINITY;
                    }
                }
            }
        }
        if gamma > 0.0 {
            let direct = distortion_matrix(&cl, gamma, &ThetaWeights::fedavg(k)?);
            let closed = fedavg_distortion_closed_form(&cl, gamma, k)?;
            e_geo = e_geo.max(direct.sub(&closed)?.frobenius_norm() / direct.frobenius_norm().max(1.0));
        }
    }
    Ok(vec![
        Check::le(S, "fedavg_eigenvalues", e_fedavg, 1e-9),
        Check::le(S, "fomaml_eigenvalues", e_fomaml, 1e-9),
        Check::le(S, "general_eigenvalues", e_general, 1e-9),
        Check::le(S, "distortion_eigenvalues", e_q, 1e-10),
        Check::le(S, "geometric_sum", e_geo, 1e-10),
        Check::le(S, "spectrum_endpoints", e_bounds, 1e-9),
    ])
}

fn surrogate_identities(opts: &VerifyOptions) -> Result<Vec<Check>> {
    const S: &str = "surrogate";
    let mut rng = stream(opts, 3);
    let (mut e_sym, mut e_fd, mut e_stat, mut e_zero) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let n = (opts.instances / 5).max(1);
    for _ in 0..n {
        let d = rng.random_range(1..=6);
        let cl = random_client(&mut rng, d, 0.2, 4.0)?;
        let theta = random_theta(&mut rng, 8)?;
        let gamma = rng.random_range(0.0..0.99) / cl.l();
        let x = gaussian_vector(&mut rng, d, 1.0);
        let g = surrogate_client_grad(&cl, gamma, &theta, &x)?;
        let sym = qa_matrix(&cl, gamma, &theta).mul_vec(&x.sub(cl.c_eff()))?;
        e_sym = e_sym.max(g.sub(&sym).max_abs() / g.max_abs().max(1.0));
        let h = 1e-5;
        for i in 0..d {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (surrogate_client_loss(&cl, gamma, &theta, &xp)?
                - surrogate_client_loss(&cl, gamma, &theta, &xm)?)
                / (2.0 * h);
            e_fd = e_fd.max((fd - g[i]).abs() / g[i].abs().max(1.0));
        }
        let s0 = surrogate_client_loss(&cl, 0.0, &theta, &x)?;
        e_zero = e_zero.max(rel_err(s0, theta.sum() * (cl.loss(&x)? - cl.tau())));
    }
    for _ in 0..(n / 5).max(1) {
        let d = rng.random_range(1..=6);
        let n = rng.random_range(1..=10);
        let pop = random_population(&mut rng, d, n, 0.2, 4.0)?;
        let theta = random_theta(&mut rng, 8)?;
        let gamma = rng.random_range(0.0..0.99) / pop.stats().l;
        let xs = surrogate_minimizer(&pop, gamma, &theta)?;
        e_stat = e_stat.max(surrogate_grad(&pop, gamma, &theta, &xs)?.max_abs());
    }
    Ok(vec![
        Check::le(S, "gradient_is_symmetric_form", e_sym, 1e-10),
        Check::le(S, "gradient_finite_difference", e_fd, 1e-6),
        Check::le(S, "minimizer_stationary", e_stat, 1e-10),
        Check::le(S, "zero_gamma_scaled_loss", e_zero, 1e-12),
    ])
}

/// `exact / bound`; a zero bound admits rounding noise of size `zero_tol`.
fn exact_ratio(exact: f64, b: Bound, zero_tol: f64) -> f64 {
    match b {
        Bound::Finite(v) if v > 0.0 => exact / v,
        Bound::Finite(_) => {
            if exact <= zero_tol {
                0.0
            } else {
                f64::INFINITY
            }
        }
        Bound::Unbounded => 0.0,
    }
}

/// Solve accuracy for `x*(γ,Θ)`: unit roundoff scaled by the condition
/// number of the aggregate surrogate curvature and the solution size.
fn solve_tol(pop: &Population, gamma: f64, theta: &ThetaWeights, x: &Vector) -> Result<f64> {
    let e = sym_eigen(&fedsurrogate::surrogate::surrogate_hessian(pop, gamma, theta))?;
    Ok(1e-13 * (e.max() / e.min()) * (1.0 + x.norm()))
}

fn bounds(opts: &VerifyOptions) -> Result<Vec<Check>> {
    const S: &str = "bounds";
    let mut rng = stream(opts, 4);
    let (mut r_general, mut r_fedavg, mut r_tight, mut r_simple) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut nonzero_at_zero = 0usize;
    let mut nonzero_homogeneous = 0usize;
    const GRID: usize = 8;
    for _ in 0..opts.instances {
        let d = rng.random_range(1..=8);
        let n = rng.random_range(1..=20);
        let lo = rng.random_range(0.1..1.0);
        let hi = lo * rng.random_range(1.0..10.0);
        let pop = random_population(&mut rng, d, n, lo, hi)?;
        let s = pop.stats();
        let k = rng.random_range(1..=10);
        let fedavg = ThetaWeights::fedavg(k)?;
        let theta = random_theta(&mut rng, 10)?;
        let gammas: Vec<f64> = (0..GRID).map(|j| 0.95 * j as f64 / ((GRID - 1) as f64 * s.l)).collect();
        let mins: Vec<Vector> = gammas
            .iter()
            .map(|&g| surrogate_minimizer(&pop, g, &fedavg))
            .collect::<Result<_>>()?;
        for (j, &g) in gammas.iter().enumerate() {
            let exact = mins[j].dist(&s.x_star);
            let fb = distance_bound_fedavg(s, g, k)?;
            r_fedavg = r_fedavg.max(exact_ratio(exact, fb, solve_tol(&pop, g, &fedavg, &mins[j])?));
            let gt = surrogate_minimizer(&pop, g, &theta)?;
            let gb = distance_bound_general(s, g, &theta)?;
            r_general = r_general.max(exact_ratio(gt.dist(&s.x_star), gb, solve_tol(&pop, g, &theta, &gt)?));
            if g == 0.0 && (fb != Bound::Finite(0.0) || gb != Bound::Finite(0.0)) {
                nonzero_at_zero += 1;
            }
            for i in 0..j {
                let pair = mins[i].dist(&mins[j]);
                let (tight, simple) = distance_bound_gamma_pair(s, k, gammas[i], g)?;
                let tol = solve_tol(&pop, g, &fedavg, &mins[j])?;
                r_tight = r_tight.max(exact_ratio(pair, Bound::Finite(tight), tol));
                r_simple = r_simple.max(exact_ratio(pair, Bound::Finite(simple), tol));
            }
        }
    }
    for _ in 0..(opts.instances / 50).max(1) {
        let d = rng.random_range(1..=5);
        let cl = random_client(&mut rng, d, 0.3, 3.0)?;
        let pop = Population::uniform(vec![cl.clone(), cl.clone(), cl])?;
        let s = pop.stats();
        let theta = random_theta(&mut rng, 6)?;
        for j in 0..GRID {
            let g = 0.95 * j as f64 / ((GRID - 1) as f64 * s.l);
            let k = theta.k();
            let zero = distance_bound_general(s, g, &theta)?.finite().unwrap_or(1.0)
                + distance_bound_fedavg(s, g, k)?.finite().unwrap_or(1.0)
                + distance_bound_gamma_pair(s, k, 0.0, g)?.0
                + distance_bound_gamma_pair(s, k, 0.0, g)?.1;
            if zero > 1e-12 {
                nonzero_homogeneous += 1;
            }
        }
    }
    Ok(vec![
        Check::le(S, "general_dominates", r_general, 1.0),
        Check::le(S, "fedavg_dominates", r_fedavg, 1.0),
        Check::le(S, "gamma_pair_tight_dominates", r_tight, 1.0),
        Check::le(S, "gamma_pair_simple_dominates", r_simple, 1.0),
        Check::holds(S, "zero_at_gamma_zero", nonzero_at_zero),
        Check::holds(S, "zero_when_homogeneous", nonzero_homogeneous),
    ])
}

fn lemmas(opts: &VerifyOptions) -> Result<Vec<Check>> {
    const S: &str = "lemmas";
    let mut rng = stream(opts, 5);
    let mut ratio = 0.0f64;
    let mut eps_short = 0.0f64;
    let mut cond_low = 0usize;
    for _ in 0..opts.instances {
        let mu = rng.random_range(0.01..2.0);
        let l = mu * rng.random_range(1.0..50.0);
        let k = rng.random_range(1..=50);
        for j in 0..=20 {
            let g = j as f64 / (20.0 * l);
            ratio = ratio.max((phi(k, l, g) / phi(k, mu, g)) / (l / mu) - 1.0);
            if j < 20 {
                let kb = condition_bound(mu, l, g, &ThetaWeights::fedavg(k)?)?;
                if kb < 1.0 - 1e-12 || kb > l / mu * (1.0 + 1e-12) {
                    cond_low += 1;
                }
            }
        }
        let eps = rng.random_range(0.0..1.0) * -(-(k as f64)).exp_m1();
        let g = gamma_for_eps(k, l, eps)?;
        for lam in [mu, l] {
            eps_short = eps_short.max((1.0 - eps) * k as f64 * lam - phi(k, lam, g));
        }
    }
    let mut disc = 0.0f64;
    let mut kappa = 0.0f64;
    for _ in 0..(opts.instances / 5).max(1) {
        let d = rng.random_range(1..=6);
        let n = rng.random_range(1..=6);
        let pop = random_population(&mut rng, d, n, 0.2, 3.0)?;
        let l = pop.stats().l;
        let k = rng.random_range(1..=15);
        let g = rng.random_range(0.0..1.0) / l;
        for cl in pop.clients() {
            let lhs = fedavg_discrepancy(cl, g, k)?;
            let rhs = phi_deficit(k, l, g) / k as f64;
            disc = disc.max(lhs - rhs);
        }
        for theta in [ThetaWeights::fedavg(k)?, ThetaWeights::fomaml(k)?] {
            let g = if theta.is_last_only() { g / k as f64 } else { g };
            let an = SurrogateAnalysis::new(&pop, g, &theta)?;
            let kb = condition_bound(pop.stats().mu, l, g, &theta)?;
            kappa = kappa.max(an.kappa_surr / kb - 1.0);
        }
    }
    Ok(vec![
        Check::le(S, "phi_ratio_below_condition_number", ratio, 1e-12),
        Check::holds(S, "condition_bound_in_range", cond_low),
        Check::le(S, "discrepancy", disc, 1e-12),
        Check::le(S, "small_gamma_phi", eps_short, 1e-12),
        Check::le(S, "surrogate_condition_below_bound", kappa, 1e-10),
    ])
}

/// Largest step up of `K ↦ ‖x*(γ,Θ_{1:K}) − c̄‖` over `K = 1..=200` and the
/// final distance.
fn distance_to_average_profile(pop: &Population, gamma: f64) -> Result<(f64, f64)> {
    let cbar = asymptotic_minimizer(pop);
    let mut prev = f64::INFINITY;
    let mut increase = 0.0f64;
    let mut last = 0.0;
    for k in 1..=200 {
        let dist = surrogate_minimizer(pop, gamma, &ThetaWeights::fedavg(k)?)?.dist(&cbar);
        increase = increase.max(dist - prev);
        prev = dist;
        last = dist;
    }
    Ok((increase, last / (1e-6 * (1.0 + cbar.norm()))))
}

fn asymptotic(opts: &VerifyOptions) -> Result<Vec<Check>> {
    const S: &str = "asymptotic";
    let mut rng = stream(opts, 6);
    let mut tail = 0.0f64;
    for _ in 0..(opts.instances / 50).max(1) {
        let d = rng.random_range(1..=5);
        let n = rng.random_range(2..=8);
        let pop = random_population(&mut rng, d, n, 1.0, 4.0)?;
        let g = 0.5 / pop.stats().l;
        if (1.0 - g * pop.stats().mu).powi(200) < 1e-8 {
            tail = tail.max(distance_to_average_profile(&pop, g)?.1);
        }
    }
    let mut two_increase = 0.0f64;
    for _ in 0..(opts.instances / 10).max(1) {
        let clients = (0..2)
            .map(|_| {
                let a = rng.random_range(0.5..4.0);
                Client::single(QuadraticExample::scalar(a, rng.random_range(-2.0..2.0)))
            })
            .collect::<Result<Vec<_>>>()?;
        let w = rng.random_range(0.1..0.9);
        let pop = Population::new(vec![(clients[0].clone(), w), (clients[1].clone(), 1.0 - w)])?;
        let g = rng.random_range(0.05..0.95) / pop.stats().l;
        two_increase = two_increase.max(distance_to_average_profile(&pop, g)?.0);
    }
    let three = Population::uniform(vec![
        Client::single(QuadraticExample::scalar(1.0, 3.0))?,
        Client::single(QuadraticExample::scalar(2.0, -1.0))?,
        Client::single(QuadraticExample::scalar(4.0, 2.0))?,
    ])?;
    let (three_increase, _) = distance_to_average_profile(&three, 0.125)?;
    Ok(vec![
        Check::le(S, "limit_reached_at_k200", tail, 1.0),
        Check::le(S, "two_scalar_clients_nonincreasing_in_k", two_increase, 1e-12),
        Check::ge(S, "three_scalar_clients_not_monotone", three_increase, 1e-2),
    ])
}

fn maml(opts: &VerifyOptions) -> Result<Vec<Check>> {
    const S: &str = "maml";
    let mut rng = stream(opts, 7);
    let (mut e_eq, mut e_fd, mut e_gd) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..(opts.instances / 2).max(1) {
        let d = rng.random_range(1..=6);
        let cl = random_client(&mut rng, d, 0.2, 3.0)?;
        let k = rng.random_range(1..=5);
        let gamma = rng.random_range(0.0..1.5) / cl.l();
        let cfg = MamlConfig::new(gamma, k)?;
        let x = gaussian_vector(&mut rng, d, 1.0);
        let g = maml_grad(&cl, &x, &cfg)?;
        let s = surrogate_client_grad(&cl, gamma, &ThetaWeights::maml_equiv(k)?, &x)?;
        e_eq = e_eq.max(g.sub(&s).max_abs());
        let h = 1e-5;
        for i in 0..d {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (cl.loss(&gd_k_steps(&cl, &xp, &cfg)?)? - cl.loss(&gd_k_steps(&cl, &xm, &cfg)?)?) / (2.0 * h);
            e_fd = e_fd.max((fd - g[i]).abs() / g[i].abs().max(1.0));
        }
        let mut xs = x.clone();
        for _ in 0..k {
            let gr = cl.grad(&xs)?;
            xs.axpy(-gamma, &gr);
        }
        e_gd = e_gd.max(gd_k_steps(&cl, &x, &cfg)?.sub(&xs).max_abs());
    }
    let pop = make_two_point();
    let gap = surrogate_minimizer(&pop, 0.2, &ThetaWeights::fomaml(2)?)?.dist(&surrogate_minimizer(
        &pop,
        0.2,
        &ThetaWeights::maml_equiv(2)?,
    )?);
    let params = RoundParams {
        theta: ThetaWeights::maml_equiv(2)?,
        clients_per_round: 2,
        batch_size: 1,
        master_seed: opts.seed,
    };
    let cfg = MamlConfig::new(0.2, 2)?;
    let (mut x, mut y) = (Vector::from_scalar(0.0), Vector::from_scalar(0.0));
    let mut e_round = 0.0f64;
    for t in 1..=100 {
        let mut srv = ServerState::new(ServerOptimizer::Sgd, UpdateMode::GradientSum, 1)?;
        y = outer_round(&pop, &y, 0.2, 0.3, &params, &mut srv, t)?.x_next;
        x = maml_round(&pop, &x, 2, &cfg, 0.3, opts.seed, t)?;
        e_round = e_round.max(x.sub(&y).max_abs());
    }
    Ok(vec![
        Check::le(S, "equals_theta_2k_plus_1", e_eq, 1e-12),
        Check::le(S, "finite_difference", e_fd, 1e-6),
        Check::le(S, "gd_closed_form", e_gd, 1e-12),
        Check::le(S, "round_equals_local_update", e_round, 1e-12),
        Check::ge(S, "fomaml_stationary_gap", gap, 1e-6),
    ])
}

fn schedules(_: &VerifyOptions) -> Result<Vec<Check>> {
    const S: &str = "schedules";
    let mut out = Vec::new();
    let th = ThetaWeights::fedavg(10)?;
    let ctx = ScheduleContext::from_constants(1.0, 2.0, &th);
    let joint = Schedule::joint();
    let g1 = eval_gamma(&joint, 1, &ctx)?;
    out.push(Check::le(S, "joint_gamma_1", (g1 - 1.0 / 26.0).abs(), 1e-15));
    let mut bad = 0usize;
    let mut prev = (f64::INFINITY, f64::INFINITY);
    let mut tg_lo = f64::INFINITY;
    let mut tg_hi = 0.0f64;
    for t in 1..=100_000usize {
        let g = eval_gamma(&joint, t, &ctx)?;
        let e = eval_eta(&joint, t, g, &ctx)?;
        if !(g > 0.0 && e > 0.0 && g <= prev.0 && e <= prev.1) {
            bad += 1;
        }
        prev = (g, e);
        if t >= 1000 {
            tg_lo = tg_lo.min(g * t as f64);
            tg_hi = tg_hi.max(g * t as f64);
        }
    }
    out.push(Check::holds(S, "joint_positive_nonincreasing", bad));
    out.push(Check::le(S, "joint_gamma_inverse_time", tg_hi / tg_lo, 1.1));
    let gamma = 0.1;
    let (mu_g, l_g) = smoothness_params(1.0, 2.0, gamma, 10);
    let e1 = eval_eta(
        &Schedule::FixedClientDecayingServer { a: None, b: None },
        1,
        gamma,
        &ctx,
    )?;
    let want = (2.0 / mu_g) / (2.0 * l_g * l_g / (mu_g * mu_g) + 1.0);
    out.push(Check::le(S, "decaying_server_eta_1", rel_err(e1, want), 1e-15));
    let (m, l) = smoothness_params(1.0, 2.0, 0.25, 2);
    out.push(Check::le(
        S,
        "smoothness_example",
        (m - 1.75).abs() + (l - 3.0).abs(),
        1e-15,
    ));
    Ok(out)
}

fn csv_of(pop: &Population, spec: &RunSpec) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, &run(pop, spec)?)?;
    Ok(buf)
}

fn localupdate(opts: &VerifyOptions) -> Result<Vec<Check>> {
    const S: &str = "localupdate";
    let mut rng = stream(opts, 9);
    let mut out = Vec::new();
    let mut e_avg = 0.0f64;
    let mut e_delta = 0.0f64;
    for _ in 0..20 {
        let d = rng.random_range(1..=5);
        let pop = Population::uniform(
            (0..rng.random_range(1..=6))
                .map(|_| random_client(&mut rng, d, 0.3, 3.0))
                .collect::<Result<_>>()?,
        )?;
        let k = rng.random_range(1..=6);
        let gamma = rng.random_range(0.0..1.0) / pop.stats().l;
        let x = gaussian_vector(&mut rng, d, 1.0);
        let params = RoundParams {
            theta: ThetaWeights::fedavg(k)?,
            clients_per_round: pop.len(),
            batch_size: 1,
            master_seed: opts.seed,
        };
        let mut srv = ServerState::new(ServerOptimizer::Sgd, UpdateMode::GradientSum, d)?;
        let o = outer_round(&pop, &x, gamma, gamma, &params, &mut srv, 1)?;
        let mut avg = Vector::zeros(d);
        for (cl, w) in pop.iter() {
            let mut xi = x.clone();
            for _ in 0..k {
                let g = cl.grad(&xi)?;
                xi.axpy(-gamma, &g);
            }
            avg.axpy(w, &xi);
        }
        e_avg = e_avg.max(o.x_next.sub(&avg).max_abs());
        let eta = rng.random_range(0.0..1.0);
        let mut a = ServerState::new(ServerOptimizer::Sgd, UpdateMode::ModelDelta, d)?;
        let mut b = ServerState::new(ServerOptimizer::Sgd, UpdateMode::GradientSum, d)?;
        let xa = server_apply(&mut a, &x, &o.q, eta, gamma)?;
        let xb = server_apply(&mut b, &x, &o.q, eta * gamma, gamma)?;
        e_delta = e_delta.max(xa.sub(&xb).max_abs() / xa.max_abs().max(1.0));
    }
    out.push(Check::le(S, "fedavg_equivalence", e_avg, 1e-12));
    out.push(Check::le(S, "model_delta_coupling", e_delta, 1e-15));

    let pop = random_population(&mut rng, 3, 6, 0.5, 2.0)?;
    let theta = ThetaWeights::fedavg(3)?;
    let gamma = 0.5 / pop.stats().l;
    let h = fedsurrogate::surrogate::surrogate_hessian(&pop, gamma, &theta);
    let e = sym_eigen(&h)?;
    let mut spec = RunSpec::simple(&pop, theta.clone(), gamma, 1.0 / e.max(), 5000);
    let r = run(&pop, &spec)?;
    let xs = surrogate_minimizer(&pop, gamma, &theta)?;
    out.push(Check::le(
        S,
        "deterministic_converges_to_surrogate_min",
        r.final_x.dist(&xs),
        1e-8,
    ));
    out.push(Check::le(
        S,
        "gap_matches_closed_form",
        (r.final_x.dist(&pop.stats().x_star) - xs.dist(&pop.stats().x_star)).abs(),
        1e-6,
    ));

    let stoch = Population::uniform(
        (0..8)
            .map(|_| random_stochastic_client(&mut rng, 3, 0.5, 2.0))
            .collect::<Result<_>>()?,
    )?;
    spec = RunSpec::simple(&stoch, theta, 0.1, 0.05, 60);
    spec.clients_per_round = 3;
    spec.batch_size = 2;
    spec.master_seed = opts.seed;
    let mut mismatched = 0;
    spec.workers = 1;
    let base = csv_of(&stoch, &spec)?;
    for w in [2, 4, 7] {
        spec.workers = w;
        if csv_of(&stoch, &spec)? != base {
            mismatched += 1;
        }
    }
    out.push(Check::holds(S, "worker_count_invariance", mismatched));
    Ok(out)
}

fn decay(opts: &VerifyOptions) -> Result<Vec<Check>> {
    const S: &str = "decay";
    let mut out = Vec::new();
    let pop = make_two_point();
    let spec = RunSpec::simple(&pop, ThetaWeights::fedavg(2)?, 0.5, 0.1, 2000);
    let cfg = DecayConfig {
        window: 5,
        patience: 5,
        cooldown: 5,
        ..Default::default()
    };
    let r = run_decay(&pop, &spec, &cfg)?;
    let mut off_lattice = 0usize;
    let mut n = 0i32;
    for (m, d) in r.run.metrics.iter().zip(&r.decay) {
        if m.gamma != 0.5 * cfg.alpha.powi(n) || m.eta != 0.1 * cfg.beta.powi(n) {
            off_lattice += 1;
        }
        n = d.n_decays as i32;
    }
    out.push(Check::holds(S, "rates_on_decay_lattice", off_lattice));
    let rounds = r.decay_rounds();
    let min_gap = rounds.windows(2).map(|w| w[1] - w[0]).min().unwrap_or(usize::MAX);
    out.push(Check::ge(
        S,
        "decay_spacing_exceeds_cooldown",
        min_gap as f64,
        cfg.cooldown as f64 + 1.0,
    ));
    let fixed = run(&pop, &spec)?;
    let xs = pop.stats().x_star.get(0);
    let d_dec = (r.run.final_x.get(0) - xs).abs();
    let d_fix = (fixed.final_x.get(0) - xs).abs();
    out.push(Check::le(S, "beats_fixed_gamma", d_dec, d_fix));
    out.push(Check::le(S, "below_tenth_of_gap", d_dec, 0.1 * 0.5 / (3.0 * 3.5)));

    let mut rng = stream(opts, 10);
    let mut e_window = 0.0f64;
    let c = DecayConfig {
        window: 7,
        patience: 3,
        cooldown: 2,
        ..Default::default()
    };
    let mut st = DecayState::new(&c);
    let mut hist = Vec::new();
    for _ in 0..500 {
        let l: f64 = rng.random_range(0.0..1.0);
        hist.push(l);
        decay_step(&mut st, l, &c);
        let lo = hist.len().saturating_sub(7);
        let want = hist[lo..].iter().sum::<f64>() / (hist.len() - lo) as f64;
        e_window = e_window.max((st.window_avg - want).abs());
    }
    out.push(Check::le(S, "window_average", e_window, 1e-12));

    let stoch = Population::new(vec![
        (random_stochastic_client(&mut rng, 2, 0.5, 2.0)?, 0.2),
        (random_stochastic_client(&mut rng, 2, 0.5, 2.0)?, 0.5),
        (random_stochastic_client(&mut rng, 2, 0.5, 2.0)?, 0.3),
    ])?;
    let mut spec = RunSpec::simple(&stoch, ThetaWeights::fedavg(3)?, 0.2, 0.2, 100);
    spec.batch_size = 2;
    spec.master_seed = opts.seed;
    let c1 = DecayConfig {
        window: 1,
        patience: 2,
        cooldown: 0,
        delta: 1e-3,
        ..Default::default()
    };
    let r = run_decay(&stoch, &spec, &c1)?;
    let e_loss = r
        .run
        .metrics
        .iter()
        .zip(&r.decay)
        .map(|(m, d)| (m.true_loss - d.window_avg_loss).abs())
        .fold(0.0, f64::max);
    out.push(Check::le(S, "full_participation_loss_is_true_loss", e_loss, 1e-12));
    let rounds = r.decay_rounds();
    let mut replay = spec.clone();
    replay.gamma = Schedule::StepDecay {
        initial: 0.2,
        factor: c1.alpha,
        rounds: rounds.clone(),
    };
    replay.eta = Schedule::StepDecay {
        initial: 0.2,
        factor: c1.beta,
        rounds,
    };
    let p = run(&stoch, &replay)?;
    let differs = usize::from(p.final_x != r.run.final_x)
        + p.metrics
            .iter()
            .zip(&r.run.metrics)
            .filter(|(a, b)| a.true_loss != b.true_loss)
            .count();
    out.push(Check::holds(S, "replay_is_bitwise", differs));
    Ok(out)
}

/// Mean over seeds of `‖x_t − target‖²` for each round `t`, with `x_t`
/// the iterate entering round `t`.
fn mean_sq_dist_by_round(pop: &Population, spec: &RunSpec, seeds: usize, target: &Vector) -> Result<Vec<f64>> {
    let ctx = ScheduleContext::from_population(pop, &spec.theta);
    let mut acc = vec![0.0; spec.rounds + 1];
    for s in 0..seeds {
        let mut params = spec.round_params();
        params.master_seed = s as u64;
        let mut srv = ServerState::new(spec.server, spec.mode, pop.dim())?;
        let mut x = spec.x0.clone();
        acc[0] += x.sub(target).norm_sq();
        for t in 1..=spec.rounds {
            let g = eval_gamma(&spec.gamma, t, &ctx)?;
            let e = eval_eta(&spec.eta, t, g, &ctx)?;
            x = outer_round(pop, &x, g, e, &params, &mut srv, t)?.x_next;
            acc[t] += x.sub(target).norm_sq();
        }
    }
    Ok(acc.into_iter().map(|v| v / seeds as f64).collect())
}

fn convergence(opts: &VerifyOptions) -> Result<Vec<Check>> {
    const S: &str = "convergence";
    let mut out = Vec::new();
    let mut rng = stream(opts, 11);
    let d = 2;
    let n = 5;
    let pop = Population::uniform(
        (0..n)
            .map(|_| random_stochastic_client(&mut rng, d, 0.5, 2.0))
            .collect::<Result<_>>()?,
    )?;
    let s = pop.stats().clone();
    let k = 3;
    let theta = ThetaWeights::fedavg(k)?;
    let g_sq = pop.grad_noise_sq()?;

    // fixed client rate, decaying server rate
    let gamma = 0.5 / s.l;
    let x_g = surrogate_minimizer(&pop, gamma, &theta)?;
    let h = fedsurrogate::surrogate::surrogate_hessian(&pop, gamma, &theta);
    let he = sym_eigen(&h)?;
    let (mu_g, l_g) = (he.min(), he.max());
    let b_g = 2.0 * (l_g / mu_g).powi(2);
    let mut spec = RunSpec::simple(&pop, theta.clone(), gamma, 1.0, 200);
    spec.eta = Schedule::FixedClientDecayingServer {
        a: Some(2.0 / mu_g),
        b: Some(b_g),
    };
    spec.x0 = Vector::filled(d, 3.0);
    let nu = fedsurrogate::localupdate::decaying_server_nu(k, g_sq, mu_g, n, 1, b_g, spec.x0.sub(&x_g).norm_sq());
    let msd = mean_sq_dist_by_round(&pop, &spec, opts.seeds, &x_g)?;
    let worst = msd
        .iter()
        .enumerate()
        .map(|(i, v)| v / (nu / (b_g + (i + 1) as f64)))
        .fold(0.0, f64::max);
    out.push(Check::le(S, "decaying_server_bound", worst, 1.0 + 1e-9));

    // stationary error floor at constant rates
    let eta = 0.5 * fedsurrogate::localupdate::descent_cap(mu_g, l_g);
    let mut spec = RunSpec::simple(&pop, theta.clone(), gamma, eta, 2000);
    spec.x0 = x_g.clone();
    let msd = mean_sq_dist_by_round(&pop, &spec, opts.seeds, &x_g)?;
    let floor = fedsurrogate::localupdate::error_floor(eta, k, g_sq, n, 1, mu_g);
    out.push(Check::le(S, "error_floor", msd[msd.len() - 1], 2.0 * floor));

    // empirical variance of the averaged client output
    let params = RoundParams {
        theta: theta.clone(),
        clients_per_round: n,
        batch_size: 1,
        master_seed: opts.seed,
    };
    let x = gaussian_vector(&mut rng, d, 1.0);
    let draws = opts.mc_draws / 10;
    let mut qs = Vec::with_capacity(draws);
    for t in 1..=draws {
        let mut srv = ServerState::new(ServerOptimizer::Sgd, UpdateMode::GradientSum, d)?;
        qs.push(outer_round(&pop, &x, gamma, 0.0, &params, &mut srv, t)?.q);
    }
    let mut mean = Vector::zeros(d);
    for q in &qs {
        mean.axpy(1.0 / draws as f64, q);
    }
    let var = qs.iter().map(|q| q.sub(&mean).norm_sq()).sum::<f64>() / (draws as f64 - 1.0);
    out.push(Check::le(S, "variance_bound", var, variance_bound(g_sq, k, n, 1)?));
    Ok(out)
}

/// Renders checks as report lines plus a final tally.
pub fn report(checks: &[Check]) -> String {
    let mut s = String::new();
    for c in checks {
        s.push_str(&c.to_string());
        s.push('\n');
    }
    let failed = checks.iter().filter(|c| !c.pass).count();
    s.push_str(&format!("# {} checks, {} failed\n", checks.len(), failed));
    s
}
