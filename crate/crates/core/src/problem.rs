//! Quadratic federated problem instances.
//!
//! Every distribution here is a finite weighted set, so all expectations are
//! exact sums. A client's examples collapse to one effective quadratic
//! `½(x − c_i)ᵀA_i(x − c_i) + τ_i`, and a population carries the global
//! heterogeneity statistics that the distance and convergence bounds consume.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{operator_norm, quad_form, random_spd, sym_eigen_named, sym_solve, SymMatrix, Vector};
use crate::rng::{label, Stream};

const PROB_TOL: f64 = 1e-12;

/// One data point `z`, defining `f(x; z) = ½(x − c_z)ᵀA_z(x − c_z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticExample {
    pub a: SymMatrix,
    pub c: Vector,
}

impl QuadraticExample {
    pub fn new(a: SymMatrix, c: Vector) -> Result<Self> {
        c.check_dim(a.dim())?;
        Ok(QuadraticExample { a, c })
    }

    pub fn scalar(a: f64, c: f64) -> Self {
        QuadraticExample {
            a: SymMatrix::from_scalar(a),
            c: Vector::from_scalar(c),
        }
    }

    pub fn dim(&self) -> usize {
        self.a.dim()
    }

    pub fn loss(&self, x: &Vector) -> Result<f64> {
        x.check_dim(self.dim())?;
        Ok(0.5 * quad_form(&self.a, &x.sub(&self.c))?)
    }

    pub fn grad(&self, x: &Vector) -> Result<Vector> {
        x.check_dim(self.dim())?;
        self.a.mul_vec(&x.sub(&self.c))
    }

    /// Gradient written into `out` without allocating; dimensions are trusted.
    pub(crate) fn grad_into(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim();
        for i in 0..d {
            let mut s = 0.0;
            for j in 0..d {
                s += self.a.get(i, j) * (x[j] - self.c[j]);
            }
            out[i] = s;
        }
    }
}

/// A client: a finite distribution over examples and its effective quadratic.
#[derive(Debug, Clone)]
pub struct Client {
    examples: Vec<QuadraticExample>,
    probs: Vec<f64>,
    cumulative: Vec<f64>,
    a_eff: SymMatrix,
    c_eff: Vector,
    tau: f64,
    mu: f64,
    l: f64,
}

impl Client {
    pub fn new(examples: Vec<(QuadraticExample, f64)>) -> Result<Self> {
        Self::named("client", examples)
    }

    /// Builds a client, collapsing its examples into `(A_i, c_i, τ_i)`.
    /// `name` appears in error messages.
    pub fn named(name: &str, examples: Vec<(QuadraticExample, f64)>) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::InvalidParameter(format!("{name} has no examples")));
        }
        let d = examples[0].0.dim();
        let mut total = 0.0;
        for (e, p) in &examples {
            if e.dim() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: e.dim(),
                });
            }
            if !(*p > 0.0) || !p.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "{name}: example probabilities must be positive, got {p}"
                )));
            }
            total += p;
        }
        if (total - 1.0).abs() > PROB_TOL {
            return Err(Error::InvalidParameter(format!(
                "{name}: example probabilities sum to {total}, expected 1"
            )));
        }

        let mut a_eff = SymMatrix::zeros(d);
        let mut rhs = Vector::zeros(d);
        let mut const_term = 0.0;
        for (e, p) in &examples {
            a_eff.axpy(*p, &e.a);
            rhs.axpy(*p, &e.a.mul_vec(&e.c)?);
            const_term += p * quad_form(&e.a, &e.c)?;
        }
        let eig = sym_eigen_named(&a_eff, name)?;
        let (mu, l) = (eig.min(), eig.max());
        if !(mu > 0.0) || mu <= 1e-12 * l {
            return Err(Error::Singular {
                what: format!("effective curvature of {name}"),
                lambda_min: mu,
                lambda_max: l,
            });
        }
        let c_eff = if examples.iter().all(|(e, _)| e.c == examples[0].0.c) {
            examples[0].0.c.clone()
        } else {
            sym_solve(&a_eff, &rhs, name)?
        };
        let tau = 0.5 * const_term - 0.5 * quad_form(&a_eff, &c_eff)?;

        let mut acc = 0.0;
        let cumulative = examples
            .iter()
            .map(|(_, p)| {
                acc += p;
                acc
            })
            .collect();
        let (examples, probs) = examples.into_iter().unzip();
        Ok(Client {
            examples,
            probs,
            cumulative,
            a_eff,
            c_eff,
            tau,
            mu,
            l,
        })
    }

    pub fn single(example: QuadraticExample) -> Result<Self> {
        Self::new(vec![(example, 1.0)])
    }

    pub fn dim(&self) -> usize {
        self.a_eff.dim()
    }

    pub fn examples(&self) -> &[QuadraticExample] {
        &self.examples
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn a_eff(&self) -> &SymMatrix {
        &self.a_eff
    }

    pub fn c_eff(&self) -> &Vector {
        &self.c_eff
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Smallest eigenvalue of `A_i`.
    pub fn mu(&self) -> f64 {
        self.mu
    }

    /// Largest eigenvalue of `A_i`.
    pub fn l(&self) -> f64 {
        self.l
    }

    /// True when every example has the same `(A_z, c_z)`, i.e. local
    /// gradients carry no sampling noise.
    pub fn is_deterministic(&self) -> bool {
        self.examples.windows(2).all(|w| w[0].a == w[1].a && w[0].c == w[1].c)
    }

    /// Draws an example index according to the client's distribution.
    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        if self.examples.len() == 1 {
            return 0;
        }
        let u: f64 = rng.random::<f64>() * self.cumulative[self.cumulative.len() - 1];
        self.cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.examples.len() - 1)
    }

    /// `½(x − c_i)ᵀA_i(x − c_i) + τ_i`, equal to the expected example loss.
    pub fn loss(&self, x: &Vector) -> Result<f64> {
        x.check_dim(self.dim())?;
        Ok(0.5 * quad_form(&self.a_eff, &x.sub(&self.c_eff))? + self.tau)
    }

    /// `A_i(x − c_i)`
    pub fn grad(&self, x: &Vector) -> Result<Vector> {
        x.check_dim(self.dim())?;
        self.a_eff.mul_vec(&x.sub(&self.c_eff))
    }

    /// Expected example loss computed directly from the examples.
    pub fn expected_example_loss(&self, x: &Vector) -> Result<f64> {
        let mut s = 0.0;
        for (e, p) in self.examples.iter().zip(&self.probs) {
            s += p * e.loss(x)?;
        }
        Ok(s)
    }

    /// `max_z ‖A_z − A_i‖` entrywise; zero when the client has a common curvature.
    fn curvature_spread(&self) -> f64 {
        self.examples
            .iter()
            .map(|e| {
                e.a.upper()
                    .iter()
                    .zip(self.a_eff.upper())
                    .fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()))
            })
            .fold(0.0, f64::max)
    }

    /// Within-client gradient variance `Σ_z p_z‖A_i(c_z − c_i)‖²`, defined when
    /// all examples share the curvature `A_i`.
    pub fn grad_noise_sq(&self) -> Result<f64> {
        let scale = 1.0 + self.a_eff.upper().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let spread = self.curvature_spread();
        if spread > 1e-12 * scale {
            return Err(Error::Assumption(format!(
                "client examples have different curvature matrices (max entry gap {spread:e}); \
                 the gradient variance then grows with ‖x‖ and no uniform bound G² exists"
            )));
        }
        let mut s = 0.0;
        for (e, p) in self.examples.iter().zip(&self.probs) {
            s += p * self.a_eff.mul_vec(&e.c.sub(&self.c_eff))?.norm_sq();
        }
        Ok(s)
    }
}

/// Global statistics of a population.
#[derive(Debug, Clone)]
pub struct PopulationStats {
    /// `A = Σ w_i A_i`
    pub a_bar: SymMatrix,
    /// `c = Σ w_i c_i`, the average client minimizer.
    pub c_bar: Vector,
    pub mu: f64,
    pub l: f64,
    /// `Σ w_i‖A_i − A‖²` with the operator norm.
    pub sigma_a_sq: f64,
    /// `Σ w_i‖c_i − c‖²`
    pub sigma_c_sq: f64,
    /// Uniform within-client gradient variance bound, when it exists.
    pub g_sq: Option<f64>,
    /// Minimizer of the true loss, `(Σ w_i A_i)⁻¹ Σ w_i A_i c_i`.
    pub x_star: Vector,
}

impl PopulationStats {
    pub fn sigma_a(&self) -> f64 {
        self.sigma_a_sq.sqrt()
    }

    pub fn sigma_c(&self) -> f64 {
        self.sigma_c_sq.sqrt()
    }

    pub fn kappa(&self) -> f64 {
        self.l / self.mu
    }
}

/// A weighted set of clients.
#[derive(Debug, Clone)]
pub struct Population {
    dim: usize,
    clients: Vec<Client>,
    weights: Vec<f64>,
    stats: PopulationStats,
}

impl Population {
    pub fn new(clients: Vec<(Client, f64)>) -> Result<Self> {
        if clients.is_empty() {
            return Err(Error::InvalidParameter("population has no clients".into()));
        }
        let dim = clients[0].0.dim();
        let mut total = 0.0;
        for (c, w) in &clients {
            if c.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: c.dim(),
                });
            }
            if !(*w > 0.0) || !w.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "client weights must be positive, got {w}"
                )));
            }
            total += w;
        }
        if (total - 1.0).abs() > PROB_TOL {
            return Err(Error::InvalidParameter(format!(
                "client weights sum to {total}, expected 1"
            )));
        }
        let (clients, weights): (Vec<_>, Vec<_>) = clients.into_iter().unzip();
        let stats = population_stats(&clients, &weights)?;
        Ok(Population {
            dim,
            clients,
            weights,
            stats,
        })
    }

    /// Uniformly weighted population.
    pub fn uniform(clients: Vec<Client>) -> Result<Self> {
        let w = 1.0 / clients.len() as f64;
        Self::new(clients.into_iter().map(|c| (c, w)).collect())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.clients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clients.is_empty()
    }

    pub fn clients(&self) -> &[Client] {
        &self.clients
    }

    pub fn client(&self, i: usize) -> &Client {
        &self.clients[i]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn stats(&self) -> &PopulationStats {
        &self.stats
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Client, f64)> {
        self.clients.iter().zip(self.weights.iter().copied())
    }

    /// `f(x) = Σ w_i f_i(x)`, including the constants `τ_i`.
    pub fn true_loss(&self, x: &Vector) -> Result<f64> {
        let mut s = 0.0;
        for (c, w) in self.iter() {
            s += w * c.loss(x)?;
        }
        Ok(s)
    }

    pub fn true_grad(&self, x: &Vector) -> Result<Vector> {
        let mut g = Vector::zeros(self.dim);
        for (c, w) in self.iter() {
            g.axpy(w, &c.grad(x)?);
        }
        Ok(g)
    }

    /// True when every client is deterministic.
    pub fn is_deterministic(&self) -> bool {
        self.clients.iter().all(Client::is_deterministic)
    }

    /// `G² = max_i Σ_z p_z‖A_i(c_z − c_i)‖²`.
    pub fn grad_noise_sq(&self) -> Result<f64> {
        let mut g = 0.0_f64;
        for (i, c) in self.clients.iter().enumerate() {
            let v = c
                .grad_noise_sq()
                .map_err(|e| Error::Assumption(format!("client {i}: {e}")))?;
            g = g.max(v);
        }
        Ok(g)
    }

    pub fn to_doc(&self) -> PopulationDoc {
        PopulationDoc {
            dim: self.dim,
            clients: self
                .iter()
                .map(|(c, w)| ClientDoc {
                    weight: w,
                    examples: c
                        .examples()
                        .iter()
                        .zip(c.probs())
                        .map(|(e, &p)| ExampleDoc {
                            a: e.a.upper().to_vec(),
                            c: e.c.as_slice().to_vec(),
                            p,
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    pub fn from_doc(doc: &PopulationDoc) -> Result<Self> {
        let mut clients = Vec::with_capacity(doc.clients.len());
        for (i, cd) in doc.clients.iter().enumerate() {
            let mut examples = Vec::with_capacity(cd.examples.len());
            for ed in &cd.examples {
                let a = SymMatrix::from_upper(doc.dim, ed.a.clone())?;
                let c = Vector::new(ed.c.clone());
                examples.push((QuadraticExample::new(a, c)?, ed.p));
            }
            clients.push((Client::named(&format!("client {i}"), examples)?, cd.weight));
        }
        Population::new(clients)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_doc())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: PopulationDoc = serde_json::from_str(s)?;
        Self::from_doc(&doc)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
    }
}

/// Serialized population: `{dim, clients: [{weight, examples: [{a, c, p}]}]}`
/// with `a` the row-major upper triangle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationDoc {
    pub dim: usize,
    pub clients: Vec<ClientDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDoc {
    pub weight: f64,
    pub examples: Vec<ExampleDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleDoc {
    pub a: Vec<f64>,
    pub c: Vec<f64>,
    pub p: f64,
}

fn population_stats(clients: &[Client], weights: &[f64]) -> Result<PopulationStats> {
    let d = clients[0].dim();
    let mut a_bar = SymMatrix::zeros(d);
    let mut c_bar = Vector::zeros(d);
    let mut rhs = Vector::zeros(d);
    let mut mu = f64::INFINITY;
    let mut l = 0.0_f64;
    for (c, &w) in clients.iter().zip(weights) {
        a_bar.axpy(w, c.a_eff());
        c_bar.axpy(w, c.c_eff());
        rhs.axpy(w, &c.a_eff().mul_vec(c.c_eff())?);
        mu = mu.min(c.mu());
        l = l.max(c.l());
    }
    // shared curvature or center: use it verbatim so the spread is exactly 0
    if clients.iter().all(|c| c.a_eff() == clients[0].a_eff()) {
        a_bar = clients[0].a_eff().clone();
    }
    let common_center = clients.iter().all(|c| c.c_eff() == clients[0].c_eff());
    if common_center {
        c_bar = clients[0].c_eff().clone();
    }
    let mut sigma_a_sq = 0.0;
    let mut sigma_c_sq = 0.0;
    for (c, &w) in clients.iter().zip(weights) {
        sigma_a_sq += w * operator_norm(&c.a_eff().sub(&a_bar)?)?.powi(2);
        sigma_c_sq += w * c.c_eff().sub(&c_bar).norm_sq();
    }
    let x_star = sym_solve(&a_bar, &rhs, "population curvature Σ w_i A_i")?;
    let x_star = if common_center { c_bar.clone() } else { x_star };
    let g_sq = clients
        .iter()
        .map(Client::grad_noise_sq)
        .try_fold(0.0_f64, |m, v| v.map(|v| m.max(v)))
        .ok();
    Ok(PopulationStats {
        a_bar,
        c_bar,
        mu,
        l,
        sigma_a_sq,
        sigma_c_sq,
        g_sq,
        x_star,
    })
}

/// Two equally likely single-example clients with `A_z = z`, `c_z = 1/z`
/// for `z ∈ {1, 2}`. The true minimizer is `2/3`.
pub fn make_two_point() -> Population {
    let clients = vec![
        Client::single(QuadraticExample::scalar(1.0, 1.0)).expect("valid client"),
        Client::single(QuadraticExample::scalar(2.0, 0.5)).expect("valid client"),
    ];
    Population::uniform(clients).expect("valid population")
}

/// Discretized 1-D population with client density `q(i) = 8i/15` on
/// `[0.5, 2]`; client `i` holds the single example `A = i`, `c = 1/i`.
/// Atoms sit at cell midpoints with weights proportional to the density.
pub fn make_density_1d(n_atoms: usize) -> Result<Population> {
    if n_atoms < 2 {
        return Err(Error::InvalidParameter(format!(
            "density_1d needs at least 2 atoms, got {n_atoms}"
        )));
    }
    let (lo, hi) = (0.5, 2.0);
    let h = (hi - lo) / n_atoms as f64;
    let atoms: Vec<f64> = (0..n_atoms).map(|j| lo + (j as f64 + 0.5) * h).collect();
    let raw: Vec<f64> = atoms.iter().map(|&i| 8.0 * i / 15.0).collect();
    let total: f64 = raw.iter().sum();
    let mut clients = Vec::with_capacity(n_atoms);
    for (&i, &q) in atoms.iter().zip(&raw) {
        clients.push((Client::single(QuadraticExample::scalar(i, 1.0 / i))?, q / total));
    }
    // renormalize against accumulated rounding
    let wsum: f64 = clients.iter().map(|(_, w)| w).sum();
    for (_, w) in clients.iter_mut() {
        *w /= wsum;
    }
    Population::new(clients)
}

/// Parameters for [`make_synthetic`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticParams {
    pub dim: usize,
    pub n_clients: usize,
    pub mu: f64,
    pub l: f64,
    /// Standard deviation of client centers around the origin.
    #[serde(default = "default_client_spread")]
    pub client_spread: f64,
    /// Standard deviation of example centers around their client center.
    pub center_spread: f64,
    pub examples_per_client: usize,
    /// Use one curvature matrix for every client.
    #[serde(default)]
    pub shared_curvature: bool,
    pub seed: u64,
}

fn default_client_spread() -> f64 {
    1.0
}

impl Default for SyntheticParams {
    fn default() -> Self {
        SyntheticParams {
            dim: 4,
            n_clients: 8,
            mu: 1.0,
            l: 4.0,
            client_spread: 1.0,
            center_spread: 0.5,
            examples_per_client: 4,
            shared_curvature: false,
            seed: 0,
        }
    }
}

/// Random population honoring the standing assumptions: each client has one
/// curvature matrix with spectrum in `[μ, L]` shared by all its examples, and
/// Gaussian example centers around a Gaussian client center.
pub fn make_synthetic(p: &SyntheticParams) -> Result<Population> {
    if !(p.mu > 0.0) || !(p.mu <= p.l) {
        return Err(Error::InvalidParameter(format!(
            "synthetic population needs 0 < mu <= L, got mu={}, L={}",
            p.mu, p.l
        )));
    }
    if p.dim == 0 || p.n_clients == 0 || p.examples_per_client == 0 {
        return Err(Error::InvalidParameter(
            "synthetic population needs dim, n_clients and examples_per_client >= 1".into(),
        ));
    }
    if p.client_spread < 0.0 || p.center_spread < 0.0 {
        return Err(Error::InvalidParameter("spreads must be nonnegative".into()));
    }
    let root = Stream::new(p.seed).derive(label::GENERATOR);
    let mut shared_rng = root.derive(u64::MAX);
    let shared = random_spd(p.dim, p.mu, p.l, &mut shared_rng)?;
    let prob = 1.0 / p.examples_per_client as f64;
    let mut clients = Vec::with_capacity(p.n_clients);
    for i in 0..p.n_clients {
        let mut rng = root.derive(i as u64);
        let a = if p.shared_curvature {
            shared.clone()
        } else {
            random_spd(p.dim, p.mu, p.l, &mut rng)?
        };
        let center: Vec<f64> = (0..p.dim)
            .map(|_| p.client_spread * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let examples = (0..p.examples_per_client)
            .map(|_| {
                let c: Vec<f64> = center
                    .iter()
                    .map(|&m| m + p.center_spread * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                (
                    QuadraticExample {
                        a: a.clone(),
                        c: Vector::new(c),
                    },
                    prob,
                )
            })
            .collect();
        clients.push(Client::named(&format!("client {i}"), examples)?);
    }
    Population::uniform(clients)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::sym_eigen;
    use rand::SeedableRng;

    fn fd_grad(f: impl Fn(&Vector) -> f64, x: &Vector, h: f64) -> Vector {
        let mut g = Vector::zeros(x.len());
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            g[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    #[test]
    fn example_loss_and_grad() {
        let e = QuadraticExample::scalar(2.0, 0.5);
        let x = Vector::from_scalar(1.0);
        assert_eq!(e.loss(&x).unwrap(), 0.25);
        assert_eq!(e.grad(&x).unwrap().get(0), 1.0);
        assert_eq!(e.loss(&e.c.clone()).unwrap(), 0.0);
        assert_eq!(e.grad(&e.c.clone()).unwrap(), Vector::zeros(1));

        let e = QuadraticExample::new(SymMatrix::identity(2), Vector::zeros(2)).unwrap();
        assert_eq!(e.loss(&Vector::new(vec![3.0, 4.0])).unwrap(), 12.5);
        assert!(matches!(
            e.loss(&Vector::zeros(3)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn example_grad_matches_finite_difference() {
        let mut r = rand::rngs::StdRng::seed_from_u64(5);
        for _ in 0..20 {
            let a = random_spd(4, 0.5, 3.0, &mut r).unwrap();
            let c = Vector::new((0..4).map(|_| r.sample(StandardNormal)).collect());
            let x = Vector::new((0..4).map(|_| r.sample(StandardNormal)).collect());
            let e = QuadraticExample::new(a, c).unwrap();
            let g = e.grad(&x).unwrap();
            let fd = fd_grad(|y| e.loss(y).unwrap(), &x, 1e-5);
            assert!(g.sub(&fd).max_abs() < 1e-6 * (1.0 + g.max_abs()));
        }
    }

    #[test]
    fn client_effective_single_example() {
        let e = QuadraticExample::scalar(3.0, 0.25);
        let c = Client::single(e.clone()).unwrap();
        assert_eq!(c.a_eff(), &e.a);
        assert_eq!(c.c_eff(), &e.c);
        assert_eq!(c.tau(), 0.0);
    }

    #[test]
    fn client_effective_two_examples() {
        // ½·½x² + ½·½(x−2)² = ½(x−1)² + ½
        let c = Client::new(vec![
            (QuadraticExample::scalar(1.0, 0.0), 0.5),
            (QuadraticExample::scalar(1.0, 2.0), 0.5),
        ])
        .unwrap();
        assert_eq!(c.a_eff().get(0, 0), 1.0);
        assert_eq!(c.c_eff().get(0), 1.0);
        assert!((c.tau() - 0.5).abs() < 1e-15);
        for x in [-2.0, 0.0, 1.0, 3.5] {
            let x = Vector::from_scalar(x);
            assert!((c.loss(&x).unwrap() - c.expected_example_loss(&x).unwrap()).abs() < 1e-12);
        }
        assert!((c.grad_noise_sq().unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn lemma1_contract_on_random_clients() {
        let mut r = rand::rngs::StdRng::seed_from_u64(9);
        for _ in 0..20 {
            let d = r.random_range(1..=5);
            let n = r.random_range(1..=6);
            let examples: Vec<_> = (0..n)
                .map(|_| {
                    let a = random_spd(d, 0.2, 5.0, &mut r).unwrap();
                    let c = Vector::new((0..d).map(|_| r.sample(StandardNormal)).collect());
                    (QuadraticExample::new(a, c).unwrap(), 1.0 / n as f64)
                })
                .collect();
            let client = Client::new(examples).unwrap();
            for _ in 0..100 {
                let x = Vector::new((0..d).map(|_| 3.0 * r.sample::<f64, _>(StandardNormal)).collect());
                let direct = client.expected_example_loss(&x).unwrap();
                let eff = client.loss(&x).unwrap();
                assert!((direct - eff).abs() < 1e-10 * (1.0 + direct.abs()), "{direct} vs {eff}");
            }
            let x = Vector::new((0..d).map(|_| r.sample(StandardNormal)).collect());
            let fd = fd_grad(|y| client.loss(y).unwrap(), &x, 1e-5);
            let g = client.grad(&x).unwrap();
            assert!(g.sub(&fd).max_abs() < 1e-6 * (1.0 + g.max_abs()));
        }
    }

    #[test]
    fn client_rejects_bad_inputs() {
        assert!(Client::new(vec![(QuadraticExample::scalar(1.0, 0.0), 0.7)]).is_err());
        assert!(Client::new(vec![]).is_err());
        let err = Client::named("client 7", vec![(QuadraticExample::scalar(0.0, 0.0), 1.0)]).unwrap_err();
        assert!(err.to_string().contains("client 7"), "{err}");
    }

    #[test]
    fn two_point_client_loss() {
        let pop = make_two_point();
        let c2 = pop.client(1);
        let x = Vector::from_scalar(1.0);
        assert_eq!(c2.loss(&x).unwrap(), 0.25);
        assert_eq!(c2.grad(&x).unwrap().get(0), 1.0);
        assert_eq!(c2.loss(c2.c_eff()).unwrap(), 0.0);
    }

    #[test]
    fn two_point_stats() {
        let pop = make_two_point();
        let s = pop.stats();
        assert_eq!(pop.dim(), 1);
        assert_eq!(s.a_bar.get(0, 0), 1.5);
        assert_eq!(s.c_bar.get(0), 0.75);
        assert_eq!(s.mu, 1.0);
        assert_eq!(s.l, 2.0);
        assert!((s.sigma_a_sq - 0.25).abs() < 1e-15);
        assert!((s.sigma_c_sq - 0.0625).abs() < 1e-15);
        assert!((s.x_star.get(0) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.g_sq, Some(0.0));

        let at_min = pop.true_loss(&s.x_star).unwrap();
        assert!(at_min < pop.true_loss(&Vector::from_scalar(0.68)).unwrap());
        assert!(pop.true_grad(&s.x_star).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn homogeneous_population() {
        let client = Client::new(vec![
            (QuadraticExample::scalar(2.0, 0.0), 0.5),
            (QuadraticExample::scalar(2.0, 1.0), 0.5),
        ])
        .unwrap();
        let pop = Population::uniform(vec![client.clone(), client.clone(), client]).unwrap();
        let s = pop.stats();
        assert_eq!(s.sigma_a_sq, 0.0);
        assert_eq!(s.sigma_c_sq, 0.0);
        assert!((s.x_star.get(0) - 0.5).abs() < 1e-15);
        let tau = pop.client(0).tau();
        assert!((pop.true_loss(pop.client(0).c_eff()).unwrap() - tau).abs() < 1e-15);
    }

    #[test]
    fn sigma_c_zero_with_heterogeneous_curvature() {
        let pop = Population::uniform(vec![
            Client::single(QuadraticExample::scalar(1.0, 0.3)).unwrap(),
            Client::single(QuadraticExample::scalar(5.0, 0.3)).unwrap(),
        ])
        .unwrap();
        assert_eq!(pop.stats().sigma_c_sq, 0.0);
        assert!(pop.stats().sigma_a_sq > 0.0);
    }

    #[test]
    fn density_population() {
        let pop = make_density_1d(2000).unwrap();
        let wsum: f64 = pop.weights().iter().sum();
        assert!((wsum - 1.0).abs() < 1e-12);
        assert!((pop.stats().x_star.get(0) - 5.0 / 7.0).abs() < 1e-3);
        assert!((pop.stats().c_bar.get(0) - 0.8).abs() < 1e-3);
        assert!(make_density_1d(1).is_err());
    }

    #[test]
    fn grad_noise_rejects_mixed_curvature() {
        let c = Client::new(vec![
            (QuadraticExample::scalar(1.0, 0.0), 0.5),
            (QuadraticExample::scalar(2.0, 1.0), 0.5),
        ])
        .unwrap();
        assert!(matches!(c.grad_noise_sq(), Err(Error::Assumption(_))));
        let pop = Population::uniform(vec![c]).unwrap();
        assert!(pop.grad_noise_sq().is_err());
        assert_eq!(pop.stats().g_sq, None);
        assert_eq!(make_two_point().grad_noise_sq().unwrap(), 0.0);
    }

    #[test]
    fn synthetic_population() {
        let p = SyntheticParams {
            dim: 5,
            n_clients: 6,
            mu: 0.5,
            l: 4.0,
            ..Default::default()
        };
        let pop = make_synthetic(&p).unwrap();
        let s = pop.stats();
        for c in pop.clients() {
            let e = sym_eigen(c.a_eff()).unwrap();
            assert!(e.min() >= s.mu - 1e-12 && e.max() <= s.l + 1e-12);
            assert!(s.mu >= p.mu - 1e-10 && s.l <= p.l + 1e-10);
        }
        assert!(s.g_sq.is_some());
        let again = make_synthetic(&p).unwrap();
        assert_eq!(pop.to_doc(), again.to_doc());

        let homo = make_synthetic(&SyntheticParams {
            client_spread: 0.0,
            center_spread: 0.0,
            examples_per_client: 1,
            shared_curvature: true,
            ..p.clone()
        })
        .unwrap();
        assert_eq!(homo.stats().sigma_c_sq, 0.0);
        assert_eq!(homo.stats().sigma_a_sq, 0.0);

        assert!(make_synthetic(&SyntheticParams { mu: 0.0, ..p.clone() }).is_err());
        assert!(make_synthetic(&SyntheticParams { mu: 5.0, l: 4.0, ..p }).is_err());
    }

    #[test]
    fn json_round_trip() {
        let pop = make_synthetic(&SyntheticParams::default()).unwrap();
        let back = Population::from_json(&pop.to_json().unwrap()).unwrap();
        let (a, b) = (pop.to_doc(), back.to_doc());
        assert_eq!(a.dim, b.dim);
        for (ca, cb) in a.clients.iter().zip(&b.clients) {
            assert!((ca.weight - cb.weight).abs() <= 1e-15 * ca.weight.abs());
            for (ea, eb) in ca.examples.iter().zip(&cb.examples) {
                for (x, y) in ea.a.iter().chain(&ea.c).zip(eb.a.iter().chain(&eb.c)) {
                    assert!((x - y).abs() <= 1e-15 * x.abs().max(1e-300));
                }
            }
        }
    }
}
