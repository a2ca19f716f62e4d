//! Analytic instances used by tests, the verify suites and benchmarks.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};

use super::{BilevelProblem, LowerLevelOracle, LowerLevelSpec, ParametricVi, ViConstants, ZerothOrderOracle};
use crate::error::{Result, ZofedError};
use crate::projection::ConvexSet;

/// A deterministic objective shared by `m` clients, backed by a closure.
pub struct ClosureObjective<F> {
    dim: usize,
    clients: usize,
    set: ConvexSet,
    f: F,
}

impl<F> ClosureObjective<F>
where
    F: Fn(&DVector<f64>) -> f64 + Sync,
{
    pub fn new(dim: usize, clients: usize, set: ConvexSet, f: F) -> Self {
        Self { dim, clients, set, f }
    }
}

impl<F> ZerothOrderOracle for ClosureObjective<F>
where
    F: Fn(&DVector<f64>) -> f64 + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn num_clients(&self) -> usize {
        self.clients
    }
    fn num_samples(&self, _client: usize) -> usize {
        1
    }
    fn eval(&self, _client: usize, x: &DVector<f64>, _sample: usize) -> Result<f64> {
        Ok((self.f)(x))
    }
    fn constraint(&self, _client: usize) -> &ConvexSet {
        &self.set
    }
    fn global_loss(&self, x: &DVector<f64>) -> Result<f64> {
        Ok((self.f)(x))
    }
}

/// Per-client fallible objective `f(x, client, sample)` with `samples` rows per client.
pub struct ClientObjective<F> {
    dim: usize,
    clients: usize,
    samples: usize,
    set: ConvexSet,
    f: F,
}

impl<F> ClientObjective<F>
where
    F: Fn(&DVector<f64>, usize, usize) -> Result<f64> + Sync,
{
    pub fn new(dim: usize, clients: usize, samples: usize, set: ConvexSet, f: F) -> Self {
        Self {
            dim,
            clients,
            samples,
            set,
            f,
        }
    }
}

impl<F> ZerothOrderOracle for ClientObjective<F>
where
    F: Fn(&DVector<f64>, usize, usize) -> Result<f64> + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn num_clients(&self) -> usize {
        self.clients
    }
    fn num_samples(&self, _client: usize) -> usize {
        self.samples
    }
    fn eval(&self, client: usize, x: &DVector<f64>, sample: usize) -> Result<f64> {
        (self.f)(x, client, sample)
    }
    fn constraint(&self, _client: usize) -> &ConvexSet {
        &self.set
    }
}

/// Quadratic lower level `h_i(x, y) = 1/2 ||y - A_i x||^2` with additive
/// Gaussian gradient noise, and upper level `1/2 ||y - target||^2 + 1/2 ||x||^2`.
/// The lower-level solution is `y(x) = mean_i(A_i) x`.
pub struct QuadraticBilevel {
    maps: Vec<DMatrix<f64>>,
    mean_map: DMatrix<f64>,
    target: DVector<f64>,
    noise: f64,
    spec: LowerLevelSpec,
    set: ConvexSet,
}

impl QuadraticBilevel {
    pub fn new(maps: Vec<DMatrix<f64>>, target: DVector<f64>, noise: f64) -> Result<Self> {
        let first = maps.first().ok_or_else(|| ZofedError::config("need at least one client"))?;
        let (rows, cols) = first.shape();
        if maps.iter().any(|a| a.shape() != (rows, cols)) || target.len() != rows {
            return Err(ZofedError::config("inconsistent quadratic lower-level shapes"));
        }
        let mean_map = maps.iter().fold(DMatrix::zeros(rows, cols), |acc, a| acc + a) / maps.len() as f64;
        Ok(Self {
            maps,
            mean_map,
            target,
            noise,
            spec: LowerLevelSpec {
                dim: rows,
                mu_h: 1.0,
                l_h: 1.0,
                projector: None,
            },
            set: ConvexSet::Whole,
        })
    }

    pub fn mean_map(&self) -> &DMatrix<f64> {
        &self.mean_map
    }

    /// Replaces the declared lower-level constants.
    pub fn with_spec(mut self, spec: LowerLevelSpec) -> Self {
        self.spec = spec;
        self
    }
}

impl LowerLevelOracle for QuadraticBilevel {
    fn lower_spec(&self) -> &LowerLevelSpec {
        &self.spec
    }
    fn lower_clients(&self) -> usize {
        self.maps.len()
    }
    fn lower_grad(&self, client: usize, x: &DVector<f64>, y: &DVector<f64>, rng: &mut dyn RngCore) -> Result<DVector<f64>> {
        let mut g = y - &self.maps[client] * x;
        if self.noise > 0.0 {
            for c in g.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *c += self.noise * z;
            }
        }
        Ok(g)
    }
}

impl BilevelProblem for QuadraticBilevel {
    fn dim(&self) -> usize {
        self.mean_map.ncols()
    }
    fn num_clients(&self) -> usize {
        self.maps.len()
    }
    fn num_samples(&self, _client: usize) -> usize {
        1
    }
    fn constraint(&self, _client: usize) -> &ConvexSet {
        &self.set
    }
    fn upper_eval(&self, _client: usize, x: &DVector<f64>, y: &DVector<f64>, _sample: usize) -> Result<f64> {
        Ok(0.5 * (y - &self.target).norm_squared() + 0.5 * x.norm_squared())
    }
    fn exact_lower(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        Some(&self.mean_map * x)
    }
}

/// Strongly monotone affine VI `G(y) = A y + b` over a fixed set, independent of `x`.
#[derive(Clone, Debug)]
pub struct AffineVi {
    a: DMatrix<f64>,
    b: DVector<f64>,
    set: ConvexSet,
    consts: ViConstants,
}

impl AffineVi {
    /// Computes `mu_F = lambda_min(sym(A))` and `L_F = ||A||_2` exactly.
    pub fn new(a: DMatrix<f64>, b: DVector<f64>, set: ConvexSet, b_bound: f64) -> Result<Self> {
        let n = b.len();
        if a.shape() != (n, n) {
            return Err(ZofedError::config("affine VI needs a square matrix matching b"));
        }
        set.check_dim(n)?;
        let sym = (&a + a.transpose()) * 0.5;
        let mu_f = SymmetricEigen::new(sym).eigenvalues.min();
        let l_f = a.clone().svd(false, false).singular_values.max();
        if !(mu_f > 0.0) {
            return Err(ZofedError::config("affine VI map is not strongly monotone"));
        }
        Ok(Self {
            a,
            b,
            set,
            consts: ViConstants { mu_f, l_f, b_bound },
        })
    }

    /// Random instance: SPD part with spectrum in `[1, 4]` plus a skew part of norm up to `skew`.
    pub fn random<R: Rng + ?Sized>(n: usize, skew: f64, set: ConvexSet, b_bound: f64, rng: &mut R) -> Result<Self> {
        let g = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let q = g.qr().q();
        let d = DMatrix::from_diagonal(&DVector::from_fn(n, |_, _| rng.random_range(1.0..4.0)));
        let k = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let k = (&k - k.transpose()) * 0.5;
        let kn = k.norm().max(f64::MIN_POSITIVE);
        let a = &q * d * q.transpose() + k * (skew * rng.random_range(0.0..1.0) / kn);
        let b = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
        Self::new(a, b, set, b_bound)
    }

    /// Unconstrained solution `-A^{-1} b`.
    pub fn unconstrained_solution(&self) -> Option<DVector<f64>> {
        self.a.clone().lu().solve(&(-&self.b))
    }
}

impl ParametricVi for AffineVi {
    fn lower_dim(&self) -> usize {
        self.b.len()
    }
    fn map(&self, _x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        &self.a * y + &self.b
    }
    fn set(&self) -> &ConvexSet {
        &self.set
    }
    fn constants(&self) -> ViConstants {
        self.consts
    }
}
