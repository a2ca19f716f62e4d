//! Problem instances and the oracle contracts the engines consume.
//!
//! Every client owns a finite local dataset; a stochastic sample `xi` is an
//! index into it, drawn uniformly by the engine.

pub mod cournot;
pub mod dataset;
pub mod fair;
pub mod logistic;
pub mod relu;
pub mod synthetic;
pub mod toy;

use nalgebra::DVector;
use rand::RngCore;

use crate::error::Result;
use crate::projection::ConvexSet;

/// Per-client stochastic zeroth-order oracle of a single-level problem.
pub trait ZerothOrderOracle: Sync {
    fn dim(&self) -> usize;
    fn num_clients(&self) -> usize;
    fn num_samples(&self, client: usize) -> usize;
    /// `f_i(x, xi)` for the sample with index `sample`.
    fn eval(&self, client: usize, x: &DVector<f64>, sample: usize) -> Result<f64>;
    fn constraint(&self, client: usize) -> &ConvexSet;
    /// Deterministic global loss used for reporting.
    fn global_loss(&self, x: &DVector<f64>) -> Result<f64> {
        let m = self.num_clients();
        let mut total = 0.0;
        for i in 0..m {
            let n = self.num_samples(i);
            let mut s = 0.0;
            for l in 0..n {
                s += self.eval(i, x, l)?;
            }
            total += s / n as f64;
        }
        Ok(total / m as f64)
    }
}

/// Constants declared for a lower-level problem.
#[derive(Clone, Debug, PartialEq)]
pub struct LowerLevelSpec {
    pub dim: usize,
    /// Strong-convexity modulus.
    pub mu_h: f64,
    /// Smoothness constant in `y`.
    pub l_h: f64,
    /// Constraint on `y`; `None` for the unconstrained printed recursion.
    pub projector: Option<ConvexSet>,
}

impl LowerLevelSpec {
    pub fn validate(&self) -> Result<()> {
        use crate::error::ZofedError;
        if !(self.mu_h > 0.0) {
            return Err(ZofedError::config(format!("lower-level mu_h must be > 0, got {}", self.mu_h)));
        }
        if !(self.l_h >= self.mu_h) {
            return Err(ZofedError::config(format!(
                "lower-level smoothness {} must be >= mu_h {}",
                self.l_h, self.mu_h
            )));
        }
        if let Some(p) = &self.projector {
            p.check_dim(self.dim)?;
        }
        Ok(())
    }

    pub fn kappa(&self) -> f64 {
        self.l_h / self.mu_h
    }
}

/// Federated stochastic gradient oracle of a strongly convex lower level.
pub trait LowerLevelOracle: Sync {
    fn lower_spec(&self) -> &LowerLevelSpec;
    fn lower_clients(&self) -> usize;
    /// Stochastic gradient `grad_y h_i(x, y, zeta)` with `zeta` drawn from `rng`.
    fn lower_grad(&self, client: usize, x: &DVector<f64>, y: &DVector<f64>, rng: &mut dyn RngCore) -> Result<DVector<f64>>;
}

/// Bilevel problem: upper-level zeroth-order oracle evaluated at a supplied
/// lower-level point, plus the lower-level oracle.
pub trait BilevelProblem: LowerLevelOracle {
    fn dim(&self) -> usize;
    fn num_clients(&self) -> usize;
    fn num_samples(&self, client: usize) -> usize;
    fn constraint(&self, client: usize) -> &ConvexSet;
    /// `f_i(x, y, xi)`.
    fn upper_eval(&self, client: usize, x: &DVector<f64>, y: &DVector<f64>, sample: usize) -> Result<f64>;
    /// Deterministic global upper loss at `(x, y)`.
    fn global_upper_loss(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
        let m = BilevelProblem::num_clients(self);
        let mut total = 0.0;
        for i in 0..m {
            let n = self.num_samples(i);
            let mut s = 0.0;
            for l in 0..n {
                s += self.upper_eval(i, x, y, l)?;
            }
            total += s / n as f64;
        }
        Ok(total / m as f64)
    }
    /// Closed-form lower-level solution, where one exists.
    fn exact_lower(&self, _x: &DVector<f64>) -> Option<DVector<f64>> {
        None
    }
    /// Lipschitz constant of the upper objective in `y`, where known.
    fn upper_lipschitz_y(&self) -> Option<f64> {
        None
    }
    /// Held-out loss at `(x, y)`, where the instance carries test data.
    fn test_loss(&self, _x: &DVector<f64>, _y: &DVector<f64>) -> Option<f64> {
        None
    }
}

/// Nonconvex-strongly-concave minimax problem `min_x max_y f(x, y)`.
pub trait MinimaxProblem: Sync {
    fn dim(&self) -> usize;
    fn y_dim(&self) -> usize;
    fn num_clients(&self) -> usize;
    fn num_samples(&self, client: usize) -> usize;
    fn constraint(&self, client: usize) -> &ConvexSet;
    fn value(&self, client: usize, x: &DVector<f64>, y: &DVector<f64>, sample: usize) -> Result<f64>;
    fn grad_y(&self, client: usize, x: &DVector<f64>, y: &DVector<f64>, rng: &mut dyn RngCore) -> Result<DVector<f64>>;
    /// Strong-concavity modulus in `y`.
    fn concavity_modulus(&self) -> Option<f64>;
    /// Smoothness constant of `f` in `y`.
    fn smoothness_y(&self) -> f64;
    fn y_constraint(&self) -> Option<ConvexSet> {
        None
    }
    fn exact_maximizer(&self, _x: &DVector<f64>) -> Option<DVector<f64>> {
        None
    }
}

/// Constants of a parametric variational inequality.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViConstants {
    /// Uniform strong-monotonicity modulus.
    pub mu_f: f64,
    /// Uniform Lipschitz constant.
    pub l_f: f64,
    /// Upper bound on `||y* - y0||^2`.
    pub b_bound: f64,
}

impl ViConstants {
    pub fn kappa(&self) -> f64 {
        self.l_f / self.mu_f
    }
}

/// One scenario's VI: a map `G(x, ., xi)` and its feasible set `Y(x, xi)`.
pub trait ParametricVi {
    fn lower_dim(&self) -> usize;
    fn map(&self, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64>;
    fn set(&self) -> &ConvexSet;
    fn constants(&self) -> ViConstants;
    /// Default starting point: box midpoint when bounded, else zero.
    fn start(&self) -> DVector<f64> {
        self.set()
            .box_midpoint()
            .unwrap_or_else(|| DVector::zeros(self.lower_dim()))
    }
}

/// Two-stage problem with per-scenario VI constraints.
pub trait TwoStageProblem: Sync {
    fn dim(&self) -> usize;
    fn num_clients(&self) -> usize;
    fn num_samples(&self, client: usize) -> usize;
    fn constraint(&self, client: usize) -> &ConvexSet;
    fn scenario(&self, client: usize, sample: usize) -> Box<dyn ParametricVi + '_>;
    fn upper_eval(&self, client: usize, x: &DVector<f64>, y: &DVector<f64>, sample: usize) -> Result<f64>;
    /// Closed-form scenario equilibrium, where one exists.
    fn exact_lower(&self, _client: usize, _sample: usize, _x: &DVector<f64>) -> Option<DVector<f64>> {
        None
    }
}

/// Problem variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    SingleLevel,
    Bilevel,
    Minimax,
    TwoStage,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::SingleLevel => "single_level",
            Variant::Bilevel => "bilevel",
            Variant::Minimax => "minimax",
            Variant::TwoStage => "two_stage",
        })
    }
}

/// A concrete problem bound to its clients.
pub enum ProblemInstance {
    SingleLevel(Box<dyn ZerothOrderOracle>),
    Bilevel(Box<dyn BilevelProblem>),
    /// A minimax problem already adapted to the bilevel contract.
    Minimax(Box<dyn BilevelProblem>),
    TwoStage(Box<dyn TwoStageProblem>),
}

impl ProblemInstance {
    pub fn variant(&self) -> Variant {
        match self {
            ProblemInstance::SingleLevel(_) => Variant::SingleLevel,
            ProblemInstance::Bilevel(_) => Variant::Bilevel,
            ProblemInstance::Minimax(_) => Variant::Minimax,
            ProblemInstance::TwoStage(_) => Variant::TwoStage,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ProblemInstance::SingleLevel(p) => p.dim(),
            ProblemInstance::Bilevel(p) | ProblemInstance::Minimax(p) => p.dim(),
            ProblemInstance::TwoStage(p) => p.dim(),
        }
    }

    pub fn num_clients(&self) -> usize {
        match self {
            ProblemInstance::SingleLevel(p) => p.num_clients(),
            ProblemInstance::Bilevel(p) | ProblemInstance::Minimax(p) => BilevelProblem::num_clients(p.as_ref()),
            ProblemInstance::TwoStage(p) => p.num_clients(),
        }
    }
}

/// Implicit single-level view of a bilevel problem with a closed-form lower level:
/// `f_i(x, xi) = upper_i(x, y(x), xi)`.
pub struct ImplicitObjective<'a, B: BilevelProblem + ?Sized> {
    inner: &'a B,
}

impl<'a, B: BilevelProblem + ?Sized> ImplicitObjective<'a, B> {
    pub fn new(inner: &'a B) -> Result<Self> {
        let probe = DVector::zeros(inner.dim());
        if inner.exact_lower(&probe).is_none() {
            return Err(crate::error::ZofedError::config(
                "implicit objective requires a closed-form lower level",
            ));
        }
        Ok(Self { inner })
    }
}

impl<B: BilevelProblem + ?Sized> ZerothOrderOracle for ImplicitObjective<'_, B> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn num_clients(&self) -> usize {
        BilevelProblem::num_clients(self.inner)
    }
    fn num_samples(&self, client: usize) -> usize {
        self.inner.num_samples(client)
    }
    fn eval(&self, client: usize, x: &DVector<f64>, sample: usize) -> Result<f64> {
        let y = self
            .inner
            .exact_lower(x)
            .ok_or_else(|| crate::error::ZofedError::oracle("closed-form lower level unavailable"))?;
        self.inner.upper_eval(client, x, &y, sample)
    }
    fn constraint(&self, client: usize) -> &ConvexSet {
        self.inner.constraint(client)
    }
}
