//! Leader-follower Cournot game: a leader picks `x in [0, x_cap]`, then
//! `n` followers reach a Nash equilibrium given by a box-constrained VI.

use nalgebra::DVector;
use rand::Rng;

use super::{ParametricVi, TwoStageProblem, ViConstants};
use crate::error::{Result, ZofedError};
use crate::projection::ConvexSet;

#[derive(Clone, Debug, PartialEq)]
pub struct CournotConfig {
    pub n_followers: usize,
    /// Demand slope.
    pub b: f64,
    pub a_low: f64,
    pub a_high: f64,
    pub c0: f64,
    pub c: Vec<f64>,
    pub x_cap: f64,
    pub y_caps: Vec<f64>,
    pub mu_f: f64,
    pub l_f: f64,
}

impl CournotConfig {
    /// Validates inputs and computes `mu_F = min c + b` and `L_F` by power iteration.
    pub fn new(b: f64, a_low: f64, a_high: f64, c0: f64, c: Vec<f64>, x_cap: f64, y_caps: Vec<f64>) -> Result<Self> {
        let n = c.len();
        if n == 0 || y_caps.len() != n {
            return Err(ZofedError::config("cost and capacity vectors must be nonempty and equal length"));
        }
        if !(b > 0.0) {
            return Err(ZofedError::config("demand slope b must be > 0"));
        }
        if !(a_low < a_high) {
            return Err(ZofedError::config("need a_low < a_high"));
        }
        if !(c0 > 0.0) || c.iter().any(|&v| !(v > 0.0)) {
            return Err(ZofedError::config("cost coefficients must be > 0"));
        }
        if !(x_cap > 0.0) || y_caps.iter().any(|&v| !(v > 0.0)) {
            return Err(ZofedError::config("capacities must be > 0"));
        }
        let mu_f = c.iter().cloned().fold(f64::INFINITY, f64::min) + b;
        let l_f = power_iteration_norm(&c, b, 50).max(mu_f);
        Ok(Self {
            n_followers: n,
            b,
            a_low,
            a_high,
            c0,
            c,
            x_cap,
            y_caps,
            mu_f,
            l_f,
        })
    }

    /// Random instance: `c_j, c0 ~ U[0.09, 0.11]`, `y_caps ~ U[2, 4]`,
    /// `x_cap = 10`, `a ~ U[7.5, 12.5]`.
    pub fn sample<R: Rng + ?Sized>(n_followers: usize, b: f64, rng: &mut R) -> Result<Self> {
        let c0 = rng.random_range(0.09..0.11);
        let c = (0..n_followers).map(|_| rng.random_range(0.09..0.11)).collect();
        let caps = (0..n_followers).map(|_| rng.random_range(2.0..4.0)).collect();
        Self::new(b, 7.5, 12.5, c0, c, 10.0, caps)
    }

    pub fn kappa(&self) -> f64 {
        self.l_f / self.mu_f
    }

    /// `Y = prod_j [0, y_caps_j]`.
    pub fn follower_set(&self) -> ConvexSet {
        ConvexSet::Box {
            lo: DVector::zeros(self.n_followers),
            hi: DVector::from_column_slice(&self.y_caps),
        }
    }

    /// Squared diameter of the follower box.
    pub fn b_bound(&self) -> f64 {
        self.y_caps.iter().map(|h| h * h).sum()
    }

    pub fn vi_constants(&self) -> ViConstants {
        ViConstants {
            mu_f: self.mu_f,
            l_f: self.l_f,
            b_bound: self.b_bound(),
        }
    }
}

/// `(diag(c) + bI + b 11^T) y`.
fn jacobian_apply(c: &[f64], b: f64, y: &DVector<f64>) -> DVector<f64> {
    let s = y.sum();
    DVector::from_fn(c.len(), |j, _| (c[j] + b) * y[j] + b * s)
}

fn power_iteration_norm(c: &[f64], b: f64, steps: usize) -> f64 {
    let n = c.len();
    let mut v = DVector::from_fn(n, |j, _| 1.0 + j as f64 / n as f64);
    v /= v.norm();
    let mut lambda = 0.0;
    for _ in 0..steps {
        let w = jacobian_apply(c, b, &v);
        lambda = v.dot(&w);
        let norm = w.norm();
        if norm == 0.0 {
            break;
        }
        v = w / norm;
    }
    lambda
}

/// `G(x, y, a) = (c + b) .* y - a 1 + (x + sum y) b 1`.
pub fn cournot_map(cfg: &CournotConfig, x: f64, y: &DVector<f64>, a: f64) -> DVector<f64> {
    let s = y.sum();
    DVector::from_fn(cfg.n_followers, |j, _| (cfg.c[j] + cfg.b) * y[j] - a + (x + s) * cfg.b)
}

/// `1/2 c0 x^2 - x (a - b (x + sum y))`.
pub fn cournot_leader_loss(cfg: &CournotConfig, x: f64, y: &DVector<f64>, a: f64) -> f64 {
    0.5 * cfg.c0 * x * x - x * (a - cfg.b * (x + y.sum()))
}

/// Follower equilibrium in closed form.
///
/// Every component satisfies `y_j = clamp((A - b S) / (c_j + b), 0, cap_j)`
/// with `A = a - b x` and `S = sum y`, so it suffices to find the unique root
/// of the decreasing piecewise-linear `S -> sum_j y_j(S) - S`.
pub fn cournot_closed_form(cfg: &CournotConfig, x: f64, a: f64) -> DVector<f64> {
    let (b, big_a) = (cfg.b, a - cfg.b * x);
    let comp = |j: usize, s: f64| ((big_a - b * s) / (cfg.c[j] + b)).clamp(0.0, cfg.y_caps[j]);
    let psi = |s: f64| (0..cfg.n_followers).map(|j| comp(j, s)).sum::<f64>() - s;
    if big_a <= 0.0 {
        return DVector::zeros(cfg.n_followers);
    }
    let s_max: f64 = cfg.y_caps.iter().sum();
    let mut points = vec![0.0, s_max, big_a / b];
    points.extend((0..cfg.n_followers).map(|j| (big_a - (cfg.c[j] + b) * cfg.y_caps[j]) / b));
    points.retain(|p| (0.0..=s_max).contains(p));
    points.sort_by(f64::total_cmp);
    points.dedup();

    let mut s_star = 0.0;
    for w in points.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        if psi(lo) >= 0.0 && psi(hi) <= 0.0 {
            let mid = 0.5 * (lo + hi);
            let (mut num, mut den) = (0.0, 1.0);
            for j in 0..cfg.n_followers {
                let free = (big_a - b * mid) / (cfg.c[j] + b);
                if free >= cfg.y_caps[j] {
                    num += cfg.y_caps[j];
                } else if free > 0.0 {
                    num += big_a / (cfg.c[j] + b);
                    den += b / (cfg.c[j] + b);
                }
            }
            s_star = (num / den).clamp(lo, hi);
            break;
        }
    }
    DVector::from_fn(cfg.n_followers, |j, _| comp(j, s_star))
}

/// One scenario `a(xi)` of the follower VI.
pub struct CournotScenario<'a> {
    cfg: &'a CournotConfig,
    set: &'a ConvexSet,
    a: f64,
}

impl ParametricVi for CournotScenario<'_> {
    fn lower_dim(&self) -> usize {
        self.cfg.n_followers
    }
    fn map(&self, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        cournot_map(self.cfg, x[0], y, self.a)
    }
    fn set(&self) -> &ConvexSet {
        self.set
    }
    fn constants(&self) -> ViConstants {
        self.cfg.vi_constants()
    }
}

/// Federated leader problem: client `i` holds a fixed list of demand draws.
pub struct CournotGame {
    cfg: CournotConfig,
    demand: Vec<Vec<f64>>,
    x_set: ConvexSet,
    y_set: ConvexSet,
}

impl CournotGame {
    pub fn new(cfg: CournotConfig, demand: Vec<Vec<f64>>) -> Result<Self> {
        if demand.is_empty() || demand.iter().any(|d| d.is_empty()) {
            return Err(ZofedError::config("every client needs at least one demand draw"));
        }
        let x_set = ConvexSet::uniform_box(1, 0.0, cfg.x_cap)?;
        let y_set = cfg.follower_set();
        Ok(Self {
            cfg,
            demand,
            x_set,
            y_set,
        })
    }

    /// `samples` draws of `a ~ U[a_low, a_high]` per client.
    pub fn sample<R: Rng + ?Sized>(cfg: CournotConfig, clients: usize, samples: usize, rng: &mut R) -> Result<Self> {
        let (lo, hi) = (cfg.a_low, cfg.a_high);
        let demand = (0..clients)
            .map(|_| (0..samples).map(|_| rng.random_range(lo..hi)).collect())
            .collect();
        Self::new(cfg, demand)
    }

    pub fn config(&self) -> &CournotConfig {
        &self.cfg
    }

    pub fn demand(&self, client: usize, sample: usize) -> f64 {
        self.demand[client][sample]
    }

    /// Leader loss averaged over all clients and draws with exact follower responses.
    pub fn exact_global_loss(&self, x: f64) -> f64 {
        let m = self.demand.len() as f64;
        self.demand
            .iter()
            .map(|d| {
                d.iter()
                    .map(|&a| cournot_leader_loss(&self.cfg, x, &cournot_closed_form(&self.cfg, x, a), a))
                    .sum::<f64>()
                    / d.len() as f64
            })
            .sum::<f64>()
            / m
    }
}

impl TwoStageProblem for CournotGame {
    fn dim(&self) -> usize {
        1
    }
    fn num_clients(&self) -> usize {
        self.demand.len()
    }
    fn num_samples(&self, client: usize) -> usize {
        self.demand[client].len()
    }
    fn constraint(&self, _client: usize) -> &ConvexSet {
        &self.x_set
    }
    fn scenario(&self, client: usize, sample: usize) -> Box<dyn ParametricVi + '_> {
        Box::new(CournotScenario {
            cfg: &self.cfg,
            set: &self.y_set,
            a: self.demand[client][sample],
        })
    }
    fn upper_eval(&self, client: usize, x: &DVector<f64>, y: &DVector<f64>, sample: usize) -> Result<f64> {
        Ok(cournot_leader_loss(&self.cfg, x[0], y, self.demand[client][sample]))
    }
    fn exact_lower(&self, client: usize, sample: usize, x: &DVector<f64>) -> Option<DVector<f64>> {
        Some(cournot_closed_form(&self.cfg, x[0], self.demand[client][sample]))
    }
}
