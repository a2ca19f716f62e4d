//! Bilevel zeroth-order federated averaging with delayed inexact lower-level
//! solutions, the federated Local SGD lower-level solver, and the minimax
//! adapter.

use nalgebra::DVector;
use rand::{Rng, RngCore};

use super::{aggregate, checksum, consensus_error, for_each_client, infeasibility, OrFail, RoundRecord, RunConfig, RunResult, Trajectory};
use crate::error::{Result, ZofedError};
use crate::problems::{BilevelProblem, LowerLevelOracle, LowerLevelSpec, MinimaxProblem, Variant};
use crate::projection::ConvexSet;
use crate::rng::{stream_rng, Sign, Stream, StreamRng};
use crate::smoothing::{moreau_grad, sample_sphere, SmoothingParams};

/// Lower-level iteration budget rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LowerSchedule {
    /// `T = ceil(2 a_r ln a_r)`.
    Printed,
    /// `T = ceil(scale (r + 1)^(2/3) n / m)`.
    Theorem { scale: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LowerConfig {
    pub schedule: LowerSchedule,
    /// Constant `C` in the certified error `C / (m T)`.
    pub certificate: f64,
    /// Start each call from the previous round's solution of the same sign.
    pub warm_start: bool,
    /// Use the closed-form lower level instead of Local SGD.
    pub exact: bool,
}

impl Default for LowerConfig {
    fn default() -> Self {
        Self {
            schedule: LowerSchedule::Printed,
            certificate: 1.0,
            warm_start: true,
            exact: false,
        }
    }
}

/// The schedule of one lower-level call.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LowerPlan {
    /// `a_r = max(m, 4 kappa_h, r) + 1`.
    pub a_r: f64,
    /// `1 / (mu_h a_r)`.
    pub step: f64,
    /// Target iteration count `T`.
    pub total: u64,
    /// Local steps per lower round, `ceil(T / m)`.
    pub local: u64,
    /// Lower rounds, `ceil(T / local)`.
    pub rounds: u64,
    /// Certified error `C / (m T)`.
    pub eps: f64,
}

pub fn lower_plan(spec: &LowerLevelSpec, clients: usize, round: usize, upper_dim: usize, cfg: &LowerConfig) -> Result<LowerPlan> {
    spec.validate()?;
    if clients == 0 {
        return Err(ZofedError::config("lower level needs at least one client"));
    }
    if !(cfg.certificate > 0.0) {
        return Err(ZofedError::config("certificate constant must be > 0"));
    }
    let m = clients as f64;
    let a_r = m.max(4.0 * spec.kappa()).max(round as f64) + 1.0;
    let total = match cfg.schedule {
        LowerSchedule::Printed => (2.0 * a_r * a_r.ln()).ceil(),
        LowerSchedule::Theorem { scale } => {
            if !(scale > 0.0) {
                return Err(ZofedError::config("theorem schedule scale must be > 0"));
            }
            (scale * ((round + 1) as f64).powf(2.0 / 3.0) * upper_dim as f64 / m).ceil()
        }
    }
    .max(1.0) as u64;
    let local = total.div_ceil(clients as u64);
    let rounds = total.div_ceil(local);
    Ok(LowerPlan {
        a_r,
        step: 1.0 / (spec.mu_h * a_r),
        total,
        local,
        rounds,
        eps: cfg.certificate / (m * total as f64),
    })
}

/// A lower-level point with its certified mean-squared error.
#[derive(Clone, Debug, PartialEq)]
pub struct InexactSolution {
    pub y: DVector<f64>,
    pub eps: f64,
    pub rounds_used: u64,
    /// Local steps per client.
    pub iters_used: u64,
}

/// Federated Local SGD on the lower level at fixed `x`. Steps are projected
/// when the problem declares a lower-level set.
#[allow(clippy::too_many_arguments)]
pub fn local_sgd_lower<L: LowerLevelOracle + ?Sized>(
    oracle: &L,
    x: &DVector<f64>,
    round: usize,
    upper_dim: usize,
    cfg: &LowerConfig,
    warm_start: Option<&DVector<f64>>,
    seed: u64,
    sign: Sign,
    parallel: bool,
) -> Result<InexactSolution> {
    let spec = oracle.lower_spec();
    let m = oracle.lower_clients();
    let plan = lower_plan(spec, m, round, upper_dim, cfg)?;
    let mut y = match warm_start {
        Some(w) if w.len() != spec.dim => {
            return Err(ZofedError::Dimension {
                expected: spec.dim,
                got: w.len(),
            })
        }
        Some(w) => w.clone(),
        None => DVector::zeros(spec.dim),
    };
    if let Some(p) = &spec.projector {
        y = p.project(&y);
    }
    let limit = 1e6 * y.norm().max(1.0);
    let mut states: Vec<(DVector<f64>, StreamRng)> = (0..m)
        .map(|client| (y.clone(), stream_rng(seed, Stream::Lower { round, sign, client })))
        .collect();
    for outer in 0..plan.rounds {
        for s in states.iter_mut() {
            s.0.clone_from(&y);
        }
        for_each_client(&mut states, parallel, |i, (yi, rng)| {
            for t in 0..plan.local {
                let g = oracle.lower_grad(i, x, yi, rng).map_err(|e| e.at(i, outer * plan.local + t))?;
                *yi -= g * plan.step;
                if let Some(p) = &spec.projector {
                    *yi = p.project(yi);
                }
                let norm = yi.norm();
                if !(norm <= limit) {
                    return Err(ZofedError::Divergence(format!(
                        "lower-level iterate norm {norm:.3e} exceeded {limit:.3e} on client {i}; \
                         step 1/(mu_h a_r) = {:.3e} is too large for the declared mu_h/L_h",
                        plan.step
                    )));
                }
            }
            Ok(())
        })?;
        let locals: Vec<DVector<f64>> = states.iter().map(|s| s.0.clone()).collect();
        y = aggregate(&locals)?;
    }
    Ok(InexactSolution {
        y,
        eps: plan.eps,
        rounds_used: plan.rounds,
        iters_used: plan.rounds * plan.local,
    })
}

struct UpperClient {
    x: DVector<f64>,
    data_rng: StreamRng,
}

fn mean_loss<B: BilevelProblem + ?Sized>(p: &B, x: &DVector<f64>, ys: &[&DVector<f64>]) -> Result<f64> {
    let mut s = 0.0;
    for y in ys {
        s += p.global_upper_loss(x, y)?;
    }
    Ok(s / ys.len() as f64)
}

fn mean_test<B: BilevelProblem + ?Sized>(p: &B, x: &DVector<f64>, ys: &[&DVector<f64>]) -> Option<f64> {
    let mut s = 0.0;
    for y in ys {
        s += p.test_loss(x, y)?;
    }
    Some(s / ys.len() as f64)
}

/// Runs the bilevel engine. Each round the server draws one sphere direction
/// `v`, obtains lower-level solutions at `x_hat +- v` (exactly two calls), and
/// every client reuses them for all `H` local steps.
pub fn run_bilevel<B: BilevelProblem + ?Sized>(problem: &B, cfg: &RunConfig, lower: &LowerConfig) -> RunResult {
    let variant = Variant::Bilevel;
    let n = problem.dim();
    let mut traj = Trajectory::new(variant, DVector::zeros(n));
    cfg.validate(problem.num_clients()).or_fail(&traj)?;
    problem.lower_spec().validate().or_fail(&traj)?;
    let params = SmoothingParams::new(cfg.eta, n).or_fail(&traj)?;
    let mut x_hat = cfg.initial_point(n, problem.constraint(0)).or_fail(&traj)?;
    traj.x_final = x_hat.clone();
    if lower.exact && problem.exact_lower(&x_hat).is_none() {
        return Err(ZofedError::config("exact lower level requested but the problem has no closed form")).or_fail(&traj);
    }

    let solve = |x: &DVector<f64>, r: usize, sign: Sign, warm: Option<&DVector<f64>>| -> Result<InexactSolution> {
        if lower.exact {
            let y = problem
                .exact_lower(x)
                .ok_or_else(|| ZofedError::oracle("closed-form lower level unavailable"))?;
            return Ok(InexactSolution {
                y,
                eps: 0.0,
                rounds_used: 0,
                iters_used: 0,
            });
        }
        local_sgd_lower(problem, x, r, n, lower, warm, cfg.seed, sign, cfg.parallel_clients)
    };
    let sets = || (0..problem.num_clients()).map(|i| problem.constraint(i));
    let exact_loss = |x: &DVector<f64>| -> Result<Option<f64>> {
        problem.exact_lower(x).map(|y| problem.global_upper_loss(x, &y)).transpose()
    };

    let mut server_rng = stream_rng(cfg.seed, Stream::Smoothing(0));
    let mut clients: Vec<UpperClient> = (0..cfg.clients)
        .map(|i| UpperClient {
            x: x_hat.clone(),
            data_rng: stream_rng(cfg.seed, Stream::Data(i)),
        })
        .collect();
    let (mut warm_plus, mut warm_minus): (Option<DVector<f64>>, Option<DVector<f64>>) = (None, None);
    let mut consensus = 0.0;

    for r in 0..cfg.rounds {
        let v = sample_sphere(&mut server_rng, &params);
        let vv = v.as_vector();
        let x_plus = &x_hat + vv;
        let x_minus = &x_hat - vv;
        let wp = if lower.warm_start { warm_plus.as_ref() } else { None };
        let wm = if lower.warm_start { warm_minus.as_ref() } else { None };
        let sol_plus = solve(&x_plus, r, Sign::Plus, wp).or_fail(&traj)?;
        let sol_minus = solve(&x_minus, r, Sign::Minus, wm).or_fail(&traj)?;
        traj.counters.lower_calls += 2;
        traj.counters.lower_rounds += sol_plus.rounds_used + sol_minus.rounds_used;
        traj.counters.lower_iters += sol_plus.iters_used + sol_minus.iters_used;
        let (y_plus, y_minus) = (&sol_plus.y, &sol_minus.y);
        traj.lower_checksums.push(checksum([y_plus, y_minus]));

        let ys = [y_plus, y_minus];
        let rec = RoundRecord {
            round: r,
            k: (r * cfg.local_steps) as u64,
            loss: mean_loss(problem, &x_hat, &ys).or_fail(&traj)?,
            exact_loss: exact_loss(&x_hat).or_fail(&traj)?,
            infeasibility: infeasibility(&x_hat, sets()),
            consensus_error: consensus,
            comm_rounds: r,
            lower_rounds: Some(traj.counters.lower_rounds),
            lower_iters: Some(traj.counters.lower_iters),
            eps: Some(sol_plus.eps.max(sol_minus.eps)),
            validation_loss: mean_test(problem, &x_hat, &ys),
            ..Default::default()
        };
        traj.log(rec, &x_hat, cfg);

        let base_k = (r * cfg.local_steps) as u64;
        let scale = params.estimator_scale();
        for c in clients.iter_mut() {
            c.x.clone_from(&x_hat);
        }
        for_each_client(&mut clients, cfg.parallel_clients, |i, c| {
            let count = problem.num_samples(i);
            for t in 0..cfg.local_steps {
                let l = c.data_rng.random_range(0..count);
                let f_plus = problem
                    .upper_eval(i, &(&c.x + vv), y_plus, l)
                    .map_err(|e| e.at(i, base_k + t as u64))?;
                let f_minus = problem
                    .upper_eval(i, &(&c.x - vv), y_minus, l)
                    .map_err(|e| e.at(i, base_k + t as u64))?;
                let g = vv * (scale * (f_plus - f_minus));
                let step = g + moreau_grad(&c.x, problem.constraint(i), params.eta());
                c.x -= step * cfg.gamma;
            }
            Ok(())
        })
        .or_fail(&traj)?;
        let steps = (cfg.clients * cfg.local_steps) as u64;
        traj.counters.oracle_pairs += steps;
        traj.counters.projections += steps;

        let locals: Vec<DVector<f64>> = clients.iter().map(|c| c.x.clone()).collect();
        x_hat = aggregate(&locals).or_fail(&traj)?;
        traj.counters.aggregations += 1;
        consensus = consensus_error(&locals, &x_hat);
        if !x_hat.iter().all(|v| v.is_finite()) {
            return Err(ZofedError::Divergence(format!("non-finite iterate after round {}", r + 1))).or_fail(&traj);
        }
        traj.x_final = x_hat.clone();
        warm_plus = Some(sol_plus.y);
        warm_minus = Some(sol_minus.y);
    }

    let r = cfg.rounds;
    let warm = if lower.warm_start { warm_plus.as_ref() } else { None };
    let eval = solve(&x_hat, r, Sign::Eval, warm).or_fail(&traj)?;
    let rec = RoundRecord {
        round: r,
        k: (r * cfg.local_steps) as u64,
        loss: problem.global_upper_loss(&x_hat, &eval.y).or_fail(&traj)?,
        exact_loss: exact_loss(&x_hat).or_fail(&traj)?,
        infeasibility: infeasibility(&x_hat, sets()),
        consensus_error: consensus,
        comm_rounds: r,
        lower_rounds: Some(traj.counters.lower_rounds),
        lower_iters: Some(traj.counters.lower_iters),
        eps: Some(eval.eps),
        validation_loss: problem.test_loss(&x_hat, &eval.y),
        ..Default::default()
    };
    traj.log(rec, &x_hat, cfg);
    Ok(traj)
}

/// A minimax problem viewed as a bilevel problem with lower objective `-f`.
pub struct MinimaxAsBilevel<M> {
    inner: M,
    spec: LowerLevelSpec,
}

/// Wraps a minimax problem so the bilevel engine can run it unchanged.
pub fn minimax_adapter<M: MinimaxProblem>(inner: M) -> Result<MinimaxAsBilevel<M>> {
    let mu = inner
        .concavity_modulus()
        .ok_or_else(|| ZofedError::config("minimax adapter needs a strong-concavity modulus"))?;
    let spec = LowerLevelSpec {
        dim: inner.y_dim(),
        mu_h: mu,
        l_h: inner.smoothness_y().max(mu),
        projector: inner.y_constraint(),
    };
    spec.validate()?;
    Ok(MinimaxAsBilevel { inner, spec })
}

impl<M> MinimaxAsBilevel<M> {
    pub fn inner(&self) -> &M {
        &self.inner
    }
}

impl<M: MinimaxProblem> LowerLevelOracle for MinimaxAsBilevel<M> {
    fn lower_spec(&self) -> &LowerLevelSpec {
        &self.spec
    }
    fn lower_clients(&self) -> usize {
        self.inner.num_clients()
    }
    fn lower_grad(&self, client: usize, x: &DVector<f64>, y: &DVector<f64>, rng: &mut dyn RngCore) -> Result<DVector<f64>> {
        Ok(-self.inner.grad_y(client, x, y, rng)?)
    }
}

impl<M: MinimaxProblem> BilevelProblem for MinimaxAsBilevel<M> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn num_clients(&self) -> usize {
        self.inner.num_clients()
    }
    fn num_samples(&self, client: usize) -> usize {
        self.inner.num_samples(client)
    }
    fn constraint(&self, client: usize) -> &ConvexSet {
        self.inner.constraint(client)
    }
    fn upper_eval(&self, client: usize, x: &DVector<f64>, y: &DVector<f64>, sample: usize) -> Result<f64> {
        self.inner.value(client, x, y, sample)
    }
    fn exact_lower(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        self.inner.exact_maximizer(x)
    }
}
