//! Two-stage zeroth-order federated averaging where every local step solves
//! two scenario VIs by the projection method with a logarithmic budget.

use nalgebra::DVector;
use rand::Rng;

use super::{aggregate, consensus_error, for_each_client, infeasibility, OrFail, RoundRecord, RunConfig, RunResult, Trajectory};
use crate::error::{Result, ZofedError};
use crate::problems::{ParametricVi, TwoStageProblem, Variant, ViConstants};
use crate::rng::{stream_rng, Stream, StreamRng};
use crate::smoothing::{moreau_grad, sample_sphere, SmoothingParams};

/// Iteration budget `t_k = max(1, ceil(tau ln(k + 1)))` and step `alpha`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViBudget {
    pub tau: f64,
    pub alpha: f64,
}

/// Smallest `tau` for which `eps_k <= B / (k + 1)`: `-1 / ln(1 - 1/kappa^2)`.
pub fn admissible_tau(kappa: f64) -> f64 {
    if kappa <= 1.0 {
        0.0
    } else {
        -1.0 / (-1.0 / (kappa * kappa)).ln_1p()
    }
}

/// Per-step squared contraction factor `1 - 1/kappa^2`.
pub fn contraction_factor(consts: &ViConstants) -> f64 {
    let k = consts.kappa();
    1.0 - 1.0 / (k * k)
}

impl ViBudget {
    /// Budget with `alpha = mu_F / L_F^2`.
    pub fn new(tau: f64, consts: &ViConstants) -> Result<Self> {
        validate_constants(consts)?;
        if !(tau >= 0.0) || !tau.is_finite() {
            return Err(ZofedError::config(format!("tau must be finite and >= 0, got {tau}")));
        }
        Ok(Self {
            tau,
            alpha: consts.mu_f / (consts.l_f * consts.l_f),
        })
    }

    /// Iterations at outer step `k >= 1`.
    pub fn iterations(&self, k: u64) -> u64 {
        ((self.tau * ((k + 1) as f64).ln()).ceil() as u64).max(1)
    }

    /// `B (1 - 1/kappa^2)^t`.
    pub fn certified_error(consts: &ViConstants, t: u64) -> f64 {
        consts.b_bound * contraction_factor(consts).powf(t as f64)
    }

    /// Warning text when `tau` is below the admissible value.
    pub fn admissibility_warning(&self, consts: &ViConstants) -> Option<String> {
        let need = admissible_tau(consts.kappa());
        (self.tau < need).then(|| format!("tau = {} is below the admissible value {need:.4} for kappa_F = {:.4}", self.tau, consts.kappa()))
    }
}

fn validate_constants(consts: &ViConstants) -> Result<()> {
    if !(consts.mu_f > 0.0) || !(consts.l_f >= consts.mu_f) || !consts.l_f.is_finite() {
        return Err(ZofedError::config(format!(
            "VI constants need 0 < mu_F <= L_F, got mu_F = {}, L_F = {}",
            consts.mu_f, consts.l_f
        )));
    }
    if !(consts.b_bound > 0.0) {
        return Err(ZofedError::config("VI bound B must be > 0"));
    }
    Ok(())
}

/// Budget with the minimal admissible `tau`; `kappa_F = 1` gives `tau = 0`
/// and the one-step floor.
pub fn tuned_budget(mu_f: f64, l_f: f64) -> Result<ViBudget> {
    let consts = ViConstants { mu_f, l_f, b_bound: 1.0 };
    ViBudget::new(admissible_tau(consts.kappa()), &consts)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViSolution {
    pub y: DVector<f64>,
    /// `B (1 - 1/kappa^2)^t`.
    pub eps: f64,
    pub iters: u64,
}

/// `t_k` projected steps `y <- P_Y(y - alpha G(x, y))` from `y0` (or the
/// scenario's default start).
pub fn vi_projection_solve<V: ParametricVi + ?Sized>(
    vi: &V,
    x: &DVector<f64>,
    budget: &ViBudget,
    k: u64,
    y0: Option<&DVector<f64>>,
) -> Result<ViSolution> {
    vi_projection_solve_observed(vi, x, budget, k, y0, |_, _| {})
}

/// As [`vi_projection_solve`], calling `observe(t, y_t)` for `t = 0..=t_k`.
pub fn vi_projection_solve_observed<V, F>(
    vi: &V,
    x: &DVector<f64>,
    budget: &ViBudget,
    k: u64,
    y0: Option<&DVector<f64>>,
    mut observe: F,
) -> Result<ViSolution>
where
    V: ParametricVi + ?Sized,
    F: FnMut(u64, &DVector<f64>),
{
    let n = vi.lower_dim();
    let set = vi.set();
    let mut y = match y0 {
        Some(y) if y.len() != n => return Err(ZofedError::Dimension { expected: n, got: y.len() }),
        Some(y) => set.project(y),
        None => vi.start(),
    };
    if y.len() != n {
        return Err(ZofedError::config(format!("VI start has dimension {}, expected {n}", y.len())));
    }
    let t_k = budget.iterations(k);
    observe(0, &y);
    for t in 1..=t_k {
        let g = vi.map(x, &y);
        y = set.project(&(y - g * budget.alpha));
        observe(t, &y);
    }
    Ok(ViSolution {
        y,
        eps: ViBudget::certified_error(&vi.constants(), t_k),
        iters: t_k,
    })
}

/// Options of the two-stage engine.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TwoStageConfig {
    /// `None` uses the admissible `tau` of each scenario.
    pub tau: Option<f64>,
    /// Overrides `alpha = mu_F / L_F^2`.
    pub alpha: Option<f64>,
    /// Start each VI from the client's previous solution of the same sign.
    pub warm_start: bool,
    /// Samples per client used for the reported loss; `None` uses all.
    pub loss_samples: Option<usize>,
}

impl TwoStageConfig {
    pub fn budget(&self, consts: &ViConstants) -> Result<ViBudget> {
        let mut b = ViBudget::new(self.tau.unwrap_or_else(|| admissible_tau(consts.kappa())), consts)?;
        if let Some(a) = self.alpha {
            if !(a > 0.0) {
                return Err(ZofedError::config("alpha must be > 0"));
            }
            b.alpha = a;
        }
        Ok(b)
    }
}

struct TsClient {
    x: DVector<f64>,
    data_rng: StreamRng,
    smooth_rng: StreamRng,
    warm: Option<(DVector<f64>, DVector<f64>)>,
    projections: u64,
    last_eps: f64,
}

/// Loss at `x` with VI solves at budget step `k`, plus the closed-form loss where available.
fn evaluate<P: TwoStageProblem + ?Sized>(p: &P, x: &DVector<f64>, ts: &TwoStageConfig, k: u64) -> Result<(f64, Option<f64>)> {
    let m = p.num_clients();
    let (mut loss, mut exact, mut has_exact) = (0.0, 0.0, true);
    for i in 0..m {
        let n = ts.loss_samples.map_or(p.num_samples(i), |s| s.min(p.num_samples(i)));
        let (mut li, mut ei) = (0.0, 0.0);
        for l in 0..n {
            let vi = p.scenario(i, l);
            let budget = ts.budget(&vi.constants())?;
            let sol = vi_projection_solve(vi.as_ref(), x, &budget, k, None)?;
            li += p.upper_eval(i, x, &sol.y, l)?;
            match p.exact_lower(i, l, x) {
                Some(y) if has_exact => ei += p.upper_eval(i, x, &y, l)?,
                _ => has_exact = false,
            }
        }
        loss += li / n as f64;
        exact += ei / n as f64;
    }
    Ok((loss / m as f64, has_exact.then_some(exact / m as f64)))
}

/// Runs the two-stage engine. Each local step draws its own sample and sphere
/// direction per client and solves the scenario VI at `x_i +- v`.
pub fn run_two_stage<P: TwoStageProblem + ?Sized>(problem: &P, cfg: &RunConfig, ts: &TwoStageConfig) -> RunResult {
    let n = problem.dim();
    let mut traj = Trajectory::new(Variant::TwoStage, DVector::zeros(n));
    cfg.validate(problem.num_clients()).or_fail(&traj)?;
    let params = SmoothingParams::new(cfg.eta, n).or_fail(&traj)?;
    let mut x_hat = cfg.initial_point(n, problem.constraint(0)).or_fail(&traj)?;
    traj.x_final = x_hat.clone();

    let probe = problem.scenario(0, 0);
    let probe_budget = ts.budget(&probe.constants()).or_fail(&traj)?;
    if let Some(w) = probe_budget.admissibility_warning(&probe.constants()) {
        log::warn!("{w}");
    }
    drop(probe);

    let mut clients: Vec<TsClient> = (0..cfg.clients)
        .map(|i| TsClient {
            x: x_hat.clone(),
            data_rng: stream_rng(cfg.seed, Stream::Data(i)),
            smooth_rng: stream_rng(cfg.seed, Stream::Smoothing(i)),
            warm: None,
            projections: 0,
            last_eps: f64::NAN,
        })
        .collect();
    let sets = || (0..problem.num_clients()).map(|i| problem.constraint(i));
    let mut consensus = 0.0;
    let mut last_eps = None;

    for r in 0..=cfg.rounds {
        let eval_k = (r * cfg.local_steps) as u64 + 1;
        let (loss, exact_loss) = evaluate(problem, &x_hat, ts, eval_k).or_fail(&traj)?;
        traj.counters.vi_projections = clients.iter().map(|c| c.projections).sum();
        traj.log(RoundRecord {
            round: r,
            k: (r * cfg.local_steps) as u64,
            loss,
            exact_loss,
            infeasibility: infeasibility(&x_hat, sets()),
            consensus_error: consensus,
            comm_rounds: r,
            eps: last_eps,
            projections: Some(traj.counters.vi_projections),
            tau: Some(probe_budget.tau),
            alpha: Some(probe_budget.alpha),
            ..Default::default()
        }, &x_hat, cfg);
        if r == cfg.rounds {
            break;
        }

        let base_k = (r * cfg.local_steps) as u64;
        let scale = params.estimator_scale();
        for c in clients.iter_mut() {
            c.x.clone_from(&x_hat);
        }
        for_each_client(&mut clients, cfg.parallel_clients, |i, c| {
            let count = problem.num_samples(i);
            for t in 0..cfg.local_steps {
                let k = base_k + t as u64 + 1;
                let l = c.data_rng.random_range(0..count);
                let v = sample_sphere(&mut c.smooth_rng, &params);
                let vi = problem.scenario(i, l);
                let budget = ts.budget(&vi.constants())?;
                let x_plus = &c.x + v.as_vector();
                let x_minus = &c.x - v.as_vector();
                let (w_plus, w_minus) = match (&c.warm, ts.warm_start) {
                    (Some((a, b)), true) => (Some(a), Some(b)),
                    _ => (None, None),
                };
                let sp = vi_projection_solve(vi.as_ref(), &x_plus, &budget, k, w_plus)?;
                let sm = vi_projection_solve(vi.as_ref(), &x_minus, &budget, k, w_minus)?;
                c.projections += sp.iters + sm.iters;
                c.last_eps = sp.eps.max(sm.eps);
                let f_plus = problem.upper_eval(i, &x_plus, &sp.y, l).map_err(|e| e.at(i, k - 1))?;
                let f_minus = problem.upper_eval(i, &x_minus, &sm.y, l).map_err(|e| e.at(i, k - 1))?;
                let g = v.as_vector() * (scale * (f_plus - f_minus));
                let step = g + moreau_grad(&c.x, problem.constraint(i), params.eta());
                c.x -= step * cfg.gamma;
                if ts.warm_start {
                    c.warm = Some((sp.y, sm.y));
                }
            }
            Ok(())
        })
        .or_fail(&traj)?;
        let steps = (cfg.clients * cfg.local_steps) as u64;
        traj.counters.oracle_pairs += steps;
        traj.counters.projections += steps;
        last_eps = clients.iter().map(|c| c.last_eps).reduce(f64::max);

        let locals: Vec<DVector<f64>> = clients.iter().map(|c| c.x.clone()).collect();
        x_hat = aggregate(&locals).or_fail(&traj)?;
        traj.counters.aggregations += 1;
        consensus = consensus_error(&locals, &x_hat);
        if !x_hat.iter().all(|v| v.is_finite()) {
            return Err(ZofedError::Divergence(format!("non-finite iterate after round {}", r + 1))).or_fail(&traj);
        }
        traj.x_final = x_hat.clone();
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::InitialPoint;
    use crate::problems::cournot::{cournot_closed_form, CournotConfig, CournotGame};
    use crate::problems::synthetic::AffineVi;
    use crate::projection::ConvexSet;
    use nalgebra::{dmatrix, dvector};

    #[test]
    fn one_dimensional_exact_contraction() {
        let vi = AffineVi::new(dmatrix![1.0], dvector![-5.0], ConvexSet::Whole, 25.0).unwrap();
        let budget = ViBudget::new(1.0, &vi.constants()).unwrap();
        assert_eq!(budget.alpha, 1.0);
        let sol = vi_projection_solve(&vi, &dvector![0.0], &budget, 1, Some(&dvector![0.0])).unwrap();
        assert_eq!(sol.y, dvector![5.0]);
        assert_eq!(sol.eps, 0.0);
    }

    #[test]
    fn tuned_tau_examples() {
        let b = tuned_budget(1.0, 2f64.sqrt()).unwrap();
        assert!((b.tau - 1.0 / 2f64.ln()).abs() < 1e-12);
        assert_eq!(tuned_budget(1.0, 1.0).unwrap().tau, 0.0);
        assert_eq!(tuned_budget(1.0, 1.0).unwrap().iterations(1000), 1);
        let big = tuned_budget(1.0, 100.0).unwrap();
        assert!((big.tau / 1e4 - 1.0).abs() < 1e-3);
        assert!(tuned_budget(2.0, 1.0).is_err());
    }

    #[test]
    fn tuned_tau_gives_harmonic_error_decay() {
        for kappa in [1.2, 2.0, 7.5, 40.0] {
            let consts = ViConstants {
                mu_f: 1.0,
                l_f: kappa,
                b_bound: 3.0,
            };
            let b = ViBudget::new(admissible_tau(kappa), &consts).unwrap();
            for k in 0..5000u64 {
                let eps = ViBudget::certified_error(&consts, b.iterations(k.max(1)));
                assert!(eps <= consts.b_bound / (k + 1) as f64 * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn cournot_iterates_stay_feasible_and_certified() {
        let mut rng = stream_rng(21, Stream::Init);
        let cfg = CournotConfig::sample(10, 0.5, &mut rng).unwrap();
        let game = CournotGame::sample(cfg.clone(), 1, 100, &mut rng).unwrap();
        let set = cfg.follower_set();
        for l in 0..100 {
            let x = dvector![rng.random_range(0.0..10.0)];
            let vi = game.scenario(0, l);
            let budget = TwoStageConfig::default().budget(&vi.constants()).unwrap();
            let sol = vi_projection_solve_observed(vi.as_ref(), &x, &budget, 50, None, |_, y| {
                assert!(set.contains(y, 0.0));
            })
            .unwrap();
            let ystar = cournot_closed_form(&cfg, x[0], game.demand(0, l));
            assert!((sol.y - ystar).norm_squared() <= sol.eps);
        }
    }

    #[test]
    fn zero_step_keeps_x_and_counts_projections() {
        let mut rng = stream_rng(1, Stream::Init);
        let cfg = CournotConfig::sample(3, 1.0, &mut rng).unwrap();
        let game = CournotGame::sample(cfg, 2, 10, &mut rng).unwrap();
        let run = RunConfig::new(2, 0.0, 0.1, 3, 4, 9).with_init(InitialPoint::Given(dvector![2.0]));
        let ts = TwoStageConfig {
            tau: Some(5.0),
            ..Default::default()
        };
        let traj = run_two_stage(&game, &run, &ts).unwrap();
        assert_eq!(traj.x_final, dvector![2.0]);
        let budget = ts.budget(&game.config().vi_constants()).unwrap();
        let expect: u64 = (1..=12u64).map(|k| 2 * 2 * budget.iterations(k)).sum();
        assert_eq!(traj.counters.vi_projections, expect);
        assert_eq!(traj.records.last().unwrap().projections, Some(expect));
        assert_eq!(traj.counters.aggregations, 4);
    }

    #[test]
    fn two_stage_is_reproducible_under_parallelism() {
        let mut rng = stream_rng(4, Stream::Init);
        let cfg = CournotConfig::sample(4, 0.5, &mut rng).unwrap();
        let game = CournotGame::sample(cfg, 3, 20, &mut rng).unwrap();
        let mut run = RunConfig::new(3, 1e-2, 0.1, 2, 5, 3).with_init(InitialPoint::Given(dvector![1.0]));
        let a = run_two_stage(&game, &run, &TwoStageConfig::default()).unwrap();
        run.parallel_clients = true;
        let b = run_two_stage(&game, &run, &TwoStageConfig::default()).unwrap();
        assert_eq!(a, b);
    }
}
