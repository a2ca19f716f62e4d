//! Single-level zeroth-order federated averaging with local steps and a
//! Moreau correction for the local constraint sets.

use nalgebra::DVector;
use rand::Rng;

use super::{aggregate, consensus_error, for_each_client, infeasibility, OrFail, RoundRecord, RunConfig, RunResult, Trajectory};
use crate::error::{Result, ZofedError};
use crate::problems::{Variant, ZerothOrderOracle};
use crate::rng::{stream_rng, Stream, StreamRng};
use crate::smoothing::{moreau_grad, sample_sphere, stationarity_residual, two_point_grad, SmoothingParams};

/// A client's iterate and its private random streams.
#[derive(Clone, Debug)]
pub struct ClientState {
    pub x: DVector<f64>,
    data_rng: StreamRng,
    smooth_rng: StreamRng,
}

impl ClientState {
    pub fn new(seed: u64, client: usize, x: DVector<f64>) -> Self {
        Self {
            x,
            data_rng: stream_rng(seed, Stream::Data(client)),
            smooth_rng: stream_rng(seed, Stream::Smoothing(client)),
        }
    }
}

/// Step counts of one local step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StepCost {
    pub oracle_pairs: u64,
    pub projections: u64,
}

/// `x <- x - gamma (g + (x - P_X(x)) / eta)` with `g` the two-point estimate
/// at freshly drawn sample indices and sphere directions.
pub fn local_step_nn<P: ZerothOrderOracle + ?Sized>(
    problem: &P,
    client: usize,
    state: &mut ClientState,
    cfg: &RunConfig,
    params: &SmoothingParams,
) -> Result<StepCost> {
    let n = problem.num_samples(client);
    if n == 0 {
        return Err(ZofedError::config(format!("client {client} has no samples")));
    }
    let mut g = DVector::zeros(state.x.len());
    for _ in 0..cfg.smoothing_draws {
        let batch: Vec<usize> = (0..cfg.batch_size).map(|_| state.data_rng.random_range(0..n)).collect();
        let v = sample_sphere(&mut state.smooth_rng, params);
        let est = two_point_grad(
            |z| {
                if let [l] = batch[..] {
                    return problem.eval(client, z, l);
                }
                let mut s = 0.0;
                for &l in &batch {
                    s += problem.eval(client, z, l)?;
                }
                Ok(s / batch.len() as f64)
            },
            &state.x,
            &v,
            params,
        )?;
        if cfg.smoothing_draws == 1 {
            g = est.g;
        } else {
            g += est.g;
        }
    }
    if cfg.smoothing_draws > 1 {
        g /= cfg.smoothing_draws as f64;
    }
    let step = g + moreau_grad(&state.x, problem.constraint(client), params.eta());
    state.x -= step * cfg.gamma;
    Ok(StepCost {
        oracle_pairs: (cfg.smoothing_draws * cfg.batch_size) as u64,
        projections: 1,
    })
}

fn record<P: ZerothOrderOracle + ?Sized>(
    problem: &P,
    cfg: &RunConfig,
    params: &SmoothingParams,
    round: usize,
    x_hat: &DVector<f64>,
    consensus: f64,
) -> Result<RoundRecord> {
    let residual = if cfg.residual_due(round) {
        let mut rng = stream_rng(cfg.seed, Stream::Metrics(round));
        Some(stationarity_residual(problem, x_hat, params, cfg.residual_samples, &mut rng)?)
    } else {
        None
    };
    Ok(RoundRecord {
        round,
        k: (round * cfg.local_steps) as u64,
        loss: problem.global_loss(x_hat)?,
        residual,
        infeasibility: infeasibility(x_hat, (0..problem.num_clients()).map(|i| problem.constraint(i))),
        consensus_error: consensus,
        comm_rounds: round,
        ..Default::default()
    })
}

/// Runs `R` rounds of `H` local steps on every client, averaging after each round.
pub fn run_single_level<P: ZerothOrderOracle + ?Sized>(problem: &P, cfg: &RunConfig) -> RunResult {
    let mut traj = Trajectory::new(Variant::SingleLevel, DVector::zeros(problem.dim()));
    cfg.validate(problem.num_clients()).or_fail(&traj)?;
    let params = SmoothingParams::new(cfg.eta, problem.dim()).or_fail(&traj)?;
    let mut x_hat = cfg.initial_point(problem.dim(), problem.constraint(0)).or_fail(&traj)?;
    traj.x_final = x_hat.clone();

    let mut clients: Vec<ClientState> = (0..cfg.clients)
        .map(|i| ClientState::new(cfg.seed, i, x_hat.clone()))
        .collect();
    let rec = record(problem, cfg, &params, 0, &x_hat, 0.0).or_fail(&traj)?;
    traj.log(rec, &x_hat, cfg);

    for r in 0..cfg.rounds {
        let base_k = (r * cfg.local_steps) as u64;
        for c in clients.iter_mut() {
            c.x.clone_from(&x_hat);
        }
        for_each_client(&mut clients, cfg.parallel_clients, |i, state| {
            for t in 0..cfg.local_steps {
                local_step_nn(problem, i, state, cfg, &params).map_err(|e| e.at(i, base_k + t as u64))?;
            }
            Ok(())
        })
        .or_fail(&traj)?;
        let per_step = (cfg.smoothing_draws * cfg.batch_size) as u64;
        let steps = (cfg.clients * cfg.local_steps) as u64;
        traj.counters.oracle_pairs += steps * per_step;
        traj.counters.projections += steps;

        let locals: Vec<DVector<f64>> = clients.iter().map(|c| c.x.clone()).collect();
        x_hat = aggregate(&locals).or_fail(&traj)?;
        traj.counters.aggregations += 1;
        let consensus = consensus_error(&locals, &x_hat);
        if !x_hat.iter().all(|v| v.is_finite()) {
            return Err(ZofedError::Divergence(format!("non-finite iterate after round {}", r + 1))).or_fail(&traj);
        }
        traj.x_final = x_hat.clone();
        let rec = record(problem, cfg, &params, r + 1, &x_hat, consensus).or_fail(&traj)?;
        traj.log(rec, &x_hat, cfg);
    }
    Ok(traj)
}

/// Feasibility of an approximately stationary point against the bound implied
/// by `grad f^eta(x) + (x - P_X(x)) / eta = 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeasibilityDiagnostic {
    pub infeasibility: f64,
    pub grad_norm: f64,
    pub grad_stderr: f64,
    /// `eta (||grad f^eta|| + 3 stderr)`.
    pub bound: f64,
}

impl FeasibilityDiagnostic {
    /// Soft check with tolerance factor `slack`.
    pub fn holds(&self, slack: f64) -> bool {
        self.infeasibility <= slack * self.bound
    }
}

/// Estimates `||grad f^eta(x)||` by Monte Carlo and compares `dist(x, X_1)` with it.
/// All clients must share one constraint set.
pub fn feasibility_diagnostic<P: ZerothOrderOracle + ?Sized, R: Rng + ?Sized>(
    problem: &P,
    x: &DVector<f64>,
    params: &SmoothingParams,
    num_samples: usize,
    rng: &mut R,
) -> Result<FeasibilityDiagnostic> {
    if num_samples < 2 {
        return Err(ZofedError::config("feasibility diagnostic needs at least 2 samples"));
    }
    let set = problem.constraint(0);
    if (1..problem.num_clients()).any(|i| problem.constraint(i) != set) {
        return Err(ZofedError::config("feasibility diagnostic assumes identical client sets"));
    }
    let m = problem.num_clients();
    let dim = x.len();
    let mut mean = DVector::zeros(dim);
    let mut m2 = DVector::zeros(dim);
    for s in 0..num_samples {
        let mut g = DVector::zeros(dim);
        for i in 0..m {
            let l = rng.random_range(0..problem.num_samples(i));
            let v = sample_sphere(rng, params);
            g += two_point_grad(|z| problem.eval(i, z, l), x, &v, params)?.g;
        }
        g /= m as f64;
        let d = &g - &mean;
        mean += &d / (s + 1) as f64;
        m2 += d.component_mul(&(&g - &mean));
    }
    let var = m2 / (num_samples - 1) as f64;
    let grad_stderr = (var.sum() / num_samples as f64).sqrt();
    let grad_norm = mean.norm();
    Ok(FeasibilityDiagnostic {
        infeasibility: set.dist(x),
        grad_norm,
        grad_stderr,
        bound: params.eta() * (grad_norm + 3.0 * grad_stderr),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::InitialPoint;
    use crate::problems::synthetic::{ClientObjective, ClosureObjective};
    use crate::projection::ConvexSet;
    use nalgebra::dvector;

    fn linear(c: f64) -> ClosureObjective<impl Fn(&DVector<f64>) -> f64 + Sync> {
        ClosureObjective::new(1, 1, ConvexSet::Whole, move |x: &DVector<f64>| c * x[0])
    }

    #[test]
    fn linear_one_dimensional_step_is_exact() {
        let p = linear(3.0);
        let cfg = RunConfig::new(1, 0.1, 0.5, 1, 1, 0);
        let params = SmoothingParams::new(0.5, 1).unwrap();
        let mut s = ClientState::new(0, 0, dvector![2.0]);
        local_step_nn(&p, 0, &mut s, &cfg, &params).unwrap();
        assert!((s.x[0] - (2.0 - 0.1 * 3.0)).abs() < 1e-14);
    }

    #[test]
    fn zero_step_size_is_identity() {
        let p = linear(3.0);
        let cfg = RunConfig::new(1, 0.0, 0.5, 1, 1, 0);
        let params = SmoothingParams::new(0.5, 1).unwrap();
        let mut s = ClientState::new(0, 0, dvector![2.0]);
        local_step_nn(&p, 0, &mut s, &cfg, &params).unwrap();
        assert_eq!(s.x[0], 2.0);
    }

    #[test]
    fn flat_objective_inside_set_stays_put() {
        let p = ClosureObjective::new(2, 1, ConvexSet::uniform_box(2, -1.0, 1.0).unwrap(), |_: &DVector<f64>| 4.0);
        let cfg = RunConfig::new(1, 0.3, 0.1, 1, 1, 0);
        let params = SmoothingParams::new(0.1, 2).unwrap();
        let mut s = ClientState::new(0, 0, dvector![0.2, -0.7]);
        local_step_nn(&p, 0, &mut s, &cfg, &params).unwrap();
        assert_eq!(s.x, dvector![0.2, -0.7]);
    }

    #[test]
    fn quadratic_follows_scalar_recursion() {
        let p = ClosureObjective::new(1, 1, ConvexSet::Whole, |x: &DVector<f64>| 0.5 * x[0] * x[0]);
        let cfg = RunConfig::new(1, 0.1, 0.1, 1, 50, 3).with_init(InitialPoint::Given(dvector![1.0]));
        let traj = run_single_level(&p, &cfg).unwrap();
        let mut x = 1.0f64;
        for w in traj.records.windows(2) {
            assert!(w[1].loss < w[0].loss);
        }
        for rec in &traj.records[1..] {
            x *= 0.9;
            assert!((rec.loss - 0.5 * x * x).abs() < 1e-12);
        }
    }

    #[test]
    fn parallel_and_sequential_runs_match_bitwise() {
        let p = ClientObjective::new(3, 4, 7, ConvexSet::ball(DVector::zeros(3), 1.0).unwrap(), |x: &DVector<f64>, i, l| {
            Ok(x.iter().map(|v| v.abs()).sum::<f64>() + (i + l) as f64 * x[0])
        });
        let mut cfg = RunConfig::new(4, 0.05, 0.1, 5, 20, 17);
        cfg.residual_every = 5;
        cfg.residual_samples = 20;
        let a = run_single_level(&p, &cfg).unwrap();
        cfg.parallel_clients = true;
        let b = run_single_level(&p, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.counters.aggregations, 20);
        assert_eq!(a.counters.oracle_pairs, 20 * 5 * 4);
        assert_eq!(a.counters.projections, 20 * 5 * 4);
        assert_eq!(a.records.len(), 21);
        assert!(a.records.iter().enumerate().all(|(r, rec)| rec.k == (r * 5) as u64 && rec.comm_rounds == r));
    }

    #[test]
    fn oracle_errors_carry_client_and_step() {
        let p = ClientObjective::new(1, 2, 1, ConvexSet::Whole, |x: &DVector<f64>, i, _| {
            if i == 1 && x[0] != 0.0 {
                Err(ZofedError::oracle("bad sample"))
            } else {
                Ok(0.0)
            }
        });
        let mut cfg = RunConfig::new(2, 0.1, 0.1, 3, 2, 0).with_init(InitialPoint::Given(dvector![0.0]));
        cfg.residual_every = 0;
        let fail = run_single_level(&p, &cfg).unwrap_err();
        assert_eq!(
            fail.error,
            ZofedError::Oracle {
                client: Some(1),
                step: Some(0),
                message: "bad sample".into()
            }
        );
        assert_eq!(fail.partial.records.len(), 1);
    }
}
