//! Built-in oracle suites run by `zofed verify`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use zofed_core::engine::bilevel::{local_sgd_lower, lower_plan, run_bilevel, LowerConfig};
use zofed_core::engine::twostage::{admissible_tau, contraction_factor, vi_projection_solve_observed, ViBudget};
use zofed_core::engine::{InitialPoint, RunConfig};
use zofed_core::problems::cournot::{cournot_closed_form, cournot_map, CournotConfig, CournotGame};
use zofed_core::problems::synthetic::QuadraticBilevel;
use zofed_core::problems::toy::{toy_bilevel_implicit, toy_upper, ToyBilevel};
use zofed_core::smoothing::{moreau_grad, sample_ball, sample_sphere, two_point_grad};
use zofed_core::{stream_rng, BilevelProblem, LowerLevelOracle, ConvexSet, Sign, SmoothingParams, Stream, StreamRng, TwoStageProblem};

use crate::error::HarnessError;

pub const SUITES: [&str; 7] = ["ball", "unbiasedness", "moreau", "contraction", "cournot", "local_sgd", "toy"];

/// One named check with its measured value and tolerance.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn at_most(suite: &'static str, name: impl Into<String>, measured: f64, tolerance: f64, detail: impl Into<String>) -> Self {
        Self {
            suite,
            name: name.into(),
            measured,
            tolerance,
            passed: measured <= tolerance,
            detail: detail.into(),
        }
    }
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "[{}] {}/{}: measured {:.6e} vs tolerance {:.6e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.suite,
            self.name,
            self.measured,
            self.tolerance
        )?;
        if !self.detail.is_empty() {
            write!(f, " ({})", self.detail)?;
        }
        Ok(())
    }
}

/// Knobs of a verify invocation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Multiplier applied to the VI step `alpha`; anything far from 1 is a negative control.
    pub alpha_factor: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { seed: 0, alpha_factor: 1.0 }
    }
}

fn rng(opts: &VerifyOptions, tag: usize) -> StreamRng {
    stream_rng(opts.seed, Stream::Metrics(tag))
}

pub fn run_suite(name: &str, opts: &VerifyOptions) -> Result<Vec<Check>, HarnessError> {
    match name {
        "all" => {
            let mut out = Vec::new();
            for s in SUITES {
                out.extend(run_suite(s, opts)?);
            }
            Ok(out)
        }
        "ball" => ball(opts),
        "unbiasedness" => unbiasedness(opts),
        "moreau" => moreau(opts),
        "contraction" => contraction(opts),
        "cournot" => cournot(opts),
        "local_sgd" => local_sgd(opts),
        "toy" => toy(opts),
        other => Err(HarnessError::Config(format!(
            "unknown verify suite `{other}`; expected one of all, {}",
            SUITES.join(", ")
        ))),
    }
}

/// Second moments of the uniform ball: `E[u u^T] = I / (n + 2)`.
fn ball(opts: &VerifyOptions) -> Result<Vec<Check>, HarnessError> {
    let mut out = Vec::new();
    let draws = 100_000;
    for (tag, n) in [1usize, 3, 10].into_iter().enumerate() {
        let params = SmoothingParams::new(1.0, n)?;
        let mut r = rng(opts, tag);
        let mut sum = DMatrix::<f64>::zeros(n, n);
        let mut sq = DMatrix::<f64>::zeros(n, n);
        for _ in 0..draws {
            let u = sample_ball(&mut r, &params);
            let outer = &u * u.transpose();
            sq += outer.component_mul(&outer);
            sum += outer;
        }
        let mean = &sum / draws as f64;
        let var = (&sq / draws as f64) - mean.component_mul(&mean);
        let target = 1.0 / (n as f64 + 2.0);
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let expect = if i == j { target } else { 0.0 };
                let se = (var[(i, j)].max(0.0) / draws as f64).sqrt().max(1e-12);
                worst = worst.max((mean[(i, j)] - expect).abs() / se);
            }
        }
        out.push(Check::at_most("ball", format!("second_moment_n{n}"), worst, 4.5, "max |E[uu^T] - I/(n+2)| in standard errors"));
    }
    Ok(out)
}

/// Mean of two-point draws against the exact gradient of a quadratic.
fn unbiasedness(opts: &VerifyOptions) -> Result<Vec<Check>, HarnessError> {
    let mut out = Vec::new();
    let draws = 50_000;
    for (tag, (n, eta)) in [(2usize, 0.1), (5, 0.01), (10, 0.1)].into_iter().enumerate() {
        let mut r = rng(opts, 100 + tag);
        let a = DMatrix::from_fn(n, n, |_, _| r.sample::<f64, _>(StandardNormal));
        let b = DVector::from_fn(n, |_, _| r.random_range(-1.0..1.0));
        let x = DVector::from_fn(n, |_, _| r.random_range(-1.0..1.0));
        let grad = (&a + a.transpose()) * &x + &b;
        let params = SmoothingParams::new(eta, n)?;
        let f = |z: &DVector<f64>| Ok(z.dot(&(&a * z)) + b.dot(z));
        let mut sum = DVector::zeros(n);
        let mut sq = DVector::zeros(n);
        for _ in 0..draws {
            let v = sample_sphere(&mut r, &params);
            let g = two_point_grad(f, &x, &v, &params)?.g;
            sq += g.component_mul(&g);
            sum += g;
        }
        let mean = &sum / draws as f64;
        let var = (&sq / draws as f64) - mean.component_mul(&mean);
        let sigma = (var.map(|v| v.max(0.0)).sum() / draws as f64).sqrt();
        let err = (&mean - &grad).norm();
        out.push(Check::at_most(
            "unbiasedness",
            format!("quadratic_n{n}_eta{eta}"),
            err,
            4.0 * sigma,
            "||MC mean - grad f|| vs 4 sigma",
        ));
    }
    Ok(out)
}

/// Finite differences of `dist(x, X)^2 / (2 eta)` against `(x - P(x)) / eta`.
fn moreau(opts: &VerifyOptions) -> Result<Vec<Check>, HarnessError> {
    let n = 3;
    let eta = 0.5;
    let sets = [
        ("box", ConvexSet::uniform_box(n, -1.0, 1.0)?),
        ("ball", ConvexSet::ball(DVector::from_element(n, 0.2), 1.5)?),
    ];
    let mut out = Vec::new();
    for (tag, (label, set)) in sets.iter().enumerate() {
        let mut r = rng(opts, 200 + tag);
        let envelope = |z: &DVector<f64>| set.dist(z).powi(2) / (2.0 * eta);
        let mut worst = 0.0f64;
        for p in 0..100 {
            let x = if p % 4 == 0 {
                // Points just outside the boundary.
                let inside = DVector::from_fn(n, |_, _| r.random_range(-3.0..3.0));
                let proj = set.project(&inside);
                let dir = DVector::from_fn(n, |_, _| r.random_range(-1.0..1.0));
                proj + dir * 1e-3
            } else {
                DVector::from_fn(n, |_, _| r.random_range(-3.0..3.0))
            };
            let analytic = moreau_grad(&x, set, eta);
            let h = 1e-6;
            for j in 0..n {
                let mut e = DVector::zeros(n);
                e[j] = h;
                let fd = (envelope(&(&x + &e)) - envelope(&(&x - &e))) / (2.0 * h);
                worst = worst.max((fd - analytic[j]).abs());
            }
        }
        out.push(Check::at_most("moreau", format!("finite_difference_{label}"), worst, 1e-4, "100 points incl. boundary shell"));
    }
    Ok(out)
}

fn cournot_instance(opts: &VerifyOptions, tag: usize) -> Result<(CournotConfig, StreamRng), HarnessError> {
    let mut r = rng(opts, tag);
    let cfg = CournotConfig::sample(10, 0.5, &mut r)?;
    Ok((cfg, r))
}

/// Per-step squared-distance ratio of the projection method against `1 - 1/kappa^2`.
fn contraction(opts: &VerifyOptions) -> Result<Vec<Check>, HarnessError> {
    let (cfg, mut r) = cournot_instance(opts, 300)?;
    let game = CournotGame::sample(cfg.clone(), 1, 100, &mut r)?;
    let consts = cfg.vi_constants();
    let q = contraction_factor(&consts);
    let mut budget = ViBudget::new(admissible_tau(consts.kappa()), &consts)?;
    budget.alpha *= opts.alpha_factor;
    let mut worst_ratio = 0.0f64;
    let mut worst_final = 0.0f64;
    for l in 0..100 {
        let x = DVector::from_element(1, r.random_range(0.0..cfg.x_cap));
        let a = game.demand(0, l);
        let y_star = cournot_closed_form(&cfg, x[0], a);
        let vi = game.scenario(0, l);
        let y0 = DVector::from_fn(10, |j, _| r.random_range(0.0..cfg.y_caps[j]));
        let k = r.random_range(1..200u64);
        let mut prev: Option<f64> = None;
        let sol = vi_projection_solve_observed(vi.as_ref(), &x, &budget, k, Some(&y0), |_, y| {
            let d = (y - &y_star).norm_squared();
            if let Some(p) = prev {
                if p > 1e-24 {
                    worst_ratio = worst_ratio.max(d / p);
                }
            }
            prev = Some(d);
        })?;
        let eps = ViBudget::certified_error(&consts, sol.iters);
        worst_final = worst_final.max((&sol.y - &y_star).norm_squared() / eps);
    }
    Ok(vec![
        Check::at_most(
            "contraction",
            "per_step_factor",
            worst_ratio,
            q + 1e-12,
            format!("kappa_F = {:.4}, alpha factor {}", consts.kappa(), opts.alpha_factor),
        ),
        Check::at_most("contraction", "final_error_over_eps", worst_final, 1.0, "||y_t - y*||^2 / eps_k"),
    ])
}

/// Closed-form follower equilibrium: VI natural residual and agreement with a long projection run.
fn cournot(opts: &VerifyOptions) -> Result<Vec<Check>, HarnessError> {
    let (cfg, mut r) = cournot_instance(opts, 400)?;
    let set = cfg.follower_set();
    let mut worst_res = 0.0f64;
    for _ in 0..1000 {
        let x = r.random_range(0.0..cfg.x_cap);
        let a = r.random_range(cfg.a_low..cfg.a_high);
        let y = cournot_closed_form(&cfg, x, a);
        let nat = &y - set.project(&(&y - cournot_map(&cfg, x, &y, a)));
        worst_res = worst_res.max(nat.norm());
    }
    let game = CournotGame::sample(cfg.clone(), 1, 20, &mut r)?;
    let consts = cfg.vi_constants();
    let long = ViBudget::new(1e3, &consts)?;
    let mut worst_gap = 0.0f64;
    for l in 0..20 {
        let x = DVector::from_element(1, r.random_range(0.0..cfg.x_cap));
        let vi = game.scenario(0, l);
        let sol = vi_projection_solve_observed(vi.as_ref(), &x, &long, 1u64 << 20, None, |_, _| {})?;
        let y = cournot_closed_form(&cfg, x[0], game.demand(0, l));
        worst_gap = worst_gap.max((&sol.y - &y).norm());
    }
    Ok(vec![
        Check::at_most("cournot", "natural_residual", worst_res, 1e-10, "||y - P_Y(y - G(y))|| over 1000 (x, a)"),
        Check::at_most("cournot", "projection_agreement", worst_gap, 1e-8, "closed form vs long projection run"),
    ])
}

/// Log-log slope of the lower-level mean-squared error against the iteration count.
fn local_sgd(opts: &VerifyOptions) -> Result<Vec<Check>, HarnessError> {
    let (slope, detail) = local_sgd_slope(opts.seed, 30)?;
    Ok(vec![Check {
        suite: "local_sgd",
        name: "mse_slope".into(),
        measured: slope,
        tolerance: 0.3,
        passed: (slope + 1.0).abs() <= 0.3,
        detail: format!("expected -1 +- 0.3; {detail}"),
    }])
}

/// Mean-squared lower-level error at rounds giving `T` near `1e2`, `1e3`, `1e4`
/// and the least-squares slope in log-log space.
pub fn local_sgd_slope(seed: u64, reruns: usize) -> Result<(f64, String), HarnessError> {
    let mut r = stream_rng(seed, Stream::Metrics(500));
    let maps: Vec<DMatrix<f64>> = (0..2).map(|_| DMatrix::from_fn(3, 2, |_, _| r.random_range(-1.0..1.0))).collect();
    let problem = QuadraticBilevel::new(maps, DVector::zeros(3), 1.0)?;
    let x = DVector::from_fn(2, |_, _| r.random_range(-1.0..1.0));
    let y_star = problem.exact_lower(&x).expect("closed form");
    let cfg = LowerConfig {
        warm_start: false,
        ..Default::default()
    };
    let mut pts = Vec::new();
    let mut detail = Vec::new();
    for round in [17usize, 106, 754] {
        let total = lower_plan(problem.lower_spec(), 2, round, 2, &cfg)?.total;
        let mut mse = 0.0;
        for rep in 0..reruns {
            let sol = local_sgd_lower(&problem, &x, round, 2, &cfg, None, seed.wrapping_add(rep as u64), Sign::Eval, false)?;
            mse += (&sol.y - &y_star).norm_squared();
        }
        mse /= reruns as f64;
        pts.push(((total as f64).ln(), mse.ln()));
        detail.push(format!("T={total}: {mse:.3e}"));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Ok((sxy / sxx, detail.join(", ")))
}

/// Toy bilevel: closed-form pipeline and loss tracking of the bilevel engine.
fn toy(opts: &VerifyOptions) -> Result<Vec<Check>, HarnessError> {
    let problem = ToyBilevel::new(2, 1, 1.0)?;
    let mut r = rng(opts, 600);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let x = DVector::from_fn(2, |_, _| r.random_range(-2.0..2.0));
        let y = problem.exact_lower(&x).expect("closed form");
        worst = worst.max((toy_upper(&x, &y) - toy_bilevel_implicit(&x)).abs());
    }
    let mut cfg = RunConfig::new(1, 0.05, 0.05, 5, 100, opts.seed).with_init(InitialPoint::Given(DVector::from_vec(vec![-0.25, -0.5])));
    cfg.residual_every = 0;
    cfg.record_iterates = true;
    let traj = run_bilevel(&problem, &cfg, &LowerConfig::default()).map_err(|f| HarnessError::Engine(f.error.to_string()))?;
    let lip = problem.upper_lipschitz_y().expect("known constant");
    let mut worst_track = 0.0f64;
    for (rec, x) in traj.records.iter().zip(&traj.iterates) {
        let bound = 2.0 * lip * rec.eps.unwrap_or(0.0).sqrt();
        worst_track = worst_track.max((rec.loss - toy_bilevel_implicit(x)).abs() / bound);
    }
    Ok(vec![
        Check::at_most("toy", "pipeline_agreement", worst, 1e-14, "upper(x, P_+(x)) vs closed form"),
        Check::at_most("toy", "loss_tracking", worst_track, 1.0, "|loss - implicit| / (2 L sqrt(eps_r))"),
    ])
}
