//! Spherical smoothing: sphere and ball sampling, the two-point zeroth-order
//! estimator, Moreau-envelope gradients of indicator functions, and Monte-Carlo
//! reference oracles for the smoothed value and the stationarity residual.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, ZofedError};
use crate::problems::ZerothOrderOracle;
use crate::projection::Projector;

/// Smoothing radius and ambient dimension.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SmoothingParams {
    eta: f64,
    dim: usize,
}

impl SmoothingParams {
    pub fn new(eta: f64, dim: usize) -> Result<Self> {
        if !(eta > 0.0) || !eta.is_finite() {
            return Err(ZofedError::config(format!("smoothing radius eta must be > 0, got {eta}")));
        }
        if dim == 0 {
            return Err(ZofedError::config("dimension must be >= 1"));
        }
        Ok(Self { eta, dim })
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// The estimator scale `n / (2 eta^2)`.
    pub fn estimator_scale(&self) -> f64 {
        self.dim as f64 / (2.0 * self.eta * self.eta)
    }
}

/// A draw from the radius-`eta` sphere.
#[derive(Clone, Debug, PartialEq)]
pub struct SphereSample(DVector<f64>);

impl SphereSample {
    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.0
    }
}

/// One evaluation of the two-point estimator with its raw ingredients.
#[derive(Clone, Debug, PartialEq)]
pub struct ZerothOrderGrad {
    pub g: DVector<f64>,
    pub v_used: SphereSample,
    pub f_plus: f64,
    pub f_minus: f64,
}

/// Uniform draw on the sphere of radius `eta`: a standard Gaussian vector
/// rescaled to norm `eta`.
pub fn sample_sphere<R: Rng + ?Sized>(rng: &mut R, params: &SmoothingParams) -> SphereSample {
    loop {
        let g = DVector::from_fn(params.dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = g.norm();
        if norm > 0.0 && norm.is_finite() {
            return SphereSample(g.unscale(norm) * params.eta);
        }
    }
}

/// Uniform draw in the ball of radius `eta`.
pub fn sample_ball<R: Rng + ?Sized>(rng: &mut R, params: &SmoothingParams) -> DVector<f64> {
    let dir = sample_sphere(rng, &SmoothingParams { eta: 1.0, dim: params.dim }).0;
    let u: f64 = rng.random();
    dir * (params.eta * u.powf(1.0 / params.dim as f64))
}

/// `g = n/(2 eta^2) (f(x+v) - f(x-v)) v`.
pub fn two_point_grad<F>(
    mut f_eval: F,
    x: &DVector<f64>,
    v: &SphereSample,
    params: &SmoothingParams,
) -> Result<ZerothOrderGrad>
where
    F: FnMut(&DVector<f64>) -> Result<f64>,
{
    if x.len() != params.dim || v.0.len() != params.dim {
        return Err(ZofedError::Dimension {
            expected: params.dim,
            got: if x.len() != params.dim { x.len() } else { v.0.len() },
        });
    }
    let f_plus = f_eval(&(x + &v.0))?;
    let f_minus = f_eval(&(x - &v.0))?;
    let g = &v.0 * (params.estimator_scale() * (f_plus - f_minus));
    Ok(ZerothOrderGrad {
        g,
        v_used: v.clone(),
        f_plus,
        f_minus,
    })
}

/// Gradient of the Moreau envelope of an indicator: `(x - P(x)) / eta`.
pub fn moreau_grad<P: Projector + ?Sized>(x: &DVector<f64>, project: &P, eta: f64) -> DVector<f64> {
    (x - project.project(x)) / eta
}

/// Welford running mean and variance; exact for constant sequences.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct Welford {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    pub(crate) fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub(crate) fn mean(&self) -> f64 {
        self.mean
    }

    pub(crate) fn stderr(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        (self.m2 / (self.n - 1) as f64).max(0.0).sqrt() / (self.n as f64).sqrt()
    }
}

/// Monte-Carlo estimate of the smoothed value `E_u[f(x + eta u)]`, `u` uniform in the unit ball.
/// Returns `(mean, standard error)`.
pub fn smoothed_value_mc<F, R>(
    mut f_eval: F,
    x: &DVector<f64>,
    params: &SmoothingParams,
    num_samples: usize,
    rng: &mut R,
) -> Result<(f64, f64)>
where
    F: FnMut(&DVector<f64>) -> Result<f64>,
    R: Rng + ?Sized,
{
    if num_samples < 2 {
        return Err(ZofedError::config("smoothed_value_mc needs at least 2 samples"));
    }
    let mut acc = Welford::default();
    for _ in 0..num_samples {
        let u = sample_ball(rng, params);
        acc.push(f_eval(&(x + u))?);
    }
    Ok((acc.mean(), acc.stderr()))
}

/// Monte-Carlo estimate of `||grad f^eta(x)||^2` for the Moreau-penalized
/// federated objective: per client, the mean of `num_samples` two-point
/// estimates (random sample index, random sphere draw) plus the Moreau
/// gradient of its constraint; averaged over clients and squared.
pub fn stationarity_residual<P, R>(
    problem: &P,
    x: &DVector<f64>,
    params: &SmoothingParams,
    num_samples: usize,
    rng: &mut R,
) -> Result<f64>
where
    P: ZerothOrderOracle + ?Sized,
    R: Rng + ?Sized,
{
    if num_samples == 0 {
        return Err(ZofedError::config("stationarity_residual needs at least 1 sample"));
    }
    let m = problem.num_clients();
    let mut total = DVector::zeros(x.len());
    for client in 0..m {
        let mut sum = DVector::zeros(x.len());
        let count = problem.num_samples(client);
        for _ in 0..num_samples {
            let sample = rng.random_range(0..count);
            let v = sample_sphere(rng, params);
            let est = two_point_grad(|z| problem.eval(client, z, sample), x, &v, params)?;
            sum += est.g;
        }
        total += sum / num_samples as f64 + moreau_grad(x, problem.constraint(client), params.eta);
    }
    Ok((total / m as f64).norm_squared())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::synthetic::ClosureObjective;
    use crate::projection::ConvexSet;
    use crate::rng::{stream_rng, Stream};
    use nalgebra::dvector;

    fn rng() -> crate::rng::StreamRng {
        stream_rng(11, Stream::Metrics(0))
    }

    #[test]
    fn rejects_degenerate_params() {
        assert!(SmoothingParams::new(0.0, 3).is_err());
        assert!(SmoothingParams::new(-1.0, 3).is_err());
        assert!(SmoothingParams::new(0.1, 0).is_err());
    }

    #[test]
    fn one_dimensional_sphere_has_two_points() {
        let p = SmoothingParams::new(0.5, 1).unwrap();
        let mut r = rng();
        let mut plus = 0;
        let n = 20_000;
        for _ in 0..n {
            let v = sample_sphere(&mut r, &p).0[0];
            assert!(v == 0.5 || v == -0.5);
            if v > 0.0 {
                plus += 1;
            }
        }
        let frac = plus as f64 / n as f64;
        // 4 sigma for a fair coin at n = 2e4.
        assert!((frac - 0.5).abs() < 4.0 * 0.5 / (n as f64).sqrt());
    }

    #[test]
    fn sphere_norm_law() {
        let mut r = rng();
        for (eta, dim) in [(0.01, 3), (1.0, 10), (1e-3, 50), (7.0, 1)] {
            let p = SmoothingParams::new(eta, dim).unwrap();
            for _ in 0..1000 {
                let v = sample_sphere(&mut r, &p);
                assert!((v.0.norm() - eta).abs() <= 1e-12 * eta);
            }
        }
    }

    #[test]
    fn sphere_mean_is_centered() {
        let p = SmoothingParams::new(1.0, 2).unwrap();
        let mut r = rng();
        let n = 1_000_000;
        let mut sum = DVector::zeros(2);
        for _ in 0..n {
            sum += sample_sphere(&mut r, &p).0;
        }
        let mean = sum / n as f64;
        // Each coordinate has variance 1/2: 3 sigma = 3 / (sqrt(2) * 1e3) ~ 0.0021.
        assert!(mean.iter().all(|c| c.abs() < 0.005), "{mean}");
    }

    #[test]
    fn ball_is_uniform_in_one_dimension() {
        let p = SmoothingParams::new(1.0, 1).unwrap();
        let mut r = rng();
        let n = 100_000;
        let mut draws: Vec<f64> = (0..n).map(|_| sample_ball(&mut r, &p)[0]).collect();
        draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let ks = draws
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let cdf = (x + 1.0) / 2.0;
                let lo = i as f64 / n as f64;
                let hi = (i + 1) as f64 / n as f64;
                (cdf - lo).abs().max((hi - cdf).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 0.01, "KS statistic {ks}");
    }

    #[test]
    fn ball_second_moment() {
        let p = SmoothingParams::new(1.0, 2).unwrap();
        let mut r = rng();
        let n = 100_000;
        let mut m2 = 0.0;
        for _ in 0..n {
            let u = sample_ball(&mut r, &p);
            assert!(u.norm() <= 1.0);
            m2 += u.norm_squared();
        }
        assert!((m2 / n as f64 - 0.5).abs() < 0.01);
    }

    #[test]
    fn estimator_examples() {
        let p = SmoothingParams::new(0.2, 1).unwrap();
        let v = SphereSample(dvector![0.2]);
        let g = two_point_grad(|z| Ok(3.0 * z[0]), &dvector![1.7], &v, &p).unwrap();
        assert!((g.g[0] - 3.0).abs() < 1e-12);

        let p3 = SmoothingParams::new(0.3, 3).unwrap();
        let v3 = sample_sphere(&mut rng(), &p3);
        let c = two_point_grad(|_| Ok(4.2), &dvector![1.0, 2.0, 3.0], &v3, &p3).unwrap();
        assert!(c.g.iter().all(|&e| e == 0.0));
        assert_eq!(c.f_plus, 4.2);
    }

    #[test]
    fn estimator_propagates_oracle_failure() {
        let p = SmoothingParams::new(0.2, 1).unwrap();
        let v = SphereSample(dvector![0.2]);
        let err = two_point_grad(|_| Err(ZofedError::oracle("boom")), &dvector![0.0], &v, &p);
        assert!(matches!(err, Err(ZofedError::Oracle { .. })));
    }

    #[test]
    fn estimator_is_collinear_with_direction() {
        let p = SmoothingParams::new(0.1, 4).unwrap();
        let mut r = rng();
        for _ in 0..100 {
            let v = sample_sphere(&mut r, &p);
            let x = dvector![0.3, -1.0, 2.0, 0.5];
            let g = two_point_grad(|z| Ok(z.iter().map(|c| c.abs()).sum()), &x, &v, &p).unwrap();
            let cos = g.g.dot(&v.0) / (g.g.norm() * v.0.norm());
            if g.g.norm() > 0.0 {
                assert!((cos.abs() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn moreau_examples() {
        let inside = moreau_grad(&dvector![0.5, 0.5], &ConvexSet::uniform_box(2, 0.0, 1.0).unwrap(), 0.3);
        assert_eq!(inside, dvector![0.0, 0.0]);
        assert_eq!(moreau_grad(&dvector![-1.0], &ConvexSet::Nonneg, 0.5), dvector![-2.0]);
        let ball = ConvexSet::ball(dvector![0.0, 0.0], 1.0).unwrap();
        let g = moreau_grad(&dvector![3.0, 4.0], &ball, 1.0);
        assert!((g - dvector![2.4, 3.2]).norm() < 1e-12);
    }

    #[test]
    fn moreau_matches_finite_differences() {
        let mut r = rng();
        let eta = 0.7;
        let sets = [
            ConvexSet::boxed(dvector![-1.0, 0.0, 2.0], dvector![1.0, 0.5, 3.0]).unwrap(),
            ConvexSet::ball(dvector![0.5, -0.5, 1.0], 1.5).unwrap(),
        ];
        let h = 1e-6;
        for set in &sets {
            for i in 0..100 {
                let p = SmoothingParams::new(1.0, 3).unwrap();
                let dir = sample_sphere(&mut r, &p).0;
                // Alternate between generic points and points on a thin shell around the set.
                let base = set.project(&(dir.clone() * 3.0));
                let x = if i % 2 == 0 { dir * 4.0 } else { base + sample_sphere(&mut r, &p).0 * 1e-3 };
                let d = |z: &DVector<f64>| set.dist(z).powi(2) / (2.0 * eta);
                let analytic = moreau_grad(&x, set, eta);
                for j in 0..3 {
                    let mut e = DVector::zeros(3);
                    e[j] = h;
                    let fd = (d(&(&x + &e)) - d(&(&x - &e))) / (2.0 * h);
                    assert!((fd - analytic[j]).abs() < 1e-4, "{fd} vs {}", analytic[j]);
                }
            }
        }
    }

    #[test]
    fn smoothed_value_examples() {
        let p = SmoothingParams::new(1.0, 2).unwrap();
        let (mean, se) = smoothed_value_mc(|_| Ok(0.1), &dvector![1.0, 1.0], &p, 1000, &mut rng()).unwrap();
        assert_eq!(mean, 0.1);
        assert_eq!(se, 0.0);
        let (mean, se) = smoothed_value_mc(|z| Ok(z.norm_squared()), &dvector![0.0, 0.0], &p, 100_000, &mut rng()).unwrap();
        assert!((mean - 0.5).abs() <= 3.0 * se, "{mean} +- {se}");
        assert!(smoothed_value_mc(|_| Ok(0.0), &dvector![0.0], &SmoothingParams::new(1.0, 1).unwrap(), 1, &mut rng()).is_err());
    }

    #[test]
    fn residual_examples() {
        let quad = ClosureObjective::new(2, 1, ConvexSet::Whole, |z: &DVector<f64>| 0.5 * z.norm_squared());
        let p = SmoothingParams::new(0.1, 2).unwrap();
        let at_zero = stationarity_residual(&quad, &dvector![0.0, 0.0], &p, 100_000, &mut rng()).unwrap();
        assert!((0.0..=1e-2).contains(&at_zero));
        let at_e1 = stationarity_residual(&quad, &dvector![1.0, 0.0], &p, 100_000, &mut rng()).unwrap();
        assert!((at_e1 - 1.0).abs() < 0.05, "{at_e1}");
    }
}
