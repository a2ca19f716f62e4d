//! Bilevel toy problem with a nonconvex implicit objective:
//! upper `1/2 ||x + 1 - y||^2`, lower `y(x) = argmin_{y >= 0} 1/2 ||y - x||^2`.

use nalgebra::DVector;
use rand::RngCore;

use super::{BilevelProblem, LowerLevelOracle, LowerLevelSpec};
use crate::error::{Result, ZofedError};
use crate::projection::{project_nonneg, ConvexSet};

/// Closed-form implicit value `sum_i g_i(x_i)`.
pub fn toy_bilevel_implicit(x: &DVector<f64>) -> f64 {
    x.iter().map(|&t| if t >= 0.0 { 0.5 } else { 0.5 * (t + 1.0).powi(2) }).sum()
}

/// `1/2 ||x + 1 - y||^2`.
pub fn toy_upper(x: &DVector<f64>, y: &DVector<f64>) -> f64 {
    x.iter().zip(y.iter()).map(|(a, b)| 0.5 * (a + 1.0 - b).powi(2)).sum()
}

/// Federated copy of the toy problem: every client holds the same upper and
/// lower objectives and `X = [-a, a]^n`.
pub struct ToyBilevel {
    dim: usize,
    clients: usize,
    set: ConvexSet,
    spec: LowerLevelSpec,
}

impl ToyBilevel {
    pub fn new(dim: usize, clients: usize, half_width: f64) -> Result<Self> {
        if dim == 0 || clients == 0 {
            return Err(ZofedError::config("toy problem needs dim >= 1 and clients >= 1"));
        }
        Ok(Self {
            dim,
            clients,
            set: ConvexSet::uniform_box(dim, -half_width, half_width)?,
            spec: LowerLevelSpec {
                dim,
                mu_h: 1.0,
                l_h: 1.0,
                projector: Some(ConvexSet::Nonneg),
            },
        })
    }

    pub fn half_width(&self) -> f64 {
        match &self.set {
            ConvexSet::Box { hi, .. } => hi[0],
            _ => unreachable!(),
        }
    }
}

impl LowerLevelOracle for ToyBilevel {
    fn lower_spec(&self) -> &LowerLevelSpec {
        &self.spec
    }
    fn lower_clients(&self) -> usize {
        self.clients
    }
    fn lower_grad(&self, _client: usize, x: &DVector<f64>, y: &DVector<f64>, _rng: &mut dyn RngCore) -> Result<DVector<f64>> {
        Ok(y - x)
    }
}

impl BilevelProblem for ToyBilevel {
    fn dim(&self) -> usize {
        self.dim
    }
    fn num_clients(&self) -> usize {
        self.clients
    }
    fn num_samples(&self, _client: usize) -> usize {
        1
    }
    fn constraint(&self, _client: usize) -> &ConvexSet {
        &self.set
    }
    fn upper_eval(&self, _client: usize, x: &DVector<f64>, y: &DVector<f64>, _sample: usize) -> Result<f64> {
        Ok(toy_upper(x, y))
    }
    fn exact_lower(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        Some(project_nonneg(x))
    }
    /// `||x + 1 - y||` over `x in [-a, a]^n` and `y` near `P_+(x)`.
    fn upper_lipschitz_y(&self) -> Option<f64> {
        Some((self.dim as f64).sqrt() * (1.0 + 3.0 * self.half_width()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use rand::Rng;

    #[test]
    fn implicit_examples() {
        for n in [1, 2, 7] {
            assert_eq!(toy_bilevel_implicit(&DVector::from_element(n, 1.0)), n as f64 / 2.0);
            assert_eq!(toy_bilevel_implicit(&DVector::from_element(n, -1.0)), 0.0);
        }
    }

    #[test]
    fn implicit_is_not_convex() {
        let one = DVector::from_element(2, 1.0);
        let mid = (&one + (-&one)) * 0.5;
        let f_mid = toy_bilevel_implicit(&mid);
        let avg = 0.5 * toy_bilevel_implicit(&one) + 0.5 * toy_bilevel_implicit(&-one);
        assert_eq!(f_mid, 1.0);
        assert_eq!(avg, 0.5);
        assert!(f_mid > avg);
    }

    #[test]
    fn closed_form_matches_projected_pipeline() {
        let p = ToyBilevel::new(5, 1, 3.0).unwrap();
        let mut rng = stream_rng(9, Stream::Init);
        for _ in 0..10_000 {
            let x = DVector::from_fn(5, |_, _| rng.random_range(-3.0..3.0));
            let y = p.exact_lower(&x).unwrap();
            let piped = p.upper_eval(0, &x, &y, 0).unwrap();
            assert!((piped - toy_bilevel_implicit(&x)).abs() <= 1e-14);
        }
    }
}
