//! Euclidean projections onto simple convex sets.

use nalgebra::DVector;

use crate::error::{Result, ZofedError};

/// Anything that maps a point to its Euclidean projection.
pub trait Projector {
    fn project(&self, x: &DVector<f64>) -> DVector<f64>;
}

impl<F> Projector for F
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        self(x)
    }
}

/// Closed convex sets with an exact projector.
#[derive(Clone, Debug, PartialEq)]
pub enum ConvexSet {
    /// The whole space; projection is the identity.
    Whole,
    /// `{ z : lo <= z <= hi }` componentwise. Bounds may be infinite.
    Box { lo: DVector<f64>, hi: DVector<f64> },
    /// The nonnegative orthant.
    Nonneg,
    /// `{ z : ||z - center|| <= radius }`.
    Ball { center: DVector<f64>, radius: f64 },
    /// `{ z : a^T z <= b }`.
    Halfspace { a: DVector<f64>, b: f64 },
}

impl ConvexSet {
    pub fn boxed(lo: DVector<f64>, hi: DVector<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(ZofedError::config(format!(
                "box bounds have lengths {} and {}",
                lo.len(),
                hi.len()
            )));
        }
        if lo.iter().zip(hi.iter()).any(|(l, h)| l.is_nan() || h.is_nan() || l > h) {
            return Err(ZofedError::config("box requires lo <= hi componentwise"));
        }
        Ok(Self::Box { lo, hi })
    }

    /// The box `[lo, hi]^n`.
    pub fn uniform_box(n: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::boxed(DVector::from_element(n, lo), DVector::from_element(n, hi))
    }

    pub fn ball(center: DVector<f64>, radius: f64) -> Result<Self> {
        if !(radius >= 0.0) || !radius.is_finite() {
            return Err(ZofedError::config(format!("ball radius must be finite and >= 0, got {radius}")));
        }
        Ok(Self::Ball { center, radius })
    }

    pub fn halfspace(a: DVector<f64>, b: f64) -> Result<Self> {
        if a.iter().all(|&v| v == 0.0) || a.iter().any(|v| !v.is_finite()) || !b.is_finite() {
            return Err(ZofedError::config("halfspace requires a finite nonzero normal"));
        }
        Ok(Self::Halfspace { a, b })
    }

    /// Checks that the set's own dimension (if it has one) matches `n`.
    pub fn check_dim(&self, n: usize) -> Result<()> {
        let got = match self {
            ConvexSet::Whole | ConvexSet::Nonneg => return Ok(()),
            ConvexSet::Box { lo, .. } => lo.len(),
            ConvexSet::Ball { center, .. } => center.len(),
            ConvexSet::Halfspace { a, .. } => a.len(),
        };
        if got == n {
            Ok(())
        } else {
            Err(ZofedError::Dimension { expected: n, got })
        }
    }

    pub fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            ConvexSet::Whole => x.clone(),
            ConvexSet::Box { lo, hi } => x.zip_zip_map(lo, hi, |v, l, h| v.max(l).min(h)),
            ConvexSet::Nonneg => x.map(|v| v.max(0.0)),
            ConvexSet::Ball { center, radius } => {
                let d = x - center;
                let norm = d.norm();
                if norm <= *radius {
                    x.clone()
                } else {
                    center + d * (*radius / norm)
                }
            }
            ConvexSet::Halfspace { a, b } => {
                let excess = a.dot(x) - b;
                if excess <= 0.0 {
                    x.clone()
                } else {
                    x - a * (excess / a.norm_squared())
                }
            }
        }
    }

    pub fn dist(&self, x: &DVector<f64>) -> f64 {
        (x - self.project(x)).norm()
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        self.dist(x) <= tol
    }

    /// Componentwise midpoint for bounded boxes, `None` otherwise.
    pub fn box_midpoint(&self) -> Option<DVector<f64>> {
        match self {
            ConvexSet::Box { lo, hi } if lo.iter().chain(hi.iter()).all(|v| v.is_finite()) => {
                Some((lo + hi) * 0.5)
            }
            _ => None,
        }
    }

    /// Squared diameter for bounded boxes and balls.
    pub fn squared_diameter(&self) -> Option<f64> {
        match self {
            ConvexSet::Box { lo, hi } if lo.iter().chain(hi.iter()).all(|v| v.is_finite()) => {
                Some((hi - lo).norm_squared())
            }
            ConvexSet::Ball { radius, .. } => Some(4.0 * radius * radius),
            _ => None,
        }
    }
}

impl Projector for ConvexSet {
    fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        ConvexSet::project(self, x)
    }
}

pub fn project_box(x: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> Result<DVector<f64>> {
    let set = ConvexSet::boxed(lo.clone(), hi.clone())?;
    set.check_dim(x.len())?;
    Ok(set.project(x))
}

pub fn project_nonneg(x: &DVector<f64>) -> DVector<f64> {
    ConvexSet::Nonneg.project(x)
}

pub fn project_ball(x: &DVector<f64>, center: &DVector<f64>, radius: f64) -> Result<DVector<f64>> {
    let set = ConvexSet::ball(center.clone(), radius)?;
    set.check_dim(x.len())?;
    Ok(set.project(x))
}

pub fn project_halfspace(x: &DVector<f64>, a: &DVector<f64>, b: f64) -> Result<DVector<f64>> {
    let set = ConvexSet::halfspace(a.clone(), b)?;
    set.check_dim(x.len())?;
    Ok(set.project(x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;
    use proptest::prelude::*;

    #[test]
    fn named_examples() {
        let p = project_box(&dvector![-1.0, 5.0], &dvector![0.0, 0.0], &dvector![2.0, 2.0]).unwrap();
        assert_eq!(p, dvector![0.0, 2.0]);
        assert_eq!(project_nonneg(&dvector![-3.0, 1.0]), dvector![0.0, 1.0]);
        let h = project_halfspace(&dvector![2.0, 1.0], &dvector![1.0, 0.0], 0.0).unwrap();
        assert_eq!(h, dvector![0.0, 1.0]);
        let b = project_ball(&dvector![3.0, 4.0], &dvector![0.0, 0.0], 1.0).unwrap();
        assert!((b - dvector![0.6, 0.8]).norm() < 1e-15);
    }

    #[test]
    fn invalid_sets_are_rejected() {
        assert!(project_box(&dvector![0.0], &dvector![1.0], &dvector![0.0]).is_err());
        assert!(project_halfspace(&dvector![0.0, 0.0], &dvector![0.0, 0.0], 1.0).is_err());
        assert!(ConvexSet::ball(dvector![0.0], -1.0).is_err());
        assert!(project_box(&dvector![0.0, 1.0], &dvector![0.0], &dvector![1.0]).is_err());
    }

    fn sets(n: usize) -> Vec<ConvexSet> {
        vec![
            ConvexSet::uniform_box(n, -0.5, 1.5).unwrap(),
            ConvexSet::Nonneg,
            ConvexSet::ball(DVector::from_element(n, 0.3), 1.2).unwrap(),
            ConvexSet::halfspace(DVector::from_fn(n, |i, _| 1.0 + i as f64), 0.7).unwrap(),
            ConvexSet::Whole,
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        // Optimality of the projection: P(x) is no farther than any feasible y and
        // satisfies the obtuse-angle condition.
        #[test]
        fn projection_is_optimal(
            x in proptest::collection::vec(-5.0f64..5.0, 3),
            y in proptest::collection::vec(-5.0f64..5.0, 3),
        ) {
            let x = DVector::from_vec(x);
            for set in sets(3) {
                let y = set.project(&DVector::from_vec(y.clone()));
                let p = set.project(&x);
                prop_assert!((&p - &x).norm() <= (&y - &x).norm() + 1e-12);
                prop_assert!((&x - &p).dot(&(&y - &p)) <= 1e-10);
            }
        }
    }
}
