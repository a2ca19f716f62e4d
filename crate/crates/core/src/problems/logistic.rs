//! Federated hyperparameter learning for l2-regularized logistic regression.
//!
//! The upper variable `x` holds one regularization weight per client and is
//! constrained to `x >= mu_lo 1`. The lower level fits `y` on training rows;
//! the upper level scores `y` on validation rows.

use nalgebra::DVector;
use rand::{Rng, RngCore};

use super::dataset::LocalDataset;
use super::{BilevelProblem, LowerLevelOracle, LowerLevelSpec};
use crate::error::{Result, ZofedError};
use crate::projection::ConvexSet;

/// `ln(1 + e^t)` without overflow.
pub fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// `e^t / (1 + e^t)` without overflow.
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn margin(y: &DVector<f64>, u: &[f64], v: f64) -> f64 {
    v * y.iter().zip(u).map(|(a, b)| a * b).sum::<f64>()
}

/// `ln(1 + exp(-v U^T y))`.
pub fn logistic_upper(y: &DVector<f64>, u: &[f64], v: f64) -> f64 {
    softplus(-margin(y, u, v))
}

/// Gradient in `y` of `ln(1 + exp(-v U^T y)) + reg ||y||^2 / 2`.
pub fn logistic_lower_grad(reg: f64, y: &DVector<f64>, u: &[f64], v: f64) -> DVector<f64> {
    let s = sigmoid(-margin(y, u, v));
    DVector::from_fn(y.len(), |j, _| -v * u[j] * s + reg * y[j])
}

pub struct LogisticHyper {
    train: Vec<LocalDataset>,
    validation: Vec<LocalDataset>,
    test: Option<LocalDataset>,
    set: ConvexSet,
    spec: LowerLevelSpec,
    max_row_norm: f64,
    reg_range: (f64, f64),
}

impl LogisticHyper {
    /// Regularization weights live in `X = [reg_floor, reg_ceiling]^m`. The
    /// lower level clamps its weight into that box, so points probed outside
    /// `X` keep the declared `mu_h` and `L_h`.
    pub fn new(
        train: Vec<LocalDataset>,
        validation: Vec<LocalDataset>,
        test: Option<LocalDataset>,
        reg_floor: f64,
        reg_ceiling: f64,
    ) -> Result<Self> {
        let m = train.len();
        if m == 0 || validation.len() != m {
            return Err(ZofedError::config("train and validation sets must exist for every client"));
        }
        if !(reg_floor > 0.0) || reg_ceiling < reg_floor {
            return Err(ZofedError::config("need 0 < reg_floor <= reg_ceiling"));
        }
        let features = train[0].n_features();
        let all = train.iter().chain(validation.iter()).chain(test.iter());
        if all.clone().any(|d| d.n_features() != features) {
            return Err(ZofedError::config("all splits must share the feature dimension"));
        }
        let max_row_norm = all
            .flat_map(|d| (0..d.len()).map(move |i| d.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()))
            .fold(0.0, f64::max);
        Ok(Self {
            set: ConvexSet::uniform_box(m, reg_floor, reg_ceiling)?,
            spec: LowerLevelSpec {
                dim: features,
                mu_h: reg_floor,
                l_h: 0.25 * max_row_norm * max_row_norm + reg_ceiling,
                projector: None,
            },
            train,
            validation,
            test,
            max_row_norm,
            reg_range: (reg_floor, reg_ceiling),
        })
    }
}

impl LowerLevelOracle for LogisticHyper {
    fn lower_spec(&self) -> &LowerLevelSpec {
        &self.spec
    }
    fn lower_clients(&self) -> usize {
        self.train.len()
    }
    fn lower_grad(&self, client: usize, x: &DVector<f64>, y: &DVector<f64>, rng: &mut dyn RngCore) -> Result<DVector<f64>> {
        let data = &self.train[client];
        let l = rng.random_range(0..data.len());
        let reg = x[client].clamp(self.reg_range.0, self.reg_range.1);
        Ok(logistic_lower_grad(reg, y, data.row(l), data.label(l)))
    }
}

impl BilevelProblem for LogisticHyper {
    fn dim(&self) -> usize {
        self.train.len()
    }
    fn num_clients(&self) -> usize {
        self.train.len()
    }
    fn num_samples(&self, client: usize) -> usize {
        self.validation[client].len()
    }
    fn constraint(&self, _client: usize) -> &ConvexSet {
        &self.set
    }
    fn upper_eval(&self, client: usize, _x: &DVector<f64>, y: &DVector<f64>, sample: usize) -> Result<f64> {
        let data = &self.validation[client];
        Ok(logistic_upper(y, data.row(sample), data.label(sample)))
    }
    fn upper_lipschitz_y(&self) -> Option<f64> {
        Some(self.max_row_norm)
    }
    fn test_loss(&self, _x: &DVector<f64>, y: &DVector<f64>) -> Option<f64> {
        let test = self.test.as_ref()?;
        let s: f64 = (0..test.len()).map(|i| logistic_upper(y, test.row(i), test.label(i))).sum();
        Some(s / test.len() as f64)
    }
}
