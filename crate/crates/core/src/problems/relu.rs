//! One-hidden-layer ReLU network regression with squared loss.
//!
//! Parameters are packed as `x = (vec_row(Z), w)` with `Z` of shape
//! `hidden x inputs` stored row-major.

use nalgebra::{DMatrix, DVector};

use super::dataset::LocalDataset;
use super::ZerothOrderOracle;
use crate::error::{Result, ZofedError};
use crate::projection::ConvexSet;

#[inline]
pub fn relu(t: f64) -> f64 {
    t.max(0.0)
}

/// Network shape: `hidden` neurons (N1) over `inputs` features (N0).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReluShape {
    pub hidden: usize,
    pub inputs: usize,
}

impl ReluShape {
    pub fn num_params(&self) -> usize {
        self.hidden * self.inputs + self.hidden
    }

    /// `sum_q w_q relu(Z_q . u)` on packed parameters.
    pub fn predict(&self, params: &[f64], u: &[f64]) -> f64 {
        let (z, w) = params.split_at(self.hidden * self.inputs);
        z.chunks_exact(self.inputs)
            .zip(w)
            .map(|(row, wq)| wq * relu(row.iter().zip(u).map(|(a, b)| a * b).sum()))
            .sum()
    }

    /// `1/2 (v - prediction)^2 + lambda/2 ||params||^2` on packed parameters.
    pub fn sample_loss(&self, params: &[f64], u: &[f64], v: f64, lambda: f64) -> f64 {
        let r = v - self.predict(params, u);
        let reg = if lambda != 0.0 {
            0.5 * lambda * params.iter().map(|p| p * p).sum::<f64>()
        } else {
            0.0
        };
        0.5 * r * r + reg
    }
}

/// Per-sample loss `1/2 (v - sum_q w_q relu(Z_q . U))^2 + lambda/2 (||Z||_F^2 + ||w||^2)`.
/// Callers apportion `lambda` per evaluation.
pub fn relu_nn_loss(z: &DMatrix<f64>, w: &DVector<f64>, u: &[f64], v: f64, lambda: f64) -> Result<f64> {
    if z.nrows() != w.len() || z.ncols() != u.len() {
        return Err(ZofedError::config(format!(
            "shape mismatch: Z is {}x{}, w has {}, U has {}",
            z.nrows(),
            z.ncols(),
            w.len(),
            u.len()
        )));
    }
    let pred: f64 = (0..z.nrows())
        .map(|q| w[q] * relu(z.row(q).iter().zip(u).map(|(a, b)| a * b).sum()))
        .sum();
    let reg = 0.5 * lambda * (z.norm_squared() + w.norm_squared());
    Ok(0.5 * (v - pred).powi(2) + reg)
}

/// Federated ReLU regression; client `i` evaluates
/// `1/2 (v - pred)^2 + (lambda / |S_i|)/2 ||x||^2` on one local row.
pub struct ReluRegression {
    shape: ReluShape,
    lambda: f64,
    clients: Vec<LocalDataset>,
    sets: Vec<ConvexSet>,
}

impl ReluRegression {
    pub fn new(shape: ReluShape, lambda: f64, clients: Vec<LocalDataset>, set: ConvexSet) -> Result<Self> {
        if clients.is_empty() {
            return Err(ZofedError::config("need at least one client"));
        }
        if let Some(d) = clients.iter().find(|d| d.n_features() != shape.inputs) {
            return Err(ZofedError::config(format!(
                "client data has {} features, network expects {}",
                d.n_features(),
                shape.inputs
            )));
        }
        set.check_dim(shape.num_params())?;
        let sets = vec![set; clients.len()];
        Ok(Self {
            shape,
            lambda,
            clients,
            sets,
        })
    }

    pub fn shape(&self) -> ReluShape {
        self.shape
    }

    pub fn client_data(&self, client: usize) -> &LocalDataset {
        &self.clients[client]
    }
}

impl ZerothOrderOracle for ReluRegression {
    fn dim(&self) -> usize {
        self.shape.num_params()
    }
    fn num_clients(&self) -> usize {
        self.clients.len()
    }
    fn num_samples(&self, client: usize) -> usize {
        self.clients[client].len()
    }
    fn eval(&self, client: usize, x: &DVector<f64>, sample: usize) -> Result<f64> {
        let data = &self.clients[client];
        let lambda = self.lambda / data.len() as f64;
        Ok(self
            .shape
            .sample_loss(x.as_slice(), data.row(sample), data.label(sample), lambda))
    }
    fn constraint(&self, client: usize) -> &ConvexSet {
        &self.sets[client]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;
    use nalgebra::dvector;

    #[test]
    fn loss_examples() {
        let z = DMatrix::zeros(3, 2);
        let w = DVector::zeros(3);
        assert_eq!(relu_nn_loss(&z, &w, &[0.3, 0.7], 1.0, 0.0).unwrap(), 0.5);
        assert_eq!(relu_nn_loss(&z, &w, &[0.3, 0.7], 0.0, 0.01).unwrap(), 0.0);
        let z1 = dmatrix![1.0, 0.0];
        let w1 = dvector![2.0];
        assert_eq!(relu_nn_loss(&z1, &w1, &[1.0, 0.0], 1.0, 0.0).unwrap(), 0.5);
        assert!(relu_nn_loss(&z1, &w1, &[1.0], 1.0, 0.0).is_err());
    }

    #[test]
    fn packed_and_matrix_forms_agree() {
        let shape = ReluShape { hidden: 2, inputs: 3 };
        let params = [0.5, -1.0, 2.0, 0.1, 0.2, -0.3, 1.5, -0.7];
        let z = DMatrix::from_row_slice(2, 3, &params[..6]);
        let w = DVector::from_row_slice(&params[6..]);
        let u = [0.2, 0.9, 0.4];
        let a = shape.sample_loss(&params, &u, -1.0, 0.03);
        let b = relu_nn_loss(&z, &w, &u, -1.0, 0.03).unwrap();
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn relu_pieces_sum_to_abs() {
        use rand::Rng;
        let mut rng = crate::rng::stream_rng(3, crate::rng::Stream::Init);
        for _ in 0..1_000_000 {
            let x: f64 = rng.random_range(-1e3..1e3);
            assert_eq!(relu(x) + relu(-x), x.abs());
        }
    }
}
