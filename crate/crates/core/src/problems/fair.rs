//! Fair classification as a nonconvex-strongly-concave minimax problem.
//!
//! `f(x, y) = sum_c y_c L_c(x) - lambda/2 ||y||^2` where `L_c` is the mean
//! squared ReLU-network loss over class `c`.

use nalgebra::DVector;
use rand::RngCore;

use super::dataset::LocalDataset;
use super::relu::ReluShape;
use super::MinimaxProblem;
use crate::error::{Result, ZofedError};
use crate::projection::ConvexSet;

/// Mean unregularized loss per class; `None` for classes absent from `data`.
pub fn class_losses(shape: &ReluShape, x: &[f64], data: &LocalDataset, num_classes: usize) -> Vec<Option<f64>> {
    let mut sums = vec![0.0; num_classes];
    let mut counts = vec![0usize; num_classes];
    for l in 0..data.len() {
        let c = data.class(l);
        if c < num_classes {
            sums[c] += shape.sample_loss(x, data.row(l), data.label(l), 0.0);
            counts[c] += 1;
        }
    }
    sums.iter()
        .zip(&counts)
        .map(|(s, &n)| (n > 0).then(|| s / n as f64))
        .collect()
}

/// `sum_c y_c L_c(x) - lambda/2 ||y||^2` on one dataset.
pub fn fair_minimax_value(shape: &ReluShape, x: &DVector<f64>, y: &DVector<f64>, data: &LocalDataset, lambda: f64) -> Result<f64> {
    if x.len() != shape.num_params() {
        return Err(ZofedError::Dimension {
            expected: shape.num_params(),
            got: x.len(),
        });
    }
    let losses = class_losses(shape, x.as_slice(), data, y.len());
    let mut v = -0.5 * lambda * y.norm_squared();
    for (c, l) in losses.iter().enumerate() {
        let l = l.ok_or_else(|| ZofedError::config(format!("class {c} has no samples")))?;
        v += y[c] * l;
    }
    Ok(v)
}

pub struct FairMinimax {
    shape: ReluShape,
    lambda: f64,
    classes: usize,
    clients: Vec<LocalDataset>,
    class_counts: Vec<Vec<usize>>,
    set: ConvexSet,
}

impl FairMinimax {
    pub fn new(shape: ReluShape, lambda: f64, clients: Vec<LocalDataset>, set: ConvexSet) -> Result<Self> {
        if !(lambda > 0.0) {
            return Err(ZofedError::config("fair minimax needs lambda > 0"));
        }
        if clients.is_empty() {
            return Err(ZofedError::config("need at least one client"));
        }
        if clients.iter().any(|d| d.n_features() != shape.inputs) {
            return Err(ZofedError::config("client feature count does not match the network"));
        }
        set.check_dim(shape.num_params())?;
        let classes = clients.iter().map(|d| d.num_classes()).max().unwrap_or(0);
        let class_counts: Vec<Vec<usize>> = clients
            .iter()
            .map(|d| {
                let mut n = vec![0; classes];
                d.classes().iter().for_each(|&c| n[c] += 1);
                n
            })
            .collect();
        if let Some(c) = (0..classes).find(|&c| class_counts.iter().all(|n| n[c] == 0)) {
            return Err(ZofedError::config(format!("class {c} has no samples on any client")));
        }
        Ok(Self {
            shape,
            lambda,
            classes,
            clients,
            class_counts,
            set,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// `L_{i,c}(x)`, zero where client `i` holds no class-`c` rows.
    fn client_losses(&self, client: usize, x: &DVector<f64>) -> DVector<f64> {
        let l = class_losses(&self.shape, x.as_slice(), &self.clients[client], self.classes);
        DVector::from_iterator(self.classes, l.into_iter().map(|v| v.unwrap_or(0.0)))
    }
}

impl MinimaxProblem for FairMinimax {
    fn dim(&self) -> usize {
        self.shape.num_params()
    }
    fn y_dim(&self) -> usize {
        self.classes
    }
    fn num_clients(&self) -> usize {
        self.clients.len()
    }
    fn num_samples(&self, client: usize) -> usize {
        self.clients[client].len()
    }
    fn constraint(&self, _client: usize) -> &ConvexSet {
        &self.set
    }
    fn value(&self, client: usize, x: &DVector<f64>, y: &DVector<f64>, sample: usize) -> Result<f64> {
        let data = &self.clients[client];
        let c = data.class(sample);
        let weight = data.len() as f64 / self.class_counts[client][c] as f64;
        let loss = self.shape.sample_loss(x.as_slice(), data.row(sample), data.label(sample), 0.0);
        Ok(y[c] * loss * weight - 0.5 * self.lambda * y.norm_squared())
    }
    fn grad_y(&self, client: usize, x: &DVector<f64>, y: &DVector<f64>, _rng: &mut dyn RngCore) -> Result<DVector<f64>> {
        Ok(self.client_losses(client, x) - y * self.lambda)
    }
    fn concavity_modulus(&self) -> Option<f64> {
        Some(self.lambda)
    }
    fn smoothness_y(&self) -> f64 {
        self.lambda
    }
    fn exact_maximizer(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        let m = self.clients.len() as f64;
        let total = (0..self.clients.len()).fold(DVector::zeros(self.classes), |acc, i| acc + self.client_losses(i, x));
        Some(total / (m * self.lambda))
    }
}
