//! Federated engines and the bookkeeping they share.

pub mod bilevel;
pub mod nn;
pub mod twostage;

use std::fmt;

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Result, ZofedError};
use crate::problems::Variant;
use crate::projection::ConvexSet;
use crate::rng::{stream_rng, Stream};

/// How `x_hat_0` is chosen.
#[derive(Clone, Debug, PartialEq)]
pub enum InitialPoint {
    Given(DVector<f64>),
    /// Uniform in `[lo, hi]^n`, then projected onto the first client's set.
    UniformBox { lo: f64, hi: f64 },
}

/// Upper-level run parameters shared by all engines.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Number of clients `m`.
    pub clients: usize,
    pub gamma: f64,
    pub eta: f64,
    /// Local steps per round `H`.
    pub local_steps: usize,
    pub rounds: usize,
    pub seed: u64,
    pub parallel_clients: bool,
    /// Sample indices averaged per local step (single-level engine).
    pub batch_size: usize,
    /// Sphere draws averaged per local step (single-level engine).
    pub smoothing_draws: usize,
    /// Stationarity residual every `J` rounds; 0 disables it.
    pub residual_every: usize,
    pub residual_samples: usize,
    pub init: InitialPoint,
    /// Seed for the initial point draw; defaults to `seed`.
    pub init_seed: Option<u64>,
    /// Keep `x_hat_r` for every logged row in [`Trajectory::iterates`].
    pub record_iterates: bool,
}

impl RunConfig {
    pub fn new(clients: usize, gamma: f64, eta: f64, local_steps: usize, rounds: usize, seed: u64) -> Self {
        Self {
            clients,
            gamma,
            eta,
            local_steps,
            rounds,
            seed,
            parallel_clients: false,
            batch_size: 1,
            smoothing_draws: 1,
            residual_every: 10,
            residual_samples: 1000,
            init: InitialPoint::UniformBox { lo: -1.0, hi: 1.0 },
            init_seed: None,
            record_iterates: false,
        }
    }

    pub fn with_init(mut self, init: InitialPoint) -> Self {
        self.init = init;
        self
    }

    pub fn validate(&self, problem_clients: usize) -> Result<()> {
        if self.clients == 0 {
            return Err(ZofedError::config("clients must be >= 1"));
        }
        if self.clients != problem_clients {
            return Err(ZofedError::config(format!(
                "config has {} clients but the problem has {problem_clients}",
                self.clients
            )));
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(ZofedError::config(format!("gamma must be finite and >= 0, got {}", self.gamma)));
        }
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(ZofedError::config(format!("eta must be > 0, got {}", self.eta)));
        }
        if self.local_steps == 0 {
            return Err(ZofedError::config("H >= 1 required"));
        }
        if self.rounds == 0 {
            return Err(ZofedError::config("rounds must be >= 1"));
        }
        if self.batch_size == 0 || self.smoothing_draws == 0 {
            return Err(ZofedError::config("batch_size and smoothing_draws must be >= 1"));
        }
        if self.residual_every > 0 && self.residual_samples == 0 {
            return Err(ZofedError::config("residual_samples must be >= 1"));
        }
        if let InitialPoint::UniformBox { lo, hi } = self.init {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(ZofedError::config("initial box needs finite lo <= hi"));
            }
        }
        Ok(())
    }

    /// `x_hat_0` for a problem of dimension `dim` whose first set is `set`.
    pub fn initial_point(&self, dim: usize, set: &ConvexSet) -> Result<DVector<f64>> {
        let x = match &self.init {
            InitialPoint::Given(x) => {
                if x.len() != dim {
                    return Err(ZofedError::Dimension {
                        expected: dim,
                        got: x.len(),
                    });
                }
                x.clone()
            }
            InitialPoint::UniformBox { lo, hi } => {
                let mut rng = stream_rng(self.init_seed.unwrap_or(self.seed), Stream::Init);
                DVector::from_fn(dim, |_, _| if lo == hi { *lo } else { rng.random_range(*lo..=*hi) })
            }
        };
        Ok(set.project(&x))
    }

    pub(crate) fn residual_due(&self, round: usize) -> bool {
        self.residual_every > 0 && (round.is_multiple_of(self.residual_every) || round == self.rounds)
    }
}

/// One logged row, taken at `x_hat_r`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct RoundRecord {
    pub round: usize,
    /// Global step count `k = r H`.
    pub k: u64,
    pub loss: f64,
    /// Loss under the closed-form lower level, where available.
    pub exact_loss: Option<f64>,
    pub residual: Option<f64>,
    /// `(1/m) sum_i dist(x_hat_r, X_i)`.
    pub infeasibility: f64,
    /// Mean squared deviation of the client iterates aggregated into `x_hat_r`.
    pub consensus_error: f64,
    pub comm_rounds: usize,
    pub lower_rounds: Option<u64>,
    pub lower_iters: Option<u64>,
    /// Certified lower-level error of the most recent solve.
    pub eps: Option<f64>,
    pub projections: Option<u64>,
    pub validation_loss: Option<f64>,
    pub tau: Option<f64>,
    pub alpha: Option<f64>,
}

/// Event counts accumulated over a run.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    /// Two-point estimator evaluations (pairs of function calls).
    pub oracle_pairs: u64,
    /// Projections onto the upper-level sets.
    pub projections: u64,
    /// Server aggregation events.
    pub aggregations: u64,
    pub lower_calls: u64,
    pub lower_rounds: u64,
    pub lower_iters: u64,
    /// Projection steps inside VI solves.
    pub vi_projections: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub variant: Variant,
    pub records: Vec<RoundRecord>,
    pub x_final: DVector<f64>,
    pub counters: Counters,
    /// Per-round fingerprint of the lower-level solutions shared by clients.
    pub lower_checksums: Vec<u64>,
    /// `x_hat_r` per logged row; empty unless `record_iterates` is set.
    pub iterates: Vec<DVector<f64>>,
}

impl Trajectory {
    pub(crate) fn new(variant: Variant, x0: DVector<f64>) -> Self {
        Self {
            variant,
            records: Vec::new(),
            x_final: x0,
            counters: Counters::default(),
            lower_checksums: Vec::new(),
            iterates: Vec::new(),
        }
    }

    pub(crate) fn log(&mut self, rec: RoundRecord, x: &DVector<f64>, cfg: &RunConfig) {
        self.records.push(rec);
        if cfg.record_iterates {
            self.iterates.push(x.clone());
        }
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }
}

/// An aborted run together with everything recorded before the failure.
#[derive(Clone, Debug, PartialEq)]
pub struct RunFailure {
    pub error: ZofedError,
    pub partial: Box<Trajectory>,
}

impl fmt::Display for RunFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (after {} logged rounds)", self.error, self.partial.records.len())
    }
}

impl std::error::Error for RunFailure {}

pub type RunResult = std::result::Result<Trajectory, RunFailure>;

pub(crate) trait OrFail<T> {
    fn or_fail(self, traj: &Trajectory) -> std::result::Result<T, RunFailure>;
}

impl<T> OrFail<T> for Result<T> {
    fn or_fail(self, traj: &Trajectory) -> std::result::Result<T, RunFailure> {
        self.map_err(|error| RunFailure {
            error,
            partial: Box::new(traj.clone()),
        })
    }
}

/// Mean of `locals` as `x_0 + (1/m) sum_i (x_i - x_0)`, summed in ascending
/// client order. Identical inputs are returned exactly.
pub fn aggregate(locals: &[DVector<f64>]) -> Result<DVector<f64>> {
    let first = locals
        .first()
        .ok_or_else(|| ZofedError::Internal("aggregate of no vectors".into()))?;
    let mut dev = DVector::zeros(first.len());
    for x in &locals[1..] {
        if x.len() != first.len() {
            return Err(ZofedError::Internal(format!(
                "aggregate dimension mismatch: {} vs {}",
                x.len(),
                first.len()
            )));
        }
        dev += x - first;
    }
    if locals.len() == 1 {
        return Ok(first.clone());
    }
    Ok(first + dev / locals.len() as f64)
}

/// `(1/m) sum_i ||x_i - mean||^2`.
pub fn consensus_error(locals: &[DVector<f64>], mean: &DVector<f64>) -> f64 {
    locals.iter().map(|x| (x - mean).norm_squared()).sum::<f64>() / locals.len() as f64
}

/// `(1/m) sum_i dist(x, X_i)`.
pub fn infeasibility<'a>(x: &DVector<f64>, sets: impl Iterator<Item = &'a ConvexSet>) -> f64 {
    let (mut total, mut m) = (0.0, 0usize);
    for s in sets {
        total += s.dist(x);
        m += 1;
    }
    if m == 0 {
        0.0
    } else {
        total / m as f64
    }
}

/// Runs `f` on every client state, in parallel when asked. The error of the
/// lowest-numbered failing client is returned, independent of scheduling.
pub(crate) fn for_each_client<T, F>(states: &mut [T], parallel: bool, f: F) -> Result<()>
where
    T: Send,
    F: Fn(usize, &mut T) -> Result<()> + Sync,
{
    if parallel {
        let results: Vec<Result<()>> = states.par_iter_mut().enumerate().map(|(i, s)| f(i, s)).collect();
        results.into_iter().collect()
    } else {
        states.iter_mut().enumerate().try_for_each(|(i, s)| f(i, s))
    }
}

/// Order-sensitive fingerprint of vectors' bit patterns.
pub(crate) fn checksum<'a>(vs: impl IntoIterator<Item = &'a DVector<f64>>) -> u64 {
    let words: Vec<u64> = vs.into_iter().flat_map(|v| v.iter().map(|x| x.to_bits())).collect();
    crate::rng::derive_seed(0, &words)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    #[test]
    fn aggregate_examples() {
        let x = dvector![0.1, -3.7, 1e-300];
        assert_eq!(aggregate(&[x.clone(), x.clone(), x.clone()]).unwrap(), x);
        assert_eq!(aggregate(&[dvector![0.0, 2.0], dvector![2.0, 0.0]]).unwrap(), dvector![1.0, 1.0]);
        assert!(aggregate(&[dvector![0.0], dvector![1.0, 2.0]]).is_err());
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn parallel_map_reports_lowest_failing_client() {
        let mut states = vec![0usize; 16];
        let err = for_each_client(&mut states, true, |i, s| {
            *s = i;
            if i == 5 || i == 11 {
                Err(ZofedError::oracle("boom").at(i, 0))
            } else {
                Ok(())
            }
        })
        .unwrap_err();
        assert_eq!(
            err,
            ZofedError::Oracle {
                client: Some(5),
                step: Some(0),
                message: "boom".into()
            }
        );
    }

    #[test]
    fn config_validation() {
        let cfg = RunConfig::new(2, 0.1, 0.1, 1, 10, 0);
        assert!(cfg.validate(2).is_ok());
        assert!(cfg.validate(3).is_err());
        let mut bad = cfg.clone();
        bad.local_steps = 0;
        assert!(bad.validate(2).unwrap_err().to_string().contains("H >= 1"));
        bad = cfg.clone();
        bad.eta = 0.0;
        assert!(bad.validate(2).is_err());
    }

    #[test]
    fn initial_point_is_projected_and_seeded() {
        let set = ConvexSet::uniform_box(3, 0.0, 0.5).unwrap();
        let cfg = RunConfig::new(1, 0.1, 0.1, 1, 1, 42).with_init(InitialPoint::UniformBox { lo: -1.0, hi: 1.0 });
        let a = cfg.initial_point(3, &set).unwrap();
        assert!(set.contains(&a, 0.0));
        assert_eq!(a, cfg.initial_point(3, &set).unwrap());
        let given = cfg.with_init(InitialPoint::Given(dvector![2.0, -1.0, 0.25]));
        assert_eq!(given.initial_point(3, &set).unwrap(), dvector![0.5, 0.0, 0.25]);
        assert!(given.initial_point(2, &set).is_err());
    }
}
